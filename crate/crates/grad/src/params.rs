use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::container::{self, Record};
use crate::error::{GradError, Result};
use crate::graph::{Graph, Gradients, Var};
use crate::tensor::{Float, Tensor};

/// How a parameter was initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal { std: f64 },
    Zeros,
    Constant(f64),
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub init: Init,
}

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, uniquely keyed parameter tensors of one or more networks.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add<R: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut R) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(GradError::Contract(format!("duplicate parameter name {name}")));
        }
        let value = match init {
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).map_err(|e| GradError::Config(e.to_string()))?;
                Tensor::from_fn(shape, |_| T::lit(dist.sample(rng)))
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(c) => Tensor::full(shape, T::lit(c)),
        };
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, init });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Copies every parameter into `graph` as a leaf. Frozen bindings are
    /// constants: no gradient flows into them.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: bool) -> Result<Bound> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    graph.param(p.value.clone())
                } else {
                    graph.constant(p.value.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Bound { vars })
    }

    /// Gradients of every parameter in binding order (zeros where the root
    /// did not depend on the parameter).
    pub fn collect_grads(&self, bound: &Bound, grads: &mut Gradients<T>) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }

    pub fn to_records(&self, prefix: &str) -> Vec<Record> {
        self.params
            .iter()
            .map(|p| Record {
                name: format!("{prefix}{}", p.name),
                shape: p.value.shape().to_vec(),
                data: p.value.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
            })
            .collect()
    }

    /// Overwrites parameter values from records named `prefix + name`.
    /// Every parameter must be present with a matching shape.
    pub fn load_records(&mut self, records: &[Record], prefix: &str) -> Result<()> {
        let by_name: HashMap<&str, &Record> = records.iter().map(|r| (r.name.as_str(), r)).collect();
        for p in &mut self.params {
            let key = format!("{prefix}{}", p.name);
            let r = by_name
                .get(key.as_str())
                .ok_or_else(|| GradError::Format(format!("missing parameter {key}")))?;
            if r.shape != p.value.shape() {
                return Err(GradError::Format(format!(
                    "parameter {key}: shape {:?} in file, expected {:?}",
                    r.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(&r.shape, r.data.iter().map(|&v| T::lit(v as f64)).collect())?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.to_records(""))
    }

    pub fn load(&mut self, path: &Path) -> Result<()> {
        let records = container::read_file(path)?;
        self.load_records(&records, "")
    }
}

/// Graph variables of a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Binding over caller-supplied variables, aligned with the store's
    /// parameter order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
