mod common;

use bevda_core::bev::{BevImage, SemanticGrid};
use bevda_core::da::{
    adapt, augment, co_occupied, load_segmenter, loss_adv_discriminator, loss_adv_generator, loss_cycle,
    loss_identity, occupied_accuracy, save_segmenter, segment, semantic_term, total_generator_loss, train_da,
    train_segmenter, AugmentConfig, DaModel, DaTrainer, LossComponents, LossWeights, PoolDecision, ReplayPool, Sample,
    SegTrainConfig, TrainConfig,
};
use bevda_core::nets::{
    Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Mode, Segmenter, SegmenterConfig,
};
use bevda_core::palette::NUM_CLASSES;
use bevda_core::rng::{stream, Stream};
use bevda_core::scene::LidarModel;
use bevda_core::Error;
use bevda_grad::{Graph, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-9;

fn full(v: f64) -> Tensor<f64> {
    Tensor::full(&[1, 1, 4, 4], v)
}

fn eval2(a: Tensor<f64>, b: Tensor<f64>, f: impl Fn(&mut Graph<f64>, Var, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let (a, b) = (g.constant(a).unwrap(), g.constant(b).unwrap());
    let l = f(&mut g, a, b);
    g.value(l).item().unwrap()
}

fn eval4(t: [Tensor<f64>; 4], f: impl Fn(&mut Graph<f64>, [Var; 4]) -> Var) -> f64 {
    let mut g = Graph::new();
    let v = t.map(|t| g.constant(t).unwrap());
    let l = f(&mut g, v);
    g.value(l).item().unwrap()
}

fn disc(real: f64, fake: f64, a: f64) -> f64 {
    eval2(full(real), full(fake), |g, r, f| loss_adv_discriminator(g, r, f, a).unwrap())
}

fn gen(d: f64) -> f64 {
    eval2(full(d), full(d), |g, a, b| loss_adv_generator(g, a, b).unwrap())
}

#[test]
fn discriminator_loss_examples() {
    assert!(disc(1.0, 0.0, 1.0).abs() < TOL);
    assert!((disc(0.5, 0.5, 1.0) - 0.5).abs() < TOL);
    assert!((disc(0.5, 0.5, 0.8) - 0.34).abs() < TOL);
}

#[test]
fn generator_loss_examples() {
    assert!(gen(1.0).abs() < TOL);
    assert!((gen(0.0) - 2.0).abs() < TOL);
    assert!((gen(0.5) - 0.5).abs() < TOL);
}

#[test]
fn cycle_loss_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[1, 3, 5, 5], |_| rng.random_range(-1.0..1.0));
    let y = Tensor::from_fn(&[1, 3, 5, 5], |_| rng.random_range(-1.0..1.0));
    let same = eval4([x.clone(), x.clone(), y.clone(), y.clone()], |g, [a, b, c, d]| loss_cycle(g, a, b, c, d).unwrap());
    assert!(same.abs() < TOL);
    let shifted = Tensor::from_fn(&[1, 3, 5, 5], |i| x.data()[i] + 0.1);
    let off = eval4([x, shifted, y.clone(), y], |g, [a, b, c, d]| loss_cycle(g, a, b, c, d).unwrap());
    assert!((off - 0.1).abs() < TOL);
}

#[test]
fn identity_loss_examples() {
    let y = full(0.5);
    let x = full(-0.25);
    let zero = eval4([y.clone(), y.clone(), x.clone(), x.clone()], |g, [a, b, c, d]| loss_identity(g, a, b, c, d).unwrap());
    assert!(zero.abs() < TOL);
    let neg = eval4([y, full(-0.5), x.clone(), x], |g, [a, b, c, d]| loss_identity(g, a, b, c, d).unwrap());
    assert!((neg - 1.0).abs() < TOL);
}

/// Logits `[1, 8, 2, 2]` that put `margin` on each cell's label.
fn confident_logits(labels: &[u8], margin: f64) -> Tensor<f64> {
    let plane = labels.len();
    let mut t = Tensor::zeros(&[1, NUM_CLASSES, 2, 2]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[l as usize * plane + i] = margin;
    }
    t
}

fn occupied_translation(occupied: [bool; 4]) -> Tensor<f64> {
    let mut t = Tensor::full(&[1, 3, 2, 2], -1.0);
    for (i, &o) in occupied.iter().enumerate() {
        if o {
            t.data_mut()[8 + i] = 1.0;
            t.data_mut()[i] = 0.3;
        }
    }
    t
}

fn sem(logits: Tensor<f64>, labels: &[u8], before: &[bool], translated: Tensor<f64>) -> f64 {
    let weights = [1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0];
    eval2(logits, translated, |g, l, t| semantic_term(g, l, labels, before, t, &weights).unwrap())
}

#[test]
fn semantic_term_examples() {
    let labels = [1, 5, 6, 7];
    let all = [true; 4];
    let confident = sem(confident_logits(&labels, 60.0), &labels, &all, occupied_translation(all));
    assert!(confident.abs() < TOL, "{confident}");

    let none = sem(Tensor::zeros(&[1, NUM_CLASSES, 2, 2]), &labels, &[false; 4], occupied_translation(all));
    assert_eq!(none, 0.0);
    let vacated = sem(Tensor::zeros(&[1, NUM_CLASSES, 2, 2]), &labels, &all, occupied_translation([false; 4]));
    assert_eq!(vacated, 0.0);

    let uniform = sem(Tensor::zeros(&[1, NUM_CLASSES, 2, 2]), &[1, 2, 3, 4], &all, occupied_translation(all));
    assert!((uniform - 8f64.ln()).abs() < TOL);
}

#[test]
fn semantic_term_weights_agent_cells() {
    let agents = sem(Tensor::zeros(&[1, NUM_CLASSES, 2, 2]), &[5, 6, 7, 5], &[true; 4], occupied_translation([true; 4]));
    assert!((agents - 2.0 * 8f64.ln()).abs() < TOL);
}

#[test]
fn co_occupancy_needs_both_images() {
    let t = occupied_translation([true, true, false, false]).cast::<f32>();
    assert_eq!(co_occupied(&[true, false, true, false], &t).unwrap(), vec![true, false, false, false]);
    assert!(matches!(co_occupied(&[true; 3], &t), Err(Error::Contract(_))));
}

#[test]
fn total_loss_examples() {
    let c = LossComponents {
        adv: 1.0,
        cyc: 2.0,
        idt: 3.0,
        sem: 4.0,
    };
    assert!((total_generator_loss(&LossWeights::default(), &c) - 53.0).abs() < TOL);
    let off = LossWeights {
        cyc: 0.0,
        idt: 0.0,
        sem: 0.0,
    };
    assert_eq!(total_generator_loss(&off, &c), 1.0);
    let baseline = LossWeights {
        sem: 0.0,
        ..LossWeights::default()
    };
    assert_eq!(total_generator_loss(&baseline, &c), 51.0);
}

#[test]
fn pool_first_query_returns_input() {
    let mut pool = ReplayPool::new(50);
    assert_eq!(pool.query(7, &mut ChaCha8Rng::seed_from_u64(0)), 7);
    assert_eq!(pool.len(), 1);
}

#[test]
fn forced_swap_returns_an_earlier_image() {
    let mut pool = ReplayPool::new(3);
    for i in 0..3 {
        pool.query_with(i, PoolDecision::ReturnInput);
    }
    for k in 0..6 {
        let out = pool.query_with(10 + k, PoolDecision::Swap(k));
        assert!(out < 10 + k, "swap returned the fresh image");
    }
}

#[test]
fn zero_probabilities_leave_samples_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (src, _) = common::simulated_pair(1, 0, &common::coarse_grid(), &LidarModel::default());
    let mut bev = src.bev.clone();
    let mut sem = src.semantic.clone().unwrap();
    augment(&mut bev, Some(&mut sem), &AugmentConfig::none(), &mut rng).unwrap();
    assert_eq!(bev, src.bev);
    assert_eq!(Some(sem), src.semantic);
}

#[test]
fn double_flip_is_identity() {
    let (src, _) = common::simulated_pair(1, 1, &common::coarse_grid(), &LidarModel::default());
    let flip = AugmentConfig {
        flip_p: 1.0,
        ..AugmentConfig::none()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut bev = src.bev.clone();
    let mut sem = src.semantic.clone().unwrap();
    augment(&mut bev, Some(&mut sem), &flip, &mut rng).unwrap();
    assert_ne!(bev, src.bev);
    assert_eq!(sem, src.semantic.as_ref().unwrap().flip());
    augment(&mut bev, Some(&mut sem), &flip, &mut rng).unwrap();
    assert_eq!(bev, src.bev);
    assert_eq!(Some(sem), src.semantic);
}

#[test]
fn invalid_augment_config_is_rejected() {
    let cfg = AugmentConfig {
        noise_p: 1.5,
        ..AugmentConfig::none()
    };
    let mut bev = BevImage::zeros(2, 2);
    assert!(matches!(augment(&mut bev, None, &cfg, &mut ChaCha8Rng::seed_from_u64(0)), Err(Error::Config(_))));
}

fn tiny_gen(seed: u64) -> Generator<f32> {
    let cfg = GeneratorConfig {
        base_width: 4,
        residual_blocks: 1,
        ..GeneratorConfig::default()
    };
    Generator::new(cfg, 0.02, &mut stream(seed, Stream::Init)).unwrap()
}

#[test]
fn networks_keep_spatial_shape() {
    let mut rng = stream(4, Stream::Init);
    let seg = Segmenter::<f32>::new(SegmenterConfig::default(), &mut rng).unwrap();
    let gen = tiny_gen(4);
    let d = Discriminator::<f32>::new(DiscriminatorConfig::default(), 0.02, &mut rng).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 3, 96, 96], -0.5f32)).unwrap();
    let pg = gen.store.bind(&mut g, false).unwrap();
    let y = gen.forward(&mut g, &pg, x, &mut Mode::Eval).unwrap();
    assert_eq!(g.shape(y), &[1, 3, 96, 96]);
    assert!(g.value(y).data().iter().all(|v| v.abs() < 1.0));
    let ps = seg.store.bind(&mut g, false).unwrap();
    let l = seg.forward(&mut g, &ps, x, &mut Mode::Eval).unwrap();
    assert_eq!(g.shape(l), &[1, NUM_CLASSES, 96, 96]);
    let pd = d.store.bind(&mut g, false).unwrap();
    let p = d.forward(&mut g, &pd, x).unwrap();
    assert_eq!(g.shape(p)[..2], [1, 1]);
}

#[test]
fn default_discriminator_sees_70_pixels() {
    let d = Discriminator::<f32>::new(DiscriminatorConfig::default(), 0.02, &mut stream(0, Stream::Init)).unwrap();
    assert_eq!(d.receptive_field(), 70);
}

#[test]
fn nan_input_is_rejected() {
    let gen = tiny_gen(5);
    let mut img = BevImage::zeros(8, 8);
    img.data[3] = f32::NAN;
    assert!(adapt(&gen, &img).is_err());
    assert!(adapt(&Generator::identity(), &img).is_err());
}

#[test]
fn adapt_output_is_valid_and_deterministic() {
    let (src, _) = common::simulated_pair(2, 0, &common::coarse_grid(), &LidarModel::default());
    let gen = tiny_gen(6);
    let a = adapt(&gen, &src.bev).unwrap();
    a.validate().unwrap();
    assert_eq!(a, adapt(&gen, &src.bev).unwrap());
    assert_eq!(adapt(&Generator::identity(), &src.bev).unwrap(), src.bev);
}

fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        crop: 32,
        epochs: 1,
        generator: GeneratorConfig {
            base_width: 4,
            residual_blocks: 1,
            ..GeneratorConfig::default()
        },
        discriminator: DiscriminatorConfig { base_width: 4 },
        ..TrainConfig::default()
    }
}

fn tiny_segmenter() -> Segmenter<f32> {
    Segmenter::new(
        SegmenterConfig {
            base_width: 4,
            dropout: 0.2,
        },
        &mut stream(9, Stream::Init),
    )
    .unwrap()
}

fn datasets(n: u64) -> (Vec<Sample>, Vec<Sample>) {
    (0..n).map(|i| common::simulated_pair(11, i, &common::coarse_grid(), &LidarModel::default())).unzip()
}

#[test]
fn training_is_bitwise_reproducible() {
    let (src, tgt) = datasets(3);
    let cls = tiny_segmenter();
    let cfg = TrainConfig {
        max_steps: Some(4),
        ..tiny_train_config()
    };
    let a = train_da(&src, &tgt, Some(&cls), &cfg, 5, &mut |_| {}).unwrap();
    let b = train_da(&src, &tgt, Some(&cls), &cfg, 5, &mut |_| {}).unwrap();
    assert_eq!(a.trace.len(), 3);
    assert_eq!(a.trace, b.trace);
    let bits = |m: &DaModel| m.to_records().into_iter().map(|r| (r.name, r.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>())).collect::<Vec<_>>();
    assert_eq!(bits(&a.model), bits(&b.model));
    let c = train_da(&src, &tgt, Some(&cls), &cfg, 6, &mut |_| {}).unwrap();
    assert_ne!(a.trace, c.trace);
}

/// D_X, D_Y, adversarial, cycle, identity, semantic and total losses of the
/// first step on `golden_step_inputs`, recorded from a verified run. The
/// GEMM kernel is picked at run time, so other CPUs may differ in the last
/// bits; the comparison is relative 1e-5.
const GOLDEN_STEP: [f64; 7] = [
    0.602_757_930_755_615_2,
    0.874_944_567_680_358_9,
    2.343_750_476_837_158,
    1.728_364_944_458_007_8,
    1.719_043_374_061_584_5,
    4.956_757_545_471_191,
    39.296_211_242_675_78,
];

fn golden_step_inputs() -> (Tensor<f32>, Tensor<f32>) {
    let x = Tensor::from_fn(&[1, 3, 32, 32], |i| if (i * 7919) % 5 == 0 { 0.5 } else { -1.0 });
    let y = Tensor::from_fn(&[1, 3, 32, 32], |i| if (i * 104_729) % 7 == 0 { 0.3 } else { -1.0 });
    (x, y)
}

#[test]
fn one_step_matches_golden_trace() {
    let cls = tiny_segmenter();
    let (x, y) = golden_step_inputs();
    let mut t = DaTrainer::new(tiny_train_config(), Some(&cls), 42).unwrap();
    let r = t.step(&x, &y, 0).unwrap();
    let got = [r.d_x, r.d_y, r.adv_gen, r.cyc, r.idt, r.sem.unwrap(), r.total];
    for (g, w) in got.iter().zip(GOLDEN_STEP) {
        assert!((g - w).abs() <= 1e-5 * w.abs().max(1.0), "{got:?}");
    }
}

#[test]
fn without_semantic_weight_the_segmenter_is_ignored() {
    let cls = tiny_segmenter();
    let (x, y) = golden_step_inputs();
    let cfg = TrainConfig {
        lambda_sem: 0.0,
        ..tiny_train_config()
    };
    let mut with = DaTrainer::new(cfg.clone(), Some(&cls), 1).unwrap();
    let mut without = DaTrainer::new(cfg, None, 1).unwrap();
    let a = with.step(&x, &y, 0).unwrap();
    assert_eq!(a.sem, None);
    assert_eq!(a, without.step(&x, &y, 0).unwrap());
}

#[test]
fn every_generator_parameter_receives_gradient() {
    let cls = tiny_segmenter();
    let (src, tgt) = datasets(2);
    let to_net = |s: &Sample| bevda_core::bev::normalize_for_net(&s.bev.crop(8, 16, 32, 32).unwrap()).to_tensor();
    let mut t = DaTrainer::new(tiny_train_config(), Some(&cls), 3).unwrap();
    let pass = t.generator_pass(&to_net(&src[0]), &to_net(&tgt[1])).unwrap();
    assert!(pass.sem_enabled);
    let names: Vec<String> = t.model.g.store.iter().map(|p| p.name.clone()).collect();
    for (grads, which) in [(&pass.grads_g, "G"), (&pass.grads_f, "F")] {
        assert_eq!(grads.len(), names.len());
        for (gr, name) in grads.iter().zip(&names) {
            assert!(gr.data().iter().any(|&v| v != 0.0), "{which}/{name} has a zero gradient");
        }
    }
}

#[test]
fn training_leaves_the_segmenter_untouched() {
    let cls = tiny_segmenter();
    let before = cls.to_records("CLS/");
    let (src, tgt) = datasets(2);
    let cfg = TrainConfig {
        max_steps: Some(2),
        ..tiny_train_config()
    };
    train_da(&src, &tgt, Some(&cls), &cfg, 0, &mut |_| {}).unwrap();
    let after = cls.to_records("CLS/");
    assert_eq!(before.len(), after.len());
    for (a, b) in before.iter().zip(&after) {
        assert!(a.data.iter().zip(&b.data).all(|(p, q)| p.to_bits() == q.to_bits()), "{}", a.name);
    }
}

#[test]
fn empty_dataset_is_a_config_error() {
    let (src, _) = datasets(1);
    let cfg = TrainConfig {
        lambda_sem: 0.0,
        ..tiny_train_config()
    };
    assert!(matches!(train_da(&src, &[], None, &cfg, 0, &mut |_| {}), Err(Error::Config(_))));
}

#[test]
fn checkpoints_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let m = DaModel::new(&tiny_train_config(), 8).unwrap();
    let p = d.path().join("da.ckpt");
    m.save(&p).unwrap();
    assert_eq!(DaModel::load(&p).unwrap().to_records(), m.to_records());

    let cls = tiny_segmenter();
    let sp = d.path().join("cls.ckpt");
    save_segmenter(&cls, &sp).unwrap();
    assert_eq!(load_segmenter(&sp).unwrap().to_records("CLS/"), cls.to_records("CLS/"));
}

#[test]
fn missing_checkpoint_is_io_error() {
    let d = tempfile::tempdir().unwrap();
    assert!(matches!(DaModel::load(&d.path().join("none.ckpt")), Err(Error::Io { .. })));
    assert!(matches!(load_segmenter(&d.path().join("none.ckpt")), Err(Error::Io { .. })));
}

fn seg_config(epochs: usize) -> SegTrainConfig {
    SegTrainConfig {
        epochs,
        crop: 32,
        net: SegmenterConfig {
            base_width: 4,
            dropout: 0.2,
        },
        ..SegTrainConfig::default()
    }
}

#[test]
fn segmenter_loss_falls_over_five_epochs() {
    let (src, _) = datasets(4);
    let deltas: Vec<f64> = (0..3)
        .map(|seed| {
            let out = train_segmenter(&src, &seg_config(5), seed, &mut |_| {}).unwrap();
            let mean = |e: usize| {
                let v: Vec<f64> = out.trace.iter().filter(|r| r.epoch == e).map(|r| r.loss).collect();
                v.iter().sum::<f64>() / v.len() as f64
            };
            mean(4) - mean(0)
        })
        .collect();
    assert!(common::median(deltas.clone()) < 0.0, "{deltas:?}");
}

#[test]
fn segmenter_needs_labels() {
    let (_, tgt) = datasets(1);
    assert!(matches!(train_segmenter(&tgt, &seg_config(1), 0, &mut |_| {}), Err(Error::Config(_))));
}

/// Mean over present classes of the per-class recall on occupied cells.
fn balanced_accuracy(pred: &SemanticGrid, truth: &SemanticGrid) -> f64 {
    let mut hit = [0usize; NUM_CLASSES];
    let mut n = [0usize; NUM_CLASSES];
    for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
        if t != 0 {
            n[t as usize] += 1;
            hit[t as usize] += (p == t) as usize;
        }
    }
    let present: Vec<f64> = (0..NUM_CLASSES).filter(|&c| n[c] > 0).map(|c| hit[c] as f64 / n[c] as f64).collect();
    present.iter().sum::<f64>() / present.len() as f64
}

#[test]
fn untrained_segmenter_is_near_chance() {
    let (src, _) = datasets(3);
    for seed in 0..3 {
        let net = Segmenter::<f32>::new(SegmenterConfig::default(), &mut stream(seed, Stream::Init)).unwrap();
        for s in &src {
            let truth = s.semantic.as_ref().unwrap();
            let pred = segment(&net, &s.bev).unwrap();
            let acc = balanced_accuracy(&pred, truth);
            assert!(acc <= 0.4, "seed {seed}: balanced accuracy {acc}");
            assert!(occupied_accuracy(&pred, truth).is_some());
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn losses_are_non_negative(seed in any::<u64>(), a in 0.0..1.0f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = || Tensor::from_fn(&[1, 3, 3, 5], |_| rng.random_range(-2.0..2.0));
        let [p, q, r, s] = [t(), t(), t(), t()];
        prop_assert!(eval2(p.clone(), q.clone(), |g, x, y| loss_adv_discriminator(g, x, y, a).unwrap()) >= 0.0);
        prop_assert!(eval2(p.clone(), q.clone(), |g, x, y| loss_adv_generator(g, x, y).unwrap()) >= 0.0);
        prop_assert!(eval4([p.clone(), q.clone(), r.clone(), s.clone()], |g, [a, b, c, d]| loss_cycle(g, a, b, c, d).unwrap()) >= 0.0);
        let idt = eval4([p.clone(), q.clone(), r.clone(), s.clone()], |g, [a, b, c, d]| loss_identity(g, a, b, c, d).unwrap());
        prop_assert!(idt >= 0.0);
        let swapped = eval4([r, s, p, q], |g, [a, b, c, d]| loss_identity(g, a, b, c, d).unwrap());
        prop_assert!((idt - swapped).abs() < 1e-12);
        let w = LossWeights::default();
        let c = LossComponents { adv: a, cyc: idt, idt: a * 2.0, sem: idt * 3.0 };
        prop_assert!(total_generator_loss(&w, &c) >= 0.0);
    }

    #[test]
    fn semantic_term_is_non_negative(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(&[1, NUM_CLASSES, 2, 2], |_| rng.random_range(-5.0..5.0));
        let labels: Vec<u8> = (0..4).map(|_| rng.random_range(0..NUM_CLASSES as u8)).collect();
        let before: Vec<bool> = (0..4).map(|_| rng.random_bool(0.5)).collect();
        let occ = [rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5), rng.random_bool(0.5)];
        prop_assert!(sem(logits, &labels, &before, occupied_translation(occ)) >= 0.0);
    }

    #[test]
    fn pool_never_exceeds_capacity(cap in 0usize..60, seed in any::<u64>(), n in 0usize..200) {
        let mut pool = ReplayPool::new(cap);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..n {
            let out = pool.query(i, &mut rng);
            prop_assert!(out <= i);
            prop_assert!(pool.len() <= cap);
        }
    }

    #[test]
    fn augmented_samples_stay_valid(seed in any::<u64>(), index in 0u64..4) {
        let (src, _) = common::simulated_pair(3, index, &common::coarse_grid(), &LidarModel { beam_count: 16, horizontal_resolution: 1.0, ..LidarModel::default() });
        let cfg = AugmentConfig { flip_p: 0.5, dropout_p: 0.7, dropout_rate: 0.3, noise_p: 0.7, noise_sigma: 0.2 };
        let mut bev = src.bev.clone();
        let mut sem = src.semantic.clone().unwrap();
        augment(&mut bev, Some(&mut sem), &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        bev.validate().unwrap();
        prop_assert!(bev.occupied_count() <= src.bev.occupied_count());
        for (occ, &l) in bev.occupancy_mask().iter().zip(&sem.labels) {
            prop_assert_eq!(*occ, l != 0);
        }
    }

    #[test]
    fn adapt_restores_invariants_for_any_input(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = BevImage::zeros(12, 12);
        let n = 144;
        for i in 0..n {
            if rng.random_bool(0.4) {
                img.data[i] = rng.random_range(0.0..1.0);
                img.data[n + i] = rng.random_range(0.2..1.0);
                img.data[2 * n + i] = 1.0;
            }
        }
        let out = adapt(&tiny_gen(seed % 4), &img).unwrap();
        out.validate().unwrap();
    }
}
