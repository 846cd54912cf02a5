//! Semantic classes shared by the simulator, the encoder and the networks.

pub const NUM_CLASSES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum SemanticClass {
    Empty = 0,
    Ground = 1,
    Building = 2,
    Pole = 3,
    Vegetation = 4,
    Car = 5,
    Pedestrian = 6,
    Cyclist = 7,
}

impl SemanticClass {
    pub const ALL: [SemanticClass; NUM_CLASSES] = [
        SemanticClass::Empty,
        SemanticClass::Ground,
        SemanticClass::Building,
        SemanticClass::Pole,
        SemanticClass::Vegetation,
        SemanticClass::Car,
        SemanticClass::Pedestrian,
        SemanticClass::Cyclist,
    ];

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            SemanticClass::Empty => "empty",
            SemanticClass::Ground => "ground",
            SemanticClass::Building => "building",
            SemanticClass::Pole => "pole",
            SemanticClass::Vegetation => "vegetation",
            SemanticClass::Car => "car",
            SemanticClass::Pedestrian => "pedestrian",
            SemanticClass::Cyclist => "cyclist",
        }
    }

    /// Road agents the detector cares about.
    pub fn is_of_interest(self) -> bool {
        matches!(self, SemanticClass::Car | SemanticClass::Pedestrian | SemanticClass::Cyclist)
    }

    /// Render color.
    pub fn color(self) -> [u8; 3] {
        match self {
            SemanticClass::Empty => [0, 0, 0],
            SemanticClass::Ground => [128, 64, 128],
            SemanticClass::Building => [70, 70, 70],
            SemanticClass::Pole => [220, 220, 0],
            SemanticClass::Vegetation => [107, 142, 35],
            SemanticClass::Car => [0, 0, 255],
            SemanticClass::Pedestrian => [220, 20, 60],
            SemanticClass::Cyclist => [255, 128, 0],
        }
    }
}

/// Per-class loss weights: 2 for cars, pedestrians and cyclists, 1 otherwise.
pub fn default_class_weights() -> [f64; NUM_CLASSES] {
    let mut w = [1.0; NUM_CLASSES];
    for c in SemanticClass::ALL {
        if c.is_of_interest() {
            w[c as usize] = 2.0;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn ids_round_trip_and_colors_are_distinct() {
        for c in SemanticClass::ALL {
            assert_eq!(SemanticClass::from_id(c.id()), Some(c));
        }
        assert_eq!(SemanticClass::from_id(8), None);
        let colors: HashSet<_> = SemanticClass::ALL.iter().map(|c| c.color()).collect();
        assert_eq!(colors.len(), NUM_CLASSES);
    }

    #[test]
    fn weights_double_agents() {
        assert_eq!(default_class_weights(), [1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }
}
