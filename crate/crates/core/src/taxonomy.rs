//! The 26 discrete emotion categories and the valence/arousal/dominance scale.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CATEGORIES: usize = 26;
pub const NUM_DIMS: usize = 3;

/// Lowest and highest raw annotation value of a continuous dimension.
pub const RAW_MIN: u8 = 1;
pub const RAW_MAX: u8 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmotionCategory {
    pub id: u8,
    pub name: &'static str,
    pub definition: &'static str,
}

macro_rules! categories {
    ($(($id:expr, $name:expr, $def:expr)),* $(,)?) => {
        pub const CATEGORIES: [EmotionCategory; NUM_CATEGORIES] = [
            $(EmotionCategory { id: $id, name: $name, definition: $def }),*
        ];
    };
}

categories![
    (1, "Affection", "fond feelings; love; tenderness"),
    (2, "Anger", "intense displeasure or rage; furious; resentful"),
    (3, "Annoyance", "bothered by something or someone; irritated; impatient; frustrated"),
    (4, "Anticipation", "state of looking forward; hoping on or getting prepared for possible future events"),
    (5, "Aversion", "feeling disgust, dislike, repulsion; feeling hate"),
    (6, "Confidence", "feeling of being certain; conviction that an outcome will be favorable; encouraged; proud"),
    (7, "Disapproval", "feeling that something is wrong or reprehensible; contempt; hostile"),
    (8, "Disconnection", "feeling not interested in the main event of the surrounding; indifferent; bored; distracted"),
    (9, "Disquietment", "nervous; worried; upset; anxious; tense; pressured; alarmed"),
    (10, "Doubt/Confusion", "difficulty to understand or decide; thinking about different options"),
    (11, "Embarrassment", "feeling ashamed or guilty"),
    (12, "Engagement", "paying attention to something; absorbed into something; curious; interested"),
    (13, "Esteem", "feelings of favourable opinion or judgement; respect; admiration; gratefulness"),
    (14, "Excitement", "feeling enthusiasm; stimulated; energetic"),
    (15, "Fatigue", "weariness; tiredness; sleepy"),
    (16, "Fear", "feeling suspicious or afraid of danger, threat, evil or pain; horror"),
    (17, "Happiness", "feeling delighted; feeling enjoyment or amusement"),
    (18, "Pain", "physical suffering"),
    (19, "Peace", "well being and relaxed; no worry; having positive thoughts or sensations; satisfied"),
    (20, "Pleasure", "feeling of delight in the senses"),
    (21, "Sadness", "feeling unhappy, sorrow, disappointed, or discouraged"),
    (22, "Sensitivity", "feeling of being physically or emotionally wounded; feeling delicate or vulnerable"),
    (23, "Suffering", "psychological or emotional pain; distressed; anguished"),
    (24, "Surprise", "sudden discovery of something unexpected"),
    (25, "Sympathy", "state of sharing others' emotions, goals or troubles; supportive; compassionate"),
    (26, "Yearning", "strong desire to have something; jealous; envious; lust"),
];

/// A category id in `1..=26`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct CategoryId(u8);

impl CategoryId {
    pub fn new(id: u8) -> Result<Self> {
        if (1..=NUM_CATEGORIES as u8).contains(&id) {
            Ok(CategoryId(id))
        } else {
            Err(Error::invalid(format!(
                "category id {id} outside 1..={NUM_CATEGORIES}"
            )))
        }
    }

    /// Category at zero-based position `index`.
    pub fn from_index(index: usize) -> Self {
        assert!(index < NUM_CATEGORIES, "category index {index} out of range");
        CategoryId(index as u8 + 1)
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn info(self) -> &'static EmotionCategory {
        &CATEGORIES[self.index()]
    }

    pub fn name(self) -> &'static str {
        self.info().name
    }

    pub fn by_name(name: &str) -> Option<Self> {
        CATEGORIES
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
            .map(|c| CategoryId(c.id))
    }

    pub fn all() -> impl Iterator<Item = CategoryId> {
        (1..=NUM_CATEGORIES as u8).map(CategoryId)
    }
}

impl TryFrom<u8> for CategoryId {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        CategoryId::new(v)
    }
}

impl From<CategoryId> for u8 {
    fn from(c: CategoryId) -> u8 {
        c.0
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Dimension {
    Valence,
    Arousal,
    Dominance,
}

impl Dimension {
    pub const ALL: [Dimension; NUM_DIMS] = [Dimension::Valence, Dimension::Arousal, Dimension::Dominance];

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Valence => "valence",
            Dimension::Arousal => "arousal",
            Dimension::Dominance => "dominance",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Valence, arousal and dominance. Depending on context the values are on
/// the raw `1..=10` scale or the normalized `[0, 1]` scale.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ContinuousDims {
    pub valence: f64,
    pub arousal: f64,
    pub dominance: f64,
}

impl ContinuousDims {
    pub fn new(valence: f64, arousal: f64, dominance: f64) -> Self {
        ContinuousDims {
            valence,
            arousal,
            dominance,
        }
    }

    pub fn from_array(a: [f64; NUM_DIMS]) -> Self {
        ContinuousDims::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; NUM_DIMS] {
        [self.valence, self.arousal, self.dominance]
    }

    pub fn get(&self, dim: Dimension) -> f64 {
        self.to_array()[dim.index()]
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Self {
        ContinuousDims::new(f(self.valence), f(self.arousal), f(self.dominance))
    }

    pub fn normalized(self) -> Self {
        self.map(normalize)
    }

    pub fn denormalized(self) -> Self {
        self.map(denormalize)
    }
}

/// Raw `[1, 10]` to `[0, 1]`.
pub fn normalize(raw: f64) -> f64 {
    (raw - RAW_MIN as f64) / (RAW_MAX - RAW_MIN) as f64
}

pub fn denormalize(unit: f64) -> f64 {
    unit * (RAW_MAX - RAW_MIN) as f64 + RAW_MIN as f64
}
