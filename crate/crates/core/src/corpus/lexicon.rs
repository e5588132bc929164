use serde::{Deserialize, Serialize};

/// One attribute of the synthetic world and the words that can express it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeWords {
    pub word: String,
    pub synonyms: Vec<String>,
    /// Filler token that always precedes the attribute in a caption.
    pub connector: String,
}

impl AttributeWords {
    pub fn surface_forms(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.word.as_str()).chain(self.synonyms.iter().map(String::as_str))
    }
}

pub const CAPTION_PREFIX: [&str; 3] = ["a", "photo", "of"];

const CONNECTORS: [&str; 6] = ["a", "the", "with", "and", "near", "on"];

const WORDS: [(&str, [&str; 2]); 32] = [
    ("dog", ["puppy", "hound"]),
    ("cat", ["kitten", "feline"]),
    ("horse", ["pony", "stallion"]),
    ("bird", ["sparrow", "pigeon"]),
    ("man", ["guy", "gentleman"]),
    ("woman", ["lady", "girl"]),
    ("child", ["kid", "toddler"]),
    ("car", ["automobile", "sedan"]),
    ("bicycle", ["bike", "cycle"]),
    ("boat", ["ship", "vessel"]),
    ("train", ["locomotive", "railcar"]),
    ("bus", ["coach", "shuttle"]),
    ("beach", ["shore", "coast"]),
    ("street", ["road", "avenue"]),
    ("park", ["garden", "lawn"]),
    ("kitchen", ["cookroom", "galley"]),
    ("mountain", ["hill", "peak"]),
    ("river", ["stream", "creek"]),
    ("snow", ["frost", "ice"]),
    ("table", ["desk", "counter"]),
    ("red", ["crimson", "scarlet"]),
    ("blue", ["azure", "navy"]),
    ("green", ["emerald", "olive"]),
    ("white", ["ivory", "pale"]),
    ("black", ["dark", "ebony"]),
    ("running", ["jogging", "sprinting"]),
    ("sitting", ["seated", "resting"]),
    ("eating", ["feeding", "dining"]),
    ("playing", ["frolicking", "gaming"]),
    ("ball", ["sphere", "orb"]),
    ("umbrella", ["parasol", "canopy"]),
    ("frisbee", ["disc", "saucer"]),
];

/// The built-in 32-attribute lexicon, two synonyms per attribute.
pub fn default_lexicon() -> Vec<AttributeWords> {
    WORDS
        .iter()
        .enumerate()
        .map(|(i, (word, syn))| AttributeWords {
            word: (*word).to_string(),
            synonyms: syn.iter().map(|s| (*s).to_string()).collect(),
            connector: CONNECTORS[i % CONNECTORS.len()].to_string(),
        })
        .collect()
}

/// Filler words a caption may contain besides attribute surface forms.
pub fn filler_tokens() -> impl Iterator<Item = &'static str> {
    CAPTION_PREFIX.into_iter().chain(CONNECTORS)
}
