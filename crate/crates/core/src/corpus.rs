//! Text corpora: loading a file as byte tokens, a train/dev split, and a
//! deterministic generator of English-like prose for offline experiments.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::SeededRng;
use crate::tokenizer::ByteTokenizer;

/// Token streams for training and held-out evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<u32>,
    pub dev: Vec<u32>,
}

impl Corpus {
    /// Byte-tokenizes `text` and keeps the last `dev_fraction` for evaluation.
    pub fn split(text: &[u8], dev_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&dev_fraction) {
            return Err(Error::Config(format!("dev_fraction {dev_fraction} must be in [0, 1)")));
        }
        let ids = ByteTokenizer.encode(text);
        let cut = ids.len() - (ids.len() as f64 * dev_fraction).round() as usize;
        Ok(Corpus { train: ids[..cut].to_vec(), dev: ids[cut..].to_vec() })
    }

    pub fn load(path: &Path, dev_fraction: f64) -> Result<Self> {
        let text = std::fs::read(path)?;
        if text.is_empty() {
            return Err(Error::Config(format!("corpus {} is empty", path.display())));
        }
        Self::split(&text, dev_fraction)
    }
}

const NAMES: &[&str] = &[
    "Alice", "Bernard", "Clara", "Desmond", "Eliza", "Frederick", "Grace", "Harold", "Isabel", "Jasper", "Kathleen",
    "Lionel", "Margaret", "Nathaniel", "Olivia", "Percival", "Rosalind", "Sebastian", "Theodora", "Walter",
];
const PLACES: &[&str] = &[
    "the mill", "the harbour", "the old church", "the market", "the orchard", "the station", "the library",
    "the bridge", "the farmhouse", "the river bank", "the inn", "the hill",
];
const OBJECTS: &[&str] = &[
    "a letter", "the lantern", "a basket of apples", "the key", "an old map", "a loaf of bread", "the violin",
    "a silver watch", "the ledger", "a bundle of wood", "the newspaper", "a small box",
];
const VERBS_PAST: &[&str] = &[
    "carried", "found", "lost", "opened", "mended", "sold", "bought", "hid", "examined", "returned", "dropped",
    "wrapped",
];
const MOTION: &[&str] = &["walked to", "hurried to", "returned to", "wandered towards", "rode to", "came back from"];
const TIMES: &[&str] = &[
    "In the morning", "Before dawn", "At noon", "Late in the evening", "On Sunday", "After the storm",
    "When the bells rang", "Some days later",
];
const ADJECTIVES: &[&str] = &["quiet", "cold", "bright", "crowded", "narrow", "grey", "warm", "empty", "busy", "distant"];
const WEATHER: &[&str] = &[
    "The rain fell steadily", "A thin fog covered the fields", "The wind rose from the west",
    "The sun was low and red", "Snow lay on the roofs",
];
const SPEECH: &[&str] = &[
    "I shall not wait much longer", "Have you seen the others", "It is later than you think",
    "We ought to go home", "Nobody told me about this", "Bring it here at once",
];

fn pick<'a>(rng: &mut SeededRng, xs: &[&'a str]) -> &'a str {
    xs[rng.below(xs.len())]
}

/// A paragraph about two recurring characters, so that the names are
/// predictable from earlier in the paragraph.
fn paragraph(rng: &mut SeededRng, out: &mut String) {
    let a = pick(rng, NAMES);
    let mut b = pick(rng, NAMES);
    while b == a {
        b = pick(rng, NAMES);
    }
    let place = pick(rng, PLACES);
    let object = pick(rng, OBJECTS);
    let sentences = 4 + rng.below(5);
    for s in 0..sentences {
        let who = if rng.below(3) == 0 { b } else { a };
        let other = if who == a { b } else { a };
        let sentence = match if s == 0 { 0 } else { rng.below(7) } {
            0 => format!("{} {} {} {}.", pick(rng, TIMES), who, pick(rng, MOTION), place),
            1 => format!("{} {} {} and gave it to {}.", who, pick(rng, VERBS_PAST), object, other),
            2 => format!("{}, and {} was {}.", pick(rng, WEATHER), place, pick(rng, ADJECTIVES)),
            3 => format!("\"{}?\" asked {}.", pick(rng, SPEECH), who),
            4 => format!("\"{},\" said {} to {}.", pick(rng, SPEECH), who, other),
            5 => format!("{} and {} stayed at {} until it was {}.", a, b, place, pick(rng, ADJECTIVES)),
            _ => format!("{} {} {} near {}.", who, pick(rng, VERBS_PAST), pick(rng, OBJECTS), place),
        };
        if s > 0 {
            out.push(' ');
        }
        out.push_str(&sentence);
    }
    out.push_str("\n\n");
}

/// Deterministic English-like text of exactly `bytes` bytes.
pub fn synthetic_text(bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = SeededRng::new(seed);
    let mut text = String::with_capacity(bytes + 1024);
    while text.len() < bytes {
        paragraph(&mut rng, &mut text);
    }
    let mut out = text.into_bytes();
    out.truncate(bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_text_is_deterministic_ascii() {
        let a = synthetic_text(10_000, 3);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, synthetic_text(10_000, 3));
        assert_ne!(a, synthetic_text(10_000, 4));
        assert!(a.iter().all(|b| b.is_ascii()));
    }

    #[test]
    fn split_keeps_every_token() {
        let c = Corpus::split(b"abcdefghij", 0.2).unwrap();
        assert_eq!(c.train.len(), 8);
        assert_eq!(c.dev, vec![b'i' as u32, b'j' as u32]);
        assert!(Corpus::split(b"abc", 1.0).is_err());
    }
}
