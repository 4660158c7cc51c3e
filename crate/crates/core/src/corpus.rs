//! Corpus loading and a small synthetic text generator for tests and demos.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::error::{Error, Result};

/// Reads a corpus file as raw bytes, rejecting empty files.
pub fn load(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(bytes)
}

const ONSETS: &[&str] = &["b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "v", "w", "st", "tr", "ch"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou"];
const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "nd", "ll"];

/// English-like text: a Zipf-distributed lexicon arranged into sentences of
/// determiner, noun, verb and object phrases. Same seed, same bytes.
pub fn synthetic(len: usize, seed: u64) -> Vec<u8> {
    synthetic_with_lexicon(len, seed, [400, 150, 100])
}

/// Like [`synthetic`] with `[nouns, verbs, adjectives]` words in the lexicon.
/// Small lexicons give text a tiny model can learn to predict confidently.
pub fn synthetic_with_lexicon(len: usize, seed: u64, lexicon: [usize; 3]) -> Vec<u8> {
    assert!(lexicon.iter().all(|&n| n > 0), "lexicon sizes must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let word = |rng: &mut ChaCha8Rng| {
        let syllables = rng.random_range(1..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push_str(ONSETS[rng.random_range(0..ONSETS.len())]);
            w.push_str(VOWELS[rng.random_range(0..VOWELS.len())]);
            w.push_str(CODAS[rng.random_range(0..CODAS.len())]);
        }
        w
    };
    let [n_nouns, n_verbs, n_adjectives] = lexicon;
    let nouns: Vec<String> = (0..n_nouns).map(|_| word(&mut rng)).collect();
    let verbs: Vec<String> = (0..n_verbs).map(|_| word(&mut rng) + "s").collect();
    let adjectives: Vec<String> = (0..n_adjectives).map(|_| word(&mut rng) + "y").collect();
    let dets = ["the", "a", "this", "every", "one"];
    let zipf_n = Zipf::new(nouns.len() as f64, 1.1).expect("valid zipf");
    let zipf_v = Zipf::new(verbs.len() as f64, 1.1).expect("valid zipf");
    let zipf_a = Zipf::new(adjectives.len() as f64, 1.1).expect("valid zipf");

    let mut out = Vec::with_capacity(len + 128);
    while out.len() < len {
        let mut sentence = String::new();
        let clauses = rng.random_range(1..=2);
        for c in 0..clauses {
            if c > 0 {
                sentence.push_str(", and ");
            }
            let phrase = |rng: &mut ChaCha8Rng, s: &mut String| {
                s.push_str(dets[rng.random_range(0..dets.len())]);
                s.push(' ');
                if rng.random_bool(0.3) {
                    s.push_str(&adjectives[zipf_a.sample(rng) as usize - 1]);
                    s.push(' ');
                }
                s.push_str(&nouns[zipf_n.sample(rng) as usize - 1]);
            };
            phrase(&mut rng, &mut sentence);
            sentence.push(' ');
            sentence.push_str(&verbs[zipf_v.sample(&mut rng) as usize - 1]);
            sentence.push(' ');
            phrase(&mut rng, &mut sentence);
        }
        let mut chars = sentence.chars();
        if let Some(first) = chars.next() {
            out.extend(first.to_uppercase().to_string().bytes());
            out.extend(chars.as_str().bytes());
        }
        out.extend_from_slice(if rng.random_bool(0.15) { b".\n" } else { b". " });
    }
    out.truncate(len);
    out
}
