//! Tiny templated-text generator.
//!
//! Produces sentence-like byte streams with strong local structure
//! ("the red fox chased a dog. "), used as a language-modeling corpus for
//! loss-profile and decode-order experiments where token difficulty must
//! depend on nearby context.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const ADJECTIVES: &[&str] = &["red", "old", "tiny", "loud", "calm", "slow", "warm", "pale"];
const NOUNS: &[&str] = &["fox", "dog", "crow", "mouse", "horse", "crab", "wolf", "toad"];
const VERBS: &[&str] = &["chased", "watched", "followed", "ignored", "greeted", "circled"];
const PLACES: &[&str] = &["barn", "river", "hill", "field", "cave", "garden"];

/// Generates at least `min_bytes` of deterministic sentence text.
pub fn gen_text_corpus(seed: u64, min_bytes: usize) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(min_bytes + 64);
    while out.len() < min_bytes {
        let adj = ADJECTIVES.choose(&mut rng).unwrap();
        let subj = NOUNS.choose(&mut rng).unwrap();
        let verb = VERBS.choose(&mut rng).unwrap();
        let obj = NOUNS.choose(&mut rng).unwrap();
        let place = PLACES.choose(&mut rng).unwrap();
        out.push_str(&format!(
            "the {adj} {subj} {verb} a {obj} near the {place}. "
        ));
    }
    out
}
