//! Synthetic diagnostic tasks with exact-rule checkers.
//!
//! Every instance has a unique correct completion that a checker can verify
//! by recomputing the rule, so generation accuracy is exact-match accuracy
//! with no reference-model ambiguity. `modular_add` and `sorted_digits`
//! additionally emit 4-way multiple-choice variants for likelihood-ranking
//! evaluation; all choices of an instance have equal byte length.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Fixed prompt width (bytes) used when packing task instances: prompts are
/// left-padded with spaces to this width so the trainable region always
/// starts at the same block-aligned offset.
pub const PROMPT_WIDTH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    ModularAdd,
    SortedDigits,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::Copy,
        TaskKind::Reverse,
        TaskKind::ModularAdd,
        TaskKind::SortedDigits,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::ModularAdd => "modular_add",
            TaskKind::SortedDigits => "sorted_digits",
        }
    }

    pub fn parse(s: &str) -> Option<TaskKind> {
        TaskKind::ALL.iter().copied().find(|k| k.name() == s)
    }
}

/// Four answer options with exactly one correct index. Options are distinct
/// and share a common byte length.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultipleChoice {
    pub options: Vec<String>,
    pub correct: usize,
}

/// One task instance: a prompt, its unique correct completion, and (for the
/// multiple-choice tasks) distractor options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub prompt: String,
    pub target: String,
    pub choices: Option<MultipleChoice>,
}

/// Builds a `modular_add` instance for explicit operands, with the 4-way
/// choice set when the modulus admits four distinct residues.
pub fn modular_add_instance(a: u32, b: u32, m: u32, rng: &mut impl Rng) -> TaskInstance {
    let answer = (a + b) % m;
    let choices = if m >= 4 {
        let mut residues: Vec<u32> = (0..m).filter(|&r| r != answer).collect();
        residues.shuffle(rng);
        let mut options: Vec<String> = residues[..3].iter().map(u32::to_string).collect();
        options.push(answer.to_string());
        options.shuffle(rng);
        let correct = options.iter().position(|o| *o == answer.to_string()).unwrap();
        Some(MultipleChoice { options, correct })
    } else {
        None
    };
    TaskInstance {
        kind: TaskKind::ModularAdd,
        prompt: format!("{a}+{b} mod {m}="),
        target: answer.to_string(),
        choices,
    }
}

fn gen_one(kind: TaskKind, rng: &mut ChaCha8Rng) -> TaskInstance {
    match kind {
        TaskKind::Copy | TaskKind::Reverse => {
            let len = rng.gen_range(3..=6);
            let s: String = (0..len).map(|_| rng.gen_range(b'a'..=b'z') as char).collect();
            let target = if kind == TaskKind::Copy {
                s.clone()
            } else {
                s.chars().rev().collect()
            };
            TaskInstance {
                kind,
                prompt: format!("{s}|"),
                target,
                choices: None,
            }
        }
        TaskKind::ModularAdd => {
            // Single-digit operands keep the task learnable by very small
            // models; the checker itself parses arbitrary-width operands.
            let a = rng.gen_range(0..=9);
            let b = rng.gen_range(0..=9);
            let m = rng.gen_range(5..=9);
            modular_add_instance(a, b, m, rng)
        }
        TaskKind::SortedDigits => {
            let len = rng.gen_range(4..=6);
            let digits: Vec<u8> = loop {
                let d: Vec<u8> = (0..len).map(|_| rng.gen_range(b'0'..=b'9')).collect();
                // At least two distinct digits guarantees >= 4 distinct
                // permutations, enough for a 4-way choice set.
                if d.iter().any(|&x| x != d[0]) {
                    break d;
                }
            };
            let mut sorted = digits.clone();
            sorted.sort_unstable();
            let target = String::from_utf8(sorted).unwrap();
            let mut options = vec![target.clone()];
            while options.len() < 4 {
                let mut perm = digits.clone();
                perm.shuffle(rng);
                let cand = String::from_utf8(perm).unwrap();
                if !options.contains(&cand) {
                    options.push(cand);
                }
            }
            options.shuffle(rng);
            let correct = options.iter().position(|o| *o == target).unwrap();
            TaskInstance {
                kind,
                prompt: String::from_utf8(digits).unwrap() + "|",
                target,
                choices: Some(MultipleChoice { options, correct }),
            }
        }
    }
}

/// Generates `n` instances. Instance `i` depends only on `(seed, i)`, so
/// any sharding of the index range reproduces the same instances.
pub fn gen_synthetic(kind: TaskKind, seed: u64, n: usize) -> Vec<TaskInstance> {
    (0..n).map(|i| gen_synthetic_at(kind, seed, i as u64)).collect()
}

/// Generates the single instance at stream index `i`.
pub fn gen_synthetic_at(kind: TaskKind, seed: u64, i: u64) -> TaskInstance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i.wrapping_add(1));
    gen_one(kind, &mut rng)
}

/// Exact-rule checker: recomputes the task from the prompt (ignoring pad
/// spaces) and compares with the completion byte-for-byte.
pub fn check_completion(kind: TaskKind, prompt: &str, completion: &str) -> bool {
    let prompt = prompt.trim_start_matches(' ');
    match kind {
        TaskKind::Copy => prompt
            .strip_suffix('|')
            .is_some_and(|body| body == completion),
        TaskKind::Reverse => prompt
            .strip_suffix('|')
            .is_some_and(|body| body.chars().rev().collect::<String>() == completion),
        TaskKind::ModularAdd => parse_modular_add(prompt)
            .is_some_and(|(a, b, m)| completion == ((a + b) % m).to_string()),
        TaskKind::SortedDigits => prompt.strip_suffix('|').is_some_and(|body| {
            let mut digits: Vec<u8> = body.bytes().collect();
            digits.sort_unstable();
            digits == completion.as_bytes()
        }),
    }
}

fn parse_modular_add(prompt: &str) -> Option<(u64, u64, u64)> {
    let body = prompt.strip_suffix('=')?;
    let (sum, m) = body.split_once(" mod ")?;
    let (a, b) = sum.split_once('+')?;
    let m: u64 = m.parse().ok()?;
    if m == 0 {
        return None;
    }
    Some((a.parse().ok()?, b.parse().ok()?, m))
}

/// Left-pads a prompt with spaces to `width` bytes. Errors are deferred to
/// packing; this helper just formats.
pub(crate) fn pad_prompt(prompt: &str, width: usize) -> String {
    format!("{prompt:>width$}")
}
