use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Key/value token pairs followed by a query key; the label is the value
    /// paired with that key.
    AssociativeRecall,
    /// The label is the most frequent token (ties go to the smallest id).
    MajorityClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    pub seq_len: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return config_err(format!("vocab must be at least 2, got {}", self.vocab));
        }
        if self.seq_len < 4 {
            return config_err(format!("seq_len must be at least 4, got {}", self.seq_len));
        }
        Ok(())
    }

    /// Size of the embedding table: recall sequences of even length carry a
    /// separator token with id `vocab`.
    pub fn token_count(&self) -> usize {
        self.vocab + 1
    }

    pub fn classes(&self) -> usize {
        self.vocab
    }
}

fn recall_example(rng: &mut SplitMix64, vocab: usize, n: usize) -> Example {
    let v = vocab as u64;
    let map: Vec<usize> = (0..vocab).map(|_| rng.below(v) as usize).collect();
    let pairs = (n - 1) / 2;
    let mut tokens = Vec::with_capacity(n);
    let mut keys = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let k = rng.below(v) as usize;
        keys.push(k);
        tokens.push(k);
        tokens.push(map[k]);
    }
    if tokens.len() + 1 < n {
        tokens.push(vocab);
    }
    let query = keys[rng.below(pairs as u64) as usize];
    tokens.push(query);
    Example {
        tokens,
        label: map[query],
    }
}

fn majority_example(rng: &mut SplitMix64, vocab: usize, n: usize) -> Example {
    let tokens: Vec<usize> = (0..n).map(|_| rng.below(vocab as u64) as usize).collect();
    let mut counts = vec![0usize; vocab];
    tokens.iter().for_each(|&t| counts[t] += 1);
    let label = (0..vocab).fold(0, |b, t| if counts[t] > counts[b] { t } else { b });
    Example { tokens, label }
}

/// Draws the train split and then the test split from one splitmix64 stream
/// seeded with `spec.seed`. Tokens are `next_u64() % vocab`.
pub fn generate_task(spec: &TaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = SplitMix64::new(spec.seed);
    let mut draw = |count: usize| -> Vec<Example> {
        (0..count)
            .map(|_| match spec.kind {
                TaskKind::AssociativeRecall => recall_example(&mut rng, spec.vocab, spec.seq_len),
                TaskKind::MajorityClass => majority_example(&mut rng, spec.vocab, spec.seq_len),
            })
            .collect()
    };
    let train = draw(spec.train_size);
    let test = draw(spec.test_size);
    Ok(Dataset { train, test })
}

/// One line per example: `split,label,t_0,...,t_{N-1}`, with a header.
pub fn dataset_csv(data: &Dataset) -> String {
    let mut out = String::from("split,label,tokens\n");
    for (split, examples) in [("train", &data.train), ("test", &data.test)] {
        for e in examples {
            out.push_str(split);
            out.push(',');
            out.push_str(&e.label.to_string());
            for t in &e.tokens {
                out.push(',');
                out.push_str(&t.to_string());
            }
            out.push('\n');
        }
    }
    out
}
