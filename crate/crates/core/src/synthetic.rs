//! Toy preference task with a known answer: preferred outputs are strictly
//! ascending letter strings, dispreferred outputs are the same letters descending.
//! Every output ends with [`TERMINATOR`] so a model trained from scratch can learn
//! where an answer stops even when the answer is followed by more feedback.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::PretrainCorpus;
use crate::corpus::{Corpus, PreferenceRecord, RatedOutput, Source, Task};
use crate::gen::SamplingParams;

pub const TERMINATOR: char = '.';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Ascending,
    Descending,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub alphabet: Vec<char>,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask { alphabet: ('a'..='h').collect(), min_len: 4, max_len: 7 }
    }
}

impl SyntheticTask {
    pub fn prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        format!("list {:03}", rng.random_range(0..1000))
    }

    /// Random subset of the alphabet in ascending order.
    pub fn ascending<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        let len = rng.random_range(self.min_len..=self.max_len.min(self.alphabet.len()));
        let mut idx = sample(rng, self.alphabet.len(), len).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| self.alphabet[i]).collect()
    }

    /// Terminated output text for a letter string.
    pub fn output(&self, letters: &str) -> String {
        format!("{letters}{TERMINATOR}")
    }

    /// Terminated descending output, the kind `refine` should repair.
    pub fn negative<R: Rng + ?Sized>(&self, rng: &mut R) -> String {
        let good = self.ascending(rng);
        self.output(&good.chars().rev().collect::<String>())
    }

    /// Sampling defaults plus the terminator as a stop string.
    pub fn sampling(&self) -> SamplingParams {
        let mut sp = SamplingParams::default();
        sp.stop.push(TERMINATOR.to_string());
        sp.max_new_tokens = self.max_len + 2;
        sp
    }

    pub fn record<R: Rng + ?Sized>(&self, rng: &mut R) -> PreferenceRecord {
        let prompt = self.prompt(rng);
        let good = self.ascending(rng);
        let bad: String = good.chars().rev().collect();
        let outputs = vec![
            RatedOutput { text: self.output(&good), rank: 0, raw_score: None },
            RatedOutput { text: self.output(&bad), rank: 1, raw_score: None },
        ];
        PreferenceRecord::new(Task::Qa, Source::Synthetic, prompt, outputs, false).expect("distinct outputs")
    }

    /// `n` records; prompts are distinct while `n` is at most half the prompt space.
    pub fn corpus(&self, n: usize, seed: u64) -> Corpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seen = std::collections::HashSet::new();
        let mut records = Vec::with_capacity(n);
        while records.len() < n {
            let r = self.record(&mut rng);
            if n > 500 || seen.insert(r.prompt.clone()) {
                records.push(r);
            }
        }
        Corpus::new(records)
    }

    /// Plain lines over the same alphabet in random order, for the pretraining term.
    pub fn pretrain(&self, n: usize, seed: u64) -> PretrainCorpus {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let docs = (0..n)
            .map(|_| {
                let len = rng.random_range(self.min_len..=self.max_len);
                (0..len).map(|_| self.alphabet[rng.random_range(0..self.alphabet.len())]).collect()
            })
            .collect();
        PretrainCorpus { docs }
    }
}

/// Ascending / descending if the trimmed text, minus an optional terminator, is at
/// least two letters in strict order.
pub fn classify(text: &str) -> Option<Shape> {
    let text = text.trim();
    let chars: Vec<char> = text.strip_suffix(TERMINATOR).unwrap_or(text).chars().collect();
    if chars.len() < 2 || !chars.iter().all(|c| c.is_ascii_lowercase()) {
        return None;
    }
    if chars.windows(2).all(|w| w[0] < w[1]) {
        Some(Shape::Ascending)
    } else if chars.windows(2).all(|w| w[0] > w[1]) {
        Some(Shape::Descending)
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_have_known_shapes() {
        let corpus = SyntheticTask::default().corpus(200, 1);
        assert_eq!(corpus.len(), 200);
        for r in &corpus.records {
            assert_eq!(classify(&r.best().text), Some(Shape::Ascending));
            assert_eq!(classify(&r.worst().text), Some(Shape::Descending));
            assert!(r.prompt.starts_with("list "));
            assert!(r.best().text.ends_with(TERMINATOR));
        }
    }

    #[test]
    fn classify_edges() {
        assert_eq!(classify(" ace "), Some(Shape::Ascending));
        assert_eq!(classify("eca"), Some(Shape::Descending));
        assert_eq!(classify("a"), None);
        assert_eq!(classify("aab"), None);
        assert_eq!(classify("acb"), None);
        assert_eq!(classify("a c"), None);
        assert_eq!(classify(""), None);
        assert_eq!(classify("abd."), Some(Shape::Ascending));
        assert_eq!(classify("ab.."), None);
    }

    #[test]
    fn deterministic_per_seed() {
        let t = SyntheticTask::default();
        assert_eq!(t.corpus(10, 5).records, t.corpus(10, 5).records);
        assert_eq!(t.pretrain(10, 5), t.pretrain(10, 5));
    }
}
