//! Labeling pairs and per-labeler sessions.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use hindsight_core::corpus::{PreferenceRecord, Task};

use crate::store::{Axis, LabelStore};
use crate::ServeError;

/// Two outputs for one prompt, in a fixed A/B order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPair {
    pub pair_id: String,
    pub task: Task,
    pub prompt: String,
    pub output_a: String,
    pub output_b: String,
}

impl LabelPair {
    /// First two outputs of a record; ranks are ignored.
    pub fn from_record(r: &PreferenceRecord) -> Self {
        LabelPair {
            pair_id: r.id.clone(),
            task: r.task,
            prompt: r.prompt.clone(),
            output_a: r.outputs[0].text.clone(),
            output_b: r.outputs[1].text.clone(),
        }
    }
}

/// Reads one pair per line; duplicate ids are rejected.
pub fn load_pairs(path: impl AsRef<Path>) -> Result<Vec<LabelPair>, ServeError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let p: LabelPair =
            serde_json::from_str(line).map_err(|e| ServeError::Store(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if !seen.insert(p.pair_id.clone()) {
            return Err(ServeError::Store(format!("{}:{}: duplicate pair_id {}", path.display(), n + 1, p.pair_id)));
        }
        pairs.push(p);
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServedPair {
    pub pair_id: String,
    pub task: Task,
    pub prompt: String,
    pub left: String,
    pub right: String,
    pub axes: Vec<Axis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub session_id: String,
    pub completed: usize,
    pub total: usize,
    pub remaining: usize,
}

/// One labeler's walk through the pair list.
#[derive(Debug, Clone)]
pub struct Session {
    pub labeler_id: String,
    /// Drives the left/right assignment; stable for a given server seed and labeler.
    pub seed: u64,
    cursor: usize,
    served: HashSet<usize>,
}

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

impl Session {
    pub fn new(labeler_id: &str, server_seed: u64) -> Self {
        Session {
            labeler_id: labeler_id.to_string(),
            seed: fnv1a(labeler_id) ^ server_seed,
            cursor: 0,
            served: HashSet::new(),
        }
    }

    /// Whether output B goes on the left for pair `index`.
    pub fn swapped(&self, index: usize) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        rng.random()
    }

    pub fn was_served(&self, index: usize) -> bool {
        self.served.contains(&index)
    }

    fn finished(&self, pair: &LabelPair, store: &LabelStore) -> bool {
        Axis::for_task(pair.task).iter().all(|&a| store.contains(&pair.pair_id, a, &self.labeler_id))
    }

    /// The current pair, which stays current until every axis is labeled.
    pub fn next(&mut self, pairs: &[LabelPair], store: &LabelStore) -> Result<ServedPair, ServeError> {
        while self.cursor < pairs.len() && self.finished(&pairs[self.cursor], store) {
            self.cursor += 1;
        }
        if self.cursor == pairs.len() {
            return Err(ServeError::SessionExhausted { completed: self.completed(pairs, store) });
        }
        let i = self.cursor;
        let p = &pairs[i];
        self.served.insert(i);
        let (left, right) = if self.swapped(i) {
            (p.output_b.clone(), p.output_a.clone())
        } else {
            (p.output_a.clone(), p.output_b.clone())
        };
        Ok(ServedPair {
            pair_id: p.pair_id.clone(),
            task: p.task,
            prompt: p.prompt.clone(),
            left,
            right,
            axes: Axis::for_task(p.task).to_vec(),
        })
    }

    pub fn completed(&self, pairs: &[LabelPair], store: &LabelStore) -> usize {
        pairs.iter().filter(|p| self.finished(p, store)).count()
    }
}
