//! Append-only JSONL label store, aggregation and export.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use hindsight_core::corpus::{Corpus, PreferenceRecord, RatedOutput, Source, Task};

use crate::session::LabelPair;
use crate::ServeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Accuracy,
    Coherence,
    Coverage,
    Helpful,
    Harmless,
    Overall,
}

impl Axis {
    pub const ALL: [Axis; 6] =
        [Axis::Accuracy, Axis::Coherence, Axis::Coverage, Axis::Helpful, Axis::Harmless, Axis::Overall];

    /// Axes a labeler answers for a pair of this task; `overall` drives export.
    pub fn for_task(task: Task) -> &'static [Axis] {
        match task {
            Task::Summary => &[Axis::Accuracy, Axis::Coherence, Axis::Coverage, Axis::Overall],
            Task::Dialogue => &[Axis::Helpful, Axis::Harmless, Axis::Overall],
            Task::Qa => &[Axis::Overall],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Axis::Accuracy => "accuracy",
            Axis::Coherence => "coherence",
            Axis::Coverage => "coverage",
            Axis::Helpful => "helpful",
            Axis::Harmless => "harmless",
            Axis::Overall => "overall",
        }
    }

    pub fn parse(s: &str) -> Option<Axis> {
        Axis::ALL.into_iter().find(|a| a.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Left,
    Right,
    Neutral,
}

/// A verdict with the side randomization undone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Preference {
    A,
    B,
    Neutral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRecord {
    pub pair_id: String,
    pub axis: Axis,
    /// As presented: `left` is whatever was shown on the left.
    pub verdict: Verdict,
    pub labeler_id: String,
    /// Unix milliseconds.
    pub timestamp: u64,
    /// Output B was shown on the left.
    pub swapped: bool,
}

impl LabelRecord {
    pub fn preference(&self) -> Preference {
        match (self.verdict, self.swapped) {
            (Verdict::Neutral, _) => Preference::Neutral,
            (Verdict::Left, false) | (Verdict::Right, true) => Preference::A,
            (Verdict::Left, true) | (Verdict::Right, false) => Preference::B,
        }
    }

    fn key(&self) -> (String, Axis, String) {
        (self.pair_id.clone(), self.axis, self.labeler_id.clone())
    }
}

struct Inner {
    file: File,
    records: Arc<Vec<LabelRecord>>,
    keys: HashSet<(String, Axis, String)>,
}

/// Appends are serialized behind the write lock; readers take cheap snapshots.
pub struct LabelStore {
    path: PathBuf,
    inner: RwLock<Inner>,
}

impl LabelStore {
    /// Opens (or creates) the store, replaying any existing lines.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ServeError> {
        let path = path.as_ref().to_path_buf();
        let mut records = Vec::new();
        let mut keys = HashSet::new();
        if path.exists() {
            for (n, line) in BufReader::new(File::open(&path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let r: LabelRecord = serde_json::from_str(&line)
                    .map_err(|e| ServeError::Store(format!("{}:{}: {e}", path.display(), n + 1)))?;
                keys.insert(r.key());
                records.push(r);
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(LabelStore { path, inner: RwLock::new(Inner { file, records: Arc::new(records), keys }) })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn snapshot(&self) -> Arc<Vec<LabelRecord>> {
        self.inner.read().records.clone()
    }

    pub fn contains(&self, pair_id: &str, axis: Axis, labeler_id: &str) -> bool {
        self.inner.read().keys.contains(&(pair_id.to_string(), axis, labeler_id.to_string()))
    }

    pub fn append(&self, record: LabelRecord) -> Result<(), ServeError> {
        let mut inner = self.inner.write();
        let key = record.key();
        if inner.keys.contains(&key) {
            return Err(ServeError::DuplicateLabel { pair_id: key.0, axis: key.1, labeler_id: key.2 });
        }
        let mut line = serde_json::to_vec(&record).map_err(|e| ServeError::Store(e.to_string()))?;
        line.push(b'\n');
        inner.file.write_all(&line)?;
        inner.file.flush()?;
        inner.keys.insert(key);
        Arc::make_mut(&mut inner.records).push(record);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub n: usize,
    /// Percent of verdicts preferring output A.
    pub win: f64,
    pub neutral: f64,
    /// Percent preferring output B.
    pub loss: f64,
}

/// Win/neutral/loss percentages per axis, from output A's point of view.
pub fn tally(records: &[LabelRecord]) -> BTreeMap<Axis, Tally> {
    let mut counts: BTreeMap<Axis, [usize; 3]> = BTreeMap::new();
    for r in records {
        let c = counts.entry(r.axis).or_default();
        match r.preference() {
            Preference::A => c[0] += 1,
            Preference::Neutral => c[1] += 1,
            Preference::B => c[2] += 1,
        }
    }
    counts
        .into_iter()
        .map(|(axis, [w, nt, l])| {
            let n = w + nt + l;
            let pct = |k: usize| 100.0 * k as f64 / n as f64;
            (axis, Tally { n, win: pct(w), neutral: pct(nt), loss: pct(l) })
        })
        .collect()
}

/// Pairs whose `overall` majority is A or B become records with the winner at rank 0.
///
/// Pairs with fewer than `min_labelers` overall labels, a neutral majority, or a
/// tie for the most votes are left out.
pub fn export_preferences(
    records: &[LabelRecord],
    pairs: &[LabelPair],
    min_labelers: usize,
    task: Option<Task>,
) -> Result<Corpus, ServeError> {
    let mut votes: HashMap<&str, [usize; 3]> = HashMap::new();
    for r in records.iter().filter(|r| r.axis == Axis::Overall) {
        let v = votes.entry(r.pair_id.as_str()).or_default();
        match r.preference() {
            Preference::A => v[0] += 1,
            Preference::B => v[1] += 1,
            Preference::Neutral => v[2] += 1,
        }
    }
    let mut out = Vec::new();
    let mut eligible = 0;
    for p in pairs.iter().filter(|p| task.is_none_or(|t| t == p.task)) {
        let Some(&[a, b, neutral]) = votes.get(p.pair_id.as_str()) else { continue };
        if a + b + neutral < min_labelers.max(1) {
            continue;
        }
        eligible += 1;
        let (winner, loser) = if a > b && a > neutral {
            (&p.output_a, &p.output_b)
        } else if b > a && b > neutral {
            (&p.output_b, &p.output_a)
        } else {
            continue;
        };
        let outputs = vec![
            RatedOutput { text: winner.clone(), rank: 0, raw_score: None },
            RatedOutput { text: loser.clone(), rank: 1, raw_score: None },
        ];
        let record = PreferenceRecord::new(p.task, Source::Labeled, p.prompt.clone(), outputs, false)
            .map_err(|e| ServeError::Store(format!("pair {}: {e}", p.pair_id)))?;
        out.push(record);
    }
    if eligible == 0 {
        return Err(ServeError::InsufficientLabels { min_labelers });
    }
    Ok(Corpus::new(out))
}
