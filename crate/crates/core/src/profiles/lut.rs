use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Half-open layer range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerRange {
    pub start: usize,
    pub end: usize,
}

impl LayerRange {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {})", self.start, self.end)
    }
}

/// One row of the LUT file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LutEntry {
    pub kind: String,
    pub model: String,
    pub i: usize,
    pub j: usize,
    pub batch: u32,
    pub ms: f64,
}

impl LutEntry {
    pub fn new(kind: &str, model: &str, i: usize, j: usize, batch: u32, ms: f64) -> Self {
        Self {
            kind: kind.to_string(),
            model: model.to_string(),
            i,
            j,
            batch,
            ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LutError {
    #[error("no LUT entry for kind={kind:?} model={model:?} range={range}")]
    Missing {
        kind: String,
        model: String,
        range: LayerRange,
    },
    #[error("invalid LUT entry {entry:?}: {reason}")]
    InvalidEntry { entry: LutEntry, reason: &'static str },
    #[error("LUT key kind={kind:?} model={model:?} range={range} has no batch-size-1 entry")]
    NoUnitBatch {
        kind: String,
        model: String,
        range: LayerRange,
    },
    #[error("LUT I/O: {0}")]
    Io(String),
    #[error("LUT parse: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct Key {
    kind: String,
    model: String,
    range: LayerRange,
}

/// Subtask latency lookup table keyed by (device kind, model, layer range,
/// batch size).
#[derive(Debug, Clone, Default)]
pub struct Lut {
    table: HashMap<Key, BTreeMap<u32, f64>>,
}

impl Lut {
    pub fn from_entries(entries: impl IntoIterator<Item = LutEntry>) -> Result<Self, LutError> {
        let mut lut = Lut::default();
        for e in entries {
            lut.insert(e)?;
        }
        for (key, batches) in &lut.table {
            if !batches.contains_key(&1) {
                return Err(LutError::NoUnitBatch {
                    kind: key.kind.clone(),
                    model: key.model.clone(),
                    range: key.range,
                });
            }
        }
        Ok(lut)
    }

    fn insert(&mut self, e: LutEntry) -> Result<(), LutError> {
        let reason = if e.i >= e.j {
            Some("range must satisfy i < j")
        } else if e.batch == 0 {
            Some("batch must be positive")
        } else if !(e.ms.is_finite() && e.ms > 0.0) {
            Some("latency must be positive")
        } else {
            None
        };
        if let Some(reason) = reason {
            return Err(LutError::InvalidEntry { entry: e, reason });
        }
        let key = Key {
            kind: e.kind,
            model: e.model,
            range: LayerRange::new(e.i, e.j),
        };
        self.table.entry(key).or_default().insert(e.batch, e.ms);
        Ok(())
    }

    /// Merges another table into this one; entries in `other` win.
    pub fn extend(&mut self, other: &Lut) {
        for (k, v) in &other.table {
            self.table.entry(k.clone()).or_default().extend(v.iter());
        }
    }

    pub fn len(&self) -> usize {
        self.table.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn contains(&self, kind: &str, model: &str, range: LayerRange) -> bool {
        range.is_empty() || self.table.contains_key(&Key {
            kind: kind.to_string(),
            model: model.to_string(),
            range,
        })
    }

    /// Latency in ms of running `range` of `model` on a `kind` device with a
    /// batch of `batch` inputs.
    ///
    /// Exact hits are returned as stored. Otherwise the two bracketing batch
    /// sizes are interpolated linearly; outside the stored batch sizes the
    /// nearest entry is used. An empty range costs nothing.
    pub fn lookup(
        &self,
        kind: &str,
        model: &str,
        range: LayerRange,
        batch: u32,
    ) -> Result<f64, LutError> {
        if range.is_empty() {
            return Ok(0.0);
        }
        let key = Key {
            kind: kind.to_string(),
            model: model.to_string(),
            range,
        };
        let batches = self.table.get(&key).ok_or_else(|| LutError::Missing {
            kind: key.kind.clone(),
            model: key.model.clone(),
            range,
        })?;
        if let Some(ms) = batches.get(&batch) {
            return Ok(*ms);
        }
        let below = batches.range(..batch).next_back();
        let above = batches.range(batch..).next();
        Ok(match (below, above) {
            (Some((&b0, &v0)), Some((&b1, &v1))) => {
                let t = (batch - b0) as f64 / (b1 - b0) as f64;
                v0 + t * (v1 - v0)
            }
            (Some((_, &v)), None) | (None, Some((_, &v))) => v,
            (None, None) => unreachable!("keys always hold at least one batch size"),
        })
    }

    pub fn entries(&self) -> Vec<LutEntry> {
        let mut out: Vec<LutEntry> = self
            .table
            .iter()
            .flat_map(|(k, batches)| {
                batches.iter().map(move |(&b, &ms)| LutEntry {
                    kind: k.kind.clone(),
                    model: k.model.clone(),
                    i: k.range.start,
                    j: k.range.end,
                    batch: b,
                    ms,
                })
            })
            .collect();
        out.sort_by(|a, b| {
            (&a.kind, &a.model, a.i, a.j, a.batch).cmp(&(&b.kind, &b.model, b.i, b.j, b.batch))
        });
        out
    }

    pub fn from_json(text: &str) -> Result<Self, LutError> {
        let entries: Vec<LutEntry> =
            serde_json::from_str(text).map_err(|e| LutError::Parse(e.to_string()))?;
        Self::from_entries(entries)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries()).expect("entries serialize")
    }

    pub fn load(path: &Path) -> Result<Self, LutError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LutError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}
