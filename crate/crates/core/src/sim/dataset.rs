//! Training data: random systems, random schemes, throughput measured by the
//! simulator. Stored as length-prefixed binary records plus a JSON manifest.
//!
//! Dataset file, little-endian:
//!
//! ```text
//! magic "CIDS", version u16, record count u32
//! per record: byte length u32, then
//!   system_key u64, throughput f64
//!   node count u32; per node: category u8, latency f64,
//!     id (u16 length + UTF-8), device (u16 length + UTF-8, 0xFFFF = none)
//!   edge count u32; per edge: src u32, dst u32
//!   origin (u32 length + JSON, 0 = none)
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{simulate, SimConfig, SimError, SimOptions};
use crate::predictor::{Sample, SampleOrigin};
use crate::profiles::synth::{random_system, SynthLimits, SynthSystem};
use crate::sysgraph::{build_raw_features, build_system_graph, GraphError, GraphNode, NodeCategory, RawFeatures, SystemGraph};
use crate::types::{Scheme, Strategy};

pub const SCHEMES_PER_SYSTEM: usize = 8;
pub const MAGIC: &[u8; 4] = b"CIDS";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("sample count must be at least 1")]
    Empty,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_err(msg: impl Into<String>) -> DatasetError {
    DatasetError::Format(msg.into())
}

/// Options of the oracle run behind every stored sample.
pub fn sample_options(config_seed: u64) -> SimOptions {
    SimOptions {
        seed: config_seed,
        ..SimOptions::oracle()
    }
}

pub fn sample_system(config_seed: u64) -> SynthSystem {
    random_system(config_seed, &SynthLimits::default())
}

fn space_size(sys: &SynthSystem) -> usize {
    sys.config
        .clients()
        .map(|c| sys.config.model_of(&c.device_id).map_or(1, |m| m.n_layers + 2))
        .fold(1usize, |acc, k| acc.saturating_mul(k))
}

/// Up to `k` distinct schemes drawn uniformly from the full space.
fn random_schemes(sys: &SynthSystem, k: usize, seed: u64) -> Vec<Scheme> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa5a5_5a5a);
    let clients: Vec<(String, usize)> = sys
        .config
        .clients()
        .map(|c| (c.device_id.clone(), sys.config.model_of(&c.device_id).unwrap().n_layers))
        .collect();
    let size = space_size(sys);
    let mut out: Vec<Scheme> = Vec::new();
    if size <= 4 * k {
        // small space: shuffle the whole of it
        let mut all = vec![Scheme::default()];
        for (id, n) in &clients {
            let opts: Vec<Strategy> = std::iter::once(Strategy::Dp).chain((0..=*n).map(Strategy::Pp)).collect();
            all = all
                .iter()
                .flat_map(|s| opts.iter().map(move |&o| s.with(id, o)))
                .collect();
        }
        all.shuffle(&mut rng);
        all.truncate(k);
        return all;
    }
    while out.len() < k {
        let mut s = Scheme::default();
        for (id, n) in &clients {
            let pick = rng.random_range(0..n + 2);
            s = s.with(id, if pick == 0 { Strategy::Dp } else { Strategy::Pp(pick - 1) });
        }
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

/// Measures `scheme` on the system behind `config_seed`.
pub fn measure(config_seed: u64, scheme: &Scheme) -> Result<Sample, DatasetError> {
    let sys = sample_system(config_seed);
    measure_on(&sys, config_seed, scheme)
}

fn measure_on(sys: &SynthSystem, config_seed: u64, scheme: &Scheme) -> Result<Sample, DatasetError> {
    let graph = build_system_graph(&sys.config)?;
    let raw = build_raw_features(&graph, scheme, &sys.config, &sys.lut)?;
    let cfg = SimConfig::new(sys.config.clone(), sys.lut.clone(), sample_options(config_seed));
    let result = simulate(&cfg, scheme)?;
    Ok(Sample {
        system_key: config_seed,
        graph,
        raw,
        throughput: result.throughput,
        origin: Some(SampleOrigin {
            config_seed,
            scheme: scheme.clone(),
        }),
    })
}

/// Throughput of a stored sample, recomputed from its origin.
pub fn resimulate(sample: &Sample) -> Result<f64, DatasetError> {
    let origin = sample
        .origin
        .as_ref()
        .ok_or_else(|| format_err("sample has no origin"))?;
    Ok(measure(origin.config_seed, &origin.scheme)?.throughput)
}

/// `n` samples: random systems (1-5 clients, 2-8 layers, 1-100 Mbps) with
/// up to [`SCHEMES_PER_SYSTEM`] random schemes each.
pub fn generate_training_set(n: usize, seed: u64) -> Result<Vec<Sample>, DatasetError> {
    if n == 0 {
        return Err(DatasetError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = Vec::new();
    let mut planned = 0;
    while planned < n {
        let config_seed: u64 = rng.random();
        let sys = sample_system(config_seed);
        let k = SCHEMES_PER_SYSTEM.min(n - planned).min(space_size(&sys));
        let schemes = random_schemes(&sys, k, config_seed);
        planned += schemes.len();
        plan.push((config_seed, sys, schemes));
    }
    let groups: Vec<Vec<Sample>> = plan
        .par_iter()
        .map(|(config_seed, sys, schemes)| {
            schemes
                .iter()
                .map(|s| measure_on(sys, *config_seed, s))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<_, _>>()?;
    Ok(groups.into_iter().flatten().collect())
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u16).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn encode_record(s: &Sample) -> Result<Vec<u8>, DatasetError> {
    let mut b = Vec::new();
    b.extend_from_slice(&s.system_key.to_le_bytes());
    b.extend_from_slice(&s.throughput.to_le_bytes());
    b.extend_from_slice(&(s.graph.node_count() as u32).to_le_bytes());
    for (node, &ms) in s.graph.nodes().iter().zip(&s.raw.latency_ms) {
        b.push(node.category.index() as u8);
        b.extend_from_slice(&ms.to_le_bytes());
        put_str(&mut b, &node.id);
        match &node.device {
            Some(d) => put_str(&mut b, d),
            None => b.extend_from_slice(&u16::MAX.to_le_bytes()),
        }
    }
    b.extend_from_slice(&(s.graph.edges().len() as u32).to_le_bytes());
    for &(src, dst) in s.graph.edges() {
        b.extend_from_slice(&(src as u32).to_le_bytes());
        b.extend_from_slice(&(dst as u32).to_le_bytes());
    }
    match &s.origin {
        Some(o) => {
            let json = serde_json::to_vec(o)?;
            b.extend_from_slice(&(json.len() as u32).to_le_bytes());
            b.extend_from_slice(&json);
        }
        None => b.extend_from_slice(&0u32.to_le_bytes()),
    }
    Ok(b)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DatasetError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format_err("truncated record"))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u16(&mut self) -> Result<u16, DatasetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, DatasetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DatasetError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, DatasetError> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn string(&mut self, len: u16) -> Result<String, DatasetError> {
        String::from_utf8(self.take(len as usize)?.to_vec()).map_err(|_| format_err("bad UTF-8"))
    }
}

fn decode_record(buf: &[u8]) -> Result<Sample, DatasetError> {
    let mut c = Cursor { buf, pos: 0 };
    let system_key = c.u64()?;
    let throughput = c.f64()?;
    let n = c.u32()? as usize;
    let mut nodes = Vec::with_capacity(n.min(4096));
    let mut categories = Vec::with_capacity(n.min(4096));
    let mut latency_ms = Vec::with_capacity(n.min(4096));
    for _ in 0..n {
        let cat = c.take(1)?[0];
        let category = NodeCategory::from_index(cat as usize)
            .ok_or_else(|| format_err(format!("unknown node category {cat}")))?;
        latency_ms.push(c.f64()?);
        let len = c.u16()?;
        let id = c.string(len)?;
        let len = c.u16()?;
        let device = if len == u16::MAX { None } else { Some(c.string(len)?) };
        categories.push(category);
        nodes.push(GraphNode { id, category, device });
    }
    let m = c.u32()? as usize;
    let mut edges = Vec::with_capacity(m.min(1 << 16));
    for _ in 0..m {
        edges.push((c.u32()? as usize, c.u32()? as usize));
    }
    let olen = c.u32()? as usize;
    let origin = if olen == 0 {
        None
    } else {
        Some(serde_json::from_slice(c.take(olen)?)?)
    };
    if c.pos != buf.len() {
        return Err(format_err("trailing bytes in record"));
    }
    let graph = SystemGraph::from_parts(nodes, edges).map_err(|e| format_err(e.to_string()))?;
    Ok(Sample {
        system_key,
        graph,
        raw: RawFeatures { categories, latency_ms },
        throughput,
        origin,
    })
}

pub fn encode_dataset(samples: &[Sample]) -> Result<Vec<u8>, DatasetError> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        let rec = encode_record(s)?;
        out.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        out.extend_from_slice(&rec);
    }
    Ok(out)
}

pub fn decode_dataset(buf: &[u8]) -> Result<Vec<Sample>, DatasetError> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(format_err("wrong magic"));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let count = c.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let len = c.u32()? as usize;
        out.push(decode_record(c.take(len)?)?);
    }
    if c.pos != buf.len() {
        return Err(format_err("trailing bytes after last record"));
    }
    Ok(out)
}

pub fn read_dataset(mut r: impl Read) -> Result<Vec<Sample>, DatasetError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_dataset(&buf)
}

pub fn write_dataset(samples: &[Sample], mut w: impl Write) -> Result<(), DatasetError> {
    w.write_all(&encode_dataset(samples)?)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u16,
    pub samples: usize,
    pub systems: usize,
    pub seed: Option<u64>,
    pub schemes_per_system: usize,
    /// Hex SHA-256 of the dataset file.
    pub sha256: String,
}

pub fn dataset_hash(samples: &[Sample]) -> Result<String, DatasetError> {
    Ok(hex::encode(Sha256::digest(encode_dataset(samples)?)))
}

/// Manifest path for a dataset path: `data.bin` -> `data.bin.manifest.json`.
pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest.json");
    p.into()
}

/// Writes the dataset and its manifest next to it.
pub fn save_dataset(samples: &[Sample], path: &Path, seed: Option<u64>) -> Result<Manifest, DatasetError> {
    let bytes = encode_dataset(samples)?;
    fs::write(path, &bytes)?;
    let systems = samples
        .iter()
        .map(|s| s.system_key)
        .collect::<std::collections::BTreeSet<_>>()
        .len();
    let manifest = Manifest {
        format_version: VERSION,
        samples: samples.len(),
        systems,
        seed,
        schemes_per_system: SCHEMES_PER_SYSTEM,
        sha256: hex::encode(Sha256::digest(&bytes)),
    };
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Loads a dataset, checking it against its manifest when one exists.
pub fn load_dataset(path: &Path) -> Result<Vec<Sample>, DatasetError> {
    let bytes = fs::read(path)?;
    let mpath = manifest_path(path);
    if mpath.exists() {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(mpath)?)?;
        let actual = hex::encode(Sha256::digest(&bytes));
        if manifest.sha256 != actual {
            return Err(format_err(format!(
                "hash mismatch: manifest {} vs file {actual}",
                manifest.sha256
            )));
        }
    }
    decode_dataset(&bytes)
}
