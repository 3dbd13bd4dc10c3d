//! The digest database: exact cosine k-NN over unit vectors, class addition
//! without retraining, per-class pruning, and the PHS1 file format.
//!
//! PHS1 layout (little-endian, no padding):
//!
//! ```text
//! "PHS1" | u32 version = 1 | u32 dim | u32 label_count | u64 entry_count
//! label_count x { u16 byte_len, UTF-8 name }
//! entry_count x { u32 label_id, dim x f32 digest }
//! ```

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{checked_u32, put_f32, put_u16, put_u32, put_u64, write_atomic, Reader};
use crate::error::{Error, Result};
use crate::numeric::l2_normalize;

pub const STORE_MAGIC: &[u8; 4] = b"PHS1";
pub const STORE_VERSION: u32 = 1;
pub const DEFAULT_K: usize = 5;
const DIGEST_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    pub k: usize,
}

impl Default for StoreConfig {
    fn default() -> Self {
        Self { k: DEFAULT_K }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub label_id: u32,
    pub similarity: f64,
    /// Position of the entry in insertion order.
    pub entry: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryResult {
    /// Sorted by similarity, descending; ties keep insertion order.
    pub neighbors: Vec<Neighbor>,
    pub label_id: u32,
    pub confidence: f64,
}

/// Label table plus unit-norm `f32` digests.
#[derive(Debug, Clone, PartialEq)]
pub struct HashStore {
    dim: usize,
    labels: Vec<String>,
    label_ids: Vec<u32>,
    /// `entry_count x dim`, row-major.
    digests: Vec<f32>,
}

impl HashStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig("store dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            labels: Vec::new(),
            label_ids: Vec::new(),
            digests: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.label_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.label_ids.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label_name(&self, id: u32) -> &str {
        &self.labels[id as usize]
    }

    pub fn label_id(&self, name: &str) -> Option<u32> {
        self.labels.iter().position(|l| l == name).map(|p| p as u32)
    }

    pub fn entry_label(&self, entry: usize) -> u32 {
        self.label_ids[entry]
    }

    pub fn digest(&self, entry: usize) -> &[f32] {
        &self.digests[entry * self.dim..(entry + 1) * self.dim]
    }

    /// Entry counts per label id.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.labels.len()];
        for &l in &self.label_ids {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Digest payload size: `entries x dim x 32` bits.
    pub fn size_bits(&self) -> u64 {
        self.len() as u64 * self.dim as u64 * 32
    }

    fn intern_label(&mut self, name: &str) -> Result<u32> {
        if let Some(id) = self.label_id(name) {
            return Ok(id);
        }
        validate_label(name)?;
        self.labels.push(name.to_owned());
        Ok((self.labels.len() - 1) as u32)
    }

    fn normalized(&self, digest: &[f64]) -> Result<Vec<f64>> {
        if digest.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: digest.len(),
            });
        }
        l2_normalize(digest)
    }

    /// Appends a re-normalized digest, creating the label if needed.
    pub fn add_entry(&mut self, label: &str, digest: &[f64]) -> Result<()> {
        let unit = self.normalized(digest)?;
        let id = self.intern_label(label)?;
        self.push(id, &unit);
        Ok(())
    }

    fn push(&mut self, id: u32, unit: &[f64]) {
        self.label_ids.push(id);
        self.digests.extend(unit.iter().map(|&v| v as f32));
    }

    /// Registers a new class with its exemplar digests. Existing entries are
    /// left untouched; the new label gets the next id.
    pub fn add_class<D: AsRef<[f64]>>(&mut self, label: &str, digests: &[D]) -> Result<u32> {
        if self.label_id(label).is_some() {
            return Err(Error::DuplicateLabel(label.to_owned()));
        }
        if digests.is_empty() {
            return Err(Error::EmptyClass(label.to_owned()));
        }
        let units = digests
            .iter()
            .map(|d| self.normalized(d.as_ref()))
            .collect::<Result<Vec<_>>>()?;
        let id = self.intern_label(label)?;
        for u in &units {
            self.push(id, u);
        }
        Ok(id)
    }

    /// Cosine similarities of a unit query against every entry.
    fn similarities(&self, unit: &[f64]) -> Vec<f64> {
        self.digests
            .chunks_exact(self.dim)
            .map(|d| {
                let s: f64 = d.iter().zip(unit).map(|(a, b)| f64::from(*a) * b).sum();
                // + 0.0 folds -0.0 into 0.0 so ordering ties behave
                s.clamp(-1.0, 1.0) + 0.0
            })
            .collect()
    }

    /// Exact top-`k` neighbours by cosine similarity (brute force). `k` is
    /// clamped to the entry count.
    pub fn query(&self, v: &[f64], k: usize) -> Result<Vec<Neighbor>> {
        if self.is_empty() {
            return Err(Error::EmptyStore);
        }
        if k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        let unit = self.normalized(v)?;
        let sims = self.similarities(&unit);
        let mut order: Vec<usize> = (0..sims.len()).collect();
        let k = k.min(order.len());
        // Descending similarity, insertion order among equals.
        let cmp = |a: &usize, b: &usize| sims[*b].total_cmp(&sims[*a]).then(a.cmp(b));
        if k < order.len() {
            order.select_nth_unstable_by(k - 1, cmp);
            order.truncate(k);
        }
        order.sort_unstable_by(cmp);
        Ok(order
            .into_iter()
            .map(|e| Neighbor {
                label_id: self.label_ids[e],
                similarity: sims[e],
                entry: e,
            })
            .collect())
    }

    /// Similarity-weighted vote among the `k` nearest entries.
    ///
    /// Each label scores the sum of its neighbours' positive similarities.
    /// Ties go to the label with the higher single similarity, then the lower
    /// id. If every score is zero the nearest neighbour's label is returned
    /// with confidence `1 / label_count`.
    pub fn classify(&self, v: &[f64], k: usize) -> Result<QueryResult> {
        let neighbors = self.query(v, k)?;
        let mut score = vec![0.0f64; self.labels.len()];
        let mut best = vec![f64::NEG_INFINITY; self.labels.len()];
        for n in &neighbors {
            let l = n.label_id as usize;
            score[l] += n.similarity.max(0.0);
            best[l] = best[l].max(n.similarity);
        }
        let total: f64 = score.iter().sum();
        if total <= 0.0 {
            let label_id = neighbors[0].label_id;
            return Ok(QueryResult {
                neighbors,
                label_id,
                confidence: 1.0 / self.labels.len() as f64,
            });
        }
        let mut winner = 0usize;
        for l in 1..score.len() {
            let better = score[l] > score[winner] || (score[l] == score[winner] && best[l] > best[winner]);
            if better {
                winner = l;
            }
        }
        Ok(QueryResult {
            neighbors,
            label_id: winner as u32,
            confidence: score[winner] / total,
        })
    }

    /// Keeps `ceil(retention * n_c)` entries of every class, chosen by
    /// farthest-point sampling in cosine distance starting from the class
    /// medoid. Kept entries stay in their original order.
    pub fn prune(&self, retention: f64) -> Result<HashStore> {
        if !(retention > 0.0 && retention <= 1.0) {
            return Err(Error::InvalidConfig(format!("retention must lie in (0, 1], got {retention}")));
        }
        let mut keep = vec![false; self.len()];
        for class in 0..self.labels.len() as u32 {
            let members: Vec<usize> = (0..self.len()).filter(|&e| self.label_ids[e] == class).collect();
            if members.is_empty() {
                continue;
            }
            let quota = ceil_fraction(retention, members.len()).max(1);
            for e in self.farthest_points(&members, quota) {
                keep[e] = true;
            }
        }
        let mut out = HashStore {
            dim: self.dim,
            labels: self.labels.clone(),
            label_ids: Vec::new(),
            digests: Vec::new(),
        };
        for (e, _) in keep.iter().enumerate().filter(|(_, k)| **k) {
            out.label_ids.push(self.label_ids[e]);
            out.digests.extend_from_slice(self.digest(e));
        }
        Ok(out)
    }

    fn entry_f64(&self, e: usize) -> Vec<f64> {
        self.digest(e).iter().map(|&v| f64::from(v)).collect()
    }

    /// Medoid first, then repeatedly the member farthest (in `1 - cos`) from
    /// everything chosen so far. Ties go to the earlier entry.
    fn farthest_points(&self, members: &[usize], quota: usize) -> Vec<usize> {
        // Mean similarity to the class equals the dot product with the class
        // mean vector, which keeps the medoid search linear.
        let mut centroid = vec![0.0f64; self.dim];
        for &e in members {
            for (c, v) in centroid.iter_mut().zip(self.digest(e)) {
                *c += f64::from(*v);
            }
        }
        let mean_sim = |e: usize| -> f64 {
            self.digest(e)
                .iter()
                .zip(&centroid)
                .map(|(a, b)| f64::from(*a) * b)
                .sum()
        };
        let mut medoid = 0;
        let mut best = f64::NEG_INFINITY;
        for (i, &e) in members.iter().enumerate() {
            let s = mean_sim(e);
            if s > best {
                best = s;
                medoid = i;
            }
        }

        let mut chosen = vec![members[medoid]];
        let mut taken = vec![false; members.len()];
        taken[medoid] = true;
        let mut min_dist = vec![f64::INFINITY; members.len()];
        let mut last = self.entry_f64(members[medoid]);
        while chosen.len() < quota {
            let mut pick: Option<usize> = None;
            for (i, &e) in members.iter().enumerate() {
                if taken[i] {
                    continue;
                }
                let sim: f64 = self.digest(e).iter().zip(&last).map(|(a, b)| f64::from(*a) * b).sum();
                min_dist[i] = min_dist[i].min(1.0 - sim);
                if pick.map_or(true, |p| min_dist[i] > min_dist[p]) {
                    pick = Some(i);
                }
            }
            let Some(p) = pick else { break };
            taken[p] = true;
            chosen.push(members[p]);
            last = self.entry_f64(members[p]);
        }
        chosen
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(24 + self.digests.len() * 4 + self.len() * 4);
        out.extend_from_slice(STORE_MAGIC);
        put_u32(&mut out, STORE_VERSION);
        put_u32(&mut out, checked_u32(self.dim, "dim")?);
        put_u32(&mut out, checked_u32(self.labels.len(), "label count")?);
        put_u64(&mut out, self.len() as u64);
        for name in &self.labels {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("label {name:?} longer than 65535 bytes")))?;
            put_u16(&mut out, len);
            out.extend_from_slice(name.as_bytes());
        }
        for (e, &id) in self.label_ids.iter().enumerate() {
            put_u32(&mut out, id);
            for &v in self.digest(e) {
                put_f32(&mut out, v);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(STORE_MAGIC)?;
        let version = r.u32()?;
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported PHS1 version {version}")));
        }
        let dim = r.u32()? as usize;
        if dim == 0 {
            return Err(Error::Format("dimension is zero".into()));
        }
        let label_count = r.u32()? as usize;
        let entry_count = r.u64()?;

        let mut labels = Vec::with_capacity(label_count.min(1 << 16));
        let mut seen = HashSet::new();
        for _ in 0..label_count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("label is not valid UTF-8".into()))?
                .to_owned();
            validate_label(&name).map_err(|e| Error::Format(e.to_string()))?;
            if !seen.insert(name.clone()) {
                return Err(Error::Format(format!("duplicate label {name:?}")));
            }
            labels.push(name);
        }

        let entry_bytes = 4 + dim as u64 * 4;
        let needed = entry_count.checked_mul(entry_bytes);
        if needed != Some(r.remaining() as u64) {
            return Err(Error::Format(format!(
                "entry section holds {} bytes, header implies {}",
                r.remaining(),
                needed.map_or_else(|| "overflow".to_string(), |n| n.to_string())
            )));
        }
        let entry_count = entry_count as usize;
        let mut label_ids = Vec::with_capacity(entry_count);
        let mut digests = Vec::with_capacity(entry_count * dim);
        for e in 0..entry_count {
            let id = r.u32()?;
            if id as usize >= label_count {
                return Err(Error::Format(format!("entry {e} references unknown label id {id}")));
            }
            let start = digests.len();
            for _ in 0..dim {
                digests.push(r.f32()?);
            }
            let norm = digests[start..].iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
            if !norm.is_finite() || (norm - 1.0).abs() > DIGEST_NORM_TOL {
                return Err(Error::Format(format!("entry {e} digest norm {norm} is not unit")));
            }
            label_ids.push(id);
        }
        Ok(Self {
            dim,
            labels,
            label_ids,
            digests,
        })
    }

    /// Atomic write of the PHS1 encoding.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn validate_label(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::InvalidConfig("label names must be non-empty".into()));
    }
    if name.len() > u16::MAX as usize {
        return Err(Error::InvalidConfig("label name exceeds 65535 bytes".into()));
    }
    Ok(())
}

/// `ceil(fraction * n)`, tolerant of representation error in `fraction`.
pub fn ceil_fraction(fraction: f64, n: usize) -> usize {
    let x = fraction * n as f64;
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}
