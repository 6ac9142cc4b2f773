//! Bit-packed binary codes, Hamming ranking and retrieval metrics.
//!
//! Code dimension `k` of item `i` lives in bit `k % 64` of word `k / 64`;
//! a set bit encodes `+1`. Padding bits beyond the code length stay zero.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::io::{read_u32, read_u32s, read_u64s, write_u32, write_u32s, write_u64s};

pub const CODES_MAGIC: &[u8; 4] = b"PTSC";
pub const CODES_VERSION: u32 = 1;

/// Hamming radius used by the radius-precision metric.
pub const RADIUS: u32 = 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeSet {
    bits: usize,
    words_per_code: usize,
    words: Vec<u64>,
    ids: Option<Vec<u64>>,
    labels: Option<Vec<u32>>,
}

pub fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

/// Packs `{-1, +1}` codes of length `bits`.
pub fn pack(codes: &[Vec<i8>], bits: usize) -> Result<CodeSet> {
    if bits == 0 {
        return Err(Error::InvalidParameter("code length must be >= 1".into()));
    }
    let wpc = words_for(bits);
    let mut words = vec![0u64; codes.len() * wpc];
    for (i, code) in codes.iter().enumerate() {
        if code.len() != bits {
            return Err(shape_err(format!("{bits} bits"), format!("row {i} with {}", code.len())));
        }
        for (k, &v) in code.iter().enumerate() {
            match v {
                1 => words[i * wpc + k / 64] |= 1u64 << (k % 64),
                -1 => {}
                other => {
                    return Err(Error::InvalidParameter(format!(
                        "code value {other} at row {i}, bit {k} is not +-1"
                    )))
                }
            }
        }
    }
    Ok(CodeSet {
        bits,
        words_per_code: wpc,
        words,
        ids: None,
        labels: None,
    })
}

impl CodeSet {
    pub fn with_ids(mut self, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != self.len() {
            return Err(shape_err(self.len(), ids.len()));
        }
        self.ids = Some(ids);
        Ok(self)
    }

    pub fn with_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(shape_err(self.len(), labels.len()));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.words.len() / self.words_per_code
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn ids(&self) -> Option<&[u64]> {
        self.ids.as_deref()
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    #[inline]
    pub fn code(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    pub fn unpack(&self) -> Vec<Vec<i8>> {
        (0..self.len())
            .map(|i| {
                let c = self.code(i);
                (0..self.bits)
                    .map(|k| if (c[k / 64] >> (k % 64)) & 1 == 1 { 1 } else { -1 })
                    .collect()
            })
            .collect()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CODES_MAGIC)?;
        write_u32(&mut w, CODES_VERSION)?;
        write_u32(&mut w, self.len() as u32)?;
        write_u32(&mut w, self.bits as u32)?;
        write_u64s(&mut w, &self.words)?;
        if let Some(l) = &self.labels {
            write_u32s(&mut w, l)?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CODES_MAGIC {
            return Err(Error::Format("not a code file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CODES_VERSION {
            return Err(Error::Format(format!("unsupported code file version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        let bits = read_u32(&mut r)? as usize;
        if bits == 0 {
            return Err(Error::Format("zero code length".into()));
        }
        let wpc = words_for(bits);
        let words = read_u64s(&mut r, n * wpc)?;
        let pad_mask = if bits % 64 == 0 { 0 } else { !0u64 << (bits % 64) };
        if words.chunks_exact(wpc).any(|c| c[wpc - 1] & pad_mask != 0) {
            return Err(Error::Format("nonzero padding bits".into()));
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        let labels = match rest.len() {
            0 => None,
            len if len == n * 4 => Some(read_u32s(&mut rest.as_slice(), n)?),
            len => {
                return Err(Error::Format(format!(
                    "{len} trailing bytes; expected 0 or {} label bytes",
                    n * 4
                )))
            }
        };
        Ok(Self {
            bits,
            words_per_code: wpc,
            words,
            ids: None,
            labels,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[inline]
fn hamming_words(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Popcount of XOR over the packed words.
pub fn hamming(a: &[u64], b: &[u64]) -> Result<u32> {
    if a.len() != b.len() {
        return Err(shape_err(format!("{} words", a.len()), b.len()));
    }
    Ok(hamming_words(a, b))
}

/// Database indices by ascending distance, ties by ascending index.
pub fn rank_database(query: &[u64], db: &CodeSet) -> Vec<usize> {
    let dists: Vec<u32> = (0..db.len()).map(|i| hamming_words(query, db.code(i))).collect();
    rank_by_distance(&dists, db.bits())
}

/// Stable counting sort of `0..dists.len()` by distance.
fn rank_by_distance(dists: &[u32], bits: usize) -> Vec<usize> {
    let mut start = vec![0usize; bits + 2];
    for &d in dists {
        start[d as usize + 1] += 1;
    }
    for k in 1..start.len() {
        start[k] += start[k - 1];
    }
    let mut out = vec![0usize; dists.len()];
    for (i, &d) in dists.iter().enumerate() {
        out[start[d as usize]] = i;
        start[d as usize] += 1;
    }
    out
}

/// AP over the first `k` ranks, normalized by `min(R, k)` where `R` counts
/// relevant entries in the whole list. Zero when nothing is relevant.
pub fn average_precision(relevance: &[bool], k: usize) -> f64 {
    let total = relevance.iter().filter(|&&r| r).count();
    ap_with_total(relevance, k, total)
}

fn ap_with_total(relevance: &[bool], k: usize, total: usize) -> f64 {
    if total == 0 || k == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, _) in relevance.iter().take(k).enumerate().filter(|(_, &r)| r) {
        hits += 1;
        sum += hits as f64 / (rank + 1) as f64;
    }
    sum / total.min(k) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryDiagnostics {
    pub average_precision: f64,
    pub relevant_total: usize,
    pub retrieved_radius: usize,
    pub relevant_radius: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map_at_k: f64,
    pub k: usize,
    pub precision_hamming2: f64,
    pub topk_curve: Vec<(usize, f64)>,
    pub per_query: Vec<QueryDiagnostics>,
}

/// MAP@K, precision within Hamming radius 2 and top-k precision.
///
/// Relevance is label equality. A database item with the same id as the
/// query is skipped. Queries with an empty radius-2 ball score 0 there.
pub fn evaluate(queries: &CodeSet, db: &CodeSet, k: usize, topk: &[usize]) -> Result<MetricsReport> {
    if queries.bits() != db.bits() {
        return Err(shape_err(format!("{} bits", queries.bits()), db.bits()));
    }
    if k == 0 {
        return Err(Error::InvalidParameter("K must be >= 1".into()));
    }
    let ql = queries
        .labels()
        .ok_or_else(|| Error::MissingLabels("query codes carry no labels".into()))?;
    let dl = db
        .labels()
        .ok_or_else(|| Error::MissingLabels("database codes carry no labels".into()))?;
    let mut cuts: Vec<usize> = topk.iter().copied().filter(|&c| c > 0).collect();
    cuts.sort_unstable();
    cuts.dedup();

    let ids = queries.ids().zip(db.ids());
    let mut per_query = Vec::with_capacity(queries.len());
    let mut topk_sums = vec![0.0; cuts.len()];
    let mut dists = Vec::with_capacity(db.len());
    let mut keep = Vec::with_capacity(db.len());
    for qi in 0..queries.len() {
        let qc = queries.code(qi);
        dists.clear();
        keep.clear();
        for di in 0..db.len() {
            if let Some((qids, dids)) = ids {
                if qids[qi] == dids[di] {
                    continue;
                }
            }
            keep.push(di);
            dists.push(hamming_words(qc, db.code(di)));
        }
        let order = rank_by_distance(&dists, db.bits());
        let relevance: Vec<bool> = order.iter().map(|&o| dl[keep[o]] == ql[qi]).collect();
        let relevant_total = relevance.iter().filter(|&&r| r).count();
        let ap = ap_with_total(&relevance, k, relevant_total);

        let retrieved_radius = dists.iter().filter(|&&d| d <= RADIUS).count();
        // ranked order puts the radius ball first
        let relevant_radius = relevance[..retrieved_radius].iter().filter(|&&r| r).count();

        let mut hits = 0usize;
        let mut prev = 0usize;
        for (slot, &cut) in cuts.iter().enumerate() {
            let upto = cut.min(relevance.len());
            hits += relevance[prev..upto].iter().filter(|&&r| r).count();
            prev = upto;
            topk_sums[slot] += hits as f64 / cut as f64;
        }

        per_query.push(QueryDiagnostics {
            average_precision: ap,
            relevant_total,
            retrieved_radius,
            relevant_radius,
        });
    }

    let nq = queries.len().max(1) as f64;
    let map_at_k = per_query.iter().map(|q| q.average_precision).sum::<f64>() / nq;
    let precision_hamming2 = per_query
        .iter()
        .map(|q| {
            if q.retrieved_radius == 0 {
                0.0
            } else {
                q.relevant_radius as f64 / q.retrieved_radius as f64
            }
        })
        .sum::<f64>()
        / nq;
    let topk_curve = cuts
        .iter()
        .zip(topk_sums)
        .map(|(&c, s)| (c, s / nq))
        .collect();
    Ok(MetricsReport {
        map_at_k,
        k,
        precision_hamming2,
        topk_curve,
        per_query,
    })
}
