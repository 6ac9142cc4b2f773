//! Synthetic datasets, role splits and pairwise ground truth.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_f32s, read_u32, read_u32s, write_f32s, write_u32, write_u32s};
use crate::matrix::Matrix;

pub const DATASET_MAGIC: &[u8; 4] = b"PTSD";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    TrainLabeled,
    TrainUnlabeled,
    Query,
    Database,
}

impl Role {
    fn to_byte(self) -> u8 {
        match self {
            Role::TrainLabeled => 0,
            Role::TrainUnlabeled => 1,
            Role::Query => 2,
            Role::Database => 3,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        Ok(match b {
            0 => Role::TrainLabeled,
            1 => Role::TrainUnlabeled,
            2 => Role::Query,
            3 => Role::Database,
            other => return Err(Error::Format(format!("unknown role byte {other}"))),
        })
    }

    /// Training items are retrievable too: the database is everything but queries.
    pub fn in_database(self) -> bool {
        self != Role::Query
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    pub classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub spread: f64,
    pub seed: u64,
}

impl Default for BlobParams {
    fn default() -> Self {
        Self {
            classes: 10,
            per_class: 600,
            dim: 32,
            spread: 0.3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<u32>,
    roles: Vec<Role>,
    num_classes: u32,
    pub generator: Option<BlobParams>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<u32>, roles: Vec<Role>) -> Result<Self> {
        if labels.len() != features.rows() || roles.len() != features.rows() {
            return Err(Error::InvalidParameter(format!(
                "{} rows but {} labels and {} roles",
                features.rows(),
                labels.len(),
                roles.len()
            )));
        }
        let num_classes = labels.iter().max().map_or(0, |&m| m + 1);
        Ok(Self {
            features,
            labels,
            roles,
            num_classes,
            generator: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    /// Ground-truth labels of every item. Evaluation only; trainers go through
    /// [`TrainView`], which never exposes unlabeled items' labels.
    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn indices_with(&self, pred: impl Fn(Role) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| pred(self.roles[i])).collect()
    }

    pub fn role_counts(&self) -> [usize; 4] {
        let mut c = [0; 4];
        for r in &self.roles {
            c[r.to_byte() as usize] += 1;
        }
        c
    }

    /// Labeled items for training with `validation_fraction` of them withheld
    /// (shuffled with `seed`). Unlabeled items come without labels.
    pub fn train_view(&self, validation_fraction: f64, seed: u64) -> Result<TrainView<'_>> {
        if !(0.0..1.0).contains(&validation_fraction) {
            return Err(Error::InvalidParameter(format!(
                "validation fraction {validation_fraction} outside [0, 1)"
            )));
        }
        let mut labeled = self.indices_with(|r| r == Role::TrainLabeled);
        if labeled.is_empty() {
            return Err(Error::InsufficientSamples("no labeled training items".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        labeled.shuffle(&mut rng);
        let n_val = (validation_fraction * labeled.len() as f64).round() as usize;
        let validation = labeled.split_off(labeled.len() - n_val);
        if labeled.is_empty() {
            return Err(Error::InsufficientSamples(
                "validation split leaves no labeled training items".into(),
            ));
        }
        let labeled_labels = labeled.iter().map(|&i| self.labels[i]).collect();
        let validation_labels = validation.iter().map(|&i| self.labels[i]).collect();
        Ok(TrainView {
            features: &self.features,
            labeled,
            labeled_labels,
            validation,
            validation_labels,
            unlabeled: self.indices_with(|r| r == Role::TrainUnlabeled),
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        write_u32(&mut w, DATASET_VERSION)?;
        write_u32(&mut w, to_u32(self.len())?)?;
        write_u32(&mut w, to_u32(self.dim())?)?;
        write_u32(&mut w, self.num_classes)?;
        write_f32s(&mut w, self.features.as_slice())?;
        write_u32s(&mut w, &self.labels)?;
        let roles: Vec<u8> = self.roles.iter().map(|r| r.to_byte()).collect();
        w.write_all(&roles)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let classes = read_u32(&mut r)?;
        let feats = read_f32s(&mut r, n * d)?;
        let labels = read_u32s(&mut r, n)?;
        if labels.iter().any(|&l| l >= classes) {
            return Err(Error::Format("label exceeds class count".into()));
        }
        let mut role_bytes = vec![0u8; n];
        r.read_exact(&mut role_bytes)?;
        let roles = role_bytes
            .into_iter()
            .map(Role::from_byte)
            .collect::<Result<Vec<_>>>()?;
        let mut ds = Dataset::new(Matrix::from_vec(n, d, feats), labels, roles)?;
        ds.num_classes = classes;
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }

    /// Reads a CSV with a header row: feature columns followed by an integer
    /// label column. Every item starts in the database role.
    pub fn from_csv(r: impl Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let width = rdr.headers()?.len();
        if width < 2 {
            return Err(Error::Format(
                "CSV needs at least one feature column and a label column".into(),
            ));
        }
        let d = width - 1;
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            for k in 0..d {
                let v: f64 = rec[k].trim().parse().map_err(|_| {
                    Error::Format(format!("row {}: bad feature '{}'", line + 1, &rec[k]))
                })?;
                feats.push(v);
            }
            let l: u32 = rec[d].trim().parse().map_err(|_| {
                Error::Format(format!("row {}: bad label '{}'", line + 1, &rec[d]))
            })?;
            labels.push(l);
        }
        let n = labels.len();
        Dataset::new(Matrix::from_vec(n, d, feats), labels, vec![Role::Database; n])
    }
}

fn to_u32(v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in 32 bits")))
}

/// The trainer's window onto a dataset.
///
/// Holds labels for labeled and validation items only; unlabeled items are
/// reachable solely through their features.
#[derive(Clone, Debug)]
pub struct TrainView<'a> {
    features: &'a Matrix,
    labeled: Vec<usize>,
    labeled_labels: Vec<u32>,
    validation: Vec<usize>,
    validation_labels: Vec<u32>,
    unlabeled: Vec<usize>,
}

impl<'a> TrainView<'a> {
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled.len()
    }

    pub fn num_unlabeled(&self) -> usize {
        self.unlabeled.len()
    }

    pub fn num_validation(&self) -> usize {
        self.validation.len()
    }

    /// Features of the `k`-th labeled item and its label.
    pub fn labeled(&self, k: usize) -> (&'a [f64], u32) {
        (self.features.row(self.labeled[k]), self.labeled_labels[k])
    }

    pub fn unlabeled(&self, k: usize) -> &'a [f64] {
        self.features.row(self.unlabeled[k])
    }

    pub fn labeled_features(&self) -> Matrix {
        self.features.select_rows(&self.labeled)
    }

    pub fn labeled_labels(&self) -> &[u32] {
        &self.labeled_labels
    }

    pub fn validation_features(&self) -> Matrix {
        self.features.select_rows(&self.validation)
    }

    pub fn validation_labels(&self) -> &[u32] {
        &self.validation_labels
    }

    /// Per-feature standard deviation over every training item (labeled and
    /// unlabeled, validation excluded).
    pub fn feature_std(&self) -> Vec<f64> {
        let d = self.dim();
        let rows: Vec<&[f64]> = self
            .labeled
            .iter()
            .chain(&self.unlabeled)
            .map(|&i| self.features.row(i))
            .collect();
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in &rows {
            for k in 0..d {
                let c = r[k] - mean[k];
                var[k] += c * c;
            }
        }
        var.into_iter().map(|v| (v / n).sqrt()).collect()
    }

    /// Fraction of ordered labeled pairs (self-pairs included) that share a label.
    pub fn similar_pair_fraction(&self) -> f64 {
        similar_pair_fraction(&self.labeled_labels)
    }
}

/// `sum_c n_c^2 / N^2` over ordered pairs, self-pairs included.
pub fn similar_pair_fraction(labels: &[u32]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts = std::collections::HashMap::new();
    for &l in labels {
        *counts.entry(l).or_insert(0usize) += 1;
    }
    let same: usize = counts.values().map(|&c| c * c).sum();
    same as f64 / (labels.len() * labels.len()) as f64
}

/// Single-label similarity: 1 iff the labels are equal.
pub fn pair_label(a: u32, b: u32) -> u8 {
    u8::from(a == b)
}

/// Multi-label similarity: 1 iff the tag sets share at least one tag.
pub fn pair_label_sets(a: &[u32], b: &[u32]) -> u8 {
    u8::from(a.iter().any(|x| b.contains(x)))
}

/// Class centers uniform on the unit sphere, points Gaussian around them with
/// per-coordinate std `spread`. All items start in the database role.
pub fn generate_blobs(params: &BlobParams) -> Result<Dataset> {
    if params.classes < 2 {
        return Err(Error::InvalidParameter("need at least 2 classes".into()));
    }
    if params.per_class < 10 {
        return Err(Error::InvalidParameter("need at least 10 items per class".into()));
    }
    if params.dim == 0 {
        return Err(Error::InvalidParameter("feature dimension is zero".into()));
    }
    if !(params.spread >= 0.0 && params.spread.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "spread must be finite and >= 0, got {}",
            params.spread
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let d = params.dim;
    let mut centers = Matrix::zeros(params.classes, d);
    for c in 0..params.classes {
        loop {
            let row = centers.row_mut(c);
            for v in row.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-9 {
                row.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
    }
    let n = params.classes * params.per_class;
    let mut feats = Matrix::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    for c in 0..params.classes {
        for k in 0..params.per_class {
            let row = feats.row_mut(c * params.per_class + k);
            for (v, &mu) in row.iter_mut().zip(centers.row(c)) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = mu + params.spread * z;
            }
            labels.push(c as u32);
        }
    }
    let mut ds = Dataset::new(feats, labels, vec![Role::Database; n])?;
    ds.generator = Some(params.clone());
    Ok(ds)
}

/// Assigns roles: per class, `queries_per_class` queries, the rest database,
/// and `labeled_fraction` of each class's database items labeled for
/// training. Remaining database items become unlabeled training items.
pub fn split(
    dataset: &Dataset,
    labeled_fraction: f64,
    queries_per_class: usize,
    seed: u64,
) -> Result<Dataset> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "labeled fraction must lie in (0, 1], got {labeled_fraction}"
        )));
    }
    if queries_per_class == 0 {
        return Err(Error::InvalidParameter("need at least one query per class".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes as usize];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut roles = vec![Role::Database; dataset.len()];
    let mut total_labeled = 0;
    for (c, items) in by_class.iter_mut().enumerate() {
        if items.is_empty() {
            continue;
        }
        if items.len() <= queries_per_class {
            return Err(Error::InsufficientSamples(format!(
                "class {c} has {} items, needs more than {queries_per_class}",
                items.len()
            )));
        }
        items.shuffle(&mut rng);
        let (queries, db) = items.split_at(queries_per_class);
        for &q in queries {
            roles[q] = Role::Query;
        }
        let n_lab = (labeled_fraction * db.len() as f64).round() as usize;
        for (k, &i) in db.iter().enumerate() {
            roles[i] = if k < n_lab {
                Role::TrainLabeled
            } else {
                Role::TrainUnlabeled
            };
        }
        total_labeled += n_lab;
    }
    if total_labeled == 0 {
        return Err(Error::InsufficientSamples(
            "split produced no labeled items".into(),
        ));
    }
    let mut out = dataset.clone();
    out.roles = roles;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Dataset {
        generate_blobs(&BlobParams {
            classes: 3,
            per_class: 20,
            dim: 4,
            spread: 0.1,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn pair_labels() {
        assert_eq!(pair_label(3, 3), 1);
        assert_eq!(pair_label(3, 7), 0);
        assert_eq!(pair_label_sets(&[1, 2], &[2, 9]), 1);
        assert_eq!(pair_label_sets(&[1, 2], &[3, 9]), 0);
    }

    #[test]
    fn generator_is_deterministic() {
        assert_eq!(small(), small());
    }

    #[test]
    fn zero_spread_points_sit_on_centers() {
        let ds = generate_blobs(&BlobParams {
            classes: 4,
            per_class: 10,
            dim: 6,
            spread: 0.0,
            seed: 1,
        })
        .unwrap();
        for c in 0..4 {
            let first = ds.features().row(c * 10);
            let norm: f64 = first.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
            for k in 1..10 {
                assert_eq!(ds.features().row(c * 10 + k), first);
            }
        }
    }

    #[test]
    fn degenerate_generator_params_rejected() {
        let mut p = BlobParams::default();
        p.classes = 1;
        assert!(generate_blobs(&p).is_err());
        let mut p = BlobParams::default();
        p.per_class = 5;
        assert!(generate_blobs(&p).is_err());
        let mut p = BlobParams::default();
        p.dim = 0;
        assert!(generate_blobs(&p).is_err());
    }

    #[test]
    fn split_counts_default() {
        let ds = generate_blobs(&BlobParams::default()).unwrap();
        let s = split(&ds, 0.1, 50, 3).unwrap();
        let [lab, unlab, q, db] = s.role_counts();
        assert_eq!(q, 500);
        assert_eq!(lab + unlab + db, 5500);
        assert_eq!(lab, 550);
        assert_eq!(db, 0);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = small();
        assert!(split(&ds, 0.0, 5, 0).is_err());
        assert!(split(&ds, 1.5, 5, 0).is_err());
        assert!(split(&ds, 0.5, 20, 0).is_err());
        let all = split(&ds, 1.0, 5, 0).unwrap();
        assert_eq!(all.role_counts()[1], 0);
    }

    #[test]
    fn split_keeps_every_class_in_queries_and_database() {
        let s = split(&small(), 0.3, 4, 8).unwrap();
        for c in 0..3u32 {
            let has = |pred: fn(Role) -> bool| {
                (0..s.len()).any(|i| s.labels()[i] == c && pred(s.roles()[i]))
            };
            assert!(has(|r| r == Role::Query));
            assert!(has(Role::in_database));
        }
    }

    #[test]
    fn train_view_withholds_validation() {
        let s = split(&small(), 0.5, 4, 8).unwrap();
        let v = s.train_view(0.1, 2).unwrap();
        let lab = s.role_counts()[0];
        assert_eq!(v.num_labeled() + v.num_validation(), lab);
        assert_eq!(v.num_validation(), (0.1 * lab as f64).round() as usize);
        assert_eq!(v.num_unlabeled(), s.role_counts()[1]);
    }

    #[test]
    fn similar_fraction_matches_direct_count() {
        let labels = [0u32, 1, 1, 2, 2, 2, 0, 1];
        let mut same = 0;
        for &a in &labels {
            for &b in &labels {
                same += pair_label(a, b) as usize;
            }
        }
        let direct = same as f64 / (labels.len() * labels.len()) as f64;
        assert_eq!(similar_pair_fraction(&labels), direct);
    }

    #[test]
    fn dataset_file_roundtrip() {
        let s = split(&small(), 0.5, 4, 8).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = Dataset::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.labels(), s.labels());
        assert_eq!(back.roles(), s.roles());
        for (a, b) in back.features().as_slice().iter().zip(s.features().as_slice()) {
            assert_eq!(*a, *b as f32 as f64);
        }
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Dataset::read_from(bad.as_slice()).is_err());
    }

    #[test]
    fn csv_import() {
        let text = "f0,f1,label\n0.5,1.0,0\n-1.0,2.5,1\n";
        let ds = Dataset::from_csv(text.as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.labels(), &[0, 1]);
        assert_eq!(ds.features().row(1), &[-1.0, 2.5]);
        assert!(Dataset::from_csv("f0,label\nx,1\n".as_bytes()).is_err());
    }
}
