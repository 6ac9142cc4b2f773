//! Loss terms and their gradients with respect to the student embeddings.
//!
//! Supervised terms work on labeled pairs with each loss kind's own
//! similarity (inner product, negative squared distance, half inner product).
//! Unsupervised terms compare student and teacher pairwise similarities of
//! L2-normalized embeddings, which live in `[-4, 0]`. Teacher quantities are
//! constants here: no gradient ever flows into them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::matrix::{dot, Matrix};

/// Norm floor used when L2-normalizing embeddings.
pub const NORM_EPS: f64 = 1e-12;

/// Default hinge margin of the quantized loss: the width of the `[-4, 0]` range.
pub const NORMALIZED_MARGIN: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SupervisedKind {
    Ksh,
    Dsh,
    Dpsh,
}

impl fmt::Display for SupervisedKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SupervisedKind::Ksh => "KSH",
            SupervisedKind::Dsh => "DSH",
            SupervisedKind::Dpsh => "DPSH",
        })
    }
}

impl FromStr for SupervisedKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ksh" => Ok(SupervisedKind::Ksh),
            "dsh" => Ok(SupervisedKind::Dsh),
            "dpsh" => Ok(SupervisedKind::Dpsh),
            other => Err(Error::InvalidParameter(format!(
                "unknown supervised loss kind '{other}'"
            ))),
        }
    }
}

/// How the pseudo-labeled pairs are scored on normalized similarities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum QuantizedForm {
    /// DSH-style hinge rescaled to `[-4, 0]`: `-w*u + (1-w)*max(0, margin + u)`.
    NormalizedHinge { margin: f64 },
    /// The supervised kind's loss applied unchanged to the normalized similarity.
    Verbatim,
}

impl Default for QuantizedForm {
    fn default() -> Self {
        QuantizedForm::NormalizedHinge {
            margin: NORMALIZED_MARGIN,
        }
    }
}

/// Scalar knobs of the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub code_bits: usize,
    /// Weight of the unsupervised term (before ramp-up).
    pub omega: f64,
    /// Weight of the quantized similarity loss inside the unsupervised term.
    pub gamma: f64,
    /// Weight of the L1 quantization penalty.
    pub eta: f64,
    /// EMA decay of the teacher.
    pub alpha: f64,
    /// Target fraction of pseudo-similar pairs; `None` means "match the
    /// similar-pair fraction of the labeled training pairs".
    pub rho: Option<f64>,
    pub kind: SupervisedKind,
    /// Whether the consistent similarity loss is included.
    pub consistency: bool,
    pub quantized_form: QuantizedForm,
}

impl Hyperparams {
    pub fn for_kind(kind: SupervisedKind, code_bits: usize) -> Self {
        let (omega, gamma, eta) = match kind {
            SupervisedKind::Dpsh => (0.02, 0.5, 0.01),
            _ => (0.8, 0.5, 0.004),
        };
        Self {
            code_bits,
            omega,
            gamma,
            eta,
            alpha: 0.995,
            rho: None,
            kind,
            consistency: true,
            quantized_form: QuantizedForm::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.code_bits == 0 {
            return Err(Error::InvalidParameter("code length must be >= 1".into()));
        }
        for (name, v) in [("omega", self.omega), ("gamma", self.gamma), ("eta", self.eta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidParameter(format!(
                "alpha must lie in [0, 1], got {}",
                self.alpha
            )));
        }
        if let Some(r) = self.rho {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::InvalidParameter(format!(
                    "rho must lie in [0, 1], got {r}"
                )));
            }
        }
        if let QuantizedForm::NormalizedHinge { margin } = self.quantized_form {
            if !(margin > 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "quantized margin must be > 0, got {margin}"
                )));
            }
        }
        Ok(())
    }
}

/// Labeled pairs of a mini-batch: ordered `(row_i, row_j, s_ij)` triples.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairSupervision {
    pairs: Vec<(usize, usize, u8)>,
}

impl PairSupervision {
    /// All ordered pairs (self-pairs included) among `rows`, where `labels[k]`
    /// is the class of `rows[k]`.
    pub fn from_labels(rows: &[usize], labels: &[u32]) -> Self {
        assert_eq!(rows.len(), labels.len());
        let mut pairs = Vec::with_capacity(rows.len() * rows.len());
        for (a, &ri) in rows.iter().enumerate() {
            for (b, &rj) in rows.iter().enumerate() {
                pairs.push((ri, rj, u8::from(labels[a] == labels[b])));
            }
        }
        Self { pairs }
    }

    /// Explicit pair list. Rejects non-binary similarities and asymmetric sets.
    pub fn from_pairs(pairs: Vec<(usize, usize, u8)>) -> Result<Self> {
        if pairs.iter().any(|&(_, _, s)| s > 1) {
            return Err(Error::InvalidParameter("pair similarity must be 0 or 1".into()));
        }
        let set: std::collections::HashMap<(usize, usize), u8> =
            pairs.iter().map(|&(i, j, s)| ((i, j), s)).collect();
        for &(i, j, s) in &pairs {
            if set.get(&(j, i)).is_some_and(|&t| t != s) {
                return Err(Error::InvalidParameter(format!(
                    "asymmetric similarity for pair ({i}, {j})"
                )));
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(usize, usize, u8)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn max_row(&self) -> Option<usize> {
        self.pairs.iter().map(|&(i, j, _)| i.max(j)).max()
    }

    /// Fraction of pairs with `s_ij = 1`.
    pub fn similar_fraction(&self) -> f64 {
        if self.pairs.is_empty() {
            return 0.0;
        }
        let sim = self.pairs.iter().filter(|p| p.2 == 1).count();
        sim as f64 / self.pairs.len() as f64
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `-|| s/|s| - t/|t| ||^2`, with norms floored at [`NORM_EPS`].
pub fn sim_relaxed(s: &[f64], t: &[f64]) -> f64 {
    let ns = l2_norm(s).max(NORM_EPS);
    let nt = l2_norm(t).max(NORM_EPS);
    -s.iter()
        .zip(t)
        .map(|(a, b)| {
            let d = a / ns - b / nt;
            d * d
        })
        .sum::<f64>()
}

/// Row-normalized embeddings together with the norms used.
#[derive(Clone, Debug)]
pub struct NormalizedRows {
    pub unit: Matrix,
    pub norms: Vec<f64>,
    /// Rows whose norm fell below [`NORM_EPS`].
    pub degenerate: usize,
}

impl NormalizedRows {
    pub fn new(emb: &Matrix) -> Self {
        let mut unit = emb.clone();
        let mut norms = Vec::with_capacity(emb.rows());
        let mut degenerate = 0;
        for r in 0..emb.rows() {
            let raw = l2_norm(emb.row(r));
            if raw < NORM_EPS {
                degenerate += 1;
            }
            let n = raw.max(NORM_EPS);
            unit.row_mut(r).iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Self {
            unit,
            norms,
            degenerate,
        }
    }

    /// `[m x m]` matrix of pairwise relaxed similarities.
    pub fn similarities(&self) -> Matrix {
        let m = self.unit.rows();
        let mut out = Matrix::zeros(m, m);
        for i in 0..m {
            let a = self.unit.row(i);
            for j in 0..m {
                let b = self.unit.row(j);
                let v: f64 = a
                    .iter()
                    .zip(b)
                    .map(|(x, y)| {
                        let d = x - y;
                        d * d
                    })
                    .sum();
                out.set(i, j, -v);
            }
        }
        out
    }

    /// Pulls `dL/du` (an `[m x m]` matrix over ordered pairs) back to the raw
    /// embeddings.
    pub fn backprop_similarities(&self, grad_sims: &Matrix) -> Matrix {
        let (m, b) = self.unit.shape();
        let mut grad_unit = Matrix::zeros(m, b);
        for i in 0..m {
            for j in 0..m {
                let g = grad_sims.get(i, j);
                if g == 0.0 || i == j {
                    continue;
                }
                // u = -|n_i - n_j|^2
                for k in 0..b {
                    let d = self.unit.get(i, k) - self.unit.get(j, k);
                    let gi = grad_unit.get(i, k) - 2.0 * g * d;
                    grad_unit.set(i, k, gi);
                    let gj = grad_unit.get(j, k) + 2.0 * g * d;
                    grad_unit.set(j, k, gj);
                }
            }
        }
        let mut grad = Matrix::zeros(m, b);
        for i in 0..m {
            let n = self.norms[i];
            let gu = grad_unit.row(i);
            let out = grad.row_mut(i);
            if n > NORM_EPS {
                let u = self.unit.row(i);
                let proj = dot(u, gu);
                for k in 0..b {
                    out[k] = (gu[k] - u[k] * proj) / n;
                }
            } else {
                for k in 0..b {
                    out[k] = gu[k] / n;
                }
            }
        }
        grad
    }
}

/// Per-pair supervised loss and its derivative with respect to `u`.
///
/// `u` is the kind's own similarity: `h_i.h_j` for KSH, `-|h_i - h_j|^2` for
/// DSH, `h_i.h_j / 2` for DPSH.
pub fn supervised_pair_loss(kind: SupervisedKind, u: f64, s: u8, bits: usize) -> (f64, f64) {
    let s = f64::from(s);
    let b = bits as f64;
    match kind {
        SupervisedKind::Ksh => {
            let r = b * (2.0 * s - 1.0) - u;
            (r * r, -2.0 * r)
        }
        SupervisedKind::Dsh => {
            let hinge = 2.0 * b + u;
            let (h, dh) = if hinge > 0.0 { (hinge, 1.0) } else { (0.0, 0.0) };
            (-s * u + (1.0 - s) * h, -s + (1.0 - s) * dh)
        }
        SupervisedKind::Dpsh => {
            // log(1 + e^u) without overflow
            let softplus = u.max(0.0) + (-u.abs()).exp().ln_1p();
            let sigmoid = if u >= 0.0 {
                1.0 / (1.0 + (-u).exp())
            } else {
                let e = u.exp();
                e / (1.0 + e)
            };
            (-s * u + softplus, -s + sigmoid)
        }
    }
}

/// Kind-specific similarity of two real embeddings and its partials
/// `(u, du/da, du/db)`.
fn kind_similarity(kind: SupervisedKind, a: &[f64], b: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    match kind {
        SupervisedKind::Ksh => (dot(a, b), b.to_vec(), a.to_vec()),
        SupervisedKind::Dpsh => (
            0.5 * dot(a, b),
            b.iter().map(|v| 0.5 * v).collect(),
            a.iter().map(|v| 0.5 * v).collect(),
        ),
        SupervisedKind::Dsh => {
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            let u = -dot(&diff, &diff);
            (
                u,
                diff.iter().map(|d| -2.0 * d).collect(),
                diff.iter().map(|d| 2.0 * d).collect(),
            )
        }
    }
}

#[derive(Clone, Debug)]
pub struct SupervisedLoss {
    pub loss: f64,
    pub grad: Matrix,
    /// Set when there were no labeled pairs; loss and gradient are then zero.
    pub empty: bool,
}

/// Mean supervised pair loss over the labeled pairs, on real embeddings.
pub fn supervised_loss_relaxed(
    emb: &Matrix,
    sup: &PairSupervision,
    kind: SupervisedKind,
    bits: usize,
) -> Result<SupervisedLoss> {
    let mut grad = Matrix::zeros(emb.rows(), emb.cols());
    if sup.is_empty() {
        return Ok(SupervisedLoss {
            loss: 0.0,
            grad,
            empty: true,
        });
    }
    if let Some(r) = sup.max_row() {
        if r >= emb.rows() {
            return Err(shape_err(
                format!("pair rows < {}", emb.rows()),
                format!("row {r}"),
            ));
        }
    }
    let scale = 1.0 / sup.len() as f64;
    let mut total = 0.0;
    for &(i, j, s) in sup.pairs() {
        let (u, du_a, du_b) = kind_similarity(kind, emb.row(i), emb.row(j));
        let (l, dl) = supervised_pair_loss(kind, u, s, bits);
        total += l;
        let g = dl * scale;
        if g == 0.0 {
            continue;
        }
        for (gv, d) in grad.row_mut(i).iter_mut().zip(&du_a) {
            *gv += g * d;
        }
        for (gv, d) in grad.row_mut(j).iter_mut().zip(&du_b) {
            *gv += g * d;
        }
    }
    Ok(SupervisedLoss {
        loss: total * scale,
        grad,
        empty: false,
    })
}

/// `(u - u_T)^2` and its derivative in `u`; `u_T` is a fixed target.
pub fn consistency_loss(u: f64, u_t: f64) -> (f64, f64) {
    let d = u - u_t;
    (d * d, 2.0 * d)
}

/// Threshold such that `round(rho * N)` of `sims` are `>= thr` when the
/// values are distinct. `rho = 0` yields `+inf`.
pub fn threshold_select(sims: &[f64], rho: f64) -> Result<f64> {
    if sims.is_empty() {
        return Err(Error::InvalidParameter(
            "threshold selection needs at least one similarity".into(),
        ));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidParameter(format!(
            "rho must lie in [0, 1], got {rho}"
        )));
    }
    let k = (rho * sims.len() as f64).round() as usize;
    if k == 0 {
        return Ok(f64::INFINITY);
    }
    let mut sorted = sims.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted[k - 1])
}

/// Binary pseudo-similarity matrix, row-major `[m x m]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoMatrix {
    size: usize,
    bits: Vec<u8>,
}

impl PseudoMatrix {
    pub fn size(&self) -> usize {
        self.size
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.bits[i * self.size + j]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.size).all(|i| (0..i).all(|j| self.get(i, j) == self.get(j, i)))
    }
}

/// `W_ij = 1` iff `u_T[i][j] >= thr`.
pub fn pseudo_similarity(teacher_sims: &Matrix, thr: f64) -> PseudoMatrix {
    PseudoMatrix {
        size: teacher_sims.rows(),
        bits: teacher_sims
            .as_slice()
            .iter()
            .map(|&u| u8::from(u >= thr))
            .collect(),
    }
}

/// Marks exactly `round(rho * m^2)` ordered pairs as pseudo-similar.
///
/// Pairs are ranked by teacher similarity, descending, with ties broken by
/// row-major position. When no tie straddles the cut this is identical to
/// `pseudo_similarity(u_T, threshold_select(u_T, rho))`. The returned
/// threshold is the similarity of the last selected pair.
pub fn select_pseudo_pairs(teacher_sims: &Matrix, rho: f64) -> Result<(PseudoMatrix, f64)> {
    let vals = teacher_sims.as_slice();
    if vals.is_empty() {
        return Err(Error::InvalidParameter("empty similarity matrix".into()));
    }
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidParameter(format!(
            "rho must lie in [0, 1], got {rho}"
        )));
    }
    let k = (rho * vals.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let mut bits = vec![0u8; vals.len()];
    for &idx in &order[..k] {
        bits[idx] = 1;
    }
    let thr = if k == 0 {
        f64::INFINITY
    } else {
        vals[order[k - 1]]
    };
    Ok((
        PseudoMatrix {
            size: teacher_sims.rows(),
            bits,
        },
        thr,
    ))
}

/// Normalized-range hinge on a pseudo label.
pub fn quantized_pair_loss(u_rel: f64, w: u8, margin: f64) -> Result<(f64, f64)> {
    if !(margin > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "margin must be > 0, got {margin}"
        )));
    }
    let w = f64::from(w);
    let hinge = margin + u_rel;
    let (h, dh) = if hinge > 0.0 { (hinge, 1.0) } else { (0.0, 0.0) };
    Ok((-w * u_rel + (1.0 - w) * h, -w + (1.0 - w) * dh))
}

fn quantized_term(form: QuantizedForm, kind: SupervisedKind, bits: usize, u: f64, w: u8) -> (f64, f64) {
    match form {
        QuantizedForm::NormalizedHinge { margin } => {
            quantized_pair_loss(u, w, margin).expect("margin validated")
        }
        QuantizedForm::Verbatim => supervised_pair_loss(kind, u, w, bits),
    }
}

/// Mean over rows of `sum_k | |F_k| - 1 |`, the L1 distance to `sgn(F)`.
pub fn quantization_penalty(emb: &Matrix) -> (f64, Matrix) {
    let mut grad = Matrix::zeros(emb.rows(), emb.cols());
    if emb.rows() == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / emb.rows() as f64;
    let mut total = 0.0;
    for r in 0..emb.rows() {
        let mut row_sum = 0.0;
        for (k, &f) in emb.row(r).iter().enumerate() {
            let h = if f >= 0.0 { 1.0 } else { -1.0 };
            let dev = f.abs() - 1.0;
            row_sum += dev.abs();
            let g = if dev > 0.0 {
                h
            } else if dev < 0.0 {
                -h
            } else {
                0.0
            };
            grad.set(r, k, g * scale);
        }
        total += row_sum;
    }
    (total * scale, grad)
}

/// Teacher-side state of one mini-batch.
#[derive(Clone, Debug)]
pub struct BatchPairState {
    pub teacher_sims: Matrix,
    pub pseudo: PseudoMatrix,
    pub thr: f64,
}

impl BatchPairState {
    pub fn new(teacher_sims: Matrix, pseudo: PseudoMatrix, thr: f64) -> Result<Self> {
        if teacher_sims.rows() != teacher_sims.cols() || pseudo.size() != teacher_sims.rows() {
            return Err(shape_err(
                "square similarity and pseudo matrices of equal size",
                format!("{:?} / {}", teacher_sims.shape(), pseudo.size()),
            ));
        }
        Ok(Self {
            teacher_sims,
            pseudo,
            thr,
        })
    }

    /// Similarities of the teacher embeddings plus exact-count pseudo pairs.
    pub fn from_teacher(teacher_emb: &Matrix, rho: f64) -> Result<Self> {
        let sims = NormalizedRows::new(teacher_emb).similarities();
        let (pseudo, thr) = select_pseudo_pairs(&sims, rho)?;
        Self::new(sims, pseudo, thr)
    }

    pub fn size(&self) -> usize {
        self.teacher_sims.rows()
    }

    pub fn pseudo_fraction(&self) -> f64 {
        let m = self.size();
        self.pseudo.count_ones() as f64 / (m * m) as f64
    }
}

/// Per-term values of one evaluation of the objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    /// Mean consistent similarity loss over ordered batch pairs.
    pub consistency: f64,
    /// Mean quantized similarity loss over ordered batch pairs.
    pub quantized: f64,
    /// `consistency + gamma * quantized` (or just the quantized part when the
    /// consistency term is disabled).
    pub unsupervised: f64,
    pub quantization: f64,
    pub total: f64,
    pub empty_supervision: bool,
    pub degenerate_norms: usize,
}

#[derive(Clone, Debug)]
pub struct TotalLoss {
    pub loss: f64,
    pub grad: Matrix,
    pub breakdown: LossBreakdown,
}

/// `L_s + omega_t * R_u + eta * Q` and its gradient in the student embeddings.
///
/// The unsupervised part is skipped entirely when `omega_t == 0`, so the
/// result then matches the supervised-only objective bit for bit. `state` is
/// required otherwise.
pub fn total_loss(
    state: Option<&BatchPairState>,
    emb: &Matrix,
    sup: &PairSupervision,
    hp: &Hyperparams,
    omega_t: f64,
) -> Result<TotalLoss> {
    if emb.cols() != hp.code_bits {
        return Err(shape_err(
            format!("{} embedding columns", hp.code_bits),
            emb.cols(),
        ));
    }
    let sl = supervised_loss_relaxed(emb, sup, hp.kind, hp.code_bits)?;
    let mut breakdown = LossBreakdown {
        supervised: sl.loss,
        empty_supervision: sl.empty,
        ..Default::default()
    };
    let mut grad = sl.grad;
    let mut total = sl.loss;

    if omega_t != 0.0 {
        let state = state.ok_or_else(|| {
            Error::InvalidParameter("unsupervised weight is nonzero but no teacher state".into())
        })?;
        let m = emb.rows();
        if state.size() != m {
            return Err(shape_err(format!("teacher state of size {m}"), state.size()));
        }
        let norm = NormalizedRows::new(emb);
        breakdown.degenerate_norms = norm.degenerate;
        let sims = norm.similarities();
        let inv = 1.0 / (m * m) as f64;
        let cw = if hp.consistency { 1.0 } else { 0.0 };
        let mut cons = 0.0;
        let mut quant = 0.0;
        let mut g_sims = Matrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                let u = sims.get(i, j);
                let (lc, dc) = consistency_loss(u, state.teacher_sims.get(i, j));
                let (lq, dq) = quantized_term(
                    hp.quantized_form,
                    hp.kind,
                    hp.code_bits,
                    u,
                    state.pseudo.get(i, j),
                );
                cons += lc;
                quant += lq;
                g_sims.set(i, j, omega_t * inv * (cw * dc + hp.gamma * dq));
            }
        }
        breakdown.consistency = cons * inv;
        breakdown.quantized = quant * inv;
        breakdown.unsupervised = cw * breakdown.consistency + hp.gamma * breakdown.quantized;
        total += omega_t * breakdown.unsupervised;
        let g_emb = norm.backprop_similarities(&g_sims);
        for (g, v) in grad.as_mut_slice().iter_mut().zip(g_emb.as_slice()) {
            *g += v;
        }
    }

    if hp.eta != 0.0 {
        let (q, gq) = quantization_penalty(emb);
        breakdown.quantization = q;
        total += hp.eta * q;
        for (g, v) in grad.as_mut_slice().iter_mut().zip(gq.as_slice()) {
            *g += hp.eta * v;
        }
    }
    breakdown.total = total;
    Ok(TotalLoss {
        loss: total,
        grad,
        breakdown,
    })
}
