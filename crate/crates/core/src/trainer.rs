//! Mini-batch teacher-student training.
//!
//! Each iteration: sample a batch (labeled rows first), draw two perturbed
//! views, run the student on view one and the teacher on view two, pick the
//! pseudo-similar pairs from the teacher similarities, evaluate the objective,
//! backpropagate, take a momentum step on the student, then move the teacher
//! by EMA. The unsupervised weight and the learning rate share one ramp-up.
//!
//! Every source of randomness has its own ChaCha stream derived from the run
//! seed, so a supervised-only run sees exactly the same labeled batches and
//! labeled-row noise as the semi-supervised run it is compared with.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::TrainView;
use crate::encoder::{
    self, backward, ema_update, forward, init_params, sgd_momentum_step, Architecture,
    EncoderParams, OptimizerState,
};
use crate::error::{Error, Result};
use crate::losses::{total_loss, BatchPairState, Hyperparams, LossBreakdown, PairSupervision};
use crate::matrix::Matrix;
use crate::retrieval::{evaluate, pack, CodeSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub labeled_per_batch: usize,
    pub rampup_epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Learning-rate multiplier of every layer below the output layer.
    pub lower_layer_scale: f64,
    pub hidden: Vec<usize>,
    /// Perturbation std as a fraction of each feature's training std.
    pub sigma: f64,
    pub validation_fraction: f64,
    pub seed: u64,
    pub hp: Hyperparams,
}

impl TrainConfig {
    pub fn new(hp: Hyperparams) -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            labeled_per_batch: 16,
            rampup_epochs: 15,
            lr: 0.01,
            momentum: 0.9,
            lower_layer_scale: 0.1,
            hidden: vec![64, 64],
            sigma: 0.1,
            validation_fraction: 0.1,
            seed: 0,
            hp,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be >= 1".into()));
        }
        if self.labeled_per_batch == 0 || self.labeled_per_batch > self.batch_size {
            return Err(Error::InvalidParameter(format!(
                "labeled per batch must lie in 1..={}, got {}",
                self.batch_size, self.labeled_per_batch
            )));
        }
        if self.rampup_epochs > self.epochs {
            return Err(Error::InvalidParameter(format!(
                "ramp-up ({}) longer than training ({})",
                self.rampup_epochs, self.epochs
            )));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {}", self.sigma)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("lr must be >= 0, got {}", self.lr)));
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture::new(input_dim, self.hidden.clone(), self.hp.code_bits)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub epoch: usize,
    pub iteration: usize,
    pub thr: f64,
    pub pseudo_pairs: usize,
    pub batch_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Per-term means over the epoch's iterations.
    pub loss: LossBreakdown,
    pub omega: f64,
    pub lr: f64,
    pub mean_thr: f64,
    pub pseudo_fraction: f64,
    pub validation_map: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub iterations: Vec<IterationRecord>,
}

impl TrainLog {
    /// One JSON object per epoch.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub student: EncoderParams,
    /// `None` for supervised-only runs.
    pub teacher: Option<EncoderParams>,
    pub optimizer: OptimizerState,
    pub log: TrainLog,
}

/// `omega_max * exp(-5 (1 - t/T_r)^2)` before `T_r`, `omega_max` after.
pub fn rampup_weight(t: usize, rampup: usize, omega_max: f64) -> f64 {
    if rampup == 0 || t >= rampup {
        return omega_max;
    }
    let p = 1.0 - t as f64 / rampup as f64;
    omega_max * (-5.0 * p * p).exp()
}

/// Independent ChaCha stream `tag` of the run seeded by `seed`.
pub(crate) fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tag);
    rng
}

const STREAM_INIT: u64 = 1;
const STREAM_LABELED: u64 = 2;
const STREAM_UNLABELED: u64 = 3;
const STREAM_NOISE_LABELED: u64 = 4;
const STREAM_NOISE_UNLABELED: u64 = 5;
const STREAM_NOISE_TEACHER: u64 = 6;

/// Adds `N(0, sigma_k^2)` noise to column `k` of every row.
pub fn add_noise(batch: &Matrix, sigma: &[f64], rng: &mut ChaCha8Rng) -> Matrix {
    assert_eq!(sigma.len(), batch.cols(), "one sigma per feature");
    let mut out = batch.clone();
    for r in 0..out.rows() {
        for (v, &s) in out.row_mut(r).iter_mut().zip(sigma) {
            let z: f64 = StandardNormal.sample(rng);
            *v += s * z;
        }
    }
    out
}

/// Two independently perturbed views of `batch`.
pub fn perturb(batch: &Matrix, sigma: &[f64], rng: &mut ChaCha8Rng) -> Result<(Matrix, Matrix)> {
    if sigma.len() != batch.cols() {
        return Err(crate::error::shape_err(batch.cols(), sigma.len()));
    }
    if sigma.iter().any(|&s| !(s >= 0.0)) {
        return Err(Error::InvalidParameter("perturbation std must be >= 0".into()));
    }
    let a = add_noise(batch, sigma, rng);
    let b = add_noise(batch, sigma, rng);
    Ok((a, b))
}

/// Reshuffled pass over `0..n`; a draw never straddles two passes, so items
/// within one draw are distinct.
#[derive(Clone, Debug)]
struct Stream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Stream {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        if self.pos + k > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + k].to_vec();
        self.pos += k;
        out
    }
}

/// One mini-batch in view-local indices. Batch row `r < labeled.len()` is
/// labeled item `labeled[r]`; later rows are unlabeled items.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub supervision: PairSupervision,
}

impl MiniBatch {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws `m_l` labeled and `m - m_l` unlabeled items per batch, without
/// replacement inside a batch. Labeled pairs are all ordered pairs among the
/// labeled rows.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    labeled: Stream,
    unlabeled: Stream,
    n_labeled: usize,
    n_unlabeled: usize,
}

impl BatchSampler {
    pub fn new(view: &TrainView<'_>, batch_size: usize, labeled_per_batch: usize, seed: u64) -> Result<Self> {
        let n_unlab = batch_size - labeled_per_batch;
        if view.num_labeled() < labeled_per_batch {
            return Err(Error::InsufficientSamples(format!(
                "{} labeled items for {} labeled rows per batch",
                view.num_labeled(),
                labeled_per_batch
            )));
        }
        if view.num_unlabeled() < n_unlab {
            return Err(Error::InsufficientSamples(format!(
                "{} unlabeled items for {} unlabeled rows per batch",
                view.num_unlabeled(),
                n_unlab
            )));
        }
        Ok(Self {
            labeled: Stream::new(view.num_labeled(), stream(seed, STREAM_LABELED)),
            unlabeled: Stream::new(view.num_unlabeled(), stream(seed, STREAM_UNLABELED)),
            n_labeled: labeled_per_batch,
            n_unlabeled: n_unlab,
        })
    }

    pub fn next_batch(&mut self, view: &TrainView<'_>, with_unlabeled: bool) -> MiniBatch {
        let labeled = self.labeled.take(self.n_labeled);
        let unlabeled = if with_unlabeled && self.n_unlabeled > 0 {
            self.unlabeled.take(self.n_unlabeled)
        } else {
            Vec::new()
        };
        let labels: Vec<u32> = labeled.iter().map(|&k| view.labeled(k).1).collect();
        let rows: Vec<usize> = (0..labeled.len()).collect();
        MiniBatch {
            supervision: PairSupervision::from_labels(&rows, &labels),
            labeled,
            unlabeled,
        }
    }
}

fn gather(view: &TrainView<'_>, batch: &MiniBatch) -> (Matrix, Matrix) {
    let d = view.dim();
    let mut lab = Matrix::zeros(batch.labeled.len(), d);
    for (r, &k) in batch.labeled.iter().enumerate() {
        lab.row_mut(r).copy_from_slice(view.labeled(k).0);
    }
    let mut unl = Matrix::zeros(batch.unlabeled.len(), d);
    for (r, &k) in batch.unlabeled.iter().enumerate() {
        unl.row_mut(r).copy_from_slice(view.unlabeled(k));
    }
    (lab, unl)
}

fn vstack(a: &Matrix, b: &Matrix) -> Matrix {
    let mut data = a.as_slice().to_vec();
    data.extend_from_slice(b.as_slice());
    Matrix::from_vec(a.rows() + b.rows(), a.cols().max(b.cols()), data)
}

/// Iterations per epoch: enough for one pass over whichever pool is larger
/// relative to its share of the batch.
pub fn iterations_per_epoch(view: &TrainView<'_>, cfg: &TrainConfig) -> usize {
    let lab = view.num_labeled().div_ceil(cfg.labeled_per_batch);
    let unl_rows = cfg.batch_size - cfg.labeled_per_batch;
    let unl = if unl_rows == 0 {
        0
    } else {
        view.num_unlabeled().div_ceil(unl_rows)
    };
    lab.max(unl).max(1)
}

/// MAP of validation items retrieved from the labeled training items.
pub fn validation_map(params: &EncoderParams, view: &TrainView<'_>) -> Result<f64> {
    if view.num_validation() == 0 {
        return Ok(0.0);
    }
    let bits = params.arch.code_bits;
    let q = pack(&encoder::encode(params, &view.validation_features())?, bits)?
        .with_labels(view.validation_labels().to_vec())?;
    let db: CodeSet = pack(&encoder::encode(params, &view.labeled_features())?, bits)?
        .with_labels(view.labeled_labels().to_vec())?;
    Ok(evaluate(&q, &db, db.len().max(1), &[])?.map_at_k)
}

#[derive(Default)]
struct EpochAccumulator {
    sum: LossBreakdown,
    thr_sum: f64,
    thr_count: usize,
    pseudo: usize,
    pairs: usize,
    iters: usize,
}

impl EpochAccumulator {
    fn add(&mut self, b: &LossBreakdown) {
        self.sum.supervised += b.supervised;
        self.sum.consistency += b.consistency;
        self.sum.quantized += b.quantized;
        self.sum.unsupervised += b.unsupervised;
        self.sum.quantization += b.quantization;
        self.sum.total += b.total;
        self.sum.empty_supervision |= b.empty_supervision;
        self.sum.degenerate_norms += b.degenerate_norms;
        self.iters += 1;
    }

    fn finish(self, epoch: usize, omega: f64, lr: f64, validation_map: f64) -> EpochRecord {
        let n = self.iters.max(1) as f64;
        let s = self.sum;
        EpochRecord {
            epoch,
            loss: LossBreakdown {
                supervised: s.supervised / n,
                consistency: s.consistency / n,
                quantized: s.quantized / n,
                unsupervised: s.unsupervised / n,
                quantization: s.quantization / n,
                total: s.total / n,
                empty_supervision: s.empty_supervision,
                degenerate_norms: s.degenerate_norms,
            },
            omega,
            lr,
            mean_thr: if self.thr_count == 0 {
                f64::NAN
            } else {
                self.thr_sum / self.thr_count as f64
            },
            pseudo_fraction: if self.pairs == 0 {
                0.0
            } else {
                self.pseudo as f64 / self.pairs as f64
            },
            validation_map,
        }
    }
}

fn diverged(epoch: usize, iteration: usize, omega: f64, lr: f64, detail: impl Into<String>) -> Error {
    Error::Diverged {
        epoch,
        iteration,
        omega,
        lr,
        detail: detail.into(),
    }
}

struct Setup {
    student: EncoderParams,
    optimizer: OptimizerState,
    sampler: BatchSampler,
    sigma: Vec<f64>,
    iters: usize,
}

fn setup(view: &TrainView<'_>, cfg: &TrainConfig) -> Result<Setup> {
    cfg.validate()?;
    let arch = cfg.architecture(view.dim());
    let student = init_params(stream_seed(cfg.seed, STREAM_INIT), &arch)?;
    let optimizer = OptimizerState::new(&student, cfg.lr, cfg.momentum)
        .with_lower_layer_scale(cfg.lower_layer_scale);
    let sampler = BatchSampler::new(view, cfg.batch_size, cfg.labeled_per_batch, cfg.seed)?;
    let sigma = view.feature_std().into_iter().map(|s| s * cfg.sigma).collect();
    Ok(Setup {
        student,
        optimizer,
        sampler,
        sigma,
        iters: iterations_per_epoch(view, cfg),
    })
}

fn stream_seed(seed: u64, tag: u64) -> u64 {
    use rand::RngCore;
    stream(seed, tag).next_u64()
}

/// Semi-supervised teacher-student training.
pub fn train(view: &TrainView<'_>, cfg: &TrainConfig) -> Result<TrainOutput> {
    let Setup {
        mut student,
        mut optimizer,
        mut sampler,
        sigma,
        iters,
    } = setup(view, cfg)?;
    let hp = &cfg.hp;
    let rho = hp.rho.unwrap_or_else(|| view.similar_pair_fraction());
    let mut teacher = student.clone();
    let mut noise_lab = stream(cfg.seed, STREAM_NOISE_LABELED);
    let mut noise_unl = stream(cfg.seed, STREAM_NOISE_UNLABELED);
    let mut noise_teacher = stream(cfg.seed, STREAM_NOISE_TEACHER);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let omega_t = rampup_weight(epoch, cfg.rampup_epochs, hp.omega);
        let lr_t = rampup_weight(epoch, cfg.rampup_epochs, cfg.lr);
        optimizer.lr = lr_t;
        let mut acc = EpochAccumulator::default();
        for it in 0..iters {
            let batch = sampler.next_batch(view, true);
            let (lab, unl) = gather(view, &batch);
            let student_view = vstack(
                &add_noise(&lab, &sigma, &mut noise_lab),
                &add_noise(&unl, &sigma, &mut noise_unl),
            );
            let teacher_view = add_noise(&vstack(&lab, &unl), &sigma, &mut noise_teacher);

            let trace = forward(&student, &student_view)?;
            let teacher_emb = encoder::embed(&teacher, &teacher_view)?;
            let state = BatchPairState::from_teacher(&teacher_emb, rho)?;

            let tl = total_loss(Some(&state), trace.embeddings(), &batch.supervision, hp, omega_t)?;
            if !tl.loss.is_finite() {
                return Err(diverged(epoch, it, omega_t, lr_t, format!("loss {}", tl.loss)));
            }
            let grads = backward(&trace, &student, &tl.grad)?;
            sgd_momentum_step(&mut student, &grads, &mut optimizer).map_err(|e| {
                diverged(epoch, it, omega_t, lr_t, e.to_string())
            })?;
            ema_update(&mut teacher, &student, hp.alpha)?;

            let m = batch.len();
            let pseudo = state.pseudo.count_ones();
            acc.add(&tl.breakdown);
            if state.thr.is_finite() {
                acc.thr_sum += state.thr;
                acc.thr_count += 1;
            }
            acc.pseudo += pseudo;
            acc.pairs += m * m;
            log.iterations.push(IterationRecord {
                epoch,
                iteration: it,
                thr: state.thr,
                pseudo_pairs: pseudo,
                batch_pairs: m * m,
            });
        }
        let vmap = validation_map(&teacher, view)?;
        log.epochs.push(acc.finish(epoch, omega_t, lr_t, vmap));
    }
    Ok(TrainOutput {
        student,
        teacher: Some(teacher),
        optimizer,
        log,
    })
}

/// Supervised-only training on the labeled rows of each batch.
///
/// Uses the same batch schedule, labeled-row noise and learning-rate ramp as
/// [`train`]; the unsupervised weight is ignored and no teacher is kept.
pub fn train_supervised(view: &TrainView<'_>, cfg: &TrainConfig) -> Result<TrainOutput> {
    let Setup {
        mut student,
        mut optimizer,
        mut sampler,
        sigma,
        iters,
    } = setup(view, cfg)?;
    let hp = &cfg.hp;
    let mut noise_lab = stream(cfg.seed, STREAM_NOISE_LABELED);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let lr_t = rampup_weight(epoch, cfg.rampup_epochs, cfg.lr);
        optimizer.lr = lr_t;
        let mut acc = EpochAccumulator::default();
        for it in 0..iters {
            let batch = sampler.next_batch(view, false);
            let (lab, _) = gather(view, &batch);
            let x = add_noise(&lab, &sigma, &mut noise_lab);
            let trace = forward(&student, &x)?;
            let tl = total_loss(None, trace.embeddings(), &batch.supervision, hp, 0.0)?;
            if !tl.loss.is_finite() {
                return Err(diverged(epoch, it, 0.0, lr_t, format!("loss {}", tl.loss)));
            }
            let grads = backward(&trace, &student, &tl.grad)?;
            sgd_momentum_step(&mut student, &grads, &mut optimizer)
                .map_err(|e| diverged(epoch, it, 0.0, lr_t, e.to_string()))?;
            acc.add(&tl.breakdown);
        }
        let vmap = validation_map(&student, view)?;
        log.epochs.push(acc.finish(epoch, 0.0, lr_t, vmap));
    }
    Ok(TrainOutput {
        student,
        teacher: None,
        optimizer,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_blobs, split, BlobParams, Dataset};
    use crate::losses::SupervisedKind;

    fn tiny_dataset() -> Dataset {
        let ds = generate_blobs(&BlobParams {
            classes: 3,
            per_class: 40,
            dim: 6,
            spread: 0.2,
            seed: 4,
        })
        .unwrap();
        split(&ds, 0.3, 5, 1).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::new(Hyperparams::for_kind(SupervisedKind::Dsh, 8));
        cfg.epochs = 3;
        cfg.rampup_epochs = 1;
        cfg.batch_size = 16;
        cfg.labeled_per_batch = 4;
        cfg.hidden = vec![10];
        cfg
    }

    #[test]
    fn rampup_examples() {
        assert_eq!(rampup_weight(10, 10, 2.0), 2.0);
        assert_eq!(rampup_weight(25, 10, 2.0), 2.0);
        assert!((rampup_weight(0, 10, 1.0) - 0.006_737_946_999_085_467).abs() < 1e-15);
        assert!((rampup_weight(5, 10, 1.0) - 0.286_504_796_860_190_1).abs() < 1e-15);
        assert_eq!(rampup_weight(0, 0, 0.7), 0.7);
    }

    #[test]
    fn batch_composition_and_pair_ratio() {
        let ds = tiny_dataset();
        let view = ds.train_view(0.0, 0).unwrap();
        let mut s = BatchSampler::new(&view, 16, 4, 9).unwrap();
        let b = s.next_batch(&view, true);
        assert_eq!(b.labeled.len(), 4);
        assert_eq!(b.unlabeled.len(), 12);
        assert_eq!(b.supervision.len(), 16);
        let mut l = b.labeled.clone();
        l.sort_unstable();
        l.dedup();
        assert_eq!(l.len(), 4);
        // 64 rows with 16 labeled: 256 labeled pairs vs 3840 others, ratio 15
        assert_eq!((64 * 64 - 16 * 16) / (16 * 16), 15);
    }

    #[test]
    fn sampler_is_deterministic() {
        let ds = tiny_dataset();
        let view = ds.train_view(0.0, 0).unwrap();
        let mut a = BatchSampler::new(&view, 16, 4, 3).unwrap();
        let mut b = BatchSampler::new(&view, 16, 4, 3).unwrap();
        for _ in 0..20 {
            assert_eq!(a.next_batch(&view, true), b.next_batch(&view, true));
        }
    }

    #[test]
    fn sampler_rejects_small_pools() {
        let ds = tiny_dataset();
        let view = ds.train_view(0.0, 0).unwrap();
        assert!(BatchSampler::new(&view, 1000, 4, 0).is_err());
        assert!(BatchSampler::new(&view, 1000, 999, 0).is_err());
    }

    #[test]
    fn zero_sigma_gives_identical_views() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let (a, b) = perturb(&x, &[0.0, 0.0], &mut stream(1, 0)).unwrap();
        assert_eq!(a, x);
        assert_eq!(b, x);
    }

    #[test]
    fn perturbation_is_reproducible_and_distinct() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let s = [0.5; 3];
        let (a1, b1) = perturb(&x, &s, &mut stream(7, 0)).unwrap();
        let (a2, b2) = perturb(&x, &s, &mut stream(7, 0)).unwrap();
        assert_eq!((&a1, &b1), (&a2, &b2));
        assert_ne!(a1, b1);
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_dataset();
        let view = ds.train_view(0.1, 0).unwrap();
        let cfg = tiny_config();
        let a = train(&view, &cfg).unwrap();
        let b = train(&view, &cfg).unwrap();
        assert_eq!(a.log, b.log);
        assert_eq!(a.student, b.student);
        assert_eq!(a.teacher, b.teacher);
    }

    #[test]
    fn frozen_teacher_with_unit_decay() {
        let ds = tiny_dataset();
        let view = ds.train_view(0.1, 0).unwrap();
        let mut cfg = tiny_config();
        cfg.hp.alpha = 1.0;
        let out = train(&view, &cfg).unwrap();
        let init = init_params(stream_seed(cfg.seed, STREAM_INIT), &cfg.architecture(view.dim()))
            .unwrap();
        assert_eq!(out.teacher.unwrap(), init);
        assert_ne!(out.student, init);
    }

    #[test]
    fn one_record_per_epoch() {
        let ds = tiny_dataset();
        let view = ds.train_view(0.1, 0).unwrap();
        let cfg = tiny_config();
        let out = train(&view, &cfg).unwrap();
        assert_eq!(out.log.epochs.len(), cfg.epochs);
        assert!(out.log.epochs.windows(2).all(|w| w[0].epoch < w[1].epoch));
        assert_eq!(
            out.log.iterations.len(),
            cfg.epochs * iterations_per_epoch(&view, &cfg)
        );
        assert_eq!(out.log.to_json_lines().unwrap().lines().count(), cfg.epochs);
    }

    #[test]
    fn reduces_to_supervised_when_unweighted() {
        let ds = tiny_dataset();
        let view = ds.train_view(0.1, 0).unwrap();
        let mut cfg = tiny_config();
        cfg.hp.omega = 0.0;
        cfg.hp.eta = 0.0;
        cfg.hp.alpha = 0.3;
        let semi = train(&view, &cfg).unwrap();
        let sup = train_supervised(&view, &cfg).unwrap();
        assert_eq!(semi.student, sup.student);
        for (a, b) in semi.log.epochs.iter().zip(&sup.log.epochs) {
            assert_eq!(a.loss.total.to_bits(), b.loss.total.to_bits());
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let ds = tiny_dataset();
        let view = ds.train_view(0.1, 0).unwrap();
        let mut cfg = tiny_config();
        cfg.labeled_per_batch = 0;
        assert!(train(&view, &cfg).is_err());
        let mut cfg = tiny_config();
        cfg.rampup_epochs = 10;
        assert!(train(&view, &cfg).is_err());
    }
}
