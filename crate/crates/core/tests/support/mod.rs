//! Independent oracles shared by the integration tests and the acceptance
//! target. Nothing here calls the code under test to produce an expected value.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tshash_core::encoder::{backward, embed, forward, init_params, Architecture, EncoderParams};
use tshash_core::losses::{
    total_loss, BatchPairState, Hyperparams, PairSupervision, QuantizedForm, SupervisedKind,
};
use tshash_core::Matrix;

/// Metrics computed the slow way on unpacked ±1 codes.
#[derive(Debug, PartialEq)]
pub struct NaiveMetrics {
    pub map: f64,
    pub prec2: f64,
    pub topk: Vec<(usize, f64)>,
}

pub fn naive_hamming(a: &[i8], b: &[i8]) -> u32 {
    a.iter().zip(b).filter(|(x, y)| x != y).count() as u32
}

/// Straightforward retrieval evaluation: sort by (distance, index), walk the
/// ranking, no bit tricks.
pub fn naive_evaluate(
    q: &[Vec<i8>],
    ql: &[u32],
    db: &[Vec<i8>],
    dl: &[u32],
    k: usize,
    cuts: &[usize],
) -> NaiveMetrics {
    let mut ap_sum = 0.0;
    let mut p2_sum = 0.0;
    let mut topk_sum = vec![0.0; cuts.len()];
    for (qi, code) in q.iter().enumerate() {
        let mut items: Vec<(u32, usize)> =
            db.iter().enumerate().map(|(i, c)| (naive_hamming(code, c), i)).collect();
        items.sort();
        let rel: Vec<bool> = items.iter().map(|&(_, i)| dl[i] == ql[qi]).collect();
        let r_total = rel.iter().filter(|&&r| r).count();
        let mut ap = 0.0;
        if r_total > 0 {
            let mut hits = 0;
            for rank in 0..k.min(rel.len()) {
                if rel[rank] {
                    hits += 1;
                    ap += hits as f64 / (rank + 1) as f64;
                }
            }
            ap /= r_total.min(k) as f64;
        }
        ap_sum += ap;
        let ball: Vec<bool> = items
            .iter()
            .filter(|&&(d, _)| d <= 2)
            .map(|&(_, i)| dl[i] == ql[qi])
            .collect();
        if !ball.is_empty() {
            p2_sum += ball.iter().filter(|&&r| r).count() as f64 / ball.len() as f64;
        }
        for (s, &c) in cuts.iter().enumerate() {
            let hits = rel.iter().take(c).filter(|&&r| r).count();
            topk_sum[s] += hits as f64 / c as f64;
        }
    }
    let n = q.len() as f64;
    NaiveMetrics {
        map: ap_sum / n,
        prec2: p2_sum / n,
        topk: cuts.iter().zip(topk_sum).map(|(&c, s)| (c, s / n)).collect(),
    }
}

pub fn random_codes(rng: &mut ChaCha8Rng, n: usize, bits: usize) -> Vec<Vec<i8>> {
    (0..n)
        .map(|_| (0..bits).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect())
        .collect()
}

/// Teacher EMA written as the explicit geometric sum.
pub fn ema_closed_form(theta0: f64, students: &[f64], alpha: f64) -> f64 {
    let t = students.len() as i32;
    let mut acc = alpha.powi(t) * theta0;
    for (k, &th) in students.iter().enumerate() {
        acc += (1.0 - alpha) * alpha.powi(t - 1 - k as i32) * th;
    }
    acc
}

/// Euclidean 1-nearest-neighbour accuracy: odd indices classified against
/// even indices.
pub fn one_nn_accuracy(x: &Matrix, labels: &[u32]) -> f64 {
    let train: Vec<usize> = (0..x.rows()).step_by(2).collect();
    let test: Vec<usize> = (1..x.rows()).step_by(2).collect();
    let mut correct = 0;
    for &i in &test {
        let mut best = (f64::INFINITY, 0);
        for &j in &train {
            let d: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, j);
            }
        }
        if labels[best.1] == labels[i] {
            correct += 1;
        }
    }
    correct as f64 / test.len() as f64
}

/// One random gradient-check problem.
pub struct GradProblem {
    pub params: EncoderParams,
    pub x: Matrix,
    pub sup: PairSupervision,
    pub state: BatchPairState,
    pub hp: Hyperparams,
    pub omega: f64,
    pub labels: Vec<u32>,
}

/// Distance to the nearest kink of any piecewise term at the current point.
fn kink_margin(p: &GradProblem) -> f64 {
    let trace = forward(&p.params, &p.x).unwrap();
    let mut margin = f64::INFINITY;
    let depth = p.params.layers.len();
    for z in trace.pre_activations.iter().take(depth - 1) {
        for v in z.as_slice() {
            margin = margin.min(v.abs());
        }
    }
    let emb = trace.activations.last().unwrap();
    if p.hp.eta != 0.0 {
        for v in emb.as_slice() {
            margin = margin.min(v.abs()).min((v.abs() - 1.0).abs());
        }
    }
    let b = p.hp.code_bits as f64;
    if p.hp.kind == SupervisedKind::Dsh {
        for &(i, j, _) in p.sup.pairs() {
            let d: f64 = emb.row(i).iter().zip(emb.row(j)).map(|(a, c)| (a - c) * (a - c)).sum();
            margin = margin.min((2.0 * b - d).abs());
        }
    }
    // hinge of the unsupervised term at u = -4 (normalized) or the kind's own corner
    let m = emb.rows();
    for i in 0..m {
        for j in 0..m {
            let si = unit(emb.row(i));
            let sj = unit(emb.row(j));
            let u: f64 = -si.iter().zip(&sj).map(|(a, c)| (a - c) * (a - c)).sum::<f64>();
            margin = margin.min((4.0 + u).abs());
            if p.hp.kind == SupervisedKind::Dsh {
                margin = margin.min((2.0 * b + u).abs());
            }
        }
    }
    margin
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    v.iter().map(|x| x / n).collect()
}

/// Draws a problem whose every kink is at least `min_margin` away.
pub fn sample_grad_problem(rng: &mut ChaCha8Rng, min_margin: f64) -> GradProblem {
    loop {
        let m = if rng.random_bool(0.5) { 4 } else { 8 };
        let b = [4, 8, 16][rng.random_range(0..3)];
        let kind = [SupervisedKind::Ksh, SupervisedKind::Dsh, SupervisedKind::Dpsh][rng.random_range(0..3)];
        let d = rng.random_range(3..7);
        let hidden = vec![rng.random_range(4..9), rng.random_range(4..9)];
        let arch = Architecture::new(d, hidden, b);
        let params = init_params(rng.random(), &arch).unwrap();
        let teacher = init_params(rng.random(), &arch).unwrap();
        let x = Matrix::from_vec(m, d, (0..m * d).map(|_| rng.random_range(-2.0..2.0)).collect());
        let xt = Matrix::from_vec(m, d, (0..m * d).map(|_| rng.random_range(-2.0..2.0)).collect());
        let m_l = m / 2;
        let labels: Vec<u32> = (0..m_l).map(|_| rng.random_range(0..2)).collect();
        let rows: Vec<usize> = (0..m_l).collect();
        let sup = PairSupervision::from_labels(&rows, &labels);
        let state = BatchPairState::from_teacher(&embed(&teacher, &xt).unwrap(), 0.25).unwrap();
        let mut hp = Hyperparams::for_kind(kind, b);
        hp.omega = rng.random_range(0.1..2.0);
        hp.gamma = rng.random_range(0.1..2.0);
        hp.eta = rng.random_range(0.1..2.0);
        if rng.random_bool(0.25) {
            hp.quantized_form = QuantizedForm::Verbatim;
        }
        let omega = hp.omega;
        let p = GradProblem {
            params,
            x,
            sup,
            state,
            hp,
            omega,
            labels,
        };
        if kink_margin(&p) >= min_margin {
            return p;
        }
    }
}

fn objective(p: &GradProblem, params: &EncoderParams) -> f64 {
    let emb = embed(params, &p.x).unwrap();
    total_loss(Some(&p.state), &emb, &p.sup, &p.hp, p.omega).unwrap().loss
}

/// Max over parameters of `|a - n| / max(|a|, |n|, floor)` between the
/// analytic gradient and a central difference with step `h`.
pub fn gradient_error(p: &GradProblem, h: f64, floor: f64) -> f64 {
    let trace = forward(&p.params, &p.x).unwrap();
    let tl = total_loss(Some(&p.state), trace.embeddings(), &p.sup, &p.hp, p.omega).unwrap();
    let grads = backward(&trace, &p.params, &tl.grad).unwrap();
    let analytic: Vec<f64> = grads.iter().copied().collect();
    let mut worst: f64 = 0.0;
    let mut probe = p.params.clone();
    for (k, a) in analytic.into_iter().enumerate() {
        let orig = *probe.iter().nth(k).unwrap();
        *probe.iter_mut().nth(k).unwrap() = orig + h;
        let fp = objective(p, &probe);
        *probe.iter_mut().nth(k).unwrap() = orig - h;
        let fm = objective(p, &probe);
        *probe.iter_mut().nth(k).unwrap() = orig;
        let n = (fp - fm) / (2.0 * h);
        worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(floor));
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub mod props {
    //! Property checks run through proptest's runner so they can be called
    //! from both the test harness and the acceptance binary.

    use proptest::prelude::*;
    use proptest::test_runner::{Config, TestCaseError, TestRunner};

    use tshash_core::losses::{
        pseudo_similarity, sim_relaxed, total_loss, BatchPairState, Hyperparams,
        PairSupervision, SupervisedKind,
    };
    use tshash_core::retrieval::{evaluate, pack};
    use tshash_core::Matrix;

    fn runner(cases: u32, seed: u8) -> TestRunner {
        let cfg = Config {
            cases,
            failure_persistence: None,
            ..Config::default()
        };
        TestRunner::new_with_rng(cfg, proptest::test_runner::TestRng::from_seed(
            proptest::test_runner::RngAlgorithm::ChaCha,
            &[seed; 32],
        ))
    }

    fn finish(r: Result<(), proptest::test_runner::TestError<impl std::fmt::Debug>>) -> Result<(), String> {
        r.map_err(|e| e.to_string())
    }

    fn nonzero_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, len)
            .prop_filter("nonzero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-6)
    }

    /// Symmetric, within [-4, 0], invariant to positive rescaling.
    pub fn sim_relaxed_invariants(cases: u32) -> Result<(), String> {
        let strat = (1usize..20).prop_flat_map(|n| (nonzero_vec(n), nonzero_vec(n), 1e-3f64..1e3));
        finish(runner(cases, 1).run(&strat, |(s, t, c)| {
            let a = sim_relaxed(&s, &t);
            prop_assert_eq!(a.to_bits(), sim_relaxed(&t, &s).to_bits());
            prop_assert!((-4.0 - 1e-12..=0.0).contains(&a), "out of range: {}", a);
            let scaled: Vec<f64> = s.iter().map(|x| x * c).collect();
            prop_assert!((sim_relaxed(&scaled, &t) - a).abs() < 1e-12);
            Ok(())
        }))
    }

    /// Raising the threshold never turns a 0 into a 1.
    pub fn pseudo_antitone(cases: u32) -> Result<(), String> {
        let strat = (1usize..12).prop_flat_map(|m| {
            (
                Just(m),
                prop::collection::vec(-4.0f64..=0.0, m * m),
                -4.5f64..0.5,
                0.0f64..2.0,
            )
        });
        finish(runner(cases, 2).run(&strat, |(m, vals, lo, step)| {
            let sims = Matrix::from_vec(m, m, vals);
            let a = pseudo_similarity(&sims, lo);
            let b = pseudo_similarity(&sims, lo + step);
            for i in 0..m {
                for j in 0..m {
                    prop_assert!(b.get(i, j) <= a.get(i, j));
                }
            }
            Ok(())
        }))
    }

    /// MAP, precision@H<=2, top-k precision and every AP lie in [0, 1].
    pub fn metric_bounds(cases: u32) -> Result<(), String> {
        let strat = (1usize..=64, 1usize..10, 1usize..60, 1u32..5).prop_flat_map(|(b, nq, nd, c)| {
            (
                Just(b),
                prop::collection::vec(prop::collection::vec(prop::bool::ANY, b), nq),
                prop::collection::vec(prop::collection::vec(prop::bool::ANY, b), nd),
                prop::collection::vec(0..c, nq),
                prop::collection::vec(0..c, nd),
                1usize..80,
            )
        });
        finish(runner(cases, 3).run(&strat, |(b, q, d, ql, dl, k)| {
            let to = |v: &Vec<Vec<bool>>| -> Vec<Vec<i8>> {
                v.iter().map(|r| r.iter().map(|&x| if x { 1 } else { -1 }).collect()).collect()
            };
            let qs = pack(&to(&q), b).unwrap().with_labels(ql).unwrap();
            let ds = pack(&to(&d), b).unwrap().with_labels(dl).unwrap();
            let r = evaluate(&qs, &ds, k, &[1, 5, 10, 100]).unwrap();
            let unit = |x: f64| (0.0..=1.0).contains(&x);
            prop_assert!(unit(r.map_at_k) && unit(r.precision_hamming2));
            prop_assert!(r.topk_curve.iter().all(|&(_, p)| unit(p)));
            prop_assert!(r.per_query.iter().all(|p| unit(p.average_precision)));
            Ok(())
        }))
    }

    /// Relabelling batch rows leaves every loss term unchanged.
    pub fn batch_permutation_invariance(cases: u32) -> Result<(), String> {
        let strat = (2usize..9, 2usize..9, 0usize..3).prop_flat_map(|(m, b, kind)| {
            (
                Just((m, b, kind)),
                prop::collection::vec(-2.0f64..2.0, m * b),
                prop::collection::vec(-2.0f64..2.0, m * b),
                prop::collection::vec(0u32..3, m),
                Just((0..m).collect::<Vec<usize>>()).prop_shuffle(),
                0usize..=m,
            )
        });
        finish(runner(cases, 4).run(&strat, |((m, b, kind), e, t, labels, perm, m_l)| {
            let kind = [SupervisedKind::Ksh, SupervisedKind::Dsh, SupervisedKind::Dpsh][kind];
            let mut hp = Hyperparams::for_kind(kind, b);
            hp.omega = 1.3;
            let eval = |order: &[usize]| -> Result<[f64; 6], TestCaseError> {
                let emb = Matrix::from_rows(&order.iter().map(|&i| e[i * b..(i + 1) * b].to_vec()).collect::<Vec<_>>());
                let tem = Matrix::from_rows(&order.iter().map(|&i| t[i * b..(i + 1) * b].to_vec()).collect::<Vec<_>>());
                // labeled rows are the original rows < m_l, wherever they landed
                let rows: Vec<usize> = (0..m).filter(|&r| order[r] < m_l).collect();
                let labs: Vec<u32> = rows.iter().map(|&r| labels[order[r]]).collect();
                let sup = PairSupervision::from_labels(&rows, &labs);
                let state = BatchPairState::from_teacher(&tem, 0.3).unwrap();
                let tl = total_loss(Some(&state), &emb, &sup, &hp, hp.omega).unwrap();
                let bd = tl.breakdown;
                Ok([bd.supervised, bd.consistency, bd.quantized, bd.quantization, bd.total, state.pseudo.count_ones() as f64])
            };
            let id: Vec<usize> = (0..m).collect();
            let a = eval(&id)?;
            let c = eval(&perm)?;
            for (x, y) in a.iter().zip(&c) {
                prop_assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0), "{:?} vs {:?}", a, c);
            }
            Ok(())
        }))
    }
}
