//! Independent solvers used to cross-check [`crate::rgcl`] and
//! [`crate::isogclr`].
//!
//! Nothing here calls into the code under test except for data containers
//! and the configuration type; reductions, softmax and backprop are
//! re-derived in straight-line form.

use rayon::prelude::*;

use crate::encoder::{Activation, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;
use crate::rgcl::{DistributionalWeights, PairedInputs, RgclConfig, UnimodalViews, HARDNESS_BOUND};

pub const LAMBDA_TOLERANCE: f64 = 1e-10;
pub const MAX_BISECTION_ITERS: usize = 200;
pub const GOLDEN_TOLERANCE: f64 = 1e-10;
/// Largest dataset accepted by the full-batch references.
pub const REFERENCE_CAP: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct PrimalSolution {
    pub p: DistributionalWeights,
    /// Multiplier on `KL(p, 1/m) ≤ ρ`.
    pub lambda: f64,
    pub value: f64,
    pub constraint_active: bool,
    pub iterations: usize,
}

fn kl_to_uniform(p: &[f64]) -> f64 {
    let m = p.len() as f64;
    let mut acc = 0.0;
    for &x in p {
        if x > 0.0 {
            acc += x * (x * m).ln();
        }
    }
    acc
}

fn weighted_value(h: &[f64], p: &[f64], tau0: f64) -> f64 {
    let mut lin = 0.0;
    for (a, b) in h.iter().zip(p) {
        lin += a * b;
    }
    lin - tau0 * kl_to_uniform(p)
}

/// `softmax(h/t)`; for `t = 0` the uniform distribution on the argmax set.
fn tilted(h: &[f64], t: f64) -> Vec<f64> {
    let top = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if t == 0.0 {
        let ties = h.iter().filter(|&&v| v == top).count() as f64;
        return h.iter().map(|&v| if v == top { 1.0 / ties } else { 0.0 }).collect();
    }
    let w: Vec<f64> = h.iter().map(|&v| ((v - top) / t).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

fn check_primal_args(h: &[f64], rho: f64, tau0: f64) -> Result<()> {
    if h.len() < 2 {
        return Err(Error::TooShort { min: 2, got: h.len() });
    }
    if rho.is_nan() || rho <= 0.0 || tau0.is_nan() || tau0 < 0.0 {
        return Err(Error::config(format!("need rho > 0 and tau0 >= 0 (got {rho}, {tau0})")));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("hardness scores"));
    }
    Ok(())
}

/// `max_p Σ p_j h_j − τ₀ KL(p, 1/m)` subject to `KL(p, 1/m) ≤ ρ`.
///
/// The maximizer is `softmax(h/(λ + τ₀))`. `λ = 0` when that point is
/// already feasible; otherwise `λ` is bisected on `[0, C/ρ + 1]` until
/// the constraint is tight.
pub fn solve_primal(h: &[f64], rho: f64, tau0: f64) -> Result<PrimalSolution> {
    check_primal_args(h, rho, tau0)?;
    let free = tilted(h, tau0);
    if kl_to_uniform(&free) <= rho {
        return Ok(PrimalSolution {
            value: weighted_value(h, &free, tau0),
            p: DistributionalWeights(free),
            lambda: 0.0,
            constraint_active: false,
            iterations: 0,
        });
    }
    let spread = h.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - h.iter().copied().fold(f64::INFINITY, f64::min);
    // |h| ≤ C gives λ* ≤ C/ρ; wider inputs get a proportionally wider bracket
    let mut hi = HARDNESS_BOUND.max(spread) / rho + 1.0;
    let mut lo = 0.0;
    let kl_at = |lambda: f64| kl_to_uniform(&tilted(h, lambda + tau0));
    if kl_at(hi) > rho {
        return Err(Error::NoConvergence {
            iterations: 0,
            residual: kl_at(hi) - rho,
        });
    }
    let mut iterations = 0;
    while hi - lo > LAMBDA_TOLERANCE {
        if iterations == MAX_BISECTION_ITERS {
            return Err(Error::NoConvergence {
                iterations,
                residual: hi - lo,
            });
        }
        let mid = 0.5 * (lo + hi);
        if kl_at(mid) > rho {
            lo = mid;
        } else {
            hi = mid;
        }
        iterations += 1;
    }
    // the upper end is always feasible
    let p = tilted(h, hi + tau0);
    Ok(PrimalSolution {
        value: weighted_value(h, &p, tau0),
        p: DistributionalWeights(p),
        lambda: hi,
        constraint_active: true,
        iterations,
    })
}

/// Exhaustive search over the simplex grid with spacing `step` (`m ≤ 3`).
/// Returns the best feasible point and its value.
pub fn grid_search_simplex(h: &[f64], rho: f64, tau0: f64, step: f64) -> Result<(Vec<f64>, f64)> {
    check_primal_args(h, rho, tau0)?;
    if h.len() > 3 {
        return Err(Error::GridLimited { m: h.len() });
    }
    if !(step > 0.0 && step <= 0.01) {
        return Err(Error::config(format!("grid step must be in (0, 0.01] (got {step})")));
    }
    let m = h.len();
    let k = (1.0 / step).round() as usize;
    let kf = k as f64;
    // per-coordinate KL contributions p ln(p m) on the grid
    let kl_part: Vec<f64> = (0..=k)
        .map(|a| {
            let p = a as f64 / kf;
            if a == 0 { 0.0 } else { p * (p * m as f64).ln() }
        })
        .collect();
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut consider_idx = |idx: &[usize]| {
        let kl: f64 = idx.iter().map(|&a| kl_part[a]).sum();
        if kl <= rho {
            let lin: f64 = idx.iter().zip(h).map(|(&a, &hv)| a as f64 / kf * hv).sum();
            let v = lin - tau0 * kl;
            if best.as_ref().is_none_or(|(_, b)| v > *b) {
                best = Some((idx.to_vec(), v));
            }
        }
    };
    if m == 2 {
        for a in 0..=k {
            consider_idx(&[a, k - a]);
        }
    } else {
        for a in 0..=k {
            for b in 0..=(k - a) {
                consider_idx(&[a, b, k - a - b]);
            }
        }
    }
    let mut best: Option<(Vec<f64>, f64)> = best.map(|(idx, _)| {
        let p: Vec<f64> = idx.iter().map(|&a| a as f64 / kf).collect();
        let v = weighted_value(h, &p, tau0);
        (p, v)
    });
    let mut consider = |p: Vec<f64>| {
        if kl_to_uniform(&p) <= rho {
            let v = weighted_value(h, &p, tau0);
            if best.as_ref().is_none_or(|(_, b)| v > *b) {
                best = Some((p, v));
            }
        }
    };
    // the uniform point is always feasible, but may fall off the grid
    consider(vec![1.0 / h.len() as f64; h.len()]);
    Ok(best.expect("uniform point is feasible"))
}

fn dual_value(h: &[f64], tau: f64, rho: f64, tau0: f64) -> f64 {
    let top = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mean: f64 = h.iter().map(|&v| ((v - top) / tau).exp()).sum::<f64>() / h.len() as f64;
    top + tau * mean.ln() + (tau - tau0) * rho
}

/// Minimizes `τ log mean exp(h/τ) + (τ − τ₀) ρ` over `[τ₀, τ₀ + C/ρ]` by
/// golden-section search. Returns `(τ*, value)`.
pub fn solve_dual_tau(h: &[f64], cfg: &RgclConfig) -> Result<(f64, f64)> {
    check_primal_args(h, cfg.rho, cfg.tau0)?;
    let f = |t: f64| dual_value(h, t, cfg.rho, cfg.tau0);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (cfg.tau0, cfg.tau_max());
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > GOLDEN_TOLERANCE {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    // the minimizer may sit on either end of the box
    let best = [(cfg.tau0, f(cfg.tau0)), (cfg.tau_max(), f(cfg.tau_max())), (mid, f(mid))]
        .into_iter()
        .fold((mid, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
    Ok(best)
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::config(format!("finite-difference step must be in [1e-7, 1e-3] (got {step})")));
    }
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let up = f(&probe);
        probe[i] = orig - step;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        out.push((up - down) / (2.0 * step));
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ReferenceGradient {
    pub value: f64,
    pub grad_w: EncoderParams,
    pub grad_tau: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BimodalReferenceGradient {
    pub value: f64,
    pub grad_images: EncoderParams,
    pub grad_texts: EncoderParams,
    pub grad_tau_v: Vec<f64>,
    pub grad_tau_t: Vec<f64>,
}

struct RowCache {
    pre: Vec<f64>,
    act: Vec<f64>,
    y: Vec<f64>,
    norm: f64,
}

fn forward_row(p: &EncoderParams, x: &[f64]) -> Result<RowCache> {
    let pre: Vec<f64> = (0..p.b1.len())
        .map(|r| p.b1[r] + p.w1.row(r).iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let act: Vec<f64> = match p.activation {
        Activation::Identity => pre.clone(),
        Activation::Tanh => pre.iter().map(|v| v.tanh()).collect(),
    };
    let out: Vec<f64> = (0..p.b2.len())
        .map(|r| p.b2[r] + p.w2.row(r).iter().zip(&act).map(|(a, b)| a * b).sum::<f64>())
        .collect();
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm.is_nan() || norm < 1e-12 {
        return Err(Error::DegenerateEmbedding { row: 0, norm });
    }
    let y = out.iter().map(|v| v / norm).collect();
    Ok(RowCache { pre, act, y, norm })
}

fn backward_row(p: &EncoderParams, x: &[f64], c: &RowCache, gy: &[f64], acc: &mut EncoderParams) {
    let proj: f64 = c.y.iter().zip(gy).map(|(a, b)| a * b).sum();
    let go: Vec<f64> = gy.iter().zip(&c.y).map(|(g, y)| (g - y * proj) / c.norm).collect();
    let mut gh = vec![0.0; c.act.len()];
    for (r, &g) in go.iter().enumerate() {
        acc.b2[r] += g;
        for (k, &a) in c.act.iter().enumerate() {
            let cur = acc.w2.get(r, k);
            acc.w2.set(r, k, cur + g * a);
            gh[k] += p.w2.get(r, k) * g;
        }
    }
    for (k, g) in gh.iter().enumerate() {
        let ga = match p.activation {
            Activation::Identity => *g,
            Activation::Tanh => g * (1.0 - c.pre[k].tanh().powi(2)),
        };
        acc.b1[k] += ga;
        for (j, &xj) in x.iter().enumerate() {
            let cur = acc.w1.get(k, j);
            acc.w1.set(k, j, cur + ga * xj);
        }
    }
}

struct Term {
    anchor: usize,
    positive: usize,
    negatives: Vec<usize>,
    tau: f64,
    /// 1/(number of averaged directions).
    share: f64,
    /// Which τ-gradient slot receives this term.
    slot: usize,
}

struct TermOutput {
    value: f64,
    grad_rows: Vec<Vec<f64>>,
    grad_tau: Vec<f64>,
}

/// Loss, embedding-row gradients and τ gradients for a list of terms over
/// the stacked embeddings `y`, divided by `n`.
fn eval_terms(y: &[Vec<f64>], terms: &[Term], n_slots: usize, n: usize, cfg: &RgclConfig) -> TermOutput {
    let dim = y[0].len();
    let dotp = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let nf = n as f64;
    let mut value = 0.0;
    let mut grad_rows = vec![vec![0.0; dim]; y.len()];
    let mut grad_tau = vec![0.0; n_slots];
    for t in terms {
        let a = &y[t.anchor];
        let pos = dotp(a, &y[t.positive]);
        let h: Vec<f64> = t.negatives.iter().map(|&j| dotp(a, &y[j]) - pos).collect();
        let m = h.len() as f64;
        let e: Vec<f64> = h.iter().map(|v| (v / t.tau).exp()).collect();
        let g = e.iter().sum::<f64>() / m + cfg.log_epsilon;
        let dg = h.iter().zip(&e).map(|(v, ev)| ev * (-v / (t.tau * t.tau))).sum::<f64>() / m;
        value += t.share * t.tau * g.ln() / nf;
        grad_tau[t.slot] += t.share * (g.ln() + t.tau * dg / g) / nf;
        for (k, &j) in t.negatives.iter().enumerate() {
            let w = t.share * e[k] / (m * g * nf);
            for c in 0..dim {
                grad_rows[t.anchor][c] += w * (y[j][c] - y[t.positive][c]);
                grad_rows[j][c] += w * a[c];
                grad_rows[t.positive][c] -= w * a[c];
            }
        }
    }
    TermOutput {
        value,
        grad_rows,
        grad_tau,
    }
}

fn forward_all(p: &EncoderParams, x: &DenseMatrix) -> Result<Vec<RowCache>> {
    x.iter_rows()
        .enumerate()
        .map(|(r, row)| {
            forward_row(p, row).map_err(|e| match e {
                Error::DegenerateEmbedding { norm, .. } => Error::DegenerateEmbedding { row: r, norm },
                other => other,
            })
        })
        .collect()
}

fn backward_all(p: &EncoderParams, x: &DenseMatrix, caches: &[RowCache], grads: &[Vec<f64>]) -> EncoderParams {
    let mut acc = EncoderParams::zeros(p.shape());
    for (r, (c, g)) in caches.iter().zip(grads).enumerate() {
        backward_row(p, x.row(r), c, g, &mut acc);
    }
    acc
}

fn check_cap(n: usize, taus: &[f64]) -> Result<()> {
    if n > REFERENCE_CAP {
        return Err(Error::TooLarge { n, cap: REFERENCE_CAP });
    }
    if n < 2 {
        return Err(Error::TooShort { min: 2, got: n });
    }
    if taus.len() != n {
        return Err(Error::LengthMismatch { left: taus.len(), right: n });
    }
    Ok(())
}

/// Exact unimodal objective and gradients over the full negative sets.
pub fn full_batch_reference(
    params: &EncoderParams,
    views: &UnimodalViews,
    taus: &[f64],
    cfg: &RgclConfig,
) -> Result<ReferenceGradient> {
    let n = views.len();
    check_cap(n, taus)?;
    let x = views.stacked();
    let caches = forward_all(params, &x)?;
    let y: Vec<Vec<f64>> = caches.iter().map(|c| c.y.clone()).collect();
    let share = if cfg.symmetrize { 0.5 } else { 1.0 };
    let mut terms = Vec::new();
    for (i, &tau) in taus.iter().enumerate() {
        let negatives: Vec<usize> = (0..2 * n).filter(|&j| j != i && j != n + i).collect();
        terms.push(Term { anchor: i, positive: n + i, negatives: negatives.clone(), tau, share, slot: i });
        if cfg.symmetrize {
            terms.push(Term { anchor: n + i, positive: i, negatives, tau, share, slot: i });
        }
    }
    let out = eval_terms(&y, &terms, n, n, cfg);
    let penalty: f64 = taus.iter().map(|t| (t - cfg.tau0) * cfg.rho).sum::<f64>() / n as f64;
    Ok(ReferenceGradient {
        value: out.value + penalty,
        grad_w: backward_all(params, &x, &caches, &out.grad_rows),
        grad_tau: out.grad_tau.iter().map(|g| g + cfg.rho / n as f64).collect(),
    })
}

/// Exact two-tower objective and gradients over the full negative sets.
pub fn full_batch_reference_bimodal(
    params_img: &EncoderParams,
    params_txt: &EncoderParams,
    pairs: &PairedInputs,
    tau_v: &[f64],
    tau_t: &[f64],
    cfg: &RgclConfig,
) -> Result<BimodalReferenceGradient> {
    let n = pairs.len();
    check_cap(n, tau_v)?;
    check_cap(n, tau_t)?;
    let ci = forward_all(params_img, &pairs.images)?;
    let ct = forward_all(params_txt, &pairs.texts)?;
    let y: Vec<Vec<f64>> = ci.iter().chain(&ct).map(|c| c.y.clone()).collect();
    let mut terms = Vec::new();
    for i in 0..n {
        terms.push(Term {
            anchor: i,
            positive: n + i,
            negatives: (0..n).filter(|&j| j != i).map(|j| n + j).collect(),
            tau: tau_v[i],
            share: 1.0,
            slot: i,
        });
        terms.push(Term {
            anchor: n + i,
            positive: i,
            negatives: (0..n).filter(|&j| j != i).collect(),
            tau: tau_t[i],
            share: 1.0,
            slot: n + i,
        });
    }
    let out = eval_terms(&y, &terms, 2 * n, n, cfg);
    let penalty: f64 = tau_v
        .iter()
        .chain(tau_t)
        .map(|t| (t - cfg.tau0) * cfg.rho)
        .sum::<f64>()
        / n as f64;
    let (rows_i, rows_t) = out.grad_rows.split_at(n);
    let extra = cfg.rho / n as f64;
    Ok(BimodalReferenceGradient {
        value: out.value + penalty,
        grad_images: backward_all(params_img, &pairs.images, &ci, rows_i),
        grad_texts: backward_all(params_txt, &pairs.texts, &ct, rows_t),
        grad_tau_v: out.grad_tau[..n].iter().map(|g| g + extra).collect(),
        grad_tau_t: out.grad_tau[n..].iter().map(|g| g + extra).collect(),
    })
}

/// Largest `|a − b|` over solve_primal and solve_dual_tau values on a batch
/// of instances, evaluated in parallel.
pub fn max_duality_gap(instances: &[Vec<f64>], cfg: &RgclConfig) -> Result<f64> {
    let gaps: Vec<f64> = instances
        .par_iter()
        .map(|h| -> Result<f64> {
            let primal = solve_primal(h, cfg.rho, cfg.tau0)?;
            let (_, dual) = solve_dual_tau(h, cfg)?;
            Ok((primal.value - dual).abs())
        })
        .collect::<Result<_>>()?;
    Ok(gaps.into_iter().fold(0.0, f64::max))
}
