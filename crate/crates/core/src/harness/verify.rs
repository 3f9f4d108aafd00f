//! Self-check suite behind the `verify` subcommand.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasynth::{gen_bimodal_pairs, gen_longtail_clusters, longtail_sizes, BimodalParams, LongTailParams};
use crate::dro_oracle::{
    finite_diff_grad, full_batch_reference, grid_search_simplex, solve_dual_tau, solve_primal,
};
use crate::encoder::{encode, encode_backward, Activation, EncoderParams, EncoderShape};
use crate::error::{Error, Result};
use crate::harness::{export_tau_csv, read_tau_csv};
use crate::isogclr::{
    batch_from_indices, pair_batch_from_indices, sample_batch, step_bimodal_on_batch, step_on_batch,
    OptimizerMode, OptimizerState,
};
use crate::numerics::{log_sum_exp, DenseMatrix, RandomStream};
use crate::rgcl::{
    dual_loss_anchor, gcl_term, objective_unimodal, objective_unimodal_with_grad, term_stats,
    PairedInputs, RgclConfig, TermLayout, UnimodalViews,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Skip the clamp of τ onto `[τ₀, τ_max]`.
    TauProjection,
}

impl std::str::FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tau-projection" => Ok(Fault::TauProjection),
            other => Err(Error::config(format!("unknown fault `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    /// Compared against `tolerance`; passes when `residual ≤ tolerance`.
    pub residual: f64,
    pub tolerance: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fault: Option<Fault>,
    pub passed: bool,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn failed(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

fn check(name: &str, tolerance: f64, residual: Result<f64>) -> Check {
    match residual {
        Ok(r) => Check {
            name: name.to_string(),
            passed: r <= tolerance,
            residual: r,
            tolerance,
            error: None,
        },
        Err(e) => Check {
            name: name.to_string(),
            passed: false,
            residual: f64::INFINITY,
            tolerance,
            error: Some(e.to_string()),
        },
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn random_h(s: &mut RandomStream, m: usize) -> Vec<f64> {
    (0..m).map(|_| s.uniform(-2.0, 2.0)).collect()
}

fn tiny_problem(seed: u64, n: usize, d: usize) -> (EncoderParams, UnimodalViews) {
    let root = RandomStream::new(seed);
    let shape = EncoderShape { input: d, hidden: 5, embed: 3, activation: Activation::Tanh };
    let p = EncoderParams::init(shape, &root);
    let mut s = root.substream("views");
    let a = DenseMatrix::from_vec(n, d, s.draw_gaussian(n * d)).expect("sized");
    let b = DenseMatrix::from_vec(n, d, s.draw_gaussian(n * d)).expect("sized");
    (p, UnimodalViews::new(a, b).expect("same shape"))
}

fn small_data(seed: u64) -> Result<DenseMatrix> {
    Ok(gen_longtail_clusters(&LongTailParams { k: 4, n: 40, ratio: 4.0, d_in: 6, noise: 0.3, seed })?.inputs)
}

/// Runs every check. With a fault injected, the affected check is expected
/// to fail.
pub fn run_verify(seed: u64, fault: Option<Fault>) -> VerifyReport {
    let root = RandomStream::new(seed);
    let cfg = RgclConfig::default();
    let mut checks = vec![
        check("numerics.log_sum_exp_stability", 1e-12, {
            log_sum_exp(&[1000.0, 1000.0]).map(|v| (v - (1000.0 + 2f64.ln())).abs())
        }),
        check("encoder.backward_vs_finite_differences", 1e-6, encoder_fd(&root)),
        check("rgcl.fixed_tau_gcl_identity", 1e-12, gcl_identity(&root, &cfg)),
        check("rgcl.grad_tau_vs_finite_differences", 1e-6, grad_tau_fd(&root, &cfg)),
        check("rgcl.grad_w_vs_finite_differences", 1e-6, grad_w_fd(&root, &cfg)),
        check("dro_oracle.reference_matches_objective", 1e-12, reference_consistency(&root, &cfg)),
        check("dro_oracle.primal_dual_gap", 1e-6, primal_dual_gap(&root)),
        check("dro_oracle.grid_vs_bisection", 1e-3, grid_gap(&root)),
        check("dro_oracle.two_negative_weight", 0.02, {
            solve_primal(&[0.0, -1.0], 0.2, 0.0).map(|s| (s.p[0] - 0.8).abs())
        }),
        check("dro_oracle.weight_monotone_in_rho", 0.0, monotone_in_rho()),
        check("dro_oracle.dual_tau_bound", 0.0, dual_tau_bound(&root)),
    ];
    let (box_violation, floor_violation) = match train_bounds(seed, fault) {
        Ok((a, b)) => (Ok(a), Ok(b)),
        Err(e) => (Err(Error::config(e.to_string())), Err(e)),
    };
    checks.push(check("isogclr.tau_within_box", 0.0, box_violation));
    checks.push(check("isogclr.g_and_s_floor", 1e-12, floor_violation));
    checks.push(check("isogclr.batch_estimate_unbiased", 3.0, unbiasedness(&root)));
    checks.push(check("isogclr.full_batch_is_gradient_descent", 1e-10, degeneration(&root)));
    checks.push(check("isogclr.frozen_tau_matches_baseline", 0.0, frozen_vs_baseline(seed)));
    checks.push(check("isogclr.mirrored_bimodal_symmetry", 0.0, mirrored_symmetry(seed)));
    checks.push(check("isogclr.checkpoint_resume", 0.0, resume(seed)));
    checks.push(check("harness.tau_csv_round_trip", 0.0, tau_csv_round_trip(&root)));
    checks.push(check("datasynth.longtail_ratio", 10.0, {
        longtail_sizes(10, 2000, 100.0).map(|s| (s[0] as f64 / s[9] as f64 - 100.0).abs())
    }));
    VerifyReport {
        seed,
        fault,
        passed: checks.iter().all(|c| c.passed),
        checks,
    }
}

fn encoder_fd(root: &RandomStream) -> Result<f64> {
    let (p, views) = tiny_problem(root.substream("enc").next_u64(), 4, 5);
    let x = views.view_a;
    let mut s = root.substream("enc-up");
    let up = DenseMatrix::from_vec(4, 3, s.draw_gaussian(12))?;
    let shape = p.shape();
    let f = |w: &[f64]| {
        let q = EncoderParams::from_flat(shape, w).expect("same size");
        let y = encode(&q, &x).expect("non-degenerate").embeddings;
        y.as_slice().iter().zip(up.as_slice()).map(|(a, b)| a * b).sum::<f64>()
    };
    let fd = finite_diff_grad(f, &p.to_flat(), 1e-6)?;
    let exact = encode_backward(&p, &x, &up)?.to_flat();
    Ok(rel_err(&fd, &exact))
}

fn gcl_identity(root: &RandomStream, cfg: &RgclConfig) -> Result<f64> {
    let mut s = root.substream("gcl");
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let m = 2 + (s.next_u64() % 7) as usize;
        let h = random_h(&mut s, m);
        let tau = s.uniform(cfg.tau0, cfg.tau_max());
        let lhs = dual_loss_anchor(&h, tau, cfg)?;
        let rhs = gcl_term(&h, tau)? - tau * (m as f64).ln() + (tau - cfg.tau0) * cfg.rho;
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

fn grad_tau_fd(root: &RandomStream, cfg: &RgclConfig) -> Result<f64> {
    let (p, views) = tiny_problem(root.substream("gt").next_u64(), 5, 4);
    let taus = [0.2, 0.45, 0.8, 1.3, 0.09];
    let exact = objective_unimodal_with_grad(&p, &views, &taus, cfg)?.grad_tau;
    let fd = finite_diff_grad(
        |t| objective_unimodal(&p, &views, t, cfg).unwrap_or(f64::NAN),
        &taus,
        1e-6,
    )?;
    Ok(rel_err(&fd, &exact))
}

fn grad_w_fd(root: &RandomStream, cfg: &RgclConfig) -> Result<f64> {
    let (p, views) = tiny_problem(root.substream("gw").next_u64(), 5, 4);
    let taus = [0.3, 0.5, 0.7, 0.2, 1.1];
    let exact = objective_unimodal_with_grad(&p, &views, &taus, cfg)?.grad_params.to_flat();
    let shape = p.shape();
    let fd = finite_diff_grad(
        |w| {
            let q = EncoderParams::from_flat(shape, w).expect("same size");
            objective_unimodal(&q, &views, &taus, cfg).unwrap_or(f64::NAN)
        },
        &p.to_flat(),
        1e-5,
    )?;
    Ok(rel_err(&fd, &exact))
}

fn reference_consistency(root: &RandomStream, cfg: &RgclConfig) -> Result<f64> {
    let (p, views) = tiny_problem(root.substream("ref").next_u64(), 6, 4);
    let taus = [0.3, 0.5, 0.7, 0.2, 1.1, 0.06];
    let r = full_batch_reference(&p, &views, &taus, cfg)?;
    Ok((r.value - objective_unimodal(&p, &views, &taus, cfg)?).abs())
}

fn primal_dual_gap(root: &RandomStream) -> Result<f64> {
    let mut s = root.substream("duality");
    let mut inst = Vec::new();
    for m in 2..=6 {
        for rho in [0.1, 0.5, 1.0] {
            for _ in 0..20 {
                inst.push((random_h(&mut s, m), rho));
            }
        }
    }
    let gaps: Vec<f64> = inst
        .par_iter()
        .map(|(h, rho)| {
            let cfg = RgclConfig { rho: *rho, ..RgclConfig::default() };
            let p = solve_primal(h, *rho, cfg.tau0)?;
            let (_, d) = solve_dual_tau(h, &cfg)?;
            Ok((p.value - d).abs())
        })
        .collect::<Result<_>>()?;
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

fn grid_gap(root: &RandomStream) -> Result<f64> {
    let mut s = root.substream("grid");
    let mut inst = Vec::new();
    for m in [2usize, 3] {
        for rho in [0.1, 0.5, 1.0] {
            for _ in 0..20 {
                inst.push((random_h(&mut s, m), rho));
            }
        }
    }
    let gaps: Vec<f64> = inst
        .par_iter()
        .map(|(h, rho)| {
            let p = solve_primal(h, *rho, 0.05)?;
            let step = if h.len() == 2 { 1e-4 } else { 2.5e-4 };
            let (_, v) = grid_search_simplex(h, *rho, 0.05, step)?;
            Ok((p.value - v).abs())
        })
        .collect::<Result<_>>()?;
    Ok(gaps.into_iter().fold(0.0, f64::max))
}

fn monotone_in_rho() -> Result<f64> {
    let mut last = f64::NEG_INFINITY;
    let mut worst: f64 = 0.0;
    for rho in [0.05, 0.1, 0.2, 0.4] {
        let p1 = solve_primal(&[0.0, -1.0], rho, 0.0)?.p[0];
        worst = worst.max(last - p1);
        last = p1;
    }
    Ok(worst)
}

fn dual_tau_bound(root: &RandomStream) -> Result<f64> {
    let mut s = root.substream("tau-bound");
    let mut worst = f64::NEG_INFINITY;
    for rho in [0.1, 0.3, 0.5, 1.0] {
        let cfg = RgclConfig { rho, ..RgclConfig::default() };
        for _ in 0..25 {
            let m = 2 + (s.next_u64() % 5) as usize;
            let (tau, _) = solve_dual_tau(&random_h(&mut s, m), &cfg)?;
            worst = worst.max(tau - cfg.tau_max());
        }
    }
    Ok(worst.max(0.0))
}

/// Trains from the floor with a radius large enough that every τ gradient
/// is positive, so only the projection keeps τ ≥ τ₀. Returns the largest
/// box violation and the largest shortfall of g or s below exp(−C/τ₀).
fn train_bounds(seed: u64, fault: Option<Fault>) -> Result<(f64, f64)> {
    let x = small_data(seed)?;
    let root = RandomStream::new(seed).substream("train-bounds");
    let shape = EncoderShape { input: 6, hidden: 8, embed: 4, activation: Activation::Tanh };
    let mut box_violation: f64 = 0.0;
    let mut floor_violation: f64 = 0.0;
    for (rho, tau_init) in [(5.0, 0.05), (0.3, 0.7)] {
        let mut cfg = RgclConfig { rho, tau_init, eta_tau: 0.1, ..RgclConfig::default() };
        cfg.project_tau = fault != Some(Fault::TauProjection);
        let mut p = EncoderParams::init(shape, &root);
        let mut opt = OptimizerState::new_unimodal(x.rows(), p.num_params(), &cfg, OptimizerMode::Momentum);
        let mut s = root.substream("batches");
        for _ in 0..60 {
            let batch = sample_batch(&mut s, &x, 16, 0.1)?;
            let rep = step_on_batch(&mut opt, &mut p, &batch, &cfg)?;
            for a in &opt.anchors {
                box_violation = box_violation.max(cfg.tau0 - a.tau).max(a.tau - cfg.tau_max());
            }
            floor_violation = floor_violation.max(cfg.g_lower_bound() - rep.min_g.min(rep.min_s));
        }
    }
    Ok((box_violation, floor_violation))
}

/// Largest `|mean − g| / SE` over anchors when the batch estimate of `g_i`
/// is averaged over random batches containing anchor `i`.
fn unbiasedness(root: &RandomStream) -> Result<f64> {
    let x = small_data(7)?;
    let n = x.rows();
    let p = EncoderParams::init(
        EncoderShape { input: 6, hidden: 8, embed: 4, activation: Activation::Tanh },
        root,
    );
    let views = UnimodalViews::new(x.clone(), x.clone())?;
    let emb = encode(&p, &views.stacked())?.embeddings;
    let taus = vec![0.3; n];
    let full = term_stats(&emb, TermLayout::Unimodal { n }, &taus)?;
    let draws = 2000;
    let b = 8;
    let anchors: Vec<usize> = (0..5).map(|i| i * 8).collect();
    let z: Vec<f64> = anchors
        .par_iter()
        .map(|&i| {
            let mut s = root.substream_indexed("unbiased", i as u64);
            let others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let mut vals = Vec::with_capacity(draws);
            for _ in 0..draws {
                let mut idx = vec![i];
                idx.extend(s.sample_without_replacement(n - 1, b - 1).into_iter().map(|k| others[k]));
                let batch = batch_from_indices(idx, &x, 0.0, &mut s)?;
                let be = encode(&p, &batch.views.stacked())?.embeddings;
                vals.push(term_stats(&be, TermLayout::Unimodal { n: b }, &vec![0.3; b])?[0].g);
            }
            let m = vals.iter().sum::<f64>() / draws as f64;
            let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
            let se = (var / draws as f64).sqrt();
            Ok((m - full[i].g).abs() / se.max(1e-300))
        })
        .collect::<Result<_>>()?;
    Ok(z.into_iter().fold(0.0, f64::max))
}

fn degeneration(root: &RandomStream) -> Result<f64> {
    let cfg = RgclConfig {
        beta0: 1.0,
        beta1: 1.0,
        tau_grad_scale: Some(1.0),
        eta_w: 0.1,
        eta_tau: 0.5,
        ..RgclConfig::default()
    };
    let x = small_data(3)?.select_rows(&(0..12).collect::<Vec<_>>());
    let mut p = EncoderParams::init(
        EncoderShape { input: 6, hidden: 8, embed: 4, activation: Activation::Tanh },
        root,
    );
    let mut opt = OptimizerState::new_unimodal(12, p.num_params(), &cfg, OptimizerMode::Momentum);
    let mut s = root.substream("degenerate");
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let batch = batch_from_indices((0..12).collect(), &x, 0.1, &mut s)?;
        let reference = full_batch_reference(&p, &batch.views, &opt.taus(), &cfg)?;
        let rep = step_on_batch(&mut opt, &mut p, &batch, &cfg)?;
        worst = worst
            .max(rel_err(&rep.grad_w, &reference.grad_w.to_flat()))
            .max(rel_err(&rep.grad_tau, &reference.grad_tau));
    }
    Ok(worst)
}

fn frozen_vs_baseline(seed: u64) -> Result<f64> {
    let x = small_data(seed)?;
    let cfg = RgclConfig::default();
    let frozen = RgclConfig { eta_tau: 0.0, ..cfg.clone() };
    let root = RandomStream::new(seed);
    let shape = EncoderShape { input: 6, hidden: 8, embed: 4, activation: Activation::Tanh };
    let mut pa = EncoderParams::init(shape, &root);
    let mut pb = pa.clone();
    let mut oa = OptimizerState::new_unimodal(x.rows(), pa.num_params(), &frozen, OptimizerMode::Momentum);
    let mut ob = OptimizerState::new_unimodal(x.rows(), pb.num_params(), &cfg, OptimizerMode::FixedTau);
    let mut sa = root.substream("baseline");
    let mut sb = sa.clone();
    let mut mismatches = 0.0;
    for _ in 0..10 {
        let ba = sample_batch(&mut sa, &x, 8, 0.1)?;
        let bb = sample_batch(&mut sb, &x, 8, 0.1)?;
        step_on_batch(&mut oa, &mut pa, &ba, &frozen)?;
        step_on_batch(&mut ob, &mut pb, &bb, &cfg)?;
        if pa != pb || oa.taus() != ob.taus() {
            mismatches += 1.0;
        }
    }
    Ok(mismatches)
}

fn mirrored_symmetry(seed: u64) -> Result<f64> {
    let data = gen_bimodal_pairs(&BimodalParams {
        k: 4,
        n: 40,
        ratio: 4.0,
        d_latent: 4,
        d_img: 6,
        d_txt: 6,
        noise: 0.2,
        seed,
        mirrored: true,
    })?;
    let pairs = PairedInputs::new(data.images, data.texts)?;
    let cfg = RgclConfig::default();
    let root = RandomStream::new(seed);
    let shape = EncoderShape { input: 6, hidden: 8, embed: 4, activation: Activation::Tanh };
    let mut pi = EncoderParams::init(shape, &root);
    let mut pt = EncoderParams::init(shape, &root);
    let mut opt = OptimizerState::new_bimodal(40, 2 * pi.num_params(), &cfg, OptimizerMode::Momentum);
    let mut s = root.substream("mirror");
    let mut mismatches = 0.0;
    for _ in 0..10 {
        let batch = pair_batch_from_indices(s.sample_without_replacement(40, 10), &pairs)?;
        step_bimodal_on_batch(&mut opt, &mut pi, &mut pt, &batch, &cfg)?;
        if opt.taus_v() != opt.taus_t() {
            mismatches += 1.0;
        }
    }
    Ok(mismatches)
}

fn resume(seed: u64) -> Result<f64> {
    let x = small_data(seed)?;
    let cfg = RgclConfig::default();
    let root = RandomStream::new(seed);
    let shape = EncoderShape { input: 6, hidden: 8, embed: 4, activation: Activation::Tanh };
    let mut p = EncoderParams::init(shape, &root);
    let mut opt = OptimizerState::new_unimodal(x.rows(), p.num_params(), &cfg, OptimizerMode::Adam);
    let mut s = root.substream("resume");
    for _ in 0..5 {
        let b = sample_batch(&mut s, &x, 8, 0.1)?;
        step_on_batch(&mut opt, &mut p, &b, &cfg)?;
    }
    let mut opt_bytes = Vec::new();
    opt.write_checkpoint(&mut opt_bytes).map_err(|e| Error::config(e.to_string()))?;
    let mut enc_bytes = Vec::new();
    p.write_checkpoint(&mut enc_bytes).map_err(|e| Error::config(e.to_string()))?;
    let mut opt2 = OptimizerState::read_checkpoint(&opt_bytes[..])?;
    let mut p2 = EncoderParams::read_checkpoint(&enc_bytes[..])?;
    let mut s2 = RandomStream::at_position(s.seed(), s.position());
    let mut mismatches = 0.0;
    for _ in 0..5 {
        let b = sample_batch(&mut s, &x, 8, 0.1)?;
        step_on_batch(&mut opt, &mut p, &b, &cfg)?;
        let b2 = sample_batch(&mut s2, &x, 8, 0.1)?;
        step_on_batch(&mut opt2, &mut p2, &b2, &cfg)?;
        if p != p2 || opt != opt2 {
            mismatches += 1.0;
        }
    }
    Ok(mismatches)
}

fn tau_csv_round_trip(root: &RandomStream) -> Result<f64> {
    let mut s = root.substream("csv");
    let taus: Vec<f64> = (0..50).map(|_| s.uniform(0.05, 6.0)).collect();
    let sv: Vec<f64> = (0..50).map(|_| s.uniform(1e-3, 2.0)).collect();
    let labels: Vec<usize> = (0..50).map(|i| i % 7).collect();
    let dir = std::env::temp_dir().join(format!("rgcl-verify-{}-{}", std::process::id(), s.next_u64()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = dir.join("tau.csv");
    export_tau_csv(&taus, &sv, &labels, &path)?;
    let rows = read_tau_csv(&path);
    let _ = std::fs::remove_dir_all(&dir);
    let rows = rows?;
    let bad = rows
        .iter()
        .enumerate()
        .filter(|(i, r)| {
            r.index != *i || r.label != labels[*i] || r.tau.to_bits() != taus[*i].to_bits() || r.s.to_bits() != sv[*i].to_bits()
        })
        .count();
    Ok(bad as f64 + (rows.len() as f64 - 50.0).abs())
}
