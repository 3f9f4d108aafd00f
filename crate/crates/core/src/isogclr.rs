//! The iSogCLR optimizer.
//!
//! Each step draws a batch, and for every batch anchor:
//!
//! 1. computes the batch estimate `g_i(w_t, τ_i; B_i)`,
//! 2. updates the moving average `s_i ← (1 − β₀) s_i + β₀ g_i`,
//! 3. forms `G(τ_i) = scale/n · [τ_i ∂_τ g_i / s_i + log s_i + ρ]`,
//! 4. updates `u_i ← (1 − β₁) u_i + β₁ G(τ_i)`,
//! 5. sets `τ_i ← Π_[τ₀, τ_max](τ_i − η_τ u_i)`.
//!
//! Then `G(w) = (1/B) Σ_i (τ_i/s_i) ∇_w g_i` is formed with the temperatures
//! from before step 5 and the updated `s_i`, followed by
//! `v ← (1 − β₁) v + β₁ G(w)` and `w ← w − η_w v` (or an Adam-style step).
//!
//! The first update of an anchor sets `s_i := g_i`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::datasynth::augment;
use crate::encoder::{encode, encode_backward, read_f64, read_u32, read_u64, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, RandomStream};
use crate::rgcl::{
    accumulate_embedding_grad, combine_roles, g_tau_derivative, term_stats, unimodal_directions,
    PairedInputs, RgclConfig, RoleGradients, TermLayout, TermStats, UnimodalViews,
};

/// Adam second-moment decay.
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorState {
    /// Moving-average estimate of `g_i`.
    pub s: f64,
    /// Estimate for the swapped term when anchors are symmetrized.
    pub s_swapped: f64,
    /// Temperature momentum.
    pub u: f64,
    pub tau: f64,
    pub initialized: bool,
}

impl AnchorState {
    pub fn new(tau_init: f64) -> Self {
        Self {
            s: 0.0,
            s_swapped: 0.0,
            u: 0.0,
            tau: tau_init,
            initialized: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BimodalAnchorState {
    pub s_v: f64,
    pub u_v: f64,
    pub tau_v: f64,
    pub s_t: f64,
    pub u_t: f64,
    pub tau_t: f64,
    pub initialized: bool,
}

impl BimodalAnchorState {
    pub fn new(tau_init: f64) -> Self {
        Self {
            s_v: 0.0,
            u_v: 0.0,
            tau_v: tau_init,
            s_t: 0.0,
            u_t: 0.0,
            tau_t: tau_init,
            initialized: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerMode {
    /// Momentum updates for both `w` and `τ`.
    Momentum,
    /// Adam-style update for `w`; `τ` keeps the momentum update.
    Adam,
    /// Momentum update for `w`, temperatures frozen at `τ_init`.
    FixedTau,
}

impl OptimizerMode {
    fn code(self) -> u32 {
        match self {
            OptimizerMode::Momentum => 0,
            OptimizerMode::Adam => 1,
            OptimizerMode::FixedTau => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(OptimizerMode::Momentum),
            1 => Ok(OptimizerMode::Adam),
            2 => Ok(OptimizerMode::FixedTau),
            _ => Err(Error::Malformed {
                what: "optimizer checkpoint",
                detail: format!("unknown mode {c}"),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<A = AnchorState> {
    /// Parameter momentum; for two towers, image parameters then text.
    pub v: Vec<f64>,
    /// Adam second moment, present only in [`OptimizerMode::Adam`].
    pub second_moment: Option<Vec<f64>>,
    pub anchors: Vec<A>,
    pub step: u64,
    pub mode: OptimizerMode,
}

impl OptimizerState<AnchorState> {
    pub fn new_unimodal(n: usize, num_params: usize, cfg: &RgclConfig, mode: OptimizerMode) -> Self {
        Self::with_anchors(vec![AnchorState::new(cfg.tau_init); n], num_params, mode)
    }

    pub fn taus(&self) -> Vec<f64> {
        self.anchors.iter().map(|a| a.tau).collect()
    }
}

impl OptimizerState<BimodalAnchorState> {
    pub fn new_bimodal(n: usize, num_params: usize, cfg: &RgclConfig, mode: OptimizerMode) -> Self {
        Self::with_anchors(vec![BimodalAnchorState::new(cfg.tau_init); n], num_params, mode)
    }

    pub fn taus_v(&self) -> Vec<f64> {
        self.anchors.iter().map(|a| a.tau_v).collect()
    }

    pub fn taus_t(&self) -> Vec<f64> {
        self.anchors.iter().map(|a| a.tau_t).collect()
    }
}

impl<A> OptimizerState<A> {
    fn with_anchors(anchors: Vec<A>, num_params: usize, mode: OptimizerMode) -> Self {
        Self {
            v: vec![0.0; num_params],
            second_moment: (mode == OptimizerMode::Adam).then(|| vec![0.0; num_params]),
            anchors,
            step: 0,
            mode,
        }
    }

    pub fn n(&self) -> usize {
        self.anchors.len()
    }

    /// Momentum and the `w` update for one step, given the flat gradient.
    fn apply_weight_update(&mut self, flat: &mut [f64], grad: &[f64], cfg: &RgclConfig) {
        let b1 = cfg.beta1;
        for (v, g) in self.v.iter_mut().zip(grad) {
            *v = (1.0 - b1) * *v + b1 * g;
        }
        match (&mut self.second_moment, self.mode) {
            (Some(m2), OptimizerMode::Adam) => {
                let t = (self.step + 1) as i32;
                let c1 = 1.0 - (1.0 - b1).powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for ((w, v), (m, g)) in flat.iter_mut().zip(&self.v).zip(m2.iter_mut().zip(grad)) {
                    *m = ADAM_BETA2 * *m + (1.0 - ADAM_BETA2) * g * g;
                    let mhat = v / c1;
                    let vhat = *m / c2;
                    *w -= cfg.eta_w * mhat / (vhat.sqrt() + ADAM_EPSILON);
                }
            }
            _ => {
                for (w, v) in flat.iter_mut().zip(&self.v) {
                    *w -= cfg.eta_w * v;
                }
            }
        }
    }

    fn tau_step_size(&self, cfg: &RgclConfig) -> f64 {
        if self.mode == OptimizerMode::FixedTau {
            0.0
        } else {
            cfg.eta_tau
        }
    }
}

/// Clamp to `[τ₀, τ₀ + 2/ρ]`.
pub fn project_tau(tau: f64, cfg: &RgclConfig) -> f64 {
    tau.clamp(cfg.tau0, cfg.tau_max())
}

fn maybe_project(tau: f64, cfg: &RgclConfig) -> f64 {
    if cfg.project_tau {
        project_tau(tau, cfg)
    } else {
        tau
    }
}

/// Moving-average update; an anchor's first update takes `g` as is.
pub fn update_s(state: &AnchorState, g_batch: f64, beta0: f64) -> f64 {
    moving_average(state.s, state.initialized, g_batch, beta0)
}

fn moving_average(s: f64, initialized: bool, g: f64, beta0: f64) -> f64 {
    if initialized {
        (1.0 - beta0) * s + beta0 * g
    } else {
        g
    }
}

/// `scale/n · [τ ∂_τ g(h_batch) / s + log s + ρ]` from an anchor's current state.
pub fn grad_tau_estimator(
    state: &AnchorState,
    anchor_index: usize,
    h_batch: &[f64],
    rho: f64,
    n: usize,
    tau_grad_scale: f64,
) -> Result<f64> {
    if !state.initialized || state.s.is_nan() || state.s <= 0.0 {
        return Err(Error::Uninitialized {
            index: anchor_index,
        });
    }
    let dg = g_tau_derivative(h_batch, state.tau);
    Ok(tau_grad_scale * tau_estimate(state.tau, &[(dg, state.s)], rho, n))
}

/// `(1/n)[(1/D) Σ_d (τ dg_d / s_d + log s_d) + ρ]`
fn tau_estimate(tau: f64, terms: &[(f64, f64)], rho: f64, n: usize) -> f64 {
    let d = terms.len() as f64;
    let inner: f64 = terms
        .iter()
        .map(|&(dg, s)| (tau * dg / s + s.ln()) / d)
        .sum();
    (inner + rho) / n as f64
}

/// `G(w) = (1/B) Σ_i Σ_d (1/D) exp(h_ij/τ_i) ∇_w h_ij / (m s_id)` for a
/// stacked batch. `s_values[d][i]` is the estimate for direction `d`.
pub fn grad_w_estimator(
    params: &EncoderParams,
    stacked_inputs: &DenseMatrix,
    embeddings: &DenseMatrix,
    directions: &[TermLayout],
    taus: &[f64],
    s_values: &[Vec<f64>],
) -> Result<EncoderParams> {
    if directions.len() != s_values.len() {
        return Err(Error::LengthMismatch {
            left: directions.len(),
            right: s_values.len(),
        });
    }
    let parts = direction_grads(embeddings, directions, &[taus], s_values);
    encode_backward(params, stacked_inputs, &combine_roles(&parts))
}

fn direction_grads(
    emb: &DenseMatrix,
    directions: &[TermLayout],
    taus: &[&[f64]],
    s_values: &[Vec<f64>],
) -> Vec<RoleGradients> {
    let d = directions.len() as f64;
    let share = if taus.len() == 1 { d } else { 1.0 };
    directions
        .iter()
        .zip(s_values)
        .enumerate()
        .map(|(k, (&layout, s))| {
            let b = layout.n() as f64;
            let m = layout.num_negatives() as f64;
            let coeffs: Vec<f64> = s.iter().map(|sv| 1.0 / (share * m * sv * b)).collect();
            let t = taus[if taus.len() == 1 { 0 } else { k }];
            accumulate_embedding_grad(emb, layout, t, &coeffs)
        })
        .collect()
}

/// A sampled batch with two augmented views per index.
#[derive(Clone, Debug, PartialEq)]
pub struct UnimodalBatch {
    pub indices: Vec<usize>,
    pub views: UnimodalViews,
}

/// Draws `batch_size` distinct indices, then two augmentations of each.
/// The negatives of batch anchor `i` are both views of every other member,
/// `2(B − 1)` in total.
pub fn sample_batch(
    stream: &mut RandomStream,
    inputs: &DenseMatrix,
    batch_size: usize,
    aug_strength: f64,
) -> Result<UnimodalBatch> {
    let n = inputs.rows();
    if batch_size < 2 || batch_size > n {
        return Err(Error::InvalidBatch {
            batch: batch_size,
            n,
        });
    }
    let indices = stream.sample_without_replacement(n, batch_size);
    batch_from_indices(indices, inputs, aug_strength, stream)
}

/// Augments the given rows twice each, view A then view A' per row.
pub fn batch_from_indices(
    indices: Vec<usize>,
    inputs: &DenseMatrix,
    aug_strength: f64,
    stream: &mut RandomStream,
) -> Result<UnimodalBatch> {
    let n = inputs.rows();
    if indices.len() < 2 || indices.iter().any(|&i| i >= n) {
        return Err(Error::InvalidBatch {
            batch: indices.len(),
            n,
        });
    }
    let d = inputs.cols();
    let mut a = DenseMatrix::zeros(indices.len(), d);
    let mut b = DenseMatrix::zeros(indices.len(), d);
    for (r, &i) in indices.iter().enumerate() {
        a.row_mut(r)
            .copy_from_slice(&augment(inputs.row(i), aug_strength, stream));
        b.row_mut(r)
            .copy_from_slice(&augment(inputs.row(i), aug_strength, stream));
    }
    Ok(UnimodalBatch {
        indices,
        views: UnimodalViews::new(a, b)?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub indices: Vec<usize>,
    pub pairs: PairedInputs,
}

/// Draws `batch_size` distinct pairs; no augmentation.
pub fn sample_pair_batch(
    stream: &mut RandomStream,
    data: &PairedInputs,
    batch_size: usize,
) -> Result<PairBatch> {
    let n = data.len();
    if batch_size < 2 || batch_size > n {
        return Err(Error::InvalidBatch {
            batch: batch_size,
            n,
        });
    }
    pair_batch_from_indices(stream.sample_without_replacement(n, batch_size), data)
}

pub fn pair_batch_from_indices(indices: Vec<usize>, data: &PairedInputs) -> Result<PairBatch> {
    let n = data.len();
    if indices.len() < 2 || indices.iter().any(|&i| i >= n) {
        return Err(Error::InvalidBatch {
            batch: indices.len(),
            n,
        });
    }
    Ok(PairBatch {
        pairs: PairedInputs::new(
            data.images.select_rows(&indices),
            data.texts.select_rows(&indices),
        )?,
        indices,
    })
}

/// What one step computed, for diagnostics and oracle comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub indices: Vec<usize>,
    /// Flat `G(w)` before momentum.
    pub grad_w: Vec<f64>,
    /// `G(τ_i)` per batch position (bimodal: image side).
    pub grad_tau: Vec<f64>,
    /// Text-side `G(τ_t,i)`; empty for unimodal steps.
    pub grad_tau_text: Vec<f64>,
    pub min_g: f64,
    pub min_s: f64,
    pub min_tau: f64,
    pub max_tau: f64,
}

fn min_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(f64::INFINITY, f64::min)
}

fn max_of(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

/// One iSogCLR step on a given unimodal batch.
pub fn step_on_batch(
    opt: &mut OptimizerState<AnchorState>,
    params: &mut EncoderParams,
    batch: &UnimodalBatch,
    cfg: &RgclConfig,
) -> Result<StepReport> {
    let n = opt.n();
    let b = batch.indices.len();
    if b < 2 || batch.views.len() != b {
        return Err(Error::InvalidBatch { batch: b, n });
    }
    if opt.v.len() != params.num_params() {
        return Err(Error::ShapeMismatch {
            context: "optimizer momentum",
            expected: params.num_params().to_string(),
            got: opt.v.len().to_string(),
        });
    }
    let inputs = batch.views.stacked();
    let emb = encode(params, &inputs)?.embeddings;
    let directions = unimodal_directions(b, cfg);
    let old_taus: Vec<f64> = batch.indices.iter().map(|&i| opt.anchors[i].tau).collect();
    let stats: Vec<Vec<TermStats>> = directions
        .iter()
        .map(|&l| term_stats(&emb, l, &old_taus))
        .collect::<Result<_>>()?;

    let scale = cfg.tau_scale(n);
    let eta_tau = opt.tau_step_size(cfg);
    let mut s_values = vec![vec![0.0; b]; directions.len()];
    let mut grad_tau = Vec::with_capacity(b);
    let mut min_g = f64::INFINITY;
    for (pos, &idx) in batch.indices.iter().enumerate() {
        let st = &mut opt.anchors[idx];
        let mut terms = Vec::with_capacity(directions.len());
        for (d, dir_stats) in stats.iter().enumerate() {
            let g = dir_stats[pos].g + cfg.log_epsilon;
            min_g = min_g.min(g);
            let slot = if d == 0 { &mut st.s } else { &mut st.s_swapped };
            *slot = moving_average(*slot, st.initialized, g, cfg.beta0);
            s_values[d][pos] = *slot;
            terms.push((dir_stats[pos].dg_dtau, *slot));
        }
        st.initialized = true;
        let g_tau = scale * tau_estimate(st.tau, &terms, cfg.rho, n);
        st.u = (1.0 - cfg.beta1) * st.u + cfg.beta1 * g_tau;
        st.tau = maybe_project(st.tau - eta_tau * st.u, cfg);
        grad_tau.push(g_tau);
    }

    let parts = direction_grads(&emb, &directions, &[&old_taus], &s_values);
    let grad = encode_backward(params, &inputs, &combine_roles(&parts))?.to_flat();
    let mut flat = params.to_flat();
    opt.apply_weight_update(&mut flat, &grad, cfg);
    *params = EncoderParams::from_flat(params.shape(), &flat)?;
    opt.step += 1;

    let batch_states = batch.indices.iter().map(|&i| opt.anchors[i]);
    Ok(StepReport {
        indices: batch.indices.clone(),
        grad_w: grad,
        grad_tau,
        grad_tau_text: Vec::new(),
        min_g,
        min_s: min_of(s_values.iter().flatten().copied()),
        min_tau: min_of(batch_states.clone().map(|s| s.tau)),
        max_tau: max_of(batch_states.map(|s| s.tau)),
    })
}

/// Samples a batch and runs one step.
pub fn step_unimodal(
    opt: &mut OptimizerState<AnchorState>,
    params: &mut EncoderParams,
    inputs: &DenseMatrix,
    cfg: &RgclConfig,
    batch_size: usize,
    aug_strength: f64,
    stream: &mut RandomStream,
) -> Result<StepReport> {
    if inputs.rows() != opt.n() {
        return Err(Error::LengthMismatch {
            left: inputs.rows(),
            right: opt.n(),
        });
    }
    let batch = sample_batch(stream, inputs, batch_size, aug_strength)?;
    step_on_batch(opt, params, &batch, cfg)
}

/// SogCLR: the same step with temperatures held at `τ_init`.
pub fn step_sogclr_baseline(
    opt: &mut OptimizerState<AnchorState>,
    params: &mut EncoderParams,
    inputs: &DenseMatrix,
    cfg: &RgclConfig,
    batch_size: usize,
    aug_strength: f64,
    stream: &mut RandomStream,
) -> Result<StepReport> {
    if opt.mode != OptimizerMode::FixedTau {
        return Err(Error::config("baseline steps need an optimizer in fixed-tau mode"));
    }
    step_unimodal(opt, params, inputs, cfg, batch_size, aug_strength, stream)
}

/// One step of the two-tower optimizer on a given batch of pairs.
pub fn step_bimodal_on_batch(
    opt: &mut OptimizerState<BimodalAnchorState>,
    params_img: &mut EncoderParams,
    params_txt: &mut EncoderParams,
    batch: &PairBatch,
    cfg: &RgclConfig,
) -> Result<StepReport> {
    let n = opt.n();
    let b = batch.indices.len();
    if b < 2 || batch.pairs.len() != b {
        return Err(Error::InvalidBatch { batch: b, n });
    }
    let n_img = params_img.num_params();
    if opt.v.len() != n_img + params_txt.num_params() {
        return Err(Error::ShapeMismatch {
            context: "optimizer momentum",
            expected: (n_img + params_txt.num_params()).to_string(),
            got: opt.v.len().to_string(),
        });
    }
    let emb = crate::rgcl::bimodal_embeddings(params_img, params_txt, &batch.pairs)?;
    let img_dir = TermLayout::ImageToText { n: b };
    let txt_dir = TermLayout::TextToImage { n: b };
    let old_v: Vec<f64> = batch.indices.iter().map(|&i| opt.anchors[i].tau_v).collect();
    let old_t: Vec<f64> = batch.indices.iter().map(|&i| opt.anchors[i].tau_t).collect();
    let sv = term_stats(&emb, img_dir, &old_v)?;
    let st = term_stats(&emb, txt_dir, &old_t)?;

    let scale = cfg.tau_scale(n);
    let eta_tau = opt.tau_step_size(cfg);
    let mut s_img = vec![0.0; b];
    let mut s_txt = vec![0.0; b];
    let mut grad_tau = Vec::with_capacity(b);
    let mut grad_tau_text = Vec::with_capacity(b);
    let mut min_g = f64::INFINITY;
    for (pos, &idx) in batch.indices.iter().enumerate() {
        let a = &mut opt.anchors[idx];
        let gv = sv[pos].g + cfg.log_epsilon;
        let gt = st[pos].g + cfg.log_epsilon;
        min_g = min_g.min(gv).min(gt);
        a.s_v = moving_average(a.s_v, a.initialized, gv, cfg.beta0);
        a.s_t = moving_average(a.s_t, a.initialized, gt, cfg.beta0);
        a.initialized = true;
        s_img[pos] = a.s_v;
        s_txt[pos] = a.s_t;
        let g_v = scale * tau_estimate(a.tau_v, &[(sv[pos].dg_dtau, a.s_v)], cfg.rho, n);
        let g_t = scale * tau_estimate(a.tau_t, &[(st[pos].dg_dtau, a.s_t)], cfg.rho, n);
        a.u_v = (1.0 - cfg.beta1) * a.u_v + cfg.beta1 * g_v;
        a.u_t = (1.0 - cfg.beta1) * a.u_t + cfg.beta1 * g_t;
        a.tau_v = maybe_project(a.tau_v - eta_tau * a.u_v, cfg);
        a.tau_t = maybe_project(a.tau_t - eta_tau * a.u_t, cfg);
        grad_tau.push(g_v);
        grad_tau_text.push(g_t);
    }

    let parts = direction_grads(
        &emb,
        &[img_dir, txt_dir],
        &[&old_v, &old_t],
        &[s_img.clone(), s_txt.clone()],
    );
    let grad_emb = combine_roles(&parts);
    let (gi, gt) = grad_emb.split_rows(b);
    let mut grad = encode_backward(params_img, &batch.pairs.images, &gi)?.to_flat();
    grad.extend(encode_backward(params_txt, &batch.pairs.texts, &gt)?.to_flat());

    let mut flat = params_img.to_flat();
    flat.extend(params_txt.to_flat());
    opt.apply_weight_update(&mut flat, &grad, cfg);
    *params_img = EncoderParams::from_flat(params_img.shape(), &flat[..n_img])?;
    *params_txt = EncoderParams::from_flat(params_txt.shape(), &flat[n_img..])?;
    opt.step += 1;

    let states: Vec<BimodalAnchorState> = batch.indices.iter().map(|&i| opt.anchors[i]).collect();
    Ok(StepReport {
        indices: batch.indices.clone(),
        grad_w: grad,
        grad_tau,
        grad_tau_text,
        min_g,
        min_s: min_of(s_img.iter().chain(&s_txt).copied()),
        min_tau: min_of(states.iter().flat_map(|s| [s.tau_v, s.tau_t])),
        max_tau: max_of(states.iter().flat_map(|s| [s.tau_v, s.tau_t])),
    })
}

pub fn step_bimodal(
    opt: &mut OptimizerState<BimodalAnchorState>,
    params_img: &mut EncoderParams,
    params_txt: &mut EncoderParams,
    data: &PairedInputs,
    cfg: &RgclConfig,
    batch_size: usize,
    stream: &mut RandomStream,
) -> Result<StepReport> {
    if data.len() != opt.n() {
        return Err(Error::LengthMismatch {
            left: data.len(),
            right: opt.n(),
        });
    }
    let batch = sample_pair_batch(stream, data, batch_size)?;
    step_bimodal_on_batch(opt, params_img, params_txt, &batch, cfg)
}

/// Per-anchor columns stored in an optimizer checkpoint.
pub trait AnchorRecord: Sized + Copy {
    const KIND: u32;
    const COLUMNS: usize;
    fn values(&self) -> Vec<f64>;
    fn initialized(&self) -> bool;
    fn from_values(values: &[f64], initialized: bool) -> Self;
}

impl AnchorRecord for AnchorState {
    const KIND: u32 = 0;
    const COLUMNS: usize = 4;
    fn values(&self) -> Vec<f64> {
        vec![self.s, self.s_swapped, self.u, self.tau]
    }
    fn initialized(&self) -> bool {
        self.initialized
    }
    fn from_values(v: &[f64], initialized: bool) -> Self {
        Self {
            s: v[0],
            s_swapped: v[1],
            u: v[2],
            tau: v[3],
            initialized,
        }
    }
}

impl AnchorRecord for BimodalAnchorState {
    const KIND: u32 = 1;
    const COLUMNS: usize = 6;
    fn values(&self) -> Vec<f64> {
        vec![self.s_v, self.u_v, self.tau_v, self.s_t, self.u_t, self.tau_t]
    }
    fn initialized(&self) -> bool {
        self.initialized
    }
    fn from_values(v: &[f64], initialized: bool) -> Self {
        Self {
            s_v: v[0],
            u_v: v[1],
            tau_v: v[2],
            s_t: v[3],
            u_t: v[4],
            tau_t: v[5],
            initialized,
        }
    }
}

const OPTIMIZER_MAGIC: &[u8; 8] = b"RGCLOPT1";

impl<A: AnchorRecord> OptimizerState<A> {
    /// Writes the binary optimizer checkpoint.
    ///
    /// Layout, little endian:
    ///
    /// ```text
    /// magic     [u8; 8] = b"RGCLOPT1"
    /// mode      u32     (0 momentum, 1 adam, 2 fixed-tau)
    /// kind      u32     (0 unimodal, 1 bimodal)
    /// step      u64
    /// n         u64     anchors
    /// p         u64     parameters
    /// v         [f64; p]
    /// m2        [f64; p]   only when mode = adam
    /// columns   [f64; n] × C, column-major:
    ///             unimodal C = 4: s, s_swapped, u, tau
    ///             bimodal  C = 6: s_v, u_v, tau_v, s_t, u_t, tau_t
    /// init      [u8; n]   1 if the anchor has been updated
    /// ```
    pub fn write_checkpoint(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(OPTIMIZER_MAGIC)?;
        w.write_all(&self.mode.code().to_le_bytes())?;
        w.write_all(&A::KIND.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.anchors.len() as u64).to_le_bytes())?;
        w.write_all(&(self.v.len() as u64).to_le_bytes())?;
        for x in &self.v {
            w.write_all(&x.to_le_bytes())?;
        }
        if let Some(m2) = &self.second_moment {
            for x in m2 {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        let rows: Vec<Vec<f64>> = self.anchors.iter().map(A::values).collect();
        for c in 0..A::COLUMNS {
            for r in &rows {
                w.write_all(&r[c].to_le_bytes())?;
            }
        }
        let flags: Vec<u8> = self.anchors.iter().map(|a| u8::from(a.initialized())).collect();
        w.write_all(&flags)
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let bad = |detail: String| Error::Malformed {
            what: "optimizer checkpoint",
            detail,
        };
        let io = |e: std::io::Error| bad(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != OPTIMIZER_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mode = OptimizerMode::from_code(read_u32(&mut r).map_err(io)?)?;
        let kind = read_u32(&mut r).map_err(io)?;
        if kind != A::KIND {
            return Err(bad(format!("anchor kind {kind}, expected {}", A::KIND)));
        }
        let step = read_u64(&mut r).map_err(io)?;
        let n = read_u64(&mut r).map_err(io)? as usize;
        let p = read_u64(&mut r).map_err(io)? as usize;
        let mut read_vec = |len: usize| -> Result<Vec<f64>> {
            (0..len).map(|_| read_f64(&mut r).map_err(io)).collect()
        };
        let v = read_vec(p)?;
        let second_moment = if mode == OptimizerMode::Adam {
            Some(read_vec(p)?)
        } else {
            None
        };
        let columns: Vec<Vec<f64>> = (0..A::COLUMNS).map(|_| read_vec(n)).collect::<Result<_>>()?;
        let mut flags = vec![0u8; n];
        r.read_exact(&mut flags).map_err(io)?;
        let anchors = (0..n)
            .map(|i| {
                let vals: Vec<f64> = columns.iter().map(|c| c[i]).collect();
                A::from_values(&vals, flags[i] != 0)
            })
            .collect();
        Ok(Self {
            v,
            second_moment,
            anchors,
            step,
            mode,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&bytes[..])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Activation, EncoderShape};
    use crate::rgcl::{exact_grad_tau, objective_unimodal_with_grad, term_hardness};

    fn cfg() -> RgclConfig {
        RgclConfig {
            rho: 0.3,
            tau0: 0.05,
            tau_init: 0.5,
            beta0: 0.8,
            beta1: 0.5,
            eta_w: 0.1,
            eta_tau: 0.1,
            ..RgclConfig::default()
        }
    }

    fn setup(n: usize, seed: u64) -> (EncoderParams, DenseMatrix, RandomStream) {
        let root = RandomStream::new(seed);
        let shape = EncoderShape { input: 4, hidden: 6, embed: 3, activation: Activation::Tanh };
        let p = EncoderParams::init(shape, &root);
        let mut s = root.substream("data");
        let x = DenseMatrix::from_vec(n, 4, s.draw_gaussian(4 * n)).unwrap();
        (p, x, root.substream("train"))
    }

    #[test]
    fn update_s_examples() {
        let mut st = AnchorState::new(0.5);
        assert_eq!(update_s(&st, 3.0, 0.5), 3.0);
        st.initialized = true;
        st.s = 1.0;
        assert_eq!(update_s(&st, 3.0, 0.5), 2.0);
        assert_eq!(update_s(&st, 3.0, 1.0), 3.0);
        // geometric approach to a constant target
        let mut s = 1.0;
        for k in 1..=5 {
            st.s = s;
            s = update_s(&st, 2.0, 0.3);
            assert!(((2.0 - s) - 0.7f64.powi(k)).abs() < 1e-14);
        }
    }

    #[test]
    fn project_tau_examples() {
        let c = RgclConfig { tau0: 0.005, ..cfg() };
        assert_eq!(project_tau(0.001, &c), 0.005);
        assert_eq!(project_tau(0.3, &c), 0.3);
        let c = RgclConfig { rho: 0.3, tau0: 0.05, ..cfg() };
        assert!((project_tau(1e6, &c) - 6.716_666_666_666_667).abs() < 1e-12);
    }

    #[test]
    fn grad_tau_estimator_examples() {
        let c = cfg();
        let mut st = AnchorState::new(0.4);
        assert!(matches!(
            grad_tau_estimator(&st, 3, &[0.1, 0.2], c.rho, 10, 1.0),
            Err(Error::Uninitialized { index: 3 })
        ));
        let h = [-0.3; 6];
        st.initialized = true;
        st.s = (-0.3f64 / 0.4).exp();
        let g = grad_tau_estimator(&st, 0, &h, c.rho, 10, 1.0).unwrap();
        assert!((g - c.rho / 10.0).abs() < 1e-15);
        let h = [0.1, -0.5, -1.2, 0.3];
        st.s = crate::rgcl::g_value(&h, 0.4, 0.0);
        let exact = exact_grad_tau(&h, 0.4, c.rho, 10);
        let est = grad_tau_estimator(&st, 0, &h, c.rho, 10, 1.0).unwrap();
        assert!((exact - est).abs() <= 1e-12);
        let scaled = grad_tau_estimator(&st, 0, &h, c.rho, 10, 10.0).unwrap();
        assert!((scaled - 10.0 * est).abs() < 1e-14);
    }

    #[test]
    fn batch_negative_sets() {
        let (_, x, mut s) = setup(6, 1);
        let b = sample_batch(&mut s, &x, 6, 0.1).unwrap();
        let mut sorted = b.indices.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..6).collect::<Vec<_>>());
        let l = TermLayout::Unimodal { n: 6 };
        for i in 0..6 {
            let negs: Vec<usize> = l.negatives(i).collect();
            assert_eq!(negs.len(), 10);
            assert!(!negs.contains(&l.anchor_row(i)) && !negs.contains(&l.positive_row(i)));
        }
        assert!(matches!(sample_batch(&mut s, &x, 7, 0.1), Err(Error::InvalidBatch { .. })));
        assert!(sample_batch(&mut s, &x, 1, 0.1).is_err());
    }

    #[test]
    fn batch_sampling_is_deterministic() {
        let (_, x, s) = setup(20, 2);
        let mut a = s.clone();
        let mut b = s;
        for _ in 0..5 {
            assert_eq!(sample_batch(&mut a, &x, 4, 0.1).unwrap(), sample_batch(&mut b, &x, 4, 0.1).unwrap());
        }
    }

    #[test]
    fn untouched_anchors_keep_their_state() {
        let c = cfg();
        let (mut p, x, mut s) = setup(12, 3);
        let mut opt = OptimizerState::new_unimodal(12, p.num_params(), &c, OptimizerMode::Momentum);
        let before = opt.anchors.clone();
        let rep = step_unimodal(&mut opt, &mut p, &x, &c, 4, 0.1, &mut s).unwrap();
        for i in 0..12 {
            if rep.indices.contains(&i) {
                assert!(opt.anchors[i].initialized);
            } else {
                assert_eq!(opt.anchors[i], before[i]);
            }
        }
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn zero_step_sizes_freeze_params_and_taus() {
        let c = RgclConfig { eta_w: 0.0, eta_tau: 0.0, ..cfg() };
        let (mut p, x, mut s) = setup(8, 4);
        let p0 = p.clone();
        let mut opt = OptimizerState::new_unimodal(8, p.num_params(), &c, OptimizerMode::Momentum);
        for _ in 0..3 {
            step_unimodal(&mut opt, &mut p, &x, &c, 4, 0.1, &mut s).unwrap();
        }
        assert_eq!(p, p0);
        assert!(opt.anchors.iter().all(|a| a.tau == c.tau_init));
    }

    #[test]
    fn full_batch_degenerates_to_exact_gradient_descent() {
        let c = RgclConfig { beta0: 1.0, beta1: 1.0, tau_grad_scale: Some(1.0), ..cfg() };
        let (mut p, x, mut s) = setup(6, 5);
        let mut opt = OptimizerState::new_unimodal(6, p.num_params(), &c, OptimizerMode::Momentum);
        for _ in 0..3 {
            let batch = sample_batch(&mut s, &x, 6, 0.2).unwrap();
            let taus: Vec<f64> = batch.indices.iter().map(|&i| opt.anchors[i].tau).collect();
            let exact = objective_unimodal_with_grad(&p, &batch.views, &taus, &c).unwrap();
            let w_before = p.to_flat();
            let rep = step_on_batch(&mut opt, &mut p, &batch, &c).unwrap();
            let ge = exact.grad_params.to_flat();
            let err: f64 = rep.grad_w.iter().zip(&ge).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale: f64 = ge.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(err / scale <= 1e-10);
            for (a, b) in rep.grad_tau.iter().zip(&exact.grad_tau) {
                assert!((a - b).abs() <= 1e-10 * b.abs().max(1e-12));
            }
            // w_{t+1} = w_t − η ∇F
            for ((w1, w0), g) in p.to_flat().iter().zip(&w_before).zip(&ge) {
                assert!((w1 - (w0 - c.eta_w * g)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_anchors_contribute_identically() {
        // two copies of the same input with zero augmentation
        let c = cfg();
        let (p, _, _) = setup(4, 6);
        let x = DenseMatrix::from_rows(&[
            vec![0.3, -0.2, 1.0, 0.5],
            vec![0.3, -0.2, 1.0, 0.5],
            vec![-1.0, 0.4, 0.2, 0.0],
        ])
        .unwrap();
        let views = UnimodalViews::new(x.clone(), x.clone()).unwrap();
        let emb = encode(&p, &views.stacked()).unwrap().embeddings;
        let l = TermLayout::Unimodal { n: 3 };
        let h0 = term_hardness(&emb, l, 0);
        let h1 = term_hardness(&emb, l, 1);
        let mut a = h0.values.clone();
        let mut b = h1.values.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        let _ = c;
    }

    #[test]
    fn baseline_requires_fixed_tau_mode_and_keeps_tau() {
        let c = cfg();
        let (mut p, x, mut s) = setup(10, 7);
        let mut opt = OptimizerState::new_unimodal(10, p.num_params(), &c, OptimizerMode::Momentum);
        assert!(step_sogclr_baseline(&mut opt, &mut p, &x, &c, 4, 0.1, &mut s).is_err());
        let mut opt = OptimizerState::new_unimodal(10, p.num_params(), &c, OptimizerMode::FixedTau);
        for _ in 0..5 {
            step_sogclr_baseline(&mut opt, &mut p, &x, &c, 4, 0.1, &mut s).unwrap();
        }
        assert!(opt.anchors.iter().all(|a| a.tau == c.tau_init));
    }

    #[test]
    fn adam_mode_moves_parameters() {
        let c = cfg();
        let (mut p, x, mut s) = setup(10, 8);
        let p0 = p.clone();
        let mut opt = OptimizerState::new_unimodal(10, p.num_params(), &c, OptimizerMode::Adam);
        step_unimodal(&mut opt, &mut p, &x, &c, 5, 0.1, &mut s).unwrap();
        assert_ne!(p, p0);
        // first Adam step moves each coordinate by at most η (|m̂/√v̂| ≤ 1)
        for (a, b) in p.to_flat().iter().zip(p0.to_flat()) {
            assert!((a - b).abs() <= c.eta_w * (1.0 + 1e-9));
        }
        assert!(opt.second_moment.is_some());
    }

    #[test]
    fn checkpoint_round_trip_and_resume() {
        let c = cfg();
        let (mut p, x, mut s) = setup(10, 9);
        let mut opt = OptimizerState::new_unimodal(10, p.num_params(), &c, OptimizerMode::Adam);
        for _ in 0..3 {
            step_unimodal(&mut opt, &mut p, &x, &c, 4, 0.1, &mut s).unwrap();
        }
        let mut buf = Vec::new();
        opt.write_checkpoint(&mut buf).unwrap();
        let mut resumed = OptimizerState::<AnchorState>::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(resumed, opt);
        assert!(OptimizerState::<BimodalAnchorState>::read_checkpoint(&buf[..]).is_err());

        let mut p2 = p.clone();
        let mut s2 = RandomStream::at_position(s.seed(), s.position());
        for _ in 0..3 {
            step_unimodal(&mut opt, &mut p, &x, &c, 4, 0.1, &mut s).unwrap();
            step_unimodal(&mut resumed, &mut p2, &x, &c, 4, 0.1, &mut s2).unwrap();
        }
        assert_eq!(p, p2);
        assert_eq!(opt, resumed);
    }
}
