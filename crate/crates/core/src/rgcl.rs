//! Loss mathematics for the robust global contrastive loss.
//!
//! For an anchor with hardness vector `h` over its `m` negatives:
//!
//! - primal: `max_{p ∈ Δ_m, KL(p,1/m) ≤ ρ}  Σ p_j h_j − τ₀ KL(p, 1/m)`
//! - dual:   `min_{τ ≥ τ₀}  τ log mean_j exp(h_j/τ) + (τ − τ₀) ρ`
//!
//! The dual summand with a per-anchor `τ` is what the objectives average.
//! Its inner maximizer is `p* = softmax(h/τ)`.

use std::ops::Deref;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode, encode_backward, EncoderParams};
use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, log_sum_exp, softmax_shifted, DenseMatrix};

/// Bound on `|h|` for unit-norm embeddings: a difference of two inner
/// products in `[-1, 1]`.
pub const HARDNESS_BOUND: f64 = 2.0;

const ANCHOR_BLOCK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RgclConfig {
    /// KL radius.
    pub rho: f64,
    /// Temperature floor.
    pub tau0: f64,
    pub tau_init: f64,
    /// Moving-average weight for `s`.
    pub beta0: f64,
    /// Momentum weight for `u` and `v`: `v ← (1 − β₁) v + β₁ G`.
    pub beta1: f64,
    pub eta_w: f64,
    pub eta_tau: f64,
    /// Multiplier on the temperature gradient estimator. `None` means `n`,
    /// which cancels the `1/n` in the gradient of the averaged objective.
    pub tau_grad_scale: Option<f64>,
    /// Added to `g` before taking its logarithm.
    pub log_epsilon: f64,
    /// Adds the swapped (positive-as-anchor) term for unimodal data.
    pub symmetrize: bool,
    #[doc(hidden)]
    #[serde(skip)]
    pub project_tau: bool,
}

impl Default for RgclConfig {
    fn default() -> Self {
        Self {
            rho: 0.3,
            tau0: 0.05,
            tau_init: 0.7,
            beta0: 0.9,
            beta1: 0.1,
            eta_w: 0.05,
            eta_tau: 0.05,
            tau_grad_scale: None,
            log_epsilon: 0.0,
            symmetrize: false,
            project_tau: true,
        }
    }
}

impl RgclConfig {
    /// `τ₀ + C/ρ`, the upper end of the temperature box.
    pub fn tau_max(&self) -> f64 {
        self.tau0 + HARDNESS_BOUND / self.rho
    }

    /// `exp(−C/τ_max)`. Reported for reference; it only bounds `g` for
    /// anchors sitting at `τ_max`.
    pub fn g_floor(&self) -> f64 {
        (-HARDNESS_BOUND / self.tau_max()).exp()
    }

    /// `exp(−C/τ₀)`: since `h ≥ −C` and `τ ≥ τ₀`, every `g` and every moving
    /// average of them stays above this.
    pub fn g_lower_bound(&self) -> f64 {
        (-HARDNESS_BOUND / self.tau0).exp()
    }

    pub fn tau_scale(&self, n: usize) -> f64 {
        self.tau_grad_scale.unwrap_or(n as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.rho,
            self.tau0,
            self.tau_init,
            self.beta0,
            self.beta1,
            self.eta_w,
            self.eta_tau,
            self.log_epsilon,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("non-finite hyperparameter"));
        }
        if self.rho <= 0.0 {
            return Err(Error::config(format!("rho must be > 0 (got {})", self.rho)));
        }
        if self.tau0 <= 0.0 {
            return Err(Error::config(format!("tau0 must be > 0 (got {})", self.tau0)));
        }
        if self.tau_init < self.tau0 || self.tau_init > self.tau_max() {
            return Err(Error::config(format!(
                "tau_init {} outside [{}, {}]",
                self.tau_init,
                self.tau0,
                self.tau_max()
            )));
        }
        for (name, b) in [("beta0", self.beta0), ("beta1", self.beta1)] {
            if !(b > 0.0 && b <= 1.0) {
                return Err(Error::config(format!("{name} must be in (0, 1] (got {b})")));
            }
        }
        if self.eta_w < 0.0 || self.eta_tau < 0.0 {
            return Err(Error::config("step sizes must be >= 0"));
        }
        if self.log_epsilon < 0.0 {
            return Err(Error::config("log_epsilon must be >= 0"));
        }
        if let Some(s) = self.tau_grad_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::config("tau_grad_scale must be > 0"));
            }
        }
        Ok(())
    }
}

/// Hardness scores of one anchor against its negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct HardnessVector {
    pub values: Vec<f64>,
    pub anchor: usize,
    pub bound: f64,
}

impl HardnessVector {
    pub fn new(values: Vec<f64>, anchor: usize) -> Self {
        Self {
            values,
            anchor,
            bound: HARDNESS_BOUND,
        }
    }
}

impl Deref for HardnessVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.values
    }
}

/// A point on the probability simplex over an anchor's negatives.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributionalWeights(pub Vec<f64>);

impl DistributionalWeights {
    pub fn uniform(m: usize) -> Self {
        Self(vec![1.0 / m as f64; m])
    }
}

impl Deref for DistributionalWeights {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `h_j = anchor·neg_j − anchor·positive`.
pub fn hardness_scores(
    anchor_index: usize,
    anchor: &[f64],
    positive: &[f64],
    negatives: &DenseMatrix,
) -> Result<HardnessVector> {
    if negatives.rows() == 0 {
        return Err(Error::NoNegatives);
    }
    let pos = dot(anchor, positive);
    let values = negatives.iter_rows().map(|z| dot(anchor, z) - pos).collect();
    Ok(HardnessVector::new(values, anchor_index))
}

/// `mean_j exp(h_j/τ) + log_epsilon`.
pub fn g_value(h: &[f64], tau: f64, log_epsilon: f64) -> f64 {
    let m = h.len() as f64;
    h.iter().map(|v| (v / tau).exp()).sum::<f64>() / m + log_epsilon
}

/// `∂/∂τ mean_j exp(h_j/τ) = mean_j exp(h_j/τ)·(−h_j/τ²)`.
pub fn g_tau_derivative(h: &[f64], tau: f64) -> f64 {
    let m = h.len() as f64;
    h.iter()
        .map(|v| (v / tau).exp() * (-v / (tau * tau)))
        .sum::<f64>()
        / m
}

/// `log mean_j exp(h_j/τ)` through the max-shifted reduction.
pub fn log_mean_exp(h: &[f64], tau: f64) -> Result<f64> {
    let scaled: Vec<f64> = h.iter().map(|v| v / tau).collect();
    Ok(log_sum_exp(&scaled)? - (h.len() as f64).ln())
}

/// `τ log(mean exp(h/τ) + ε)`; the max-shifted route when `ε = 0`.
fn tau_log_g(h: &[f64], tau: f64, log_epsilon: f64) -> Result<f64> {
    if h.is_empty() {
        return Err(Error::NoNegatives);
    }
    if log_epsilon == 0.0 {
        Ok(tau * log_mean_exp(h, tau)?)
    } else {
        Ok(tau * g_value(h, tau, log_epsilon).ln())
    }
}

/// Per-anchor dual loss `τ log g(h, τ) + (τ − τ₀) ρ`.
pub fn dual_loss_anchor(h: &[f64], tau: f64, cfg: &RgclConfig) -> Result<f64> {
    Ok(tau_log_g(h, tau, cfg.log_epsilon)? + (tau - cfg.tau0) * cfg.rho)
}

/// Fixed-temperature global contrastive term `τ log Σ_j exp(h_j/τ)`.
pub fn gcl_term(h: &[f64], tau: f64) -> Result<f64> {
    let scaled: Vec<f64> = h.iter().map(|v| v / tau).collect();
    Ok(tau * log_sum_exp(&scaled)?)
}

/// Inner maximizer `p*_j ∝ exp(h_j/τ)`.
pub fn p_star(h: &[f64], tau: f64) -> Result<DistributionalWeights> {
    let scaled: Vec<f64> = h.iter().map(|v| v / tau).collect();
    Ok(DistributionalWeights(softmax_shifted(&scaled)?))
}

/// `KL(p, 1/m) = Σ p_j log(m p_j)`, with `0 log 0 = 0`.
pub fn kl_uniform(p: &[f64]) -> f64 {
    let m = p.len() as f64;
    p.iter()
        .filter(|&&pj| pj > 0.0)
        .map(|&pj| pj * (m * pj).ln())
        .sum()
}

/// `Σ p_j h_j − τ₀ KL(p, 1/m)`.
pub fn primal_rgcl_value(h: &[f64], p: &[f64], tau0: f64) -> Result<f64> {
    if h.len() != p.len() {
        return Err(Error::LengthMismatch {
            left: h.len(),
            right: p.len(),
        });
    }
    Ok(dot(p, h) - tau0 * kl_uniform(p))
}

/// `(1/n) [τ ∂_τ g / g_est + log g_est + ρ]`, where `g_est` is either the
/// exact `g` or a running estimate of it.
pub fn tau_gradient_with(h: &[f64], tau: f64, g_est: f64, rho: f64, n: usize) -> f64 {
    (tau * g_tau_derivative(h, tau) / g_est + g_est.ln() + rho) / n as f64
}

/// Exact `∂F/∂τ_i` for an anchor with full negative set `h`.
pub fn exact_grad_tau(h: &[f64], tau: f64, rho: f64, n: usize) -> f64 {
    tau_gradient_with(h, tau, g_value(h, tau, 0.0), rho, n)
}

/// `exp(h_j/τ) / (m · g_or_s · n)`: the coefficient of `∇_w h_j` in the
/// anchor's contribution to `∇_w F`.
pub fn pair_weights_for_w_grad(h: &[f64], tau: f64, g_or_s: f64, n: usize) -> Vec<f64> {
    let denom = h.len() as f64 * g_or_s * n as f64;
    h.iter().map(|v| (v / tau).exp() / denom).collect()
}

/// Where the anchor, positive and negatives of term `i` live in a stacked
/// embedding matrix of `2n` rows.
///
/// Unimodal data stacks `[view A; view B]`; bimodal data stacks
/// `[images; texts]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TermLayout {
    /// Anchor `A(x_i)`, positive `A'(x_i)`, negatives both views of every `x_j`, `j ≠ i`.
    Unimodal { n: usize },
    /// Anchor `A'(x_i)`, positive `A(x_i)`, same negatives.
    UnimodalSwapped { n: usize },
    /// Anchor image `i`, positive text `i`, negatives the other texts.
    ImageToText { n: usize },
    /// Anchor text `i`, positive image `i`, negatives the other images.
    TextToImage { n: usize },
}

impl TermLayout {
    pub fn n(&self) -> usize {
        match *self {
            TermLayout::Unimodal { n }
            | TermLayout::UnimodalSwapped { n }
            | TermLayout::ImageToText { n }
            | TermLayout::TextToImage { n } => n,
        }
    }

    pub fn anchor_row(&self, i: usize) -> usize {
        match *self {
            TermLayout::Unimodal { .. } | TermLayout::ImageToText { .. } => i,
            TermLayout::UnimodalSwapped { n } | TermLayout::TextToImage { n } => n + i,
        }
    }

    pub fn positive_row(&self, i: usize) -> usize {
        match *self {
            TermLayout::Unimodal { n } | TermLayout::ImageToText { n } => n + i,
            TermLayout::UnimodalSwapped { .. } | TermLayout::TextToImage { .. } => i,
        }
    }

    pub fn num_negatives(&self) -> usize {
        match *self {
            TermLayout::Unimodal { n } | TermLayout::UnimodalSwapped { n } => 2 * (n - 1),
            TermLayout::ImageToText { n } | TermLayout::TextToImage { n } => n - 1,
        }
    }

    /// Negative rows of term `i` in ascending order.
    pub fn negatives(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let n = self.n();
        let (first, second): (usize, Option<usize>) = match *self {
            TermLayout::Unimodal { .. } | TermLayout::UnimodalSwapped { .. } => (0, Some(n)),
            TermLayout::ImageToText { .. } => (n, None),
            TermLayout::TextToImage { .. } => (0, None),
        };
        let a = (0..n).filter(move |&j| j != i).map(move |j| first + j);
        let b = second
            .into_iter()
            .flat_map(move |off| (0..n).filter(move |&j| j != i).map(move |j| off + j));
        a.chain(b)
    }
}

/// Hardness vector of term `i` read from a stacked embedding matrix.
pub fn term_hardness(emb: &DenseMatrix, layout: TermLayout, i: usize) -> HardnessVector {
    let anchor = emb.row(layout.anchor_row(i));
    let pos = dot(anchor, emb.row(layout.positive_row(i)));
    let values = layout
        .negatives(i)
        .map(|r| dot(anchor, emb.row(r)) - pos)
        .collect();
    HardnessVector::new(values, i)
}

/// Per-term quantities needed by both the exact objective and the estimators.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermStats {
    /// `mean exp(h/τ)` (no epsilon).
    pub g: f64,
    /// `log mean exp(h/τ)`, max-shifted.
    pub log_mean_exp: f64,
    /// `∂g/∂τ`.
    pub dg_dtau: f64,
}

/// Stats for every term of `layout` at temperatures `taus`.
pub fn term_stats(emb: &DenseMatrix, layout: TermLayout, taus: &[f64]) -> Result<Vec<TermStats>> {
    debug_assert_eq!(taus.len(), layout.n());
    if layout.num_negatives() == 0 {
        return Err(Error::NoNegatives);
    }
    (0..layout.n())
        .into_par_iter()
        .map(|i| {
            let h = term_hardness(emb, layout, i);
            let tau = taus[i];
            Ok(TermStats {
                g: g_value(&h, tau, 0.0),
                log_mean_exp: log_mean_exp(&h, tau)?,
                dg_dtau: g_tau_derivative(&h, tau),
            })
        })
        .collect()
}

/// Embedding gradients split by role: rows acting as anchors, and rows
/// acting as positives or negatives. Keeping the two apart fixes the
/// floating-point summation order per role.
pub struct RoleGradients {
    pub anchor: DenseMatrix,
    pub other: DenseMatrix,
}

impl RoleGradients {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            anchor: DenseMatrix::zeros(rows, cols),
            other: DenseMatrix::zeros(rows, cols),
        }
    }

    fn add(&mut self, rhs: &RoleGradients) {
        axpy(1.0, rhs.anchor.as_slice(), self.anchor.as_mut_slice());
        axpy(1.0, rhs.other.as_slice(), self.other.as_mut_slice());
    }
}

fn accumulate_term(
    emb: &DenseMatrix,
    layout: TermLayout,
    i: usize,
    tau: f64,
    coeff: f64,
    out: &mut RoleGradients,
) {
    let h = term_hardness(emb, layout, i);
    let a_row = layout.anchor_row(i);
    let p_row = layout.positive_row(i);
    let anchor = emb.row(a_row).to_vec();
    let mut g_anchor = vec![0.0; emb.cols()];
    let mut wsum = 0.0;
    for (r, hj) in layout.negatives(i).zip(h.iter()) {
        let w = coeff * (hj / tau).exp();
        wsum += w;
        axpy(w, emb.row(r), &mut g_anchor);
        axpy(w, &anchor, out.other.row_mut(r));
    }
    axpy(-wsum, emb.row(p_row), &mut g_anchor);
    axpy(-wsum, &anchor, out.other.row_mut(p_row));
    axpy(1.0, &g_anchor, out.anchor.row_mut(a_row));
}

/// `Σ_i coeff_i Σ_j exp(h_ij/τ_i) ∇_emb h_ij`, accumulated in fixed anchor
/// blocks that are summed in block order.
pub fn accumulate_embedding_grad(
    emb: &DenseMatrix,
    layout: TermLayout,
    taus: &[f64],
    coeffs: &[f64],
) -> RoleGradients {
    let n = layout.n();
    let blocks: Vec<RoleGradients> = (0..n.div_ceil(ANCHOR_BLOCK))
        .into_par_iter()
        .map(|b| {
            let mut g = RoleGradients::zeros(emb.rows(), emb.cols());
            for i in b * ANCHOR_BLOCK..((b + 1) * ANCHOR_BLOCK).min(n) {
                if coeffs[i] != 0.0 {
                    accumulate_term(emb, layout, i, taus[i], coeffs[i], &mut g);
                }
            }
            g
        })
        .collect();
    let mut total = RoleGradients::zeros(emb.rows(), emb.cols());
    for b in &blocks {
        total.add(b);
    }
    total
}

/// Sum of role gradients from several passes, added role-major.
pub fn combine_roles(parts: &[RoleGradients]) -> DenseMatrix {
    let (rows, cols) = parts[0].anchor.shape();
    let mut out = DenseMatrix::zeros(rows, cols);
    for p in parts {
        axpy(1.0, p.anchor.as_slice(), out.as_mut_slice());
    }
    for p in parts {
        axpy(1.0, p.other.as_slice(), out.as_mut_slice());
    }
    out
}

/// Two augmented views per sample, fixed for the objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct UnimodalViews {
    pub view_a: DenseMatrix,
    pub view_b: DenseMatrix,
}

impl UnimodalViews {
    pub fn new(view_a: DenseMatrix, view_b: DenseMatrix) -> Result<Self> {
        if view_a.shape() != view_b.shape() {
            return Err(Error::ShapeMismatch {
                context: "UnimodalViews",
                expected: format!("{:?}", view_a.shape()),
                got: format!("{:?}", view_b.shape()),
            });
        }
        Ok(Self { view_a, view_b })
    }

    pub fn len(&self) -> usize {
        self.view_a.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.view_a.rows() == 0
    }

    pub fn stacked(&self) -> DenseMatrix {
        self.view_a
            .vstack(&self.view_b)
            .expect("views share a shape")
    }
}

/// Image-text pairs; row `i` of both matrices is pair `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedInputs {
    pub images: DenseMatrix,
    pub texts: DenseMatrix,
}

impl PairedInputs {
    pub fn new(images: DenseMatrix, texts: DenseMatrix) -> Result<Self> {
        if images.rows() != texts.rows() {
            return Err(Error::LengthMismatch {
                left: images.rows(),
                right: texts.rows(),
            });
        }
        Ok(Self { images, texts })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.rows() == 0
    }
}

pub fn unimodal_directions(n: usize, cfg: &RgclConfig) -> Vec<TermLayout> {
    if cfg.symmetrize {
        vec![TermLayout::Unimodal { n }, TermLayout::UnimodalSwapped { n }]
    } else {
        vec![TermLayout::Unimodal { n }]
    }
}

fn check_taus(taus: &[f64], n: usize) -> Result<()> {
    if taus.len() != n {
        return Err(Error::LengthMismatch {
            left: taus.len(),
            right: n,
        });
    }
    Ok(())
}

fn term_value(st: &TermStats, tau: f64, log_epsilon: f64) -> f64 {
    if log_epsilon == 0.0 {
        tau * st.log_mean_exp
    } else {
        tau * (st.g + log_epsilon).ln()
    }
}

#[derive(Clone, Debug)]
pub struct UnimodalGradient {
    pub value: f64,
    pub grad_params: EncoderParams,
    pub grad_tau: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BimodalGradient {
    pub value: f64,
    pub grad_images: EncoderParams,
    pub grad_texts: EncoderParams,
    pub grad_tau_v: Vec<f64>,
    pub grad_tau_t: Vec<f64>,
}

/// `F(w, τ) = (1/n) Σ_i [τ_i log g_i + (τ_i − τ₀) ρ]` over full negative sets.
pub fn objective_unimodal(
    params: &EncoderParams,
    views: &UnimodalViews,
    taus: &[f64],
    cfg: &RgclConfig,
) -> Result<f64> {
    Ok(unimodal_eval(params, views, taus, cfg, false)?.value)
}

/// Objective value with exact `∇_w F` and `∇_τ F`.
pub fn objective_unimodal_with_grad(
    params: &EncoderParams,
    views: &UnimodalViews,
    taus: &[f64],
    cfg: &RgclConfig,
) -> Result<UnimodalGradient> {
    unimodal_eval(params, views, taus, cfg, true)
}

fn unimodal_eval(
    params: &EncoderParams,
    views: &UnimodalViews,
    taus: &[f64],
    cfg: &RgclConfig,
    with_grad: bool,
) -> Result<UnimodalGradient> {
    let n = views.len();
    if n < 2 {
        return Err(Error::TooShort { min: 2, got: n });
    }
    check_taus(taus, n)?;
    let inputs = views.stacked();
    let emb = encode(params, &inputs)?.embeddings;
    let dirs = unimodal_directions(n, cfg);
    let d = dirs.len() as f64;
    let stats: Vec<Vec<TermStats>> = dirs
        .iter()
        .map(|&l| term_stats(&emb, l, taus))
        .collect::<Result<_>>()?;

    let mut value = 0.0;
    let mut grad_tau = vec![0.0; n];
    for i in 0..n {
        let tau = taus[i];
        let mut loss = 0.0;
        let mut dtau = 0.0;
        for st in &stats {
            let st = &st[i];
            let g = st.g + cfg.log_epsilon;
            loss += term_value(st, tau, cfg.log_epsilon) / d;
            dtau += (tau * st.dg_dtau / g + g.ln()) / d;
        }
        value += loss + (tau - cfg.tau0) * cfg.rho;
        grad_tau[i] = (dtau + cfg.rho) / n as f64;
    }
    value /= n as f64;

    let grad_params = if with_grad {
        let m = dirs[0].num_negatives() as f64;
        let parts: Vec<RoleGradients> = dirs
            .iter()
            .zip(&stats)
            .map(|(&l, st)| {
                let coeffs: Vec<f64> = st
                    .iter()
                    .map(|s| 1.0 / (d * m * (s.g + cfg.log_epsilon) * n as f64))
                    .collect();
                accumulate_embedding_grad(&emb, l, taus, &coeffs)
            })
            .collect();
        let grad_emb = combine_roles(&parts);
        encode_backward(params, &inputs, &grad_emb)?
    } else {
        EncoderParams::zeros(params.shape())
    };
    Ok(UnimodalGradient {
        value,
        grad_params,
        grad_tau,
    })
}

/// Two-way objective
/// `F_B = (1/n) Σ_i [τ_v,i log g_x,i + τ_t,i log g_t,i + (τ_v,i + τ_t,i − 2τ₀) ρ]`.
pub fn objective_bimodal(
    params_img: &EncoderParams,
    params_txt: &EncoderParams,
    pairs: &PairedInputs,
    tau_v: &[f64],
    tau_t: &[f64],
    cfg: &RgclConfig,
) -> Result<f64> {
    Ok(bimodal_eval(params_img, params_txt, pairs, tau_v, tau_t, cfg, false)?.value)
}

pub fn objective_bimodal_with_grad(
    params_img: &EncoderParams,
    params_txt: &EncoderParams,
    pairs: &PairedInputs,
    tau_v: &[f64],
    tau_t: &[f64],
    cfg: &RgclConfig,
) -> Result<BimodalGradient> {
    bimodal_eval(params_img, params_txt, pairs, tau_v, tau_t, cfg, true)
}

/// Image and text halves of the bimodal objective, each including its own
/// `(τ − τ₀) ρ` penalty and the `1/n` average.
pub fn bimodal_halves(
    params_img: &EncoderParams,
    params_txt: &EncoderParams,
    pairs: &PairedInputs,
    tau_v: &[f64],
    tau_t: &[f64],
    cfg: &RgclConfig,
) -> Result<(f64, f64)> {
    let n = pairs.len();
    let emb = bimodal_embeddings(params_img, params_txt, pairs)?;
    let sv = term_stats(&emb, TermLayout::ImageToText { n }, tau_v)?;
    let st = term_stats(&emb, TermLayout::TextToImage { n }, tau_t)?;
    let half = |stats: &[TermStats], taus: &[f64]| {
        stats
            .iter()
            .zip(taus)
            .map(|(s, &t)| term_value(s, t, cfg.log_epsilon) + (t - cfg.tau0) * cfg.rho)
            .sum::<f64>()
            / n as f64
    };
    Ok((half(&sv, tau_v), half(&st, tau_t)))
}

pub(crate) fn bimodal_embeddings(
    params_img: &EncoderParams,
    params_txt: &EncoderParams,
    pairs: &PairedInputs,
) -> Result<DenseMatrix> {
    let ei = encode(params_img, &pairs.images)?.embeddings;
    let et = encode(params_txt, &pairs.texts)?.embeddings;
    if ei.cols() != et.cols() {
        return Err(Error::ShapeMismatch {
            context: "bimodal embeddings",
            expected: format!("{} embedding columns", ei.cols()),
            got: format!("{} embedding columns", et.cols()),
        });
    }
    ei.vstack(&et)
}

fn bimodal_eval(
    params_img: &EncoderParams,
    params_txt: &EncoderParams,
    pairs: &PairedInputs,
    tau_v: &[f64],
    tau_t: &[f64],
    cfg: &RgclConfig,
    with_grad: bool,
) -> Result<BimodalGradient> {
    let n = pairs.len();
    if n < 2 {
        return Err(Error::TooShort { min: 2, got: n });
    }
    check_taus(tau_v, n)?;
    check_taus(tau_t, n)?;
    let emb = bimodal_embeddings(params_img, params_txt, pairs)?;
    let img_layout = TermLayout::ImageToText { n };
    let txt_layout = TermLayout::TextToImage { n };
    let sv = term_stats(&emb, img_layout, tau_v)?;
    let st = term_stats(&emb, txt_layout, tau_t)?;

    let mut value = 0.0;
    let mut grad_tau_v = vec![0.0; n];
    let mut grad_tau_t = vec![0.0; n];
    for i in 0..n {
        let (tv, tt) = (tau_v[i], tau_t[i]);
        value += term_value(&sv[i], tv, cfg.log_epsilon)
            + term_value(&st[i], tt, cfg.log_epsilon)
            + (tv - cfg.tau0 + tt - cfg.tau0) * cfg.rho;
        let gv = sv[i].g + cfg.log_epsilon;
        let gt = st[i].g + cfg.log_epsilon;
        grad_tau_v[i] = (tv * sv[i].dg_dtau / gv + gv.ln() + cfg.rho) / n as f64;
        grad_tau_t[i] = (tt * st[i].dg_dtau / gt + gt.ln() + cfg.rho) / n as f64;
    }
    value /= n as f64;

    let (grad_images, grad_texts) = if with_grad {
        let m = (n - 1) as f64;
        let coeffs = |stats: &[TermStats]| -> Vec<f64> {
            stats
                .iter()
                .map(|s| 1.0 / (m * (s.g + cfg.log_epsilon) * n as f64))
                .collect()
        };
        let parts = [
            accumulate_embedding_grad(&emb, img_layout, tau_v, &coeffs(&sv)),
            accumulate_embedding_grad(&emb, txt_layout, tau_t, &coeffs(&st)),
        ];
        let grad_emb = combine_roles(&parts);
        let (gi, gt) = grad_emb.split_rows(n);
        (
            encode_backward(params_img, &pairs.images, &gi)?,
            encode_backward(params_txt, &pairs.texts, &gt)?,
        )
    } else {
        (
            EncoderParams::zeros(params_img.shape()),
            EncoderParams::zeros(params_txt.shape()),
        )
    };
    Ok(BimodalGradient {
        value,
        grad_images,
        grad_texts,
        grad_tau_v,
        grad_tau_t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Activation, EncoderShape};
    use crate::numerics::{norm, RandomStream};
    use proptest::prelude::*;

    fn cfg(rho: f64, tau0: f64) -> RgclConfig {
        RgclConfig {
            rho,
            tau0,
            tau_init: tau0,
            ..RgclConfig::default()
        }
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn config_derived_bounds() {
        let c = cfg(0.3, 0.05);
        assert!((c.tau_max() - (0.05 + 2.0 / 0.3)).abs() < 1e-15);
        assert!((c.tau_max() - 6.716_666_666_666_667).abs() < 1e-12);
        assert!((c.g_floor() - (-2.0 / c.tau_max()).exp()).abs() < 1e-15);
        assert!(c.validate().is_ok());
        assert!(RgclConfig { rho: 0.0, ..c.clone() }.validate().is_err());
        assert!(RgclConfig { tau_init: 0.01, ..c.clone() }.validate().is_err());
        assert!(RgclConfig { tau_init: 100.0, ..c }.validate().is_err());
    }

    #[test]
    fn hardness_examples() {
        // anchor·neg = 0.3, anchor·pos = 0.9
        let anchor = [1.0, 0.0];
        let pos = [0.9, (1.0f64 - 0.81).sqrt()];
        let neg = DenseMatrix::from_rows(&[vec![0.3, (1.0f64 - 0.09).sqrt()], pos.to_vec()]).unwrap();
        let h = hardness_scores(0, &anchor, &pos, &neg).unwrap();
        assert!((h[0] + 0.6).abs() < 1e-15);
        assert_eq!(h[1], 0.0);
        assert!(matches!(
            hardness_scores(0, &anchor, &pos, &DenseMatrix::zeros(0, 2)),
            Err(Error::NoNegatives)
        ));
        assert_eq!(
            hardness_scores(0, &anchor, &pos, &DenseMatrix::zeros(0, 2)).unwrap_err().to_string(),
            "no negatives"
        );
    }

    #[test]
    fn hardness_matches_direct_dot_products() {
        let mut rng = RandomStream::new(21);
        let a = unit(rng.draw_gaussian(4));
        let p = unit(rng.draw_gaussian(4));
        let rows: Vec<Vec<f64>> = (0..5).map(|_| unit(rng.draw_gaussian(4))).collect();
        let negs = DenseMatrix::from_rows(&rows).unwrap();
        let h = hardness_scores(3, &a, &p, &negs).unwrap();
        assert_eq!(h.anchor, 3);
        for (j, z) in rows.iter().enumerate() {
            let mut an = 0.0;
            let mut ap = 0.0;
            for k in 0..4 {
                an += a[k] * z[k];
                ap += a[k] * p[k];
            }
            assert!((h[j] - (an - ap)).abs() < 1e-14);
            assert!(h[j].abs() <= HARDNESS_BOUND);
        }
    }

    #[test]
    fn g_value_examples() {
        assert_eq!(g_value(&[0.0, 0.0], 0.3, 0.0), 1.0);
        assert_eq!(g_value(&[0.0, 0.0], 0.3, 0.25), 1.25);
        let c: f64 = -0.4;
        assert!((g_value(&[c, c, c], 0.2, 0.0) - (c / 0.2).exp()).abs() < 1e-15);
        // (1 + e^-1)/2
        assert!((g_value(&[0.0, -1.0], 1.0, 0.0) - 0.683_939_720_585_721_2).abs() < 1e-12);
    }

    #[test]
    fn dual_loss_examples() {
        let c = cfg(0.3, 0.05);
        let h = [-0.4; 5];
        let v = dual_loss_anchor(&h, 0.5, &c).unwrap();
        assert!((v - (-0.4 + 0.45 * 0.3)).abs() < 1e-12);
        // 1·ln 0.6839397 + 0.95·0.3
        let v = dual_loss_anchor(&[0.0, -1.0], 1.0, &c).unwrap();
        let direct = ((1.0 + (-1f64).exp()) / 2.0).ln() + 0.95 * 0.3;
        assert!((v - direct).abs() < 1e-15);
        assert!((v - (-0.094_885_493_041_722_5)).abs() < 1e-12);
    }

    #[test]
    fn dual_reduces_to_gcl_plus_constant() {
        let mut rng = RandomStream::new(2);
        let c = cfg(0.4, 0.05);
        for _ in 0..20 {
            let h: Vec<f64> = (0..7).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let tau = rng.uniform(0.05, 2.0);
            let dual = dual_loss_anchor(&h, tau, &c).unwrap();
            let gcl = gcl_term(&h, tau).unwrap();
            let expect = gcl - tau * (h.len() as f64).ln() + (tau - c.tau0) * c.rho;
            assert!((dual - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn p_star_examples() {
        let p = p_star(&[-0.5, -0.5], 0.3).unwrap();
        assert_eq!(&p[..], &[0.5, 0.5]);
        let p = p_star(&[0.0, -1.0], 1.0).unwrap();
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn primal_and_kl_examples() {
        let h = [0.2, -0.7, 0.1];
        let u = DistributionalWeights::uniform(3);
        assert!((primal_rgcl_value(&h, &u, 0.5).unwrap() - (-0.4 / 3.0)).abs() < 1e-15);
        assert!((primal_rgcl_value(&[0.0, -1.0], &[0.8, 0.2], 0.0).unwrap() + 0.2).abs() < 1e-15);
        assert_eq!(primal_rgcl_value(&h, &[0.0, 0.0, 1.0], 0.0).unwrap(), 0.1);
        assert_eq!(primal_rgcl_value(&h, &[1.0, 0.0, 0.0], 0.0).unwrap(), 0.2);
        assert!(primal_rgcl_value(&h, &[0.5, 0.5], 0.0).is_err());

        assert_eq!(kl_uniform(&u), 0.0);
        // 0.8 ln 1.6 + 0.2 ln 0.4
        assert!((kl_uniform(&[0.8, 0.2]) - 0.192_744_757_021_757_5).abs() < 1e-12);
        assert!((kl_uniform(&[0.0, 0.0, 1.0, 0.0]) - 4f64.ln()).abs() < 1e-15);
    }

    fn fd_tau(h: &[f64], tau: f64, c: &RgclConfig, n: usize) -> f64 {
        let step = 1e-5;
        let f = |t: f64| dual_loss_anchor(h, t, c).unwrap() / n as f64;
        (f(tau + step) - f(tau - step)) / (2.0 * step)
    }

    #[test]
    fn exact_grad_tau_constant_hardness() {
        let h = [0.3; 4];
        let g = exact_grad_tau(&h, 0.7, 0.2, 5);
        assert!((g - 0.2 / 5.0).abs() < 1e-15);
    }

    #[test]
    fn exact_grad_tau_matches_finite_difference() {
        let mut rng = RandomStream::new(77);
        for _ in 0..100 {
            let c = cfg(rng.uniform(0.05, 1.0), 0.05);
            let h: Vec<f64> = (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect();
            let tau = rng.uniform(0.1, 2.0);
            let n = 1 + (rng.next_u64() % 8) as usize;
            let exact = exact_grad_tau(&h, tau, c.rho, n);
            let fd = fd_tau(&h, tau, &c, n);
            let rel = (exact - fd).abs() / exact.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-6, "rel {rel:e}: exact {exact} fd {fd}");
        }
    }

    #[test]
    fn pair_weights_normalize() {
        let h = [0.1, -0.3, -1.2, 0.4];
        let tau = 0.3;
        let n = 7;
        let g = g_value(&h, tau, 0.0);
        let w = pair_weights_for_w_grad(&h, tau, g, n);
        let total: f64 = w.iter().sum();
        assert!((total - 1.0 / n as f64).abs() < 1e-15);
        let w = pair_weights_for_w_grad(&[-0.2; 3], tau, 1.0, n);
        assert!(w.iter().all(|x| *x == w[0]));
    }

    #[test]
    fn layout_negative_sets() {
        let l = TermLayout::Unimodal { n: 4 };
        assert_eq!(l.negatives(1).collect::<Vec<_>>(), vec![0, 2, 3, 4, 6, 7]);
        assert_eq!(l.num_negatives(), 6);
        assert_eq!((l.anchor_row(1), l.positive_row(1)), (1, 5));
        let s = TermLayout::UnimodalSwapped { n: 4 };
        assert_eq!((s.anchor_row(1), s.positive_row(1)), (5, 1));
        let it = TermLayout::ImageToText { n: 3 };
        assert_eq!(it.negatives(0).collect::<Vec<_>>(), vec![4, 5]);
        let ti = TermLayout::TextToImage { n: 3 };
        assert_eq!(ti.negatives(2).collect::<Vec<_>>(), vec![0, 1]);
        assert_eq!((ti.anchor_row(2), ti.positive_row(2)), (5, 2));
    }

    fn small_instance(seed: u64, n: usize) -> (EncoderParams, UnimodalViews, Vec<f64>) {
        let mut rng = RandomStream::new(seed);
        let shape = EncoderShape {
            input: 3,
            hidden: 4,
            embed: 3,
            activation: Activation::Tanh,
        };
        let p = EncoderParams::init(shape, &rng.substream("p"));
        let a = DenseMatrix::from_vec(n, 3, rng.draw_gaussian(3 * n)).unwrap();
        let b = DenseMatrix::from_vec(n, 3, rng.draw_gaussian(3 * n)).unwrap();
        let taus = (0..n).map(|_| rng.uniform(0.1, 1.0)).collect();
        (p, UnimodalViews::new(a, b).unwrap(), taus)
    }

    /// Independent straight-line evaluation of the unimodal objective.
    fn straight_line_objective(p: &EncoderParams, v: &UnimodalViews, taus: &[f64], c: &RgclConfig) -> f64 {
        let n = v.len();
        let ea = encode(p, &v.view_a).unwrap().embeddings;
        let eb = encode(p, &v.view_b).unwrap().embeddings;
        let mut total = 0.0;
        for i in 0..n {
            let pos: f64 = ea.row(i).iter().zip(eb.row(i)).map(|(x, y)| x * y).sum();
            let mut acc = 0.0;
            let mut m = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                for other in [ea.row(j), eb.row(j)] {
                    let s: f64 = ea.row(i).iter().zip(other).map(|(x, y)| x * y).sum();
                    acc += ((s - pos) / taus[i]).exp();
                    m += 1.0;
                }
            }
            total += taus[i] * (acc / m).ln() + (taus[i] - c.tau0) * c.rho;
        }
        total / n as f64
    }

    #[test]
    fn unimodal_objective_matches_straight_line() {
        let c = cfg(0.3, 0.05);
        let (p, v, taus) = small_instance(4, 4);
        let f = objective_unimodal(&p, &v, &taus, &c).unwrap();
        let want = straight_line_objective(&p, &v, &taus, &c);
        assert!((f - want).abs() < 1e-12);
        assert!(f >= -HARDNESS_BOUND);
    }

    #[test]
    fn unimodal_symmetric_pair_has_equal_losses() {
        // x_1 = −x_0 with identity encoder and no bias: the two anchors are mirror images.
        let c = cfg(0.3, 0.05);
        let shape = EncoderShape { input: 2, hidden: 2, embed: 2, activation: Activation::Identity };
        let mut p = EncoderParams::zeros(shape);
        p.w1 = DenseMatrix::identity(2);
        p.w2 = DenseMatrix::identity(2);
        let a = DenseMatrix::from_rows(&[vec![1.0, 0.2], vec![-1.0, -0.2]]).unwrap();
        let b = DenseMatrix::from_rows(&[vec![0.9, 0.5], vec![-0.9, -0.5]]).unwrap();
        let v = UnimodalViews::new(a, b).unwrap();
        let emb = encode(&p, &v.stacked()).unwrap().embeddings;
        let l = TermLayout::Unimodal { n: 2 };
        let h0 = term_hardness(&emb, l, 0);
        let h1 = term_hardness(&emb, l, 1);
        let l0 = dual_loss_anchor(&h0, 0.4, &c).unwrap();
        let l1 = dual_loss_anchor(&h1, 0.4, &c).unwrap();
        assert!((l0 - l1).abs() < 1e-15);
        assert!(objective_unimodal(&p, &v, &[0.4, 0.4], &c).is_ok());
        let one = UnimodalViews::new(DenseMatrix::zeros(1, 2), DenseMatrix::zeros(1, 2)).unwrap();
        assert!(matches!(objective_unimodal(&p, &one, &[0.4], &c), Err(Error::TooShort { .. })));
    }

    fn fd_vec(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut a = x.to_vec();
                a[i] += step;
                let mut b = x.to_vec();
                b[i] -= step;
                (f(&a) - f(&b)) / (2.0 * step)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        d / norm(a).max(norm(b)).max(1e-12)
    }

    #[test]
    fn unimodal_gradients_match_finite_differences() {
        for (seed, symmetrize) in [(1, false), (2, true), (3, false)] {
            let c = RgclConfig { symmetrize, ..cfg(0.3, 0.05) };
            let (p, v, taus) = small_instance(seed, 4);
            let g = objective_unimodal_with_grad(&p, &v, &taus, &c).unwrap();
            let shape = p.shape();
            let fw = |w: &[f64]| {
                objective_unimodal(&EncoderParams::from_flat(shape, w).unwrap(), &v, &taus, &c).unwrap()
            };
            let num_w = fd_vec(fw, &p.to_flat(), 1e-5);
            assert!(rel_err(&g.grad_params.to_flat(), &num_w) <= 1e-6);
            let ft = |t: &[f64]| objective_unimodal(&p, &v, t, &c).unwrap();
            let num_t = fd_vec(ft, &taus, 1e-6);
            assert!(rel_err(&g.grad_tau, &num_t) <= 1e-6);
        }
    }

    fn bimodal_instance(seed: u64, n: usize) -> (EncoderParams, EncoderParams, PairedInputs, Vec<f64>, Vec<f64>) {
        let mut rng = RandomStream::new(seed);
        let si = EncoderShape { input: 4, hidden: 5, embed: 3, activation: Activation::Tanh };
        let st = EncoderShape { input: 3, hidden: 4, embed: 3, activation: Activation::Tanh };
        let pi = EncoderParams::init(si, &rng.substream("img"));
        let pt = EncoderParams::init(st, &rng.substream("txt"));
        let x = DenseMatrix::from_vec(n, 4, rng.draw_gaussian(4 * n)).unwrap();
        let t = DenseMatrix::from_vec(n, 3, rng.draw_gaussian(3 * n)).unwrap();
        let tv = (0..n).map(|_| rng.uniform(0.1, 1.0)).collect();
        let tt = (0..n).map(|_| rng.uniform(0.1, 1.0)).collect();
        (pi, pt, PairedInputs::new(x, t).unwrap(), tv, tt)
    }

    #[test]
    fn bimodal_objective_matches_straight_line() {
        let c = cfg(0.3, 0.05);
        let (pi, pt, pairs, tv, tt) = bimodal_instance(9, 3);
        let f = objective_bimodal(&pi, &pt, &pairs, &tv, &tt, &c).unwrap();
        let ei = encode(&pi, &pairs.images).unwrap().embeddings;
        let et = encode(&pt, &pairs.texts).unwrap().embeddings;
        let n = 3;
        let mut want = 0.0;
        for i in 0..n {
            let pos: f64 = dot(ei.row(i), et.row(i));
            let (mut gx, mut gt) = (0.0, 0.0);
            for j in (0..n).filter(|&j| j != i) {
                gx += ((dot(ei.row(i), et.row(j)) - pos) / tv[i]).exp();
                gt += ((dot(ei.row(j), et.row(i)) - pos) / tt[i]).exp();
            }
            let m = (n - 1) as f64;
            want += tv[i] * (gx / m).ln() + tt[i] * (gt / m).ln() + (tv[i] + tt[i] - 2.0 * c.tau0) * c.rho;
        }
        want /= n as f64;
        assert!((f - want).abs() < 1e-12);
    }

    #[test]
    fn bimodal_penalty_vanishes_at_floor() {
        let c = cfg(0.3, 0.05);
        let (pi, pt, pairs, _, _) = bimodal_instance(10, 4);
        let floor = vec![c.tau0; 4];
        let f = objective_bimodal(&pi, &pt, &pairs, &floor, &floor, &c).unwrap();
        let c2 = RgclConfig { rho: 5.0, ..c.clone() };
        let f2 = objective_bimodal(&pi, &pt, &pairs, &floor, &floor, &c2).unwrap();
        assert!((f - f2).abs() < 1e-14);
    }

    #[test]
    fn bimodal_mirrored_halves_are_equal() {
        let c = cfg(0.3, 0.05);
        let (pi, _, pairs, tv, _) = bimodal_instance(11, 5);
        let mirrored = PairedInputs::new(pairs.images.clone(), pairs.images.clone()).unwrap();
        let (a, b) = bimodal_halves(&pi, &pi, &mirrored, &tv, &tv, &c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bimodal_gradients_match_finite_differences() {
        let c = cfg(0.4, 0.05);
        let (pi, pt, pairs, tv, tt) = bimodal_instance(12, 4);
        let g = objective_bimodal_with_grad(&pi, &pt, &pairs, &tv, &tt, &c).unwrap();
        let (si, st) = (pi.shape(), pt.shape());
        let fi = |w: &[f64]| {
            objective_bimodal(&EncoderParams::from_flat(si, w).unwrap(), &pt, &pairs, &tv, &tt, &c).unwrap()
        };
        let ft = |w: &[f64]| {
            objective_bimodal(&pi, &EncoderParams::from_flat(st, w).unwrap(), &pairs, &tv, &tt, &c).unwrap()
        };
        assert!(rel_err(&g.grad_images.to_flat(), &fd_vec(fi, &pi.to_flat(), 1e-5)) <= 1e-6);
        assert!(rel_err(&g.grad_texts.to_flat(), &fd_vec(ft, &pt.to_flat(), 1e-5)) <= 1e-6);
        let fv = |t: &[f64]| objective_bimodal(&pi, &pt, &pairs, t, &tt, &c).unwrap();
        let fw = |t: &[f64]| objective_bimodal(&pi, &pt, &pairs, &tv, t, &c).unwrap();
        assert!(rel_err(&g.grad_tau_v, &fd_vec(fv, &tv, 1e-6)) <= 1e-6);
        assert!(rel_err(&g.grad_tau_t, &fd_vec(fw, &tt, 1e-6)) <= 1e-6);
    }

    #[test]
    fn log_epsilon_shifts_inside_log() {
        let c = RgclConfig { log_epsilon: 0.1, ..cfg(0.3, 0.05) };
        let h = [0.0, -1.0];
        let v = dual_loss_anchor(&h, 1.0, &c).unwrap();
        assert!((v - ((0.683_939_720_585_721_2f64 + 0.1).ln() + 0.95 * 0.3)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn shift_structure(
            h in proptest::collection::vec(-1.0f64..1.0, 1..8),
            shift in -0.9f64..0.9,
            tau in 0.05f64..3.0,
        ) {
            let c = cfg(0.3, 0.05);
            let moved: Vec<f64> = h.iter().map(|v| v + shift).collect();
            let a = dual_loss_anchor(&h, tau, &c).unwrap();
            let b = dual_loss_anchor(&moved, tau, &c).unwrap();
            prop_assert!((b - a - shift).abs() < 1e-12);
            let pa = p_star(&h, tau).unwrap();
            let pb = p_star(&moved, tau).unwrap();
            for (x, y) in pa.iter().zip(pb.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn p_star_is_monotone_in_hardness(
            h in proptest::collection::vec(-2.0f64..2.0, 2..8),
            tau in 0.05f64..3.0,
        ) {
            let p = p_star(&h, tau).unwrap();
            for j in 0..h.len() {
                for k in 0..h.len() {
                    if h[j] > h[k] {
                        prop_assert!(p[j] >= p[k]);
                    }
                }
            }
        }

        #[test]
        fn kl_is_nonnegative(raw in proptest::collection::vec(0.0f64..1.0, 1..10)) {
            let total: f64 = raw.iter().sum();
            prop_assume!(total > 0.0);
            let p: Vec<f64> = raw.iter().map(|v| v / total).collect();
            prop_assert!(kl_uniform(&p) >= -1e-15);
        }
    }
}
