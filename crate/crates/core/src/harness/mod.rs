//! Experiment configuration, training loops, metrics and file outputs.

mod verify;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use verify::{run_verify, Check, Fault, VerifyReport};

use crate::datasynth::{
    augment, gen_bimodal_pairs, gen_longtail_clusters, BimodalParams, BimodalSynthDataset,
    LongTailParams, SynthDataset,
};
use crate::encoder::{encode, Activation, EncoderParams, EncoderShape};
use crate::error::{Error, Result};
use crate::isogclr::{
    batch_from_indices, pair_batch_from_indices, project_tau, step_bimodal_on_batch,
    step_on_batch, AnchorState, BimodalAnchorState, OptimizerMode, OptimizerState, StepReport,
};
use crate::numerics::{mean, spearman_rank_corr, variance, DenseMatrix, RandomStream};
use crate::rgcl::{
    objective_bimodal_with_grad, objective_unimodal_with_grad, PairedInputs, RgclConfig,
    UnimodalViews,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RunMode {
    Isogclr,
    SogclrBaseline,
    Bimodal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightOptimizer {
    Momentum,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay of both step sizes over the epochs.
    Cosine,
}

/// Flat experiment configuration. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: RunMode,
    pub seed: u64,
    /// Not echoed into reports, so runs in different directories compare equal.
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,

    pub rho: f64,
    pub tau0: f64,
    pub tau_init: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub eta_w: f64,
    pub eta_tau: f64,
    pub tau_grad_scale: Option<f64>,
    pub log_epsilon: f64,
    pub symmetrize: bool,
    pub optimizer: WeightOptimizer,
    pub lr_schedule: LrSchedule,

    pub k: usize,
    pub n: usize,
    pub ratio: f64,
    pub d_in: usize,
    pub noise: f64,
    pub aug_strength: f64,
    pub d_latent: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub mirrored: bool,

    pub hidden: usize,
    pub embed: usize,
    pub activation: Activation,

    pub batch_size: usize,
    pub epochs: usize,

    pub knn_k: usize,
    pub held_out_fraction: f64,
    /// Epochs between exact full-data evaluations.
    pub eval_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let r = RgclConfig::default();
        Self {
            mode: RunMode::Isogclr,
            seed: 0,
            out_dir: None,
            rho: r.rho,
            tau0: r.tau0,
            tau_init: r.tau_init,
            beta0: r.beta0,
            beta1: r.beta1,
            eta_w: r.eta_w,
            eta_tau: r.eta_tau,
            tau_grad_scale: r.tau_grad_scale,
            log_epsilon: r.log_epsilon,
            symmetrize: r.symmetrize,
            optimizer: WeightOptimizer::Momentum,
            lr_schedule: LrSchedule::Cosine,
            k: 10,
            n: 2000,
            ratio: 100.0,
            d_in: 16,
            noise: 0.1,
            aug_strength: 0.1,
            d_latent: 16,
            d_img: 16,
            d_txt: 16,
            mirrored: false,
            hidden: 32,
            embed: 8,
            activation: Activation::Tanh,
            batch_size: 128,
            epochs: 500,
            knn_k: 5,
            held_out_fraction: 0.2,
            eval_every: 10,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(path, &[] as &[&str])
    }

    /// Reads a config file and applies `overrides` before validating, so a
    /// file may be incomplete on its own.
    pub fn load_with_overrides<S: AsRef<str>>(path: &Path, overrides: &[S]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.with_overrides(overrides)
    }

    /// Applies `key=value` overrides on top of `self`. Values are parsed as
    /// JSON when possible and taken as strings otherwise.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let obj = value.as_object_mut().expect("config serializes to an object");
        if let Some(dir) = &self.out_dir {
            obj.insert("out_dir".into(), serde_json::json!(dir));
        }
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            if !obj.contains_key(key) && key != "out_dir" {
                return Err(Error::config(format!("unknown config key `{key}`")));
            }
            let parsed = serde_json::from_str(raw.trim())
                .unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
            obj.insert(key.to_string(), parsed);
        }
        let cfg: Self = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rgcl(&self) -> RgclConfig {
        RgclConfig {
            rho: self.rho,
            tau0: self.tau0,
            tau_init: self.tau_init,
            beta0: self.beta0,
            beta1: self.beta1,
            eta_w: self.eta_w,
            eta_tau: self.eta_tau,
            tau_grad_scale: self.tau_grad_scale,
            log_epsilon: self.log_epsilon,
            symmetrize: self.symmetrize,
            ..RgclConfig::default()
        }
    }

    pub fn longtail_params(&self) -> LongTailParams {
        LongTailParams {
            k: self.k,
            n: self.n,
            ratio: self.ratio,
            d_in: self.d_in,
            noise: self.noise,
            seed: self.seed,
        }
    }

    pub fn bimodal_params(&self) -> BimodalParams {
        BimodalParams {
            k: self.k,
            n: self.n,
            ratio: self.ratio,
            d_latent: self.d_latent,
            d_img: self.d_img,
            d_txt: self.d_txt,
            noise: self.noise,
            seed: self.seed,
            mirrored: self.mirrored,
        }
    }

    pub fn encoder_shape(&self, input: usize) -> EncoderShape {
        EncoderShape {
            input,
            hidden: self.hidden,
            embed: self.embed,
            activation: self.activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rgcl().validate()?;
        let bad = |msg: String| Err(Error::config(msg));
        if self.k < 2 || self.n < self.k {
            return bad(format!("need k >= 2 and n >= k (got k={}, n={})", self.k, self.n));
        }
        if self.ratio.is_nan() || self.ratio < 1.0 {
            return bad(format!("ratio must be >= 1 (got {})", self.ratio));
        }
        if self.batch_size < 2 || self.batch_size > self.n {
            return bad(format!("batch_size must be in [2, n] (got {})", self.batch_size));
        }
        if self.d_in == 0 || self.hidden == 0 || self.embed < 2 {
            return bad("need d_in >= 1, hidden >= 1, embed >= 2".into());
        }
        if self.noise.is_nan() || self.noise < 0.0 || self.aug_strength.is_nan() || self.aug_strength < 0.0 {
            return bad("noise and aug_strength must be >= 0".into());
        }
        if self.knn_k == 0 || self.knn_k.is_multiple_of(2) {
            return bad(format!("knn_k must be odd (got {})", self.knn_k));
        }
        if !(self.held_out_fraction > 0.0 && self.held_out_fraction < 1.0) {
            return bad(format!("held_out_fraction must be in (0, 1) (got {})", self.held_out_fraction));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if self.mode == RunMode::Bimodal {
            if self.d_latent < 2 || self.d_img < 2 || self.d_txt < 2 {
                return bad("bimodal dimensions must be >= 2".into());
            }
            if self.mirrored && self.d_img != self.d_txt {
                return bad("mirrored modalities need d_img == d_txt".into());
            }
        }
        Ok(())
    }

    /// JSON echo used in reports and for hashing.
    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 over the crate version and the config echo.
    pub fn hash(&self) -> String {
        config_hash(&self.echo())
    }

    fn lr_factor(&self, epoch: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let t = epoch as f64 / self.epochs.max(1) as f64;
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    fn optimizer_mode(&self) -> OptimizerMode {
        match (self.mode, self.optimizer) {
            (RunMode::SogclrBaseline, _) => OptimizerMode::FixedTau,
            (_, WeightOptimizer::Adam) => OptimizerMode::Adam,
            (_, WeightOptimizer::Momentum) => OptimizerMode::Momentum,
        }
    }
}

pub(crate) fn config_hash(echo: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"), "\n"));
    h.update(echo.to_string());
    hex::encode(h.finalize())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TauSeries {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl TauSeries {
    fn push(&mut self, taus: &[f64]) {
        self.mean.push(mean(taus));
        self.std.push(variance(taus).sqrt());
        self.min.push(taus.iter().copied().fold(f64::INFINITY, f64::min));
        self.max.push(taus.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
}

/// One entry per epoch.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochSeries {
    /// `mean_i [τ_i log s_i + (τ_i − τ₀) ρ]` from the moving averages.
    pub objective_estimate: Vec<f64>,
    pub tau: TauSeries,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_text: Option<TauSeries>,
}

/// Exact full-data evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub epoch: usize,
    pub exact_objective: f64,
    /// `‖∇_w F‖² + ‖(τ − Π(τ − η ∇_τ F))/η‖²`.
    pub grad_mapping_norm_sq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauAnalysis {
    pub final_tau: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
    pub cluster_mean_tau: Vec<f64>,
    /// Rank correlation of cluster size with cluster mean temperature.
    pub spearman_size_tau: f64,
    pub top3_mean_tau: f64,
    pub bottom3_mean_tau: f64,
}

/// Extremes over every optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepBounds {
    pub steps: u64,
    pub min_tau: f64,
    pub max_tau: f64,
    pub min_g: f64,
    pub min_s: f64,
    /// Largest `|τ_v,i − τ_t,i|` after any step; bimodal runs only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tau_gap: Option<f64>,
}

impl StepBounds {
    fn new(bimodal: bool) -> Self {
        Self {
            steps: 0,
            min_tau: f64::INFINITY,
            max_tau: f64::NEG_INFINITY,
            min_g: f64::INFINITY,
            min_s: f64::INFINITY,
            max_tau_gap: bimodal.then_some(0.0),
        }
    }

    fn record(&mut self, rep: &StepReport) {
        self.steps += 1;
        self.min_tau = self.min_tau.min(rep.min_tau);
        self.max_tau = self.max_tau.max(rep.max_tau);
        self.min_g = self.min_g.min(rep.min_g);
        self.min_s = self.min_s.min(rep.min_s);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub mode: RunMode,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub tau_max: f64,
    pub g_floor: f64,
    pub g_lower_bound: f64,
    pub series: EpochSeries,
    pub checkpoints: Vec<Checkpoint>,
    pub bounds: StepBounds,
    pub tau: TauAnalysis,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_text: Option<TauAnalysis>,
    pub knn_accuracy: f64,
    pub wall_clock_secs: f64,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Cosine k-nearest-neighbour accuracy on a random held-out split. Ties in
/// the vote go to the lowest class id; ties in similarity to the lower row.
pub fn knn_accuracy(
    embeddings: &DenseMatrix,
    labels: &[usize],
    k: usize,
    held_out_fraction: f64,
    stream: &mut RandomStream,
) -> Result<f64> {
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(Error::LengthMismatch { left: labels.len(), right: n });
    }
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::config(format!("knn k must be odd (got {k})")));
    }
    if !(held_out_fraction > 0.0 && held_out_fraction < 1.0) {
        return Err(Error::config(format!("held-out fraction must be in (0, 1) (got {held_out_fraction})")));
    }
    let perm = stream.permutation(n);
    let n_test = ((n as f64 * held_out_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
    let (test, train) = perm.split_at(n_test.min(n));
    if train.len() < k {
        return Err(Error::TooShort { min: k, got: train.len() });
    }
    let unit: Vec<Vec<f64>> = embeddings
        .iter_rows()
        .map(|r| {
            let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter().map(|v| v / norm).collect()
            } else {
                vec![0.0; r.len()]
            }
        })
        .collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let correct: usize = test
        .par_iter()
        .map(|&q| {
            let mut sims: Vec<(f64, usize)> = train
                .iter()
                .map(|&j| (unit[q].iter().zip(&unit[j]).map(|(a, b)| a * b).sum(), j))
                .collect();
            sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut votes = vec![0usize; classes];
            for &(_, j) in &sims[..k] {
                votes[labels[j]] += 1;
            }
            let mut best = 0;
            for (c, &v) in votes.iter().enumerate() {
                if v > votes[best] {
                    best = c;
                }
            }
            usize::from(best == labels[q])
        })
        .sum();
    Ok(correct as f64 / test.len() as f64)
}

/// One row of a temperature table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TauRow {
    pub index: usize,
    pub label: usize,
    pub tau: f64,
    pub s: f64,
}

/// Writes `index,label,tau,s`, one row per sample in index order, with
/// 17 significant digits.
pub fn export_tau_csv(taus: &[f64], s: &[f64], labels: &[usize], path: &Path) -> Result<()> {
    if taus.len() != labels.len() || s.len() != labels.len() {
        return Err(Error::LengthMismatch { left: taus.len(), right: labels.len() });
    }
    let mut out = String::from("index,label,tau,s\n");
    for (i, ((t, sv), l)) in taus.iter().zip(s).zip(labels).enumerate() {
        let _ = writeln!(out, "{i},{l},{t},{sv}");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_tau_csv(path: &Path) -> Result<Vec<TauRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tau_csv(&text)
}

pub fn parse_tau_csv(text: &str) -> Result<Vec<TauRow>> {
    let bad = |detail: String| Error::Malformed { what: "tau csv", detail };
    let mut lines = text.lines();
    if lines.next() != Some("index,label,tau,s") {
        return Err(bad("missing header".into()));
    }
    lines
        .enumerate()
        .map(|(ln, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(format!("line {}: expected 4 fields", ln + 2)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("line {}: {e}", ln + 2)));
            let int = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("line {}: {e}", ln + 2)));
            Ok(TauRow { index: int(f[0])?, label: int(f[1])?, tau: num(f[2])?, s: num(f[3])? })
        })
        .collect()
}

/// Per-cluster mean τ and its rank correlation with cluster size.
pub fn analyze_taus(taus: &[f64], labels: &[usize], cluster_sizes: &[usize]) -> Result<TauAnalysis> {
    let k = cluster_sizes.len();
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&t, &l) in taus.iter().zip(labels) {
        sums[l] += t;
        counts[l] += 1;
    }
    let cluster_mean_tau: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
        .collect();
    let sizes: Vec<f64> = cluster_sizes.iter().map(|&s| s as f64).collect();
    let spearman_size_tau = if k >= 3 { spearman_rank_corr(&sizes, &cluster_mean_tau)? } else { 0.0 };
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| cluster_sizes[b].cmp(&cluster_sizes[a]).then(a.cmp(&b)));
    let take = 3.min(k);
    let avg = |ids: &[usize]| ids.iter().map(|&c| cluster_mean_tau[c]).sum::<f64>() / ids.len() as f64;
    Ok(TauAnalysis {
        final_tau: taus.to_vec(),
        cluster_sizes: cluster_sizes.to_vec(),
        top3_mean_tau: avg(&order[..take]),
        bottom3_mean_tau: avg(&order[k - take..]),
        cluster_mean_tau,
        spearman_size_tau,
    })
}

/// Splits a permutation into batches of `batch_size`; a trailing remainder
/// of one sample joins the previous batch.
pub fn epoch_batches(perm: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = perm.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() < 2) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

fn tau_mapping_sq(taus: &[f64], grad: &[f64], eta: f64, cfg: &RgclConfig) -> f64 {
    if eta <= 0.0 {
        return 0.0;
    }
    taus.iter()
        .zip(grad)
        .map(|(&t, &g)| ((t - project_tau(t - eta * g, cfg)) / eta).powi(2))
        .sum()
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn step_config(base: &RgclConfig, factor: f64) -> RgclConfig {
    RgclConfig {
        eta_w: base.eta_w * factor,
        eta_tau: base.eta_tau * factor,
        ..base.clone()
    }
}

/// Everything a unimodal run produces.
#[derive(Clone, Debug)]
pub struct UnimodalRun {
    pub report: Report,
    pub dataset: SynthDataset,
    pub params: EncoderParams,
    pub optimizer: OptimizerState<AnchorState>,
}

/// Trains on long-tailed clusters with iSogCLR, or with frozen
/// temperatures in `sogclr-baseline` mode.
pub fn run_train_unimodal(cfg: &ExperimentConfig) -> Result<UnimodalRun> {
    cfg.validate()?;
    if cfg.mode == RunMode::Bimodal {
        return Err(Error::config("run_train_unimodal needs mode isogclr or sogclr-baseline"));
    }
    let started = Instant::now();
    let rgcl = cfg.rgcl();
    let data = gen_longtail_clusters(&cfg.longtail_params())?;
    let n = data.len();
    let root = RandomStream::new(cfg.seed);
    let mut params = EncoderParams::init(cfg.encoder_shape(cfg.d_in), &root.substream("encoder"));
    let mut opt = OptimizerState::new_unimodal(n, params.num_params(), &rgcl, cfg.optimizer_mode());
    let eval_views = {
        let mut s = root.substream("eval");
        let mut a = DenseMatrix::zeros(n, cfg.d_in);
        let mut b = DenseMatrix::zeros(n, cfg.d_in);
        for i in 0..n {
            a.row_mut(i).copy_from_slice(&augment(data.inputs.row(i), cfg.aug_strength, &mut s));
            b.row_mut(i).copy_from_slice(&augment(data.inputs.row(i), cfg.aug_strength, &mut s));
        }
        UnimodalViews::new(a, b)?
    };
    let tau_eta = if opt.mode == OptimizerMode::FixedTau { 0.0 } else { rgcl.eta_tau * rgcl.tau_scale(n) };
    let evaluate = |params: &EncoderParams, taus: &[f64], epoch: usize| -> Result<Checkpoint> {
        let g = objective_unimodal_with_grad(params, &eval_views, taus, &rgcl)?;
        Ok(Checkpoint {
            epoch,
            exact_objective: g.value,
            grad_mapping_norm_sq: sq_norm(&g.grad_params.to_flat()) + tau_mapping_sq(taus, &g.grad_tau, tau_eta, &rgcl),
        })
    };

    let mut stream = root.substream("train");
    let mut series = EpochSeries::default();
    let mut checkpoints = vec![evaluate(&params, &opt.taus(), 0)?];
    let mut bounds = StepBounds::new(false);
    for epoch in 0..cfg.epochs {
        let step_cfg = step_config(&rgcl, cfg.lr_factor(epoch));
        for idx in epoch_batches(&stream.permutation(n), cfg.batch_size) {
            let batch = batch_from_indices(idx, &data.inputs, cfg.aug_strength, &mut stream)?;
            let rep = step_on_batch(&mut opt, &mut params, &batch, &step_cfg)?;
            bounds.record(&rep);
        }
        let taus = opt.taus();
        series.objective_estimate.push(objective_from_s(&opt.anchors, &rgcl));
        series.tau.push(&taus);
        let done = epoch + 1;
        if done % cfg.eval_every == 0 || done == cfg.epochs {
            checkpoints.push(evaluate(&params, &taus, done)?);
        }
    }

    let emb = encode(&params, &data.inputs)?.embeddings;
    let knn = knn_accuracy(&emb, &data.labels, cfg.knn_k, cfg.held_out_fraction, &mut root.substream("knn"))?;
    let tau = analyze_taus(&opt.taus(), &data.labels, &data.cluster_sizes)?;
    let report = Report {
        mode: cfg.mode,
        config: cfg.echo(),
        config_hash: cfg.hash(),
        tau_max: rgcl.tau_max(),
        g_floor: rgcl.g_floor(),
        g_lower_bound: rgcl.g_lower_bound(),
        series,
        checkpoints,
        bounds,
        tau,
        tau_text: None,
        knn_accuracy: knn,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(UnimodalRun { report, dataset: data, params, optimizer: opt })
}

fn objective_from_s(anchors: &[AnchorState], cfg: &RgclConfig) -> f64 {
    let terms: Vec<f64> = anchors
        .iter()
        .filter(|a| a.initialized)
        .map(|a| {
            let log_s = if cfg.symmetrize { 0.5 * (a.s.ln() + a.s_swapped.ln()) } else { a.s.ln() };
            a.tau * log_s + (a.tau - cfg.tau0) * cfg.rho
        })
        .collect();
    if terms.is_empty() {
        f64::NAN
    } else {
        mean(&terms)
    }
}

impl UnimodalRun {
    /// Writes `report.json`, `tau.csv`, `metrics.csv`, `encoder.bin` and
    /// `optimizer.bin`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let s: Vec<f64> = self.optimizer.anchors.iter().map(|a| a.s).collect();
        export_tau_csv(&self.optimizer.taus(), &s, &self.dataset.labels, &dir.join("tau.csv"))?;
        write_metrics_csv(&self.report, &dir.join("metrics.csv"))?;
        self.params.save(&dir.join("encoder.bin"))?;
        self.optimizer.save(&dir.join("optimizer.bin"))?;
        write_text(&dir.join("report.json"), &self.report.to_json()?)
    }
}

#[derive(Clone, Debug)]
pub struct BimodalRun {
    pub report: Report,
    pub dataset: BimodalSynthDataset,
    pub params_img: EncoderParams,
    pub params_txt: EncoderParams,
    pub optimizer: OptimizerState<BimodalAnchorState>,
}

/// Two-tower training on paired views of long-tailed latents.
pub fn run_train_bimodal(cfg: &ExperimentConfig) -> Result<BimodalRun> {
    cfg.validate()?;
    if cfg.mode != RunMode::Bimodal {
        return Err(Error::config("run_train_bimodal needs mode bimodal"));
    }
    let started = Instant::now();
    let rgcl = cfg.rgcl();
    let data = gen_bimodal_pairs(&cfg.bimodal_params())?;
    let n = data.len();
    let root = RandomStream::new(cfg.seed);
    let (img_stream, txt_stream) = if cfg.mirrored {
        (root.substream("encoder"), root.substream("encoder"))
    } else {
        (root.substream("encoder-img"), root.substream("encoder-txt"))
    };
    let mut params_img = EncoderParams::init(cfg.encoder_shape(cfg.d_img), &img_stream);
    let mut params_txt = EncoderParams::init(cfg.encoder_shape(cfg.d_txt), &txt_stream);
    let total = params_img.num_params() + params_txt.num_params();
    let mut opt = OptimizerState::new_bimodal(n, total, &rgcl, cfg.optimizer_mode());
    let pairs = PairedInputs::new(data.images.clone(), data.texts.clone())?;
    let tau_eta = rgcl.eta_tau * rgcl.tau_scale(n);
    let evaluate = |pi: &EncoderParams, pt: &EncoderParams, tv: &[f64], tt: &[f64], epoch: usize| -> Result<Checkpoint> {
        let g = objective_bimodal_with_grad(pi, pt, &pairs, tv, tt, &rgcl)?;
        Ok(Checkpoint {
            epoch,
            exact_objective: g.value,
            grad_mapping_norm_sq: sq_norm(&g.grad_images.to_flat())
                + sq_norm(&g.grad_texts.to_flat())
                + tau_mapping_sq(tv, &g.grad_tau_v, tau_eta, &rgcl)
                + tau_mapping_sq(tt, &g.grad_tau_t, tau_eta, &rgcl),
        })
    };

    let mut stream = root.substream("train");
    let mut series = EpochSeries { tau_text: Some(TauSeries::default()), ..EpochSeries::default() };
    let mut checkpoints = vec![evaluate(&params_img, &params_txt, &opt.taus_v(), &opt.taus_t(), 0)?];
    let mut bounds = StepBounds::new(true);
    for epoch in 0..cfg.epochs {
        let step_cfg = step_config(&rgcl, cfg.lr_factor(epoch));
        for idx in epoch_batches(&stream.permutation(n), cfg.batch_size) {
            let batch = pair_batch_from_indices(idx, &pairs)?;
            let rep = step_bimodal_on_batch(&mut opt, &mut params_img, &mut params_txt, &batch, &step_cfg)?;
            bounds.record(&rep);
            let gap = batch
                .indices
                .iter()
                .map(|&i| (opt.anchors[i].tau_v - opt.anchors[i].tau_t).abs())
                .fold(0.0, f64::max);
            if let Some(g) = bounds.max_tau_gap.as_mut() {
                *g = g.max(gap);
            }
        }
        let (tv, tt) = (opt.taus_v(), opt.taus_t());
        series.objective_estimate.push(bimodal_objective_from_s(&opt.anchors, &rgcl));
        series.tau.push(&tv);
        if let Some(t) = series.tau_text.as_mut() {
            t.push(&tt);
        }
        let done = epoch + 1;
        if done % cfg.eval_every == 0 || done == cfg.epochs {
            checkpoints.push(evaluate(&params_img, &params_txt, &tv, &tt, done)?);
        }
    }

    let emb = encode(&params_img, &data.images)?.embeddings;
    let knn = knn_accuracy(&emb, &data.labels, cfg.knn_k, cfg.held_out_fraction, &mut root.substream("knn"))?;
    let report = Report {
        mode: cfg.mode,
        config: cfg.echo(),
        config_hash: cfg.hash(),
        tau_max: rgcl.tau_max(),
        g_floor: rgcl.g_floor(),
        g_lower_bound: rgcl.g_lower_bound(),
        series,
        checkpoints,
        bounds,
        tau: analyze_taus(&opt.taus_v(), &data.labels, &data.cluster_sizes)?,
        tau_text: Some(analyze_taus(&opt.taus_t(), &data.labels, &data.cluster_sizes)?),
        knn_accuracy: knn,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(BimodalRun { report, dataset: data, params_img, params_txt, optimizer: opt })
}

fn bimodal_objective_from_s(anchors: &[BimodalAnchorState], cfg: &RgclConfig) -> f64 {
    let terms: Vec<f64> = anchors
        .iter()
        .filter(|a| a.initialized)
        .map(|a| {
            a.tau_v * a.s_v.ln() + a.tau_t * a.s_t.ln() + (a.tau_v + a.tau_t - 2.0 * cfg.tau0) * cfg.rho
        })
        .collect();
    if terms.is_empty() {
        f64::NAN
    } else {
        mean(&terms)
    }
}

impl BimodalRun {
    /// Writes `report.json`, `tau.csv` (image side), `tau_text.csv`,
    /// `metrics.csv`, both encoders and `optimizer.bin`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let a = &self.optimizer.anchors;
        let labels = &self.dataset.labels;
        let sv: Vec<f64> = a.iter().map(|x| x.s_v).collect();
        let st: Vec<f64> = a.iter().map(|x| x.s_t).collect();
        export_tau_csv(&self.optimizer.taus_v(), &sv, labels, &dir.join("tau.csv"))?;
        export_tau_csv(&self.optimizer.taus_t(), &st, labels, &dir.join("tau_text.csv"))?;
        write_metrics_csv(&self.report, &dir.join("metrics.csv"))?;
        self.params_img.save(&dir.join("encoder_img.bin"))?;
        self.params_txt.save(&dir.join("encoder_txt.bin"))?;
        self.optimizer.save(&dir.join("optimizer.bin"))?;
        write_text(&dir.join("report.json"), &self.report.to_json()?)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One row per epoch, `0..=epochs`; checkpoint columns are blank between
/// evaluations and the epoch-0 row has no running estimates.
pub fn write_metrics_csv(report: &Report, path: &Path) -> Result<()> {
    let mut out = String::from(
        "epoch,objective_estimate,tau_mean,tau_std,tau_min,tau_max,exact_objective,grad_mapping_norm_sq\n",
    );
    let s = &report.series;
    for epoch in 0..=s.objective_estimate.len() {
        let _ = write!(out, "{epoch}");
        if epoch == 0 {
            out.push_str(",,,,,");
        } else {
            let e = epoch - 1;
            let _ = write!(
                out,
                ",{},{},{},{},{}",
                s.objective_estimate[e], s.tau.mean[e], s.tau.std[e], s.tau.min[e], s.tau.max[e]
            );
        }
        match report.checkpoints.iter().find(|c| c.epoch == epoch) {
            Some(c) => {
                let _ = writeln!(out, ",{},{}", c.exact_objective, c.grad_mapping_norm_sq);
            }
            None => out.push_str(",,\n"),
        }
    }
    write_text(path, &out)
}

/// Summary written by `gen-data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub mode: RunMode,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub n: usize,
    pub cluster_sizes: Vec<usize>,
    pub columns: usize,
}

/// Generates the dataset for `cfg` and writes `dataset.csv` and `report.json`.
pub fn run_gen_data(cfg: &ExperimentConfig, dir: &Path) -> Result<DatasetReport> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("dataset.csv");
    let (n, sizes, cols) = if cfg.mode == RunMode::Bimodal {
        let d = gen_bimodal_pairs(&cfg.bimodal_params())?;
        d.write_csv(&path)?;
        (d.len(), d.cluster_sizes, cfg.d_img + cfg.d_txt)
    } else {
        let d = gen_longtail_clusters(&cfg.longtail_params())?;
        d.write_csv(&path)?;
        (d.len(), d.cluster_sizes, cfg.d_in)
    };
    let report = DatasetReport {
        mode: cfg.mode,
        config: cfg.echo(),
        config_hash: cfg.hash(),
        n,
        cluster_sizes: sizes,
        columns: cols,
    };
    write_text(&dir.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(report)
}

/// Summary written by `dump-tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpReport {
    pub step: u64,
    pub n: usize,
    pub initialized: usize,
    pub tau_mean: f64,
    pub tau_min: f64,
    pub tau_max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau_text_mean: Option<f64>,
}

/// Reads an optimizer checkpoint and writes its temperature table(s) and
/// `report.json`. Labels come from regenerating the dataset of `cfg`.
pub fn run_dump_tau(cfg: &ExperimentConfig, checkpoint: &Path, dir: &Path) -> Result<DumpReport> {
    cfg.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = std::fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let stats = |t: &[f64]| {
        (
            mean(t),
            t.iter().copied().fold(f64::INFINITY, f64::min),
            t.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let report = if cfg.mode == RunMode::Bimodal {
        let opt = OptimizerState::<BimodalAnchorState>::read_checkpoint(&bytes[..])?;
        let labels = gen_bimodal_pairs(&cfg.bimodal_params())?.labels;
        check_len(labels.len(), opt.n())?;
        let sv: Vec<f64> = opt.anchors.iter().map(|a| a.s_v).collect();
        let st: Vec<f64> = opt.anchors.iter().map(|a| a.s_t).collect();
        let (tv, tt) = (opt.taus_v(), opt.taus_t());
        export_tau_csv(&tv, &sv, &labels, &dir.join("tau.csv"))?;
        export_tau_csv(&tt, &st, &labels, &dir.join("tau_text.csv"))?;
        let (m, lo, hi) = stats(&tv);
        DumpReport {
            step: opt.step,
            n: opt.n(),
            initialized: opt.anchors.iter().filter(|a| a.initialized).count(),
            tau_mean: m,
            tau_min: lo,
            tau_max: hi,
            tau_text_mean: Some(mean(&tt)),
        }
    } else {
        let opt = OptimizerState::<AnchorState>::read_checkpoint(&bytes[..])?;
        let labels = gen_longtail_clusters(&cfg.longtail_params())?.labels;
        check_len(labels.len(), opt.n())?;
        let s: Vec<f64> = opt.anchors.iter().map(|a| a.s).collect();
        let t = opt.taus();
        export_tau_csv(&t, &s, &labels, &dir.join("tau.csv"))?;
        let (m, lo, hi) = stats(&t);
        DumpReport {
            step: opt.step,
            n: opt.n(),
            initialized: opt.anchors.iter().filter(|a| a.initialized).count(),
            tau_mean: m,
            tau_min: lo,
            tau_max: hi,
            tau_text_mean: None,
        }
    };
    write_text(&dir.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(report)
}

fn check_len(labels: usize, anchors: usize) -> Result<()> {
    if labels != anchors {
        return Err(Error::ShapeMismatch {
            context: "checkpoint vs dataset",
            expected: format!("{labels} anchors"),
            got: format!("{anchors} anchors"),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: RunMode) -> ExperimentConfig {
        ExperimentConfig {
            mode,
            k: 4,
            n: 60,
            ratio: 4.0,
            d_in: 6,
            d_latent: 4,
            d_img: 6,
            d_txt: 5,
            hidden: 8,
            embed: 4,
            batch_size: 16,
            epochs: 3,
            eval_every: 1,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let c = ExperimentConfig::default()
            .with_overrides(&["rho=0.2", "mode=bimodal", "tau_grad_scale=1.5", "activation=identity"])
            .unwrap();
        assert_eq!(c.rho, 0.2);
        assert_eq!(c.mode, RunMode::Bimodal);
        assert_eq!(c.tau_grad_scale, Some(1.5));
        assert_eq!(c.activation, Activation::Identity);
        assert!(ExperimentConfig::default().with_overrides(&["nope=1"]).is_err());
        assert!(ExperimentConfig::default().with_overrides(&["rho"]).is_err());
        assert!(ExperimentConfig::from_json(r#"{"rho": 0.2, "bogus": 1}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"knn_k": 4}"#).is_err());
        let c = ExperimentConfig::from_json(r#"{"epochs": 3, "out_dir": "x"}"#).unwrap();
        assert_eq!(c.epochs, 3);
        assert!(c.echo().get("out_dir").is_none());
    }

    #[test]
    fn hash_tracks_config() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig { out_dir: Some("elsewhere".into()), ..a.clone() };
        let c = ExperimentConfig { rho: 0.2, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn knn_examples() {
        // one-hot classes, k = 1
        let k = 4;
        let labels: Vec<usize> = (0..40).map(|i| i % k).collect();
        let rows: Vec<Vec<f64>> = labels.iter().map(|&l| (0..k).map(|c| f64::from(u8::from(c == l))).collect()).collect();
        let emb = DenseMatrix::from_rows(&rows).unwrap();
        let acc = knn_accuracy(&emb, &labels, 1, 0.25, &mut RandomStream::new(1)).unwrap();
        assert_eq!(acc, 1.0);
        // k = whole train set: every prediction is the majority class 0
        let labels: Vec<usize> = (0..20).map(|i| usize::from(i >= 16)).collect();
        let emb = DenseMatrix::from_vec(20, 3, RandomStream::new(3).draw_gaussian(60)).unwrap();
        let held_out = RandomStream::new(9).permutation(20)[0];
        let acc = knn_accuracy(&emb, &labels, 19, 0.05, &mut RandomStream::new(9)).unwrap();
        assert_eq!(acc, f64::from(u8::from(labels[held_out] == 0)));
        assert!(knn_accuracy(&emb, &labels, 2, 0.2, &mut RandomStream::new(1)).is_err());
        assert!(matches!(
            knn_accuracy(&emb, &labels, 17, 0.2, &mut RandomStream::new(1)),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn knn_chance_level_on_shuffled_labels() {
        let mut accs = Vec::new();
        for seed in 0..10 {
            let mut s = RandomStream::new(100 + seed);
            let emb = DenseMatrix::from_vec(1000, 8, s.draw_gaussian(8000)).unwrap();
            let labels: Vec<usize> = s.permutation(1000).into_iter().map(|i| i % 10).collect();
            accs.push(knn_accuracy(&emb, &labels, 5, 0.3, &mut s).unwrap());
        }
        let m = mean(&accs);
        assert!((m - 0.1).abs() <= 0.03, "{m}");
    }

    #[test]
    fn tau_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tau.csv");
        let taus = [0.05, 0.1 + 0.2, 1.0 / 3.0, 6.716_666_666_666_667];
        let s = [1e-300, 0.123_456_789_012_345_68, 2.0f64.sqrt(), 7.0];
        export_tau_csv(&taus, &s, &[0, 1, 1, 2], &path).unwrap();
        let rows = read_tau_csv(&path).unwrap();
        assert_eq!(rows.len(), 4);
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.index, i);
            assert_eq!(r.tau.to_bits(), taus[i].to_bits());
            assert_eq!(r.s.to_bits(), s[i].to_bits());
        }
        assert!(parse_tau_csv("index,label\n").is_err());
    }

    #[test]
    fn epoch_batching() {
        let perm: Vec<usize> = (0..10).collect();
        assert_eq!(epoch_batches(&perm, 4).iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(epoch_batches(&perm, 3).iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 4]);
        assert_eq!(epoch_batches(&perm, 10).len(), 1);
    }

    #[test]
    fn zero_epochs_reports_initial_state() {
        let cfg = ExperimentConfig { epochs: 0, ..small(RunMode::Isogclr) };
        let run = run_train_unimodal(&cfg).unwrap();
        assert!(run.report.series.objective_estimate.is_empty());
        assert_eq!(run.report.checkpoints.len(), 1);
        assert!(run.report.tau.final_tau.iter().all(|&t| t == cfg.tau_init));
        let cfg = ExperimentConfig { epochs: 0, ..small(RunMode::Bimodal) };
        let run = run_train_bimodal(&cfg).unwrap();
        assert_eq!(run.report.checkpoints.len(), 1);
    }

    #[test]
    fn baseline_keeps_tau_constant() {
        let cfg = small(RunMode::SogclrBaseline);
        let run = run_train_unimodal(&cfg).unwrap();
        assert!(run.report.tau.final_tau.iter().all(|&t| t == cfg.tau_init));
        assert_eq!(run.report.series.tau.mean.len(), cfg.epochs);
    }

    #[test]
    fn runs_are_reproducible_and_bounded() {
        let cfg = small(RunMode::Isogclr);
        let a = run_train_unimodal(&cfg).unwrap();
        let b = run_train_unimodal(&cfg).unwrap();
        let strip = |r: &Report| Report { wall_clock_secs: 0.0, ..r.clone() };
        assert_eq!(strip(&a.report).to_json().unwrap(), strip(&b.report).to_json().unwrap());
        let rg = cfg.rgcl();
        assert!(a.report.bounds.min_tau >= rg.tau0 && a.report.bounds.max_tau <= rg.tau_max());
        assert!(a.report.bounds.min_g >= rg.g_lower_bound() - 1e-12);
        assert_eq!(a.report.checkpoints.len(), cfg.epochs + 1);
    }

    #[test]
    fn mirrored_bimodal_has_equal_temperatures() {
        let cfg = ExperimentConfig { mirrored: true, d_txt: 6, ..small(RunMode::Bimodal) };
        let run = run_train_bimodal(&cfg).unwrap();
        assert_eq!(run.report.bounds.max_tau_gap, Some(0.0));
        assert_eq!(run.optimizer.taus_v(), run.optimizer.taus_t());
        let t = run.report.tau_text.as_ref().unwrap();
        assert_eq!(t.cluster_mean_tau, run.report.tau.cluster_mean_tau);
    }

    #[test]
    fn outputs_and_dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(RunMode::Isogclr);
        let run = run_train_unimodal(&cfg).unwrap();
        run.write(dir.path()).unwrap();
        let rows = read_tau_csv(&dir.path().join("tau.csv")).unwrap();
        assert_eq!(rows.len(), cfg.n);
        let metrics = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), cfg.epochs + 2);
        let out = dir.path().join("dump");
        let rep = run_dump_tau(&cfg, &dir.path().join("optimizer.bin"), &out).unwrap();
        assert_eq!(rep.n, cfg.n);
        assert_eq!(
            std::fs::read(out.join("tau.csv")).unwrap(),
            std::fs::read(dir.path().join("tau.csv")).unwrap()
        );
        let g = run_gen_data(&cfg, &dir.path().join("data")).unwrap();
        assert_eq!(g.n, cfg.n);
    }
}
