//! Two-layer encoders whose outputs are projected onto the unit sphere.
//!
//! `x ↦ y = o / ‖o‖` with `o = W2·act(W1·x + b1) + b2`. Backprop is written
//! out by hand: the normalization Jacobian `(I − y yᵀ) / ‖o‖` is applied per
//! row, then the affine and activation layers.

use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, norm, DenseMatrix, RandomStream};

/// Pre-normalization norms below this are rejected.
pub const DEGENERATE_NORM: f64 = 1e-12;

const ROW_BLOCK: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn code(self) -> u32 {
        match self {
            Activation::Identity => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Identity),
            1 => Ok(Activation::Tanh),
            other => Err(Error::Malformed {
                what: "encoder checkpoint",
                detail: format!("unknown activation code {other}"),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub input: usize,
    pub hidden: usize,
    pub embed: usize,
    pub activation: Activation,
}

impl EncoderShape {
    pub fn num_params(&self) -> usize {
        self.hidden * self.input + self.hidden + self.embed * self.hidden + self.embed
    }
}

/// Encoder weights. Also used as the container for parameter gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    /// hidden × input
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    /// embed × hidden
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
    pub activation: Activation,
}

impl EncoderParams {
    pub fn zeros(shape: EncoderShape) -> Self {
        Self {
            w1: DenseMatrix::zeros(shape.hidden, shape.input),
            b1: vec![0.0; shape.hidden],
            w2: DenseMatrix::zeros(shape.embed, shape.hidden),
            b2: vec![0.0; shape.embed],
            activation: shape.activation,
        }
    }

    /// Entries uniform in `[-1/√fan_in, 1/√fan_in]`, drawn from the
    /// `encoder-init` sub-stream of `stream`.
    pub fn init(shape: EncoderShape, stream: &RandomStream) -> Self {
        let mut rng = stream.substream("encoder-init");
        let mut p = Self::zeros(shape);
        let a1 = 1.0 / (shape.input as f64).sqrt();
        let a2 = 1.0 / (shape.hidden as f64).sqrt();
        for v in p.w1.as_mut_slice() {
            *v = rng.uniform(-a1, a1);
        }
        for v in &mut p.b1 {
            *v = rng.uniform(-a1, a1);
        }
        for v in p.w2.as_mut_slice() {
            *v = rng.uniform(-a2, a2);
        }
        for v in &mut p.b2 {
            *v = rng.uniform(-a2, a2);
        }
        p
    }

    pub fn shape(&self) -> EncoderShape {
        EncoderShape {
            input: self.w1.cols(),
            hidden: self.w1.rows(),
            embed: self.w2.rows(),
            activation: self.activation,
        }
    }

    pub fn num_params(&self) -> usize {
        self.shape().num_params()
    }

    /// Flat view: `W1` row-major, `b1`, `W2` row-major, `b2`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend_from_slice(self.w1.as_slice());
        out.extend_from_slice(&self.b1);
        out.extend_from_slice(self.w2.as_slice());
        out.extend_from_slice(&self.b2);
        out
    }

    pub fn from_flat(shape: EncoderShape, flat: &[f64]) -> Result<Self> {
        if flat.len() != shape.num_params() {
            return Err(Error::ShapeMismatch {
                context: "EncoderParams::from_flat",
                expected: shape.num_params().to_string(),
                got: flat.len().to_string(),
            });
        }
        let mut p = Self::zeros(shape);
        p.assign_flat(flat);
        Ok(p)
    }

    fn assign_flat(&mut self, flat: &[f64]) {
        let mut rest = flat;
        for dst in [
            self.w1.as_mut_slice(),
            &mut self.b1[..],
            self.w2.as_mut_slice(),
            &mut self.b2[..],
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&mut f64)) {
        self.w1.as_mut_slice().iter_mut().for_each(&mut f);
        self.b1.iter_mut().for_each(&mut f);
        self.w2.as_mut_slice().iter_mut().for_each(&mut f);
        self.b2.iter_mut().for_each(&mut f);
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &EncoderParams) {
        axpy(alpha, other.w1.as_slice(), self.w1.as_mut_slice());
        axpy(alpha, &other.b1, &mut self.b1);
        axpy(alpha, other.w2.as_slice(), self.w2.as_mut_slice());
        axpy(alpha, &other.b2, &mut self.b2);
    }

    /// Writes the binary checkpoint.
    ///
    /// Layout, little endian:
    ///
    /// ```text
    /// magic      [u8; 8] = b"RGCLENC1"
    /// activation u32     (0 identity, 1 tanh)
    /// reserved   u32     = 0
    /// input      u64
    /// hidden     u64
    /// embed      u64
    /// count      u64     = number of f64 values that follow
    /// values     [f64; count] in flat order (W1, b1, W2, b2)
    /// ```
    pub fn write_checkpoint(&self, mut w: impl Write) -> std::io::Result<()> {
        let shape = self.shape();
        w.write_all(ENCODER_MAGIC)?;
        w.write_all(&shape.activation.code().to_le_bytes())?;
        w.write_all(&0u32.to_le_bytes())?;
        for v in [shape.input, shape.hidden, shape.embed, shape.num_params()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for v in self.to_flat() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint(mut r: impl Read) -> Result<Self> {
        let bad = |detail: String| Error::Malformed {
            what: "encoder checkpoint",
            detail,
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| bad(e.to_string()))?;
        if &magic != ENCODER_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let activation = Activation::from_code(read_u32(&mut r).map_err(|e| bad(e.to_string()))?)?;
        let _reserved = read_u32(&mut r).map_err(|e| bad(e.to_string()))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = read_u64(&mut r).map_err(|e| bad(e.to_string()))? as usize;
        }
        let shape = EncoderShape {
            input: dims[0],
            hidden: dims[1],
            embed: dims[2],
            activation,
        };
        if dims[3] != shape.num_params() {
            return Err(bad(format!(
                "count {} does not match shape ({})",
                dims[3],
                shape.num_params()
            )));
        }
        let mut flat = vec![0.0; dims[3]];
        for v in &mut flat {
            *v = read_f64(&mut r).map_err(|e| bad(e.to_string()))?;
        }
        Self::from_flat(shape, &flat)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)
            .map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(&bytes[..])
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

const ENCODER_MAGIC: &[u8; 8] = b"RGCLENC1";

pub(crate) fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Unit-norm embeddings, one per row, with the dataset index of each row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub embeddings: DenseMatrix,
    pub indices: Vec<usize>,
}

impl EmbeddingBatch {
    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.embeddings.row(r)
    }
}

struct RowForward {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    out_norm: f64,
    y: Vec<f64>,
}

fn forward_row(p: &EncoderParams, x: &[f64], row: usize) -> Result<RowForward> {
    let mut hidden_pre = p.w1.matvec(x);
    for (h, b) in hidden_pre.iter_mut().zip(&p.b1) {
        *h += b;
    }
    let hidden: Vec<f64> = match p.activation {
        Activation::Identity => hidden_pre.clone(),
        Activation::Tanh => hidden_pre.iter().map(|v| v.tanh()).collect(),
    };
    let mut out = p.w2.matvec(&hidden);
    for (o, b) in out.iter_mut().zip(&p.b2) {
        *o += b;
    }
    let out_norm = norm(&out);
    if out_norm.is_nan() || out_norm < DEGENERATE_NORM {
        return Err(Error::DegenerateEmbedding {
            row,
            norm: out_norm,
        });
    }
    let y = out.iter().map(|v| v / out_norm).collect();
    Ok(RowForward {
        hidden_pre,
        hidden,
        out_norm,
        y,
    })
}

fn check_inputs(params: &EncoderParams, inputs: &DenseMatrix) -> Result<()> {
    if inputs.cols() != params.w1.cols() {
        return Err(Error::ShapeMismatch {
            context: "encode",
            expected: format!("{} input columns", params.w1.cols()),
            got: format!("{} columns", inputs.cols()),
        });
    }
    Ok(())
}

/// Embeds every row of `inputs`; row `r` gets dataset index `r`.
pub fn encode(params: &EncoderParams, inputs: &DenseMatrix) -> Result<EmbeddingBatch> {
    encode_indexed(params, inputs, (0..inputs.rows()).collect())
}

pub fn encode_indexed(
    params: &EncoderParams,
    inputs: &DenseMatrix,
    indices: Vec<usize>,
) -> Result<EmbeddingBatch> {
    check_inputs(params, inputs)?;
    let embed = params.w2.rows();
    let rows: Vec<Vec<f64>> = (0..inputs.rows())
        .into_par_iter()
        .map(|r| forward_row(params, inputs.row(r), r).map(|f| f.y))
        .collect::<Result<_>>()?;
    let mut embeddings = DenseMatrix::zeros(inputs.rows(), embed);
    for (r, y) in rows.iter().enumerate() {
        embeddings.row_mut(r).copy_from_slice(y);
    }
    Ok(EmbeddingBatch {
        embeddings,
        indices,
    })
}

fn backward_rows(
    params: &EncoderParams,
    inputs: &DenseMatrix,
    grad: &DenseMatrix,
    rows: std::ops::Range<usize>,
) -> Result<EncoderParams> {
    let mut g = EncoderParams::zeros(params.shape());
    for r in rows {
        let gy = grad.row(r);
        if gy.iter().all(|v| *v == 0.0) {
            continue;
        }
        let x = inputs.row(r);
        let f = forward_row(params, x, r)?;
        // (I − y yᵀ) gy / ‖o‖
        let proj = dot(&f.y, gy);
        let g_out: Vec<f64> = gy
            .iter()
            .zip(&f.y)
            .map(|(gv, yv)| (gv - yv * proj) / f.out_norm)
            .collect();
        for (k, &go) in g_out.iter().enumerate() {
            axpy(go, &f.hidden, g.w2.row_mut(k));
            g.b2[k] += go;
        }
        let mut g_hidden = params.w2.matvec_transposed(&g_out);
        if params.activation == Activation::Tanh {
            for (gh, z) in g_hidden.iter_mut().zip(&f.hidden) {
                *gh *= 1.0 - z * z;
            }
        }
        debug_assert_eq!(g_hidden.len(), f.hidden_pre.len());
        for (j, &gh) in g_hidden.iter().enumerate() {
            axpy(gh, x, g.w1.row_mut(j));
            g.b1[j] += gh;
        }
    }
    Ok(g)
}

/// Parameter gradient of `Σ_r ⟨grad_r, encode(x_r)⟩`.
///
/// Rows are processed in fixed blocks and the block results are summed in
/// block order, so the result does not depend on the worker count.
pub fn encode_backward(
    params: &EncoderParams,
    inputs: &DenseMatrix,
    grad_embeddings: &DenseMatrix,
) -> Result<EncoderParams> {
    check_inputs(params, inputs)?;
    if grad_embeddings.shape() != (inputs.rows(), params.w2.rows()) {
        return Err(Error::ShapeMismatch {
            context: "encode_backward",
            expected: format!("{}x{}", inputs.rows(), params.w2.rows()),
            got: format!("{}x{}", grad_embeddings.rows(), grad_embeddings.cols()),
        });
    }
    let n = inputs.rows();
    let blocks: Vec<EncoderParams> = (0..n.div_ceil(ROW_BLOCK))
        .into_par_iter()
        .map(|b| {
            let rows = b * ROW_BLOCK..((b + 1) * ROW_BLOCK).min(n);
            backward_rows(params, inputs, grad_embeddings, rows)
        })
        .collect::<Result<_>>()?;
    let mut total = EncoderParams::zeros(params.shape());
    for b in &blocks {
        total.add_scaled(1.0, b);
    }
    Ok(total)
}

/// Inner product of two unit vectors.
#[inline]
pub fn cosine_sim(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(input: usize, hidden: usize, embed: usize, activation: Activation) -> EncoderShape {
        EncoderShape {
            input,
            hidden,
            embed,
            activation,
        }
    }

    fn random_matrix(rows: usize, cols: usize, stream: &mut RandomStream) -> DenseMatrix {
        DenseMatrix::from_vec(rows, cols, stream.draw_gaussian(rows * cols)).unwrap()
    }

    /// Straight-line forward pass written independently of `forward_row`.
    fn reference_forward(p: &EncoderParams, x: &[f64]) -> Vec<f64> {
        let (h, d) = (p.w1.rows(), p.w1.cols());
        let mut z = vec![0.0; h];
        for i in 0..h {
            let mut acc = p.b1[i];
            for j in 0..d {
                acc += p.w1.get(i, j) * x[j];
            }
            z[i] = if p.activation == Activation::Tanh { acc.tanh() } else { acc };
        }
        let e = p.w2.rows();
        let mut o = vec![0.0; e];
        for k in 0..e {
            let mut acc = p.b2[k];
            for i in 0..h {
                acc += p.w2.get(k, i) * z[i];
            }
            o[k] = acc;
        }
        let nrm = o.iter().map(|v| v * v).sum::<f64>().sqrt();
        o.iter().map(|v| v / nrm).collect()
    }

    #[test]
    fn identity_normalizes_three_four() {
        let s = shape(2, 2, 2, Activation::Identity);
        let mut p = EncoderParams::zeros(s);
        p.w1 = DenseMatrix::identity(2);
        p.w2 = DenseMatrix::identity(2);
        let x = DenseMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap();
        let out = encode(&p, &x).unwrap();
        assert!((out.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((out.row(0)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = RandomStream::new(11);
        for act in [Activation::Identity, Activation::Tanh] {
            let p = EncoderParams::init(shape(5, 7, 3, act), &rng.substream("p"));
            let x = random_matrix(9, 5, &mut rng);
            let out = encode(&p, &x).unwrap();
            for r in 0..9 {
                let want = reference_forward(&p, x.row(r));
                for (a, b) in out.row(r).iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12);
                }
                assert!((norm(out.row(r)) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn degenerate_embedding_is_an_error() {
        let p = EncoderParams::zeros(shape(2, 2, 2, Activation::Identity));
        let x = DenseMatrix::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let err = encode(&p, &x).unwrap_err();
        assert!(err.to_string().starts_with("degenerate embedding"));
    }

    #[test]
    fn input_width_mismatch() {
        let p = EncoderParams::init(shape(3, 4, 2, Activation::Tanh), &RandomStream::new(1));
        let x = DenseMatrix::zeros(2, 4);
        assert!(matches!(encode(&p, &x), Err(Error::ShapeMismatch { .. })));
        let g = DenseMatrix::zeros(2, 3);
        let x = DenseMatrix::zeros(2, 3);
        assert!(matches!(
            encode_backward(&p, &x, &g),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let mut rng = RandomStream::new(5);
        let p = EncoderParams::init(shape(3, 4, 2, Activation::Tanh), &rng.substream("p"));
        let x = random_matrix(6, 3, &mut rng);
        let g = encode_backward(&p, &x, &DenseMatrix::zeros(6, 2)).unwrap();
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradient_along_output_vanishes() {
        let mut rng = RandomStream::new(6);
        let p = EncoderParams::init(shape(3, 4, 2, Activation::Tanh), &rng.substream("p"));
        let x = random_matrix(4, 3, &mut rng);
        let y = encode(&p, &x).unwrap().embeddings;
        let g = encode_backward(&p, &x, &y).unwrap();
        assert!(g.to_flat().iter().all(|v| v.abs() < 1e-14));
    }

    fn fd_check(seed: u64, act: Activation) -> f64 {
        let mut rng = RandomStream::new(seed);
        let s = shape(3, 4, 2, act);
        let p = EncoderParams::init(s, &rng.substream("p"));
        let x = random_matrix(5, 3, &mut rng);
        let up = random_matrix(5, 2, &mut rng);
        let scalar = |flat: &[f64]| {
            let q = EncoderParams::from_flat(s, flat).unwrap();
            let y = encode(&q, &x).unwrap().embeddings;
            dot(y.as_slice(), up.as_slice())
        };
        let analytic = encode_backward(&p, &x, &up).unwrap().to_flat();
        let base = p.to_flat();
        let step = 1e-5;
        let mut num = vec![0.0; base.len()];
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += step;
            let mut minus = base.clone();
            minus[i] -= step;
            num[i] = (scalar(&plus) - scalar(&minus)) / (2.0 * step);
        }
        let diff: f64 = analytic.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        diff / norm(&analytic).max(norm(&num)).max(1e-12)
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..50 {
            let act = if seed % 2 == 0 { Activation::Tanh } else { Activation::Identity };
            let rel = fd_check(seed, act);
            assert!(rel <= 1e-6, "seed {seed}: rel err {rel:e}");
        }
    }

    #[test]
    fn scale_covariance_without_bias() {
        let mut rng = RandomStream::new(8);
        let mut p = EncoderParams::init(shape(4, 5, 3, Activation::Identity), &rng.substream("p"));
        p.b1.iter_mut().for_each(|b| *b = 0.0);
        p.b2.iter_mut().for_each(|b| *b = 0.0);
        let x = random_matrix(3, 4, &mut rng);
        let mut x2 = x.clone();
        x2.as_mut_slice().iter_mut().for_each(|v| *v *= 2.0);
        let a = encode(&p, &x).unwrap().embeddings;
        let b = encode(&p, &x2).unwrap().embeddings;
        for (u, v) in a.as_slice().iter().zip(b.as_slice()) {
            assert!((u - v).abs() < 1e-14);
        }
    }

    #[test]
    fn cosine_examples() {
        let a = [0.6, 0.8];
        assert!((cosine_sim(&a, &a) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
        assert!((cosine_sim(&a, &[-0.6, -0.8]) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_and_json_round_trip() {
        let p = EncoderParams::init(shape(3, 5, 2, Activation::Tanh), &RandomStream::new(4));
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 8 + 32 + 8 * p.num_params());
        assert_eq!(EncoderParams::read_checkpoint(&buf[..]).unwrap(), p);
        let json = p.to_json().unwrap();
        let back: EncoderParams = serde_json::from_str(&json).unwrap();
        assert_eq!(back, p);
        buf[0] = b'X';
        assert!(EncoderParams::read_checkpoint(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn flat_view_round_trips(vals in proptest::collection::vec(-5.0f64..5.0, 3*4 + 4 + 2*4 + 2)) {
            let s = shape(3, 4, 2, Activation::Tanh);
            let p = EncoderParams::from_flat(s, &vals).unwrap();
            prop_assert_eq!(p.to_flat(), vals);
        }

        #[test]
        fn outputs_are_unit_norm(seed in 0u64..1000) {
            let mut rng = RandomStream::new(seed);
            let p = EncoderParams::init(shape(4, 6, 3, Activation::Tanh), &rng.substream("p"));
            let x = random_matrix(8, 4, &mut rng);
            let out = encode(&p, &x).unwrap();
            for r in 0..8 {
                prop_assert!((norm(out.row(r)) - 1.0).abs() <= 1e-9);
            }
        }
    }
}
