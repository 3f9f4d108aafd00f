//! Deterministic synthetic data with a controllable long tail.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, DenseMatrix, RandomStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LongTailParams {
    pub k: usize,
    pub n: usize,
    /// Largest over smallest cluster size.
    pub ratio: f64,
    pub d_in: usize,
    pub noise: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    /// n × d_in, un-normalized.
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
    pub centers: DenseMatrix,
    pub params: LongTailParams,
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_feature_csv(path, &self.labels, &[("f", &self.inputs)])
    }
}

/// Cluster sizes proportional to `ratio^(−j/(k−1))`, rounded with the
/// largest-remainder method so they sum to `n`. Ties in the remainder go to
/// the lower cluster id.
pub fn longtail_sizes(k: usize, n: usize, ratio: f64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::config(format!("need k >= 2 clusters (got {k})")));
    }
    if n < k {
        return Err(Error::config(format!("need n >= k (n = {n}, k = {k})")));
    }
    if !(ratio >= 1.0 && ratio.is_finite()) {
        return Err(Error::config(format!("imbalance ratio must be >= 1 (got {ratio})")));
    }
    let weights: Vec<f64> = (0..k)
        .map(|j| ratio.powf(-(j as f64) / (k - 1) as f64))
        .collect();
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = sizes.iter().sum();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &j in order.iter().take(n - assigned) {
        sizes[j] += 1;
    }
    if let Some(j) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::config(format!(
            "cluster {j} would be empty (n = {n}, k = {k}, ratio = {ratio})"
        )));
    }
    Ok(sizes)
}

fn unit_gaussian(stream: &mut RandomStream, d: usize) -> Vec<f64> {
    loop {
        let v = stream.draw_gaussian(d);
        let nv = norm(&v);
        if nv > 1e-12 {
            return v.into_iter().map(|x| x / nv).collect();
        }
    }
}

/// `k` random unit centers with `center + noise·N(0, I)` samples around
/// each. Samples are stored cluster by cluster.
pub fn gen_longtail_clusters(params: &LongTailParams) -> Result<SynthDataset> {
    let LongTailParams {
        k,
        n,
        ratio,
        d_in,
        noise,
        seed,
    } = *params;
    if d_in == 0 {
        return Err(Error::config("d_in must be >= 1"));
    }
    if noise.is_nan() || noise < 0.0 {
        return Err(Error::config("noise must be >= 0"));
    }
    let sizes = longtail_sizes(k, n, ratio)?;
    let root = RandomStream::new(seed);
    let mut center_stream = root.substream("centers");
    let mut centers = DenseMatrix::zeros(k, d_in);
    for j in 0..k {
        centers
            .row_mut(j)
            .copy_from_slice(&unit_gaussian(&mut center_stream, d_in));
    }
    let mut inputs = DenseMatrix::zeros(n, d_in);
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for (j, &size) in sizes.iter().enumerate() {
        let mut s = root.substream_indexed("cluster", j as u64);
        for _ in 0..size {
            let eps = s.draw_gaussian(d_in);
            for (c, (dst, e)) in inputs.row_mut(row).iter_mut().zip(&eps).enumerate() {
                *dst = centers.get(j, c) + noise * e;
            }
            labels.push(j);
            row += 1;
        }
    }
    Ok(SynthDataset {
        inputs,
        labels,
        cluster_sizes: sizes,
        centers,
        params: params.clone(),
    })
}

/// `x + strength·N(0, I)`.
pub fn augment(x: &[f64], strength: f64, stream: &mut RandomStream) -> Vec<f64> {
    if strength == 0.0 {
        return x.to_vec();
    }
    x.iter().map(|v| v + strength * stream.gaussian()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BimodalParams {
    pub k: usize,
    pub n: usize,
    pub ratio: f64,
    pub d_latent: usize,
    pub d_img: usize,
    pub d_txt: usize,
    pub noise: f64,
    pub seed: u64,
    /// Use one map and one noise stream for both modalities.
    pub mirrored: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BimodalSynthDataset {
    pub images: DenseMatrix,
    pub texts: DenseMatrix,
    pub labels: Vec<usize>,
    pub cluster_sizes: Vec<usize>,
    /// d_img × d_latent
    pub map_img: DenseMatrix,
    /// d_txt × d_latent
    pub map_txt: DenseMatrix,
    pub params: BimodalParams,
}

impl BimodalSynthDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_feature_csv(path, &self.labels, &[("x", &self.images), ("t", &self.texts)])
    }
}

fn random_map(stream: &mut RandomStream, rows: usize, cols: usize) -> DenseMatrix {
    let scale = 1.0 / (cols as f64).sqrt();
    let data = stream.draw_gaussian(rows * cols).into_iter().map(|v| v * scale).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("sized above")
}

fn project_with_noise(
    map: &DenseMatrix,
    latent: &DenseMatrix,
    noise: f64,
    stream: &mut RandomStream,
) -> DenseMatrix {
    let mut out = DenseMatrix::zeros(latent.rows(), map.rows());
    for r in 0..latent.rows() {
        let y = map.matvec(latent.row(r));
        out.row_mut(r).copy_from_slice(&augment(&y, noise, stream));
    }
    out
}

/// Paired views `M_img·z + noise`, `M_txt·z + noise` of long-tailed latents.
pub fn gen_bimodal_pairs(params: &BimodalParams) -> Result<BimodalSynthDataset> {
    if params.d_latent < 2 || params.d_img < 2 || params.d_txt < 2 {
        return Err(Error::config("bimodal dimensions must be >= 2"));
    }
    if params.mirrored && params.d_img != params.d_txt {
        return Err(Error::config("mirrored modalities need d_img == d_txt"));
    }
    let latent = gen_longtail_clusters(&LongTailParams {
        k: params.k,
        n: params.n,
        ratio: params.ratio,
        d_in: params.d_latent,
        noise: params.noise,
        seed: params.seed,
    })?;
    let root = RandomStream::new(params.seed);
    let map_img = random_map(&mut root.substream("map-img"), params.d_img, params.d_latent);
    let map_txt = if params.mirrored {
        map_img.clone()
    } else {
        random_map(&mut root.substream("map-txt"), params.d_txt, params.d_latent)
    };
    let images = project_with_noise(
        &map_img,
        &latent.inputs,
        params.noise,
        &mut root.substream("noise-img"),
    );
    let text_noise = if params.mirrored { "noise-img" } else { "noise-txt" };
    let texts = project_with_noise(
        &map_txt,
        &latent.inputs,
        params.noise,
        &mut root.substream(text_noise),
    );
    Ok(BimodalSynthDataset {
        images,
        texts,
        labels: latent.labels,
        cluster_sizes: latent.cluster_sizes,
        map_img,
        map_txt,
        params: params.clone(),
    })
}

/// Writes `id,label,<prefix>0,...` with 17 significant digits per value.
pub fn write_feature_csv(
    path: &Path,
    labels: &[usize],
    blocks: &[(&str, &DenseMatrix)],
) -> Result<()> {
    let mut out = String::from("id,label");
    for (prefix, m) in blocks {
        for c in 0..m.cols() {
            let _ = write!(out, ",{prefix}{c}");
        }
    }
    out.push('\n');
    for (i, label) in labels.iter().enumerate() {
        let _ = write!(out, "{i},{label}");
        for (_, m) in blocks {
            for v in m.row(i) {
                let _ = write!(out, ",{v}");
            }
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parsed dataset CSV: labels plus one matrix per column prefix, in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureCsv {
    pub labels: Vec<usize>,
    pub blocks: Vec<(String, DenseMatrix)>,
}

pub fn read_feature_csv(path: &Path) -> Result<FeatureCsv> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_feature_csv(&text)
}

pub fn parse_feature_csv(text: &str) -> Result<FeatureCsv> {
    let bad = |detail: String| Error::Malformed {
        what: "dataset csv",
        detail,
    };
    let mut lines = text.lines();
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| bad("missing header".into()))?
        .split(',')
        .collect();
    if header.len() < 2 || header[0] != "id" || header[1] != "label" {
        return Err(bad("header must start with id,label".into()));
    }
    // group feature columns by their alphabetic prefix
    let mut groups: Vec<(String, usize)> = Vec::new();
    for col in &header[2..] {
        let prefix: String = col.chars().take_while(|c| !c.is_ascii_digit()).collect();
        match groups.last_mut() {
            Some((p, count)) if *p == prefix => *count += 1,
            _ => groups.push((prefix, 1)),
        }
    }
    let mut labels = Vec::new();
    let mut data: Vec<Vec<f64>> = groups.iter().map(|_| Vec::new()).collect();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(bad(format!("line {}: expected {} fields", lineno + 2, header.len())));
        }
        let id: usize = fields[0].parse().map_err(|e| bad(format!("id: {e}")))?;
        if id != labels.len() {
            return Err(bad(format!("ids must be consecutive from 0 (got {id})")));
        }
        labels.push(fields[1].parse().map_err(|e| bad(format!("label: {e}")))?);
        let mut col = 2;
        for (g, (_, count)) in groups.iter().enumerate() {
            for f in &fields[col..col + count] {
                data[g].push(f.parse().map_err(|e| bad(format!("value {f}: {e}")))?);
            }
            col += count;
        }
    }
    let n = labels.len();
    let blocks = groups
        .into_iter()
        .zip(data)
        .map(|((prefix, count), values)| Ok((prefix, DenseMatrix::from_vec(n, count, values)?)))
        .collect::<Result<_>>()?;
    Ok(FeatureCsv { labels, blocks })
}
