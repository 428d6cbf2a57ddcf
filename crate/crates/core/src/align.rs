//! Audio target transfer: DTW between silent and vocalized EMG features,
//! optionally refined by re-aligning in a CCA subspace, then copying the
//! vocalized mel frames onto the silent timeline.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::acoustic::MelSpectrogram;
use crate::error::{Error, Result};
use crate::signals::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Euclidean,
    Cosine,
}

impl Metric {
    pub fn distance(self, a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
        match self {
            Metric::Euclidean => a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Metric::Cosine => {
                let na = a.dot(&a).sqrt();
                let nb = b.dot(&b).sqrt();
                match (na > 0.0, nb > 0.0) {
                    (true, true) => (1.0 - a.dot(&b) / (na * nb)).max(0.0),
                    (false, false) => 0.0,
                    _ => 1.0,
                }
            }
        }
    }
}

/// Monotone alignment from (0, 0) to (N-1, M-1) with its accumulated cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentPath {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl AlignmentPath {
    /// For each `i` in `0..n`, the last `j` paired with it.
    pub fn last_partner(&self, n: usize) -> Vec<usize> {
        let mut out = vec![0; n];
        for &(i, j) in &self.pairs {
            out[i] = j;
        }
        out
    }

    pub fn transposed(&self) -> AlignmentPath {
        AlignmentPath {
            pairs: self.pairs.iter().map(|&(i, j)| (j, i)).collect(),
            total_cost: self.total_cost,
        }
    }
}

/// Pairwise frame distances, `a.nrows() x b.nrows()`.
pub fn distance_matrix(a: &Array2<f64>, b: &Array2<f64>, metric: Metric) -> Array2<f64> {
    Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| metric.distance(a.row(i), b.row(j)))
}

/// DTW over a precomputed distance matrix.
///
/// Steps are (1,1), (1,0) and (0,1); backtrace ties prefer them in that order.
pub fn dtw_from_costs(dist: &Array2<f64>) -> Result<AlignmentPath> {
    let (n, m) = dist.dim();
    if n == 0 || m == 0 {
        return Err(Error::empty("DTW needs at least one frame on each side"));
    }
    let mut acc = Array2::from_elem((n, m), f64::INFINITY);
    for i in 0..n {
        for j in 0..m {
            let best = if i == 0 && j == 0 {
                0.0
            } else {
                let diag = if i > 0 && j > 0 { acc[[i - 1, j - 1]] } else { f64::INFINITY };
                let up = if i > 0 { acc[[i - 1, j]] } else { f64::INFINITY };
                let left = if j > 0 { acc[[i, j - 1]] } else { f64::INFINITY };
                diag.min(up).min(left)
            };
            acc[[i, j]] = best + dist[[i, j]];
        }
    }
    if !acc[[n - 1, m - 1]].is_finite() {
        return Err(Error::Alignment("non-finite DTW cost".into()));
    }

    let mut pairs = vec![(n - 1, m - 1)];
    let (mut i, mut j) = (n - 1, m - 1);
    while i > 0 || j > 0 {
        let mut step = None;
        let mut best = f64::INFINITY;
        for (di, dj) in [(1, 1), (1, 0), (0, 1)] {
            if i >= di && j >= dj {
                let c = acc[[i - di, j - dj]];
                if c < best {
                    best = c;
                    step = Some((di, dj));
                }
            }
        }
        let (di, dj) = step.expect("a predecessor always exists off the origin");
        i -= di;
        j -= dj;
        pairs.push((i, j));
    }
    pairs.reverse();
    Ok(AlignmentPath {
        pairs,
        total_cost: acc[[n - 1, m - 1]],
    })
}

pub fn dtw_matrices(a: &Array2<f64>, b: &Array2<f64>, metric: Metric) -> Result<AlignmentPath> {
    if a.ncols() != b.ncols() {
        return Err(Error::param(format!(
            "cannot align {}-dim frames with {}-dim frames",
            a.ncols(),
            b.ncols()
        )));
    }
    dtw_from_costs(&distance_matrix(a, b, metric))
}

pub fn dtw_align(a: &FeatureMatrix, b: &FeatureMatrix, metric: Metric) -> Result<AlignmentPath> {
    dtw_matrices(a.data(), b.data(), metric)
}

/// Canonical correlation model between two paired views.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaModel {
    pub mean_a: Array1<f64>,
    pub mean_b: Array1<f64>,
    /// d_a x k
    pub proj_a: Array2<f64>,
    /// d_b x k
    pub proj_b: Array2<f64>,
    /// Correlation of each projected component on the fitting data, non-increasing.
    pub correlations: Vec<f64>,
    pub k: usize,
    pub ridge: f64,
}

fn to_na(m: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[[i, j]])
}

fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

fn inv_sqrt(c: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(c);
    if eig.eigenvalues.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::param("covariance block is not positive definite; raise the ridge"));
    }
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.transpose())
}

fn pearson(x: &Array1<f64>, y: &Array1<f64>) -> f64 {
    let mx = x.mean().unwrap_or(0.0);
    let my = y.mean().unwrap_or(0.0);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y.iter()) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
    }
}

/// Adds `ridge` times the mean variance to the diagonal, so the ridge is scale-free.
fn shrink(mut c: DMatrix<f64>, ridge: f64) -> DMatrix<f64> {
    let d = c.nrows();
    let level = (c.trace() / d as f64).max(f64::MIN_POSITIVE);
    for i in 0..d {
        c[(i, i)] += ridge * level;
    }
    c
}

/// Ridge-regularised CCA via the SVD of the whitened cross-covariance.
pub fn cca_fit(a: &Array2<f64>, b: &Array2<f64>, k: usize, ridge: f64) -> Result<CcaModel> {
    let n = a.nrows();
    if b.nrows() != n {
        return Err(Error::param(format!("CCA views have {n} and {} rows", b.nrows())));
    }
    if k == 0 || k > a.ncols().min(b.ncols()) {
        return Err(Error::param(format!(
            "k={k} must be in 1..={}",
            a.ncols().min(b.ncols())
        )));
    }
    if n < k + 2 {
        return Err(Error::param(format!("CCA with k={k} needs at least {} rows, got {n}", k + 2)));
    }
    if !(ridge >= 0.0) {
        return Err(Error::param("ridge must be non-negative"));
    }
    let mean_a = a.mean_axis(Axis(0)).expect("n > 0");
    let mean_b = b.mean_axis(Axis(0)).expect("n > 0");
    let xa = to_na(&(a - &mean_a));
    let xb = to_na(&(b - &mean_b));
    let scale = 1.0 / (n as f64 - 1.0);
    let caa = shrink(xa.transpose() * &xa * scale, ridge);
    let cbb = shrink(xb.transpose() * &xb * scale, ridge);
    let cab = xa.transpose() * &xb * scale;
    let wa = inv_sqrt(caa)?;
    let wb = inv_sqrt(cbb)?;
    let svd = (&wa * cab * &wb).svd(true, true);
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));

    let mut pa = DMatrix::zeros(a.ncols(), k);
    let mut pb = DMatrix::zeros(b.ncols(), k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        pa.set_column(c, &(&wa * u.column(idx)));
        pb.set_column(c, &(&wb * vt.row(idx).transpose()));
    }
    let proj_a = from_na(&pa);
    let proj_b = from_na(&pb);
    let za = from_na(&xa).dot(&proj_a);
    let zb = from_na(&xb).dot(&proj_b);
    let mut comps: Vec<(f64, usize)> = (0..k)
        .map(|c| (pearson(&za.column(c).to_owned(), &zb.column(c).to_owned()), c))
        .collect();
    comps.sort_by(|x, y| y.0.total_cmp(&x.0));
    let pick = |p: &Array2<f64>| {
        let mut out = Array2::zeros((p.nrows(), k));
        for (dst, (_, src)) in comps.iter().enumerate() {
            out.column_mut(dst).assign(&p.column(*src));
        }
        out
    };
    let model = CcaModel {
        proj_a: pick(&proj_a),
        proj_b: pick(&proj_b),
        correlations: comps.iter().map(|c| c.0).collect(),
        mean_a,
        mean_b,
        k,
        ridge,
    };
    if model.proj_a.iter().chain(model.proj_b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::param("CCA produced non-finite projections"));
    }
    Ok(model)
}

impl CcaModel {
    pub fn project_a(&self, a: &Array2<f64>) -> Array2<f64> {
        (a - &self.mean_a).dot(&self.proj_a)
    }

    pub fn project_b(&self, b: &Array2<f64>) -> Array2<f64> {
        (b - &self.mean_b).dot(&self.proj_b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttConfig {
    pub metric: Metric,
    pub refine: bool,
    pub cca_k: usize,
    pub ridge: f64,
    /// Largest vocal-feature / mel frame-count mismatch that is resampled instead of rejected.
    pub frame_tolerance: usize,
}

impl Default for AttConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Euclidean,
            refine: true,
            cca_k: 8,
            ridge: 0.5,
            frame_tolerance: 2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttOutput {
    /// One mel row per silent frame.
    pub targets: Array2<f64>,
    pub path: AlignmentPath,
    pub cca: Option<CcaModel>,
}

/// Nearest-frame resampling of `mel` rows onto `frames` rows.
pub fn resample_rows(mel: &Array2<f64>, frames: usize) -> Array2<f64> {
    let src = mel.nrows();
    if src == frames {
        return mel.clone();
    }
    let mut out = Array2::zeros((frames, mel.ncols()));
    for f in 0..frames {
        let j = if frames == 1 {
            0
        } else {
            ((f as f64) * (src - 1) as f64 / (frames - 1) as f64).round() as usize
        };
        out.row_mut(f).assign(&mel.row(j.min(src - 1)));
    }
    out
}

pub fn audio_target_transfer(
    silent: &FeatureMatrix,
    vocal: &FeatureMatrix,
    vocal_mel: &MelSpectrogram,
    cfg: &AttConfig,
) -> Result<AttOutput> {
    audio_target_transfer_with(silent, vocal, vocal_mel, cfg, None)
}

/// As [`audio_target_transfer`]; with `refine` set, a supplied CCA model is
/// used for the re-alignment instead of one fitted on this utterance alone.
pub fn audio_target_transfer_with(
    silent: &FeatureMatrix,
    vocal: &FeatureMatrix,
    vocal_mel: &MelSpectrogram,
    cfg: &AttConfig,
    shared: Option<&CcaModel>,
) -> Result<AttOutput> {
    let (nv, nm) = (vocal.frames(), vocal_mel.frames());
    if nv.abs_diff(nm) > cfg.frame_tolerance {
        return Err(Error::Alignment(format!(
            "vocalized features have {nv} frames but the mel target has {nm} (tolerance {})",
            cfg.frame_tolerance
        )));
    }
    let mel = resample_rows(&vocal_mel.data, nv);
    let mut path = dtw_align(silent, vocal, cfg.metric)?;
    let mut cca = None;
    if cfg.refine {
        let model = match shared {
            Some(m) => {
                if m.proj_a.nrows() != silent.dims() || m.proj_b.nrows() != vocal.dims() {
                    return Err(Error::param("shared CCA model does not match the feature widths"));
                }
                Some(m.clone())
            }
            None => {
                let k = cfg.cca_k.min(silent.dims()).min(path.pairs.len().saturating_sub(2));
                if k >= 1 {
                    let (pa, pb) = paired_rows(silent, vocal, &path);
                    Some(cca_fit(&pa, &pb, k, cfg.ridge)?)
                } else {
                    None
                }
            }
        };
        if let Some(model) = model {
            let za = model.project_a(silent.data());
            let zb = model.project_b(vocal.data());
            path = dtw_matrices(&za, &zb, cfg.metric)?;
            cca = Some(model);
        }
    }
    let partner = path.last_partner(silent.frames());
    let targets = mel.select(Axis(0), &partner);
    Ok(AttOutput { targets, path, cca })
}

fn paired_rows(silent: &FeatureMatrix, vocal: &FeatureMatrix, path: &AlignmentPath) -> (Array2<f64>, Array2<f64>) {
    let rows_a: Vec<usize> = path.pairs.iter().map(|p| p.0).collect();
    let rows_b: Vec<usize> = path.pairs.iter().map(|p| p.1).collect();
    (silent.data().select(Axis(0), &rows_a), vocal.data().select(Axis(0), &rows_b))
}

/// One CCA model over the raw-DTW pairs of many silent/vocalized utterances.
pub fn fit_alignment_cca(pairs: &[(&FeatureMatrix, &FeatureMatrix)], cfg: &AttConfig) -> Result<CcaModel> {
    if pairs.is_empty() {
        return Err(Error::empty("no utterance pairs to fit CCA on"));
    }
    let mut blocks_a = Vec::with_capacity(pairs.len());
    let mut blocks_b = Vec::with_capacity(pairs.len());
    for (s, v) in pairs {
        let path = dtw_align(s, v, cfg.metric)?;
        let (a, b) = paired_rows(s, v, &path);
        blocks_a.push(a);
        blocks_b.push(b);
    }
    let view = |blocks: &[Array2<f64>]| {
        let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| Error::param(format!("feature widths differ: {e}")))
    };
    let a = view(&blocks_a)?;
    let b = view(&blocks_b)?;
    let k = cfg.cca_k.min(a.ncols()).min(b.ncols());
    cca_fit(&a, &b, k, cfg.ridge)
}
