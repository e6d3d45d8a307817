//! Embedding-space normalization and dataset-shift compensation:
//! within-class whitening + length normalization (LW), inter-dataset
//! variability compensation (IDVC), and mean-shifting.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::ivector::IVector;
use crate::linalg;

/// Within-class whitening transform: global mean and the Cholesky factor
/// of the pooled within-speaker covariance.
#[derive(Debug, Clone)]
pub struct LwTransform {
    pub mu: Array1<f64>,
    pub w_chol: Array2<f64>,
}

/// Subspace spanned by centered per-subset means, to be projected away.
#[derive(Debug, Clone)]
pub struct IdvcModel {
    /// R x K orthonormal columns.
    pub basis: Array2<f64>,
    /// Mean of the subset means.
    pub center: Array1<f64>,
}

impl IdvcModel {
    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }
}

/// Mean of the in-domain development vectors, subtracted from test vectors.
#[derive(Debug, Clone)]
pub struct MeanShift {
    pub delta: Array1<f64>,
}

/// Which side of a verification trial a vector belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialSide {
    Enroll,
    Test,
}

fn group_by_speaker(vectors: &[IVector]) -> Result<BTreeMap<&str, Vec<&IVector>>> {
    let mut groups: BTreeMap<&str, Vec<&IVector>> = BTreeMap::new();
    for v in vectors {
        let speaker = v.speaker.as_deref().ok_or_else(|| {
            Error::InvalidData(format!("vector '{}' has no speaker label", v.utterance_id))
        })?;
        groups.entry(speaker).or_default().push(v);
    }
    Ok(groups)
}

/// Group vectors by their partition key for IDVC subset construction.
pub fn group_by_partition(vectors: &[IVector]) -> BTreeMap<String, Vec<IVector>> {
    let mut groups: BTreeMap<String, Vec<IVector>> = BTreeMap::new();
    for v in vectors {
        let key = v.partition.clone().unwrap_or_default();
        groups.entry(key).or_default().push(v.clone());
    }
    groups
}

/// Fit the LW transform with the default ridge of 1e-6 * trace(W)/R.
pub fn fit_lw(vectors: &[IVector]) -> Result<LwTransform> {
    fit_lw_with_ridge(vectors, 1e-6)
}

/// mu = global mean; W = pooled within-speaker covariance (sessions minus
/// speaker means, divided by total session count), plus a ridge.
pub fn fit_lw_with_ridge(vectors: &[IVector], ridge_scale: f64) -> Result<LwTransform> {
    let groups = group_by_speaker(vectors)?;
    if groups.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "LW needs at least 2 speakers, got {}",
            groups.len()
        )));
    }
    if !groups.values().any(|g| g.len() >= 2) {
        return Err(Error::InsufficientData(
            "LW needs at least one speaker with 2 or more sessions".into(),
        ));
    }
    let r = vectors[0].dim();
    let n = vectors.len() as f64;

    let mut mu = Array1::zeros(r);
    for v in vectors {
        mu += &v.w;
    }
    mu.mapv_inplace(|x| x / n);

    let mut w = Array2::zeros((r, r));
    for sessions in groups.values() {
        let mut m_s = Array1::zeros(r);
        for v in sessions {
            m_s += &v.w;
        }
        m_s.mapv_inplace(|x| x / sessions.len() as f64);
        for v in sessions {
            let d = &v.w - &m_s;
            for i in 0..r {
                for j in 0..r {
                    w[[i, j]] += d[i] * d[j];
                }
            }
        }
    }
    w.mapv_inplace(|x| x / n);

    let trace = w.diag().sum();
    let ridge = if trace > 0.0 { ridge_scale * trace / r as f64 } else { ridge_scale };
    for i in 0..r {
        w[[i, i]] += ridge;
    }

    let w_chol = linalg::cholesky_lower(w.view(), "within-class covariance").map_err(|_| {
        Error::Numerical(
            "within-class covariance is singular; increase the ridge regularization".into(),
        )
    })?;
    Ok(LwTransform { mu, w_chol })
}

impl LwTransform {
    /// Whitening only: L^{-1}(v - mu), no length normalization.
    pub fn whiten(&self, v: &Array1<f64>) -> Result<Array1<f64>> {
        if v.len() != self.mu.len() {
            return Err(Error::DimensionMismatch(format!(
                "vector dimension {} vs transform dimension {}",
                v.len(),
                self.mu.len()
            )));
        }
        Ok(linalg::solve_lower(self.w_chol.view(), (v - &self.mu).view()))
    }
}

/// Whiten against the within-class covariance, then length-normalize.
pub fn apply_lw(v: &IVector, t: &LwTransform) -> Result<IVector> {
    let u = t.whiten(&v.w)?;
    let norm = u.dot(&u).sqrt();
    if norm == 0.0 {
        return Err(Error::Numerical(format!(
            "degenerate vector '{}' maps to zero under LW",
            v.utterance_id
        )));
    }
    Ok(IVector {
        w: u / norm,
        ..v.clone()
    })
}

/// Scale a vector to unit Euclidean norm.
pub fn length_normalize(v: &IVector) -> Result<IVector> {
    let norm = v.w.dot(&v.w).sqrt();
    if norm == 0.0 {
        return Err(Error::Numerical(format!(
            "degenerate vector '{}' has zero norm",
            v.utterance_id
        )));
    }
    Ok(IVector {
        w: &v.w / norm,
        ..v.clone()
    })
}

/// IDVC fitting options.
#[derive(Debug, Clone)]
pub struct IdvcConfig {
    /// Center the subset means by their average before the SVD.
    pub center_means: bool,
    /// Keep at most this many directions (0 = no cap).
    pub max_rank: usize,
    /// Rank-revealing tolerance relative to the largest singular value.
    pub tolerance: f64,
}

impl Default for IdvcConfig {
    fn default() -> Self {
        Self {
            center_means: true,
            max_rank: 0,
            tolerance: 1e-8,
        }
    }
}

/// Orthonormal span of the (centered) subset means.
pub fn fit_idvc(
    subsets: &BTreeMap<String, Vec<IVector>>,
    config: &IdvcConfig,
) -> Result<IdvcModel> {
    if subsets.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "IDVC needs at least 2 subsets, got {}",
            subsets.len()
        )));
    }
    for (key, vs) in subsets {
        if vs.is_empty() {
            return Err(Error::InvalidData(format!("IDVC subset '{key}' is empty")));
        }
    }
    let r = subsets.values().next().unwrap()[0].dim();
    let s = subsets.len();

    let mut means = Array2::zeros((s, r));
    for (row, vs) in subsets.values().enumerate() {
        let mut m = Array1::zeros(r);
        for v in vs {
            if v.dim() != r {
                return Err(Error::DimensionMismatch(
                    "IDVC subsets have inconsistent vector dimensions".into(),
                ));
            }
            m += &v.w;
        }
        m.mapv_inplace(|x| x / vs.len() as f64);
        means.row_mut(row).assign(&m);
    }

    let center = means.mean_axis(ndarray::Axis(0)).unwrap();
    let mut centered = means;
    if config.center_means {
        for mut row in centered.rows_mut() {
            row -= &center;
        }
    }

    // Rank-revealing SVD through the small S x S Gram matrix.
    let gram = centered.dot(&centered.t());
    let (vals, vecs) = linalg::symmetric_eigen_desc(gram.view(), "IDVC subset means")?;
    let sigma_max = vals[0].max(0.0).sqrt();
    let mut rank = 0;
    if sigma_max > 1e-12 {
        rank = vals
            .iter()
            .filter(|&&l| l.max(0.0).sqrt() > config.tolerance * sigma_max)
            .count();
    }
    if config.max_rank > 0 {
        rank = rank.min(config.max_rank);
    }

    let mut basis = Array2::zeros((r, rank));
    for k in 0..rank {
        let sigma = vals[k].sqrt();
        let u = centered.t().dot(&vecs.column(k)) / sigma;
        basis.column_mut(k).assign(&u);
    }

    Ok(IdvcModel { basis, center })
}

/// Remove the inter-dataset subspace: v - basis (basisᵗ v).
pub fn apply_idvc(v: &IVector, m: &IdvcModel) -> Result<IVector> {
    if v.dim() != m.basis.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "vector dimension {} vs IDVC dimension {}",
            v.dim(),
            m.basis.nrows()
        )));
    }
    if m.rank() == 0 {
        return Ok(v.clone());
    }
    let coeffs = m.basis.t().dot(&v.w);
    Ok(IVector {
        w: &v.w - &m.basis.dot(&coeffs),
        ..v.clone()
    })
}

/// delta = mean of the unlabeled development vectors.
pub fn fit_mean_shift(dev_vectors: &[IVector]) -> Result<MeanShift> {
    if dev_vectors.is_empty() {
        return Err(Error::InsufficientData(
            "mean-shift needs a non-empty development set".into(),
        ));
    }
    let r = dev_vectors[0].dim();
    let mut delta = Array1::zeros(r);
    for v in dev_vectors {
        if v.dim() != r {
            return Err(Error::DimensionMismatch(
                "development vectors have inconsistent dimensions".into(),
            ));
        }
        delta += &v.w;
    }
    delta.mapv_inplace(|x| x / dev_vectors.len() as f64);
    Ok(MeanShift { delta })
}

/// Subtract the development mean from test vectors; enrollment vectors pass
/// through unchanged.
pub fn apply_mean_shift(v: &IVector, m: &MeanShift, side: TrialSide) -> Result<IVector> {
    match side {
        TrialSide::Enroll => Ok(v.clone()),
        TrialSide::Test => {
            if v.dim() != m.delta.len() {
                return Err(Error::DimensionMismatch(format!(
                    "vector dimension {} vs shift dimension {}",
                    v.dim(),
                    m.delta.len()
                )));
            }
            Ok(IVector {
                w: &v.w - &m.delta,
                ..v.clone()
            })
        }
    }
}
