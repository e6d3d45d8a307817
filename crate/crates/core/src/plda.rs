//! Two-covariance PLDA: EM learning of the between/within-class matrices,
//! the simultaneous diagonalization used as post-normalization, eigenvoice
//! rank truncation, and verification scoring.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::ivector::IVector;
use crate::linalg;

/// Global mean plus between-class (B) and within-class (W) covariances.
#[derive(Debug, Clone)]
pub struct PldaModel {
    pub m_all: Array1<f64>,
    pub b: Array2<f64>,
    pub w: Array2<f64>,
}

impl PldaModel {
    pub fn dim(&self) -> usize {
        self.m_all.len()
    }
}

/// Per-speaker training input: session count and (uncentered) mean vector.
#[derive(Debug, Clone)]
pub struct SpeakerSummary {
    pub speaker: String,
    pub sessions: usize,
    pub mean: Array1<f64>,
}

/// Whitening-plus-rotation transform that maps W to I and B to diag(psi).
#[derive(Debug, Clone)]
pub struct PostNormTransform {
    /// A = Pᵗ L⁻¹ with W = LLᵗ.
    pub a: Array2<f64>,
    /// Between-class eigenvalues, sorted descending; zeroed past `rank`.
    pub psi: Array1<f64>,
    /// Retained eigenvoice count.
    pub rank: usize,
}

impl PostNormTransform {
    pub fn dim(&self) -> usize {
        self.psi.len()
    }
}

/// Trial label as read from a trial key file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Target,
    NonTarget,
    Unknown,
}

impl std::str::FromStr for TrialLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "target" => Ok(TrialLabel::Target),
            "nontarget" => Ok(TrialLabel::NonTarget),
            "unknown" | "" => Ok(TrialLabel::Unknown),
            other => Err(Error::InvalidData(format!("unknown trial label '{other}'"))),
        }
    }
}

impl std::fmt::Display for TrialLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrialLabel::Target => write!(f, "target"),
            TrialLabel::NonTarget => write!(f, "nontarget"),
            TrialLabel::Unknown => write!(f, "unknown"),
        }
    }
}

/// One verification trial: n >= 1 enrollment vectors claiming one speaker,
/// and a test vector.
#[derive(Debug, Clone)]
pub struct Trial {
    pub enroll: Vec<IVector>,
    pub test: IVector,
    pub label: TrialLabel,
}

/// Collapse labeled vectors into per-speaker summaries, sorted by speaker id.
pub fn speaker_summaries(vectors: &[IVector]) -> Result<Vec<SpeakerSummary>> {
    let mut groups: BTreeMap<&str, Vec<&IVector>> = BTreeMap::new();
    for v in vectors {
        let speaker = v.speaker.as_deref().ok_or_else(|| {
            Error::InvalidData(format!("vector '{}' has no speaker label", v.utterance_id))
        })?;
        groups.entry(speaker).or_default().push(v);
    }
    let mut out = Vec::with_capacity(groups.len());
    for (speaker, sessions) in groups {
        let r = sessions[0].dim();
        let mut mean = Array1::zeros(r);
        for v in &sessions {
            if v.dim() != r {
                return Err(Error::DimensionMismatch(
                    "vectors have inconsistent dimensions".into(),
                ));
            }
            mean += &v.w;
        }
        mean.mapv_inplace(|x| x / sessions.len() as f64);
        out.push(SpeakerSummary {
            speaker: speaker.to_string(),
            sessions: sessions.len(),
            mean,
        });
    }
    Ok(out)
}

fn add_ridge(m: &mut Array2<f64>, scale: f64) {
    let r = m.nrows();
    let trace = m.diag().sum();
    let ridge = if trace > 0.0 { scale * trace / r as f64 } else { scale };
    for i in 0..r {
        m[[i, i]] += ridge;
    }
}

/// Moment estimates: m_all is the unweighted mean of speaker means, W the
/// pooled within-speaker scatter over sessions, B the scatter of speaker
/// means around m_all.
pub fn init_plda(vectors: &[IVector]) -> Result<PldaModel> {
    let speakers = speaker_summaries(vectors)?;
    init_from_sessions(&speakers, vectors)
}

fn init_from_sessions(speakers: &[SpeakerSummary], vectors: &[IVector]) -> Result<PldaModel> {
    if speakers.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "PLDA needs at least 2 speakers, got {}",
            speakers.len()
        )));
    }
    if !speakers.iter().any(|s| s.sessions >= 2) {
        log::error!("every PLDA training speaker has a single session; W is ridge-only");
    }
    let r = speakers[0].mean.len();
    let s_count = speakers.len() as f64;
    let n_total = vectors.len() as f64;

    let mut m_all = Array1::zeros(r);
    for s in speakers {
        m_all += &s.mean;
    }
    m_all.mapv_inplace(|x| x / s_count);

    let mut b = Array2::zeros((r, r));
    for s in speakers {
        let d = &s.mean - &m_all;
        for i in 0..r {
            for j in 0..r {
                b[[i, j]] += d[i] * d[j];
            }
        }
    }
    b.mapv_inplace(|x| x / s_count);

    let mut by_speaker: BTreeMap<&str, &Array1<f64>> = BTreeMap::new();
    for s in speakers {
        by_speaker.insert(s.speaker.as_str(), &s.mean);
    }
    let mut w = Array2::zeros((r, r));
    for v in vectors {
        let mean = by_speaker
            .get(v.speaker.as_deref().unwrap_or(""))
            .ok_or_else(|| Error::InvalidData("unlabeled vector in PLDA training".into()))?;
        let d = &v.w - *mean;
        for i in 0..r {
            for j in 0..r {
                w[[i, j]] += d[i] * d[j];
            }
        }
    }
    w.mapv_inplace(|x| x / n_total);

    add_ridge(&mut b, 1e-6);
    add_ridge(&mut w, 1e-6);
    Ok(PldaModel { m_all, b, w })
}

/// One EM iteration of the (B, W) learning recursion on speaker means.
///
/// Per speaker: M_s = (B⁻¹ + n_s W⁻¹)⁻¹ and w_s = n_s M_s W⁻¹ m_s with m_s
/// centered by the model's m_all, accumulating
/// 𝓑 += w_s w_sᵗ + M_s and 𝓦 += n_s((m_s − w_s)(m_s − w_s)ᵗ + M_s),
/// then B = 𝓑/S and W = 𝓦/N.
///
/// This is the bare recursion over class means. Estimating W from session
/// data additionally needs the within-class session scatter folded into 𝓦
/// (a constant), which `train_plda` supplies; without it the W update keeps
/// only the mean-residual terms and shrinks by roughly the average session
/// count per iteration.
pub fn em_step(model: &PldaModel, speakers: &[SpeakerSummary]) -> Result<PldaModel> {
    em_update(model, speakers, None)
}

fn em_update(
    model: &PldaModel,
    speakers: &[SpeakerSummary],
    session_scatter: Option<&Array2<f64>>,
) -> Result<PldaModel> {
    let r = model.dim();
    let s_count = speakers.len() as f64;
    let n_total: usize = speakers.iter().map(|s| s.sessions).sum();

    let b_chol = linalg::cholesky_lower(model.b.view(), "PLDA between-class covariance")?;
    let w_chol = linalg::cholesky_lower(model.w.view(), "PLDA within-class covariance")?;
    let b_inv = linalg::cholesky_inverse(b_chol.view());
    let w_inv = linalg::cholesky_inverse(w_chol.view());

    // M_s depends only on the session count; cache per distinct n_s.
    let mut cache: BTreeMap<usize, (Array2<f64>, Array2<f64>)> = BTreeMap::new();
    for s in speakers {
        if !cache.contains_key(&s.sessions) {
            let n = s.sessions as f64;
            let mut precision = &b_inv + &(&w_inv * n);
            linalg::symmetrize(&mut precision);
            let l = linalg::cholesky_lower(precision.view(), "PLDA posterior precision")?;
            let m_s = linalg::cholesky_inverse(l.view());
            let gain = m_s.dot(&w_inv) * n; // w_s = gain · m_s(centered)
            cache.insert(s.sessions, (m_s, gain));
        }
    }

    let mut b_acc = Array2::zeros((r, r));
    let mut w_acc = match session_scatter {
        Some(scatter) => scatter.clone(),
        None => Array2::zeros((r, r)),
    };
    for s in speakers {
        let (m_s, gain) = &cache[&s.sessions];
        let centered = &s.mean - &model.m_all;
        let w_s = gain.dot(&centered);
        let resid = &centered - &w_s;
        let n = s.sessions as f64;
        for i in 0..r {
            for j in 0..r {
                b_acc[[i, j]] += w_s[i] * w_s[j] + m_s[[i, j]];
                w_acc[[i, j]] += n * (resid[i] * resid[j] + m_s[[i, j]]);
            }
        }
    }

    let mut b = b_acc / s_count;
    let mut w = w_acc / n_total as f64;
    linalg::symmetrize(&mut b);
    linalg::symmetrize(&mut w);
    Ok(PldaModel {
        m_all: model.m_all.clone(),
        b,
        w,
    })
}

/// Full PLDA learning: moment initialization followed by `iterations` EM
/// steps. m_all is computed once and not re-estimated. The constant
/// within-class session scatter enters every 𝓦 update so the W estimate
/// reflects session-level variation, not only mean residuals.
pub fn train_plda(vectors: &[IVector], iterations: usize) -> Result<PldaModel> {
    let speakers = speaker_summaries(vectors)?;
    let mut model = init_from_sessions(&speakers, vectors)?;

    let r = model.dim();
    let mut by_speaker: BTreeMap<&str, &Array1<f64>> = BTreeMap::new();
    for s in &speakers {
        by_speaker.insert(s.speaker.as_str(), &s.mean);
    }
    let mut scatter = Array2::zeros((r, r));
    for v in vectors {
        let mean = by_speaker[v.speaker.as_deref().unwrap_or("")];
        let d = &v.w - mean;
        for i in 0..r {
            for j in 0..r {
                scatter[[i, j]] += d[i] * d[j];
            }
        }
    }

    for iter in 0..iterations {
        model = em_update(&model, &speakers, Some(&scatter)).map_err(|e| {
            Error::Numerical(format!("PLDA EM aborted at iteration {iter}: {e}"))
        })?;
        // B and W must stay SPD; abort with the iteration index otherwise.
        linalg::cholesky_lower(model.b.view(), "B")
            .and(linalg::cholesky_lower(model.w.view(), "W"))
            .map_err(|_| {
                Error::Numerical(format!(
                    "PLDA covariance lost positive-definiteness at iteration {iter}"
                ))
            })?;
    }
    Ok(model)
}

/// Simultaneous diagonalization: A = Pᵗ L⁻¹ with W = LLᵗ and
/// L⁻¹ B L⁻ᵗ = P Ψ Pᵗ, giving A W Aᵗ = I and A B Aᵗ = Ψ.
pub fn postnorm_fit(model: &PldaModel) -> Result<PostNormTransform> {
    let r = model.dim();
    let l = linalg::cholesky_lower(model.w.view(), "PLDA within-class covariance")?;

    // K = L⁻¹ B L⁻ᵗ, column by column.
    let mut y = Array2::zeros((r, r));
    for j in 0..r {
        let col = linalg::solve_lower(l.view(), model.b.column(j));
        y.column_mut(j).assign(&col);
    }
    let mut k = Array2::zeros((r, r));
    for j in 0..r {
        let col = linalg::solve_lower(l.view(), y.row(j).to_owned().view());
        k.column_mut(j).assign(&col);
    }
    linalg::symmetrize(&mut k);

    let (vals, vecs) = linalg::symmetric_eigen_desc(k.view(), "between/within ratio")?;
    let psi = vals.mapv(|v| v.max(0.0));

    // L⁻¹ through unit-vector solves, then A = Pᵗ L⁻¹.
    let mut l_inv = Array2::zeros((r, r));
    let mut e = Array1::zeros(r);
    for j in 0..r {
        e[j] = 1.0;
        let col = linalg::solve_lower(l.view(), e.view());
        l_inv.column_mut(j).assign(&col);
        e[j] = 0.0;
    }
    let a = vecs.t().dot(&l_inv);

    Ok(PostNormTransform { a, psi, rank: r })
}

/// u = A (v - m_all), length-normalized.
pub fn postnorm_apply(
    v: &IVector,
    t: &PostNormTransform,
    m_all: &Array1<f64>,
) -> Result<IVector> {
    if v.dim() != t.dim() || m_all.len() != t.dim() {
        return Err(Error::DimensionMismatch(format!(
            "vector dimension {} vs transform dimension {}",
            v.dim(),
            t.dim()
        )));
    }
    let u = t.a.dot(&(&v.w - m_all));
    let norm = u.dot(&u).sqrt();
    if norm == 0.0 {
        return Err(Error::Numerical(format!(
            "vector '{}' maps to zero under post-normalization",
            v.utterance_id
        )));
    }
    Ok(IVector {
        w: u / norm,
        ..v.clone()
    })
}

/// Keep the `rank` largest elements of Ψ and zero the rest; A is unchanged.
pub fn truncate_eigenvoices(t: &PostNormTransform, rank: usize) -> Result<PostNormTransform> {
    let r = t.dim();
    if rank > r {
        return Err(Error::InvalidData(format!(
            "eigenvoice rank {rank} exceeds dimension {r}"
        )));
    }
    let mut psi = t.psi.clone();
    for d in rank..r {
        psi[d] = 0.0;
    }
    Ok(PostNormTransform {
        a: t.a.clone(),
        psi,
        rank,
    })
}

fn ln_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean) * (x - mean) / var)
}

/// Log-likelihood ratio of a trial in the diagonalized space.
///
/// With n enrollment sessions averaged into ū, dimension d contributes
/// ln N(u; nψū/(nψ+1), 1 + ψ/(nψ+1)) − ln N(u; 0, 1 + ψ).
pub fn score_trial(trial: &Trial, t: &PostNormTransform) -> Result<f64> {
    if trial.enroll.is_empty() {
        return Err(Error::InvalidData("trial has no enrollment vectors".into()));
    }
    let r = t.dim();
    for v in trial.enroll.iter().chain(std::iter::once(&trial.test)) {
        if v.dim() != r {
            return Err(Error::DimensionMismatch(format!(
                "trial vector '{}' has dimension {}, transform expects {r}",
                v.utterance_id,
                v.dim()
            )));
        }
    }
    let n = trial.enroll.len() as f64;
    let mut enroll_mean = Array1::zeros(r);
    for v in &trial.enroll {
        enroll_mean += &v.w;
    }
    enroll_mean.mapv_inplace(|x| x / n);

    let mut score = 0.0;
    for d in 0..r {
        let psi = t.psi[d];
        let u = trial.test.w[d];
        let shrink = n * psi / (n * psi + 1.0);
        let same_mean = shrink * enroll_mean[d];
        let same_var = 1.0 + psi / (n * psi + 1.0);
        score += ln_normal(u, same_mean, same_var) - ln_normal(u, 0.0, 1.0 + psi);
    }
    Ok(score)
}
