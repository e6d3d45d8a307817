//! Full-covariance GMM-UBMs: EM training with binary-split initialization,
//! frame posteriors, the coupled two-feats UBM pair, and posterior-stream
//! combination.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::linalg;

const LN_2PI: f64 = 1.8378770664093453;

/// Gaussian mixture with full covariances and cached Cholesky factors.
#[derive(Debug, Clone)]
pub struct GmmModel {
    weights: Array1<f64>,
    means: Array2<f64>,
    covariances: Vec<Array2<f64>>,
    chol: Vec<Array2<f64>>,
    logdets: Vec<f64>,
}

impl GmmModel {
    /// Build a model, checking the weight simplex and SPD covariances.
    pub fn new(weights: Array1<f64>, means: Array2<f64>, covariances: Vec<Array2<f64>>) -> Result<Self> {
        let c = weights.len();
        if means.nrows() != c || covariances.len() != c {
            return Err(Error::DimensionMismatch(format!(
                "GMM components disagree: {} weights, {} means, {} covariances",
                c,
                means.nrows(),
                covariances.len()
            )));
        }
        let wsum: f64 = weights.sum();
        if (wsum - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidData(format!(
                "GMM weights sum to {wsum}, expected 1"
            )));
        }
        let d = means.ncols();
        let mut chol = Vec::with_capacity(c);
        let mut logdets = Vec::with_capacity(c);
        for (idx, cov) in covariances.iter().enumerate() {
            if cov.nrows() != d || cov.ncols() != d {
                return Err(Error::DimensionMismatch(format!(
                    "covariance {idx} is {}x{}, expected {d}x{d}",
                    cov.nrows(),
                    cov.ncols()
                )));
            }
            let l = linalg::cholesky_lower(cov.view(), &format!("GMM component {idx}"))?;
            logdets.push(linalg::cholesky_logdet(l.view()));
            chol.push(l);
        }
        Ok(Self { weights, means, covariances, chol, logdets })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn covariances(&self) -> &[Array2<f64>] {
        &self.covariances
    }

    /// Cached lower Cholesky factor of component `c`'s covariance.
    pub fn chol(&self, c: usize) -> &Array2<f64> {
        &self.chol[c]
    }

    /// ln w_c + ln N(x; mean_c, cov_c) for every component, written to `out`.
    fn log_weighted_densities(&self, x: ArrayView1<f64>, out: &mut [f64], scratch: &mut [f64]) {
        let d = self.dim();
        for c in 0..self.num_components() {
            let l = self.chol[c].as_slice().unwrap();
            let mu = self.means.row(c);
            let mut quad = 0.0;
            for i in 0..d {
                let mut s = x[i] - mu[i];
                for j in 0..i {
                    s -= l[i * d + j] * scratch[j];
                }
                let y = s / l[i * d + i];
                scratch[i] = y;
                quad += y * y;
            }
            out[c] = self.weights[c].ln() - 0.5 * (d as f64 * LN_2PI + self.logdets[c] + quad);
        }
    }

    /// Per-frame log-likelihood under the mixture.
    pub fn frame_log_likelihood(&self, x: ArrayView1<f64>) -> f64 {
        let c = self.num_components();
        let mut dens = vec![0.0; c];
        let mut scratch = vec![0.0; self.dim()];
        self.log_weighted_densities(x, &mut dens, &mut scratch);
        log_sum_exp(&dens)
    }
}

/// Frames-by-components responsibility matrix; rows sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    pub data: Array2<f64>,
}

impl PosteriorMatrix {
    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_components(&self) -> usize {
        self.data.ncols()
    }

    /// Check the simplex invariants (used when ingesting external files).
    pub fn validate(&self) -> Result<()> {
        for (t, row) in self.data.rows().into_iter().enumerate() {
            if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(Error::InvalidData(format!(
                    "posterior row {t} has negative or non-finite entries"
                )));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidData(format!(
                    "posterior row {t} sums to {s}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// The two-feats UBM pair: positionally corresponding components.
#[derive(Debug, Clone)]
pub struct CoupledUbm {
    pub plp_ubm: GmmModel,
    pub mfcc_ubm: GmmModel,
}

/// EM training parameters.
#[derive(Debug, Clone)]
pub struct GmmTrainConfig {
    pub components: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Eigenvalue floor as a fraction of the mean diagonal of the global
    /// data covariance.
    pub variance_floor_factor: f64,
    /// Responsibilities below this are zeroed (with row renormalization)
    /// when producing posterior matrices for statistics.
    pub prune_threshold: f64,
    /// Zero the off-diagonal covariance entries in each M-step.
    pub diagonal_covariances: bool,
}

impl Default for GmmTrainConfig {
    fn default() -> Self {
        Self {
            components: 64,
            iterations: 10,
            seed: 0,
            variance_floor_factor: 1e-4,
            prune_threshold: 1e-8,
            diagonal_covariances: false,
        }
    }
}

/// A trained model plus the average log-likelihood after each EM iteration.
#[derive(Debug, Clone)]
pub struct GmmTraining {
    pub model: GmmModel,
    pub avg_log_likelihood: Vec<f64>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn pool_frames(frames: &[FeatureMatrix]) -> Result<Array2<f64>> {
    if frames.is_empty() {
        return Err(Error::InsufficientData("no feature matrices given".into()));
    }
    let d = frames[0].dim();
    if frames.iter().any(|f| f.dim() != d) {
        return Err(Error::DimensionMismatch(
            "feature matrices have inconsistent dimensions".into(),
        ));
    }
    let total: usize = frames.iter().map(|f| f.num_frames()).sum();
    let mut pooled = Array2::zeros((total, d));
    let mut row = 0;
    for f in frames {
        pooled
            .slice_mut(ndarray::s![row..row + f.num_frames(), ..])
            .assign(&f.data);
        row += f.num_frames();
    }
    Ok(pooled)
}

/// Zeroth/first/second-order accumulators for one EM pass.
struct EmAccumulator {
    n: Array1<f64>,
    f: Array2<f64>,
    s: Vec<Array2<f64>>,
    ll_sum: f64,
}

impl EmAccumulator {
    fn zeros(c: usize, d: usize) -> Self {
        Self {
            n: Array1::zeros(c),
            f: Array2::zeros((c, d)),
            s: (0..c).map(|_| Array2::zeros((d, d))).collect(),
            ll_sum: 0.0,
        }
    }

    fn merge(&mut self, other: &EmAccumulator) {
        self.n += &other.n;
        self.f += &other.f;
        for (a, b) in self.s.iter_mut().zip(&other.s) {
            *a += b;
        }
        self.ll_sum += other.ll_sum;
    }
}

/// One E-step over `data`, parallel over fixed chunks merged in order so the
/// result is independent of the worker count.
fn em_accumulate(model: &GmmModel, data: &Array2<f64>) -> EmAccumulator {
    let c = model.num_components();
    let d = model.dim();
    let t = data.nrows();
    let threads = rayon::current_num_threads().max(1);
    let chunk = (t / (2 * threads)).max(512).min(t.max(1));

    let rows: Vec<Array2<f64>> = data
        .axis_chunks_iter(Axis(0), chunk)
        .map(|v| v.to_owned())
        .collect();
    let partials: Vec<EmAccumulator> = rows
        .par_iter()
        .map(|block| {
            let mut acc = EmAccumulator::zeros(c, d);
            let mut dens = vec![0.0; c];
            let mut scratch = vec![0.0; d];
            for x in block.rows() {
                model.log_weighted_densities(x, &mut dens, &mut scratch);
                let lse = log_sum_exp(&dens);
                acc.ll_sum += lse;
                for ci in 0..c {
                    let g = (dens[ci] - lse).exp();
                    if g == 0.0 {
                        continue;
                    }
                    acc.n[ci] += g;
                    let sc = acc.s[ci].as_slice_mut().unwrap();
                    for i in 0..d {
                        let gxi = g * x[i];
                        acc.f[[ci, i]] += gxi;
                        for j in 0..d {
                            sc[i * d + j] += gxi * x[j];
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let mut total = EmAccumulator::zeros(c, d);
    for p in &partials {
        total.merge(p);
    }
    total
}

/// Floor the eigenvalues of a symmetric matrix at `floor`.
fn floor_covariance(cov: &mut Array2<f64>, floor: f64) -> Result<()> {
    linalg::symmetrize(cov);
    let (vals, vecs) = linalg::symmetric_eigen_desc(cov.view(), "variance flooring")?;
    if vals.iter().all(|&v| v >= floor) {
        return Ok(());
    }
    let d = cov.nrows();
    let mut rebuilt = Array2::zeros((d, d));
    for k in 0..d {
        let lam = vals[k].max(floor);
        let v = vecs.column(k);
        for i in 0..d {
            for j in 0..d {
                rebuilt[[i, j]] += lam * v[i] * v[j];
            }
        }
    }
    linalg::symmetrize(&mut rebuilt);
    *cov = rebuilt;
    Ok(())
}

struct MStepContext<'a> {
    data: &'a Array2<f64>,
    floor: f64,
    global_cov: &'a Array2<f64>,
    diagonal: bool,
    rng: ChaCha20Rng,
}

fn m_step(acc: &EmAccumulator, ctx: &mut MStepContext) -> Result<GmmModel> {
    let c = acc.n.len();
    let d = acc.f.ncols();
    let t = ctx.data.nrows() as f64;

    let mut weights = Array1::zeros(c);
    let mut means = Array2::zeros((c, d));
    let mut covs = Vec::with_capacity(c);
    for ci in 0..c {
        let n = acc.n[ci];
        if n < 1e-6 {
            // Dead component: restart it on a random training frame.
            log::warn!("GMM component {ci} collapsed (count {n:.3e}); reinitializing");
            let row = ctx.rng.random_range(0..ctx.data.nrows());
            means.row_mut(ci).assign(&ctx.data.row(row));
            covs.push(ctx.global_cov.clone());
            weights[ci] = 1.0 / t;
            continue;
        }
        weights[ci] = n / t;
        let mu = acc.f.row(ci).mapv(|v| v / n);
        let mut cov = acc.s[ci].mapv(|v| v / n);
        for i in 0..d {
            for j in 0..d {
                cov[[i, j]] -= mu[i] * mu[j];
            }
        }
        if ctx.diagonal {
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        cov[[i, j]] = 0.0;
                    }
                }
            }
        }
        floor_covariance(&mut cov, ctx.floor)?;
        means.row_mut(ci).assign(&mu);
        covs.push(cov);
    }
    let wsum = weights.sum();
    weights.mapv_inplace(|w| w / wsum);
    GmmModel::new(weights, means, covs)
}

/// Train a full-covariance GMM by EM with binary mean-splitting from the
/// global Gaussian.
pub fn train_gmm_em(frames: &[FeatureMatrix], config: &GmmTrainConfig) -> Result<GmmTraining> {
    if config.components == 0 {
        return Err(Error::InvalidData("component count must be >= 1".into()));
    }
    let data = pool_frames(frames)?;
    let (t, d) = (data.nrows(), data.ncols());
    let needed = 10 * config.components * d;
    if t < needed {
        return Err(Error::InsufficientData(format!(
            "{t} frames for C={} D={d}; need at least {needed}",
            config.components
        )));
    }

    // Global Gaussian (ML, denominator T).
    let global_mean = data.mean_axis(Axis(0)).unwrap();
    let mut global_cov = Array2::zeros((d, d));
    for x in data.rows() {
        for i in 0..d {
            let di = x[i] - global_mean[i];
            for j in 0..d {
                global_cov[[i, j]] += di * (x[j] - global_mean[j]);
            }
        }
    }
    global_cov.mapv_inplace(|v| v / t as f64);
    let floor = config.variance_floor_factor * global_cov.diag().sum() / d as f64;
    floor_covariance(&mut global_cov, floor)?;

    let mut ctx = MStepContext {
        data: &data,
        floor,
        global_cov: &global_cov,
        diagonal: config.diagonal_covariances,
        rng: ChaCha20Rng::seed_from_u64(config.seed),
    };

    let mut model = GmmModel::new(
        Array1::from_elem(1, 1.0),
        global_mean.insert_axis(Axis(0)),
        vec![global_cov.clone()],
    )?;

    // Binary splitting toward the requested component count, two EM
    // iterations per split level.
    while model.num_components() < config.components {
        model = split_components(&model, config.components)?;
        for _ in 0..2 {
            let acc = em_accumulate(&model, &data);
            model = m_step(&acc, &mut ctx)?;
        }
    }

    let mut avg_ll = Vec::with_capacity(config.iterations);
    for _ in 0..config.iterations {
        let acc = em_accumulate(&model, &data);
        avg_ll.push(acc.ll_sum / t as f64);
        model = m_step(&acc, &mut ctx)?;
    }

    Ok(GmmTraining { model, avg_log_likelihood: avg_ll })
}

/// Split the heaviest components, perturbing means by ±0.1 standard
/// deviations, until reaching at most `target` components.
fn split_components(model: &GmmModel, target: usize) -> Result<GmmModel> {
    let c = model.num_components();
    let d = model.dim();
    let n_split = (target - c).min(c);

    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        model.weights[b]
            .partial_cmp(&model.weights[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let split_set: std::collections::HashSet<usize> = order[..n_split].iter().cloned().collect();

    let new_c = c + n_split;
    let mut weights = Array1::zeros(new_c);
    let mut means = Array2::zeros((new_c, d));
    let mut covs = Vec::with_capacity(new_c);
    let mut out = 0;
    for ci in 0..c {
        let sigma = model.covariances[ci].diag().mapv(f64::sqrt);
        if split_set.contains(&ci) {
            for sign in [-1.0, 1.0] {
                weights[out] = model.weights[ci] / 2.0;
                let mu = model.means.row(ci).to_owned() + &(sigma.mapv(|s| sign * 0.1 * s));
                means.row_mut(out).assign(&mu);
                covs.push(model.covariances[ci].clone());
                out += 1;
            }
        } else {
            weights[out] = model.weights[ci];
            means.row_mut(out).assign(&model.means.row(ci));
            covs.push(model.covariances[ci].clone());
            out += 1;
        }
    }
    GmmModel::new(weights, means, covs)
}

/// Frame responsibilities under the model, log-domain with log-sum-exp.
/// Entries below `prune_threshold` are zeroed and rows renormalized.
pub fn gmm_posteriors(
    model: &GmmModel,
    frames: &FeatureMatrix,
    prune_threshold: f64,
) -> Result<PosteriorMatrix> {
    if frames.dim() != model.dim() {
        return Err(Error::DimensionMismatch(format!(
            "frames have dimension {}, model expects {}",
            frames.dim(),
            model.dim()
        )));
    }
    let t = frames.num_frames();
    let c = model.num_components();
    let mut data = Array2::zeros((t, c));
    let mut dens = vec![0.0; c];
    let mut scratch = vec![0.0; model.dim()];
    for (ti, x) in frames.data.rows().into_iter().enumerate() {
        model.log_weighted_densities(x, &mut dens, &mut scratch);
        let lse = log_sum_exp(&dens);
        let mut sum = 0.0;
        for ci in 0..c {
            let mut g = (dens[ci] - lse).exp();
            if g < prune_threshold {
                g = 0.0;
            }
            data[[ti, ci]] = g;
            sum += g;
        }
        if sum == 0.0 {
            data.row_mut(ti).fill(1.0 / c as f64);
        } else {
            data.row_mut(ti).mapv_inplace(|v| v / sum);
        }
    }
    Ok(PosteriorMatrix { data })
}

/// One maximum-likelihood M-step on `frames` using externally supplied
/// per-frame responsibilities (one posterior matrix per utterance).
/// Variance flooring is relative to the frames' own global covariance.
pub fn estimate_gmm_from_posteriors(
    posteriors: &[PosteriorMatrix],
    frames: &[FeatureMatrix],
) -> Result<GmmModel> {
    if posteriors.len() != frames.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} posterior matrices vs {} utterances",
            posteriors.len(),
            frames.len()
        )));
    }
    let c = posteriors
        .first()
        .ok_or_else(|| Error::InsufficientData("no utterances given".into()))?
        .num_components();
    for (u, (post, feats)) in posteriors.iter().zip(frames).enumerate() {
        if post.num_frames() != feats.num_frames() {
            return Err(Error::DimensionMismatch(format!(
                "utterance {u}: {} posterior rows vs {} frames",
                post.num_frames(),
                feats.num_frames()
            )));
        }
        if post.num_components() != c {
            return Err(Error::DimensionMismatch(format!(
                "utterance {u}: {} posterior columns, expected {c}",
                post.num_components()
            )));
        }
    }
    let data = pool_frames(frames)?;
    let d = data.ncols();
    let t = data.nrows() as f64;

    let mut acc = EmAccumulator::zeros(c, d);
    let mut row0 = 0;
    for (post, feats) in posteriors.iter().zip(frames) {
        for ti in 0..feats.num_frames() {
            let x = data.row(row0 + ti);
            for ci in 0..c {
                let g = post.data[[ti, ci]];
                if g == 0.0 {
                    continue;
                }
                acc.n[ci] += g;
                for i in 0..d {
                    let gxi = g * x[i];
                    acc.f[[ci, i]] += gxi;
                    for j in 0..d {
                        acc.s[ci][[i, j]] += gxi * x[j];
                    }
                }
            }
        }
        row0 += feats.num_frames();
    }

    let global_mean = data.mean_axis(Axis(0)).unwrap();
    let mut global_cov = Array2::zeros((d, d));
    for x in data.rows() {
        for i in 0..d {
            let di = x[i] - global_mean[i];
            for j in 0..d {
                global_cov[[i, j]] += di * (x[j] - global_mean[j]);
            }
        }
    }
    global_cov.mapv_inplace(|v| v / t);
    let floor = 1e-4 * global_cov.diag().sum() / d as f64;
    floor_covariance(&mut global_cov, floor)?;

    let mut ctx = MStepContext {
        data: &data,
        floor,
        global_cov: &global_cov,
        diagonal: false,
        rng: ChaCha20Rng::seed_from_u64(0),
    };
    m_step(&acc, &mut ctx)
}

/// Estimate the MFCC-side UBM with a single M-step on MFCC frames using
/// responsibilities computed from the PLP UBM on the PLP stream.
pub fn couple_ubm(
    plp_ubm: &GmmModel,
    mfcc_frames: &[FeatureMatrix],
    plp_frames: &[FeatureMatrix],
) -> Result<CoupledUbm> {
    if mfcc_frames.len() != plp_frames.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} MFCC utterances vs {} PLP utterances",
            mfcc_frames.len(),
            plp_frames.len()
        )));
    }
    for (u, (m, p)) in mfcc_frames.iter().zip(plp_frames).enumerate() {
        if m.num_frames() != p.num_frames() {
            return Err(Error::DimensionMismatch(format!(
                "utterance {u}: {} MFCC frames vs {} PLP frames",
                m.num_frames(),
                p.num_frames()
            )));
        }
    }
    let posteriors: Vec<PosteriorMatrix> = plp_frames
        .iter()
        .map(|p| gmm_posteriors(plp_ubm, p, 0.0))
        .collect::<Result<_>>()?;
    let mfcc_ubm = estimate_gmm_from_posteriors(&posteriors, mfcc_frames)?;
    Ok(CoupledUbm {
        plp_ubm: plp_ubm.clone(),
        mfcc_ubm,
    })
}

/// Combine two posterior streams per-frame: elementwise product followed by
/// renormalization. Underflowed rows fall back to uniform.
pub fn combine_posteriors(
    p_plp: &PosteriorMatrix,
    p_mfcc: &PosteriorMatrix,
) -> Result<PosteriorMatrix> {
    if p_plp.data.dim() != p_mfcc.data.dim() {
        return Err(Error::DimensionMismatch(format!(
            "posterior shapes {:?} vs {:?}",
            p_plp.data.dim(),
            p_mfcc.data.dim()
        )));
    }
    let (t, c) = p_plp.data.dim();
    let mut data = Array2::zeros((t, c));
    for ti in 0..t {
        let mut sum = 0.0;
        for ci in 0..c {
            let v = p_plp.data[[ti, ci]] * p_mfcc.data[[ti, ci]];
            data[[ti, ci]] = v;
            sum += v;
        }
        if sum == 0.0 {
            data.row_mut(ti).fill(1.0 / c as f64);
        } else {
            data.row_mut(ti).mapv_inplace(|v| v / sum);
        }
    }
    Ok(PosteriorMatrix { data })
}
