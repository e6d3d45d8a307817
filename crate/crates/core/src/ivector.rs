//! Total-variability modelling: Baum-Welch sufficient statistics, EM
//! training of the low-rank matrix T, and i-vector extraction.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::Distribution;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::gmm::{GmmModel, PosteriorMatrix};
use crate::linalg;

/// Per-utterance zeroth- and first-order statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct SufficientStats {
    /// Component occupancies, length C.
    pub n: Array1<f64>,
    /// Posterior-weighted feature sums, C x D.
    pub f: Array2<f64>,
    pub utterance_id: String,
}

impl SufficientStats {
    /// Field-wise sum; occupancies and first-order sums are additive.
    pub fn merge(&mut self, other: &SufficientStats) {
        self.n += &other.n;
        self.f += &other.f;
    }
}

/// UBM reference plus the (C*D) x R total-variability matrix, stored as
/// stacked D x R blocks per component.
#[derive(Debug, Clone)]
pub struct TotalVariabilityModel {
    pub ubm: GmmModel,
    pub t: Array2<f64>,
    pub rank: usize,
}

impl TotalVariabilityModel {
    pub fn new(ubm: GmmModel, t: Array2<f64>, rank: usize) -> Result<Self> {
        let cd = ubm.num_components() * ubm.dim();
        if t.nrows() != cd || t.ncols() != rank {
            return Err(Error::DimensionMismatch(format!(
                "T is {}x{}, expected {cd}x{rank}",
                t.nrows(),
                t.ncols()
            )));
        }
        if rank > cd {
            return Err(Error::InvalidData(format!(
                "rank {rank} exceeds supervector dimension {cd}"
            )));
        }
        if t.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("T contains non-finite entries".into()));
        }
        Ok(Self { ubm, t, rank })
    }

    fn block(&self, c: usize) -> ndarray::ArrayView2<'_, f64> {
        let d = self.ubm.dim();
        self.t.slice(ndarray::s![c * d..(c + 1) * d, ..])
    }
}

/// Fixed-length utterance embedding with optional labels.
#[derive(Debug, Clone, PartialEq)]
pub struct IVector {
    pub w: Array1<f64>,
    pub utterance_id: String,
    pub speaker: Option<String>,
    pub partition: Option<String>,
}

impl IVector {
    pub fn new(w: Array1<f64>, utterance_id: impl Into<String>) -> Self {
        Self {
            w,
            utterance_id: utterance_id.into(),
            speaker: None,
            partition: None,
        }
    }

    pub fn with_labels(
        mut self,
        speaker: Option<String>,
        partition: Option<String>,
    ) -> Self {
        self.speaker = speaker;
        self.partition = partition;
        self
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }
}

/// n_c = sum_t gamma_tc and f_c = sum_t gamma_tc x_t.
pub fn accumulate_stats(
    posteriors: &PosteriorMatrix,
    frames: &FeatureMatrix,
    utterance_id: &str,
) -> Result<SufficientStats> {
    if posteriors.num_frames() != frames.num_frames() {
        return Err(Error::DimensionMismatch(format!(
            "{} posterior rows vs {} frames",
            posteriors.num_frames(),
            frames.num_frames()
        )));
    }
    let c = posteriors.num_components();
    let d = frames.dim();
    let mut n = Array1::zeros(c);
    let mut f = Array2::zeros((c, d));
    for (t, x) in frames.data.rows().into_iter().enumerate() {
        for ci in 0..c {
            let g = posteriors.data[[t, ci]];
            if g == 0.0 {
                continue;
            }
            n[ci] += g;
            for j in 0..d {
                f[[ci, j]] += g * x[j];
            }
        }
    }
    Ok(SufficientStats {
        n,
        f,
        utterance_id: utterance_id.to_string(),
    })
}

/// Extraction context: whitened T blocks and their Grams, reusable across
/// utterances. T is immutable while this is alive.
pub struct TvExtractor<'a> {
    model: &'a TotalVariabilityModel,
    /// G_c^{-1} T_c per component, D x R.
    t_white: Vec<Array2<f64>>,
    /// T̂_c' T̂_c per component, R x R.
    grams: Vec<Array2<f64>>,
}

impl<'a> TvExtractor<'a> {
    pub fn new(model: &'a TotalVariabilityModel) -> Self {
        let c = model.ubm.num_components();
        let d = model.ubm.dim();
        let r = model.rank;
        let mut t_white = Vec::with_capacity(c);
        let mut grams = Vec::with_capacity(c);
        for ci in 0..c {
            let l = model.ubm.chol(ci);
            let block = model.block(ci);
            let mut white = Array2::zeros((d, r));
            for rc in 0..r {
                let col = linalg::solve_lower(l.view(), block.column(rc));
                white.column_mut(rc).assign(&col);
            }
            grams.push(white.t().dot(&white));
            t_white.push(white);
        }
        Self { model, t_white, grams }
    }

    /// Whitened centered first-order stats: G_c^{-1} (f_c - n_c mean_c).
    fn whiten_stats(&self, stats: &SufficientStats) -> Array2<f64> {
        let c = self.model.ubm.num_components();
        let d = self.model.ubm.dim();
        let mut out = Array2::zeros((c, d));
        for ci in 0..c {
            let centered =
                &stats.f.row(ci) - &(self.model.ubm.means().row(ci).to_owned() * stats.n[ci]);
            let l = self.model.ubm.chol(ci);
            out.row_mut(ci).assign(&linalg::solve_lower(l.view(), centered.view()));
        }
        out
    }

    fn check_stats(&self, stats: &SufficientStats) -> Result<()> {
        let c = self.model.ubm.num_components();
        let d = self.model.ubm.dim();
        if stats.n.len() != c || stats.f.nrows() != c || stats.f.ncols() != d {
            return Err(Error::DimensionMismatch(format!(
                "stats for '{}' have shape n={} f={}x{}, model expects C={c} D={d}",
                stats.utterance_id,
                stats.n.len(),
                stats.f.nrows(),
                stats.f.ncols()
            )));
        }
        Ok(())
    }

    /// Posterior precision L = I + sum_c n_c T̂_c' T̂_c and b = sum_c T̂_c' f̂_c.
    fn posterior_terms(&self, stats: &SufficientStats) -> (Array2<f64>, Array1<f64>) {
        let r = self.model.rank;
        let f_white = self.whiten_stats(stats);
        let mut precision = Array2::eye(r);
        let mut b = Array1::zeros(r);
        for (ci, gram) in self.grams.iter().enumerate() {
            let n = stats.n[ci];
            if n != 0.0 {
                precision.scaled_add(n, gram);
            }
            b += &self.t_white[ci].t().dot(&f_white.row(ci));
        }
        (precision, b)
    }

    /// Posterior mean of the latent factor (the i-vector).
    pub fn extract(&self, stats: &SufficientStats) -> Result<IVector> {
        self.check_stats(stats)?;
        let (precision, b) = self.posterior_terms(stats);
        let l = linalg::cholesky_lower(precision.view(), "i-vector posterior precision")?;
        let w = linalg::cholesky_solve(l.view(), b.view());
        Ok(IVector::new(w, stats.utterance_id.clone()))
    }
}

/// w = E[w | stats] under the total-variability model.
pub fn extract_ivector(stats: &SufficientStats, model: &TotalVariabilityModel) -> Result<IVector> {
    TvExtractor::new(model).extract(stats)
}

struct TvAccumulator {
    /// sum_u n_c E[ww'], per component.
    gram: Vec<Array2<f64>>,
    /// sum_u f̂_c E[w]', per component (whitened space).
    cross: Vec<Array2<f64>>,
    objective: f64,
    mean_energy: f64,
}

impl TvAccumulator {
    fn zeros(c: usize, d: usize, r: usize) -> Self {
        Self {
            gram: (0..c).map(|_| Array2::zeros((r, r))).collect(),
            cross: (0..c).map(|_| Array2::zeros((d, r))).collect(),
            objective: 0.0,
            mean_energy: 0.0,
        }
    }

    fn merge(&mut self, other: &TvAccumulator) {
        for (a, b) in self.gram.iter_mut().zip(&other.gram) {
            *a += b;
        }
        for (a, b) in self.cross.iter_mut().zip(&other.cross) {
            *a += b;
        }
        self.objective += other.objective;
        self.mean_energy += other.mean_energy;
    }
}

/// One EM iteration: E-step over all utterances, M-step per component.
/// Returns the updated model and the data log-likelihood of the current
/// model up to a T-independent constant.
pub fn tv_em_iteration(
    model: &TotalVariabilityModel,
    stats: &[SufficientStats],
) -> Result<(TotalVariabilityModel, f64)> {
    let c = model.ubm.num_components();
    let d = model.ubm.dim();
    let r = model.rank;
    let extractor = TvExtractor::new(model);
    for s in stats {
        extractor.check_stats(s)?;
    }

    let threads = rayon::current_num_threads().max(1);
    let chunk = (stats.len() / (2 * threads)).max(8).min(stats.len().max(1));
    let partials: Vec<Result<TvAccumulator>> = stats
        .par_chunks(chunk)
        .map(|block| {
            let mut acc = TvAccumulator::zeros(c, d, r);
            for s in block {
                let f_white = extractor.whiten_stats(s);
                let (precision, b) = extractor.posterior_terms(s);
                let l = linalg::cholesky_lower(precision.view(), "i-vector posterior precision")?;
                let ew = linalg::cholesky_solve(l.view(), b.view());
                let l_inv = linalg::cholesky_inverse(l.view());
                // E[ww'] = L^{-1} + E[w]E[w]'
                let mut eww = l_inv;
                for i in 0..r {
                    for j in 0..r {
                        eww[[i, j]] += ew[i] * ew[j];
                    }
                }
                acc.objective +=
                    0.5 * (b.dot(&ew) - linalg::cholesky_logdet(l.view()));
                acc.mean_energy += ew.dot(&ew);
                for ci in 0..c {
                    acc.gram[ci].scaled_add(s.n[ci], &eww);
                    let frow = f_white.row(ci);
                    for i in 0..d {
                        for j in 0..r {
                            acc.cross[ci][[i, j]] += frow[i] * ew[j];
                        }
                    }
                }
            }
            Ok(acc)
        })
        .collect();

    let mut total = TvAccumulator::zeros(c, d, r);
    for p in partials {
        total.merge(&p?);
    }

    if total.mean_energy == 0.0 {
        return Err(Error::Numerical(
            "degenerate T update: every i-vector posterior mean is zero".into(),
        ));
    }

    // M-step in the whitened space, then unwhiten: T_c = G_c T̂_c.
    let mut t_new = Array2::zeros((c * d, r));
    for ci in 0..c {
        let l = linalg::cholesky_lower(total.gram[ci].view(), "M-step Gram").map_err(|_| {
            Error::Numerical(format!("M-step Gram matrix is singular for component {ci}"))
        })?;
        // T̂_c' = A_c^{-1} B_c'  (solve column by column)
        let mut t_white = Array2::zeros((d, r));
        for i in 0..d {
            let rhs = total.cross[ci].row(i).to_owned();
            let sol = linalg::cholesky_solve(l.view(), rhs.view());
            t_white.row_mut(i).assign(&sol);
        }
        let g = model.ubm.chol(ci);
        let unwhitened = g.dot(&t_white);
        t_new
            .slice_mut(ndarray::s![ci * d..(ci + 1) * d, ..])
            .assign(&unwhitened);
    }

    Ok((
        TotalVariabilityModel::new(model.ubm.clone(), t_new, r)?,
        total.objective,
    ))
}

/// Trained model plus the per-iteration EM objective (log-likelihood up to
/// a constant that does not depend on T).
#[derive(Debug)]
pub struct TvTraining {
    pub model: TotalVariabilityModel,
    pub objective: Vec<f64>,
}

/// Train T by EM from a seeded random Gaussian initialization (scaled 0.1).
pub fn train_tv_em(
    stats: &[SufficientStats],
    ubm: &GmmModel,
    rank: usize,
    iterations: usize,
    seed: u64,
) -> Result<TvTraining> {
    if rank == 0 {
        return Err(Error::InvalidData("i-vector rank must be >= 1".into()));
    }
    if stats.len() < rank {
        return Err(Error::InsufficientData(format!(
            "{} utterances for rank {rank}; need at least rank-many",
            stats.len()
        )));
    }
    let cd = ubm.num_components() * ubm.dim();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let t0 = Array2::from_shape_fn((cd, rank), |_| {
        0.1 * <rand_distr::StandardNormal as Distribution<f64>>::sample(&normal, &mut rng)
    });
    let mut model = TotalVariabilityModel::new(ubm.clone(), t0, rank)?;

    let mut objective = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let (updated, obj) = tv_em_iteration(&model, stats)?;
        model = updated;
        objective.push(obj);
    }
    Ok(TvTraining { model, objective })
}

/// Extract i-vectors for a batch of utterances (parallel, input order kept).
pub fn extract_ivectors(
    stats: &[SufficientStats],
    model: &TotalVariabilityModel,
) -> Result<Vec<IVector>> {
    let extractor = TvExtractor::new(model);
    stats.par_iter().map(|s| extractor.extract(s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FeatureKind;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    fn feats(data: Array2<f64>) -> FeatureMatrix {
        FeatureMatrix {
            data,
            energy_index: 0,
            frame_period: 0.010,
            kind: FeatureKind::Mfcc,
        }
    }

    fn scalar_ubm() -> GmmModel {
        GmmModel::new(
            Array1::from_elem(1, 1.0),
            array![[0.0]],
            vec![array![[1.0]]],
        )
        .unwrap()
    }

    fn scalar_model(t: f64) -> TotalVariabilityModel {
        TotalVariabilityModel::new(scalar_ubm(), array![[t]], 1).unwrap()
    }

    fn scalar_stats(n: f64, f: f64) -> SufficientStats {
        SufficientStats {
            n: array![n],
            f: array![[f]],
            utterance_id: "utt".into(),
        }
    }

    #[test]
    fn stats_single_frame_single_component() {
        let post = PosteriorMatrix {
            data: array![[0.0, 0.0, 0.0, 1.0]],
        };
        let frames = feats(array![[2.0, -1.0]]);
        let s = accumulate_stats(&post, &frames, "u0").unwrap();
        assert_eq!(s.n, array![0.0, 0.0, 0.0, 1.0]);
        assert_eq!(s.f.row(3).to_owned(), array![2.0, -1.0]);
        for c in 0..3 {
            assert_eq!(s.f.row(c).sum(), 0.0);
        }
    }

    #[test]
    fn stats_two_identical_frames_split_posterior() {
        let post = PosteriorMatrix {
            data: array![[0.5, 0.5], [0.5, 0.5]],
        };
        let frames = feats(array![[3.0, 4.0], [3.0, 4.0]]);
        let s = accumulate_stats(&post, &frames, "u0").unwrap();
        assert_eq!(s.n, array![1.0, 1.0]);
        for c in 0..2 {
            assert_eq!(s.f.row(c).to_owned(), array![3.0, 4.0]);
        }
    }

    #[test]
    fn stats_match_bruteforce_double_loop() {
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        let t = 50;
        let c = 5;
        let d = 3;
        let mut post = Array2::zeros((t, c));
        for ti in 0..t {
            let mut sum = 0.0;
            for ci in 0..c {
                let v: f64 = rng.random();
                post[[ti, ci]] = v;
                sum += v;
            }
            post.row_mut(ti).mapv_inplace(|v| v / sum);
        }
        let frames_arr = Array2::from_shape_fn((t, d), |_| rng.random::<f64>() * 4.0 - 2.0);
        let s = accumulate_stats(
            &PosteriorMatrix { data: post.clone() },
            &feats(frames_arr.clone()),
            "u",
        )
        .unwrap();

        for ci in 0..c {
            let mut n = 0.0;
            let mut f = vec![0.0; d];
            for ti in 0..t {
                n += post[[ti, ci]];
                for j in 0..d {
                    f[j] += post[[ti, ci]] * frames_arr[[ti, j]];
                }
            }
            assert_abs_diff_eq!(s.n[ci], n, epsilon = 1e-12);
            for j in 0..d {
                assert_abs_diff_eq!(s.f[[ci, j]], f[j], epsilon = 1e-12);
            }
        }
        // Occupancy total equals the frame count for unpruned posteriors.
        assert_abs_diff_eq!(s.n.sum(), t as f64, epsilon = 1e-6);
    }

    #[test]
    fn stats_concatenation_equals_fieldwise_sum() {
        // Dyadic test values keep every float addition exact, so the
        // equality holds bit-for-bit regardless of summation grouping.
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let mk = |t: usize, rng: &mut ChaCha20Rng| {
            let mut post = Array2::zeros((t, 3));
            for ti in 0..t {
                let a = rng.random_range(0..32) as f64 / 64.0;
                let b = rng.random_range(0..32) as f64 / 64.0;
                post[[ti, 0]] = a;
                post[[ti, 1]] = b;
                post[[ti, 2]] = 1.0 - a - b;
            }
            let frames =
                Array2::from_shape_fn((t, 2), |_| rng.random_range(-512..512) as f64 / 256.0);
            (PosteriorMatrix { data: post }, feats(frames))
        };
        let (p1, f1) = mk(20, &mut rng);
        let (p2, f2) = mk(30, &mut rng);

        let mut concat_post = Array2::zeros((50, 3));
        concat_post.slice_mut(ndarray::s![..20, ..]).assign(&p1.data);
        concat_post.slice_mut(ndarray::s![20.., ..]).assign(&p2.data);
        let mut concat_frames = Array2::zeros((50, 2));
        concat_frames.slice_mut(ndarray::s![..20, ..]).assign(&f1.data);
        concat_frames.slice_mut(ndarray::s![20.., ..]).assign(&f2.data);

        let whole = accumulate_stats(
            &PosteriorMatrix { data: concat_post },
            &feats(concat_frames),
            "u",
        )
        .unwrap();
        let mut parts = accumulate_stats(&p1, &f1, "u").unwrap();
        parts.merge(&accumulate_stats(&p2, &f2, "u").unwrap());
        assert_eq!(whole.n, parts.n);
        assert_eq!(whole.f, parts.f);
    }

    #[test]
    fn extractor_hand_case() {
        // C=1, D=1, Sigma=1, mean=0, T=1, stats n=1 f=2:
        // L = 2, E[w] = 1.
        let model = scalar_model(1.0);
        let iv = extract_ivector(&scalar_stats(1.0, 2.0), &model).unwrap();
        assert_abs_diff_eq!(iv.w[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn em_iteration_hand_case() {
        // Same setup; E[ww'] = 1/2 + 1 = 1.5, so T_new = 2*1 / 1.5 = 4/3.
        let model = scalar_model(1.0);
        let (updated, _) = tv_em_iteration(&model, &[scalar_stats(1.0, 2.0)]).unwrap();
        assert_abs_diff_eq!(updated.t[[0, 0]], 4.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_centered_stats_flag_degenerate_update() {
        // f = n * mean makes every centered statistic zero.
        let model = scalar_model(1.0);
        let err = tv_em_iteration(&model, &[scalar_stats(1.0, 0.0)]).unwrap_err();
        assert!(err.to_string().contains("degenerate"));
    }

    #[test]
    fn empty_stats_give_prior_mean() {
        let model = scalar_model(1.0);
        let iv = extract_ivector(&scalar_stats(0.0, 0.0), &model).unwrap();
        assert_eq!(iv.w[0], 0.0);
    }

    #[test]
    fn extraction_deterministic() {
        let model = scalar_model(0.7);
        let a = extract_ivector(&scalar_stats(2.0, 1.5), &model).unwrap();
        let b = extract_ivector(&scalar_stats(2.0, 1.5), &model).unwrap();
        assert_eq!(a.w, b.w);
    }

    #[test]
    fn extraction_linear_in_first_order_stats() {
        // Fixed occupancies: w(f1 + f2) = w(f1) + w(f2).
        let ubm = GmmModel::new(
            Array1::from_elem(2, 0.5),
            array![[0.0, 0.0], [1.0, -1.0]],
            vec![array![[2.0, 0.3], [0.3, 1.0]], array![[1.0, 0.0], [0.0, 1.5]]],
        )
        .unwrap();
        let t = Array2::from_shape_fn((4, 2), |(i, j)| ((i + 1) as f64) * 0.2 - (j as f64) * 0.1);
        let model = TotalVariabilityModel::new(ubm, t, 2).unwrap();

        let n = array![2.0, 3.0];
        // Keep n fixed; the centered stats f̃ differ by the n*mean offset,
        // so linearity holds for (f - n*mean), checked via the difference.
        let f1 = array![[0.5, -0.2], [1.0, 0.4]];
        let f2 = array![[-0.3, 0.8], [0.2, -0.9]];
        let base = array![[0.0, 0.0], [0.0, 0.0]];
        let mk = |f: &Array2<f64>| SufficientStats {
            n: n.clone(),
            f: f.clone(),
            utterance_id: "u".into(),
        };
        let w_base = extract_ivector(&mk(&base), &model).unwrap().w;
        let w1 = extract_ivector(&mk(&f1), &model).unwrap().w;
        let w2 = extract_ivector(&mk(&f2), &model).unwrap().w;
        let w12 = extract_ivector(&mk(&(&f1 + &f2)), &model).unwrap().w;
        // w(f1+f2) - w(0) = (w(f1) - w(0)) + (w(f2) - w(0))
        for j in 0..2 {
            assert_abs_diff_eq!(
                w12[j] - w_base[j],
                (w1[j] - w_base[j]) + (w2[j] - w_base[j]),
                epsilon = 1e-10
            );
        }
    }

    #[test]
    fn posterior_precision_always_spd() {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let ubm = GmmModel::new(
            Array1::from_elem(3, 1.0 / 3.0),
            Array2::from_shape_fn((3, 2), |_| rng.random::<f64>()),
            vec![Array2::eye(2), Array2::eye(2), Array2::eye(2)],
        )
        .unwrap();
        let t = Array2::from_shape_fn((6, 3), |_| rng.random::<f64>() - 0.5);
        let model = TotalVariabilityModel::new(ubm, t, 3).unwrap();
        for _ in 0..20 {
            let stats = SufficientStats {
                n: Array1::from_shape_fn(3, |_| rng.random::<f64>() * 10.0),
                f: Array2::from_shape_fn((3, 2), |_| rng.random::<f64>() - 0.5),
                utterance_id: "u".into(),
            };
            assert!(extract_ivector(&stats, &model).is_ok());
        }
    }

    #[test]
    fn requires_rank_many_utterances() {
        let ubm = scalar_ubm();
        let err = train_tv_em(&[], &ubm, 1, 1, 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientData(_)));
    }

    /// Largest principal angle between the column spans of two matrices.
    fn max_principal_angle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        fn orthonormalize(m: &Array2<f64>) -> Array2<f64> {
            let mut q = m.clone();
            for j in 0..q.ncols() {
                for k in 0..j {
                    let proj = q.column(j).dot(&q.column(k));
                    let col_k = q.column(k).to_owned();
                    q.column_mut(j).scaled_add(-proj, &col_k);
                }
                let norm = q.column(j).dot(&q.column(j)).sqrt();
                q.column_mut(j).mapv_inplace(|v| v / norm);
            }
            q
        }
        let qa = orthonormalize(a);
        let qb = orthonormalize(b);
        let m = qa.t().dot(&qb);
        let mtm = m.t().dot(&m);
        let (vals, _) = linalg::symmetric_eigen_desc(mtm.view(), "angles").unwrap();
        let sigma_min = vals[vals.len() - 1].max(0.0).sqrt().min(1.0);
        sigma_min.acos()
    }

    #[test]
    fn tv_recovery_small() {
        // Stats generated exactly from the model: hard occupancies and
        // f ~ N(n(m + Tw), n Sigma), here with identity covariances.
        let c = 4;
        let d = 3;
        let r = 2;
        let mut rng = ChaCha20Rng::seed_from_u64(123);
        let normal = rand_distr::StandardNormal;
        let draw = |s: f64, rng: &mut ChaCha20Rng| -> f64 {
            s * <rand_distr::StandardNormal as Distribution<f64>>::sample(&normal, rng)
        };

        let means = Array2::from_shape_fn((c, d), |_| draw(2.0, &mut rng));
        let ubm = GmmModel::new(
            Array1::from_elem(c, 1.0 / c as f64),
            means.clone(),
            (0..c).map(|_| Array2::eye(d)).collect(),
        )
        .unwrap();
        let t_true = Array2::from_shape_fn((c * d, r), |_| draw(1.0, &mut rng));

        let stats: Vec<SufficientStats> = (0..400)
            .map(|u| {
                let w = Array1::from_shape_fn(r, |_| draw(1.0, &mut rng));
                let mut n = Array1::zeros(c);
                let mut f = Array2::zeros((c, d));
                for ci in 0..c {
                    let nc = 30.0;
                    n[ci] = nc;
                    let shift = t_true
                        .slice(ndarray::s![ci * d..(ci + 1) * d, ..])
                        .dot(&w);
                    for j in 0..d {
                        f[[ci, j]] = nc * (means[[ci, j]] + shift[j])
                            + nc.sqrt() * draw(1.0, &mut rng);
                    }
                }
                SufficientStats { n, f, utterance_id: format!("u{u}") }
            })
            .collect();

        let trained = train_tv_em(&stats, &ubm, r, 10, 99).unwrap();
        let angle = max_principal_angle(&trained.model.t, &t_true);
        assert!(angle < 0.2, "principal angle {angle}");

        // EM objective is non-decreasing within relative slack.
        let obj = &trained.objective;
        for k in 1..obj.len() {
            assert!(
                obj[k] >= obj[k - 1] - 1e-6 * obj[k - 1].abs(),
                "objective dropped at {k}: {} -> {}",
                obj[k - 1],
                obj[k]
            );
        }
    }

    #[test]
    fn training_same_seed_identical() {
        let model = scalar_ubm();
        let stats: Vec<SufficientStats> = (0..5)
            .map(|i| scalar_stats(1.0 + i as f64, 0.5 * i as f64 + 0.3))
            .collect();
        let a = train_tv_em(&stats, &model, 1, 3, 5).unwrap();
        let b = train_tv_em(&stats, &model, 1, 3, 5).unwrap();
        assert_eq!(a.model.t, b.model.t);
    }
}
