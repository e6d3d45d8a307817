//! Synthetic-data kit: labeled corpora with known ground truth for
//! verifying the pipeline at desk scale, plus brute-force oracles.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::Distribution;

use crate::error::{Error, Result};
use crate::frontend::{FeatureKind, FeatureMatrix};
use crate::gmm::GmmModel;
use crate::ivector::IVector;


/// Ground-truth description of a synthetic i-vector corpus.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub seed: u64,
    pub speakers: usize,
    pub sessions_per_speaker: usize,
    pub dim: usize,
    /// Diagonal of the true between-class covariance.
    pub b_diag: Vec<f64>,
    /// Diagonal of the true within-class covariance.
    pub w_diag: Vec<f64>,
    /// Partition key -> additive offset; speakers are assigned to
    /// partitions round-robin. Empty map means one unshifted partition.
    pub shifts: BTreeMap<String, Vec<f64>>,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.speakers == 0 || self.sessions_per_speaker == 0 || self.dim == 0 {
            return Err(Error::InvalidData(
                "synthetic spec needs positive speaker/session/dimension counts".into(),
            ));
        }
        if self.b_diag.len() != self.dim || self.w_diag.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "covariance diagonals must have length {}",
                self.dim
            )));
        }
        if self.b_diag.iter().chain(&self.w_diag).any(|&v| v < 0.0) {
            return Err(Error::InvalidData("variances must be nonnegative".into()));
        }
        for (key, shift) in &self.shifts {
            if shift.len() != self.dim {
                return Err(Error::DimensionMismatch(format!(
                    "shift for partition '{key}' has length {}, expected {}",
                    shift.len(),
                    self.dim
                )));
            }
        }
        Ok(())
    }
}

/// Draw a labeled corpus from the two-covariance model: per speaker
/// x_s ~ N(0, B), per session x_s + y with y ~ N(0, W), plus the partition
/// shift. Deterministic per seed.
pub fn gen_plda_vectors(spec: &SynthSpec) -> Result<Vec<IVector>> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let normal = rand_distr::StandardNormal;
    let draw = |rng: &mut ChaCha20Rng| -> f64 {
        <rand_distr::StandardNormal as Distribution<f64>>::sample(&normal, rng)
    };

    let partitions: Vec<(String, Vec<f64>)> = if spec.shifts.is_empty() {
        vec![(String::new(), vec![0.0; spec.dim])]
    } else {
        spec.shifts.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    };

    let mut out = Vec::with_capacity(spec.speakers * spec.sessions_per_speaker);
    for s in 0..spec.speakers {
        let (part_key, shift) = &partitions[s % partitions.len()];
        let x: Vec<f64> = (0..spec.dim)
            .map(|k| spec.b_diag[k].sqrt() * draw(&mut rng))
            .collect();
        for i in 0..spec.sessions_per_speaker {
            let w = Array1::from_shape_fn(spec.dim, |k| {
                x[k] + spec.w_diag[k].sqrt() * draw(&mut rng) + shift[k]
            });
            out.push(
                IVector::new(w, format!("spk{s:04}-s{i:03}")).with_labels(
                    Some(format!("spk{s:04}")),
                    if part_key.is_empty() { None } else { Some(part_key.clone()) },
                ),
            );
        }
    }
    Ok(out)
}

/// Ancestral sampling from a GMM: component by weight, then a Gaussian
/// draw through the component's Cholesky factor.
pub fn gen_gmm_frames(model: &GmmModel, frames: usize, seed: u64) -> FeatureMatrix {
    let d = model.dim();
    let c = model.num_components();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;

    let mut cumulative = Vec::with_capacity(c);
    let mut acc = 0.0;
    for w in model.weights() {
        acc += w;
        cumulative.push(acc);
    }

    let mut data = Array2::zeros((frames, d));
    for t in 0..frames {
        let u: f64 = rng.random();
        let ci = cumulative.partition_point(|&edge| edge < u).min(c - 1);
        let z = Array1::from_shape_fn(d, |_| {
            <rand_distr::StandardNormal as Distribution<f64>>::sample(&normal, &mut rng)
        });
        let x = model.means().row(ci).to_owned() + model.chol(ci).dot(&z);
        data.row_mut(t).assign(&x);
    }
    FeatureMatrix {
        data,
        energy_index: 0,
        frame_period: 0.010,
        kind: FeatureKind::Mfcc,
    }
}

/// Numeric-integration reference for the 1-D verification LLR.
///
/// Marginalizes the latent speaker variable x ~ N(0, psi) on a trapezoid
/// grid over ±10 sqrt(psi+1) with 1e5 points:
///   same:      ∫ N(x;0,psi) N(ū;x,1/n) N(u;x,1) dx
///   different: ∫ N(x;0,psi) N(ū;x,1/n) dx · ∫ N(x;0,psi) N(u;x,1) dx
pub fn llr_oracle_1d(psi: f64, n: usize, u_enroll_mean: f64, u_test: f64) -> f64 {
    assert!(psi >= 0.0, "psi must be nonnegative");
    assert!(n >= 1, "need at least one enrollment session");
    if psi == 0.0 {
        // The prior is a point mass at zero; both hypotheses coincide.
        return 0.0;
    }
    const POINTS: usize = 100_000;
    let half_range = 10.0 * (psi + 1.0).sqrt();
    let step = 2.0 * half_range / (POINTS - 1) as f64;

    let normal_pdf = |x: f64, mean: f64, var: f64| -> f64 {
        (-(x - mean) * (x - mean) / (2.0 * var)).exp()
            / (2.0 * std::f64::consts::PI * var).sqrt()
    };

    let mut joint = 0.0;
    let mut enroll_marginal = 0.0;
    let mut test_marginal = 0.0;
    for i in 0..POINTS {
        let x = -half_range + i as f64 * step;
        let weight = if i == 0 || i == POINTS - 1 { 0.5 } else { 1.0 };
        let prior = normal_pdf(x, 0.0, psi);
        let enroll_lik = normal_pdf(u_enroll_mean, x, 1.0 / n as f64);
        let test_lik = normal_pdf(u_test, x, 1.0);
        joint += weight * prior * enroll_lik * test_lik;
        enroll_marginal += weight * prior * enroll_lik;
        test_marginal += weight * prior * test_lik;
    }
    // The common step factor cancels between numerator and denominator,
    // except once: ln(joint*h) - ln(enroll*h) - ln(test*h) = ln joint - ln enroll - ln test - ln h.
    joint.ln() - enroll_marginal.ln() - test_marginal.ln() - step.ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plda::{score_trial, PostNormTransform, Trial, TrialLabel};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn basic_spec(seed: u64) -> SynthSpec {
        SynthSpec {
            seed,
            speakers: 10,
            sessions_per_speaker: 4,
            dim: 3,
            b_diag: vec![1.0, 0.5, 0.25],
            w_diag: vec![0.5, 0.25, 0.125],
            shifts: BTreeMap::new(),
        }
    }

    #[test]
    fn zero_variances_leave_only_shift() {
        let mut spec = basic_spec(1);
        spec.b_diag = vec![0.0; 3];
        spec.w_diag = vec![0.0; 3];
        spec.shifts.insert("a".into(), vec![1.0, 2.0, 3.0]);
        spec.shifts.insert("b".into(), vec![-1.0, 0.0, 1.0]);
        let vectors = gen_plda_vectors(&spec).unwrap();
        for v in &vectors {
            let expect = match v.partition.as_deref() {
                Some("a") => array![1.0, 2.0, 3.0],
                Some("b") => array![-1.0, 0.0, 1.0],
                other => panic!("unexpected partition {other:?}"),
            };
            assert_eq!(v.w, expect);
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let a = gen_plda_vectors(&basic_spec(9)).unwrap();
        let b = gen_plda_vectors(&basic_spec(9)).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.w, y.w);
            assert_eq!(x.utterance_id, y.utterance_id);
        }
        let c = gen_plda_vectors(&basic_spec(10)).unwrap();
        assert_ne!(a[0].w, c[0].w);
    }

    #[test]
    fn empirical_covariances_near_truth() {
        let spec = SynthSpec {
            seed: 3,
            speakers: 500,
            sessions_per_speaker: 10,
            dim: 2,
            b_diag: vec![2.0, 1.0],
            w_diag: vec![1.0, 0.5],
            shifts: BTreeMap::new(),
        };
        let vectors = gen_plda_vectors(&spec).unwrap();

        // Law-of-large-numbers check on per-speaker means and residuals.
        let mut by_speaker: BTreeMap<&str, Vec<&IVector>> = BTreeMap::new();
        for v in &vectors {
            by_speaker.entry(v.speaker.as_deref().unwrap()).or_default().push(v);
        }
        let mut within = [0.0f64; 2];
        let mut between = [0.0f64; 2];
        for sessions in by_speaker.values() {
            let mut m = [0.0f64; 2];
            for v in sessions {
                m[0] += v.w[0];
                m[1] += v.w[1];
            }
            m[0] /= sessions.len() as f64;
            m[1] /= sessions.len() as f64;
            between[0] += m[0] * m[0];
            between[1] += m[1] * m[1];
            for v in sessions {
                within[0] += (v.w[0] - m[0]).powi(2);
                within[1] += (v.w[1] - m[1]).powi(2);
            }
        }
        let s = by_speaker.len() as f64;
        let n = vectors.len() as f64;
        for k in 0..2 {
            let w_hat = within[k] / n;
            // E[within scatter/n] = W (1 - 1/sessions); undo the bias.
            let w_hat = w_hat * 10.0 / 9.0;
            assert!(
                (w_hat - spec.w_diag[k]).abs() / spec.w_diag[k] < 0.10,
                "W[{k}] = {w_hat}"
            );
            let b_hat = between[k] / s - spec.w_diag[k] / 10.0;
            assert!(
                (b_hat - spec.b_diag[k]).abs() / spec.b_diag[k] < 0.10,
                "B[{k}] = {b_hat}"
            );
        }
    }

    #[test]
    fn gmm_sampling_degenerate_covariance_pins_frames() {
        let model = GmmModel::new(
            Array1::from_elem(1, 1.0),
            array![[2.0, -1.0]],
            vec![Array2::eye(2) * 1e-30],
        )
        .unwrap();
        let frames = gen_gmm_frames(&model, 50, 4);
        for row in frames.data.rows() {
            assert_abs_diff_eq!(row[0], 2.0, epsilon = 1e-10);
            assert_abs_diff_eq!(row[1], -1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn gmm_sampling_matches_weights() {
        let model = GmmModel::new(
            array![0.5, 0.3, 0.2],
            array![[0.0], [10.0], [20.0]],
            vec![array![[0.01]], array![[0.01]], array![[0.01]]],
        )
        .unwrap();
        let t = 100_000;
        let frames = gen_gmm_frames(&model, t, 11);
        let mut counts = [0usize; 3];
        for row in frames.data.rows() {
            let x = row[0];
            if x < 5.0 {
                counts[0] += 1;
            } else if x < 15.0 {
                counts[1] += 1;
            } else {
                counts[2] += 1;
            }
        }
        for (ci, &w) in [0.5, 0.3, 0.2].iter().enumerate() {
            let expect = w * t as f64;
            let sigma = (t as f64 * w * (1.0 - w)).sqrt();
            assert!(
                (counts[ci] as f64 - expect).abs() < 3.0 * sigma,
                "component {ci}: {} vs {expect}",
                counts[ci]
            );
        }
    }

    #[test]
    fn gmm_sampling_deterministic() {
        let model = GmmModel::new(
            Array1::from_elem(1, 1.0),
            array![[0.0]],
            vec![array![[1.0]]],
        )
        .unwrap();
        assert_eq!(gen_gmm_frames(&model, 32, 5).data, gen_gmm_frames(&model, 32, 5).data);
    }

    #[test]
    fn oracle_zero_psi_is_zero() {
        assert_eq!(llr_oracle_1d(0.0, 1, 0.8, -0.5), 0.0);
        assert_eq!(llr_oracle_1d(0.0, 7, -2.0, 3.0), 0.0);
    }

    #[test]
    fn oracle_matches_hand_values() {
        assert_abs_diff_eq!(llr_oracle_1d(1.0, 1, 1.0, 1.0), 0.310508, epsilon = 1e-4);
        assert_abs_diff_eq!(llr_oracle_1d(1.0, 4, 0.0, 0.0), 0.255413, epsilon = 1e-4);
    }

    #[test]
    fn oracle_agrees_with_closed_form_scoring() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..25 {
            let psi = rng.random::<f64>() * 4.0;
            let n = 1 + rng.random_range(0..6);
            let enroll_mean = rng.random::<f64>() * 4.0 - 2.0;
            let test = rng.random::<f64>() * 4.0 - 2.0;

            let t = PostNormTransform {
                a: Array2::eye(1),
                psi: array![psi],
                rank: 1,
            };
            let trial = Trial {
                enroll: (0..n)
                    .map(|i| IVector::new(array![enroll_mean], format!("e{i}")))
                    .collect(),
                test: IVector::new(array![test], "t"),
                label: TrialLabel::Unknown,
            };
            let closed = score_trial(&trial, &t).unwrap();
            let numeric = llr_oracle_1d(psi, n, enroll_mean, test);
            assert_abs_diff_eq!(closed, numeric, epsilon = 1e-4);
        }
    }
}
