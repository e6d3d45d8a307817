//! Acoustic front-end: converts raw mono PCM audio into voiced, normalized
//! feature matrices (MFCC or PLP with deltas and sliding-window CMN).

mod dsp;
mod mfcc;
mod plp;

pub use dsp::{num_frames, FRAME_LEN, FRAME_SKIP};
pub use mfcc::compute_mfcc;
pub use plp::compute_plp;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Acoustic feature family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Mfcc,
    Plp,
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureKind::Mfcc => write!(f, "mfcc"),
            FeatureKind::Plp => write!(f, "plp"),
        }
    }
}

/// Mono audio at 8 or 16 kHz, samples nominally in [-1, 1].
#[derive(Debug, Clone)]
pub struct AudioSignal {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioSignal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidData("empty audio signal".into()));
        }
        if sample_rate != 8000 && sample_rate != 16000 {
            return Err(Error::InvalidData(format!(
                "unsupported sample rate {sample_rate} Hz (expected 8000 or 16000)"
            )));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    /// Samples at 8 kHz; 16 kHz input is decimated by two after a low-pass FIR.
    pub fn at_8khz(&self) -> std::borrow::Cow<'_, [f64]> {
        match self.sample_rate {
            8000 => std::borrow::Cow::Borrowed(&self.samples),
            _ => std::borrow::Cow::Owned(dsp::decimate_16k_to_8k(&self.samples)),
        }
    }
}

/// Front-end parameters. Defaults give 19 cepstra + log-energy = 20 base
/// dimensions, tripled to 60 by the delta stage.
#[derive(Debug, Clone)]
pub struct FrontendConfig {
    /// Cepstral coefficients per frame, excluding the log-energy channel.
    pub num_ceps: usize,
    /// Triangular mel filters (MFCC).
    pub mel_filters: usize,
    pub mel_low_hz: f64,
    pub mel_high_hz: f64,
    /// Bark-scale critical bands (PLP).
    pub bark_filters: usize,
    /// All-pole model order (PLP).
    pub lpc_order: usize,
    pub pre_emphasis: f64,
    /// Floor for energies before taking logs.
    pub energy_floor: f64,
    /// CMN window length in seconds.
    pub cmn_window_s: f64,
    /// VAD threshold offset in units of log-energy standard deviation:
    /// theta = mean + vad_offset_std * std.
    pub vad_offset_std: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            num_ceps: 19,
            mel_filters: 23,
            mel_low_hz: 20.0,
            mel_high_hz: 3800.0,
            bark_filters: 17,
            lpc_order: 12,
            pre_emphasis: 0.97,
            energy_floor: 1e-10,
            cmn_window_s: 3.0,
            vad_offset_std: -0.5,
        }
    }
}

impl FrontendConfig {
    pub fn base_dim(&self) -> usize {
        self.num_ceps + 1
    }
}

/// Frames-by-coefficients feature matrix with the log-energy column marked.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f64>,
    /// Column holding the frame log-energy (the C0 slot).
    pub energy_index: usize,
    /// Seconds between frame starts.
    pub frame_period: f64,
    pub kind: FeatureKind,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn log_energies(&self) -> ndarray::ArrayView1<'_, f64> {
        self.data.column(self.energy_index)
    }
}

/// Per-frame speech/non-speech decisions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VadMask {
    pub decisions: Vec<bool>,
}

impl VadMask {
    pub fn num_voiced(&self) -> usize {
        self.decisions.iter().filter(|&&d| d).count()
    }
}

pub(crate) fn check_length(num_samples: usize) -> Result<usize> {
    dsp::num_frames(num_samples).ok_or(Error::UtteranceTooShort {
        samples: num_samples,
        needed: dsp::FRAME_LEN,
    })
}

/// Append first- and second-order regression deltas (window of ±2 frames,
/// edge frames replicated). Output dimension is three times the input.
pub fn append_deltas(feats: &FeatureMatrix) -> FeatureMatrix {
    const WIN: isize = 2;
    // Denominator of the regression delta: 2 * sum n^2 over the window.
    let denom: f64 = 2.0 * (1..=WIN).map(|n| (n * n) as f64).sum::<f64>();

    let t = feats.num_frames();
    let d = feats.dim();
    let clamp = |i: isize| -> usize { i.clamp(0, t as isize - 1) as usize };

    let delta_of = |src: &Array2<f64>| -> Array2<f64> {
        let mut out = Array2::zeros((t, d));
        for ti in 0..t as isize {
            for n in 1..=WIN {
                let fwd = src.row(clamp(ti + n));
                let bwd = src.row(clamp(ti - n));
                for c in 0..d {
                    out[[ti as usize, c]] += n as f64 * (fwd[c] - bwd[c]);
                }
            }
        }
        out / denom
    };

    let delta = delta_of(&feats.data);
    let delta2 = delta_of(&delta);

    let mut data = Array2::zeros((t, 3 * d));
    data.slice_mut(ndarray::s![.., 0..d]).assign(&feats.data);
    data.slice_mut(ndarray::s![.., d..2 * d]).assign(&delta);
    data.slice_mut(ndarray::s![.., 2 * d..3 * d]).assign(&delta2);

    FeatureMatrix {
        data,
        energy_index: feats.energy_index,
        frame_period: feats.frame_period,
        kind: feats.kind,
    }
}

/// Sliding-window cepstral mean normalization. The log-energy column is
/// left untouched; windows are centered and truncated at the edges.
pub fn apply_cmn(feats: &FeatureMatrix, window_s: f64) -> FeatureMatrix {
    let t = feats.num_frames();
    let d = feats.dim();
    let mut win = (window_s / feats.frame_period).round() as usize;
    if win % 2 == 0 {
        win += 1;
    }
    let half = win / 2;

    let mut data = feats.data.clone();
    for ti in 0..t {
        let lo = ti.saturating_sub(half);
        let hi = (ti + half + 1).min(t);
        let n = (hi - lo) as f64;
        for c in 0..d {
            if c == feats.energy_index {
                continue;
            }
            let mean: f64 = (lo..hi).map(|r| feats.data[[r, c]]).sum::<f64>() / n;
            data[[ti, c]] -= mean;
        }
    }

    FeatureMatrix { data, ..feats.clone() }
}

/// Strict-majority smoothing of raw decisions over a centered window,
/// truncated at the sequence edges.
fn majority_smooth(raw: &[bool], window: usize) -> Vec<bool> {
    let t = raw.len();
    let half = window / 2;
    (0..t)
        .map(|ti| {
            let lo = ti.saturating_sub(half);
            let hi = (ti + half + 1).min(t);
            let trues = raw[lo..hi].iter().filter(|&&b| b).count();
            2 * trues > hi - lo
        })
        .collect()
}

/// Energy-based VAD: threshold the log-energy at mean + offset * std, then
/// take the majority of raw decisions over a centered 11-frame window.
pub fn compute_vad(feats: &FeatureMatrix, config: &FrontendConfig) -> VadMask {
    const VAD_WINDOW: usize = 11;
    let e = feats.log_energies();
    let t = e.len() as f64;
    let mean = e.sum() / t;
    let var = e.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / t;
    let theta = mean + config.vad_offset_std * var.sqrt();

    let raw: Vec<bool> = e.iter().map(|&x| x > theta).collect();
    VadMask {
        decisions: majority_smooth(&raw, VAD_WINDOW),
    }
}

/// Keep the rows where the mask is true, preserving order.
pub fn select_voiced(feats: &FeatureMatrix, mask: &VadMask) -> Result<FeatureMatrix> {
    if mask.decisions.len() != feats.num_frames() {
        return Err(Error::DimensionMismatch(format!(
            "VAD mask has {} decisions for {} frames",
            mask.decisions.len(),
            feats.num_frames()
        )));
    }
    let rows: Vec<usize> = mask
        .decisions
        .iter()
        .enumerate()
        .filter_map(|(i, &keep)| keep.then_some(i))
        .collect();
    if rows.is_empty() {
        return Err(Error::NoSpeechFrames);
    }
    let mut data = Array2::zeros((rows.len(), feats.dim()));
    for (out_row, &src_row) in rows.iter().enumerate() {
        data.row_mut(out_row).assign(&feats.data.row(src_row));
    }
    Ok(FeatureMatrix { data, ..feats.clone() })
}

/// Convenience wrapper: features, deltas, CMN in pipeline order.
pub fn extract_features(
    signal: &AudioSignal,
    kind: FeatureKind,
    config: &FrontendConfig,
) -> Result<FeatureMatrix> {
    let base = match kind {
        FeatureKind::Mfcc => compute_mfcc(signal, config)?,
        FeatureKind::Plp => compute_plp(signal, config)?,
    };
    let with_deltas = append_deltas(&base);
    Ok(apply_cmn(&with_deltas, config.cmn_window_s))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;

    fn tone(n: usize, rate: u32, freq: f64) -> AudioSignal {
        let samples = (0..n)
            .map(|i| 0.4 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        AudioSignal::new(samples, rate).unwrap()
    }

    fn noise(n: usize, seed: u64) -> AudioSignal {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let samples = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
        AudioSignal::new(samples, 8000).unwrap()
    }

    fn matrix(data: Array2<f64>) -> FeatureMatrix {
        FeatureMatrix {
            data,
            energy_index: 0,
            frame_period: 0.010,
            kind: FeatureKind::Mfcc,
        }
    }

    #[test]
    fn mfcc_frame_count_8k() {
        let feats = compute_mfcc(&tone(8000, 8000, 440.0), &FrontendConfig::default()).unwrap();
        assert_eq!(feats.num_frames(), 98);
        assert_eq!(feats.dim(), 20);
    }

    #[test]
    fn plp_frame_count_matches_mfcc() {
        let cfg = FrontendConfig::default();
        for n in [200, 1000, 8000, 12345] {
            let sig = noise(n, n as u64);
            let m = compute_mfcc(&sig, &cfg).unwrap();
            let p = compute_plp(&sig, &cfg).unwrap();
            assert_eq!(m.num_frames(), p.num_frames());
            assert_eq!(m.num_frames(), num_frames(n).unwrap());
            assert_eq!(p.dim(), 20);
        }
    }

    #[test]
    fn too_short_signal_errors() {
        let sig = AudioSignal::new(vec![0.1; 150], 8000).unwrap();
        let err = compute_mfcc(&sig, &FrontendConfig::default()).unwrap_err();
        assert!(err.to_string().contains("utterance too short"));
        let err = compute_plp(&sig, &FrontendConfig::default()).unwrap_err();
        assert!(err.to_string().contains("utterance too short"));
    }

    #[test]
    fn all_zero_signal_gives_constant_rows() {
        let sig = AudioSignal::new(vec![0.0; 2000], 8000).unwrap();
        let cfg = FrontendConfig::default();
        for feats in [compute_mfcc(&sig, &cfg).unwrap(), compute_plp(&sig, &cfg).unwrap()] {
            let first = feats.data.row(0).to_owned();
            for row in feats.data.rows() {
                for (a, b) in row.iter().zip(first.iter()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn extraction_is_deterministic() {
        let sig = noise(8000, 7);
        let cfg = FrontendConfig::default();
        assert_eq!(compute_mfcc(&sig, &cfg).unwrap(), compute_mfcc(&sig, &cfg).unwrap());
        assert_eq!(compute_plp(&sig, &cfg).unwrap(), compute_plp(&sig, &cfg).unwrap());
    }

    #[test]
    fn sixteen_k_input_is_decimated() {
        let feats = compute_mfcc(&tone(16000, 16000, 440.0), &FrontendConfig::default()).unwrap();
        // 16000 samples -> 8000 at 8 kHz -> 98 frames.
        assert_eq!(feats.num_frames(), 98);
    }

    #[test]
    fn deltas_of_constant_are_zero() {
        let feats = matrix(Array2::from_elem((50, 4), 3.25));
        let out = append_deltas(&feats);
        assert_eq!(out.dim(), 12);
        for v in out.data.slice(ndarray::s![.., 4..]).iter() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn delta_of_ramp_is_one() {
        // c_t = t: interior delta = (1*2 + 2*4) / (2*(1+4)) = 1.
        let data = Array2::from_shape_fn((20, 1), |(t, _)| t as f64);
        let out = append_deltas(&matrix(data));
        for t in 2..18 {
            assert!((out.data[[t, 1]] - 1.0).abs() < 1e-12, "delta at {t}");
        }
    }

    #[test]
    fn deltas_triple_dimension() {
        let sig = noise(8000, 9);
        let base = compute_mfcc(&sig, &FrontendConfig::default()).unwrap();
        assert_eq!(append_deltas(&base).dim(), 60);
    }

    #[test]
    fn cmn_full_window_removes_mean() {
        let data = array![[5.0, 1.0], [5.0, 2.0], [5.0, 3.0]];
        let out = apply_cmn(&matrix(data), 3.0);
        // Energy column (index 0) untouched.
        assert_eq!(out.data.column(0).to_vec(), vec![5.0, 5.0, 5.0]);
        assert_eq!(out.data.column(1).to_vec(), vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn cmn_constant_input_gives_zeros() {
        let out = apply_cmn(&matrix(Array2::from_elem((10, 3), 2.0)), 3.0);
        for c in 1..3 {
            assert!(out.data.column(c).iter().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn cmn_sliding_window_matches_bruteforce_oracle() {
        // Constant-plus-step signal, window of 101 frames (1.01 s).
        let t = 400;
        let data = Array2::from_shape_fn((t, 2), |(r, c)| {
            if c == 0 {
                1.0
            } else if r < 200 {
                1.0
            } else {
                4.0
            }
        });
        let feats = matrix(data);
        let out = apply_cmn(&feats, 1.01);
        let half = 50;
        for ti in 0..t {
            let lo = ti.saturating_sub(half);
            let hi = (ti + half + 1).min(t);
            let mean: f64 =
                (lo..hi).map(|r| feats.data[[r, 1]]).sum::<f64>() / (hi - lo) as f64;
            let expect = feats.data[[ti, 1]] - mean;
            assert!((out.data[[ti, 1]] - expect).abs() < 1e-12, "frame {ti}");
        }
    }

    #[test]
    fn cmn_windowed_means_vanish() {
        let sig = noise(8000, 21);
        let feats = append_deltas(&compute_mfcc(&sig, &FrontendConfig::default()).unwrap());
        let out = apply_cmn(&feats, 10.0); // window covers whole utterance
        for c in 1..out.dim() {
            let mean = out.data.column(c).sum() / out.num_frames() as f64;
            assert!(mean.abs() < 1e-9, "column {c} mean {mean}");
        }
    }

    #[test]
    fn majority_ten_of_eleven_is_speech() {
        let raw = [
            true, true, true, true, true, false, true, true, true, true, true,
        ];
        let smoothed = majority_smooth(&raw, 11);
        assert!(smoothed[5]);
    }

    #[test]
    fn majority_alternating_is_nonspeech() {
        // 5 true of 11 at the center frame: below strict majority.
        let raw: Vec<bool> = (0..11).map(|i| i % 2 == 1).collect();
        assert_eq!(raw.iter().filter(|&&b| b).count(), 5);
        let smoothed = majority_smooth(&raw, 11);
        assert!(!smoothed[5]);
    }

    #[test]
    fn vad_all_below_threshold_is_all_false() {
        let feats = matrix(Array2::from_elem((30, 2), -23.0));
        let mask = compute_vad(&feats, &FrontendConfig::default());
        assert_eq!(mask.num_voiced(), 0);
    }

    #[test]
    fn vad_invariant_under_global_energy_shift() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let data = Array2::from_shape_fn((120, 2), |_| rng.random::<f64>() * 10.0);
        let feats = matrix(data.clone());
        let cfg = FrontendConfig::default();
        let base = compute_vad(&feats, &cfg);
        let mut shifted_data = data;
        shifted_data.column_mut(0).mapv_inplace(|v| v + 123.456);
        let shifted = compute_vad(&matrix(shifted_data), &cfg);
        assert_eq!(base, shifted);
    }

    #[test]
    fn select_voiced_basics() {
        let feats = matrix(array![[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]]);
        let all = VadMask { decisions: vec![true; 3] };
        assert_eq!(select_voiced(&feats, &all).unwrap().data, feats.data);

        let none = VadMask { decisions: vec![false; 3] };
        assert!(matches!(
            select_voiced(&feats, &none),
            Err(crate::error::Error::NoSpeechFrames)
        ));

        let some = VadMask { decisions: vec![true, false, true] };
        let out = select_voiced(&feats, &some).unwrap();
        assert_eq!(out.data, array![[1.0, 10.0], [3.0, 30.0]]);
    }

    #[test]
    fn select_voiced_count_matches_popcount() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let feats = matrix(Array2::from_shape_fn((64, 3), |_| rng.random()));
        let mask = VadMask {
            decisions: (0..64).map(|_| rng.random::<f64>() < 0.6).collect(),
        };
        if mask.num_voiced() > 0 {
            let out = select_voiced(&feats, &mask).unwrap();
            assert_eq!(out.num_frames(), mask.num_voiced());
        }
    }
}
