//! Stage implementations. Each stage reads its upstream artifacts, writes
//! its outputs atomically, and records a manifest with input hashes.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use ndarray::{Array1, Array2};
use rayon::prelude::*;

use ivkit_core::embedspace::{
    apply_idvc, apply_lw, apply_mean_shift, fit_idvc, fit_lw, fit_mean_shift, length_normalize,
    IdvcConfig, IdvcModel, LwTransform, TrialSide,
};
use ivkit_core::eval::{fuse_scores, report, MetricReport, ScoreSet};
use ivkit_core::frontend::{
    compute_vad, extract_features, select_voiced, FeatureKind, FeatureMatrix, VadMask,
};
use ivkit_core::gmm::{
    combine_posteriors, couple_ubm, estimate_gmm_from_posteriors, gmm_posteriors, train_gmm_em,
    GmmModel, GmmTrainConfig, PosteriorMatrix,
};
use ivkit_core::io::ivmx::{read_ivmx_file, write_ivmx_file};
use ivkit_core::io::records;
use ivkit_core::io::tables::{
    join_scores_with_keys, read_ivectors, read_scores, read_trial_keys, write_ivectors,
    write_scores, write_trial_keys, TrialKey,
};
use ivkit_core::io::wav::read_wav;
use ivkit_core::ivector::{
    accumulate_stats, extract_ivectors, train_tv_em, IVector, SufficientStats,
};
use ivkit_core::plda::{
    postnorm_apply, postnorm_fit, score_trial, train_plda, truncate_eigenvoices, Trial,
    TrialLabel,
};
use ivkit_core::synthkit::{gen_plda_vectors, SynthSpec};
use ivkit_core::derive_seed;

use crate::config::{
    entries_for, read_data_list, DataEntry, DataSet, FeatureChoice, PipelineConfig,
    PosteriorSource, ShiftMethod, Subsystem,
};
use crate::manifest::{atomic_write, StageRun};

/// Shared context for every stage: the parsed config plus its work dir.
pub struct Ctx {
    pub config: PipelineConfig,
}

impl Ctx {
    pub fn new(config: PipelineConfig) -> Self {
        Self { config }
    }

    pub fn work(&self) -> &Path {
        &self.config.paths.work_dir
    }

    fn is_synthetic(&self) -> bool {
        self.config.synth.is_some()
    }

    fn features_dir(&self, kind: FeatureChoice) -> PathBuf {
        self.work().join("features").join(kind.as_str())
    }

    fn vad_dir(&self, kind: FeatureChoice) -> PathBuf {
        self.work().join("vad").join(kind.as_str())
    }

    fn ubm_path(&self, kind: FeatureChoice) -> PathBuf {
        self.work().join("models").join(format!("ubm-{}.gmm", kind.as_str()))
    }

    fn coupled_ubm_path(&self) -> PathBuf {
        self.work().join("models").join("ubm-twofeats-mfcc.gmm")
    }

    fn external_ubm_path(&self, sub: &str) -> PathBuf {
        self.sub_dir(sub).join("models").join("ubm-external.gmm")
    }

    fn sub_dir(&self, sub: &str) -> PathBuf {
        self.work().join(format!("sub-{sub}"))
    }

    fn stats_dir(&self, sub: &str) -> PathBuf {
        self.sub_dir(sub).join("stats")
    }

    fn tv_path(&self, sub: &str) -> PathBuf {
        self.sub_dir(sub).join("models").join("tv.tvmx")
    }

    fn ivec_paths(&self, sub: &str, set: DataSet, suffix: &str) -> (PathBuf, PathBuf) {
        let stem = format!("{}{}", set.as_str(), suffix);
        let dir = self.sub_dir(sub).join("ivectors");
        (dir.join(format!("{stem}.ivmx")), dir.join(format!("{stem}.tsv")))
    }

    fn synth_paths(&self, set: DataSet) -> (PathBuf, PathBuf) {
        let dir = self.work().join("synth");
        (
            dir.join(format!("{}.ivmx", set.as_str())),
            dir.join(format!("{}.tsv", set.as_str())),
        )
    }

    /// Raw (pre-normalization) i-vectors for a set: the synth output in
    /// synthetic mode, the subsystem's extraction output otherwise.
    fn raw_ivec_paths(&self, sub: &str, set: DataSet) -> (PathBuf, PathBuf) {
        if self.is_synthetic() {
            self.synth_paths(set)
        } else {
            self.ivec_paths(sub, set, "")
        }
    }

    fn lw_path(&self, sub: &str) -> PathBuf {
        self.sub_dir(sub).join("models").join("lw.lwtr")
    }

    fn idvc_path(&self, sub: &str) -> PathBuf {
        self.sub_dir(sub).join("models").join("idvc.idvc")
    }

    fn mean_shift_path(&self, sub: &str) -> PathBuf {
        self.sub_dir(sub).join("models").join("meanshift.mshf")
    }

    fn plda_raw_path(&self, sub: &str) -> PathBuf {
        self.sub_dir(sub).join("models").join("plda.pldr")
    }

    fn plda_postnorm_path(&self, sub: &str) -> PathBuf {
        self.sub_dir(sub).join("models").join("plda.pldn")
    }

    fn scores_path(&self, sub: &str) -> PathBuf {
        self.sub_dir(sub).join("scores.txt")
    }

    fn fused_scores_path(&self) -> PathBuf {
        self.work().join("fused.scores.txt")
    }

    fn trial_key_path(&self) -> PathBuf {
        match &self.config.paths.trial_key {
            Some(path) => path.clone(),
            None => self.work().join("synth").join("trials.tsv"),
        }
    }

    fn data_entries(&self) -> Result<Vec<DataEntry>> {
        let list = self
            .config
            .paths
            .data_list
            .as_ref()
            .ok_or_else(|| anyhow!("this stage needs audio data (set paths.data_list)"))?;
        read_data_list(list)
    }
}

fn feature_matrix_from_file(path: &Path, kind: FeatureKind) -> Result<FeatureMatrix> {
    let data = read_ivmx_file(path)?;
    Ok(FeatureMatrix {
        data,
        energy_index: 0,
        frame_period: 0.010,
        kind,
    })
}

fn vad_mask_from_file(path: &Path) -> Result<VadMask> {
    let data = read_ivmx_file(path)?;
    if data.ncols() != 1 {
        bail!("{}: VAD mask must be a T x 1 matrix", path.display());
    }
    Ok(VadMask {
        decisions: data.column(0).iter().map(|&v| v != 0.0).collect(),
    })
}

fn write_vad_mask(path: &Path, mask: &VadMask) -> Result<()> {
    let data = Array2::from_shape_fn((mask.decisions.len(), 1), |(i, _)| {
        if mask.decisions[i] { 1.0 } else { 0.0 }
    });
    atomic_write(path, |tmp| Ok(write_ivmx_file(tmp, data.view())?))
}

fn stats_to_matrix(stats: &SufficientStats) -> Array2<f64> {
    let c = stats.n.len();
    let d = stats.f.ncols();
    let mut m = Array2::zeros((c, d + 1));
    m.column_mut(0).assign(&stats.n);
    m.slice_mut(ndarray::s![.., 1..]).assign(&stats.f);
    m
}

fn stats_from_matrix(m: Array2<f64>, utterance_id: &str) -> SufficientStats {
    SufficientStats {
        n: m.column(0).to_owned(),
        f: m.slice(ndarray::s![.., 1..]).to_owned(),
        utterance_id: utterance_id.to_string(),
    }
}

/// Generate the synthetic corpus: train/enroll/test/dev i-vector sets and
/// the trial key. The configured shift is injected into test and dev only.
pub fn stage_synth(ctx: &Ctx) -> Result<()> {
    let synth = ctx
        .config
        .synth
        .as_ref()
        .ok_or_else(|| anyhow!("config has no [synth] section"))?;
    let seed = ctx.config.seed;
    let mut run = StageRun::new("synth", seed, synth);
    let b_diag = synth.diag(&synth.b_diag)?;
    let w_diag = synth.diag(&synth.w_diag)?;

    let relabel = |vectors: Vec<IVector>, prefix: &str| -> Vec<IVector> {
        vectors
            .into_iter()
            .map(|mut v| {
                v.utterance_id = v.utterance_id.replacen("spk", prefix, 1);
                v.speaker = v.speaker.map(|s| s.replacen("spk", prefix, 1));
                v
            })
            .collect()
    };

    let base_spec = |seed_tag: &str, speakers: usize, sessions: usize| SynthSpec {
        seed: derive_seed(seed, seed_tag),
        speakers,
        sessions_per_speaker: sessions,
        dim: synth.dim,
        b_diag: b_diag.clone(),
        w_diag: w_diag.clone(),
        shifts: BTreeMap::new(),
    };

    let mut train = relabel(
        gen_plda_vectors(&base_spec("synth-train", synth.train_speakers, synth.train_sessions))?,
        "trn",
    );
    for v in &mut train {
        v.partition = Some("base".to_string());
    }

    let eval_all = relabel(
        gen_plda_vectors(&base_spec(
            "synth-eval",
            synth.eval_speakers,
            synth.enroll_sessions + synth.test_sessions,
        ))?,
        "evl",
    );

    // Deterministic shift direction of the configured magnitude.
    let shift: Array1<f64> = if synth.shift_magnitude > 0.0 {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng =
            rand_chacha::ChaCha20Rng::seed_from_u64(derive_seed(seed, "synth-shift-dir"));
        let raw = Array1::from_shape_fn(synth.dim, |_| rng.random::<f64>() - 0.5);
        let norm = raw.dot(&raw).sqrt();
        raw * (synth.shift_magnitude / norm)
    } else {
        Array1::zeros(synth.dim)
    };
    let shifted_partition =
        if synth.shift_magnitude > 0.0 { "shifted" } else { "base" };

    let mut enroll = Vec::new();
    let mut test = Vec::new();
    for chunk in eval_all.chunks(synth.enroll_sessions + synth.test_sessions) {
        for (i, v) in chunk.iter().enumerate() {
            if i < synth.enroll_sessions {
                let mut v = v.clone();
                v.partition = Some("base".to_string());
                enroll.push(v);
            } else {
                let mut v = v.clone();
                v.w = &v.w + &shift;
                v.partition = Some(shifted_partition.to_string());
                test.push(v);
            }
        }
    }

    let dev: Vec<IVector> = relabel(
        gen_plda_vectors(&base_spec("synth-dev", synth.dev_vectors.max(1), 1))?,
        "dev",
    )
    .into_iter()
    .map(|mut v| {
        v.w = &v.w + &shift;
        v.speaker = None; // development data is unlabeled
        v.partition = Some(shifted_partition.to_string());
        v
    })
    .collect();

    // All enroll-speaker x test-utterance trials.
    let mut keys = Vec::new();
    for speaker in enroll
        .iter()
        .filter_map(|v| v.speaker.clone())
        .collect::<std::collections::BTreeSet<_>>()
    {
        for t in &test {
            let label = if t.speaker.as_deref() == Some(speaker.as_str()) {
                TrialLabel::Target
            } else {
                TrialLabel::NonTarget
            };
            keys.push(TrialKey {
                enroll_id: speaker.clone(),
                test_id: t.utterance_id.clone(),
                label,
                partition: t.partition.clone().unwrap_or_default(),
            });
        }
    }

    for (set, vectors) in [
        (DataSet::Train, &train),
        (DataSet::Enroll, &enroll),
        (DataSet::Test, &test),
        (DataSet::Dev, &dev),
    ] {
        let (ivmx, tsv) = ctx.synth_paths(set);
        write_vector_set(&ivmx, &tsv, vectors)?;
        run.add_output(ivmx);
        run.add_output(tsv);
    }
    let trials_path = ctx.work().join("synth").join("trials.tsv");
    atomic_write(&trials_path, |tmp| Ok(write_trial_keys(tmp, &keys)?))?;
    run.add_output(trials_path);
    run.add_items(train.len() + enroll.len() + test.len() + dev.len());
    run.finish(ctx.work())
}

fn write_vector_set(ivmx: &Path, tsv: &Path, vectors: &[IVector]) -> Result<()> {
    // Two coupled files; write both into temp names then move.
    atomic_write(ivmx, |tmp_ivmx| {
        let tmp_tsv = tmp_ivmx.with_extension("tsv-tmp");
        write_ivectors(tmp_ivmx, &tmp_tsv, vectors)?;
        std::fs::rename(&tmp_tsv, tsv)?;
        Ok(())
    })
}

/// Extract MFCC or PLP features (with deltas and CMN) for every utterance.
pub fn stage_extract_features(ctx: &Ctx, kind: FeatureChoice) -> Result<()> {
    let entries = ctx.data_entries()?;
    let mut run = StageRun::new(
        format!("extract-features-{}", kind.as_str()),
        ctx.config.seed,
        &ctx.config.frontend,
    );
    let config = ctx.config.frontend.to_core();
    let dir = ctx.features_dir(kind);
    std::fs::create_dir_all(&dir)?;

    let outputs: Vec<PathBuf> = entries
        .par_iter()
        .map(|entry| -> Result<PathBuf> {
            let signal = read_wav(&entry.wav_path)?;
            let feats = extract_features(&signal, kind.to_core(), &config)?;
            let out = dir.join(format!("{}.ivmx", entry.utt_id));
            atomic_write(&out, |tmp| Ok(write_ivmx_file(tmp, feats.data.view())?))?;
            Ok(out)
        })
        .collect::<Result<_>>()?;

    for entry in &entries {
        run.add_input(&entry.wav_path);
    }
    for out in outputs {
        run.add_output(out);
    }
    run.add_items(entries.len());
    run.finish(ctx.work())
}

/// Energy-based VAD over stored features.
pub fn stage_vad(ctx: &Ctx, kind: FeatureChoice) -> Result<()> {
    let entries = ctx.data_entries()?;
    let mut run = StageRun::new(
        format!("vad-{}", kind.as_str()),
        ctx.config.seed,
        &ctx.config.frontend,
    );
    let config = ctx.config.frontend.to_core();
    let out_dir = ctx.vad_dir(kind);
    std::fs::create_dir_all(&out_dir)?;

    let feat_dir = ctx.features_dir(kind);
    let outputs: Vec<(PathBuf, PathBuf)> = entries
        .par_iter()
        .map(|entry| -> Result<(PathBuf, PathBuf)> {
            let feat_path = feat_dir.join(format!("{}.ivmx", entry.utt_id));
            let feats = feature_matrix_from_file(&feat_path, kind.to_core())?;
            let mask = compute_vad(&feats, &config);
            let out = out_dir.join(format!("{}.ivmx", entry.utt_id));
            write_vad_mask(&out, &mask)?;
            Ok((feat_path, out))
        })
        .collect::<Result<_>>()?;

    for (input, output) in outputs {
        run.add_input(input);
        run.add_output(output);
    }
    run.add_items(entries.len());
    run.finish(ctx.work())
}

fn voiced_features(
    ctx: &Ctx,
    entry: &DataEntry,
    kind: FeatureChoice,
    mask_kind: FeatureChoice,
) -> Result<FeatureMatrix> {
    let feat_path = ctx.features_dir(kind).join(format!("{}.ivmx", entry.utt_id));
    let mask_path = ctx.vad_dir(mask_kind).join(format!("{}.ivmx", entry.utt_id));
    let feats = feature_matrix_from_file(&feat_path, kind.to_core())?;
    let mask = vad_mask_from_file(&mask_path)?;
    Ok(select_voiced(&feats, &mask)
        .with_context(|| format!("utterance '{}'", entry.utt_id))?)
}

/// Train the UBM for one feature stream on the voiced training frames.
pub fn stage_train_ubm(ctx: &Ctx, kind: FeatureChoice) -> Result<()> {
    let entries = ctx.data_entries()?;
    let train = entries_for(&entries, DataSet::Train);
    if train.is_empty() {
        bail!("no utterances with set=train in the data list");
    }
    let mut run = StageRun::new(
        format!("train-ubm-{}", kind.as_str()),
        ctx.config.seed,
        &ctx.config.ubm,
    );
    let frames: Vec<FeatureMatrix> = train
        .par_iter()
        .map(|e| voiced_features(ctx, e, kind, kind))
        .collect::<Result<_>>()?;

    let config = GmmTrainConfig {
        components: ctx.config.ubm.components,
        iterations: ctx.config.ubm.iterations,
        seed: derive_seed(ctx.config.seed, &format!("ubm-{}", kind.as_str())),
        prune_threshold: ctx.config.ubm.prune_threshold,
        diagonal_covariances: ctx.config.ubm.diagonal_covariances,
        ..Default::default()
    };
    let trained = train_gmm_em(&frames, &config)?;
    log::info!(
        "UBM ({}): avg log-likelihood {:?} -> {:?}",
        kind.as_str(),
        trained.avg_log_likelihood.first(),
        trained.avg_log_likelihood.last()
    );

    let out = ctx.ubm_path(kind);
    atomic_write(&out, |tmp| Ok(records::write_gmm_file(tmp, &trained.model)?))?;
    for e in &train {
        run.add_input(ctx.features_dir(kind).join(format!("{}.ivmx", e.utt_id)));
    }
    run.add_output(out);
    run.add_items(train.len());
    run.finish(ctx.work())
}

/// One M-step on MFCC frames driven by PLP-UBM responsibilities.
pub fn stage_couple_ubm(ctx: &Ctx) -> Result<()> {
    let entries = ctx.data_entries()?;
    let train = entries_for(&entries, DataSet::Train);
    let mut run = StageRun::new("couple-ubm", ctx.config.seed, &ctx.config.ubm);

    let plp_ubm = records::read_gmm_file(&ctx.ubm_path(FeatureChoice::Plp))?;
    // Both streams are cut with the MFCC-side mask so frames stay aligned.
    let mfcc: Vec<FeatureMatrix> = train
        .par_iter()
        .map(|e| voiced_features(ctx, e, FeatureChoice::Mfcc, FeatureChoice::Mfcc))
        .collect::<Result<_>>()?;
    let plp: Vec<FeatureMatrix> = train
        .par_iter()
        .map(|e| voiced_features(ctx, e, FeatureChoice::Plp, FeatureChoice::Mfcc))
        .collect::<Result<_>>()?;

    let coupled = couple_ubm(&plp_ubm, &mfcc, &plp)?;
    let out = ctx.coupled_ubm_path();
    atomic_write(&out, |tmp| Ok(records::write_gmm_file(tmp, &coupled.mfcc_ubm)?))?;
    run.add_input(ctx.ubm_path(FeatureChoice::Plp));
    run.add_output(out);
    run.add_items(train.len());
    run.finish(ctx.work())
}

fn external_posteriors(
    sub: &Subsystem,
    entry: &DataEntry,
    mask: &VadMask,
) -> Result<PosteriorMatrix> {
    let dir = sub
        .external_posteriors_dir
        .as_ref()
        .ok_or_else(|| anyhow!("subsystem '{}' has no external_posteriors_dir", sub.name))?;
    let path = dir.join(format!("{}.ivmx", entry.utt_id));
    let full = read_ivmx_file(&path)?;
    if full.nrows() != mask.decisions.len() {
        bail!(
            "{}: {} posterior rows for {} frames",
            path.display(),
            full.nrows(),
            mask.decisions.len()
        );
    }
    let rows: Vec<usize> = mask
        .decisions
        .iter()
        .enumerate()
        .filter_map(|(i, &keep)| keep.then_some(i))
        .collect();
    let mut data = Array2::zeros((rows.len(), full.ncols()));
    for (out_row, &src) in rows.iter().enumerate() {
        data.row_mut(out_row).assign(&full.row(src));
    }
    let post = PosteriorMatrix { data };
    post.validate()?;
    Ok(post)
}

/// The UBM whose means/covariances parameterize statistics centering and
/// i-vector extraction for this subsystem.
fn stats_ubm(ctx: &Ctx, sub: &Subsystem) -> Result<GmmModel> {
    let path = match sub.posteriors {
        PosteriorSource::Ubm => ctx.ubm_path(sub.features),
        PosteriorSource::Twofeats => ctx.coupled_ubm_path(),
        PosteriorSource::External => ctx.external_ubm_path(&sub.name),
    };
    Ok(records::read_gmm_file(&path)?)
}

/// Baum-Welch statistics for every utterance of every set.
pub fn stage_stats(ctx: &Ctx, sub: &Subsystem) -> Result<()> {
    let entries = ctx.data_entries()?;
    let mut run = StageRun::new(format!("stats-{}", sub.name), ctx.config.seed, sub);
    let prune = ctx.config.ubm.prune_threshold;

    // The external path first estimates a supervised UBM from the training
    // posteriors (one M-step), standing in for the senone network's GMM.
    if sub.posteriors == PosteriorSource::External
        && !ctx.external_ubm_path(&sub.name).exists()
    {
        let train = entries_for(&entries, DataSet::Train);
        let mut posteriors = Vec::new();
        let mut frames = Vec::new();
        for e in &train {
            let mask_path = ctx.vad_dir(sub.features).join(format!("{}.ivmx", e.utt_id));
            let mask = vad_mask_from_file(&mask_path)?;
            posteriors.push(external_posteriors(sub, e, &mask)?);
            frames.push(voiced_features(ctx, e, sub.features, sub.features)?);
        }
        let ubm = estimate_gmm_from_posteriors(&posteriors, &frames)?;
        let path = ctx.external_ubm_path(&sub.name);
        atomic_write(&path, |tmp| Ok(records::write_gmm_file(tmp, &ubm)?))?;
        log::info!("estimated supervised UBM for '{}' from external posteriors", sub.name);
    }

    let dir = ctx.stats_dir(&sub.name);
    std::fs::create_dir_all(&dir)?;

    let ubm = match sub.posteriors {
        PosteriorSource::Ubm => Some(records::read_gmm_file(&ctx.ubm_path(sub.features))?),
        PosteriorSource::External => None,
        PosteriorSource::Twofeats => None,
    };
    let twofeats = if sub.posteriors == PosteriorSource::Twofeats {
        Some((
            records::read_gmm_file(&ctx.ubm_path(FeatureChoice::Plp))?,
            records::read_gmm_file(&ctx.coupled_ubm_path())?,
        ))
    } else {
        None
    };

    let outputs: Vec<PathBuf> = entries
        .par_iter()
        .map(|entry| -> Result<PathBuf> {
            let stats = match sub.posteriors {
                PosteriorSource::Ubm => {
                    let voiced = voiced_features(ctx, entry, sub.features, sub.features)?;
                    let post = gmm_posteriors(ubm.as_ref().unwrap(), &voiced, prune)?;
                    accumulate_stats(&post, &voiced, &entry.utt_id)?
                }
                PosteriorSource::Twofeats => {
                    let (plp_ubm, mfcc_ubm) = twofeats.as_ref().unwrap();
                    let mfcc =
                        voiced_features(ctx, entry, FeatureChoice::Mfcc, FeatureChoice::Mfcc)?;
                    let plp =
                        voiced_features(ctx, entry, FeatureChoice::Plp, FeatureChoice::Mfcc)?;
                    let p_plp = gmm_posteriors(plp_ubm, &plp, prune)?;
                    let p_mfcc = gmm_posteriors(mfcc_ubm, &mfcc, prune)?;
                    let combined = combine_posteriors(&p_plp, &p_mfcc)?;
                    accumulate_stats(&combined, &mfcc, &entry.utt_id)?
                }
                PosteriorSource::External => {
                    let mask_path =
                        ctx.vad_dir(sub.features).join(format!("{}.ivmx", entry.utt_id));
                    let mask = vad_mask_from_file(&mask_path)?;
                    let post = external_posteriors(sub, entry, &mask)?;
                    let voiced = voiced_features(ctx, entry, sub.features, sub.features)?;
                    accumulate_stats(&post, &voiced, &entry.utt_id)?
                }
            };
            let out = dir.join(format!("{}.ivmx", entry.utt_id));
            let matrix = stats_to_matrix(&stats);
            atomic_write(&out, |tmp| Ok(write_ivmx_file(tmp, matrix.view())?))?;
            Ok(out)
        })
        .collect::<Result<_>>()?;

    for out in outputs {
        run.add_output(out);
    }
    run.add_items(entries.len());
    run.finish(ctx.work())
}

fn load_stats(ctx: &Ctx, sub: &Subsystem, entries: &[&DataEntry]) -> Result<Vec<SufficientStats>> {
    entries
        .iter()
        .map(|e| {
            let path = ctx.stats_dir(&sub.name).join(format!("{}.ivmx", e.utt_id));
            Ok(stats_from_matrix(read_ivmx_file(&path)?, &e.utt_id))
        })
        .collect()
}

/// Train the total-variability matrix on the training-set statistics.
pub fn stage_train_tv(ctx: &Ctx, sub: &Subsystem) -> Result<()> {
    let entries = ctx.data_entries()?;
    let train = entries_for(&entries, DataSet::Train);
    let mut run = StageRun::new(format!("train-tv-{}", sub.name), ctx.config.seed, &ctx.config.tv);

    let ubm = stats_ubm(ctx, sub)?;
    let stats = load_stats(ctx, sub, &train)?;
    let trained = train_tv_em(
        &stats,
        &ubm,
        ctx.config.tv.rank,
        ctx.config.tv.iterations,
        derive_seed(ctx.config.seed, &format!("tv-{}", sub.name)),
    )?;
    log::info!(
        "TV ({}): objective {:?} -> {:?}",
        sub.name,
        trained.objective.first(),
        trained.objective.last()
    );
    let out = ctx.tv_path(&sub.name);
    atomic_write(&out, |tmp| Ok(records::write_tv_file(tmp, &trained.model)?))?;
    for e in &train {
        run.add_input(ctx.stats_dir(&sub.name).join(format!("{}.ivmx", e.utt_id)));
    }
    run.add_output(out);
    run.add_items(train.len());
    run.finish(ctx.work())
}

/// Extract i-vectors for every set and attach labels from the data list.
pub fn stage_extract_ivec(ctx: &Ctx, sub: &Subsystem) -> Result<()> {
    let entries = ctx.data_entries()?;
    let mut run =
        StageRun::new(format!("extract-ivec-{}", sub.name), ctx.config.seed, &ctx.config.tv);
    let model = records::read_tv_file(&ctx.tv_path(&sub.name))?;
    run.add_input(ctx.tv_path(&sub.name));

    let mut total = 0;
    for set in DataSet::ALL {
        let set_entries = entries_for(&entries, set);
        if set_entries.is_empty() {
            continue;
        }
        let stats = load_stats(ctx, sub, &set_entries)?;
        let vectors = extract_ivectors(&stats, &model)?;
        let labeled: Vec<IVector> = vectors
            .into_iter()
            .zip(&set_entries)
            .map(|(v, e)| {
                let speaker = (!e.speaker.is_empty()).then(|| e.speaker.clone());
                let partition = (!e.partition.is_empty()).then(|| e.partition.clone());
                v.with_labels(speaker, partition)
            })
            .collect();
        let (ivmx, tsv) = ctx.ivec_paths(&sub.name, set, "");
        write_vector_set(&ivmx, &tsv, &labeled)?;
        run.add_output(ivmx);
        run.add_output(tsv);
        total += set_entries.len();
    }
    run.add_items(total);
    run.finish(ctx.work())
}

fn read_set(ctx: &Ctx, sub: &str, set: DataSet, suffix: &str) -> Result<Vec<IVector>> {
    let (ivmx, tsv) = if suffix.is_empty() {
        ctx.raw_ivec_paths(sub, set)
    } else {
        ctx.ivec_paths(sub, set, suffix)
    };
    Ok(read_ivectors(&ivmx, &tsv)?)
}

fn set_exists(ctx: &Ctx, sub: &str, set: DataSet, suffix: &str) -> bool {
    let (ivmx, _) = if suffix.is_empty() {
        ctx.raw_ivec_paths(sub, set)
    } else {
        ctx.ivec_paths(sub, set, suffix)
    };
    ivmx.exists()
}

fn write_set(ctx: &Ctx, sub: &str, set: DataSet, suffix: &str, vectors: &[IVector]) -> Result<()> {
    let (ivmx, tsv) = ctx.ivec_paths(sub, set, suffix);
    write_vector_set(&ivmx, &tsv, vectors)
}

fn read_lw(path: &Path) -> Result<LwTransform> {
    let m = read_ivmx_file(path)?;
    let r = m.ncols();
    if m.nrows() != r + 1 {
        bail!("{}: LW record must be (R+1) x R", path.display());
    }
    Ok(LwTransform {
        mu: m.row(0).to_owned(),
        w_chol: m.slice(ndarray::s![1.., ..]).to_owned(),
    })
}

fn write_lw(path: &Path, t: &LwTransform) -> Result<()> {
    let r = t.mu.len();
    let mut m = Array2::zeros((r + 1, r));
    m.row_mut(0).assign(&t.mu);
    m.slice_mut(ndarray::s![1.., ..]).assign(&t.w_chol);
    atomic_write(path, |tmp| Ok(write_ivmx_file(tmp, m.view())?))
}

/// Fit the within-class whitening transform on labeled training vectors.
pub fn stage_fit_lw(ctx: &Ctx, sub: &Subsystem) -> Result<()> {
    let mut run = StageRun::new(format!("fit-lw-{}", sub.name), ctx.config.seed, sub);
    let train = read_set(ctx, &sub.name, DataSet::Train, "")?;
    let transform = fit_lw(&train)?;
    let out = ctx.lw_path(&sub.name);
    write_lw(&out, &transform)?;
    let (ivmx, _) = ctx.raw_ivec_paths(&sub.name, DataSet::Train);
    run.add_input(ivmx);
    run.add_output(out);
    run.add_items(train.len());
    run.finish(ctx.work())
}

/// Whiten and length-normalize every set.
pub fn stage_apply_lw(ctx: &Ctx, sub: &Subsystem) -> Result<()> {
    let mut run = StageRun::new(format!("apply-lw-{}", sub.name), ctx.config.seed, sub);
    let transform = read_lw(&ctx.lw_path(&sub.name))?;
    run.add_input(ctx.lw_path(&sub.name));
    let mut total = 0;
    for set in DataSet::ALL {
        if !set_exists(ctx, &sub.name, set, "") {
            continue;
        }
        let vectors = read_set(ctx, &sub.name, set, "")?;
        let mapped: Vec<IVector> = vectors
            .iter()
            .map(|v| apply_lw(v, &transform))
            .collect::<ivkit_core::Result<_>>()?;
        write_set(ctx, &sub.name, set, "-lw", &mapped)?;
        total += mapped.len();
    }
    run.add_items(total);
    run.finish(ctx.work())
}

// IDVC storage: a (1 + K) x R matrix, center in row 0 and one removed
// direction per following row.
fn read_idvc(path: &Path) -> Result<IdvcModel> {
    let m = read_ivmx_file(path)?;
    if m.nrows() == 0 {
        bail!("{}: empty IDVC record", path.display());
    }
    let r = m.ncols();
    let k = m.nrows() - 1;
    let mut basis = Array2::zeros((r, k));
    for col in 0..k {
        basis.column_mut(col).assign(&m.row(1 + col));
    }
    Ok(IdvcModel {
        center: m.row(0).to_owned(),
        basis,
    })
}

fn write_idvc(path: &Path, m: &IdvcModel) -> Result<()> {
    let r = m.center.len();
    let k = m.rank();
    let mut out = Array2::zeros((1 + k, r));
    out.row_mut(0).assign(&m.center);
    for col in 0..k {
        out.row_mut(1 + col).assign(&m.basis.column(col));
    }
    atomic_write(path, |tmp| Ok(write_ivmx_file(tmp, out.view())?))
}

/// Group vectors for IDVC: the partition key when present, the set name
/// otherwise, so an unlabeled dev set still forms its own subset.
fn idvc_subsets(
    train: &[IVector],
    dev: &[IVector],
) -> BTreeMap<String, Vec<IVector>> {
    let mut subsets: BTreeMap<String, Vec<IVector>> = BTreeMap::new();
    for (default_key, vectors) in [("train", train), ("dev", dev)] {
        for v in vectors {
            let key = v
                .partition
                .clone()
                .filter(|p| !p.is_empty())
                .unwrap_or_else(|| default_key.to_string());
            subsets.entry(key).or_default().push(v.clone());
        }
    }
    subsets
}

/// Fit the inter-dataset subspace on LW-normalized train + dev subsets.
pub fn stage_fit_idvc(ctx: &Ctx, sub: &Subsystem) -> Result<()> {
    let mut run = StageRun::new(format!("fit-idvc-{}", sub.name), ctx.config.seed, sub);
    let train = read_set(ctx, &sub.name, DataSet::Train, "-lw")?;
    let dev = if set_exists(ctx, &sub.name, DataSet::Dev, "-lw") {
        read_set(ctx, &sub.name, DataSet::Dev, "-lw")?
    } else {
        Vec::new()
    };
    let subsets = idvc_subsets(&train, &dev);
    let config = IdvcConfig {
        center_means: ctx.config.shift.idvc_center_means,
        max_rank: ctx.config.shift.idvc_max_rank,
        ..Default::default()
    };
    let model = fit_idvc(&subsets, &config)?;
    log::info!(
        "IDVC ({}): {} subsets, removed rank {}",
        sub.name,
        subsets.len(),
        model.rank()
    );
    let out = ctx.idvc_path(&sub.name);
    write_idvc(&out, &model)?;
    run.add_output(out);
    run.add_items(train.len() + dev.len());
    run.finish(ctx.work())
}

/// Project out the IDVC subspace and re-length-normalize.
pub fn stage_apply_idvc(ctx: &Ctx, sub: &Subsystem) -> Result<()> {
    let mut run = StageRun::new(format!("apply-idvc-{}", sub.name), ctx.config.seed, sub);
    let model = read_idvc(&ctx.idvc_path(&sub.name))?;
    run.add_input(ctx.idvc_path(&sub.name));
    let mut total = 0;
    for set in [DataSet::Train, DataSet::Enroll, DataSet::Test] {
        let vectors = read_set(ctx, &sub.name, set, "-lw")?;
        let mapped: Vec<IVector> = vectors
            .iter()
            .map(|v| length_normalize(&apply_idvc(v, &model)?))
            .collect::<ivkit_core::Result<_>>()?;
        write_set(ctx, &sub.name, set, "-shifted", &mapped)?;
        total += mapped.len();
    }
    run.add_items(total);
    run.finish(ctx.work())
}

/// Fit the development-set mean and subtract it from test vectors.
pub fn stage_mean_shift(ctx: &Ctx, sub: &Subsystem) -> Result<()> {
    let mut run = StageRun::new(format!("mean-shift-{}", sub.name), ctx.config.seed, sub);
    let dev = read_set(ctx, &sub.name, DataSet::Dev, "-lw")?;
    let model = fit_mean_shift(&dev)?;
    let out = ctx.mean_shift_path(&sub.name);
    let delta = model
        .delta
        .clone()
        .into_shape_with_order((1, model.delta.len()))
        .expect("delta reshape");
    atomic_write(&out, |tmp| Ok(write_ivmx_file(tmp, delta.view())?))?;
    run.add_output(out);

    let shift_enroll = ctx.config.shift.shift_enroll;
    let mut total = dev.len();
    for set in [DataSet::Train, DataSet::Enroll, DataSet::Test] {
        let side = match set {
            DataSet::Test => TrialSide::Test,
            DataSet::Enroll if shift_enroll => TrialSide::Test,
            _ => TrialSide::Enroll,
        };
        let vectors = read_set(ctx, &sub.name, set, "-lw")?;
        let mapped: Vec<IVector> = vectors
            .iter()
            .map(|v| length_normalize(&apply_mean_shift(v, &model, side)?))
            .collect::<ivkit_core::Result<_>>()?;
        write_set(ctx, &sub.name, set, "-shifted", &mapped)?;
        total += mapped.len();
    }
    run.add_items(total);
    run.finish(ctx.work())
}

/// No compensation: pass the LW-normalized vectors through.
pub fn stage_no_shift(ctx: &Ctx, sub: &Subsystem) -> Result<()> {
    let mut run = StageRun::new(format!("no-shift-{}", sub.name), ctx.config.seed, sub);
    let mut total = 0;
    for set in [DataSet::Train, DataSet::Enroll, DataSet::Test] {
        let vectors = read_set(ctx, &sub.name, set, "-lw")?;
        write_set(ctx, &sub.name, set, "-shifted", &vectors)?;
        total += vectors.len();
    }
    run.add_items(total);
    run.finish(ctx.work())
}

/// PLDA learning on the compensated training vectors.
pub fn stage_train_plda(ctx: &Ctx, sub: &Subsystem) -> Result<()> {
    let mut run =
        StageRun::new(format!("train-plda-{}", sub.name), ctx.config.seed, &ctx.config.plda);
    let train = read_set(ctx, &sub.name, DataSet::Train, "-shifted")?;
    let model = train_plda(&train, ctx.config.plda.iterations)?;
    let out = ctx.plda_raw_path(&sub.name);
    atomic_write(&out, |tmp| Ok(records::write_plda_file(tmp, &model)?))?;
    let (ivmx, _) = ctx.ivec_paths(&sub.name, DataSet::Train, "-shifted");
    run.add_input(ivmx);
    run.add_output(out);
    run.add_items(train.len());
    run.finish(ctx.work())
}

/// Diagonalizing post-normalization: fit the transform, optionally truncate
/// the eigenvoice rank, and map enrollment/test vectors into the diagonal
/// space.
pub fn stage_postnorm(ctx: &Ctx, sub: &Subsystem) -> Result<()> {
    let mut run =
        StageRun::new(format!("postnorm-{}", sub.name), ctx.config.seed, &ctx.config.plda);
    let model = records::read_plda_file(&ctx.plda_raw_path(&sub.name))?;
    run.add_input(ctx.plda_raw_path(&sub.name));

    let mut transform = postnorm_fit(&model)?;
    let requested = ctx.config.plda.eigenvoice_rank;
    if requested > 0 {
        transform = truncate_eigenvoices(&transform, requested)
            .with_context(|| format!("subsystem '{}'", sub.name))?;
    }
    let out = ctx.plda_postnorm_path(&sub.name);
    atomic_write(&out, |tmp| {
        Ok(records::write_postnorm_file(tmp, &transform, &model.m_all)?)
    })?;
    run.add_output(out);

    let mut total = 0;
    for set in [DataSet::Enroll, DataSet::Test] {
        let vectors = read_set(ctx, &sub.name, set, "-shifted")?;
        let mapped: Vec<IVector> = vectors
            .iter()
            .map(|v| postnorm_apply(v, &transform, &model.m_all))
            .collect::<ivkit_core::Result<_>>()?;
        write_set(ctx, &sub.name, set, "-post", &mapped)?;
        total += mapped.len();
    }
    run.add_items(total);
    run.finish(ctx.work())
}

/// Score every trial in the key file against the post-normalized vectors.
pub fn stage_score(ctx: &Ctx, sub: &Subsystem) -> Result<()> {
    let mut run = StageRun::new(format!("score-{}", sub.name), ctx.config.seed, sub);
    let keys = read_trial_keys(&ctx.trial_key_path())?;
    run.add_input(ctx.trial_key_path());
    run.add_input(ctx.plda_postnorm_path(&sub.name));
    let (transform, _m_all) = records::read_postnorm_file(&ctx.plda_postnorm_path(&sub.name))?;

    let enroll = read_set(ctx, &sub.name, DataSet::Enroll, "-post")?;
    let test = read_set(ctx, &sub.name, DataSet::Test, "-post")?;

    let mut models: BTreeMap<&str, Vec<&IVector>> = BTreeMap::new();
    for v in &enroll {
        if let Some(speaker) = v.speaker.as_deref() {
            models.entry(speaker).or_default().push(v);
        }
    }
    let mut tests: BTreeMap<&str, &IVector> = BTreeMap::new();
    for v in &test {
        tests.insert(v.utterance_id.as_str(), v);
    }

    let scored: Vec<(String, String, f64)> = keys
        .par_iter()
        .map(|k| -> Result<(String, String, f64)> {
            let sessions = models.get(k.enroll_id.as_str()).ok_or_else(|| {
                anyhow!("trial references unknown enrollment speaker '{}'", k.enroll_id)
            })?;
            let test_vec = tests.get(k.test_id.as_str()).ok_or_else(|| {
                anyhow!("trial references unknown test utterance '{}'", k.test_id)
            })?;
            let trial = Trial {
                enroll: sessions.iter().map(|v| (*v).clone()).collect(),
                test: (*test_vec).clone(),
                label: k.label,
            };
            let score = score_trial(&trial, &transform)?;
            Ok((k.enroll_id.clone(), k.test_id.clone(), score))
        })
        .collect::<Result<_>>()?;

    let out = ctx.scores_path(&sub.name);
    atomic_write(&out, |tmp| Ok(write_scores(tmp, &scored)?))?;
    run.add_output(out);
    run.add_items(keys.len());
    run.finish(ctx.work())
}

fn load_score_set(ctx: &Ctx, scores_path: &Path) -> Result<ScoreSet> {
    let keys = read_trial_keys(&ctx.trial_key_path())?;
    let scores = read_scores(scores_path)?;
    Ok(join_scores_with_keys(&scores, &keys)?)
}

/// Mean-fuse the configured member systems' score files.
pub fn stage_fuse(ctx: &Ctx) -> Result<()> {
    let members = &ctx.config.fusion.members;
    if members.is_empty() {
        bail!("config lists no fusion members");
    }
    let mut run = StageRun::new("fuse", ctx.config.seed, &ctx.config.fusion);
    let mut sets = Vec::new();
    for member in members {
        let path = ctx.scores_path(member);
        run.add_input(&path);
        sets.push(load_score_set(ctx, &path)?);
    }
    let fused = fuse_scores(&sets)?;
    let lines: Vec<(String, String, f64)> = fused
        .trials()
        .iter()
        .map(|t| (t.enroll_id.clone(), t.test_id.clone(), t.score))
        .collect();
    let out = ctx.fused_scores_path();
    atomic_write(&out, |tmp| Ok(write_scores(tmp, &lines)?))?;
    run.add_output(out);
    run.add_items(lines.len());
    run.finish(ctx.work())
}

/// Compute metrics for one score file and write text + JSON reports.
pub fn stage_evaluate(ctx: &Ctx, name: &str, scores_path: &Path) -> Result<MetricReport> {
    let mut run = StageRun::new(format!("evaluate-{name}"), ctx.config.seed, name);
    run.add_input(scores_path);
    let set = load_score_set(ctx, scores_path)?;
    let rep = report(&set)?;

    let text = render_report(name, scores_path, &set, &rep);
    let dir = ctx.work().join("reports");
    let txt_path = dir.join(format!("{name}.report.txt"));
    atomic_write(&txt_path, |tmp| {
        std::fs::write(tmp, &text)?;
        Ok(())
    })?;
    let json_path = dir.join(format!("{name}.report.json"));
    let json = report_to_json(name, &rep);
    atomic_write(&json_path, |tmp| {
        std::fs::write(tmp, serde_json::to_string_pretty(&json)?)?;
        Ok(())
    })?;
    run.add_output(txt_path);
    run.add_output(json_path);
    run.add_items(set.len());
    run.finish(ctx.work())?;
    print!("{text}");
    Ok(rep)
}

fn render_report(
    name: &str,
    scores_path: &Path,
    set: &ScoreSet,
    rep: &MetricReport,
) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let targets = set
        .trials()
        .iter()
        .filter(|t| t.label == TrialLabel::Target)
        .count();
    let nontargets = set
        .trials()
        .iter()
        .filter(|t| t.label == TrialLabel::NonTarget)
        .count();
    writeln!(out, "# evaluation report: {name}").unwrap();
    writeln!(out, "# EER convention: linear interpolation between ROC operating points").unwrap();
    writeln!(out, "# minC_primary: mean of min normalized costs at P_target 0.01 and 0.005").unwrap();
    writeln!(out, "scores: {}", scores_path.display()).unwrap();
    writeln!(out, "trials: {} ({targets} target / {nontargets} nontarget)", set.len()).unwrap();
    writeln!(
        out,
        "overall: EER {:.2}%  minC_primary {:.3}",
        100.0 * rep.eer,
        rep.min_c_primary
    )
    .unwrap();
    if let Some((eer, minc)) = rep.equalized {
        writeln!(
            out,
            "equalized (partition mean): EER {:.2}%  minC_primary {:.3}",
            100.0 * eer,
            minc
        )
        .unwrap();
    }
    for (key, p) in &rep.partitions {
        writeln!(
            out,
            "partition {key}: EER {:.2}%  minC_primary {:.3}  ({} target / {} nontarget)",
            100.0 * p.eer,
            p.min_c_primary,
            p.targets,
            p.nontargets
        )
        .unwrap();
    }
    out
}

fn report_to_json(name: &str, rep: &MetricReport) -> serde_json::Value {
    let partitions: serde_json::Map<String, serde_json::Value> = rep
        .partitions
        .iter()
        .map(|(k, p)| {
            (
                k.clone(),
                serde_json::json!({
                    "eer": p.eer,
                    "min_c_primary": p.min_c_primary,
                    "targets": p.targets,
                    "nontargets": p.nontargets,
                }),
            )
        })
        .collect();
    serde_json::json!({
        "system": name,
        "eer": rep.eer,
        "min_c_primary": rep.min_c_primary,
        "equalized": rep.equalized.map(|(eer, minc)| serde_json::json!({
            "eer": eer,
            "min_c_primary": minc,
        })),
        "partitions": partitions,
    })
}

/// Run the shifting stage matching the subsystem's configured method.
pub fn run_shift_stages(ctx: &Ctx, sub: &Subsystem) -> Result<()> {
    match sub.shifting {
        ShiftMethod::Idvc => {
            stage_fit_idvc(ctx, sub)?;
            stage_apply_idvc(ctx, sub)
        }
        ShiftMethod::Mean => stage_mean_shift(ctx, sub),
        ShiftMethod::None => stage_no_shift(ctx, sub),
    }
}

/// Execute every stage for every subsystem, fuse if configured, and return
/// the per-system metric reports (the fusion appears under "fusion").
pub fn run_pipeline(ctx: &Ctx) -> Result<BTreeMap<String, MetricReport>> {
    if ctx.is_synthetic() {
        stage_synth(ctx)?;
    } else {
        for kind in ctx.config.required_features() {
            stage_extract_features(ctx, kind)?;
            stage_vad(ctx, kind)?;
        }
        let mut ubm_kinds: Vec<FeatureChoice> = Vec::new();
        let mut need_coupling = false;
        for sub in &ctx.config.subsystems {
            match sub.posteriors {
                PosteriorSource::Ubm | PosteriorSource::External => {
                    if !ubm_kinds.contains(&sub.features) {
                        ubm_kinds.push(sub.features);
                    }
                }
                PosteriorSource::Twofeats => {
                    need_coupling = true;
                    if !ubm_kinds.contains(&FeatureChoice::Plp) {
                        ubm_kinds.push(FeatureChoice::Plp);
                    }
                }
            }
        }
        for kind in ubm_kinds {
            stage_train_ubm(ctx, kind)?;
        }
        if need_coupling {
            stage_couple_ubm(ctx)?;
        }
    }

    let mut reports = BTreeMap::new();
    for sub in &ctx.config.subsystems {
        if !ctx.is_synthetic() {
            stage_stats(ctx, sub)?;
            stage_train_tv(ctx, sub)?;
            stage_extract_ivec(ctx, sub)?;
        }
        stage_fit_lw(ctx, sub)?;
        stage_apply_lw(ctx, sub)?;
        run_shift_stages(ctx, sub)?;
        stage_train_plda(ctx, sub)?;
        stage_postnorm(ctx, sub)?;
        stage_score(ctx, sub)?;
        let rep = stage_evaluate(ctx, &sub.name, &ctx.scores_path(&sub.name))?;
        reports.insert(sub.name.clone(), rep);
    }

    if !ctx.config.fusion.members.is_empty() {
        stage_fuse(ctx)?;
        let rep = stage_evaluate(ctx, "fusion", &ctx.fused_scores_path())?;
        reports.insert("fusion".to_string(), rep);
    }
    Ok(reports)
}
