//! Pipeline configuration: a versioned TOML file with one section per
//! stage plus a list of sub-systems.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Worker threads for per-utterance stages; 0 means all cores.
    #[serde(default)]
    pub workers: usize,
    pub paths: Paths,
    #[serde(default)]
    pub frontend: FrontendSection,
    #[serde(default)]
    pub ubm: UbmSection,
    #[serde(default)]
    pub tv: TvSection,
    #[serde(default)]
    pub plda: PldaSection,
    #[serde(default)]
    pub shift: ShiftSection,
    #[serde(default)]
    pub synth: Option<SynthSection>,
    #[serde(rename = "subsystem")]
    pub subsystems: Vec<Subsystem>,
    #[serde(default)]
    pub fusion: FusionSection,
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub work_dir: PathBuf,
    /// Utterance table for audio sources: utt_id, wav_path, speaker,
    /// partition, set (train|enroll|test|dev). Unused in synthetic mode.
    #[serde(default)]
    pub data_list: Option<PathBuf>,
    /// Trial key file; generated by the synth stage in synthetic mode.
    #[serde(default)]
    pub trial_key: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontendSection {
    pub num_ceps: usize,
    pub mel_filters: usize,
    pub mel_low_hz: f64,
    pub mel_high_hz: f64,
    pub bark_filters: usize,
    pub lpc_order: usize,
    pub pre_emphasis: f64,
    pub cmn_window_s: f64,
    pub vad_offset_std: f64,
}

impl Default for FrontendSection {
    fn default() -> Self {
        let d = ivkit_core::frontend::FrontendConfig::default();
        Self {
            num_ceps: d.num_ceps,
            mel_filters: d.mel_filters,
            mel_low_hz: d.mel_low_hz,
            mel_high_hz: d.mel_high_hz,
            bark_filters: d.bark_filters,
            lpc_order: d.lpc_order,
            pre_emphasis: d.pre_emphasis,
            cmn_window_s: d.cmn_window_s,
            vad_offset_std: d.vad_offset_std,
        }
    }
}

impl FrontendSection {
    pub fn to_core(&self) -> ivkit_core::frontend::FrontendConfig {
        ivkit_core::frontend::FrontendConfig {
            num_ceps: self.num_ceps,
            mel_filters: self.mel_filters,
            mel_low_hz: self.mel_low_hz,
            mel_high_hz: self.mel_high_hz,
            bark_filters: self.bark_filters,
            lpc_order: self.lpc_order,
            pre_emphasis: self.pre_emphasis,
            cmn_window_s: self.cmn_window_s,
            vad_offset_std: self.vad_offset_std,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct UbmSection {
    pub components: usize,
    pub iterations: usize,
    pub prune_threshold: f64,
    pub diagonal_covariances: bool,
}

impl Default for UbmSection {
    fn default() -> Self {
        Self {
            components: 64,
            iterations: 8,
            prune_threshold: 1e-8,
            diagonal_covariances: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct TvSection {
    pub rank: usize,
    pub iterations: usize,
}

impl Default for TvSection {
    fn default() -> Self {
        Self { rank: 50, iterations: 5 }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct PldaSection {
    pub iterations: usize,
    /// 0 keeps the full eigenvoice rank.
    pub eigenvoice_rank: usize,
}

impl Default for PldaSection {
    fn default() -> Self {
        Self { iterations: 10, eigenvoice_rank: 0 }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSection {
    /// Cap on retained IDVC directions; 0 means the numerical rank.
    pub idvc_max_rank: usize,
    /// Center subset means before the IDVC SVD.
    pub idvc_center_means: bool,
    /// Also shift enrollment vectors when mean-shifting (off by default).
    pub shift_enroll: bool,
}

impl Default for ShiftSection {
    fn default() -> Self {
        Self {
            idvc_max_rank: 0,
            idvc_center_means: true,
            shift_enroll: false,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub dim: usize,
    pub train_speakers: usize,
    pub train_sessions: usize,
    pub eval_speakers: usize,
    pub enroll_sessions: usize,
    pub test_sessions: usize,
    pub dev_vectors: usize,
    /// Diagonal variances; a single value is broadcast to `dim`.
    pub b_diag: Vec<f64>,
    pub w_diag: Vec<f64>,
    /// Magnitude of the dataset shift injected into test and dev vectors
    /// (0 disables it).
    #[serde(default)]
    pub shift_magnitude: f64,
}

impl SynthSection {
    pub fn diag(&self, values: &[f64]) -> Result<Vec<f64>> {
        match values.len() {
            1 => Ok(vec![values[0]; self.dim]),
            n if n == self.dim => Ok(values.to_vec()),
            n => bail!("diagonal has {n} entries, expected 1 or {}", self.dim),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureChoice {
    Mfcc,
    Plp,
}

impl FeatureChoice {
    pub fn to_core(self) -> ivkit_core::frontend::FeatureKind {
        match self {
            FeatureChoice::Mfcc => ivkit_core::frontend::FeatureKind::Mfcc,
            FeatureChoice::Plp => ivkit_core::frontend::FeatureKind::Plp,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FeatureChoice::Mfcc => "mfcc",
            FeatureChoice::Plp => "plp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PosteriorSource {
    /// Single UBM on the subsystem's feature stream.
    Ubm,
    /// PLP-UBM posteriors combined with the coupled MFCC-UBM posteriors.
    Twofeats,
    /// Externally supplied per-utterance posterior matrices.
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ShiftMethod {
    Idvc,
    Mean,
    None,
}

impl ShiftMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ShiftMethod::Idvc => "idvc",
            ShiftMethod::Mean => "mean",
            ShiftMethod::None => "none",
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct Subsystem {
    pub name: String,
    #[serde(default = "default_features")]
    pub features: FeatureChoice,
    #[serde(default = "default_posteriors")]
    pub posteriors: PosteriorSource,
    pub shifting: ShiftMethod,
    /// Directory of per-utterance posterior IVMX files (external source).
    #[serde(default)]
    pub external_posteriors_dir: Option<PathBuf>,
}

fn default_features() -> FeatureChoice {
    FeatureChoice::Mfcc
}

fn default_posteriors() -> PosteriorSource {
    PosteriorSource::Ubm
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub members: Vec<String>,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: PipelineConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(
                "config schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            );
        }
        if self.subsystems.is_empty() {
            bail!("config defines no [[subsystem]] entries");
        }
        let mut names = std::collections::HashSet::new();
        for sub in &self.subsystems {
            if !names.insert(sub.name.as_str()) {
                bail!("duplicate subsystem name '{}'", sub.name);
            }
            if sub.posteriors == PosteriorSource::External
                && sub.external_posteriors_dir.is_none()
            {
                bail!(
                    "subsystem '{}' uses external posteriors but sets no external_posteriors_dir",
                    sub.name
                );
            }
        }
        for member in &self.fusion.members {
            if !self.subsystems.iter().any(|s| &s.name == member) {
                bail!("fusion member '{member}' is not a configured subsystem");
            }
        }
        if self.synth.is_none() && self.paths.data_list.is_none() {
            bail!("config needs either a [synth] section or paths.data_list");
        }
        if let Some(synth) = &self.synth {
            synth.diag(&synth.b_diag)?;
            synth.diag(&synth.w_diag)?;
            if synth.enroll_sessions == 0 || synth.test_sessions == 0 {
                bail!("synthetic evaluation needs enroll_sessions and test_sessions >= 1");
            }
        }
        Ok(())
    }

    pub fn subsystem(&self, name: &str) -> Result<&Subsystem> {
        self.subsystems
            .iter()
            .find(|s| s.name == name)
            .with_context(|| format!("unknown subsystem '{name}'"))
    }

    /// Feature kinds any configured subsystem needs.
    pub fn required_features(&self) -> Vec<FeatureChoice> {
        let mut kinds = Vec::new();
        for sub in &self.subsystems {
            let mut need = vec![sub.features];
            if sub.posteriors == PosteriorSource::Twofeats {
                need = vec![FeatureChoice::Mfcc, FeatureChoice::Plp];
            }
            for k in need {
                if !kinds.contains(&k) {
                    kinds.push(k);
                }
            }
        }
        kinds
    }
}

/// One row of the audio data list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataEntry {
    pub utt_id: String,
    pub wav_path: PathBuf,
    pub speaker: String,
    pub partition: String,
    pub set: DataSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DataSet {
    Train,
    Enroll,
    Test,
    Dev,
}

impl DataSet {
    pub const ALL: [DataSet; 4] = [DataSet::Train, DataSet::Enroll, DataSet::Test, DataSet::Dev];

    pub fn as_str(self) -> &'static str {
        match self {
            DataSet::Train => "train",
            DataSet::Enroll => "enroll",
            DataSet::Test => "test",
            DataSet::Dev => "dev",
        }
    }
}

impl std::str::FromStr for DataSet {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(DataSet::Train),
            "enroll" => Ok(DataSet::Enroll),
            "test" => Ok(DataSet::Test),
            "dev" => Ok(DataSet::Dev),
            other => bail!("unknown data set '{other}' (expected train|enroll|test|dev)"),
        }
    }
}

/// Parse the TSV data list: utt_id, wav_path, speaker, partition, set.
pub fn read_data_list(path: &Path) -> Result<Vec<DataEntry>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read data list {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            bail!(
                "{}:{}: expected utt_id, wav_path, speaker, partition, set",
                path.display(),
                i + 1
            );
        }
        if !seen.insert(fields[0].to_string()) {
            bail!("{}:{}: duplicate utterance id '{}'", path.display(), i + 1, fields[0]);
        }
        let wav = Path::new(fields[1]);
        let wav_path = if wav.is_absolute() { wav.to_path_buf() } else { base.join(wav) };
        entries.push(DataEntry {
            utt_id: fields[0].to_string(),
            wav_path,
            speaker: fields[2].to_string(),
            partition: fields[3].to_string(),
            set: fields[4].parse()?,
        });
    }
    if entries.is_empty() {
        bail!("data list {} is empty", path.display());
    }
    Ok(entries)
}

/// Vectors grouped per data set, in list order.
pub fn entries_for(entries: &[DataEntry], set: DataSet) -> Vec<&DataEntry> {
    entries.iter().filter(|e| e.set == set).collect()
}

#[allow(dead_code)]
pub fn partition_map(entries: &[DataEntry]) -> BTreeMap<String, Vec<&DataEntry>> {
    let mut map: BTreeMap<String, Vec<&DataEntry>> = BTreeMap::new();
    for e in entries {
        map.entry(e.partition.clone()).or_default().push(e);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
seed = 7

[paths]
work_dir = "runs/demo"

[synth]
dim = 4
train_speakers = 10
train_sessions = 4
eval_speakers = 5
enroll_sessions = 2
test_sessions = 3
dev_vectors = 20
b_diag = [2.0]
w_diag = [0.5]

[[subsystem]]
name = "sys1"
shifting = "idvc"

[[subsystem]]
name = "sys2"
shifting = "mean"

[fusion]
members = ["sys1", "sys2"]
"#;

    #[test]
    fn minimal_config_parses() {
        let config: PipelineConfig = toml::from_str(MINIMAL).unwrap();
        config.validate().unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.subsystems.len(), 2);
        assert_eq!(config.subsystems[0].features, FeatureChoice::Mfcc);
        assert_eq!(config.subsystems[1].shifting, ShiftMethod::Mean);
        assert_eq!(config.ubm.components, 64);
        let synth = config.synth.as_ref().unwrap();
        assert_eq!(synth.diag(&synth.b_diag).unwrap(), vec![2.0; 4]);
    }

    #[test]
    fn unknown_fusion_member_rejected() {
        let text = MINIMAL.replace("members = [\"sys1\", \"sys2\"]", "members = [\"nope\"]");
        let config: PipelineConfig = toml::from_str(&text).unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn wrong_schema_version_rejected() {
        let text = MINIMAL.replace("schema_version = 1", "schema_version = 2");
        let config: PipelineConfig = toml::from_str(&text).unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn duplicate_subsystem_names_rejected() {
        let text = MINIMAL.replace("name = \"sys2\"", "name = \"sys1\"");
        let config: PipelineConfig = toml::from_str(&text).unwrap();
        assert!(config.validate().is_err());
    }

    #[test]
    fn data_list_parses_and_checks() {
        let dir = tempfile::tempdir().unwrap();
        let list = dir.path().join("data.tsv");
        std::fs::write(
            &list,
            "u1\taudio/u1.wav\tspk1\tcmn\ttrain\nu2\t/abs/u2.wav\tspk2\t\ttest\n",
        )
        .unwrap();
        let entries = read_data_list(&list).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].wav_path, dir.path().join("audio/u1.wav"));
        assert_eq!(entries[1].wav_path, PathBuf::from("/abs/u2.wav"));
        assert_eq!(entries[1].set, DataSet::Test);

        std::fs::write(&list, "u1\ta.wav\ts\t\tbogus\n").unwrap();
        assert!(read_data_list(&list).is_err());
    }
}
