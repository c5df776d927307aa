//! Experiment configuration, read from TOML and overridable from the command line.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::PixelStats;
use crate::distill::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::parse_widths;
use crate::reconstruct::ReconstructConfig;
use crate::spectral::SpectralMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordKind {
    Top,
    All,
    AllDropout,
    SpectralAll,
    SpectralPairs,
}

impl RecordKind {
    pub const ALL: [RecordKind; 5] = [
        RecordKind::Top,
        RecordKind::All,
        RecordKind::AllDropout,
        RecordKind::SpectralAll,
        RecordKind::SpectralPairs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RecordKind::Top => "top",
            RecordKind::All => "all",
            RecordKind::AllDropout => "all+dropout",
            RecordKind::SpectralAll => "spectral-all",
            RecordKind::SpectralPairs => "spectral-pairs",
        }
    }

    /// File-name safe form.
    pub fn stem(self) -> &'static str {
        match self {
            RecordKind::AllDropout => "all-dropout",
            other => other.as_str(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            RecordKind::Top => "Top Layer Statistics",
            RecordKind::All => "All Layers Statistics",
            RecordKind::AllDropout => "All Layers Statistics + Dropout",
            RecordKind::SpectralAll => "All-Layers Spectral",
            RecordKind::SpectralPairs => "Layer-Pairs Spectral",
        }
    }

    pub fn spectral_mode(self) -> Option<SpectralMode> {
        match self {
            RecordKind::SpectralAll => Some(SpectralMode::AllLayers),
            RecordKind::SpectralPairs => Some(SpectralMode::LayerPairs),
            _ => None,
        }
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecordKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RecordKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s || k.stem() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown record kind `{s}` (expected top, all, all+dropout, spectral-all or spectral-pairs)"
                ))
            })
    }
}

impl Serialize for RecordKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for RecordKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
}

fn default_classes() -> usize {
    10
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NetConfig {
    pub widths: String,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout: f64,
    /// Use this checkpoint instead of training (teacher only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

/// A `[teacher]` or `[student]` table; absent keys take the role's defaults.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialNet {
    widths: Option<String>,
    epochs: Option<usize>,
    learning_rate: Option<f64>,
    batch_size: Option<usize>,
    dropout: Option<f64>,
    checkpoint: Option<PathBuf>,
}

impl PartialNet {
    fn over(self, d: NetConfig) -> NetConfig {
        NetConfig {
            widths: self.widths.unwrap_or(d.widths),
            epochs: self.epochs.unwrap_or(d.epochs),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            dropout: self.dropout.unwrap_or(d.dropout),
            checkpoint: self.checkpoint.or(d.checkpoint),
        }
    }
}

impl NetConfig {
    fn teacher() -> Self {
        let t = TrainConfig::teacher();
        Self {
            widths: "784-1200-1200-10".into(),
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            dropout: t.dropout,
            checkpoint: None,
        }
    }

    fn student() -> Self {
        Self {
            widths: "784-800-800-10".into(),
            dropout: 0.0,
            ..Self::teacher()
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            temperature: 1.0,
            dropout: self.dropout,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct TeacherConfig(pub NetConfig);

impl<'de> Deserialize<'de> for TeacherConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Self(PartialNet::deserialize(d)?.over(NetConfig::teacher())))
    }
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self(NetConfig::teacher())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct StudentConfig(pub NetConfig);

impl<'de> Deserialize<'de> for StudentConfig {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Ok(Self(PartialNet::deserialize(d)?.over(NetConfig::student())))
    }
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self(NetConfig::student())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub epochs: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        let d = TrainConfig::distillation();
        Self {
            epochs: d.epochs,
            temperature: d.temperature,
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
        }
    }
}

impl DistillConfig {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            temperature: self.temperature,
            dropout: 0.0,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecordConfig {
    /// Kinds processed by `pipeline`; single-stage commands take `--record-kind`.
    pub kinds: Vec<RecordKind>,
    pub temperature: f64,
    pub retain_fraction: f64,
    pub exemplars_per_class: usize,
    pub dropout_rate: f64,
}

impl Default for RecordConfig {
    fn default() -> Self {
        Self {
            kinds: RecordKind::ALL.to_vec(),
            temperature: 8.0,
            retain_fraction: 0.1,
            exemplars_per_class: 1000,
            dropout_rate: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructSection {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub per_class: usize,
    pub init_mean: f64,
    pub init_std: f64,
}

impl Default for ReconstructSection {
    fn default() -> Self {
        let r = ReconstructConfig::default();
        Self {
            steps: r.steps,
            batch: r.batch,
            learning_rate: r.learning_rate,
            per_class: 1000,
            init_mean: r.init.mean,
            init_std: r.init.std,
        }
    }
}

impl ReconstructSection {
    pub fn job(&self, seed: u64) -> ReconstructConfig {
        ReconstructConfig {
            steps: self.steps,
            batch: self.batch,
            learning_rate: self.learning_rate,
            init: PixelStats {
                mean: self.init_mean,
                std: self.init_std,
            },
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub student: StudentConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    #[serde(default)]
    pub record: RecordConfig,
    #[serde(default)]
    pub reconstruct: ReconstructSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

/// Command-line overrides; `None` keeps the file's value.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub record_kind: Option<RecordKind>,
    pub retain_fraction: Option<f64>,
    pub temperature: Option<f64>,
    pub steps: Option<usize>,
    pub per_class: Option<usize>,
}

impl ExperimentConfig {
    /// Parses TOML; relative data and checkpoint paths resolve against `base_dir`.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        };
        resolve(&mut cfg.data.train_images);
        resolve(&mut cfg.data.train_labels);
        resolve(&mut cfg.data.test_images);
        resolve(&mut cfg.data.test_labels);
        resolve(&mut cfg.out_dir);
        if let Some(p) = cfg.teacher.0.checkpoint.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = o.record_kind {
            self.record.kinds = vec![v];
        }
        if let Some(v) = o.retain_fraction {
            self.record.retain_fraction = v;
        }
        if let Some(v) = o.temperature {
            self.record.temperature = v;
            self.distill.temperature = v;
        }
        if let Some(v) = o.steps {
            self.reconstruct.steps = v;
        }
        if let Some(v) = o.per_class {
            self.reconstruct.per_class = v;
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for p in [
            &self.data.train_images,
            &self.data.train_labels,
            &self.data.test_images,
            &self.data.test_labels,
        ] {
            if !p.is_file() {
                return bad(format!("data file {} does not exist", p.display()));
            }
        }
        if let Some(p) = &self.teacher.0.checkpoint {
            if !p.is_file() {
                return bad(format!("teacher checkpoint {} does not exist", p.display()));
            }
        }
        let teacher = parse_widths(&self.teacher.0.widths)?;
        let student = parse_widths(&self.student.0.widths)?;
        if teacher.first() != student.first() || teacher.last() != student.last() {
            return bad("teacher and student must share input and output widths".into());
        }
        if teacher.last() != Some(&self.data.num_classes) {
            return bad(format!("network output width must equal num_classes = {}", self.data.num_classes));
        }
        let r = &self.record;
        if !(r.temperature > 0.0 && self.distill.temperature > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(r.retain_fraction > 0.0 && r.retain_fraction <= 1.0) {
            return bad(format!("retain_fraction must be in (0, 1], got {}", r.retain_fraction));
        }
        if r.exemplars_per_class == 0 {
            return bad("exemplars_per_class must be at least 1".into());
        }
        if !(0.0..1.0).contains(&r.dropout_rate) || !(0.0..1.0).contains(&self.teacher.0.dropout) {
            return bad("dropout rates must be in [0, 1)".into());
        }
        let rc = &self.reconstruct;
        if rc.batch == 0 || rc.per_class == 0 {
            return bad("reconstruct.batch and reconstruct.per_class must be at least 1".into());
        }
        if !(rc.learning_rate > 0.0 && rc.init_std > 0.0) {
            return bad("reconstruct.learning_rate and init_std must be positive".into());
        }
        for (name, n) in [
            ("teacher", &self.teacher.0),
            ("student", &self.student.0),
        ] {
            if n.batch_size == 0 || !(n.learning_rate > 0.0) {
                return bad(format!("{name}: batch_size and learning_rate must be positive"));
            }
        }
        if self.distill.batch_size == 0 || !(self.distill.learning_rate > 0.0) {
            return bad("distill: batch_size and learning_rate must be positive".into());
        }
        Ok(())
    }

    /// Stage-specific seeds derived from the experiment seed.
    pub fn stage_seed(&self, stage: Stage, kind: Option<RecordKind>) -> u64 {
        crate::rng::derive_seed(self.seed, &[stage as u64, kind.map_or(99, RecordKind::index)])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Teacher = 1,
    StudentDirect = 2,
    StudentKd = 3,
    Record = 4,
    Reconstruct = 5,
    Distill = 6,
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
[data]
train_images = "a"
train_labels = "b"
test_images = "c"
test_labels = "d"
"#;

    #[test]
    fn defaults_fill_missing_sections() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, Path::new("/base")).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.data.train_images, PathBuf::from("/base/a"));
        assert_eq!(cfg.teacher.0.widths, "784-1200-1200-10");
        assert_eq!(cfg.teacher.0.dropout, 0.5);
        assert_eq!(cfg.student.0.widths, "784-800-800-10");
        assert_eq!(cfg.distill.temperature, 8.0);
        assert_eq!(cfg.distill.epochs, 30);
        assert_eq!(cfg.record.kinds.len(), 5);
        assert_eq!(cfg.reconstruct.per_class, 1000);
        let partial = format!("{MINIMAL}\n[student]\nepochs = 2\n");
        let p = ExperimentConfig::from_toml(&partial, Path::new("/base")).unwrap();
        assert_eq!((p.student.0.epochs, p.student.0.widths.as_str(), p.student.0.dropout), (2, "784-800-800-10", 0.0));
        let again = ExperimentConfig::from_toml(&cfg.to_toml(), Path::new("/")).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn seed_is_mandatory_and_unknown_keys_rejected() {
        let no_seed = MINIMAL.replace("seed = 7", "");
        assert!(matches!(ExperimentConfig::from_toml(&no_seed, Path::new(".")), Err(Error::Config(_))));
        let extra = format!("{MINIMAL}\n[record]\nretian = 0.2\n");
        assert!(matches!(ExperimentConfig::from_toml(&extra, Path::new(".")), Err(Error::Config(_))));
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = ExperimentConfig::from_toml(MINIMAL, Path::new(".")).unwrap();
        cfg.apply(&Overrides {
            record_kind: Some(RecordKind::AllDropout),
            temperature: Some(4.0),
            steps: Some(3),
            ..Default::default()
        });
        assert_eq!(cfg.record.kinds, vec![RecordKind::AllDropout]);
        assert_eq!((cfg.record.temperature, cfg.distill.temperature), (4.0, 4.0));
        assert_eq!(cfg.reconstruct.steps, 3);
    }

    #[test]
    fn kinds_parse() {
        for k in RecordKind::ALL {
            assert_eq!(k.as_str().parse::<RecordKind>().unwrap(), k);
            assert_eq!(k.stem().parse::<RecordKind>().unwrap(), k);
        }
        assert!("pairs".parse::<RecordKind>().is_err());
    }

    #[test]
    fn validation_reports_missing_files() {
        let cfg = ExperimentConfig::from_toml(MINIMAL, Path::new("/nonexistent")).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(m)) if m.contains("does not exist")));
    }
}
