//! Experiment stages over an output directory.
//!
//! Every stage writes its artifacts plus a JSON manifest holding the config
//! echo, the stage seed and the sha256 of each input and output. A stage is
//! skipped when its manifest key (config + seed + input hashes) matches and
//! every listed output still hashes to the recorded value.

use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, RecordKind, Stage};
use crate::data::{compute_pixel_stats, load_set, save_set, LabeledImageSet};
use crate::distill::{distill_datafree, distill_kd, evaluate, train};
use crate::error::{Error, Result};
use crate::nn::checkpoint::{self, ModelHash};
use crate::nn::{parse_widths, DenseNetwork};
use crate::reconstruct::{reconstruct_dataset, write_class_mean_sheet, Reconstructor};
use crate::records::{
    load_record, record_all_layer_stats, record_spectral, record_top_layer_stats, save_record, ActivationRecord,
};
use crate::rng::rng_for;
use crate::spectral::network_bases;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub seed: u64,
    pub key: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    Skipped,
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub key: String,
    pub accuracy: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub struct Experiment {
    pub config: ExperimentConfig,
    train_set: OnceCell<LabeledImageSet>,
    test_set: OnceCell<LabeledImageSet>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        std::fs::create_dir_all(config.out_dir.join("manifests")).map_err(|e| Error::io(&config.out_dir, e))?;
        Ok(Self {
            config,
            train_set: OnceCell::new(),
            test_set: OnceCell::new(),
        })
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.config.out_dir.join(rel)
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.out("teacher.mdl")
    }

    pub fn record_path(&self, kind: RecordKind) -> PathBuf {
        self.out(&format!("records/{}.rec", kind.stem()))
    }

    pub fn surrogate_paths(&self, kind: RecordKind) -> (PathBuf, PathBuf) {
        (
            self.out(&format!("surrogate/{}-images.idx", kind.stem())),
            self.out(&format!("surrogate/{}-labels.idx", kind.stem())),
        )
    }

    /// One JSON line per optimized batch.
    pub fn batch_report_path(&self, kind: RecordKind) -> PathBuf {
        self.out(&format!("surrogate/{}-batches.jsonl", kind.stem()))
    }

    pub fn student_path(&self, kind: RecordKind) -> PathBuf {
        self.out(&format!("students/{}.mdl", kind.stem()))
    }

    pub fn results_paths(&self) -> (PathBuf, PathBuf) {
        (self.out("results.txt"), self.out("results.jsonl"))
    }

    fn cache_dir(&self) -> PathBuf {
        self.out("cache")
    }

    pub fn train_set(&self) -> Result<&LabeledImageSet> {
        if let Some(s) = self.train_set.get() {
            return Ok(s);
        }
        let d = &self.config.data;
        let set = load_set(&d.train_images, &d.train_labels, d.num_classes)?;
        Ok(self.train_set.get_or_init(|| set))
    }

    pub fn test_set(&self) -> Result<&LabeledImageSet> {
        if let Some(s) = self.test_set.get() {
            return Ok(s);
        }
        let d = &self.config.data;
        let set = load_set(&d.test_images, &d.test_labels, d.num_classes)?;
        Ok(self.test_set.get_or_init(|| set))
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.config.out_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned()
    }

    fn require(&self, path: &Path, stage: &'static str) -> Result<()> {
        if path.is_file() {
            Ok(())
        } else {
            Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                stage,
            })
        }
    }

    /// Runs `body` unless an identical, intact run is already on disk.
    fn stage(
        &self,
        name: &str,
        seed: u64,
        config: serde_json::Value,
        inputs: &[&Path],
        outputs: &[PathBuf],
        body: impl FnOnce() -> Result<()>,
    ) -> Result<StageStatus> {
        let mut input_hashes = BTreeMap::new();
        for p in inputs {
            input_hashes.insert(self.rel(p), sha256_file(p)?);
        }
        let key_src = json!({ "stage": name, "seed": seed, "config": config, "inputs": input_hashes });
        let key = hex::encode(Sha256::digest(key_src.to_string().as_bytes()));
        let manifest_path = self.out(&format!("manifests/{name}.json"));

        if let Ok(text) = std::fs::read_to_string(&manifest_path) {
            if let Ok(old) = serde_json::from_str::<Manifest>(&text) {
                let intact = old.key == key
                    && outputs.iter().all(|p| {
                        old.artifacts
                            .get(&self.rel(p))
                            .is_some_and(|h| sha256_file(p).is_ok_and(|now| &now == h))
                    });
                if intact {
                    log::info!("{name}: up to date, skipping");
                    return Ok(StageStatus::Skipped);
                }
            }
        }

        log::info!("{name}: running");
        let started = Instant::now();
        for p in outputs {
            if let Some(dir) = p.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        body()?;
        let mut artifacts = BTreeMap::new();
        for p in outputs {
            artifacts.insert(self.rel(p), sha256_file(p)?);
        }
        let manifest = Manifest {
            stage: name.to_string(),
            seed,
            key,
            config,
            inputs: input_hashes,
            artifacts,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
        log::info!("{name}: done in {:.1}s", started.elapsed().as_secs_f64());
        Ok(StageStatus::Ran)
    }

    fn load_teacher(&self) -> Result<(DenseNetwork<f32>, ModelHash)> {
        let path = self.teacher_path();
        self.require(&path, "train")?;
        let net = checkpoint::load(&path)?;
        let hash = checkpoint::model_hash(&net);
        Ok((net, hash))
    }

    /// Trains the teacher, or copies the configured checkpoint.
    pub fn run_teacher(&self) -> Result<StageStatus> {
        let t = &self.config.teacher.0;
        let seed = self.config.stage_seed(Stage::Teacher, None);
        let out = self.teacher_path();
        let data = &self.config.data;
        if let Some(src) = &t.checkpoint {
            let net = checkpoint::load(src)?;
            if net.widths() != parse_widths(&t.widths)? {
                return Err(Error::Config(format!(
                    "teacher checkpoint {} has widths {:?}, config says {}",
                    src.display(),
                    net.widths(),
                    t.widths
                )));
            }
            return self.stage("teacher", seed, json!({ "checkpoint": true }), &[src], std::slice::from_ref(&out), || {
                checkpoint::save(&net, &out)
            });
        }
        let inputs = [data.train_images.as_path(), data.train_labels.as_path()];
        self.stage("teacher", seed, json!(t), &inputs, std::slice::from_ref(&out), || {
            let mut net = DenseNetwork::from_widths(&parse_widths(&t.widths)?, &mut rng_for(seed, &[0]))?;
            train(&mut net, self.train_set()?, &t.train_config(seed))?;
            checkpoint::save(&net, &out)
        })
    }

    /// Student trained directly on the data, and student distilled from the teacher on the data.
    pub fn run_baselines(&self) -> Result<()> {
        let s = &self.config.student.0;
        let data = &self.config.data;
        let inputs = [data.train_images.as_path(), data.train_labels.as_path()];
        let seed = self.config.stage_seed(Stage::StudentDirect, None);
        let direct = self.out("student-direct.mdl");
        self.stage("student-direct", seed, json!(s), &inputs, std::slice::from_ref(&direct), || {
            let mut net = DenseNetwork::from_widths(&parse_widths(&s.widths)?, &mut rng_for(seed, &[0]))?;
            train(&mut net, self.train_set()?, &s.train_config(seed))?;
            checkpoint::save(&net, &direct)
        })?;

        let teacher_path = self.teacher_path();
        self.require(&teacher_path, "train")?;
        let seed = self.config.stage_seed(Stage::StudentKd, None);
        let kd = self.out("student-kd.mdl");
        let echo = json!({ "student": s.widths, "distill": self.config.distill });
        self.stage("student-kd", seed, echo, &[inputs[0], inputs[1], &teacher_path], std::slice::from_ref(&kd), || {
            let (teacher, _) = self.load_teacher()?;
            let mut net = DenseNetwork::from_widths(&parse_widths(&s.widths)?, &mut rng_for(seed, &[0]))?;
            distill_kd(&teacher, &mut net, self.train_set()?, &self.config.distill.train_config(seed))?;
            checkpoint::save(&net, &kd)
        })?;
        Ok(())
    }

    pub fn run_train(&self) -> Result<()> {
        self.run_teacher()?;
        self.run_baselines()
    }

    pub fn run_record(&self, kind: RecordKind) -> Result<StageStatus> {
        let teacher_path = self.teacher_path();
        self.require(&teacher_path, "train")?;
        let data = &self.config.data;
        let inputs = [data.train_images.as_path(), data.train_labels.as_path(), teacher_path.as_path()];

        let pixels = self.out("records/pixels.rec");
        self.stage("record-pixels", 0, json!({}), &inputs, std::slice::from_ref(&pixels), || {
            let (_, hash) = self.load_teacher()?;
            let stats = compute_pixel_stats(self.train_set()?)?;
            save_record(&ActivationRecord::PixelStats(stats), &hash, &pixels)
        })?;

        let r = &self.config.record;
        let seed = self.config.stage_seed(Stage::Record, Some(kind));
        let out = self.record_path(kind);
        let echo = match kind {
            RecordKind::Top | RecordKind::All => json!({ "kind": kind, "temperature": r.temperature }),
            RecordKind::AllDropout => {
                json!({ "kind": kind, "temperature": r.temperature, "dropout_rate": r.dropout_rate })
            }
            RecordKind::SpectralAll | RecordKind::SpectralPairs => json!({
                "kind": kind,
                "retain_fraction": r.retain_fraction,
                "exemplars_per_class": r.exemplars_per_class,
            }),
        };
        self.stage(&format!("record-{}", kind.stem()), seed, echo, &inputs, std::slice::from_ref(&out), || {
            let (teacher, hash) = self.load_teacher()?;
            let set = self.train_set()?;
            let record = match kind {
                RecordKind::Top => ActivationRecord::Stats(record_top_layer_stats(&teacher, set, r.temperature)?),
                RecordKind::All => ActivationRecord::Stats(record_all_layer_stats(&teacher, set, r.temperature, None)?),
                RecordKind::AllDropout => ActivationRecord::Stats(record_all_layer_stats(
                    &teacher,
                    set,
                    r.temperature,
                    Some(r.dropout_rate),
                )?),
                RecordKind::SpectralAll | RecordKind::SpectralPairs => {
                    let mode = kind.spectral_mode().expect("spectral kind");
                    let bases = network_bases(&teacher, mode, &hash, Some(&self.cache_dir()))?;
                    ActivationRecord::Spectral(record_spectral(
                        &teacher,
                        set,
                        mode,
                        &bases,
                        r.retain_fraction,
                        r.exemplars_per_class,
                        &mut rng_for(seed, &[]),
                    )?)
                }
            };
            save_record(&record, &hash, &out)
        })
    }

    fn paired_record(&self, kind: RecordKind) -> Result<(DenseNetwork<f32>, ModelHash, ActivationRecord)> {
        let (teacher, hash) = self.load_teacher()?;
        let path = self.record_path(kind);
        self.require(&path, "record")?;
        let (record_hash, record) = load_record(&path)?;
        crate::distill::check_pairing(&hash, &record_hash)?;
        Ok((teacher, hash, record))
    }

    pub fn run_reconstruct(&self, kind: RecordKind) -> Result<StageStatus> {
        let teacher_path = self.teacher_path();
        let record_path = self.record_path(kind);
        self.require(&teacher_path, "train")?;
        self.require(&record_path, "record")?;
        let rc = &self.config.reconstruct;
        let seed = self.config.stage_seed(Stage::Reconstruct, Some(kind));
        let (images, labels) = self.surrogate_paths(kind);
        let sheet = self.out(&format!("surrogate/{}-means.pgm", kind.stem()));
        let report = self.batch_report_path(kind);
        let outputs = [images.clone(), labels.clone(), sheet.clone(), report.clone()];
        let inputs = [teacher_path.as_path(), record_path.as_path()];
        self.stage(&format!("reconstruct-{}", kind.stem()), seed, json!(rc), &inputs, &outputs, || {
            let (teacher, hash, record) = self.paired_record(kind)?;
            let bases = match kind.spectral_mode() {
                Some(mode) => network_bases(&teacher, mode, &hash, Some(&self.cache_dir()))?,
                None => Vec::new(),
            };
            let rec = Reconstructor::new(&teacher, &record, &bases)?;
            let side = (teacher.input_dim() as f64).sqrt() as usize;
            let (width, height) = if side * side == teacher.input_dim() {
                (side, side)
            } else {
                (teacher.input_dim(), 1)
            };
            let (set, reports) = reconstruct_dataset(
                &rec,
                &rc.job(seed),
                &record.classes(),
                rc.per_class,
                width,
                height,
                self.config.data.num_classes,
            )?;
            save_set(&set, &images, &labels)?;
            write_class_mean_sheet(&set, &sheet)?;
            let mut f = std::fs::File::create(&report).map_err(|e| Error::io(&report, e))?;
            for r in &reports {
                writeln!(f, "{}", serde_json::to_string(r).expect("report serializes")).map_err(|e| Error::io(&report, e))?;
            }
            Ok(())
        })
    }

    pub fn run_distill(&self, kind: RecordKind) -> Result<StageStatus> {
        let teacher_path = self.teacher_path();
        let record_path = self.record_path(kind);
        let (images, labels) = self.surrogate_paths(kind);
        self.require(&teacher_path, "train")?;
        self.require(&record_path, "record")?;
        self.require(&images, "reconstruct")?;
        self.require(&labels, "reconstruct")?;
        let seed = self.config.stage_seed(Stage::Distill, Some(kind));
        let out = self.student_path(kind);
        let echo = json!({ "student": self.config.student.0.widths, "distill": self.config.distill });
        let inputs = [teacher_path.as_path(), record_path.as_path(), images.as_path(), labels.as_path()];
        self.stage(&format!("distill-{}", kind.stem()), seed, echo, &inputs, std::slice::from_ref(&out), || {
            let (teacher, _) = self.load_teacher()?;
            let (record_hash, _) = load_record(&record_path)?;
            let surrogate = load_set(&images, &labels, self.config.data.num_classes)?;
            let widths = parse_widths(&self.config.student.0.widths)?;
            let mut student = DenseNetwork::from_widths(&widths, &mut rng_for(seed, &[0]))?;
            distill_datafree(
                &teacher,
                &record_hash,
                &mut student,
                &surrogate,
                &self.config.distill.train_config(seed),
            )?;
            checkpoint::save(&student, &out)
        })
    }

    /// Evaluates every checkpoint present and writes the results table.
    pub fn run_eval(&self) -> Result<Vec<ResultRow>> {
        let mut entries: Vec<(String, String, PathBuf)> = vec![
            (
                format!("Teacher {}", self.config.teacher.0.widths),
                "teacher".into(),
                self.teacher_path(),
            ),
            (
                format!("Student {}, trained directly", self.config.student.0.widths),
                "student-direct".into(),
                self.out("student-direct.mdl"),
            ),
            (
                format!("Knowledge Distillation, T = {}", self.config.distill.temperature),
                "kd".into(),
                self.out("student-kd.mdl"),
            ),
        ];
        for kind in RecordKind::ALL {
            entries.push((format!("Data-free: {}", kind.label()), kind.as_str().into(), self.student_path(kind)));
        }
        let present: Vec<_> = entries.into_iter().filter(|(_, _, p)| p.is_file()).collect();
        if present.is_empty() {
            return Err(Error::MissingArtifact {
                path: self.teacher_path(),
                stage: "train",
            });
        }
        let test = self.test_set()?;
        let mut rows = Vec::new();
        for (method, key, path) in present {
            let net = checkpoint::load(&path)?;
            let accuracy = evaluate(&net, test)?;
            log::info!("{method}: {:.2}%", accuracy * 100.0);
            rows.push(ResultRow { method, key, accuracy });
        }
        let (txt, jsonl) = self.results_paths();
        std::fs::write(&txt, format_table(&rows)).map_err(|e| Error::io(&txt, e))?;
        let lines: String = rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
            .collect();
        std::fs::write(&jsonl, lines).map_err(|e| Error::io(&jsonl, e))?;
        Ok(rows)
    }

    pub fn run_kind(&self, kind: RecordKind) -> Result<()> {
        self.run_record(kind)?;
        self.run_reconstruct(kind)?;
        self.run_distill(kind)?;
        Ok(())
    }

    /// Teacher and baselines, then record → reconstruct → distill for every configured kind, then eval.
    pub fn run_pipeline(&self) -> Result<Vec<ResultRow>> {
        self.run_train()?;
        for &kind in &self.config.record.kinds {
            self.run_kind(kind)?;
        }
        self.run_eval()
    }
}

pub fn format_table(rows: &[ResultRow]) -> String {
    let width = rows.iter().map(|r| r.method.chars().count()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}  {:>8}\n", "Method", "Accuracy");
    out.push_str(&format!("{}  {}\n", "-".repeat(width), "-".repeat(8)));
    for r in rows {
        out.push_str(&format!("{:<width$}  {:>7.2}%\n", r.method, r.accuracy * 100.0));
    }
    out
}
