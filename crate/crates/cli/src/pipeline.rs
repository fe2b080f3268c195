//! Run-directory stages.
//!
//! ```text
//! <run>/data/      train.{bin,header,csv}  test.{bin,header,csv}
//! <run>/frozen/    unimodal<m>.{bin,manifest}  upperbound.csv
//! <run>/train/     model.{bin,manifest}  losses.csv  factors.csv  eval.csv
//!                  capability.csv  repr.csv
//! <run>/eval/      eval.csv  repr.csv
//! <run>/probe/     capability.csv
//! <run>/ablation/  ablation.csv  rows/<a..m>/
//! ```
//!
//! Every stage directory has a `manifest.txt` with the resolved config,
//! seeds, generator, dataset fingerprints and the SHA-256 of each output.
//! A stage reuses upstream artifacts when their recorded stage hash matches
//! the current settings and refuses to mix them otherwise.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mce_core::analysis::{capability_report, repr_quality};
use mce_core::config::RunConfig;
use mce_core::model::{FrozenUnimodal, MultiModalModel};
use mce_core::params::ParamStore;
use mce_core::rce::Lambdas;
use mce_core::runlog::{read_csv, write_csv, AblationRow, CapabilityRow, EvalRow, ReprRow, RunLog};
use mce_core::seeding::{derive_seed, stream, GENERATOR};
use mce_core::synth::{generate_split, Dataset};
use mce_core::text::Document;
use mce_core::trainer::{evaluate_all_subsets, frozen_accuracy, pretrain_unimodal, probe_capability, train_mce, TrainError};

const DATA_SECTIONS: &[&str] = &["data", "run"];
const FROZEN_SECTIONS: &[&str] = &["data", "model", "pretrain", "run"];
const MODEL_SECTIONS: &[&str] = &["data", "model", "pretrain", "train", "lce", "rce", "run"];

pub struct Run {
    pub config: RunConfig,
    pub dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UpperboundRow {
    pub modality: usize,
    pub accuracy: f64,
}

/// Final-epoch accuracies of several runs side by side.
#[derive(Debug, Serialize, Deserialize)]
pub struct CompareRow {
    pub run: String,
    pub epoch: usize,
    pub subset: String,
    pub samples: usize,
    pub accuracy: f64,
}

/// Hash of the config entries in `sections`, i.e. of everything a stage's
/// artifacts depend on.
fn stage_hash(config: &RunConfig, sections: &[&str]) -> String {
    let mut h = Sha256::new();
    for e in config.to_document().entries() {
        if sections.contains(&e.section.as_str()) {
            h.update(format!("{}={}\n", e.path(), e.value));
        }
    }
    hex::encode(h.finalize())[..16].to_string()
}

fn file_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot hash {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

impl Run {
    fn stage(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn name(&self) -> String {
        self.dir.file_name().map_or_else(|| "run".into(), |n| n.to_string_lossy().into_owned())
    }

    /// Writes `<dir>/manifest.txt`; `outputs` are file names inside `dir`.
    fn write_manifest(&self, dir: &Path, command: &str, sections: &[&str], extra: &Document, outputs: &[String]) -> Result<()> {
        let cfg = &self.config;
        let mut doc = Document::new();
        doc.push("run", "command", command);
        doc.push("run", "config_hash", cfg.hash());
        doc.push("run", "stage_hash", stage_hash(cfg, sections));
        doc.push("seeds", "run", cfg.seed);
        doc.push("seeds", "model_init", derive_seed(cfg.seed, stream::MODEL_INIT));
        doc.push("seeds", "shuffle", derive_seed(cfg.seed, stream::SHUFFLE));
        doc.push("seeds", "shapley", derive_seed(cfg.seed, stream::SHAPLEY));
        doc.push("seeds", "generator", GENERATOR);
        for e in extra.entries() {
            doc.push(&e.section, &e.key, &e.value);
        }
        for e in cfg.to_document().entries() {
            doc.push(&format!("config.{}", e.section), &e.key, &e.value);
        }
        for name in outputs {
            doc.push("outputs", name, file_hash(&dir.join(name))?);
        }
        doc.write(&dir.join("manifest.txt"))?;
        Ok(())
    }

    /// Fails when `dir` holds artifacts built from different settings.
    /// Returns whether reusable artifacts exist.
    fn reusable(&self, dir: &Path, sections: &[&str]) -> Result<bool> {
        let path = dir.join("manifest.txt");
        if !path.exists() {
            return Ok(false);
        }
        let doc = Document::read(&path)?;
        let recorded = doc.require("run", "stage_hash")?;
        let expected = stage_hash(&self.config, sections);
        if recorded != expected {
            bail!(
                "{} was produced with different settings ({}); choose another --out",
                dir.display(),
                sections.join(", ")
            );
        }
        Ok(true)
    }

    fn dataset_entries(train: &Dataset, test: &Dataset) -> Document {
        let mut doc = Document::new();
        doc.push("dataset", "train_fingerprint", train.fingerprint());
        doc.push("dataset", "test_fingerprint", test.fingerprint());
        doc
    }

    pub fn gen_data(&self) -> Result<(Dataset, Dataset)> {
        let synth = self.config.synth();
        let (train, test) = generate_split(&synth, self.config.test_samples)?;
        let dir = self.stage("data");
        std::fs::create_dir_all(&dir)?;
        train.write_binary(&dir.join("train"), &synth)?;
        test.write_binary(&dir.join("test"), &synth)?;
        train.write_csv(&dir.join("train.csv"))?;
        test.write_csv(&dir.join("test.csv"))?;
        let outputs: Vec<String> = ["train.bin", "train.header", "train.csv", "test.bin", "test.header", "test.csv"]
            .map(String::from)
            .to_vec();
        self.write_manifest(&dir, "gen-data", DATA_SECTIONS, &Self::dataset_entries(&train, &test), &outputs)?;
        info!("dataset written to {}", dir.display());
        Ok((train, test))
    }

    pub fn ensure_data(&self) -> Result<(Dataset, Dataset)> {
        let dir = self.stage("data");
        if self.reusable(&dir, DATA_SECTIONS)? {
            return Ok((Dataset::read_binary(&dir.join("train"))?, Dataset::read_binary(&dir.join("test"))?));
        }
        self.gen_data()
    }

    pub fn pretrain(&self, train: &Dataset, test: &Dataset) -> Result<Vec<FrozenUnimodal>> {
        let cfg = &self.config;
        let model_cfg = cfg.model_config();
        let frozen: Vec<FrozenUnimodal> = (0..cfg.data.modalities)
            .into_par_iter()
            .map(|m| pretrain_unimodal(train, m, &model_cfg, &cfg.pretrain, cfg.seed))
            .collect::<mce_core::Result<_>>()?;
        let dir = self.stage("frozen");
        std::fs::create_dir_all(&dir)?;
        let mut outputs = Vec::new();
        let mut upper = Vec::new();
        for f in &frozen {
            let m = f.modality();
            let mut meta = Document::new();
            meta.push("unimodal", "modality", m);
            f.params().save(&dir.join(format!("unimodal{m}")), &meta)?;
            outputs.push(format!("unimodal{m}.bin"));
            outputs.push(format!("unimodal{m}.manifest"));
            upper.push(UpperboundRow { modality: m, accuracy: frozen_accuracy(f, test)? });
        }
        write_csv(&dir.join("upperbound.csv"), &upper)?;
        outputs.push("upperbound.csv".into());
        self.write_manifest(&dir, "pretrain", FROZEN_SECTIONS, &Self::dataset_entries(train, test), &outputs)?;
        Ok(frozen)
    }

    pub fn ensure_frozen(&self, train: &Dataset, test: &Dataset) -> Result<Vec<FrozenUnimodal>> {
        let dir = self.stage("frozen");
        if self.reusable(&dir, FROZEN_SECTIONS)? {
            return (0..self.config.data.modalities)
                .map(|m| {
                    let (params, _) = ParamStore::load(&dir.join(format!("unimodal{m}")))?;
                    Ok(FrozenUnimodal::from_params(m, params)?)
                })
                .collect();
        }
        self.pretrain(train, test)
    }

    fn repr_row(&self, model: &MultiModalModel, test: &Dataset) -> Result<ReprRow> {
        let full = model.config().full_mask();
        let features = model.fused_features(&test.full_batch(), full)?;
        let q = repr_quality(&features, &test.labels)?;
        Ok(ReprRow {
            run: self.name(),
            intra: q.intra,
            inter: q.inter,
            ratio: q.ratio,
            cosine: q.cosine,
        })
    }

    /// Writes a run log plus the model checkpoint into `dir`.
    fn write_training(&self, dir: &Path, command: &str, model: &MultiModalModel, log: &RunLog, test: &Dataset, extra: &Document) -> Result<()> {
        log.write_dir(dir)?;
        let mut meta = Document::new();
        meta.push("model", "config_hash", self.config.hash());
        model.params().save(&dir.join("model"), &meta)?;
        write_csv(&dir.join("repr.csv"), &[self.repr_row(model, test)?])?;
        let mut outputs: Vec<String> = ["losses.csv", "factors.csv", "eval.csv"].map(String::from).to_vec();
        if !log.capability.is_empty() {
            outputs.push("capability.csv".into());
        }
        outputs.extend(["repr.csv", "model.bin", "model.manifest"].map(String::from));
        self.write_manifest(dir, command, MODEL_SECTIONS, extra, &outputs)
    }

    pub fn train(&self) -> Result<(MultiModalModel, RunLog)> {
        let (train, test) = self.ensure_data()?;
        let frozen = self.ensure_frozen(&train, &test)?;
        let dir = self.stage("train");
        let extra = Self::dataset_entries(&train, &test);
        match train_mce(&train, &test, &frozen, &self.config.model_config(), &self.config.train_config()) {
            Ok(t) => {
                self.write_training(&dir, "train", &t.model, &t.log, &test, &extra)?;
                Ok((t.model, t.log))
            }
            Err(TrainError::Diverged(d)) => {
                let mut extra = extra;
                extra.push("divergence", "step", d.step);
                extra.push("divergence", "component", d.component);
                self.write_training(&dir, "train", &d.last_good, &d.log, &test, &extra)?;
                bail!(
                    "training diverged at step {} ({} loss); last good model saved to {}",
                    d.step,
                    d.component,
                    dir.display()
                )
            }
            Err(TrainError::Failed(e)) => Err(e.into()),
        }
    }

    pub fn ensure_model(&self) -> Result<MultiModalModel> {
        let dir = self.stage("train");
        if self.reusable(&dir, MODEL_SECTIONS)? {
            let manifest = Document::read(&dir.join("manifest.txt"))?;
            if manifest.get("divergence", "step").is_some() {
                bail!("{} holds a diverged run", dir.display());
            }
            let (params, _) = ParamStore::load(&dir.join("model"))?;
            return Ok(MultiModalModel::from_params(&self.config.model_config(), params)?);
        }
        Ok(self.train()?.0)
    }

    pub fn eval(&self) -> Result<f64> {
        let (_, test) = self.ensure_data()?;
        let model = self.ensure_model()?;
        let report = evaluate_all_subsets(&model, &test, self.config.train.eval_path)?;
        let dir = self.stage("eval");
        std::fs::create_dir_all(&dir)?;
        write_csv(&dir.join("eval.csv"), &report.eval_rows(self.config.train.epochs))?;
        write_csv(&dir.join("repr.csv"), &[self.repr_row(&model, &test)?])?;
        let mut extra = Document::new();
        extra.push("eval", "path", self.config.train.eval_path);
        self.write_manifest(&dir, "eval", MODEL_SECTIONS, &extra, &["eval.csv".into(), "repr.csv".into()])?;
        Ok(report.average)
    }

    pub fn probe(&self) -> Result<Vec<CapabilityRow>> {
        let (train, test) = self.ensure_data()?;
        let frozen = self.ensure_frozen(&train, &test)?;
        let model = self.ensure_model()?;
        let cfg = &self.config;
        let rows: Vec<CapabilityRow> = frozen
            .iter()
            .map(|f| {
                let m = f.modality();
                Ok(CapabilityRow {
                    epoch: cfg.train.epochs,
                    modality: m,
                    capability: probe_capability(&model, m, &train, &test, &cfg.train.probe, cfg.seed)?,
                    upperbound: frozen_accuracy(f, &test)?,
                })
            })
            .collect::<mce_core::Result<_>>()?;
        let dir = self.stage("probe");
        std::fs::create_dir_all(&dir)?;
        write_csv(&dir.join("capability.csv"), &rows)?;
        self.write_manifest(&dir, "probe", MODEL_SECTIONS, &Document::new(), &["capability.csv".into()])?;
        Ok(rows)
    }

    /// Trains every ablation row on the same data, frozen models and seed.
    pub fn ablate(&self) -> Result<Vec<AblationRow>> {
        let (train, test) = self.ensure_data()?;
        let frozen = self.ensure_frozen(&train, &test)?;
        let dir = self.stage("ablation");
        let results: Vec<(AblationRow, RunLog)> = ABLATION_ROWS
            .par_iter()
            .map(|row| {
                let cfg = row.apply(&self.config);
                let trained = train_mce(&train, &test, &frozen, &cfg.model_config(), &cfg.train_config())
                    .map_err(|e| anyhow::anyhow!("ablation row {}: {e}", row.name))?;
                let report = evaluate_all_subsets(&trained.model, &test, cfg.train.eval_path)?;
                let out = AblationRow {
                    row: row.name.into(),
                    use_a: row.a,
                    use_b: row.b,
                    single: row.single,
                    sub: row.sub,
                    aux: row.aux,
                    average_accuracy: report.average,
                    min_accuracy: report.min(),
                };
                Ok((out, trained.log))
            })
            .collect::<Result<_>>()?;
        let mut rows = Vec::new();
        for (row, log) in results {
            log.write_dir(&dir.join("rows").join(&row.row))?;
            rows.push(row);
        }
        write_csv(&dir.join("ablation.csv"), &rows)?;
        self.write_manifest(&dir, "ablate", MODEL_SECTIONS, &Self::dataset_entries(&train, &test), &["ablation.csv".into()])?;
        Ok(rows)
    }
}

/// One configuration of the component grid.
#[derive(Clone, Copy, Debug)]
pub struct AblationSpec {
    pub name: &'static str,
    pub a: bool,
    pub b: bool,
    pub single: bool,
    pub sub: bool,
    pub aux: bool,
}

const fn row(name: &'static str, a: bool, b: bool, single: bool, sub: bool, aux: bool) -> AblationSpec {
    AblationSpec { name, a, b, single, sub, aux }
}

/// Rows a to m: baseline, each loss term alone and in combination, then the
/// factors layered on top.
pub const ABLATION_ROWS: [AblationSpec; 13] = [
    row("a", false, false, false, false, false),
    row("b", false, false, true, false, false),
    row("c", false, false, false, true, false),
    row("d", false, false, false, false, true),
    row("e", false, false, true, true, false),
    row("f", false, false, true, false, true),
    row("g", false, false, false, true, true),
    row("h", false, false, true, true, true),
    row("i", true, false, true, true, true),
    row("j", false, true, true, true, true),
    row("k", true, true, true, false, false),
    row("l", true, true, false, false, true),
    row("m", true, true, true, true, true),
];

impl AblationSpec {
    /// Disabled terms get λ = 0; enabled ones keep the configured weight.
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let l = base.train.objective.lambdas;
        cfg.train.objective.lambdas = Lambdas {
            single: if self.single { l.single } else { 0.0 },
            sub: if self.sub { l.sub } else { 0.0 },
            aux: if self.aux { l.aux } else { 0.0 },
        };
        cfg.train.lce.use_a = self.a;
        cfg.train.lce.use_b = self.b;
        cfg
    }
}

/// Finds the training log inside a run directory, or accepts a log
/// directory directly.
fn log_dir(dir: &Path) -> PathBuf {
    if dir.join("losses.csv").exists() {
        dir.to_path_buf()
    } else {
        dir.join("train")
    }
}

fn label(dir: &Path) -> String {
    let d = if dir.ends_with("train") { dir.parent().unwrap_or(dir) } else { dir };
    d.file_name().map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Combines logged artifacts of one or more runs. Reads only, never trains.
pub fn report(runs: &[PathBuf], out: &Path) -> Result<()> {
    let mut logs = Vec::new();
    let mut repr = Vec::new();
    let mut compare = Vec::new();
    let mut inputs = Document::new();
    for dir in runs {
        let ld = log_dir(dir);
        let name = label(dir);
        let log = RunLog::read_dir(&ld).with_context(|| format!("no training log under {}", dir.display()))?;
        inputs.push("inputs", &name, file_hash(&ld.join("manifest.txt"))?);
        let last = log.evals.iter().map(|r| r.epoch).max();
        compare.extend(log.evals.iter().filter(|r| Some(r.epoch) == last).map(|r: &EvalRow| CompareRow {
            run: name.clone(),
            epoch: r.epoch,
            subset: r.subset.clone(),
            samples: r.samples,
            accuracy: r.accuracy,
        }));
        let repr_path = ld.join("repr.csv");
        if repr_path.exists() {
            repr.extend(read_csv::<ReprRow>(&repr_path)?.into_iter().map(|r| ReprRow { run: name.clone(), ..r }));
        }
        logs.push((name, log));
    }
    std::fs::create_dir_all(out)?;
    write_csv(&out.join("capability.csv"), &capability_report(&logs))?;
    write_csv(&out.join("repr.csv"), &repr)?;
    write_csv(&out.join("eval.csv"), &compare)?;
    let mut doc = Document::new();
    doc.push("run", "command", "report");
    for e in inputs.entries() {
        doc.push(&e.section, &e.key, &e.value);
    }
    for name in ["capability.csv", "repr.csv", "eval.csv"] {
        doc.push("outputs", name, file_hash(&out.join(name))?);
    }
    doc.write(&out.join("manifest.txt"))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_grid_matches_the_component_table() {
        let names: String = ABLATION_ROWS.iter().map(|r| r.name).collect();
        assert_eq!(names, "abcdefghijklm");
        let base = RunConfig::default();
        let a = ABLATION_ROWS[0].apply(&base);
        assert_eq!(a.train.objective.lambdas, Lambdas::ZERO);
        assert!(!a.train.lce.use_a && !a.train.lce.use_b);
        let m = ABLATION_ROWS[12].apply(&base);
        assert_eq!(m.train.objective.lambdas, Lambdas::default());
        assert!(m.train.lce.use_a && m.train.lce.use_b);
        let k = ABLATION_ROWS[10].apply(&base);
        assert_eq!(k.train.objective.lambdas, Lambdas { single: 1.0, sub: 0.0, aux: 0.0 });
    }

    #[test]
    fn stage_hash_ignores_unrelated_sections() {
        let base = RunConfig::default();
        let mut other = base.clone();
        other.apply_override("eval.path=completed").unwrap();
        assert_eq!(stage_hash(&base, MODEL_SECTIONS), stage_hash(&other, MODEL_SECTIONS));
        other.apply_override("train.epochs=2").unwrap();
        assert_ne!(stage_hash(&base, MODEL_SECTIONS), stage_hash(&other, MODEL_SECTIONS));
        assert_eq!(stage_hash(&base, DATA_SECTIONS), stage_hash(&other, DATA_SECTIONS));
    }
}
