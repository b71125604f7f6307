//! End-to-end experiment orchestration: dataset preparation, CNN training,
//! attack caching, the repeated K-sweep with keyed subsets, transfer
//! evaluation on the cached adversarial examples, and report aggregation.
//!
//! Every stage persists its artifact under the output directory and is
//! triggered either by its CLI subcommand or on demand by
//! [`run_experiment`]. One master seed pins the dataset manifest, model
//! initialization, every repetition key, and therefore the whole report,
//! byte for byte.

mod config;
mod dataset;
mod features;
mod report;

pub use config::{
    ArchitectureConfig, AttacksConfig, Config, DatasetConfig, PlanConfig, RdfsConfig, SourceSpec,
    Task,
};
pub use dataset::{
    load_dataset, manipulate, prepare_dataset, save_dataset, synth_texture, Dataset, DatasetMeta,
    ManifestRow, Split,
};
pub use features::{file_digest, load_features, save_features};
pub use report::{aggregate_report, aggregate_rows, render_tables, CellRow, Condition, ReportFiles, ReportRow};

use crate::attacks::{evaluate_attack_batch, read_cache, write_cache, AttackKind, BatchSummary};
use crate::detectors::{train_cnn, CnnDetector, TrainReport};
use crate::error::{Error, Result};
use crate::image::{GrayImage, Label};
use crate::rdfs::{
    select_features, train_reduced_fc, train_svm, FeatureMatrix, ReducedDetector, ReducedKind,
    SecretKey,
};
use crate::rng::{derive, fnv1a64, SplitMix64};
use rayon::prelude::*;
use std::collections::BTreeMap;
use std::path::PathBuf;

/// The repetition key: a pure function of (master seed, K, repetition), so
/// any cell can be reproduced in isolation.
pub fn derive_key(master_seed: u64, k: usize, rep: usize) -> SecretKey {
    let mut bytes = Vec::with_capacity(33);
    bytes.extend_from_slice(&master_seed.to_le_bytes());
    bytes.extend_from_slice(b"rdfs-key");
    bytes.extend_from_slice(&(k as u64).to_le_bytes());
    bytes.extend_from_slice(&(rep as u64).to_le_bytes());
    SecretKey::from_bytes(&bytes)
}

/// One cell of the K-sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepCell {
    pub kind: ReducedKind,
    pub k: usize,
    pub full: bool,
    pub rep: usize,
}

/// Feature caches of one (task, model) pair.
pub struct FeatureSets {
    /// Features of the reduced-training subset (a seeded stratified
    /// fraction of the CNN training patches).
    pub reduced_train: FeatureMatrix,
    pub val: FeatureMatrix,
    pub test: FeatureMatrix,
}

/// Adversarial features of the patches that fooled the original CNN, plus
/// their indices into the attacked-patch list.
pub struct AdversarialFeatures {
    pub features: FeatureMatrix,
    pub patch_indices: Vec<usize>,
}

/// Paths and stage logic over one output directory.
pub struct Workspace<'a> {
    pub cfg: &'a Config,
}

impl<'a> Workspace<'a> {
    pub fn new(cfg: &'a Config) -> Self {
        Self { cfg }
    }

    fn task_dir(&self, task: Task) -> PathBuf {
        self.cfg.out_dir.join(task.name())
    }

    pub fn dataset_dir(&self, task: Task) -> PathBuf {
        self.task_dir(task).join("dataset")
    }

    pub fn model_path(&self, task: Task) -> PathBuf {
        self.task_dir(task)
            .join("models")
            .join(format!("cnn_{}.rdm", self.cfg.architecture.id))
    }

    pub fn attacks_dir(&self, task: Task) -> PathBuf {
        self.task_dir(task).join("attacks").join(self.cfg.architecture.id.to_string())
    }

    pub fn features_dir(&self, task: Task) -> PathBuf {
        self.task_dir(task).join("features").join(self.cfg.architecture.id.to_string())
    }

    pub fn rdfs_dir(&self, task: Task) -> PathBuf {
        self.task_dir(task).join("rdfs").join(self.cfg.architecture.id.to_string())
    }

    pub fn results_path(&self) -> PathBuf {
        self.cfg.out_dir.join("results").join("rows.jsonl")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.cfg.out_dir.join("reports")
    }

    // ---- dataset ----

    pub fn build_dataset(&self, task: Task) -> Result<Dataset> {
        let ds = prepare_dataset(&self.cfg.dataset, task, derive(self.cfg.seed, "dataset", 0))?;
        save_dataset(&ds, &self.dataset_dir(task))?;
        Ok(ds)
    }

    /// Loads the dataset or fails with a build-order error naming the
    /// prerequisite command.
    pub fn require_dataset(&self, task: Task) -> Result<Dataset> {
        load_dataset(&self.dataset_dir(task))
    }

    pub fn ensure_dataset(&self, task: Task) -> Result<Dataset> {
        if self.dataset_dir(task).join("meta.json").exists() {
            self.require_dataset(task)
        } else {
            self.build_dataset(task)
        }
    }

    // ---- original CNN ----

    pub fn train_model(&self, task: Task, dataset: &Dataset) -> Result<(CnnDetector, TrainReport)> {
        let arch = crate::detectors::CnnArchitecture::by_id(self.cfg.architecture.id, self.cfg.profile);
        let mut cfg = self.cfg.training.clone();
        cfg.seed = derive(self.cfg.seed, "cnn-train", task as u64);
        let (det, rep) = train_cnn(&arch, &dataset.train, &dataset.val, &cfg, task.name())?;
        let path = self.model_path(task);
        std::fs::create_dir_all(path.parent().unwrap())?;
        det.save(&path)?;
        Ok((det, rep))
    }

    pub fn require_model(&self, task: Task) -> Result<CnnDetector> {
        let path = self.model_path(task);
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "model {} not found (run `train-cnn` first)",
                path.display()
            )));
        }
        CnnDetector::load(&path)
    }

    pub fn ensure_model(&self, task: Task, dataset: &Dataset) -> Result<CnnDetector> {
        if self.model_path(task).exists() {
            self.require_model(task)
        } else {
            Ok(self.train_model(task, dataset)?.0)
        }
    }

    // ---- feature caches ----

    fn extract_features(
        &self,
        det: &CnnDetector,
        patches: &[(&GrayImage, Label)],
    ) -> Result<FeatureMatrix> {
        let n = det.n_features();
        let chunks: Vec<Vec<Vec<f32>>> = patches
            .par_chunks(256)
            .map(|chunk| {
                let mut inputs = Vec::with_capacity(chunk.len() * det.arch.patch_side.pow(2));
                for (img, _) in chunk {
                    inputs.extend(img.to_model_input());
                }
                det.features_model_batch(&inputs)
            })
            .collect::<Result<_>>()?;
        let mut m = FeatureMatrix::new(n);
        let mut it = patches.iter();
        for chunk in chunks {
            for row in chunk {
                let (_, label) = it.next().expect("aligned with input");
                m.push_row(&row, *label)?;
            }
        }
        Ok(m)
    }

    /// Seeded stratified subset of the training patches used to train the
    /// reduced detectors.
    fn reduced_train_indices(&self, dataset: &Dataset) -> Vec<usize> {
        let mut picked = Vec::new();
        for class in [Label::Original, Label::Manipulated] {
            let idx: Vec<usize> = dataset
                .train
                .iter()
                .enumerate()
                .filter(|(_, p)| p.label == class)
                .map(|(i, _)| i)
                .collect();
            let want =
                ((idx.len() as f64) * self.cfg.rdfs.reduced_train_fraction).ceil() as usize;
            let mut rng = SplitMix64::new(derive(
                self.cfg.seed,
                "reduced-train",
                class.index() as u64,
            ));
            let chosen = rng.sample_indices(idx.len(), want.min(idx.len()));
            picked.extend(chosen.into_iter().map(|j| idx[j]));
        }
        picked.sort_unstable();
        picked
    }

    pub fn ensure_features(&self, task: Task, det: &CnnDetector, dataset: &Dataset) -> Result<FeatureSets> {
        let digest = file_digest(&self.model_path(task))?;
        let dir = self.features_dir(task);
        let load = |name: &str| -> Result<Option<FeatureMatrix>> {
            Ok(load_features(&dir.join(name), digest)?.map(|(m, _)| m))
        };

        let reduced_train = match load("reduced_train.fbc")? {
            Some(m) => m,
            None => {
                let idx = self.reduced_train_indices(dataset);
                let patches: Vec<(&GrayImage, Label)> = idx
                    .iter()
                    .map(|&i| {
                        let p = &dataset.train.patches()[i];
                        (&p.image, p.label)
                    })
                    .collect();
                let m = self.extract_features(det, &patches)?;
                save_features(&dir.join("reduced_train.fbc"), &m, None, digest)?;
                m
            }
        };
        let mut sets = Vec::new();
        for (name, split) in [("val.fbc", Split::Val), ("test.fbc", Split::Test)] {
            let m = match load(name)? {
                Some(m) => m,
                None => {
                    let patches: Vec<(&GrayImage, Label)> =
                        dataset.split(split).iter().map(|p| (&p.image, p.label)).collect();
                    let m = self.extract_features(det, &patches)?;
                    save_features(&dir.join(name), &m, None, digest)?;
                    m
                }
            };
            sets.push(m);
        }
        let mut it = sets.into_iter();
        Ok(FeatureSets { reduced_train, val: it.next().unwrap(), test: it.next().unwrap() })
    }

    // ---- attacks ----

    /// H1 test patches the detector classifies as H1, up to the configured
    /// count; these are the attack targets.
    pub fn select_attack_targets<'d>(
        &self,
        det: &CnnDetector,
        dataset: &'d Dataset,
    ) -> Result<Vec<&'d GrayImage>> {
        let candidates: Vec<&GrayImage> = dataset
            .test
            .iter()
            .filter(|p| p.label == Label::Manipulated)
            .map(|p| &p.image)
            .collect();
        let probs = det.predict_batch(&candidates)?;
        Ok(candidates
            .into_iter()
            .zip(probs)
            .filter(|(_, (p0, p1))| p1 > p0)
            .map(|(img, _)| img)
            .take(self.cfg.attacks.count)
            .collect())
    }

    /// Runs (or loads) every enabled attack, returning per-attack summaries.
    pub fn ensure_attacks(
        &self,
        task: Task,
        det: &CnnDetector,
        dataset: &Dataset,
    ) -> Result<Vec<(AttackKind, BatchSummary)>> {
        let dir = self.attacks_dir(task);
        let mut out = Vec::new();
        let mut targets: Option<Vec<&GrayImage>> = None;
        for &kind in &self.cfg.attacks.enabled {
            let name = kind.to_string();
            let summary_path = dir.join(format!("summary_{name}.json"));
            if dir.join(format!("{name}.jsonl")).exists() && summary_path.exists() {
                let summary: BatchSummary =
                    serde_json::from_slice(&std::fs::read(&summary_path)?)?;
                out.push((kind, summary));
                continue;
            }
            if targets.is_none() {
                targets = Some(self.select_attack_targets(det, dataset)?);
            }
            let imgs: Vec<GrayImage> =
                targets.as_ref().unwrap().iter().map(|&i| i.clone()).collect();
            let cfg = self.cfg.attack_config(kind, task);
            let (outcomes, summary) = evaluate_attack_batch(det, &imgs, &cfg)?;
            write_cache(&dir, &name, &outcomes)?;
            std::fs::write(&summary_path, serde_json::to_vec_pretty(&summary)?)?;
            out.push((kind, summary));
        }
        Ok(out)
    }

    /// Features of the cached adversarial patches that fooled the CNN.
    /// Transfer evaluation sees only successful examples.
    pub fn ensure_adversarial_features(
        &self,
        task: Task,
        det: &CnnDetector,
    ) -> Result<BTreeMap<AttackKind, AdversarialFeatures>> {
        let digest = file_digest(&self.model_path(task))?;
        let dir = self.features_dir(task);
        let cache_dir = self.attacks_dir(task);
        let mut map = BTreeMap::new();
        for &kind in &self.cfg.attacks.enabled {
            let name = format!("adv_{kind}.fbc");
            if let Some((m, Some(idx))) = load_features(&dir.join(&name), digest)? {
                map.insert(kind, AdversarialFeatures { features: m, patch_indices: idx });
                continue;
            }
            let cached = read_cache(&cache_dir, &kind.to_string())?;
            let mut inputs = Vec::new();
            let mut indices = Vec::new();
            for entry in &cached {
                if let Ok(o) = &entry.outcome {
                    if o.success {
                        inputs.extend_from_slice(&o.adversarial);
                        indices.push(entry.patch_index);
                    }
                }
            }
            let mut m = FeatureMatrix::new(det.n_features());
            if !inputs.is_empty() {
                for row in det.features_model_batch(&inputs)? {
                    m.push_row(&row, Label::Manipulated)?;
                }
            }
            save_features(&dir.join(&name), &m, Some(&indices), digest)?;
            map.insert(kind, AdversarialFeatures { features: m, patch_indices: indices });
        }
        Ok(map)
    }

    // ---- the K-sweep ----

    /// K grid actually used: configured values capped at N (oversized
    /// entries drop, as the published sweep drops K=600 on the smaller
    /// net), plus the full set when configured.
    pub fn resolve_ks(&self, n: usize) -> Vec<(usize, bool)> {
        let mut ks: Vec<usize> =
            self.cfg.plan.k_list.iter().copied().filter(|&k| k < n).collect();
        ks.sort_unstable();
        ks.dedup();
        let mut out: Vec<(usize, bool)> = ks.into_iter().map(|k| (k, false)).collect();
        if self.cfg.plan.include_full {
            out.push((n, true));
        }
        out
    }

    /// Every (kind, K, repetition) cell of the plan, in deterministic order.
    pub fn cell_list(&self, n: usize) -> Vec<SweepCell> {
        let mut cells = Vec::new();
        for &(k, full) in &self.resolve_ks(n) {
            for rep in 0..self.cfg.plan.repetitions {
                for &kind in &self.cfg.plan.detector_kinds {
                    cells.push(SweepCell { kind, k, full, rep });
                }
            }
        }
        cells
    }

    fn cell_path(&self, task: Task, cell: &SweepCell) -> PathBuf {
        self.rdfs_dir(task).join(format!("{}_k{}_r{}.rdd", cell.kind, cell.k, cell.rep))
    }

    /// Trains (and saves) the reduced detector of one cell.
    pub fn train_cell(
        &self,
        det: &CnnDetector,
        feats: &FeatureSets,
        cell: &SweepCell,
    ) -> Result<ReducedDetector> {
        let n = det.n_features();
        let key = derive_key(self.cfg.seed, cell.k, cell.rep);
        let subset = select_features(key, n, cell.k)?;
        Ok(match cell.kind {
            ReducedKind::Fc => {
                let mut cfg = self.cfg.rdfs.fc.clone();
                cfg.seed =
                    derive(derive(self.cfg.seed, "fc-cell", cell.k as u64), "rep", cell.rep as u64);
                train_reduced_fc(
                    &feats.reduced_train,
                    &feats.val,
                    &subset,
                    &key,
                    &det.arch.head_hidden(),
                    &cfg,
                )?
                .0
            }
            ReducedKind::Svm => train_svm(
                &feats.reduced_train,
                &subset,
                &key,
                self.cfg.rdfs.kernel,
                self.cfg.rdfs.cv_folds,
                &self.cfg.rdfs.grid,
                derive(derive(self.cfg.seed, "svm-cell", cell.k as u64), "rep", cell.rep as u64),
            )?,
        })
    }

    /// Trains every cell of the K-sweep and stores the detectors; cells
    /// whose file already exists are kept (training is deterministic, so
    /// the bytes would be identical). Returns how many were trained.
    pub fn train_reduced_all(&self, task: Task, det: &CnnDetector, feats: &FeatureSets) -> Result<usize> {
        std::fs::create_dir_all(self.rdfs_dir(task))?;
        let cells = self.cell_list(det.n_features());
        let trained: Vec<usize> = cells
            .par_iter()
            .map(|cell| {
                let path = self.cell_path(task, cell);
                if path.exists() {
                    return Ok(0usize);
                }
                let reduced = self.train_cell(det, feats, cell)?;
                reduced.save(&path)?;
                Ok(1)
            })
            .collect::<Result<_>>()?;
        Ok(trained.into_iter().sum())
    }

    /// Loads every stored cell detector and evaluates it on clean test
    /// features and on each attack's cached adversarial features.
    pub fn evaluate_reduced(
        &self,
        task: Task,
        det: &CnnDetector,
        feats: &FeatureSets,
        adv: &BTreeMap<AttackKind, AdversarialFeatures>,
    ) -> Result<Vec<CellRow>> {
        let cells = self.cell_list(det.n_features());
        let cell_rows: Vec<Vec<CellRow>> = cells
            .par_iter()
            .map(|cell| {
                let path = self.cell_path(task, cell);
                if !path.exists() {
                    return Err(Error::MissingPrerequisite(format!(
                        "reduced detector {} not found (run `train-rdfs` first)",
                        path.display()
                    )));
                }
                let reduced = ReducedDetector::load(&path)?;
                let mut rows = Vec::new();
                rows.push(CellRow {
                    task,
                    arch: self.cfg.architecture.id,
                    kind: cell.kind,
                    k: cell.k,
                    full: cell.full,
                    condition: Condition::NoAttack,
                    rep: cell.rep,
                    accuracy: clean_accuracy(&reduced, &feats.test)?,
                    evaluated: feats.test.rows(),
                });
                for (&attack, a) in adv {
                    rows.push(CellRow {
                        task,
                        arch: self.cfg.architecture.id,
                        kind: cell.kind,
                        k: cell.k,
                        full: cell.full,
                        condition: Condition::Attack(attack),
                        rep: cell.rep,
                        accuracy: attack_accuracy(&reduced, &a.features)?,
                        evaluated: a.features.rows(),
                    });
                }
                Ok(rows)
            })
            .collect::<Result<_>>()?;
        Ok(cell_rows.into_iter().flatten().collect())
    }

    pub fn write_rows(&self, rows: &[CellRow]) -> Result<()> {
        let path = self.results_path();
        std::fs::create_dir_all(path.parent().unwrap())?;
        let mut buf = Vec::new();
        for row in rows {
            buf.extend(serde_json::to_vec(row)?);
            buf.push(b'\n');
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn read_rows(&self) -> Result<Vec<CellRow>> {
        let path = self.results_path();
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "results {} not found (run `evaluate` first)",
                path.display()
            )));
        }
        let text = std::fs::read_to_string(path)?;
        let mut rows = Vec::new();
        for line in text.lines() {
            if !line.trim().is_empty() {
                rows.push(serde_json::from_str(line)?);
            }
        }
        Ok(rows)
    }
}

/// Accuracy of a reduced detector on labeled clean features.
pub fn clean_accuracy(det: &ReducedDetector, m: &FeatureMatrix) -> Result<f64> {
    let mut correct = 0usize;
    for i in 0..m.rows() {
        if det.predict(m.row(i))?.label.index() == m.label(i) {
            correct += 1;
        }
    }
    Ok(correct as f64 / m.rows().max(1) as f64)
}

/// Accuracy under attack: the fraction of (manipulated) adversarial
/// examples still detected as manipulated. Empty sets count as accuracy 1
/// (no successful attack transferred anything).
pub fn attack_accuracy(det: &ReducedDetector, m: &FeatureMatrix) -> Result<f64> {
    if m.rows() == 0 {
        return Ok(1.0);
    }
    let mut correct = 0usize;
    for i in 0..m.rows() {
        if det.predict(m.row(i))?.label == Label::Manipulated {
            correct += 1;
        }
    }
    Ok(correct as f64 / m.rows() as f64)
}

/// Per-task stage results from a full experiment run.
pub struct ExperimentOutput {
    pub rows: Vec<CellRow>,
    pub attack_summaries: BTreeMap<(Task, AttackKind), BatchSummary>,
    pub report: ReportFiles,
}

/// Runs every stage for every planned task, building missing artifacts on
/// demand, and writes rows, CSV tables and the summary.
pub fn run_experiment(cfg: &Config) -> Result<ExperimentOutput> {
    let ws = Workspace::new(cfg);
    let mut all_rows = Vec::new();
    let mut summaries = BTreeMap::new();
    for &task in &cfg.plan.tasks {
        let dataset = ws.ensure_dataset(task)?;
        let det = ws.ensure_model(task, &dataset)?;
        let feats = ws.ensure_features(task, &det, &dataset)?;
        for (kind, summary) in ws.ensure_attacks(task, &det, &dataset)? {
            summaries.insert((task, kind), summary);
        }
        let adv = ws.ensure_adversarial_features(task, &det)?;
        ws.train_reduced_all(task, &det, &feats)?;
        let rows = ws.evaluate_reduced(task, &det, &feats, &adv)?;
        all_rows.extend(rows);
    }
    ws.write_rows(&all_rows)?;
    let report = aggregate_report(&all_rows, &ws.reports_dir())?;
    Ok(ExperimentOutput { rows: all_rows, attack_summaries: summaries, report })
}

/// Digest of the experiment plan knobs that invalidate cached artifacts.
pub fn plan_digest(cfg: &Config) -> u64 {
    fnv1a64(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}
