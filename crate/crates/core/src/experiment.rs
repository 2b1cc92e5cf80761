//! End-to-end experiment: synthesize, defend, aggregate, train, evaluate.
//!
//! Every stage has an in-memory form and a file form. The file forms share
//! one output directory:
//!
//! ```text
//! <out>/dataset/traces/tab-<session>-<tab>.txt   single-tab sources
//! <out>/dataset/traces/session-<session>.txt     merged sessions
//! <out>/dataset/manifest.json                    sources and their labels
//! <out>/dataset/sessions.json                    labels, offsets, split
//! <out>/defended/...                             same, after the defense
//! <out>/features.f32 (+ .json sidecar)
//! <out>/model.json (+ .bin), <out>/history.csv
//! <out>/report.json, <out>/report.txt, <out>/run.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    aggregate_features, read_feature_dump, write_feature_dump, AggregationConfig, FeatureVector,
};
use crate::defenses::{apply_defense, DefenseConfig};
use crate::error::{ExperimentError, Stage};
use crate::metrics::{evaluate, EvalRecord, Report};
use crate::model::{
    train, AttentionConfig, FeatureScaling, History, LabeledSet, LocalProfilerConfig, ModelConfig,
    TrainConfig, TransWfModel,
};
use crate::seed::{child_rng, child_seed};
use crate::synth::{
    build_dataset, generate_site_model, generate_unmonitored_model, Dataset, DatasetSpec,
    MixConfig, TabMode, World,
};
use crate::tensor::optim::AdamConfig;
use crate::trace::{
    parse_trace, write_trace, DatasetManifest, LabelVector, ManifestEntry, Session, SiteLabel,
    Trace,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub patience: usize,
    pub select_k: usize,
    pub split: SplitFractions,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.adam.lr,
            patience: t.patience,
            select_k: t.select_k,
            split: SplitFractions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub theta: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            ks: vec![1, 2, 3],
            theta: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            out: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Monitored sites N.
    pub n_sites: usize,
    /// Size of the open-world background pool.
    pub n_unmonitored: usize,
    pub world: World,
    pub tabs: TabMode,
    pub sessions: usize,
    pub mix: MixConfig,
    pub defense: Option<DefenseConfig>,
    pub aggregation: AggregationConfig,
    pub profiler: LocalProfilerConfig,
    pub attention: AttentionConfig,
    pub scaling: FeatureScaling,
    pub ensemble: bool,
    pub training: TrainingSection,
    pub eval: EvalSection,
    pub paths: PathsSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_sites: 20,
            n_unmonitored: 200,
            world: World::Closed,
            tabs: TabMode::Fixed(2),
            sessions: 1000,
            mix: MixConfig::default(),
            defense: None,
            aggregation: AggregationConfig::default(),
            profiler: LocalProfilerConfig::default(),
            attention: AttentionConfig::default(),
            scaling: FeatureScaling::default(),
            ensemble: false,
            training: TrainingSection::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            feature_len: self.aggregation.feature_len,
            n_labels: self.n_sites + 1,
            profiler: self.profiler.clone(),
            attention: self.attention.clone(),
            scaling: self.scaling,
            ensemble: self.ensemble,
            ..ModelConfig::default()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.training;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: AdamConfig {
                lr: t.lr,
                ..AdamConfig::default()
            },
            patience: t.patience,
            select_k: t.select_k,
        }
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            world: self.world,
            tabs: self.tabs,
            count: self.sessions,
        }
    }

    /// Checks everything that can be checked before any work is done.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        let s = &self.training.split;
        if [s.train, s.val, s.test]
            .iter()
            .any(|f| !(0.0..=1.0).contains(f))
            || (s.train + s.val + s.test - 1.0).abs() > 1e-9
        {
            return bad(format!(
                "split fractions {} + {} + {} must sum to 1",
                s.train, s.val, s.test
            ));
        }
        if self.n_sites == 0 || self.sessions == 0 {
            return bad("n_sites and sessions must be positive".into());
        }
        if self.world == World::Open && self.n_unmonitored == 0 {
            return bad("open world needs n_unmonitored > 0".into());
        }
        if let TabMode::Fixed(k) = self.tabs {
            let needed = if self.world == World::Open {
                k.saturating_sub(1)
            } else {
                k
            };
            if k == 0 || needed > self.n_sites {
                return bad(format!(
                    "{k}-tab sessions need {needed} distinct sites, have {}",
                    self.n_sites
                ));
            }
        }
        self.mix
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        if let Some(d) = &self.defense {
            d.validate()
                .map_err(|e| ExperimentError::Config(e.to_string()))?;
        }
        self.aggregation
            .validate()
            .map_err(ExperimentError::Config)?;
        self.model_config()
            .validate()
            .map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.training.epochs == 0 || self.training.batch_size == 0 || !(self.training.lr > 0.0) {
            return bad("epochs, batch_size and lr must be positive".into());
        }
        if self.eval.ks.is_empty() || self.eval.ks.iter().any(|&k| k == 0 || k > self.n_sites + 1) {
            return bad(format!(
                "eval ks {:?} must lie in 1..={}",
                self.eval.ks,
                self.n_sites + 1
            ));
        }
        if !(self.eval.theta > 0.0 && self.eval.theta < 1.0) {
            return bad(format!("theta {} outside (0, 1)", self.eval.theta));
        }
        Ok(())
    }
}

/// Sessions with their split assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset {
    pub dataset: Dataset,
    pub splits: Vec<Split>,
}

/// Shuffles session indices with the `("split", 0)` stream and cuts them by
/// the configured fractions.
pub fn assign_splits(n: usize, fractions: &SplitFractions, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut child_rng(seed, "split", 0));
    let n_train = (fractions.train * n as f64).round() as usize;
    let n_val = ((fractions.val * n as f64).round() as usize).min(n - n_train.min(n));
    let mut splits = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    splits
}

pub fn synthesize(cfg: &ExperimentConfig) -> Result<SplitDataset, ExperimentError> {
    let site_seed = child_seed(cfg.seed, "sites", 0);
    let monitored: Vec<_> = (0..cfg.n_sites)
        .map(|i| generate_site_model(i, site_seed))
        .collect();
    let unmonitored: Vec<_> = match cfg.world {
        World::Open => (0..cfg.n_unmonitored)
            .map(|i| generate_unmonitored_model(i, site_seed))
            .collect(),
        World::Closed => Vec::new(),
    };
    let dataset = build_dataset(
        &monitored,
        &unmonitored,
        &cfg.dataset_spec(),
        &cfg.mix,
        child_seed(cfg.seed, "dataset", 0),
    )
    .map_err(|e| ExperimentError::data(Stage::Synth, e))?;
    let splits = assign_splits(dataset.sessions.len(), &cfg.training.split, cfg.seed);
    Ok(SplitDataset { dataset, splits })
}

/// Applies the defense to every session, each on its own `("defense", i)`
/// stream. No defense returns the sessions unchanged.
pub fn defend(
    sessions: &[Session],
    defense: Option<&DefenseConfig>,
    seed: u64,
) -> Result<Vec<Session>, ExperimentError> {
    let Some(d) = defense else {
        return Ok(sessions.to_vec());
    };
    sessions
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let trace = apply_defense(&s.trace, d, &mut child_rng(seed, "defense", i as u64))
                .map_err(|e| ExperimentError::data(Stage::Defend, format!("session {i}: {e}")))?;
            Ok(Session {
                trace,
                defense: Some(d.name().to_string()),
                ..s.clone()
            })
        })
        .collect()
}

pub fn aggregate(sessions: &[Session], cfg: &AggregationConfig) -> Vec<FeatureVector> {
    sessions
        .par_iter()
        .map(|s| aggregate_features(&s.trace, cfg))
        .collect()
}

fn subset(
    features: &[FeatureVector],
    labels: &[LabelVector],
    splits: &[Split],
    which: Split,
) -> LabeledSet {
    let idx: Vec<usize> = (0..splits.len()).filter(|&i| splits[i] == which).collect();
    LabeledSet {
        features: idx.iter().map(|&i| features[i].clone()).collect(),
        labels: idx.iter().map(|&i| labels[i].clone()).collect(),
    }
}

pub fn fit(
    features: &[FeatureVector],
    labels: &[LabelVector],
    splits: &[Split],
    cfg: &ExperimentConfig,
) -> Result<(TransWfModel, History), ExperimentError> {
    let train_set = subset(features, labels, splits, Split::Train);
    let val_set = subset(features, labels, splits, Split::Val);
    let mut rng = child_rng(cfg.seed, "train", 0);
    train(
        &train_set,
        &val_set,
        &cfg.model_config(),
        &cfg.train_config(),
        &mut rng,
    )
    .map_err(|e| ExperimentError::training(Stage::Train, e))
}

pub fn evaluate_model(
    model: &TransWfModel,
    features: &[FeatureVector],
    labels: &[LabelVector],
    splits: &[Split],
    eval: &EvalSection,
) -> Result<Report, ExperimentError> {
    let test = subset(features, labels, splits, Split::Test);
    let preds = model
        .predict(&test.features)
        .map_err(|e| ExperimentError::training(Stage::Eval, e))?;
    let records = test
        .labels
        .into_iter()
        .zip(preds)
        .map(|(y, p)| EvalRecord::new(y, p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| ExperimentError::data(Stage::Eval, e))?;
    evaluate(&records, &eval.ks, eval.theta).map_err(|e| ExperimentError::data(Stage::Eval, e))
}

/// One entry of `sessions.json`. Paths are relative to the dataset root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: usize,
    pub trace: String,
    pub tabs: Vec<String>,
    pub labels: LabelVector,
    pub tab_count: usize,
    pub tab_offsets: Vec<f64>,
    pub defense: Option<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionsFile {
    pub n_sites: usize,
    pub sessions: Vec<SessionRecord>,
}

fn io_err(stage: Stage, path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |e| ExperimentError::data(stage, format!("{}: {e}", path.display()))
}

fn write_json(stage: Stage, path: &Path, value: &impl Serialize) -> Result<(), ExperimentError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| ExperimentError::data(stage, e))?;
    fs::write(path, text + "\n").map_err(io_err(stage, path))
}

fn read_json<T: for<'de> Deserialize<'de>>(
    stage: Stage,
    path: &Path,
) -> Result<T, ExperimentError> {
    let text = fs::read_to_string(path).map_err(io_err(stage, path))?;
    serde_json::from_str(&text)
        .map_err(|e| ExperimentError::data(stage, format!("{}: {e}", path.display())))
}

/// Writes the layout described in the module docs under `dir`. Single-tab
/// sources are written only when `sources` is non-empty.
pub fn write_dataset(
    stage: Stage,
    dir: &Path,
    sessions: &[Session],
    sources: &[Vec<Trace>],
    splits: &[Split],
    n_sites: usize,
) -> Result<(), ExperimentError> {
    let traces = dir.join("traces");
    fs::create_dir_all(&traces).map_err(io_err(stage, &traces))?;
    let mut records = Vec::with_capacity(sessions.len());
    let mut entries = Vec::new();
    for (i, s) in sessions.iter().enumerate() {
        let rel = format!("traces/session-{i}.txt");
        fs::write(dir.join(&rel), write_trace(&s.trace)).map_err(io_err(stage, dir))?;
        let mut tabs = Vec::new();
        for (j, tab) in sources
            .get(i)
            .map(Vec::as_slice)
            .unwrap_or(&[])
            .iter()
            .enumerate()
        {
            let tab_rel = format!("traces/tab-{i}-{j}.txt");
            fs::write(dir.join(&tab_rel), write_trace(tab)).map_err(io_err(stage, dir))?;
            entries.push(ManifestEntry {
                path: tab_rel.clone(),
                label: tab.label,
            });
            tabs.push(tab_rel);
        }
        records.push(SessionRecord {
            id: i,
            trace: rel,
            tabs,
            labels: s.labels.clone(),
            tab_count: s.tab_count,
            tab_offsets: s.tab_offsets.clone(),
            defense: s.defense.clone(),
            split: splits[i],
        });
    }
    if !entries.is_empty() {
        write_json(
            stage,
            &dir.join("manifest.json"),
            &DatasetManifest { n_sites, entries },
        )?;
    }
    write_json(
        stage,
        &dir.join("sessions.json"),
        &SessionsFile {
            n_sites,
            sessions: records,
        },
    )
}

/// Reads the merged sessions of a dataset directory.
pub fn read_dataset(
    stage: Stage,
    dir: &Path,
) -> Result<(Vec<Session>, Vec<Split>, usize), ExperimentError> {
    let file: SessionsFile = read_json(stage, &dir.join("sessions.json"))?;
    let loaded: Vec<(Session, Split)> = file
        .sessions
        .par_iter()
        .map(|r| {
            let path = dir.join(&r.trace);
            let text = fs::read_to_string(&path).map_err(io_err(stage, &path))?;
            let mut trace = parse_trace(&text)
                .map_err(|e| ExperimentError::data(stage, format!("{}: {e}", path.display())))?;
            trace.label = SiteLabel::Unmonitored;
            let session = Session {
                trace,
                labels: r.labels.clone(),
                tab_count: r.tab_count,
                tab_offsets: r.tab_offsets.clone(),
                defense: r.defense.clone(),
            };
            Ok((session, r.split))
        })
        .collect::<Result<_, ExperimentError>>()?;
    let (sessions, splits) = loaded.into_iter().unzip();
    Ok((sessions, splits, file.n_sites))
}

/// Files of one output directory.
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }
    pub fn defended(&self) -> PathBuf {
        self.root.join("defended")
    }
    pub fn features(&self) -> PathBuf {
        self.root.join("features.f32")
    }
    pub fn model(&self) -> PathBuf {
        self.root.join("model.json")
    }
    pub fn history(&self) -> PathBuf {
        self.root.join("history.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn report_text(&self) -> PathBuf {
        self.root.join("report.txt")
    }
    pub fn run_record(&self) -> PathBuf {
        self.root.join("run.json")
    }
}

pub fn stage_synth(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    let p = RunPaths::new(&cfg.paths.out);
    let data = synthesize(cfg)?;
    let d = &data.dataset;
    write_dataset(
        Stage::Synth,
        &p.dataset(),
        &d.sessions,
        &d.sources,
        &data.splits,
        d.n_sites,
    )
}

pub fn stage_defend(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    let p = RunPaths::new(&cfg.paths.out);
    let (sessions, splits, n_sites) = read_dataset(Stage::Defend, &p.dataset())?;
    let defended = defend(&sessions, cfg.defense.as_ref(), cfg.seed)?;
    write_dataset(
        Stage::Defend,
        &p.defended(),
        &defended,
        &[],
        &splits,
        n_sites,
    )
}

pub fn stage_aggregate(cfg: &ExperimentConfig) -> Result<(), ExperimentError> {
    let p = RunPaths::new(&cfg.paths.out);
    let (sessions, _, _) = read_dataset(Stage::Aggregate, &p.defended())?;
    let rows = aggregate(&sessions, &cfg.aggregation);
    let path = p.features();
    write_feature_dump(&path, &rows, &cfg.aggregation).map_err(io_err(Stage::Aggregate, &path))
}

fn load_features(
    stage: Stage,
    p: &RunPaths,
) -> Result<(Vec<FeatureVector>, Vec<LabelVector>, Vec<Split>), ExperimentError> {
    let path = p.features();
    let (rows, _) = read_feature_dump(&path).map_err(io_err(stage, &path))?;
    let file: SessionsFile = read_json(stage, &p.defended().join("sessions.json"))?;
    if file.sessions.len() != rows.len() {
        return Err(ExperimentError::data(
            stage,
            format!(
                "{} feature rows but {} sessions",
                rows.len(),
                file.sessions.len()
            ),
        ));
    }
    let (labels, splits) = file
        .sessions
        .into_iter()
        .map(|r| (r.labels, r.split))
        .unzip();
    Ok((rows, labels, splits))
}

pub fn stage_train(cfg: &ExperimentConfig) -> Result<History, ExperimentError> {
    let p = RunPaths::new(&cfg.paths.out);
    let (rows, labels, splits) = load_features(Stage::Train, &p)?;
    let (model, history) = fit(&rows, &labels, &splits, cfg)?;
    model
        .save(&p.model())
        .map_err(|e| ExperimentError::training(Stage::Train, e))?;
    let path = p.history();
    fs::write(&path, history.to_csv()).map_err(io_err(Stage::Train, &path))?;
    Ok(history)
}

pub fn stage_eval(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    let p = RunPaths::new(&cfg.paths.out);
    let (rows, labels, splits) = load_features(Stage::Eval, &p)?;
    let model =
        TransWfModel::load(&p.model()).map_err(|e| ExperimentError::data(Stage::Eval, e))?;
    let report = evaluate_model(&model, &rows, &labels, &splits, &cfg.eval)?;
    let path = p.report();
    fs::write(&path, report.to_json() + "\n").map_err(io_err(Stage::Eval, &path))?;
    Ok(report)
}

/// Renders `report.json` as `report.txt` and returns the text.
pub fn stage_report(cfg: &ExperimentConfig) -> Result<String, ExperimentError> {
    let p = RunPaths::new(&cfg.paths.out);
    let report: Report = read_json(Stage::Report, &p.report())?;
    let text = report.to_string();
    let path = p.report_text();
    fs::write(&path, text.clone() + "\n").map_err(io_err(Stage::Report, &path))?;
    Ok(text)
}

#[derive(Serialize)]
struct RunRecord<'a> {
    version: &'static str,
    config: &'a ExperimentConfig,
}

/// All stages in order, through the files. Writes `run.json` first.
pub fn run(cfg: &ExperimentConfig) -> Result<Report, ExperimentError> {
    cfg.validate()?;
    let p = RunPaths::new(&cfg.paths.out);
    fs::create_dir_all(&p.root).map_err(io_err(Stage::Config, &p.root))?;
    write_json(
        Stage::Config,
        &p.run_record(),
        &RunRecord {
            version: env!("CARGO_PKG_VERSION"),
            config: cfg,
        },
    )?;
    stage_synth(cfg)?;
    stage_defend(cfg)?;
    stage_aggregate(cfg)?;
    stage_train(cfg)?;
    let report = stage_eval(cfg)?;
    stage_report(cfg)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(out: &Path) -> ExperimentConfig {
        ExperimentConfig {
            n_sites: 3,
            sessions: 24,
            aggregation: AggregationConfig {
                interval: 0.5,
                feature_len: 64,
            },
            profiler: LocalProfilerConfig {
                blocks: 1,
                kernel: 3,
                pool_window: 4,
                pool_stride: 4,
                channels: 4,
                dropout: 0.0,
            },
            attention: AttentionConfig {
                heads: 1,
                layers: 1,
                m: 4,
                ..AttentionConfig::default()
            },
            training: TrainingSection {
                epochs: 1,
                batch_size: 8,
                ..TrainingSection::default()
            },
            eval: EvalSection {
                ks: vec![1, 2],
                theta: 0.5,
            },
            paths: PathsSection {
                out: out.to_path_buf(),
            },
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn split_fractions_must_sum_to_one() {
        let mut cfg = ExperimentConfig::default();
        cfg.training.split = SplitFractions {
            train: 0.8,
            val: 0.2,
            test: 0.2,
        };
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().starts_with("[config]"));
    }

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_config_errors() {
        let err = ExperimentConfig::from_json(r#"{"n_site": 3}"#).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn splits_follow_fractions() {
        let s = assign_splits(100, &SplitFractions::default(), 3);
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 80);
        assert_eq!(s.iter().filter(|&&x| x == Split::Val).count(), 10);
        assert_eq!(s, assign_splits(100, &SplitFractions::default(), 3));
    }

    #[test]
    fn dataset_round_trips_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let data = synthesize(&cfg).unwrap();
        let d = &data.dataset;
        write_dataset(
            Stage::Synth,
            dir.path(),
            &d.sessions,
            &d.sources,
            &data.splits,
            d.n_sites,
        )
        .unwrap();
        let (sessions, splits, n) = read_dataset(Stage::Defend, dir.path()).unwrap();
        assert_eq!(n, 3);
        assert_eq!(splits, data.splits);
        for (a, b) in sessions.iter().zip(&d.sessions) {
            assert_eq!(a.trace.events(), b.trace.events());
            assert_eq!(a.labels, b.labels);
        }
        let manifest: DatasetManifest =
            read_json(Stage::Synth, &dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest.entries.len(), 24 * 2);
    }

    #[test]
    fn missing_input_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = stage_train(&small(dir.path())).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().starts_with("[train]"));
    }

    #[test]
    fn run_writes_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let report = run(&cfg).unwrap();
        let p = RunPaths::new(dir.path());
        for f in [
            p.run_record(),
            p.features(),
            p.model(),
            p.history(),
            p.report(),
            p.report_text(),
        ] {
            assert!(f.exists(), "{} missing", f.display());
        }
        assert!(report.map_at_k.contains_key(&2));
    }
}
