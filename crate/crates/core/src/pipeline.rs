//! Run orchestration: configuration with environment overrides, chained
//! stage hashing, artifact caching, and atomic artifact writes.
//!
//! A run is five stages: load -> discover -> estimate -> train -> evaluate.
//! Each stage's hash folds its own settings into the upstream hash, so any
//! config edit invalidates exactly the stages it can influence. A stage
//! whose hash matches the manifest on disk is reloaded from its artifacts
//! instead of recomputed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::discovery::{
    build_dataset, graph_from_json, graph_to_json, graph_to_text, greedy_search, BinaryDataset,
    CausalGraph, SearchConfig,
};
use crate::effects::{
    bin_effects, build_effect_matrices, cooccurrence_rates, matrix_to_csv, EdgeTypeMap,
    EffectMatrix,
};
use crate::ehr::{
    load_cohort, load_ddi_csv, split_cohort, CohortSplits, PatientCohort, SplitRatios,
};
use crate::error::{Error, Result};
use crate::model::{checkpoint_from_json, checkpoint_to_json, ModelDims, ModelParameters};
use crate::recommender::{predictions_to_jsonl, recommend, RecommendArtifacts, RecommendOptions};
use crate::rng::fnv1a;
use crate::train::{
    evaluate, train, EvalContext, LossConfig, MetricsReport,
    Mode, ModelArtifacts, TrainOutcome,
};

/// Whole-run configuration. Every key can be overridden by an environment
/// variable named `MEDREC_<UPPERCASE_KEY>`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub cohort: PathBuf,
    /// Interaction pair CSV; absent means no known interactions.
    pub ddi: Option<PathBuf>,
    pub out_dir: PathBuf,

    pub beta: f64,
    pub gamma: f64,
    pub kp: f64,
    pub threshold: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_visits: usize,
    pub seed: u64,

    pub max_parents: usize,
    /// Top-k mutual-information prescreen; `null` admits every pair.
    pub prescreen_k: Option<usize>,
    /// Re-run structure search restricted to each distinct visit and merge
    /// the per-visit edges by vote, instead of one global search.
    pub rediscover_per_visit: bool,

    pub dim: usize,
    pub rgcn_layers: usize,
    pub n_relations: usize,

    pub mode: Mode,
    pub eval_rounds: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        let search = SearchConfig::default();
        RunConfig {
            cohort: PathBuf::from("cohort.jsonl"),
            ddi: None,
            out_dir: PathBuf::from("artifacts"),
            beta: loss.beta,
            gamma: loss.gamma,
            kp: loss.kp,
            threshold: loss.threshold,
            learning_rate: loss.learning_rate,
            weight_decay: loss.weight_decay,
            dropout: loss.dropout,
            epochs: loss.epochs,
            batch_visits: loss.batch_visits,
            seed: loss.seed,
            max_parents: search.max_parents,
            prescreen_k: search.prescreen_k,
            rediscover_per_visit: false,
            dim: 64,
            rgcn_layers: 2,
            n_relations: 5,
            mode: Mode::Full,
            eval_rounds: 10,
        }
    }
}

const ENV_PREFIX: &str = "MEDREC_";

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            beta: self.beta,
            gamma: self.gamma,
            kp: self.kp,
            threshold: self.threshold,
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            dropout: self.dropout,
            epochs: self.epochs,
            batch_visits: self.batch_visits,
            seed: self.seed,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig { max_parents: self.max_parents, prescreen_k: self.prescreen_k }
    }

    /// Applies `MEDREC_*` overrides through an injectable lookup so tests
    /// need not mutate the process environment.
    pub fn apply_overrides(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
            raw.parse().map_err(|_| {
                Error::Config(format!("{ENV_PREFIX}{key} has unparseable value {raw:?}"))
            })
        }
        macro_rules! take {
            ($key:literal, $slot:expr, $conv:expr) => {
                if let Some(raw) = lookup(concat!("MEDREC_", $key)) {
                    $slot = $conv($key, raw.trim())?;
                }
            };
        }
        let path = |_: &str, raw: &str| -> Result<PathBuf> { Ok(PathBuf::from(raw)) };
        let opt_path = |_: &str, raw: &str| -> Result<Option<PathBuf>> {
            Ok(if raw.is_empty() { None } else { Some(PathBuf::from(raw)) })
        };
        let opt_k = |key: &str, raw: &str| -> Result<Option<usize>> {
            if raw.is_empty() || raw.eq_ignore_ascii_case("none") {
                Ok(None)
            } else {
                parse::<usize>(key, raw).map(Some)
            }
        };
        take!("COHORT", self.cohort, path);
        take!("DDI", self.ddi, opt_path);
        take!("OUT_DIR", self.out_dir, path);
        take!("BETA", self.beta, parse);
        take!("GAMMA", self.gamma, parse);
        take!("KP", self.kp, parse);
        take!("THRESHOLD", self.threshold, parse);
        take!("LEARNING_RATE", self.learning_rate, parse);
        take!("WEIGHT_DECAY", self.weight_decay, parse);
        take!("DROPOUT", self.dropout, parse);
        take!("EPOCHS", self.epochs, parse);
        take!("BATCH_VISITS", self.batch_visits, parse);
        take!("SEED", self.seed, parse);
        take!("MAX_PARENTS", self.max_parents, parse);
        take!("PRESCREEN_K", self.prescreen_k, opt_k);
        take!("REDISCOVER_PER_VISIT", self.rediscover_per_visit, parse);
        take!("DIM", self.dim, parse);
        take!("RGCN_LAYERS", self.rgcn_layers, parse);
        take!("N_RELATIONS", self.n_relations, parse);
        take!("MODE", self.mode, parse);
        take!("EVAL_ROUNDS", self.eval_rounds, parse);
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<()> {
        self.apply_overrides(|key| std::env::var(key).ok())
    }

    /// Range checks plus existence of the referenced input files.
    pub fn validate(&self) -> Result<()> {
        self.loss_config().validate()?;
        if self.rgcn_layers == 0 {
            return Err(Error::Config("rgcn_layers must be at least 1".into()));
        }
        if self.n_relations < 2 {
            return Err(Error::Config(format!(
                "n_relations = {} but at least 2 edge types are required",
                self.n_relations
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.max_parents == 0 {
            return Err(Error::Config("max_parents must be at least 1".into()));
        }
        if self.eval_rounds == 0 {
            return Err(Error::Config("eval_rounds must be at least 1".into()));
        }
        if !self.cohort.is_file() {
            return Err(Error::Config(format!(
                "cohort file {} does not exist",
                self.cohort.display()
            )));
        }
        if let Some(ddi) = &self.ddi {
            if !ddi.is_file() {
                return Err(Error::Config(format!(
                    "interaction file {} does not exist",
                    ddi.display()
                )));
            }
        }
        Ok(())
    }
}

pub fn load_run_config(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    let mut config = RunConfig::from_json(&text)?;
    config.apply_env()?;
    config.validate()?;
    Ok(config)
}

/// Chained per-stage fingerprints (16 hex digits each).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageHashes {
    pub load: String,
    pub discover: String,
    pub estimate: String,
    pub train: String,
    pub evaluate: String,
}

fn hex(h: u64) -> String {
    format!("{h:016x}")
}

fn chain(upstream: &str, fields: &str) -> String {
    hex(fnv1a(format!("{upstream}|{fields}").as_bytes()))
}

pub fn stage_hashes(config: &RunConfig, cohort_bytes: &[u8], ddi_bytes: &[u8]) -> StageHashes {
    let inputs = hex(fnv1a(cohort_bytes)) + &hex(fnv1a(ddi_bytes));
    let load = chain(&inputs, &format!("seed={}", config.seed));
    let discover = chain(
        &load,
        &format!(
            "max_parents={};prescreen_k={:?};rediscover_per_visit={}",
            config.max_parents, config.prescreen_k, config.rediscover_per_visit
        ),
    );
    let estimate = chain(&discover, &format!("n_relations={}", config.n_relations));
    let train = chain(
        &estimate,
        &format!(
            "beta={};gamma={};kp={};threshold={};learning_rate={};weight_decay={};dropout={};epochs={};batch_visits={};dim={};rgcn_layers={};mode={}",
            config.beta,
            config.gamma,
            config.kp,
            config.threshold,
            config.learning_rate,
            config.weight_decay,
            config.dropout,
            config.epochs,
            config.batch_visits,
            config.dim,
            config.rgcn_layers,
            config.mode
        ),
    );
    let evaluate = chain(&train, &format!("eval_rounds={}", config.eval_rounds));
    StageHashes { load, discover, estimate, train, evaluate }
}

fn io_err(action: &str, path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{action} {}: {e}", path.display())))
}

/// Writes via a sibling temp file and rename, so a crash mid-write can
/// never leave a half-written artifact under the real name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |e: std::io::Error| io_err("writing", path, e);
    let name = path
        .file_name()
        .ok_or_else(|| Error::Usage(format!("{} has no file name", path.display())))?;
    let mut tmp_name = name.to_owned();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Default, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    stages: BTreeMap<String, String>,
}

impl Manifest {
    fn load(dir: &Path) -> Manifest {
        let path = dir.join("manifest.json");
        let fresh = Manifest { version: MANIFEST_VERSION, stages: BTreeMap::new() };
        let Ok(text) = fs::read_to_string(path) else { return fresh };
        match serde_json::from_str::<Manifest>(&text) {
            Ok(m) if m.version == MANIFEST_VERSION => m,
            _ => fresh,
        }
    }

    fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialization");
        write_atomic(&dir.join("manifest.json"), text.as_bytes())
    }

    fn matches(&self, stage: &str, hash: &str) -> bool {
        self.stages.get(stage).map(String::as_str) == Some(hash)
    }

    fn record(&mut self, stage: &str, hash: &str, dir: &Path) -> Result<()> {
        self.stages.insert(stage.to_string(), hash.to_string());
        self.save(dir)
    }
}

fn hash_comment(hash: &str) -> String {
    format!("# config_hash={hash}\n")
}

/// Envelope for the relation-typing artifact: both edge-type maps plus the
/// raw co-occurrence rates every ablation mode can be resolved from.
#[derive(Serialize, Deserialize)]
struct EstimateDoc {
    version: u32,
    config_hash: String,
    effect_bins: EdgeTypeMap,
    coocc_rates: EffectMatrix,
    coocc_bins: EdgeTypeMap,
}

const ESTIMATE_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct MetricsDoc {
    version: u32,
    config_hash: String,
    mode: Mode,
    report: MetricsReport,
}

const METRICS_FORMAT_VERSION: u32 = 1;

/// What a finished run hands back to the caller.
pub struct PipelineOutcome {
    pub hashes: StageHashes,
    /// Stages reloaded from artifacts instead of recomputed.
    pub reused: Vec<&'static str>,
    pub metrics: MetricsReport,
    /// Best validation epoch; `None` when training was reloaded from disk.
    pub best_epoch: Option<usize>,
    pub out_dir: PathBuf,
}

/// Runs discover -> estimate -> train -> evaluate with caching, leaving
/// all artifacts under `config.out_dir`. The error names its stage.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutcome> {
    config.validate()?;
    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| io_err("creating", &dir, e))?;

    let (cohort, splits, hashes) =
        load_stage(config).map_err(|e| e.in_stage("load"))?;
    let mut manifest = Manifest::load(&dir);
    let mut reused = Vec::new();

    let graph = match discover_stage(config, &cohort, &splits, &hashes, &mut manifest, &dir) {
        Ok((graph, was_cached)) => {
            if was_cached {
                reused.push("discover");
            }
            graph
        }
        Err(e) => return Err(e.in_stage("discover")),
    };

    let (artifacts, estimate_cached) =
        estimate_stage(config, &cohort, &splits, &graph, &hashes, &mut manifest, &dir)
            .map_err(|e| e.in_stage("estimate"))?;
    if estimate_cached {
        reused.push("estimate");
    }

    let (params, best_epoch, train_cached) =
        train_stage(config, &cohort, &splits, &artifacts, &hashes, &mut manifest, &dir)
            .map_err(|e| e.in_stage("train"))?;
    if train_cached {
        reused.push("train");
    }

    let (metrics, eval_cached) = evaluate_stage(
        config, &cohort, &splits, &artifacts, &params, &hashes, &mut manifest, &dir,
    )
    .map_err(|e| e.in_stage("evaluate"))?;
    if eval_cached {
        reused.push("evaluate");
    }

    Ok(PipelineOutcome {
        hashes,
        reused,
        metrics,
        best_epoch,
        out_dir: dir,
    })
}

fn load_stage(config: &RunConfig) -> Result<(PatientCohort, CohortSplits, StageHashes)> {
    let cohort_bytes =
        fs::read(&config.cohort).map_err(|e| io_err("reading", &config.cohort, e))?;
    let mut cohort = load_cohort(&config.cohort)?;
    let ddi_bytes = match &config.ddi {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| io_err("reading", path, e))?;
            cohort.ddi = load_ddi_csv(path, &cohort.medications)?;
            bytes
        }
        None => Vec::new(),
    };
    let hashes = stage_hashes(config, &cohort_bytes, &ddi_bytes);
    let splits = split_cohort(&cohort, SplitRatios::default(), config.seed)?;
    Ok((cohort, splits, hashes))
}

fn discover_stage(
    config: &RunConfig,
    cohort: &PatientCohort,
    splits: &CohortSplits,
    hashes: &StageHashes,
    manifest: &mut Manifest,
    dir: &Path,
) -> Result<(CausalGraph, bool)> {
    let json_path = dir.join("graph.json");
    if manifest.matches("discover", &hashes.discover) && json_path.is_file() {
        let text = fs::read_to_string(&json_path).map_err(|e| io_err("reading", &json_path, e))?;
        let (graph, embedded) = graph_from_json(&text, cohort)?;
        if embedded.as_deref() == Some(hashes.discover.as_str()) {
            return Ok((graph, true));
        }
    }
    let data = build_dataset(&splits.train);
    let graph = if config.rediscover_per_visit {
        per_visit_union_graph(&data, &splits.train, &config.search_config())?
    } else {
        greedy_search(&data, &config.search_config())?.graph
    };
    let json = graph_to_json(&graph, cohort, Some(&hashes.discover))?;
    write_atomic(&json_path, json.as_bytes())?;
    let text = hash_comment(&hashes.discover) + &graph_to_text(&graph, cohort)?;
    write_atomic(&dir.join("graph.txt"), text.as_bytes())?;
    manifest.record("discover", &hashes.discover, dir)?;
    Ok((graph, false))
}

/// Structure search per distinct visit variable set; edges are merged by
/// vote (count across visits, descending) and an edge that would close a
/// cycle under the merged orientation is dropped.
fn per_visit_union_graph(
    data: &BinaryDataset,
    train: &PatientCohort,
    search: &SearchConfig,
) -> Result<CausalGraph> {
    let space = train.space();
    let mut distinct: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    for visit in train.visits() {
        let mut vars: Vec<usize> = Vec::new();
        vars.extend(visit.diseases.iter().map(|&d| space.disease_var(d)));
        vars.extend(visit.procedures.iter().map(|&p| space.procedure_var(p)));
        vars.extend(visit.medications.iter().map(|&m| space.medication_var(m)));
        *distinct.entry(vars).or_insert(0) += 1;
    }
    let mut votes: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for (vars, weight) in &distinct {
        if vars.len() < 2 {
            continue;
        }
        let local = data.project(vars)?;
        let found = greedy_search(&local, search)?;
        for (from, to) in found.graph.edges() {
            *votes.entry((vars[from], vars[to])).or_insert(0) += weight;
        }
    }
    let mut ranked: Vec<((usize, usize), usize)> = votes.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut graph = CausalGraph::empty(space.total());
    for ((from, to), _) in ranked {
        if !graph.has_edge(to, from) && !graph.creates_cycle(from, to) {
            graph.add_edge(from, to)?;
        }
    }
    Ok(graph)
}

#[allow(clippy::too_many_arguments)]
fn estimate_stage(
    config: &RunConfig,
    cohort: &PatientCohort,
    splits: &CohortSplits,
    graph: &CausalGraph,
    hashes: &StageHashes,
    manifest: &mut Manifest,
    dir: &Path,
) -> Result<(ModelArtifacts, bool)> {
    let bins_path = dir.join("bins.json");
    if manifest.matches("estimate", &hashes.estimate) && bins_path.is_file() {
        let text = fs::read_to_string(&bins_path).map_err(|e| io_err("reading", &bins_path, e))?;
        let doc: EstimateDoc = serde_json::from_str(&text)
            .map_err(|e| Error::parse(e.line(), format!("bins artifact: {e}")))?;
        if doc.version == ESTIMATE_FORMAT_VERSION && doc.config_hash == hashes.estimate {
            let artifacts = ModelArtifacts {
                graph: graph.clone(),
                effect_bins: doc.effect_bins,
                coocc_rates: doc.coocc_rates,
                coocc_bins: doc.coocc_bins,
            };
            return Ok((artifacts, true));
        }
    }
    let data = build_dataset(&splits.train);
    let space = splits.train.space();
    let effects = build_effect_matrices(graph, &data, &space)?;
    let effect_bins = bin_effects(&effects, config.n_relations)?;
    let coocc_rates = cooccurrence_rates(&data, &space);
    let coocc_bins = bin_effects(&coocc_rates, config.n_relations)?;

    let head = hash_comment(&hashes.estimate);
    for (name, matrix) in [("effects", &effects), ("cooccurrence", &coocc_rates)] {
        let dm = head.clone() + &matrix_to_csv(&matrix.dm, &cohort.diseases, &cohort.medications);
        write_atomic(&dir.join(format!("{name}_dm.csv")), dm.as_bytes())?;
        let pm =
            head.clone() + &matrix_to_csv(&matrix.pm, &cohort.procedures, &cohort.medications);
        write_atomic(&dir.join(format!("{name}_pm.csv")), pm.as_bytes())?;
    }
    let doc = EstimateDoc {
        version: ESTIMATE_FORMAT_VERSION,
        config_hash: hashes.estimate.clone(),
        effect_bins,
        coocc_rates,
        coocc_bins,
    };
    let json = serde_json::to_string_pretty(&doc).expect("estimate serialization");
    write_atomic(&bins_path, json.as_bytes())?;
    manifest.record("estimate", &hashes.estimate, dir)?;
    let artifacts = ModelArtifacts {
        graph: graph.clone(),
        effect_bins: doc.effect_bins,
        coocc_rates: doc.coocc_rates,
        coocc_bins: doc.coocc_bins,
    };
    Ok((artifacts, false))
}

fn model_dims(config: &RunConfig, cohort: &PatientCohort) -> ModelDims {
    let mut dims = ModelDims::new(&cohort.space());
    dims.dim = config.dim;
    dims.dim_h = config.dim;
    dims.head_hidden = config.dim;
    dims.rgcn_layers = config.rgcn_layers;
    dims.n_relations = config.n_relations;
    dims
}

#[allow(clippy::too_many_arguments)]
fn train_stage(
    config: &RunConfig,
    cohort: &PatientCohort,
    splits: &CohortSplits,
    artifacts: &ModelArtifacts,
    hashes: &StageHashes,
    manifest: &mut Manifest,
    dir: &Path,
) -> Result<(ModelParameters, Option<usize>, bool)> {
    let ckpt_path = dir.join("checkpoint.json");
    if manifest.matches("train", &hashes.train) && ckpt_path.is_file() {
        let text = fs::read_to_string(&ckpt_path).map_err(|e| io_err("reading", &ckpt_path, e))?;
        let (params, embedded) = checkpoint_from_json(&text)?;
        if embedded.as_deref() == Some(hashes.train.as_str()) {
            return Ok((params, None, true));
        }
    }
    let dims = model_dims(config, cohort);
    let TrainOutcome { params, log, best_epoch } =
        train(splits, artifacts, &dims, &config.loss_config(), config.mode)?;
    write_atomic(
        &ckpt_path,
        checkpoint_to_json(&params, Some(&hashes.train)).as_bytes(),
    )?;
    let csv = hash_comment(&hashes.train) + &crate::train::training_log_csv(&log);
    write_atomic(&dir.join("training_log.csv"), csv.as_bytes())?;
    manifest.record("train", &hashes.train, dir)?;
    Ok((params, Some(best_epoch), false))
}

#[allow(clippy::too_many_arguments)]
fn evaluate_stage(
    config: &RunConfig,
    cohort: &PatientCohort,
    splits: &CohortSplits,
    artifacts: &ModelArtifacts,
    params: &ModelParameters,
    hashes: &StageHashes,
    manifest: &mut Manifest,
    dir: &Path,
) -> Result<(MetricsReport, bool)> {
    let metrics_path = dir.join("metrics.json");
    if manifest.matches("evaluate", &hashes.evaluate) && metrics_path.is_file() {
        let text = fs::read_to_string(&metrics_path).map_err(|e| io_err("reading", &metrics_path, e))?;
        let doc: MetricsDoc = serde_json::from_str(&text)
            .map_err(|e| Error::parse(e.line(), format!("metrics artifact: {e}")))?;
        if doc.version == METRICS_FORMAT_VERSION && doc.config_hash == hashes.evaluate {
            return Ok((doc.report, true));
        }
    }
    let typing = config.mode.edge_typing(artifacts);
    let space = cohort.space();
    let ctx = EvalContext {
        graph: &artifacts.graph,
        space: &space,
        typing: &typing,
        dsa_mode: config.mode.dsa_mode(),
        threshold: config.threshold,
    };
    let report = evaluate(params, &ctx, &splits.test, config.eval_rounds, config.seed)?;

    let rec_artifacts = RecommendArtifacts {
        graph: &artifacts.graph,
        space: &space,
        typing: &typing,
        dsa_mode: config.mode.dsa_mode(),
    };
    let options = RecommendOptions { threshold: config.threshold, autoregressive: false };
    let mut jsonl = format!("{{\"config_hash\":\"{}\"}}\n", hashes.evaluate);
    for patient in &splits.test.patients {
        let predictions = recommend(params, &rec_artifacts, patient, &options)?;
        jsonl.push_str(&predictions_to_jsonl(patient, &predictions, &cohort.medications)?);
    }
    write_atomic(&dir.join("predictions.jsonl"), jsonl.as_bytes())?;

    let doc = MetricsDoc {
        version: METRICS_FORMAT_VERSION,
        config_hash: hashes.evaluate.clone(),
        mode: config.mode,
        report,
    };
    let json = serde_json::to_string_pretty(&doc).expect("metrics serialization");
    write_atomic(&metrics_path, json.as_bytes())?;
    manifest.record("evaluate", &hashes.evaluate, dir)?;
    Ok((doc.report, false))
}

/// Convenience reader for downstream consumers and tests.
pub fn read_metrics(dir: &Path) -> Result<MetricsReport> {
    let path = dir.join("metrics.json");
    let text = fs::read_to_string(&path).map_err(|e| io_err("reading", &path, e))?;
    let doc: MetricsDoc = serde_json::from_str(&text)
        .map_err(|e| Error::parse(e.line(), format!("metrics artifact: {e}")))?;
    Ok(doc.report)
}
