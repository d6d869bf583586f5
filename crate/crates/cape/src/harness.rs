//! Experiment orchestration: config loading, the method roster, episode
//! execution, batch runs with deterministic merging, and metric reports.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::completion::{CompletionBackend, RemoteBackend, ScriptFile, ScriptedBackend};
use crate::embedding::{fnv1a, CachedProvider, EmbeddingProvider, RemoteEmbedder, TrigramEmbedder};
use crate::grounding::{GroundingConfig, Scorer, DEFAULT_BETA};
use crate::metrics::{
    affordability, aggregate, executability, fleiss_kappa, graph_similarity, lcs,
    AnnotationMatrix, EpisodeMetrics, MetricsError, ReportRow,
};
use crate::planner::{
    load_corrections, load_demos, plan, CorrectionExampleSet, DemonstrationSet, ErrorRendering,
    PlanContext, PlanTrace, PlannerConfig, PlannerError, PromptStyle, Strategy, Termination,
};
use crate::saycan::{plan_saycan, AffordanceModel, SayCanConfig};
use crate::world::{
    apply_action, enumerate_repertoire, load_domain_file, DomainError, SceneGraph, SkillTemplate,
};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error in {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error("ground truth for {task:?} fails at step {step:?}: {message}")]
    GroundTruth {
        task: String,
        step: String,
        message: String,
    },
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BackendSettings {
    /// Scripted-backend rule file; mutually exclusive with `remote_url`.
    #[serde(default)]
    pub script: Option<PathBuf>,
    #[serde(default)]
    pub remote_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
}

/// The scorer itself comes from the method tuple; these settings tune it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundingSettings {
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Overrides the scorer's default cutoff when set.
    #[serde(default)]
    pub threshold: Option<f64>,
}

fn default_beta() -> f64 {
    DEFAULT_BETA
}

impl Default for GroundingSettings {
    fn default() -> Self {
        GroundingSettings {
            beta: default_beta(),
            threshold: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlannerSettings {
    #[serde(default = "d_k")]
    pub k: usize,
    #[serde(default = "d_max_steps")]
    pub max_steps: usize,
    #[serde(default = "d_mcps")]
    pub max_corrections_per_step: usize,
    #[serde(default = "d_mtc")]
    pub max_total_corrections: usize,
    #[serde(default = "d_n_samples")]
    pub n_samples: u32,
    #[serde(default = "d_rendering")]
    pub error_rendering: ErrorRendering,
}

fn d_k() -> usize {
    5
}
fn d_max_steps() -> usize {
    20
}
fn d_mcps() -> usize {
    3
}
fn d_mtc() -> usize {
    10
}
fn d_n_samples() -> u32 {
    5
}
fn d_rendering() -> ErrorRendering {
    ErrorRendering::FirstPerson
}

impl Default for PlannerSettings {
    fn default() -> Self {
        PlannerSettings {
            k: d_k(),
            max_steps: d_max_steps(),
            max_corrections_per_step: d_mcps(),
            max_total_corrections: d_mtc(),
            n_samples: d_n_samples(),
            error_rendering: d_rendering(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SayCanSettings {
    #[serde(default)]
    pub noisy: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub subsample: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub domain: PathBuf,
    pub demos: PathBuf,
    #[serde(default)]
    pub corrections: Option<PathBuf>,
    pub tasks: Vec<TaskSpec>,
    pub methods: Vec<String>,
    #[serde(default)]
    pub backend: BackendSettings,
    #[serde(default)]
    pub grounding: GroundingSettings,
    #[serde(default)]
    pub planner: PlannerSettings,
    #[serde(default)]
    pub saycan: SayCanSettings,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    /// Use the remote embedding service (`CAPE_EMBED_URL`) instead of the
    /// offline trigram embedder.
    #[serde(default)]
    pub remote_embeddings: bool,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_jobs() -> usize {
    1
}

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

impl ExperimentConfig {
    /// Loads a config file, resolving relative paths against the file's
    /// directory and checking that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|source| HarnessError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        let base = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        cfg.domain = resolve(&base, &cfg.domain);
        cfg.demos = resolve(&base, &cfg.demos);
        cfg.corrections = cfg.corrections.map(|p| resolve(&base, &p));
        cfg.backend.script = cfg.backend.script.map(|p| resolve(&base, &p));
        for task in &mut cfg.tasks {
            task.ground_truth = task.ground_truth.take().map(|p| resolve(&base, &p));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let mut required: Vec<&Path> = vec![&self.domain, &self.demos];
        if let Some(p) = &self.corrections {
            required.push(p);
        }
        if let Some(p) = &self.backend.script {
            required.push(p);
        }
        for task in &self.tasks {
            if let Some(p) = &task.ground_truth {
                required.push(p);
            }
        }
        for p in required {
            if !p.exists() {
                return Err(HarnessError::Validation(format!(
                    "referenced file does not exist: {}",
                    p.display()
                )));
            }
        }
        if self.tasks.is_empty() {
            return Err(HarnessError::Validation("task list is empty".into()));
        }
        if self.methods.is_empty() {
            return Err(HarnessError::Validation("method list is empty".into()));
        }
        for m in &self.methods {
            resolve_method(m).ok_or_else(|| HarnessError::UnknownMethod(m.clone()))?;
        }
        if self.backend.script.is_none() && self.backend.remote_url.is_none() {
            return Err(HarnessError::Validation(
                "backend needs either a script path or a remote URL".into(),
            ));
        }
        Ok(())
    }
}

/// What a method name means for the engines.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodSpec {
    Planner {
        strategy: Strategy,
        style: PromptStyle,
        few_shot: bool,
        scorer: Scorer,
    },
    SayCan {
        noisy: bool,
    },
}

pub const METHOD_NAMES: [&str; 10] = [
    "open_loop",
    "resample",
    "cape-success",
    "cape-implicit",
    "cape-explicit",
    "cape-explicit-sg",
    "cape-fewshot",
    "cape-fewshot-sg",
    "saycan-perfect",
    "saycan-noisy",
];

pub fn resolve_method(name: &str) -> Option<MethodSpec> {
    use PromptStyle::*;
    use Strategy::*;
    let planner = |strategy, style, few_shot, scorer| {
        Some(MethodSpec::Planner {
            strategy,
            style,
            few_shot,
            scorer,
        })
    };
    match name {
        "open_loop" => planner(OpenLoop, Explicit, false, Scorer::Weighted),
        "resample" => planner(Resample, Explicit, false, Scorer::Weighted),
        "cape-success" => planner(Cape, SuccessOnly, false, Scorer::Weighted),
        "cape-implicit" => planner(Cape, Implicit, false, Scorer::Weighted),
        "cape-explicit" => planner(Cape, Explicit, false, Scorer::Weighted),
        "cape-explicit-sg" => planner(Cape, Explicit, false, Scorer::Geometric),
        "cape-fewshot" => planner(Cape, Explicit, true, Scorer::Weighted),
        "cape-fewshot-sg" => planner(Cape, Explicit, true, Scorer::Geometric),
        "saycan-perfect" => Some(MethodSpec::SayCan { noisy: false }),
        "saycan-noisy" => Some(MethodSpec::SayCan { noisy: true }),
        _ => None,
    }
}

/// A human-written reference plan, validated by executing it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruthProgram {
    pub task: String,
    pub steps: Vec<String>,
    #[serde(skip)]
    pub final_scene: Option<SceneGraph>,
}

impl GroundTruthProgram {
    pub fn load(
        path: &Path,
        scene: &SceneGraph,
        skills: &[SkillTemplate],
    ) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut program: GroundTruthProgram =
            serde_json::from_str(&text).map_err(|source| HarnessError::Parse {
                path: path.display().to_string(),
                source,
            })?;
        let repertoire = enumerate_repertoire(scene, skills);
        let mut current = scene.clone();
        for step in &program.steps {
            let action = repertoire
                .iter()
                .find(|a| &a.rendered == step)
                .ok_or_else(|| HarnessError::GroundTruth {
                    task: program.task.clone(),
                    step: step.clone(),
                    message: "not an admissible action".into(),
                })?;
            current = apply_action(&current, skills, action).map_err(|e| {
                HarnessError::GroundTruth {
                    task: program.task.clone(),
                    step: step.clone(),
                    message: e.to_string(),
                }
            })?;
        }
        program.final_scene = Some(current);
        Ok(program)
    }
}

/// Everything loaded once per run and shared (read-only) across episodes.
pub struct Loaded {
    pub skills: Vec<SkillTemplate>,
    pub scene: SceneGraph,
    pub demos: DemonstrationSet,
    pub corrections: Option<CorrectionExampleSet>,
    pub script: Option<ScriptFile>,
    pub ground_truth: BTreeMap<String, GroundTruthProgram>,
}

pub fn load_inputs(cfg: &ExperimentConfig) -> Result<Loaded, HarnessError> {
    let (skills, scene) = load_domain_file(&cfg.domain)?;
    let demos = load_demos(&cfg.demos)?;
    let corrections = cfg
        .corrections
        .as_ref()
        .map(|p| load_corrections(p))
        .transpose()?;
    let script = cfg
        .backend
        .script
        .as_ref()
        .map(|p| -> Result<ScriptFile, HarnessError> {
            let text = std::fs::read_to_string(p).map_err(|source| HarnessError::Io {
                path: p.display().to_string(),
                source,
            })?;
            serde_json::from_str(&text).map_err(|source| HarnessError::Parse {
                path: p.display().to_string(),
                source,
            })
        })
        .transpose()?;
    let mut ground_truth = BTreeMap::new();
    for task in &cfg.tasks {
        if let Some(p) = &task.ground_truth {
            ground_truth.insert(
                task.name.clone(),
                GroundTruthProgram::load(p, &scene, &skills)?,
            );
        }
    }
    Ok(Loaded {
        skills,
        scene,
        demos,
        corrections,
        script,
        ground_truth,
    })
}

/// Per-episode seed: global seed mixed with task and method names, so the
/// assignment does not depend on scheduling order.
pub fn derive_seed(global: u64, task: &str, method: &str) -> u64 {
    fnv1a(format!("{global}:{task}:{method}").as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub task: String,
    pub method: String,
    pub seed: u64,
    pub wall_time_ms: u64,
    pub trace: PlanTrace,
    pub metrics: EpisodeMetrics,
}

pub fn compute_metrics(
    trace: &PlanTrace,
    initial: &SceneGraph,
    skills: &[SkillTemplate],
    ground_truth: Option<&GroundTruthProgram>,
) -> EpisodeMetrics {
    let (lcs_value, gs_value) = match ground_truth {
        Some(gt) => {
            let generated: Vec<String> =
                trace.steps.iter().map(|(a, _)| a.rendered.clone()).collect();
            let gs = gt
                .final_scene
                .as_ref()
                .map(|fs| graph_similarity(&trace.final_scene, fs));
            (Some(lcs::<f64>(&generated, &gt.steps)), gs)
        }
        None => (None, None),
    };
    EpisodeMetrics {
        executable: executability(trace, initial, skills),
        affordability: affordability(trace, initial, skills),
        lcs: lcs_value,
        graph_similarity: gs_value,
        steps: trace.steps.len(),
        corrections: trace.corrections.len(),
    }
}

fn make_backend(cfg: &ExperimentConfig, loaded: &Loaded) -> Box<dyn CompletionBackend> {
    match &loaded.script {
        Some(script) => Box::new(ScriptedBackend::new(script.clone())),
        None => {
            let url = cfg
                .backend
                .remote_url
                .clone()
                .expect("validated: script or remote_url present");
            Box::new(RemoteBackend::new(
                url,
                std::env::var("CAPE_API_KEY").ok(),
                cfg.backend.model.clone(),
            ))
        }
    }
}

fn make_provider(cfg: &ExperimentConfig) -> Box<dyn EmbeddingProvider> {
    if cfg.remote_embeddings {
        if let Some(remote) = RemoteEmbedder::from_env() {
            return Box::new(CachedProvider::new(remote));
        }
    }
    Box::new(CachedProvider::new(TrigramEmbedder))
}

/// Runs one (task, method) episode with its own backend and RNG.
pub fn run_episode(
    cfg: &ExperimentConfig,
    loaded: &Loaded,
    task: &str,
    method: &str,
) -> Result<EpisodeRecord, HarnessError> {
    let spec = resolve_method(method).ok_or_else(|| HarnessError::UnknownMethod(method.into()))?;
    let seed = derive_seed(cfg.seed, task, method);
    let backend = make_backend(cfg, loaded);
    let provider = make_provider(cfg);
    let ctx = PlanContext {
        scene: &loaded.scene,
        skills: &loaded.skills,
        backend: backend.as_ref(),
        provider: provider.as_ref(),
        demos: &loaded.demos,
        corrections: loaded.corrections.as_ref(),
    };

    let start = std::time::Instant::now();
    let trace = match spec {
        MethodSpec::Planner {
            strategy,
            style,
            few_shot,
            scorer,
        } => {
            let mut grounding =
                GroundingConfig::new(scorer, enumerate_repertoire(&loaded.scene, &loaded.skills));
            grounding.beta = cfg.grounding.beta;
            if let Some(t) = cfg.grounding.threshold {
                grounding.threshold = t;
            }
            let mut planner_config = PlannerConfig::new(strategy, style, few_shot);
            planner_config.k = cfg.planner.k;
            planner_config.max_steps = cfg.planner.max_steps;
            planner_config.max_corrections_per_step = cfg.planner.max_corrections_per_step;
            planner_config.max_total_corrections = cfg.planner.max_total_corrections;
            planner_config.n_samples = cfg.planner.n_samples;
            planner_config.error_rendering = cfg.planner.error_rendering;
            planner_config.seed = seed;
            plan(task, &ctx, &grounding, &planner_config)?
        }
        MethodSpec::SayCan { noisy } => {
            let saycan_config = SayCanConfig {
                use_subsampling: cfg.saycan.subsample,
                max_steps: cfg.planner.max_steps,
                done_skill: "done".into(),
                seed,
            };
            let mut model = if noisy {
                AffordanceModel::noisy(seed)
            } else {
                AffordanceModel::perfect()
            };
            plan_saycan(task, &ctx, &saycan_config, &mut model)?
        }
    };
    // scripted runs report zero wall time so records stay byte-reproducible
    let wall_time_ms = if loaded.script.is_some() {
        0
    } else {
        start.elapsed().as_millis() as u64
    };

    let metrics = compute_metrics(
        &trace,
        &loaded.scene,
        &loaded.skills,
        loaded.ground_truth.get(task),
    );
    Ok(EpisodeRecord {
        task: task.to_string(),
        method: method.to_string(),
        seed,
        wall_time_ms,
        trace,
        metrics,
    })
}

fn failure_record(
    cfg: &ExperimentConfig,
    loaded: &Loaded,
    task: &str,
    method: &str,
) -> EpisodeRecord {
    let trace = PlanTrace {
        task: task.to_string(),
        steps: Vec::new(),
        corrections: Vec::new(),
        completion_calls: 0,
        scoring_calls: 0,
        termination: Termination::BackendFailure,
        final_scene: loaded.scene.clone(),
    };
    let metrics = compute_metrics(&trace, &loaded.scene, &loaded.skills, loaded.ground_truth.get(task));
    EpisodeRecord {
        task: task.to_string(),
        method: method.to_string(),
        seed: derive_seed(cfg.seed, task, method),
        wall_time_ms: 0,
        trace,
        metrics,
    }
}

pub struct BatchOutput {
    pub records: Vec<EpisodeRecord>,
    pub rows: Vec<ReportRow>,
    pub results_path: PathBuf,
    pub report_csv_path: PathBuf,
    pub report_md_path: PathBuf,
}

/// Runs every (task, method) pair, in parallel when jobs > 1, and writes
/// results.jsonl plus CSV/markdown reports in canonical task-major order.
pub fn run_batch(cfg: &ExperimentConfig) -> Result<BatchOutput, HarnessError> {
    let loaded = load_inputs(cfg)?;
    let pairs: Vec<(String, String)> = cfg
        .tasks
        .iter()
        .flat_map(|t| cfg.methods.iter().map(move |m| (t.name.clone(), m.clone())))
        .collect();

    let jobs = cfg.jobs.max(1).min(pairs.len().max(1));
    let next = Mutex::new(0usize);
    let slots: Mutex<Vec<Option<EpisodeRecord>>> = Mutex::new(vec![None; pairs.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let index = {
                    let mut guard = next.lock().unwrap();
                    if *guard >= pairs.len() {
                        return;
                    }
                    let i = *guard;
                    *guard += 1;
                    i
                };
                let (task, method) = &pairs[index];
                let record = run_episode(cfg, &loaded, task, method)
                    .unwrap_or_else(|_| failure_record(cfg, &loaded, task, method));
                slots.lock().unwrap()[index] = Some(record);
            });
        }
    });
    let records: Vec<EpisodeRecord> = slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every episode slot filled"))
        .collect();

    std::fs::create_dir_all(&cfg.out).map_err(|source| HarnessError::Io {
        path: cfg.out.display().to_string(),
        source,
    })?;
    let results_path = cfg.out.join("results.jsonl");
    let mut file = std::fs::File::create(&results_path).map_err(|source| HarnessError::Io {
        path: results_path.display().to_string(),
        source,
    })?;
    for record in &records {
        let line = serde_json::to_string(record).expect("episode record serializes");
        writeln!(file, "{line}").and_then(|_| file.flush()).map_err(|source| {
            HarnessError::Io {
                path: results_path.display().to_string(),
                source,
            }
        })?;
    }

    let rows = aggregate_records(&records, &cfg.methods, None)?;
    let report_csv_path = cfg.out.join("report.csv");
    let report_md_path = cfg.out.join("report.md");
    write_text(&report_csv_path, &crate::metrics::render_csv(&rows))?;
    write_text(&report_md_path, &crate::metrics::render_markdown(&rows))?;

    Ok(BatchOutput {
        records,
        rows,
        results_path,
        report_csv_path,
        report_md_path,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// One report row per method (in roster order), with optional %Correct and
/// kappa from an annotation matrix whose plan ids read "<method>/<task>".
pub fn aggregate_records(
    records: &[EpisodeRecord],
    methods: &[String],
    annotations: Option<&AnnotationMatrix>,
) -> Result<Vec<ReportRow>, HarnessError> {
    let mut rows = Vec::new();
    for method in methods {
        let episode_metrics: Vec<EpisodeMetrics> = records
            .iter()
            .filter(|r| &r.method == method)
            .map(|r| r.metrics.clone())
            .collect();
        if episode_metrics.is_empty() {
            continue;
        }
        let mut row = aggregate(&episode_metrics, method)?;
        if let Some(matrix) = annotations {
            let prefix = format!("{method}/");
            let items: Vec<(String, Vec<u8>)> = matrix
                .items
                .iter()
                .filter(|(id, _)| id.starts_with(&prefix))
                .cloned()
                .collect();
            if !items.is_empty() {
                let total: usize = items.iter().map(|(_, r)| r.len()).sum();
                let ones: usize = items
                    .iter()
                    .map(|(_, r)| r.iter().filter(|&&v| v == 1).count())
                    .sum();
                row.pct_correct = Some(100.0 * ones as f64 / total as f64);
                let sub = AnnotationMatrix { items };
                row.fleiss_kappa = fleiss_kappa::<f64>(&sub).ok();
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_results(path: &Path) -> Result<Vec<EpisodeRecord>, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        records.push(
            serde_json::from_str(line).map_err(|source| HarnessError::Parse {
                path: path.display().to_string(),
                source,
            })?,
        );
    }
    Ok(records)
}

/// Recomputes every metric from the stored traces (ignoring the embedded
/// per-episode values) and aggregates a fresh report.
pub fn run_eval(
    cfg: &ExperimentConfig,
    results_path: &Path,
    annotations_path: Option<&Path>,
) -> Result<Vec<ReportRow>, HarnessError> {
    let loaded = load_inputs(cfg)?;
    let mut records = read_results(results_path)?;
    for record in &mut records {
        record.metrics = compute_metrics(
            &record.trace,
            &loaded.scene,
            &loaded.skills,
            loaded.ground_truth.get(&record.task),
        );
    }
    let annotations = annotations_path
        .map(|p| -> Result<AnnotationMatrix, HarnessError> {
            let text = std::fs::read_to_string(p).map_err(|source| HarnessError::Io {
                path: p.display().to_string(),
                source,
            })?;
            Ok(AnnotationMatrix::from_csv(&text)?)
        })
        .transpose()?;

    // keep the config's method order, then any extras in first-seen order
    let mut methods: Vec<String> = cfg
        .methods
        .iter()
        .filter(|m| records.iter().any(|r| &&r.method == m))
        .cloned()
        .collect();
    for record in &records {
        if !methods.contains(&record.method) {
            methods.push(record.method.clone());
        }
    }
    aggregate_records(&records, &methods, annotations.as_ref())
}
