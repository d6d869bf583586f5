//! Plan generation: open-loop autoregression, top-k re-sampling, and
//! corrective re-prompting with success-only / implicit / explicit error
//! feedback (optionally few-shot).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::completion::{CompletionBackend, CompletionRequest};
use crate::embedding::{cosine, EmbeddingError, EmbeddingProvider};
use crate::grounding::{
    ground_step, rank_candidates, GroundOutcome, GroundingConfig, GroundingError, ScoredCandidate,
};
use crate::world::{
    apply_action, check_preconditions, state_word, GroundedAction, Posture, PreconditionError,
    Predicate, SceneGraph, SkillTemplate, Target,
};

#[derive(Debug, thiserror::Error)]
pub enum PlannerError {
    #[error("io error reading {path}: {source}")]
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
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub task: String,
    pub steps: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DemonstrationSet {
    pub entries: Vec<Demonstration>,
}

/// Splits a "Step N: <text>" line into its index and body.
pub fn parse_step_line(line: &str) -> Option<(usize, &str)> {
    let rest = line.strip_prefix("Step ")?;
    let (num, body) = rest.split_once(": ")?;
    let n: usize = num.parse().ok()?;
    if body.is_empty() {
        return None;
    }
    Some((n, body))
}

impl DemonstrationSet {
    pub fn new(entries: Vec<Demonstration>) -> Result<Self, PlannerError> {
        if entries.is_empty() {
            return Err(PlannerError::Validation(
                "demonstration set must be non-empty".into(),
            ));
        }
        for demo in &entries {
            if demo.steps.is_empty() {
                return Err(PlannerError::Validation(format!(
                    "demonstration {:?} has no steps",
                    demo.task
                )));
            }
            for (i, line) in demo.steps.iter().enumerate() {
                match parse_step_line(line) {
                    Some((n, _)) if n == i + 1 => {}
                    _ => {
                        return Err(PlannerError::Validation(format!(
                            "demonstration {:?} step {} must read \"Step {}: <text>\", got {:?}",
                            demo.task,
                            i + 1,
                            i + 1,
                            line
                        )))
                    }
                }
            }
        }
        Ok(DemonstrationSet { entries })
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, PlannerError> {
        let entries: Vec<Demonstration> =
            serde_json::from_str(text).map_err(|source| PlannerError::Parse {
                path: origin.to_string(),
                source,
            })?;
        Self::new(entries)
    }
}

pub fn load_demos(path: &Path) -> Result<DemonstrationSet, PlannerError> {
    let text = std::fs::read_to_string(path).map_err(|source| PlannerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    DemonstrationSet::from_json(&text, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionExample {
    pub task: String,
    pub failed_step: String,
    pub error: String,
    pub corrective_action: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionExampleSet {
    pub entries: Vec<CorrectionExample>,
}

impl CorrectionExampleSet {
    pub fn new(entries: Vec<CorrectionExample>) -> Result<Self, PlannerError> {
        if entries.is_empty() {
            return Err(PlannerError::Validation(
                "correction example set must be non-empty".into(),
            ));
        }
        Ok(CorrectionExampleSet { entries })
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self, PlannerError> {
        let entries: Vec<CorrectionExample> =
            serde_json::from_str(text).map_err(|source| PlannerError::Parse {
                path: origin.to_string(),
                source,
            })?;
        Self::new(entries)
    }
}

pub fn load_corrections(path: &Path) -> Result<CorrectionExampleSet, PlannerError> {
    let text = std::fs::read_to_string(path).map_err(|source| PlannerError::Io {
        path: path.display().to_string(),
        source,
    })?;
    CorrectionExampleSet::from_json(&text, &path.display().to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    OpenLoop,
    Resample,
    Cape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptStyle {
    SuccessOnly,
    Implicit,
    Explicit,
}

/// How the "because ..." clause of an explicit corrective prompt is worded:
/// a first-person paraphrase of the violated predicate, or the simulator's
/// raw error template.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorRendering {
    FirstPerson,
    RawTemplate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerConfig {
    pub strategy: Strategy,
    pub prompt_style: PromptStyle,
    pub few_shot: bool,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_max_corrections_per_step")]
    pub max_corrections_per_step: usize,
    #[serde(default = "default_max_total_corrections")]
    pub max_total_corrections: usize,
    #[serde(default = "default_n_samples")]
    pub n_samples: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_error_rendering")]
    pub error_rendering: ErrorRendering,
}

fn default_k() -> usize {
    5
}
fn default_max_steps() -> usize {
    20
}
fn default_max_corrections_per_step() -> usize {
    3
}
fn default_max_total_corrections() -> usize {
    10
}
fn default_n_samples() -> u32 {
    5
}
fn default_error_rendering() -> ErrorRendering {
    ErrorRendering::FirstPerson
}

impl PlannerConfig {
    pub fn new(strategy: Strategy, prompt_style: PromptStyle, few_shot: bool) -> Self {
        PlannerConfig {
            strategy,
            prompt_style,
            few_shot,
            k: default_k(),
            max_steps: default_max_steps(),
            max_corrections_per_step: default_max_corrections_per_step(),
            max_total_corrections: default_max_total_corrections(),
            n_samples: default_n_samples(),
            seed: 0,
            error_rendering: default_error_rendering(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Threshold,
    MaxSteps,
    ExhaustedCorrections,
    BackendFailure,
    EmptyProgram,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Termination::Threshold => "threshold",
            Termination::MaxSteps => "max_steps",
            Termination::ExhaustedCorrections => "exhausted_corrections",
            Termination::BackendFailure => "backend_failure",
            Termination::EmptyProgram => "empty_program",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionEvent {
    /// 1-based index of the plan step this correction tried to produce.
    pub step_index: usize,
    pub error: PreconditionError,
    /// Corrective prompt sent to the backend (for re-sampling: the rejected
    /// candidate's rendered action — no prompt is built).
    pub prompt: String,
    pub resolved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanTrace {
    pub task: String,
    pub steps: Vec<(GroundedAction, ScoredCandidate)>,
    pub corrections: Vec<CorrectionEvent>,
    pub completion_calls: u64,
    pub scoring_calls: u64,
    pub termination: Termination,
    pub final_scene: SceneGraph,
}

/// Everything a single planning episode reads but does not own.
pub struct PlanContext<'a> {
    pub scene: &'a SceneGraph,
    pub skills: &'a [SkillTemplate],
    pub backend: &'a dyn CompletionBackend,
    pub provider: &'a dyn EmbeddingProvider,
    pub demos: &'a DemonstrationSet,
    pub corrections: Option<&'a CorrectionExampleSet>,
}

/// Demonstration whose task name is most cosine-similar to the query;
/// lexicographic tie-break on the task name.
pub fn select_demonstration<'a>(
    query_task: &str,
    demos: &'a DemonstrationSet,
    provider: &dyn EmbeddingProvider,
) -> Result<&'a Demonstration, PlannerError> {
    let query_vec = provider.embed(query_task)?;
    let mut best: Option<(f64, &Demonstration)> = None;
    for demo in &demos.entries {
        let sim = cosine(&query_vec, &provider.embed(&demo.task)?)?;
        let better = match &best {
            None => true,
            Some((bs, bd)) => sim > *bs || (sim == *bs && demo.task < bd.task),
        };
        if better {
            best = Some((sim, demo));
        }
    }
    Ok(best.expect("demonstration set is non-empty").1)
}

/// One in-context example plan followed by the query task, ending with the
/// cue for the first step.
pub fn build_initial_prompt(example: &Demonstration, query_task: &str) -> String {
    format!(
        "Task: {}\n{}\n\nTask: {}\nStep 1:",
        example.task,
        example.steps.join("\n"),
        query_task
    )
}

/// First-person paraphrase of a violated predicate, used by the explicit
/// prompt style.
pub fn paraphrase_error(error: &PreconditionError) -> String {
    let obj = &error.action.object_name;
    match &error.violated {
        Predicate::AttributeIs { attr, value } => {
            format!("the {obj} is not {}", state_word(attr, *value))
        }
        Predicate::Facing => format!("I am not facing the {obj}"),
        Predicate::SameRoom => format!("the {obj} is not in this room"),
        Predicate::Holding {
            target: Target::Param,
        } => format!("I am not holding the {obj}"),
        Predicate::Holding {
            target: Target::Agent,
        } => "I am not holding anything".into(),
        Predicate::NotEnclosed => format!("the {obj} is inside something closed"),
        Predicate::HasCapability { .. } => format!("{} is not allowed", error.action.rendered),
        Predicate::FreeHand => "I do not have a free hand".into(),
        Predicate::CloseTo => format!("I am not close to the {obj}"),
        Predicate::PostureIs {
            value: Posture::Standing,
        } => "I am sitting".into(),
        Predicate::PostureIs {
            value: Posture::Sitting,
        } => "I am standing".into(),
    }
}

/// Error sentence injected into a corrective prompt, per style.
pub fn error_line(
    error: &PreconditionError,
    style: PromptStyle,
    rendering: ErrorRendering,
) -> String {
    match style {
        PromptStyle::SuccessOnly => "Task Failed".into(),
        PromptStyle::Implicit => format!("I cannot {}", error.action.rendered),
        PromptStyle::Explicit => {
            let cause = match rendering {
                ErrorRendering::FirstPerson => paraphrase_error(error),
                ErrorRendering::RawTemplate => error.message.clone(),
            };
            format!("I cannot {} because {}", error.action.rendered, cause)
        }
    }
}

/// Top-3 correction examples by cosine similarity between the failed step
/// and each example's failed step, descending; lexicographic tie-break.
pub fn select_correction_examples<'a>(
    failed_step: &str,
    set: &'a CorrectionExampleSet,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<&'a CorrectionExample>, PlannerError> {
    if set.entries.len() < 3 {
        return Err(PlannerError::Validation(format!(
            "few-shot correction requires >= 3 examples, got {}",
            set.entries.len()
        )));
    }
    let query_vec = provider.embed(failed_step)?;
    let mut scored: Vec<(f64, &CorrectionExample)> = Vec::with_capacity(set.entries.len());
    for entry in &set.entries {
        let sim = cosine(&query_vec, &provider.embed(&entry.failed_step)?)?;
        scored.push((sim, entry));
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| (&a.1.failed_step, &a.1.task).cmp(&(&b.1.failed_step, &b.1.task)))
    });
    Ok(scored.into_iter().take(3).map(|(_, e)| e).collect())
}

/// Corrective prompt: optional few-shot example blocks, then the task, the
/// steps executed so far, and the error line ending with the continuation
/// cue for the step being retried.
pub fn build_corrective_prompt(
    task: &str,
    executed_steps: &[String],
    error: &PreconditionError,
    style: PromptStyle,
    rendering: ErrorRendering,
    examples: Option<&[&CorrectionExample]>,
    step_index: usize,
) -> String {
    let mut prompt = String::new();
    if let Some(examples) = examples {
        for ex in examples {
            prompt.push_str(&format!(
                "Task: {}\nError: {}. A correct step would be to\nStep 1: {}\n\n",
                ex.task, ex.error, ex.corrective_action
            ));
        }
    }
    prompt.push_str(&format!("Task: {task}\n"));
    for line in executed_steps {
        prompt.push_str(line);
        prompt.push('\n');
    }
    prompt.push_str(&format!(
        "Error: {}. A correct step would be to\nStep {}:",
        error_line(error, style, rendering),
        step_index
    ));
    prompt
}

fn append_step(prompt: &mut String, executed: &mut Vec<String>, index: usize, rendered: &str) {
    prompt.push(' ');
    prompt.push_str(rendered);
    prompt.push_str(&format!("\nStep {}:", index + 1));
    executed.push(format!("Step {index}: {rendered}"));
}

/// Runs one planning episode and returns its trace. Backend failures and
/// empty completions terminate the episode rather than erroring; only
/// configuration problems (bad few-shot set, empty repertoire) are errors.
pub fn plan(
    task: &str,
    ctx: &PlanContext<'_>,
    grounding: &GroundingConfig,
    config: &PlannerConfig,
) -> Result<PlanTrace, PlannerError> {
    if config.few_shot {
        match ctx.corrections {
            Some(set) if set.entries.len() >= 3 => {}
            _ => {
                return Err(PlannerError::Validation(
                    "few-shot prompting requires a correction set with >= 3 entries".into(),
                ))
            }
        }
    }
    if grounding.repertoire.is_empty() {
        return Err(GroundingError::EmptyRepertoire.into());
    }

    let demo = select_demonstration(task, ctx.demos, ctx.provider)?;
    let mut prompt = build_initial_prompt(demo, task);
    let mut scene = ctx.scene.clone();
    let mut steps: Vec<(GroundedAction, ScoredCandidate)> = Vec::new();
    let mut executed: Vec<String> = Vec::new();
    let mut corrections: Vec<CorrectionEvent> = Vec::new();
    let mut scoring_calls: u64 = 0;
    let completion_base = ctx.backend.counter().completion_calls();

    let termination = 'outer: loop {
        if steps.len() >= config.max_steps {
            break Termination::MaxSteps;
        }
        let step_index = steps.len() + 1;
        let request = CompletionRequest::new(prompt.clone()).with_samples(config.n_samples);
        let samples = match ctx.backend.complete(&request) {
            Ok(s) => s,
            Err(_) => break Termination::BackendFailure,
        };
        if samples.iter().all(|s| s.is_blank()) {
            break Termination::EmptyProgram;
        }

        match config.strategy {
            Strategy::OpenLoop => match ground_step(&samples, grounding, ctx.provider)? {
                GroundOutcome::Grounded(cand) => {
                    let action = cand.admissible.clone();
                    append_step(&mut prompt, &mut executed, step_index, &action.rendered);
                    steps.push((action, cand));
                }
                GroundOutcome::BelowThreshold(_) => break Termination::Threshold,
            },
            Strategy::Resample => {
                let ranked = rank_candidates(&samples, grounding, ctx.provider)?;
                if ranked[0].score < grounding.threshold {
                    break Termination::Threshold;
                }
                let rejected_from = corrections.len();
                let mut placed = false;
                for cand in ranked.iter().take(config.k) {
                    match check_preconditions(&scene, ctx.skills, &cand.admissible) {
                        Ok(()) => {
                            scene = apply_action(&scene, ctx.skills, &cand.admissible)
                                .expect("preconditions just checked");
                            append_step(
                                &mut prompt,
                                &mut executed,
                                step_index,
                                &cand.admissible.rendered,
                            );
                            steps.push((cand.admissible.clone(), cand.clone()));
                            placed = true;
                            break;
                        }
                        Err(error) => {
                            if corrections.len() >= config.max_total_corrections {
                                break 'outer Termination::ExhaustedCorrections;
                            }
                            scoring_calls += 1;
                            corrections.push(CorrectionEvent {
                                step_index,
                                prompt: cand.admissible.rendered.clone(),
                                error,
                                resolved: false,
                            });
                        }
                    }
                }
                if !placed {
                    break Termination::ExhaustedCorrections;
                }
                for event in &mut corrections[rejected_from..] {
                    event.resolved = true;
                }
            }
            Strategy::Cape => {
                let cand = match ground_step(&samples, grounding, ctx.provider)? {
                    GroundOutcome::Grounded(c) => c,
                    GroundOutcome::BelowThreshold(_) => break Termination::Threshold,
                };
                match check_preconditions(&scene, ctx.skills, &cand.admissible) {
                    Ok(()) => {
                        scene = apply_action(&scene, ctx.skills, &cand.admissible)
                            .expect("preconditions just checked");
                        append_step(&mut prompt, &mut executed, step_index, &cand.admissible.rendered);
                        steps.push((cand.admissible.clone(), cand));
                    }
                    Err(first_error) => {
                        let mut current = first_error;
                        let mut per_step = 0usize;
                        loop {
                            if per_step >= config.max_corrections_per_step
                                || corrections.len() >= config.max_total_corrections
                            {
                                break 'outer Termination::ExhaustedCorrections;
                            }
                            let examples = if config.few_shot {
                                Some(select_correction_examples(
                                    &current.action.rendered,
                                    ctx.corrections.expect("validated above"),
                                    ctx.provider,
                                )?)
                            } else {
                                None
                            };
                            let corrective = build_corrective_prompt(
                                task,
                                &executed,
                                &current,
                                config.prompt_style,
                                config.error_rendering,
                                examples.as_deref(),
                                step_index,
                            );
                            let request = CompletionRequest::new(corrective.clone())
                                .with_samples(config.n_samples);
                            let retry = match ctx.backend.complete(&request) {
                                Ok(s) => s,
                                Err(_) => break 'outer Termination::BackendFailure,
                            };
                            if retry.iter().all(|s| s.is_blank()) {
                                break 'outer Termination::EmptyProgram;
                            }
                            per_step += 1;
                            let regrounded = match ground_step(&retry, grounding, ctx.provider)? {
                                GroundOutcome::Grounded(c) => c,
                                GroundOutcome::BelowThreshold(_) => {
                                    corrections.push(CorrectionEvent {
                                        step_index,
                                        error: current.clone(),
                                        prompt: corrective,
                                        resolved: false,
                                    });
                                    continue;
                                }
                            };
                            match check_preconditions(&scene, ctx.skills, &regrounded.admissible) {
                                Ok(()) => {
                                    corrections.push(CorrectionEvent {
                                        step_index,
                                        error: current,
                                        prompt: corrective,
                                        resolved: true,
                                    });
                                    scene =
                                        apply_action(&scene, ctx.skills, &regrounded.admissible)
                                            .expect("preconditions just checked");
                                    append_step(
                                        &mut prompt,
                                        &mut executed,
                                        step_index,
                                        &regrounded.admissible.rendered,
                                    );
                                    steps.push((regrounded.admissible.clone(), regrounded));
                                    break;
                                }
                                Err(next_error) => {
                                    corrections.push(CorrectionEvent {
                                        step_index,
                                        error: current,
                                        prompt: corrective,
                                        resolved: false,
                                    });
                                    current = next_error;
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    // Open-loop never touched the simulator; its final scene is what a
    // skip-and-continue replay of the plan leaves behind.
    let final_scene = match config.strategy {
        Strategy::OpenLoop => {
            let actions: Vec<GroundedAction> = steps.iter().map(|(a, _)| a.clone()).collect();
            crate::metrics::replay_skipping(&actions, ctx.scene, ctx.skills).0
        }
        _ => scene,
    };

    Ok(PlanTrace {
        task: task.to_string(),
        steps,
        corrections,
        completion_calls: ctx.backend.counter().completion_calls() - completion_base,
        scoring_calls,
        termination,
        final_scene,
    })
}

/// Human-readable transcript of a trace: corrections interleaved as
/// "Error: ... A correct step would be to" lines before the step that
/// resolved them.
pub fn render_plan_text(trace: &PlanTrace) -> String {
    let mut out = format!("Task: {}\n", trace.task);
    let error_line_of = |event: &CorrectionEvent| -> Option<String> {
        event
            .prompt
            .lines()
            .rev()
            .find(|l| l.starts_with("Error: "))
            .map(|l| l.to_string())
    };
    for (i, (action, _)) in trace.steps.iter().enumerate() {
        let idx = i + 1;
        for event in trace.corrections.iter().filter(|e| e.step_index == idx) {
            if let Some(line) = error_line_of(event) {
                out.push_str(&line);
                out.push('\n');
            }
        }
        out.push_str(&format!("Step {}: {}\n", idx, action.rendered));
    }
    let pending = trace.steps.len() + 1;
    for event in trace.corrections.iter().filter(|e| e.step_index == pending) {
        if let Some(line) = error_line_of(event) {
            out.push_str(&line);
            out.push('\n');
        }
    }
    out.push_str(&format!("Termination: {}\n", trace.termination));
    out
}
