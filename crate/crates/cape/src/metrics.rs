//! Evaluation metrics over plan traces: executability, affordability, LCS
//! against ground truth, scene-graph similarity, Fleiss' kappa, and report
//! aggregation.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::num::Real;
use crate::planner::PlanTrace;
use crate::world::{apply_action, check_preconditions, SceneGraph, SkillTemplate};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("annotation matrix is ragged: item {item} has {got} ratings, expected {expected}")]
    RaggedMatrix {
        item: usize,
        got: usize,
        expected: usize,
    },
    #[error("annotation matrix needs at least 2 items and 2 raters")]
    TooSmall,
    #[error("cannot aggregate an empty episode list")]
    EmptyAggregate,
}

/// 1 iff replaying every step in order raises no precondition error.
/// An empty plan counts as a failure.
pub fn executability(trace: &PlanTrace, initial: &SceneGraph, skills: &[SkillTemplate]) -> u8 {
    if trace.steps.is_empty() {
        return 0;
    }
    let mut scene = initial.clone();
    for (action, _) in &trace.steps {
        match apply_action(&scene, skills, action) {
            Ok(next) => scene = next,
            Err(_) => return 0,
        }
    }
    1
}

/// Greedy skip-and-continue replay: failed steps are skipped with the scene
/// unchanged. Returns the percentage of steps that executed.
pub fn affordability(trace: &PlanTrace, initial: &SceneGraph, skills: &[SkillTemplate]) -> f64 {
    if trace.steps.is_empty() {
        return 0.0;
    }
    let (_, executed) = replay_skipping(
        trace.steps.iter().map(|(a, _)| a.clone()).collect::<Vec<_>>().as_slice(),
        initial,
        skills,
    );
    100.0 * executed as f64 / trace.steps.len() as f64
}

/// Skip-and-continue execution; returns the final scene and the number of
/// steps that executed.
pub fn replay_skipping(
    actions: &[crate::world::GroundedAction],
    initial: &SceneGraph,
    skills: &[SkillTemplate],
) -> (SceneGraph, usize) {
    let mut scene = initial.clone();
    let mut executed = 0;
    for action in actions {
        if check_preconditions(&scene, skills, action).is_ok() {
            scene = apply_action(&scene, skills, action).expect("checked");
            executed += 1;
        }
    }
    (scene, executed)
}

fn normalize_step(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Longest-common-subsequence length via the standard dynamic program.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut prev_diag = 0;
        for (j, y) in b.iter().enumerate() {
            let tmp = row[j + 1];
            row[j + 1] = if x == y {
                prev_diag + 1
            } else {
                row[j + 1].max(row[j])
            };
            prev_diag = tmp;
        }
    }
    row[b.len()]
}

/// Step-level LCS over normalized step strings, divided by the longer
/// sequence. Both empty yields 1, exactly one empty yields 0.
pub fn lcs<F: Real>(generated: &[String], ground_truth: &[String]) -> F {
    if generated.is_empty() && ground_truth.is_empty() {
        return F::one();
    }
    if generated.is_empty() || ground_truth.is_empty() {
        return F::zero();
    }
    let a: Vec<String> = generated.iter().map(|s| normalize_step(s)).collect();
    let b: Vec<String> = ground_truth.iter().map(|s| normalize_step(s)).collect();
    let common = lcs_length(&a, &b);
    F::from_usize_(common) / F::from_usize_(a.len().max(b.len()))
}

/// Scene-graph similarity: percentage of matching attribute slots over the
/// union of objects. Slots are each declared attribute plus location and
/// containment; an object present in only one scene contributes all of its
/// slots as mismatches.
pub fn graph_similarity(gen_final: &SceneGraph, gt_final: &SceneGraph) -> f64 {
    let ids: BTreeSet<u32> = gen_final
        .objects
        .iter()
        .chain(gt_final.objects.iter())
        .map(|o| o.id)
        .collect();
    if ids.is_empty() {
        return 100.0;
    }
    let mut total = 0usize;
    let mut matching = 0usize;
    for id in ids {
        let a = gen_final.object(id);
        let b = gt_final.object(id);
        let attrs: BTreeSet<&String> = a
            .iter()
            .flat_map(|o| o.attributes.keys())
            .chain(b.iter().flat_map(|o| o.attributes.keys()))
            .collect();
        total += attrs.len() + 2; // attributes + location + container
        let (Some(a), Some(b)) = (a, b) else {
            continue; // all slots mismatch
        };
        for attr in attrs {
            if a.attributes.get(attr) == b.attributes.get(attr)
                && a.attributes.contains_key(attr)
                && b.attributes.contains_key(attr)
            {
                matching += 1;
            }
        }
        if a.location == b.location {
            matching += 1;
        }
        if a.container == b.container {
            matching += 1;
        }
    }
    100.0 * matching as f64 / total as f64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationMatrix {
    /// (plan id, binary ratings from each annotator)
    pub items: Vec<(String, Vec<u8>)>,
}

impl AnnotationMatrix {
    /// CSV with header `plan_id,rater_1..rater_n` and binary cells.
    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let mut items = Vec::new();
        let mut expected: Option<usize> = None;
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let id = fields.next().unwrap_or_default().trim().to_string();
            let ratings: Vec<u8> = fields
                .map(|f| if f.trim() == "1" { 1 } else { 0 })
                .collect();
            if let Some(n) = expected {
                if ratings.len() != n {
                    return Err(MetricsError::RaggedMatrix {
                        item: i - 1,
                        got: ratings.len(),
                        expected: n,
                    });
                }
            } else {
                expected = Some(ratings.len());
            }
            items.push((id, ratings));
        }
        Ok(AnnotationMatrix { items })
    }
}

/// Fleiss' kappa for binary categories: `(P - Pe) / (1 - Pe)`, with the
/// degenerate all-unanimous case defined as 1.
pub fn fleiss_kappa<F: Real>(matrix: &AnnotationMatrix) -> Result<F, MetricsError> {
    let items = &matrix.items;
    if items.len() < 2 {
        return Err(MetricsError::TooSmall);
    }
    let n_raters = items[0].1.len();
    if n_raters < 2 {
        return Err(MetricsError::TooSmall);
    }
    for (i, (_, ratings)) in items.iter().enumerate() {
        if ratings.len() != n_raters {
            return Err(MetricsError::RaggedMatrix {
                item: i,
                got: ratings.len(),
                expected: n_raters,
            });
        }
    }
    let n_items = F::from_usize_(items.len());
    let n = F::from_usize_(n_raters);

    let mut p_bar = F::zero();
    let mut p1_total = F::zero();
    for (_, ratings) in items {
        let ones = F::from_usize_(ratings.iter().filter(|&&r| r == 1).count());
        let zeros = n - ones;
        // agreement within the item
        let pairs = (ones * (ones - F::one()) + zeros * (zeros - F::one())) / (n * (n - F::one()));
        p_bar = p_bar + pairs;
        p1_total = p1_total + ones;
    }
    p_bar = p_bar / n_items;
    let p1 = p1_total / (n_items * n);
    let p_e = p1 * p1 + (F::one() - p1) * (F::one() - p1);

    if (F::one() - p_e).abs() < F::from_f64_(1e-12) {
        // every rating identical across the board
        return Ok(F::one());
    }
    Ok((p_bar - p_e) / (F::one() - p_e))
}

/// Per-episode metric values, embedded in episode records and recomputed by
/// `cape eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub executable: u8,
    pub affordability: f64,
    pub lcs: Option<f64>,
    pub graph_similarity: Option<f64>,
    pub steps: usize,
    pub corrections: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub pct_correct: Option<f64>,
    pub pct_executable: f64,
    pub pct_affordable: f64,
    pub pct_graph_similarity: Option<f64>,
    pub lcs: Option<f64>,
    pub fleiss_kappa: Option<f64>,
    pub mean_steps: f64,
    pub mean_corrections: f64,
    pub episodes: usize,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Means over episodes for one method.
pub fn aggregate(rows: &[EpisodeMetrics], method: &str) -> Result<ReportRow, MetricsError> {
    if rows.is_empty() {
        return Err(MetricsError::EmptyAggregate);
    }
    let n = rows.len() as f64;
    Ok(ReportRow {
        method: method.to_string(),
        pct_correct: None,
        pct_executable: 100.0 * rows.iter().map(|r| r.executable as f64).sum::<f64>() / n,
        pct_affordable: rows.iter().map(|r| r.affordability).sum::<f64>() / n,
        pct_graph_similarity: mean_of(rows.iter().filter_map(|r| r.graph_similarity)),
        lcs: mean_of(rows.iter().filter_map(|r| r.lcs)),
        fleiss_kappa: None,
        mean_steps: rows.iter().map(|r| r.steps as f64).sum::<f64>() / n,
        mean_corrections: rows.iter().map(|r| r.corrections as f64).sum::<f64>() / n,
        episodes: rows.len(),
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "N/A".into())
}

/// CSV rendering with the table column order:
/// %Correct, %Exec, %Aff, %GS, LCS, Kappa, Steps, Corrections.
pub fn render_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from(
        "method,pct_correct,pct_exec,pct_aff,pct_gs,lcs,fleiss_kappa,steps,corrections,episodes\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{:.2},{:.2},{},{},{},{:.2},{:.2},{}\n",
            r.method,
            fmt_opt(r.pct_correct),
            r.pct_executable,
            r.pct_affordable,
            fmt_opt(r.pct_graph_similarity),
            fmt_opt(r.lcs),
            fmt_opt(r.fleiss_kappa),
            r.mean_steps,
            r.mean_corrections,
            r.episodes
        ));
    }
    out
}

pub fn render_markdown(rows: &[ReportRow]) -> String {
    let mut out = String::from(
        "| Method | %Correct | %Exec. | %Aff. | %GS | LCS | Fleiss' Kappa | Steps | Corrections |\n\
         |---|---|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        out.push_str(&format!(
            "| {} | {} | {:.2} | {:.2} | {} | {} | {} | {:.2} | {:.2} |\n",
            r.method,
            fmt_opt(r.pct_correct),
            r.pct_executable,
            r.pct_affordable,
            fmt_opt(r.pct_graph_similarity),
            fmt_opt(r.lcs),
            fmt_opt(r.fleiss_kappa),
            r.mean_steps,
            r.mean_corrections
        ));
    }
    out
}
