//! Translation of free-form step text into admissible actions.
//!
//! Candidates are scored either by the weighted sum `C + beta * P` or by the
//! squared geometric mean `((C + 1) / 2) * exp(P)`, where `C` is the cosine
//! similarity between the free-form text and an admissible action and `P`
//! is the mean token log-probability of the generated text. The weighted
//! sum is unbounded below; the geometric form stays in [0, 1], which makes
//! thresholding well behaved.

use serde::{Deserialize, Serialize};

use crate::completion::CompletionSample;
use crate::embedding::{cosine, EmbeddingError, EmbeddingProvider};
use crate::num::Real;
use crate::world::GroundedAction;

pub const DEFAULT_BETA: f64 = 0.3;
pub const DEFAULT_GEOMETRIC_THRESHOLD: f64 = 0.4;
pub const DEFAULT_WEIGHTED_THRESHOLD: f64 = 0.0;

pub const SUBSAMPLE_SIMILAR: usize = 500;
pub const SUBSAMPLE_OBJECT: usize = 1000;
pub const SUBSAMPLE_MAX: usize = SUBSAMPLE_SIMILAR + SUBSAMPLE_OBJECT;

#[derive(Debug, thiserror::Error)]
pub enum GroundingError {
    #[error("repertoire must be non-empty")]
    EmptyRepertoire,
    #[error("no completion samples to ground")]
    EmptySamples,
    #[error("mean log-probability must be <= 0, got {0}")]
    PositiveLogprob(f64),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    Weighted,
    Geometric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub free_text: String,
    pub admissible: GroundedAction,
    pub similarity: f64,
    pub mean_logprob: f64,
    pub score: f64,
    pub scorer: Scorer,
}

#[derive(Debug, Clone)]
pub struct GroundingConfig {
    pub scorer: Scorer,
    pub beta: f64,
    pub threshold: f64,
    pub repertoire: Vec<GroundedAction>,
}

impl GroundingConfig {
    pub fn new(scorer: Scorer, repertoire: Vec<GroundedAction>) -> Self {
        let threshold = match scorer {
            Scorer::Geometric => DEFAULT_GEOMETRIC_THRESHOLD,
            Scorer::Weighted => DEFAULT_WEIGHTED_THRESHOLD,
        };
        GroundingConfig {
            scorer,
            beta: DEFAULT_BETA,
            threshold,
            repertoire,
        }
    }
}

/// `C + beta * P`; unbounded below.
pub fn score_weighted<F: Real>(similarity: F, mean_logprob: F, beta: F) -> F {
    similarity + beta * mean_logprob
}

/// `((C + 1) / 2) * exp(P)`, in [0, 1] for `C` in [-1, 1] and `P <= 0`.
pub fn score_geometric<F: Real>(similarity: F, mean_logprob: F) -> Result<F, GroundingError> {
    if mean_logprob > F::zero() {
        return Err(GroundingError::PositiveLogprob(
            mean_logprob.to_f64().unwrap_or(f64::NAN),
        ));
    }
    let two = F::from_f64_(2.0);
    Ok((similarity + F::one()) / two * mean_logprob.exp())
}

fn score(scorer: Scorer, beta: f64, similarity: f64, mean_logprob: f64) -> Result<f64, GroundingError> {
    match scorer {
        Scorer::Weighted => Ok(score_weighted(similarity, mean_logprob, beta)),
        Scorer::Geometric => score_geometric(similarity, mean_logprob),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GroundOutcome {
    Grounded(ScoredCandidate),
    /// Best score fell below the configured threshold; plan termination.
    BelowThreshold(ScoredCandidate),
}

/// For each sample and each admissible action, scores the pair and returns
/// the overall argmax (ties broken lexicographically by rendered action,
/// then by sample text). Signals `BelowThreshold` when the best score is
/// under the configured cutoff.
pub fn ground_step(
    samples: &[CompletionSample],
    config: &GroundingConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<GroundOutcome, GroundingError> {
    if config.repertoire.is_empty() {
        return Err(GroundingError::EmptyRepertoire);
    }
    let usable: Vec<&CompletionSample> = samples.iter().filter(|s| !s.is_blank()).collect();
    if usable.is_empty() {
        return Err(GroundingError::EmptySamples);
    }

    let action_vectors: Vec<_> = config
        .repertoire
        .iter()
        .map(|a| provider.embed(&a.rendered))
        .collect::<Result<_, _>>()?;

    let mut best: Option<ScoredCandidate> = None;
    for sample in usable {
        let sample_vec = provider.embed(&sample.text)?;
        for (action, action_vec) in config.repertoire.iter().zip(action_vectors.iter()) {
            let similarity = cosine(&sample_vec, action_vec)?;
            let s = score(config.scorer, config.beta, similarity, sample.mean_logprob)?;
            let candidate = ScoredCandidate {
                free_text: sample.text.clone(),
                admissible: action.clone(),
                similarity,
                mean_logprob: sample.mean_logprob,
                score: s,
                scorer: config.scorer,
            };
            let better = match &best {
                None => true,
                Some(b) => match s.partial_cmp(&b.score) {
                    Some(std::cmp::Ordering::Greater) => true,
                    Some(std::cmp::Ordering::Equal) => {
                        (candidate.admissible.rendered.as_str(), candidate.free_text.as_str())
                            < (b.admissible.rendered.as_str(), b.free_text.as_str())
                    }
                    _ => false,
                },
            };
            if better {
                best = Some(candidate);
            }
        }
    }
    let best = best.expect("non-empty samples and repertoire");
    if best.score < config.threshold {
        Ok(GroundOutcome::BelowThreshold(best))
    } else {
        Ok(GroundOutcome::Grounded(best))
    }
}

/// Ranks every (sample, action) pair by score, deduplicated per action
/// keeping each action's best score, in descending order. Used by the
/// re-sampling baseline to walk the top-k candidates.
pub fn rank_candidates(
    samples: &[CompletionSample],
    config: &GroundingConfig,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<ScoredCandidate>, GroundingError> {
    if config.repertoire.is_empty() {
        return Err(GroundingError::EmptyRepertoire);
    }
    let usable: Vec<&CompletionSample> = samples.iter().filter(|s| !s.is_blank()).collect();
    if usable.is_empty() {
        return Err(GroundingError::EmptySamples);
    }
    let mut per_action: Vec<Option<ScoredCandidate>> = vec![None; config.repertoire.len()];
    for sample in usable {
        let sample_vec = provider.embed(&sample.text)?;
        for (i, action) in config.repertoire.iter().enumerate() {
            let action_vec = provider.embed(&action.rendered)?;
            let similarity = cosine(&sample_vec, &action_vec)?;
            let s = score(config.scorer, config.beta, similarity, sample.mean_logprob)?;
            let replace = per_action[i].as_ref().is_none_or(|b| {
                s > b.score || (s == b.score && sample.text < b.free_text)
            });
            if replace {
                per_action[i] = Some(ScoredCandidate {
                    free_text: sample.text.clone(),
                    admissible: action.clone(),
                    similarity,
                    mean_logprob: sample.mean_logprob,
                    score: s,
                    scorer: config.scorer,
                });
            }
        }
    }
    let mut ranked: Vec<ScoredCandidate> = per_action.into_iter().flatten().collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.admissible.rendered.cmp(&b.admissible.rendered))
    });
    Ok(ranked)
}

/// SayCan repertoire subsampling: the 500 entries most similar to the
/// prototype step plus up to 1000 entries whose object matches the target,
/// deduplicated, repertoire order preserved. Repertoires of at most 1500
/// entries pass through unchanged.
pub fn subsample_repertoire(
    prototype: &str,
    target_object: &str,
    repertoire: &[GroundedAction],
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<GroundedAction>, GroundingError> {
    if repertoire.is_empty() {
        return Err(GroundingError::EmptyRepertoire);
    }
    if repertoire.len() <= SUBSAMPLE_MAX {
        return Ok(repertoire.to_vec());
    }

    let mut keep = vec![false; repertoire.len()];
    let mut object_kept = 0usize;
    for (i, action) in repertoire.iter().enumerate() {
        if object_kept >= SUBSAMPLE_OBJECT {
            break;
        }
        if action.object_name == target_object {
            keep[i] = true;
            object_kept += 1;
        }
    }

    let proto_vec = provider.embed(prototype)?;
    let mut scored: Vec<(usize, f64)> = Vec::with_capacity(repertoire.len());
    for (i, action) in repertoire.iter().enumerate() {
        let v = provider.embed(&action.rendered)?;
        scored.push((i, cosine(&proto_vec, &v)?));
    }
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| repertoire[a.0].rendered.cmp(&repertoire[b.0].rendered))
    });
    for (i, _) in scored.into_iter().take(SUBSAMPLE_SIMILAR) {
        keep[i] = true;
    }

    Ok(repertoire
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(a, _)| a.clone())
        .collect())
}
