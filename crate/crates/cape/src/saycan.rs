//! SayCan baseline: every step, score the whole (optionally subsampled)
//! repertoire as logprob × affordance and execute the argmax until the
//! "done" skill wins.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::completion::CompletionRequest;
use crate::grounding::{subsample_repertoire, ScoredCandidate, Scorer};
use crate::planner::{
    build_initial_prompt, select_demonstration, PlanContext, PlanTrace, PlannerError, Termination,
};
use crate::world::{apply_action, check_preconditions, enumerate_repertoire, GroundedAction, SceneGraph, SkillTemplate};

pub const NOISY_FLIP_PROBABILITY: f64 = 0.06;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AffordanceMode {
    Perfect,
    Noisy,
}

/// Binary affordance oracle. Noisy mode flips the perfect verdict with
/// probability 0.06, drawing exactly once per query in query order, which
/// makes runs with a fixed seed replayable.
pub struct AffordanceModel {
    pub mode: AffordanceMode,
    pub flip_probability: f64,
    rng: ChaCha8Rng,
}

impl AffordanceModel {
    pub fn perfect() -> Self {
        AffordanceModel {
            mode: AffordanceMode::Perfect,
            flip_probability: 0.0,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn noisy(seed: u64) -> Self {
        AffordanceModel {
            mode: AffordanceMode::Noisy,
            flip_probability: NOISY_FLIP_PROBABILITY,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn affordance(
        &mut self,
        scene: &SceneGraph,
        skills: &[SkillTemplate],
        action: &GroundedAction,
    ) -> u8 {
        let perfect = u8::from(check_preconditions(scene, skills, action).is_ok());
        match self.mode {
            AffordanceMode::Perfect => perfect,
            AffordanceMode::Noisy => {
                if self.rng.gen::<f64>() < self.flip_probability {
                    1 - perfect
                } else {
                    perfect
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SayCanConfig {
    #[serde(default)]
    pub use_subsampling: bool,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    #[serde(default = "default_done_skill")]
    pub done_skill: String,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_steps() -> usize {
    20
}

fn default_done_skill() -> String {
    "done".into()
}

impl Default for SayCanConfig {
    fn default() -> Self {
        SayCanConfig {
            use_subsampling: false,
            max_steps: default_max_steps(),
            done_skill: default_done_skill(),
            seed: 0,
        }
    }
}

/// Exhaustive per-step scoring of the repertoire; executes the argmax of
/// score_continuation × affordance. The done skill is scored every step
/// with affordance fixed at 1 (no RNG draw) so termination stays reachable.
pub fn plan_saycan(
    task: &str,
    ctx: &PlanContext<'_>,
    config: &SayCanConfig,
    model: &mut AffordanceModel,
) -> Result<PlanTrace, PlannerError> {
    let repertoire = enumerate_repertoire(ctx.scene, ctx.skills);
    if repertoire.is_empty() {
        return Err(crate::grounding::GroundingError::EmptyRepertoire.into());
    }

    let demo = select_demonstration(task, ctx.demos, ctx.provider)?;
    let mut prompt = build_initial_prompt(demo, task);
    let mut scene = ctx.scene.clone();
    let mut steps: Vec<(GroundedAction, ScoredCandidate)> = Vec::new();
    let mut scoring_calls: u64 = 0;
    let completion_base = ctx.backend.counter().completion_calls();

    let termination = loop {
        if steps.len() >= config.max_steps {
            break Termination::MaxSteps;
        }
        let step_index = steps.len() + 1;

        let candidates: Vec<GroundedAction> = if config.use_subsampling {
            let request = CompletionRequest::new(prompt.clone());
            let prototype = match ctx.backend.complete(&request) {
                Ok(samples) => samples.into_iter().next().map(|s| s.text).unwrap_or_default(),
                Err(_) => break Termination::BackendFailure,
            };
            let target = prototype
                .split_whitespace()
                .last()
                .unwrap_or_default()
                .to_string();
            subsample_repertoire(&prototype, &target, &repertoire, ctx.provider)?
        } else {
            repertoire.clone()
        };

        // best = (score, rendered, payload); ties lexicographic by rendered
        let mut best: Option<(f64, ScoredCandidate)> = None;
        let consider = |score: f64, cand: ScoredCandidate, best: &mut Option<(f64, ScoredCandidate)>| {
            let better = match best {
                None => true,
                Some((bs, bc)) => {
                    score > *bs
                        || (score == *bs && cand.admissible.rendered < bc.admissible.rendered)
                }
            };
            if better {
                *best = Some((score, cand));
            }
        };

        let mut failed = false;
        for action in &candidates {
            let logprob = match ctx.backend.score_continuation(&prompt, &action.rendered) {
                Ok(lp) => lp,
                Err(_) => {
                    failed = true;
                    break;
                }
            };
            scoring_calls += 1;
            let afforded = model.affordance(&scene, ctx.skills, action) as f64;
            let score = logprob.exp() * afforded;
            consider(
                score,
                ScoredCandidate {
                    free_text: action.rendered.clone(),
                    admissible: action.clone(),
                    similarity: afforded,
                    mean_logprob: logprob,
                    score,
                    scorer: Scorer::Geometric,
                },
                &mut best,
            );
        }
        if failed {
            break Termination::BackendFailure;
        }

        let done_logprob = match ctx.backend.score_continuation(&prompt, &config.done_skill) {
            Ok(lp) => lp,
            Err(_) => break Termination::BackendFailure,
        };
        scoring_calls += 1;
        let done_score = done_logprob.exp();
        let done_wins = match &best {
            None => true,
            Some((bs, bc)) => {
                done_score > *bs
                    || (done_score == *bs && config.done_skill < bc.admissible.rendered)
            }
        };
        if done_wins {
            break Termination::Threshold;
        }
        let (score, candidate) = best.expect("non-empty candidate set");
        if score == 0.0 {
            break Termination::ExhaustedCorrections;
        }

        // a noisy affordance may let a failing step through: the step is
        // still recorded but leaves the scene untouched
        if let Ok(next) = apply_action(&scene, ctx.skills, &candidate.admissible) {
            scene = next;
        }
        let rendered = candidate.admissible.rendered.clone();
        prompt.push(' ');
        prompt.push_str(&rendered);
        prompt.push_str(&format!("\nStep {}:", step_index + 1));
        steps.push((candidate.admissible.clone(), candidate));
    };

    Ok(PlanTrace {
        task: task.to_string(),
        steps,
        corrections: Vec::new(),
        completion_calls: ctx.backend.counter().completion_calls() - completion_base,
        scoring_calls,
        termination,
        final_scene: scene,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::completion::{ScoreRule, ScriptFile, ScriptedBackend};
    use crate::embedding::TrigramEmbedder;
    use crate::planner::{Demonstration, DemonstrationSet};
    use crate::world::household;

    fn demos() -> DemonstrationSet {
        DemonstrationSet::new(vec![Demonstration {
            task: "make tea".into(),
            steps: vec!["Step 1: walk to kitchen".into()],
        }])
        .unwrap()
    }

    fn action_named(repertoire: &[GroundedAction], rendered: &str) -> GroundedAction {
        repertoire
            .iter()
            .find(|a| a.rendered == rendered)
            .unwrap_or_else(|| panic!("{rendered:?} not in repertoire"))
            .clone()
    }

    #[test]
    fn perfect_affordance_tracks_preconditions() {
        let (skills, scene) = household();
        let repertoire = enumerate_repertoire(&scene, &skills);
        let mut model = AffordanceModel::perfect();
        let walk = action_named(&repertoire, "walk to kitchen");
        assert_eq!(model.affordance(&scene, &skills, &walk), 1);
        // milk sits inside the closed fridge in another room
        let grab = action_named(&repertoire, "grab milk");
        assert_eq!(model.affordance(&scene, &skills, &grab), 0);
    }

    #[test]
    fn noisy_flip_rate_is_near_six_percent() {
        let (skills, scene) = household();
        let repertoire = enumerate_repertoire(&scene, &skills);
        let walk = action_named(&repertoire, "walk to kitchen");
        let mut model = AffordanceModel::noisy(7);
        let mut flips = 0usize;
        let n = 10_000;
        for _ in 0..n {
            if model.affordance(&scene, &skills, &walk) == 0 {
                flips += 1;
            }
        }
        let rate = flips as f64 / n as f64;
        assert!((0.05..=0.07).contains(&rate), "flip rate {rate}");
    }

    fn run(
        scores: Vec<ScoreRule>,
        config: &SayCanConfig,
        model: &mut AffordanceModel,
    ) -> PlanTrace {
        let (skills, scene) = household();
        let backend = ScriptedBackend::new(ScriptFile {
            rules: vec![],
            scores,
            score_floor: -5.0,
        });
        let provider = TrigramEmbedder;
        let set = demos();
        let ctx = PlanContext {
            scene: &scene,
            skills: &skills,
            backend: &backend,
            provider: &provider,
            demos: &set,
            corrections: None,
        };
        plan_saycan("get glass of milk", &ctx, config, model).unwrap()
    }

    #[test]
    fn done_dominating_at_step_one_yields_empty_plan() {
        let scores = vec![ScoreRule {
            when: None,
            continuation: "done".into(),
            score: -0.05,
        }];
        let trace = run(scores, &SayCanConfig::default(), &mut AffordanceModel::perfect());
        assert!(trace.steps.is_empty());
        assert_eq!(trace.termination, Termination::Threshold);
    }

    #[test]
    fn perfect_run_executes_only_valid_steps_and_counts_scoring() {
        let (skills, scene) = household();
        let repertoire_len = enumerate_repertoire(&scene, &skills).len() as u64;
        let scores = vec![
            ScoreRule {
                when: Some("Step 1: walk to fridge\nStep 2:".into()),
                continuation: "done".into(),
                score: -0.05,
            },
            ScoreRule {
                when: None,
                continuation: "walk to fridge".into(),
                score: -0.1,
            },
        ];
        let trace = run(scores, &SayCanConfig::default(), &mut AffordanceModel::perfect());
        let rendered: Vec<&str> = trace.steps.iter().map(|(a, _)| a.rendered.as_str()).collect();
        assert_eq!(rendered, vec!["walk to fridge"]);
        assert_eq!(trace.termination, Termination::Threshold);
        // every candidate plus done, for each of the two scored steps
        assert_eq!(trace.scoring_calls, 2 * (repertoire_len + 1));
        // perfect affordance: the recorded step was executable
        let mut replay = scene.clone();
        for (action, _) in &trace.steps {
            replay = apply_action(&replay, &skills, action).unwrap();
        }
        assert_eq!(replay, trace.final_scene);
    }

    #[test]
    fn fixed_seed_reproduces_noisy_trace() {
        let scores = vec![
            ScoreRule {
                when: Some("Step 1: walk to fridge\nStep 2:".into()),
                continuation: "done".into(),
                score: -0.05,
            },
            ScoreRule {
                when: None,
                continuation: "walk to fridge".into(),
                score: -0.1,
            },
        ];
        let a = run(scores.clone(), &SayCanConfig::default(), &mut AffordanceModel::noisy(42));
        let b = run(scores, &SayCanConfig::default(), &mut AffordanceModel::noisy(42));
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
