//! Domain-file loading and validation.
//!
//! A domain is a JSON document with top-level keys `rooms`, `objects`,
//! `skills`, `agent` and `max_hands`. Object entries carry `id`, `class`,
//! `attributes`, `capabilities`, `room` and an optional `in` container.

use std::collections::BTreeSet;
use std::path::Path;

use serde::Deserialize;

use super::{
    AgentState, Capability, Effect, ObjectInstance, Predicate, Room, SceneGraph, SkillTemplate,
};

#[derive(Debug, thiserror::Error)]
pub enum DomainError {
    #[error("failed to read domain file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("domain parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("domain validation error at {path}: {message}")]
    Validation { path: String, message: String },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> DomainError {
    DomainError::Validation {
        path: path.into(),
        message: message.into(),
    }
}

#[derive(Debug, Deserialize)]
struct DomainDoc {
    rooms: Vec<Room>,
    objects: Vec<ObjectDoc>,
    skills: Vec<SkillTemplate>,
    agent: AgentState,
    #[serde(default = "default_max_hands")]
    max_hands: usize,
}

fn default_max_hands() -> usize {
    2
}

#[derive(Debug, Deserialize)]
struct ObjectDoc {
    id: u32,
    class: String,
    #[serde(default)]
    attributes: std::collections::BTreeMap<String, bool>,
    #[serde(default)]
    capabilities: BTreeSet<Capability>,
    room: u32,
    #[serde(rename = "in", default)]
    container: Option<u32>,
}

/// Parses and validates a domain document.
pub fn load_domain(source: &str) -> Result<(Vec<SkillTemplate>, SceneGraph), DomainError> {
    let doc: DomainDoc = serde_json::from_str(source)?;

    let room_ids: BTreeSet<u32> = doc.rooms.iter().map(|r| r.id).collect();
    if room_ids.len() != doc.rooms.len() {
        return Err(invalid("rooms", "duplicate room id"));
    }

    let mut objects = Vec::with_capacity(doc.objects.len());
    let mut object_ids = BTreeSet::new();
    for (i, o) in doc.objects.iter().enumerate() {
        if o.id == 0 {
            return Err(invalid(format!("objects[{i}].id"), "ids must be positive"));
        }
        if !object_ids.insert(o.id) {
            return Err(invalid(format!("objects[{i}].id"), format!("duplicate object id {}", o.id)));
        }
        if !room_ids.contains(&o.room) {
            return Err(invalid(
                format!("objects[{i}].room"),
                format!("references missing room {}", o.room),
            ));
        }
        let mut attributes = o.attributes.clone();
        attributes.entry("grabbed".into()).or_insert(false);
        objects.push(ObjectInstance {
            id: o.id,
            class_name: o.class.clone(),
            attributes,
            capabilities: o.capabilities.clone(),
            location: o.room,
            container: o.container,
        });
    }

    // Container references must point at CONTAINER-capable objects and the
    // containment graph must be acyclic.
    for (i, o) in objects.iter().enumerate() {
        if let Some(cid) = o.container {
            let Some(container) = objects.iter().find(|c| c.id == cid) else {
                return Err(invalid(
                    format!("objects[{i}].in"),
                    format!("references missing object {cid}"),
                ));
            };
            if !container.capabilities.contains(&Capability::Container) {
                return Err(invalid(
                    format!("objects[{i}].in"),
                    format!("object {cid} is not a container"),
                ));
            }
        }
    }
    for o in &objects {
        let mut seen = BTreeSet::new();
        let mut cur = o.container;
        while let Some(cid) = cur {
            if !seen.insert(cid) || cid == o.id {
                return Err(invalid("objects", format!("containment cycle through object {}", o.id)));
            }
            cur = objects.iter().find(|c| c.id == cid).and_then(|c| c.container);
        }
    }

    if !room_ids.contains(&doc.agent.room) {
        return Err(invalid("agent.room", format!("references missing room {}", doc.agent.room)));
    }
    if doc.agent.hands.len() > doc.max_hands {
        return Err(invalid(
            "agent.hands",
            format!("agent holds {} objects but max_hands is {}", doc.agent.hands.len(), doc.max_hands),
        ));
    }
    for id in doc.agent.proximity.iter().chain(doc.agent.hands.iter()) {
        if !object_ids.contains(id) {
            return Err(invalid("agent", format!("references missing object {id}")));
        }
    }
    if let Some(f) = doc.agent.facing {
        if !doc.agent.proximity.contains(&f) {
            return Err(invalid("agent.facing", "facing target must be in the proximity set"));
        }
    }
    // grabbed=true iff the id appears in the agent's hands.
    for o in objects.iter_mut() {
        let held = doc.agent.hands.contains(&o.id);
        o.attributes.insert("grabbed".into(), held);
        if held {
            o.location = doc.agent.room;
        }
    }

    for (i, s) in doc.skills.iter().enumerate() {
        if s.arity > 1 {
            return Err(invalid(format!("skills[{i}].arity"), "arity must be 0 or 1"));
        }
        let slots = s.text_form.matches("<object>").count();
        if slots != s.arity as usize {
            return Err(invalid(
                format!("skills[{i}].text_form"),
                format!("expected {} parameter slot(s), found {slots}", s.arity),
            ));
        }
        if s.arity == 0 {
            let object_pred = s.preconditions.iter().any(|p| {
                !matches!(
                    p,
                    Predicate::PostureIs { .. }
                        | Predicate::FreeHand
                        | Predicate::Holding { target: super::Target::Agent }
                )
            });
            let object_effect = s.effects.iter().any(|e| {
                matches!(
                    e,
                    Effect::SetAttribute { .. }
                        | Effect::AddProximity
                        | Effect::SetFacing
                        | Effect::Grab
                )
            });
            if object_pred || object_effect {
                return Err(invalid(
                    format!("skills[{i}]"),
                    "arity-0 skill references a parameter",
                ));
            }
        }
    }
    let verbs: BTreeSet<&str> = doc.skills.iter().map(|s| s.verb.as_str()).collect();
    if verbs.len() != doc.skills.len() {
        return Err(invalid("skills", "duplicate verb"));
    }

    let scene = SceneGraph {
        rooms: doc.rooms,
        objects,
        agent: doc.agent,
        max_hands: doc.max_hands,
        step_counter: 0,
    };
    Ok((doc.skills, scene))
}

pub fn load_domain_file(path: &Path) -> Result<(Vec<SkillTemplate>, SceneGraph), DomainError> {
    let text = std::fs::read_to_string(path).map_err(|source| DomainError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_domain(&text)
}

/// The bundled household domain: 15 skills and a two-handed agent.
pub const HOUSEHOLD_DOMAIN: &str = include_str!("../../fixtures/household_domain.json");

pub fn household() -> (Vec<SkillTemplate>, SceneGraph) {
    load_domain(HOUSEHOLD_DOMAIN).expect("bundled domain is valid")
}
