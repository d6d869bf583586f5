//! Household-world simulator: scene graphs, skills with preconditions and
//! effects, and classification of precondition failures into the ten error
//! types raised during plan execution.

mod domain;

pub use domain::{household, load_domain, load_domain_file, DomainError, HOUSEHOLD_DOMAIN};

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub type ObjectId = u32;
pub type RoomId = u32;

/// Error type 3 (empty program) is raised by the planner, never by the world.
pub const ERR_UNFLIPPED_STATE: u8 = 1;
pub const ERR_FIELD_OF_VIEW: u8 = 2;
pub const ERR_EMPTY_PROGRAM: u8 = 3;
pub const ERR_ABSENT_FROM_ROOM: u8 = 4;
pub const ERR_MISSING_OBJECT: u8 = 5;
pub const ERR_ENCLOSED_OBJECT: u8 = 6;
pub const ERR_INVALID_ACTION: u8 = 7;
pub const ERR_NO_FREE_HAND: u8 = 8;
pub const ERR_AGENT_PROXIMITY: u8 = 9;
pub const ERR_OTHER_PRECONDITION: u8 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Capability {
    Grabbable,
    Openable,
    Switchable,
    Container,
    Surface,
    Sittable,
}

impl Capability {
    pub fn label(&self) -> &'static str {
        match self {
            Capability::Grabbable => "grabbable",
            Capability::Openable => "openable",
            Capability::Switchable => "switchable",
            Capability::Container => "container",
            Capability::Surface => "surface",
            Capability::Sittable => "sittable",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Posture {
    Standing,
    Sitting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Room {
    pub id: RoomId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: ObjectId,
    pub class_name: String,
    pub attributes: BTreeMap<String, bool>,
    pub capabilities: BTreeSet<Capability>,
    pub location: RoomId,
    pub container: Option<ObjectId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentState {
    pub room: RoomId,
    pub proximity: BTreeSet<ObjectId>,
    pub facing: Option<ObjectId>,
    pub hands: Vec<ObjectId>,
    pub posture: Posture,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneGraph {
    pub rooms: Vec<Room>,
    pub objects: Vec<ObjectInstance>,
    pub agent: AgentState,
    pub max_hands: usize,
    pub step_counter: u64,
}

impl SceneGraph {
    pub fn object(&self, id: ObjectId) -> Option<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id)
    }

    fn object_mut(&mut self, id: ObjectId) -> Option<&mut ObjectInstance> {
        self.objects.iter_mut().find(|o| o.id == id)
    }

    /// Lowest id wins among same-named objects.
    pub fn object_by_name(&self, name: &str) -> Option<&ObjectInstance> {
        self.objects
            .iter()
            .filter(|o| o.class_name == name)
            .min_by_key(|o| o.id)
    }

    pub fn room(&self, id: RoomId) -> Option<&Room> {
        self.rooms.iter().find(|r| r.id == id)
    }

    pub fn room_by_name(&self, name: &str) -> Option<&Room> {
        self.rooms.iter().find(|r| r.name == name)
    }

    /// Follows the containment chain; an object is enclosed when any
    /// ancestor container is closed.
    pub fn is_enclosed(&self, id: ObjectId) -> bool {
        let mut cur = self.object(id).and_then(|o| o.container);
        let mut hops = 0;
        while let Some(cid) = cur {
            if let Some(container) = self.object(cid) {
                if !container.attributes.get("open").copied().unwrap_or(false) {
                    return true;
                }
                cur = container.container;
            } else {
                return false;
            }
            hops += 1;
            if hops > self.objects.len() {
                return false; // cycle guard; validated domains are acyclic
            }
        }
        false
    }
}

/// What a predicate or effect refers to: the skill's single parameter or
/// the agent itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Param,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Predicate {
    CloseTo,
    Facing,
    Holding { target: Target },
    FreeHand,
    AttributeIs { attr: String, value: bool },
    SameRoom,
    NotEnclosed,
    HasCapability { tag: Capability },
    PostureIs { value: Posture },
}

impl Predicate {
    /// Appendix-taxonomy error type raised when this predicate is violated.
    pub fn error_type(&self) -> u8 {
        match self {
            Predicate::AttributeIs { .. } => ERR_UNFLIPPED_STATE,
            Predicate::Facing => ERR_FIELD_OF_VIEW,
            Predicate::SameRoom => ERR_ABSENT_FROM_ROOM,
            Predicate::Holding { .. } => ERR_MISSING_OBJECT,
            Predicate::NotEnclosed => ERR_ENCLOSED_OBJECT,
            Predicate::HasCapability { .. } => ERR_INVALID_ACTION,
            Predicate::FreeHand => ERR_NO_FREE_HAND,
            Predicate::CloseTo => ERR_AGENT_PROXIMITY,
            Predicate::PostureIs { .. } => ERR_OTHER_PRECONDITION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Effect {
    /// Set a boolean attribute on the parameter object.
    SetAttribute { attr: String, value: bool },
    /// Add the parameter to the agent's proximity set.
    AddProximity,
    /// Face the parameter.
    SetFacing,
    /// Move the agent to the parameter's room (or to the room itself for a
    /// room target); proximity becomes the target alone, facing clears, and
    /// held objects travel with the agent.
    MoveAgent,
    /// Pick up the parameter object.
    Grab,
    /// Release the first held object onto the parameter (a surface).
    ReleaseOnto,
    /// Release the first held object into the parameter (a container).
    ReleaseInto,
    SetPosture { value: Posture },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillTemplate {
    pub verb: String,
    pub arity: u8,
    #[serde(default)]
    pub room_target: bool,
    pub preconditions: Vec<Predicate>,
    pub effects: Vec<Effect>,
    pub text_form: String,
}

impl SkillTemplate {
    pub fn render(&self, object_name: &str) -> String {
        if self.arity == 0 {
            self.text_form.clone()
        } else {
            self.text_form.replace("<object>", object_name)
        }
    }

    /// Required capability, taken from the skill's own precondition list.
    pub fn required_capability(&self) -> Option<Capability> {
        self.preconditions.iter().find_map(|p| match p {
            Predicate::HasCapability { tag } => Some(*tag),
            _ => None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundedAction {
    pub verb: String,
    pub object_id: Option<ObjectId>,
    pub object_name: String,
    pub rendered: String,
}

impl GroundedAction {
    pub fn from_skill(skill: &SkillTemplate, object_id: Option<ObjectId>, name: &str) -> Self {
        GroundedAction {
            verb: skill.verb.clone(),
            object_id,
            object_name: name.to_string(),
            rendered: skill.render(name),
        }
    }

    /// VirtualHome-style script rendering, e.g. `[GRAB] <milk> (1) [1]`.
    pub fn script_form(&self) -> String {
        let verb = self.verb.replace('_', "").to_uppercase();
        match self.object_id {
            Some(id) => format!("[{}] <{}> ({}) [1]", verb, self.object_name, id),
            None if !self.object_name.is_empty() => {
                format!("[{}] <{}> (0) [1]", verb, self.object_name)
            }
            None => format!("[{}] [1]", verb),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreconditionError {
    pub type_id: u8,
    pub action: GroundedAction,
    pub violated: Predicate,
    pub message: String,
}

impl std::fmt::Display for PreconditionError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "error type {}: {}", self.type_id, self.message)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WorldError {
    #[error("preconditions violated: {0}")]
    ContractViolation(PreconditionError),
}

/// The agent's id in rendered error templates. Scenes are single-agent.
const CHARACTER_ID: u32 = 1;

pub(crate) fn state_word(attr: &str, required: bool) -> String {
    match (attr, required) {
        ("open", true) => "open".into(),
        ("open", false) => "closed".into(),
        ("on", true) => "on".into(),
        ("on", false) => "off".into(),
        (a, true) => a.to_string(),
        (a, false) => format!("not {a}"),
    }
}

fn render_message(
    scene: &SceneGraph,
    action: &GroundedAction,
    violated: &Predicate,
    target: Option<&ObjectInstance>,
) -> String {
    let script = action.script_form();
    let obj_name = target.map(|o| o.class_name.as_str()).unwrap_or(&action.object_name);
    let obj_id = target.map(|o| o.id).unwrap_or(0);
    match violated {
        Predicate::AttributeIs { attr, value } => format!(
            "<{}> ({}) is not {} when executing \"{}\"",
            obj_name,
            obj_id,
            state_word(attr, *value),
            script
        ),
        Predicate::Facing => format!(
            "<character> ({CHARACTER_ID}) does not face <{obj_name}> ({obj_id}) when executing \"{script}\""
        ),
        Predicate::SameRoom => {
            let agent_room = scene.room(scene.agent.room);
            let (ar_name, ar_id) = agent_room
                .map(|r| (r.name.as_str(), r.id))
                .unwrap_or(("unknown", 0));
            let target_room = target.and_then(|o| scene.room(o.location));
            let (tr_name, tr_id) = target_room
                .map(|r| (r.name.as_str(), r.id))
                .unwrap_or(("unknown", 0));
            format!(
                "char room <{ar_name}> ({ar_id}) is not node room <{tr_name}> ({tr_id}) when executing \"{script}\""
            )
        }
        Predicate::Holding { .. } => format!(
            "<character> ({CHARACTER_ID}) is not holding <{obj_name}> ({obj_id}) when executing \"{script}\""
        ),
        Predicate::NotEnclosed => format!(
            "<{obj_name}> ({obj_id}) is inside other closed thing when executing \"{script}\""
        ),
        Predicate::HasCapability { tag } => format!(
            "<{obj_name}> ({obj_id}) does not have {} when executing \"{script}\"",
            tag.label()
        ),
        Predicate::FreeHand => format!(
            "<character> ({CHARACTER_ID}) does not have a free hand when executing \"{script}\""
        ),
        Predicate::CloseTo => format!(
            "<character> ({CHARACTER_ID}) is not close to <{obj_name}> ({obj_id}) when executing \"{script}\""
        ),
        // The taxonomy has no template for type 10.
        Predicate::PostureIs { .. } => "precondition not satisfied".into(),
    }
}

/// Resolution of an action's parameter against a scene.
enum Resolved<'a> {
    Object(&'a ObjectInstance),
    Room(&'a Room),
    None,
}

fn resolve<'a>(scene: &'a SceneGraph, action: &GroundedAction) -> Resolved<'a> {
    if let Some(id) = action.object_id {
        if let Some(o) = scene.object(id) {
            return Resolved::Object(o);
        }
    }
    if action.object_name.is_empty() {
        return Resolved::None;
    }
    if let Some(o) = scene.object_by_name(&action.object_name) {
        return Resolved::Object(o);
    }
    if let Some(r) = scene.room_by_name(&action.object_name) {
        return Resolved::Room(r);
    }
    Resolved::None
}

fn eval_predicate(
    scene: &SceneGraph,
    pred: &Predicate,
    target: Option<&ObjectInstance>,
) -> bool {
    let agent = &scene.agent;
    match pred {
        Predicate::CloseTo => target.is_some_and(|o| agent.proximity.contains(&o.id)),
        Predicate::Facing => target.is_some_and(|o| agent.facing == Some(o.id)),
        Predicate::Holding { target: Target::Agent } => !agent.hands.is_empty(),
        Predicate::Holding { target: Target::Param } => {
            target.is_some_and(|o| agent.hands.contains(&o.id))
        }
        Predicate::FreeHand => agent.hands.len() < scene.max_hands,
        Predicate::AttributeIs { attr, value } => target.is_some_and(|o| {
            o.attributes.get(attr).copied().unwrap_or(false) == *value
        }),
        Predicate::SameRoom => target.is_some_and(|o| o.location == agent.room),
        Predicate::NotEnclosed => target.is_some_and(|o| !scene.is_enclosed(o.id)),
        Predicate::HasCapability { tag } => target.is_some_and(|o| o.capabilities.contains(tag)),
        Predicate::PostureIs { value } => agent.posture == *value,
    }
}

fn find_skill<'a>(skills: &'a [SkillTemplate], verb: &str) -> Option<&'a SkillTemplate> {
    skills.iter().find(|s| s.verb == verb)
}

/// Checks every precondition in declaration order and classifies the first
/// violation into its taxonomy error type.
// the error carries the full grounded action for the trace record; boxing
// it would ripple through every serialized type for no measurable gain
#[allow(clippy::result_large_err)]
pub fn check_preconditions(
    scene: &SceneGraph,
    skills: &[SkillTemplate],
    action: &GroundedAction,
) -> Result<(), PreconditionError> {
    let Some(skill) = find_skill(skills, &action.verb) else {
        return Err(PreconditionError {
            type_id: ERR_INVALID_ACTION,
            action: action.clone(),
            violated: Predicate::HasCapability { tag: Capability::Grabbable },
            message: format!("invalid action \"{}\"", action.verb),
        });
    };

    let resolved = resolve(scene, action);
    let target = match &resolved {
        Resolved::Object(o) => Some(*o),
        _ => None,
    };

    // A room target (e.g. "walk to kitchen") satisfies object-free
    // predicates only; skills that act on rooms carry none.
    if skill.arity == 1 && target.is_none() && !matches!(resolved, Resolved::Room(_)) {
        // Unresolvable name: the object does not exist in any room.
        let violated = Predicate::SameRoom;
        return Err(PreconditionError {
            type_id: ERR_ABSENT_FROM_ROOM,
            action: action.clone(),
            message: render_message(scene, action, &violated, None),
            violated,
        });
    }

    for pred in &skill.preconditions {
        let holds = match pred {
            // Agent-only predicates do not need a resolved object.
            Predicate::PostureIs { .. }
            | Predicate::FreeHand
            | Predicate::Holding { target: Target::Agent } => eval_predicate(scene, pred, None),
            _ => {
                if target.is_none() {
                    continue; // room target; object predicates vacuous
                }
                eval_predicate(scene, pred, target)
            }
        };
        if !holds {
            return Err(PreconditionError {
                type_id: pred.error_type(),
                action: action.clone(),
                message: render_message(scene, action, pred, target),
                violated: pred.clone(),
            });
        }
    }
    Ok(())
}

/// Applies an action's effects atomically; the scene is taken by value so a
/// failed check leaves the caller's copy untouched.
#[allow(clippy::result_large_err)]
pub fn apply_action(
    scene: &SceneGraph,
    skills: &[SkillTemplate],
    action: &GroundedAction,
) -> Result<SceneGraph, WorldError> {
    check_preconditions(scene, skills, action).map_err(WorldError::ContractViolation)?;
    let skill = find_skill(skills, &action.verb).expect("verb checked above");
    let mut next = scene.clone();

    let target_obj = match resolve(scene, action) {
        Resolved::Object(o) => Some(o.id),
        _ => None,
    };
    let target_room = match resolve(scene, action) {
        Resolved::Room(r) => Some(r.id),
        _ => None,
    };

    for effect in &skill.effects {
        match effect {
            Effect::SetAttribute { attr, value } => {
                if let Some(id) = target_obj {
                    if let Some(o) = next.object_mut(id) {
                        o.attributes.insert(attr.clone(), *value);
                    }
                }
            }
            Effect::AddProximity => {
                if let Some(id) = target_obj {
                    next.agent.proximity.insert(id);
                }
            }
            Effect::SetFacing => {
                if let Some(id) = target_obj {
                    next.agent.proximity.insert(id);
                    next.agent.facing = Some(id);
                }
            }
            Effect::MoveAgent => {
                let room = target_room
                    .or_else(|| target_obj.and_then(|id| next.object(id).map(|o| o.location)));
                if let Some(room) = room {
                    next.agent.room = room;
                    next.agent.proximity = target_obj.into_iter().collect();
                    next.agent.facing = None;
                    let held = next.agent.hands.clone();
                    for id in held {
                        if let Some(o) = next.object_mut(id) {
                            o.location = room;
                        }
                    }
                }
            }
            Effect::Grab => {
                if let Some(id) = target_obj {
                    let room = next.agent.room;
                    next.agent.hands.push(id);
                    if let Some(o) = next.object_mut(id) {
                        o.attributes.insert("grabbed".into(), true);
                        o.container = None;
                        o.location = room;
                    }
                }
            }
            Effect::ReleaseOnto | Effect::ReleaseInto => {
                if next.agent.hands.is_empty() {
                    continue;
                }
                let held = next.agent.hands.remove(0);
                let room = next.agent.room;
                let into = matches!(effect, Effect::ReleaseInto).then_some(target_obj).flatten();
                if let Some(o) = next.object_mut(held) {
                    o.attributes.insert("grabbed".into(), false);
                    o.container = into;
                    o.location = room;
                }
            }
            Effect::SetPosture { value } => {
                next.agent.posture = *value;
            }
        }
    }
    next.step_counter += 1;
    Ok(next)
}

/// All admissible grounded actions in the scene: every arity-0 skill plus
/// each arity-1 skill paired with every capability-compatible object (and,
/// for room-target skills, every room). Ordered by verb, then id, then name.
pub fn enumerate_repertoire(scene: &SceneGraph, skills: &[SkillTemplate]) -> Vec<GroundedAction> {
    let mut out = Vec::new();
    for skill in skills {
        if skill.arity == 0 {
            out.push(GroundedAction::from_skill(skill, None, ""));
            continue;
        }
        if skill.room_target {
            for room in &scene.rooms {
                out.push(GroundedAction::from_skill(skill, None, &room.name));
            }
        }
        let required = skill.required_capability();
        for obj in &scene.objects {
            if required.is_none_or(|cap| obj.capabilities.contains(&cap)) {
                out.push(GroundedAction::from_skill(skill, Some(obj.id), &obj.class_name));
            }
        }
    }
    out.sort_by(|a, b| {
        (&a.verb, a.object_id.unwrap_or(0), &a.object_name)
            .cmp(&(&b.verb, b.object_id.unwrap_or(0), &b.object_name))
    });
    out
}

/// Parses an admissible-action string back into (verb, object name) by
/// matching skill text forms. Round-trips with `SkillTemplate::render`.
pub fn parse_action(skills: &[SkillTemplate], rendered: &str) -> Option<(String, String)> {
    let rendered = rendered.trim();
    // Longest prefix first so "switch on x" never parses as a shorter form.
    let mut ordered: Vec<&SkillTemplate> = skills.iter().collect();
    ordered.sort_by_key(|s| std::cmp::Reverse(s.text_form.len()));
    for skill in ordered {
        if skill.arity == 0 {
            if rendered == skill.text_form {
                return Some((skill.verb.clone(), String::new()));
            }
            continue;
        }
        let prefix = skill.text_form.trim_end_matches("<object>");
        if let Some(rest) = rendered.strip_prefix(prefix) {
            if !rest.is_empty() {
                return Some((skill.verb.clone(), rest.to_string()));
            }
        }
    }
    None
}
