//! The three-action pseudocode grammar.
//!
//! A plan starts with a *skeleton*: the shape of the expression tree, with
//! operator holes (`?`) and leaf holes (`_`) listed in preorder. Refinement
//! fills one hole at a time with an operator or a leaf. Once every hole is
//! filled the only legal action is emitting the code, which is the preorder
//! sequence of fillers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PolicyError;
use crate::minilang::{render_tokens, tokenize, BinOp, Token};

/// Marker placed between rendered steps.
pub const STEP_DELIMITER: &str = "\n<|step|>\n";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SlotKind {
    Op,
    Leaf,
}

impl SlotKind {
    pub fn fillers(self) -> Vec<Token> {
        match self {
            SlotKind::Op => BinOp::ALL.iter().map(|&op| Token::Op(op)).collect(),
            SlotKind::Leaf => Token::leaves(),
        }
    }

    pub fn accepts(self, t: Token) -> bool {
        t.is_op() == (self == SlotKind::Op)
    }
}

/// Tree shape in preorder. Always operator-rooted.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Skeleton {
    slots: Vec<SlotKind>,
    children: Vec<Option<(usize, usize)>>,
    depths: Vec<usize>,
}

impl Skeleton {
    pub fn from_slots(slots: Vec<SlotKind>) -> Option<Self> {
        if slots.first() != Some(&SlotKind::Op) {
            return None;
        }
        let mut children = vec![None; slots.len()];
        let mut depths = vec![0; slots.len()];
        let mut pos = 0;
        fn walk(
            slots: &[SlotKind],
            pos: &mut usize,
            depth: usize,
            children: &mut [Option<(usize, usize)>],
            depths: &mut [usize],
        ) -> Option<usize> {
            let at = *pos;
            let kind = *slots.get(at)?;
            *pos += 1;
            depths[at] = depth;
            if kind == SlotKind::Op {
                let l = walk(slots, pos, depth + 1, children, depths)?;
                let r = walk(slots, pos, depth + 1, children, depths)?;
                children[at] = Some((l, r));
            }
            Some(at)
        }
        walk(&slots, &mut pos, 0, &mut children, &mut depths)?;
        if pos != slots.len() {
            return None;
        }
        Some(Skeleton {
            slots,
            children,
            depths,
        })
    }

    /// Every operator-rooted shape of depth `1..=max_depth`, smallest first.
    pub fn all_up_to(max_depth: usize) -> Vec<Skeleton> {
        fn shapes(d: usize) -> Vec<Vec<SlotKind>> {
            let mut out = vec![vec![SlotKind::Leaf]];
            if d > 0 {
                let sub = shapes(d - 1);
                for l in &sub {
                    for r in &sub {
                        let mut s = vec![SlotKind::Op];
                        s.extend(l);
                        s.extend(r);
                        out.push(s);
                    }
                }
            }
            out
        }
        if max_depth == 0 {
            return Vec::new();
        }
        let mut all: Vec<Vec<SlotKind>> = shapes(max_depth).into_iter().skip(1).collect();
        all.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
        all.into_iter()
            .map(|s| Skeleton::from_slots(s).expect("generated shapes are well formed"))
            .collect()
    }

    pub fn slots(&self) -> &[SlotKind] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn children(&self, i: usize) -> Option<(usize, usize)> {
        self.children[i]
    }

    pub fn slot_depth(&self, i: usize) -> usize {
        self.depths[i]
    }

    pub fn depth(&self) -> usize {
        self.depths.iter().copied().max().unwrap_or(0)
    }
}

impl fmt::Display for Skeleton {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self
            .slots
            .iter()
            .map(|s| match s {
                SlotKind::Op => "?",
                SlotKind::Leaf => "_",
            })
            .collect();
        f.write_str(&parts.join(" "))
    }
}

impl FromStr for Skeleton {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let slots = s
            .split_whitespace()
            .map(|t| match t {
                "?" => Ok(SlotKind::Op),
                "_" => Ok(SlotKind::Leaf),
                other => Err(format!("bad skeleton symbol {other:?}")),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Skeleton::from_slots(slots).ok_or_else(|| format!("malformed skeleton {s:?}"))
    }
}

impl Serialize for Skeleton {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Skeleton {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActionKind {
    DefineStructure,
    RefinePseudocode,
    EmitCode,
}

/// One reasoning step.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReasoningStep {
    DefineStructure { skeleton: Skeleton },
    RefinePseudocode { hole: usize, filler: Token },
    EmitCode { code: Vec<Token> },
}

impl ReasoningStep {
    pub fn kind(&self) -> ActionKind {
        match self {
            ReasoningStep::DefineStructure { .. } => ActionKind::DefineStructure,
            ReasoningStep::RefinePseudocode { .. } => ActionKind::RefinePseudocode,
            ReasoningStep::EmitCode { .. } => ActionKind::EmitCode,
        }
    }

    /// Parses the text form produced by `Display`.
    pub fn parse_text(text: &str) -> Option<ReasoningStep> {
        let text = text.trim();
        let (head, rest) = text.split_once(char::is_whitespace).unwrap_or((text, ""));
        let rest = rest.trim();
        match head {
            "define" => rest
                .parse()
                .ok()
                .map(|skeleton| ReasoningStep::DefineStructure { skeleton }),
            "refine" => {
                let mut it = rest.split_whitespace();
                let hole = it.next()?.parse().ok()?;
                let filler = it.next()?.parse().ok()?;
                if it.next().is_some() {
                    return None;
                }
                Some(ReasoningStep::RefinePseudocode { hole, filler })
            }
            "emit" => tokenize(rest)
                .ok()
                .filter(|c| !c.is_empty())
                .map(|code| ReasoningStep::EmitCode { code }),
            _ => None,
        }
    }
}

impl fmt::Display for ReasoningStep {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ReasoningStep::DefineStructure { skeleton } => write!(f, "define {skeleton}"),
            ReasoningStep::RefinePseudocode { hole, filler } => write!(f, "refine {hole} {filler}"),
            ReasoningStep::EmitCode { code } => write!(f, "emit {}", render_tokens(code)),
        }
    }
}

/// A skeleton with some holes filled.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Plan {
    skeleton: Skeleton,
    fills: Vec<Option<Token>>,
}

impl Plan {
    pub fn new(skeleton: Skeleton) -> Self {
        let fills = vec![None; skeleton.len()];
        Plan { skeleton, fills }
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn fill(&self, i: usize) -> Option<Token> {
        self.fills[i]
    }

    pub fn open_holes(&self) -> impl Iterator<Item = usize> + '_ {
        self.fills
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_none())
            .map(|(i, _)| i)
    }

    pub fn num_open(&self) -> usize {
        self.fills.iter().filter(|f| f.is_none()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.fills.iter().all(Option::is_some)
    }

    pub fn with_fill(&self, hole: usize, filler: Token) -> Result<Plan, PolicyError> {
        match (self.skeleton.slots.get(hole), self.fills.get(hole)) {
            (Some(kind), Some(None)) if kind.accepts(filler) => {
                let mut next = self.clone();
                next.fills[hole] = Some(filler);
                Ok(next)
            }
            _ => Err(PolicyError::InvalidPrefix(format!(
                "cannot fill hole {hole} with {filler}"
            ))),
        }
    }

    /// Preorder fillers, with open holes given the first filler of their kind.
    pub fn default_completion(&self) -> Vec<Token> {
        self.skeleton
            .slots
            .iter()
            .zip(&self.fills)
            .map(|(kind, fill)| fill.unwrap_or_else(|| kind.fillers()[0]))
            .collect()
    }
}

/// Where a prefix of steps has got to.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanState {
    Start,
    Planning(Plan),
    Done(Vec<Token>),
}

impl PlanState {
    /// Replays `prefix`, checking each step against the grammar.
    pub fn replay(grammar: &Grammar, prefix: &[ReasoningStep]) -> Result<PlanState, PolicyError> {
        prefix
            .iter()
            .try_fold(PlanState::Start, |state, step| state.advance(grammar, step))
    }

    pub fn advance(
        &self,
        grammar: &Grammar,
        step: &ReasoningStep,
    ) -> Result<PlanState, PolicyError> {
        let invalid = |why: &str| Err(PolicyError::InvalidPrefix(format!("{why}: {step}")));
        match (self, step) {
            (PlanState::Start, ReasoningStep::DefineStructure { skeleton }) => {
                if skeleton.depth() > grammar.max_depth {
                    return invalid("skeleton deeper than the grammar allows");
                }
                Ok(PlanState::Planning(Plan::new(skeleton.clone())))
            }
            (PlanState::Planning(plan), ReasoningStep::RefinePseudocode { hole, filler }) => {
                Ok(PlanState::Planning(plan.with_fill(*hole, *filler)?))
            }
            // A truncated plan may be emitted with its default completion.
            (PlanState::Planning(plan), ReasoningStep::EmitCode { code }) => {
                if *code == plan.default_completion() {
                    Ok(PlanState::Done(code.clone()))
                } else {
                    invalid("emitted code does not match the plan")
                }
            }
            (PlanState::Start, ReasoningStep::EmitCode { code }) => {
                if *code == grammar.fallback_code() {
                    Ok(PlanState::Done(code.clone()))
                } else {
                    invalid("emitted code without a plan")
                }
            }
            (PlanState::Done(_), _) => invalid("step after code was emitted"),
            _ => invalid("step out of order"),
        }
    }

    /// The EmitCode step forced on a truncated prefix.
    pub fn forced_emit(&self, grammar: &Grammar) -> Option<ReasoningStep> {
        match self {
            PlanState::Start => Some(ReasoningStep::EmitCode {
                code: grammar.fallback_code(),
            }),
            PlanState::Planning(plan) => Some(ReasoningStep::EmitCode {
                code: plan.default_completion(),
            }),
            PlanState::Done(_) => None,
        }
    }
}

/// Static limits of the step grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grammar {
    /// Deepest skeleton DefineStructure may propose.
    pub max_depth: usize,
}

impl Grammar {
    pub fn new(max_depth: usize) -> Self {
        Grammar { max_depth }
    }

    pub fn skeletons(&self) -> Vec<Skeleton> {
        Skeleton::all_up_to(self.max_depth)
    }

    fn fallback_code(&self) -> Vec<Token> {
        Plan::new(Skeleton::all_up_to(1).remove(0)).default_completion()
    }

    /// Legal next steps after `prefix`.
    pub fn candidate_actions(
        &self,
        prefix: &[ReasoningStep],
    ) -> Result<Vec<ReasoningStep>, PolicyError> {
        self.candidates_for(&PlanState::replay(self, prefix)?)
    }

    pub fn candidates_for(&self, state: &PlanState) -> Result<Vec<ReasoningStep>, PolicyError> {
        match state {
            PlanState::Start => Ok(self
                .skeletons()
                .into_iter()
                .map(|skeleton| ReasoningStep::DefineStructure { skeleton })
                .collect()),
            PlanState::Planning(plan) if plan.is_complete() => Ok(vec![ReasoningStep::EmitCode {
                code: plan.default_completion(),
            }]),
            PlanState::Planning(plan) => Ok(plan
                .open_holes()
                .flat_map(|hole| {
                    plan.skeleton.slots[hole]
                        .fillers()
                        .into_iter()
                        .map(move |filler| ReasoningStep::RefinePseudocode { hole, filler })
                })
                .collect()),
            PlanState::Done(_) => Err(PolicyError::InvalidPrefix(
                "prefix already emitted code".into(),
            )),
        }
    }
}

impl Default for Grammar {
    fn default() -> Self {
        Grammar::new(2)
    }
}

/// A complete reasoning path for one problem.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Trajectory {
    pub problem_id: String,
    pub steps: Vec<ReasoningStep>,
    pub final_code: Vec<Token>,
}

impl Trajectory {
    /// Checks the structural invariants and grammar legality.
    pub fn validate(&self, grammar: &Grammar) -> Result<(), PolicyError> {
        let bad = |why: &str| {
            Err(PolicyError::InvalidPrefix(format!(
                "trajectory {}: {why}",
                self.problem_id
            )))
        };
        match self.steps.first().map(ReasoningStep::kind) {
            Some(ActionKind::DefineStructure) => {}
            // A prefix truncated before any plan is the only exception.
            Some(ActionKind::EmitCode) if self.steps.len() == 1 => {}
            _ => return bad("must start with DefineStructure"),
        }
        let emits = self
            .steps
            .iter()
            .filter(|s| s.kind() == ActionKind::EmitCode)
            .count();
        if emits != 1 {
            return bad("must contain exactly one EmitCode");
        }
        match self.steps.last() {
            Some(ReasoningStep::EmitCode { code }) if *code == self.final_code => {}
            _ => return bad("must end with EmitCode carrying final_code"),
        }
        PlanState::replay(grammar, &self.steps).map(|_| ())
    }

    pub fn render(&self) -> String {
        self.steps
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(STEP_DELIMITER)
    }
}
