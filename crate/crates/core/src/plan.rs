//! Planner prompt construction and the structured plan wire format.
//!
//! The planner receives a single plain-text prompt and must answer with a
//! JSON object of the form
//!
//! ```json
//! {"schema":"mcot_plan_v1","sub_prompts":[{"id":1,"text":"..."}],"rationale":"...","double_checked":true}
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PLAN_SCHEMA: &str = "mcot_plan_v1";
pub const DEFAULT_MAX_STEPS: usize = 3;
pub const COT_TRIGGER: &str = "Let us think step by step.";
pub const DOUBLE_CHECK_PHRASE: &str = "Please double check it when you generate the answer.";
pub const DEFAULT_ABILITY_PRIOR: &str =
    "The editing network reasons about the editing region of each \
sub-instruction by itself, so do not add instructions that only move, locate or position content.";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub text: String,
    /// Description of the input image.
    pub global_description: String,
}

impl Instruction {
    pub fn new(text: impl Into<String>, global_description: impl Into<String>) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::validation("instruction text is empty"));
        }
        Ok(Self {
            text,
            global_description: global_description.into(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubPrompt {
    pub id: usize,
    pub text: String,
}

impl SubPrompt {
    pub fn new(id: usize, text: impl Into<String>) -> Self {
        Self {
            id,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditPlan {
    sub_prompts: Vec<SubPrompt>,
    pub rationale: String,
    pub double_checked: bool,
}

impl EditPlan {
    /// Builds a plan from ordered sub-prompt texts, numbering them from 1.
    pub fn from_texts<S: Into<String>>(
        texts: impl IntoIterator<Item = S>,
        rationale: impl Into<String>,
        double_checked: bool,
        max_steps: usize,
    ) -> Result<Self> {
        let sub_prompts = texts
            .into_iter()
            .enumerate()
            .map(|(i, t)| SubPrompt::new(i + 1, t))
            .collect();
        validate(sub_prompts, rationale.into(), double_checked, max_steps)
    }

    pub fn sub_prompts(&self) -> &[SubPrompt] {
        &self.sub_prompts
    }

    pub fn len(&self) -> usize {
        self.sub_prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sub_prompts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannerPromptConfig {
    pub max_steps: usize,
    pub ability_prior: String,
    pub cot_trigger: String,
    pub double_check_phrase: String,
}

impl PlannerPromptConfig {
    pub fn with_max_steps(max_steps: usize) -> Self {
        Self {
            max_steps,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::validation("K must be at least 1"));
        }
        if self.cot_trigger.trim().is_empty() || self.double_check_phrase.trim().is_empty() {
            return Err(Error::validation(
                "trigger and double-check phrases must be nonempty",
            ));
        }
        Ok(())
    }
}

impl Default for PlannerPromptConfig {
    fn default() -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            ability_prior: DEFAULT_ABILITY_PRIOR.to_string(),
            cot_trigger: COT_TRIGGER.to_string(),
            double_check_phrase: DOUBLE_CHECK_PHRASE.to_string(),
        }
    }
}

/// Line prefix that carries the user instruction inside the prompt.
pub const INSTRUCTION_PREFIX: &str = "Instruction: ";

pub fn build_planner_prompt(instr: &Instruction, cfg: &PlannerPromptConfig) -> Result<String> {
    if instr.text.trim().is_empty() {
        return Err(Error::validation("instruction text is empty"));
    }
    cfg.validate()?;
    let k = cfg.max_steps;
    let plural = if k == 1 { "" } else { "s" };
    let mut out = String::new();
    out.push_str("You plan instruction-based image edits.\n");
    out.push_str(&format!(
        "Image description: {}\n",
        instr.global_description.trim()
    ));
    out.push_str(&format!("{INSTRUCTION_PREFIX}{}\n", instr.text.trim()));
    out.push_str(&format!("Editor ability: {}\n", cfg.ability_prior.trim()));
    out.push_str(&format!(
        "Decompose the instruction into at most {k} ordered sub-prompt{plural}. \
         Each sub-prompt must be a concrete edit that the editor can apply in one pass.\n"
    ));
    out.push_str(cfg.cot_trigger.trim());
    out.push('\n');
    out.push_str(cfg.double_check_phrase.trim());
    out.push('\n');
    out.push_str(&format!(
        "Respond with only a JSON object: {{\"schema\":\"{PLAN_SCHEMA}\",\
         \"sub_prompts\":[{{\"id\":1,\"text\":\"...\"}}],\"rationale\":\"...\",\
         \"double_checked\":true}} with between 1 and {k} entries in sub_prompts, ids numbered from 1.\n"
    ));
    Ok(out)
}

/// Recovers the user instruction from a prompt built by [`build_planner_prompt`].
pub fn instruction_from_prompt(prompt: &str) -> Option<&str> {
    prompt
        .lines()
        .find_map(|l| l.strip_prefix(INSTRUCTION_PREFIX))
        .map(str::trim)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanWire {
    schema: String,
    sub_prompts: Vec<SubPrompt>,
    #[serde(default)]
    rationale: String,
    #[serde(default)]
    double_checked: bool,
}

fn validate(
    mut sub_prompts: Vec<SubPrompt>,
    rationale: String,
    double_checked: bool,
    max_steps: usize,
) -> Result<EditPlan> {
    let k = sub_prompts.len();
    if k == 0 || k > max_steps {
        return Err(Error::PlanBounds { k, max: max_steps });
    }
    sub_prompts.sort_by_key(|s| s.id);
    for (i, sp) in sub_prompts.iter().enumerate() {
        if sp.id != i + 1 {
            return Err(Error::Schema(format!(
                "sub-prompt ids must be exactly 1..={k} without duplicates"
            )));
        }
        if sp.text.trim().is_empty() {
            return Err(Error::Schema(format!(
                "sub-prompt {} has empty text",
                sp.id
            )));
        }
    }
    Ok(EditPlan {
        sub_prompts,
        rationale,
        double_checked,
    })
}

/// Parses and validates a planner response. Plans longer than `max_steps`
/// are rejected, never truncated.
pub fn parse_plan(payload: &str, max_steps: usize) -> Result<EditPlan> {
    let wire: PlanWire = serde_json::from_str(payload).map_err(|e| Error::Parse(e.to_string()))?;
    if wire.schema != PLAN_SCHEMA {
        return Err(Error::Schema(format!(
            "unsupported plan schema `{}`, expected `{PLAN_SCHEMA}`",
            wire.schema
        )));
    }
    validate(
        wire.sub_prompts,
        wire.rationale,
        wire.double_checked,
        max_steps,
    )
}

/// Canonical JSON: keys sorted, sub-prompts ordered by id.
pub fn serialize_plan(plan: &EditPlan) -> String {
    let wire = PlanWire {
        schema: PLAN_SCHEMA.to_string(),
        sub_prompts: plan.sub_prompts.clone(),
        rationale: plan.rationale.clone(),
        double_checked: plan.double_checked,
    };
    // Going through Value sorts object keys.
    let value = serde_json::to_value(&wire).expect("plan is always representable");
    value.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const DRAMATIC: &str = r#"{"schema":"mcot_plan_v1","sub_prompts":[{"id":1,"text":"add turbulent waves"},{"id":2,"text":"add dark storm clouds and lightning"}],"rationale":"waves first, then sky","double_checked":true}"#;

    fn dramatic() -> Instruction {
        Instruction::new("make it dramatic", "a calm sea at night").unwrap()
    }

    #[test]
    fn prompt_contains_every_element_in_order() {
        let prompt = build_planner_prompt(&dramatic(), &PlannerPromptConfig::default()).unwrap();
        let anchors = [
            "a calm sea at night",
            "make it dramatic",
            "reasons about the editing region",
            "at most 3 ordered sub-prompts",
            "Let us think step by step",
            "Please double check it when you generate the answer",
            "\"schema\":\"mcot_plan_v1\"",
        ];
        let mut cursor = 0;
        for a in anchors {
            let pos = prompt[cursor..]
                .find(a)
                .unwrap_or_else(|| panic!("missing or out of order: {a}"));
            cursor += pos + a.len();
        }
    }

    #[test]
    fn prompt_with_single_step() {
        let prompt =
            build_planner_prompt(&dramatic(), &PlannerPromptConfig::with_max_steps(1)).unwrap();
        assert!(prompt.contains("at most 1 ordered sub-prompt."));
        assert!(prompt.contains("between 1 and 1 entries"));
    }

    #[test]
    fn prompt_is_deterministic_and_recoverable() {
        let cfg = PlannerPromptConfig::default();
        let a = build_planner_prompt(&dramatic(), &cfg).unwrap();
        let b = build_planner_prompt(&dramatic(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(instruction_from_prompt(&a), Some("make it dramatic"));
    }

    #[test]
    fn empty_instruction_rejected() {
        assert!(Instruction::new("  ", "x").is_err());
        let bad = Instruction {
            text: String::new(),
            global_description: String::new(),
        };
        assert!(matches!(
            build_planner_prompt(&bad, &PlannerPromptConfig::default()),
            Err(Error::Validation(_))
        ));
        assert!(
            build_planner_prompt(&dramatic(), &PlannerPromptConfig::with_max_steps(0)).is_err()
        );
    }

    #[test]
    fn parses_two_step_plan() {
        let plan = parse_plan(DRAMATIC, 3).unwrap();
        assert_eq!(plan.len(), 2);
        assert_eq!(plan.sub_prompts()[0].text, "add turbulent waves");
        assert!(plan.double_checked);
    }

    #[test]
    fn parses_single_step_plan() {
        let plan = parse_plan(r#"{"schema":"mcot_plan_v1","sub_prompts":[{"id":1,"text":"x"}],"rationale":"","double_checked":false}"#, 3).unwrap();
        assert_eq!(plan.len(), 1);
    }

    #[test]
    fn rejects_bad_plans() {
        let four = r#"{"schema":"mcot_plan_v1","sub_prompts":[{"id":1,"text":"a"},{"id":2,"text":"b"},{"id":3,"text":"c"},{"id":4,"text":"d"}],"rationale":"","double_checked":true}"#;
        assert!(matches!(
            parse_plan(four, 3),
            Err(Error::PlanBounds { k: 4, max: 3 })
        ));
        let none =
            r#"{"schema":"mcot_plan_v1","sub_prompts":[],"rationale":"","double_checked":true}"#;
        assert!(matches!(
            parse_plan(none, 3),
            Err(Error::PlanBounds { k: 0, .. })
        ));
        let dup =
            r#"{"schema":"mcot_plan_v1","sub_prompts":[{"id":1,"text":"a"},{"id":1,"text":"b"}]}"#;
        assert!(matches!(parse_plan(dup, 3), Err(Error::Schema(_))));
        let gap =
            r#"{"schema":"mcot_plan_v1","sub_prompts":[{"id":1,"text":"a"},{"id":3,"text":"b"}]}"#;
        assert!(matches!(parse_plan(gap, 3), Err(Error::Schema(_))));
        let blank = r#"{"schema":"mcot_plan_v1","sub_prompts":[{"id":1,"text":"  "}]}"#;
        assert!(matches!(parse_plan(blank, 3), Err(Error::Schema(_))));
        let version = r#"{"schema":"other","sub_prompts":[{"id":1,"text":"a"}]}"#;
        assert!(matches!(parse_plan(version, 3), Err(Error::Schema(_))));
        assert!(matches!(parse_plan("{not json", 3), Err(Error::Parse(_))));
    }

    #[test]
    fn out_of_order_ids_follow_id_order() {
        let p = r#"{"schema":"mcot_plan_v1","sub_prompts":[{"id":2,"text":"second"},{"id":1,"text":"first"}]}"#;
        let plan = parse_plan(p, 3).unwrap();
        assert_eq!(plan.sub_prompts()[0].text, "first");
    }

    #[test]
    fn serialization_is_canonical_and_escaped() {
        let plan = EditPlan::from_texts(
            ["say \"hi\"\nthen\tleave"],
            "quote \" and \\ newline\n",
            true,
            3,
        )
        .unwrap();
        let a = serialize_plan(&plan);
        assert_eq!(a, serialize_plan(&plan));
        assert!(a.contains(r#""text":"say \"hi\"\nthen\tleave""#));
        // Keys come out sorted.
        let d = a.find("\"double_checked\"").unwrap();
        let r = a.find("\"rationale\"").unwrap();
        let s = a.find("\"schema\"").unwrap();
        let sp = a.find("\"sub_prompts\"").unwrap();
        assert!(d < r && r < s && s < sp);
        assert_eq!(parse_plan(&a, 3).unwrap(), plan);
        let dramatic = parse_plan(DRAMATIC, 3).unwrap();
        assert_eq!(parse_plan(&serialize_plan(&dramatic), 3).unwrap(), dramatic);
    }

    proptest! {
        #[test]
        fn parse_inverts_serialize(
            max in 1usize..6,
            texts in proptest::collection::vec("[ -~]{0,12}[a-z]", 1..6),
            rationale in "\\PC{0,40}",
            checked: bool,
        ) {
            prop_assume!(texts.len() <= max);
            let plan = EditPlan::from_texts(texts, rationale, checked, max).unwrap();
            let back = parse_plan(&serialize_plan(&plan), max).unwrap();
            prop_assert!((1..=max).contains(&back.len()));
            prop_assert_eq!(back, plan);
        }
    }
}
