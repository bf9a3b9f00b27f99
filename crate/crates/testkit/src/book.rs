//! Rule-based stand-in for a chat model.
//!
//! [`ScriptBook`] answers every role from the structured input embedded in
//! the prompt. Fixture trajectories may override tip text and segmentation
//! through annotation files in `fixtures/annotations/<trajectory-id>.json`;
//! everything else follows keyword rules, so any input gets a valid reply.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;
use serde_json::{json, Value};
use tmem_core::curation::EntityLexicon;
use tmem_core::extraction::is_error_result;
use tmem_core::llm::{ChatProvider, ProviderError, Role};
use tmem_core::model::{AttributionKind, CausalNode, PatternKind, Priority, ThoughtCategory, TipCategory};
use tmem_core::prompts::{
    extract_input, AttributionInput, CategorizerInput, ConsolidatorInput, GeneralizerInput, MemberView, OutcomeInput,
    PatternInput, SegmenterInput, SelectorInput, StepView, SubtaskTipperInput, TipGenInput,
};
use tmem_core::schema::{SegmentationPayload, SubtaskTipsPayload, TipGenPayload};

/// Application names the generalizer rule abstracts away.
pub const KNOWN_APPS: &[&str] =
    &["amazon", "venmo", "spotify", "phone", "gmail", "simple_note", "splitwise", "todoist", "file_system", "supervisor"];

/// Per-trajectory overrides.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Annotation {
    #[serde(default)]
    pub segmentation: Option<SegmentationPayload>,
    /// Keyed by tip category name.
    #[serde(default)]
    pub task_tips: BTreeMap<String, TipGenPayload>,
    /// Keyed by subtask index.
    #[serde(default)]
    pub subtask_tips: BTreeMap<String, SubtaskTipsPayload>,
}

#[derive(Debug, Clone, Default)]
pub struct ScriptBook {
    annotations: BTreeMap<String, Annotation>,
}

fn contains_any(text: &str, words: &[&str]) -> bool {
    let lower = text.to_lowercase();
    words.iter().any(|w| lower.contains(w))
}

/// Coarse task category from keywords.
pub fn classify_task(text: &str) -> Option<&'static str> {
    const RULES: &[(&str, &[&str])] = &[
        ("shopping", &["cart", "checkout", "check out", "order", "buy", "purchase", "shop"]),
        ("payments", &["pay", "venmo", "money", "transaction", "owe", "dollars"]),
        ("music", &["song", "artist", "music", "spotify", "playlist"]),
        ("authentication", &["login", "log in", "authenticate", "password", "credential"]),
    ];
    RULES.iter().find(|(_, words)| contains_any(text, words)).map(|(c, _)| *c)
}

fn lower_first(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_lowercase().chain(c).collect(),
        None => String::new(),
    }
}

/// `app.fn(args) -> result` reduced to `app.fn`.
fn action_of(desc: &str) -> String {
    desc.split(['(', ' ']).next().unwrap_or(desc).to_owned()
}

fn step_name(s: &StepView) -> Option<String> {
    s.action.as_deref().map(action_of)
}

fn summary(s: &StepView) -> String {
    match (&s.action, &s.action_result) {
        (Some(a), Some(r)) => format!("{a} -> {r}"),
        (Some(a), None) => a.clone(),
        _ => s.response.lines().next().unwrap_or_default().to_owned(),
    }
}

fn node(steps: &[StepView], i: usize) -> CausalNode {
    CausalNode { step_index: i, description: steps.get(i).map(summary).unwrap_or_default() }
}

fn is_error(s: &StepView) -> bool {
    s.action_result.as_deref().is_some_and(is_error_result)
}

impl ScriptBook {
    /// Rules only, no annotations.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_annotation(mut self, trajectory_id: &str, a: Annotation) -> Self {
        self.annotations.insert(trajectory_id.to_owned(), a);
        self
    }

    /// Loads every `<trajectory-id>.json` in `dir`.
    pub fn from_dir(dir: &Path) -> anyhow::Result<Self> {
        let mut book = Self::new();
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.path());
        for e in entries {
            let path = e.path();
            if path.extension().and_then(|x| x.to_str()) != Some("json") {
                continue;
            }
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_owned();
            let a: Annotation = serde_json::from_str(&std::fs::read_to_string(&path)?)
                .map_err(|err| anyhow::anyhow!("{}: {err}", path.display()))?;
            book.annotations.insert(id, a);
        }
        Ok(book)
    }

    /// The book used for every checked-in fixture.
    pub fn fixtures() -> Self {
        Self::from_dir(&crate::fixtures::fixtures_dir().join("annotations")).expect("fixture annotations load")
    }

    /// Payload for `role`, or `None` when the prompt carries no readable input.
    pub fn respond(&self, role: Role, prompt: &str) -> Option<Value> {
        Some(match role {
            Role::ThoughtCategorizer => categorize(&extract_input(prompt)?),
            Role::PatternDetector => detect_patterns(&extract_input(prompt)?),
            Role::OutcomeInterpreter => interpret(&extract_input(prompt)?),
            Role::AttributionAnalyst => attribute(&extract_input(prompt)?),
            Role::TipGenerator => self.task_tips(&extract_input(prompt)?),
            Role::Segmenter => self.segment(&extract_input(prompt)?),
            Role::SubtaskTipper => self.subtask_tips(&extract_input(prompt)?),
            Role::Generalizer => generalize(&extract_input(prompt)?),
            Role::Consolidator => consolidate(&extract_input(prompt)?),
            Role::RetrievalSelector => select(&extract_input(prompt)?),
        })
    }

    fn task_tips(&self, input: &TipGenInput) -> Value {
        if let Some(p) = self.annotations.get(&input.trajectory_id).and_then(|a| a.task_tips.get(input.category.as_str())) {
            return serde_json::to_value(p).expect("payload serializes");
        }
        let a = &input.attribution;
        let task = lower_first(input.task_description.trim_end_matches('.'));
        let imm = action_of(&a.immediate_cause.description);
        let root = action_of(&a.root_cause.description);
        let app = input.app_hints.first().map(|s| s.to_lowercase());
        let category = classify_task(&input.task_description);
        let steps = if a.improvement_steps.is_empty() {
            vec!["Plan the calls before starting".to_owned(), "Check each result before the next call".to_owned()]
        } else {
            a.improvement_steps.clone()
        };
        let trigger = format!("When a task involves {}", category.unwrap_or("similar operations"));
        let (content, negative, generic) = match input.category {
            TipCategory::Strategy => (
                format!("When the task is to {task}, plan the calls up front and confirm each result before giving the final answer."),
                None,
                "Plan the required calls before acting and confirm each result before moving on.".to_owned(),
            ),
            TipCategory::Recovery => (
                format!("When {imm} fails in a task like this, fix the cause traced back to {root} before retrying."),
                Some(format!("Do not retry {imm} unchanged.")),
                "When a call fails, trace the failure back to the earliest wrong decision and fix that first.".to_owned(),
            ),
            TipCategory::Optimization => (
                format!("When the task is to {task}, avoid repeating {imm} once per item; look for a single call that covers all items."),
                Some(format!("Do not call {imm} in a loop when one call suffices.")),
                "Prefer one bulk call over repeating a single-item call for every element.".to_owned(),
            ),
        };
        let purpose = format!("Learned from a {} execution.", input.attribution.outcome_kind.as_str().replace('_', " "));
        json!({"tips": [{
            "content": content,
            "purpose": purpose,
            "steps": steps,
            "trigger": trigger,
            "negative_example": negative,
            "application_context": app,
            "task_category": category,
            "generalizable": true,
            "generic_variant": {
                "content": generic,
                "purpose": purpose,
                "steps": steps,
                "trigger": "When a task follows the same pattern in any application",
                "negative_example": negative.as_ref().map(|_| "Do not repeat a failing or redundant call unchanged."),
            }
        }]})
    }

    fn segment(&self, input: &SegmenterInput) -> Value {
        if let Some(p) = self.annotations.get(&input.trajectory_id).and_then(|a| a.segmentation.as_ref()) {
            return serde_json::to_value(p).expect("payload serializes");
        }
        let mut groups: Vec<(&'static str, usize, usize, BTreeSet<String>)> = Vec::new();
        for s in &input.steps {
            let name = step_name(s);
            let (phase, app) = match name.as_deref() {
                None => (groups.last().map_or("analyze", |g| g.0), None),
                Some(n) => {
                    let (app, f) = n.split_once('.').unwrap_or(("", n));
                    let phase = if app == "api_docs" {
                        "discover"
                    } else if f.contains("login") || f.contains("password") {
                        "authenticate"
                    } else if f.contains("complete_task") {
                        "complete"
                    } else if ["get", "show", "search", "list", "fetch"].iter().any(|p| f.starts_with(p)) {
                        "retrieve"
                    } else {
                        "process"
                    };
                    let app = (!app.is_empty() && app != "api_docs" && app != "supervisor").then(|| app.to_owned());
                    (phase, app)
                }
            };
            match groups.last_mut() {
                Some(g) if g.0 == phase => {
                    g.2 = s.index;
                    g.3.extend(app);
                }
                _ => groups.push((phase, s.index, s.index, app.into_iter().collect())),
            }
        }
        let subtasks: Vec<Value> = groups
            .into_iter()
            .map(|(phase, start, end, apps)| {
                let app = apps.iter().next().cloned().unwrap_or_else(|| "the app".into());
                let (description, purpose) = match phase {
                    "discover" => ("Discover relevant APIs".to_owned(), "Learn which calls are available".to_owned()),
                    "authenticate" => (format!("Authenticate with {app}"), "Obtain an access token".to_owned()),
                    "retrieve" => (format!("Retrieve {app} data"), "Collect the data the task needs".to_owned()),
                    "process" => (format!("Perform {app} operations"), "Apply the requested changes".to_owned()),
                    "complete" => ("Complete the task".to_owned(), "Report the result".to_owned()),
                    _ => ("Analyze results".to_owned(), "Derive the answer from collected data".to_owned()),
                };
                json!({"description": description, "apps": apps, "start_step": start, "end_step": end, "purpose": purpose})
            })
            .collect();
        json!({ "subtasks": subtasks })
    }

    fn subtask_tips(&self, input: &SubtaskTipperInput) -> Value {
        if let Some(p) = self
            .annotations
            .get(&input.trajectory_id)
            .and_then(|a| a.subtask_tips.get(&input.subtask_index.to_string()))
        {
            return serde_json::to_value(p).expect("payload serializes");
        }
        let desc = lower_first(&input.subtask.description);
        let category = classify_task(&input.subtask.description);
        let mut actions: Vec<String> = Vec::new();
        for a in input.steps.iter().filter_map(step_name) {
            if !actions.contains(&a) {
                actions.push(a);
            }
        }
        let first = if actions.is_empty() {
            json!({
                "category": "strategy",
                "content": format!("To {desc}, work from the data already retrieved and state the result explicitly."),
                "purpose": input.subtask.purpose,
                "steps": ["Review the collected data", "State the result in the requested form"],
                "trigger": format!("When a task requires you to {desc}"),
                "task_category": category,
            })
        } else {
            json!({
                "category": "strategy",
                "content": format!("To {desc}, call {} and check each result before moving on.", actions.join(", then ")),
                "purpose": input.subtask.purpose,
                "steps": actions.iter().map(|a| format!("Call {a}")).collect::<Vec<_>>(),
                "trigger": format!("When a task requires you to {desc}"),
                "task_category": category,
            })
        };
        let failing = input.steps.iter().find(|s| is_error(s)).and_then(step_name);
        let repeated = input.steps.iter().filter_map(step_name).collect::<Vec<_>>();
        let repeated = repeated.iter().find(|a| repeated.iter().filter(|b| b == a).count() > 1).cloned();
        let second = if let Some(f) = failing {
            json!({
                "category": "recovery",
                "content": format!("If {f} returns an error, read the message and fix the reported cause before calling it again."),
                "purpose": "Errors name the missing precondition.",
                "steps": ["Read the error message", "Fix the reported cause", format!("Call {f} again")],
                "trigger": format!("When {f} fails"),
                "negative_example": "Do not repeat the failing call unchanged.",
                "task_category": category,
            })
        } else if let Some(r) = repeated {
            json!({
                "category": "strategy",
                "content": format!("When calling {r} page by page, stop as soon as a call returns no new items."),
                "purpose": "Paginated APIs signal the end with an empty page.",
                "steps": [format!("Call {r} with the next page index"), "Stop when the page is empty"],
                "trigger": "When results are paginated",
                "task_category": category,
            })
        } else {
            let last = actions.last().cloned().unwrap_or_else(|| "the last step".into());
            json!({
                "category": "strategy",
                "content": format!("Confirm that the output of {last} is what the next step needs before continuing."),
                "purpose": "Catching a wrong intermediate result early avoids later failures.",
                "steps": [format!("Inspect the result of {last}"), "Continue only if it matches expectations"],
                "trigger": format!("After you {desc}"),
                "task_category": category,
            })
        };
        json!({ "tips": [first, second] })
    }
}

impl ChatProvider for ScriptBook {
    fn chat(&self, role: Role, _model: Option<&str>, prompt: &str, _temperature: f64) -> Result<String, ProviderError> {
        self.respond(role, prompt).map(|v| v.to_string()).ok_or_else(|| ProviderError::Unmatched {
            role,
            sha256: tmem_core::llm::prompt_sha256(prompt),
            preview: prompt.chars().take(80).collect(),
        })
    }
}

fn thought_category(text: &str) -> ThoughtCategory {
    if contains_any(text, &["verify", "check", "confirm", "make sure"]) {
        ThoughtCategory::Validation
    } else if contains_any(text, &["realize", "mistake", "should have", "instead", "wrong"]) {
        ThoughtCategory::Reflection
    } else if contains_any(text, &["i will", "first", "next", "plan", "then"]) {
        ThoughtCategory::Planning
    } else {
        ThoughtCategory::Analytical
    }
}

fn categorize(input: &CategorizerInput) -> Value {
    let categories: Vec<ThoughtCategory> = input.segments.iter().map(|s| thought_category(s)).collect();
    json!({ "categories": categories })
}

fn pattern_of(text: &str) -> Option<PatternKind> {
    const RULES: &[(PatternKind, &[&str])] = &[
        (PatternKind::ErrorRecognition, &["failed", "error", "denied", "not allowed", "mistake"]),
        (PatternKind::SelfCorrection, &["instead", "retry", "try again", "switch to"]),
        (PatternKind::Validation, &["verify", "check", "confirm"]),
        (PatternKind::EfficiencyAwareness, &["one at a time", "inefficient", "slow", "repeatedly"]),
        (PatternKind::ApiDiscovery, &["apis", "api documentation", "specification"]),
        (PatternKind::Reflection, &["realize", "should have"]),
    ];
    RULES.iter().find(|(_, words)| contains_any(text, words)).map(|(k, _)| *k)
}

fn detect_patterns(input: &PatternInput) -> Value {
    let patterns: Vec<Value> = input
        .thoughts
        .iter()
        .filter_map(|t| {
            pattern_of(&t.text)
                .map(|k| json!({"step_index": t.step_index, "kind": k, "confidence": 0.9, "evidence": t.text}))
        })
        .collect();
    json!({ "patterns": patterns })
}

fn interpret(input: &OutcomeInput) -> Value {
    json!({ "task_intent": lower_first(input.task_description.trim_end_matches('.')) })
}

fn attribute(input: &AttributionInput) -> Value {
    let steps = &input.steps;
    let ind = &input.indicator;
    let imm = ind.step_index.min(steps.len().saturating_sub(1));
    let failing = matches!(ind.kind, AttributionKind::Failure | AttributionKind::Recovery);
    let root = if failing {
        steps[..=imm]
            .iter()
            .find(|s| s.response.to_lowercase().contains("assum"))
            .or_else(|| steps[..=imm].iter().find(|s| is_error(s)))
            .map_or(ind.start_step, |s| s.index)
    } else {
        ind.start_step
    };
    let proximate = if failing {
        steps.iter().filter(|s| s.index > root && s.index < imm && is_error(s)).map(|s| s.index).next_back()
    } else {
        (ind.start_step + 1 < imm).then_some(ind.start_step + 1)
    };
    let imm_action = steps.get(imm).and_then(step_name).unwrap_or_else(|| "the final step".into());
    let root_action = steps.get(root).and_then(step_name).unwrap_or_else(|| "the first step".into());
    let improvement: Vec<String> = match ind.kind {
        AttributionKind::Failure => vec![
            format!("Verify the decision made at {root_action} before relying on it"),
            format!("Check the preconditions of {imm_action} before calling it"),
        ],
        AttributionKind::Recovery => vec![
            format!("Read the error returned by {root_action}"),
            "Fix the missing precondition".into(),
            format!("Retry after {imm_action} succeeds"),
        ],
        AttributionKind::Inefficiency => vec![
            format!("Look for a bulk alternative to repeated {imm_action} calls"),
            "Verify the final state once".into(),
        ],
        AttributionKind::SuccessPattern => vec![
            "Confirm every prerequisite before the main operation".into(),
            "Report completion only after the final check".into(),
        ],
    };
    let prerequisite_critical = ind.kind == AttributionKind::SuccessPattern
        && steps.iter().any(|s| contains_any(&s.response, &["verify", "check", "confirm"]));
    json!({
        "immediate_cause": node(steps, imm),
        "proximate_cause": proximate.map(|p| node(steps, p)),
        "root_cause": node(steps, root),
        "improvement_steps": improvement,
        "prerequisite_critical": prerequisite_critical,
    })
}

fn generalize(input: &GeneralizerInput) -> Value {
    let lexicon = EntityLexicon::new(KNOWN_APPS.iter().map(|s| s.to_string()));
    json!({ "generalized": lexicon.repair(&input.description) })
}

fn consolidate(input: &ConsolidatorInput) -> Value {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for m in &input.members {
        *counts.entry(m.index_description.as_str()).or_default() += 1;
    }
    let canonical = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(d, _)| d.to_string()).unwrap_or_default();

    // Specific and generic variants stay apart.
    let mut by_category: BTreeMap<(TipCategory, Option<&str>), Vec<&MemberView>> = BTreeMap::new();
    for m in &input.members {
        by_category.entry((m.category, m.application_context.as_deref())).or_default().push(m);
    }
    let merged: Vec<Value> = by_category
        .into_values()
        .map(|mut group| {
            group.sort_by(|a, b| a.priority.cmp(&b.priority).then(a.id.cmp(&b.id)));
            let lead = group[0];
            let mut steps: Vec<String> = Vec::new();
            for s in group.iter().flat_map(|m| &m.steps) {
                if steps.len() < 6 && !steps.iter().any(|x| x.eq_ignore_ascii_case(s)) {
                    steps.push(s.clone());
                }
            }
            let common = |f: fn(&MemberView) -> &Option<String>| {
                let first = f(lead);
                group.iter().all(|m| f(m) == first).then(|| first.clone()).flatten()
            };
            let priority: Priority = lead.priority;
            json!({
                "merged_from": group.iter().map(|m| m.id.clone()).collect::<Vec<_>>(),
                "category": lead.category,
                "priority": priority,
                "content": lead.content,
                "purpose": lead.purpose,
                "steps": steps,
                "trigger": lead.trigger,
                "negative_example": lead.negative_example.clone().or_else(|| group.iter().find_map(|m| m.negative_example.clone())),
                "application_context": common(|m| &m.application_context),
                "task_category": common(|m| &m.task_category),
            })
        })
        .collect();
    json!({ "canonical_description": canonical, "merged_tips": merged, "conflicts": [] })
}

fn select(input: &SelectorInput) -> Value {
    let task = input.task_description.to_lowercase();
    let app = input.known_applications.iter().find(|a| task.contains(&a.to_lowercase()));
    let category = classify_task(&task).and_then(|c| input.known_task_categories.iter().find(|k| k.as_str() == c));
    let preferred = if contains_any(&task, &["pending", "fail", "error", "retry", "fix"]) {
        ["recovery", "strategy", "optimization"]
    } else if contains_any(&task, &["empty", "every", "bulk", "all "]) {
        ["optimization", "strategy", "recovery"]
    } else {
        ["strategy", "recovery", "optimization"]
    };
    json!({ "application_context": app, "task_category": category, "preferred_categories": preferred })
}
