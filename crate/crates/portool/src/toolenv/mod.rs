//! Synthetic tool-use environment: a registry of schema-validated mock
//! tools with deterministic execution, a seeded world state, templated
//! queries with machine-checkable ground truth, and a rule-based verdict
//! oracle.

pub mod templates;

use std::collections::BTreeMap;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

pub use templates::{generate_query, Family, FAMILIES};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("duplicate tool name: {0}")]
    DuplicateTool(String),
    #[error("unknown template: {0}")]
    UnknownTemplate(String),
    #[error("malformed template id: {0}")]
    MalformedTemplate(String),
}

/// Tool names in feature order. Index into this array is the tool id used
/// by history featurization.
pub const TOOL_NAMES: [&str; 6] = [
    "lookup",
    "math",
    "compare",
    "get_clock",
    "convert",
    "respond_gen",
];

pub fn tool_index(name: &str) -> Option<usize> {
    TOOL_NAMES.iter().position(|t| *t == name)
}

// --- world ---------------------------------------------------------------

/// A fact value. `Missing` keys exist in the world but carry no usable
/// information: looking them up succeeds with a null payload.
#[derive(Debug, Clone, PartialEq)]
pub enum FactValue {
    Num(f64),
    Text(String),
    Missing,
}

impl FactValue {
    fn to_json(&self) -> Value {
        match self {
            FactValue::Num(x) => json!(x),
            FactValue::Text(s) => json!(s),
            FactValue::Missing => Value::Null,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorldState {
    pub seed: u64,
    pub clock: i64,
    pub facts: BTreeMap<String, FactValue>,
}

impl WorldState {
    /// Fully determined by the seed: k0..k5 are small integers, k6/k7 are
    /// conversion rates, k8..k11 exist but are missing, k12..k15 are words.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut facts = BTreeMap::new();
        for i in 0..6 {
            facts.insert(
                format!("k{i}"),
                FactValue::Num(rng.random_range(2..=50) as f64),
            );
        }
        const RATES: [f64; 6] = [0.5, 1.5, 2.0, 2.5, 3.0, 4.0];
        for i in 6..8 {
            facts.insert(
                format!("k{i}"),
                FactValue::Num(RATES[rng.random_range(0..RATES.len())]),
            );
        }
        for i in 8..12 {
            facts.insert(format!("k{i}"), FactValue::Missing);
        }
        const WORDS: [&str; 6] = ["alpha", "beta", "gamma", "delta", "omega", "sigma"];
        for i in 12..16 {
            facts.insert(
                format!("k{i}"),
                FactValue::Text(WORDS[rng.random_range(0..WORDS.len())].to_string()),
            );
        }
        let clock = rng.random_range(0..=1000);
        WorldState { seed, clock, facts }
    }

    /// The clock advances only through this explicit operation.
    pub fn tick(&mut self, dt: i64) {
        self.clock += dt;
    }

    /// Serializes to the single-object form `{seed, clock, facts}`.
    pub fn to_json(&self) -> Value {
        let facts: Map<String, Value> = self
            .facts
            .iter()
            .map(|(k, v)| (k.clone(), v.to_json()))
            .collect();
        json!({ "seed": self.seed, "clock": self.clock, "facts": facts })
    }

    pub fn from_json(v: &Value) -> Option<Self> {
        let seed = v.get("seed")?.as_u64()?;
        let clock = v.get("clock")?.as_i64()?;
        let mut facts = BTreeMap::new();
        for (k, fv) in v.get("facts")?.as_object()? {
            let f = match fv {
                Value::Null => FactValue::Missing,
                Value::Number(n) => FactValue::Num(n.as_f64()?),
                Value::String(s) => FactValue::Text(s.clone()),
                _ => return None,
            };
            facts.insert(k.clone(), f);
        }
        Some(WorldState { seed, clock, facts })
    }
}

// --- tool results and calls ----------------------------------------------

/// Result of one tool invocation. Exactly one of `payload` / `error` is
/// present, discriminated by `ok`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolResult {
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub payload: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ToolResult {
    pub fn ok(payload: Value) -> Self {
        ToolResult {
            ok: true,
            payload: Some(payload),
            error: None,
        }
    }

    pub fn err(message: impl Into<String>) -> Self {
        ToolResult {
            ok: false,
            payload: None,
            error: Some(message.into()),
        }
    }
}

/// A parsed tool call: name plus a dictionary of arguments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    pub name: String,
    pub arguments: Map<String, Value>,
}

// --- tool specs and registry ----------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FieldKind {
    Str,
    Num,
    Dict,
    List,
    /// String or number; used by respond_gen, whose answer may be either.
    Scalar,
}

impl FieldKind {
    fn matches(self, v: &Value) -> bool {
        match self {
            FieldKind::Str => v.is_string(),
            FieldKind::Num => v.is_number(),
            FieldKind::Dict => v.is_object(),
            FieldKind::List => v.is_array(),
            FieldKind::Scalar => v.is_string() || v.is_number(),
        }
    }

    fn label(self) -> &'static str {
        match self {
            FieldKind::Str => "string",
            FieldKind::Num => "number",
            FieldKind::Dict => "dictionary",
            FieldKind::List => "list",
            FieldKind::Scalar => "string or number",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ViolationKind {
    MissingField,
    WrongType,
    InvalidValue,
}

type ExecFn = fn(&Map<String, Value>, &WorldState) -> Result<Value, String>;

/// A mock tool: schema plus a deterministic execute function. Every schema
/// violation maps to a non-empty message template; `{field}`, `{kind}` and
/// `{detail}` are substituted at validation time.
#[derive(Debug, Clone)]
pub struct ToolSpec {
    pub name: &'static str,
    pub required_fields: Vec<(&'static str, FieldKind)>,
    pub execute: ExecFn,
    pub error_messages: BTreeMap<ViolationKind, String>,
}

impl ToolSpec {
    fn new(name: &'static str, required_fields: Vec<(&'static str, FieldKind)>, execute: ExecFn) -> Self {
        let mut error_messages = BTreeMap::new();
        error_messages.insert(
            ViolationKind::MissingField,
            "missing required field: {field}".to_string(),
        );
        error_messages.insert(
            ViolationKind::WrongType,
            "field {field}: expected {kind}".to_string(),
        );
        error_messages.insert(
            ViolationKind::InvalidValue,
            "invalid value for {field}: {detail}".to_string(),
        );
        ToolSpec {
            name,
            required_fields,
            execute,
            error_messages,
        }
    }

    fn message(&self, kind: ViolationKind, field: &str, fkind: &str, detail: &str) -> String {
        self.error_messages[&kind]
            .replace("{field}", field)
            .replace("{kind}", fkind)
            .replace("{detail}", detail)
    }

    fn validate(&self, args: &Map<String, Value>) -> Result<(), String> {
        for (field, kind) in &self.required_fields {
            match args.get(*field) {
                None => {
                    return Err(self.message(ViolationKind::MissingField, field, "", ""));
                }
                Some(v) if !kind.matches(v) => {
                    return Err(self.message(ViolationKind::WrongType, field, kind.label(), ""));
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct Registry {
    tools: BTreeMap<&'static str, ToolSpec>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name)
    }
}

/// Adds a tool to the registry; a colliding name is rejected.
pub fn register_tool(mut registry: Registry, spec: ToolSpec) -> Result<Registry, EnvError> {
    if registry.tools.contains_key(spec.name) {
        return Err(EnvError::DuplicateTool(spec.name.to_string()));
    }
    registry.tools.insert(spec.name, spec);
    Ok(registry)
}

fn num_arg(args: &Map<String, Value>, field: &str) -> f64 {
    // Validation has already checked the kind.
    args[field].as_f64().unwrap()
}

fn str_arg<'a>(args: &'a Map<String, Value>, field: &str) -> &'a str {
    args[field].as_str().unwrap()
}

fn exec_lookup(args: &Map<String, Value>, world: &WorldState) -> Result<Value, String> {
    let key = str_arg(args, "key");
    match world.facts.get(key) {
        None => Err(format!("unknown key: {key}")),
        Some(FactValue::Missing) => Ok(Value::Null),
        Some(v) => Ok(v.to_json()),
    }
}

fn exec_math(args: &Map<String, Value>, _world: &WorldState) -> Result<Value, String> {
    let (a, b) = (num_arg(args, "a"), num_arg(args, "b"));
    match str_arg(args, "op") {
        "add" => Ok(json!(a + b)),
        "sub" => Ok(json!(a - b)),
        "mul" => Ok(json!(a * b)),
        op => Err(format!("invalid value for op: {op}")),
    }
}

fn exec_compare(args: &Map<String, Value>, _world: &WorldState) -> Result<Value, String> {
    let (a, b) = (num_arg(args, "a"), num_arg(args, "b"));
    match str_arg(args, "op") {
        "cmp" => Ok(json!(if (a - b).abs() <= 1e-9 {
            "equal"
        } else if a > b {
            "greater"
        } else {
            "less"
        })),
        op => Err(format!("invalid value for op: {op}")),
    }
}

fn exec_get_clock(_args: &Map<String, Value>, world: &WorldState) -> Result<Value, String> {
    Ok(json!(world.clock))
}

fn exec_convert(args: &Map<String, Value>, world: &WorldState) -> Result<Value, String> {
    let value = num_arg(args, "value");
    let rate_key = str_arg(args, "rate_key");
    match world.facts.get(rate_key) {
        Some(FactValue::Num(rate)) => Ok(json!(value * rate)),
        _ => Err(format!("rate unavailable: {rate_key}")),
    }
}

fn exec_respond(args: &Map<String, Value>, _world: &WorldState) -> Result<Value, String> {
    Ok(args["response"].clone())
}

/// The six-tool suite: factual lookup, arithmetic, comparison, a real-time
/// clock, a hybrid conversion tool, and the terminal respond_gen.
pub fn default_registry() -> Registry {
    let specs = [
        ToolSpec::new("lookup", vec![("key", FieldKind::Str)], exec_lookup),
        ToolSpec::new(
            "math",
            vec![
                ("op", FieldKind::Str),
                ("a", FieldKind::Num),
                ("b", FieldKind::Num),
            ],
            exec_math,
        ),
        ToolSpec::new(
            "compare",
            vec![
                ("a", FieldKind::Num),
                ("b", FieldKind::Num),
                ("op", FieldKind::Str),
            ],
            exec_compare,
        ),
        ToolSpec::new("get_clock", vec![], exec_get_clock),
        ToolSpec::new(
            "convert",
            vec![("value", FieldKind::Num), ("rate_key", FieldKind::Str)],
            exec_convert,
        ),
        ToolSpec::new(
            "respond_gen",
            vec![("response", FieldKind::Scalar)],
            exec_respond,
        ),
    ];
    let mut reg = Registry::new();
    for spec in specs {
        reg = register_tool(reg, spec).expect("default registry has unique names");
    }
    reg
}

/// Executes parsed calls against the registry. Results are positionally
/// aligned with the calls and independent of each other.
pub fn execute_tool_calls(
    registry: &Registry,
    calls: &[ToolCall],
    world: &WorldState,
) -> Vec<ToolResult> {
    calls
        .iter()
        .map(|call| match registry.get(&call.name) {
            None => ToolResult::err(format!("unknown tool: {}", call.name)),
            Some(spec) => match spec.validate(&call.arguments) {
                Err(msg) => ToolResult::err(msg),
                Ok(()) => match (spec.execute)(&call.arguments, world) {
                    Ok(payload) => ToolResult::ok(payload),
                    Err(msg) => ToolResult::err(msg),
                },
            },
        })
        .collect()
}

// --- queries and verdicts --------------------------------------------------

/// Canonical ground-truth answer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Answer {
    Num(f64),
    Text(String),
    /// Sentinel for unanswerable queries; never matched by any response.
    None,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuerySpec {
    pub id: String,
    pub template_id: String,
    pub text: String,
    pub ground_truth: Answer,
    pub time_sensitive: bool,
    pub answerable: bool,
}

impl QuerySpec {
    /// Family parsed from the template id.
    pub fn family(&self) -> Option<Family> {
        templates::parse_template_id(&self.template_id)
            .ok()
            .map(|(f, _)| f)
    }

    /// Slot keys parsed from the template id.
    pub fn slots(&self) -> Vec<String> {
        templates::parse_template_id(&self.template_id)
            .map(|(_, s)| s)
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    True,
    False,
    UnableToAnswer,
}

/// Per-step view the judge needs: the step's tool results and, for a
/// terminal step, the payload of its first successful respond_gen call.
#[derive(Debug, Clone, Default)]
pub struct StepOutcome {
    pub tool_results: Vec<ToolResult>,
    pub terminal: bool,
    pub final_answer: Option<Value>,
}

fn answer_declares_none(v: &Value) -> bool {
    match v {
        Value::Null => true,
        Value::String(s) => s.trim().eq_ignore_ascii_case("none"),
        _ => false,
    }
}

fn answer_matches(ground_truth: &Answer, v: &Value) -> bool {
    match ground_truth {
        Answer::None => false,
        Answer::Num(g) => {
            let got = match v {
                Value::Number(n) => n.as_f64(),
                Value::String(s) => s.trim().parse::<f64>().ok(),
                _ => None,
            };
            matches!(got, Some(x) if (x - g).abs() <= 1e-9)
        }
        Answer::Text(g) => matches!(
            v,
            Value::String(s) if s.trim().eq_ignore_ascii_case(g.trim())
        ),
    }
}

/// Rule-based verdict over a complete (or depth-capped) trajectory.
///
/// true: the final respond_gen answer matches ground truth (numbers within
/// 1e-9, strings case-folded and trimmed). unable_to_answer: the query is
/// marked unanswerable, every tool call in the trajectory succeeded, and the
/// final response declares no answer. false: everything else, including
/// truncation without respond_gen. Total over all inputs.
pub fn judge(query: &QuerySpec, steps: &[StepOutcome]) -> Verdict {
    let terminal = steps.iter().rev().find(|s| s.terminal);
    let Some(final_step) = terminal else {
        return Verdict::False;
    };
    let Some(answer) = final_step.final_answer.as_ref() else {
        return Verdict::False;
    };
    if query.answerable {
        if answer_matches(&query.ground_truth, answer) {
            Verdict::True
        } else {
            Verdict::False
        }
    } else {
        let all_ok = steps
            .iter()
            .flat_map(|s| s.tool_results.iter())
            .all(|r| r.ok);
        if all_ok && answer_declares_none(answer) {
            Verdict::UnableToAnswer
        } else {
            Verdict::False
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> WorldState {
        let mut w = WorldState::from_seed(11);
        w.facts.insert("a".into(), FactValue::Num(3.0));
        w
    }

    fn call(name: &str, args: Value) -> ToolCall {
        ToolCall {
            name: name.to_string(),
            arguments: args.as_object().cloned().unwrap_or_default(),
        }
    }

    #[test]
    fn register_tool_inserts_and_rejects_duplicates() {
        let reg = Registry::new();
        let reg = register_tool(
            reg,
            ToolSpec::new("lookup", vec![("key", FieldKind::Str)], exec_lookup),
        )
        .unwrap();
        assert_eq!(reg.len(), 1);
        let err = register_tool(
            reg.clone(),
            ToolSpec::new("lookup", vec![("key", FieldKind::Str)], exec_lookup),
        )
        .unwrap_err();
        assert!(err.to_string().contains("lookup"));
        let reg = register_tool(
            reg,
            ToolSpec::new(
                "respond_gen",
                vec![("response", FieldKind::Scalar)],
                exec_respond,
            ),
        )
        .unwrap();
        assert_eq!(reg.len(), 2);
        assert!(reg.get("lookup").is_some() && reg.get("respond_gen").is_some());
    }

    #[test]
    fn execute_direct_lookup() {
        let reg = default_registry();
        let w = world();
        let res = execute_tool_calls(&reg, &[call("lookup", json!({"key": "a"}))], &w);
        assert_eq!(res, vec![ToolResult::ok(json!(3.0))]);
    }

    #[test]
    fn execute_schema_violation_names_field() {
        let reg = default_registry();
        let res = execute_tool_calls(&reg, &[call("lookup", json!({}))], &world());
        assert_eq!(res[0].error.as_deref(), Some("missing required field: key"));
    }

    #[test]
    fn execute_positional_independence() {
        let reg = default_registry();
        let res = execute_tool_calls(
            &reg,
            &[call("lookup", json!({"key": "a"})), call("bogus", json!({}))],
            &world(),
        );
        assert!(res[0].ok && res[0].payload == Some(json!(3.0)));
        assert!(!res[1].ok);
        assert!(res[1].error.as_deref().unwrap().contains("unknown tool"));
    }

    #[test]
    fn execute_is_deterministic() {
        let reg = default_registry();
        let w = WorldState::from_seed(99);
        let calls = vec![
            call("get_clock", json!({})),
            call("math", json!({"op": "mul", "a": 6, "b": 7})),
        ];
        let r1 = execute_tool_calls(&reg, &calls, &w);
        let r2 = execute_tool_calls(&reg, &calls, &WorldState::from_seed(99));
        assert_eq!(r1, r2);
    }

    #[test]
    fn wrong_type_is_reported_with_kind() {
        let reg = default_registry();
        let res = execute_tool_calls(
            &reg,
            &[call("math", json!({"op": "add", "a": "three", "b": 4}))],
            &world(),
        );
        assert_eq!(res[0].error.as_deref(), Some("field a: expected number"));
    }

    #[test]
    fn every_violation_kind_has_a_message() {
        for spec in default_registry().tools.values() {
            for kind in [
                ViolationKind::MissingField,
                ViolationKind::WrongType,
                ViolationKind::InvalidValue,
            ] {
                assert!(!spec.error_messages[&kind].is_empty());
            }
        }
    }

    #[test]
    fn lookup_of_missing_key_succeeds_with_null() {
        let reg = default_registry();
        let w = WorldState::from_seed(5);
        let res = execute_tool_calls(&reg, &[call("lookup", json!({"key": "k9"}))], &w);
        assert!(res[0].ok);
        assert_eq!(res[0].payload, Some(Value::Null));
        let res = execute_tool_calls(&reg, &[call("lookup", json!({"key": "zz"}))], &w);
        assert!(!res[0].ok);
    }

    #[test]
    fn world_regenerates_from_seed_and_serializes() {
        let w1 = WorldState::from_seed(42);
        let w2 = WorldState::from_seed(42);
        assert_eq!(w1.facts, w2.facts);
        assert_eq!(w1.clock, w2.clock);
        assert_eq!(w1.facts.len(), 16);
        assert!((0..=1000).contains(&w1.clock));
        let back = WorldState::from_json(&w1.to_json()).unwrap();
        assert_eq!(back.facts, w1.facts);
        assert_eq!(back.clock, w1.clock);
        assert_eq!(back.seed, w1.seed);
    }

    #[test]
    fn clock_advances_only_by_tick() {
        let mut w = WorldState::from_seed(1);
        let c = w.clock;
        w.tick(5);
        assert_eq!(w.clock, c + 5);
    }

    fn q(answerable: bool, gt: Answer) -> QuerySpec {
        QuerySpec {
            id: "q".into(),
            template_id: "lookup-fact:k0".into(),
            text: "t".into(),
            ground_truth: gt,
            time_sensitive: false,
            answerable,
        }
    }

    fn respond_step(answer: Value, ok: bool) -> StepOutcome {
        StepOutcome {
            tool_results: vec![if ok {
                ToolResult::ok(answer.clone())
            } else {
                ToolResult::err("failed")
            }],
            terminal: true,
            final_answer: ok.then_some(answer),
        }
    }

    #[test]
    fn judge_exact_match_and_mismatch() {
        let query = q(true, Answer::Num(7.0));
        assert_eq!(
            judge(&query, &[respond_step(json!(7.0), true)]),
            Verdict::True
        );
        assert_eq!(
            judge(&query, &[respond_step(json!(6.0), true)]),
            Verdict::False
        );
        // Numeric answers may arrive as strings.
        assert_eq!(
            judge(&query, &[respond_step(json!("7"), true)]),
            Verdict::True
        );
    }

    #[test]
    fn judge_string_comparison_case_folds() {
        let query = q(true, Answer::Text("Greater".into()));
        assert_eq!(
            judge(&query, &[respond_step(json!("  greater "), true)]),
            Verdict::True
        );
    }

    #[test]
    fn judge_unable_requires_all_ok_and_none() {
        let query = q(false, Answer::None);
        assert_eq!(
            judge(&query, &[respond_step(json!("none"), true)]),
            Verdict::UnableToAnswer
        );
        // A failed call anywhere forfeits the unable label.
        let steps = vec![
            StepOutcome {
                tool_results: vec![ToolResult::err("boom")],
                terminal: false,
                final_answer: None,
            },
            respond_step(json!("none"), true),
        ];
        assert_eq!(judge(&query, &steps), Verdict::False);
        // Declaring an answer on an unanswerable query is false: the
        // sentinel matches nothing.
        assert_eq!(
            judge(&query, &[respond_step(json!(3.0), true)]),
            Verdict::False
        );
    }

    #[test]
    fn judge_total_on_empty_and_truncated() {
        let query = q(true, Answer::Num(1.0));
        assert_eq!(judge(&query, &[]), Verdict::False);
        let steps = vec![StepOutcome {
            tool_results: vec![ToolResult::ok(json!(1.0))],
            terminal: false,
            final_answer: None,
        }];
        assert_eq!(judge(&query, &steps), Verdict::False);
    }
}
