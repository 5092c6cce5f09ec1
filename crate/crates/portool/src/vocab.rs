//! Structured token vocabulary.
//!
//! Tokens fall into two layers: atomic symbols (control tags, JSON
//! fragments, tool and argument names, value literals) from which a step can
//! be spelled out piecewise, and macro tokens that each render one complete
//! step — a canned reasoning block plus a single tool-call block. Macro
//! arguments are reference literals (`$q0`, `$q1` for the query's slot keys,
//! `$p0`, `$p1` for the previous step's result payloads) resolved later by
//! the rollout layer, so every token renders to a fixed string and rendering
//! stays injective up to whitespace.

pub type TokenId = u16;

/// End-of-step token id. Fixed by construction of [`Vocabulary::standard`].
pub const EOS: TokenId = 0;

#[derive(Debug, Clone)]
struct TokenDef {
    /// Symbolic handle used by tests and debug output.
    name: &'static str,
    /// Exact text the token contributes to a rendered step.
    text: &'static str,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<TokenDef>,
    macro_ids: Vec<TokenId>,
}

macro_rules! step_text {
    ($think:expr, $calls:expr) => {
        concat!(
            "<think> ",
            $think,
            " </think> <tool_call> ",
            $calls,
            " </tool_call>"
        )
    };
}

impl Vocabulary {
    /// The fixed vocabulary used across the framework. Order is part of the
    /// parameter-file format; do not reorder without bumping the version.
    pub fn standard() -> Self {
        let mut tokens: Vec<TokenDef> = Vec::new();
        let mut push = |name: &'static str, text: &'static str| {
            tokens.push(TokenDef { name, text });
        };

        // Control tokens. EOS renders as a visible marker so that rendering
        // stays injective.
        push("<eos>", "<eos>");
        push("<think>", "<think>");
        push("</think>", "</think>");
        push("<tool_call>", "<tool_call>");
        push("</tool_call>", "</tool_call>");
        // JSON fragments.
        push("{", "{");
        push("}", "}");
        push("[", "[");
        push("]", "]");
        push("name:", "\"name\":");
        push("arguments:", "\"arguments\":");
        push(",", ",");
        // Tool names (as quoted string values).
        push("lookup", "\"lookup\"");
        push("math", "\"math\"");
        push("compare", "\"compare\"");
        push("get_clock", "\"get_clock\"");
        push("convert", "\"convert\"");
        push("respond_gen", "\"respond_gen\"");
        // Argument keys.
        push("key:", "\"key\":");
        push("op:", "\"op\":");
        push("a:", "\"a\":");
        push("b:", "\"b\":");
        push("value:", "\"value\":");
        push("rate_key:", "\"rate_key\":");
        push("response:", "\"response\":");
        // Value literals: world fact keys, reference literals, operators.
        push("k0", "\"k0\"");
        push("k1", "\"k1\"");
        push("k2", "\"k2\"");
        push("k3", "\"k3\"");
        push("k4", "\"k4\"");
        push("k5", "\"k5\"");
        push("k6", "\"k6\"");
        push("k7", "\"k7\"");
        push("$p0", "\"$p0\"");
        push("$p1", "\"$p1\"");
        push("$q0", "\"$q0\"");
        push("$q1", "\"$q1\"");
        push("add", "\"add\"");
        push("sub", "\"sub\"");
        push("mul", "\"mul\"");
        push("cmp", "\"cmp\"");
        push("none", "\"none\"");
        // Free-text filler.
        push("so", "so");
        push("next", "next");

        let macro_start = tokens.len() as TokenId;
        let mut push_macro = |name: &'static str, text: &'static str| {
            tokens.push(TokenDef { name, text });
        };
        push_macro(
            "step:lookup-q0",
            step_text!(
                "look up the first key",
                r#"[{"name": "lookup", "arguments": {"key": "$q0"}}]"#
            ),
        );
        push_macro(
            "step:lookup-q1",
            step_text!(
                "look up the second key",
                r#"[{"name": "lookup", "arguments": {"key": "$q1"}}]"#
            ),
        );
        push_macro(
            "step:lookup-both",
            step_text!(
                "look up both keys at once",
                r#"[{"name": "lookup", "arguments": {"key": "$q0"}}, {"name": "lookup", "arguments": {"key": "$q1"}}]"#
            ),
        );
        push_macro(
            "step:math-add",
            step_text!(
                "add the two previous results",
                r#"[{"name": "math", "arguments": {"op": "add", "a": "$p0", "b": "$p1"}}]"#
            ),
        );
        push_macro(
            "step:math-sub",
            step_text!(
                "subtract the previous results",
                r#"[{"name": "math", "arguments": {"op": "sub", "a": "$p0", "b": "$p1"}}]"#
            ),
        );
        push_macro(
            "step:math-mul",
            step_text!(
                "multiply the previous results",
                r#"[{"name": "math", "arguments": {"op": "mul", "a": "$p0", "b": "$p1"}}]"#
            ),
        );
        push_macro(
            "step:compare",
            step_text!(
                "compare the two previous results",
                r#"[{"name": "compare", "arguments": {"a": "$p0", "b": "$p1", "op": "cmp"}}]"#
            ),
        );
        push_macro(
            "step:clock",
            step_text!(
                "read the current tick",
                r#"[{"name": "get_clock", "arguments": {}}]"#
            ),
        );
        push_macro(
            "step:clock-lookup-q0",
            step_text!(
                "read the tick and look up the first key",
                r#"[{"name": "get_clock", "arguments": {}}, {"name": "lookup", "arguments": {"key": "$q0"}}]"#
            ),
        );
        push_macro(
            "step:convert",
            step_text!(
                "convert the previous result with the rate key",
                r#"[{"name": "convert", "arguments": {"value": "$p0", "rate_key": "$q1"}}]"#
            ),
        );
        push_macro(
            "step:respond-p0",
            step_text!(
                "answer with the first previous result",
                r#"[{"name": "respond_gen", "arguments": {"response": "$p0"}}]"#
            ),
        );
        push_macro(
            "step:respond-p1",
            step_text!(
                "answer with the second previous result",
                r#"[{"name": "respond_gen", "arguments": {"response": "$p1"}}]"#
            ),
        );
        push_macro(
            "step:respond-none",
            step_text!(
                "no answer can be given",
                r#"[{"name": "respond_gen", "arguments": {"response": "none"}}]"#
            ),
        );

        let macro_ids = (macro_start..tokens.len() as TokenId).collect();
        let v = Vocabulary { tokens, macro_ids };
        debug_assert!(v.len() <= 64);
        v
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        EOS
    }

    pub fn is_eos(&self, t: TokenId) -> bool {
        t == EOS
    }

    pub fn contains(&self, t: TokenId) -> bool {
        (t as usize) < self.tokens.len()
    }

    /// Symbolic name of a token (for messages and tests).
    pub fn name(&self, t: TokenId) -> &str {
        self.tokens[t as usize].name
    }

    /// Rendered text of a single token.
    pub fn text(&self, t: TokenId) -> &str {
        self.tokens[t as usize].text
    }

    /// Id lookup by symbolic name.
    pub fn id_of(&self, name: &str) -> Option<TokenId> {
        self.tokens
            .iter()
            .position(|d| d.name == name)
            .map(|i| i as TokenId)
    }

    /// Ids of the macro step tokens.
    pub fn macro_ids(&self) -> &[TokenId] {
        &self.macro_ids
    }

    /// Renders a token sequence to step text, space-separated.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        for &t in tokens {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(self.text(t));
        }
        out
    }
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::standard()
    }
}
