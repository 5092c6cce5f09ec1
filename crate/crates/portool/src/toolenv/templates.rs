//! Query templates. A template id is `family` plus colon-separated slot
//! keys (`sum-two-facts:k0:k3`); the ground truth is recomputable from the
//! id and a world state.

use super::{Answer, EnvError, FactValue, QuerySpec, WorldState};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    SumTwoFacts,
    CompareFacts,
    LookupFact,
    ClockNow,
    ClockPlusFact,
    ConvertFact,
    UnanswerableMissingKey,
}

pub const FAMILIES: [Family; 7] = [
    Family::SumTwoFacts,
    Family::CompareFacts,
    Family::LookupFact,
    Family::ClockNow,
    Family::ClockPlusFact,
    Family::ConvertFact,
    Family::UnanswerableMissingKey,
];

impl Family {
    pub fn as_str(self) -> &'static str {
        match self {
            Family::SumTwoFacts => "sum-two-facts",
            Family::CompareFacts => "compare-facts",
            Family::LookupFact => "lookup-fact",
            Family::ClockNow => "clock-now",
            Family::ClockPlusFact => "clock-plus-fact",
            Family::ConvertFact => "convert-fact",
            Family::UnanswerableMissingKey => "unanswerable-missing-key",
        }
    }

    pub fn from_str(s: &str) -> Option<Self> {
        FAMILIES.iter().copied().find(|f| f.as_str() == s)
    }

    /// Index in [`FAMILIES`]; used for one-hot features.
    pub fn index(self) -> usize {
        FAMILIES.iter().position(|f| *f == self).unwrap()
    }

    pub fn slot_count(self) -> usize {
        match self {
            Family::ClockNow => 0,
            Family::LookupFact | Family::ClockPlusFact | Family::UnanswerableMissingKey => 1,
            Family::SumTwoFacts | Family::CompareFacts | Family::ConvertFact => 2,
        }
    }

    pub fn time_sensitive(self) -> bool {
        matches!(self, Family::ClockNow | Family::ClockPlusFact)
    }
}

pub fn parse_template_id(template_id: &str) -> Result<(Family, Vec<String>), EnvError> {
    let mut parts = template_id.split(':');
    let family = parts
        .next()
        .and_then(Family::from_str)
        .ok_or_else(|| EnvError::UnknownTemplate(template_id.to_string()))?;
    let slots: Vec<String> = parts.map(str::to_string).collect();
    if slots.len() != family.slot_count() {
        return Err(EnvError::MalformedTemplate(template_id.to_string()));
    }
    Ok((family, slots))
}

fn numeric_fact(world: &WorldState, key: &str, template_id: &str) -> Result<f64, EnvError> {
    match world.facts.get(key) {
        Some(FactValue::Num(x)) => Ok(*x),
        _ => Err(EnvError::MalformedTemplate(template_id.to_string())),
    }
}

/// Instantiates a template against a world, computing ground truth by direct
/// evaluation. The returned query id defaults to the template id; dataset
/// builders assign unique ids.
pub fn generate_query(template_id: &str, world: &WorldState) -> Result<QuerySpec, EnvError> {
    let (family, slots) = parse_template_id(template_id)?;
    let (text, ground_truth, answerable) = match family {
        Family::SumTwoFacts => {
            let (a, b) = (&slots[0], &slots[1]);
            let va = numeric_fact(world, a, template_id)?;
            let vb = numeric_fact(world, b, template_id)?;
            (
                format!("what is {a} plus {b}"),
                Answer::Num(va + vb),
                true,
            )
        }
        Family::CompareFacts => {
            let (a, b) = (&slots[0], &slots[1]);
            let va = numeric_fact(world, a, template_id)?;
            let vb = numeric_fact(world, b, template_id)?;
            let rel = if (va - vb).abs() <= 1e-9 {
                "equal"
            } else if va > vb {
                "greater"
            } else {
                "less"
            };
            (
                format!("is {a} greater than, less than, or equal to {b}"),
                Answer::Text(rel.to_string()),
                true,
            )
        }
        Family::LookupFact => {
            let a = &slots[0];
            let gt = match world.facts.get(a) {
                Some(FactValue::Num(x)) => Answer::Num(*x),
                Some(FactValue::Text(s)) => Answer::Text(s.clone()),
                _ => return Err(EnvError::MalformedTemplate(template_id.to_string())),
            };
            (format!("what is the value of {a}"), gt, true)
        }
        Family::ClockNow => (
            "what is the current tick".to_string(),
            Answer::Num(world.clock as f64),
            true,
        ),
        Family::ClockPlusFact => {
            let a = &slots[0];
            let va = numeric_fact(world, a, template_id)?;
            (
                format!("what is the current tick plus {a}"),
                Answer::Num(world.clock as f64 + va),
                true,
            )
        }
        Family::ConvertFact => {
            let (a, rate) = (&slots[0], &slots[1]);
            let va = numeric_fact(world, a, template_id)?;
            let vr = numeric_fact(world, rate, template_id)?;
            (
                format!("convert {a} using the rate {rate}"),
                Answer::Num(va * vr),
                true,
            )
        }
        Family::UnanswerableMissingKey => {
            let a = &slots[0];
            if !matches!(world.facts.get(a), Some(FactValue::Missing)) {
                return Err(EnvError::MalformedTemplate(template_id.to_string()));
            }
            (
                format!("what is the value of {a}"),
                Answer::None,
                false,
            )
        }
    };
    Ok(QuerySpec {
        id: template_id.to_string(),
        template_id: template_id.to_string(),
        text,
        ground_truth,
        time_sensitive: family.time_sensitive(),
        answerable,
    })
}
