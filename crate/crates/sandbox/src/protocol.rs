//! Wire protocol: one JSON document per message,
//! `{"proto": 1, "kind": ..., "session_id": ..., "body": ...}`.

use std::collections::BTreeMap;

use ays_core::dynamics::{NormState, RawState};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const PROTO: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Create,
    Created,
    Step,
    State,
    Undo,
    Reset,
    Suggest,
    Suggestion,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub proto: u32,
    pub kind: Kind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default)]
    pub body: Value,
}

impl Envelope {
    pub fn new(kind: Kind, session_id: Option<String>, body: impl Serialize) -> Self {
        Self {
            proto: PROTO,
            kind,
            session_id,
            body: serde_json::to_value(body).expect("wire bodies serialize"),
        }
    }

    pub fn error(session_id: Option<String>, message: impl Into<String>, field: Option<String>) -> Self {
        Self::new(
            Kind::Error,
            session_id,
            ErrorBody {
                message: message.into(),
                field,
            },
        )
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(self).expect("envelopes serialize")
    }
}

/// `create` body. Overrides use the `env.*` / `model.*` configuration keys.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateBody {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub overrides: BTreeMap<String, Value>,
    /// Name as listed by `/checkpoints`.
    #[serde(default)]
    pub checkpoint: Option<String>,
}

/// `step` body; `action` is a code 0..3 or a label such as `"ET_DG"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepBody {
    pub action: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UndoBody {
    pub to_year: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResetBody {
    #[serde(default)]
    pub seed: Option<u64>,
}

/// State after a given year.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBody {
    pub year: usize,
    pub raw: RawState,
    pub norm: NormState,
    /// Action that led here; absent at year 0.
    pub action: Option<String>,
    pub reward: f64,
    pub total_reward: f64,
    pub cause: String,
    pub done: bool,
}

/// Reply to `create`: the initial state plus what the view needs to draw
/// the phase space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedBody {
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    pub checkpoint: Option<String>,
    pub green_norm: NormState,
    pub black_norm: NormState,
    pub boundary_norm: NormState,
    pub state: StateBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuggestionBody {
    pub year: usize,
    pub action: String,
    pub action_code: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub q_values: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probabilities: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub field: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub name: String,
    pub head: String,
    pub input_dim: usize,
    pub observability: Option<String>,
}
