//! Role-tagged chat payloads and the personality prompt that seeds them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Ordered message list sent to a completion backend.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PromptPayload {
    pub messages: Vec<Message>,
}

impl PromptPayload {
    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    /// Content of the last user message, if any.
    pub fn final_user_message(&self) -> Option<&str> {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
    }

    /// One leading system message, then strictly alternating user/assistant
    /// messages ending with a user message.
    pub fn is_well_formed(&self) -> bool {
        let Some((first, rest)) = self.messages.split_first() else {
            return false;
        };
        if first.role != Role::System || rest.len() % 2 == 0 {
            return false;
        }
        rest.iter().enumerate().all(|(i, m)| {
            let expected = if i % 2 == 0 { Role::User } else { Role::Assistant };
            m.role == expected
        })
    }
}

/// Fragments a personality template has to contain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequiredMarkers {
    /// Declares the terminal persona.
    pub persona: String,
    /// Asks the model to reason step by step.
    pub step_by_step: String,
    /// Opens a worked input/output example.
    pub few_shot: String,
    /// A critical order; must occur at least twice.
    pub critical_order: String,
}

impl Default for RequiredMarkers {
    fn default() -> Self {
        Self {
            persona: "You are a Linux OS terminal".into(),
            step_by_step: "Think step by step".into(),
            few_shot: "Example interaction:".into(),
            critical_order: "NEVER reveal that you are an AI or a language model".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PersonalityError {
    #[error("personality prompt is missing the {kind} marker {marker:?}")]
    MissingMarker { kind: &'static str, marker: String },
    #[error("critical order {marker:?} must be repeated at least twice, found {found}")]
    CriticalOrderNotRepeated { marker: String, found: usize },
}

/// The system prompt that gives the model its shell persona.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonalityPrompt {
    template_text: String,
    required_markers: RequiredMarkers,
}

impl PersonalityPrompt {
    pub fn new(
        template_text: impl Into<String>,
        required_markers: RequiredMarkers,
    ) -> Result<Self, PersonalityError> {
        let template_text = template_text.into();
        let checks = [
            ("persona", &required_markers.persona),
            ("step-by-step", &required_markers.step_by_step),
            ("few-shot", &required_markers.few_shot),
            ("critical-order", &required_markers.critical_order),
        ];
        for (kind, marker) in checks {
            if marker.is_empty() || !template_text.contains(marker.as_str()) {
                return Err(PersonalityError::MissingMarker {
                    kind,
                    marker: marker.clone(),
                });
            }
        }
        let found = template_text
            .matches(required_markers.critical_order.as_str())
            .count();
        if found < 2 {
            return Err(PersonalityError::CriticalOrderNotRepeated {
                marker: required_markers.critical_order.clone(),
                found,
            });
        }
        Ok(Self {
            template_text,
            required_markers,
        })
    }

    pub fn with_default_markers(template_text: impl Into<String>) -> Result<Self, PersonalityError> {
        Self::new(template_text, RequiredMarkers::default())
    }

    pub fn text(&self) -> &str {
        &self.template_text
    }

    pub fn required_markers(&self) -> &RequiredMarkers {
        &self.required_markers
    }

    /// Hex SHA-256 of the template text.
    pub fn fingerprint(&self) -> String {
        fingerprint_text(&self.template_text)
    }
}

pub(crate) fn fingerprint_text(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut out = String::with_capacity(64);
    for byte in digest.iter() {
        let _ = write!(out, "{byte:02x}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const SHIPPED: &str = include_str!("../../../assets/personality.txt");

    #[test]
    fn shipped_template_satisfies_markers() {
        let p = PersonalityPrompt::with_default_markers(SHIPPED).unwrap();
        assert_eq!(p.fingerprint().len(), 64);
    }

    #[test]
    fn missing_marker_is_reported() {
        let err = PersonalityPrompt::with_default_markers("You are a Linux OS terminal.").unwrap_err();
        assert!(matches!(err, PersonalityError::MissingMarker { kind: "step-by-step", .. }));
    }

    #[test]
    fn critical_order_must_repeat() {
        let m = RequiredMarkers::default();
        let text = format!(
            "{}. {}. {} ls -> x. {}.",
            m.persona, m.step_by_step, m.few_shot, m.critical_order
        );
        let err = PersonalityPrompt::with_default_markers(text.clone()).unwrap_err();
        assert!(matches!(err, PersonalityError::CriticalOrderNotRepeated { found: 1, .. }));
        let twice = format!("{text} {}.", m.critical_order);
        assert!(PersonalityPrompt::with_default_markers(twice).is_ok());
    }

    #[test]
    fn fingerprint_tracks_text() {
        assert_eq!(fingerprint_text("a"), fingerprint_text("a"));
        assert_ne!(fingerprint_text("a"), fingerprint_text("b"));
        assert_eq!(
            fingerprint_text(""),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
    }

    #[test]
    fn well_formed_shapes() {
        let ok = PromptPayload {
            messages: vec![
                Message::system("s"),
                Message::user("ls"),
                Message::assistant("a"),
                Message::user("pwd"),
            ],
        };
        assert!(ok.is_well_formed());
        assert_eq!(ok.final_user_message(), Some("pwd"));

        let ends_assistant = PromptPayload {
            messages: vec![Message::system("s"), Message::user("ls"), Message::assistant("a")],
        };
        assert!(!ends_assistant.is_well_formed());
        let two_systems = PromptPayload {
            messages: vec![Message::system("s"), Message::system("s"), Message::user("ls")],
        };
        assert!(!two_systems.is_well_formed());
        assert!(!PromptPayload::default().is_well_formed());
    }
}
