//! Caption templates and the fixed prompt set used by caption ablations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SHIPPED: &str = include_str!("../data/templates.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Positions {
    pub left: String,
    pub center: String,
    pub right: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Depths {
    pub near: String,
    pub middle: String,
    pub far: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prompt {
    pub name: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Templates {
    pub generic: String,
    /// Per-object phrase with `{label}`, `{position}`, `{depth}` slots.
    pub object: String,
    pub joiner: String,
    pub positions: Positions,
    pub depths: Depths,
    /// Two-rectangle phrase with `{label}`, `{left_depth}`, `{right_depth}`.
    pub ambiguity: String,
    pub prompts: Vec<Prompt>,
}

impl Templates {
    pub fn shipped() -> Self {
        Self::from_json(SHIPPED).expect("shipped templates are valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let t: Templates = serde_json::from_str(text)
            .map_err(|e| Error::InvalidData(format!("template file: {e}")))?;
        let mut names: Vec<&str> = t.prompts.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidData("duplicate prompt name".into()));
        }
        Ok(t)
    }

    pub fn prompt(&self, name: &str) -> Option<&str> {
        self.prompts
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.text.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_prompts() {
        let t = Templates::shipped();
        assert_eq!(t.prompt("an-image"), Some("An image"));
        assert_eq!(t.prompts.len(), 4);
        assert!(t.prompt("nope").is_none());
    }
}
