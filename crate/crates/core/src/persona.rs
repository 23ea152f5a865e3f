use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PersonaArchetype {
    Balanced,
    Bold,
    Empathetic,
}

impl PersonaArchetype {
    pub const ALL: [PersonaArchetype; 3] = [Self::Balanced, Self::Bold, Self::Empathetic];

    /// Phrase substituted into the `[Personality]` slot of the system prompts.
    pub fn descriptor(self) -> &'static str {
        match self {
            Self::Balanced => "balanced and reflective",
            Self::Bold => "bold and dominant but elaborative",
            Self::Empathetic => "empathetic and open-minded",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Balanced => "balanced",
            Self::Bold => "bold",
            Self::Empathetic => "empathetic",
        }
    }
}

impl fmt::Display for PersonaArchetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PersonaArchetype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "balanced" | "neutral" => Ok(Self::Balanced),
            "bold" | "dominant" => Ok(Self::Bold),
            "empathetic" | "permissive" => Ok(Self::Empathetic),
            other => Err(format!(
                "unknown persona {other:?} (expected balanced, bold or empathetic)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    SingleCoder,
    Discussant,
    Consensus,
}

impl AgentRole {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::SingleCoder => "single_coder",
            Self::Discussant => "discussant",
            Self::Consensus => "consensus",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

pub const DEFAULT_SINGLE_NAME: &str = "Coder";
pub const DEFAULT_CODER_A: &str = "Coder 1";
pub const DEFAULT_CODER_B: &str = "Coder 2";
pub const DEFAULT_ARBITER: &str = "Arbiter";

/// One agent instance: persona, role and decoding temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub name: String,
    pub persona: PersonaArchetype,
    pub role: AgentRole,
    pub temperature: f64,
}

impl AgentProfile {
    pub fn single_coder(temperature: f64) -> Self {
        Self {
            name: DEFAULT_SINGLE_NAME.into(),
            persona: PersonaArchetype::Balanced,
            role: AgentRole::SingleCoder,
            temperature,
        }
    }

    pub fn discussant(name: impl Into<String>, persona: PersonaArchetype, temperature: f64) -> Self {
        Self {
            name: name.into(),
            persona,
            role: AgentRole::Discussant,
            temperature,
        }
    }

    /// The arbiter is always balanced.
    pub fn arbiter(temperature: f64) -> Self {
        Self {
            name: DEFAULT_ARBITER.into(),
            persona: PersonaArchetype::Balanced,
            role: AgentRole::Consensus,
            temperature,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptors_are_fixed() {
        assert_eq!(PersonaArchetype::Balanced.descriptor(), "balanced and reflective");
        assert_eq!(
            PersonaArchetype::Bold.descriptor(),
            "bold and dominant but elaborative"
        );
        assert_eq!(
            PersonaArchetype::Empathetic.descriptor(),
            "empathetic and open-minded"
        );
    }

    #[test]
    fn parse_round_trip() {
        for p in PersonaArchetype::ALL {
            assert_eq!(p.as_str().parse::<PersonaArchetype>().unwrap(), p);
        }
        assert!("shy".parse::<PersonaArchetype>().is_err());
    }
}
