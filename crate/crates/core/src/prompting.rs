//! System and user prompts for every agent role.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codebook::{Codebook, Segment};
use crate::persona::{AgentProfile, AgentRole, PersonaArchetype};

pub const SINGLE_CODER_TEMPLATE: &str = include_str!("resources/templates/single_coder.txt");
pub const DISCUSSION_ROUND1_TEMPLATE: &str = include_str!("resources/templates/discussion_round1.txt");
pub const DISCUSSION_ROUND2_TEMPLATE: &str = include_str!("resources/templates/discussion_round2.txt");
pub const CONSENSUS_TEMPLATE: &str = include_str!("resources/templates/consensus.txt");

/// Prefix that introduces the peer's latest turn in discussion rounds.
pub const PREVIOUS_TURN_PREFIX: &str = "The previous turn said: ";

/// `(name, template)` for each embedded system-prompt template.
pub fn templates() -> [(&'static str, &'static str); 4] {
    [
        ("single_coder", SINGLE_CODER_TEMPLATE.trim_end()),
        ("discussion_round1", DISCUSSION_ROUND1_TEMPLATE.trim_end()),
        ("discussion_round2", DISCUSSION_ROUND2_TEMPLATE.trim_end()),
        ("consensus", CONSENSUS_TEMPLATE.trim_end()),
    ]
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("agent {agent:?} has role {found}, expected {expected}")]
    WrongRole {
        agent: String,
        expected: AgentRole,
        found: AgentRole,
    },
    #[error("consensus agent {0:?} must use the balanced persona")]
    ArbiterPersona(String),
    #[error("discussion round {0} requires the peer's previous turn")]
    MissingPeerTurn(u32),
    #[error("discussion round must be >= 1")]
    InvalidRound,
    #[error("consensus prompt requires non-empty turn text from {0:?}")]
    EmptyTurn(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub system_prompt: String,
    pub user_prompt: String,
}

/// A prior deliberation turn carried into later prompts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub agent_name: String,
    pub round: u32,
    pub text: String,
}

/// Example dictionary listing every category: `{'A': 0, 'B': 1, 'C': 0}`.
pub fn format_instruction(codebook: &Codebook) -> String {
    let body: Vec<String> = codebook
        .names()
        .enumerate()
        .map(|(i, name)| format!("'{name}': {}", i % 2))
        .collect();
    format!("{{{}}}", body.join(", "))
}

fn render(template: &str, agent_name: &str, personality: &str, format: &str) -> String {
    let mut out = String::with_capacity(template.len() + format.len() + 64);
    let mut rest = template.trim_end();
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let tail = &rest[start..];
        let slot = [
            ("{agent_name}", agent_name),
            ("{personality}", personality),
            ("{format}", format),
        ]
        .into_iter()
        .find(|(key, _)| tail.starts_with(key));
        match slot {
            Some((key, value)) => {
                out.push_str(value);
                rest = &tail[key.len()..];
            }
            None => {
                out.push('{');
                rest = &tail[1..];
            }
        }
    }
    out.push_str(rest);
    out
}

/// Preceding segments (text only) up to `window`, for the history section.
pub fn history_window(segments: &[Segment], index: usize, window: usize) -> &[Segment] {
    let end = index.min(segments.len());
    &segments[end.saturating_sub(window)..end]
}

fn context_sections(segment: &Segment, codebook: &Codebook, history: &[Segment]) -> String {
    let mut out = String::new();
    if !history.is_empty() {
        out.push_str("Conversation history:\n");
        for s in history {
            out.push_str(&s.display());
            out.push('\n');
        }
        out.push('\n');
    }
    out.push_str("Codebook:\n");
    out.push_str(&codebook.render());
    out.push('\n');
    out.push_str("Text to code:\n");
    out.push_str(&segment.display());
    out.push('\n');
    out
}

fn require_role(profile: &AgentProfile, expected: AgentRole) -> Result<(), PromptError> {
    if profile.role != expected {
        return Err(PromptError::WrongRole {
            agent: profile.name.clone(),
            expected,
            found: profile.role,
        });
    }
    Ok(())
}

pub fn build_single_prompt(
    profile: &AgentProfile,
    segment: &Segment,
    codebook: &Codebook,
    history: &[Segment],
) -> Result<PromptBundle, PromptError> {
    require_role(profile, AgentRole::SingleCoder)?;
    Ok(PromptBundle {
        system_prompt: render(
            SINGLE_CODER_TEMPLATE,
            &profile.name,
            profile.persona.descriptor(),
            &format_instruction(codebook),
        ),
        user_prompt: context_sections(segment, codebook, history),
    })
}

/// Round 1 uses the initial-coding template and never sees peer output.
/// Rounds >= 2 use the discussion template, embed earlier turns of this
/// segment's deliberation and end with the peer's latest turn.
pub fn build_discussion_prompt(
    profile: &AgentProfile,
    segment: &Segment,
    codebook: &Codebook,
    round: u32,
    peer_turn: Option<&str>,
    history: &[Segment],
    discussion: &[DialogueTurn],
) -> Result<PromptBundle, PromptError> {
    require_role(profile, AgentRole::Discussant)?;
    let format = format_instruction(codebook);
    let descriptor = profile.persona.descriptor();
    match round {
        0 => Err(PromptError::InvalidRound),
        1 => Ok(PromptBundle {
            system_prompt: render(DISCUSSION_ROUND1_TEMPLATE, &profile.name, descriptor, &format),
            user_prompt: context_sections(segment, codebook, history),
        }),
        _ => {
            let peer = peer_turn.ok_or(PromptError::MissingPeerTurn(round))?;
            let mut user = context_sections(segment, codebook, history);
            if !discussion.is_empty() {
                user.push_str("\nDiscussion so far:\n");
                for turn in discussion {
                    user.push_str(&format!(
                        "{} (round {}): {}\n",
                        turn.agent_name,
                        turn.round,
                        turn.text.trim()
                    ));
                }
            }
            user.push('\n');
            user.push_str(PREVIOUS_TURN_PREFIX);
            user.push_str(peer);
            user.push('\n');
            Ok(PromptBundle {
                system_prompt: render(DISCUSSION_ROUND2_TEMPLATE, &profile.name, descriptor, &format),
                user_prompt: user,
            })
        }
    }
}

pub fn build_consensus_prompt(
    profile: &AgentProfile,
    segment: &Segment,
    codebook: &Codebook,
    turn_a: &DialogueTurn,
    turn_b: &DialogueTurn,
) -> Result<PromptBundle, PromptError> {
    require_role(profile, AgentRole::Consensus)?;
    if profile.persona != PersonaArchetype::Balanced {
        return Err(PromptError::ArbiterPersona(profile.name.clone()));
    }
    for turn in [turn_a, turn_b] {
        if turn.text.trim().is_empty() {
            return Err(PromptError::EmptyTurn(turn.agent_name.clone()));
        }
    }
    let mut user = String::new();
    user.push_str("Text to code:\n");
    user.push_str(&segment.display());
    user.push_str("\n\nCodebook:\n");
    user.push_str(&codebook.render());
    user.push_str("\nResponses from the coding agents:\n");
    for turn in [turn_a, turn_b] {
        user.push_str(&format!("{}: {}\n\n", turn.agent_name, turn.text.trim()));
    }
    Ok(PromptBundle {
        system_prompt: render(
            CONSENSUS_TEMPLATE,
            &profile.name,
            PersonaArchetype::Balanced.descriptor(),
            &format_instruction(codebook),
        ),
        user_prompt: user,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codebook::CodeCategory;
    use proptest::prelude::*;

    fn seg(text: &str) -> Segment {
        Segment {
            id: 0,
            transcript_id: "t".into(),
            speaker: None,
            text: text.into(),
        }
    }

    fn cb2() -> Codebook {
        Codebook::new(
            "t",
            ["Alpha", "Beta"]
                .iter()
                .map(|n| CodeCategory {
                    name: n.to_string(),
                    definition: format!("{n} def"),
                    examples: vec![],
                })
                .collect(),
        )
        .unwrap()
    }

    const SINGLE_GOLDEN: &str = "You are Agent, a balanced and reflective qualitative coding agent. Your role: Assign codes to the text based on the codebook. Use the provided codebook definitions to analyze qualitative text data. Be brief (2 sentences max), thoughtful, and justify your reasoning. After your reasoning, always provide your codes in this format: {'Greeting': 0, 'Instruction': 1, 'Guiding Feedback': 0, 'Aligning to Prior Knowledge': 1, 'Understanding/Engagement-Tutor': 0, 'Technical or Logistics': 1, 'Encouragement': 0, 'Time Management': 1}.";

    #[test]
    fn single_prompt_golden() {
        let mut profile = AgentProfile::single_coder(0.0);
        profile.name = "Agent".into();
        let bundle = build_single_prompt(&profile, &seg("Hello."), &Codebook::builtin(), &[]).unwrap();
        assert_eq!(bundle.system_prompt, SINGLE_GOLDEN);
        assert!(bundle
            .system_prompt
            .starts_with("You are Agent, a balanced and reflective qualitative coding agent."));
        assert!(!bundle.user_prompt.contains("Conversation history"));
        assert!(bundle.user_prompt.contains("Text to code:\nHello."));
        assert!(bundle.user_prompt.contains("- Greeting: The initial interaction"));
    }

    #[test]
    fn single_prompt_history_precedes_codebook_and_segment() {
        let history = vec![seg("earlier line")];
        let bundle =
            build_single_prompt(&AgentProfile::single_coder(0.0), &seg("now"), &cb2(), &history).unwrap();
        let u = &bundle.user_prompt;
        let h = u.find("earlier line").unwrap();
        let c = u.find("Codebook:").unwrap();
        let t = u.find("Text to code:\nnow").unwrap();
        assert!(h < c && c < t);
    }

    #[test]
    fn format_lists_exactly_codebook_categories() {
        assert_eq!(format_instruction(&cb2()), "{'Alpha': 0, 'Beta': 1}");
        let bundle = build_single_prompt(&AgentProfile::single_coder(0.0), &seg("x"), &cb2(), &[]).unwrap();
        assert!(bundle.system_prompt.ends_with("in this format: {'Alpha': 0, 'Beta': 1}."));
    }

    #[test]
    fn wrong_role_rejected() {
        let p = AgentProfile::discussant("Coder 1", PersonaArchetype::Bold, 0.0);
        assert!(matches!(
            build_single_prompt(&p, &seg("x"), &cb2(), &[]),
            Err(PromptError::WrongRole { .. })
        ));
    }

    #[test]
    fn discussion_rounds() {
        let p = AgentProfile::discussant("Coder 1", PersonaArchetype::Bold, 0.5);
        let r1 = build_discussion_prompt(&p, &seg("x"), &cb2(), 1, None, &[], &[]).unwrap();
        assert!(r1.system_prompt.contains("Establish an initial code"));
        assert!(r1
            .system_prompt
            .starts_with("You are Coder 1, a bold and dominant but elaborative qualitative coding agent."));
        assert!(!r1.user_prompt.contains(PREVIOUS_TURN_PREFIX));

        let r2 = build_discussion_prompt(&p, &seg("x"), &cb2(), 2, Some("Code: {…}"), &[], &[]).unwrap();
        assert!(r2.user_prompt.contains("The previous turn said: Code: {…}"));
        assert!(r2.system_prompt.contains("Engage in collaborative discussion"));
        assert!(r2.system_prompt.ends_with("structured format: {'Alpha': 0, 'Beta': 1}."));

        assert_eq!(
            build_discussion_prompt(&p, &seg("x"), &cb2(), 2, None, &[], &[]).unwrap_err(),
            PromptError::MissingPeerTurn(2)
        );
        assert_eq!(
            build_discussion_prompt(&p, &seg("x"), &cb2(), 0, None, &[], &[]).unwrap_err(),
            PromptError::InvalidRound
        );
    }

    #[test]
    fn discussion_history_embedded() {
        let p = AgentProfile::discussant("Coder 2", PersonaArchetype::Empathetic, 0.5);
        let turns = vec![
            DialogueTurn {
                agent_name: "Coder 1".into(),
                round: 1,
                text: "first take".into(),
            },
            DialogueTurn {
                agent_name: "Coder 2".into(),
                round: 1,
                text: "my first take".into(),
            },
        ];
        let r = build_discussion_prompt(&p, &seg("x"), &cb2(), 2, Some("peer"), &[], &turns).unwrap();
        assert!(r.user_prompt.contains("Coder 1 (round 1): first take"));
        assert!(r.user_prompt.contains("Coder 2 (round 1): my first take"));
        assert!(r.user_prompt.trim_end().ends_with("The previous turn said: peer"));
    }

    #[test]
    fn consensus_prompt() {
        let arb = AgentProfile::arbiter(0.0);
        let a = DialogueTurn {
            agent_name: "Coder 1".into(),
            round: 2,
            text: "Code: {'Alpha': 1, 'Beta': 0}".into(),
        };
        let b = DialogueTurn {
            agent_name: "Coder 2".into(),
            round: 2,
            text: "Code: {'Alpha': 0, 'Beta': 0}".into(),
        };
        let bundle = build_consensus_prompt(&arb, &seg("x"), &cb2(), &a, &b).unwrap();
        assert!(bundle.system_prompt.contains("propose a consensus label"));
        assert!(bundle
            .system_prompt
            .starts_with("You are Arbiter, a balanced and reflective qualitative coding agent."));
        assert!(bundle.user_prompt.contains("Coder 1: Code: {'Alpha': 1"));
        assert!(bundle.user_prompt.contains("Coder 2: Code: {'Alpha': 0"));

        assert!(build_consensus_prompt(&arb, &seg("x"), &cb2(), &a, &a).is_ok());
        let empty = DialogueTurn {
            text: "  ".into(),
            ..b.clone()
        };
        assert_eq!(
            build_consensus_prompt(&arb, &seg("x"), &cb2(), &a, &empty).unwrap_err(),
            PromptError::EmptyTurn("Coder 2".into())
        );
        let mut bold = arb.clone();
        bold.persona = PersonaArchetype::Bold;
        assert!(build_consensus_prompt(&bold, &seg("x"), &cb2(), &a, &b).is_err());
    }

    #[test]
    fn templates_fill_only_slots() {
        let out = render("a {agent_name} {x} {format}", "N{format}", "p", "F");
        assert_eq!(out, "a N{format} {x} F");
    }

    #[test]
    fn history_window_bounds() {
        let segs: Vec<Segment> = (0..5).map(|i| seg(&i.to_string())).collect();
        assert!(history_window(&segs, 0, 10).is_empty());
        assert_eq!(history_window(&segs, 4, 2).len(), 2);
        assert_eq!(history_window(&segs, 4, 2)[0].text, "2");
        assert!(history_window(&segs, 3, 0).is_empty());
    }

    proptest! {
        #[test]
        fn templates_match_modulo_slots(name in "[A-Za-z0-9 ]{1,12}", p in 0usize..3) {
            let persona = PersonaArchetype::ALL[p];
            let cb = Codebook::builtin();
            let fmt = format_instruction(&cb);
            let profile = AgentProfile::discussant(name.clone(), persona, 0.0);
            let r1 = build_discussion_prompt(&profile, &seg("x"), &cb, 1, None, &[], &[]).unwrap();
            let expected = DISCUSSION_ROUND1_TEMPLATE.trim_end()
                .replace("{agent_name}", &name)
                .replace("{personality}", persona.descriptor())
                .replace("{format}", &fmt);
            prop_assert_eq!(r1.system_prompt, expected);
        }
    }
}
