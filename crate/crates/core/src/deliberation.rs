//! Per-segment coding sessions: the single-agent control coder and the
//! two-coder discussion with arbiter fallback.
//!
//! Round 1: both discussants code independently. If their assignments align
//! the session ends with `first_consensus`. Otherwise rounds 2..=max_rounds
//! run A then B with the discussion prompt, each seeing the peer's latest
//! turn, and alignment is re-checked after each full round
//! (`delayed_consensus`). If the coders never align the arbiter reads both
//! latest turns and its extracted assignment is final (`no_consensus`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, ChatBackend, ChatRequest, RequestTag};
use crate::codebook::{AssignmentSource, CodeAssignment, Codebook, Segment};
use crate::extraction::{ExtractionResult, Extractor};
use crate::persona::{AgentProfile, AgentRole, PersonaArchetype};
use crate::prompting::{
    build_consensus_prompt, build_discussion_prompt, build_single_prompt, DialogueTurn,
    PromptBundle, PromptError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub round: u32,
    pub agent_name: String,
    pub role: AgentRole,
    /// Completion text the extraction was taken from (the retry's text when retried).
    pub raw_text: String,
    /// First-attempt text, kept when a re-prompt replaced it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_attempt_text: Option<String>,
    pub extraction: ExtractionResult,
    pub retried: bool,
    pub timestamp_ms: u64,
    pub latency_ms: u64,
}

impl TurnRecord {
    pub fn assignment(&self) -> &CodeAssignment {
        &self.extraction.assignment
    }

    fn dialogue(&self) -> DialogueTurn {
        DialogueTurn {
            agent_name: self.agent_name.clone(),
            round: self.round,
            text: self.raw_text.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsensusOutcome {
    FirstConsensus,
    DelayedConsensus,
    NoConsensus,
}

impl ConsensusOutcome {
    pub const ALL: [ConsensusOutcome; 3] = [
        Self::FirstConsensus,
        Self::DelayedConsensus,
        Self::NoConsensus,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::FirstConsensus => "first_consensus",
            Self::DelayedConsensus => "delayed_consensus",
            Self::NoConsensus => "no_consensus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.as_str() == s.trim())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliberationTrace {
    pub config_id: String,
    pub segment_id: usize,
    pub max_rounds: u32,
    /// Discussant turns in call order: A, B per round.
    pub turns: Vec<TurnRecord>,
    pub outcome: ConsensusOutcome,
    /// Round at which the coders aligned; `None` when arbitrated.
    pub consensus_round: Option<u32>,
    pub final_codes: CodeAssignment,
    pub arbiter_turn: Option<TurnRecord>,
    /// Arbiter extraction produced no usable label even after its retry.
    pub arbiter_fallback: bool,
    pub single_agent_turn: Option<TurnRecord>,
    pub single_agent_codes: Option<CodeAssignment>,
}

#[derive(Debug, Error)]
pub enum DeliberationError {
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("segment {segment_id}: {agent} round {round}: {source}")]
    Transport {
        segment_id: usize,
        agent: String,
        round: u32,
        #[source]
        source: BackendError,
        /// Turns completed before the failure, including a first-pass
        /// record when the failure happened during the re-prompt.
        partial_turns: Vec<TurnRecord>,
    },
    #[error("max_rounds must be >= 1")]
    InvalidMaxRounds,
    #[error("alignment check on mismatched category sets")]
    CategoryMismatch,
    #[error("trace integrity: {0}")]
    Integrity(String),
}

/// True iff every category holds the same binary value on both sides.
/// `Missing` never counts as agreement.
pub fn check_alignment(a: &CodeAssignment, b: &CodeAssignment) -> Result<bool, DeliberationError> {
    if a.values.len() != b.values.len() || !a.values.keys().eq(b.values.keys()) {
        return Err(DeliberationError::CategoryMismatch);
    }
    Ok(a
        .values
        .values()
        .zip(b.values.values())
        .all(|(x, y)| !x.is_missing() && x == y))
}

/// Discussant and arbiter profiles for one deliberation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Panel {
    pub coder_a: AgentProfile,
    pub coder_b: AgentProfile,
    pub arbiter: AgentProfile,
}

impl Panel {
    pub fn new(a: PersonaArchetype, b: PersonaArchetype, temperature: f64) -> Self {
        Self {
            coder_a: AgentProfile::discussant(crate::persona::DEFAULT_CODER_A, a, temperature),
            coder_b: AgentProfile::discussant(crate::persona::DEFAULT_CODER_B, b, temperature),
            arbiter: AgentProfile::arbiter(temperature),
        }
    }
}

/// Executes sessions against one backend for one configuration.
pub struct Deliberator<'a, B: ChatBackend + ?Sized> {
    backend: &'a B,
    extractor: &'a Extractor,
    model_id: String,
    config_id: String,
    seed: Option<u64>,
}

struct TurnFailure {
    source: BackendError,
    first_pass: Option<Box<TurnRecord>>,
}

impl<'a, B: ChatBackend + ?Sized> Deliberator<'a, B> {
    pub fn new(
        backend: &'a B,
        extractor: &'a Extractor,
        model_id: impl Into<String>,
        config_id: impl Into<String>,
        seed: Option<u64>,
    ) -> Self {
        Self {
            backend,
            extractor,
            model_id: model_id.into(),
            config_id: config_id.into(),
            seed,
        }
    }

    fn codebook(&self) -> &Codebook {
        self.extractor.codebook()
    }

    fn run_turn(
        &self,
        profile: &AgentProfile,
        segment: &Segment,
        round: u32,
        bundle: PromptBundle,
    ) -> Result<TurnRecord, TurnFailure> {
        let request = ChatRequest {
            model_id: self.model_id.clone(),
            system_prompt: bundle.system_prompt,
            user_prompt: bundle.user_prompt,
            temperature: profile.temperature,
            seed: self.seed,
            tag: RequestTag {
                config_id: self.config_id.clone(),
                segment_id: segment.id,
                round,
                agent: profile.name.clone(),
                role: Some(profile.role),
            },
        };
        let first = self.backend.complete(&request).map_err(|source| TurnFailure {
            source,
            first_pass: None,
        })?;
        let mut retry_response = None;
        let outcome = self.extractor.extract_with_retry(&first.text, || {
            self.backend.complete(&request).map(|r| {
                retry_response = Some(r.clone());
                r.text
            })
        });
        let record = |extraction: ExtractionResult, raw: String, first_attempt: Option<String>, at: u64, latency: u64| {
            TurnRecord {
                round,
                agent_name: profile.name.clone(),
                role: profile.role,
                raw_text: raw,
                first_attempt_text: first_attempt,
                retried: extraction.retried,
                extraction,
                timestamp_ms: at,
                latency_ms: latency,
            }
        };
        match outcome {
            Ok((mut extraction, None)) => {
                extraction.assignment.source = AssignmentSource::Agent;
                Ok(record(
                    extraction,
                    first.text,
                    None,
                    first.received_at_ms,
                    first.latency.as_millis() as u64,
                ))
            }
            Ok((mut extraction, Some(text))) => {
                extraction.assignment.source = AssignmentSource::Agent;
                let retry = retry_response.expect("retry response recorded");
                Ok(record(
                    extraction,
                    text,
                    Some(first.text),
                    retry.received_at_ms,
                    (first.latency + retry.latency).as_millis() as u64,
                ))
            }
            Err(e) => Err(TurnFailure {
                source: e.source,
                first_pass: Some(Box::new(record(
                    *e.first_pass,
                    first.text,
                    None,
                    first.received_at_ms,
                    first.latency.as_millis() as u64,
                ))),
            }),
        }
    }

    fn fail(
        segment: &Segment,
        profile: &AgentProfile,
        round: u32,
        failure: TurnFailure,
        mut done: Vec<TurnRecord>,
    ) -> DeliberationError {
        done.extend(failure.first_pass.map(|t| *t));
        DeliberationError::Transport {
            segment_id: segment.id,
            agent: profile.name.clone(),
            round,
            source: failure.source,
            partial_turns: done,
        }
    }

    /// Control condition: one prompt, one completion, one optional re-prompt.
    pub fn run_single_agent(
        &self,
        segment: &Segment,
        profile: &AgentProfile,
        history: &[Segment],
    ) -> Result<(CodeAssignment, TurnRecord), DeliberationError> {
        let bundle = build_single_prompt(profile, segment, self.codebook(), history)?;
        let turn = self
            .run_turn(profile, segment, 1, bundle)
            .map_err(|f| Self::fail(segment, profile, 1, f, Vec::new()))?;
        let codes = turn.assignment().clone().with_source(AssignmentSource::SingleAgent);
        Ok((codes, turn))
    }

    pub fn run_deliberation(
        &self,
        segment: &Segment,
        panel: &Panel,
        history: &[Segment],
        max_rounds: u32,
    ) -> Result<DeliberationTrace, DeliberationError> {
        if max_rounds == 0 {
            return Err(DeliberationError::InvalidMaxRounds);
        }
        for p in [&panel.coder_a, &panel.coder_b] {
            if p.role != AgentRole::Discussant {
                return Err(PromptError::WrongRole {
                    agent: p.name.clone(),
                    expected: AgentRole::Discussant,
                    found: p.role,
                }
                .into());
            }
        }
        let codebook = self.codebook();
        let mut turns: Vec<TurnRecord> = Vec::with_capacity(2 * max_rounds as usize);

        // round 1: independent coding
        for profile in [&panel.coder_a, &panel.coder_b] {
            let bundle = build_discussion_prompt(profile, segment, codebook, 1, None, history, &[])?;
            match self.run_turn(profile, segment, 1, bundle) {
                Ok(t) => turns.push(t),
                Err(f) => return Err(Self::fail(segment, profile, 1, f, turns)),
            }
        }
        if check_alignment(turns[0].assignment(), turns[1].assignment())? {
            return Ok(self.agreed(segment, max_rounds, turns, 1));
        }

        for round in 2..=max_rounds {
            for (profile, peer_name) in [
                (&panel.coder_a, panel.coder_b.name.as_str()),
                (&panel.coder_b, panel.coder_a.name.as_str()),
            ] {
                let peer_idx = turns
                    .iter()
                    .rposition(|t| t.agent_name == peer_name)
                    .expect("peer has spoken");
                let discussion: Vec<DialogueTurn> = turns
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != peer_idx)
                    .map(|(_, t)| t.dialogue())
                    .collect();
                let bundle = build_discussion_prompt(
                    profile,
                    segment,
                    codebook,
                    round,
                    Some(&turns[peer_idx].raw_text),
                    history,
                    &discussion,
                )?;
                match self.run_turn(profile, segment, round, bundle) {
                    Ok(t) => turns.push(t),
                    Err(f) => return Err(Self::fail(segment, profile, round, f, turns)),
                }
            }
            let n = turns.len();
            if check_alignment(turns[n - 2].assignment(), turns[n - 1].assignment())? {
                return Ok(self.agreed(segment, max_rounds, turns, round));
            }
        }

        let n = turns.len();
        let bundle = build_consensus_prompt(
            &panel.arbiter,
            segment,
            codebook,
            &turns[n - 2].dialogue(),
            &turns[n - 1].dialogue(),
        )?;
        let arbiter_round = max_rounds + 1;
        let arbiter_turn = match self.run_turn(&panel.arbiter, segment, arbiter_round, bundle) {
            Ok(t) => t,
            Err(f) => return Err(Self::fail(segment, &panel.arbiter, arbiter_round, f, turns)),
        };
        let final_codes = arbiter_turn
            .assignment()
            .clone()
            .with_source(AssignmentSource::Consensus);
        let arbiter_fallback = final_codes.missing_count() == codebook.len();
        Ok(DeliberationTrace {
            config_id: self.config_id.clone(),
            segment_id: segment.id,
            max_rounds,
            turns,
            outcome: ConsensusOutcome::NoConsensus,
            consensus_round: None,
            final_codes,
            arbiter_turn: Some(arbiter_turn),
            arbiter_fallback,
            single_agent_turn: None,
            single_agent_codes: None,
        })
    }

    fn agreed(&self, segment: &Segment, max_rounds: u32, turns: Vec<TurnRecord>, round: u32) -> DeliberationTrace {
        let final_codes = turns[turns.len() - 2]
            .assignment()
            .clone()
            .with_source(AssignmentSource::Agent);
        DeliberationTrace {
            config_id: self.config_id.clone(),
            segment_id: segment.id,
            max_rounds,
            turns,
            outcome: if round == 1 {
                ConsensusOutcome::FirstConsensus
            } else {
                ConsensusOutcome::DelayedConsensus
            },
            consensus_round: Some(round),
            final_codes,
            arbiter_turn: None,
            arbiter_fallback: false,
            single_agent_turn: None,
            single_agent_codes: None,
        }
    }
}

/// Recomputes the outcome from the recorded turns and checks it against the
/// stored one.
pub fn classify_outcome(trace: &DeliberationTrace) -> Result<ConsensusOutcome, DeliberationError> {
    let bad = |m: String| DeliberationError::Integrity(format!("segment {}: {m}", trace.segment_id));
    if trace.turns.len() < 2 || !trace.turns.len().is_multiple_of(2) {
        return Err(bad(format!("{} discussant turns (expected an even count >= 2)", trace.turns.len())));
    }
    let mut aligned_at = None;
    for (idx, pair) in trace.turns.chunks(2).enumerate() {
        let round = idx as u32 + 1;
        let (a, b) = (&pair[0], &pair[1]);
        if a.round != round || b.round != round {
            return Err(bad(format!("turn rounds out of sequence at round {round}")));
        }
        if idx > 0 && (a.agent_name != trace.turns[0].agent_name || b.agent_name != trace.turns[1].agent_name) {
            return Err(bad(format!("agents do not alternate at round {round}")));
        }
        if check_alignment(a.assignment(), b.assignment())? {
            if aligned_at.is_some() || (idx + 1) * 2 != trace.turns.len() {
                return Err(bad(format!("session continued after alignment at round {round}")));
            }
            aligned_at = Some(round);
        }
    }
    let recomputed = match (aligned_at, &trace.arbiter_turn) {
        (Some(1), None) => ConsensusOutcome::FirstConsensus,
        (Some(_), None) => ConsensusOutcome::DelayedConsensus,
        (None, Some(_)) => ConsensusOutcome::NoConsensus,
        (Some(_), Some(_)) => return Err(bad("arbiter invoked after alignment".into())),
        (None, None) => return Err(bad("no alignment and no arbiter turn".into())),
    };
    if recomputed != trace.outcome {
        return Err(bad(format!(
            "stored outcome {} but turns imply {}",
            trace.outcome.as_str(),
            recomputed.as_str()
        )));
    }
    Ok(recomputed)
}
