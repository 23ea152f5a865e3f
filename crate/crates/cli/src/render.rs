//! Plain-text rendering of deliberation traces.

use std::fmt::Write;

use coder_consensus::experiment::TraceEntry;
use coder_consensus::{DeliberationTrace, TurnRecord};

fn indent(text: &str, out: &mut String) {
    for line in text.lines() {
        let _ = writeln!(out, "    | {line}");
    }
}

fn list(label: &str, items: &[String], out: &mut String) {
    if !items.is_empty() {
        let _ = writeln!(out, "  {label}: {}", items.join(", "));
    }
}

fn turn(title: &str, t: &TurnRecord, out: &mut String) {
    let ex = &t.extraction;
    let _ = writeln!(
        out,
        "{title} · {} ({}) · extraction {}{}",
        t.agent_name,
        t.role,
        ex.parse_status.as_str(),
        if t.retried { " after re-prompt" } else { "" }
    );
    if let Some(first) = &t.first_attempt_text {
        let _ = writeln!(out, "  first attempt:");
        indent(first, out);
        let _ = writeln!(out, "  re-prompt reply:");
    }
    indent(&t.raw_text, out);
    let _ = writeln!(out, "  codes: {}", ex.assignment.to_dict_string());
    list("missing", &ex.missing_labels, out);
    list("extraneous", &ex.extraneous_labels, out);
    list("malformed", &ex.malformed_labels, out);
    list("duplicate", &ex.duplicate_labels, out);
    list("conflicting duplicate", &ex.conflicting_labels, out);
}

/// Human-readable transcript of one completed session.
pub fn render_trace(trace: &DeliberationTrace) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "config {} · segment {} · max_rounds {}",
        trace.config_id, trace.segment_id, trace.max_rounds
    );
    if let Some(single) = &trace.single_agent_turn {
        turn("control", single, &mut out);
    }
    for t in &trace.turns {
        turn(&format!("round {}", t.round), t, &mut out);
    }
    if let Some(arbiter) = &trace.arbiter_turn {
        turn(&format!("arbiter (round {})", arbiter.round), arbiter, &mut out);
        if trace.arbiter_fallback {
            let _ = writeln!(out, "  arbiter produced no usable label; every category is missing");
        }
    }
    let when = match trace.consensus_round {
        Some(r) => format!(" at round {r}"),
        None => String::new(),
    };
    let _ = writeln!(out, "outcome: {}{when}", trace.outcome.as_str());
    let _ = writeln!(out, "final codes: {}", trace.final_codes.to_dict_string());
    out
}

pub fn render_entry(entry: &TraceEntry) -> String {
    match entry {
        TraceEntry::Completed(trace) => render_trace(trace),
        TraceEntry::Failed(f) => {
            let mut out = String::new();
            let _ = writeln!(
                out,
                "config {} · segment {} · FAILED during {}: {}",
                f.config_id, f.segment_id, f.stage, f.error
            );
            for t in &f.partial_turns {
                turn(&format!("round {}", t.round), t, &mut out);
            }
            out
        }
    }
}
