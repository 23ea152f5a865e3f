//! Shared fixtures for integration tests.
#![allow(dead_code)]

use coder_consensus::backend::{MockBackend, MockScript, SyntheticCoder};
use coder_consensus::experiment::Dataset;
use coder_consensus::{AssignmentSource, CodeAssignment, CodeValue, Codebook, GroundTruth, Segment};

const LINES: [&str; 10] = [
    "Hello everyone, good to see you again.",
    "Go ahead and factor the first expression.",
    "Not quite, check the sign on the constant term.",
    "Remember what we said about common factors last time?",
    "Why do you think we divided both sides by three?",
    "You're on mute, can you unmute yourself?",
    "Great job, that's exactly right!",
    "We have about five minutes left.",
    "So what would you multiply on both sides?",
    "Okay, see you on Thursday.",
];

pub fn segments(n: usize) -> Vec<Segment> {
    (0..n)
        .map(|id| Segment {
            id,
            transcript_id: format!("session-{}", id / 25),
            speaker: Some(if id % 7 == 3 { "Student" } else { "Tutor" }.to_string()),
            text: format!("{} ({id})", LINES[id % LINES.len()]),
        })
        .collect()
}

/// Ground truth equal to the synthetic coder's hidden reference labels,
/// with every 11th decision flipped so humans and machines sometimes differ.
pub fn dataset(n: usize, seed: u64) -> Dataset {
    let codebook = Codebook::builtin();
    let reference = SyntheticCoder {
        seed,
        ..SyntheticCoder::default()
    };
    let names: Vec<String> = codebook.names().map(String::from).collect();
    let truth = (0..n)
        .map(|id| {
            let bits: Vec<bool> = names
                .iter()
                .enumerate()
                .map(|(k, c)| reference.reference_bit(id, c) ^ ((id * 8 + k) % 11 == 0))
                .collect();
            GroundTruth {
                segment_id: id,
                assignment: CodeAssignment::from_bits(&codebook, &bits, AssignmentSource::Human),
            }
        })
        .collect();
    Dataset::new(codebook, segments(n), truth).unwrap()
}

pub fn synthetic_backend(dataset: &Dataset, seed: u64) -> MockBackend {
    MockBackend::new(MockScript::synthetic(seed), category_names(&dataset.codebook))
}

pub fn category_names(codebook: &Codebook) -> Vec<String> {
    codebook.names().map(String::from).collect()
}

/// `{'A': v, ...}` over the whole codebook with the listed categories present.
pub fn dict(codebook: &Codebook, present: &[&str]) -> String {
    let body: Vec<String> = codebook
        .names()
        .map(|n| format!("'{n}': {}", u8::from(present.contains(&n))))
        .collect();
    format!("{{{}}}", body.join(", "))
}

pub fn all_absent(codebook: &Codebook) -> CodeAssignment {
    CodeAssignment::filled(codebook, CodeValue::Absent, AssignmentSource::Human)
}
