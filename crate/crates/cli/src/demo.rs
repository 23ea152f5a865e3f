//! Offline end-to-end scenario exercising the extraction pathologies seen
//! with real models: a reply that echoes the codebook, a dictionary with
//! numbered duplicate keys, and a dictionary with invented categories.

use coder_consensus::backend::{MockBackend, MockDefault, MockRule, MockScript, SyntheticCoder};
use coder_consensus::codebook::{AssignmentSource, CodeAssignment, CodeValue};
use coder_consensus::experiment::{
    run_experiment, Dataset, ExperimentConfig, Pairing, RunOptions, RunOutput, RunError,
};
use coder_consensus::persona::{DEFAULT_CODER_A, DEFAULT_CODER_B};
use coder_consensus::{AliasTable, Codebook, Extractor, GroundTruth, PersonaArchetype, Segment};

pub const DEMO_MODEL: &str = "mock-model";

fn segments() -> Vec<Segment> {
    [
        "Hi everyone, welcome back to today's session!",
        "Good try, but check the sign on the second term again.",
        "Remember how we factored last week? Use the same idea here.",
    ]
    .iter()
    .enumerate()
    .map(|(id, text)| Segment {
        id,
        transcript_id: "demo".into(),
        speaker: Some("Tutor".into()),
        text: (*text).into(),
    })
    .collect()
}

fn dict(pairs: &[(&str, u8)]) -> String {
    let body: Vec<String> = pairs.iter().map(|(k, v)| format!("'{k}': {v}")).collect();
    format!("{{{}}}", body.join(", "))
}

fn bits(codebook: &Codebook, present: &[&str]) -> Vec<(String, u8)> {
    codebook
        .names()
        .map(|n| (n.to_string(), u8::from(present.contains(&n))))
        .collect()
}

fn as_refs(v: &[(String, u8)]) -> Vec<(&str, u8)> {
    v.iter().map(|(k, b)| (k.as_str(), *b)).collect()
}

/// The scripted replies; everything else is answered by the synthetic coder.
pub fn demo_script(codebook: &Codebook) -> MockScript {
    let greeting = bits(codebook, &["Greeting"]);
    let echo = format!(
        "Codebook:\n{}\nBased on the codebook above, my codes are: {}",
        codebook.render(),
        dict(&as_refs(&greeting))
    );

    let none = bits(codebook, &[]);
    let mut dup = as_refs(&none);
    dup.retain(|(k, _)| *k != "Guiding Feedback");
    dup.insert(2, ("Guiding Feedback.1", 1));
    dup.insert(3, ("Guiding Feedback.2", 0));
    let duplicate = format!("The tutor corrects the student. Code: {}", dict(&dup));

    let prior = bits(codebook, &["Aligning to Prior Knowledge"]);
    let mut invented = as_refs(&prior);
    invented.push(("Praise", 1));
    invented.push(("Student Reflection", 0));
    let hallucinated = format!(
        "The tutor references last week's lesson and the student said 'oh right!'. Code: {}",
        dict(&invented)
    );

    let agree = |present: &[&str]| format!("I agree with this coding. Code: {}", dict(&as_refs(&bits(codebook, present))));

    MockScript::new(
        vec![
            MockRule::new(echo).segment(0).agent(DEFAULT_CODER_A).round(1),
            MockRule::new(agree(&["Greeting"])).segment(0),
            MockRule::new(duplicate).segment(1).agent(DEFAULT_CODER_B).round(1),
            MockRule::new(agree(&["Guiding Feedback"])).segment(1),
            MockRule::new(hallucinated).segment(2).agent(DEFAULT_CODER_A).round(1),
            MockRule::new(agree(&["Aligning to Prior Knowledge"])).segment(2),
        ],
        MockDefault::Synthetic(SyntheticCoder::default()),
    )
}

pub fn demo_dataset() -> Dataset {
    let codebook = Codebook::builtin();
    let truth = [
        &["Greeting"][..],
        &["Guiding Feedback"][..],
        &["Aligning to Prior Knowledge"][..],
    ];
    let ground_truth = truth
        .iter()
        .enumerate()
        .map(|(id, present)| {
            let mut a = CodeAssignment::filled(&codebook, CodeValue::Absent, AssignmentSource::Human);
            for p in *present {
                a.set(p, CodeValue::Present);
            }
            GroundTruth {
                segment_id: id,
                assignment: a,
            }
        })
        .collect();
    Dataset::new(codebook, segments(), ground_truth).expect("demo ground truth covers every segment")
}

/// Runs the scenario on one incongruent configuration.
pub fn run_demo(options: &RunOptions) -> Result<RunOutput, RunError> {
    let dataset = demo_dataset();
    let backend = MockBackend::new(
        demo_script(&dataset.codebook),
        dataset.codebook.names().map(String::from).collect(),
    );
    let extractor = Extractor::new(&dataset.codebook, &AliasTable::builtin());
    let config = ExperimentConfig::new(
        DEMO_MODEL,
        0.5,
        Pairing::new(PersonaArchetype::Bold, PersonaArchetype::Empathetic),
    );
    run_experiment(&[config], &dataset, &backend, &extractor, options)
}
