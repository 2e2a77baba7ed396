use std::path::Path;

use gicl::graph::{sample_label_fraction, synth_sbm, SbmParams};
use gicl::pipeline::{evaluate_accuracy, run_strategy, InferSetup, PurifyMode, Strategy};
use gicl::prompt::{PromptTemplate, RenderOptions};
use gicl::scorer::stub::{load_fixture, StubReply, StubServer};
use gicl::scorer::{
    CompletionRequest, CompletionTask, HttpScorer, ScoreCache, ScoreRequest, Scorer, ScorerSpec, ScoringContext,
};
use gicl::ScorerError;

fn server() -> StubServer {
    let fixture = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/completions.jsonl");
    StubServer::start(
        "127.0.0.1:0",
        load_fixture(&fixture).unwrap(),
        StubReply::Echo {
            logprob: -0.5,
            text: " class_1\nmore".into(),
        },
    )
    .unwrap()
}

fn scorer(server: &StubServer, retries: u32) -> HttpScorer {
    let mut spec = ScorerSpec::http(server.endpoint(), "stub-model");
    spec.retries = retries;
    spec.backoff_ms = 1;
    spec.timeout_secs = 5.0;
    HttpScorer::new(&spec).unwrap()
}

fn score(s: &HttpScorer, prompt: &str, cont: &str) -> Result<Vec<f64>, ScorerError> {
    s.token_logprobs(&ScoreRequest {
        query: 0,
        example: None,
        class: 0,
        prompt,
        continuation: cont,
    })
}

#[test]
fn scoring_requests_echo_the_full_prompt() {
    let srv = server();
    let s = scorer(&srv, 0);
    let lp = score(&s, "Some text.\nAnswer:", " class_2").unwrap();
    assert_eq!(lp, vec![-0.5]);
    let body = &srv.bodies()[0];
    assert_eq!(body["prompt"], "Some text.\nAnswer: class_2");
    assert_eq!(body["echo"], true);
    assert_eq!(body["max_tokens"], 0);
    assert_eq!(body["model"], "stub-model");
    assert_eq!(s.call_count(), 1);
}

#[test]
fn server_errors_are_retried_then_reported() {
    let srv = server();
    let s = scorer(&srv, 3);
    let err = score(&s, "FAULT-503 prompt", " x").unwrap_err();
    assert!(matches!(err, ScorerError::Status { status: 503, .. }), "{err:?}");
    assert_eq!(srv.request_count(), 4);
}

#[test]
fn dropped_connections_are_transport_errors() {
    let srv = server();
    let s = scorer(&srv, 1);
    let err = score(&s, "FAULT-DROP prompt", " x").unwrap_err();
    assert!(matches!(err, ScorerError::Transport { attempts: 2, .. }), "{err:?}");
    assert_eq!(srv.request_count(), 2);
}

#[test]
fn empty_continuation_is_rejected_without_a_request() {
    let srv = server();
    let s = scorer(&srv, 0);
    assert_eq!(score(&s, "p", ""), Err(ScorerError::EmptyContinuation));
    assert_eq!(srv.request_count(), 0);
}

#[test]
fn completions_return_generated_text() {
    let srv = server();
    let s = scorer(&srv, 0);
    let text = s
        .complete(&CompletionRequest {
            query: 0,
            examples: &[],
            prompt: "Q:",
            task: CompletionTask::Classify,
        })
        .unwrap();
    assert_eq!(text, " class_1\nmore");
}

#[test]
fn zero_shot_inference_parses_stub_answers() {
    let srv = server();
    let s = scorer(&srv, 0);
    let g = synth_sbm(&SbmParams { n_nodes: 60, n_classes: 3, seed: 2, ..Default::default() }).unwrap();
    let split = sample_label_fraction(&g, 0.2, 2).unwrap();
    let template = PromptTemplate::builtin("generic").unwrap();
    let setup = InferSetup {
        graph: &g,
        split: &split,
        scorer: &s,
        template: &template,
        render: RenderOptions::default(),
        k_icl: 0,
        purify: PurifyMode::None,
        seed: 0,
        single_thread: true,
    };
    let rows = run_strategy(&setup, Strategy::ZeroShot, None).unwrap();
    assert!(rows.iter().all(|r| r.parsed && r.predicted.as_deref() == Some("class_1")));
    let summary = evaluate_accuracy(&rows, "").unwrap();
    let want = split.test_ids().iter().filter(|&&i| g.label(i) == Some(1)).count();
    assert_eq!(summary.correct, want);
    assert_eq!(srv.request_count() as usize, rows.len());
}

#[test]
fn feedback_from_stub_goes_through_the_cache() {
    let srv = server();
    let s = scorer(&srv, 0);
    let g = synth_sbm(&SbmParams { n_nodes: 40, n_classes: 2, seed: 1, ..Default::default() }).unwrap();
    let template = PromptTemplate::builtin("generic").unwrap();
    let cache = ScoreCache::in_memory();
    let ctx = ScoringContext::new(&g, &s, &template, &cache, true).unwrap();
    let first = ctx.rank_candidates(0, &[1, 2, 3]).unwrap();
    let calls = srv.request_count();
    assert_eq!(calls, 3 * 2);
    let again = ctx.rank_candidates(0, &[1, 2, 3]).unwrap();
    assert_eq!(srv.request_count(), calls);
    assert_eq!(first.ranked, again.ranked);
    // every class echoes the same per-token log-prob, so utilities are uniform
    assert!(first.ranked.records.iter().all(|r| (r.utility - 0.5).abs() < 1e-12));
}
