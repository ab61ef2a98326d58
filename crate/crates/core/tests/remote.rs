mod common;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use invar_core::corpus::Corpus;
use invar_core::invariance::rewriter::{builtin_rewrite, rewrite_with_fallback, QueryRewriter, RemoteRewriter};
use invar_core::lm_oracle::{LanguageOracle, RemoteOracle, SyntheticOracle};
use invar_core::provider::{embed_corpus, synthetic_vector, EmbeddingProvider, RemoteProvider};
use invar_core::remote::RemoteOptions;
use invar_core::{EmbeddingMatrix, Error};
use serde_json::{json, Value};

fn quick() -> RemoteOptions {
    RemoteOptions {
        retries: 1,
        backoff: Duration::from_millis(5),
        timeout: Duration::from_secs(10),
        ..RemoteOptions::default()
    }
}

fn synthetic_embeddings(req: &Value, drop: usize) -> Value {
    let dim = req["dim"].as_u64().unwrap() as usize;
    let texts = req["texts"].as_array().unwrap();
    let rows: Vec<Vec<f64>> = texts
        .iter()
        .skip(drop)
        .map(|t| synthetic_vector(5, dim, t.as_str().unwrap()).unwrap().into_vec())
        .collect();
    json!({ "embeddings": rows })
}

fn corpus(n: usize) -> Corpus {
    let docs: Vec<(String, String)> = (0..n).map(|i| (format!("d{i}"), format!("alpha beta {i} gamma delta"))).collect();
    Corpus::from_documents(&docs, 5, 5).unwrap()
}

fn close(a: &[f64], b: &[f64]) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < 1e-12, "{a:?} vs {b:?}");
    }
}

#[test]
fn remote_embeddings_match_local_rows() {
    let url = common::serve(|req| (200, synthetic_embeddings(req, 0)));
    let p = RemoteProvider::new(&url, 8, quick()).unwrap();
    close(p.embed("hello").unwrap().as_slice(), synthetic_vector(5, 8, "hello").unwrap().as_slice());
    let c = corpus(70);
    let m: EmbeddingMatrix = embed_corpus(&p, &c, "remote").unwrap();
    assert_eq!(m.len(), 70);
    for (i, chunk) in c.chunks().iter().enumerate() {
        close(m.row(i), synthetic_vector(5, 8, &chunk.text).unwrap().as_slice());
    }
}

#[test]
fn short_remote_batch_is_rejected() {
    let url = common::serve(|req| (200, synthetic_embeddings(req, 1)));
    let p = RemoteProvider::new(&url, 8, quick()).unwrap();
    let err = p.embed_batch(&["a", "b", "c"], 3).unwrap_err();
    assert!(matches!(err, Error::BatchSizeMismatch { batch: 3, expected: 3, got: 2 }), "{err}");
}

#[test]
fn wrong_dimension_is_rejected() {
    let url = common::serve(|req| {
        let n = req["texts"].as_array().unwrap().len();
        (200, json!({ "embeddings": vec![vec![1.0, 0.0]; n] }))
    });
    let p = RemoteProvider::new(&url, 8, quick()).unwrap();
    assert!(matches!(p.embed("x"), Err(Error::DimMismatch { expected: 8, found: 2 })));
}

#[test]
fn client_errors_fail_without_retry_and_server_errors_retry() {
    let hits = Arc::new(AtomicUsize::new(0));
    let h = hits.clone();
    let url = common::serve(move |_| {
        h.fetch_add(1, Ordering::SeqCst);
        (404, json!({}))
    });
    let p = RemoteProvider::new(&url, 8, quick()).unwrap();
    assert!(matches!(p.embed("x"), Err(Error::RemoteUnavailable { .. })));
    assert_eq!(hits.load(Ordering::SeqCst), 1);

    let hits = Arc::new(AtomicUsize::new(0));
    let h = hits.clone();
    let url = common::serve(move |_| {
        h.fetch_add(1, Ordering::SeqCst);
        (503, json!({}))
    });
    let p = RemoteProvider::new(&url, 8, quick()).unwrap();
    assert!(matches!(p.embed("x"), Err(Error::RemoteUnavailable { .. })));
    assert_eq!(hits.load(Ordering::SeqCst), 2);
}

#[test]
fn remote_oracle_matches_synthetic() {
    let url = common::serve(|req| {
        let o = SyntheticOracle::default();
        let lps: Vec<f64> = req["pairs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|p| o.log_prob(p["context"].as_str().unwrap(), p["target"].as_str().unwrap()).unwrap())
            .collect();
        (200, json!({ "log_probs": lps }))
    });
    let remote = RemoteOracle::new(&url, quick()).unwrap();
    let pairs: Vec<(String, String)> = (0..150).map(|i| (format!("ctx {i} ans{}", i % 3), "ans1".to_string())).collect();
    assert_eq!(remote.log_probs(&pairs).unwrap(), SyntheticOracle::default().log_probs(&pairs).unwrap());
    assert!(matches!(remote.log_prob("ctx", ""), Err(Error::EmptyTarget)));
}

#[test]
fn remote_oracle_rejects_positive_log_probs() {
    let url = common::serve(|_| (200, json!({ "log_probs": [0.5] })));
    let remote = RemoteOracle::new(&url, quick()).unwrap();
    assert!(matches!(remote.log_prob("c", "t"), Err(Error::InvalidLogProb(v)) if v == 0.5));
}

#[test]
fn remote_rewriter_and_fallback() {
    let url = common::serve(|req| (200, json!({ "rewritten": req["query"].as_str().unwrap().to_uppercase() })));
    let r = RemoteRewriter::new(&url, quick()).unwrap();
    assert_eq!(r.rewrite("who wrote it").unwrap(), "WHO WROTE IT");
    let out = rewrite_with_fallback(&r, "who wrote it");
    assert!(!out.fallback);

    let down = common::serve(|_| (500, json!({})));
    let r = RemoteRewriter::new(&down, quick()).unwrap();
    assert!(matches!(r.rewrite("q"), Err(Error::RewriterFailure(_))));
    let out = rewrite_with_fallback(&r, "who wrote the book");
    assert!(out.fallback);
    assert_eq!(out.text, builtin_rewrite("who wrote the book"));

    let empty = common::serve(|_| (200, json!({ "rewritten": "  " })));
    let r = RemoteRewriter::new(&empty, quick()).unwrap();
    assert!(matches!(r.rewrite("q"), Err(Error::RewriterFailure(_))));
}
