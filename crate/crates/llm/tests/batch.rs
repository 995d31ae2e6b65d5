use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use lara_core::trec_io::{read_probs, Document, PairKey, Topic};
use lara_llm::*;
use proptest::prelude::*;

/// Answers from a fixed table keyed by a document marker in the prompt.
struct Stub {
    calls: AtomicUsize,
    prompts: Mutex<Vec<String>>,
}

impl Stub {
    fn new() -> Self {
        Self {
            calls: AtomicUsize::new(0),
            prompts: Mutex::new(Vec::new()),
        }
    }
}

impl CompletionClient for Stub {
    fn complete(&self, prompt: &str, _: &DecodingConfig) -> Result<Completion, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts.lock().unwrap().push(prompt.to_string());
        let top = if prompt.contains("DOWN") {
            return Err(ClientError::Transient("connection refused".into()));
        } else if prompt.contains("GIBBERISH") {
            vec![("The".to_string(), -0.1)]
        } else if prompt.contains("RELEVANT") {
            vec![(" 1".to_string(), 0.8f64.ln()), ("1".to_string(), 0.1f64.ln()), (" 0".to_string(), 0.1f64.ln())]
        } else {
            vec![(" 0".to_string(), 0.75f64.ln()), (" 1".to_string(), 0.25f64.ln())]
        };
        Ok(Completion {
            positions: vec![TokenPosition {
                token: top[0].0.clone(),
                top_logprobs: top,
            }],
        })
    }

    fn model_id(&self) -> &str {
        "stub"
    }
}

fn texts() -> Texts {
    Texts::new(
        vec![Topic {
            id: "t".into(),
            title: "solar power".into(),
            description: "".into(),
        }],
        vec![
            Document { id: "a".into(), text: "RELEVANT text".into() },
            Document { id: "b".into(), text: "other text".into() },
            Document { id: "c".into(), text: "DOWN".into() },
            Document { id: "g".into(), text: "GIBBERISH".into() },
        ],
    )
}

fn keys(docs: &[&str]) -> Vec<PairKey> {
    docs.iter().map(|d| PairKey::new("t", *d)).collect()
}

fn options() -> BatchOptions {
    BatchOptions {
        retry: RetryPolicy::immediate(),
        workers: 2,
        ..BatchOptions::new(PromptTemplate::base(), 1)
    }
}

#[test]
fn empty_batch() {
    let stub = Stub::new();
    let r = batch_annotate(&[], &texts(), &stub, &options()).unwrap();
    assert!(r.records.is_empty() && r.failures.is_empty());
    assert_eq!(stub.calls.load(Ordering::SeqCst), 0);
}

#[test]
fn partial_failure_is_reported() {
    let stub = Stub::new();
    let r = batch_annotate(&keys(&["a", "c", "b"]), &texts(), &stub, &options()).unwrap();
    assert_eq!(r.records.len(), 2);
    assert_eq!(r.failures.len(), 1);
    assert_eq!(r.failures[0].doc, "c");
    assert!(r.failures[0].error.contains("unreachable"));
    // Input order is kept; masses are summed over surface forms, then normalized.
    assert_eq!(r.records[0].doc_id, "a");
    assert!((r.records[0].raw_grade_probs[&1] - 0.9).abs() < 1e-12);
    assert!((r.records[0].pi.probs()[1] - 0.9).abs() < 1e-12);
    assert!((r.records[1].pi.probs()[0] - 0.75).abs() < 1e-12);
    assert_eq!(r.records[1].model_id, "stub");
    assert_eq!(r.records[1].prompt_id, "base");
}

#[test]
fn fallback_policies() {
    let stub = Stub::new();
    let r = batch_annotate(&keys(&["g"]), &texts(), &stub, &options()).unwrap();
    assert_eq!(r.fallbacks, keys(&["g"]));
    assert_eq!(r.records[0].pi.probs(), &[0.5, 0.5]);

    let skip = BatchOptions { fallback: Fallback::Skip, ..options() };
    let r = batch_annotate(&keys(&["g"]), &texts(), &stub, &skip).unwrap();
    assert!(r.records.is_empty());
    assert!(r.failures[0].error.contains("no grade token"));
}

#[test]
fn missing_text_fails_without_a_call() {
    let stub = Stub::new();
    let r = batch_annotate(&[PairKey::new("t", "zzz"), PairKey::new("q", "a")], &texts(), &stub, &options()).unwrap();
    assert_eq!(r.failures.len(), 2);
    assert_eq!(stub.calls.load(Ordering::SeqCst), 0);
}

#[test]
fn resume_after_interrupt_issues_one_call() {
    let dir = tempfile::tempdir().unwrap();
    let opts = BatchOptions {
        cache: Some(dir.path().join("probs.jsonl")),
        ..options()
    };
    let stub = Stub::new();
    batch_annotate(&keys(&["a", "b"]), &texts(), &stub, &opts).unwrap();
    assert_eq!(stub.calls.load(Ordering::SeqCst), 2);

    // Simulate a crash that tore the next line mid-write.
    let path = opts.cache.clone().unwrap();
    let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(b"{\"topic\":\"t\",\"do").unwrap();
    drop(f);

    let stub = Stub::new();
    let all = keys(&["a", "b", "g"]);
    let r = batch_annotate(&all, &texts(), &stub, &opts).unwrap();
    assert_eq!(stub.calls.load(Ordering::SeqCst), 1);
    assert_eq!(r.cached, 2);
    assert_eq!(r.records.len(), 3);

    let stub = Stub::new();
    let again = batch_annotate(&all, &texts(), &stub, &opts).unwrap();
    assert_eq!(stub.calls.load(Ordering::SeqCst), 0);
    assert_eq!(again.records, r.records);

    let text = std::fs::read_to_string(&path).unwrap();
    let parsed = read_probs(text.as_bytes(), 1).unwrap();
    assert_eq!(parsed.len(), 3);
}

#[test]
fn cache_is_scoped_to_prompt() {
    let dir = tempfile::tempdir().unwrap();
    let opts = BatchOptions {
        cache: Some(dir.path().join("probs.jsonl")),
        ..options()
    };
    let stub = Stub::new();
    batch_annotate(&keys(&["a"]), &texts(), &stub, &opts).unwrap();
    let utility = BatchOptions {
        template: PromptTemplate::utility(),
        ..opts
    };
    batch_annotate(&keys(&["a"]), &texts(), &stub, &utility).unwrap();
    assert_eq!(stub.calls.load(Ordering::SeqCst), 2);
    assert!(stub.prompts.lock().unwrap()[1].contains("Usefulness"));
}

#[test]
fn duplicate_pairs_query_once() {
    let stub = Stub::new();
    let r = batch_annotate(&keys(&["a", "a"]), &texts(), &stub, &options()).unwrap();
    assert_eq!(r.records.len(), 2);
    assert_eq!(stub.calls.load(Ordering::SeqCst), 1);
}

/// Serves `bodies` in order, one connection each, and records the requests.
fn serve(bodies: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, body) in bodies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            let mut head = String::new();
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line.to_ascii_lowercase().starts_with("content-length:") {
                    len = line[15..].trim().parse().unwrap();
                }
                head.push_str(&line);
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            seen.push(format!("{head}{}", String::from_utf8(buf).unwrap()));
            let mut s = stream;
            write!(
                s,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            )
            .unwrap();
        }
        seen
    });
    (url, handle)
}

#[test]
fn openai_wire_round_trip_with_retry() {
    let ok = r#"{"choices":[{"text":"1","logprobs":{"tokens":["1"],"token_logprobs":[-0.2],"top_logprobs":[{"1":-0.2231435513142097,"0":-1.6094379124341003,"Yes":-4.0}]}}]}"#;
    let (url, server) = serve(vec![(503, "{}".into()), (200, ok.into())]);
    let client = OpenAiClient::new(url, "demo-model", Some("secret".into()));
    let raw = fetch_grade_probs(
        &client,
        &DecodingConfig::default(),
        "prompt text",
        &GradeTokens::digits(1),
        None,
        &RetryPolicy::immediate(),
    )
    .unwrap();
    assert!((raw[&1] - 0.8).abs() < 1e-9);
    assert!((raw[&0] - 0.2).abs() < 1e-9);
    let requests = server.join().unwrap();
    assert_eq!(requests.len(), 2);
    let last = requests[1].to_ascii_lowercase();
    assert!(last.contains("authorization: bearer secret"));
    assert!(requests[1].contains("\"temperature\":3.0"));
    assert!(requests[1].contains("\"prompt\":\"prompt text\""));
}

#[test]
fn openai_client_error_is_not_retried() {
    let (url, server) = serve(vec![(401, r#"{"error":"bad key"}"#.into())]);
    let client = OpenAiClient::new(url, "m", None);
    let err = complete_with_retry(&client, "p", &DecodingConfig::default(), &RetryPolicy::immediate()).unwrap_err();
    assert!(matches!(err, LlmError::BadResponse(ref m) if m.contains("401")), "{err}");
    assert_eq!(server.join().unwrap().len(), 1);
}

#[test]
fn unreachable_endpoint() {
    // Bind then drop to get a port with nothing listening.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let client = OpenAiClient::new(format!("http://127.0.0.1:{port}/v1/completions"), "m", None);
    let err = complete_with_retry(&client, "p", &DecodingConfig::default(), &RetryPolicy::immediate()).unwrap_err();
    assert!(matches!(err, LlmError::EndpointUnreachable(_)));
}

#[test]
fn normalize_examples() {
    let v = normalize_probabilities(&BTreeMap::from([(0, 0.3), (1, 0.1)]), 1).unwrap();
    assert!((v.probs()[0] - 0.75).abs() < 1e-12 && (v.probs()[1] - 0.25).abs() < 1e-12);
    let v = normalize_probabilities(&BTreeMap::from([(0, 0.2), (2, 0.6)]), 2).unwrap();
    for (got, want) in v.probs().iter().zip([0.25, 0.0, 0.75]) {
        assert!((got - want).abs() < 1e-12);
    }
    assert!(normalize_probabilities(&BTreeMap::from([(0, 0.0)]), 1).is_err());
}

proptest! {
    #[test]
    fn normalized_sums_to_one_and_keeps_argmax(masses in prop::collection::vec(0.0f64..1.0, 1..6)) {
        prop_assume!(masses.iter().any(|&m| m > 0.0));
        let l = (masses.len() - 1) as u8;
        let raw: BTreeMap<u8, f64> = masses.iter().enumerate().map(|(g, &m)| (g as u8, m)).collect();
        let v = normalize_probabilities(&raw, l).unwrap();
        prop_assert!((v.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let best = masses.iter().cloned().fold(f64::MIN, f64::max);
        let raw_arg: HashSet<usize> = masses.iter().enumerate().filter(|(_, &m)| m == best).map(|(i, _)| i).collect();
        prop_assert!(raw_arg.contains(&(v.argmax() as usize)));
    }

    #[test]
    fn render_is_deterministic_and_complete(title in "[a-z]{1,12}", doc in "[a-z ]{1,40}[a-z]") {
        let t = PromptTemplate::base();
        let a = t.render(&title, "", &doc, 2).unwrap();
        prop_assert_eq!(&a, &t.render(&title, "", &doc, 2).unwrap());
        prop_assert!(a.contains(&title) && a.contains(&doc));
        let unresolved = a.contains("{topic_title}") || a.contains("{document_text}");
        prop_assert!(!unresolved);
    }
}
