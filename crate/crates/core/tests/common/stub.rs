#![allow(dead_code)]

//! Minimal HTTP scorer speaking the service's JSON protocol. Scores are the
//! Jaccard index of the two texts' canonical word sets.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use collabtrace_core::simprovider::{jaccard, ScoreRequest, ScoreResponse};
use collabtrace_core::text;

pub const MODEL: &str = "stub-jaccard";

#[derive(Default)]
pub struct StubState {
    /// Health calls answered `loading` before turning `ready`.
    pub loading_polls: AtomicUsize,
    /// Score calls answered 503 before serving.
    pub unavailable_scores: AtomicUsize,
    pub health_calls: AtomicUsize,
    pub score_calls: AtomicUsize,
    pub batch_sizes: Mutex<Vec<usize>>,
    pub batch_ids: Mutex<Vec<Option<String>>>,
    pub in_flight: AtomicUsize,
    pub max_in_flight: AtomicUsize,
    pub delay_ms: AtomicUsize,
}

pub struct Stub {
    pub url: String,
    pub state: Arc<StubState>,
}

pub fn start(state: StubState) -> Stub {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind");
    let url = format!("http://{}", listener.local_addr().unwrap());
    let state = Arc::new(state);
    let shared = state.clone();
    std::thread::spawn(move || {
        for conn in listener.incoming() {
            let Ok(conn) = conn else { continue };
            let st = shared.clone();
            std::thread::spawn(move || serve(conn, &st));
        }
    });
    Stub { url, state }
}

pub fn stub_score(left: &str, right: &str) -> f64 {
    let a = text::word_set(text::tokenize(left).iter());
    let b = text::word_set(text::tokenize(right).iter());
    jaccard(&a, &b)
}

fn serve(conn: TcpStream, st: &StubState) {
    let mut reader = BufReader::new(conn.try_clone().expect("clone"));
    let mut writer = conn;
    loop {
        let mut request_line = String::new();
        if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
            return;
        }
        let mut length = 0usize;
        loop {
            let mut line = String::new();
            if reader.read_line(&mut line).unwrap_or(0) == 0 {
                return;
            }
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            if let Some((k, v)) = line.split_once(':') {
                if k.eq_ignore_ascii_case("content-length") {
                    length = v.trim().parse().unwrap_or(0);
                }
            }
        }
        let mut body = vec![0u8; length];
        if reader.read_exact(&mut body).is_err() {
            return;
        }
        let (status, payload) = route(request_line.trim(), &body, st);
        let reason = match status {
            200 => "OK",
            400 => "Bad Request",
            404 => "Not Found",
            _ => "Service Unavailable",
        };
        let head = format!(
            "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            payload.len()
        );
        if writer
            .write_all(head.as_bytes())
            .and_then(|_| writer.write_all(payload.as_bytes()))
            .is_err()
        {
            return;
        }
    }
}

fn decrement(counter: &AtomicUsize) -> bool {
    counter
        .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
        .is_ok()
}

fn route(line: &str, body: &[u8], st: &StubState) -> (u16, String) {
    if line.starts_with("GET /v1/health") {
        st.health_calls.fetch_add(1, Ordering::SeqCst);
        let status = if decrement(&st.loading_polls) {
            "loading"
        } else {
            "ready"
        };
        return (200, serde_json::json!({"status": status, "model": MODEL}).to_string());
    }
    if !line.starts_with("POST /v1/score") {
        return (404, "{}".into());
    }
    st.score_calls.fetch_add(1, Ordering::SeqCst);
    if decrement(&st.unavailable_scores) {
        // a restarted service is loading again
        st.loading_polls.fetch_add(1, Ordering::SeqCst);
        return (503, r#"{"error":"loading"}"#.into());
    }
    let Ok(req) = serde_json::from_slice::<ScoreRequest>(body) else {
        return (400, r#"{"error":"malformed"}"#.into());
    };
    if req.pairs.is_empty() {
        return (400, r#"{"error":"empty"}"#.into());
    }
    let now = st.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    st.max_in_flight.fetch_max(now, Ordering::SeqCst);
    let delay = st.delay_ms.load(Ordering::SeqCst);
    if delay > 0 {
        std::thread::sleep(Duration::from_millis(delay as u64));
    }
    st.batch_sizes.lock().unwrap().push(req.pairs.len());
    st.batch_ids.lock().unwrap().push(req.batch_id.clone());
    let scores = req
        .pairs
        .iter()
        .map(|p| stub_score(&p.left_text, &p.right_text))
        .collect();
    st.in_flight.fetch_sub(1, Ordering::SeqCst);
    let resp = ScoreResponse {
        scores,
        model: MODEL.into(),
    };
    (200, serde_json::to_string(&resp).unwrap())
}
