//! Test support: a local fake OpenAI-compatible completions server.
//!
//! [`FakeCompletionsServer`] binds an ephemeral localhost port and answers
//! `POST /v1/completions` from a scripted playbook — status sequences,
//! canned bodies, artificial delays — while counting attempts. It exists so
//! the HTTP backend's retry and protocol behavior is testable hermetically;
//! it is not a production server.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::{json, Value};

/// One scripted response step.
#[derive(Debug, Clone)]
pub enum Step {
    /// Respond with this HTTP status and JSON body.
    Respond { status: u16, body: Value },
    /// Sleep before responding 200; long sleeps trigger client timeouts.
    Delay { ms: u64, body: Value },
}

impl Step {
    pub fn ok(body: Value) -> Self {
        Step::Respond { status: 200, body }
    }

    pub fn status(status: u16) -> Self {
        Step::Respond {
            status,
            body: json!({"error": {"message": format!("scripted status {status}")}}),
        }
    }
}

/// A canned completions body with the given text.
pub fn completion_body(text: &str) -> Value {
    json!({
        "id": "cmpl-fake",
        "object": "text_completion",
        "choices": [{
            "index": 0,
            "text": text,
            "finish_reason": "stop",
            "logprobs": null
        }],
        "usage": {"prompt_tokens": 7, "completion_tokens": 3}
    })
}

/// A canned echo+logprobs body. `offsets` and `logprobs` describe the
/// echoed tokens; entries may be `null` via `Value::Null`.
pub fn echo_logprobs_body(offsets: &[u64], logprobs: &[Option<f64>]) -> Value {
    let token_logprobs: Vec<Value> = logprobs
        .iter()
        .map(|lp| lp.map_or(Value::Null, |v| json!(v)))
        .collect();
    json!({
        "id": "cmpl-fake",
        "object": "text_completion",
        "choices": [{
            "index": 0,
            "text": "",
            "finish_reason": "stop",
            "logprobs": {
                "tokens": offsets.iter().map(|_| "tok").collect::<Vec<_>>(),
                "token_logprobs": token_logprobs,
                "text_offset": offsets,
            }
        }]
    })
}

struct ServerState {
    steps: Mutex<Vec<Step>>,
    attempts: AtomicUsize,
    requests: Mutex<Vec<Value>>,
    auth_headers: Mutex<Vec<Option<String>>>,
}

/// Scripted localhost completions server. Responses are consumed from the
/// playbook in order; when the playbook runs dry the last step repeats.
pub struct FakeCompletionsServer {
    base_url: String,
    state: Arc<ServerState>,
    shutdown: Arc<std::sync::atomic::AtomicBool>,
    handle: Option<JoinHandle<()>>,
    addr: std::net::SocketAddr,
}

impl FakeCompletionsServer {
    /// Start a server that plays `steps` in order.
    pub fn start(steps: Vec<Step>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind ephemeral port");
        let addr = listener.local_addr().expect("local addr");
        listener
            .set_nonblocking(true)
            .expect("nonblocking listener");

        let state = Arc::new(ServerState {
            steps: Mutex::new(steps),
            attempts: AtomicUsize::new(0),
            requests: Mutex::new(Vec::new()),
            auth_headers: Mutex::new(Vec::new()),
        });
        let shutdown = Arc::new(std::sync::atomic::AtomicBool::new(false));

        let thread_state = Arc::clone(&state);
        let thread_shutdown = Arc::clone(&shutdown);
        let handle = std::thread::spawn(move || {
            while !thread_shutdown.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        // One handler thread per connection, so a delayed
                        // response never blocks counting the client's retry.
                        let state = Arc::clone(&thread_state);
                        std::thread::spawn(move || {
                            let _ = handle_connection(stream, &state);
                        });
                    }
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(2));
                    }
                    Err(_) => break,
                }
            }
        });

        Self {
            base_url: format!("http://{addr}"),
            state,
            shutdown,
            handle: Some(handle),
            addr,
        }
    }

    pub fn base_url(&self) -> &str {
        &self.base_url
    }

    /// Number of requests received so far.
    pub fn attempts(&self) -> usize {
        self.state.attempts.load(Ordering::SeqCst)
    }

    /// Parsed JSON bodies of every request received.
    pub fn requests(&self) -> Vec<Value> {
        self.state.requests.lock().expect("requests lock").clone()
    }

    /// `Authorization` header of each request, in order.
    pub fn auth_headers(&self) -> Vec<Option<String>> {
        self.state
            .auth_headers
            .lock()
            .expect("headers lock")
            .clone()
    }
}

impl Drop for FakeCompletionsServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        // Nudge the accept loop in case it is between polls.
        let _ = TcpStream::connect(self.addr);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(mut stream: TcpStream, state: &ServerState) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;

    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Ok(()); // shutdown nudge or client hangup
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = find_header_end(&buf) {
            break pos;
        }
        if buf.len() > 1 << 20 {
            return Ok(());
        }
    };

    let head = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let content_length = head
        .lines()
        .find_map(|line| {
            let (name, value) = line.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse::<usize>().ok())?
        })
        .unwrap_or(0);
    let auth = head.lines().find_map(|line| {
        let (name, value) = line.split_once(':')?;
        name.eq_ignore_ascii_case("authorization")
            .then(|| value.trim().to_string())
    });

    let body_start = header_end + 4;
    while buf.len() < body_start + content_length {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            break;
        }
        buf.extend_from_slice(&chunk[..n]);
    }
    let body: Value = serde_json::from_slice(&buf[body_start..body_start + content_length])
        .unwrap_or(Value::Null);

    state.attempts.fetch_add(1, Ordering::SeqCst);
    state.requests.lock().expect("requests lock").push(body);
    state.auth_headers.lock().expect("headers lock").push(auth);

    let step = {
        let mut steps = state.steps.lock().expect("steps lock");
        if steps.len() > 1 {
            steps.remove(0)
        } else {
            steps.first().cloned().unwrap_or(Step::Respond {
                status: 500,
                body: json!({"error": {"message": "playbook empty"}}),
            })
        }
    };

    let (status, body) = match step {
        Step::Respond { status, body } => (status, body),
        Step::Delay { ms, body } => {
            std::thread::sleep(Duration::from_millis(ms));
            (200, body)
        }
    };

    let reason = match status {
        200 => "OK",
        401 => "Unauthorized",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    let payload = body.to_string();
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
        payload.len()
    );
    stream.write_all(response.as_bytes())?;
    stream.flush()?;
    Ok(())
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}
