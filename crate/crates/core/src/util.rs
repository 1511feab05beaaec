//! Hashing, record-per-line IO, atomic file writes and retry.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

/// Hash of the canonical JSON form of `value`. Object keys are emitted in
/// sorted order, so field ordering in the source never affects the result.
pub fn canonical_hash<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("serializable");
    sha256_hex(v.to_string().as_bytes())
}

/// Writes `bytes` to a sibling temp file and renames it into place.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = temp_sibling(path);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

fn temp_sibling(path: &Path) -> PathBuf {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let unique = format!(
        ".{name}.{}.{:?}.tmp",
        std::process::id(),
        std::thread::current().id()
    );
    path.with_file_name(unique.replace(['(', ')'], ""))
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> std::io::Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    atomic_write(path, &buf)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> std::io::Result<Vec<T>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("{}:{}: {e}", path.display(), i + 1),
            )
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Appends one record as a line, creating the file if needed.
pub fn append_jsonl<T: Serialize>(path: &Path, record: &T) -> std::io::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(&mut w, record)?;
    w.write_all(b"\n")?;
    w.flush()
}

/// Striped mutexes keyed by string; writers to the same cache key take the
/// same stripe.
#[derive(Debug)]
pub struct KeyLocks {
    stripes: Vec<std::sync::Mutex<()>>,
}

impl Default for KeyLocks {
    fn default() -> Self {
        Self {
            stripes: (0..64).map(|_| std::sync::Mutex::new(())).collect(),
        }
    }
}

impl KeyLocks {
    pub fn lock(&self, key: &str) -> std::sync::MutexGuard<'_, ()> {
        let idx = key.bytes().fold(0usize, |acc, b| {
            acc.wrapping_mul(31).wrapping_add(b as usize)
        }) % self.stripes.len();
        self.stripes[idx].lock().unwrap_or_else(|e| e.into_inner())
    }
}

/// Keeps `[A-Za-z0-9._-]`, maps everything else to `_`.
pub fn path_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Exponential-backoff retry policy.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay_ms: 200,
        }
    }
}

impl RetryPolicy {
    pub fn immediate(attempts: u32) -> Self {
        Self {
            attempts,
            base_delay_ms: 0,
        }
    }

    /// Runs `op` until it succeeds, returns a non-retriable error, or the
    /// attempt budget runs out. `op` receives the 1-based attempt number;
    /// the final error is returned together with the attempts made.
    pub fn run<T, E>(
        &self,
        mut op: impl FnMut(u32) -> Result<T, E>,
        retriable: impl Fn(&E) -> bool,
    ) -> Result<T, (E, u32)> {
        let attempts = self.attempts.max(1);
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Ok(v) => return Ok(v),
                Err(e) if attempt < attempts && retriable(&e) => {
                    let delay = self.base_delay_ms.saturating_mul(1 << (attempt - 1));
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    attempt += 1;
                }
                Err(e) => return Err((e, attempt)),
            }
        }
    }
}

/// Failure of [`post_json`]: message plus the number of attempts made.
#[derive(Debug, Clone, PartialEq)]
pub struct HttpFailure {
    pub message: String,
    pub attempts: u32,
    pub status: Option<u16>,
}

enum Attempt {
    Transport(String),
    Status(u16, String),
    Decode(String),
}

/// POSTs `body` as JSON and decodes a JSON response. Transport errors and
/// 5xx responses are retried under `policy`; 4xx and undecodable bodies
/// fail immediately.
pub fn post_json(
    url: &str,
    api_key: Option<&str>,
    body: &serde_json::Value,
    timeout: Duration,
    policy: &RetryPolicy,
) -> Result<serde_json::Value, HttpFailure> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let result = policy.run(
        |_| {
            let mut req = agent.post(url);
            if let Some(key) = api_key {
                req = req.header("Authorization", &format!("Bearer {key}"));
            }
            let mut resp = req
                .send_json(body)
                .map_err(|e| Attempt::Transport(e.to_string()))?;
            let status = resp.status().as_u16();
            if status >= 400 {
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                return Err(Attempt::Status(status, text));
            }
            resp.body_mut()
                .read_json::<serde_json::Value>()
                .map_err(|e| Attempt::Decode(e.to_string()))
        },
        |e| matches!(e, Attempt::Transport(_)) || matches!(e, Attempt::Status(s, _) if *s >= 500),
    );
    result.map_err(|(e, attempts)| match e {
        Attempt::Transport(m) => HttpFailure {
            message: format!("transport: {m}"),
            attempts,
            status: None,
        },
        Attempt::Status(s, m) => HttpFailure {
            message: format!("HTTP {s}: {}", m.chars().take(200).collect::<String>()),
            attempts,
            status: Some(s),
        },
        Attempt::Decode(m) => HttpFailure {
            message: format!("bad response body: {m}"),
            attempts,
            status: None,
        },
    })
}

/// Reads a credential from the environment; empty values count as unset.
pub fn env_credential(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|v| !v.is_empty())
}

/// `SYNTHSIGHT_<ID>_API_KEY` with the id upper-cased and non-alphanumerics
/// mapped to `_`.
pub fn credential_var(adapter_id: &str) -> String {
    let id: String = adapter_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_uppercase()
            } else {
                '_'
            }
        })
        .collect();
    format!("SYNTHSIGHT_{id}_API_KEY")
}

/// Maps `f` over `items` on at most `workers` threads, keeping input order.
/// The first error in input order is returned.
pub fn bounded_map<T, R, E>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> Result<R, E> + Sync,
) -> Result<Vec<R>, E>
where
    T: Sync,
    R: Send,
    E: Send,
{
    use rayon::prelude::*;
    if workers <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    let results: Vec<Result<R, E>> = pool.install(|| items.par_iter().map(&f).collect());
    results.into_iter().collect()
}

#[doc(hidden)]
pub mod testserver {
    //! Minimal scripted HTTP/1.1 server for client tests.

    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::{Arc, Mutex};

    pub struct Server {
        pub url: String,
        pub requests: Arc<Mutex<Vec<serde_json::Value>>>,
    }

    /// Serves `responses` (status, body) in order, one per connection, and
    /// records every JSON request body.
    pub fn spawn(responses: Vec<(u16, String)>) -> Server {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        std::thread::spawn(move || {
            for (status, body) in responses {
                let Ok((mut stream, _)) = listener.accept() else {
                    return;
                };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0u8; len];
                let _ = reader.read_exact(&mut buf);
                if let Ok(v) = serde_json::from_slice(&buf) {
                    log.lock().unwrap().push(v);
                }
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(reply.as_bytes());
                let _ = stream.flush();
            }
        });
        Server { url, requests }
    }
}
