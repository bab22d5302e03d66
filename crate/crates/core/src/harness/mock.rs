//! A scripted chat-completion server for exercising the live adapter
//! without a network. Binds a loopback port, answers every request with
//! one canned completion, and records request bodies for assertions.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde_json::json;

pub struct ScriptedChatServer {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
    requests: Arc<Mutex<Vec<String>>>,
}

impl ScriptedChatServer {
    /// Replies 200 with a single-choice completion whose message content
    /// is `reply_content`.
    pub fn spawn(reply_content: &str) -> Self {
        Self::spawn_with_status(200, reply_content)
    }

    /// Non-2xx statuses reply with a JSON error body instead.
    pub fn spawn_with_status(status: u16, reply_content: &str) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind loopback");
        listener.set_nonblocking(true).expect("nonblocking listener");
        let addr = listener.local_addr().expect("local addr");
        let shutdown = Arc::new(AtomicBool::new(false));
        let requests = Arc::new(Mutex::new(Vec::new()));

        let body = if (200..300).contains(&status) {
            json!({
                "id": "chatcmpl-scripted",
                "object": "chat.completion",
                "model": "scripted",
                "choices": [{
                    "index": 0,
                    "message": {"role": "assistant", "content": reply_content},
                    "finish_reason": "stop"
                }]
            })
            .to_string()
        } else {
            json!({"error": {"message": reply_content}}).to_string()
        };

        let thread_shutdown = Arc::clone(&shutdown);
        let thread_requests = Arc::clone(&requests);
        let handle = std::thread::spawn(move || {
            while !thread_shutdown.load(Ordering::Relaxed) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        if let Some(request_body) = handle_connection(stream, status, &body) {
                            thread_requests.lock().unwrap().push(request_body);
                        }
                    }
                    Err(ref err) if err.kind() == std::io::ErrorKind::WouldBlock => {
                        std::thread::sleep(Duration::from_millis(5));
                    }
                    Err(_) => break,
                }
            }
        });

        ScriptedChatServer {
            addr,
            shutdown,
            handle: Some(handle),
            requests,
        }
    }

    /// Base URL to point a live config at.
    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Request bodies received so far, in order.
    pub fn requests(&self) -> Vec<String> {
        self.requests.lock().unwrap().clone()
    }
}

impl Drop for ScriptedChatServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

fn handle_connection(mut stream: TcpStream, status: u16, body: &str) -> Option<String> {
    stream
        .set_read_timeout(Some(Duration::from_secs(2)))
        .ok()?;

    let mut raw = Vec::new();
    let mut buf = [0u8; 1024];
    let header_end = loop {
        match stream.read(&mut buf) {
            Ok(0) => return None,
            Ok(n) => {
                raw.extend_from_slice(&buf[..n]);
                if let Some(pos) = find_header_end(&raw) {
                    break pos;
                }
                if raw.len() > 1 << 20 {
                    return None;
                }
            }
            Err(_) => return None,
        }
    };

    let headers = String::from_utf8_lossy(&raw[..header_end]).to_string();
    let content_length = headers
        .lines()
        .find_map(|line| {
            let (name, value) = line.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse::<usize>().ok())?
        })
        .unwrap_or(0);

    let body_start = header_end + 4;
    while raw.len() < body_start + content_length {
        match stream.read(&mut buf) {
            Ok(0) => break,
            Ok(n) => raw.extend_from_slice(&buf[..n]),
            Err(_) => break,
        }
    }
    let request_body =
        String::from_utf8_lossy(&raw[body_start.min(raw.len())..]).to_string();

    let reason = match status {
        200 => "OK",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        _ => "Status",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    stream.write_all(response.as_bytes()).ok()?;
    let _ = stream.flush();
    Some(request_body)
}

fn find_header_end(raw: &[u8]) -> Option<usize> {
    raw.windows(4).position(|w| w == b"\r\n\r\n")
}
