//! One listening port for raw JSON-lines sockets, web sockets and static
//! UI files.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use tungstenite::{Message, WebSocket};

use crate::config::ServeConfig;
use crate::error::{Result, ServiceError};
use crate::protocol::ServerMessage;
use crate::registry::Registry;
use crate::worker::{StreamConfig, Worker};

enum Recv {
    Line(String),
    Timeout,
    Closed,
}

trait Transport {
    fn send(&mut self, line: &str) -> io::Result<()>;
    fn recv(&mut self, timeout: Duration) -> Recv;
}

/// Newline-delimited JSON over a plain socket. A reader thread feeds lines
/// through a channel so receiving can time out without losing data.
struct Lines {
    writer: TcpStream,
    rx: mpsc::Receiver<String>,
}

impl Lines {
    fn new(stream: TcpStream) -> io::Result<Self> {
        let reader = stream.try_clone()?;
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Self { writer: stream, rx })
    }
}

impl Drop for Lines {
    fn drop(&mut self) {
        // Also unblocks the reader thread's clone.
        let _ = self.writer.shutdown(std::net::Shutdown::Both);
    }
}

impl Transport for Lines {
    fn send(&mut self, line: &str) -> io::Result<()> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")
    }

    fn recv(&mut self, timeout: Duration) -> Recv {
        match self.rx.recv_timeout(timeout) {
            Ok(l) => Recv::Line(l),
            Err(mpsc::RecvTimeoutError::Timeout) => Recv::Timeout,
            Err(mpsc::RecvTimeoutError::Disconnected) => Recv::Closed,
        }
    }
}

/// One JSON record per text message.
struct Ws {
    ws: WebSocket<TcpStream>,
}

impl Transport for Ws {
    fn send(&mut self, line: &str) -> io::Result<()> {
        self.ws.send(Message::text(line)).map_err(io::Error::other)
    }

    fn recv(&mut self, timeout: Duration) -> Recv {
        let t = timeout.max(Duration::from_millis(1));
        if self.ws.get_mut().set_read_timeout(Some(t)).is_err() {
            return Recv::Closed;
        }
        match self.ws.read() {
            Ok(Message::Text(t)) => Recv::Line(t.to_string()),
            Ok(Message::Binary(b)) => Recv::Line(String::from_utf8_lossy(&b).into_owned()),
            Ok(Message::Close(_)) => Recv::Closed,
            Ok(_) => Recv::Timeout,
            Err(tungstenite::Error::Io(e))
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) =>
            {
                Recv::Timeout
            }
            Err(_) => Recv::Closed,
        }
    }
}

#[derive(Clone)]
struct Shared {
    registry: Arc<Registry>,
    stream: StreamConfig,
    idle: Duration,
    static_dir: Option<PathBuf>,
}

pub struct Server {
    listener: TcpListener,
    shared: Shared,
}

/// A server running on a background thread.
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the acceptor.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_now();
    }
}

impl Server {
    pub fn bind(cfg: &ServeConfig, registry: Arc<Registry>, warmup: usize) -> Result<Self> {
        cfg.validate()?;
        if registry.is_empty() {
            return Err(ServiceError::Config("no checkpoints configured".into()));
        }
        let listener = TcpListener::bind(&cfg.bind)?;
        Ok(Self {
            listener,
            shared: Shared {
                registry,
                stream: StreamConfig {
                    batch: cfg.batch,
                    realtime: cfg.realtime,
                    metrics_every: cfg.metrics_every,
                    warmup,
                },
                idle: Duration::from_secs_f64(cfg.idle_timeout_secs),
                static_dir: cfg.static_dir.clone(),
            },
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accept forever, one thread per connection.
    pub fn run(self) -> Result<()> {
        self.accept_until(&AtomicBool::new(false));
        Ok(())
    }

    pub fn spawn(self) -> Result<ServerHandle> {
        let addr = self.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = std::thread::spawn(move || self.accept_until(&flag));
        Ok(ServerHandle {
            addr,
            stop,
            thread: Some(thread),
        })
    }

    fn accept_until(&self, stop: &AtomicBool) {
        for conn in self.listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            match conn {
                Ok(stream) => {
                    let shared = self.shared.clone();
                    std::thread::spawn(move || {
                        let peer = stream.peer_addr().ok();
                        if let Err(e) = connection(stream, &shared) {
                            log::debug!("connection {peer:?}: {e}");
                        }
                    });
                }
                Err(e) => log::warn!("accept failed: {e}"),
            }
        }
    }
}

fn connection(stream: TcpStream, shared: &Shared) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let head = peek_head(&stream)?;
    if !looks_like_http(&head) {
        return serve_session(Lines::new(stream)?, shared);
    }
    let text = String::from_utf8_lossy(&head).to_ascii_lowercase();
    if text
        .lines()
        .any(|l| l.starts_with("upgrade:") && l.contains("websocket"))
    {
        let ws = tungstenite::accept(stream).map_err(io::Error::other)?;
        return serve_session(Ws { ws }, shared);
    }
    serve_static(stream, shared.static_dir.as_deref())
}

fn looks_like_http(head: &[u8]) -> bool {
    ["GET ", "HEAD ", "POST ", "PUT ", "DELETE ", "OPTIONS "]
        .iter()
        .any(|m| head.starts_with(m.as_bytes()))
}

/// Peek (without consuming) until the bytes either are a full HTTP request
/// head or clearly are not HTTP.
fn peek_head(stream: &TcpStream) -> io::Result<Vec<u8>> {
    let mut buf = vec![0u8; 8192];
    loop {
        let n = stream.peek(&mut buf)?;
        if n == 0 {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "closed before first message",
            ));
        }
        let head = &buf[..n];
        let maybe_http = head
            .iter()
            .take(8)
            .all(|b| b.is_ascii_uppercase() || *b == b' ')
            && head[0] != b' ';
        if !maybe_http || head.windows(4).any(|w| w == b"\r\n\r\n") || n == buf.len() {
            return Ok(head.to_vec());
        }
        std::thread::sleep(Duration::from_millis(2));
    }
}

fn serve_session<T: Transport>(mut t: T, shared: &Shared) -> io::Result<()> {
    let mut worker = Worker::new(shared.registry.clone(), shared.stream);
    let mut last_activity = Instant::now();
    loop {
        let now = Instant::now();
        for m in worker.tick(now) {
            t.send(&m.to_line())?;
        }
        if worker.is_streaming() {
            last_activity = now;
        } else if now.duration_since(last_activity) >= shared.idle {
            let _ = t.send(&ServerMessage::error("idle_timeout", "closing idle session").to_line());
            return Ok(());
        }
        let wait = match worker.next_due() {
            Some(due) if shared.stream.realtime => due.saturating_duration_since(Instant::now()),
            Some(_) => Duration::ZERO,
            None => shared
                .idle
                .saturating_sub(now.duration_since(last_activity)),
        };
        match t.recv(wait) {
            Recv::Line(line) => {
                last_activity = Instant::now();
                if line.trim().is_empty() {
                    continue;
                }
                for m in worker.handle_line(&line, last_activity) {
                    t.send(&m.to_line())?;
                }
            }
            Recv::Timeout => {}
            Recv::Closed => return Ok(()),
        }
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()).unwrap_or("") {
        "html" => "text/html; charset=utf-8",
        "js" | "mjs" => "text/javascript; charset=utf-8",
        "css" => "text/css; charset=utf-8",
        "json" | "map" => "application/json",
        "svg" => "image/svg+xml",
        "png" => "image/png",
        "wasm" => "application/wasm",
        "ico" => "image/x-icon",
        _ => "application/octet-stream",
    }
}

/// Map a request target to a file under `root`, refusing traversal.
pub fn static_path(root: &Path, target: &str) -> Option<PathBuf> {
    let path = target.split(['?', '#']).next().unwrap_or("/");
    let mut out = root.to_path_buf();
    for c in Path::new(path.trim_start_matches('/')).components() {
        match c {
            Component::Normal(s) => out.push(s),
            Component::CurDir => {}
            _ => return None,
        }
    }
    if out.is_dir() {
        out.push("index.html");
    }
    Some(out)
}

const NO_UI: &str = "<!doctype html><title>tptn</title><p>No UI assets configured. \
Connect a web socket to this port and speak the JSON-lines protocol.</p>\n";

fn serve_static(mut stream: TcpStream, root: Option<&Path>) -> io::Result<()> {
    let mut head = Vec::new();
    let mut reader = BufReader::new(stream.try_clone()?);
    loop {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 || line == "\r\n" || line == "\n" {
            break;
        }
        head.push(line);
    }
    let first = head.first().cloned().unwrap_or_default();
    let mut parts = first.split_whitespace();
    let (method, target) = (parts.next().unwrap_or(""), parts.next().unwrap_or("/"));
    let respond = |stream: &mut TcpStream,
                   status: &str,
                   ctype: &str,
                   body: &[u8],
                   with_body: bool|
     -> io::Result<()> {
        write!(
            stream,
            "HTTP/1.1 {status}\r\nContent-Type: {ctype}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
            body.len()
        )?;
        if with_body {
            stream.write_all(body)?;
        }
        stream.flush()
    };
    if method != "GET" && method != "HEAD" {
        return respond(
            &mut stream,
            "405 Method Not Allowed",
            "text/plain",
            b"method not allowed\n",
            true,
        );
    }
    let with_body = method == "GET";
    let Some(root) = root else {
        return if target == "/" || target.starts_with("/index.html") {
            respond(
                &mut stream,
                "200 OK",
                "text/html; charset=utf-8",
                NO_UI.as_bytes(),
                with_body,
            )
        } else {
            respond(
                &mut stream,
                "404 Not Found",
                "text/plain",
                b"not found\n",
                with_body,
            )
        };
    };
    match static_path(root, target).map(|p| (std::fs::read(&p), p)) {
        Some((Ok(body), p)) => respond(&mut stream, "200 OK", content_type(&p), &body, with_body),
        Some((Err(_), _)) => respond(
            &mut stream,
            "404 Not Found",
            "text/plain",
            b"not found\n",
            with_body,
        ),
        None => respond(
            &mut stream,
            "400 Bad Request",
            "text/plain",
            b"bad path\n",
            with_body,
        ),
    }
}
