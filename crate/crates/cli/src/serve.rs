//! One TCP port, three protocols: a connection whose first byte is `{` is an
//! NDJSON session, an HTTP request with `Upgrade: websocket` becomes a
//! WebSocket session, and any other GET is answered from the static
//! directory.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use tungstenite::Message;
use worldmodel_core::server::{ServerModels, Session, TranscriptEntry};
use worldmodel_core::Real;

pub struct Options {
    pub addr: String,
    pub static_dir: Option<PathBuf>,
    pub record: Option<PathBuf>,
}

const PEEK_LIMIT: usize = 8192;

enum Kind {
    Ndjson,
    WebSocket,
    Http,
    Unknown,
}

/// Looks at the start of the stream without consuming it.
fn sniff(stream: &TcpStream) -> std::io::Result<Kind> {
    let mut buf = vec![0u8; PEEK_LIMIT];
    loop {
        let n = stream.peek(&mut buf)?;
        if n == 0 {
            return Ok(Kind::Unknown);
        }
        let head = &buf[..n];
        match head.iter().find(|b| !b.is_ascii_whitespace()) {
            Some(b'{') => return Ok(Kind::Ndjson),
            Some(_) if !head.starts_with(b"GET ") && n >= 4 => return Ok(Kind::Unknown),
            _ => {}
        }
        if let Some(end) = head.windows(4).position(|w| w == b"\r\n\r\n") {
            let text = String::from_utf8_lossy(&head[..end]).to_ascii_lowercase();
            let upgrade = text.lines().any(|l| l.starts_with("upgrade:") && l.contains("websocket"));
            return Ok(if upgrade { Kind::WebSocket } else { Kind::Http });
        }
        if n == PEEK_LIMIT {
            return Ok(Kind::Unknown);
        }
        std::thread::sleep(Duration::from_millis(2));
    }
}

struct Recorder {
    session: u64,
    file: Option<fs::File>,
}

impl Recorder {
    fn open(dir: Option<&Path>, id: usize) -> Result<Self> {
        let file = match dir {
            Some(d) => {
                fs::create_dir_all(d)?;
                Some(fs::File::create(d.join(format!("session_{id:04}.jsonl")))?)
            }
            None => None,
        };
        Ok(Self { session: id as u64, file })
    }

    fn note(&mut self, at: Duration, request: &str, response: &str) -> Result<()> {
        if let Some(f) = &mut self.file {
            let e = TranscriptEntry {
                at_ms: at.as_millis() as u64,
                request: request.to_string(),
                response: response.to_string(),
            };
            writeln!(f, "{}", serde_json::to_string(&e)?)?;
        }
        Ok(())
    }
}

/// Handles one request. Times are whole milliseconds so a recording replays
/// exactly.
fn exchange<T: Real>(session: &mut Session<T>, rec: &mut Recorder, opened: Instant, line: &str) -> Result<String> {
    let at = Duration::from_millis(opened.elapsed().as_millis() as u64);
    let response = session.handle(line, at);
    rec.note(at, line, &response)?;
    Ok(response)
}

fn ndjson<T: Real>(models: &ServerModels<T>, stream: TcpStream, mut rec: Recorder) -> Result<()> {
    let mut session = Session::new(models, rec.session);
    let opened = Instant::now();
    let mut out = stream.try_clone()?;
    for line in BufReader::new(stream).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = exchange(&mut session, &mut rec, opened, &line)?;
        out.write_all(response.as_bytes())?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn websocket<T: Real>(models: &ServerModels<T>, stream: TcpStream, mut rec: Recorder) -> Result<()> {
    let mut ws = tungstenite::accept(stream).map_err(|e| anyhow::anyhow!("websocket handshake: {e}"))?;
    let mut session = Session::new(models, rec.session);
    let opened = Instant::now();
    loop {
        let msg = match ws.read() {
            Ok(m) => m,
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        match msg {
            Message::Text(text) => {
                let response = exchange(&mut session, &mut rec, opened, text.as_str())?;
                ws.send(Message::text(response))?;
            }
            Message::Close(_) => return Ok(()),
            _ => {}
        }
    }
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("html") => "text/html; charset=utf-8",
        Some("js" | "mjs") => "text/javascript",
        Some("css") => "text/css",
        Some("json") => "application/json",
        Some("png") => "image/png",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

/// Maps a request path into `root`, refusing anything that escapes it.
pub fn resolve(root: &Path, url_path: &str) -> Option<PathBuf> {
    let path = url_path.split(['?', '#']).next().unwrap_or("/");
    let mut out = root.to_path_buf();
    for c in Path::new(path.trim_start_matches('/')).components() {
        match c {
            Component::Normal(p) => out.push(p),
            Component::CurDir => {}
            _ => return None,
        }
    }
    if out.is_dir() {
        out.push("index.html");
    }
    Some(out)
}

fn http(stream: TcpStream, static_dir: Option<&Path>) -> Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut request_line = String::new();
    reader.read_line(&mut request_line)?;
    let mut header = String::new();
    while reader.read_line(&mut header)? > 2 {
        header.clear();
    }
    let target = request_line.split_whitespace().nth(1).unwrap_or("/");
    let file = static_dir.and_then(|d| resolve(d, target)).filter(|p| p.is_file());
    let mut out = stream;
    match file {
        Some(p) => {
            let body = fs::read(&p)?;
            write!(
                out,
                "HTTP/1.1 200 OK\r\nContent-Type: {}\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                content_type(&p),
                body.len()
            )?;
            out.write_all(&body)?;
        }
        None => {
            let body = b"not found\n";
            write!(
                out,
                "HTTP/1.1 404 Not Found\r\nContent-Type: text/plain\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
                body.len()
            )?;
            out.write_all(body)?;
        }
    }
    Ok(())
}

fn connection<T: Real>(models: &ServerModels<T>, stream: TcpStream, opts: &Options, id: usize) -> Result<()> {
    match sniff(&stream)? {
        Kind::Ndjson => ndjson(models, stream, Recorder::open(opts.record.as_deref(), id)?),
        Kind::WebSocket => websocket(models, stream, Recorder::open(opts.record.as_deref(), id)?),
        Kind::Http => http(stream, opts.static_dir.as_deref()),
        Kind::Unknown => Ok(()),
    }
}

pub fn run<T: Real>(models: ServerModels<T>, opts: &Options) -> Result<()> {
    let listener = TcpListener::bind(&opts.addr).with_context(|| format!("binding {}", opts.addr))?;
    eprintln!("serving dreams on {}", listener.local_addr()?);
    let next = AtomicUsize::new(0);
    let models = &models;
    std::thread::scope(|scope| {
        for stream in listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    continue;
                }
            };
            let id = next.fetch_add(1, Ordering::Relaxed);
            scope.spawn(move || {
                if let Err(e) = connection(models, stream, opts, id) {
                    log::warn!("connection {id}: {e:#}");
                }
            });
        }
    });
    Ok(())
}
