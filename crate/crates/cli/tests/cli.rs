use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Child, Command, Stdio};

const TINY: &str = "preset = mini
seed = 2
collect.episodes = 4
vae.nz = 4
vae.channels = 4,4,8,8
vae.batch_size = 16
rnn.hidden = 8
rnn.mixtures = 2
rnn.epochs = 1
rnn.seq_len = 50
controller.lambda = 4
controller.generations = 1
controller.rollouts = 1
controller.eval_every = 0
controller.max_steps = 30
evaluate.episodes = 2
";

fn worldmodel(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_worldmodel"))
        .arg("--config")
        .arg(dir.join("run.conf"))
        .arg("--run-dir")
        .arg(dir.join("run"))
        .args(args)
        .output()
        .unwrap()
}

fn setup() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("run.conf"), TINY).unwrap();
    for stage in ["collect", "train-vae", "encode", "train-rnn", "train-controller"] {
        let out = worldmodel(d.path(), &[stage]);
        assert!(out.status.success(), "{stage}: {}", String::from_utf8_lossy(&out.stderr));
    }
    d
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn stages_evaluate_and_serve() {
    let d = setup();
    let out = worldmodel(d.path(), &["evaluate", "--mode", "dream", "--episodes", "3"]);
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["episodes"], 3);

    let www = d.path().join("www");
    std::fs::create_dir(&www).unwrap();
    std::fs::write(www.join("index.html"), "<p>dream</p>").unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_worldmodel"))
        .arg("--config")
        .arg(d.path().join("run.conf"))
        .arg("--run-dir")
        .arg(d.path().join("run"))
        .args(["serve", "--port", "0", "--static"])
        .arg(&www)
        .arg("--record")
        .arg(d.path().join("rec"))
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let _server = Server(child);
    let addr = line.trim().rsplit(' ').next().unwrap().to_string();

    // NDJSON
    let mut s = TcpStream::connect(&addr).unwrap();
    s.write_all(b"{\"cmd\":\"reset\",\"seed\":3}\n{\"cmd\":\"step\"}\n{\"cmd\":\"bogus\"}\n").unwrap();
    let mut r = BufReader::new(s.try_clone().unwrap());
    let mut replies = Vec::new();
    for _ in 0..3 {
        let mut l = String::new();
        r.read_line(&mut l).unwrap();
        replies.push(serde_json::from_str::<serde_json::Value>(&l).unwrap());
    }
    assert_eq!(replies[0]["t"], 0);
    assert_eq!(replies[1]["t"], 1);
    assert!(replies[2]["error"].is_string());
    drop(r);
    drop(s);

    // WebSocket on the same port
    let (mut ws, _) = tungstenite::client::connect(format!("ws://{addr}/")).unwrap();
    ws.send(tungstenite::Message::text(r#"{"cmd":"reset","seed":3}"#)).unwrap();
    let reply: serde_json::Value = serde_json::from_str(ws.read().unwrap().to_text().unwrap()).unwrap();
    assert_eq!(reply["frame"], replies[0]["frame"]);
    ws.close(None).unwrap();

    // static HTTP
    let mut h = TcpStream::connect(&addr).unwrap();
    h.write_all(b"GET / HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
    let mut body = String::new();
    h.read_to_string(&mut body).unwrap();
    assert!(body.starts_with("HTTP/1.1 200"), "{body}");
    assert!(body.ends_with("<p>dream</p>"));

    // the NDJSON session was recorded and replays exactly
    std::thread::sleep(std::time::Duration::from_millis(200));
    let rec = d.path().join("rec").join("session_0000.jsonl");
    let out = worldmodel(d.path(), &["replay", rec.to_str().unwrap(), "--session", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("3 exchanges, 0 mismatches"));
}

#[test]
fn errors_name_the_stage() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(d.path().join("run.conf"), TINY).unwrap();
    let out = worldmodel(d.path(), &["train-rnn"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage train-rnn failed"), "{err}");
    let out = worldmodel(d.path(), &["--set", "vae.nz=lots", "collect"]);
    assert!(!out.status.success());
}
