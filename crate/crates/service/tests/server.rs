mod common;

use std::io::{Read, Write};
use std::net::TcpStream;
use std::time::{Duration, Instant};

use common::LineClient;
use tptn_service::protocol::{ClientMessage, ServerMessage};
use tptn_service::server::static_path;

fn hello() -> ClientMessage {
    ClientMessage::Hello {
        checkpoint_id: common::ID.into(),
    }
}

#[test]
fn raw_socket_session() {
    let srv = common::serve(false, 30.0, None);
    let mut c = LineClient::connect(srv.addr);
    c.send(&ClientMessage::Hello {
        checkpoint_id: "other".into(),
    });
    assert!(matches!(c.reply(), ServerMessage::Error { code, .. } if code == "unknown_checkpoint"));
    c.send(&hello());
    let ServerMessage::Ready {
        skeleton,
        type_names,
        trl,
        ..
    } = c.reply()
    else {
        panic!()
    };
    assert_eq!(skeleton.joint_names.len(), 23);
    assert_eq!(type_names, ["idle", "walk"]);
    assert_eq!(trl, 9);
    c.send(&common::start(5));
    assert!(matches!(c.reply(), ServerMessage::Ack { .. }));
    let (first, _) = c.frames(30);
    c.send_raw("not json");
    let mut all = first;
    let mut errors = 0;
    while all.len() < 130 {
        match c.recv().unwrap() {
            ServerMessage::Frames { batch } => all.extend(batch),
            ServerMessage::Error { code, .. } if code == "bad_request" => errors += 1,
            ServerMessage::Metrics { .. } => {}
            m => panic!("{m:?}"),
        }
    }
    assert_eq!(errors, 1);
    common::assert_gapless(&all);
    c.send(&ClientMessage::Stop);
    assert!(matches!(c.reply(), ServerMessage::Ack { request, .. } if request == "stop"));
    assert_eq!(all[..30], common::serial_frames(5, 30)[..]);
}

#[test]
fn web_socket_session() {
    let srv = common::serve(false, 30.0, None);
    let (mut ws, _) = tungstenite::connect(format!("ws://{}/session", srv.addr)).unwrap();
    let send = |ws: &mut tungstenite::WebSocket<_>, m: &ClientMessage| {
        ws.send(tungstenite::Message::text(
            serde_json::to_string(m).unwrap(),
        ))
        .unwrap()
    };
    send(&mut ws, &hello());
    let read = |ws: &mut tungstenite::WebSocket<tungstenite::stream::MaybeTlsStream<TcpStream>>| loop {
        if let tungstenite::Message::Text(t) = ws.read().unwrap() {
            return serde_json::from_str::<ServerMessage>(&t).unwrap();
        }
    };
    assert!(matches!(read(&mut ws), ServerMessage::Ready { .. }));
    send(&mut ws, &common::start(5));
    assert!(matches!(read(&mut ws), ServerMessage::Ack { .. }));
    let mut frames = Vec::new();
    while frames.len() < 30 {
        if let ServerMessage::Frames { batch } = read(&mut ws) {
            frames.extend(batch);
        }
    }
    // Same protocol, same frames as over a raw socket.
    assert_eq!(frames[..30], common::serial_frames(5, 30)[..]);
    ws.close(None).unwrap();
}

fn http_get(addr: std::net::SocketAddr, path: &str) -> (String, Vec<u8>) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: x\r\n\r\n").unwrap();
    let mut buf = Vec::new();
    s.read_to_end(&mut buf).unwrap();
    let split = buf.windows(4).position(|w| w == b"\r\n\r\n").unwrap();
    (
        String::from_utf8_lossy(&buf[..split]).into_owned(),
        buf[split + 4..].to_vec(),
    )
}

#[test]
fn static_assets_share_the_port() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<html>ui</html>").unwrap();
    std::fs::create_dir(dir.path().join("assets")).unwrap();
    std::fs::write(dir.path().join("assets/app.js"), "console.log(1)").unwrap();
    let srv = common::serve(false, 30.0, Some(dir.path().to_path_buf()));
    let (head, body) = http_get(srv.addr, "/");
    assert!(head.starts_with("HTTP/1.1 200"), "{head}");
    assert!(head.contains("text/html"));
    assert_eq!(body, b"<html>ui</html>");
    let (head, body) = http_get(srv.addr, "/assets/app.js?v=2");
    assert!(head.contains("text/javascript"));
    assert_eq!(body, b"console.log(1)");
    assert!(http_get(srv.addr, "/missing.css")
        .0
        .starts_with("HTTP/1.1 404"));
    assert!(http_get(srv.addr, "/../secret")
        .0
        .starts_with("HTTP/1.1 400"));
    // The same port still speaks the protocol.
    let mut c = LineClient::connect(srv.addr);
    c.send(&hello());
    assert!(matches!(c.reply(), ServerMessage::Ready { .. }));
}

#[test]
fn placeholder_page_without_assets() {
    let srv = common::serve(false, 30.0, None);
    let (head, body) = http_get(srv.addr, "/");
    assert!(head.starts_with("HTTP/1.1 200"));
    assert!(String::from_utf8(body).unwrap().contains("JSON-lines"));
}

#[test]
fn traversal_is_refused() {
    let root = std::path::Path::new("/srv/ui");
    assert_eq!(static_path(root, "/a/b.js"), Some(root.join("a/b.js")));
    assert_eq!(static_path(root, "/a/../../etc/passwd"), None);
    assert_eq!(static_path(root, "/./x.css#frag"), Some(root.join("x.css")));
}

#[test]
fn idle_connections_are_closed() {
    let srv = common::serve(true, 0.3, None);
    let mut c = LineClient::connect(srv.addr);
    c.send(&hello());
    assert!(matches!(c.reply(), ServerMessage::Ready { .. }));
    let t0 = Instant::now();
    assert!(matches!(c.recv(), Some(ServerMessage::Error { code, .. }) if code == "idle_timeout"));
    assert!(c.recv().is_none());
    assert!(t0.elapsed() >= Duration::from_millis(250));
}

#[test]
fn streaming_sessions_are_not_idle() {
    let srv = common::serve(true, 0.3, None);
    let mut c = LineClient::connect(srv.addr);
    c.send(&hello());
    c.reply();
    c.send(&common::start(0));
    c.reply();
    // Well past the idle timeout, frames keep coming.
    let t0 = Instant::now();
    let (f, _) = c.frames(60);
    assert!(t0.elapsed() >= Duration::from_millis(800));
    common::assert_gapless(&f);
}

#[test]
fn concurrent_sessions_match_serial_runs() {
    let srv = common::serve(false, 30.0, None);
    let addr = srv.addr;
    let n = 1000;
    let handles: Vec<_> = (0..4u64)
        .map(|seed| {
            std::thread::spawn(move || {
                let mut c = LineClient::connect(addr);
                c.send(&hello());
                c.reply();
                c.send(&common::start(seed));
                c.reply();
                let got = c.frames(n);
                c.send(&ClientMessage::Stop);
                got
            })
        })
        .collect();
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    for (seed, (frames, metrics)) in results.into_iter().enumerate() {
        common::assert_gapless(&frames);
        assert!(metrics >= n / 60 - 1);
        assert!(
            frames == common::serial_frames(seed as u64, n),
            "session {seed} diverged"
        );
    }
}
