#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::Arc;
use std::time::Duration;

use tptn_core::checkpoint::Checkpoint;
use tptn_core::data::Dataset;
use tptn_core::features::ContactThresholds;
use tptn_core::model::{ModelConfig, Tptn};
use tptn_core::synthesis::{SampleMode, Session, SessionConfig, Synthesizer, Warmup};
use tptn_core::synthetic::{generate_segments, GaitSpec};
use tptn_service::config::ServeConfig;
use tptn_service::protocol::{ClientMessage, ServerMessage, WireFrame};
use tptn_service::registry::{Precision, Registry};
use tptn_service::server::{Server, ServerHandle};

pub const ID: &str = "micro";

pub fn micro_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        n_heads: 2,
        layers_per_arm: 1,
        lm: 4,
        d_root: 3,
        ffn: 8,
        foot_hidden: 4,
        n_types: 2,
        ..ModelConfig::default()
    }
}

pub fn dataset() -> Dataset {
    let (clip, types) = generate_segments(
        &[(GaitSpec::idle(), 60, 0), (GaitSpec::walk(120.0), 120, 1)],
        2,
        60.0,
    );
    let seq = Dataset::convert(
        "walk".into(),
        "p",
        &clip,
        &types,
        &ContactThresholds::default(),
    )
    .unwrap();
    Dataset::from_sequences(vec!["idle".into(), "walk".into()], 60.0, vec![seq]).unwrap()
}

pub fn checkpoint(ds: &Dataset) -> Checkpoint<Precision> {
    let model = Tptn::new(micro_config(), 11).unwrap();
    Checkpoint::new(
        model,
        ds.stats.clone(),
        ds.type_names.clone(),
        ds.sequences[0].skeleton.clone(),
        ds.fps,
        0,
    )
}

pub fn registry() -> Arc<Registry> {
    let ds = dataset();
    let mut r = Registry::default();
    let warmups = ds.sequences.iter().map(|s| s.motion.clone()).collect();
    r.insert(ID, Synthesizer::from_checkpoint(checkpoint(&ds)), warmups)
        .unwrap();
    Arc::new(r)
}

pub fn serve(
    realtime: bool,
    idle_timeout_secs: f64,
    static_dir: Option<std::path::PathBuf>,
) -> ServerHandle {
    let cfg = ServeConfig {
        bind: "127.0.0.1:0".into(),
        realtime,
        idle_timeout_secs,
        static_dir,
        ..ServeConfig::default()
    };
    Server::bind(&cfg, registry(), 30).unwrap().spawn().unwrap()
}

pub fn start(seed: u64) -> ClientMessage {
    ClientMessage::Start {
        warmup_source: None,
        mode: SampleMode::Sample,
        ik: true,
        seed,
    }
}

/// The frames a session with `seed` produces without a server in between.
pub fn serial_frames(seed: u64, n: usize) -> Vec<WireFrame> {
    let reg = registry();
    let model = reg.get(ID).unwrap();
    let cfg = SessionConfig {
        mode: SampleMode::Sample,
        ik: true,
        seed,
        warmup: 30,
        ..SessionConfig::default()
    };
    let w = Warmup::from_sequence(model.warmup(None).unwrap(), 30, 2).unwrap();
    let mut s = Session::new(model.synth.clone(), cfg, &w).unwrap();
    let first = s.frames();
    (0..n)
        .map(|_| {
            let f = s.step(None).unwrap();
            WireFrame::new(
                f.index,
                (f.index - first) as f64 / 60.0,
                &f.pose,
                f.contacts,
            )
        })
        .collect()
}

/// Raw JSON-lines client.
pub struct LineClient {
    w: TcpStream,
    r: BufReader<TcpStream>,
}

impl LineClient {
    pub fn connect(addr: SocketAddr) -> Self {
        let w = TcpStream::connect(addr).unwrap();
        w.set_read_timeout(Some(Duration::from_secs(20))).unwrap();
        let r = BufReader::new(w.try_clone().unwrap());
        Self { w, r }
    }

    pub fn send(&mut self, m: &ClientMessage) {
        self.send_raw(&serde_json::to_string(m).unwrap());
    }

    pub fn send_raw(&mut self, line: &str) {
        self.w.write_all(line.as_bytes()).unwrap();
        self.w.write_all(b"\n").unwrap();
    }

    /// Next record, or `None` once the server closes.
    pub fn recv(&mut self) -> Option<ServerMessage> {
        let mut line = String::new();
        match self.r.read_line(&mut line) {
            Ok(0) => None,
            Ok(_) => {
                assert!(line.ends_with('\n'));
                Some(serde_json::from_str(&line).unwrap())
            }
            Err(e) if matches!(e.kind(), std::io::ErrorKind::ConnectionReset) => None,
            Err(e) => panic!("read failed: {e}"),
        }
    }

    /// Skip frames and metrics until a record that is neither.
    pub fn reply(&mut self) -> ServerMessage {
        loop {
            match self.recv().expect("connection closed") {
                ServerMessage::Frames { .. } | ServerMessage::Metrics { .. } => {}
                m => return m,
            }
        }
    }

    /// Collect `n` frames, checking batching and ordering on the way.
    pub fn frames(&mut self, n: usize) -> (Vec<WireFrame>, usize) {
        let mut out: Vec<WireFrame> = Vec::with_capacity(n);
        let mut metrics = 0;
        while out.len() < n {
            match self.recv().expect("connection closed") {
                ServerMessage::Frames { batch } => {
                    assert!(!batch.is_empty() && batch.len() <= 10);
                    out.extend(batch);
                }
                ServerMessage::Metrics { fps, .. } => {
                    assert!(fps > 0.0);
                    metrics += 1;
                }
                m => panic!("unexpected {m:?}"),
            }
        }
        out.truncate(n);
        (out, metrics)
    }
}

pub fn assert_gapless(frames: &[WireFrame]) {
    for w in frames.windows(2) {
        assert_eq!(w[1].index, w[0].index + 1);
        assert!(w[1].t > w[0].t);
    }
}
