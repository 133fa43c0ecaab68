//! BVH reading and writing, plus clip-level resampling and mirroring.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rot::{EulerOrder, Quat, Vec3};
use crate::skeleton::Skeleton;

/// Local joint rotations plus the root's world position for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub root_position: Vec3,
    pub rotations: Vec<Quat>,
}

impl Pose {
    pub fn identity(joints: usize, root_position: Vec3) -> Self {
        Self {
            root_position,
            rotations: vec![Quat::identity(); joints],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawClip {
    pub skeleton: Skeleton,
    /// Rotation channel order per joint, kept so that writing reproduces the
    /// source layout.
    pub orders: Vec<EulerOrder>,
    pub frames: Vec<Pose>,
    pub frame_time: f64,
}

impl RawClip {
    pub fn new(skeleton: Skeleton, frames: Vec<Pose>, frame_time: f64) -> Self {
        let orders = vec![EulerOrder::Zyx; skeleton.len()];
        Self {
            skeleton,
            orders,
            frames,
            frame_time,
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f64 {
        1.0 / self.frame_time
    }

    /// World joint positions of frame `n`.
    pub fn positions(&self, n: usize) -> Vec<Vec3> {
        let f = &self.frames[n];
        self.skeleton.fk_unchecked(&f.rotations, &f.root_position).0
    }

    /// Keep every k-th frame so that the result plays at `target_fps`.
    pub fn resample(&self, target_fps: f64) -> Result<RawClip> {
        let ratio = self.fps() / target_fps;
        let k = ratio.round();
        if !(target_fps > 0.0) || k < 1.0 || (ratio - k).abs() > 1e-3 {
            return Err(CoreError::Resample {
                from: self.fps(),
                to: target_fps,
            });
        }
        let k = k as usize;
        Ok(RawClip {
            skeleton: self.skeleton.clone(),
            orders: self.orders.clone(),
            frames: self.frames.iter().step_by(k).cloned().collect(),
            frame_time: self.frame_time * k as f64,
        })
    }

    /// Reflect across the X = 0 plane, swapping left and right joints.
    pub fn mirror(&self) -> Result<RawClip> {
        let perm = self.skeleton.mirror_permutation()?;
        let reflect_v = |v: &Vec3| Vec3::new(-v.x, v.y, v.z);
        let reflect_q = |q: &Quat| {
            let c = q.quaternion();
            Quat::new_unchecked(nalgebra::Quaternion::new(c.w, c.i, -c.j, -c.k))
        };
        let mut skeleton = self.skeleton.clone();
        for j in 0..skeleton.len() {
            skeleton.offsets[j] = reflect_v(&self.skeleton.offsets[perm[j]]);
            skeleton.end_sites[j] = self.skeleton.end_sites[perm[j]].as_ref().map(reflect_v);
        }
        let frames = self
            .frames
            .iter()
            .map(|f| Pose {
                root_position: reflect_v(&f.root_position),
                rotations: (0..perm.len())
                    .map(|j| reflect_q(&f.rotations[perm[j]]))
                    .collect(),
            })
            .collect();
        Ok(RawClip {
            skeleton,
            orders: perm.iter().map(|&p| self.orders[p]).collect(),
            frames,
            frame_time: self.frame_time,
        })
    }

    pub fn to_bvh(&self) -> String {
        write_bvh(self)
    }
}

struct Lexer<'a> {
    src: &'a str,
    pos: usize,
    line: usize,
    col: usize,
}

#[derive(Debug, Clone, Copy)]
struct Token<'a> {
    text: &'a str,
    line: usize,
    col: usize,
}

impl<'a> Lexer<'a> {
    fn new(src: &'a str) -> Self {
        Self {
            src,
            pos: 0,
            line: 1,
            col: 1,
        }
    }

    fn next(&mut self) -> Option<Token<'a>> {
        let bytes = self.src.as_bytes();
        while self.pos < bytes.len() && bytes[self.pos].is_ascii_whitespace() {
            if bytes[self.pos] == b'\n' {
                self.line += 1;
                self.col = 1;
            } else {
                self.col += 1;
            }
            self.pos += 1;
        }
        if self.pos >= bytes.len() {
            return None;
        }
        let start = self.pos;
        let (line, col) = (self.line, self.col);
        while self.pos < bytes.len() && !bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
            self.col += 1;
        }
        Some(Token {
            text: &self.src[start..self.pos],
            line,
            col,
        })
    }

    fn err(&self, tok: Option<Token<'_>>, msg: impl Into<String>) -> CoreError {
        let (line, col) = tok.map_or((self.line, self.col), |t| (t.line, t.col));
        CoreError::BvhSyntax {
            line,
            col,
            msg: msg.into(),
        }
    }

    fn expect(&mut self, word: &str) -> Result<Token<'a>> {
        match self.next() {
            Some(t) if t.text == word => Ok(t),
            Some(t) => Err(self.err(Some(t), format!("expected '{word}', found '{}'", t.text))),
            None => Err(self.err(None, format!("expected '{word}', found end of input"))),
        }
    }

    fn word(&mut self, what: &str) -> Result<Token<'a>> {
        self.next()
            .ok_or_else(|| self.err(None, format!("expected {what}, found end of input")))
    }

    fn number(&mut self) -> Result<f64> {
        let t = self.word("a number")?;
        t.text
            .parse()
            .map_err(|_| self.err(Some(t), format!("expected a number, found '{}'", t.text)))
    }

    fn vec3(&mut self) -> Result<Vec3> {
        Ok(Vec3::new(self.number()?, self.number()?, self.number()?))
    }
}

struct Builder {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
    offsets: Vec<Vec3>,
    end_sites: Vec<Option<Vec3>>,
    orders: Vec<EulerOrder>,
}

fn parse_joint(lx: &mut Lexer<'_>, b: &mut Builder, parent: Option<usize>) -> Result<()> {
    let name_tok = lx.word("a joint name")?;
    let name = name_tok.text.to_string();
    lx.expect("{")?;
    lx.expect("OFFSET")?;
    let offset = lx.vec3()?;
    let ch_tok = lx.expect("CHANNELS")?;
    let count = lx.number()?;
    if count.fract() != 0.0 || !(0.0..=6.0).contains(&count) {
        return Err(lx.err(Some(ch_tok), "bad channel count"));
    }
    let mut channels = Vec::new();
    for _ in 0..count as usize {
        channels.push(lx.word("a channel name")?.text);
    }
    let rot = if parent.is_none() {
        if channels.len() != 6 || channels[..3] != ["Xposition", "Yposition", "Zposition"] {
            None
        } else {
            EulerOrder::from_channels(&channels[3..])
        }
    } else if channels.len() == 3 {
        EulerOrder::from_channels(&channels)
    } else {
        None
    };
    let Some(order) = rot else {
        return Err(CoreError::UnsupportedChannels {
            joint: name,
            channels: channels.iter().map(|s| s.to_string()).collect(),
        });
    };
    let me = b.names.len();
    b.names.push(name);
    b.parents.push(parent);
    b.offsets.push(offset);
    b.end_sites.push(None);
    b.orders.push(order);
    loop {
        let t = lx.word("'JOINT', 'End' or '}'")?;
        match t.text {
            "JOINT" => parse_joint(lx, b, Some(me))?,
            "End" => {
                lx.expect("Site")?;
                lx.expect("{")?;
                lx.expect("OFFSET")?;
                b.end_sites[me] = Some(lx.vec3()?);
                lx.expect("}")?;
            }
            "}" => return Ok(()),
            other => return Err(lx.err(Some(t), format!("unexpected '{other}' in joint block"))),
        }
    }
}

pub fn parse_bvh(text: &str) -> Result<RawClip> {
    let mut lx = Lexer::new(text);
    lx.expect("HIERARCHY")?;
    lx.expect("ROOT")?;
    let mut b = Builder {
        names: Vec::new(),
        parents: Vec::new(),
        offsets: Vec::new(),
        end_sites: Vec::new(),
        orders: Vec::new(),
    };
    parse_joint(&mut lx, &mut b, None)?;
    lx.expect("MOTION")?;
    lx.expect("Frames:")?;
    let declared_tok = lx.word("a frame count")?;
    let declared: usize = declared_tok.text.parse().map_err(|_| {
        lx.err(
            Some(declared_tok),
            "frame count must be a non-negative integer",
        )
    })?;
    lx.expect("Frame")?;
    lx.expect("Time:")?;
    let ft_tok = lx.word("a frame time")?;
    let frame_time: f64 = ft_tok
        .text
        .parse()
        .ok()
        .filter(|v: &f64| *v > 0.0 && v.is_finite())
        .ok_or_else(|| lx.err(Some(ft_tok), "frame time must be a positive number"))?;

    let n = b.names.len();
    let per_frame = 3 + 3 * n;
    let mut values = Vec::with_capacity(declared * per_frame);
    while let Some(t) = lx.next() {
        let v: f64 = t.text.parse().map_err(|_| {
            lx.err(
                Some(t),
                format!("expected a channel value, found '{}'", t.text),
            )
        })?;
        values.push(v);
    }
    if values.len() % per_frame != 0 {
        return Err(lx.err(
            None,
            format!(
                "{} channel values do not form whole frames of {per_frame}",
                values.len()
            ),
        ));
    }
    let found = values.len() / per_frame;
    if found != declared {
        return Err(CoreError::FrameCount { declared, found });
    }
    let skeleton = Skeleton::new(b.names, b.parents, b.offsets, b.end_sites)?;
    let frames = values
        .chunks_exact(per_frame)
        .map(|row| Pose {
            root_position: Vec3::new(row[0], row[1], row[2]),
            rotations: (0..n)
                .map(|j| {
                    let c = &row[3 + 3 * j..6 + 3 * j];
                    b.orders[j].to_quat([c[0], c[1], c[2]])
                })
                .collect(),
        })
        .collect();
    Ok(RawClip {
        skeleton,
        orders: b.orders,
        frames,
        frame_time,
    })
}

fn fmt_num(v: f64) -> String {
    // adding 0.0 turns -0.0 into 0.0
    format!("{:.9}", v + 0.0)
}

fn write_joint(out: &mut String, clip: &RawClip, j: usize, depth: usize) {
    let s = &clip.skeleton;
    let pad = "\t".repeat(depth);
    let o = s.offsets[j];
    let kind = if s.parents[j].is_none() {
        "ROOT"
    } else {
        "JOINT"
    };
    let _ = writeln!(out, "{pad}{kind} {}", s.joint_names[j]);
    let _ = writeln!(out, "{pad}{{");
    let _ = writeln!(
        out,
        "{pad}\tOFFSET {} {} {}",
        fmt_num(o.x),
        fmt_num(o.y),
        fmt_num(o.z)
    );
    let rot = clip.orders[j].channel_names().join(" ");
    if s.parents[j].is_none() {
        let _ = writeln!(out, "{pad}\tCHANNELS 6 Xposition Yposition Zposition {rot}");
    } else {
        let _ = writeln!(out, "{pad}\tCHANNELS 3 {rot}");
    }
    for c in s.children(j) {
        write_joint(out, clip, c, depth + 1);
    }
    if let Some(e) = s.end_sites[j] {
        let _ = writeln!(out, "{pad}\tEnd Site");
        let _ = writeln!(out, "{pad}\t{{");
        let _ = writeln!(
            out,
            "{pad}\t\tOFFSET {} {} {}",
            fmt_num(e.x),
            fmt_num(e.y),
            fmt_num(e.z)
        );
        let _ = writeln!(out, "{pad}\t}}");
    }
    let _ = writeln!(out, "{pad}}}");
}

pub fn write_bvh(clip: &RawClip) -> String {
    let mut out = String::from("HIERARCHY\n");
    write_joint(&mut out, clip, 0, 0);
    let _ = writeln!(out, "MOTION");
    let _ = writeln!(out, "Frames: {}", clip.frames.len());
    let _ = writeln!(out, "Frame Time: {:.7}", clip.frame_time);
    let mut row = Vec::with_capacity(3 + 3 * clip.skeleton.len());
    for f in &clip.frames {
        row.clear();
        row.extend([f.root_position.x, f.root_position.y, f.root_position.z].map(fmt_num));
        for (q, order) in f.rotations.iter().zip(&clip.orders) {
            row.extend(order.from_quat(q).map(fmt_num));
        }
        let _ = writeln!(out, "{}", row.join(" "));
    }
    out
}
