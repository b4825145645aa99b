//! Plain-text checkpoints.
//!
//! ```text
//! MUTEXMATCH-CKPT-1
//! spec {"input_dim":16,...}
//! standardizer {"mean":[...],"std":[...]}
//! step 5000
//! param extractor.fc0.weight 16x64
//! 0.0123 -0.456 ...
//! ...
//! end
//! ```
//!
//! Values are printed in shortest round-trip form, so a save/load cycle is
//! lossless. Parse errors report the byte offset of the offending line.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::Standardizer;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelSpec};

pub const MAGIC: &str = "MUTEXMATCH-CKPT-1";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub standardizer: Standardizer,
    /// Optimizer steps completed when the checkpoint was taken.
    pub step: usize,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        let spec = serde_json::to_string(self.model.spec()).expect("spec serializes");
        let std = serde_json::to_string(&self.standardizer).expect("standardizer serializes");
        let _ = writeln!(out, "spec {spec}");
        let _ = writeln!(out, "standardizer {std}");
        let _ = writeln!(out, "step {}", self.step);
        for (name, t) in self.model.named() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let _ = writeln!(out, "param {name} {}", shape.join("x"));
            let values: Vec<String> = t.data().iter().map(f64::to_string).collect();
            out.push_str(&values.join(" "));
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn parse(text: &str) -> Result<Checkpoint> {
        let mut lines = Lines::new(text);
        let (off, magic) = lines.next_line()?;
        if magic != MAGIC {
            return Err(fmt_err(off, format!("bad header {magic:?}, expected {MAGIC}")));
        }
        let (off, spec) = lines.keyed("spec")?;
        let spec: ModelSpec = serde_json::from_str(spec).map_err(|e| fmt_err(off, format!("spec: {e}")))?;
        let (off, std) = lines.keyed("standardizer")?;
        let standardizer: Standardizer =
            serde_json::from_str(std).map_err(|e| fmt_err(off, format!("standardizer: {e}")))?;
        if standardizer.mean.len() != spec.input_dim || standardizer.std.len() != spec.input_dim {
            return Err(fmt_err(off, "standardizer width does not match the model input".into()));
        }
        let (off, step) = lines.keyed("step")?;
        let step = step.parse().map_err(|_| fmt_err(off, format!("bad step {step:?}")))?;
        let mut named = Vec::new();
        loop {
            let (off, line) = lines.next_line()?;
            if line == "end" {
                break;
            }
            let rest = line
                .strip_prefix("param ")
                .ok_or_else(|| fmt_err(off, format!("expected 'param' or 'end', got {:?}", truncate(line))))?;
            let (name, shape) = rest
                .split_once(' ')
                .ok_or_else(|| fmt_err(off, "param line needs a name and a shape".into()))?;
            let shape: Vec<usize> = shape
                .split('x')
                .map(|d| d.parse().map_err(|_| fmt_err(off, format!("bad shape {shape:?}"))))
                .collect::<Result<_>>()?;
            let (voff, values) = lines.next_line()?;
            let data: Vec<f64> = values
                .split_ascii_whitespace()
                .map(|v| v.parse().map_err(|_| fmt_err(voff, format!("bad value {:?} in {name}", truncate(v)))))
                .collect::<Result<_>>()?;
            let t = Tensor::new(shape, data).map_err(|e| fmt_err(voff, format!("{name}: {e}")))?;
            if !t.all_finite() {
                return Err(fmt_err(voff, format!("{name} holds non-finite values")));
            }
            named.push((name.to_string(), t));
        }
        let model = ModelParams::from_named(&spec, named).map_err(|e| fmt_err(off, e.to_string()))?;
        Ok(Checkpoint {
            model,
            standardizer,
            step,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let text = std::str::from_utf8(&text).map_err(|e| fmt_err(e.valid_up_to(), "checkpoint is not UTF-8".into()))?;
        Checkpoint::parse(text)
    }
}

fn fmt_err(offset: usize, msg: String) -> Error {
    Error::Format { offset, msg }
}

fn truncate(s: &str) -> &str {
    match s.char_indices().nth(40) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

struct Lines<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str) -> Self {
        Lines { text, pos: 0 }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        if self.pos >= self.text.len() {
            return Err(fmt_err(self.pos, "unexpected end of checkpoint".into()));
        }
        let start = self.pos;
        let rest = &self.text[start..];
        let (line, advance) = match rest.find('\n') {
            Some(i) => (&rest[..i], i + 1),
            None => (rest, rest.len()),
        };
        self.pos += advance;
        Ok((start, line.strip_suffix('\r').unwrap_or(line)))
    }

    fn keyed(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (off, line) = self.next_line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .map(|v| (off, v))
            .ok_or_else(|| fmt_err(off, format!("expected '{key}' line")))
    }
}
