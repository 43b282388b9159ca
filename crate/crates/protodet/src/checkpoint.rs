//! Plain-text model checkpoints.
//!
//! ```text
//! # protodet checkpoint v1
//! tensor net.gcn1 32 32
//! 0.125 -0.5 ...
//! ```
//!
//! Values use the shortest round-trip decimal form, one tensor row per line.

use std::fmt::Write as _;

use protodet_core::pipeline::Model;
use protodet_core::tensor::Tensor;

pub const MAGIC: &str = "# protodet checkpoint v1";

pub fn render(model: &Model) -> String {
    let mut out = format!("{MAGIC}\n");
    for (name, t) in model.tensors() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = writeln!(out, "tensor {name} {}", dims.join(" "));
        let width = t.shape().last().copied().unwrap_or(1).max(1);
        for row in t.data().chunks(width) {
            let vals: Vec<String> = row.iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{}", vals.join(" "));
        }
    }
    out
}

/// Overwrites every parameter of `model` from `text`. All parameters must
/// be present with matching shapes.
pub fn load_into(model: &mut Model, text: &str) -> Result<(), String> {
    let mut lines = text.lines().enumerate().peekable();
    match lines.next() {
        Some((_, l)) if l.trim() == MAGIC => {}
        _ => return Err(format!("line 1: expected `{MAGIC}`")),
    }
    let mut seen = Vec::new();
    while let Some((i, line)) = lines.next() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(format!("line {}: expected a tensor header", i + 1));
        }
        let name = parts
            .next()
            .ok_or_else(|| format!("line {}: missing tensor name", i + 1))?
            .to_string();
        let shape = parts
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| format!("line {}: bad dimension `{d}`", i + 1))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        while data.len() < len {
            let (j, l) = lines
                .next()
                .ok_or_else(|| format!("{name}: expected {len} values, found {}", data.len()))?;
            for v in l.split_whitespace() {
                data.push(
                    v.parse::<f64>()
                        .map_err(|_| format!("line {}: bad value `{v}`", j + 1))?,
                );
            }
        }
        if data.len() != len {
            return Err(format!("{name}: expected {len} values, found {}", data.len()));
        }
        let t = Tensor::new(shape, data).map_err(|e| format!("{name}: {e}"))?;
        model.set(&name, t).map_err(|e| format!("{name}: {e}"))?;
        seen.push(name);
    }
    for (name, _) in model.tensors() {
        if !seen.contains(&name) {
            return Err(format!("missing tensor {name}"));
        }
    }
    Ok(())
}
