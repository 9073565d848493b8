use std::ops::Range;

use rand::Rng;

use super::params::{init_layer_norm, init_linear, Bound, ParamStore};
use super::tape::{Tape, Var};

pub fn linear(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let w = p.get(&format!("{prefix}weight"));
    let b = p.get(&format!("{prefix}bias"));
    let y = tape.matmul(x, w);
    tape.add_row(y, b)
}

pub fn layer_norm(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let g = p.get(&format!("{prefix}weight"));
    let b = p.get(&format!("{prefix}bias"));
    tape.layer_norm(x, g, b)
}

/// Shape of a stack of pre-norm transformer blocks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackShape {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
}

/// Adds the parameters of `depth` blocks plus the trailing norm under `prefix`.
pub fn init_stack<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, shape: StackShape, rng: &mut R) {
    let d = shape.dim;
    for i in 0..shape.depth {
        let b = format!("{prefix}blocks.{i}.");
        init_layer_norm(store, &format!("{b}norm1."), d);
        for proj in ["q", "k", "v", "proj"] {
            init_linear(store, &format!("{b}attn.{proj}."), d, d, rng);
        }
        init_layer_norm(store, &format!("{b}norm2."), d);
        init_linear(store, &format!("{b}mlp.fc1."), d, shape.mlp_hidden, rng);
        init_linear(store, &format!("{b}mlp.fc2."), shape.mlp_hidden, d, rng);
    }
    if shape.depth > 0 {
        init_layer_norm(store, &format!("{prefix}norm."), d);
    }
}

fn block(tape: &mut Tape, p: &Bound, prefix: &str, heads: usize, x: Var, segments: &[Range<usize>]) -> Var {
    let h = layer_norm(tape, p, &format!("{prefix}norm1."), x);
    let q = linear(tape, p, &format!("{prefix}attn.q."), h);
    let k = linear(tape, p, &format!("{prefix}attn.k."), h);
    let v = linear(tape, p, &format!("{prefix}attn.v."), h);
    let a = tape.attention(q, k, v, heads, segments);
    let a = linear(tape, p, &format!("{prefix}attn.proj."), a);
    let x = tape.add(x, a);
    let h = layer_norm(tape, p, &format!("{prefix}norm2."), x);
    let h = linear(tape, p, &format!("{prefix}mlp.fc1."), h);
    let h = tape.gelu(h);
    let h = linear(tape, p, &format!("{prefix}mlp.fc2."), h);
    tape.add(x, h)
}

/// Runs the first `upto` blocks of the stack. The trailing norm is applied
/// only when the full stack runs and the stack is non-empty.
pub fn run_stack(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    shape: StackShape,
    upto: usize,
    mut x: Var,
    segments: &[Range<usize>],
) -> Var {
    let upto = upto.min(shape.depth);
    for i in 0..upto {
        x = block(tape, p, &format!("{prefix}blocks.{i}."), shape.heads, x, segments);
    }
    if shape.depth > 0 && upto == shape.depth {
        x = layer_norm(tape, p, &format!("{prefix}norm."), x);
    }
    x
}

/// Consecutive row ranges for sequences of the given lengths.
pub fn segments_for(lengths: impl IntoIterator<Item = usize>) -> Vec<Range<usize>> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}
