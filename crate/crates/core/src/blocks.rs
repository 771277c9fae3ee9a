//! Exact weight constructors on the structured five-row layout.
//!
//! Every token carries two data rows, an interaction term
//! `I_t = (cos(tπ/2l), sin(tπ/2l))` in rows 3–4 and the constant 1 in row 5.
//! Token positions and rows in this module are 1-based, as in the math.
//!
//! The synthesizers follow one convention: row 2 is scratch space that is
//! zero between blocks, and an FFN only changes tokens whose scratch row is
//! nonzero. Under that convention heads and FFNs of unrelated sub-networks can
//! share a block without disturbing each other.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::runtime::{
    relu, AttentionHead, EmbeddingMatrix, FeedForward, FfnRecipe, InteractionTag, KeepSide, Layer, Matrix,
    Provenance, StackPart, TransformerBlock,
};

/// Embedding width of the structured layout.
pub const D_EMBD: usize = 5;

/// Token count and current analytic bound on |data entries|.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StructuredLayout {
    pub tokens: usize,
    pub bound: f64,
}

impl StructuredLayout {
    pub fn new(tokens: usize, bound: f64) -> Result<Self> {
        if tokens == 0 {
            return Err(Error::Parameter("layout needs at least one token".into()));
        }
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(Error::Parameter(format!("magnitude bound must be positive, got {bound}")));
        }
        Ok(StructuredLayout { tokens, bound })
    }

    pub fn with_bound(self, bound: f64) -> Self {
        StructuredLayout { bound, ..self }
    }

    /// `I_t` for a 1-based position.
    pub fn interaction(&self, t: usize) -> [f64; 2] {
        interaction_term(t, self.tokens)
    }

    /// Positional rows: zero data, `I_t`, constant 1.
    pub fn positional(&self) -> EmbeddingMatrix {
        let mut h = EmbeddingMatrix::zeros(D_EMBD, self.tokens);
        for t in 1..=self.tokens {
            let [c, s] = self.interaction(t);
            h.set(2, t - 1, c);
            h.set(3, t - 1, s);
            h.set(4, t - 1, 1.0);
        }
        h
    }

    /// Embedding with the given row-1 values on top of the positional rows.
    pub fn embed_row1(&self, values: &[f64]) -> EmbeddingMatrix {
        let mut h = self.positional();
        for (t, v) in values.iter().enumerate() {
            h.set(0, t, *v);
        }
        h
    }
}

/// Kept out of line: inlined copies may fuse `sin`/`cos` into a `sincos` call
/// that rounds differently, and weights must match the embedding bit for bit.
#[inline(never)]
pub fn interaction_term(t: usize, l: usize) -> [f64; 2] {
    let theta = t as f64 * PI / (2.0 * l as f64);
    [theta.cos(), theta.sin()]
}

/// The two rows of `Q^B` and `K^B`; each row is a linear form on a token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataKernelPair {
    pub qb: [[f64; 5]; 2],
    pub kb: [[f64; 5]; 2],
    pub kappa: f64,
}

impl DataKernelPair {
    pub fn new(qb: [[f64; 5]; 2], kb: [[f64; 5]; 2], kappa: f64) -> Result<Self> {
        if !(kappa > 0.0) || !kappa.is_finite() {
            return Err(Error::Parameter(format!("kernel bound must be positive, got {kappa}")));
        }
        let max = qb.iter().chain(kb.iter()).flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        if !max.is_finite() || max > kappa {
            return Err(Error::BoundViolation(format!("kernel entry {max} exceeds bound {kappa}")));
        }
        Ok(DataKernelPair { qb, kb, kappa })
    }

    /// Kernel from up to two (query form, key form) pairs; κ is the largest
    /// entry, floored at 1.
    pub fn from_terms(terms: &[([f64; 5], [f64; 5])]) -> Result<Self> {
        if terms.len() > 2 {
            return Err(Error::Parameter("a data kernel has two rows".into()));
        }
        let mut qb = [[0.0; 5]; 2];
        let mut kb = [[0.0; 5]; 2];
        for (i, (q, k)) in terms.iter().enumerate() {
            qb[i] = *q;
            kb[i] = *k;
        }
        let max = qb.iter().chain(kb.iter()).flatten().fold(1.0f64, |m, v| m.max(v.abs()));
        DataKernelPair::new(qb, kb, max)
    }

    /// `<Q^B h, K^B h'>` evaluated directly.
    pub fn score(&self, h_target: &[f64], h_source: &[f64]) -> f64 {
        (0..2)
            .map(|r| {
                let q: f64 = self.qb[r].iter().zip(h_target).map(|(a, b)| a * b).sum();
                let k: f64 = self.kb[r].iter().zip(h_source).map(|(a, b)| a * b).sum();
                q * k
            })
            .sum()
    }

    /// Upper bound on |score| when data rows are within `bound`.
    pub fn score_bound(&self, bound: f64) -> f64 {
        let m = [bound, bound, 1.0, 1.0, 1.0];
        (0..2)
            .map(|r| {
                let q: f64 = self.qb[r].iter().zip(&m).map(|(a, b)| a.abs() * b).sum();
                let k: f64 = self.kb[r].iter().zip(&m).map(|(a, b)| a.abs() * b).sum();
                q * k
            })
            .sum()
    }
}

/// Basis vector `e_i` for a 1-based row.
pub fn e(i: usize) -> [f64; 5] {
    let mut v = [0.0; 5];
    v[i - 1] = 1.0;
    v
}

/// `c · e_i`.
pub fn ce(c: f64, i: usize) -> [f64; 5] {
    let mut v = [0.0; 5];
    v[i - 1] = c;
    v
}

/// `C = 2·d_embd⁴·κ²·M²/(1 − cos(π/(2l))) + 1` with `M` floored at 1.
pub fn cancellation_constant(kappa: f64, bound: f64, l: usize) -> f64 {
    let m = bound.max(1.0);
    let x = PI / (2.0 * l as f64);
    let one_minus_cos = 2.0 * (x / 2.0).sin().powi(2);
    2.0 * (D_EMBD as f64).powi(4) * kappa * kappa * m * m / one_minus_cos + 1.0
}

/// Weight bound every interaction head must respect.
pub fn interaction_weight_bound(kappa: f64, bound: f64, l: usize) -> f64 {
    let m = bound.max(1.0);
    let lf = l as f64;
    let x = PI / (2.0 * lf);
    let one_minus_cos = 2.0 * (x / 2.0).sin().powi(2);
    2.0 * (D_EMBD as f64).powi(4) * kappa * kappa * m * m * lf * lf / one_minus_cos + 1.0
}

/// Finds `(a, b)` near `target·(c, s)` with `fl(fl(a·c) + fl(b·s)) == target`.
///
/// The runtime computes that exact expression for the interaction row, so the
/// target pair sees the cancellation constant without rounding error.
fn exact_pair(c: f64, s: f64, target: f64) -> (f64, f64) {
    let eval = |a: f64, b: f64| (a * c) + (b * s);
    // Fix the coordinate with the larger weight near its share of the target,
    // then solve the residual with the other one and nudge both by a few ulps.
    let swap = s.abs() > c.abs();
    let (cp, cq) = if swap { (s, c) } else { (c, s) };
    let mut p = target * cp;
    let mut pd = p;
    let mut candidates = vec![p];
    for _ in 0..16 {
        p = next_up(p);
        pd = next_down(pd);
        candidates.push(p);
        candidates.push(pd);
    }
    for p in candidates {
        let rest = target - p * cp;
        let q0 = if cq != 0.0 { rest / cq } else { 0.0 };
        let (mut up, mut down) = (q0, q0);
        for k in 0..8 {
            if k > 0 {
                up = next_up(up);
                down = next_down(down);
            }
            for q in [up, down] {
                let (a, b) = if swap { (q, p) } else { (p, q) };
                if eval(a, b) == target {
                    return (a, b);
                }
            }
        }
    }
    (target * c, target * s)
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}

fn next_down(x: f64) -> f64 {
    -next_up(-x)
}

/// Interaction head writing `σ(<Q^B h_{t1}, K^B h_{t2}>)` into `out_row` of
/// token `t1` and exactly 0 everywhere else. Returns the head and its `C`.
pub fn make_interaction_head(
    t1: usize,
    t2: usize,
    out_row: usize,
    kernels: &DataKernelPair,
    layout: &StructuredLayout,
) -> Result<(AttentionHead, f64)> {
    interaction_head(t1, t2, out_row, false, kernels, layout)
}

/// Same as [`make_interaction_head`], optionally writing the negated value.
pub fn interaction_head(
    t1: usize,
    t2: usize,
    out_row: usize,
    negate: bool,
    kernels: &DataKernelPair,
    layout: &StructuredLayout,
) -> Result<(AttentionHead, f64)> {
    let l = layout.tokens;
    if !(kernels.kappa > 0.0) || !(layout.bound > 0.0) || l == 0 {
        return Err(Error::Parameter("kernel bound, magnitude bound and token count must be positive".into()));
    }
    if t1 == 0 || t1 > l || t2 == 0 || t2 > l {
        return Err(Error::Parameter(format!("token positions ({t1}, {t2}) outside 1..={l}")));
    }
    if out_row == 0 || out_row > D_EMBD {
        return Err(Error::Parameter(format!("output row {out_row} outside 1..=5")));
    }
    let c = cancellation_constant(kernels.kappa, layout.bound, l);
    let [c1, s1] = layout.interaction(t1);
    let [c2, s2] = layout.interaction(t2);
    let (qa, qbv) = exact_pair(c1, s1, c);
    let (ka, kbv) = exact_pair(c2, s2, 1.0);

    let mut q = Matrix::zeros(D_EMBD, D_EMBD);
    let mut k = Matrix::zeros(D_EMBD, D_EMBD);
    let mut v = Matrix::zeros(D_EMBD, D_EMBD);
    for r in 0..2 {
        for col in 0..D_EMBD {
            q.set(r, col, kernels.qb[r][col]);
            k.set(r, col, kernels.kb[r][col]);
        }
    }
    q.set(2, 2, qa);
    q.set(2, 3, qbv);
    k.set(2, 2, ka);
    k.set(2, 3, kbv);
    q.set(4, 4, 1.0);
    k.set(4, 4, -c);
    v.set(out_row - 1, 4, if negate { -1.0 } else { 1.0 });

    let mut head = AttentionHead::new(q, k, v)?;
    head.interaction = Some(InteractionTag {
        target: t1 - 1,
        source: t2 - 1,
        out_row: out_row - 1,
        negate,
        qb: kernels.qb,
        kb: kernels.kb,
        kappa: kernels.kappa,
        bound: layout.bound,
        cancel: c,
    });
    Ok((head, c))
}

/// Head from (query form, key form) terms with automatic κ.
pub fn head_from_terms(
    layout: &StructuredLayout,
    t1: usize,
    t2: usize,
    out_row: usize,
    negate: bool,
    terms: &[([f64; 5], [f64; 5])],
) -> Result<AttentionHead> {
    let k = DataKernelPair::from_terms(terms)?;
    Ok(interaction_head(t1, t2, out_row, negate, &k, layout)?.0)
}

/// Unit pivot vector separating `I_1..I_k` from `I_{k+1}..I_l`; positive on
/// the prefix.
fn pivot_vector(k: usize, l: usize) -> [f64; 2] {
    let theta = (k as f64 + 0.5) * PI / (2.0 * l as f64);
    [theta.sin(), -theta.cos()]
}

/// Gating constant `16·l·M/π`.
pub fn gating_constant(l: usize, bound: f64) -> f64 {
    16.0 * l as f64 * bound / PI
}

/// Two-layer map keeping tokens on one side of pivot `k` and zeroing the
/// data rows on the other side; rows 3–5 pass through.
pub fn make_gating_ffn(k: usize, keep: KeepSide, layout: &StructuredLayout) -> Result<FeedForward> {
    let l = layout.tokens;
    if l < 2 {
        return Err(Error::Parameter("gating needs at least two tokens".into()));
    }
    if k == 0 || k >= l {
        return Err(Error::Parameter(format!("pivot {k} outside 1..{l}")));
    }
    let sign = match keep {
        KeepSide::Prefix => 1.0,
        KeepSide::Suffix => -1.0,
    };
    let cg = gating_constant(l, layout.bound);
    let [v1, v2] = pivot_vector(k, l);
    let (g1, g2) = (sign * cg * v1, sign * cg * v2);
    let w1 = Matrix::from_rows(&[
        vec![1.0, 0.0, g1, g2, 0.0],
        vec![0.0, 1.0, g1, g2, 0.0],
        vec![0.0, 0.0, g1, g2, 0.0],
        vec![0.0, 0.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 1.0],
    ])?;
    let w2 = Matrix::from_rows(&[
        vec![1.0, 0.0, -1.0, 0.0, 0.0, 0.0],
        vec![0.0, 1.0, -1.0, 0.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0],
        vec![0.0, 0.0, 0.0, 0.0, 0.0, 1.0],
    ])?;
    FeedForward::from_parts(vec![(w1, vec![0.0; 6]), (w2, vec![0.0; 5])])
}

/// `ψ(u) = σ(u+2) − σ(u+1) − σ(u−1) + σ(u−2)` of row 1, written to row 1.
pub fn make_psi_ffn() -> FeedForward {
    let mut w1 = Matrix::zeros(4, D_EMBD);
    for r in 0..4 {
        w1.set(r, 0, 1.0);
    }
    let mut w2 = Matrix::zeros(D_EMBD, 4);
    for (c, s) in [1.0, -1.0, -1.0, 1.0].iter().enumerate() {
        w2.set(0, c, *s);
    }
    FeedForward::from_parts(vec![(w1, vec![2.0, 1.0, -1.0, -2.0]), (w2, vec![0.0; D_EMBD])]).expect("fixed shapes")
}

/// Closed-form trapezoid.
pub fn psi(u: f64) -> f64 {
    relu(u + 2.0) - relu(u + 1.0) - relu(u - 1.0) + relu(u - 2.0)
}

/// Scratch decoder for grid weights: a token whose row 2 holds
/// `y = σ(x − g + 1)` gains `ψ(3(N−1)(y − 1))` in row 1 and has row 2 cleared.
/// Tokens with `y = 0` are untouched.
pub fn psi_decode_ffn(n: usize) -> FeedForward {
    let a = 3.0 * (n as f64 - 1.0);
    let mut w1 = Matrix::zeros(6, D_EMBD);
    for r in 0..4 {
        w1.set(r, 1, a);
    }
    w1.set(4, 1, 1.0);
    w1.set(5, 1, -1.0);
    let b1 = vec![-a + 2.0, -a + 1.0, -a - 1.0, -a - 2.0, 0.0, 0.0];
    let mut w2 = Matrix::zeros(D_EMBD, 6);
    for (c, s) in [1.0, -1.0, -1.0, 1.0].iter().enumerate() {
        w2.set(0, c, *s);
    }
    w2.set(1, 4, -1.0);
    w2.set(1, 5, 1.0);
    FeedForward::from_parts(vec![(w1, b1), (w2, vec![0.0; D_EMBD])]).expect("fixed shapes")
}

/// Single linear layer emitting `(−h¹ + h², −h², 0, 0, 0)`: after the
/// residual, row 1 holds the old row 2 and row 2 is zero.
pub fn make_replace_ffn() -> FeedForward {
    let mut w = Matrix::zeros(D_EMBD, D_EMBD);
    w.set(0, 0, -1.0);
    w.set(0, 1, 1.0);
    w.set(1, 1, -1.0);
    FeedForward::from_parts(vec![(w, vec![0.0; D_EMBD])]).expect("fixed shapes")
}

/// Number of ramp layers, `ceil(ln(1/Δ))`, at least 1.
pub fn ramp_depth(delta: f64) -> usize {
    ((1.0 / delta).ln().ceil() as usize).max(1)
}

/// Scratch decoder for the indicator ramp. A token whose row 2 holds
/// `y = s + offset` (with `offset ≥ s`) gains `1̂(s)` in row 1, where `1̂` is
/// 1 below `r² − Δ`, 0 above `r²` and linear in between; row 2 is cleared.
/// The steep slope `1/Δ` is split into `ceil(ln(1/Δ))` factors of at most e.
pub fn make_ramp_ffn(r2: f64, delta: f64, offset: f64) -> Result<FeedForward> {
    if !(delta > 0.0 && delta < r2) {
        return Err(Error::Parameter(format!("ramp width {delta} must lie in (0, r²={r2})")));
    }
    if !(offset > 0.0) {
        return Err(Error::Parameter("ramp offset must be positive".into()));
    }
    let depth = ramp_depth(delta);
    let alpha = (1.0 / delta).powf(1.0 / depth as f64);
    let knee = offset + r2 - delta;
    let mut layers = Vec::new();
    // hidden units: [a1, a2, p, z]
    let mut w = Matrix::zeros(4, D_EMBD);
    w.set(0, 1, 1.0 / offset);
    w.set(1, 1, 1.0 / offset);
    w.set(2, 1, 1.0);
    w.set(3, 1, alpha);
    layers.push(Layer { w, b: vec![0.0, -1.0, 0.0, -alpha * knee] });
    for _ in 1..depth {
        let mut w = Matrix::identity(4);
        w.set(3, 3, alpha);
        layers.push(Layer { w, b: vec![0.0; 4] });
    }
    // [a1, a2, p, min-part z, min-part z − 1]
    let mut w = Matrix::zeros(5, 4);
    w.set(0, 0, 1.0);
    w.set(1, 1, 1.0);
    w.set(2, 2, 1.0);
    w.set(3, 3, 1.0);
    w.set(4, 3, 1.0);
    layers.push(Layer { w, b: vec![0.0, 0.0, 0.0, 0.0, -1.0] });
    let mut w = Matrix::zeros(D_EMBD, 5);
    w.set(0, 0, 1.0);
    w.set(0, 1, -1.0);
    w.set(0, 3, -1.0);
    w.set(0, 4, 1.0);
    w.set(1, 2, -1.0);
    layers.push(Layer { w, b: vec![0.0; D_EMBD] });
    FeedForward::new(layers)
}

/// Closed-form ramp indicator `1̂_{r²,Δ}(s)`.
pub fn ramp_indicator(s: f64, r2: f64, delta: f64) -> f64 {
    1.0 - ((s - (r2 - delta)) / delta).clamp(0.0, 1.0)
}

/// Wraps heads and an FFN recipe into a block with provenance.
pub fn structured_block(
    heads: Vec<AttentionHead>,
    recipe: FfnRecipe,
    layout: &StructuredLayout,
    label: &str,
) -> Result<TransformerBlock> {
    let ffn = instantiate(&recipe, 0, layout.tokens)?;
    Ok(TransformerBlock {
        heads,
        ffn,
        provenance: Some(Provenance { label: label.into(), tokens: layout.tokens, ffn: recipe }),
    })
}

/// Free (interaction-independent) recipe.
pub fn free(name: &str, ffn: FeedForward) -> FfnRecipe {
    FfnRecipe::Free { name: name.into(), ffn }
}

/// Tokens `1..=D` hold x; afterwards tokens `D+i` hold `x^i − c^i` in row 1.
///
/// Each slot gets `σ(x^i − c^i + 2M)` from its input token and `−σ(2M)` from
/// a constant head, so no FFN is needed. Requires `l = 2D` and `‖c‖∞ ≤ M/2`.
pub fn make_addition_block(c: &[f64], layout: &StructuredLayout) -> Result<(TransformerBlock, StructuredLayout)> {
    let d = c.len();
    if layout.tokens != 2 * d {
        return Err(Error::Parameter(format!("addition needs 2D = {} tokens, layout has {}", 2 * d, layout.tokens)));
    }
    let m = layout.bound;
    if let Some(v) = c.iter().find(|v| v.abs() > m / 2.0) {
        return Err(Error::BoundViolation(format!("|c| = {} exceeds M/2 = {}", v.abs(), m / 2.0)));
    }
    let heads = addition_heads(layout, 0, d, d, c)?;
    let block = structured_block(heads, FfnRecipe::Empty, layout, "addition")?;
    Ok((block, layout.with_bound(1.5 * m)))
}

/// Heads subtracting `c` from inputs at tokens `inputs+1..` into empty slots
/// at tokens `slots+1..` (0-based offsets). Inputs must be within the layout
/// bound and `|c| ≤ M/2`.
pub(crate) fn addition_heads(
    layout: &StructuredLayout,
    inputs: usize,
    slots: usize,
    count: usize,
    c: &[f64],
) -> Result<Vec<AttentionHead>> {
    let off = 2.0 * layout.bound;
    let mut heads = Vec::with_capacity(2 * count);
    for i in 0..count {
        let slot = slots + i + 1;
        let mut k = e(1);
        k[4] = off - c[i];
        heads.push(head_from_terms(layout, slot, inputs + i + 1, 1, false, &[(e(5), k)])?);
        heads.push(head_from_terms(layout, slot, slot, 1, true, &[(e(5), ce(off, 5))])?);
    }
    Ok(heads)
}

// ---------------------------------------------------------------------------
// Parallelization.

fn block_recipe(block: &TransformerBlock, layout: &StructuredLayout) -> Result<FfnRecipe> {
    match &block.provenance {
        Some(p) => {
            if p.tokens != layout.tokens {
                return Err(Error::Unsupported(format!(
                    "block built for {} tokens, layout has {}",
                    p.tokens, layout.tokens
                )));
            }
            Ok(p.ffn.clone())
        }
        None if block.heads.is_empty() && block.ffn.depth() == 0 => Ok(FfnRecipe::Empty),
        None => Err(Error::Unsupported("block has no construction provenance".into())),
    }
}

/// Bound on |FFN input| for a block: data bound plus what heads can add.
fn ffn_input_bound(block: &TransformerBlock, layout: &StructuredLayout) -> f64 {
    let mut add = vec![0.0; layout.tokens];
    for h in &block.heads {
        if let Some(t) = &h.interaction {
            let k = DataKernelPair { qb: t.qb, kb: t.kb, kappa: t.kappa };
            add[t.target] += k.score_bound(layout.bound);
        }
    }
    layout.bound.max(1.0) + add.iter().cloned().fold(0.0, f64::max)
}

/// Merges blocks acting on disjoint token ranges into one block on the
/// concatenated layout (see [`parallelize_many`]).
pub fn parallelize_blocks(
    b1: &TransformerBlock,
    layout1: &StructuredLayout,
    b2: &TransformerBlock,
    layout2: &StructuredLayout,
) -> Result<(TransformerBlock, StructuredLayout)> {
    parallelize_many(&[(b1, *layout1), (b2, *layout2)])
}

/// Merges any number of blocks. Interaction heads are rebuilt for the merged
/// positions and token count; identical interaction-free FFNs are shared, and
/// otherwise the FFNs are stacked and gated by token region.
pub fn parallelize_many(pieces: &[(&TransformerBlock, StructuredLayout)]) -> Result<(TransformerBlock, StructuredLayout)> {
    if pieces.is_empty() {
        return Err(Error::Parameter("nothing to parallelize".into()));
    }
    let total: usize = pieces.iter().map(|(_, l)| l.tokens).sum();
    let mut bound = 0.0f64;
    let mut recipes = Vec::with_capacity(pieces.len());
    for (b, l) in pieces {
        recipes.push(block_recipe(b, l)?);
        bound = bound.max(l.bound);
        for h in &b.heads {
            match &h.interaction {
                Some(t) => bound = bound.max(t.bound),
                None => return Err(Error::Unsupported("head not built by the interaction constructor".into())),
            }
        }
    }
    let merged = StructuredLayout::new(total, bound)?;

    let mut heads = Vec::new();
    let mut offset = 0;
    for (b, l) in pieces {
        for h in &b.heads {
            let t = h.interaction.as_ref().expect("checked above");
            let k = DataKernelPair { qb: t.qb, kb: t.kb, kappa: t.kappa };
            let (head, _) =
                interaction_head(t.target + offset + 1, t.source + offset + 1, t.out_row + 1, t.negate, &k, &merged)?;
            heads.push(head);
        }
        offset += l.tokens;
    }

    let shared = match &recipes[0] {
        FfnRecipe::Empty if recipes.iter().all(|r| *r == FfnRecipe::Empty) => Some(FfnRecipe::Empty),
        FfnRecipe::Free { ffn, .. }
            if recipes.iter().all(|r| matches!(r, FfnRecipe::Free { ffn: f, .. } if f == ffn)) =>
        {
            Some(recipes[0].clone())
        }
        _ => None,
    };
    let recipe = match shared {
        Some(r) => r,
        None => {
            let mut parts = Vec::new();
            let mut offset = 0;
            for ((b, l), r) in pieces.iter().zip(recipes) {
                parts.push(StackPart { offset, tokens: l.tokens, recipe: r, input_bound: ffn_input_bound(b, l) });
                offset += l.tokens;
            }
            FfnRecipe::Stack { parts }
        }
    };
    let block = structured_block(heads, recipe, &merged, "parallel")?;
    Ok((block, merged))
}

/// Builds the FFN of a recipe placed at token offset `offset` inside a
/// layout of `l` tokens.
pub fn instantiate(recipe: &FfnRecipe, offset: usize, l: usize) -> Result<FeedForward> {
    match recipe {
        FfnRecipe::Empty => Ok(FeedForward::empty()),
        FfnRecipe::Free { ffn, .. } => Ok(ffn.clone()),
        FfnRecipe::Gating { pivot, keep, bound } => {
            make_gating_ffn(pivot + offset, *keep, &StructuredLayout::new(l, *bound)?)
        }
        FfnRecipe::Stack { parts } => {
            let global_bound = parts.iter().map(|p| p.input_bound).fold(1.0, f64::max);
            let mut built = Vec::new();
            for p in parts {
                let ffn = instantiate(&p.recipe, offset + p.offset, l)?;
                if ffn.depth() == 0 {
                    continue;
                }
                let lo = offset + p.offset + 1;
                let hi = offset + p.offset + p.tokens;
                built.push((ffn, lo, hi));
            }
            stack_ffns(&built, l, global_bound)
        }
    }
}

/// Output bound of an FFN over the box `|data| ≤ bound`, `I ∈ [0,1]`, 1.
pub fn ffn_output_bound(ffn: &FeedForward, bound: f64) -> f64 {
    let mut lo = vec![-bound, -bound, 0.0, 0.0, 1.0];
    let mut hi = vec![bound, bound, 1.0, 1.0, 1.0];
    let n = ffn.layers.len();
    for (i, layer) in ffn.layers.iter().enumerate() {
        let mut nlo = Vec::with_capacity(layer.w.rows());
        let mut nhi = Vec::with_capacity(layer.w.rows());
        for r in 0..layer.w.rows() {
            let (mut a, mut b) = (layer.b[r], layer.b[r]);
            for c in 0..layer.w.cols() {
                let w = layer.w.get(r, c);
                let (x, y) = (w * lo[c], w * hi[c]);
                a += x.min(y);
                b += x.max(y);
            }
            if i + 1 < n {
                a = a.max(0.0);
                b = b.max(0.0);
            }
            nlo.push(a);
            nhi.push(b);
        }
        lo = nlo;
        hi = nhi;
    }
    lo.iter().zip(&hi).fold(0.0, |m, (a, b)| m.max(a.abs()).max(b.abs()))
}

/// Hidden chain of an FFN in normalized form: ReLU layers plus final affine.
struct Chain {
    hidden: Vec<Layer>,
    out: Layer,
}

fn normalize(ffn: &FeedForward) -> Chain {
    let n = ffn.layers.len();
    if n == 1 {
        let last = &ffn.layers[0];
        let mut w = Matrix::zeros(2 * D_EMBD, D_EMBD);
        for i in 0..D_EMBD {
            w.set(i, i, 1.0);
            w.set(D_EMBD + i, i, -1.0);
        }
        let mut a = Matrix::zeros(last.w.rows(), 2 * D_EMBD);
        for r in 0..last.w.rows() {
            for c in 0..D_EMBD {
                a.set(r, c, last.w.get(r, c));
                a.set(r, D_EMBD + c, -last.w.get(r, c));
            }
        }
        Chain { hidden: vec![Layer { w, b: vec![0.0; 2 * D_EMBD] }], out: Layer { w: a, b: last.b.clone() } }
    } else {
        Chain { hidden: ffn.layers[..n - 1].to_vec(), out: ffn.layers[n - 1].clone() }
    }
}

/// Stacks FFNs restricted to token ranges `[lo, hi]` (1-based, inclusive).
fn stack_ffns(parts: &[(FeedForward, usize, usize)], l: usize, input_bound: f64) -> Result<FeedForward> {
    if parts.is_empty() {
        return Ok(FeedForward::empty());
    }
    let chains: Vec<Chain> = parts.iter().map(|(f, _, _)| normalize(f)).collect();
    let depth = chains.iter().map(|c| c.hidden.len()).max().unwrap_or(1);
    let widths: Vec<Vec<usize>> = chains
        .iter()
        .map(|c| {
            let mut w: Vec<usize> = c.hidden.iter().map(|h| h.w.rows()).collect();
            let last = *w.last().expect("at least one hidden layer");
            w.resize(depth, last);
            w
        })
        .collect();
    let mut layers = Vec::new();
    // hidden layers: parts block-diagonal, then two passthrough units for I
    for k in 0..depth {
        let rows: usize = widths.iter().map(|w| w[k]).sum::<usize>() + 2;
        let cols = if k == 0 { D_EMBD } else { widths.iter().map(|w| w[k - 1]).sum::<usize>() + 2 };
        let mut w = Matrix::zeros(rows, cols);
        let mut b = vec![0.0; rows];
        let (mut r0, mut c0) = (0, 0);
        for (j, ch) in chains.iter().enumerate() {
            if k < ch.hidden.len() {
                let layer = &ch.hidden[k];
                for r in 0..layer.w.rows() {
                    for c in 0..layer.w.cols() {
                        let col = if k == 0 { c } else { c0 + c };
                        w.set(r0 + r, col, layer.w.get(r, c));
                    }
                    b[r0 + r] = layer.b[r];
                }
            } else {
                for r in 0..widths[j][k] {
                    w.set(r0 + r, c0 + r, 1.0);
                }
            }
            r0 += widths[j][k];
            if k > 0 {
                c0 += widths[j][k - 1];
            }
        }
        if k == 0 {
            w.set(rows - 2, 2, 1.0);
            w.set(rows - 1, 3, 1.0);
        } else {
            w.set(rows - 2, cols - 2, 1.0);
            w.set(rows - 1, cols - 1, 1.0);
        }
        layers.push(Layer { w, b });
    }
    let prev_cols: usize = widths.iter().map(|w| w[depth - 1]).sum::<usize>() + 2;
    let (ic, is) = (prev_cols - 2, prev_cols - 1);
    let gate = parts
        .iter()
        .map(|(f, _, _)| gating_constant(l, ffn_output_bound(f, input_bound).max(1.0)))
        .fold(0.0, f64::max);

    // gate A: keep t >= lo
    let units = parts.len() * D_EMBD * 2 + 2;
    let mut wa = Matrix::zeros(units, prev_cols);
    let mut ba = vec![0.0; units];
    let mut c0 = 0;
    for (j, ((_, lo, _), ch)) in parts.iter().zip(&chains).enumerate() {
        let pv = if *lo > 1 { Some(pivot_vector(lo - 1, l)) } else { None };
        for r in 0..D_EMBD {
            let (u1, u2) = (2 * (j * D_EMBD + r), 2 * (j * D_EMBD + r) + 1);
            for c in 0..ch.out.w.cols() {
                wa.set(u1, c0 + c, ch.out.w.get(r, c));
            }
            ba[u1] = ch.out.b[r];
            match pv {
                Some([v1, v2]) => {
                    // suffix side: u = −v·I
                    wa.set(u1, ic, -gate * v1);
                    wa.set(u1, is, -gate * v2);
                    wa.set(u2, ic, -gate * v1);
                    wa.set(u2, is, -gate * v2);
                }
                None => {
                    for c in 0..ch.out.w.cols() {
                        wa.set(u2, c0 + c, -ch.out.w.get(r, c));
                    }
                    ba[u2] = -ch.out.b[r];
                }
            }
        }
        c0 += widths[j][depth - 1];
    }
    wa.set(units - 2, ic, 1.0);
    wa.set(units - 1, is, 1.0);
    layers.push(Layer { w: wa, b: ba });

    // gate B: keep t <= hi
    let mut wb = Matrix::zeros(units, units);
    for (j, (_, _, hi)) in parts.iter().enumerate() {
        let pv = if *hi < l { Some(pivot_vector(*hi, l)) } else { None };
        for r in 0..D_EMBD {
            let (u1, u2) = (2 * (j * D_EMBD + r), 2 * (j * D_EMBD + r) + 1);
            wb.set(u1, u1, 1.0);
            wb.set(u1, u2, -1.0);
            match pv {
                Some([v1, v2]) => {
                    wb.set(u1, units - 2, gate * v1);
                    wb.set(u1, units - 1, gate * v2);
                    wb.set(u2, units - 2, gate * v1);
                    wb.set(u2, units - 1, gate * v2);
                }
                None => {
                    wb.set(u2, u1, -1.0);
                    wb.set(u2, u2, 1.0);
                }
            }
        }
    }
    layers.push(Layer { w: wb, b: vec![0.0; units] });

    let mut wo = Matrix::zeros(D_EMBD, units);
    for j in 0..parts.len() {
        for r in 0..D_EMBD {
            wo.set(r, 2 * (j * D_EMBD + r), 1.0);
            wo.set(r, 2 * (j * D_EMBD + r) + 1, -1.0);
        }
    }
    layers.push(Layer { w: wo, b: vec![0.0; D_EMBD] });
    FeedForward::new(layers)
}
