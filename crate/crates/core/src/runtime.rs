//! Dense forward engine for ReLU-attention transformers.
//!
//! A block maps `H` to `FFN(MHA(H) + H) + MHA(H) + H`, where every attention
//! head contributes `V h_k σ(<Q h_t, K h_k>)` and multi-head attention is the
//! plain sum of heads. The decoder reads row 1 of the last token and clips it
//! to `[-R, R]`.
//!
//! Embedding matrices are stored token-major: the five (or `d_embd`) entries
//! of one token are contiguous.
//!
//! Nets produced by the synthesizers carry interaction tags on their heads.
//! A tagged head is known to be nonzero only at one (target, source) pair as
//! long as the data rows stay inside the bound it was built for and the
//! positional rows are intact. [`TransformerNet::forward`] checks that
//! condition block by block and then evaluates tagged heads on their single
//! pair, which is bit-identical to the dense evaluation. Blocks that fail the
//! check fall back to the dense path.

use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged matrix rows".into()));
        }
        Ok(Matrix { rows: r, cols: c, data: rows.concat() })
    }

    pub fn from_flat(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|v| v * c).collect() }
    }

    /// `out = self * x`, summing each row left to right from `+0.0`.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate().take(self.rows) {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            let mut acc = 0.0;
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            *o = acc;
        }
    }
}

impl Serialize for Matrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Neumaier-compensated dot product.
///
/// Interaction heads add and later cancel a large constant; compensation
/// keeps the small data term intact through that cancellation.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let p = x * y;
        let t = s + p;
        if s.abs() >= p.abs() {
            c += (s - t) + p;
        } else {
            c += (p - t) + s;
        }
        s = t;
    }
    // An infinite partial sum poisons the correction with NaN; keep the sum.
    if s.is_finite() {
        s + c
    } else {
        s
    }
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// The matrix `H` of a forward pass: `d` rows, `l` token columns.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    d: usize,
    l: usize,
    data: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn zeros(d: usize, l: usize) -> Self {
        EmbeddingMatrix { d, l, data: vec![0.0; d * l] }
    }

    /// Builds from rows (`d` vectors of length `l`).
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        let l = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != l) {
            return Err(Error::Dimension("ragged embedding rows".into()));
        }
        let mut m = EmbeddingMatrix::zeros(d, l);
        for (r, row) in rows.iter().enumerate() {
            for (t, v) in row.iter().enumerate() {
                m.set(r, t, *v);
            }
        }
        if !m.is_finite() {
            return Err(Error::Input("non-finite embedding entry".into()));
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn tokens(&self) -> usize {
        self.l
    }

    pub fn get(&self, r: usize, t: usize) -> f64 {
        self.data[t * self.d + r]
    }

    pub fn set(&mut self, r: usize, t: usize, v: f64) {
        self.data[t * self.d + r] = v;
    }

    pub fn column(&self, t: usize) -> &[f64] {
        &self.data[t * self.d..(t + 1) * self.d]
    }

    pub fn column_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * self.d..(t + 1) * self.d]
    }

    pub fn row(&self, r: usize) -> Vec<f64> {
        (0..self.l).map(|t| self.get(r, t)).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.d).map(|r| self.row(r)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &EmbeddingMatrix) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    fn add_assign(&mut self, other: &EmbeddingMatrix) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Metadata left on heads built by the interaction constructor.
///
/// `target`/`source` are 0-based token columns, `out_row` a 0-based row.
/// `bound` is the data magnitude the cancellation constant `cancel` was
/// sized for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionTag {
    pub target: usize,
    pub source: usize,
    pub out_row: usize,
    pub negate: bool,
    pub qb: [[f64; 5]; 2],
    pub kb: [[f64; 5]; 2],
    pub kappa: f64,
    pub bound: f64,
    pub cancel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionHead {
    #[serde(rename = "Q")]
    pub q: Matrix,
    #[serde(rename = "K")]
    pub k: Matrix,
    #[serde(rename = "V")]
    pub v: Matrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interaction: Option<InteractionTag>,
}

impl AttentionHead {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        let d = q.rows();
        for (name, m) in [("Q", &q), ("K", &k), ("V", &v)] {
            if m.rows() != d || m.cols() != d {
                return Err(Error::Dimension(format!("{name} is {}x{}, expected {d}x{d}", m.rows(), m.cols())));
            }
            if !m.is_finite() {
                return Err(Error::Input(format!("non-finite entry in {name}")));
            }
        }
        Ok(AttentionHead { q, k, v, interaction: None })
    }

    pub fn zeros(d: usize) -> Self {
        AttentionHead { q: Matrix::zeros(d, d), k: Matrix::zeros(d, d), v: Matrix::zeros(d, d), interaction: None }
    }

    pub fn dim(&self) -> usize {
        self.q.rows()
    }

    pub fn max_abs(&self) -> f64 {
        self.q.max_abs().max(self.k.max_abs()).max(self.v.max_abs())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(rename = "W")]
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// `W_L σ(... σ(W_1 h + b_1) ...) + b_L`, applied to every token.
///
/// With no layers the map is identically zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
pub struct FeedForward {
    pub layers: Vec<Layer>,
}

impl FeedForward {
    pub fn empty() -> Self {
        FeedForward { layers: Vec::new() }
    }

    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        let ffn = FeedForward { layers };
        ffn.validate_chain()?;
        Ok(ffn)
    }

    pub fn from_parts(parts: Vec<(Matrix, Vec<f64>)>) -> Result<Self> {
        FeedForward::new(parts.into_iter().map(|(w, b)| Layer { w, b }).collect())
    }

    fn validate_chain(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.b.len() != layer.w.rows() {
                return Err(Error::Dimension(format!("layer {i}: bias length {} vs {} rows", layer.b.len(), layer.w.rows())));
            }
            if i > 0 && self.layers[i - 1].w.rows() != layer.w.cols() {
                return Err(Error::Dimension(format!("layer {i} does not compose with layer {}", i - 1)));
            }
            if !layer.w.is_finite() || layer.b.iter().any(|v| !v.is_finite()) {
                return Err(Error::Input(format!("non-finite weight in layer {i}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        self.validate_chain()?;
        if let (Some(first), Some(last)) = (self.layers.first(), self.layers.last()) {
            if first.w.cols() != d || last.w.rows() != d {
                return Err(Error::Dimension(format!(
                    "ffn maps {} -> {}, embedding dim is {d}",
                    first.w.cols(),
                    last.w.rows()
                )));
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Largest interior (hidden) width.
    pub fn width(&self) -> usize {
        let n = self.layers.len();
        self.layers.iter().take(n.saturating_sub(1)).map(|l| l.w.rows()).max().unwrap_or(0)
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .fold(0.0, |m, l| m.max(l.w.max_abs()).max(l.b.iter().fold(0.0f64, |a, v| a.max(v.abs()))))
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.rows() * l.w.cols() + l.b.len()).sum()
    }

    /// Applies the map to one token.
    pub fn apply(&self, h: &[f64], out: &mut [f64]) {
        let mut scratch = FfnScratch::default();
        self.apply_with(h, out, &mut scratch);
    }

    fn apply_with(&self, h: &[f64], out: &mut [f64], scratch: &mut FfnScratch) {
        let n = self.layers.len();
        if n == 0 {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        scratch.a.clear();
        scratch.a.extend_from_slice(h);
        for (i, layer) in self.layers.iter().enumerate() {
            scratch.b.clear();
            scratch.b.resize(layer.w.rows(), 0.0);
            layer.w.matvec_into(&scratch.a, &mut scratch.b);
            for (z, bias) in scratch.b.iter_mut().zip(&layer.b) {
                *z += bias;
                if i + 1 < n {
                    *z = relu(*z);
                }
            }
            std::mem::swap(&mut scratch.a, &mut scratch.b);
        }
        out.copy_from_slice(&scratch.a[..out.len()]);
    }

    /// True when the first layer ignores rows 3 and 4 (the interaction rows).
    pub fn interaction_free(&self) -> bool {
        match self.layers.first() {
            None => true,
            Some(l) if l.w.cols() == 5 => (0..l.w.rows()).all(|r| l.w.get(r, 2) == 0.0 && l.w.get(r, 3) == 0.0),
            Some(_) => false,
        }
    }
}

#[derive(Default)]
struct FfnScratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// Which side of a pivot a gating map keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeepSide {
    Prefix,
    Suffix,
}

/// How a block's FFN was produced; enough to rebuild it on a larger layout.
#[derive(Clone, Debug, PartialEq)]
pub enum FfnRecipe {
    /// Zero map.
    Empty,
    /// Does not read the interaction rows; reused verbatim.
    Free { name: String, ffn: FeedForward },
    /// Gating map with pivot `pivot` (1-based, keeps `t <= pivot` for prefix).
    Gating { pivot: usize, keep: KeepSide, bound: f64 },
    /// Region-gated sum of sub-recipes on consecutive token ranges.
    Stack { parts: Vec<StackPart> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StackPart {
    /// 0-based first token of the part within the stacked block.
    pub offset: usize,
    pub tokens: usize,
    pub recipe: FfnRecipe,
    /// Bound on |FFN input| entries for this part.
    pub input_bound: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub label: String,
    pub tokens: usize,
    pub ffn: FfnRecipe,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerBlock {
    pub heads: Vec<AttentionHead>,
    pub ffn: FeedForward,
    pub provenance: Option<Provenance>,
}

impl TransformerBlock {
    pub fn new(heads: Vec<AttentionHead>, ffn: FeedForward) -> Self {
        TransformerBlock { heads, ffn, provenance: None }
    }

    pub fn identity() -> Self {
        TransformerBlock::new(Vec::new(), FeedForward::empty())
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        for (j, h) in self.heads.iter().enumerate() {
            if h.dim() != d {
                return Err(Error::Dimension(format!("head {j} has dim {}, expected {d}", h.dim())));
            }
        }
        self.ffn.validate(d)
    }

    pub fn max_abs(&self) -> f64 {
        self.heads.iter().fold(self.ffn.max_abs(), |m, h| m.max(h.max_abs()))
    }
}

fn check_head(head: &AttentionHead, h: &EmbeddingMatrix) -> Result<()> {
    if head.dim() != h.dim() || head.k.rows() != h.dim() || head.v.rows() != h.dim() {
        return Err(Error::Dimension(format!("head dim {} vs embedding dim {}", head.dim(), h.dim())));
    }
    Ok(())
}

/// Column `t` of the result is `Σ_k σ(<Q h_t, K h_k>) V h_k`.
pub fn attention_forward(head: &AttentionHead, h: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    check_head(head, h)?;
    let d = h.dim();
    let l = h.tokens();
    let mut kh = vec![0.0; d * l];
    let mut vh = vec![0.0; d * l];
    for t in 0..l {
        head.k.matvec_into(h.column(t), &mut kh[t * d..(t + 1) * d]);
        head.v.matvec_into(h.column(t), &mut vh[t * d..(t + 1) * d]);
    }
    let mut out = EmbeddingMatrix::zeros(d, l);
    let mut q = vec![0.0; d];
    for t in 0..l {
        head.q.matvec_into(h.column(t), &mut q);
        let col = out.column_mut(t);
        for k in 0..l {
            let s = dot(&q, &kh[k * d..(k + 1) * d]);
            // NaN scores pass through so the overflow check sees them.
            if s > 0.0 || s.is_nan() {
                for (o, v) in col.iter_mut().zip(&vh[k * d..(k + 1) * d]) {
                    *o += s * v;
                }
            }
        }
    }
    Ok(out)
}

/// Sum of all heads; an empty list gives the zero matrix.
pub fn mha_forward(heads: &[AttentionHead], h: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    let mut out = EmbeddingMatrix::zeros(h.dim(), h.tokens());
    for head in heads {
        out.add_assign(&attention_forward(head, h)?);
    }
    Ok(out)
}

pub fn ffn_forward(ffn: &FeedForward, h: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    ffn.validate(h.dim())?;
    let mut out = EmbeddingMatrix::zeros(h.dim(), h.tokens());
    let mut scratch = FfnScratch::default();
    for t in 0..h.tokens() {
        ffn.apply_with(h.column(t), out.column_mut(t), &mut scratch);
    }
    Ok(out)
}

/// `FFN(MHA(H) + H) + MHA(H) + H`.
pub fn block_forward(block: &TransformerBlock, h: &EmbeddingMatrix) -> Result<EmbeddingMatrix> {
    block.validate(h.dim())?;
    let mut y = mha_forward(&block.heads, h)?;
    for (a, b) in y.data.iter_mut().zip(&h.data) {
        *a = b + *a;
    }
    let f = ffn_forward(&block.ffn, &y)?;
    for (a, b) in y.data.iter_mut().zip(&f.data) {
        *a = b + *a;
    }
    Ok(y)
}

/// Transformer size summary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ModelSize {
    /// `L_T · d_embd² · (3m + L_ff)` with the net's maxima.
    pub formula: u64,
    /// Exact number of weight entries (heads, FFN weights and biases).
    pub learnable: u64,
}

/// The compiled network: embedding, blocks and the fixed decoder.
#[derive(Debug)]
pub struct TransformerNet {
    pub input_dim: usize,
    pub token_count: usize,
    pub embed_dim: usize,
    /// `l × D` map from the input to one scalar per token.
    pub input_map: Matrix,
    /// Lifts a token scalar into the embedding; always the first basis vector.
    pub column_lift: Vec<f64>,
    pub positional: EmbeddingMatrix,
    pub blocks: Vec<TransformerBlock>,
    pub output_clip: f64,
    /// Free-form description of the token layout.
    pub layout_note: String,
    plan: OnceLock<Plan>,
}

impl Clone for TransformerNet {
    fn clone(&self) -> Self {
        TransformerNet {
            input_dim: self.input_dim,
            token_count: self.token_count,
            embed_dim: self.embed_dim,
            input_map: self.input_map.clone(),
            column_lift: self.column_lift.clone(),
            positional: self.positional.clone(),
            blocks: self.blocks.clone(),
            output_clip: self.output_clip,
            layout_note: self.layout_note.clone(),
            plan: OnceLock::new(),
        }
    }
}

impl TransformerNet {
    pub fn new(
        input_map: Matrix,
        positional: EmbeddingMatrix,
        blocks: Vec<TransformerBlock>,
        output_clip: f64,
    ) -> Result<Self> {
        let d = positional.dim();
        let mut lift = vec![0.0; d];
        if d > 0 {
            lift[0] = 1.0;
        }
        let net = TransformerNet {
            input_dim: input_map.cols(),
            token_count: positional.tokens(),
            embed_dim: d,
            input_map,
            column_lift: lift,
            positional,
            blocks,
            output_clip,
            layout_note: String::new(),
            plan: OnceLock::new(),
        };
        net.validate()?;
        Ok(net)
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.layout_note = note.into();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.token_count == 0 {
            return Err(Error::Dimension("empty embedding".into()));
        }
        if self.input_map.rows() != self.token_count {
            return Err(Error::Dimension(format!(
                "input map has {} rows for {} tokens",
                self.input_map.rows(),
                self.token_count
            )));
        }
        if self.column_lift.len() != self.embed_dim
            || self.column_lift[0] != 1.0
            || self.column_lift[1..].iter().any(|v| *v != 0.0)
        {
            return Err(Error::Input("column lift must be the first basis vector".into()));
        }
        if !(self.output_clip >= 0.0) || !self.output_clip.is_finite() {
            return Err(Error::Parameter("output clip must be finite and nonnegative".into()));
        }
        if !self.input_map.is_finite() || !self.positional.is_finite() {
            return Err(Error::Input("non-finite embedding weights".into()));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate(self.embed_dim).map_err(|e| Error::Dimension(format!("block {i}: {e}")))?;
            for head in &b.heads {
                if let Some(tag) = &head.interaction {
                    if tag.target >= self.token_count || tag.source >= self.token_count {
                        return Err(Error::Dimension(format!("block {i}: interaction tag outside token range")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    pub fn max_heads(&self) -> usize {
        self.blocks.iter().map(|b| b.heads.len()).max().unwrap_or(0)
    }

    pub fn head_count(&self) -> usize {
        self.blocks.iter().map(|b| b.heads.len()).sum()
    }

    pub fn max_ffn_depth(&self) -> usize {
        self.blocks.iter().map(|b| b.ffn.depth()).max().unwrap_or(0)
    }

    pub fn max_ffn_width(&self) -> usize {
        self.blocks.iter().map(|b| b.ffn.width()).max().unwrap_or(0)
    }

    /// Largest absolute weight anywhere in the net.
    pub fn weight_sup_norm(&self) -> f64 {
        self.blocks
            .iter()
            .fold(self.input_map.max_abs(), |m, b| m.max(b.max_abs()))
    }

    /// Largest cancellation constant used by any interaction head (0 if none).
    pub fn cancellation_scale(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| b.heads.iter())
            .filter_map(|h| h.interaction.as_ref().map(|t| t.cancel))
            .fold(0.0, f64::max)
    }

    /// Comparison tolerance `max(1e-9, 10·C·eps)` for this net.
    pub fn tolerance(&self) -> f64 {
        tolerance_for(self.cancellation_scale())
    }

    pub fn embed(&self, x: &[f64]) -> Result<EmbeddingMatrix> {
        if x.len() != self.input_dim {
            return Err(Error::Dimension(format!("input has length {}, expected {}", x.len(), self.input_dim)));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite input".into()));
        }
        let mut h = self.positional.clone();
        let mut ux = vec![0.0; self.token_count];
        self.input_map.matvec_into(x, &mut ux);
        for (t, s) in ux.iter().enumerate() {
            for (r, e) in self.column_lift.iter().enumerate() {
                if *e != 0.0 {
                    let v = h.get(r, t) + e * s;
                    h.set(r, t, v);
                }
            }
        }
        Ok(h)
    }

    fn decode(&self, h: &EmbeddingMatrix) -> f64 {
        let v = h.get(0, self.token_count - 1);
        v.clamp(-self.output_clip, self.output_clip)
    }

    /// Reference evaluation: every head is evaluated densely.
    pub fn forward_dense(&self, x: &[f64]) -> Result<f64> {
        let mut h = self.embed(x)?;
        for (i, b) in self.blocks.iter().enumerate() {
            h = block_forward(b, &h)?;
            if !h.is_finite() {
                return Err(Error::Overflow { block: i });
            }
        }
        Ok(self.decode(&h))
    }

    /// Final embedding matrix after all blocks (dense path).
    pub fn final_embedding(&self, x: &[f64]) -> Result<EmbeddingMatrix> {
        let mut h = self.embed(x)?;
        for (i, b) in self.blocks.iter().enumerate() {
            h = block_forward(b, &h)?;
            if !h.is_finite() {
                return Err(Error::Overflow { block: i });
            }
        }
        Ok(h)
    }

    fn plan(&self) -> &Plan {
        self.plan.get_or_init(|| Plan::compile(self))
    }

    /// Evaluates the net. Uses the single-pair shortcut for tagged heads
    /// whenever its precondition holds, otherwise the dense path.
    pub fn forward(&self, x: &[f64]) -> Result<f64> {
        let data = self.run_blocks(x, self.blocks.len())?;
        let v = data[(self.token_count - 1) * self.embed_dim];
        Ok(v.clamp(-self.output_clip, self.output_clip))
    }

    /// Embedding matrix after the first `k` blocks, via the same path as
    /// [`TransformerNet::forward`].
    pub fn embedding_after(&self, x: &[f64], k: usize) -> Result<EmbeddingMatrix> {
        let data = self.run_blocks(x, k.min(self.blocks.len()))?;
        Ok(EmbeddingMatrix { d: self.embed_dim, l: self.token_count, data })
    }

    fn run_blocks(&self, x: &[f64], k: usize) -> Result<Vec<f64>> {
        let h = self.embed(x)?;
        let plan = self.plan();
        let mut data = h.data;
        if !plan.usable {
            for (i, b) in self.blocks.iter().take(k).enumerate() {
                let dense = EmbeddingMatrix { d: self.embed_dim, l: self.token_count, data };
                data = block_forward(b, &dense)?.data;
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Overflow { block: i });
                }
            }
            return Ok(data);
        }
        let mut state = PlanState::new(self.token_count);
        let mut scan = Scan::of(&data, &self.positional.data);
        for (i, (block, cb)) in self.blocks.iter().zip(&plan.blocks).take(k).enumerate() {
            if cb.sparse_ok(&scan) {
                plan.run_block(cb, block, &mut data, &mut state);
            } else {
                let dense = EmbeddingMatrix { d: self.embed_dim, l: self.token_count, data };
                data = block_forward(block, &dense)?.data;
            }
            scan = Scan::of(&data, &self.positional.data);
            if !scan.finite {
                return Err(Error::Overflow { block: i });
            }
        }
        Ok(data)
    }

    /// Evaluates many inputs in parallel; order of results matches `xs`.
    pub fn forward_many(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        use rayon::prelude::*;
        self.plan();
        xs.par_iter().map(|x| self.forward(x)).collect()
    }

    pub fn model_size(&self) -> ModelSize {
        model_size(self)
    }

    pub fn to_json(&self) -> Result<String> {
        crate::report::to_json_string(&NetDoc::from(self), false)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: NetDoc = serde_json::from_str(s)?;
        doc.into_net()
    }
}

pub fn tolerance_for(cancel: f64) -> f64 {
    (10.0 * cancel * f64::EPSILON).max(1e-9)
}

/// `L_T · d_embd² · (3·m_max + L_ff_max)` plus the exact entry count.
pub fn model_size(net: &TransformerNet) -> ModelSize {
    let lt = net.depth() as u64;
    let d = net.embed_dim as u64;
    let m = net.max_heads() as u64;
    let lff = net.max_ffn_depth() as u64;
    let learnable = net
        .blocks
        .iter()
        .map(|b| (b.heads.len() * 3 * net.embed_dim * net.embed_dim + b.ffn.param_count()) as u64)
        .sum();
    ModelSize { formula: lt * d * d * (3 * m + lff), learnable }
}

/// Serialized form of a net.
#[derive(Serialize, Deserialize)]
struct NetDoc {
    d_embd: usize,
    l: usize,
    #[serde(rename = "D")]
    input_dim: usize,
    #[serde(rename = "R")]
    output_clip: f64,
    #[serde(rename = "U")]
    input_map: Matrix,
    positional: Vec<Vec<f64>>,
    blocks: Vec<BlockDoc>,
    #[serde(default)]
    layout: String,
}

#[derive(Serialize, Deserialize)]
struct BlockDoc {
    heads: Vec<AttentionHead>,
    ffn: FeedForward,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<String>,
}

impl From<&TransformerNet> for NetDoc {
    fn from(net: &TransformerNet) -> Self {
        NetDoc {
            d_embd: net.embed_dim,
            l: net.token_count,
            input_dim: net.input_dim,
            output_clip: net.output_clip,
            input_map: net.input_map.clone(),
            positional: net.positional.to_rows(),
            blocks: net
                .blocks
                .iter()
                .map(|b| BlockDoc {
                    heads: b.heads.clone(),
                    ffn: b.ffn.clone(),
                    provenance: b.provenance.as_ref().map(|p| p.label.clone()),
                })
                .collect(),
            layout: net.layout_note.clone(),
        }
    }
}

impl NetDoc {
    fn into_net(self) -> Result<TransformerNet> {
        let positional = EmbeddingMatrix::from_rows(&self.positional)?;
        if positional.dim() != self.d_embd || positional.tokens() != self.l {
            return Err(Error::Dimension(format!(
                "positional is {}x{}, header says {}x{}",
                positional.dim(),
                positional.tokens(),
                self.d_embd,
                self.l
            )));
        }
        if self.input_map.cols() != self.input_dim {
            return Err(Error::Dimension("input map width differs from D".into()));
        }
        let blocks = self
            .blocks
            .into_iter()
            .map(|b| {
                let mut block = TransformerBlock::new(b.heads, b.ffn);
                block.provenance = b.provenance.map(|label| Provenance {
                    label,
                    tokens: self.l,
                    ffn: FfnRecipe::Empty,
                });
                block
            })
            .collect();
        for b in &blocks {
            let b: &TransformerBlock = b;
            for h in &b.heads {
                AttentionHead::new(h.q.clone(), h.k.clone(), h.v.clone())?;
            }
        }
        Ok(TransformerNet::new(self.input_map, positional, blocks, self.output_clip)?.with_note(self.layout))
    }
}

// ---------------------------------------------------------------------------
// Single-pair evaluation plan.

#[derive(Clone, Copy)]
struct Entry {
    row: u8,
    col: u8,
    val: f64,
}

struct PairHead {
    target: u32,
    source: u32,
    start: u32,
    nq: u8,
    nk: u8,
    nv: u8,
    /// Rows of `Qh_target` and `Kh_source` that read only positional rows,
    /// evaluated once in the runtime's summation order; zero elsewhere.
    q0: [f64; 5],
    k0: [f64; 5],
}

enum PlannedHead {
    Pair(PairHead),
    Dense(usize),
}

struct PlannedBlock {
    heads: Vec<PlannedHead>,
    has_dense: bool,
    bound: f64,
    free_ffn: bool,
    ffn_empty: bool,
    /// FFN output on a token with zero data rows (valid when `free_ffn`).
    zero_delta: [f64; 5],
    zero_delta_is_zero: bool,
}

struct Plan {
    usable: bool,
    entries: Vec<Entry>,
    blocks: Vec<PlannedBlock>,
}

impl std::fmt::Debug for Plan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Plan").field("usable", &self.usable).field("blocks", &self.blocks.len()).finish()
    }
}

struct PlanState {
    mha: Vec<f64>,
    touched: Vec<u32>,
    mark: Vec<bool>,
    scratch: FfnScratch,
}

impl PlanState {
    fn new(l: usize) -> Self {
        PlanState { mha: vec![0.0; l * 5], touched: Vec::new(), mark: vec![false; l], scratch: FfnScratch::default() }
    }
}

fn push_sparse(m: &Matrix, entries: &mut Vec<Entry>) -> u8 {
    let mut n = 0u8;
    for r in 0..m.rows() {
        for c in 0..m.cols() {
            let v = m.get(r, c);
            if v != 0.0 {
                entries.push(Entry { row: r as u8, col: c as u8, val: v });
                n += 1;
            }
        }
    }
    n
}

/// Like [`push_sparse`] for a 5×5 map, but rows that read only the
/// positional rows 3–5 are folded into constants using `pos`.
fn push_folded(m: &Matrix, pos: &[f64], entries: &mut Vec<Entry>) -> (u8, [f64; 5]) {
    let mut n = 0u8;
    let mut fixed = [0.0; 5];
    for r in 0..5 {
        let row = m.row(r);
        if row[0] == 0.0 && row[1] == 0.0 {
            let mut acc = 0.0;
            for c in 2..5 {
                if row[c] != 0.0 {
                    acc += row[c] * pos[c];
                }
            }
            fixed[r] = acc;
        } else {
            for (c, v) in row.iter().enumerate() {
                if *v != 0.0 {
                    entries.push(Entry { row: r as u8, col: c as u8, val: *v });
                    n += 1;
                }
            }
        }
    }
    (n, fixed)
}

impl Plan {
    fn compile(net: &TransformerNet) -> Plan {
        if net.embed_dim != 5 {
            return Plan { usable: false, entries: Vec::new(), blocks: Vec::new() };
        }
        let mut entries = Vec::new();
        let mut blocks = Vec::with_capacity(net.blocks.len());
        for b in &net.blocks {
            let mut heads = Vec::with_capacity(b.heads.len());
            let mut has_dense = false;
            let mut bound = f64::INFINITY;
            for (j, h) in b.heads.iter().enumerate() {
                match &h.interaction {
                    Some(tag) => {
                        let start = entries.len() as u32;
                        let pos = &net.positional.data;
                        let (nq, q0) = push_folded(&h.q, &pos[tag.target * 5..tag.target * 5 + 5], &mut entries);
                        let (nk, k0) = push_folded(&h.k, &pos[tag.source * 5..tag.source * 5 + 5], &mut entries);
                        let nv = push_sparse(&h.v, &mut entries);
                        bound = bound.min(tag.bound.max(1.0));
                        heads.push(PlannedHead::Pair(PairHead {
                            target: tag.target as u32,
                            source: tag.source as u32,
                            start,
                            nq,
                            nk,
                            nv,
                            q0,
                            k0,
                        }));
                    }
                    None => {
                        has_dense = true;
                        heads.push(PlannedHead::Dense(j));
                    }
                }
            }
            let free_ffn = b.ffn.interaction_free() && b.ffn.depth() > 0;
            let mut zero_delta = [0.0; 5];
            if free_ffn {
                b.ffn.apply(&[0.0, 0.0, 0.0, 0.0, 1.0], &mut zero_delta);
            }
            blocks.push(PlannedBlock {
                heads,
                has_dense,
                bound,
                free_ffn,
                ffn_empty: b.ffn.depth() == 0,
                zero_delta,
                zero_delta_is_zero: zero_delta.iter().all(|v| *v == 0.0),
            });
        }
        Plan { usable: true, entries, blocks }
    }

    fn run_block(&self, cb: &PlannedBlock, block: &TransformerBlock, data: &mut [f64], st: &mut PlanState) {
        let l = data.len() / 5;
        let all = cb.has_dense;
        if all {
            let h = EmbeddingMatrix { d: 5, l, data: data.to_vec() };
            st.mha.iter_mut().for_each(|v| *v = 0.0);
            for ph in &cb.heads {
                match ph {
                    PlannedHead::Dense(j) => {
                        let a = attention_forward(&block.heads[*j], &h).expect("validated shapes");
                        for (m, v) in st.mha.iter_mut().zip(&a.data) {
                            *m += v;
                        }
                    }
                    PlannedHead::Pair(p) => self.pair_contrib(p, data, &mut st.mha),
                }
            }
        } else {
            for ph in &cb.heads {
                if let PlannedHead::Pair(p) = ph {
                    let t = p.target as usize;
                    if !st.mark[t] {
                        st.mark[t] = true;
                        st.touched.push(p.target);
                    }
                    self.pair_contrib(p, data, &mut st.mha);
                }
            }
        }
        // Y = H + MHA(H), in place.
        if all {
            for (a, m) in data.iter_mut().zip(&st.mha) {
                *a += m;
            }
        } else {
            for &t in &st.touched {
                let t = t as usize;
                for r in 0..5 {
                    data[t * 5 + r] += st.mha[t * 5 + r];
                }
            }
        }
        // Z = FFN(Y) + Y.
        if !cb.ffn_empty {
            let mut out = [0.0; 5];
            for t in 0..l {
                let y = &mut data[t * 5..(t + 1) * 5];
                if cb.free_ffn && y[0] == 0.0 && y[1] == 0.0 && y[4] == 1.0 {
                    if cb.zero_delta_is_zero {
                        continue;
                    }
                    for (a, f) in y.iter_mut().zip(&cb.zero_delta) {
                        *a += f;
                    }
                } else {
                    block.ffn.apply_with(y, &mut out, &mut st.scratch);
                    for (a, f) in y.iter_mut().zip(&out) {
                        *a += f;
                    }
                }
            }
        }
        if all {
            st.mha.iter_mut().for_each(|v| *v = 0.0);
        } else {
            for &t in &st.touched {
                let t = t as usize;
                st.mha[t * 5..(t + 1) * 5].iter_mut().for_each(|v| *v = 0.0);
                st.mark[t] = false;
            }
            st.touched.clear();
        }
    }

    #[inline]
    fn pair_contrib(&self, p: &PairHead, data: &[f64], mha: &mut [f64]) {
        let t1 = p.target as usize;
        let t2 = p.source as usize;
        let ht = &data[t1 * 5..t1 * 5 + 5];
        let hs = &data[t2 * 5..t2 * 5 + 5];
        let s = p.start as usize;
        let (qe, rest) = self.entries[s..s + p.nq as usize + p.nk as usize + p.nv as usize].split_at(p.nq as usize);
        let (ke, ve) = rest.split_at(p.nk as usize);
        let mut q = p.q0;
        let mut k = p.k0;
        let mut v = [0.0; 5];
        for e in qe {
            q[e.row as usize] += e.val * ht[e.col as usize];
        }
        for e in ke {
            k[e.row as usize] += e.val * hs[e.col as usize];
        }
        let score = dot(&q, &k);
        if score > 0.0 {
            for e in ve {
                v[e.row as usize] += e.val * hs[e.col as usize];
            }
            let m = &mut mha[t1 * 5..t1 * 5 + 5];
            for (o, x) in m.iter_mut().zip(&v) {
                *o += score * x;
            }
        }
    }
}

/// One pass over the embedding between blocks.
struct Scan {
    finite: bool,
    /// Largest |entry| of the data rows.
    max_data: f64,
    /// Rows 3–5 equal the positional rows exactly.
    intact: bool,
}

impl Scan {
    fn of(data: &[f64], positional: &[f64]) -> Scan {
        let mut scan = Scan { finite: true, max_data: 0.0, intact: true };
        for (h, p) in data.chunks_exact(5).zip(positional.chunks_exact(5)) {
            scan.finite &= h.iter().all(|v| v.is_finite());
            scan.max_data = scan.max_data.max(h[0].abs()).max(h[1].abs());
            scan.intact &= h[2] == p[2] && h[3] == p[3] && h[4] == p[4];
        }
        scan
    }
}

impl PlannedBlock {
    /// The single-pair shortcut is valid when every token keeps its
    /// positional rows and data rows stay inside the tagged heads' bound.
    fn sparse_ok(&self, scan: &Scan) -> bool {
        if self.heads.iter().all(|h| matches!(h, PlannedHead::Dense(_))) {
            return true;
        }
        // The cancellation gap dwarfs rounding noise above the analytic bound.
        scan.intact && scan.max_data <= self.bound * (1.0 + 1e-6)
    }
}
