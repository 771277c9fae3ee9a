//! Grid interpolant on `[0,1]^d` as a transformer.
//!
//! Token layout (1-based): inputs `1..=d`, then the precompute slots
//! `s(i,j)` row-major in `(i, j)`, then the patch slots `p(n,i)` row-major in
//! `(n, i)` with `i ≤ d_pad`. The output is read from the last token.

use crate::blocks::{ce, e, free, head_from_terms, make_replace_ffn, psi_decode_ffn, structured_block, StructuredLayout};
use crate::error::{Error, Result};
use crate::runtime::{AttentionHead, FfnRecipe, Matrix, TransformerNet};
use crate::synthesis::grid::{grid_coord, grid_size, Budget, GridApprox};

/// Smallest power of two `≥ d`.
pub fn padded_dim(d: usize) -> usize {
    d.max(1).next_power_of_two()
}

/// Number of product levels, `log₂ d_pad`.
pub fn product_levels(d: usize) -> usize {
    padded_dim(d).trailing_zeros() as usize
}

/// Where one cube interpolant lives inside a larger layout.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeRegions {
    pub d: usize,
    pub n: usize,
    /// Token holding coordinate `i` (1-based tokens, index `i−1`).
    pub inputs: Vec<usize>,
    /// 0-based offset of the first precompute slot.
    pub s_base: usize,
    /// 0-based offset of the first patch slot.
    pub p_base: usize,
}

impl CubeRegions {
    pub fn patches(&self) -> usize {
        grid_size(self.n, self.d) as usize
    }

    pub fn d_pad(&self) -> usize {
        padded_dim(self.d)
    }

    /// Precompute slot for coordinate `i` and grid index `j` (both 1-based).
    pub fn s(&self, i: usize, j: usize) -> usize {
        self.s_base + (i - 1) * self.n + j
    }

    /// Patch slot `i` of patch `n` (both 1-based).
    pub fn p(&self, n: usize, i: usize) -> usize {
        self.p_base + (n - 1) * self.d_pad() + i
    }

    pub fn s_len(&self) -> usize {
        self.n * self.d
    }

    pub fn p_len(&self) -> usize {
        self.patches() * self.d_pad()
    }

    fn multi_index(&self, n: usize) -> Vec<usize> {
        let mut flat = n - 1;
        let mut idx = vec![0; self.d];
        for i in (0..self.d).rev() {
            idx[i] = flat % self.n;
            flat /= self.n;
        }
        idx
    }
}

/// Writes `σ(x^i − g_j + 1)` into row 2 of every precompute slot.
pub(crate) fn s_heads(layout: &StructuredLayout, reg: &CubeRegions) -> Result<Vec<AttentionHead>> {
    let mut heads = Vec::with_capacity(reg.s_len());
    for i in 1..=reg.d {
        for j in 1..=reg.n {
            let shift = 1.0 - grid_coord(j - 1, reg.n);
            heads.push(head_from_terms(
                layout,
                reg.s(i, j),
                reg.inputs[i - 1],
                2,
                false,
                &[(e(5), e(1)), (e(5), ce(shift, 5))],
            )?);
        }
    }
    Ok(heads)
}

/// Copies `s(i, n_i)` into patch slot `(n, i)`; padding slots get 1.
pub(crate) fn copy_heads(layout: &StructuredLayout, reg: &CubeRegions) -> Result<Vec<AttentionHead>> {
    let mut heads = Vec::with_capacity(reg.p_len());
    for n in 1..=reg.patches() {
        let idx = reg.multi_index(n);
        for i in 1..=reg.d_pad() {
            let t = reg.p(n, i);
            let h = if i <= reg.d {
                head_from_terms(layout, t, reg.s(i, idx[i - 1] + 1), 1, false, &[(e(5), e(1))])?
            } else {
                head_from_terms(layout, t, t, 1, false, &[(e(5), e(5))])?
            };
            heads.push(h);
        }
    }
    Ok(heads)
}

/// One level of the pairwise product tree: slot `a` becomes `p_a·p_b` and
/// slot `b = a + 2^{k−1}` is cleared.
pub(crate) fn product_heads(layout: &StructuredLayout, reg: &CubeRegions, level: usize) -> Result<Vec<AttentionHead>> {
    let stride = 1usize << level;
    let half = stride / 2;
    let pairs = reg.d_pad() / stride;
    let mut heads = Vec::with_capacity(reg.patches() * pairs * 3);
    for n in 1..=reg.patches() {
        for j in 0..pairs {
            let a = reg.p(n, j * stride + 1);
            let b = reg.p(n, j * stride + 1 + half);
            heads.push(head_from_terms(layout, a, b, 1, false, &[(e(1), e(1))])?);
            heads.push(head_from_terms(layout, a, a, 1, true, &[(e(5), e(1))])?);
            heads.push(head_from_terms(layout, b, b, 1, true, &[(e(5), e(1))])?);
        }
    }
    Ok(heads)
}

/// Replaces the patch weight `φ_n ≥ 0` in slot `(n,1)` by `f_n φ_n`.
pub(crate) fn multiply_heads(layout: &StructuredLayout, reg: &CubeRegions, values: &[f64]) -> Result<Vec<AttentionHead>> {
    let mut heads = Vec::with_capacity(3 * values.len());
    for (k, f) in values.iter().enumerate() {
        let t = reg.p(k + 1, 1);
        heads.push(head_from_terms(layout, t, t, 1, true, &[(e(5), e(1))])?);
        if *f != 0.0 {
            heads.push(head_from_terms(layout, t, t, 1, false, &[(ce(*f, 1), e(5))])?);
            heads.push(head_from_terms(layout, t, t, 1, true, &[(ce(-*f, 1), e(5))])?);
        }
    }
    Ok(heads)
}

/// Adds `Σ_n h¹_{p(n,1)}` (signed) into `out_row` of token `target`.
pub(crate) fn sum_heads(
    layout: &StructuredLayout,
    reg: &CubeRegions,
    values: &[f64],
    target: usize,
    out_row: usize,
) -> Result<Vec<AttentionHead>> {
    let mut heads = Vec::with_capacity(2 * values.len());
    for (k, f) in values.iter().enumerate() {
        if *f == 0.0 {
            continue;
        }
        let src = reg.p(k + 1, 1);
        heads.push(head_from_terms(layout, target, src, out_row, false, &[(e(5), e(1))])?);
        heads.push(head_from_terms(layout, target, src, out_row, true, &[(e(5), ce(-1.0, 1))])?);
    }
    Ok(heads)
}

/// Token count `d + N·d + N^d·d_pad`.
pub fn cube_token_count(d: usize, n: usize) -> u128 {
    d as u128 + (n * d) as u128 + grid_size(n, d).saturating_mul(padded_dim(d) as u128)
}

/// Compiles the grid interpolant into a net whose output equals
/// [`crate::synthesis::pou_oracle`] on `[0,1]^d` up to cancellation rounding.
///
/// Blocks: precompute (heads plus ψ decoder), copy, `log₂ d_pad` product
/// levels, multiply by `f_n`, and the final sum into the output token.
pub fn synthesize_cube_approximator(grid: &GridApprox, sup_bound: f64, budget: &Budget) -> Result<TransformerNet> {
    let (d, n) = (grid.d, grid.n);
    if n < 2 {
        return Err(Error::Parameter("grid resolution must be at least 2".into()));
    }
    let l = cube_token_count(d, n);
    budget.check_tokens(l)?;
    let l = l as usize;
    let reg = CubeRegions { d, n, inputs: (1..=d).collect(), s_base: d, p_base: d + n * d };
    let fmax = grid.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let clip = sup_bound.max(fmax);

    let unit = StructuredLayout::new(l, 1.0)?;
    let mut blocks = Vec::with_capacity(product_levels(d) + 4);
    blocks.push(structured_block(
        s_heads(&unit, &reg)?,
        free("psi-decode", psi_decode_ffn(n)),
        &unit,
        "precompute",
    )?);
    blocks.push(structured_block(copy_heads(&unit, &reg)?, FfnRecipe::Empty, &unit, "copy")?);
    for level in 1..=product_levels(d) {
        blocks.push(structured_block(product_heads(&unit, &reg, level)?, FfnRecipe::Empty, &unit, "product")?);
    }
    blocks.push(structured_block(multiply_heads(&unit, &reg, &grid.values)?, FfnRecipe::Empty, &unit, "multiply")?);
    let out = unit.with_bound(fmax.max(1.0));
    blocks.push(structured_block(
        sum_heads(&out, &reg, &grid.values, l, 2)?,
        free("replace", make_replace_ffn()),
        &out,
        "sum",
    )?);

    let mut input_map = Matrix::zeros(l, d);
    for i in 0..d {
        input_map.set(i, i, 1.0);
    }
    let net = TransformerNet::new(input_map, unit.positional(), blocks, clip)?.with_note(format!(
        "cube d={d} N={n} d_pad={}: inputs [1,{d}] | s(i,j) [{},{}] row-major | p(n,i) [{},{l}] row-major; output token {l}",
        reg.d_pad(),
        d + 1,
        d + n * d,
        d + n * d + 1
    ));
    Ok(net)
}
