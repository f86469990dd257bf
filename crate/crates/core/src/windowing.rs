//! Token-grid bookkeeping: window partitioning, cyclic shifts, reference
//! patch embedding, and positional encodings.
//!
//! Grids are stored as `[height*width, dim]` row-major token tensors. All
//! rearrangements are expressed as row-index permutations so that the same
//! index tables drive both the plain functions here and the differentiable
//! gathers in the attention layers.

use std::rc::Rc;

use crate::data::image::Image;
use crate::error::{ensure_arg, Result};
use crate::numerics::{Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Lr,
    Ref,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid<T = f64> {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub tokens: Tensor<T>,
    pub stream: Stream,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn new(height: usize, width: usize, tokens: Tensor<T>, stream: Stream) -> Result<Self> {
        ensure_arg!(
            tokens.ndim() == 2 && tokens.rows() == height * width,
            "tokens {:?} do not form a {height}x{width} grid",
            tokens.shape()
        );
        Ok(Self {
            height,
            width,
            dim: tokens.cols(),
            tokens,
            stream,
        })
    }
}

/// Windows of a grid: `windows` has shape `[num_windows, k*k, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowSet<T = f64> {
    pub windows: Tensor<T>,
    pub k: usize,
    /// Cyclic offset applied before tiling; zero for the local partition.
    pub shift: usize,
    pub origin_shape: (usize, usize),
    pub stream: Stream,
}

impl<T> WindowSet<T> {
    pub fn shifted(&self) -> bool {
        self.shift != 0
    }

    pub fn num_windows(&self) -> usize {
        (self.origin_shape.0 / self.k) * (self.origin_shape.1 / self.k)
    }
}

/// Shift used by the shifted partition for window size `k`.
pub fn default_shift(k: usize) -> usize {
    k / 2
}

/// Row `r` of the windowed layout holds grid token `index[r]`. Windows are
/// row-major over the grid, tokens row-major within a window, and the grid
/// is first rolled by `(-shift, -shift)`.
pub fn partition_index(height: usize, width: usize, k: usize, shift: usize) -> Result<Vec<usize>> {
    ensure_arg!(k > 0, "window size must be positive");
    ensure_arg!(
        height % k == 0 && width % k == 0,
        "grid {height}x{width} is not divisible by window size {k}"
    );
    let mut idx = Vec::with_capacity(height * width);
    for wy in 0..height / k {
        for wx in 0..width / k {
            for i in 0..k {
                for j in 0..k {
                    let y = (wy * k + i + shift) % height;
                    let x = (wx * k + j + shift) % width;
                    idx.push(y * width + x);
                }
            }
        }
    }
    Ok(idx)
}

pub fn invert_permutation(index: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; index.len()];
    for (r, &i) in index.iter().enumerate() {
        inv[i] = r;
    }
    inv
}

fn gather_rows<T: Scalar>(t: &Tensor<T>, index: &[usize]) -> Tensor<T> {
    let c = t.cols();
    let mut data = Vec::with_capacity(index.len() * c);
    for &i in index {
        data.extend_from_slice(t.row(i));
    }
    Tensor::from_parts(vec![index.len(), c], data)
}

fn partition_shifted<T: Scalar>(g: &TokenGrid<T>, k: usize, shift: usize) -> Result<WindowSet<T>> {
    let idx = partition_index(g.height, g.width, k, shift)?;
    let windows = gather_rows(&g.tokens, &idx).reshape([g.height * g.width / (k * k), k * k, g.dim])?;
    Ok(WindowSet {
        windows,
        k,
        shift,
        origin_shape: (g.height, g.width),
        stream: g.stream,
    })
}

/// Local (unshifted) tiling into `k×k` windows.
pub fn partition_windows<T: Scalar>(g: &TokenGrid<T>, k: usize) -> Result<WindowSet<T>> {
    partition_shifted(g, k, 0)
}

/// Shifted tiling: roll by `(-⌊k/2⌋, -⌊k/2⌋)`, then tile.
pub fn partition_shifted_windows<T: Scalar>(g: &TokenGrid<T>, k: usize) -> Result<WindowSet<T>> {
    partition_shifted(g, k, default_shift(k))
}

/// Inverse of the partition that produced `ws`, undoing its shift too.
pub fn reverse_windows<T: Scalar>(ws: &WindowSet<T>) -> Result<TokenGrid<T>> {
    let (h, w) = ws.origin_shape;
    let idx = partition_index(h, w, ws.k, ws.shift)?;
    let dim = ws.windows.cols();
    let flat = ws.windows.clone().reshape([h * w, dim])?;
    let tokens = gather_rows(&flat, &invert_permutation(&idx));
    TokenGrid::new(h, w, tokens, ws.stream)
}

/// Rolls the grid by `(-s, -s)` with wraparound: the output token at
/// `(y, x)` is the input token at `((y+s) mod H, (x+s) mod W)`.
pub fn cyclic_shift<T: Scalar>(g: &TokenGrid<T>, s: isize) -> TokenGrid<T> {
    let (h, w) = (g.height as isize, g.width as isize);
    let mut idx = Vec::with_capacity(g.height * g.width);
    for y in 0..h {
        for x in 0..w {
            let sy = (y + s).rem_euclid(h);
            let sx = (x + s).rem_euclid(w);
            idx.push((sy * w + sx) as usize);
        }
    }
    TokenGrid {
        tokens: gather_rows(&g.tokens, &idx),
        ..g.clone()
    }
}

/// Flat position in the relative-position table for every `(i, j)` token
/// pair of a `k×k` window: `(dy + k − 1)·(2k − 1) + (dx + k − 1)`.
pub fn relative_position_index(k: usize) -> Vec<usize> {
    let l = k * k;
    let span = 2 * k - 1;
    let mut idx = Vec::with_capacity(l * l);
    for i in 0..l {
        let (yi, xi) = (i / k, i % k);
        for j in 0..l {
            let (yj, xj) = (j / k, j % k);
            let dy = yi + k - 1 - yj;
            let dx = xi + k - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Number of rows a relative-position table needs for window size `k`.
pub fn relative_table_rows(k: usize) -> usize {
    (2 * k - 1) * (2 * k - 1)
}

fn bias_gather_index(k: usize, heads: usize) -> Vec<usize> {
    let rel = relative_position_index(k);
    let mut idx = Vec::with_capacity(heads * rel.len());
    for h in 0..heads {
        idx.extend(rel.iter().map(|&r| r * heads + h));
    }
    idx
}

/// Expands a `[(2k−1)², heads]` table into a `[heads, k², k²]` logit bias.
pub fn relative_position_bias<T: Scalar>(k: usize, table: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    ensure_arg!(
        table.shape() == [relative_table_rows(k), heads],
        "relative position table {:?} does not match window {k} with {heads} heads",
        table.shape()
    );
    let l = k * k;
    let data = bias_gather_index(k, heads)
        .into_iter()
        .map(|i| table.data()[i])
        .collect();
    Ok(Tensor::from_parts(vec![heads, l, l], data))
}

/// Differentiable form of [`relative_position_bias`].
pub fn relative_position_bias_var<T: Scalar>(
    tape: &mut Tape<T>,
    k: usize,
    table: Var,
    heads: usize,
) -> Result<Var> {
    ensure_arg!(
        tape.shape(table) == [relative_table_rows(k), heads],
        "relative position table {:?} does not match window {k} with {heads} heads",
        tape.shape(table)
    );
    let l = k * k;
    let idx: Rc<[usize]> = bias_gather_index(k, heads).into();
    tape.gather_elems(table, idx, &[heads, l, l])
}

/// Fixed sine/cosine encoding of absolute grid position, `[h*w, c]`.
///
/// The first `c/2` channels encode the row, the rest the column. Within each
/// half, channel pair `(2i, 2i+1)` carries `sin`/`cos` of `pos·10000^(−2i/half)`.
pub fn sinusoidal_encoding<T: Scalar>(h: usize, w: usize, c: usize) -> Result<Tensor<T>> {
    ensure_arg!(c > 0 && c % 2 == 0, "sinusoidal encoding needs an even channel count, got {c}");
    let half = c / 2;
    let value = |pos: usize, ch: usize| {
        let i = ch / 2;
        let freq = 10000f64.powf(-((2 * i) as f64) / half as f64);
        let a = pos as f64 * freq;
        if ch % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    };
    let mut data = Vec::with_capacity(h * w * c);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..half {
                data.push(T::lit(value(y, ch)));
            }
            for ch in 0..half {
                data.push(T::lit(value(x, ch)));
            }
        }
    }
    Ok(Tensor::from_parts(vec![h * w, c], data))
}

/// Token grid on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GridVar {
    pub var: Var,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub stream: Stream,
}

impl GridVar {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn with_var(self, var: Var) -> Self {
        Self { var, ..self }
    }

    pub fn same_extent(&self, other: &GridVar) -> bool {
        self.height == other.height && self.width == other.width && self.dim == other.dim
    }
}

/// Embeds every pixel of an `M×M` RGB crop into a `dim`-channel token
/// (`pixel·W + b`, with `W: [3, dim]`), producing a reference-stream grid.
pub fn patch_embed<T: Scalar>(
    tape: &mut Tape<T>,
    crop: &Image,
    extent: usize,
    weight: Var,
    bias: Var,
) -> Result<GridVar> {
    ensure_arg!(
        crop.width == extent && crop.height == extent,
        "reference crop {}x{} does not match stage extent {extent}",
        crop.width,
        crop.height
    );
    ensure_arg!(crop.channels == 3, "reference crop must be RGB");
    let pixels = tape.constant(crop.to_tokens());
    let var = tape.linear(pixels, weight, Some(bias))?;
    Ok(GridVar {
        var,
        height: extent,
        width: extent,
        dim: tape.shape(var)[1],
        stream: Stream::Ref,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(h: usize, w: usize, c: usize) -> TokenGrid<f64> {
        TokenGrid::new(h, w, Tensor::from_fn([h * w, c], |i| i as f64), Stream::Lr).unwrap()
    }

    #[test]
    fn partition_counts() {
        let ws = partition_windows(&grid(40, 40, 2), 8).unwrap();
        assert_eq!(ws.windows.shape(), &[25, 64, 2]);
        assert_eq!(ws.num_windows(), 25);
    }

    #[test]
    fn single_window_is_flattened_grid() {
        let g = grid(8, 8, 3);
        let ws = partition_windows(&g, 8).unwrap();
        assert_eq!(ws.windows.data(), g.tokens.data());
    }

    #[test]
    fn indivisible_extent_is_rejected() {
        assert!(partition_windows(&grid(12, 16, 1), 8).is_err());
    }

    #[test]
    fn shift_identities() {
        let g = grid(8, 8, 2);
        assert_eq!(cyclic_shift(&g, 0), g);
        assert_eq!(cyclic_shift(&g, 8), g);
        assert_eq!(cyclic_shift(&cyclic_shift(&g, 3), -3), g);
    }

    #[test]
    fn shifted_partition_equals_roll_then_tile() {
        let g = grid(16, 16, 2);
        let a = partition_shifted_windows(&g, 8).unwrap();
        let b = partition_windows(&cyclic_shift(&g, 4), 8).unwrap();
        assert_eq!(a.windows, b.windows);
        assert_eq!(reverse_windows(&a).unwrap(), g);
    }

    #[test]
    fn relative_bias_distinct_values() {
        let table = Tensor::from_fn([9, 1], |i| i as f64);
        let bias = relative_position_bias(2, &table, 1).unwrap();
        let mut vals: Vec<i64> = bias.data().iter().map(|&v| v as i64).collect();
        vals.sort_unstable();
        vals.dedup();
        assert!(vals.len() <= 9);
        // the diagonal is the zero displacement entry
        for i in 0..4 {
            assert_eq!(bias.data()[i * 4 + i], 4.0);
        }
    }

    #[test]
    fn sinusoidal_examples() {
        let e = sinusoidal_encoding::<f64>(5, 4, 8).unwrap();
        for ch in 0..8 {
            let expect = if ch % 2 == 0 { 0.0 } else { 1.0 };
            assert_eq!(e.data()[ch], expect);
        }
        for r in 0..5 {
            assert_eq!(e.data()[(r * 4) * 8], (r as f64).sin());
        }
        assert_eq!(e, sinusoidal_encoding::<f64>(5, 4, 8).unwrap());
        assert!(sinusoidal_encoding::<f64>(2, 2, 3).is_err());
    }
}
