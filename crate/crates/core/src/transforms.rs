//! Exactly invertible spatial and frequency transforms.
//!
//! Everything here is a pure function on [`Tensor`]s. The autodiff tape wraps
//! these as primitive ops whose adjoints are the matching inverses (all the
//! linear transforms below are orthonormal or permutations).

use std::f64::consts::PI;

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Orthonormal DCT-II matrix, row `k` holds basis function `k`.
pub fn dct_matrix<T: Scalar>(n: usize) -> Vec<T> {
    let mut m = Vec::with_capacity(n * n);
    let nf = n as f64;
    for k in 0..n {
        let alpha = if k == 0 { (1.0 / nf).sqrt() } else { (2.0 / nf).sqrt() };
        for i in 0..n {
            m.push(T::of(
                alpha * (PI * (2.0 * i as f64 + 1.0) * k as f64 / (2.0 * nf)).cos(),
            ));
        }
    }
    m
}

/// Applies `A · plane · Bᵀ` (forward) or `Aᵀ · plane · B` (inverse) to every
/// `H×W` plane, with `A` the H-point and `B` the W-point DCT matrix.
fn separable_dct<T: Scalar>(x: &Tensor<T>, inverse: bool) -> Tensor<T> {
    let [_, _, h, w] = x.shape();
    let dh = dct_matrix::<T>(h);
    let dw = dct_matrix::<T>(w);
    let coef = |m: &[T], n: usize, r: usize, c: usize| {
        if inverse {
            m[c * n + r]
        } else {
            m[r * n + c]
        }
    };
    let mut out = Tensor::zeros(x.shape());
    let mut tmp = vec![T::zero(); h * w];
    let plane = h * w;
    for (src, dst) in x
        .data()
        .chunks_exact(plane)
        .zip(out.data_mut().chunks_exact_mut(plane))
    {
        // rows: tmp[y][k] = Σ_x src[y][x] · B(k, x)
        for y in 0..h {
            for k in 0..w {
                let mut acc = T::zero();
                for i in 0..w {
                    acc += src[y * w + i] * coef(&dw, w, k, i);
                }
                tmp[y * w + k] = acc;
            }
        }
        // columns: dst[k][x] = Σ_y A(k, y) · tmp[y][x]
        for k in 0..h {
            for xcol in 0..w {
                let mut acc = T::zero();
                for i in 0..h {
                    acc += coef(&dh, h, k, i) * tmp[i * w + xcol];
                }
                dst[k * w + xcol] = acc;
            }
        }
    }
    out
}

/// Orthonormal 2-D DCT-II over the two spatial axes of every channel.
pub fn dct2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    separable_dct(x, false)
}

/// Inverse of [`dct2`].
pub fn idct2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    separable_dct(x, true)
}

/// Toroidal roll: `out[h][w] = x[(h - dy) mod H][(w - dx) mod W]`.
pub fn cyclic_shift<T: Scalar>(x: &Tensor<T>, dy: isize, dx: isize) -> Tensor<T> {
    let [_, _, h, w] = x.shape();
    if h == 0 || w == 0 {
        return x.clone();
    }
    let sy = dy.rem_euclid(h as isize) as usize;
    let sx = dx.rem_euclid(w as isize) as usize;
    if sy == 0 && sx == 0 {
        return x.clone();
    }
    let mut out = Tensor::zeros(x.shape());
    let plane = h * w;
    for (src, dst) in x
        .data()
        .chunks_exact(plane)
        .zip(out.data_mut().chunks_exact_mut(plane))
    {
        for y in 0..h {
            let ty = (y + sy) % h;
            for xx in 0..w {
                dst[ty * w + (xx + sx) % w] = src[y * w + xx];
            }
        }
    }
    out
}

/// Inverse of [`cyclic_shift`].
pub fn cyclic_unshift<T: Scalar>(x: &Tensor<T>, dy: isize, dx: isize) -> Tensor<T> {
    cyclic_shift(x, -dy, -dx)
}

/// Zero-pads on the bottom/right up to `h × w`.
pub fn pad_bottom_right<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, c, xh, xw] = x.shape();
    if h < xh || w < xw {
        return Err(invalid("pad", format!("target {h}x{w} smaller than {xh}x{xw}")));
    }
    if h == xh && w == xw {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros([n, c, h, w]);
    for p in 0..n * c {
        for y in 0..xh {
            let s = (p * xh + y) * xw;
            let d = (p * h + y) * w;
            out.data_mut()[d..d + xw].copy_from_slice(&x.data()[s..s + xw]);
        }
    }
    Ok(out)
}

/// Keeps the top-left `h × w` corner.
pub fn crop<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [n, c, xh, xw] = x.shape();
    if h > xh || w > xw {
        return Err(invalid("crop", format!("target {h}x{w} larger than {xh}x{xw}")));
    }
    if h == xh && w == xw {
        return Ok(x.clone());
    }
    let mut out = Tensor::zeros([n, c, h, w]);
    for p in 0..n * c {
        for y in 0..h {
            let s = (p * xh + y) * xw;
            let d = (p * h + y) * w;
            out.data_mut()[d..d + w].copy_from_slice(&x.data()[s..s + w]);
        }
    }
    Ok(out)
}

/// Bookkeeping needed to undo a shifted window partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub window: usize,
    /// `(rows, cols)` of windows.
    pub grid: (usize, usize),
    /// Cyclic offset applied before partitioning.
    pub shift: (isize, isize),
    /// Shape before padding.
    pub source_shape: Shape,
}

impl WindowLayout {
    pub fn padded_hw(&self) -> (usize, usize) {
        (self.grid.0 * self.window, self.grid.1 * self.window)
    }

    pub fn num_windows(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Shape of the packed token tensor: `N × C × windows × w²`.
    pub fn token_shape(&self) -> Shape {
        let [n, c, _, _] = self.source_shape;
        [n, c, self.num_windows(), self.window * self.window]
    }

    /// Layout for a `source_shape` input: pads up to multiples of `window`.
    pub fn for_input(source_shape: Shape, window: usize, shift: (isize, isize)) -> Result<Self> {
        if window == 0 {
            return Err(invalid("window_partition", "window size must be positive"));
        }
        let [_, _, h, w] = source_shape;
        if h == 0 || w == 0 {
            return Err(Error::EmptySpatial {
                op: "window_partition",
            });
        }
        Ok(Self {
            window,
            grid: (h.div_ceil(window), w.div_ceil(window)),
            shift,
            source_shape,
        })
    }
}

/// Per-window token matrices packed as `N × C × windows × w²`: window index
/// runs row-major over the grid and token index row-major inside the window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTokens<P> {
    pub tokens: P,
    pub layout: WindowLayout,
}

/// Raw partition of an `N×C×H×W` tensor whose `H`, `W` are multiples of `w`.
pub fn partition_raw<T: Scalar>(x: &Tensor<T>, w: usize) -> Result<Tensor<T>> {
    let [n, c, h, wd] = x.shape();
    if w == 0 || h % w != 0 || wd % w != 0 {
        return Err(invalid(
            "window_partition",
            format!("window {w} does not divide {h}x{wd}"),
        ));
    }
    let (rows, cols) = (h / w, wd / w);
    let mut out = Tensor::zeros([n, c, rows * cols, w * w]);
    let src = x.data();
    let dst = out.data_mut();
    let mut k = 0;
    for p in 0..n * c {
        let base = p * h * wd;
        for r in 0..rows {
            for cc in 0..cols {
                for ty in 0..w {
                    let row = base + (r * w + ty) * wd + cc * w;
                    dst[k..k + w].copy_from_slice(&src[row..row + w]);
                    k += w;
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`partition_raw`] for a `(rows, cols)` grid.
pub fn merge_raw<T: Scalar>(tokens: &Tensor<T>, w: usize, grid: (usize, usize)) -> Result<Tensor<T>> {
    let [n, c, nw, ww] = tokens.shape();
    let (rows, cols) = grid;
    if nw != rows * cols || ww != w * w {
        return Err(Error::ShapeMismatch {
            op: "window_merge",
            expected: format!("{} windows of {} tokens", rows * cols, w * w),
            got: tokens.shape(),
        });
    }
    let (h, wd) = (rows * w, cols * w);
    let mut out = Tensor::zeros([n, c, h, wd]);
    let src = tokens.data();
    let dst = out.data_mut();
    let mut k = 0;
    for p in 0..n * c {
        let base = p * h * wd;
        for r in 0..rows {
            for cc in 0..cols {
                for ty in 0..w {
                    let row = base + (r * w + ty) * wd + cc * w;
                    dst[row..row + w].copy_from_slice(&src[k..k + w]);
                    k += w;
                }
            }
        }
    }
    Ok(out)
}

/// Pads to a multiple of `w`, cyclically shifts by `shift`, and partitions.
pub fn window_partition<T: Scalar>(
    x: &Tensor<T>,
    w: usize,
    shift: (isize, isize),
) -> Result<WindowTokens<Tensor<T>>> {
    let layout = WindowLayout::for_input(x.shape(), w, shift)?;
    let (hp, wp) = layout.padded_hw();
    let padded = pad_bottom_right(x, hp, wp)?;
    let shifted = cyclic_shift(&padded, shift.0, shift.1);
    Ok(WindowTokens {
        tokens: partition_raw(&shifted, w)?,
        layout,
    })
}

/// Merges windows, reverses the cyclic shift, and crops the padding.
pub fn window_merge<T: Scalar>(tokens: &WindowTokens<Tensor<T>>) -> Result<Tensor<T>> {
    let l = &tokens.layout;
    let merged = merge_raw(&tokens.tokens, l.window, l.grid)?;
    let unshifted = cyclic_unshift(&merged, l.shift.0, l.shift.1);
    crop(&unshifted, l.source_shape[2], l.source_shape[3])
}

/// The four half-resolution Haar sub-bands of a feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBands<T> {
    pub ll: Tensor<T>,
    pub hl: Tensor<T>,
    pub lh: Tensor<T>,
    pub hh: Tensor<T>,
}

impl<T: Scalar> WaveletBands<T> {
    pub fn energy(&self) -> T {
        self.ll.sq_norm() + self.hl.sq_norm() + self.lh.sq_norm() + self.hh.sq_norm()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        [&self.ll, &self.hl, &self.lh, &self.hh].into_iter()
    }
}

fn check_even(op: &'static str, s: Shape) -> Result<()> {
    if s[2] == 0 || s[3] == 0 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(invalid(op, format!("spatial dims must be even and nonzero, got {}x{}", s[2], s[3])));
    }
    Ok(())
}

/// Stride-2 depthwise Haar analysis packed band-major as `N × 4C × H/2 × W/2`
/// (channels `[LL | HL | LH | HH]`).
pub fn haar_dwt_packed<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    check_even("haar_dwt", x.shape())?;
    let [n, c, h, w] = x.shape();
    let (ho, wo) = (h / 2, w / 2);
    let half = T::of(0.5);
    let mut out = Tensor::zeros([n, 4 * c, ho, wo]);
    let src = x.data();
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for y in 0..ho {
                for xx in 0..wo {
                    let i = base + 2 * y * w + 2 * xx;
                    let (p, q, r, s) = (src[i], src[i + 1], src[i + w], src[i + w + 1]);
                    let bands = [
                        half * (p + q + r + s),
                        half * (p - q + r - s),
                        half * (p + q - r - s),
                        half * (p - q - r + s),
                    ];
                    for (band, v) in bands.into_iter().enumerate() {
                        out.set(b, band * c + ch, y, xx, v);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`haar_dwt_packed`].
pub fn haar_idwt_packed<T: Scalar>(packed: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c4, ho, wo] = packed.shape();
    if c4 % 4 != 0 {
        return Err(invalid("haar_idwt", "packed channel count must be a multiple of 4"));
    }
    let c = c4 / 4;
    let (h, w) = (2 * ho, 2 * wo);
    let half = T::of(0.5);
    let mut out = Tensor::zeros([n, c, h, w]);
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * w;
            for y in 0..ho {
                for xx in 0..wo {
                    let ll = packed.at(b, ch, y, xx);
                    let hl = packed.at(b, c + ch, y, xx);
                    let lh = packed.at(b, 2 * c + ch, y, xx);
                    let hh = packed.at(b, 3 * c + ch, y, xx);
                    let i = base + 2 * y * w + 2 * xx;
                    let d = out.data_mut();
                    d[i] = half * (ll + hl + lh + hh);
                    d[i + 1] = half * (ll - hl + lh - hh);
                    d[i + w] = half * (ll + hl - lh - hh);
                    d[i + w + 1] = half * (ll - hl - lh + hh);
                }
            }
        }
    }
    Ok(out)
}

pub fn haar_dwt<T: Scalar>(x: &Tensor<T>) -> Result<WaveletBands<T>> {
    let packed = haar_dwt_packed(x)?;
    let c = x.shape()[1];
    Ok(WaveletBands {
        ll: packed.slice_channels(0, c)?,
        hl: packed.slice_channels(c, c)?,
        lh: packed.slice_channels(2 * c, c)?,
        hh: packed.slice_channels(3 * c, c)?,
    })
}

pub fn haar_idwt<T: Scalar>(bands: &WaveletBands<T>) -> Result<Tensor<T>> {
    let s = bands.ll.shape();
    for b in [&bands.hl, &bands.lh, &bands.hh] {
        if b.shape() != s {
            return Err(Error::ShapeMismatch {
                op: "haar_idwt",
                expected: format!("{s:?}"),
                got: b.shape(),
            });
        }
    }
    let c = s[1];
    let mut packed = Tensor::zeros([s[0], 4 * c, s[2], s[3]]);
    for (i, b) in bands.iter().enumerate() {
        packed.write_channels(i * c, b);
    }
    haar_idwt_packed(&packed)
}

/// Channel permutation of a `(groups, C/groups)` → transpose → flatten shuffle:
/// output channel `i` reads input channel `perm[i]`.
pub fn shuffle_permutation(channels: usize, groups: usize) -> Result<Vec<usize>> {
    if groups == 0 || channels % groups != 0 {
        return Err(Error::Groups {
            op: "channel_shuffle",
            groups,
            channels,
        });
    }
    let per = channels / groups;
    Ok((0..channels)
        .map(|i| {
            let (j, g) = (i / groups, i % groups);
            g * per + j
        })
        .collect())
}

/// Gathers channels: output channel `i` is input channel `perm[i]`.
pub fn permute_channels<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let mut out = Tensor::zeros(x.shape());
    for b in 0..n {
        for (i, &src) in perm.iter().enumerate() {
            let s = (b * c + src) * plane;
            let d = (b * c + i) * plane;
            out.data_mut()[d..d + plane].copy_from_slice(&x.data()[s..s + plane]);
        }
    }
    out
}

pub fn invert_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn channel_shuffle<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let perm = shuffle_permutation(x.shape()[1], groups)?;
    Ok(permute_channels(x, &perm))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shuffle_c4_g2() {
        assert_eq!(shuffle_permutation(4, 2).unwrap(), vec![0, 2, 1, 3]);
        assert_eq!(shuffle_permutation(6, 1).unwrap(), (0..6).collect::<Vec<_>>());
        assert!(shuffle_permutation(6, 4).is_err());
    }

    #[test]
    fn shift_hand_roll() {
        let x = Tensor::<f64>::from_f64([1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(cyclic_shift(&x, 1, 1).data(), &[4.0, 3.0, 2.0, 1.0]);
        assert_eq!(cyclic_shift(&x, 0, 0), x);
        assert_eq!(cyclic_shift(&x, 2, 2), x);
    }

    #[test]
    fn pad_crop_roundtrip() {
        let x = Tensor::<f64>::from_fn([1, 2, 3, 5], |_, c, h, w| (c * 100 + h * 10 + w) as f64);
        let p = pad_bottom_right(&x, 4, 8).unwrap();
        assert_eq!(p.at(0, 1, 2, 4), x.at(0, 1, 2, 4));
        assert_eq!(p.at(0, 1, 3, 7), 0.0);
        assert_eq!(crop(&p, 3, 5).unwrap(), x);
    }

    #[test]
    fn odd_haar_input_is_error() {
        assert!(haar_dwt(&Tensor::<f64>::zeros([1, 1, 3, 4])).is_err());
    }
}
