//! Naive reference implementations used as independent oracles.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use hypca::{PoolKind, Tensor};

pub mod layers;

pub fn random(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Random values spaced at least `gap` apart, so max/min/relu choices are
/// stable under a finite-difference step.
pub fn random_distinct(shape: [usize; 4], seed: u64) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..len).collect();
    for i in (1..len).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let step = 2.0 / len as f64;
    let mut data = vec![0.0; len];
    for (rank, &pos) in order.iter().enumerate() {
        data[pos] = -1.0 + step * (rank as f64 + 0.5);
    }
    Tensor::new(shape, data).unwrap()
}

fn same_pad(extent: usize, k: usize, stride: usize, dilation: usize) -> (usize, isize) {
    let out = (extent + stride - 1) / stride;
    let span = dilation * (k - 1) + 1;
    let need = (out - 1) * stride + span;
    let total = need.saturating_sub(extent);
    (out, (total / 2) as isize)
}

/// Direct grouped convolution with "same" padding.
pub fn conv_direct(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    bias: &[f64],
    groups: usize,
    stride: usize,
    dilation: usize,
) -> Tensor<f64> {
    let [n, c_in, h, wd] = x.shape();
    let [c_out, cpg, k, _] = w.shape();
    let (ho, ph) = same_pad(h, k, stride, dilation);
    let (wo, pw) = same_pad(wd, k, stride, dilation);
    let opg = c_out / groups;
    assert_eq!(cpg * groups, c_in);
    let mut out = Tensor::zeros([n, c_out, ho, wo]);
    for b in 0..n {
        for o in 0..c_out {
            let grp = o / opg;
            for y in 0..ho {
                for xx in 0..wo {
                    let mut acc = bias[o];
                    for ci in 0..cpg {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (y * stride) as isize + (ky * dilation) as isize - ph;
                                let ix = (xx * stride) as isize + (kx * dilation) as isize - pw;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += w.at(o, ci, ky, kx) * x.at(b, grp * cpg + ci, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.set(b, o, y, xx, acc);
                }
            }
        }
    }
    out
}

/// Sliding-window pooling with explicit neutral padding.
pub fn pool_direct(x: &Tensor<f64>, kind: PoolKind, k: usize, stride: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    let (ho, ph) = same_pad(h, k, stride, 1);
    let (wo, pw) = same_pad(w, k, stride, 1);
    let neutral = match kind {
        PoolKind::Max => f64::NEG_INFINITY,
        PoolKind::Min => f64::INFINITY,
        _ => 0.0,
    };
    Tensor::from_fn([n, c, ho, wo], |b, ch, y, xx| {
        let mut vals = Vec::new();
        for ky in 0..k {
            for kx in 0..k {
                let iy = (y * stride + ky) as isize - ph;
                let ix = (xx * stride + kx) as isize - pw;
                let inside = iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize;
                vals.push(if inside { x.at(b, ch, iy as usize, ix as usize) } else { neutral });
            }
        }
        reduce(&vals, kind, (k * k) as f64)
    })
}

fn reduce(vals: &[f64], kind: PoolKind, count: f64) -> f64 {
    match kind {
        PoolKind::Avg => vals.iter().sum::<f64>() / count,
        PoolKind::Sum => vals.iter().sum(),
        PoolKind::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        PoolKind::Min => vals.iter().copied().fold(f64::INFINITY, f64::min),
    }
}

pub fn pool_global_direct(x: &Tensor<f64>, kind: PoolKind) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, c, 1, 1], |b, ch, _, _| {
        let vals: Vec<f64> = (0..h * w).map(|i| x.at(b, ch, i / w, i % w)).collect();
        reduce(&vals, kind, (h * w) as f64)
    })
}

/// Sum of the four global pools.
pub fn descriptor(x: &Tensor<f64>) -> Tensor<f64> {
    let mut acc = pool_global_direct(x, PoolKind::Avg);
    for kind in [PoolKind::Max, PoolKind::Min, PoolKind::Sum] {
        acc = add(&acc, &pool_global_direct(x, kind));
    }
    acc
}

pub fn matmul(a: &[f64], b: &[f64], rows: usize, inner: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            for k in 0..inner {
                out[i * cols + j] += a[i * inner + k] * b[k * cols + j];
            }
        }
    }
    out
}

/// `N×in` samples through a `1×1×in×out` weight, giving `N×out×1×1`.
pub fn dense_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let n = x.shape()[0];
    let fin = x.len() / n;
    let fout = w.shape()[3];
    let mut y = matmul(x.data(), w.data(), n, fin, fout);
    for (i, v) in y.iter_mut().enumerate() {
        *v += b.data()[i % fout];
    }
    Tensor::new([n, fout, 1, 1], y).unwrap()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn relu(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(|v| v.max(0.0))
}

pub fn sig(t: &Tensor<f64>) -> Tensor<f64> {
    t.map(sigmoid)
}

/// Broadcasting binary op, written with explicit index arithmetic.
fn bin(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
    let (sa, sb) = (a.shape(), b.shape());
    let shape: [usize; 4] = std::array::from_fn(|i| sa[i].max(sb[i]));
    Tensor::from_fn(shape, |n, c, h, w| {
        let pick = |s: [usize; 4], i: [usize; 4]| -> [usize; 4] {
            std::array::from_fn(|d| if s[d] == 1 { 0 } else { i[d] })
        };
        let ia = pick(sa, [n, c, h, w]);
        let ib = pick(sb, [n, c, h, w]);
        f(a.at(ia[0], ia[1], ia[2], ia[3]), b.at(ib[0], ib[1], ib[2], ib[3]))
    })
}

pub fn add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    bin(a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    bin(a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    bin(a, b, |x, y| x * y)
}

/// Softmax over the channel axis.
pub fn softmax_c(t: &Tensor<f64>) -> Tensor<f64> {
    let [_, c, _, _] = t.shape();
    Tensor::from_fn(t.shape(), |n, ch, h, w| {
        let m = (0..c).map(|k| t.at(n, k, h, w)).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|k| (t.at(n, k, h, w) - m).exp()).sum();
        (t.at(n, ch, h, w) - m).exp() / z
    })
}

/// Orthonormal DCT-II straight from the double-sum definition.
pub fn dct2_direct(x: &[f64], n: usize) -> Vec<f64> {
    let pi = std::f64::consts::PI;
    let alpha = |k: usize| if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
    let mut out = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            let mut acc = 0.0;
            for i in 0..n {
                for j in 0..n {
                    acc += x[i * n + j]
                        * ((2 * i + 1) as f64 * u as f64 * pi / (2 * n) as f64).cos()
                        * ((2 * j + 1) as f64 * v as f64 * pi / (2 * n) as f64).cos();
                }
            }
            out[u * n + v] = alpha(u) * alpha(v) * acc;
        }
    }
    out
}

/// DCT of every `w×w` plane of a packed token tensor (`N×C×windows×w²`).
pub fn token_dct_direct(tokens: &Tensor<f64>, w: usize) -> Tensor<f64> {
    let mut out = tokens.clone();
    for chunk in out.data_mut().chunks_mut(w * w) {
        let d = dct2_direct(chunk, w);
        chunk.copy_from_slice(&d);
    }
    out
}

/// Pointwise conv `C→C` written as a per-pixel matrix product.
pub fn pointwise(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, ww] = x.shape();
    let co = w.shape()[0];
    Tensor::from_fn([n, co, h, ww], |s, o, y, xx| {
        b.data()[o] + (0..c).map(|i| w.at(o, i, 0, 0) * x.at(s, i, y, xx)).sum::<f64>()
    })
}

/// Rolls the spatial axes: `out[h][w] = x[(h − dy) mod H][(w − dx) mod W]`.
pub fn roll(x: &Tensor<f64>, dy: isize, dx: isize) -> Tensor<f64> {
    let [_, _, h, w] = x.shape();
    Tensor::from_fn(x.shape(), |n, c, y, xx| {
        let sy = (y as isize - dy).rem_euclid(h as isize) as usize;
        let sx = (xx as isize - dx).rem_euclid(w as isize) as usize;
        x.at(n, c, sy, sx)
    })
}

/// Zero-pads to `h×w` then partitions into `N×C×windows×w²`.
pub fn partition_direct(x: &Tensor<f64>, win: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    let (rows, cols) = (h / win, w / win);
    Tensor::from_fn([n, c, rows * cols, win * win], |b, ch, k, t| {
        let (r, q) = (k / cols, k % cols);
        let (i, j) = (t / win, t % win);
        x.at(b, ch, r * win + i, q * win + j)
    })
}

pub fn merge_direct(tokens: &Tensor<f64>, win: usize, rows: usize, cols: usize) -> Tensor<f64> {
    let [n, c, _, _] = tokens.shape();
    Tensor::from_fn([n, c, rows * win, cols * win], |b, ch, y, x| {
        let k = (y / win) * cols + x / win;
        let t = (y % win) * win + x % win;
        tokens.at(b, ch, k, t)
    })
}

pub fn pad_to(x: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let [n, c, hh, ww] = x.shape();
    Tensor::from_fn([n, c, h, w], |b, ch, y, xx| if y < hh && xx < ww { x.at(b, ch, y, xx) } else { 0.0 })
}

pub fn crop_to(x: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let [n, c, _, _] = x.shape();
    Tensor::from_fn([n, c, h, w], |b, ch, y, xx| x.at(b, ch, y, xx))
}

pub fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, tol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape");
    let d = a.max_abs_diff(b);
    assert!(d < tol, "{what}: max |diff| = {d:e} >= {tol:e}");
}
