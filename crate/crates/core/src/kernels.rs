//! Forward and adjoint loops for convolution and pooling.
//!
//! All windows use "same" padding: the output extent is `ceil(H / stride)` and
//! any odd padding surplus goes to the bottom/right edge.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

/// Convolution flavours used by the attention blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConvKind {
    /// Pointwise 1×1, full channel mixing.
    Pc,
    /// Grouped pointwise 1×1.
    Gpc { groups: usize },
    /// Depthwise k×k.
    Dwc,
    /// Dilated depthwise k×k.
    Ddc { dilation: usize },
    /// Strided depthwise k×k.
    Sdwc { stride: usize },
    /// Dense k×k convolution (used by the stem).
    Standard { stride: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvKind {
    pub fn geometry(self, c_in: usize, c_out: usize, k: usize) -> Result<ConvGeometry> {
        const OP: &str = "conv2d";
        if c_in == 0 || c_out == 0 || k == 0 {
            return Err(invalid(OP, "channels and kernel size must be positive"));
        }
        let pointwise = |groups: usize| -> Result<ConvGeometry> {
            if k != 1 {
                return Err(invalid(OP, format!("pointwise kernels are 1x1, got {k}x{k}")));
            }
            if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
                return Err(Error::Groups {
                    op: OP,
                    groups,
                    channels: c_in,
                });
            }
            Ok(ConvGeometry {
                c_in,
                c_out,
                k,
                stride: 1,
                dilation: 1,
                groups,
            })
        };
        let depthwise = |stride: usize, dilation: usize| -> Result<ConvGeometry> {
            if c_in != c_out {
                return Err(invalid(OP, "depthwise convolution keeps the channel count"));
            }
            if stride == 0 || dilation == 0 {
                return Err(invalid(OP, "stride and dilation must be positive"));
            }
            Ok(ConvGeometry {
                c_in,
                c_out,
                k,
                stride,
                dilation,
                groups: c_in,
            })
        };
        match self {
            ConvKind::Pc => pointwise(1),
            ConvKind::Gpc { groups } => pointwise(groups),
            ConvKind::Dwc => depthwise(1, 1),
            ConvKind::Ddc { dilation } => depthwise(1, dilation),
            ConvKind::Sdwc { stride } => depthwise(stride, 1),
            ConvKind::Standard { stride } => {
                if stride == 0 {
                    return Err(invalid(OP, "stride must be positive"));
                }
                Ok(ConvGeometry {
                    c_in,
                    c_out,
                    k,
                    stride,
                    dilation: 1,
                    groups: 1,
                })
            }
        }
    }
}

/// "Same" padding: returns `(out_extent, pad_before)`.
#[inline]
pub fn same_padding(extent: usize, k: usize, stride: usize, dilation: usize) -> (usize, usize) {
    let out = extent.div_ceil(stride);
    let span = dilation * (k - 1) + 1;
    let total = ((out - 1) * stride + span).saturating_sub(extent);
    (out, total / 2)
}

/// Output positions `o` in `0..out` whose tap `o*stride + off` lands in `0..extent`.
#[inline]
fn valid_range(out: usize, extent: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let room = extent as isize - off;
    let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
    let lo = (lo.max(0) as usize).min(out);
    (lo, (hi.max(0) as usize).clamp(lo, out))
}

impl ConvGeometry {
    pub fn weight_shape(&self) -> Shape {
        [self.c_out, self.c_in / self.groups, self.k, self.k]
    }

    pub fn output_shape(&self, input: Shape) -> Shape {
        let (ho, _) = same_padding(input[2], self.k, self.stride, self.dilation);
        let (wo, _) = same_padding(input[3], self.k, self.stride, self.dilation);
        [input[0], self.c_out, ho, wo]
    }

    /// Trainable parameter count including the bias.
    pub fn params(&self) -> usize {
        self.c_out * (self.c_in / self.groups) * self.k * self.k + self.c_out
    }

    /// Multiply-accumulates for one sample producing an `h_out × w_out` map.
    pub fn macs(&self, h_out: usize, w_out: usize) -> u64 {
        (self.c_out * (self.c_in / self.groups) * self.k * self.k * h_out * w_out) as u64
    }

    pub(crate) fn check_input(&self, x: Shape) -> Result<()> {
        if x[1] != self.c_in {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: format!("{} input channels", self.c_in),
                got: x,
            });
        }
        if x[2] == 0 || x[3] == 0 {
            return Err(Error::EmptySpatial { op: "conv2d" });
        }
        Ok(())
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeometry,
) -> Result<Tensor<T>> {
    g.check_input(x.shape())?;
    if weight.shape() != g.weight_shape() {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            expected: format!("weight {:?}", g.weight_shape()),
            got: weight.shape(),
        });
    }
    if let Some(b) = bias {
        if b.len() != g.c_out {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                expected: format!("bias of {} values", g.c_out),
                got: b.shape(),
            });
        }
    }
    let [n, _, h, w] = x.shape();
    let out_shape = g.output_shape(x.shape());
    let [_, _, ho, wo] = out_shape;
    let (_, pt) = same_padding(h, g.k, g.stride, g.dilation);
    let (_, pl) = same_padding(w, g.k, g.stride, g.dilation);
    let cin_g = g.c_in / g.groups;
    let cout_g = g.c_out / g.groups;
    let xd = x.data();
    let wd = weight.data();
    let mut out = vec![T::zero(); n * g.c_out * ho * wo];
    for b in 0..n {
        for oc in 0..g.c_out {
            let grp = oc / cout_g;
            let obase = (b * g.c_out + oc) * ho * wo;
            let oplane = &mut out[obase..obase + ho * wo];
            if let Some(bias) = bias {
                oplane.iter_mut().for_each(|v| *v = bias.data()[oc]);
            }
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let xbase = (b * g.c_in + ic) * h * w;
                let xplane = &xd[xbase..xbase + h * w];
                for ky in 0..g.k {
                    let offy = (ky * g.dilation) as isize - pt as isize;
                    let (oy_lo, oy_hi) = valid_range(ho, h, g.stride, offy);
                    for kx in 0..g.k {
                        let wv = wd[((oc * cin_g + icg) * g.k + ky) * g.k + kx];
                        let offx = (kx * g.dilation) as isize - pl as isize;
                        let (ox_lo, ox_hi) = valid_range(wo, w, g.stride, offx);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * g.stride) as isize + offy;
                            let xrow = &xplane[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut oplane[oy * wo..(oy + 1) * wo];
                            if g.stride == 1 {
                                let start = (ox_lo as isize + offx) as usize;
                                for (o, &xv) in orow[ox_lo..ox_hi]
                                    .iter_mut()
                                    .zip(&xrow[start..start + (ox_hi - ox_lo)])
                                {
                                    *o += wv * xv;
                                }
                            } else {
                                for ox in ox_lo..ox_hi {
                                    let ix = ((ox * g.stride) as isize + offx) as usize;
                                    orow[ox] += wv * xrow[ix];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Adjoint of [`conv2d_forward`]: returns `(dx, dweight, dbias)`.
pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
    need_x: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [n, _, h, w] = x.shape();
    let [_, _, ho, wo] = grad_out.shape();
    let (_, pt) = same_padding(h, g.k, g.stride, g.dilation);
    let (_, pl) = same_padding(w, g.k, g.stride, g.dilation);
    let cin_g = g.c_in / g.groups;
    let cout_g = g.c_out / g.groups;
    let xd = x.data();
    let wd = weight.data();
    let gd = grad_out.data();
    let mut dx = if need_x {
        vec![T::zero(); x.len()]
    } else {
        Vec::new()
    };
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); g.c_out];
    for b in 0..n {
        for oc in 0..g.c_out {
            let grp = oc / cout_g;
            let obase = (b * g.c_out + oc) * ho * wo;
            let gplane = &gd[obase..obase + ho * wo];
            db[oc] += gplane.iter().copied().sum::<T>();
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let xbase = (b * g.c_in + ic) * h * w;
                for ky in 0..g.k {
                    let offy = (ky * g.dilation) as isize - pt as isize;
                    let (oy_lo, oy_hi) = valid_range(ho, h, g.stride, offy);
                    for kx in 0..g.k {
                        let widx = ((oc * cin_g + icg) * g.k + ky) * g.k + kx;
                        let wv = wd[widx];
                        let offx = (kx * g.dilation) as isize - pl as isize;
                        let (ox_lo, ox_hi) = valid_range(wo, w, g.stride, offx);
                        if ox_lo == ox_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * g.stride) as isize + offy) as usize;
                            let row = xbase + iy * w;
                            for ox in ox_lo..ox_hi {
                                let ix = ((ox * g.stride) as isize + offx) as usize;
                                let gv = gplane[oy * wo + ox];
                                acc += gv * xd[row + ix];
                                if need_x {
                                    dx[row + ix] += wv * gv;
                                }
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    let dx = need_x.then(|| Tensor::new(x.shape(), dx).expect("dx shape"));
    (
        dx,
        Tensor::new(weight.shape(), dw).expect("dw shape"),
        Tensor::new([1, g.c_out, 1, 1], db).expect("db shape"),
    )
}

/// Statistic computed by a pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolKind {
    Avg,
    Max,
    Min,
    Sum,
}

impl PoolKind {
    pub const ALL: [PoolKind; 4] = [PoolKind::Avg, PoolKind::Max, PoolKind::Min, PoolKind::Sum];

    /// Short lowercase name (`avg`, `max`, `min`, `sum`).
    pub fn tag(self) -> &'static str {
        match self {
            PoolKind::Avg => "avg",
            PoolKind::Max => "max",
            PoolKind::Min => "min",
            PoolKind::Sum => "sum",
        }
    }

    fn uses_argument(self) -> bool {
        matches!(self, PoolKind::Max | PoolKind::Min)
    }

    /// Strictly better than the incumbent; ties keep the first position.
    #[inline]
    fn improves<T: Scalar>(self, candidate: T, best: T) -> bool {
        match self {
            PoolKind::Max => candidate > best,
            PoolKind::Min => candidate < best,
            _ => false,
        }
    }
}

/// Windowed pooling with neutral-element padding. `arg` holds the flat input
/// index selected by max/min windows (empty for avg/sum).
pub struct PoolOutput<T> {
    pub out: Tensor<T>,
    pub arg: Vec<usize>,
}

pub fn pool_local_forward<T: Scalar>(
    x: &Tensor<T>,
    kind: PoolKind,
    k: usize,
    stride: usize,
) -> Result<PoolOutput<T>> {
    const OP: &str = "pool_local";
    if k == 0 || stride == 0 {
        return Err(invalid(OP, "kernel and stride must be positive"));
    }
    let [n, c, h, w] = x.shape();
    if h == 0 || w == 0 {
        return Err(invalid(OP, format!("kernel {k} larger than padded extent")));
    }
    let (ho, pt) = same_padding(h, k, stride, 1);
    let (wo, pl) = same_padding(w, k, stride, 1);
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(if kind.uses_argument() { out.capacity() } else { 0 });
    let area = T::of((k * k) as f64);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            let y0 = (oy * stride) as isize - pt as isize;
            let ys = y0.max(0) as usize..((y0 + k as isize).min(h as isize)) as usize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - pl as isize;
                let xs = x0.max(0) as usize..((x0 + k as isize).min(w as isize)) as usize;
                match kind {
                    PoolKind::Avg | PoolKind::Sum => {
                        let mut acc = T::zero();
                        for iy in ys.clone() {
                            for ix in xs.clone() {
                                acc += xd[base + iy * w + ix];
                            }
                        }
                        out.push(if kind == PoolKind::Avg { acc / area } else { acc });
                    }
                    PoolKind::Max | PoolKind::Min => {
                        let mut best = if kind == PoolKind::Max {
                            T::neg_infinity()
                        } else {
                            T::infinity()
                        };
                        let mut at = usize::MAX;
                        for iy in ys.clone() {
                            for ix in xs.clone() {
                                let i = base + iy * w + ix;
                                if at == usize::MAX || kind.improves(xd[i], best) {
                                    best = xd[i];
                                    at = i;
                                }
                            }
                        }
                        out.push(best);
                        arg.push(at);
                    }
                }
            }
        }
    }
    Ok(PoolOutput {
        out: Tensor::new([n, c, ho, wo], out)?,
        arg,
    })
}

pub fn pool_local_backward<T: Scalar>(
    x_shape: Shape,
    grad_out: &Tensor<T>,
    kind: PoolKind,
    k: usize,
    stride: usize,
    arg: &[usize],
) -> Tensor<T> {
    let [n, c, h, w] = x_shape;
    let mut dx = Tensor::zeros(x_shape);
    let gd = grad_out.data();
    if kind.uses_argument() {
        let d = dx.data_mut();
        for (&i, &g) in arg.iter().zip(gd) {
            d[i] += g;
        }
        return dx;
    }
    let (ho, pt) = same_padding(h, k, stride, 1);
    let (wo, pl) = same_padding(w, k, stride, 1);
    let area = T::of((k * k) as f64);
    let d = dx.data_mut();
    let mut gi = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            let y0 = (oy * stride) as isize - pt as isize;
            let ys = y0.max(0) as usize..((y0 + k as isize).min(h as isize)) as usize;
            for ox in 0..wo {
                let x0 = (ox * stride) as isize - pl as isize;
                let xs = x0.max(0) as usize..((x0 + k as isize).min(w as isize)) as usize;
                let g = if kind == PoolKind::Avg {
                    gd[gi] / area
                } else {
                    gd[gi]
                };
                gi += 1;
                for iy in ys.clone() {
                    for ix in xs.clone() {
                        d[base + iy * w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel reduction over all spatial positions, output `N×C×1×1`.
pub fn pool_global_forward<T: Scalar>(x: &Tensor<T>, kind: PoolKind) -> Result<PoolOutput<T>> {
    let [n, c, h, w] = x.shape();
    if h * w == 0 {
        return Err(Error::EmptySpatial { op: "pool_global" });
    }
    let plane = h * w;
    let xd = x.data();
    let mut out = Vec::with_capacity(n * c);
    let mut arg = Vec::new();
    for p in 0..n * c {
        let vals = &xd[p * plane..(p + 1) * plane];
        match kind {
            PoolKind::Avg => out.push(vals.iter().copied().sum::<T>() / T::of(plane as f64)),
            PoolKind::Sum => out.push(vals.iter().copied().sum::<T>()),
            PoolKind::Max | PoolKind::Min => {
                let mut at = 0;
                for (i, &v) in vals.iter().enumerate().skip(1) {
                    if kind.improves(v, vals[at]) {
                        at = i;
                    }
                }
                out.push(vals[at]);
                arg.push(p * plane + at);
            }
        }
    }
    Ok(PoolOutput {
        out: Tensor::new([n, c, 1, 1], out)?,
        arg,
    })
}

pub fn pool_global_backward<T: Scalar>(
    x_shape: Shape,
    grad_out: &Tensor<T>,
    kind: PoolKind,
    arg: &[usize],
) -> Tensor<T> {
    let plane = x_shape[2] * x_shape[3];
    let mut dx = Tensor::zeros(x_shape);
    let d = dx.data_mut();
    let gd = grad_out.data();
    match kind {
        PoolKind::Max | PoolKind::Min => {
            for (&i, &g) in arg.iter().zip(gd) {
                d[i] += g;
            }
        }
        PoolKind::Avg | PoolKind::Sum => {
            let scale = if kind == PoolKind::Avg {
                T::one() / T::of(plane as f64)
            } else {
                T::one()
            };
            for (p, &g) in gd.iter().enumerate() {
                d[p * plane..(p + 1) * plane]
                    .iter_mut()
                    .for_each(|v| *v += g * scale);
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        assert_eq!(same_padding(8, 3, 1, 1), (8, 1));
        assert_eq!(same_padding(8, 3, 1, 2), (8, 2));
        assert_eq!(same_padding(32, 3, 2, 1), (16, 0));
        assert_eq!(same_padding(2, 2, 1, 1), (2, 0));
        assert_eq!(same_padding(5, 1, 1, 1), (5, 0));
    }

    #[test]
    fn kind_validation() {
        assert!(ConvKind::Pc.geometry(4, 4, 3).is_err());
        assert!(matches!(
            ConvKind::Gpc { groups: 3 }.geometry(4, 4, 1),
            Err(Error::Groups { .. })
        ));
        assert!(ConvKind::Dwc.geometry(4, 8, 3).is_err());
        let g = ConvKind::Gpc { groups: 2 }.geometry(4, 6, 1).unwrap();
        assert_eq!(g.weight_shape(), [6, 2, 1, 1]);
    }

    #[test]
    fn zero_spatial_is_error() {
        let g = ConvKind::Pc.geometry(1, 1, 1).unwrap();
        let x = Tensor::<f64>::zeros([1, 1, 0, 3]);
        let w = Tensor::ones([1, 1, 1, 1]);
        assert_eq!(
            conv2d_forward(&x, &w, None, &g),
            Err(Error::EmptySpatial { op: "conv2d" })
        );
    }

    #[test]
    fn strided_output_extent() {
        let g = ConvKind::Sdwc { stride: 2 }.geometry(2, 2, 3).unwrap();
        assert_eq!(g.output_shape([1, 2, 7, 8]), [1, 2, 4, 4]);
    }
}
