//! Hybrid spatial-frequency attention over two window scales.

use crate::autodiff::{Graph, Var};
use crate::config::Components;
use crate::error::Result;
use crate::kernels::{ConvKind, PoolKind};
use crate::nn::{Conv2d, Dense, Mlp};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::transforms::WindowLayout;

/// Local sum pooling applied to the fused multi-scale update.
pub const RESIDUAL_POOL: usize = 2;

/// Cyclic offset applied before partitioning with window `w`.
pub fn window_shift(w: usize) -> isize {
    -((w / 4) as isize)
}

/// Orthonormal DCT of every window in a packed `N × C × windows × w²` tensor.
pub fn token_dct<T: Scalar>(g: &mut Graph<'_, T>, tokens: Var, w: usize) -> Result<Var> {
    let s = g.shape(tokens);
    let planes = g.reshape(tokens, [s[0], s[1] * s[2], w, w])?;
    let f = g.dct2(planes);
    g.reshape(f, s)
}

/// Shifted, padded windows of `x` and the layout needed to undo them.
pub fn to_windows<T: Scalar>(g: &mut Graph<'_, T>, x: Var, w: usize) -> Result<(Var, WindowLayout)> {
    let s = window_shift(w);
    let layout = WindowLayout::for_input(g.shape(x), w, (s, s))?;
    let (ph, pw) = layout.padded_hw();
    let padded = g.pad_bottom_right(x, ph, pw)?;
    let shifted = g.cyclic_shift(padded, s, s);
    Ok((g.window_partition(shifted, w)?, layout))
}

/// Inverse of [`to_windows`]: merge, reverse the shift, crop the padding.
pub fn from_windows<T: Scalar>(g: &mut Graph<'_, T>, tokens: Var, layout: &WindowLayout) -> Result<Var> {
    let merged = g.window_merge(tokens, layout.window, layout.grid)?;
    let (dy, dx) = layout.shift;
    let unshifted = g.cyclic_shift(merged, -dy, -dx);
    let [_, _, h, w] = layout.source_shape;
    g.crop(unshifted, h, w)
}

/// Token-space frequency-spatial integration:
/// `U_d = α_sp ⊙ α_f + (1 − α_sp) ⊙ S_t` with `α = σ(f_θ(·))` from one MLP
/// shared by the spatial and DCT token streams.
#[derive(Clone, Debug)]
pub struct Tfsi {
    pub mlp: Mlp,
    /// Use `α_f ⊙ F_t` in place of `α_f`.
    pub gate_frequency_tokens: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct TfsiOut {
    pub alpha_sp: Var,
    pub alpha_f: Var,
    pub u_d: Var,
}

impl Tfsi {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        gate_frequency_tokens: bool,
    ) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(store, &format!("{name}/mlp"), channels)?,
            gate_frequency_tokens,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, s_t: Var, f_t: Var) -> Result<TfsiOut> {
        let zs = self.mlp.forward(g, s_t)?;
        let alpha_sp = g.sigmoid(zs);
        let zf = self.mlp.forward(g, f_t)?;
        let alpha_f = g.sigmoid(zf);
        let freq = if self.gate_frequency_tokens {
            g.mul(alpha_f, f_t)?
        } else {
            alpha_f
        };
        let gated = g.mul(alpha_sp, freq)?;
        let keep = g.one_minus(alpha_sp);
        let skip = g.mul(keep, s_t)?;
        let u_d = g.add(gated, skip)?;
        Ok(TfsiOut {
            alpha_sp,
            alpha_f,
            u_d,
        })
    }
}

/// Feature-space dual-solver channel attention. Euler and RK2 steps of a
/// pointwise flow are fused with the skip path, then reweighted by a
/// heterogeneous channel attention map.
#[derive(Clone, Debug)]
pub struct Fdca {
    pub flow: Conv2d,
    pub tau: Dense,
    pub alpha: Dense,
    pub hca: Mlp,
}

#[derive(Clone, Copy, Debug)]
pub struct FdcaOut {
    /// Step size, `N×1×1×1`.
    pub tau: Var,
    /// Solver weights, `N×2×1×1`, softmax over the channel axis.
    pub alpha_p: Var,
    pub u_e: Var,
    pub u_r: Var,
    pub u_fu: Var,
    pub a_hs: Var,
    pub u_out: Var,
}

impl Fdca {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            flow: Conv2d::new(store, &format!("{name}/flow"), ConvKind::Pc, channels, channels, 1)?,
            tau: Dense::new(store, &format!("{name}/tau"), channels, 1),
            alpha: Dense::new(store, &format!("{name}/alpha"), channels, 2),
            hca: Mlp::new(store, &format!("{name}/hca"), channels)?,
        })
    }

    /// `scale` selects which component of `α_p` gates the solver update.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, h0: Var, scale: usize) -> Result<FdcaOut> {
        let pooled = g.pool_global(h0, PoolKind::Avg)?;
        let zt = self.tau.forward(g, pooled)?;
        let tau = g.sigmoid(zt);
        let za = self.alpha.forward(g, pooled)?;
        let alpha_p = g.softmax(za, 1)?;

        let k1 = self.flow.forward(g, h0)?;
        let step = g.mul(tau, k1)?;
        let u_e = g.add(h0, step)?;
        let half = g.scale(step, T::of(0.5));
        let mid = g.add(h0, half)?;
        let k2 = self.flow.forward(g, mid)?;
        let step2 = g.mul(tau, k2)?;
        let u_r = g.add(h0, step2)?;

        let a = g.slice_channels(alpha_p, scale, 1)?;
        let both = g.add(u_e, u_r)?;
        let upd = g.mul(a, both)?;
        let rest = g.one_minus(a);
        let skip = g.mul(rest, h0)?;
        let u_fu = g.add(upd, skip)?;

        let d = g.pooled_descriptor(u_fu)?;
        let z = self.hca.forward(g, d)?;
        let a_hs = g.sigmoid(z);
        let u_out = g.mul(u_fu, a_hs)?;
        Ok(FdcaOut {
            tau,
            alpha_p,
            u_e,
            u_r,
            u_fu,
            a_hs,
            u_out,
        })
    }
}

/// One window scale of Hy-SFA.
#[derive(Clone, Debug)]
pub struct HysfaScale {
    pub window: usize,
    pub tfsi: Option<Tfsi>,
    pub fdca: Option<Fdca>,
}

/// Intermediate values of one scale, for inspection.
#[derive(Clone, Copy, Debug)]
pub struct ScaleTrace {
    pub s_t: Var,
    pub f_t: Var,
    pub u_d: Var,
    pub tfsi: Option<TfsiOut>,
    pub fdca: Option<FdcaOut>,
    pub c_e: Var,
    /// Softmax of `C_e` over channels, `N×C×1×1`.
    pub omega_ins: Var,
    /// Global weight of this scale, `N×1×1×1`.
    pub omega_g: Var,
    pub x_tilde: Var,
}

#[derive(Clone, Debug)]
pub struct HysfaTrace {
    pub scales: Vec<ScaleTrace>,
    pub out: Var,
}

/// `x + SP(Σ_ws ω_ins,ws · ω_g,ws · x̃_ws)` over the window scales.
#[derive(Clone, Debug)]
pub struct Hysfa {
    pub scales: Vec<HysfaScale>,
}

impl Hysfa {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        windows: [usize; 2],
        sw: &Components,
        gate_frequency_tokens: bool,
    ) -> Result<Self> {
        let mut scales = Vec::with_capacity(windows.len());
        for w in windows {
            let base = format!("{name}/w{w}");
            scales.push(HysfaScale {
                window: w,
                tfsi: if sw.tfsi {
                    Some(Tfsi::new(store, &format!("{base}/tfsi"), channels, gate_frequency_tokens)?)
                } else {
                    None
                },
                fdca: if sw.fdca {
                    Some(Fdca::new(store, &format!("{base}/fdca"), channels)?)
                } else {
                    None
                },
            });
        }
        Ok(Self { scales })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, x)?.out)
    }

    pub fn forward_traced<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<HysfaTrace> {
        let n = g.shape(x)[0];
        let mut traces = Vec::with_capacity(self.scales.len());
        let mut acc: Option<Var> = None;
        for (ws, scale) in self.scales.iter().enumerate() {
            let w = scale.window;
            let (s_t, layout) = to_windows(g, x, w)?;
            let f_t = token_dct(g, s_t, w)?;
            let tfsi = match &scale.tfsi {
                Some(t) => Some(t.forward(g, s_t, f_t)?),
                None => None,
            };
            let u_d = tfsi.map_or(s_t, |t| t.u_d);
            let fdca = match &scale.fdca {
                Some(f) => Some(f.forward(g, u_d, ws)?),
                None => None,
            };
            let u_out = fdca.map_or(u_d, |f| f.u_out);
            let x_tilde = from_windows(g, u_out, &layout)?;

            let c_e = g.pooled_descriptor(f_t)?;
            let omega_ins = g.softmax(c_e, 1)?;
            let omega_g = match &fdca {
                Some(f) => g.slice_channels(f.alpha_p, ws, 1)?,
                None => g.constant(Tensor::full([n, 1, 1, 1], T::of(0.5))),
            };
            let wts = g.mul(omega_ins, omega_g)?;
            let term = g.mul(wts, x_tilde)?;
            acc = Some(match acc {
                None => term,
                Some(a) => g.add(a, term)?,
            });
            traces.push(ScaleTrace {
                s_t,
                f_t,
                u_d,
                tfsi,
                fdca,
                c_e,
                omega_ins,
                omega_g,
                x_tilde,
            });
        }
        let out = match acc {
            Some(sum) => {
                let pooled = g.pool_local(sum, PoolKind::Sum, RESIDUAL_POOL, 1)?;
                g.add(x, pooled)?
            }
            None => x,
        };
        Ok(HysfaTrace { scales: traces, out })
    }
}
