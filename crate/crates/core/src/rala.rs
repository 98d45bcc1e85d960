//! Residual adaptive learning attention: multi-scale heterogeneous
//! convolution, pooled channel and spatial attention, and their parallel
//! fusion.

use crate::autodiff::{Graph, Var};
use crate::config::{shuffle_groups, Components, Wiring};
use crate::error::Result;
use crate::kernels::{ConvKind, PoolKind};
use crate::nn::{BatchNorm, Conv2d, Dense};
use crate::params::ParamStore;
use crate::scalar::Scalar;

/// Local pooling window used by SHIA.
pub const SHIA_POOL: usize = 3;
/// Kernel of SHIA's final single-map convolution.
pub const SHIA_KERNEL: usize = 3;

/// Three heterogeneous branches (1×1 grouped pointwise, 3×3 depthwise,
/// 3×3 depthwise dilated by 2) summed, channel-shuffled, then refined by
/// grouped pointwise, depthwise and stride-1 "strided" depthwise layers.
#[derive(Clone, Debug)]
pub struct Mshc {
    pub branch_gpc: Conv2d,
    pub branch_dwc: Conv2d,
    pub branch_ddc: Conv2d,
    pub groups: usize,
    pub gpc: Conv2d,
    pub dwc: Conv2d,
    pub sdwc: Conv2d,
}

impl Mshc {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let g = shuffle_groups(channels);
        let c = channels;
        let conv = |store: &mut ParamStore<T>, slot: &str, kind, k| {
            Conv2d::new(store, &format!("{name}/{slot}"), kind, c, c, k)
        };
        Ok(Self {
            branch_gpc: conv(store, "hc1", ConvKind::Gpc { groups: g }, 1)?,
            branch_dwc: conv(store, "hc3", ConvKind::Dwc, 3)?,
            branch_ddc: conv(store, "hc5", ConvKind::Ddc { dilation: 2 }, 3)?,
            groups: g,
            gpc: conv(store, "gpc", ConvKind::Gpc { groups: g }, 1)?,
            dwc: conv(store, "dwc", ConvKind::Dwc, 3)?,
            sdwc: conv(store, "sdwc", ConvKind::Sdwc { stride: 1 }, 3)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let b1 = self.branch_gpc.forward(g, x)?;
        let b3 = self.branch_dwc.forward(g, x)?;
        let b5 = self.branch_ddc.forward(g, x)?;
        let fused = g.add(b1, b3)?;
        let fused = g.add(fused, b5)?;
        let h = g.channel_shuffle(fused, self.groups)?;
        let h = self.dwc.forward(g, h)?;
        let h = self.gpc.forward(g, h)?;
        self.sdwc.forward(g, h)
    }
}

/// Channel attention `σ(FC(GAP + GMP + GMN + GSP))`, shape `N×C×1×1`.
#[derive(Clone, Debug)]
pub struct Chia {
    pub fc: Dense,
}

impl Chia {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        Self {
            fc: Dense::new(store, &format!("{name}/fc"), channels, channels),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let d = g.pooled_descriptor(x)?;
        let z = self.fc.forward(g, d)?;
        Ok(g.sigmoid(z))
    }
}

/// Spatial attention `σ(Conv(AP + MP + MN + SP))`, shape `N×1×H×W`. Each
/// local pool is reduced to one map by its own pointwise conv before the sum.
#[derive(Clone, Debug)]
pub struct Shia {
    pub reduce: Vec<Conv2d>,
    pub conv: Conv2d,
}

impl Shia {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let reduce = PoolKind::ALL
            .iter()
            .map(|k| Conv2d::new(store, &format!("{name}/reduce_{}", k.tag()), ConvKind::Pc, channels, 1, 1))
            .collect::<Result<_>>()?;
        let conv = Conv2d::new(
            store,
            &format!("{name}/conv"),
            ConvKind::Standard { stride: 1 },
            1,
            1,
            SHIA_KERNEL,
        )?;
        Ok(Self { reduce, conv })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for (kind, pc) in PoolKind::ALL.iter().zip(&self.reduce) {
            let p = g.pool_local(x, *kind, SHIA_POOL, 1)?;
            let r = pc.forward(g, p)?;
            acc = Some(match acc {
                None => r,
                Some(a) => g.add(a, r)?,
            });
        }
        let z = self.conv.forward(g, acc.expect("four pools"))?;
        Ok(g.sigmoid(z))
    }
}

/// Joint recalibration by CHIA and SHIA. Both wirings own the same layers.
#[derive(Clone, Debug)]
pub struct Scpfa {
    pub chia: Chia,
    pub shia: Shia,
}

impl Scpfa {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            chia: Chia::new(store, &format!("{name}/chia"), channels),
            shia: Shia::new(store, &format!("{name}/shia"), channels)?,
        })
    }

    /// A disabled attention map drops out of the fusion; with both disabled
    /// the block is the identity.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        wiring: Wiring,
        sw: &Components,
    ) -> Result<Var> {
        match wiring {
            Wiring::Hybrid => {
                let a_c = if sw.chia { Some(self.chia.forward(g, x)?) } else { None };
                let a_s = if sw.shia { Some(self.shia.forward(g, x)?) } else { None };
                let joint = match (a_c, a_s) {
                    (Some(c), Some(s)) => g.add(s, c)?,
                    (Some(c), None) => c,
                    (None, Some(s)) => s,
                    (None, None) => return Ok(x),
                };
                let a = g.sigmoid(joint);
                g.mul(x, a)
            }
            Wiring::Cascaded => {
                let mut h = x;
                if sw.chia {
                    let a_c = self.chia.forward(g, h)?;
                    h = g.mul(h, a_c)?;
                }
                if sw.shia {
                    let a_s = self.shia.forward(g, h)?;
                    h = g.mul(h, a_s)?;
                }
                Ok(h)
            }
        }
    }
}

/// `x + SCPFA(MSHC(x))`.
#[derive(Clone, Debug)]
pub struct Scala {
    pub mshc: Option<Mshc>,
    pub scpfa: Scpfa,
}

impl Scala {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        sw: &Components,
    ) -> Result<Self> {
        Ok(Self {
            mshc: if sw.mshc {
                Some(Mshc::new(store, &format!("{name}/mshc"), channels)?)
            } else {
                None
            },
            scpfa: Scpfa::new(store, &format!("{name}/scpfa"), channels)?,
        })
    }

    /// `SCPFA(MSHC(x))` without the residual.
    pub fn refine<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        wiring: Wiring,
        sw: &Components,
    ) -> Result<Var> {
        let h = match &self.mshc {
            Some(m) => m.forward(g, x)?,
            None => x,
        };
        self.scpfa.forward(g, h, wiring, sw)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        wiring: Wiring,
        sw: &Components,
    ) -> Result<Var> {
        let r = self.refine(g, x, wiring, sw)?;
        g.add(x, r)
    }
}

/// `ReLU(x + BN(PC(SCALA₂(ReLU(BN(SCALA₁(x)))))))`.
#[derive(Clone, Debug)]
pub struct Rala {
    pub scala1: Scala,
    pub bn1: BatchNorm,
    pub scala2: Scala,
    pub pc: Conv2d,
    pub bn2: BatchNorm,
}

impl Rala {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        sw: &Components,
    ) -> Result<Self> {
        Ok(Self {
            scala1: Scala::new(store, &format!("{name}/scala1"), channels, sw)?,
            bn1: BatchNorm::new(store, &format!("{name}/bn1"), channels),
            scala2: Scala::new(store, &format!("{name}/scala2"), channels, sw)?,
            pc: Conv2d::new(store, &format!("{name}/bnpc/pc"), ConvKind::Pc, channels, channels, 1)?,
            bn2: BatchNorm::new(store, &format!("{name}/bnpc/bn"), channels),
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        wiring: Wiring,
        sw: &Components,
    ) -> Result<Var> {
        let h = self.scala1.forward(g, x, wiring, sw)?;
        let h = self.bn1.forward(g, h)?;
        let h = g.relu(h);
        let h = self.scala2.forward(g, h, wiring, sw)?;
        let h = self.pc.forward(g, h)?;
        let h = self.bn2.forward(g, h)?;
        let s = g.add(x, h)?;
        Ok(g.relu(s))
    }
}
