//! Multimodal mutual attention: wavelet channel fusion (FCIF), spatial
//! multi-scale fusion (SMIF) and their bidirectional cross-interaction (MCBI).

use crate::autodiff::{Graph, Var};
use crate::config::{Components, Wiring};
use crate::error::{invalid, Result};
use crate::kernels::PoolKind;
use crate::nn::{BatchNorm, ChannelWeights};
use crate::params::ParamStore;
use crate::rala::{Mshc, Scpfa};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Hierarchical channel fusion of the four packed Haar bands
/// (`N × 4C × h × w`, order LL, HL, LH, HH). Returns `(C_Sum, C_Diff)`.
pub fn hcf<T: Scalar>(g: &mut Graph<'_, T>, packed: Var) -> Result<(Var, Var)> {
    let c = g.shape(packed)[1] / 4;
    let bands = (0..4)
        .map(|b| g.slice_channels(packed, b * c, c))
        .collect::<Result<Vec<_>>>()?;
    let mut per_kind = Vec::with_capacity(4);
    for kind in PoolKind::ALL {
        let mut acc = g.pool_global(bands[0], kind)?;
        for &band in &bands[1..] {
            let p = g.pool_global(band, kind)?;
            acc = g.add(acc, p)?;
        }
        per_kind.push(acc);
    }
    let (gap, gmp, gmn, gsp) = (per_kind[0], per_kind[1], per_kind[2], per_kind[3]);
    let s = g.add(gap, gmp)?;
    let s = g.add(s, gmn)?;
    let c_sum = g.add(s, gsp)?;
    let low = g.add(gap, gmn)?;
    let c_diff = g.sub(gmp, low)?;
    Ok((c_sum, c_diff))
}

/// `C_f = Σ_j ω_j ⊙ DR_j(BN_j(C_j))` over `j ∈ {Sum, Diff}`.
#[derive(Clone, Debug)]
pub struct Fcif {
    pub bn_sum: BatchNorm,
    pub bn_diff: BatchNorm,
    pub w_sum: ChannelWeights,
    pub w_diff: ChannelWeights,
    pub dropout: f64,
}

impl Fcif {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, dropout: f64) -> Self {
        Self {
            bn_sum: BatchNorm::new(store, &format!("{name}/bn_sum"), channels),
            bn_diff: BatchNorm::new(store, &format!("{name}/bn_diff"), channels),
            w_sum: ChannelWeights::new(store, &format!("{name}/w_sum"), channels),
            w_diff: ChannelWeights::new(store, &format!("{name}/w_diff"), channels),
            dropout,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = g.shape(x);
        let x = if h % 2 == 1 || w % 2 == 1 {
            g.pad_bottom_right(x, h + h % 2, w + w % 2)?
        } else {
            x
        };
        let packed = g.haar_dwt(x)?;
        let (c_sum, c_diff) = hcf(g, packed)?;
        let p = T::of(self.dropout);
        let a = self.bn_sum.forward(g, c_sum)?;
        let a = g.dropout(a, p)?;
        let a = self.w_sum.forward(g, a)?;
        let b = self.bn_diff.forward(g, c_diff)?;
        let b = g.dropout(b, p)?;
        let b = self.w_diff.forward(g, b)?;
        g.add(a, b)
    }
}

/// `C_SP = GMP + GAP + GMN + GSP` of `SCPFA(MSHC(x))`.
#[derive(Clone, Debug)]
pub struct Smif {
    pub mshc: Mshc,
    pub scpfa: Scpfa,
}

impl Smif {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            mshc: Mshc::new(store, &format!("{name}/mshc"), channels)?,
            scpfa: Scpfa::new(store, &format!("{name}/scpfa"), channels)?,
        })
    }

    /// The refined map `x̂` before pooling.
    pub fn refine<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, wiring: Wiring) -> Result<Var> {
        let h = self.mshc.forward(g, x)?;
        self.scpfa.forward(g, h, wiring, &Components::default())
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, wiring: Wiring) -> Result<Var> {
        let h = self.refine(g, x, wiring)?;
        g.pooled_descriptor(h)
    }
}

/// Bidirectional cross-interaction:
/// `Ĉ_SP = ω₁⊙C_SP + ω₂⊙C_f`, `Ĉ_f = DR(BN(Ĉ_SP))⊙ω₃ + C_f⊙ω₂`,
/// returning `(σ(Ĉ_f), σ(Ĉ_SP))`.
#[derive(Clone, Debug)]
pub struct Mcbi {
    pub bn: BatchNorm,
    pub w1: ChannelWeights,
    pub w2: ChannelWeights,
    pub w3: ChannelWeights,
    pub dropout: f64,
}

impl Mcbi {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, dropout: f64) -> Self {
        Self {
            bn: BatchNorm::new(store, &format!("{name}/bn"), channels),
            w1: ChannelWeights::new(store, &format!("{name}/w1"), channels),
            w2: ChannelWeights::new(store, &format!("{name}/w2"), channels),
            w3: ChannelWeights::new(store, &format!("{name}/w3"), channels),
            dropout,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, c_f: Var, c_sp: Var) -> Result<(Var, Var)> {
        if g.shape(c_f) != g.shape(c_sp) {
            return Err(invalid("mcbi", "channel vectors differ in shape"));
        }
        let a = self.w1.forward(g, c_sp)?;
        let b = self.w2.forward(g, c_f)?;
        let c_sp_hat = g.add(a, b)?;
        let n = self.bn.forward(g, c_sp_hat)?;
        let n = g.dropout(n, T::of(self.dropout))?;
        let n = self.w3.forward(g, n)?;
        let c_f_hat = g.add(n, b)?;
        let s1 = g.sigmoid(c_f_hat);
        let s2 = g.sigmoid(c_sp_hat);
        Ok((s1, s2))
    }
}

/// Modality pairs that exchange information. Two modalities form one
/// bidirectional pair; more form a ring `i → i+1`.
pub fn modality_pairs(m: usize) -> Vec<(usize, usize)> {
    match m {
        0 | 1 => Vec::new(),
        2 => vec![(0, 1)],
        _ => (0..m).map(|i| (i, (i + 1) % m)).collect(),
    }
}

/// `X^s_i = X'_i ⊙ A_{D_i} ⊙ ω_i`.
#[derive(Clone, Debug)]
pub struct Mmmua {
    pub fcif: Option<Fcif>,
    pub smif: Option<Smif>,
    pub mcbi: Option<Mcbi>,
    pub omega: Vec<ChannelWeights>,
}

/// Channel maps each modality received, in pair order.
#[derive(Clone, Debug)]
pub struct MmmuaTrace {
    pub maps: Vec<Vec<Var>>,
    pub out: Vec<Var>,
}

impl Mmmua {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        modalities: usize,
        sw: &Components,
        dropout: f64,
    ) -> Result<Self> {
        Ok(Self {
            fcif: sw.fcif.then(|| Fcif::new(store, &format!("{name}/fcif"), channels, dropout)),
            smif: if sw.smif {
                Some(Smif::new(store, &format!("{name}/smif"), channels)?)
            } else {
                None
            },
            mcbi: sw.mcbi.then(|| Mcbi::new(store, &format!("{name}/mcbi"), channels, dropout)),
            omega: (0..modalities)
                .map(|i| ChannelWeights::new(store, &format!("{name}/omega{i}"), channels))
                .collect(),
        })
    }

    /// Attention pair for modalities `(i, j)`: `(map for i, map for j)`.
    pub fn pair_maps<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        xi: Var,
        xj: Var,
        wiring: Wiring,
    ) -> Result<(Var, Var)> {
        let [n, c, _, _] = g.shape(xi);
        let c_f = match &self.fcif {
            Some(f) => f.forward(g, xi)?,
            None => g.constant(Tensor::zeros([n, c, 1, 1])),
        };
        let c_sp = match &self.smif {
            Some(s) => s.forward(g, xj, wiring)?,
            None => g.constant(Tensor::zeros([n, c, 1, 1])),
        };
        match &self.mcbi {
            Some(m) => m.forward(g, c_f, c_sp),
            None => {
                let a = g.sigmoid(c_f);
                let b = g.sigmoid(c_sp);
                Ok((a, b))
            }
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, xs: &[Var], wiring: Wiring) -> Result<Vec<Var>> {
        Ok(self.forward_traced(g, xs, wiring)?.out)
    }

    pub fn forward_traced<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        xs: &[Var],
        wiring: Wiring,
    ) -> Result<MmmuaTrace> {
        let m = xs.len();
        if m < 2 {
            return Err(invalid("mmmua", "needs at least two modalities"));
        }
        if m != self.omega.len() {
            return Err(invalid("mmmua", format!("built for {} modalities, got {m}", self.omega.len())));
        }
        let shape = g.shape(xs[0]);
        if let Some(&bad) = xs.iter().find(|&&x| g.shape(x) != shape) {
            return Err(crate::error::Error::ShapeMismatch {
                op: "mmmua",
                expected: format!("{shape:?} for every modality"),
                got: g.shape(bad),
            });
        }
        let mut maps: Vec<Vec<Var>> = vec![Vec::new(); m];
        for (i, j) in modality_pairs(m) {
            let (ai, aj) = self.pair_maps(g, xs[i], xs[j], wiring)?;
            maps[i].push(ai);
            maps[j].push(aj);
        }
        let mut out = Vec::with_capacity(m);
        for (i, &x) in xs.iter().enumerate() {
            let mut h = x;
            for &a in &maps[i] {
                h = g.mul(h, a)?;
            }
            out.push(self.omega[i].forward(g, h)?);
        }
        Ok(MmmuaTrace { maps, out })
    }
}
