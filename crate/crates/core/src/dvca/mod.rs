//! Dual-view cascaded attention: per-modality Hy-SFA followed by
//! cross-modal MMMUA.

pub mod hysfa;
pub mod mmmua;

pub use hysfa::{Fdca, FdcaOut, Hysfa, HysfaScale, HysfaTrace, ScaleTrace, Tfsi, TfsiOut};
pub use mmmua::{hcf, modality_pairs, Fcif, Mcbi, Mmmua, MmmuaTrace, Smif};

use crate::autodiff::{Graph, Var};
use crate::config::{Components, Modules, Wiring};
use crate::error::{invalid, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct Dvca {
    /// One Hy-SFA per modality, or empty when the module is disabled.
    pub hysfa: Vec<Hysfa>,
    pub mmmua: Option<Mmmua>,
}

impl Dvca {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        modalities: usize,
        windows: [usize; 2],
        modules: &Modules,
        sw: &Components,
        dropout: f64,
        gate_frequency_tokens: bool,
    ) -> Result<Self> {
        let hysfa = if modules.hysfa {
            (0..modalities)
                .map(|i| {
                    Hysfa::new(
                        store,
                        &format!("{name}/hysfa{i}"),
                        channels,
                        windows,
                        sw,
                        gate_frequency_tokens,
                    )
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let mmmua = if modules.mmmua {
            Some(Mmmua::new(store, &format!("{name}/mmmua"), channels, modalities, sw, dropout)?)
        } else {
            None
        };
        Ok(Self { hysfa, mmmua })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, xs: &[Var], wiring: Wiring) -> Result<Vec<Var>> {
        if !self.hysfa.is_empty() && self.hysfa.len() != xs.len() {
            return Err(invalid("dvca", "modality count does not match the block"));
        }
        let refined = if self.hysfa.is_empty() {
            xs.to_vec()
        } else {
            xs.iter()
                .zip(&self.hysfa)
                .map(|(&x, h)| h.forward(g, x))
                .collect::<Result<Vec<_>>>()?
        };
        match &self.mmmua {
            Some(m) => m.forward(g, &refined, wiring),
            None => Ok(refined),
        }
    }
}
