//! Model hyperparameters and ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// How the channel and spatial attention maps of SCPFA are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wiring {
    /// `x ⊙ σ(A_S + A_C)`: both maps computed from the same input.
    #[default]
    Hybrid,
    /// `(x ⊙ A_C) ⊙ A_S`: the spatial map sees the channel-recalibrated input.
    Cascaded,
}

/// Top-level blocks. A disabled module is an identity pass-through.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Modules {
    pub rala: bool,
    pub hysfa: bool,
    pub mmmua: bool,
}

impl Default for Modules {
    fn default() -> Self {
        Self {
            rala: true,
            hysfa: true,
            mmmua: true,
        }
    }
}

impl Modules {
    pub fn from_bits(bits: [bool; 3]) -> Self {
        Self {
            rala: bits[0],
            hysfa: bits[1],
            mmmua: bits[2],
        }
    }
}

/// Sub-components inside the blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Components {
    pub mshc: bool,
    pub chia: bool,
    pub shia: bool,
    pub fcif: bool,
    pub smif: bool,
    pub mcbi: bool,
    pub tfsi: bool,
    pub fdca: bool,
}

impl Default for Components {
    fn default() -> Self {
        Self::from_bits([true; 8])
    }
}

impl Components {
    /// Order: MSHC, CHIA, SHIA, FCIF, SMIF, MCBI, TFSI, FDCA.
    pub fn from_bits(b: [bool; 8]) -> Self {
        Self {
            mshc: b[0],
            chia: b[1],
            shia: b[2],
            fcif: b[3],
            smif: b[4],
            mcbi: b[5],
            tfsi: b[6],
            fdca: b[7],
        }
    }

    pub fn bits(&self) -> [bool; 8] {
        [
            self.mshc, self.chia, self.shia, self.fcif, self.smif, self.mcbi, self.tfsi, self.fdca,
        ]
    }
}

/// Full network description. Everything that affects parameter shapes or the
/// forward computation lives here, so parameter and MAC counts are a pure
/// function of this value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of modalities (parallel branches).
    pub modalities: usize,
    /// Cascaded blocks per branch.
    pub blocks: usize,
    /// Feature channels after the stem.
    pub channels: usize,
    /// Input image channels.
    pub in_channels: usize,
    /// Spatial reduction of the stem (product of its stage strides).
    pub stem_downsample: usize,
    pub window_sizes: [usize; 2],
    /// Classes per task; its length is the task count.
    pub classes: Vec<usize>,
    /// Loss weights, `tasks × modalities`. `None` means uniform `1/(T·m)`.
    pub loss_weights: Option<Vec<Vec<f64>>>,
    pub modules: Modules,
    pub components: Components,
    pub wiring: Wiring,
    pub dropout: f64,
    /// Multiply TFSI's frequency gate by the DCT tokens (`α_f ⊙ F_t`) instead
    /// of using the gate alone.
    pub gate_frequency_tokens: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            modalities: 2,
            blocks: 2,
            channels: 16,
            in_channels: 3,
            stem_downsample: 4,
            window_sizes: [4, 8],
            classes: vec![4],
            loss_weights: None,
            modules: Modules::default(),
            components: Components::default(),
            wiring: Wiring::Hybrid,
            dropout: 0.1,
            gate_frequency_tokens: false,
        }
    }
}

impl ModelConfig {
    pub fn tasks(&self) -> usize {
        self.classes.len()
    }

    /// Shuffle and grouped-pointwise group count: 4 when it divides the
    /// channels, else 2, else 1.
    pub fn groups(&self) -> usize {
        shuffle_groups(self.channels)
    }

    /// Resolved `tasks × modalities` loss weights.
    pub fn lambda(&self) -> Vec<Vec<f64>> {
        match &self.loss_weights {
            Some(l) => l.clone(),
            None => {
                let w = 1.0 / (self.tasks() * self.modalities) as f64;
                vec![vec![w; self.modalities]; self.tasks()]
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        const OP: &str = "model_config";
        if self.modalities < 2 {
            return Err(invalid(OP, "at least two modalities are required"));
        }
        if self.channels == 0 || self.in_channels == 0 {
            return Err(invalid(OP, "channel counts must be positive"));
        }
        if self.classes.is_empty() || self.classes.iter().any(|&k| k < 2) {
            return Err(invalid(OP, "every task needs at least two classes"));
        }
        if !self.stem_downsample.is_power_of_two() {
            return Err(invalid(OP, "stem downsample must be a power of two"));
        }
        if self.window_sizes.contains(&0) {
            return Err(invalid(OP, "window sizes must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(OP, "dropout must lie in [0, 1)"));
        }
        if let Some(l) = &self.loss_weights {
            if l.len() != self.tasks() || l.iter().any(|row| row.len() != self.modalities) {
                return Err(invalid(OP, "loss weights must be tasks x modalities"));
            }
            if l.iter().flatten().any(|&v| !(v >= 0.0 && v.is_finite())) {
                return Err(invalid(OP, "loss weights must be finite and non-negative"));
            }
            if !l.iter().flatten().any(|&v| v > 0.0) {
                return Err(invalid(OP, "at least one loss weight must be positive"));
            }
        }
        Ok(())
    }
}

pub fn shuffle_groups(channels: usize) -> usize {
    if channels % 4 == 0 {
        4
    } else if channels % 2 == 0 {
        2
    } else {
        1
    }
}
