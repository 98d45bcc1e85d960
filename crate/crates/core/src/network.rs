//! Full two-phase network: per-modality stems, cascaded hybrid blocks, and
//! task heads trained with a weighted multitask loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax, Graph, Mode, Var};
use crate::config::ModelConfig;
use crate::dvca::Dvca;
use crate::error::{invalid, Error, Result};
use crate::kernels::{ConvKind, PoolKind};
use crate::nn::{Conv2d, Dense};
use crate::params::ParamStore;
use crate::rala::Rala;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stem stages; the first `log2(downsample)` of them use stride 2.
pub const STEM_STAGES: usize = 2;

/// Two `3×3 conv → ReLU` stages mapping image channels to features.
#[derive(Clone, Debug)]
pub struct Stem {
    pub stages: Vec<Conv2d>,
    pub downsample: usize,
}

impl Stem {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        channels: usize,
        downsample: usize,
    ) -> Result<Self> {
        let strided = downsample.trailing_zeros() as usize;
        if !downsample.is_power_of_two() || strided > STEM_STAGES {
            return Err(invalid("stem", format!("downsample {downsample} not in {{1, 2, 4}}")));
        }
        let stages = (0..STEM_STAGES)
            .map(|i| {
                let c_in = if i == 0 { in_channels } else { channels };
                let stride = if i < strided { 2 } else { 1 };
                Conv2d::new(
                    store,
                    &format!("{name}/conv{}", i + 1),
                    ConvKind::Standard { stride },
                    c_in,
                    channels,
                    3,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Self { stages, downsample })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = g.shape(x);
        if h % self.downsample != 0 || w % self.downsample != 0 {
            return Err(invalid(
                "stem",
                format!("{h}x{w} input not divisible by {}", self.downsample),
            ));
        }
        let mut h = x;
        for conv in &self.stages {
            let z = conv.forward(g, h)?;
            h = g.relu(z);
        }
        Ok(h)
    }
}

/// Per-modality RALA followed by cross-modal DVCA.
#[derive(Clone, Debug)]
pub struct HypcaBlock {
    pub rala: Vec<Rala>,
    pub dvca: Option<Dvca>,
}

impl HypcaBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let rala = if cfg.modules.rala {
            (0..cfg.modalities)
                .map(|i| Rala::new(store, &format!("{name}/rala{i}"), cfg.channels, &cfg.components))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let dvca = if cfg.modules.hysfa || cfg.modules.mmmua {
            Some(Dvca::new(
                store,
                &format!("{name}/dvca"),
                cfg.channels,
                cfg.modalities,
                cfg.window_sizes,
                &cfg.modules,
                &cfg.components,
                cfg.dropout,
                cfg.gate_frequency_tokens,
            )?)
        } else {
            None
        };
        Ok(Self { rala, dvca })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, xs: &[Var], cfg: &ModelConfig) -> Result<Vec<Var>> {
        let shape = g.shape(xs[0]);
        if xs.iter().any(|&x| g.shape(x) != shape) {
            return Err(Error::ShapeMismatch {
                op: "hypca_block",
                expected: format!("{shape:?} for every modality"),
                got: xs.iter().map(|&x| g.shape(x)).find(|&s| s != shape).unwrap_or(shape),
            });
        }
        let hs = if self.rala.is_empty() {
            xs.to_vec()
        } else {
            xs.iter()
                .zip(&self.rala)
                .map(|(&x, r)| r.forward(g, x, cfg.wiring, &cfg.components))
                .collect::<Result<Vec<_>>>()?
        };
        match &self.dvca {
            Some(d) => d.forward(g, &hs, cfg.wiring),
            None => Ok(hs),
        }
    }
}

/// Per (task, modality) `GAP → Dense(C → classes)`.
#[derive(Clone, Debug)]
pub struct Heads {
    /// Indexed `[task][modality]`.
    pub dense: Vec<Vec<Dense>>,
}

impl Heads {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &ModelConfig) -> Self {
        let dense = cfg
            .classes
            .iter()
            .enumerate()
            .map(|(t, &k)| {
                (0..cfg.modalities)
                    .map(|i| Dense::new(store, &format!("{name}/task{t}/mod{i}"), cfg.channels, k))
                    .collect()
            })
            .collect();
        Self { dense }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, xs: &[Var]) -> Result<Vec<Vec<Var>>> {
        let pooled = xs
            .iter()
            .map(|&x| g.pool_global(x, PoolKind::Avg))
            .collect::<Result<Vec<_>>>()?;
        self.dense
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&pooled)
                    .map(|(d, &p)| d.forward(g, p))
                    .collect::<Result<Vec<_>>>()
            })
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct NetOutput {
    /// Shared representations, one per modality.
    pub features: Vec<Var>,
    /// Logits indexed `[task][modality]`, each `N × classes × 1 × 1`.
    pub logits: Vec<Vec<Var>>,
}

#[derive(Clone, Debug)]
pub struct HypcaNet {
    pub config: ModelConfig,
    pub stems: Vec<Stem>,
    pub blocks: Vec<HypcaBlock>,
    pub heads: Heads,
}

impl HypcaNet {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let stems = (0..config.modalities)
            .map(|i| {
                Stem::new(
                    store,
                    &format!("stem{i}"),
                    config.in_channels,
                    config.channels,
                    config.stem_downsample,
                )
            })
            .collect::<Result<_>>()?;
        let blocks = (0..config.blocks)
            .map(|b| HypcaBlock::new(store, &format!("block{b}"), config))
            .collect::<Result<_>>()?;
        let heads = Heads::new(store, "head", config);
        Ok(Self {
            config: config.clone(),
            stems,
            blocks,
            heads,
        })
    }

    /// Stems followed by the cascaded blocks: the shared representations.
    pub fn rmil<T: Scalar>(&self, g: &mut Graph<'_, T>, images: &[Var]) -> Result<Vec<Var>> {
        if images.len() != self.config.modalities {
            return Err(invalid(
                "rmil",
                format!("expected {} modalities, got {}", self.config.modalities, images.len()),
            ));
        }
        let mut xs = images
            .iter()
            .zip(&self.stems)
            .map(|(&x, s)| s.forward(g, x))
            .collect::<Result<Vec<_>>>()?;
        for block in &self.blocks {
            xs = block.forward(g, &xs, &self.config)?;
        }
        Ok(xs)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, images: &[Var]) -> Result<NetOutput> {
        let features = self.rmil(g, images)?;
        let logits = self.heads.forward(g, &features)?;
        Ok(NetOutput { features, logits })
    }
}

/// `Σ_t Σ_i λ[t][i] · CE(logits[t][i], labels[t])`.
pub fn mml_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    logits: &[Vec<Var>],
    labels: &[Vec<usize>],
    lambda: &[Vec<f64>],
) -> Result<Var> {
    if lambda.len() != logits.len()
        || labels.len() != logits.len()
        || lambda.iter().zip(logits).any(|(l, row)| l.len() != row.len())
    {
        return Err(invalid("mml_loss", "loss weights must be tasks x modalities"));
    }
    let mut total: Option<Var> = None;
    for ((row, y), weights) in logits.iter().zip(labels).zip(lambda) {
        for (&z, &w) in row.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let ce = g.cross_entropy(z, y)?;
            let term = g.scale(ce, T::of(w));
            total = Some(match total {
                None => term,
                Some(a) => g.add(a, term)?,
            });
        }
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(Tensor::scalar(T::zero())),
    })
}

/// Class probabilities averaged over modalities, per task: `[task] → N × K`
/// rows flattened.
pub fn fused_probabilities<T: Scalar>(g: &Graph<'_, T>, logits: &[Vec<Var>]) -> Vec<Vec<Vec<f64>>> {
    logits
        .iter()
        .map(|row| {
            let mut acc: Option<Vec<Vec<f64>>> = None;
            for &z in row {
                let p = probabilities(g.value(z));
                acc = Some(match acc {
                    None => p,
                    Some(mut a) => {
                        for (ra, rp) in a.iter_mut().zip(&p) {
                            ra.iter_mut().zip(rp).for_each(|(x, y)| *x += y);
                        }
                        a
                    }
                });
            }
            let mut a = acc.unwrap_or_default();
            let m = row.len().max(1) as f64;
            a.iter_mut().flatten().for_each(|v| *v /= m);
            a
        })
        .collect()
}

/// Row-wise softmax of `N × K × 1 × 1` logits.
pub fn probabilities<T: Scalar>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    let [n, k, h, w] = logits.shape();
    let flat = logits.clone().reshape([n, k * h * w, 1, 1]).expect("same size");
    let p = softmax(&flat, 1);
    p.data()
        .chunks(k * h * w)
        .map(|r| r.iter().map(|v| v.as_f64()).collect())
        .collect()
}

/// Closed-form cost of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        kind: ConvKind,
        c_in: usize,
        c_out: usize,
        k: usize,
        /// Output spatial extent.
        h: usize,
        w: usize,
    },
    Dense {
        fan_in: usize,
        fan_out: usize,
    },
    /// Parameters with no multiply-accumulates (normalization affine terms,
    /// channel weights).
    Elementwise { params: usize },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cost {
    pub params: u64,
    pub macs: u64,
}

impl LayerSpec {
    pub fn cost(&self) -> Result<Cost> {
        Ok(match *self {
            LayerSpec::Conv {
                kind,
                c_in,
                c_out,
                k,
                h,
                w,
            } => {
                let geom = kind.geometry(c_in, c_out, k)?;
                Cost {
                    params: geom.params() as u64,
                    macs: geom.macs(h, w),
                }
            }
            LayerSpec::Dense { fan_in, fan_out } => Cost {
                params: (fan_in * fan_out + fan_out) as u64,
                macs: (fan_in * fan_out) as u64,
            },
            LayerSpec::Elementwise { params } => Cost {
                params: params as u64,
                macs: 0,
            },
        })
    }
}

/// Sums the closed-form costs of a layer list; an empty list costs nothing.
pub fn count_layers(layers: &[LayerSpec]) -> Result<Cost> {
    layers.iter().try_fold(Cost::default(), |acc, l| {
        let c = l.cost()?;
        Ok(Cost {
            params: acc.params + c.params,
            macs: acc.macs + c.macs,
        })
    })
}

/// Parameter count of a constructed network and the multiply-accumulates of
/// one forward pass of a single `height × width` sample. Each executed conv
/// or dense layer contributes its closed-form MAC count; pooling,
/// activations and elementwise products contribute none.
pub fn count_params_macs(config: &ModelConfig, height: usize, width: usize) -> Result<Cost> {
    let mut store = ParamStore::<f64>::new(0);
    let net = HypcaNet::new(&mut store, config)?;
    let params = store.num_scalars() as u64;
    let mut g = Graph::new(&mut store, Mode::Eval, 0);
    let images: Vec<Var> = (0..config.modalities)
        .map(|_| g.input(Tensor::zeros([1, config.in_channels, height, width])))
        .collect();
    net.forward(&mut g, &images)?;
    Ok(Cost {
        params,
        macs: g.macs(),
    })
}
