//! Training and evaluation of a network on a synthetic dataset.

use std::time::Instant;

use hypca::network::fused_probabilities;
use hypca::{count_params_macs, mml_loss, Adam, Graph, HypcaNet, Mode, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::metrics::{self, Metrics};
use crate::synth::SyntheticDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// The training loss became NaN or infinite at this epoch and step.
    Diverged { epoch: usize, step: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

/// Test metrics of one head. `modality` is a modality index, or `None` for
/// probabilities averaged over modalities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub task: usize,
    pub modality: Option<usize>,
    #[serde(flatten)]
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config_digest: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub status: RunStatus,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights were evaluated on the test split; 0 is the
    /// untrained network.
    pub best_epoch: usize,
    pub test: Vec<HeadMetrics>,
    /// Mean over tasks of the modality-averaged heads.
    pub summary: Metrics,
    pub params: u64,
    pub macs: u64,
    /// Kept out of the serialized record so reruns are byte-identical; the
    /// writers put it in the timing sidecar.
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl ExperimentResult {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.train_loss)
    }
}

/// Seed of the dropout stream of step `step`, distinct from the init and
/// shuffle streams.
fn step_seed(seed: u64, step: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(step).rotate_left(17) ^ 0xD1B5_4A32_D192_ED03
}

/// Mean loss and per-head probabilities of a split in eval mode.
pub struct Evaluation {
    pub loss: f64,
    /// `[task][modality]` then sample rows.
    pub per_modality: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[task]` then sample rows.
    pub fused: Vec<Vec<Vec<f64>>>,
    pub labels: Vec<usize>,
}

pub fn evaluate(
    net: &HypcaNet,
    store: &mut ParamStore<f64>,
    ds: &SyntheticDataset,
    indices: &[usize],
    batch: usize,
) -> Result<Evaluation> {
    let cfg = &net.config;
    let (t, m) = (cfg.tasks(), cfg.modalities);
    let lambda = cfg.lambda();
    let mut loss_sum = 0.0;
    let mut per_modality = vec![vec![Vec::new(); m]; t];
    let mut fused = vec![Vec::new(); t];
    for chunk in indices.chunks(batch) {
        let mut g = Graph::new(store, Mode::Eval, 0);
        let images: Vec<_> = ds.batch::<f64>(chunk).into_iter().map(|x| g.input(x)).collect();
        let out = net.forward(&mut g, &images)?;
        let labels = vec![ds.labels_of(chunk); t];
        let loss = mml_loss(&mut g, &out.logits, &labels, &lambda)?;
        loss_sum += g.value(loss).item()? * chunk.len() as f64;
        for (ti, row) in out.logits.iter().enumerate() {
            for (mi, &z) in row.iter().enumerate() {
                per_modality[ti][mi].extend(hypca::network::probabilities(g.value(z)));
            }
        }
        for (ti, rows) in fused_probabilities(&g, &out.logits).into_iter().enumerate() {
            fused[ti].extend(rows);
        }
    }
    Ok(Evaluation {
        loss: loss_sum / indices.len().max(1) as f64,
        per_modality,
        fused,
        labels: ds.labels_of(indices),
    })
}

impl Evaluation {
    pub fn head_metrics(&self) -> Result<(Vec<HeadMetrics>, Metrics)> {
        let mut heads = Vec::new();
        let mut fused = Vec::new();
        for (task, (rows, f)) in self.per_modality.iter().zip(&self.fused).enumerate() {
            for (modality, p) in rows.iter().enumerate() {
                heads.push(HeadMetrics {
                    task,
                    modality: Some(modality),
                    metrics: metrics::metrics(p, &self.labels)?,
                });
            }
            let fm = metrics::metrics(f, &self.labels)?;
            fused.push(fm);
            heads.push(HeadMetrics {
                task,
                modality: None,
                metrics: fm,
            });
        }
        Ok((heads, metrics::mean(&fused)))
    }
}

/// A freshly initialized network and its parameters.
pub fn build(cfg: &ExperimentConfig) -> Result<(HypcaNet, ParamStore<f64>)> {
    let mut store = ParamStore::new(cfg.seed);
    let net = HypcaNet::new(&mut store, &cfg.model)?;
    Ok((net, store))
}

pub struct Trained {
    pub result: ExperimentResult,
    pub net: HypcaNet,
    /// Holds the best-validation weights.
    pub store: ParamStore<f64>,
}

impl Trained {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_store(&self.store, &self.result.config_digest)
    }
}

/// Adam over shuffled mini-batches for a fixed number of epochs. The
/// weights with the lowest validation loss (the untrained weights count as
/// epoch 0) are evaluated on the test split. A non-finite training loss
/// stops the run with [`RunStatus::Diverged`].
pub fn train(cfg: &ExperimentConfig, ds: &SyntheticDataset) -> Result<Trained> {
    let start = Instant::now();
    cfg.validate()?;
    let cost = count_params_macs(&cfg.model, ds.spec.image_size, ds.spec.image_size)?;
    let (net, mut store) = build(cfg)?;
    let (train_idx, val_idx, test_idx) = ds.spec.split();
    let mut order: Vec<usize> = train_idx.collect();
    let val: Vec<usize> = val_idx.collect();
    let test: Vec<usize> = test_idx.collect();
    let lambda = cfg.model.lambda();
    let tasks = cfg.model.tasks();
    let eval_batch = cfg.train.eval_batch_size;

    let mut adam = Adam::new(&store, cfg.train.adam);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);

    let mut best_val = evaluate(&net, &mut store, ds, &val, eval_batch)?.loss;
    let mut best = store.snapshot();
    let mut best_epoch = 0;
    let mut epochs = Vec::new();
    let mut status = RunStatus::Completed;
    let mut step = 0u64;

    'outer: for epoch in 1..=cfg.train.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(cfg.train.batch_size).enumerate() {
            step += 1;
            let mut g = Graph::new(&mut store, Mode::Train, step_seed(cfg.seed, step));
            let images: Vec<_> = ds.batch::<f64>(chunk).into_iter().map(|x| g.input(x)).collect();
            let out = net.forward(&mut g, &images)?;
            let labels = vec![ds.labels_of(chunk); tasks];
            let loss = mml_loss(&mut g, &out.logits, &labels, &lambda)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                status = RunStatus::Diverged { epoch, step: bi + 1 };
                break 'outer;
            }
            g.backward(loss)?;
            drop(g);
            adam.step(&mut store);
            loss_sum += value * chunk.len() as f64;
        }
        let ev = evaluate(&net, &mut store, ds, &val, eval_batch)?;
        let val_accuracy = ev.head_metrics()?.1.accuracy;
        epochs.push(EpochLog {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            val_loss: ev.loss,
            val_accuracy,
        });
        if ev.loss.is_nan() {
            status = RunStatus::Diverged { epoch, step: 0 };
            break;
        }
        if ev.loss < best_val {
            best_val = ev.loss;
            best = store.snapshot();
            best_epoch = epoch;
        }
    }

    store.restore(&best);
    let (test_heads, summary) = evaluate(&net, &mut store, ds, &test, eval_batch)?.head_metrics()?;
    let result = ExperimentResult {
        config_digest: cfg.digest(),
        config: cfg.clone(),
        seed: cfg.seed,
        status,
        epochs,
        best_epoch,
        test: test_heads,
        summary,
        params: cost.params,
        macs: cost.macs,
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(Trained { result, net, store })
}

/// Test metrics of a stored checkpoint.
pub fn evaluate_checkpoint(
    cfg: &ExperimentConfig,
    ds: &SyntheticDataset,
    ckpt: &Checkpoint,
) -> Result<(Vec<HeadMetrics>, Metrics)> {
    let (net, mut store) = build(cfg)?;
    ckpt.apply(&mut store)?;
    let (_, _, test) = ds.spec.split();
    let test: Vec<usize> = test.collect();
    evaluate(&net, &mut store, ds, &test, cfg.train.eval_batch_size)?.head_metrics()
}

