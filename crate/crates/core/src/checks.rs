//! Finite-difference suites over every differentiable op, every block, and a
//! micro network. Shared by the test suite and the command-line harness.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, Var};
use crate::config::{Components, ModelConfig, Modules, Wiring};
use crate::dvca::{Dvca, Fcif, Fdca, Hysfa, Mcbi, Mmmua, Smif, Tfsi};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::kernels::{ConvKind, PoolKind};
use crate::network::{mml_loss, Heads, HypcaBlock, HypcaNet, Stem};
use crate::nn::{BatchNorm, Conv2d, Dense};
use crate::params::ParamStore;
use crate::rala::{Chia, Mshc, Rala, Scala, Scpfa, Shia};
use crate::tensor::{Shape, Tensor};

pub const OP_TOLERANCE: f64 = 1e-4;
pub const DENSE_TOLERANCE: f64 = 1e-7;
pub const GAP_TOLERANCE: f64 = 1e-9;
pub const BLOCK_TOLERANCE: f64 = 1e-4;
pub const HEAD_TOLERANCE: f64 = 1e-6;
pub const NETWORK_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Ops,
    Blocks,
    Network,
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

/// Tensor whose entries are a shuffled uniform grid on (−1, 1): pairwise
/// distinct and at least `1/len` away from zero, so pooling ties and ReLU
/// kinks stay far outside the finite-difference step.
pub fn distinct_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    let len: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..len)
        .map(|i| (2 * i + 1) as f64 / len as f64 - 1.0)
        .collect();
    vals.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Tensor::new(shape, vals).expect("length matches shape")
}

/// Adds `U(−amp, amp)` to every parameter, breaking the symmetry of zero
/// biases and unit channel weights.
pub fn jitter(store: &mut ParamStore<f64>, seed: u64, amp: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v += rng.gen_range(-amp..amp);
        }
    }
}

fn run<F>(
    name: &str,
    tolerance: f64,
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
    f: F,
) -> Result<CheckOutcome>
where
    F: Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>,
{
    let report = grad_check(store, inputs, opts, f)?;
    Ok(CheckOutcome {
        name: name.to_string(),
        tolerance,
        report,
    })
}

fn eval() -> GradCheckOptions {
    GradCheckOptions::default()
}

fn train() -> GradCheckOptions {
    GradCheckOptions {
        mode: Mode::Train,
        ..GradCheckOptions::default()
    }
}

fn fresh(seed: u64) -> ParamStore<f64> {
    ParamStore::new(seed)
}

pub fn run_scope(scope: Scope) -> Result<Vec<CheckOutcome>> {
    match scope {
        Scope::Ops => op_checks(),
        Scope::Blocks => block_checks(),
        Scope::Network => network_checks(),
    }
}

/// One check per differentiable primitive.
pub fn op_checks() -> Result<Vec<CheckOutcome>> {
    let x = distinct_tensor([2, 3, 4, 4], 1);
    let y = distinct_tensor([2, 3, 4, 4], 2);
    let v = distinct_tensor([1, 3, 1, 1], 3);
    let mut out = Vec::new();
    let mut none = fresh(0);
    let s = &mut none;
    let xy = [x.clone(), y.clone()];
    let xv = [x.clone(), v.clone()];
    let x1 = [x.clone()];

    out.push(run("add", OP_TOLERANCE, s, &xv, &eval(), |g, i| g.add(i[0], i[1]))?);
    out.push(run("sub", OP_TOLERANCE, s, &xv, &eval(), |g, i| g.sub(i[1], i[0]))?);
    out.push(run("mul", OP_TOLERANCE, s, &xy, &eval(), |g, i| g.mul(i[0], i[1]))?);
    out.push(run("mul_broadcast", OP_TOLERANCE, s, &xv, &eval(), |g, i| g.mul(i[0], i[1]))?);
    out.push(run("scale", OP_TOLERANCE, s, &x1, &eval(), |g, i| Ok(g.scale(i[0], 2.5)))?);
    out.push(run("add_scalar", OP_TOLERANCE, s, &x1, &eval(), |g, i| Ok(g.add_scalar(i[0], 0.3)))?);
    out.push(run("one_minus", OP_TOLERANCE, s, &x1, &eval(), |g, i| Ok(g.one_minus(i[0])))?);
    out.push(run("relu", OP_TOLERANCE, s, &x1, &eval(), |g, i| Ok(g.relu(i[0])))?);
    out.push(run("sigmoid", OP_TOLERANCE, s, &x1, &eval(), |g, i| Ok(g.sigmoid(i[0])))?);
    for axis in [1, 3] {
        out.push(run(&format!("softmax_axis{axis}"), OP_TOLERANCE, s, &x1, &eval(), |g, i| {
            g.softmax(i[0], axis)
        })?);
    }
    out.push(run("sum_all", OP_TOLERANCE, s, &x1, &eval(), |g, i| Ok(g.sum_all(i[0])))?);
    out.push(run("mean_all", OP_TOLERANCE, s, &x1, &eval(), |g, i| Ok(g.mean_all(i[0])))?);

    let xc = [distinct_tensor([2, 4, 5, 5], 4)];
    let kinds = [
        ("conv_standard", ConvKind::Standard { stride: 1 }, 3),
        ("conv_standard_s2", ConvKind::Standard { stride: 2 }, 3),
        ("conv_pc", ConvKind::Pc, 1),
        ("conv_gpc", ConvKind::Gpc { groups: 2 }, 1),
        ("conv_dwc", ConvKind::Dwc, 3),
        ("conv_ddc", ConvKind::Ddc { dilation: 2 }, 3),
        ("conv_sdwc", ConvKind::Sdwc { stride: 2 }, 3),
    ];
    for (name, kind, k) in kinds {
        let mut store = fresh(5);
        let conv = Conv2d::new(&mut store, name, kind, 4, 4, k)?;
        jitter(&mut store, 6, 0.1);
        out.push(run(name, OP_TOLERANCE, &mut store, &xc, &eval(), |g, i| conv.forward(g, i[0]))?);
    }

    let mut store = fresh(5);
    let conv = Conv2d::new(&mut store, "conv_ddc_tiny", ConvKind::Ddc { dilation: 2 }, 4, 4, 3)?;
    jitter(&mut store, 6, 0.1);
    let tiny = [distinct_tensor([2, 4, 2, 1], 16)];
    out.push(run("conv_ddc_tiny", OP_TOLERANCE, &mut store, &tiny, &eval(), |g, i| conv.forward(g, i[0]))?);

    let mut store = fresh(7);
    let dense = Dense::new(&mut store, "dense", 5, 4);
    jitter(&mut store, 8, 0.1);
    let xd = [distinct_tensor([3, 5, 1, 1], 9)];
    out.push(run("dense", DENSE_TOLERANCE, &mut store, &xd, &eval(), |g, i| dense.forward(g, i[0]))?);

    for kind in PoolKind::ALL {
        for (k, stride) in [(3, 1), (2, 2)] {
            let name = format!("pool_local_{}_k{k}s{stride}", kind.tag());
            out.push(run(&name, OP_TOLERANCE, s, &xc, &eval(), |g, i| g.pool_local(i[0], kind, k, stride))?);
        }
        let tol = if kind == PoolKind::Avg { GAP_TOLERANCE } else { OP_TOLERANCE };
        let name = format!("pool_global_{}", kind.tag());
        out.push(run(&name, tol, s, &xc, &eval(), |g, i| g.pool_global(i[0], kind))?);
    }
    out.push(run("pooled_descriptor", OP_TOLERANCE, s, &xc, &eval(), |g, i| g.pooled_descriptor(i[0]))?);

    for (name, opts) in [("batch_norm_train", train()), ("batch_norm_eval", eval())] {
        let mut store = fresh(10);
        let bn = BatchNorm::new(&mut store, "bn", 4);
        jitter(&mut store, 11, 0.1);
        out.push(run(name, OP_TOLERANCE, &mut store, &xc, &opts, |g, i| bn.forward(g, i[0]))?);
    }
    out.push(run("dropout_train", OP_TOLERANCE, s, &x1, &train(), |g, i| g.dropout(i[0], 0.3))?);

    let x8 = [distinct_tensor([1, 4, 6, 8], 12)];
    out.push(run("channel_shuffle", OP_TOLERANCE, s, &x8, &eval(), |g, i| g.channel_shuffle(i[0], 2))?);
    out.push(run("cyclic_shift", OP_TOLERANCE, s, &x8, &eval(), |g, i| Ok(g.cyclic_shift(i[0], -1, 2)))?);
    out.push(run("pad", OP_TOLERANCE, s, &x8, &eval(), |g, i| g.pad_bottom_right(i[0], 8, 9))?);
    out.push(run("crop", OP_TOLERANCE, s, &x8, &eval(), |g, i| g.crop(i[0], 5, 3))?);
    out.push(run("window_partition", OP_TOLERANCE, s, &x8, &eval(), |g, i| g.window_partition(i[0], 2))?);
    out.push(run("window_merge", OP_TOLERANCE, s, &x8, &eval(), |g, i| {
        let t = g.reshape(i[0], [1, 4, 12, 4])?;
        g.window_merge(t, 2, (3, 4))
    })?);
    let sq = [distinct_tensor([1, 2, 4, 4], 13)];
    out.push(run("dct2", OP_TOLERANCE, s, &sq, &eval(), |g, i| Ok(g.dct2(i[0])))?);
    out.push(run("idct2", OP_TOLERANCE, s, &sq, &eval(), |g, i| Ok(g.idct2(i[0])))?);
    out.push(run("haar_dwt", OP_TOLERANCE, s, &x8, &eval(), |g, i| g.haar_dwt(i[0]))?);
    out.push(run("slice_channels", OP_TOLERANCE, s, &x8, &eval(), |g, i| g.slice_channels(i[0], 1, 2))?);
    out.push(run("reshape", OP_TOLERANCE, s, &x8, &eval(), |g, i| {
        let r = g.reshape(i[0], [2, 2, 8, 6])?;
        let w = g.constant(distinct_tensor([2, 2, 8, 6], 14));
        g.mul(r, w)
    })?);
    let logits = [distinct_tensor([3, 4, 1, 1], 15)];
    out.push(run("cross_entropy", OP_TOLERANCE, s, &logits, &eval(), |g, i| {
        g.cross_entropy(i[0], &[2, 0, 3])
    })?);
    Ok(out)
}

const C: usize = 4;

fn block_input(seed: u64) -> Tensor<f64> {
    distinct_tensor([1, C, 8, 8], seed)
}

/// One check per block, with parameters jittered away from their
/// initialization.
pub fn block_checks() -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let all = Components::default();
    let x = [block_input(21)];
    let x2 = [distinct_tensor([2, C, 8, 8], 22)];
    let pair = [block_input(23), block_input(24)];

    let mut s = fresh(30);
    let mshc = Mshc::new(&mut s, "mshc", C)?;
    jitter(&mut s, 31, 0.1);
    out.push(run("mshc", BLOCK_TOLERANCE, &mut s, &x, &eval(), |g, i| mshc.forward(g, i[0]))?);

    let mut s = fresh(32);
    let chia = Chia::new(&mut s, "chia", C);
    jitter(&mut s, 33, 0.1);
    out.push(run("chia", BLOCK_TOLERANCE, &mut s, &x, &eval(), |g, i| chia.forward(g, i[0]))?);

    let mut s = fresh(34);
    let shia = Shia::new(&mut s, "shia", C)?;
    jitter(&mut s, 35, 0.1);
    out.push(run("shia", BLOCK_TOLERANCE, &mut s, &x, &eval(), |g, i| shia.forward(g, i[0]))?);

    for (name, wiring) in [("scpfa_hybrid", Wiring::Hybrid), ("scpfa_cascaded", Wiring::Cascaded)] {
        let mut s = fresh(36);
        let scpfa = Scpfa::new(&mut s, "scpfa", C)?;
        jitter(&mut s, 37, 0.1);
        out.push(run(name, BLOCK_TOLERANCE, &mut s, &x, &eval(), |g, i| {
            scpfa.forward(g, i[0], wiring, &all)
        })?);
    }

    let mut s = fresh(38);
    let scala = Scala::new(&mut s, "scala", C, &all)?;
    jitter(&mut s, 39, 0.1);
    out.push(run("scala", BLOCK_TOLERANCE, &mut s, &x, &eval(), |g, i| {
        scala.forward(g, i[0], Wiring::Hybrid, &all)
    })?);

    for (name, input, opts) in [("rala_eval", &x, eval()), ("rala_train", &x2, train())] {
        let mut s = fresh(40);
        let rala = Rala::new(&mut s, "rala", C, &all)?;
        jitter(&mut s, 41, 0.1);
        out.push(run(name, BLOCK_TOLERANCE, &mut s, input, &opts, |g, i| {
            rala.forward(g, i[0], Wiring::Hybrid, &all)
        })?);
    }

    let tokens = [distinct_tensor([1, C, 4, 16], 42)];
    for (name, gate) in [("tfsi", false), ("tfsi_gated", true)] {
        let mut s = fresh(43);
        let tfsi = Tfsi::new(&mut s, "tfsi", C, gate)?;
        jitter(&mut s, 44, 0.1);
        out.push(run(name, BLOCK_TOLERANCE, &mut s, &tokens, &eval(), |g, i| {
            let f = crate::dvca::hysfa::token_dct(g, i[0], 4)?;
            Ok(tfsi.forward(g, i[0], f)?.u_d)
        })?);
    }

    let mut s = fresh(45);
    let fdca = Fdca::new(&mut s, "fdca", C)?;
    jitter(&mut s, 46, 0.1);
    out.push(run("fdca", BLOCK_TOLERANCE, &mut s, &tokens, &eval(), |g, i| {
        Ok(fdca.forward(g, i[0], 1)?.u_out)
    })?);

    let mut s = fresh(47);
    let hysfa = Hysfa::new(&mut s, "hysfa", C, [4, 8], &all, false)?;
    jitter(&mut s, 48, 0.1);
    let odd = [distinct_tensor([1, C, 7, 9], 49)];
    out.push(run("hysfa", BLOCK_TOLERANCE, &mut s, &odd, &eval(), |g, i| hysfa.forward(g, i[0]))?);

    for (name, input, opts) in [("fcif_eval", &x, eval()), ("fcif_train", &x2, train())] {
        let mut s = fresh(50);
        let fcif = Fcif::new(&mut s, "fcif", C, 0.1);
        jitter(&mut s, 51, 0.1);
        out.push(run(name, BLOCK_TOLERANCE, &mut s, input, &opts, |g, i| fcif.forward(g, i[0]))?);
    }

    let mut s = fresh(52);
    let smif = Smif::new(&mut s, "smif", C)?;
    jitter(&mut s, 53, 0.1);
    out.push(run("smif", BLOCK_TOLERANCE, &mut s, &x, &eval(), |g, i| {
        smif.forward(g, i[0], Wiring::Hybrid)
    })?);

    let mut s = fresh(54);
    let mcbi = Mcbi::new(&mut s, "mcbi", C, 0.1);
    jitter(&mut s, 55, 0.1);
    let vecs = [distinct_tensor([1, C, 1, 1], 56), distinct_tensor([1, C, 1, 1], 57)];
    out.push(run("mcbi", BLOCK_TOLERANCE, &mut s, &vecs, &eval(), |g, i| {
        let (a, b) = mcbi.forward(g, i[0], i[1])?;
        let b = g.scale(b, 0.7);
        g.add(a, b)
    })?);

    let mut s = fresh(58);
    let mmmua = Mmmua::new(&mut s, "mmmua", C, 2, &all, 0.1)?;
    jitter(&mut s, 59, 0.1);
    out.push(run("mmmua", BLOCK_TOLERANCE, &mut s, &pair, &eval(), |g, i| {
        let o = mmmua.forward(g, i, Wiring::Hybrid)?;
        stack_sum(g, &o)
    })?);

    let mut s = fresh(60);
    let dvca = Dvca::new(&mut s, "dvca", C, 2, [4, 8], &Modules::default(), &all, 0.1, false)?;
    jitter(&mut s, 61, 0.1);
    out.push(run("dvca", BLOCK_TOLERANCE, &mut s, &pair, &eval(), |g, i| {
        let o = dvca.forward(g, i, Wiring::Hybrid)?;
        stack_sum(g, &o)
    })?);

    let cfg = micro_config();
    let mut s = fresh(62);
    let block = HypcaBlock::new(&mut s, "block", &cfg)?;
    jitter(&mut s, 63, 0.1);
    let small = [distinct_tensor([1, C, 4, 4], 64), distinct_tensor([1, C, 4, 4], 65)];
    out.push(run("hypca_block", BLOCK_TOLERANCE, &mut s, &small, &eval(), |g, i| {
        let o = block.forward(g, i, &cfg)?;
        stack_sum(g, &o)
    })?);

    let mut s = fresh(66);
    let stem = Stem::new(&mut s, "stem", 3, C, 2)?;
    jitter(&mut s, 67, 0.1);
    let img = [distinct_tensor([1, 3, 8, 8], 68)];
    out.push(run("stem", BLOCK_TOLERANCE, &mut s, &img, &eval(), |g, i| stem.forward(g, i[0]))?);

    let mut s = fresh(69);
    let heads = Heads::new(&mut s, "head", &cfg);
    jitter(&mut s, 70, 0.1);
    out.push(run("heads", HEAD_TOLERANCE, &mut s, &pair, &eval(), |g, i| {
        let logits = heads.forward(g, i)?;
        let mut acc = g.scale(logits[0][0], 1.0);
        for &l in logits.iter().flatten().skip(1) {
            acc = g.add(acc, l)?;
        }
        Ok(acc)
    })?);
    Ok(out)
}

/// Weighted sum of per-modality outputs, so every branch reaches the
/// projected scalar with a distinct coefficient.
fn stack_sum(g: &mut Graph<'_, f64>, xs: &[Var]) -> Result<Var> {
    let mut acc = g.scale(xs[0], 1.0);
    for (k, &x) in xs.iter().enumerate().skip(1) {
        let t = g.scale(x, 1.0 + 0.37 * k as f64);
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

/// Smallest complete configuration: two modalities, one block, four channels,
/// 16×16 images reduced to 4×4 features.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        modalities: 2,
        blocks: 1,
        channels: C,
        in_channels: 3,
        stem_downsample: 4,
        window_sizes: [2, 4],
        classes: vec![3],
        dropout: 0.1,
        ..ModelConfig::default()
    }
}

/// End-to-end check of the multitask loss with respect to the images and
/// every parameter of the micro network.
pub fn network_checks() -> Result<Vec<CheckOutcome>> {
    let cfg = micro_config();
    let mut s = fresh(80);
    let net = HypcaNet::new(&mut s, &cfg)?;
    jitter(&mut s, 81, 0.05);
    let images = [distinct_tensor([1, 3, 16, 16], 82), distinct_tensor([1, 3, 16, 16], 83)];
    let labels = vec![vec![2]];
    let lambda = cfg.lambda();
    let report = run("network_loss", NETWORK_TOLERANCE, &mut s, &images, &eval(), |g, i| {
        let o = net.forward(g, i)?;
        mml_loss(g, &o.logits, &labels, &lambda)
    })?;
    Ok(vec![report])
}

/// Negative control: `x ⊙ stop_grad(x)` has a deliberately wrong adjoint
/// (half the true derivative). A sound checker must flag it.
pub fn corrupted_adjoint_check() -> Result<CheckOutcome> {
    let mut s = fresh(0);
    run(
        "corrupted_adjoint",
        OP_TOLERANCE,
        &mut s,
        &[distinct_tensor([1, 2, 3, 3], 90)],
        &eval(),
        |g, i| {
            let d = g.detach(i[0]);
            g.mul(i[0], d)
        },
    )
}
