//! Layer-by-layer reference compositions built from the naive kernels.

use hypca::nn::{BatchNorm, Conv2d, Dense, Mlp, BN_EPS};
use hypca::rala::{Chia, Mshc, Scpfa, Shia, SHIA_POOL};
use hypca::{Graph, Mode, ParamStore, PoolKind, Result, Tensor, Var};

use super::*;

pub fn run1(
    store: &mut ParamStore<f64>,
    x: &Tensor<f64>,
    f: impl FnOnce(&mut Graph<'_, f64>, Var) -> Result<Var>,
) -> Tensor<f64> {
    let mut g = Graph::new(store, Mode::Eval, 0);
    let v = g.input(x.clone());
    let out = f(&mut g, v).unwrap();
    g.value(out).clone()
}

pub fn conv(s: &ParamStore<f64>, c: &Conv2d, x: &Tensor<f64>) -> Tensor<f64> {
    let geom = c.geom;
    conv_direct(x, s.value(c.weight), s.value(c.bias).data(), geom.groups, geom.stride, geom.dilation)
}

pub fn dense(s: &ParamStore<f64>, d: &Dense, x: &Tensor<f64>) -> Tensor<f64> {
    dense_direct(x, s.value(d.weight), s.value(d.bias))
}

pub fn mlp(s: &ParamStore<f64>, m: &Mlp, x: &Tensor<f64>) -> Tensor<f64> {
    conv(s, &m.fc2, &relu(&conv(s, &m.fc1, x)))
}

pub fn bn_eval(s: &ParamStore<f64>, b: &BatchNorm, x: &Tensor<f64>) -> Tensor<f64> {
    let (g, be) = (s.value(b.gamma), s.value(b.beta));
    let (m, v) = (s.buffer(b.running_mean), s.buffer(b.running_var));
    Tensor::from_fn(x.shape(), |n, c, h, w| {
        (x.at(n, c, h, w) - m.data()[c]) / (v.data()[c] + BN_EPS).sqrt() * g.data()[c] + be.data()[c]
    })
}

/// Reorders channels `(group, i) → (i, group)`.
pub fn shuffle(x: &Tensor<f64>, groups: usize) -> Tensor<f64> {
    let [_, c, _, _] = x.shape();
    let per = c / groups;
    Tensor::from_fn(x.shape(), |n, o, h, w| {
        let (i, grp) = (o / groups, o % groups);
        x.at(n, grp * per + i, h, w)
    })
}

pub fn mshc(s: &ParamStore<f64>, m: &Mshc, x: &Tensor<f64>) -> Tensor<f64> {
    let fused = add(&add(&conv(s, &m.branch_gpc, x), &conv(s, &m.branch_dwc, x)), &conv(s, &m.branch_ddc, x));
    let h = shuffle(&fused, m.groups);
    conv(s, &m.sdwc, &conv(s, &m.gpc, &conv(s, &m.dwc, &h)))
}

pub fn chia(s: &ParamStore<f64>, c: &Chia, x: &Tensor<f64>) -> Tensor<f64> {
    sig(&dense(s, &c.fc, &descriptor(x)))
}

pub fn shia(s: &ParamStore<f64>, sh: &Shia, x: &Tensor<f64>) -> Tensor<f64> {
    let mut acc: Option<Tensor<f64>> = None;
    for (kind, pc) in PoolKind::ALL.iter().zip(&sh.reduce) {
        let r = conv(s, pc, &pool_direct(x, *kind, SHIA_POOL, 1));
        acc = Some(match acc {
            None => r,
            Some(a) => add(&a, &r),
        });
    }
    sig(&conv(s, &sh.conv, &acc.unwrap()))
}

pub fn scpfa_hybrid(s: &ParamStore<f64>, p: &Scpfa, x: &Tensor<f64>) -> Tensor<f64> {
    let joint = add(&shia(s, &p.shia, x), &chia(s, &p.chia, x));
    mul(x, &sig(&joint))
}

pub fn scale(x: &Tensor<f64>, k: f64) -> Tensor<f64> {
    x.map(|v| k * v)
}
