mod common;

use common::layers::{self, run1};
use common::*;
use hypca::checks::jitter;
use hypca::dvca::hysfa::{to_windows, token_dct, window_shift};
use hypca::dvca::{hcf, modality_pairs, Fcif, Fdca, Mcbi, Smif, Tfsi};
use hypca::nn::BN_EPS;
use hypca::{Components, Dvca, Graph, Hysfa, Mmmua, Mode, Modules, ParamStore, PoolKind, Tensor, Var, Wiring};
use proptest::prelude::*;

// ---------- oracles ----------

fn windows_oracle(x: &Tensor<f64>, w: usize) -> Tensor<f64> {
    let [_, _, h, wd] = x.shape();
    let s = window_shift(w);
    partition_direct(&roll(&pad_to(x, h.div_ceil(w) * w, wd.div_ceil(w) * w), s, s), w)
}

fn unwindows_oracle(tokens: &Tensor<f64>, w: usize, h: usize, wd: usize) -> Tensor<f64> {
    let (rows, cols) = (h.div_ceil(w), wd.div_ceil(w));
    let s = window_shift(w);
    crop_to(&roll(&merge_direct(tokens, w, rows, cols), -s, -s), h, wd)
}

fn tfsi_oracle(s: &ParamStore<f64>, t: &Tfsi, s_t: &Tensor<f64>, f_t: &Tensor<f64>) -> Tensor<f64> {
    let a_sp = sig(&layers::mlp(s, &t.mlp, s_t));
    let a_f = sig(&layers::mlp(s, &t.mlp, f_t));
    add(&mul(&a_sp, &a_f), &mul(&a_sp.map(|v| 1.0 - v), s_t))
}

fn fdca_oracle(s: &ParamStore<f64>, f: &Fdca, h0: &Tensor<f64>, scale: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let gap = pool_global_direct(h0, PoolKind::Avg);
    let tau = sig(&layers::dense(s, &f.tau, &gap));
    let alpha = softmax_c(&layers::dense(s, &f.alpha, &gap));
    let a = Tensor::from_fn([h0.shape()[0], 1, 1, 1], |n, _, _, _| alpha.at(n, scale, 0, 0));
    let k1 = layers::conv(s, &f.flow, h0);
    let u_e = add(h0, &mul(&tau, &k1));
    let mid = add(h0, &layers::scale(&mul(&tau, &k1), 0.5));
    let u_r = add(h0, &mul(&tau, &layers::conv(s, &f.flow, &mid)));
    let u_fu = add(&mul(&a, &add(&u_e, &u_r)), &mul(&a.map(|v| 1.0 - v), h0));
    let a_hs = sig(&layers::mlp(s, &f.hca, &descriptor(&u_fu)));
    (mul(&u_fu, &a_hs), alpha, u_fu)
}

fn hysfa_oracle(s: &ParamStore<f64>, hy: &Hysfa, x: &Tensor<f64>) -> Tensor<f64> {
    let [n, _, h, wd] = x.shape();
    let mut acc: Option<Tensor<f64>> = None;
    for (ws, scale) in hy.scales.iter().enumerate() {
        let w = scale.window;
        let s_t = windows_oracle(x, w);
        let f_t = token_dct_direct(&s_t, w);
        let u_d = scale.tfsi.as_ref().map_or(s_t.clone(), |t| tfsi_oracle(s, t, &s_t, &f_t));
        let (u_out, omega_g) = match &scale.fdca {
            Some(f) => {
                let (u, alpha, _) = fdca_oracle(s, f, &u_d, ws);
                (u, Tensor::from_fn([n, 1, 1, 1], |b, _, _, _| alpha.at(b, ws, 0, 0)))
            }
            None => (u_d, Tensor::full([n, 1, 1, 1], 0.5)),
        };
        let x_tilde = unwindows_oracle(&u_out, w, h, wd);
        let omega_ins = softmax_c(&descriptor(&f_t));
        let term = mul(&mul(&omega_ins, &omega_g), &x_tilde);
        acc = Some(match acc {
            None => term,
            Some(a) => add(&a, &term),
        });
    }
    add(x, &pool_direct(&acc.unwrap(), PoolKind::Sum, 2, 1))
}

/// Packs LL, HL, LH, HH band-major straight from the 2×2 block formulas.
fn haar_oracle(x: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape();
    Tensor::from_fn([n, 4 * c, h / 2, w / 2], |b, ch, y, xx| {
        let (band, k) = (ch / c, ch % c);
        let p = |dy, dx| x.at(b, k, 2 * y + dy, 2 * xx + dx);
        let (a, bb, cc, d) = (p(0, 0), p(0, 1), p(1, 0), p(1, 1));
        0.5 * match band {
            0 => a + bb + cc + d,
            1 => a - bb + cc - d,
            2 => a + bb - cc - d,
            _ => a - bb - cc + d,
        }
    })
}

fn hcf_oracle(packed: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let c = packed.shape()[1] / 4;
    let band = |b: usize| Tensor::from_fn([packed.shape()[0], c, packed.shape()[2], packed.shape()[3]], |n, k, y, x| packed.at(n, b * c + k, y, x));
    let pooled = |kind| (1..4).fold(pool_global_direct(&band(0), kind), |acc, b| add(&acc, &pool_global_direct(&band(b), kind)));
    let (gap, gmp, gmn, gsp) = (pooled(PoolKind::Avg), pooled(PoolKind::Max), pooled(PoolKind::Min), pooled(PoolKind::Sum));
    let sum = add(&add(&add(&gap, &gmp), &gmn), &gsp);
    (sum, sub(&gmp, &add(&gap, &gmn)))
}

fn fcif_oracle(s: &ParamStore<f64>, f: &Fcif, x: &Tensor<f64>) -> Tensor<f64> {
    let (c_sum, c_diff) = hcf_oracle(&haar_oracle(x));
    let a = mul(&layers::bn_eval(s, &f.bn_sum, &c_sum), s.value(f.w_sum.omega));
    let b = mul(&layers::bn_eval(s, &f.bn_diff, &c_diff), s.value(f.w_diff.omega));
    add(&a, &b)
}

fn smif_oracle(s: &ParamStore<f64>, sm: &Smif, x: &Tensor<f64>) -> Tensor<f64> {
    descriptor(&layers::scpfa_hybrid(s, &sm.scpfa, &layers::mshc(s, &sm.mshc, x)))
}

fn mcbi_oracle(s: &ParamStore<f64>, m: &Mcbi, c_f: &Tensor<f64>, c_sp: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>) {
    let w = |c: &hypca::nn::ChannelWeights| s.value(c.omega).clone();
    let c_sp_hat = add(&mul(&w(&m.w1), c_sp), &mul(&w(&m.w2), c_f));
    let c_f_hat = add(&mul(&layers::bn_eval(s, &m.bn, &c_sp_hat), &w(&m.w3)), &mul(c_f, &w(&m.w2)));
    (sig(&c_f_hat), sig(&c_sp_hat))
}

fn all_on() -> Components {
    Components::default()
}

fn run_many(
    store: &mut ParamStore<f64>,
    xs: &[Tensor<f64>],
    f: impl FnOnce(&mut Graph<'_, f64>, &[Var]) -> hypca::Result<Vec<Var>>,
) -> Vec<Tensor<f64>> {
    let mut g = Graph::new(store, Mode::Eval, 0);
    let vs: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
    let out = f(&mut g, &vs).unwrap();
    out.iter().map(|&v| g.value(v).clone()).collect()
}

// ---------- TFSI ----------

#[test]
fn tfsi_zero_mlp_closed_form() {
    let mut s = ParamStore::<f64>::new(1);
    let t = Tfsi::new(&mut s, "t", 2, false).unwrap();
    s.fill_prefix("t", 0.0);
    let s_t = random([1, 2, 4, 16], 2);
    let u = run1(&mut s, &s_t, |g, v| {
        let f = token_dct(g, v, 4)?;
        Ok(t.forward(g, v, f)?.u_d)
    });
    assert_close(&u, &s_t.map(|v| 0.25 + 0.5 * v), 1e-15, "tfsi zero");
}

#[test]
fn tfsi_closed_gate_passes_spatial_tokens() {
    let mut s = ParamStore::<f64>::new(3);
    let t = Tfsi::new(&mut s, "t", 2, false).unwrap();
    s.fill_prefix("t/mlp/fc2/weight", 0.0);
    s.fill_prefix("t/mlp/fc2/bias", -1000.0);
    let s_t = random([1, 2, 4, 16], 4);
    let u = run1(&mut s, &s_t, |g, v| {
        let f = token_dct(g, v, 4)?;
        Ok(t.forward(g, v, f)?.u_d)
    });
    assert_close(&u, &s_t, 1e-12, "α_sp → 0");
}

#[test]
fn tfsi_matches_step_by_step_oracle() {
    for gate in [false, true] {
        let mut s = ParamStore::<f64>::new(5);
        let t = Tfsi::new(&mut s, "t", 2, gate).unwrap();
        jitter(&mut s, 6, 0.2);
        let x = random([1, 2, 8, 8], 7);
        let u = run1(&mut s, &x, |g, v| {
            let (st, _) = to_windows(g, v, 4)?;
            let f = token_dct(g, st, 4)?;
            Ok(t.forward(g, st, f)?.u_d)
        });
        let s_t = windows_oracle(&x, 4);
        let f_t = token_dct_direct(&s_t, 4);
        let want = if gate {
            let a_sp = sig(&layers::mlp(&s, &t.mlp, &s_t));
            let a_f = sig(&layers::mlp(&s, &t.mlp, &f_t));
            add(&mul(&a_sp, &mul(&a_f, &f_t)), &mul(&a_sp.map(|v| 1.0 - v), &s_t))
        } else {
            tfsi_oracle(&s, &t, &s_t, &f_t)
        };
        assert_close(&u, &want, 1e-10, "tfsi");
    }
}

// ---------- FDCA ----------

fn scalar_fdca(alpha_bias: [f64; 2], scale: usize) -> (f64, f64, f64) {
    let mut s = ParamStore::<f64>::new(0);
    let f = Fdca::new(&mut s, "f", 1).unwrap();
    s.fill_prefix("f", 0.0);
    s.get_mut(f.flow.weight).value.fill(1.0);
    s.get_mut(f.alpha.bias).value.data_mut().copy_from_slice(&alpha_bias);
    let mut g = Graph::new(&mut s, Mode::Eval, 0);
    let h0 = g.input(Tensor::full([1, 1, 1, 1], 1.0));
    let o = f.forward(&mut g, h0, scale).unwrap();
    let v = |x| g.value(x).item().unwrap();
    (v(o.u_e), v(o.u_r), v(o.u_fu))
}

#[test]
fn fdca_scalar_toy_arithmetic() {
    // f(h) = h, τ = σ(0) = 0.5, H₀ = 1: U_e = 1.5, k₂ = 1.25, U_r = 1.625.
    let (u_e, u_r, u_fu) = scalar_fdca([1000.0, -1000.0], 0);
    assert_eq!((u_e, u_r), (1.5, 1.625));
    assert_eq!(u_fu, 3.125);
    let (_, _, u_fu) = scalar_fdca([1000.0, -1000.0], 1);
    assert_eq!(u_fu, 1.0);
}

#[test]
fn fdca_zero_flow_scales_skip_by_one_plus_gate() {
    let mut s = ParamStore::<f64>::new(8);
    let f = Fdca::new(&mut s, "f", 4).unwrap();
    jitter(&mut s, 9, 0.3);
    s.fill_prefix("f/flow", 0.0);
    let h0 = random([2, 4, 4, 16], 10);
    for scale in 0..2 {
        let mut g = Graph::new(&mut s, Mode::Eval, 0);
        let v = g.input(h0.clone());
        let o = f.forward(&mut g, v, scale).unwrap();
        assert_eq!(g.value(o.u_e), &h0);
        assert_eq!(g.value(o.u_r), &h0);
        let alpha = g.value(o.alpha_p).clone();
        let want = Tensor::from_fn(h0.shape(), |n, c, y, x| (1.0 + alpha.at(n, scale, 0, 0)) * h0.at(n, c, y, x));
        assert_close(g.value(o.u_fu), &want, 1e-15, "zero-flow fusion");
    }
}

#[test]
fn fdca_matches_oracle() {
    let mut s = ParamStore::<f64>::new(11);
    let f = Fdca::new(&mut s, "f", 4).unwrap();
    jitter(&mut s, 12, 0.2);
    let h0 = random([2, 4, 4, 16], 13);
    for scale in 0..2 {
        let y = run1(&mut s, &h0, |g, v| Ok(f.forward(g, v, scale)?.u_out));
        assert_close(&y, &fdca_oracle(&s, &f, &h0, scale).0, 1e-10, "fdca");
    }
}

// ---------- Hy-SFA ----------

#[test]
fn hysfa_zero_config_is_closed_form() {
    let mut s = ParamStore::<f64>::new(14);
    let hy = Hysfa::new(&mut s, "h", 4, [4, 8], &all_on(), false).unwrap();
    s.fill_prefix("h", 0.0);
    let x = random([2, 4, 8, 8], 15);
    let y = run1(&mut s, &x, |g, v| hy.forward(g, v));
    // U_d = 0.25 + 0.5 S_t, U_fu = 1.5 U_d, A_HS = 0.5, ω_g = 0.5.
    let mut acc = Tensor::zeros(x.shape());
    for w in [4, 8] {
        let s_t = windows_oracle(&x, w);
        let u_out = s_t.map(|v| 0.75 * (0.25 + 0.5 * v));
        let omega = softmax_c(&descriptor(&token_dct_direct(&s_t, w)));
        acc = add(&acc, &mul(&layers::scale(&omega, 0.5), &unwindows_oracle(&u_out, w, 8, 8)));
    }
    let want = add(&x, &pool_direct(&acc, PoolKind::Sum, 2, 1));
    assert_close(&y, &want, 1e-10, "hysfa zero config");
    assert_close(&y, &hysfa_oracle(&s, &hy, &x), 1e-10, "hysfa oracle");
}

#[test]
fn hysfa_matches_full_path_oracle() {
    for (sw, hw) in [(all_on(), (8, 8)), (all_on(), (7, 10)), (Components { fdca: false, ..all_on() }, (9, 6)), (Components { tfsi: false, ..all_on() }, (8, 5))] {
        let mut s = ParamStore::<f64>::new(16);
        let hy = Hysfa::new(&mut s, "h", 4, [4, 8], &sw, false).unwrap();
        jitter(&mut s, 17, 0.2);
        let x = random([2, 4, hw.0, hw.1], 18);
        let y = run1(&mut s, &x, |g, v| hy.forward(g, v));
        assert_close(&y, &hysfa_oracle(&s, &hy, &x), 1e-10, &format!("hysfa {hw:?}"));
    }
}

#[test]
fn hysfa_weights_are_normalized() {
    let mut s = ParamStore::<f64>::new(19);
    let hy = Hysfa::new(&mut s, "h", 4, [4, 8], &all_on(), false).unwrap();
    jitter(&mut s, 20, 0.5);
    let mut g = Graph::new(&mut s, Mode::Eval, 0);
    let x = g.input(random([3, 4, 8, 8], 21));
    let tr = hy.forward_traced(&mut g, x).unwrap();
    for sc in &tr.scales {
        let w = g.value(sc.omega_ins);
        for n in 0..3 {
            let total: f64 = (0..4).map(|c| w.at(n, c, 0, 0)).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
        let f = sc.fdca.unwrap();
        let (tau, alpha) = (g.value(f.tau), g.value(f.alpha_p));
        assert!(tau.data().iter().all(|&t| t > 0.0 && t < 1.0));
        for n in 0..3 {
            assert!((alpha.at(n, 0, 0, 0) + alpha.at(n, 1, 0, 0) - 1.0).abs() < 1e-12);
        }
    }
}

// ---------- MMMUA parts ----------

#[test]
fn hcf_examples() {
    let mut packed = Tensor::zeros([1, 4, 2, 2]);
    packed.data_mut()[..4].copy_from_slice(&[1.0, 2.0, 3.0, 4.0]);
    let mut s = ParamStore::<f64>::new(0);
    let mut g = Graph::new(&mut s, Mode::Eval, 0);
    let p = g.input(packed);
    let (c_sum, c_diff) = hcf(&mut g, p).unwrap();
    assert_eq!(g.value(c_diff).item().unwrap(), 0.5);
    assert_eq!(g.value(c_sum).item().unwrap(), 2.5 + 4.0 + 1.0 + 10.0);

    let z = g.input(Tensor::zeros([2, 8, 3, 3]));
    let (a, b) = hcf(&mut g, z).unwrap();
    assert!(g.value(a).data().iter().chain(g.value(b).data()).all(|&v| v == 0.0));

    let r = random([2, 12, 3, 4], 22);
    let v = g.input(r.clone());
    let (a, b) = hcf(&mut g, v).unwrap();
    let (ws, wd) = hcf_oracle(&r);
    assert_close(g.value(a), &ws, 1e-12, "c_sum");
    assert_close(g.value(b), &wd, 1e-12, "c_diff");
}

#[test]
fn fcif_selection_cases_and_oracle() {
    let mut s = ParamStore::<f64>::new(23);
    let f = Fcif::new(&mut s, "f", 4, 0.1);
    for bn in [&f.bn_sum, &f.bn_diff] {
        s.buffer_mut(bn.running_var).fill(1.0 - BN_EPS);
    }
    s.get_mut(f.w_diff.omega).value.fill(0.0);
    let x = random([2, 4, 6, 8], 24);
    let c_f = run1(&mut s, &x, |g, v| f.forward(g, v));
    assert_close(&c_f, &hcf_oracle(&haar_oracle(&x)).0, 1e-12, "C_f = C_Sum");

    s.get_mut(f.w_sum.omega).value.fill(0.0);
    assert!(run1(&mut s, &x, |g, v| f.forward(g, v)).data().iter().all(|&v| v == 0.0));

    let mut s = ParamStore::<f64>::new(25);
    let f = Fcif::new(&mut s, "f", 4, 0.1);
    jitter(&mut s, 26, 0.3);
    s.buffer_mut(f.bn_sum.running_mean).fill(0.2);
    s.buffer_mut(f.bn_diff.running_var).fill(2.0);
    let c_f = run1(&mut s, &x, |g, v| f.forward(g, v));
    assert_close(&c_f, &fcif_oracle(&s, &f, &x), 1e-10, "fcif");
}

#[test]
fn fcif_pads_odd_maps() {
    let mut s = ParamStore::<f64>::new(27);
    let f = Fcif::new(&mut s, "f", 2, 0.0);
    let x = random([1, 2, 5, 7], 28);
    let c_f = run1(&mut s, &x, |g, v| f.forward(g, v));
    assert_close(&c_f, &fcif_oracle(&s, &f, &pad_to(&x, 6, 8)), 1e-10, "odd fcif");
}

#[test]
fn smif_zero_chain_constant_and_oracle() {
    let mut s = ParamStore::<f64>::new(29);
    let sm = Smif::new(&mut s, "s", 4).unwrap();
    s.fill_prefix("s/mshc", 0.0);
    let x = random([1, 4, 6, 6], 30);
    assert!(run1(&mut s, &x, |g, v| sm.forward(g, v, Wiring::Hybrid)).data().iter().all(|&v| v == 0.0));

    let c = 0.3;
    let d = run1(&mut s, &Tensor::full([1, 4, 5, 6], c), |g, v| g.pooled_descriptor(v));
    assert!(d.data().iter().all(|&v| (v - (3.0 * c + 30.0 * c)).abs() < 1e-14));

    let mut s = ParamStore::<f64>::new(31);
    let sm = Smif::new(&mut s, "s", 4).unwrap();
    jitter(&mut s, 32, 0.2);
    let y = run1(&mut s, &x, |g, v| sm.forward(g, v, Wiring::Hybrid));
    assert_close(&y, &smif_oracle(&s, &sm, &x), 1e-10, "smif");
}

#[test]
fn mcbi_cases_and_oracle() {
    let mut s = ParamStore::<f64>::new(33);
    let m = Mcbi::new(&mut s, "m", 4, 0.1);
    let c_f = random([2, 4, 1, 1], 34);
    let c_sp = random([2, 4, 1, 1], 35);
    let pair = |s: &mut ParamStore<f64>| {
        let out = run_many(s, &[c_f.clone(), c_sp.clone()], |g, v| {
            let (a, b) = m.forward(g, v[0], v[1])?;
            Ok(vec![a, b])
        });
        (out[0].clone(), out[1].clone())
    };

    s.get_mut(m.w2.omega).value.fill(0.0);
    s.get_mut(m.w3.omega).value.fill(0.0);
    let (a, b) = pair(&mut s);
    assert!(a.data().iter().all(|&v| v == 0.5));
    assert_close(&b, &sig(&c_sp), 1e-15, "σ(C_SP)");

    let zeros = Tensor::zeros([2, 4, 1, 1]);
    let out = run_many(&mut s, &[zeros.clone(), zeros], |g, v| {
        let (a, b) = m.forward(g, v[0], v[1])?;
        Ok(vec![a, b])
    });
    assert!(out.iter().all(|t| t.data().iter().all(|&v| v == 0.5)));

    jitter(&mut s, 36, 0.4);
    s.buffer_mut(m.bn.running_mean).fill(-0.1);
    let (a, b) = pair(&mut s);
    let (wa, wb) = mcbi_oracle(&s, &m, &c_f, &c_sp);
    assert_close(&a, &wa, 1e-12, "σ(Ĉ_f)");
    assert_close(&b, &wb, 1e-12, "σ(Ĉ_SP)");

    let mut g = Graph::new(&mut s, Mode::Eval, 0);
    let (p, q) = (g.input(Tensor::zeros([1, 4, 1, 1])), g.input(Tensor::zeros([1, 3, 1, 1])));
    assert!(m.forward(&mut g, p, q).is_err());
}

fn zero_mmmua(s: &mut ParamStore<f64>, name: &str) {
    s.fill_prefix(&format!("{name}/fcif/w_"), 0.0);
    s.fill_prefix(&format!("{name}/smif/mshc"), 0.0);
}

#[test]
fn mmmua_zero_internals_halve_and_zero_omega_kills() {
    let mut s = ParamStore::<f64>::new(37);
    let mm = Mmmua::new(&mut s, "mm", 4, 2, &all_on(), 0.1).unwrap();
    zero_mmmua(&mut s, "mm");
    let xs = [random([2, 4, 6, 6], 38), random([2, 4, 6, 6], 39)];
    let out = run_many(&mut s, &xs, |g, v| mm.forward(g, v, Wiring::Hybrid));
    for (o, x) in out.iter().zip(&xs) {
        assert_close(o, &layers::scale(x, 0.5), 1e-15, "0.5·X'");
    }
    s.get_mut(mm.omega[0].omega).value.fill(0.0);
    let out = run_many(&mut s, &xs, |g, v| mm.forward(g, v, Wiring::Hybrid));
    assert!(out[0].data().iter().all(|&v| v == 0.0));
    assert_close(&out[1], &layers::scale(&xs[1], 0.5), 1e-15, "other modality untouched");
}

#[test]
fn mmmua_matches_composition_oracle() {
    let mut s = ParamStore::<f64>::new(40);
    let mm = Mmmua::new(&mut s, "mm", 4, 2, &all_on(), 0.1).unwrap();
    jitter(&mut s, 41, 0.2);
    let xs = [random([2, 4, 8, 8], 42), random([2, 4, 8, 8], 43)];
    let out = run_many(&mut s, &xs, |g, v| mm.forward(g, v, Wiring::Hybrid));
    let c_f = fcif_oracle(&s, mm.fcif.as_ref().unwrap(), &xs[0]);
    let c_sp = smif_oracle(&s, mm.smif.as_ref().unwrap(), &xs[1]);
    let (a0, a1) = mcbi_oracle(&s, mm.mcbi.as_ref().unwrap(), &c_f, &c_sp);
    let w = |i: usize| s.value(mm.omega[i].omega).clone();
    assert_close(&out[0], &mul(&mul(&xs[0], &a0), &w(0)), 1e-10, "modality 0");
    assert_close(&out[1], &mul(&mul(&xs[1], &a1), &w(1)), 1e-10, "modality 1");
}

#[test]
fn mmmua_cross_modal_locality() {
    let mut s = ParamStore::<f64>::new(44);
    let mm = Mmmua::new(&mut s, "mm", 4, 2, &all_on(), 0.1).unwrap();
    jitter(&mut s, 45, 0.2);
    let x0 = random([1, 4, 6, 6], 46);
    let zero = Tensor::zeros([1, 4, 6, 6]);
    let maps = run_many(&mut s, &[x0.clone(), zero.clone()], |g, v| {
        let (a, b) = mm.pair_maps(g, v[0], v[1], Wiring::Hybrid)?;
        Ok(vec![a, b])
    });
    let c_f = fcif_oracle(&s, mm.fcif.as_ref().unwrap(), &x0);
    let c_sp_zero = smif_oracle(&s, mm.smif.as_ref().unwrap(), &zero);
    let (want, _) = mcbi_oracle(&s, mm.mcbi.as_ref().unwrap(), &c_f, &c_sp_zero);
    assert_close(&maps[0], &want, 1e-12, "map of modality 0 with modality 1 zeroed");
}

#[test]
fn mmmua_rejects_bad_inputs() {
    let mut s = ParamStore::<f64>::new(47);
    let mm = Mmmua::new(&mut s, "mm", 4, 2, &all_on(), 0.1).unwrap();
    let mut g = Graph::new(&mut s, Mode::Eval, 0);
    let a = g.input(Tensor::zeros([1, 4, 4, 4]));
    let b = g.input(Tensor::zeros([1, 4, 4, 6]));
    assert!(mm.forward(&mut g, &[a], Wiring::Hybrid).is_err());
    assert!(mm.forward(&mut g, &[a, b], Wiring::Hybrid).is_err());
    assert!(mm.forward(&mut g, &[a, a, a], Wiring::Hybrid).is_err());
}

#[test]
fn ring_pairing_for_three_modalities() {
    assert_eq!(modality_pairs(2), vec![(0, 1)]);
    assert_eq!(modality_pairs(3), vec![(0, 1), (1, 2), (2, 0)]);
    let mut s = ParamStore::<f64>::new(48);
    let mm = Mmmua::new(&mut s, "mm", 4, 3, &all_on(), 0.1).unwrap();
    zero_mmmua(&mut s, "mm");
    let xs = [random([1, 4, 4, 4], 49), random([1, 4, 4, 4], 50), random([1, 4, 4, 4], 51)];
    let out = run_many(&mut s, &xs, |g, v| mm.forward(g, v, Wiring::Hybrid));
    for (o, x) in out.iter().zip(&xs) {
        assert_close(o, &layers::scale(x, 0.25), 1e-15, "two maps of 0.5");
    }
}

// ---------- DVCA ----------

#[test]
fn dvca_zero_init_is_half_the_hysfa_map() {
    let mut s = ParamStore::<f64>::new(52);
    let d = Dvca::new(&mut s, "d", 4, 2, [4, 8], &Modules::default(), &all_on(), 0.1, false).unwrap();
    s.fill_prefix("d/hysfa", 0.0);
    zero_mmmua(&mut s, "d/mmmua");
    let xs = [random([1, 4, 8, 8], 53), random([1, 4, 8, 8], 54)];
    let out = run_many(&mut s, &xs, |g, v| d.forward(g, v, Wiring::Hybrid));
    for (i, (o, x)) in out.iter().zip(&xs).enumerate() {
        let want = layers::scale(&hysfa_oracle(&s, &d.hysfa[i], x), 0.5);
        assert_close(o, &want, 1e-10, "dvca zero init");
    }
}

#[test]
fn dvca_is_deterministic_and_shape_preserving() {
    let mut s = ParamStore::<f64>::new(55);
    let d = Dvca::new(&mut s, "d", 4, 2, [4, 8], &Modules::default(), &all_on(), 0.1, false).unwrap();
    jitter(&mut s, 56, 0.2);
    let xs = [random([2, 4, 7, 9], 57), random([2, 4, 7, 9], 58)];
    let a = run_many(&mut s, &xs, |g, v| d.forward(g, v, Wiring::Hybrid));
    let b = run_many(&mut s, &xs, |g, v| d.forward(g, v, Wiring::Hybrid));
    assert_eq!(a.len(), 2);
    for ((p, q), x) in a.iter().zip(&b).zip(&xs) {
        assert_eq!(p.shape(), x.shape());
        assert!(p.data().iter().zip(q.data()).all(|(u, v)| u.to_bits() == v.to_bits()));
    }
}

#[test]
fn dvca_disabled_modules_are_identity() {
    let mut s = ParamStore::<f64>::new(59);
    let off = Modules {
        hysfa: false,
        mmmua: false,
        ..Modules::default()
    };
    let d = Dvca::new(&mut s, "d", 4, 2, [4, 8], &off, &all_on(), 0.1, false).unwrap();
    assert_eq!(s.num_scalars(), 0);
    let xs = [random([1, 4, 4, 4], 60), random([1, 4, 4, 4], 61)];
    assert_eq!(run_many(&mut s, &xs, |g, v| d.forward(g, v, Wiring::Hybrid)), xs.to_vec());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn hysfa_preserves_shape(h in 1usize..14, w in 1usize..14, seed in any::<u64>()) {
        let mut s = ParamStore::<f64>::new(seed);
        let hy = Hysfa::new(&mut s, "h", 4, [4, 8], &all_on(), false).unwrap();
        let x = random([1, 4, h, w], seed);
        prop_assert_eq!(run1(&mut s, &x, |g, v| hy.forward(g, v)).shape(), x.shape());
    }

    #[test]
    fn fdca_ranges(seed in any::<u64>(), amp in 0.1f64..100.0) {
        let mut s = ParamStore::<f64>::new(seed);
        let f = Fdca::new(&mut s, "f", 4).unwrap();
        jitter(&mut s, seed ^ 3, 1.0);
        let mut g = Graph::new(&mut s, Mode::Eval, 0);
        let h0 = g.input(random([2, 4, 4, 16], seed).map(|v| v * amp));
        let o = f.forward(&mut g, h0, 0).unwrap();
        prop_assert!(g.value(o.tau).data().iter().all(|&t| t > 0.0 && t < 1.0));
        prop_assert!(g.value(o.a_hs).data().iter().all(|&t| t > 0.0 && t < 1.0));
        let a = g.value(o.alpha_p);
        for n in 0..2 {
            prop_assert!((a.at(n, 0, 0, 0) + a.at(n, 1, 0, 0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dvca_shapes_for_any_modality_count(m in 2usize..5, h in 2usize..9, seed in any::<u64>()) {
        let mut s = ParamStore::<f64>::new(seed);
        let d = Dvca::new(&mut s, "d", 4, m, [4, 8], &Modules::default(), &all_on(), 0.1, false).unwrap();
        let xs: Vec<Tensor<f64>> = (0..m).map(|i| random([1, 4, h, h + 1], seed ^ i as u64)).collect();
        let out = run_many(&mut s, &xs, |g, v| d.forward(g, v, Wiring::Cascaded));
        prop_assert_eq!(out.len(), m);
        for (o, x) in out.iter().zip(&xs) {
            prop_assert_eq!(o.shape(), x.shape());
        }
    }
}
