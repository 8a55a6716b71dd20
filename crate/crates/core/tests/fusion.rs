mod common;

use common::*;
use multicos::autodiff::Tape;
use multicos::cssm::{cssm_forward, ssm_block, SsmDims};
use multicos::fusion::{ffm, gate_weights, lsfm, ssfm, Ffm, Gate, Lsfm, Ssfm, SsfmFlags};
use multicos::nn::{Ctx, Init, ParamStore};
use multicos::ssm::Discretization;
use multicos::verify::registry;
use multicos::{Error, Tensor};
use proptest::prelude::*;

const C: usize = 6;

fn eval2<F>(store: &ParamStore, a: &Tensor, b: &Tensor, f: F) -> Tensor
where
    F: for<'t> Fn(&Ctx<'t>, multicos::autodiff::Var<'t>, multicos::autodiff::Var<'t>) -> multicos::Result<multicos::autodiff::Var<'t>>,
{
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, false);
    let out = f(&ctx, tape.constant(a.clone()), tape.constant(b.clone())).unwrap();
    (*out.value()).clone()
}

fn zero_convs(store: &mut ParamStore, prefix: &str) {
    store.fill_where(prefix, |n| n.ends_with(".w") || n.ends_with(".b"), 0.0);
}

fn lsfm_setup(seed: u64) -> (ParamStore, Lsfm) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let p = Lsfm::new(&mut Init::new(&mut store, &mut r, "f"), "lsfm", C);
    (store, p)
}

fn lsfm_oracle(store: &ParamStore, f_i: &Tensor, f_u: &Tensor) -> Tensor {
    let gate = pointwise(store, "f.lsfm.w_gate", &conv_block(store, "f.lsfm.block_gate", f_u, 1)).map(sigmoid);
    let additive = pointwise(store, "f.lsfm.w_add", &conv_block(store, "f.lsfm.block_add", f_u, 1));
    add(&mul(f_i, &gate), &additive)
}

#[test]
fn lsfm_matches_formula() {
    let (mut store, p) = lsfm_setup(1);
    let mut r = rng(2);
    randomize(&mut store, "f.", &mut r, 0.5);
    let f_i = random4(&mut r, 2, C, 5, 4);
    let f_u = random4(&mut r, 2, C, 5, 4);
    let got = eval2(&store, &f_i, &f_u, |c, a, b| lsfm(c, a, b, &p));
    assert_close(&got, &lsfm_oracle(&store, &f_i, &f_u), 1e-12);
}

#[test]
fn lsfm_with_zero_modality_and_convs_halves_image_feature() {
    let (mut store, p) = lsfm_setup(3);
    zero_convs(&mut store, "f.");
    let f_i = random4(&mut rng(4), 1, C, 4, 4);
    let got = eval2(&store, &f_i, &Tensor::zeros(&[1, C, 4, 4]), |c, a, b| lsfm(c, a, b, &p));
    assert_close(&got, &scale(&f_i, 0.5), 1e-15);
}

#[test]
fn lsfm_with_zero_image_feature_is_the_additive_path() {
    let (mut store, p) = lsfm_setup(5);
    let mut r = rng(6);
    randomize(&mut store, "f.", &mut r, 0.5);
    let f_u = random4(&mut r, 1, C, 3, 3);
    let got = eval2(&store, &Tensor::zeros(&[1, C, 3, 3]), &f_u, |c, a, b| lsfm(c, a, b, &p));
    let want = pointwise(&store, "f.lsfm.w_add", &conv_block(&store, "f.lsfm.block_add", &f_u, 1));
    assert_close(&got, &want, 1e-12);
}

#[test]
fn lsfm_rejects_mismatched_shapes() {
    let (store, p) = lsfm_setup(1);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false);
    let a = tape.constant(Tensor::zeros(&[1, C, 4, 4]));
    let b = tape.constant(Tensor::zeros(&[1, C, 4, 2]));
    assert!(matches!(lsfm(&ctx, a, b, &p), Err(Error::ShapeMismatch { .. })));
}

fn ffm_setup(seed: u64) -> (ParamStore, Ffm) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let p = Ffm::new(&mut Init::new(&mut store, &mut r, "f"), "ffm", C);
    (store, p)
}

fn ffm_oracle(store: &ParamStore, f_u: &Tensor, f_x: &Tensor) -> Tensor {
    let cx = conv_block(store, "f.ffm.block_x", f_x, 1);
    let alpha = pointwise(store, "f.ffm.w_alpha", &cat(&[f_u, &cx])).map(sigmoid);
    let modulation = pointwise(store, "f.ffm.w_mod", &cx);
    let inner = add(&mul(&mul(f_u, &alpha), &modulation), f_u);
    conv_block(store, "f.ffm.block_out", &inner, 1)
}

#[test]
fn ffm_matches_formula() {
    let (mut store, p) = ffm_setup(1);
    let mut r = rng(7);
    randomize(&mut store, "f.", &mut r, 0.5);
    let f_u = random4(&mut r, 2, C, 4, 3);
    let f_x = random4(&mut r, 2, C, 4, 3);
    let got = eval2(&store, &f_u, &f_x, |c, a, b| ffm(c, a, b, &p));
    assert_close(&got, &ffm_oracle(&store, &f_u, &f_x), 1e-12);
}

#[test]
fn ffm_without_modulation_reduces_to_output_block() {
    let (mut store, p) = ffm_setup(2);
    let mut r = rng(8);
    randomize(&mut store, "f.", &mut r, 0.5);
    zero_convs(&mut store, "f.ffm.block_x");
    store.fill_where("f.ffm.block_x.bn", |_| true, 0.0);
    store.set("f.ffm.w_mod.b", Tensor::zeros(&[C])).unwrap();
    let f_u = random4(&mut r, 1, C, 4, 4);
    let got = eval2(&store, &f_u, &Tensor::zeros(&[1, C, 4, 4]), |c, a, b| ffm(c, a, b, &p));
    let want = conv_block(&store, "f.ffm.block_out", &f_u, 1);
    assert_close(&got, &want, 1e-12);
}

#[test]
fn ffm_with_closed_gate_reduces_to_output_block() {
    let (mut store, p) = ffm_setup(3);
    let mut r = rng(9);
    randomize(&mut store, "f.", &mut r, 0.5);
    store.set("f.ffm.w_alpha.b", Tensor::full(&[C], -1e3)).unwrap();
    let f_u = random4(&mut r, 1, C, 4, 4);
    let f_x = random4(&mut r, 1, C, 4, 4);
    let got = eval2(&store, &f_u, &f_x, |c, a, b| ffm(c, a, b, &p));
    assert_close(&got, &conv_block(&store, "f.ffm.block_out", &f_u, 1), 1e-12);
}

fn gate_setup(seed: u64, per_channel: bool) -> (ParamStore, Gate) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let g = Gate::new(&mut Init::new(&mut store, &mut r, "f"), "gate", C, per_channel);
    (store, g)
}

fn run_gate(store: &ParamStore, g: &Gate, x: &Tensor) -> Tensor {
    eval2(store, x, x, |c, a, _| gate_weights(c, a, g))
}

fn gate_oracle(store: &ParamStore, x: &Tensor) -> Tensor {
    let theta = |v: &Tensor| pointwise(store, "f.gate.theta", v).map(lrelu);
    let d1 = theta(x);
    let d2 = theta(&add(x, &d1));
    let mu = param(store, "f.gate.mu").data()[0];
    conv(&cat(&[&d1, &d2]), param(store, "f.gate.lambda.w"), None, 1, 0, 1, 1).map(|v| sigmoid(v + mu))
}

#[test]
fn zero_gate_is_one_half() {
    let (mut store, g) = gate_setup(1, false);
    store.fill_where("f.", |_| true, 0.0);
    let x = random4(&mut rng(3), 2, C, 3, 3);
    let out = run_gate(&store, &g, &x);
    assert_eq!(out.shape(), &[2, 1, 3, 3]);
    assert!(out.data().iter().all(|&v| v == 0.5));
}

#[test]
fn gate_matches_two_pass_oracle() {
    for per_channel in [false, true] {
        let (mut store, g) = gate_setup(4, per_channel);
        let mut r = rng(5);
        randomize(&mut store, "f.", &mut r, 1.0);
        let x = random4(&mut r, 2, C, 4, 3);
        let got = run_gate(&store, &g, &x);
        assert_eq!(got.shape()[1], if per_channel { C } else { 1 });
        assert_close(&got, &gate_oracle(&store, &x), 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn gate_stays_strictly_inside_unit_interval(seed in 0u64..1000, amp in 0.1f64..3.0) {
        let (mut store, g) = gate_setup(seed, false);
        let mut r = rng(seed + 1);
        randomize(&mut store, "f.", &mut r, 1.0);
        let x = scale(&random4(&mut r, 1, C, 3, 3), amp);
        let out = run_gate(&store, &g, &x);
        prop_assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

fn ssm_dims() -> SsmDims {
    SsmDims {
        d_model: 8,
        d_inner: 8,
        d_state: 3,
        d_conv: 3,
        per_direction: false,
        disc: Discretization::Taylor,
    }
}

fn ssfm_setup(seed: u64) -> (ParamStore, Ssfm) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let p = Ssfm::new(
        &mut Init::new(&mut store, &mut r, "f"),
        "ssfm",
        C,
        ssm_dims(),
        SsfmFlags::default(),
        false,
    )
    .unwrap();
    let mut r = rng(seed + 100);
    randomize(&mut store, "f.", &mut r, 0.4);
    (store, p)
}

fn run_ssfm(store: &ParamStore, p: &Ssfm, f_i: &Tensor, f_u: &Tensor) -> Tensor {
    eval2(store, f_i, f_u, |c, a, b| ssfm(c, a, b, p))
}

#[test]
fn ssfm_matches_composition_of_sub_operations() {
    let (store, p) = ssfm_setup(1);
    let mut r = rng(2);
    let f_i = random4(&mut r, 1, C, 4, 4);
    let f_u = random4(&mut r, 1, C, 4, 4);
    let got = run_ssfm(&store, &p, &f_i, &f_u);

    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false);
    let (vi, vu) = (tape.constant(f_i.clone()), tape.constant(f_u.clone()));
    let want = (|| -> multicos::Result<Tensor> {
        let a = p.proj_i.forward(&ctx, vi)?;
        let b = p.proj_u.forward(&ctx, vu)?;
        let cat = p.block_cat.forward(&ctx, multicos::autodiff::concat_channels(&[a, b])?)?;
        let ft_i = ssm_block(&ctx, a, &p.ssm_i)?;
        let ft_u = ssm_block(&ctx, b, &p.ssm_u)?;
        let ft_x = ssm_block(&ctx, cat, &p.ssm_x)?;
        let big_i = cssm_forward(&ctx, ft_i, ft_x, &p.cssm_i)?;
        let big_u = cssm_forward(&ctx, ft_u, ft_x, &p.cssm_u)?;
        let g = gate_weights(&ctx, ft_x, &p.gate)?;
        let path_i = p.block_i.forward(&ctx, g.mul(big_i)?.add(ft_x)?)?;
        let path_u = p.block_u.forward(&ctx, g.one_minus().mul(big_u)?.add(ft_x)?)?;
        Ok((*p.block_out.forward(&ctx, path_i.add(path_u)?)?.value()).clone())
    })()
    .unwrap();
    assert_close(&got, &want, 1e-10);
}

fn perturb(store: &mut ParamStore, prefix: &str, seed: u64) {
    randomize(store, prefix, &mut rng(seed), 0.9);
}

#[test]
fn fully_open_gate_ignores_the_modality_cross_path() {
    let (mut store, p) = ssfm_setup(3);
    store.set("f.ssfm.gate.mu", Tensor::full(&[1], 1e3)).unwrap();
    let mut r = rng(4);
    let f_i = random4(&mut r, 1, C, 4, 4);
    let f_u = random4(&mut r, 1, C, 4, 4);
    let before = run_ssfm(&store, &p, &f_i, &f_u);
    perturb(&mut store, "f.ssfm.cssm_u", 5);
    assert_eq!(run_ssfm(&store, &p, &f_i, &f_u).data(), before.data());
    perturb(&mut store, "f.ssfm.cssm_i", 6);
    assert!(run_ssfm(&store, &p, &f_i, &f_u).max_abs_diff(&before) > 1e-6);
}

#[test]
fn fully_closed_gate_ignores_the_image_cross_path() {
    let (mut store, p) = ssfm_setup(7);
    store.set("f.ssfm.gate.mu", Tensor::full(&[1], -1e3)).unwrap();
    let mut r = rng(8);
    let f_i = random4(&mut r, 1, C, 4, 4);
    let f_u = random4(&mut r, 1, C, 4, 4);
    let before = run_ssfm(&store, &p, &f_i, &f_u);
    perturb(&mut store, "f.ssfm.cssm_i", 9);
    assert_eq!(run_ssfm(&store, &p, &f_i, &f_u).data(), before.data());
    perturb(&mut store, "f.ssfm.cssm_u", 10);
    assert!(run_ssfm(&store, &p, &f_i, &f_u).max_abs_diff(&before) > 1e-6);
}

#[test]
fn gated_merge_lies_between_the_cross_paths() {
    let (store, p) = ssfm_setup(11);
    let mut r = rng(12);
    let f_i = random4(&mut r, 2, C, 3, 5);
    let f_u = random4(&mut r, 2, C, 3, 5);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false).with_trace();
    ssfm(&ctx, tape.constant(f_i), tape.constant(f_u), &p).unwrap();
    let g = ctx.traced("ssfm.gate").unwrap();
    let big_i = ctx.traced("ssfm.big_i").unwrap();
    let big_u = ctx.traced("ssfm.big_u").unwrap();
    let merged = add(&mul_pixel(&big_i, &g), &mul_pixel(&big_u, &g.map(|v| 1.0 - v)));
    for ((m, a), b) in merged.data().iter().zip(big_i.data()).zip(big_u.data()) {
        let (lo, hi) = (a.min(*b), a.max(*b));
        assert!(*m >= lo - 1e-12 && *m <= hi + 1e-12);
    }
}

#[test]
fn fusion_is_bit_reproducible_under_a_seed() {
    let mut r = rng(13);
    let f_i = random4(&mut r, 1, C, 4, 4);
    let f_u = random4(&mut r, 1, C, 4, 4);
    let (s1, p1) = ssfm_setup(21);
    let (s2, p2) = ssfm_setup(21);
    assert_eq!(run_ssfm(&s1, &p1, &f_i, &f_u).data(), run_ssfm(&s2, &p2, &f_i, &f_u).data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn fusion_preserves_spatial_extent(h in 1usize..6, w in 1usize..6) {
        let (store, p) = ssfm_setup(30);
        let mut r = rng((h * 10 + w) as u64);
        let f_i = random4(&mut r, 1, C, h, w);
        let f_u = random4(&mut r, 1, C, h, w);
        let fused = run_ssfm(&store, &p, &f_i, &f_u);
        prop_assert_eq!(fused.shape(), &[1, 8, h, w]);
        let (ls, lp) = lsfm_setup(31);
        let latent = eval2(&ls, &f_i, &f_u, |c, a, b| lsfm(c, a, b, &lp));
        prop_assert_eq!(latent.shape(), &[1, C, h, w]);
        let (fs, fp) = ffm_setup(32);
        let feedback = eval2(&fs, &f_u, &f_i, |c, a, b| ffm(c, a, b, &fp));
        prop_assert_eq!(feedback.shape(), &[1, C, h, w]);
    }
}

#[test]
fn fusion_blocks_pass_gradient_checks() {
    for block in registry().iter().filter(|b| ["lsfm", "ffm", "gate", "ssfm"].contains(&b.name.as_str())) {
        let report = block.check().unwrap();
        assert!(report.passed(), "{}: max error {:e}", block.name, report.max_rel_err);
    }
}
