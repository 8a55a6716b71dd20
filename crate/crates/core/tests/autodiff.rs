use multicos::autodiff::*;
use multicos::{Error, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_t(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y}");
    }
}

#[test]
fn unary_examples() {
    let tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    assert_eq!(z.sigmoid().item(), 0.5);
    assert_eq!(z.silu().item(), 0.0);
    // ln(1 + e^3.7), 50-digit reference
    let reference = 3.724_422_845_933_779_159_494_33_f64;
    let sp = tape.constant(Tensor::scalar(3.7)).softplus().item();
    assert!(((sp - reference) / reference).abs() < 1e-12);
    let big = tape.constant(Tensor::from_vec(vec![-800.0, 800.0])).softplus().value();
    assert!(big.is_finite());
    assert_eq!(big.data()[1], 800.0);
}

#[test]
fn binary_examples() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let b = tape.constant(Tensor::from_vec(vec![2.0, 2.0, 2.0]));
    assert_eq!(a.mul(b).unwrap().value().data(), &[2.0, 4.0, 6.0]);

    let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2]));
    let y = tape.constant(Tensor::zeros(&[1, 3, 2, 2]));
    assert_eq!(concat_channels(&[x, y]).unwrap().shape(), vec![1, 5, 2, 2]);

    let bad = tape.constant(Tensor::zeros(&[1, 3, 3, 2]));
    assert!(matches!(
        concat_channels(&[x, bad]),
        Err(Error::ShapeMismatch { .. })
    ));
    let c = tape.constant(Tensor::zeros(&[4]));
    assert!(matches!(a.add(c), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn channel_broadcast_matches_loop_oracle() {
    let mut r = rng(1);
    let v = rand_t(&[3], &mut r);
    let m = rand_t(&[2, 3, 2, 2], &mut r);
    let tape = Tape::new();
    let out = tape
        .constant(v.clone())
        .add(tape.constant(m.clone()))
        .unwrap()
        .value();
    assert_eq!(out.shape(), &[2, 3, 2, 2]);
    let mut expected = Vec::new();
    for b in 0..2 {
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    expected.push(v.data()[c] + m.at4(b, c, y, x));
                }
            }
        }
    }
    close(out.data(), &expected, 0.0);
}

#[test]
fn matmul_examples() {
    let mut r = rng(2);
    let tape = Tape::new();
    let m = rand_t(&[3, 4], &mut r);
    let mut eye = Tensor::zeros(&[3, 3]);
    for i in 0..3 {
        eye.data_mut()[i * 3 + i] = 1.0;
    }
    let p = matmul(tape.constant(eye), tape.constant(m.clone())).unwrap();
    assert_eq!(*p.value(), m);

    let a = Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let ones = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
    let p = matmul(tape.constant(a), tape.constant(ones)).unwrap();
    assert_eq!(p.value().data(), &[3.0, 7.0]);

    let a = rand_t(&[5, 7], &mut r);
    let b = rand_t(&[7, 3], &mut r);
    let p = matmul(tape.constant(a.clone()), tape.constant(b.clone())).unwrap();
    let mut oracle = vec![0.0; 15];
    for i in 0..5 {
        for j in 0..3 {
            for k in 0..7 {
                oracle[i * 3 + j] += a.data()[i * 7 + k] * b.data()[k * 3 + j];
            }
        }
    }
    close(p.value().data(), &oracle, 1e-12);
    assert!(matmul(tape.constant(a), tape.constant(rand_t(&[6, 2], &mut r))).is_err());
}

/// Direct summation over the definition of cross-correlation.
fn conv_oracle(x: &Tensor, w: &Tensor, bias: Option<&Tensor>, o: ConvOpts) -> Tensor {
    let (b, cin, h, wd) = x.dims4().unwrap();
    let (cout, cin_g, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * o.padding - o.dilation * (kh - 1) - 1) / o.stride + 1;
    let ow = (wd + 2 * o.padding - o.dilation * (kw - 1) - 1) / o.stride + 1;
    let cout_g = cout / o.groups;
    let mut out = Tensor::zeros(&[b, cout, oh, ow]);
    for bi in 0..b {
        for oc in 0..cout {
            let g = oc / cout_g;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = bias.map_or(0.0, |t| t.data()[oc]);
                    for icl in 0..cin_g {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * o.stride + ky * o.dilation) as isize - o.padding as isize;
                                let ix = (ox * o.stride + kx * o.dilation) as isize - o.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                s += w.at4(oc, icl, ky, kx)
                                    * x.at4(bi, g * cin_g + icl, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.data_mut()[((bi * cout + oc) * oh + oy) * ow + ox] = s;
                }
            }
        }
    }
    let _ = cin;
    out
}

#[test]
fn conv2d_examples() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = tape.constant(Tensor::full(&[1, 1, 1, 1], 2.0));
    let y = conv2d(x, w, None, ConvOpts::default()).unwrap();
    assert_eq!(y.value().data(), &[2.0, 4.0, 6.0, 8.0]);

    let mut r = rng(3);
    let img = rand_t(&[1, 1, 4, 5], &mut r);
    let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
    delta.data_mut()[4] = 1.0;
    let y = conv2d(tape.constant(img.clone()), tape.constant(delta), None, ConvOpts::same(3)).unwrap();
    assert_eq!(*y.value(), img);

    let x = rand_t(&[2, 3, 5, 5], &mut r);
    let w = rand_t(&[4, 3, 3, 3], &mut r);
    let b = rand_t(&[4], &mut r);
    let opts = ConvOpts::same(3);
    let y = conv2d(tape.constant(x.clone()), tape.constant(w.clone()), Some(tape.constant(b.clone())), opts).unwrap();
    let oracle = conv_oracle(&x, &w, Some(&b), opts);
    assert_eq!(y.shape(), oracle.shape().to_vec());
    close(y.value().data(), oracle.data(), 1e-10);

    for opts in [
        ConvOpts { stride: 2, padding: 1, dilation: 1, groups: 1 },
        ConvOpts { stride: 1, padding: 2, dilation: 2, groups: 1 },
        ConvOpts { stride: 2, padding: 0, dilation: 1, groups: 1 },
    ] {
        let y = conv2d(tape.constant(x.clone()), tape.constant(w.clone()), None, opts).unwrap();
        close(y.value().data(), conv_oracle(&x, &w, None, opts).data(), 1e-10);
    }

    let bad_groups = ConvOpts { groups: 2, ..ConvOpts::default() };
    assert!(matches!(
        conv2d(tape.constant(x.clone()), tape.constant(w.clone()), None, bad_groups),
        Err(Error::InvalidGroups(_))
    ));
    let huge = tape.constant(Tensor::zeros(&[1, 3, 9, 9]));
    assert!(matches!(
        conv2d(tape.constant(x), huge, None, ConvOpts::default()),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn depthwise_conv_equals_independent_channel_convs() {
    let mut r = rng(4);
    let c = 4;
    let x = rand_t(&[2, c, 6, 5], &mut r);
    let w = rand_t(&[c, 1, 3, 3], &mut r);
    let tape = Tape::new();
    let opts = ConvOpts { groups: c, ..ConvOpts::same(3) };
    let y = conv2d(tape.constant(x.clone()), tape.constant(w.clone()), None, opts).unwrap().value();
    for ch in 0..c {
        let xc = tape.constant(x.clone()).narrow_channels(ch, 1).unwrap();
        let wc = Tensor::new(&[1, 1, 3, 3], w.data()[ch * 9..(ch + 1) * 9].to_vec()).unwrap();
        let single = conv2d(xc, tape.constant(wc), None, ConvOpts::same(3)).unwrap();
        let expected = y.narrow_channels(ch, 1).unwrap();
        assert_eq!(*single.value(), expected);
    }
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::new();
    let g = tape.constant(Tensor::ones(&[4]));
    let b = tape.constant(Tensor::zeros(&[4]));
    let c = tape.constant(Tensor::full(&[4], 3.5));
    let y = layer_norm(c, g, b, 1e-5).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 0.0));

    let g2 = tape.constant(Tensor::ones(&[2]));
    let b2 = tape.constant(Tensor::zeros(&[2]));
    let y = layer_norm(tape.constant(Tensor::from_vec(vec![1.0, 3.0])), g2, b2, 1e-5).unwrap();
    // variance 1, so the output is +-1/sqrt(1 + eps)
    let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
    close(y.value().data(), &[-expected, expected], 1e-15);

    let mut r = rng(5);
    let x = rand_t(&[3, 16, 2, 2], &mut r);
    let g = tape.constant(Tensor::ones(&[16]));
    let b = tape.constant(Tensor::zeros(&[16]));
    let y = layer_norm(tape.constant(x), g, b, 0.0).unwrap().value();
    for bi in 0..3 {
        for p in 0..4 {
            let vals: Vec<f64> = (0..16).map(|c| y.data()[(bi * 16 + c) * 4 + p]).collect();
            let m = vals.iter().sum::<f64>() / 16.0;
            let v = vals.iter().map(|t| (t - m).powi(2)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-6 && (v - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn interpolate_examples() {
    let mut r = rng(6);
    let tape = Tape::new();
    let x = rand_t(&[1, 2, 3, 4], &mut r);
    for mode in [InterpMode::Nearest, InterpMode::Bilinear] {
        let y = interpolate(tape.constant(x.clone()), 3, 4, mode).unwrap();
        assert_eq!(*y.value(), x);
    }
    let sq = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
    let y = interpolate(tape.constant(sq), 1, 1, InterpMode::Bilinear).unwrap();
    assert!((y.item() - 3.0).abs() < 1e-15);
    let one = Tensor::full(&[1, 1, 1, 1], 0.25);
    let y = interpolate(tape.constant(one), 2, 2, InterpMode::Nearest).unwrap();
    assert_eq!(y.value().data(), &[0.25; 4]);
}

#[test]
fn backward_examples() {
    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
    let g = tape.backward(x.sum()).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![1.0, 2.0]));
    let loss = x.mul(x).unwrap().sum();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);

    let tape = Tape::new();
    let x = tape.var(Tensor::from_vec(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x.sigmoid()), Err(Error::NonScalarLoss(_))));
}

#[test]
fn sigmoid_matmul_chain_matches_finite_differences() {
    let mut r = rng(7);
    let a = rand_t(&[3, 4], &mut r);
    let b = rand_t(&[4, 2], &mut r);
    let report = grad_check(
        |_, v| Ok(matmul(v[0], v[1])?.sigmoid().sum()),
        &[a, b],
        &GradCheckOptions::with_tol(1e-6),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn grad_check_linear_function_is_exact() {
    let mut r = rng(8);
    let w = rand_t(&[6], &mut r);
    let x = rand_t(&[6], &mut r);
    let report = grad_check(
        |tape, v| Ok(tape.constant(w.clone()).mul(v[0])?.sum()),
        &[x],
        &GradCheckOptions::with_tol(1e-10),
    )
    .unwrap();
    assert!(report.passed() && report.max_rel_err < 1e-10, "{report:?}");
}

#[test]
fn grad_check_reports_wrong_derivative() {
    let report = grad_check(
        |_, v| Ok(v[0].map_custom(|x| x * x, |x| 3.0 * x).sum()),
        &[Tensor::from_vec(vec![0.5, -1.5])],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(!report.passed());
    assert_eq!(report.failures.len(), 2);
    assert!(grad_check(|_, v| Ok(v[0].sum()), &[Tensor::scalar(1.0)], &GradCheckOptions { step: 0.5, ..Default::default() }).is_err());
}

fn random_shape(r: &mut ChaCha8Rng) -> Vec<usize> {
    vec![r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4)]
}

fn weighted_sum<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> multicos::Result<Var<'t>> {
    // a random linear functional exercises every output element
    let mut r = rng(seed);
    let w = tape.constant(Tensor::uniform(&y.shape(), -1.0, 1.0, &mut r));
    Ok(y.mul(w)?.sum())
}

#[test]
fn every_op_passes_gradient_check_on_random_shapes() {
    let opts = GradCheckOptions::default();
    for trial in 0..20u64 {
        let mut r = rng(100 + trial);
        let shape = random_shape(&mut r);
        let x = rand_t(&shape, &mut r);
        let y = rand_t(&shape, &mut r);
        let pos = x.map(|v| v.abs() + 0.5);
        let kinds = [
            Unary::Sigmoid,
            Unary::Silu,
            Unary::Softplus,
            Unary::Exp,
            Unary::Neg,
            Unary::Relu,
            Unary::LeakyRelu(0.01),
            Unary::Abs,
        ];
        for kind in kinds {
            let rep = grad_check(|t, v| weighted_sum(t, v[0].unary(kind), trial), &[x.clone()], &opts).unwrap();
            assert!(rep.passed(), "{kind:?} {shape:?} {rep:?}");
        }
        for kind in [Binary::Add, Binary::Sub, Binary::Mul, Binary::Div] {
            let rep = grad_check(|t, v| weighted_sum(t, v[0].binary(kind, v[1])?, trial), &[y.clone(), pos.clone()], &opts).unwrap();
            assert!(rep.passed(), "{kind:?} {shape:?} {rep:?}");
        }
        // broadcast against a per-channel vector and a single-channel gate
        let cvec = rand_t(&[shape[1]], &mut r);
        let gate = rand_t(&[shape[0], 1, shape[2], shape[3]], &mut r);
        let rep = grad_check(|t, v| weighted_sum(t, v[0].mul(v[1])?.add(v[2])?, trial), &[x.clone(), cvec, gate], &opts).unwrap();
        assert!(rep.passed(), "broadcast {rep:?}");

        let other = rand_t(&[shape[0], 2, shape[2], shape[3]], &mut r);
        let rep = grad_check(|t, v| weighted_sum(t, concat_channels(&[v[0], v[1]])?.narrow_channels(1, shape[1])?, trial), &[x.clone(), other], &opts).unwrap();
        assert!(rep.passed(), "concat/narrow {rep:?}");

        let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let rep = grad_check(|t, v| weighted_sum(t, matmul(v[0], v[1])?, trial), &[rand_t(&[m, k], &mut r), rand_t(&[k, n], &mut r)], &opts).unwrap();
        assert!(rep.passed(), "matmul {rep:?}");

        let cin = shape[1] * 2;
        let groups = if trial % 2 == 0 { 1 } else { 2 };
        let cout = 2 * groups;
        let xin = rand_t(&[shape[0], cin, shape[2] + 2, shape[3] + 3], &mut r);
        let w = rand_t(&[cout, cin / groups, 3, 3], &mut r);
        let b = rand_t(&[cout], &mut r);
        let copts = ConvOpts { stride: 1 + (trial as usize % 2), padding: 1, dilation: 1 + (trial as usize % 3 == 0) as usize, groups };
        let rep = grad_check(|t, v| weighted_sum(t, conv2d(v[0], v[1], Some(v[2]), copts)?, trial), &[xin, w, b], &opts).unwrap();
        assert!(rep.passed(), "conv {copts:?} {rep:?}");

        let c = shape[1] + 1;
        let xl = rand_t(&[shape[0], c, shape[2], shape[3]], &mut r);
        let gl = rand_t(&[c], &mut r);
        let bl = rand_t(&[c], &mut r);
        let rep = grad_check(|t, v| weighted_sum(t, layer_norm(v[0], v[1], v[2], 1e-5)?, trial), &[xl.clone(), gl.clone(), bl.clone()], &opts).unwrap();
        assert!(rep.passed(), "layer_norm {rep:?}");
        let xb = rand_t(&[2, c, shape[2] + 1, shape[3]], &mut r);
        let rep = grad_check(|t, v| weighted_sum(t, batch_norm_train(v[0], v[1], v[2], 1e-5)?.0, trial), &[xb.clone(), gl.clone(), bl.clone()], &opts).unwrap();
        assert!(rep.passed(), "batch_norm {rep:?}");
        let rm = vec![0.1; c];
        let rv = vec![0.7; c];
        let rep = grad_check(|t, v| weighted_sum(t, batch_norm_eval(v[0], v[1], v[2], &rm, &rv, 1e-5)?, trial), &[xb, gl, bl], &opts).unwrap();
        assert!(rep.passed(), "batch_norm_eval {rep:?}");

        for mode in [InterpMode::Nearest, InterpMode::Bilinear] {
            let (oh, ow) = (r.gen_range(1..7), r.gen_range(1..7));
            let rep = grad_check(|t, v| weighted_sum(t, interpolate(v[0], oh, ow, mode)?, trial), &[x.clone()], &opts).unwrap();
            assert!(rep.passed(), "interpolate {mode:?} {rep:?}");
        }
        let rep = grad_check(|t, v| weighted_sum(t, v[0].global_avg_pool()?, trial), &[x.clone()], &opts).unwrap();
        assert!(rep.passed());
        let rep = grad_check(|t, v| weighted_sum(t, pad_replicate(v[0], 2)?, trial), &[x.clone()], &opts).unwrap();
        assert!(rep.passed());
        let rep = grad_check(|_, v| Ok(v[0].affine(-2.0, 0.3).mean()), &[x.clone()], &opts).unwrap();
        assert!(rep.passed());
    }
}

#[test]
fn add_is_commutative_and_associative() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let shape = random_shape(&mut r);
        let (a, b, c) = (rand_t(&shape, &mut r), rand_t(&shape, &mut r), rand_t(&shape, &mut r));
        let tape = Tape::new();
        let (va, vb, vc) = (tape.constant(a), tape.constant(b), tape.constant(c));
        let ab = va.add(vb).unwrap().value();
        let ba = vb.add(va).unwrap().value();
        assert!(ab.max_abs_diff(&ba) <= 1e-12);
        let l = va.add(vb).unwrap().add(vc).unwrap().value();
        let rr = va.add(vb.add(vc).unwrap()).unwrap().value();
        assert!(l.max_abs_diff(&rr) <= 1e-12);
    }
}

#[test]
fn independent_subgraph_gradients_are_separable() {
    let mut r = rng(9);
    let x = rand_t(&[2, 3], &mut r);
    let y = rand_t(&[4], &mut r);
    fn f<'t>(t: &'t Tape, v: Var<'t>) -> Var<'t> {
        v.mul(v).unwrap().sigmoid().sum().add(t.constant(Tensor::scalar(0.0))).unwrap()
    }
    fn g(v: Var<'_>) -> Var<'_> {
        v.silu().exp().sum()
    }

    let tape = Tape::new();
    let (vx, vy) = (tape.var(x.clone()), tape.var(y.clone()));
    let joint = f(&tape, vx).add(g(vy)).unwrap();
    let grads = tape.backward(joint).unwrap();

    let t1 = Tape::new();
    let sx = t1.var(x);
    let gx = t1.backward(f(&t1, sx)).unwrap().get(sx).unwrap();
    let t2 = Tape::new();
    let sy = t2.var(y);
    let gy = t2.backward(g(sy)).unwrap().get(sy).unwrap();

    assert_eq!(grads.get(vx).unwrap(), gx);
    assert_eq!(grads.get(vy).unwrap(), gy);
}

#[test]
fn tape_records_in_topological_order() {
    let tape = Tape::new();
    let a = tape.var(Tensor::scalar(2.0));
    let b = a.exp();
    let c = b.mul(a).unwrap();
    assert!(a.id() < b.id() && b.id() < c.id());
    assert_eq!(tape.len(), 3);
    let g = tape.backward(c).unwrap();
    let expected = 2.0f64.exp() * 3.0;
    assert!((g.get(a).unwrap().item() - expected).abs() < 1e-12);
}
