//! Plain-loop reference implementations shared by the integration tests.
#![allow(dead_code)]

use multicos::nn::ParamStore;
use multicos::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const SLOPE: f64 = 0.01;

pub fn dims(x: &Tensor) -> (usize, usize, usize, usize) {
    x.dims4().unwrap()
}

pub fn t4(b: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(&[b, c, h, w], data).unwrap()
}

pub fn random4(rng: &mut ChaCha8Rng, b: usize, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::uniform(&[b, c, h, w], -1.0, 1.0, rng)
}

pub fn at(x: &Tensor, b: usize, c: usize, y: usize, xx: usize) -> f64 {
    let (_, cc, h, w) = dims(x);
    x.data()[((b * cc + c) * h + y) * w + xx]
}

pub fn param<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.get(name).unwrap_or_else(|| panic!("no parameter {name}"))
}

pub fn buffer<'a>(store: &'a ParamStore, name: &str) -> &'a Tensor {
    store.get_buffer(name).unwrap_or_else(|| panic!("no buffer {name}"))
}

/// Replaces every parameter under `prefix` with uniform noise, keeping state
/// matrices (`.a`) untouched so scans stay stable. Running variances are
/// kept positive.
pub fn randomize(store: &mut ParamStore, prefix: &str, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = store.names().to_vec();
    for n in names.iter().filter(|n| n.starts_with(prefix) && !n.ends_with(".a")) {
        let shape = store.get(n).unwrap().shape().to_vec();
        store.set(n, Tensor::uniform(&shape, -scale, scale, rng)).unwrap();
    }
    let buffers: Vec<String> = store.buffer_names().to_vec();
    for n in buffers.iter().filter(|n| n.starts_with(prefix)) {
        let shape = store.get_buffer(n).unwrap().shape().to_vec();
        let v = if n.ends_with("running_var") {
            Tensor::uniform(&shape, 0.5, 1.5, rng)
        } else {
            Tensor::uniform(&shape, -0.2, 0.2, rng)
        };
        store.set(n, v).unwrap();
    }
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

pub fn softplus(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        (1.0 + v.exp()).ln()
    }
}

pub fn lrelu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        SLOPE * v
    }
}

pub fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    x.map(f)
}

pub fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

pub fn add(a: &Tensor, b: &Tensor) -> Tensor {
    zip(a, b, |x, y| x + y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Tensor {
    zip(a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

/// `x[b, c, y, x] * v[c]`.
pub fn mul_channel(x: &Tensor, v: &Tensor) -> Tensor {
    let (b, c, h, w) = dims(x);
    assert_eq!(v.numel(), c);
    let mut out = x.clone();
    for i in 0..b * c * h * w {
        out.data_mut()[i] *= v.data()[(i / (h * w)) % c];
    }
    out
}

/// `x[b, c, y, x] * g[b, 0, y, x]`.
pub fn mul_pixel(x: &Tensor, g: &Tensor) -> Tensor {
    let (b, c, h, w) = dims(x);
    assert_eq!(g.shape(), &[b, 1, h, w]);
    let mut out = x.clone();
    for bi in 0..b {
        for ci in 0..c {
            for p in 0..h * w {
                out.data_mut()[(bi * c + ci) * h * w + p] *= g.data()[bi * h * w + p];
            }
        }
    }
    out
}

pub fn narrow(x: &Tensor, start: usize, len: usize) -> Tensor {
    let (b, c, h, w) = dims(x);
    let mut data = Vec::with_capacity(b * len * h * w);
    for bi in 0..b {
        for ci in start..start + len {
            assert!(ci < c);
            let off = (bi * c + ci) * h * w;
            data.extend_from_slice(&x.data()[off..off + h * w]);
        }
    }
    t4(b, len, h, w, data)
}

pub fn cat(parts: &[&Tensor]) -> Tensor {
    let (b, _, h, w) = dims(parts[0]);
    let c: usize = parts.iter().map(|p| dims(p).1).sum();
    let mut data = Vec::with_capacity(b * c * h * w);
    for bi in 0..b {
        for p in parts {
            let pc = dims(p).1;
            let off = bi * pc * h * w;
            data.extend_from_slice(&p.data()[off..off + pc * h * w]);
        }
    }
    t4(b, c, h, w, data)
}

/// Cross-correlation with zero padding.
pub fn conv(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    dil: usize,
    groups: usize,
) -> Tensor {
    let (b, cin, h, w) = dims(x);
    let (cout, cpg, kh, kw) = dims(weight);
    assert_eq!(cpg * groups, cin);
    let oh = (h + 2 * pad - dil * (kh - 1) - 1) / stride + 1;
    let ow = (w + 2 * pad - dil * (kw - 1) - 1) / stride + 1;
    let opg = cout / groups;
    let mut out = vec![0.0; b * cout * oh * ow];
    for bi in 0..b {
        for co in 0..cout {
            let g = co / opg;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |t| t.data()[co]);
                    for ci in 0..cpg {
                        let cx = g * cpg + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += at(weight, co, ci, ky, kx) * at(x, bi, cx, iy as usize, ix as usize);
                            }
                        }
                    }
                    out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    t4(b, cout, oh, ow, out)
}

/// Conv parameters stored under `name.w` / `name.b`.
pub fn conv_named(store: &ParamStore, name: &str, x: &Tensor, stride: usize, pad: usize, dil: usize, groups: usize) -> Tensor {
    let w = param(store, &format!("{name}.w"));
    let b = store.get(&format!("{name}.b"));
    conv(x, w, b, stride, pad, dil, groups)
}

pub fn pointwise(store: &ParamStore, name: &str, x: &Tensor) -> Tensor {
    conv_named(store, name, x, 1, 0, 1, 1)
}

/// Per-pixel normalization across channels, biased variance.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let (b, c, h, w) = dims(x);
    let mut out = x.clone();
    for bi in 0..b {
        for p in 0..h * w {
            let idx = |ci: usize| (bi * c + ci) * h * w + p;
            let mean: f64 = (0..c).map(|ci| x.data()[idx(ci)]).sum::<f64>() / c as f64;
            let var: f64 = (0..c).map(|ci| (x.data()[idx(ci)] - mean).powi(2)).sum::<f64>() / c as f64;
            for ci in 0..c {
                out.data_mut()[idx(ci)] =
                    (x.data()[idx(ci)] - mean) / (var + EPS).sqrt() * gamma.data()[ci] + beta.data()[ci];
            }
        }
    }
    out
}

pub fn layer_norm_named(store: &ParamStore, name: &str, x: &Tensor) -> Tensor {
    layer_norm(x, param(store, &format!("{name}.gamma")), param(store, &format!("{name}.beta")))
}

/// Batch norm with running statistics.
pub fn batch_norm_eval(store: &ParamStore, name: &str, x: &Tensor) -> Tensor {
    let (b, c, h, w) = dims(x);
    let g = param(store, &format!("{name}.gamma"));
    let be = param(store, &format!("{name}.beta"));
    let m = buffer(store, &format!("{name}.running_mean"));
    let v = buffer(store, &format!("{name}.running_var"));
    let mut out = x.clone();
    for i in 0..b * c * h * w {
        let ci = (i / (h * w)) % c;
        out.data_mut()[i] = (x.data()[i] - m.data()[ci]) / (v.data()[ci] + EPS).sqrt() * g.data()[ci] + be.data()[ci];
    }
    out
}

/// `BN(LReLU(conv3×3(x)))` in evaluation mode.
pub fn conv_block(store: &ParamStore, name: &str, x: &Tensor, stride: usize) -> Tensor {
    let y = conv_named(store, &format!("{name}.conv"), x, stride, 1, 1, 1).map(lrelu);
    batch_norm_eval(store, &format!("{name}.bn"), &y)
}

pub fn global_pool(x: &Tensor) -> Tensor {
    let (b, c, h, w) = dims(x);
    let data = (0..b * c)
        .map(|i| x.data()[i * h * w..(i + 1) * h * w].iter().sum::<f64>() / (h * w) as f64)
        .collect();
    t4(b, c, 1, 1, data)
}

pub fn channel_attention(store: &ParamStore, name: &str, x: &Tensor) -> Tensor {
    let pooled = global_pool(x);
    let hidden = pointwise(store, &format!("{name}.fc1"), &pooled).map(|v| v.max(0.0));
    let weights = pointwise(store, &format!("{name}.fc2"), &hidden).map(sigmoid);
    let (b, c, h, w) = dims(x);
    let mut out = x.clone();
    for i in 0..b * c * h * w {
        out.data_mut()[i] *= weights.data()[i / (h * w)];
    }
    out
}

/// Visiting orders: row-major, its reverse, row-major over mirrored rows,
/// and that reversed.
pub fn scan_orders(h: usize, w: usize) -> [Vec<usize>; 4] {
    let forward: Vec<usize> = (0..h * w).collect();
    let mut backward = forward.clone();
    backward.reverse();
    let mut mirrored = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in (0..w).rev() {
            mirrored.push(y * w + x);
        }
    }
    let mut mirrored_back = mirrored.clone();
    mirrored_back.reverse();
    [forward, backward, mirrored, mirrored_back]
}

/// One selective recurrence per channel along `order`:
/// `h = exp(Δa)·h + g(Δ, a)·B·u`, `y = C·h`. `zoh` selects the exact input
/// gain `(exp(Δa) − 1)/a` over `Δ`.
pub fn scan_one(u: &Tensor, delta: &Tensor, a: &Tensor, bm: &Tensor, cm: &Tensor, order: &[usize], zoh: bool) -> Tensor {
    let (b, d, h, w) = dims(u);
    let n = dims(bm).1;
    let mut y = Tensor::zeros(&[b, d, h, w]);
    for bi in 0..b {
        for ch in 0..d {
            let mut state = vec![0.0; n];
            for &pos in order {
                let (py, px) = (pos / w, pos % w);
                let dt = at(delta, bi, ch, py, px);
                let x = at(u, bi, ch, py, px);
                let mut acc = 0.0;
                for (i, s) in state.iter_mut().enumerate() {
                    let av = a.data()[ch * n + i];
                    let decay = (dt * av).exp();
                    let gain = if zoh { (decay - 1.0) / av } else { dt };
                    *s = decay * *s + gain * at(bm, bi, i, py, px) * x;
                    acc += at(cm, bi, i, py, px) * *s;
                }
                y.data_mut()[((bi * d + ch) * h + py) * w + px] = acc;
            }
        }
    }
    y
}

/// `(Δ, B, C)` from the selector stored under `name` applied to `x`.
pub fn selection(store: &ParamStore, name: &str, x: &Tensor) -> (Tensor, Tensor, Tensor) {
    let low = pointwise(store, &format!("{name}.dt_down"), x);
    let delta = pointwise(store, &format!("{name}.dt_up"), &low).map(softplus);
    let bm = pointwise(store, &format!("{name}.proj_b"), x);
    let cm = pointwise(store, &format!("{name}.proj_c"), x);
    (delta, bm, cm)
}

/// Mean over the four traversals of `u`, with selection taken from `sel_src`
/// through `selectors` selector sets (1 shared or 4 per direction).
pub fn four_way_scan(store: &ParamStore, prefix: &str, selectors: usize, u: &Tensor, sel_src: &Tensor, zoh: bool) -> Tensor {
    let (_, _, h, w) = dims(u);
    let mut acc = Tensor::zeros(u.shape());
    for (k, order) in scan_orders(h, w).iter().enumerate() {
        let name = format!("{prefix}.sel{}", k % selectors);
        let (delta, bm, cm) = selection(store, &name, sel_src);
        let a = param(store, &format!("{name}.a"));
        acc = add(&acc, &scan_one(u, &delta, a, &bm, &cm, order, zoh));
    }
    scale(&acc, 0.25)
}

/// Straight-line residual SSM block.
pub fn ssm_block(store: &ParamStore, p: &str, d_inner: usize, selectors: usize, x: &Tensor, zoh: bool) -> Tensor {
    let h = layer_norm_named(store, &format!("{p}.norm"), x);
    let proj = pointwise(store, &format!("{p}.in_proj"), &h);
    let xp = narrow(&proj, 0, d_inner);
    let z = narrow(&proj, d_inner, d_inner);
    let xc = conv_named(store, &format!("{p}.dw_conv"), &xp, 1, 1, 1, d_inner).map(silu);
    let y = four_way_scan(store, p, selectors, &xc, &xc, zoh);
    let gated = mul(&layer_norm_named(store, &format!("{p}.out_norm"), &y), &z.map(silu));
    add(&pointwise(store, &format!("{p}.out_proj"), &gated), x)
}

/// Straight-line cross state space block.
pub fn cssm(store: &ParamStore, p: &str, d_inner: usize, selectors: usize, f_n: &Tensor, f_x: &Tensor, zoh: bool) -> Tensor {
    let pn = pointwise(store, &format!("{p}.in_proj"), f_n);
    let px = pointwise(store, &format!("{p}.in_proj"), f_x);
    let (fn_p, z_n) = (narrow(&pn, 0, d_inner), narrow(&pn, d_inner, d_inner));
    let (fx_p, z_x) = (narrow(&px, 0, d_inner), narrow(&px, d_inner, d_inner));
    let h_n = conv_named(store, &format!("{p}.dw_conv_n"), &fn_p, 1, 1, 1, d_inner).map(silu);
    let h_x = conv_named(store, &format!("{p}.dw_conv_x"), &fx_p, 1, 1, 1, d_inner).map(silu);
    let y = four_way_scan(store, p, selectors, &h_x, &h_n, zoh);
    let y = layer_norm_named(store, &format!("{p}.norm"), &y);
    let gated = mul(&mul(&y, &z_n.map(silu)), &z_x.map(silu));
    let big_y = pointwise(store, &format!("{p}.out_proj"), &gated);
    cssm_residual(store, p, &big_y, f_n)
}

/// `CA(conv(LN(Y + s⊙f_n))) + s′⊙f_n`.
pub fn cssm_residual(store: &ParamStore, p: &str, big_y: &Tensor, f_n: &Tensor) -> Tensor {
    let inner = add(big_y, &mul_channel(f_n, param(store, &format!("{p}.s"))));
    let normed = layer_norm_named(store, &format!("{p}.post_norm"), &inner);
    let conv = conv_named(store, &format!("{p}.post_conv"), &normed, 1, 1, 1, 1);
    let attended = channel_attention(store, &format!("{p}.ca"), &conv);
    add(&attended, &mul_channel(f_n, param(store, &format!("{p}.s_prime"))))
}

pub fn assert_close(a: &Tensor, b: &Tensor, tol: f64) {
    assert_eq!(a.shape(), b.shape(), "shape mismatch");
    let d = a.max_abs_diff(b);
    assert!(d < tol, "max abs diff {d:e} exceeds {tol:e}");
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

/// Half-pixel bilinear resize with edge clamping.
pub fn bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (b, c, h, w) = dims(x);
    let src = |o: usize, inp: usize, out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(inp - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for bi in 0..b {
        for ci in 0..c {
            for oy in 0..oh {
                let (y0, y1, fy) = src(oy, h, oh);
                for ox in 0..ow {
                    let (x0, x1, fx) = src(ox, w, ow);
                    let top = at(x, bi, ci, y0, x0) * (1.0 - fx) + at(x, bi, ci, y0, x1) * fx;
                    let bottom = at(x, bi, ci, y1, x0) * (1.0 - fx) + at(x, bi, ci, y1, x1) * fx;
                    out.push(top * (1.0 - fy) + bottom * fy);
                }
            }
        }
    }
    t4(b, c, oh, ow, out)
}

/// Edge-replicating pad.
pub fn pad_edge(x: &Tensor, pad: usize) -> Tensor {
    let (b, c, h, w) = dims(x);
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut out = Vec::with_capacity(b * c * ph * pw);
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..ph {
                let sy = y.saturating_sub(pad).min(h - 1);
                for xx in 0..pw {
                    let sx = xx.saturating_sub(pad).min(w - 1);
                    out.push(at(x, bi, ci, sy, sx));
                }
            }
        }
    }
    t4(b, c, ph, pw, out)
}
