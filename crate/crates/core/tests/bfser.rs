mod common;

use common::*;
use multicos::autodiff::{Tape, Var};
use multicos::bfser::{aspp_coarse, decode, level_extent, Aspp, Bfser, Decoder};
use multicos::checkpoint::Checkpoint;
use multicos::config::{Mode, ModelConfig, RunConfig};
use multicos::fusion::ffm;
use multicos::model::Model;
use multicos::nn::{Ctx, Init, ParamStore};
use multicos::Tensor;

fn small(size: usize) -> ModelConfig {
    ModelConfig {
        image_size: size,
        widths: [4, 4, 6, 6, 8],
        d_model: 8,
        d_inner: 8,
        d_state: 2,
        knowledge_channels: 8,
        ckler_widths: [4, 4, 4],
        ..ModelConfig::default()
    }
}

fn build(config: &ModelConfig, seed: u64) -> (ParamStore, Bfser) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let b = Bfser::new(&mut Init::new(&mut store, &mut r, ""), config).unwrap();
    (store, b)
}

fn gray_pair(seed: u64, b: usize, size: usize) -> (Tensor, Tensor) {
    let gray = Tensor::uniform(&[b, 1, size, size], 0.0, 1.0, &mut rng(seed));
    let rgb = cat(&[&gray, &gray, &gray]);
    (rgb, gray)
}

#[test]
fn encoder_levels_halve_the_extent() {
    let cfg = small(64);
    let (store, model) = build(&cfg, 1);
    let (rgb, gray) = gray_pair(2, 1, 64);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false).with_trace();
    let feats = model
        .encode_dual(&ctx, tape.constant(rgb), Some(tape.constant(gray)), None)
        .unwrap();
    let sizes: Vec<usize> = feats.f_i.iter().map(|f| f.shape()[2]).collect();
    assert_eq!(sizes, vec![32, 16, 8, 4, 2]);
    for k in 0..5 {
        assert_eq!(feats.f_u[k].shape(), feats.f_i[k].shape());
        assert_eq!(level_extent(64, k), sizes[k]);
    }
    assert_eq!(feats.f_x.len(), 4);
    assert_eq!(feats.f_u_prime.len(), 3);
}

/// Copies every image-encoder tensor onto the matching auxiliary-encoder
/// slot and makes the auxiliary stem replicate its single channel.
fn tie_encoders(store: &mut ParamStore) {
    let names: Vec<String> = store.names().iter().chain(store.buffer_names()).cloned().collect();
    for n in names.iter().filter(|n| n.starts_with("bfser.enc_i.")) {
        let target = n.replacen("bfser.enc_i.", "bfser.enc_u.", 1);
        let value = store.get(n).or_else(|| store.get_buffer(n)).unwrap().clone();
        store.set(&target, value).unwrap();
    }
    let mut w = Tensor::zeros(&[3, 1, 3, 3]);
    for c in 0..3 {
        w.data_mut()[c * 9 + 4] = 1.0;
    }
    store.set("bfser.enc_u.embed.w", w).unwrap();
    store.set("bfser.enc_u.embed.b", Tensor::zeros(&[3])).unwrap();
}

#[test]
fn tied_encoders_on_matching_inputs_agree() {
    let cfg = ModelConfig {
        enable_ffm: false,
        ..small(32)
    };
    let (mut store, model) = build(&cfg, 3);
    tie_encoders(&mut store);
    let (rgb, gray) = gray_pair(4, 2, 32);
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false);
    let feats = model
        .encode_dual(&ctx, tape.constant(rgb), Some(tape.constant(gray)), None)
        .unwrap();
    for k in 0..5 {
        assert_close(&feats.f_u[k].value(), &feats.f_i[k].value(), 1e-12);
    }
}

#[test]
fn feedback_output_feeds_the_next_auxiliary_level() {
    let cfg = small(32);
    let (mut store, model) = build(&cfg, 5);
    randomize(&mut store, "bfser.", &mut rng(6), 0.4);
    let (rgb, _) = gray_pair(7, 1, 32);
    let aux = Tensor::uniform(&[1, 1, 32, 32], 0.0, 1.0, &mut rng(8));
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &store, false).with_trace();
    model
        .forward(&ctx, tape.constant(rgb), Some(tape.constant(aux)), None)
        .unwrap();
    for k in 1..4 {
        let fed = ctx.traced(&format!("enc_u_in{}", k + 1)).unwrap();
        let updated = ctx.traced(&format!("f_u_prime{k}")).unwrap();
        assert_eq!(fed.data(), updated.data());
        let f_u = ctx.traced(&format!("f_u{k}")).unwrap();
        let f_x = ctx.traced(&format!("f_x{k}")).unwrap();
        let again = {
            let t = Tape::new();
            let c = Ctx::new(&t, &store, false);
            let p = model.ffm[k - 1].as_ref().unwrap();
            (*ffm(&c, t.constant(f_u), t.constant(f_x), p).unwrap().value()).clone()
        };
        assert_eq!(again.data(), updated.data());
    }
}

fn aspp_setup(seed: u64) -> (ParamStore, Aspp) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let a = Aspp::new(&mut Init::new(&mut store, &mut r, "t"), "aspp", 5, 6, [1, 2, 4]);
    randomize(&mut store, "t.", &mut r, 0.5);
    (store, a)
}

fn run_aspp(store: &ParamStore, a: &Aspp, x: &Tensor) -> Tensor {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, false);
    (*aspp_coarse(&ctx, tape.constant(x.clone()), a).unwrap().value()).clone()
}

#[test]
fn aspp_keeps_extent_and_maps_constants_to_constants() {
    let (store, a) = aspp_setup(1);
    let mut x = Tensor::zeros(&[1, 5, 4, 3]);
    for c in 0..5 {
        for p in 0..12 {
            x.data_mut()[c * 12 + p] = 0.3 * c as f64 - 0.4;
        }
    }
    let out = run_aspp(&store, &a, &x);
    assert_eq!(out.shape(), &[1, 1, 4, 3]);
    let first = out.data()[0];
    assert!(out.data().iter().all(|v| (v - first).abs() < 1e-12));
}

#[test]
fn aspp_matches_branch_oracle() {
    let (store, a) = aspp_setup(2);
    let x = random4(&mut rng(3), 2, 5, 4, 4);
    let mut branches = Vec::new();
    for (i, r) in [1, 2, 4].into_iter().enumerate() {
        branches.push(conv_named(&store, &format!("t.aspp.rate{i}"), &pad_edge(&x, r), 1, 0, r, 1).map(lrelu));
    }
    let pooled = pointwise(&store, "t.aspp.pool", &global_pool(&x)).map(lrelu);
    let mut spread = Tensor::zeros(&[2, 6, 4, 4]);
    for i in 0..spread.numel() {
        spread.data_mut()[i] = pooled.data()[i / 16];
    }
    branches.push(spread);
    let refs: Vec<&Tensor> = branches.iter().collect();
    let fused = pointwise(&store, "t.aspp.fuse", &cat(&refs)).map(lrelu);
    let want = pointwise(&store, "t.aspp.head", &fused);
    assert_close(&run_aspp(&store, &a, &x), &want, 1e-12);
}

fn decoder_setup(seed: u64) -> (ParamStore, Decoder) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let d = Decoder::new(&mut Init::new(&mut store, &mut r, "t"), "dec", 4);
    randomize(&mut store, "t.", &mut r, 0.5);
    (store, d)
}

fn skip_tensors(seed: u64) -> (Tensor, Vec<Tensor>) {
    let mut r = rng(seed);
    let skips = [16, 8, 4, 2].iter().map(|&s| random4(&mut r, 1, 4, s, s)).collect();
    (random4(&mut r, 1, 1, 1, 1), skips)
}

fn run_decoder(store: &ParamStore, d: &Decoder, p5: &Tensor, skips: &[Tensor]) -> (Vec<Tensor>, Vec<Tensor>) {
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, store, false);
    let vars: Vec<Var> = skips.iter().map(|s| tape.constant(s.clone())).collect();
    let out = decode(&ctx, tape.constant(p5.clone()), &vars, d).unwrap();
    let grab = |v: &[Var]| v.iter().map(|x| (*x.value()).clone()).collect();
    (grab(&out.masks), grab(&out.edges))
}

#[test]
fn zeroed_decoder_emits_head_biases() {
    let (mut store, d) = decoder_setup(1);
    store.fill_where("t.dec", |n| n.ends_with(".w") || n.contains(".block."), 0.0);
    let (p5, skips) = skip_tensors(2);
    let (masks, edges) = run_decoder(&store, &d, &p5, &skips);
    assert_eq!(masks.len(), 5);
    assert_eq!(edges.len(), 4);
    assert_eq!(masks[4].data(), p5.data());
    for k in 1..=4 {
        let mb = param(&store, &format!("t.dec.l{k}.mask.b")).data()[0];
        let eb = param(&store, &format!("t.dec.l{k}.edge.b")).data()[0];
        assert!(masks[k - 1].data().iter().all(|&v| v == mb));
        assert!(edges[k - 1].data().iter().all(|&v| v == eb));
    }
}

#[test]
fn decoder_matches_layer_by_layer_oracle() {
    let (store, d) = decoder_setup(3);
    let (p5, skips) = skip_tensors(4);
    let (masks, edges) = run_decoder(&store, &d, &p5, &skips);
    let mut state = p5.clone();
    for k in (1..=4).rev() {
        let s = &skips[k - 1];
        let up = bilinear(&state, s.shape()[2], s.shape()[3]);
        state = conv_named(&store, &format!("t.dec.l{k}.block"), &cat(&[&up, s]), 1, 1, 1, 1).map(lrelu);
        assert_close(&masks[k - 1], &pointwise(&store, &format!("t.dec.l{k}.mask"), &state), 1e-12);
        assert_close(&edges[k - 1], &pointwise(&store, &format!("t.dec.l{k}.edge"), &state), 1e-12);
    }
    assert_eq!(masks[0].shape(), &[1, 1, 16, 16]);
}

#[test]
fn forward_emits_five_masks_and_four_edges_in_every_mode() {
    for mode in [Mode::Dual, Mode::RgbOnly] {
        for ssfm in [true, false] {
            let cfg = ModelConfig {
                mode,
                enable_ssfm: ssfm,
                ..small(32)
            };
            let (store, model) = build(&cfg, 9);
            let (rgb, gray) = gray_pair(10, 2, 32);
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &store, false);
            let aux = (mode == Mode::Dual).then(|| tape.constant(gray));
            let out = model.forward(&ctx, tape.constant(rgb), aux, None).unwrap();
            assert_eq!(out.masks.len(), 5);
            assert_eq!(out.edges.len(), 4);
            assert_eq!(out.masks[0].shape(), vec![2, 1, 8, 8]);
            assert_eq!(out.masks[4].shape(), vec![2, 1, 1, 1]);
            let probs = out.masks[0].sigmoid().value();
            assert!(probs.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }
}

#[test]
fn dead_auxiliary_branch_gives_a_function_of_the_image() {
    let cfg = small(32);
    let (store, model) = build(&cfg, 11);
    let (rgb, _) = gray_pair(12, 1, 32);
    let run = || {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &store, false);
        let zero = tape.constant(Tensor::zeros(&[1, 1, 32, 32]));
        let out = model.forward(&ctx, tape.constant(rgb.clone()), Some(zero), None).unwrap();
        (*out.masks[0].value()).clone()
    };
    let a = run();
    assert_eq!(a.data(), run().data());
    assert!(a.is_finite());
}

#[test]
fn image_encoder_weights_are_shared_between_modes() {
    let dual_cfg = RunConfig {
        model: small(32),
        ..RunConfig::compact()
    };
    let dual = Model::new(&dual_cfg.model, 13).unwrap();
    let ckpt = Checkpoint::capture(&dual_cfg, &dual, None, 0);
    let mut rgb_cfg = dual_cfg.model.clone();
    rgb_cfg.mode = Mode::RgbOnly;
    let mut rgb_only = Model::new(&rgb_cfg, 99).unwrap();
    ckpt.load_into(&mut rgb_only, |n| n.starts_with("bfser.enc_i.")).unwrap();
    let mut shared = 0;
    for (name, v) in rgb_only.store.names().iter().zip(rgb_only.store.values()) {
        if name.starts_with("bfser.enc_i.") {
            assert_eq!(v.data(), dual.store.get(name).unwrap().data());
            shared += 1;
        }
    }
    assert!(shared > 0);

    let (rgb, gray) = gray_pair(14, 1, 32);
    let features = |m: &Model, aux: Option<&Tensor>| -> Vec<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &m.store, false);
        let feats = m
            .bfser
            .encode_dual(&ctx, tape.constant(rgb.clone()), aux.map(|a| tape.constant(a.clone())), None)
            .unwrap();
        feats.f_i.iter().map(|f| (*f.value()).clone()).collect()
    };
    for (a, b) in features(&dual, Some(&gray)).iter().zip(features(&rgb_only, None)) {
        assert_eq!(a.data(), b.data());
    }
    let fresh_rgb = Model::new(&rgb_cfg, 13).unwrap();
    for name in fresh_rgb.store.names().iter().filter(|n| n.starts_with("bfser.enc_i.")) {
        assert_eq!(fresh_rgb.store.get(name).unwrap().data(), dual.store.get(name).unwrap().data());
    }
}

#[test]
fn end_to_end_gradient_check_passes() {
    let block = multicos::verify::registry()
        .into_iter()
        .find(|b| b.name == "bfser.end_to_end")
        .unwrap();
    let report = block.check().unwrap();
    assert!(report.passed(), "max error {:e}", report.max_rel_err);
    let others = ["aspp", "decoder", "inject_knowledge"];
    for block in multicos::verify::registry().iter().filter(|b| others.contains(&b.name.as_str())) {
        assert!(block.check().unwrap().passed(), "{}", block.name);
    }
}
