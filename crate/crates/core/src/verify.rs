//! Registry of finite-difference gradient checks, one per differentiable
//! block, run on small randomly initialized instances.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check, GradCheckOptions, GradCheckReport, Tape, Var};
use crate::bfser::{aspp_coarse, decode, inject_knowledge, Aspp, Bfser, Decoder, Injection};
use crate::ckler::{translate, translation_loss, Ckler};
use crate::config::ModelConfig;
use crate::cssm::{CssmBlock, SsmBlock, SsmDims};
use crate::error::Result;
use crate::fusion::{ffm, gate_weights, lsfm, ssfm, Ffm, Gate, Lsfm, Ssfm, SsfmFlags};
use crate::losses::{dice_loss, pixel_weights, total_seg_loss, weighted_bce, weighted_iou};
use crate::nn::{Ctx, Init, ParamStore};
use crate::scan2d::ScanDirection;
use crate::ssm::{selective_scan_op, Discretization};
use crate::tensor::Tensor;

pub const BLOCK_TOL: f64 = 1e-4;
pub const END_TO_END_TOL: f64 = 1e-3;

type Runner = Box<dyn Fn(&GradCheckOptions) -> Result<GradCheckReport>>;

pub struct GradBlock {
    pub name: String,
    pub tol: f64,
    /// Elements checked per input tensor.
    pub samples: usize,
    run: Runner,
}

impl GradBlock {
    pub fn new(name: &str, tol: f64, samples: usize, run: Runner) -> Self {
        Self {
            name: name.to_string(),
            tol,
            samples,
            run,
        }
    }

    pub fn check(&self) -> Result<GradCheckReport> {
        (self.run)(&GradCheckOptions::with_tol(self.tol).sampled(self.samples))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockOutcome {
    pub name: String,
    pub tol: f64,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
    pub error: Option<String>,
}

/// Fixed pseudo-random projection so the scalar loss touches every output
/// element with a distinct weight.
fn project<'t>(out: Var<'t>) -> Result<Var<'t>> {
    let n = out.numel();
    let w: Vec<f64> = (0..n).map(|i| (0.7 * i as f64 + 0.3).sin()).collect();
    let w = out.tape().constant(Tensor::new(&out.shape(), w)?);
    Ok(out.mul(w)?.sum())
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

/// Checks the gradient with respect to every parameter in `store` and every
/// extra input, with the block evaluated through `f`.
fn check_block<F>(store: ParamStore, inputs: Vec<Tensor>, train: bool, f: F) -> Runner
where
    F: for<'t> Fn(&Ctx<'t>, &[Var<'t>]) -> Result<Var<'t>> + 'static,
{
    let store = Rc::new(store);
    Box::new(move |opts| {
        let np = store.len();
        let mut all = store.values().to_vec();
        all.extend(inputs.iter().cloned());
        let store = Rc::clone(&store);
        let f = &f;
        grad_check(
            move |tape: &Tape, vars: &[Var<'_>]| {
                let ctx = Ctx::with_vars(tape, &store, &vars[..np], train)?;
                f(&ctx, &vars[np..])
            },
            &all,
            opts,
        )
    })
}

fn tiny_dims() -> SsmDims {
    SsmDims {
        d_model: 4,
        d_inner: 6,
        d_state: 2,
        d_conv: 3,
        per_direction: false,
        disc: Discretization::Taylor,
    }
}

fn build<T>(seed: u64, make: impl FnOnce(&mut Init) -> T) -> (ParamStore, T, ChaCha8Rng) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = make(&mut Init::new(&mut store, &mut rng, ""));
    (store, block, rng)
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 16,
        widths: [3, 4, 4, 4, 4],
        d_model: 4,
        d_inner: 4,
        d_state: 2,
        ckler_widths: [2, 3, 3],
        knowledge_channels: 4,
        ..ModelConfig::default()
    }
}

/// Every registered block, in report order.
pub fn registry() -> Vec<GradBlock> {
    let mut out = Vec::new();
    let fm = [2, 4, 5, 5];

    out.push({
        let (store, p, mut rng) = build(1, |i| Lsfm::new(i, "lsfm", 4));
        let inputs = vec![rand_tensor(&mut rng, &fm, -1.0, 1.0), rand_tensor(&mut rng, &fm, -1.0, 1.0)];
        GradBlock::new(
            "lsfm",
            BLOCK_TOL,
            4,
            check_block(store, inputs, true, move |c, v| project(lsfm(c, v[0], v[1], &p)?)),
        )
    });
    out.push({
        let (store, p, mut rng) = build(2, |i| Ffm::new(i, "ffm", 4));
        let inputs = vec![rand_tensor(&mut rng, &fm, -1.0, 1.0), rand_tensor(&mut rng, &fm, -1.0, 1.0)];
        GradBlock::new(
            "ffm",
            BLOCK_TOL,
            4,
            check_block(store, inputs, true, move |c, v| project(ffm(c, v[0], v[1], &p)?)),
        )
    });
    out.push({
        let (store, p, mut rng) = build(3, |i| Gate::new(i, "gate", 4, false));
        let inputs = vec![rand_tensor(&mut rng, &fm, -1.0, 1.0)];
        GradBlock::new(
            "gate",
            BLOCK_TOL,
            4,
            check_block(store, inputs, false, move |c, v| project(gate_weights(c, v[0], &p)?)),
        )
    });
    out.push({
        let dims = SsmDims {
            disc: Discretization::Zoh,
            ..tiny_dims()
        };
        let (store, p, mut rng) = build(4, |i| SsmBlock::new(i, "ssm", dims));
        let inputs = vec![rand_tensor(&mut rng, &[2, 4, 4, 5], -1.0, 1.0)];
        GradBlock::new(
            "ssm_block",
            BLOCK_TOL,
            3,
            check_block(store, inputs, false, move |c, v| project(p.forward(c, v[0])?)),
        )
    });
    out.push({
        let dims = SsmDims {
            per_direction: true,
            ..tiny_dims()
        };
        let (store, p, mut rng) = build(5, |i| CssmBlock::new(i, "cssm", dims).expect("valid reduction"));
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 4, 4, 5], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 4, 4, 5], -1.0, 1.0),
        ];
        GradBlock::new(
            "cssm",
            BLOCK_TOL,
            3,
            check_block(store, inputs, false, move |c, v| project(p.forward(c, v[0], v[1])?)),
        )
    });
    out.push({
        let (store, p, mut rng) = build(6, |i| {
            Ssfm::new(i, "ssfm", 3, tiny_dims(), SsfmFlags::default(), false).expect("valid dims")
        });
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0),
        ];
        GradBlock::new(
            "ssfm",
            BLOCK_TOL,
            2,
            check_block(store, inputs, true, move |c, v| project(ssfm(c, v[0], v[1], &p)?)),
        )
    });
    out.push({
        let (store, p, mut rng) = build(7, |i| Aspp::new(i, "aspp", 3, 4, [1, 2, 4]));
        let inputs = vec![rand_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0)];
        GradBlock::new(
            "aspp",
            BLOCK_TOL,
            4,
            check_block(store, inputs, false, move |c, v| project(aspp_coarse(c, v[0], &p)?)),
        )
    });
    out.push({
        let (store, p, mut rng) = build(8, |i| Decoder::new(i, "decoder", 3));
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 1, 2, 2], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 3, 8, 8], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 3, 3, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0),
        ];
        GradBlock::new(
            "decoder",
            BLOCK_TOL,
            4,
            check_block(store, inputs, false, move |c, v| {
                let out = decode(c, v[0], &v[1..5], &p)?;
                let mut total = project(out.masks[0])?;
                for &m in out.masks[1..].iter().chain(&out.edges) {
                    total = total.add(project(m)?)?;
                }
                Ok(total)
            }),
        )
    });
    out.push({
        let (store, (inj, l), mut rng) = build(9, |i| (Injection::new(i, "inject", 3, 4), Lsfm::new(i, "lsfm", 4)));
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 4, 3, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 4, 3, 3], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0),
        ];
        GradBlock::new(
            "inject_knowledge",
            BLOCK_TOL,
            4,
            check_block(store, inputs, true, move |c, v| {
                project(inject_knowledge(c, v[0], v[1], v[2], &inj, &l)?)
            }),
        )
    });
    out.push({
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let order = Rc::new(ScanDirection::TrBl.order(3, 4));
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 3, 3, 4], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 3, 3, 4], 0.05, 0.8),
            rand_tensor(&mut rng, &[3, 2], -2.0, -0.2),
            rand_tensor(&mut rng, &[2, 2, 3, 4], -1.0, 1.0),
            rand_tensor(&mut rng, &[2, 2, 3, 4], -1.0, 1.0),
        ];
        GradBlock::new(
            "selective_scan",
            BLOCK_TOL,
            8,
            check_block(ParamStore::new(), inputs, false, move |_, v| {
                project(selective_scan_op(
                    v[0],
                    v[1],
                    v[2],
                    v[3],
                    v[4],
                    Discretization::Zoh,
                    Rc::clone(&order),
                )?)
            }),
        )
    });
    for (name, which) in [("loss.weighted_bce", 0), ("loss.weighted_iou", 1), ("loss.dice", 2)] {
        let mut rng = ChaCha8Rng::seed_from_u64(11 + which as u64);
        let y = Tensor::new(
            &[2, 1, 6, 6],
            (0..72).map(|i| f64::from(u8::from((i * 7 + 3) % 5 < 2))).collect(),
        )
        .expect("shape");
        let w = pixel_weights(&y).expect("4-D mask");
        let inputs = vec![rand_tensor(&mut rng, &[2, 1, 6, 6], -3.0, 3.0)];
        out.push(GradBlock::new(
            name,
            BLOCK_TOL,
            16,
            check_block(ParamStore::new(), inputs, false, move |c, v| {
                let t = c.tape();
                let (yv, wv) = (t.constant(y.clone()), t.constant(w.clone()));
                match which {
                    0 => weighted_bce(v[0], yv, wv),
                    1 => weighted_iou(v[0], yv, wv),
                    _ => dice_loss(v[0], yv),
                }
            }),
        ));
    }
    out.push({
        let cfg = tiny_model_config();
        let (store, p, mut rng) = build(20, |i| Ckler::new(i, &cfg));
        let inputs = vec![
            rand_tensor(&mut rng, &[1, 3, 16, 16], 0.0, 1.0),
            rand_tensor(&mut rng, &[1, 1, 16, 16], 0.0, 1.0),
        ];
        GradBlock::new(
            "ckler",
            BLOCK_TOL,
            2,
            check_block(store, inputs, false, move |c, v| {
                let t = translate(c, v[0], &p)?;
                translation_loss(t.x_u, v[1])?.add(project(t.z)?)
            }),
        )
    });
    out.push({
        let cfg = tiny_model_config();
        let (store, p, mut rng) = build(21, |i| Bfser::new(i, &cfg).expect("valid config"));
        let y = Tensor::new(
            &[2, 1, 16, 16],
            (0..512)
                .map(|i| {
                    let (y, x) = ((i % 256) / 16, i % 16);
                    f64::from(u8::from((4..11).contains(&y) && (5..12).contains(&x)))
                })
                .collect(),
        )
        .expect("shape");
        let e = y.clone();
        let inputs = vec![
            rand_tensor(&mut rng, &[2, 3, 16, 16], 0.0, 1.0),
            rand_tensor(&mut rng, &[2, 1, 16, 16], 0.0, 1.0),
        ];
        GradBlock::new(
            "bfser.end_to_end",
            END_TO_END_TOL,
            1,
            check_block(store, inputs, true, move |c, v| {
                let out = p.forward(c, v[0], Some(v[1]), None)?;
                total_seg_loss(&out, &y, &e)
            }),
        )
    });
    out
}

/// A block whose backward pass is deliberately wrong (reports `2x` as the
/// derivative of `x²/2 + x`), used to test the harness itself.
pub fn corrupted_fixture() -> GradBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let inputs = vec![rand_tensor(&mut rng, &[3, 4], -1.0, 1.0)];
    GradBlock::new(
        "fixture.corrupted",
        BLOCK_TOL,
        12,
        check_block(ParamStore::new(), inputs, false, |_, v| {
            project(v[0].map_custom(|x| 0.5 * x * x + x, |x| 2.0 * x))
        }),
    )
}

/// Runs every block; a block that errors counts as failed.
pub fn run_registry(blocks: &[GradBlock], mut on_block: impl FnMut(&BlockOutcome)) -> Vec<BlockOutcome> {
    blocks
        .iter()
        .map(|b| {
            let o = match b.check() {
                Ok(r) => BlockOutcome {
                    name: b.name.clone(),
                    tol: b.tol,
                    checked: r.checked,
                    max_rel_err: r.max_rel_err,
                    passed: r.passed(),
                    error: None,
                },
                Err(e) => BlockOutcome {
                    name: b.name.clone(),
                    tol: b.tol,
                    checked: 0,
                    max_rel_err: f64::NAN,
                    passed: false,
                    error: Some(e.to_string()),
                },
            };
            on_block(&o);
            o
        })
        .collect()
}
