//! Named parameters, the per-step evaluation context and the small layers
//! every block is assembled from.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    batch_norm_eval, batch_norm_train, conv2d, layer_norm, BatchStats, ConvOpts, Gradients, Tape,
    Var,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Trainable parameters plus non-trainable buffers (normalization running
/// statistics), both addressed by stable dotted names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    buffer_names: Vec<String>,
    buffers: Vec<Tensor>,
    index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        self.index.insert(name.to_string(), self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_buffer(&mut self, name: &str, value: Tensor) -> BufferId {
        assert!(!self.buffer_index.contains_key(name), "duplicate buffer {name}");
        self.buffer_index.insert(name.to_string(), self.buffers.len());
        self.buffer_names.push(name.to_string());
        self.buffers.push(value);
        BufferId(self.buffers.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn buffer_names(&self) -> &[String] {
        &self.buffer_names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn get_buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffer_index.get(name).map(|&i| &self.buffers[i])
    }

    /// Replaces a parameter or buffer by name, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = if let Some(&i) = self.index.get(name) {
            &mut self.values[i]
        } else if let Some(&i) = self.buffer_index.get(name) {
            &mut self.buffers[i]
        } else {
            return Err(Error::InvalidArgument(format!("unknown parameter {name}")));
        };
        if slot.shape() != value.shape() {
            return Err(Error::shape("set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    /// Fills every parameter whose name starts with `prefix` and satisfies
    /// `filter` with `value`. Returns how many were touched.
    pub fn fill_where(&mut self, prefix: &str, filter: impl Fn(&str) -> bool, value: f64) -> usize {
        let mut count = 0;
        for (name, v) in self.names.iter().zip(self.values.iter_mut()) {
            if name.starts_with(prefix) && filter(name) {
                *v = Tensor::full(v.shape(), value);
                count += 1;
            }
        }
        count
    }

    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<ParamId> {
        (0..self.names.len())
            .filter(|&i| self.names[i].starts_with(prefix))
            .map(ParamId)
            .collect()
    }

    pub(crate) fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub(crate) fn buffer_mut(&mut self, id: BufferId) -> &mut Tensor {
        &mut self.buffers[id.0]
    }
}

/// Parameter factory scoped under a name prefix.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, prefix: &str) -> Self {
        Self {
            store,
            rng,
            prefix: prefix.to_string(),
        }
    }

    pub fn scope(&mut self, name: &str) -> Init<'_> {
        let prefix = self.full_name(name);
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> ParamId {
        let full = self.full_name(name);
        self.store.add(&full, value)
    }

    pub fn buffer(&mut self, name: &str, value: Tensor) -> BufferId {
        let full = self.full_name(name);
        self.store.add_buffer(&full, value)
    }

    /// Uniform in `±1/√fan_in`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Tensor::uniform(shape, -bound, bound, self.rng);
        self.param(name, value)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.param(name, Tensor::ones(shape))
    }

    pub fn gen_seed(&mut self) -> u64 {
        self.rng.gen()
    }
}

struct PendingStats {
    mean: BufferId,
    var: BufferId,
    stats: BatchStats,
}

/// One forward evaluation: parameter leaves on a tape plus bookkeeping.
pub struct Ctx<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
    buffers: Vec<Tensor>,
    train: bool,
    pending: RefCell<Vec<PendingStats>>,
    trace: Option<RefCell<Vec<(String, Tensor)>>>,
}

impl<'t> Ctx<'t> {
    /// Training contexts differentiate every parameter and normalize with
    /// batch statistics; evaluation contexts record constants and use the
    /// running statistics.
    pub fn new(tape: &'t Tape, store: &ParamStore, train: bool) -> Self {
        let vars = store
            .values()
            .iter()
            .map(|v| tape.leaf(v.clone(), train))
            .collect();
        Self::build(tape, store, vars, train)
    }

    /// Uses caller-supplied vars (one per parameter, in store order), for
    /// gradient checks that perturb parameters.
    pub fn with_vars(tape: &'t Tape, store: &ParamStore, vars: &[Var<'t>], train: bool) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} parameter vars, got {}",
                store.len(),
                vars.len()
            )));
        }
        Ok(Self::build(tape, store, vars.to_vec(), train))
    }

    fn build(tape: &'t Tape, store: &ParamStore, vars: Vec<Var<'t>>, train: bool) -> Self {
        Self {
            tape,
            vars,
            buffers: store.buffers().to_vec(),
            train,
            pending: RefCell::new(Vec::new()),
            trace: None,
        }
    }

    /// Keeps a copy of every value passed to [`Ctx::record`].
    pub fn with_trace(mut self) -> Self {
        self.trace = Some(RefCell::new(Vec::new()));
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn train(&self) -> bool {
        self.train
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn record(&self, name: &str, v: Var<'t>) {
        if let Some(trace) = &self.trace {
            trace.borrow_mut().push((name.to_string(), (*v.value()).clone()));
        }
    }

    pub fn traced(&self, name: &str) -> Option<Tensor> {
        self.trace.as_ref().and_then(|t| {
            t.borrow()
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v.clone())
        })
    }

    /// Gradient of every parameter, zeros where the loss does not depend on it.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    }

    /// Batch statistics gathered during a training forward pass.
    pub fn take_stats(&self) -> RunningStatUpdate {
        RunningStatUpdate(std::mem::take(&mut *self.pending.borrow_mut()))
    }
}

/// Running-statistic updates to apply once a step is accepted.
pub struct RunningStatUpdate(Vec<PendingStats>);

impl RunningStatUpdate {
    pub fn apply(self, store: &mut ParamStore) {
        for p in self.0 {
            let n = p.stats.count as f64;
            let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
            let mean = store.buffer_mut(p.mean);
            for (m, &bm) in mean.data_mut().iter_mut().zip(&p.stats.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * bm;
            }
            let var = store.buffer_mut(p.var);
            for (v, &bv) in var.data_mut().iter_mut().zip(&p.stats.var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * bv * unbias;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// 2-D convolution with optional bias.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: ConvOpts,
}

impl Conv {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, opts: ConvOpts) -> Self {
        let mut s = init.scope(name);
        let fan_in = cin / opts.groups * k * k;
        let weight = s.uniform("w", &[cout, cin / opts.groups, k, k], fan_in);
        let bias = Some(s.zeros("b", &[cout]));
        Self { weight, bias, opts }
    }

    pub fn no_bias(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize, opts: ConvOpts) -> Self {
        let mut s = init.scope(name);
        let weight = s.uniform("w", &[cout, cin / opts.groups, k, k], cin / opts.groups * k * k);
        Self {
            weight,
            bias: None,
            opts,
        }
    }

    /// 1×1 projection.
    pub fn pointwise(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Self::new(init, name, cin, cout, 1, ConvOpts::default())
    }

    /// Same-padded `k×k` convolution.
    pub fn same(init: &mut Init, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self::new(init, name, cin, cout, k, ConvOpts::same(k))
    }

    /// Same-padded depthwise convolution.
    pub fn depthwise(init: &mut Init, name: &str, channels: usize, k: usize) -> Self {
        let opts = ConvOpts {
            groups: channels,
            ..ConvOpts::same(k)
        };
        Self::new(init, name, channels, channels, k, opts)
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        conv2d(x, ctx.p(self.weight), self.bias.map(|b| ctx.p(b)), self.opts)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
}

impl BatchNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            gamma: s.ones("gamma", &[channels]),
            beta: s.zeros("beta", &[channels]),
            running_mean: s.buffer("running_mean", Tensor::zeros(&[channels])),
            running_var: s.buffer("running_var", Tensor::ones(&[channels])),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let (g, b) = (ctx.p(self.gamma), ctx.p(self.beta));
        if ctx.train {
            let (y, stats) = batch_norm_train(x, g, b, NORM_EPS)?;
            ctx.pending.borrow_mut().push(PendingStats {
                mean: self.running_mean,
                var: self.running_var,
                stats,
            });
            Ok(y)
        } else {
            batch_norm_eval(
                x,
                g,
                b,
                ctx.buffers[self.running_mean.0].data(),
                ctx.buffers[self.running_var.0].data(),
                NORM_EPS,
            )
        }
    }
}

/// The `Conv3×3 → LeakyReLU → BatchNorm` block.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBlock {
    pub fn new(init: &mut Init, name: &str, cin: usize, cout: usize) -> Self {
        Self::strided(init, name, cin, cout, 1)
    }

    pub fn strided(init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        let mut s = init.scope(name);
        let opts = ConvOpts {
            stride,
            ..ConvOpts::same(3)
        };
        Self {
            conv: Conv::new(&mut s, "conv", cin, cout, 3, opts),
            bn: BatchNorm::new(&mut s, "bn", cout),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let y = self.conv.forward(ctx, x)?.leaky_relu(LEAKY_SLOPE);
        self.bn.forward(ctx, y)
    }
}

/// Layer normalization over the channel axis.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, channels: usize) -> Self {
        let mut s = init.scope(name);
        Self {
            gamma: s.ones("gamma", &[channels]),
            beta: s.zeros("beta", &[channels]),
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        layer_norm(x, ctx.p(self.gamma), ctx.p(self.beta), NORM_EPS)
    }
}
