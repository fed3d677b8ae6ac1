//! PCNN-I, PCNN-C and NCNN built from conv -> SELU -> BN blocks.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use super::layers::{self, BnBatchStats, BnCache, ConvGeom, Mode};
use super::tensor::Tensor3;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Parallel branches integrated by channel concatenation, then a dilated
    /// convolution.
    PcnnI,
    /// Parallel branches pooled separately and concatenated as vectors.
    PcnnC,
    /// One convolution over the stacked tensor.
    Ncnn,
}

impl Variant {
    pub fn code(self) -> u32 {
        match self {
            Variant::PcnnI => 0,
            Variant::PcnnC => 1,
            Variant::Ncnn => 2,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        [Variant::PcnnI, Variant::PcnnC, Variant::Ncnn].into_iter().find(|v| v.code() == code)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::PcnnI => "pcnn-i",
            Variant::PcnnC => "pcnn-c",
            Variant::Ncnn => "ncnn",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pcnn-i" | "pcnn_i" => Ok(Variant::PcnnI),
            "pcnn-c" | "pcnn_c" => Ok(Variant::PcnnC),
            "ncnn" => Ok(Variant::Ncnn),
            other => Err(Error::InvalidConfig(format!("unknown variant {other:?}; expected pcnn-i, pcnn-c or ncnn"))),
        }
    }
}

/// Architecture hyperparameters. For NCNN `n1` is the temporal kernel width
/// and `c1` the number of convolution channels; `n2`, `n3`, `c2`, `c3` and
/// `dilation` are unused.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub variant: Variant,
    pub n_features: usize,
    pub frames: usize,
    pub datasets: usize,
    pub n1: usize,
    pub n2: usize,
    pub n3: usize,
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub dilation: usize,
    pub f1: usize,
    pub f2: usize,
    pub n_classes: usize,
}

impl NetworkSpec {
    pub fn pcnn_i(n_classes: usize) -> Self {
        Self {
            variant: Variant::PcnnI,
            n_features: 39,
            frames: 300,
            datasets: 2,
            n1: 3,
            n2: 5,
            n3: 7,
            c1: 32,
            c2: 32,
            c3: 64,
            dilation: 3,
            f1: 512,
            f2: 512,
            n_classes,
        }
    }

    pub fn pcnn_c(n_classes: usize) -> Self {
        Self { variant: Variant::PcnnC, ..Self::pcnn_i(n_classes) }
    }

    pub fn ncnn(datasets: usize, n_classes: usize) -> Self {
        Self { variant: Variant::Ncnn, datasets, c1: 64, f1: 64, f2: 64, ..Self::pcnn_i(n_classes) }
    }

    /// Output heights of the feature-axis convolutions.
    pub fn conv_heights(&self) -> Vec<isize> {
        let (n, n1, n2, n3) = (self.n_features as isize, self.n1 as isize, self.n2 as isize, self.n3 as isize);
        match self.variant {
            Variant::PcnnI => vec![n - n1 + 1, n - n1 - n2 + 2, n - n1 - n2 - n3 + 3],
            Variant::PcnnC => vec![n - n1 + 1, n - n1 - n2 + 2],
            Variant::Ncnn => vec![1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("N", self.n_features),
            ("T", self.frames),
            ("K", self.datasets),
            ("n1", self.n1),
            ("C1", self.c1),
            ("F1", self.f1),
            ("F2", self.f2),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.n_classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {}", self.n_classes)));
        }
        if self.frames < 2 {
            return Err(Error::InvalidConfig("statistics pooling needs T >= 2".into()));
        }
        if self.variant != Variant::Ncnn {
            let more = [("n2", self.n2), ("n3", self.n3), ("C2", self.c2), ("D", self.dilation)];
            if let Some((name, _)) = more.iter().find(|(_, v)| *v == 0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
            if self.variant == Variant::PcnnI && self.c3 == 0 {
                return Err(Error::InvalidConfig("C3 must be positive".into()));
            }
        } else if self.n1 > self.frames {
            return Err(Error::InvalidConfig(format!("temporal kernel n={} exceeds T={}", self.n1, self.frames)));
        }
        let formulas = ["N - n1 + 1", "N - n1 - n2 + 2", "N - n1 - n2 - n3 + 3"];
        for (h, formula) in self.conv_heights().into_iter().zip(formulas) {
            if h < 1 {
                return Err(Error::InvalidConfig(format!(
                    "layer height {formula} = {h} < 1 (N={}, n1={}, n2={}, n3={})",
                    self.n_features, self.n1, self.n2, self.n3
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub dims: Vec<usize>,
    pub value: Vec<f64>,
    /// Buffers (running statistics, input normalization) are not optimized.
    pub trainable: bool,
}

/// Parameters with Adam moments. Moments are empty for buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkState {
    pub params: Vec<Param>,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub step: u64,
}

impl NetworkState {
    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let (lo, hi) = (u.mean.min(u.var), u.mean.max(u.var));
            let (a, b) = self.params.split_at_mut(hi);
            let (first, second) = (&mut a[lo].value, &mut b[0].value);
            let (mean, var) = if u.mean < u.var { (first, second) } else { (second, first) };
            u.stats.blend_into(mean, var);
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }
}

/// Batch-norm running-statistics update produced by a train-mode pass.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    mean: usize,
    var: usize,
    stats: BnBatchStats,
}

/// Inputs are per-sentence lists of `K` matrices `N x T`; labels are class
/// indices (the one-hot target has its single 1 there).
#[derive(Debug, Clone, Default)]
pub struct Batch {
    pub inputs: Vec<Vec<DMatrix<f64>>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn one_hot(&self, n_classes: usize) -> Vec<Vec<f64>> {
        self.labels.iter().map(|&l| (0..n_classes).map(|c| if c == l { 1.0 } else { 0.0 }).collect()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerShape {
    pub name: String,
    pub shape: [usize; 3],
}

impl LayerShape {
    /// `(H, T, C)` for maps, `(C, T)` for single-row maps, `(L, 1)` for
    /// vectors.
    pub fn table_dims(&self) -> Vec<usize> {
        match self.shape {
            [1, 1, c] => vec![c, 1],
            [1, t, c] => vec![c, t],
            [h, t, c] => vec![h, t, c],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    /// Output shape of every layer for the first sentence.
    pub shapes: Vec<LayerShape>,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// Parallel to `NetworkState::params`; empty for buffers.
    pub values: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub loss: f64,
    pub gradients: Gradients,
    pub probs: Vec<Vec<f64>>,
    pub bn_updates: Vec<BnUpdate>,
}

#[derive(Debug, Clone)]
struct Block {
    name: String,
    geom: ConvGeom,
    weight: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
}

struct BlockCache {
    input: Vec<Tensor3>,
    pre: Vec<Tensor3>,
    bn: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct Template {
    name: String,
    dims: Vec<usize>,
    trainable: bool,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Normal { fan_in: usize },
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    templates: Vec<Template>,
    input_mean: usize,
    input_std: usize,
    branches: Vec<Vec<Block>>,
    pool_before_concat: bool,
    trunk: Vec<Block>,
    head: Vec<Block>,
    out_geom: ConvGeom,
    out_weight: usize,
    out_bias: usize,
}

struct Builder {
    templates: Vec<Template>,
}

impl Builder {
    fn add(&mut self, name: String, dims: Vec<usize>, trainable: bool, init: Init) -> usize {
        self.templates.push(Template { name, dims, trainable, init });
        self.templates.len() - 1
    }

    fn block(&mut self, name: &str, conv: &str, bn: &str, geom: ConvGeom) -> Block {
        let c = geom.cout;
        Block {
            name: name.to_string(),
            geom,
            weight: self.add(format!("{conv}.weight"), geom.weight_dims(), true, Init::Normal { fan_in: geom.fan_in() }),
            bias: self.add(format!("{conv}.bias"), vec![c], true, Init::Zeros),
            gamma: self.add(format!("{bn}.gamma"), vec![c], true, Init::Ones),
            beta: self.add(format!("{bn}.beta"), vec![c], true, Init::Zeros),
            running_mean: self.add(format!("{bn}.running_mean"), vec![c], false, Init::Zeros),
            running_var: self.add(format!("{bn}.running_var"), vec![c], false, Init::Ones),
        }
    }
}

impl Network {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let s = &spec;
        let mut b = Builder { templates: Vec::new() };
        let input_mean = b.add("input.mean".into(), vec![s.datasets, s.n_features], false, Init::Zeros);
        let input_std = b.add("input.std".into(), vec![s.datasets, s.n_features], false, Init::Ones);
        let mut branches = Vec::new();
        let mut trunk = Vec::new();
        let pooled_len;
        match s.variant {
            Variant::PcnnI | Variant::PcnnC => {
                for k in 0..s.datasets {
                    let k1 = k + 1;
                    branches.push(vec![
                        b.block(&format!("conv1{k1}"), &format!("branch{k1}.conv1"), &format!("branch{k1}.bn1"), ConvGeom::valid(s.n1, 1, 1, s.c1)),
                        b.block(&format!("conv2{k1}"), &format!("branch{k1}.conv2"), &format!("branch{k1}.bn2"), ConvGeom::valid(s.n2, 1, s.c1, s.c2)),
                    ]);
                }
                let h2 = s.n_features + 2 - s.n1 - s.n2;
                if s.variant == Variant::PcnnI {
                    // the dilated kernel is zero-padded so the height drops by n3 - 1
                    let pad = (s.dilation - 1) * (s.n3 - 1);
                    let geom = ConvGeom {
                        dil: s.dilation,
                        pad_top: pad / 2,
                        pad_bottom: pad - pad / 2,
                        ..ConvGeom::valid(s.n3, 1, s.c2 * s.datasets, s.c3)
                    };
                    trunk.push(b.block("conv3", "conv3", "bn3", geom));
                    pooled_len = 2 * s.c3 * (h2 + 1 - s.n3);
                } else {
                    pooled_len = 2 * s.c2 * h2 * s.datasets;
                }
            }
            Variant::Ncnn => {
                let pad = s.n1 - 1;
                let geom = ConvGeom {
                    pad_left: pad / 2,
                    pad_right: pad - pad / 2,
                    ..ConvGeom::valid(s.n_features, s.n1, s.datasets, s.c1)
                };
                branches.push(vec![b.block("conv", "conv", "bn", geom)]);
                pooled_len = 2 * s.c1;
            }
        }
        let head = vec![
            b.block("fc1", "fc1", "fc1.bn", ConvGeom::dense(pooled_len, s.f1)),
            b.block("fc2", "fc2", "fc2.bn", ConvGeom::dense(s.f1, s.f2)),
        ];
        let out_geom = ConvGeom::dense(s.f2, s.n_classes);
        let out_weight = b.add("out.weight".into(), out_geom.weight_dims(), true, Init::Normal { fan_in: s.f2 });
        let out_bias = b.add("out.bias".into(), vec![s.n_classes], true, Init::Zeros);
        Ok(Self {
            pool_before_concat: s.variant == Variant::PcnnC,
            spec,
            templates: b.templates,
            input_mean,
            input_std,
            branches,
            trunk,
            head,
            out_geom,
            out_weight,
            out_bias,
        })
    }

    pub fn param_names(&self) -> Vec<&str> {
        self.templates.iter().map(|t| t.name.as_str()).collect()
    }

    pub fn param_dims(&self) -> Vec<(Vec<usize>, bool)> {
        self.templates.iter().map(|t| (t.dims.clone(), t.trainable)).collect()
    }

    /// Kernels and weights `~ N(0, 1/fan_in)`, biases and shifts 0, scales 1.
    pub fn init_state(&self, seed: u64) -> NetworkState {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Param> = self
            .templates
            .iter()
            .map(|t| {
                let len = t.dims.iter().product();
                let value = match t.init {
                    Init::Zeros => vec![0.0; len],
                    Init::Ones => vec![1.0; len],
                    Init::Normal { fan_in } => {
                        let dist = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("positive std");
                        (0..len).map(|_| dist.sample(&mut rng)).collect()
                    }
                };
                Param { name: t.name.clone(), dims: t.dims.clone(), value, trainable: t.trainable }
            })
            .collect();
        self.state_from_params(params)
    }

    pub fn state_from_params(&self, params: Vec<Param>) -> NetworkState {
        let zeros = |p: &Param| if p.trainable { vec![0.0; p.value.len()] } else { Vec::new() };
        let adam_m = params.iter().map(zeros).collect();
        let adam_v = params.iter().map(zeros).collect();
        NetworkState { params, adam_m, adam_v, step: 0 }
    }

    /// Sets the per-row input standardization buffers (`K x N` each).
    pub fn set_input_normalization(&self, state: &mut NetworkState, mean: &[f64], std: &[f64]) -> Result<()> {
        let len = self.spec.datasets * self.spec.n_features;
        if mean.len() != len || std.len() != len || std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::ShapeMismatch("input normalization needs K*N means and positive stds".into()));
        }
        state.params[self.input_mean].value = mean.to_vec();
        state.params[self.input_std].value = std.to_vec();
        Ok(())
    }

    fn check_state(&self, state: &NetworkState) -> Result<()> {
        if state.params.len() != self.templates.len()
            || state.params.iter().zip(&self.templates).any(|(p, t)| p.dims != t.dims || p.value.len() != t.dims.iter().product::<usize>())
        {
            return Err(Error::ShapeMismatch("network state does not match the architecture".into()));
        }
        Ok(())
    }

    fn branch_inputs(&self, state: &NetworkState, batch: &Batch) -> Result<Vec<Vec<Tensor3>>> {
        let s = &self.spec;
        if batch.inputs.is_empty() {
            return Err(Error::ShapeMismatch("empty batch".into()));
        }
        if batch.labels.len() != batch.inputs.len() && !batch.labels.is_empty() {
            return Err(Error::ShapeMismatch("labels and inputs differ in count".into()));
        }
        let mean = &state.params[self.input_mean].value;
        let std = &state.params[self.input_std].value;
        let mut normalized = Vec::with_capacity(batch.len());
        for sample in &batch.inputs {
            if sample.len() != s.datasets || sample.iter().any(|m| m.shape() != (s.n_features, s.frames)) {
                return Err(Error::ShapeMismatch(format!(
                    "expected {} matrices {}x{}, got {} of {:?}",
                    s.datasets,
                    s.n_features,
                    s.frames,
                    sample.len(),
                    sample.first().map(|m| m.shape())
                )));
            }
            let slabs: Vec<DMatrix<f64>> = sample
                .iter()
                .enumerate()
                .map(|(k, m)| {
                    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
                        (m[(i, j)] - mean[k * s.n_features + i]) / std[k * s.n_features + i]
                    })
                })
                .collect();
            normalized.push(slabs);
        }
        Ok(match s.variant {
            Variant::Ncnn => vec![normalized.iter().map(|slabs| Tensor3::from_slabs(slabs)).collect()],
            _ => (0..s.datasets)
                .map(|k| normalized.iter().map(|slabs| Tensor3::from_slabs([&slabs[k]])).collect())
                .collect(),
        })
    }

    fn block_forward(
        &self,
        block: &Block,
        state: &NetworkState,
        xs: Vec<Tensor3>,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<(Vec<Tensor3>, BlockCache)> {
        let p = |i: usize| state.params[i].value.as_slice();
        let pre: Vec<Tensor3> =
            xs.par_iter().map(|x| layers::conv_forward(&block.geom, x, p(block.weight), p(block.bias))).collect::<Result<_>>()?;
        let act: Vec<Tensor3> = pre.iter().map(layers::selu_forward).collect();
        let (out, bn) = match mode {
            Mode::Train => {
                let (ys, cache, stats) = layers::bn_forward_train(&act, p(block.gamma), p(block.beta))?;
                updates.push(BnUpdate { mean: block.running_mean, var: block.running_var, stats });
                (ys, Some(cache))
            }
            Mode::Eval => (
                act.iter()
                    .map(|a| layers::bn_forward_eval(a, p(block.gamma), p(block.beta), p(block.running_mean), p(block.running_var)))
                    .collect(),
                None,
            ),
        };
        Ok((out, BlockCache { input: xs, pre, bn }))
    }

    fn block_backward(
        &self,
        block: &Block,
        state: &NetworkState,
        cache: &BlockCache,
        dys: &[Tensor3],
        need_dx: bool,
        grads: &mut [Vec<f64>],
    ) -> Vec<Tensor3> {
        let bn = cache.bn.as_ref().expect("backward needs a train-mode forward");
        let (dact, dgamma, dbeta) = layers::bn_backward(dys, bn, &state.params[block.gamma].value);
        let w = state.params[block.weight].value.as_slice();
        let parts: Vec<(Option<Tensor3>, Vec<f64>, Vec<f64>)> = cache
            .input
            .par_iter()
            .zip(&cache.pre)
            .zip(&dact)
            .map(|((x, pre), da)| {
                let dpre = layers::selu_backward(pre, da);
                layers::conv_backward(&block.geom, x, w, &dpre, need_dx)
            })
            .collect();
        let mut dxs = Vec::with_capacity(parts.len());
        for (dx, dw, db) in parts {
            add_into(&mut grads[block.weight], &dw);
            add_into(&mut grads[block.bias], &db);
            if let Some(dx) = dx {
                dxs.push(dx);
            }
        }
        add_into(&mut grads[block.gamma], &dgamma);
        add_into(&mut grads[block.beta], &dbeta);
        dxs
    }

    fn run(&self, state: &NetworkState, batch: &Batch, mode: Mode) -> Result<Pass> {
        self.check_state(state)?;
        let mut shapes = Vec::new();
        let mut updates = Vec::new();
        let record = |shapes: &mut Vec<LayerShape>, name: &str, t: &Tensor3| {
            shapes.push(LayerShape { name: name.to_string(), shape: t.shape() })
        };
        let inputs = self.branch_inputs(state, batch)?;
        for (k, xs) in inputs.iter().enumerate() {
            let name = if self.spec.variant == Variant::Ncnn { "input".to_string() } else { format!("input{}", k + 1) };
            record(&mut shapes, &name, &xs[0]);
        }
        let mut branch_caches = Vec::new();
        let mut branch_outs = Vec::new();
        for (blocks, xs) in self.branches.iter().zip(inputs) {
            let mut xs = xs;
            let mut caches = Vec::new();
            for block in blocks {
                let (ys, cache) = self.block_forward(block, state, xs, mode, &mut updates)?;
                caches.push(cache);
                xs = ys;
            }
            branch_caches.push(caches);
            branch_outs.push(xs);
        }
        // branch outputs are recorded layer by layer in table order
        if self.spec.variant != Variant::Ncnn {
            for (li, _) in self.branches[0].iter().enumerate() {
                for (k, caches) in branch_caches.iter().enumerate() {
                    let t = if li + 1 < caches.len() { &caches[li + 1].input[0] } else { &branch_outs[k][0] };
                    record(&mut shapes, &self.branches[k][li].name, t);
                }
            }
        } else {
            record(&mut shapes, "conv", &branch_outs[0][0]);
        }

        let gamma_len = batch.len();
        let mut trunk_caches = Vec::new();
        let (pool_inputs, pooled): (Vec<Vec<Tensor3>>, Vec<Tensor3>) = if self.pool_before_concat {
            let pooled_parts: Vec<Vec<Tensor3>> =
                branch_outs.iter().map(|xs| xs.iter().map(layers::stats_pool).collect::<Result<_>>()).collect::<Result<_>>()?;
            for (k, part) in pooled_parts.iter().enumerate() {
                record(&mut shapes, &format!("pooling{}", k + 1), &part[0]);
            }
            let cat: Vec<Tensor3> =
                (0..gamma_len).map(|i| Tensor3::concat_channels(&pooled_parts.iter().map(|p| &p[i]).collect::<Vec<_>>())).collect();
            record(&mut shapes, "concatenation", &cat[0]);
            (branch_outs, cat)
        } else {
            let mut xs: Vec<Tensor3> = if branch_outs.len() == 1 {
                branch_outs.pop().expect("one branch")
            } else {
                let cat: Vec<Tensor3> = (0..gamma_len)
                    .map(|i| Tensor3::concat_channels(&branch_outs.iter().map(|b| &b[i]).collect::<Vec<_>>()))
                    .collect();
                record(&mut shapes, "integration", &cat[0]);
                cat
            };
            for block in &self.trunk {
                let (ys, cache) = self.block_forward(block, state, xs, mode, &mut updates)?;
                record(&mut shapes, &block.name, &ys[0]);
                trunk_caches.push(cache);
                xs = ys;
            }
            let pooled: Vec<Tensor3> = xs.iter().map(layers::stats_pool).collect::<Result<_>>()?;
            record(&mut shapes, "pooling", &pooled[0]);
            (vec![xs], pooled)
        };

        let mut xs = pooled;
        let mut head_caches = Vec::new();
        for block in &self.head {
            let (ys, cache) = self.block_forward(block, state, xs, mode, &mut updates)?;
            record(&mut shapes, &block.name, &ys[0]);
            head_caches.push(cache);
            xs = ys;
        }
        let w = &state.params[self.out_weight].value;
        let b = &state.params[self.out_bias].value;
        let logits: Vec<Vec<f64>> =
            xs.iter().map(|x| layers::conv_forward(&self.out_geom, x, w, b).map(|t| t.data)).collect::<Result<_>>()?;
        let probs: Vec<Vec<f64>> = logits.iter().map(|l| layers::softmax(l)).collect();
        shapes.push(LayerShape { name: "softmax".into(), shape: [1, 1, self.spec.n_classes] });
        Ok(Pass { logits, probs, shapes, updates, branch_caches, pool_inputs, trunk_caches, head_caches, head_out: xs })
    }

    pub fn forward(&self, state: &NetworkState, batch: &Batch, mode: Mode) -> Result<ForwardOutput> {
        let pass = self.run(state, batch, mode)?;
        Ok(ForwardOutput { logits: pass.logits, probs: pass.probs, shapes: pass.shapes, bn_updates: pass.updates })
    }

    /// Mean cross-entropy over the batch with train-mode batch statistics.
    pub fn loss(&self, state: &NetworkState, batch: &Batch) -> Result<f64> {
        let pass = self.run(state, batch, Mode::Train)?;
        Ok(cross_entropy(&pass.probs, &batch.labels))
    }

    /// Mean cross-entropy over the batch and its gradient for every trainable
    /// parameter, using train-mode batch statistics.
    pub fn loss_and_backward(&self, state: &NetworkState, batch: &Batch) -> Result<Backward> {
        if batch.labels.len() != batch.len() || batch.labels.iter().any(|&l| l >= self.spec.n_classes) {
            return Err(Error::ShapeMismatch("every sentence needs a label below the class count".into()));
        }
        let pass = self.run(state, batch, Mode::Train)?;
        let gamma = batch.len() as f64;
        let loss = cross_entropy(&pass.probs, &batch.labels);

        let mut grads: Vec<Vec<f64>> =
            state.params.iter().map(|p| if p.trainable { vec![0.0; p.value.len()] } else { Vec::new() }).collect();
        let dlogits: Vec<Tensor3> = pass
            .probs
            .iter()
            .zip(&batch.labels)
            .map(|(p, &l)| Tensor3::vector(p.iter().enumerate().map(|(c, &o)| (o - if c == l { 1.0 } else { 0.0 }) / gamma).collect()))
            .collect();
        let w = &state.params[self.out_weight].value;
        let mut dxs = Vec::with_capacity(dlogits.len());
        for (x, dy) in pass.head_out.iter().zip(&dlogits) {
            let (dx, dw, db) = layers::conv_backward(&self.out_geom, x, w, dy, true);
            add_into(&mut grads[self.out_weight], &dw);
            add_into(&mut grads[self.out_bias], &db);
            dxs.push(dx.expect("requested"));
        }
        for (block, cache) in self.head.iter().zip(&pass.head_caches).rev() {
            dxs = self.block_backward(block, state, cache, &dxs, true, &mut grads);
        }

        let branch_grads: Vec<Vec<Tensor3>> = if self.pool_before_concat {
            let counts: Vec<usize> = pass.pool_inputs.iter().map(|xs| 2 * xs[0].h * xs[0].c).collect();
            let mut per_branch: Vec<Vec<Tensor3>> = vec![Vec::with_capacity(dxs.len()); counts.len()];
            for (i, d) in dxs.iter().enumerate() {
                for (k, part) in d.split_channels(&counts).into_iter().enumerate() {
                    per_branch[k].push(layers::stats_pool_backward(&pass.pool_inputs[k][i], &part));
                }
            }
            per_branch
        } else {
            let mut d: Vec<Tensor3> =
                pass.pool_inputs[0].iter().zip(&dxs).map(|(x, dy)| layers::stats_pool_backward(x, dy)).collect();
            for (block, cache) in self.trunk.iter().zip(&pass.trunk_caches).rev() {
                d = self.block_backward(block, state, cache, &d, true, &mut grads);
            }
            if self.branches.len() == 1 {
                vec![d]
            } else {
                let counts: Vec<usize> = self.branches.iter().map(|b| b.last().expect("non-empty").geom.cout).collect();
                let mut per_branch: Vec<Vec<Tensor3>> = vec![Vec::with_capacity(d.len()); counts.len()];
                for t in &d {
                    for (k, part) in t.split_channels(&counts).into_iter().enumerate() {
                        per_branch[k].push(part);
                    }
                }
                per_branch
            }
        };
        for ((blocks, caches), mut d) in self.branches.iter().zip(&pass.branch_caches).zip(branch_grads) {
            for (li, (block, cache)) in blocks.iter().zip(caches).enumerate().rev() {
                d = self.block_backward(block, state, cache, &d, li > 0, &mut grads);
            }
        }
        Ok(Backward { loss, gradients: Gradients { values: grads }, probs: pass.probs, bn_updates: pass.updates })
    }
}

struct Pass {
    logits: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
    shapes: Vec<LayerShape>,
    updates: Vec<BnUpdate>,
    branch_caches: Vec<Vec<BlockCache>>,
    pool_inputs: Vec<Vec<Tensor3>>,
    trunk_caches: Vec<BlockCache>,
    head_caches: Vec<BlockCache>,
    head_out: Vec<Tensor3>,
}

/// `-(1/Γ) sum log o_label`.
pub fn cross_entropy(probs: &[Vec<f64>], labels: &[usize]) -> f64 {
    -probs.iter().zip(labels).map(|(p, &l)| p[l].max(f64::MIN_POSITIVE).ln()).sum::<f64>() / probs.len() as f64
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Central finite differences of the batch loss for every trainable
/// parameter entry. Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradcheck(net: &Network, state: &NetworkState, batch: &Batch, eps: f64, floor: f64) -> Result<GradcheckReport> {
    let analytic = net.loss_and_backward(state, batch)?.gradients;
    let mut probe = state.clone();
    let mut report = GradcheckReport { max_rel_err: 0.0, worst_param: String::new(), checked: 0 };
    for (pi, param) in state.params.iter().enumerate().filter(|(_, p)| p.trainable) {
        for i in 0..param.value.len() {
            let orig = param.value[i];
            probe.params[pi].value[i] = orig + eps;
            let up = net.loss(&probe, batch)?;
            probe.params[pi].value[i] = orig - eps;
            let down = net.loss(&probe, batch)?;
            probe.params[pi].value[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.values[pi][i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if err > report.max_rel_err || report.worst_param.is_empty() {
                report.max_rel_err = err;
                report.worst_param = format!("{}[{i}]", param.name);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
