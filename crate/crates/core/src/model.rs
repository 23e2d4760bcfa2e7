//! The width-elastic network: one weight store sized for the widest switch,
//! sliced per sub-model along contiguous channel intervals.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::{Architecture, Block, LayerInfo, LayerKind};
use crate::autograd::{BatchMoments, Graph, NormStats, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::norm::SwitchableStats;
use crate::switch::{round_half_up, SwitchSpec};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Which statistics batch norm uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Current mini-batch statistics.
    Train,
    /// Calibrated per-switch statistics attached to the model.
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSlice {
    pub input: Range<usize>,
    pub output: Range<usize>,
}

/// One sub-model of a resolved switch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SubModelSlice {
    pub switch: String,
    pub position: usize,
    /// Per non-head layer.
    pub layers: Vec<LayerSlice>,
    /// Columns of the head weight (pre-head channels) this sub-model reads.
    pub head: Range<usize>,
}

#[derive(Clone, Debug)]
struct LayerParams {
    weight: ParamId,
    gamma: Option<ParamId>,
    beta: Option<ParamId>,
}

/// Graph handles produced by one sub-model forward.
#[derive(Clone, Copy, Debug)]
pub struct SubModelVars {
    /// Bias-free partial logits `[B, classes]`.
    pub partial_logits: Var,
    /// Pooled pre-head activation `[B, slice channels]`.
    pub activation: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct SwitchVars {
    pub logits: Var,
    /// Pre-head activation placed at its channel positions in a zero vector of
    /// the full (width 1.0) pre-head dimension.
    pub activation: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct SwitchOutput<T: Scalar = f32> {
    pub logits: Tensor<T>,
    pub partials: Vec<Tensor<T>>,
    pub activations: Vec<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct ElasticModel<T: Scalar = f32> {
    arch: Architecture,
    wide_width: f64,
    layers: Vec<LayerInfo>,
    params: ParamStore<T>,
    layer_params: Vec<LayerParams>,
    head_bias: ParamId,
    registry: Vec<SwitchSpec>,
    stats: SwitchableStats,
}

fn weight_shape(info: &LayerInfo, wide: f64, in_channels: usize) -> Vec<usize> {
    let phys = |c: usize| round_half_up(wide * c as f64);
    let cin = info.in_base.map(phys).unwrap_or(in_channels);
    match info.kind {
        LayerKind::Conv | LayerKind::Pointwise => vec![phys(info.out_base), cin, info.kernel, info.kernel],
        LayerKind::Depthwise => vec![phys(info.out_base), 1, info.kernel, info.kernel],
        LayerKind::Head => vec![info.out_base, cin],
    }
}

impl<T: Scalar> ElasticModel<T> {
    /// Randomly initialized model (He-normal convolutions, unit BN scale).
    pub fn new(arch: Architecture, wide_width: f64, registry: Vec<SwitchSpec>, seed: u64) -> Result<Self> {
        if !(wide_width >= 1.0 && wide_width.is_finite()) {
            return Err(Error::Invalid(format!("wide width {wide_width} must be >= 1.0")));
        }
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::new();
        for info in arch.layers() {
            let shape = weight_shape(&info, wide_width, arch.in_channels);
            let fan_in: usize = shape[1..].iter().product();
            let std = if info.is_head() {
                (1.0 / fan_in as f64).sqrt()
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            tensors.push((format!("{}.weight", info.name), Tensor::randn(shape.clone(), std, &mut rng)));
            if info.is_head() {
                tensors.push(("head.bias".to_string(), Tensor::zeros([info.out_base])));
            } else {
                tensors.push((format!("{}.bn.gamma", info.name), Tensor::full([shape[0]], T::one())));
                tensors.push((format!("{}.bn.beta", info.name), Tensor::zeros([shape[0]])));
            }
        }
        Self::from_parts(arch, wide_width, tensors, registry, SwitchableStats::new())
    }

    /// Assembles a model from named tensors, validating names and shapes
    /// against the manifest.
    pub fn from_parts(
        arch: Architecture,
        wide_width: f64,
        tensors: Vec<(String, Tensor<T>)>,
        registry: Vec<SwitchSpec>,
        stats: SwitchableStats,
    ) -> Result<Self> {
        let layers = arch.layers();
        let mut params = ParamStore::new();
        let mut by_name: std::collections::HashMap<String, Tensor<T>> = tensors.into_iter().collect();
        let mut take = |name: String, shape: Vec<usize>, params: &mut ParamStore<T>| -> Result<ParamId> {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, manifest expects {shape:?}",
                    t.shape()
                )));
            }
            params.add(name, t)
        };
        let mut layer_params = Vec::new();
        let mut head_bias = None;
        for info in &layers {
            let shape = weight_shape(info, wide_width, arch.in_channels);
            let weight = take(format!("{}.weight", info.name), shape.clone(), &mut params)?;
            if info.is_head() {
                head_bias = Some(take("head.bias".into(), vec![info.out_base], &mut params)?);
                layer_params.push(LayerParams {
                    weight,
                    gamma: None,
                    beta: None,
                });
            } else {
                let gamma = take(format!("{}.bn.gamma", info.name), vec![shape[0]], &mut params)?;
                let beta = take(format!("{}.bn.beta", info.name), vec![shape[0]], &mut params)?;
                layer_params.push(LayerParams {
                    weight,
                    gamma: Some(gamma),
                    beta: Some(beta),
                });
            }
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {extra}")));
        }
        let model = Self {
            arch,
            wide_width,
            layers,
            params,
            layer_params,
            head_bias: head_bias.expect("architecture always has a head"),
            registry: Vec::new(),
            stats,
        };
        let mut model = model;
        for spec in registry {
            model.register(spec)?;
        }
        Ok(model)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn wide_width(&self) -> f64 {
        self.wide_width
    }

    pub fn layers(&self) -> &[LayerInfo] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn head_bias(&self) -> &Tensor<T> {
        self.params.get(self.head_bias)
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    /// Pre-head dimension of the width-1.0 network.
    pub fn full_activation_len(&self) -> usize {
        self.arch.pre_head_channels()
    }

    pub fn registry(&self) -> &[SwitchSpec] {
        &self.registry
    }

    /// Adds a switch to the registry after checking it resolves.
    pub fn register(&mut self, spec: SwitchSpec) -> Result<()> {
        self.resolve(&spec)?;
        if !self.registry.contains(&spec) {
            self.registry.push(spec);
        }
        Ok(())
    }

    pub fn stats(&self) -> &SwitchableStats {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut SwitchableStats {
        &mut self.stats
    }

    /// Attaches calibrated statistics, replacing sections of the same switches.
    pub fn attach_stats(&mut self, stats: SwitchableStats) {
        self.stats.merge(stats);
    }

    pub fn physical_channels(&self, base: usize) -> usize {
        round_half_up(self.wide_width * base as f64)
    }

    /// Splits every layer into the contiguous channel intervals of `spec`.
    pub fn resolve(&self, spec: &SwitchSpec) -> Result<Vec<SubModelSlice>> {
        let switch = spec.canonical();
        if spec.total() > self.wide_width + 1e-9 {
            return Err(Error::SwitchTooWide {
                switch,
                total: spec.total(),
                available: self.wide_width,
            });
        }
        let k = spec.len();
        let mut slices: Vec<SubModelSlice> = (0..k)
            .map(|position| SubModelSlice {
                switch: switch.clone(),
                position,
                layers: Vec::new(),
                head: 0..0,
            })
            .collect();
        for (li, info) in self.layers.iter().enumerate() {
            let inputs = match info.in_base {
                Some(base) => spec.channel_ranges(base),
                None => vec![0..self.arch.in_channels; k],
            };
            if info.is_head() {
                for (s, r) in slices.iter_mut().zip(inputs) {
                    if r.is_empty() {
                        return Err(Error::EmptyLayer {
                            switch,
                            layer: li,
                            name: info.name.clone(),
                        });
                    }
                    s.head = r;
                }
                continue;
            }
            let outputs = spec.channel_ranges(info.out_base);
            let phys = self.physical_channels(info.out_base);
            for ((s, input), output) in slices.iter_mut().zip(inputs).zip(outputs) {
                if output.is_empty() || input.is_empty() {
                    return Err(Error::EmptyLayer {
                        switch,
                        layer: li,
                        name: info.name.clone(),
                    });
                }
                debug_assert!(output.end <= phys);
                let input = if info.kind == LayerKind::Depthwise { output.clone() } else { input };
                s.layers.push(LayerSlice { input, output });
            }
        }
        Ok(slices)
    }

    fn conv_bn(
        &self,
        g: &mut Graph<T>,
        li: usize,
        slice: &SubModelSlice,
        x: Var,
        mode: NormMode,
        record: &mut Option<&mut Vec<(usize, BatchMoments<T>)>>,
        relu: bool,
    ) -> Result<Var> {
        let info = &self.layers[li];
        let ls = &slice.layers[li];
        let lp = &self.layer_params[li];
        let (cols, groups) = match info.kind {
            LayerKind::Depthwise => (None, ls.output.len()),
            _ => (Some(ls.input.clone()), 1),
        };
        let w = g.param_block(&self.params, lp.weight, ls.output.clone(), cols)?;
        let y = g.conv2d(x, w, info.stride, info.padding, groups)?;
        let gamma = g.param_block(&self.params, lp.gamma.expect("conv layers have bn"), ls.output.clone(), None)?;
        let beta = g.param_block(&self.params, lp.beta.expect("conv layers have bn"), ls.output.clone(), None)?;
        let stored;
        let stats = match mode {
            NormMode::Train => NormStats::Batch,
            NormMode::Eval => {
                let s = self.stats.lookup(&slice.switch, slice.position, li)?;
                stored = (
                    s.mean.iter().map(|&v| T::lit(v as f64)).collect::<Vec<T>>(),
                    s.var.iter().map(|&v| T::lit(v as f64)).collect::<Vec<T>>(),
                );
                NormStats::Stored {
                    mean: &stored.0,
                    var: &stored.1,
                }
            }
        };
        let (y, moments) = g.batch_norm(y, gamma, beta, stats, T::lit(BN_EPS))?;
        if let (Some(rec), Some(m)) = (record.as_mut(), moments) {
            rec.push((li, m));
        }
        if relu {
            g.relu(y)
        } else {
            Ok(y)
        }
    }

    /// Records one sub-model's forward on `g`. Only the slice's channels are
    /// touched; the head reads only its own weight columns and adds no bias.
    /// Batch moments of each norm layer are appended to `record` in train mode.
    pub fn submodel_graph(
        &self,
        g: &mut Graph<T>,
        slice: &SubModelSlice,
        input: Var,
        mode: NormMode,
        mut record: Option<&mut Vec<(usize, BatchMoments<T>)>>,
    ) -> Result<SubModelVars> {
        let mut x = input;
        let mut li = 0;
        for block in &self.arch.blocks {
            match block {
                Block::Conv { .. } => {
                    x = self.conv_bn(g, li, slice, x, mode, &mut record, true)?;
                    li += 1;
                }
                Block::Separable { .. } => {
                    x = self.conv_bn(g, li, slice, x, mode, &mut record, true)?;
                    x = self.conv_bn(g, li + 1, slice, x, mode, &mut record, true)?;
                    li += 2;
                }
                Block::Residual { .. } => {
                    let skip = x;
                    let h = self.conv_bn(g, li, slice, x, mode, &mut record, true)?;
                    let h = self.conv_bn(g, li + 1, slice, h, mode, &mut record, false)?;
                    let s = g.add(h, skip)?;
                    x = g.relu(s)?;
                    li += 2;
                }
            }
        }
        let activation = g.global_avg_pool(x)?;
        let head = &self.layer_params[li];
        let w = g.param_block(&self.params, head.weight, 0..self.arch.classes, Some(slice.head.clone()))?;
        let partial_logits = g.linear(activation, w)?;
        Ok(SubModelVars {
            partial_logits,
            activation,
        })
    }

    /// Records a whole switch: every sub-model, then fusion (partials summed in
    /// position order, head bias added once). With `with_activation`, the
    /// pre-head activations are assembled positionally in width-1.0
    /// coordinates.
    pub fn switch_graph(
        &self,
        g: &mut Graph<T>,
        spec: &SwitchSpec,
        input: Var,
        mode: NormMode,
        with_activation: bool,
    ) -> Result<SwitchVars> {
        let slices = self.resolve(spec)?;
        let full = self.full_activation_len();
        let mut logits: Option<Var> = None;
        let mut act: Option<Var> = None;
        for slice in &slices {
            let vars = self.submodel_graph(g, slice, input, mode, None)?;
            logits = Some(match logits {
                None => vars.partial_logits,
                Some(acc) => g.add(acc, vars.partial_logits)?,
            });
            if with_activation {
                if slice.head.end > full {
                    return Err(Error::Invalid(format!(
                        "switch {} reaches past the width-1.0 pre-head dimension; no activation vector",
                        slice.switch
                    )));
                }
                let padded = g.pad_columns(vars.activation, slice.head.start, full)?;
                act = Some(match act {
                    None => padded,
                    Some(acc) => g.add(acc, padded)?,
                });
            }
        }
        let bias = g.param(&self.params, self.head_bias)?;
        let logits = g.channel_bias(logits.expect("switch has at least one sub-model"), bias)?;
        Ok(SwitchVars { logits, activation: act })
    }

    /// Runs one sub-model; returns `(partial_logits, pre_head_activation)`.
    pub fn forward_submodel(&self, slice: &SubModelSlice, input: &Tensor<T>, mode: NormMode) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let vars = self.submodel_graph(&mut g, slice, x, mode, None)?;
        Ok((g.value(vars.partial_logits).clone(), g.value(vars.activation).clone()))
    }

    /// resolve, forward each sub-model independently, fuse.
    pub fn forward_switch(&self, spec: &SwitchSpec, input: &Tensor<T>, mode: NormMode) -> Result<SwitchOutput<T>> {
        let slices = self.resolve(spec)?;
        let mut partials = Vec::with_capacity(slices.len());
        let mut activations = Vec::with_capacity(slices.len());
        for slice in &slices {
            let (p, a) = self.forward_submodel(slice, input, mode)?;
            partials.push(p);
            activations.push(a);
        }
        let logits = fuse(&partials, self.head_bias())?;
        Ok(SwitchOutput {
            logits,
            partials,
            activations,
        })
    }

    /// Verification oracle: runs the union-width network once with every
    /// weight block that would connect two different sub-models zeroed.
    pub fn masked_monolith_forward(&self, spec: &SwitchSpec, input: &Tensor<T>, mode: NormMode) -> Result<Tensor<T>> {
        let slices = self.resolve(spec)?;
        let mut g = Graph::<T>::new();
        let mut x = g.constant(input.clone());
        let union = |f: &dyn Fn(&SubModelSlice) -> Range<usize>| 0..f(slices.last().expect("non-empty")).end;

        let layer = |g: &mut Graph<T>, li: usize, x: Var, relu: bool| -> Result<Var> {
            let info = &self.layers[li];
            let lp = &self.layer_params[li];
            let outs: Vec<Range<usize>> = slices.iter().map(|s| s.layers[li].output.clone()).collect();
            let ins: Vec<Range<usize>> = slices.iter().map(|s| s.layers[li].input.clone()).collect();
            let out_u = union(&|s| s.layers[li].output.clone());
            let weight = self.params.get(lp.weight);
            let (w, groups) = match info.kind {
                LayerKind::Depthwise => (weight.block(out_u.clone(), None)?, out_u.len()),
                _ if info.in_base.is_none() => (
                    block_diagonal_mask(&weight.block(out_u.clone(), Some(0..weight.shape()[1]))?, &outs, None)?,
                    1,
                ),
                _ => {
                    let in_u = union(&|s| s.layers[li].input.clone());
                    (block_diagonal_mask(&weight.block(out_u.clone(), Some(in_u))?, &outs, Some(&ins))?, 1)
                }
            };
            let w = g.constant(w);
            let y = g.conv2d(x, w, info.stride, info.padding, groups)?;
            let gamma = g.constant(self.params.get(lp.gamma.expect("bn")).block(out_u.clone(), None)?);
            let beta = g.constant(self.params.get(lp.beta.expect("bn")).block(out_u.clone(), None)?);
            let (mean, var);
            let stats = match mode {
                NormMode::Train => NormStats::Batch,
                NormMode::Eval => {
                    let mut m = Vec::new();
                    let mut v = Vec::new();
                    for s in &slices {
                        let st = self.stats.lookup(&s.switch, s.position, li)?;
                        m.extend(st.mean.iter().map(|&x| T::lit(x as f64)));
                        v.extend(st.var.iter().map(|&x| T::lit(x as f64)));
                    }
                    (mean, var) = (m, v);
                    NormStats::Stored { mean: &mean, var: &var }
                }
            };
            let (y, _) = g.batch_norm(y, gamma, beta, stats, T::lit(BN_EPS))?;
            if relu {
                g.relu(y)
            } else {
                Ok(y)
            }
        };

        let mut li = 0;
        for block in &self.arch.blocks {
            match block {
                Block::Conv { .. } => {
                    x = layer(&mut g, li, x, true)?;
                    li += 1;
                }
                Block::Separable { .. } => {
                    x = layer(&mut g, li, x, true)?;
                    x = layer(&mut g, li + 1, x, true)?;
                    li += 2;
                }
                Block::Residual { .. } => {
                    let h = layer(&mut g, li, x, true)?;
                    let h = layer(&mut g, li + 1, h, false)?;
                    let s = g.add(h, x)?;
                    x = g.relu(s)?;
                    li += 2;
                }
            }
        }
        let pooled = g.global_avg_pool(x)?;
        let head_cols = union(&|s| s.head.clone());
        let w = g.constant(
            self.params
                .get(self.layer_params[li].weight)
                .block(0..self.arch.classes, Some(head_cols))?,
        );
        let logits = g.linear(pooled, w)?;
        let bias = g.constant(self.head_bias().clone());
        let out = g.channel_bias(logits, bias)?;
        Ok(g.value(out).clone())
    }

    /// Drops every channel beyond width 1.0, together with registry entries and
    /// statistics of switches that no longer fit.
    pub fn export_deployable(&self) -> Result<Self> {
        let mut tensors = Vec::new();
        for (info, lp) in self.layers.iter().zip(&self.layer_params) {
            let shape = weight_shape(info, 1.0, self.arch.in_channels);
            let w = self.params.get(lp.weight);
            let cols = (shape.len() > 1 && info.kind != LayerKind::Depthwise).then(|| 0..shape[1]);
            tensors.push((self.params.name(lp.weight).to_string(), w.block(0..shape[0], cols)?));
            for id in [lp.gamma, lp.beta].into_iter().flatten() {
                tensors.push((self.params.name(id).to_string(), self.params.get(id).block(0..shape[0], None)?));
            }
        }
        tensors.push(("head.bias".into(), self.head_bias().clone()));
        let registry: Vec<SwitchSpec> = self.registry.iter().filter(|s| s.is_deployable()).cloned().collect();
        let mut stats = SwitchableStats::new();
        for (name, s) in self.stats.switches() {
            let keep = name.parse::<SwitchSpec>().map(|sp| sp.is_deployable()).unwrap_or(false);
            if keep {
                stats.insert_switch(name, s.clone());
            }
        }
        Self::from_parts(self.arch.clone(), 1.0, tensors, registry, stats)
    }

    pub fn cast<U: Scalar>(&self) -> ElasticModel<U> {
        ElasticModel {
            arch: self.arch.clone(),
            wide_width: self.wide_width,
            layers: self.layers.clone(),
            params: self.params.cast(),
            layer_params: self.layer_params.clone(),
            head_bias: self.head_bias,
            registry: self.registry.clone(),
            stats: self.stats.clone(),
        }
    }
}

/// Sums partial logits in list order and adds `head_bias` once.
pub fn fuse<T: Scalar>(partials: &[Tensor<T>], head_bias: &Tensor<T>) -> Result<Tensor<T>> {
    let first = partials
        .first()
        .ok_or_else(|| Error::Invalid("fuse needs at least one partial result".into()))?;
    let [_, c] = first.dims2("fuse")?;
    if head_bias.numel() != c {
        return Err(Error::shape("fuse", first.shape(), head_bias.shape()));
    }
    let mut acc = first.clone();
    for p in &partials[1..] {
        acc.add_assign(p)?;
    }
    for row in acc.data_mut().chunks_mut(c) {
        for (v, &b) in row.iter_mut().zip(head_bias.data()) {
            *v += b;
        }
    }
    Ok(acc)
}

/// Zeroes every `[out, in, ...]` entry whose output channel and input channel
/// belong to different sub-models. Channel `j` of the block belongs to the
/// sub-model whose range (shifted to start at 0) contains it. `ins = None`
/// keeps all inputs (layers reading the network input).
pub fn block_diagonal_mask<T: Scalar>(
    weight: &Tensor<T>,
    outs: &[Range<usize>],
    ins: Option<&[Range<usize>]>,
) -> Result<Tensor<T>> {
    let Some(ins) = ins else { return Ok(weight.clone()) };
    if weight.rank() < 2 {
        return Err(Error::shape("block_diagonal_mask", weight.shape(), &[0, 0]));
    }
    let owner = |ranges: &[Range<usize>], j: usize| {
        let base = ranges.first().map(|r| r.start).unwrap_or(0);
        ranges.iter().position(|r| r.contains(&(j + base)))
    };
    let (d0, d1) = (weight.shape()[0], weight.shape()[1]);
    let inner: usize = weight.shape()[2..].iter().product();
    let mut out = weight.clone();
    for o in 0..d0 {
        let so = owner(outs, o);
        for i in 0..d1 {
            if so.is_none() || so != owner(ins, i) {
                let base = (o * d1 + i) * inner;
                out.data_mut()[base..base + inner].fill(T::zero());
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ElasticModel<f32> {
        let arch = Architecture::preset("toy", 3, 8, 10).unwrap();
        ElasticModel::new(arch, 1.2, vec![], 1).unwrap()
    }

    #[test]
    fn physical_channels_use_wide_width() {
        let m = toy();
        assert_eq!(m.params().get(m.params().id("layer0.weight").unwrap()).shape(), &[19, 3, 3, 3]);
        assert_eq!(m.params().get(m.params().id("head.weight").unwrap()).shape(), &[10, 38]);
    }

    #[test]
    fn resolve_halves() {
        let m = toy();
        let s = m.resolve(&"[0.5,0.5]x".parse().unwrap()).unwrap();
        assert_eq!(s[0].layers[0], LayerSlice { input: 0..3, output: 0..8 });
        assert_eq!(s[1].layers[0], LayerSlice { input: 0..3, output: 8..16 });
        assert_eq!(s[1].layers[1], LayerSlice { input: 8..16, output: 16..32 });
        assert_eq!(s[1].head, 16..32);
        // interior inputs chain from the previous layer's outputs
        for sub in &s {
            for pair in sub.layers.windows(2) {
                assert_eq!(pair[1].input, pair[0].output);
            }
        }
    }

    #[test]
    fn too_wide_and_empty_layers() {
        let m = toy();
        assert!(matches!(
            m.resolve(&"[1.0,0.5]x".parse().unwrap()),
            Err(Error::SwitchTooWide { .. })
        ));
        match m.resolve(&"[0.01,0.5]x".parse().unwrap()) {
            Err(Error::EmptyLayer { layer, name, .. }) => assert_eq!((layer, name.as_str()), (0, "layer0")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mask_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = Tensor::<f32>::randn([6, 6, 3, 3], 1.0, &mut rng);
        let r = [0..3, 3..6];
        let once = block_diagonal_mask(&w, &r, Some(&r)).unwrap();
        let twice = block_diagonal_mask(&once, &r, Some(&r)).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.block(0..3, Some(3..6)).unwrap().max_abs(), 0.0);
        assert_eq!(once.block(0..3, Some(0..3)).unwrap(), w.block(0..3, Some(0..3)).unwrap());
    }

    #[test]
    fn fuse_rules() {
        let p = Tensor::<f32>::new([1, 2], vec![1.0, 2.0]).unwrap();
        let q = Tensor::<f32>::new([1, 2], vec![0.5, -1.0]).unwrap();
        let b = Tensor::<f32>::new([2], vec![0.25, 0.25]).unwrap();
        assert_eq!(fuse(std::slice::from_ref(&p), &b).unwrap().data(), &[1.25, 2.25]);
        assert_eq!(fuse(&[p.clone(), q.clone()], &b).unwrap(), fuse(&[q, p], &b).unwrap());
        assert!(fuse::<f32>(&[], &b).is_err());
    }

    #[test]
    fn eval_without_stats_names_the_layer() {
        let m = toy();
        let x = Tensor::<f32>::zeros([1, 3, 8, 8]);
        match m.forward_switch(&SwitchSpec::full(), &x, NormMode::Eval) {
            Err(Error::MissingStats { switch, position, layer }) => {
                assert_eq!((switch.as_str(), position, layer), ("[1.0]x", 0, 0))
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
