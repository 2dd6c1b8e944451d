use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::layer::{BatchNorm, Conv2d, LayerSpec};
use super::ops::{self, BnCache};
use super::tensor::{Scalar, Tensor};
use crate::error::{ColonyError, Result};

/// A trainable block of weights (the shareable "knowledge" unit).
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock<F> {
    pub id: String,
    pub values: Tensor<F>,
    pub gradient: Tensor<F>,
}

impl<F: Scalar> ParameterBlock<F> {
    pub fn new(id: impl Into<String>, values: Tensor<F>) -> Self {
        let gradient = Tensor::zeros(values.shape());
        ParameterBlock {
            id: id.into(),
            values,
            gradient,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Layered CNN with an addressable parameter store.
#[derive(Debug, Clone)]
pub struct Network<F> {
    layers: Vec<LayerSpec>,
    params: BTreeMap<String, ParameterBlock<F>>,
    buffers: BTreeMap<String, Tensor<F>>,
    input_shape: [usize; 3],
    classes: usize,
    pub mode: Mode,
    grads_ready: bool,
}

pub(crate) enum Cache<F> {
    None,
    Bn(BnCache<F>),
    Pool(Vec<u32>),
    Projection {
        conv_out: Tensor<F>,
        bn: BnCache<F>,
    },
}

/// Activations and per-layer caches of one forward pass.
pub(crate) struct Trace<F> {
    /// `acts[0]` is the input, `acts[i + 1]` the output of layer `i`.
    pub acts: Vec<Tensor<F>>,
    pub caches: Vec<Cache<F>>,
}

impl<F> Trace<F> {
    pub fn logits(&self) -> &Tensor<F> {
        &self.acts[self.acts.len() - 2]
    }

    pub fn probabilities(&self) -> &Tensor<F> {
        &self.acts[self.acts.len() - 1]
    }
}

pub(crate) type GradMap<F> = BTreeMap<String, Vec<F>>;

fn add_grad<F: Scalar>(grads: &mut GradMap<F>, id: &str, g: Vec<F>) {
    match grads.get_mut(id) {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => {
            grads.insert(id.to_string(), g);
        }
    }
}

fn accumulate<F: Scalar>(slot: &mut Option<Tensor<F>>, g: Tensor<F>) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl<F: Scalar> Network<F> {
    /// Assemble a network, checking that layer wiring, parameter ids and
    /// shapes are mutually consistent.
    pub fn new(
        layers: Vec<LayerSpec>,
        params: Vec<ParameterBlock<F>>,
        buffers: Vec<(String, Tensor<F>)>,
        input_shape: [usize; 3],
        classes: usize,
    ) -> Result<Self> {
        let mut store = BTreeMap::new();
        for p in params {
            if store.contains_key(&p.id) {
                return Err(ColonyError::Config(format!("duplicate parameter id {}", p.id)));
            }
            store.insert(p.id.clone(), p);
        }
        let net = Network {
            layers,
            params: store,
            buffers: buffers.into_iter().collect(),
            input_shape,
            classes,
            mode: Mode::Train,
            grads_ready: false,
        };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<()> {
        let mut referenced = std::collections::BTreeSet::new();
        for layer in &self.layers {
            for id in layer.parameter_ids() {
                if !self.params.contains_key(id) {
                    return Err(ColonyError::Config(format!("layer references missing parameter {id}")));
                }
                if !referenced.insert(id.to_string()) {
                    return Err(ColonyError::Config(format!("parameter {id} referenced twice")));
                }
            }
            for id in layer.buffer_ids() {
                if !self.buffers.contains_key(id) {
                    return Err(ColonyError::Config(format!("layer references missing buffer {id}")));
                }
            }
        }
        if let Some(orphan) = self.params.keys().find(|k| !referenced.contains(*k)) {
            return Err(ColonyError::Config(format!("parameter {orphan} is not used by any layer")));
        }
        if self.layers.last() != Some(&LayerSpec::Softmax) {
            return Err(ColonyError::Config("network must end with softmax".into()));
        }
        let out = self.infer_shapes()?;
        if out != [self.classes] {
            return Err(ColonyError::Config(format!(
                "network produces {out:?}, expected [{}]",
                self.classes
            )));
        }
        Ok(())
    }

    /// Per-sample output shape after walking all layers.
    fn infer_shapes(&self) -> Result<Vec<usize>> {
        let mut shapes: Vec<Vec<usize>> = vec![self.input_shape.to_vec()];
        for (i, layer) in self.layers.iter().enumerate() {
            let cur = shapes.last().unwrap().clone();
            let bad = |msg: String| ColonyError::Config(format!("layer {i}: {msg}"));
            let next = match layer {
                LayerSpec::Conv2d(c) => {
                    self.check_conv(c, &cur).map_err(bad)?;
                    let (h, w) = c.geom.output_hw(cur[1], cur[2]);
                    vec![c.geom.out_ch, h, w]
                }
                LayerSpec::BatchNorm(bn) => {
                    self.check_bn(bn, &cur).map_err(bad)?;
                    cur
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool { size } => {
                    if cur.len() != 3 || cur[1] < *size || cur[2] < *size {
                        return Err(bad(format!("cannot pool {cur:?}")));
                    }
                    vec![cur[0], cur[1] / size, cur[2] / size]
                }
                LayerSpec::ResidualAdd { from, projection } => {
                    if *from > i {
                        return Err(bad(format!("residual source node {from} is not earlier")));
                    }
                    let src = shapes[*from].clone();
                    let added = match projection {
                        Some(p) => {
                            self.check_conv(&p.conv, &src).map_err(bad)?;
                            let (h, w) = p.conv.geom.output_hw(src[1], src[2]);
                            let s = vec![p.conv.geom.out_ch, h, w];
                            self.check_bn(&p.bn, &s).map_err(bad)?;
                            s
                        }
                        None => src,
                    };
                    if added != cur {
                        return Err(bad(format!("residual shapes {added:?} and {cur:?} differ")));
                    }
                    cur
                }
                LayerSpec::GlobalAvgPool => {
                    if cur.len() != 3 {
                        return Err(bad("global pool needs an image input".into()));
                    }
                    vec![cur[0]]
                }
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::FullyConnected(l) => {
                    if cur != [l.inputs] {
                        return Err(bad(format!("fully-connected expects [{}], got {cur:?}", l.inputs)));
                    }
                    self.check_shape(&l.weight, &[l.outputs, l.inputs]).map_err(bad)?;
                    self.check_shape(&l.bias, &[l.outputs]).map_err(bad)?;
                    vec![l.outputs]
                }
                LayerSpec::Softmax => {
                    if cur.len() != 1 {
                        return Err(bad("softmax needs flat scores".into()));
                    }
                    cur
                }
            };
            shapes.push(next);
        }
        Ok(shapes.pop().unwrap())
    }

    fn check_shape(&self, id: &str, shape: &[usize]) -> std::result::Result<(), String> {
        let actual = self.params[id].values.shape();
        if actual != shape {
            return Err(format!("block {id} has shape {actual:?}, expected {shape:?}"));
        }
        Ok(())
    }

    fn check_conv(&self, c: &Conv2d, cur: &[usize]) -> std::result::Result<(), String> {
        if cur.len() != 3 || cur[0] != c.geom.in_ch {
            return Err(format!("conv expects {} channels, got {cur:?}", c.geom.in_ch));
        }
        if !matches!(c.geom.kernel, 1 | 3) {
            return Err(format!("unsupported kernel {}", c.geom.kernel));
        }
        if cur[1] + 2 * c.geom.padding < c.geom.kernel {
            return Err(format!("input {cur:?} smaller than kernel"));
        }
        self.check_shape(&c.weight, &c.geom.weight_shape())?;
        if let Some(b) = &c.bias {
            self.check_shape(b, &[c.geom.out_ch])?;
        }
        Ok(())
    }

    fn check_bn(&self, bn: &BatchNorm, cur: &[usize]) -> std::result::Result<(), String> {
        if cur.len() != 3 || cur[0] != bn.channels {
            return Err(format!("batch norm expects {} channels, got {cur:?}", bn.channels));
        }
        self.check_shape(&bn.gamma, &[bn.channels])?;
        self.check_shape(&bn.beta, &[bn.channels])
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_conv()).count()
    }

    pub fn parameter_ids(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn parameters(&self) -> impl Iterator<Item = &ParameterBlock<F>> {
        self.params.values()
    }

    pub fn parameters_mut(&mut self) -> impl Iterator<Item = &mut ParameterBlock<F>> {
        self.params.values_mut()
    }

    pub fn block(&self, id: &str) -> Option<&ParameterBlock<F>> {
        self.params.get(id)
    }

    pub fn block_mut(&mut self, id: &str) -> Option<&mut ParameterBlock<F>> {
        self.params.get_mut(id)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|p| p.values.len()).sum()
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn buffer(&self, id: &str) -> Option<&Tensor<F>> {
        self.buffers.get(id)
    }

    /// Replace a parameter block's values; the shape must match.
    pub fn set_values(&mut self, id: &str, values: Tensor<F>) -> Result<()> {
        let block = self
            .params
            .get_mut(id)
            .ok_or_else(|| ColonyError::Config(format!("unknown parameter block {id}")))?;
        if block.values.shape() != values.shape() {
            return Err(ColonyError::Config(format!(
                "block {id}: shape {:?} does not match {:?}",
                values.shape(),
                block.values.shape()
            )));
        }
        block.values = values;
        Ok(())
    }

    pub fn set_buffer(&mut self, id: &str, values: Tensor<F>) -> Result<()> {
        let buf = self
            .buffers
            .get_mut(id)
            .ok_or_else(|| ColonyError::Config(format!("unknown buffer {id}")))?;
        if buf.shape() != values.shape() {
            return Err(ColonyError::Config(format!("buffer {id}: shape mismatch")));
        }
        *buf = values;
        Ok(())
    }

    /// Set every parameter (weights, biases, BN scale/shift) to zero.
    pub fn zero_parameters(&mut self) {
        for p in self.params.values_mut() {
            p.values.data_mut().fill(F::ZERO);
        }
    }

    pub fn zero_gradients(&mut self) {
        for p in self.params.values_mut() {
            p.gradient.data_mut().fill(F::ZERO);
        }
        self.grads_ready = false;
    }

    pub fn gradients_ready(&self) -> bool {
        self.grads_ready
    }

    /// Reset batch-norm running statistics to mean 0 / variance 1.
    pub fn reset_running_stats(&mut self) {
        for (id, buf) in self.buffers.iter_mut() {
            let v = if id.ends_with("running_var") { F::ONE } else { F::ZERO };
            buf.data_mut().fill(v);
        }
    }

    /// Same network in another precision (gradients reset).
    pub fn cast<G: Scalar>(&self) -> Network<G> {
        Network {
            layers: self.layers.clone(),
            params: self
                .params
                .iter()
                .map(|(k, p)| (k.clone(), ParameterBlock::new(k.clone(), p.values.cast())))
                .collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            input_shape: self.input_shape,
            classes: self.classes,
            mode: self.mode,
            grads_ready: false,
        }
    }

    fn check_batch(&self, batch: &Tensor<F>) -> Result<usize> {
        let s = batch.shape();
        if s.len() != 4 || s[0] == 0 || s[1..] != self.input_shape {
            return Err(ColonyError::Config(format!(
                "batch shape {s:?} does not match network input (n, {}, {}, {})",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        Ok(s[0])
    }

    fn check_labels(&self, n: usize, labels: &[usize]) -> Result<()> {
        if labels.len() != n {
            return Err(ColonyError::Input(format!(
                "{} labels for a batch of {n}",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= self.classes) {
            return Err(ColonyError::Input(format!(
                "label {bad} out of range 0..{}",
                self.classes
            )));
        }
        Ok(())
    }

    /// Class probabilities of shape `(n, classes)`.
    pub fn forward(&self, batch: &Tensor<F>, mode: Mode) -> Result<Tensor<F>> {
        let mut trace = self.run(batch, mode)?;
        Ok(trace.acts.pop().unwrap())
    }

    pub(crate) fn run(&self, batch: &Tensor<F>, mode: Mode) -> Result<Trace<F>> {
        self.check_batch(batch)?;
        let batch_stats = mode == Mode::Train;
        let mut acts: Vec<Tensor<F>> = Vec::with_capacity(self.layers.len() + 1);
        let mut caches = Vec::with_capacity(self.layers.len());
        acts.push(batch.clone());
        for layer in &self.layers {
            let x = acts.last().unwrap();
            let (out, cache) = match layer {
                LayerSpec::Conv2d(c) => (self.conv(x, c), Cache::None),
                LayerSpec::BatchNorm(bn) => {
                    let (y, cache) = self.bn(x, bn, batch_stats);
                    (y, Cache::Bn(cache))
                }
                LayerSpec::Relu => (ops::relu_forward(x), Cache::None),
                LayerSpec::MaxPool { size } => {
                    let (y, arg) = ops::max_pool_forward(x, *size);
                    (y, Cache::Pool(arg))
                }
                LayerSpec::ResidualAdd { from, projection } => {
                    let mut y = x.clone();
                    match projection {
                        Some(p) => {
                            let conv_out = self.conv(&acts[*from], &p.conv);
                            let (proj, bn) = self.bn(&conv_out, &p.bn, batch_stats);
                            y.add_assign(&proj);
                            (
                                y,
                                Cache::Projection { conv_out, bn },
                            )
                        }
                        None => {
                            y.add_assign(&acts[*from]);
                            (y, Cache::None)
                        }
                    }
                }
                LayerSpec::GlobalAvgPool => (ops::global_avg_pool_forward(x), Cache::None),
                LayerSpec::Flatten => {
                    let n = x.shape()[0];
                    let rest = x.len() / n;
                    (x.clone().reshape(&[n, rest])?, Cache::None)
                }
                LayerSpec::FullyConnected(l) => (
                    ops::linear_forward(
                        x,
                        self.params[&l.weight].values.data(),
                        self.params[&l.bias].values.data(),
                        l.inputs,
                        l.outputs,
                    ),
                    Cache::None,
                ),
                LayerSpec::Softmax => (ops::softmax_rows(x), Cache::None),
            };
            acts.push(out);
            caches.push(cache);
        }
        Ok(Trace { acts, caches })
    }

    fn conv(&self, x: &Tensor<F>, c: &Conv2d) -> Tensor<F> {
        ops::conv2d_forward(
            x,
            self.params[&c.weight].values.data(),
            c.bias.as_ref().map(|b| self.params[b].values.data()),
            &c.geom,
        )
    }

    fn bn(&self, x: &Tensor<F>, bn: &BatchNorm, batch_stats: bool) -> (Tensor<F>, BnCache<F>) {
        ops::batch_norm_forward(
            x,
            self.params[&bn.gamma].values.data(),
            self.params[&bn.beta].values.data(),
            self.buffers[&bn.running_mean].data(),
            self.buffers[&bn.running_var].data(),
            batch_stats,
        )
    }

    /// Loss and parameter gradients without touching the network.
    pub(crate) fn gradients(
        &self,
        batch: &Tensor<F>,
        labels: &[usize],
        mode: Mode,
    ) -> Result<(F, GradMap<F>, Trace<F>)> {
        let n = self.check_batch(batch)?;
        self.check_labels(n, labels)?;
        let trace = self.run(batch, mode)?;
        let loss = ops::cross_entropy(trace.logits(), labels);
        if !loss.is_finite() {
            return Err(ColonyError::Numeric(format!("non-finite loss {loss:?}")));
        }
        let grads = self.backward(&trace, labels);
        Ok((loss, grads, trace))
    }

    fn backward(&self, trace: &Trace<F>, labels: &[usize]) -> GradMap<F> {
        let n = labels.len();
        let layers = &self.layers;
        let mut node_grads: Vec<Option<Tensor<F>>> = vec![None; layers.len() + 1];
        let mut grads: GradMap<F> = BTreeMap::new();

        // d(mean CE)/d(logits) = (p − onehot) / n; the softmax layer is folded in.
        let probs = trace.probabilities();
        let classes = self.classes;
        let inv_n = F::from_f64(1.0 / n as f64);
        let mut dlogits = probs.clone();
        for (row, &label) in dlogits.data_mut().chunks_mut(classes).zip(labels) {
            row[label] -= F::ONE;
            for v in row.iter_mut() {
                *v *= inv_n;
            }
        }
        let last = layers.len() - 1;
        node_grads[last] = Some(dlogits);

        for i in (0..last).rev() {
            let Some(gout) = node_grads[i + 1].take() else {
                continue;
            };
            let x = &trace.acts[i];
            let gin = match &layers[i] {
                LayerSpec::Conv2d(c) => self.conv_backward(x, c, &gout, &mut grads),
                LayerSpec::BatchNorm(bn) => {
                    let Cache::Bn(cache) = &trace.caches[i] else {
                        unreachable!("bn cache")
                    };
                    self.bn_backward(x.shape(), bn, cache, &gout, &mut grads)
                }
                LayerSpec::Relu => ops::relu_backward(x, &gout),
                LayerSpec::MaxPool { .. } => {
                    let Cache::Pool(arg) = &trace.caches[i] else {
                        unreachable!("pool cache")
                    };
                    ops::max_pool_backward(x.shape(), arg, &gout)
                }
                LayerSpec::ResidualAdd { from, projection } => {
                    let skip_grad = match (projection, &trace.caches[i]) {
                        (Some(p), Cache::Projection { conv_out, bn, .. }) => {
                            let g_conv =
                                self.bn_backward(conv_out.shape(), &p.bn, bn, &gout, &mut grads);
                            self.conv_backward(&trace.acts[*from], &p.conv, &g_conv, &mut grads)
                        }
                        _ => gout.clone(),
                    };
                    accumulate(&mut node_grads[*from], skip_grad);
                    gout
                }
                LayerSpec::GlobalAvgPool => ops::global_avg_pool_backward(x.shape(), &gout),
                LayerSpec::Flatten => gout.reshape(x.shape()).expect("flatten grad"),
                LayerSpec::FullyConnected(l) => {
                    let (gx, gw, gb) = ops::linear_backward(
                        x,
                        self.params[&l.weight].values.data(),
                        l.inputs,
                        l.outputs,
                        &gout,
                    );
                    add_grad(&mut grads, &l.weight, gw);
                    add_grad(&mut grads, &l.bias, gb);
                    gx
                }
                LayerSpec::Softmax => unreachable!("softmax only terminates the network"),
            };
            if i > 0 {
                accumulate(&mut node_grads[i], gin);
            }
        }
        // Parameters that received no gradient (unreachable) still get zeros.
        for (id, p) in &self.params {
            grads
                .entry(id.clone())
                .or_insert_with(|| vec![F::ZERO; p.values.len()]);
        }
        grads
    }

    fn conv_backward(
        &self,
        x: &Tensor<F>,
        c: &Conv2d,
        gout: &Tensor<F>,
        grads: &mut GradMap<F>,
    ) -> Tensor<F> {
        let (gx, gw, gb) =
            ops::conv2d_backward(x, self.params[&c.weight].values.data(), &c.geom, gout);
        add_grad(grads, &c.weight, gw);
        if let Some(b) = &c.bias {
            add_grad(grads, b, gb);
        }
        gx
    }

    fn bn_backward(
        &self,
        shape: &[usize],
        bn: &BatchNorm,
        cache: &BnCache<F>,
        gout: &Tensor<F>,
        grads: &mut GradMap<F>,
    ) -> Tensor<F> {
        let (gx, gg, gb) =
            ops::batch_norm_backward(shape, cache, self.params[&bn.gamma].values.data(), gout);
        add_grad(grads, &bn.gamma, gg);
        add_grad(grads, &bn.beta, gb);
        gx
    }

    /// Mean cross-entropy over the batch; fills every block's gradient.
    /// In train mode batch-norm running statistics are updated as well.
    pub fn loss_and_grad(&mut self, batch: &Tensor<F>, labels: &[usize]) -> Result<F> {
        let mode = self.mode;
        let (loss, grads, trace) = self.gradients(batch, labels, mode)?;
        for (id, g) in grads {
            let block = self.params.get_mut(&id).expect("gradient for known block");
            block.gradient.data_mut().copy_from_slice(&g);
        }
        if mode == Mode::Train {
            self.commit_running_stats(&trace);
        }
        self.grads_ready = true;
        Ok(loss)
    }

    fn commit_running_stats(&mut self, trace: &Trace<F>) {
        let layers = std::mem::take(&mut self.layers);
        for (i, layer) in layers.iter().enumerate() {
            let (bn, cache, shape) = match (layer, &trace.caches[i]) {
                (LayerSpec::BatchNorm(bn), Cache::Bn(c)) => (bn, c, trace.acts[i].shape()),
                (
                    LayerSpec::ResidualAdd {
                        projection: Some(p),
                        ..
                    },
                    Cache::Projection { bn, conv_out, .. },
                ) => (&p.bn, bn, conv_out.shape()),
                _ => continue,
            };
            let count = shape[0] * shape[2] * shape[3];
            let mut mean = self.buffers.remove(&bn.running_mean).unwrap();
            let mut var = self.buffers.remove(&bn.running_var).unwrap();
            ops::update_running_stats(cache, count, mean.data_mut(), var.data_mut());
            self.buffers.insert(bn.running_mean.clone(), mean);
            self.buffers.insert(bn.running_var.clone(), var);
        }
        self.layers = layers;
    }
}
