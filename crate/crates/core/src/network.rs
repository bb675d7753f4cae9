//! Multilayer perceptron with a growable linear classification head.
//!
//! Hidden layers are `relu(W x + b)`; the head computes `z = w h` (plus an
//! optional bias). Gradients are derived by hand: each loss supplies its
//! gradient with respect to the logits and [`Network::backward`] carries it
//! through the layers by the chain rule.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradientSet, ParamBlock, ParamSet, ParamValue, HEAD_BIAS, HEAD_WEIGHT};
use crate::tensor::{l2_norm, log_sum_exp, matvec, outer, softmax, Tensor1, Tensor2};

/// Default half-width of the uniform init used for new head rows.
pub const DEFAULT_HEAD_INIT_SCALE: f64 = 1e-2;

/// Layer widths and head options used to build a fresh network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub head_bias: bool,
    pub head_init_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    input_dim: usize,
    hidden: Vec<usize>,
    head_bias: bool,
    params: ParamSet,
}

/// Activations recorded by [`Network::forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to every layer; the last entry is the head input `h`.
    inputs: Vec<Tensor1>,
    /// Pre-activation of every hidden layer.
    pre: Vec<Tensor1>,
    logits: Tensor1,
}

impl ForwardCache {
    pub fn logits(&self) -> &Tensor1 {
        &self.logits
    }

    /// The input to the classification head.
    pub fn head_input(&self) -> &Tensor1 {
        self.inputs.last().expect("cache always holds the network input")
    }
}

fn hidden_weight(i: usize) -> String {
    format!("hidden{i}.weight")
}

fn hidden_bias(i: usize) -> String {
    format!("hidden{i}.bias")
}

impl Network {
    /// He-uniform hidden weights, zero hidden biases, head rows uniform in
    /// `[-head_init_scale, head_init_scale]`.
    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<Self> {
        if arch.input_dim == 0 || arch.hidden.contains(&0) {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if !(arch.head_init_scale >= 0.0 && arch.head_init_scale.is_finite()) {
            return Err(Error::invalid("head_init_scale must be finite and >= 0"));
        }
        let mut blocks = Vec::with_capacity(2 * arch.hidden.len() + 2);
        let mut fan_in = arch.input_dim;
        for (i, &width) in arch.hidden.iter().enumerate() {
            let limit = (6.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
            let w: Vec<f64> = (0..width * fan_in).map(|_| dist.sample(rng)).collect();
            blocks.push(ParamBlock::matrix(hidden_weight(i), Tensor2::new(width, fan_in, w)?));
            blocks.push(ParamBlock::vector(hidden_bias(i), Tensor1::zeros(width)));
            fan_in = width;
        }
        blocks.push(ParamBlock::matrix(HEAD_WEIGHT, Tensor2::zeros(0, fan_in)));
        if arch.head_bias {
            blocks.push(ParamBlock::vector(HEAD_BIAS, Tensor1::zeros(0)));
        }
        let net = Network {
            input_dim: arch.input_dim,
            hidden: arch.hidden.clone(),
            head_bias: arch.head_bias,
            params: ParamSet::new(blocks)?,
        };
        net.expand_head(arch.num_classes, arch.head_init_scale, rng)
    }

    /// A network that is just the head `z = w x`.
    pub fn linear(head: Tensor2) -> Self {
        Network {
            input_dim: head.cols(),
            hidden: Vec::new(),
            head_bias: false,
            params: ParamSet::new(vec![ParamBlock::matrix(HEAD_WEIGHT, head)])
                .expect("single block"),
        }
    }

    /// Rebuilds a network from explicit parameters, validating the layout.
    pub fn from_params(input_dim: usize, params: ParamSet) -> Result<Self> {
        let blocks = params.blocks();
        let has_bias = blocks.last().is_some_and(|b| b.name == HEAD_BIAS);
        let head_at = blocks.len().checked_sub(1 + has_bias as usize).ok_or_else(|| {
            Error::invalid("network parameters need at least a head block")
        })?;
        if head_at % 2 != 0 {
            return Err(Error::invalid("hidden layers need a weight and a bias block each"));
        }
        let mut hidden = Vec::new();
        let mut fan_in = input_dim;
        for i in 0..head_at / 2 {
            let (w, b) = (&blocks[2 * i], &blocks[2 * i + 1]);
            let (ParamValue::Matrix(wm), ParamValue::Vector(bv)) = (&w.value, &b.value) else {
                return Err(Error::invalid(format!("hidden layer {i} has wrong block kinds")));
            };
            if w.name != hidden_weight(i) || b.name != hidden_bias(i) {
                return Err(Error::invalid(format!("hidden layer {i} has unexpected block names")));
            }
            if wm.cols() != fan_in || bv.len() != wm.rows() {
                return Err(Error::shape(format!("hidden layer {i} does not chain")));
            }
            hidden.push(wm.rows());
            fan_in = wm.rows();
        }
        let head = &blocks[head_at];
        let ParamValue::Matrix(hm) = &head.value else {
            return Err(Error::invalid("head weight must be a matrix"));
        };
        if head.name != HEAD_WEIGHT || hm.cols() != fan_in {
            return Err(Error::shape("head does not chain onto the last hidden layer"));
        }
        if has_bias && blocks[head_at + 1].value.shape().0 != hm.rows() {
            return Err(Error::shape("head bias length differs from head rows"));
        }
        Ok(Network {
            input_dim,
            hidden,
            head_bias: has_bias,
            params,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_widths(&self) -> &[usize] {
        &self.hidden
    }

    pub fn num_classes(&self) -> usize {
        self.head_weight().rows()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Replaces all parameters; the layout must be unchanged.
    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        self.params.check_layout(&params, "set_params")?;
        self.params = params;
        Ok(())
    }

    pub fn head_weight(&self) -> &Tensor2 {
        match &self.params.blocks()[2 * self.hidden.len()].value {
            ParamValue::Matrix(m) => m,
            ParamValue::Vector(_) => unreachable!("head weight is validated as a matrix"),
        }
    }

    fn layer(&self, i: usize) -> (&Tensor2, &Tensor1) {
        let blocks = self.params.blocks();
        match (&blocks[2 * i].value, &blocks[2 * i + 1].value) {
            (ParamValue::Matrix(w), ParamValue::Vector(b)) => (w, b),
            _ => unreachable!("hidden layers are validated on construction"),
        }
    }

    fn head_bias_values(&self) -> Option<&[f64]> {
        self.head_bias
            .then(|| self.params.blocks()[2 * self.hidden.len() + 1].value.as_slice())
    }

    pub fn forward(&self, x: &Tensor1) -> Result<(Tensor1, ForwardCache)> {
        if x.len() != self.input_dim {
            return Err(Error::shape(format!(
                "input has length {}, network expects {}",
                x.len(),
                self.input_dim
            )));
        }
        let mut inputs = Vec::with_capacity(self.hidden.len() + 1);
        let mut pre = Vec::with_capacity(self.hidden.len());
        let mut a = x.clone();
        for i in 0..self.hidden.len() {
            let (w, b) = self.layer(i);
            let mut s = matvec(w, &a)?;
            for (v, bi) in s.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *v += bi;
            }
            let next = Tensor1::new(s.as_slice().iter().map(|&v| v.max(0.0)).collect());
            inputs.push(std::mem::replace(&mut a, next));
            pre.push(s);
        }
        let mut logits = matvec(self.head_weight(), &a)?;
        if let Some(bias) = self.head_bias_values() {
            for (z, b) in logits.as_mut_slice().iter_mut().zip(bias) {
                *z += b;
            }
        }
        inputs.push(a);
        let cache = ForwardCache {
            inputs,
            pre,
            logits: logits.clone(),
        };
        Ok((logits, cache))
    }

    pub fn logits(&self, x: &Tensor1) -> Result<Tensor1> {
        self.forward(x).map(|(z, _)| z)
    }

    /// Predicted class: argmax of the logits, ties to the lowest index.
    pub fn predict(&self, x: &Tensor1) -> Result<usize> {
        self.logits(x)?
            .argmax()
            .ok_or_else(|| Error::invalid("network has no output classes"))
    }

    /// Propagates `∂L/∂z` back through the network.
    pub fn backward(&self, cache: &ForwardCache, dlogits: &Tensor1) -> Result<GradientSet> {
        if dlogits.len() != self.num_classes() || cache.logits.len() != self.num_classes() {
            return Err(Error::shape("logit gradient does not match the head"));
        }
        if cache.inputs.len() != self.hidden.len() + 1 {
            return Err(Error::shape("cache was produced by a different network"));
        }
        let depth = self.hidden.len();
        let mut grads: Vec<Option<ParamValue>> = vec![None; self.params.blocks().len()];
        grads[2 * depth] = Some(ParamValue::Matrix(outer(dlogits, cache.head_input())));
        if self.head_bias {
            grads[2 * depth + 1] = Some(ParamValue::Vector(dlogits.clone()));
        }
        let mut upstream = self.head_weight().transpose_matvec(dlogits)?;
        for i in (0..depth).rev() {
            let delta = Tensor1::new(
                upstream
                    .as_slice()
                    .iter()
                    .zip(cache.pre[i].as_slice())
                    .map(|(&g, &s)| if s > 0.0 { g } else { 0.0 })
                    .collect(),
            );
            let (w, _) = self.layer(i);
            if i > 0 {
                upstream = w.transpose_matvec(&delta)?;
            }
            grads[2 * i] = Some(ParamValue::Matrix(outer(&delta, &cache.inputs[i])));
            grads[2 * i + 1] = Some(ParamValue::Vector(delta));
        }
        let blocks = self
            .params
            .blocks()
            .iter()
            .zip(grads)
            .map(|(b, g)| ParamBlock {
                name: b.name.clone(),
                value: g.expect("every block receives a gradient"),
            })
            .collect();
        ParamSet::new(blocks)
    }

    /// Cross-entropy gradient, `∂L/∂z_k = p_k − y_k`.
    pub fn grad_ce(&self, cache: &ForwardCache, y: &Tensor1) -> Result<GradientSet> {
        let class = one_hot_class(y, self.num_classes())?;
        self.backward(cache, &ce_logit_grad(&cache.logits, class)?)
    }

    /// Reversed-logits cross-entropy gradient, `∂L̃/∂z_k = y_k − p̃_k` with
    /// `p̃ = softmax(−z)`.
    pub fn grad_ce_reversed(&self, cache: &ForwardCache, y: &Tensor1) -> Result<GradientSet> {
        let class = one_hot_class(y, self.num_classes())?;
        self.backward(cache, &reversed_ce_logit_grad(&cache.logits, class)?)
    }

    /// Same gradient as [`Network::grad_ce_reversed`], computed the way an
    /// autodiff framework would: negate the logits, take the ordinary
    /// cross-entropy logit gradient there, and apply the `−1` from `z̃ = −z`.
    pub fn grad_ce_reversed_by_negation(
        &self,
        cache: &ForwardCache,
        y: &Tensor1,
    ) -> Result<GradientSet> {
        let class = one_hot_class(y, self.num_classes())?;
        let negated = cache.logits.neg();
        let through_negation = ce_logit_grad(&negated, class)?.neg();
        self.backward(cache, &through_negation)
    }

    /// Gradient of `‖z‖₂`; zero when the logits are all zero.
    pub fn grad_l2out(&self, cache: &ForwardCache) -> Result<GradientSet> {
        self.backward(cache, &l2_logit_grad(&cache.logits))
    }

    /// Appends `new_classes` head rows drawn uniformly from
    /// `[-init_scale, init_scale]`. Existing rows are untouched.
    pub fn expand_head<R: Rng + ?Sized>(
        &self,
        new_classes: usize,
        init_scale: f64,
        rng: &mut R,
    ) -> Result<Network> {
        let mut out = self.clone();
        if new_classes == 0 {
            return Ok(out);
        }
        let cols = self.head_weight().cols();
        let rows: Vec<f64> = if init_scale > 0.0 {
            let dist = Uniform::new_inclusive(-init_scale, init_scale)
                .map_err(|e| Error::invalid(format!("init_scale: {e}")))?;
            (0..new_classes * cols).map(|_| dist.sample(rng)).collect()
        } else {
            vec![0.0; new_classes * cols]
        };
        let depth = self.hidden.len();
        let blocks = out.params.blocks_mut();
        if let ParamValue::Matrix(w) = &mut blocks[2 * depth].value {
            if cols == 0 {
                *w = Tensor2::zeros(w.rows() + new_classes, 0);
            } else {
                w.append_rows(&rows)?;
            }
        }
        if self.head_bias {
            if let ParamValue::Vector(b) = &mut blocks[2 * depth + 1].value {
                let mut v = std::mem::replace(b, Tensor1::zeros(0)).into_vec();
                v.resize(v.len() + new_classes, 0.0);
                *b = Tensor1::new(v);
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: Network = serde_json::from_str(s).map_err(|e| Error::Serde(e.to_string()))?;
        let net = Network::from_params(raw.input_dim, raw.params)?;
        if net.hidden != raw.hidden || net.head_bias != raw.head_bias {
            return Err(Error::invalid("network document is internally inconsistent"));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Network::from_json(&s)
    }
}

/// One-hot encoding of `class` over `num_classes` entries.
pub fn one_hot(class: usize, num_classes: usize) -> Result<Tensor1> {
    if class >= num_classes {
        return Err(Error::invalid(format!("class {class} out of range for {num_classes} classes")));
    }
    let mut v = vec![0.0; num_classes];
    v[class] = 1.0;
    Ok(Tensor1::new(v))
}

/// The hot index of a one-hot vector of length `num_classes`.
pub fn one_hot_class(y: &Tensor1, num_classes: usize) -> Result<usize> {
    if y.len() != num_classes {
        return Err(Error::invalid(format!(
            "label has length {}, expected {num_classes}",
            y.len()
        )));
    }
    let mut hot = None;
    for (i, &v) in y.as_slice().iter().enumerate() {
        if v == 1.0 && hot.is_none() {
            hot = Some(i);
        } else if v != 0.0 {
            return Err(Error::invalid("label is not one-hot"));
        }
    }
    hot.ok_or_else(|| Error::invalid("label is not one-hot"))
}

fn check_class(z: &Tensor1, class: usize) -> Result<()> {
    if class >= z.len() {
        return Err(Error::invalid(format!("class {class} out of range for {} logits", z.len())));
    }
    Ok(())
}

/// `p − y` with `p = softmax(z)`.
pub fn ce_logit_grad(z: &Tensor1, class: usize) -> Result<Tensor1> {
    check_class(z, class)?;
    let mut g = softmax(z)?;
    g.as_mut_slice()[class] -= 1.0;
    Ok(g)
}

/// `y − p̃` with `p̃ = softmax(−z)`.
pub fn reversed_ce_logit_grad(z: &Tensor1, class: usize) -> Result<Tensor1> {
    check_class(z, class)?;
    let mut g = softmax(&z.neg())?.neg();
    g.as_mut_slice()[class] += 1.0;
    Ok(g)
}

/// `z / ‖z‖₂`, or zero when `‖z‖₂ = 0`.
pub fn l2_logit_grad(z: &Tensor1) -> Tensor1 {
    let n = l2_norm(z);
    if n == 0.0 {
        return Tensor1::zeros(z.len());
    }
    Tensor1::new(z.as_slice().iter().map(|v| v / n).collect())
}

/// `−log softmax(z)_class`.
pub fn ce_loss(z: &Tensor1, class: usize) -> Result<f64> {
    check_class(z, class)?;
    Ok(log_sum_exp(z)? - z.get(class))
}

/// `−log softmax(−z)_class`.
pub fn reversed_ce_loss(z: &Tensor1, class: usize) -> Result<f64> {
    ce_loss(&z.neg(), class)
}

/// `‖z‖₂`.
pub fn l2_loss(z: &Tensor1) -> f64 {
    l2_norm(z)
}
