//! Central finite-difference checks of the hand-derived gradients.
//!
//! The numerical side only ever calls [`Network::forward`] and the scalar
//! losses, never the backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::network::{ce_loss, l2_loss, one_hot, reversed_ce_loss, Architecture, Network};
use crate::params::GradientSet;
use crate::tensor::Tensor1;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-8;
pub const DEFAULT_INSTANCES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    CrossEntropy,
    ReversedCrossEntropy,
    L2Output,
}

impl Loss {
    pub const ALL: [Loss; 3] = [Loss::CrossEntropy, Loss::ReversedCrossEntropy, Loss::L2Output];

    pub fn as_str(self) -> &'static str {
        match self {
            Loss::CrossEntropy => "cross_entropy",
            Loss::ReversedCrossEntropy => "reversed_cross_entropy",
            Loss::L2Output => "l2_output",
        }
    }
}

pub fn loss_value(net: &Network, x: &Tensor1, class: usize, loss: Loss) -> Result<f64> {
    let z = net.logits(x)?;
    match loss {
        Loss::CrossEntropy => ce_loss(&z, class),
        Loss::ReversedCrossEntropy => reversed_ce_loss(&z, class),
        Loss::L2Output => Ok(l2_loss(&z)),
    }
}

pub fn analytic_grad(net: &Network, x: &Tensor1, class: usize, loss: Loss) -> Result<GradientSet> {
    let (_, cache) = net.forward(x)?;
    match loss {
        Loss::CrossEntropy => net.grad_ce(&cache, &one_hot(class, net.num_classes())?),
        Loss::ReversedCrossEntropy => net.grad_ce_reversed(&cache, &one_hot(class, net.num_classes())?),
        Loss::L2Output => net.grad_l2out(&cache),
    }
}

/// Central-difference gradient of `loss` with respect to every parameter.
pub fn numeric_grad(net: &Network, x: &Tensor1, class: usize, loss: Loss, step: f64) -> Result<GradientSet> {
    let mut out = net.params().zeros_like();
    let mut probe = net.clone();
    let sizes: Vec<usize> = net.params().blocks().iter().map(|b| b.value.as_slice().len()).collect();
    let mut targets: Vec<&mut [f64]> = out.values_mut().collect();
    for (b, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let orig = net.params().blocks()[b].value.as_slice()[i];
            set_entry(&mut probe, b, i, orig + step);
            let plus = loss_value(&probe, x, class, loss)?;
            set_entry(&mut probe, b, i, orig - step);
            let minus = loss_value(&probe, x, class, loss)?;
            set_entry(&mut probe, b, i, orig);
            targets[b][i] = (plus - minus) / (2.0 * step);
        }
    }
    Ok(out)
}

fn set_entry(net: &mut Network, block: usize, i: usize, v: f64) {
    if let Some(slice) = net.params_mut().values_mut().nth(block) {
        slice[i] = v;
    }
}

/// `|a − n| / (max(|a|, |n|) + ABS_FLOOR/REL_TOL)`; an entry passes when this
/// is at most [`REL_TOL`], i.e. `|a − n| ≤ REL_TOL·max(|a|,|n|) + ABS_FLOOR`.
pub fn scaled_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs().max(numeric.abs()) + ABS_FLOOR / REL_TOL)
}

/// Worst entry of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Worst {
    pub error: f64,
    pub block: String,
    pub index: usize,
}

pub fn compare(analytic: &GradientSet, numeric: &GradientSet) -> Worst {
    let mut worst = Worst {
        error: 0.0,
        block: String::new(),
        index: 0,
    };
    for (a, n) in analytic.blocks().iter().zip(numeric.blocks()) {
        for (i, (&x, &y)) in a.value.as_slice().iter().zip(n.value.as_slice()).enumerate() {
            let e = scaled_error(x, y);
            if e > worst.error || worst.block.is_empty() {
                worst = Worst {
                    error: e,
                    block: a.name.clone(),
                    index: i,
                };
            }
        }
    }
    worst
}

/// A seeded random `(network, input, label)` triple.
pub fn random_instance(rng: &mut ChaCha8Rng) -> Result<(Network, Tensor1, usize)> {
    let input_dim = rng.random_range(2..=5);
    let depth = rng.random_range(0..=2);
    let hidden: Vec<usize> = (0..depth).map(|_| rng.random_range(2..=6)).collect();
    let num_classes = rng.random_range(2..=5);
    let arch = Architecture {
        input_dim,
        hidden,
        num_classes,
        head_bias: rng.random_bool(0.5),
        head_init_scale: 1.0,
    };
    let mut net = Network::init(&arch, rng)?;
    // Nonzero biases so ReLU kinks sit away from the origin.
    net.params_mut().map_inplace(|v| {
        if *v == 0.0 {
            *v = 0.1;
        }
    });
    let x = Tensor1::new((0..input_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
    let class = rng.random_range(0..num_classes);
    Ok((net, x, class))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossResult {
    pub loss: Loss,
    pub worst: Worst,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub instances: usize,
    pub results: Vec<LossResult>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn worst_error(&self) -> f64 {
        self.results.iter().map(|r| r.worst.error).fold(0.0, f64::max)
    }
}

/// Checks all three losses on `instances` random triples. `perturb` is added
/// to every analytic gradient entry (a harness hook to confirm the check can
/// fail).
pub fn run_gradcheck(seed: u64, instances: usize, perturb: f64) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results: Vec<LossResult> = Loss::ALL
        .iter()
        .map(|&loss| LossResult {
            loss,
            worst: Worst {
                error: 0.0,
                block: String::new(),
                index: 0,
            },
            passed: true,
        })
        .collect();
    for _ in 0..instances {
        let (net, x, class) = random_instance(&mut rng)?;
        for r in &mut results {
            if r.loss == Loss::L2Output && net.logits(&x).map(|z| crate::tensor::l2_norm(&z))? <= 1e-8 {
                continue;
            }
            let mut a = analytic_grad(&net, &x, class, r.loss)?;
            if perturb != 0.0 {
                a.map_inplace(|v| *v += perturb);
            }
            let n = numeric_grad(&net, &x, class, r.loss, FD_STEP)?;
            let w = compare(&a, &n);
            if w.error > r.worst.error || r.worst.block.is_empty() {
                r.worst = w;
            }
        }
    }
    for r in &mut results {
        r.passed = r.worst.error <= REL_TOL;
    }
    Ok(GradcheckReport {
        seed,
        instances,
        results,
    })
}
