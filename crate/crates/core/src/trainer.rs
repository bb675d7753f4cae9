//! Deterministic mini-batch SGD and the per-task continual-learning loop:
//! train on task `t` with `L_CE + L_reg`, evaluate every seen task, then
//! estimate importance on task `t`'s training data and re-anchor.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{
    accumulate_online_ewc, estimate, ImportanceMap, Method, SiAccumulator, DEFAULT_ONLINE_GAMMA,
    DEFAULT_SI_XI,
};
use crate::metrics::{accuracy_with, AccuracyMatrix};
use crate::network::{ce_logit_grad, Architecture, Network, DEFAULT_HEAD_INIT_SCALE};
use crate::par::{sum_param_sets, Execution};
use crate::params::{GradientSet, ParamSet};
use crate::regularizer::{add_reg_grad, prox_step, Anchor};
use crate::scenario::{LabeledDataset, TaskStream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Milestone {
    pub epoch: usize,
    pub factor: f64,
}

/// Which anchors the penalty sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// Only the most recently finished task.
    #[default]
    Latest,
    /// One anchor per finished task, all active.
    All,
}

/// How the consolidation penalty enters each SGD step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyStep {
    /// SGD on the task loss, then the closed-form proximal step of the
    /// penalty. Stable for any `lr·λ·Ω`.
    #[default]
    Proximal,
    /// Penalty gradient added to the task gradient before the momentum
    /// update. Diverges once `lr·λ·Ω` exceeds roughly `2(1 + momentum)`.
    Explicit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<Milestone>,
    pub lambda: f64,
    /// `None` trains without consolidation (plain fine-tuning).
    pub method: Option<Method>,
    pub gamma: f64,
    pub si_xi: f64,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub head_init_scale: f64,
    pub anchor_policy: AnchorPolicy,
    #[serde(default)]
    pub penalty_step: PenaltyStep,
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_milestones: vec![Milestone {
                epoch: 20,
                factor: 0.1,
            }],
            lambda: 10.0,
            method: Some(Method::EwcDr),
            gamma: DEFAULT_ONLINE_GAMMA,
            si_xi: DEFAULT_SI_XI,
            seed: 1,
            hidden: vec![64, 64],
            head_init_scale: DEFAULT_HEAD_INIT_SCALE,
            anchor_policy: AnchorPolicy::Latest,
            penalty_step: PenaltyStep::Proximal,
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("gamma must lie in [0, 1], got {}", self.gamma));
        }
        if !(self.si_xi > 0.0 && self.si_xi.is_finite()) {
            return bad(format!("si_xi must be positive, got {}", self.si_xi));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if let Some(m) = self.lr_milestones.iter().find(|m| !(m.factor > 0.0 && m.factor.is_finite())) {
            return bad(format!("milestone factor must be positive, got {}", m.factor));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_milestones
            .iter()
            .filter(|m| m.epoch <= epoch)
            .fold(self.lr, |lr, m| lr * m.factor)
    }
}

/// Per-parameter momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumBuffer(ParamSet);

impl MomentumBuffer {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self(params.zeros_like())
    }

    pub fn values(&self) -> &ParamSet {
        &self.0
    }
}

/// `buf ← momentum·buf + (grad + wd·θ)`, `θ ← θ − lr·buf`.
pub fn sgd_step(
    params: &mut ParamSet,
    grad: &GradientSet,
    buf: &mut MomentumBuffer,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    params.check_layout(grad, "sgd_step gradient")?;
    params.check_layout(&buf.0, "sgd_step momentum buffer")?;
    for ((theta, g), b) in params.values_mut().zip(grad.blocks()).zip(buf.0.values_mut()) {
        for ((t, &gi), bi) in theta.iter_mut().zip(g.value.as_slice()).zip(b.iter_mut()) {
            *bi = momentum * *bi + (gi + weight_decay * *t);
            *t -= lr * *bi;
        }
    }
    Ok(())
}

/// Mean cross-entropy gradient over `indices` of `data`.
pub fn batch_ce_grad(net: &Network, data: &LabeledDataset, indices: &[usize], exec: Execution) -> Result<GradientSet> {
    let samples = data.samples();
    let mut g = sum_param_sets(exec, indices.len(), |i| {
        let s = &samples[indices[i]];
        let (z, cache) = net.forward(&s.features)?;
        net.backward(&cache, &ce_logit_grad(&z, s.label)?)
    })?
    .ok_or_else(|| Error::invalid("empty mini-batch"))?;
    g.scale(1.0 / indices.len() as f64);
    Ok(g)
}

/// Everything carried from one task to the next.
#[derive(Debug, Clone)]
pub struct ContinualState {
    pub net: Network,
    pub anchors: Vec<Anchor>,
    /// Accumulated online-EWC importance from the previous consolidation.
    pub online_omega: Option<ImportanceMap>,
    pub si_acc: Option<SiAccumulator>,
    pub task_cursor: usize,
    rng: ChaCha8Rng,
    pub history: AccuracyMatrix,
}

impl ContinualState {
    /// Fresh network with an empty head, seeded from `cfg.seed`.
    pub fn new(input_dim: usize, num_tasks: usize, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let arch = Architecture {
            input_dim,
            hidden: cfg.hidden.clone(),
            num_classes: 0,
            head_bias: false,
            head_init_scale: cfg.head_init_scale,
        };
        let net = Network::init(&arch, &mut rng)?;
        Ok(Self {
            net,
            anchors: Vec::new(),
            online_omega: None,
            si_acc: None,
            task_cursor: 0,
            rng,
            history: AccuracyMatrix::new(num_tasks),
        })
    }

    /// The anchor the penalty currently uses (the latest one).
    pub fn anchor(&self) -> Option<&Anchor> {
        self.anchors.last()
    }

    fn penalty_grad(&self, grad: &mut GradientSet) -> Result<()> {
        for a in &self.anchors {
            add_reg_grad(a, self.net.params(), grad)?;
        }
        Ok(())
    }

    /// Trains task `index` (0-based) of `stream`, which must be the next
    /// unseen task. Only that task's training split is read.
    pub fn train_task(&mut self, stream: &TaskStream, index: usize, cfg: &TrainConfig) -> Result<()> {
        cfg.validate()?;
        if index != self.task_cursor {
            return Err(Error::Protocol(format!(
                "expected task {} next, got task {}",
                self.task_cursor + 1,
                index + 1
            )));
        }
        let task = stream
            .task(index)
            .ok_or_else(|| Error::Protocol(format!("stream has no task {}", index + 1)))?;
        if task.head_classes().start != self.net.num_classes() {
            return Err(Error::Protocol(format!(
                "task {} starts at head class {}, network has {} classes",
                index + 1,
                task.head_classes().start,
                self.net.num_classes()
            )));
        }
        let train = stream.train_split(index).expect("task exists");
        self.net = self
            .net
            .expand_head(task.classes().len(), cfg.head_init_scale, &mut self.rng)?;

        let mut buf = MomentumBuffer::zeros_like(self.net.params());
        let track_si = cfg.method == Some(Method::Si);
        let mut si = if track_si {
            Some(SiAccumulator::new(self.net.params().clone(), cfg.si_xi)?)
        } else {
            None
        };
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 0..cfg.epochs {
            let lr = cfg.lr_at(epoch);
            order.shuffle(&mut self.rng);
            for batch in order.chunks(cfg.batch_size) {
                let task_grad = batch_ce_grad(&self.net, train, batch, cfg.execution)?;
                let before = si.as_ref().map(|_| self.net.params().clone());
                match cfg.penalty_step {
                    PenaltyStep::Explicit => {
                        let mut total = task_grad.clone();
                        self.penalty_grad(&mut total)?;
                        sgd_step(self.net.params_mut(), &total, &mut buf, lr, cfg.momentum, cfg.weight_decay)?;
                    }
                    PenaltyStep::Proximal => {
                        sgd_step(self.net.params_mut(), &task_grad, &mut buf, lr, cfg.momentum, cfg.weight_decay)?;
                        for a in &self.anchors {
                            prox_step(a, self.net.params_mut(), lr)?;
                        }
                    }
                }
                if let (Some(acc), Some(mut delta)) = (si.as_mut(), before) {
                    delta.scale(-1.0);
                    delta.add_assign(self.net.params())?;
                    acc.step(&task_grad, &delta)?;
                }
            }
        }
        self.si_acc = si;
        self.task_cursor += 1;
        Ok(())
    }

    /// Estimates importance for the task just trained and replaces (or, with
    /// [`AnchorPolicy::All`], adds) the anchor. Network parameters are not
    /// touched.
    pub fn consolidate(&mut self, stream: &TaskStream, index: usize, cfg: &TrainConfig) -> Result<()> {
        if index + 1 != self.task_cursor {
            return Err(Error::Protocol(format!(
                "consolidate expects the task just trained ({}), got {}",
                self.task_cursor,
                index + 1
            )));
        }
        let Some(method) = cfg.method else {
            return Ok(());
        };
        let data = stream.train_split(index).expect("task exists").samples();
        let omega = match method {
            Method::Ewc | Method::EwcDr | Method::Mas => estimate(method, &self.net, data, cfg.execution)?,
            Method::OnlineEwc => {
                let current = estimate(Method::Ewc, &self.net, data, cfg.execution)?;
                let acc = match &self.online_omega {
                    Some(prev) => accumulate_online_ewc(prev, &current, cfg.gamma)?,
                    None => ImportanceMap::new(Method::OnlineEwc, current.sample_count, current.values().clone())?,
                };
                self.online_omega = Some(acc.clone());
                acc
            }
            Method::Si => {
                let acc = self
                    .si_acc
                    .take()
                    .ok_or_else(|| Error::invalid("SI consolidation needs the path integral of the task just trained"))?;
                acc.finalize(self.net.params())?
            }
        };
        let anchor = Anchor::new(self.net.params().clone(), omega, cfg.lambda)?;
        match cfg.anchor_policy {
            AnchorPolicy::Latest => self.anchors = vec![anchor],
            AnchorPolicy::All => self.anchors.push(anchor),
        }
        Ok(())
    }

    /// Fills row `index + 1` of the history with accuracies on every seen task.
    pub fn evaluate(&mut self, stream: &TaskStream, index: usize, exec: Execution) -> Result<()> {
        let seen: Vec<usize> = (0..self.net.num_classes()).collect();
        for j in 0..=index {
            let test = stream.task(j).expect("task exists").test();
            let acc = accuracy_with(&self.net, test, &seen, exec)?;
            self.history.record(index + 1, j + 1, acc)?;
        }
        Ok(())
    }
}

/// Trains the whole stream, returning the final network and the filled
/// accuracy matrix.
pub fn run_stream(stream: &TaskStream, cfg: &TrainConfig) -> Result<(Network, AccuracyMatrix)> {
    let state = run_stream_state(stream, cfg)?;
    Ok((state.net, state.history))
}

pub fn run_stream_state(stream: &TaskStream, cfg: &TrainConfig) -> Result<ContinualState> {
    let first = stream.task(0).ok_or_else(|| Error::invalid("empty task stream"))?;
    let mut state = ContinualState::new(first.test().feature_dim(), stream.len(), cfg)?;
    for t in 0..stream.len() {
        let task = stream.task(t).expect("in range");
        // The head has no rows for task t's classes yet, so nothing can be
        // predicted correctly before it is learned.
        state.history.record_pre_learning(t + 1, 0.0)?;
        state.history.record_test_size(t + 1, task.test().len())?;
        state.train_task(stream, t, cfg)?;
        state.evaluate(stream, t, cfg.execution)?;
        state.consolidate(stream, t, cfg)?;
    }
    Ok(state)
}
