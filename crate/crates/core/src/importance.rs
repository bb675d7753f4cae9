//! Per-parameter importance estimators.
//!
//! * EWC: empirical diagonal Fisher, the mean squared cross-entropy gradient
//!   over the finished task's training data (ground-truth labels).
//! * EWC-DR: the same estimate with the logits negated before the softmax, so
//!   confidently correct samples keep a large `(1 − p̃_c)` gradient instead
//!   of a vanishing `(p_c − 1)` one.
//! * MAS: mean absolute gradient of `‖z‖₂`, label free.
//! * Online EWC: decayed running sum of EWC estimates.
//! * SI: path integral of `−g·Δθ` over the optimizer steps of a task,
//!   normalised by the squared total displacement plus a damping term.
//!
//! No estimator normalises its output; the penalty strength carries all scale.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{one_hot, Network};
use crate::par::{sum_param_sets, Execution};
use crate::params::{align, GradientSet, ParamSet, ParamValue, HEAD_WEIGHT};
use crate::scenario::Sample;

pub const DEFAULT_ONLINE_GAMMA: f64 = 0.9;
pub const DEFAULT_SI_XI: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ewc,
    OnlineEwc,
    Si,
    Mas,
    EwcDr,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Ewc,
        Method::OnlineEwc,
        Method::Si,
        Method::Mas,
        Method::EwcDr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Ewc => "ewc",
            Method::OnlineEwc => "online_ewc",
            Method::Si => "si",
            Method::Mas => "mas",
            Method::EwcDr => "ewc_dr",
        }
    }

    /// Display label used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Method::Ewc => "EWC",
            Method::OnlineEwc => "ONLINE_EWC",
            Method::Si => "SI",
            Method::Mas => "MAS",
            Method::EwcDr => "EWC_DR",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::invalid(format!("unknown method '{s}'")))
    }
}

/// Nonnegative importance values laid out like the parameters they describe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub method: Method,
    pub sample_count: usize,
    values: ParamSet,
}

impl ImportanceMap {
    pub fn new(method: Method, sample_count: usize, values: ParamSet) -> Result<Self> {
        if let Some((b, _, v)) = values.iter_entries().find(|(_, _, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!(
                "importance entries must be finite and >= 0, found {v} in '{}'",
                b.name
            )));
        }
        Ok(Self {
            method,
            sample_count,
            values,
        })
    }

    pub fn values(&self) -> &ParamSet {
        &self.values
    }

    pub fn total(&self) -> f64 {
        self.values.iter_entries().map(|(_, _, v)| v).sum()
    }

    /// One CSV row per entry: `block,row,col,value`. Vectors use `col = 0`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let csv_err = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(["block", "row", "col", "value"]).map_err(csv_err)?;
        for b in self.values.blocks() {
            let (_, cols) = b.value.shape();
            for (i, v) in b.value.as_slice().iter().enumerate() {
                w.write_record([
                    b.name.clone(),
                    (i / cols).to_string(),
                    (i % cols).to_string(),
                    v.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::Serde(e.to_string()))
    }

    /// Reads values written by [`ImportanceMap::write_csv`] back into a map
    /// with the given layout.
    pub fn read_csv<R: Read>(method: Method, sample_count: usize, layout: &ParamSet, input: R) -> Result<Self> {
        let mut values = layout.zeros_like();
        let mut seen = 0usize;
        let mut r = csv::Reader::from_reader(input);
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Serde(e.to_string()))?;
            let field = |i: usize| rec.get(i).ok_or_else(|| Error::Serde("short CSV record".into()));
            let name = field(0)?;
            let parse_idx = |s: &str| s.parse::<usize>().map_err(|e| Error::Serde(e.to_string()));
            let (row, col) = (parse_idx(field(1)?)?, parse_idx(field(2)?)?);
            let v: f64 = field(3)?.parse().map_err(|e: std::num::ParseFloatError| Error::Serde(e.to_string()))?;
            let block = values
                .get_mut(name)
                .ok_or_else(|| Error::invalid(format!("unknown block '{name}' in CSV")))?;
            let (rows, cols) = block.value.shape();
            if row >= rows || col >= cols {
                return Err(Error::invalid(format!("entry ({row},{col}) outside block '{name}'")));
            }
            block.value.as_mut_slice()[row * cols + col] = v;
            seen += 1;
        }
        if seen != layout.numel() {
            return Err(Error::invalid(format!("CSV holds {seen} entries, layout has {}", layout.numel())));
        }
        ImportanceMap::new(method, sample_count, values)
    }
}

fn check_data(net: &Network, data: &[Sample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::invalid("importance estimation needs at least one sample"));
    }
    if let Some(s) = data.iter().find(|s| s.label >= net.num_classes()) {
        return Err(Error::invalid(format!(
            "label {} out of range for {} classes",
            s.label,
            net.num_classes()
        )));
    }
    Ok(())
}

fn square(mut g: GradientSet) -> GradientSet {
    g.map_inplace(|v| *v *= *v);
    g
}

fn absolute(mut g: GradientSet) -> GradientSet {
    g.map_inplace(|v| *v = v.abs());
    g
}

/// Per-sample contribution before averaging.
pub fn sample_contribution(method: Method, net: &Network, sample: &Sample) -> Result<GradientSet> {
    let (_, cache) = net.forward(&sample.features)?;
    match method {
        Method::Ewc | Method::OnlineEwc => {
            let y = one_hot(sample.label, net.num_classes())?;
            Ok(square(net.grad_ce(&cache, &y)?))
        }
        Method::EwcDr => {
            let y = one_hot(sample.label, net.num_classes())?;
            Ok(square(net.grad_ce_reversed(&cache, &y)?))
        }
        Method::Mas => Ok(absolute(net.grad_l2out(&cache)?)),
        Method::Si => Err(Error::invalid("SI importance comes from the training path, not from data")),
    }
}

/// Averages the per-sample contribution of a data-driven estimator (EWC,
/// EWC-DR or MAS) over `data`.
pub fn estimate(method: Method, net: &Network, data: &[Sample], exec: Execution) -> Result<ImportanceMap> {
    if method == Method::Mas {
        if data.is_empty() {
            return Err(Error::invalid("importance estimation needs at least one sample"));
        }
    } else {
        check_data(net, data)?;
    }
    let tag = match method {
        Method::Ewc | Method::EwcDr | Method::Mas => method,
        Method::OnlineEwc | Method::Si => {
            return Err(Error::invalid(format!("{method} is not a single-pass estimator")));
        }
    };
    let mut sum = sum_param_sets(exec, data.len(), |i| sample_contribution(tag, net, &data[i]))?
        .expect("data is nonempty");
    sum.scale(1.0 / data.len() as f64);
    ImportanceMap::new(tag, data.len(), sum)
}

/// Empirical diagonal Fisher information.
pub fn fim_ewc(net: &Network, data: &[Sample]) -> Result<ImportanceMap> {
    estimate(Method::Ewc, net, data, Execution::default())
}

/// Diagonal Fisher of the reversed-logits cross-entropy.
pub fn fim_ewc_dr(net: &Network, data: &[Sample]) -> Result<ImportanceMap> {
    estimate(Method::EwcDr, net, data, Execution::default())
}

/// Mean absolute gradient of the logit ℓ2 norm. Labels are ignored.
pub fn importance_mas(net: &Network, data: &[Sample]) -> Result<ImportanceMap> {
    estimate(Method::Mas, net, data, Execution::default())
}

/// `Ω = γ·Ω_prev + Ω_current`. Head rows present only in `current` count as
/// `Ω_prev = 0`.
pub fn accumulate_online_ewc(prev: &ImportanceMap, current: &ImportanceMap, gamma: f64) -> Result<ImportanceMap> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::invalid(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let aligned = align(&prev.values, &current.values)?;
    let mut out = current.values.clone();
    for ((reference, _, n), block) in aligned.into_iter().zip(out.values_mut()) {
        if let Some(p) = reference {
            for (o, &pv) in block[..n].iter_mut().zip(p.value.as_slice()) {
                *o += gamma * pv;
            }
        }
    }
    ImportanceMap::new(Method::OnlineEwc, prev.sample_count + current.sample_count, out)
}

/// Running SI path integral for the task in progress.
#[derive(Debug, Clone, PartialEq)]
pub struct SiAccumulator {
    omega: ParamSet,
    theta_start: ParamSet,
    xi: f64,
    steps: usize,
}

impl SiAccumulator {
    pub fn new(theta_start: ParamSet, xi: f64) -> Result<Self> {
        if !(xi > 0.0 && xi.is_finite()) {
            return Err(Error::invalid(format!("SI damping must be positive, got {xi}")));
        }
        Ok(Self {
            omega: theta_start.zeros_like(),
            theta_start,
            xi,
            steps: 0,
        })
    }

    pub fn omega(&self) -> &ParamSet {
        &self.omega
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    /// `ω += −g ⊙ Δθ` for one optimizer step.
    pub fn step(&mut self, grad: &GradientSet, delta: &ParamSet) -> Result<()> {
        self.omega.check_layout(grad, "si_step gradient")?;
        self.omega.check_layout(delta, "si_step delta")?;
        for ((o, g), d) in self.omega.values_mut().zip(grad.blocks()).zip(delta.blocks()) {
            for ((oi, gi), di) in o.iter_mut().zip(g.value.as_slice()).zip(d.value.as_slice()) {
                *oi += -gi * di;
            }
        }
        self.steps += 1;
        Ok(())
    }

    /// `Ω = max(0, ω) / ((θ_end − θ_start)² + ξ)`.
    pub fn finalize(&self, theta_end: &ParamSet) -> Result<ImportanceMap> {
        self.omega.check_layout(theta_end, "si_finalize")?;
        let mut out = self.omega.clone();
        for ((o, end), start) in out.values_mut().zip(theta_end.blocks()).zip(self.theta_start.blocks()) {
            for ((oi, e), s) in o.iter_mut().zip(end.value.as_slice()).zip(start.value.as_slice()) {
                let d = e - s;
                *oi = oi.max(0.0) / (d * d + self.xi);
            }
        }
        ImportanceMap::new(Method::Si, self.steps, out)
    }
}

/// Consuming form of [`SiAccumulator::step`].
pub fn si_step(mut acc: SiAccumulator, grad: &GradientSet, delta: &ParamSet) -> Result<SiAccumulator> {
    acc.step(grad, delta)?;
    Ok(acc)
}

pub fn si_finalize(acc: &SiAccumulator, theta_end: &ParamSet) -> Result<ImportanceMap> {
    acc.finalize(theta_end)
}

/// Row sums of the head weight importance: one value per class.
pub fn per_class_head_importance(omega: &ImportanceMap) -> Result<Vec<f64>> {
    let block = omega
        .values
        .get(HEAD_WEIGHT)
        .ok_or_else(|| Error::invalid("importance map has no head weight block"))?;
    let ParamValue::Matrix(m) = &block.value else {
        return Err(Error::invalid("head weight importance is not a matrix"));
    };
    Ok((0..m.rows()).map(|k| m.row(k).iter().sum()).collect())
}
