//! Diagnostics for the importance estimators: single-sample case studies of
//! gradient vanishing (EWC) and redundant protection (MAS), per-class head
//! importance statistics, and SVG heatmaps of head importance.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::importance::{estimate, per_class_head_importance, ImportanceMap, Method};
use crate::io::write_atomic;
use crate::network::Network;
use crate::par::Execution;
use crate::params::{ParamValue, HEAD_WEIGHT};
use crate::scenario::Sample;
use crate::tensor::{outer, softmax, Tensor1};

/// Estimators compared by the diagnostics, in report order.
pub const COMPARED: [Method; 3] = [Method::Ewc, Method::Mas, Method::EwcDr];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseStudyReport {
    pub logits: Vec<f64>,
    pub p: Vec<f64>,
    pub p_tilde: Vec<f64>,
    pub omega_ewc: Vec<f64>,
    pub omega_mas: Vec<f64>,
    pub omega_ewc_dr: Vec<f64>,
    pub ground_truth: usize,
    /// Classes flagged as redundantly protected by MAS.
    pub flagged: Vec<usize>,
}

/// Single-layer network whose head maps `h` exactly onto `z`:
/// `w = z hᵀ / ‖h‖²`, so `∂z_k/∂w_k = h` for every class.
pub fn probe_network(z: &Tensor1, h: &Tensor1) -> Result<Network> {
    let hh: f64 = h.as_slice().iter().map(|v| v * v).sum();
    if hh == 0.0 {
        return Err(Error::invalid("probe input h must be nonzero"));
    }
    let scaled = Tensor1::new(z.as_slice().iter().map(|v| v / hh).collect());
    Ok(Network::linear(outer(&scaled, h)))
}

/// Per-class head importance of one sample under EWC, MAS and EWC-DR.
fn per_class_all(net: &Network, sample: &Sample) -> Result<[Vec<f64>; 3]> {
    let data = std::slice::from_ref(sample);
    let one = |m| estimate(m, net, data, Execution::Sequential).and_then(|o| per_class_head_importance(&o));
    Ok([one(Method::Ewc)?, one(Method::Mas)?, one(Method::EwcDr)?])
}

fn case_study(z: &Tensor1, c: usize, h: &Tensor1) -> Result<CaseStudyReport> {
    if c >= z.len() {
        return Err(Error::invalid(format!("ground-truth class {c} out of range for {} logits", z.len())));
    }
    let net = probe_network(z, h)?;
    let sample = Sample {
        features: h.clone(),
        label: c,
    };
    let [omega_ewc, omega_mas, omega_ewc_dr] = per_class_all(&net, &sample)?;
    Ok(CaseStudyReport {
        logits: z.as_slice().to_vec(),
        p: softmax(z)?.into_vec(),
        p_tilde: softmax(&z.neg())?.into_vec(),
        omega_ewc,
        omega_mas,
        omega_ewc_dr,
        ground_truth: c,
        flagged: Vec::new(),
    })
}

/// Logits `z_c = margin`, all others 0, evaluated on the probe network.
pub fn case_gradient_vanishing(h: &Tensor1, margin: f64, c: usize, num_classes: usize) -> Result<CaseStudyReport> {
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::invalid(format!("margin must be finite and >= 0, got {margin}")));
    }
    if num_classes < 2 {
        return Err(Error::invalid("case study needs at least 2 classes"));
    }
    let mut z = vec![0.0; num_classes];
    if c < num_classes {
        z[c] = margin;
    }
    case_study(&Tensor1::new(z), c, h)
}

/// Descending competition ranks: 0 for the largest value, ties share a rank.
fn ranks(v: &[f64]) -> Vec<usize> {
    v.iter().map(|&x| v.iter().filter(|&&y| y > x).count()).collect()
}

/// Evaluates the given logits and flags redundantly protected classes: a
/// class `k` with `z_k < −‖z‖∞/2` whose MAS importance exceeds that of some
/// class with a larger logit, and which MAS ranks strictly higher than EWC-DR
/// does.
pub fn case_redundant_protection(z: &Tensor1, c: usize, h: &Tensor1) -> Result<CaseStudyReport> {
    if z.len() < 3 {
        return Err(Error::invalid("redundant-protection case study needs at least 3 logits"));
    }
    let mut report = case_study(z, c, h)?;
    let zs = &report.logits;
    let inf = zs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mas_rank = ranks(&report.omega_mas);
    let dr_rank = ranks(&report.omega_ewc_dr);
    report.flagged = (0..zs.len())
        .filter(|&k| {
            zs[k] < -inf / 2.0
                && (0..zs.len()).any(|j| zs[j] > zs[k] && report.omega_mas[k] > report.omega_mas[j])
                && mas_rank[k] < dr_rank[k]
        })
        .collect();
    Ok(report)
}

impl CaseStudyReport {
    /// `class,p,p_tilde,omega_ewc,omega_mas,omega_ewcdr`, one row per class.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(["class", "p", "p_tilde", "omega_ewc", "omega_mas", "omega_ewcdr"])
            .map_err(err)?;
        for k in 0..self.p.len() {
            w.write_record([
                k.to_string(),
                self.p[k].to_string(),
                self.p_tilde[k].to_string(),
                self.omega_ewc[k].to_string(),
                self.omega_mas[k].to_string(),
                self.omega_ewc_dr[k].to_string(),
            ])
            .map_err(err)?;
        }
        w.flush().map_err(|e| Error::Serde(e.to_string()))
    }

    /// Parses the rows written by [`CaseStudyReport::write_csv`] as
    /// `[p, p_tilde, omega_ewc, omega_mas, omega_ewcdr]` per class.
    pub fn read_csv_rows<R: Read>(input: R) -> Result<Vec<[f64; 5]>> {
        let mut r = csv::Reader::from_reader(input);
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Serde(e.to_string()))?;
            let mut row = [0.0; 5];
            for (i, slot) in row.iter_mut().enumerate() {
                *slot = rec
                    .get(i + 1)
                    .ok_or_else(|| Error::Serde("short CSV record".into()))?
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| Error::Serde(e.to_string()))?;
            }
            rows.push(row);
        }
        Ok(rows)
    }
}

/// Per-class head importance sums for each compared estimator, computed on
/// samples of a single class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableA {
    pub ground_truth: usize,
    pub rows: Vec<(Method, Vec<f64>)>,
    #[serde(skip)]
    pub maps: Vec<ImportanceMap>,
}

impl TableA {
    pub fn row(&self, method: Method) -> Option<&[f64]> {
        self.rows.iter().find(|(m, _)| *m == method).map(|(_, v)| v.as_slice())
    }

    /// `method,class,row_sum`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let err = |e: csv::Error| Error::Serde(e.to_string());
        w.write_record(["method", "class", "row_sum"]).map_err(err)?;
        for (m, sums) in &self.rows {
            for (k, s) in sums.iter().enumerate() {
                w.write_record([m.label().to_string(), k.to_string(), s.to_string()])
                    .map_err(err)?;
            }
        }
        w.flush().map_err(|e| Error::Serde(e.to_string()))
    }
}

pub fn table_a_statistics(net: &Network, data: &[Sample], exec: Execution) -> Result<TableA> {
    let c = data
        .first()
        .ok_or_else(|| Error::invalid("statistics need at least one sample"))?
        .label;
    if data.iter().any(|s| s.label != c) {
        return Err(Error::invalid("all samples must share one label"));
    }
    let mut rows = Vec::new();
    let mut maps = Vec::new();
    for m in COMPARED {
        let omega = estimate(m, net, data, exec)?;
        rows.push((m, per_class_head_importance(&omega)?));
        maps.push(omega);
    }
    Ok(TableA {
        ground_truth: c,
        rows,
        maps,
    })
}

/// Head importance laid out as classes × head inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceHeatmap {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub method: Method,
    pub class_labels: Vec<String>,
}

impl ImportanceHeatmap {
    pub fn from_map(omega: &ImportanceMap) -> Result<Self> {
        let block = omega
            .values()
            .get(HEAD_WEIGHT)
            .ok_or_else(|| Error::invalid("importance map has no head weight block"))?;
        let ParamValue::Matrix(m) = &block.value else {
            return Err(Error::invalid("head weight importance is not a matrix"));
        };
        Ok(Self {
            rows: m.rows(),
            cols: m.cols(),
            values: m.as_slice().to_vec(),
            method: omega.method,
            class_labels: (0..m.rows()).map(|k| k.to_string()).collect(),
        })
    }
}

const CELL: usize = 12;
const MARGIN_LEFT: usize = 48;
const MARGIN_TOP: usize = 28;
const LEGEND: usize = 40;

/// White → dark blue.
fn color(t: f64) -> String {
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

/// Renders the heatmap as a standalone SVG document.
pub fn heatmap_svg(hm: &ImportanceHeatmap) -> Result<String> {
    if hm.values.len() != hm.rows * hm.cols || hm.class_labels.len() != hm.rows {
        return Err(Error::shape("heatmap dimensions do not match its data"));
    }
    if hm.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("heatmap values must be finite"));
    }
    let lo = hm.values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = hm.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let width = MARGIN_LEFT + hm.cols * CELL + 8;
    let height = MARGIN_TOP + hm.rows * CELL + LEGEND;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(
        s,
        r#"<text x="{MARGIN_LEFT}" y="16" font-family="monospace" font-size="11">{} head importance</text>"#,
        hm.method.label()
    );
    for r in 0..hm.rows {
        let y = MARGIN_TOP + r * CELL;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="monospace" font-size="9" text-anchor="end">{}</text>"#,
            MARGIN_LEFT - 4,
            y + CELL - 2,
            hm.class_labels[r]
        );
        for c in 0..hm.cols {
            let v = hm.values[r * hm.cols + c];
            let t = if span > 0.0 { (v - lo) / span } else { 0.0 };
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
                MARGIN_LEFT + c * CELL,
                color(t)
            );
        }
    }
    let ly = MARGIN_TOP + hm.rows * CELL + 10;
    for (i, t) in [0.0, 0.25, 0.5, 0.75, 1.0].into_iter().enumerate() {
        let _ = writeln!(
            s,
            r#"<rect x="{}" y="{ly}" width="{CELL}" height="{CELL}" fill="{}"/>"#,
            MARGIN_LEFT + i * CELL,
            color(t)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="monospace" font-size="9">min {lo:.6e} max {hi:.6e}</text>"#,
        MARGIN_LEFT + 5 * CELL + 6,
        ly + CELL - 2
    );
    s.push_str("</svg>\n");
    Ok(s)
}

pub fn emit_heatmap_svg(hm: &ImportanceHeatmap, path: &Path) -> Result<()> {
    write_atomic(path, heatmap_svg(hm)?.as_bytes())
}
