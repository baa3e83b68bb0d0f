//! Counterfactual mobility transforms and scenario impact reports.

mod scenario;

pub use scenario::{parse_scenario, read_scenario, run_scenario, ImpactReport, RegionImpact};

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Multiplies every flow, the diagonal included, by `factor`.
pub fn scale_mobility(w: &Tensor, factor: f64) -> Result<Tensor> {
    if !(factor >= 0.0) || !factor.is_finite() {
        return Err(Error::Domain(format!("scale factor must be finite and nonnegative, got {factor}")));
    }
    Ok(w.map(|v| v * factor))
}

fn require_square(w: &Tensor, op: &'static str) -> Result<usize> {
    let (r, c) = w.shape();
    if r != c {
        return Err(Error::Shape {
            op,
            lhs: (r, c),
            rhs: (c, r),
        });
    }
    Ok(r)
}

/// Returns every region's full outflow to its own diagonal.
pub fn cut_interstate(w: &Tensor) -> Result<Tensor> {
    let n = require_square(w, "cut_interstate")?;
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        out.set(i, i, w.row_slice(i).iter().sum());
    }
    Ok(out)
}

/// Cuts region `r` off: its outflow stays home, and visitors bound for `r`
/// stay in their own region.
pub fn isolate_region(w: &Tensor, r: usize) -> Result<Tensor> {
    let n = require_square(w, "isolate_region")?;
    if r >= n {
        return Err(Error::Domain(format!("region index {r} out of range for {n} regions")));
    }
    let mut out = w.clone();
    let outflow: f64 = (0..n).filter(|&j| j != r).map(|j| w.get(r, j)).sum();
    out.set(r, r, w.get(r, r) + outflow);
    for i in (0..n).filter(|&i| i != r) {
        out.set(i, i, w.get(i, i) + w.get(i, r));
        out.set(i, r, 0.0);
        out.set(r, i, 0.0);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TransformKind {
    Scale { factor: f64 },
    CutInterstate,
    Isolate { region: String },
}

/// A transform active on the inclusive date range `[from, to]`; open ends
/// extend indefinitely.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MobilityTransform {
    #[serde(flatten)]
    pub kind: TransformKind,
    #[serde(default)]
    pub from: Option<NaiveDate>,
    #[serde(default)]
    pub to: Option<NaiveDate>,
}

impl MobilityTransform {
    pub fn active_on(&self, date: NaiveDate) -> bool {
        self.from.is_none_or(|f| date >= f) && self.to.is_none_or(|t| date <= t)
    }
}

/// Ordered transforms; each later transform sees the output of the earlier ones.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyScenario {
    pub transforms: Vec<MobilityTransform>,
}

/// A scenario checked against a concrete region list.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedScenario {
    steps: Vec<(ResolvedKind, Option<NaiveDate>, Option<NaiveDate>)>,
}

#[derive(Clone, Debug, PartialEq)]
enum ResolvedKind {
    Scale(f64),
    Cut,
    Isolate(usize),
}

impl PolicyScenario {
    pub fn is_empty(&self) -> bool {
        self.transforms.is_empty()
    }

    /// Validates factors, date order and region names against `region_ids`.
    pub fn resolve(&self, region_ids: &[String]) -> Result<ResolvedScenario> {
        let mut steps = Vec::with_capacity(self.transforms.len());
        for (i, t) in self.transforms.iter().enumerate() {
            if let (Some(f), Some(to)) = (t.from, t.to) {
                if f > to {
                    return Err(Error::Validation(format!(
                        "transform {}: start {f} is after end {to}",
                        i + 1
                    )));
                }
            }
            let kind = match &t.kind {
                TransformKind::Scale { factor } => {
                    if !(*factor >= 0.0) || !factor.is_finite() {
                        return Err(Error::Validation(format!(
                            "transform {}: scale factor must be finite and nonnegative, got {factor}",
                            i + 1
                        )));
                    }
                    ResolvedKind::Scale(*factor)
                }
                TransformKind::CutInterstate => ResolvedKind::Cut,
                TransformKind::Isolate { region } => {
                    let idx = region_ids.iter().position(|r| r == region).ok_or_else(|| {
                        Error::Validation(format!("transform {}: unknown region `{region}`", i + 1))
                    })?;
                    ResolvedKind::Isolate(idx)
                }
            };
            steps.push((kind, t.from, t.to));
        }
        Ok(ResolvedScenario { steps })
    }
}

impl ResolvedScenario {
    pub fn empty() -> Self {
        ResolvedScenario { steps: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Applies, in declared order, every transform active on `date`.
    pub fn apply(&self, date: NaiveDate, w: &Tensor) -> Result<Tensor> {
        let mut out = w.clone();
        for (kind, from, to) in &self.steps {
            if from.is_some_and(|f| date < f) || to.is_some_and(|t| date > t) {
                continue;
            }
            out = match kind {
                ResolvedKind::Scale(f) => scale_mobility(&out, *f)?,
                ResolvedKind::Cut => cut_interstate(&out)?,
                ResolvedKind::Isolate(r) => isolate_region(&out, *r)?,
            };
        }
        Ok(out)
    }
}
