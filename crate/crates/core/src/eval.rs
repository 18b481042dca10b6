//! Target-class IoU, per-frame reports and per-condition aggregation.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ClassGrid, LabelGrid};

/// Intersection and union pixel counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IouCounts {
    pub intersection: usize,
    pub union: usize,
}

impl IouCounts {
    pub fn iou(&self) -> Iou {
        if self.union == 0 {
            Iou::NoRoad
        } else {
            Iou::Defined(self.intersection as f64 / self.union as f64)
        }
    }
}

impl std::ops::Add for IouCounts {
    type Output = IouCounts;
    fn add(self, rhs: Self) -> Self {
        IouCounts {
            intersection: self.intersection + rhs.intersection,
            union: self.union + rhs.union,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Iou {
    Defined(f64),
    /// Neither prediction nor ground truth contains the class.
    NoRoad,
}

impl Iou {
    pub fn value(&self) -> Option<f64> {
        match *self {
            Iou::Defined(v) => Some(v),
            Iou::NoRoad => None,
        }
    }
}

impl fmt::Display for Iou {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Iou::Defined(v) => write!(f, "{v:.6}"),
            Iou::NoRoad => f.write_str("no-road"),
        }
    }
}

pub fn iou_counts(
    pred: &ClassGrid,
    gt: &LabelGrid,
    target_class: u8,
    undefined_id: u8,
) -> Result<IouCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::shape(
            "iou",
            format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims()),
        ));
    }
    let mut counts = IouCounts::default();
    for (&p, &g) in pred.classes().iter().zip(gt.classes()) {
        if g == undefined_id {
            continue;
        }
        let in_pred = p == target_class;
        let in_gt = g == target_class;
        counts.intersection += (in_pred && in_gt) as usize;
        counts.union += (in_pred || in_gt) as usize;
    }
    Ok(counts)
}

/// IoU of `target_class`, ignoring pixels whose ground truth is `undefined_id`.
pub fn class_iou(pred: &ClassGrid, gt: &LabelGrid, target_class: u8, undefined_id: u8) -> Result<Iou> {
    Ok(iou_counts(pred, gt, target_class, undefined_id)?.iou())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Query segmentation as produced by the base network.
    Query,
    /// Argmax of the mean over every reference map.
    DatasetAvg,
    /// Argmax of the similar-place template.
    PriorOnly,
    /// Posterior fusion of query and template.
    PriorQuery,
    /// Fusion with a template built from reference ground truth.
    GtPrior,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Query,
        Method::DatasetAvg,
        Method::PriorOnly,
        Method::PriorQuery,
        Method::GtPrior,
    ];

    pub const DEFAULT_SET: [Method; 4] = [
        Method::Query,
        Method::DatasetAvg,
        Method::PriorOnly,
        Method::PriorQuery,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Query => "query",
            Method::DatasetAvg => "dataset_avg",
            Method::PriorOnly => "prior_only",
            Method::PriorQuery => "prior_query",
            Method::GtPrior => "gt_prior",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Outcome for one method on one frame. `None` marks a method that could not
/// be evaluated (e.g. reference labels missing for the ground-truth prior).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MethodScore {
    pub counts: IouCounts,
}

impl MethodScore {
    pub fn iou(&self) -> Iou {
        self.counts.iou()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameReport {
    pub id: String,
    pub condition: String,
    pub scores: BTreeMap<Method, Option<MethodScore>>,
    /// Retrieved template references with cosine distances.
    pub retrieved: Vec<(String, f64)>,
}

impl FrameReport {
    pub fn iou(&self, method: Method) -> Option<Iou> {
        self.scores.get(&method).copied().flatten().map(|s| s.iou())
    }

    /// `method - query` IoU when both are defined.
    pub fn delta_vs_query(&self, method: Method) -> Option<f64> {
        let m = self.iou(method)?.value()?;
        let q = self.iou(Method::Query)?.value()?;
        Some(m - q)
    }

    /// Prior+Query minus the query baseline.
    pub fn delta(&self) -> Option<f64> {
        self.delta_vs_query(Method::PriorQuery)
    }
}

/// How per-frame results are combined into one figure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouAggregation {
    /// Mean of per-frame IoUs over frames where IoU is defined.
    PerFrame,
    /// Intersection and union summed over frames, then divided.
    PixelPooled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    /// Mean IoU under the report's aggregation; `None` when nothing is defined.
    pub mean_iou: Option<f64>,
    /// Frames contributing to the mean.
    pub defined: usize,
    pub no_road: usize,
    pub absent: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetReport {
    pub aggregation: IouAggregation,
    pub frame_count: usize,
    /// condition -> method -> summary
    pub by_condition: BTreeMap<String, BTreeMap<Method, MethodSummary>>,
    /// Over every frame regardless of condition.
    pub overall: BTreeMap<Method, MethodSummary>,
}

impl DatasetReport {
    pub fn overall_mean(&self, method: Method) -> Option<f64> {
        self.overall.get(&method).and_then(|s| s.mean_iou)
    }

    /// Mean of the per-condition means.
    pub fn condition_average(&self, method: Method) -> Option<f64> {
        let means: Vec<f64> = self
            .by_condition
            .values()
            .filter_map(|m| m.get(&method).and_then(|s| s.mean_iou))
            .collect();
        if means.is_empty() {
            None
        } else {
            Some(ordered_sum(means.clone()) / means.len() as f64)
        }
    }

    pub fn methods(&self) -> Vec<Method> {
        self.overall.keys().copied().collect()
    }
}

/// Sum in ascending order, so the result does not depend on input order.
fn ordered_sum(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.into_iter().sum()
}

fn summarize<'a>(
    frames: impl Iterator<Item = &'a FrameReport> + Clone,
    method: Method,
    aggregation: IouAggregation,
) -> MethodSummary {
    let mut ious = Vec::new();
    let mut pooled = IouCounts::default();
    let (mut no_road, mut absent) = (0, 0);
    for f in frames {
        match f.scores.get(&method).copied().flatten() {
            None => absent += 1,
            Some(score) => match score.iou() {
                Iou::Defined(v) => {
                    ious.push(v);
                    pooled = pooled + score.counts;
                }
                Iou::NoRoad => no_road += 1,
            },
        }
    }
    let defined = ious.len();
    let mean_iou = match aggregation {
        _ if defined == 0 => None,
        IouAggregation::PerFrame => Some(ordered_sum(ious) / defined as f64),
        IouAggregation::PixelPooled => pooled.iou().value(),
    };
    MethodSummary {
        mean_iou,
        defined,
        no_road,
        absent,
    }
}

/// Groups frames by condition and averages every method that appears.
pub fn aggregate(reports: &[FrameReport], aggregation: IouAggregation) -> DatasetReport {
    let methods: std::collections::BTreeSet<Method> =
        reports.iter().flat_map(|r| r.scores.keys().copied()).collect();
    let mut conditions: BTreeMap<String, Vec<&FrameReport>> = BTreeMap::new();
    for r in reports {
        conditions.entry(r.condition.clone()).or_default().push(r);
    }
    let by_condition = conditions
        .into_iter()
        .map(|(cond, frames)| {
            let per_method = methods
                .iter()
                .map(|&m| (m, summarize(frames.iter().copied(), m, aggregation)))
                .collect();
            (cond, per_method)
        })
        .collect();
    let overall = methods
        .iter()
        .map(|&m| (m, summarize(reports.iter(), m, aggregation)))
        .collect();
    DatasetReport {
        aggregation,
        frame_count: reports.len(),
        by_condition,
        overall,
    }
}

/// One row per (frame, method): `id,condition,method,iou,delta,retrieved_ids`.
///
/// `iou` is a number, `no-road` or `absent`; `delta` is the method minus the
/// query baseline; `retrieved_ids` lists `id:distance` pairs joined by `;`.
pub fn write_frames_csv<W: Write>(writer: W, reports: &[FrameReport]) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    let to_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    csv.write_record(["id", "condition", "method", "iou", "delta", "retrieved_ids"])
        .map_err(to_err)?;
    for r in reports {
        let retrieved = r
            .retrieved
            .iter()
            .map(|(id, d)| format!("{id}:{d:.6}"))
            .collect::<Vec<_>>()
            .join(";");
        for (&method, score) in &r.scores {
            let iou = match score {
                None => "absent".to_string(),
                Some(s) => s.iou().to_string(),
            };
            let delta = r
                .delta_vs_query(method)
                .map(|d| format!("{d:.6}"))
                .unwrap_or_default();
            csv.write_record([
                r.id.as_str(),
                r.condition.as_str(),
                method.name(),
                iou.as_str(),
                delta.as_str(),
                retrieved.as_str(),
            ])
            .map_err(to_err)?;
        }
    }
    csv.flush()
        .map_err(|e| Error::io("frames csv", e))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", x * 100.0))
        .unwrap_or_else(|| "-".into())
}

/// Human-readable table: one row per method, one column per condition plus
/// the average over conditions. Values are IoU percentages.
pub fn summary_table(report: &DatasetReport) -> String {
    let conds: Vec<&String> = report.by_condition.keys().collect();
    let mut out = String::new();
    let _ = writeln!(
        out,
        "road IoU (%), {} frames, {} aggregation",
        report.frame_count,
        match report.aggregation {
            IouAggregation::PerFrame => "per-frame",
            IouAggregation::PixelPooled => "pixel-pooled",
        }
    );
    let _ = write!(out, "{:<14}", "method");
    for c in &conds {
        let _ = write!(out, "{:>12}", c);
    }
    let _ = writeln!(out, "{:>12}{:>12}", "average", "all frames");
    for method in report.methods() {
        let _ = write!(out, "{:<14}", method.name());
        for c in &conds {
            let v = report.by_condition[*c].get(&method).and_then(|s| s.mean_iou);
            let _ = write!(out, "{:>12}", cell(v));
        }
        let _ = writeln!(
            out,
            "{:>12}{:>12}",
            cell(report.condition_average(method)),
            cell(report.overall_mean(method))
        );
    }
    if let Some(s) = report.overall.get(&Method::Query) {
        if s.no_road > 0 {
            let _ = writeln!(out, "{} no-road frames excluded from means", s.no_road);
        }
    }
    out
}
