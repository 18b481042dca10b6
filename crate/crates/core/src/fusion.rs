//! Gaussian posterior fusion of query logits with a similar-place prior.
//!
//! For every candidate pixel and class the prior is
//! `N(template, (omega * sigma_s)^2)` and the query logit is observed with
//! variance `sigma_q^2`. The tempering factor `omega` comes from class
//! coverage consistency between the query, the template's references and a
//! wider set of retrieved references.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prior::{build_template, ClassStats, CoverageVector, TemplatePrior, SIGMA_FLOOR};
use crate::scalar::{argmax, Scalar};
use crate::tensor::{ClassGrid, LabelGrid, LogitMap};

/// Posterior variance formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosteriorMode {
    /// `var* = 1 / (sigma_q^2 + (omega sigma_s)^2)`, the variance sum as printed.
    AsPublished,
    /// `var* = 1 / (1/sigma_q^2 + 1/(omega sigma_s)^2)`, the precision sum.
    Conjugate,
}

/// Which pixels receive posterior logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    /// Union of query and template predictions of the target class.
    RoadCandidates,
    AllPixels,
}

/// Source of the template coverage `C_k`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateCoverage {
    /// Mean of the per-reference coverages of the top-k references.
    PerReference,
    /// Coverage of the template's own argmax.
    TemplateArgmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OmegaClamp<T> {
    pub min: T,
    pub max: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig<T> {
    /// References averaged into the template.
    pub k: usize,
    /// References used for the wider coverage estimate; must exceed `k`.
    pub ell: usize,
    pub omega_clamp: OmegaClamp<T>,
    pub posterior_mode: PosteriorMode,
    /// Class whose candidate pixels are updated (road by default).
    pub road_class: usize,
    pub update_scope: UpdateScope,
    pub template_coverage: TemplateCoverage,
}

impl<T: Scalar> Default for FusionConfig<T> {
    fn default() -> Self {
        Self {
            k: 5,
            ell: 10,
            omega_clamp: OmegaClamp {
                min: T::lit(1e-3),
                max: T::lit(1e3),
            },
            posterior_mode: PosteriorMode::Conjugate,
            road_class: 0,
            update_scope: UpdateScope::RoadCandidates,
            template_coverage: TemplateCoverage::PerReference,
        }
    }
}

impl<T: Scalar> FusionConfig<T> {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.k < 1 || self.k >= self.ell {
            return Err(Error::Config(format!(
                "need 1 <= k < ell, got k={} ell={}",
                self.k, self.ell
            )));
        }
        let OmegaClamp { min, max } = self.omega_clamp;
        if !(min > T::zero() && min < max && max.is_finite()) {
            return Err(Error::Config(format!(
                "omega clamp must satisfy 0 < min < max < inf, got [{min}, {max}]"
            )));
        }
        if self.road_class >= num_classes {
            return Err(Error::Config(format!(
                "road class {} outside schema of {num_classes} classes",
                self.road_class
            )));
        }
        Ok(())
    }
}

/// Per-class tempering factor
/// `omega_n = |C_ell - C_k| / |C_q - C_ell|`, clamped.
///
/// A zero denominator maps to `clamp.max` (this takes precedence when both
/// terms vanish); a zero numerator maps to `clamp.min`.
pub fn compute_tempering<T: Scalar>(
    c_q: &CoverageVector<T>,
    c_k: &CoverageVector<T>,
    c_ell: &CoverageVector<T>,
    clamp: OmegaClamp<T>,
) -> Result<Vec<T>> {
    let n = c_q.len();
    if c_k.len() != n || c_ell.len() != n {
        return Err(Error::ClassCountMismatch {
            expected: n,
            found: if c_k.len() != n { c_k.len() } else { c_ell.len() },
        });
    }
    Ok((0..n)
        .map(|i| {
            let num = (c_ell.coverage[i] - c_k.coverage[i]).abs();
            let den = (c_q.coverage[i] - c_ell.coverage[i]).abs();
            if den == T::zero() {
                clamp.max
            } else if num == T::zero() {
                clamp.min
            } else {
                (num / den).max(clamp.min).min(clamp.max)
            }
        })
        .collect())
}

/// Posterior mean and variance for one pixel/class.
#[inline]
pub fn posterior_update<T: Scalar>(
    x_q: T,
    sigma_q: T,
    x_s: T,
    sigma_s: T,
    omega: T,
    mode: PosteriorMode,
) -> (T, T) {
    let var_q = sigma_q * sigma_q;
    let prior_sd = omega * sigma_s;
    let var_s = prior_sd * prior_sd;
    let var_star = match mode {
        PosteriorMode::AsPublished => T::one() / (var_q + var_s),
        PosteriorMode::Conjugate => T::one() / (T::one() / var_q + T::one() / var_s),
    };
    let mean = var_star * (x_q / var_q + x_s / (omega * omega * sigma_s * sigma_s));
    (mean, var_star)
}

/// Boolean pixel grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_class_grid(&self) -> ClassGrid {
        ClassGrid::new(
            self.height,
            self.width,
            self.bits.iter().map(|&b| b as u8).collect(),
        )
        .expect("mask dims are valid")
    }
}

/// Pixels where either prediction is the road class.
pub fn road_candidate_mask(
    query_pred: &ClassGrid,
    template_pred: &ClassGrid,
    road_class: usize,
) -> Result<Mask> {
    if query_pred.dims() != template_pred.dims() {
        return Err(Error::shape(
            "road candidate mask",
            format!(
                "query grid {:?} vs template grid {:?}",
                query_pred.dims(),
                template_pred.dims()
            ),
        ));
    }
    let (height, width) = query_pred.dims();
    let bits = query_pred
        .classes()
        .iter()
        .zip(template_pred.classes())
        .map(|(&q, &t)| q as usize == road_class || t as usize == road_class)
        .collect();
    Ok(Mask {
        height,
        width,
        bits,
    })
}

/// Coverage vectors feeding the tempering factor.
#[derive(Debug, Clone, PartialEq)]
pub struct Coverages<T> {
    pub query: CoverageVector<T>,
    pub template: CoverageVector<T>,
    pub set: CoverageVector<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedResult<T> {
    /// Posterior means on candidate pixels, query logits elsewhere.
    pub fused_logits: LogitMap<T>,
    pub posterior_sigma: Vec<T>,
    pub omega: Vec<T>,
    pub candidate_mask: Mask,
    pub prediction: ClassGrid,
}

fn check_stats<T>(what: &str, stats: &ClassStats<T>, nc: usize) -> Result<()> {
    if stats.sigma.len() != nc {
        return Err(Error::shape(
            what,
            format!("{} sigmas for {nc} classes", stats.sigma.len()),
        ));
    }
    Ok(())
}

/// Fuses query logits with a template prior.
pub fn fuse<T: Scalar>(
    query: &LogitMap<T>,
    template: &TemplatePrior<T>,
    stats_q: &ClassStats<T>,
    stats_s: &ClassStats<T>,
    coverages: &Coverages<T>,
    cfg: &FusionConfig<T>,
) -> Result<FusedResult<T>> {
    let (h, w, nc) = query.dims();
    cfg.validate(nc)?;
    let prior = &template.mean_logits;
    if prior.dims() != query.dims() {
        return Err(Error::shape(
            "fuse",
            format!("template {:?} vs query {:?}", prior.dims(), query.dims()),
        ));
    }
    check_stats("query stats", stats_q, nc)?;
    check_stats("template stats", stats_s, nc)?;
    let omega = compute_tempering(
        &coverages.query,
        &coverages.template,
        &coverages.set,
        cfg.omega_clamp,
    )?;
    if omega.len() != nc {
        return Err(Error::ClassCountMismatch {
            expected: nc,
            found: omega.len(),
        });
    }

    let floor = T::lit(SIGMA_FLOOR);
    let sigma_q: Vec<T> = stats_q.sigma.iter().map(|&s| s.max(floor)).collect();
    let sigma_s: Vec<T> = stats_s.sigma.iter().map(|&s| s.max(floor)).collect();

    let candidate_mask = match cfg.update_scope {
        UpdateScope::AllPixels => Mask::filled(h, w, true),
        UpdateScope::RoadCandidates => {
            road_candidate_mask(&query.argmax(), &prior.argmax(), cfg.road_class)?
        }
    };

    let mut values = query.values().to_vec();
    let mut posterior_var = vec![T::zero(); nc];
    for n in 0..nc {
        posterior_var[n] = posterior_update(
            T::zero(),
            sigma_q[n],
            T::zero(),
            sigma_s[n],
            omega[n],
            cfg.posterior_mode,
        )
        .1;
    }
    for (p, &selected) in candidate_mask.bits.iter().enumerate() {
        if !selected {
            continue;
        }
        let xq = query.pixel_flat(p);
        let xs = prior.pixel_flat(p);
        let out = &mut values[p * nc..(p + 1) * nc];
        for n in 0..nc {
            out[n] = posterior_update(
                xq[n],
                sigma_q[n],
                xs[n],
                sigma_s[n],
                omega[n],
                cfg.posterior_mode,
            )
            .0;
        }
    }
    let fused_logits = LogitMap::new(h, w, nc, values)?;
    let prediction = fused_logits.argmax();
    Ok(FusedResult {
        fused_logits,
        posterior_sigma: posterior_var.into_iter().map(|v| v.sqrt()).collect(),
        omega,
        candidate_mask,
        prediction,
    })
}

/// Prediction from the template alone.
pub fn prior_only_predict<T: Scalar>(template: &TemplatePrior<T>) -> ClassGrid {
    template.mean_logits.argmax()
}

/// Mean of every reference map, ignoring retrieval.
pub fn dataset_avg_prior<T: Scalar>(
    references: &[(&str, &LogitMap<T>)],
    height: usize,
    width: usize,
) -> Result<TemplatePrior<T>> {
    build_template(references, height, width)
}

/// Converts labels to logits whose softmax gives probability `p_c` to the
/// labelled class: `ln(p_c (N_c - 1) / (1 - p_c))` for that class, zero for
/// the rest. Undefined pixels get all zeros.
pub fn gt_to_pseudologits<T: Scalar>(
    labels: &LabelGrid,
    class_confidence: &[T],
) -> Result<LogitMap<T>> {
    let nc = class_confidence.len();
    if nc < 2 {
        return Err(Error::Config("need confidences for at least two classes".into()));
    }
    if let Some((c, p)) = class_confidence
        .iter()
        .enumerate()
        .find(|(_, &p)| !(p > T::zero() && p < T::one()))
    {
        return Err(Error::Config(format!(
            "confidence {p} for class {c} outside (0, 1)"
        )));
    }
    let others = T::from_count(nc - 1);
    let class_logit: Vec<T> = class_confidence
        .iter()
        .map(|&p| (p * others / (T::one() - p)).ln())
        .collect();
    let (h, w) = labels.dims();
    let mut values = vec![T::zero(); h * w * nc];
    for (p, &id) in labels.classes().iter().enumerate() {
        if id == labels.undefined_id() {
            continue;
        }
        let id = id as usize;
        if id >= nc {
            return Err(Error::UnknownClassId {
                class_id: id as u8,
                index: p,
                num_classes: nc,
                undefined_id: labels.undefined_id(),
            });
        }
        values[p * nc + id] = class_logit[id];
    }
    LogitMap::new(h, w, nc, values)
}

pub(crate) fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Average winning softmax probability per class over pixels where that class
/// is the argmax. Classes that never win get `1 / N_c`. Results are kept
/// strictly inside `(0, 1)`.
pub fn average_class_confidence<'a, T: Scalar>(
    maps: impl IntoIterator<Item = &'a LogitMap<T>>,
) -> Result<Vec<T>> {
    let mut sums: Vec<T> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for map in maps {
        let nc = map.num_classes();
        if sums.is_empty() {
            sums = vec![T::zero(); nc];
            counts = vec![0; nc];
        } else if sums.len() != nc {
            return Err(Error::ClassCountMismatch {
                expected: sums.len(),
                found: nc,
            });
        }
        for px in map.pixels() {
            let best = argmax(px);
            sums[best] = sums[best] + softmax(px)[best];
            counts[best] += 1;
        }
    }
    if sums.is_empty() {
        return Err(Error::EmptyReferenceSet);
    }
    let nc = sums.len();
    let eps = T::lit(1e-6);
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, c)| {
            let p = if c == 0 {
                T::one() / T::from_count(nc)
            } else {
                s / T::from_count(c)
            };
            p.max(eps).min(T::one() - eps)
        })
        .collect())
}
