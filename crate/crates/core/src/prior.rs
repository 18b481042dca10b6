//! Similar-place template construction and the per-class statistics that
//! parameterize the prior.

use crate::error::{Error, Result};
use crate::scalar::{argmax, Scalar};
use crate::tensor::LogitMap;

/// Lower bound applied to every standard deviation.
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Mean class logits of the `k` retrieved references, at query resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplatePrior<T> {
    pub mean_logits: LogitMap<T>,
    pub source_ids: Vec<String>,
}

impl<T: Scalar> TemplatePrior<T> {
    pub fn k(&self) -> usize {
        self.source_ids.len()
    }
}

/// Per-class standard deviation and the pixel count it was estimated from.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats<T> {
    pub sigma: Vec<T>,
    pub support: Vec<usize>,
}

/// Fraction of pixels whose argmax is each class.
#[derive(Debug, Clone, PartialEq)]
pub struct CoverageVector<T> {
    pub coverage: Vec<T>,
}

impl<T: Scalar> CoverageVector<T> {
    pub fn len(&self) -> usize {
        self.coverage.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coverage.is_empty()
    }

    pub fn sum(&self) -> T {
        self.coverage.iter().copied().sum()
    }
}

/// Averages the given maps cell by cell after resampling each to
/// `height x width`. `sources` pairs each map with its reference id.
pub fn build_template<T: Scalar>(
    sources: &[(&str, &LogitMap<T>)],
    height: usize,
    width: usize,
) -> Result<TemplatePrior<T>> {
    let Some(&(_, first)) = sources.first() else {
        return Err(Error::Config("template needs at least one reference map".into()));
    };
    let nc = first.num_classes();
    let mut ids: Vec<String> = Vec::with_capacity(sources.len());
    for &(id, map) in sources {
        if map.num_classes() != nc {
            return Err(Error::ClassCountMismatch {
                expected: nc,
                found: map.num_classes(),
            });
        }
        if ids.iter().any(|s| s == id) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        ids.push(id.to_string());
    }
    let mean_logits = mean_of_maps(sources.iter().map(|&(_, m)| m), height, width)?;
    Ok(TemplatePrior {
        mean_logits,
        source_ids: ids,
    })
}

/// Running per-cell mean; exact when every map is identical.
pub(crate) fn mean_of_maps<'a, T: Scalar>(
    maps: impl IntoIterator<Item = &'a LogitMap<T>>,
    height: usize,
    width: usize,
) -> Result<LogitMap<T>> {
    let mut acc = MeanAccumulator::default();
    for map in maps {
        acc.push(map, height, width)?;
    }
    acc.finish()
}

/// Incremental per-cell mean over a stream of maps.
#[derive(Debug, Default)]
pub(crate) struct MeanAccumulator<T> {
    mean: Option<LogitMap<T>>,
    count: usize,
}

impl<T: Scalar> MeanAccumulator<T> {
    pub(crate) fn push(&mut self, map: &LogitMap<T>, height: usize, width: usize) -> Result<()> {
        let resampled = map.resample_bilinear(height, width)?;
        self.count += 1;
        match &mut self.mean {
            None => self.mean = Some(resampled),
            Some(mean) => {
                if mean.num_classes() != resampled.num_classes() {
                    return Err(Error::ClassCountMismatch {
                        expected: mean.num_classes(),
                        found: resampled.num_classes(),
                    });
                }
                let n = T::from_count(self.count);
                let (h, w, nc) = mean.dims();
                let values = mean
                    .values()
                    .iter()
                    .zip(resampled.values())
                    .map(|(&m, &x)| m + (x - m) / n)
                    .collect();
                *mean = LogitMap::new(h, w, nc, values)?;
            }
        }
        Ok(())
    }

    pub(crate) fn finish(self) -> Result<LogitMap<T>> {
        self.mean
            .ok_or_else(|| Error::Config("mean over an empty set of maps".into()))
    }
}

fn sample_std<T: Scalar>(values: &[T]) -> Option<T> {
    if values.len() < 2 {
        return None;
    }
    let n = T::from_count(values.len());
    let mean = values.iter().copied().sum::<T>() / n;
    let ss: T = values.iter().map(|&v| (v - mean) * (v - mean)).sum();
    Some((ss / (n - T::one())).sqrt())
}

/// Class-wise sample standard deviation of each class's logit over the pixels
/// where that class is the argmax.
///
/// Classes with fewer than two such pixels fall back to the spread of their
/// channel over all pixels. Every result is raised to at least [`SIGMA_FLOOR`].
pub fn class_std<T: Scalar>(logits: &LogitMap<T>) -> ClassStats<T> {
    let nc = logits.num_classes();
    let mut groups: Vec<Vec<T>> = vec![Vec::new(); nc];
    for px in logits.pixels() {
        let best = argmax(px);
        groups[best].push(px[best]);
    }
    let floor = T::lit(SIGMA_FLOOR);
    let mut sigma = Vec::with_capacity(nc);
    let mut support = Vec::with_capacity(nc);
    for (n, group) in groups.iter().enumerate() {
        support.push(group.len());
        let s = sample_std(group)
            .or_else(|| {
                let channel: Vec<T> = logits.pixels().map(|px| px[n]).collect();
                sample_std(&channel)
            })
            .unwrap_or(floor);
        sigma.push(s.max(floor));
    }
    ClassStats { sigma, support }
}

pub fn class_coverage<T: Scalar>(logits: &LogitMap<T>) -> CoverageVector<T> {
    let mut counts = vec![0usize; logits.num_classes()];
    for px in logits.pixels() {
        counts[argmax(px)] += 1;
    }
    let total = T::from_count(logits.num_pixels());
    CoverageVector {
        coverage: counts.into_iter().map(|c| T::from_count(c) / total).collect(),
    }
}

/// Mean of the per-image coverage vectors.
pub fn coverage_over_set<'a, T: Scalar>(
    maps: impl IntoIterator<Item = &'a LogitMap<T>>,
) -> Result<CoverageVector<T>> {
    let mut sum: Option<Vec<T>> = None;
    let mut count = 0usize;
    for map in maps {
        let cov = class_coverage(map);
        count += 1;
        match &mut sum {
            None => sum = Some(cov.coverage),
            Some(s) => {
                if s.len() != cov.len() {
                    return Err(Error::ClassCountMismatch {
                        expected: s.len(),
                        found: cov.len(),
                    });
                }
                s.iter_mut().zip(cov.coverage).for_each(|(a, b)| *a = *a + b);
            }
        }
    }
    let sum = sum.ok_or_else(|| Error::Config("coverage over an empty set of maps".into()))?;
    let n = T::from_count(count);
    Ok(CoverageVector {
        coverage: sum.into_iter().map(|v| v / n).collect(),
    })
}
