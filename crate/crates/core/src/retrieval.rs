//! Exact cosine-distance retrieval over the reference split with geographic
//! exclusion.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::read_descriptor;
use crate::manifest::DatasetManifest;
use crate::scalar::{dot, Scalar};
use crate::tensor::Descriptor;

const EARTH_RADIUS_METERS: f64 = 6_371_000.0;

/// Default exclusion radius around a query position.
pub const DEFAULT_EXCLUSION_RADIUS_M: f64 = 50.0;

/// WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTag {
    pub lat: f64,
    pub lon: f64,
}

impl GeoTag {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub(crate) fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lat.is_finite() && (-90.0..=90.0).contains(&self.lat)) {
            return Err(format!("latitude {} out of range", self.lat));
        }
        if !(self.lon.is_finite() && (-180.0..=180.0).contains(&self.lon)) {
            return Err(format!("longitude {} out of range", self.lon));
        }
        Ok(())
    }

    /// Great-circle distance in meters (haversine).
    pub fn distance_m(&self, other: &GeoTag) -> f64 {
        let lat1 = self.lat.to_radians();
        let lat2 = other.lat.to_radians();
        let dlat = (other.lat - self.lat).to_radians();
        let dlon = (other.lon - self.lon).to_radians();
        let a = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
        2.0 * EARTH_RADIUS_METERS * a.sqrt().min(1.0).asin()
    }
}

/// Excludes references lying within `radius_m` of the query position.
///
/// When either side has no geotag the reference stays eligible; split
/// disjointness is then the only separation guarantee.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoExclusion {
    pub query: Option<GeoTag>,
    pub radius_m: f64,
}

impl GeoExclusion {
    pub fn none() -> Self {
        Self {
            query: None,
            radius_m: DEFAULT_EXCLUSION_RADIUS_M,
        }
    }

    pub fn around(query: Option<GeoTag>, radius_m: f64) -> Self {
        Self { query, radius_m }
    }

    pub fn excludes(&self, reference: Option<&GeoTag>) -> bool {
        match (self.query.as_ref(), reference) {
            (Some(q), Some(r)) => q.distance_m(r) <= self.radius_m,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IndexEntry<T> {
    pub id: String,
    /// Unit-length copy of the descriptor.
    pub unit: Vec<T>,
    pub geotag: Option<GeoTag>,
}

/// Immutable brute-force index over reference descriptors.
#[derive(Debug, Clone)]
pub struct DescriptorIndex<T> {
    entries: Vec<IndexEntry<T>>,
    dims: usize,
}

pub(crate) fn normalized<T: Scalar>(id: &str, desc: &Descriptor<T>) -> Result<Vec<T>> {
    let norm = desc.norm();
    if norm.is_nan() || norm <= T::zero() || !norm.is_finite() {
        return Err(Error::ZeroNorm { id: id.to_string() });
    }
    Ok(desc.values().iter().map(|&v| v / norm).collect())
}

impl<T: Scalar> DescriptorIndex<T> {
    /// Builds an index from `(id, descriptor, geotag)` triples.
    pub fn from_descriptors<I, S>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Descriptor<T>, Option<GeoTag>)>,
        S: Into<String>,
    {
        let mut entries = Vec::new();
        let mut dims = None;
        for (id, desc, geotag) in items {
            let id = id.into();
            let expected = *dims.get_or_insert(desc.dims());
            if desc.dims() != expected {
                return Err(Error::DimsMismatch {
                    id,
                    expected,
                    found: desc.dims(),
                });
            }
            let unit = normalized(&id, &desc)?;
            entries.push(IndexEntry { id, unit, geotag });
        }
        let dims = dims.ok_or(Error::EmptyReferenceSet)?;
        Ok(Self { entries, dims })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn entries(&self) -> &[IndexEntry<T>] {
        &self.entries
    }

    pub fn geotagged(&self) -> usize {
        self.entries.iter().filter(|e| e.geotag.is_some()).count()
    }
}

/// Loads the descriptors of every reference image in the manifest.
pub fn build_index<T: Scalar>(manifest: &DatasetManifest) -> Result<DescriptorIndex<T>> {
    let items = manifest
        .references()
        .map(|e| {
            let desc = read_descriptor::<T>(manifest.resolve(&e.descriptor))?;
            Ok((e.id.clone(), desc, e.geotag))
        })
        .collect::<Result<Vec<_>>>()?;
    DescriptorIndex::from_descriptors(items)
}

/// `1 - cos(a, b)`, clamped to `[0, 2]`.
pub fn cosine_distance<T: Scalar>(a: &Descriptor<T>, b: &Descriptor<T>) -> Result<T> {
    if a.dims() != b.dims() {
        return Err(Error::DimsMismatch {
            id: "cosine_distance".into(),
            expected: a.dims(),
            found: b.dims(),
        });
    }
    let ua = normalized("a", a)?;
    let ub = normalized("b", b)?;
    Ok(unit_distance(&ua, &ub))
}

#[inline]
pub(crate) fn unit_distance<T: Scalar>(a: &[T], b: &[T]) -> T {
    (T::one() - dot(a, b)).max(T::zero()).min(T::lit(2.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Neighbor<T> {
    pub id: String,
    pub distance: T,
}

/// References ranked by ascending cosine distance; ties ordered by id.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult<T> {
    pub ranked: Vec<Neighbor<T>>,
}

impl<T: Scalar> RetrievalResult<T> {
    pub fn ids(&self) -> Vec<&str> {
        self.ranked.iter().map(|n| n.id.as_str()).collect()
    }

    /// First `n` neighbors (or all, when fewer).
    pub fn top(&self, n: usize) -> &[Neighbor<T>] {
        &self.ranked[..n.min(self.ranked.len())]
    }

    pub fn len(&self) -> usize {
        self.ranked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranked.is_empty()
    }
}

fn rank_order<T: Scalar>(a: &Neighbor<T>, b: &Neighbor<T>) -> Ordering {
    a.distance
        .partial_cmp(&b.distance)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.id.cmp(&b.id))
}

/// Returns the `m` closest eligible references to `query`.
pub fn retrieve_similar<T: Scalar>(
    index: &DescriptorIndex<T>,
    query_id: &str,
    query: &Descriptor<T>,
    m: usize,
    exclusion: &GeoExclusion,
) -> Result<RetrievalResult<T>> {
    if m == 0 {
        return Err(Error::Config("retrieval count must be at least 1".into()));
    }
    if query.dims() != index.dims {
        return Err(Error::DimsMismatch {
            id: query_id.to_string(),
            expected: index.dims,
            found: query.dims(),
        });
    }
    let q = normalized(query_id, query)?;
    let mut ranked: Vec<Neighbor<T>> = index
        .entries
        .iter()
        .filter(|e| !exclusion.excludes(e.geotag.as_ref()))
        .map(|e| Neighbor {
            id: e.id.clone(),
            distance: unit_distance(&e.unit, &q),
        })
        .collect();
    if ranked.is_empty() {
        return Err(Error::NoEligibleReferences {
            query: query_id.to_string(),
        });
    }
    let m = m.min(ranked.len());
    if m < ranked.len() {
        ranked.select_nth_unstable_by(m - 1, rank_order);
        ranked.truncate(m);
    }
    ranked.sort_by(rank_order);
    Ok(RetrievalResult { ranked })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(v: &[f64]) -> Descriptor<f64> {
        Descriptor::new(v.to_vec()).unwrap()
    }

    fn abc() -> DescriptorIndex<f64> {
        let norm = (0.82f64).sqrt();
        DescriptorIndex::from_descriptors(vec![
            ("A", d(&[1.0, 0.0]), None),
            ("B", d(&[0.0, 1.0]), None),
            ("C", d(&[0.9 / norm, 0.1 / norm]), None),
        ])
        .unwrap()
    }

    #[test]
    fn cosine_distance_reference_values() {
        assert_eq!(cosine_distance(&d(&[3.0, 4.0]), &d(&[3.0, 4.0])).unwrap(), 0.0);
        assert_eq!(cosine_distance(&d(&[1.0, 0.0]), &d(&[0.0, 1.0])).unwrap(), 1.0);
        assert_eq!(cosine_distance(&d(&[1.0, 0.0]), &d(&[-1.0, 0.0])).unwrap(), 2.0);
        assert!(cosine_distance(&d(&[1.0]), &d(&[1.0, 0.0])).is_err());
        assert!(cosine_distance(&d(&[0.0, 0.0]), &d(&[1.0, 0.0])).is_err());
    }

    #[test]
    fn retrieves_two_nearest() {
        let idx = abc();
        let r = retrieve_similar(&idx, "q", &d(&[1.0, 0.0]), 2, &GeoExclusion::none()).unwrap();
        assert_eq!(r.ids(), vec!["A", "C"]);
        assert_eq!(r.ranked[0].distance, 0.0);
        let expected = 1.0 - 0.9 / 0.82f64.sqrt();
        assert!((r.ranked[1].distance - expected).abs() < 1e-12);
    }

    #[test]
    fn m_larger_than_index_returns_all() {
        let r = retrieve_similar(&abc(), "q", &d(&[1.0, 0.0]), 10, &GeoExclusion::none()).unwrap();
        assert_eq!(r.ids(), vec!["A", "C", "B"]);
    }

    #[test]
    fn ties_break_by_id() {
        let idx = DescriptorIndex::from_descriptors(vec![
            ("z", d(&[0.0, 1.0]), None),
            ("b", d(&[0.0, 2.0]), None),
            ("m", d(&[0.0, 0.5]), None),
        ])
        .unwrap();
        let r = retrieve_similar(&idx, "q", &d(&[1.0, 1.0]), 2, &GeoExclusion::none()).unwrap();
        assert_eq!(r.ids(), vec!["b", "m"]);
    }

    #[test]
    fn build_errors() {
        let err = DescriptorIndex::from_descriptors(vec![
            ("a", d(&[1.0; 128]), None),
            ("b", d(&[1.0; 64]), None),
        ])
        .unwrap_err();
        assert!(err.to_string().contains("dims mismatch"));
        let err = DescriptorIndex::from_descriptors(vec![("z", d(&[0.0, 0.0, 0.0]), None)])
            .unwrap_err();
        assert!(err.to_string().contains("zero norm"));
        let empty: Vec<(String, Descriptor<f64>, Option<GeoTag>)> = vec![];
        assert!(matches!(
            DescriptorIndex::from_descriptors(empty),
            Err(Error::EmptyReferenceSet)
        ));
    }

    #[test]
    fn index_of_three() {
        let idx = DescriptorIndex::from_descriptors(
            (0..3).map(|i| (format!("r{i}"), d(&vec![i as f64 + 1.0; 128]), None)),
        )
        .unwrap();
        assert_eq!((idx.len(), idx.dims()), (3, 128));
    }

    #[test]
    fn geo_exclusion_exhaustion_is_a_distinct_error() {
        let here = GeoTag::new(47.3769, 8.5417);
        let near = GeoTag::new(47.3770, 8.5418);
        let idx = DescriptorIndex::from_descriptors(vec![
            ("a", d(&[1.0, 0.0]), Some(near)),
            ("b", d(&[0.0, 1.0]), Some(here)),
        ])
        .unwrap();
        let ex = GeoExclusion::around(Some(here), 50.0);
        assert!(matches!(
            retrieve_similar(&idx, "q", &d(&[1.0, 0.0]), 1, &ex),
            Err(Error::NoEligibleReferences { .. })
        ));
        // Without a query geotag nothing is excluded.
        let r = retrieve_similar(&idx, "q", &d(&[1.0, 0.0]), 1, &GeoExclusion::none()).unwrap();
        assert_eq!(r.ids(), vec!["a"]);
    }

    #[test]
    fn haversine_known_distances() {
        let london = GeoTag::new(51.5074, -0.1278);
        let paris = GeoTag::new(48.8566, 2.3522);
        assert!((london.distance_m(&paris) - 343_500.0).abs() < 2_000.0);
        assert_eq!(london.distance_m(&london), 0.0);
        // 0.001 deg of latitude is about 111 m.
        let a = GeoTag::new(10.0, 20.0);
        let b = GeoTag::new(10.001, 20.0);
        assert!((a.distance_m(&b) - 111.19).abs() < 0.1);
    }
}
