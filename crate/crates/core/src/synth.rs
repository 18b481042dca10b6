//! Seeded synthetic road-scene suite.
//!
//! Scenes are drawn from a few layout families (road band converging to a
//! vanishing point, flanking sidewalks, buildings, sky). References get clean
//! logits; queries get contrast collapse, spatially correlated noise and a
//! per-condition class bias, emulating segmentation under poor conditions.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{write_descriptor, write_label_grid, write_logit_map};
use crate::manifest::{ClassSchema, DatasetManifest, ImageEntry, Split, FORMAT_VERSION};
use crate::retrieval::GeoTag;
use crate::tensor::{Descriptor, LabelGrid, LogitMap, UNDEFINED_ID};

/// Default generator parameters (`data/synth-v1.toml`).
pub const DEFAULT_CONFIG: &str = include_str!("../data/synth-v1.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Family {
    pub vanish_x: f64,
    pub horizon: f64,
    pub road_half_width: f64,
    pub sidewalk: f64,
    pub skyline: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub name: String,
    pub contrast: f64,
    pub pixel_noise: f64,
    pub block_noise: f64,
    pub block_size: usize,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub version: u32,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<String>,
    pub logit_scale: f64,
    pub reference_noise: f64,
    pub geometry_jitter: f64,
    pub descriptor_grid: [usize; 2],
    pub reference_descriptor_noise: f64,
    pub query_descriptor_noise: f64,
    pub hood_rows: usize,
    pub near_duplicates: usize,
    pub families: Vec<Family>,
    pub conditions: Vec<Condition>,
}

impl SynthConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: SynthConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("synth config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth config: {m}")));
        if self.classes.len() != 4 {
            return bad("the scene model uses exactly 4 classes (road, sidewalk, building, sky)");
        }
        if self.height < 4 || self.width < 4 {
            return bad("image must be at least 4x4");
        }
        if self.families.is_empty() || self.conditions.is_empty() {
            return bad("need at least one family and one condition");
        }
        if self.conditions.iter().any(|c| c.bias.len() != self.classes.len() || c.block_size == 0) {
            return bad("condition bias must list one value per class and block_size must be >= 1");
        }
        let [gh, gw] = self.descriptor_grid;
        if gh == 0 || gw == 0 || gh > self.height || gw > self.width {
            return bad("descriptor grid must fit inside the image");
        }
        if self.hood_rows >= self.height {
            return bad("hood_rows must leave some labelled rows");
        }
        Ok(())
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::parse(DEFAULT_CONFIG).expect("bundled synth config is valid")
    }
}

const ROAD: u8 = 0;
const SIDEWALK: u8 = 1;
const BUILDING: u8 = 2;
const SKY: u8 = 3;

/// Per-image layout after jitter.
#[derive(Debug, Clone, Copy)]
struct Layout {
    vanish_x: f64,
    horizon: f64,
    road_half_width: f64,
    sidewalk: f64,
    skyline: f64,
    bottom_x: f64,
}

fn jittered(family: &Family, jitter: f64, rng: &mut impl Rng) -> Layout {
    let mut j = |v: f64| v * (1.0 + jitter * (2.0 * rng.random::<f64>() - 1.0));
    Layout {
        vanish_x: j(family.vanish_x).clamp(0.05, 0.95),
        horizon: j(family.horizon).clamp(0.15, 0.8),
        road_half_width: j(family.road_half_width),
        sidewalk: j(family.sidewalk),
        skyline: j(family.skyline),
        bottom_x: j(0.5),
    }
}

fn render(layout: &Layout, height: usize, width: usize) -> Vec<u8> {
    let (h, w) = (height as f64, width as f64);
    let horizon = layout.horizon * h;
    let mut labels = vec![SKY; height * width];
    for r in 0..height {
        let y = r as f64 + 0.5;
        for c in 0..width {
            let x = c as f64 + 0.5;
            let label = if y >= horizon {
                let t = (y - horizon) / (h - horizon);
                let centre = (layout.vanish_x + t * (layout.bottom_x - layout.vanish_x)) * w;
                let road = t * layout.road_half_width * w;
                let side = road + t * layout.sidewalk * w;
                let dx = (x - centre).abs();
                if dx < road {
                    ROAD
                } else if dx < side {
                    SIDEWALK
                } else {
                    BUILDING
                }
            } else {
                // Buildings rise away from the vanishing point.
                let spread = ((x - layout.vanish_x * w).abs() / w).min(1.0);
                let top = horizon - layout.skyline * h * (0.3 + 1.4 * spread);
                if y >= top {
                    BUILDING
                } else {
                    SKY
                }
            };
            labels[r * width + c] = label;
        }
    }
    labels
}

fn ideal_logits(labels: &[u8], cfg: &SynthConfig, rng: &mut impl Rng) -> Result<LogitMap<f32>> {
    let nc = cfg.classes.len();
    let noise = Normal::new(0.0, cfg.reference_noise).map_err(|e| Error::Config(e.to_string()))?;
    let mut values = Vec::with_capacity(labels.len() * nc);
    for &l in labels {
        for n in 0..nc {
            let hit = if n as u8 == l { cfg.logit_scale } else { 0.0 };
            values.push((hit + noise.sample(rng)) as f32);
        }
    }
    LogitMap::new(cfg.height, cfg.width, nc, values)
}

fn corrupted_logits(
    labels: &[u8],
    cfg: &SynthConfig,
    cond: &Condition,
    rng: &mut impl Rng,
) -> Result<LogitMap<f32>> {
    let nc = cfg.classes.len();
    let (h, w) = (cfg.height, cfg.width);
    let err = |e: rand_distr::NormalError| Error::Config(e.to_string());
    let pixel = Normal::new(0.0, cond.pixel_noise).map_err(err)?;
    let block = Normal::new(0.0, cond.block_noise).map_err(err)?;
    let bs = cond.block_size;
    let (bh, bw) = (h.div_ceil(bs), w.div_ceil(bs));
    let blocks: Vec<f64> = (0..bh * bw * nc).map(|_| block.sample(rng)).collect();
    let mut values = Vec::with_capacity(h * w * nc);
    for r in 0..h {
        for c in 0..w {
            let l = labels[r * w + c];
            let b = ((r / bs) * bw + c / bs) * nc;
            for n in 0..nc {
                let hit = if n as u8 == l { cfg.logit_scale * cond.contrast } else { 0.0 };
                let v = hit + cond.bias[n] + blocks[b + n] + pixel.sample(rng);
                values.push(v as f32);
            }
        }
    }
    LogitMap::new(h, w, nc, values)
}

fn descriptor(labels: &[u8], cfg: &SynthConfig, noise_sd: f64, rng: &mut impl Rng) -> Result<Descriptor<f32>> {
    let nc = cfg.classes.len();
    let [gh, gw] = cfg.descriptor_grid;
    let (h, w) = (cfg.height, cfg.width);
    let mut pooled = vec![0.0f64; gh * gw * nc];
    let mut counts = vec![0usize; gh * gw];
    for r in 0..h {
        for c in 0..w {
            let cell = (r * gh / h) * gw + c * gw / w;
            pooled[cell * nc + labels[r * w + c] as usize] += 1.0;
            counts[cell] += 1;
        }
    }
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::Config(e.to_string()))?;
    let values = pooled
        .iter()
        .enumerate()
        .map(|(i, &v)| (v / counts[i / nc] as f64 + noise.sample(rng)).max(0.0) as f32 + 1e-3)
        .collect();
    Descriptor::new(values)
}

/// Location of the generated suite and its content digest.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSuite {
    pub manifest_path: PathBuf,
    /// SHA-256 over the manifest text and every data file, in manifest order.
    pub digest: String,
}

struct Scene {
    id: String,
    split: Split,
    condition: String,
    labels: Vec<u8>,
    logits: LogitMap<f32>,
    descriptor: Descriptor<f32>,
    geotag: GeoTag,
    query_labels: bool,
}

/// Generates `references` reference and `queries` query images under `out_dir`.
pub fn generate_suite(
    cfg: &SynthConfig,
    seed: u64,
    references: usize,
    queries: usize,
    out_dir: &Path,
) -> Result<SynthSuite> {
    cfg.validate()?;
    if references == 0 || queries == 0 {
        return Err(Error::Config("synth needs at least one reference and one query".into()));
    }
    let dupes = cfg.near_duplicates.min(queries).min(references);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nf = cfg.families.len();
    let (h, w) = (cfg.height, cfg.width);

    let query_layouts: Vec<(usize, Layout)> = (0..queries)
        .map(|i| (i % nf, jittered(&cfg.families[i % nf], cfg.geometry_jitter, &mut rng)))
        .collect();

    let mut scenes = Vec::with_capacity(references + queries);
    for i in 0..references {
        let (layout, geotag) = if i < dupes {
            // Same place as query i, a few meters away.
            let q = &query_layouts[i].1;
            (*q, GeoTag::new(48.0 + 0.01 * i as f64 + 0.00002, 8.0))
        } else {
            let fam = &cfg.families[i % nf];
            (
                jittered(fam, cfg.geometry_jitter, &mut rng),
                GeoTag::new(47.0 + 0.005 * i as f64, 8.0),
            )
        };
        let labels = render(&layout, h, w);
        let logits = ideal_logits(&labels, cfg, &mut rng)?;
        let descriptor = descriptor(&labels, cfg, cfg.reference_descriptor_noise, &mut rng)?;
        scenes.push(Scene {
            id: format!("ref-{i:03}"),
            split: Split::Reference,
            condition: "day".into(),
            labels,
            logits,
            descriptor,
            geotag,
            query_labels: false,
        });
    }
    for (i, (_, layout)) in query_layouts.iter().enumerate() {
        let cond = &cfg.conditions[i % cfg.conditions.len()];
        let mut labels = render(layout, h, w);
        let logits = corrupted_logits(&labels, cfg, cond, &mut rng)?;
        let descriptor = descriptor(&labels, cfg, cfg.query_descriptor_noise, &mut rng)?;
        labels[(h - cfg.hood_rows) * w..].fill(UNDEFINED_ID);
        scenes.push(Scene {
            id: format!("qry-{i:03}"),
            split: Split::Query,
            condition: cond.name.clone(),
            labels,
            logits,
            descriptor,
            geotag: GeoTag::new(48.0 + 0.01 * i as f64, 8.0),
            query_labels: true,
        });
    }

    let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
    mkdir(&out_dir.join("references"))?;
    mkdir(&out_dir.join("queries"))?;
    let mut images = Vec::with_capacity(scenes.len());
    for s in &scenes {
        let sub = match s.split {
            Split::Reference => "references",
            Split::Query => "queries",
        };
        let logits = PathBuf::from(format!("{sub}/{}.logits.npy", s.id));
        let desc = PathBuf::from(format!("{sub}/{}.desc.npy", s.id));
        let labels = PathBuf::from(format!("{sub}/{}.labels.npy", s.id));
        write_logit_map(&s.logits, out_dir.join(&logits))?;
        write_descriptor(&s.descriptor, out_dir.join(&desc))?;
        let grid = LabelGrid::new(h, w, s.labels.clone(), cfg.classes.len(), UNDEFINED_ID)?;
        write_label_grid(&grid, out_dir.join(&labels))?;
        debug_assert!(s.split == Split::Reference || s.query_labels);
        images.push(ImageEntry {
            id: s.id.clone(),
            split: s.split,
            condition: s.condition.clone(),
            logits,
            descriptor: desc,
            labels: Some(labels),
            geotag: Some(s.geotag),
        });
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION,
        schema: ClassSchema {
            classes: cfg.classes.clone(),
            road_class: cfg.classes[ROAD as usize].clone(),
            undefined_id: UNDEFINED_ID,
        },
        images,
        base_dir: out_dir.to_path_buf(),
    };
    manifest.validate()?;
    let manifest_path = out_dir.join("manifest.toml");
    let text = manifest.to_toml();
    fs::write(&manifest_path, &text).map_err(|e| Error::io(&manifest_path, e))?;
    let digest = suite_digest(&manifest_path)?;
    Ok(SynthSuite {
        manifest_path,
        digest,
    })
}

/// SHA-256 over the manifest and every file it references, in order.
pub fn suite_digest(manifest_path: &Path) -> Result<String> {
    let text = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest = crate::manifest::load_manifest(manifest_path, true)?;
    let mut hasher = Sha256::new();
    hasher.update(&text);
    for e in &manifest.images {
        for p in [Some(&e.logits), Some(&e.descriptor), e.labels.as_ref()].into_iter().flatten() {
            let path = manifest.resolve(p);
            hasher.update(p.to_string_lossy().as_bytes());
            hasher.update(fs::read(&path).map_err(|err| Error::io(&path, err))?);
        }
    }
    Ok(hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_parses() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.version, 1);
        assert_eq!(cfg.classes[0], "road");
    }

    #[test]
    fn layouts_contain_every_class() {
        let cfg = SynthConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for fam in &cfg.families {
            let labels = render(&jittered(fam, cfg.geometry_jitter, &mut rng), cfg.height, cfg.width);
            for class in [ROAD, SIDEWALK, BUILDING, SKY] {
                assert!(labels.contains(&class), "family {fam:?} lacks class {class}");
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = SynthConfig::default();
        cfg.conditions[0].bias.pop();
        assert!(cfg.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_suite(&SynthConfig::default(), 1, 0, 1, dir.path()).is_err());
    }

    #[test]
    fn small_suite_is_reproducible() {
        let cfg = SynthConfig::default();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = generate_suite(&cfg, 3, 6, 2, a.path()).unwrap();
        let sb = generate_suite(&cfg, 3, 6, 2, b.path()).unwrap();
        assert_eq!(sa.digest, sb.digest);
        let c = tempfile::tempdir().unwrap();
        assert_ne!(generate_suite(&cfg, 4, 6, 2, c.path()).unwrap().digest, sa.digest);
        let m = crate::manifest::load_manifest(&sa.manifest_path, true).unwrap();
        assert_eq!(m.references().count(), 6);
        assert_eq!(m.queries().count(), 2);
    }
}
