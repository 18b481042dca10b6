//! Batch pipeline over a manifest: retrieval, template construction, fusion
//! and evaluation for every query image.
//!
//! All shared state (index, reference cache) is read-only once built, and
//! frames are processed independently, so results do not depend on the
//! worker count.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::{
    aggregate, iou_counts, summary_table, write_frames_csv, DatasetReport, FrameReport,
    IouAggregation, Method, MethodScore,
};
use crate::fusion::{
    average_class_confidence, fuse, gt_to_pseudologits, prior_only_predict, Coverages,
    FusedResult, FusionConfig, TemplateCoverage,
};
use crate::io::{read_descriptor, read_label_grid, read_logit_map, write_class_grid, write_logit_map};
use crate::manifest::{DatasetManifest, ImageEntry};
use crate::prior::{
    build_template, class_coverage, class_std, coverage_over_set, MeanAccumulator, TemplatePrior,
};
use crate::retrieval::{
    build_index, retrieve_similar, DescriptorIndex, GeoExclusion, RetrievalResult,
    DEFAULT_EXCLUSION_RADIUS_M,
};
use crate::tensor::{LabelGrid, LogitMap};

/// Engine settings beyond the fusion parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineConfig {
    pub fusion: FusionConfig<f64>,
    pub geo_radius_m: f64,
    pub aggregation: IouAggregation,
    /// Per-class confidences for ground-truth pseudo-logits; estimated from
    /// the reference logits when absent.
    pub class_confidence: Option<Vec<f64>>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            fusion: FusionConfig::default(),
            geo_radius_m: DEFAULT_EXCLUSION_RADIUS_M,
            aggregation: IouAggregation::PerFrame,
            class_confidence: None,
        }
    }
}

/// Everything computed for one query frame.
#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub id: String,
    pub query: LogitMap<f64>,
    pub retrieval: RetrievalResult<f64>,
    pub template: TemplatePrior<f64>,
    pub coverages: Coverages<f64>,
    pub fused: FusedResult<f64>,
}

/// A frame id and the error that stopped it.
pub type FrameFailure = (String, Error);

/// Frames processed successfully plus the errors of those that were not.
#[derive(Debug)]
pub struct BatchOutcome<T> {
    pub frames: Vec<T>,
    pub failures: Vec<FrameFailure>,
}

impl<T> BatchOutcome<T> {
    fn from_results(results: Vec<(String, Result<T>)>) -> Self {
        let mut frames = Vec::new();
        let mut failures = Vec::new();
        for (id, r) in results {
            match r {
                Ok(v) => frames.push(v),
                Err(e) => {
                    warn!("frame {id} failed: {e}");
                    failures.push((id, e));
                }
            }
        }
        Self { frames, failures }
    }
}

#[allow(clippy::type_complexity)]
pub struct Engine {
    manifest: DatasetManifest,
    index: DescriptorIndex<f64>,
    cfg: EngineConfig,
    num_classes: usize,
    logits: Mutex<HashMap<String, Arc<LogitMap<f64>>>>,
    labels: Mutex<HashMap<String, Arc<LabelGrid>>>,
    /// Dataset-average templates keyed by `(height, width)`.
    dataset_avg: Mutex<HashMap<(usize, usize), Arc<TemplatePrior<f64>>>>,
    confidence: Mutex<Option<Arc<Vec<f64>>>>,
}

impl Engine {
    pub fn new(manifest: DatasetManifest, cfg: EngineConfig) -> Result<Self> {
        let num_classes = manifest.schema.num_classes();
        cfg.fusion.validate(num_classes)?;
        if cfg.geo_radius_m.is_nan() || cfg.geo_radius_m < 0.0 {
            return Err(Error::Config(format!(
                "geo radius must be non-negative, got {}",
                cfg.geo_radius_m
            )));
        }
        if let Some(conf) = &cfg.class_confidence {
            if conf.len() != num_classes {
                return Err(Error::Config(format!(
                    "{} class confidences for {num_classes} classes",
                    conf.len()
                )));
            }
        }
        let index = build_index(&manifest)?;
        info!(
            "indexed {} descriptors, dims {}, {} geotagged",
            index.len(),
            index.dims(),
            index.geotagged()
        );
        Ok(Self {
            manifest,
            index,
            cfg,
            num_classes,
            logits: Mutex::default(),
            labels: Mutex::default(),
            dataset_avg: Mutex::default(),
            confidence: Mutex::default(),
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn index(&self) -> &DescriptorIndex<f64> {
        &self.index
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    fn entry(&self, id: &str) -> Result<&ImageEntry> {
        self.manifest
            .get(id)
            .ok_or_else(|| Error::Manifest(format!("unknown image id {id:?}")))
    }

    fn load_logits(&self, entry: &ImageEntry) -> Result<LogitMap<f64>> {
        let map: LogitMap<f64> = read_logit_map(self.manifest.resolve(&entry.logits))?;
        if map.num_classes() != self.num_classes {
            return Err(Error::ClassCountMismatch {
                expected: self.num_classes,
                found: map.num_classes(),
            });
        }
        Ok(map)
    }

    fn reference_logits(&self, id: &str) -> Result<Arc<LogitMap<f64>>> {
        if let Some(m) = self.logits.lock().unwrap().get(id) {
            return Ok(Arc::clone(m));
        }
        let map = Arc::new(self.load_logits(self.entry(id)?)?);
        self.logits
            .lock()
            .unwrap()
            .insert(id.to_string(), Arc::clone(&map));
        Ok(map)
    }

    fn labels_of(&self, entry: &ImageEntry) -> Result<Arc<LabelGrid>> {
        if let Some(l) = self.labels.lock().unwrap().get(&entry.id) {
            return Ok(Arc::clone(l));
        }
        let path = entry
            .labels
            .as_ref()
            .ok_or_else(|| Error::MissingLabels(entry.id.clone()))?;
        let grid = Arc::new(read_label_grid(
            self.manifest.resolve(path),
            &self.manifest.schema,
        )?);
        self.labels
            .lock()
            .unwrap()
            .insert(entry.id.clone(), Arc::clone(&grid));
        Ok(grid)
    }

    /// Mean of all reference logits at the given resolution, computed once.
    pub fn dataset_avg(&self, height: usize, width: usize) -> Result<Arc<TemplatePrior<f64>>> {
        let mut cache = self.dataset_avg.lock().unwrap();
        if let Some(t) = cache.get(&(height, width)) {
            return Ok(Arc::clone(t));
        }
        let mut acc = MeanAccumulator::default();
        let mut ids = Vec::new();
        for e in self.manifest.references() {
            acc.push(&self.load_logits(e)?, height, width)?;
            ids.push(e.id.clone());
        }
        let template = Arc::new(TemplatePrior {
            mean_logits: acc.finish()?,
            source_ids: ids,
        });
        cache.insert((height, width), Arc::clone(&template));
        Ok(template)
    }

    fn class_confidence(&self) -> Result<Arc<Vec<f64>>> {
        if let Some(c) = &self.cfg.class_confidence {
            return Ok(Arc::new(c.clone()));
        }
        let mut slot = self.confidence.lock().unwrap();
        if let Some(c) = slot.as_ref() {
            return Ok(Arc::clone(c));
        }
        let maps = self
            .manifest
            .references()
            .map(|e| self.load_logits(e))
            .collect::<Result<Vec<_>>>()?;
        let conf = Arc::new(average_class_confidence(maps.iter())?);
        *slot = Some(Arc::clone(&conf));
        Ok(conf)
    }

    fn query_entries(&self) -> Vec<&ImageEntry> {
        self.manifest.queries().collect()
    }

    /// Ranked references for a query, `m` deep.
    pub fn retrieve(&self, entry: &ImageEntry, m: usize) -> Result<RetrievalResult<f64>> {
        let desc = read_descriptor::<f64>(self.manifest.resolve(&entry.descriptor))?;
        let exclusion = GeoExclusion::around(entry.geotag, self.cfg.geo_radius_m);
        retrieve_similar(&self.index, &entry.id, &desc, m, &exclusion)
    }

    fn fusion_cfg(&self, ell: usize) -> FusionConfig<f64> {
        FusionConfig {
            ell,
            ..self.cfg.fusion.clone()
        }
    }

    /// Builds the template and fuses for one query, given a retrieval at
    /// least `ell` deep (shorter lists use what is available).
    pub fn fuse_query(
        &self,
        entry: &ImageEntry,
        query: LogitMap<f64>,
        retrieval: &RetrievalResult<f64>,
        ell: usize,
    ) -> Result<QueryOutcome> {
        let cfg = self.fusion_cfg(ell);
        let (h, w) = (query.height(), query.width());
        let set_ids: Vec<&str> = retrieval.top(ell).iter().map(|n| n.id.as_str()).collect();
        if set_ids.len() < ell {
            warn!(
                "{}: only {} eligible references for ell={ell}",
                entry.id,
                set_ids.len()
            );
        }
        let set_maps = set_ids
            .iter()
            .map(|id| self.reference_logits(id))
            .collect::<Result<Vec<_>>>()?;
        let k = cfg.k.min(set_maps.len());
        let sources: Vec<(&str, &LogitMap<f64>)> = set_ids[..k]
            .iter()
            .zip(&set_maps[..k])
            .map(|(id, m)| (*id, m.as_ref()))
            .collect();
        let template = build_template(&sources, h, w)?;

        let coverages = Coverages {
            query: class_coverage(&query),
            template: match cfg.template_coverage {
                TemplateCoverage::PerReference => {
                    coverage_over_set(set_maps[..k].iter().map(|m| m.as_ref()))?
                }
                TemplateCoverage::TemplateArgmax => class_coverage(&template.mean_logits),
            },
            set: coverage_over_set(set_maps.iter().map(|m| m.as_ref()))?,
        };
        let stats_q = class_std(&query);
        let stats_s = class_std(&template.mean_logits);
        let fused = fuse(&query, &template, &stats_q, &stats_s, &coverages, &cfg)?;
        Ok(QueryOutcome {
            id: entry.id.clone(),
            query,
            retrieval: retrieval.clone(),
            template,
            coverages,
            fused,
        })
    }

    pub fn process_query(&self, entry: &ImageEntry) -> Result<QueryOutcome> {
        let ell = self.cfg.fusion.ell;
        let retrieval = self.retrieve(entry, ell)?;
        let query = self.load_logits(entry)?;
        self.fuse_query(entry, query, &retrieval, ell)
    }

    /// Fusion with a template built from the ground truth of the top-k
    /// references. `None` when any of them has no labels.
    fn gt_prior_fusion(&self, outcome: &QueryOutcome, ell: usize) -> Result<Option<FusedResult<f64>>> {
        let cfg = self.fusion_cfg(ell);
        let conf = self.class_confidence()?;
        let mut pseudo = Vec::new();
        for id in &outcome.template.source_ids {
            let entry = self.entry(id)?;
            if entry.labels.is_none() {
                return Ok(None);
            }
            let labels = self.labels_of(entry)?;
            pseudo.push((id.as_str(), gt_to_pseudologits(&labels, &conf)?));
        }
        let sources: Vec<(&str, &LogitMap<f64>)> = pseudo.iter().map(|(id, m)| (*id, m)).collect();
        let (h, w) = (outcome.query.height(), outcome.query.width());
        let template = build_template(&sources, h, w)?;
        let stats_q = class_std(&outcome.query);
        let stats_s = class_std(&template.mean_logits);
        fuse(&outcome.query, &template, &stats_q, &stats_s, &outcome.coverages, &cfg).map(Some)
    }

    fn evaluate_outcome(
        &self,
        entry: &ImageEntry,
        outcome: &QueryOutcome,
        methods: &[Method],
        ell: usize,
    ) -> Result<FrameReport> {
        let gt = self.labels_of(entry)?;
        let target = u8::try_from(self.cfg.fusion.road_class)
            .map_err(|_| Error::Config("target class exceeds 8 bits".into()))?;
        let undefined = self.manifest.schema.undefined_id;
        let score = |pred: &crate::tensor::ClassGrid| -> Result<Option<MethodScore>> {
            Ok(Some(MethodScore {
                counts: iou_counts(pred, &gt, target, undefined)?,
            }))
        };
        let mut scores = BTreeMap::new();
        for &method in methods {
            let s = match method {
                Method::Query => score(&outcome.query.argmax())?,
                Method::DatasetAvg => {
                    let avg = self.dataset_avg(outcome.query.height(), outcome.query.width())?;
                    score(&prior_only_predict(&avg))?
                }
                Method::PriorOnly => score(&prior_only_predict(&outcome.template))?,
                Method::PriorQuery => score(&outcome.fused.prediction)?,
                Method::GtPrior => match self.gt_prior_fusion(outcome, ell)? {
                    Some(f) => score(&f.prediction)?,
                    None => None,
                },
            };
            scores.insert(method, s);
        }
        Ok(FrameReport {
            id: entry.id.clone(),
            condition: entry.condition.clone(),
            scores,
            retrieved: outcome
                .template
                .source_ids
                .iter()
                .zip(outcome.retrieval.ranked.iter())
                .map(|(id, n)| (id.clone(), n.distance))
                .collect(),
        })
    }

    pub fn evaluate_frame(&self, entry: &ImageEntry, methods: &[Method]) -> Result<FrameReport> {
        let outcome = self.process_query(entry)?;
        self.evaluate_outcome(entry, &outcome, methods, self.cfg.fusion.ell)
    }

    fn pool(workers: usize) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))
    }

    fn par_map<T: Send>(
        &self,
        workers: usize,
        f: impl Fn(&ImageEntry) -> Result<T> + Sync,
    ) -> Result<BatchOutcome<T>> {
        let entries = self.query_entries();
        let results = Self::pool(workers)?.install(|| {
            entries
                .par_iter()
                .map(|e| (e.id.clone(), f(e)))
                .collect::<Vec<_>>()
        });
        Ok(BatchOutcome::from_results(results))
    }

    pub fn fuse_all(&self, workers: usize) -> Result<BatchOutcome<QueryOutcome>> {
        self.par_map(workers, |e| self.process_query(e))
    }

    pub fn evaluate_all(&self, methods: &[Method], workers: usize) -> Result<BatchOutcome<FrameReport>> {
        self.manifest.require_query_labels()?;
        self.par_map(workers, |e| self.evaluate_frame(e, methods))
    }

    /// Mean Prior+Query IoU for each `ell`; retrieval runs once per query at
    /// the largest `ell`.
    pub fn sweep_ell(&self, ells: &[usize], workers: usize) -> Result<(Vec<SweepRow>, Vec<FrameFailure>)> {
        if ells.is_empty() {
            return Err(Error::Config("sweep needs at least one ell value".into()));
        }
        if let Some(&bad) = ells.iter().find(|&&l| l <= self.cfg.fusion.k) {
            return Err(Error::Config(format!(
                "ell={bad} must exceed k={}",
                self.cfg.fusion.k
            )));
        }
        self.manifest.require_query_labels()?;
        let deepest = *ells.iter().max().unwrap();
        let per_frame = self.par_map(workers, |entry| {
            let retrieval = self.retrieve(entry, deepest)?;
            let query = self.load_logits(entry)?;
            ells.iter()
                .map(|&ell| {
                    let outcome = self.fuse_query(entry, query.clone(), &retrieval, ell)?;
                    self.evaluate_outcome(entry, &outcome, &[Method::PriorQuery], ell)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let rows = ells
            .iter()
            .enumerate()
            .map(|(i, &ell)| {
                let frames: Vec<FrameReport> =
                    per_frame.frames.iter().map(|f| f[i].clone()).collect();
                let report = aggregate(&frames, self.cfg.aggregation);
                let summary = &report.overall[&Method::PriorQuery];
                SweepRow {
                    ell,
                    mean_iou: summary.mean_iou,
                    defined: summary.defined,
                }
            })
            .collect();
        Ok((rows, per_frame.failures))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub ell: usize,
    pub mean_iou: Option<f64>,
    pub defined: usize,
}

/// File-name-safe form of an image id.
pub fn file_stem(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Provenance echo written next to every run's outputs.
#[derive(Debug, Serialize)]
struct ConfigEcho<'a> {
    command: &'a str,
    manifest: String,
    methods: Vec<&'static str>,
    ells: Vec<usize>,
    engine: &'a EngineConfig,
}

pub fn write_config_echo(
    out_dir: &Path,
    command: &str,
    manifest_path: &Path,
    engine: &EngineConfig,
    methods: &[Method],
    ells: &[usize],
) -> Result<()> {
    ensure_dir(out_dir)?;
    let echo = ConfigEcho {
        command,
        manifest: manifest_path.display().to_string(),
        methods: methods.iter().map(|m| m.name()).collect(),
        ells: ells.to_vec(),
        engine,
    };
    let text = toml::to_string(&echo).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&out_dir.join("run_config.toml"), &text)
}

/// Writes `fused/<id>.logits.npy`, `fused/<id>.pred.npy` and
/// `fuse_summary.csv`.
pub fn write_fuse_outputs(out_dir: &Path, outcomes: &[QueryOutcome], road_class: usize) -> Result<Vec<PathBuf>> {
    let fused_dir = out_dir.join("fused");
    ensure_dir(&fused_dir)?;
    let mut written = Vec::new();
    let mut summary = String::from("id,template_ids,omega_target,candidates,target_pixels\n");
    for o in outcomes {
        let stem = file_stem(&o.id);
        let logits = fused_dir.join(format!("{stem}.logits.npy"));
        let pred = fused_dir.join(format!("{stem}.pred.npy"));
        write_logit_map(&o.fused.fused_logits, &logits)?;
        write_class_grid(&o.fused.prediction, &pred)?;
        let target_px = o
            .fused
            .prediction
            .classes()
            .iter()
            .filter(|&&c| c as usize == road_class)
            .count();
        summary.push_str(&format!(
            "{},{},{:.6},{},{}\n",
            o.id,
            o.template.source_ids.join(";"),
            o.fused.omega[road_class],
            o.fused.candidate_mask.count(),
            target_px
        ));
        written.push(logits);
        written.push(pred);
    }
    let summary_path = out_dir.join("fuse_summary.csv");
    write_text(&summary_path, &summary)?;
    written.push(summary_path);
    Ok(written)
}

/// Writes `frames.csv` and `summary.txt`; returns the aggregate.
pub fn write_eval_outputs(out_dir: &Path, frames: &[FrameReport], aggregation: IouAggregation) -> Result<DatasetReport> {
    ensure_dir(out_dir)?;
    let path = out_dir.join("frames.csv");
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    write_frames_csv(std::io::BufWriter::new(file), frames)?;
    let report = aggregate(frames, aggregation);
    write_text(&out_dir.join("summary.txt"), &summary_table(&report))?;
    Ok(report)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("ell,mean_iou,defined_frames\n");
    for r in rows {
        let v = r.mean_iou.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!("{},{},{}\n", r.ell, v, r.defined));
    }
    out
}

pub fn write_sweep_outputs(out_dir: &Path, rows: &[SweepRow]) -> Result<()> {
    ensure_dir(out_dir)?;
    write_text(&out_dir.join("sweep.csv"), &sweep_csv(rows))
}
