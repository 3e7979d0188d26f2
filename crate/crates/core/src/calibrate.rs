//! Batch-level threshold finding for dynamic merging.
//!
//! Images are pushed through the encoder one block at a time, in lockstep
//! across a batch. At every block the edge scores of all images are pooled
//! and the threshold is set to the `B·r_i`-th largest pooled score, so the
//! batch merges `B·r_i` tokens in total while each image merges however many
//! of its own edges clear the bar. Per-batch thresholds are averaged.

use std::path::Path;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dtome::{desc, select_edges_threshold};
use crate::error::{Error, Result};
use crate::vit::{GrayImage, LayerState, ToyVit};

pub const SIMILARITY_CONVENTION: &str = "cosine-headmean";
pub const PROFILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    /// More merging in early layers.
    Linear,
    /// More merging in late layers.
    ReverseLinear,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            "reverse_linear" | "reverse-linear" => Ok(Self::ReverseLinear),
            other => Err(Error::InvalidArgument(format!(
                "unknown schedule {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MergeSchedule {
    pub kind: ScheduleKind,
    pub r_bar: usize,
}

/// Per-layer merge targets `r_i`. Every schedule spends `L·r_bar` merges in
/// total.
///
/// The linear ramp is `2·r_bar·(L−1−i)/(L−1)`, rounded to the nearest
/// integer and then nudged one unit at a time (largest rounding residual
/// first, ties to the lower layer) until the total matches.
pub fn schedule_targets(s: &MergeSchedule, layers: usize) -> Result<Vec<usize>> {
    if layers == 0 {
        return Err(Error::InvalidArgument(
            "schedule needs at least one layer".into(),
        ));
    }
    if s.kind == ScheduleKind::Constant || layers == 1 {
        return Ok(vec![s.r_bar; layers]);
    }
    let total = layers * s.r_bar;
    let exact: Vec<f64> = (0..layers)
        .map(|i| 2.0 * s.r_bar as f64 * (layers - 1 - i) as f64 / (layers - 1) as f64)
        .collect();
    let mut r: Vec<usize> = exact.iter().map(|v| v.round() as usize).collect();
    let mut sum: usize = r.iter().sum();
    while sum != total {
        // residual = exact − assigned
        let residual = |i: usize, r: &[usize]| exact[i] - r[i] as f64;
        if sum < total {
            let i = (0..layers)
                .max_by(|&a, &b| residual(a, &r).total_cmp(&residual(b, &r)).then(b.cmp(&a)))
                .expect("layers > 0");
            r[i] += 1;
            sum += 1;
        } else {
            let i = (0..layers)
                .filter(|&i| r[i] > 0)
                .min_by(|&a, &b| residual(a, &r).total_cmp(&residual(b, &r)).then(a.cmp(&b)))
                .expect("positive entries exist while sum > total");
            r[i] -= 1;
            sum -= 1;
        }
    }
    if s.kind == ScheduleKind::ReverseLinear {
        r.reverse();
    }
    Ok(r)
}

/// Threshold that keeps exactly `k` of `scores` under the `>=` comparator
/// when scores are distinct: the `k`-th largest score. `k = 0` gives `+∞`
/// and `k >= |scores|` gives `−∞`.
pub fn calibrate_layer(scores: &[f64], k: usize) -> f64 {
    if k == 0 {
        return f64::INFINITY;
    }
    if k >= scores.len() {
        return f64::NEG_INFINITY;
    }
    let mut pool = scores.to_vec();
    let (_, kth, _) = pool.select_nth_unstable_by(k - 1, desc);
    *kth
}

/// Per-layer merge thresholds with calibration metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdProfile {
    pub taus: Vec<f64>,
    pub schedule: MergeSchedule,
    pub batch_size: usize,
    pub num_batches: usize,
    pub corpus_id: String,
    pub similarity_convention: String,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TauRepr {
    Finite(f64),
    Tagged(String),
}

impl TauRepr {
    fn encode(t: f64) -> Self {
        if t == f64::INFINITY {
            Self::Tagged("inf".into())
        } else if t == f64::NEG_INFINITY {
            Self::Tagged("-inf".into())
        } else {
            Self::Finite(t)
        }
    }

    fn decode(self) -> Result<f64> {
        match self {
            Self::Finite(v) => Ok(v),
            Self::Tagged(s) if s == "inf" => Ok(f64::INFINITY),
            Self::Tagged(s) if s == "-inf" => Ok(f64::NEG_INFINITY),
            Self::Tagged(s) => Err(Error::SchemaViolation(format!("bad threshold {s:?}"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProfileFile {
    version: u32,
    taus: Vec<TauRepr>,
    schedule: MergeSchedule,
    batch_size: usize,
    num_batches: usize,
    corpus_id: String,
    similarity: String,
}

impl ThresholdProfile {
    pub fn layers(&self) -> usize {
        self.taus.len()
    }

    pub fn to_json(&self) -> String {
        let file = ProfileFile {
            version: PROFILE_VERSION,
            taus: self.taus.iter().map(|&t| TauRepr::encode(t)).collect(),
            schedule: self.schedule,
            batch_size: self.batch_size,
            num_batches: self.num_batches,
            corpus_id: self.corpus_id.clone(),
            similarity: self.similarity_convention.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("profile serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::SchemaViolation(e.to_string()))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == PROFILE_VERSION as u64 => {}
            other => {
                return Err(Error::SchemaViolation(format!(
                    "unsupported profile version {other:?}"
                )))
            }
        }
        let file: ProfileFile =
            serde_json::from_value(value).map_err(|e| Error::SchemaViolation(e.to_string()))?;
        if file.taus.is_empty() {
            return Err(Error::SchemaViolation("profile has no layers".into()));
        }
        Ok(Self {
            taus: file
                .taus
                .into_iter()
                .map(TauRepr::decode)
                .collect::<Result<_>>()?,
            schedule: file.schedule,
            batch_size: file.batch_size,
            num_batches: file.num_batches,
            corpus_id: file.corpus_id,
            similarity_convention: file.similarity,
        })
    }
}

pub fn save_profile(p: &ThresholdProfile, path: &Path) -> Result<()> {
    std::fs::write(path, p.to_json())?;
    Ok(())
}

pub fn load_profile(path: &Path) -> Result<ThresholdProfile> {
    ThresholdProfile::from_json(&std::fs::read_to_string(path)?)
}

/// What happened at one layer of one calibration batch.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord {
    pub tau: f64,
    /// `B·r_i`.
    pub target: usize,
    /// Edges actually merged across the batch under `>= tau`.
    pub merged: usize,
    pub pool_size: usize,
    /// No two pooled scores are equal.
    pub distinct: bool,
    /// Edges merged by each image.
    pub per_image: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchRecord {
    pub images: Vec<usize>,
    pub layers: Vec<LayerRecord>,
    pub final_counts: Vec<usize>,
}

impl BatchRecord {
    pub fn mean_tokens(&self) -> f64 {
        self.final_counts.iter().sum::<usize>() as f64 / self.final_counts.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub profile: ThresholdProfile,
    pub targets: Vec<usize>,
    pub batches: Vec<BatchRecord>,
}

impl Calibration {
    /// Mean merges per image at each layer over all batches.
    pub fn mean_merged_per_layer(&self) -> Vec<f64> {
        let images: usize = self.batches.iter().map(|b| b.images.len()).sum();
        (0..self.targets.len())
            .map(|l| {
                self.batches
                    .iter()
                    .map(|b| b.layers[l].merged)
                    .sum::<usize>() as f64
                    / images as f64
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct CalibrationOptions {
    pub schedule: MergeSchedule,
    pub batch_size: usize,
    pub num_batches: usize,
    /// Seeds the shuffle that assigns corpus images to batches.
    pub seed: u64,
    pub corpus_id: String,
}

fn mean_threshold(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        values.first().copied().unwrap_or(f64::INFINITY)
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64
    }
}

fn run_batch(
    encoder: &ToyVit,
    images: &[&GrayImage],
    targets: &[usize],
) -> Result<(Vec<f64>, Vec<LayerRecord>, Vec<usize>)> {
    let mut states: Vec<LayerState> = images
        .par_iter()
        .map(|img| encoder.initial_state(img))
        .collect::<Result<_>>()?;
    let b = images.len();
    let mut taus = Vec::with_capacity(targets.len());
    let mut records = Vec::with_capacity(targets.len());
    for (layer, &r) in targets.iter().enumerate() {
        let steps = states
            .par_iter()
            .map(|s| encoder.attention_step(layer, s, true))
            .collect::<Result<Vec<_>>>()?;
        let pool: Vec<f64> = steps.iter().flat_map(|s| s.edges.scores()).collect();
        let target = b * r;
        let tau = calibrate_layer(&pool, target);
        let selected: Vec<_> = steps
            .iter()
            .map(|s| select_edges_threshold(&s.edges, tau))
            .collect();
        let per_image: Vec<usize> = selected.iter().map(|e| e.len()).collect();
        let merged: usize = per_image.iter().sum();
        let mut sorted = pool.clone();
        sorted.sort_by(desc);
        let distinct = sorted.windows(2).all(|w| w[0] != w[1]);
        if merged > target.min(pool.len()) {
            warn!("layer {layer}: tied scores at the threshold merged {merged} edges for a target of {target}");
        }
        if target > pool.len() {
            debug!(
                "layer {layer}: only {} edges for a target of {target}; merging all",
                pool.len()
            );
        }
        states = states
            .into_par_iter()
            .zip(steps.into_par_iter())
            .zip(selected.par_iter())
            .map(|((state, step), sel)| encoder.finish_step(layer, state, step, sel))
            .collect::<Result<_>>()?;
        taus.push(tau);
        records.push(LayerRecord {
            tau,
            target,
            merged,
            pool_size: pool.len(),
            distinct,
            per_image,
        });
    }
    let counts = states.iter().map(|s| s.x.rows()).collect();
    Ok((taus, records, counts))
}

/// Calibrates per-layer thresholds for `encoder` on `corpus`.
pub fn calibrate(
    encoder: &ToyVit,
    corpus: &[GrayImage],
    opts: &CalibrationOptions,
) -> Result<Calibration> {
    if corpus.is_empty() {
        return Err(Error::Calibration("empty corpus".into()));
    }
    if opts.batch_size == 0 || opts.num_batches == 0 {
        return Err(Error::Calibration(
            "batch size and batch count must be positive".into(),
        ));
    }
    let needed = opts.batch_size * opts.num_batches;
    if corpus.len() < needed {
        return Err(Error::Calibration(format!(
            "corpus has {} images, calibration needs {needed}",
            corpus.len()
        )));
    }
    let layers = encoder.cfg.layers;
    let targets = schedule_targets(&opts.schedule, layers)?;

    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));

    let mut per_batch_taus = Vec::with_capacity(opts.num_batches);
    let mut batches = Vec::with_capacity(opts.num_batches);
    for chunk in order[..needed].chunks(opts.batch_size) {
        let images: Vec<&GrayImage> = chunk.iter().map(|&i| &corpus[i]).collect();
        let (taus, layers_rec, final_counts) = run_batch(encoder, &images, &targets)?;
        per_batch_taus.push(taus);
        batches.push(BatchRecord {
            images: chunk.to_vec(),
            layers: layers_rec,
            final_counts,
        });
    }
    let taus = (0..layers)
        .map(|l| mean_threshold(&per_batch_taus.iter().map(|t| t[l]).collect::<Vec<_>>()))
        .collect();
    Ok(Calibration {
        profile: ThresholdProfile {
            taus,
            schedule: opts.schedule,
            batch_size: opts.batch_size,
            num_batches: opts.num_batches,
            corpus_id: opts.corpus_id.clone(),
            similarity_convention: SIMILARITY_CONVENTION.into(),
        },
        targets,
        batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dtome::{Edge, EdgeSet};

    fn sched(kind: ScheduleKind, r_bar: usize) -> MergeSchedule {
        MergeSchedule { kind, r_bar }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(
            schedule_targets(&sched(ScheduleKind::Constant, 3), 4).unwrap(),
            vec![3, 3, 3, 3]
        );
        assert_eq!(
            schedule_targets(&sched(ScheduleKind::Linear, 3), 4).unwrap(),
            vec![6, 4, 2, 0]
        );
        assert_eq!(
            schedule_targets(&sched(ScheduleKind::ReverseLinear, 3), 4).unwrap(),
            vec![0, 2, 4, 6]
        );
        assert_eq!(
            schedule_targets(&sched(ScheduleKind::Linear, 5), 1).unwrap(),
            vec![5]
        );
        assert!(schedule_targets(&sched(ScheduleKind::Constant, 1), 0).is_err());
    }

    #[test]
    fn linear_rounding_is_corrected_to_budget() {
        // exact ramp [2, 1.5, 1, 0.5, 0] rounds to a total of 6
        let r = schedule_targets(&sched(ScheduleKind::Linear, 1), 5).unwrap();
        assert_eq!(r.iter().sum::<usize>(), 5);
        assert_eq!(r, vec![2, 1, 1, 1, 0]);
        for l in 1..15 {
            for r_bar in 0..12 {
                for kind in [
                    ScheduleKind::Constant,
                    ScheduleKind::Linear,
                    ScheduleKind::ReverseLinear,
                ] {
                    let t = schedule_targets(&sched(kind, r_bar), l).unwrap();
                    assert_eq!(
                        t.iter().sum::<usize>(),
                        l * r_bar,
                        "{kind:?} L={l} r={r_bar}"
                    );
                }
            }
        }
    }

    #[test]
    fn calibrate_layer_examples() {
        assert_eq!(calibrate_layer(&[0.9, 0.8, 0.95, 0.2], 2), 0.9);
        assert_eq!(calibrate_layer(&[0.9, 0.8, 0.95, 0.2], 0), f64::INFINITY);
        assert_eq!(
            calibrate_layer(&[0.9, 0.8, 0.95, 0.2], 4),
            f64::NEG_INFINITY
        );
        assert_eq!(calibrate_layer(&[], 1), f64::NEG_INFINITY);
    }

    #[test]
    fn pooled_threshold_hand_example() {
        // image 1 edges {0.9, 0.8}, image 2 edges {0.95, 0.2}, B=2, r=1
        let img1 = EdgeSet(vec![
            Edge {
                src: 1,
                dst: 0,
                score: 0.9,
            },
            Edge {
                src: 3,
                dst: 0,
                score: 0.8,
            },
        ]);
        let img2 = EdgeSet(vec![
            Edge {
                src: 1,
                dst: 0,
                score: 0.95,
            },
            Edge {
                src: 3,
                dst: 2,
                score: 0.2,
            },
        ]);
        let pool: Vec<f64> = img1.scores().chain(img2.scores()).collect();
        let tau = calibrate_layer(&pool, 2);
        assert_eq!(tau, 0.9);
        assert_eq!(select_edges_threshold(&img1, tau).len(), 1);
        assert_eq!(select_edges_threshold(&img2, tau).len(), 1);
    }

    #[test]
    fn mean_threshold_skips_infinities() {
        assert_eq!(mean_threshold(&[0.5, f64::NEG_INFINITY, 0.7]), 0.6);
        assert_eq!(
            mean_threshold(&[f64::INFINITY, f64::INFINITY]),
            f64::INFINITY
        );
    }

    fn profile(taus: Vec<f64>) -> ThresholdProfile {
        ThresholdProfile {
            taus,
            schedule: sched(ScheduleKind::Linear, 4),
            batch_size: 8,
            num_batches: 3,
            corpus_id: "synthetic".into(),
            similarity_convention: SIMILARITY_CONVENTION.into(),
        }
    }

    #[test]
    fn profile_json_layout() {
        let p = profile(vec![f64::INFINITY, 0.25, f64::NEG_INFINITY]);
        let json = p.to_json();
        let compact: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(
            serde_json::to_string(&compact).unwrap(),
            r#"{"batch_size":8,"corpus_id":"synthetic","num_batches":3,"schedule":{"kind":"linear","r_bar":4},"similarity":"cosine-headmean","taus":["inf",0.25,"-inf"],"version":1}"#
        );
        let keys: Vec<usize> = [
            "version",
            "taus",
            "schedule",
            "batch_size",
            "num_batches",
            "corpus_id",
            "similarity",
        ]
        .iter()
        .map(|k| json.find(&format!("\"{k}\"")).unwrap())
        .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]), "field order");
    }

    #[test]
    fn profile_roundtrip_and_schema_errors() {
        let p = profile(vec![0.1 + 0.2, f64::INFINITY, -0.3333333333333333]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_profile(&p, &path).unwrap();
        assert_eq!(load_profile(&path).unwrap(), p);

        let bumped = p.to_json().replace("\"version\": 1", "\"version\": 2");
        assert!(matches!(
            ThresholdProfile::from_json(&bumped),
            Err(Error::SchemaViolation(_))
        ));
        let bad_tau = p.to_json().replace("\"inf\"", "\"infinity\"");
        assert!(matches!(
            ThresholdProfile::from_json(&bad_tau),
            Err(Error::SchemaViolation(_))
        ));
        assert!(matches!(
            load_profile(&dir.path().join("missing.json")),
            Err(Error::Io(_))
        ));
    }
}
