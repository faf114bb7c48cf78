//! Descriptor and matching-mode comparison on an occlusion-heavy synthetic
//! benchmark.

use serde::{Deserialize, Serialize};

use super::scenario::{generate_sequence, ScenarioConfig, SyntheticSequence};
use super::train::{toy_train, TrainConfig, TrainedModel};
use crate::descriptor::{geometry_feature, make_agd, Agd, DescriptorLayout, GeometryEmbedParams};
use crate::error::Result;
use crate::metrics::{mot_metrics, HypBox, MotReport};
use crate::recurrent::GruParams;
use crate::tensor::Tensor;
use crate::tracker::{DescriptorMode, MatchingMode, Tracker, TrackerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub train: TrainConfig,
    /// Benchmark sequences; each gets seed `scenario.seed + index`.
    pub sequences: usize,
    pub scenario: ScenarioConfig,
    pub tracker: TrackerConfig,
    /// Score attached to every synthetic detection.
    pub detection_score: f64,
    pub iou_thresh: f64,
}

impl Default for AblationConfig {
    fn default() -> Self {
        // Dense, jittery scenes where pairs of instances share a signature:
        // position alone and appearance alone are each ambiguous.
        let scenario = ScenarioConfig {
            frames: 40,
            instances: 8,
            occlusion_rate: 1.5,
            occlusion_len: [2, 6],
            distinct_signatures: 2,
            signature_scale: 0.25,
            appearance_noise: 0.07,
            position_jitter: 40.0,
            motion: super::Motion::Linear { max_shift: 150.0 },
            render: false,
            seed: 1000,
            ..Default::default()
        };
        let train = TrainConfig {
            scenario: training_scenario(&scenario, 10, 4),
            learning_rate: 1.0,
            identity_init: true,
            ..Default::default()
        };
        Self {
            train,
            sequences: 10,
            scenario,
            tracker: TrackerConfig::default(),
            detection_score: 0.9,
            iou_thresh: 0.5,
        }
    }
}

/// Occlusion-free training episodes drawn from the benchmark's world: same
/// frame size, instance sizes, noise and per-frame speed.
pub fn training_scenario(bench: &ScenarioConfig, frames: usize, instances: usize) -> ScenarioConfig {
    let motion = match bench.motion {
        super::Motion::Linear { max_shift } if bench.frames > 1 => super::Motion::Linear {
            max_shift: max_shift * (frames - 1) as f64 / (bench.frames - 1) as f64,
        },
        m => m,
    };
    ScenarioConfig {
        frames,
        instances,
        motion,
        occlusions: Vec::new(),
        occlusion_rate: 0.0,
        render: false,
        ..bench.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub matching: MatchingMode,
    pub descriptor: DescriptorMode,
    pub report: MotReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub train_accuracy: f64,
}

impl AblationReport {
    pub fn mota(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.name == name).map(|r| r.report.mota)
    }
}

/// Table rows in order: appearance only, geometry only, AGD against AGD,
/// EAGD against AGD.
pub const ABLATION_ROWS: [(&str, MatchingMode, DescriptorMode); 4] = [
    ("appearance-only", MatchingMode::AgdAgd, DescriptorMode::Appearance),
    ("geometry-only", MatchingMode::AgdAgd, DescriptorMode::Geometry),
    ("agd-agd", MatchingMode::AgdAgd, DescriptorMode::Agd),
    ("eagd-agd", MatchingMode::EagdAgd, DescriptorMode::Agd),
];

/// Descriptors of one frame's observations, appearance taken from the
/// synthetic signatures.
pub fn observation_agds(
    seq: &SyntheticSequence,
    frame: usize,
    geometry: &GeometryEmbedParams<f32>,
) -> Result<Vec<Agd>> {
    let (w, h) = seq.frame_size();
    seq.frames[frame]
        .observations
        .iter()
        .enumerate()
        .map(|(k, o)| {
            let fa = Tensor::from_vec(o.appearance.clone())?;
            let fg = geometry_feature(&o.quad, w, h, geometry)?;
            let layout = DescriptorLayout {
                appearance: fa.len(),
                geometry: fg.len(),
            };
            make_agd(&fa, &fg, layout, k)
        })
        .collect()
}

/// Runs one tracker configuration over a sequence and scores it.
pub fn track_sequence(
    seq: &SyntheticSequence,
    model: (&GeometryEmbedParams<f32>, &GruParams<f32>),
    tracker_cfg: &TrackerConfig,
    matching: MatchingMode,
    descriptor: DescriptorMode,
    detection_score: f64,
) -> Result<Vec<HypBox>> {
    let gru = (matching == MatchingMode::EagdAgd).then(|| model.1.clone());
    let mut tracker = Tracker::new(*tracker_cfg, matching, descriptor, gru)?;
    let mut hyp = Vec::new();
    for f in 0..seq.frames.len() {
        let quads: Vec<_> = seq.frames[f]
            .observations
            .iter()
            .map(|o| o.quad.with_score(detection_score))
            .collect();
        let agds = observation_agds(seq, f, model.0)?;
        for c in tracker.step(&quads, &agds)? {
            hyp.push(HypBox {
                frame: c.frame,
                track_id: c.track_id,
                quad: c.quad,
            });
        }
    }
    Ok(hyp)
}

pub fn run_ablation_with(cfg: &AblationConfig, model: &TrainedModel) -> Result<AblationReport> {
    let seqs: Vec<SyntheticSequence> = (0..cfg.sequences)
        .map(|i| {
            generate_sequence(&ScenarioConfig {
                seed: cfg.scenario.seed + i as u64,
                render: false,
                ..cfg.scenario.clone()
            })
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (name, matching, descriptor) in ABLATION_ROWS {
        // Sequences are scored jointly: ids are offset per sequence so one
        // accumulation covers the whole benchmark.
        let mut gt_all = Vec::new();
        let mut hyp_all = Vec::new();
        for (i, seq) in seqs.iter().enumerate() {
            let frame_offset = i * (cfg.scenario.frames + 1);
            let id_offset = (i as u64) << 32;
            for t in &seq.tracks {
                gt_all.push(crate::metrics::GtTrack {
                    id: t.id + id_offset,
                    frames: t.frames.iter().map(|(&f, q)| (f + frame_offset, *q)).collect(),
                });
            }
            let hyp = track_sequence(
                seq,
                (&model.geometry, &model.gru),
                &cfg.tracker,
                matching,
                descriptor,
                cfg.detection_score,
            )?;
            hyp_all.extend(hyp.into_iter().map(|h| HypBox {
                frame: h.frame + frame_offset,
                track_id: h.track_id + id_offset,
                quad: h.quad,
            }));
        }
        rows.push(AblationRow {
            name: name.to_string(),
            matching,
            descriptor,
            report: mot_metrics(&gt_all, &hyp_all, cfg.iou_thresh)?,
        });
    }
    Ok(AblationReport {
        rows,
        train_accuracy: model.report.accuracy,
    })
}

pub fn run_ablation(cfg: &AblationConfig) -> Result<AblationReport> {
    let model = toy_train(&cfg.train)?;
    run_ablation_with(cfg, &model)
}
