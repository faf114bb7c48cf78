//! Frame-by-frame inference: feature map → (ConvLSTM) → decode → NMS and
//! top-K → descriptors → tracker.
//!
//! Input tensors are `(9 + C)×H×W`: channel 0 is the score map, channels
//! 1..=8 the vertex offsets, the remaining `C` channels the appearance
//! features. Frames are `H·stride × W·stride` image pixels.

use std::path::Path;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::records::read_detections;
use crate::descriptor::{Agd, AppearanceHeadParams, DescriptorExtractor, GeometryEmbedParams, AGD_WIDTH};
use crate::error::{Error, Result};
use crate::geometry::{decode_proposals, nms, DetectionMaps, Quad};
use crate::recurrent::{convlstm_step, ConvLstmParams, ConvLstmState, GruParams};
use crate::tensor::{read_qtns, ParameterSet, Tensor};
use crate::tracker::{top_k, Confirmed, MatchingMode, Tracker, Tracklet};

pub const DETECTION_CHANNELS: usize = 9;
/// Weight range of a seeded ConvLSTM.
const CONVLSTM_INIT_SCALE: f32 = 0.1;

/// Per-stage wall time for one frame.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StageTiming {
    pub load: Duration,
    pub convlstm: Duration,
    pub decode: Duration,
    pub nms: Duration,
    pub descriptors: Duration,
    pub matching: Duration,
    pub update: Duration,
}

impl StageTiming {
    pub const STAGES: [&'static str; 7] = ["load", "convlstm", "decode", "nms", "descriptors", "matching", "update"];

    pub fn values(&self) -> [Duration; 7] {
        [
            self.load,
            self.convlstm,
            self.decode,
            self.nms,
            self.descriptors,
            self.matching,
            self.update,
        ]
    }

    pub fn total(&self) -> Duration {
        self.values().iter().sum()
    }
}

pub struct FrameOutput {
    pub confirmed: Vec<Confirmed>,
    pub descriptors: Vec<Agd>,
    pub timing: StageTiming,
}

struct Models {
    extractor: DescriptorExtractor,
    convlstm: Option<(ConvLstmParams, Option<ConvLstmState>)>,
}

pub struct Pipeline {
    cfg: RunConfig,
    base: std::path::PathBuf,
    models: Option<Models>,
    tracker: Tracker,
    frame_dims: Option<(usize, usize, usize)>,
}

fn load_set(path: &Path) -> Result<ParameterSet> {
    ParameterSet::load(path)
}

impl Pipeline {
    /// The GRU is resolved eagerly because the tracker needs it; the other
    /// models wait for the first frame, which fixes the channel count.
    pub fn new(cfg: &RunConfig, base: &Path) -> Result<Self> {
        cfg.validate(base)?;
        let gru = if cfg.pipeline.matching == MatchingMode::EagdAgd {
            Some(match cfg.model.resolve("gru", base) {
                Some(p) => GruParams::load("gru", &load_set(&p)?)?,
                None => {
                    log::warn!("eagd-agd matching with an untrained, seeded GRU");
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.model.seed.wrapping_add(2));
                    GruParams::init(AGD_WIDTH, AGD_WIDTH, &mut rng)
                }
            })
        } else {
            None
        };
        let tracker = Tracker::new(cfg.tracker, cfg.pipeline.matching, cfg.pipeline.descriptor, gru)?;
        Ok(Self {
            cfg: cfg.clone(),
            base: base.to_path_buf(),
            models: None,
            tracker,
            frame_dims: None,
        })
    }

    fn build_models(&self, channels: usize) -> Result<Models> {
        let seed = self.cfg.model.seed;
        let appearance = match self.cfg.model.resolve("appearance", &self.base) {
            Some(p) => AppearanceHeadParams::load("appearance", &load_set(&p)?)?,
            None => AppearanceHeadParams::init(channels, &mut ChaCha8Rng::seed_from_u64(seed)),
        };
        if appearance.in_channels() != channels {
            return Err(Error::shape(format!(
                "appearance head expects {} channels, feature maps carry {}",
                appearance.in_channels(),
                channels
            )));
        }
        let geometry = match self.cfg.model.resolve("geometry", &self.base) {
            Some(p) => GeometryEmbedParams::<f32>::load("geometry", &load_set(&p)?)?,
            None => GeometryEmbedParams::init(&mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1))),
        };
        let convlstm = if self.cfg.pipeline.use_convlstm {
            let p = match self.cfg.model.resolve("convlstm", &self.base) {
                Some(p) => ConvLstmParams::load("convlstm", &load_set(&p)?)?,
                None => ConvLstmParams::init(
                    channels,
                    channels,
                    3,
                    CONVLSTM_INIT_SCALE,
                    &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(3)),
                ),
            };
            if p.input() != channels || p.hidden() != channels {
                return Err(Error::shape(format!(
                    "ConvLSTM is {}→{}, feature maps carry {} channels",
                    p.input(),
                    p.hidden(),
                    channels
                )));
            }
            Some((p, None))
        } else {
            None
        };
        Ok(Models {
            extractor: DescriptorExtractor {
                appearance,
                geometry,
                stride: self.cfg.detection.stride as f64,
            },
            convlstm,
        })
    }

    /// Loads and processes one manifest frame.
    pub fn process_files(&mut self, feature_map: &Path, detections: Option<&Path>) -> Result<FrameOutput> {
        let t0 = Instant::now();
        let tensor = read_qtns(feature_map)?;
        let dets = detections.map(read_detections).transpose()?;
        let load = t0.elapsed();
        let mut out = self.process(&tensor, dets).map_err(|e| match e {
            Error::Shape(m) => Error::data(feature_map, m),
            other => other,
        })?;
        out.timing.load = load;
        Ok(out)
    }

    /// Processes one in-memory frame. `detections`, when given, replace
    /// the decoded score and offset channels.
    pub fn process(&mut self, tensor: &Tensor<f32>, detections: Option<Vec<Quad>>) -> Result<FrameOutput> {
        let mut timing = StageTiming::default();
        let (c, h, w) = match tensor.shape() {
            [c, h, w] if *c > DETECTION_CHANNELS => (*c, *h, *w),
            s => {
                return Err(Error::shape(format!(
                    "feature maps need {}+C channels, got shape {:?}",
                    DETECTION_CHANNELS, s
                )))
            }
        };
        match self.frame_dims {
            None => {
                self.models = Some(self.build_models(c - DETECTION_CHANNELS)?);
                self.frame_dims = Some((c, h, w));
            }
            Some(d) if d != (c, h, w) => {
                return Err(Error::shape(format!(
                    "frame shape {:?} differs from the first frame's {:?}",
                    [c, h, w],
                    d
                )));
            }
            Some(_) => {}
        }
        let models = self.models.as_mut().expect("built above");
        let stride = self.cfg.detection.stride as f64;
        let theta_l = self.cfg.tracker.theta_l;

        let t = Instant::now();
        let mut features = tensor.slice(0, DETECTION_CHANNELS, c - DETECTION_CHANNELS)?;
        if let Some((p, state)) = &mut models.convlstm {
            let prev = state.take().unwrap_or_else(|| ConvLstmState::zeros(p.hidden(), h, w));
            let (smoothed, next) = convlstm_step(&features, &prev, p)?;
            *state = Some(next);
            features = smoothed;
        }
        timing.convlstm = t.elapsed();

        let t = Instant::now();
        let proposals = match detections {
            Some(d) => d.into_iter().filter(|q| q.score >= theta_l).collect(),
            None => {
                let maps = DetectionMaps::from_tensor(&tensor.slice(0, 0, DETECTION_CHANNELS)?)?;
                decode_proposals(&maps, theta_l, stride)?.proposals
            }
        };
        timing.decode = t.elapsed();

        let t = Instant::now();
        let quads = top_k(&nms(&proposals, self.cfg.detection.nms_iou), self.cfg.tracker.k);
        timing.nms = t.elapsed();

        let t = Instant::now();
        let (fw, fh) = (w as f64 * stride, h as f64 * stride);
        let descriptors = models.extractor.extract(&features, &quads, fw, fh)?;
        timing.descriptors = t.elapsed();

        let confirmed = self.tracker.step(&quads, &descriptors)?;
        let st = self.tracker.last_timing();
        timing.matching = st.matching;
        timing.update = st.update;
        Ok(FrameOutput {
            confirmed,
            descriptors,
            timing,
        })
    }

    pub fn tracklets(&self) -> Vec<&Tracklet> {
        self.tracker.all_tracklets()
    }
}
