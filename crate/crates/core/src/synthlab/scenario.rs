//! Seeded synthetic video: text-like quads moving linearly over a noisy
//! feature map, with scripted occlusions.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{encode_targets, intersection_area, DetectionMaps, Point, Quad};
use crate::metrics::GtTrack;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Motion {
    Static,
    /// Each instance drifts by at most `max_shift` pixels per axis over the
    /// whole sequence.
    Linear {
        max_shift: f64,
    },
    /// Two instances on separate rows swap their horizontal order.
    Crossing,
}

/// Instance `instance` is invisible for frames `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Occlusion {
    pub instance: usize,
    pub start: usize,
    pub end: usize,
}

/// Explicit placement of one instance; centres are in image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceSpec {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub size: [f64; 2],
    pub angle: f64,
    pub signature: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub frames: usize,
    /// Frame size in image pixels; both must be multiples of `stride`.
    pub width: usize,
    pub height: usize,
    pub stride: usize,
    /// Feature-map channels; channel `c` renders signature entry `c`.
    pub channels: usize,
    pub instances: usize,
    pub motion: Motion,
    pub occlusions: Vec<Occlusion>,
    /// Expected number of random occlusion windows per instance.
    pub occlusion_rate: f64,
    pub occlusion_len: [usize; 2],
    /// Number of distinct appearance signatures; instances reuse them
    /// cyclically. Zero gives every instance its own.
    pub distinct_signatures: usize,
    pub signature_width: usize,
    /// Signature entries are uniform in `[-scale, scale]`.
    pub signature_scale: f32,
    pub background_noise: f32,
    /// Per-frame uniform noise added to each observed signature.
    pub appearance_noise: f32,
    /// Per-frame uniform displacement of each observed centre, in pixels.
    pub position_jitter: f64,
    pub min_size: [f64; 2],
    pub max_size: [f64; 2],
    pub max_angle: f64,
    /// Replaces random placement when non-empty.
    pub layout: Vec<InstanceSpec>,
    /// Render feature maps and detection maps; observations are always kept.
    pub render: bool,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            frames: 20,
            width: 512,
            height: 512,
            stride: 4,
            channels: 8,
            instances: 3,
            motion: Motion::Linear { max_shift: 120.0 },
            occlusions: Vec::new(),
            occlusion_rate: 0.0,
            occlusion_len: [2, 5],
            distinct_signatures: 0,
            signature_width: 128,
            signature_scale: 0.5,
            background_noise: 0.1,
            appearance_noise: 0.05,
            position_jitter: 0.0,
            min_size: [60.0, 14.0],
            max_size: [140.0, 30.0],
            max_angle: 0.25,
            layout: Vec::new(),
            render: true,
            seed: 0,
        }
    }
}

impl ScenarioConfig {
    pub fn static_single(frames: usize, seed: u64) -> Self {
        Self {
            frames,
            instances: 1,
            motion: Motion::Static,
            seed,
            ..Default::default()
        }
    }

    pub fn crossing(frames: usize, seed: u64) -> Self {
        Self {
            frames,
            instances: 2,
            motion: Motion::Crossing,
            seed,
            ..Default::default()
        }
    }

    pub fn map_size(&self) -> (usize, usize) {
        (self.height / self.stride, self.width / self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::usage(m));
        if self.frames == 0 || self.stride == 0 || self.width == 0 || self.height == 0 {
            return bad("scenario needs frames, frame size and stride".into());
        }
        if !self.width.is_multiple_of(self.stride) || !self.height.is_multiple_of(self.stride) {
            return bad(format!(
                "frame {}×{} is not a multiple of stride {}",
                self.width, self.height, self.stride
            ));
        }
        if self.channels == 0 || self.channels > self.signature_width {
            return bad(format!(
                "channels ({}) must be between 1 and the signature width ({})",
                self.channels, self.signature_width
            ));
        }
        if self.motion == Motion::Crossing && self.layout.is_empty() && self.instances != 2 {
            return bad("the crossing scenario has exactly two instances".into());
        }
        let n = if self.layout.is_empty() {
            self.instances
        } else {
            self.layout.len()
        };
        for o in &self.occlusions {
            if o.instance >= n || o.start >= o.end || o.end > self.frames {
                return bad(format!("occlusion {:?} is outside the scenario", o));
            }
        }
        if self.occlusion_len[0] == 0 || self.occlusion_len[0] > self.occlusion_len[1] {
            return bad(format!("occlusion length range {:?} is empty", self.occlusion_len));
        }
        if !(self.background_noise >= 0.0
            && self.appearance_noise >= 0.0
            && self.occlusion_rate >= 0.0
            && self.signature_scale >= 0.0
            && self.position_jitter >= 0.0)
        {
            return bad("noise levels and occlusion rate must be non-negative".into());
        }
        if !(self.min_size[0] > 0.0 && self.min_size[1] > 0.0)
            || self.min_size[0] > self.max_size[0]
            || self.min_size[1] > self.max_size[1]
        {
            return bad(format!("size range {:?}..{:?} is empty", self.min_size, self.max_size));
        }
        Ok(())
    }
}

/// One visible instance in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub id: u64,
    pub quad: Quad,
    /// Signature plus this frame's appearance noise.
    pub appearance: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticFrame {
    /// C×H×W; absent when rendering is disabled.
    pub feature_map: Option<Tensor<f32>>,
    pub maps: Option<DetectionMaps>,
    pub observations: Vec<Observation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub config: ScenarioConfig,
    pub instances: Vec<InstanceSpec>,
    pub signatures: Vec<Vec<f32>>,
    pub frames: Vec<SyntheticFrame>,
    pub tracks: Vec<GtTrack>,
}

impl SyntheticSequence {
    /// SHA-256 over every rendered value and observation, in frame order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for f in &self.frames {
            if let Some(t) = &f.feature_map {
                for v in t.data() {
                    h.update(v.to_le_bytes());
                }
            }
            if let Some(m) = &f.maps {
                for v in m.score.data().iter().chain(m.offsets.data()) {
                    h.update(v.to_le_bytes());
                }
            }
            for o in &f.observations {
                h.update(o.id.to_le_bytes());
                for c in o.quad.coords() {
                    h.update(c.to_le_bytes());
                }
                for v in &o.appearance {
                    h.update(v.to_le_bytes());
                }
            }
        }
        hex::encode(h.finalize())
    }

    pub fn frame_size(&self) -> (f64, f64) {
        (self.config.width as f64, self.config.height as f64)
    }
}

/// Rectangle of `size` rotated by `angle` about `centre`, clockwise from the
/// top-left corner.
pub fn oriented_rect(centre: [f64; 2], size: [f64; 2], angle: f64) -> Quad {
    let (s, c) = angle.sin_cos();
    let (hw, hh) = (size[0] / 2.0, size[1] / 2.0);
    let corners = [(-hw, -hh), (hw, -hh), (hw, hh), (-hw, hh)];
    let v = corners.map(|(x, y)| Point::new(centre[0] + x * c - y * s, centre[1] + x * s + y * c));
    Quad::new(v, 1.0)
}

impl InstanceSpec {
    pub fn centre_at(&self, frame: usize, frames: usize) -> [f64; 2] {
        let t = if frames <= 1 {
            0.0
        } else {
            frame as f64 / (frames - 1) as f64
        };
        [
            self.start[0] + (self.end[0] - self.start[0]) * t,
            self.start[1] + (self.end[1] - self.start[1]) * t,
        ]
    }

    pub fn quad_at(&self, frame: usize, frames: usize) -> Quad {
        oriented_rect(self.centre_at(frame, frames), self.size, self.angle)
    }
}

fn inside(q: &Quad, w: f64, h: f64) -> bool {
    let (x0, y0, x1, y1) = q.bounds();
    x0 >= 0.0 && y0 >= 0.0 && x1 <= w && y1 <= h
}

fn place_instances(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Result<Vec<InstanceSpec>> {
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let signature = |i: usize| {
        if cfg.distinct_signatures == 0 {
            i
        } else {
            i % cfg.distinct_signatures
        }
    };
    if cfg.motion == Motion::Crossing {
        let size = [cfg.max_size[0].min(w * 0.3), cfg.max_size[1].min(h * 0.2)];
        return Ok(vec![
            InstanceSpec {
                start: [w * 0.25, h * 0.35],
                end: [w * 0.75, h * 0.35],
                size,
                angle: 0.0,
                signature: signature(0),
            },
            InstanceSpec {
                start: [w * 0.75, h * 0.65],
                end: [w * 0.25, h * 0.65],
                size,
                angle: 0.0,
                signature: signature(1),
            },
        ]);
    }
    let mut placed: Vec<InstanceSpec> = Vec::with_capacity(cfg.instances);
    for i in 0..cfg.instances {
        let mut attempt = 0;
        loop {
            attempt += 1;
            if attempt > 2000 {
                return Err(Error::usage(format!(
                    "cannot place {} non-overlapping instances in a {}×{} frame",
                    cfg.instances, cfg.width, cfg.height
                )));
            }
            let size = [
                rng.random_range(cfg.min_size[0]..=cfg.max_size[0]),
                rng.random_range(cfg.min_size[1]..=cfg.max_size[1]),
            ];
            let angle = if cfg.max_angle > 0.0 {
                rng.random_range(-cfg.max_angle..=cfg.max_angle)
            } else {
                0.0
            };
            let start = [rng.random_range(0.0..w), rng.random_range(0.0..h)];
            let end = match cfg.motion {
                Motion::Linear { max_shift } if max_shift > 0.0 => [
                    start[0] + rng.random_range(-max_shift..=max_shift),
                    start[1] + rng.random_range(-max_shift..=max_shift),
                ],
                _ => start,
            };
            let spec = InstanceSpec {
                start,
                end,
                size,
                angle,
                signature: signature(i),
            };
            let (q0, q1) = (spec.quad_at(0, 2), spec.quad_at(1, 2));
            if !inside(&q0, w, h) || !inside(&q1, w, h) {
                continue;
            }
            if placed.iter().any(|p| intersection_area(&p.quad_at(0, 2), &q0) > 0.0) {
                continue;
            }
            placed.push(spec);
            break;
        }
    }
    Ok(placed)
}

fn random_signature(rng: &mut ChaCha8Rng, width: usize, scale: f32) -> Vec<f32> {
    (0..width).map(|_| rng.random_range(-scale..=scale)).collect()
}

pub fn generate_sequence(cfg: &ScenarioConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let instances = if cfg.layout.is_empty() {
        place_instances(cfg, &mut rng)?
    } else {
        let quads: Vec<Quad> = cfg.layout.iter().map(|s| s.quad_at(0, cfg.frames)).collect();
        for q in &quads {
            q.validate()?;
        }
        for i in 0..quads.len() {
            for j in 0..i {
                if intersection_area(&quads[i], &quads[j]) > 0.0 {
                    return Err(Error::usage(format!("instances {} and {} overlap at spawn", j, i)));
                }
            }
        }
        cfg.layout.clone()
    };
    let n_sig = instances.iter().map(|s| s.signature + 1).max().unwrap_or(0);
    let signatures: Vec<Vec<f32>> = (0..n_sig)
        .map(|_| random_signature(&mut rng, cfg.signature_width, cfg.signature_scale))
        .collect();

    let mut occlusions = cfg.occlusions.clone();
    if cfg.occlusion_rate > 0.0 && cfg.frames > 2 {
        for i in 0..instances.len() {
            let mut budget = cfg.occlusion_rate;
            while budget > 0.0 {
                if rng.random_range(0.0..1.0) < budget.min(1.0) {
                    let len = rng.random_range(cfg.occlusion_len[0]..=cfg.occlusion_len[1]);
                    let len = len.min(cfg.frames - 2);
                    // Never hide the first frame so every instance is born visible.
                    let start = rng.random_range(1..=cfg.frames - 1 - len);
                    occlusions.push(Occlusion {
                        instance: i,
                        start,
                        end: start + len,
                    });
                }
                budget -= 1.0;
            }
        }
    }
    let hidden = |i: usize, f: usize| {
        occlusions
            .iter()
            .any(|o| o.instance == i && (o.start..o.end).contains(&f))
    };

    let (mh, mw) = cfg.map_size();
    let stride = cfg.stride as f64;
    let mut frames = Vec::with_capacity(cfg.frames);
    let mut tracks: Vec<GtTrack> = (0..instances.len())
        .map(|i| GtTrack {
            id: i as u64,
            frames: BTreeMap::new(),
        })
        .collect();
    for f in 0..cfg.frames {
        let mut observations = Vec::new();
        for (i, spec) in instances.iter().enumerate() {
            let mut quad = spec.quad_at(f, cfg.frames);
            if !inside(&quad, w, h) {
                return Err(Error::usage(format!("instance {} leaves the frame at frame {}", i, f)));
            }
            let j = cfg.position_jitter;
            if j > 0.0 {
                let c = spec.centre_at(f, cfg.frames);
                let moved = [c[0] + rng.random_range(-j..=j), c[1] + rng.random_range(-j..=j)];
                let q = oriented_rect(moved, spec.size, spec.angle);
                // Near the border the unjittered quad is kept.
                if inside(&q, w, h) {
                    quad = q;
                }
            }
            let noise = cfg.appearance_noise;
            let appearance = signatures[spec.signature]
                .iter()
                .map(|&s| {
                    if noise > 0.0 {
                        s + rng.random_range(-noise..=noise)
                    } else {
                        s
                    }
                })
                .collect();
            if hidden(i, f) {
                continue;
            }
            tracks[i].frames.insert(f, quad);
            observations.push(Observation {
                id: i as u64,
                quad,
                appearance,
            });
        }

        let (feature_map, maps) = if cfg.render {
            let plane = mh * mw;
            let bg = cfg.background_noise;
            let mut data: Vec<f32> = (0..cfg.channels * plane)
                .map(|_| if bg > 0.0 { rng.random_range(-bg..=bg) } else { 0.0 })
                .collect();
            for o in &observations {
                let (x0, y0, x1, y1) = o.quad.bounds();
                let c0 = ((x0 / stride - 0.5).floor().max(0.0)) as usize;
                let r0 = ((y0 / stride - 0.5).floor().max(0.0)) as usize;
                let c1 = ((x1 / stride - 0.5).ceil().max(0.0) as usize).min(mw - 1);
                let r1 = ((y1 / stride - 0.5).ceil().max(0.0) as usize).min(mh - 1);
                for row in r0..=r1 {
                    for col in c0..=c1 {
                        let p = Point::new((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride);
                        if !o.quad.contains(p) {
                            continue;
                        }
                        for c in 0..cfg.channels {
                            data[c * plane + row * mw + col] = o.appearance[c];
                        }
                    }
                }
            }
            let quads: Vec<Quad> = observations.iter().map(|o| o.quad).collect();
            (
                Some(Tensor::new(vec![cfg.channels, mh, mw], data)?),
                Some(encode_targets(&quads, mh, mw, stride, 0.0)?),
            )
        } else {
            (None, None)
        };
        frames.push(SyntheticFrame {
            feature_map,
            maps,
            observations,
        });
    }
    Ok(SyntheticSequence {
        config: cfg.clone(),
        instances,
        signatures,
        frames,
        tracks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn static_instance_keeps_its_quad() {
        let s = generate_sequence(&ScenarioConfig::static_single(3, 1)).unwrap();
        let q: Vec<Quad> = s.tracks[0].frames.values().copied().collect();
        assert_eq!(q.len(), 3);
        assert!(q.iter().all(|x| *x == q[0]));
    }

    #[test]
    fn crossing_swaps_order() {
        let s = generate_sequence(&ScenarioConfig::crossing(5, 0)).unwrap();
        let x = |f: usize, i: usize| s.frames[f].observations[i].quad.centroid().x;
        assert!(x(0, 0) < x(0, 1));
        assert!(x(4, 0) > x(4, 1));
    }

    #[test]
    fn same_seed_same_sequence() {
        let cfg = ScenarioConfig {
            instances: 4,
            occlusion_rate: 1.0,
            frames: 6,
            width: 256,
            height: 256,
            seed: 42,
            ..Default::default()
        };
        let a = generate_sequence(&cfg).unwrap();
        let b = generate_sequence(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.digest(), b.digest());
        let c = generate_sequence(&ScenarioConfig { seed: 43, ..cfg }).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn overlapping_layout_rejected() {
        let spec = InstanceSpec {
            start: [100.0, 100.0],
            end: [100.0, 100.0],
            size: [60.0, 20.0],
            angle: 0.0,
            signature: 0,
        };
        let cfg = ScenarioConfig {
            layout: vec![
                spec.clone(),
                InstanceSpec {
                    start: [120.0, 105.0],
                    ..spec
                },
            ],
            ..Default::default()
        };
        assert!(generate_sequence(&cfg).is_err());
    }

    #[test]
    fn occluded_frames_leave_ground_truth() {
        let cfg = ScenarioConfig {
            instances: 2,
            frames: 8,
            occlusions: vec![Occlusion {
                instance: 1,
                start: 2,
                end: 5,
            }],
            seed: 3,
            ..Default::default()
        };
        let s = generate_sequence(&cfg).unwrap();
        let frames: Vec<usize> = s.tracks[1].frames.keys().copied().collect();
        assert_eq!(frames, vec![0, 1, 5, 6, 7]);
        assert_eq!(s.frames[3].observations.len(), 1);
        let bad = ScenarioConfig {
            occlusions: vec![Occlusion {
                instance: 1,
                start: 6,
                end: 9,
            }],
            ..cfg
        };
        assert!(generate_sequence(&bad).is_err());
    }

    #[test]
    fn rendered_maps_mark_instances() {
        let s = generate_sequence(&ScenarioConfig::static_single(1, 5)).unwrap();
        let f = &s.frames[0];
        let c = f.observations[0].quad.centroid();
        let (mh, mw) = s.config.map_size();
        let fm = f.feature_map.as_ref().unwrap();
        assert_eq!(fm.shape(), &[8, mh, mw]);
        let (row, col) = ((c.y / 4.0) as usize, (c.x / 4.0) as usize);
        let maps = f.maps.as_ref().unwrap();
        assert_eq!(maps.score.data()[row * mw + col], 1.0);
        assert_eq!(fm.data()[row * mw + col], f.observations[0].appearance[0]);
        for o in &f.observations {
            let (x0, y0, x1, y1) = o.quad.bounds();
            assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 512.0 && y1 <= 512.0);
        }
    }
}
