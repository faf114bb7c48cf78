//! JSONL record streams: frame manifests, detections, trajectories, ground
//! truth and descriptor dumps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Quad;
use crate::metrics::{GtTrack, HypBox};
use crate::tracker::Confirmed;

/// One input frame. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub frame: usize,
    pub feature_map: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<PathBuf>,
}

/// A precomputed detection; one file of these per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub quad: [f64; 8],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub frame: usize,
    pub track_id: u64,
    pub quad: [f64; 8],
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GtRecord {
    pub frame: usize,
    pub id: u64,
    pub quad: [f64; 8],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorRecord {
    pub frame: usize,
    pub proposal_index: usize,
    pub agd: Vec<f32>,
}

impl From<&Confirmed> for TrajectoryRecord {
    fn from(c: &Confirmed) -> Self {
        Self {
            frame: c.frame,
            track_id: c.track_id,
            quad: c.quad.coords(),
            score: c.score,
        }
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::data(path, e.to_string()))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::data(path, format!("line {}: {}", n + 1, e)))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::data(path, format!("line {}: {}", n + 1, e)))?);
    }
    Ok(out)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a frame manifest, resolves its paths and checks that frame
/// indices run 0, 1, 2, … without gaps or repeats.
pub fn read_manifest(path: &Path) -> Result<Vec<FrameRecord>> {
    let mut frames: Vec<FrameRecord> = read_jsonl(path)?;
    frames.sort_by_key(|f| f.frame);
    let mut missing = Vec::new();
    let mut expected = 0usize;
    for f in &frames {
        if f.frame < expected {
            return Err(Error::data(path, format!("frame {} is listed twice", f.frame)));
        }
        if f.frame > expected {
            missing.push(if f.frame - expected == 1 {
                format!("{}", expected)
            } else {
                format!("{}..={}", expected, f.frame - 1)
            });
        }
        expected = f.frame + 1;
    }
    if !missing.is_empty() {
        return Err(Error::data(path, format!("missing frames {}", missing.join(", "))));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    for f in &mut frames {
        f.feature_map = base.join(&f.feature_map);
        if let Some(d) = &mut f.detections {
            *d = base.join(&*d);
        }
    }
    Ok(frames)
}

fn quad_of(path: &Path, c: [f64; 8], score: f64) -> Result<Quad> {
    let q = Quad::from_coords(c, score);
    q.validate().map_err(|e| Error::data(path, format!("{:?}: {}", c, e)))?;
    Ok(q)
}

pub fn read_detections(path: &Path) -> Result<Vec<Quad>> {
    read_jsonl::<DetectionRecord>(path)?
        .into_iter()
        .map(|r| quad_of(path, r.quad, r.score))
        .collect()
}

/// Ground truth grouped into tracks; a repeated (frame, id) is an error.
pub fn read_gt(path: &Path) -> Result<Vec<GtTrack>> {
    let mut tracks: BTreeMap<u64, BTreeMap<usize, Quad>> = BTreeMap::new();
    for r in read_jsonl::<GtRecord>(path)? {
        let q = quad_of(path, r.quad, 1.0)?;
        if tracks.entry(r.id).or_default().insert(r.frame, q).is_some() {
            return Err(Error::data(
                path,
                format!("ground-truth id {} appears twice in frame {}", r.id, r.frame),
            ));
        }
    }
    Ok(tracks.into_iter().map(|(id, frames)| GtTrack { id, frames }).collect())
}

pub fn gt_records(tracks: &[GtTrack]) -> Vec<GtRecord> {
    let mut out: Vec<GtRecord> = tracks
        .iter()
        .flat_map(|t| {
            t.frames.iter().map(move |(&frame, q)| GtRecord {
                frame,
                id: t.id,
                quad: q.coords(),
            })
        })
        .collect();
    out.sort_by_key(|r| (r.frame, r.id));
    out
}

pub fn read_trajectories(path: &Path) -> Result<Vec<HypBox>> {
    read_jsonl::<TrajectoryRecord>(path)?
        .into_iter()
        .map(|r| {
            Ok(HypBox {
                frame: r.frame,
                track_id: r.track_id,
                quad: quad_of(path, r.quad, r.score)?,
            })
        })
        .collect()
}

/// Per-frame quad lists covering frames `0..frames`.
pub fn by_frame(items: impl IntoIterator<Item = (usize, Quad)>, frames: usize) -> Vec<Vec<Quad>> {
    let mut out = vec![Vec::new(); frames];
    for (f, q) in items {
        if f >= out.len() {
            out.resize(f + 1, Vec::new());
        }
        out[f].push(q);
    }
    out
}
