//! Writes synthetic sequences in the formats `track` and `eval-*` read.

use std::fs;
use std::path::Path;

use super::pipeline::DETECTION_CHANNELS;
use super::records::{gt_records, write_jsonl, FrameRecord};
use crate::error::{Error, Result};
use crate::synthlab::{ScenarioConfig, SyntheticSequence};
use crate::tensor::{write_qtns, Tensor};

pub const MANIFEST: &str = "manifest.jsonl";
pub const GT: &str = "gt.jsonl";
pub const SCENARIO: &str = "scenario.toml";

pub fn scenario_from_toml(text: &str) -> Result<ScenarioConfig> {
    toml::from_str(text).map_err(|e| Error::usage(format!("scenario: {}", e.message())))
}

pub fn scenario_to_toml(cfg: &ScenarioConfig) -> String {
    toml::to_string(cfg).expect("scenario is always representable")
}

/// Detection maps stacked on top of the feature channels, one tensor per
/// frame.
pub fn frame_tensors(seq: &SyntheticSequence) -> Result<Vec<Tensor<f32>>> {
    seq.frames
        .iter()
        .map(|f| {
            let (Some(fm), Some(maps)) = (&f.feature_map, &f.maps) else {
                return Err(Error::usage("sequence was generated with render = false"));
            };
            let det = maps.to_tensor()?;
            debug_assert_eq!(det.shape()[0], DETECTION_CHANNELS);
            Tensor::concat(&[&det, fm], 0)
        })
        .collect()
}

/// Layout: `frames/NNNNNN.qtns`, `manifest.jsonl`, `gt.jsonl` and the
/// scenario that produced them.
pub fn write_sequence(seq: &SyntheticSequence, dir: &Path) -> Result<()> {
    let tensors = frame_tensors(seq)?;
    fs::create_dir_all(dir.join("frames"))?;
    let mut manifest = Vec::with_capacity(tensors.len());
    for (i, t) in tensors.iter().enumerate() {
        let rel = format!("frames/{:06}.qtns", i);
        write_qtns(t, dir.join(&rel))?;
        manifest.push(FrameRecord {
            frame: i,
            feature_map: rel.into(),
            detections: None,
        });
    }
    write_jsonl(&dir.join(MANIFEST), &manifest)?;
    write_jsonl(&dir.join(GT), &gt_records(&seq.tracks))?;
    fs::write(dir.join(SCENARIO), scenario_to_toml(&seq.config))?;
    Ok(())
}
