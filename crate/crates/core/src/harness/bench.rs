//! Per-stage latency over a whole sequence.

use std::path::Path;
use std::time::{Duration, Instant};

use serde::Serialize;

use super::config::RunConfig;
use super::pipeline::{Pipeline, StageTiming};
use super::records::FrameRecord;
use crate::error::Result;
use crate::geometry::Quad;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize)]
pub struct StageStat {
    pub stage: &'static str,
    pub mean_ms: f64,
    pub max_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub machine: String,
    pub threads: usize,
    pub frames: usize,
    pub stages: Vec<StageStat>,
    /// Matching plus update: the association step alone.
    pub association_mean_ms: f64,
    pub association_max_ms: f64,
    /// Sum of stage times over the sequence.
    pub stage_sum_s: f64,
    /// Wall time of the whole loop, measured independently.
    pub wall_s: f64,
    pub fps: f64,
}

impl BenchReport {
    pub fn from_timings(timings: &[StageTiming], wall: Duration) -> Self {
        let n = timings.len().max(1) as f64;
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        let stages = StageTiming::STAGES
            .iter()
            .enumerate()
            .map(|(i, &stage)| StageStat {
                stage,
                mean_ms: timings.iter().map(|t| ms(t.values()[i])).sum::<f64>() / n,
                max_ms: timings.iter().map(|t| ms(t.values()[i])).fold(0.0, f64::max),
            })
            .collect();
        let assoc: Vec<f64> = timings.iter().map(|t| ms(t.matching + t.update)).collect();
        let stage_sum: f64 = timings.iter().map(|t| t.total().as_secs_f64()).sum();
        let wall_s = wall.as_secs_f64();
        Self {
            machine: machine_spec(),
            threads: rayon::current_num_threads(),
            frames: timings.len(),
            stages,
            association_mean_ms: assoc.iter().sum::<f64>() / n,
            association_max_ms: assoc.iter().copied().fold(0.0, f64::max),
            stage_sum_s: stage_sum,
            wall_s,
            fps: if wall_s > 0.0 {
                timings.len() as f64 / wall_s
            } else {
                0.0
            },
        }
    }

    /// Relative gap between the wall time and the sum of stages.
    pub fn accounting_gap(&self) -> f64 {
        if self.wall_s > 0.0 {
            (self.wall_s - self.stage_sum_s).abs() / self.wall_s
        } else {
            0.0
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "machine: {}\nthreads: {}\nframes: {}\n",
            self.machine, self.threads, self.frames
        );
        s += &format!("{:<12} {:>10} {:>10}\n", "stage", "mean ms", "max ms");
        for st in &self.stages {
            s += &format!("{:<12} {:>10.3} {:>10.3}\n", st.stage, st.mean_ms, st.max_ms);
        }
        s += &format!(
            "association  {:>10.3} {:>10.3}\nstage sum {:.3} s, wall {:.3} s (gap {:.2}%), {:.2} fps\n",
            self.association_mean_ms,
            self.association_max_ms,
            self.stage_sum_s,
            self.wall_s,
            100.0 * self.accounting_gap(),
            self.fps
        );
        s
    }
}

/// Runs the pipeline over in-memory frames.
pub fn bench_tensors(cfg: &RunConfig, base: &Path, frames: &[(Tensor<f32>, Option<Vec<Quad>>)]) -> Result<BenchReport> {
    let mut pipeline = Pipeline::new(cfg, base)?;
    let mut timings = Vec::with_capacity(frames.len());
    let start = Instant::now();
    for (t, d) in frames {
        timings.push(pipeline.process(t, d.clone())?.timing);
    }
    Ok(BenchReport::from_timings(&timings, start.elapsed()))
}

/// Runs the pipeline over manifest frames; file loading counts as a stage.
pub fn bench_files(cfg: &RunConfig, base: &Path, manifest: &[FrameRecord]) -> Result<BenchReport> {
    let mut pipeline = Pipeline::new(cfg, base)?;
    let mut timings = Vec::with_capacity(manifest.len());
    let start = Instant::now();
    for f in manifest {
        timings.push(pipeline.process_files(&f.feature_map, f.detections.as_deref())?.timing);
    }
    Ok(BenchReport::from_timings(&timings, start.elapsed()))
}

/// CPU model and logical core count from `/proc/cpuinfo`, falling back to
/// the target triple elsewhere.
pub fn machine_spec() -> String {
    let arch = format!("{}-{}", std::env::consts::ARCH, std::env::consts::OS);
    let Ok(info) = std::fs::read_to_string("/proc/cpuinfo") else {
        return arch;
    };
    let model = info
        .lines()
        .find_map(|l| {
            l.strip_prefix("model name")
                .and_then(|r| r.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = info.lines().filter(|l| l.starts_with("processor")).count();
    format!("{} ({} logical cores, {})", model, cores, arch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_aggregates_stages() {
        let t = StageTiming {
            decode: Duration::from_millis(2),
            matching: Duration::from_millis(1),
            ..Default::default()
        };
        let r = BenchReport::from_timings(&[t, t], Duration::from_millis(6));
        assert_eq!(r.frames, 2);
        let decode = r.stages.iter().find(|s| s.stage == "decode").unwrap();
        assert!((decode.mean_ms - 2.0).abs() < 1e-9);
        assert!((r.association_mean_ms - 1.0).abs() < 1e-9);
        assert!((r.stage_sum_s - 0.006).abs() < 1e-12);
        assert!(r.accounting_gap() < 1e-9);
        assert!((r.fps - 2.0 / 0.006).abs() < 1e-6);
        assert!(r.to_text().contains("decode"));
    }
}
