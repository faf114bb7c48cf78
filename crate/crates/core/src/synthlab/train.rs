//! Toy association training: geometry embedding + GRU fitted with the
//! contrastive loss on synthetic episodes, appearance given by signatures.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{generate_sequence, ScenarioConfig, SyntheticSequence};
use crate::descriptor::{
    estimate_eagd, geometry_feature, geometry_feature_tape, normalized_coords, GeometryEmbedParams, GeometryVars,
};
use crate::error::{Error, Result};
use crate::losses::{contrastive_track_loss_tape, LossWeights, PairLabels};
use crate::recurrent::{gru_step_tape, GruParams, GruVars};
use crate::tensor::{Tape, Tensor, Var};
use crate::tracker::{min_cost_assignment, similarity_matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Plain SGD step size.
    pub learning_rate: f64,
    pub seed: u64,
    /// Episodes per step; every step draws a fresh batch.
    pub train_episodes: usize,
    pub eval_episodes: usize,
    /// Episode template; frames, instances and noise come from here. Its
    /// seed is replaced per episode.
    pub scenario: ScenarioConfig,
    pub margin: f64,
    /// Start the candidate's input block at the identity, so the untrained
    /// GRU already smooths descriptors over time.
    pub identity_init: bool,
    /// Abort when the loss stays above this multiple of the initial loss...
    pub divergence_factor: f64,
    /// ...for this many consecutive steps.
    pub divergence_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 0.05,
            seed: 7,
            train_episodes: 8,
            eval_episodes: 50,
            scenario: ScenarioConfig {
                frames: 6,
                width: 256,
                height: 256,
                instances: 2,
                motion: super::Motion::Linear { max_shift: 40.0 },
                appearance_noise: 0.05,
                min_size: [40.0, 10.0],
                max_size: [80.0, 20.0],
                render: false,
                ..Default::default()
            },
            margin: 1.0,
            identity_init: false,
            divergence_factor: 10.0,
            divergence_window: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Loss on the first training batch, before each update.
    pub loss_curve: Vec<f64>,
    /// Fraction of held-out frames whose optimal matching equals the
    /// ground-truth correspondence.
    pub accuracy: f64,
    /// Same measure before training.
    pub initial_accuracy: f64,
    pub eval_frames: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub geometry: GeometryEmbedParams<f32>,
    pub gru: GruParams<f32>,
    pub report: TrainReport,
}

/// One fully visible episode in tensor form: per frame an R×W appearance
/// matrix and an R×8 normalized-coordinate matrix, rows ordered by id.
#[derive(Clone)]
struct Episode {
    appearance: Vec<Tensor<f64>>,
    coords: Vec<Tensor<f64>>,
    rows: usize,
}

fn episode(seq: &SyntheticSequence) -> Result<Episode> {
    let n = seq.instances.len();
    let (w, h) = seq.frame_size();
    let mut appearance = Vec::new();
    let mut coords = Vec::new();
    for (f, frame) in seq.frames.iter().enumerate() {
        if frame.observations.len() != n {
            return Err(Error::usage(format!(
                "training episodes must keep every instance visible; frame {} shows {} of {}",
                f,
                frame.observations.len(),
                n
            )));
        }
        let width = frame.observations[0].appearance.len();
        let mut a = Vec::with_capacity(n * width);
        let mut g = Vec::with_capacity(n * 8);
        for o in &frame.observations {
            a.extend(o.appearance.iter().map(|&v| v as f64));
            g.extend(normalized_coords(&o.quad, w, h)?);
        }
        appearance.push(Tensor::new(vec![n, width], a)?);
        coords.push(Tensor::new(vec![n, 8], g)?);
    }
    Ok(Episode {
        appearance,
        coords,
        rows: n,
    })
}

fn episodes(cfg: &TrainConfig, count: usize, salt: u64) -> Result<Vec<Episode>> {
    (0..count)
        .map(|e| {
            let sc = ScenarioConfig {
                seed: cfg.seed.wrapping_mul(1_000_003).wrapping_add(salt + e as u64),
                render: false,
                ..cfg.scenario.clone()
            };
            episode(&generate_sequence(&sc)?)
        })
        .collect()
}

/// Stacks the episodes' rows frame by frame into one batch.
fn batch(eps: &[Episode]) -> Result<(Vec<Tensor<f64>>, Vec<Tensor<f64>>)> {
    let frames = eps[0].appearance.len();
    let mut a = Vec::with_capacity(frames);
    let mut g = Vec::with_capacity(frames);
    for t in 0..frames {
        let ap: Vec<&Tensor<f64>> = eps.iter().map(|e| &e.appearance[t]).collect();
        let gp: Vec<&Tensor<f64>> = eps.iter().map(|e| &e.coords[t]).collect();
        a.push(Tensor::concat(&ap, 0)?);
        g.push(Tensor::concat(&gp, 0)?);
    }
    Ok((a, g))
}

struct Params {
    geometry: GeometryEmbedParams<f64>,
    gru: GruParams<f64>,
}

/// Mean contrastive loss between step-(t−1) estimates and step-t
/// descriptors, over all frames t ≥ 1 and all episodes.
fn record_loss(
    tape: &mut Tape,
    p: &Params,
    eps: &[Episode],
    appearance: &[Tensor<f64>],
    coords: &[Tensor<f64>],
    weights: &LossWeights,
) -> Result<(Var, GeometryVars, GruVars)> {
    let gv = GeometryVars::record(tape, &p.geometry)?;
    let rv = GruVars::record(tape, &p.gru)?;
    let rows: usize = eps.iter().map(|e| e.rows).sum();
    let mut h = tape.leaf(Tensor::zeros(vec![rows, p.gru.hidden()]))?;
    let mut prev_estimate: Option<Var> = None;
    let mut terms = Vec::new();
    for (a, g) in appearance.iter().zip(coords) {
        let a = tape.leaf(a.clone())?;
        let g = tape.leaf(g.clone())?;
        let fg = geometry_feature_tape(tape, g, &gv)?;
        let agd = tape.concat(&[a, fg], 1)?;
        if let Some(est) = prev_estimate {
            let mut start = 0;
            for e in eps {
                let prev = tape.slice(est, 0, start, e.rows)?;
                let cur = tape.slice(agd, 0, start, e.rows)?;
                let ids: Vec<Option<u64>> = (0..e.rows as u64).map(Some).collect();
                let y = PairLabels::from_ids(&ids, &ids)?;
                terms.push(contrastive_track_loss_tape(tape, prev, cur, &y, weights)?);
                start += e.rows;
            }
        }
        h = gru_step_tape(tape, agd, h, &rv)?;
        prev_estimate = Some(h);
    }
    if terms.is_empty() {
        return Err(Error::usage("training episodes need at least two frames"));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    let n = terms.len() as f64;
    Ok((tape.scale(total, 1.0 / n)?, gv, rv))
}

/// Held-out association accuracy with the single-precision inference path.
/// Proposals are shuffled every frame so input order carries no hint.
pub fn association_accuracy(
    geometry: &GeometryEmbedParams<f32>,
    gru: &GruParams<f32>,
    seqs: &[SyntheticSequence],
    seed: u64,
) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut correct, mut total) = (0usize, 0usize);
    for seq in seqs {
        let (w, h) = seq.frame_size();
        let mut hidden: Vec<Vec<f32>> = Vec::new();
        let mut estimates: Vec<(u64, Vec<f32>)> = Vec::new();
        for frame in &seq.frames {
            let mut order: Vec<usize> = (0..frame.observations.len()).collect();
            for i in (1..order.len()).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let agds: Vec<(u64, Vec<f32>)> = order
                .iter()
                .map(|&k| {
                    let o = &frame.observations[k];
                    let fg = geometry_feature(&o.quad, w, h, geometry)?;
                    let mut v = o.appearance.clone();
                    v.extend_from_slice(fg.data());
                    Ok((o.id, v))
                })
                .collect::<Result<_>>()?;
            if !estimates.is_empty() {
                let prev: Vec<&[f32]> = estimates.iter().map(|(_, v)| v.as_slice()).collect();
                let cur: Vec<&[f32]> = agds.iter().map(|(_, v)| v.as_slice()).collect();
                let m = min_cost_assignment(&similarity_matrix(&prev, &cur)?);
                let ok = m.len() == prev.len().min(cur.len()) && m.iter().all(|&(i, j)| estimates[i].0 == agds[j].0);
                correct += ok as usize;
                total += 1;
            }
            // Advance every instance; continuity comes from the ids.
            let mut next_hidden = Vec::with_capacity(agds.len());
            let mut next_est = Vec::with_capacity(agds.len());
            for (id, v) in &agds {
                let prev_h = estimates
                    .iter()
                    .position(|(pid, _)| pid == id)
                    .map(|k| hidden[k].clone());
                let e = match &prev_h {
                    Some(hp) => estimate_eagd(v, hp, true, gru)?,
                    None => estimate_eagd(v, &[], false, gru)?,
                };
                next_hidden.push(e.hidden);
                next_est.push((*id, e.values));
            }
            hidden = next_hidden;
            estimates = next_est;
        }
    }
    Ok((if total == 0 { 0.0 } else { correct as f64 / total as f64 }, total))
}

pub fn toy_train(cfg: &TrainConfig) -> Result<TrainedModel> {
    if !(cfg.learning_rate >= 0.0) || cfg.train_episodes == 0 {
        return Err(Error::usage(
            "toy training needs a non-negative learning rate and episodes",
        ));
    }
    let weights = LossWeights {
        margin: cfg.margin,
        ..Default::default()
    };
    weights.validate()?;
    let n = cfg.train_episodes as u64;
    // Held-out episodes use salts from 500_000; training batches start past them.
    let draw = |step: u64| -> Result<Vec<Episode>> { episodes(cfg, cfg.train_episodes, 1_000_000 + step * n) };
    let first = draw(0)?;
    let eval_seqs: Vec<SyntheticSequence> = (0..cfg.eval_episodes)
        .map(|e| {
            generate_sequence(&ScenarioConfig {
                seed: cfg.seed.wrapping_mul(1_000_003).wrapping_add(500_000 + e as u64),
                render: false,
                ..cfg.scenario.clone()
            })
        })
        .collect::<Result<_>>()?;
    let width = first[0].appearance[0].shape()[1] + crate::descriptor::GEOMETRY_WIDTH;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = Params {
        geometry: GeometryEmbedParams::<f64>::init(&mut rng),
        gru: GruParams::<f64>::init(width, width, &mut rng),
    };
    if cfg.identity_init {
        let cols = 2 * width;
        for k in 0..width {
            p.gru.w_h.data_mut()[k * cols + k] += 1.0;
        }
    }
    let (initial_accuracy, _) = association_accuracy(&p.geometry.cast(), &p.gru.cast(), &eval_seqs, cfg.seed)?;

    // The curve tracks the loss on the first batch, so it reflects parameter
    // changes only, not batch-to-batch variation.
    let (monitor_a, monitor_g) = batch(&first)?;
    let diverged = |step: usize| {
        move |e: Error| match e {
            Error::NonFinite(op) => Error::Diverged(format!("non-finite value in {} at step {}", op, step)),
            other => other,
        }
    };
    let mut curve = Vec::with_capacity(cfg.steps);
    let mut above = 0usize;
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let train = if step == 0 { first.clone() } else { draw(step as u64)? };
        let (appearance, coords) = batch(&train)?;
        let (loss, gv, rv) =
            record_loss(&mut tape, &p, &train, &appearance, &coords, &weights).map_err(diverged(step))?;
        let value = if step == 0 {
            tape.scalar_value(loss)
        } else {
            let mut probe = Tape::new();
            let (l, _, _) =
                record_loss(&mut probe, &p, &first, &monitor_a, &monitor_g, &weights).map_err(diverged(step))?;
            probe.scalar_value(l)
        };
        curve.push(value);
        if value > cfg.divergence_factor * curve[0] {
            above += 1;
            if above >= cfg.divergence_window {
                return Err(Error::Diverged(format!(
                    "loss {:.4e} has exceeded {}× the initial {:.4e} for {} steps (step {}, learning rate {})",
                    value, cfg.divergence_factor, curve[0], above, step, cfg.learning_rate
                )));
            }
        } else {
            above = 0;
        }
        let grads = tape.backward(loss)?;
        let vars = gv.as_array().into_iter().chain(rv.as_array());
        let params = p.geometry.tensors_mut().into_iter().chain(p.gru.tensors_mut());
        for (t, v) in params.zip(vars) {
            for (w, d) in t.data_mut().iter_mut().zip(grads.get(v).data()) {
                *w -= cfg.learning_rate * d;
            }
        }
    }
    let geometry = p.geometry.cast();
    let gru = p.gru.cast();
    let (accuracy, eval_frames) = association_accuracy(&geometry, &gru, &eval_seqs, cfg.seed)?;
    Ok(TrainedModel {
        geometry,
        gru,
        report: TrainReport {
            loss_curve: curve,
            accuracy,
            initial_accuracy,
            eval_frames,
        },
    })
}
