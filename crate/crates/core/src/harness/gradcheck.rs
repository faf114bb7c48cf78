//! Finite-difference suite over every differentiable op, every loss and
//! the geometry-embedding + GRU path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::descriptor::{geometry_feature_tape, GeometryVars};
use crate::error::Result;
use crate::losses::{
    contrastive_track_loss_tape, detection_loss_tape, dice_loss_tape, smooth_l1_offsets_tape, total_loss_tape,
    LossWeights, PairLabels,
};
use crate::recurrent::{gru_step_tape, GruVars};
use crate::tensor::gradcheck::{check_gradients, GradCheckOptions};
use crate::tensor::{Activation, Tape, Tensor, Var};

pub const DEFAULT_INSTANCES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckRow {
    pub name: &'static str,
    pub instances: usize,
    /// Gradient entries compared across all instances.
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// One random instance: checked inputs plus the graph over them.
struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn uniform(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches")
}

/// Uniform in ±[0.05, 1): keeps piecewise ops away from their kinks.
fn off_zero(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.05, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// Reduces `out` to a scalar with fixed random weights, so every output
/// element contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, out: Var, w: &Tensor<f64>) -> Result<Var> {
    let w = tape.leaf(w.clone())?;
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn unary(rng: &mut ChaCha8Rng, shape: Vec<usize>, x: Tensor<f64>, op: fn(&mut Tape, Var) -> Result<Var>) -> Case {
    let w = uniform(rng, shape, -1.0, 1.0);
    Case {
        inputs: vec![x],
        build: Box::new(move |t, v| {
            let y = op(t, v[0])?;
            weighted_sum(t, y, &w)
        }),
    }
}

fn binary(
    rng: &mut ChaCha8Rng,
    a: Vec<usize>,
    b: Vec<usize>,
    out: Vec<usize>,
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> Case {
    let inputs = vec![uniform(rng, a, -1.0, 1.0), uniform(rng, b, -1.0, 1.0)];
    let w = uniform(rng, out, -1.0, 1.0);
    Case {
        inputs,
        build: Box::new(move |t, v| {
            let y = op(t, v[0], v[1])?;
            weighted_sum(t, y, &w)
        }),
    }
}

/// Offsets and targets whose normalized differences avoid the smooth-L1
/// kink at ±1.
fn offset_pair(rng: &mut ChaCha8Rng, cols: usize) -> (Tensor<f64>, Tensor<f64>, Vec<f64>) {
    let norm: Vec<f64> = (0..cols).map(|_| rng.random_range(2.0..20.0)).collect();
    let pred = uniform(rng, vec![8, cols], -30.0, 30.0);
    let mut gt = pred.clone();
    for (k, g) in gt.data_mut().iter_mut().enumerate() {
        let mag = if rng.random_bool(0.5) {
            rng.random_range(0.05..0.9)
        } else {
            rng.random_range(1.1..3.0)
        };
        let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
        *g -= sign * mag * norm[k % cols];
    }
    (pred, gt, norm)
}

fn binary_mask(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_bool(0.4) as u8 as f64).collect()).expect("shape matches")
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Descriptor sets whose pairwise distances stay clear of the margin.
fn descriptor_sets(rng: &mut ChaCha8Rng, p: usize, q: usize, w: usize, margin: f64) -> (Tensor<f64>, Tensor<f64>) {
    loop {
        let a = uniform(rng, vec![p, w], -0.6, 0.6);
        let b = uniform(rng, vec![q, w], -0.6, 0.6);
        let clear = (0..p).all(|i| {
            (0..q).all(|j| {
                let d = distance(&a.data()[i * w..(i + 1) * w], &b.data()[j * w..(j + 1) * w]);
                (d - margin).abs() > 0.05
            })
        });
        if clear {
            return (a, b);
        }
    }
}

/// Identity labels for the first `min(p, q)` rows and columns.
fn diagonal_labels(p: usize, q: usize) -> PairLabels {
    let prev: Vec<Option<u64>> = (0..p as u64).map(Some).collect();
    let cur: Vec<Option<u64>> = (0..q as u64).map(Some).collect();
    PairLabels::from_ids(&prev, &cur).expect("unique ids")
}

const CASES: [&str; 21] = [
    "matmul",
    "matmul_bt",
    "add",
    "add_row",
    "sub",
    "mul",
    "affine",
    "scale",
    "sigmoid",
    "tanh",
    "relu",
    "concat",
    "slice",
    "sum",
    "squared_norm",
    "dice_loss",
    "smooth_l1_loss",
    "detection_loss",
    "contrastive_loss",
    "total_loss",
    "geometry_gru_path",
];

fn make_case(name: &str, rng: &mut ChaCha8Rng) -> Case {
    let w = LossWeights::default();
    match name {
        "matmul" => binary(rng, vec![3, 4], vec![4, 2], vec![3, 2], |t, a, b| t.matmul(a, b)),
        "matmul_bt" => binary(rng, vec![3, 4], vec![2, 4], vec![3, 2], |t, a, b| t.matmul_bt(a, b)),
        "add" => binary(rng, vec![3, 4], vec![3, 4], vec![3, 4], |t, a, b| t.add(a, b)),
        "add_row" => binary(rng, vec![3, 4], vec![4], vec![3, 4], |t, a, b| t.add_row(a, b)),
        "sub" => binary(rng, vec![3, 4], vec![3, 4], vec![3, 4], |t, a, b| t.sub(a, b)),
        "mul" => binary(rng, vec![3, 4], vec![3, 4], vec![3, 4], |t, a, b| t.mul(a, b)),
        "affine" => {
            let x = uniform(rng, vec![3, 4], -1.0, 1.0);
            unary(rng, vec![3, 4], x, |t, v| t.affine(v, 1.7, -0.3))
        }
        "scale" => {
            let x = uniform(rng, vec![3, 4], -1.0, 1.0);
            unary(rng, vec![3, 4], x, |t, v| t.scale(v, -2.5))
        }
        "sigmoid" => {
            let x = uniform(rng, vec![3, 4], -3.0, 3.0);
            unary(rng, vec![3, 4], x, |t, v| t.activation(v, Activation::Sigmoid))
        }
        "tanh" => {
            let x = uniform(rng, vec![3, 4], -2.0, 2.0);
            unary(rng, vec![3, 4], x, |t, v| t.activation(v, Activation::Tanh))
        }
        "relu" => {
            let x = off_zero(rng, vec![3, 4]);
            unary(rng, vec![3, 4], x, |t, v| t.activation(v, Activation::Relu))
        }
        "concat" => {
            let inputs = vec![
                uniform(rng, vec![3, 2], -1.0, 1.0),
                uniform(rng, vec![3, 3], -1.0, 1.0),
                uniform(rng, vec![2, 5], -1.0, 1.0),
            ];
            let w = uniform(rng, vec![5, 5], -1.0, 1.0);
            Case {
                inputs,
                build: Box::new(move |t, v| {
                    let rows = t.concat(&[v[0], v[1]], 1)?;
                    let all = t.concat(&[rows, v[2]], 0)?;
                    weighted_sum(t, all, &w)
                }),
            }
        }
        "slice" => {
            let x = uniform(rng, vec![4, 5], -1.0, 1.0);
            let w = uniform(rng, vec![2, 3], -1.0, 1.0);
            Case {
                inputs: vec![x],
                build: Box::new(move |t, v| {
                    let cols = t.slice(v[0], 1, 1, 3)?;
                    let rows = t.slice(cols, 0, 2, 2)?;
                    weighted_sum(t, rows, &w)
                }),
            }
        }
        "sum" => Case {
            inputs: vec![uniform(rng, vec![3, 4], -1.0, 1.0)],
            build: Box::new(|t, v| {
                let s = t.sum(v[0])?;
                t.mul(s, s)
            }),
        },
        "squared_norm" => Case {
            inputs: vec![uniform(rng, vec![3, 4], -1.0, 1.0)],
            build: Box::new(|t, v| t.squared_norm(v[0])),
        },
        "dice_loss" => {
            let pred = uniform(rng, vec![4, 5], 0.05, 0.95);
            let gt = binary_mask(rng, vec![4, 5]);
            Case {
                inputs: vec![pred],
                build: Box::new(move |t, v| dice_loss_tape(t, v[0], &gt)),
            }
        }
        "smooth_l1_loss" => {
            let (pred, gt, norm) = offset_pair(rng, 5);
            Case {
                inputs: vec![pred],
                build: Box::new(move |t, v| smooth_l1_offsets_tape(t, v[0], &gt, &norm)),
            }
        }
        "detection_loss" => {
            let score = uniform(rng, vec![4, 5], 0.05, 0.95);
            let mask = binary_mask(rng, vec![4, 5]);
            let (pred, gt, norm) = offset_pair(rng, 4);
            Case {
                inputs: vec![score, pred],
                build: Box::new(move |t, v| {
                    let cls = dice_loss_tape(t, v[0], &mask)?;
                    let off = smooth_l1_offsets_tape(t, v[1], &gt, &norm)?;
                    detection_loss_tape(t, cls, off, &w)
                }),
            }
        }
        "contrastive_loss" => {
            let (a, b) = descriptor_sets(rng, 3, 4, 6, w.margin);
            let y = diagonal_labels(3, 4);
            Case {
                inputs: vec![a, b],
                build: Box::new(move |t, v| contrastive_track_loss_tape(t, v[0], v[1], &y, &w)),
            }
        }
        "total_loss" => {
            let mut inputs = Vec::new();
            let mut fixed = Vec::new();
            for _ in 0..2 {
                inputs.push(uniform(rng, vec![3, 4], 0.05, 0.95));
                let (pred, gt, norm) = offset_pair(rng, 3);
                inputs.push(pred);
                let (a, b) = descriptor_sets(rng, 2, 3, 5, w.margin);
                inputs.push(a);
                inputs.push(b);
                fixed.push((binary_mask(rng, vec![3, 4]), gt, norm));
            }
            let y = diagonal_labels(2, 3);
            Case {
                inputs,
                build: Box::new(move |t, v| {
                    let mut det = Vec::new();
                    let mut track = Vec::new();
                    for (f, (mask, gt, norm)) in fixed.iter().enumerate() {
                        let v = &v[4 * f..4 * f + 4];
                        let cls = dice_loss_tape(t, v[0], mask)?;
                        let off = smooth_l1_offsets_tape(t, v[1], gt, norm)?;
                        det.push(detection_loss_tape(t, cls, off, &w)?);
                        track.push(contrastive_track_loss_tape(t, v[2], v[3], &y, &w)?);
                    }
                    total_loss_tape(t, &det, &track, &w)
                }),
            }
        }
        "geometry_gru_path" => geometry_gru_case(rng),
        other => unreachable!("unknown case {}", other),
    }
}

/// Two frames of three instances: AGD = [appearance; f_g(coords)], the GRU
/// advances over frame 0 and its estimate is contrasted with frame 1.
fn geometry_gru_case(rng: &mut ChaCha8Rng) -> Case {
    const ROWS: usize = 3;
    const APP: usize = 4;
    const HID: usize = 16;
    const D: usize = APP + 8;
    loop {
        let coords: Vec<Tensor<f64>> = (0..2).map(|_| uniform(rng, vec![ROWS, 8], 0.0, 1.0)).collect();
        let w1 = uniform(rng, vec![HID, 8], -0.8, 0.8);
        let b1 = uniform(rng, vec![HID], -0.3, 0.3);
        // Keep every hidden pre-activation away from the relu kink.
        let clear = coords.iter().all(|g| {
            (0..ROWS).all(|r| {
                (0..HID).all(|k| {
                    let pre: f64 =
                        (0..8).map(|c| w1.data()[k * 8 + c] * g.data()[r * 8 + c]).sum::<f64>() + b1.data()[k];
                    pre.abs() > 0.02
                })
            })
        });
        if !clear {
            continue;
        }
        let mut inputs = vec![
            w1,
            b1,
            uniform(rng, vec![8, HID], -0.5, 0.5),
            uniform(rng, vec![8], -0.3, 0.3),
        ];
        for _ in 0..3 {
            inputs.push(uniform(rng, vec![D, 2 * D], -0.4, 0.4));
        }
        for _ in 0..3 {
            inputs.push(uniform(rng, vec![D], -0.3, 0.3));
        }
        inputs.push(uniform(rng, vec![ROWS, APP], -0.5, 0.5));
        inputs.push(uniform(rng, vec![ROWS, APP], -0.5, 0.5));
        let y = diagonal_labels(ROWS, ROWS);
        let weights = LossWeights::default();
        if !margin_clear(&inputs, &coords, weights.margin) {
            continue;
        }
        return Case {
            inputs,
            build: Box::new(move |t, v| {
                let (est, next) = geometry_gru_forward(t, v, &coords)?;
                contrastive_track_loss_tape(t, est, next, &y, &weights)
            }),
        };
    }
}

/// The GRU estimate after frame 0 and the frame-1 descriptors.
fn geometry_gru_forward(t: &mut Tape, v: &[Var], coords: &[Tensor<f64>]) -> Result<(Var, Var)> {
    let gv = GeometryVars {
        w1: v[0],
        b1: v[1],
        w2: v[2],
        b2: v[3],
    };
    let rv = GruVars {
        w_z: v[4],
        w_r: v[5],
        w_h: v[6],
        b_z: v[7],
        b_r: v[8],
        b_h: v[9],
    };
    let mut agds = Vec::new();
    for (f, c) in coords.iter().enumerate() {
        let g = t.leaf(c.clone())?;
        let fg = geometry_feature_tape(t, g, &gv)?;
        agds.push(t.concat(&[v[10 + f], fg], 1)?);
    }
    let rows = t.value(agds[0]).shape()[0];
    let width = t.value(agds[0]).shape()[1];
    let h0 = t.leaf(Tensor::zeros(vec![rows, width]))?;
    let est = gru_step_tape(t, agds[0], h0, &rv)?;
    Ok((est, agds[1]))
}

/// True when no estimate-descriptor distance sits within 0.05 of the margin.
fn margin_clear(inputs: &[Tensor<f64>], coords: &[Tensor<f64>], margin: f64) -> bool {
    let mut tape = Tape::new();
    let Ok(vars) = inputs
        .iter()
        .map(|x| tape.leaf(x.clone()))
        .collect::<Result<Vec<Var>>>()
    else {
        return false;
    };
    let Ok((est, next)) = geometry_gru_forward(&mut tape, &vars, coords) else {
        return false;
    };
    let (a, b) = (tape.value(est), tape.value(next));
    let w = a.shape()[1];
    (0..a.shape()[0]).all(|i| {
        (0..b.shape()[0]).all(|j| {
            let d = distance(&a.data()[i * w..(i + 1) * w], &b.data()[j * w..(j + 1) * w]);
            (d - margin).abs() > 0.05
        })
    })
}

/// Runs every case on `instances` seeded instances. `analytic_bias` is
/// added to every analytic gradient entry; non-zero values make a negative
/// control that must fail.
pub fn run_suite(seed: u64, instances: usize, analytic_bias: f64) -> Result<Vec<GradCheckRow>> {
    let opts = GradCheckOptions {
        analytic_bias,
        ..Default::default()
    };
    CASES
        .iter()
        .enumerate()
        .map(|(ci, &name)| {
            let mut row = GradCheckRow {
                name,
                instances,
                checked: 0,
                max_rel_err: 0.0,
                passed: true,
            };
            for i in 0..instances {
                let s = seed
                    .wrapping_mul(1_000_003)
                    .wrapping_add((ci as u64) << 20)
                    .wrapping_add(i as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let case = make_case(name, &mut rng);
                let r = check_gradients(&case.inputs, opts, |t, v| (case.build)(t, v))?;
                row.checked += r.checked;
                row.max_rel_err = row.max_rel_err.max(r.max_rel_err);
                row.passed &= r.passed;
            }
            Ok(row)
        })
        .collect()
}

pub fn format_table(rows: &[GradCheckRow]) -> String {
    let mut s = format!(
        "{:<20} {:>9} {:>8} {:>12}  result\n",
        "check", "instances", "entries", "max_rel_err"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<20} {:>9} {:>8} {:>12.3e}  {}\n",
            r.name,
            r.instances,
            r.checked,
            r.max_rel_err,
            if r.passed { "pass" } else { "FAIL" }
        ));
    }
    s
}
