//! Detection and tracking objectives.
//!
//! Every loss exists in two forms: a plain evaluation over values and a tape
//! form that records the same computation for reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const DICE_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Offset term weight in the detection loss.
    pub alpha: f64,
    /// Tracking term weight in the multi-task loss.
    pub beta: f64,
    /// Contrastive margin.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            beta: 0.1,
            margin: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.margin > 0.0)
            || !self.alpha.is_finite()
            || !self.beta.is_finite()
            || !self.margin.is_finite()
        {
            return Err(Error::usage(format!(
                "loss weights need alpha, beta >= 0 and margin > 0, got {:?}",
                self
            )));
        }
        Ok(())
    }
}

/// P×Q same-instance indicator between previous-frame tracklets and
/// current-frame proposals. At most one 1 per row and per column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairLabels {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl PairLabels {
    pub fn empty(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![false; rows * cols],
        }
    }

    /// Labels from ground-truth instance ids; `None` never matches.
    pub fn from_ids(prev: &[Option<u64>], cur: &[Option<u64>]) -> Result<Self> {
        let mut l = Self::empty(prev.len(), cur.len());
        for (i, a) in prev.iter().enumerate() {
            for (j, b) in cur.iter().enumerate() {
                if a.is_some() && a == b {
                    l.set(i, j)?;
                }
            }
        }
        Ok(l)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    /// Marks `(i, j)` positive; refuses a second positive in a row or column.
    pub fn set(&mut self, i: usize, j: usize) -> Result<()> {
        if i >= self.rows || j >= self.cols {
            return Err(Error::shape(format!(
                "pair ({}, {}) outside {}×{}",
                i, j, self.rows, self.cols
            )));
        }
        let row_taken = (0..self.cols).any(|c| c != j && self.get(i, c));
        let col_taken = (0..self.rows).any(|r| r != i && self.get(r, j));
        if row_taken || col_taken {
            return Err(Error::usage(format!(
                "pair ({}, {}) would give a second positive",
                i, j
            )));
        }
        self.data[i * self.cols + j] = true;
        Ok(())
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.rows).flat_map(move |i| (0..self.cols).filter(move |&j| self.get(i, j)).map(move |j| (i, j)))
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| b as u8 as f64).collect()
    }
}

fn as_f64<T: Scalar>(t: &Tensor<T>) -> Tensor<f64> {
    t.cast()
}

/// `1 − 2·Σ(pred·gt) / (Σpred + Σgt + ε)`.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(as_f64(pred))?;
    let l = dice_loss_tape(&mut tape, p, gt)?;
    Ok(tape.scalar_value(l))
}

pub fn dice_loss_tape<T: Scalar>(tape: &mut Tape, pred: Var, gt: &Tensor<T>) -> Result<Var> {
    tape.dice(pred, as_f64(gt), DICE_EPS)
}

/// Mean smooth-L1 of `(pred − gt)/norm` over an 8×P offset matrix, where
/// `norm[p]` is the shortest edge of the GT quad owning pixel `p`.
pub fn smooth_l1_offsets<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, norm: &[f64]) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(as_f64(pred))?;
    let l = smooth_l1_offsets_tape(&mut tape, p, gt, norm)?;
    Ok(tape.scalar_value(l))
}

pub fn smooth_l1_offsets_tape<T: Scalar>(tape: &mut Tape, pred: Var, gt: &Tensor<T>, norm: &[f64]) -> Result<Var> {
    if tape.value(pred).rank() != 2 || tape.value(pred).shape()[0] != 8 {
        return Err(Error::shape(format!(
            "offset predictions must be 8×P, got {:?}",
            tape.value(pred).shape()
        )));
    }
    tape.smooth_l1(pred, as_f64(gt), norm.to_vec())
}

/// `L_cls + α·L_off`.
pub fn detection_loss(cls: f64, off: f64, w: &LossWeights) -> Result<f64> {
    if !cls.is_finite() || !off.is_finite() {
        return Err(Error::NonFinite("detection_loss"));
    }
    Ok(cls + w.alpha * off)
}

pub fn detection_loss_tape(tape: &mut Tape, cls: Var, off: Var, w: &LossWeights) -> Result<Var> {
    let weighted = tape.scale(off, w.alpha)?;
    tape.add(cls, weighted)
}

/// Mean over every (previous, current) pair of
/// `y·d² + (1−y)·max(m − d, 0)²`.
pub fn contrastive_track_loss(prev: &[&[f32]], cur: &[&[f32]], y: &PairLabels, w: &LossWeights) -> Result<f64> {
    let stack = |rows: &[&[f32]]| -> Result<Tensor<f64>> {
        let width = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::shape("descriptor widths differ within a set"));
        }
        Tensor::new(
            vec![rows.len(), width],
            rows.iter().flat_map(|r| r.iter().map(|&v| v as f64)).collect(),
        )
    };
    let mut tape = Tape::new();
    let p = tape.leaf(stack(prev)?)?;
    let c = tape.leaf(stack(cur)?)?;
    let l = contrastive_track_loss_tape(&mut tape, p, c, y, w)?;
    Ok(tape.scalar_value(l))
}

pub fn contrastive_track_loss_tape(
    tape: &mut Tape,
    prev: Var,
    cur: Var,
    y: &PairLabels,
    w: &LossWeights,
) -> Result<Var> {
    let (p, q) = (tape.value(prev).shape()[0], tape.value(cur).shape()[0]);
    if y.rows() != p || y.cols() != q {
        return Err(Error::shape(format!(
            "labels are {}×{} for {}×{} descriptors",
            y.rows(),
            y.cols(),
            p,
            q
        )));
    }
    tape.contrastive(prev, cur, y.to_f64(), w.margin)
}

/// `(1/N)·Σ_t [L_det(t) + β·L_track(t)]`.
pub fn total_loss(det: &[f64], track: &[f64], w: &LossWeights) -> Result<f64> {
    check_frames(det.len(), track.len())?;
    let sum: f64 = det.iter().zip(track).map(|(d, t)| d + w.beta * t).sum();
    Ok(sum / det.len() as f64)
}

pub fn total_loss_tape(tape: &mut Tape, det: &[Var], track: &[Var], w: &LossWeights) -> Result<Var> {
    check_frames(det.len(), track.len())?;
    let mut acc: Option<Var> = None;
    for (&d, &t) in det.iter().zip(track) {
        let bt = tape.scale(t, w.beta)?;
        let term = tape.add(d, bt)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    let sum = acc.expect("at least one frame");
    tape.scale(sum, 1.0 / det.len() as f64)
}

fn check_frames(det: usize, track: usize) -> Result<()> {
    if det == 0 || det != track {
        return Err(Error::usage(format!(
            "total loss needs equal non-empty frame lists, got {} and {}",
            det, track
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheckOptions};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, v: Vec<f32>) -> Tensor<f32> {
        Tensor::new(shape, v).unwrap()
    }

    #[test]
    fn dice_examples() {
        let gt = t(vec![2, 4], vec![1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert!(dice_loss(&gt, &gt).unwrap().abs() < 1e-5);
        let inv = gt.map(|v| 1.0 - v);
        assert!((dice_loss(&inv, &gt).unwrap() - 1.0).abs() < 1e-5);
        let half = Tensor::full(vec![2, 4], 0.5f32);
        assert!((dice_loss(&half, &gt).unwrap() - 0.5).abs() < 1e-6);
        assert!(dice_loss(&half, &Tensor::full(vec![8], 0.5f32)).is_err());
    }

    #[test]
    fn smooth_l1_examples() {
        let gt = t(vec![8, 2], (0..16).map(|i| i as f32).collect());
        assert_eq!(smooth_l1_offsets(&gt, &gt, &[3.0, 4.0]).unwrap(), 0.0);
        let mut pred = gt.clone();
        pred.data_mut()[1] += 4.0;
        // d = 1 at one of 16 entries.
        assert!((smooth_l1_offsets(&pred, &gt, &[3.0, 4.0]).unwrap() - 0.5 / 16.0).abs() < 1e-12);
        assert!(smooth_l1_offsets(&pred, &gt, &[3.0, 0.0]).is_err());
        let single_gt = t(vec![8, 1], vec![0.0; 8]);
        let mut single = single_gt.clone();
        single.data_mut()[0] = 2.0;
        assert!((smooth_l1_offsets(&single, &single_gt, &[2.0]).unwrap() * 8.0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn smooth_l1_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = 7;
        let pred = t(vec![8, p], (0..8 * p).map(|_| rng.random_range(-4.0..4.0)).collect());
        let gt = t(vec![8, p], (0..8 * p).map(|_| rng.random_range(-4.0..4.0)).collect());
        let norm: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..3.0)).collect();
        let mut sum = 0.0;
        for c in 0..8 {
            for k in 0..p {
                let d = (pred.data()[c * p + k] as f64 - gt.data()[c * p + k] as f64) / norm[k];
                sum += if d.abs() < 1.0 { 0.5 * d * d } else { d.abs() - 0.5 };
            }
        }
        let oracle = sum / (8 * p) as f64;
        assert!((smooth_l1_offsets(&pred, &gt, &norm).unwrap() - oracle).abs() < 1e-6);
    }

    #[test]
    fn detection_and_total_examples() {
        let w = LossWeights::default();
        assert!((detection_loss(0.2, 0.1, &w).unwrap() - 0.7).abs() < 1e-12);
        let w0 = LossWeights { alpha: 0.0, ..w };
        assert_eq!(detection_loss(0.2, 0.1, &w0).unwrap(), 0.2);
        assert!(detection_loss(f64::NAN, 0.1, &w).is_err());

        assert!((total_loss(&[0.7], &[1.0], &w).unwrap() - 0.8).abs() < 1e-12);
        let b0 = LossWeights { beta: 0.0, ..w };
        assert!((total_loss(&[0.7, 0.3], &[1.0, 2.0], &b0).unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(
            total_loss(&[0.7, 0.7], &[1.0, 1.0], &w).unwrap(),
            total_loss(&[0.7], &[1.0], &w).unwrap()
        );
        assert!(total_loss(&[], &[], &w).is_err());
        assert!(total_loss(&[0.1], &[], &w).is_err());
    }

    #[test]
    fn contrastive_examples() {
        let w = LossWeights::default();
        let pos = PairLabels::from_ids(&[Some(1)], &[Some(1)]).unwrap();
        let neg = PairLabels::from_ids(&[Some(1)], &[Some(2)]).unwrap();
        let a = [0.0f32, 0.0];
        let b = [0.3f32, 0.0];
        assert!((contrastive_track_loss(&[&a], &[&b], &pos, &w).unwrap() - 0.09).abs() < 1e-7);
        assert!((contrastive_track_loss(&[&a], &[&b], &neg, &w).unwrap() - 0.49).abs() < 1e-7);

        // Positives coincide and negatives sit beyond the margin.
        let prev = [[0.0f32, 0.0], [5.0, 0.0]];
        let cur = [[5.0f32, 0.0], [0.0, 0.0]];
        let y = PairLabels::from_ids(&[Some(1), Some(2)], &[Some(2), Some(1)]).unwrap();
        let rows = |m: &[[f32; 2]; 2]| m.iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        let (p, c) = (rows(&prev), rows(&cur));
        let pr: Vec<&[f32]> = p.iter().map(|r| r.as_slice()).collect();
        let cr: Vec<&[f32]> = c.iter().map(|r| r.as_slice()).collect();
        assert_eq!(contrastive_track_loss(&pr, &cr, &y, &w).unwrap(), 0.0);

        let wide = [0.0f32, 0.0, 0.0];
        assert!(contrastive_track_loss(&[&a], &[&wide], &pos, &w).is_err());
    }

    #[test]
    fn pair_labels_are_one_to_one() {
        let mut y = PairLabels::empty(3, 3);
        y.set(0, 1).unwrap();
        assert!(y.set(0, 2).is_err());
        assert!(y.set(2, 1).is_err());
        y.set(2, 0).unwrap();
        assert_eq!(y.positives().collect::<Vec<_>>(), vec![(0, 1), (2, 0)]);
        assert!(PairLabels::from_ids(&[Some(1), Some(1)], &[Some(1)]).is_err());
        assert_eq!(PairLabels::from_ids(&[None], &[None]).unwrap().positives().count(), 0);
    }

    #[test]
    fn detection_gradient_weights() {
        let mut tape = Tape::new();
        let cls = tape.leaf(Tensor::scalar(0.2)).unwrap();
        let off = tape.leaf(Tensor::scalar(0.1)).unwrap();
        let l = detection_loss_tape(&mut tape, cls, off, &LossWeights::default()).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(cls).data(), &[1.0]);
        assert_eq!(g.get(off).data(), &[5.0]);
    }

    #[test]
    fn contrastive_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 5;
        let w = LossWeights::default();
        let mut y = PairLabels::empty(k, k);
        for i in 0..k {
            y.set(i, (i + 2) % k).unwrap();
        }
        let prev = Tensor::new(vec![k, 4], (0..4 * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let cur = Tensor::new(vec![k, 4], (0..4 * k).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let res = check_gradients(&[prev, cur], GradCheckOptions::default(), |tape, v| {
            contrastive_track_loss_tape(tape, v[0], v[1], &y, &w)
        })
        .unwrap();
        assert!(res.passed, "{:?}", res);
    }

    #[test]
    fn hinge_region_has_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()).unwrap();
        let b = tape.leaf(Tensor::new(vec![1, 2], vec![1.5, 0.0]).unwrap()).unwrap();
        let y = PairLabels::empty(1, 1);
        let l = contrastive_track_loss_tape(&mut tape, a, b, &y, &LossWeights::default()).unwrap();
        assert_eq!(tape.scalar_value(l), 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.get(a).data().iter().chain(g.get(b).data()).all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(
            pred in proptest::collection::vec(0.0f32..=1.0, 16),
            gt in proptest::collection::vec(proptest::bool::ANY, 16),
            a in proptest::collection::vec(-2.0f32..2.0, 6),
            b in proptest::collection::vec(-2.0f32..2.0, 6),
            positive in proptest::bool::ANY,
        ) {
            let gt = Tensor::new(vec![4, 4], gt.iter().map(|&g| g as u8 as f32).collect()).unwrap();
            let d = dice_loss(&Tensor::new(vec![4, 4], pred).unwrap(), &gt).unwrap();
            prop_assert!(d >= 0.0 && d <= 1.0 + 1e-6);
            let y = if positive { PairLabels::from_ids(&[Some(0)], &[Some(0)]).unwrap() } else { PairLabels::empty(1, 1) };
            let c = contrastive_track_loss(&[&a[..3]], &[&b[3..]], &y, &LossWeights::default()).unwrap();
            prop_assert!(c >= 0.0);
        }

        #[test]
        fn total_loss_is_permutation_invariant(
            frames in proptest::collection::vec((0.0f64..3.0, 0.0f64..3.0), 1..8),
            seed in 0u64..1000,
        ) {
            let w = LossWeights::default();
            let (det, track): (Vec<f64>, Vec<f64>) = frames.iter().cloned().unzip();
            let mut idx: Vec<usize> = (0..frames.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..idx.len()).rev() {
                idx.swap(i, rng.random_range(0..=i));
            }
            let pd: Vec<f64> = idx.iter().map(|&i| det[i]).collect();
            let pt: Vec<f64> = idx.iter().map(|&i| track[i]).collect();
            let a = total_loss(&det, &track, &w).unwrap();
            let b = total_loss(&pd, &pt, &w).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
