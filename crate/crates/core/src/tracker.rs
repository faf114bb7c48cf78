//! Online trajectory generation: similarity, Kuhn-Munkres assignment and
//! tracklet bookkeeping.

use std::ops::Range;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::{estimate_eagd, Agd};
use crate::error::{Error, Result};
use crate::geometry::Quad;
use crate::recurrent::GruParams;
use crate::tensor::euclidean;

/// Cost used to pad rectangular matrices to square.
pub const PAD_COST: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{}×{} cost matrix with {} entries",
                rows,
                cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged cost matrix"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn total(&self, pairs: &[(usize, usize)]) -> f64 {
        pairs.iter().map(|&(i, j)| self.get(i, j)).sum()
    }
}

/// Pairwise Euclidean distances, previous rows against current columns.
pub fn similarity_matrix(prev: &[&[f32]], cur: &[&[f32]]) -> Result<CostMatrix> {
    let width = prev.iter().chain(cur).map(|v| v.len()).next().unwrap_or(0);
    if prev.iter().chain(cur).any(|v| v.len() != width) {
        return Err(Error::shape("descriptor widths differ"));
    }
    let mut data = Vec::with_capacity(prev.len() * cur.len());
    for a in prev {
        for b in cur {
            data.push(euclidean(a, b));
        }
    }
    CostMatrix::new(prev.len(), cur.len(), data)
}

/// Minimum-total-cost one-to-one matching of size `min(rows, cols)`,
/// sorted by row.
pub fn min_cost_assignment(cost: &CostMatrix) -> Vec<(usize, usize)> {
    let n = cost.rows.max(cost.cols);
    if cost.rows == 0 || cost.cols == 0 {
        return Vec::new();
    }
    let at = |i: usize, j: usize| {
        if i < cost.rows && j < cost.cols {
            cost.get(i, j)
        } else {
            PAD_COST
        }
    };
    // Shortest augmenting path with potentials; 1-based, index 0 is a sentinel.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = (1..=n)
        .filter_map(|j| {
            let i = col_owner[j] - 1;
            (i < cost.rows && j - 1 < cost.cols).then_some((i, j - 1))
        })
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Optimal matching with every pair costing more than `theta_m` removed.
pub fn kuhn_munkres(cost: &CostMatrix, theta_m: f64) -> Vec<(usize, usize)> {
    min_cost_assignment(cost)
        .into_iter()
        .filter(|&(i, j)| cost.get(i, j) <= theta_m)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Detection score threshold applied when decoding proposals.
    pub theta_l: f64,
    /// Raw score an unmatched proposal needs to start a tracklet.
    pub theta_h: f64,
    /// Largest descriptor distance accepted as a match.
    pub theta_m: f64,
    /// Length reward coefficient.
    pub tau: f64,
    /// Proposals kept per frame.
    pub k: usize,
    pub max_missed: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            theta_l: 0.4,
            theta_h: 0.8,
            theta_m: 1.0,
            tau: 0.05,
            k: 10,
            max_missed: 8,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.theta_l
            && self.theta_l <= self.theta_h
            && self.theta_h <= 1.0
            && self.theta_m > 0.0
            && self.tau >= 0.0
            && self.tau.is_finite()
            && self.k >= 1;
        if !ok {
            return Err(Error::usage(format!("invalid tracker config {:?}", self)));
        }
        Ok(())
    }
}

/// Which descriptors are compared at association time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchingMode {
    /// Previous-frame GRU estimates against current descriptors.
    #[default]
    EagdAgd,
    /// Previous-frame descriptors against current descriptors.
    AgdAgd,
}

/// Which part of the descriptor enters the distance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DescriptorMode {
    Appearance,
    Geometry,
    #[default]
    Agd,
}

impl DescriptorMode {
    fn range(self, width: usize, appearance_width: usize) -> Range<usize> {
        match self {
            DescriptorMode::Appearance => 0..appearance_width,
            DescriptorMode::Geometry => appearance_width..width,
            DescriptorMode::Agd => 0..width,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackPoint {
    pub frame: usize,
    pub quad: Quad,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tracklet {
    pub id: u64,
    pub history: Vec<TrackPoint>,
    /// GRU hidden state; empty when matching does not use estimates.
    pub h: Vec<f32>,
    pub eagd: Vec<f32>,
    pub last_agd: Vec<f32>,
    pub appearance_width: usize,
    pub missed: usize,
}

impl Tracklet {
    pub fn len(&self) -> usize {
        self.history.len()
    }

    pub fn is_empty(&self) -> bool {
        self.history.is_empty()
    }

    pub fn last(&self) -> &TrackPoint {
        self.history.last().expect("tracklets are never empty")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrackerState {
    pub active: Vec<Tracklet>,
    pub retired: Vec<Tracklet>,
    pub next_id: u64,
    pub frame: usize,
}

/// One confirmed detection of the current frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Confirmed {
    pub frame: usize,
    pub track_id: u64,
    pub quad: Quad,
    pub score: f64,
}

/// Wall time of the last `step`, split at the assignment.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepTiming {
    /// Similarity matrix plus Kuhn-Munkres.
    pub matching: Duration,
    /// Reward, spawn, retire and GRU advance.
    pub update: Duration,
}

pub struct Tracker {
    pub cfg: TrackerConfig,
    pub matching: MatchingMode,
    pub descriptor: DescriptorMode,
    gru: Option<GruParams<f32>>,
    pub state: TrackerState,
    timing: StepTiming,
}

impl Tracker {
    /// `gru` is required for `MatchingMode::EagdAgd`.
    pub fn new(
        cfg: TrackerConfig,
        matching: MatchingMode,
        descriptor: DescriptorMode,
        gru: Option<GruParams<f32>>,
    ) -> Result<Self> {
        cfg.validate()?;
        if matching == MatchingMode::EagdAgd && gru.is_none() {
            return Err(Error::usage("eagd-agd matching needs GRU parameters"));
        }
        if let Some(g) = &gru {
            g.validate()?;
            if g.input() != g.hidden() {
                return Err(Error::shape(format!(
                    "estimated descriptors must match descriptor width, GRU is {}→{}",
                    g.input(),
                    g.hidden()
                )));
            }
        }
        Ok(Self {
            cfg,
            matching,
            descriptor,
            gru,
            state: TrackerState::default(),
            timing: StepTiming::default(),
        })
    }

    pub fn last_timing(&self) -> StepTiming {
        self.timing
    }

    fn reference<'a>(&self, t: &'a Tracklet) -> &'a [f32] {
        match self.matching {
            MatchingMode::EagdAgd => &t.eagd,
            MatchingMode::AgdAgd => &t.last_agd,
        }
    }

    /// Processes one frame of NMS'd, top-K proposals and their descriptors.
    /// Returns the frame's confirmed detections ordered by track id.
    pub fn step(&mut self, detections: &[Quad], agds: &[Agd]) -> Result<Vec<Confirmed>> {
        if detections.len() != agds.len() {
            return Err(Error::usage(format!(
                "{} detections but {} descriptors",
                detections.len(),
                agds.len()
            )));
        }
        let started = Instant::now();
        let frame = self.state.frame;
        let width = agds.first().map(|a| a.width());
        if let (Some(w), Some(g)) = (width, &self.gru) {
            if w != g.input() {
                return Err(Error::shape(format!(
                    "descriptor width {} but GRU input {}",
                    w,
                    g.input()
                )));
            }
        }

        let matches = if let (Some(first), false) = (agds.first(), self.state.active.is_empty()) {
            let range = self.descriptor.range(first.width(), first.appearance_width);
            let prev: Vec<&[f32]> = self
                .state
                .active
                .iter()
                .map(|t| &self.reference(t)[range.clone()])
                .collect();
            let cur: Vec<&[f32]> = agds.iter().map(|a| &a.values[range.clone()]).collect();
            let cost = similarity_matrix(&prev, &cur)?;
            kuhn_munkres(&cost, self.cfg.theta_m)
        } else {
            Vec::new()
        };

        let matched_at = Instant::now();
        let mut proposal_taken = vec![false; detections.len()];
        let mut track_matched = vec![None; self.state.active.len()];
        for &(i, j) in &matches {
            proposal_taken[j] = true;
            track_matched[i] = Some(j);
        }

        // Matched tracklets: reward and append.
        for (t, m) in self.state.active.iter_mut().zip(&track_matched) {
            if let Some(j) = *m {
                let len = (t.history.len() + 1) as f64;
                let score = (detections[j].score + self.cfg.tau * len.ln()).clamp(0.0, 1.0);
                t.history.push(TrackPoint {
                    frame,
                    quad: detections[j].with_score(score),
                    score,
                });
                t.missed = 0;
                t.last_agd = agds[j].values.clone();
            }
        }

        // Unmatched tracklets age and may retire.
        let mut survivors = Vec::with_capacity(self.state.active.len());
        let mut advance: Vec<(usize, usize, bool)> = Vec::new();
        for (t, m) in std::mem::take(&mut self.state.active).into_iter().zip(track_matched) {
            match m {
                Some(j) => {
                    advance.push((survivors.len(), j, true));
                    survivors.push(t);
                }
                None => {
                    let mut t = t;
                    t.missed += 1;
                    if t.missed > self.cfg.max_missed {
                        self.state.retired.push(t);
                    } else {
                        survivors.push(t);
                    }
                }
            }
        }

        // Confident unmatched proposals start new tracklets.
        for (j, q) in detections.iter().enumerate() {
            if proposal_taken[j] || q.score < self.cfg.theta_h {
                continue;
            }
            let id = self.state.next_id;
            self.state.next_id += 1;
            advance.push((survivors.len(), j, false));
            survivors.push(Tracklet {
                id,
                history: vec![TrackPoint {
                    frame,
                    quad: *q,
                    score: q.score,
                }],
                h: Vec::new(),
                eagd: Vec::new(),
                last_agd: agds[j].values.clone(),
                appearance_width: agds[j].appearance_width,
                missed: 0,
            });
        }

        if let Some(gru) = &self.gru {
            let updates: Vec<_> = advance
                .par_iter()
                .map(|&(slot, j, mask)| estimate_eagd(&agds[j].values, &survivors[slot].h, mask, gru))
                .collect::<Result<_>>()?;
            for (&(slot, _, _), e) in advance.iter().zip(updates) {
                survivors[slot].eagd = e.values;
                survivors[slot].h = e.hidden;
            }
        }

        let mut confirmed: Vec<Confirmed> = advance
            .iter()
            .map(|&(slot, _, _)| {
                let t = &survivors[slot];
                let p = t.last();
                Confirmed {
                    frame,
                    track_id: t.id,
                    quad: p.quad,
                    score: p.score,
                }
            })
            .collect();
        confirmed.sort_by_key(|c| c.track_id);
        self.state.active = survivors;
        self.state.frame += 1;
        self.timing = StepTiming {
            matching: matched_at - started,
            update: matched_at.elapsed(),
        };
        Ok(confirmed)
    }

    /// Every tracklet seen so far, active and retired, ordered by id.
    pub fn all_tracklets(&self) -> Vec<&Tracklet> {
        let mut all: Vec<&Tracklet> = self.state.active.iter().chain(&self.state.retired).collect();
        all.sort_by_key(|t| t.id);
        all
    }
}

/// The `k` highest-scoring quads, ties kept in input order.
pub fn top_k(quads: &[Quad], k: usize) -> Vec<Quad> {
    let mut idx: Vec<usize> = (0..quads.len()).collect();
    idx.sort_by(|&a, &b| quads[b].score.total_cmp(&quads[a].score));
    idx.truncate(k);
    idx.into_iter().map(|i| quads[i]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptor::{make_agd, DescriptorLayout};
    use crate::synthlab::brute_force_assignment;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn quantized(rng: &mut impl Rng, rows: usize, cols: usize) -> CostMatrix {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(0..4096) as f64 / 1024.0)
            .collect();
        CostMatrix::new(rows, cols, data).unwrap()
    }

    fn padded_rows(c: &CostMatrix) -> Vec<Vec<f64>> {
        let n = c.rows().max(c.cols());
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| if i < c.rows() && j < c.cols() { c.get(i, j) } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn similarity_examples() {
        let a = [1.0f32, 0.0];
        let s = similarity_matrix(&[&a], &[&a]).unwrap();
        assert_eq!(s.get(0, 0), 0.0);
        let b = [0.0f32, 1.0];
        let s = similarity_matrix(&[&a, &b], &[&a, &b]).unwrap();
        assert!((s.get(0, 1) - 2f64.sqrt()).abs() < 1e-12);
        assert!((s.get(1, 0) - 2f64.sqrt()).abs() < 1e-12);
        assert!(similarity_matrix(&[&a], &[&[0.0f32; 3]]).is_err());
    }

    #[test]
    fn similarity_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let prev: Vec<Vec<f32>> = (0..4)
            .map(|_| (0..136).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let cur: Vec<Vec<f32>> = (0..6)
            .map(|_| (0..136).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let p: Vec<&[f32]> = prev.iter().map(|v| v.as_slice()).collect();
        let c: Vec<&[f32]> = cur.iter().map(|v| v.as_slice()).collect();
        let s = similarity_matrix(&p, &c).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let mut acc = 0.0f64;
                for k in 0..136 {
                    let d = prev[i][k] as f64 - cur[j][k] as f64;
                    acc += d * d;
                }
                assert!((s.get(i, j) - acc.sqrt()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn assignment_examples() {
        let one = CostMatrix::from_rows(&[vec![0.0]]).unwrap();
        assert_eq!(kuhn_munkres(&one, 1.0), vec![(0, 0)]);
        let two = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        let m = kuhn_munkres(&two, 10.0);
        assert_eq!(m, vec![(0, 0), (1, 1)]);
        assert_eq!(two.total(&m), 2.0);
        let far = CostMatrix::from_rows(&[vec![0.5, 3.0], vec![3.0, 0.5]]).unwrap();
        assert!(kuhn_munkres(&far, 0.4).is_empty());
        assert!(kuhn_munkres(&CostMatrix::new(0, 3, vec![]).unwrap(), 1.0).is_empty());
    }

    #[test]
    fn assignment_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..300 {
            let (r, c) = (rng.random_range(1..=7), rng.random_range(1..=7));
            let cost = quantized(&mut rng, r, c);
            let m = min_cost_assignment(&cost);
            assert_eq!(m.len(), r.min(c));
            let (_, best) = brute_force_assignment(&padded_rows(&cost)).unwrap();
            assert_eq!(cost.total(&m), best);
        }
    }

    proptest! {
        #[test]
        fn assignment_is_one_to_one(r in 1usize..9, c in 1usize..9, seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = quantized(&mut rng, r, c);
            let m = min_cost_assignment(&cost);
            let mut rows: Vec<usize> = m.iter().map(|p| p.0).collect();
            let mut cols: Vec<usize> = m.iter().map(|p| p.1).collect();
            rows.dedup();
            cols.sort_unstable();
            cols.dedup();
            prop_assert_eq!(rows.len(), m.len());
            prop_assert_eq!(cols.len(), m.len());
            prop_assert_eq!(m, min_cost_assignment(&cost));
        }
    }

    fn agd_at(values: Vec<f32>) -> Agd {
        let n = values.len();
        make_agd(
            &Tensor::from_vec(values[..n - 2].to_vec()).unwrap(),
            &Tensor::from_vec(values[n - 2..].to_vec()).unwrap(),
            DescriptorLayout {
                appearance: n - 2,
                geometry: 2,
            },
            0,
        )
        .unwrap()
    }

    fn agd_tracker(cfg: TrackerConfig) -> Tracker {
        Tracker::new(cfg, MatchingMode::AgdAgd, DescriptorMode::Agd, None).unwrap()
    }

    #[test]
    fn empty_frame_on_empty_state() {
        let mut t = agd_tracker(TrackerConfig::default());
        assert!(t.step(&[], &[]).unwrap().is_empty());
        assert!(t.state.active.is_empty() && t.state.retired.is_empty());
    }

    #[test]
    fn confident_detection_spawns() {
        let mut t = agd_tracker(TrackerConfig::default());
        let q = Quad::rect(0.0, 0.0, 10.0, 4.0).with_score(0.9);
        let d = t.step(&[q], &[agd_at(vec![0.0; 4])]).unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].track_id, 0);
        assert_eq!(d[0].score, 0.9);
        let low = Quad::rect(50.0, 0.0, 10.0, 4.0).with_score(0.5);
        let d = t.step(&[low], &[agd_at(vec![9.0; 4])]).unwrap();
        assert!(d.is_empty());
        assert!(t.step(&[q], &[]).is_err());
    }

    #[test]
    fn repeat_detection_is_rewarded() {
        let cfg = TrackerConfig {
            theta_m: 1e9,
            ..Default::default()
        };
        let mut t = agd_tracker(cfg);
        let q = Quad::rect(3.0, 3.0, 20.0, 6.0).with_score(0.85);
        let a = agd_at(vec![0.1, 0.2, 0.3, 0.4]);
        t.step(&[q], &[a.clone()]).unwrap();
        let d = t.step(&[q], &[a.clone()]).unwrap();
        let expected = (0.85 + 0.05 * 2f64.ln()).clamp(0.0, 1.0);
        assert!((d[0].score - expected).abs() < 1e-12);
        let d = t.step(&[q.with_score(0.99)], &[a]).unwrap();
        assert_eq!(d[0].score, 1.0);
    }

    #[test]
    fn one_proposal_forever_keeps_one_tracklet() {
        let cfg = TrackerConfig {
            theta_m: f64::INFINITY,
            ..Default::default()
        };
        let mut t = agd_tracker(cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for f in 0..50 {
            let q = Quad::rect(rng.random_range(0.0..100.0), 5.0, 10.0, 4.0).with_score(0.9);
            let a = agd_at((0..4).map(|_| rng.random_range(-50.0..50.0)).collect());
            let d = t.step(&[q], &[a]).unwrap();
            assert_eq!(d.len(), 1);
            assert_eq!(d[0].track_id, 0, "frame {}", f);
        }
        assert_eq!(t.all_tracklets().len(), 1);
    }

    #[test]
    fn unmatched_tracklet_retires() {
        let cfg = TrackerConfig {
            max_missed: 2,
            ..Default::default()
        };
        let mut t = agd_tracker(cfg);
        let q = Quad::rect(0.0, 0.0, 10.0, 4.0).with_score(0.9);
        t.step(&[q], &[agd_at(vec![0.0; 4])]).unwrap();
        for _ in 0..2 {
            t.step(&[], &[]).unwrap();
            assert_eq!(t.state.active.len(), 1);
        }
        t.step(&[], &[]).unwrap();
        assert!(t.state.active.is_empty());
        assert_eq!(t.state.retired.len(), 1);
        // Same descriptor again: a fresh id, never the retired one.
        let d = t.step(&[q], &[agd_at(vec![0.0; 4])]).unwrap();
        assert_eq!(d[0].track_id, 1);
    }

    #[test]
    fn eagd_mode_uses_gru_and_requires_it() {
        assert!(Tracker::new(
            TrackerConfig::default(),
            MatchingMode::EagdAgd,
            DescriptorMode::Agd,
            None
        )
        .is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gru = GruParams::<f32>::init(4, 4, &mut rng);
        let mut t = Tracker::new(
            TrackerConfig::default(),
            MatchingMode::EagdAgd,
            DescriptorMode::Agd,
            Some(gru.clone()),
        )
        .unwrap();
        let q = Quad::rect(0.0, 0.0, 10.0, 4.0).with_score(0.9);
        let a = agd_at(vec![0.1, -0.2, 0.3, 0.0]);
        t.step(&[q], &[a.clone()]).unwrap();
        let expected = estimate_eagd(&a.values, &[], false, &gru).unwrap();
        assert_eq!(t.state.active[0].eagd, expected.values);
        assert!(t.step(&[q], &[agd_at(vec![0.0; 6])]).is_err());
    }
}
