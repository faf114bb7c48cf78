//! CLEAR-MOT tracking metrics and per-frame detection precision/recall.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{quad_iou, Quad};
use crate::tracker::{min_cost_assignment, CostMatrix};

/// Cost given to pairs below the IoU threshold so the solver only uses
/// them when nothing else is left; such pairs are discarded afterwards.
const BELOW_THRESHOLD_COST: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct GtTrack {
    pub id: u64,
    pub frames: BTreeMap<usize, Quad>,
}

/// One hypothesis box: a track id at a frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HypBox {
    pub frame: usize,
    pub track_id: u64,
    pub quad: Quad,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub gt_id: u64,
    pub hyp_id: u64,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotReport {
    pub mota: f64,
    /// Mean IoU of matched pairs, ×100. Zero when `motp_defined` is false.
    pub motp: f64,
    pub motp_defined: bool,
    pub false_positives: usize,
    pub misses: usize,
    pub id_switches: usize,
    pub gt_total: usize,
    pub matches: usize,
    pub frames: usize,
}

fn iou_or_zero(a: &Quad, b: &Quad) -> f64 {
    quad_iou(a, b).unwrap_or(0.0)
}

/// CLEAR correspondences for one frame. `prev` maps GT ids to the hypothesis
/// id they were last matched to; still-valid pairs from it are kept before
/// the rest is matched by maximum total IoU.
pub fn match_frame(
    gt: &[(u64, Quad)],
    hyp: &[(u64, Quad)],
    prev: &BTreeMap<u64, u64>,
    iou_thresh: f64,
) -> Result<Vec<Correspondence>> {
    if !(iou_thresh > 0.0 && iou_thresh < 1.0) {
        return Err(Error::usage(format!("iou threshold {} must lie in (0, 1)", iou_thresh)));
    }
    let mut out = Vec::new();
    let mut gt_used = vec![false; gt.len()];
    let mut hyp_used = vec![false; hyp.len()];
    for (gi, (gid, gq)) in gt.iter().enumerate() {
        let Some(&hid) = prev.get(gid) else { continue };
        if let Some(hi) = hyp.iter().position(|(h, _)| *h == hid) {
            if hyp_used[hi] {
                continue;
            }
            let iou = iou_or_zero(gq, &hyp[hi].1);
            if iou >= iou_thresh {
                gt_used[gi] = true;
                hyp_used[hi] = true;
                out.push(Correspondence {
                    gt_id: *gid,
                    hyp_id: hid,
                    iou,
                });
            }
        }
    }

    let free_gt: Vec<usize> = (0..gt.len()).filter(|&i| !gt_used[i]).collect();
    let free_hyp: Vec<usize> = (0..hyp.len()).filter(|&j| !hyp_used[j]).collect();
    let mut ious = Vec::with_capacity(free_gt.len() * free_hyp.len());
    let mut costs = Vec::with_capacity(free_gt.len() * free_hyp.len());
    for &gi in &free_gt {
        for &hj in &free_hyp {
            let iou = iou_or_zero(&gt[gi].1, &hyp[hj].1);
            ious.push(iou);
            costs.push(if iou >= iou_thresh {
                1.0 - iou
            } else {
                BELOW_THRESHOLD_COST
            });
        }
    }
    let cost = CostMatrix::new(free_gt.len(), free_hyp.len(), costs)?;
    for (a, b) in min_cost_assignment(&cost) {
        let iou = ious[a * free_hyp.len() + b];
        if iou >= iou_thresh {
            out.push(Correspondence {
                gt_id: gt[free_gt[a]].0,
                hyp_id: hyp[free_hyp[b]].0,
                iou,
            });
        }
    }
    out.sort_by_key(|c| c.gt_id);
    Ok(out)
}

/// CLEAR-MOT accumulation over every frame present in either input.
pub fn mot_metrics(gt: &[GtTrack], hyp: &[HypBox], iou_thresh: f64) -> Result<MotReport> {
    let mut ids = BTreeSet::new();
    for t in gt {
        if !ids.insert(t.id) {
            return Err(Error::usage(format!("ground truth id {} appears in two tracks", t.id)));
        }
    }
    let mut gt_frames: BTreeMap<usize, Vec<(u64, Quad)>> = BTreeMap::new();
    for t in gt {
        for (&f, q) in &t.frames {
            gt_frames.entry(f).or_default().push((t.id, *q));
        }
    }
    let gt_total: usize = gt_frames.values().map(Vec::len).sum();
    if gt_total == 0 {
        return Err(Error::usage("MOTA is undefined without ground-truth objects"));
    }
    let mut hyp_frames: BTreeMap<usize, Vec<(u64, Quad)>> = BTreeMap::new();
    for h in hyp {
        hyp_frames.entry(h.frame).or_default().push((h.track_id, h.quad));
    }
    for (f, boxes) in &hyp_frames {
        let mut seen = BTreeSet::new();
        if let Some((id, _)) = boxes.iter().find(|(id, _)| !seen.insert(*id)) {
            return Err(Error::usage(format!("track {} has two boxes in frame {}", id, f)));
        }
    }

    let frames: BTreeSet<usize> = gt_frames.keys().chain(hyp_frames.keys()).copied().collect();
    let mut last: BTreeMap<u64, u64> = BTreeMap::new();
    let (mut fp, mut misses, mut idsw, mut matches) = (0, 0, 0, 0);
    let mut iou_sum = 0.0;
    let empty = Vec::new();
    for &f in &frames {
        let g = gt_frames.get(&f).unwrap_or(&empty);
        let h = hyp_frames.get(&f).unwrap_or(&empty);
        let corr = match_frame(g, h, &last, iou_thresh)?;
        for c in &corr {
            if let Some(&prev) = last.get(&c.gt_id) {
                if prev != c.hyp_id {
                    idsw += 1;
                }
            }
            last.insert(c.gt_id, c.hyp_id);
            iou_sum += c.iou;
        }
        matches += corr.len();
        misses += g.len() - corr.len();
        fp += h.len() - corr.len();
    }
    let motp_defined = matches > 0;
    Ok(MotReport {
        mota: 100.0 * (1.0 - (misses + fp + idsw) as f64 / gt_total as f64),
        motp: if motp_defined {
            100.0 * iou_sum / matches as f64
        } else {
            0.0
        },
        motp_defined,
        false_positives: fp,
        misses,
        id_switches: idsw,
        gt_total,
        matches,
        frames: frames.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub misses: usize,
}

/// Precision, recall and F-measure with one-to-one maximum-IoU matching per
/// frame. Frames are aligned by position; a missing frame counts as empty.
pub fn detection_prf(gt: &[Vec<Quad>], det: &[Vec<Quad>], iou_thresh: f64) -> Result<DetectionReport> {
    let (mut tp, mut n_gt, mut n_det) = (0usize, 0usize, 0usize);
    let empty = Vec::new();
    for f in 0..gt.len().max(det.len()) {
        let g = gt.get(f).unwrap_or(&empty);
        let d = det.get(f).unwrap_or(&empty);
        let gi: Vec<(u64, Quad)> = g.iter().enumerate().map(|(i, q)| (i as u64, *q)).collect();
        let di: Vec<(u64, Quad)> = d.iter().enumerate().map(|(i, q)| (i as u64, *q)).collect();
        tp += match_frame(&gi, &di, &BTreeMap::new(), iou_thresh)?.len();
        n_gt += g.len();
        n_det += d.len();
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, n_det);
    let recall = ratio(tp, n_gt);
    let f_measure = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(DetectionReport {
        precision,
        recall,
        f_measure,
        true_positives: tp,
        false_positives: n_det - tp,
        misses: n_gt - tp,
    })
}

/// Five frames, two objects: one identity switch, one false positive and
/// one miss over ten ground-truth boxes.
pub fn scripted_error_scenario() -> (Vec<GtTrack>, Vec<HypBox>) {
    let a = |f: usize| Quad::rect(10.0 + 4.0 * f as f64, 10.0, 40.0, 12.0);
    let b = |f: usize| Quad::rect(10.0 + 4.0 * f as f64, 60.0, 40.0, 12.0);
    let gt = vec![
        GtTrack {
            id: 1,
            frames: (0..5).map(|f| (f, a(f))).collect(),
        },
        GtTrack {
            id: 2,
            frames: (0..5).map(|f| (f, b(f))).collect(),
        },
    ];
    let mut hyp = Vec::new();
    for f in 0..5 {
        hyp.push(HypBox {
            frame: f,
            // Object 1 is picked up by a new track from frame 3 on.
            track_id: if f < 3 { 100 } else { 300 },
            quad: a(f),
        });
        if f != 2 {
            hyp.push(HypBox {
                frame: f,
                track_id: 200,
                quad: b(f),
            });
        }
    }
    hyp.push(HypBox {
        frame: 4,
        track_id: 400,
        quad: Quad::rect(200.0, 200.0, 30.0, 10.0),
    });
    (gt, hyp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn boxes(items: &[(u64, Quad)]) -> Vec<(u64, Quad)> {
        items.to_vec()
    }

    #[test]
    fn perfect_and_disjoint_frames() {
        let q = Quad::rect(0.0, 0.0, 10.0, 10.0);
        let c = match_frame(&boxes(&[(1, q)]), &boxes(&[(7, q)]), &BTreeMap::new(), 0.5).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].iou, 1.0);
        let far = Quad::rect(100.0, 100.0, 10.0, 10.0);
        let c = match_frame(&boxes(&[(1, q)]), &boxes(&[(7, far)]), &BTreeMap::new(), 0.5).unwrap();
        assert!(c.is_empty());
        assert!(match_frame(&[], &[], &BTreeMap::new(), 1.0).is_err());
    }

    #[test]
    fn previous_correspondence_persists() {
        let gt = Quad::rect(0.0, 0.0, 10.0, 10.0);
        // IoU 0.6: width overlap 7.5 of 10 → 75 / (200 − 75).
        let old = Quad::rect(2.5, 0.0, 10.0, 10.0);
        // IoU 0.7: vertical shift s with (100 − 10s)/(100 + 10s) = 0.7.
        let new = Quad::rect(0.0, 30.0 / 17.0, 10.0, 10.0);
        let iou_old = quad_iou(&gt, &old).unwrap();
        let iou_new = quad_iou(&gt, &new).unwrap();
        assert!((iou_old - 0.6).abs() < 1e-12);
        assert!((iou_new - 0.7).abs() < 1e-9, "{}", iou_new);

        let fresh = match_frame(&[(1, gt)], &[(5, old), (6, new)], &BTreeMap::new(), 0.5).unwrap();
        assert_eq!(fresh[0].hyp_id, 6);
        let prev: BTreeMap<u64, u64> = [(1, 5)].into_iter().collect();
        let kept = match_frame(&[(1, gt)], &[(5, old), (6, new)], &prev, 0.5).unwrap();
        assert_eq!(kept[0].hyp_id, 5);
        assert!((kept[0].iou - 0.6).abs() < 1e-12);
    }

    fn identity_hyp(gt: &[GtTrack]) -> Vec<HypBox> {
        gt.iter()
            .flat_map(|t| {
                t.frames.iter().map(move |(&f, q)| HypBox {
                    frame: f,
                    track_id: t.id + 10,
                    quad: *q,
                })
            })
            .collect()
    }

    #[test]
    fn perfect_and_empty_hypotheses() {
        let (gt, _) = scripted_error_scenario();
        let r = mot_metrics(&gt, &identity_hyp(&gt), 0.5).unwrap();
        assert_eq!((r.mota, r.motp), (100.0, 100.0));
        assert_eq!((r.false_positives, r.misses, r.id_switches), (0, 0, 0));
        let r = mot_metrics(&gt, &[], 0.5).unwrap();
        assert_eq!(r.mota, 0.0);
        assert_eq!(r.motp, 0.0);
        assert!(!r.motp_defined);
        assert!(mot_metrics(&[], &[], 0.5).is_err());
    }

    #[test]
    fn scripted_scenario_scores_seventy() {
        let (gt, hyp) = scripted_error_scenario();
        let r = mot_metrics(&gt, &hyp, 0.5).unwrap();
        assert_eq!(r.gt_total, 10);
        assert_eq!((r.id_switches, r.false_positives, r.misses), (1, 1, 1));
        assert_eq!(r.mota, 70.0);
    }

    #[test]
    fn duplicate_gt_ids_rejected() {
        let (mut gt, hyp) = scripted_error_scenario();
        gt[1].id = 1;
        assert!(mot_metrics(&gt, &hyp, 0.5).is_err());
    }

    #[test]
    fn detection_examples() {
        let g: Vec<Quad> = (0..3).map(|i| Quad::rect(i as f64 * 30.0, 0.0, 20.0, 10.0)).collect();
        let r = detection_prf(&[g.clone()], &[g.clone()], 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f_measure), (1.0, 1.0, 1.0));
        let r = detection_prf(&[g.clone()], &[vec![]], 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f_measure), (0.0, 0.0, 0.0));
        let det = vec![g[0], g[1], Quad::rect(500.0, 500.0, 10.0, 10.0)];
        let r = detection_prf(&[g], &[det], 0.5).unwrap();
        for v in [r.precision, r.recall, r.f_measure] {
            assert!((v - 2.0 / 3.0).abs() < 1e-12);
        }
    }

    fn arb_scene() -> impl Strategy<Value = (Vec<GtTrack>, Vec<HypBox>)> {
        // Objects on a grid; hypotheses jitter each GT box or drop it.
        proptest::collection::vec((0u8..4, proptest::collection::vec((0u8..3, -3.0f64..3.0), 6)), 1..4).prop_map(
            |objs| {
                let mut gt = Vec::new();
                let mut hyp = Vec::new();
                for (k, (track, frames)) in objs.iter().enumerate() {
                    let mut t = GtTrack {
                        id: k as u64,
                        frames: BTreeMap::new(),
                    };
                    for (f, (kind, dx)) in frames.iter().enumerate() {
                        let q = Quad::rect(5.0 + 60.0 * k as f64, 10.0 + f as f64, 40.0, 12.0);
                        t.frames.insert(f, q);
                        if *kind > 0 {
                            hyp.push(HypBox {
                                frame: f,
                                track_id: 10 * k as u64 + *track as u64 * (*kind as u64 - 1),
                                quad: q.translate(*dx, 0.0),
                            });
                        }
                    }
                    gt.push(t);
                }
                (gt, hyp)
            },
        )
    }

    proptest! {
        #[test]
        fn extra_false_positive_lowers_mota((gt, hyp) in arb_scene(), frame in 0usize..6) {
            let base = mot_metrics(&gt, &hyp, 0.5).unwrap();
            let mut more = hyp.clone();
            more.push(HypBox { frame, track_id: 9999, quad: Quad::rect(1000.0, 1000.0, 5.0, 5.0) });
            let r = mot_metrics(&gt, &more, 0.5).unwrap();
            prop_assert!(r.mota < base.mota);
            prop_assert!(r.mota <= 100.0);
        }

        #[test]
        fn relabeling_keeps_scores((gt, hyp) in arb_scene(), offset in 1u64..1000) {
            let base = mot_metrics(&gt, &hyp, 0.5).unwrap();
            let relabeled: Vec<HypBox> = hyp.iter().map(|h| HypBox { track_id: h.track_id * 7 + offset, ..*h }).collect();
            let r = mot_metrics(&gt, &relabeled, 0.5).unwrap();
            prop_assert_eq!(base.mota, r.mota);
            prop_assert_eq!(base.motp, r.motp);
            prop_assert!(r.motp >= 0.0 && r.motp <= 100.0);
        }

        #[test]
        fn prf_roles_swap((gt, hyp) in arb_scene()) {
            let g: Vec<Vec<Quad>> = (0..6).map(|f| gt.iter().filter_map(|t| t.frames.get(&f).copied()).collect()).collect();
            let d: Vec<Vec<Quad>> = (0..6).map(|f| hyp.iter().filter(|h| h.frame == f).map(|h| h.quad).collect()).collect();
            let a = detection_prf(&g, &d, 0.5).unwrap();
            let b = detection_prf(&d, &g, 0.5).unwrap();
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
        }
    }
}
