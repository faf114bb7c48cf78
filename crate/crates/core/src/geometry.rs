//! Quadrangle geometry: areas, convex clipping IoU, NMS, per-pixel target
//! encoding/decoding and the four-point homography behind ROI sampling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const AREA_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }

    fn lerp(self, o: Point, t: f64) -> Point {
        Point::new(self.x + (o.x - self.x) * t, self.y + (o.y - self.y) * t)
    }
}

/// Four vertices in pixel coordinates, clockwise on screen (y down) starting
/// at the top-left vertex, plus a confidence score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quad {
    pub vertices: [Point; 4],
    pub score: f64,
}

impl Quad {
    pub fn new(vertices: [Point; 4], score: f64) -> Self {
        Self { vertices, score }
    }

    pub fn from_coords(c: [f64; 8], score: f64) -> Self {
        Self::new(
            [
                Point::new(c[0], c[1]),
                Point::new(c[2], c[3]),
                Point::new(c[4], c[5]),
                Point::new(c[6], c[7]),
            ],
            score,
        )
    }

    /// Axis-aligned rectangle with top-left corner `(x, y)`.
    pub fn rect(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::from_coords([x, y, x + w, y, x + w, y + h, x, y + h], 1.0)
    }

    pub fn coords(&self) -> [f64; 8] {
        let v = &self.vertices;
        [v[0].x, v[0].y, v[1].x, v[1].y, v[2].x, v[2].y, v[3].x, v[3].y]
    }

    pub fn with_score(mut self, score: f64) -> Self {
        self.score = score;
        self
    }

    /// Shoelace area; positive for screen-clockwise order.
    pub fn signed_area(&self) -> f64 {
        polygon_signed_area(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn centroid(&self) -> Point {
        let v = &self.vertices;
        Point::new(
            (v[0].x + v[1].x + v[2].x + v[3].x) / 4.0,
            (v[0].y + v[1].y + v[2].y + v[3].y) / 4.0,
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Quad {
        let mut q = *self;
        for v in &mut q.vertices {
            v.x += dx;
            v.y += dy;
        }
        q
    }

    pub fn scale(&self, s: f64) -> Quad {
        let mut q = *self;
        for v in &mut q.vertices {
            v.x *= s;
            v.y *= s;
        }
        q
    }

    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let xs = self.vertices.iter().map(|p| p.x);
        let ys = self.vertices.iter().map(|p| p.y);
        (
            xs.clone().fold(f64::INFINITY, f64::min),
            ys.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
            ys.fold(f64::NEG_INFINITY, f64::max),
        )
    }

    pub fn min_edge(&self) -> f64 {
        (0..4)
            .map(|i| self.vertices[i].dist(self.vertices[(i + 1) % 4]))
            .fold(f64::INFINITY, f64::min)
    }

    /// Finite, convex, non-self-intersecting and of positive area.
    pub fn validate(&self) -> Result<()> {
        if self.vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::geometry("quad has non-finite vertices"));
        }
        let area = self.signed_area();
        if area.abs() <= AREA_EPS {
            return Err(Error::geometry(format!("degenerate quad (area {:e})", area)));
        }
        let sign = area.signum();
        for i in 0..4 {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % 4];
            let c = self.vertices[(i + 2) % 4];
            let turn = b.sub(a).cross(c.sub(b));
            if turn * sign <= 0.0 {
                return Err(Error::geometry(format!(
                    "quad is not strictly convex at vertex {}",
                    (i + 1) % 4
                )));
            }
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    /// Point containment, boundary included.
    pub fn contains(&self, p: Point) -> bool {
        let sign = self.signed_area().signum();
        (0..4).all(|i| {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % 4];
            b.sub(a).cross(p.sub(a)) * sign >= 0.0
        })
    }

    /// Same vertices in positive (screen-clockwise) order starting at the
    /// vertex with the smallest `x + y`.
    pub fn canonical(&self) -> Quad {
        let mut v = self.vertices;
        if self.signed_area() < 0.0 {
            v.reverse();
        }
        let start = (0..4)
            .min_by(|&a, &b| {
                let ka = v[a].x + v[a].y;
                let kb = v[b].x + v[b].y;
                ka.partial_cmp(&kb).unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(0);
        v.rotate_left(start);
        Quad::new(v, self.score)
    }

    /// Moves each edge inwards in proportion to the shorter adjacent edge,
    /// longer edge pair first.
    pub fn shrink(&self, ratio: f64) -> Quad {
        if ratio <= 0.0 {
            return *self;
        }
        let mut p = self.vertices;
        let r: Vec<f64> = (0..4)
            .map(|i| p[i].dist(p[(i + 1) % 4]).min(p[i].dist(p[(i + 3) % 4])))
            .collect();
        let shrink_edge = |p: &mut [Point; 4], i: usize, j: usize| {
            let len = p[i].dist(p[j]);
            if len <= 0.0 {
                return;
            }
            let a = p[i];
            let b = p[j];
            p[i] = a.lerp(b, (ratio * r[i] / len).min(0.5));
            p[j] = b.lerp(a, (ratio * r[j] / len).min(0.5));
        };
        let horizontal = p[0].dist(p[1]) + p[2].dist(p[3]) > p[0].dist(p[3]) + p[1].dist(p[2]);
        if horizontal {
            shrink_edge(&mut p, 0, 1);
            shrink_edge(&mut p, 2, 3);
            shrink_edge(&mut p, 3, 0);
            shrink_edge(&mut p, 1, 2);
        } else {
            shrink_edge(&mut p, 3, 0);
            shrink_edge(&mut p, 1, 2);
            shrink_edge(&mut p, 0, 1);
            shrink_edge(&mut p, 2, 3);
        }
        Quad::new(p, self.score)
    }
}

pub fn polygon_signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        s += poly[i].cross(poly[(i + 1) % n]);
    }
    0.5 * s
}

/// Sutherland–Hodgman: clips `subject` against the convex, positively
/// oriented polygon `clip`.
fn clip_polygon(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output: Vec<Point> = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let edge = b.sub(a);
        let side = |p: Point| edge.cross(p.sub(a));
        let input = std::mem::take(&mut output);
        let m = input.len();
        for k in 0..m {
            let cur = input[k];
            let prev = input[(k + m - 1) % m];
            let (sc, sp) = (side(cur), side(prev));
            if sc >= 0.0 {
                if sp < 0.0 {
                    output.push(prev.lerp(cur, sp / (sp - sc)));
                }
                output.push(cur);
            } else if sp >= 0.0 {
                output.push(prev.lerp(cur, sp / (sp - sc)));
            }
        }
    }
    output
}

fn positive(q: &Quad) -> [Point; 4] {
    let mut v = q.vertices;
    if q.signed_area() < 0.0 {
        v.reverse();
    }
    v
}

pub fn intersection_area(a: &Quad, b: &Quad) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let (bx0, by0, bx1, by1) = b.bounds();
    if ax1 <= bx0 || bx1 <= ax0 || ay1 <= by0 || by1 <= ay0 {
        return 0.0;
    }
    let clipped = clip_polygon(&positive(a), &positive(b));
    polygon_signed_area(&clipped).max(0.0)
}

/// Intersection over union of two valid quads.
pub fn quad_iou(a: &Quad, b: &Quad) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &Quad, b: &Quad) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression. Candidates are visited by descending
/// score (ties by input index); a candidate is dropped when its IoU with an
/// already kept quad exceeds `iou_thresh`. Invalid quads are dropped.
/// Returns the kept quads in visiting order.
pub fn nms(proposals: &[Quad], iou_thresh: f64) -> Vec<Quad> {
    nms_indices(proposals, iou_thresh)
        .into_iter()
        .map(|i| proposals[i])
        .collect()
}

pub fn nms_indices(proposals: &[Quad], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..proposals.len())
        .filter(|&i| proposals[i].is_valid() && proposals[i].score.is_finite())
        .collect();
    order.sort_by(|&a, &b| {
        proposals[b]
            .score
            .partial_cmp(&proposals[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let q = &proposals[i];
        if kept.iter().all(|&k| iou_unchecked(&proposals[k], q) <= iou_thresh) {
            kept.push(i);
        }
    }
    kept
}

/// Score map (1×H×W) and per-pixel vertex offsets (8×H×W, map pixels).
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMaps {
    pub score: Tensor<f32>,
    pub offsets: Tensor<f32>,
}

impl DetectionMaps {
    pub fn zeros(h: usize, w: usize) -> Self {
        Self {
            score: Tensor::zeros(vec![1, h, w]),
            offsets: Tensor::zeros(vec![8, h, w]),
        }
    }

    pub fn height(&self) -> usize {
        self.score.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.score.shape()[2]
    }

    /// Splits a 9×H×W tensor: channel 0 is the score, 1..9 the offsets.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        match t.shape() {
            [9, _, _] => Ok(Self {
                score: t.slice(0, 0, 1)?,
                offsets: t.slice(0, 1, 8)?,
            }),
            s => Err(Error::shape(format!("detection maps need 9×H×W, got {:?}", s))),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::concat(&[&self.score, &self.offsets], 0)
    }
}

/// Pixel `(row, col)` of a map with stride `scale` covers the image point
/// `((col + 0.5)·scale, (row + 0.5)·scale)`.
fn pixel_center(row: usize, col: usize) -> Point {
    Point::new(col as f64 + 0.5, row as f64 + 0.5)
}

/// Rasterizes ground-truth quads (image coordinates) into detection targets.
/// A pixel is positive when its centre lies inside the shrunk quad; its
/// offsets point to the original vertices. Later quads overwrite earlier
/// ones where they overlap.
pub fn encode_targets(gt: &[Quad], map_h: usize, map_w: usize, scale: f64, shrink: f64) -> Result<DetectionMaps> {
    if !(scale > 0.0) {
        return Err(Error::usage(format!(
            "encode_targets: scale must be positive, got {}",
            scale
        )));
    }
    if map_h == 0 || map_w == 0 {
        return Err(Error::usage("encode_targets: empty map"));
    }
    let mut maps = DetectionMaps::zeros(map_h, map_w);
    let plane = map_h * map_w;
    for q in gt {
        q.validate()?;
        let in_map = q.scale(1.0 / scale);
        let region = in_map.shrink(shrink);
        let (x0, y0, x1, y1) = region.bounds();
        let c0 = (x0 - 0.5).floor().max(0.0) as usize;
        let r0 = (y0 - 0.5).floor().max(0.0) as usize;
        let c1 = ((x1 - 0.5).ceil().max(0.0) as usize).min(map_w - 1);
        let r1 = ((y1 - 0.5).ceil().max(0.0) as usize).min(map_h - 1);
        if c0 > c1 || r0 > r1 {
            continue;
        }
        for row in r0..=r1 {
            for col in c0..=c1 {
                let p = pixel_center(row, col);
                if !region.contains(p) {
                    continue;
                }
                let idx = row * map_w + col;
                maps.score.data_mut()[idx] = 1.0;
                for (k, v) in in_map.vertices.iter().enumerate() {
                    maps.offsets.data_mut()[(2 * k) * plane + idx] = (v.x - p.x) as f32;
                    maps.offsets.data_mut()[(2 * k + 1) * plane + idx] = (v.y - p.y) as f32;
                }
            }
        }
    }
    Ok(maps)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Decoded {
    pub proposals: Vec<Quad>,
    /// Positive pixels whose offsets were not finite.
    pub skipped_nonfinite: usize,
    /// Positive pixels whose quad was not convex or had no area.
    pub skipped_degenerate: usize,
}

/// One proposal per pixel with `score ≥ threshold`, in image coordinates and
/// row-major pixel order. No suppression is applied.
pub fn decode_proposals(maps: &DetectionMaps, threshold: f64, scale: f64) -> Result<Decoded> {
    // Thresholds above 1 are allowed and simply select nothing.
    if !(threshold >= 0.0) {
        return Err(Error::usage(format!(
            "decode threshold {} is negative or NaN",
            threshold
        )));
    }
    let (h, w) = (maps.height(), maps.width());
    if maps.offsets.shape() != [8, h, w] {
        return Err(Error::shape(format!(
            "offset maps {:?} do not match score map {}×{}",
            maps.offsets.shape(),
            h,
            w
        )));
    }
    let plane = h * w;
    let sd = maps.score.data();
    let od = maps.offsets.data();
    let mut out = Decoded::default();
    for row in 0..h {
        for col in 0..w {
            let idx = row * w + col;
            let s = sd[idx] as f64;
            if !(s >= threshold) {
                continue;
            }
            let p = pixel_center(row, col);
            let mut c = [0f64; 8];
            for k in 0..4 {
                let dx = od[(2 * k) * plane + idx] as f64;
                let dy = od[(2 * k + 1) * plane + idx] as f64;
                c[2 * k] = (p.x + dx) * scale;
                c[2 * k + 1] = (p.y + dy) * scale;
            }
            if c.iter().any(|v| !v.is_finite()) {
                out.skipped_nonfinite += 1;
                continue;
            }
            let q = Quad::from_coords(c, s);
            if !q.is_valid() {
                out.skipped_degenerate += 1;
                continue;
            }
            out.proposals.push(q);
        }
    }
    if out.skipped_nonfinite > 0 {
        log::warn!(
            "decode skipped {} pixels with non-finite offsets",
            out.skipped_nonfinite
        );
    }
    Ok(out)
}

/// Projective map `(u, v) ↦ (x, y)` with `h[2][2] = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn apply(&self, u: f64, v: f64) -> (f64, f64) {
        let m = &self.m;
        let w = m[2][0] * u + m[2][1] * v + m[2][2];
        (
            (m[0][0] * u + m[0][1] * v + m[0][2]) / w,
            (m[1][0] * u + m[1][1] * v + m[1][2]) / w,
        )
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Result<Self> {
        let det = self.determinant();
        if det.abs() <= 1e-9 {
            return Err(Error::geometry(format!("homography is singular (det {:e})", det)));
        }
        let m = &self.m;
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let norm = adj[2][2] / det;
        if norm.abs() < 1e-15 {
            return Err(Error::geometry("inverse homography cannot be normalized"));
        }
        let mut out = [[0.0; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                out[r][c] = adj[r][c] / det / norm;
            }
        }
        Ok(Self { m: out })
    }
}

/// Maps the output grid corners (0,0), (w−1,0), (w−1,h−1), (0,h−1) onto the
/// quad's vertices in order.
pub fn homography_from_quad(q: &Quad, out_w: usize, out_h: usize) -> Result<Homography> {
    if out_w < 2 || out_h < 2 {
        return Err(Error::usage("ROI grid must be at least 2×2"));
    }
    let v = &q.vertices;
    if v.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::geometry("quad has non-finite vertices"));
    }
    let extent = {
        let (x0, y0, x1, y1) = q.bounds();
        (x1 - x0).max(y1 - y0).max(1e-12)
    };
    for i in 0..4 {
        let a = v[i];
        let b = v[(i + 1) % 4];
        let c = v[(i + 2) % 4];
        if b.sub(a).cross(c.sub(a)).abs() <= 1e-9 * extent * extent {
            return Err(Error::geometry(format!(
                "vertices {}, {}, {} are collinear",
                i,
                (i + 1) % 4,
                (i + 2) % 4
            )));
        }
    }

    let (wm, hm) = ((out_w - 1) as f64, (out_h - 1) as f64);
    let src = [(0.0, 0.0), (wm, 0.0), (wm, hm), (0.0, hm)];
    let mut a = [[0f64; 9]; 8];
    for k in 0..4 {
        let (u, w) = src[k];
        let (x, y) = (v[k].x, v[k].y);
        a[2 * k] = [u, w, 1.0, 0.0, 0.0, 0.0, -u * x, -w * x, x];
        a[2 * k + 1] = [0.0, 0.0, 0.0, u, w, 1.0, -u * y, -w * y, y];
    }
    let h = solve_augmented(&mut a)?;
    let hom = Homography {
        m: [[h[0], h[1], h[2]], [h[3], h[4], h[5]], [h[6], h[7], 1.0]],
    };
    if hom.determinant().abs() <= 1e-9 {
        return Err(Error::geometry("homography is singular"));
    }
    Ok(hom)
}

/// Gaussian elimination with partial pivoting on an 8×9 augmented system.
fn solve_augmented(a: &mut [[f64; 9]; 8]) -> Result<[f64; 8]> {
    let scale = a
        .iter()
        .flat_map(|r| r[..8].iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    for col in 0..8 {
        let pivot = (col..8)
            .max_by(|&i, &j| {
                a[i][col]
                    .abs()
                    .partial_cmp(&a[j][col].abs())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .unwrap_or(col);
        if a[pivot][col].abs() <= 1e-12 * scale {
            return Err(Error::geometry("singular homography system"));
        }
        a.swap(col, pivot);
        for row in 0..8 {
            if row == col {
                continue;
            }
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..9 {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut x = [0f64; 8];
    for i in 0..8 {
        x[i] = a[i][8] / a[i][i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlab::{monte_carlo_iou, random_convex_quad};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(x: f64, y: f64) -> Quad {
        Quad::rect(x, y, 1.0, 1.0)
    }

    #[test]
    fn iou_basic_cases() {
        let q = unit(0.0, 0.0);
        assert_eq!(quad_iou(&q, &q).unwrap(), 1.0);
        assert_eq!(quad_iou(&q, &unit(10.0, 10.0)).unwrap(), 0.0);
        let shifted = quad_iou(&q, &unit(0.5, 0.0)).unwrap();
        assert!((shifted - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou_rejects_degenerate() {
        let flat = Quad::from_coords([0.0, 0.0, 1.0, 0.0, 2.0, 0.0, 3.0, 0.0], 1.0);
        assert!(matches!(quad_iou(&flat, &unit(0.0, 0.0)), Err(Error::Geometry(_))));
    }

    #[test]
    fn iou_ignores_orientation() {
        let q = Quad::from_coords([0.0, 0.0, 4.0, 1.0, 5.0, 4.0, 1.0, 3.0], 1.0);
        let mut rev = q;
        rev.vertices.reverse();
        let other = Quad::rect(1.0, 1.0, 3.0, 3.0);
        let a = quad_iou(&q, &other).unwrap();
        let b = quad_iou(&rev, &other).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn iou_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for i in 0..10 {
            let a = random_convex_quad(&mut rng, 0.0, 0.0, 40.0, 40.0);
            let b = random_convex_quad(&mut rng, 0.0, 0.0, 40.0, 40.0);
            let exact = quad_iou(&a, &b).unwrap();
            let mc = monte_carlo_iou(&a, &b, 100_000, i).unwrap();
            assert!((exact - mc).abs() < 0.01, "pair {}: {} vs {}", i, exact, mc);
        }
    }

    #[test]
    fn nms_cases() {
        let q = unit(0.0, 0.0);
        assert_eq!(nms(&[q.with_score(0.5)], 0.2).len(), 1);
        let kept = nms(&[q.with_score(0.8), q.with_score(0.9)], 0.2);
        assert_eq!(kept, vec![q.with_score(0.9)]);
        assert!(nms(&[], 0.2).is_empty());
        // equal scores keep the first input
        let a = unit(0.0, 0.0).with_score(0.7);
        let b = unit(0.1, 0.0).with_score(0.7);
        assert_eq!(nms_indices(&[a, b], 0.2), vec![0]);
    }

    fn brute_nms(props: &[Quad], thresh: f64) -> Vec<usize> {
        // A quad survives iff no higher-ranked survivor overlaps it.
        let rank = |i: usize, j: usize| props[i].score > props[j].score || (props[i].score == props[j].score && i < j);
        let mut alive = vec![false; props.len()];
        let mut decided = vec![false; props.len()];
        while decided.iter().any(|d| !d) {
            let next = (0..props.len())
                .filter(|&i| !decided[i])
                .find(|&i| (0..props.len()).all(|j| decided[j] || j == i || rank(i, j)))
                .unwrap();
            alive[next] = (0..props.len())
                .filter(|&j| alive[j])
                .all(|j| quad_iou(&props[j], &props[next]).unwrap() <= thresh);
            decided[next] = true;
        }
        (0..props.len()).filter(|&i| alive[i]).collect()
    }

    #[test]
    fn nms_matches_quadratic_reference() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..20 {
            let props: Vec<Quad> = (0..20)
                .map(|_| {
                    let s = rng.random_range(0.0..1.0);
                    random_convex_quad(&mut rng, 0.0, 0.0, 30.0, 30.0).with_score(s)
                })
                .collect();
            let mut got = nms_indices(&props, 0.2);
            got.sort_unstable();
            assert_eq!(got, brute_nms(&props, 0.2));
        }
    }

    #[test]
    fn encode_square_center_offsets() {
        // square covering map pixels 2..6 at stride 4
        let gt = Quad::rect(8.0, 8.0, 16.0, 16.0);
        let maps = encode_targets(&[gt], 10, 10, 4.0, 0.0).unwrap();
        let (row, col) = (3usize, 3usize);
        let idx = row * 10 + col;
        assert_eq!(maps.score.data()[idx], 1.0);
        let p = pixel_center(row, col);
        let expect = [
            2.0 - p.x,
            2.0 - p.y,
            6.0 - p.x,
            2.0 - p.y,
            6.0 - p.x,
            6.0 - p.y,
            2.0 - p.x,
            6.0 - p.y,
        ];
        for k in 0..8 {
            assert_eq!(maps.offsets.data()[k * 100 + idx] as f64, expect[k]);
        }
        assert_eq!(maps.score.data().iter().filter(|&&s| s == 1.0).count(), 16);
    }

    #[test]
    fn encode_without_gt_is_zero() {
        let maps = encode_targets(&[], 6, 7, 4.0, 0.0).unwrap();
        assert!(maps.score.data().iter().all(|&v| v == 0.0));
        assert!(maps.offsets.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn later_quads_win_overlaps() {
        let a = Quad::rect(0.0, 0.0, 16.0, 16.0);
        let b = Quad::rect(8.0, 8.0, 16.0, 16.0);
        let maps = encode_targets(&[a, b], 8, 8, 4.0, 0.0).unwrap();
        let idx = 2 * 8 + 2; // inside both
        let p = pixel_center(2, 2);
        assert_eq!(maps.offsets.data()[idx] as f64, 2.0 - p.x);
    }

    #[test]
    fn shrink_reduces_positive_area() {
        let gt = Quad::rect(8.0, 8.0, 64.0, 16.0);
        let full = encode_targets(&[gt], 32, 32, 4.0, 0.0).unwrap();
        let shrunk = encode_targets(&[gt], 32, 32, 4.0, 0.3).unwrap();
        let count = |m: &DetectionMaps| m.score.data().iter().filter(|&&s| s > 0.0).count();
        assert!(count(&shrunk) < count(&full));
        assert!(count(&shrunk) > 0);
    }

    #[test]
    fn decode_edge_cases() {
        let gt = Quad::rect(8.0, 8.0, 16.0, 16.0);
        let maps = encode_targets(&[gt], 10, 10, 4.0, 0.0).unwrap();
        assert!(decode_proposals(&maps, 1.1, 4.0).unwrap().proposals.is_empty());
        let zero = DetectionMaps::zeros(5, 5);
        assert!(decode_proposals(&zero, 0.5, 4.0).unwrap().proposals.is_empty());
    }

    #[test]
    fn decode_skips_non_finite_offsets() {
        let gt = Quad::rect(8.0, 8.0, 16.0, 16.0);
        let mut maps = encode_targets(&[gt], 10, 10, 4.0, 0.0).unwrap();
        maps.offsets.data_mut()[3 * 10 + 3] = f32::NAN;
        let d = decode_proposals(&maps, 0.5, 4.0).unwrap();
        assert_eq!(d.skipped_nonfinite, 1);
        assert_eq!(d.proposals.len(), 15);
    }

    #[test]
    fn roundtrip_random_quads() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let scale = 4.0;
        for _ in 0..50 {
            // Quads under 15 map pixels across keep every f32 offset within
            // half an ulp of 2^-20 map pixels.
            let q = random_convex_quad(&mut rng, 8.0, 8.0, 60.0, 60.0);
            let maps = encode_targets(&[q], 20, 20, scale, 0.0).unwrap();
            let d = decode_proposals(&maps, 0.5, scale).unwrap();
            assert!(!d.proposals.is_empty());
            for p in &d.proposals {
                for (a, b) in p.vertices.iter().zip(&q.vertices) {
                    assert!((a.x - b.x).abs() < 1e-6 * scale && (a.y - b.y).abs() < 1e-6 * scale);
                }
            }
        }
    }

    #[test]
    fn identity_homography_for_grid_rectangle() {
        let q = Quad::rect(0.0, 0.0, 63.0, 7.0);
        let h = homography_from_quad(&q, 64, 8).unwrap();
        let id = Homography::identity();
        for r in 0..3 {
            for c in 0..3 {
                assert!((h.m[r][c] - id.m[r][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn collinear_quad_is_rejected() {
        let q = Quad::from_coords([0.0, 0.0, 1.0, 1.0, 2.0, 2.0, 0.0, 5.0], 1.0);
        assert!(matches!(homography_from_quad(&q, 64, 8), Err(Error::Geometry(_))));
    }

    proptest! {
        #[test]
        fn homography_maps_corners_and_inverts(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = random_convex_quad(&mut rng, 0.0, 0.0, 300.0, 200.0);
            let h = homography_from_quad(&q, 64, 8).unwrap();
            let corners = [(0.0, 0.0), (63.0, 0.0), (63.0, 7.0), (0.0, 7.0)];
            let inv = h.inverse().unwrap();
            for (k, &(u, v)) in corners.iter().enumerate() {
                let (x, y) = h.apply(u, v);
                prop_assert!((x - q.vertices[k].x).abs() < 1e-6 && (y - q.vertices[k].y).abs() < 1e-6);
                let (bu, bv) = inv.apply(q.vertices[k].x, q.vertices[k].y);
                prop_assert!((bu - u).abs() < 1e-5 && (bv - v).abs() < 1e-5);
            }
        }

        #[test]
        fn iou_symmetric_and_bounded(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_convex_quad(&mut rng, 0.0, 0.0, 30.0, 30.0);
            let b = random_convex_quad(&mut rng, 0.0, 0.0, 30.0, 30.0);
            let ab = quad_iou(&a, &b).unwrap();
            let ba = quad_iou(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert!((quad_iou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn nms_output_is_a_suppressed_subset(seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let props: Vec<Quad> = (0..12)
                .map(|_| { let s = rng.random_range(0.0..1.0); random_convex_quad(&mut rng, 0.0, 0.0, 20.0, 20.0).with_score(s) })
                .collect();
            let kept = nms(&props, 0.3);
            for (i, a) in kept.iter().enumerate() {
                prop_assert!(props.contains(a));
                for b in &kept[i + 1..] {
                    prop_assert!(quad_iou(a, b).unwrap() <= 0.3);
                }
            }
        }
    }
}
