//! Appearance-geometry descriptors (AGD) and their GRU-estimated next-frame
//! counterparts (EAGD).
//!
//! The appearance half comes from an 8×64 ROI patch pushed through three
//! 3×3 convolutions and global pooling; the geometry half embeds the eight
//! normalized vertex coordinates with two fully connected layers.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{homography_from_quad, Quad};
use crate::recurrent::{gru_step, GruParams};
use crate::tensor::{bilinear_sample, conv2d, global_avg_pool, Activation, ParameterSet, Scalar, Tape, Tensor, Var};

pub const ROI_HEIGHT: usize = 8;
pub const ROI_WIDTH: usize = 64;
pub const APPEARANCE_WIDTH: usize = 128;
pub const GEOMETRY_WIDTH: usize = 8;
pub const GEOMETRY_HIDDEN: usize = 16;
pub const AGD_WIDTH: usize = APPEARANCE_WIDTH + GEOMETRY_WIDTH;

const HEAD_CHANNELS: [usize; 3] = [32, 64, APPEARANCE_WIDTH];

#[derive(Debug, Clone, PartialEq)]
pub struct AppearanceHeadParams {
    /// `(kernel F×C×3×3, bias F)` per layer.
    pub layers: Vec<(Tensor<f32>, Tensor<f32>)>,
}

impl AppearanceHeadParams {
    pub fn zeros(in_channels: usize) -> Self {
        let mut layers = Vec::new();
        let mut c = in_channels;
        for &f in &HEAD_CHANNELS {
            layers.push((Tensor::zeros(vec![f, c, 3, 3]), Tensor::zeros(vec![f])));
            c = f;
        }
        Self { layers }
    }

    /// He-uniform kernels, zero biases.
    pub fn init<R: Rng>(in_channels: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(in_channels);
        for (w, _) in &mut p.layers {
            let fan_in = (w.shape()[1] * 9) as f64;
            let bound = (6.0 / fan_in).sqrt() as f32;
            w.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-bound..bound));
        }
        p
    }

    pub fn in_channels(&self) -> usize {
        self.layers[0].0.shape()[1]
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().map(|(_, b)| b.len()).unwrap_or(0)
    }

    pub fn store(&self, prefix: &str, set: &mut ParameterSet) -> Result<()> {
        for (i, (w, b)) in self.layers.iter().enumerate() {
            set.insert(format!("{}.conv{}.weight", prefix, i + 1), w.clone())?;
            set.insert(format!("{}.conv{}.bias", prefix, i + 1), b.clone())?;
        }
        Ok(())
    }

    pub fn load(prefix: &str, set: &ParameterSet) -> Result<Self> {
        let mut layers = Vec::new();
        for i in 1..=HEAD_CHANNELS.len() {
            let w = set.get(&format!("{}.conv{}.weight", prefix, i))?.clone();
            let b = set.get(&format!("{}.conv{}.bias", prefix, i))?.clone();
            layers.push((w, b));
        }
        let p = Self { layers };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let mut c = self.in_channels();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            let s = w.shape();
            if s.len() != 4 || s[1] != c || s[2] != 3 || s[3] != 3 || b.shape() != [s[0]] {
                return Err(Error::shape(format!(
                    "appearance layer {} has kernel {:?} and bias {:?}",
                    i + 1,
                    s,
                    b.shape()
                )));
            }
            c = s[0];
        }
        Ok(())
    }
}

/// Bilinear ROI patch (C×8×64) of `q`, given in map coordinates.
pub fn roi_patch(feature_map: &Tensor<f32>, q: &Quad) -> Result<Tensor<f32>> {
    let c = match feature_map.shape() {
        [c, _, _] => *c,
        s => return Err(Error::shape(format!("feature map must be C×H×W, got {:?}", s))),
    };
    let h = homography_from_quad(q, ROI_WIDTH, ROI_HEIGHT)?;
    let coords: Vec<(f64, f64)> = (0..ROI_HEIGHT)
        .flat_map(|v| (0..ROI_WIDTH).map(move |u| (u, v)))
        .map(|(u, v)| h.apply(u as f64, v as f64))
        .collect();
    bilinear_sample(feature_map, &coords)?.reshape(vec![c, ROI_HEIGHT, ROI_WIDTH])
}

/// Appearance feature of `q` (image coordinates) on a map with stride `stride`.
pub fn appearance_feature(
    feature_map: &Tensor<f32>,
    q: &Quad,
    stride: f64,
    p: &AppearanceHeadParams,
) -> Result<Tensor<f32>> {
    q.validate()?;
    let mut x = roi_patch(feature_map, &q.scale(1.0 / stride))?;
    if x.shape()[0] != p.in_channels() {
        return Err(Error::shape(format!(
            "feature map has {} channels, appearance head expects {}",
            x.shape()[0],
            p.in_channels()
        )));
    }
    for (w, b) in &p.layers {
        x = conv2d(&x, w, b)?.activation(Activation::Relu);
    }
    global_avg_pool(&x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeometryEmbedParams<T: Scalar = f32> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> GeometryEmbedParams<T> {
    pub fn zeros() -> Self {
        Self {
            w1: Tensor::zeros(vec![GEOMETRY_HIDDEN, 8]),
            b1: Tensor::zeros(vec![GEOMETRY_HIDDEN]),
            w2: Tensor::zeros(vec![GEOMETRY_WIDTH, GEOMETRY_HIDDEN]),
            b2: Tensor::zeros(vec![GEOMETRY_WIDTH]),
        }
    }

    pub fn init<R: Rng>(rng: &mut R) -> Self {
        let mut p = Self::zeros();
        for w in [&mut p.w1, &mut p.w2] {
            let bound = (6.0 / w.shape()[1] as f64).sqrt();
            w.data_mut()
                .iter_mut()
                .for_each(|v| *v = T::from_f64(rng.random_range(-bound..bound)));
        }
        p
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn cast<U: Scalar>(&self) -> GeometryEmbedParams<U> {
        GeometryEmbedParams {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let hidden = self.b1.len();
        if self.w1.shape() != [hidden, 8]
            || self.w2.rank() != 2
            || self.w2.shape()[1] != hidden
            || self.b2.shape() != [self.w2.shape()[0]]
        {
            return Err(Error::shape(format!(
                "geometry embedding shapes {:?} {:?} {:?} {:?}",
                self.w1.shape(),
                self.b1.shape(),
                self.w2.shape(),
                self.b2.shape()
            )));
        }
        Ok(())
    }
}

impl GeometryEmbedParams<f32> {
    pub fn store(&self, prefix: &str, set: &mut ParameterSet) -> Result<()> {
        for (name, t) in self.tensors() {
            set.insert(format!("{}.{}", prefix, name), t.clone())?;
        }
        Ok(())
    }

    pub fn load(prefix: &str, set: &ParameterSet) -> Result<Self> {
        let get = |n: &str| set.get(&format!("{}.{}", prefix, n)).cloned();
        let p = Self {
            w1: get("w1")?,
            b1: get("b1")?,
            w2: get("w2")?,
            b2: get("b2")?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// `(x₀/W, y₀/H, …, x₃/W, y₃/H)` in canonical vertex order.
pub fn normalized_coords(q: &Quad, frame_w: f64, frame_h: f64) -> Result<[f64; 8]> {
    if !(frame_w > 0.0 && frame_h > 0.0) {
        return Err(Error::usage(format!(
            "frame size {}×{} must be positive",
            frame_w, frame_h
        )));
    }
    let mut g = q.coords();
    for k in 0..4 {
        g[2 * k] /= frame_w;
        g[2 * k + 1] /= frame_h;
    }
    Ok(g)
}

pub fn geometry_feature(q: &Quad, frame_w: f64, frame_h: f64, p: &GeometryEmbedParams<f32>) -> Result<Tensor<f32>> {
    let g = normalized_coords(q, frame_w, frame_h)?;
    let hidden: Vec<f64> = (0..p.b1.len())
        .map(|i| {
            let row = &p.w1.data()[i * 8..(i + 1) * 8];
            let s: f64 = row.iter().zip(&g).map(|(w, x)| *w as f64 * x).sum();
            (s + p.b1.data()[i] as f64).max(0.0)
        })
        .collect();
    let width = p.b2.len();
    let h = hidden.len();
    let out = (0..width)
        .map(|i| {
            let row = &p.w2.data()[i * h..(i + 1) * h];
            let s: f64 = row.iter().zip(&hidden).map(|(w, x)| *w as f64 * x).sum();
            (s + p.b2.data()[i] as f64) as f32
        })
        .collect();
    Tensor::from_vec(out)?.checked("geometry_feature")
}

#[derive(Debug, Clone, Copy)]
pub struct GeometryVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl GeometryVars {
    pub fn record(tape: &mut Tape, p: &GeometryEmbedParams<f64>) -> Result<Self> {
        Ok(Self {
            w1: tape.leaf(p.w1.clone())?,
            b1: tape.leaf(p.b1.clone())?,
            w2: tape.leaf(p.w2.clone())?,
            b2: tape.leaf(p.b2.clone())?,
        })
    }

    pub fn as_array(&self) -> [Var; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Batched geometry embedding on the tape: `g` is B×8 normalized coords.
pub fn geometry_feature_tape(tape: &mut Tape, g: Var, p: &GeometryVars) -> Result<Var> {
    let h = tape.matmul_bt(g, p.w1)?;
    let h = tape.add_row(h, p.b1)?;
    let h = tape.activation(h, Activation::Relu)?;
    let o = tape.matmul_bt(h, p.w2)?;
    tape.add_row(o, p.b2)
}

/// `[f_a ; f_g]` for one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct Agd {
    pub values: Vec<f32>,
    pub appearance_width: usize,
    pub proposal: usize,
}

impl Agd {
    pub fn width(&self) -> usize {
        self.values.len()
    }

    pub fn appearance(&self) -> &[f32] {
        &self.values[..self.appearance_width]
    }

    pub fn geometry(&self) -> &[f32] {
        &self.values[self.appearance_width..]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DescriptorLayout {
    pub appearance: usize,
    pub geometry: usize,
}

impl Default for DescriptorLayout {
    fn default() -> Self {
        Self {
            appearance: APPEARANCE_WIDTH,
            geometry: GEOMETRY_WIDTH,
        }
    }
}

impl DescriptorLayout {
    pub fn width(&self) -> usize {
        self.appearance + self.geometry
    }
}

pub fn make_agd(f_a: &Tensor<f32>, f_g: &Tensor<f32>, layout: DescriptorLayout, proposal: usize) -> Result<Agd> {
    if f_a.shape() != [layout.appearance] || f_g.shape() != [layout.geometry] {
        return Err(Error::shape(format!(
            "descriptor parts {:?} and {:?}, expected [{}] and [{}]",
            f_a.shape(),
            f_g.shape(),
            layout.appearance,
            layout.geometry
        )));
    }
    let joined = Tensor::concat(&[f_a, f_g], 0)?;
    Ok(Agd {
        values: joined.into_data(),
        appearance_width: layout.appearance,
        proposal,
    })
}

/// Estimated next-frame descriptor and the GRU hidden state that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Eagd {
    pub values: Vec<f32>,
    pub hidden: Vec<f32>,
}

/// `GRU(agd, mask·h_prev)`. With `mask == false` the previous state is never
/// read and the GRU starts from zero.
pub fn estimate_eagd(agd: &[f32], h_prev: &[f32], mask: bool, p: &GruParams<f32>) -> Result<Eagd> {
    let (out, h) = if mask {
        gru_step(agd, h_prev, p)?
    } else {
        let zero = vec![0f32; p.hidden()];
        gru_step(agd, &zero, p)?
    };
    Ok(Eagd {
        values: out.into_data(),
        hidden: h.into_data(),
    })
}

/// Appearance head plus geometry embedding, applied per proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorExtractor {
    pub appearance: AppearanceHeadParams,
    pub geometry: GeometryEmbedParams<f32>,
    /// Image pixels per feature-map pixel.
    pub stride: f64,
}

impl DescriptorExtractor {
    pub fn layout(&self) -> DescriptorLayout {
        DescriptorLayout {
            appearance: self.appearance.out_width(),
            geometry: self.geometry.b2.len(),
        }
    }

    pub fn extract_one(&self, map: &Tensor<f32>, q: &Quad, frame_w: f64, frame_h: f64, index: usize) -> Result<Agd> {
        let f_a = appearance_feature(map, q, self.stride, &self.appearance)?;
        let f_g = geometry_feature(q, frame_w, frame_h, &self.geometry)?;
        make_agd(&f_a, &f_g, self.layout(), index)
    }

    /// Descriptors for every proposal; evaluated in parallel, returned in
    /// input order.
    pub fn extract(&self, map: &Tensor<f32>, quads: &[Quad], frame_w: f64, frame_h: f64) -> Result<Vec<Agd>> {
        quads
            .par_iter()
            .enumerate()
            .map(|(i, q)| self.extract_one(map, q, frame_w, frame_h, i))
            .collect()
    }
}
