//! Recurrent cells: a GRU that estimates next-frame descriptors and a
//! convolutional LSTM that smooths feature maps over time.
//!
//! GRU (gates read `[x; h]`, inputs first):
//!
//! ```text
//! z  = σ(W_z·[x; h] + b_z)
//! r  = σ(W_r·[x; h] + b_r)
//! h̃  = tanh(W_h·[x; r⊙h] + b_h)
//! h' = (1 − z)⊙h + z⊙h̃
//! ```
//!
//! ConvLSTM (no peepholes, same-padded convolutions over `[x; h]`):
//!
//! ```text
//! i, f, o = σ(conv(...)),  g = tanh(conv(...))
//! c' = f⊙c + i⊙g,  h' = o⊙tanh(c')
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, sigmoid, Activation, ParameterSet, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<T: Scalar = f32> {
    pub w_z: Tensor<T>,
    pub w_r: Tensor<T>,
    pub w_h: Tensor<T>,
    pub b_z: Tensor<T>,
    pub b_r: Tensor<T>,
    pub b_h: Tensor<T>,
}

impl<T: Scalar> GruParams<T> {
    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = || Tensor::zeros(vec![hidden, input + hidden]);
        let b = || Tensor::zeros(vec![hidden]);
        Self {
            w_z: w(),
            w_r: w(),
            w_h: w(),
            b_z: b(),
            b_r: b(),
            b_h: b(),
        }
    }

    /// Uniform `±1/√hidden` weights and zero biases.
    pub fn init<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut w = || {
            let n = hidden * (input + hidden);
            let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..bound))).collect();
            Tensor::new(vec![hidden, input + hidden], data).expect("consistent shape")
        };
        let (w_z, w_r, w_h) = (w(), w(), w());
        Self {
            w_z,
            w_r,
            w_h,
            b_z: Tensor::zeros(vec![hidden]),
            b_r: Tensor::zeros(vec![hidden]),
            b_h: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_z.len()
    }

    pub fn input(&self) -> usize {
        self.w_z.shape()[1] - self.hidden()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.b_z.len();
        if self.w_z.rank() != 2 || self.w_z.shape()[0] != d || self.w_z.shape()[1] <= d {
            return Err(Error::shape(format!(
                "GRU weight shape {:?} does not fit hidden size {}",
                self.w_z.shape(),
                d
            )));
        }
        for w in [&self.w_r, &self.w_h] {
            if w.shape() != self.w_z.shape() {
                return Err(Error::shape(format!(
                    "GRU gate weights disagree: {:?} vs {:?}",
                    w.shape(),
                    self.w_z.shape()
                )));
            }
        }
        for b in [&self.b_r, &self.b_h] {
            if b.shape() != [d] {
                return Err(Error::shape(format!("GRU bias {:?}, expected [{}]", b.shape(), d)));
            }
        }
        Ok(())
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 6] {
        [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_h", &self.w_h),
            ("b_z", &self.b_z),
            ("b_r", &self.b_r),
            ("b_h", &self.b_h),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<T>; 6] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }

    pub fn cast<U: Scalar>(&self) -> GruParams<U> {
        GruParams {
            w_z: self.w_z.cast(),
            w_r: self.w_r.cast(),
            w_h: self.w_h.cast(),
            b_z: self.b_z.cast(),
            b_r: self.b_r.cast(),
            b_h: self.b_h.cast(),
        }
    }
}

impl GruParams<f32> {
    pub fn store(&self, prefix: &str, set: &mut ParameterSet) -> Result<()> {
        for (name, t) in self.tensors() {
            set.insert(format!("{}.{}", prefix, name), t.clone())?;
        }
        Ok(())
    }

    pub fn load(prefix: &str, set: &ParameterSet) -> Result<Self> {
        let get = |n: &str| set.get(&format!("{}.{}", prefix, n)).cloned();
        let p = Self {
            w_z: get("w_z")?,
            w_r: get("w_r")?,
            w_h: get("w_h")?,
            b_z: get("b_z")?,
            b_r: get("b_r")?,
            b_h: get("b_h")?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// One GRU step for a single instance; returns `(out, h)` with `out = h`.
pub fn gru_step(x: &[f32], h_prev: &[f32], p: &GruParams<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let d = p.hidden();
    let d_in = p.input();
    if x.len() != d_in || h_prev.len() != d {
        return Err(Error::shape(format!(
            "gru_step: expected input {} and hidden {}, got {} and {}",
            d_in,
            d,
            x.len(),
            h_prev.len()
        )));
    }
    let mut xh: Vec<f32> = Vec::with_capacity(d_in + d);
    xh.extend_from_slice(x);
    xh.extend_from_slice(h_prev);

    let z: Vec<f64> = p
        .w_z
        .matvec(&xh)?
        .iter()
        .zip(p.b_z.data())
        .map(|(a, b)| sigmoid(*a as f64 + *b as f64))
        .collect();
    let r: Vec<f64> = p
        .w_r
        .matvec(&xh)?
        .iter()
        .zip(p.b_r.data())
        .map(|(a, b)| sigmoid(*a as f64 + *b as f64))
        .collect();
    for (slot, (&hv, &rv)) in xh[d_in..].iter_mut().zip(h_prev.iter().zip(&r)) {
        *slot = (rv * hv as f64) as f32;
    }
    let cand = p.w_h.matvec(&xh)?;
    let h: Vec<f32> = (0..d)
        .map(|k| {
            let ht = (cand[k] as f64 + p.b_h.data()[k] as f64).tanh();
            ((1.0 - z[k]) * h_prev[k] as f64 + z[k] * ht) as f32
        })
        .collect();
    let h = Tensor::from_vec(h)?.checked("gru_step")?;
    Ok((h.clone(), h))
}

/// GRU parameters recorded as tape leaves.
#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruVars {
    pub fn record(tape: &mut Tape, p: &GruParams<f64>) -> Result<Self> {
        Ok(Self {
            w_z: tape.leaf(p.w_z.clone())?,
            w_r: tape.leaf(p.w_r.clone())?,
            w_h: tape.leaf(p.w_h.clone())?,
            b_z: tape.leaf(p.b_z.clone())?,
            b_r: tape.leaf(p.b_r.clone())?,
            b_h: tape.leaf(p.b_h.clone())?,
        })
    }

    pub fn as_array(&self) -> [Var; 6] {
        [self.w_z, self.w_r, self.w_h, self.b_z, self.b_r, self.b_h]
    }
}

/// Batched GRU step on the tape: `x` is B×D_in, `h` is B×D, one row per
/// instance. Returns the new B×D hidden state.
pub fn gru_step_tape(tape: &mut Tape, x: Var, h: Var, p: &GruVars) -> Result<Var> {
    let xh = tape.concat(&[x, h], 1)?;
    let z = tape.matmul_bt(xh, p.w_z)?;
    let z = tape.add_row(z, p.b_z)?;
    let z = tape.activation(z, Activation::Sigmoid)?;
    let r = tape.matmul_bt(xh, p.w_r)?;
    let r = tape.add_row(r, p.b_r)?;
    let r = tape.activation(r, Activation::Sigmoid)?;
    let rh = tape.mul(r, h)?;
    let xrh = tape.concat(&[x, rh], 1)?;
    let c = tape.matmul_bt(xrh, p.w_h)?;
    let c = tape.add_row(c, p.b_h)?;
    let c = tape.activation(c, Activation::Tanh)?;
    // h' = h + z⊙(h̃ − h)
    let delta = tape.sub(c, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmParams {
    pub w_i: Tensor<f32>,
    pub w_f: Tensor<f32>,
    pub w_o: Tensor<f32>,
    pub w_c: Tensor<f32>,
    pub b_i: Tensor<f32>,
    pub b_f: Tensor<f32>,
    pub b_o: Tensor<f32>,
    pub b_c: Tensor<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmState {
    pub c: Tensor<f32>,
    pub h: Tensor<f32>,
}

impl ConvLstmState {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            c: Tensor::zeros(vec![channels, height, width]),
            h: Tensor::zeros(vec![channels, height, width]),
        }
    }
}

impl ConvLstmParams {
    pub fn zeros(input: usize, hidden: usize, kernel: usize) -> Self {
        let w = || Tensor::zeros(vec![hidden, input + hidden, kernel, kernel]);
        let b = || Tensor::zeros(vec![hidden]);
        Self {
            w_i: w(),
            w_f: w(),
            w_o: w(),
            w_c: w(),
            b_i: b(),
            b_f: b(),
            b_o: b(),
            b_c: b(),
        }
    }

    /// Uniform `±scale` weights, zero biases.
    pub fn init<R: Rng>(input: usize, hidden: usize, kernel: usize, scale: f32, rng: &mut R) -> Self {
        let mut p = Self::zeros(input, hidden, kernel);
        for w in [&mut p.w_i, &mut p.w_f, &mut p.w_o, &mut p.w_c] {
            w.data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-scale..scale));
        }
        p
    }

    pub fn hidden(&self) -> usize {
        self.b_i.len()
    }

    pub fn input(&self) -> usize {
        self.w_i.shape()[1] - self.hidden()
    }

    pub fn kernel(&self) -> usize {
        self.w_i.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.w_i.shape();
        let ok_shape = shape.len() == 4
            && shape[0] == self.b_i.len()
            && shape[1] > shape[0]
            && shape[2] == shape[3]
            && shape[2] % 2 == 1;
        if !ok_shape {
            return Err(Error::shape(format!("ConvLSTM kernel shape {:?}", shape)));
        }
        for w in [&self.w_f, &self.w_o, &self.w_c] {
            if w.shape() != shape {
                return Err(Error::shape("ConvLSTM gate kernels disagree"));
            }
        }
        for b in [&self.b_f, &self.b_o, &self.b_c] {
            if b.shape() != self.b_i.shape() {
                return Err(Error::shape("ConvLSTM gate biases disagree"));
            }
        }
        Ok(())
    }

    pub fn store(&self, prefix: &str, set: &mut ParameterSet) -> Result<()> {
        let items = [
            ("w_i", &self.w_i),
            ("w_f", &self.w_f),
            ("w_o", &self.w_o),
            ("w_c", &self.w_c),
            ("b_i", &self.b_i),
            ("b_f", &self.b_f),
            ("b_o", &self.b_o),
            ("b_c", &self.b_c),
        ];
        for (name, t) in items {
            set.insert(format!("{}.{}", prefix, name), t.clone())?;
        }
        Ok(())
    }

    pub fn load(prefix: &str, set: &ParameterSet) -> Result<Self> {
        let get = |n: &str| set.get(&format!("{}.{}", prefix, n)).cloned();
        let p = Self {
            w_i: get("w_i")?,
            w_f: get("w_f")?,
            w_o: get("w_o")?,
            w_c: get("w_c")?,
            b_i: get("b_i")?,
            b_f: get("b_f")?,
            b_o: get("b_o")?,
            b_c: get("b_c")?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// One ConvLSTM step; returns the output feature map (the new hidden state)
/// and the new state.
pub fn convlstm_step(
    x: &Tensor<f32>,
    state: &ConvLstmState,
    p: &ConvLstmParams,
) -> Result<(Tensor<f32>, ConvLstmState)> {
    p.validate()?;
    let ch = p.hidden();
    let (h, w) = match x.shape() {
        [c, h, w] if *c == p.input() => (*h, *w),
        s => {
            return Err(Error::shape(format!(
                "convlstm_step: input {:?}, expected {} channels",
                s,
                p.input()
            )))
        }
    };
    if state.h.shape() != [ch, h, w] || state.c.shape() != [ch, h, w] {
        return Err(Error::shape(format!(
            "convlstm_step: state {:?} does not match {}×{}×{}",
            state.h.shape(),
            ch,
            h,
            w
        )));
    }
    let xh = Tensor::concat(&[x, &state.h], 0)?;
    let kernels = Tensor::concat(&[&p.w_i, &p.w_f, &p.w_o, &p.w_c], 0)?;
    let biases = Tensor::concat(&[&p.b_i, &p.b_f, &p.b_o, &p.b_c], 0)?;
    let gates = conv2d(&xh, &kernels, &biases)?;

    let n = ch * h * w;
    let gd = gates.data();
    let (gi, rest) = gd.split_at(n);
    let (gf, rest) = rest.split_at(n);
    let (go, gg) = rest.split_at(n);
    let mut c_new = Vec::with_capacity(n);
    let mut h_new = Vec::with_capacity(n);
    for k in 0..n {
        let i = sigmoid(gi[k] as f64);
        let f = sigmoid(gf[k] as f64);
        let o = sigmoid(go[k] as f64);
        let g = (gg[k] as f64).tanh();
        let c = f * state.c.data()[k] as f64 + i * g;
        c_new.push(c as f32);
        h_new.push((o * c.tanh()) as f32);
    }
    let shape = vec![ch, h, w];
    let next = ConvLstmState {
        c: Tensor::new(shape.clone(), c_new)?.checked("convlstm_step")?,
        h: Tensor::new(shape, h_new)?.checked("convlstm_step")?,
    };
    Ok((next.h.clone(), next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn zero_params_halve_the_state() {
        let p = GruParams::<f32>::zeros(4, 3);
        let h_prev = [0.8f32, -0.4, 0.2];
        let (out, h) = gru_step(&[0.1, 0.2, 0.3, 0.4], &h_prev, &p).unwrap();
        assert_eq!(out, h);
        for (a, b) in h.data().iter().zip(&h_prev) {
            assert_eq!(*a, 0.5 * b);
        }
        let (_, h0) = gru_step(&[0.0; 4], &[0.0; 3], &p).unwrap();
        assert!(h0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_is_bit_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = GruParams::<f32>::init(136, 136, &mut rng);
        let x = random_vec(136, &mut rng);
        let h = random_vec(136, &mut rng);
        let a = gru_step(&x, &h, &p).unwrap();
        let b = gru_step(&x, &h, &p).unwrap();
        assert_eq!(a.1.data(), b.1.data());
    }

    #[test]
    fn gru_rejects_bad_shapes() {
        let p = GruParams::<f32>::zeros(4, 3);
        assert!(matches!(gru_step(&[0.0; 3], &[0.0; 3], &p), Err(Error::Shape(_))));
        assert!(gru_step(&[0.0; 4], &[0.0; 4], &p).is_err());
    }

    #[test]
    fn tape_gru_matches_plain_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = GruParams::<f32>::init(10, 6, &mut rng);
        let x = random_vec(10, &mut rng);
        let h = random_vec(6, &mut rng);
        let (_, plain) = gru_step(&x, &h, &p).unwrap();

        let mut tape = Tape::new();
        let vars = GruVars::record(&mut tape, &p.cast()).unwrap();
        let xv = tape
            .leaf(Tensor::new(vec![1, 10], x.iter().map(|&v| v as f64).collect()).unwrap())
            .unwrap();
        let hv = tape
            .leaf(Tensor::new(vec![1, 6], h.iter().map(|&v| v as f64).collect()).unwrap())
            .unwrap();
        let out = gru_step_tape(&mut tape, xv, hv, &vars).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(plain.data()) {
            assert!((a - *b as f64).abs() < 1e-6);
        }
    }

    #[test]
    fn gru_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let d = 6;
        let p = GruParams::<f64>::init(d, d, &mut rng);
        let mut inputs: Vec<Tensor<f64>> = p.tensors().iter().map(|(_, t)| (*t).clone()).collect();
        // Non-zero biases so their gradients are exercised away from zero.
        for b in &mut inputs[3..] {
            b.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let x = Tensor::new(vec![1, d], (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let h = Tensor::new(vec![1, d], (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        inputs.push(x);
        inputs.push(h);
        let res = check_gradients(&inputs, GradCheckOptions::default(), |tape, v| {
            let vars = GruVars {
                w_z: v[0],
                w_r: v[1],
                w_h: v[2],
                b_z: v[3],
                b_r: v[4],
                b_h: v[5],
            };
            let out = gru_step_tape(tape, v[6], v[7], &vars)?;
            tape.squared_norm(out)
        })
        .unwrap();
        assert!(res.passed, "{:?}", res);
    }

    #[test]
    fn convlstm_zero_everything_is_zero() {
        let p = ConvLstmParams::zeros(2, 2, 3);
        let s = ConvLstmState::zeros(2, 4, 5);
        let (f, s2) = convlstm_step(&Tensor::zeros(vec![2, 4, 5]), &s, &p).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert!(s2.c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn convlstm_hidden_stays_in_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ConvLstmParams::init(3, 3, 3, 1.0, &mut rng);
        let mut s = ConvLstmState::zeros(3, 6, 6);
        for _ in 0..5 {
            let x = Tensor::new(vec![3, 6, 6], random_vec(108, &mut rng)).unwrap();
            let (f, next) = convlstm_step(&x, &s, &p).unwrap();
            assert!(f.data().iter().all(|&v| v > -1.0 && v < 1.0));
            s = next;
        }
    }

    #[test]
    fn convlstm_rejects_mismatched_state() {
        let p = ConvLstmParams::zeros(2, 2, 3);
        let s = ConvLstmState::zeros(2, 4, 4);
        assert!(convlstm_step(&Tensor::zeros(vec![2, 4, 5]), &s, &p).is_err());
        assert!(convlstm_step(&Tensor::zeros(vec![3, 4, 4]), &s, &p).is_err());
    }

    #[test]
    fn unit_kernels_match_per_pixel_scalar_lstm() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let p = ConvLstmParams::init(1, 1, 1, 1.0, &mut rng);
        let mut p = p;
        for b in [&mut p.b_i, &mut p.b_f, &mut p.b_o, &mut p.b_c] {
            b.data_mut()[0] = rng.random_range(-0.5..0.5);
        }
        let (h, w) = (3, 4);
        let frames: Vec<Vec<f32>> = (0..4).map(|_| random_vec(h * w, &mut rng)).collect();

        let mut s = ConvLstmState::zeros(1, h, w);
        let mut outputs = Vec::new();
        for f in &frames {
            let (out, next) = convlstm_step(&Tensor::new(vec![1, h, w], f.clone()).unwrap(), &s, &p).unwrap();
            outputs.push(out);
            s = next;
        }

        // Scalar LSTM per pixel: gate = w_x·x + w_h·h + b.
        let g = |wt: &Tensor<f32>| (wt.data()[0] as f64, wt.data()[1] as f64);
        let (ix, ih) = g(&p.w_i);
        let (fx, fh) = g(&p.w_f);
        let (ox, oh) = g(&p.w_o);
        let (cx, chh) = g(&p.w_c);
        for pix in 0..h * w {
            let (mut c, mut hs) = (0.0f64, 0.0f64);
            for (t, f) in frames.iter().enumerate() {
                let x = f[pix] as f64;
                let i = sigmoid(ix * x + ih * hs + p.b_i.data()[0] as f64);
                let fg = sigmoid(fx * x + fh * hs + p.b_f.data()[0] as f64);
                let o = sigmoid(ox * x + oh * hs + p.b_o.data()[0] as f64);
                let gg = (cx * x + chh * hs + p.b_c.data()[0] as f64).tanh();
                c = fg * c + i * gg;
                hs = o * c.tanh();
                assert!((outputs[t].data()[pix] as f64 - hs).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn convlstm_settles_under_constant_input() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = ConvLstmParams::init(2, 2, 3, 0.2, &mut rng);
            let x = Tensor::new(vec![2, 5, 5], random_vec(50, &mut rng)).unwrap();
            let mut s = ConvLstmState::zeros(2, 5, 5);
            let mut prev_h = s.h.clone();
            let mut diffs = Vec::new();
            for _ in 0..200 {
                let (_, next) = convlstm_step(&x, &s, &p).unwrap();
                diffs.push(next.h.max_abs_diff(&prev_h).unwrap());
                prev_h = next.h.clone();
                s = next;
            }
            for t in 51..diffs.len() {
                if diffs[t - 1] < 1e-6 {
                    break;
                }
                assert!(
                    diffs[t] <= diffs[t - 1],
                    "seed {} step {}: {:?}",
                    seed,
                    t,
                    &diffs[t - 1..=t]
                );
            }
        }
    }
}
