//! Dense multilayer perceptrons with reverse-mode gradients and Adam.
//!
//! Batches are row-major: one sample per row. Hidden layers use ReLU; the
//! output layer is linear.
//!
//! Checkpoint layout (all little-endian):
//! `b"TLNN"`, `u32` version, `u32` layer-size count `n`, `n x u32` sizes,
//! then per layer the weights (`in x out`, row-major) followed by biases as
//! `f64`, then a `u8` Adam flag and, when set, `u64` step count, `f64` lr,
//! beta1, beta2, eps, and the first and second moments in parameter order.

use std::io::{self, Read, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("network needs at least an input and an output layer")]
    TooFewLayers,
    #[error("layer size must be positive")]
    ZeroWidth,
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

const MAGIC: &[u8; 4] = b"TLNN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `in x out`.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    sizes: Vec<usize>,
    layers: Vec<Layer>,
}

/// Per-layer activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

/// Gradients shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn scale(&mut self, a: f64) {
        for l in &mut self.layers {
            l.w *= a;
            l.b *= a;
        }
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.w.iter());
        out.extend(l.b.iter());
    }
    out
}

fn zeros_like(layers: &[Layer]) -> Vec<Layer> {
    layers
        .iter()
        .map(|l| Layer { w: Array2::zeros(l.w.raw_dim()), b: Array1::zeros(l.b.len()) })
        .collect()
}

impl DenseNet {
    /// Weights and biases drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn new<R: Rng>(sizes: &[usize], rng: &mut R) -> Result<Self, NeuralError> {
        if sizes.len() < 2 {
            return Err(NeuralError::TooFewLayers);
        }
        if sizes.contains(&0) {
            return Err(NeuralError::ZeroWidth);
        }
        let layers = sizes
            .windows(2)
            .map(|p| {
                let bound = 1.0 / (p[0] as f64).sqrt();
                Layer {
                    w: Array2::from_shape_fn((p[0], p[1]), |_| rng.random_range(-bound..bound)),
                    b: Array1::from_shape_fn(p[1], |_| rng.random_range(-bound..bound)),
                }
            })
            .collect();
        Ok(Self { sizes: sizes.to_vec(), layers })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<(), NeuralError> {
        if flat.len() != self.param_count() {
            return Err(NeuralError::Shape { expected: self.param_count(), got: flat.len() });
        }
        let mut it = flat.iter();
        for l in &mut self.layers {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|p| *p = *it.next().unwrap());
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.w.iter().chain(l.b.iter()).all(|p| p.is_finite()))
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), NeuralError> {
        if x.ncols() != self.input_dim() {
            return Err(NeuralError::Shape { expected: self.input_dim(), got: x.ncols() });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, NeuralError> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (k, l) in self.layers.iter().enumerate() {
            h = h.dot(&l.w) + &l.b;
            if k < last {
                h.mapv_inplace(|v| v.max(0.0));
            }
        }
        Ok(h)
    }

    /// Single-sample convenience wrapper.
    pub fn forward_one(&self, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        let v = ArrayView2::from_shape((1, x.len()), x).map_err(|_| NeuralError::Shape {
            expected: self.input_dim(),
            got: x.len(),
        })?;
        Ok(self.forward(v)?.into_raw_vec_and_offset().0)
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, ForwardCache), NeuralError> {
        self.check_input(&x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_owned();
        for (k, l) in self.layers.iter().enumerate() {
            let z = h.dot(&l.w) + &l.b;
            inputs.push(h);
            h = if k < last { z.mapv(|v| v.max(0.0)) } else { z.clone() };
            pre.push(z);
        }
        Ok((h, ForwardCache { inputs, pre }))
    }

    /// Gradients of `sum(grad_out * output)` with respect to parameters and
    /// inputs.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>), NeuralError> {
        if grad_out.ncols() != self.output_dim() {
            return Err(NeuralError::Shape { expected: self.output_dim(), got: grad_out.ncols() });
        }
        let last = self.layers.len() - 1;
        let mut grads = zeros_like(&self.layers);
        let mut delta = grad_out.to_owned();
        for k in (0..self.layers.len()).rev() {
            if k < last {
                Zip::from(&mut delta).and(&cache.pre[k]).for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0;
                    }
                });
            }
            grads[k].w = cache.inputs[k].t().dot(&delta);
            grads[k].b = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.layers[k].w.t());
        }
        Ok((Gradients { layers: grads }, delta))
    }

    /// `self <- tau * src + (1 - tau) * self`.
    pub fn soft_update_from(&mut self, src: &DenseNet, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&src.layers) {
            Zip::from(&mut t.w).and(&s.w).for_each(|a, &b| *a = tau * b + (1.0 - tau) * *a);
            Zip::from(&mut t.b).and(&s.b).for_each(|a, &b| *a = tau * b + (1.0 - tau) * *a);
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W, adam: Option<&AdamState>) -> Result<(), NeuralError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for &s in &self.sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        write_f64s(w, &self.params())?;
        match adam {
            None => w.write_all(&[0])?,
            Some(a) => {
                w.write_all(&[1])?;
                w.write_all(&a.step.to_le_bytes())?;
                write_f64s(w, &[a.lr, a.beta1, a.beta2, a.eps])?;
                write_f64s(w, &flatten(&a.m))?;
                write_f64s(w, &flatten(&a.v))?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<(DenseNet, Option<AdamState>), NeuralError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NeuralError::Checkpoint("wrong magic".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(NeuralError::Checkpoint(format!("unsupported version {version}")));
        }
        let n = read_u32(r)? as usize;
        if !(2..=64).contains(&n) {
            return Err(NeuralError::Checkpoint(format!("implausible layer count {n}")));
        }
        let sizes = (0..n).map(|_| read_u32(r).map(|s| s as usize)).collect::<Result<Vec<_>, _>>()?;
        if sizes.contains(&0) {
            return Err(NeuralError::ZeroWidth);
        }
        let layers: Vec<Layer> = sizes
            .windows(2)
            .map(|p| Layer { w: Array2::zeros((p[0], p[1])), b: Array1::zeros(p[1]) })
            .collect();
        let mut net = DenseNet { sizes, layers };
        net.set_params(&read_f64s(r, net.param_count())?)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let adam = match flag[0] {
            0 => None,
            1 => {
                let mut step = [0u8; 8];
                r.read_exact(&mut step)?;
                let h = read_f64s(r, 4)?;
                let mut a = AdamState::new(&net, h[0]);
                a.step = u64::from_le_bytes(step);
                a.beta1 = h[1];
                a.beta2 = h[2];
                a.eps = h[3];
                let count = net.param_count();
                fill(&mut a.m, &read_f64s(r, count)?);
                fill(&mut a.v, &read_f64s(r, count)?);
                Some(a)
            }
            f => return Err(NeuralError::Checkpoint(format!("bad optimizer flag {f}"))),
        };
        Ok((net, adam))
    }
}

fn fill(layers: &mut [Layer], flat: &[f64]) {
    let mut it = flat.iter();
    for l in layers {
        l.w.iter_mut().chain(l.b.iter_mut()).for_each(|p| *p = *it.next().unwrap());
    }
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> io::Result<Vec<f64>> {
    let mut b = [0u8; 8];
    (0..n)
        .map(|_| {
            r.read_exact(&mut b)?;
            Ok(f64::from_le_bytes(b))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Layer>,
    v: Vec<Layer>,
}

impl AdamState {
    pub fn new(net: &DenseNet, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros_like(&net.layers), v: zeros_like(&net.layers) }
    }

    pub fn moments(&self) -> (Vec<f64>, Vec<f64>) {
        (flatten(&self.m), flatten(&self.v))
    }
}

/// One bias-corrected Adam step (descent on `grads`).
pub fn adam_step(net: &mut DenseNet, grads: &Gradients, opt: &mut AdamState) -> Result<(), NeuralError> {
    if grads.layers.len() != net.layers.len() {
        return Err(NeuralError::Shape { expected: net.layers.len(), got: grads.layers.len() });
    }
    for (l, g) in net.layers.iter().zip(&grads.layers) {
        if l.w.raw_dim() != g.w.raw_dim() || l.b.len() != g.b.len() {
            return Err(NeuralError::Shape { expected: l.w.len() + l.b.len(), got: g.w.len() + g.b.len() });
        }
    }
    opt.step += 1;
    let (b1, b2, eps) = (opt.beta1, opt.beta2, opt.eps);
    let c1 = 1.0 - b1.powi(opt.step as i32);
    let c2 = 1.0 - b2.powi(opt.step as i32);
    let lr = opt.lr;
    let upd = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    };
    for k in 0..net.layers.len() {
        let (l, g) = (&mut net.layers[k], &grads.layers[k]);
        let (m, v) = (&mut opt.m[k], &mut opt.v[k]);
        Zip::from(&mut l.w).and(&mut m.w).and(&mut v.w).and(&g.w).for_each(|p, m, v, &g| upd(p, m, v, g));
        Zip::from(&mut l.b).and(&mut m.b).and(&mut v.b).and(&g.b).for_each(|p, m, v, &g| upd(p, m, v, g));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::array;
    use rand::seq::index::sample;

    fn loss(net: &DenseNet, x: &Array2<f64>, c: &Array2<f64>) -> f64 {
        (net.forward(x.view()).unwrap() * c).sum()
    }

    #[test]
    fn linear_layer_gradient_is_outer_product() {
        let mut rng = seeded(1);
        let net = DenseNet::new(&[3, 2], &mut rng).unwrap();
        let x = array![[1.0, 2.0, 3.0]];
        let (_, cache) = net.forward_cached(x.view()).unwrap();
        let up = array![[0.5, -1.0]];
        let (g, gx) = net.backward(&cache, up.view()).unwrap();
        assert_eq!(g.layers[0].w, x.t().dot(&up));
        assert_eq!(g.layers[0].b, array![0.5, -1.0]);
        assert_eq!(gx, up.dot(&net.layers[0].w.t()));
    }

    #[test]
    fn finite_difference_gradient_2_64_64_1() {
        let mut rng = seeded(7);
        let mut net = DenseNet::new(&[2, 64, 64, 1], &mut rng).unwrap();
        let x = Array2::from_shape_fn((8, 2), |_| rng.random_range(-1.0..1.0));
        let c = Array2::from_shape_fn((8, 1), |_| rng.random_range(-1.0..1.0));
        let (_, cache) = net.forward_cached(x.view()).unwrap();
        let (g, _) = net.backward(&cache, c.view()).unwrap();
        let analytic = g.flat();
        let base = net.params();
        let h = 1e-5;
        for idx in sample(&mut rng, base.len(), 100) {
            let mut p = base.clone();
            p[idx] += h;
            net.set_params(&p).unwrap();
            let up = loss(&net, &x, &c);
            p[idx] -= 2.0 * h;
            net.set_params(&p).unwrap();
            let dn = loss(&net, &x, &c);
            let fd = (up - dn) / (2.0 * h);
            let rel = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-6);
            assert!(rel < 1e-4, "param {idx}: fd {fd} analytic {}", analytic[idx]);
        }
    }

    #[test]
    fn input_gradient_matches_finite_difference() {
        let mut rng = seeded(3);
        let net = DenseNet::new(&[4, 16, 3], &mut rng).unwrap();
        let x = Array2::from_shape_fn((1, 4), |_| rng.random_range(-1.0..1.0));
        let c = array![[1.0, -2.0, 0.5]];
        let (_, cache) = net.forward_cached(x.view()).unwrap();
        let (_, gx) = net.backward(&cache, c.view()).unwrap();
        for j in 0..4 {
            let mut xp = x.clone();
            xp[[0, j]] += 1e-6;
            let mut xm = x.clone();
            xm[[0, j]] -= 1e-6;
            let fd = (loss(&net, &xp, &c) - loss(&net, &xm, &c)) / 2e-6;
            assert!((fd - gx[[0, j]]).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut rng = seeded(2);
        let mut net = DenseNet::new(&[3, 5, 1], &mut rng).unwrap();
        let before = net.clone();
        let x = array![[0.1, 0.2, 0.3]];
        let (_, cache) = net.forward_cached(x.view()).unwrap();
        let (g, _) = net.backward(&cache, array![[1.0]].view()).unwrap();
        let mut opt = AdamState::new(&net, 0.0);
        adam_step(&mut net, &g, &mut opt).unwrap();
        assert_eq!(net, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut rng = seeded(2);
        let mut net = DenseNet::new(&[1, 1], &mut rng).unwrap();
        let before = net.params();
        let g = Gradients { layers: vec![Layer { w: array![[3.0]], b: array![-0.5] }] };
        let mut opt = AdamState::new(&net, 0.01);
        adam_step(&mut net, &g, &mut opt).unwrap();
        let after = net.params();
        assert!((before[0] - after[0] - 0.01).abs() < 1e-9);
        assert!((after[1] - before[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = DenseNet::new(&[4, 64, 64, 2], &mut seeded(5)).unwrap();
        let b = DenseNet::new(&[4, 64, 64, 2], &mut seeded(5)).unwrap();
        assert_eq!(a, b);
        for l in a.layers() {
            let bound = 1.0 / (l.w.nrows() as f64).sqrt();
            assert!(l.w.iter().chain(l.b.iter()).all(|p| p.abs() <= bound));
        }
    }

    #[test]
    fn construction_errors() {
        assert!(matches!(DenseNet::new(&[3], &mut seeded(0)), Err(NeuralError::TooFewLayers)));
        assert!(matches!(DenseNet::new(&[3, 0, 1], &mut seeded(0)), Err(NeuralError::ZeroWidth)));
        let net = DenseNet::new(&[3, 1], &mut seeded(0)).unwrap();
        assert!(matches!(net.forward_one(&[1.0, 2.0]), Err(NeuralError::Shape { .. })));
    }

    #[test]
    fn soft_update_limits() {
        let mut rng = seeded(9);
        let src = DenseNet::new(&[2, 3, 1], &mut rng).unwrap();
        let mut dst = DenseNet::new(&[2, 3, 1], &mut rng).unwrap();
        let (a, b) = (src.params(), dst.params());
        dst.soft_update_from(&src, 0.005);
        for ((x, y), z) in a.iter().zip(&b).zip(dst.params()) {
            assert!((z - (0.005 * x + 0.995 * y)).abs() < 1e-15);
        }
        dst.soft_update_from(&src, 1.0);
        assert_eq!(dst.params(), src.params());
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = seeded(11);
        let mut net = DenseNet::new(&[3, 8, 2], &mut rng).unwrap();
        let mut opt = AdamState::new(&net, 3e-4);
        let x = array![[0.1, -0.2, 0.3]];
        let (_, cache) = net.forward_cached(x.view()).unwrap();
        let (g, _) = net.backward(&cache, array![[1.0, 1.0]].view()).unwrap();
        adam_step(&mut net, &g, &mut opt).unwrap();
        let mut buf = Vec::new();
        net.write_to(&mut buf, Some(&opt)).unwrap();
        assert_eq!(&buf[..4], b"TLNN");
        let (n2, o2) = DenseNet::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(n2, net);
        assert_eq!(o2.unwrap(), opt);
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(DenseNet::read_from(&mut bad.as_slice()).is_err());
        assert!(DenseNet::read_from(&mut &buf[..buf.len() - 3]).is_err());
    }
}
