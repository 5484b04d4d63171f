//! Fully connected feature extractor with hand-written reverse mode.
//!
//! The encoder is frozen during the inner loop, so all it needs is a forward
//! pass that records a tape and a backward pass that turns an upstream error
//! on the feature into parameter and input gradients.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::{axpy, Matrix, RngStream, Vector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// Shape `(out, in)`.
    pub weight: Matrix,
    pub bias: Vector,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Parameters of the encoder. ReLU after every layer except the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    layers: Vec<Layer>,
}

/// Same shape as [`EncoderParams`]; holds `∂L/∂ϕ`.
pub type EncoderGradient = EncoderParams;

/// Activation record of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer (post-activation of the previous one).
    inputs: Vec<Vector>,
    /// Pre-activation output of each layer.
    pre: Vec<Vector>,
}

impl EncoderParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(contract("encoder needs at least one layer"));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(contract(format!("layer {i}: bias length {} != out {}", l.bias.len(), l.out_dim())));
            }
            if i > 0 && layers[i - 1].out_dim() != l.in_dim() {
                return Err(contract(format!(
                    "layer {i}: in dimension {} does not match previous out {}",
                    l.in_dim(),
                    layers[i - 1].out_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// All-zero parameters for the given layer sizes (`[in, hidden.., out]`).
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(contract(format!("invalid layer sizes {sizes:?}")));
        }
        let layers = sizes
            .windows(2)
            .map(|w| Layer { weight: Matrix::zeros(w[1], w[0]), bias: vec![0.0; w[1]] })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().map_or(0, Layer::out_dim)
    }

    /// `[in, hidden.., out]`.
    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.input_dim()).chain(self.layers.iter().map(Layer::out_dim)).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    /// Flattened parameters: per layer, row-major weight then bias.
    pub fn to_flat(&self) -> Vector {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(contract(format!("expected {} parameters, got {}", self.num_params(), flat.len())));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            let w = l.weight.as_mut_slice();
            w.copy_from_slice(&flat[offset..offset + w.len()]);
            offset += w.len();
            let n = l.bias.len();
            l.bias.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn zeros_like(&self) -> Self {
        let layers = self
            .layers
            .iter()
            .map(|l| Layer { weight: Matrix::zeros(l.out_dim(), l.in_dim()), bias: vec![0.0; l.out_dim()] })
            .collect();
        Self { layers }
    }

    /// `self += alpha · other`; shapes must match.
    pub fn add_scaled(&mut self, alpha: f64, other: &Self) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_scaled(alpha, &b.weight);
            axpy(alpha, &b.bias, &mut a.bias);
        }
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| a.weight.shape() == b.weight.shape())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vector, Tape)> {
        if x.len() != self.input_dim() {
            return Err(contract(format!("encoder input length {} != {}", x.len(), self.input_dim())));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, l) in self.layers.iter().enumerate() {
            let mut z = l.weight.matvec(&h);
            axpy(1.0, &l.bias, &mut z);
            inputs.push(h);
            h = if i == last { z.clone() } else { z.iter().map(|v| v.max(0.0)).collect() };
            pre.push(z);
        }
        Ok((h, Tape { inputs, pre }))
    }

    /// Feature only, no tape.
    pub fn features(&self, x: &[f64]) -> Result<Vector> {
        self.forward(x).map(|(f, _)| f)
    }

    /// Reverse-mode gradient of `feature · upstream` with respect to the
    /// parameters and the input. ReLU slope at exactly zero is taken as 0.
    pub fn backward(&self, tape: &Tape, upstream: &[f64]) -> Result<(EncoderGradient, Vector)> {
        if tape.inputs.len() != self.layers.len()
            || tape
                .inputs
                .iter()
                .zip(&tape.pre)
                .zip(&self.layers)
                .any(|((i, p), l)| i.len() != l.in_dim() || p.len() != l.out_dim())
        {
            return Err(contract("tape does not belong to these encoder parameters"));
        }
        if upstream.len() != self.feature_dim() {
            return Err(contract(format!("upstream length {} != {}", upstream.len(), self.feature_dim())));
        }
        let last = self.layers.len() - 1;
        let mut grad = self.zeros_like();
        let mut delta = upstream.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i != last {
                for (d, z) in delta.iter_mut().zip(&tape.pre[i]) {
                    if *z <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let g = &mut grad.layers[i];
            g.weight.add_outer(1.0, &delta, &tape.inputs[i]);
            g.bias.copy_from_slice(&delta);
            delta = self.layers[i].weight.matvec_t(&delta);
        }
        Ok((grad, delta))
    }

    /// Smallest |pre-activation| over hidden units; distance to the nearest ReLU kink.
    pub fn kink_margin(&self, tape: &Tape) -> f64 {
        let last = self.layers.len() - 1;
        tape.pre[..last].iter().flatten().map(|v| v.abs()).fold(f64::INFINITY, f64::min)
    }
}

/// Fan-in scaled Gaussian weights (stddev `1/√fan_in`), zero biases.
pub fn init_encoder(sizes: &[usize], rng: &mut RngStream) -> Result<EncoderParams> {
    let mut params = EncoderParams::zeros(sizes)?;
    for l in &mut params.layers {
        let sd = 1.0 / (l.in_dim() as f64).sqrt();
        for w in l.weight.as_mut_slice() {
            *w = sd * rng.next_gaussian();
        }
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_forward(p: &EncoderParams, x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = p.layers().len();
        for (li, l) in p.layers().iter().enumerate() {
            let mut next = vec![0.0; l.out_dim()];
            for r in 0..l.out_dim() {
                let mut acc = l.bias[r];
                for c in 0..l.in_dim() {
                    acc += l.weight[(r, c)] * h[c];
                }
                next[r] = if li + 1 < n && acc < 0.0 { 0.0 } else { acc };
            }
            h = next;
        }
        h
    }

    #[test]
    fn zero_params_give_zero_feature() {
        let p = EncoderParams::zeros(&[3, 4, 2]).unwrap();
        assert_eq!(p.features(&[1.0, 2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_layer() {
        let mut p = EncoderParams::zeros(&[2, 2]).unwrap();
        p.layers_mut()[0].weight = Matrix::identity(2);
        assert_eq!(p.features(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        // no activation on the last layer
        assert_eq!(p.features(&[-1.0, 2.0]).unwrap(), vec![-1.0, 2.0]);
    }

    #[test]
    fn forward_matches_naive_loop() {
        let mut rng = RngStream::new(3);
        let mut p = init_encoder(&[5, 7, 6, 3], &mut rng).unwrap();
        for l in p.layers_mut() {
            for b in &mut l.bias {
                *b = 0.1 * rng.next_gaussian();
            }
        }
        let x = rng.draw_gaussian(5, 0.0, 1.0).unwrap();
        let got = p.features(&x).unwrap();
        assert!(crate::numerics::max_abs_diff(&got, &naive_forward(&p, &x)) < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = EncoderParams::zeros(&[3, 2]).unwrap();
        assert!(p.forward(&[1.0]).is_err());
        let (_, tape) = p.forward(&[1.0, 2.0, 3.0]).unwrap();
        let other = EncoderParams::zeros(&[4, 2]).unwrap();
        assert!(other.backward(&tape, &[1.0, 1.0]).is_err());
        assert!(p.backward(&tape, &[1.0]).is_err());
        assert!(EncoderParams::zeros(&[3]).is_err());
        assert!(init_encoder(&[], &mut RngStream::new(0)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let p = init_encoder(&[3, 4, 2], &mut RngStream::new(1)).unwrap();
        let (_, tape) = p.forward(&[0.5, -0.2, 1.0]).unwrap();
        let (g, gx) = p.backward(&tape, &[0.0, 0.0]).unwrap();
        assert!(g.to_flat().iter().all(|v| *v == 0.0));
        assert!(gx.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_layer_calculus() {
        let mut p = EncoderParams::zeros(&[3, 2]).unwrap();
        p.layers_mut()[0].weight =
            Matrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap();
        let x = [0.2, -0.4, 1.5];
        let up = [2.0, -3.0];
        let (_, tape) = p.forward(&x).unwrap();
        let (g, gx) = p.backward(&tape, &up).unwrap();
        let mut expect = Matrix::zeros(2, 3);
        expect.add_outer(1.0, &up, &x);
        assert_eq!(g.layers()[0].weight, expect);
        assert_eq!(g.layers()[0].bias, up.to_vec());
        assert_eq!(gx, p.layers()[0].weight.matvec_t(&up));
    }

    #[test]
    fn init_shapes_and_determinism() {
        let a = init_encoder(&[4, 8, 5], &mut RngStream::new(7)).unwrap();
        let b = init_encoder(&[4, 8, 5], &mut RngStream::new(7)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.layers()[0].weight.shape(), (8, 4));
        assert_eq!(a.layers()[1].weight.shape(), (5, 8));
        assert_eq!(a.sizes(), vec![4, 8, 5]);
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn init_fan_in_stddev() {
        // 2500 draws of the (8, 4) layer gives 10^4 fan-in-4 entries.
        let mut rng = RngStream::new(99);
        let mut w = Vec::new();
        while w.len() < 10_000 {
            let p = init_encoder(&[4, 8, 5], &mut rng).unwrap();
            w.extend_from_slice(p.layers()[0].weight.as_slice());
        }
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 0.5).abs() < 0.1, "sd {sd}");
    }

    #[test]
    fn flat_round_trip() {
        let p = init_encoder(&[3, 4, 2], &mut RngStream::new(2)).unwrap();
        let mut q = p.zeros_like();
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.num_params(), 3 * 4 + 4 + 4 * 2 + 2);
        assert!(q.set_flat(&[0.0]).is_err());
    }
}
