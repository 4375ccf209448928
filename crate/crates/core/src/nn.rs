//! Fully connected ReLU network with a fast inference path and a tape path.

use autodiff::{gemm, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// `h_{k+1} = relu(h_k W_k + b_k)`, linear last layer. `W_k` is `[in, out]`
/// row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// Tape handles for one recorded network.
pub struct RecordedMlp {
    pub params: Vec<Var>,
    pub output: Var,
}

impl Mlp {
    /// He-uniform weights, zero biases. `zero_last` zeroes the output layer.
    pub fn init(sizes: &[usize], rng: &mut impl Rng, zero_last: bool) -> Self {
        assert!(sizes.len() >= 2, "network needs input and output sizes");
        let layers = sizes.len() - 1;
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let w = if zero_last && l == layers - 1 {
                vec![0.0; fan_in * fan_out]
            } else {
                (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..bound))
                    .collect()
            };
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Parameters in order `W_0, b_0, W_1, b_1, …`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.n_params());
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&flat[off..off + nw]);
            off += nw;
            b.copy_from_slice(&flat[off..off + nb]);
            off += nb;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.flatten().iter().all(|v| v.is_finite())
    }

    fn layer(&self, l: usize, input: &[f64], rows: usize) -> Vec<f64> {
        let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
        let mut out = Vec::with_capacity(rows * fo);
        for _ in 0..rows {
            out.extend_from_slice(&self.biases[l]);
        }
        gemm(input, rows, fi, false, &self.weights[l], fi, fo, false, &mut out, 1.0, 1.0);
        out
    }

    /// Batched forward pass over `rows` inputs.
    pub fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        for l in 0..self.layers() {
            h = self.layer(l, &h, rows);
            if l + 1 < self.layers() {
                h.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        h
    }

    /// Scalar-output network value and its input gradient for every row.
    pub fn value_and_input_grad(&self, x: &[f64], rows: usize) -> (Vec<f64>, Vec<f64>) {
        assert_eq!(self.output_dim(), 1, "input gradient needs a scalar network");
        let layers = self.layers();
        let mut pre = Vec::with_capacity(layers);
        let mut h = x.to_vec();
        for l in 0..layers {
            let z = self.layer(l, &h, rows);
            h = if l + 1 < layers {
                z.iter().map(|v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
        }
        let value = h;
        let mut g = vec![1.0; rows];
        for l in (0..layers).rev() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            if l + 1 < layers {
                for (gv, z) in g.iter_mut().zip(&pre[l]) {
                    if *z <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let mut next = vec![0.0; rows * fi];
            gemm(&g, rows, fo, false, &self.weights[l], fi, fo, true, &mut next, 1.0, 0.0);
            g = next;
        }
        (value, g)
    }

    /// Record the network on `tape` with fresh parameter leaves.
    pub fn record(&self, tape: &mut Tape, input: Var) -> Result<RecordedMlp> {
        let rows = tape.value(input).shape()[0];
        let mut params = Vec::with_capacity(2 * self.layers());
        let mut h = input;
        for l in 0..self.layers() {
            let (fi, fo) = (self.sizes[l], self.sizes[l + 1]);
            let w = tape.leaf(Tensor::matrix(fi, fo, self.weights[l].clone()));
            let b = tape.leaf(Tensor::matrix(1, fo, self.biases[l].clone()));
            params.push(w);
            params.push(b);
            let z = tape.matmul(h, w)?;
            let bb = tape.broadcast_to(b, &[rows, fo])?;
            let z = tape.add(z, bb)?;
            h = if l + 1 < self.layers() { tape.relu(z)? } else { z };
        }
        Ok(RecordedMlp { params, output: h })
    }
}

/// Concatenate tape gradients (ordered like `Mlp::flatten`) into one vector.
pub fn flatten_grads(tape: &Tape, grads: &[Var]) -> Vec<f64> {
    let mut out = Vec::new();
    for g in grads {
        out.extend_from_slice(tape.value(*g).data());
    }
    out
}
