//! Parameter plumbing shared by the toy networks.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// An ordered list of parameter tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    /// Inserts every tensor into `g`, as differentiable leaves when
    /// `trainable` and as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update(t.digest().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Uniform fan-in initialization for a `[cout, cin, k, k]` kernel and a
/// zero bias. `gain` scales the bound.
pub fn conv_params(cout: usize, cin: usize, k: usize, gain: f64, seed: u64) -> [Tensor; 2] {
    let bound = gain * (3.0 / (cin * k * k) as f64).sqrt();
    [
        rng::uniform(&[cout, cin, k, k], -bound, bound, seed),
        Tensor::zeros(&[cout]),
    ]
}

/// Convolution with "same" padding for odd kernels.
pub fn conv(g: &mut Graph, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
    let k = g.shape(w)[2];
    g.conv2d(x, w, Some(b), stride, k / 2)
}

/// Broadcasts per-plane constants into a `[n, h, w]` tensor.
pub fn planes(values: &[f64], h: usize, w: usize) -> Tensor {
    let mut data = Vec::with_capacity(values.len() * h * w);
    for &v in values {
        data.extend(std::iter::repeat_n(v, h * w));
    }
    Tensor::new(&[values.len(), h, w], data)
}
