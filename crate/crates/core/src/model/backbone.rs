//! Affine stand-in for a pretrained feature extractor, trainable only in
//! the second stage.

use crate::error::{Error, Result};
use crate::numerics::{streams, Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct TinyBackbone {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl TinyBackbone {
    pub fn new(weight: Matrix, bias: Vec<f64>, frozen: bool) -> Result<Self> {
        if weight.cols() != bias.len() {
            return Err(Error::DimensionMismatch {
                context: "TinyBackbone bias",
                expected: weight.cols(),
                found: bias.len(),
            });
        }
        Ok(TinyBackbone {
            weight,
            bias,
            frozen,
        })
    }

    pub fn identity(dim: usize, frozen: bool) -> Self {
        TinyBackbone {
            weight: Matrix::identity(dim),
            bias: vec![0.0; dim],
            frozen,
        }
    }

    pub fn random(raw_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = Rng::new(seed, streams::INIT_BACKBONE);
        TinyBackbone {
            weight: rng.normal_matrix(raw_dim, out_dim, 1.0 / (raw_dim as f64).sqrt()),
            bias: vec![0.0; out_dim],
            frozen: false,
        }
    }

    pub fn raw_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

pub fn backbone_forward(bb: &TinyBackbone, raw: &Matrix) -> Result<Matrix> {
    if raw.cols() != bb.raw_dim() {
        return Err(Error::DimensionMismatch {
            context: "backbone_forward input",
            expected: bb.raw_dim(),
            found: raw.cols(),
        });
    }
    let mut out = raw.matmul(&bb.weight)?;
    out.add_row_vector(&bb.bias)?;
    Ok(out)
}

/// Returns parameter gradients and the gradient w.r.t. `raw`. Parameter
/// gradients are computed even when frozen; discarding them is the
/// trainer's job.
pub fn backbone_backward(
    bb: &TinyBackbone,
    raw: &Matrix,
    grad_out: &Matrix,
) -> Result<(BackboneGrads, Matrix)> {
    if grad_out.shape() != (raw.rows(), bb.out_dim()) || raw.cols() != bb.raw_dim() {
        return Err(Error::DimensionMismatch {
            context: "backbone_backward",
            expected: bb.out_dim(),
            found: grad_out.cols(),
        });
    }
    let weight = raw.t_matmul(grad_out)?;
    let bias = grad_out.column_sums();
    let grad_raw = grad_out.matmul_t(&bb.weight)?;
    Ok((BackboneGrads { weight, bias }, grad_raw))
}
