//! Multi-branch projection head.
//!
//! `B` parallel branches see the same input. Each branch applies its own
//! inverted dropout to the input and then an affine map `D -> E`; the
//! branch outputs are summed into one `E`-dimensional embedding. In eval
//! mode dropout is the identity, so the head collapses to the single affine
//! map `(Σ W_b, Σ c_b)`.

use crate::error::{Error, Result};
use crate::numerics::{streams, Matrix, Rng};

/// Hard ceiling on embedding width.
pub const MAX_EMBED_DIM: usize = 64;
pub const DEFAULT_BRANCHES: usize = 20;
pub const BRANCH_PRESETS: [usize; 3] = [10, 20, 40];

#[derive(Clone, Debug, PartialEq)]
pub struct Branch {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub dropout_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    in_dim: usize,
    out_dim: usize,
    branches: Vec<Branch>,
}

/// Rates evenly spaced from 0.1 to 0.5 inclusive.
pub fn default_dropout_rates(num_branches: usize) -> Vec<f64> {
    match num_branches {
        0 => Vec::new(),
        1 => vec![0.1],
        b => (0..b)
            .map(|i| 0.1 + 0.4 * i as f64 / (b - 1) as f64)
            .collect(),
    }
}

fn validate_rate(b: usize, p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!(
            "dropout rate of branch {b} must lie in [0, 1), got {p}"
        )));
    }
    Ok(())
}

/// Scaled-normal init (std `1/sqrt(in_dim)`), zero biases.
pub fn init_head(
    in_dim: usize,
    num_branches: usize,
    out_dim: usize,
    dropout_rates: &[f64],
    seed: u64,
) -> Result<HeadParams> {
    if num_branches == 0 {
        return Err(Error::invalid("head needs at least one branch"));
    }
    if dropout_rates.len() != num_branches {
        return Err(Error::DimensionMismatch {
            context: "init_head dropout_rates",
            expected: num_branches,
            found: dropout_rates.len(),
        });
    }
    let mut rng = Rng::new(seed, streams::INIT_HEAD);
    let std = 1.0 / (in_dim as f64).sqrt();
    let branches = dropout_rates
        .iter()
        .map(|&p| Branch {
            weight: rng.normal_matrix(in_dim, out_dim, std),
            bias: vec![0.0; out_dim],
            dropout_rate: p,
        })
        .collect();
    HeadParams::from_branches(in_dim, out_dim, branches)
}

/// Per-branch state the backward pass needs.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Matrix,
    /// `None` for branches that did not drop anything (rate 0).
    pub masks: Vec<Option<Matrix>>,
}

pub enum HeadMode<'a> {
    Eval,
    /// One dropout stream per branch. May be `None` only if every rate is 0.
    Train(Option<&'a mut [Rng]>),
    /// Replays previously drawn masks; used to hold dropout fixed.
    FixedMasks(&'a [Option<Matrix>]),
}

impl HeadParams {
    pub fn from_branches(in_dim: usize, out_dim: usize, branches: Vec<Branch>) -> Result<Self> {
        if out_dim == 0 || out_dim > MAX_EMBED_DIM {
            return Err(Error::invalid(format!(
                "embedding dimension must lie in [1, {MAX_EMBED_DIM}], got {out_dim}"
            )));
        }
        if in_dim == 0 {
            return Err(Error::invalid("head input dimension must be >= 1"));
        }
        if branches.is_empty() {
            return Err(Error::invalid("head needs at least one branch"));
        }
        for (b, br) in branches.iter().enumerate() {
            validate_rate(b, br.dropout_rate)?;
            if br.weight.shape() != (in_dim, out_dim) || br.bias.len() != out_dim {
                return Err(Error::invalid(format!(
                    "branch {b} has weight {:?} / bias {}, expected ({in_dim}, {out_dim}) / {out_dim}",
                    br.weight.shape(),
                    br.bias.len()
                )));
            }
            if !br.weight.is_finite() || br.bias.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("branch {b} parameters")));
            }
        }
        Ok(HeadParams {
            in_dim,
            out_dim,
            branches,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    pub(crate) fn branches_mut(&mut self) -> &mut [Branch] {
        &mut self.branches
    }

    pub fn dropout_rates(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.dropout_rate).collect()
    }

    /// The eval-mode head as one affine map.
    pub fn collapsed(&self) -> (Matrix, Vec<f64>) {
        let mut w = Matrix::zeros(self.in_dim, self.out_dim);
        let mut c = vec![0.0; self.out_dim];
        for br in &self.branches {
            w.add_assign(&br.weight).expect("branch shapes validated");
            for (a, b) in c.iter_mut().zip(&br.bias) {
                *a += b;
            }
        }
        (w, c)
    }

    /// Fresh dropout streams, one per branch.
    pub fn dropout_rngs(&self, seed: u64) -> Vec<Rng> {
        (0..self.branches.len())
            .map(|b| Rng::new(seed, streams::DROPOUT_BASE + b as u64))
            .collect()
    }
}

fn draw_mask(rng: &mut Rng, rows: usize, cols: usize, p: f64) -> Matrix {
    let keep_scale = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.uniform() >= p { keep_scale } else { 0.0 })
        .collect();
    Matrix::from_vec(rows, cols, data).expect("mask shape")
}

pub fn head_forward(
    params: &HeadParams,
    x: &Matrix,
    mode: HeadMode<'_>,
) -> Result<(Matrix, Option<ForwardCache>)> {
    if x.cols() != params.in_dim {
        return Err(Error::DimensionMismatch {
            context: "head_forward input",
            expected: params.in_dim,
            found: x.cols(),
        });
    }
    let nb = params.branches.len();
    let masks: Option<Vec<Option<Matrix>>> = match mode {
        HeadMode::Eval => None,
        HeadMode::Train(rngs) => {
            let needs_rng = params.branches.iter().any(|b| b.dropout_rate > 0.0);
            match rngs {
                Some(rngs) => {
                    if rngs.len() != nb {
                        return Err(Error::DimensionMismatch {
                            context: "head_forward dropout streams",
                            expected: nb,
                            found: rngs.len(),
                        });
                    }
                    Some(
                        params
                            .branches
                            .iter()
                            .zip(rngs.iter_mut())
                            .map(|(br, rng)| {
                                (br.dropout_rate > 0.0)
                                    .then(|| draw_mask(rng, x.rows(), x.cols(), br.dropout_rate))
                            })
                            .collect(),
                    )
                }
                None if needs_rng => {
                    return Err(Error::invalid(
                        "train mode with non-zero dropout requires an rng",
                    ))
                }
                None => Some(vec![None; nb]),
            }
        }
        HeadMode::FixedMasks(masks) => {
            if masks.len() != nb {
                return Err(Error::DimensionMismatch {
                    context: "head_forward fixed masks",
                    expected: nb,
                    found: masks.len(),
                });
            }
            for m in masks.iter().flatten() {
                if m.shape() != x.shape() {
                    return Err(Error::DimensionMismatch {
                        context: "head_forward fixed mask rows",
                        expected: x.rows(),
                        found: m.rows(),
                    });
                }
            }
            Some(masks.to_vec())
        }
    };

    let mut emb = Matrix::zeros(x.rows(), params.out_dim);
    for (b, br) in params.branches.iter().enumerate() {
        let mask = masks.as_ref().and_then(|m| m[b].as_ref());
        let mut y = match mask {
            Some(mask) => x.hadamard(mask)?.matmul(&br.weight)?,
            None => x.matmul(&br.weight)?,
        };
        y.add_row_vector(&br.bias)?;
        emb.add_assign(&y)?;
    }
    let cache = masks.map(|masks| ForwardCache {
        input: x.clone(),
        masks,
    });
    Ok((emb, cache))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl HeadGrads {
    pub fn zeros_like(params: &HeadParams) -> Self {
        HeadGrads {
            weights: params
                .branches
                .iter()
                .map(|_| Matrix::zeros(params.in_dim, params.out_dim))
                .collect(),
            biases: vec![vec![0.0; params.out_dim]; params.branches.len()],
        }
    }
}

/// Exact adjoint of [`head_forward`] for the cached masks.
pub fn head_backward(
    params: &HeadParams,
    cache: &ForwardCache,
    grad_emb: &Matrix,
) -> Result<(HeadGrads, Matrix)> {
    let x = &cache.input;
    if cache.masks.len() != params.branches.len()
        || x.cols() != params.in_dim
        || grad_emb.shape() != (x.rows(), params.out_dim)
    {
        return Err(Error::invalid(format!(
            "stale forward cache: input {:?}, {} masks, grad {:?} for head {}x{} with {} branches",
            x.shape(),
            cache.masks.len(),
            grad_emb.shape(),
            params.in_dim,
            params.out_dim,
            params.branches.len()
        )));
    }
    let mut grads = HeadGrads {
        weights: Vec::with_capacity(params.branches.len()),
        biases: Vec::with_capacity(params.branches.len()),
    };
    let mut grad_x = Matrix::zeros(x.rows(), x.cols());
    for (br, mask) in params.branches.iter().zip(&cache.masks) {
        let grad_bias = grad_emb.column_sums();
        let mut gx = grad_emb.matmul_t(&br.weight)?;
        let grad_w = match mask {
            Some(mask) => {
                gx = gx.hadamard(mask)?;
                x.hadamard(mask)?.t_matmul(grad_emb)?
            }
            None => x.t_matmul(grad_emb)?,
        };
        grad_x.add_assign(&gx)?;
        grads.weights.push(grad_w);
        grads.biases.push(grad_bias);
    }
    Ok((grads, grad_x))
}
