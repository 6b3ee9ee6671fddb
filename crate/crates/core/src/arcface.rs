//! Sub-center ArcFace logits and the fused training loss.
//!
//! Every class owns `k` sub-center rows in the weight matrix (rows
//! `c*k .. c*k + k`). The class cosine is the maximum over its
//! sub-centers; ties go to the lowest sub-center index. Only the label
//! class receives the additive angular margin, after pooling:
//!
//! * `cos(θ + m)` while `θ <= π - m`,
//! * `cos θ - m·sin m` beyond that point (or, with `easy_margin`, plain
//!   `cos θ` whenever `cos θ <= 0`).
//!
//! All logits are multiplied by the scale `s`.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    backbone_backward, backbone_forward, head_backward, head_forward, ForwardCache, HeadMode,
    Model, ModelGrads,
};
use crate::numerics::{l2_normalize_rows, softmax_xent, streams, Matrix, Rng};

/// Embedding rows shorter than this are treated as degenerate.
pub const EMBED_NORM_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginConfig {
    pub scale: f64,
    pub margin: f64,
    pub subcenters: usize,
    #[serde(default)]
    pub easy_margin: bool,
}

impl MarginConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::invalid(format!(
                "scale must be > 0, got {}",
                self.scale
            )));
        }
        if !(0.0..FRAC_PI_2).contains(&self.margin) {
            return Err(Error::invalid(format!(
                "margin must lie in [0, pi/2), got {}",
                self.margin
            )));
        }
        if self.subcenters == 0 {
            return Err(Error::invalid("subcenters must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArcFaceParams {
    /// `(C*k) x E`; rows are normalized on every forward, stored as-is.
    pub weight: Matrix,
    pub num_classes: usize,
    pub margin: MarginConfig,
}

impl ArcFaceParams {
    pub fn new(weight: Matrix, num_classes: usize, margin: MarginConfig) -> Result<Self> {
        margin.validate()?;
        if num_classes == 0 || weight.rows() != num_classes * margin.subcenters {
            return Err(Error::DimensionMismatch {
                context: "ArcFace weight rows",
                expected: num_classes * margin.subcenters,
                found: weight.rows(),
            });
        }
        Ok(ArcFaceParams {
            weight,
            num_classes,
            margin,
        })
    }

    pub fn init(
        num_classes: usize,
        embed_dim: usize,
        margin: MarginConfig,
        seed: u64,
    ) -> Result<Self> {
        margin.validate()?;
        let mut rng = Rng::new(seed, streams::INIT_ARCFACE);
        let w = rng.normal_matrix(num_classes * margin.subcenters, embed_dim, 1.0);
        ArcFaceParams::new(w, num_classes, margin)
    }

    pub fn subcenters(&self) -> usize {
        self.margin.subcenters
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug)]
pub struct ArcFaceCache {
    emb_unit: Matrix,
    emb_norms: Vec<f64>,
    weight_unit: Matrix,
    weight_norms: Vec<f64>,
    /// batch x C winning sub-center index
    argmax: Vec<usize>,
    /// batch x C pooled cosines, before the margin
    class_cos: Matrix,
    labels: Vec<usize>,
    /// d(adjusted target cosine)/d(target cosine), per row
    target_slope: Vec<f64>,
}

impl ArcFaceCache {
    pub fn class_cosines(&self) -> &Matrix {
        &self.class_cos
    }

    pub fn winning_subcenters(&self) -> &[usize] {
        &self.argmax
    }
}

/// Margin-adjusted target cosine and its derivative w.r.t. `cos θ`.
/// `sin` is `sin θ >= 0`, supplied by the caller.
fn apply_margin(cos: f64, sin: f64, cfg: &MarginConfig) -> (f64, f64) {
    let m = cfg.margin;
    if m == 0.0 {
        return (cos, 1.0);
    }
    let (cos_m, sin_m) = (m.cos(), m.sin());
    let phi = cos * cos_m - sin * sin_m;
    // d sinθ / d cosθ = -cosθ/sinθ, singular at θ = 0 where the cosine's
    // own gradient w.r.t. the inputs vanishes anyway
    let slope = if sin > 1e-12 {
        cos_m + sin_m * cos / sin
    } else {
        cos_m
    };
    if cfg.easy_margin {
        if cos > 0.0 {
            (phi, slope)
        } else {
            (cos, 1.0)
        }
    } else if cos >= -cos_m {
        // θ <= π - m
        (phi, slope)
    } else {
        (cos - m * sin_m, 1.0)
    }
}

/// `sin θ` between unit vectors as `‖u - v‖·‖u + v‖ / 2`, which stays
/// accurate near θ = 0 where `sqrt(1 - cos²)` loses half the digits.
fn unit_sine(u: &[f64], v: &[f64]) -> f64 {
    let (mut d2, mut s2) = (0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        d2 += (a - b) * (a - b);
        s2 += (a + b) * (a + b);
    }
    (d2.sqrt() * s2.sqrt() * 0.5).min(1.0)
}

pub fn arcface_logits(
    p: &ArcFaceParams,
    emb: &Matrix,
    labels: &[usize],
) -> Result<(Matrix, ArcFaceCache)> {
    p.margin.validate()?;
    let batch = emb.rows();
    if emb.cols() != p.embed_dim() {
        return Err(Error::DimensionMismatch {
            context: "arcface_logits embedding width",
            expected: p.embed_dim(),
            found: emb.cols(),
        });
    }
    if labels.len() != batch {
        return Err(Error::DimensionMismatch {
            context: "arcface_logits labels",
            expected: batch,
            found: labels.len(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= p.num_classes) {
        return Err(Error::invalid(format!(
            "label {l} outside [0, {})",
            p.num_classes
        )));
    }
    let emb_unit = l2_normalize_rows(emb, EMBED_NORM_FLOOR)?;
    let emb_norms = (0..batch)
        .map(|i| crate::numerics::norm(emb.row(i)))
        .collect();
    let weight_unit = l2_normalize_rows(&p.weight, EMBED_NORM_FLOOR)?;
    let weight_norms = (0..p.weight.rows())
        .map(|j| crate::numerics::norm(p.weight.row(j)))
        .collect();
    let sub_cos = emb_unit.matmul_t(&weight_unit)?;

    let (c, k) = (p.num_classes, p.subcenters());
    let mut argmax = vec![0; batch * c];
    let mut class_cos = Matrix::zeros(batch, c);
    for i in 0..batch {
        let row = sub_cos.row(i);
        for cls in 0..c {
            let group = &row[cls * k..(cls + 1) * k];
            let mut best = 0;
            for (j, &v) in group.iter().enumerate().skip(1) {
                if v > group[best] {
                    best = j;
                }
            }
            argmax[i * c + cls] = best;
            class_cos.set(i, cls, group[best]);
        }
    }

    let mut logits = class_cos.clone();
    let mut target_slope = Vec::with_capacity(batch);
    for (i, &y) in labels.iter().enumerate() {
        let row = y * k + argmax[i * c + y];
        let sin = unit_sine(emb_unit.row(i), weight_unit.row(row));
        let (adj, slope) = apply_margin(class_cos.get(i, y), sin, &p.margin);
        logits.set(i, y, adj);
        target_slope.push(slope);
    }
    logits.scale(p.margin.scale);

    Ok((
        logits,
        ArcFaceCache {
            emb_unit,
            emb_norms,
            weight_unit,
            weight_norms,
            argmax,
            class_cos,
            labels: labels.to_vec(),
            target_slope,
        },
    ))
}

/// Adjoint of `v -> v/‖v‖` applied row-wise.
fn normalize_backward(unit: &Matrix, norms: &[f64], grad_unit: &Matrix) -> Matrix {
    let mut out = grad_unit.clone();
    for r in 0..unit.rows() {
        let u = unit.row(r);
        let g = grad_unit.row(r);
        let proj = crate::numerics::dot(u, g);
        let inv = 1.0 / norms[r];
        for ((o, &ui), &gi) in out.row_mut(r).iter_mut().zip(u).zip(g) {
            *o = (gi - ui * proj) * inv;
        }
    }
    out
}

/// Returns `(grad_emb, grad_weight)` for upstream `grad_logits`.
pub fn arcface_backward(
    p: &ArcFaceParams,
    cache: &ArcFaceCache,
    grad_logits: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let batch = cache.labels.len();
    let (c, k) = (p.num_classes, p.subcenters());
    if grad_logits.shape() != (batch, c) || cache.weight_unit.shape() != p.weight.shape() {
        return Err(Error::invalid("arcface cache does not match parameters"));
    }
    let s = p.margin.scale;
    let mut grad_sub = Matrix::zeros(batch, c * k);
    for i in 0..batch {
        for cls in 0..c {
            let mut g = s * grad_logits.get(i, cls);
            if cls == cache.labels[i] {
                g *= cache.target_slope[i];
            }
            grad_sub.set(i, cls * k + cache.argmax[i * c + cls], g);
        }
    }
    let grad_emb_unit = grad_sub.matmul(&cache.weight_unit)?;
    let grad_w_unit = grad_sub.t_matmul(&cache.emb_unit)?;
    let grad_emb = normalize_backward(&cache.emb_unit, &cache.emb_norms, &grad_emb_unit);
    let grad_w = normalize_backward(&cache.weight_unit, &cache.weight_norms, &grad_w_unit);
    Ok((grad_emb, grad_w))
}

/// Forward options for [`loss_and_grad`] and [`eval_loss`].
pub struct LossOptions<'a> {
    /// Run inputs through the backbone first (stage 2). When false the
    /// inputs are already features and the backbone is untouched.
    pub through_backbone: bool,
    pub head_mode: HeadMode<'a>,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub loss: f64,
    pub grads: ModelGrads,
    pub head_cache: ForwardCache,
}

/// Backbone → head → sub-center ArcFace → softmax cross-entropy, with the
/// exact gradient of the mean loss w.r.t. every parameter.
pub fn loss_and_grad(
    model: &Model,
    inputs: &Matrix,
    labels: &[usize],
    opts: LossOptions<'_>,
) -> Result<LossOutput> {
    let features = if opts.through_backbone {
        backbone_forward(&model.backbone, inputs)?
    } else {
        inputs.clone()
    };
    let (emb, cache) = head_forward(&model.head, &features, opts.head_mode)?;
    let head_cache = cache.unwrap_or_else(|| ForwardCache {
        input: features.clone(),
        masks: vec![None; model.head.num_branches()],
    });
    let (logits, arc_cache) = arcface_logits(&model.arcface, &emb, labels)?;
    let (loss, grad_logits) = softmax_xent(&logits, labels)?;

    let (grad_emb, grad_arc) = arcface_backward(&model.arcface, &arc_cache, &grad_logits)?;
    let (head_grads, grad_features) = head_backward(&model.head, &head_cache, &grad_emb)?;
    let backbone = if opts.through_backbone {
        Some(backbone_backward(&model.backbone, inputs, &grad_features)?.0)
    } else {
        None
    };
    Ok(LossOutput {
        loss,
        grads: ModelGrads {
            backbone,
            head: head_grads,
            arcface: grad_arc,
        },
        head_cache,
    })
}

/// Mean loss without gradients.
pub fn eval_loss(
    model: &Model,
    inputs: &Matrix,
    labels: &[usize],
    through_backbone: bool,
) -> Result<f64> {
    let features = if through_backbone {
        backbone_forward(&model.backbone, inputs)?
    } else {
        inputs.clone()
    };
    let (emb, _) = head_forward(&model.head, &features, HeadMode::Eval)?;
    let (logits, _) = arcface_logits(&model.arcface, &emb, labels)?;
    Ok(softmax_xent(&logits, labels)?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error};

    fn cfg(scale: f64, margin: f64, subcenters: usize) -> MarginConfig {
        MarginConfig {
            scale,
            margin,
            subcenters,
            easy_margin: false,
        }
    }

    #[test]
    fn plain_cosines_without_margin() {
        let w = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![-1.0, 1.0]]).unwrap();
        let p = ArcFaceParams::new(w, 3, cfg(1.0, 0.0, 1)).unwrap();
        let emb = Matrix::from_rows(&[vec![0.0, 5.0]]).unwrap();
        let (logits, _) = arcface_logits(&p, &emb, &[1]).unwrap();
        assert_eq!(logits.get(0, 1), 1.0);
        assert_eq!(logits.get(0, 0), 0.0);
        assert!((logits.get(0, 2) - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn colinear_target_logit() {
        let mut rng = Rng::new(0, 0);
        let w = rng.normal_matrix(3, 5, 1.0);
        let p = ArcFaceParams::new(w.clone(), 3, cfg(30.0, 0.3, 1)).unwrap();
        let mut emb = Matrix::zeros(1, 5);
        emb.row_mut(0).copy_from_slice(w.row(2));
        emb.scale(3.0);
        let (logits, _) = arcface_logits(&p, &emb, &[2]).unwrap();
        assert!((logits.get(0, 2) - 30.0 * 0.3f64.cos()).abs() < 1e-9);
        assert!((logits.get(0, 2) - 28.66009).abs() < 1e-5);
    }

    #[test]
    fn subcenter_max_pooling() {
        // class 0 subcenters at cosines 0.2 and 0.9 with e = [1, 0]
        let w = Matrix::from_rows(&[
            vec![0.2, (1.0f64 - 0.04).sqrt()],
            vec![0.9, (1.0f64 - 0.81).sqrt()],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ])
        .unwrap();
        let p = ArcFaceParams::new(w, 2, cfg(1.0, 0.0, 2)).unwrap();
        let emb = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let (_, cache) = arcface_logits(&p, &emb, &[1]).unwrap();
        assert!((cache.class_cosines().get(0, 0) - 0.9).abs() < 1e-15);
        assert_eq!(cache.winning_subcenters()[0], 1);
        // exact tie goes to the lower index
        assert_eq!(cache.winning_subcenters()[1], 0);
    }

    #[test]
    fn margin_only_touches_target() {
        let mut rng = Rng::new(1, 0);
        let w = rng.normal_matrix(8, 4, 1.0);
        let emb = rng.normal_matrix(5, 4, 1.0);
        let labels = [0, 1, 2, 3, 1];
        let a = ArcFaceParams::new(w.clone(), 4, cfg(30.0, 0.3, 2)).unwrap();
        let b = ArcFaceParams::new(w, 4, cfg(30.0, 0.5, 2)).unwrap();
        let (la, _) = arcface_logits(&a, &emb, &labels).unwrap();
        let (lb, _) = arcface_logits(&b, &emb, &labels).unwrap();
        for (i, &y) in labels.iter().enumerate() {
            for c in 0..4 {
                if c != y {
                    assert_eq!(la.get(i, c), lb.get(i, c));
                }
            }
        }
    }

    #[test]
    fn hard_case_fallback() {
        let c = cfg(1.0, 0.5, 1);
        let cos: f64 = -0.95; // θ ≈ 2.82 > π - 0.5
        let sin = (1.0 - cos * cos).sqrt();
        let (adj, slope) = apply_margin(cos, sin, &c);
        assert!((adj - (cos - 0.5 * 0.5f64.sin())).abs() < 1e-15);
        assert_eq!(slope, 1.0);
        let cos: f64 = 0.3;
        let (adj, _) = apply_margin(cos, (1.0 - cos * cos).sqrt(), &c);
        assert!((adj - (cos.acos() + 0.5).cos()).abs() < 1e-14);
    }

    #[test]
    fn easy_margin_variant() {
        let mut c = cfg(1.0, 0.5, 1);
        c.easy_margin = true;
        let sin = |x: f64| (1.0 - x * x).sqrt();
        assert_eq!(apply_margin(-0.2, sin(-0.2), &c).0, -0.2);
        assert!((apply_margin(0.4, sin(0.4), &c).0 - (0.4f64.acos() + 0.5).cos()).abs() < 1e-14);
    }

    #[test]
    fn unit_sine_agrees_with_cosine_away_from_zero() {
        let mut rng = Rng::new(9, 0);
        for _ in 0..50 {
            let m = l2_normalize_rows(&rng.normal_matrix(2, 5, 1.0), 1e-12).unwrap();
            let c = crate::numerics::dot(m.row(0), m.row(1));
            assert!((unit_sine(m.row(0), m.row(1)) - (1.0 - c * c).sqrt()).abs() < 1e-12);
        }
        assert_eq!(unit_sine(&[0.6, 0.8], &[0.6, 0.8]), 0.0);
    }

    #[test]
    fn direction_invariance() {
        let mut rng = Rng::new(2, 0);
        let p = ArcFaceParams::new(rng.normal_matrix(6, 4, 1.0), 3, cfg(30.0, 0.3, 2)).unwrap();
        let emb = rng.normal_matrix(4, 4, 1.0);
        let labels = [0, 2, 1, 1];
        let (l0, _) = arcface_logits(&p, &emb, &labels).unwrap();
        let mut scaled = emb.clone();
        scaled.scale(7.25);
        let (l1, _) = arcface_logits(&p, &scaled, &labels).unwrap();
        assert!(l0.max_abs_diff(&l1) < 1e-12);
    }

    #[test]
    fn parameter_validation() {
        let w = Matrix::zeros(4, 2);
        assert!(ArcFaceParams::new(w.clone(), 2, cfg(0.0, 0.3, 2)).is_err());
        assert!(ArcFaceParams::new(w.clone(), 2, cfg(30.0, 1.6, 2)).is_err());
        assert!(ArcFaceParams::new(w.clone(), 2, cfg(30.0, 0.3, 0)).is_err());
        assert!(ArcFaceParams::new(w.clone(), 3, cfg(30.0, 0.3, 2)).is_err());
        let p = ArcFaceParams::new(Matrix::identity(2), 2, cfg(30.0, 0.3, 1)).unwrap();
        let degenerate = Matrix::zeros(1, 2);
        assert!(matches!(
            arcface_logits(&p, &degenerate, &[0]),
            Err(Error::DegenerateRow { row: 0, .. })
        ));
        assert!(arcface_logits(&p, &Matrix::identity(2), &[0, 2]).is_err());
    }

    #[test]
    fn arcface_backward_matches_finite_differences() {
        let mut rng = Rng::new(3, 0);
        let p = ArcFaceParams::new(rng.normal_matrix(8, 4, 1.0), 4, cfg(30.0, 0.3, 2)).unwrap();
        let emb = rng.normal_matrix(5, 4, 1.0);
        let labels = [0, 3, 1, 1, 2];
        let (logits, cache) = arcface_logits(&p, &emb, &labels).unwrap();
        let (_, gl) = softmax_xent(&logits, &labels).unwrap();
        let (ge, gw) = arcface_backward(&p, &cache, &gl).unwrap();
        let f_emb = |e: &[f64]| {
            let m = Matrix::from_vec(5, 4, e.to_vec()).unwrap();
            let (l, _) = arcface_logits(&p, &m, &labels).unwrap();
            softmax_xent(&l, &labels).unwrap().0
        };
        let fd_e = finite_diff_grad(f_emb, emb.data(), 1e-5).unwrap();
        assert!(relative_error(ge.data(), &fd_e) < 1e-5);
        let fd_w = finite_diff_grad(
            |w| {
                let mut q = p.clone();
                q.weight = Matrix::from_vec(8, 4, w.to_vec()).unwrap();
                let (l, _) = arcface_logits(&q, &emb, &labels).unwrap();
                softmax_xent(&l, &labels).unwrap().0
            },
            p.weight.data(),
            1e-5,
        )
        .unwrap();
        assert!(relative_error(gw.data(), &fd_w) < 1e-5);
    }

    #[test]
    fn losing_subcenters_get_exactly_zero_gradient() {
        let mut rng = Rng::new(4, 0);
        let p = ArcFaceParams::new(rng.normal_matrix(12, 4, 1.0), 4, cfg(30.0, 0.3, 3)).unwrap();
        let emb = rng.normal_matrix(3, 4, 1.0);
        let labels = [0, 1, 3];
        let (logits, cache) = arcface_logits(&p, &emb, &labels).unwrap();
        let (_, gl) = softmax_xent(&logits, &labels).unwrap();
        let (_, gw) = arcface_backward(&p, &cache, &gl).unwrap();
        for cls in 0..4 {
            for sub in 0..3 {
                let used = (0..3).any(|i| cache.winning_subcenters()[i * 4 + cls] == sub);
                if !used {
                    assert!(gw.row(cls * 3 + sub).iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}
