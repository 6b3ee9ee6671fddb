//! Trainable parts: the stand-in backbone and the multi-branch head, plus
//! the [`Model`] bundle the trainer owns.

mod backbone;
mod head;

pub use backbone::{backbone_backward, backbone_forward, BackboneGrads, TinyBackbone};
pub use head::{
    default_dropout_rates, head_backward, head_forward, init_head, Branch, ForwardCache, HeadGrads,
    HeadMode, HeadParams, BRANCH_PRESETS, DEFAULT_BRANCHES, MAX_EMBED_DIM,
};

use crate::arcface::ArcFaceParams;
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: TinyBackbone,
    pub head: HeadParams,
    pub arcface: ArcFaceParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    /// `None` when the step did not run through the backbone.
    pub backbone: Option<BackboneGrads>,
    pub head: HeadGrads,
    pub arcface: Matrix,
}

pub fn branch_weight_name(b: usize) -> String {
    format!("head.branch.{b}.weight")
}

pub fn branch_bias_name(b: usize) -> String {
    format!("head.branch.{b}.bias")
}

pub const BACKBONE_WEIGHT: &str = "backbone.weight";
pub const BACKBONE_BIAS: &str = "backbone.bias";
pub const ARCFACE_WEIGHT: &str = "arcface.weight";

impl Model {
    /// Trainable tensors in a fixed order. The backbone is listed first
    /// and only when `with_backbone` is set.
    pub fn named_params_mut(&mut self, with_backbone: bool) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        if with_backbone {
            out.push((BACKBONE_WEIGHT.into(), self.backbone.weight.data_mut()));
            out.push((BACKBONE_BIAS.into(), &mut self.backbone.bias));
        }
        for (b, br) in self.head.branches_mut().iter_mut().enumerate() {
            out.push((branch_weight_name(b), br.weight.data_mut()));
            out.push((branch_bias_name(b), &mut br.bias));
        }
        out.push((ARCFACE_WEIGHT.into(), self.arcface.weight.data_mut()));
        out
    }

    pub fn named_params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            (BACKBONE_WEIGHT.into(), self.backbone.weight.data()),
            (BACKBONE_BIAS.into(), &self.backbone.bias),
        ];
        for (b, br) in self.head.branches().iter().enumerate() {
            out.push((branch_weight_name(b), br.weight.data()));
            out.push((branch_bias_name(b), &br.bias));
        }
        out.push((ARCFACE_WEIGHT.into(), self.arcface.weight.data()));
        out
    }
}

impl Model {
    /// Shapes matching [`Model::named_params`].
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, e) = (self.head.in_dim(), self.head.out_dim());
        let mut out = vec![
            (
                BACKBONE_WEIGHT.to_string(),
                vec![self.backbone.raw_dim(), self.backbone.out_dim()],
            ),
            (BACKBONE_BIAS.to_string(), vec![self.backbone.out_dim()]),
        ];
        for b in 0..self.head.num_branches() {
            out.push((branch_weight_name(b), vec![d, e]));
            out.push((branch_bias_name(b), vec![e]));
        }
        out.push((
            ARCFACE_WEIGHT.to_string(),
            vec![self.arcface.weight.rows(), e],
        ));
        out
    }
}

impl ModelGrads {
    /// Same order as [`Model::named_params_mut`].
    pub fn named(&self, with_backbone: bool) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        if with_backbone {
            if let Some(bb) = &self.backbone {
                out.push((BACKBONE_WEIGHT.into(), bb.weight.data()));
                out.push((BACKBONE_BIAS.into(), &bb.bias));
            }
        }
        for (b, (w, c)) in self.head.weights.iter().zip(&self.head.biases).enumerate() {
            out.push((branch_weight_name(b), w.data()));
            out.push((branch_bias_name(b), c));
        }
        out.push((ARCFACE_WEIGHT.into(), self.arcface.data()));
        out
    }
}

/// Eval-mode embeddings: backbone, then the head without dropout.
pub fn embed(model: &Model, inputs: &Matrix) -> crate::Result<Matrix> {
    let features = backbone_forward(&model.backbone, inputs)?;
    Ok(head_forward(&model.head, &features, HeadMode::Eval)?.0)
}
