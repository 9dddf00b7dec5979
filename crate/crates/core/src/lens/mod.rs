// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decoding intermediate hidden states into vocabulary distributions.
//!
//! A lens maps a hidden state `h_l` to logits. The plain logit lens applies
//! the model's final LayerNorm and unembedding directly; the tuned lens
//! first passes `h_l` through a learned affine translator `A_l h + b_l`.

mod eval;
mod train;

use std::path::Path;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::numerics::kernels::SeqLayout;
use crate::numerics::{Scalar, Tensor};

pub use eval::{
    covariance, covariance_similarity, eval_per_layer, frobenius_cosine, layer_distributions,
    marginal_bias, marginal_bias_from_probs, prediction_grid, transfer_lens, transfer_penalty_matrix,
    LayerStats, LensReport, PredictionGrid,
};
pub use train::record_lens_head;
pub use train::{train_translators, LensTrainConfig, LensTrainLog};

/// Anything that turns the hidden state at `layer` into logits.
pub trait Lens<T: Scalar> {
    /// `h` is `[layout.tokens(), d]`; `layer` ranges over `0..=L`.
    fn logits(
        &self,
        model: &TransformerModel<T>,
        layer: usize,
        h: &Tensor<T>,
        layout: SeqLayout,
    ) -> Result<Tensor<T>>;

    fn name(&self) -> String;
}

fn check_hidden<T: Scalar>(model: &TransformerModel<T>, layer: usize, h: &Tensor<T>) -> Result<()> {
    if layer > model.n_layers() {
        return Err(Error::OutOfRange(format!("layer {layer} of {}", model.n_layers())));
    }
    if h.shape().len() != 2 || h.cols() != model.d_model() {
        return Err(Error::Shape(format!(
            "hidden state {:?} for width {}",
            h.shape(),
            model.d_model()
        )));
    }
    Ok(())
}

/// The untrained lens variants.
#[derive(Clone, Debug, PartialEq)]
pub enum LogitLens<T> {
    /// `LN(h) W_U`
    Plain,
    /// `LN(h + F_{L-1}(h)) W_U`: keeps the last block.
    Extended,
    /// `LN(h + b_l) W_U` with one bias per layer `0..=L`.
    Debiased(Vec<Tensor<T>>),
}

impl<T: Scalar> Lens<T> for LogitLens<T> {
    fn logits(
        &self,
        model: &TransformerModel<T>,
        layer: usize,
        h: &Tensor<T>,
        layout: SeqLayout,
    ) -> Result<Tensor<T>> {
        check_hidden(model, layer, h)?;
        match self {
            LogitLens::Plain => Ok(model.unembed_hidden(h)),
            LogitLens::Extended => {
                let last = model.n_layers() - 1;
                Ok(model.unembed_hidden(&model.apply_layer(last, h, layout)))
            }
            LogitLens::Debiased(b) => {
                let bias = b
                    .get(layer)
                    .ok_or_else(|| Error::OutOfRange(format!("no bias for layer {layer}")))?;
                if bias.len() != model.d_model() {
                    return Err(Error::Shape("bias width".into()));
                }
                let mut shifted = h.clone();
                shifted.add_row(bias.data());
                Ok(model.unembed_hidden(&shifted))
            }
        }
    }

    fn name(&self) -> String {
        match self {
            LogitLens::Plain => "logit".into(),
            LogitLens::Extended => "extended".into(),
            LogitLens::Debiased(_) => "debiased".into(),
        }
    }
}

/// Affine map `h -> A h + b` for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Translator<T> {
    /// `[d, d]`
    pub a: Tensor<T>,
    /// `[d]`
    pub b: Tensor<T>,
}

impl<T: Scalar> Translator<T> {
    pub fn identity(d: usize) -> Self {
        Self {
            a: Tensor::eye(d),
            b: Tensor::zeros(&[d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.b.len()
    }

    /// Apply to every row of `h`.
    pub fn apply(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = h.matmul_t(&self.a)?;
        out.add_row(self.b.data());
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.a.all_finite() && self.b.all_finite()
    }
}

/// One translator per layer `0..L`; layer `L` decodes with the identity.
#[derive(Clone, Debug, PartialEq)]
pub struct TunedLens<T> {
    /// Configuration of the model the lens was trained against.
    pub config: ModelConfig,
    pub translators: Vec<Translator<T>>,
    /// Run the last block after the translator.
    pub include_final_block: bool,
}

impl<T: Scalar> TunedLens<T> {
    pub fn identity(config: &ModelConfig, include_final_block: bool) -> Self {
        Self {
            config: config.clone(),
            translators: (0..config.n_layers)
                .map(|_| Translator::identity(config.d_model))
                .collect(),
            include_final_block,
        }
    }

    /// The translated state `A_l h + b_l` (unchanged at the final layer).
    pub fn translate(&self, layer: usize, h: &Tensor<T>) -> Result<Tensor<T>> {
        match self.translators.get(layer) {
            Some(t) => t.apply(h),
            None if layer == self.translators.len() => Ok(h.clone()),
            None => Err(Error::OutOfRange(format!("layer {layer}"))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> TunedLens<U> {
        TunedLens {
            config: self.config.clone(),
            translators: self
                .translators
                .iter()
                .map(|t| Translator {
                    a: t.a.cast(),
                    b: t.b.cast(),
                })
                .collect(),
            include_final_block: self.include_final_block,
        }
    }

    pub fn to_container(&self) -> Result<Container> {
        let mut c = Container::new();
        c.set_meta("kind", "lens")?;
        c.set_meta("config", &self.config)?;
        c.set_meta("include_final_block", self.include_final_block)?;
        for (l, t) in self.translators.iter().enumerate() {
            c.push(format!("translator.{l}.A"), &t.a);
            c.push(format!("translator.{l}.b"), &t.b);
        }
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let kind: String = c.meta_as("kind")?;
        if kind != "lens" {
            return Err(Error::Format(format!("expected a lens file, found {kind}")));
        }
        let config: ModelConfig = c.meta_as("config")?;
        config.validate()?;
        let d = config.d_model;
        let translators = (0..config.n_layers)
            .map(|l| {
                Ok(Translator {
                    a: c.get(&format!("translator.{l}.A"), &[d, d])?,
                    b: c.get(&format!("translator.{l}.b"), &[d])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if c.len() != 2 * config.n_layers {
            return Err(Error::Format("unexpected tensors in lens file".into()));
        }
        Ok(Self {
            include_final_block: c.meta_as("include_final_block")?,
            config,
            translators,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    pub(crate) fn check_model(&self, model: &TransformerModel<T>) -> Result<()> {
        if model.n_layers() != self.translators.len() || model.d_model() != self.config.d_model {
            return Err(Error::Shape(format!(
                "lens for {} layers of width {} applied to {} layers of width {}",
                self.translators.len(),
                self.config.d_model,
                model.n_layers(),
                model.d_model()
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Lens<T> for TunedLens<T> {
    fn logits(
        &self,
        model: &TransformerModel<T>,
        layer: usize,
        h: &Tensor<T>,
        layout: SeqLayout,
    ) -> Result<Tensor<T>> {
        check_hidden(model, layer, h)?;
        self.check_model(model)?;
        if layer == model.n_layers() {
            return Ok(model.unembed_hidden(h));
        }
        let mut z = self.translate(layer, h)?;
        if self.include_final_block {
            z = model.apply_layer(model.n_layers() - 1, &z, layout);
        }
        Ok(model.unembed_hidden(&z))
    }

    fn name(&self) -> String {
        "tuned".into()
    }
}
