//! Encoder-decoder transformer, loss, trainer and checkpoints.

pub mod checkpoint;
pub mod infer;
pub mod network;
pub mod params;
pub mod scalar;
pub mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{CheckpointError, CheckpointMeta, ModelCheckpoint};
pub use infer::{DecoderCache, EncoderState};
pub use network::SeqBatch;
pub use params::Layout;
pub use scalar::Scalar;
pub use train::{LrSchedule, TrainConfig};

use crate::rng::Rng;
use crate::subword::TokenId;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence length {len} exceeds max_len {max_len}")]
    LengthOverflow { len: usize, max_len: usize },
    #[error("token id {id} out of range for vocab size {vocab_size}")]
    IdOutOfRange { id: TokenId, vocab_size: usize },
    #[error("empty sequence")]
    EmptySequence,
    #[error("loss diverged at update {update}: {loss}")]
    Diverged { update: u64, loss: f64 },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// 2 layers, width 64, 4 heads.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            d_model: 64,
            heads: 4,
            ffn_dim: 128,
            vocab_size,
            max_len: 256,
            dropout: 0.3,
        }
    }

    /// The 12-layer, width-1024, 16-head shape of the large pre-trained
    /// models. Only useful for shape checks at desk scale.
    pub fn mbart_large(vocab_size: usize) -> Self {
        Self {
            layers: 12,
            d_model: 1024,
            heads: 16,
            ffn_dim: 4096,
            vocab_size,
            max_len: 1024,
            dropout: 0.3,
        }
    }

    pub fn preset(name: &str, vocab_size: usize) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny(vocab_size)),
            "mbart-large" => Some(Self::mbart_large(vocab_size)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.ffn_dim == 0 {
            return bad("layers, d_model, heads and ffn_dim must be positive");
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if self.vocab_size == 0 || self.max_len == 0 {
            return bad("vocab_size and max_len must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

/// Parameters plus the layout that names them.
#[derive(Debug, Clone)]
pub struct Model<F: Scalar = f32> {
    pub cfg: ModelConfig,
    pub layout: Layout,
    pub params: Vec<F>,
}

impl<F: Scalar> Model<F> {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        let params = params::init_params(&layout, seed);
        Ok(Self { cfg, layout, params })
    }

    pub fn from_params(cfg: ModelConfig, params: Vec<F>) -> Result<Self, ModelError> {
        cfg.validate()?;
        let layout = Layout::new(&cfg);
        if params.len() != layout.total {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        Ok(Self { cfg, layout, params })
    }

    /// Eval-mode logits, `[decoder rows, vocab]`.
    pub fn logits(&self, batch: &SeqBatch) -> Result<Vec<F>, ModelError> {
        batch.validate(&self.cfg)?;
        Ok(network::forward(&self.params, &self.layout, &self.cfg, batch, 0.0, None).logits)
    }

    /// Per-position next-token distributions for one sequence pair.
    pub fn forward_probs(
        &self,
        encoder_input: &[TokenId],
        decoder_input: &[TokenId],
    ) -> Result<Vec<Vec<F>>, ModelError> {
        let mut batch = SeqBatch::default();
        batch.push(encoder_input, decoder_input, &vec![0; decoder_input.len()]);
        let logits = self.logits(&batch)?;
        Ok(logits
            .chunks(self.cfg.vocab_size)
            .map(|row| {
                let mut row = row.to_vec();
                network::masked_softmax(&mut row, |_| true);
                row
            })
            .collect())
    }

    /// Summed label-smoothed loss and its gradient, scaled so that the
    /// gradient is that of the per-token mean.
    ///
    /// Dropout with rate `dropout` is applied only when `rng` is given.
    pub fn loss_and_grad(
        &self,
        batch: &SeqBatch,
        label_smoothing: f64,
        dropout: f64,
        rng: Option<&mut Rng>,
        grads: &mut [F],
    ) -> Result<LossStats, ModelError> {
        batch.validate(&self.cfg)?;
        let tokens = batch.label_tokens();
        if tokens == 0 {
            return Err(ModelError::EmptySequence);
        }
        let tape = network::forward(&self.params, &self.layout, &self.cfg, batch, dropout, rng);
        let mut dlogits = vec![F::zero(); tape.logits.len()];
        let sum = network::smoothed_xent(
            &tape.logits,
            &batch.labels,
            self.cfg.vocab_size,
            label_smoothing,
            1.0 / tokens as f64,
            Some(&mut dlogits),
        );
        network::backward(&self.params, grads, &self.layout, &self.cfg, batch, &tape, &dlogits);
        Ok(LossStats { sum, tokens })
    }

    /// Eval-mode summed loss without gradients.
    pub fn loss(&self, batch: &SeqBatch, label_smoothing: f64) -> Result<LossStats, ModelError> {
        let logits = self.logits(batch)?;
        let sum = network::smoothed_xent(&logits, &batch.labels, self.cfg.vocab_size, label_smoothing, 1.0, None);
        Ok(LossStats {
            sum,
            tokens: batch.label_tokens(),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }
}

impl Model<f32> {
    pub fn to_f64(&self) -> Model<f64> {
        Model {
            cfg: self.cfg.clone(),
            layout: self.layout.clone(),
            params: self.params.iter().map(|&v| v as f64).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossStats {
    pub sum: f64,
    pub tokens: usize,
}

impl LossStats {
    pub fn mean(&self) -> f64 {
        self.sum / self.tokens.max(1) as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            ffn_dim: 12,
            vocab_size: 9,
            max_len: 16,
            dropout: 0.0,
        }
    }

    #[test]
    fn presets_validate() {
        ModelConfig::tiny(100).validate().unwrap();
        ModelConfig::mbart_large(100).validate().unwrap();
        let mut c = small();
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn probabilities_sum_to_one() {
        let m = Model::<f32>::init(small(), 3).unwrap();
        let probs = m.forward_probs(&[4, 5, 6], &[1, 7]).unwrap();
        for row in probs {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Model::<f32>::init(small(), 3).unwrap();
        assert!(matches!(
            m.forward_probs(&[4, 99], &[1]),
            Err(ModelError::IdOutOfRange { id: 99, .. })
        ));
        let long = vec![4; 17];
        assert!(matches!(
            m.forward_probs(&long, &[1]),
            Err(ModelError::LengthOverflow { len: 17, .. })
        ));
    }
}
