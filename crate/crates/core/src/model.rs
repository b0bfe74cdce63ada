//! The full segmentation network: encoder → context → decoder → head.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, GlobalContext};
use crate::backbone::{self, BackboneConfig, FeaturePyramid, STAGES};
use crate::decoder::{self, DecoderFeatures};
use crate::error::{Error, Result};
use crate::head::{self, HeadOutput};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{read_checkpoint, write_checkpoint, Tape, Tensor, Var};

/// Where the kernel-initialising context vector `G` comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextSource {
    /// Self-attention over all five pooled stages.
    EncoderAttention,
    /// Pooled deepest stage only (ablation baseline).
    DeepestStage,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub d_model: usize,
    pub c_d: usize,
    pub context: ContextSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            d_model: 64,
            c_d: decoder::DEFAULT_CD,
            context: ContextSource::EncoderAttention,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.d_model == 0 || self.c_d == 0 {
            return Err(Error::shape("model", "d_model and c_d must be positive"));
        }
        Ok(())
    }

    /// Recovers the architecture from parameter shapes.
    pub fn infer<T: Scalar>(params: &ParamStore<T>) -> Result<Self> {
        let dim = |name: &str, axis: usize| -> Result<usize> {
            params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))
                .map(|t| t.shape()[axis])
        };
        let mut channels = [0; STAGES];
        for (i, c) in channels.iter_mut().enumerate() {
            *c = dim(&format!("encoder.stage{}.down.weight", i + 1), 0)?;
        }
        let blocks_per_stage = (1..)
            .take_while(|b| params.contains(&format!("encoder.stage1.block{b}.conv1.weight")))
            .count();
        let context = if params.contains("ea.query.weight") {
            ContextSource::EncoderAttention
        } else {
            ContextSource::DeepestStage
        };
        Ok(Self {
            backbone: BackboneConfig { channels, blocks_per_stage },
            d_model: dim("head.phi1.weight", 0)?,
            c_d: dim("uca.stage1.weight", 0)?,
            context,
        })
    }
}

/// Everything a forward pass produces, kept for diagnostics.
#[derive(Clone, Debug)]
pub struct ModelOutput<'t, T: Scalar> {
    pub pyramid: FeaturePyramid<'t, T>,
    pub context: GlobalContext<'t, T>,
    pub decoder: DecoderFeatures<'t, T>,
    pub head: HeadOutput<'t, T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> SegModel<T> {
    /// Fresh model with Kaiming-uniform weights and zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        backbone::init(&config.backbone, &mut params, &mut rng);
        match config.context {
            ContextSource::EncoderAttention => {
                attention::init(&config.backbone.channels, config.d_model, &mut params, &mut rng)
            }
            ContextSource::DeepestStage => {
                attention::init_deepest_only(config.backbone.channels[STAGES - 1], config.d_model, &mut params, &mut rng)
            }
        }
        decoder::init(&config.backbone.channels, config.c_d, &mut params, &mut rng);
        head::init(config.d_model, config.c_d, &mut params, &mut rng);
        Ok(Self { config, params })
    }

    pub fn from_params(params: ParamStore<T>) -> Result<Self> {
        let config = ModelConfig::infer(&params)?;
        config.validate()?;
        Ok(Self { config, params })
    }

    /// Forward pass on `image: [N,3,H,W]` with values in `[0,1]`.
    pub fn forward<'t>(&self, tape: &'t Tape<T>, image: &Var<'t, T>) -> Result<ModelOutput<'t, T>> {
        let x = image.affine(2.0, -1.0)?;
        let pyramid = backbone::encode(tape, &self.params, &self.config.backbone, &x)?;
        let context = match self.config.context {
            ContextSource::EncoderAttention => {
                let pooled = attention::pool_stages(&pyramid)?;
                attention::encoder_attention(tape, &self.params, self.config.d_model, &pooled)?
            }
            ContextSource::DeepestStage => attention::deepest_stage_context(tape, &self.params, &pyramid)?,
        };
        let unified = decoder::unify_channels(tape, &self.params, &pyramid)?;
        let decoder = decoder::decode(tape, &self.params, &unified)?;
        let head = head::run_head(tape, &self.params, &context, &decoder)?;
        Ok(ModelOutput { pyramid, context, decoder, head })
    }

    /// Logits at input resolution, `[N,1,H,W]`: the finest prediction
    /// upsampled ×2.
    pub fn predict_logits(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let x = tape.constant(image.clone());
        let out = self.forward(&tape, &x)?;
        Ok(out.head.primary().logits.upsample_bilinear(2)?.value())
    }

    /// Foreground probabilities at input resolution.
    pub fn predict_proba(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut t = self.predict_logits(image)?;
        for v in t.data_mut() {
            *v = crate::tensor::kernels::sigmoid(*v);
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        write_checkpoint(&mut out, self.params.entries())?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let entries = read_checkpoint(&mut BufReader::new(file))?;
        Self::from_params(ParamStore::from_entries(entries))
    }

    pub fn cast<U: Scalar>(&self) -> SegModel<U> {
        SegModel { config: self.config.clone(), params: self.params.cast() }
    }
}
