use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{same_padding, BatchNorm, Conv, Ctx, Dense};
use crate::autodiff::{checkpoint, standard_normal, Graph, ParamSet, Real, Tensor, Var};
use crate::error::{AsrError, Result};

/// Conventional convolutional autoencoder with a global latent.
///
/// Encoder blocks are conv, ELU, batch norm and 2x2 max pooling; a dense
/// layer produces the latent. The decoder maps the latent back to the
/// smallest feature map, then repeats nearest 2x upsampling, conv, ELU and
/// batch norm, and ends with a sigmoid convolution to RGB.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineConfig {
    pub image_side: usize,
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub kernel: usize,
    pub latent_dim: usize,
    pub bn_momentum: f64,
}

impl Default for BaselineConfig {
    /// 3,778,683 trainable parameters at 256 pixels.
    fn default() -> Self {
        Self {
            image_side: 256,
            encoder_channels: vec![16, 32, 64, 128, 128],
            decoder_channels: vec![128, 64, 32, 16, 16],
            kernel: 3,
            latent_dim: 200,
            bn_momentum: 0.1,
        }
    }
}

impl BaselineConfig {
    /// Same layout for 64-pixel images (three blocks each way).
    pub fn small() -> Self {
        Self {
            image_side: 64,
            encoder_channels: vec![16, 32, 64],
            decoder_channels: vec![64, 32, 16],
            kernel: 3,
            latent_dim: 200,
            bn_momentum: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fits = |blocks: usize| blocks < usize::BITS as usize && self.image_side % (1 << blocks) == 0 && self.image_side >> blocks > 0;
        if self.encoder_channels.is_empty() || self.decoder_channels.is_empty() {
            return Err(AsrError::Config("baseline needs at least one encoder and one decoder block".into()));
        }
        if !fits(self.encoder_channels.len()) || !fits(self.decoder_channels.len()) {
            return Err(AsrError::Config(format!(
                "image side {} is not divisible by 2^blocks",
                self.image_side
            )));
        }
        if self.kernel % 2 == 0 || self.latent_dim == 0 {
            return Err(AsrError::Config("baseline kernel must be odd and latent_dim positive".into()));
        }
        if self.encoder_channels.iter().chain(&self.decoder_channels).any(|&c| c == 0) {
            return Err(AsrError::Config("baseline channel widths must be positive".into()));
        }
        Ok(())
    }

    fn bottleneck(&self) -> (usize, usize) {
        (*self.decoder_channels.first().expect("validated"), self.image_side >> self.decoder_channels.len())
    }
}

#[derive(Clone, Debug)]
pub struct BaselineModel<T: Real> {
    pub config: BaselineConfig,
    pub params: ParamSet<T>,
    encoder: Vec<(Conv, BatchNorm)>,
    to_latent: Dense,
    from_latent: Dense,
    decoder: Vec<(Conv, BatchNorm)>,
    head: Conv,
}

const ELU_ALPHA: f64 = 1.0;

impl<T: Real> BaselineModel<T> {
    pub fn new(config: BaselineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let k = config.kernel;
        let pad = same_padding(k);
        let mut ch = 3;
        let mut encoder = Vec::new();
        for (i, &c) in config.encoder_channels.iter().enumerate() {
            let conv = Conv::new(&mut params, &format!("enc.{i}.conv"), [c, ch, k, k], 1, pad, &mut rng);
            encoder.push((conv, BatchNorm::new(&mut params, &format!("enc.{i}.bn"), c)));
            ch = c;
        }
        let side = config.image_side >> config.encoder_channels.len();
        let flat = ch * side * side;
        let lat = config.latent_dim;
        let to_latent = Dense::new(&mut params, "latent", flat, lat, standard_normal(&[lat], &mut rng), &mut rng);
        let (c0, s0) = config.bottleneck();
        let width = c0 * s0 * s0;
        let from_latent = Dense::new(&mut params, "expand", lat, width, standard_normal(&[width], &mut rng), &mut rng);
        let mut decoder = Vec::new();
        let mut ch = c0;
        for (i, &c) in config.decoder_channels.iter().enumerate() {
            let conv = Conv::new(&mut params, &format!("dec.{i}.conv"), [c, ch, k, k], 1, pad, &mut rng);
            decoder.push((conv, BatchNorm::new(&mut params, &format!("dec.{i}.bn"), c)));
            ch = c;
        }
        let head = Conv::new(&mut params, "head", [3, ch, k, k], 1, pad, &mut rng);
        Ok(Self {
            config,
            params,
            encoder,
            to_latent,
            from_latent,
            decoder,
            head,
        })
    }

    pub fn from_params(config: BaselineConfig, params: ParamSet<T>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.assign(&params)?;
        Ok(m)
    }

    pub fn load(config: BaselineConfig, path: &Path) -> Result<Self> {
        let params = checkpoint::load(path)?;
        Self::from_params(config, params).map_err(|e| AsrError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Global latent `[N, latent_dim]`.
    pub fn encode(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, image: Var) -> Result<Var> {
        let side = self.config.image_side;
        let [_, c, h, w] = g.value(image).dims4("baseline_encode")?;
        if (c, h, w) != (3, side, side) {
            return Err(AsrError::shape("baseline_encode", format!("expected [N, 3, {side}, {side}], got {:?}", g.shape(image))));
        }
        let mut x = image;
        for (conv, bn) in &self.encoder {
            let y = conv.forward(g, ctx, x)?;
            let y = g.elu(y, T::lit(ELU_ALPHA));
            let y = bn.forward(g, ctx, y)?;
            x = g.max_pool2d(y)?;
        }
        let flat = g.flatten(x)?;
        self.to_latent.forward(g, ctx, flat)
    }

    pub fn decode(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, latent: Var) -> Result<Var> {
        let n = g.shape(latent)[0];
        let (c0, s0) = self.config.bottleneck();
        let h = self.from_latent.forward(g, ctx, latent)?;
        let h = g.elu(h, T::lit(ELU_ALPHA));
        let mut x = g.reshape(h, &[n, c0, s0, s0])?;
        for (conv, bn) in &self.decoder {
            let up = g.upsample_nearest2x(x)?;
            let y = conv.forward(g, ctx, up)?;
            let y = g.elu(y, T::lit(ELU_ALPHA));
            x = bn.forward(g, ctx, y)?;
        }
        let out = self.head.forward(g, ctx, x)?;
        Ok(g.sigmoid(out))
    }

    /// Reconstruction and latent.
    pub fn forward(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, image: Var) -> Result<(Var, Var)> {
        let z = self.encode(g, ctx, image)?;
        Ok((self.decode(g, ctx, z)?, z))
    }

    /// Evaluation-mode reconstructions and latents in chunks.
    pub fn infer(&self, images: &Tensor<T>, chunk: usize) -> Result<(Tensor<T>, Vec<Vec<f64>>)> {
        let [n, ..] = images.dims4("infer")?;
        let mut recons = Vec::with_capacity(n);
        let mut latents = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let items = (start..end).map(|i| images.index_first(i)).collect::<Result<Vec<_>>>()?;
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &self.params, false);
            let x = g.constant(Tensor::stack(&items.iter().collect::<Vec<_>>())?);
            let (r, z) = self.forward(&mut g, &mut ctx, x)?;
            let zd = g.value(z).data();
            let dim = self.config.latent_dim;
            for i in 0..end - start {
                recons.push(g.value(r).index_first(i)?);
                latents.push(zd[i * dim..(i + 1) * dim].iter().map(|v| v.as_f64()).collect());
            }
        }
        Ok((Tensor::stack(&recons.iter().collect::<Vec<_>>())?, latents))
    }
}
