use std::f64::consts::TAU;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv_out, same_padding, BatchNorm, Conv, Ctx, Dense};
use super::latent::StructuredLatent;
use crate::autodiff::{checkpoint, Graph, ParamSet, Real, Tensor, Var};
use crate::error::{AsrError, Result};
use crate::renderer::{render_scene, RenderConfig, ScaleConfig, MAX_SCALE, MIN_SCALE};

/// One convolution inside a ConvBlock; padding is `kernel / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvSpec {
    const fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        Self { channels, kernel, stride }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AsrConfig {
    pub image_side: usize,
    /// Convolutions of each ConvBlock; block `j` feeds the scale-`j` Modeler.
    pub blocks: Vec<Vec<ConvSpec>>,
    /// Hidden width of the background network.
    pub background_hidden: usize,
    /// Cells per grid side, one entry per scale.
    pub grids: Vec<usize>,
    pub sharpness: f64,
    pub bn_momentum: f64,
}

impl Default for AsrConfig {
    /// 256-pixel images; maps of 64, 16 and 4 pixels feeding 8x8, 4x4 and
    /// 2x2 grids.
    fn default() -> Self {
        let c = |ch| ConvSpec::new(ch, 5, 2);
        Self {
            image_side: 256,
            blocks: vec![vec![c(32), c(32)], vec![c(64), c(64)], vec![c(128), c(128)]],
            background_hidden: 64,
            grids: vec![8, 4, 2],
            sharpness: 1.0,
            bn_momentum: 0.1,
        }
    }
}

impl AsrConfig {
    /// Reduced network for 64-pixel images, keeping the 8x8, 4x4 and 2x2
    /// grids.
    pub fn small() -> Self {
        let c = |ch| ConvSpec::new(ch, 5, 2);
        Self {
            image_side: 64,
            blocks: vec![vec![c(16)], vec![c(32), c(32)], vec![c(64)]],
            background_hidden: 64,
            grids: vec![8, 4, 2],
            sharpness: 1.0,
            bn_momentum: 0.1,
        }
    }

    pub fn scales(&self) -> Vec<ScaleConfig> {
        self.grids
            .iter()
            .map(|&g| ScaleConfig {
                grid_h: g,
                grid_w: g,
                spacing: if g == 0 { 0 } else { self.image_side / g },
            })
            .collect()
    }

    pub fn render(&self) -> RenderConfig {
        RenderConfig {
            sharpness: self.sharpness,
            image_side: self.image_side,
        }
    }

    /// Feature-map side after each block.
    pub fn map_sides(&self) -> Result<Vec<usize>> {
        let mut side = self.image_side;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (j, block) in self.blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(AsrError::Config(format!("ConvBlock {j} has no convolutions")));
            }
            for c in block {
                if c.channels == 0 || c.kernel == 0 || c.stride == 0 {
                    return Err(AsrError::Config(format!("ConvBlock {j}: zero-sized convolution {c:?}")));
                }
                side = conv_out(side, c.kernel, c.stride, same_padding(c.kernel))
                    .filter(|&s| s > 0)
                    .ok_or_else(|| AsrError::Config(format!("ConvBlock {j} shrinks the map below one pixel")))?;
            }
            out.push(side);
        }
        Ok(out)
    }

    /// Modeler strides mapping each block's output onto its grid.
    pub fn modeler_strides(&self) -> Result<Vec<usize>> {
        let sides = self.map_sides()?;
        sides
            .iter()
            .zip(&self.grids)
            .enumerate()
            .map(|(j, (&m, &g))| {
                if g == 0 || m % g != 0 {
                    return Err(AsrError::Config(format!(
                        "scale {j}: a {m}x{m} map cannot be strided onto a {g}x{g} grid"
                    )));
                }
                Ok(m / g)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != self.grids.len() {
            return Err(AsrError::Config(format!(
                "{} ConvBlocks for {} scales",
                self.blocks.len(),
                self.grids.len()
            )));
        }
        for s in self.scales() {
            s.validate(self.image_side)?;
        }
        self.render().validate()?;
        self.modeler_strides()?;
        if self.background_hidden == 0 {
            return Err(AsrError::Config("background_hidden must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(AsrError::Config(format!("bn_momentum {} outside [0, 1]", self.bn_momentum)));
        }
        Ok(())
    }

    pub fn ellipse_count(&self) -> usize {
        self.grids.iter().map(|g| g * g).sum()
    }
}

/// Graph handles produced by [`AsrModel::forward`].
#[derive(Clone, Debug)]
pub struct AsrOutput {
    pub recon: Var,
    /// Mapped primitive parameters `[N, 6, gh, gw]` per scale.
    pub maps: Vec<Var>,
    /// Background colour `[N, 3]`.
    pub background: Var,
    /// ConvBlock outputs.
    pub latents: Vec<Var>,
}

/// Encoder, background network and per-scale Modelers. The renderer it
/// drives has no parameters.
#[derive(Clone, Debug)]
pub struct AsrModel<T: Real> {
    pub config: AsrConfig,
    pub params: ParamSet<T>,
    blocks: Vec<Vec<(Conv, BatchNorm)>>,
    bg_hidden: Dense,
    bg_out: Dense,
    modelers: Vec<Conv>,
}

const RANGE_SCALE: [f64; 6] = [MAX_SCALE - MIN_SCALE, MAX_SCALE - MIN_SCALE, TAU, 1.0, 1.0, 1.0];
const RANGE_OFFSET: [f64; 6] = [MIN_SCALE, MIN_SCALE, 0.0, 0.0, 0.0, 0.0];

impl<T: Real> AsrModel<T> {
    /// Xavier weights with `N(0, 1)` biases for convolutions and Modelers;
    /// background layer biases start at 1.
    pub fn new(config: AsrConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut blocks = Vec::new();
        let mut ch = 3;
        for (j, block) in config.blocks.iter().enumerate() {
            let mut layers = Vec::new();
            for (k, c) in block.iter().enumerate() {
                let name = format!("enc.{j}.{k}");
                let conv = Conv::new(
                    &mut params,
                    &format!("{name}.conv"),
                    [c.channels, ch, c.kernel, c.kernel],
                    c.stride,
                    same_padding(c.kernel),
                    &mut rng,
                );
                layers.push((conv, BatchNorm::new(&mut params, &format!("{name}.bn"), c.channels)));
                ch = c.channels;
            }
            blocks.push(layers);
        }
        let sides = config.map_sides()?;
        let flat = ch * sides.last().map_or(0, |s| s * s);
        let hid = config.background_hidden;
        let bg_hidden = Dense::new(&mut params, "background.0", flat, hid, Tensor::ones(&[hid]), &mut rng);
        let bg_out = Dense::new(&mut params, "background.1", hid, 3, Tensor::ones(&[3]), &mut rng);
        let strides = config.modeler_strides()?;
        let modelers = config
            .blocks
            .iter()
            .zip(strides)
            .enumerate()
            .map(|(j, (b, s))| {
                let cin = b.last().expect("validated").channels;
                Conv::new(&mut params, &format!("modeler.{j}"), [6, cin, 1, 1], s, 0, &mut rng)
            })
            .collect();
        Ok(Self {
            config,
            params,
            blocks,
            bg_hidden,
            bg_out,
            modelers,
        })
    }

    /// Rebuilds the architecture for `config` and adopts `params`.
    pub fn from_params(config: AsrConfig, params: ParamSet<T>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.assign(&params)?;
        Ok(m)
    }

    pub fn load(config: AsrConfig, path: &Path) -> Result<Self> {
        let params = checkpoint::load(path)?;
        Self::from_params(config, params).map_err(|e| AsrError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.params, path)
    }

    pub fn cast<U: Real>(&self) -> AsrModel<U> {
        AsrModel {
            config: self.config.clone(),
            params: self.params.cast(),
            blocks: self.blocks.clone(),
            bg_hidden: self.bg_hidden,
            bg_out: self.bg_out,
            modelers: self.modelers.clone(),
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn check_input(&self, g: &Graph<T>, image: Var) -> Result<usize> {
        let side = self.config.image_side;
        let [n, c, h, w] = g.value(image).dims4("encode")?;
        if c != 3 {
            return Err(AsrError::dim("encode", "channels", 3, c));
        }
        if h != side || w != side {
            return Err(AsrError::dim("encode", "image side", side, if h != side { h } else { w }));
        }
        if g.value(image).data().iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
            return Err(AsrError::Contract("input pixels must lie in [0, 1]".into()));
        }
        Ok(n)
    }

    /// ConvBlock outputs and the background colour `[N, 3]`.
    pub fn encode(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, image: Var) -> Result<(Vec<Var>, Var)> {
        self.check_input(g, image)?;
        let mut x = image;
        let mut latents = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            for (conv, bn) in block {
                let y = conv.forward(g, ctx, x)?;
                let y = g.relu(y);
                x = bn.forward(g, ctx, y)?;
            }
            latents.push(x);
        }
        let flat = g.flatten(x)?;
        let h = self.bg_hidden.forward(g, ctx, flat)?;
        let h = g.relu(h);
        let o = self.bg_out.forward(g, ctx, h)?;
        Ok((latents, g.sigmoid(o)))
    }

    /// Primitive parameters of scale `j`: strided 1x1 convolution, sigmoid,
    /// gate, then range mapping to `w, h` in `[0.1, 2]`, `d` in `[0, 2pi]`
    /// and `a` in `[0, 1]`.
    pub fn model_scale(&self, g: &mut Graph<T>, ctx: &Ctx<'_, T>, z: Var, j: usize, gate: f64) -> Result<Var> {
        if !(0.0..=1.0).contains(&gate) {
            return Err(AsrError::Contract(format!("gate {gate} for scale {j} outside [0, 1]")));
        }
        let modeler = self
            .modelers
            .get(j)
            .ok_or_else(|| AsrError::Config(format!("no Modeler for scale {j}")))?;
        let raw = modeler.forward(g, ctx, z)?;
        let grid = self.config.grids[j];
        let [_, _, gh, gw] = g.value(raw).dims4("model_scale")?;
        if gh != grid || gw != grid {
            return Err(AsrError::Config(format!(
                "scale {j} Modeler produced a {gh}x{gw} grid, expected {grid}x{grid}"
            )));
        }
        let v = g.sigmoid(raw);
        let gated = if gate == 1.0 { v } else { g.scale(v, T::lit(gate)) };
        g.channel_affine(gated, &RANGE_SCALE.map(T::lit), &RANGE_OFFSET.map(T::lit))
    }

    /// Encode, model every scale and render.
    pub fn forward(&self, g: &mut Graph<T>, ctx: &mut Ctx<'_, T>, image: Var, gates: &[f64]) -> Result<AsrOutput> {
        if gates.len() != self.modelers.len() {
            return Err(AsrError::dim("asr_forward", "gates", self.modelers.len(), gates.len()));
        }
        let (latents, background) = self.encode(g, ctx, image)?;
        let maps = latents
            .iter()
            .zip(gates)
            .enumerate()
            .map(|(j, (&z, &gate))| self.model_scale(g, ctx, z, j, gate))
            .collect::<Result<Vec<_>>>()?;
        let recon = render_scene(g, &self.config.render(), &self.config.scales(), &maps, background)?;
        Ok(AsrOutput {
            recon,
            maps,
            background,
            latents,
        })
    }

    /// Evaluation-mode reconstruction of `[N, 3, H, W]` images in chunks.
    pub fn infer(&self, images: &Tensor<T>, gates: &[f64], chunk: usize) -> Result<(Tensor<T>, Vec<StructuredLatent>)> {
        let [n, ..] = images.dims4("infer")?;
        let mut recons = Vec::with_capacity(n);
        let mut latents = Vec::with_capacity(n);
        for start in (0..n).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(n);
            let batch = Tensor::stack(&(start..end).map(|i| images.index_first(i)).collect::<Result<Vec<_>>>()?.iter().collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let mut ctx = Ctx::new(&mut g, &self.params, false);
            let x = g.constant(batch);
            let out = self.forward(&mut g, &mut ctx, x, gates)?;
            let maps: Vec<&Tensor<T>> = out.maps.iter().map(|&m| g.value(m)).collect();
            for i in 0..end - start {
                latents.push(StructuredLatent::from_maps(&maps, g.value(out.background), i)?);
                recons.push(g.value(out.recon).index_first(i)?);
            }
        }
        let refs: Vec<&Tensor<T>> = recons.iter().collect();
        Ok((Tensor::stack(&refs)?, latents))
    }
}
