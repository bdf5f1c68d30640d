use crate::error::{Error, Result};
use crate::numerics::ops::{instance_norm, tile_spatial};
use crate::numerics::{Bound, ParameterSet, Real, Rng, Tensor, Var};

use super::{conv_weight, IN_EPS};

/// Encoder / residual / decoder generator with parallel color and attention
/// heads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub num_aus: usize,
    pub base_channels: usize,
    pub residual_blocks: usize,
}

impl GeneratorConfig {
    pub const DOWNSAMPLE_STAGES: usize = 2;

    pub fn new(image_size: usize, num_aus: usize) -> Self {
        GeneratorConfig {
            image_size,
            num_aus,
            base_channels: 64,
            residual_blocks: 6,
        }
    }

    pub fn with_width(mut self, base_channels: usize) -> Self {
        self.base_channels = base_channels;
        self
    }

    pub fn with_residual_blocks(mut self, n: usize) -> Self {
        self.residual_blocks = n;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % 4 != 0 {
            return Err(Error::invalid(format!(
                "generator input size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if self.num_aus == 0 || self.base_channels == 0 {
            return Err(Error::invalid("generator needs N >= 1 and positive width"));
        }
        Ok(())
    }

    /// Channels entering the first convolution: RGB plus one map per AU.
    pub fn input_channels(&self) -> usize {
        self.num_aus + 3
    }
}

/// Attention `[B,1,H,W]` in `(0,1)` and color `[B,3,H,W]` in `(-1,1)`.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput<'g, T: Real> {
    pub attention: Var<'g, T>,
    pub color: Var<'g, T>,
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
}

impl Generator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Generator { config })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Parameter names and shapes, in creation order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.config.base_channels;
        let mut shapes = Vec::new();
        let mut conv_norm = |name: &str, w: Vec<usize>| {
            let out = w[0];
            shapes.push((format!("{name}.conv.w"), w));
            shapes.push((format!("{name}.norm.gamma"), vec![out]));
            shapes.push((format!("{name}.norm.beta"), vec![out]));
        };
        conv_norm("enc0", vec![c, self.config.input_channels(), 7, 7]);
        conv_norm("down1", vec![2 * c, c, 4, 4]);
        conv_norm("down2", vec![4 * c, 2 * c, 4, 4]);
        for i in 0..self.config.residual_blocks {
            conv_norm(&format!("res{i:02}.a"), vec![4 * c, 4 * c, 3, 3]);
            conv_norm(&format!("res{i:02}.b"), vec![4 * c, 4 * c, 3, 3]);
        }
        // Transposed convolution weights are [in, out, k, k].
        shapes.push(("up1.conv.w".into(), vec![4 * c, 2 * c, 4, 4]));
        shapes.push(("up1.norm.gamma".into(), vec![2 * c]));
        shapes.push(("up1.norm.beta".into(), vec![2 * c]));
        shapes.push(("up2.conv.w".into(), vec![2 * c, c, 4, 4]));
        shapes.push(("up2.norm.gamma".into(), vec![c]));
        shapes.push(("up2.norm.beta".into(), vec![c]));
        shapes.push(("head.color.w".into(), vec![3, c, 7, 7]));
        shapes.push(("head.attention.w".into(), vec![1, c, 7, 7]));
        shapes
    }

    /// Kernels ~ N(0, 0.02), norm scales 1, shifts 0.
    pub fn init<T: Real>(&self, rng: &mut Rng) -> ParameterSet<T> {
        let mut p = ParameterSet::new();
        for (name, shape) in self.parameter_shapes() {
            let t = if name.ends_with(".gamma") {
                Tensor::ones(&shape)
            } else if name.ends_with(".beta") {
                Tensor::zeros(&shape)
            } else {
                conv_weight(&shape, rng)
            };
            p.insert(name, t).expect("unique layer names");
        }
        p
    }

    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    fn conv_in_relu<'g, T: Real>(
        p: &Bound<'g, T>,
        name: &str,
        x: Var<'g, T>,
        stride: usize,
        pad: usize,
        relu: bool,
    ) -> Result<Var<'g, T>> {
        let y = x.conv2d(p.get(&format!("{name}.conv.w"))?, stride, pad)?;
        let y = instance_norm(
            y,
            p.get(&format!("{name}.norm.gamma"))?,
            p.get(&format!("{name}.norm.beta"))?,
            IN_EPS,
        )?;
        Ok(if relu { y.relu() } else { y })
    }

    fn up<'g, T: Real>(p: &Bound<'g, T>, name: &str, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        let y = x.conv_transpose2d(p.get(&format!("{name}.conv.w"))?, 2, 1, (2 * s[2], 2 * s[3]))?;
        let y = instance_norm(
            y,
            p.get(&format!("{name}.norm.gamma"))?,
            p.get(&format!("{name}.norm.beta"))?,
            IN_EPS,
        )?;
        Ok(y.relu())
    }

    /// `image` is `[B,3,H,W]`, `target` is `[B,N]` (the expression to render).
    pub fn forward<'g, T: Real>(
        &self,
        p: &Bound<'g, T>,
        image: Var<'g, T>,
        target: Var<'g, T>,
    ) -> Result<GeneratorOutput<'g, T>> {
        let is = image.shape();
        let ts = target.shape();
        let size = self.config.image_size;
        if is.len() != 4 || is[1] != 3 || is[2] != size || is[3] != size {
            return Err(Error::shape("generator_forward", &is, &[is.first().copied().unwrap_or(0), 3, size, size]));
        }
        if ts.len() != 2 || ts[0] != is[0] || ts[1] != self.config.num_aus {
            return Err(Error::shape("generator_forward", &ts, &[is[0], self.config.num_aus]));
        }
        let cond = tile_spatial(target, size, size)?;
        let x = image.graph().concat(&[image, cond], 1)?;
        let mut h = Self::conv_in_relu(p, "enc0", x, 1, 3, true)?;
        h = Self::conv_in_relu(p, "down1", h, 2, 1, true)?;
        h = Self::conv_in_relu(p, "down2", h, 2, 1, true)?;
        for i in 0..self.config.residual_blocks {
            let r = Self::conv_in_relu(p, &format!("res{i:02}.a"), h, 1, 1, true)?;
            let r = Self::conv_in_relu(p, &format!("res{i:02}.b"), r, 1, 1, false)?;
            h = h.add(r)?;
        }
        h = Self::up(p, "up1", h)?;
        h = Self::up(p, "up2", h)?;
        let color = h.conv2d(p.get("head.color.w")?, 1, 3)?.tanh();
        let attention = h.conv2d(p.get("head.attention.w")?, 1, 3)?.sigmoid();
        Ok(GeneratorOutput { attention, color })
    }
}

/// `(1 - A) * C + A * I`, with `A` broadcast over the color channels.
pub fn compose<'g, T: Real>(image: Var<'g, T>, out: &GeneratorOutput<'g, T>) -> Result<Var<'g, T>> {
    let is = image.shape();
    let a = out.attention.shape();
    let c = out.color.shape();
    if c != is || a.len() != 4 || a[1] != 1 || a[0] != is[0] || a[2..] != is[2..] {
        return Err(Error::shape("compose", &is, &a));
    }
    let a3 = out.attention.expand(&is)?;
    let keep = a3.mul(image)?;
    let regen = a3.neg().add_scalar(1.0).mul(out.color)?;
    regen.add(keep)
}
