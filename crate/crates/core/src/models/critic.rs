use crate::error::{Error, Result};
use crate::numerics::ops::add_channel_bias;
use crate::numerics::{Bound, ParameterSet, Real, Rng, Tensor, Var};

use super::conv_weight;

const MAX_CHANNELS: usize = 2048;

/// Patch critic without feature normalization, plus an AU regression head.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub num_aus: usize,
    pub base_channels: usize,
    /// Stride-2 downsampling layers (6 for the standard critic).
    pub downsample_layers: usize,
    pub leaky_slope: f64,
}

impl CriticConfig {
    pub fn new(image_size: usize, num_aus: usize) -> Self {
        CriticConfig {
            image_h: image_size,
            image_w: image_size,
            num_aus,
            base_channels: 64,
            downsample_layers: 6,
            leaky_slope: 0.01,
        }
    }

    pub fn with_width(mut self, base_channels: usize) -> Self {
        self.base_channels = base_channels;
        self
    }

    pub fn with_downsample_layers(mut self, n: usize) -> Self {
        self.downsample_layers = n;
        self
    }

    pub fn with_input(mut self, h: usize, w: usize) -> Self {
        self.image_h = h;
        self.image_w = w;
        self
    }

    pub fn factor(&self) -> usize {
        1 << self.downsample_layers
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.factor();
        if self.downsample_layers == 0 {
            return Err(Error::invalid("critic needs at least one downsampling layer"));
        }
        for (axis, v) in [("height", self.image_h), ("width", self.image_w)] {
            if v == 0 || v % f != 0 {
                let pad = (f - v % f) % f;
                return Err(Error::invalid(format!(
                    "critic input {axis} {v} is not divisible by {f}; pad by {pad} pixels"
                )));
            }
        }
        if self.num_aus == 0 || self.base_channels == 0 {
            return Err(Error::invalid("critic needs N >= 1 and positive width"));
        }
        Ok(())
    }

    /// Patch map extent `(H / 2^L, W / 2^L)`.
    pub fn patch_hw(&self) -> (usize, usize) {
        (self.image_h / self.factor(), self.image_w / self.factor())
    }

    fn channels(&self, layer: usize) -> usize {
        (self.base_channels << layer).min(MAX_CHANNELS)
    }
}

/// Patch scores `[B,1,h,w]` and AU estimates `[B,N]`.
#[derive(Clone, Copy, Debug)]
pub struct CriticOutput<'g, T: Real> {
    pub patches: Var<'g, T>,
    pub aus: Var<'g, T>,
}

#[derive(Clone, Debug)]
pub struct Critic {
    config: CriticConfig,
}

impl Critic {
    pub fn new(config: CriticConfig) -> Result<Self> {
        config.validate()?;
        Ok(Critic { config })
    }

    pub fn config(&self) -> &CriticConfig {
        &self.config
    }

    /// Parameter names and shapes, in creation order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut shapes = Vec::new();
        let mut cin = 3;
        for l in 0..self.config.downsample_layers {
            let cout = self.config.channels(l);
            shapes.push((format!("down{l}.w"), vec![cout, cin, 4, 4]));
            shapes.push((format!("down{l}.b"), vec![cout]));
            cin = cout;
        }
        let (ph, pw) = self.config.patch_hw();
        shapes.push(("head.patch.w".into(), vec![1, cin, 3, 3]));
        shapes.push(("head.aus.w".into(), vec![self.config.num_aus, cin, ph, pw]));
        shapes
    }

    pub fn init<T: Real>(&self, rng: &mut Rng) -> ParameterSet<T> {
        let mut p = ParameterSet::new();
        for (name, shape) in self.parameter_shapes() {
            let t = if name.ends_with(".b") {
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

    pub fn forward<'g, T: Real>(&self, p: &Bound<'g, T>, image: Var<'g, T>) -> Result<CriticOutput<'g, T>> {
        let s = image.shape();
        let cfg = &self.config;
        if s.len() != 4 || s[1] != 3 || s[2] != cfg.image_h || s[3] != cfg.image_w {
            if s.len() == 4 && (s[2] % cfg.factor() != 0 || s[3] % cfg.factor() != 0) {
                cfg.clone().with_input(s[2], s[3]).validate()?;
            }
            return Err(Error::shape(
                "critic_forward",
                &s,
                &[s.first().copied().unwrap_or(0), 3, cfg.image_h, cfg.image_w],
            ));
        }
        let mut h = image;
        for l in 0..cfg.downsample_layers {
            h = h.conv2d(p.get(&format!("down{l}.w"))?, 2, 1)?;
            h = add_channel_bias(h, p.get(&format!("down{l}.b"))?)?.leaky_relu(cfg.leaky_slope);
        }
        let patches = h.conv2d(p.get("head.patch.w")?, 1, 1)?;
        let aus = h.conv2d(p.get("head.aus.w")?, 1, 0)?.reshape(&[s[0], cfg.num_aus])?;
        Ok(CriticOutput { patches, aus })
    }
}
