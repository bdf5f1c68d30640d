//! Generator and critic networks.

pub mod critic;
pub mod generator;

pub use critic::{Critic, CriticConfig, CriticOutput};
pub use generator::{compose, Generator, GeneratorConfig, GeneratorOutput};

use crate::aucode::AuVector;
use crate::error::{Error, Result};
use crate::facedata::ImageTensor;
use crate::numerics::{Graph, ParameterSet, Real, Rng, Tensor};

pub(crate) const IN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

pub(crate) fn conv_weight<T: Real>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    Tensor::normal(shape, 0.0, INIT_STD, rng)
}

/// Attention and color masks of one generator pass, as images.
#[derive(Clone, Debug, PartialEq)]
pub struct Masks {
    /// `H x W`, row-major, in `[0, 1]`.
    pub attention: Vec<f32>,
    pub color: ImageTensor,
}

impl Masks {
    /// Attention as gray (0 black, 1 white).
    pub fn attention_image(&self) -> Result<ImageTensor> {
        ImageTensor::from_gray_unit(self.color.height(), self.color.width(), &self.attention)
    }
}

/// Critic evaluation of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct CriticScores {
    /// `[h, w]` patch scores.
    pub patches: Tensor<f32>,
    pub aus: Vec<f64>,
}

/// Generator and critic together with their parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    pub generator: Generator,
    pub critic: Critic,
    pub gen_params: ParameterSet<T>,
    pub critic_params: ParameterSet<T>,
}

fn au_tensor<T: Real>(aus: &[&AuVector], n: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(aus.len() * n);
    for a in aus {
        if a.len() != n {
            return Err(Error::AuLength {
                expected: n,
                got: a.len(),
            });
        }
        data.extend(a.values().iter().map(|&v| T::from_f64_lossy(v)));
    }
    Tensor::new(&[aus.len(), n], data)
}

/// `[B, N]` tensor of AU vectors.
pub fn au_batch<T: Real>(aus: &[&AuVector], n: usize) -> Result<Tensor<T>> {
    au_tensor(aus, n)
}

impl<T: Real> Model<T> {
    pub fn init(gen_cfg: GeneratorConfig, critic_cfg: CriticConfig, rng: &mut Rng) -> Result<Self> {
        if gen_cfg.num_aus != critic_cfg.num_aus {
            return Err(Error::invalid("generator and critic disagree on N"));
        }
        let generator = Generator::new(gen_cfg)?;
        let critic = Critic::new(critic_cfg)?;
        let gen_params = generator.init(rng);
        let critic_params = critic.init(rng);
        Ok(Model {
            generator,
            critic,
            gen_params,
            critic_params,
        })
    }

    pub fn num_aus(&self) -> usize {
        self.generator.config().num_aus
    }

    pub fn image_size(&self) -> usize {
        self.generator.config().image_size
    }

    pub fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let s = self.image_size();
        if image.height() != s || image.width() != s {
            return Err(Error::shape(
                "generator_forward",
                &[image.height(), image.width()],
                &[s, s],
            ));
        }
        Ok(())
    }

    /// Attention and color masks for rendering `image` at `target`.
    pub fn generator_forward(&self, image: &ImageTensor, target: &AuVector) -> Result<Masks> {
        Ok(self.apply_expression(image, target)?.1)
    }

    /// Edited image plus the masks that produced it.
    pub fn apply_expression(&self, image: &ImageTensor, target: &AuVector) -> Result<(ImageTensor, Masks)> {
        self.check_image(image)?;
        let g = Graph::new();
        let p = self.gen_params.bind(&g, false);
        let x = g.constant(image.to_tensor());
        let y = g.constant(au_tensor(&[target], self.num_aus())?);
        let out = self.generator.forward(&p, x, y)?;
        let composed = compose(x, &out)?;
        let edited = ImageTensor::from_tensor(&composed.value(), 0)?;
        let masks = Masks {
            attention: out
                .attention
                .value()
                .data()
                .iter()
                .map(|v| v.to_f32().unwrap_or(0.0))
                .collect(),
            color: ImageTensor::from_tensor(&out.color.value(), 0)?,
        };
        Ok((edited, masks))
    }

    pub fn critic_forward(&self, image: &ImageTensor) -> Result<CriticScores> {
        let g = Graph::new();
        let p = self.critic_params.bind(&g, false);
        let out = self.critic.forward(&p, g.constant(image.to_tensor()))?;
        let patches = out.patches.value();
        let s = patches.shape();
        Ok(CriticScores {
            patches: Tensor::new(
                &[s[2], s[3]],
                patches.data().iter().map(|v| v.to_f32().unwrap_or(f32::NAN)).collect(),
            )?,
            aus: out.aus.value().data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect(),
        })
    }
}
