//! Training objectives: critic loss with gradient penalty, attention
//! regularizer, AU regression, cycle identity, and their weighted sums.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::models::{compose, Critic, CriticConfig, CriticOutput, Generator, GeneratorConfig, GeneratorOutput};
use crate::numerics::ops::{l1_mean, per_sample_sum, spatial_mean};
use crate::numerics::gradcheck::{scalar_fn, Case};
use crate::numerics::{seeded, Bound, Graph, Real, Rng, Tensor, Var};

/// Coefficients of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub gp: f64,
    pub attention: f64,
    pub tv: f64,
    pub expression: f64,
    pub identity: f64,
    /// Scale on the adversarial terms; 1 in normal training, 0 for
    /// reconstruction-only runs.
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gp: 10.0,
            attention: 0.1,
            tv: 1e-4,
            expression: 4000.0,
            identity: 10.0,
            adversarial: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.gp, self.attention, self.tv, self.expression, self.identity, self.adversarial];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid(format!("loss weights must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// How the attention magnitude term is measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionNorm {
    /// Mean of squared entries.
    #[default]
    MeanSquare,
    /// Per-image Euclidean norm, averaged over the batch.
    L2,
}

impl FromStr for AttentionNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean-square" => Ok(AttentionNorm::MeanSquare),
            "l2" => Ok(AttentionNorm::L2),
            _ => Err(Error::invalid(format!("unknown attention norm `{s}` (mean-square, l2)"))),
        }
    }
}

impl fmt::Display for AttentionNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionNorm::MeanSquare => "mean-square",
            AttentionNorm::L2 => "l2",
        })
    }
}

/// How the gradient penalty obtains the input-gradient norm.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum PenaltyMode {
    /// Differentiates through the gradient (grad of grad).
    #[default]
    SecondOrder,
    /// Central difference of the critic along the normalized input gradient
    /// with the given step. First-order only.
    FiniteDifference(f64),
}

pub const FD_PENALTY_STEP: f64 = 1e-3;

impl FromStr for PenaltyMode {
    type Err = Error;
    /// `second-order`, `finite-difference` or `finite-difference:<step>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::invalid(format!("unknown penalty mode `{s}` (second-order, finite-difference[:step])"));
        match s.split_once(':') {
            None if s == "second-order" => Ok(PenaltyMode::SecondOrder),
            None if s == "finite-difference" => Ok(PenaltyMode::FiniteDifference(FD_PENALTY_STEP)),
            Some(("finite-difference", h)) => {
                let h: f64 = h.parse().map_err(|_| bad())?;
                if !(h > 0.0) {
                    return Err(bad());
                }
                Ok(PenaltyMode::FiniteDifference(h))
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for PenaltyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PenaltyMode::SecondOrder => f.write_str("second-order"),
            PenaltyMode::FiniteDifference(h) if *h == FD_PENALTY_STEP => f.write_str("finite-difference"),
            PenaltyMode::FiniteDifference(h) => write!(f, "finite-difference:{h}"),
        }
    }
}

/// Named scalar values of one evaluation, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    entries: Vec<(&'static str, f64)>,
}

impl LossReport {
    pub fn push(&mut self, name: &'static str, value: f64) {
        self.entries.push((name, value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }

    pub fn entries(&self) -> &[(&'static str, f64)] {
        &self.entries
    }

    pub fn extend(&mut self, other: &LossReport) {
        self.entries.extend_from_slice(&other.entries);
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<&'static str> {
        self.entries.iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| *n)
    }

    /// `step=<k> name=value ...`
    pub fn record(&self, step: u64) -> String {
        let mut s = format!("step={step}");
        for (n, v) in &self.entries {
            s.push_str(&format!(" {n}={v}"));
        }
        s
    }
}

fn scalar_of<T: Real>(v: Var<'_, T>) -> f64 {
    v.value().item().to_f64().unwrap_or(f64::NAN)
}

/// Evaluates the critic on a batch.
pub type CriticFn<'a, 'g, T> = dyn Fn(Var<'g, T>) -> Result<CriticOutput<'g, T>> + 'a;

/// Per-image realism `[B]`: the mean of the patch map.
pub fn realism<'g, T: Real>(out: &CriticOutput<'g, T>) -> Result<Var<'g, T>> {
    let s = out.patches.shape();
    spatial_mean(out.patches)?.reshape(&[s[0]])
}

/// Gradient penalty value plus the per-sample gradient norms it saw.
pub struct Penalty<'g, T: Real> {
    pub value: Var<'g, T>,
    pub norms: Vec<f64>,
}

fn per_sample_norm<'g, T: Real>(g: Var<'g, T>) -> Result<Var<'g, T>> {
    Ok(per_sample_sum(g.square())?.add_scalar(1e-12).sqrt())
}

/// `mean_b (||grad_x D_I(x_b)|| - 1)^2` at `x = e*real + (1-e)*fake`, with
/// one `e ~ U[0,1]` per sample drawn from `rng`.
pub fn gradient_penalty<'g, T: Real>(
    critic: &CriticFn<'_, 'g, T>,
    real: Var<'g, T>,
    fake: Var<'g, T>,
    mode: PenaltyMode,
    rng: &mut Rng,
) -> Result<Penalty<'g, T>> {
    let s = real.shape();
    if fake.shape() != s || s.is_empty() {
        return Err(Error::shape("gradient_penalty", &s, &fake.shape()));
    }
    let b = s[0];
    let mut eshape = vec![1; s.len()];
    eshape[0] = b;
    let eps: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
    let g = real.graph();
    let e = g.constant(Tensor::from_f64(&eshape, &eps)?);
    let mixed = e.mul(real.detach())?.add(e.neg().add_scalar(1.0).mul(fake.detach())?)?;
    let x = g.leaf_arc(mixed.value(), true);
    let norm = match mode {
        PenaltyMode::SecondOrder => {
            let d = realism(&critic(x)?)?.sum();
            let gx = g.grad(d, &[x], true)?[0];
            per_sample_norm(gx)?
        }
        PenaltyMode::FiniteDifference(h) => {
            if !(h > 0.0) {
                return Err(Error::invalid("finite-difference penalty step must be positive"));
            }
            // Directional derivative along the unit input gradient equals the
            // gradient norm, and needs only first-order differentiation.
            let d = realism(&critic(x)?)?.sum();
            let gx = g.grad(d, &[x], false)?[0];
            let n = per_sample_norm(gx)?.reshape(&eshape)?;
            let u = g.constant(gx.mul(n.powf(-1.0))?.value().as_ref().clone());
            let up = realism(&critic(g.constant(x.value().as_ref().clone()).add(u.scale(h))?)?)?;
            let down = realism(&critic(g.constant(x.value().as_ref().clone()).sub(u.scale(h))?)?)?;
            up.sub(down)?.scale(0.5 / h)
        }
    };
    let norms = norm.value().data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
    let value = norm.add_scalar(-1.0).square().mean();
    Ok(Penalty { value, norms })
}

/// `mean_b ||pred_b - target_b||^2`.
pub fn au_regression<'g, T: Real>(pred: Var<'g, T>, target: Var<'g, T>) -> Result<Var<'g, T>> {
    if pred.shape() != target.shape() || pred.shape().len() != 2 {
        return Err(Error::shape("au_regression", &pred.shape(), &target.shape()));
    }
    Ok(per_sample_sum(pred.sub(target)?.square())?.mean())
}

/// Expression loss on generated images: AU regression of the critic's
/// estimate on `fake` against the requested `y_f`.
pub fn expression_loss_fake<'g, T: Real>(
    critic: &CriticFn<'_, 'g, T>,
    fake: Var<'g, T>,
    y_f: Var<'g, T>,
) -> Result<Var<'g, T>> {
    au_regression(critic(fake)?.aus, y_f)
}

/// Mean absolute difference between `image` and its cycle reconstruction.
pub fn identity_loss<'g, T: Real>(image: Var<'g, T>, reconstruction: Var<'g, T>) -> Result<Var<'g, T>> {
    if image.shape() != reconstruction.shape() {
        return Err(Error::shape("identity_loss", &image.shape(), &reconstruction.shape()));
    }
    Ok(l1_mean(image.sub(reconstruction)?))
}

/// Attention regularizer parts for `A` shaped `[B,1,H,W]`.
pub struct AttentionTerms<'g, T: Real> {
    /// Squared neighbor differences summed per image, averaged over the batch.
    pub tv: Var<'g, T>,
    /// Magnitude term per [`AttentionNorm`].
    pub magnitude: Var<'g, T>,
    /// `tv_weight * tv + magnitude`.
    pub total: Var<'g, T>,
}

pub fn attention_loss<'g, T: Real>(
    a: Var<'g, T>,
    tv_weight: f64,
    norm: AttentionNorm,
) -> Result<AttentionTerms<'g, T>> {
    let s = a.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("attention_loss", &s, &[s.first().copied().unwrap_or(0), 1, 0, 0]));
    }
    let (b, h, w) = (s[0], s[2], s[3]);
    let g = a.graph();
    let mut tv = g.constant(Tensor::zeros(&[b]));
    if w > 1 {
        let dx = a.narrow(3, 1, w - 1)?.sub(a.narrow(3, 0, w - 1)?)?;
        tv = tv.add(per_sample_sum(dx.square())?)?;
    }
    if h > 1 {
        let dy = a.narrow(2, 1, h - 1)?.sub(a.narrow(2, 0, h - 1)?)?;
        tv = tv.add(per_sample_sum(dy.square())?)?;
    }
    let tv = tv.mean();
    let magnitude = match norm {
        AttentionNorm::MeanSquare => a.square().mean(),
        AttentionNorm::L2 => per_sample_norm(a)?.mean(),
    };
    let total = tv.scale(tv_weight).add(magnitude)?;
    Ok(AttentionTerms { tv, magnitude, total })
}

/// Critic objective, its report, and the penalty's gradient norms.
pub struct CriticLoss<'g, T: Real> {
    pub total: Var<'g, T>,
    pub report: LossReport,
    pub grad_norms: Vec<f64>,
}

/// `w_adv * (mean D_I(fake) - mean D_I(real)) + gp * GP + expr * AU(real)`.
/// `fake` must be detached from the generator.
pub fn critic_objective<'g, T: Real>(
    critic: &CriticFn<'_, 'g, T>,
    real: Var<'g, T>,
    y_o: Var<'g, T>,
    fake: Var<'g, T>,
    weights: &LossWeights,
    mode: PenaltyMode,
    rng: &mut Rng,
) -> Result<CriticLoss<'g, T>> {
    if fake.requires_grad() {
        return Err(Error::invalid(
            "critic loss received fakes still attached to the generator; detach them first",
        ));
    }
    let real_out = critic(real)?;
    let fake_out = critic(fake)?;
    let adv = realism(&fake_out)?.mean().sub(realism(&real_out)?.mean())?;
    let penalty = gradient_penalty(critic, real, fake, mode, rng)?;
    let expr_real = au_regression(real_out.aus, y_o)?;
    let total = adv
        .scale(weights.adversarial)
        .add(penalty.value.scale(weights.gp))?
        .add(expr_real.scale(weights.expression))?;
    let mut report = LossReport::default();
    report.push("critic_adv", scalar_of(adv));
    report.push("gp", scalar_of(penalty.value));
    report.push("gp_norm", penalty.norms.iter().sum::<f64>() / penalty.norms.len() as f64);
    report.push("expr_real", scalar_of(expr_real));
    report.push("critic_total", scalar_of(total));
    Ok(CriticLoss {
        total,
        report,
        grad_norms: penalty.norms,
    })
}

/// [`critic_objective`] for a [`Critic`] with parameters `params`.
#[allow(clippy::too_many_arguments)]
pub fn critic_loss<'g, T: Real>(
    critic: &Critic,
    params: &Bound<'g, T>,
    real: Var<'g, T>,
    y_o: Var<'g, T>,
    fake: Var<'g, T>,
    weights: &LossWeights,
    mode: PenaltyMode,
    rng: &mut Rng,
) -> Result<CriticLoss<'g, T>> {
    let f = |x: Var<'g, T>| critic.forward(params, x);
    critic_objective(&f, real, y_o, fake, weights, mode, rng)
}

/// Generator objective with the intermediate tensors of both passes.
pub struct GeneratorLoss<'g, T: Real> {
    pub total: Var<'g, T>,
    pub report: LossReport,
    pub fake: Var<'g, T>,
    pub first: GeneratorOutput<'g, T>,
    pub reconstruction: Var<'g, T>,
    pub cycle: GeneratorOutput<'g, T>,
}

/// Runs `image -> y_g -> y_r` and combines
/// `-w_adv * mean D_I(fake) + expr * AU(fake) + att * (L_A(first) + L_A(cycle)) + idt * L1`.
/// The critic parameters must be frozen.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss<'g, T: Real>(
    generator: &Generator,
    gen_params: &Bound<'g, T>,
    critic: &Critic,
    critic_params: &Bound<'g, T>,
    image: Var<'g, T>,
    y_r: Var<'g, T>,
    y_g: Var<'g, T>,
    weights: &LossWeights,
    norm: AttentionNorm,
) -> Result<GeneratorLoss<'g, T>> {
    if critic_params.is_trainable() {
        return Err(Error::invalid("generator loss requires frozen critic parameters"));
    }
    let first = generator.forward(gen_params, image, y_g)?;
    let fake = compose(image, &first)?;
    let cycle = generator.forward(gen_params, fake, y_r)?;
    let reconstruction = compose(fake, &cycle)?;

    let fake_out = critic.forward(critic_params, fake)?;
    let adv = realism(&fake_out)?.mean().neg();
    let expr = au_regression(fake_out.aus, y_g)?;
    let att_first = attention_loss(first.attention, weights.tv, norm)?;
    let att_cycle = attention_loss(cycle.attention, weights.tv, norm)?;
    let idt = identity_loss(image, reconstruction)?;
    let total = adv
        .scale(weights.adversarial)
        .add(expr.scale(weights.expression))?
        .add(att_first.total.add(att_cycle.total)?.scale(weights.attention))?
        .add(idt.scale(weights.identity))?;

    let mut report = LossReport::default();
    report.push("gen_adv", scalar_of(adv));
    report.push("expr_fake", scalar_of(expr));
    report.push("attn_tv_first", scalar_of(att_first.tv));
    report.push("attn_mag_first", scalar_of(att_first.magnitude));
    report.push("attn_tv_cycle", scalar_of(att_cycle.tv));
    report.push("attn_mag_cycle", scalar_of(att_cycle.magnitude));
    report.push("identity", scalar_of(idt));
    report.push("gen_total", scalar_of(total));
    Ok(GeneratorLoss {
        total,
        report,
        fake,
        first,
        reconstruction,
        cycle,
    })
}

/// Recomputes the generator total from its report.
pub fn generator_total_from(report: &LossReport, w: &LossWeights) -> Option<f64> {
    let g = |n| report.get(n);
    Some(
        w.adversarial * g("gen_adv")?
            + w.expression * g("expr_fake")?
            + w.attention
                * (w.tv * g("attn_tv_first")? + g("attn_mag_first")? + w.tv * g("attn_tv_cycle")? + g("attn_mag_cycle")?)
            + w.identity * g("identity")?,
    )
}

/// Recomputes the critic total from its report.
pub fn critic_total_from(report: &LossReport, w: &LossWeights) -> Option<f64> {
    let g = |n| report.get(n);
    Some(w.adversarial * g("critic_adv")? + w.gp * g("gp")? + w.expression * g("expr_real")?)
}

fn linear_critic<'g>(w: Var<'g, f64>, n: usize) -> impl Fn(Var<'g, f64>) -> Result<CriticOutput<'g, f64>> {
    move |x: Var<'g, f64>| {
        let b = x.shape()[0];
        let scores = per_sample_sum(x.mul(w)?)?;
        Ok(CriticOutput {
            patches: scores.reshape(&[b, 1, 1, 1])?,
            aus: x.graph().constant(Tensor::zeros(&[b, n])),
        })
    }
}

/// Relative error between the tape gradient of the penalty with respect to
/// the weights of a linear critic `D(x) = <w, x>` with `|w| = 3` and the
/// closed form `2 (|w| - 1) w / |w|`.
pub fn penalty_oracle_error(mode: PenaltyMode) -> Result<f64> {
    let norm = 3.0;
    let raw = Tensor::<f64>::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut seeded(4));
    let n0 = raw.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let wt = raw.map(|v| v * norm / n0);
    let g = Graph::new();
    let w = g.leaf(wt.clone(), true);
    let real = g.constant(Tensor::uniform(&[3, 3, 4, 4], -1.0, 1.0, &mut seeded(5)));
    let fake = g.constant(Tensor::uniform(&[3, 3, 4, 4], -1.0, 1.0, &mut seeded(6)));
    let p = gradient_penalty(&linear_critic(w, 2), real, fake, mode, &mut seeded(1))?;
    let gw = g.grad(p.value, &[w], false)?[0].value();
    let expected = wt.map(|v| 2.0 * (norm - 1.0) * v / norm);
    let num: f64 = gw.data().iter().zip(expected.data()).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = expected.data().iter().map(|b| b * b).sum();
    Ok((num / den).sqrt())
}

fn attention_case<'g>(_: &'g Graph<f64>, v: &[Var<'g, f64>]) -> Result<Var<'g, f64>> {
    Ok(attention_loss(v[0].sigmoid(), 0.5, AttentionNorm::MeanSquare)?.total)
}

fn attention_l2_case<'g>(_: &'g Graph<f64>, v: &[Var<'g, f64>]) -> Result<Var<'g, f64>> {
    Ok(attention_loss(v[0].sigmoid(), 0.5, AttentionNorm::L2)?.total)
}

fn expression_case<'g>(_: &'g Graph<f64>, v: &[Var<'g, f64>]) -> Result<Var<'g, f64>> {
    let w = v[1];
    let head = move |x: Var<'g, f64>| -> Result<CriticOutput<'g, f64>> {
        let b = x.shape()[0];
        Ok(CriticOutput {
            patches: x.graph().constant(Tensor::zeros(&[b, 1, 1, 1])),
            aus: x.conv2d(w, 1, 0)?.tanh().reshape(&[b, 2])?,
        })
    };
    expression_loss_fake(&head, v[0], v[2])
}

fn real_expression_case<'g>(_: &'g Graph<f64>, v: &[Var<'g, f64>]) -> Result<Var<'g, f64>> {
    let b = v[0].shape()[0];
    au_regression(v[0].conv2d(v[1], 1, 0)?.sigmoid().reshape(&[b, 2])?, v[2])
}

fn identity_case<'g>(_: &'g Graph<f64>, v: &[Var<'g, f64>]) -> Result<Var<'g, f64>> {
    identity_loss(v[0], v[1])
}

fn adversarial_case<'g>(_: &'g Graph<f64>, v: &[Var<'g, f64>]) -> Result<Var<'g, f64>> {
    let w = v[2];
    let c = move |x: Var<'g, f64>| -> Result<CriticOutput<'g, f64>> {
        let b = x.shape()[0];
        Ok(CriticOutput {
            patches: x.conv2d(w, 2, 1)?.leaky_relu(0.01),
            aus: x.graph().constant(Tensor::zeros(&[b, 2])),
        })
    };
    realism(&c(v[1])?)?.mean().sub(realism(&c(v[0])?)?.mean())
}

fn penalty_case<'g>(g: &'g Graph<f64>, v: &[Var<'g, f64>]) -> Result<Var<'g, f64>> {
    // Interpolates are detached by design, so only critic weights vary.
    let real = g.constant(Tensor::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut seeded(21)));
    let fake = g.constant(Tensor::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut seeded(22)));
    let (w1, w2) = (v[0], v[1]);
    let c = move |x: Var<'g, f64>| -> Result<CriticOutput<'g, f64>> {
        let b = x.shape()[0];
        Ok(CriticOutput {
            patches: x.conv2d(w1, 2, 1)?.tanh().conv2d(w2, 1, 1)?,
            aus: x.graph().constant(Tensor::zeros(&[b, 2])),
        })
    };
    Ok(gradient_penalty(&c, real, fake, PenaltyMode::SecondOrder, &mut seeded(3))?.value)
}

/// Finite-difference cases for every loss term plus the full generator
/// objective (through two generator parameters of a tiny model).
pub fn gradient_cases(seed: u64) -> Vec<Case> {
    let mut rng = seeded(seed);
    let mut u = |s: &[usize]| Tensor::<f64>::uniform(s, -1.0, 1.0, &mut rng);
    let img = [1, 3, 4, 4];
    let mut cases = vec![
        Case { name: "attention", inputs: vec![u(&[2, 1, 4, 4])], f: Box::new(attention_case) },
        Case { name: "attention_l2", inputs: vec![u(&[2, 1, 4, 4])], f: Box::new(attention_l2_case) },
        Case {
            name: "expression_fake",
            inputs: vec![u(&img), u(&[2, 3, 4, 4]), u(&[1, 2])],
            f: Box::new(expression_case),
        },
        Case {
            name: "expression_real",
            inputs: vec![u(&[2, 3, 4, 4]), u(&[2, 3, 4, 4]), u(&[2, 2])],
            f: Box::new(real_expression_case),
        },
        Case { name: "identity", inputs: vec![u(&img), u(&img)], f: Box::new(identity_case) },
        Case {
            name: "adversarial",
            inputs: vec![u(&img), u(&img), u(&[1, 3, 2, 2])],
            f: Box::new(adversarial_case),
        },
        Case { name: "gradient_penalty", inputs: vec![u(&[2, 3, 2, 2]), u(&[1, 2, 3, 3])], f: Box::new(penalty_case) },
    ];
    let gen = Generator::new(GeneratorConfig::new(8, 2).with_width(2).with_residual_blocks(1))
        .expect("valid tiny generator");
    let critic = Critic::new(CriticConfig::new(8, 2).with_width(2).with_downsample_layers(2)).expect("valid tiny critic");
    let gp = gen.init::<f64>(&mut seeded(1));
    let cp = critic.init::<f64>(&mut seeded(2));
    let inputs = vec![
        gp.get("head.attention.w").expect("parameter").clone(),
        gp.get("up2.norm.gamma").expect("parameter").clone(),
    ];
    let f = scalar_fn(move |g, v| {
        let mut p = gp.bind(g, true);
        p.replace("head.attention.w", v[0])?;
        p.replace("up2.norm.gamma", v[1])?;
        let img = g.constant(Tensor::uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut seeded(3)));
        let yr = g.constant(Tensor::from_f64(&[1, 2], &[0.2, 0.7])?);
        let yg = g.constant(Tensor::from_f64(&[1, 2], &[0.9, 0.1])?);
        let w = LossWeights {
            expression: 1.0,
            ..LossWeights::default()
        };
        Ok(generator_loss(&gen, &p, &critic, &cp.bind(g, false), img, yr, yg, &w, AttentionNorm::MeanSquare)?.total)
    });
    cases.push(Case {
        name: "generator_objective",
        inputs,
        f: Box::new(f),
    });
    cases
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{CriticConfig, GeneratorConfig};
    use crate::numerics::gradcheck::{check, DEFAULT_STEP};
    use crate::numerics::{seeded, Graph};

    fn linear_critic<'g>(w: Var<'g, f64>) -> impl Fn(Var<'g, f64>) -> Result<CriticOutput<'g, f64>> {
        move |x: Var<'g, f64>| {
            let b = x.shape()[0];
            let scores = per_sample_sum(x.mul(w)?)?;
            let g = x.graph();
            Ok(CriticOutput {
                patches: scores.reshape(&[b, 1, 1, 1])?,
                aus: g.constant(Tensor::zeros(&[b, 2])),
            })
        }
    }

    fn constant_critic<'g>(_: &'g Graph<f64>) -> impl Fn(Var<'g, f64>) -> Result<CriticOutput<'g, f64>> {
        |x: Var<'g, f64>| {
            let b = x.shape()[0];
            Ok(CriticOutput {
                patches: per_sample_sum(x.scale(0.0))?.add_scalar(0.7).reshape(&[b, 1, 1, 1])?,
                aus: x.graph().constant(Tensor::zeros(&[b, 2])),
            })
        }
    }

    fn w_with_norm(norm: f64) -> Tensor<f64> {
        let raw = Tensor::<f64>::uniform(&[1, 3, 4, 4], -1.0, 1.0, &mut seeded(4));
        let n = raw.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.map(|v| v * norm / n)
    }

    fn pair(g: &Graph<f64>) -> (Var<'_, f64>, Var<'_, f64>) {
        let r = Tensor::uniform(&[3, 3, 4, 4], -1.0, 1.0, &mut seeded(5));
        let f = Tensor::uniform(&[3, 3, 4, 4], -1.0, 1.0, &mut seeded(6));
        (g.constant(r), g.constant(f))
    }

    #[test]
    fn linear_critic_penalty_oracles() {
        for (norm, expected) in [(3.0, 4.0), (1.0, 0.0)] {
            let g = Graph::new();
            let w = g.leaf(w_with_norm(norm), true);
            let (r, f) = pair(&g);
            let critic = linear_critic(w);
            let p = gradient_penalty(&critic, r, f, PenaltyMode::SecondOrder, &mut seeded(1)).unwrap();
            assert!((scalar_of(p.value) - expected).abs() < 1e-9);
            assert!(p.norms.iter().all(|n| (n - norm).abs() < 1e-9));
        }
    }

    #[test]
    fn finite_difference_penalty_agrees_with_exact() {
        let g = Graph::new();
        let w = g.leaf(w_with_norm(2.5), true);
        let (r, f) = pair(&g);
        let critic = linear_critic(w);
        let exact = gradient_penalty(&critic, r, f, PenaltyMode::SecondOrder, &mut seeded(2)).unwrap();
        let approx =
            gradient_penalty(&critic, r, f, PenaltyMode::FiniteDifference(FD_PENALTY_STEP), &mut seeded(2)).unwrap();
        let (e, a) = (scalar_of(exact.value), scalar_of(approx.value));
        assert!(((a - e) / e).abs() < 0.01, "{a} vs {e}");
    }

    #[test]
    fn constant_critic_has_unit_penalty_and_zero_adversarial_part() {
        let g = Graph::new();
        let (r, f) = pair(&g);
        let c = constant_critic(&g);
        let y = g.constant(Tensor::zeros(&[3, 2]));
        let loss = critic_objective(&c, r, y, f, &LossWeights::default(), PenaltyMode::SecondOrder, &mut seeded(0))
            .unwrap();
        assert_eq!(loss.report.get("critic_adv"), Some(0.0));
        assert!((loss.report.get("gp").unwrap() - 1.0).abs() < 1e-5);
        assert_eq!(loss.report.get("expr_real"), Some(0.0));
    }

    #[test]
    fn critic_loss_rejects_attached_fakes() {
        let g = Graph::new();
        let (r, _) = pair(&g);
        let f = g.leaf(Tensor::zeros(&[3, 3, 4, 4]), true);
        let w = g.leaf(w_with_norm(1.0), true);
        let c = linear_critic(w);
        let y = g.constant(Tensor::zeros(&[3, 2]));
        let err = critic_objective(&c, r, y, f, &LossWeights::default(), PenaltyMode::SecondOrder, &mut seeded(0));
        assert!(err.is_err());
    }

    #[test]
    fn au_regression_arithmetic() {
        let g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[1, 2], &[0.5, 0.0]).unwrap());
        let t = g.constant(Tensor::from_f64(&[1, 2], &[0.0, 0.5]).unwrap());
        assert!((scalar_of(au_regression(p, t).unwrap()) - 0.5).abs() < 1e-12);
        assert_eq!(scalar_of(au_regression(p, p).unwrap()), 0.0);
        let y = Tensor::<f64>::uniform(&[2, 14], 0.0, 1.0, &mut seeded(3));
        let off = g.constant(y.map(|v| v + 0.1));
        let v = scalar_of(au_regression(off, g.constant(y)).unwrap());
        assert!((v - 0.14).abs() < 1e-12, "{v}");
    }

    #[test]
    fn identity_loss_arithmetic() {
        let g = Graph::<f64>::new();
        let x = Tensor::<f64>::uniform(&[2, 3, 4, 4], -0.5, 0.5, &mut seeded(3));
        let a = g.constant(x.clone());
        assert_eq!(scalar_of(identity_loss(a, a).unwrap()), 0.0);
        let b = g.constant(x.map(|v| v + 0.1));
        assert!((scalar_of(identity_loss(a, b).unwrap()) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn attention_loss_oracles() {
        let g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]).unwrap());
        let t = attention_loss(a, 1e-4, AttentionNorm::MeanSquare).unwrap();
        assert_eq!(scalar_of(t.tv), 2.0);
        assert_eq!(scalar_of(t.magnitude), 0.5);
        let c = g.constant(Tensor::full(&[2, 1, 3, 5], 0.3));
        assert_eq!(scalar_of(attention_loss(c, 1.0, AttentionNorm::MeanSquare).unwrap().tv), 0.0);
        let l2 = attention_loss(a, 0.0, AttentionNorm::L2).unwrap();
        assert!((scalar_of(l2.magnitude) - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn loss_terms_match_finite_differences() {
        for c in gradient_cases(11) {
            let r = check(&*c.f, &c.inputs, DEFAULT_STEP).unwrap();
            assert!(r.max_rel_error < 1e-3, "{}: {r:?}", c.name);
        }
    }

    #[test]
    fn penalty_oracle_holds_in_both_modes() {
        for mode in [PenaltyMode::SecondOrder, PenaltyMode::FiniteDifference(FD_PENALTY_STEP)] {
            assert!(penalty_oracle_error(mode).unwrap() < 1e-3, "{mode}");
        }
    }

    fn tiny_models() -> (Generator, Critic) {
        (
            Generator::new(GeneratorConfig::new(8, 2).with_width(2).with_residual_blocks(1)).unwrap(),
            Critic::new(CriticConfig::new(8, 2).with_width(2).with_downsample_layers(2)).unwrap(),
        )
    }

    #[test]
    fn generator_loss_reconciles_and_degenerates() {
        let (gen, critic) = tiny_models();
        let gp = gen.init::<f64>(&mut seeded(1));
        let cp = critic.init::<f64>(&mut seeded(2));
        let run = |w: LossWeights| {
            let g = Graph::new();
            let img = g.constant(Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut seeded(3)));
            let yr = g.constant(Tensor::uniform(&[2, 2], 0.0, 1.0, &mut seeded(4)));
            let yg = g.constant(Tensor::uniform(&[2, 2], 0.0, 1.0, &mut seeded(5)));
            let l = generator_loss(
                &gen,
                &gp.bind(&g, true),
                &critic,
                &cp.bind(&g, false),
                img,
                yr,
                yg,
                &w,
                AttentionNorm::MeanSquare,
            )
            .unwrap();
            l.report
        };
        let w = LossWeights::default();
        let rep = run(w);
        let total = rep.get("gen_total").unwrap();
        assert!(((generator_total_from(&rep, &w).unwrap() - total) / total).abs() < 1e-6);
        for term in ["attn_tv_first", "attn_tv_cycle", "attn_mag_first", "attn_mag_cycle", "expr_fake", "identity"] {
            assert!(rep.get(term).unwrap() >= 0.0, "{term}");
        }
        let bare = run(LossWeights {
            attention: 0.0,
            expression: 0.0,
            identity: 0.0,
            ..w
        });
        assert_eq!(bare.get("gen_total"), bare.get("gen_adv"));
    }

    #[test]
    fn generator_loss_requires_frozen_critic() {
        let (gen, critic) = tiny_models();
        let gp = gen.init::<f64>(&mut seeded(1));
        let cp = critic.init::<f64>(&mut seeded(2));
        let g = Graph::new();
        let img = g.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let y = g.constant(Tensor::zeros(&[1, 2]));
        let r = generator_loss(
            &gen,
            &gp.bind(&g, true),
            &critic,
            &cp.bind(&g, true),
            img,
            y,
            y,
            &LossWeights::default(),
            AttentionNorm::MeanSquare,
        );
        assert!(r.is_err());
    }
}
