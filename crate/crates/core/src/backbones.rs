//! Conditional generative backbones: VAE, WGAN with gradient penalty, and
//! f-VAEGAN (a VAE whose decoder doubles as the WGAN generator).
//!
//! The generator maps `[attribute ‖ noise]` to a feature vector through a
//! sigmoid output; noise and latent codes have the attribute width and are
//! drawn from N(0, I). The encoder maps `[feature ‖ attribute]` to the mean
//! and log-variance of a diagonal Gaussian, the critic maps
//! `[feature ‖ attribute]` to a scalar score.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Array, Graph, Tensor};
use crate::error::{Error, Result};
use crate::nn::{ffnn_default, Activation, BoundFfnn, Checkpoint, Ffnn};
use crate::rng::{standard_normal, stream, stream_rng, uniform, Rng};

/// Default weight of the gradient penalty.
pub const DEFAULT_LAMBDA: f64 = 10.0;
/// Default weight of the adversarial term in f-VAEGAN.
pub const DEFAULT_BETA: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    Vae,
    Wgan,
    Vaegan,
}

impl BackboneKind {
    pub fn has_encoder(self) -> bool {
        matches!(self, BackboneKind::Vae | BackboneKind::Vaegan)
    }

    pub fn has_critic(self) -> bool {
        matches!(self, BackboneKind::Wgan | BackboneKind::Vaegan)
    }

    fn code(self) -> f64 {
        match self {
            BackboneKind::Vae => 0.0,
            BackboneKind::Wgan => 1.0,
            BackboneKind::Vaegan => 2.0,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Vae => "vae",
            BackboneKind::Wgan => "wgan",
            BackboneKind::Vaegan => "vaegan",
        })
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(BackboneKind::Vae),
            "wgan" => Ok(BackboneKind::Wgan),
            "vaegan" | "f-vaegan" => Ok(BackboneKind::Vaegan),
            other => Err(Error::Config(format!("unknown backbone `{other}`"))),
        }
    }
}

/// Hidden layer widths of the three networks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub generator_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        Architecture {
            generator_hidden: vec![4096, 8192],
            encoder_hidden: vec![8192, 4096],
            critic_hidden: vec![4096],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub kind: BackboneKind,
    pub generator: Ffnn,
    pub encoder: Option<Ffnn>,
    pub critic: Option<Ffnn>,
    attr_dim: usize,
    feat_dim: usize,
}

fn widths(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut w = Vec::with_capacity(hidden.len() + 2);
    w.push(input);
    w.extend_from_slice(hidden);
    w.push(output);
    w
}

impl Backbone {
    /// Freshly initialized backbone. Each network draws its weights from its
    /// own stream of `seed`, so the generator of a VAE and of a VAEGAN built
    /// with the same seed and architecture are identical.
    pub fn new(kind: BackboneKind, attr_dim: usize, feat_dim: usize, arch: &Architecture, seed: u64) -> Self {
        let noise = attr_dim;
        let generator = ffnn_default(
            &widths(attr_dim + noise, &arch.generator_hidden, feat_dim),
            Activation::LeakyRelu,
            Activation::Sigmoid,
            &mut stream_rng(seed, stream::INIT_GENERATOR),
        )
        .expect("generator widths conform");
        let encoder = kind.has_encoder().then(|| {
            ffnn_default(
                &widths(feat_dim + attr_dim, &arch.encoder_hidden, 2 * noise),
                Activation::LeakyRelu,
                Activation::Linear,
                &mut stream_rng(seed, stream::INIT_ENCODER),
            )
            .expect("encoder widths conform")
        });
        let critic = kind.has_critic().then(|| {
            ffnn_default(
                &widths(feat_dim + attr_dim, &arch.critic_hidden, 1),
                Activation::LeakyRelu,
                Activation::Linear,
                &mut stream_rng(seed, stream::INIT_CRITIC),
            )
            .expect("critic widths conform")
        });
        Backbone {
            kind,
            generator,
            encoder,
            critic,
            attr_dim,
            feat_dim,
        }
    }

    /// Assembles a backbone from existing networks, checking their widths.
    pub fn from_parts(
        kind: BackboneKind,
        generator: Ffnn,
        encoder: Option<Ffnn>,
        critic: Option<Ffnn>,
    ) -> Result<Self> {
        if !generator.in_width().is_multiple_of(2) {
            return Err(Error::invalid("generator input must be [attribute ‖ noise] of equal widths"));
        }
        let attr_dim = generator.in_width() / 2;
        let feat_dim = generator.out_width();
        if generator.layers().last().map(|l| l.activation) != Some(Activation::Sigmoid) {
            return Err(Error::invalid("generator output must be a sigmoid"));
        }
        if kind.has_encoder() != encoder.is_some() || kind.has_critic() != critic.is_some() {
            return Err(Error::invalid(format!("{kind} backbone has the wrong set of networks")));
        }
        if let Some(e) = &encoder {
            if e.in_width() != feat_dim + attr_dim || e.out_width() != 2 * attr_dim {
                return Err(Error::invalid("encoder widths do not match the generator"));
            }
        }
        if let Some(c) = &critic {
            if c.in_width() != feat_dim + attr_dim || c.out_width() != 1 {
                return Err(Error::invalid("critic widths do not match the generator"));
            }
        }
        Ok(Backbone {
            kind,
            generator,
            encoder,
            critic,
            attr_dim,
            feat_dim,
        })
    }

    pub fn attr_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn noise_dim(&self) -> usize {
        self.attr_dim
    }

    pub fn feat_dim(&self) -> usize {
        self.feat_dim
    }

    pub fn bind(&self, g: &mut Graph, trainable: BindMode) -> BoundBackbone {
        BoundBackbone {
            generator: self.generator.bind(g, trainable.generator),
            encoder: self.encoder.as_ref().map(|e| e.bind(g, trainable.encoder)),
            critic: self.critic.as_ref().map(|c| c.bind(g, trainable.critic)),
            noise_dim: self.noise_dim(),
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("backbone.kind", Array::scalar(self.kind.code()));
        ck.insert_ffnn("generator", &self.generator);
        if let Some(e) = &self.encoder {
            ck.insert_ffnn("encoder", e);
        }
        if let Some(c) = &self.critic {
            ck.insert_ffnn("critic", c);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let code = ck
            .get("backbone.kind")
            .ok_or_else(|| Error::Config("checkpoint holds no backbone".into()))?
            .item();
        let kind = [BackboneKind::Vae, BackboneKind::Wgan, BackboneKind::Vaegan]
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or_else(|| Error::Config(format!("unknown backbone code {code}")))?;
        let encoder = ck.has_ffnn("encoder").then(|| ck.ffnn("encoder")).transpose()?;
        let critic = ck.has_ffnn("critic").then(|| ck.ffnn("critic")).transpose()?;
        Backbone::from_parts(kind, ck.ffnn("generator")?, encoder, critic)
    }
}

/// Which networks are bound as differentiable parameters.
#[derive(Debug, Clone, Copy, Default)]
pub struct BindMode {
    pub generator: bool,
    pub encoder: bool,
    pub critic: bool,
}

impl BindMode {
    pub const FROZEN: BindMode = BindMode {
        generator: false,
        encoder: false,
        critic: false,
    };
    pub const ALL: BindMode = BindMode {
        generator: true,
        encoder: true,
        critic: true,
    };
}

/// A backbone whose parameters live on a graph.
#[derive(Debug, Clone)]
pub struct BoundBackbone {
    pub generator: BoundFfnn,
    pub encoder: Option<BoundFfnn>,
    pub critic: Option<BoundFfnn>,
    noise_dim: usize,
}

impl BoundBackbone {
    /// Assembles a bound backbone from separately bound networks.
    pub fn from_parts(generator: BoundFfnn, encoder: Option<BoundFfnn>, critic: Option<BoundFfnn>, noise_dim: usize) -> Self {
        BoundBackbone {
            generator,
            encoder,
            critic,
            noise_dim,
        }
    }

    fn encoder(&self) -> Result<&BoundFfnn> {
        self.encoder
            .as_ref()
            .ok_or_else(|| Error::invalid("this backbone has no encoder"))
    }

    fn critic(&self) -> Result<&BoundFfnn> {
        self.critic
            .as_ref()
            .ok_or_else(|| Error::invalid("this backbone has no critic"))
    }

    /// `G(a, z)` with fresh `z ~ N(0, I)`, one row per attribute row.
    pub fn generate(&self, g: &mut Graph, attrs: Tensor, rng: &mut Rng) -> Result<Tensor> {
        let rows = g.value(attrs).rows();
        let z = g.constant(standard_normal(rng, &[rows, self.noise_dim]));
        let input = g.concat_cols(attrs, z)?;
        self.generator.forward(g, input)
    }

    /// Critic scores `D(x, a)` as a `[m, 1]` column.
    pub fn critic_score(&self, g: &mut Graph, x: Tensor, a: Tensor) -> Result<Tensor> {
        let input = g.concat_cols(x, a)?;
        self.critic()?.forward(g, input)
    }
}

/// `z = mu + eps ⊙ exp(log_var / 2)` with `eps ~ N(0, I)` drawn from `rng`.
pub fn reparameterize(g: &mut Graph, mu: Tensor, log_var: Tensor, rng: &mut Rng) -> Result<Tensor> {
    if g.shape(mu) != g.shape(log_var) {
        return Err(Error::Shape {
            op: "reparameterize",
            lhs: g.shape(mu).to_vec(),
            rhs: g.shape(log_var).to_vec(),
        });
    }
    let eps = g.constant(standard_normal(rng, g.shape(mu)));
    let half = g.scale(log_var, 0.5);
    let sigma = g.exp(half);
    let noise = g.mul(eps, sigma)?;
    g.add(mu, noise)
}

/// KL divergence from N(mu, diag(exp(log_var))) to N(0, I), summed over the
/// latent axis and averaged over the batch.
pub fn kl_standard_normal(g: &mut Graph, mu: Tensor, log_var: Tensor) -> Result<Tensor> {
    if g.shape(mu) != g.shape(log_var) {
        return Err(Error::Shape {
            op: "kl_standard_normal",
            lhs: g.shape(mu).to_vec(),
            rhs: g.shape(log_var).to_vec(),
        });
    }
    let batch = g.value(mu).rows() as f64;
    let mu2 = g.square(mu);
    let var = g.exp(log_var);
    let t = g.add(mu2, var)?;
    let t = g.sub(t, log_var)?;
    let t = g.add_scalar(t, -1.0);
    let s = g.sum(t);
    Ok(g.scale(s, 0.5 / batch))
}

/// Binary cross-entropy of targets `x` against `sigmoid(logits)`, summed
/// over features and averaged over the batch, via
/// `softplus(l) - x l`, which never takes the log of zero.
pub fn bce_with_logits(g: &mut Graph, x: Tensor, logits: Tensor) -> Result<Tensor> {
    let batch = g.value(x).rows() as f64;
    let sp = g.softplus(logits);
    let xl = g.mul(x, logits)?;
    let per = g.sub(sp, xl)?;
    let s = g.sum(per);
    Ok(g.scale(s, 1.0 / batch))
}

fn check_unit_interval(x: &Array) -> Result<()> {
    match x.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(i) => Err(Error::invalid(format!(
            "features must lie in [0, 1] (min-max normalized); element {i} is {}",
            x.data()[i]
        ))),
        None => Ok(()),
    }
}

/// Parts of the conditional VAE objective.
#[derive(Debug, Clone, Copy)]
pub struct VaeTerms {
    pub reconstruction: Tensor,
    pub kl: Tensor,
    pub total: Tensor,
}

/// Negative conditional ELBO: BCE reconstruction of `x` from
/// `G(E(x, a), a)` plus the KL term.
pub fn vae_terms(g: &mut Graph, bb: &BoundBackbone, x: Tensor, a: Tensor, rng: &mut Rng) -> Result<VaeTerms> {
    check_unit_interval(g.value(x))?;
    let enc_in = g.concat_cols(x, a)?;
    let stats = bb.encoder()?.forward(g, enc_in)?;
    let latent = bb.noise_dim;
    let mu = g.slice_cols(stats, 0, latent)?;
    let log_var = g.slice_cols(stats, latent, 2 * latent)?;
    let z = reparameterize(g, mu, log_var, rng)?;
    let gen_in = g.concat_cols(a, z)?;
    let (logits, _) = bb.generator.forward_pre_activation(g, gen_in)?;
    let reconstruction = bce_with_logits(g, x, logits)?;
    let kl = kl_standard_normal(g, mu, log_var)?;
    let total = g.add(reconstruction, kl)?;
    Ok(VaeTerms {
        reconstruction,
        kl,
        total,
    })
}

pub fn vae_loss(g: &mut Graph, bb: &BoundBackbone, x: Tensor, a: Tensor, rng: &mut Rng) -> Result<Tensor> {
    Ok(vae_terms(g, bb, x, a, rng)?.total)
}

/// Mean over the batch of `(‖∇_x̂ D(x̂, a)‖₂ − 1)²` with
/// `x̂ = u x_real + (1 − u) x_fake`, one `u ~ U(0, 1)` per row.
///
/// The interpolates are fresh leaves, so the penalty is differentiable with
/// respect to the critic parameters only.
pub fn gradient_penalty(
    g: &mut Graph,
    critic: &BoundFfnn,
    x_real: &Array,
    x_fake: &Array,
    a: Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    if x_real.shape() != x_fake.shape() {
        return Err(Error::Shape {
            op: "gradient_penalty",
            lhs: x_real.shape().to_vec(),
            rhs: x_fake.shape().to_vec(),
        });
    }
    let rows = x_real.rows();
    let u = uniform(rng, &[rows, 1], 0.0, 1.0);
    let hat = x_real.zip_broadcast(&u, "interpolate", |x, u| u * x)?;
    let rest = x_fake.zip_broadcast(&u, "interpolate", |x, u| (1.0 - u) * x)?;
    let hat = hat.zip_broadcast(&rest, "interpolate", |p, q| p + q)?;
    let x_hat = g.param(hat);
    let input = g.concat_cols(x_hat, a)?;
    let score = critic.forward(g, input)?;
    let total = g.sum(score);
    let grad = g.backward(total, &[x_hat], true)?[0];
    let norm = g.l2_norm_rows(grad)?;
    let dev = g.add_scalar(norm, -1.0);
    let sq = g.square(dev);
    Ok(g.mean(sq))
}

/// `−E[D(x, a)] + E[D(x_fake, a)] + λ · penalty`, minimized by the critic.
pub fn critic_loss(
    g: &mut Graph,
    bb: &BoundBackbone,
    x: Tensor,
    x_fake: Tensor,
    a: Tensor,
    lambda: f64,
    rng: &mut Rng,
) -> Result<Tensor> {
    let real = bb.critic_score(g, x, a)?;
    let fake = bb.critic_score(g, x_fake, a)?;
    let real = g.mean(real);
    let fake = g.mean(fake);
    let w = g.sub(fake, real)?;
    let real_v = g.value(x).clone();
    let fake_v = g.value(x_fake).clone();
    let gp = gradient_penalty(g, bb.critic()?, &real_v, &fake_v, a, rng)?;
    let gp = g.scale(gp, lambda);
    g.add(w, gp)
}

/// `−E[D(x_fake, a)]`, minimized by the generator.
pub fn generator_adversarial_loss(g: &mut Graph, bb: &BoundBackbone, x_fake: Tensor, a: Tensor) -> Result<Tensor> {
    let fake = bb.critic_score(g, x_fake, a)?;
    let m = g.mean(fake);
    Ok(g.neg(m))
}

#[derive(Debug, Clone, Copy)]
pub struct WganLosses {
    pub critic: Tensor,
    pub generator: Tensor,
}

/// Both WGAN-GP objectives on one batch, sharing a fresh `G(a, z)`.
pub fn wgan_losses(
    g: &mut Graph,
    bb: &BoundBackbone,
    x: Tensor,
    a: Tensor,
    lambda: f64,
    rng: &mut Rng,
) -> Result<WganLosses> {
    let fake = bb.generate(g, a, rng)?;
    let critic = critic_loss(g, bb, x, fake, a, lambda, rng)?;
    let generator = generator_adversarial_loss(g, bb, fake, a)?;
    Ok(WganLosses { critic, generator })
}

#[derive(Debug, Clone, Copy)]
pub struct VaeganLosses {
    pub vae: Tensor,
    pub critic: Tensor,
    pub generator_adversarial: Tensor,
}

impl VaeganLosses {
    /// `vae + β · generator_adversarial`.
    pub fn generator_objective(&self, g: &mut Graph, beta: f64) -> Result<Tensor> {
        let adv = g.scale(self.generator_adversarial, beta);
        g.add(self.vae, adv)
    }
}

/// f-VAEGAN components; the same generator parameters feed both the VAE
/// reconstruction and the adversarial path.
pub fn vaegan_loss(
    g: &mut Graph,
    bb: &BoundBackbone,
    x: Tensor,
    a: Tensor,
    lambda: f64,
    rng: &mut Rng,
) -> Result<VaeganLosses> {
    let vae = vae_loss(g, bb, x, a, rng)?;
    let w = wgan_losses(g, bb, x, a, lambda, rng)?;
    Ok(VaeganLosses {
        vae,
        critic: w.critic,
        generator_adversarial: w.generator,
    })
}

/// Synthetic labeled features: `shots` samples `G(a_c, z)` for every class
/// in `classes`, grouped by class in the given order.
pub fn generate(
    backbone: &Backbone,
    attributes: &Array,
    classes: &[usize],
    shots: usize,
    rng: &mut Rng,
) -> Result<(Array, Vec<usize>)> {
    if shots == 0 {
        return Err(Error::invalid("shots must be at least 1"));
    }
    let mut rows = Vec::with_capacity(classes.len() * shots);
    let mut labels = Vec::with_capacity(classes.len() * shots);
    for &c in classes {
        for _ in 0..shots {
            rows.push(c);
            labels.push(c);
        }
    }
    let attrs = attributes.select_rows(&rows);
    Ok((generate_rows(backbone, &attrs, rng)?, labels))
}

/// One generated feature row per attribute row.
pub fn generate_rows(backbone: &Backbone, attrs: &Array, rng: &mut Rng) -> Result<Array> {
    let mut g = Graph::new();
    let bb = backbone.bind(&mut g, BindMode::FROZEN);
    let a = g.constant(attrs.clone());
    let x = bb.generate(&mut g, a, rng)?;
    Ok(g.value(x).clone())
}
