//! Joint training, pre-training and evaluation.

mod eval;
mod linear;
mod support;

pub use eval::{evaluate_predictions, harmonic_mean, ClassTally, EvalReport};
pub use linear::{train_linear, LinearClassifier, LinearConfig};
pub use support::{build_test_support, RunningMean, SupportSource, TestSupport};

use crate::autodiff::{Array, Graph, Tensor};
use crate::backbones::{generator_adversarial_loss, critic_loss, vae_loss, Backbone, BackboneKind, BoundBackbone};
use crate::config::{Config, Head};
use crate::data::{Dataset, Mode};
use crate::error::{Error, Result};
use crate::fsl::{finetune_protonet, pn_loss, pretrain_protonet, sample_query_set, EpisodicConfig, ProtoNet, FINETUNE_EPISODES};
use crate::nn::{AdamConfig, BoundFfnn, Trainable};
use crate::rng::{stream, stream_rng, Rng};

/// Losses recorded for one generator update. Terms that the run does not
/// compute are `None`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IterationLog {
    pub iteration: usize,
    /// Few-shot loss at the classifier step.
    pub fsl: Option<f64>,
    /// Critic loss of the last critic step.
    pub critic: Option<f64>,
    /// Zero-shot (backbone) part of the generator objective.
    pub zsl: f64,
    /// Few-shot term of the generator objective, before weighting.
    pub fsl_generator: Option<f64>,
    /// Full generator objective.
    pub objective: f64,
}

impl IterationLog {
    pub const CSV_HEADER: &'static str = "iteration,fsl,critic,zsl,fsl_generator,objective";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.iteration,
            opt(self.fsl),
            opt(self.critic),
            self.zsl,
            opt(self.fsl_generator),
            self.objective
        )
    }
}

fn check_finite(value: f64, iteration: usize, what: &str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFiniteLoss {
            iteration,
            what: what.into(),
        })
    }
}

/// Networks under training, each with its own optimizer.
struct Nets {
    generator: Trainable,
    encoder: Option<Trainable>,
    critic: Option<Trainable>,
    noise_dim: usize,
}

impl Nets {
    fn bind(&self, g: &mut Graph, generator: bool, encoder: bool, critic: bool) -> BoundBackbone {
        let bind = |t: &Option<Trainable>, g: &mut Graph, on: bool| t.as_ref().map(|t| t.net.bind(g, on));
        let gen = self.generator.net.bind(g, generator);
        let enc = bind(&self.encoder, g, encoder);
        let cri = bind(&self.critic, g, critic);
        BoundBackbone::from_parts(gen, enc, cri, self.noise_dim)
    }
}

/// Attribute rows for `classes[groups[i]]`, one per entry of `groups`.
fn attribute_rows(ds: &Dataset, classes: &[usize], groups: &[usize]) -> Array {
    let ids: Vec<usize> = groups.iter().map(|&k| classes[k]).collect();
    ds.attributes.select_rows(&ids)
}

/// Few-shot loss on a generated support of `n_shot` rows per class against
/// the real query.
#[allow(clippy::too_many_arguments)]
fn synthetic_pn_loss(
    g: &mut Graph,
    bb: &BoundBackbone,
    pn: &BoundFfnn,
    support_attrs: &Array,
    support_groups: &[usize],
    query: &Array,
    query_groups: &[usize],
    way: usize,
    rng: &mut Rng,
) -> Result<Tensor> {
    let a = g.constant(support_attrs.clone());
    let xs = bb.generate(g, a, rng)?;
    let xq = g.constant(query.clone());
    pn_loss(g, pn, xs, support_groups, xq, query_groups, way)
}

fn check_dims(backbone: &Backbone, ds: &Dataset) -> Result<()> {
    if backbone.attr_dim() != ds.attr_dim() || backbone.feat_dim() != ds.feat_dim() {
        return Err(Error::invalid(format!(
            "backbone maps {} attributes to {} features but the dataset has {} and {}",
            backbone.attr_dim(),
            backbone.feat_dim(),
            ds.attr_dim(),
            ds.feat_dim()
        )));
    }
    Ok(())
}

fn run(
    backbone: &mut Backbone,
    protonet: Option<&mut ProtoNet>,
    ds: &Dataset,
    cfg: &Config,
    on_iteration: &mut dyn FnMut(&IterationLog),
) -> Result<()> {
    cfg.validate()?;
    ds.check_preprocessed()?;
    check_dims(backbone, ds)?;
    if let Some(pn) = protonet.as_deref() {
        if pn.width() != ds.feat_dim() {
            return Err(Error::invalid(format!(
                "prototypical network width {} does not match feature dimension {}",
                pn.width(),
                ds.feat_dim()
            )));
        }
    }
    let pool = ds.train_pool()?;
    let adam = AdamConfig::with_lr(cfg.alpha_f);
    let mut nets = Nets {
        generator: Trainable::new(backbone.generator.clone(), adam, "generator"),
        encoder: backbone.encoder.clone().map(|e| Trainable::new(e, adam, "encoder")),
        critic: backbone.critic.clone().map(|c| Trainable::new(c, adam, "critic")),
        noise_dim: backbone.noise_dim(),
    };
    let mut pn_tr = protonet
        .as_deref()
        .map(|pn| Trainable::new(pn.net.clone(), AdamConfig::with_lr(cfg.alpha_h), "protonet"));
    let mut episode_rng = stream_rng(cfg.seed, stream::EPISODES);
    let mut bb_rng = stream_rng(cfg.seed, stream::BACKBONE_NOISE);
    let mut fsl_rng = stream_rng(cfg.seed, stream::FSL_NOISE);

    for it in 0..cfg.iterations {
        let (classes, groups) = sample_query_set(&pool, cfg.n_way, cfg.n_query, &mut episode_rng)?;
        let way = classes.len();
        let qi: Vec<usize> = groups.iter().flatten().copied().collect();
        let qg: Vec<usize> = groups.iter().enumerate().flat_map(|(k, v)| std::iter::repeat_n(k, v.len())).collect();
        let xq = ds.features.select_rows(&qi);
        let aq = attribute_rows(ds, &classes, &qg);
        let sg: Vec<usize> = (0..way).flat_map(|k| std::iter::repeat_n(k, cfg.n_shot)).collect();
        let a_s = attribute_rows(ds, &classes, &sg);
        let mut log = IterationLog {
            iteration: it,
            ..IterationLog::default()
        };

        // classifier step on a frozen generator
        if let Some(tr) = pn_tr.as_mut() {
            let mut g = Graph::new();
            let bb = nets.bind(&mut g, false, false, false);
            let pn = tr.net.bind(&mut g, true);
            let loss = synthetic_pn_loss(&mut g, &bb, &pn, &a_s, &sg, &xq, &qg, way, &mut fsl_rng)?;
            log.fsl = Some(check_finite(g.item(loss), it, "few-shot loss")?);
            let grads = g.gradients(loss, &pn.params())?;
            tr.update(grads)?;
        }

        if let Some(critic) = nets.critic.as_mut() {
            for _ in 0..cfg.critic_steps {
                let mut g = Graph::new();
                let gen = nets.generator.net.bind(&mut g, false);
                let cri = critic.net.bind(&mut g, true);
                let params = cri.params();
                let bb = BoundBackbone::from_parts(gen, None, Some(cri), nets.noise_dim);
                let x = g.constant(xq.clone());
                let a = g.constant(aq.clone());
                let fake = bb.generate(&mut g, a, &mut bb_rng)?;
                let loss = critic_loss(&mut g, &bb, x, fake, a, cfg.lambda, &mut bb_rng)?;
                log.critic = Some(check_finite(g.item(loss), it, "critic loss")?);
                let grads = g.gradients(loss, &params)?;
                critic.update(grads)?;
            }
        }

        // generator (and encoder) step with the critic and classifier frozen
        let mut g = Graph::new();
        let bb = nets.bind(&mut g, true, true, false);
        let x = g.constant(xq.clone());
        let a = g.constant(aq.clone());
        let zsl = match backbone.kind {
            BackboneKind::Vae => vae_loss(&mut g, &bb, x, a, &mut bb_rng)?,
            BackboneKind::Wgan => {
                let fake = bb.generate(&mut g, a, &mut bb_rng)?;
                generator_adversarial_loss(&mut g, &bb, fake, a)?
            }
            BackboneKind::Vaegan => {
                let vae = vae_loss(&mut g, &bb, x, a, &mut bb_rng)?;
                let fake = bb.generate(&mut g, a, &mut bb_rng)?;
                let adv = generator_adversarial_loss(&mut g, &bb, fake, a)?;
                let adv = g.scale(adv, cfg.beta);
                g.add(vae, adv)?
            }
        };
        log.zsl = check_finite(g.item(zsl), it, "backbone loss")?;
        let mut objective = zsl;
        if let Some(tr) = pn_tr.as_ref().filter(|_| cfg.gamma > 0.0) {
            let pn = tr.net.bind(&mut g, false);
            let fsl = synthetic_pn_loss(&mut g, &bb, &pn, &a_s, &sg, &xq, &qg, way, &mut fsl_rng)?;
            log.fsl_generator = Some(check_finite(g.item(fsl), it, "few-shot loss")?);
            let weighted = g.scale(fsl, cfg.gamma);
            objective = g.add(zsl, weighted)?;
        }
        log.objective = check_finite(g.item(objective), it, "generator objective")?;
        let gen_params = bb.generator.params();
        let enc_params = bb.encoder.as_ref().map(|e| e.params()).unwrap_or_default();
        let mut wrt = gen_params.clone();
        wrt.extend(&enc_params);
        let mut grads = g.gradients(objective, &wrt)?;
        let enc_grads = grads.split_off(gen_params.len());
        nets.generator.update(grads)?;
        if let Some(enc) = nets.encoder.as_mut() {
            enc.update(enc_grads)?;
        }
        on_iteration(&log);
    }

    backbone.generator = nets.generator.net;
    backbone.encoder = nets.encoder.map(|t| t.net);
    backbone.critic = nets.critic.map(|t| t.net);
    if let (Some(pn), Some(tr)) = (protonet, pn_tr) {
        pn.net = tr.net;
    }
    Ok(())
}

/// Joint training of the backbone and the Prototypical Network for
/// `cfg.iterations` generator updates. Every iteration updates the network on
/// a generated support against a real query, then the critic (if any), then
/// the generator and encoder on the backbone loss plus `γ` times the few-shot
/// loss. `on_iteration` receives the losses of each iteration.
pub fn train_z2fsl(
    backbone: &mut Backbone,
    protonet: &mut ProtoNet,
    ds: &Dataset,
    cfg: &Config,
    on_iteration: &mut dyn FnMut(&IterationLog),
) -> Result<()> {
    run(backbone, Some(protonet), ds, cfg, on_iteration)
}

/// Backbone training alone, on the same batches and noise streams as
/// [`train_z2fsl`].
pub fn train_backbone(
    backbone: &mut Backbone,
    ds: &Dataset,
    cfg: &Config,
    on_iteration: &mut dyn FnMut(&IterationLog),
) -> Result<()> {
    run(backbone, None, ds, cfg, on_iteration)
}

/// Fresh Prototypical Network for `ds`.
pub fn new_protonet(ds: &Dataset, cfg: &Config) -> ProtoNet {
    ProtoNet::new(ds.feat_dim(), cfg.pn_hidden, cfg.seed)
}

/// Episodic pre-training on the real training samples. Returns the network
/// and the loss of every episode.
pub fn pretrain(ds: &Dataset, cfg: &Config) -> Result<(ProtoNet, Vec<f64>)> {
    cfg.validate()?;
    ds.check_preprocessed()?;
    let mut pn = new_protonet(ds, cfg);
    let pool = ds.train_pool()?;
    let ec = EpisodicConfig {
        lr: cfg.alpha_h,
        episodes: cfg.pretrain_episodes,
        n_way: cfg.n_way,
        n_shot: cfg.n_shot,
        n_query: cfg.n_query,
    };
    let losses = pretrain_protonet(&mut pn, &ds.features, &pool, &ec, cfg.seed)?;
    Ok((pn, losses))
}

/// Fine-tunes on generated unseen-class episodes after joint training.
pub fn finetune(pn: &mut ProtoNet, backbone: &Backbone, ds: &Dataset, cfg: &Config) -> Result<Vec<f64>> {
    let ec = EpisodicConfig {
        lr: cfg.alpha_h,
        episodes: FINETUNE_EPISODES,
        n_way: cfg.n_way,
        n_shot: cfg.n_shot,
        n_query: cfg.n_query,
    };
    finetune_protonet(pn, backbone, &ds.attributes, &ds.unseen_classes(), &ec, cfg.seed)
}

/// Test samples scored in `mode`: all test samples in the generalized
/// setting, only unseen-class ones in the zero-shot setting.
pub fn test_samples(ds: &Dataset, mode: Mode) -> Result<Vec<usize>> {
    match (mode, ds.mode) {
        (Mode::Gzsl, Mode::Zsl) => Err(Error::invalid(
            "generalized evaluation needs a dataset with seen-class test samples",
        )),
        (Mode::Gzsl, Mode::Gzsl) => Ok(ds.test_indices()),
        (Mode::Zsl, _) => Ok(ds
            .test_indices()
            .into_iter()
            .filter(|&i| ds.unseen[ds.labels[i] as usize])
            .collect()),
    }
}

fn report(ds: &Dataset, test: &[usize], predicted: &[usize], mode: Mode) -> Result<EvalReport> {
    let truth: Vec<usize> = test.iter().map(|&i| ds.labels[i] as usize).collect();
    evaluate_predictions(&truth, predicted, &ds.unseen, mode)
}

fn check_coverage(ds: &Dataset, test: &[usize], classes: &[usize]) -> Result<()> {
    for &i in test {
        let c = ds.labels[i] as usize;
        if !classes.contains(&c) {
            return Err(Error::invalid(format!("test class {c} has no support")));
        }
    }
    Ok(())
}

/// Nearest-prototype evaluation with prototypes built from the test
/// support.
pub fn evaluate_protonet(pn: &ProtoNet, backbone: &Backbone, ds: &Dataset, cfg: &Config) -> Result<EvalReport> {
    check_dims(backbone, ds)?;
    let test = test_samples(ds, cfg.mode)?;
    let support = build_test_support(ds, cfg)?;
    check_coverage(ds, &test, &support.classes)?;
    let protos = support.prototypes(backbone, ds, |x| pn.embed(x))?;
    let mut predicted = Vec::with_capacity(test.len());
    for part in test.chunks(cfg.eval_chunk.max(1)) {
        let e = pn.embed(&ds.features.select_rows(part))?;
        predicted.extend(protos.classify_embedded(&e)?);
    }
    report(ds, &test, &predicted, cfg.mode)
}

/// Evaluation with a softmax classifier trained on the materialized test
/// support.
pub fn evaluate_linear(backbone: &Backbone, ds: &Dataset, cfg: &Config) -> Result<(EvalReport, LinearClassifier)> {
    check_dims(backbone, ds)?;
    let test = test_samples(ds, cfg.mode)?;
    let support = build_test_support(ds, cfg)?;
    check_coverage(ds, &test, &support.classes)?;
    let (x, y) = support.materialize(backbone, ds)?;
    let lc = LinearConfig {
        lr: cfg.linear_lr,
        epochs: cfg.linear_epochs,
        batch: cfg.linear_batch,
        seed: cfg.seed,
    };
    let clf = train_linear(&x, &y, &lc)?;
    let predicted = clf.predict(&ds.features.select_rows(&test))?;
    Ok((report(ds, &test, &predicted, cfg.mode)?, clf))
}

/// Evaluates with the head chosen by `cfg.head`.
pub fn evaluate(backbone: &Backbone, pn: Option<&ProtoNet>, ds: &Dataset, cfg: &Config) -> Result<EvalReport> {
    match cfg.head {
        Head::Pn => {
            let pn = pn.ok_or_else(|| Error::invalid("the prototypical head needs a trained network"))?;
            evaluate_protonet(pn, backbone, ds, cfg)
        }
        Head::Linear => Ok(evaluate_linear(backbone, ds, cfg)?.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_toy_dataset, ToySpec};

    fn small_toy() -> Dataset {
        make_toy_dataset(&ToySpec {
            seen: 6,
            unseen: 3,
            attr_dim: 6,
            feat_dim: 8,
            per_class: 12,
            ..ToySpec::default()
        })
        .unwrap()
    }

    fn small_config(kind: BackboneKind) -> Config {
        Config {
            backbone: kind,
            alpha_f: 1e-3,
            alpha_h: 1e-3,
            beta: 1.0,
            gamma: 1.0,
            n_way: 3,
            n_shot: 2,
            n_query: 3,
            iterations: 5,
            critic_steps: 2,
            pretrain_episodes: 5,
            pn_hidden: 0,
            n_shot_test: 10,
            gen_hidden: vec![8],
            enc_hidden: vec![8],
            critic_hidden: vec![8],
            ..Config::default()
        }
    }

    fn backbone(ds: &Dataset, cfg: &Config) -> Backbone {
        Backbone::new(cfg.backbone, ds.attr_dim(), ds.feat_dim(), &cfg.architecture(), cfg.seed)
    }

    #[test]
    fn every_backbone_trains_and_logs() {
        let ds = small_toy();
        for kind in [BackboneKind::Vae, BackboneKind::Wgan, BackboneKind::Vaegan] {
            let cfg = small_config(kind);
            let mut bb = backbone(&ds, &cfg);
            let before = bb.generator.clone();
            let mut pn = new_protonet(&ds, &cfg);
            let mut logs = Vec::new();
            train_z2fsl(&mut bb, &mut pn, &ds, &cfg, &mut |l| logs.push(*l)).unwrap();
            assert_eq!(logs.len(), 5);
            assert!(logs.iter().all(|l| l.fsl.is_some() && l.fsl_generator.is_some()));
            assert_eq!(logs[0].critic.is_some(), kind.has_critic());
            assert_ne!(bb.generator, before);
            let r = evaluate_protonet(&pn, &bb, &ds, &cfg).unwrap();
            assert!(r.acc.is_some());
        }
    }

    #[test]
    fn zero_gamma_leaves_generator_identical_to_backbone_training() {
        let ds = small_toy();
        let cfg = Config {
            gamma: 0.0,
            ..small_config(BackboneKind::Vaegan)
        };
        let mut a = backbone(&ds, &cfg);
        let mut b = a.clone();
        let mut pn = new_protonet(&ds, &cfg);
        train_z2fsl(&mut a, &mut pn, &ds, &cfg, &mut |_| {}).unwrap();
        train_backbone(&mut b, &ds, &cfg, &mut |_| {}).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn linear_head_and_mode_checks() {
        let ds = small_toy();
        let cfg = Config {
            head: Head::Linear,
            linear_epochs: 2,
            ..small_config(BackboneKind::Vae)
        };
        let bb = backbone(&ds, &cfg);
        let r = evaluate(&bb, None, &ds, &cfg).unwrap();
        assert_eq!(r.per_class.len(), 3);
        let g = Config {
            mode: Mode::Gzsl,
            ..cfg.clone()
        };
        assert!(test_samples(&ds, g.mode).is_err());
        let pn_cfg = Config { head: Head::Pn, ..cfg };
        assert!(evaluate(&bb, None, &ds, &pn_cfg).is_err());
    }

    #[test]
    fn pretraining_reduces_loss() {
        let ds = small_toy();
        let cfg = Config {
            pretrain_episodes: 200,
            alpha_h: 1e-2,
            ..small_config(BackboneKind::Vae)
        };
        let (_, losses) = pretrain(&ds, &cfg).unwrap();
        let head: f64 = losses[..20].iter().sum();
        let tail: f64 = losses[180..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
    }
}
