//! Prototypical Network few-shot classifier and episodic sampling.

use rand::seq::index;
use rand::Rng as _;

use crate::autodiff::{Array, Graph, Tensor};
use crate::backbones::{generate, Backbone};
use crate::error::{Error, Result};
use crate::nn::{init_near_identity, AdamConfig, BoundFfnn, Checkpoint, Ffnn, Trainable};
use crate::rng::{stream, stream_rng, Rng};

/// Embedding network `f_φ` of a Prototypical Network. All weight matrices
/// are square, so embeddings have the feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoNet {
    pub net: Ffnn,
}

impl ProtoNet {
    /// Near-identity initialization with `hidden_layers` ReLU layers.
    pub fn new(width: usize, hidden_layers: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, stream::INIT_PROTONET);
        ProtoNet {
            net: init_near_identity(width, hidden_layers, &mut rng),
        }
    }

    pub fn from_ffnn(net: Ffnn) -> Result<Self> {
        if net.layers().iter().any(|l| l.in_width() != l.out_width()) {
            return Err(Error::invalid("prototypical network weights must be square"));
        }
        Ok(ProtoNet { net })
    }

    pub fn width(&self) -> usize {
        self.net.in_width()
    }

    pub fn hidden_layers(&self) -> usize {
        self.net.layers().len() - 1
    }

    pub fn embed(&self, x: &Array) -> Result<Array> {
        self.net.predict(x)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_ffnn("protonet", &self.net);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Self::from_ffnn(ck.ffnn("protonet")?)
    }
}

/// Sample indices grouped by class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassPool {
    classes: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl ClassPool {
    /// Groups the samples selected by `include` by label, keeping only the
    /// classes in `classes` (in that order).
    pub fn new(labels: &[u32], include: impl Fn(usize) -> bool, classes: &[usize]) -> Result<Self> {
        let mut members = vec![Vec::new(); classes.len()];
        let slot: std::collections::HashMap<usize, usize> =
            classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        if slot.len() != classes.len() {
            return Err(Error::invalid("class pool lists a class twice"));
        }
        for (i, &y) in labels.iter().enumerate() {
            if include(i) {
                if let Some(&s) = slot.get(&(y as usize)) {
                    members[s].push(i);
                }
            }
        }
        if let Some(k) = members.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("class {} has no examples in the pool", classes[k])));
        }
        Ok(ClassPool {
            classes: classes.to_vec(),
            members,
        })
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn members(&self, slot: usize) -> &[usize] {
        &self.members[slot]
    }
}

/// One sampled few-shot task over real samples. `support[k]` and `query[k]`
/// hold sample indices of class `classes[k]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub classes: Vec<usize>,
    pub support: Vec<Vec<usize>>,
    pub query: Vec<Vec<usize>>,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.classes.len()
    }

    /// Flattened support indices with their episode-local class positions.
    pub fn support_flat(&self) -> (Vec<usize>, Vec<usize>) {
        flatten(&self.support)
    }

    /// Flattened query indices with their episode-local class positions.
    pub fn query_flat(&self) -> (Vec<usize>, Vec<usize>) {
        flatten(&self.query)
    }
}

fn flatten(groups: &[Vec<usize>]) -> (Vec<usize>, Vec<usize>) {
    let mut idx = Vec::new();
    let mut pos = Vec::new();
    for (k, g) in groups.iter().enumerate() {
        idx.extend_from_slice(g);
        pos.extend(std::iter::repeat_n(k, g.len()));
    }
    (idx, pos)
}

/// Picks `n` of the pool's classes uniformly without replacement, returning
/// pool slots.
pub fn sample_classes(pool_len: usize, n: usize, rng: &mut Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::invalid("episode way must be at least 1"));
    }
    if n > pool_len {
        return Err(Error::invalid(format!(
            "episode way {n} exceeds the {pool_len} classes available"
        )));
    }
    Ok(index::sample(rng, pool_len, n).into_vec())
}

/// Draws an episode of `n_way` classes with `n_shot` support and `n_query`
/// query samples per class.
///
/// A class with at least `n_shot + n_query` members is sampled without
/// replacement. A smaller class draws its support without replacement (with
/// replacement only when it has fewer than `n_shot` members), and its query
/// first takes the members left over, then tops up with replacement from
/// them; support and query stay disjoint whenever the class has more than
/// `n_shot` members.
pub fn sample_episode(pool: &ClassPool, n_way: usize, n_shot: usize, n_query: usize, rng: &mut Rng) -> Result<Episode> {
    if n_shot == 0 || n_query == 0 {
        return Err(Error::invalid("episode shot and query counts must be at least 1"));
    }
    let slots = sample_classes(pool.len(), n_way, rng)?;
    let mut ep = Episode {
        classes: Vec::with_capacity(n_way),
        support: Vec::with_capacity(n_way),
        query: Vec::with_capacity(n_way),
    };
    for s in slots {
        let m = pool.members(s);
        let (sup, qry) = split_class(m, n_shot, n_query, rng);
        ep.classes.push(pool.classes()[s]);
        ep.support.push(sup);
        ep.query.push(qry);
    }
    Ok(ep)
}

fn split_class(m: &[usize], n_shot: usize, n_query: usize, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let len = m.len();
    if len >= n_shot + n_query {
        let pick = index::sample(rng, len, n_shot + n_query).into_vec();
        let sup = pick[..n_shot].iter().map(|&i| m[i]).collect();
        let qry = pick[n_shot..].iter().map(|&i| m[i]).collect();
        return (sup, qry);
    }
    if len <= n_shot {
        let mut sup: Vec<usize> = index::sample(rng, len, len).into_iter().map(|i| m[i]).collect();
        while sup.len() < n_shot {
            sup.push(m[rng.random_range(0..len)]);
        }
        let qry = (0..n_query).map(|_| m[rng.random_range(0..len)]).collect();
        return (sup, qry);
    }
    let order = index::sample(rng, len, len).into_vec();
    let sup = order[..n_shot].iter().map(|&i| m[i]).collect();
    let rest: Vec<usize> = order[n_shot..].iter().map(|&i| m[i]).collect();
    let mut qry = rest.clone();
    while qry.len() < n_query {
        qry.push(rest[rng.random_range(0..rest.len())]);
    }
    (sup, qry)
}

/// Picks `n_way` classes of the pool and `n_query` samples of each: without
/// replacement when the class is large enough, otherwise every member once
/// followed by draws with replacement. Returns the chosen classes and the
/// sample indices grouped by class.
pub fn sample_query_set(pool: &ClassPool, n_way: usize, n_query: usize, rng: &mut Rng) -> Result<(Vec<usize>, Vec<Vec<usize>>)> {
    if n_query == 0 {
        return Err(Error::invalid("query count must be at least 1"));
    }
    let slots = sample_classes(pool.len(), n_way, rng)?;
    let mut classes = Vec::with_capacity(n_way);
    let mut groups = Vec::with_capacity(n_way);
    for s in slots {
        let m = pool.members(s);
        let take = n_query.min(m.len());
        let mut g: Vec<usize> = index::sample(rng, m.len(), take).into_iter().map(|i| m[i]).collect();
        while g.len() < n_query {
            g.push(m[rng.random_range(0..m.len())]);
        }
        classes.push(pool.classes()[s]);
        groups.push(g);
    }
    Ok((classes, groups))
}

/// Averaging matrix `[k, n]` mapping grouped rows to their class means.
fn averaging_matrix(groups: &[usize], k: usize) -> Result<Array> {
    let mut counts = vec![0usize; k];
    for &c in groups {
        if c >= k {
            return Err(Error::invalid(format!("support group {c} out of range for {k} classes")));
        }
        counts[c] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::invalid(format!("support class {c} is empty")));
    }
    let mut m = Array::zeros(&[k, groups.len()]);
    for (i, &c) in groups.iter().enumerate() {
        m.set(c, i, 1.0 / counts[c] as f64);
    }
    Ok(m)
}

/// Class prototypes `[k, d]`: the mean of the embedded support rows of each
/// group, where `groups[i] < k` is the class position of row `i`.
pub fn compute_prototypes(g: &mut Graph, embedded: Tensor, groups: &[usize], k: usize) -> Result<Tensor> {
    if g.value(embedded).rows() != groups.len() {
        return Err(Error::invalid("one group per support row is required"));
    }
    let m = g.constant(averaging_matrix(groups, k)?);
    g.matmul(m, embedded)
}

/// Log-softmax over prototypes of the negative squared Euclidean distance,
/// one row per query.
pub fn pn_log_probs(g: &mut Graph, queries: Tensor, prototypes: Tensor) -> Result<Tensor> {
    if g.value(prototypes).rows() < 2 {
        return Err(Error::invalid("at least two prototypes are required"));
    }
    let d = g.sq_dist(queries, prototypes)?;
    let neg = g.neg(d);
    g.log_softmax_rows(neg)
}

/// Mean negative log-probability of the true class positions `targets`.
pub fn nll(g: &mut Graph, log_probs: Tensor, targets: &[usize]) -> Result<Tensor> {
    let (n, k) = g.value(log_probs).require_matrix("nll")?;
    if targets.len() != n {
        return Err(Error::invalid("one target per query row is required"));
    }
    let mut mask = Array::zeros(&[n, k]);
    for (i, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::invalid(format!("target {t} out of range for {k} classes")));
        }
        mask.set(i, t, 1.0);
    }
    let mask = g.constant(mask);
    let picked = g.mul(log_probs, mask)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / n as f64))
}

/// Episodic Prototypical Network loss. Support and query rows are raw
/// features on `g`; gradients flow into both and into the bound network.
pub fn pn_loss(
    g: &mut Graph,
    pn: &BoundFfnn,
    support: Tensor,
    support_groups: &[usize],
    query: Tensor,
    query_groups: &[usize],
    way: usize,
) -> Result<Tensor> {
    let es = pn.forward(g, support)?;
    let protos = compute_prototypes(g, es, support_groups, way)?;
    let eq = pn.forward(g, query)?;
    let lp = pn_log_probs(g, eq, protos)?;
    nll(g, lp, query_groups)
}

/// Plain-array prototypes keyed by global class id.
#[derive(Debug, Clone, PartialEq)]
pub struct Prototypes {
    pub classes: Vec<usize>,
    pub centers: Array,
}

impl Prototypes {
    /// Nearest-prototype class for each row of already embedded `queries`.
    /// Ties go to the class listed first.
    pub fn classify_embedded(&self, queries: &Array) -> Result<Vec<usize>> {
        let d = queries.cols();
        if d != self.centers.cols() {
            return Err(Error::Shape {
                op: "classify",
                lhs: queries.shape().to_vec(),
                rhs: self.centers.shape().to_vec(),
            });
        }
        Ok((0..queries.rows())
            .map(|r| {
                let q = queries.row(r);
                let mut best = (f64::INFINITY, 0);
                for k in 0..self.classes.len() {
                    let dist: f64 = q.iter().zip(self.centers.row(k)).map(|(a, b)| (a - b) * (a - b)).sum();
                    if dist < best.0 {
                        best = (dist, k);
                    }
                }
                self.classes[best.1]
            })
            .collect())
    }
}

/// Episode-shape hyperparameters plus a learning rate and episode count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodicConfig {
    pub lr: f64,
    pub episodes: usize,
    pub n_way: usize,
    pub n_shot: usize,
    pub n_query: usize,
}

/// Number of fine-tuning episodes on synthetic unseen-class data.
pub const FINETUNE_EPISODES: usize = 25;

/// Episodic pre-training on real samples of the pool's classes. Returns the
/// loss of each episode.
pub fn pretrain_protonet(
    pn: &mut ProtoNet,
    features: &Array,
    pool: &ClassPool,
    config: &EpisodicConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = stream_rng(seed, stream::PRETRAIN);
    let mut tr = Trainable::new(pn.net.clone(), AdamConfig::with_lr(config.lr), "protonet");
    let mut losses = Vec::with_capacity(config.episodes);
    for it in 0..config.episodes {
        let ep = sample_episode(pool, config.n_way, config.n_shot, config.n_query, &mut rng)?;
        let (si, sg) = ep.support_flat();
        let (qi, qg) = ep.query_flat();
        let mut g = Graph::new();
        let bound = tr.net.bind(&mut g, true);
        let s = g.constant(features.select_rows(&si));
        let q = g.constant(features.select_rows(&qi));
        let loss = pn_loss(&mut g, &bound, s, &sg, q, &qg, ep.way())?;
        let value = g.item(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                what: "prototypical network pre-training".into(),
            });
        }
        let grads = g.gradients(loss, &bound.params())?;
        tr.update(grads)?;
        losses.push(value);
    }
    pn.net = tr.net;
    Ok(losses)
}

/// Fine-tunes on episodes whose support and query both come from the
/// generator, over `classes`. The way is capped at the number of classes.
pub fn finetune_protonet(
    pn: &mut ProtoNet,
    backbone: &Backbone,
    attributes: &Array,
    classes: &[usize],
    config: &EpisodicConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    let way = config.n_way.min(classes.len());
    if way < 2 {
        return Err(Error::invalid("fine-tuning needs at least two classes"));
    }
    let mut rng = stream_rng(seed, stream::FINETUNE);
    let mut tr = Trainable::new(pn.net.clone(), AdamConfig::with_lr(config.lr), "protonet");
    let mut losses = Vec::with_capacity(config.episodes);
    for it in 0..config.episodes {
        let chosen: Vec<usize> = sample_classes(classes.len(), way, &mut rng)?
            .into_iter()
            .map(|s| classes[s])
            .collect();
        let (xs, _) = generate(backbone, attributes, &chosen, config.n_shot, &mut rng)?;
        let (xq, _) = generate(backbone, attributes, &chosen, config.n_query, &mut rng)?;
        let sg: Vec<usize> = (0..way).flat_map(|k| std::iter::repeat_n(k, config.n_shot)).collect();
        let qg: Vec<usize> = (0..way).flat_map(|k| std::iter::repeat_n(k, config.n_query)).collect();
        let mut g = Graph::new();
        let bound = tr.net.bind(&mut g, true);
        let s = g.constant(xs);
        let q = g.constant(xq);
        let loss = pn_loss(&mut g, &bound, s, &sg, q, &qg, way)?;
        let value = g.item(loss);
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss {
                iteration: it,
                what: "prototypical network fine-tuning".into(),
            });
        }
        let grads = g.gradients(loss, &bound.params())?;
        tr.update(grads)?;
        losses.push(value);
    }
    pn.net = tr.net;
    Ok(losses)
}

/// Mean query accuracy of `pn` over `episodes` freshly sampled episodes.
#[allow(clippy::too_many_arguments)]
pub fn episodic_accuracy(
    pn: &ProtoNet,
    features: &Array,
    pool: &ClassPool,
    n_way: usize,
    n_shot: usize,
    n_query: usize,
    episodes: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for _ in 0..episodes {
        let ep = sample_episode(pool, n_way, n_shot, n_query, rng)?;
        let (si, sg) = ep.support_flat();
        let (qi, qg) = ep.query_flat();
        let es = pn.embed(&features.select_rows(&si))?;
        let centers = averaging_matrix(&sg, ep.way())?.matmul(&es)?;
        let protos = Prototypes {
            classes: (0..ep.way()).collect(),
            centers,
        };
        let pred = protos.classify_embedded(&pn.embed(&features.select_rows(&qi))?)?;
        correct += pred.iter().zip(&qg).filter(|(p, t)| p == t).count();
        total += qg.len();
    }
    Ok(correct as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Layer};
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn identity_net(d: usize) -> Ffnn {
        Ffnn::new(vec![Layer::new(Array::identity(d), Array::zeros(&[d]), Activation::Linear).unwrap()]).unwrap()
    }

    fn pool_of(sizes: &[usize]) -> (Vec<u32>, ClassPool) {
        let mut labels = Vec::new();
        for (c, &n) in sizes.iter().enumerate() {
            labels.extend(std::iter::repeat_n(c as u32, n));
        }
        let classes: Vec<usize> = (0..sizes.len()).collect();
        let pool = ClassPool::new(&labels, |_| true, &classes).unwrap();
        (labels, pool)
    }

    fn check_invariants(ep: &Episode, labels: &[u32], way: usize, shot: usize, query: usize, disjoint: bool) {
        assert_eq!(ep.classes.len(), way);
        assert_eq!(ep.classes.iter().collect::<HashSet<_>>().len(), way);
        assert_eq!(ep.support.len(), way);
        assert_eq!(ep.query.len(), way);
        for k in 0..way {
            assert_eq!(ep.support[k].len(), shot);
            assert_eq!(ep.query[k].len(), query);
            for &i in ep.support[k].iter().chain(&ep.query[k]) {
                assert_eq!(labels[i] as usize, ep.classes[k]);
            }
            if disjoint {
                let s: HashSet<_> = ep.support[k].iter().collect();
                assert!(ep.query[k].iter().all(|i| !s.contains(i)));
            }
        }
    }

    #[test]
    fn ten_classes_five_way() {
        let (labels, pool) = pool_of(&[20; 10]);
        let ep = sample_episode(&pool, 5, 2, 3, &mut stream_rng(1, 0)).unwrap();
        check_invariants(&ep, &labels, 5, 2, 3, true);
    }

    #[test]
    fn exact_size_class_uses_every_example_once() {
        let (_, pool) = pool_of(&[15, 15]);
        let ep = sample_episode(&pool, 2, 5, 10, &mut stream_rng(2, 0)).unwrap();
        for k in 0..2 {
            let mut all: Vec<usize> = ep.support[k].iter().chain(&ep.query[k]).copied().collect();
            all.sort();
            let base = ep.classes[k] * 15;
            assert_eq!(all, (base..base + 15).collect::<Vec<_>>());
        }
    }

    #[test]
    fn small_class_tops_up_query_and_stays_disjoint() {
        let (labels, pool) = pool_of(&[8, 30, 7]);
        for seed in 0..50 {
            let ep = sample_episode(&pool, 3, 5, 10, &mut stream_rng(seed, 0)).unwrap();
            check_invariants(&ep, &labels, 3, 5, 10, true);
        }
    }

    #[test]
    fn tiny_class_still_fills_the_episode() {
        let (labels, pool) = pool_of(&[2, 9]);
        let ep = sample_episode(&pool, 2, 5, 4, &mut stream_rng(3, 0)).unwrap();
        check_invariants(&ep, &labels, 2, 5, 4, false);
    }

    #[test]
    fn way_larger_than_pool_is_rejected() {
        let (_, pool) = pool_of(&[5; 4]);
        assert!(matches!(
            sample_episode(&pool, 5, 1, 1, &mut stream_rng(1, 0)),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn pool_rejects_empty_class() {
        assert!(ClassPool::new(&[0, 0, 2], |_| true, &[0, 1]).is_err());
    }

    #[test]
    fn prototype_of_single_example_is_its_embedding() {
        let pn = ProtoNet::new(3, 1, 5);
        let x = Array::from_rows(&[[0.2, 0.7, 0.1]]).unwrap();
        let mut g = Graph::new();
        let bound = pn.net.bind(&mut g, false);
        let xt = g.constant(x.clone());
        let e = bound.forward(&mut g, xt).unwrap();
        let p = compute_prototypes(&mut g, e, &[0], 1).unwrap();
        assert_eq!(g.value(p), &pn.embed(&x).unwrap());
    }

    #[test]
    fn identity_prototype_is_arithmetic_mean() {
        let net = identity_net(2);
        let mut g = Graph::new();
        let bound = net.bind(&mut g, false);
        let x = g.constant(Array::from_rows(&[[1.0, 1.0], [3.0, 3.0]]).unwrap());
        let e = bound.forward(&mut g, x).unwrap();
        let p = compute_prototypes(&mut g, e, &[0, 0], 1).unwrap();
        assert_eq!(g.value(p).data(), &[2.0, 2.0]);
    }

    #[test]
    fn empty_support_class_is_rejected() {
        let mut g = Graph::new();
        let x = g.constant(Array::zeros(&[2, 2]));
        assert!(compute_prototypes(&mut g, x, &[0, 0], 2).is_err());
    }

    #[test]
    fn permuting_support_keeps_prototypes() {
        let mut rng = stream_rng(9, 0);
        let x = crate::rng::standard_normal(&mut rng, &[12, 4]);
        let groups: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let perm: Vec<usize> = index::sample(&mut rng, 12, 12).into_vec();
        let xp = x.select_rows(&perm);
        let gp: Vec<usize> = perm.iter().map(|&i| groups[i]).collect();
        let mut g = Graph::new();
        let a = g.constant(x);
        let b = g.constant(xp);
        let pa = compute_prototypes(&mut g, a, &groups, 3).unwrap();
        let pb = compute_prototypes(&mut g, b, &gp, 3).unwrap();
        for (u, v) in g.value(pa).data().iter().zip(g.value(pb).data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    fn log_probs(q: &Array, p: &Array) -> Array {
        let mut g = Graph::new();
        let qt = g.constant(q.clone());
        let pt = g.constant(p.clone());
        let lp = pn_log_probs(&mut g, qt, pt).unwrap();
        g.value(lp).clone()
    }

    #[test]
    fn equidistant_query_is_uniform() {
        let p = Array::from_rows(&[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]]).unwrap();
        let lp = log_probs(&Array::zeros(&[1, 2]), &p);
        for &v in lp.data() {
            assert!((v.exp() - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn query_on_a_prototype_picks_it() {
        let s = 10f64.sqrt();
        let p = Array::from_rows(&[[s, 0.0], [0.0, 0.0], [0.0, s]]).unwrap();
        let lp = log_probs(&Array::zeros(&[1, 2]), &p);
        assert_eq!(lp.argmax_row(0), 1);
    }

    #[test]
    fn fewer_than_two_prototypes_rejected() {
        let mut g = Graph::new();
        let q = g.constant(Array::zeros(&[1, 2]));
        let p = g.constant(Array::zeros(&[1, 2]));
        assert!(pn_log_probs(&mut g, q, p).is_err());
    }

    #[test]
    fn uniform_log_probs_give_ln_k_loss() {
        let mut g = Graph::new();
        let lp = g.constant(Array::full(&[3, 5], -(5f64).ln()));
        let l = nll(&mut g, lp, &[0, 3, 4]).unwrap();
        assert!((g.item(l) - 5f64.ln()).abs() < 1e-15);
    }

    fn loop_probs(q: &Array, p: &Array) -> Vec<Vec<f64>> {
        (0..q.rows())
            .map(|i| {
                let neg: Vec<f64> = (0..p.rows())
                    .map(|k| -q.row(i).iter().zip(p.row(k)).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                    .collect();
                let m = neg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = neg.iter().map(|v| (v - m).exp()).sum();
                neg.iter().map(|v| (v - m).exp() / z).collect()
            })
            .collect()
    }

    fn episode_fixture(seed: u64) -> (ProtoNet, Array, Vec<usize>, Array, Vec<usize>) {
        let mut rng = stream_rng(seed, 0);
        let pn = ProtoNet::new(4, 1, seed);
        let s = crate::rng::uniform(&mut rng, &[6, 4], 0.0, 1.0);
        let q = crate::rng::uniform(&mut rng, &[9, 4], 0.0, 1.0);
        (pn, s, vec![0, 0, 1, 1, 2, 2], q, vec![0, 1, 2, 0, 1, 2, 0, 1, 2])
    }

    fn episode_loss(pn: &ProtoNet, s: &Array, sg: &[usize], q: &Array, qg: &[usize]) -> f64 {
        let mut g = Graph::new();
        let b = pn.net.bind(&mut g, false);
        let st = g.constant(s.clone());
        let qt = g.constant(q.clone());
        let l = pn_loss(&mut g, &b, st, sg, qt, qg, 3).unwrap();
        g.item(l)
    }

    #[test]
    fn support_gradient_matches_finite_differences() {
        let (pn, s, sg, q, qg) = episode_fixture(4);
        let mut g = Graph::new();
        let b = pn.net.bind(&mut g, false);
        let st = g.param(s.clone());
        let qt = g.constant(q.clone());
        let l = pn_loss(&mut g, &b, st, &sg, qt, &qg, 3).unwrap();
        let grad = g.gradients(l, &[st]).unwrap().remove(0);
        let h = 1e-6;
        let mut num = Array::zeros(s.shape());
        for k in 0..s.len() {
            let mut p = s.clone();
            p.data_mut()[k] += h;
            let mut m = s.clone();
            m.data_mut()[k] -= h;
            num.data_mut()[k] = (episode_loss(&pn, &p, &sg, &q, &qg) - episode_loss(&pn, &m, &sg, &q, &qg)) / (2.0 * h);
        }
        let diff: f64 = grad.data().iter().zip(num.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let rel = diff / grad.sq_norm().sqrt().max(num.sq_norm().sqrt());
        assert!(rel < 1e-4, "relative error {rel}");
    }

    #[test]
    fn small_step_along_negative_gradient_decreases_loss() {
        let (pn, s, sg, q, qg) = episode_fixture(5);
        let mut g = Graph::new();
        let b = pn.net.bind(&mut g, true);
        let st = g.constant(s.clone());
        let qt = g.constant(q.clone());
        let l = pn_loss(&mut g, &b, st, &sg, qt, &qg, 3).unwrap();
        let before = g.item(l);
        let grads = g.gradients(l, &b.params()).unwrap();
        let mut stepped = pn.clone();
        for (p, gr) in stepped.net.params_mut().into_iter().zip(&grads) {
            for (w, d) in p.data_mut().iter_mut().zip(gr.data()) {
                *w -= 1e-6 * d;
            }
        }
        assert!(episode_loss(&stepped, &s, &sg, &q, &qg) < before);
    }

    #[test]
    fn pretraining_separable_classes_drives_loss_down() {
        // Three well separated clusters in 4 dimensions.
        let mut rng = stream_rng(11, 0);
        let centers = [[0.1, 0.1, 0.9, 0.9], [0.9, 0.1, 0.1, 0.9], [0.5, 0.9, 0.5, 0.1]];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..20 {
                let noise = crate::rng::standard_normal(&mut rng, &[4]);
                rows.push(center.iter().zip(noise.data()).map(|(m, e)| m + 0.02 * e).collect::<Vec<_>>());
                labels.push(c as u32);
            }
        }
        let x = Array::from_rows(&rows).unwrap();
        let pool = ClassPool::new(&labels, |_| true, &[0, 1, 2]).unwrap();
        let mut pn = ProtoNet::new(4, 1, 3);
        let cfg = EpisodicConfig {
            lr: 1e-2,
            episodes: 200,
            n_way: 3,
            n_shot: 3,
            n_query: 5,
        };
        let losses = pretrain_protonet(&mut pn, &x, &pool, &cfg, 7).unwrap();
        assert_eq!(losses.len(), 200);
        let tail = losses[190..].iter().sum::<f64>() / 10.0;
        assert!(tail < 0.01, "final loss {tail}");
    }

    #[test]
    fn finetune_with_zero_rate_is_a_no_op() {
        use crate::backbones::{Architecture, BackboneKind};
        let arch = Architecture {
            generator_hidden: vec![5],
            encoder_hidden: vec![5],
            critic_hidden: vec![5],
        };
        let bb = Backbone::new(BackboneKind::Vae, 2, 3, &arch, 1);
        let attrs = Array::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap();
        let mut pn = ProtoNet::new(3, 1, 2);
        let before = pn.clone();
        let cfg = EpisodicConfig {
            lr: 0.0,
            episodes: FINETUNE_EPISODES,
            n_way: 5,
            n_shot: 2,
            n_query: 2,
        };
        let losses = finetune_protonet(&mut pn, &bb, &attrs, &[0, 1, 2], &cfg, 3).unwrap();
        assert_eq!(losses.len(), 25);
        assert_eq!(pn, before);
    }

    proptest! {
        #[test]
        fn probabilities_match_plain_loop(q in prop::collection::vec(-3.0..3.0f64, 6),
                                          p in prop::collection::vec(-3.0..3.0f64, 8)) {
            let q = Array::from_vec(vec![3, 2], q).unwrap();
            let p = Array::from_vec(vec![4, 2], p).unwrap();
            let lp = log_probs(&q, &p);
            let oracle = loop_probs(&q, &p);
            for i in 0..3 {
                let total: f64 = (0..4).map(|k| lp.get(i, k).exp()).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
                for k in 0..4 {
                    prop_assert!((lp.get(i, k).exp() - oracle[i][k]).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn shift_invariance(d in prop::collection::vec(0.0..20.0f64, 5), c in -50.0..50.0f64) {
            let mut g = Graph::new();
            let a = g.constant(Array::from_vec(vec![1, 5], d.iter().map(|v| -v).collect()).unwrap());
            let b = g.constant(Array::from_vec(vec![1, 5], d.iter().map(|v| -(v + c)).collect()).unwrap());
            let la = g.log_softmax_rows(a).unwrap();
            let lb = g.log_softmax_rows(b).unwrap();
            for (x, y) in g.value(la).data().iter().zip(g.value(lb).data()) {
                prop_assert!((x.exp() - y.exp()).abs() < 1e-12);
            }
        }

        #[test]
        fn argmax_is_nearest_prototype(q in prop::collection::vec(-3.0..3.0f64, 10),
                                       p in prop::collection::vec(-3.0..3.0f64, 6)) {
            let q = Array::from_vec(vec![5, 2], q).unwrap();
            let p = Array::from_vec(vec![3, 2], p).unwrap();
            let lp = log_probs(&q, &p);
            let protos = Prototypes { classes: vec![0, 1, 2], centers: p.clone() };
            let nearest = protos.classify_embedded(&q).unwrap();
            for i in 0..5 {
                let dists: Vec<f64> = (0..3)
                    .map(|k| q.row(i).iter().zip(p.row(k)).map(|(a, b)| (a - b).powi(2)).sum())
                    .collect();
                let best = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                // ties can legitimately resolve either way
                prop_assume!(dists.iter().filter(|&&d| (d - best).abs() < 1e-12).count() == 1);
                prop_assert_eq!(lp.argmax_row(i), nearest[i]);
            }
        }

        #[test]
        fn identity_one_shot_is_nearest_neighbour(s in prop::collection::vec(-3.0..3.0f64, 8),
                                                  q in prop::collection::vec(-3.0..3.0f64, 6)) {
            let support = Array::from_vec(vec![4, 2], s).unwrap();
            let queries = Array::from_vec(vec![3, 2], q).unwrap();
            let net = identity_net(2);
            let mut g = Graph::new();
            let b = net.bind(&mut g, false);
            let st = g.constant(support.clone());
            let e = b.forward(&mut g, st).unwrap();
            let p = compute_prototypes(&mut g, e, &[0, 1, 2, 3], 4).unwrap();
            let protos = Prototypes { classes: vec![0, 1, 2, 3], centers: g.value(p).clone() };
            let pred = protos.classify_embedded(&queries).unwrap();
            for i in 0..3 {
                let mut best = (f64::INFINITY, 0);
                for k in 0..4 {
                    let d: f64 = queries.row(i).iter().zip(support.row(k)).map(|(a, b)| (a - b).powi(2)).sum();
                    if d < best.0 { best = (d, k); }
                }
                prop_assert_eq!(pred[i], best.1);
            }
        }
    }
}
