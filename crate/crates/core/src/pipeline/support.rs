use rand::seq::index;

use crate::autodiff::Array;
use crate::backbones::{generate_rows, Backbone};
use crate::config::{Config, SeenSource};
use crate::data::{Dataset, Mode};
use crate::error::{Error, Result};
use crate::fsl::Prototypes;
use crate::rng::{stream, stream_rng};

/// Where the support examples of one class come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SupportSource {
    /// This many generated examples.
    Synthetic(usize),
    /// These training samples.
    Real(Vec<usize>),
}

/// The test-time support set, described per class. Synthetic examples are
/// produced on demand, chunk by chunk, always in the same order, so every
/// consumer sees the same samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TestSupport {
    pub classes: Vec<usize>,
    pub sources: Vec<SupportSource>,
    seed: u64,
    chunk: usize,
}

/// Unseen classes get `n_S_test` generated examples each. In the generalized
/// setting seen classes are added with `m_S` examples each, either generated
/// or drawn uniformly without replacement from their training samples (all
/// of them when a class has fewer than `m_S`).
pub fn build_test_support(ds: &Dataset, cfg: &Config) -> Result<TestSupport> {
    let mut classes = Vec::new();
    let mut sources = Vec::new();
    let mut rng = stream_rng(cfg.seed, stream::REAL_SUPPORT);
    let train = ds.train_indices();
    for c in 0..ds.num_classes() {
        if ds.unseen[c] {
            classes.push(c);
            sources.push(SupportSource::Synthetic(cfg.n_shot_test));
        } else if cfg.mode == Mode::Gzsl {
            classes.push(c);
            sources.push(match cfg.seen_source {
                SeenSource::Synthetic => SupportSource::Synthetic(cfg.m_shot),
                SeenSource::Real => {
                    let members: Vec<usize> = train.iter().copied().filter(|&i| ds.labels[i] as usize == c).collect();
                    if members.is_empty() {
                        return Err(Error::InvalidSplit(format!(
                            "seen class {c} has no training samples for a real support"
                        )));
                    }
                    let k = cfg.m_shot.min(members.len());
                    let mut pick: Vec<usize> = index::sample(&mut rng, members.len(), k)
                        .into_iter()
                        .map(|i| members[i])
                        .collect();
                    pick.sort_unstable();
                    SupportSource::Real(pick)
                }
            });
        }
    }
    Ok(TestSupport {
        classes,
        sources,
        seed: cfg.seed,
        chunk: cfg.eval_chunk.max(1),
    })
}

/// Running mean of a stream of rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningMean {
    count: usize,
    mean: Vec<f64>,
}

impl RunningMean {
    pub fn new(width: usize) -> Self {
        RunningMean {
            count: 0,
            mean: vec![0.0; width],
        }
    }

    pub fn push_rows(&mut self, rows: &Array) {
        for r in 0..rows.rows() {
            self.count += 1;
            let n = self.count as f64;
            for (m, &x) in self.mean.iter_mut().zip(rows.row(r)) {
                *m += (x - *m) / n;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
}

impl TestSupport {
    /// Total number of support examples.
    pub fn len(&self) -> usize {
        self.sources
            .iter()
            .map(|s| match s {
                SupportSource::Synthetic(n) => *n,
                SupportSource::Real(v) => v.len(),
            })
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Visits the support in chunks of at most `chunk` rows as
    /// `(class position, features)`.
    fn for_each_chunk(
        &self,
        backbone: &Backbone,
        ds: &Dataset,
        mut visit: impl FnMut(usize, Array) -> Result<()>,
    ) -> Result<()> {
        let mut rng = stream_rng(self.seed, stream::TEST_SUPPORT);
        for (k, (&c, src)) in self.classes.iter().zip(&self.sources).enumerate() {
            match src {
                SupportSource::Synthetic(n) => {
                    let attr = ds.attributes.select_rows(&[c]);
                    let mut left = *n;
                    while left > 0 {
                        let m = left.min(self.chunk);
                        let attrs = attr.select_rows(&vec![0; m]);
                        visit(k, generate_rows(backbone, &attrs, &mut rng)?)?;
                        left -= m;
                    }
                }
                SupportSource::Real(idx) => {
                    for part in idx.chunks(self.chunk) {
                        visit(k, ds.features.select_rows(part))?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Class prototypes under `embed`, averaged with a running mean so the
    /// full support never has to be held in memory.
    pub fn prototypes(
        &self,
        backbone: &Backbone,
        ds: &Dataset,
        embed: impl Fn(&Array) -> Result<Array>,
    ) -> Result<Prototypes> {
        let width = embed(&Array::zeros(&[1, ds.feat_dim()]))?.cols();
        let mut means: Vec<RunningMean> = self.classes.iter().map(|_| RunningMean::new(width)).collect();
        self.for_each_chunk(backbone, ds, |k, x| {
            means[k].push_rows(&embed(&x)?);
            Ok(())
        })?;
        if let Some(k) = means.iter().position(|m| m.count() == 0) {
            return Err(Error::invalid(format!("support class {} is empty", self.classes[k])));
        }
        let data = means.iter().flat_map(|m| m.mean().iter().copied()).collect();
        Ok(Prototypes {
            classes: self.classes.clone(),
            centers: Array::from_vec(vec![self.classes.len(), width], data)?,
        })
    }

    /// The full support as `(features, class ids)`.
    pub fn materialize(&self, backbone: &Backbone, ds: &Dataset) -> Result<(Array, Vec<usize>)> {
        let mut parts = Vec::new();
        let mut labels = Vec::new();
        self.for_each_chunk(backbone, ds, |k, x| {
            labels.extend(std::iter::repeat_n(self.classes[k], x.rows()));
            parts.push(x);
            Ok(())
        })?;
        let refs: Vec<&Array> = parts.iter().collect();
        Ok((Array::vstack(&refs)?, labels))
    }
}
