use rand::seq::SliceRandom;

use crate::autodiff::{Array, Graph};
use crate::error::{Error, Result};
use crate::fsl::nll;
use crate::nn::{init_default, AdamConfig, Checkpoint, Ffnn, Trainable};
use crate::rng::{stream, stream_rng};

/// Hyperparameters of [`train_linear`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

/// Affine layer followed by a softmax over `classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub classes: Vec<usize>,
    pub layer: Ffnn,
}

impl LinearClassifier {
    /// Predicted class id of every row.
    pub fn predict(&self, x: &Array) -> Result<Vec<usize>> {
        let logits = self.layer.predict(x)?;
        Ok((0..logits.rows()).map(|r| self.classes[logits.argmax_row(r)]).collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_ffnn("linear", &self.layer);
        ck.insert(
            "linear.classes",
            Array::vector(self.classes.iter().map(|&c| c as f64).collect()),
        );
        ck
    }
}

/// Fits a softmax classifier to `(x, labels)` with minibatch Adam on the
/// cross-entropy. The minibatch order is reshuffled every epoch.
pub fn train_linear(x: &Array, labels: &[usize], cfg: &LinearConfig) -> Result<LinearClassifier> {
    if x.rows() != labels.len() || labels.is_empty() {
        return Err(Error::invalid("one label per training row is required"));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::invalid("a linear classifier needs at least two classes"));
    }
    let target: Vec<usize> = labels
        .iter()
        .map(|l| classes.binary_search(l).expect("label is listed"))
        .collect();
    let mut rng = stream_rng(cfg.seed, stream::LINEAR_HEAD);
    let layer = Ffnn::new(vec![init_default(&[x.cols(), classes.len()], &mut rng)])?;
    let mut tr = Trainable::new(layer, AdamConfig::with_lr(cfg.lr), "linear");
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let mut g = Graph::new();
            let net = tr.net.bind(&mut g, true);
            let xb = g.constant(x.select_rows(chunk));
            let logits = net.forward(&mut g, xb)?;
            let lp = g.log_softmax_rows(logits)?;
            let tb: Vec<usize> = chunk.iter().map(|&i| target[i]).collect();
            let loss = nll(&mut g, lp, &tb)?;
            if !g.item(loss).is_finite() {
                return Err(Error::NonFiniteLoss {
                    iteration: epoch,
                    what: "linear classifier loss".into(),
                });
            }
            let grads = g.gradients(loss, &net.params())?;
            tr.update(grads)?;
        }
    }
    Ok(LinearClassifier { classes, layer: tr.net })
}
