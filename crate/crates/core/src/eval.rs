//! Evaluation: nearest-neighbour classification with the similarity
//! classifier, and supervised fine-tuning of a linear classifier.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Matrix, Tape, LOG_FLOOR};
use crate::config::FineTuneConfig;
use crate::encoder::{embed, encode_first_projection, EncoderParams};
use crate::error::{PawsError, Result};
use crate::objective::{similarity_classifier, SupportBatch};
use crate::optim::OptimizerState;
use crate::support::{smoothed_labels, LabeledPool};
use crate::views::{augment_global, AugmentConfig};

fn check_dim(params: &EncoderParams, x: &Matrix, what: &str) -> Result<()> {
    if x.cols() != params.config.input_dim {
        return Err(PawsError::Format(format!(
            "{what} has {} features but the checkpoint expects {}",
            x.cols(),
            params.config.input_dim
        )));
    }
    Ok(())
}

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Similarity-classifier probabilities of `inputs` against the whole labeled pool.
pub fn nn_probabilities(params: &EncoderParams, pool: &LabeledPool, inputs: &Matrix, tau: f64) -> Result<Matrix> {
    check_dim(params, inputs, "test set")?;
    check_dim(params, &pool.inputs, "labeled pool")?;
    let z = embed(params, inputs, false)?;
    let zs = embed(params, &pool.inputs, false)?;
    let mut tape = Tape::new();
    let zv = tape.constant(z);
    let sv = tape.constant(zs);
    let support = SupportBatch::new(&tape, sv, smoothed_labels(&pool.labels, pool.num_classes, 0.0)?)?;
    let p = similarity_classifier(&mut tape, zv, &support, tau)?;
    Ok(tape.value(p).clone())
}

/// Predicted classes; ties go to the lowest class index.
pub fn nn_predict(params: &EncoderParams, pool: &LabeledPool, inputs: &Matrix, tau: f64) -> Result<Vec<usize>> {
    let p = nn_probabilities(params, pool, inputs, tau)?;
    Ok((0..p.rows()).map(|r| p.argmax_row(r)).collect())
}

/// Test accuracy of the similarity classifier with the full labeled pool as support.
pub fn eval_nn(params: &EncoderParams, pool: &LabeledPool, inputs: &Matrix, labels: &[usize], tau: f64) -> Result<f64> {
    if inputs.rows() != labels.len() {
        return Err(PawsError::Shape(format!("{} test inputs but {} labels", inputs.rows(), labels.len())));
    }
    Ok(accuracy(&nn_predict(params, pool, inputs, tau)?, labels))
}

/// Linear classifier on the first projection layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub encoder: EncoderParams,
    /// features × classes
    pub weight: Matrix,
    pub bias: Matrix,
}

impl LinearProbe {
    fn zero(encoder: EncoderParams, classes: usize) -> Self {
        let feat = encoder.config.proj_hidden;
        let feat = if encoder.config.proj_layers > 1 { feat } else { encoder.config.embed_dim };
        Self { encoder, weight: Matrix::zeros(feat, classes), bias: Matrix::zeros(1, classes) }
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars = self.encoder.register_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let h = encode_first_projection(&self.encoder, &vars, xv, &mut tape)?;
        let hw = tape.value(h).matmul(&self.weight)?;
        Ok(Matrix::from_fn(hw.rows(), hw.cols(), |i, k| hw.get(i, k) + self.bias.get(0, k)))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let l = self.logits(x)?;
        Ok((0..l.rows()).map(|r| l.argmax_row(r)).collect())
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> Result<f64> {
        Ok(accuracy(&self.predict(x)?, labels))
    }
}

#[derive(Clone, Debug)]
pub struct FineTuneReport {
    pub probe: LinearProbe,
    pub selected_lr: f64,
    /// Validation accuracy for each grid learning rate, in grid order.
    pub val_accuracy: Vec<f64>,
    pub test_accuracy: f64,
}

/// Splits each class of `pool` into `(train, validation)` index lists.
pub fn validation_split(pool: &LabeledPool, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for c in 0..pool.num_classes {
        let mut idx = pool.class_indices(c).to_vec();
        let n_val = (idx.len() as f64 * fraction).round() as usize;
        if n_val == 0 || n_val >= idx.len() {
            return Err(PawsError::Config(format!(
                "class {c} has {} labeled samples, too few for a {:.0}% validation split",
                idx.len(),
                fraction * 100.0
            )));
        }
        idx.shuffle(&mut rng);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

#[allow(clippy::too_many_arguments)]
fn fine_tune_once(
    encoder: &EncoderParams,
    x: &Matrix,
    y: &[usize],
    classes: usize,
    cfg: &FineTuneConfig,
    augment: &AugmentConfig,
    lr: f64,
    seed: u64,
) -> Result<LinearProbe> {
    let mut probe = LinearProbe::zero(encoder.clone(), classes);
    let mut shapes: Vec<(usize, usize)> = probe.encoder.tensors().iter().map(|t| t.shape()).collect();
    shapes.push(probe.weight.shape());
    shapes.push(probe.bias.shape());
    let mut opt = OptimizerState::new(&shapes, cfg.momentum, 0.0, BTreeSet::new())?;
    let onehot = smoothed_labels(y, classes, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let xb = augment_global(&x.select_rows(chunk), augment, &mut rng);
            let yb = onehot.select_rows(chunk);
            let mut tape = Tape::new();
            let vars = probe.encoder.register(&mut tape);
            let w = tape.param(probe.weight.clone());
            let b = tape.param(probe.bias.clone());
            let xv = tape.constant(xb);
            let h = encode_first_projection(&probe.encoder, &vars, xv, &mut tape)?;
            let hw = tape.matmul(h, w)?;
            let logits = tape.add_row(hw, b)?;
            let p = tape.softmax_rows(logits, 1.0)?;
            let loss = tape.cross_entropy_rows(&yb, p, LOG_FLOOR)?;
            tape.backward(loss)?;
            if !tape.value(loss).item().is_finite() {
                return Err(PawsError::Numerical(format!("fine-tuning loss diverged at lr {lr}")));
            }
            let mut all = vars.flat();
            all.push(w);
            all.push(b);
            let grads: Vec<Matrix> = all.iter().map(|&v| tape.grad(v)).collect();
            let mut params = probe.encoder.tensors_mut();
            params.push(&mut probe.weight);
            params.push(&mut probe.bias);
            opt.step(&mut params, &grads, lr)?;
        }
    }
    Ok(probe)
}

/// Fine-tunes encoder and a zero-initialized linear classifier for each
/// learning rate in the grid; keeps the one with the best validation
/// accuracy (earliest in the grid on ties) and reports its test accuracy.
pub fn fine_tune_linear(
    encoder: &EncoderParams,
    pool: &LabeledPool,
    test_inputs: &Matrix,
    test_labels: &[usize],
    cfg: &FineTuneConfig,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<FineTuneReport> {
    if encoder.config.proj_layers == 0 {
        return Err(PawsError::Config("fine-tuning needs a projection head".into()));
    }
    if cfg.lrs.is_empty() {
        return Err(PawsError::Config("fine-tuning needs at least one learning rate".into()));
    }
    check_dim(encoder, test_inputs, "test set")?;
    check_dim(encoder, &pool.inputs, "labeled pool")?;
    let (train, val) = validation_split(pool, cfg.val_fraction, seed)?;
    let xt = pool.inputs.select_rows(&train);
    let yt: Vec<usize> = train.iter().map(|&i| pool.labels[i]).collect();
    let xv = pool.inputs.select_rows(&val);
    let yv: Vec<usize> = val.iter().map(|&i| pool.labels[i]).collect();
    let mut best: Option<(f64, f64, LinearProbe)> = None;
    let mut val_accuracy = Vec::with_capacity(cfg.lrs.len());
    for &lr in &cfg.lrs {
        let probe = fine_tune_once(encoder, &xt, &yt, pool.num_classes, cfg, augment, lr, seed.wrapping_add(1))?;
        let acc = probe.accuracy(&xv, &yv)?;
        val_accuracy.push(acc);
        if best.as_ref().is_none_or(|(a, _, _)| acc > *a) {
            best = Some((acc, lr, probe));
        }
    }
    let (_, selected_lr, probe) = best.expect("non-empty grid");
    let test_accuracy = probe.accuracy(test_inputs, test_labels)?;
    Ok(FineTuneReport { probe, selected_lr, val_accuracy, test_accuracy })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{labeled_subset, make_blobs};
    use crate::encoder::{init_params, EncoderConfig};

    #[test]
    fn exact_support_point_wins_at_small_tau() {
        let pool =
            LabeledPool::new(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.2]]), vec![0, 1, 2], 3)
                .unwrap();
        let params = init_params(&EncoderConfig::passthrough(2), 0).unwrap();
        let pred = nn_predict(&params, &pool, &pool.inputs, 0.01).unwrap();
        assert_eq!(pred, vec![0, 1, 2]);
        assert!(matches!(nn_predict(&params, &pool, &Matrix::zeros(1, 3), 0.1), Err(PawsError::Format(_))));
    }

    #[test]
    fn zero_epochs_predicts_class_zero() {
        let d = make_blobs(3, 30, 4, 3.0, 0).unwrap();
        let pool = labeled_subset(&d, 15).unwrap();
        let enc = init_params(
            &EncoderConfig { input_dim: 4, hidden_dim: 8, proj_hidden: 8, embed_dim: 4, ..Default::default() },
            1,
        )
        .unwrap();
        let cfg = FineTuneConfig { epochs: 0, lrs: vec![0.1], val_fraction: 0.2, batch_size: 4, momentum: 0.9 };
        let r =
            fine_tune_linear(&enc, &pool, &d.test_inputs, &d.test_labels, &cfg, &AugmentConfig::identity(), 0).unwrap();
        let freq = d.test_labels.iter().filter(|&&y| y == 0).count() as f64 / d.test_labels.len() as f64;
        assert_eq!(r.test_accuracy, freq);
    }

    #[test]
    fn fine_tuning_learns_separated_blobs() {
        let d = make_blobs(3, 60, 4, 4.0, 2).unwrap();
        let pool = labeled_subset(&d, 30).unwrap();
        let enc = init_params(
            &EncoderConfig { input_dim: 4, hidden_dim: 16, proj_hidden: 16, embed_dim: 8, ..Default::default() },
            1,
        )
        .unwrap();
        let cfg = FineTuneConfig { epochs: 30, lrs: vec![0.01, 0.1], val_fraction: 0.2, batch_size: 8, momentum: 0.9 };
        let r =
            fine_tune_linear(&enc, &pool, &d.test_inputs, &d.test_labels, &cfg, &AugmentConfig::identity(), 0).unwrap();
        assert!(r.test_accuracy > 0.8, "{r:?}");
        assert_eq!(r.val_accuracy.len(), 2);

        // selection never looks at test labels
        let mut shuffled = d.test_labels.clone();
        shuffled.rotate_left(1);
        let r2 = fine_tune_linear(&enc, &pool, &d.test_inputs, &shuffled, &cfg, &AugmentConfig::identity(), 0).unwrap();
        assert_eq!(r2.selected_lr, r.selected_lr);
    }

    #[test]
    fn too_small_pool_for_validation() {
        let d = make_blobs(2, 10, 3, 3.0, 0).unwrap();
        let pool = labeled_subset(&d, 2).unwrap();
        assert!(matches!(validation_split(&pool, 0.2, 0), Err(PawsError::Config(_))));
    }
}
