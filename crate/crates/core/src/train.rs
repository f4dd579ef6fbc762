//! The training loop, per-step diagnostics and the metrics log.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Matrix, Tape};
use crate::checkpoint::Checkpoint;
use crate::config::{DataKind, TrainConfig};
use crate::data::{labeled_indices, make_blobs, make_grid, Dataset};
use crate::encoder::{encode, init_params, predict_head, EncoderParams};
use crate::error::{PawsError, Result};
use crate::eval::eval_nn;
use crate::objective::{paws_loss_multicrop, row_entropies, similarity_classifier, SupportBatch};
use crate::optim::{LrSchedule, OptimizerState};
use crate::support::{encode_labels, sample_support, support_views, LabeledPool};
use crate::views::generate_views;

/// Contrast of the grid dataset's class patches.
const GRID_CONTRAST: f64 = 3.0;

/// Dataset, labeled pool and configuration for one run.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: TrainConfig,
    pub data: Dataset,
    pub labeled: LabeledPool,
    /// Label of each training row that belongs to the labeled pool.
    pub train_label_lookup: Vec<Option<usize>>,
}

impl Experiment {
    pub fn prepare(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let d = &config.data;
        let data = match d.kind {
            DataKind::Blobs => make_blobs(d.classes, d.per_class, d.dim, d.separation, d.seed)?,
            DataKind::Grid => make_grid(d.classes, d.per_class, d.grid_height, d.grid_width, GRID_CONTRAST, d.seed)?,
        };
        let idx = labeled_indices(&data, d.label_budget)?;
        let mut train_label_lookup = vec![None; data.train_labels.len()];
        for &i in &idx {
            train_label_lookup[i] = Some(data.train_labels[i]);
        }
        let labels = idx.iter().map(|&i| data.train_labels[i]).collect();
        let labeled = LabeledPool::new(data.train_inputs.select_rows(&idx), labels, d.classes)?;
        Ok(Self { config, data, labeled, train_label_lookup })
    }

    pub fn steps_per_epoch(&self) -> usize {
        (self.data.train_inputs.rows() / self.config.train.batch_size).max(1)
    }

    pub fn schedule(&self) -> LrSchedule {
        self.config.schedule(self.steps_per_epoch())
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let params = init_params(&self.config.encoder(), self.config.model.seed)?;
        TrainState::fresh(params, &self.config)
    }

    /// Nearest-neighbour test accuracy of `params` with the labeled pool as support.
    pub fn nn_accuracy(&self, params: &EncoderParams) -> Result<f64> {
        eval_nn(params, &self.labeled, &self.data.test_inputs, &self.data.test_labels, self.config.paws.tau)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: EncoderParams,
    pub optimizer: OptimizerState,
    /// Steps completed.
    pub step: u64,
}

impl TrainState {
    pub fn fresh(params: EncoderParams, config: &TrainConfig) -> Result<Self> {
        let optimizer = OptimizerState::for_encoder(&params, config.optim.momentum, config.optim.weight_decay)?;
        Ok(Self { params, optimizer, step: 0 })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint { params: self.params.clone(), step: self.step, optimizer: Some(self.optimizer.clone()) }
    }

    pub fn from_checkpoint(c: Checkpoint, config: &TrainConfig) -> Result<Self> {
        if c.params.config != config.encoder() {
            return Err(PawsError::Format("checkpoint encoder does not match the configuration".into()));
        }
        let optimizer = match c.optimizer {
            Some(o) => o,
            None => OptimizerState::for_encoder(&c.params, config.optim.momentum, config.optim.weight_decay)?,
        };
        Ok(Self { params: c.params, optimizer, step: c.step })
    }
}

/// One line of `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    /// 1-based.
    pub epoch: usize,
    /// 1-based count of completed steps.
    pub step: u64,
    pub lr: f64,
    pub total_loss: f64,
    pub paws_consistency: f64,
    /// `H(p̄)` of the averaged sharpened predictions, reported even when the term is off.
    pub me_max_entropy: f64,
    pub entropy_min: f64,
    pub instance_discrimination_loss: Option<f64>,
    pub support_classification_loss: Option<f64>,
    /// Mean over global-view targets of the largest target probability.
    pub mean_target_confidence: f64,
    /// Mean entropy of all view predictions.
    pub prediction_entropy: f64,
    pub nn_accuracy: Option<f64>,
}

pub const METRICS_HEADER: &str = "epoch,step,lr,total_loss,paws_consistency,me_max_entropy,entropy_min,\
instance_discrimination_loss,support_classification_loss,mean_target_confidence,prediction_entropy,nn_accuracy";

fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(fmt17).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            fmt17(self.lr),
            fmt17(self.total_loss),
            fmt17(self.paws_consistency),
            fmt17(self.me_max_entropy),
            fmt17(self.entropy_min),
            opt(self.instance_discrimination_loss),
            opt(self.support_classification_loss),
            fmt17(self.mean_target_confidence),
            fmt17(self.prediction_entropy),
            opt(self.nn_accuracy),
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 12 {
            return Err(PawsError::Format(format!("metrics row has {} fields, expected 12", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| PawsError::Format(format!("bad number {s:?}: {e}")));
        let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(Self {
            epoch: f[0].parse().map_err(|_| PawsError::Format(format!("bad epoch {:?}", f[0])))?,
            step: f[1].parse().map_err(|_| PawsError::Format(format!("bad step {:?}", f[1])))?,
            lr: num(f[2])?,
            total_loss: num(f[3])?,
            paws_consistency: num(f[4])?,
            me_max_entropy: num(f[5])?,
            entropy_min: num(f[6])?,
            instance_discrimination_loss: opt(f[7])?,
            support_classification_loss: opt(f[8])?,
            mean_target_confidence: num(f[9])?,
            prediction_entropy: num(f[10])?,
            nn_accuracy: opt(f[11])?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path)?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(MetricsRow::from_csv).collect()
}

/// Per-epoch means of `f` over `rows`, in epoch order.
pub fn epoch_means(rows: &[MetricsRow], f: impl Fn(&MetricsRow) -> f64) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows {
        match out.last_mut() {
            Some((e, s, n)) if *e == r.epoch => {
                *s += f(r);
                *n += 1;
            }
            _ => out.push((r.epoch, f(r), 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

fn normalize_rows(z: &Matrix) -> Matrix {
    let mut out = z.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|x| *x /= n);
    }
    out
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalized temperature-scaled cross-entropy over two views of the same batch.
///
/// Row `i` of `a` and row `i` of `b` are positives; every other row of either
/// view is a negative.
pub fn nt_xent(a: &Matrix, b: &Matrix, tau: f64) -> Result<f64> {
    if a.shape() != b.shape() || a.rows() == 0 {
        return Err(PawsError::Shape(format!("views {:?} and {:?} must match and be non-empty", a.shape(), b.shape())));
    }
    let n = a.rows();
    let z = normalize_rows(&Matrix::vstack(&[a, b])?);
    let sims = z.matmul_bt(&z)?;
    let mut total = 0.0;
    for i in 0..2 * n {
        let pos = (i + n) % (2 * n);
        let lse = log_sum_exp((0..2 * n).filter(|&j| j != i).map(|j| sims.get(i, j) / tau));
        total += lse - sims.get(i, pos) / tau;
    }
    Ok(total / (2 * n) as f64)
}

/// Supervised contrastive loss: every same-class row is a positive.
/// Rows without positives are skipped.
pub fn supervised_contrastive(z: &Matrix, labels: &[usize], tau: f64) -> Result<f64> {
    if z.rows() != labels.len() {
        return Err(PawsError::Shape(format!("{} rows but {} labels", z.rows(), labels.len())));
    }
    let zn = normalize_rows(z);
    let sims = zn.matmul_bt(&zn)?;
    let (mut total, mut anchors) = (0.0, 0usize);
    for i in 0..z.rows() {
        let pos: Vec<usize> = (0..z.rows()).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        let lse = log_sum_exp((0..z.rows()).filter(|&j| j != i).map(|j| sims.get(i, j) / tau));
        total += pos.iter().map(|&p| lse - sims.get(i, p) / tau).sum::<f64>() / pos.len() as f64;
        anchors += 1;
    }
    Ok(if anchors == 0 { 0.0 } else { total / anchors as f64 })
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = a ^ b.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Steps through training one mini-batch at a time.
///
/// Every random choice in step `t` comes from a generator seeded by
/// `(train.seed, t)`, and the batch order of epoch `e` from `(train.seed, e)`,
/// so a run resumed from a checkpoint replays the same trajectory.
pub struct Trainer<'a> {
    pub exp: &'a Experiment,
    pub state: TrainState,
    schedule: LrSchedule,
    perm: Option<(usize, Vec<usize>)>,
}

impl<'a> Trainer<'a> {
    pub fn new(exp: &'a Experiment, state: TrainState) -> Self {
        Self { exp, state, schedule: exp.schedule(), perm: None }
    }

    /// Replaces the learning-rate schedule.
    pub fn with_schedule(mut self, schedule: LrSchedule) -> Self {
        self.schedule = schedule;
        self
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps()
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps()
    }

    fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let spe = self.exp.steps_per_epoch();
        let epoch = (step / spe as u64) as usize;
        let b = (step % spe as u64) as usize;
        if self.perm.as_ref().is_none_or(|(e, _)| *e != epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(self.exp.config.train.seed, 0x5348_5546));
            rng.set_stream(epoch as u64);
            let mut p: Vec<usize> = (0..self.exp.data.train_inputs.rows()).collect();
            p.shuffle(&mut rng);
            self.perm = Some((epoch, p));
        }
        let n = self.exp.config.train.batch_size;
        self.perm.as_ref().unwrap().1[b * n..(b + 1) * n].to_vec()
    }

    /// Runs one optimizer step and returns its metrics.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let cfg = &self.exp.config;
        let t = self.state.step;
        let batch = self.batch_indices(t);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.train.seed, 0x5354_4550));
        rng.set_stream(t);

        let augment = cfg.augment();
        let x = self.exp.data.train_inputs.select_rows(&batch);
        let views = generate_views(&x, &augment, cfg.views.global, cfg.views.local, &mut rng)?;
        let pool = &self.exp.labeled;
        let draw = sample_support(pool, cfg.support.classes, cfg.support.per_class, &mut rng)?;
        let labels = encode_labels(&draw, pool, cfg.paws.smoothing)?;
        let (xs, ys) = support_views(pool, &draw, &labels, &augment, cfg.views.support_views, &mut rng)?;

        let n = x.rows();
        let n_views = views.num_views();
        let mut parts: Vec<&Matrix> = views.all_views().collect();
        parts.push(&xs);
        let all_inputs = Matrix::vstack(&parts)?;

        let params = &self.state.params;
        let use_head = cfg.model.prediction_head;
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let xv = tape.constant(all_inputs);
        let z_all = encode(params, &vars, xv, &mut tape)?;
        let h_all = predict_head(params, &vars, z_all, &mut tape, use_head)?;
        let h_views = tape.slice_rows(h_all, 0, n_views * n)?;
        let h_support = tape.slice_rows(h_all, n_views * n, n_views * n + xs.rows())?;
        let support = SupportBatch::new(&tape, h_support, ys)?;
        let p_all = similarity_classifier(&mut tape, h_views, &support, cfg.paws.tau)?;
        let mut preds = Vec::with_capacity(n_views);
        for v in 0..n_views {
            preds.push(tape.slice_rows(p_all, v * n, (v + 1) * n)?);
        }
        let anchor_labels: Option<Vec<Option<Vec<f64>>>> = cfg.paws.prop2_targets.then(|| {
            batch
                .iter()
                .map(|&i| {
                    self.exp.train_label_lookup[i]
                        .map(|y| (0..pool.num_classes).map(|k| if k == y { 1.0 } else { 0.0 }).collect())
                })
                .collect()
        });
        let loss = paws_loss_multicrop(
            &mut tape,
            [preds[0], preds[1]],
            &preds[2..],
            &cfg.loss_options(),
            anchor_labels.as_deref(),
        )?;
        let total = tape.value(loss.total).item();
        let lr = self.schedule.lr_at(t);
        tape.backward(loss.total)?;
        let grads: Vec<Matrix> = vars.flat().iter().map(|&v| tape.grad(v)).collect();
        if !total.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            let norms: Vec<String> = grads.iter().map(|g| format!("{:.3e}", g.frobenius_norm())).collect();
            return Err(PawsError::Numerical(format!(
                "non-finite loss or gradient at step {t} (lr {lr}, loss {total}); gradient norms per tensor: [{}]",
                norms.join(", ")
            )));
        }

        let p_values = tape.value(p_all);
        let prediction_entropy = row_entropies(p_values).iter().sum::<f64>() / p_values.rows() as f64;
        let mean_target_confidence = loss
            .global_targets
            .iter()
            .map(|m| (0..m.rows()).map(|r| m.row(r).iter().cloned().fold(0.0, f64::max)).sum::<f64>())
            .sum::<f64>()
            / (2 * n) as f64;
        let me_max_entropy = row_entropies(&loss.p_bar)[0];
        let (instance, supcon) = if cfg.train.diagnostics {
            let z = tape.value(z_all);
            let z1 = z.slice_rows(0, n);
            let z2 = z.slice_rows(n, 2 * n);
            let zs = z.slice_rows(n_views * n, z.rows());
            let ys: Vec<usize> = (0..support.labels.rows()).map(|r| support.labels.argmax_row(r)).collect();
            (Some(nt_xent(&z1, &z2, cfg.paws.tau)?), Some(supervised_contrastive(&zs, &ys, cfg.paws.tau)?))
        } else {
            (None, None)
        };

        let mut refs = self.state.params.tensors_mut();
        self.state.optimizer.step(&mut refs, &grads, lr)?;
        self.state.step += 1;

        let spe = self.exp.steps_per_epoch() as u64;
        let epoch = (t / spe) as usize + 1;
        let end_of_epoch = self.state.step.is_multiple_of(spe);
        let eval_every = cfg.train.eval_every;
        let eval_now = self.is_done() || (end_of_epoch && eval_every > 0 && epoch.is_multiple_of(eval_every));
        let nn_accuracy = if eval_now { Some(self.exp.nn_accuracy(&self.state.params)?) } else { None };
        Ok(MetricsRow {
            epoch,
            step: self.state.step,
            lr,
            total_loss: total,
            paws_consistency: loss.consistency,
            me_max_entropy,
            entropy_min: loss.entropy_min,
            instance_discrimination_loss: instance,
            support_classification_loss: supcon,
            mean_target_confidence,
            prediction_entropy,
            nn_accuracy,
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub state: TrainState,
    pub rows: Vec<MetricsRow>,
}

/// Trains from `start` (or a fresh initialization) to the end of the schedule.
///
/// With `out_dir`, writes `config.resolved`, appends to `metrics.csv`, writes
/// `checkpoint-e{epoch}.paws` every `train.checkpoint_every` epochs and
/// `checkpoint.paws` at the end.
pub fn run(exp: &Experiment, start: Option<TrainState>, out_dir: Option<&Path>) -> Result<RunOutput> {
    let state = match start {
        Some(s) => s,
        None => exp.init_state()?,
    };
    let mut trainer = Trainer::new(exp, state);
    let mut metrics = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.resolved"), exp.config.render())?;
        let path = dir.join("metrics.csv");
        let fresh = trainer.state.step == 0 || !path.exists();
        let mut f = if fresh { std::fs::File::create(&path)? } else { OpenOptions::new().append(true).open(&path)? };
        if fresh {
            writeln!(f, "{METRICS_HEADER}")?;
        }
        metrics = Some(std::io::BufWriter::new(f));
    }
    let spe = exp.steps_per_epoch() as u64;
    let mut rows = Vec::new();
    while !trainer.is_done() {
        let row = trainer.step()?;
        if let Some(w) = metrics.as_mut() {
            writeln!(w, "{}", row.to_csv())?;
        }
        let k = exp.config.train.checkpoint_every as u64;
        if let (Some(dir), true) = (out_dir, k > 0 && trainer.state.step.is_multiple_of(k * spe)) {
            if let Some(w) = metrics.as_mut() {
                w.flush()?;
            }
            let epoch = trainer.state.step / spe;
            trainer.state.to_checkpoint().save(&dir.join(format!("checkpoint-e{epoch}.paws")))?;
        }
        rows.push(row);
    }
    if let Some(mut w) = metrics {
        w.flush()?;
    }
    if let Some(dir) = out_dir {
        trainer.state.to_checkpoint().save(&dir.join("checkpoint.paws"))?;
    }
    Ok(RunOutput { state: trainer.state, rows })
}
