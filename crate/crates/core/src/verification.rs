//! Numerical experiments around representation collapse: predictions at a
//! constructed collapse, the gradient there, and short training runs started
//! close to it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Matrix, Tape, Var, LOG_FLOOR};
use crate::config::TrainConfig;
use crate::encoder::{embed, encode, init_params, EncoderConfig, EncoderParams};
use crate::error::{PawsError, Result};
use crate::objective::{semi_supervised_target_override, sharpen, similarity_classifier, SupportBatch};
use crate::optim::LrSchedule;
use crate::support::smoothed_labels;
use crate::train::{Experiment, TrainState, Trainer};

/// Gradient norms above this count as nonzero.
pub const GRAD_THRESHOLD: f64 = 1e-8;
/// Tolerance on uniformity of collapsed predictions.
pub const UNIFORM_TOL: f64 = 1e-12;

/// An encoder whose last projection layer has zero weights and a shared
/// nonzero bias, so every input maps to the same representation.
#[derive(Clone, Debug)]
pub struct CollapseConstruction {
    pub params: EncoderParams,
    pub anchors: Matrix,
    pub support_inputs: Matrix,
    /// Hard one-hot rows.
    pub support_labels: Matrix,
    pub tau: f64,
    pub sharpen_t: f64,
}

impl CollapseConstruction {
    /// `class_counts[k]` support rows of class `k`; `n_anchors` random anchor inputs.
    pub fn new(
        config: &EncoderConfig,
        class_counts: &[usize],
        n_anchors: usize,
        tau: f64,
        sharpen_t: f64,
        seed: u64,
    ) -> Result<Self> {
        Self::near(config, class_counts, n_anchors, tau, sharpen_t, 0.0, seed)
    }

    /// Like [`new`](Self::new) but with last-layer weights drawn at scale
    /// `weight_scale` instead of zero. Rows are then only approximately equal.
    pub fn near(
        config: &EncoderConfig,
        class_counts: &[usize],
        n_anchors: usize,
        tau: f64,
        sharpen_t: f64,
        weight_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        if class_counts.len() < 2 || class_counts.iter().all(|&c| c == 0) {
            return Err(PawsError::Config("collapse construction needs at least 2 classes".into()));
        }
        if n_anchors == 0 {
            return Err(PawsError::Config("collapse construction needs anchors".into()));
        }
        let mut params = init_params(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c011);
        let last = params.config.trunk_layers + params.config.proj_layers - 1;
        let layer = &mut params.layers[last];
        for w in layer.weight.data_mut() {
            *w = weight_scale * rng.sample::<f64, _>(StandardNormal);
        }
        for b in layer.bias.data_mut() {
            *b = rng.gen_range(0.5..1.5) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
        }
        let dim = config.input_dim;
        let anchors = Matrix::from_fn(n_anchors, dim, |_, _| rng.sample(StandardNormal));
        let labels: Vec<usize> =
            class_counts.iter().enumerate().flat_map(|(k, &c)| std::iter::repeat_n(k, c)).collect();
        let support_inputs = Matrix::from_fn(labels.len(), dim, |_, _| rng.sample(StandardNormal));
        let support_labels = smoothed_labels(&labels, class_counts.len(), 0.0)?;
        Ok(Self { params, anchors, support_inputs, support_labels, tau, sharpen_t })
    }

    pub fn balanced(config: &EncoderConfig, classes: usize, per_class: usize, seed: u64) -> Result<Self> {
        Self::new(config, &vec![per_class; classes], 8, 0.1, 0.25, seed)
    }

    pub fn num_classes(&self) -> usize {
        self.support_labels.cols()
    }

    /// Anchor predictions with every parameter registered on `tape`.
    fn forward(&self, tape: &mut Tape) -> Result<(Vec<Var>, Var, bool)> {
        let vars = self.params.register(tape);
        let x = tape.constant(self.anchors.clone());
        let xs = tape.constant(self.support_inputs.clone());
        let z = encode(&self.params, &vars, x, tape)?;
        let zs = encode(&self.params, &vars, xs, tape)?;
        let support = SupportBatch::new(tape, zs, self.support_labels.clone())?;
        let balanced = support.is_balanced();
        let p = similarity_classifier(tape, z, &support, self.tau)?;
        Ok((vars.flat(), p, balanced))
    }

    /// Anchor predictions without any balance precondition.
    pub fn predictions(&self) -> Result<Matrix> {
        let mut tape = Tape::new();
        let (_, p, _) = self.forward(&mut tape)?;
        Ok(tape.value(p).clone())
    }

    /// Largest difference between any two representation entries in the same column.
    pub fn representation_spread(&self) -> Result<f64> {
        let z = embed(&self.params, &Matrix::vstack(&[&self.anchors, &self.support_inputs])?, false)?;
        let mut spread = 0.0f64;
        for c in 0..z.cols() {
            let col: Vec<f64> = (0..z.rows()).map(|r| z.get(r, c)).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            spread = spread.max(hi - lo);
        }
        Ok(spread)
    }

    /// `‖∇_θ H(target, p)‖` with `target` held constant.
    ///
    /// `target` is either one row (broadcast to every anchor) or one row per anchor.
    pub fn gradient_norm(&self, target: &Matrix) -> Result<f64> {
        let n = self.anchors.rows();
        let full = if target.rows() == 1 {
            Matrix::from_fn(n, target.cols(), |_, k| target.get(0, k))
        } else {
            target.clone()
        };
        let mut tape = Tape::new();
        let (params, p, _) = self.forward(&mut tape)?;
        let loss = tape.cross_entropy_rows(&full, p, LOG_FLOOR)?;
        tape.backward(loss)?;
        Ok(params.iter().map(|&v| tape.grad(v).data().iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt())
    }
}

#[derive(Clone, Debug)]
pub struct UniformReport {
    pub predictions: Matrix,
    /// `max |p_k − 1/K|` over all rows.
    pub max_deviation: f64,
    pub passed: bool,
}

/// Predictions at the collapse must be uniform over the support classes.
pub fn check_uniform_under_collapse(c: &CollapseConstruction) -> Result<UniformReport> {
    let mut tape = Tape::new();
    let (_, p, balanced) = c.forward(&mut tape)?;
    if !balanced {
        return Err(PawsError::Precondition(
            "uniformity under collapse is only claimed for class-balanced support".into(),
        ));
    }
    let predictions = tape.value(p).clone();
    let k = c.num_classes() as f64;
    let max_deviation = predictions.data().iter().map(|&x| (x - 1.0 / k).abs()).fold(0.0, f64::max);
    Ok(UniformReport { predictions, max_deviation, passed: max_deviation <= UNIFORM_TOL })
}

#[derive(Clone, Debug)]
pub struct GradientReport {
    pub norm: f64,
    /// The target equals the collapsed prediction, so no gradient is expected.
    pub degenerate: bool,
    pub passed: bool,
}

fn is_uniform(target: &Matrix) -> bool {
    let k = target.cols() as f64;
    target.data().iter().all(|&x| (x - 1.0 / k).abs() <= UNIFORM_TOL)
}

/// Gradient of the cross-entropy to a fixed non-uniform target at the collapse.
///
/// A uniform target is reported as degenerate and never passes.
pub fn check_noncollapse_gradient(c: &CollapseConstruction, target: &Matrix) -> Result<GradientReport> {
    if target.cols() != c.num_classes() {
        return Err(PawsError::Shape(format!("target has {} classes, support has {}", target.cols(), c.num_classes())));
    }
    let norm = c.gradient_norm(target)?;
    let degenerate = is_uniform(target);
    Ok(GradientReport { norm, degenerate, passed: !degenerate && norm > GRAD_THRESHOLD })
}

/// Targets for the semi-supervised path: the anchors' own (collapsed)
/// predictions sharpened at `T`, with labeled anchors replaced by their one-hot label.
pub fn prop2_targets(c: &CollapseConstruction, anchor_labels: &[Option<usize>]) -> Result<Matrix> {
    let k = c.num_classes();
    let p = c.predictions()?;
    let sharp = sharpen(&p, c.sharpen_t)?;
    let rows: Vec<Option<Vec<f64>>> =
        anchor_labels.iter().map(|l| l.map(|y| (0..k).map(|j| if j == y { 1.0 } else { 0.0 }).collect())).collect();
    semi_supervised_target_override(&sharp, &rows)
}

/// Consistency gradient at the collapse with label-overridden targets.
/// Requires at least one labeled anchor.
pub fn check_prop2_path(c: &CollapseConstruction, anchor_labels: &[Option<usize>]) -> Result<GradientReport> {
    if anchor_labels.iter().all(Option::is_none) {
        return Err(PawsError::Precondition("the semi-supervised path needs at least one labeled anchor".into()));
    }
    let targets = prop2_targets(c, anchor_labels)?;
    let norm = c.gradient_norm(&targets)?;
    Ok(GradientReport { norm, degenerate: false, passed: norm > GRAD_THRESHOLD })
}

/// Settings for a short training run started next to the collapse.
#[derive(Clone, Debug)]
pub struct EscapeConfig {
    pub base: TrainConfig,
    pub steps: u64,
    /// Scale of the random last-layer weights; the shared bias dominates.
    pub weight_scale: f64,
    /// Constant learning rate.
    pub lr: f64,
    /// Test inputs used to measure the spread of representations.
    pub probe_rows: usize,
}

impl EscapeConfig {
    /// Default blob experiment with the given sharpening, mean-entropy term and
    /// entropy-minimization weight.
    pub fn desk(sharpen_t: f64, me_max: bool, entropy_min_weight: f64) -> Self {
        let mut base = TrainConfig::default();
        base.paws.sharpen_t = sharpen_t;
        base.paws.me_max = me_max;
        base.paws.entropy_min_weight = entropy_min_weight;
        base.train.diagnostics = false;
        base.train.eval_every = 0;
        Self { base, steps: 100, weight_scale: 0.1, lr: 0.5, probe_rows: 200 }
    }
}

#[derive(Clone, Debug)]
pub struct EscapeReport {
    /// Mean pairwise distance between L2-normalized probe representations,
    /// before the first step and after each step.
    pub distances: Vec<f64>,
    /// Mean entropy of the view predictions at each step.
    pub entropies: Vec<f64>,
}

impl EscapeReport {
    /// Final over initial mean pairwise distance.
    pub fn spread_ratio(&self) -> f64 {
        self.distances.last().copied().unwrap_or(0.0) / self.distances[0]
    }

    /// `step,mean_pairwise_distance,prediction_entropy` with an empty entropy at step 0.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,mean_pairwise_distance,prediction_entropy\n");
        for (t, d) in self.distances.iter().enumerate() {
            let e = if t == 0 { String::new() } else { format!("{:.16e}", self.entropies[t - 1]) };
            out.push_str(&format!("{t},{d:.16e},{e}\n"));
        }
        out
    }
}

/// Mean Euclidean distance over all pairs of L2-normalized rows.
pub fn mean_pairwise_distance(z: &Matrix) -> f64 {
    let n = z.rows();
    if n < 2 {
        return 0.0;
    }
    let norms: Vec<f64> = (0..n).map(|r| z.row(r).iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12)).collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let d2: f64 = z.row(i).iter().zip(z.row(j)).map(|(a, b)| (a / norms[i] - b / norms[j]).powi(2)).sum();
            total += d2.sqrt();
        }
    }
    total / (n * (n - 1) / 2) as f64
}

/// Trains `steps` steps from an encoder whose last layer has tiny random
/// weights and a shared nonzero bias, logging how far representations spread.
pub fn run_collapse_escape(cfg: &EscapeConfig, seed: u64) -> Result<EscapeReport> {
    let mut config = cfg.base.clone();
    config.train.seed = seed;
    config.model.seed = seed;
    let exp = Experiment::prepare(config)?;
    let spe = exp.steps_per_epoch();
    let epochs = (cfg.steps as usize).div_ceil(spe).max(1);
    let schedule = LrSchedule {
        warmup_epochs: 0.0,
        start_lr: cfg.lr,
        peak_lr: cfg.lr,
        final_lr: cfg.lr,
        total_epochs: epochs,
        steps_per_epoch: spe,
    };
    let mut params = init_params(&exp.config.encoder(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c011);
    let last = params.config.trunk_layers + params.config.proj_layers - 1;
    let layer = &mut params.layers[last];
    for w in layer.weight.data_mut() {
        *w = cfg.weight_scale * rng.sample::<f64, _>(StandardNormal);
    }
    for b in layer.bias.data_mut() {
        *b = rng.gen_range(0.5..1.5) * if rng.gen::<bool>() { 1.0 } else { -1.0 };
    }
    let probe = exp.data.test_inputs.slice_rows(0, cfg.probe_rows.min(exp.data.test_inputs.rows()));
    let state = TrainState::fresh(params, &exp.config)?;
    let mut trainer = Trainer::new(&exp, state).with_schedule(schedule);
    let mut distances = vec![mean_pairwise_distance(&embed(&trainer.state.params, &probe, false)?)];
    let mut entropies = Vec::with_capacity(cfg.steps as usize);
    for _ in 0..cfg.steps {
        let row = trainer.step()?;
        entropies.push(row.prediction_entropy);
        distances.push(mean_pairwise_distance(&embed(&trainer.state.params, &probe, false)?));
    }
    Ok(EscapeReport { distances, entropies })
}

/// Minimum growth of the representation spread for an escape run to pass.
pub const ESCAPE_FACTOR: f64 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
    /// Reported without a pass/fail claim.
    Info,
}

impl std::fmt::Display for Status {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Info => "INFO",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

fn outcome(name: &str, pass: bool, detail: String) -> CheckOutcome {
    CheckOutcome { name: name.into(), status: if pass { Status::Pass } else { Status::Fail }, detail }
}

/// Everything the `verify` command reports, plus the escape trajectories.
pub struct SuiteResult {
    pub checks: Vec<CheckOutcome>,
    /// `(label, report)` per escape run.
    pub escapes: Vec<(String, EscapeReport)>,
}

impl SuiteResult {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.status != Status::Fail)
    }

    pub fn table(&self) -> String {
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        self.checks.iter().map(|c| format!("{:<w$}  {}  {}\n", c.name, c.status, c.detail)).collect()
    }
}

/// Runs every collapse check with seeds derived from `seed`.
pub fn run_suite(seed: u64) -> Result<SuiteResult> {
    let enc = EncoderConfig::default();
    let mut checks = Vec::new();

    let mut worst = 0.0f64;
    for k in [2, 4, 8] {
        for s in [1, 2, 4] {
            let r = check_uniform_under_collapse(&CollapseConstruction::balanced(&enc, k, s, seed)?)?;
            worst = worst.max(r.max_deviation);
        }
    }
    checks.push(outcome("uniform predictions at collapse", worst <= UNIFORM_TOL, format!("max |p-1/K| = {worst:.1e}")));

    let unbalanced = CollapseConstruction::new(&enc, &[3, 1], 8, 0.1, 0.25, seed)?;
    let p = unbalanced.predictions()?;
    let dev = (0..p.rows()).map(|r| (p.get(r, 0) - 0.75).abs().max((p.get(r, 1) - 0.25).abs())).fold(0.0, f64::max);
    let rejected = matches!(check_uniform_under_collapse(&unbalanced), Err(PawsError::Precondition(_)));
    checks.push(outcome(
        "unbalanced support gives class frequencies",
        rejected && dev <= UNIFORM_TOL,
        format!("max |p-[0.75,0.25]| = {dev:.1e}"),
    ));

    let mut norms = Vec::new();
    for i in 0..20 {
        let c = CollapseConstruction::balanced(&enc, 4, 2, seed.wrapping_add(i))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + i));
        let raw = Matrix::from_fn(1, 4, |_, _| 0.25 + 1e-3 * rng.gen_range(-1.0..1.0));
        let sum = raw.sum();
        let target = sharpen(&raw.scale(1.0 / sum), c.sharpen_t)?;
        norms.push(check_noncollapse_gradient(&c, &target)?.norm);
    }
    let min = norms.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = norms.iter().cloned().fold(0.0, f64::max);
    checks.push(outcome(
        "gradient at collapse, sharpened targets (20 seeds)",
        min > GRAD_THRESHOLD,
        format!("norm in [{min:.1e}, {max:.1e}], threshold {GRAD_THRESHOLD:.0e}"),
    ));

    let onehot = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0]]);
    let near: Vec<String> = [1e-2, 1e-4, 1e-6]
        .iter()
        .map(|&w| {
            CollapseConstruction::near(&enc, &[2; 4], 8, 0.1, 0.25, w, seed)
                .and_then(|c| c.gradient_norm(&onehot))
                .map(|g| format!("{w:.0e}: {g:.1e}"))
        })
        .collect::<Result<_>>()?;
    checks.push(CheckOutcome {
        name: "gradient near collapse by last-layer weight scale".into(),
        status: Status::Info,
        detail: near.join(", "),
    });

    let c1 = CollapseConstruction::new(&enc, &[2; 4], 8, 0.1, 1.0, seed)?;
    let mut labels = vec![None; 8];
    labels[0] = Some(0);
    let r = check_prop2_path(&c1, &labels)?;
    checks.push(outcome(
        "gradient at collapse, one labeled anchor, T=1",
        r.passed,
        format!("norm {:.1e}, threshold {GRAD_THRESHOLD:.0e}", r.norm),
    ));
    let g0 = c1.gradient_norm(&prop2_targets(&c1, &[None; 8])?)?;
    checks.push(outcome("gradient at collapse, no labels, T=1", g0 < 1e-10, format!("norm {g0:.1e}, bound 1e-10")));

    let mut escapes = Vec::new();
    for (label, t, me_max, ent, asserted) in [
        ("escape T=0.25", 0.25, true, 0.0, true),
        ("escape T=1 without me-max", 1.0, false, 0.0, false),
        ("escape T=1 with entropy minimization", 1.0, true, 1.0, true),
    ] {
        let rep = run_collapse_escape(&EscapeConfig::desk(t, me_max, ent), seed)?;
        let ratio = rep.spread_ratio();
        let detail = format!("spread x{ratio:.1} (need >{ESCAPE_FACTOR})");
        checks.push(if asserted {
            outcome(label, ratio > ESCAPE_FACTOR, detail)
        } else {
            CheckOutcome { name: label.into(), status: Status::Info, detail: format!("spread x{ratio:.1}") }
        });
        escapes.push((label.to_string(), rep));
    }
    Ok(SuiteResult { checks, escapes })
}
