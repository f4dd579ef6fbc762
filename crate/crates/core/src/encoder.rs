//! MLP encoder: trunk, projection head and optional prediction head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{PawsError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Fully-connected layers in the trunk, each followed by a ReLU.
    pub trunk_layers: usize,
    pub proj_hidden: usize,
    /// Fully-connected layers in the projection head; ReLU between them only.
    pub proj_layers: usize,
    pub embed_dim: usize,
    pub prediction_head: bool,
    pub pred_hidden: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden_dim: 64,
            trunk_layers: 2,
            proj_hidden: 64,
            proj_layers: 3,
            embed_dim: 32,
            prediction_head: false,
            pred_hidden: 64,
        }
    }
}

impl EncoderConfig {
    /// Encoder with no layers at all: `encode` returns its input.
    pub fn passthrough(dim: usize) -> Self {
        Self {
            input_dim: dim,
            hidden_dim: dim,
            trunk_layers: 0,
            proj_hidden: dim,
            proj_layers: 0,
            embed_dim: dim,
            prediction_head: false,
            pred_hidden: dim,
        }
    }

    pub fn trunk_out_dim(&self) -> usize {
        if self.trunk_layers == 0 {
            self.input_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn pred_layers(&self) -> usize {
        if self.prediction_head {
            2
        } else {
            0
        }
    }

    /// `(fan_in, fan_out)` for every layer in forward order.
    pub fn layer_dims(&self) -> Result<Vec<(usize, usize)>> {
        self.validate()?;
        let mut dims = Vec::new();
        let mut d = self.input_dim;
        for _ in 0..self.trunk_layers {
            dims.push((d, self.hidden_dim));
            d = self.hidden_dim;
        }
        for l in 0..self.proj_layers {
            let out = if l + 1 == self.proj_layers { self.embed_dim } else { self.proj_hidden };
            dims.push((d, out));
            d = out;
        }
        if self.prediction_head {
            dims.push((self.embed_dim, self.pred_hidden));
            dims.push((self.pred_hidden, self.embed_dim));
        }
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        let mut zero = Vec::new();
        if self.input_dim == 0 {
            zero.push("input_dim");
        }
        if self.embed_dim == 0 {
            zero.push("embed_dim");
        }
        if self.trunk_layers > 0 && self.hidden_dim == 0 {
            zero.push("hidden_dim");
        }
        if self.proj_layers > 1 && self.proj_hidden == 0 {
            zero.push("proj_hidden");
        }
        if self.prediction_head && self.pred_hidden == 0 {
            zero.push("pred_hidden");
        }
        if !zero.is_empty() {
            return Err(PawsError::Config(format!("dimensions must be positive: {}", zero.join(", "))));
        }
        if self.proj_layers == 0 && self.trunk_out_dim() != self.embed_dim {
            return Err(PawsError::Config(format!(
                "without a projection head embed_dim ({}) must equal the trunk output ({})",
                self.embed_dim,
                self.trunk_out_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// fan_in × fan_out
    pub weight: Matrix,
    /// 1 × fan_out
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub layers: Vec<Linear>,
}

/// Tape handles for every weight and bias of an [`EncoderParams`].
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub layers: Vec<(Var, Var)>,
}

impl ParamVars {
    /// Flat list in the same order as [`EncoderParams::tensors`].
    pub fn flat(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Glorot-uniform weights, zero biases; deterministic per seed.
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<EncoderParams> {
    let dims = config.layer_dims()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = dims
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            Linear {
                weight: Matrix::from_fn(fan_in, fan_out, |_, _| rng.gen_range(-a..=a)),
                bias: Matrix::zeros(1, fan_out),
            }
        })
        .collect();
    Ok(EncoderParams { config: config.clone(), layers })
}

impl EncoderParams {
    /// Builds parameters from explicit layers, checking them against `config`.
    pub fn from_layers(config: EncoderConfig, layers: Vec<Linear>) -> Result<Self> {
        let dims = config.layer_dims()?;
        if dims.len() != layers.len() {
            return Err(PawsError::Shape(format!("config describes {} layers, got {}", dims.len(), layers.len())));
        }
        for (i, ((fi, fo), l)) in dims.iter().zip(&layers).enumerate() {
            if l.weight.shape() != (*fi, *fo) || l.bias.shape() != (1, *fo) {
                return Err(PawsError::Shape(format!(
                    "layer {i}: expected weight {fi}x{fo} and bias 1x{fo}, got {:?} and {:?}",
                    l.weight.shape(),
                    l.bias.shape()
                )));
            }
        }
        Ok(Self { config, layers })
    }

    /// Weights and biases interleaved: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }

    pub fn num_tensors(&self) -> usize {
        self.layers.len() * 2
    }

    pub fn register(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            layers: self.layers.iter().map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone()))).collect(),
        }
    }

    /// Registers the parameters as constants (no gradient), for evaluation.
    pub fn register_frozen(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
                .collect(),
        }
    }

    fn trunk_range(&self) -> std::ops::Range<usize> {
        0..self.config.trunk_layers
    }

    fn proj_range(&self) -> std::ops::Range<usize> {
        let s = self.config.trunk_layers;
        s..s + self.config.proj_layers
    }

    fn pred_range(&self) -> std::ops::Range<usize> {
        let s = self.config.trunk_layers + self.config.proj_layers;
        s..s + self.config.pred_layers()
    }
}

fn linear(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add_row(xw, b)
}

/// Runs `layers` in sequence with ReLU after each one except (optionally) the last.
fn mlp(tape: &mut Tape, mut h: Var, layers: &[(Var, Var)], relu_last: bool) -> Result<Var> {
    for (i, &l) in layers.iter().enumerate() {
        h = linear(tape, h, l)?;
        if relu_last || i + 1 < layers.len() {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

fn check_input(params: &EncoderParams, tape: &Tape, x: Var) -> Result<()> {
    let (r, c) = tape.value(x).shape();
    if c != params.config.input_dim {
        return Err(PawsError::Shape(format!(
            "encoder expects {} input columns, got {r}x{c}",
            params.config.input_dim
        )));
    }
    Ok(())
}

/// Trunk followed by the projection head: `n×input_dim → n×embed_dim`.
pub fn encode(params: &EncoderParams, vars: &ParamVars, x: Var, tape: &mut Tape) -> Result<Var> {
    check_input(params, tape, x)?;
    let h = mlp(tape, x, &vars.layers[params.trunk_range()], true)?;
    mlp(tape, h, &vars.layers[params.proj_range()], false)
}

/// Output of the first projection layer (after its ReLU when more projection
/// layers follow). This is where a linear classifier is attached for fine-tuning.
pub fn encode_first_projection(params: &EncoderParams, vars: &ParamVars, x: Var, tape: &mut Tape) -> Result<Var> {
    check_input(params, tape, x)?;
    if params.config.proj_layers == 0 {
        return Err(PawsError::Config("encoder has no projection head".into()));
    }
    let h = mlp(tape, x, &vars.layers[params.trunk_range()], true)?;
    let first = params.proj_range().start;
    let z = linear(tape, h, vars.layers[first])?;
    Ok(if params.config.proj_layers > 1 { tape.relu(z) } else { z })
}

/// Applies the prediction head when `enabled`; otherwise returns `z` untouched.
pub fn predict_head(params: &EncoderParams, vars: &ParamVars, z: Var, tape: &mut Tape, enabled: bool) -> Result<Var> {
    if !enabled {
        return Ok(z);
    }
    if !params.config.prediction_head {
        return Err(PawsError::Config("prediction head requested but not configured".into()));
    }
    mlp(tape, z, &vars.layers[params.pred_range()], false)
}

/// Plain forward pass without gradient bookkeeping.
pub fn embed(params: &EncoderParams, x: &Matrix, use_head: bool) -> Result<Matrix> {
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let xv = tape.constant(x.clone());
    let z = encode(params, &vars, xv, &mut tape)?;
    let z = predict_head(params, &vars, z, &mut tape, use_head && params.config.prediction_head)?;
    Ok(tape.value(z).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn small() -> EncoderConfig {
        EncoderConfig {
            input_dim: 3,
            hidden_dim: 5,
            trunk_layers: 2,
            proj_hidden: 4,
            proj_layers: 3,
            embed_dim: 2,
            prediction_head: true,
            pred_hidden: 3,
        }
    }

    #[test]
    fn default_layer_dims_chain() {
        let dims = EncoderConfig::default().layer_dims().unwrap();
        assert_eq!(dims, vec![(16, 64), (64, 64), (64, 64), (64, 64), (64, 32)]);
        for w in dims.windows(2) {
            assert_eq!(w[0].1, w[1].0);
        }
        let with_head = EncoderConfig { prediction_head: true, ..Default::default() };
        let dims = with_head.layer_dims().unwrap();
        assert_eq!(&dims[5..], &[(32, 64), (64, 32)]);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let mut p = init_params(&small(), 1).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let x = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        let z = embed(&p, &x, false).unwrap();
        assert_eq!(z, Matrix::zeros(4, 2));
    }

    #[test]
    fn identity_single_layer_reproduces_input() {
        let cfg = EncoderConfig { input_dim: 2, trunk_layers: 0, proj_layers: 1, embed_dim: 2, ..small() };
        let cfg = EncoderConfig { prediction_head: false, ..cfg };
        let p =
            EncoderParams::from_layers(cfg, vec![Linear { weight: Matrix::identity(2), bias: Matrix::zeros(1, 2) }])
                .unwrap();
        let x = Matrix::from_rows(&[vec![1.5, -2.0], vec![0.0, 3.0]]);
        assert_eq!(embed(&p, &x, false).unwrap(), x);
        let pass = init_params(&EncoderConfig::passthrough(2), 0).unwrap();
        assert!(pass.layers.is_empty());
        assert_eq!(embed(&pass, &x, false).unwrap(), x);
    }

    #[test]
    fn encode_gradients_pass_grad_check() {
        // nonzero biases keep pre-activations away from the ReLU kink
        let mut p = init_params(&small(), 7).unwrap();
        for (l, layer) in p.layers.iter_mut().enumerate() {
            for (j, b) in layer.bias.data_mut().iter_mut().enumerate() {
                *b = 0.1 + 0.05 * ((l * 5 + j) as f64).cos();
            }
        }
        let x = Matrix::from_fn(6, 3, |i, j| ((i * 7 + j * 3) as f64).sin());
        let cfg = p.config.clone();
        let tensors: Vec<Matrix> = p.tensors().into_iter().cloned().collect();
        let report = grad_check(
            |t, vars| {
                let layers =
                    vars.chunks(2).map(|c| Linear { weight: t.value(c[0]).clone(), bias: t.value(c[1]).clone() });
                let params = EncoderParams::from_layers(cfg.clone(), layers.collect())?;
                let pv = ParamVars { layers: vars.chunks(2).map(|c| (c[0], c[1])).collect() };
                let xv = t.constant(x.clone());
                let z = encode(&params, &pv, xv, t)?;
                let z = predict_head(&params, &pv, z, t, true)?;
                Ok(t.mean(z))
            },
            &tensors,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn prediction_head_modes() {
        let p = init_params(&small(), 3).unwrap();
        let mut t = Tape::new();
        let vars = p.register(&mut t);
        let z = t.constant(Matrix::from_fn(3, 2, |i, j| (i + j) as f64 - 1.0));
        assert_eq!(predict_head(&p, &vars, z, &mut t, false).unwrap(), z);
        let h = predict_head(&p, &vars, z, &mut t, true).unwrap();
        assert_eq!(t.value(h).shape(), (3, 2));

        let mut zeroed = p.clone();
        let last = zeroed.layers.len() - 1;
        zeroed.layers[last].weight.data_mut().fill(0.0);
        zeroed.layers[last].bias = Matrix::from_rows(&[vec![0.5, -0.25]]);
        let vars = zeroed.register(&mut t);
        let h = predict_head(&zeroed, &vars, z, &mut t, true).unwrap();
        for r in 0..3 {
            assert_eq!(t.value(h).row(r), &[0.5, -0.25]);
        }

        let no_head = init_params(&EncoderConfig { prediction_head: false, ..small() }, 3).unwrap();
        let vars = no_head.register(&mut t);
        assert!(matches!(predict_head(&no_head, &vars, z, &mut t, true), Err(PawsError::Config(_))));
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let cfg = EncoderConfig::default();
        let a = init_params(&cfg, 42).unwrap();
        let b = init_params(&cfg, 42).unwrap();
        let c = init_params(&cfg, 43).unwrap();
        assert_eq!(a, b);
        assert!(a.tensors().iter().zip(b.tensors()).all(|(x, y)| x
            .data()
            .iter()
            .zip(y.data())
            .all(|(u, v)| u.to_bits() == v.to_bits())));
        assert_ne!(a, c);
        for l in &a.layers {
            let (fi, fo) = l.weight.shape();
            let bound = (6.0 / (fi + fo) as f64).sqrt();
            assert!(l.weight.max_abs() <= bound);
            assert_eq!(l.bias.max_abs(), 0.0);
        }
    }

    #[test]
    fn bad_configs_and_inputs() {
        let cfg = EncoderConfig { input_dim: 0, ..Default::default() };
        assert!(matches!(init_params(&cfg, 0), Err(PawsError::Config(_))));
        let p = init_params(&EncoderConfig::default(), 0).unwrap();
        assert!(matches!(embed(&p, &Matrix::zeros(2, 5), false), Err(PawsError::Shape(_))));
    }
}
