//! The routing classifier: a binary scorer over state features, its
//! temperature-scaled Bernoulli sampling, the two training losses, and an
//! AdamW optimizer.
//!
//! Parameters live in one flat vector whose layout is fixed by the
//! [`Architecture`]:
//!
//! * `Linear { inputs }`: `[w_0 .. w_{n-1}, b]`
//! * `Mlp { inputs, hidden, output_scale }`: `[W1 (hidden x inputs, row-major), b1 (hidden), w2 (hidden), b2]`
//!   with a `tanh` hidden nonlinearity; the logit is `output_scale * (w2 . h + b2)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::il::LabeledStep;
use crate::seed::Rng;

/// Probabilities reported outside the loss are clamped to this margin.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    Linear {
        inputs: usize,
    },
    Mlp {
        inputs: usize,
        hidden: usize,
        /// Fixed multiplier on the output layer.
        #[serde(default = "unit_scale")]
        output_scale: f64,
    },
}

fn unit_scale() -> f64 {
    1.0
}

impl Architecture {
    pub fn mlp(inputs: usize, hidden: usize) -> Self {
        Architecture::Mlp {
            inputs,
            hidden,
            output_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Architecture::Linear { inputs } => inputs > 0,
            Architecture::Mlp {
                inputs,
                hidden,
                output_scale,
            } => inputs > 0 && hidden > 0 && output_scale > 0.0 && output_scale.is_finite(),
        };
        if !ok {
            return Err(Error::Config(format!("invalid router architecture {self:?}")));
        }
        Ok(())
    }

    pub fn inputs(&self) -> usize {
        match *self {
            Architecture::Linear { inputs } | Architecture::Mlp { inputs, .. } => inputs,
        }
    }

    pub fn param_count(&self) -> usize {
        match *self {
            Architecture::Linear { inputs } => inputs + 1,
            Architecture::Mlp { inputs, hidden, .. } => hidden * inputs + 2 * hidden + 1,
        }
    }

    /// Indices of bias entries (initialized to zero).
    fn is_bias(&self, idx: usize) -> bool {
        match *self {
            Architecture::Linear { inputs } => idx == inputs,
            Architecture::Mlp { inputs, hidden, .. } => {
                let w1 = hidden * inputs;
                (w1..w1 + hidden).contains(&idx) || idx == w1 + 2 * hidden
            }
        }
    }
}

/// Live router parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RouterParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
    /// Bumped on every optimizer step.
    pub version: u64,
}

impl RouterParams {
    pub fn zeros(arch: Architecture) -> Self {
        RouterParams {
            arch,
            values: vec![0.0; arch.param_count()],
            version: 0,
        }
    }

    /// Zero biases, weights uniform in `[-0.05, 0.05]`.
    pub fn init(arch: Architecture, rng: &mut Rng) -> Self {
        let values = (0..arch.param_count())
            .map(|i| {
                if arch.is_bias(i) {
                    0.0
                } else {
                    rng.random_range(-0.05..=0.05)
                }
            })
            .collect();
        RouterParams {
            arch,
            values,
            version: 0,
        }
    }

    pub fn from_values(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::Usage(format!(
                "{} parameter values given, architecture needs {}",
                values.len(),
                arch.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Usage("router parameters must be finite".into()));
        }
        Ok(RouterParams {
            arch,
            values,
            version: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.arch.inputs() {
            return Err(Error::Usage(format!(
                "feature length {} does not match router input size {}",
                features.len(),
                self.arch.inputs()
            )));
        }
        Ok(())
    }

    /// Euclidean distance to another parameter vector of the same shape.
    pub fn distance(&self, other: &RouterParams) -> Result<f64> {
        check_same_shape(self, other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

fn check_same_shape(a: &RouterParams, b: &RouterParams) -> Result<()> {
    if a.arch != b.arch || a.values.len() != b.values.len() {
        return Err(Error::Usage(format!(
            "parameter shapes differ: {:?} vs {:?}",
            a.arch, b.arch
        )));
    }
    Ok(())
}

/// Frozen copy of the router at the end of imitation learning.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorParams(RouterParams);

impl AnchorParams {
    pub fn freeze(params: &RouterParams) -> Self {
        AnchorParams(params.clone())
    }

    pub fn params(&self) -> &RouterParams {
        &self.0
    }
}

/// Router logit for one feature vector.
pub fn logit(params: &RouterParams, features: &[f64]) -> Result<f64> {
    params.check_input(features)?;
    Ok(forward(params, features, None))
}

/// Forward pass; when `hidden` is given it receives the tanh activations.
fn forward(params: &RouterParams, x: &[f64], hidden: Option<&mut Vec<f64>>) -> f64 {
    let v = &params.values;
    match params.arch {
        Architecture::Linear { inputs } => {
            v[..inputs].iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + v[inputs]
        }
        Architecture::Mlp {
            inputs,
            hidden: h,
            output_scale,
        } => {
            let (w1, rest) = v.split_at(h * inputs);
            let (b1, rest) = rest.split_at(h);
            let (w2, b2) = rest.split_at(h);
            let mut out = b2[0];
            let mut acts = hidden;
            if let Some(a) = acts.as_deref_mut() {
                a.clear();
            }
            for j in 0..h {
                let row = &w1[j * inputs..(j + 1) * inputs];
                let z = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b1[j];
                let a = z.tanh();
                out += w2[j] * a;
                if let Some(buf) = acts.as_deref_mut() {
                    buf.push(a);
                }
            }
            output_scale * out
        }
    }
}

/// Add `scale * d(logit)/d(params)` at `x` into `grad`.
fn accumulate_logit_grad(
    params: &RouterParams,
    x: &[f64],
    scale: f64,
    hidden: &[f64],
    grad: &mut [f64],
) {
    match params.arch {
        Architecture::Linear { inputs } => {
            for (g, xi) in grad[..inputs].iter_mut().zip(x) {
                *g += scale * xi;
            }
            grad[inputs] += scale;
        }
        Architecture::Mlp {
            inputs,
            hidden: h,
            output_scale,
        } => {
            let scale = scale * output_scale;
            let w2_off = h * inputs + h;
            let b2_off = w2_off + h;
            grad[b2_off] += scale;
            for j in 0..h {
                let a = hidden[j];
                grad[w2_off + j] += scale * a;
                let delta = scale * params.values[w2_off + j] * (1.0 - a * a);
                grad[h * inputs + j] += delta;
                for (g, xi) in grad[j * inputs..(j + 1) * inputs].iter_mut().zip(x) {
                    *g += delta * xi;
                }
            }
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Temperature-scaled routing probability `sigmoid(logit / gamma)`.
pub fn route_prob(logit: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {gamma}")));
    }
    Ok(sigmoid(logit / gamma).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
}

/// Bernoulli draw: 1 (cloud) with probability `prob`.
pub fn sample_decision(prob: f64, rng: &mut Rng) -> u8 {
    let u: f64 = rng.random();
    u8::from(u < prob)
}

/// Deterministic routing: cloud iff `prob >= threshold`.
pub fn decide_greedy(prob: f64, threshold: f64) -> u8 {
    u8::from(prob >= threshold)
}

/// Mean binary cross-entropy on the raw logits and its exact gradient.
///
/// `pos_weight` scales the positive-class term (1.0 disables reweighting).
pub fn bce_loss_and_grad(
    params: &RouterParams,
    batch: &[&LabeledStep],
    pos_weight: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let mut grad = vec![0.0; params.len()];
    let mut hidden = Vec::new();
    let mut loss = 0.0;
    let n = batch.len() as f64;
    for ex in batch {
        params.check_input(&ex.features)?;
        if ex.label > 1 {
            return Err(Error::Usage(format!("label {} is not binary", ex.label)));
        }
        let z = forward(params, &ex.features, Some(&mut hidden));
        let (l, dz) = if ex.label == 1 {
            (pos_weight * softplus(-z), pos_weight * (sigmoid(z) - 1.0))
        } else {
            (softplus(z), sigmoid(z))
        };
        loss += l;
        accumulate_logit_grad(params, &ex.features, dz / n, &hidden, &mut grad);
    }
    Ok((loss / n, grad))
}

/// `beta * ||params - anchor||^2` and its gradient.
pub fn anchor_penalty(
    params: &RouterParams,
    anchor: &AnchorParams,
    beta: f64,
) -> Result<(f64, Vec<f64>)> {
    check_same_shape(params, anchor.params())?;
    let mut loss = 0.0;
    let grad = params
        .values
        .iter()
        .zip(&anchor.params().values)
        .map(|(p, a)| {
            let d = p - a;
            loss += d * d;
            2.0 * beta * d
        })
        .collect();
    Ok((beta * loss, grad))
}

/// BCE plus the L2 pull toward the imitation-learning anchor.
pub fn anchored_loss_and_grad(
    params: &RouterParams,
    anchor: &AnchorParams,
    batch: &[&LabeledStep],
    beta: f64,
    pos_weight: f64,
) -> Result<(f64, Vec<f64>)> {
    if beta < 0.0 {
        return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
    }
    let (reg, reg_grad) = anchor_penalty(params, anchor, beta)?;
    let (bce, mut grad) = bce_loss_and_grad(params, batch, pos_weight)?;
    for (g, r) in grad.iter_mut().zip(reg_grad) {
        *g += r;
    }
    Ok((bce + reg, grad))
}

/// AdamW state (decoupled weight decay).
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(param_count: usize, lr: f64, weight_decay: f64) -> Self {
        OptimizerState {
            first_moment: vec![0.0; param_count],
            second_moment: vec![0.0; param_count],
            step: 0,
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub fn optimizer_step(
    params: &mut RouterParams,
    opt: &mut OptimizerState,
    grad: &[f64],
) -> Result<()> {
    if grad.len() != params.len() || opt.first_moment.len() != params.len() {
        return Err(Error::Usage(format!(
            "gradient/optimizer shape mismatch: {} params, {} grads, {} moments",
            params.len(),
            grad.len(),
            opt.first_moment.len()
        )));
    }
    if !(opt.lr > 0.0) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", opt.lr)));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Training(format!(
            "non-finite gradient at parameter {i} (step {})",
            opt.step
        )));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for (((p, m), v), &g) in params
        .values
        .iter_mut()
        .zip(opt.first_moment.iter_mut())
        .zip(opt.second_moment.iter_mut())
        .zip(grad)
    {
        *p -= opt.lr * opt.weight_decay * *p;
        *m = opt.beta1 * *m + (1.0 - opt.beta1) * g;
        *v = opt.beta2 * *v + (1.0 - opt.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= opt.lr * m_hat / (v_hat.sqrt() + opt.eps);
    }
    params.version += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::il::{Provenance, Stage};
    use crate::seed;

    fn ex(features: Vec<f64>, label: u8) -> LabeledStep {
        LabeledStep {
            task_id: "t".into(),
            canonical_key: crate::envkit::CanonicalKey("t|0".into()),
            features,
            label,
            stage: Stage::Il,
            provenance: Provenance::Group { group_id: "g".into() },
        }
    }

    #[test]
    fn logit_examples() {
        let zero = RouterParams::zeros(Architecture::Linear { inputs: 3 });
        assert_eq!(logit(&zero, &[1.0, 2.0, 3.0]).unwrap(), 0.0);
        let lin =
            RouterParams::from_values(Architecture::Linear { inputs: 2 }, vec![1.0, -1.0, 0.5])
                .unwrap();
        assert_eq!(logit(&lin, &[2.0, 1.0]).unwrap(), 1.5);
        assert!(matches!(logit(&lin, &[1.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn mlp_matches_straight_line_evaluation() {
        let arch = Architecture::mlp(3, 2);
        let v = vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6, 0.05, -0.05, 0.7, -0.8, 0.25];
        let p = RouterParams::from_values(arch, v).unwrap();
        let x = [0.5, -1.0, 2.0];
        let h0 = (0.1 * 0.5 + -0.2 * -1.0 + 0.3 * 2.0 + 0.05f64).tanh();
        let h1 = (0.4 * 0.5 + 0.5 * -1.0 + -0.6 * 2.0 + -0.05f64).tanh();
        let expected = 0.7 * h0 - 0.8 * h1 + 0.25;
        assert!((logit(&p, &x).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn route_prob_examples() {
        assert_eq!(route_prob(0.0, 1.3).unwrap(), 0.5);
        assert!((route_prob(3f64.ln(), 1.0).unwrap() - 0.75).abs() < 1e-15);
        let independent = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((route_prob(1.3, 1.3).unwrap() - independent).abs() < 1e-15);
        assert!((independent - 0.731059).abs() < 1e-6);
        assert!(matches!(route_prob(1.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(route_prob(1.0, -2.0), Err(Error::Config(_))));
    }

    #[test]
    fn sampling_extremes() {
        let mut rng = seed::stream(1, &[]);
        for _ in 0..1000 {
            assert_eq!(sample_decision(0.0, &mut rng), 0);
            assert_eq!(sample_decision(1.0, &mut rng), 1);
        }
    }

    #[test]
    fn sampling_frequency_within_three_sigma() {
        let mut rng = seed::stream(2, &[]);
        let n = 100_000;
        let hits: u32 = (0..n).map(|_| sample_decision(0.3, &mut rng) as u32).sum();
        let se = (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((hits as f64 / n as f64 - 0.3).abs() < 3.0 * se);
    }

    #[test]
    fn greedy_boundary() {
        assert_eq!(decide_greedy(0.5, 0.5), 1);
        assert_eq!(decide_greedy(0.49, 0.5), 0);
        assert_eq!(decide_greedy(0.8, 0.9), 0);
    }

    #[test]
    fn bce_examples() {
        let p = RouterParams::from_values(Architecture::Linear { inputs: 1 }, vec![40.0, 0.0])
            .unwrap();
        let a = ex(vec![1.0], 1);
        let b = ex(vec![-1.0], 0);
        let (loss, _) = bce_loss_and_grad(&p, &[&a, &b], 1.0).unwrap();
        assert!(loss < 1e-15 && loss >= 0.0);

        let zero = RouterParams::zeros(Architecture::Linear { inputs: 1 });
        let (loss, _) = bce_loss_and_grad(&zero, &[&a], 1.0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert!(matches!(bce_loss_and_grad(&zero, &[], 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn anchored_reduces_to_bce() {
        let mut rng = seed::stream(3, &[]);
        let arch = Architecture::mlp(2, 3);
        let p = RouterParams::init(arch, &mut rng);
        let anchor = AnchorParams::freeze(&RouterParams::init(arch, &mut rng));
        let a = ex(vec![0.3, -0.7], 1);
        let plain = bce_loss_and_grad(&p, &[&a], 1.0).unwrap();
        assert_eq!(anchored_loss_and_grad(&p, &anchor, &[&a], 0.0, 1.0).unwrap(), plain);

        let at_anchor = AnchorParams::freeze(&p);
        let (reg, reg_grad) = anchor_penalty(&p, &at_anchor, 0.1).unwrap();
        assert_eq!(reg, 0.0);
        assert!(reg_grad.iter().all(|&g| g == 0.0));
        assert_eq!(
            anchored_loss_and_grad(&p, &at_anchor, &[&a], 0.1, 1.0).unwrap(),
            plain
        );

        let other = AnchorParams::freeze(&RouterParams::zeros(Architecture::Linear { inputs: 2 }));
        assert!(matches!(
            anchored_loss_and_grad(&p, &other, &[&a], 0.1, 1.0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = RouterParams::from_values(Architecture::Linear { inputs: 2 }, vec![0.3, -0.2, 0.1])
            .unwrap();
        let before = p.values.clone();
        let mut opt = OptimizerState::new(3, 1e-2, 0.0);
        optimizer_step(&mut p, &mut opt, &[0.0; 3]).unwrap();
        assert_eq!(p.values, before);
        assert_eq!(opt.step, 1);
        assert_eq!(p.version, 1);
    }

    #[test]
    fn one_step_descends_quadratic() {
        // f(w) = (w - 3)^2
        let mut p = RouterParams::from_values(Architecture::Linear { inputs: 0 }, vec![0.0]).unwrap();
        let f = |w: f64| (w - 3.0) * (w - 3.0);
        let mut opt = OptimizerState::new(1, 0.1, 0.0);
        let before = f(p.values[0]);
        let g = 2.0 * (p.values[0] - 3.0);
        optimizer_step(&mut p, &mut opt, &[g]).unwrap();
        assert!(f(p.values[0]) < before);
    }

    #[test]
    fn non_finite_gradient_is_a_training_error() {
        let mut p = RouterParams::zeros(Architecture::Linear { inputs: 1 });
        let mut opt = OptimizerState::new(2, 1e-3, 0.0);
        assert!(matches!(
            optimizer_step(&mut p, &mut opt, &[f64::NAN, 0.0]),
            Err(Error::Training(_))
        ));
    }

    #[test]
    fn separable_data_reaches_full_accuracy() {
        // separating line x0 + 2 x1 = 0.5
        let mut rng = seed::stream(5, &[]);
        let mut data = Vec::new();
        while data.len() < 200 {
            let x0: f64 = rng.random_range(-1.0..1.0);
            let x1: f64 = rng.random_range(-1.0..1.0);
            let margin = x0 + 2.0 * x1 - 0.5;
            if margin.abs() >= 0.2 {
                data.push(ex(vec![x0, x1], u8::from(margin > 0.0)));
            }
        }
        let batch: Vec<&LabeledStep> = data.iter().collect();
        let arch = Architecture::Linear { inputs: 2 };
        let mut p = RouterParams::init(arch, &mut rng);
        let mut opt = OptimizerState::new(arch.param_count(), 0.05, 0.0);
        for _ in 0..500 {
            let (_, g) = bce_loss_and_grad(&p, &batch, 1.0).unwrap();
            optimizer_step(&mut p, &mut opt, &g).unwrap();
        }
        let correct = data
            .iter()
            .filter(|e| (logit(&p, &e.features).unwrap() >= 0.0) == (e.label == 1))
            .count();
        assert_eq!(correct, data.len());
    }

    #[test]
    fn init_is_small_with_zero_bias() {
        let mut rng = seed::stream(9, &[]);
        let arch = Architecture::mlp(4, 3);
        let p = RouterParams::init(arch, &mut rng);
        assert_eq!(p.len(), 4 * 3 + 3 + 3 + 1);
        for (i, v) in p.values.iter().enumerate() {
            if arch.is_bias(i) {
                assert_eq!(*v, 0.0);
            } else {
                assert!(v.abs() <= 0.05);
            }
        }
    }
}
