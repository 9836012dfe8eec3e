//! Fixed-topology MLP with prediction, selection and auxiliary heads.
//!
//! ```text
//!             ┌── f: Linear → C logits (C+1 in DG mode) ── softmax ── p
//! x ── body ──┼── g: Linear → ReLU → Linear → 1 ── sigmoid ── g
//!   (ReLU)    └── h: Linear → C logits
//! ```
//!
//! Gradients are hand-derived layer by layer; `backward` is checked against
//! central finite differences in the test suite.

mod checkpoint;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::losses::{self, BatchLossBreakdown, HeadGrad, LossSpec};
use crate::scores::ProbVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadMode {
    /// Selection head `g` decides; `f` has C outputs.
    Sn,
    /// Deep Gamblers: `f` has C+1 outputs, the last one is the abstain class.
    Dg,
}

impl HeadMode {
    pub(crate) fn code(self) -> u32 {
        match self {
            HeadMode::Sn => 0,
            HeadMode::Dg => 1,
        }
    }

    pub(crate) fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(HeadMode::Sn),
            1 => Some(HeadMode::Dg),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    pub g_hidden: usize,
    pub mode: HeadMode,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(invalid("input_dim must be >= 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(invalid("hidden layer widths must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(invalid(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.g_hidden == 0 {
            return Err(invalid("g_hidden must be >= 1"));
        }
        Ok(())
    }

    /// Width of the representation shared by the three heads.
    pub fn feature_dim(&self) -> usize {
        self.hidden_dims.last().copied().unwrap_or(self.input_dim)
    }

    /// Width of the prediction head.
    pub fn f_outputs(&self) -> usize {
        match self.mode {
            HeadMode::Sn => self.num_classes,
            HeadMode::Dg => self.num_classes + 1,
        }
    }
}

/// Affine layer `y = W x + b` with `W` stored row-major (`outputs × inputs`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// He-style uniform init: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero bias.
    fn he_uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let weight = (0..inputs * outputs)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Dense {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.inputs);
        self.weight
            .chunks_exact(self.inputs)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    /// Accumulates parameter gradients for upstream `dy` at input `x` and
    /// returns the gradient with respect to `x`.
    fn backward_into(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for (o, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad.bias[o] += d;
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            let grow = &mut grad.weight[o * self.inputs..(o + 1) * self.inputs];
            for i in 0..self.inputs {
                grow[i] += d * x[i];
                dx[i] += d * row[i];
            }
        }
        dx
    }
}

/// Parameter tensors of a [`SelectiveModel`], also used as the gradient carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub body: Vec<Dense>,
    pub f_head: Dense,
    pub g_hidden: Dense,
    pub g_out: Dense,
    pub h_head: Dense,
}

impl Params {
    pub fn zeros(arch: &Architecture) -> Self {
        Self::build(arch, Dense::zeros)
    }

    fn build(arch: &Architecture, mut layer: impl FnMut(usize, usize) -> Dense) -> Self {
        let mut body = Vec::with_capacity(arch.hidden_dims.len());
        let mut width = arch.input_dim;
        for &h in &arch.hidden_dims {
            body.push(layer(width, h));
            width = h;
        }
        Params {
            body,
            f_head: layer(width, arch.f_outputs()),
            g_hidden: layer(width, arch.g_hidden),
            g_out: layer(arch.g_hidden, 1),
            h_head: layer(width, arch.num_classes),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.body
            .iter()
            .chain([&self.f_head, &self.g_hidden, &self.g_out, &self.h_head])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.body.iter_mut().chain([
            &mut self.f_head,
            &mut self.g_hidden,
            &mut self.g_out,
            &mut self.h_head,
        ])
    }

    /// All tensors in declaration order: each layer's weight then bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let n = self.num_params();
        if flat.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: flat.len() });
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[off..off + t.len()]);
            off += t.len();
        }
        Ok(())
    }

    pub fn same_shape(&self, other: &Params) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectiveModel {
    pub arch: Architecture,
    pub params: Params,
}

/// Gradients of a scalar objective, shape-congruent with the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Params);

impl Gradients {
    pub fn zeros_like(model: &SelectiveModel) -> Self {
        Gradients(Params::zeros(&model.arch))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutputs {
    /// Prediction-head logits (C, or C+1 in DG mode).
    pub z: Vec<f64>,
    /// Class posterior over the C real classes.
    pub p: ProbVector,
    /// Selection-head output in (0, 1).
    pub g: f64,
    pub h_logits: Vec<f64>,
    /// Probability of the abstain class, DG mode only.
    pub dg_abstain: Option<f64>,
}

impl HeadOutputs {
    /// Predicted class: argmax of `p`, lowest index on ties.
    pub fn prediction(&self) -> usize {
        self.p.argmax().0
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(z: &[f64]) -> Result<ProbVector> {
    if z.len() < 2 {
        return Err(invalid(format!("softmax needs at least 2 logits, got {}", z.len())));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(ProbVector::from_softmax(softmax_raw(z)))
}

pub(crate) fn softmax_raw(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Vector-Jacobian product through softmax: `p ⊙ (v − ⟨p, v⟩)`.
pub(crate) fn softmax_vjp(p: &[f64], v: &[f64]) -> Vec<f64> {
    let dot: f64 = p.iter().zip(v).map(|(a, b)| a * b).sum();
    p.iter().zip(v).map(|(pi, vi)| pi * (vi - dot)).collect()
}

fn sigmoid(a: f64) -> f64 {
    let s = if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    };
    // keep g strictly inside (0, 1) once the exponential saturates
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn relu_in_place(v: &mut [f64]) {
    for x in v {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// Intermediate activations kept for the backward pass.
struct Trace {
    /// `acts[0]` is the input, `acts[l + 1]` the output of body layer `l`.
    acts: Vec<Vec<f64>>,
    g_act: Vec<f64>,
    out: HeadOutputs,
}

pub fn init_model(
    input_dim: usize,
    hidden_dims: &[usize],
    num_classes: usize,
    g_hidden: usize,
    mode: HeadMode,
    seed: u64,
) -> Result<SelectiveModel> {
    let arch = Architecture {
        input_dim,
        hidden_dims: hidden_dims.to_vec(),
        num_classes,
        g_hidden,
        mode,
    };
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = Params::build(&arch, |i, o| Dense::he_uniform(i, o, &mut rng));
    Ok(SelectiveModel { arch, params })
}

impl SelectiveModel {
    /// A model with every weight and bias equal to zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let params = Params::zeros(&arch);
        Ok(SelectiveModel { arch, params })
    }

    pub fn mode(&self) -> HeadMode {
        self.arch.mode
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn forward(&self, x: &[f64]) -> Result<HeadOutputs> {
        Ok(self.trace(x)?.out)
    }

    fn trace(&self, x: &[f64]) -> Result<Trace> {
        if x.len() != self.arch.input_dim {
            return Err(Error::DimensionMismatch { expected: self.arch.input_dim, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input"));
        }
        let p = &self.params;
        let mut acts = Vec::with_capacity(p.body.len() + 1);
        acts.push(x.to_vec());
        for layer in &p.body {
            let mut a = layer.forward(acts.last().unwrap());
            relu_in_place(&mut a);
            acts.push(a);
        }
        let feat = acts.last().unwrap();

        let z = p.f_head.forward(feat);
        let h_logits = p.h_head.forward(feat);
        let mut g_act = p.g_hidden.forward(feat);
        relu_in_place(&mut g_act);
        let g = sigmoid(p.g_out.forward(&g_act)[0]);

        let c = self.arch.num_classes;
        let (probs, dg_abstain) = match self.arch.mode {
            HeadMode::Sn => (softmax_raw(&z), None),
            HeadMode::Dg => (softmax_raw(&z[..c]), Some(softmax_raw(&z)[c])),
        };
        let out = HeadOutputs {
            z,
            p: ProbVector::from_softmax(probs),
            g,
            h_logits,
            dg_abstain,
        };
        Ok(Trace { acts, g_act, out })
    }

    /// Jacobian of the prediction-head logits with respect to the input,
    /// row-major `f_outputs × input_dim`.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<Vec<f64>> {
        let trace = self.trace(x)?;
        let p = &self.params;
        let rows = self.arch.f_outputs();
        let d = self.arch.input_dim;
        let mut jac = vec![0.0; rows * d];
        let mut scratch = Params::zeros(&self.arch);
        for r in 0..rows {
            let mut dz = vec![0.0; rows];
            dz[r] = 1.0;
            let feat = trace.acts.last().unwrap();
            let mut delta = p.f_head.backward_into(feat, &dz, &mut scratch.f_head);
            for (l, layer) in p.body.iter().enumerate().rev() {
                mask_relu(&mut delta, &trace.acts[l + 1]);
                delta = layer.backward_into(&trace.acts[l], &delta, &mut scratch.body[l]);
            }
            jac[r * d..(r + 1) * d].copy_from_slice(&delta);
        }
        Ok(jac)
    }

    /// Gradient of the selection output `g(x)` with respect to all parameters.
    pub fn selection_gradient(&self, x: &[f64]) -> Result<Gradients> {
        let trace = self.trace(x)?;
        let mut grads = Gradients::zeros_like(self);
        let head = HeadGrad {
            dz: vec![0.0; self.arch.f_outputs()],
            dg: 1.0,
            dh: vec![0.0; self.arch.num_classes],
        };
        self.backprop(&trace, &head, &mut grads.0);
        Ok(grads)
    }

    fn backprop(&self, trace: &Trace, head: &HeadGrad, grads: &mut Params) {
        let p = &self.params;
        let feat = trace.acts.last().unwrap();
        let mut dfeat = p.f_head.backward_into(feat, &head.dz, &mut grads.f_head);
        let dh = p.h_head.backward_into(feat, &head.dh, &mut grads.h_head);

        let g = trace.out.g;
        let da = head.dg * g * (1.0 - g);
        let mut dg_act = p.g_out.backward_into(&trace.g_act, &[da], &mut grads.g_out);
        mask_relu(&mut dg_act, &trace.g_act);
        let dg = p.g_hidden.backward_into(feat, &dg_act, &mut grads.g_hidden);

        for ((a, b), c) in dfeat.iter_mut().zip(&dh).zip(&dg) {
            *a += b + c;
        }
        let mut delta = dfeat;
        for (l, layer) in p.body.iter().enumerate().rev() {
            mask_relu(&mut delta, &trace.acts[l + 1]);
            delta = layer.backward_into(&trace.acts[l], &delta, &mut grads.body[l]);
        }
    }
}

fn mask_relu(delta: &mut [f64], act: &[f64]) {
    for (d, &a) in delta.iter_mut().zip(act) {
        if a <= 0.0 {
            *d = 0.0;
        }
    }
}

/// Everything produced by one forward/backward pass over a batch.
#[derive(Debug, Clone)]
pub struct BackwardResult {
    pub breakdown: BatchLossBreakdown,
    pub grads: Gradients,
    pub outputs: Vec<HeadOutputs>,
}

/// Batch loss and its exact gradient.
pub fn backward(
    model: &SelectiveModel,
    inputs: &[&[f64]],
    labels: &[usize],
    spec: &LossSpec,
) -> Result<(f64, Gradients)> {
    let r = backward_full(model, inputs, labels, spec)?;
    Ok((r.breakdown.total, r.grads))
}

pub fn backward_full(
    model: &SelectiveModel,
    inputs: &[&[f64]],
    labels: &[usize],
    spec: &LossSpec,
) -> Result<BackwardResult> {
    if inputs.is_empty() {
        return Err(invalid("empty batch"));
    }
    if inputs.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: inputs.len(), got: labels.len() });
    }
    let traces = inputs
        .iter()
        .map(|x| model.trace(x))
        .collect::<Result<Vec<_>>>()?;
    let outputs: Vec<HeadOutputs> = traces.iter().map(|t| t.out.clone()).collect();
    let (breakdown, heads) = losses::evaluate(&outputs, labels, spec, model.mode(), true)?;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    let mut grads = Gradients::zeros_like(model);
    // fixed reduction order: samples in batch order
    for (trace, head) in traces.iter().zip(&heads) {
        model.backprop(trace, head, &mut grads.0);
    }
    Ok(BackwardResult { breakdown, grads, outputs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(mode: HeadMode) -> Architecture {
        Architecture {
            input_dim: 2,
            hidden_dims: vec![8],
            num_classes: 3,
            g_hidden: 8,
            mode,
        }
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_model(2, &[8], 3, 8, HeadMode::Sn, 7).unwrap();
        let b = init_model(2, &[8], 3, 8, HeadMode::Sn, 7).unwrap();
        let c = init_model(2, &[8], 3, 8, HeadMode::Sn, 8).unwrap();
        let bits = |m: &SelectiveModel| m.params.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert_ne!(bits(&a), bits(&c));
    }

    #[test]
    fn init_biases_are_zero() {
        let m = init_model(2, &[8], 3, 8, HeadMode::Sn, 123).unwrap();
        for layer in m.params.layers() {
            assert!(layer.bias.iter().all(|&b| b == 0.0));
            let bound = (6.0 / layer.inputs as f64).sqrt();
            assert!(layer.weight.iter().all(|w| w.abs() <= bound));
        }
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(init_model(0, &[8], 3, 8, HeadMode::Sn, 1).is_err());
        assert!(init_model(2, &[0], 3, 8, HeadMode::Sn, 1).is_err());
        assert!(init_model(2, &[8], 1, 8, HeadMode::Sn, 1).is_err());
        assert!(init_model(2, &[8], 3, 0, HeadMode::Sn, 1).is_err());
    }

    #[test]
    fn zero_model_is_uniform_and_half() {
        let m = SelectiveModel::zeros(arch(HeadMode::Sn)).unwrap();
        let out = m.forward(&[0.3, -2.0]).unwrap();
        for &pi in out.p.as_slice() {
            assert!((pi - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(out.g, 0.5);
    }

    #[test]
    fn dg_mode_exposes_abstain_probability() {
        let m = SelectiveModel::zeros(arch(HeadMode::Dg)).unwrap();
        let out = m.forward(&[1.0, 1.0]).unwrap();
        assert_eq!(out.z.len(), 4);
        assert_eq!(out.p.len(), 3);
        assert!((out.dg_abstain.unwrap() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn scaling_input_scales_linear_logits() {
        let mut m = init_model(2, &[], 3, 4, HeadMode::Sn, 3).unwrap();
        m.params.f_head.weight = vec![1.0, 0.5, 0.2, 0.1, 0.3, 0.3];
        let x = [1.0, 2.0];
        let a = m.forward(&x).unwrap();
        let b = m.forward(&[2.0, 4.0]).unwrap();
        for (za, zb) in a.z.iter().zip(&b.z) {
            assert!((2.0 * za - zb).abs() < 1e-12);
        }
        assert_eq!(a.prediction(), b.prediction());
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = init_model(2, &[8], 3, 8, HeadMode::Sn, 1).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(matches!(m.forward(&[1.0, f64::NAN]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap().as_slice(), &[0.5, 0.5]);
        let p = softmax(&[2f64.ln(), 0.0, 0.0]).unwrap();
        for (a, b) in p.as_slice().iter().zip([0.5, 0.25, 0.25]) {
            assert!((a - b).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_eq!(p.as_slice()[0], 1.0);
        assert!(p.as_slice()[1] >= 0.0 && p.as_slice()[1] < 1e-300);
        assert!(softmax(&[f64::NAN, 0.0]).is_err());
        let p = softmax(&[700.0, -700.0, 3.0]).unwrap();
        assert!((p.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn selection_gradient_matches_finite_difference() {
        let m = init_model(3, &[5], 3, 4, HeadMode::Sn, 11).unwrap();
        let x = [0.4, -1.2, 0.7];
        let grad = m.selection_gradient(&x).unwrap().0.to_flat();
        let theta = m.params.to_flat();
        let eps = 1e-6;
        for j in 0..theta.len() {
            let mut hi = m.clone();
            let mut lo = m.clone();
            let mut t = theta.clone();
            t[j] += eps;
            hi.params.set_flat(&t).unwrap();
            t[j] -= 2.0 * eps;
            lo.params.set_flat(&t).unwrap();
            let fd = (hi.forward(&x).unwrap().g - lo.forward(&x).unwrap().g) / (2.0 * eps);
            assert!((fd - grad[j]).abs() < 1e-8, "param {j}: {fd} vs {}", grad[j]);
        }
    }

    #[test]
    fn input_jacobian_of_linear_model_is_weight() {
        let m = init_model(3, &[], 2, 4, HeadMode::Sn, 5).unwrap();
        let jac = m.input_jacobian(&[0.1, 0.2, 0.3]).unwrap();
        assert_eq!(jac, m.params.f_head.weight);
    }
}
