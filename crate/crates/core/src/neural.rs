//! Fully-connected Q-network on a flat parameter vector.
//!
//! Parameters are stored layer by layer, each layer as its weight matrix
//! (row-major, `n_out × n_in`) followed by its biases. The flat layout is what
//! federation averages and what checkpoints serialize. Hidden layers use a
//! rectifier, the output layer is linear.

use std::fmt::Write as _;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng::StreamRng;
use rand::SeedableRng;

#[derive(Debug, Error, PartialEq)]
pub enum NeuralError {
    #[error("invalid layer spec: {0}")]
    Spec(String),
    #[error("non-finite input at feature {0}")]
    NonFiniteInput(usize),
    #[error("input has {got} features, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("shape mismatch: expected {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("empty training batch")]
    EmptyBatch,
    #[error("batch arrays disagree in length")]
    RaggedBatch,
    #[error("action index {action} out of range for {outputs} outputs")]
    ActionOutOfRange { action: usize, outputs: usize },
    #[error("checkpoint format error at line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("checkpoint io error: {0}")]
    Io(String),
}

/// Layer widths from input to output.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    sizes: Vec<usize>,
}

/// Hidden widths of the base offloading network.
pub const BASE_HIDDEN: [usize; 5] = [30, 64, 16, 32, 32];
/// Block appended (possibly several times) to build deeper variants.
pub const STACK_BLOCK: [usize; 3] = [16, 32, 32];

impl LayerSpec {
    pub fn new(sizes: Vec<usize>) -> Result<Self, NeuralError> {
        if sizes.len() < 2 {
            return Err(NeuralError::Spec(format!(
                "need at least input and output widths, got {sizes:?}"
            )));
        }
        if sizes.contains(&0) {
            return Err(NeuralError::Spec(format!("zero-width layer in {sizes:?}")));
        }
        Ok(Self { sizes })
    }

    /// Offloading Q-network: 6 state features in, 3 action values out.
    pub fn offloading(hidden: &[usize]) -> Result<Self, NeuralError> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(crate::env::STATE_DIM);
        sizes.extend_from_slice(hidden);
        sizes.push(crate::env::Action::COUNT);
        Self::new(sizes)
    }

    /// Base architecture with `blocks` extra `[16, 32, 32]` blocks on top.
    pub fn stacked(blocks: usize) -> Self {
        let mut hidden = BASE_HIDDEN.to_vec();
        for _ in 0..blocks {
            hidden.extend_from_slice(&STACK_BLOCK);
        }
        Self::offloading(&hidden).expect("nonzero widths")
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn widest(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(0)
    }
}

/// Flat network parameters together with the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    spec: LayerSpec,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(spec: LayerSpec) -> Self {
        let n = spec.param_count();
        Self {
            spec,
            values: vec![0.0; n],
        }
    }

    pub fn from_values(spec: LayerSpec, values: Vec<f64>) -> Result<Self, NeuralError> {
        let expected = spec.param_count();
        if values.len() != expected {
            return Err(NeuralError::Shape {
                expected,
                got: values.len(),
            });
        }
        Ok(Self { spec, values })
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Weights and biases of layer `l` as slices.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (off, n_in, n_out) = self.layer_offset(l);
        let w = &self.values[off..off + n_in * n_out];
        let b = &self.values[off + n_in * n_out..off + n_in * n_out + n_out];
        (w, b)
    }

    fn layer_offset(&self, l: usize) -> (usize, usize, usize) {
        let sizes = self.spec.sizes();
        let off = sizes[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        (off, sizes[l], sizes[l + 1])
    }

    /// FNV-1a hash of the bit patterns, for identifying models in reports.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for byte in v.to_bits().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// He-normal weights (variance `2/n_in`) and zero biases.
pub fn init_network(spec: &LayerSpec, seed: u64) -> ParamVector {
    let mut rng = StreamRng::seed_from_u64(seed);
    let mut params = ParamVector::zeros(spec.clone());
    let mut off = 0;
    for w in spec.sizes().windows(2) {
        let (n_in, n_out) = (w[0], w[1]);
        let normal = Normal::new(0.0, (2.0 / n_in as f64).sqrt()).expect("finite std");
        for v in &mut params.values[off..off + n_in * n_out] {
            *v = normal.sample(&mut rng);
        }
        off += n_in * n_out + n_out;
    }
    params
}

fn check_input(spec: &LayerSpec, x: &[f64]) -> Result<(), NeuralError> {
    if x.len() != spec.inputs() {
        return Err(NeuralError::InputWidth {
            expected: spec.inputs(),
            got: x.len(),
        });
    }
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(NeuralError::NonFiniteInput(i));
    }
    Ok(())
}

/// Network output for one input vector.
pub fn forward(params: &ParamVector, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
    check_input(params.spec(), x)?;
    let mut scratch = Scratch::new(params.spec());
    Ok(scratch.forward(params, x).to_vec())
}

/// Reusable activation buffers for one architecture.
#[derive(Debug, Clone)]
pub struct Scratch {
    /// Post-activation outputs of every layer, input first.
    acts: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

impl Scratch {
    pub fn new(spec: &LayerSpec) -> Self {
        Self {
            acts: spec.sizes().iter().map(|&n| vec![0.0; n]).collect(),
            delta: Vec::with_capacity(spec.widest()),
            next_delta: Vec::with_capacity(spec.widest()),
        }
    }

    /// Forward pass keeping every layer's activations. Input is assumed
    /// validated.
    pub fn forward(&mut self, params: &ParamVector, x: &[f64]) -> &[f64] {
        let sizes = params.spec().sizes();
        let last = sizes.len() - 2;
        self.acts[0].copy_from_slice(x);
        let mut off = 0;
        for l in 0..=last {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let w = &params.values[off..off + n_in * n_out];
            let b = &params.values[off + n_in * n_out..off + n_in * n_out + n_out];
            let (before, after) = self.acts.split_at_mut(l + 1);
            let input = &before[l];
            let out = &mut after[0];
            for (j, o) in out.iter_mut().enumerate() {
                let row = &w[j * n_in..(j + 1) * n_in];
                let z = b[j] + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                *o = if l == last { z } else { z.max(0.0) };
            }
            off += n_in * n_out + n_out;
        }
        &self.acts[last + 1]
    }

    /// Accumulates `scale · ∂out[action]/∂θ` into `grad`, using the
    /// activations of the preceding [`Scratch::forward`].
    fn backward(&mut self, params: &ParamVector, action: usize, scale: f64, grad: &mut [f64]) {
        let sizes = params.spec().sizes();
        let n_layers = sizes.len() - 1;
        self.delta.clear();
        self.delta.resize(sizes[n_layers], 0.0);
        self.delta[action] = scale;

        let mut off_end = params.len();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let off = off_end - (n_in * n_out + n_out);
            let input = &self.acts[l];
            let (gw, gb) = grad[off..off_end].split_at_mut(n_in * n_out);
            for j in 0..n_out {
                let d = self.delta[j];
                if d == 0.0 {
                    continue;
                }
                gb[j] += d;
                for (g, a) in gw[j * n_in..(j + 1) * n_in].iter_mut().zip(input) {
                    *g += d * a;
                }
            }
            if l > 0 {
                let w = &params.values[off..off + n_in * n_out];
                self.next_delta.clear();
                self.next_delta.resize(n_in, 0.0);
                for j in 0..n_out {
                    let d = self.delta[j];
                    if d == 0.0 {
                        continue;
                    }
                    for (nd, wv) in self.next_delta.iter_mut().zip(&w[j * n_in..(j + 1) * n_in]) {
                        *nd += d * wv;
                    }
                }
                // Rectifier derivative on the layer input.
                for (nd, a) in self.next_delta.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *nd = 0.0;
                    }
                }
                std::mem::swap(&mut self.delta, &mut self.next_delta);
            }
            off_end = off;
        }
    }
}

/// Mean squared error of `Q(s)[a]` against `targets`, and its gradient.
///
/// Only the taken action contributes; other outputs get zero gradient.
pub fn loss_and_gradients<S: AsRef<[f64]>>(
    params: &ParamVector,
    states: &[S],
    actions: &[usize],
    targets: &[f64],
) -> Result<(f64, ParamVector), NeuralError> {
    let mut scratch = Scratch::new(params.spec());
    let mut grad = ParamVector::zeros(params.spec().clone());
    let loss = loss_and_gradients_into(params, states, actions, targets, &mut scratch, &mut grad)?;
    Ok((loss, grad))
}

/// Like [`loss_and_gradients`] but reuses caller buffers. `grad` is
/// overwritten.
pub fn loss_and_gradients_into<S: AsRef<[f64]>>(
    params: &ParamVector,
    states: &[S],
    actions: &[usize],
    targets: &[f64],
    scratch: &mut Scratch,
    grad: &mut ParamVector,
) -> Result<f64, NeuralError> {
    if states.is_empty() {
        return Err(NeuralError::EmptyBatch);
    }
    if states.len() != actions.len() || states.len() != targets.len() {
        return Err(NeuralError::RaggedBatch);
    }
    if grad.spec != params.spec {
        return Err(NeuralError::Shape {
            expected: params.len(),
            got: grad.len(),
        });
    }
    let outputs = params.spec().outputs();
    let n = states.len() as f64;
    grad.values.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for ((s, &a), &target) in states.iter().zip(actions).zip(targets) {
        let s = s.as_ref();
        check_input(params.spec(), s)?;
        if a >= outputs {
            return Err(NeuralError::ActionOutOfRange { action: a, outputs });
        }
        if !target.is_finite() {
            return Err(NeuralError::NonFiniteInput(a));
        }
        let q = scratch.forward(params, s)[a];
        let err = q - target;
        loss += err * err;
        scratch.backward(params, a, 2.0 * err / n, &mut grad.values);
    }
    Ok(loss / n)
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    /// One bias-corrected Adam step on `params`.
    pub fn apply_update(
        &mut self,
        params: &mut ParamVector,
        grad: &ParamVector,
    ) -> Result<(), NeuralError> {
        if grad.len() != params.len() || self.m.len() != params.len() {
            return Err(NeuralError::Shape {
                expected: params.len(),
                got: grad.len(),
            });
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let step_size = self.lr / c1;
        let c2_sqrt = c2.sqrt();
        for (((p, g), m), v) in params
            .values
            .iter_mut()
            .zip(&grad.values)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= step_size * *m / ((*v).sqrt() / c2_sqrt + self.eps);
        }
        Ok(())
    }
}

/// Text checkpoint: a `layers` header line with the widths, then one value
/// per line in parameter order. Values round-trip exactly.
pub fn export_params(params: &ParamVector) -> String {
    let mut out = String::with_capacity(params.len() * 24 + 32);
    out.push_str("layers");
    for w in params.spec().sizes() {
        write!(out, " {w}").unwrap();
    }
    out.push('\n');
    for v in params.values() {
        writeln!(out, "{v:?}").unwrap();
    }
    out
}

/// Parses a checkpoint, requiring it to match `expected` when given.
pub fn import_params(text: &str, expected: Option<&LayerSpec>) -> Result<ParamVector, NeuralError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(NeuralError::Format {
        line: 1,
        msg: "missing header".into(),
    })?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("layers") {
        return Err(NeuralError::Format {
            line: 1,
            msg: "header must start with `layers`".into(),
        });
    }
    let sizes = fields
        .map(|f| f.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| NeuralError::Format {
            line: 1,
            msg: e.to_string(),
        })?;
    let spec = LayerSpec::new(sizes).map_err(|e| NeuralError::Format {
        line: 1,
        msg: e.to_string(),
    })?;
    if let Some(exp) = expected {
        if exp != &spec {
            return Err(NeuralError::Format {
                line: 1,
                msg: format!(
                    "layers {:?} do not match expected {:?}",
                    spec.sizes(),
                    exp.sizes()
                ),
            });
        }
    }
    let mut values = Vec::with_capacity(spec.param_count());
    for (i, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| NeuralError::Format {
            line: i + 2,
            msg: format!("not a number: {line:?}"),
        })?;
        if !v.is_finite() {
            return Err(NeuralError::Format {
                line: i + 2,
                msg: "non-finite parameter".into(),
            });
        }
        values.push(v);
    }
    if values.len() != spec.param_count() {
        return Err(NeuralError::Format {
            line: values.len() + 2,
            msg: format!(
                "expected {} parameters, found {}",
                spec.param_count(),
                values.len()
            ),
        });
    }
    Ok(ParamVector { spec, values })
}

pub fn save_checkpoint(params: &ParamVector, path: &Path) -> Result<(), NeuralError> {
    std::fs::write(path, export_params(params))
        .map_err(|e| NeuralError::Io(format!("{}: {e}", path.display())))
}

pub fn load_checkpoint(
    path: &Path,
    expected: Option<&LayerSpec>,
) -> Result<ParamVector, NeuralError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| NeuralError::Io(format!("{}: {e}", path.display())))?;
    import_params(&text, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count() {
        let spec = LayerSpec::new(vec![6, 4, 3]).unwrap();
        assert_eq!(spec.param_count(), 43);
        assert_eq!(init_network(&spec, 1).len(), 43);
        assert_eq!(LayerSpec::stacked(0).sizes(), &[6, 30, 64, 16, 32, 32, 3]);
        assert_eq!(LayerSpec::stacked(1).sizes().len(), 10);
    }

    #[test]
    fn invalid_specs() {
        assert!(LayerSpec::new(vec![6]).is_err());
        assert!(LayerSpec::new(vec![6, 0, 3]).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = LayerSpec::new(vec![6, 4, 3]).unwrap();
        let a = init_network(&spec, 9);
        assert_eq!(a, init_network(&spec, 9));
        assert_ne!(a, init_network(&spec, 10));
        assert!(a.layer(0).1.iter().all(|&b| b == 0.0));
        assert!(a.layer(1).1.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn zero_network_and_bias_passthrough() {
        let spec = LayerSpec::new(vec![6, 5, 3]).unwrap();
        let mut p = ParamVector::zeros(spec);
        let x = [0.3, -1.0, 2.0, 0.5, 0.1, 9.0];
        assert_eq!(forward(&p, &x).unwrap(), vec![0.0, 0.0, 0.0]);
        let n = p.len();
        p.values_mut()[n - 3..].copy_from_slice(&[1.0, 2.0, 3.0]);
        assert_eq!(forward(&p, &x).unwrap(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn single_linear_layer_selects_inputs() {
        let spec = LayerSpec::new(vec![6, 3]).unwrap();
        let mut w = vec![0.0; 18];
        w[0] = 1.0; // out0 <- x0
        w[6 + 2] = 1.0; // out1 <- x2
        w[12 + 5] = 1.0; // out2 <- x5
        w.extend_from_slice(&[0.0; 3]);
        let p = ParamVector::from_values(spec, w).unwrap();
        let x = [1.5, 7.0, -2.0, 0.0, 0.0, 4.0];
        assert_eq!(forward(&p, &x).unwrap(), vec![1.5, -2.0, 4.0]);
    }

    #[test]
    fn forward_rejects_bad_input() {
        let p = init_network(&LayerSpec::new(vec![6, 3]).unwrap(), 0);
        assert_eq!(
            forward(&p, &[0.0, 0.0, f64::NAN, 0.0, 0.0, 0.0]),
            Err(NeuralError::NonFiniteInput(2))
        );
        assert!(matches!(
            forward(&p, &[0.0; 5]),
            Err(NeuralError::InputWidth { .. })
        ));
    }

    #[test]
    fn perfect_fit_has_zero_loss_and_gradient() {
        let p = init_network(&LayerSpec::new(vec![6, 8, 3]).unwrap(), 4);
        let states = vec![
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
            vec![1.0, 0.0, -1.0, 0.5, 0.0, 2.0],
        ];
        let actions = vec![0, 2];
        let targets: Vec<f64> = states
            .iter()
            .zip(&actions)
            .map(|(s, &a)| forward(&p, s).unwrap()[a])
            .collect();
        let (loss, grad) = loss_and_gradients(&p, &states, &actions, &targets).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.values().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn empty_batch_is_rejected() {
        let p = init_network(&LayerSpec::new(vec![6, 3]).unwrap(), 0);
        let states: Vec<Vec<f64>> = vec![];
        assert_eq!(
            loss_and_gradients(&p, &states, &[], &[]).unwrap_err(),
            NeuralError::EmptyBatch
        );
    }

    #[test]
    fn adam_bookkeeping() {
        let mut p = init_network(&LayerSpec::new(vec![6, 4, 3]).unwrap(), 2);
        let before = p.clone();
        let mut adam = AdamState::new(p.len(), 1e-3);
        let zero = ParamVector::zeros(p.spec().clone());
        adam.apply_update(&mut p, &zero).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.step, 1);
        adam.apply_update(&mut p, &zero).unwrap();
        assert_eq!(adam.step, 2);

        let wrong = ParamVector::zeros(LayerSpec::new(vec![6, 3]).unwrap());
        assert!(adam.apply_update(&mut p, &wrong).is_err());
    }

    #[test]
    fn adam_minimizes_scalar_quadratic() {
        // f(w) = w², gradient 2w, through a 1→1 linear "network".
        let spec = LayerSpec::new(vec![1, 1]).unwrap();
        let mut p = ParamVector::from_values(spec.clone(), vec![1.0, 0.0]).unwrap();
        let mut adam = AdamState::new(2, 0.05);
        for _ in 0..500 {
            let w = p.values()[0];
            let g = ParamVector::from_values(spec.clone(), vec![2.0 * w, 0.0]).unwrap();
            adam.apply_update(&mut p, &g).unwrap();
        }
        assert!(p.values()[0].abs() < 0.01, "w = {}", p.values()[0]);
    }

    #[test]
    fn checkpoint_errors() {
        let spec = LayerSpec::new(vec![6, 4, 3]).unwrap();
        let p = init_network(&spec, 1);
        let text = export_params(&p);
        assert_eq!(text.lines().count(), 1 + 43);
        let truncated: String = text.lines().take(20).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            import_params(&truncated, Some(&spec)),
            Err(NeuralError::Format { .. })
        ));
        let other = LayerSpec::new(vec![6, 5, 3]).unwrap();
        assert!(import_params(&text, Some(&other)).is_err());
        assert!(import_params("weights 6 3\n", None).is_err());
    }
}
