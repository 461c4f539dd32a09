//! The trainable embedding function: a small MLP with relu hidden layers and
//! an identity output layer, plus its optimizers and checkpoint format.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Leading magic string of the checkpoint format.
pub const CHECKPOINT_MAGIC: &str = "ICNNMETRIC1";

/// Multi-layer perceptron encoder. Weights are row-major `[d_in, d_out]`,
/// biases `[1, d_out]`; relu on hidden layers, identity on the output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpEncoder {
    layer_dims: Vec<usize>,
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
}

/// Tape handles from one `encode` call: the output plus the parameter leaves,
/// needed to look up gradients for the optimizer step.
pub struct EncoderPass {
    pub output: Var,
    pub weight_vars: Vec<Var>,
    pub bias_vars: Vec<Var>,
}

/// Uniform init scaled by 1/sqrt(fan\_in), zero biases, deterministic per seed.
pub fn encoder_init(seed: u64, layer_dims: &[usize]) -> Result<MlpEncoder> {
    if layer_dims.len() < 2 {
        return Err(Error::invalid(format!(
            "encoder needs at least input and output dims, got {layer_dims:?}"
        )));
    }
    if layer_dims.iter().any(|&d| d == 0) {
        return Err(Error::invalid(format!(
            "encoder dims must be positive, got {layer_dims:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in layer_dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
        weights.push(Tensor::matrix(fan_in, fan_out, data)?);
        biases.push(Tensor::zeros(vec![1, fan_out]));
    }
    Ok(MlpEncoder { layer_dims: layer_dims.to_vec(), weights, biases })
}

impl MlpEncoder {
    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn weights(&self) -> &[Tensor] {
        &self.weights
    }

    pub fn biases(&self) -> &[Tensor] {
        &self.biases
    }

    pub fn weights_mut(&mut self) -> &mut [Tensor] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Tensor] {
        &mut self.biases
    }

    fn check_batch(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, d] if *d == self.layer_dims[0] => Ok(()),
            other => Err(Error::ShapeMismatch {
                op: "encode",
                lhs: other.to_vec(),
                rhs: vec![0, self.layer_dims[0]],
            }),
        }
    }

    /// Forward pass recorded on the tape, differentiable w.r.t. the weights.
    ///
    /// The bias is broadcast across rows via a ones-column matmul so its
    /// gradient accumulates over the batch.
    pub fn encode(&self, tape: &mut Tape, batch: &Tensor) -> Result<EncoderPass> {
        self.check_batch(batch.shape())?;
        let n = batch.shape()[0];
        let ones = tape.constant(Tensor::full(vec![n, 1], 1.0));
        let mut h = tape.leaf(batch.clone());
        let mut weight_vars = Vec::new();
        let mut bias_vars = Vec::new();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let wv = tape.leaf(w.clone());
            let bv = tape.leaf(b.clone());
            let hw = tape.matmul(h, wv)?;
            let bb = tape.matmul(ones, bv)?;
            h = tape.add(hw, bb)?;
            if l < last {
                h = tape.relu(h)?;
            }
            weight_vars.push(wv);
            bias_vars.push(bv);
        }
        Ok(EncoderPass { output: h, weight_vars, bias_vars })
    }

    /// Plain forward pass without a tape, for frozen evaluation.
    pub fn encode_values(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch.shape())?;
        let n = batch.shape()[0];
        let mut h = batch.clone();
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (din, dout) = w.dims2()?;
            let hv = h.data();
            let wv = w.data();
            let bv = b.data();
            let mut out = vec![0.0; n * dout];
            for i in 0..n {
                let orow = &mut out[i * dout..(i + 1) * dout];
                orow.copy_from_slice(bv);
                for p in 0..din {
                    let hip = hv[i * din + p];
                    if hip == 0.0 {
                        continue;
                    }
                    let wrow = &wv[p * dout..(p + 1) * dout];
                    for j in 0..dout {
                        orow[j] += hip * wrow[j];
                    }
                }
            }
            if l < last {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            h = Tensor::matrix(n, dout, out)?;
        }
        Ok(h)
    }

    /// Write the checkpoint: magic line, dims, then per layer the row-major
    /// weight rows and the bias row, at full round-trip precision.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(f, "{CHECKPOINT_MAGIC}")?;
        let dims: Vec<String> = self.layer_dims.iter().map(|d| d.to_string()).collect();
        writeln!(f, "dims {}", dims.join(" "))?;
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let (r, c) = w.dims2()?;
            writeln!(f, "weight {r} {c}")?;
            for i in 0..r {
                let row: Vec<String> = w.row(i).iter().map(|v| format!("{v:.17e}")).collect();
                writeln!(f, "{}", row.join(" "))?;
            }
            let row: Vec<String> = b.data().iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(f, "bias {}", row.join(" "))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MlpEncoder> {
        let f = std::fs::File::open(path)?;
        let mut lines = BufReader::new(f).lines();
        let mut next = || -> Result<String> {
            lines
                .next()
                .transpose()?
                .ok_or_else(|| Error::data("checkpoint truncated"))
        };
        let magic = next()?;
        if magic.trim() != CHECKPOINT_MAGIC {
            return Err(Error::data(format!(
                "bad checkpoint magic {:?}, expected {CHECKPOINT_MAGIC:?}",
                magic.trim()
            )));
        }
        let dims_line = next()?;
        let dims: Vec<usize> = dims_line
            .strip_prefix("dims ")
            .ok_or_else(|| Error::data("missing dims line"))?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| Error::data(format!("bad dim: {e}"))))
            .collect::<Result<_>>()?;
        if dims.len() < 2 {
            return Err(Error::data("checkpoint has fewer than two dims"));
        }
        let parse_row = |line: &str| -> Result<Vec<f64>> {
            line.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::data(format!("bad value: {e}"))))
                .collect()
        };
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let header = next()?;
            let expect = format!("weight {} {}", w[0], w[1]);
            if header.trim() != expect {
                return Err(Error::data(format!(
                    "expected {expect:?}, found {:?}",
                    header.trim()
                )));
            }
            let mut data = Vec::with_capacity(w[0] * w[1]);
            for _ in 0..w[0] {
                let row = parse_row(&next()?)?;
                if row.len() != w[1] {
                    return Err(Error::data("weight row has wrong width"));
                }
                data.extend(row);
            }
            weights.push(Tensor::matrix(w[0], w[1], data)?);
            let bias_line = next()?;
            let vals = parse_row(
                bias_line
                    .strip_prefix("bias ")
                    .ok_or_else(|| Error::data("missing bias line"))?,
            )?;
            if vals.len() != w[1] {
                return Err(Error::data("bias row has wrong width"));
            }
            biases.push(Tensor::matrix(1, w[1], vals)?);
        }
        Ok(MlpEncoder { layer_dims: dims, weights, biases })
    }
}

/// Optimizer flavor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

/// Per-parameter accumulator state for sgd-momentum or adam.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step_count: u64,
    // one accumulator pair per parameter tensor, weights then biases
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl OptimizerState {
    pub fn sgd_momentum(enc: &MlpEncoder, learning_rate: f64, momentum: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::SgdMomentum,
            learning_rate,
            momentum,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            step_count: 0,
            first: zero_like_params(enc),
            second: Vec::new(),
        }
    }

    pub fn adam(enc: &MlpEncoder, learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        OptimizerState {
            kind: OptimizerKind::Adam,
            learning_rate,
            momentum: 0.0,
            beta1,
            beta2,
            epsilon,
            step_count: 0,
            first: zero_like_params(enc),
            second: zero_like_params(enc),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.learning_rate = lr;
    }

    /// One update over all encoder parameters.
    ///
    /// sgd-momentum: v = momentum*v + g; w -= lr*v.
    /// adam: bias-corrected first/second moments.
    pub fn apply_update(
        &mut self,
        enc: &mut MlpEncoder,
        grads: &Gradients,
        pass: &EncoderPass,
    ) -> Result<()> {
        let n_layers = enc.weights.len();
        if pass.weight_vars.len() != n_layers || pass.bias_vars.len() != n_layers {
            return Err(Error::invalid(
                "encoder pass does not cover all parameters".to_string(),
            ));
        }
        self.step_count += 1;
        let t = self.step_count;
        for l in 0..n_layers {
            for (is_bias, var) in [(false, pass.weight_vars[l]), (true, pass.bias_vars[l])] {
                let param = if is_bias { &mut enc.biases[l] } else { &mut enc.weights[l] };
                let g = grads.checked_get(var, param.shape()).map_err(|_| {
                    Error::invalid(format!(
                        "missing gradient for {} of layer {l}",
                        if is_bias { "bias" } else { "weight" }
                    ))
                })?;
                let slot = l * 2 + usize::from(is_bias);
                match self.kind {
                    OptimizerKind::SgdMomentum => {
                        let v = &mut self.first[slot];
                        for ((w, vi), gi) in param
                            .data_mut()
                            .iter_mut()
                            .zip(v.data_mut())
                            .zip(g.data())
                        {
                            *vi = self.momentum * *vi + gi;
                            *w -= self.learning_rate * *vi;
                        }
                    }
                    OptimizerKind::Adam => {
                        let corr1 = 1.0 - self.beta1.powi(t as i32);
                        let corr2 = 1.0 - self.beta2.powi(t as i32);
                        let m = &mut self.first[slot];
                        let v = &mut self.second[slot];
                        for ((w, (mi, vi)), gi) in param
                            .data_mut()
                            .iter_mut()
                            .zip(m.data_mut().iter_mut().zip(v.data_mut()))
                            .zip(g.data())
                        {
                            *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                            *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                            let mhat = *mi / corr1;
                            let vhat = *vi / corr2;
                            *w -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn zero_like_params(enc: &MlpEncoder) -> Vec<Tensor> {
    let mut out = Vec::with_capacity(enc.weights.len() * 2);
    for l in 0..enc.weights.len() {
        out.push(Tensor::zeros(enc.weights[l].shape().to_vec()));
        out.push(Tensor::zeros(enc.biases[l].shape().to_vec()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = encoder_init(7, &[8, 16, 4]).unwrap();
        let b = encoder_init(7, &[8, 16, 4]).unwrap();
        assert_eq!(a, b);
        let c = encoder_init(8, &[8, 16, 4]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_shapes_and_zero_biases() {
        let e = encoder_init(0, &[8, 16, 4]).unwrap();
        assert_eq!(e.weights()[0].shape(), &[8, 16]);
        assert_eq!(e.weights()[1].shape(), &[16, 4]);
        assert!(e.biases().iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(encoder_init(0, &[8]).is_err());
        assert!(encoder_init(0, &[8, 0, 4]).is_err());
    }

    #[test]
    fn identity_weights_pass_nonnegative_input_through() {
        let mut e = encoder_init(0, &[3, 3, 3]).unwrap();
        e.weights_mut()[0] = Tensor::eye(3);
        e.weights_mut()[1] = Tensor::eye(3);
        let x = Tensor::matrix(2, 3, vec![0.0, 1.5, 2.0, 0.25, 0.0, 3.0]).unwrap();
        let y = e.encode_values(&x).unwrap();
        assert_eq!(y.data(), x.data());
        // and on the tape
        let mut t = Tape::new();
        let pass = e.encode(&mut t, &x).unwrap();
        assert_eq!(t.value(pass.output).data(), x.data());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let e = encoder_init(3, &[4, 8, 2]).unwrap();
        let y = e.encode_values(&Tensor::zeros(vec![3, 4])).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_matches_loop_oracle() {
        let e = encoder_init(11, &[5, 7, 3]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let x: Vec<f64> = (0..20).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let xb = Tensor::matrix(4, 5, x.clone()).unwrap();

        // independent loop oracle
        let oracle = {
            let mut h = vec![vec![0.0; 7]; 4];
            for i in 0..4 {
                for j in 0..7 {
                    let mut acc = e.biases()[0].data()[j];
                    for p in 0..5 {
                        acc += x[i * 5 + p] * e.weights()[0].data()[p * 7 + j];
                    }
                    h[i][j] = acc.max(0.0);
                }
            }
            let mut out = vec![vec![0.0; 3]; 4];
            for i in 0..4 {
                for j in 0..3 {
                    let mut acc = e.biases()[1].data()[j];
                    for p in 0..7 {
                        acc += h[i][p] * e.weights()[1].data()[p * 3 + j];
                    }
                    out[i][j] = acc;
                }
            }
            out
        };

        let y = e.encode_values(&xb).unwrap();
        let mut t = Tape::new();
        let pass = e.encode(&mut t, &xb).unwrap();
        for i in 0..4 {
            for j in 0..3 {
                assert_relative_eq!(y.data()[i * 3 + j], oracle[i][j], max_relative = 1e-12);
                assert_relative_eq!(
                    t.value(pass.output).data()[i * 3 + j],
                    oracle[i][j],
                    max_relative = 1e-12
                );
            }
        }
    }

    #[test]
    fn encode_rejects_dim_mismatch() {
        let e = encoder_init(0, &[4, 2]).unwrap();
        assert!(e.encode_values(&Tensor::zeros(vec![3, 5])).is_err());
    }

    fn scalar_encoder(w0: f64) -> MlpEncoder {
        let mut e = encoder_init(0, &[1, 1]).unwrap();
        e.weights_mut()[0] = Tensor::matrix(1, 1, vec![w0]).unwrap();
        e
    }

    /// Run `steps` optimizer updates; loss = w*1 + b gives the weight a
    /// constant gradient of exactly 1 regardless of the parameter values.
    fn run_steps(opt: &mut OptimizerState, enc: &mut MlpEncoder, steps: usize) {
        for _ in 0..steps {
            let mut t = Tape::new();
            let pass = enc.encode(&mut t, &Tensor::matrix(1, 1, vec![1.0]).unwrap()).unwrap();
            let loss = t.sum(pass.output).unwrap();
            let g = t.backward(loss).unwrap();
            opt.apply_update(enc, &g, &pass).unwrap();
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_unchanged() {
        let mut enc = scalar_encoder(0.0);
        let mut opt = OptimizerState::sgd_momentum(&enc, 0.0, 0.9);
        run_steps(&mut opt, &mut enc, 3);
        assert_eq!(enc.weights()[0].data()[0], 0.0);
    }

    #[test]
    fn sgd_single_step() {
        let mut enc = scalar_encoder(0.0);
        let mut opt = OptimizerState::sgd_momentum(&enc, 0.1, 0.0);
        run_steps(&mut opt, &mut enc, 1);
        assert_relative_eq!(enc.weights()[0].data()[0], -0.1, max_relative = 1e-15);
    }

    #[test]
    fn sgd_two_momentum_steps() {
        // v1 = 1, w1 = -0.1; v2 = 0.9 + 1 = 1.9, w2 = -0.1 - 0.19 = -0.29
        let mut enc = scalar_encoder(0.0);
        let mut opt = OptimizerState::sgd_momentum(&enc, 0.1, 0.9);
        run_steps(&mut opt, &mut enc, 2);
        assert_relative_eq!(enc.weights()[0].data()[0], -0.29, max_relative = 1e-12);
    }

    #[test]
    fn adam_matches_ten_step_hand_recurrence() {
        let (lr, b1, b2, eps) = (0.01, 0.9, 0.999, 1e-8);
        let mut enc = scalar_encoder(0.5);
        let mut opt = OptimizerState::adam(&enc, lr, b1, b2, eps);

        // textbook recurrence with the same constant gradient g = 1
        let mut w = 0.5;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=10 {
            let g = 1.0;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mhat = m / (1.0 - b1.powi(t));
            let vhat = v / (1.0 - b2.powi(t));
            w -= lr * mhat / (vhat.sqrt() + eps);
        }

        run_steps(&mut opt, &mut enc, 10);
        assert_relative_eq!(enc.weights()[0].data()[0], w, max_relative = 1e-12);
        assert_eq!(opt.step_count(), 10);
    }

    #[test]
    fn apply_update_rejects_foreign_gradients() {
        let mut enc = encoder_init(0, &[2, 2]).unwrap();
        let mut opt = OptimizerState::sgd_momentum(&enc, 0.1, 0.0);
        // gradients from an unrelated tape do not cover the encoder params
        let mut t = Tape::new();
        let x = t.leaf(Tensor::scalar(1.0));
        let g = t.backward(x).unwrap();
        let mut t2 = Tape::new();
        let pass = enc
            .encode(&mut t2, &Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap())
            .unwrap();
        assert!(opt.apply_update(&mut enc, &g, &pass).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let e = encoder_init(21, &[6, 9, 4]).unwrap();
        e.save(&path).unwrap();
        let loaded = MlpEncoder::load(&path).unwrap();
        assert_eq!(e, loaded);

        let content = std::fs::read_to_string(&path).unwrap();
        assert!(content.starts_with(CHECKPOINT_MAGIC));

        let bad = dir.path().join("bad.ckpt");
        std::fs::write(&bad, "NOTAMAGIC\n").unwrap();
        assert!(MlpEncoder::load(&bad).is_err());
    }
}
