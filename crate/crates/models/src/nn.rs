//! Named parameters and the handful of layers both networks are built from.
//!
//! Every trainable array and every running statistic lives in a
//! [`ParamStore`] under a canonical dotted name. Checkpoints, surgery and
//! freezing all work on those names. Initial values are drawn from a
//! ChaCha stream seeded by `(store seed, parameter name)`, so a parameter's
//! fresh value does not depend on construction order.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Uniform(f64),
    /// Glorot uniform with the given gain.
    Xavier { fan_in: usize, fan_out: usize, gain: f64 },
    Normal(f64),
    /// Identity matrix (square 2-D shapes only).
    Identity,
    /// Random orthogonal matrix with determinant +1 (square 2-D shapes only).
    Orthogonal,
}

#[derive(Debug, Clone)]
struct Entry {
    var: Var,
    trainable: bool,
}

/// Named parameter and buffer storage.
#[derive(Debug, Clone)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
    dtype: DType,
    device: Device,
    seed: u64,
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1 = unit(rng).max(f64::MIN_POSITIVE);
    let u2 = unit(rng);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_fn(n, n, |_, _| gaussian(rng));
    let qr = m.qr();
    let mut q = qr.q();
    if q.determinant() < 0.0 {
        for r in 0..n {
            q[(r, 0)] = -q[(r, 0)];
        }
    }
    // Row-major.
    (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).map(|(r, c)| q[(r, c)]).collect()
}

pub(crate) fn init_values(init: Init, shape: &[usize], seed: u64) -> Vec<f64> {
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Uniform(a) => (0..n).map(|_| (2.0 * unit(&mut rng) - 1.0) * a).collect(),
        Init::Xavier { fan_in, fan_out, gain } => {
            let a = gain * (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| (2.0 * unit(&mut rng) - 1.0) * a).collect()
        }
        Init::Normal(std) => (0..n).map(|_| gaussian(&mut rng) * std).collect(),
        Init::Identity => {
            assert!(shape.len() == 2 && shape[0] == shape[1], "identity needs a square shape");
            let d = shape[0];
            (0..n).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect()
        }
        Init::Orthogonal => {
            assert!(shape.len() == 2 && shape[0] == shape[1], "orthogonal needs a square shape");
            orthogonal(shape[0], &mut rng)
        }
    }
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            entries: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            seed,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn create(&mut self, name: &str, shape: &[usize], init: Init, trainable: bool) -> Result<Var> {
        if self.entries.contains_key(name) {
            return Err(ModelError::Shape(format!("parameter {name} registered twice")));
        }
        let values = init_values(init, shape, name_seed(self.seed, name));
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.entries.insert(
            name.to_string(),
            Entry {
                var: var.clone(),
                trainable,
            },
        );
        Ok(var)
    }

    /// Registers a trainable parameter and returns its tensor handle.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        Ok(self.create(name, shape, init, true)?.as_tensor().clone())
    }

    /// Registers a non-trainable buffer (running statistics).
    pub fn buffer(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        self.create(name, shape, init, false)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.get(name).map(|e| &e.var)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn shape(&self, name: &str) -> Option<Vec<usize>> {
        self.get(name).map(|v| v.dims().to_vec())
    }

    /// Overwrites a parameter's value in place; shapes must match.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| ModelError::Shape(format!("no parameter named {name}")))?;
        if var.dims() != value.dims() {
            return Err(ModelError::SurgeryShape {
                name: name.to_string(),
                found: value.dims().to_vec(),
                expected: var.dims().to_vec(),
            });
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    /// Trainable variables whose names match none of `frozen`.
    pub fn trainable_vars(&self, frozen: &[String]) -> Vec<(String, Var)> {
        self.entries
            .iter()
            .filter(|(name, e)| e.trainable && !matches_any(name, frozen))
            .map(|(name, e)| (name.clone(), e.var.clone()))
            .collect()
    }

    /// All entries as f32 tensors, for checkpointing.
    pub fn snapshot_f32(&self) -> Result<BTreeMap<String, Tensor>> {
        self.entries
            .iter()
            .map(|(k, e)| Ok((k.clone(), e.var.as_tensor().to_dtype(DType::F32)?.detach())))
            .collect()
    }

    /// SHA-256 over names and little-endian f32 values of matching entries.
    pub fn digest(&self, prefixes: &[String]) -> Result<String> {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            if prefixes.is_empty() || matches_any(name, prefixes) {
                h.update(name.as_bytes());
                let values: Vec<f32> = e
                    .var
                    .as_tensor()
                    .to_dtype(DType::F32)?
                    .flatten_all()?
                    .to_vec1()?;
                for v in values {
                    h.update(v.to_le_bytes());
                }
            }
        }
        Ok(hex(&h.finalize()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn matches_any(name: &str, prefixes: &[String]) -> bool {
    prefixes.iter().any(|p| name.starts_with(p.as_str()))
}

/// Per-forward state: train/eval switch, dropout randomness, and the
/// prefixes whose batch-norm statistics must stay fixed.
pub struct ForwardCtx {
    pub train: bool,
    rng: ChaCha8Rng,
    pub frozen: Vec<String>,
}

impl ForwardCtx {
    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            frozen: Vec::new(),
        }
    }

    pub fn eval(seed: u64) -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            frozen: Vec::new(),
        }
    }

    pub fn with_frozen(mut self, frozen: Vec<String>) -> Self {
        self.frozen = frozen;
        self
    }

    /// Inverted dropout with a mask drawn from this context's stream.
    /// Outside training the mask is shared across the batch dimension, so
    /// identical items in one batch stay identical.
    pub fn dropout(&mut self, x: &Tensor, p: f64, active: bool) -> Result<Tensor> {
        if !active || p <= 0.0 {
            return Ok(x.clone());
        }
        let keep = 1.0 - p;
        let mut shape = x.dims().to_vec();
        if !self.train && !shape.is_empty() {
            shape[0] = 1;
        }
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if unit(&mut self.rng) < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = Tensor::from_vec(mask, shape, x.device())?.to_dtype(x.dtype())?;
        Ok(x.broadcast_mul(&mask)?)
    }

    /// Standard normal draws, for vocoder noise.
    pub fn normal(&mut self, shape: &[usize], std: f64, dtype: DType) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| gaussian(&mut self.rng) * std).collect();
        Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
    }

    fn bn_updates(&self, name: &str) -> bool {
        self.train && !matches_any(name, &self.frozen)
    }
}

/// `σ(x) = (tanh(x/2) + 1) / 2`; stable in both directions.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, gain: f64) -> Result<Self> {
        let weight = store.param(
            &format!("{name}.weight"),
            &[d_out, d_in],
            Init::Xavier { fan_in: d_in, fan_out: d_out, gain },
        )?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.broadcast_matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Conv1d {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        bias: bool,
        weight_init: Init,
    ) -> Result<Self> {
        let weight = store.param(&format!("{name}.weight"), &[c_out, c_in, kernel], weight_init)?;
        let bias = if bias {
            Some(store.param(&format!("{name}.bias"), &[c_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        })
    }

    pub fn xavier(c_in: usize, c_out: usize, kernel: usize, gain: f64) -> Init {
        Init::Xavier {
            fan_in: c_in * kernel,
            fan_out: c_out * kernel,
            gain,
        }
    }

    /// `[B, C_in, T] → [B, C_out, T]` ("same" padding).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // Padding is applied up front: candle's conv1d backward underflows
        // when the padding exceeds the input length.
        let x = if self.padding > 0 {
            x.pad_with_zeros(2, self.padding, self.padding)?
        } else {
            x.clone()
        };
        let y = x.conv1d(&self.weight, 0, 1, self.dilation, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1))?)?,
            None => y,
        })
    }
}

/// Batch norm over `[B, C, T]` with masked batch statistics in training.
#[derive(Debug, Clone)]
pub struct BatchNorm1d {
    name: String,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    momentum: f64,
    eps: f64,
}

impl BatchNorm1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            gamma: store.param(&format!("{name}.weight"), &[channels], Init::Ones)?,
            beta: store.param(&format!("{name}.bias"), &[channels], Init::Zeros)?,
            running_mean: store.buffer(&format!("{name}.running_mean"), &[channels], Init::Zeros)?,
            running_var: store.buffer(&format!("{name}.running_var"), &[channels], Init::Ones)?,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    /// `mask` is `[B, 1, T]` with 1 on valid frames.
    pub fn forward(&self, x: &Tensor, mask: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        let c = x.dim(1)?;
        let (mean, var) = if ctx.bn_updates(&self.name) {
            let count = mask.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            let xm = x.broadcast_mul(mask)?;
            let mean = (xm.sum_keepdim(2)?.sum_keepdim(0)? / count)?;
            let centered = x.broadcast_sub(&mean)?.broadcast_mul(mask)?;
            let var = (centered.sqr()?.sum_keepdim(2)?.sum_keepdim(0)? / count)?;
            let unbiased = if count > 1.0 {
                (var.detach() * (count / (count - 1.0)))?
            } else {
                var.detach()
            };
            let m = self.momentum;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().reshape(c)? * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased.reshape(c)? * m)?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            (mean, var)
        } else {
            (
                self.running_mean.as_tensor().reshape((1, c, 1))?,
                self.running_var.as_tensor().reshape((1, c, 1))?,
            )
        };
        let norm = x
            .broadcast_sub(&mean)?
            .broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(norm
            .broadcast_mul(&self.gamma.reshape((1, c, 1))?)?
            .broadcast_add(&self.beta.reshape((1, c, 1))?)?)
    }
}

/// Layer norm over the last dimension.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.param(&format!("{name}.weight"), &[dim], Init::Ones)?,
            beta: store.param(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let norm = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(norm.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

/// LSTM cell with gate order (input, forget, cell, output).
#[derive(Debug, Clone)]
pub struct LstmCell {
    w_ih: Tensor,
    w_hh: Tensor,
    b_ih: Tensor,
    b_hh: Tensor,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize) -> Result<Self> {
        let a = 1.0 / (hidden as f64).sqrt();
        let w_ih = store.param(&format!("{name}.weight_ih"), &[4 * hidden, d_in], Init::Uniform(a))?;
        let w_hh = store.param(&format!("{name}.weight_hh"), &[4 * hidden, hidden], Init::Uniform(a))?;
        let b_ih = store.param(&format!("{name}.bias_ih"), &[4 * hidden], Init::Uniform(a))?;
        let b_hh = store.param(&format!("{name}.bias_hh"), &[4 * hidden], Init::Uniform(a))?;
        Ok(Self {
            w_ih,
            w_hh,
            b_ih,
            b_hh,
            hidden,
        })
    }

    pub fn zero_state(&self, batch: usize, dtype: DType) -> Result<LstmState> {
        let z = Tensor::zeros((batch, self.hidden), dtype, &Device::Cpu)?;
        Ok(LstmState { h: z.clone(), c: z })
    }

    /// Input projection for a whole sequence `[B, T, d_in] → [B, T, 4H]`.
    pub fn project_inputs(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.broadcast_matmul(&self.w_ih.t()?)?)
    }

    /// One step from a pre-projected input `[B, 4H]`.
    pub fn step_projected(&self, x_proj: &Tensor, s: &LstmState) -> Result<LstmState> {
        let gates = x_proj
            .add(&s.h.matmul(&self.w_hh.t()?)?)?
            .broadcast_add(&self.b_ih)?
            .broadcast_add(&self.b_hh)?;
        let h = self.hidden;
        let i = sigmoid(&gates.narrow(1, 0, h)?)?;
        let f = sigmoid(&gates.narrow(1, h, h)?)?;
        let g = gates.narrow(1, 2 * h, h)?.tanh()?;
        let o = sigmoid(&gates.narrow(1, 3 * h, h)?)?;
        let c = f.mul(&s.c)?.add(&i.mul(&g)?)?;
        let h = o.mul(&c.tanh()?)?;
        Ok(LstmState { h, c })
    }

    pub fn step(&self, x: &Tensor, s: &LstmState) -> Result<LstmState> {
        self.step_projected(&x.matmul(&self.w_ih.t()?)?, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_values_do_not_depend_on_order() {
        let mut a = ParamStore::new(DType::F32, 3);
        a.param("x.weight", &[2, 3], Init::Uniform(1.0)).unwrap();
        a.param("y.weight", &[4], Init::Uniform(1.0)).unwrap();
        let mut b = ParamStore::new(DType::F32, 3);
        b.param("y.weight", &[4], Init::Uniform(1.0)).unwrap();
        b.param("x.weight", &[2, 3], Init::Uniform(1.0)).unwrap();
        assert_eq!(a.digest(&[]).unwrap(), b.digest(&[]).unwrap());
    }

    #[test]
    fn orthogonal_init_has_unit_determinant() {
        let v = init_values(Init::Orthogonal, &[6, 6], 11);
        let m = nalgebra::DMatrix::from_row_slice(6, 6, &v);
        assert!((m.determinant() - 1.0).abs() < 1e-9);
        let eye = &m * m.transpose();
        assert!((eye - nalgebra::DMatrix::identity(6, 6)).abs().max() < 1e-9);
    }

    #[test]
    fn sigmoid_matches_closed_form_and_saturates() {
        let x = Tensor::new(&[-800.0f32, -2.0, 0.0, 3.0, 800.0], &Device::Cpu).unwrap();
        let y: Vec<f32> = sigmoid(&x).unwrap().to_vec1().unwrap();
        assert_eq!(y[0], 0.0);
        assert!((y[1] - 1.0 / (1.0 + 2f32.exp())).abs() < 1e-6);
        assert_eq!(y[2], 0.5);
        assert_eq!(y[4], 1.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f32, 2.0, -1e9], [0.0, 0.0, 0.0]], &Device::Cpu).unwrap();
        let s: Vec<Vec<f32>> = softmax_last(&x).unwrap().to_vec2().unwrap();
        for row in &s {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
        assert_eq!(s[0][2], 0.0);
    }

    #[test]
    fn dropout_is_seeded() {
        let x = Tensor::ones((4, 8), DType::F32, &Device::Cpu).unwrap();
        let a: Vec<Vec<f32>> = ForwardCtx::train(5).dropout(&x, 0.5, true).unwrap().to_vec2().unwrap();
        let b: Vec<Vec<f32>> = ForwardCtx::train(5).dropout(&x, 0.5, true).unwrap().to_vec2().unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flatten().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn frozen_batch_norm_keeps_running_stats() {
        let mut store = ParamStore::new(DType::F32, 0);
        let bn = BatchNorm1d::new(&mut store, "encoder.conv0.bn", 2).unwrap();
        let x = Tensor::new(&[[[1.0f32, 3.0], [2.0, 6.0]]], &Device::Cpu).unwrap();
        let mask = Tensor::ones((1, 1, 2), DType::F32, &Device::Cpu).unwrap();
        let before = store.digest(&[]).unwrap();
        let ctx = ForwardCtx::train(0).with_frozen(vec!["encoder.".into()]);
        bn.forward(&x, &mask, &ctx).unwrap();
        assert_eq!(before, store.digest(&[]).unwrap());
        bn.forward(&x, &mask, &ForwardCtx::train(0)).unwrap();
        assert_ne!(before, store.digest(&[]).unwrap());
    }
}
