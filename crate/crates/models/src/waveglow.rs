//! Waveglow: a stack of invertible 1x1 convolutions and affine couplings
//! conditioned on upsampled mel frames.

use candle_core::{DType, Device, IndexOp, Tensor};
use comix_core::config::{AudioConfig, Inv1x1Init, WaveglowConfig};
use comix_core::MelSpectrogram;

use crate::error::{ModelError, Result};
use crate::nn::{sigmoid, Conv1d, ForwardCtx, Init, ParamStore};

struct Wn {
    start: Conv1d,
    cond: Conv1d,
    in_layers: Vec<Conv1d>,
    res_skip: Vec<Conv1d>,
    end: Conv1d,
    channels: usize,
}

impl Wn {
    fn new(s: &mut ParamStore, name: &str, n_half: usize, cond_ch: usize, cfg: &WaveglowConfig) -> Result<Self> {
        let ch = cfg.wn_channels;
        let default = |c_in: usize, k: usize| Init::Uniform(1.0 / ((c_in * k) as f64).sqrt());
        let start = Conv1d::new(s, &format!("{name}.start"), n_half, ch, 1, 1, true, default(n_half, 1))?;
        let cond = Conv1d::new(
            s,
            &format!("{name}.cond"),
            cond_ch,
            2 * ch * cfg.wn_layers,
            1,
            1,
            true,
            default(cond_ch, 1),
        )?;
        let mut in_layers = Vec::new();
        let mut res_skip = Vec::new();
        for i in 0..cfg.wn_layers {
            in_layers.push(Conv1d::new(
                s,
                &format!("{name}.in{i}"),
                ch,
                2 * ch,
                cfg.wn_kernel,
                1 << i,
                true,
                default(ch, cfg.wn_kernel),
            )?);
            let out = if i + 1 < cfg.wn_layers { 2 * ch } else { ch };
            res_skip.push(Conv1d::new(s, &format!("{name}.res_skip{i}"), ch, out, 1, 1, true, default(ch, 1))?);
        }
        let end = Conv1d::new(s, &format!("{name}.end"), ch, 2 * n_half, 1, 1, true, Init::Zeros)?;
        Ok(Self {
            start,
            cond,
            in_layers,
            res_skip,
            end,
            channels: ch,
        })
    }

    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let ch = self.channels;
        let mut audio = self.start.forward(x)?;
        let cond = self.cond.forward(cond)?;
        let n = self.in_layers.len();
        let mut skip: Option<Tensor> = None;
        for (i, (inl, rs)) in self.in_layers.iter().zip(&self.res_skip).enumerate() {
            let pre = inl.forward(&audio)?.add(&cond.narrow(1, i * 2 * ch, 2 * ch)?)?;
            let acts = pre.narrow(1, 0, ch)?.tanh()?.mul(&sigmoid(&pre.narrow(1, ch, ch)?)?)?;
            let out = rs.forward(&acts)?;
            let s = if i + 1 < n {
                audio = audio.add(&out.narrow(1, 0, ch)?)?;
                out.narrow(1, ch, ch)?
            } else {
                out
            };
            skip = Some(match skip {
                Some(acc) => acc.add(&s)?,
                None => s,
            });
        }
        self.end.forward(&skip.expect("at least one layer"))
    }
}

struct Flow {
    inv1x1: Tensor,
    wn: Wn,
    channels: usize,
}

/// Latents and log-determinant bookkeeping from the training direction.
#[derive(Debug, Clone)]
pub struct FlowOutput {
    /// `[B, group, N / group]`
    pub z: Tensor,
    /// Sum of all `log s` terms over every flow.
    pub log_s_total: Tensor,
    /// Sum of the 1x1 convolutions' log-determinants.
    pub logdet_w_total: Tensor,
    /// Per-flow `Σ log s`.
    pub log_s_terms: Vec<Tensor>,
    /// Per-flow `B · N/group · log|det W|`.
    pub logdet_w_terms: Vec<f64>,
}

impl FlowOutput {
    pub fn logdet_sum(&self) -> Result<Tensor> {
        Ok(self.log_s_total.add(&self.logdet_w_total)?)
    }
}

pub struct Waveglow {
    cfg: WaveglowConfig,
    n_mels: usize,
    win: usize,
    hop: usize,
    store: ParamStore,
    upsample_w: Tensor,
    upsample_b: Tensor,
    flows: Vec<Flow>,
}

fn log_abs_det_and_inverse(w: &Tensor) -> Result<(f64, nalgebra::DMatrix<f64>)> {
    let c = w.dim(0)?;
    let v: Vec<f64> = w.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let m = nalgebra::DMatrix::from_row_slice(c, c, &v);
    let lu = m.clone().lu();
    let det = lu.determinant();
    if !(det.is_finite() && det != 0.0) {
        return Err(ModelError::NonFinite("1x1 convolution determinant"));
    }
    let inv = lu.try_inverse().ok_or(ModelError::NonFinite("1x1 convolution inverse"))?;
    Ok((det.abs().ln(), inv))
}

fn matrix_tensor(m: &nalgebra::DMatrix<f64>, dtype: DType) -> Result<Tensor> {
    let (r, c) = m.shape();
    let data: Vec<f64> = (0..r).flat_map(|i| (0..c).map(move |j| (i, j))).map(|(i, j)| m[(i, j)]).collect();
    Ok(Tensor::from_vec(data, (r, c), &Device::Cpu)?.to_dtype(dtype)?)
}

impl Waveglow {
    pub fn new(cfg: &WaveglowConfig, audio: &AudioConfig, dtype: DType, seed: u64) -> Result<Self> {
        let n_mels = audio.n_mels;
        let win = audio.win_length();
        let hop = audio.hop_length();
        let mut s = ParamStore::new(dtype, seed);
        let upsample_w = s.param(
            "upsample.weight",
            &[n_mels, n_mels, win],
            Init::Uniform(1.0 / ((n_mels * win) as f64).sqrt()),
        )?;
        let upsample_b = s.param("upsample.bias", &[n_mels], Init::Zeros)?;
        let mut flows = Vec::new();
        for (k, &c) in cfg.flow_channels().iter().enumerate() {
            if c < 2 || c % 2 != 0 {
                return Err(ModelError::Shape(format!("flow {k} has {c} channels; need an even count ≥ 2")));
            }
            let init = match cfg.inv1x1_init {
                Inv1x1Init::Identity => Init::Identity,
                Inv1x1Init::Orthogonal => Init::Orthogonal,
            };
            let inv1x1 = s.param(&format!("flow{k}.inv1x1.weight"), &[c, c], init)?;
            let wn = Wn::new(&mut s, &format!("flow{k}.wn"), c / 2, n_mels * cfg.group_size, cfg)?;
            flows.push(Flow { inv1x1, wn, channels: c });
        }
        Ok(Self {
            cfg: cfg.clone(),
            n_mels,
            win,
            hop,
            store: s,
            upsample_w,
            upsample_b,
            flows,
        })
    }

    pub fn config(&self) -> &WaveglowConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Samples produced for `n_frames` mel frames.
    pub fn output_len(&self, n_frames: usize) -> usize {
        n_frames * self.hop / self.cfg.group_size * self.cfg.group_size
    }

    /// Transposed convolution with stride `hop` and kernel `win`, written as
    /// a matmul plus overlap-add. `[B, T, M] → [B, M, (T + K - 1)·hop]`
    /// where `K = ⌈win / hop⌉`.
    pub fn upsample(&self, mel: &Tensor) -> Result<Tensor> {
        let (b, t, m) = mel.dims3()?;
        if m != self.n_mels {
            return Err(ModelError::Shape(format!("mel has {m} channels, vocoder expects {}", self.n_mels)));
        }
        let hop = self.hop;
        let k = self.win.div_ceil(hop);
        let w = self
            .upsample_w
            .pad_with_zeros(2, 0, k * hop - self.win)?
            .reshape((m, m * k * hop))?;
        let y = mel.reshape((b * t, m))?.matmul(&w)?.reshape((b, t, m, k, hop))?;
        let mut acc: Option<Tensor> = None;
        for j in 0..k {
            let chunk = y.i((.., .., .., j, ..))?.pad_with_zeros(1, j, k - 1 - j)?;
            acc = Some(match acc {
                Some(a) => a.add(&chunk)?,
                None => chunk,
            });
        }
        let out = acc
            .expect("k ≥ 1")
            .permute((0, 2, 1, 3))?
            .reshape((b, m, (t + k - 1) * hop))?;
        Ok(out.broadcast_add(&self.upsample_b.reshape((1, m, 1))?)?)
    }

    /// Conditioning for `n` samples, grouped to `[B, M·group, n / group]`.
    /// Sample `s` reads upsampled position `s + win/2`, the centre of the
    /// analysis window that produced the frame.
    fn conditioning(&self, mel: &Tensor, n: usize) -> Result<Tensor> {
        let (b, t, m) = mel.dims3()?;
        let g = self.cfg.group_size;
        if n % g != 0 {
            return Err(ModelError::Shape(format!("{n} samples is not a multiple of group size {g}")));
        }
        if n > t * self.hop {
            return Err(ModelError::Shape(format!(
                "{t} mel frames cover {} samples, segment has {n}",
                t * self.hop
            )));
        }
        let up = self.upsample(mel)?.narrow(2, self.win / 2, n)?;
        Ok(up
            .reshape((b, m, n / g, g))?
            .permute((0, 1, 3, 2))?
            .reshape((b, m * g, n / g))?)
    }

    fn group(&self, audio: &Tensor) -> Result<Tensor> {
        let (b, n) = audio.dims2()?;
        let g = self.cfg.group_size;
        if n % g != 0 {
            return Err(ModelError::Shape(format!("{n} samples is not a multiple of group size {g}")));
        }
        Ok(audio.reshape((b, n / g, g))?.transpose(1, 2)?.contiguous()?)
    }

    fn is_early(&self, k: usize) -> bool {
        self.cfg.early_every > 0 && k > 0 && k % self.cfg.early_every == 0
    }

    /// Training direction: audio `[B, N]` and mel `[B, T, M]` to latents.
    pub fn forward(&self, audio: &Tensor, mel: &Tensor) -> Result<FlowOutput> {
        let (b, n) = audio.dims2()?;
        if mel.dim(0)? != b {
            return Err(ModelError::Shape("audio and mel batch sizes differ".into()));
        }
        let cond = self.conditioning(mel, n)?;
        let mut x = self.group(audio)?;
        let steps = n / self.cfg.group_size;
        let mut early = Vec::new();
        let mut log_s_terms = Vec::new();
        let mut logdet_w_terms = Vec::new();
        let mut logdet_w_total: Option<Tensor> = None;
        for (k, flow) in self.flows.iter().enumerate() {
            if self.is_early(k) {
                let e = self.cfg.early_size;
                early.push(x.narrow(1, 0, e)?);
                x = x.narrow(1, e, x.dim(1)? - e)?;
            }
            let c = flow.channels;
            let (ld, inv) = log_abs_det_and_inverse(&flow.inv1x1)?;
            x = flow.inv1x1.unsqueeze(0)?.broadcast_matmul(&x)?;
            // Value log|det W|, gradient W^{-T}.
            let inv_t = matrix_tensor(&inv.transpose(), self.dtype())?;
            let scale = (b * steps) as f64;
            let term = ((flow.inv1x1.mul(&inv_t)?.sum_all()? + (ld - c as f64))? * scale)?;
            logdet_w_terms.push(ld * scale);
            logdet_w_total = Some(match logdet_w_total {
                Some(t) => t.add(&term)?,
                None => term,
            });

            let half = c / 2;
            let xa = x.narrow(1, 0, half)?;
            let xb = x.narrow(1, half, half)?;
            let out = flow.wn.forward(&xa, &cond)?;
            let shift = out.narrow(1, 0, half)?;
            let log_s = out.narrow(1, half, half)?;
            let xb = log_s.exp()?.mul(&xb)?.add(&shift)?;
            log_s_terms.push(log_s.sum_all()?);
            x = Tensor::cat(&[&xa, &xb], 1)?;
        }
        early.push(x);
        let z = Tensor::cat(&early, 1)?;
        let mut log_s_total = log_s_terms[0].clone();
        for t in &log_s_terms[1..] {
            log_s_total = log_s_total.add(t)?;
        }
        Ok(FlowOutput {
            z,
            log_s_total,
            logdet_w_total: logdet_w_total.expect("at least one flow"),
            log_s_terms,
            logdet_w_terms,
        })
    }

    /// Synthesis direction: latents `[B, group, N / group]` to audio `[B, N]`.
    pub fn inverse(&self, z: &Tensor, mel: &Tensor) -> Result<Tensor> {
        let (b, g, steps) = z.dims3()?;
        if g != self.cfg.group_size {
            return Err(ModelError::Shape(format!("latent has {g} channels, expected {}", self.cfg.group_size)));
        }
        let n = g * steps;
        let cond = self.conditioning(mel, n)?;
        let channels = self.cfg.flow_channels();
        let last = *channels.last().expect("at least one flow");
        let mut x = z.narrow(1, g - last, last)?;
        let mut consumed = g - last;
        for (k, flow) in self.flows.iter().enumerate().rev() {
            let half = flow.channels / 2;
            let xa = x.narrow(1, 0, half)?;
            let xb = x.narrow(1, half, half)?;
            let out = flow.wn.forward(&xa, &cond)?;
            let shift = out.narrow(1, 0, half)?;
            let log_s = out.narrow(1, half, half)?;
            let xb = xb.sub(&shift)?.mul(&log_s.neg()?.exp()?)?;
            x = Tensor::cat(&[&xa, &xb], 1)?;
            let (_, inv) = log_abs_det_and_inverse(&flow.inv1x1)?;
            x = matrix_tensor(&inv, self.dtype())?.unsqueeze(0)?.broadcast_matmul(&x)?;
            if self.is_early(k) {
                let e = self.cfg.early_size;
                consumed -= e;
                x = Tensor::cat(&[&z.narrow(1, consumed, e)?, &x], 1)?;
            }
        }
        debug_assert_eq!(consumed, 0);
        Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, n))?)
    }

    /// Draws `z ~ N(0, sigma²)` from `ctx` and inverts. Returns `[N]`.
    pub fn synthesize(&self, mel: &MelSpectrogram, sigma: f64, ctx: &mut ForwardCtx) -> Result<Vec<f32>> {
        let n = self.output_len(mel.n_frames);
        if n == 0 {
            return Err(ModelError::Empty("mel frames"));
        }
        let g = self.cfg.group_size;
        let mel_t = Tensor::from_vec(mel.frames.clone(), (1, mel.n_frames, mel.n_mels), &Device::Cpu)?.to_dtype(self.dtype())?;
        let z = ctx.normal(&[1, g, n / g], sigma, self.dtype())?;
        let audio = self.inverse(&z, &mel_t)?.detach();
        Ok(audio.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?)
    }
}

/// `(Σ z² / (2σ²) − logdet) / element count`.
pub fn nll_loss(out: &FlowOutput, sigma: f64) -> Result<Tensor> {
    let logdet = out.logdet_sum()?;
    let ld = logdet.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !ld.is_finite() {
        return Err(ModelError::NonFinite("flow log-determinant"));
    }
    let count = out.z.elem_count() as f64;
    let quad = (out.z.sqr()?.sum_all()? / (2.0 * sigma * sigma))?;
    Ok((quad.sub(&logdet)? / count)?)
}
