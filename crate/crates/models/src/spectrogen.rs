//! Tacotron2: character encoder, optional speaker fusion, location-sensitive
//! attention decoder, post-net, and the training losses.

use candle_core::{DType, Device, IndexOp, Tensor};
use comix_core::config::{DecoderConfig, EncoderConfig, ToolkitConfig};
use comix_core::MelSpectrogram;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::nn::{softmax_last, BatchNorm1d, Conv1d, ForwardCtx, Init, LayerNorm, Linear, LstmCell, LstmState, ParamStore};
use crate::vocab::{CharVocabulary, VocabKind, PAD};

/// Everything needed to rebuild the network's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TacotronSpec {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub n_mels: usize,
    pub vocab: VocabKind,
    /// Speaker embedding width; `None` for the single-speaker topology.
    pub speaker_dim: Option<usize>,
}

impl TacotronSpec {
    pub fn from_config(cfg: &ToolkitConfig, vocab: VocabKind, multi_speaker: bool) -> Self {
        Self {
            encoder: cfg.encoder.clone(),
            decoder: cfg.decoder.clone(),
            n_mels: cfg.audio.n_mels,
            vocab,
            speaker_dim: multi_speaker.then_some(cfg.speaker.embed_dim),
        }
    }

    pub fn multi_speaker(&self) -> bool {
        self.speaker_dim.is_some()
    }
}

struct ConvBn {
    conv: Conv1d,
    bn: BatchNorm1d,
}

impl ConvBn {
    fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, kernel: usize, gain: f64) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::new(
                store,
                &format!("{name}.conv"),
                c_in,
                c_out,
                kernel,
                1,
                true,
                Conv1d::xavier(c_in, c_out, kernel, gain),
            )?,
            bn: BatchNorm1d::new(store, &format!("{name}.bn"), c_out)?,
        })
    }

    fn forward(&self, x: &Tensor, mask: &Tensor, ctx: &ForwardCtx) -> Result<Tensor> {
        self.bn.forward(&self.conv.forward(x)?, mask, ctx)
    }
}

struct SpeakerFusion {
    norm1: LayerNorm,
    dense: Linear,
    norm2: LayerNorm,
}

struct Attention {
    query: Linear,
    memory: Linear,
    location_conv: Conv1d,
    location_dense: Linear,
    v: Linear,
}

/// Decoder outputs for a batch. Time runs along dimension 1.
#[derive(Debug, Clone)]
pub struct SpectrogenOutput {
    /// `[B, T, n_mels]`
    pub mel_pre: Tensor,
    /// `[B, T, n_mels]`, `mel_pre` plus the post-net residual.
    pub mel_post: Tensor,
    /// `[B, T]` pre-sigmoid stop logits.
    pub gate_logits: Tensor,
    /// `[B, T, L]`, one attention distribution per decoder step.
    pub attention: Tensor,
    /// Valid frames per item.
    pub frame_lens: Vec<usize>,
    /// Set per item when inference hit `max_steps` without the gate firing.
    pub truncated: Vec<bool>,
}

impl SpectrogenOutput {
    pub fn stop_probs(&self) -> Result<Tensor> {
        crate::nn::sigmoid(&self.gate_logits)
    }

    /// Item `b`'s post-net mel, trimmed to its length.
    pub fn mel(&self, b: usize) -> Result<MelSpectrogram> {
        let t = self.frame_lens[b];
        let m = self.mel_post.dim(2)?;
        let rows: Vec<f32> = self
            .mel_post
            .i(b)?
            .narrow(0, 0, t)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1()?;
        Ok(MelSpectrogram::from_rows(rows, m))
    }

    /// Item `b`'s alignment `[t][l]`, trimmed to its frame count and `text_len`.
    pub fn alignment(&self, b: usize, text_len: usize) -> Result<Vec<Vec<f32>>> {
        Ok(self
            .attention
            .i(b)?
            .narrow(0, 0, self.frame_lens[b])?
            .narrow(1, 0, text_len)?
            .to_dtype(DType::F32)?
            .to_vec2()?)
    }
}

#[derive(Debug, Clone)]
pub struct LossTerms {
    pub mel_pre_mse: Tensor,
    pub mel_post_mse: Tensor,
    pub stop_bce: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn values(&self) -> Result<[f64; 4]> {
        let f = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok([f(&self.mel_pre_mse)?, f(&self.mel_post_mse)?, f(&self.stop_bce)?, f(&self.total)?])
    }
}

/// A padded batch of encoder inputs and (optionally) targets.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, L]` u32, right-padded with PAD.
    pub ids: Tensor,
    pub text_lens: Vec<usize>,
    /// `[B, T, n_mels]`, right-padded with the log floor.
    pub mels: Option<Tensor>,
    pub mel_lens: Vec<usize>,
    /// `[B, speaker_dim]`
    pub speakers: Option<Tensor>,
}

/// One training or synthesis example.
#[derive(Debug, Clone)]
pub struct Example {
    pub ids: Vec<u32>,
    pub mel: Option<MelSpectrogram>,
    pub speaker: Option<Vec<f32>>,
}

impl Batch {
    pub fn new(examples: &[Example], n_mels: usize, log_floor: f32, dtype: DType) -> Result<Self> {
        if examples.is_empty() {
            return Err(ModelError::Empty("batch"));
        }
        let b = examples.len();
        let text_lens: Vec<usize> = examples.iter().map(|e| e.ids.len()).collect();
        if text_lens.contains(&0) {
            return Err(ModelError::Empty("character sequence"));
        }
        let l = *text_lens.iter().max().expect("non-empty");
        let mut ids = vec![PAD; b * l];
        for (i, e) in examples.iter().enumerate() {
            ids[i * l..i * l + e.ids.len()].copy_from_slice(&e.ids);
        }
        let ids = Tensor::from_vec(ids, (b, l), &Device::Cpu)?;

        let (mels, mel_lens) = if examples.iter().all(|e| e.mel.is_some()) {
            let lens: Vec<usize> = examples.iter().map(|e| e.mel.as_ref().expect("checked").n_frames).collect();
            if lens.contains(&0) {
                return Err(ModelError::Empty("mel target"));
            }
            let t = *lens.iter().max().expect("non-empty");
            let mut data = vec![log_floor; b * t * n_mels];
            for (i, e) in examples.iter().enumerate() {
                let mel = e.mel.as_ref().expect("checked");
                if mel.n_mels != n_mels {
                    return Err(ModelError::Shape(format!("mel has {} channels, model expects {n_mels}", mel.n_mels)));
                }
                data[i * t * n_mels..i * t * n_mels + mel.frames.len()].copy_from_slice(&mel.frames);
            }
            (
                Some(Tensor::from_vec(data, (b, t, n_mels), &Device::Cpu)?.to_dtype(dtype)?),
                lens,
            )
        } else {
            (None, Vec::new())
        };

        let speakers = if examples.iter().all(|e| e.speaker.is_some()) {
            let dim = examples[0].speaker.as_ref().expect("checked").len();
            let mut data = Vec::with_capacity(b * dim);
            for e in examples {
                let v = e.speaker.as_ref().expect("checked");
                if v.len() != dim {
                    return Err(ModelError::Shape("speaker embeddings differ in width".into()));
                }
                data.extend_from_slice(v);
            }
            Some(Tensor::from_vec(data, (b, dim), &Device::Cpu)?.to_dtype(dtype)?)
        } else if examples.iter().any(|e| e.speaker.is_some()) {
            return Err(ModelError::Speaker("some batch items lack a speaker embedding".into()));
        } else {
            None
        };

        Ok(Self {
            ids,
            text_lens,
            mels,
            mel_lens,
            speakers,
        })
    }
}

/// `[B, max]` 1/0 mask from lengths.
pub fn length_mask(lens: &[usize], max: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = lens
        .iter()
        .flat_map(|&n| (0..max).map(move |t| if t < n { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (lens.len(), max), &Device::Cpu)?.to_dtype(dtype)?)
}

struct DecoderState {
    att: LstmState,
    dec: LstmState,
    context: Tensor,
    prev_w: Tensor,
    cum_w: Tensor,
}

struct StepOut {
    mel: Tensor,
    gate: Tensor,
    weights: Tensor,
}

pub struct Tacotron {
    spec: TacotronSpec,
    vocab: CharVocabulary,
    store: ParamStore,
    embedding: Tensor,
    convs: Vec<ConvBn>,
    bilstm_fwd: LstmCell,
    bilstm_bwd: LstmCell,
    speaker: Option<SpeakerFusion>,
    prenet: Vec<Linear>,
    lstm0: LstmCell,
    lstm1: LstmCell,
    attn: Attention,
    mel_proj: Linear,
    gate_proj: Linear,
    postnet: Vec<ConvBn>,
}

/// Glorot gain for tanh layers.
const TANH_GAIN: f64 = 5.0 / 3.0;
const RELU_GAIN: f64 = std::f64::consts::SQRT_2;

impl Tacotron {
    pub fn new(spec: TacotronSpec, dtype: DType, seed: u64) -> Result<Self> {
        let enc = &spec.encoder;
        let dec = &spec.decoder;
        if enc.bilstm_units % 2 != 0 {
            return Err(ModelError::Shape("bilstm_units must be even".into()));
        }
        if dec.n_lstm != 2 {
            return Err(ModelError::Shape("the decoder has exactly two LSTM layers".into()));
        }
        let vocab = CharVocabulary::new(spec.vocab);
        let mut s = ParamStore::new(dtype, seed);
        let embedding = s.param(
            "encoder.embedding.weight",
            &[vocab.len(), enc.embed_dim],
            Init::Xavier {
                fan_in: vocab.len(),
                fan_out: enc.embed_dim,
                gain: 1.0,
            },
        )?;
        let mut convs = Vec::new();
        let mut c_in = enc.embed_dim;
        for i in 0..enc.n_conv {
            convs.push(ConvBn::new(&mut s, &format!("encoder.conv{i}"), c_in, enc.conv_filters, enc.conv_kernel, RELU_GAIN)?);
            c_in = enc.conv_filters;
        }
        let half = enc.bilstm_units / 2;
        let bilstm_fwd = LstmCell::new(&mut s, "encoder.bilstm.fwd", c_in, half)?;
        let bilstm_bwd = LstmCell::new(&mut s, "encoder.bilstm.bwd", c_in, half)?;
        let e = enc.bilstm_units;

        let speaker = match spec.speaker_dim {
            Some(sd) => Some(SpeakerFusion {
                norm1: LayerNorm::new(&mut s, "speaker.norm1", sd)?,
                dense: Linear::new(&mut s, "speaker.dense", sd, e, true, 1.0)?,
                norm2: LayerNorm::new(&mut s, "speaker.norm2", e)?,
            }),
            None => None,
        };

        let mut prenet = Vec::new();
        let mut p_in = spec.n_mels;
        for (i, &width) in dec.prenet.iter().enumerate() {
            prenet.push(Linear::new(&mut s, &format!("decoder.prenet.layer{i}"), p_in, width, false, 1.0)?);
            p_in = width;
        }
        let h = dec.lstm_units;
        let lstm0 = LstmCell::new(&mut s, "decoder.lstm0", p_in + e, h)?;
        let lstm1 = LstmCell::new(&mut s, "decoder.lstm1", h + e, h)?;
        let a = dec.attn_dim;
        let attn = Attention {
            query: Linear::new(&mut s, "decoder.attn.query", h, a, false, TANH_GAIN)?,
            memory: Linear::new(&mut s, "decoder.attn.memory", e, a, false, TANH_GAIN)?,
            location_conv: Conv1d::new(
                &mut s,
                "decoder.attn.location_conv",
                2,
                dec.location_filters,
                dec.location_kernel,
                1,
                false,
                Conv1d::xavier(2, dec.location_filters, dec.location_kernel, 1.0),
            )?,
            location_dense: Linear::new(&mut s, "decoder.attn.location_dense", dec.location_filters, a, false, TANH_GAIN)?,
            v: Linear::new(&mut s, "decoder.attn.v", a, 1, true, 1.0)?,
        };
        let mel_proj = Linear::new(&mut s, "decoder.mel_proj", h + e, spec.n_mels, true, 1.0)?;
        let gate_proj = Linear::new(&mut s, "decoder.gate_proj", h + e, 1, true, 1.0)?;

        let mut postnet = Vec::new();
        let mut c_in = spec.n_mels;
        for i in 0..dec.postnet_layers {
            let last = i + 1 == dec.postnet_layers;
            let c_out = if last { spec.n_mels } else { dec.postnet_filters };
            let gain = if last { 1.0 } else { TANH_GAIN };
            postnet.push(ConvBn::new(&mut s, &format!("postnet.conv{i}"), c_in, c_out, dec.postnet_kernel, gain)?);
            c_in = c_out;
        }

        Ok(Self {
            spec,
            vocab,
            store: s,
            embedding,
            convs,
            bilstm_fwd,
            bilstm_bwd,
            speaker,
            prenet,
            lstm0,
            lstm1,
            attn,
            mel_proj,
            gate_proj,
            postnet,
        })
    }

    pub fn spec(&self) -> &TacotronSpec {
        &self.spec
    }

    pub fn vocab(&self) -> &CharVocabulary {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Character ids `[B, L]` → encoder states `[B, L, bilstm_units]`.
    /// Padded positions come out as zeros.
    pub fn encode(&self, ids: &Tensor, lens: &[usize], ctx: &mut ForwardCtx) -> Result<Tensor> {
        let (b, l) = ids.dims2()?;
        if b != lens.len() {
            return Err(ModelError::Shape(format!("{b} sequences but {} lengths", lens.len())));
        }
        if l == 0 || lens.contains(&0) {
            return Err(ModelError::Empty("character sequence"));
        }
        let flat: Vec<u32> = ids.flatten_all()?.to_vec1()?;
        self.vocab.check_ids(&flat)?;
        let dtype = self.dtype();
        let mask = length_mask(lens, l, dtype)?;
        let mask_c = mask.unsqueeze(1)?;

        let mut x = self
            .embedding
            .index_select(&ids.flatten_all()?, 0)?
            .reshape((b, l, self.spec.encoder.embed_dim))?
            .transpose(1, 2)?
            .contiguous()?
            .broadcast_mul(&mask_c)?;
        for layer in &self.convs {
            x = layer.forward(&x, &mask_c, ctx)?.relu()?;
            let train = ctx.train;
            x = ctx.dropout(&x, self.spec.encoder.dropout, train)?;
            x = x.broadcast_mul(&mask_c)?;
        }
        let x = x.transpose(1, 2)?.contiguous()?;

        let fwd = run_lstm(&self.bilstm_fwd, &x)?;
        let rev = reverse_index(lens, l)?;
        let c = x.dim(2)?;
        let x_rev = x.gather(&rev.unsqueeze(2)?.broadcast_as((b, l, c))?.contiguous()?, 1)?;
        let bwd_rev = run_lstm(&self.bilstm_bwd, &x_rev)?;
        let hh = bwd_rev.dim(2)?;
        let bwd = bwd_rev.gather(&rev.unsqueeze(2)?.broadcast_as((b, l, hh))?.contiguous()?, 1)?;
        Ok(Tensor::cat(&[fwd, bwd], 2)?.broadcast_mul(&mask.unsqueeze(2)?)?)
    }

    /// Adds the projected speaker vector to every encoder step.
    pub fn fuse_speaker(&self, states: &Tensor, emb: &Tensor) -> Result<Tensor> {
        let fusion = self
            .speaker
            .as_ref()
            .ok_or_else(|| ModelError::Speaker("model is single-speaker".into()))?;
        let want = self.spec.speaker_dim.expect("fusion implies a speaker dim");
        if emb.rank() != 2 || emb.dim(1)? != want || emb.dim(0)? != states.dim(0)? {
            return Err(ModelError::Shape(format!(
                "speaker embedding {:?} does not match [batch, {want}]",
                emb.dims()
            )));
        }
        let proj = fusion.norm2.forward(&fusion.dense.forward(&fusion.norm1.forward(emb)?)?)?;
        Ok(states.broadcast_add(&proj.unsqueeze(1)?)?)
    }

    fn memory(&self, batch: &Batch, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let enc = self.encode(&batch.ids, &batch.text_lens, ctx)?;
        match (&self.speaker, &batch.speakers) {
            (Some(_), Some(emb)) => self.fuse_speaker(&enc, emb),
            (Some(_), None) => Err(ModelError::Speaker("multi-speaker model needs a speaker embedding".into())),
            (None, Some(_)) => Err(ModelError::Speaker("model is single-speaker".into())),
            (None, None) => Ok(enc),
        }
    }

    fn prenet(&self, x: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let mut x = x.clone();
        for layer in &self.prenet {
            x = layer.forward(&x)?.relu()?;
            x = ctx.dropout(&x, self.spec.decoder.prenet_dropout, true)?;
        }
        Ok(x)
    }

    fn initial_state(&self, b: usize, l: usize) -> Result<DecoderState> {
        let dtype = self.dtype();
        let e = self.spec.encoder.bilstm_units;
        let zeros_l = Tensor::zeros((b, l), dtype, &Device::Cpu)?;
        Ok(DecoderState {
            att: self.lstm0.zero_state(b, dtype)?,
            dec: self.lstm1.zero_state(b, dtype)?,
            context: Tensor::zeros((b, e), dtype, &Device::Cpu)?,
            prev_w: zeros_l.clone(),
            cum_w: zeros_l,
        })
    }

    fn step(
        &self,
        prenet_out: &Tensor,
        state: &mut DecoderState,
        memory: &Tensor,
        processed: &Tensor,
        mask_bias: &Tensor,
    ) -> Result<StepOut> {
        let att_in = Tensor::cat(&[prenet_out, &state.context], 1)?;
        state.att = self.lstm0.step(&att_in, &state.att)?;

        let q = self.attn.query.forward(&state.att.h)?.unsqueeze(1)?;
        let loc = Tensor::stack(&[&state.prev_w, &state.cum_w], 1)?;
        let loc = self.attn.location_conv.forward(&loc)?.transpose(1, 2)?;
        let loc = self.attn.location_dense.forward(&loc)?;
        let energies = self
            .attn
            .v
            .forward(&processed.broadcast_add(&q)?.add(&loc)?.tanh()?)?
            .squeeze(2)?
            .add(mask_bias)?;
        let weights = softmax_last(&energies)?;
        let context = weights.unsqueeze(1)?.matmul(memory)?.squeeze(1)?;
        state.prev_w = weights.clone();
        state.cum_w = state.cum_w.add(&weights)?;
        state.context = context;

        let dec_in = Tensor::cat(&[&state.att.h, &state.context], 1)?;
        state.dec = self.lstm1.step(&dec_in, &state.dec)?;
        let proj_in = Tensor::cat(&[&state.dec.h, &state.context], 1)?;
        Ok(StepOut {
            mel: self.mel_proj.forward(&proj_in)?,
            gate: self.gate_proj.forward(&proj_in)?.squeeze(1)?,
            weights,
        })
    }

    fn attention_inputs(&self, memory: &Tensor, text_lens: &[usize]) -> Result<(Tensor, Tensor)> {
        let l = memory.dim(1)?;
        let processed = self.attn.memory.forward(memory)?;
        let mask = length_mask(text_lens, l, self.dtype())?;
        let bias = ((mask - 1.0)? * 1e9)?;
        Ok((processed, bias))
    }

    /// Post-net residual over `[B, T, n_mels]`, with frames past each
    /// item's length held at zero between layers.
    pub fn postnet(&self, mel_pre: &Tensor, frame_lens: &[usize], ctx: &mut ForwardCtx) -> Result<Tensor> {
        let t = mel_pre.dim(1)?;
        let mask = length_mask(frame_lens, t, self.dtype())?.unsqueeze(1)?;
        let mut x = mel_pre.transpose(1, 2)?.contiguous()?.broadcast_mul(&mask)?;
        let n = self.postnet.len();
        for (i, layer) in self.postnet.iter().enumerate() {
            x = layer.forward(&x, &mask, ctx)?;
            if i + 1 < n {
                x = x.tanh()?;
            }
            let train = ctx.train;
            x = ctx.dropout(&x, self.spec.encoder.dropout, train)?;
            x = x.broadcast_mul(&mask)?;
        }
        Ok(mel_pre.add(&x.transpose(1, 2)?)?)
    }

    /// Teacher-forced decode against `target` `[B, T, n_mels]`.
    pub fn decode_teacher_forced(
        &self,
        memory: &Tensor,
        text_lens: &[usize],
        target: &Tensor,
        frame_lens: &[usize],
        ctx: &mut ForwardCtx,
    ) -> Result<SpectrogenOutput> {
        let (b, t, m) = target.dims3()?;
        if t == 0 {
            return Err(ModelError::Empty("mel target"));
        }
        if m != self.spec.n_mels {
            return Err(ModelError::Shape(format!("target has {m} channels, model expects {}", self.spec.n_mels)));
        }
        let l = memory.dim(1)?;
        let go = Tensor::zeros((b, 1, m), self.dtype(), &Device::Cpu)?;
        let inputs = Tensor::cat(&[&go, &target.narrow(1, 0, t - 1)?], 1)?;
        let pre = self.prenet(&inputs, ctx)?;
        let (processed, bias) = self.attention_inputs(memory, text_lens)?;
        let mut state = self.initial_state(b, l)?;
        let (mut mels, mut gates, mut aligns) = (Vec::with_capacity(t), Vec::with_capacity(t), Vec::with_capacity(t));
        for step in 0..t {
            let out = self.step(&pre.i((.., step))?, &mut state, memory, &processed, &bias)?;
            mels.push(out.mel);
            gates.push(out.gate);
            aligns.push(out.weights);
        }
        let mel_pre = Tensor::stack(&mels, 1)?;
        let mel_post = self.postnet(&mel_pre, frame_lens, ctx)?;
        Ok(SpectrogenOutput {
            mel_pre,
            mel_post,
            gate_logits: Tensor::stack(&gates, 1)?,
            attention: Tensor::stack(&aligns, 1)?,
            frame_lens: frame_lens.to_vec(),
            truncated: vec![false; b],
        })
    }

    /// Free-running decode. Each item stops at the first step whose stop
    /// probability exceeds `gate_threshold`; items that never stop are cut
    /// at `max_steps` and flagged.
    pub fn decode_inference(
        &self,
        memory: &Tensor,
        text_lens: &[usize],
        max_steps: usize,
        gate_threshold: f64,
        ctx: &mut ForwardCtx,
    ) -> Result<SpectrogenOutput> {
        if max_steps == 0 {
            return Err(ModelError::Synthesis("max_steps must be at least 1".into()));
        }
        let (b, l, _) = memory.dims3()?;
        let m = self.spec.n_mels;
        let (processed, bias) = self.attention_inputs(memory, text_lens)?;
        let mut state = self.initial_state(b, l)?;
        let mut prev = Tensor::zeros((b, m), self.dtype(), &Device::Cpu)?;
        let mut lens: Vec<Option<usize>> = vec![None; b];
        let (mut mels, mut gates, mut aligns) = (Vec::new(), Vec::new(), Vec::new());
        for step in 0..max_steps {
            let pre = self.prenet(&prev, ctx)?;
            let out = self.step(&pre, &mut state, memory, &processed, &bias)?;
            let gate = out.gate.detach();
            let probs: Vec<f64> = crate::nn::sigmoid(&gate)?.to_dtype(DType::F64)?.to_vec1()?;
            prev = out.mel.detach();
            mels.push(prev.clone());
            gates.push(gate);
            aligns.push(out.weights.detach());
            for (slot, p) in lens.iter_mut().zip(&probs) {
                if slot.is_none() && *p > gate_threshold {
                    *slot = Some(step + 1);
                }
            }
            if lens.iter().all(Option::is_some) {
                break;
            }
        }
        let truncated: Vec<bool> = lens.iter().map(Option::is_none).collect();
        let frame_lens: Vec<usize> = lens.iter().map(|n| n.unwrap_or(max_steps)).collect();
        let mel_pre = Tensor::stack(&mels, 1)?;
        let mel_post = self.postnet(&mel_pre, &frame_lens, ctx)?.detach();
        Ok(SpectrogenOutput {
            mel_pre,
            mel_post,
            gate_logits: Tensor::stack(&gates, 1)?,
            attention: Tensor::stack(&aligns, 1)?,
            frame_lens,
            truncated,
        })
    }

    /// Teacher-forced forward pass and losses for a batch with targets.
    pub fn forward_loss(&self, batch: &Batch, ctx: &mut ForwardCtx) -> Result<(SpectrogenOutput, LossTerms)> {
        let target = batch.mels.as_ref().ok_or(ModelError::Empty("mel target"))?;
        let memory = self.memory(batch, ctx)?;
        let out = self.decode_teacher_forced(&memory, &batch.text_lens, target, &batch.mel_lens, ctx)?;
        let terms = loss(&out, target, &batch.mel_lens)?;
        Ok((out, terms))
    }

    /// Encode + free-running decode.
    pub fn infer(&self, batch: &Batch, max_steps: usize, gate_threshold: f64, ctx: &mut ForwardCtx) -> Result<SpectrogenOutput> {
        let memory = self.memory(batch, ctx)?;
        self.decode_inference(&memory, &batch.text_lens, max_steps, gate_threshold, ctx)
    }
}

fn run_lstm(cell: &LstmCell, x: &Tensor) -> Result<Tensor> {
    let (b, l, _) = x.dims3()?;
    let proj = cell.project_inputs(x)?;
    let mut s = cell.zero_state(b, x.dtype())?;
    let mut hs = Vec::with_capacity(l);
    for t in 0..l {
        s = cell.step_projected(&proj.i((.., t))?, &s)?;
        hs.push(s.h.clone());
    }
    Ok(Tensor::stack(&hs, 1)?)
}

/// Per-item time reversal of the valid prefix; padding stays in place.
/// The map is its own inverse.
fn reverse_index(lens: &[usize], l: usize) -> Result<Tensor> {
    let data: Vec<u32> = lens
        .iter()
        .flat_map(|&n| (0..l).map(move |t| if t < n { (n - 1 - t) as u32 } else { t as u32 }))
        .collect();
    Ok(Tensor::from_vec(data, (lens.len(), l), &Device::Cpu)?)
}

/// Stop targets: 1 on each item's last valid frame.
pub fn stop_targets(frame_lens: &[usize], t: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = frame_lens
        .iter()
        .flat_map(|&n| (0..t).map(move |i| if i + 1 == n { 1.0 } else { 0.0 }))
        .collect();
    Ok(Tensor::from_vec(data, (frame_lens.len(), t), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Masked mel MSEs plus stop BCE; padding is excluded from every mean.
pub fn loss(out: &SpectrogenOutput, target: &Tensor, frame_lens: &[usize]) -> Result<LossTerms> {
    let stops = stop_targets(frame_lens, target.dim(1)?, target.dtype())?;
    loss_with_stops(out, target, &stops, frame_lens)
}

pub fn loss_with_stops(out: &SpectrogenOutput, target: &Tensor, stops: &Tensor, frame_lens: &[usize]) -> Result<LossTerms> {
    if out.mel_pre.dims() != target.dims() || out.mel_post.dims() != target.dims() {
        return Err(ModelError::Shape(format!(
            "output {:?} vs target {:?}",
            out.mel_pre.dims(),
            target.dims()
        )));
    }
    if out.gate_logits.dims() != stops.dims() {
        return Err(ModelError::Shape(format!(
            "stop logits {:?} vs targets {:?}",
            out.gate_logits.dims(),
            stops.dims()
        )));
    }
    let (_, t, m) = target.dims3()?;
    let mask = length_mask(frame_lens, t, target.dtype())?;
    let n_frames: usize = frame_lens.iter().sum();
    if n_frames == 0 {
        return Err(ModelError::Empty("mel target"));
    }
    let mask3 = mask.unsqueeze(2)?;
    let mse = |pred: &Tensor| -> Result<Tensor> {
        Ok((pred.sub(target)?.sqr()?.broadcast_mul(&mask3)?.sum_all()? / (n_frames * m) as f64)?)
    };
    let mel_pre_mse = mse(&out.mel_pre)?;
    let mel_post_mse = mse(&out.mel_post)?;
    let x = &out.gate_logits;
    let bce = x
        .relu()?
        .sub(&x.mul(stops)?)?
        .add(&(x.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    let stop_bce = (bce.mul(&mask)?.sum_all()? / n_frames as f64)?;
    let total = mel_pre_mse.add(&mel_post_mse)?.add(&stop_bce)?;
    Ok(LossTerms {
        mel_pre_mse,
        mel_post_mse,
        stop_bce,
        total,
    })
}

/// Penalty on attention mass far from the diagonal:
/// `mean A[b,t,l] · (1 − exp(−(l/L_b − t/T_b)² / 2g²))` over valid cells.
pub fn guided_attention_loss(out: &SpectrogenOutput, text_lens: &[usize], g: f64) -> Result<Tensor> {
    let (b, t, l) = out.attention.dims3()?;
    if text_lens.len() != b {
        return Err(ModelError::Shape(format!("{b} items but {} text lengths", text_lens.len())));
    }
    let mut w = vec![0f32; b * t * l];
    let mut cells = 0usize;
    for (i, (&n_t, &n_l)) in out.frame_lens.iter().zip(text_lens).enumerate() {
        for ti in 0..n_t.min(t) {
            for li in 0..n_l.min(l) {
                let d = li as f64 / n_l as f64 - ti as f64 / n_t as f64;
                w[(i * t + ti) * l + li] = (1.0 - (-d * d / (2.0 * g * g)).exp()) as f32;
                cells += 1;
            }
        }
    }
    if cells == 0 {
        return Err(ModelError::Empty("attention"));
    }
    let w = Tensor::from_vec(w, (b, t, l), &Device::Cpu)?.to_dtype(out.attention.dtype())?;
    Ok((out.attention.mul(&w)?.sum_all()? / cells as f64)?)
}
