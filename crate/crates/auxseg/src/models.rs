//! The three comparison networks at toy scale, all fully convolutional:
//!
//!   * segnet:  encoder + segmentation decoder;
//!   * auxnet:  shared encoder + segmentation decoder + depth decoder
//!              (the depth decoder exists only for training supervision);
//!   * fusenet: RGB encoder + second depth-input encoder whose stage
//!              outputs are added element-wise into the RGB stages, single
//!              segmentation decoder.
//!
//! Encoder: three stages of conv3x3(pad 1) + relu + maxpool2 with channels
//! (16, 32, 64), so the bottleneck sits at 1/8 resolution. Decoders mirror
//! it with three stride-2 transposed convolutions (each followed by relu),
//! re-injecting the encoder stage-2 and stage-1 features by channel
//! concatenation, and finish with a 1x1 head: `num_classes` logits for
//! segmentation, one unbounded channel for depth.

use std::collections::HashMap;
use std::path::Path;

use crate::data::Rng;
use crate::error::{AuxError, Result};
use crate::layers::{
    concat_channels, conv2d, maxpool2, transposed_conv2d, ConvSpec, TransposedConvSpec,
};
use crate::tensor::Tensor;

pub const ENCODER_CHANNELS: [usize; 3] = [16, 32, 64];
/// Decoder widths after each upsampling stage. Narrow on purpose: the
/// encoder should dominate the parameter budget, as it does in the
/// full-scale architectures this mirrors.
const DECODER_CHANNELS: [usize; 3] = [10, 8, 8];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    SegNet,
    AuxNet,
    FuseNet,
}

impl ModelKind {
    pub fn code(self) -> u32 {
        match self {
            ModelKind::SegNet => 0,
            ModelKind::AuxNet => 1,
            ModelKind::FuseNet => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(ModelKind::SegNet),
            1 => Ok(ModelKind::AuxNet),
            2 => Ok(ModelKind::FuseNet),
            other => Err(AuxError::Format(format!("unknown topology kind {other}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::SegNet => "segnet",
            ModelKind::AuxNet => "auxnet",
            ModelKind::FuseNet => "fusenet",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CountMode {
    Training,
    /// Excludes the depth decoder: the auxiliary task is not run at
    /// inference.
    Inference,
}

impl std::fmt::Debug for ModelGraph {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelGraph")
            .field("kind", &self.kind)
            .field("in_channels", &self.in_channels)
            .field("num_classes", &self.num_classes)
            .finish()
    }
}

struct Encoder {
    stages: Vec<ConvSpec>, // conv3x3 pad 1; relu + maxpool2 applied in forward
}

impl Encoder {
    fn new(in_channels: usize, rng: &mut Rng) -> Self {
        let mut stages = Vec::new();
        let mut c = in_channels;
        for &out in &ENCODER_CHANNELS {
            stages.push(ConvSpec::new(c, out, 3, 1, 1, rng));
            c = out;
        }
        Encoder { stages }
    }
}

struct Decoder {
    up1: TransposedConvSpec,
    up2: TransposedConvSpec,
    up3: TransposedConvSpec,
    head: ConvSpec,
}

impl Decoder {
    fn new(out_channels: usize, rng: &mut Rng) -> Self {
        let [d1, d2, d3] = DECODER_CHANNELS;
        let [e1, e2, e3] = ENCODER_CHANNELS;
        Decoder {
            up1: TransposedConvSpec::new(e3, d1, 2, 2, rng),
            up2: TransposedConvSpec::new(d1 + e2, d2, 2, 2, rng),
            up3: TransposedConvSpec::new(d2 + e1, d3, 2, 2, rng),
            head: ConvSpec::new(d3, out_channels, 1, 1, 0, rng),
        }
    }

    fn param_count(&self) -> usize {
        self.up1.param_count()
            + self.up2.param_count()
            + self.up3.param_count()
            + self.head.param_count()
    }
}

/// Standalone parameter count of a depth decoder with the default widths.
pub fn depth_decoder_param_count() -> usize {
    let mut rng = Rng::new(0);
    Decoder::new(1, &mut rng).param_count()
}

pub struct ForwardOutput {
    pub seg_logits: Tensor,
    pub depth: Option<Tensor>,
}

pub struct ModelGraph {
    pub kind: ModelKind,
    /// RGB channels consumed by the main encoder. A fusenet batch carries
    /// one extra channel (the depth input) on top of these.
    pub in_channels: usize,
    pub num_classes: usize,
    encoder: Encoder,
    depth_encoder: Option<Encoder>,
    seg_decoder: Decoder,
    depth_decoder: Option<Decoder>,
}

impl ModelGraph {
    /// Deterministic construction from (hyperparameters, seed). `height`
    /// and `width` are validated for the three pooling stages; the graph
    /// itself is fully convolutional and accepts any extents divisible
    /// by 8 at forward time.
    pub fn build(
        kind: ModelKind,
        in_channels: usize,
        num_classes: usize,
        height: usize,
        width: usize,
        seed: u64,
    ) -> Result<Self> {
        if height % 8 != 0 {
            return Err(AuxError::InvalidArgument(format!(
                "height must be divisible by 8, got {height}"
            )));
        }
        if width % 8 != 0 {
            return Err(AuxError::InvalidArgument(format!(
                "width must be divisible by 8, got {width}"
            )));
        }
        if num_classes < 2 {
            return Err(AuxError::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let mut rng = Rng::new(seed);
        // Draw order is part of the contract: encoder, then the fusenet
        // depth encoder, then the seg decoder, then the auxnet depth
        // decoder. segnet and auxnet therefore share their encoder and seg
        // decoder initialization for a given seed.
        let encoder = Encoder::new(in_channels, &mut rng);
        let depth_encoder = match kind {
            ModelKind::FuseNet => Some(Encoder::new(1, &mut rng)),
            _ => None,
        };
        let seg_decoder = Decoder::new(num_classes, &mut rng);
        let depth_decoder = match kind {
            ModelKind::AuxNet => Some(Decoder::new(1, &mut rng)),
            _ => None,
        };
        Ok(ModelGraph {
            kind,
            in_channels,
            num_classes,
            encoder,
            depth_encoder,
            seg_decoder,
            depth_decoder,
        })
    }

    /// Expected input channel count for a forward batch.
    pub fn batch_channels(&self) -> usize {
        match self.kind {
            ModelKind::FuseNet => self.in_channels + 1,
            _ => self.in_channels,
        }
    }

    fn check_batch(&self, batch: &Tensor) -> Result<(usize, usize)> {
        let [_, c, h, w] = *batch.shape() else {
            return Err(AuxError::ShapeMismatch(format!(
                "forward wants NCHW, got {:?}",
                batch.shape()
            )));
        };
        if c != self.batch_channels() {
            return Err(AuxError::ShapeMismatch(format!(
                "batch has {c} channels, {} expects {}",
                self.kind.name(),
                self.batch_channels()
            )));
        }
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(AuxError::ShapeMismatch(format!(
                "spatial extents must be positive multiples of 8, got {h}x{w}"
            )));
        }
        Ok((h, w))
    }

    /// Encoder features at 1/2, 1/4 and 1/8 resolution, with the fusenet
    /// depth branch added element-wise into each stage.
    fn encode(&self, batch: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let stage = |spec: &ConvSpec, x: &Tensor| -> Result<Tensor> {
            maxpool2(&conv2d(x, spec)?.relu())
        };
        match &self.depth_encoder {
            None => {
                let f1 = stage(&self.encoder.stages[0], batch)?;
                let f2 = stage(&self.encoder.stages[1], &f1)?;
                let f3 = stage(&self.encoder.stages[2], &f2)?;
                Ok((f1, f2, f3))
            }
            Some(depth_enc) => {
                let rgb = slice_channels(batch, 0, self.in_channels)?;
                let depth_in = slice_channels(batch, self.in_channels, self.in_channels + 1)?;
                let d1 = stage(&depth_enc.stages[0], &depth_in)?;
                let f1 = stage(&self.encoder.stages[0], &rgb)?.add(&d1)?;
                let d2 = stage(&depth_enc.stages[1], &d1)?;
                let f2 = stage(&self.encoder.stages[1], &f1)?.add(&d2)?;
                let d3 = stage(&depth_enc.stages[2], &d2)?;
                let f3 = stage(&self.encoder.stages[2], &f2)?.add(&d3)?;
                Ok((f1, f2, f3))
            }
        }
    }

    fn decode(&self, dec: &Decoder, f3: &Tensor, f2: &Tensor, f1: &Tensor) -> Result<Tensor> {
        let u1 = transposed_conv2d(f3, &dec.up1)?.relu();
        let u2 = transposed_conv2d(&concat_channels(&u1, f2)?, &dec.up2)?.relu();
        let u3 = transposed_conv2d(&concat_channels(&u2, f1)?, &dec.up3)?.relu();
        conv2d(&u3, &dec.head)
    }

    /// Training forward: segmentation logits at full resolution, plus the
    /// depth map when a depth decoder exists.
    pub fn forward(&self, batch: &Tensor) -> Result<ForwardOutput> {
        self.check_batch(batch)?;
        let (f1, f2, f3) = self.encode(batch)?;
        let seg_logits = self.decode(&self.seg_decoder, &f3, &f2, &f1)?;
        let depth = match &self.depth_decoder {
            Some(dec) => Some(self.decode(dec, &f3, &f2, &f1)?),
            None => None,
        };
        Ok(ForwardOutput { seg_logits, depth })
    }

    /// Inference forward: the auxiliary decoder is skipped entirely. The
    /// segmentation output is bit-identical to `forward(...).seg_logits`.
    pub fn forward_seg(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let (f1, f2, f3) = self.encode(batch)?;
        self.decode(&self.seg_decoder, &f3, &f2, &f1)
    }

    /// Named parameters in a fixed order (also the checkpoint order).
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        let push_encoder = |prefix: &str, enc: &Encoder, out: &mut Vec<(String, Tensor)>| {
            for (i, stage) in enc.stages.iter().enumerate() {
                out.push((format!("{prefix}.stage{}.conv.weight", i + 1), stage.weights.clone()));
                out.push((format!("{prefix}.stage{}.conv.bias", i + 1), stage.bias.clone()));
            }
        };
        push_encoder("encoder", &self.encoder, &mut out);
        if let Some(denc) = &self.depth_encoder {
            push_encoder("depth_encoder", denc, &mut out);
        }
        let push_decoder = |prefix: &str, dec: &Decoder, out: &mut Vec<(String, Tensor)>| {
            for (name, spec) in [("up1", &dec.up1), ("up2", &dec.up2), ("up3", &dec.up3)] {
                out.push((format!("{prefix}.{name}.weight"), spec.weights.clone()));
                out.push((format!("{prefix}.{name}.bias"), spec.bias.clone()));
            }
            out.push((format!("{prefix}.head.weight"), dec.head.weights.clone()));
            out.push((format!("{prefix}.head.bias"), dec.head.bias.clone()));
        };
        push_decoder("seg_decoder", &self.seg_decoder, &mut out);
        if let Some(ddec) = &self.depth_decoder {
            push_decoder("depth_decoder", ddec, &mut out);
        }
        out
    }

    pub fn zero_grads(&self) {
        for (_, p) in self.named_params() {
            p.zero_grad();
        }
    }

    pub fn param_count(&self, mode: CountMode) -> usize {
        let mut total: usize = self.named_params().iter().map(|(_, t)| t.numel()).sum();
        if mode == CountMode::Inference {
            if let Some(dec) = &self.depth_decoder {
                total -= dec.param_count();
            }
        }
        total
    }

    /// Drop the depth decoder (shares the remaining parameter buffers).
    /// Segmentation outputs do not change by construction.
    pub fn strip_depth_decoder(self) -> ModelGraph {
        ModelGraph { depth_decoder: None, ..self }
    }
}

/// Channel slice of a constant NCHW tensor (used to split fusenet inputs).
fn slice_channels(t: &Tensor, from: usize, to: usize) -> Result<Tensor> {
    let [n, c, h, w] = *t.shape() else {
        return Err(AuxError::ShapeMismatch(format!(
            "slice_channels wants NCHW, got {:?}",
            t.shape()
        )));
    };
    debug_assert!(!t.requires_grad(), "slice_channels drops the graph");
    if from >= to || to > c {
        return Err(AuxError::InvalidArgument(format!(
            "channel slice {from}..{to} of {c}"
        )));
    }
    let hw = h * w;
    let data = t.data();
    let mut out = Vec::with_capacity(n * (to - from) * hw);
    for img in 0..n {
        out.extend_from_slice(&data[(img * c + from) * hw..(img * c + to) * hw]);
    }
    drop(data);
    Tensor::from_vec(&[n, to - from, h, w], out, false)
}

// ── checkpoint format ───────────────────────────────────────────────────
//
// Little-endian layout:
//   magic "AUXC", u32 version=1, u32 topology-kind, u32 num tensors;
// per tensor: u16 name length, UTF-8 name, u8 rank, u32 extents (rank of
// them), f64 data. No padding.

const CKPT_MAGIC: &[u8; 4] = b"AUXC";
const CKPT_VERSION: u32 = 1;

pub fn checkpoint_bytes(model: &ModelGraph) -> Vec<u8> {
    let params = model.named_params();
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&model.kind.code().to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in &params {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.shape().len() as u8);
        for &e in tensor.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in tensor.data().iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(model: &ModelGraph, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(AuxError::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}",
                self.off
            )));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ModelGraph> {
    let mut cur = Cursor { bytes, off: 0 };
    if cur.take(4)? != CKPT_MAGIC {
        return Err(AuxError::Format("bad magic, not a checkpoint".into()));
    }
    let version = cur.u32()?;
    if version != CKPT_VERSION {
        return Err(AuxError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let kind = ModelKind::from_code(cur.u32()?)?;
    let n_tensors = cur.u32()? as usize;

    let mut records: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    for _ in 0..n_tensors {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| AuxError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u8()? as usize;
        if rank == 0 || rank > 4 {
            return Err(AuxError::Format(format!("tensor {name}: bad rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if records.insert(name.clone(), (shape, data)).is_some() {
            return Err(AuxError::Format(format!("duplicate tensor {name}")));
        }
    }
    if cur.off != bytes.len() {
        return Err(AuxError::Format(format!(
            "trailing bytes: {} past end of declared tensors",
            bytes.len() - cur.off
        )));
    }

    // Rebuild the topology from the stored hyperparameters, then overwrite
    // every parameter, demanding an exact name and shape match.
    let stem = records
        .get("encoder.stage1.conv.weight")
        .ok_or_else(|| AuxError::Format("topology mismatch: missing encoder stem".into()))?;
    let in_channels = *stem.0.get(1).ok_or_else(|| {
        AuxError::Format("topology mismatch: malformed encoder stem shape".into())
    })?;
    let head = records
        .get("seg_decoder.head.weight")
        .ok_or_else(|| AuxError::Format("topology mismatch: missing seg head".into()))?;
    let num_classes = *head
        .0
        .first()
        .ok_or_else(|| AuxError::Format("topology mismatch: malformed seg head shape".into()))?;

    let model = ModelGraph::build(kind, in_channels, num_classes, 8, 8, 0)?;
    let mut used = 0usize;
    for (name, tensor) in model.named_params() {
        let (shape, data) = records.get(&name).ok_or_else(|| {
            AuxError::Format(format!(
                "topology mismatch: {} checkpoint lacks tensor {name}",
                kind.name()
            ))
        })?;
        if shape.as_slice() != tensor.shape() {
            return Err(AuxError::Format(format!(
                "topology mismatch: tensor {name} has shape {shape:?}, expected {:?}",
                tensor.shape()
            )));
        }
        tensor.set_data(data)?;
        used += 1;
    }
    if used != records.len() {
        return Err(AuxError::Format(format!(
            "topology mismatch: checkpoint carries {} tensors, {} topology uses {used}",
            records.len(),
            kind.name()
        )));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<ModelGraph> {
    parse_checkpoint(&std::fs::read(path)?)
}
