//! Adam optimization and the training protocol: sequential batches, per
//! batch loss combination via a weighting strategy, per-epoch validation,
//! best-checkpoint retention by validation segmentation loss.
//!
//! Everything is deterministic: no shuffling, no dropout, fixed batch
//! order, so (config, datasets) fully determine the report and the best
//! model.

use crate::data::{Scene, IMAGE_CHANNELS, NUM_CLASSES};
use crate::error::{AuxError, Result};
use crate::layers::softmax_channels;
use crate::models::{ModelGraph, ModelKind};
use crate::tasks::{
    argmax_channels, confusion, depth_loss, iou_metrics, seg_loss, ConfusionMatrix, DepthTarget,
    SegTarget,
};
use crate::tensor::Tensor;
use crate::weighting::{WeightRule, WeightStrategy};

// ── Adam ────────────────────────────────────────────────────────────────

pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: Vec<(Vec<f64>, Vec<f64>)>, // (m, v) per parameter tensor
}

impl AdamState {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64, params: &[(String, Tensor)]) -> Self {
        let moments = params
            .iter()
            .map(|(_, t)| (vec![0.0; t.numel()], vec![0.0; t.numel()]))
            .collect();
        AdamState { lr, beta1, beta2, eps, step: 0, moments }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g²;
    /// theta <- theta - lr·m̂/(sqrt(v̂)+eps) with bias-corrected m̂, v̂.
    /// Missing gradients count as zero. Gradients are left untouched.
    pub fn step(&mut self, params: &[(String, Tensor)]) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((name, tensor), (m, v)) in params.iter().zip(self.moments.iter_mut()) {
            tensor.with_grad(|grad| -> Result<()> {
                let mut data = tensor.data_mut();
                for i in 0..data.len() {
                    let g = grad.map_or(0.0, |g| g[i]);
                    if !g.is_finite() {
                        return Err(AuxError::NonFinite(format!(
                            "gradient of parameter {name} at entry {i}"
                        )));
                    }
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                }
                Ok(())
            })?;
        }
        Ok(())
    }
}

// ── configuration and report ────────────────────────────────────────────

/// The trained variants: the plain baseline, the four auxiliary weighting
/// schemes, and the RGB-D input baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, serde::Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Segnet,
    Aux400,
    Aux1000,
    Auxtwb,
    Auxftwb,
    Fusenet,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Segnet,
        Variant::Aux400,
        Variant::Aux1000,
        Variant::Auxtwb,
        Variant::Auxftwb,
        Variant::Fusenet,
    ];

    /// The five variants compared on accuracy (fusenet is kept for the
    /// parameter table).
    pub const TRAINED: [Variant; 5] = [
        Variant::Segnet,
        Variant::Aux400,
        Variant::Aux1000,
        Variant::Auxtwb,
        Variant::Auxftwb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Segnet => "segnet",
            Variant::Aux400 => "aux400",
            Variant::Aux1000 => "aux1000",
            Variant::Auxtwb => "auxtwb",
            Variant::Auxftwb => "auxftwb",
            Variant::Fusenet => "fusenet",
        }
    }

    pub fn model_kind(self) -> ModelKind {
        match self {
            Variant::Segnet => ModelKind::SegNet,
            Variant::Fusenet => ModelKind::FuseNet,
            _ => ModelKind::AuxNet,
        }
    }

    /// Weighting rule for the two-task variants; `None` trains on the
    /// segmentation loss alone.
    pub fn weight_rule(self) -> Option<WeightRule> {
        match self {
            Variant::Segnet | Variant::Fusenet => None,
            Variant::Aux400 => Some(WeightRule::Fixed { lambda_seg: 400.0, lambda_depth: 1.0 }),
            Variant::Aux1000 => Some(WeightRule::Fixed { lambda_seg: 1000.0, lambda_depth: 1.0 }),
            Variant::Auxtwb => Some(WeightRule::Twb),
            Variant::Auxftwb => Some(WeightRule::Ftwb),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Moving-average decay for the loss weights; `None` disables
    /// smoothing.
    pub ema_beta: Option<f64>,
    /// Loss-derived weights are batch constants when true (the default);
    /// false differentiates through the weight product instead.
    pub detached: bool,
    pub num_classes: usize,
}

impl TrainConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        TrainConfig {
            variant,
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed,
            ema_beta: None,
            detached: true,
            num_classes: NUM_CLASSES,
        }
    }
}

/// Per-batch record of the losses and the weights actually applied.
#[derive(Clone, Debug)]
pub struct BatchRow {
    pub epoch: usize,
    pub batch: usize,
    pub seg_loss: f64,
    pub depth_loss: f64,
    pub lambda_seg: f64,
    pub lambda_depth: f64,
    pub total_loss: f64,
}

#[derive(Clone, Debug)]
pub struct EpochRow {
    pub epoch: usize,
    /// Train-set means over the epoch's batches.
    pub seg_loss: f64,
    pub depth_loss: f64,
    pub lambda_seg: f64,
    pub lambda_depth: f64,
    pub total_loss: f64,
    pub val_seg_loss: f64,
    pub val_mean_iou: f64,
    pub val_iou: Vec<Option<f64>>,
    pub is_best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochRow>,
    pub batches: Vec<BatchRow>,
    /// 1-based epoch with the lowest validation segmentation loss; ties go
    /// to the earlier epoch.
    pub best_epoch: usize,
    pub num_classes: usize,
}

fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}

impl TrainReport {
    /// One row per epoch; floats carry 9 significant digits; IoU of a class
    /// absent from prediction and truth prints as "-".
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("epoch,L_seg,L_depth,lambda_seg,lambda_depth,L_total,val_L_seg,val_miou");
        for c in 0..self.num_classes {
            out.push_str(&format!(",val_iou_class{c}"));
        }
        out.push_str(",best_flag\n");
        for row in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}",
                row.epoch,
                fmt9(row.seg_loss),
                fmt9(row.depth_loss),
                fmt9(row.lambda_seg),
                fmt9(row.lambda_depth),
                fmt9(row.total_loss),
                fmt9(row.val_seg_loss),
                fmt9(row.val_mean_iou),
            ));
            for c in 0..self.num_classes {
                match row.val_iou[c] {
                    Some(v) => out.push_str(&format!(",{}", fmt9(v))),
                    None => out.push_str(",-"),
                }
            }
            out.push_str(if row.is_best { ",1\n" } else { ",0\n" });
        }
        out
    }

    /// Validation mean IoU at the best epoch.
    pub fn best_val_miou(&self) -> f64 {
        self.epochs[self.best_epoch - 1].val_mean_iou
    }
}

// ── batch assembly ──────────────────────────────────────────────────────

fn check_scenes(scenes: &[Scene], what: &str) -> Result<(usize, usize)> {
    let first = scenes
        .first()
        .ok_or_else(|| AuxError::InvalidArgument(format!("{what} dataset is empty")))?;
    let (h, w) = (first.height, first.width);
    if scenes.iter().any(|s| s.height != h || s.width != w) {
        return Err(AuxError::InvalidArgument(format!(
            "{what} dataset has mixed extents"
        )));
    }
    if h % 8 != 0 || w % 8 != 0 {
        return Err(AuxError::InvalidArgument(format!(
            "{what} extents {h}x{w} not divisible by 8"
        )));
    }
    Ok((h, w))
}

/// `[B, 3, H, W]` input, or `[B, 4, H, W]` with the depth map appended as
/// an input channel for the RGB-D model.
fn batch_input(scenes: &[Scene], with_depth_channel: bool) -> Tensor {
    let (h, w) = (scenes[0].height, scenes[0].width);
    let hw = h * w;
    let c = IMAGE_CHANNELS + usize::from(with_depth_channel);
    let mut data = Vec::with_capacity(scenes.len() * c * hw);
    for s in scenes {
        data.extend_from_slice(&s.image);
        if with_depth_channel {
            data.extend_from_slice(&s.depth);
        }
    }
    Tensor::from_vec(&[scenes.len(), c, h, w], data, false).expect("batch shape")
}

fn batch_seg_target(scenes: &[Scene]) -> SegTarget {
    let (h, w) = (scenes[0].height, scenes[0].width);
    let labels = scenes.iter().flat_map(|s| s.labels.iter().copied()).collect();
    SegTarget::new(scenes.len(), h, w, labels, None).expect("target shape")
}

fn batch_depth_target(scenes: &[Scene]) -> DepthTarget {
    let (h, w) = (scenes[0].height, scenes[0].width);
    let values = scenes.iter().flat_map(|s| s.depth.iter().copied()).collect();
    DepthTarget::new(scenes.len(), h, w, values).expect("target shape")
}

// ── evaluation ──────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub seg_loss: f64,
    pub mean_iou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub confusion: ConfusionMatrix,
}

/// Segmentation-only pass over a dataset: cross-entropy averaged over all
/// pixels plus confusion-matrix IoU. The auxiliary decoder never runs.
pub fn evaluate(
    model: &ModelGraph,
    scenes: &[Scene],
    batch_size: usize,
    num_classes: usize,
) -> Result<EvalResult> {
    check_scenes(scenes, "eval")?;
    let with_depth_input = model.kind == ModelKind::FuseNet;
    let mut cm = ConfusionMatrix::new(num_classes);
    let mut loss_sum = 0.0;
    let mut pixel_count = 0usize;
    for chunk in scenes.chunks(batch_size.max(1)) {
        let x = batch_input(chunk, with_depth_input);
        let target = batch_seg_target(chunk);
        let logits = model.forward_seg(&x)?;
        let probs = softmax_channels(&logits)?;
        let loss = seg_loss(&probs, &target)?.value();
        let pixels = chunk.len() * chunk[0].height * chunk[0].width;
        loss_sum += loss * pixels as f64;
        pixel_count += pixels;
        cm.merge(&confusion(&argmax_channels(&probs)?, &target, num_classes)?);
    }
    let metrics = iou_metrics(&cm)?;
    Ok(EvalResult {
        seg_loss: loss_sum / pixel_count as f64,
        mean_iou: metrics.mean_iou,
        per_class_iou: metrics.per_class,
        confusion: cm,
    })
}

// ── training loop ───────────────────────────────────────────────────────

/// Train a variant on the given splits. Returns the model restored to its
/// best validation epoch together with the full report.
pub fn train(
    config: &TrainConfig,
    train_scenes: &[Scene],
    val_scenes: &[Scene],
) -> Result<(ModelGraph, TrainReport)> {
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(AuxError::InvalidArgument(
            "epochs and batch size must be at least 1".into(),
        ));
    }
    let (h, w) = check_scenes(train_scenes, "train")?;
    let (vh, vw) = check_scenes(val_scenes, "val")?;
    if (h, w) != (vh, vw) {
        return Err(AuxError::InvalidArgument(format!(
            "train {h}x{w} vs val {vh}x{vw} extents differ"
        )));
    }

    let kind = config.variant.model_kind();
    let model = ModelGraph::build(kind, IMAGE_CHANNELS, config.num_classes, h, w, config.seed)?;
    let params = model.named_params();
    let mut adam = AdamState::new(config.lr, config.beta1, config.beta2, config.eps, &params);

    let mut strategy = config.variant.weight_rule().map(|rule| {
        let mut s = WeightStrategy::new(rule);
        s.detached = config.detached;
        s
    });
    if let (Some(s), Some(beta)) = (&mut strategy, config.ema_beta) {
        *s = s.clone().with_ema(beta)?;
    }
    let with_depth_input = kind == ModelKind::FuseNet;

    let mut epochs = Vec::with_capacity(config.epochs);
    let mut batch_rows = Vec::new();
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None; // (epoch, val loss, params)

    for epoch in 1..=config.epochs {
        let mut sums = [0.0f64; 5]; // seg, depth, lambda_seg, lambda_depth, total
        let mut n_batches = 0usize;
        for (bi, chunk) in train_scenes.chunks(config.batch_size).enumerate() {
            let x = batch_input(chunk, with_depth_input);
            let target = batch_seg_target(chunk);
            let out = model.forward(&x)?;
            let probs = softmax_channels(&out.seg_logits)?;
            let l_seg = seg_loss(&probs, &target)?;

            let (total, row) = match (&mut strategy, out.depth) {
                (Some(strategy), Some(depth_pred)) => {
                    let dtarget = batch_depth_target(chunk);
                    let l_depth = depth_loss(&depth_pred, &dtarget)?;
                    let res = strategy.step(&l_seg, &l_depth)?;
                    let row = BatchRow {
                        epoch,
                        batch: bi + 1,
                        seg_loss: res.loss_seg,
                        depth_loss: res.loss_depth,
                        lambda_seg: res.lambda_seg,
                        lambda_depth: res.lambda_depth,
                        total_loss: res.total.value(),
                    };
                    (res.total, row)
                }
                // Single-task training: the strategy is never consulted.
                _ => {
                    let v = l_seg.value();
                    let row = BatchRow {
                        epoch,
                        batch: bi + 1,
                        seg_loss: v,
                        depth_loss: 0.0,
                        lambda_seg: 1.0,
                        lambda_depth: 0.0,
                        total_loss: v,
                    };
                    (l_seg, row)
                }
            };

            if !row.total_loss.is_finite() {
                return Err(AuxError::NonFinite(format!(
                    "total loss at epoch {epoch} batch {}",
                    bi + 1
                )));
            }
            total.backward()?;
            adam.step(&params)?;
            model.zero_grads();

            sums[0] += row.seg_loss;
            sums[1] += row.depth_loss;
            sums[2] += row.lambda_seg;
            sums[3] += row.lambda_depth;
            sums[4] += row.total_loss;
            n_batches += 1;
            batch_rows.push(row);
        }

        let val = evaluate(&model, val_scenes, config.batch_size, config.num_classes)?;
        let improved = match &best {
            None => true,
            Some((_, best_loss, _)) => val.seg_loss < *best_loss,
        };
        if improved {
            let snapshot = params.iter().map(|(_, t)| t.to_vec()).collect();
            best = Some((epoch, val.seg_loss, snapshot));
        }
        let nb = n_batches as f64;
        epochs.push(EpochRow {
            epoch,
            seg_loss: sums[0] / nb,
            depth_loss: sums[1] / nb,
            lambda_seg: sums[2] / nb,
            lambda_depth: sums[3] / nb,
            total_loss: sums[4] / nb,
            val_seg_loss: val.seg_loss,
            val_mean_iou: val.mean_iou,
            val_iou: val.per_class_iou,
            is_best: improved,
        });
    }

    // Later epochs may have marked earlier best flags stale: keep only the
    // final winner.
    let (best_epoch, _, snapshot) = best.expect("at least one epoch ran");
    for row in &mut epochs {
        row.is_best = row.epoch == best_epoch;
    }
    for ((_, t), data) in params.iter().zip(&snapshot) {
        t.set_data(data)?;
    }
    Ok((
        model,
        TrainReport { epochs, batches: batch_rows, best_epoch, num_classes: config.num_classes },
    ))
}
