//! Task losses and segmentation metrics: pixel-wise cross-entropy over
//! softmax probabilities for segmentation, mean absolute error for depth,
//! confusion-matrix based per-class and mean IoU.

use crate::error::{AuxError, Result};
use crate::tensor::Tensor;

/// Probabilities below this are clamped before the log so the loss stays
/// finite in f64.
pub const PROB_CLAMP: f64 = 1e-12;

/// Ground-truth label map with an optional per-pixel ignore mask.
#[derive(Clone, Debug)]
pub struct SegTarget {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
    pub ignore: Option<Vec<bool>>,
}

impl SegTarget {
    pub fn new(
        batch: usize,
        height: usize,
        width: usize,
        labels: Vec<u8>,
        ignore: Option<Vec<bool>>,
    ) -> Result<Self> {
        let n = batch * height * width;
        if labels.len() != n {
            return Err(AuxError::ShapeMismatch(format!(
                "label map has {} entries, expected {n}",
                labels.len()
            )));
        }
        if let Some(mask) = &ignore {
            if mask.len() != n {
                return Err(AuxError::ShapeMismatch(format!(
                    "ignore mask has {} entries, expected {n}",
                    mask.len()
                )));
            }
        }
        Ok(SegTarget { batch, height, width, labels, ignore })
    }

    fn counted(&self, px: usize) -> bool {
        self.ignore.as_ref().map_or(true, |m| !m[px])
    }
}

/// Normalized nearness map in [0, 1], shape `[N, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct DepthTarget {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl DepthTarget {
    pub fn new(batch: usize, height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != batch * height * width {
            return Err(AuxError::ShapeMismatch(format!(
                "depth map has {} entries, expected {}",
                values.len(),
                batch * height * width
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(AuxError::InvalidArgument(format!(
                "depth value {bad} outside [0, 1]"
            )));
        }
        Ok(DepthTarget { batch, height, width, values })
    }
}

/// Mean over counted pixels of -log p(true class). `probs` must be valid
/// per-pixel distributions, e.g. from `softmax_channels`.
pub fn seg_loss(probs: &Tensor, target: &SegTarget) -> Result<Tensor> {
    let [n, c, h, w] = *probs.shape() else {
        return Err(AuxError::ShapeMismatch(format!(
            "seg_loss probs must be NCHW, got {:?}",
            probs.shape()
        )));
    };
    if (n, h, w) != (target.batch, target.height, target.width) {
        return Err(AuxError::ShapeMismatch(format!(
            "probs {:?} vs target {}x{}x{}",
            probs.shape(),
            target.batch,
            target.height,
            target.width
        )));
    }
    let hw = h * w;
    let mut indices = Vec::with_capacity(n * hw);
    for img in 0..n {
        for px in 0..hw {
            let label = target.labels[img * hw + px] as usize;
            if label >= c {
                return Err(AuxError::InvalidArgument(format!(
                    "label {label} out of range for {c} classes at pixel {px} of image {img}"
                )));
            }
            if target.counted(img * hw + px) {
                indices.push((img * c + label) * hw + px);
            }
        }
    }
    if indices.is_empty() {
        return Err(AuxError::InvalidArgument(
            "all pixels ignored; segmentation loss undefined".into(),
        ));
    }
    let gathered = probs.gather(indices)?;
    Ok(gathered.clamp_min(PROB_CLAMP).log()?.mean()?.neg())
}

/// Mean absolute error between predicted and true depth over all pixels.
pub fn depth_loss(pred: &Tensor, target: &DepthTarget) -> Result<Tensor> {
    let want = [target.batch, 1, target.height, target.width];
    if pred.shape() != want {
        return Err(AuxError::ShapeMismatch(format!(
            "depth pred {:?} vs target {:?}",
            pred.shape(),
            want
        )));
    }
    let t = Tensor::from_vec(&want, target.values.clone(), false)?;
    pred.sub(&t)?.abs().mean()
}

/// Row = ground truth class, column = predicted class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn at(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulation over batches is plain addition.
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

/// Per-pixel argmax over the channel axis; ties resolve to the lowest class
/// index.
pub fn argmax_channels(probs: &Tensor) -> Result<Vec<u8>> {
    let [n, c, h, w] = *probs.shape() else {
        return Err(AuxError::ShapeMismatch(format!(
            "argmax_channels wants NCHW, got {:?}",
            probs.shape()
        )));
    };
    let hw = h * w;
    let data = probs.data();
    let mut out = Vec::with_capacity(n * hw);
    for img in 0..n {
        for px in 0..hw {
            let mut best = 0usize;
            let mut best_val = data[img * c * hw + px];
            for ch in 1..c {
                let v = data[(img * c + ch) * hw + px];
                if v > best_val {
                    best_val = v;
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

/// Tally predictions against ground truth over counted pixels. A matrix
/// with zero total is allowed here; `iou_metrics` rejects it.
pub fn confusion(pred_labels: &[u8], target: &SegTarget, num_classes: usize) -> Result<ConfusionMatrix> {
    let n = target.batch * target.height * target.width;
    if pred_labels.len() != n {
        return Err(AuxError::ShapeMismatch(format!(
            "{} predictions for {n} pixels",
            pred_labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for px in 0..n {
        if !target.counted(px) {
            continue;
        }
        let truth = target.labels[px] as usize;
        let pred = pred_labels[px] as usize;
        if truth >= num_classes || pred >= num_classes {
            return Err(AuxError::InvalidArgument(format!(
                "label out of range at pixel {px}: truth {truth}, pred {pred}"
            )));
        }
        cm.counts[truth * num_classes + pred] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Debug)]
pub struct IouMetrics {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub mean_iou: f64,
}

/// IoU_c = TP / (TP + FP + FN). Classes with zero union are excluded from
/// the mean and reported as absent.
pub fn iou_metrics(cm: &ConfusionMatrix) -> Result<IouMetrics> {
    let k = cm.num_classes;
    let mut per_class = Vec::with_capacity(k);
    let mut sum = 0.0;
    let mut present = 0usize;
    for class in 0..k {
        let tp = cm.at(class, class);
        let fp: u64 = (0..k).filter(|&r| r != class).map(|r| cm.at(r, class)).sum();
        let fn_: u64 = (0..k).filter(|&c| c != class).map(|c| cm.at(class, c)).sum();
        let union = tp + fp + fn_;
        if union == 0 {
            per_class.push(None);
        } else {
            let iou = tp as f64 / union as f64;
            per_class.push(Some(iou));
            sum += iou;
            present += 1;
        }
    }
    if present == 0 {
        return Err(AuxError::InvalidArgument(
            "every class has zero union; IoU undefined".into(),
        ));
    }
    Ok(IouMetrics { per_class, mean_iou: sum / present as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rng;
    use crate::layers::softmax_channels;
    use crate::tensor::grad_check;
    use proptest::prelude::*;

    fn uniform_probs(n: usize, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(&[n, c, h, w], vec![1.0 / c as f64; n * c * h * w], false).unwrap()
    }

    #[test]
    fn seg_loss_uniform_is_log_c() {
        let probs = uniform_probs(1, 4, 2, 2);
        let target = SegTarget::new(1, 2, 2, vec![0, 1, 2, 3], None).unwrap();
        let l = seg_loss(&probs, &target).unwrap().value();
        assert!((l - 4.0f64.ln()).abs() < 1e-12, "{l}");
    }

    #[test]
    fn seg_loss_one_hot_is_zero() {
        // p(true) = 1 at every pixel
        let mut data = vec![0.0; 1 * 3 * 2 * 1];
        let labels = vec![2u8, 0];
        for (px, &l) in labels.iter().enumerate() {
            data[(l as usize) * 2 + px] = 1.0;
        }
        let probs = Tensor::from_vec(&[1, 3, 2, 1], data, false).unwrap();
        let target = SegTarget::new(1, 2, 1, labels, None).unwrap();
        assert_eq!(seg_loss(&probs, &target).unwrap().value(), 0.0);
    }

    #[test]
    fn seg_loss_two_pixel_hand_value() {
        // p(true) = 0.5 and 0.25
        let data = vec![0.5, 0.25, 0.5, 0.75];
        let probs = Tensor::from_vec(&[1, 2, 1, 2], data, false).unwrap();
        let target = SegTarget::new(1, 1, 2, vec![0, 0], None).unwrap();
        let l = seg_loss(&probs, &target).unwrap().value();
        let want = (2.0f64.ln() + 4.0f64.ln()) / 2.0;
        assert!((l - want).abs() < 1e-12, "{l} vs {want}");
        assert!((want - 1.039721).abs() < 1e-6);
    }

    #[test]
    fn seg_loss_respects_ignore_mask() {
        let data = vec![0.5, 0.25, 0.5, 0.75];
        let probs = Tensor::from_vec(&[1, 2, 1, 2], data, false).unwrap();
        let target =
            SegTarget::new(1, 1, 2, vec![0, 0], Some(vec![false, true])).unwrap();
        let l = seg_loss(&probs, &target).unwrap().value();
        assert!((l - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_errors() {
        let probs = uniform_probs(1, 2, 1, 2);
        let bad = SegTarget::new(1, 1, 2, vec![0, 5], None).unwrap();
        assert!(seg_loss(&probs, &bad).is_err());

        let all_ignored =
            SegTarget::new(1, 1, 2, vec![0, 1], Some(vec![true, true])).unwrap();
        assert!(seg_loss(&probs, &all_ignored).is_err());
    }

    #[test]
    fn depth_loss_known_values() {
        let pred = Tensor::from_vec(&[1, 1, 1, 2], vec![1.0, 2.0], false).unwrap();
        // targets must be in [0,1]; use the raw tensor path for the hand
        // value instead
        let t = Tensor::from_vec(&[1, 1, 1, 2], vec![1.5, 1.5], false).unwrap();
        let l = pred.sub(&t).unwrap().abs().mean().unwrap().value();
        assert_eq!(l, 0.5);

        let target = DepthTarget::new(1, 1, 2, vec![0.25, 0.75]).unwrap();
        let exact = Tensor::from_vec(&[1, 1, 1, 2], vec![0.25, 0.75], false).unwrap();
        assert_eq!(depth_loss(&exact, &target).unwrap().value(), 0.0);
    }

    #[test]
    fn depth_loss_translation() {
        let target = DepthTarget::new(1, 2, 2, vec![0.5; 4]).unwrap();
        for c in [-0.3, 0.2, 0.45] {
            let pred = Tensor::from_vec(&[1, 1, 2, 2], vec![0.5 + c; 4], false).unwrap();
            let l = depth_loss(&pred, &target).unwrap().value();
            assert!((l - c.abs()).abs() < 1e-15);
        }
    }

    #[test]
    fn depth_target_validates_range() {
        assert!(DepthTarget::new(1, 1, 2, vec![0.5, 1.2]).is_err());
        assert!(DepthTarget::new(1, 1, 2, vec![-0.1, 0.2]).is_err());
    }

    #[test]
    fn confusion_diagonal() {
        let target = SegTarget::new(1, 2, 5, vec![2; 10], None).unwrap();
        let cm = confusion(&[2; 10], &target, 4).unwrap();
        assert_eq!(cm.at(2, 2), 10);
        assert_eq!(cm.total(), 10);
    }

    #[test]
    fn confusion_empty_after_ignore_then_metrics_reject() {
        let target =
            SegTarget::new(1, 1, 2, vec![0, 1], Some(vec![true, true])).unwrap();
        let cm = confusion(&[0, 1], &target, 4).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(iou_metrics(&cm).is_err());
    }

    #[test]
    fn confusion_matches_bruteforce_tally() {
        let mut rng = Rng::new(77);
        for _ in 0..20 {
            let preds: Vec<u8> = (0..64).map(|_| rng.below(4) as u8).collect();
            let truths: Vec<u8> = (0..64).map(|_| rng.below(4) as u8).collect();
            let target = SegTarget::new(1, 8, 8, truths.clone(), None).unwrap();
            let cm = confusion(&preds, &target, 4).unwrap();
            for t in 0..4u8 {
                for p in 0..4u8 {
                    let want = preds
                        .iter()
                        .zip(&truths)
                        .filter(|(&pp, &tt)| pp == p && tt == t)
                        .count() as u64;
                    assert_eq!(cm.at(t as usize, p as usize), want);
                }
            }
        }
    }

    #[test]
    fn iou_perfect_and_disjoint_and_hand_value() {
        let target = SegTarget::new(1, 2, 3, vec![0, 0, 1, 1, 2, 2], None).unwrap();
        let cm = confusion(&[0, 0, 1, 1, 2, 2], &target, 3).unwrap();
        let m = iou_metrics(&cm).unwrap();
        assert_eq!(m.mean_iou, 1.0);
        assert!(m.per_class.iter().all(|c| *c == Some(1.0)));

        // disjoint: class 0 predicted nowhere it occurs
        let cm2 = confusion(&[1, 1, 0, 0, 2, 2], &target, 3).unwrap();
        let m2 = iou_metrics(&cm2).unwrap();
        assert_eq!(m2.per_class[0], Some(0.0));

        // TP=2, FP=1, FN=2 -> 0.4
        let mut cm3 = ConfusionMatrix::new(2);
        cm3.counts[0] = 2; // (0,0) TP
        cm3.counts[1] = 2; // (0,1) FN for class 0
        cm3.counts[2] = 1; // (1,0) FP for class 0
        let m3 = iou_metrics(&cm3).unwrap();
        assert_eq!(m3.per_class[0], Some(0.4));
    }

    #[test]
    fn iou_absent_class_excluded_from_mean() {
        let target = SegTarget::new(1, 1, 4, vec![0, 0, 1, 1], None).unwrap();
        let cm = confusion(&[0, 0, 1, 1], &target, 4).unwrap();
        let m = iou_metrics(&cm).unwrap();
        assert_eq!(m.per_class[2], None);
        assert_eq!(m.per_class[3], None);
        assert_eq!(m.mean_iou, 1.0);
    }

    #[test]
    fn argmax_tie_breaks_to_lowest_class() {
        let probs = Tensor::from_vec(&[1, 3, 1, 1], vec![0.4, 0.4, 0.2], false).unwrap();
        assert_eq!(argmax_channels(&probs).unwrap(), vec![0]);
    }

    #[test]
    fn merge_is_additive() {
        let t1 = SegTarget::new(1, 1, 4, vec![0, 1, 2, 3], None).unwrap();
        let t2 = SegTarget::new(1, 1, 4, vec![3, 2, 1, 0], None).unwrap();
        let c1 = confusion(&[0, 1, 1, 3], &t1, 4).unwrap();
        let c2 = confusion(&[3, 2, 0, 0], &t2, 4).unwrap();
        let mut merged = c1.clone();
        merged.merge(&c2);
        let combined_target =
            SegTarget::new(1, 1, 8, vec![0, 1, 2, 3, 3, 2, 1, 0], None).unwrap();
        let direct = confusion(&[0, 1, 1, 3, 3, 2, 0, 0], &combined_target, 4).unwrap();
        assert_eq!(merged, direct);
    }

    #[test]
    fn seg_and_depth_loss_grad_check() {
        let mut rng = Rng::new(5);
        let logits_data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let logits = Tensor::from_vec(&[2, 3, 2, 2], logits_data, true).unwrap();
        let labels: Vec<u8> = (0..8).map(|_| rng.below(3) as u8).collect();
        let target = SegTarget::new(2, 2, 2, labels, None).unwrap();
        let report = grad_check(
            || seg_loss(&softmax_channels(&logits)?, &target),
            &[logits.clone()],
            None,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "seg max rel err {}", report.max_rel_err);

        // depth: predictions far from the target values, away from |.| kink
        let pred_data: Vec<f64> = (0..8).map(|_| rng.next_f64() * 0.3 + 1.2).collect();
        let pred = Tensor::from_vec(&[2, 1, 2, 2], pred_data, true).unwrap();
        let dtarget = DepthTarget::new(2, 2, 2, (0..8).map(|_| rng.next_f64() * 0.5).collect()).unwrap();
        let report = grad_check(
            || depth_loss(&pred, &dtarget),
            &[pred.clone()],
            None,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "depth max rel err {}", report.max_rel_err);
    }

    proptest! {
        #[test]
        fn seg_loss_nonnegative(
            logits in proptest::collection::vec(-5.0f64..5.0, 2 * 3 * 4),
            labels in proptest::collection::vec(0u8..3, 8),
        ) {
            let t = Tensor::from_vec(&[2, 3, 2, 2], logits, false).unwrap();
            let probs = softmax_channels(&t).unwrap();
            let target = SegTarget::new(2, 2, 2, labels, None).unwrap();
            let l = seg_loss(&probs, &target).unwrap().value();
            prop_assert!(l >= 0.0);
        }

        #[test]
        fn depth_loss_symmetric_and_triangle(
            a in proptest::collection::vec(0.0f64..1.0, 6),
            b in proptest::collection::vec(0.0f64..1.0, 6),
            c in proptest::collection::vec(0.0f64..1.0, 6),
        ) {
            let shape = [1usize, 1, 2, 3];
            let ta = Tensor::from_vec(&shape, a.clone(), false).unwrap();
            let tb = Tensor::from_vec(&shape, b.clone(), false).unwrap();
            let mae = |x: &Tensor, y: &Vec<f64>| {
                depth_loss(x, &DepthTarget::new(1, 2, 3, y.clone()).unwrap()).unwrap().value()
            };
            let ab = mae(&ta, &b);
            let ba = mae(&tb, &a);
            prop_assert!((ab - ba).abs() <= 1e-15);
            let ac = mae(&ta, &c);
            let bc = mae(&tb, &c);
            prop_assert!(ac <= ab + bc + 1e-12);
        }

        #[test]
        fn iou_invariant_under_relabeling(perm_seed in 0u64..1000) {
            let mut rng = Rng::new(perm_seed);
            let preds: Vec<u8> = (0..36).map(|_| rng.below(4) as u8).collect();
            let truths: Vec<u8> = (0..36).map(|_| rng.below(4) as u8).collect();

            // random permutation of the 4 classes
            let mut perm: Vec<u8> = (0..4).collect();
            for i in (1..4usize).rev() {
                let j = rng.below((i + 1) as u64) as usize;
                perm.swap(i, j);
            }

            let t1 = SegTarget::new(1, 6, 6, truths.clone(), None).unwrap();
            let m1 = iou_metrics(&confusion(&preds, &t1, 4).unwrap()).unwrap();

            let preds2: Vec<u8> = preds.iter().map(|&p| perm[p as usize]).collect();
            let truths2: Vec<u8> = truths.iter().map(|&t| perm[t as usize]).collect();
            let t2 = SegTarget::new(1, 6, 6, truths2, None).unwrap();
            let m2 = iou_metrics(&confusion(&preds2, &t2, 4).unwrap()).unwrap();

            prop_assert!((m1.mean_iou - m2.mean_iou).abs() <= 1e-15);
            for c in 0..4 {
                prop_assert_eq!(m1.per_class[c], m2.per_class[perm[c] as usize]);
            }
        }
    }
}
