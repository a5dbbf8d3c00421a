//! Anchor geometry: training targets, decoding, duplicate suppression.

use std::cmp::Ordering;

use super::net::OUTPUT_STRIDE;

pub const DEFAULT_ANCHORS_MM: [f64; 3] = [5.0, 10.0, 20.0];
pub const POSITIVE_IOU: f64 = 0.5;
pub const NEGATIVE_IOU: f64 = 0.02;

/// Centre of output cell `idx` in input voxel coordinates.
pub fn cell_center(idx: usize) -> f64 {
    (idx * OUTPUT_STRIDE) as f64 + (OUTPUT_STRIDE as f64 - 1.0) / 2.0
}

/// IoU of two axis-aligned cubes given by centre and side.
pub fn cube_iou(c1: [f64; 3], s1: f64, c2: [f64; 3], s2: f64) -> f64 {
    let mut inter = 1.0;
    for a in 0..3 {
        let lo = (c1[a] - s1 / 2.0).max(c2[a] - s2 / 2.0);
        let hi = (c1[a] + s1 / 2.0).min(c2[a] + s2 / 2.0);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    inter / (s1.powi(3) + s2.powi(3) - inter)
}

/// Ground-truth object inside a crop, in crop voxel coordinates `(x, y, z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub center: [f64; 3],
    pub diameter: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Positive { target: usize },
    Negative,
    Ignore,
}

/// Per-anchor labels for a `g³` output grid, indexed `(anchor * g + z) * g² + y * g + x`.
///
/// An anchor is positive when its IoU with a target exceeds
/// [`POSITIVE_IOU`], negative when every IoU is below [`NEGATIVE_IOU`].
/// The best-overlapping anchor of each target is positive as well, so small
/// or off-grid objects are never left without one.
pub fn assign_labels(g: usize, anchors_vox: &[f64], targets: &[Target]) -> Vec<AnchorLabel> {
    let n = anchors_vox.len() * g * g * g;
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut best_iou = vec![0.0f64; n];
    let mut best_per_target = vec![(0.0f64, usize::MAX); targets.len()];
    for (t, tg) in targets.iter().enumerate() {
        // Only cells whose anchors can overlap the target need checking.
        let reach = tg.diameter / 2.0 + anchors_vox.iter().cloned().fold(0.0, f64::max) / 2.0;
        let range = |a: usize| {
            let lo = ((tg.center[a] - reach - (OUTPUT_STRIDE as f64 - 1.0) / 2.0) / OUTPUT_STRIDE as f64).floor().max(0.0) as usize;
            let hi = (((tg.center[a] + reach) / OUTPUT_STRIDE as f64).ceil() as usize + 1).min(g);
            lo..hi
        };
        for (k, &anchor) in anchors_vox.iter().enumerate() {
            for z in range(2) {
                for y in range(1) {
                    for x in range(0) {
                        let iou = cube_iou([cell_center(x), cell_center(y), cell_center(z)], anchor, tg.center, tg.diameter);
                        if iou <= 0.0 {
                            continue;
                        }
                        let i = ((k * g + z) * g + y) * g + x;
                        if iou > best_per_target[t].0 {
                            best_per_target[t] = (iou, i);
                        }
                        if iou > best_iou[i] {
                            best_iou[i] = iou;
                            if iou > POSITIVE_IOU {
                                labels[i] = AnchorLabel::Positive { target: t };
                            }
                        }
                        if iou >= NEGATIVE_IOU && labels[i] == AnchorLabel::Negative {
                            labels[i] = AnchorLabel::Ignore;
                        }
                    }
                }
            }
        }
    }
    for (t, &(iou, i)) in best_per_target.iter().enumerate() {
        if iou > 0.0 && !matches!(labels[i], AnchorLabel::Positive { .. }) {
            labels[i] = AnchorLabel::Positive { target: t };
        }
    }
    labels
}

/// Regression target `(dx, dy, dz, dd)` of an anchor at `cell` for `t`.
pub fn encode(cell: [f64; 3], anchor: f64, t: &Target) -> [f64; 4] {
    [(t.center[0] - cell[0]) / anchor, (t.center[1] - cell[1]) / anchor, (t.center[2] - cell[2]) / anchor, (t.diameter / anchor).ln()]
}

/// Inverse of [`encode`]: centre and diameter in the same units as `cell`.
pub fn decode(cell: [f64; 3], anchor: f64, r: [f64; 4]) -> ([f64; 3], f64) {
    ([cell[0] + r[0] * anchor, cell[1] + r[1] * anchor, cell[2] + r[2] * anchor], anchor * r[3].exp())
}

/// Indices of the `quota` largest losses, largest first; equal losses keep
/// index order.
pub fn hard_negatives(losses: &[f64], quota: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..losses.len()).collect();
    idx.sort_by(|&a, &b| losses[b].partial_cmp(&losses[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(quota);
    idx
}

/// Step schedule `base * factor^floor(epoch / every)`.
pub fn step_lr(base: f64, factor: f64, every: usize, epoch: usize) -> f64 {
    base * factor.powi((epoch / every.max(1)) as i32)
}

/// Smooth L1 with unit transition point and its derivative.
pub fn smooth_l1(x: f64) -> (f64, f64) {
    if x.abs() < 1.0 {
        (0.5 * x * x, x)
    } else {
        (x.abs() - 0.5, x.signum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_negative_selection_is_top_k() {
        assert_eq!(hard_negatives(&[5.0, 1.0, 3.0, 2.0], 2), vec![0, 2]);
        assert_eq!(hard_negatives(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
        assert_eq!(hard_negatives(&[1.0], 5), vec![0]);
    }

    #[test]
    fn schedule_applies_whole_decay_steps() {
        assert_eq!(step_lr(0.1, 0.001, 100, 0), 0.1);
        assert_eq!(step_lr(0.1, 0.001, 100, 99), 0.1);
        let lr = step_lr(0.1, 0.001, 100, 250);
        assert!((lr - 1e-7).abs() < 1e-20, "{lr}");
    }

    #[test]
    fn iou_of_cubes() {
        assert_eq!(cube_iou([0.0; 3], 2.0, [0.0; 3], 2.0), 1.0);
        // Half overlap on one axis: 4 / (8 + 8 - 4).
        assert!((cube_iou([0.0; 3], 2.0, [1.0, 0.0, 0.0], 2.0) - 4.0 / 12.0).abs() < 1e-12);
        assert_eq!(cube_iou([0.0; 3], 2.0, [5.0, 0.0, 0.0], 2.0), 0.0);
        // Nested cubes: (1/2)³.
        assert!((cube_iou([0.0; 3], 2.0, [0.0; 3], 1.0) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_round_trip() {
        let t = Target { center: [10.3, 7.9, 22.0], diameter: 8.5 };
        let cell = [9.5, 9.5, 21.5];
        let (c, d) = decode(cell, 10.0, encode(cell, 10.0, &t));
        for a in 0..3 {
            assert!((c[a] - t.center[a]).abs() < 1e-12);
        }
        assert!((d - t.diameter).abs() < 1e-12);
    }

    #[test]
    fn every_target_gets_a_positive_and_far_anchors_are_negative() {
        let g = 16;
        let anchors = [5.0, 10.0, 20.0];
        let targets = [Target { center: [20.2, 33.0, 40.7], diameter: 6.0 }, Target { center: [50.0, 10.0, 12.0], diameter: 14.0 }];
        let labels = assign_labels(g, &anchors, &targets);
        for t in 0..2 {
            assert!(labels.iter().any(|l| *l == AnchorLabel::Positive { target: t }));
        }
        // Brute force check of the thresholds away from forced positives.
        for (i, l) in labels.iter().enumerate() {
            let (k, rest) = (i / (g * g * g), i % (g * g * g));
            let (z, y, x) = (rest / (g * g), (rest / g) % g, rest % g);
            let cell = [cell_center(x), cell_center(y), cell_center(z)];
            let max_iou = targets.iter().map(|t| cube_iou(cell, anchors[k], t.center, t.diameter)).fold(0.0, f64::max);
            match l {
                AnchorLabel::Negative => assert!(max_iou < NEGATIVE_IOU),
                AnchorLabel::Ignore => assert!((NEGATIVE_IOU..=POSITIVE_IOU).contains(&max_iou)),
                AnchorLabel::Positive { .. } => assert!(max_iou > 0.0),
            }
        }
    }
}
