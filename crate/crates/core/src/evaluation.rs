//! Multi-label AUC, Grad-CAM heatmaps, thresholded regions, IoBB and
//! localization accuracy tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::data::{resample_bilinear, BBox, Sample};
use crate::error::{invalid, Error, Result};
use crate::model::Network;
use crate::tensor::Tensor;

/// IoBB thresholds of the localization table.
pub const IOBB_THRESHOLDS: [f64; 3] = [0.1, 0.25, 0.5];
pub const DEFAULT_TAU: f64 = 0.1;

/// Probability that a random positive outscores a random negative, with
/// ties worth one half, computed from average ranks. `None` unless both
/// classes occur.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "auc: scores and labels differ in length");
    let n_pos = labels.iter().filter(|&&l| l).count() as u64;
    let n_neg = labels.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum of positives, kept integral so ties are exact.
    let mut twice_rank_sum = 0u64;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // Ranks start..end (1-based start+1..=end) share their average.
        let twice_avg = (start + 1 + end) as u64;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count() as u64;
        twice_rank_sum += twice_avg * pos_in_group;
        start = end;
    }
    let twice_u = twice_rank_sum - n_pos * (n_pos + 1);
    Some(twice_u as f64 / (2 * n_pos * n_neg) as f64)
}

/// Exhaustive pair-counting AUC; quadratic reference for [`auc`].
pub fn auc_pairwise(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut twice_wins = 0u64;
    let mut pairs = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            twice_wins += match scores[i].partial_cmp(&scores[j]) {
                Some(std::cmp::Ordering::Greater) => 2,
                Some(std::cmp::Ordering::Equal) => 1,
                _ => 0,
            };
        }
    }
    (pairs > 0).then(|| twice_wins as f64 / (2 * pairs) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassAuc {
    pub class: usize,
    pub auc: Option<f64>,
    pub n_pos: usize,
    pub n_neg: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AucReport {
    pub classes: Vec<ClassAuc>,
    /// Mean over classes with a defined AUC.
    pub macro_auc: Option<f64>,
}

impl AucReport {
    /// CSV with columns `class,auc,n_pos,n_neg`; undefined AUCs read `NA`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,auc,n_pos,n_neg\n");
        for c in &self.classes {
            let auc = c.auc.map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"));
            let _ = writeln!(out, "{},{auc},{},{}", c.class, c.n_pos, c.n_neg);
        }
        let m = self.macro_auc.map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"));
        let pos: usize = self.classes.iter().map(|c| c.n_pos).sum();
        let neg: usize = self.classes.iter().map(|c| c.n_neg).sum();
        let _ = writeln!(out, "macro,{m},{pos},{neg}");
        out
    }
}

/// Per-class AUC of `N x C` scores against `N x C` binary labels.
pub fn auc_per_class(scores: &Tensor, labels: &Tensor) -> Result<AucReport> {
    let (n, c) = match scores.dims() {
        &[n, c] if labels.dims() == scores.dims() => (n, c),
        _ => {
            return Err(Error::ShapeMismatch {
                op: "auc_per_class",
                lhs: scores.dims().to_vec(),
                rhs: labels.dims().to_vec(),
            })
        }
    };
    let classes: Vec<ClassAuc> = (0..c)
        .map(|k| {
            let s: Vec<f64> = (0..n).map(|i| scores.data()[i * c + k]).collect();
            let l: Vec<bool> = (0..n).map(|i| labels.data()[i * c + k] > 0.5).collect();
            let n_pos = l.iter().filter(|&&v| v).count();
            ClassAuc {
                class: k,
                auc: auc(&s, &l),
                n_pos,
                n_neg: n - n_pos,
            }
        })
        .collect();
    let defined: Vec<f64> = classes.iter().filter_map(|c| c.auc).collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(AucReport { classes, macro_auc })
}

/// Binary `N x C` label matrix for a sample list.
pub fn label_matrix(samples: &[Sample], n_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; samples.len() * n_classes];
    for (i, s) in samples.iter().enumerate() {
        for &l in &s.labels {
            if l >= n_classes {
                return Err(invalid(format!("label {l} out of range for {n_classes} classes")));
            }
            data[i * n_classes + l] = 1.0;
        }
    }
    Tensor::new(vec![samples.len(), n_classes], data)
}

/// Grad-CAM map at the native resolution of the tapped activations.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// `ReLU(sum_k alpha_k A_k)`.
    pub raw: Vec<f64>,
    /// `raw / max(raw)`, or all zeros when `raw` is.
    pub normalized: Vec<f64>,
    pub class: usize,
    pub tap: String,
}

/// Combines tapped activations `A` (`K x H x W`) with their gradients:
/// `alpha_k` is the spatial mean of the gradient of channel `k`.
pub fn cam_from_activations(acts: &[f64], grads: &[f64], channels: usize, h: usize, w: usize) -> (Vec<f64>, Vec<f64>) {
    let plane = h * w;
    let mut raw = vec![0.0; plane];
    for k in 0..channels {
        let g = &grads[k * plane..(k + 1) * plane];
        let alpha = g.iter().sum::<f64>() / plane as f64;
        if alpha == 0.0 {
            continue;
        }
        for (r, a) in raw.iter_mut().zip(&acts[k * plane..(k + 1) * plane]) {
            *r += alpha * a;
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let max = raw.iter().cloned().fold(0.0, f64::max);
    let normalized = if max > 0.0 {
        raw.iter().map(|v| v / max).collect()
    } else {
        vec![0.0; plane]
    };
    (raw, normalized)
}

/// Grad-CAM for every image of an `N x 1 x S x S` batch; image `n` is
/// explained for class `classes[n]`. The target is the class capsule norm.
/// Images do not interact in eval mode, so one backward pass of the summed
/// targets yields every per-image gradient.
pub fn grad_cam_batch(net: &Network, images: &Tensor, classes: &[usize], tap: &str) -> Result<Vec<Heatmap>> {
    let n_classes = net.config.n_classes;
    let n = images.nchw()?.0;
    if classes.len() != n {
        return Err(invalid(format!("{} classes given for {n} images", classes.len())));
    }
    if let Some(&c) = classes.iter().find(|&&c| c >= n_classes) {
        return Err(invalid(format!("class {c} out of range for {n_classes} classes")));
    }
    let pass = net.forward_eval(images)?;
    let tap_var = pass.tap(tap)?;
    let mut tape = pass.tape;
    let mut select = vec![0.0; n * n_classes];
    for (i, &c) in classes.iter().enumerate() {
        select[i * n_classes + c] = 1.0;
    }
    let mask = tape.constant(Tensor::new(vec![n, n_classes], select)?);
    let picked = tape.mul(pass.scores, mask)?;
    let target = tape.sum(picked);
    let grads = tape.backward(target)?;
    let acts = tape.value(tap_var);
    let g = grads.get_or_zeros(tap_var, acts);
    let (_, k, h, w) = acts.nchw()?;
    let per = k * h * w;
    Ok(classes
        .iter()
        .enumerate()
        .map(|(i, &class)| {
            let (raw, normalized) = cam_from_activations(
                &acts.data()[i * per..(i + 1) * per],
                &g[i * per..(i + 1) * per],
                k,
                h,
                w,
            );
            Heatmap {
                width: w,
                height: h,
                raw,
                normalized,
                class,
                tap: tap.to_string(),
            }
        })
        .collect())
}

pub fn grad_cam(net: &Network, image: &Tensor, class: usize, tap: &str) -> Result<Heatmap> {
    Ok(grad_cam_batch(net, image, &[class], tap)?.remove(0))
}

/// Bilinear upsampling with corner pixel centers aligned; the target must
/// be at least the source size on both axes.
pub fn upsample_bilinear(map: &[f64], width: usize, height: usize, out_w: usize, out_h: usize) -> Result<Vec<f64>> {
    if map.len() != width * height || width == 0 || height == 0 {
        return Err(invalid(format!(
            "{} values do not form a {width}x{height} map",
            map.len()
        )));
    }
    if out_w < width || out_h < height {
        return Err(invalid(format!(
            "upsampling target {out_w}x{out_h} is smaller than {width}x{height}"
        )));
    }
    Ok(resample_bilinear(map, width, height, out_w, out_h))
}

/// Thresholded region of a normalized heatmap.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    pub mask: Vec<bool>,
    /// `None` when no pixel exceeds the threshold.
    pub bbox: Option<BBox>,
}

/// Mask of pixels strictly above `tau`, boxed by the tight bounding box of
/// its largest 4-connected component (ties go to the component met first
/// in raster order), or of the whole mask when `union_box` is set.
pub fn region_from_threshold(map: &[f64], width: usize, height: usize, tau: f64, union_box: bool) -> Region {
    assert_eq!(map.len(), width * height, "region_from_threshold: map size");
    let mask: Vec<bool> = map.iter().map(|&v| v > tau).collect();
    let mut label = vec![usize::MAX; mask.len()];
    let mut best: Option<(usize, BBox)> = None;
    let mut all: Option<(usize, usize, usize, usize)> = None;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || label[start] != usize::MAX {
            continue;
        }
        label[start] = start;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (x, y) = (p % width, p / width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            let mut visit = |q: usize| {
                if mask[q] && label[q] == usize::MAX {
                    label[q] = start;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
        }
        let bbox = BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1);
        if best.is_none_or(|(s, _)| size > s) {
            best = Some((size, bbox));
        }
        all = Some(match all {
            None => (x0, y0, x1, y1),
            Some((a, b, c, d)) => (a.min(x0), b.min(y0), c.max(x1), d.max(y1)),
        });
    }
    let bbox = if union_box {
        all.map(|(x0, y0, x1, y1)| BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    } else {
        best.map(|(_, b)| b)
    };
    Region { mask, bbox }
}

/// Intersection area over detected area; 0 when nothing was detected.
pub fn iobb(detected: Option<&BBox>, gt: &BBox) -> f64 {
    match detected {
        Some(d) if d.area() > 0 => d.intersection_area(gt) as f64 / d.area() as f64,
        _ => 0.0,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationCase {
    pub class: usize,
    pub detected: Option<BBox>,
    pub gt: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassLocalization {
    pub class: usize,
    pub n_cases: usize,
    /// Fraction of cases with IoBB >= T, per threshold.
    pub accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalizationReport {
    pub thresholds: Vec<f64>,
    pub classes: Vec<ClassLocalization>,
}

impl LocalizationReport {
    /// CSV with columns `class,n_cases,T=<t>...`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,n_cases");
        for t in &self.thresholds {
            let _ = write!(out, ",T={t}");
        }
        out.push('\n');
        for c in &self.classes {
            let _ = write!(out, "{},{}", c.class, c.n_cases);
            for a in &c.accuracy {
                let _ = write!(out, ",{a:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Per class and threshold, the fraction of cases with IoBB >= T (boundary
/// inclusive). Classes without cases are left out.
pub fn localization_accuracy(cases: &[LocalizationCase], thresholds: &[f64]) -> LocalizationReport {
    let mut by_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for c in cases {
        by_class
            .entry(c.class)
            .or_default()
            .push(iobb(c.detected.as_ref(), &c.gt));
    }
    let classes = by_class
        .into_iter()
        .map(|(class, scores)| ClassLocalization {
            class,
            n_cases: scores.len(),
            accuracy: thresholds
                .iter()
                .map(|&t| scores.iter().filter(|&&s| s >= t).count() as f64 / scores.len() as f64)
                .collect(),
        })
        .collect();
    LocalizationReport {
        thresholds: thresholds.to_vec(),
        classes,
    }
}

/// Grad-CAM detections for a batch: heatmap, its upsampled normalized map
/// at input resolution and the detected box.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub heatmap: Heatmap,
    pub upsampled: Vec<f64>,
    pub region: Region,
}

pub fn detect(net: &Network, images: &Tensor, classes: &[usize], tap: &str, tau: f64) -> Result<Vec<Detection>> {
    let (_, _, h, w) = images.nchw()?;
    grad_cam_batch(net, images, classes, tap)?
        .into_iter()
        .map(|heatmap| {
            let upsampled = upsample_bilinear(&heatmap.normalized, heatmap.width, heatmap.height, w, h)?;
            let region = region_from_threshold(&upsampled, w, h, tau, false);
            Ok(Detection {
                heatmap,
                upsampled,
                region,
            })
        })
        .collect()
}

/// One case per ground-truth box. Boxes of classes the network scores
/// below 0.5 count as undetected (IoBB 0).
pub fn localization_cases(
    net: &Network,
    samples: &[Sample],
    tap: &str,
    tau: f64,
    batch: usize,
) -> Result<Vec<LocalizationCase>> {
    let mut cases = Vec::new();
    let scores = crate::training::predict(net, samples, batch)?;
    let nc = net.config.n_classes;
    let mut pending: Vec<(usize, usize, BBox)> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        for b in &s.boxes {
            if scores.data()[i * nc + b.class] >= 0.5 {
                pending.push((i, b.class, b.bbox));
            } else {
                cases.push((
                    i,
                    LocalizationCase {
                        class: b.class,
                        detected: None,
                        gt: b.bbox,
                    },
                ));
            }
        }
    }
    for chunk in pending.chunks(batch.max(1)) {
        let imgs: Vec<Tensor> = chunk
            .iter()
            .map(|&(i, _, _)| {
                let im = &samples[i].image;
                Tensor::new(vec![1, 1, im.height, im.width], im.pixels.clone())
            })
            .collect::<Result<_>>()?;
        let batch_t = Tensor::stack(&imgs)?;
        let classes: Vec<usize> = chunk.iter().map(|&(_, c, _)| c).collect();
        for (d, &(i, class, gt)) in detect(net, &batch_t, &classes, tap, tau)?.into_iter().zip(chunk) {
            cases.push((
                i,
                LocalizationCase {
                    class,
                    detected: d.region.bbox,
                    gt,
                },
            ));
        }
    }
    cases.sort_by_key(|(i, c)| (*i, c.class));
    Ok(cases.into_iter().map(|(_, c)| c).collect())
}
