//! Detection evaluation: PASCAL-style greedy matching, AP, binned AVP,
//! continuous AAVP, keypoint APP and in-box segmentation accuracy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::GroundTruthObject;
use crate::geometry::{azimuth_error, iou, normalize_azimuth, BBox, Point2};
use crate::prototypes::Mask;

/// Minimum IoU for a prediction to match a ground-truth box.
pub const IOU_THRESHOLD: f64 = 0.5;
/// Reference object height for APP.
pub const APP_REFERENCE_HEIGHT: f64 = 100.0;
/// Allowed keypoint distance at the reference height.
pub const APP_PIXEL_THRESHOLD: f64 = 25.0;
/// Slack in degrees on the AAVP error test, so that an azimuth recovered to
/// floating-point accuracy still counts at `D = 0`.
pub const AZIMUTH_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction {0} has no azimuth")]
    MissingAzimuth(usize),
    #[error("mask dimensions differ: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("box covers no pixel centers of the mask")]
    EmptyRegion,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ApMode {
    /// Area under the monotone precision envelope over all recall points.
    #[default]
    AllPoints,
    /// Mean interpolated precision at recall 0, 0.1, ..., 1.
    #[serde(rename = "11pt")]
    ElevenPoint,
}

impl std::str::FromStr for ApMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "allpoints" => Ok(Self::AllPoints),
            "11pt" => Ok(Self::ElevenPoint),
            other => Err(format!("unknown ap mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub image_id: String,
    pub class: String,
    pub bbox: BBox,
    pub score: f64,
    #[serde(default)]
    pub azimuth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointPrediction {
    pub image_id: String,
    #[serde(default)]
    pub class: Option<String>,
    pub name: String,
    pub position: Point2,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    pub average: f64,
}

/// Outcome of greedy score-ordered matching, independent of any extra
/// true-positive predicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Matching {
    /// Prediction indices in processing order (score descending, input order
    /// on ties).
    pub order: Vec<usize>,
    /// For each entry of `order`, the consumed ground-truth index.
    pub matched: Vec<Option<usize>>,
    pub num_gt: usize,
}

impl Matching {
    /// PR curve where a matched prediction counts as a true positive iff
    /// `is_tp(pred_index, gt_index)` holds.
    pub fn curve(&self, mode: ApMode, mut is_tp: impl FnMut(usize, usize) -> bool) -> PRCurve {
        let labels: Vec<bool> = self
            .order
            .iter()
            .zip(&self.matched)
            .map(|(&p, m)| m.is_some_and(|g| is_tp(p, g)))
            .collect();
        pr_curve(&labels, self.num_gt, mode)
    }
}

fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy matching: each prediction, in score order, takes the unmatched
/// eligible ground truth with the highest `quality`; `None` means
/// ineligible. Equal qualities go to the lower ground-truth index.
pub fn greedy_match(
    scores: &[f64],
    num_gt: usize,
    mut quality: impl FnMut(usize, usize) -> Option<f64>,
) -> Matching {
    let order = score_order(scores);
    let mut used = vec![false; num_gt];
    let matched = order
        .iter()
        .map(|&p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, taken) in used.iter().enumerate() {
                if *taken {
                    continue;
                }
                if let Some(q) = quality(p, g) {
                    if best.is_none_or(|(_, bq)| q > bq) {
                        best = Some((g, q));
                    }
                }
            }
            best.map(|(g, _)| {
                used[g] = true;
                g
            })
        })
        .collect();
    Matching { order, matched, num_gt }
}

/// Cumulative precision/recall over ranked TP/FP labels and its average.
pub fn pr_curve(labels: &[bool], num_gt: usize, mode: ApMode) -> PRCurve {
    let mut recall = Vec::with_capacity(labels.len());
    let mut precision = Vec::with_capacity(labels.len());
    let mut tp = 0usize;
    for (k, &is_tp) in labels.iter().enumerate() {
        tp += is_tp as usize;
        recall.push(if num_gt == 0 { 0.0 } else { tp as f64 / num_gt as f64 });
        precision.push(tp as f64 / (k + 1) as f64);
    }
    let average = if num_gt == 0 {
        0.0
    } else {
        match mode {
            ApMode::AllPoints => all_points_ap(&recall, &precision),
            ApMode::ElevenPoint => eleven_point_ap(&recall, &precision),
        }
    };
    PRCurve { recall, precision, average }
}

fn all_points_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    mrec.push(0.0);
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = Vec::with_capacity(precision.len() + 2);
    mpre.push(0.0);
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (0..mrec.len() - 1)
        .filter(|&i| mrec[i + 1] != mrec[i])
        .map(|i| (mrec[i + 1] - mrec[i]) * mpre[i + 1])
        .sum()
}

fn eleven_point_ap(recall: &[f64], precision: &[f64]) -> f64 {
    (0..=10)
        .map(|t| {
            let t = t as f64 / 10.0;
            recall
                .iter()
                .zip(precision)
                .filter(|(r, _)| **r >= t)
                .map(|(_, p)| *p)
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / 11.0
}

/// Box matching over non-difficult ground truth of the same image and class.
pub fn match_boxes(preds: &[ScoredPrediction], gts: &[GroundTruthObject]) -> (Matching, Vec<usize>) {
    let eligible: Vec<usize> = (0..gts.len()).filter(|&g| !gts[g].difficult).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let matching = greedy_match(&scores, eligible.len(), |p, g| {
        let (pred, gt) = (&preds[p], &gts[eligible[g]]);
        if pred.image_id != gt.image_id || pred.class != gt.class {
            return None;
        }
        let o = iou(&pred.bbox, &gt.bbox);
        (o >= IOU_THRESHOLD).then_some(o)
    });
    (matching, eligible)
}

/// Matching-first evaluation: a box-matched prediction consumes its ground
/// truth and is a true positive iff `is_tp` also holds.
pub fn match_and_pr(
    preds: &[ScoredPrediction],
    gts: &[GroundTruthObject],
    mode: ApMode,
    is_tp: impl Fn(&ScoredPrediction, &GroundTruthObject) -> bool,
) -> PRCurve {
    let (m, eligible) = match_boxes(preds, gts);
    m.curve(mode, |p, g| is_tp(&preds[p], &gts[eligible[g]]))
}

pub fn average_precision(preds: &[ScoredPrediction], gts: &[GroundTruthObject], mode: ApMode) -> PRCurve {
    match_and_pr(preds, gts, mode, |_, _| true)
}

/// Bin `k` covers `[k * 360/V - 180/V, k * 360/V + 180/V)`.
pub fn viewpoint_bin(azimuth: f64, bins: usize) -> usize {
    let width = 360.0 / bins as f64;
    let shifted = normalize_azimuth(azimuth + width / 2.0);
    ((shifted / width).floor() as usize).min(bins - 1)
}

fn azimuths(preds: &[ScoredPrediction]) -> Result<Vec<f64>, MetricsError> {
    preds
        .iter()
        .enumerate()
        .map(|(i, p)| p.azimuth.ok_or(MetricsError::MissingAzimuth(i)))
        .collect()
}

pub fn avp_binned(
    preds: &[ScoredPrediction],
    gts: &[GroundTruthObject],
    bins: usize,
    mode: ApMode,
) -> Result<PRCurve, MetricsError> {
    if bins == 0 {
        return Err(MetricsError::InvalidParameter("bin count must be >= 1".into()));
    }
    let az = azimuths(preds)?;
    let (m, eligible) = match_boxes(preds, gts);
    Ok(m.curve(mode, |p, g| viewpoint_bin(az[p], bins) == viewpoint_bin(gts[eligible[g]].azimuth, bins)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AavpResult {
    pub grid: Vec<f64>,
    pub avp: Vec<f64>,
    pub aavp: f64,
}

/// Integer degrees 0..=180.
pub fn default_aavp_grid() -> Vec<f64> {
    (0..=180).map(f64::from).collect()
}

/// AVP as a function of the allowed azimuth error and its mean over `grid`.
pub fn aavp(
    preds: &[ScoredPrediction],
    gts: &[GroundTruthObject],
    grid: &[f64],
    mode: ApMode,
) -> Result<AavpResult, MetricsError> {
    if grid.is_empty() || grid.iter().any(|d| !(0.0..=180.0).contains(d)) || grid.windows(2).any(|w| w[1] < w[0]) {
        return Err(MetricsError::InvalidParameter("grid must be sorted within [0, 180]".into()));
    }
    let az = azimuths(preds)?;
    let (m, eligible) = match_boxes(preds, gts);
    let errors: BTreeMap<usize, f64> = m
        .order
        .iter()
        .zip(&m.matched)
        .filter_map(|(&p, g)| g.map(|g| (p, azimuth_error(az[p], gts[eligible[g]].azimuth))))
        .collect();
    let avp: Vec<f64> = grid
        .iter()
        .map(|&d| m.curve(mode, |p, _| errors[&p] <= d + AZIMUTH_TOLERANCE).average)
        .collect();
    let aavp = avp.iter().sum::<f64>() / avp.len() as f64;
    Ok(AavpResult { grid: grid.to_vec(), avp, aavp })
}

struct GtKeypoint<'a> {
    image_id: &'a str,
    class: &'a str,
    name: &'a str,
    position: Point2,
    radius: f64,
}

/// Average pixel precision per keypoint name. A prediction matches the
/// nearest unmatched visible ground-truth keypoint of the same name and
/// image within `pixel_threshold * object_height / reference_height`.
pub fn app(
    preds: &[KeypointPrediction],
    gts: &[GroundTruthObject],
    reference_height: f64,
    pixel_threshold: f64,
    mode: ApMode,
) -> Result<BTreeMap<String, PRCurve>, MetricsError> {
    if !(reference_height > 0.0 && pixel_threshold > 0.0) {
        return Err(MetricsError::InvalidParameter("H and P must be > 0".into()));
    }
    let all: Vec<GtKeypoint> = gts
        .iter()
        .filter(|g| !g.difficult)
        .flat_map(|g| {
            let radius = pixel_threshold * g.bbox.height() / reference_height;
            g.keypoints.iter().filter(|(_, k)| k.visible).map(move |(name, k)| GtKeypoint {
                image_id: &g.image_id,
                class: &g.class,
                name,
                position: Point2::new(k.x, k.y),
                radius,
            })
        })
        .collect();
    let mut names: Vec<&str> = all.iter().map(|k| k.name).chain(preds.iter().map(|p| p.name.as_str())).collect();
    names.sort_unstable();
    names.dedup();

    let mut out = BTreeMap::new();
    for name in names {
        let kp_gts: Vec<&GtKeypoint> = all.iter().filter(|k| k.name == name).collect();
        let kp_preds: Vec<&KeypointPrediction> = preds.iter().filter(|p| p.name == name).collect();
        let scores: Vec<f64> = kp_preds.iter().map(|p| p.score).collect();
        let m = greedy_match(&scores, kp_gts.len(), |p, g| {
            let (pred, gt) = (kp_preds[p], kp_gts[g]);
            if pred.image_id != gt.image_id || pred.class.as_deref().is_some_and(|c| c != gt.class) {
                return None;
            }
            let d = pred.position.distance(&gt.position);
            (d <= gt.radius).then_some(-d)
        });
        out.insert(name.to_string(), m.curve(mode, |_, _| true));
    }
    Ok(out)
}

/// Mean of the per-keypoint averages.
pub fn mean_app(curves: &BTreeMap<String, PRCurve>) -> f64 {
    if curves.is_empty() {
        return 0.0;
    }
    curves.values().map(|c| c.average).sum::<f64>() / curves.len() as f64
}

/// Pixel index range whose centers fall inside `bbox`, clipped to the mask.
pub fn box_pixel_range(bbox: &BBox, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
    let x0 = (bbox.xmin() - 0.5).ceil().max(0.0);
    let y0 = (bbox.ymin() - 0.5).ceil().max(0.0);
    let x1 = (bbox.xmax() - 0.5).floor().min(width as f64 - 1.0);
    let y1 = (bbox.ymax() - 0.5).floor().min(height as f64 - 1.0);
    if x1 < x0 || y1 < y0 {
        return None;
    }
    Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
}

/// Fraction of pixels inside `bbox` where the two masks agree.
pub fn seg_accuracy(pred: &Mask, gt: &Mask, bbox: &BBox) -> Result<f64, MetricsError> {
    let (pd, gd) = ((pred.width(), pred.height()), (gt.width(), gt.height()));
    if pd != gd {
        return Err(MetricsError::DimensionMismatch(pd, gd));
    }
    let (x0, y0, x1, y1) = box_pixel_range(bbox, gt.width(), gt.height()).ok_or(MetricsError::EmptyRegion)?;
    let mut agree = 0usize;
    for y in y0..=y1 {
        for x in x0..=x1 {
            agree += (pred.get(x, y) == gt.get(x, y)) as usize;
        }
    }
    Ok(agree as f64 / ((x1 - x0 + 1) * (y1 - y0 + 1)) as f64)
}

/// Per-class mean of per-instance scores, plus the mean over classes.
pub fn class_means(scores: &[(String, f64)]) -> (BTreeMap<String, f64>, f64) {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (class, v) in scores {
        let e = acc.entry(class.clone()).or_default();
        e.0 += v;
        e.1 += 1;
    }
    let means: BTreeMap<String, f64> = acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
    let overall = if means.is_empty() { 0.0 } else { means.values().sum::<f64>() / means.len() as f64 };
    (means, overall)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::KeypointAnnotation;

    fn gt(image: &str, b: [f64; 4], az: f64) -> GroundTruthObject {
        GroundTruthObject::new(image, "car", BBox::try_from(b).unwrap(), az)
    }

    fn pred(image: &str, b: [f64; 4], score: f64, az: Option<f64>) -> ScoredPrediction {
        ScoredPrediction { image_id: image.into(), class: "car".into(), bbox: BBox::try_from(b).unwrap(), score, azimuth: az }
    }

    const B: [f64; 4] = [0.0, 0.0, 10.0, 10.0];

    #[test]
    fn perfect_detection() {
        let c = average_precision(&[pred("i", [0.0, 0.0, 10.0, 9.0], 0.7, None)], &[gt("i", B, 0.0)], ApMode::AllPoints);
        assert_eq!(c.average, 1.0);
    }

    #[test]
    fn below_iou_threshold() {
        // IoU = 40/100 = 0.4
        let c = average_precision(&[pred("i", [0.0, 0.0, 4.0, 10.0], 0.7, None)], &[gt("i", B, 0.0)], ApMode::AllPoints);
        assert_eq!(c.average, 0.0);
    }

    #[test]
    fn duplicate_is_false_positive() {
        let preds = [pred("i", B, 0.9, None), pred("i", B, 0.8, None)];
        let c = average_precision(&preds, &[gt("i", B, 0.0)], ApMode::AllPoints);
        assert_eq!(c.precision, [1.0, 0.5]);
        assert_eq!(c.recall, [1.0, 1.0]);
        assert_eq!(c.average, 1.0);
    }

    #[test]
    fn equal_scores_tie_break_by_input_order() {
        let preds = [pred("i", B, 0.5, Some(90.0)), pred("i", B, 0.5, Some(0.0))];
        let c = avp_binned(&preds, &[gt("i", B, 0.0)], 4, ApMode::AllPoints).unwrap();
        // first prediction consumes the ground truth with the wrong bin
        assert_eq!(c.average, 0.0);
        let rev = [preds[1].clone(), preds[0].clone()];
        assert_eq!(avp_binned(&rev, &[gt("i", B, 0.0)], 4, ApMode::AllPoints).unwrap().average, 1.0);
    }

    #[test]
    fn other_image_or_class_never_matches() {
        let mut p = pred("j", B, 0.9, None);
        assert_eq!(average_precision(&[p.clone()], &[gt("i", B, 0.0)], ApMode::AllPoints).average, 0.0);
        p.image_id = "i".into();
        p.class = "bus".into();
        assert_eq!(average_precision(&[p], &[gt("i", B, 0.0)], ApMode::AllPoints).average, 0.0);
    }

    #[test]
    fn difficult_ground_truth_ignored() {
        let mut g = gt("i", B, 0.0);
        g.difficult = true;
        let c = average_precision(&[pred("i", B, 0.9, None)], &[g, gt("i", [50.0, 50.0, 60.0, 60.0], 0.0)], ApMode::AllPoints);
        // the prediction cannot use the difficult box; one real GT unmatched
        assert_eq!(c.recall, [0.0]);
        assert_eq!(c.average, 0.0);
    }

    #[test]
    fn eleven_point_mode() {
        let preds = [pred("i", B, 0.9, None), pred("i", [100.0, 0.0, 110.0, 10.0], 0.8, None)];
        let gts = [gt("i", B, 0.0), gt("i", [50.0, 0.0, 60.0, 10.0], 0.0)];
        let c = average_precision(&preds, &gts, ApMode::ElevenPoint);
        // recall 0.5 at precision 1: thresholds 0..=0.5 -> 6 of 11
        assert!((c.average - 6.0 / 11.0).abs() < 1e-15);
        assert!((average_precision(&preds, &gts, ApMode::AllPoints).average - 0.5).abs() < 1e-15);
    }

    #[test]
    fn viewpoint_bins() {
        assert_eq!(viewpoint_bin(0.0, 4), 0);
        assert_eq!(viewpoint_bin(10.0, 4), 0);
        assert_eq!(viewpoint_bin(-45.0, 4), 0);
        assert_eq!(viewpoint_bin(44.999, 4), 0);
        assert_eq!(viewpoint_bin(45.0, 4), 1);
        assert_eq!(viewpoint_bin(90.0, 4), 1);
        assert_eq!(viewpoint_bin(359.0, 24), 0);
        assert_eq!(viewpoint_bin(344.0, 24), 23);
    }

    #[test]
    fn avp_examples() {
        let g = [gt("i", B, 0.0)];
        let tp = avp_binned(&[pred("i", B, 0.9, Some(10.0))], &g, 4, ApMode::AllPoints).unwrap();
        assert_eq!(tp.average, 1.0);
        let fp = avp_binned(&[pred("i", B, 0.9, Some(90.0))], &g, 4, ApMode::AllPoints).unwrap();
        assert_eq!(fp.average, 0.0);
        assert_eq!(
            avp_binned(&[pred("i", B, 0.9, None)], &g, 4, ApMode::AllPoints),
            Err(MetricsError::MissingAzimuth(0))
        );
    }

    #[test]
    fn aavp_single_error() {
        let r = aavp(&[pred("i", B, 0.9, Some(30.0))], &[gt("i", B, 0.0)], &default_aavp_grid(), ApMode::AllPoints).unwrap();
        assert!(r.avp[..30].iter().all(|&v| v == 0.0));
        assert!(r.avp[30..].iter().all(|&v| v == 1.0));
        assert!((r.aavp - 151.0 / 181.0).abs() < 1e-15);
        assert!(aavp(&[], &[], &[190.0], ApMode::AllPoints).is_err());
    }

    #[test]
    fn app_radius_scales_with_height() {
        let mut g = gt("i", [0.0, 0.0, 50.0, 200.0], 0.0);
        g.keypoints.insert("hub".into(), KeypointAnnotation { x: 20.0, y: 20.0, visible: true });
        let kp = |dx: f64| KeypointPrediction {
            image_id: "i".into(),
            class: None,
            name: "hub".into(),
            position: Point2::new(20.0 + dx, 20.0),
            score: 1.0,
        };
        let at = |dx| app(&[kp(dx)], std::slice::from_ref(&g), 100.0, 25.0, ApMode::AllPoints).unwrap()["hub"].average;
        assert_eq!(at(0.0), 1.0);
        assert_eq!(at(50.0), 1.0);
        assert_eq!(at(51.0), 0.0);
    }

    #[test]
    fn app_ignores_invisible_and_respects_class() {
        let mut g = gt("i", B, 0.0);
        g.keypoints.insert("a".into(), KeypointAnnotation { x: 1.0, y: 1.0, visible: false });
        g.keypoints.insert("b".into(), KeypointAnnotation { x: 1.0, y: 1.0, visible: true });
        let p = KeypointPrediction { image_id: "i".into(), class: Some("bus".into()), name: "b".into(), position: Point2::new(1.0, 1.0), score: 1.0 };
        let r = app(&[p], &[g], 100.0, 25.0, ApMode::AllPoints).unwrap();
        assert!(!r.contains_key("a"));
        assert_eq!(r["b"].average, 0.0);
    }

    #[test]
    fn seg_accuracy_examples() {
        let bbox = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let mut gtm = Mask::new(20, 20);
        for y in 0..10 {
            for x in 0..5 {
                gtm.set(x, y, true);
            }
        }
        assert_eq!(seg_accuracy(&gtm, &gtm, &bbox).unwrap(), 1.0);
        assert_eq!(seg_accuracy(&Mask::new(20, 20), &gtm, &bbox).unwrap(), 0.5);
        assert!(matches!(seg_accuracy(&Mask::new(5, 5), &gtm, &bbox), Err(MetricsError::DimensionMismatch(..))));
        let outside = BBox::new(30.0, 30.0, 40.0, 40.0).unwrap();
        assert_eq!(seg_accuracy(&gtm, &gtm, &outside), Err(MetricsError::EmptyRegion));
    }

    #[test]
    fn class_mean_aggregation() {
        let (m, all) = class_means(&[("a".into(), 1.0), ("a".into(), 0.5), ("b".into(), 0.0)]);
        assert_eq!(m["a"], 0.75);
        assert_eq!(all, 0.375);
    }
}
