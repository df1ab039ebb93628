//! Compound AP / mAP evaluation for hand and hand-object pair detections.
//!
//! All six metrics share one protocol: predictions are ranked by confidence
//! (descending, with a content-based tie-break so input order never
//! matters), each prediction greedily claims the still-unmatched ground
//! truth with the highest IoU at or above the threshold, and a claimed match
//! counts as a true positive only when the metric's extra requirements hold.
//! A claim consumes the ground truth either way, so a second detection of
//! the same instance is a false positive.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::annotations::{BBox, ContactState, Dataset, GloveStatus, HandSide, ImageRecord};
use crate::error::{Error, Result};
use crate::matching::QuadrupleRecord;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApIntegration {
    /// Area under the monotone precision envelope at every recall step.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, ..., 1.
    ElevenPoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub ap_integration: ApIntegration,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            iou_threshold: 0.5,
            ap_integration: ApIntegration::AllPoint,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::config("iou_threshold", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Hand attributes a compound metric additionally requires to be correct.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AttrSet {
    pub side: bool,
    pub state: bool,
    pub glove: bool,
}

impl AttrSet {
    pub const NONE: AttrSet = AttrSet { side: false, state: false, glove: false };
    pub const SIDE: AttrSet = AttrSet { side: true, state: false, glove: false };
    pub const STATE: AttrSet = AttrSet { side: false, state: true, glove: false };
    pub const GLOVE: AttrSet = AttrSet { side: false, state: false, glove: true };
    pub const ALL: AttrSet = AttrSet { side: true, state: true, glove: true };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandPrediction {
    pub id: u64,
    pub bbox: BBox,
    pub confidence: f64,
    pub side: HandSide,
    pub contact: ContactState,
    pub glove: GloveStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPrediction {
    pub id: u64,
    pub bbox: BBox,
    pub confidence: f64,
    pub category_id: u32,
}

/// Model output for one image: detections plus the matched EHOIs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePredictions {
    pub image_id: String,
    pub hands: Vec<HandPrediction>,
    pub objects: Vec<ObjectPrediction>,
    pub ehois: Vec<QuadrupleRecord>,
}

/// Run-output file: `{"images":[ImagePredictions...]}`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub images: Vec<ImagePredictions>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category_id: u32,
    pub name: String,
    pub n_gt_pairs: usize,
    pub ap_hand_obj: f64,
    pub ap_hand_all: f64,
}

/// The six metrics, in the column order of the usual results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap_hand: f64,
    pub ap_hand_side: f64,
    pub ap_hand_glove: f64,
    pub ap_hand_state: f64,
    pub map_hand_obj: f64,
    pub map_hand_all: f64,
    pub per_category: Vec<CategoryAp>,
    pub n_gt_hands: usize,
    pub n_pred_hands: usize,
    pub n_gt_pairs: usize,
    pub n_pred_pairs: usize,
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:>9} {:>13} {:>14} {:>14} {:>13} {:>13}",
            "AP Hand", "AP Hand+Side", "AP Hand+Glove", "AP Hand+State", "mAP Hand+Obj", "mAP Hand+All"
        )?;
        writeln!(
            f,
            "{:>9.2} {:>13.2} {:>14.2} {:>14.2} {:>13.2} {:>13.2}",
            self.ap_hand, self.ap_hand_side, self.ap_hand_glove, self.ap_hand_state, self.map_hand_obj, self.map_hand_all
        )?;
        if !self.per_category.is_empty() {
            writeln!(f)?;
            writeln!(f, "{:<20} {:>8} {:>13} {:>13}", "category", "#pairs", "AP Hand+Obj", "AP Hand+All")?;
            for c in &self.per_category {
                writeln!(f, "{:<20} {:>8} {:>13.2} {:>13.2}", c.name, c.n_gt_pairs, c.ap_hand_obj, c.ap_hand_all)?;
            }
        }
        Ok(())
    }
}

/// Total order used to rank detections: confidence descending, then image,
/// then box and attribute content.
fn rank_order(a: (f64, &str, &BBox, u8), b: (f64, &str, &BBox, u8)) -> Ordering {
    b.0.total_cmp(&a.0)
        .then_with(|| a.1.cmp(b.1))
        .then_with(|| {
            a.2.as_array()
                .iter()
                .zip(b.2.as_array().iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.3.cmp(&b.3))
}

/// Area under the precision/recall curve of a ranked TP/FP sequence.
pub fn average_precision(tp_flags: &[bool], n_gt: usize, integration: ApIntegration) -> f64 {
    if n_gt == 0 {
        return if tp_flags.is_empty() { 100.0 } else { 0.0 };
    }
    if tp_flags.is_empty() {
        return 0.0;
    }
    let (precision, recall) = pr_points(tp_flags, n_gt);
    // Monotone envelope from the right.
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let ap = match integration {
        ApIntegration::AllPoint => {
            let mut prev_recall = 0.0;
            let mut area = 0.0;
            for (i, &tp) in tp_flags.iter().enumerate() {
                if tp {
                    area += (recall[i] - prev_recall) * envelope[i];
                    prev_recall = recall[i];
                }
            }
            area
        }
        ApIntegration::ElevenPoint => {
            let mut sum = 0.0;
            for t in 0..=10 {
                let r = t as f64 / 10.0;
                if let Some(i) = recall.iter().position(|&x| x >= r) {
                    sum += envelope[i];
                }
            }
            sum / 11.0
        }
    };
    100.0 * ap
}

/// Precision and recall after each ranked prediction.
pub fn pr_points(tp_flags: &[bool], n_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    for (k, &flag) in tp_flags.iter().enumerate() {
        tp += flag as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
    }
    (precision, recall)
}

struct GtIndex<'a> {
    by_id: HashMap<&'a str, usize>,
}

impl<'a> GtIndex<'a> {
    fn new(gt: &'a Dataset) -> Self {
        GtIndex {
            by_id: gt.images.iter().enumerate().map(|(i, r)| (r.image_id.as_str(), i)).collect(),
        }
    }
}

fn attrs_code(side: HandSide, contact: ContactState, glove: GloveStatus) -> u8 {
    (side.index() as u8) << 2 | (contact.index() as u8) << 1 | glove.index() as u8
}

/// TP/FP flags for hand detections ranked by confidence.
pub fn hand_tp_flags(predictions: &[ImagePredictions], gt: &Dataset, required: AttrSet, iou_threshold: f64) -> (Vec<bool>, usize) {
    let index = GtIndex::new(gt);
    let mut ranked: Vec<(&ImagePredictions, &HandPrediction)> = predictions
        .iter()
        .flat_map(|img| img.hands.iter().map(move |h| (img, h)))
        .collect();
    ranked.sort_by(|a, b| {
        rank_order(
            (a.1.confidence, &a.0.image_id, &a.1.bbox, attrs_code(a.1.side, a.1.contact, a.1.glove)),
            (b.1.confidence, &b.0.image_id, &b.1.bbox, attrs_code(b.1.side, b.1.contact, b.1.glove)),
        )
    });
    let mut matched: Vec<Vec<bool>> = gt.images.iter().map(|r| vec![false; r.hands.len()]).collect();
    let mut flags = Vec::with_capacity(ranked.len());
    for (img, pred) in ranked {
        let Some(&gi) = index.by_id.get(img.image_id.as_str()) else {
            flags.push(false);
            continue;
        };
        let record = &gt.images[gi];
        let best = best_unmatched(record.hands.iter().map(|h| &h.bbox), &matched[gi], &pred.bbox, iou_threshold);
        match best {
            Some(j) => {
                matched[gi][j] = true;
                let g = &record.hands[j];
                let ok = (!required.side || g.side == pred.side)
                    && (!required.state || g.contact == pred.contact)
                    && (!required.glove || g.glove == pred.glove);
                flags.push(ok);
            }
            None => flags.push(false),
        }
    }
    (flags, gt.n_hands())
}

/// Highest-IoU unmatched candidate at or above the threshold; ties go to the
/// lower index.
fn best_unmatched<'b>(candidates: impl Iterator<Item = &'b BBox>, matched: &[bool], query: &BBox, thr: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, b) in candidates.enumerate() {
        if matched[j] {
            continue;
        }
        let o = iou(query, b);
        if o >= thr && best.map_or(true, |(_, bo)| o > bo) {
            best = Some((j, o));
        }
    }
    best.map(|(j, _)| j)
}

/// AP (percent) for hand detection with extra attribute requirements.
pub fn compound_ap(predictions: &[ImagePredictions], gt: &Dataset, required: AttrSet, config: &EvalConfig) -> f64 {
    let (flags, n_gt) = hand_tp_flags(predictions, gt, required, config.iou_threshold);
    average_precision(&flags, n_gt, config.ap_integration)
}

#[derive(Clone, Debug)]
struct PredPair<'a> {
    image_id: &'a str,
    confidence: f64,
    hand_bbox: BBox,
    side: HandSide,
    contact: ContactState,
    glove: GloveStatus,
    object_bbox: BBox,
    category_id: u32,
}

struct GtPair {
    hand_bbox: BBox,
    side: HandSide,
    contact: ContactState,
    glove: GloveStatus,
    object_bbox: BBox,
    category_id: u32,
}

fn gt_pairs(record: &ImageRecord) -> Vec<GtPair> {
    record
        .hands
        .iter()
        .filter(|h| h.contact.is_contact())
        .filter_map(|h| {
            let obj = record.object(h.active_object_id?)?;
            Some(GtPair {
                hand_bbox: h.bbox,
                side: h.side,
                contact: h.contact,
                glove: h.glove,
                object_bbox: obj.bbox,
                category_id: obj.category_id,
            })
        })
        .collect()
}

fn pred_pairs(img: &ImagePredictions) -> Vec<PredPair<'_>> {
    img.ehois
        .iter()
        .filter(|q| q.contact.is_contact())
        .filter_map(|q| {
            let hand = img.hands.iter().find(|h| h.id == q.hand_id)?;
            let obj = img.objects.iter().find(|o| Some(o.id) == q.object_id)?;
            Some(PredPair {
                image_id: &img.image_id,
                confidence: hand.confidence,
                hand_bbox: hand.bbox,
                side: hand.side,
                contact: q.contact,
                glove: q.glove,
                object_bbox: obj.bbox,
                category_id: obj.category_id,
            })
        })
        .collect()
}

/// Per-category pair APs (percent) for categories with ground-truth pairs.
fn pair_aps(predictions: &[ImagePredictions], gt: &Dataset, require_all: bool, config: &EvalConfig) -> BTreeMap<u32, (usize, f64)> {
    let index = GtIndex::new(gt);
    let gts: Vec<Vec<GtPair>> = gt.images.iter().map(gt_pairs).collect();
    let preds: Vec<PredPair> = predictions.iter().flat_map(pred_pairs).collect();
    let categories: BTreeSet<u32> = gts.iter().flatten().map(|p| p.category_id).collect();
    let thr = config.iou_threshold;

    let mut out = BTreeMap::new();
    for &cat in &categories {
        let mut ranked: Vec<&PredPair> = preds.iter().filter(|p| p.category_id == cat).collect();
        ranked.sort_by(|a, b| {
            rank_order(
                (a.confidence, a.image_id, &a.hand_bbox, attrs_code(a.side, a.contact, a.glove)),
                (b.confidence, b.image_id, &b.hand_bbox, attrs_code(b.side, b.contact, b.glove)),
            )
            .then_with(|| {
                a.object_bbox
                    .as_array()
                    .iter()
                    .zip(b.object_bbox.as_array().iter())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(Ordering::Equal)
            })
        });
        let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut flags = Vec::with_capacity(ranked.len());
        for p in ranked {
            let Some(&gi) = index.by_id.get(p.image_id) else {
                flags.push(false);
                continue;
            };
            // Candidates outside this category are marked as unavailable.
            let avail: Vec<bool> = gts[gi]
                .iter()
                .zip(&matched[gi])
                .map(|(g, &m)| m || g.category_id != cat)
                .collect();
            match best_unmatched(gts[gi].iter().map(|g| &g.hand_bbox), &avail, &p.hand_bbox, thr) {
                Some(j) => {
                    matched[gi][j] = true;
                    let g = &gts[gi][j];
                    let mut ok = iou(&p.object_bbox, &g.object_bbox) >= thr;
                    if require_all {
                        ok &= g.side == p.side && g.contact == p.contact && g.glove == p.glove;
                    }
                    flags.push(ok);
                }
                None => flags.push(false),
            }
        }
        let n_gt = gts.iter().flatten().filter(|g| g.category_id == cat).count();
        out.insert(cat, (n_gt, average_precision(&flags, n_gt, config.ap_integration)));
    }
    out
}

fn mean_or_vacuous(aps: &BTreeMap<u32, (usize, f64)>, predictions: &[ImagePredictions]) -> f64 {
    if aps.is_empty() {
        let any_pred = predictions.iter().any(|p| !pred_pairs(p).is_empty());
        return if any_pred { 0.0 } else { 100.0 };
    }
    aps.values().map(|v| v.1).sum::<f64>() / aps.len() as f64
}

/// mAP over object categories for correctly localized hand/active-object
/// pairs with the right object category.
pub fn map_hand_obj(predictions: &[ImagePredictions], gt: &Dataset, config: &EvalConfig) -> f64 {
    mean_or_vacuous(&pair_aps(predictions, gt, false, config), predictions)
}

/// As [`map_hand_obj`], also requiring side, state and glove to be right.
pub fn map_hand_all(predictions: &[ImagePredictions], gt: &Dataset, config: &EvalConfig) -> f64 {
    mean_or_vacuous(&pair_aps(predictions, gt, true, config), predictions)
}

/// Full protocol over one split. Image ids of the run and the ground truth
/// must coincide.
pub fn evaluate(run: &RunOutput, gt: &Dataset, config: &EvalConfig) -> Result<MetricsReport> {
    config.validate()?;
    let run_ids: BTreeSet<&str> = run.images.iter().map(|i| i.image_id.as_str()).collect();
    let gt_ids: BTreeSet<&str> = gt.images.iter().map(|i| i.image_id.as_str()).collect();
    if run_ids.len() != run.images.len() {
        return Err(Error::SplitMismatch("duplicate image ids in the run output".into()));
    }
    if run_ids != gt_ids {
        let missing = gt_ids.difference(&run_ids).count();
        let extra = run_ids.difference(&gt_ids).count();
        return Err(Error::SplitMismatch(format!(
            "{missing} ground-truth images without predictions, {extra} predicted images not in the ground truth"
        )));
    }
    let preds = &run.images;
    let obj = pair_aps(preds, gt, false, config);
    let all = pair_aps(preds, gt, true, config);
    let names: HashMap<u32, &str> = gt.categories.iter().map(|c| (c.id, c.name.as_str())).collect();
    let per_category = obj
        .iter()
        .map(|(&cat, &(n, ap))| CategoryAp {
            category_id: cat,
            name: names.get(&cat).map(|s| s.to_string()).unwrap_or_else(|| cat.to_string()),
            n_gt_pairs: n,
            ap_hand_obj: ap,
            ap_hand_all: all[&cat].1,
        })
        .collect();
    Ok(MetricsReport {
        ap_hand: compound_ap(preds, gt, AttrSet::NONE, config),
        ap_hand_side: compound_ap(preds, gt, AttrSet::SIDE, config),
        ap_hand_glove: compound_ap(preds, gt, AttrSet::GLOVE, config),
        ap_hand_state: compound_ap(preds, gt, AttrSet::STATE, config),
        map_hand_obj: mean_or_vacuous(&obj, preds),
        map_hand_all: mean_or_vacuous(&all, preds),
        per_category,
        n_gt_hands: gt.n_hands(),
        n_pred_hands: preds.iter().map(|p| p.hands.len()).sum(),
        n_gt_pairs: gt.images.iter().map(|r| gt_pairs(r).len()).sum(),
        n_pred_pairs: preds.iter().map(|p| pred_pairs(p).len()).sum(),
    })
}

/// Precision/recall samples of the hand-detection curve, for plotting.
pub fn hand_pr_curve(predictions: &[ImagePredictions], gt: &Dataset, required: AttrSet, config: &EvalConfig) -> Vec<(f64, f64)> {
    let (flags, n_gt) = hand_tp_flags(predictions, gt, required, config.iou_threshold);
    let (p, r) = pr_points(&flags, n_gt);
    r.into_iter().zip(p).collect()
}

/// Ground truth rendered as a perfect run: exact boxes, correct attributes,
/// every EHOI linked to its true object.
pub fn perfect_run(gt: &Dataset) -> RunOutput {
    use crate::annotations::project_interaction_point;
    RunOutput {
        images: gt
            .images
            .iter()
            .map(|r| ImagePredictions {
                image_id: r.image_id.clone(),
                hands: r
                    .hands
                    .iter()
                    .map(|h| HandPrediction {
                        id: h.id,
                        bbox: h.bbox,
                        confidence: 1.0,
                        side: h.side,
                        contact: h.contact,
                        glove: h.glove,
                    })
                    .collect(),
                objects: r
                    .objects
                    .iter()
                    .map(|o| ObjectPrediction {
                        id: o.id,
                        bbox: o.bbox,
                        confidence: 1.0,
                        category_id: o.category_id,
                    })
                    .collect(),
                ehois: r
                    .hands
                    .iter()
                    .map(|h| QuadrupleRecord {
                        hand_id: h.id,
                        contact: h.contact,
                        object_id: h.active_object_id,
                        glove: h.glove,
                        interaction_point: h
                            .offset
                            .map(|o| {
                                let (x, y) = project_interaction_point(&h.bbox, &o, r.width as f64, r.height as f64);
                                [x, y]
                            })
                            .unwrap_or_else(|| {
                                let (x, y) = h.bbox.center();
                                [x, y]
                            }),
                    })
                    .collect(),
            })
            .collect(),
    }
}
