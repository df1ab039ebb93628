//! Inference in detector or GT-proposal mode, and conversion to run outputs.

use image::RgbImage;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Sample;
use super::loss::softmax2;
use super::model::{AttributePrediction, DepthMap, Features, KeypointPrediction, Model};
use crate::annotations::{BBox, ContactState, GloveStatus, HandSide, OffsetVector};
use crate::error::{Error, Result};
use crate::matching::{match_hands, HandCandidate, MatchConfig, ObjectCandidate};
use crate::metrics::{HandPrediction, ImagePredictions, ObjectPrediction, RunOutput};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    Detector,
    #[default]
    GtProposals,
}

/// Which contact estimate drives the final label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactSource {
    #[default]
    Fused,
    Appearance,
    Multimodal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferOptions {
    pub mode: InferMode,
    pub contact: ContactSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionKind {
    Hand,
    Object,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandAttributes {
    pub prediction: AttributePrediction,
    pub multimodal_logits: [f64; 2],
    pub p_contact_appearance: f64,
    pub p_contact_multimodal: f64,
    /// Late-fused contact probability.
    pub p_contact: f64,
    pub side: HandSide,
    pub contact: ContactState,
    pub glove: GloveStatus,
    pub offset: OffsetVector,
    pub keypoints: KeypointPrediction,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub kind: DetectionKind,
    pub id: u64,
    pub bbox: BBox,
    pub confidence: f64,
    pub category_id: Option<u32>,
    pub hand: Option<HandAttributes>,
}

fn argmax2(p: [f64; 2]) -> (usize, f64) {
    if p[1] > p[0] {
        (1, p[1])
    } else {
        (0, p[0])
    }
}

impl Model {
    /// Attributes plus the product of the three decision probabilities.
    pub(crate) fn hand_attributes(
        &self,
        rgb: &RgbImage,
        mask: Option<&dyn Fn(usize, usize) -> bool>,
        f: &Features,
        depth: &DepthMap,
        b: &BBox,
        source: ContactSource,
    ) -> (HandAttributes, f64) {
        let hf = self.hand_forward(rgb, mask, f, depth, b);
        let heatmaps = self.heatmaps_from_logits(&hf.kpt_logits, b);
        let coords = heatmaps.decode();
        let a = hf.attrs;
        let p_app = softmax2(&a.state_logits)[1];
        let p_mm = softmax2(&hf.mm_state)[1];
        let p_contact = self.fuse(&a.state_logits, &hf.mm_state);
        let p = match source {
            ContactSource::Fused => p_contact,
            ContactSource::Appearance => p_app,
            ContactSource::Multimodal => p_mm,
        };
        let (side, p_side) = argmax2(softmax2(&a.side_logits));
        let (glove, p_glove) = argmax2(softmax2(&a.glove_logits));
        let certainty = p_side * p_glove * p.max(1.0 - p);
        let attrs = HandAttributes {
            prediction: a,
            multimodal_logits: hf.mm_state,
            p_contact_appearance: p_app,
            p_contact_multimodal: p_mm,
            p_contact,
            side: HandSide::from_index(side),
            contact: if p >= 0.5 { ContactState::Contact } else { ContactState::NoContact },
            glove: GloveStatus::from_index(glove),
            offset: a.unit_offset(),
            keypoints: KeypointPrediction { heatmaps, coords },
        };
        (attrs, certainty)
    }

    /// Ranked detections with attributes for one image.
    ///
    /// In GT-proposal mode the sample's boxes (and instance mask, when present)
    /// are used as regions; hands keep their GT ids.
    pub fn infer(&self, s: &Sample, opts: &InferOptions) -> Result<Vec<Detection>> {
        let (f, _) = self.backbone(&s.rgb)?;
        let depth = self.predict_depth(&f);
        let mut out = Vec::new();
        match opts.mode {
            InferMode::GtProposals => {
                for h in &s.record.hands {
                    if !h.bbox.is_valid() || h.bbox.area() < 1.0 {
                        return Err(Error::DegenerateBox(h.bbox.as_array()));
                    }
                    let member = s.instance_mask(h.id);
                    let mask = member.as_ref().map(|m| m as &dyn Fn(usize, usize) -> bool);
                    let (attrs, confidence) = self.hand_attributes(&s.rgb, mask, &f, &depth, &h.bbox, opts.contact);
                    out.push(Detection { kind: DetectionKind::Hand, id: h.id, bbox: h.bbox, confidence, category_id: None, hand: Some(attrs) });
                }
                for o in &s.record.objects {
                    out.push(Detection { kind: DetectionKind::Object, id: o.id, bbox: o.bbox, confidence: 1.0, category_id: Some(o.category_id), hand: None });
                }
            }
            InferMode::Detector => {
                let (_, heat, reg) = self.det_forward(&f);
                let raw = self.decode_detections(&heat, &reg, f.width, f.height);
                let (mut nh, mut no) = (0u64, 0u64);
                for d in raw {
                    if d.class == 0 {
                        // Box-shaped stand-in for a predicted instance mask.
                        let b = d.bbox;
                        let inside = move |x: usize, y: usize| b.contains(x as f64 + 0.5, y as f64 + 0.5);
                        let (attrs, certainty) = self.hand_attributes(&s.rgb, Some(&inside), &f, &depth, &d.bbox, opts.contact);
                        let confidence = d.score * certainty;
                        out.push(Detection { kind: DetectionKind::Hand, id: nh, bbox: d.bbox, confidence, category_id: None, hand: Some(attrs) });
                        nh += 1;
                    } else {
                        let category_id = Some((d.class - 1) as u32);
                        out.push(Detection { kind: DetectionKind::Object, id: no, bbox: d.bbox, confidence: d.score, category_id, hand: None });
                        no += 1;
                    }
                }
            }
        }
        out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
        Ok(out)
    }
}

/// Detections of one image as evaluation input, with EHOIs from matching.
pub fn to_image_predictions(image_id: &str, detections: &[Detection], width: f64, height: f64, cfg: &MatchConfig) -> ImagePredictions {
    let mut hands = Vec::new();
    let mut cands = Vec::new();
    let mut objects = Vec::new();
    let mut ocands = Vec::new();
    for d in detections {
        match (&d.kind, &d.hand) {
            (DetectionKind::Hand, Some(a)) => {
                hands.push(HandPrediction { id: d.id, bbox: d.bbox, confidence: d.confidence, side: a.side, contact: a.contact, glove: a.glove });
                cands.push(HandCandidate { id: d.id, bbox: d.bbox, contact: a.contact, glove: a.glove, offset: a.offset });
            }
            (DetectionKind::Object, _) => {
                objects.push(ObjectPrediction { id: d.id, bbox: d.bbox, confidence: d.confidence, category_id: d.category_id.unwrap_or(0) });
                ocands.push(ObjectCandidate { id: d.id, bbox: d.bbox });
            }
            _ => {}
        }
    }
    let ehois = match_hands(&cands, &ocands, width, height, cfg).records(&cands, &ocands);
    ImagePredictions { image_id: image_id.to_string(), hands, objects, ehois }
}

/// Infers every sample and assembles the run output, in input order.
pub fn run_inference(model: &Model, samples: &[Sample], opts: &InferOptions, cfg: &MatchConfig) -> Result<RunOutput> {
    let images = samples
        .par_iter()
        .map(|s| {
            let dets = model.infer(s, opts)?;
            Ok(to_image_predictions(&s.record.image_id, &dets, s.record.width as f64, s.record.height as f64, cfg))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RunOutput { images })
}

/// Per-hand accuracies in GT-proposal mode, in percent.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub n_hands: usize,
    pub side: f64,
    pub glove: f64,
    pub contact_fused: f64,
    pub contact_appearance: f64,
    pub contact_multimodal: f64,
    /// Mean distance of visible keypoints to their targets, in pixels.
    pub keypoint_error_px: f64,
    /// Mean absolute inverse-depth error over images with depth.
    pub depth_mae: Option<f64>,
}

impl std::fmt::Display for AccuracyReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "hands {}  side {:.2}  glove {:.2}  contact fused {:.2} / app {:.2} / mm {:.2}  kpt {:.2}px",
            self.n_hands, self.side, self.glove, self.contact_fused, self.contact_appearance, self.contact_multimodal, self.keypoint_error_px
        )?;
        if let Some(d) = self.depth_mae {
            write!(f, "  depth mae {d:.4}")?;
        }
        Ok(())
    }
}

pub fn attribute_accuracy(model: &Model, samples: &[Sample]) -> Result<AccuracyReport> {
    #[derive(Default)]
    struct Acc {
        n: usize,
        side: usize,
        glove: usize,
        fused: usize,
        app: usize,
        mm: usize,
        kpt_sum: f64,
        kpt_n: usize,
        depth_sum: f64,
        depth_n: usize,
    }
    let parts = samples
        .par_iter()
        .map(|s| -> Result<Acc> {
            let mut a = Acc::default();
            let (f, _) = model.backbone(&s.rgb)?;
            let depth = model.predict_depth(&f);
            if let Some(t) = s.depth_target() {
                a.depth_sum += depth.data.iter().zip(&t).map(|(&p, &y)| (p as f64 - y).abs()).sum::<f64>() / t.len() as f64;
                a.depth_n += 1;
            }
            for h in &s.record.hands {
                let member = s.instance_mask(h.id);
                let mask = member.as_ref().map(|m| m as &dyn Fn(usize, usize) -> bool);
                let (r, _) = model.hand_attributes(&s.rgb, mask, &f, &depth, &h.bbox, ContactSource::Fused);
                let y = h.contact.is_contact();
                a.n += 1;
                a.side += (r.side == h.side) as usize;
                a.glove += (r.glove == h.glove) as usize;
                a.fused += ((r.p_contact >= 0.5) == y) as usize;
                a.app += ((r.p_contact_appearance >= 0.5) == y) as usize;
                a.mm += ((r.p_contact_multimodal >= 0.5) == y) as usize;
                for (kp, c) in h.keypoints.iter().zip(&r.keypoints.coords) {
                    if kp.visible {
                        a.kpt_sum += ((kp.x - c[0]).powi(2) + (kp.y - c[1]).powi(2)).sqrt();
                        a.kpt_n += 1;
                    }
                }
            }
            Ok(a)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut t = Acc::default();
    for p in parts {
        t.n += p.n;
        t.side += p.side;
        t.glove += p.glove;
        t.fused += p.fused;
        t.app += p.app;
        t.mm += p.mm;
        t.kpt_sum += p.kpt_sum;
        t.kpt_n += p.kpt_n;
        t.depth_sum += p.depth_sum;
        t.depth_n += p.depth_n;
    }
    let pct = |k: usize| if t.n == 0 { 0.0 } else { 100.0 * k as f64 / t.n as f64 };
    Ok(AccuracyReport {
        n_hands: t.n,
        side: pct(t.side),
        glove: pct(t.glove),
        contact_fused: pct(t.fused),
        contact_appearance: pct(t.app),
        contact_multimodal: pct(t.mm),
        keypoint_error_px: if t.kpt_n == 0 { 0.0 } else { t.kpt_sum / t.kpt_n as f64 },
        depth_mae: (t.depth_n > 0).then(|| t.depth_sum / t.depth_n as f64),
    })
}
