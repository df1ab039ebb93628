//! Hand to active-object association.
//!
//! Each in-contact hand walks its predicted offset vector from the box
//! center to an interaction point; the object whose box center is closest to
//! that point becomes the active object.

use serde::{Deserialize, Serialize};

use crate::annotations::{project_interaction_point, BBox, ContactState, GloveStatus, OffsetVector};

/// What matching needs to know about a detected hand.
#[derive(Clone, Debug, PartialEq)]
pub struct HandCandidate {
    pub id: u64,
    pub bbox: BBox,
    pub contact: ContactState,
    pub glove: GloveStatus,
    pub offset: OffsetVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectCandidate {
    pub id: u64,
    pub bbox: BBox,
}

/// `<hand, contact state, active object, glove>`, with indices into the
/// inputs of [`match_hands`].
#[derive(Clone, Debug, PartialEq)]
pub struct EhoiQuadruple {
    pub hand: usize,
    pub contact: ContactState,
    pub active_object: Option<usize>,
    pub glove: GloveStatus,
    pub interaction_point: [f64; 2],
}

/// Serialized form of a quadruple, keyed by detection ids.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrupleRecord {
    pub hand_id: u64,
    pub contact: ContactState,
    pub object_id: Option<u64>,
    pub glove: GloveStatus,
    pub interaction_point: [f64; 2],
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchConfig {
    /// Reject the nearest object when its center is farther than this many
    /// pixels from the interaction point. Off by default.
    pub max_distance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum MatchWarning {
    NoObjects { hand: usize },
    BeyondCutoff { hand: usize, distance: f64 },
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchOutput {
    pub quadruples: Vec<EhoiQuadruple>,
    pub warnings: Vec<MatchWarning>,
}

impl MatchOutput {
    pub fn records(&self, hands: &[HandCandidate], objects: &[ObjectCandidate]) -> Vec<QuadrupleRecord> {
        self.quadruples
            .iter()
            .map(|q| QuadrupleRecord {
                hand_id: hands[q.hand].id,
                contact: q.contact,
                object_id: q.active_object.map(|i| objects[i].id),
                glove: q.glove,
                interaction_point: q.interaction_point,
            })
            .collect()
    }
}

fn squared_distance(p: (f64, f64), b: &BBox) -> f64 {
    let (cx, cy) = b.center();
    let (dx, dy) = (cx - p.0, cy - p.1);
    dx * dx + dy * dy
}

/// One quadruple per hand, in input order.
pub fn match_hands(
    hands: &[HandCandidate],
    objects: &[ObjectCandidate],
    width: f64,
    height: f64,
    config: &MatchConfig,
) -> MatchOutput {
    let mut out = MatchOutput::default();
    for (i, hand) in hands.iter().enumerate() {
        let point = project_interaction_point(&hand.bbox, &hand.offset, width, height);
        let mut active = None;
        if hand.contact.is_contact() {
            let mut best: Option<(usize, f64)> = None;
            for (j, obj) in objects.iter().enumerate() {
                let d = squared_distance(point, &obj.bbox);
                if best.map_or(true, |(_, bd)| d < bd) {
                    best = Some((j, d));
                }
            }
            match (best, config.max_distance) {
                (None, _) => out.warnings.push(MatchWarning::NoObjects { hand: i }),
                (Some((_, d)), Some(cap)) if d.sqrt() > cap => {
                    out.warnings.push(MatchWarning::BeyondCutoff { hand: i, distance: d.sqrt() })
                }
                (Some((j, _)), _) => active = Some(j),
            }
        }
        out.quadruples.push(EhoiQuadruple {
            hand: i,
            contact: hand.contact,
            active_object: active,
            glove: hand.glove,
            interaction_point: [point.0, point.1],
        });
    }
    out
}

/// Exhaustive reference for [`match_hands`] without a cutoff: collects every
/// object at the minimum distance and keeps the first.
pub fn match_oracle(hands: &[HandCandidate], objects: &[ObjectCandidate], width: f64, height: f64) -> Vec<EhoiQuadruple> {
    hands
        .iter()
        .enumerate()
        .map(|(i, hand)| {
            let (hx, hy) = hand.bbox.center();
            let reach = hand.offset.m * (width * width + height * height).sqrt();
            let p = (hx + reach * hand.offset.v_x, hy + reach * hand.offset.v_y);
            let active = if hand.contact == ContactState::Contact && !objects.is_empty() {
                let dists: Vec<f64> = objects.iter().map(|o| squared_distance(p, &o.bbox)).collect();
                let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
                let ties: Vec<usize> = (0..objects.len()).filter(|&j| dists[j] == min).collect();
                ties.first().copied()
            } else {
                None
            };
            EhoiQuadruple {
                hand: i,
                contact: hand.contact,
                active_object: active,
                glove: hand.glove,
                interaction_point: [p.0, p.1],
            }
        })
        .collect()
}
