//! Brute-force AP reference: re-runs matching from scratch for every rank
//! prefix and integrates the interpolated precision over distinct recalls.

#![allow(dead_code)]

use ehoi::annotations::{
    BBox, Category, ContactState, Dataset, GloveStatus, HandAnnotation, HandSide, ImageRecord,
    ObjectAnnotation, OffsetVector,
};
use ehoi::matching::QuadrupleRecord;
use ehoi::metrics::{HandPrediction, ImagePredictions, ObjectPrediction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn box_iou(a: &BBox, b: &BBox) -> f64 {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    let area = |r: &BBox| (r.x_max - r.x_min) * (r.y_max - r.y_min);
    inter / (area(a) + area(b) - inter)
}

/// A ranked item: image id, confidence, hand box, attribute code, object box
/// (pairs only), plus hand attributes.
#[derive(Clone, Debug)]
struct Item {
    image: String,
    conf: f64,
    hand: BBox,
    code: u8,
    object: Option<(BBox, u32)>,
    side: HandSide,
    contact: ContactState,
    glove: GloveStatus,
}

#[derive(Clone, Debug)]
struct Truth {
    image: String,
    hand: BBox,
    object: Option<(BBox, u32)>,
    side: HandSide,
    contact: ContactState,
    glove: GloveStatus,
}

fn code(s: HandSide, c: ContactState, g: GloveStatus) -> u8 {
    let s = if s == HandSide::Right { 4 } else { 0 };
    let c = if c == ContactState::Contact { 2 } else { 0 };
    let g = if g == GloveStatus::Glove { 1 } else { 0 };
    s + c + g
}

fn rank(items: &mut [Item]) {
    items.sort_by(|a, b| {
        let key = |i: &Item| {
            let o = i.object.map(|o| o.0).unwrap_or(BBox::new(0.0, 0.0, 0.0, 0.0));
            (i.image.clone(), [i.hand.x_min, i.hand.y_min, i.hand.x_max, i.hand.y_max], i.code, [o.x_min, o.y_min, o.x_max, o.y_max])
        };
        let (ka, kb) = (key(a), key(b));
        b.conf
            .partial_cmp(&a.conf)
            .unwrap()
            .then(ka.0.cmp(&kb.0))
            .then(ka.1.partial_cmp(&kb.1).unwrap())
            .then(ka.2.cmp(&kb.2))
            .then(ka.3.partial_cmp(&kb.3).unwrap())
    });
}

/// True positives among the first `k` ranked items.
fn tp_in_prefix(items: &[Item], truths: &[Truth], k: usize, thr: f64, is_tp: &dyn Fn(&Item, &Truth) -> bool) -> usize {
    let mut used = vec![false; truths.len()];
    let mut tp = 0;
    for item in &items[..k] {
        let mut best: Option<usize> = None;
        let mut best_iou = -1.0;
        for (j, t) in truths.iter().enumerate() {
            if used[j] || t.image != item.image {
                continue;
            }
            let o = box_iou(&item.hand, &t.hand);
            if o >= thr && o > best_iou {
                best_iou = o;
                best = Some(j);
            }
        }
        if let Some(j) = best {
            used[j] = true;
            if is_tp(item, &truths[j]) {
                tp += 1;
            }
        }
    }
    tp
}

fn oracle_ap(mut items: Vec<Item>, truths: &[Truth], thr: f64, eleven: bool, is_tp: &dyn Fn(&Item, &Truth) -> bool) -> f64 {
    let n_gt = truths.len();
    if n_gt == 0 {
        return if items.is_empty() { 100.0 } else { 0.0 };
    }
    rank(&mut items);
    let mut curve = Vec::new();
    for k in 1..=items.len() {
        let tp = tp_in_prefix(&items, truths, k, thr, is_tp);
        curve.push((tp as f64 / n_gt as f64, tp as f64 / k as f64));
    }
    let interp = |r: f64| curve.iter().filter(|c| c.0 >= r).map(|c| c.1).fold(0.0, f64::max);
    if eleven {
        return 100.0 * (0..=10).map(|t| interp(t as f64 / 10.0)).sum::<f64>() / 11.0;
    }
    let mut recalls: Vec<f64> = curve.iter().map(|c| c.0).filter(|&r| r > 0.0).collect();
    recalls.sort_by(|a, b| a.partial_cmp(b).unwrap());
    recalls.dedup();
    let mut prev = 0.0;
    let mut area = 0.0;
    for r in recalls {
        area += (r - prev) * interp(r);
        prev = r;
    }
    100.0 * area
}

pub fn oracle_hand_ap(preds: &[ImagePredictions], gt: &Dataset, side: bool, state: bool, glove: bool, thr: f64, eleven: bool) -> f64 {
    let items: Vec<Item> = preds
        .iter()
        .flat_map(|p| {
            p.hands.iter().map(move |h| Item {
                image: p.image_id.clone(),
                conf: h.confidence,
                hand: h.bbox,
                code: code(h.side, h.contact, h.glove),
                object: None,
                side: h.side,
                contact: h.contact,
                glove: h.glove,
            })
        })
        .collect();
    let truths: Vec<Truth> = gt
        .images
        .iter()
        .flat_map(|r| {
            r.hands.iter().map(move |h| Truth {
                image: r.image_id.clone(),
                hand: h.bbox,
                object: None,
                side: h.side,
                contact: h.contact,
                glove: h.glove,
            })
        })
        .collect();
    let rule = move |i: &Item, t: &Truth| (!side || i.side == t.side) && (!state || i.contact == t.contact) && (!glove || i.glove == t.glove);
    oracle_ap(items, &truths, thr, eleven, &rule)
}

/// Returns the mean and the per-category APs in ascending category order.
pub fn oracle_pair_map(preds: &[ImagePredictions], gt: &Dataset, all: bool, thr: f64, eleven: bool) -> (f64, Vec<(u32, f64)>) {
    let mut items = Vec::new();
    for p in preds {
        for q in &p.ehois {
            if q.contact != ContactState::Contact {
                continue;
            }
            let Some(h) = p.hands.iter().find(|h| h.id == q.hand_id) else { continue };
            let Some(o) = p.objects.iter().find(|o| Some(o.id) == q.object_id) else { continue };
            items.push(Item {
                image: p.image_id.clone(),
                conf: h.confidence,
                hand: h.bbox,
                code: code(h.side, q.contact, q.glove),
                object: Some((o.bbox, o.category_id)),
                side: h.side,
                contact: q.contact,
                glove: q.glove,
            });
        }
    }
    let mut truths = Vec::new();
    for r in &gt.images {
        for h in &r.hands {
            if h.contact != ContactState::Contact {
                continue;
            }
            let Some(oid) = h.active_object_id else { continue };
            let Some(o) = r.objects.iter().find(|o| o.id == oid) else { continue };
            truths.push(Truth {
                image: r.image_id.clone(),
                hand: h.bbox,
                object: Some((o.bbox, o.category_id)),
                side: h.side,
                contact: h.contact,
                glove: h.glove,
            });
        }
    }
    let mut cats: Vec<u32> = truths.iter().map(|t| t.object.unwrap().1).collect();
    cats.sort();
    cats.dedup();
    if cats.is_empty() {
        return (if items.is_empty() { 100.0 } else { 0.0 }, vec![]);
    }
    let rule = move |i: &Item, t: &Truth| {
        let (ib, _) = i.object.unwrap();
        let (tb, _) = t.object.unwrap();
        box_iou(&ib, &tb) >= thr && (!all || (i.side == t.side && i.contact == t.contact && i.glove == t.glove))
    };
    let per: Vec<(u32, f64)> = cats
        .iter()
        .map(|&c| {
            let its: Vec<Item> = items.iter().filter(|i| i.object.unwrap().1 == c).cloned().collect();
            let ts: Vec<Truth> = truths.iter().filter(|t| t.object.unwrap().1 == c).cloned().collect();
            (c, oracle_ap(its, &ts, thr, eleven, &rule))
        })
        .collect();
    (per.iter().map(|p| p.1).sum::<f64>() / per.len() as f64, per)
}

fn rand_box(rng: &mut ChaCha8Rng) -> BBox {
    let x = rng.gen_range(0..80) as f64;
    let y = rng.gen_range(0..80) as f64;
    BBox::new(x, y, x + rng.gen_range(8..20) as f64, y + rng.gen_range(8..20) as f64)
}

fn jitter(rng: &mut ChaCha8Rng, b: &BBox) -> BBox {
    let mut d = || rng.gen_range(-3..=3) as f64;
    let out = BBox::new(b.x_min + d(), b.y_min + d(), b.x_max + d(), b.y_max + d());
    if out.x_max - out.x_min < 1.0 || out.y_max - out.y_min < 1.0 { *b } else { out }
}

/// Random ground truth plus noisy predictions: jittered and spurious boxes,
/// flipped attributes, duplicates, and quantized confidences so ties occur.
pub fn random_instance(seed: u64) -> (Dataset, Vec<ImagePredictions>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_cat = 3;
    let n_images = rng.gen_range(1..=20);
    let mut images = Vec::new();
    let mut preds = Vec::new();
    for i in 0..n_images {
        let n_obj = rng.gen_range(0..=8usize);
        let objects: Vec<ObjectAnnotation> = (0..n_obj)
            .map(|j| ObjectAnnotation { id: j as u64, bbox: rand_box(&mut rng), category_id: rng.gen_range(0..n_cat), active: false })
            .collect();
        let n_hands = rng.gen_range(0..=5usize);
        let mut hands = Vec::new();
        for k in 0..n_hands {
            let contact = n_obj > 0 && rng.gen_bool(0.6);
            let active = if contact { Some(rng.gen_range(0..n_obj) as u64) } else { None };
            hands.push(HandAnnotation {
                id: (100 + k) as u64,
                bbox: rand_box(&mut rng),
                side: if rng.gen_bool(0.5) { HandSide::Left } else { HandSide::Right },
                contact: if contact { ContactState::Contact } else { ContactState::NoContact },
                glove: if rng.gen_bool(0.5) { GloveStatus::Glove } else { GloveStatus::NoGlove },
                keypoints: vec![],
                offset: if contact { Some(OffsetVector::ZERO) } else { None },
                active_object_id: active,
            });
        }
        let mut objects = objects;
        for h in &hands {
            if let Some(a) = h.active_object_id {
                objects[a as usize].active = true;
            }
        }
        let image_id = format!("im{i:02}");

        let mut p_objects = Vec::new();
        for o in &objects {
            if rng.gen_bool(0.85) {
                let bbox = jitter(&mut rng, &o.bbox);
                let category_id = if rng.gen_bool(0.85) { o.category_id } else { rng.gen_range(0..n_cat) };
                p_objects.push(ObjectPrediction { id: o.id, bbox, confidence: 1.0, category_id });
            }
        }
        for e in 0..rng.gen_range(0..3) {
            p_objects.push(ObjectPrediction { id: 50 + e, bbox: rand_box(&mut rng), confidence: 0.5, category_id: rng.gen_range(0..n_cat) });
        }
        let mut p_hands = Vec::new();
        let mut ehois = Vec::new();
        let mut next_id = 0u64;
        let mut emit = |rng: &mut ChaCha8Rng, bbox: BBox, side: HandSide, contact: ContactState, glove: GloveStatus, hands: &mut Vec<HandPrediction>, ehois: &mut Vec<QuadrupleRecord>, target: Option<u64>| {
            let flip = |rng: &mut ChaCha8Rng, p: f64| rng.gen_bool(p);
            let side = if flip(rng, 0.15) { if side == HandSide::Left { HandSide::Right } else { HandSide::Left } } else { side };
            let glove = if flip(rng, 0.15) { if glove == GloveStatus::Glove { GloveStatus::NoGlove } else { GloveStatus::Glove } } else { glove };
            let contact = if flip(rng, 0.15) { if contact.is_contact() { ContactState::NoContact } else { ContactState::Contact } } else { contact };
            let id = next_id;
            next_id += 1;
            hands.push(HandPrediction { id, bbox, confidence: rng.gen_range(1..=10) as f64 / 10.0, side, contact, glove });
            let object_id = if contact.is_contact() && !p_objects.is_empty() {
                match target.filter(|t| p_objects.iter().any(|o| o.id == *t) && rng.gen_bool(0.8)) {
                    Some(t) => Some(t),
                    None => Some(p_objects[rng.gen_range(0..p_objects.len())].id),
                }
            } else {
                None
            };
            ehois.push(QuadrupleRecord { hand_id: id, contact, object_id, glove, interaction_point: [0.0, 0.0] });
        };
        for h in &hands {
            if rng.gen_bool(0.85) {
                let b = jitter(&mut rng, &h.bbox);
                emit(&mut rng, b, h.side, h.contact, h.glove, &mut p_hands, &mut ehois, h.active_object_id);
                if rng.gen_bool(0.15) {
                    let b = jitter(&mut rng, &h.bbox);
                    emit(&mut rng, b, h.side, h.contact, h.glove, &mut p_hands, &mut ehois, h.active_object_id);
                }
            }
        }
        for _ in 0..rng.gen_range(0..2) {
            let b = rand_box(&mut rng);
            emit(&mut rng, b, HandSide::Left, ContactState::Contact, GloveStatus::Glove, &mut p_hands, &mut ehois, None);
        }
        images.push(ImageRecord {
            image_id: image_id.clone(),
            width: 100,
            height: 100,
            rgb_path: String::new(),
            depth_path: None,
            mask_path: None,
            hands,
            objects,
        });
        preds.push(ImagePredictions { image_id, hands: p_hands, objects: p_objects, ehois });
    }
    let categories = (0..n_cat).map(|c| Category { id: c, name: format!("c{c}") }).collect();
    (Dataset { categories, images, split: None }, preds)
}
