//! Procedural generator of labeled desk-scale EHOI scenes.
//!
//! Hands are 2D articulated skeletons (palm polygon plus five finger chains)
//! whose joints are exactly the 21 annotated keypoints. Gloves are rendered as
//! a yellow recolor with a cuff band at the wrist. Contact is geometric: the
//! thumb and index tips of a contact hand are placed inside its active
//! object's box.
//!
//! Every scene is a pure function of `(config.seed, scene_index)`.

use std::f64::consts::PI;
use std::path::Path;

use image::{Luma, Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotations::{
    derive_offset, write_dataset, write_png, BBox, Category, ContactState, Dataset, GloveStatus,
    Gray16Image, HandAnnotation, HandSide, ImageRecord, Keypoint, ObjectAnnotation, NUM_KEYPOINTS,
};
use crate::error::{Error, Result};

const MAX_PLACEMENT_RETRIES: usize = 32;

pub const CATEGORY_NAMES: [&str; 10] = [
    "screwdriver",
    "wrench",
    "pliers",
    "multimeter",
    "power_supply",
    "socket",
    "soldering_iron",
    "battery",
    "oscilloscope_probe",
    "drill",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    pub n_objects_range: [u32; 2],
    pub n_hands_range: [u32; 2],
    pub glove_probability: f64,
    pub contact_probability: f64,
    /// Number of object categories, at most 10.
    pub n_categories: u32,
    /// Hand length (wrist to middle fingertip) as a fraction of min(width, height).
    pub hand_scale: [f64; 2],
    /// Object side length as a fraction of min(width, height).
    pub object_scale: [f64; 2],
    /// Global hue/brightness/contrast perturbation strength in [0, 1]; 0 keeps
    /// the clean synthetic palette.
    pub color_jitter: f64,
    /// Per-pixel Gaussian noise std in 8-bit units.
    pub pixel_noise: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            width: 96,
            height: 96,
            n_objects_range: [2, 4],
            n_hands_range: [1, 2],
            glove_probability: 0.5,
            contact_probability: 0.6,
            n_categories: 10,
            hand_scale: [0.30, 0.36],
            object_scale: [0.14, 0.26],
            color_jitter: 0.0,
            pixel_noise: 4.0,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::config(name, format!("{p} is not a probability")))
            }
        };
        prob("glove_probability", self.glove_probability)?;
        prob("contact_probability", self.contact_probability)?;
        prob("color_jitter", self.color_jitter)?;
        if self.width < 64 || self.height < 64 {
            return Err(Error::config("width/height", "must be at least 64"));
        }
        if self.n_objects_range[0] > self.n_objects_range[1] {
            return Err(Error::config("n_objects_range", "empty range"));
        }
        if self.n_hands_range[0] > self.n_hands_range[1] || self.n_hands_range[1] > 2 {
            return Err(Error::config("n_hands_range", "must be a nonempty range within [0, 2]"));
        }
        if self.n_categories == 0 || self.n_categories as usize > CATEGORY_NAMES.len() {
            return Err(Error::config("n_categories", "must be in 1..=10"));
        }
        for (name, r) in [("hand_scale", self.hand_scale), ("object_scale", self.object_scale)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1] < 1.0) {
                return Err(Error::config(name, "must be an increasing range in (0, 1)"));
            }
        }
        if !(self.pixel_noise >= 0.0 && self.pixel_noise.is_finite()) {
            return Err(Error::config("pixel_noise", "must be nonnegative"));
        }
        Ok(())
    }

    pub fn categories(&self) -> Vec<Category> {
        CATEGORY_NAMES[..self.n_categories as usize]
            .iter()
            .enumerate()
            .map(|(i, n)| Category {
                id: i as u32,
                name: n.to_string(),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedScene {
    pub record: ImageRecord,
    pub rgb: RgbImage,
    /// round(65535 * normalized inverse depth).
    pub depth: Gray16Image,
    /// Instance id + 1, 0 for background.
    pub instance_mask: Gray16Image,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Pose {
    Open,
    Pinch,
}

#[derive(Clone, Debug)]
struct HandPlan {
    side: HandSide,
    contact: bool,
    glove: bool,
    skin: [f64; 3],
    keypoints: [(f64, f64); NUM_KEYPOINTS],
    bbox: BBox,
    /// Index into the object plan list.
    object: Option<usize>,
    scale: f64,
}

#[derive(Clone, Debug)]
struct ObjectPlan {
    bbox: BBox,
    category: u32,
    tint: [f64; 3],
}

fn hash_seed(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Renders scene `scene_index` of the stream defined by `config.seed`.
pub fn generate_scene(config: &SceneConfig, scene_index: u64) -> Result<RenderedScene> {
    config.validate()?;
    let mut rng = hash_seed(config.seed, scene_index);
    let (w, h) = (config.width as f64, config.height as f64);

    let n_hands = rng.gen_range(config.n_hands_range[0]..=config.n_hands_range[1]) as usize;
    let mut n_objects = rng.gen_range(config.n_objects_range[0]..=config.n_objects_range[1]) as usize;
    let sides: Vec<HandSide> = match n_hands {
        0 => vec![],
        1 => vec![if rng.gen_bool(0.5) { HandSide::Left } else { HandSide::Right }],
        _ => vec![HandSide::Left, HandSide::Right],
    };
    let mut hand_attrs: Vec<(HandSide, bool, bool)> = sides
        .iter()
        .map(|&s| {
            (
                s,
                rng.gen_bool(config.contact_probability),
                rng.gen_bool(config.glove_probability),
            )
        })
        .collect();

    // Bounded rejection sampling, then shed distractor objects, then hands.
    let (hands, objects) = loop {
        let n_contact = hand_attrs.iter().filter(|a| a.1).count();
        let mut placed = None;
        for _ in 0..MAX_PLACEMENT_RETRIES {
            if let Some(p) = try_layout(config, &mut rng, &hand_attrs, n_objects.max(n_contact)) {
                placed = Some(p);
                break;
            }
        }
        if let Some(p) = placed {
            break p;
        }
        if n_objects > n_contact {
            n_objects -= 1;
        } else {
            log::debug!("scene {scene_index}: dropping a hand after failed placement");
            hand_attrs.pop();
        }
    };

    Ok(render(config, &mut rng, scene_index, hands, objects, w, h))
}

fn sample_range(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

fn try_layout(
    config: &SceneConfig,
    rng: &mut ChaCha8Rng,
    hand_attrs: &[(HandSide, bool, bool)],
    n_objects: usize,
) -> Option<(Vec<HandPlan>, Vec<ObjectPlan>)> {
    let (w, h) = (config.width as f64, config.height as f64);
    let unit = w.min(h);
    let inside = |b: &BBox| b.x_min >= 1.0 && b.y_min >= 1.0 && b.x_max <= w - 1.0 && b.y_max <= h - 1.0;
    let mut objects: Vec<ObjectPlan> = Vec::new();
    let mut hands: Vec<HandPlan> = Vec::new();

    let new_object = |rng: &mut ChaCha8Rng, cx: f64, cy: f64| {
        let ow = sample_range(rng, config.object_scale) * unit;
        let oh = sample_range(rng, config.object_scale) * unit;
        let tint = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        ObjectPlan {
            bbox: BBox::from_center(cx, cy, ow, oh),
            category: rng.gen_range(0..config.n_categories),
            tint,
        }
    };

    let half_range = |side: HandSide| match side {
        HandSide::Left => (0.12 * w, 0.62 * w),
        HandSide::Right => (0.38 * w, 0.88 * w),
    };

    // Contact hands first, each with its own active object.
    for &(side, contact, glove) in hand_attrs.iter().filter(|a| a.1) {
        let (x0, x1) = half_range(side);
        let (cx, cy) = (rng.gen_range(x0..x1), rng.gen_range(0.18 * h..0.6 * h));
        let obj = new_object(rng, cx, cy);
        if !inside(&obj.bbox) || objects.iter().any(|o| o.bbox.intersection(&obj.bbox) > 0.0) {
            return None;
        }
        let (ocx, ocy) = obj.bbox.center();
        let grasp = (
            ocx + rng.gen_range(-0.2..0.2) * obj.bbox.width(),
            ocy + rng.gen_range(-0.2..0.2) * obj.bbox.height(),
        );
        let tilt = match side {
            HandSide::Left => rng.gen_range(-15.0f64..40.0),
            HandSide::Right => rng.gen_range(-40.0f64..15.0),
        };
        let scale = sample_range(rng, config.hand_scale) * unit;
        let skin = skin_tone(rng);
        let kp = hand_keypoints(rng, side, Pose::Pinch, tilt.to_radians(), scale, None, Some(grasp));
        let bbox = hand_bbox(&kp, scale, glove);
        if !inside(&bbox)
            || !obj.bbox.contains(kp[4].0, kp[4].1)
            || !obj.bbox.contains(kp[8].0, kp[8].1)
            || hands.iter().any(|o: &HandPlan| o.bbox.intersection(&bbox) > 0.0)
        {
            return None;
        }
        objects.push(obj);
        hands.push(HandPlan {
            side,
            contact,
            glove,
            skin,
            keypoints: kp,
            bbox,
            object: Some(objects.len() - 1),
            scale,
        });
    }
    // An active object must stay clear of every other hand.
    for &(side, contact, glove) in hand_attrs.iter().filter(|a| !a.1) {
        let (x0, x1) = half_range(side);
        let wrist = (rng.gen_range(x0..x1), rng.gen_range(0.62 * h..0.95 * h));
        let tilt = rng.gen_range(-45.0f64..45.0);
        let scale = sample_range(rng, config.hand_scale) * unit;
        let skin = skin_tone(rng);
        let kp = hand_keypoints(rng, side, Pose::Open, tilt.to_radians(), scale, Some(wrist), None);
        let bbox = hand_bbox(&kp, scale, glove);
        if !inside(&bbox)
            || hands.iter().any(|o| o.bbox.intersection(&bbox) > 0.0)
            || objects.iter().any(|o| o.bbox.dilate(0.1).intersection(&bbox) > 0.0)
        {
            return None;
        }
        hands.push(HandPlan {
            side,
            contact,
            glove,
            skin,
            keypoints: kp,
            bbox,
            object: None,
            scale,
        });
    }
    for (i, hp) in hands.iter().enumerate() {
        if let Some(oi) = hp.object {
            let ob = objects[oi].bbox;
            if hands.iter().enumerate().any(|(j, o)| j != i && o.bbox.intersection(&ob) > 0.0) {
                return None;
            }
        }
    }

    // Distractors: no overlap with anything already placed.
    let mut attempts = 0;
    while objects.len() < n_objects {
        attempts += 1;
        if attempts > MAX_PLACEMENT_RETRIES {
            return None;
        }
        let (cx, cy) = (rng.gen_range(0.0..w), rng.gen_range(0.0..h));
        let obj = new_object(rng, cx, cy);
        let grown = obj.bbox.dilate(0.1);
        if inside(&obj.bbox)
            && !objects.iter().any(|o| o.bbox.intersection(&grown) > 0.0)
            && !hands.iter().any(|o| o.bbox.intersection(&grown) > 0.0)
        {
            objects.push(obj);
        }
    }
    Some((hands, objects))
}

fn forward(tilt: f64) -> (f64, f64) {
    (tilt.sin(), -tilt.cos())
}

fn skin_tone(rng: &mut ChaCha8Rng) -> [f64; 3] {
    const TONES: [[f64; 3]; 4] = [
        [224.0, 172.0, 140.0],
        [198.0, 134.0, 100.0],
        [150.0, 95.0, 68.0],
        [236.0, 190.0, 160.0],
    ];
    let t = TONES[rng.gen_range(0..TONES.len())];
    let j = rng.gen_range(-10.0..10.0);
    [t[0] + j, t[1] + j, t[2] + j]
}

const GLOVE_BASE: [f64; 3] = [236.0, 204.0, 40.0];
const CUFF: [f64; 3] = [205.0, 135.0, 25.0];

/// Keypoints in MediaPipe order. Either `wrist` anchors the hand or `pinch`
/// fixes the midpoint between thumb and index tips.
fn hand_keypoints(
    rng: &mut ChaCha8Rng,
    side: HandSide,
    pose: Pose,
    tilt: f64,
    scale: f64,
    wrist: Option<(f64, f64)>,
    pinch: Option<(f64, f64)>,
) -> [(f64, f64); NUM_KEYPOINTS] {
    // Local frame: `a` lateral (positive toward the thumb), `f` forward.
    let thumb_sign = match side {
        HandSide::Left => 1.0,
        HandSide::Right => -1.0,
    };
    let mut local = [(0.0f64, 0.0f64); NUM_KEYPOINTS];
    let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-4.0f64..4.0).to_radians();

    // (mcp, spread angle, segment lengths)
    let fingers: [((f64, f64), f64, [f64; 3]); 4] = [
        ((0.13, 0.42), 12.0, [0.20, 0.13, 0.10]),
        ((0.04, 0.45), 2.0, [0.22, 0.14, 0.11]),
        ((-0.05, 0.43), -8.0, [0.20, 0.13, 0.10]),
        ((-0.13, 0.39), -20.0, [0.15, 0.10, 0.08]),
    ];
    for (fi, &(mcp, spread, lens)) in fingers.iter().enumerate() {
        let (angle, lens, bend) = match pose {
            Pose::Open => (spread.to_radians() + jitter(rng), lens, 0.0),
            Pose::Pinch => (
                (spread * 0.3).to_radians() + jitter(rng) * 0.5,
                [lens[0] * 0.85, lens[1] * 0.5, lens[2] * 0.35],
                10f64.to_radians(),
            ),
        };
        let base = 5 + 4 * fi;
        local[base] = mcp;
        let mut p = mcp;
        for (s, len) in lens.iter().enumerate() {
            let a = angle + bend * s as f64;
            p = (p.0 + len * a.sin(), p.1 + len * a.cos());
            local[base + 1 + s] = p;
        }
    }
    let cmc = (0.10, 0.08);
    local[1] = cmc;
    let thumb_target = match pose {
        Pose::Open => {
            let a = (50.0f64).to_radians() + jitter(rng);
            (cmc.0 + 0.40 * a.sin(), cmc.1 + 0.40 * a.cos())
        }
        Pose::Pinch => (local[8].0 + 0.03, local[8].1 - 0.02),
    };
    let (dx, dy) = (thumb_target.0 - cmc.0, thumb_target.1 - cmc.1);
    let len = dx.hypot(dy).max(1e-9);
    let perp = (dy / len, -dx / len);
    let perp = if perp.0 < 0.0 { (-perp.0, -perp.1) } else { perp };
    for (k, t) in [0.35f64, 0.7, 1.0].iter().enumerate() {
        let bulge = 0.06 * (PI * t).sin();
        local[2 + k] = (cmc.0 + t * dx + bulge * perp.0, cmc.1 + t * dy + bulge * perp.1);
    }

    let (fx, fy) = forward(tilt);
    let (lx, ly) = (tilt.cos(), tilt.sin());
    let to_world = |origin: (f64, f64), p: (f64, f64)| {
        let a = p.0 * thumb_sign * scale;
        let f = p.1 * scale;
        (origin.0 + f * fx + a * lx, origin.1 + f * fy + a * ly)
    };
    let origin = match (wrist, pinch) {
        (Some(w), _) => w,
        (None, Some(g)) => {
            let mid = ((local[4].0 + local[8].0) / 2.0, (local[4].1 + local[8].1) / 2.0);
            let m = to_world((0.0, 0.0), mid);
            (g.0 - m.0, g.1 - m.1)
        }
        (None, None) => (0.0, 0.0),
    };
    let mut out = [(0.0, 0.0); NUM_KEYPOINTS];
    for (o, l) in out.iter_mut().zip(local.iter()) {
        *o = to_world(origin, *l);
    }
    out
}

fn finger_radius(k: usize, scale: f64) -> f64 {
    if k <= 4 {
        0.065 * scale
    } else {
        0.05 * scale
    }
}

/// Wrist corners and cuff extents (in world coordinates) for the palm polygon.
fn wrist_geometry(kp: &[(f64, f64); NUM_KEYPOINTS], scale: f64) -> ((f64, f64), (f64, f64), (f64, f64)) {
    let wrist = kp[0];
    // Lateral axis from the pinky MCP toward the index MCP.
    let (ax, ay) = (kp[5].0 - kp[17].0, kp[5].1 - kp[17].1);
    let n = ax.hypot(ay).max(1e-9);
    let (ax, ay) = (ax / n, ay / n);
    let half = 0.13 * scale;
    let a = (wrist.0 + ax * half, wrist.1 + ay * half);
    let b = (wrist.0 - ax * half, wrist.1 - ay * half);
    // Back direction, away from the fingers.
    let (mx, my) = (kp[9].0 - wrist.0, kp[9].1 - wrist.1);
    let m = mx.hypot(my).max(1e-9);
    (a, b, (-mx / m, -my / m))
}

fn hand_bbox(kp: &[(f64, f64); NUM_KEYPOINTS], scale: f64, glove: bool) -> BBox {
    let mut b = BBox::new(f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    let mut grow = |x: f64, y: f64, r: f64| {
        b.x_min = b.x_min.min(x - r);
        b.y_min = b.y_min.min(y - r);
        b.x_max = b.x_max.max(x + r);
        b.y_max = b.y_max.max(y + r);
    };
    for (k, p) in kp.iter().enumerate() {
        grow(p.0, p.1, finger_radius(k, scale));
    }
    let (a, c, back) = wrist_geometry(kp, scale);
    grow(a.0, a.1, 0.0);
    grow(c.0, c.1, 0.0);
    if glove {
        let r = 0.05 * scale;
        let d = 0.06 * scale;
        grow(a.0 + back.0 * d, a.1 + back.1 * d, r);
        grow(c.0 + back.0 * d, c.1 + back.1 * d, r);
    }
    // Snap outward to whole pixels.
    BBox::new(b.x_min.floor(), b.y_min.floor(), b.x_max.ceil(), b.y_max.ceil())
}

/// Pixel canvas with color, depth and instance layers.
struct Canvas {
    w: usize,
    h: usize,
    rgb: Vec<[f64; 3]>,
    depth: Vec<f64>,
    mask: Vec<u16>,
}

impl Canvas {
    fn paint(&mut self, x: usize, y: usize, color: [f64; 3], depth: f64, id: u16) {
        let i = y * self.w + x;
        self.rgb[i] = color;
        self.depth[i] = depth;
        self.mask[i] = id;
    }

    /// Calls `f(x, y)` for every pixel whose center lies in the region test.
    fn fill(&mut self, bounds: BBox, inside: impl Fn(f64, f64) -> bool, color: impl Fn(f64, f64) -> [f64; 3], depth: f64, id: u16) {
        let x0 = bounds.x_min.floor().max(0.0) as usize;
        let y0 = bounds.y_min.floor().max(0.0) as usize;
        let x1 = (bounds.x_max.ceil().max(0.0) as usize).min(self.w);
        let y1 = (bounds.y_max.ceil().max(0.0) as usize).min(self.h);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if inside(px, py) {
                    self.paint(x, y, color(px, py), depth, id);
                }
            }
        }
    }

    fn capsule(&mut self, a: (f64, f64), b: (f64, f64), r: f64, color: [f64; 3], depth: f64, id: u16) {
        let bounds = BBox::new(a.0.min(b.0) - r, a.1.min(b.1) - r, a.0.max(b.0) + r, a.1.max(b.1) + r);
        self.fill(bounds, |x, y| segment_distance((x, y), a, b) <= r, |_, _| color, depth, id);
    }

    fn polygon(&mut self, pts: &[(f64, f64)], color: [f64; 3], depth: f64, id: u16) {
        let mut bounds = BBox::new(f64::MAX, f64::MAX, f64::MIN, f64::MIN);
        for p in pts {
            bounds.x_min = bounds.x_min.min(p.0);
            bounds.y_min = bounds.y_min.min(p.1);
            bounds.x_max = bounds.x_max.max(p.0);
            bounds.y_max = bounds.y_max.max(p.1);
        }
        self.fill(bounds, |x, y| point_in_polygon((x, y), pts), |_, _| color, depth, id);
    }
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    };
    (p.0 - a.0 - t * vx).hypot(p.1 - a.1 - t * vy)
}

fn point_in_polygon(p: (f64, f64), pts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = pts.len() - 1;
    for i in 0..pts.len() {
        let (xi, yi) = pts[i];
        let (xj, yj) = pts[j];
        if (yi > p.1) != (yj > p.1) && p.0 < (xj - xi) * (p.1 - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// Category silhouettes in normalized box coordinates `u, v` in [-1, 1].
fn category_shape(category: u32, u: f64, v: f64) -> bool {
    match category % 10 {
        0 => true,
        1 => u * u + v * v <= 1.0,
        2 => v >= 2.0 * u.abs() - 1.0,
        3 => u.abs() + v.abs() <= 1.0,
        4 => u.abs() <= 0.35 || v.abs() <= 0.35,
        5 => {
            let r2 = u * u + v * v;
            (0.2..=1.0).contains(&r2)
        }
        6 => u.abs() <= 1.0 - 0.5 * v.abs(),
        7 => {
            let (du, dv) = ((u.abs() - 0.6).max(0.0), (v.abs() - 0.6).max(0.0));
            du * du + dv * dv <= 0.16
        }
        8 => u <= -0.2 || v >= 0.2,
        _ => v <= -0.3 || u.abs() <= 0.3,
    }
}

fn category_color(category: u32) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 10] = [
        [200.0, 40.0, 40.0],
        [40.0, 80.0, 200.0],
        [40.0, 160.0, 70.0],
        [130.0, 60.0, 170.0],
        [30.0, 170.0, 180.0],
        [90.0, 90.0, 100.0],
        [220.0, 100.0, 160.0],
        [20.0, 40.0, 90.0],
        [120.0, 190.0, 60.0],
        [235.0, 235.0, 235.0],
    ];
    PALETTE[category as usize % 10]
}

fn shade(c: [f64; 3], depth: f64) -> [f64; 3] {
    let k = 0.55 + 0.5 * depth;
    [c[0] * k, c[1] * k, c[2] * k]
}

fn render(
    config: &SceneConfig,
    rng: &mut ChaCha8Rng,
    scene_index: u64,
    hands: Vec<HandPlan>,
    objects: Vec<ObjectPlan>,
    w: f64,
    h: f64,
) -> RenderedScene {
    let (wu, hu) = (config.width as usize, config.height as usize);
    let desk: [f64; 3] = {
        let base = [[150.0, 150.0, 145.0], [120.0, 130.0, 145.0], [140.0, 120.0, 100.0]][rng.gen_range(0..3)];
        let j = rng.gen_range(-15.0..15.0);
        [base[0] + j, base[1] + j, base[2] + j]
    };
    let stripe_period = rng.gen_range(9.0..20.0);
    let mut canvas = Canvas {
        w: wu,
        h: hu,
        rgb: vec![[0.0; 3]; wu * hu],
        depth: vec![0.0; wu * hu],
        mask: vec![0; wu * hu],
    };
    for y in 0..hu {
        let d = 0.1 + 0.35 * (y as f64 + 0.5) / h;
        for x in 0..wu {
            let grain = if ((x as f64 + 0.7 * y as f64) / stripe_period).floor() as i64 % 2 == 0 { 6.0 } else { -6.0 };
            let c = [desk[0] + grain, desk[1] + grain, desk[2] + grain];
            canvas.paint(x, y, shade(c, d), d, 0);
        }
    }

    // Occlusion order: objects back to front in a sampled order, hands above.
    let n_obj = objects.len();
    let mut order: Vec<usize> = (0..n_obj).collect();
    order.shuffle(rng);
    let mut object_depth = vec![0.0; n_obj];
    for (rank, &oi) in order.iter().enumerate() {
        object_depth[oi] = 0.5 + 0.2 * (rank as f64 + 0.5) / n_obj as f64;
    }
    let hand_ids_base = n_obj as u64;
    for &oi in &order {
        let o = &objects[oi];
        let base = category_color(o.category);
        let base = [base[0] + 12.0 * o.tint[0], base[1] + 12.0 * o.tint[1], base[2] + 12.0 * o.tint[2]];
        let d = object_depth[oi];
        let b = o.bbox;
        let cat = o.category;
        canvas.fill(
            b,
            |x, y| {
                let u = 2.0 * (x - b.x_min) / b.width() - 1.0;
                let v = 2.0 * (y - b.y_min) / b.height() - 1.0;
                category_shape(cat, u, v)
            },
            |x, _y| {
                let stripe = cat % 3 == 0 && (((x - b.x_min) / 3.0).floor() as i64) % 2 == 0;
                let k = if stripe { 0.7 } else { 1.0 };
                shade([base[0] * k, base[1] * k, base[2] * k], d)
            },
            d,
            oi as u16 + 1,
        );
    }

    let n_h = hands.len();
    for (hi, hp) in hands.iter().enumerate() {
        let d = 0.8 + 0.12 * (hi as f64 + 0.5) / n_h as f64;
        let id = (hand_ids_base + hi as u64) as u16 + 1;
        let color = if hp.glove {
            let j = rng.gen_range(-12.0..12.0);
            shade([GLOVE_BASE[0] + j, GLOVE_BASE[1] + j, GLOVE_BASE[2] + j * 0.5], d)
        } else {
            shade(hp.skin, d)
        };
        let kp = &hp.keypoints;
        let (a, b, back) = wrist_geometry(kp, hp.scale);
        if hp.glove {
            let dd = 0.06 * hp.scale;
            let shift = |p: (f64, f64)| (p.0 + back.0 * dd, p.1 + back.1 * dd);
            canvas.capsule(shift(a), shift(b), 0.05 * hp.scale, shade(CUFF, d), d, id);
        }
        let palm = [a, kp[1], kp[5], kp[9], kp[13], kp[17], b];
        canvas.polygon(&palm, color, d, id);
        for finger in 0..5 {
            let chain: Vec<usize> = if finger == 0 { vec![0, 1, 2, 3, 4] } else { (0..4).map(|j| 1 + 4 * finger + j).collect() };
            for pair in chain.windows(2) {
                let r = finger_radius(pair[1], hp.scale);
                canvas.capsule(kp[pair[0]], kp[pair[1]], r, color, d, id);
            }
        }
    }

    // Global photometric jitter and sensor noise.
    let jitter = config.color_jitter;
    let gain = 1.0 + jitter * rng.gen_range(-0.25..0.25);
    let bias = jitter * rng.gen_range(-20.0..20.0);
    let mix = jitter * rng.gen_range(-0.3..0.3);
    let noise = Normal::new(0.0, config.pixel_noise.max(1e-12)).expect("valid std");
    let mut rgb = RgbImage::new(config.width, config.height);
    for (i, px) in rgb.pixels_mut().enumerate() {
        let c = canvas.rgb[i];
        // Channel rotation approximates a hue shift.
        let c = [
            (1.0 - mix.abs()) * c[0] + mix.abs() * if mix > 0.0 { c[1] } else { c[2] },
            (1.0 - mix.abs()) * c[1] + mix.abs() * if mix > 0.0 { c[2] } else { c[0] },
            (1.0 - mix.abs()) * c[2] + mix.abs() * if mix > 0.0 { c[0] } else { c[1] },
        ];
        let mut out = [0u8; 3];
        for ch in 0..3 {
            let n = if config.pixel_noise > 0.0 { noise.sample(rng) } else { 0.0 };
            out[ch] = (c[ch] * gain + bias + n).round().clamp(0.0, 255.0) as u8;
        }
        *px = Rgb(out);
    }
    let mut depth = Gray16Image::new(config.width, config.height);
    let mut mask = Gray16Image::new(config.width, config.height);
    for (i, (dp, mp)) in depth.pixels_mut().zip(mask.pixels_mut()).enumerate() {
        *dp = Luma([(65535.0 * canvas.depth[i]).round() as u16]);
        *mp = Luma([canvas.mask[i]]);
    }

    let image_id = format!("{scene_index:06}");
    let object_anns: Vec<ObjectAnnotation> = objects
        .iter()
        .enumerate()
        .map(|(i, o)| ObjectAnnotation {
            id: i as u64,
            bbox: o.bbox,
            category_id: o.category,
            active: hands.iter().any(|hp| hp.object == Some(i)),
        })
        .collect();
    let hand_anns: Vec<HandAnnotation> = hands
        .iter()
        .enumerate()
        .map(|(hi, hp)| {
            let keypoints = hp
                .keypoints
                .iter()
                .map(|&(x, y)| Keypoint { x, y, visible: true })
                .collect();
            let (offset, active_object_id) = match hp.object {
                Some(oi) if hp.contact => (Some(derive_offset(&hp.bbox, &objects[oi].bbox, w, h)), Some(oi as u64)),
                _ => (None, None),
            };
            HandAnnotation {
                id: hand_ids_base + hi as u64,
                bbox: hp.bbox,
                side: hp.side,
                contact: if hp.contact { ContactState::Contact } else { ContactState::NoContact },
                glove: if hp.glove { GloveStatus::Glove } else { GloveStatus::NoGlove },
                keypoints,
                offset,
                active_object_id,
            }
        })
        .collect();
    RenderedScene {
        record: ImageRecord {
            image_id: image_id.clone(),
            width: config.width,
            height: config.height,
            rgb_path: format!("rgb/{image_id}.png"),
            depth_path: Some(format!("depth/{image_id}.png")),
            mask_path: Some(format!("mask/{image_id}.png")),
            hands: hand_anns,
            objects: object_anns,
        },
        rgb,
        depth,
        instance_mask: mask,
    }
}

/// Generates scenes `range` of the config's stream in memory, in index order.
pub fn generate_scenes(config: &SceneConfig, range: std::ops::Range<u64>) -> Result<Vec<RenderedScene>> {
    config.validate()?;
    range
        .into_par_iter()
        .map(|i| generate_scene(config, i))
        .collect()
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

/// Writes `train.json`, `val.json`, `test.json` plus `rgb/`, `depth/`,
/// `mask/` PNG assets under `out_dir`. Scene indices run consecutively across
/// the three splits so image ids are unique.
pub fn generate_dataset(
    config: &SceneConfig,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    out_dir: &Path,
) -> Result<Vec<Dataset>> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut start = 0u64;
    let mut out = Vec::new();
    for (name, n) in SPLIT_NAMES.iter().zip([n_train, n_val, n_test]) {
        let range = start..start + n as u64;
        start += n as u64;
        let records: Vec<ImageRecord> = range
            .into_par_iter()
            .map(|i| {
                let scene = generate_scene(config, i)?;
                write_scene_assets(&scene, out_dir)?;
                Ok(scene.record)
            })
            .collect::<Result<_>>()?;
        let dataset = Dataset {
            categories: config.categories(),
            images: records,
            split: Some(name.to_string()),
        };
        write_dataset(out_dir.join(format!("{name}.json")), &dataset)?;
        out.push(dataset);
    }
    Ok(out)
}

pub fn write_scene_assets(scene: &RenderedScene, out_dir: &Path) -> Result<()> {
    let r = &scene.record;
    write_png(&out_dir.join(&r.rgb_path), &scene.rgb)?;
    if let Some(p) = &r.depth_path {
        write_png(&out_dir.join(p), &scene.depth)?;
    }
    if let Some(p) = &r.mask_path {
        write_png(&out_dir.join(p), &scene.instance_mask)?;
    }
    Ok(())
}

/// Hue in degrees of an RGB triple.
pub fn hue_degrees(c: [f64; 3]) -> f64 {
    let (r, g, b) = (c[0], c[1], c[2]);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    if max == min {
        return 0.0;
    }
    let d = max - min;
    let h = if max == r {
        ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        (b - r) / d + 2.0
    } else {
        (r - g) / d + 4.0
    };
    60.0 * h
}

/// Mean color of the pixels carrying instance id `id` (0-based).
pub fn instance_mean_color(scene: &RenderedScene, id: u64) -> Option<[f64; 3]> {
    let mut sum = [0.0; 3];
    let mut n = 0usize;
    for (px, m) in scene.rgb.pixels().zip(scene.instance_mask.pixels()) {
        if m.0[0] as u64 == id + 1 {
            for c in 0..3 {
                sum[c] += px.0[c] as f64;
            }
            n += 1;
        }
    }
    (n > 0).then(|| [sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotations::{compute_stats, parse_dataset, project_interaction_point, validate_dataset};

    fn cfg() -> SceneConfig {
        SceneConfig { seed: 7, ..Default::default() }
    }

    #[test]
    fn no_hands_means_no_ehois() {
        let c = SceneConfig { n_hands_range: [0, 0], ..cfg() };
        for i in 0..5 {
            let s = generate_scene(&c, i).unwrap();
            assert!(s.record.hands.is_empty());
            assert!(!s.record.objects.is_empty());
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_scene(&cfg(), 3).unwrap();
        let b = generate_scene(&cfg(), 3).unwrap();
        assert_eq!(a, b);
        let c = generate_scene(&cfg(), 4).unwrap();
        assert_ne!(a.rgb, c.rgb);
    }

    #[test]
    fn forced_contact_round_trips() {
        let c = SceneConfig { n_hands_range: [1, 1], contact_probability: 1.0, ..cfg() };
        for i in 0..20 {
            let s = generate_scene(&c, i).unwrap();
            let r = &s.record;
            assert_eq!(r.hands.len(), 1);
            let hand = &r.hands[0];
            assert_eq!(hand.contact, ContactState::Contact);
            let obj = r.object(hand.active_object_id.unwrap()).unwrap();
            let (x, y) = project_interaction_point(&hand.bbox, &hand.offset.unwrap(), 96.0, 96.0);
            let (ox, oy) = obj.bbox.center();
            assert!((x - ox).abs() < 1e-6 && (y - oy).abs() < 1e-6);
        }
    }

    #[test]
    fn scene_invariants() {
        let c = cfg();
        for i in 0..60 {
            let s = generate_scene(&c, i).unwrap();
            let mut ds = Dataset { categories: c.categories(), images: vec![s.record.clone()], split: None };
            assert!(validate_dataset(&mut ds).unwrap().is_empty(), "scene {i}");
            let r = &s.record;
            let ids = r.objects.iter().map(|o| o.id).chain(r.hands.iter().map(|h| h.id));
            for id in ids {
                assert!(s.instance_mask.pixels().any(|m| m.0[0] as u64 == id + 1), "scene {i} instance {id} invisible");
            }
            for hand in &r.hands {
                let grown = hand.bbox.dilate(0.1);
                assert!(hand.keypoints.iter().all(|k| grown.contains(k.x, k.y)));
                if let Some(oid) = hand.active_object_id {
                    let ob = r.object(oid).unwrap().bbox;
                    assert!(ob.contains(hand.keypoints[4].x, hand.keypoints[4].y));
                    assert!(ob.contains(hand.keypoints[8].x, hand.keypoints[8].y));
                }
            }
        }
    }

    #[test]
    fn glove_hue_separates() {
        let c = cfg();
        let (mut glove, mut bare) = (vec![], vec![]);
        for i in 0..40 {
            let s = generate_scene(&c, i).unwrap();
            for hand in &s.record.hands {
                let hue = hue_degrees(instance_mean_color(&s, hand.id).unwrap());
                match hand.glove {
                    GloveStatus::Glove => glove.push(hue),
                    GloveStatus::NoGlove => bare.push(hue),
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(!glove.is_empty() && !bare.is_empty());
        assert!(mean(&glove) - mean(&bare) > 15.0, "{} vs {}", mean(&glove), mean(&bare));
    }

    #[test]
    fn depth_bands_follow_occlusion_order() {
        let c = cfg();
        for i in 0..20 {
            let s = generate_scene(&c, i).unwrap();
            let r = &s.record;
            let n = r.objects.len() + r.hands.len();
            let mut vals: Vec<std::collections::BTreeSet<u16>> = vec![Default::default(); n];
            for (d, m) in s.depth.pixels().zip(s.instance_mask.pixels()) {
                if m.0[0] > 0 {
                    vals[m.0[0] as usize - 1].insert(d.0[0]);
                }
            }
            for v in &vals {
                assert_eq!(v.len(), 1, "constant band per instance");
            }
            let obj_max = r.objects.iter().map(|o| *vals[o.id as usize].iter().next().unwrap()).max();
            let hand_min = r.hands.iter().map(|h| *vals[h.id as usize].iter().next().unwrap()).min();
            if let (Some(o), Some(h)) = (obj_max, hand_min) {
                assert!(h > o);
            }
        }
    }

    #[test]
    fn empty_and_small_dataset_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let sets = generate_dataset(&cfg(), 0, 0, 0, dir.path()).unwrap();
        assert_eq!(sets.len(), 3);
        for name in SPLIT_NAMES {
            let (ds, w) = parse_dataset(dir.path().join(format!("{name}.json"))).unwrap();
            assert!(ds.images.is_empty() && w.is_empty());
        }
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&cfg(), 100, 20, 10, dir.path()).unwrap();
        let mut parsed = vec![];
        for name in SPLIT_NAMES {
            let (ds, w) = parse_dataset(dir.path().join(format!("{name}.json"))).unwrap();
            assert!(w.is_empty());
            parsed.push(ds);
        }
        let stats = compute_stats(&parsed, true);
        assert_eq!(stats.total.n_images, 130);
        assert!((35.0..=65.0).contains(&stats.total.glove_fraction), "{}", stats.total.glove_fraction);
        assert_eq!(stats.total.n_left + stats.total.n_right, stats.total.n_hands);
        let rec = &parsed[0].images[0];
        let rgb = crate::annotations::read_rgb(&dir.path().join(&rec.rgb_path)).unwrap();
        assert_eq!(rgb.dimensions(), (96, 96));
    }

    #[test]
    fn invalid_configs() {
        assert!(SceneConfig { glove_probability: 1.5, ..cfg() }.validate().is_err());
        assert!(SceneConfig { width: 32, ..cfg() }.validate().is_err());
        assert!(SceneConfig { n_hands_range: [0, 3], ..cfg() }.validate().is_err());
        assert!(SceneConfig { n_objects_range: [3, 1], ..cfg() }.validate().is_err());
    }
}
