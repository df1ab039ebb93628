//! Training losses over raw head outputs, each with an analytic gradient.
//!
//! Everything here is f64 and independent of the layer engine, so the
//! gradients can be checked against finite differences directly.

use serde::{Deserialize, Serialize};

use crate::annotations::{ContactState, GloveStatus, HandSide};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_backbone: f64,
    pub l_depth: f64,
    pub l_side: f64,
    pub l_contact: f64,
    pub l_offset: f64,
    pub l_kpt: f64,
    pub l_glove: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub fn components(&self) -> [f64; 7] {
        [self.l_backbone, self.l_depth, self.l_side, self.l_contact, self.l_offset, self.l_kpt, self.l_glove]
    }

    fn finish(mut self) -> Self {
        let c = self.components();
        self.l_total = c[0] + c[1] + c[2] + c[3] + c[4] + c[5] + c[6];
        self
    }

    /// Running mean over batches, for epoch summaries.
    pub fn mean_of(items: &[LossBreakdown]) -> LossBreakdown {
        if items.is_empty() {
            return LossBreakdown::default();
        }
        let n = items.len() as f64;
        let mut acc = [0.0; 7];
        for it in items {
            for (a, c) in acc.iter_mut().zip(it.components()) {
                *a += c;
            }
        }
        LossBreakdown {
            l_backbone: acc[0] / n,
            l_depth: acc[1] / n,
            l_side: acc[2] / n,
            l_contact: acc[3] / n,
            l_offset: acc[4] / n,
            l_kpt: acc[5] / n,
            l_glove: acc[6] / n,
            l_total: 0.0,
        }
        .finish()
    }
}

/// Per-component multipliers; all 1 by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub backbone: f64,
    pub depth: f64,
    pub side: f64,
    pub contact: f64,
    pub offset: f64,
    pub kpt: f64,
    pub glove: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { backbone: 1.0, depth: 1.0, side: 1.0, contact: 1.0, offset: 1.0, kpt: 1.0, glove: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Transition point of the smooth-L1 offset loss.
    pub offset_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { weights: LossWeights::default(), offset_beta: 0.1 }
    }
}

/// Raw outputs for one hand.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HandOutputs {
    pub side: [f64; 2],
    pub state: [f64; 2],
    pub glove: [f64; 2],
    pub offset: [f64; 3],
    pub mm_state: [f64; 2],
    /// Keypoint logits, 21 channels of `k x k`.
    pub kpt_logits: Vec<f64>,
    /// Mixing logit of the learned late fusion, when enabled.
    pub fusion_logit: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetOutputs {
    /// Center heatmap logits, `classes x h x w`.
    pub heat_logits: Vec<f64>,
    /// Box regression, `4 x h x w`: sub-cell offset x/y, log width/height.
    pub reg: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageOutputs {
    pub hands: Vec<HandOutputs>,
    /// Predicted inverse depth in [0, 1] at input resolution.
    pub depth: Vec<f64>,
    pub det: Option<DetOutputs>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandTargets {
    pub side: HandSide,
    pub contact: ContactState,
    pub glove: GloveStatus,
    /// Present for contact hands only.
    pub offset: Option<[f64; 3]>,
    pub kpt_heatmaps: Vec<f64>,
    pub kpt_visible: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetTargets {
    pub heat: Vec<f64>,
    pub reg: Vec<f64>,
    /// Cells carrying a box center, `h x w`.
    pub positive: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageTargets {
    pub hands: Vec<HandTargets>,
    pub depth: Option<Vec<f64>>,
    pub det: Option<DetTargets>,
}

/// Gradients with the same layout as [`HandOutputs`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HandGrads {
    pub side: [f64; 2],
    pub state: [f64; 2],
    pub glove: [f64; 2],
    pub offset: [f64; 3],
    pub mm_state: [f64; 2],
    pub kpt_logits: Vec<f64>,
    pub fusion_logit: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageGrads {
    pub hands: Vec<HandGrads>,
    pub depth: Vec<f64>,
    pub det: Option<DetOutputs>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub grads: Vec<ImageGrads>,
}

pub fn softmax2(l: &[f64; 2]) -> [f64; 2] {
    let m = l[0].max(l[1]);
    let e = [(l[0] - m).exp(), (l[1] - m).exp()];
    let s = e[0] + e[1];
    [e[0] / s, e[1] / s]
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Two-class cross-entropy and its gradient with respect to the logits.
pub fn cross_entropy2(l: &[f64; 2], target: usize) -> (f64, [f64; 2]) {
    let m = l[0].max(l[1]);
    let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
    let p = softmax2(l);
    let mut g = p;
    g[target] -= 1.0;
    (lse - l[target], g)
}

/// Binary cross-entropy with logits minus the target entropy, so it is zero
/// exactly when the predicted probability equals the target.
pub fn binary_kl_with_logits(x: f64, t: f64) -> (f64, f64) {
    let bce = x.max(0.0) - x * t + (-x.abs()).exp().ln_1p();
    let ent = |p: f64| if p <= 0.0 { 0.0 } else { -p * p.ln() };
    let h = ent(t) + ent(1.0 - t);
    ((bce - h).max(0.0), sigmoid(x) - t)
}

pub fn smooth_l1(d: f64, beta: f64) -> (f64, f64) {
    if d.abs() < beta {
        (0.5 * d * d / beta, d / beta)
    } else {
        (d.abs() - 0.5 * beta, d.signum())
    }
}

/// Sum of the seven component losses, each normalized over the whole batch.
pub fn compute_loss(outputs: &[ImageOutputs], targets: &[ImageTargets], config: &LossConfig) -> Result<LossOutput> {
    if outputs.len() != targets.len() {
        return Err(Error::ShapeMismatch(format!("{} outputs vs {} targets", outputs.len(), targets.len())));
    }
    let w = &config.weights;
    let mut n_hands = 0usize;
    let mut n_offset = 0usize;
    let mut n_kpt = 0usize;
    let mut n_depth = 0usize;
    let mut n_heat = 0usize;
    let mut n_reg = 0usize;
    for (o, t) in outputs.iter().zip(targets) {
        if o.hands.len() != t.hands.len() {
            return Err(Error::ShapeMismatch(format!("{} hand outputs vs {} hand targets", o.hands.len(), t.hands.len())));
        }
        n_hands += t.hands.len();
        for (ho, ht) in o.hands.iter().zip(&t.hands) {
            n_offset += ht.offset.is_some() as usize;
            if ho.kpt_logits.len() != ht.kpt_heatmaps.len() || ht.kpt_visible.is_empty() || ho.kpt_logits.len() % ht.kpt_visible.len() != 0 {
                return Err(Error::ShapeMismatch("keypoint heatmap size".into()));
            }
            let per = ho.kpt_logits.len() / ht.kpt_visible.len();
            n_kpt += ht.kpt_visible.iter().filter(|&&v| v).count() * per;
        }
        if let Some(d) = &t.depth {
            if d.len() != o.depth.len() {
                return Err(Error::ShapeMismatch("depth map size".into()));
            }
            n_depth += d.len();
        }
        match (&o.det, &t.det) {
            (Some(od), Some(td)) => {
                if od.heat_logits.len() != td.heat.len() || od.reg.len() != td.reg.len() || td.reg.len() != 4 * td.positive.len() {
                    return Err(Error::ShapeMismatch("detection map size".into()));
                }
                n_heat += td.heat.len();
                n_reg += 4 * td.positive.iter().filter(|&&p| p).count();
            }
            (None, Some(_)) => return Err(Error::ShapeMismatch("detection targets without detection outputs".into())),
            _ => {}
        }
    }
    let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
    let (s_hand, s_off, s_kpt, s_depth, s_heat, s_reg) = (inv(n_hands), inv(n_offset), inv(n_kpt), inv(n_depth), inv(n_heat), inv(n_reg));

    let mut b = LossBreakdown::default();
    let mut grads = Vec::with_capacity(outputs.len());
    for (o, t) in outputs.iter().zip(targets) {
        let mut ig = ImageGrads { hands: Vec::with_capacity(o.hands.len()), depth: vec![0.0; o.depth.len()], det: None };
        for (ho, ht) in o.hands.iter().zip(&t.hands) {
            let mut hg = HandGrads { kpt_logits: vec![0.0; ho.kpt_logits.len()], ..Default::default() };

            let (l, g) = cross_entropy2(&ho.side, ht.side.index());
            b.l_side += w.side * s_hand * l;
            hg.side = g.map(|v| w.side * s_hand * v);

            let (l, g) = cross_entropy2(&ho.glove, ht.glove.index());
            b.l_glove += w.glove * s_hand * l;
            hg.glove = g.map(|v| w.glove * s_hand * v);

            let c = ht.contact.index();
            let (la, ga) = cross_entropy2(&ho.state, c);
            let (lm, gm) = cross_entropy2(&ho.mm_state, c);
            b.l_contact += w.contact * s_hand * (la + lm);
            hg.state = ga.map(|v| w.contact * s_hand * v);
            hg.mm_state = gm.map(|v| w.contact * s_hand * v);
            if let Some(a) = ho.fusion_logit {
                // Learned mixing: BCE on the fused probability.
                let pa = softmax2(&ho.state)[1];
                let pm = softmax2(&ho.mm_state)[1];
                let s = sigmoid(a);
                let p = (s * pa + (1.0 - s) * pm).clamp(1e-12, 1.0 - 1e-12);
                let y = c as f64;
                let l = -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
                let dp = -(y / p) + (1.0 - y) / (1.0 - p);
                let k = w.contact * s_hand;
                b.l_contact += k * l;
                hg.fusion_logit = k * dp * (pa - pm) * s * (1.0 - s);
                // d pa / d logits = pa (1 - pa) * (-1, 1)
                let da = k * dp * s * pa * (1.0 - pa);
                let dm = k * dp * (1.0 - s) * pm * (1.0 - pm);
                hg.state[0] -= da;
                hg.state[1] += da;
                hg.mm_state[0] -= dm;
                hg.mm_state[1] += dm;
            }

            if let Some(target) = ht.offset {
                for i in 0..3 {
                    let (l, g) = smooth_l1(ho.offset[i] - target[i], config.offset_beta);
                    b.l_offset += w.offset * s_off * l;
                    hg.offset[i] = w.offset * s_off * g;
                }
            }

            let per = ho.kpt_logits.len() / ht.kpt_visible.len();
            for (ch, &vis) in ht.kpt_visible.iter().enumerate() {
                if !vis {
                    continue;
                }
                for i in ch * per..(ch + 1) * per {
                    let (l, g) = binary_kl_with_logits(ho.kpt_logits[i], ht.kpt_heatmaps[i]);
                    b.l_kpt += w.kpt * s_kpt * l;
                    hg.kpt_logits[i] = w.kpt * s_kpt * g;
                }
            }
            ig.hands.push(hg);
        }

        if let Some(d) = &t.depth {
            for (i, (&p, &y)) in o.depth.iter().zip(d).enumerate() {
                let diff = p - y;
                b.l_depth += w.depth * s_depth * diff.abs();
                ig.depth[i] = w.depth * s_depth * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
            }
        }

        if let (Some(od), Some(td)) = (&o.det, &t.det) {
            let mut dg = DetOutputs { heat_logits: vec![0.0; od.heat_logits.len()], reg: vec![0.0; od.reg.len()] };
            for i in 0..od.heat_logits.len() {
                let (l, g) = binary_kl_with_logits(od.heat_logits[i], td.heat[i]);
                b.l_backbone += w.backbone * s_heat * l;
                dg.heat_logits[i] = w.backbone * s_heat * g;
            }
            let cells = td.positive.len();
            for (cell, &pos) in td.positive.iter().enumerate() {
                if !pos {
                    continue;
                }
                for ch in 0..4 {
                    let i = ch * cells + cell;
                    let diff = od.reg[i] - td.reg[i];
                    b.l_backbone += w.backbone * s_reg * diff.abs();
                    dg.reg[i] = w.backbone * s_reg * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
                }
            }
            ig.det = Some(dg);
        }
        grads.push(ig);
    }
    Ok(LossOutput { breakdown: b.finish(), grads })
}


/// Random small outputs and targets, used by the gradient checks.
#[doc(hidden)]
pub fn random_instance(rng: &mut impl rand::Rng, learned_fusion: bool) -> (Vec<ImageOutputs>, Vec<ImageTargets>) {
    let k = 3;
    let n_kpt = 21;
    let (dh, dw) = (4, 5);
    let (gh, gw, classes) = (3, 3, 3);
    let n_images = rng.gen_range(1..=3);
    let mut outs = Vec::new();
    let mut tgts = Vec::new();
    for _ in 0..n_images {
        let n_hands = rng.gen_range(0..=3);
        let mut ho = Vec::new();
        let mut ht = Vec::new();
        for _ in 0..n_hands {
            let mut r2 = || [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            let side = r2();
            let state = r2();
            let glove = r2();
            let mm = r2();
            ho.push(HandOutputs {
                side,
                state,
                glove,
                offset: [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-0.5..0.8)],
                mm_state: mm,
                kpt_logits: (0..n_kpt * k * k).map(|_| rng.gen_range(-4.0..4.0)).collect(),
                fusion_logit: learned_fusion.then(|| rng.gen_range(-2.0..2.0)),
            });
            let contact = rng.gen_bool(0.5);
            ht.push(HandTargets {
                side: HandSide::from_index(rng.gen_range(0..2)),
                contact: ContactState::from_index(contact as usize),
                glove: GloveStatus::from_index(rng.gen_range(0..2)),
                offset: contact.then(|| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..0.5)]),
                kpt_heatmaps: (0..n_kpt * k * k).map(|_| rng.gen_range(0.0..1.0)).collect(),
                kpt_visible: (0..n_kpt).map(|_| rng.gen_bool(0.8)).collect(),
            });
        }
        let depth_t: Vec<f64> = (0..dh * dw).map(|_| rng.gen_range(0.0..1.0)).collect();
        let positive: Vec<bool> = (0..gh * gw).map(|_| rng.gen_bool(0.3)).collect();
        outs.push(ImageOutputs {
            hands: ho,
            depth: (0..dh * dw).map(|_| rng.gen_range(0.0..1.0)).collect(),
            det: Some(DetOutputs {
                heat_logits: (0..classes * gh * gw).map(|_| rng.gen_range(-4.0..4.0)).collect(),
                reg: (0..4 * gh * gw).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            }),
        });
        tgts.push(ImageTargets {
            hands: ht,
            depth: Some(depth_t),
            det: Some(DetTargets {
                heat: (0..classes * gh * gw).map(|_| rng.gen_range(0.0..1.0)).collect(),
                reg: (0..4 * gh * gw).map(|_| rng.gen_range(-2.0..2.0)).collect(),
                positive,
            }),
        });
    }
    // Nudge residuals off the L1 kinks.
    let beta = LossConfig::default().offset_beta;
    let away = |p: &mut f64, y: f64, kinks: &[f64]| {
        for &k in kinks {
            let d = *p - y - k;
            if d.abs() < 0.02 {
                *p += if d >= 0.0 { 0.02 } else { -0.02 };
            }
        }
    };
    for (o, t) in outs.iter_mut().zip(&tgts) {
        for (ho, ht) in o.hands.iter_mut().zip(&t.hands) {
            if let Some(off) = ht.offset {
                for i in 0..3 {
                    away(&mut ho.offset[i], off[i], &[-beta, beta]);
                }
            }
        }
        if let Some(d) = &t.depth {
            for (p, &y) in o.depth.iter_mut().zip(d) {
                away(p, y, &[0.0]);
            }
        }
        if let (Some(od), Some(td)) = (o.det.as_mut(), &t.det) {
            for (p, &y) in od.reg.iter_mut().zip(&td.reg) {
                away(p, y, &[0.0]);
            }
        }
    }
    (outs, tgts)
}
