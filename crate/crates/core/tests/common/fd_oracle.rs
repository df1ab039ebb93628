#![allow(dead_code)]
//! Central finite differences over the raw loss inputs.

use ehoi::net::loss::{compute_loss, ImageGrads, ImageOutputs, ImageTargets, LossConfig, LossWeights};

/// Every scalar of the outputs, in a fixed order.
pub fn scalars_mut(outs: &mut [ImageOutputs]) -> Vec<&mut f64> {
    let mut v: Vec<&mut f64> = Vec::new();
    for o in outs.iter_mut() {
        for h in o.hands.iter_mut() {
            v.extend(h.side.iter_mut());
            v.extend(h.state.iter_mut());
            v.extend(h.glove.iter_mut());
            v.extend(h.offset.iter_mut());
            v.extend(h.mm_state.iter_mut());
            v.extend(h.kpt_logits.iter_mut());
            if let Some(a) = h.fusion_logit.as_mut() {
                v.push(a);
            }
        }
        v.extend(o.depth.iter_mut());
        if let Some(d) = o.det.as_mut() {
            v.extend(d.heat_logits.iter_mut());
            v.extend(d.reg.iter_mut());
        }
    }
    v
}

/// Analytic gradients in the order of [`scalars_mut`].
pub fn flat_grads(grads: &[ImageGrads], outs: &[ImageOutputs]) -> Vec<f64> {
    let mut v = Vec::new();
    for (g, o) in grads.iter().zip(outs) {
        for (hg, ho) in g.hands.iter().zip(&o.hands) {
            v.extend_from_slice(&hg.side);
            v.extend_from_slice(&hg.state);
            v.extend_from_slice(&hg.glove);
            v.extend_from_slice(&hg.offset);
            v.extend_from_slice(&hg.mm_state);
            v.extend_from_slice(&hg.kpt_logits);
            if ho.fusion_logit.is_some() {
                v.push(hg.fusion_logit);
            }
        }
        v.extend_from_slice(&g.depth);
        if let Some(d) = &g.det {
            v.extend_from_slice(&d.heat_logits);
            v.extend_from_slice(&d.reg);
        }
    }
    v
}

pub fn one_hot(component: usize) -> LossWeights {
    let mut w = [0.0; 7];
    w[component] = 1.0;
    LossWeights { backbone: w[0], depth: w[1], side: w[2], contact: w[3], offset: w[4], kpt: w[5], glove: w[6] }
}

/// Norm-relative error between analytic and central-difference gradients of
/// one weighted loss.
pub fn gradient_error(outs: &[ImageOutputs], tgts: &[ImageTargets], weights: LossWeights, step: f64) -> f64 {
    let cfg = LossConfig { weights, ..LossConfig::default() };
    let analytic = flat_grads(&compute_loss(outs, tgts, &cfg).unwrap().grads, outs);
    let mut work = outs.to_vec();
    let n = scalars_mut(&mut work).len();
    assert_eq!(n, analytic.len());
    let mut numeric = vec![0.0; n];
    for (i, g) in numeric.iter_mut().enumerate() {
        let orig = *scalars_mut(&mut work)[i];
        *scalars_mut(&mut work)[i] = orig + step;
        let up = compute_loss(&work, tgts, &cfg).unwrap().breakdown.l_total;
        *scalars_mut(&mut work)[i] = orig - step;
        let down = compute_loss(&work, tgts, &cfg).unwrap().breakdown.l_total;
        *scalars_mut(&mut work)[i] = orig;
        *g = (up - down) / (2.0 * step);
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
