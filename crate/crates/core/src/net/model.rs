//! Network definition: encoder with feature pyramid, per-hand heads,
//! keypoint, depth, early-fusion and center-heatmap detection branches.

use image::RgbImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::Sample;
use super::layers::*;
use super::loss::{DetOutputs, HandOutputs, HandTargets, ImageGrads, ImageOutputs, ImageTargets};
use crate::annotations::{BBox, HandAnnotation, ImageRecord};
use crate::error::{Error, Result};

pub const HFV_DIM: usize = 1024;
pub const NUM_KPT: usize = crate::annotations::NUM_KEYPOINTS;
/// RGB + mask + depth + heatmaps.
pub const FUSION_CHANNELS: usize = 3 + 1 + 1 + NUM_KPT;
/// Total encoder stride; inputs must be multiples of it.
pub const ENCODER_STRIDE: usize = 16;
const INPUT_CHANNELS: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateFusion {
    #[default]
    Mean,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 3],
    pub feature_dim: usize,
    pub roi_size: usize,
    pub head_hidden: usize,
    pub kpt_roi: usize,
    pub heatmap_size: usize,
    /// Std-dev of keypoint target Gaussians, in heatmap cells.
    pub kpt_sigma: f64,
    pub crop_size: usize,
    pub fusion_pool: usize,
    /// Per-side dilation of the hand box for keypoint and fusion crops.
    pub crop_dilation: f64,
    pub late_fusion: LateFusion,
    pub n_categories: usize,
    pub det_threshold: f64,
    pub max_detections: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            stem_channels: 16,
            stage_channels: [32, 64, 128],
            feature_dim: 64,
            roi_size: 7,
            head_hidden: 64,
            kpt_roi: 16,
            heatmap_size: 32,
            kpt_sigma: 1.5,
            crop_size: 96,
            fusion_pool: 4,
            crop_dilation: 0.1,
            late_fusion: LateFusion::Mean,
            n_categories: 10,
            det_threshold: 0.3,
            max_detections: 20,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("stem_channels", self.stem_channels),
            ("feature_dim", self.feature_dim),
            ("roi_size", self.roi_size),
            ("head_hidden", self.head_hidden),
            ("kpt_roi", self.kpt_roi),
            ("heatmap_size", self.heatmap_size),
            ("crop_size", self.crop_size),
            ("fusion_pool", self.fusion_pool),
            ("max_detections", self.max_detections),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("model.stage_channels", "must be positive"));
        }
        if self.crop_size % self.fusion_pool != 0 || self.crop_size / self.fusion_pool < 4 {
            return Err(Error::config("model.crop_size", "must be a multiple of fusion_pool with at least 4 pooled cells"));
        }
        if !(self.kpt_sigma > 0.0) || !(self.crop_dilation >= 0.0) {
            return Err(Error::config("model.kpt_sigma", "kpt_sigma must be positive and crop_dilation non-negative"));
        }
        if !(0.0..=1.0).contains(&self.det_threshold) {
            return Err(Error::config("model.det_threshold", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn n_det_classes(&self) -> usize {
        1 + self.n_categories
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Head {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Layers {
    /// stem, c1a, c1b, c2a, c2b, c3a, c3b
    pub chain: [Conv2d; 7],
    pub lat1: Conv2d,
    pub lat2: Conv2d,
    pub lat3: Conv2d,
    pub smooth2: Conv2d,
    pub hfv: Linear,
    pub side: Head,
    pub state: Head,
    pub glove: Head,
    pub offset: Head,
    pub kpt1: Conv2d,
    pub kpt2: Conv2d,
    pub kpt3: Conv2d,
    pub depth1: Conv2d,
    pub depth2: Conv2d,
    pub ef1: Conv2d,
    pub ef2: Conv2d,
    pub ef_fc: Linear,
    pub det1: Conv2d,
    pub det_heat: Conv2d,
    pub det_reg: Conv2d,
    pub fusion_logit: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
    pub(crate) l: Layers,
}

impl Model {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::default();
        let rng = &mut rng;
        let c = &config;
        let [s1, s2, s3] = c.stage_channels;
        let d = c.feature_dim;
        let chain = [
            Conv2d::new(&mut p, "backbone.stem", INPUT_CHANNELS, c.stem_channels, 3, 2, rng, Init::He),
            Conv2d::new(&mut p, "backbone.c1a", c.stem_channels, s1, 3, 2, rng, Init::He),
            Conv2d::new(&mut p, "backbone.c1b", s1, s1, 3, 1, rng, Init::He),
            Conv2d::new(&mut p, "backbone.c2a", s1, s2, 3, 2, rng, Init::He),
            Conv2d::new(&mut p, "backbone.c2b", s2, s2, 3, 1, rng, Init::He),
            Conv2d::new(&mut p, "backbone.c3a", s2, s3, 3, 2, rng, Init::He),
            Conv2d::new(&mut p, "backbone.c3b", s3, s3, 3, 1, rng, Init::He),
        ];
        let lat1 = Conv2d::new(&mut p, "fpn.lat1", s1, d, 1, 1, rng, Init::He);
        let lat2 = Conv2d::new(&mut p, "fpn.lat2", s2, d, 1, 1, rng, Init::He);
        let lat3 = Conv2d::new(&mut p, "fpn.lat3", s3, d, 1, 1, rng, Init::He);
        let smooth2 = Conv2d::new(&mut p, "fpn.smooth2", d, d, 3, 1, rng, Init::He);
        let hfv = Linear::new(&mut p, "hfv", d * c.roi_size * c.roi_size, HFV_DIM, rng, Init::He);
        let mut head = |name: &str, out: usize| Head {
            fc1: Linear::new(&mut p, &format!("{name}.fc1"), HFV_DIM, c.head_hidden, rng, Init::He),
            fc2: Linear::new(&mut p, &format!("{name}.fc2"), c.head_hidden, out, rng, Init::Zero),
        };
        let side = head("head.side", 2);
        let state = head("head.state", 2);
        let glove = head("head.glove", 2);
        let offset = head("head.offset", 3);
        let kpt1 = Conv2d::new(&mut p, "kpt.conv1", d, 32, 3, 1, rng, Init::He);
        let kpt2 = Conv2d::new(&mut p, "kpt.conv2", 32, 32, 3, 1, rng, Init::He);
        let kpt3 = Conv2d::new(&mut p, "kpt.out", 32, NUM_KPT, 1, 1, rng, Init::He);
        p.values[kpt3.b].fill(-4.0);
        let depth1 = Conv2d::new(&mut p, "depth.conv1", d, 16, 3, 1, rng, Init::He);
        let depth2 = Conv2d::new(&mut p, "depth.out", 16, 1, 1, 1, rng, Init::He);
        let ef1 = Conv2d::new(&mut p, "fusion.conv1", FUSION_CHANNELS, 32, 3, 2, rng, Init::He);
        let ef2 = Conv2d::new(&mut p, "fusion.conv2", 32, 64, 3, 2, rng, Init::He);
        let ef_fc = Linear::new(&mut p, "fusion.fc", 64, 2, rng, Init::Zero);
        let det1 = Conv2d::new(&mut p, "det.conv1", d, d, 3, 1, rng, Init::He);
        let det_heat = Conv2d::new(&mut p, "det.heat", d, c.n_det_classes(), 1, 1, rng, Init::He);
        // Prior of about 0.1 on every heatmap cell.
        p.values[det_heat.b].fill(-2.2);
        let det_reg = Conv2d::new(&mut p, "det.reg", d, 4, 1, 1, rng, Init::He);
        let fusion_logit = p.add("fusion.late_logit", &[1], vec![0.0]);
        let l = Layers {
            chain,
            lat1,
            lat2,
            lat3,
            smooth2,
            hfv,
            side,
            state,
            glove,
            offset,
            kpt1,
            kpt2,
            kpt3,
            depth1,
            depth2,
            ef1,
            ef2,
            ef_fc,
            det1,
            det_heat,
            det_reg,
            fusion_logit,
        };
        Ok(Model { config, params: p, l })
    }

    pub fn n_parameters(&self) -> usize {
        self.params.n_scalars()
    }
}

/// Encoder input: RGB scaled to [0, 1] plus two coordinate channels.
pub fn input_tensor(rgb: &RgbImage) -> Fm {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let n = w * h;
    let mut x = Fm::zeros(INPUT_CHANNELS, h, w);
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            x.data[c * n + i] = px[c] as f32 / 255.0;
        }
        x.data[3 * n + i] = ((i % w) as f32 + 0.5) / w as f32;
        x.data[4 * n + i] = ((i / w) as f32 + 0.5) / h as f32;
    }
    x
}

/// Multi-scale maps at strides 4, 8 and 16.
#[derive(Clone, Debug, PartialEq)]
pub struct Features {
    pub p1: Fm,
    pub p2: Fm,
    pub p3: Fm,
    pub width: usize,
    pub height: usize,
}

impl Features {
    pub const STRIDES: [usize; 3] = [4, 8, 16];
}

pub(crate) struct BackboneCache {
    input: Fm,
    chain: Vec<(Vec<f32>, Fm)>,
    lat: [Vec<f32>; 3],
    smooth: Vec<f32>,
    q2_hw: (usize, usize),
}

impl Model {
    pub(crate) fn backbone(&self, rgb: &RgbImage) -> Result<(Features, BackboneCache)> {
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        if w == 0 || h == 0 || w % ENCODER_STRIDE != 0 || h % ENCODER_STRIDE != 0 {
            return Err(Error::DimensionMismatch(format!(
                "{w}x{h} input is not a multiple of the encoder stride {ENCODER_STRIDE}; pad the image"
            )));
        }
        let p = &self.params;
        let input = input_tensor(rgb);
        let mut chain = Vec::with_capacity(7);
        let mut cur = input.clone();
        for conv in &self.l.chain {
            let (mut y, cols) = conv.forward(p, &cur);
            relu_inplace(&mut y.data);
            cur = y.clone();
            chain.push((cols, y));
        }
        let (c1, c2, c3) = (&chain[2].1, &chain[4].1, &chain[6].1);
        let (p3, lat3) = self.l.lat3.forward(p, c3);
        let (mut q2, lat2) = self.l.lat2.forward(p, c2);
        q2.add_assign(&upsample2(&p3));
        let (mut p1, lat1) = self.l.lat1.forward(p, c1);
        p1.add_assign(&upsample2(&q2));
        let (p2, smooth) = self.l.smooth2.forward(p, &q2);
        let q2_hw = (q2.h, q2.w);
        let features = Features { p1, p2, p3, width: w, height: h };
        Ok((features, BackboneCache { input, chain, lat: [lat1, lat2, lat3], smooth, q2_hw }))
    }

    /// Multi-scale feature maps for an image whose sides are multiples of 16.
    pub fn extract_features(&self, rgb: &RgbImage) -> Result<Features> {
        Ok(self.backbone(rgb)?.0)
    }

    pub(crate) fn backbone_backward(&self, cache: &BackboneCache, dp1: &Fm, dp2: &Fm, g: &mut Grads) {
        let p = &self.params;
        let l = &self.l;
        let mut dq2 = l.smooth2.backward(p, g, cache.q2_hw, &cache.smooth, dp2, true).unwrap();
        dq2.add_assign(&upsample2_backward(dp1));
        let c1 = &cache.chain[2].1;
        let c2 = &cache.chain[4].1;
        let c3 = &cache.chain[6].1;
        let dc1 = l.lat1.backward(p, g, (c1.h, c1.w), &cache.lat[0], dp1, true).unwrap();
        let dp3 = upsample2_backward(&dq2);
        let dc2 = l.lat2.backward(p, g, (c2.h, c2.w), &cache.lat[1], &dq2, true).unwrap();
        let mut d = l.lat3.backward(p, g, (c3.h, c3.w), &cache.lat[2], &dp3, true).unwrap();
        for i in (0..7).rev() {
            if i == 4 {
                d.add_assign(&dc2);
            } else if i == 2 {
                d.add_assign(&dc1);
            }
            relu_backward(&cache.chain[i].1.data, &mut d.data);
            let in_hw = if i == 0 { (cache.input.h, cache.input.w) } else { (cache.chain[i - 1].1.h, cache.chain[i - 1].1.w) };
            match l.chain[i].backward(p, g, in_hw, &cache.chain[i].0, &d, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

/// Raw logits and regressed offset of the four attribute heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributePrediction {
    pub side_logits: [f64; 2],
    pub state_logits: [f64; 2],
    pub glove_logits: [f64; 2],
    /// `<v_x, v_y, m>` as regressed; see [`AttributePrediction::unit_offset`].
    pub offset: [f64; 3],
}

impl AttributePrediction {
    /// Offset with the direction renormalized to unit length.
    pub fn unit_offset(&self) -> crate::annotations::OffsetVector {
        crate::annotations::OffsetVector::normalized(self.offset[0], self.offset[1], self.offset[2].max(0.0))
    }
}

/// 21 spatially normalized `k x k` maps over the dilated hand crop.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointHeatmaps {
    pub size: usize,
    pub data: Vec<f64>,
    /// Dilated hand box the maps cover.
    pub frame: BBox,
}

impl KeypointHeatmaps {
    pub fn channel(&self, k: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.data[k * n..(k + 1) * n]
    }

    /// Image-space center of heatmap cell `(row, col)`.
    pub fn cell_center(&self, row: usize, col: usize) -> [f64; 2] {
        let k = self.size as f64;
        [
            self.frame.x_min + (col as f64 + 0.5) / k * self.frame.width(),
            self.frame.y_min + (row as f64 + 0.5) / k * self.frame.height(),
        ]
    }

    /// Spatial argmax of every channel mapped to image coordinates.
    pub fn decode(&self) -> Vec<[f64; 2]> {
        (0..NUM_KPT)
            .map(|k| {
                let ch = self.channel(k);
                let mut best = 0;
                for (i, &v) in ch.iter().enumerate() {
                    if v > ch[best] {
                        best = i;
                    }
                }
                self.cell_center(best / self.size, best % self.size)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointPrediction {
    pub heatmaps: KeypointHeatmaps,
    pub coords: Vec<[f64; 2]>,
}

/// Inverse depth in [0, 1] at input resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl DepthMap {
    fn sample(&self, x: f64, y: f64) -> f32 {
        bilinear_clamped(&self.data, self.width, self.height, x, y)
    }
}

/// Bilinear sample at continuous pixel coordinates, pixel centers at `i + 0.5`.
fn bilinear_clamped(data: &[f32], w: usize, h: usize, x: f64, y: f64) -> f32 {
    let fx = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let fy = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (lx, ly) = ((fx - x0 as f64) as f32, (fy - y0 as f64) as f32);
    let top = data[y0 * w + x0] * (1.0 - lx) + data[y0 * w + x1] * lx;
    let bot = data[y1 * w + x0] * (1.0 - lx) + data[y1 * w + x1] * lx;
    top * (1.0 - ly) + bot * ly
}

fn sigmoid32(x: f32) -> f32 {
    super::loss::sigmoid(x as f64) as f32
}

fn to_f64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

fn check_box(b: &BBox) -> Result<()> {
    if !b.is_valid() || b.area() < 1.0 || !b.as_array().iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateBox(b.as_array()));
    }
    Ok(())
}

const ROI_SAMPLING: usize = 2;

pub(crate) struct HeadCache {
    hidden: Vec<f32>,
}

pub(crate) struct HandCache {
    roi: Roi,
    pooled: Vec<f32>,
    hfv: Vec<f32>,
    heads: [HeadCache; 4],
    kroi: Roi,
    k1: (Vec<f32>, Fm),
    k2: (Vec<f32>, Fm),
    k3: Vec<f32>,
}

pub(crate) struct FusionCache {
    pooled_hw: (usize, usize),
    c1: (Vec<f32>, Fm),
    c2: (Vec<f32>, Fm),
    gap: Vec<f32>,
}

impl Model {
    fn head_forward(&self, h: &Head, x: &[f32]) -> (HeadCache, Vec<f32>) {
        let mut hidden = h.fc1.forward(&self.params, x);
        relu_inplace(&mut hidden);
        let out = h.fc2.forward(&self.params, &hidden);
        (HeadCache { hidden }, out)
    }

    fn head_backward(&self, h: &Head, c: &HeadCache, x: &[f32], dy: &[f32], g: &mut Grads) -> Vec<f32> {
        let mut dh = h.fc2.backward(&self.params, g, &c.hidden, dy, true).unwrap();
        relu_backward(&c.hidden, &mut dh);
        h.fc1.backward(&self.params, g, x, &dh, true).unwrap()
    }

    fn hfv_forward(&self, f: &Features, b: &BBox) -> (Roi, Vec<f32>, Vec<f32>) {
        let roi = Roi::from_image_box(b, Features::STRIDES[1] as f64);
        let pooled = roi_align(&f.p2, &roi, self.config.roi_size, ROI_SAMPLING).data;
        let mut hfv = self.l.hfv.forward(&self.params, &pooled);
        relu_inplace(&mut hfv);
        (roi, pooled, hfv)
    }

    /// Fixed-size region pooling on the stride-8 map, projected to the HFV.
    pub fn pool_hand_features(&self, f: &Features, b: &BBox) -> Result<Vec<f32>> {
        check_box(b)?;
        Ok(self.hfv_forward(f, b).2)
    }

    fn attr_heads(&self, hfv: &[f32]) -> ([HeadCache; 4], AttributePrediction) {
        let (cs, side) = self.head_forward(&self.l.side, hfv);
        let (ct, state) = self.head_forward(&self.l.state, hfv);
        let (cg, glove) = self.head_forward(&self.l.glove, hfv);
        let (co, off) = self.head_forward(&self.l.offset, hfv);
        let two = |v: &[f32]| [v[0] as f64, v[1] as f64];
        let pred = AttributePrediction {
            side_logits: two(&side),
            state_logits: two(&state),
            glove_logits: two(&glove),
            offset: [off[0] as f64, off[1] as f64, off[2] as f64],
        };
        ([cs, ct, cg, co], pred)
    }

    /// Runs the four attribute heads over one HFV.
    pub fn predict_attributes(&self, hfv: &[f32]) -> Result<AttributePrediction> {
        if hfv.len() != HFV_DIM {
            return Err(Error::ShapeMismatch(format!("HFV has {} values, expected {HFV_DIM}", hfv.len())));
        }
        Ok(self.attr_heads(hfv).1)
    }

    pub fn crop_frame(&self, b: &BBox) -> BBox {
        b.dilate(self.config.crop_dilation)
    }

    /// Keypoint logits at `heatmap_size`, channel-major.
    fn kpt_forward(&self, f: &Features, b: &BBox) -> (Roi, (Vec<f32>, Fm), (Vec<f32>, Fm), Vec<f32>, Fm) {
        let p = &self.params;
        let kroi = Roi::from_image_box(&self.crop_frame(b), Features::STRIDES[0] as f64);
        let x = roi_align(&f.p1, &kroi, self.config.kpt_roi, ROI_SAMPLING);
        let (mut y1, c1) = self.l.kpt1.forward(p, &x);
        relu_inplace(&mut y1.data);
        let (mut y2, c2) = self.l.kpt2.forward(p, &y1);
        relu_inplace(&mut y2.data);
        let (y3, c3) = self.l.kpt3.forward(p, &y2);
        let k = self.config.heatmap_size;
        let logits = resize_bilinear(&y3, k, k);
        (kroi, (c1, y1), (c2, y2), c3, logits)
    }

    pub(crate) fn heatmaps_from_logits(&self, logits: &Fm, b: &BBox) -> KeypointHeatmaps {
        let n = logits.h * logits.w;
        let mut data = Vec::with_capacity(logits.data.len());
        for c in 0..logits.c {
            let s: Vec<f64> = logits.plane(c).iter().map(|&v| super::loss::sigmoid(v as f64)).collect();
            let total: f64 = s.iter().sum();
            data.extend(s.iter().map(|v| if total > 0.0 { v / total } else { 1.0 / n as f64 }));
        }
        KeypointHeatmaps { size: logits.h, data, frame: self.crop_frame(b) }
    }

    pub fn predict_keypoints(&self, f: &Features, b: &BBox) -> Result<KeypointPrediction> {
        check_box(b)?;
        let logits = self.kpt_forward(f, b).4;
        let heatmaps = self.heatmaps_from_logits(&logits, b);
        let coords = heatmaps.decode();
        Ok(KeypointPrediction { heatmaps, coords })
    }

    fn depth_forward(&self, f: &Features) -> ((Vec<f32>, Fm), Vec<f32>, Fm) {
        let p = &self.params;
        let (mut y1, c1) = self.l.depth1.forward(p, &f.p1);
        relu_inplace(&mut y1.data);
        let (y2, c2) = self.l.depth2.forward(p, &y1);
        let mut up = resize_bilinear(&y2, f.height, f.width);
        up.data.iter_mut().for_each(|v| *v = sigmoid32(*v));
        ((c1, y1), c2, up)
    }

    pub fn predict_depth(&self, f: &Features) -> DepthMap {
        let d = self.depth_forward(f).2;
        DepthMap { width: f.width, height: f.height, data: d.data }
    }

    /// Stacks the 26-channel crop: RGB, hand mask, depth and heatmaps, each
    /// scaled to [0, 1]. `mask` gives per-pixel membership of the hand; `None`
    /// falls back to all ones.
    pub fn fusion_input(
        &self,
        rgb: &RgbImage,
        mask: Option<&dyn Fn(usize, usize) -> bool>,
        depth: &DepthMap,
        heatmaps: &KeypointHeatmaps,
        b: &BBox,
    ) -> Fm {
        let c = self.config.crop_size;
        let frame = self.crop_frame(b);
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut x = Fm::zeros(FUSION_CHANNELS, c, c);
        let n = c * c;
        let raw = rgb.as_raw();
        let planes: Vec<Vec<f32>> = (0..3).map(|ch| raw.iter().skip(ch).step_by(3).map(|&v| v as f32 / 255.0).collect()).collect();
        for v in 0..c {
            let py = frame.y_min + (v as f64 + 0.5) / c as f64 * frame.height();
            for u in 0..c {
                let px = frame.x_min + (u as f64 + 0.5) / c as f64 * frame.width();
                let i = v * c + u;
                for (ch, plane) in planes.iter().enumerate() {
                    x.data[ch * n + i] = bilinear_clamped(plane, w, h, px, py);
                }
                let (mx, my) = (px.floor().clamp(0.0, (w - 1) as f64) as usize, py.floor().clamp(0.0, (h - 1) as f64) as usize);
                x.data[3 * n + i] = match mask {
                    Some(m) => m(mx, my) as u8 as f32,
                    None => 1.0,
                };
                x.data[4 * n + i] = depth.sample(px, py);
            }
        }
        let k = heatmaps.size;
        let hm = Fm::new(NUM_KPT, k, k, to_f32(&heatmaps.data));
        let mut up = resize_bilinear(&hm, c, c);
        for ch in 0..NUM_KPT {
            let plane = up.plane_mut(ch);
            let max = plane.iter().cloned().fold(0.0f32, f32::max);
            if max > 0.0 {
                plane.iter_mut().for_each(|v| *v = (*v / max).max(0.0));
            }
        }
        x.data[5 * n..].copy_from_slice(&up.data);
        x
    }

    fn fusion_forward(&self, x: &Fm) -> (FusionCache, [f64; 2]) {
        let p = &self.params;
        let pooled = avg_pool(x, self.config.fusion_pool);
        let (mut y1, c1) = self.l.ef1.forward(p, &pooled);
        relu_inplace(&mut y1.data);
        let (mut y2, c2) = self.l.ef2.forward(p, &y1);
        relu_inplace(&mut y2.data);
        let gap = global_avg_pool(&y2);
        let out = self.l.ef_fc.forward(p, &gap);
        (FusionCache { pooled_hw: (pooled.h, pooled.w), c1: (c1, y1), c2: (c2, y2), gap }, [out[0] as f64, out[1] as f64])
    }

    /// Multimodal state logits from a 26-channel crop.
    pub fn early_fusion(&self, x: &Fm) -> Result<[f64; 2]> {
        if x.c != FUSION_CHANNELS {
            return Err(Error::ChannelMismatch { expected: FUSION_CHANNELS, got: x.c });
        }
        let c = self.config.crop_size;
        if x.h != c || x.w != c {
            return Err(Error::ShapeMismatch(format!("fusion crop is {}x{}, expected {c}x{c}", x.h, x.w)));
        }
        Ok(self.fusion_forward(x).1)
    }

    fn fusion_backward(&self, c: &FusionCache, dy: &[f32], g: &mut Grads) {
        let p = &self.params;
        let dgap = self.l.ef_fc.backward(p, g, &c.gap, dy, true).unwrap();
        let y2 = &c.c2.1;
        let mut d2 = global_avg_pool_backward(&dgap, y2.h, y2.w);
        relu_backward(&y2.data, &mut d2.data);
        let y1 = &c.c1.1;
        let mut d1 = self.l.ef2.backward(p, g, (y1.h, y1.w), &c.c2.0, &d2, true).unwrap();
        relu_backward(&y1.data, &mut d1.data);
        self.l.ef1.backward(p, g, c.pooled_hw, &c.c1.0, &d1, false);
    }

    /// Mixing weight of the appearance stream.
    pub fn fusion_weight(&self) -> Option<f64> {
        match self.config.late_fusion {
            LateFusion::Mean => None,
            LateFusion::Learned => Some(super::loss::sigmoid(self.params.values[self.l.fusion_logit][0] as f64)),
        }
    }

    /// Fused contact probability under the configured rule.
    pub fn fuse(&self, appearance: &[f64; 2], multimodal: &[f64; 2]) -> f64 {
        match self.fusion_weight() {
            None => late_fusion(appearance, multimodal),
            Some(s) => s * super::loss::softmax2(appearance)[1] + (1.0 - s) * super::loss::softmax2(multimodal)[1],
        }
    }
}

/// Mean of the two streams' contact probabilities.
pub fn late_fusion(appearance: &[f64; 2], multimodal: &[f64; 2]) -> f64 {
    0.5 * (super::loss::softmax2(appearance)[1] + super::loss::softmax2(multimodal)[1])
}

/// Std-dev of detector center targets, in grid cells.
const DET_SIGMA: f64 = 1.0;

pub(crate) struct DetCache {
    c1: (Vec<f32>, Fm),
    heat_cols: Vec<f32>,
    reg_cols: Vec<f32>,
}

/// One decoded detector peak.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawDetection {
    /// 0 for hands, `1 + category` for objects.
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
}

impl Model {
    pub(crate) fn det_forward(&self, f: &Features) -> (DetCache, Fm, Fm) {
        let p = &self.params;
        let (mut y1, c1) = self.l.det1.forward(p, &f.p2);
        relu_inplace(&mut y1.data);
        let (heat, heat_cols) = self.l.det_heat.forward(p, &y1);
        let (reg, reg_cols) = self.l.det_reg.forward(p, &y1);
        (DetCache { c1: (c1, y1), heat_cols, reg_cols }, heat, reg)
    }

    fn det_backward(&self, c: &DetCache, dheat: &Fm, dreg: &Fm, in_hw: (usize, usize), g: &mut Grads) -> Fm {
        let p = &self.params;
        let y1 = &c.c1.1;
        let mut d = self.l.det_heat.backward(p, g, (y1.h, y1.w), &c.heat_cols, dheat, true).unwrap();
        d.add_assign(&self.l.det_reg.backward(p, g, (y1.h, y1.w), &c.reg_cols, dreg, true).unwrap());
        relu_backward(&y1.data, &mut d.data);
        self.l.det1.backward(p, g, in_hw, &c.c1.0, &d, true).unwrap()
    }

    /// Center heatmaps and box regression targets on the stride-8 grid.
    pub fn det_targets(&self, record: &ImageRecord) -> Result<super::loss::DetTargets> {
        let stride = Features::STRIDES[1] as f64;
        let (gh, gw) = (record.height as usize / Features::STRIDES[1], record.width as usize / Features::STRIDES[1]);
        let cells = gh * gw;
        let classes = self.config.n_det_classes();
        let mut heat = vec![0.0f64; classes * cells];
        let mut reg = vec![0.0; 4 * cells];
        let mut positive = vec![false; cells];
        let boxes = record.hands.iter().map(|h| (0usize, h.bbox)).chain(record.objects.iter().map(|o| (1 + o.category_id as usize, o.bbox)));
        for (class, b) in boxes {
            if class >= classes {
                return Err(Error::config("model.n_categories", format!("category {} exceeds the configured {}", class - 1, self.config.n_categories)));
            }
            let (cx, cy) = b.center();
            let (gx, gy) = (cx / stride, cy / stride);
            let (j, i) = ((gx.floor() as usize).min(gw - 1), (gy.floor() as usize).min(gh - 1));
            let plane = &mut heat[class * cells..(class + 1) * cells];
            for y in 0..gh {
                for x in 0..gw {
                    let d2 = (x as f64 - j as f64).powi(2) + (y as f64 - i as f64).powi(2);
                    let v = (-d2 / (2.0 * DET_SIGMA * DET_SIGMA)).exp();
                    let t = &mut plane[y * gw + x];
                    *t = (*t).max(v);
                }
            }
            let cell = i * gw + j;
            positive[cell] = true;
            reg[cell] = gx - j as f64;
            reg[cells + cell] = gy - i as f64;
            reg[2 * cells + cell] = (b.width().max(1.0) / stride).ln();
            reg[3 * cells + cell] = (b.height().max(1.0) / stride).ln();
        }
        Ok(super::loss::DetTargets { heat, reg, positive })
    }

    /// Local maxima of the center heatmaps above `det_threshold`.
    pub fn decode_detections(&self, heat: &Fm, reg: &Fm, width: usize, height: usize) -> Vec<RawDetection> {
        let stride = Features::STRIDES[1] as f64;
        let (gh, gw) = (heat.h, heat.w);
        let mut out = Vec::new();
        for class in 0..heat.c {
            let plane = heat.plane(class);
            for i in 0..gh {
                for j in 0..gw {
                    let v = plane[i * gw + j];
                    let score = super::loss::sigmoid(v as f64);
                    if score < self.config.det_threshold {
                        continue;
                    }
                    let mut peak = true;
                    for y in i.saturating_sub(1)..(i + 2).min(gh) {
                        for x in j.saturating_sub(1)..(j + 2).min(gw) {
                            let u = plane[y * gw + x];
                            if u > v || (u == v && (y, x) < (i, j)) {
                                peak = false;
                            }
                        }
                    }
                    if !peak {
                        continue;
                    }
                    let cell = i * gw + j;
                    let cx = (j as f64 + reg.plane(0)[cell] as f64) * stride;
                    let cy = (i as f64 + reg.plane(1)[cell] as f64) * stride;
                    let bw = (reg.plane(2)[cell] as f64).clamp(-4.0, 4.0).exp() * stride;
                    let bh = (reg.plane(3)[cell] as f64).clamp(-4.0, 4.0).exp() * stride;
                    let bbox = BBox::from_center(cx, cy, bw, bh).clamp(width as f64, height as f64);
                    if bbox.area() >= 1.0 {
                        out.push(RawDetection { class, bbox, score });
                    }
                }
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.class.cmp(&b.class)));
        let max = self.config.max_detections;
        let mut hands = 0;
        let mut objects = 0;
        out.retain(|d| {
            let n = if d.class == 0 { &mut hands } else { &mut objects };
            *n += 1;
            *n <= max
        });
        out
    }

    /// Gaussian keypoint targets on the heatmap grid of the dilated box.
    pub fn keypoint_targets(&self, hand: &HandAnnotation) -> (Vec<f64>, Vec<bool>) {
        let k = self.config.heatmap_size;
        let frame = self.crop_frame(&hand.bbox);
        let s2 = 2.0 * self.config.kpt_sigma * self.config.kpt_sigma;
        let mut maps = vec![0.0; NUM_KPT * k * k];
        let mut visible = vec![false; NUM_KPT];
        for (c, kp) in hand.keypoints.iter().enumerate().take(NUM_KPT) {
            visible[c] = kp.visible;
            let u = (kp.x - frame.x_min) / frame.width() * k as f64 - 0.5;
            let v = (kp.y - frame.y_min) / frame.height() * k as f64 - 0.5;
            let plane = &mut maps[c * k * k..(c + 1) * k * k];
            for i in 0..k {
                for j in 0..k {
                    plane[i * k + j] = (-((j as f64 - u).powi(2) + (i as f64 - v).powi(2)) / s2).exp();
                }
            }
        }
        (maps, visible)
    }

    pub fn hand_targets(&self, hand: &HandAnnotation) -> HandTargets {
        let (kpt_heatmaps, kpt_visible) = self.keypoint_targets(hand);
        HandTargets {
            side: hand.side,
            contact: hand.contact,
            glove: hand.glove,
            offset: if hand.contact.is_contact() { hand.offset.map(|o| [o.v_x, o.v_y, o.m]) } else { None },
            kpt_heatmaps,
            kpt_visible,
        }
    }
}

pub(crate) struct HandForward {
    cache: HandCache,
    fusion: FusionCache,
    pub attrs: AttributePrediction,
    pub mm_state: [f64; 2],
    pub kpt_logits: Fm,
}

pub(crate) struct ImageCache {
    bb: BackboneCache,
    p_dims: [(usize, usize, usize); 2],
    hands: Vec<HandForward>,
    depth: ((Vec<f32>, Fm), Vec<f32>, (usize, usize), Fm),
    det: Option<DetCache>,
}

impl Model {
    pub(crate) fn hand_forward(&self, rgb: &RgbImage, mask: Option<&dyn Fn(usize, usize) -> bool>, f: &Features, depth: &DepthMap, b: &BBox) -> HandForward {
        let (roi, pooled, hfv) = self.hfv_forward(f, b);
        let (heads, attrs) = self.attr_heads(&hfv);
        let (kroi, k1, k2, k3, kpt_logits) = self.kpt_forward(f, b);
        let heatmaps = self.heatmaps_from_logits(&kpt_logits, b);
        let x = self.fusion_input(rgb, mask, depth, &heatmaps, b);
        let (fusion, mm_state) = self.fusion_forward(&x);
        HandForward { cache: HandCache { roi, pooled, hfv, heads, kroi, k1, k2, k3 }, fusion, attrs, mm_state, kpt_logits }
    }

    /// Forward pass with GT boxes as hand regions, keeping everything the
    /// backward pass needs.
    pub(crate) fn forward_train(&self, s: &Sample, with_det: bool) -> Result<(ImageOutputs, ImageTargets, ImageCache)> {
        let (f, bb) = self.backbone(&s.rgb)?;
        let (dc1, dc2, up) = self.depth_forward(&f);
        let depth_hw = (dc1.1.h, dc1.1.w);
        let depth_map = DepthMap { width: f.width, height: f.height, data: up.data.clone() };
        let fusion_logit = match self.config.late_fusion {
            LateFusion::Mean => None,
            LateFusion::Learned => Some(self.params.values[self.l.fusion_logit][0] as f64),
        };
        let mut hands = Vec::with_capacity(s.record.hands.len());
        let mut hand_out = Vec::with_capacity(s.record.hands.len());
        let mut hand_tgt = Vec::with_capacity(s.record.hands.len());
        for h in &s.record.hands {
            check_box(&h.bbox)?;
            let member = s.instance_mask(h.id);
            let hf = self.hand_forward(&s.rgb, member.as_ref().map(|m| m as &dyn Fn(usize, usize) -> bool), &f, &depth_map, &h.bbox);
            hand_out.push(HandOutputs {
                side: hf.attrs.side_logits,
                state: hf.attrs.state_logits,
                glove: hf.attrs.glove_logits,
                offset: hf.attrs.offset,
                mm_state: hf.mm_state,
                kpt_logits: to_f64(&hf.kpt_logits.data),
                fusion_logit,
            });
            hand_tgt.push(self.hand_targets(h));
            hands.push(hf);
        }
        let (det_out, det_tgt, det_cache) = if with_det {
            let (c, heat, reg) = self.det_forward(&f);
            let out = DetOutputs { heat_logits: to_f64(&heat.data), reg: to_f64(&reg.data) };
            (Some(out), Some(self.det_targets(&s.record)?), Some(c))
        } else {
            (None, None, None)
        };
        let outputs = ImageOutputs { hands: hand_out, depth: to_f64(&up.data), det: det_out };
        let targets = ImageTargets { hands: hand_tgt, depth: s.depth_target(), det: det_tgt };
        let p_dims = [(f.p1.c, f.p1.h, f.p1.w), (f.p2.c, f.p2.h, f.p2.w)];
        let cache = ImageCache { bb, p_dims, hands, depth: (dc1, dc2, depth_hw, up), det: det_cache };
        Ok((outputs, targets, cache))
    }

    /// Accumulates parameter gradients for one image.
    pub(crate) fn backward_image(&self, c: &ImageCache, dy: &ImageGrads, g: &mut Grads) {
        let p = &self.params;
        let l = &self.l;
        let [(c1, h1, w1), (c2, h2, w2)] = c.p_dims;
        let mut dp1 = Fm::zeros(c1, h1, w1);
        let mut dp2 = Fm::zeros(c2, h2, w2);
        for (hf, hg) in c.hands.iter().zip(&dy.hands) {
            let hc = &hf.cache;
            let heads = [(&l.side, &hg.side[..]), (&l.state, &hg.state[..]), (&l.glove, &hg.glove[..]), (&l.offset, &hg.offset[..])];
            let mut dhfv = vec![0.0f32; HFV_DIM];
            for (i, (head, d)) in heads.iter().enumerate() {
                if d.iter().all(|&v| v == 0.0) {
                    continue;
                }
                let dx = self.head_backward(head, &hc.heads[i], &hc.hfv, &to_f32(d), g);
                dhfv.iter_mut().zip(&dx).for_each(|(a, b)| *a += b);
            }
            relu_backward(&hc.hfv, &mut dhfv);
            let dpool = l.hfv.backward(p, g, &hc.pooled, &dhfv, true).unwrap();
            let r = self.config.roi_size;
            roi_align_backward(&Fm::new(c2, r, r, dpool), &hc.roi, h2, w2, ROI_SAMPLING, &mut dp2);

            let k = self.config.heatmap_size;
            let kr = self.config.kpt_roi;
            let dl = Fm::new(NUM_KPT, k, k, to_f32(&hg.kpt_logits));
            let d3 = resize_bilinear_backward(&dl, kr, kr);
            let mut dk2 = l.kpt3.backward(p, g, (kr, kr), &hc.k3, &d3, true).unwrap();
            relu_backward(&hc.k2.1.data, &mut dk2.data);
            let mut dk1 = l.kpt2.backward(p, g, (kr, kr), &hc.k2.0, &dk2, true).unwrap();
            relu_backward(&hc.k1.1.data, &mut dk1.data);
            let dx = l.kpt1.backward(p, g, (kr, kr), &hc.k1.0, &dk1, true).unwrap();
            roi_align_backward(&dx, &hc.kroi, h1, w1, ROI_SAMPLING, &mut dp1);

            if hg.mm_state.iter().any(|&v| v != 0.0) {
                self.fusion_backward(&hf.fusion, &to_f32(&hg.mm_state), g);
            }
            g.values[l.fusion_logit][0] += hg.fusion_logit as f32;
        }

        let ((cols1, y1), cols2, (dh, dw), up) = &c.depth;
        if dy.depth.iter().any(|&v| v != 0.0) {
            let mut d = Fm::new(1, up.h, up.w, dy.depth.iter().zip(&up.data).map(|(&g, &s)| g as f32 * s * (1.0 - s)).collect());
            d = resize_bilinear_backward(&d, *dh, *dw);
            let mut d1 = l.depth2.backward(p, g, (*dh, *dw), cols2, &d, true).unwrap();
            relu_backward(&y1.data, &mut d1.data);
            dp1.add_assign(&l.depth1.backward(p, g, (h1, w1), cols1, &d1, true).unwrap());
        }

        if let (Some(dc), Some(dd)) = (&c.det, &dy.det) {
            let classes = self.config.n_det_classes();
            let dheat = Fm::new(classes, h2, w2, to_f32(&dd.heat_logits));
            let dreg = Fm::new(4, h2, w2, to_f32(&dd.reg));
            dp2.add_assign(&self.det_backward(dc, &dheat, &dreg, (h2, w2), g));
        }
        self.backbone_backward(&c.bb, &dp1, &dp2, g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::loss::compute_loss;
    use crate::net::train::{batch_gradients, TrainConfig};
    use crate::synthgen::{generate_scene, SceneConfig};
    use rand::Rng;

    fn scene_sample(i: u64) -> Sample {
        Sample::from_scene(&generate_scene(&SceneConfig::default(), i).unwrap())
    }

    fn total_loss(m: &Model, batch: &[&Sample], cfg: &TrainConfig) -> f64 {
        let mut outs = Vec::new();
        let mut tgts = Vec::new();
        for s in batch {
            let (o, t, _) = m.forward_train(s, cfg.train_detector).unwrap();
            outs.push(o);
            tgts.push(t);
        }
        compute_loss(&outs, &tgts, &cfg.loss).unwrap().breakdown.l_total
    }

    #[test]
    fn feature_strides() {
        let m = Model::new(ModelConfig::default(), 1).unwrap();
        let f = m.extract_features(&RgbImage::new(96, 96)).unwrap();
        assert_eq!((f.p1.c, f.p1.h, f.p1.w), (64, 24, 24));
        assert_eq!((f.p2.h, f.p2.w), (12, 12));
        assert_eq!((f.p3.h, f.p3.w), (6, 6));
        assert!(f.p1.is_finite() && f.p2.is_finite() && f.p3.is_finite());
        assert!(matches!(m.extract_features(&RgbImage::new(90, 96)), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn zero_init_heads_are_uniform() {
        let m = Model::new(ModelConfig::default(), 2).unwrap();
        let s = scene_sample(0);
        let f = m.extract_features(&s.rgb).unwrap();
        let hfv = m.pool_hand_features(&f, &s.record.hands[0].bbox).unwrap();
        assert_eq!(hfv.len(), HFV_DIM);
        let a = m.predict_attributes(&hfv).unwrap();
        assert_eq!(a.side_logits, [0.0, 0.0]);
        assert_eq!(a.state_logits, [0.0, 0.0]);
        assert_eq!(a.glove_logits, [0.0, 0.0]);
        assert_eq!(a.offset, [0.0; 3]);
        assert!(matches!(m.pool_hand_features(&f, &BBox::new(3.0, 3.0, 3.5, 4.0)), Err(Error::DegenerateBox(_))));
    }

    #[test]
    fn heatmaps_normalized_and_decoded() {
        let m = Model::new(ModelConfig::default(), 3).unwrap();
        let s = scene_sample(1);
        let f = m.extract_features(&s.rgb).unwrap();
        let k = m.predict_keypoints(&f, &s.record.hands[0].bbox).unwrap();
        assert_eq!(k.coords.len(), 21);
        for c in 0..21 {
            let sum: f64 = k.heatmaps.channel(c).iter().sum();
            assert!((sum - 1.0).abs() < 1e-5);
            assert!(k.heatmaps.channel(c).iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn spike_decodes_to_cell_center() {
        let frame = BBox::new(10.0, 20.0, 42.0, 84.0);
        let size = 32;
        for (row, col) in [(0, 0), (5, 17), (31, 31)] {
            let mut data = vec![0.0; 21 * size * size];
            for c in 0..21 {
                data[c * size * size + row * size + col] = 1.0;
            }
            let h = KeypointHeatmaps { size, data, frame };
            let want = [10.0 + (col as f64 + 0.5) * 1.0, 20.0 + (row as f64 + 0.5) * 2.0];
            for p in h.decode() {
                assert!((p[0] - want[0]).abs() < 1e-12 && (p[1] - want[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn depth_shape_and_range() {
        let m = Model::new(ModelConfig::default(), 4).unwrap();
        let f = m.extract_features(&scene_sample(2).rgb).unwrap();
        let d = m.predict_depth(&f);
        assert_eq!((d.width, d.height, d.data.len()), (96, 96, 96 * 96));
        assert!(d.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn fusion_channels_checked() {
        let mut m = Model::new(ModelConfig::default(), 5).unwrap();
        assert!(matches!(m.early_fusion(&Fm::zeros(25, 96, 96)), Err(Error::ChannelMismatch { expected: 26, got: 25 })));
        // Non-zero classifier.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for v in m.params.values[m.l.ef_fc.w].iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let s = scene_sample(3);
        let f = m.extract_features(&s.rgb).unwrap();
        let b = s.record.hands[0].bbox;
        let depth = m.predict_depth(&f);
        let zero = KeypointHeatmaps { size: 32, data: vec![0.0; 21 * 32 * 32], frame: m.crop_frame(&b) };
        let x = m.fusion_input(&s.rgb, None, &depth, &zero, &b);
        assert_eq!(x.c, FUSION_CHANNELS);
        assert!(x.data.iter().all(|v| (0.0..=1.0).contains(v)));
        let l = m.early_fusion(&x).unwrap();
        assert!(l.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn late_fusion_rule() {
        let p = |q: f64| [0.0, (q / (1.0 - q)).ln()];
        assert!((late_fusion(&p(0.9), &p(0.9)) - 0.9).abs() < 1e-12);
        assert!((late_fusion(&p(0.2), &p(0.8)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn attributes_ignore_other_boxes() {
        let m = Model::new(ModelConfig::default(), 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = m;
        for h in [m.l.side, m.l.state, m.l.glove, m.l.offset] {
            for v in m.params.values[h.fc2.w].iter_mut() {
                *v = rng.gen_range(-0.1..0.1);
            }
        }
        let s = (0..20).map(scene_sample).find(|s| s.record.hands.len() >= 2).unwrap();
        let opts = crate::net::infer::InferOptions::default();
        let all = m.infer(&s, &opts).unwrap();
        let mut solo = s.clone();
        solo.record.hands.truncate(1);
        let one = m.infer(&solo, &opts).unwrap();
        let id = s.record.hands[0].id;
        let a = all.iter().find(|d| d.id == id && d.hand.is_some()).unwrap();
        let b = one.iter().find(|d| d.id == id && d.hand.is_some()).unwrap();
        assert_eq!(a.hand.as_ref().unwrap().prediction, b.hand.as_ref().unwrap().prediction);
        assert_eq!(a.confidence, b.confidence);
    }

    /// Directional derivative of each loss component through the whole
    /// network, per parameter group, against central differences.
    #[test]
    fn backward_matches_finite_differences() {
        let mcfg = ModelConfig { late_fusion: LateFusion::Learned, ..ModelConfig::default() };
        let mut m = Model::new(mcfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // Leave the zero-initialized layers non-degenerate.
        for v in m.params.values.iter_mut() {
            for x in v.iter_mut() {
                if *x == 0.0 {
                    *x = rng.gen_range(-0.05..0.05);
                }
            }
        }
        let samples: Vec<Sample> = (0..2).map(scene_sample).collect();
        let batch: Vec<&Sample> = samples.iter().collect();
        let groups = ["backbone.stem", "backbone.c2b", "fpn.lat1", "fpn.smooth2", "hfv", "head.side", "head.state", "head.glove", "head.offset", "kpt.conv1", "kpt.out", "depth.conv1", "fusion.conv1", "fusion.fc", "fusion.late_logit", "det.conv1", "det.heat", "det.reg"];
        for comp in 0..7 {
            let mut w = [0.0; 7];
            w[comp] = 1.0;
            let mut cfg = TrainConfig { train_detector: true, ..TrainConfig::default() };
            cfg.loss.weights = crate::net::loss::LossWeights { backbone: w[0], depth: w[1], side: w[2], contact: w[3], offset: w[4], kpt: w[5], glove: w[6] };
            let (_, g) = batch_gradients(&m, &batch, &cfg, false).unwrap();
            for group in groups {
                // Fusion inputs are detached, so upstream layers see only part of the contact loss.
                if comp == 3 && ["backbone", "fpn", "kpt", "depth"].iter().any(|p| group.starts_with(p)) {
                    continue;
                }
                let idx: Vec<usize> = (0..m.params.info.len()).filter(|&i| m.params.info[i].name.starts_with(group)).collect();
                assert!(!idx.is_empty(), "{group}");
                let dir: Vec<Vec<f32>> = idx.iter().map(|&i| (0..m.params.values[i].len()).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).collect();
                let norm: f64 = dir.iter().flatten().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                let analytic: f64 =
                    idx.iter().zip(&dir).map(|(&i, d)| g.values[i].iter().zip(d).map(|(&a, &b)| a as f64 * b as f64).sum::<f64>()).sum::<f64>() / norm;
                let eps = 1e-3;
                let shifted = |s: f64| {
                    let mut c = m.clone();
                    for (&i, d) in idx.iter().zip(&dir) {
                        for (w, &dv) in c.params.values[i].iter_mut().zip(d) {
                            *w += (s * dv as f64 / norm) as f32;
                        }
                    }
                    total_loss(&c, &batch, &cfg)
                };
                let numeric = (shifted(eps) - shifted(-eps)) / (2.0 * eps);
                let diff = (analytic - numeric).abs();
                assert!(diff <= 0.05 * analytic.abs().max(numeric.abs()) || diff < 2e-6, "component {comp}, {group}: analytic {analytic} numeric {numeric}");
            }
        }
    }
}
