//! EHOI annotation schema, the on-disk JSON split format, validation,
//! offset-vector geometry and dataset statistics.
//!
//! A split file looks like
//!
//! ```json
//! {"categories":[{"id":0,"name":"box"}],
//!  "images":[{"image_id":"000001","width":96,"height":96,
//!             "rgb_path":"rgb/000001.png","depth_path":null,"mask_path":null,
//!             "hands":[{"id":3,"bbox":[x0,y0,x1,y1],"side":"left","contact":"contact",
//!                       "glove":"no_glove","keypoints":[[x,y,true], ...21],
//!                       "offset":[vx,vy,m],"active_object_id":0}],
//!             "objects":[{"id":0,"bbox":[x0,y0,x1,y1],"category_id":0,"active":true}]}]}
//! ```
//!
//! Coordinates are pixels with the origin at the top-left corner.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Hand landmark count, wrist first then thumb, index, middle, ring and pinky
/// chains of four joints each.
pub const NUM_KEYPOINTS: usize = 21;

/// 16-bit single channel raster used for depth and instance masks.
pub type Gray16Image = ImageBuffer<Luma<u16>, Vec<u16>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn is_valid(&self) -> bool {
        self.as_array().iter().all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    /// Grows every side by `frac` of the box's own width/height.
    pub fn dilate(&self, frac: f64) -> BBox {
        let dx = self.width() * frac;
        let dy = self.height() * frac;
        BBox::new(
            self.x_min - dx,
            self.y_min - dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    pub fn clamp(&self, width: f64, height: f64) -> BBox {
        BBox::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl Serialize for BBox {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.as_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BBox {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        <[f64; 4]>::deserialize(d).map(BBox::from)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandSide {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactState {
    NoContact,
    Contact,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GloveStatus {
    NoGlove,
    Glove,
}

impl HandSide {
    pub fn index(self) -> usize {
        self as usize
    }
    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            HandSide::Left
        } else {
            HandSide::Right
        }
    }
}

impl ContactState {
    pub fn index(self) -> usize {
        self as usize
    }
    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            ContactState::NoContact
        } else {
            ContactState::Contact
        }
    }
    pub fn is_contact(self) -> bool {
        self == ContactState::Contact
    }
}

impl GloveStatus {
    pub fn index(self) -> usize {
        self as usize
    }
    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            GloveStatus::NoGlove
        } else {
            GloveStatus::Glove
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

/// Accepts `true`/`false` as well as numeric flags (`0` = hidden).
#[derive(Deserialize)]
#[serde(untagged)]
enum VisibleFlag {
    Bool(bool),
    Num(f64),
}

impl Serialize for Keypoint {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        (self.x, self.y, self.visible).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Keypoint {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let (x, y, flag) = <(f64, f64, VisibleFlag)>::deserialize(d)?;
        let visible = match flag {
            VisibleFlag::Bool(b) => b,
            VisibleFlag::Num(n) => n != 0.0,
        };
        Ok(Keypoint { x, y, visible })
    }
}

/// Unit direction from a hand's box center toward its active object's box
/// center, plus the center distance divided by the image diagonal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OffsetVector {
    pub v_x: f64,
    pub v_y: f64,
    pub m: f64,
}

impl OffsetVector {
    pub const ZERO: OffsetVector = OffsetVector {
        v_x: 1.0,
        v_y: 0.0,
        m: 0.0,
    };

    pub fn is_valid(&self) -> bool {
        if !(self.v_x.is_finite() && self.v_y.is_finite() && self.m.is_finite()) || self.m < 0.0 {
            return false;
        }
        if self.m == 0.0 {
            self.v_x == 1.0 && self.v_y == 0.0
        } else {
            ((self.v_x * self.v_x + self.v_y * self.v_y) - 1.0).abs() <= 1e-6
        }
    }

    /// Renormalizes a raw regression output into a valid offset.
    pub fn normalized(v_x: f64, v_y: f64, m: f64) -> OffsetVector {
        let norm = v_x.hypot(v_y);
        let m = m.max(0.0);
        if norm == 0.0 || !norm.is_finite() || m == 0.0 || !m.is_finite() {
            return OffsetVector::ZERO;
        }
        OffsetVector {
            v_x: v_x / norm,
            v_y: v_y / norm,
            m,
        }
    }
}

impl Serialize for OffsetVector {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        [self.v_x, self.v_y, self.m].serialize(s)
    }
}

impl<'de> Deserialize<'de> for OffsetVector {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [v_x, v_y, m] = <[f64; 3]>::deserialize(d)?;
        Ok(OffsetVector { v_x, v_y, m })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandAnnotation {
    pub id: u64,
    pub bbox: BBox,
    pub side: HandSide,
    pub contact: ContactState,
    pub glove: GloveStatus,
    pub keypoints: Vec<Keypoint>,
    pub offset: Option<OffsetVector>,
    pub active_object_id: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectAnnotation {
    pub id: u64,
    pub bbox: BBox,
    pub category_id: u32,
    pub active: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub rgb_path: String,
    pub depth_path: Option<String>,
    pub mask_path: Option<String>,
    pub hands: Vec<HandAnnotation>,
    pub objects: Vec<ObjectAnnotation>,
}

impl ImageRecord {
    pub fn object(&self, id: u64) -> Option<&ObjectAnnotation> {
        self.objects.iter().find(|o| o.id == id)
    }

    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub categories: Vec<Category>,
    pub images: Vec<ImageRecord>,
    /// Split label, taken from the file stem when parsed from disk.
    #[serde(skip)]
    pub split: Option<String>,
}

impl Dataset {
    pub fn with_split(mut self, split: impl Into<String>) -> Self {
        self.split = Some(split.into());
        self
    }

    pub fn n_hands(&self) -> usize {
        self.images.iter().map(|r| r.hands.len()).sum()
    }
}

/// Non-fatal repair applied while parsing (currently: box clamping).
#[derive(Clone, Debug, PartialEq)]
pub struct ParseWarning {
    pub image_id: String,
    pub message: String,
}

impl fmt::Display for ParseWarning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "image {}: {}", self.image_id, self.message)
    }
}

/// Reads and validates one split file. Records keep file order; boxes that
/// stick out of the image are clamped and reported as warnings.
pub fn parse_dataset(path: impl AsRef<Path>) -> Result<(Dataset, Vec<ParseWarning>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut dataset = parse_dataset_bytes(&bytes, path)?;
    dataset.split = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned());
    let warnings = validate_dataset(&mut dataset)?;
    for w in &warnings {
        log::warn!("{}: {}", path.display(), w);
    }
    Ok((dataset, warnings))
}

fn parse_dataset_bytes(bytes: &[u8], path: &Path) -> Result<Dataset> {
    if bytes.iter().all(|b| b.is_ascii_whitespace()) {
        return Ok(Dataset::default());
    }
    let de = &mut serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(de).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        message: format!("at `{}`: {}", e.path(), e.inner()),
    })
}

/// Checks every schema invariant in place, clamping out-of-image boxes.
pub fn validate_dataset(dataset: &mut Dataset) -> Result<Vec<ParseWarning>> {
    let mut warnings = Vec::new();
    let categories: HashSet<u32> = dataset.categories.iter().map(|c| c.id).collect();
    if categories.len() != dataset.categories.len() {
        return Err(Error::invariant("<dataset>", "categories", "duplicate category id"));
    }
    let mut seen_images = HashSet::new();
    for record in &mut dataset.images {
        if !seen_images.insert(record.image_id.clone()) {
            return Err(Error::invariant(
                &record.image_id,
                "image_id",
                "duplicate image id",
            ));
        }
        validate_record(record, &categories, &mut warnings)?;
    }
    Ok(warnings)
}

fn validate_record(
    record: &mut ImageRecord,
    categories: &HashSet<u32>,
    warnings: &mut Vec<ParseWarning>,
) -> Result<()> {
    let id = record.image_id.clone();
    if record.width == 0 || record.height == 0 {
        return Err(Error::invariant(&id, "width/height", "must be positive"));
    }
    let (w, h) = (record.width as f64, record.height as f64);

    let mut ids = HashSet::new();
    for obj in &mut record.objects {
        if !ids.insert(obj.id) {
            return Err(Error::invariant(&id, format!("objects[{}].id", obj.id), "duplicate id"));
        }
        obj.bbox = checked_box(&id, &format!("objects[{}].bbox", obj.id), obj.bbox, w, h, warnings)?;
        if !categories.contains(&obj.category_id) {
            return Err(Error::invariant(
                &id,
                format!("objects[{}].category_id", obj.id),
                format!("category {} not in the category table", obj.category_id),
            ));
        }
    }

    let mut referenced = HashSet::new();
    for hand in &mut record.hands {
        let field = |f: &str| format!("hands[{}].{f}", hand.id);
        if !ids.insert(hand.id) {
            return Err(Error::invariant(&id, field("id"), "duplicate id"));
        }
        hand.bbox = checked_box(&id, &field("bbox"), hand.bbox, w, h, warnings)?;
        if hand.keypoints.len() != NUM_KEYPOINTS {
            return Err(Error::invariant(
                &id,
                field("keypoints"),
                format!("expected {NUM_KEYPOINTS} keypoints, found {}", hand.keypoints.len()),
            ));
        }
        for (k, kp) in hand.keypoints.iter().enumerate() {
            if !(kp.x.is_finite() && kp.y.is_finite()) {
                return Err(Error::invariant(&id, field(&format!("keypoints[{k}]")), "non-finite"));
            }
            if kp.visible && (!(0.0..=w).contains(&kp.x) || !(0.0..=h).contains(&kp.y)) {
                return Err(Error::invariant(
                    &id,
                    field(&format!("keypoints[{k}]")),
                    "visible keypoint outside the image",
                ));
            }
        }
        match (hand.contact, hand.offset, hand.active_object_id) {
            (ContactState::Contact, Some(offset), Some(obj_id)) => {
                if !offset.is_valid() {
                    return Err(Error::invariant(&id, field("offset"), "not a valid offset vector"));
                }
                match record.objects.iter().find(|o| o.id == obj_id) {
                    None => {
                        return Err(Error::DanglingObject {
                            image_id: id,
                            hand_id: hand.id,
                            object_id: obj_id,
                        })
                    }
                    Some(o) if !o.active => {
                        return Err(Error::invariant(
                            &id,
                            field("active_object_id"),
                            format!("object {obj_id} is not marked active"),
                        ))
                    }
                    Some(_) => {
                        referenced.insert(obj_id);
                    }
                }
            }
            (ContactState::NoContact, None, None) => {}
            (ContactState::Contact, _, _) => {
                return Err(Error::invariant(
                    &id,
                    field("active_object_id"),
                    "contact hand needs both offset and active_object_id",
                ))
            }
            (ContactState::NoContact, _, _) => {
                return Err(Error::invariant(
                    &id,
                    field("active_object_id"),
                    "no-contact hand must not carry offset or active_object_id",
                ))
            }
        }
    }

    for obj in &record.objects {
        if obj.active != referenced.contains(&obj.id) {
            return Err(Error::invariant(
                &id,
                format!("objects[{}].active", obj.id),
                "active flag disagrees with hand references",
            ));
        }
    }
    Ok(())
}

fn checked_box(
    image_id: &str,
    field: &str,
    bbox: BBox,
    w: f64,
    h: f64,
    warnings: &mut Vec<ParseWarning>,
) -> Result<BBox> {
    if !bbox.is_valid() {
        return Err(Error::invariant(image_id, field, format!("invalid box {:?}", bbox.as_array())));
    }
    let clamped = bbox.clamp(w, h);
    if clamped != bbox {
        if !clamped.is_valid() {
            return Err(Error::invariant(image_id, field, "box lies outside the image"));
        }
        warnings.push(ParseWarning {
            image_id: image_id.to_string(),
            message: format!("{field} clamped to the image bounds"),
        });
    }
    Ok(clamped)
}

/// Canonical serialization; parsing and re-writing canonical output is
/// byte-identical.
pub fn to_canonical_json(dataset: &Dataset) -> String {
    let mut s = serde_json::to_string_pretty(dataset).expect("dataset serializes");
    s.push('\n');
    s
}

pub fn write_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, to_canonical_json(dataset)).map_err(|e| Error::io(path, e))
}

/// Offset from the hand box center to the object box center.
pub fn derive_offset(hand_bbox: &BBox, object_bbox: &BBox, width: f64, height: f64) -> OffsetVector {
    let (hx, hy) = hand_bbox.center();
    let (ox, oy) = object_bbox.center();
    let (dx, dy) = (ox - hx, oy - hy);
    let dist = dx.hypot(dy);
    if dist == 0.0 {
        return OffsetVector::ZERO;
    }
    OffsetVector {
        v_x: dx / dist,
        v_y: dy / dist,
        m: dist / width.hypot(height),
    }
}

/// Point reached by walking the offset from the hand box center. Not clamped.
pub fn project_interaction_point(
    hand_bbox: &BBox,
    offset: &OffsetVector,
    width: f64,
    height: f64,
) -> (f64, f64) {
    let (hx, hy) = hand_bbox.center();
    let reach = offset.m * width.hypot(height);
    (hx + reach * offset.v_x, hy + reach * offset.v_y)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_images: usize,
    pub n_hands: usize,
    pub n_ehois: usize,
    pub n_left: usize,
    pub n_right: usize,
    pub n_objects: usize,
    /// Percentage of gloved hands, rounded to two decimals.
    pub glove_fraction: f64,
}

impl DatasetStats {
    fn accumulate(&mut self, dataset: &Dataset, gloved: &mut usize) {
        self.n_images += dataset.images.len();
        for record in &dataset.images {
            self.n_objects += record.objects.len();
            for hand in &record.hands {
                self.n_hands += 1;
                match hand.side {
                    HandSide::Left => self.n_left += 1,
                    HandSide::Right => self.n_right += 1,
                }
                if hand.contact.is_contact() && hand.active_object_id.is_some() {
                    self.n_ehois += 1;
                }
                if hand.glove == GloveStatus::Glove {
                    *gloved += 1;
                }
            }
        }
    }

    fn finish(mut self, gloved: usize) -> Self {
        self.glove_fraction = if self.n_hands == 0 {
            0.0
        } else {
            (10_000.0 * gloved as f64 / self.n_hands as f64).round() / 100.0
        };
        self
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub splits: Vec<(String, DatasetStats)>,
    pub total: DatasetStats,
}

/// Table-style counts per split (when `per_split`) and over all splits.
pub fn compute_stats(splits: &[Dataset], per_split: bool) -> StatsReport {
    let mut rows = Vec::new();
    let mut total = DatasetStats::default();
    let mut total_gloved = 0;
    for (i, ds) in splits.iter().enumerate() {
        let mut gloved = 0;
        let mut stats = DatasetStats::default();
        stats.accumulate(ds, &mut gloved);
        total.accumulate(ds, &mut total_gloved);
        if per_split {
            let name = ds.split.clone().unwrap_or_else(|| format!("split{i}"));
            rows.push((name, stats.finish(gloved)));
        }
    }
    StatsReport {
        splits: rows,
        total: total.finish(total_gloved),
    }
}

fn thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    out
}

impl fmt::Display for StatsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<12} {:>9} {:>9} {:>9} {:>12} {:>13} {:>10} {:>14}",
            "Split", "#images", "#hands", "#EHOIs", "#left hands", "#right hands", "#objects", "%glove hands"
        )?;
        let total = ("Total".to_string(), self.total.clone());
        for (name, s) in self.splits.iter().chain(std::iter::once(&total)) {
            writeln!(
                f,
                "{:<12} {:>9} {:>9} {:>9} {:>12} {:>13} {:>10} {:>14.2}",
                name,
                thousands(s.n_images),
                thousands(s.n_hands),
                thousands(s.n_ehois),
                thousands(s.n_left),
                thousands(s.n_right),
                thousands(s.n_objects),
                s.glove_fraction
            )?;
        }
        Ok(())
    }
}

/// Resolves an asset path stored in a record against the split file's
/// directory.
pub fn resolve_asset(split_file: &Path, asset: &str) -> PathBuf {
    let p = Path::new(asset);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    split_file
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(p)
}

pub fn read_rgb(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn read_gray16(path: &Path) -> Result<Gray16Image> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_luma16())
}

pub fn write_png<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Index from object id to position in `record.objects`.
pub fn object_index(record: &ImageRecord) -> HashMap<u64, usize> {
    record
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| (o.id, i))
        .collect()
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn keypoints_in(b: &BBox) -> Vec<Keypoint> {
        (0..NUM_KEYPOINTS)
            .map(|k| {
                let t = k as f64 / (NUM_KEYPOINTS - 1) as f64;
                Keypoint {
                    x: b.x_min + t * b.width(),
                    y: b.y_min + t * b.height(),
                    visible: k % 5 != 4,
                }
            })
            .collect()
    }

    /// One image, a left hand touching object 0 and a free right hand.
    pub fn one_image() -> Dataset {
        let (w, h) = (200.0, 100.0);
        let objects = vec![
            ObjectAnnotation { id: 0, bbox: BBox::new(40.0, 20.0, 70.0, 50.0), category_id: 1, active: true },
            ObjectAnnotation { id: 1, bbox: BBox::new(120.0, 10.0, 140.0, 30.0), category_id: 0, active: false },
            ObjectAnnotation { id: 2, bbox: BBox::new(160.0, 60.0, 190.0, 90.0), category_id: 2, active: false },
        ];
        let left = BBox::new(20.0, 40.0, 50.0, 80.0);
        let right = BBox::new(100.0, 50.0, 130.0, 95.0);
        let hands = vec![
            HandAnnotation {
                id: 3,
                bbox: left,
                side: HandSide::Left,
                contact: ContactState::Contact,
                glove: GloveStatus::Glove,
                keypoints: keypoints_in(&left),
                offset: Some(derive_offset(&left, &objects[0].bbox, w, h)),
                active_object_id: Some(0),
            },
            HandAnnotation {
                id: 4,
                bbox: right,
                side: HandSide::Right,
                contact: ContactState::NoContact,
                glove: GloveStatus::NoGlove,
                keypoints: keypoints_in(&right),
                offset: None,
                active_object_id: None,
            },
        ];
        Dataset {
            categories: vec![
                Category { id: 0, name: "box".into() },
                Category { id: 1, name: "cylinder".into() },
                Category { id: 2, name: "tool".into() },
            ],
            images: vec![ImageRecord {
                image_id: "img0".into(),
                width: w as u32,
                height: h as u32,
                rgb_path: "rgb/img0.png".into(),
                depth_path: None,
                mask_path: None,
                hands,
                objects,
            }],
            split: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(content: &str) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.json");
        std::fs::write(&path, content).unwrap();
        (dir, path)
    }

    #[test]
    fn empty_file_parses_to_empty_dataset() {
        let (_d, p) = write_tmp("");
        let (ds, w) = parse_dataset(&p).unwrap();
        assert!(ds.images.is_empty() && w.is_empty());
        let (_d, p) = write_tmp(r#"{"categories":[],"images":[]}"#);
        assert_eq!(parse_dataset(&p).unwrap().0.images.len(), 0);
    }

    #[test]
    fn fixture_counts() {
        let ds = one_image();
        let (_d, p) = write_tmp(&to_canonical_json(&ds));
        let (parsed, warnings) = parse_dataset(&p).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(parsed.split.as_deref(), Some("train"));
        assert_eq!(parsed.images.len(), 1);
        assert_eq!(parsed.images[0].hands.len(), 2);
        assert_eq!(parsed.images[0].objects.len(), 3);
        let left = parsed.images[0].hands.iter().filter(|h| h.side == HandSide::Left).count();
        assert_eq!(left, 1);
    }

    #[test]
    fn contact_hand_without_object_is_rejected() {
        let mut ds = one_image();
        ds.images[0].hands[0].active_object_id = None;
        let (_d, p) = write_tmp(&to_canonical_json(&ds));
        let err = parse_dataset(&p).unwrap_err();
        assert!(err.to_string().contains("invariant violation"), "{err}");
    }

    #[test]
    fn dangling_object_is_rejected() {
        let mut ds = one_image();
        ds.images[0].hands[0].active_object_id = Some(99);
        let err = validate_dataset(&mut ds).unwrap_err();
        assert!(matches!(err, Error::DanglingObject { object_id: 99, .. }));
    }

    #[test]
    fn wrong_keypoint_count_and_stale_active_flag() {
        let mut ds = one_image();
        ds.images[0].hands[1].keypoints.pop();
        assert!(validate_dataset(&mut ds).is_err());
        let mut ds = one_image();
        ds.images[0].objects[1].active = true;
        assert!(validate_dataset(&mut ds).is_err());
        let mut ds = one_image();
        ds.images[0].objects[2].category_id = 7;
        assert!(validate_dataset(&mut ds).is_err());
    }

    #[test]
    fn malformed_document() {
        let (_d, p) = write_tmp(r#"{"categories":[], "images":[{"image_id": 3}]}"#);
        assert!(matches!(parse_dataset(&p), Err(Error::Malformed { .. })));
    }

    #[test]
    fn boxes_are_clamped_with_warning() {
        let mut ds = one_image();
        ds.images[0].objects[2].bbox = BBox::new(160.0, 60.0, 210.0, 90.0);
        let warnings = validate_dataset(&mut ds).unwrap();
        assert_eq!(warnings.len(), 1);
        assert_eq!(ds.images[0].objects[2].bbox.x_max, 200.0);
    }

    #[test]
    fn numeric_visibility_flags_are_accepted() {
        let kp: Keypoint = serde_json::from_str("[1.5, 2.0, 0]").unwrap();
        assert!(!kp.visible);
        let kp: Keypoint = serde_json::from_str("[1.5, 2.0, 2]").unwrap();
        assert!(kp.visible);
    }

    #[test]
    fn canonical_rewrite_is_byte_identical() {
        let text = to_canonical_json(&one_image());
        let (_d, p) = write_tmp(&text);
        let (parsed, _) = parse_dataset(&p).unwrap();
        assert_eq!(to_canonical_json(&parsed), text);
    }

    #[test]
    fn fixture_stats() {
        let report = compute_stats(&[one_image()], true);
        let s = &report.total;
        assert_eq!((s.n_images, s.n_hands, s.n_ehois, s.n_left, s.n_right, s.n_objects), (1, 2, 1, 1, 1, 3));
        assert_eq!(s.glove_fraction, 50.0);
        assert_eq!(report.splits.len(), 1);
    }

    #[test]
    fn zero_hand_stats() {
        let mut ds = one_image();
        ds.images[0].hands.clear();
        for o in &mut ds.images[0].objects {
            o.active = false;
        }
        let s = compute_stats(&[ds, Dataset::default()], true);
        assert_eq!(s.total.n_hands, 0);
        assert_eq!(s.total.glove_fraction, 0.0);
        assert_eq!(s.splits[1].1, DatasetStats::default());
    }

    #[test]
    fn offset_examples() {
        let at = |x: f64, y: f64| BBox::from_center(x, y, 4.0, 4.0);
        assert_eq!(derive_offset(&at(10.0, 10.0), &at(10.0, 10.0), 50.0, 50.0), OffsetVector::ZERO);

        let o = derive_offset(&at(0.0, 0.0), &at(30.0, 40.0), 300.0, 400.0);
        assert!((o.v_x - 0.6).abs() < 1e-12 && (o.v_y - 0.8).abs() < 1e-12);
        assert!((o.m - 0.1).abs() < 1e-12);

        let o = derive_offset(&at(5.0, 5.0), &at(5.0, 1.0), 100.0, 100.0);
        assert!(o.v_x.abs() < 1e-12 && (o.v_y + 1.0).abs() < 1e-12);
        assert!((o.m - 4.0 / 20000f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let hand = BBox::from_center(50.0, 50.0, 10.0, 10.0);
        assert_eq!(project_interaction_point(&hand, &OffsetVector::ZERO, 300.0, 400.0), (50.0, 50.0));
        let off = OffsetVector { v_x: 0.0, v_y: 1.0, m: 0.1 };
        let (x, y) = project_interaction_point(&hand, &off, 300.0, 400.0);
        assert!((x - 50.0).abs() < 1e-12 && (y - 100.0).abs() < 1e-12);
    }

    #[test]
    fn stats_table_formatting() {
        let text = compute_stats(&[one_image().with_split("Train")], true).to_string();
        assert!(text.lines().next().unwrap().contains("%glove hands"));
        assert!(text.contains("50.00"));
    }

    prop_compose! {
        fn arb_box()(x in 0.0f64..500.0, y in 0.0f64..500.0, w in 1.0f64..200.0, h in 1.0f64..200.0) -> BBox {
            BBox::new(x, y, x + w, y + h)
        }
    }

    proptest! {
        #[test]
        fn offset_round_trip(h in arb_box(), o in arb_box(), w in 64.0f64..2000.0, ht in 64.0f64..2000.0) {
            let off = derive_offset(&h, &o, w, ht);
            prop_assert!(off.is_valid());
            let (x, y) = project_interaction_point(&h, &off, w, ht);
            let (ox, oy) = o.center();
            prop_assert!((x - ox).abs() <= 1e-6 && (y - oy).abs() <= 1e-6);
        }

        #[test]
        fn serialization_round_trip(shift in -5.0f64..5.0, glove in any::<bool>()) {
            let mut ds = one_image();
            ds.images[0].hands[1].bbox = ds.images[0].hands[1].bbox.translate(shift, 0.0);
            ds.images[0].hands[1].glove = GloveStatus::from_index(glove as usize);
            let text = to_canonical_json(&ds);
            let back: Dataset = serde_json::from_str(&text).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
