//! Renders a handful of synthetic scenes and writes them, plus a 4x4
//! contact sheet with annotated boxes, to a directory.
//!
//! ```bash
//! cargo run -p ehoi --example synth_scene -- /tmp/scenes
//! ```

use std::path::PathBuf;

use ehoi::annotations::{write_png, BBox, ContactState, GloveStatus};
use ehoi::synthgen::{generate_scene, write_scene_assets, SceneConfig};
use image::{imageops, Rgb, RgbImage};

fn draw_box(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    let x0 = b.x_min.max(0.0) as u32;
    let y0 = b.y_min.max(0.0) as u32;
    let x1 = (b.x_max.ceil() as u32).min(w).saturating_sub(1);
    let y1 = (b.y_max.ceil() as u32).min(h).saturating_sub(1);
    for x in x0..=x1 {
        img.put_pixel(x, y0, color);
        img.put_pixel(x, y1, color);
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, color);
        img.put_pixel(x1, y, color);
    }
}

fn main() -> ehoi::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth_scenes".into()));
    let config = SceneConfig { seed: 42, ..Default::default() };
    let (w, h) = (config.width, config.height);
    let scale = 3;
    let mut sheet = RgbImage::new(4 * w * scale, 4 * h * scale);
    for i in 0..16u64 {
        let scene = generate_scene(&config, i)?;
        write_scene_assets(&scene, &out)?;
        let mut view = imageops::resize(&scene.rgb, w * scale, h * scale, imageops::FilterType::Nearest);
        let up = |b: &BBox| BBox::new(b.x_min * 3.0, b.y_min * 3.0, b.x_max * 3.0, b.y_max * 3.0);
        for obj in &scene.record.objects {
            let c = if obj.active { Rgb([255, 0, 0]) } else { Rgb([0, 0, 255]) };
            draw_box(&mut view, &up(&obj.bbox), c);
        }
        for hand in &scene.record.hands {
            let c = match (hand.contact, hand.glove) {
                (ContactState::Contact, GloveStatus::Glove) => Rgb([255, 128, 0]),
                (ContactState::Contact, GloveStatus::NoGlove) => Rgb([255, 0, 255]),
                _ => Rgb([0, 255, 0]),
            };
            draw_box(&mut view, &up(&hand.bbox), c);
            for kp in &hand.keypoints {
                let (x, y) = ((kp.x * 3.0) as u32, (kp.y * 3.0) as u32);
                if x < view.width() && y < view.height() {
                    view.put_pixel(x, y, Rgb([0, 0, 0]));
                }
            }
        }
        let (gx, gy) = ((i % 4) as u32, (i / 4) as u32);
        imageops::overlay(&mut sheet, &view, (gx * w * scale) as i64, (gy * h * scale) as i64);
        println!(
            "scene {}: {} hands, {} objects",
            scene.record.image_id,
            scene.record.hands.len(),
            scene.record.objects.len()
        );
    }
    write_png(&out.join("contact_sheet.png"), &sheet)?;
    println!("wrote {}", out.join("contact_sheet.png").display());
    Ok(())
}
