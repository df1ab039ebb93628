//! Pairs each scene with a mock glove augmentation, corrupts the background
//! of every third pair, and filters the set by hand-masked SSIM.
//!
//! ```bash
//! cargo run -p ehoi --example augment_validation
//! ```

use ehoi::augval::{filter_dataset, mock_augment, AugPair, AugvalConfig};
use ehoi::synthgen::{generate_scenes, SceneConfig};

fn main() -> ehoi::Result<()> {
    let config = SceneConfig { seed: 5, ..Default::default() };
    let scenes = generate_scenes(&config, 0..12)?;
    let pairs: Vec<AugPair> = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let hands: Vec<_> = s.record.hands.iter().map(|h| h.bbox).collect();
            AugPair {
                image_id: s.record.image_id.clone(),
                augmented: mock_augment(&s.rgb, &hands, i % 3 == 0),
                original: s.rgb.clone(),
                hands,
            }
        })
        .collect();
    let report = filter_dataset(&pairs, &AugvalConfig::default())?;
    println!("{:<14} {:>8} {:>8} {:>8}", "image", "ssim", "masked", "kept");
    for v in &report.pairs {
        println!("{:<14} {:>8.4} {:>7.1}% {:>8}", v.image_id, v.ssim, 100.0 * v.masked_fraction, v.kept);
    }
    if let Some(rate) = report.keep_rate {
        println!("keep rate {:.1}%", 100.0 * rate);
    }
    Ok(())
}
