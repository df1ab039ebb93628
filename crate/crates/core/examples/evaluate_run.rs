//! Scores a perfect run and a degraded copy (flipped gloves, jittered boxes,
//! shuffled confidences) against generated ground truth.
//!
//! ```bash
//! cargo run -p ehoi --example evaluate_run
//! ```

use ehoi::annotations::{Dataset, GloveStatus};
use ehoi::metrics::{evaluate, perfect_run, EvalConfig};
use ehoi::synthgen::{generate_scenes, SceneConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> ehoi::Result<()> {
    let config = SceneConfig { seed: 3, ..Default::default() };
    let gt = Dataset {
        categories: config.categories(),
        images: generate_scenes(&config, 0..100)?.into_iter().map(|s| s.record).collect(),
        split: Some("test".into()),
    };
    let eval = EvalConfig::default();
    let perfect = perfect_run(&gt);
    println!("perfect run\n{}", evaluate(&perfect, &gt, &eval)?);

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut noisy = perfect.clone();
    for img in &mut noisy.images {
        for h in &mut img.hands {
            h.confidence = rng.gen();
            if rng.gen_bool(0.2) {
                h.glove = match h.glove {
                    GloveStatus::Glove => GloveStatus::NoGlove,
                    GloveStatus::NoGlove => GloveStatus::Glove,
                };
            }
            if rng.gen_bool(0.1) {
                h.bbox = h.bbox.translate(h.bbox.width() * 0.6, 0.0);
            }
        }
        for o in &mut img.objects {
            o.confidence = rng.gen();
        }
    }
    println!("degraded run\n{}", evaluate(&noisy, &gt, &eval)?);
    Ok(())
}
