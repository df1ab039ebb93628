//! Times single-frame inference of an untrained network in both modes.
//!
//! ```bash
//! cargo run -p ehoi --example latency_bench -- 30
//! ```

use std::time::Instant;

use ehoi::cli::latency_report;
use ehoi::net::{samples_from_scenes, InferMode, InferOptions, Model, ModelConfig};
use ehoi::synthgen::{generate_scenes, SceneConfig};

fn main() -> ehoi::Result<()> {
    let frames: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let model = Model::new(ModelConfig::default(), 0)?;
    let samples = samples_from_scenes(&generate_scenes(&SceneConfig::default(), 0..8)?);
    println!("{} parameters", model.n_parameters());
    for mode in [InferMode::GtProposals, InferMode::Detector] {
        let opts = InferOptions { mode, ..Default::default() };
        let mut times = Vec::new();
        for k in 0..frames + 3 {
            let t0 = Instant::now();
            model.infer(&samples[k % samples.len()], &opts)?;
            if k >= 3 {
                times.push(t0.elapsed().as_secs_f64() * 1e3);
            }
        }
        let r = latency_report(&times, mode, 96, 96, 3);
        println!("{mode:?}: mean {:.2} ms, median {:.2} ms, p90 {:.2} ms, {:.1} FPS", r.mean_ms, r.median_ms, r.p90_ms, r.fps);
    }
    Ok(())
}
