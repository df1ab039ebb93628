//! Trains the network on freshly rendered scenes in GT-proposal mode and
//! reports attribute accuracy plus end-to-end metrics on held-out scenes.
//!
//! Usage: `cargo run --release --example train_toy -- [n_train] [n_test] [epochs]`

use ehoi::matching::MatchConfig;
use ehoi::metrics::{evaluate, EvalConfig};
use ehoi::net::{self, InferOptions, ModelConfig, Regime, TrainConfig, TrainData};
use ehoi::synthgen::{generate_scenes, SceneConfig};

fn main() -> ehoi::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n_train = args.first().copied().unwrap_or(300);
    let n_test = args.get(1).copied().unwrap_or(100);
    let epochs = args.get(2).copied().unwrap_or(4) as usize;

    let scene = SceneConfig::default();
    let train = net::samples_from_scenes(&generate_scenes(&scene, 0..n_train)?);
    let test_scenes = generate_scenes(&scene, 1_000_000..1_000_000 + n_test)?;
    let test = net::samples_from_scenes(&test_scenes);

    let mut cfg = TrainConfig::default();
    cfg.synth.epochs = epochs;
    cfg.synth.lr_steps = vec![epochs * 3 / 4];
    let data = TrainData { synth: Some(&train), real: None, val: Some(&test) };
    let out = net::train(&data, Regime::SynthOnly, &ModelConfig::default(), &cfg, 0, &mut |r| {
        if let Some(v) = &r.val {
            println!("epoch {:>2}  loss {:.4}  {v}  ({:.1}s)", r.epoch, r.loss.l_total, r.seconds);
        }
    })?;

    let run = net::run_inference(&out.model, &test, &InferOptions::default(), &MatchConfig::default())?;
    let gt = ehoi::annotations::Dataset {
        categories: scene.categories(),
        images: test_scenes.iter().map(|s| s.record.clone()).collect(),
        split: Some("test".into()),
    };
    println!("{}", evaluate(&run, &gt, &EvalConfig::default())?);
    Ok(())
}
