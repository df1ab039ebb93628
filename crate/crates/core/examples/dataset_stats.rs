//! Generates three small splits in memory and prints the per-split table.
//!
//! ```bash
//! cargo run -p ehoi --example dataset_stats -- 300
//! ```

use ehoi::annotations::{compute_stats, Dataset};
use ehoi::synthgen::{generate_scenes, SceneConfig, SPLIT_NAMES};

fn main() -> ehoi::Result<()> {
    let n: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let config = SceneConfig { seed: 11, ..Default::default() };
    let mut splits = Vec::new();
    for (k, name) in SPLIT_NAMES.iter().enumerate() {
        let start = k as u64 * n;
        let scenes = generate_scenes(&config, start..start + n)?;
        let ds = Dataset {
            categories: config.categories(),
            images: scenes.into_iter().map(|s| s.record).collect(),
            split: None,
        };
        splits.push(ds.with_split(*name));
    }
    let report = compute_stats(&splits, true);
    print!("{report}");
    let total = &report.total;
    println!("left + right = {} + {} = {}", total.n_left, total.n_right, total.n_hands);
    Ok(())
}
