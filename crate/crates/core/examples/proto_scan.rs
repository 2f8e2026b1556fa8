//! Scratch scanner: how far apart are class-prototype embeddings for
//! different prototype streams. Not part of the build.

use promptlab_core::data::{make_synthetic_dataset, SyntheticSpec};
use promptlab_core::model::{ModelConfig, PromptModel};
use promptlab_core::schedule::PromptSchedule;
use promptlab_core::tensor::Tensor;

fn main() {
    let config = ModelConfig {
        temperature: 0.01,
        text_prompt_rows: 4,
        ..ModelConfig::default()
    };
    let schedule = PromptSchedule::deep_vpt(6, 4).unwrap();
    let model = PromptModel::init(config, schedule, 0).unwrap();

    let mut scored: Vec<(f64, f64, u64)> = Vec::new();
    for proto_seed in 0..300u64 {
        let data = make_synthetic_dataset(&SyntheticSpec {
            classes: 8,
            per_class: 1,
            noise: 0.0,
            prototype_seed: proto_seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let us: Vec<Vec<f64>> = (0..8)
            .map(|i| {
                let img = Tensor::constant(data.images[i].clone(), vec![16, 16, 3]).unwrap();
                model.encode_image(&img).unwrap().to_vec()
            })
            .collect();
        let mut worst = f64::NEG_INFINITY;
        let mut mean = 0.0;
        let mut pairs = 0;
        for a in 0..8 {
            for b in (a + 1)..8 {
                let cos: f64 = us[a].iter().zip(&us[b]).map(|(x, y)| x * y).sum();
                worst = worst.max(cos);
                mean += cos;
                pairs += 1;
            }
        }
        scored.push((worst, mean / pairs as f64, proto_seed));
    }
    scored.sort_by(|x, y| f64::total_cmp(&x.0, &y.0));
    println!("best prototype streams (worst-pair cos, mean cos, seed):");
    for (worst, mean, seed) in scored.iter().take(8) {
        println!("  worst {worst:.4} mean {mean:.4} seed {seed}");
    }
    println!("baseline seed 0: {:?}", scored.iter().find(|s| s.2 == 0).unwrap());
}
