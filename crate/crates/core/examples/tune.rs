//! Scratch harness for training-regime exploration. Not part of the build.

use promptlab_core::data::{make_synthetic_dataset, SyntheticSpec};
use promptlab_core::model::{ModelConfig, PromptModel};
use promptlab_core::schedule::PromptSchedule;
use promptlab_core::train::{evaluate, train, TrainConfig};

#[derive(Clone)]
struct Trial {
    layers: usize,
    add: usize,
    rows: usize,
    template_len: usize,
    d_joint: usize,
    patch: usize,
    /// 0 plain (no vision prompts), 1 fresh per layer, 2 carried.
    kind: u8,
    tau: f64,
    lr: f64,
    batch: usize,
    momentum: f64,
    epochs: usize,
    wd: f64,
    cell: usize,
    proto: u64,
}

impl Default for Trial {
    fn default() -> Self {
        Trial {
            layers: 6,
            add: 4,
            rows: 4,
            template_len: 4,
            d_joint: 32,
            patch: 4,
            kind: 1,
            tau: 0.01,
            lr: 0.1,
            batch: 1,
            momentum: 0.9,
            epochs: 50,
            wd: 0.0,
            cell: 4,
            proto: 0,
        }
    }
}

fn wcos(model: &PromptModel, names: &[Vec<usize>]) -> f64 {
    let w = model.encode_texts(names).unwrap().w;
    let (c, d) = w.dims2().unwrap();
    let v = w.to_vec();
    let mut total = 0.0;
    let mut count = 0;
    for a in 0..c {
        for b in (a + 1)..c {
            let mut dot = 0.0;
            for j in 0..d {
                dot += v[a * d + j] * v[b * d + j];
            }
            total += dot;
            count += 1;
        }
    }
    total / count as f64
}

fn main() {
    let grid: Vec<Trial> = vec![
        Trial { proto: 111, ..Trial::default() },
        Trial { proto: 21, ..Trial::default() },
        Trial { proto: 218, ..Trial::default() },
        Trial { proto: 111, epochs: 150, ..Trial::default() },
    ];
    for t in grid {
        let config = ModelConfig {
            num_layers: t.layers,
            temperature: t.tau,
            text_prompt_rows: t.rows,
            template_tokens: (1..=t.template_len).collect(),
            d_joint: t.d_joint,
            patch: t.patch,
            ..ModelConfig::default()
        };
        let schedule = match t.kind {
            0 => PromptSchedule::plain(t.layers).unwrap(),
            1 => PromptSchedule::deep_vpt(t.layers, t.add).unwrap(),
            _ => PromptSchedule::mpl(t.layers, t.add, 0, t.layers).unwrap(),
        };
        let model = PromptModel::init(config, schedule, 0).unwrap();
        let data = make_synthetic_dataset(&SyntheticSpec {
            classes: 8,
            per_class: 32,
            cell: t.cell,
            prototype_seed: t.proto,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let (train_set, held_set) = data.split_train_heldout(16, 0).unwrap();
        let tc = TrainConfig {
            shots: 16,
            lr: t.lr,
            min_lr: t.lr,
            epochs: t.epochs,
            batch_size_train: t.batch,
            batch_size_eval: 128,
            momentum: t.momentum,
            weight_decay: t.wd,
            seed: 0,
            ..TrainConfig::default()
        };
        let before_h = evaluate(&model, &held_set, 128).unwrap().accuracy;
        let w0 = wcos(&model, &data.class_names);
        let start = std::time::Instant::now();
        let metrics = train(&model, &train_set, &tc).unwrap();
        let secs = start.elapsed().as_secs_f64();
        let after_h = evaluate(&model, &held_set, 128).unwrap().accuracy;
        let w1 = wcos(&model, &data.class_names);
        let lc = &metrics.loss_curve;
        println!(
            "L{} add{} rows{} tpl{} dj{} p{} k{} tau{} lr{} b{} m{} e{} wd{} c{} ps{}: train {:.2} held {before_h:.2}->{after_h:.2} \
             loss {:.2}->{:.2}->{:.2} wcos {w0:.2}->{w1:.2} ({secs:.0}s)",
            t.layers,
            t.add,
            t.rows,
            t.template_len,
            t.d_joint,
            t.patch,
            t.kind,
            t.tau,
            t.lr,
            t.batch,
            t.momentum,
            t.epochs,
            t.wd,
            t.cell,
            t.proto,
            metrics.accuracy,
            lc[0],
            lc[lc.len() / 2],
            lc[lc.len() - 1],
        );
    }
}
