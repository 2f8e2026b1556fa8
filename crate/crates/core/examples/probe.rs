//! Scratch diagnostic for embedding and anchor geometry. Not part of the build.

use promptlab_core::data::{make_synthetic_dataset, FewShotDataset, SyntheticSpec};
use promptlab_core::model::{ModelConfig, PromptModel};
use promptlab_core::schedule::PromptSchedule;
use promptlab_core::tensor::Tensor;
use promptlab_core::train::{train, TrainConfig};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn unit(a: &[f64]) -> Vec<f64> {
    let n = norm(a);
    a.iter().map(|x| x / n).collect()
}

fn embed_all(model: &PromptModel, data: &FewShotDataset) -> Vec<Vec<f64>> {
    (0..data.len())
        .map(|i| {
            let img =
                Tensor::constant(data.images[i].clone(), vec![data.height, data.width, 3]).unwrap();
            model.encode_image(&img).unwrap().to_vec()
        })
        .collect()
}

fn report(model: &PromptModel, data: &FewShotDataset, tag: &str) {
    let classes = data.class_names.len();
    let d = model.config.d_joint;
    let us = embed_all(model, data);
    let w = model.encode_texts(&data.class_names).unwrap().w;
    let wv = w.to_vec();
    let anchors: Vec<Vec<f64>> = (0..classes).map(|c| wv[c * d..(c + 1) * d].to_vec()).collect();

    let mut centroids = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    for (u, &label) in us.iter().zip(&data.labels) {
        for j in 0..d {
            centroids[label][j] += u[j];
        }
        counts[label] += 1;
    }
    for c in 0..classes {
        for j in 0..d {
            centroids[c][j] /= counts[c] as f64;
        }
    }

    // Within-class spread: mean cosine of an embedding to its class centroid.
    let mut within = 0.0;
    for (u, &label) in us.iter().zip(&data.labels) {
        within += dot(u, &unit(&centroids[label]));
    }
    within /= us.len() as f64;

    // Between-class structure: centroid cosines, anchor cosines, and the
    // alignment of anchor differences with centroid differences.
    let mut cc = 0.0;
    let mut aa = 0.0;
    let mut align = 0.0;
    let mut pairs = 0;
    for a in 0..classes {
        for b in (a + 1)..classes {
            cc += dot(&unit(&centroids[a]), &unit(&centroids[b]));
            aa += dot(&anchors[a], &anchors[b]);
            let dc: Vec<f64> = centroids[a].iter().zip(&centroids[b]).map(|(x, y)| x - y).collect();
            let da: Vec<f64> = anchors[a].iter().zip(&anchors[b]).map(|(x, y)| x - y).collect();
            align += dot(&unit(&dc), &unit(&da));
            pairs += 1;
        }
    }
    cc /= pairs as f64;
    aa /= pairs as f64;
    align /= pairs as f64;

    // Raw cosine margins u*w_y - max_other u*w_c, the quantity the inverse
    // temperature amplifies.
    let mut margins: Vec<f64> = us
        .iter()
        .zip(&data.labels)
        .map(|(u, &label)| {
            let own = dot(u, &anchors[label]);
            let best_other = (0..classes)
                .filter(|&c| c != label)
                .map(|c| dot(u, &anchors[c]))
                .fold(f64::NEG_INFINITY, f64::max);
            own - best_other
        })
        .collect();
    margins.sort_by(f64::total_cmp);
    let q = |p: f64| margins[((margins.len() - 1) as f64 * p) as usize];
    let positive = margins.iter().filter(|&&m| m > 0.0).count() as f64 / margins.len() as f64;

    println!(
        "{tag}: within {within:.3} centroid-cos {cc:.3} anchor-cos {aa:.3} align {align:.3} \
         margins p10 {:.4} p50 {:.4} p90 {:.4} positive {positive:.2}",
        q(0.1),
        q(0.5),
        q(0.9)
    );
}

fn main() {
    let config = ModelConfig {
        temperature: 0.01,
        text_prompt_rows: 4,
        ..ModelConfig::default()
    };
    let schedule = PromptSchedule::mpl(6, 4, 0, 6).unwrap();
    let model = PromptModel::init(config, schedule, 0).unwrap();
    let data = make_synthetic_dataset(&SyntheticSpec {
        classes: 8,
        per_class: 32,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let (train_set, _held) = data.split_train_heldout(16, 0).unwrap();

    report(&model, &train_set, "init   ");
    let tc = TrainConfig {
        shots: 16,
        lr: 0.05,
        min_lr: 0.05,
        epochs: 50,
        batch_size_train: 1,
        batch_size_eval: 128,
        momentum: 0.9,
        seed: 0,
        ..TrainConfig::default()
    };
    let metrics = train(&model, &train_set, &tc).unwrap();
    println!("trained: accuracy {:.3}", metrics.accuracy);
    report(&model, &train_set, "trained");
}
