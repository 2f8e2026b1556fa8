//! Joint-embedding head: projections into the shared space, the
//! cosine-similarity classifier, and the training loss.
//!
//! Class weights are the normalized text embeddings of the class-name token
//! lists; an image is classified by the softmax of its cosine similarities
//! to those weights, sharpened by a fixed temperature.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand_chacha::ChaCha8Rng;

use crate::encoder::INIT_STD;
use crate::error::Error;
use crate::model::PromptModel;
use crate::prompts::{run_text_encoder, run_vision_encoder};
use crate::rng::normal_vec;
use crate::tensor::Tensor;
use crate::Result;

/// Branch-to-joint projections and the classifier temperature.
pub struct ProjectionParams {
    /// d_t x d_joint.
    pub text_proj: Tensor,
    /// d_v x d_joint.
    pub image_proj: Tensor,
    /// Fixed softmax temperature; never trained.
    pub temperature: f64,
}

impl ProjectionParams {
    pub fn init(
        d_t: usize,
        d_v: usize,
        d_joint: usize,
        temperature: f64,
        rng: &mut ChaCha8Rng,
        trainable: bool,
    ) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let make = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let data = normal_vec(rng, rows * cols, INIT_STD);
            if trainable {
                Tensor::param(data, vec![rows, cols]).unwrap()
            } else {
                Tensor::constant(data, vec![rows, cols]).unwrap()
            }
        };
        Ok(ProjectionParams {
            text_proj: make(rng, d_t, d_joint),
            image_proj: make(rng, d_v, d_joint),
            temperature,
        })
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.text_proj"), self.text_proj.clone()),
            (format!("{prefix}.image_proj"), self.image_proj.clone()),
        ]
    }
}

/// Stacked unit-norm class embeddings, one row per class.
pub struct ClassWeights {
    /// C x d_joint with unit-norm rows.
    pub w: Tensor,
}

impl ClassWeights {
    pub fn num_classes(&self) -> usize {
        self.w.rows()
    }

    /// Check the unit-norm row invariant within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let (rows, cols) = self.w.dims2()?;
        let data = self.w.to_vec();
        for r in 0..rows {
            let norm: f64 =
                libm::sqrt(data[r * cols..(r + 1) * cols].iter().map(|v| v * v).sum());
            if (norm - 1.0).abs() > tol {
                return Err(Error::Numeric(format!(
                    "class weight row {r} has norm {norm}, expected 1"
                )));
            }
        }
        Ok(())
    }
}

/// Softmax over cosine similarities between embedding rows and class
/// weights, scaled by `1/temperature`. Accepts a batch: `u` is `B x d`.
pub fn predict_probs(u: &Tensor, weights: &ClassWeights, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    u.matmul(&weights.w.transpose()?)?
        .scale(1.0 / temperature)
        .softmax_rows()
}

/// Mean negative log probability of the true class.
pub fn cross_entropy_loss(probs: &Tensor, labels: &[usize]) -> Result<Tensor> {
    Tensor::cross_entropy_from_probs(probs, labels)
}

impl PromptModel {
    /// Unit-norm joint embedding of one image (`1 x d_joint`).
    pub fn encode_image(&self, image: &Tensor) -> Result<Tensor> {
        let class_row = run_vision_encoder(
            &self.vision_layers,
            &self.embed,
            &self.schedule,
            &self.coupling,
            &self.text_prompts,
            image,
        )?;
        class_row.matmul(&self.proj.image_proj)?.l2_normalize_rows()
    }

    /// Unit-norm joint embedding of one class-name token list (`1 x d_joint`).
    pub fn encode_text_class(&self, class_tokens: &[usize]) -> Result<Tensor> {
        let sentence = run_text_encoder(
            &self.text_layers,
            &self.embed,
            &self.text_prompts,
            &self.config.template_tokens,
            class_tokens,
        )?;
        sentence.matmul(&self.proj.text_proj)?.l2_normalize_rows()
    }

    /// Class-weight rows for a list of class-name token lists, in order.
    pub fn encode_texts(&self, class_token_lists: &[Vec<usize>]) -> Result<ClassWeights> {
        if class_token_lists.len() < 2 {
            return Err(Error::Data(format!(
                "classification needs at least 2 classes, got {}",
                class_token_lists.len()
            )));
        }
        let rows = class_token_lists
            .iter()
            .map(|tokens| self.encode_text_class(tokens))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClassWeights { w: Tensor::concat_rows(&rows)? })
    }

    /// Stacked unit-norm image embeddings (`B x d_joint`).
    pub fn encode_image_batch(&self, images: &[Tensor]) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Data(String::from("empty image batch")));
        }
        let rows =
            images.iter().map(|im| self.encode_image(im)).collect::<Result<Vec<_>>>()?;
        Tensor::concat_rows(&rows)
    }

    /// Class probabilities for a batch of images under the given weights.
    pub fn predict_batch(&self, images: &[Tensor], weights: &ClassWeights) -> Result<Tensor> {
        let u = self.encode_image_batch(images)?;
        predict_probs(&u, weights, self.proj.temperature)
    }

    /// Full differentiable loss: encode texts and images under current
    /// parameters, classify, and take the cross entropy against `labels`.
    pub fn batch_loss(
        &self,
        images: &[Tensor],
        labels: &[usize],
        class_token_lists: &[Vec<usize>],
    ) -> Result<Tensor> {
        let weights = self.encode_texts(class_token_lists)?;
        let probs = self.predict_batch(images, &weights)?;
        cross_entropy_loss(&probs, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::{stream_rng, uniform_vec};
    use crate::schedule::PromptSchedule;

    fn small_model(seed: u64) -> PromptModel {
        let config = ModelConfig {
            num_layers: 2,
            num_heads: 2,
            d_t: 8,
            d_v: 12,
            d_joint: 8,
            mlp_ratio: 2,
            image_size: (8, 8),
            patch: 4,
            vocab_size: 32,
            max_seq_len: 8,
            template_tokens: vec![1, 2],
            ..ModelConfig::default()
        };
        let schedule = PromptSchedule::mpl(2, 2, 1, 2).unwrap();
        PromptModel::init(config, schedule, seed).unwrap()
    }

    fn random_image(seed: u64) -> Tensor {
        let mut rng = stream_rng(seed, 99);
        Tensor::constant(uniform_vec(&mut rng, 8 * 8 * 3), vec![8, 8, 3]).unwrap()
    }

    fn unit_rows(rng: &mut rand_chacha::ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let t = Tensor::constant(normal_vec(rng, rows * cols, 1.0), vec![rows, cols]).unwrap();
        t.l2_normalize_rows().unwrap()
    }

    #[test]
    fn image_embedding_is_unit_norm_and_deterministic() {
        let model = small_model(3);
        let image = random_image(1);
        let u = model.encode_image(&image).unwrap();
        let norm: f64 = libm::sqrt(u.to_vec().iter().map(|v| v * v).sum());
        assert!((norm - 1.0).abs() < 1e-12);
        let u2 = model.encode_image(&image).unwrap();
        assert_eq!(u.to_vec(), u2.to_vec());
    }

    #[test]
    fn zero_projection_surfaces_a_numeric_error() {
        let model = small_model(4);
        model.proj.image_proj.set_data(vec![0.0; 12 * 8]).unwrap();
        let err = model.encode_image(&random_image(2)).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "{err}");
    }

    #[test]
    fn class_weights_are_unit_norm_and_order_follows_input() {
        let model = small_model(5);
        let lists = vec![vec![10usize, 11], vec![12, 13], vec![14]];
        let w = model.encode_texts(&lists).unwrap();
        assert_eq!(w.num_classes(), 3);
        w.validate(1e-12).unwrap();

        let swapped = vec![lists[1].clone(), lists[0].clone(), lists[2].clone()];
        let w2 = model.encode_texts(&swapped).unwrap();
        assert_eq!(
            w.w.slice_rows(0, 1).unwrap().to_vec(),
            w2.w.slice_rows(1, 2).unwrap().to_vec()
        );
        assert_eq!(
            w.w.slice_rows(1, 2).unwrap().to_vec(),
            w2.w.slice_rows(0, 1).unwrap().to_vec()
        );

        let duplicated = vec![lists[0].clone(), lists[0].clone()];
        let w3 = model.encode_texts(&duplicated).unwrap();
        assert_eq!(
            w3.w.slice_rows(0, 1).unwrap().to_vec(),
            w3.w.slice_rows(1, 2).unwrap().to_vec()
        );
    }

    #[test]
    fn fewer_than_two_classes_is_rejected() {
        let model = small_model(6);
        assert!(matches!(
            model.encode_texts(&[vec![5usize]]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn identical_weights_give_uniform_probabilities() {
        let mut rng = stream_rng(7, 0);
        let row = unit_rows(&mut rng, 1, 8);
        let w = ClassWeights { w: row.broadcast_rows(4).unwrap() };
        let u = unit_rows(&mut rng, 1, 8);
        let p = predict_probs(&u, &w, 0.01).unwrap().to_vec();
        for v in p {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_pair_matches_closed_form_softmax() {
        let mut w_data = vec![0.0; 2 * 4];
        w_data[0] = 1.0; // w1 = e1
        w_data[4 + 1] = 1.0; // w2 = e2
        let w = ClassWeights { w: Tensor::constant(w_data, vec![2, 4]).unwrap() };
        let mut u_data = vec![0.0; 4];
        u_data[0] = 1.0; // u = w1
        let u = Tensor::constant(u_data, vec![1, 4]).unwrap();
        let p = predict_probs(&u, &w, 1.0).unwrap().to_vec();
        let e = libm::exp(1.0);
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[1] - 1.0 / (e + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn temperature_changes_probs_but_not_argmax() {
        let mut rng = stream_rng(8, 0);
        let w = ClassWeights { w: unit_rows(&mut rng, 5, 8) };
        let u = unit_rows(&mut rng, 1, 8);
        let argmax = |p: &[f64]| {
            p.iter().enumerate().fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv { (i, v) } else { (bi, bv) }
            })
        };
        let p1 = predict_probs(&u, &w, 1.0).unwrap().to_vec();
        let p2 = predict_probs(&u, &w, 0.01).unwrap().to_vec();
        assert_eq!(argmax(&p1).0, argmax(&p2).0);
        assert!(p2[argmax(&p2).0] > p1[argmax(&p1).0]);
        assert!(p2[argmax(&p2).0] > 0.999);
    }

    #[test]
    fn predict_matches_direct_formula_on_random_unit_vectors() {
        let mut rng = stream_rng(9, 0);
        let w = ClassWeights { w: unit_rows(&mut rng, 6, 8) };
        let u = unit_rows(&mut rng, 3, 8);
        let tau = 0.07;
        let got = predict_probs(&u, &w, tau).unwrap().to_vec();

        let u_data = u.to_vec();
        let w_data = w.w.to_vec();
        for b in 0..3 {
            let sims: Vec<f64> = (0..6)
                .map(|c| (0..8).map(|k| u_data[b * 8 + k] * w_data[c * 8 + k]).sum::<f64>())
                .collect();
            let max = sims.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = sims.iter().map(|s| libm::exp((s - max) / tau)).collect();
            let z: f64 = exps.iter().sum();
            for c in 0..6 {
                assert!((got[b * 6 + c] - exps[c] / z).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let mut rng = stream_rng(10, 0);
        let w = ClassWeights { w: unit_rows(&mut rng, 2, 8) };
        let u = unit_rows(&mut rng, 1, 8);
        assert!(matches!(predict_probs(&u, &w, 0.0), Err(Error::Config(_))));
        assert!(matches!(predict_probs(&u, &w, -1.0), Err(Error::Config(_))));
    }

    #[test]
    fn loss_values_for_perfect_and_uniform_predictions() {
        let p = Tensor::constant(vec![1.0, 0.0, 0.0, 0.0], vec![1, 4]).unwrap();
        assert_eq!(cross_entropy_loss(&p, &[0]).unwrap().item().unwrap(), 0.0);
        let p = Tensor::constant(vec![0.25; 4], vec![1, 4]).unwrap();
        let loss = cross_entropy_loss(&p, &[3]).unwrap().item().unwrap();
        assert!((loss - libm::log(4.0)).abs() < 1e-12);
    }

    #[test]
    fn frozen_backbone_receives_no_gradient_from_the_full_loss() {
        let model = small_model(11);
        let images = [random_image(3), random_image(4)];
        let lists = vec![vec![10usize, 11], vec![12, 13], vec![14, 15]];
        let loss = model.batch_loss(&images, &[0, 2], &lists).unwrap();
        loss.backward().unwrap();
        for (name, t) in model.frozen_params() {
            assert!(t.grad().is_none(), "{name} accumulated a gradient");
        }
        let mut trainable_hit = 0;
        for (_, t) in model.trainable_params() {
            if t.grad().map(|g| g.iter().any(|&v| v != 0.0)).unwrap_or(false) {
                trainable_hit += 1;
            }
        }
        assert!(trainable_hit > 0, "no trainable parameter received gradient");
    }

    #[test]
    fn full_head_gradient_matches_finite_differences() {
        let model = small_model(12);
        let images = [random_image(5)];
        let lists = vec![vec![10usize], vec![12]];
        let labels = [1usize];
        model.zero_grads();
        let loss = model.batch_loss(&images, &labels, &lists).unwrap();
        loss.backward().unwrap();
        let mut f = || model.batch_loss(&images, &labels, &lists)?.item();
        // Spot-check one tensor of each trainable kind end to end.
        for (name, t) in model.trainable_params() {
            if name == "text_prompt.0" || name == "coupling.1.b" {
                let check = crate::gradcheck::finite_diff_check(&mut f, &t, 1e-5).unwrap();
                assert!(check.max_rel_error < 1e-5, "{name}: {}", check.max_rel_error);
            }
        }
    }
}
