//! Analytic gradients against central finite differences, and the optimizer
//! against a scalar re-implementation.

use pcda::alignment::{align_loss, AlignmentBatch};
use pcda::encoder::{
    adamw_step, backward, forward_inputs, seg_loss, AdamState, AdamWConfig, ModelGrads, SegModel,
};
use pcda::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const REL: f64 = 1e-4;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> EmbeddingMatrix {
    let mut m = EmbeddingMatrix::zeros(rows, cols);
    m.data
        .iter_mut()
        .for_each(|v| *v = rng.gen_range(-1.0..1.0));
    m
}

struct Problem {
    model: SegModel,
    inputs: EmbeddingMatrix,
    labels: Vec<i32>,
    guided: EmbeddingMatrix,
    covered: Vec<bool>,
    lambda: f64,
}

impl Problem {
    fn loss(&self, model: &SegModel) -> f64 {
        let cache = forward_inputs(model, self.inputs.clone());
        let seg = seg_loss(&cache.logits, &self.labels)
            .map(|r| r.0)
            .unwrap_or(0.0);
        let al = align_loss(AlignmentBatch {
            f_point: &cache.embeddings,
            f_guided: &self.guided,
            covered: &self.covered,
        })
        .unwrap();
        seg + self.lambda * al.loss
    }

    fn grads(&self) -> ModelGrads {
        let cache = forward_inputs(&self.model, self.inputs.clone());
        let (_, gl) = seg_loss(&cache.logits, &self.labels).unwrap_or((
            0.0,
            EmbeddingMatrix::zeros(self.labels.len(), self.model.classes()),
        ));
        let al = align_loss(AlignmentBatch {
            f_point: &cache.embeddings,
            f_guided: &self.guided,
            covered: &self.covered,
        })
        .unwrap();
        let mut ge = al.grad;
        ge.data.iter_mut().for_each(|v| *v *= self.lambda);
        backward(&self.model, &cache, &gl, Some(&ge))
    }

    /// True if no hidden pre-activation is within `margin` of the ReLU kink
    /// and no embedding row is near zero, where the cosine is undefined.
    fn away_from_kinks(&self, margin: f64) -> bool {
        let cache = forward_inputs(&self.model, self.inputs.clone());
        let rows_ok = (0..cache.embeddings.rows).all(|i| {
            cache
                .embeddings
                .row(i)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                > margin
        });
        rows_ok && cache.hidden.data.iter().all(|v| v.abs() > margin)
    }
}

fn random_problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let hidden = rng.gen_range(2..8);
        let dim = rng.gen_range(2..6);
        let classes = rng.gen_range(2..5);
        let rows = rng.gen_range(1..10);
        let model = SegModel::init(hidden, dim, classes, &mut rng);
        let inputs = random_matrix(&mut rng, rows, model.input_width());
        let labels = (0..rows)
            .map(|_| rng.gen_range(-1..classes as i32))
            .collect();
        let guided = random_matrix(&mut rng, rows, dim);
        let covered = (0..rows).map(|_| rng.gen_bool(0.7)).collect();
        let lambda = [0.0, 0.5, 1.0, 3.0][rng.gen_range(0..4)];
        let p = Problem {
            model,
            inputs,
            labels,
            guided,
            covered,
            lambda,
        };
        if p.away_from_kinks(1e-3) {
            return p;
        }
    }
}

/// Worst relative error over every parameter of the problem.
fn worst_error(p: &Problem) -> f64 {
    let analytic = p.grads();
    let mut worst: f64 = 0.0;
    for t in 0..6 {
        for j in 0..p.model.tensors()[t].len() {
            let mut plus = p.model.clone();
            plus.tensors_mut()[t][j] += H;
            let mut minus = p.model.clone();
            minus.tensors_mut()[t][j] -= H;
            let numeric = (p.loss(&plus) - p.loss(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(analytic.tensors()[t][j], numeric));
        }
    }
    worst
}

#[test]
fn full_backward_matches_finite_differences() {
    for seed in 0..120 {
        let p = random_problem(seed);
        let e = worst_error(&p);
        assert!(e < REL, "seed {seed}: relative error {e:e}");
    }
}

#[test]
fn alignment_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..100 {
        let rows = rng.gen_range(1..8);
        let cols = rng.gen_range(1..6);
        let f = random_matrix(&mut rng, rows, cols);
        let g = random_matrix(&mut rng, rows, cols);
        let covered: Vec<bool> = (0..rows).map(|_| rng.gen_bool(0.8)).collect();
        let loss = |m: &EmbeddingMatrix| {
            align_loss(AlignmentBatch {
                f_point: m,
                f_guided: &g,
                covered: &covered,
            })
            .unwrap()
            .loss
        };
        let out = align_loss(AlignmentBatch {
            f_point: &f,
            f_guided: &g,
            covered: &covered,
        })
        .unwrap();
        for j in 0..f.data.len() {
            let mut plus = f.clone();
            plus.data[j] += H;
            let mut minus = f.clone();
            minus.data[j] -= H;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * H);
            assert!(rel_err(out.grad.data[j], numeric) < REL);
        }
    }
}

#[test]
fn seg_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let rows = rng.gen_range(1..8);
        let classes = rng.gen_range(1..6);
        let logits = random_matrix(&mut rng, rows, classes);
        let mut labels: Vec<i32> = (0..rows)
            .map(|_| rng.gen_range(-1..classes as i32))
            .collect();
        labels[0] = 0;
        let (_, grad) = seg_loss(&logits, &labels).unwrap();
        for j in 0..logits.data.len() {
            let mut plus = logits.clone();
            plus.data[j] += H;
            let mut minus = logits.clone();
            minus.data[j] -= H;
            let numeric = (seg_loss(&plus, &labels).unwrap().0
                - seg_loss(&minus, &labels).unwrap().0)
                / (2.0 * H);
            assert!(rel_err(grad.data[j], numeric) < REL);
        }
    }
}

#[test]
fn seg_loss_of_uniform_logits_is_log_classes() {
    let logits = EmbeddingMatrix::zeros(3, 4);
    let (loss, _) = seg_loss(&logits, &[0, 1, -1]).unwrap();
    assert!((loss - 4f64.ln()).abs() < 1e-12);
    assert!(seg_loss(&logits, &[-1, -1, -1]).is_err());
}

#[test]
fn adamw_matches_scalar_recursion() {
    let cfg = AdamWConfig {
        lr: 0.05,
        beta1: 0.8,
        beta2: 0.95,
        eps: 1e-8,
        weight_decay: 0.02,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let mut state = AdamState::new(&[2]);
    let (mut want, mut m, mut v) = (p.clone(), [0.0; 2], [0.0; 2]);
    for t in 1..=20 {
        let g: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        adamw_step(&mut [&mut p], &[&g], &mut state, &cfg);
        for j in 0..2 {
            m[j] = 0.8 * m[j] + 0.2 * g[j];
            v[j] = 0.95 * v[j] + 0.05 * g[j] * g[j];
            let mh = m[j] / (1.0 - 0.8f64.powi(t));
            let vh = v[j] / (1.0 - 0.95f64.powi(t));
            want[j] = want[j] - 0.05 * 0.02 * want[j] - 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        for j in 0..2 {
            assert!((p[j] - want[j]).abs() < 1e-14, "step {t}");
        }
    }
}

#[test]
fn adamw_with_zero_gradient_only_decays() {
    let cfg = AdamWConfig {
        lr: 0.1,
        weight_decay: 0.1,
        ..AdamWConfig::default()
    };
    let mut p = vec![1.0, -2.0];
    let mut state = AdamState::new(&[2]);
    for t in 1..=10 {
        adamw_step(&mut [&mut p], &[&[0.0, 0.0]], &mut state, &cfg);
        let s = 0.99f64.powi(t);
        assert!((p[0] - s).abs() < 1e-15 && (p[1] + 2.0 * s).abs() < 1e-15);
    }
}
