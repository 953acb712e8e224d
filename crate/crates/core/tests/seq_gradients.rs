use coordet::crf_field::UnaryScorer;
use coordet::em_engine::{m_step_gradient, m_step_objective, JointModel};
use coordet::event_data::{Event, EventSequence};
use coordet::linalg::{softmax, Matrix};
use coordet::optim::ParamSet;
use coordet::seq_model::{decode, grad_log_likelihood, log_likelihood, SeqModelConfig, SeqModelParams, SeqWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-4;
const REL_TOL: f64 = 1e-4;

fn toy_params(seed: u64) -> SeqModelParams {
    let cfg = SeqModelConfig {
        embed_dim: 8,
        components: 2,
        ..SeqModelConfig::compact(6)
    };
    let mut p = SeqModelParams::init(cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for t in p.tensors_mut() {
        t.add_assign(&Matrix::random_normal(t.rows(), t.cols(), 0.2, &mut rng));
    }
    p
}

fn toy_sequences(seed: u64, count: usize) -> Vec<EventSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let mut t = 0.0;
            let events = (0..rng.gen_range(1..7))
                .map(|_| {
                    t += rng.gen_range(0.05..6.0);
                    Event {
                        account: rng.gen_range(0..6),
                        t,
                    }
                })
                .collect();
            EventSequence::new(format!("s{k}"), events)
        })
        .collect()
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

#[test]
fn sequence_likelihood_gradient_matches_central_differences() {
    let params = toy_params(5);
    let batch = toy_sequences(6, 4);
    let (value, grad) = grad_log_likelihood(&batch, &params).unwrap();
    let f = |p: &SeqModelParams| -> f64 { batch.iter().map(|s| log_likelihood(s, p).unwrap()).sum() };
    assert!((value - f(&params)).abs() < 1e-9);
    for (k, (name, g)) in grad.named().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for i in 0..g.len() {
            let mut plus = params.clone();
            plus.tensors_mut()[k].as_mut_slice()[i] += H;
            let mut minus = params.clone();
            minus.tensors_mut()[k].as_mut_slice()[i] -= H;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(g.as_slice()[i], numeric));
        }
        assert!(worst < REL_TOL, "{name}: worst relative error {worst}");
    }
    assert_eq!(grad.tensors().len(), SeqWeights::NAMES.len());
}

#[test]
fn m_step_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let seqs = toy_sequences(9, 5);
    let model = JointModel {
        seq: toy_params(10),
        scorer: UnaryScorer::init(8, 6, 2, 11).unwrap(),
    };
    let rows: Vec<Vec<f64>> = (0..6).map(|_| softmax(&[rng.gen_range(-2.0..2.0), 0.0])).collect();
    let q = Matrix::from_rows(&rows);
    let lambda = 0.7;
    let (value, grad) = m_step_gradient(&seqs, &q, &model, 1.0, lambda).unwrap();
    let f = |m: &JointModel| m_step_objective(&seqs, &q, m, lambda).unwrap();
    assert!((value - f(&model)).abs() < 1e-9);
    let n_seq = model.seq.tensors().len();
    for k in std::iter::once(0).chain(n_seq..n_seq + 4) {
        let mut worst = 0.0f64;
        let g = grad.tensors()[k].clone();
        for i in 0..g.len() {
            let mut plus = model.clone();
            plus.tensors_mut()[k].as_mut_slice()[i] += H;
            let mut minus = model.clone();
            minus.tensors_mut()[k].as_mut_slice()[i] -= H;
            let numeric = (f(&plus) - f(&minus)) / (2.0 * H);
            worst = worst.max(rel_err(g.as_slice()[i], numeric));
        }
        assert!(worst < REL_TOL, "tensor {k}: worst relative error {worst}");
    }
}

#[test]
fn mark_probabilities_sum_to_one() {
    let params = toy_params(12);
    for s in toy_sequences(13, 10) {
        let d = decode(&s, &params).unwrap();
        for i in 0..d.mark_log_probs.rows() {
            let total: f64 = d.mark_log_probs.row(i).iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn gap_density_integrates_to_one() {
    let params = toy_params(14);
    let s = &toy_sequences(15, 1)[0];
    let d = decode(s, &params).unwrap();
    // Trapezoid rule in ln(tau), where d tau = tau d(ln tau).
    let (lo, hi, steps) = (-60.0f64, 60.0f64, 200_000);
    let dx = (hi - lo) / steps as f64;
    for mix in &d.gaps {
        let mut total = 0.0;
        for i in 0..=steps {
            let x = lo + i as f64 * dx;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            total += w * (mix.log_density(x.exp(), true) + x).exp() * dx;
        }
        assert!((total - 1.0).abs() < 1e-3, "mass {total}");
    }
}
