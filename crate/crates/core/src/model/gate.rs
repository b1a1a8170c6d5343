//! Decision-level mixture-of-experts gating.
//!
//! The gate concatenates the three experts' pre-softmax logits per
//! utterance, maps them through one linear layer to three scores, and
//! softmaxes to simplex weights. The fused logit is the weighted sum of
//! the expert logits; the final class distribution is its softmax.

use rand_chacha::ChaCha8Rng;

use crate::graph::{concat, Value};
use crate::nn;
use crate::params::{BoundParams, ParameterSet};
use crate::tensor::Tensor;

/// The three experts, in gate-weight order.
pub const EXPERTS: [&str; 3] = ["speech", "text", "multimodal"];

/// Pre-softmax logits from the three experts for one conversation.
#[derive(Clone, Debug)]
pub struct ExpertLogits {
    pub speech: Tensor,
    pub text: Tensor,
    pub multimodal: Tensor,
}

impl ExpertLogits {
    pub fn validate(&self) {
        assert_eq!(self.speech.shape(), self.text.shape(), "expert logit shapes differ");
        assert_eq!(self.speech.shape(), self.multimodal.shape(), "expert logit shapes differ");
    }
}

/// Per-utterance simplex weights over (speech, text, multimodal).
#[derive(Clone, Debug)]
pub struct GateWeights {
    /// `[n, 3]`, rows nonnegative and summing to 1.
    pub beta: Tensor,
}

impl GateWeights {
    /// Wraps a `[n, 3]` tensor, checking the simplex invariant.
    pub fn from_tensor(beta: Tensor) -> Self {
        assert_eq!(beta.rank(), 2);
        assert_eq!(beta.shape()[1], 3, "gate weights must have 3 columns");
        for i in 0..beta.shape()[0] {
            let row = beta.row(i);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6, "gate row {i} sums to {sum}");
            assert!(row.iter().all(|&b| b >= 0.0), "negative gate weight in row {i}");
        }
        GateWeights { beta }
    }
}

/// Registers the gate: a single linear layer `3 * class_count -> 3`.
pub fn init_params(ps: &mut ParameterSet, rng: &mut ChaCha8Rng, class_count: usize) {
    nn::init_linear(ps, rng, "gate", 3 * class_count, 3);
}

/// `[n, 3]` simplex weights from concatenated expert logits.
pub fn gate_forward<'g>(
    p: &BoundParams<'g>,
    speech: Value<'g>,
    text: Value<'g>,
    multimodal: Value<'g>,
) -> Value<'g> {
    let stacked = concat(&[speech, text, multimodal], 1);
    nn::linear_fw(p, "gate", stacked).softmax()
}

/// Weighted sum of expert logits under the gate weights:
/// `beta_s * y_s + beta_t * y_t + beta_m * y_m`, per utterance.
pub fn fuse<'g>(
    speech: Value<'g>,
    text: Value<'g>,
    multimodal: Value<'g>,
    beta: Value<'g>,
) -> Value<'g> {
    let b_s = beta.slice_cols(0, 1);
    let b_t = beta.slice_cols(1, 1);
    let b_m = beta.slice_cols(2, 1);
    speech.mul(b_s).add(text.mul(b_t)).add(multimodal.mul(b_m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::params::uniform;
    use rand::SeedableRng;

    fn random(seed: u64, n: usize, c: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        uniform(&mut rng, vec![n, c], 3.0)
    }

    #[test]
    fn zero_gate_gives_uniform_weights() {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_params(&mut ps, &mut rng, 4);
        let shape = ps.get("gate.w").unwrap().shape().to_vec();
        *ps.get_mut("gate.w").unwrap() = Tensor::zeros(shape);
        let g = Graph::new(0);
        let p = ps.bind(&g);
        let beta = gate_forward(&p, g.constant(random(1, 5, 4)), g.constant(random(2, 5, 4)), g.constant(random(3, 5, 4)))
            .tensor();
        for i in 0..5 {
            for j in 0..3 {
                assert!((beta.get2(i, j) - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_score_gives_softmax_weights() {
        // Zero weights with bias (1, 0, 0): every utterance gets
        // beta = softmax(1, 0, 0) = (0.576117, 0.211942, 0.211942).
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_params(&mut ps, &mut rng, 2);
        let w_shape = ps.get("gate.w").unwrap().shape().to_vec();
        *ps.get_mut("gate.w").unwrap() = Tensor::zeros(w_shape);
        *ps.get_mut("gate.b").unwrap() = Tensor::from_vec(vec![1.0, 0.0, 0.0]);
        let g = Graph::new(0);
        let p = ps.bind(&g);
        let beta = gate_forward(&p, g.constant(random(2, 3, 2)), g.constant(random(3, 3, 2)), g.constant(random(4, 3, 2)))
            .tensor();
        for i in 0..3 {
            assert!((beta.get2(i, 0) - 0.5761168847658291).abs() < 1e-12);
            assert!((beta.get2(i, 1) - 0.21194155761708547).abs() < 1e-12);
            assert!((beta.get2(i, 2) - 0.21194155761708547).abs() < 1e-12);
        }
    }

    #[test]
    fn gate_rows_lie_on_simplex() {
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        init_params(&mut ps, &mut rng, 3);
        let g = Graph::new(0);
        let p = ps.bind(&g);
        let beta = gate_forward(&p, g.constant(random(6, 50, 3)), g.constant(random(7, 50, 3)), g.constant(random(8, 50, 3)))
            .tensor();
        let _ = GateWeights::from_tensor(beta); // panics on violation
    }

    #[test]
    fn one_hot_beta_recovers_expert_bitwise() {
        let g = Graph::new(0);
        let ls = g.constant(random(10, 4, 3));
        let lt = g.constant(random(11, 4, 3));
        let lm = g.constant(random(12, 4, 3));
        let mut beta = Tensor::zeros(vec![4, 3]);
        for i in 0..4 {
            beta.set2(i, 0, 1.0);
        }
        let fused = fuse(ls, lt, lm, g.constant(beta)).tensor();
        for (a, b) in fused.data().iter().zip(ls.tensor().data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn equal_logits_are_a_fixed_point() {
        let g = Graph::new(0);
        let l = g.constant(random(13, 3, 4));
        let mut beta = Tensor::zeros(vec![3, 3]);
        for i in 0..3 {
            beta.set2(i, 0, 0.2);
            beta.set2(i, 1, 0.5);
            beta.set2(i, 2, 0.3);
        }
        let fused = fuse(l, l, l, g.constant(beta)).tensor();
        assert!(fused.max_abs_diff(&l.tensor()) < 1e-12);
    }

    #[test]
    fn fuse_hand_value() {
        // beta = (0.5, 0.25, 0.25), y_s = (2,0), y_t = (0,2), y_m = (1,1)
        // -> (1.25, 0.75).
        let g = Graph::new(0);
        let ls = g.constant(Tensor::from_rows(&[vec![2.0, 0.0]]));
        let lt = g.constant(Tensor::from_rows(&[vec![0.0, 2.0]]));
        let lm = g.constant(Tensor::from_rows(&[vec![1.0, 1.0]]));
        let beta = g.constant(Tensor::from_rows(&[vec![0.5, 0.25, 0.25]]));
        let fused = fuse(ls, lt, lm, beta).tensor();
        assert_eq!(fused.data(), &[1.25, 0.75]);
    }

    #[test]
    fn fused_argmax_can_differ_from_every_expert() {
        // y_s = (3, 2.9, 0), y_t = (0, 2.9, 3), y_m = (1.6, 1.5, 1.4),
        // uniform beta: expert argmaxes are 0, 2, 0 but the fused argmax
        // is class 1.
        let g = Graph::new(0);
        let ls = g.constant(Tensor::from_rows(&[vec![3.0, 2.9, 0.0]]));
        let lt = g.constant(Tensor::from_rows(&[vec![0.0, 2.9, 3.0]]));
        let lm = g.constant(Tensor::from_rows(&[vec![1.6, 1.5, 1.4]]));
        let beta = g.constant(Tensor::from_rows(&[vec![1.0 / 3.0; 3]]));
        let fused = fuse(ls, lt, lm, beta).tensor();
        let argmax = |row: &[f64]| {
            row.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0
        };
        assert_eq!(argmax(ls.tensor().row(0)), 0);
        assert_eq!(argmax(lt.tensor().row(0)), 2);
        assert_eq!(argmax(lm.tensor().row(0)), 0);
        assert_eq!(argmax(fused.row(0)), 1);
        assert!((fused.get2(0, 0) - 1.5333333333333332).abs() < 1e-12);
        assert!((fused.get2(0, 1) - 2.4333333333333336).abs() < 1e-9);
        assert!((fused.get2(0, 2) - 1.4666666666666668).abs() < 1e-12);
    }

    #[test]
    fn convexity_bounds_hold() {
        let g = Graph::new(0);
        let ls = g.constant(random(20, 6, 5));
        let lt = g.constant(random(21, 6, 5));
        let lm = g.constant(random(22, 6, 5));
        // Random simplex rows.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let raw = uniform(&mut rng, vec![6, 3], 2.0);
        let beta = {
            let mut b = raw.clone();
            for i in 0..6 {
                let row: Vec<f64> = raw.row(i).iter().map(|v| v.exp()).collect();
                let z: f64 = row.iter().sum();
                for j in 0..3 {
                    b.set2(i, j, row[j] / z);
                }
            }
            b
        };
        let fused = fuse(ls, lt, lm, g.constant(beta)).tensor();
        let (s, t, m) = (ls.tensor(), lt.tensor(), lm.tensor());
        for i in 0..6 {
            for j in 0..5 {
                let lo = s.get2(i, j).min(t.get2(i, j)).min(m.get2(i, j));
                let hi = s.get2(i, j).max(t.get2(i, j)).max(m.get2(i, j));
                let f = fused.get2(i, j);
                assert!(f >= lo - 1e-12 && f <= hi + 1e-12, "fused {f} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn gate_is_per_utterance() {
        // Permuting utterances permutes beta rows identically.
        let mut ps = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        init_params(&mut ps, &mut rng, 3);
        let g = Graph::new(0);
        let p = ps.bind(&g);
        let (ls, lt, lm) = (random(31, 4, 3), random(32, 4, 3), random(33, 4, 3));
        let beta = gate_forward(&p, g.constant(ls.clone()), g.constant(lt.clone()), g.constant(lm.clone())).tensor();

        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
            Tensor::from_rows(&rows)
        };
        let beta_p =
            gate_forward(&p, g.constant(permute(&ls)), g.constant(permute(&lt)), g.constant(permute(&lm))).tensor();
        assert!(beta_p.max_abs_diff(&permute(&beta)) < 1e-12);
    }
}
