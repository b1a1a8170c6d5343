//! Finite-difference gradient verification across model variants.
//!
//! Every scalar parameter's analytic gradient of the total training loss
//! is compared against central differences. Dropout stays active: each
//! loss evaluation reseeds the graph so the masks are identical across
//! probes.

use moerc_core::data::{pad_conversation, Conversation, UtteranceRecord};
use moerc_core::loss::LossConfig;
use moerc_core::model::can::CanConfig;
use moerc_core::model::fusion::FusionConfig;
use moerc_core::model::{build_variant, Model, Variant};
use moerc_core::train::grad_check;

fn conversation(id: &str, n: usize, d_s: usize, d_t: usize, seed: u64) -> Conversation {
    // Cheap deterministic pseudo-data; no RNG needed for fixtures.
    let wave = |i: usize, j: usize, k: u64| (((i * 31 + j * 7) as f64 + k as f64 * 0.61) * 0.9).sin();
    Conversation {
        id: id.to_string(),
        utterances: (0..n)
            .map(|i| UtteranceRecord {
                id: format!("{id}-{i}"),
                label: (i + seed as usize) % 3,
                speech: (0..d_s).map(|j| wave(i, j, seed)).collect(),
                text: (0..d_t).map(|j| wave(i + 13, j, seed + 1)).collect(),
            })
            .collect(),
    }
}

fn tiny_model(variant: Variant, d_s: usize, d_t: usize, seed: u64) -> Model {
    let can_s = CanConfig {
        input_dim: d_s,
        tin_channels_per_kernel: 3,
        gru_hidden: 3,
        gru_layers: 1,
        fc_dropout: 0.2,
        class_count: 3,
    };
    let can_t = CanConfig { input_dim: d_t, ..can_s.clone() };
    let fusion = FusionConfig { model_dim: 4, heads: 2, layers: 1, dropout: 0.5, class_count: 3 };
    build_variant(variant, &can_s, &can_t, &fusion, seed).unwrap()
}

fn tiny_batch(d_s: usize, d_t: usize) -> Vec<moerc_core::data::PaddedConversation> {
    let c0 = conversation("g0", 3, d_s, d_t, 0);
    let c1 = conversation("g1", 2, d_s, d_t, 5);
    vec![pad_conversation(&c0, d_s, d_t, 3), pad_conversation(&c1, d_s, d_t, 3)]
}

#[test]
fn full_variant_gradients_match_finite_differences() {
    let model = tiny_model(Variant::Full, 5, 4, 42);
    let cfg = LossConfig { gamma: 3.0, lambda: 1.0, alpha: 0.1, tau: 1.0 };
    let report = grad_check(&model, &tiny_batch(5, 4), &cfg, 99).unwrap();
    assert!(
        report.passed(),
        "failures: {:?} (worst rel err {})",
        report.failures,
        report.worst()
    );
}

#[test]
fn full_variant_without_auxiliary_losses_passes() {
    let model = tiny_model(Variant::Full, 4, 4, 1);
    let cfg = LossConfig { gamma: 3.0, lambda: 0.0, alpha: 0.0, tau: 1.0 };
    let report = grad_check(&model, &tiny_batch(4, 4), &cfg, 3).unwrap();
    assert!(report.passed(), "failures: {:?}", report.failures);
}

#[test]
fn ablation_variants_gradients_match_finite_differences() {
    let cfg = LossConfig { gamma: 2.0, lambda: 0.5, alpha: 0.2, tau: 0.7 };
    for variant in [Variant::FeatMoe, Variant::NoLossMoe, Variant::Monolithic, Variant::TextOnly, Variant::SpeechOnly]
    {
        let model = tiny_model(variant, 4, 4, 7);
        let report = grad_check(&model, &tiny_batch(4, 4), &cfg, 11).unwrap();
        assert!(
            report.passed(),
            "variant {variant}: failures {:?} (worst {})",
            report.failures,
            report.worst()
        );
    }
}

#[test]
fn gamma_zero_cross_entropy_path_passes() {
    let model = tiny_model(Variant::Full, 4, 4, 2);
    let cfg = LossConfig { gamma: 0.0, lambda: 1.0, alpha: 0.1, tau: 0.5 };
    let report = grad_check(&model, &tiny_batch(4, 4), &cfg, 17).unwrap();
    assert!(report.passed(), "failures: {:?}", report.failures);
}
