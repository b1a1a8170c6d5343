//! Synthetic conversation generator.
//!
//! Emulates frozen utterance encoders with controllable per-modality
//! quality: each class gets a fixed random unit prototype per modality,
//! and every utterance embedding is `snr * prototype + standard Gaussian
//! noise`. Labels follow a Markov chain with a configurable probability of
//! changing class between consecutive utterances, started from the class
//! priors. At `snr = 0` a modality carries no label information; large
//! `snr` makes nearest-prototype classification nearly perfect.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Conversation, DataError, Dataset, Split, UtteranceRecord};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub class_count: usize,
    pub d_s: usize,
    pub d_t: usize,
    pub conversations_per_split: SplitSizes,
    /// Inclusive `[min, max]` utterances per conversation.
    pub utterance_count_range: (usize, usize),
    pub speech_snr: f64,
    pub text_snr: f64,
    pub class_priors: Vec<f64>,
    /// Probability that a consecutive utterance changes class.
    pub emotion_shift_prob: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.class_count == 0 {
            return Err(DataError::BadConfig("class_count must be >= 1".into()));
        }
        if self.d_s == 0 || self.d_t == 0 {
            return Err(DataError::BadConfig("embedding dims must be >= 1".into()));
        }
        if self.class_priors.len() != self.class_count {
            return Err(DataError::BadConfig(format!(
                "class_priors has {} entries for {} classes",
                self.class_priors.len(),
                self.class_count
            )));
        }
        let sum: f64 = self.class_priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DataError::BadConfig(format!("class_priors sums to {sum}, expected 1")));
        }
        if self.class_priors.iter().any(|&p| p < 0.0) {
            return Err(DataError::BadConfig("class_priors must be nonnegative".into()));
        }
        if self.speech_snr < 0.0 || self.text_snr < 0.0 {
            return Err(DataError::BadConfig("snr must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.emotion_shift_prob) {
            return Err(DataError::BadConfig("emotion_shift_prob must be in [0,1]".into()));
        }
        let (lo, hi) = self.utterance_count_range;
        if lo < 1 || lo > hi {
            return Err(DataError::BadConfig(format!("bad utterance_count_range ({lo}, {hi})")));
        }
        if self.conversations_per_split.train == 0 {
            return Err(DataError::BadConfig("train split must be nonempty".into()));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.class_count).map(|c| format!("class{c}")).collect()
    }
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn sample_categorical(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

fn embedding(rng: &mut ChaCha8Rng, prototype: &[f64], snr: f64) -> Vec<f64> {
    prototype
        .iter()
        .map(|&mu| {
            let noise: f64 = StandardNormal.sample(rng);
            snr * mu + noise
        })
        .collect()
}

/// Generates the three splits. A pure function of the config, including
/// its seed: the same config yields bit-identical datasets.
pub fn generate(cfg: &SynthConfig) -> Result<(Dataset, Dataset, Dataset), DataError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let proto_s: Vec<Vec<f64>> = (0..cfg.class_count).map(|_| unit_vector(&mut rng, cfg.d_s)).collect();
    let proto_t: Vec<Vec<f64>> = (0..cfg.class_count).map(|_| unit_vector(&mut rng, cfg.d_t)).collect();

    let mut make_split = |split: Split, count: usize| -> Dataset {
        let mut conversations = Vec::with_capacity(count);
        for c in 0..count {
            let (lo, hi) = cfg.utterance_count_range;
            let n = rng.random_range(lo..=hi);
            let mut label = sample_categorical(&mut rng, &cfg.class_priors);
            let mut utterances = Vec::with_capacity(n);
            for k in 0..n {
                if k > 0 && rng.random::<f64>() < cfg.emotion_shift_prob && cfg.class_count > 1 {
                    // Redraw from the priors restricted to other classes.
                    let mut w = cfg.class_priors.clone();
                    w[label] = 0.0;
                    if w.iter().sum::<f64>() > 0.0 {
                        label = sample_categorical(&mut rng, &w);
                    } else {
                        label = (label + 1) % cfg.class_count;
                    }
                }
                utterances.push(UtteranceRecord {
                    id: format!("{}-{c:04}-{k:02}", split.name()),
                    label,
                    speech: embedding(&mut rng, &proto_s[label], cfg.speech_snr),
                    text: embedding(&mut rng, &proto_t[label], cfg.text_snr),
                });
            }
            conversations.push(Conversation { id: format!("{}-{c:04}", split.name()), utterances });
        }
        Dataset {
            conversations,
            class_count: cfg.class_count,
            d_s: cfg.d_s,
            d_t: cfg.d_t,
            split,
            class_names: cfg.class_names(),
        }
    };

    let train = make_split(Split::Train, cfg.conversations_per_split.train);
    let val = make_split(Split::Val, cfg.conversations_per_split.val);
    let test = make_split(Split::Test, cfg.conversations_per_split.test);
    train.validate()?;
    if !val.conversations.is_empty() {
        val.validate()?;
    }
    if !test.conversations.is_empty() {
        test.validate()?;
    }
    Ok((train, val, test))
}
