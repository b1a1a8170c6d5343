//! Conversation datasets of embedded utterances.
//!
//! A dataset is an ordered list of conversations; each conversation is an
//! ordered list of utterances carrying one speech and one text embedding
//! plus an integer emotion label. Embeddings arrive precomputed (or from
//! the synthetic generator in [`synth`]); raw audio and transcripts are
//! never handled.

mod jsonl;
pub mod synth;

pub use jsonl::{load_jsonl, save_jsonl, sidecar_path};
pub use synth::{generate, SplitSizes, SynthConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("no conversations")]
    Empty,
    #[error("conversation {conversation}: utterance {utterance} has {modality} dim {got}, expected {expected}")]
    DimMismatch {
        conversation: String,
        utterance: String,
        modality: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("conversation {conversation}: label {label} out of range for {class_count} classes")]
    LabelOutOfRange {
        conversation: String,
        label: usize,
        class_count: usize,
    },
    #[error("conversation {0} has no utterances")]
    EmptyConversation(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
}

/// One utterance: its identifier, per-modality embeddings, and label.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub label: usize,
    pub speech: Vec<f64>,
    pub text: Vec<f64>,
}

/// Ordered utterances of one conversation, in conversational time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<UtteranceRecord>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.utterances.iter().map(|u| u.label).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Sidecar header describing a JSONL dataset file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub class_count: usize,
    pub d_s: usize,
    pub d_t: usize,
    pub class_names: Vec<String>,
}

/// A validated collection of conversations for one split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub conversations: Vec<Conversation>,
    pub class_count: usize,
    pub d_s: usize,
    pub d_t: usize,
    pub split: Split,
    pub class_names: Vec<String>,
}

impl Dataset {
    /// Checks every structural invariant: nonempty, consistent embedding
    /// dimensions, labels in range, no empty conversations.
    pub fn validate(&self) -> Result<(), DataError> {
        if self.conversations.is_empty() {
            return Err(DataError::Empty);
        }
        for conv in &self.conversations {
            if conv.utterances.is_empty() {
                return Err(DataError::EmptyConversation(conv.id.clone()));
            }
            for utt in &conv.utterances {
                if utt.speech.len() != self.d_s {
                    return Err(DataError::DimMismatch {
                        conversation: conv.id.clone(),
                        utterance: utt.id.clone(),
                        modality: "speech",
                        got: utt.speech.len(),
                        expected: self.d_s,
                    });
                }
                if utt.text.len() != self.d_t {
                    return Err(DataError::DimMismatch {
                        conversation: conv.id.clone(),
                        utterance: utt.id.clone(),
                        modality: "text",
                        got: utt.text.len(),
                        expected: self.d_t,
                    });
                }
                if utt.label >= self.class_count {
                    return Err(DataError::LabelOutOfRange {
                        conversation: conv.id.clone(),
                        label: utt.label,
                        class_count: self.class_count,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            class_count: self.class_count,
            d_s: self.d_s,
            d_t: self.d_t,
            class_names: self.class_names.clone(),
        }
    }

    /// Total utterances across conversations.
    pub fn utterance_count(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    /// Counts of each label over the whole split.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut hist = vec![0usize; self.class_count];
        for conv in &self.conversations {
            for utt in &conv.utterances {
                hist[utt.label] += 1;
            }
        }
        hist
    }

    /// Groups whole conversations (in the given order) into batches of at
    /// most `max_batch`, padding each batch to its longest conversation.
    pub fn batches(&self, order: &[usize], max_batch: usize) -> Vec<Batch> {
        assert!(max_batch >= 1, "batch size must be >= 1");
        let mut out = Vec::new();
        for chunk in order.chunks(max_batch) {
            let n_max = chunk.iter().map(|&i| self.conversations[i].len()).max().unwrap_or(0);
            let items = chunk
                .iter()
                .map(|&i| pad_conversation(&self.conversations[i], self.d_s, self.d_t, n_max))
                .collect();
            out.push(Batch { items });
        }
        out
    }

    /// Every conversation in ingestion order, one batch per `max_batch`.
    pub fn all_batches(&self, max_batch: usize) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.conversations.len()).collect();
        self.batches(&order, max_batch)
    }
}

/// One conversation padded to a batch-wide length with a validity mask.
#[derive(Clone, Debug)]
pub struct PaddedConversation {
    pub id: String,
    /// `[n_padded, d_s]`; padded rows are exactly zero.
    pub speech: Tensor,
    /// `[n_padded, d_t]`; padded rows are exactly zero.
    pub text: Tensor,
    /// Length `n_padded`; entries beyond `n_valid` are filler zeros.
    pub labels: Vec<usize>,
    /// True for real utterances, false for padding (always a suffix).
    pub mask: Vec<bool>,
    pub n_valid: usize,
}

/// Whole conversations only; no conversation is ever split across batches.
#[derive(Clone, Debug)]
pub struct Batch {
    pub items: Vec<PaddedConversation>,
}

/// Pads one conversation to `n_max` rows. Padded embedding rows are zero
/// so that convolution windows near the valid/padded boundary see exactly
/// the zeros that same-padding would produce on the unpadded sequence.
pub fn pad_conversation(conv: &Conversation, d_s: usize, d_t: usize, n_max: usize) -> PaddedConversation {
    let n = conv.len();
    assert!(n <= n_max, "conversation longer than pad target");
    let mut speech = Tensor::zeros(vec![n_max, d_s]);
    let mut text = Tensor::zeros(vec![n_max, d_t]);
    let mut labels = vec![0usize; n_max];
    let mut mask = vec![false; n_max];
    for (k, utt) in conv.utterances.iter().enumerate() {
        speech.data_mut()[k * d_s..(k + 1) * d_s].copy_from_slice(&utt.speech);
        text.data_mut()[k * d_t..(k + 1) * d_t].copy_from_slice(&utt.text);
        labels[k] = utt.label;
        mask[k] = true;
    }
    PaddedConversation { id: conv.id.clone(), speech, text, labels, mask, n_valid: n }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_conv(id: &str, lens: &[usize]) -> Conversation {
        Conversation {
            id: id.to_string(),
            utterances: (0..lens.len())
                .map(|k| UtteranceRecord {
                    id: format!("{id}-{k}"),
                    label: lens[k],
                    speech: vec![k as f64 + 1.0, 0.5],
                    text: vec![-(k as f64), 2.0, 3.0],
                })
                .collect(),
        }
    }

    fn tiny_dataset() -> Dataset {
        Dataset {
            conversations: vec![tiny_conv("c0", &[0, 1, 2]), tiny_conv("c1", &[1, 0, 1, 2, 0])],
            class_count: 3,
            d_s: 2,
            d_t: 3,
            split: Split::Train,
            class_names: vec!["a".into(), "b".into(), "c".into()],
        }
    }

    #[test]
    fn padding_contract() {
        // Lengths 3 and 5 pad to 5 with masks (1,1,1,0,0) and all-true.
        let ds = tiny_dataset();
        let batches = ds.all_batches(8);
        assert_eq!(batches.len(), 1);
        let items = &batches[0].items;
        assert_eq!(items[0].mask, vec![true, true, true, false, false]);
        assert_eq!(items[1].mask, vec![true; 5]);
        assert_eq!(items[0].speech.shape(), &[5, 2]);
        // Padded rows are exactly zero.
        assert_eq!(&items[0].speech.data()[6..], &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn batch_of_one_mask_all_true() {
        let ds = tiny_dataset();
        let batches = ds.batches(&[0], 4);
        assert_eq!(batches.len(), 1);
        assert_eq!(batches[0].items[0].mask, vec![true; 3]);
    }

    #[test]
    fn whole_conversations_never_split() {
        let ds = tiny_dataset();
        let batches = ds.all_batches(1);
        assert_eq!(batches.len(), 2);
        assert_eq!(batches[0].items.len(), 1);
        assert_eq!(batches[0].items[0].n_valid, 3);
        assert_eq!(batches[1].items[0].n_valid, 5);
    }

    #[test]
    fn validate_catches_label_out_of_range() {
        let mut ds = tiny_dataset();
        ds.conversations[0].utterances[1].label = 7;
        assert!(matches!(ds.validate(), Err(DataError::LabelOutOfRange { label: 7, .. })));
    }

    #[test]
    fn validate_catches_dim_mismatch() {
        let mut ds = tiny_dataset();
        ds.conversations[1].utterances[0].text.push(9.0);
        assert!(matches!(ds.validate(), Err(DataError::DimMismatch { modality: "text", .. })));
    }

    #[test]
    fn validate_catches_empty() {
        let mut ds = tiny_dataset();
        ds.conversations.clear();
        assert!(matches!(ds.validate(), Err(DataError::Empty)));
    }
}
