//! JSONL dataset ingestion and export.
//!
//! One conversation per line:
//! `{"id": "...", "utterances": [{"id": "...", "label": 3, "speech": [..], "text": [..]}, ...]}`
//! with a sidecar `<name>.meta.json` holding
//! `{"class_count": K, "d_s": D, "d_t": D, "class_names": [...]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Conversation, DataError, Dataset, DatasetMeta, Split};

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// Sidecar path for a dataset file: `train.jsonl` -> `train.meta.json`.
pub fn sidecar_path(dataset_path: &Path) -> PathBuf {
    dataset_path.with_extension("meta.json")
}

/// Loads a JSONL dataset plus its sidecar and validates every invariant.
/// Conversation order is preserved exactly as ingested.
pub fn load_jsonl(path: &Path, split: Split) -> Result<Dataset, DataError> {
    let meta_path = sidecar_path(path);
    let meta_file = File::open(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_reader(BufReader::new(meta_file))
        .map_err(|e| DataError::Malformed { line: 0, msg: format!("sidecar: {e}") })?;

    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut conversations = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let conv: Conversation = serde_json::from_str(&line)
            .map_err(|e| DataError::Malformed { line: line_no, msg: e.to_string() })?;
        conversations.push(conv);
    }

    let dataset = Dataset {
        conversations,
        class_count: meta.class_count,
        d_s: meta.d_s,
        d_t: meta.d_t,
        split,
        class_names: meta.class_names,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Writes the dataset as JSONL next to its `<name>.meta.json` sidecar.
pub fn save_jsonl(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for conv in &dataset.conversations {
        let line = serde_json::to_string(conv)
            .map_err(|e| DataError::Malformed { line: 0, msg: e.to_string() })?;
        w.write_all(line.as_bytes()).map_err(|e| io_err(path, e))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))?;

    let meta_path = sidecar_path(path);
    let meta_file = File::create(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let mut mw = BufWriter::new(meta_file);
    serde_json::to_writer_pretty(&mut mw, &dataset.meta())
        .map_err(|e| DataError::Malformed { line: 0, msg: e.to_string() })?;
    mw.write_all(b"\n").map_err(|e| io_err(&meta_path, e))?;
    mw.flush().map_err(|e| io_err(&meta_path, e))?;
    Ok(())
}
