//! JSON-lines persistence for prompt examples.
//!
//! One object per line, LF-terminated, fields in this order:
//! `prompt`, `label`, `label_name`, `snr_db`, `modulation`, `frame_seed`, `split`.
//! On load the label is re-derived from `snr_db` and must match.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

use super::{label_for_snr, DatasetError, DatasetManifest, PathologyClass, PromptExample, Split};
use crate::sigsynth::ModulationKind;

#[derive(Serialize)]
struct Record<'a> {
    prompt: &'a str,
    label: u8,
    label_name: &'a str,
    snr_db: f64,
    modulation: &'a str,
    frame_seed: u64,
    split: &'a str,
}

fn io_err(path: &Path, source: std::io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn save_examples(examples: &[PromptExample], path: &Path) -> Result<(), DatasetError> {
    let mut out = String::new();
    for ex in examples {
        let rec = Record {
            prompt: &ex.prompt,
            label: ex.label.label(),
            label_name: ex.label.name(),
            snr_db: ex.snr_db,
            modulation: ex.modulation.name(),
            frame_seed: ex.frame_seed,
            split: ex.split.as_str(),
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes()).map_err(|e| io_err(path, e))
}

fn field<'a>(obj: &'a Map<String, Value>, line: usize, name: &str) -> Result<&'a Value, DatasetError> {
    obj.get(name).ok_or_else(|| DatasetError::Malformed {
        line,
        field: name.to_string(),
        reason: "missing".to_string(),
    })
}

fn malformed(line: usize, name: &str, reason: impl Into<String>) -> DatasetError {
    DatasetError::Malformed {
        line,
        field: name.to_string(),
        reason: reason.into(),
    }
}

fn str_field<'a>(obj: &'a Map<String, Value>, line: usize, name: &str) -> Result<&'a str, DatasetError> {
    field(obj, line, name)?
        .as_str()
        .ok_or_else(|| malformed(line, name, "expected a string"))
}

fn parse_record(text: &str, line: usize) -> Result<PromptExample, DatasetError> {
    let value: Value = serde_json::from_str(text).map_err(|e| malformed(line, "<record>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(line, "<record>", "expected a JSON object"))?;

    let prompt = str_field(obj, line, "prompt")?.to_string();
    let label = field(obj, line, "label")?
        .as_i64()
        .ok_or_else(|| malformed(line, "label", "expected an integer"))?;
    let label = PathologyClass::from_label(label).map_err(|e| malformed(line, "label", e.to_string()))?;
    let label_name = str_field(obj, line, "label_name")?;
    if label_name != label.name() {
        return Err(malformed(
            line,
            "label_name",
            format!("{label_name:?} does not name label {}", label.label()),
        ));
    }
    let snr_db = field(obj, line, "snr_db")?
        .as_f64()
        .ok_or_else(|| malformed(line, "snr_db", "expected a number"))?;
    let modulation: ModulationKind = str_field(obj, line, "modulation")?
        .parse()
        .map_err(|e: crate::sigsynth::SynthError| malformed(line, "modulation", e.to_string()))?;
    let frame_seed = field(obj, line, "frame_seed")?
        .as_u64()
        .ok_or_else(|| malformed(line, "frame_seed", "expected an unsigned integer"))?;
    let split: Split = str_field(obj, line, "split")?
        .parse()
        .map_err(|e: DatasetError| malformed(line, "split", e.to_string()))?;

    let derived = label_for_snr(snr_db).map_err(|e| malformed(line, "snr_db", e.to_string()))?;
    if derived != label {
        return Err(DatasetError::LabelMismatch {
            line,
            stored: label.label(),
            snr_db,
            derived: derived.label(),
        });
    }

    Ok(PromptExample {
        prompt,
        label,
        snr_db,
        modulation,
        frame_seed,
        split,
    })
}

/// Loads and validates a JSON-lines file. Line numbers in errors are 1-based.
pub fn load_examples(path: &Path) -> Result<Vec<PromptExample>, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(l, i + 1))
        .collect()
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let mut json = serde_json::to_string_pretty(manifest)?;
    json.push('\n');
    write_atomic(path, json.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DatasetError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
