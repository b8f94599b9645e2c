//! JSON-lines file helpers and the labeled-window record.
//!
//! Every dataset artifact that is not a checkpoint is a JSONL file: one JSON
//! object per line, written with `serde_json` so finite `f64` values survive a
//! write/read round trip bitwise.

use crate::error::{Error, Result};
use crate::intention::{BodyFrameDerivatives, IntentionLabel, Segment};
use crate::trajdata::TrajectoryWindow;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

/// Writes one JSON object per line.
pub fn write_jsonl<'a, T, W>(items: impl IntoIterator<Item = &'a T>, mut out: W) -> Result<()>
where
    T: Serialize + 'a,
    W: Write,
{
    for item in items {
        let line = serde_json::to_string(item)
            .map_err(|e| Error::validation(format!("serializing record: {e}")))?;
        out.write_all(line.as_bytes()).map_err(Error::from)?;
        out.write_all(b"\n").map_err(Error::from)?;
    }
    Ok(())
}

/// Reads one JSON object per line, skipping blank lines.
pub fn read_jsonl<T, R>(reader: R) -> Result<Vec<T>>
where
    T: DeserializeOwned,
    R: BufRead,
{
    let mut items = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(Error::from)?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

pub fn write_jsonl_file<'a, T>(
    path: impl AsRef<Path>,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<()>
where
    T: Serialize + 'a,
{
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_jsonl(items, &mut out)?;
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_jsonl_file<T>(path: impl AsRef<Path>) -> Result<Vec<T>>
where
    T: DeserializeOwned,
{
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_jsonl(BufReader::new(file)).map_err(|e| match e {
        Error::Parse { line, msg } => Error::format(path, format!("line {line}: {msg}")),
        other => other,
    })
}

/// Intention fields attached to a window by the labeler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntentionAnnotation {
    #[serde(flatten)]
    pub label: IntentionLabel,
    /// Mean lateral velocity in the body frame, m/s.
    pub v_la: f64,
    /// Mean longitudinal acceleration in the body frame, m/s^2.
    pub a_lo: f64,
}

/// A trajectory window with its intention annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledWindow {
    #[serde(flatten)]
    pub window: TrajectoryWindow,
    pub intention: IntentionAnnotation,
}

/// Labels one window from its future segment.
pub fn label_window_record(
    window: &TrajectoryWindow,
    thresholds: &crate::intention::IntentionThresholds,
    frame_step: f64,
) -> Result<LabeledWindow> {
    let (label, derivs): (IntentionLabel, BodyFrameDerivatives) =
        crate::intention::label_window(window, Segment::Future, thresholds, frame_step)?;
    Ok(LabeledWindow {
        window: window.clone(),
        intention: IntentionAnnotation {
            label,
            v_la: derivs.v_la,
            a_lo: derivs.a_lo,
        },
    })
}
