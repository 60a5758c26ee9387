use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{read_text, write_file, IoError, ParseError};

#[derive(Debug, Serialize, Deserialize)]
struct LossRow {
    epoch: u32,
    loss: f64,
}

/// Training loss per epoch, epochs strictly increasing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossTrace {
    entries: Vec<(u32, f64)>,
}

impl LossTrace {
    pub fn new(entries: Vec<(u32, f64)>) -> Result<Self, ParseError> {
        for (i, &(epoch, loss)) in entries.iter().enumerate() {
            if !(loss.is_finite() && loss >= 0.0) {
                return Err(ParseError::Line {
                    line: i + 1,
                    reason: format!("loss {loss} must be finite and nonnegative"),
                });
            }
            if i > 0 && epoch <= entries[i - 1].0 {
                return Err(ParseError::Line {
                    line: i + 1,
                    reason: format!("epoch {epoch} does not increase"),
                });
            }
        }
        Ok(Self { entries })
    }

    /// Trace with epochs `1..=losses.len()`.
    pub fn from_losses(losses: &[f64]) -> Result<Self, ParseError> {
        Self::new(
            losses
                .iter()
                .enumerate()
                .map(|(i, &l)| (i as u32 + 1, l))
                .collect(),
        )
    }

    pub fn entries(&self) -> &[(u32, f64)] {
        &self.entries
    }

    pub fn loss_at(&self, epoch: u32) -> Option<f64> {
        self.entries
            .binary_search_by_key(&epoch, |&(e, _)| e)
            .ok()
            .map(|i| self.entries[i].1)
    }

    pub fn last_epoch(&self) -> Option<u32> {
        self.entries.last().map(|&(e, _)| e)
    }
}

/// Parses the `epoch,loss` CSV (header row required).
pub fn decode_loss_trace(text: &str) -> Result<LossTrace, ParseError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| ParseError::Line {
            line: 1,
            reason: e.to_string(),
        })?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["epoch", "loss"] {
        return Err(ParseError::Line {
            line: 1,
            reason: format!("expected header `epoch,loss`, found {headers:?}"),
        });
    }
    let mut entries = Vec::new();
    for (i, row) in reader.deserialize::<LossRow>().enumerate() {
        let row = row.map_err(|e| ParseError::Line {
            line: i + 2,
            reason: e.to_string(),
        })?;
        entries.push((row.epoch, row.loss));
    }
    LossTrace::new(entries).map_err(|e| match e {
        ParseError::Line { line, reason } => ParseError::Line {
            line: line + 1,
            reason,
        },
        other => other,
    })
}

pub fn encode_loss_trace(trace: &LossTrace) -> String {
    let mut out = String::from("epoch,loss\n");
    for (epoch, loss) in &trace.entries {
        out.push_str(&format!("{epoch},{loss}\n"));
    }
    out
}

pub fn load_loss_trace(path: impl AsRef<Path>) -> Result<LossTrace, IoError> {
    let path = path.as_ref();
    decode_loss_trace(&read_text(path)?).map_err(|e| IoError::parse(path, e))
}

pub fn write_loss_trace(path: impl AsRef<Path>, trace: &LossTrace) -> Result<(), IoError> {
    write_file(path.as_ref(), encode_loss_trace(trace).as_bytes())
}
