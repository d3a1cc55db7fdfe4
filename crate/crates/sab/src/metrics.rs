//! Metric computation and result files: masked accuracy and
//! cross-entropy, bits-per-character, CSV logs with a fixed schema, and
//! attention-weight snapshots written as plain-text PGM heatmaps with a
//! raw-value CSV sidecar.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::reference::{infer_step, InferState};
use crate::tasks::Batch;
use crate::tensor::Tensor;
use crate::train::Trainer;

pub const CSV_HEADER: &str =
    "step,epoch,split,loss_nats,accuracy,bpc,ce_last10,acc_last10,wallclock_seconds";

#[derive(Clone, Debug)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: u64,
    pub split: String,
    pub loss_nats: f64,
    pub accuracy: Option<f64>,
    pub bpc: Option<f64>,
    pub ce_last10: Option<f64>,
    pub acc_last10: Option<f64>,
    pub wallclock_seconds: f64,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.split,
            self.loss_nats,
            opt(self.accuracy),
            opt(self.bpc),
            opt(self.ce_last10),
            opt(self.acc_last10),
            self.wallclock_seconds
        )
    }
}

/// Write a complete CSV (header plus one line per row).
pub fn write_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    let mut body = String::from(CSV_HEADER);
    body.push('\n');
    for r in rows {
        body.push_str(&r.csv_line());
        body.push('\n');
    }
    fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Appending CSV writer that emits the header once at creation.
pub struct CsvLogger {
    file: fs::File,
    path: String,
}

impl CsvLogger {
    pub fn create(path: &Path) -> Result<Self> {
        let pstr = path.display().to_string();
        let mut file = fs::File::create(path).map_err(|e| Error::io(&*pstr, e))?;
        writeln!(file, "{CSV_HEADER}").map_err(|e| Error::io(&*pstr, e))?;
        Ok(CsvLogger { file, path: pstr })
    }

    pub fn append(&mut self, row: &MetricRow) -> Result<()> {
        writeln!(self.file, "{}", row.csv_line()).map_err(|e| Error::io(&*self.path, e))
    }
}

/// Percent of masked positions where the argmax prediction equals the
/// target. `logits[t]` is `[batch, classes]`.
pub fn sequence_accuracy(
    logits: &[Tensor],
    targets: &[Vec<usize>],
    mask: &[Vec<bool>],
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (t, y) in logits.iter().enumerate() {
        for b in 0..y.rows() {
            if !mask[t][b] {
                continue;
            }
            let row = y.row(b);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            if best == targets[t][b] {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Usage("accuracy over an empty mask is undefined".into()));
    }
    Ok(100.0 * hits as f64 / total as f64)
}

/// Mean softmax cross-entropy in nats over masked positions.
pub fn masked_ce(logits: &[Tensor], targets: &[Vec<usize>], mask: &[Vec<bool>]) -> Result<f64> {
    let mut acc = 0.0;
    let mut total = 0usize;
    for (t, y) in logits.iter().enumerate() {
        for b in 0..y.rows() {
            if !mask[t][b] {
                continue;
            }
            let row = y.row(b);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&l| (l - m).exp()).sum::<f64>().ln();
            acc += lse - row[targets[t][b]];
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Usage("cross-entropy over an empty mask is undefined".into()));
    }
    Ok(acc / total as f64)
}

/// Bits per character from nats.
pub fn bpc(ce_nats: f64) -> f64 {
    ce_nats / std::f64::consts::LN_2
}

/// Attention weights over one sequence: rows are querying timesteps,
/// columns are microstate indices in creation order, values are the
/// sparse weights averaged over the batch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSnapshot {
    pub iteration: u64,
    /// `[steps][micros]`, ragged-right zero-filled to the final
    /// macrostate size.
    pub matrix: Vec<Vec<f64>>,
    /// Creation timestep of each column's microstate.
    pub micro_timesteps: Vec<usize>,
}

/// Run one batch through the inference path and capture the attention
/// weights. Training state is untouched: this reads parameters only.
pub fn record_attention(trainer: &Trainer, batch: &Batch, iteration: u64) -> AttentionSnapshot {
    let cfg = &trainer.config;
    let b = batch.batch_size();
    let mut state = InferState::new(b, cfg.n_hidden);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(batch.steps());
    for x in &batch.inputs {
        let out = infer_step(&trainer.params, &trainer.model, &mut state, x, cfg.k_att);
        let mut row = Vec::new();
        if let Some(scores) = &out.scores {
            row = vec![0.0; scores.cols()];
            for (elem, sel) in out.selection.iter().enumerate() {
                for &c in &sel.cols {
                    row[c] += (scores.at(elem, c) - sel.tau) / b as f64;
                }
            }
        }
        rows.push(row);
    }
    let width = state.micros.len();
    for row in &mut rows {
        row.resize(width, 0.0);
    }
    AttentionSnapshot {
        iteration,
        matrix: rows,
        micro_timesteps: state.micro_timesteps.clone(),
    }
}

/// Plain-text PGM (P2), linearly scaled so the snapshot maximum maps to
/// 255, plus a sidecar CSV of the raw values at `<path>.csv`.
pub fn write_heatmap(snapshot: &AttentionSnapshot, path: &Path) -> Result<()> {
    let rows = snapshot.matrix.len();
    let cols = snapshot.matrix.first().map_or(0, |r| r.len());
    let max = snapshot
        .matrix
        .iter()
        .flatten()
        .cloned()
        .fold(0.0f64, f64::max);

    let mut pgm = format!("P2\n{} {}\n255\n", cols.max(1), rows.max(1));
    if rows == 0 || cols == 0 {
        pgm.push_str("0\n");
    }
    for row in &snapshot.matrix {
        let line: Vec<String> = row
            .iter()
            .map(|&v| {
                let g = if max > 0.0 {
                    (v / max * 255.0).round() as i64
                } else {
                    0
                };
                g.clamp(0, 255).to_string()
            })
            .collect();
        pgm.push_str(&line.join(" "));
        pgm.push('\n');
    }
    fs::write(path, pgm).map_err(|e| Error::io(path.display().to_string(), e))?;

    let mut sidecar = String::new();
    for row in &snapshot.matrix {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        sidecar.push_str(&line.join(","));
        sidecar.push('\n');
    }
    let side_path = {
        let mut os = path.as_os_str().to_os_string();
        os.push(".csv");
        std::path::PathBuf::from(os)
    };
    fs::write(&side_path, sidecar).map_err(|e| Error::io(side_path.display().to_string(), e))
}

/// Parse a heatmap sidecar back into the raw matrix.
pub fn read_heatmap_sidecar(path: &Path) -> Result<Vec<Vec<f64>>> {
    let pstr = path.display().to_string();
    let body = fs::read_to_string(path).map_err(|e| Error::io(&*pstr, e))?;
    body.lines()
        .map(|line| {
            line.split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>().map_err(|e| Error::Format {
                        path: pstr.clone(),
                        offset: 0,
                        msg: format!("bad value {s:?}: {e}"),
                    })
                })
                .collect()
        })
        .collect()
}
