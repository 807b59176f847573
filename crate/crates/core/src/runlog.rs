//! Append-only experiment log, one row per epoch per stage, flushed to CSV
//! by the companion crate. Optional cells serialize as empty fields.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{invalid, CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Warmup,
    Train,
    Probe,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Warmup => "warmup",
            Stage::Train => "train",
            Stage::Probe => "probe",
        }
    }

    pub fn parse(s: &str) -> Result<Stage> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "warmup" => Ok(Stage::Warmup),
            "train" => Ok(Stage::Train),
            "probe" => Ok(Stage::Probe),
            other => Err(invalid(format!("unknown stage `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub stage: Stage,
    pub epoch: usize,
    pub method: Option<String>,
    pub train_loss: Option<f64>,
    pub test_acc: Option<f64>,
    pub roc_auc: Option<f64>,
    pub eff_noise_rate: Option<f64>,
    pub probe_acc: Option<f64>,
    pub probe_converged: Option<bool>,
    pub labeled_frac: Option<f64>,
}

impl LogRow {
    pub fn new(stage: Stage, epoch: usize) -> Self {
        LogRow {
            stage,
            epoch,
            method: None,
            train_loss: None,
            test_acc: None,
            roc_auc: None,
            eff_noise_rate: None,
            probe_acc: None,
            probe_converged: None,
            labeled_frac: None,
        }
    }
}

pub const RUNLOG_HEADER: &str =
    "stage,epoch,method,train_loss,test_acc,roc_auc,eff_noise_rate,probe_acc,probe_converged,labeled_frac";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    rows: Vec<LogRow>,
}

impl RunLog {
    pub fn new() -> Self {
        RunLog::default()
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    /// Append one row. Within a contiguous block of one stage, epochs must
    /// strictly increase.
    pub fn append(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if last.stage == row.stage && row.epoch <= last.epoch {
                return Err(invalid(format!(
                    "epoch {} does not advance past {} within stage {}",
                    row.epoch,
                    last.epoch,
                    row.stage.as_str()
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn extend(&mut self, rows: Vec<LogRow>) -> Result<()> {
        for r in rows {
            self.append(r)?;
        }
        Ok(())
    }

    /// Replace every row of `stage` with a fresh block (appended at the
    /// end), so re-running a pipeline stage stays idempotent.
    pub fn replace_stage(&mut self, stage: Stage, rows: Vec<LogRow>) -> Result<()> {
        self.rows.retain(|r| r.stage != stage);
        self.extend(rows)
    }

    pub fn to_csv(&self) -> String {
        fn cell_f(v: Option<f64>) -> String {
            v.map(|x| format!("{x}")).unwrap_or_default()
        }
        let mut out = String::from(RUNLOG_HEADER);
        out.push('\n');
        for r in &self.rows {
            let method = r.method.clone().unwrap_or_default();
            let converged = r
                .probe_converged
                .map(|b| b.to_string())
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.stage.as_str(),
                r.epoch,
                method,
                cell_f(r.train_loss),
                cell_f(r.test_acc),
                cell_f(r.roc_auc),
                cell_f(r.eff_noise_rate),
                cell_f(r.probe_acc),
                converged,
                cell_f(r.labeled_frac),
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<RunLog> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == RUNLOG_HEADER => {}
            _ => {
                return Err(CoreError::Parse {
                    line: 1,
                    msg: String::from("bad run log header"),
                })
            }
        }
        let mut log = RunLog::new();
        for (lineno0, row) in lines {
            let line = lineno0 + 1;
            if row.is_empty() {
                continue;
            }
            let fields: Vec<&str> = row.split(',').collect();
            if fields.len() != 10 {
                return Err(CoreError::Parse {
                    line,
                    msg: format!("expected 10 fields, got {}", fields.len()),
                });
            }
            let parse_f = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some).map_err(|_| CoreError::Parse {
                        line,
                        msg: format!("bad float `{s}`"),
                    })
                }
            };
            let stage = Stage::parse(fields[0]).map_err(|_| CoreError::Parse {
                line,
                msg: format!("bad stage `{}`", fields[0]),
            })?;
            let epoch = fields[1].parse::<usize>().map_err(|_| CoreError::Parse {
                line,
                msg: format!("bad epoch `{}`", fields[1]),
            })?;
            let row = LogRow {
                stage,
                epoch,
                method: if fields[2].is_empty() {
                    None
                } else {
                    Some(fields[2].to_string())
                },
                train_loss: parse_f(fields[3])?,
                test_acc: parse_f(fields[4])?,
                roc_auc: parse_f(fields[5])?,
                eff_noise_rate: parse_f(fields[6])?,
                probe_acc: parse_f(fields[7])?,
                probe_converged: match fields[8] {
                    "" => None,
                    "true" => Some(true),
                    "false" => Some(false),
                    other => {
                        return Err(CoreError::Parse {
                            line,
                            msg: format!("bad bool `{other}`"),
                        })
                    }
                },
                labeled_frac: parse_f(fields[9])?,
            };
            log.append(row).map_err(|e| CoreError::Parse {
                line,
                msg: format!("{e}"),
            })?;
        }
        Ok(log)
    }
}
