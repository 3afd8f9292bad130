use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{EvalRecord, MetricsRecord, RunConfig, SftRecord, TimingRecord};
use crate::error::Result;
use crate::policy::{save_checkpoint, PolicyParams, Vocab};

pub const CONFIG_FILE: &str = "resolved-config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const EVALS_FILE: &str = "evals.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

const RL_COLUMNS: &[&str] = &[
    "round",
    "epoch",
    "samples",
    "mean_reward",
    "mean_length",
    "mean_abs_adv",
    "filtered_fraction",
    "kept",
    "updates",
    "objective",
    "loss",
    "kl",
    "grad_norm",
    "sampling_model_secs",
    "sampling_secs",
    "loss_secs",
];

const SFT_COLUMNS: &[&str] = &["epoch", "steps", "train_log_likelihood", "grad_norm"];

const EVAL_COLUMNS: &[&str] = &["eval_accuracy", "heldout_accuracy", "eval_mean_length", "heldout_mean_length"];

/// Output directory of a run. Every record is flushed as it is written.
pub struct Artifacts {
    dir: PathBuf,
    metrics: BufWriter<File>,
    csv: BufWriter<File>,
    timings: Option<BufWriter<File>>,
    evals: BufWriter<File>,
    k_list: Vec<usize>,
    csv_header: bool,
}

fn write_line(w: &mut BufWriter<File>, record: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *w, record)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn fmt_cell(x: f64) -> String {
    format!("{x}")
}

impl Artifacts {
    /// Creates `dir`, writes the resolved config and opens the metric streams.
    pub fn create(dir: &Path, cfg: &RunConfig, k_list: &[usize]) -> Result<Self> {
        fs::create_dir_all(dir.join(CHECKPOINT_DIR))?;
        fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
        let open = |name: &str| -> Result<BufWriter<File>> { Ok(BufWriter::new(File::create(dir.join(name))?)) };
        Ok(Self {
            dir: dir.to_path_buf(),
            metrics: open(METRICS_FILE)?,
            csv: open(METRICS_CSV)?,
            timings: None,
            evals: open(EVALS_FILE)?,
            k_list: k_list.to_vec(),
            csv_header: false,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn csv_row(&mut self, columns: &[&str], cells: Vec<String>, eval: Option<&EvalRecord>) -> Result<()> {
        if !self.csv_header {
            let mut header: Vec<String> = columns.iter().map(|c| c.to_string()).collect();
            header.extend(EVAL_COLUMNS.iter().map(|c| c.to_string()));
            header.extend(self.k_list.iter().map(|k| format!("pass_at_{k}")));
            writeln!(self.csv, "{}", header.join(","))?;
            self.csv_header = true;
        }
        let mut row = cells;
        match eval {
            Some(e) => {
                row.extend(
                    [e.in_dist.accuracy, e.heldout.accuracy, e.in_dist.mean_length, e.heldout.mean_length]
                        .map(fmt_cell),
                );
                row.extend(e.in_dist.pass_at_k.iter().map(|p| fmt_cell(*p)));
            }
            None => row.extend(std::iter::repeat_n(String::new(), EVAL_COLUMNS.len() + self.k_list.len())),
        }
        writeln!(self.csv, "{}", row.join(","))?;
        self.csv.flush()?;
        Ok(())
    }

    pub fn write_round(&mut self, record: &MetricsRecord, timing: &TimingRecord) -> Result<()> {
        write_line(&mut self.metrics, record)?;
        if self.timings.is_none() {
            self.timings = Some(BufWriter::new(File::create(self.dir.join(TIMINGS_FILE))?));
        }
        write_line(self.timings.as_mut().expect("opened above"), timing)?;
        let cells = vec![
            record.round.to_string(),
            record.epoch.to_string(),
            record.samples.to_string(),
            fmt_cell(record.mean_reward),
            fmt_cell(record.mean_length),
            fmt_cell(record.mean_abs_adv),
            fmt_cell(record.filtered_fraction),
            record.kept.to_string(),
            record.updates.to_string(),
            fmt_cell(record.objective),
            fmt_cell(record.loss),
            fmt_cell(record.kl),
            fmt_cell(record.grad_norm),
            fmt_cell(record.sampling_model_secs),
            fmt_cell(timing.sampling_secs),
            fmt_cell(timing.loss_secs),
        ];
        self.csv_row(RL_COLUMNS, cells, record.eval.as_ref())
    }

    pub fn write_sft(&mut self, record: &SftRecord) -> Result<()> {
        write_line(&mut self.metrics, record)?;
        let cells = vec![
            record.epoch.to_string(),
            record.steps.to_string(),
            fmt_cell(record.train_log_likelihood),
            fmt_cell(record.grad_norm),
        ];
        self.csv_row(SFT_COLUMNS, cells, record.eval.as_ref())
    }

    pub fn write_eval(&mut self, record: &EvalRecord) -> Result<()> {
        write_line(&mut self.evals, record)
    }

    /// Saves `checkpoints/round-NNNNNN.ckpt`, or `checkpoints/final.ckpt`
    /// when `at` is `None`.
    pub fn checkpoint(&self, params: &PolicyParams, vocab: &Vocab, at: Option<usize>) -> Result<PathBuf> {
        let name = match at {
            Some(r) => format!("round-{r:06}.ckpt"),
            None => "final.ckpt".to_string(),
        };
        let path = self.dir.join(CHECKPOINT_DIR).join(name);
        save_checkpoint(&path, params, Some(vocab))?;
        Ok(path)
    }
}
