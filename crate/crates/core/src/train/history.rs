use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Training-batch statistics after one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub step: usize,
    /// Full objective, auxiliary heads included.
    pub loss: f64,
    /// Main prediction head only.
    pub main_loss: f64,
    pub miou: f64,
    pub pa: f64,
}

/// Append-only record of training steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub entries: Vec<HistoryEntry>,
}

impl History {
    /// Panics if `entry.step` does not increase.
    pub fn push(&mut self, entry: HistoryEntry) {
        if let Some(last) = self.entries.last() {
            assert!(entry.step > last.step, "history steps must increase");
        }
        self.entries.push(entry);
    }

    pub fn last(&self) -> Option<&HistoryEntry> {
        self.entries.last()
    }

    /// Means of `f` over consecutive non-overlapping windows of `window` entries.
    pub fn window_means(&self, window: usize, f: impl Fn(&HistoryEntry) -> f64) -> Vec<f64> {
        self.entries
            .chunks_exact(window.max(1))
            .map(|c| c.iter().map(&f).sum::<f64>() / c.len() as f64)
            .collect()
    }

    /// One line per step: `step  loss  miou  pa  main_loss`, tab-separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                e.step, e.loss, e.miou, e.pa, e.main_loss
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut history = History::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let bad = || Error::format("history", format!("bad line `{line}`"));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            let entry = HistoryEntry {
                step: f[0].parse().map_err(|_| bad())?,
                loss: num(1)?,
                miou: num(2)?,
                pa: num(3)?,
                main_loss: num(4)?,
            };
            if history.last().is_some_and(|l| entry.step <= l.step) {
                return Err(bad());
            }
            history.entries.push(entry);
        }
        Ok(history)
    }

    /// Appends to `path`, creating it if needed.
    pub fn append_to(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes()).map_err(|e| Error::io(path, e))
    }
}
