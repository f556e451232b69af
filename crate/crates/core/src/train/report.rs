use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::eval::MetricReport;

use super::TrainConfig;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("run report line {line}: {msg}")]
pub struct ReportError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sum of the per-batch objectives seen during the epoch.
    pub train_loss: f64,
    pub val_rmse: f64,
    pub val_mae: f64,
    pub seconds: f64,
}

/// Everything needed to reproduce and read a training run.
///
/// Serialized as one record per line:
///
/// ```text
/// config <key>=<value>
/// meta <key>=<value>
/// epoch=<k> train_loss=<v> val_rmse=<v> val_mae=<v> seconds=<v>
/// best_epoch=<k|none> stopped_early=<bool>
/// final split=<name> rmse=<v> mae=<v> n=<v> params=<v>
/// ```
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunReport {
    pub config: Vec<(String, String)>,
    pub meta: Vec<(String, String)>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
    pub finals: Vec<(String, MetricReport)>,
}

impl RunReport {
    pub fn new(config: &TrainConfig) -> Self {
        RunReport {
            config: config
                .entries()
                .into_iter()
                .map(|(k, v)| (k.to_string(), v))
                .collect(),
            ..RunReport::default()
        }
    }

    /// Adds or replaces a config entry.
    pub fn push_config(&mut self, key: &str, value: impl ToString) {
        upsert(&mut self.config, key, value.to_string());
    }

    pub fn push_meta(&mut self, key: &str, value: impl ToString) {
        upsert(&mut self.meta, key, value.to_string());
    }

    pub fn config_value(&self, key: &str) -> Option<&str> {
        lookup(&self.config, key)
    }

    pub fn meta_value(&self, key: &str) -> Option<&str> {
        lookup(&self.meta, key)
    }

    pub fn set_final(&mut self, split: &str, metrics: MetricReport) {
        match self.finals.iter_mut().find(|(s, _)| s == split) {
            Some(slot) => slot.1 = metrics,
            None => self.finals.push((split.to_string(), metrics)),
        }
    }

    pub fn final_metric(&self, split: &str) -> Option<&MetricReport> {
        self.finals.iter().find(|(s, _)| s == split).map(|(_, m)| m)
    }

    /// A copy with wall-clock times zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        let mut copy = self.clone();
        for e in &mut copy.epochs {
            e.seconds = 0.0;
        }
        copy
    }
}

fn upsert(list: &mut Vec<(String, String)>, key: &str, value: String) {
    match list.iter_mut().find(|(k, _)| k == key) {
        Some(slot) => slot.1 = value,
        None => list.push((key.to_string(), value)),
    }
}

fn lookup<'a>(list: &'a [(String, String)], key: &str) -> Option<&'a str> {
    list.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in &self.config {
            writeln!(f, "config {k}={v}")?;
        }
        for (k, v) in &self.meta {
            writeln!(f, "meta {k}={v}")?;
        }
        for e in &self.epochs {
            writeln!(
                f,
                "epoch={} train_loss={} val_rmse={} val_mae={} seconds={}",
                e.epoch, e.train_loss, e.val_rmse, e.val_mae, e.seconds
            )?;
        }
        match self.best_epoch {
            Some(b) => write!(f, "best_epoch={b}")?,
            None => write!(f, "best_epoch=none")?,
        }
        writeln!(f, " stopped_early={}", self.stopped_early)?;
        for (split, m) in &self.finals {
            writeln!(f, "final split={split} {m}")?;
        }
        Ok(())
    }
}

fn fields(text: &str) -> impl Iterator<Item = (&str, &str)> {
    text.split_whitespace()
        .filter_map(|tok| tok.split_once('='))
}

impl FromStr for RunReport {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, ReportError> {
        let mut report = RunReport::default();
        for (n, line) in s.lines().enumerate() {
            let err = |msg: &str| ReportError {
                line: n + 1,
                msg: format!("{msg}: `{line}`"),
            };
            let line = line.trim_end();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("config ") {
                let (k, v) = rest.split_once('=').ok_or_else(|| err("missing `=`"))?;
                report.config.push((k.to_string(), v.to_string()));
            } else if let Some(rest) = line.strip_prefix("meta ") {
                let (k, v) = rest.split_once('=').ok_or_else(|| err("missing `=`"))?;
                report.meta.push((k.to_string(), v.to_string()));
            } else if line.starts_with("epoch=") {
                let mut rec = EpochRecord {
                    epoch: 0,
                    train_loss: f64::NAN,
                    val_rmse: f64::NAN,
                    val_mae: f64::NAN,
                    seconds: f64::NAN,
                };
                let mut seen = 0;
                for (k, v) in fields(line) {
                    let num = || v.parse::<f64>().map_err(|_| err("bad number"));
                    match k {
                        "epoch" => rec.epoch = v.parse().map_err(|_| err("bad epoch"))?,
                        "train_loss" => rec.train_loss = num()?,
                        "val_rmse" => rec.val_rmse = num()?,
                        "val_mae" => rec.val_mae = num()?,
                        "seconds" => rec.seconds = num()?,
                        _ => continue,
                    }
                    seen += 1;
                }
                if seen != 5 {
                    return Err(err("incomplete epoch record"));
                }
                report.epochs.push(rec);
            } else if line.starts_with("best_epoch=") {
                for (k, v) in fields(line) {
                    match k {
                        "best_epoch" if v == "none" => report.best_epoch = None,
                        "best_epoch" => {
                            report.best_epoch = Some(v.parse().map_err(|_| err("bad epoch"))?)
                        }
                        "stopped_early" => {
                            report.stopped_early = v.parse().map_err(|_| err("bad bool"))?
                        }
                        _ => {}
                    }
                }
            } else if let Some(rest) = line.strip_prefix("final ") {
                let split = fields(rest)
                    .find(|(k, _)| *k == "split")
                    .map(|(_, v)| v.to_string())
                    .ok_or_else(|| err("missing split"))?;
                let metrics: MetricReport = rest.parse().map_err(|_| err("bad metrics"))?;
                report.finals.push((split, metrics));
            } else {
                return Err(err("unrecognised record"));
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut r = RunReport::new(&TrainConfig::default());
        r.push_meta("eval_graph", "full");
        r.push_config("data", "/tmp/some dir/x.libfm");
        r.epochs.push(EpochRecord {
            epoch: 1,
            train_loss: 1234.5678901234,
            val_rmse: 0.31,
            val_mae: 0.1 + 0.2,
            seconds: 1.5,
        });
        r.best_epoch = Some(1);
        r.set_final(
            "test",
            MetricReport {
                rmse: 0.3,
                mae: 0.2,
                n: 10,
                param_count: 7,
            },
        );
        let text = r.to_string();
        assert!(text.contains("epoch=1 train_loss=1234.5678901234 val_rmse=0.31"));
        assert!(text.contains("final split=test rmse=0.3 mae=0.2 n=10 params=7"));
        let back: RunReport = text.parse().unwrap();
        assert_eq!(back, r);
        assert_eq!(back.config_value("data"), Some("/tmp/some dir/x.libfm"));
        assert_eq!(back.config_value("patience"), Some("5"));
    }

    #[test]
    fn rejects_garbage() {
        assert!("what is this".parse::<RunReport>().is_err());
        assert!("epoch=1 train_loss=2".parse::<RunReport>().is_err());
    }
}
