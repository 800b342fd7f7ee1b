//! Per-episode training log.

use std::fmt::Write as _;

use crate::data::io::fmt_sig12;

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub episode: usize,
    /// Support loss before and after the inner adaptation.
    pub support_loss_first: f64,
    pub support_loss_last: f64,
    pub query_loss: f64,
    pub query_miou: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    /// Batch loss of every pretraining step.
    pub pretrain: Vec<f64>,
}

impl TrainLog {
    pub const HEADER: &'static str =
        "episode,support_loss_first,support_loss_last,query_loss,query_miou,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::HEADER);
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.episode,
                fmt_sig12(r.support_loss_first),
                fmt_sig12(r.support_loss_last),
                fmt_sig12(r.query_loss),
                fmt_sig12(r.query_miou),
                fmt_sig12(r.seconds)
            );
        }
        out
    }

    pub fn pretrain_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.pretrain.iter().enumerate() {
            let _ = writeln!(out, "{i},{}", fmt_sig12(*l));
        }
        out
    }

    /// Mean query loss over the first and last `n` episodes.
    pub fn query_loss_trend(&self, n: usize) -> Option<(f64, f64)> {
        if n == 0 || self.rows.len() < n {
            return None;
        }
        let mean = |rows: &[LogRow]| rows.iter().map(|r| r.query_loss).sum::<f64>() / n as f64;
        Some((
            mean(&self.rows[..n]),
            mean(&self.rows[self.rows.len() - n..]),
        ))
    }
}
