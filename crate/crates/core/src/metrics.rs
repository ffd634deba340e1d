//! Per-round metrics and their CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::aggregators::Rule;
use crate::error::Result;
use crate::orchestrator::{Evaluator, Mode, RoundOutcome};
use crate::scalar::Real;

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mode: Mode,
    pub rule: Rule,
    pub accuracy: f64,
    pub attack_success: f64,
    pub n_adversarial_aggregands: usize,
    pub mean_agg_norm: f64,
    pub var_ratio: Option<f64>,
}

impl RoundRecord {
    pub fn from_outcome<T: Real>(out: &RoundOutcome<T>, mode: Mode, rule: Rule, eval: &Evaluator<T>) -> Result<Self> {
        let n = out.aggregands.len().max(1) as f64;
        Ok(Self {
            round: out.state.round,
            mode,
            rule,
            accuracy: eval.accuracy(&out.state.model)?,
            attack_success: eval.attack_success(&out.state.model)?,
            n_adversarial_aggregands: out.aggregands.iter().filter(|a| a.adversarial).count(),
            mean_agg_norm: out.aggregands.iter().map(|a| a.delta.norm().to_f64_lossy()).sum::<f64>() / n,
            var_ratio: out.variance.as_ref().map(|v| v.mean_ratio),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricsLog {
    pub rows: Vec<RoundRecord>,
}

impl MetricsLog {
    pub fn last(&self) -> Option<&RoundRecord> {
        self.rows.last()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        if self.rows.is_empty() {
            out.write_record([
                "round",
                "mode",
                "rule",
                "accuracy",
                "attack_success",
                "n_adversarial_aggregands",
                "mean_agg_norm",
                "var_ratio",
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv output is utf-8"))
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let rows = rdr.deserialize().collect::<std::result::Result<Vec<RoundRecord>, _>>()?;
        Ok(Self { rows })
    }
}
