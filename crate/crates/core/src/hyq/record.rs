use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Result;
use crate::mdp::Policy;

/// One learning-curve point: the return of the policy extracted at `iter`
/// and the data consumed to produce it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub iter: usize,
    pub online_steps: u64,
    pub offline_samples: u64,
    pub eval_return: f64,
    pub bellman_residual_offline: Option<f64>,
    pub bellman_residual_online: Option<f64>,
}

/// Size of one regression problem, in fitting order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitEntry {
    pub iter: usize,
    pub h: usize,
    pub n_offline: usize,
    pub n_online: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub algorithm: String,
    pub rows: Vec<RunRow>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fit_log: Vec<FitEntry>,
    /// Final greedy policy, when observations are tabular.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_policy: Option<Policy>,
    pub config: Value,
}

impl RunRecord {
    pub fn new(algorithm: &str, config: Value) -> Self {
        Self {
            algorithm: algorithm.into(),
            config,
            ..Self::default()
        }
    }

    pub fn final_return(&self) -> Option<f64> {
        self.rows.last().map(|r| r.eval_return)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.rows.is_empty() {
            w.write_record([
                "iter",
                "online_steps",
                "offline_samples",
                "eval_return",
                "bellman_residual_offline",
                "bellman_residual_online",
            ])?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
    }

    pub fn from_csv_str(algorithm: &str, text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<Vec<RunRow>, _>>()?;
        Ok(Self {
            algorithm: algorithm.into(),
            rows,
            ..Self::default()
        })
    }

    /// Writes `<stem>.csv` (the curve) and `<stem>.json` (config echo and
    /// warnings).
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv_string()?)?;
        let echo = json!({
            "algorithm": self.algorithm,
            "config": self.config,
            "warnings": self.warnings,
            "final_return": self.final_return(),
        });
        fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&echo)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_missing_diagnostics() {
        let mut rec = RunRecord::new("x", Value::Null);
        rec.rows.push(RunRow {
            iter: 1,
            online_steps: 0,
            offline_samples: 10,
            eval_return: 0.25,
            bellman_residual_offline: None,
            bellman_residual_online: Some(0.1 + 0.2),
        });
        let text = rec.to_csv_string().unwrap();
        assert!(text.starts_with(
            "iter,online_steps,offline_samples,eval_return,bellman_residual_offline,bellman_residual_online\n"
        ));
        let back = RunRecord::from_csv_str("x", &text).unwrap();
        assert_eq!(back.rows, rec.rows);
    }
}
