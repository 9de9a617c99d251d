use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hyq::RunRecord;

/// One checkpoint across replicates. `x` counts total samples (offline
/// exposed plus online collected).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregatePoint {
    pub checkpoint: usize,
    pub x: f64,
    pub median: f64,
    pub p20: f64,
    pub p80: f64,
    pub n_replicates: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AggregateCurve {
    pub points: Vec<AggregatePoint>,
}

/// Linearly interpolated quantile of ascending `sorted` (position
/// `q * (n - 1)`).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Reduces replicate curves checkpoint by checkpoint. Replicates of unequal
/// length are truncated to the shortest.
pub fn aggregate<'a>(records: impl IntoIterator<Item = &'a RunRecord>) -> Result<AggregateCurve> {
    let records: Vec<&RunRecord> = records.into_iter().collect();
    if records.is_empty() {
        return Err(Error::InvalidArgument("nothing to aggregate".into()));
    }
    let len = records.iter().map(|r| r.rows.len()).min().unwrap_or(0);
    let points = (0..len)
        .map(|i| {
            let ys = sorted(records.iter().map(|r| r.rows[i].eval_return).collect());
            let xs = sorted(
                records
                    .iter()
                    .map(|r| (r.rows[i].online_steps + r.rows[i].offline_samples) as f64)
                    .collect(),
            );
            AggregatePoint {
                checkpoint: i + 1,
                x: quantile(&xs, 0.5),
                median: quantile(&ys, 0.5),
                p20: quantile(&ys, 0.2),
                p80: quantile(&ys, 0.8),
                n_replicates: records.len(),
            }
        })
        .collect();
    Ok(AggregateCurve { points })
}

impl AggregateCurve {
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.points.is_empty() {
            w.write_record(["checkpoint", "x", "median", "p20", "p80", "n_replicates"])?;
        }
        for p in &self.points {
            w.serialize(p)?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let points = r.deserialize().collect::<std::result::Result<Vec<AggregatePoint>, _>>()?;
        Ok(Self { points })
    }

    pub fn final_median(&self) -> Option<f64> {
        self.points.last().map(|p| p.median)
    }

    /// Largest median reached at or before `budget` total samples.
    pub fn best_median_within(&self, budget: f64) -> Option<f64> {
        self.points
            .iter()
            .filter(|p| p.x <= budget)
            .map(|p| p.median)
            .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
    }
}
