use std::fmt;

use crate::error::{Error, Result};
use crate::hsicube::BinaryMap;

/// Confusion counts of a binary change map and the scores derived from them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
    pub oa: f64,
    pub kappa: f64,
    /// Chance agreement.
    pub p: f64,
}

impl Metrics {
    /// Derives OA, chance agreement and Kappa from the four counts.
    ///
    /// When the chance agreement is 1 Kappa is undefined; it is reported as 1
    /// for perfect agreement and 0 otherwise.
    pub fn from_counts(tp: u64, tn: u64, fp: u64, fn_: u64) -> Result<Self> {
        let total = tp + tn + fp + fn_;
        if total == 0 {
            return Err(Error::Shape("metrics need at least one pixel".into()));
        }
        let t = total as f64;
        let oa = (tp + tn) as f64 / t;
        let p = ((tp + fp) as f64 * (tp + fn_) as f64 + (fn_ + tn) as f64 * (fp + tn) as f64)
            / (t * t);
        let kappa = if p == 1.0 {
            if oa == 1.0 {
                1.0
            } else {
                0.0
            }
        } else {
            (oa - p) / (1.0 - p)
        };
        Ok(Self {
            tp,
            tn,
            fp,
            fn_,
            oa,
            kappa,
            p,
        })
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// True when recomputing from the counts reproduces every stored score.
    pub fn is_consistent(&self) -> bool {
        Self::from_counts(self.tp, self.tn, self.fp, self.fn_)
            .map(|m| m.oa == self.oa && m.kappa == self.kappa && m.p == self.p)
            .unwrap_or(false)
    }

    /// Parses the `key=value, ...` form written by [`fmt::Display`].
    pub fn parse(text: &str) -> Result<Self> {
        let mut counts = [None; 4];
        for part in text.split([',', '\n']).map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::format("metrics", format!("`{part}` is not key=value")))?;
            let slot = match k.trim() {
                "tp" => 0,
                "tn" => 1,
                "fp" => 2,
                "fn" => 3,
                _ => continue,
            };
            let v = v.trim().parse::<u64>().map_err(|_| {
                Error::format("metrics", format!("count `{}` is not an integer", v.trim()))
            })?;
            counts[slot] = Some(v);
        }
        match counts {
            [Some(tp), Some(tn), Some(fp), Some(fn_)] => Self::from_counts(tp, tn, fp, fn_),
            _ => Err(Error::format("metrics", "missing one of tp, tn, fp, fn")),
        }
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "tp={}, tn={}, fp={}, fn={}, oa={}, kappa={}",
            self.tp, self.tn, self.fp, self.fn_, self.oa, self.kappa
        )
    }
}

/// Confusion matrix of `pred` against `truth` (1 = changed).
pub fn evaluate(pred: &BinaryMap, truth: &BinaryMap) -> Result<Metrics> {
    if pred.height() != truth.height() || pred.width() != truth.width() {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            truth.height(),
            truth.width()
        )));
    }
    let mut c = [0u64; 4];
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        c[usize::from(p) * 2 + usize::from(t)] += 1;
    }
    let [tn, fn_, fp, tp] = c;
    Metrics::from_counts(tp, tn, fp, fn_)
}
