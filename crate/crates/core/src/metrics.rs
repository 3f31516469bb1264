//! Confusion accumulation under the standard (`miou`) and corrected
//! (`miou_star`) multi-way protocols, scoring and multi-run aggregation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::episodes::{ClassId, LabelMask};
use crate::error::{config_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Miou,
    MiouStar,
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Miou => "miou",
            Protocol::MiouStar => "miou_star",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "miou" => Ok(Protocol::Miou),
            "miou_star" => Ok(Protocol::MiouStar),
            _ => Err(config_err!("unknown protocol {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn iou(&self) -> Option<f64> {
        let den = self.tp + self.fp + self.fn_;
        (den > 0).then(|| self.tp as f64 / den as f64)
    }

    fn merge(&mut self, o: &Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Per dataset class counts; background (id 0) is tracked but never scored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionState {
    pub protocol: Protocol,
    pub classes: BTreeMap<ClassId, Counts>,
}

impl ConfusionState {
    pub fn new(protocol: Protocol) -> Self {
        ConfusionState {
            protocol,
            classes: BTreeMap::new(),
        }
    }

    pub fn counts(&self, class: ClassId) -> Counts {
        self.classes.get(&class).copied().unwrap_or_default()
    }

    /// Adds one episode. `pred`/`gt` hold episode-local labels `0..=N`;
    /// `episode_classes[n-1]` is the dataset id of label `n`.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask, episode_classes: &[ClassId]) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Data(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        let n = episode_classes.len();
        let mut present = vec![false; n + 1];
        for &t in &gt.labels {
            if t as usize > n {
                return Err(Error::Data(format!("ground-truth label {t} outside [0, {n}]")));
            }
            present[t as usize] = true;
        }
        if let Some(&p) = pred.labels.iter().find(|&&p| p as usize > n) {
            return Err(Error::Data(format!("predicted label {p} outside [0, {n}]")));
        }
        let id = |l: u8| if l == 0 { 0 } else { episode_classes[l as usize - 1] };
        for &c in episode_classes.iter().chain(std::iter::once(&0)) {
            self.classes.entry(c).or_default();
        }
        for (&p, &t) in pred.labels.iter().zip(&gt.labels) {
            if p == t {
                self.classes.get_mut(&id(t)).unwrap().tp += 1;
                continue;
            }
            self.classes.get_mut(&id(t)).unwrap().fn_ += 1;
            if present[p as usize] || self.protocol == Protocol::MiouStar {
                self.classes.get_mut(&id(p)).unwrap().fp += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionState) -> Result<()> {
        if self.protocol != other.protocol {
            return Err(config_err!(
                "cannot merge {} into {}",
                other.protocol,
                self.protocol
            ));
        }
        for (c, k) in &other.classes {
            self.classes.entry(*c).or_default().merge(k);
        }
        Ok(())
    }

    pub fn score(&self) -> Result<Score> {
        let per_class: BTreeMap<ClassId, f64> = self
            .classes
            .iter()
            .filter(|(c, _)| **c != 0)
            .filter_map(|(c, k)| k.iou().map(|v| (*c, v)))
            .collect();
        if per_class.is_empty() {
            return Err(Error::UndefinedScore(
                "no foreground class has a nonzero denominator".into(),
            ));
        }
        let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
        Ok(Score {
            protocol: self.protocol,
            per_class,
            mean,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub protocol: Protocol,
    pub per_class: BTreeMap<ClassId, f64>,
    pub mean: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

impl fmt::Display for RunAggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ± {:.4} ({} runs)", self.mean, self.std, self.runs)
    }
}

/// Arithmetic mean and sample standard deviation.
pub fn aggregate_runs(scores: &[f64]) -> Result<RunAggregate> {
    if scores.is_empty() {
        return Err(Error::UndefinedScore("no runs to aggregate".into()));
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let std = if scores.len() < 2 {
        0.0
    } else {
        (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(RunAggregate {
        mean,
        std,
        runs: scores.len(),
    })
}
