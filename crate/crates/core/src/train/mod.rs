//! Losses, training schedules and the four experiment variants.

mod config;
mod experiment;
mod model;

pub use config::{TrainConfig, Variant};
pub use experiment::{
    evaluate, oracle_row, report_for, run_experiment, run_experiment_in, DetectionRow, EvalSet,
    ExperimentReport, OracleRow, Trained,
};
pub use model::Model;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cine::CineSequence;
use crate::corrupt::LineMask;
use crate::detect::LineProb;
use crate::error::{Error, Result};
use crate::tensorlab::{Graph, Var};

/// Probability clamp applied before the logarithms of the detection loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Weighting between detection and reconstruction losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda: 0.3 }
    }
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        let w = LossWeights { lambda };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        Ok(())
    }
}

/// Mean squared error over all pixels.
pub fn loss_reconstruction(pred: &CineSequence, gt: &CineSequence) -> Result<f64> {
    pred.same_dims(gt)?;
    let n = pred.data().len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Mean binary cross-entropy over lines; labels are 1 for uncorrupted.
pub fn loss_detection(pr: &LineProb, y: &LineMask) -> Result<f64> {
    if (pr.frames(), pr.lines()) != (y.frames(), y.lines()) {
        return Err(Error::invalid(format!(
            "probabilities {}x{} vs mask {}x{}",
            pr.frames(),
            pr.lines(),
            y.frames(),
            y.lines()
        )));
    }
    let n = pr.data().len() as f64;
    let s: f64 = pr
        .data()
        .iter()
        .zip(y.flags())
        .map(|(&p, &f)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if f == 1 {
                p.ln()
            } else {
                (1.0 - p).ln()
            }
        })
        .sum();
    Ok(-s / n)
}

pub fn loss_total(l_det: f64, l_rec: f64, w: &LossWeights) -> f64 {
    w.lambda * l_det + (1.0 - w.lambda) * l_rec
}

/// Graph form of [`loss_total`].
pub fn loss_total_var(g: &mut Graph, l_det: Var, l_rec: Var, w: &LossWeights) -> Result<Var> {
    w.validate()?;
    let a = g.scale(l_det, w.lambda);
    let b = g.scale(l_rec, 1.0 - w.lambda);
    g.add(a, b)
}

/// Stop when none of the last `patience` losses beat the best loss before
/// it by at least `min_rel_improve` relative. The first loss always counts
/// as an improvement. Empty input never stops.
pub fn early_stop_losses(losses: &[f64], patience: usize, min_rel_improve: f64) -> bool {
    let Some(&first) = losses.first() else {
        return false;
    };
    let mut best = first;
    let mut last_improve = 0;
    for (i, &l) in losses.iter().enumerate().skip(1) {
        if l < best * (1.0 - min_rel_improve) {
            last_improve = i;
        }
        if l < best {
            best = l;
        }
    }
    losses.len() - 1 - last_improve >= patience
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: String,
    pub epoch: usize,
    /// Absent for the record validating a phase's starting point.
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    /// Mean validation PSNR of the reconstruction, when the phase has one.
    pub val_psnr: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

impl History {
    /// Appends a record; epochs within a phase must increase.
    pub fn push(&mut self, r: EpochRecord) -> Result<()> {
        if let Some(prev) = self.records.iter().rev().find(|p| p.phase == r.phase) {
            if r.epoch <= prev.epoch {
                return Err(Error::invalid(format!(
                    "epoch {} after {} in phase {}",
                    r.epoch, prev.epoch, r.phase
                )));
            }
        }
        self.records.push(r);
        Ok(())
    }

    pub fn phase(&self, phase: &str) -> impl Iterator<Item = &EpochRecord> {
        let phase = phase.to_string();
        self.records.iter().filter(move |r| r.phase == phase)
    }

    pub fn val_losses(&self, phase: &str) -> Vec<f64> {
        self.phase(phase).map(|r| r.val_loss).collect()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("record serializes"));
            s.push('\n');
        }
        s
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(History { records })
    }
}

/// [`early_stop_losses`] on the validation losses of one phase.
pub fn early_stop(history: &History, phase: &str, patience: usize, min_rel_improve: f64) -> bool {
    early_stop_losses(&history.val_losses(phase), patience, min_rel_improve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorlab::Tensor;

    fn seq(v: Vec<f64>) -> CineSequence {
        CineSequence::new(1, 2, v.len() / 2, v).unwrap()
    }

    #[test]
    fn reconstruction_loss_examples() {
        let a = seq(vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(loss_reconstruction(&a, &a).unwrap(), 0.0);
        let b = seq(a.data().iter().map(|v| v + 0.5).collect());
        assert!((loss_reconstruction(&b, &a).unwrap() - 0.25).abs() < 1e-15);
        assert!(loss_reconstruction(&a, &seq(vec![0.0; 6])).is_err());
    }

    #[test]
    fn reconstruction_loss_matches_loop() {
        let mut r = crate::rng::stream(3, &[]);
        use rand::Rng;
        let x: Vec<f64> = (0..64).map(|_| r.random()).collect();
        let y: Vec<f64> = (0..64).map(|_| r.random()).collect();
        let mut acc = 0.0;
        for i in 0..64 {
            acc += (x[i] - y[i]).powi(2);
        }
        let got = loss_reconstruction(&seq(x), &seq(y)).unwrap();
        assert!((got - acc / 64.0).abs() < 1e-12);
    }

    #[test]
    fn detection_loss_examples() {
        let y = LineMask::from_flags(2, 2, vec![1, 0, 1, 0]).unwrap();
        let half = LineProb::new(2, 2, vec![0.5; 4]).unwrap();
        assert!((loss_detection(&half, &y).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        let exact = LineProb::new(2, 2, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let l = loss_detection(&exact, &y).unwrap();
        assert!((l - 1e-7).abs() < 1e-12, "{l}");
        let ones = LineMask::ones(2, 2);
        let p9 = LineProb::new(2, 2, vec![0.9; 4]).unwrap();
        assert!((loss_detection(&p9, &ones).unwrap() - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn detection_loss_agrees_with_graph_bce() {
        let y = LineMask::from_flags(2, 3, vec![1, 0, 1, 1, 0, 1]).unwrap();
        let p = LineProb::new(2, 3, vec![0.2, 0.3, 0.9, 0.6, 0.1, 0.75]).unwrap();
        let mut g = Graph::new();
        let v = g.constant(p.to_tensor());
        let l = g.bce(v, &y.to_tensor()).unwrap();
        let graph = g.value(l).item().unwrap();
        assert!((graph - loss_detection(&p, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert!((loss_total(1.0, 2.0, &w) - 1.7).abs() < 1e-15);
        assert_eq!(loss_total(1.0, 2.0, &LossWeights::new(0.0).unwrap()), 2.0);
        assert_eq!(loss_total(1.0, 2.0, &LossWeights::new(1.0).unwrap()), 1.0);
        assert!(LossWeights::new(1.5).is_err());
        let mut g = Graph::new();
        let a = g.constant(Tensor::scalar(1.0));
        let b = g.constant(Tensor::scalar(2.0));
        let t = loss_total_var(&mut g, a, b, &w).unwrap();
        assert!((g.value(t).item().unwrap() - 1.7).abs() < 1e-15);
    }

    #[test]
    fn early_stop_rules() {
        let patience = 5;
        let improving: Vec<f64> = (0..20).map(|i| 0.99f64.powi(i)).collect();
        assert!(!early_stop_losses(&improving, patience, 0.005));
        let flat = vec![1.0; patience + 1];
        assert!(early_stop_losses(&flat, patience, 0.005));
        assert!(!early_stop_losses(&flat[..patience], patience, 0.005));
        let slow: Vec<f64> = (0..=patience).map(|i| 0.997f64.powi(i as i32)).collect();
        assert!(early_stop_losses(&slow, patience, 0.005));
        assert!(!early_stop_losses(&[], patience, 0.005));
        let mut late = vec![1.0; patience];
        late.push(0.9);
        assert!(!early_stop_losses(&late, patience, 0.005));
    }

    #[test]
    fn history_jsonl_round_trip_and_order() {
        let mut h = History::default();
        for e in 0..3 {
            h.push(EpochRecord {
                phase: "p".into(),
                epoch: e,
                train_loss: Some(1.0 / (e + 1) as f64),
                val_loss: 2.0,
                val_psnr: if e == 0 { None } else { Some(30.0) },
                wall_time_s: 0.5,
            })
            .unwrap();
        }
        let mut bad = h.records[0].clone();
        bad.epoch = 1;
        assert!(h.push(bad).is_err());
        let text = h.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        assert_eq!(History::from_jsonl(&text).unwrap(), h);
        assert!(early_stop(&h, "p", 2, 0.005));
    }
}
