use serde::{Deserialize, Serialize};

use super::LossWeights;
use crate::corrupt::SEVERITIES;
use crate::detect::DetectConfig;
use crate::error::{Error, Result};
use crate::phantom::DatasetSpec;
use crate::recon::ReconConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Separate,
    End2end,
    KnownMask,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Separate,
        Variant::End2end,
        Variant::KnownMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Separate => "separate",
            Variant::End2end => "end2end",
            Variant::KnownMask => "known_mask",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub variants: Vec<Variant>,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    /// Epochs of reconstruction pretraining.
    pub pretrain_epochs: usize,
    /// Epochs of detector pretraining.
    pub detect_pretrain_epochs: usize,
    /// Upper bound on epochs of the phases that use early stopping.
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub min_rel_improve: f64,
    pub severities: Vec<usize>,
    /// Draw a new severity per example and epoch; otherwise each subject
    /// keeps the severity drawn for it once.
    pub resample_severity: bool,
    /// Severity of the corrupted test inputs.
    pub eval_severity: usize,
    pub loss: LossWeights,
    /// Threshold turning detector probabilities into a DC mask at inference.
    pub threshold: f64,
    /// Tolerance of the duplicate-line oracle reported alongside the model.
    pub oracle_eps: f64,
    pub workers: usize,
    pub data: DatasetSpec,
    pub detect: DetectConfig,
    pub recon: ReconConfig,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        let data = DatasetSpec::desk(seed);
        let (t, h, w) = (data.frames, data.height, data.width);
        TrainConfig {
            seed,
            variants: Variant::ALL.to_vec(),
            batch_size: 4,
            lr: 1e-3,
            beta1: 0.9,
            pretrain_epochs: 5,
            detect_pretrain_epochs: 40,
            max_epochs: 10,
            patience_epochs: 10,
            min_rel_improve: 0.005,
            severities: SEVERITIES.to_vec(),
            resample_severity: true,
            eval_severity: 8,
            loss: LossWeights::default(),
            threshold: 0.5,
            oracle_eps: 1e-9,
            workers: 1,
            data,
            detect: DetectConfig::desk(t, h, w),
            recon: ReconConfig::desk(t, h, w),
        }
    }

    pub fn full(seed: u64) -> Self {
        let data = DatasetSpec::full(seed);
        let (t, h, w) = (data.frames, data.height, data.width);
        TrainConfig {
            batch_size: 50,
            lr: 1e-4,
            pretrain_epochs: 50,
            detect_pretrain_epochs: 50,
            max_epochs: 1000,
            patience_epochs: 100,
            data,
            detect: DetectConfig::full(t, h, w),
            recon: ReconConfig::full(t, h, w),
            ..Self::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.workers == 0 {
            return bad("batch_size and workers must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) {
            return bad(format!(
                "bad optimizer settings lr={} beta1={}",
                self.lr, self.beta1
            ));
        }
        if self.patience_epochs == 0 || !(self.min_rel_improve >= 0.0) {
            return bad("patience must be positive and min_rel_improve non-negative".into());
        }
        if self.variants.is_empty() {
            return bad("no variants requested".into());
        }
        if self.severities.is_empty() || self.severities.iter().any(|&n| n > self.data.height) {
            return bad(format!(
                "severities {:?} invalid for height {}",
                self.severities, self.data.height
            ));
        }
        if self.eval_severity > self.data.height {
            return bad(format!(
                "eval severity {} exceeds height",
                self.eval_severity
            ));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} outside (0, 1)", self.threshold));
        }
        self.loss
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        let dims = (self.data.frames, self.data.height, self.data.width);
        if (self.detect.frames, self.detect.height, self.detect.width) != dims
            || (self.recon.frames, self.recon.height, self.recon.width) != dims
        {
            return bad("network dimensions must match the dataset".into());
        }
        self.detect.validate()?;
        self.recon.validate()?;
        self.data
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    pub(crate) fn needs(&self, v: Variant) -> bool {
        self.variants.contains(&v)
    }
}
