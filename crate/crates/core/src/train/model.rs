use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cine::CineSequence;
use crate::corrupt::LineMask;
use crate::detect::{detect_kspace, threshold_mask, DetectConfig, DetectNet, LineProb};
use crate::error::{Error, Result};
use crate::fourier::KSpaceSequence;
use crate::io::{read_archive, write_archive, CktTensor};
use crate::recon::{recon_forward, DcMode, DcWeights, ReconConfig, ReconNet};
use crate::rng::{self, tag};
use crate::tensorlab::{ParamId, Params};

pub(crate) const DETECT_PREFIX: &str = "detect.";
pub(crate) const RECON_PREFIX: &str = "recon.";

/// A detector and a reconstruction network sharing one parameter store.
#[derive(Clone, Debug)]
pub struct Model {
    pub params: Params,
    pub detect: DetectNet,
    pub recon: ReconNet,
}

#[derive(Serialize, Deserialize)]
struct Architecture {
    tool: String,
    detect: DetectConfig,
    recon: ReconConfig,
}

impl Model {
    /// Fresh weights drawn from the `INIT` stream of `seed`.
    pub fn new(detect: DetectConfig, recon: ReconConfig, seed: u64) -> Result<Self> {
        let mut params = Params::new();
        let mut r = rng::stream(seed, &[tag::INIT, 0]);
        let detect = DetectNet::new(detect, &mut params, DETECT_PREFIX, &mut r)?;
        let mut r = rng::stream(seed, &[tag::INIT, 1]);
        let recon = ReconNet::new(recon, &mut params, RECON_PREFIX, &mut r)?;
        Ok(Model {
            params,
            detect,
            recon,
        })
    }

    pub fn detect_ids(&self) -> Vec<ParamId> {
        self.detect.param_ids()
    }

    pub fn recon_ids(&self) -> Vec<ParamId> {
        self.recon.param_ids()
    }

    pub fn all_ids(&self) -> Vec<ParamId> {
        let mut v = self.detect_ids();
        v.extend(self.recon_ids());
        v
    }

    pub fn predict_lines(&self, ks: &KSpaceSequence) -> Result<LineProb> {
        detect_kspace(&self.detect, &self.params, ks)
    }

    /// Hard-DC reconstruction with a given trust mask.
    pub fn reconstruct(&self, ks: &KSpaceSequence, mask: &LineMask) -> Result<CineSequence> {
        recon_forward(
            &self.recon,
            &self.params,
            ks,
            &DcWeights::Mask(mask),
            DcMode::Hard,
        )
    }

    /// Detect, threshold at `tau`, then reconstruct with hard DC.
    pub fn correct(
        &self,
        ks: &KSpaceSequence,
        tau: f64,
    ) -> Result<(CineSequence, LineProb, LineMask)> {
        let prob = self.predict_lines(ks)?;
        let mask = threshold_mask(&prob, tau)?;
        let image = self.reconstruct(ks, &mask)?;
        Ok((image, prob, mask))
    }

    /// Rounds every parameter to f32, the precision of saved checkpoints.
    pub fn quantize(&mut self) {
        let ids: Vec<ParamId> = self.params.ids().collect();
        for id in ids {
            self.params
                .get_mut(id)
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Writes `<stem>.ckt` (parameter archive, f32) and `<stem>.json`
    /// (architecture) into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        let entries: Vec<(String, CktTensor)> = self
            .params
            .iter()
            .map(|(_, name, t)| (name.to_string(), CktTensor::from(t)))
            .collect();
        write_archive(&dir.join(format!("{stem}.ckt")), &entries)?;
        let arch = Architecture {
            tool: crate::io::TOOL_VERSION.to_string(),
            detect: self.detect.config.clone(),
            recon: self.recon.config.clone(),
        };
        crate::io::write_json(&dir.join(format!("{stem}.json")), &arch)
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let arch: Architecture = crate::io::read_json(&dir.join(format!("{stem}.json")))?;
        let mut params = Params::new();
        for (name, t) in read_archive(&dir.join(format!("{stem}.ckt")))? {
            params.add(name, t.to_tensor()?)?;
        }
        let detect = DetectNet::bind(arch.detect, &params, DETECT_PREFIX)?;
        let recon = ReconNet::bind(arch.recon, &params, RECON_PREFIX)?;
        if params.len() != detect.param_ids().len() + recon.param_ids().len() {
            return Err(Error::invalid("checkpoint holds unexpected parameters"));
        }
        Ok(Model {
            params,
            detect,
            recon,
        })
    }
}
