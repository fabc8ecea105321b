use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::model::Model;
use super::{early_stop_losses, loss_total_var, EpochRecord, History, TrainConfig, Variant};
use crate::cine::CineSequence;
use crate::corrupt::{corrupt_sequence, sample_plan, Corrupted, LineMask};
use crate::detect::{auroc_scores, detector_input, duplicate_line_oracle};
use crate::error::{Error, Result};
use crate::fourier::KSpaceSequence;
use crate::metrics::{quality, Quality, QualityRow, QualitySummary};
use crate::phantom::{Split, Subject};
use crate::recon::DcMode;
use crate::rng::{self, tag};
use crate::tensorlab::{Adam, AdamConfig, Grads, Graph, ParamId, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Detect,
    Recon,
    Joint,
}

/// Training phases in schedule order; the index keys the random streams.
const DETECT_PRETRAIN: (&str, u64) = ("detect_pretrain", 0);
const RECON_PRETRAIN: (&str, u64) = ("recon_pretrain", 1);
const KNOWN_MASK: (&str, u64) = ("known_mask", 2);
const JOINT: (&str, u64) = ("joint", 3);

/// One corrupted training or validation example.
struct Sample {
    clean: CineSequence,
    target: Tensor,
    ks: KSpaceSequence,
    labels: Tensor,
    det_input: Tensor,
}

impl Sample {
    fn new(clean: &CineSequence, c: Corrupted, cfg: &TrainConfig) -> Result<Self> {
        let (t, h, w) = clean.dims();
        Ok(Sample {
            clean: clean.clone(),
            target: clean.to_tensor().reshape(&[1, t, h, w])?,
            labels: c.mask.to_tensor(),
            det_input: detector_input(&c.kspace, cfg.detect.input),
            ks: c.kspace,
        })
    }
}

struct Output {
    loss: Var,
    image: Option<Var>,
}

fn build_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Model,
    cfg: &TrainConfig,
    s: &Sample,
    phase: Phase,
    training: bool,
    rng: &mut R,
) -> Result<Output> {
    let p = &model.params;
    match phase {
        Phase::Detect => {
            let pr = model.detect.forward(g, p, &s.det_input, training, rng)?;
            Ok(Output {
                loss: g.bce(pr, &s.labels)?,
                image: None,
            })
        }
        Phase::Recon => {
            let w = g.constant(s.labels.clone());
            let o = model.recon.forward(g, p, &s.ks, w, DcMode::Hard)?;
            let re = g.select_channel(o, 0)?;
            Ok(Output {
                loss: g.mse(re, &s.target)?,
                image: Some(re),
            })
        }
        Phase::Joint => {
            let pr = model.detect.forward(g, p, &s.det_input, training, rng)?;
            let mode = DcMode::Soft {
                lambda: cfg.recon.dc_lambda,
            };
            let o = model.recon.forward(g, p, &s.ks, pr, mode)?;
            let re = g.select_channel(o, 0)?;
            let l_rec = g.mse(re, &s.target)?;
            let l_det = g.bce(pr, &s.labels)?;
            Ok(Output {
                loss: loss_total_var(g, l_det, l_rec, &cfg.loss)?,
                image: Some(re),
            })
        }
    }
}

struct Trainer<'a> {
    cfg: &'a TrainConfig,
    pool: rayon::ThreadPool,
    train: Vec<&'a Subject>,
    val: Vec<Sample>,
    history: History,
    /// Severity per training subject when severities are not resampled.
    fixed_severity: Vec<usize>,
}

fn draw_severity(cfg: &TrainConfig, path: &[u64]) -> usize {
    let mut r = rng::stream(cfg.seed, path);
    cfg.severities[r.random_range(0..cfg.severities.len())]
}

fn corrupt_with(
    clean: &CineSequence,
    n_lines: usize,
    seed: u64,
    path: &[u64],
) -> Result<Corrupted> {
    let (t, h, _) = clean.dims();
    let mut r = rng::stream(seed, path);
    corrupt_sequence(clean, &sample_plan(t, h, n_lines, None, &mut r)?)
}

impl<'a> Trainer<'a> {
    fn new(cfg: &'a TrainConfig, subjects: &'a [Subject]) -> Result<Self> {
        let pick = |s: Split| subjects.iter().filter(|x| x.split == s).collect::<Vec<_>>();
        let train = pick(Split::Train);
        let val_subjects = pick(Split::Val);
        if train.is_empty() || val_subjects.is_empty() || pick(Split::Test).is_empty() {
            return Err(Error::invalid(
                "dataset needs train, validation and test subjects",
            ));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let val = pool.install(|| {
            val_subjects
                .par_iter()
                .map(|s| {
                    let n = draw_severity(cfg, &[tag::VALID, s.id]);
                    let c = corrupt_with(&s.clean, n, cfg.seed, &[tag::VALID, s.id, 1])?;
                    Sample::new(&s.clean, c, cfg)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let fixed_severity = train
            .iter()
            .map(|s| draw_severity(cfg, &[tag::SEVERITY, s.id]))
            .collect();
        Ok(Trainer {
            cfg,
            pool,
            train,
            val,
            history: History::default(),
            fixed_severity,
        })
    }

    fn train_sample(&self, idx: usize, key: u64, epoch: usize) -> Result<Sample> {
        let s = self.train[idx];
        let e = epoch as u64;
        let n = if self.cfg.resample_severity {
            draw_severity(self.cfg, &[tag::SEVERITY, key, e, s.id])
        } else {
            self.fixed_severity[idx]
        };
        let c = corrupt_with(&s.clean, n, self.cfg.seed, &[tag::CORRUPT, key, e, s.id])?;
        Sample::new(&s.clean, c, self.cfg)
    }

    /// One pass over the training split; returns the mean sample loss.
    fn train_epoch(
        &self,
        model: &mut Model,
        adam: &mut Adam,
        ids: &[ParamId],
        phase: Phase,
        key: u64,
        epoch: usize,
    ) -> Result<f64> {
        let cfg = self.cfg;
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut rng::stream(
            cfg.seed,
            &[tag::SHUFFLE, key, epoch as u64],
        ));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let snapshot: &Model = model;
            let results = self.pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        let sample = self.train_sample(i, key, epoch)?;
                        let id = self.train[i].id;
                        let mut dr = rng::stream(cfg.seed, &[tag::DROPOUT, key, epoch as u64, id]);
                        let mut g = Graph::new();
                        let out =
                            build_graph(&mut g, snapshot, cfg, &sample, phase, true, &mut dr)?;
                        let loss = g.value(out.loss).item()?;
                        let grads = g.backward(out.loss)?.param_grads(&snapshot.params);
                        Ok((loss, grads))
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut sum = Grads::zeros_like(&model.params);
            for (loss, g) in &results {
                if !loss.is_finite() {
                    return Err(Error::DegenerateInput(format!(
                        "non-finite training loss in {phase:?}"
                    )));
                }
                total += loss;
                sum.accumulate(g);
            }
            sum.scale(1.0 / batch.len() as f64);
            adam.step(&mut model.params, &sum, ids);
        }
        Ok(total / self.train.len() as f64)
    }

    /// Mean validation loss and, for phases with a reconstruction, the
    /// mean PSNR over the validation set.
    fn validate(&self, model: &Model, phase: Phase) -> Result<(f64, Option<f64>)> {
        let cfg = self.cfg;
        let rows = self.pool.install(|| {
            self.val
                .par_iter()
                .map(|s| {
                    let mut unused = rng::stream(0, &[]);
                    let mut g = Graph::new();
                    let out = build_graph(&mut g, model, cfg, s, phase, false, &mut unused)?;
                    let loss = g.value(out.loss).item()?;
                    let q = match out.image {
                        Some(v) => {
                            let (t, h, w) = s.clean.dims();
                            let img = CineSequence::new(t, h, w, g.value(v).data().to_vec())?;
                            Some(quality(&img, &s.clean)?)
                        }
                        None => None,
                    };
                    Ok((loss, q))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let loss = rows.iter().map(|r| r.0).sum::<f64>() / rows.len() as f64;
        let qs: Vec<Quality> = rows.iter().filter_map(|r| r.1).collect();
        let psnr = (!qs.is_empty()).then(|| QualitySummary::from_rows(&qs).psnr);
        Ok((loss, psnr))
    }

    /// Trains `ids` for up to `epochs` epochs. With `early`, the starting
    /// point is validated first, training stops by the patience rule and
    /// the best validated parameters are restored.
    fn run_phase(
        &mut self,
        model: &mut Model,
        ids: &[ParamId],
        phase: Phase,
        (name, key): (&str, u64),
        epochs: usize,
        early: bool,
    ) -> Result<()> {
        let cfg = self.cfg;
        let mut adam = Adam::new(AdamConfig {
            lr: cfg.lr,
            beta1: cfg.beta1,
            ..AdamConfig::default()
        });
        let mut losses = Vec::new();
        let mut best: Option<(f64, crate::tensorlab::Params)> = None;
        if early {
            let start = Instant::now();
            let (vl, vp) = self.validate(model, phase)?;
            self.history.push(EpochRecord {
                phase: name.into(),
                epoch: 0,
                train_loss: None,
                val_loss: vl,
                val_psnr: vp,
                wall_time_s: start.elapsed().as_secs_f64(),
            })?;
            losses.push(vl);
            best = Some((vl, model.params.clone()));
        }
        for epoch in 1..=epochs {
            let start = Instant::now();
            let tl = self.train_epoch(model, &mut adam, ids, phase, key, epoch)?;
            let (vl, vp) = self.validate(model, phase)?;
            self.history.push(EpochRecord {
                phase: name.into(),
                epoch,
                train_loss: Some(tl),
                val_loss: vl,
                val_psnr: vp,
                wall_time_s: start.elapsed().as_secs_f64(),
            })?;
            losses.push(vl);
            if let Some((b, _)) = &best {
                if vl < *b {
                    best = Some((vl, model.params.clone()));
                }
            }
            if early && early_stop_losses(&losses, cfg.patience_epochs, cfg.min_rel_improve) {
                break;
            }
        }
        if let Some((_, p)) = best {
            model.params = p;
        }
        Ok(())
    }
}

/// Test inputs at one severity; plans come from the `EVAL` stream.
pub struct EvalSet {
    pub severity: usize,
    pub ids: Vec<u64>,
    pub clean: Vec<CineSequence>,
    pub corrupted: Vec<Corrupted>,
}

impl EvalSet {
    pub fn new(subjects: &[Subject], severity: usize, seed: u64) -> Result<Self> {
        let test: Vec<&Subject> = subjects.iter().filter(|s| s.split == Split::Test).collect();
        if test.is_empty() {
            return Err(Error::invalid("dataset has no test subjects"));
        }
        let corrupted = test
            .par_iter()
            .map(|s| {
                corrupt_with(
                    &s.clean,
                    severity,
                    seed,
                    &[tag::EVAL, severity as u64, s.id],
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSet {
            severity,
            ids: test.iter().map(|s| s.id).collect(),
            clean: test.iter().map(|s| s.clean.clone()).collect(),
            corrupted,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn variant_output(
    v: Variant,
    model: Option<&Model>,
    image: &CineSequence,
    ks: &KSpaceSequence,
    truth: &LineMask,
    threshold: f64,
) -> Result<CineSequence> {
    let need =
        || model.ok_or_else(|| Error::invalid(format!("{} needs a trained model", v.name())));
    match v {
        Variant::Baseline => Ok(image.clone()),
        Variant::KnownMask => need()?.reconstruct(ks, truth),
        Variant::Separate | Variant::End2end => Ok(need()?.correct(ks, threshold)?.0),
    }
}

/// Quality of one variant on the corrupted and uncorrupted test inputs.
pub fn evaluate(
    v: Variant,
    model: Option<&Model>,
    set: &EvalSet,
    threshold: f64,
) -> Result<QualityRow> {
    let rows = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let clean = &set.clean[i];
            let c = &set.corrupted[i];
            let (t, h, _) = clean.dims();
            let a = variant_output(v, model, &c.image, &c.kspace, &c.mask, threshold)?;
            let clean_ks = crate::fourier::to_kspace(clean)?;
            let b = variant_output(v, model, clean, &clean_ks, &LineMask::ones(t, h), threshold)?;
            Ok((quality(&a, clean)?, quality(&b, clean)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let (a, b): (Vec<Quality>, Vec<Quality>) = rows.into_iter().unzip();
    Ok(QualityRow {
        method: v.name().into(),
        corrupted: QualitySummary::from_rows(&a),
        uncorrupted: QualitySummary::from_rows(&b),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub method: String,
    pub severity: usize,
    /// Pooled per-line AUROC, corrupted lines as positives.
    pub auroc: f64,
    /// Fraction of lines whose thresholded prediction matches the truth.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub severity: usize,
    pub eps: f64,
    pub recall: f64,
    pub precision: f64,
}

fn detection_row(name: &str, model: &Model, set: &EvalSet, threshold: f64) -> Result<DetectionRow> {
    let probs = set
        .corrupted
        .par_iter()
        .map(|c| model.predict_lines(&c.kspace))
        .collect::<Result<Vec<_>>>()?;
    let mut scores = Vec::new();
    let mut positive = Vec::new();
    let mut correct = 0usize;
    for (p, c) in probs.iter().zip(&set.corrupted) {
        for (&pv, &f) in p.data().iter().zip(c.mask.flags()) {
            scores.push(1.0 - pv);
            positive.push(f == 0);
            correct += usize::from((pv >= threshold) == (f == 1));
        }
    }
    Ok(DetectionRow {
        method: name.into(),
        severity: set.severity,
        auroc: auroc_scores(&scores, &positive)?,
        accuracy: correct as f64 / scores.len() as f64,
    })
}

/// Recall and precision of the duplicate-line oracle over an eval set.
pub fn oracle_row(set: &EvalSet, eps: f64) -> Result<OracleRow> {
    let masks = set
        .corrupted
        .par_iter()
        .map(|c| duplicate_line_oracle(&c.kspace, eps))
        .collect::<Result<Vec<_>>>()?;
    let (mut tp, mut flagged, mut positives) = (0usize, 0usize, 0usize);
    for (m, c) in masks.iter().zip(&set.corrupted) {
        for (&pred, &truth) in m.flags().iter().zip(c.mask.flags()) {
            tp += usize::from(pred == 0 && truth == 0);
            flagged += usize::from(pred == 0);
            positives += usize::from(truth == 0);
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    Ok(OracleRow {
        severity: set.severity,
        eps,
        recall: ratio(tp, positives),
        precision: ratio(tp, flagged),
    })
}

/// Everything written to `report.json`. Contains no timings, so repeated
/// runs with one seed compare equal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub tool: String,
    pub seed: u64,
    pub eval_severity: usize,
    pub rows: Vec<QualityRow>,
    pub detection: Vec<DetectionRow>,
    pub oracle: OracleRow,
}

impl ExperimentReport {
    pub fn row(&self, v: Variant) -> Option<&QualityRow> {
        self.rows.iter().find(|r| r.method == v.name())
    }
}

/// Evaluates the requested variants of `config` on the test split at
/// `severity`. Learned variants take their model from `models`.
pub fn report_for(
    config: &TrainConfig,
    models: &[(Variant, Model)],
    subjects: &[Subject],
    severity: usize,
) -> Result<ExperimentReport> {
    let set = EvalSet::new(subjects, severity, config.seed)?;
    let mut rows = Vec::new();
    for &v in Variant::ALL.iter().filter(|v| config.needs(**v)) {
        let m = models.iter().find(|(x, _)| *x == v).map(|(_, m)| m);
        rows.push(evaluate(v, m, &set, config.threshold)?);
    }
    let mut detection = Vec::new();
    for (v, m) in models {
        if matches!(v, Variant::Separate | Variant::End2end) {
            detection.push(detection_row(v.name(), m, &set, config.threshold)?);
        }
    }
    Ok(ExperimentReport {
        tool: crate::io::TOOL_VERSION.into(),
        seed: config.seed,
        eval_severity: severity,
        rows,
        detection,
        oracle: oracle_row(&set, config.oracle_eps)?,
    })
}

pub struct Trained {
    pub report: ExperimentReport,
    pub history: History,
    pub models: Vec<(Variant, Model)>,
}

impl Trained {
    pub fn model(&self, v: Variant) -> Option<&Model> {
        self.models.iter().find(|(m, _)| *m == v).map(|(_, m)| m)
    }
}

/// Runs the schedule needed by `config.variants` and evaluates each one.
///
/// Detector and reconstruction network are first pretrained independently
/// (BCE against true masks; MSE with hard DC under true masks). The
/// pretrained pair is the separate variant. The known-mask variant keeps
/// training the reconstruction under true masks; the end-to-end variant
/// trains both jointly with soft DC driven by the predicted probabilities.
/// Both stop early on validation loss and keep their best checkpoint.
pub fn run_experiment(config: &TrainConfig, subjects: &[Subject]) -> Result<Trained> {
    config.validate()?;
    let mut trainer = Trainer::new(config, subjects)?;
    let wants_models = config.variants.iter().any(|&v| v != Variant::Baseline);
    let mut models: Vec<(Variant, Model)> = Vec::new();
    if wants_models {
        let mut m = Model::new(config.detect.clone(), config.recon.clone(), config.seed)?;
        let (dids, rids, all) = (m.detect_ids(), m.recon_ids(), m.all_ids());
        if config.needs(Variant::Separate) || config.needs(Variant::End2end) {
            trainer.run_phase(
                &mut m,
                &dids,
                Phase::Detect,
                DETECT_PRETRAIN,
                config.detect_pretrain_epochs,
                false,
            )?;
        }
        trainer.run_phase(
            &mut m,
            &rids,
            Phase::Recon,
            RECON_PRETRAIN,
            config.pretrain_epochs,
            false,
        )?;
        if config.needs(Variant::KnownMask) {
            let mut k = m.clone();
            trainer.run_phase(
                &mut k,
                &rids,
                Phase::Recon,
                KNOWN_MASK,
                config.max_epochs,
                true,
            )?;
            models.push((Variant::KnownMask, k));
        }
        if config.needs(Variant::End2end) {
            let mut e = m.clone();
            trainer.run_phase(&mut e, &all, Phase::Joint, JOINT, config.max_epochs, true)?;
            models.push((Variant::End2end, e));
        }
        if config.needs(Variant::Separate) {
            models.push((Variant::Separate, m));
        }
    }
    models.sort_by_key(|(v, _)| Variant::ALL.iter().position(|x| x == v));
    // Evaluate what a checkpoint holds.
    models.iter_mut().for_each(|(_, m)| m.quantize());
    let report = trainer
        .pool
        .install(|| report_for(config, &models, subjects, config.eval_severity))?;
    Ok(Trained {
        report,
        history: trainer.history,
        models,
    })
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'a str,
    kind: &'a str,
    seed: u64,
    config: &'a TrainConfig,
    files: Vec<String>,
}

/// [`run_experiment`] plus its artefacts in `dir`: `config.json`,
/// `history.jsonl`, `report.json`, `report.csv`, `report.txt`, one
/// checkpoint per trained variant under `checkpoints/`, and
/// `manifest.json` listing them.
pub fn run_experiment_in(
    config: &TrainConfig,
    subjects: &[Subject],
    dir: &Path,
) -> Result<Trained> {
    let trained = run_experiment(config, subjects)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = vec![
        "config.json".to_string(),
        "history.jsonl".into(),
        "report.json".into(),
        "report.csv".into(),
        "report.txt".into(),
    ];
    crate::io::write_json(&dir.join("config.json"), config)?;
    trained.history.write_jsonl(&dir.join("history.jsonl"))?;
    crate::io::write_json(&dir.join("report.json"), &trained.report)?;
    let write = |name: &str, text: String| {
        std::fs::write(dir.join(name), text).map_err(|e| Error::io(dir.join(name), e))
    };
    write(
        "report.csv",
        crate::metrics::report_csv(&trained.report.rows),
    )?;
    write(
        "report.txt",
        crate::metrics::report_text(&trained.report.rows),
    )?;
    let ck = dir.join("checkpoints");
    for (v, m) in &trained.models {
        m.save(&ck, v.name())?;
        files.push(format!("checkpoints/{}.ckt", v.name()));
        files.push(format!("checkpoints/{}.json", v.name()));
    }
    crate::io::write_json(
        &dir.join("manifest.json"),
        &RunManifest {
            tool: crate::io::TOOL_VERSION,
            kind: "experiment",
            seed: config.seed,
            config,
            files,
        },
    )?;
    Ok(trained)
}
