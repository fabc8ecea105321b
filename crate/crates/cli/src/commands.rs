use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use cinefix::corrupt::{corrupt_sequence, sample_plan, CorruptionPlan};
use cinefix::detect::threshold_mask;
use cinefix::fourier::{from_kspace, to_kspace};
use cinefix::gradcheck::{self, FD_TOLERANCE};
use cinefix::io::{read_json, write_json, CktData, CktTensor, TOOL_VERSION};
use cinefix::metrics::{dump_panels, psnr, report_csv, report_text};
use cinefix::phantom::{
    build_dataset, generate_subjects, load_dataset, subject_file, DatasetSpec, PhantomRanges,
    Subject,
};
use cinefix::recon::{recon_forward, DcMode, DcWeights};
use cinefix::rng::{self, tag};
use cinefix::train::{
    report_for, run_experiment_in, EvalSet, ExperimentReport, Model, TrainConfig, Variant,
};
use cinefix::KSpaceSequence;

use crate::{
    Cli, Command, CorruptArgs, DcArg, EvalArgs, Format, GradcheckArgs, PhantomArgs, Preset,
    ReconArgs, ReportArgs, TrainArgs, UsageError,
};

const MANIFEST: &str = "manifest.json";

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(UsageError(msg.into()).into())
}

pub fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers.map(usize::from);
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    match cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Corrupt(a) => corrupt(a),
        Command::Train(a) => train(a, workers),
        Command::Eval(a) => eval(a, workers),
        Command::Recon(a) => recon(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Report(a) => report(a),
    }
}

fn split_counts(subjects: Option<usize>, split: Option<Vec<usize>>) -> Result<Option<[usize; 3]>> {
    match (subjects, split) {
        (None, None) => Ok(None),
        (n, Some(s)) => {
            if s.len() != 3 {
                return usage("--split takes three counts: train,val,test");
            }
            let total: usize = s.iter().sum();
            if let Some(n) = n.filter(|&n| n != total) {
                return usage(format!(
                    "--subjects {n} does not match --split total {total}"
                ));
            }
            Ok(Some([s[0], s[1], s[2]]))
        }
        (Some(n), None) => {
            if n < 3 {
                return usage("--subjects must be at least 3");
            }
            let held = (n / 6).max(1);
            Ok(Some([n - 2 * held, held, held]))
        }
    }
}

fn phantom(a: PhantomArgs) -> Result<()> {
    let mut spec = match a.preset {
        Preset::Desk => DatasetSpec::desk(a.seed),
        Preset::Full => DatasetSpec::full(a.seed),
    };
    if let Some([train, val, test]) = split_counts(a.subjects, a.split)? {
        (spec.train, spec.val, spec.test) = (train, val, test);
    }
    if let Some(f) = a.frames {
        spec.frames = f;
    }
    if let Some(s) = a.size {
        spec.height = s;
        spec.width = s;
        spec.ranges = PhantomRanges::for_size(s);
    }
    spec.canvas = a.canvas;
    if let Err(e) = spec.validate() {
        return usage(e.to_string());
    }
    let manifest = build_dataset(&spec, &a.out)
        .with_context(|| format!("building dataset in {}", a.out.display()))?;
    println!(
        "wrote {} subjects ({}/{}/{}) of {}x{}x{} to {}",
        manifest.subjects.len(),
        spec.train,
        spec.val,
        spec.test,
        spec.frames,
        spec.height,
        spec.width,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct CorruptEntry {
    id: u64,
    kspace: String,
    image: String,
    mask: String,
    plan: CorruptionPlan,
}

#[derive(Serialize, Deserialize)]
struct CorruptManifest {
    tool: String,
    kind: String,
    source: PathBuf,
    n_lines: usize,
    seed: u64,
    subjects: Vec<CorruptEntry>,
}

fn corrupt(a: CorruptArgs) -> Result<()> {
    let (manifest, subjects) =
        load_dataset(&a.input).with_context(|| format!("loading dataset {}", a.input.display()))?;
    if a.lines > manifest.spec.height {
        return usage(format!(
            "--lines {} exceeds the {} lines per frame",
            a.lines, manifest.spec.height
        ));
    }
    let out = a
        .out
        .unwrap_or_else(|| a.input.join(format!("corrupted_n{}", a.lines)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut entries = Vec::with_capacity(subjects.len());
    for s in &subjects {
        let (t, h, _) = s.clean.dims();
        let mut r = rng::stream(a.seed, &[tag::CORRUPT, s.id]);
        let plan = sample_plan(t, h, a.lines, None, &mut r)?;
        let c = corrupt_sequence(&s.clean, &plan)?;
        let stem = subject_file(s.id);
        let stem = stem.trim_end_matches(".ckt");
        let names = [
            format!("{stem}_kspace.ckt"),
            format!("{stem}_image.ckt"),
            format!("{stem}_mask.ckt"),
        ];
        CktTensor::from(&c.kspace).write(&out.join(&names[0]))?;
        CktTensor::from(&c.image).write(&out.join(&names[1]))?;
        CktTensor::from(&c.mask).write(&out.join(&names[2]))?;
        let [kspace, image, mask] = names;
        entries.push(CorruptEntry {
            id: s.id,
            kspace,
            image,
            mask,
            plan,
        });
    }
    write_json(
        &out.join(MANIFEST),
        &CorruptManifest {
            tool: TOOL_VERSION.into(),
            kind: "corrupted_dataset".into(),
            source: a.input.clone(),
            n_lines: a.lines,
            seed: a.seed,
            subjects: entries,
        },
    )?;
    println!(
        "corrupted {} subjects with {} lines per frame into {}",
        subjects.len(),
        a.lines,
        out.display()
    );
    Ok(())
}

/// Subjects from a dataset directory, or regenerated from the configuration.
fn subjects_for(config: &mut TrainConfig, data: Option<&Path>) -> Result<Vec<Subject>> {
    match data {
        Some(dir) => {
            let (manifest, subjects) =
                load_dataset(dir).with_context(|| format!("loading dataset {}", dir.display()))?;
            config.data = manifest.spec;
            Ok(subjects)
        }
        None => Ok(generate_subjects(&config.data)?),
    }
}

fn train(a: TrainArgs, workers: Option<usize>) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)
            .with_context(|| format!("reading config {}", p.display()))?,
        None => match a.preset {
            Preset::Desk => TrainConfig::desk(a.seed.unwrap_or(0)),
            Preset::Full => TrainConfig::full(a.seed.unwrap_or(0)),
        },
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(n) = workers {
        config.workers = n;
    }
    if let Some(vs) = &a.variants {
        config.variants = vs
            .iter()
            .map(|v| Variant::parse(v))
            .collect::<cinefix::Result<_>>()
            .map_err(|e| UsageError(e.to_string()))?;
    }
    let subjects = subjects_for(&mut config, a.data.as_deref())?;
    let trained = run_experiment_in(&config, &subjects, &a.out)?;
    print!("{}", render(&trained.report, Format::Text));
    println!("artefacts in {}", a.out.display());
    Ok(())
}

fn checkpoint_dir(dir: &Path) -> PathBuf {
    let nested = dir.join("checkpoints");
    if nested.is_dir() {
        nested
    } else {
        dir.to_path_buf()
    }
}

#[derive(Serialize)]
struct EvalManifest<'a> {
    tool: &'a str,
    kind: &'a str,
    run: &'a Path,
    data: Option<&'a Path>,
    severity: usize,
    seed: u64,
    files: Vec<String>,
}

fn eval(a: EvalArgs, workers: Option<usize>) -> Result<()> {
    let mut config: TrainConfig = read_json(&a.run.join("config.json"))
        .with_context(|| format!("reading run {}", a.run.display()))?;
    if let Some(n) = workers {
        config.workers = n;
    }
    let severity = a.severity.unwrap_or(config.eval_severity);
    if severity > config.data.height {
        return usage(format!(
            "--severity {severity} exceeds {} lines",
            config.data.height
        ));
    }
    let subjects = subjects_for(&mut config, a.data.as_deref())?;
    let ck = checkpoint_dir(&a.run);
    let mut models = Vec::new();
    for &v in config.variants.iter().filter(|&&v| v != Variant::Baseline) {
        let m = Model::load(&ck, v.name())
            .with_context(|| format!("missing checkpoint for {}", v.name()))?;
        models.push((v, m));
    }
    let report = report_for(&config, &models, &subjects, severity)?;
    let out = a
        .out
        .unwrap_or_else(|| a.run.join(format!("eval_n{severity}")));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    write_json(&out.join("report.json"), &report)?;
    fs::write(out.join("report.csv"), report_csv(&report.rows))?;
    fs::write(out.join("report.txt"), render(&report, Format::Text))?;
    if let Some(dump) = &a.dump {
        dump_eval_panels(dump, &config, &models, &subjects, severity)?;
    }
    write_json(
        &out.join(MANIFEST),
        &EvalManifest {
            tool: TOOL_VERSION,
            kind: "evaluation",
            run: &a.run,
            data: a.data.as_deref(),
            severity,
            seed: config.seed,
            files: vec![
                "report.json".into(),
                "report.csv".into(),
                "report.txt".into(),
            ],
        },
    )?;
    print!("{}", render(&report, Format::Text));
    Ok(())
}

fn dump_eval_panels(
    dir: &Path,
    config: &TrainConfig,
    models: &[(Variant, Model)],
    subjects: &[Subject],
    severity: usize,
) -> Result<()> {
    let set = EvalSet::new(subjects, severity, config.seed)?;
    for i in 0..set.len() {
        let (clean, c) = (&set.clean[i], &set.corrupted[i]);
        let frame = clean.dims().0 / 2;
        let id = set.ids[i];
        dump_panels(
            dir,
            &format!("subject_{id:04}_baseline"),
            frame,
            clean,
            &c.image,
            &c.image,
        )?;
        for (v, m) in models {
            let out = match v {
                Variant::KnownMask => m.reconstruct(&c.kspace, &c.mask)?,
                _ => m.correct(&c.kspace, config.threshold)?.0,
            };
            dump_panels(
                dir,
                &format!("subject_{id:04}_{}", v.name()),
                frame,
                clean,
                &c.image,
                &out,
            )?;
        }
    }
    Ok(())
}

fn read_kspace(path: &Path) -> Result<KSpaceSequence> {
    let t = CktTensor::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(match t.data {
        CktData::Complex(_) => t.to_kspace()?,
        CktData::Real(_) => to_kspace(&t.to_cine()?)?,
        CktData::Mask(_) => bail!(
            "{} holds a mask, expected k-space or an image",
            path.display()
        ),
    })
}

#[derive(Serialize)]
struct ReconManifest<'a> {
    tool: &'a str,
    kind: &'a str,
    model: &'a Path,
    variant: &'a str,
    input: &'a Path,
    dc: &'a str,
    threshold: f64,
    #[serde(with = "inf_opt")]
    psnr: Option<f64>,
    files: [&'a str; 3],
}

/// PSNR may be infinite, which JSON numbers cannot hold.
mod inf_opt {
    pub fn serialize<S: serde::Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_none(),
        }
    }
}

fn recon(a: ReconArgs) -> Result<()> {
    if !(a.threshold > 0.0 && a.threshold < 1.0) {
        return usage(format!("--threshold {} outside (0, 1)", a.threshold));
    }
    let model_dir = checkpoint_dir(&a.model);
    let model = Model::load(&model_dir, &a.variant).with_context(|| {
        format!(
            "loading checkpoint {} from {}",
            a.variant,
            model_dir.display()
        )
    })?;
    let ks = read_kspace(&a.input)?;
    let prob = model.predict_lines(&ks)?;
    let mask = threshold_mask(&prob, a.threshold)?;
    let image = match a.dc {
        DcArg::Hard => model.reconstruct(&ks, &mask)?,
        DcArg::Soft => recon_forward(
            &model.recon,
            &model.params,
            &ks,
            &DcWeights::Prob(&prob),
            DcMode::Soft {
                lambda: model.recon.config.dc_lambda,
            },
        )?,
    };
    let out = match a.out {
        Some(o) => o,
        None => a.input.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let files = ["corrected.ckt", "mask.ckt", "prob.ckt"];
    CktTensor::from(&image).write(&out.join(files[0]))?;
    CktTensor::from(&mask).write(&out.join(files[1]))?;
    CktTensor::from(&prob.to_tensor()).write(&out.join(files[2]))?;
    let truth = match &a.truth {
        Some(p) => Some(
            CktTensor::read(p)
                .with_context(|| format!("reading {}", p.display()))?
                .to_cine()?,
        ),
        None => None,
    };
    let value = truth.as_ref().map(|t| psnr(&image, t, 1.0)).transpose()?;
    write_json(
        &out.join("recon_manifest.json"),
        &ReconManifest {
            tool: TOOL_VERSION,
            kind: "reconstruction",
            model: &model_dir,
            variant: &a.variant,
            input: &a.input,
            dc: match a.dc {
                DcArg::Hard => "hard",
                DcArg::Soft => "soft",
            },
            threshold: a.threshold,
            psnr: value,
            files,
        },
    )?;
    let flagged = mask.flags().iter().filter(|&&f| f == 0).count();
    println!(
        "flagged {flagged} of {} lines; wrote {}",
        mask.flags().len(),
        out.display()
    );
    if let (Some(p), Some(t)) = (value, &truth) {
        println!(
            "psnr {p:.2} dB (input {:.2} dB)",
            psnr(&from_kspace(&ks), t, 1.0)?
        );
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let checks = gradcheck::run_all(a.seed)?;
    let mut failed = 0;
    for c in &checks {
        let ok = c.passed(FD_TOLERANCE);
        failed += usize::from(!ok);
        println!(
            "{} {:<40} rel {:.2e} abs {:.2e} entries {} fallbacks {} kinks {}",
            if ok { "PASS" } else { "FAIL" },
            c.name,
            c.rel_error,
            c.max_abs_error,
            c.entries,
            c.fallbacks,
            c.kinks
        );
    }
    if failed > 0 {
        bail!("{failed} of {} gradient checks failed", checks.len());
    }
    println!("all {} gradient checks passed", checks.len());
    Ok(())
}

fn render(r: &ExperimentReport, format: Format) -> String {
    match format {
        Format::Csv => report_csv(&r.rows),
        Format::Text => {
            let mut s = format!("seed {} severity {}\n", r.seed, r.eval_severity);
            s.push_str(&report_text(&r.rows));
            for d in &r.detection {
                writeln!(
                    s,
                    "detection {:<10} auroc {:.4} accuracy {:.4}",
                    d.method, d.auroc, d.accuracy
                )
                .unwrap();
            }
            let o = &r.oracle;
            writeln!(
                s,
                "oracle eps {:e} recall {:.4} precision {:.4}",
                o.eps, o.recall, o.precision
            )
            .unwrap();
            s
        }
    }
}

fn report(a: ReportArgs) -> Result<()> {
    let path = if a.input.is_dir() {
        a.input.join("report.json")
    } else {
        a.input.clone()
    };
    let r: ExperimentReport =
        read_json(&path).with_context(|| format!("reading {}", path.display()))?;
    let text = render(&r, a.format);
    print!("{text}");
    if let Some(out) = &a.out {
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}
