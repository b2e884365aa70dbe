use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Deserialize;

use csn_core::analyzer::{check_reference, model_report, sweep_stats, AnalyzerOptions, SweepAxis};
use csn_core::data::{gen_dataset, read_dataset, write_dataset, SampleSpec, SynthTaskSpec, VideoClip};
use csn_core::gradcheck::{check_blocks, check_layers, check_tiny_model, GradCheck};
use csn_core::train::{self as trainer, evaluate, train_with, TrainConfig};
use csn_core::zoo::{checkpoint, ArchSpec, Model};
use csn_core::{viz, Shape5};

use crate::{AnalyzeArgs, EvalArgs, Format, GenDataArgs, GradcheckArgs, Scope, SweepArgs, TrainArgs, TrainFlags, VizArgs};

pub enum Status {
    Ok,
    CheckFailed,
}

/// Contents of a `--config` file; every section and field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct Config {
    train: TrainConfig,
    sample: SampleSpec,
    task: SynthTaskSpec,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let Some(path) = path else { return Ok(Config::default()) };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

impl TrainFlags {
    fn resolve(&self) -> Result<Config> {
        let mut c = load_config(self.config.as_deref())?;
        let t = &mut c.train;
        t.seed = self.seed.unwrap_or(t.seed);
        t.base_lr = self.lr.unwrap_or(t.base_lr);
        t.total_epochs = self.epochs.unwrap_or(t.total_epochs);
        t.warmup_epochs = self.warmup_epochs.unwrap_or(t.warmup_epochs);
        t.iters_per_epoch = self.iters_per_epoch.unwrap_or(t.iters_per_epoch);
        t.batch_size = self.batch_size.unwrap_or(t.batch_size);
        t.eval_clips = self.eval_clips.unwrap_or(t.eval_clips);
        Ok(c)
    }
}

/// `TxHxW`, `CxTxHxW` or `NxCxTxHxW`; missing leading dims are 1 clip of
/// 3 channels.
pub fn parse_input(s: &str) -> Result<Shape5> {
    let dims: Vec<usize> = s
        .split(['x', 'X', ','])
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("input shape `{s}` is not a list of integers like 8x224x224"))?;
    let full = match dims.as_slice() {
        [t, h, w] => [1, 3, *t, *h, *w],
        [c, t, h, w] => [1, *c, *t, *h, *w],
        [n, c, t, h, w] => [*n, *c, *t, *h, *w],
        _ => bail!("input shape `{s}` needs 3, 4 or 5 dimensions"),
    };
    Ok(Shape5::from_dims(full)?)
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => Ok(std::io::stdout().write_all(bytes)?),
    }
}

fn status(passed: bool) -> Status {
    if passed {
        Status::Ok
    } else {
        Status::CheckFailed
    }
}

pub fn analyze(a: AnalyzeArgs) -> Result<Status> {
    let opts = AnalyzerOptions {
        voxels: a.voxels.parse()?,
        include_bn: a.include_bn,
    };
    let input = parse_input(&a.input)?;
    let arch = ArchSpec::named(&a.arch, a.classes)?;
    let report = model_report(&arch, &input, &opts)?;
    let bytes = match a.format {
        Format::Json => report.to_json()?.into_bytes(),
        Format::Csv => {
            let mut buf = Vec::new();
            report.write_csv(&mut buf)?;
            buf
        }
    };
    emit(a.out.as_deref(), &bytes)?;
    if a.check.is_none() {
        return Ok(Status::Ok);
    }
    let rows = check_reference(&opts)?;
    for r in &rows {
        eprintln!(
            "{} {:<44} expected {:>9.4} actual {:>9.4} rel {:.4} (tol {})",
            if r.passed { "PASS" } else { "FAIL" },
            r.what,
            r.expected,
            r.actual,
            r.rel_err,
            r.tolerance
        );
    }
    Ok(status(rows.iter().all(|r| r.passed)))
}

fn print_checks(checks: &[GradCheck]) -> bool {
    println!("{:<28} {:>8} {:>12} {:>10}", "check", "entries", "max_rel_err", "tolerance");
    for c in checks {
        println!(
            "{:<28} {:>8} {:>12.3e} {:>10.0e} {}",
            c.name,
            c.entries,
            c.max_rel_err,
            c.tolerance,
            if c.passed() { "PASS" } else { "FAIL" }
        );
    }
    checks.iter().all(GradCheck::passed)
}

pub fn gradcheck(a: GradcheckArgs) -> Result<Status> {
    let checks = match a.scope {
        Scope::Layers => check_layers(a.seed)?,
        Scope::Blocks => check_blocks(a.seed)?,
        Scope::TinyModel => vec![check_tiny_model(a.seed)?],
    };
    Ok(status(print_checks(&checks)))
}

fn load_videos(dir: &Path) -> Result<(usize, Vec<VideoClip>)> {
    let (manifest, videos) = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    Ok((manifest.task.num_classes, videos))
}

pub fn train(a: TrainArgs) -> Result<Status> {
    let mut config = a.flags.resolve()?;
    let (classes, videos) = load_videos(&a.data)?;
    let held = a.held_out.as_deref().map(load_videos).transpose()?;
    if let Some((held_classes, _)) = &held {
        if *held_classes != classes {
            bail!("training set has {classes} classes, held-out set {held_classes}");
        }
    }
    let cfg = &mut config.train;
    cfg.eval_every = a.eval_every;
    cfg.checkpoint_every = a.checkpoint_every;
    if a.checkpoint_every > 0 {
        cfg.checkpoint_dir = Some(a.out.join("checkpoints"));
    }
    let arch = ArchSpec::named(&a.arch, classes)?;
    let mut model = Model::<f32>::new(&arch, cfg.seed)?;
    fs::create_dir_all(&a.out)?;
    let history = train_with(&mut model, &videos, held.as_ref().map(|h| h.1.as_slice()), &config.sample, cfg, |r| {
        if r.iter % 50 == 0 {
            eprintln!("iter {:>5}  lr {:.5}  loss {:.4}  err {:.3}", r.iter, r.lr, r.loss, r.train_err);
        }
    })?;
    history.write_csv(fs::File::create(a.out.join("history.csv"))?)?;
    fs::write(a.out.join("history.json"), history.to_json()?)?;
    checkpoint::save(&model, a.out.join("final.csnw"))?;
    if let Some(e) = history.final_eval() {
        println!("{}", serde_json::to_string(e)?);
    }
    Ok(Status::Ok)
}

pub fn eval(a: EvalArgs) -> Result<Status> {
    let config = load_config(a.config.as_deref())?;
    let (classes, videos) = load_videos(&a.data)?;
    let arch = ArchSpec::named(&a.arch, classes)?;
    let mut model = Model::<f32>::zeroed(&arch)?;
    checkpoint::load_into(&mut model, &a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let clips = a.clips.unwrap_or(config.train.eval_clips);
    let (clip_at1, video_at1) = evaluate(&model, &videos, &config.sample, clips)?;
    println!(
        "{}",
        serde_json::json!({ "videos": videos.len(), "clips_per_video": clips, "clip_at1": clip_at1, "video_at1": video_at1 })
    );
    Ok(Status::Ok)
}

pub fn sweep(a: SweepArgs) -> Result<Status> {
    let axes = a.axis.iter().map(|s| s.parse()).collect::<csn_core::Result<Vec<SweepAxis>>>()?;
    let input = parse_input(&a.input)?;
    let mut base = ArchSpec::named(&a.arch, a.classes)?;
    let data = if a.train {
        let (classes, videos) = load_videos(a.data.as_deref().expect("clap requires --data"))?;
        let (_, held) = load_videos(a.held_out.as_deref().expect("clap requires --held-out"))?;
        // the classifier follows the dataset when variants are trained
        base.num_classes = classes;
        Some((videos, held, a.flags.resolve()?))
    } else {
        None
    };
    let mut table = sweep_stats(&base, &axes, &input, &AnalyzerOptions::default())?;
    for s in &table.skipped {
        eprintln!("skipped: {s}");
    }
    if let Some((videos, held, config)) = &data {
        for row in &mut table.rows {
            let arch = base.with_block(row.block);
            let mut model = Model::<f32>::new(&arch, config.train.seed)?;
            let history = trainer::train(&mut model, videos, Some(held), &config.sample, &config.train)
                .with_context(|| format!("training {}", arch.name))?;
            row.accuracy = history.final_eval().map(|e| e.video_at1);
            eprintln!("{:<24} video@1 {:.3}", row.variant, row.accuracy.unwrap_or(f64::NAN));
        }
    }
    table.write_csv(fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?)?;
    Ok(Status::Ok)
}

pub fn viz_filters(a: VizArgs) -> Result<Status> {
    let records = checkpoint::read_file(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    let (name, image) = viz::render_layer(&records, &a.layer, a.scale)?;
    fs::create_dir_all(&a.out)?;
    let path = a.out.join(format!("{name}.{}", image.extension()));
    fs::write(&path, image.to_netpbm())?;
    println!("{}", path.display());
    Ok(Status::Ok)
}

pub fn gen_data(a: GenDataArgs) -> Result<Status> {
    let mut task = load_config(a.config.as_deref())?.task;
    task.num_classes = a.classes.unwrap_or(task.num_classes);
    task.clips_per_class = a.per_class.unwrap_or(task.clips_per_class);
    task.seed = a.seed.unwrap_or(task.seed);
    let clips = gen_dataset(&task)?;
    write_dataset(&a.out, &task, &clips)?;
    println!("{} clips of {} classes in {}", clips.len(), task.num_classes, a.out.display());
    Ok(Status::Ok)
}
