use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::Context;
use fewframe_core::dataio::{generate_dataset, read_records, split, write_records, Format, VideoRecord};
use fewframe_core::encoders::EncoderConfig;
use fewframe_core::losses::{PredDistance, RepMode};
use fewframe_core::metrics::{evaluate as eval_metrics, MetricsReport};
use fewframe_core::profiler::{count_flops, time_inference, FlopsReport};
use fewframe_core::sampling::{clip, SamplerKind, SamplerSpec};
use fewframe_core::training::{self, DistillConfig, ModelBundle, Role};
use serde::Serialize;

use crate::config::{load, ExperimentConfig, Inputs, Manifest};
use crate::{BaselineArgs, Common, DistillArgs, DumpArgs, EvaluateArgs, Failure, ProfileArgs, StudentArgs};

/// Feature width and class count used when `profile` has nothing else to go on.
const DESK_DIM: usize = 16;
const DESK_CLASSES: usize = 8;

/// One command's writes, all under `config.output.dir`.
struct Run {
    command: &'static str,
    config: ExperimentConfig,
    inputs: Inputs,
    outputs: Vec<String>,
}

impl Run {
    fn new(command: &'static str, config: ExperimentConfig, inputs: Inputs) -> Result<Self, Failure> {
        config.validate()?;
        fs::create_dir_all(&config.output.dir)
            .with_context(|| format!("creating {}", config.output.dir.display()))
            .map_err(Failure::runtime)?;
        Ok(Self { command, config, inputs, outputs: Vec::new() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.config.output.dir.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), Failure> {
        let path = self.path(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display())).map_err(Failure::runtime)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(value).map_err(Failure::runtime)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn write_bundle(&mut self, stem: &str, bundle: &ModelBundle) -> Result<(), Failure> {
        let mut buf = Vec::new();
        bundle.save(&mut buf)?;
        self.write(&format!("{stem}.fdm"), &buf)
    }

    fn write_history(&mut self, stem: &str, bundles: &[&ModelBundle]) -> Result<(), Failure> {
        // interleave by epoch so parallel runs read as one curve file
        let epochs = bundles.iter().map(|b| b.history.len()).max().unwrap_or(0);
        let mut out = String::new();
        for e in 0..epochs {
            for b in bundles {
                if let Some(r) = b.history.get(e) {
                    out += &serde_json::to_string(r).map_err(Failure::runtime)?;
                    out.push('\n');
                }
            }
        }
        self.write(&format!("{stem}.history.ndjson"), out.as_bytes())
    }

    fn finish(self, stem: &str) -> Result<(), Failure> {
        let name = Manifest::file_name(stem);
        let manifest = Manifest {
            command: self.command.to_string(),
            config: self.config,
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest).map_err(Failure::runtime)?;
        text.push('\n');
        let path = manifest.config.output.dir.join(&name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display())).map_err(Failure::runtime)?;
        eprintln!("wrote {}", path.display());
        Ok(())
    }
}

/// Config with `--seed` / `--out` applied.
fn resolve(common: &Common, command: &str) -> Result<(ExperimentConfig, Inputs), Failure> {
    let loaded = load(&common.config, command)?;
    let mut config = loaded.config;
    if let Some(seed) = common.seed {
        config.train.seed = seed;
        if command == "gen-data" {
            if let Some(data) = &mut config.data {
                data.seed = seed;
                if let Some(gen) = &mut data.gen {
                    gen.seed = seed;
                }
            }
        }
    }
    if let Some(out) = &common.out {
        config.output.dir = out.clone();
    }
    Ok((config, loaded.inputs))
}

fn optional_config(
    path: Option<&Path>,
    out: Option<&PathBuf>,
    command: &str,
) -> Result<(Option<ExperimentConfig>, Inputs), Failure> {
    let (mut config, inputs) = match path {
        Some(p) => {
            let l = load(p, command)?;
            (Some(l.config), l.inputs)
        }
        None => (None, Inputs::default()),
    };
    if let Some(out) = out {
        match &mut config {
            Some(c) => c.output.dir = out.clone(),
            None => config = Some(ExperimentConfig::output_only(out.clone())),
        }
    }
    Ok((config, inputs))
}

fn read_data(path: &Path) -> Result<Vec<VideoRecord>, Failure> {
    let records = read_records(path, Format::from_path(path))
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::runtime)?;
    if records.is_empty() {
        return Err(Failure::runtime(anyhow::anyhow!("{} holds no videos", path.display())));
    }
    Ok(records)
}

fn read_split(config: &ExperimentConfig, name: &str) -> Result<Vec<VideoRecord>, Failure> {
    let path = config.split_path(name);
    if !path.exists() {
        return Err(Failure::runtime(anyhow::anyhow!("{} not found; run gen-data first", path.display())));
    }
    read_data(&path)
}

fn read_bundle(path: &Path) -> Result<ModelBundle, Failure> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display())).map_err(Failure::runtime)?;
    ModelBundle::load(BufReader::new(file))
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::runtime)
}

fn stem_of(path: &Path) -> String {
    path.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned())
}

fn report(bundle: &ModelBundle, data: &[VideoRecord]) -> Result<MetricsReport, Failure> {
    eval_metrics(&bundle.model, data, bundle.sampler.as_ref()).map_err(Failure::runtime)
}

fn log_history(name: &str, bundle: &ModelBundle) {
    for r in &bundle.history {
        eprintln!("{name} epoch {} loss {:.6} val GAP {:.4}", r.epoch, r.loss, r.val_gap);
    }
    if let Some(best) = bundle.best() {
        eprintln!("{name} kept epoch {} (val GAP {:.4})", best.epoch, best.val_gap);
    }
}

pub(crate) fn gen_data(args: Common) -> Result<(), Failure> {
    let (config, inputs) = resolve(&args, "gen-data")?;
    let mut run = Run::new("gen-data", config, inputs)?;
    let data = run.config.data()?.clone();
    let records = match (&data.gen, &data.path) {
        (Some(gen), _) => generate_dataset(gen).map_err(Failure::config)?,
        (None, Some(path)) => read_data(path)?,
        (None, None) => unreachable!("validated"),
    };
    let total = records.len();
    let (train, val, test) = split(records, data.split, data.seed).map_err(Failure::config)?;
    for (name, part) in [("train", &train), ("val", &val), ("test", &test)] {
        let path = run.config.split_path(name);
        write_records(part, &path, data.format)
            .with_context(|| format!("writing {}", path.display()))
            .map_err(Failure::runtime)?;
        run.outputs.push(path.file_name().unwrap().to_string_lossy().into_owned());
    }
    eprintln!("{total} videos -> train {} / val {} / test {}", train.len(), val.len(), test.len());
    run.finish("gen-data")
}

pub(crate) fn train_teacher(args: Common) -> Result<(), Failure> {
    let (config, inputs) = resolve(&args, "train-teacher")?;
    let mut run = Run::new("train-teacher", config, inputs)?;
    let (train, val) = (read_split(&run.config, "train")?, read_split(&run.config, "val")?);
    let bundle = training::train_teacher(&train, &val, run.config.encoder()?, &run.config.train)?;
    log_history("teacher", &bundle);
    run.write_bundle("teacher", &bundle)?;
    run.write_history("teacher", &[&bundle])?;
    run.write_json("teacher.metrics.json", &report(&bundle, &val)?)?;
    run.finish("teacher")
}

pub(crate) fn train_baseline(args: BaselineArgs) -> Result<(), Failure> {
    let (config, recorded) = resolve(&args.common, "train-baseline")?;
    let inputs = Inputs { sampler: args.sampler, k: args.k, ..Inputs::default() }.or(recorded);
    let distill = config.distill.as_ref();
    let kind = inputs.sampler.or(distill.map(|d| d.sampler)).unwrap_or(SamplerKind::Uniform);
    let k = inputs.k.or(distill.map(|d| d.k)).ok_or_else(|| Failure::config_msg("train-baseline needs --k"))?;
    let inputs = Inputs { sampler: Some(kind), k: Some(k), ..inputs };
    let mut run = Run::new("train-baseline", config, inputs)?;
    let sampler = SamplerSpec { kind, k, seed: run.config.train.seed };
    sampler.validate().map_err(Failure::config_msg)?;
    let (train, val) = (read_split(&run.config, "train")?, read_split(&run.config, "val")?);
    let bundle = training::train_baseline(&train, &val, run.config.encoder()?, &run.config.train, &sampler)?;
    let stem = format!("baseline-{}-k{k}", kind.name());
    log_history(&stem, &bundle);
    run.write_bundle(&stem, &bundle)?;
    run.write_history(&stem, &[&bundle])?;
    run.write_json(&format!("{stem}.metrics.json"), &report(&bundle, &val)?)?;
    run.finish(&stem)
}

/// Distillation section with `--combo`, `--k` and `--sampler` applied.
fn resolve_distill(args: &DistillArgs, config: &mut ExperimentConfig) -> Result<DistillConfig, Failure> {
    let mut distill = match (config.distill.take(), args.combo) {
        (Some(d), _) => d,
        (None, Some(combo)) => DistillConfig::new(combo, 5),
        (None, None) => return Err(Failure::config_msg("no distill section in the config and no --combo")),
    };
    if let Some(combo) = args.combo {
        distill.combo = combo;
    }
    if let Some(k) = args.k {
        distill.k = k;
    }
    if let Some(s) = args.sampler {
        distill.sampler = s;
    }
    config.distill = Some(distill.clone());
    Ok(distill)
}

fn distill_tag(d: &DistillConfig) -> String {
    let mut tag = format!("{}-k{}", d.combo.name(), d.k);
    if d.sampler != SamplerKind::Uniform {
        tag += &format!("-{}", d.sampler.name());
    }
    if d.rep_mode == RepMode::Intermediate {
        tag += "-intermediate";
    }
    if d.pred_distance == PredDistance::Kl {
        tag += "-kl";
    }
    tag
}

pub(crate) fn train_student(args: StudentArgs) -> Result<(), Failure> {
    let (mut config, recorded) = resolve(&args.distill.common, "train-student")?;
    let distill = resolve_distill(&args.distill, &mut config)?;
    let mut inputs = Inputs { teacher: args.teacher, ..Inputs::default() }.or(recorded);
    let teacher_path = inputs.teacher.clone().unwrap_or_else(|| config.output.dir.join("teacher.fdm"));
    inputs.teacher = Some(teacher_path.clone());
    let mut run = Run::new("train-student", config, inputs)?;
    let teacher = read_bundle(&teacher_path)?;
    let (train, val) = (read_split(&run.config, "train")?, read_split(&run.config, "val")?);
    let bundle = training::train_student_serial(&teacher, &train, &val, &distill, &run.config.train)?;
    let stem = format!("student-{}", distill_tag(&distill));
    log_history(&stem, &bundle);
    run.write_bundle(&stem, &bundle)?;
    run.write_history(&stem, &[&bundle])?;
    run.write_json(&format!("{stem}.metrics.json"), &report(&bundle, &val)?)?;
    run.finish(&stem)
}

#[derive(Serialize)]
struct PairReport {
    teacher: MetricsReport,
    student: MetricsReport,
}

pub(crate) fn train_parallel(args: DistillArgs) -> Result<(), Failure> {
    let (mut config, inputs) = resolve(&args.common, "train-parallel")?;
    let distill = resolve_distill(&args, &mut config)?;
    let mut run = Run::new("train-parallel", config, inputs)?;
    let (train, val) = (read_split(&run.config, "train")?, read_split(&run.config, "val")?);
    let (teacher, student) =
        training::train_parallel(&train, &val, run.config.encoder()?, &distill, &run.config.train)?;
    let stem = format!("parallel-{}", distill_tag(&distill));
    log_history(&format!("{stem} teacher"), &teacher);
    log_history(&format!("{stem} student"), &student);
    run.write_bundle(&format!("{stem}-teacher"), &teacher)?;
    run.write_bundle(&format!("{stem}-student"), &student)?;
    run.write_history(&stem, &[&teacher, &student])?;
    let pair = PairReport { teacher: report(&teacher, &val)?, student: report(&student, &val)? };
    run.write_json(&format!("{stem}.metrics.json"), &pair)?;
    run.finish(&stem)
}

pub(crate) fn evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let (config, recorded) = optional_config(args.config.as_deref(), args.out.as_ref(), "evaluate")?;
    let mut inputs = Inputs { model: args.model, data: args.data, ..Inputs::default() }.or(recorded);
    let model_path = inputs.model.clone().ok_or_else(|| Failure::config_msg("evaluate needs --model"))?;
    let data_path = match (&inputs.data, &config) {
        (Some(p), _) => p.clone(),
        (None, Some(c)) => c.split_path("test"),
        (None, None) => return Err(Failure::config_msg("evaluate needs --data")),
    };
    inputs.data = Some(data_path.clone());
    let bundle = read_bundle(&model_path)?;
    let data = read_data(&data_path)?;
    let metrics = report(&bundle, &data)?;
    println!("{}", serde_json::to_string_pretty(&metrics).map_err(Failure::runtime)?);
    if let Some(config) = config {
        let stem = format!("{}.{}", stem_of(&model_path), stem_of(&data_path));
        let mut run = Run::new("evaluate", config, inputs)?;
        run.write_json(&format!("{stem}.metrics.json"), &metrics)?;
        run.finish(&stem)?;
    }
    Ok(())
}

fn desk_encoder(name: &str) -> Result<EncoderConfig, Failure> {
    match name {
        "hrnn" => Ok(EncoderConfig::hrnn(DESK_DIM, DESK_CLASSES)),
        "netvlad" => Ok(EncoderConfig::netvlad(DESK_DIM, DESK_CLASSES)),
        "nextvlad" => Ok(EncoderConfig::nextvlad(DESK_DIM, DESK_CLASSES)),
        other => Err(Failure::config_msg(format!("unknown encoder {other:?}; expected hrnn, netvlad or nextvlad"))),
    }
}

#[derive(Serialize)]
struct ProfileReport {
    encoder: EncoderConfig,
    reports: Vec<FlopsReport>,
    /// Each report's total over the first report's total.
    ratio_to_first: Vec<f64>,
}

fn flops_table(reports: &[FlopsReport]) -> String {
    let stages: Vec<&str> = reports[0].breakdown.keys().copied().collect();
    let mut out = format!("{:>8} {:>14}", "frames", "total");
    for s in &stages {
        let _ = write!(out, " {s:>14}");
    }
    let _ = writeln!(out, " {:>8}", "ratio");
    for r in reports {
        let _ = write!(out, "{:>8} {:>14}", r.frames_used, r.total);
        for s in &stages {
            let _ = write!(out, " {:>14}", r.stage(s));
        }
        let _ = writeln!(out, " {:>8.4}", r.total as f64 / reports[0].total as f64);
    }
    out
}

pub(crate) fn profile(args: ProfileArgs) -> Result<(), Failure> {
    let (config, recorded) = optional_config(args.config.as_deref(), args.out.as_ref(), "profile")?;
    let inputs =
        Inputs { encoder: args.encoder, frames: args.frames, model: args.model, data: args.data, ..Inputs::default() }
            .or(recorded);
    let bundle = inputs.model.as_deref().map(read_bundle).transpose()?;
    let encoder = match (&bundle, config.as_ref().and_then(|c| c.encoder.clone()), &inputs.encoder) {
        (Some(b), _, _) => b.model.config().clone(),
        (None, Some(enc), Some(name)) if enc.kind_name() != name => {
            return Err(Failure::config_msg(format!(
                "--encoder {name} disagrees with the config's {}",
                enc.kind_name()
            )))
        }
        (None, Some(enc), _) => enc,
        (None, None, Some(name)) => desk_encoder(name)?,
        (None, None, None) => return Err(Failure::config_msg("profile needs --encoder, --model or a config encoder")),
    };
    if inputs.frames.is_empty() {
        return Err(Failure::config_msg("profile needs at least one --frames"));
    }
    let reports = inputs
        .frames
        .iter()
        .map(|&t| count_flops(&encoder, encoder.num_classes, t))
        .collect::<Result<Vec<_>, _>>()
        .map_err(Failure::config)?;
    print!("{}", flops_table(&reports));
    let ratio_to_first = reports.iter().map(|r| r.total as f64 / reports[0].total as f64).collect();
    let timing = match (&bundle, &inputs.data) {
        (Some(b), Some(path)) => {
            let data = read_data(path)?;
            let t = time_inference(&b.model, &data, b.sampler.as_ref()).map_err(Failure::runtime)?;
            println!(
                "inference: {:.4} s for {} videos ({:.1} videos/s)",
                t.wall_seconds,
                data.len(),
                t.videos_per_second
            );
            Some(t)
        }
        _ => None,
    };
    if let Some(config) = config {
        let stem = format!("profile-{}", encoder.kind_name());
        let mut run = Run::new("profile", config, inputs)?;
        run.write_json(&format!("{stem}.json"), &ProfileReport { encoder, reports, ratio_to_first })?;
        if let Some(t) = timing {
            // wall-clock is environmental, so it stays out of the manifest's outputs
            let path = run.path(&format!("{stem}.timing.json"));
            let text = serde_json::to_string_pretty(&t).map_err(Failure::runtime)?;
            fs::write(&path, text + "\n").map_err(Failure::runtime)?;
        }
        run.finish(&stem)?;
    }
    Ok(())
}

/// Tab-separated rows `id, role, top_label, e_0 .. e_{E-1}`: the teacher's
/// row then the student's row for every video.
pub fn embeddings_tsv(teacher: &ModelBundle, student: &ModelBundle, data: &[VideoRecord]) -> Result<String, Failure> {
    let width = teacher.model.config().embedding_dim();
    if student.model.config().embedding_dim() != width {
        return Err(Failure::config_msg(format!(
            "embedding widths differ: teacher {width}, student {}",
            student.model.config().embedding_dim()
        )));
    }
    if data.is_empty() {
        return Err(Failure::config_msg("no videos to embed"));
    }
    let mut out = String::from("id\trole\ttop_label");
    for i in 0..width {
        let _ = write!(out, "\te{i}");
    }
    out.push('\n');
    for r in data {
        for (role, b) in [(Role::Teacher, teacher), (Role::Student, student)] {
            let c = clip(r, b.sampler.as_ref());
            let e = b.model.embed(&c).map_err(Failure::runtime)?;
            let p = b.model.predict(&c).map_err(Failure::runtime)?;
            let top = p.iter().enumerate().fold(0, |best, (i, &v)| if v > p[best] { i } else { best });
            let _ = write!(out, "{}\t{role}\t{top}", r.id);
            for v in &e.embedding {
                let _ = write!(out, "\t{v}");
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Writes [`embeddings_tsv`] to `path`.
pub fn dump_embeddings(
    teacher: &ModelBundle,
    student: &ModelBundle,
    data: &[VideoRecord],
    path: &Path,
) -> Result<(), Failure> {
    let text = embeddings_tsv(teacher, student, data)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display())).map_err(Failure::runtime)
}

pub(crate) fn dump(args: DumpArgs) -> Result<(), Failure> {
    let (config, recorded) = optional_config(args.config.as_deref(), args.out.as_ref(), "dump-embeddings")?;
    let config = config.ok_or_else(|| Failure::config_msg("dump-embeddings needs --out or --config"))?;
    let mut inputs =
        Inputs { teacher: args.teacher, model: args.model, data: args.data, ..Inputs::default() }.or(recorded);
    let teacher_path = inputs.teacher.clone().unwrap_or_else(|| config.output.dir.join("teacher.fdm"));
    let student_path = inputs.model.clone().ok_or_else(|| Failure::config_msg("dump-embeddings needs --model"))?;
    let data_path = inputs.data.clone().unwrap_or_else(|| config.split_path("test"));
    inputs.teacher = Some(teacher_path.clone());
    inputs.data = Some(data_path.clone());
    let mut run = Run::new("dump-embeddings", config, inputs)?;
    let (teacher, student) = (read_bundle(&teacher_path)?, read_bundle(&student_path)?);
    let data = read_data(&data_path)?;
    let stem = format!("{}.embeddings", stem_of(&student_path));
    let text = embeddings_tsv(&teacher, &student, &data)?;
    run.write(&format!("{stem}.tsv"), text.as_bytes())?;
    run.finish(&stem)
}
