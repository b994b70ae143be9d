use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use posdiff::adapters::{patchify, render_placement, shuffle_instance, Image, PuzzleInstance, SequenceInstance};
use posdiff::checkpoint::Checkpoint;
use posdiff::config::RunConfig;
use posdiff::data::{generate, read_dataset, write_dataset, Split};
use posdiff::diffusion::{timestep_subsequence, InitMode, NoiseSchedule, PositionSet};
use posdiff::metrics::MetricsReport;
use posdiff::model::Model;
use posdiff::task::{dataset_task, instances_from_dataset, Task, TaskInstance};
use posdiff::trainer::{eval_rng, evaluate, reverse_chunk, train as run_training, EvalConfig, Predictor, TrainState};
use serde::Serialize;

use crate::settings::{echo, usage};

fn ensure_dir(dir: &Path, force: bool) -> anyhow::Result<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).with_context(|| format!("reading {}", dir.display()))?.next().is_some();
        if non_empty && !force {
            return Err(usage(format!("{} is not empty; pass --force to write into it", dir.display())));
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

pub fn gen(cfg: &RunConfig, out: &Path, force: bool) -> anyhow::Result<()> {
    ensure_dir(out, force)?;
    let ds = generate(&cfg.dataset)?;
    write_dataset(&ds, out)?;
    echo(cfg, out)?;
    let m = ds.manifest();
    let count = |s: Split| m.entries.iter().filter(|e| e.split == s).count();
    println!(
        "wrote {} items to {} (train {}, val {}, test {})",
        m.entries.len(),
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

pub fn train(
    mut cfg: RunConfig,
    data: &Path,
    out: &Path,
    epochs: Option<usize>,
    resume: Option<&Path>,
    force: bool,
) -> anyhow::Result<()> {
    let ds = read_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let task = dataset_task(&ds);
    cfg.dataset = ds.manifest().spec.clone();
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    cfg.validate().map_err(|e| usage(format!("invalid config: {e}")))?;
    let sched = NoiseSchedule::from_config(&cfg.diffusion)?;

    let mut state = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            ck.expect_task(task)?;
            ck.expect_steps(cfg.diffusion.steps).map_err(|e| usage(e.to_string()))?;
            ck.into_state(cfg.train.adam())
        }
        None => TrainState::new(Model::new(task, &cfg.model, cfg.diffusion.steps)?, &cfg.train),
    };
    ensure_dir(out, force || resume.is_some())?;
    echo(&cfg, out)?;

    let train_set = instances_from_dataset(&ds, Split::Train)?;
    let log_path = out.join("train_log.jsonl");
    let log_file = if resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);
    let every = cfg.train.checkpoint_every;
    log::info!("training {task} model on {} instances from step {}", train_set.len(), state.step);
    run_training(&mut state, &train_set, &cfg.train, &sched, None, |rec, st| {
        writeln!(log, "{}", serde_json::to_string(rec)?)?;
        if every > 0 && rec.step % every == 0 {
            log.flush()?;
            Checkpoint::from_state(st, &cfg.diffusion).save(&out.join(format!("step-{:06}.ckpt", rec.step)))?;
        }
        if rec.step % 50 == 0 {
            log::info!("step {} epoch {} loss {:.4}", rec.step, rec.epoch, rec.loss);
        }
        Ok(())
    })?;
    log.flush()?;
    let final_path = out.join("final.ckpt");
    Checkpoint::from_state(&state, &cfg.diffusion).save(&final_path)?;
    println!("saved {} at step {}", final_path.display(), state.step);

    let val = instances_from_dataset(&ds, Split::Val)?;
    if val.is_empty() {
        log::warn!("validation split is empty; skipping the final report");
        return Ok(());
    }
    let ev = evaluate(Predictor::Model(&state.model), &val, &cfg.diffusion, &cfg.eval)?;
    let text = ev.report.to_text();
    fs::write(out.join("val_report.txt"), &text)?;
    print!("{text}");
    Ok(())
}

pub struct EvalRequest {
    pub checkpoint: Option<PathBuf>,
    pub data: PathBuf,
    pub init: Option<InitMode>,
    pub split: Option<String>,
    pub oracle: bool,
    pub out: Option<PathBuf>,
}

fn init_name(m: InitMode) -> &'static str {
    match m {
        InitMode::ZeroCentered => "zero",
        InitMode::StandardGaussian => "gaussian",
    }
}

pub fn eval(mut cfg: RunConfig, req: &EvalRequest) -> anyhow::Result<()> {
    if let Some(init) = req.init {
        cfg.diffusion.init_mode = init;
    }
    let split = match &req.split {
        Some(s) => s.parse::<Split>().map_err(|e| usage(e.to_string()))?,
        None => cfg.eval.split,
    };
    let ds = read_dataset(&req.data).with_context(|| format!("loading dataset {}", req.data.display()))?;
    let task = dataset_task(&ds);
    let instances = instances_from_dataset(&ds, split)?;
    if instances.is_empty() {
        bail!("split {split} of {} is empty", req.data.display());
    }
    let eval_cfg = EvalConfig { split, ..cfg.eval.clone() };
    let report = if req.oracle {
        evaluate(Predictor::Oracle, &instances, &cfg.diffusion, &eval_cfg)?.report
    } else {
        let path = req.checkpoint.as_ref().ok_or_else(|| usage("eval needs --checkpoint or --oracle"))?;
        let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        ck.expect_task(task)?;
        ck.expect_steps(cfg.diffusion.steps).map_err(|e| usage(e.to_string()))?;
        evaluate(Predictor::Model(&ck.model), &instances, &cfg.diffusion, &eval_cfg)?.report
    };
    let out = match (&req.out, &req.checkpoint, req.oracle) {
        (Some(p), _, _) => p.clone(),
        (None, Some(ck), false) => ck.with_file_name(report_name(split, cfg.diffusion.init_mode, false)),
        _ => req.data.join(report_name(split, cfg.diffusion.init_mode, true)),
    };
    write_report(&report, &out)?;
    print!("{}", report.to_text());
    Ok(())
}

fn report_name(split: Split, init: InitMode, oracle: bool) -> String {
    let who = if oracle { "oracle-" } else { "" };
    format!("report-{who}{split}-{}.txt", init_name(init))
}

fn write_report(report: &MetricsReport, path: &Path) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, report.to_text()).with_context(|| format!("writing {}", path.display()))
}

pub struct SolveRequest {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub grid: usize,
    pub shuffle: Option<u64>,
    pub init: Option<InitMode>,
    pub frames: bool,
    pub out: Option<PathBuf>,
}

fn read_tokens(path: &Path) -> anyhow::Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut elements = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tokens = line
            .split_whitespace()
            .map(|t| t.parse::<u32>())
            .collect::<Result<Vec<_>, _>>()
            .with_context(|| format!("{}:{}: expected token ids", path.display(), i + 1))?;
        elements.push(tokens);
    }
    if elements.len() < 2 {
        bail!("{} holds {} elements; need at least 2", path.display(), elements.len());
    }
    Ok(elements)
}

#[derive(Serialize)]
struct Snapshot<'a> {
    index: usize,
    t: usize,
    positions: Vec<&'a [f64]>,
}

pub fn solve(mut cfg: RunConfig, req: &SolveRequest) -> anyhow::Result<()> {
    if let Some(init) = req.init {
        cfg.diffusion.init_mode = init;
    }
    let ck = Checkpoint::load(&req.checkpoint).with_context(|| format!("loading {}", req.checkpoint.display()))?;
    let is_image = req.input.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
    let input_task = if is_image { Task::Puzzle } else { Task::Sequence };
    if ck.meta.task != input_task {
        return Err(posdiff::Error::TaskMismatch { expected: ck.meta.task.to_string(), got: input_task.to_string() }.into());
    }
    ck.expect_task(input_task)?;
    ck.expect_steps(cfg.diffusion.steps).map_err(|e| usage(e.to_string()))?;

    let instance = if is_image {
        let img = Image::open(&req.input).with_context(|| format!("reading {}", req.input.display()))?;
        TaskInstance::Puzzle(PuzzleInstance::ordered("input", patchify(&img, req.grid)?))
    } else {
        TaskInstance::Sequence(SequenceInstance::ordered("input", read_tokens(&req.input)?))
    };
    let instance = match (req.shuffle, instance) {
        (Some(s), TaskInstance::Puzzle(p)) => TaskInstance::Puzzle(shuffle_instance(&p, s)),
        (Some(s), TaskInstance::Sequence(q)) => TaskInstance::Sequence(shuffle_instance(&q, s)),
        (None, i) => i,
    };

    let sched = NoiseSchedule::from_config(&cfg.diffusion)?;
    let mut rng = eval_rng(cfg.eval.seed, 0);
    let mut states: Vec<(usize, PositionSet)> = Vec::new();
    let x = reverse_chunk(Predictor::Model(&ck.model), &[&instance], &cfg.diffusion, &sched, Some(&mut rng), |t, x| {
        if req.frames {
            states.push((t, x.clone()));
        }
    })?;
    let assignment = instance.decode(x.coords())?;

    match &instance {
        TaskInstance::Puzzle(_) => {
            println!("piece -> cell (row, col)");
            for (i, &c) in assignment.slots.iter().enumerate() {
                println!("{i} -> {c} ({}, {})", c / req.grid, c % req.grid);
            }
        }
        TaskInstance::Sequence(_) => {
            let mut order: Vec<usize> = (0..assignment.len()).collect();
            order.sort_by_key(|&i| assignment.slots[i]);
            println!("element -> rank");
            for (i, &r) in assignment.slots.iter().enumerate() {
                println!("{i} -> {r}");
            }
            println!("order: {}", order.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" "));
        }
    }

    if req.frames {
        let dir = req.out.clone().unwrap_or_else(|| PathBuf::from("frames"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let expected = timestep_subsequence(cfg.diffusion.steps, cfg.diffusion.inference_ratio)?.len();
        debug_assert_eq!(states.len(), expected);
        for (k, (t, x)) in states.iter().enumerate() {
            let snap = Snapshot { index: k, t: *t, positions: x.coords().chunks(x.dim()).collect() };
            fs::write(dir.join(format!("snapshot-{k:03}-t{t:03}.json")), serde_json::to_string(&snap)? + "\n")?;
            if let TaskInstance::Puzzle(p) = &instance {
                render_placement(&p.elements, x.coords(), req.grid)?
                    .to_rgb8()
                    .save(dir.join(format!("frame-{k:03}-t{t:03}.png")))?;
            }
        }
        println!("wrote {} snapshots to {}", states.len(), dir.display());
    }
    Ok(())
}
