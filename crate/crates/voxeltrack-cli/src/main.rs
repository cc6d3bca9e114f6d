//! Command-line front end: synthetic dataset generation, training,
//! offline and real-time evaluation, hyperparameter sweeps, and
//! plot-ready series emission.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 runtime failure.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use voxeltrack::config::{mode_str, parse_mode, run_meta, AppConfig, KNOWN_KEYS};
use voxeltrack::data::{
    eval_sequence_from_parts, generate_scene, load_sequence, read_frame_records, read_kv,
    read_manifest, save_sequence, write_frame_records, write_kv, write_manifest, FrameRecord,
};
use voxeltrack::eval::{
    center_distance, evaluate_dataset, evaluate_gt_echo_dataset, iou3d, precision_curve,
    success_curve, DatasetEval, EvalSequence, LatencyModel,
};
use voxeltrack::nn::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use voxeltrack::nn::graph::Model;
use voxeltrack::nn::Tensor;
use voxeltrack::tracker::Tracker;
use voxeltrack::train::{
    restore_training, train_loop, training_blobs, TrackedSequence, TrainData,
};
use voxeltrack::{Error, Result};

#[derive(Parser)]
#[command(
    name = "voxeltrack",
    version,
    about = "Pillar-based single-object 3D tracking: generate, train, evaluate"
)]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration preset to start from (default, desk).
    #[arg(long, global = true, default_value = "default")]
    preset: String,
    /// Config file layered over the preset.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one key, e.g. --set tracker.context_amount=0.26.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset with train/val/test manifests.
    Gen(GenArgs),
    /// Train a model; writes a checkpoint and its loss curve.
    Train(TrainArgs),
    /// Score a checkpoint (or the ground-truth echo) over a manifest.
    Eval(EvalArgs),
    /// Re-evaluate one checkpoint across several values of one key.
    Sweep(SweepArgs),
    /// Turn run outputs into plot-ready series files.
    PlotData(PlotDataArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory for sequences and manifests.
    #[arg(long)]
    out: PathBuf,
    /// Sequences in the training split.
    #[arg(long, default_value_t = 8)]
    train_seqs: usize,
    /// Sequences in the validation split.
    #[arg(long, default_value_t = 2)]
    val_seqs: usize,
    /// Sequences in the test split.
    #[arg(long, default_value_t = 2)]
    test_seqs: usize,
    /// Base scene seed (overrides scene.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest of training sequences.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (model.ckpt, loss.txt, run_meta.txt).
    #[arg(long)]
    out: PathBuf,
    /// Total step count to train to (overrides train.steps).
    #[arg(long)]
    steps: Option<usize>,
    /// Continue from an earlier checkpoint; step numbering carries on.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Training seed (overrides train.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest of sequences to score.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (results.txt, frames.txt, run_meta.txt).
    #[arg(long)]
    out: PathBuf,
    /// Trained checkpoint to evaluate.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score the ground-truth echo instead of a model (protocol checks).
    #[arg(long, conflicts_with = "checkpoint")]
    mock: bool,
    /// offline, realtime-pred or realtime-nonpred (default from config).
    #[arg(long)]
    mode: Option<String>,
    /// Frame arrival rate in Hz (default from config).
    #[arg(long)]
    rate: Option<f64>,
    /// Injected per-frame latency in seconds; without it the config
    /// decides, and an unset config charges measured wall time.
    #[arg(long)]
    latency: Option<f64>,
    /// Device label recorded in results; plot-data groups series by it.
    #[arg(long, default_value = "cpu")]
    label: String,
    /// Parallel sequence workers (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    /// Manifest of sequences to score.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (sweep.txt, run_meta.txt).
    #[arg(long)]
    out: PathBuf,
    /// Trained checkpoint evaluated at every value.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Key to vary, e.g. tracker.context_amount.
    #[arg(long)]
    param: String,
    /// Comma-separated values to try.
    #[arg(long)]
    values: String,
    /// Parallel sequence workers (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct PlotDataArgs {
    /// Output directory for series files.
    #[arg(long)]
    out: PathBuf,
    /// Loss-curve file from `train`; re-emitted sorted by step.
    #[arg(long)]
    loss: Option<PathBuf>,
    /// frames.txt from `eval`; emits success/precision threshold curves.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// results.txt files from `eval`; emits per-label realtime series.
    #[arg(long, num_args = 1..)]
    results: Vec<PathBuf>,
    /// Dump the score/penalty maps of one tracked frame.
    #[arg(long)]
    maps: bool,
    /// Checkpoint for --maps.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Manifest for --maps.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sequence name for --maps.
    #[arg(long)]
    sequence: Option<String>,
    /// Frame index for --maps (>= 1; frame 0 initializes the tracker).
    #[arg(long, default_value_t = 1)]
    frame: usize,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::UnknownKey(_) => 1,
        Error::Data { .. } | Error::Io { .. } => 2,
        Error::Shape(_) | Error::OutOfRange(_) | Error::Runtime(_) => 3,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = AppConfig::preset(&cli.config.preset)?;
    if let Some(path) = &cli.config.config {
        cfg.load_file(path)?;
    }
    for spec in &cli.config.set {
        cfg.apply_override(spec)?;
    }
    match &cli.command {
        Cmd::Gen(a) => cmd_gen(cfg, a),
        Cmd::Train(a) => cmd_train(cfg, a),
        Cmd::Eval(a) => cmd_eval(cfg, a),
        Cmd::Sweep(a) => cmd_sweep(cfg, a),
        Cmd::PlotData(a) => cmd_plot_data(cfg, a),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// splitmix64 over a part list: independent streams per (seed, split,
/// index) without consuming RNG state anywhere else.
fn mix_seed(parts: &[u64]) -> u64 {
    let mut z = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        z ^= p;
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn with_workers<T: Send>(
    workers: Option<usize>,
    f: impl FnOnce() -> Result<T> + Send,
) -> Result<T> {
    match workers {
        None => f(),
        Some(0) => Err(Error::config("--workers must be at least 1")),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Runtime(format!("building worker pool: {e}")))?;
            pool.install(f)
        }
    }
}

fn load_model(ckpt: &Path, cfg: &AppConfig) -> Result<Model> {
    let ck = load_checkpoint(ckpt)?;
    Model::from_blobs(&ck.blobs, cfg.pillars.feature_channels, &cfg.fgn)
}

fn load_eval_sequences(manifest: &Path) -> Result<Vec<EvalSequence>> {
    let entries = read_manifest(manifest)?;
    if entries.is_empty() {
        return Err(Error::config(format!(
            "manifest `{}` lists no sequences",
            manifest.display()
        )));
    }
    entries
        .iter()
        .map(|e| {
            let (clouds, tracks) = load_sequence(manifest, e)?;
            eval_sequence_from_parts(&e.name, clouds, &tracks)
        })
        .collect()
}

fn cmd_gen(mut cfg: AppConfig, args: &GenArgs) -> Result<()> {
    if let Some(s) = args.seed {
        cfg.scene.seed = s;
    }
    cfg.validate()?;
    ensure_dir(&args.out)?;
    let splits = [
        ("train", args.train_seqs),
        ("val", args.val_seqs),
        ("test", args.test_seqs),
    ];
    let mut notes = vec![("seed".to_string(), cfg.scene.seed.to_string())];
    for (si, (split, count)) in splits.iter().enumerate() {
        let mut entries = Vec::new();
        for i in 0..*count {
            let name = format!("{split}{i:03}");
            let mut scene_cfg = cfg.scene.clone();
            scene_cfg.seed = mix_seed(&[cfg.scene.seed, si as u64 + 1, i as u64]);
            // Vary motion across sequences (deterministically from the
            // seed): a tracker trained on a single speed is brittle, so
            // the configured speed/turn act as the center of a spread.
            let unit = |tag: u64| {
                mix_seed(&[cfg.scene.seed, si as u64 + 1, i as u64, tag]) % 1024
            };
            scene_cfg.speed = cfg.scene.speed * (0.4 + 1.2 * unit(1) as f64 / 1024.0);
            scene_cfg.turn_rate =
                cfg.scene.turn_rate + 0.03 * (unit(2) as f64 / 1024.0 - 0.5);
            let scene = generate_scene(&scene_cfg)?;
            entries.push(save_sequence(
                &args.out,
                &name,
                &scene.clouds,
                std::slice::from_ref(&scene.track),
            )?);
        }
        write_manifest(&args.out.join(format!("{split}.manifest")), &entries)?;
        notes.push((format!("{split}_sequences"), count.to_string()));
    }
    write_text(&args.out.join("run_meta.txt"), &run_meta("gen", &cfg, &notes))?;
    println!(
        "generated {} sequences under {}",
        splits.iter().map(|(_, c)| c).sum::<usize>(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train(mut cfg: AppConfig, args: &TrainArgs) -> Result<()> {
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = args.steps {
        cfg.train.steps = n;
    }
    cfg.validate()?;
    ensure_dir(&args.out)?;
    let entries = read_manifest(&args.data)?;
    if entries.is_empty() {
        return Err(Error::config(format!(
            "manifest `{}` lists no sequences",
            args.data.display()
        )));
    }
    let mut data = TrainData::default();
    for e in &entries {
        let (clouds, tracks) = load_sequence(&args.data, e)?;
        data.sequences.push(TrackedSequence { clouds, tracks });
    }
    let (mut model, mut adam, start_step) = match &args.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let (m, a) = restore_training(&ck.blobs, cfg.pillars.feature_channels, &cfg.fgn)?;
            let step: usize = ck
                .header_get("step")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| {
                    Error::config(format!(
                        "checkpoint `{}` lacks a numeric `step` header",
                        path.display()
                    ))
                })?;
            (m, a, step)
        }
        None => (
            Model::init(cfg.pillars.feature_channels, &cfg.fgn, cfg.train.seed)?,
            Vec::new(),
            0,
        ),
    };
    if start_step >= cfg.train.steps {
        return Err(Error::config(format!(
            "checkpoint is already at step {start_step}; raise --steps above {}",
            cfg.train.steps
        )));
    }
    let ckpt_path = args.out.join("model.ckpt");
    let seed = cfg.train.seed;
    let mut losses: Vec<(usize, f64)> = Vec::new();
    train_loop(
        &data,
        &mut model,
        &mut adam,
        start_step,
        &cfg.train,
        &cfg.tracker,
        &cfg.grid,
        &cfg.pillars,
        |step, loss| {
            losses.push((step, loss));
            Ok(())
        },
        |step, model, adam| {
            let ck = Checkpoint {
                header: vec![
                    ("step".to_string(), step.to_string()),
                    ("seed".to_string(), seed.to_string()),
                ],
                blobs: training_blobs(model, adam),
            };
            save_checkpoint(&ckpt_path, &ck)
        },
    )?;
    let mut curve = String::from("# step loss\n");
    for (s, l) in &losses {
        curve.push_str(&format!("{s} {l}\n"));
    }
    write_text(&args.out.join("loss.txt"), &curve)?;
    write_text(
        &args.out.join("run_meta.txt"),
        &run_meta(
            "train",
            &cfg,
            &[
                ("data".to_string(), args.data.display().to_string()),
                ("start_step".to_string(), start_step.to_string()),
            ],
        ),
    )?;
    println!(
        "trained steps {start_step}..{}; checkpoint: {}",
        cfg.train.steps,
        ckpt_path.display()
    );
    Ok(())
}

fn cmd_eval(mut cfg: AppConfig, args: &EvalArgs) -> Result<()> {
    if let Some(m) = &args.mode {
        cfg.eval.mode = parse_mode(m)?;
    }
    if let Some(r) = args.rate {
        cfg.eval.rate = r;
    }
    if let Some(l) = args.latency {
        cfg.eval.latency = Some(l);
    }
    cfg.validate()?;
    ensure_dir(&args.out)?;
    let seqs = load_eval_sequences(&args.data)?;
    let latency = cfg.eval.latency.map(LatencyModel::Constant);
    let result = if args.mock {
        let lm = latency.clone().unwrap_or(LatencyModel::Constant(0.0));
        evaluate_gt_echo_dataset(&seqs, cfg.eval.rate, cfg.eval.mode, &lm)?
    } else {
        let ckpt = args.checkpoint.as_deref().ok_or_else(|| {
            Error::config("eval needs --checkpoint (or --mock for the ground-truth echo)")
        })?;
        let model = load_model(ckpt, &cfg)?;
        with_workers(args.workers, || {
            evaluate_dataset(
                &model,
                &cfg.grid,
                &cfg.pillars,
                &cfg.tracker,
                &seqs,
                cfg.eval.rate,
                cfg.eval.mode,
                latency.as_ref(),
            )
        })?
    };
    write_eval_outputs(&args.out, &cfg, &args.label, args.mock, &seqs, &result)?;
    println!(
        "{}: success {:.2}, precision {:.2}, drop {:.1}%, fps {:.2} over {} frames",
        mode_str(cfg.eval.mode),
        result.overall.success,
        result.overall.precision,
        result.drop_percent,
        result.fps(),
        result.overall.frames
    );
    Ok(())
}

fn write_eval_outputs(
    out: &Path,
    cfg: &AppConfig,
    label: &str,
    mock: bool,
    seqs: &[EvalSequence],
    result: &DatasetEval,
) -> Result<()> {
    let mut kv: Vec<(String, String)> = vec![
        ("label".into(), label.to_string()),
        ("mode".into(), mode_str(cfg.eval.mode).to_string()),
        ("rate".into(), cfg.eval.rate.to_string()),
        (
            "latency".into(),
            cfg.eval
                .latency
                .map(|l| l.to_string())
                .unwrap_or_else(|| "measured".into()),
        ),
        ("mock".into(), mock.to_string()),
        ("sequences".into(), result.sequences.len().to_string()),
        ("frames".into(), result.overall.frames.to_string()),
        ("success".into(), result.overall.success.to_string()),
        ("precision".into(), result.overall.precision.to_string()),
        ("drop_percent".into(), result.drop_percent.to_string()),
        ("processed_frames".into(), result.processed_frames.to_string()),
        ("processing_time".into(), result.processing_time.to_string()),
        ("fps".into(), result.fps().to_string()),
    ];
    for (name, ev) in &result.sequences {
        kv.push((format!("seq.{name}.success"), ev.metrics.success.to_string()));
        kv.push((format!("seq.{name}.precision"), ev.metrics.precision.to_string()));
        kv.push((format!("seq.{name}.drop_percent"), ev.drop_percent.to_string()));
    }
    for (name, msg) in &result.failures {
        kv.push((format!("failure.{name}"), msg.replace('\n', " ")));
    }
    write_kv(&out.join("results.txt"), &kv)?;

    let mut records = Vec::new();
    for (name, ev) in &result.sequences {
        let seq = seqs.iter().find(|s| &s.name == name).ok_or_else(|| {
            Error::Runtime(format!("scored sequence `{name}` missing from inputs"))
        })?;
        for (i, (pred, gt)) in ev.predictions.iter().zip(&seq.gt).enumerate() {
            records.push(FrameRecord {
                seq: name.clone(),
                frame: i,
                pred: *pred,
                iou: iou3d(pred, gt)?,
                dist: center_distance(pred, gt),
            });
        }
    }
    write_frame_records(&out.join("frames.txt"), &records)?;
    write_text(
        &out.join("run_meta.txt"),
        &run_meta(
            "eval",
            cfg,
            &[
                ("label".to_string(), label.to_string()),
                ("mock".to_string(), mock.to_string()),
            ],
        ),
    )
}

fn cmd_sweep(cfg: AppConfig, args: &SweepArgs) -> Result<()> {
    cfg.validate()?;
    // Only tracking/evaluation keys make sense here: they change how a
    // fixed checkpoint is scored. Architecture or training keys would
    // silently leave the rows identical (or break checkpoint loading).
    let sweepable: Vec<String> = KNOWN_KEYS
        .iter()
        .filter(|(s, _)| *s == "tracker" || *s == "eval")
        .flat_map(|(s, keys)| keys.iter().map(move |k| format!("{s}.{k}")))
        .collect();
    if !sweepable.contains(&args.param) {
        return Err(Error::config(format!(
            "cannot sweep `{}`; sweepable keys: {}",
            args.param,
            sweepable.join(", ")
        )));
    }
    let values: Vec<String> = args
        .values
        .split(',')
        .map(|v| v.trim().to_string())
        .filter(|v| !v.is_empty())
        .collect();
    if values.is_empty() {
        return Err(Error::config("sweep needs at least one value (comma separated)"));
    }
    ensure_dir(&args.out)?;
    let model = load_model(&args.checkpoint, &cfg)?;
    let seqs = load_eval_sequences(&args.data)?;
    let (section, key) = args.param.split_once('.').expect("validated dotted key");
    let rows = with_workers(args.workers, || {
        let mut rows = Vec::new();
        for v in &values {
            let mut c = cfg.clone();
            c.apply(section, key, v)?;
            c.validate()?;
            let latency = c.eval.latency.map(LatencyModel::Constant);
            let r = evaluate_dataset(
                &model,
                &c.grid,
                &c.pillars,
                &c.tracker,
                &seqs,
                c.eval.rate,
                c.eval.mode,
                latency.as_ref(),
            )?;
            rows.push((v.clone(), r.overall.success, r.overall.precision));
        }
        Ok(rows)
    })?;
    let mut table = format!("# {} success precision\n", args.param);
    for (v, s, p) in &rows {
        table.push_str(&format!("{v} {s} {p}\n"));
        println!("{} = {v}: success {s:.2}, precision {p:.2}", args.param);
    }
    write_text(&args.out.join("sweep.txt"), &table)?;
    write_text(
        &args.out.join("run_meta.txt"),
        &run_meta(
            "sweep",
            &cfg,
            &[
                ("param".to_string(), args.param.clone()),
                ("values".to_string(), values.join(",")),
            ],
        ),
    )?;
    Ok(())
}

fn cmd_plot_data(cfg: AppConfig, args: &PlotDataArgs) -> Result<()> {
    if args.loss.is_none() && args.frames.is_none() && args.results.is_empty() && !args.maps {
        return Err(Error::config(
            "nothing to do: pass --loss, --frames, --results and/or --maps",
        ));
    }
    ensure_dir(&args.out)?;
    let mut notes = Vec::new();

    if let Some(path) = &args.loss {
        let mut points = read_loss_curve(path)?;
        points.sort_by_key(|&(step, _)| step);
        let mut out = String::from("# step loss\n");
        for (s, l) in &points {
            out.push_str(&format!("{s} {l}\n"));
        }
        write_text(&args.out.join("loss_curve.txt"), &out)?;
        notes.push(("loss".to_string(), path.display().to_string()));
    }

    if let Some(path) = &args.frames {
        let records = read_frame_records(path)?;
        if records.is_empty() {
            return Err(Error::data(path, None, "no frame records"));
        }
        let ious: Vec<f64> = records.iter().map(|r| r.iou).collect();
        let dists: Vec<f64> = records.iter().map(|r| r.dist).collect();
        write_curve(
            &args.out.join("success_curve.txt"),
            "# iou_threshold fraction",
            &success_curve(&ious),
        )?;
        write_curve(
            &args.out.join("precision_curve.txt"),
            "# distance_threshold fraction",
            &precision_curve(&dists),
        )?;
        notes.push(("frames".to_string(), path.display().to_string()));
    }

    if !args.results.is_empty() {
        // One series file per device label, rows sorted by data rate.
        let mut groups: BTreeMap<String, Vec<[f64; 5]>> = BTreeMap::new();
        for path in &args.results {
            let kv = read_kv(path)?;
            let get = |k: &str| -> Result<&str> {
                kv.iter()
                    .find(|(key, _)| key == k)
                    .map(|(_, v)| v.as_str())
                    .ok_or_else(|| Error::data(path, None, format!("missing `{k}`")))
            };
            let num = |k: &str| -> Result<f64> {
                get(k)?
                    .parse()
                    .map_err(|_| Error::data(path, None, format!("bad number for `{k}`")))
            };
            groups.entry(get("label")?.to_string()).or_default().push([
                num("rate")?,
                num("fps")?,
                num("drop_percent")?,
                num("success")?,
                num("precision")?,
            ]);
        }
        for (lbl, mut rows) in groups {
            rows.sort_by(|a, b| a[0].total_cmp(&b[0]));
            let mut out = String::from("# rate fps drop_percent success precision\n");
            for r in &rows {
                out.push_str(&format!("{} {} {} {} {}\n", r[0], r[1], r[2], r[3], r[4]));
            }
            let safe: String = lbl
                .chars()
                .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
                .collect();
            write_text(&args.out.join(format!("realtime_{safe}.txt")), &out)?;
        }
        notes.push(("results".to_string(), args.results.len().to_string()));
    }

    if args.maps {
        let ckpt = args
            .checkpoint
            .as_deref()
            .ok_or_else(|| Error::config("--maps needs --checkpoint"))?;
        let manifest = args
            .data
            .as_deref()
            .ok_or_else(|| Error::config("--maps needs --data"))?;
        let seq_name = args
            .sequence
            .as_deref()
            .ok_or_else(|| Error::config("--maps needs --sequence"))?;
        if args.frame == 0 {
            return Err(Error::config("--frame must be >= 1 (frame 0 initializes the tracker)"));
        }
        let model = load_model(ckpt, &cfg)?;
        let seqs = load_eval_sequences(manifest)?;
        let seq = seqs
            .iter()
            .find(|s| s.name == seq_name)
            .ok_or_else(|| Error::config(format!("sequence `{seq_name}` not in manifest")))?;
        if args.frame >= seq.gt.len() {
            return Err(Error::config(format!(
                "frame {} out of range; sequence `{seq_name}` has frames 0..{}",
                args.frame,
                seq.gt.len()
            )));
        }
        let mut tcfg = cfg.tracker.clone();
        tcfg.collect_maps = true;
        let tracker = Tracker::new(&model, cfg.grid.clone(), cfg.pillars.clone(), tcfg)?;
        let mut state = tracker.init(&seq.clouds[0], &seq.gt[0])?;
        let mut maps = None;
        for f in 1..=args.frame {
            maps = tracker.step(&mut state, &seq.clouds[f])?.maps;
        }
        let maps = maps.ok_or_else(|| Error::Runtime("tracker produced no maps".into()))?;
        for (name, t) in [
            ("raw", &maps.raw),
            ("upscaled", &maps.upscaled),
            ("penalty", &maps.penalty),
            ("blended", &maps.blended),
        ] {
            write_map(&args.out.join(format!("map_{name}.txt")), t)?;
        }
        notes.push(("maps_sequence".to_string(), seq_name.to_string()));
        notes.push(("maps_frame".to_string(), args.frame.to_string()));
    }

    write_text(
        &args.out.join("run_meta.txt"),
        &run_meta("plot-data", &cfg, &notes),
    )?;
    Ok(())
}

fn read_loss_curve(path: &Path) -> Result<Vec<(usize, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let s = raw.trim();
        if s.is_empty() || s.starts_with('#') {
            continue;
        }
        let mut it = s.split_whitespace();
        let (Some(a), Some(b), None) = (it.next(), it.next(), it.next()) else {
            return Err(Error::data(
                path,
                Some(idx + 1),
                format!("expected `step loss`, got `{s}`"),
            ));
        };
        let step = a
            .parse()
            .map_err(|_| Error::data(path, Some(idx + 1), format!("bad step `{a}`")))?;
        let loss = b
            .parse()
            .map_err(|_| Error::data(path, Some(idx + 1), format!("bad loss `{b}`")))?;
        out.push((step, loss));
    }
    Ok(out)
}

fn write_curve(path: &Path, header: &str, curve: &[(f64, f64)]) -> Result<()> {
    let mut out = format!("{header}\n");
    for (t, f) in curve {
        out.push_str(&format!("{t} {f}\n"));
    }
    write_text(path, &out)
}

fn write_map(path: &Path, t: &Tensor) -> Result<()> {
    let &[rows, cols] = t.shape() else {
        return Err(Error::shape(format!("map must be 2D, got {:?}", t.shape())));
    };
    let mut out = format!("# rows {rows} cols {cols}\n");
    for r in 0..rows {
        let row: Vec<String> = (0..cols)
            .map(|c| t.data()[r * cols + c].to_string())
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    write_text(path, &out)
}
