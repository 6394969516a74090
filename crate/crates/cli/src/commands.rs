use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use stagematte::config::PipelineConfig;
use stagematte::dataset::{Role, Sample, Workspace, MANIFEST_FILE};
use stagematte::image::{write_file_atomic, AlphaMask};
use stagematte::metrics::{evaluate_dataset, render_table, MetricReport, ScoreRow};
use stagematte::net::{Checkpoint, Network};
use stagematte::qc::{qc_validate, supervise_samples, trimap_from_alpha};
use stagematte::stage_sim::gen_dataset;
use stagematte::training::{
    distill_labels, evaluate, finetune_student, finetune_student_direct, finetune_teacher, predict_all,
    render_log, train_base, LogLine, TrainConfig, TrainOutput,
};

use crate::args::{Cli, Command, NetKind, TrainOut};
use crate::review::review_panel;
use crate::server::{self, AppState};
use crate::{CliError, CliResult};

struct Ctx {
    cfg: PipelineConfig,
    workspace: PathBuf,
}

impl Ctx {
    fn open(&self) -> CliResult<Workspace> {
        let manifest = self.workspace.join(MANIFEST_FILE);
        if !manifest.is_file() {
            return Err(CliError::data(format!(
                "no manifest at {}; run gen-data or pass --workspace",
                manifest.display()
            )));
        }
        Ok(Workspace::open(&self.workspace)?)
    }
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let workspace = cli.workspace.clone().unwrap_or_else(|| cfg.paths.workspace.clone());
    let ctx = Ctx { cfg, workspace };
    match cli.command {
        Command::GenData { seed, out, force } => gen_data(&ctx, seed, out, force),
        Command::TrainBase { net, out } => cmd_train_base(&ctx, net, &out),
        Command::FinetuneTeacher {
            checkpoint,
            base_fraction,
            out,
        } => cmd_finetune_teacher(&ctx, &checkpoint, base_fraction, &out),
        Command::Distill {
            checkpoint,
            split,
            dir,
            force,
        } => cmd_distill(&ctx, &checkpoint, &split, &dir, force),
        Command::FinetuneStudent { checkpoint, split, out } => cmd_finetune_student(&ctx, &checkpoint, &split, &out),
        Command::FinetuneStudentDirect {
            checkpoint,
            base_fraction,
            train_refiner,
            out,
        } => cmd_finetune_direct(&ctx, &checkpoint, base_fraction, train_refiner, &out),
        Command::Predict {
            checkpoint,
            split,
            out,
            force,
        } => cmd_predict(&ctx, &checkpoint, &split, &out, force),
        Command::ExportReview {
            split,
            pred,
            checkpoint,
            out,
            force,
        } => cmd_export_review(&ctx, &split, pred.as_deref(), checkpoint.as_deref(), &out, force),
        Command::Serve {
            manifest,
            port,
            host,
            pred,
            static_dir,
        } => cmd_serve(&ctx, manifest, port, &host, pred, static_dir),
        Command::Eval {
            pred,
            split,
            band,
            out,
            force,
        } => cmd_eval(&ctx, &pred, &split, band, out.as_deref(), force),
        Command::Qc {
            pred,
            split,
            band,
            out,
            force,
        } => cmd_qc(&ctx, &pred, &split, band, out.as_deref(), force),
        Command::RatioSweep {
            checkpoint,
            values,
            out,
            iterations,
            force,
        } => cmd_ratio_sweep(&ctx, &checkpoint, &values, &out, iterations, force),
    }
}

fn refuse_existing(path: &Path, force: bool) -> CliResult<()> {
    if path.exists() && !force {
        return Err(CliError::usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn parse_split(s: &str) -> CliResult<Role> {
    Ok(Role::parse(s)?)
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| stagematte::Error::io(dir, e).into())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(d)?;
    }
    Ok(write_file_atomic(path, text.as_bytes())?)
}

fn gen_data(ctx: &Ctx, seed: Option<u64>, out: Option<PathBuf>, force: bool) -> CliResult<()> {
    let out = out.unwrap_or_else(|| ctx.workspace.clone());
    refuse_existing(&out.join(MANIFEST_FILE), force)?;
    ensure_dir(&out)?;
    let seed = seed.unwrap_or(ctx.cfg.seed);
    let m = gen_dataset(&ctx.cfg.generator, seed, &out)?;
    let counts: Vec<String> = Role::ALL
        .iter()
        .map(|&r| format!("{r} {}", m.by_role(r).count()))
        .collect();
    println!("wrote {} records to {} ({})", m.records.len(), out.display(), counts.join(", "));
    Ok(())
}

fn log_path(out: &Path) -> PathBuf {
    out.with_extension("log.tsv")
}

fn phase_config(base: &TrainConfig, out: &TrainOut) -> TrainConfig {
    let mut c = base.clone();
    if let Some(n) = out.iterations {
        c.iterations = n;
    }
    if let Some(s) = out.seed {
        c.seed = s;
    }
    c
}

/// Refuses before training starts so a long run never ends in a refusal.
fn check_train_out(out: &TrainOut) -> CliResult<()> {
    refuse_existing(&out.out, out.force)?;
    refuse_existing(&log_path(&out.out), out.force)
}

fn save_train_output(result: TrainOutput, out: &TrainOut) -> CliResult<()> {
    let (ck, log) = result;
    if let Some(d) = out.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        ensure_dir(d)?;
    }
    ck.save(&out.out)?;
    write_text(&log_path(&out.out), &render_log(&log))?;
    println!("wrote {} ({})", out.out.display(), summarize(&log));
    Ok(())
}

fn summarize(log: &[LogLine]) -> String {
    match log.last() {
        None => "no iterations".into(),
        Some(l) => {
            let mut s = format!("{} iterations, last {} step", log.len(), l.phase);
            if let Some(v) = l.base_loss {
                s += &format!(" base loss {v:.5}");
            }
            if let Some(v) = l.scribble_loss {
                s += &format!(" scribble loss {v:.5}");
            }
            s
        }
    }
}

fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

/// Capture-stage records with at least one annotated pixel.
fn scribbled_samples(ws: &Workspace) -> CliResult<Vec<Sample>> {
    let all = ws.load_role(Role::CaptureStage)?;
    let (keep, skip): (Vec<Sample>, Vec<Sample>) = all
        .into_iter()
        .partition(|s| s.scribbles.as_ref().is_some_and(|y| y.annotated_count() > 0));
    if !skip.is_empty() {
        let ids: Vec<&str> = skip.iter().map(|s| s.id.as_str()).collect();
        eprintln!("note: skipping capture-stage records without scribbles: {}", ids.join(", "));
    }
    Ok(keep)
}

fn cmd_train_base(ctx: &Ctx, net: NetKind, out: &TrainOut) -> CliResult<()> {
    check_train_out(out)?;
    let ws = ctx.open()?;
    let (network, phase) = match net {
        NetKind::Teacher => (Network::teacher(), &ctx.cfg.train.base_teacher),
        NetKind::Student => (Network::student(), &ctx.cfg.train.base_student),
    };
    let cfg = phase_config(phase, out);
    let ck = Checkpoint::init(network, ctx.cfg.seed)?;
    let base = ws.load_role(Role::Base)?;
    save_train_output(train_base(ck, &base, &cfg)?, out)
}

fn cmd_finetune_teacher(ctx: &Ctx, checkpoint: &Path, base_fraction: Option<f64>, out: &TrainOut) -> CliResult<()> {
    check_train_out(out)?;
    let ws = ctx.open()?;
    let mut cfg = phase_config(&ctx.cfg.train.finetune_teacher, out);
    if let Some(p) = base_fraction {
        cfg.base_fraction = p;
    }
    let ck = load_checkpoint(checkpoint)?;
    let base = ws.load_role(Role::Base)?;
    let scribbled = scribbled_samples(&ws)?;
    save_train_output(finetune_teacher(ck, &base, &scribbled, &cfg)?, out)
}

fn cmd_distill(ctx: &Ctx, checkpoint: &Path, split: &str, dir: &str, force: bool) -> CliResult<()> {
    let role = parse_split(split)?;
    if role == Role::Validation {
        return Err(CliError::usage("pseudo-labels on the validation split would leak it into training"));
    }
    let mut ws = ctx.open()?;
    let rel = |id: &str| format!("{dir}/{id}.png");
    let samples = ws.load_role(role)?;
    for s in &samples {
        refuse_existing(&ws.root.join(rel(&s.id)), force)?;
    }
    let ck = load_checkpoint(checkpoint)?;
    let labels = distill_labels(&ck, &samples)?;
    ensure_dir(&ws.root.join(dir))?;
    for (id, m) in &labels {
        m.save_png(ws.root.join(rel(id)))?;
        if let Some(r) = ws.manifest.get_mut(id) {
            r.pseudo_label = Some(rel(id));
        }
    }
    ws.manifest.save(ws.manifest_path())?;
    println!("wrote {} pseudo-labels to {}", labels.len(), ws.root.join(dir).display());
    Ok(())
}

fn cmd_finetune_student(ctx: &Ctx, checkpoint: &Path, split: &str, out: &TrainOut) -> CliResult<()> {
    check_train_out(out)?;
    let role = parse_split(split)?;
    if role == Role::Validation {
        return Err(CliError::usage("the validation split may not be used for training"));
    }
    let ws = ctx.open()?;
    let cfg = phase_config(&ctx.cfg.train.finetune_student, out);
    let ck = load_checkpoint(checkpoint)?;
    let samples: Vec<Sample> = ws
        .load_role(role)?
        .into_iter()
        .filter(|s| s.pseudo_label.is_some())
        .collect();
    if samples.is_empty() {
        return Err(CliError::data(format!("no pseudo-labeled records in split {role}; run distill first")));
    }
    save_train_output(finetune_student(ck, &samples, &cfg)?, out)
}

fn cmd_finetune_direct(
    ctx: &Ctx,
    checkpoint: &Path,
    base_fraction: Option<f64>,
    train_refiner: bool,
    out: &TrainOut,
) -> CliResult<()> {
    check_train_out(out)?;
    let ws = ctx.open()?;
    let mut cfg = phase_config(&ctx.cfg.train.direct_student, out);
    if let Some(p) = base_fraction {
        cfg.base_fraction = p;
    }
    let freeze = ctx.cfg.train.direct_freeze_refiner && !train_refiner;
    let ck = load_checkpoint(checkpoint)?;
    let base = ws.load_role(Role::Base)?;
    let scribbled = scribbled_samples(&ws)?;
    save_train_output(finetune_student_direct(ck, &base, &scribbled, &cfg, freeze)?, out)
}

fn pred_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.png"))
}

fn cmd_predict(ctx: &Ctx, checkpoint: &Path, split: &str, out: &Path, force: bool) -> CliResult<()> {
    let role = parse_split(split)?;
    let ws = ctx.open()?;
    let samples = ws.load_role(role)?;
    for s in &samples {
        refuse_existing(&pred_path(out, &s.id), force)?;
    }
    let ck = load_checkpoint(checkpoint)?;
    let preds = predict_all(&ck, &samples)?;
    ensure_dir(out)?;
    for (id, m) in &preds {
        m.save_png(pred_path(out, id))?;
    }
    println!("wrote {} predictions to {}", preds.len(), out.display());
    Ok(())
}

fn load_predictions(dir: &Path, samples: &[Sample]) -> CliResult<BTreeMap<String, AlphaMask>> {
    samples
        .iter()
        .map(|s| {
            let p = pred_path(dir, &s.id);
            if !p.is_file() {
                return Err(CliError::data(format!("missing prediction {}", p.display())));
            }
            let m = AlphaMask::load_png(&p)?;
            if m.dims() != s.dims() {
                return Err(stagematte::Error::dims(s.dims(), m.dims()).into());
            }
            Ok((s.id.clone(), m))
        })
        .collect()
}

fn cmd_export_review(
    ctx: &Ctx,
    split: &str,
    pred: Option<&Path>,
    checkpoint: Option<&Path>,
    out: &Path,
    force: bool,
) -> CliResult<()> {
    let role = parse_split(split)?;
    let ws = ctx.open()?;
    let samples = ws.load_role(role)?;
    for s in &samples {
        refuse_existing(&pred_path(out, &s.id), force)?;
    }
    let preds = match (pred, checkpoint) {
        (Some(dir), _) => load_predictions(dir, &samples)?,
        (None, Some(ck)) => predict_all(&load_checkpoint(ck)?, &samples)?,
        (None, None) => return Err(CliError::usage("export-review needs --pred or --checkpoint")),
    };
    ensure_dir(out)?;
    for s in &samples {
        review_panel(&s.image, &preds[&s.id], &s.background)?.save_png(pred_path(out, &s.id))?;
    }
    println!("wrote {} review panels to {}", samples.len(), out.display());
    Ok(())
}

fn ground_truths(samples: &[Sample]) -> CliResult<BTreeMap<String, AlphaMask>> {
    samples
        .iter()
        .map(|s| match &s.alpha {
            Some(g) => Ok((s.id.clone(), g.clone())),
            None => Err(CliError::data(format!("record `{}` has no ground-truth alpha", s.id))),
        })
        .collect()
}

fn write_report(out: Option<&Path>, json: String) -> CliResult<()> {
    match out {
        Some(p) => write_text(p, &(json + "\n")),
        None => Ok(()),
    }
}

fn cmd_eval(ctx: &Ctx, pred: &Path, split: &str, band: Option<usize>, out: Option<&Path>, force: bool) -> CliResult<()> {
    if let Some(p) = out {
        refuse_existing(p, force)?;
    }
    let role = parse_split(split)?;
    let ws = ctx.open()?;
    let samples = ws.load_role(role)?;
    let gts = ground_truths(&samples)?;
    let preds = load_predictions(pred, &samples)?;
    let regions = match band {
        Some(r) => Some(
            gts.iter()
                .map(|(id, g)| Ok((id.clone(), trimap_from_alpha(g, r)?.unknown_region())))
                .collect::<CliResult<BTreeMap<_, _>>>()?,
        ),
        None => None,
    };
    let report = evaluate_dataset(&preds, &gts, regions.as_ref())?;
    print!("{}", report.render_table());
    write_report(out, serde_json::to_string_pretty(&report).expect("report serializes"))
}

fn cmd_qc(ctx: &Ctx, pred: &Path, split: &str, band: Option<usize>, out: Option<&Path>, force: bool) -> CliResult<()> {
    if let Some(p) = out {
        refuse_existing(p, force)?;
    }
    let role = parse_split(split)?;
    let ws = ctx.open()?;
    let samples = ws.load_role(role)?;
    let band = band.unwrap_or(ctx.cfg.qc.band_radius);
    let preds = load_predictions(pred, &samples)?;
    let (trimaps, supervisors) = supervise_samples(&samples, band, &ctx.cfg.qc.solver)?;
    let report = qc_validate(&preds, &supervisors, &trimaps, ctx.cfg.qc.thresholds, band)?;
    print!("{}", report.render_table());
    write_report(out, report.to_json())
}

fn cmd_ratio_sweep(
    ctx: &Ctx,
    checkpoint: &Path,
    values: &[f64],
    out: &Path,
    iterations: Option<usize>,
    force: bool,
) -> CliResult<()> {
    if values.is_empty() {
        return Err(CliError::usage("--values needs at least one ratio"));
    }
    let ck_path = |v: f64| out.join(format!("ratio-{v}.ckpt"));
    let table_path = out.join("ratio_sweep.txt");
    let json_path = out.join("ratio_sweep.json");
    for &v in values {
        refuse_existing(&ck_path(v), force)?;
        refuse_existing(&log_path(&ck_path(v)), force)?;
    }
    refuse_existing(&table_path, force)?;
    refuse_existing(&json_path, force)?;
    let ws = ctx.open()?;
    let base = ws.load_role(Role::Base)?;
    let scribbled = scribbled_samples(&ws)?;
    let val = ws.load_role(Role::Validation)?;
    let start = load_checkpoint(checkpoint)?;
    ensure_dir(out)?;

    let mut rows: Vec<ScoreRow> = vec![evaluate(&start, &val, None)?.row("initial")];
    for &v in values {
        let mut cfg = ctx.cfg.train.finetune_teacher.clone();
        cfg.base_fraction = v;
        if let Some(n) = iterations {
            cfg.iterations = n;
        }
        let (ck, log) = finetune_teacher(start.clone(), &base, &scribbled, &cfg)?;
        ck.save(ck_path(v))?;
        write_text(&log_path(&ck_path(v)), &render_log(&log))?;
        let report: MetricReport = evaluate(&ck, &val, None)?;
        rows.push(report.row(&format!("base_fraction={v}")));
        eprintln!("base_fraction {v}: validation MSE {:.6}", report.mse);
    }
    let table = render_table(&rows);
    print!("{table}");
    write_text(&table_path, &table)?;
    write_text(
        &json_path,
        &(serde_json::to_string_pretty(&rows).expect("rows serialize") + "\n"),
    )
}

fn cmd_serve(
    ctx: &Ctx,
    manifest: Option<PathBuf>,
    port: Option<u16>,
    host: &str,
    pred: Option<PathBuf>,
    static_dir: Option<PathBuf>,
) -> CliResult<()> {
    let root = match manifest {
        Some(m) => {
            if m.file_name().is_some_and(|n| n != MANIFEST_FILE) {
                return Err(CliError::usage(format!("--manifest must point at a {MANIFEST_FILE} file")));
            }
            m.parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."))
        }
        None => ctx.workspace.clone(),
    };
    let ws = Ctx {
        cfg: ctx.cfg.clone(),
        workspace: root,
    }
    .open()?;
    let static_dir = static_dir.or_else(|| ctx.cfg.server.static_dir.clone());
    if let Some(d) = &static_dir {
        if !d.is_dir() {
            return Err(CliError::data(format!("static directory {} does not exist", d.display())));
        }
    }
    let state = AppState::new(ws, pred, static_dir.clone());
    let port = port.unwrap_or(ctx.cfg.server.port);
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::data(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| CliError::data(format!("cannot bind {host}:{port}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| CliError::data(e.to_string()))?;
        println!("serving on http://{addr}");
        server::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| CliError::data(e.to_string()))
    })
}
