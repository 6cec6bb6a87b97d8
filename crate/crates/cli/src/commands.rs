use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use moctefuse::checkpoint::{read_header, Checkpoint, ModelKind};
use moctefuse::data::{self, list_images, load_image, save_fused, save_image, Image, ImagePair};
use moctefuse::fusion::{init_fusion_params, moctefuse_forward, FusionConfig, FusionNet};
use moctefuse::gate::{init_gate_params, GateConfig};
use moctefuse::losses::LossTerms;
use moctefuse::metrics::{evaluate_all, MetricReport};
use moctefuse::par;
use moctefuse::params::ParamStore;
use moctefuse::synth::{fusion_pairs, gate_corpus};
use moctefuse::trainer::{
    gate_accuracy, gate_probs, train_fuse as run_fuse, train_gate as run_gate, EpochSummary, FuseOptions, GateRef,
    LabelledImage, TrainState,
};
use moctefuse::verify::run_scope;
use moctefuse::Error;

use crate::config::{Settings, SEED_ENV};
use crate::exit::{CliError, INPUT};
use crate::{EvaluateArgs, FuseArgs, GradcheckArgs, InspectArgs, SynthArgs, TrainCommon, TrainFuseArgs, TrainGateArgs};

fn settings(c: &TrainCommon, section: &str) -> Result<Settings, CliError> {
    let mut s = Settings::load(c.config.as_deref())?;
    let flags = [
        ("epochs", c.epochs.map(|v| v.to_string())),
        ("batch_size", c.batch_size.map(|v| v.to_string())),
        ("lr", c.lr.map(|v| v.to_string())),
        ("warmup_epochs", c.warmup_epochs.map(|v| v.to_string())),
        ("seed", c.seed.map(|v| v.to_string())),
    ];
    for (key, v) in flags {
        if let Some(v) = v {
            s.set(section, key, &v)?;
        }
    }
    for a in &c.set {
        s.set_assignment(a)?;
    }
    Ok(s)
}

fn default_seed() -> Result<u64, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| CliError::input(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn log_path(c: &TrainCommon) -> PathBuf {
    c.log.clone().unwrap_or_else(|| c.out.with_extension("log.csv"))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).map_err(|e| CliError::input(format!("cannot create {}: {e}", p.display())))
        }
        _ => Ok(()),
    }
}

/// CSV log that appends when resuming onto an existing file.
fn open_log(path: &Path, header: &[&str], resume: bool) -> Result<csv::Writer<fs::File>, CliError> {
    ensure_parent(path)?;
    let append = resume && path.exists();
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)
        .map_err(|e| CliError::input(format!("cannot open log {}: {e}", path.display())))?;
    let mut w = csv::Writer::from_writer(file);
    if !append {
        w.write_record(header)
            .map_err(|e| CliError::input(format!("cannot write log {}: {e}", path.display())))?;
    }
    Ok(w)
}

fn print_epoch(total: usize, s: &EpochSummary) {
    let acc = s.accuracy.map(|a| format!("  acc {a:.3}")).unwrap_or_default();
    println!(
        "epoch {:>3}/{total}  loss {:.6}{acc}  lr {:.3e}  {:.1}s",
        s.epoch, s.mean_loss, s.lr, s.elapsed_secs
    );
}

/// Initial state, or the state stored in `resume` after checking it matches
/// the configured model.
fn initial_state<C: serde::Serialize + for<'de> serde::Deserialize<'de> + PartialEq + std::fmt::Debug>(
    kind: ModelKind,
    cfg: &C,
    fresh: ParamStore,
    resume: Option<&Path>,
) -> Result<TrainState, CliError> {
    let Some(path) = resume else {
        return Ok(TrainState::fresh(fresh));
    };
    let ck = Checkpoint::load_expecting(path, kind, &fresh).map_err(CliError::from_checkpoint)?;
    let stored: C = ck.config_as().map_err(CliError::from_checkpoint)?;
    if &stored != cfg {
        return Err(CliError::checkpoint(format!(
            "{} was trained with {stored:?}, but the settings give {cfg:?}",
            path.display()
        )));
    }
    let adam = ck
        .optimizer
        .ok_or_else(|| CliError::checkpoint(format!("{} has no optimizer state to resume from", path.display())))?;
    println!("resuming from {} at epoch {}, step {}", path.display(), ck.epoch, ck.step);
    Ok(TrainState {
        params: ck.params,
        adam,
        step: ck.step,
        epoch: ck.epoch,
    })
}

fn save_state<C: serde::Serialize>(kind: ModelKind, cfg: &C, st: &TrainState, out: &Path) -> Result<(), CliError> {
    let mut ck = Checkpoint::new(kind, cfg, st.params.clone())?;
    ck.step = st.step;
    ck.epoch = st.epoch;
    ck.optimizer = Some(st.adam.clone());
    ck.save(out).map_err(CliError::from_checkpoint)
}

fn labelled_images(root: &Path) -> Result<Vec<LabelledImage>, CliError> {
    let entries = data::discover(root, false)?;
    if entries.is_empty() {
        return Err(CliError::input(format!("no images under {}", root.join("vi").display())));
    }
    entries
        .into_iter()
        .map(|e| {
            let label = e.label.ok_or_else(|| Error::Ingestion {
                id: e.id.clone(),
                reason: "no illumination label: end the file name in D (day) or N (night), \
                         or list the id in labels.csv"
                    .into(),
            })?;
            Ok(LabelledImage {
                image: load_image(&e.vi)?,
                id: e.id,
                label,
            })
        })
        .collect::<moctefuse::Result<_>>()
        .map_err(CliError::from)
}

pub fn train_gate(a: &TrainGateArgs) -> Result<(), CliError> {
    let c = &a.common;
    let s = settings(c, "train_gate")?;
    let cfg = s.gate()?;
    let tc = s.train("train_gate")?;
    let images = labelled_images(&c.data)?;
    let heldout = a.heldout.as_deref().map(labelled_images).transpose()?;
    let fresh = init_gate_params(&cfg, tc.seed)?;
    let mut st = initial_state(ModelKind::Gate, &cfg, fresh, c.resume.as_deref())?;
    println!(
        "gate: {} images, {} parameters, {} epochs",
        images.len(),
        st.params.weight_count(),
        tc.epochs
    );

    let log = log_path(c);
    let mut w = open_log(&log, &["epoch", "mean_loss", "accuracy", "lr", "elapsed_secs"], c.resume.is_some())?;
    let mut log_err = None;
    let result = run_gate(&mut st, &cfg, &images, &tc, &mut |e| {
        print_epoch(tc.epochs, e);
        let row = [
            e.epoch.to_string(),
            e.mean_loss.to_string(),
            e.accuracy.unwrap_or(f64::NAN).to_string(),
            e.lr.to_string(),
            format!("{:.3}", e.elapsed_secs),
        ];
        if let Err(err) = w.write_record(&row).and_then(|_| w.flush().map_err(Into::into)) {
            log_err.get_or_insert(err);
        }
    });
    finish_training(ModelKind::Gate, &cfg, &st, &c.out, result.map(|_| ()))?;
    if let Some(e) = log_err {
        return Err(CliError::input(format!("cannot write log {}: {e}", log.display())));
    }
    if let Some(h) = heldout {
        let acc = gate_accuracy(&st.params, &cfg, &h)?;
        println!("held-out accuracy {acc:.4} ({} images)", h.len());
    }
    Ok(())
}

/// Saves the final state, or the last good state after a numerical abort.
fn finish_training<C: serde::Serialize>(
    kind: ModelKind,
    cfg: &C,
    st: &TrainState,
    out: &Path,
    result: moctefuse::Result<()>,
) -> Result<(), CliError> {
    match result {
        Ok(()) => {
            save_state(kind, cfg, st, out)?;
            println!("wrote {} (step {}, epoch {})", out.display(), st.step, st.epoch);
            Ok(())
        }
        Err(e @ (Error::NumericalAbort { .. } | Error::NonFiniteGradient { .. })) => {
            save_state(kind, cfg, st, out)?;
            eprintln!("last good state (step {}) saved to {}", st.step, out.display());
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

/// Gate checkpoint with its configuration.
fn load_gate(path: &Path) -> Result<(GateConfig, ParamStore), CliError> {
    let ck = Checkpoint::load(path).map_err(CliError::from_checkpoint)?;
    let cfg: GateConfig = ck.config_as().map_err(CliError::from_checkpoint)?;
    cfg.validate().map_err(CliError::from_checkpoint)?;
    ck.expect(ModelKind::Gate, &init_gate_params(&cfg, 0)?)
        .map_err(CliError::from_checkpoint)?;
    Ok((cfg, ck.params))
}

fn load_fusion(path: &Path) -> Result<(FusionConfig, ParamStore), CliError> {
    let ck = Checkpoint::load(path).map_err(CliError::from_checkpoint)?;
    let cfg: FusionConfig = ck.config_as().map_err(CliError::from_checkpoint)?;
    cfg.validate().map_err(CliError::from_checkpoint)?;
    ck.expect(ModelKind::Fusion, &init_fusion_params(&cfg, 0)?)
        .map_err(CliError::from_checkpoint)?;
    Ok((cfg, ck.params))
}

pub fn train_fuse(a: &TrainFuseArgs) -> Result<(), CliError> {
    let c = &a.common;
    let mut s = settings(c, "train_fuse")?;
    if let Some(v) = a.crop_size {
        s.set("train_fuse", "crop_size", &v.to_string())?;
    }
    let cfg = s.fusion()?;
    let tc = s.train("train_fuse")?;
    let weights = s.loss()?;
    let (gcfg, gparams) = load_gate(&a.gate)?;
    let pairs = data::load_dataset(&c.data)?;
    if pairs.is_empty() {
        return Err(CliError::input(format!("no infrared/visible pairs under {}", c.data.display())));
    }
    let fresh = init_fusion_params(&cfg, tc.seed)?;
    let mut st = initial_state(ModelKind::Fusion, &cfg, fresh, c.resume.as_deref())?;
    println!(
        "fusion: {} pairs, {} parameters, {} epochs, crop {}",
        pairs.len(),
        st.params.weight_count(),
        tc.epochs,
        tc.crop_size
    );

    let log = log_path(c);
    let mut w = open_log(&log, &LossTerms::CSV_HEADER, c.resume.is_some())?;
    let mut log_err = None;
    let mut on_step = |step: u64, t: &LossTerms| {
        if let Err(e) = w.write_record(t.csv_record(step as usize)) {
            log_err.get_or_insert(e);
        }
    };
    let opts = FuseOptions {
        force_gate: a.force_gate.map(|f| f.high()),
        weights,
        on_step: Some(&mut on_step),
        stop_after: None,
    };
    let gate = GateRef {
        params: &gparams,
        cfg: &gcfg,
    };
    let result = run_fuse(&mut st, &cfg, &gate, &pairs, &tc, opts, &mut |e| print_epoch(tc.epochs, e));
    let flushed = w.flush();
    finish_training(ModelKind::Fusion, &cfg, &st, &c.out, result.map(|_| ()))?;
    match (log_err, flushed) {
        (Some(e), _) => Err(CliError::input(format!("cannot write log {}: {e}", log.display()))),
        (None, Err(e)) => Err(CliError::input(format!("cannot write log {}: {e}", log.display()))),
        _ => Ok(()),
    }
}

/// Matches two directories by file stem; any id present on one side only is
/// an input error.
fn match_dirs(named: &[(&str, &Path)], strip: &[Option<&str>]) -> Result<Vec<(String, Vec<PathBuf>)>, CliError> {
    let mut maps = Vec::new();
    for ((_, dir), suffix) in named.iter().zip(strip) {
        let m = list_images(dir)?;
        maps.push(
            m.into_iter()
                .map(|(stem, p)| {
                    let id = suffix.and_then(|s| stem.strip_suffix(s)).unwrap_or(&stem).to_string();
                    (id, p)
                })
                .collect::<std::collections::BTreeMap<_, _>>(),
        );
    }
    let all: BTreeSet<&String> = maps.iter().flat_map(|m| m.keys()).collect();
    let mut missing = Vec::new();
    let mut out = Vec::new();
    for id in all {
        let found: Vec<Option<&PathBuf>> = maps.iter().map(|m| m.get(id)).collect();
        if found.iter().all(Option::is_some) {
            out.push((id.clone(), found.into_iter().flatten().cloned().collect()));
        } else {
            let lacking: Vec<&str> = named
                .iter()
                .zip(&found)
                .filter(|(_, f)| f.is_none())
                .map(|((n, _), _)| *n)
                .collect();
            missing.push(format!("{id} (no {})", lacking.join(", ")));
        }
    }
    if !missing.is_empty() {
        return Err(CliError::input(format!("unmatched ids: {}", missing.join("; "))));
    }
    if out.is_empty() {
        return Err(CliError::input("no matching images found"));
    }
    Ok(out)
}

fn resolve_pairs(ir: &Path, vi: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>, CliError> {
    match (ir.is_file(), vi.is_file(), ir.is_dir(), vi.is_dir()) {
        (true, true, _, _) => {
            let id = vi
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| CliError::input(format!("bad file name {}", vi.display())))?;
            Ok(vec![(id.to_string(), ir.to_path_buf(), vi.to_path_buf())])
        }
        (_, _, true, true) => Ok(match_dirs(&[("ir", ir), ("vi", vi)], &[None, None])?
            .into_iter()
            .map(|(id, mut p)| {
                let v = p.pop().expect("two paths");
                let i = p.pop().expect("two paths");
                (id, i, v)
            })
            .collect()),
        _ => Err(CliError::input(format!(
            "--ir {} and --vi {} must both be existing files or both directories",
            ir.display(),
            vi.display()
        ))),
    }
}

pub fn fuse(a: &FuseArgs) -> Result<(), CliError> {
    let (gcfg, gparams) = load_gate(&a.gate)?;
    let (fcfg, fparams) = load_fusion(&a.model)?;
    let pairs = resolve_pairs(&a.ir, &a.vi)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::input(format!("cannot create {}: {e}", a.out.display())))?;
    let gate = GateRef {
        params: &gparams,
        cfg: &gcfg,
    };
    let force = a.force_gate.map(|f| f.high());
    // Pairs run one after another; each forward parallelizes internally.
    for (id, ir_path, vi_path) in &pairs {
        let pair = ImagePair::new(id.clone(), load_image(ir_path)?, load_image(vi_path)?, None)?;
        let g = gate_probs(&gate, &pair.vi, force)?;
        let net = FusionNet::new(&fcfg, fparams.bind(false));
        let out = moctefuse_forward(&net, &pair.ir.to_tensor_hw()?, &pair.vi_luma.to_tensor_hw()?, g)?;
        let clamped: Vec<f64> = out.i_f.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let fused = Image::gray(pair.height(), pair.width(), clamped)?;
        let path = a.out.join(format!("{id}_fused.png"));
        save_fused(&fused, &pair.vi, &path)?;
        println!("{id}  P_H={:.6}  -> {}", g.p_h, path.display());
    }
    Ok(())
}

fn report_paths(out: &Path) -> (PathBuf, PathBuf) {
    let base = match out.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("csv") => out.with_extension(""),
        _ => out.to_path_buf(),
    };
    let mut json = base.clone().into_os_string();
    json.push(".json");
    let mut csv = base.into_os_string();
    csv.push(".csv");
    (json.into(), csv.into())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<(), CliError> {
    let matched = match_dirs(
        &[("ir", &a.ir), ("vi", &a.vi), ("fused", &a.fused)],
        &[None, None, Some("_fused")],
    )?;
    let items = matched
        .into_iter()
        .map(|(id, p)| {
            let ir = load_image(&p[0])?.luma();
            let vi = load_image(&p[1])?.luma();
            let f = load_image(&p[2])?.luma();
            Ok((id, f, ir, vi))
        })
        .collect::<moctefuse::Result<Vec<_>>>()?;
    let report = evaluate_all(&items)?;
    let (json_path, csv_path) = report_paths(&a.out);
    write_report(&report, &json_path, &csv_path)?;
    println!("{:<8} {:>12} {:>12}", "metric", "mean", "std");
    for (name, m, s) in [
        ("EN", report.mean.en, report.std.en),
        ("SD", report.mean.sd, report.std.sd),
        ("MI", report.mean.mi, report.std.mi),
        ("VIF", report.mean.vif, report.std.vif),
    ] {
        println!("{name:<8} {m:>12.4} {s:>12.4}");
    }
    println!("{} images; wrote {} and {}", report.per_image.len(), json_path.display(), csv_path.display());
    Ok(())
}

fn write_report(r: &MetricReport, json: &Path, csv_path: &Path) -> Result<(), CliError> {
    ensure_parent(json)?;
    let io = |p: &Path, e: std::io::Error| CliError::input(format!("cannot write {}: {e}", p.display()));
    fs::write(json, serde_json::to_vec_pretty(r).map_err(|e| CliError::input(e.to_string()))?).map_err(|e| io(json, e))?;
    let mut w = csv::Writer::from_path(csv_path).map_err(|e| CliError::input(format!("{}: {e}", csv_path.display())))?;
    let csv_err = |e: csv::Error| CliError::input(format!("{}: {e}", csv_path.display()));
    w.write_record(["id", "en", "sd", "mi", "vif"]).map_err(csv_err)?;
    for m in &r.per_image {
        let v = &m.values;
        let row = [v.en, v.sd, v.mi, v.vif].map(|x| x.to_string());
        w.write_record(std::iter::once(m.id.as_str()).chain(row.iter().map(String::as_str)))
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| io(csv_path, e))
}

pub fn gradcheck(a: &GradcheckArgs) -> Result<(), CliError> {
    let seed = match a.seed {
        Some(s) => s,
        None => default_seed()?,
    };
    let report = run_scope(a.scope, seed)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).map_err(|e| CliError::input(e.to_string()))?);
    } else {
        for c in &report.checks {
            println!(
                "{}  {:<44} max rel err {:.3e}  (tol {:.0e}, {} coords)",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.max_rel_err,
                c.tolerance,
                c.checked
            );
        }
    }
    report.into_result().map(|_| ()).map_err(CliError::from)
}

pub fn inspect(a: &InspectArgs) -> Result<(), CliError> {
    // Decoding the payload verifies every checksum.
    Checkpoint::load(&a.checkpoint).map_err(CliError::from_checkpoint)?;
    let h = read_header(&a.checkpoint).map_err(CliError::from_checkpoint)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&h).map_err(|e| CliError::checkpoint(e.to_string()))?);
        return Ok(());
    }
    println!("kind      {:?}", h.kind);
    println!("step      {}", h.step);
    println!("epoch     {}", h.epoch);
    println!("optimizer {}", h.has_optimizer);
    println!("config    {}", h.config);
    let total: usize = h
        .manifest
        .iter()
        .filter(|e| !e.name.starts_with("adam."))
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    println!("weights   {total}");
    for e in &h.manifest {
        println!("{:08x}  {:<40} {:?}", e.crc32, e.name, e.shape);
    }
    Ok(())
}

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let seed = match a.seed {
        Some(s) => s,
        None => default_seed()?,
    };
    if a.size == 0 || a.gate_size == 0 {
        return Err(CliError::new(INPUT, "image sizes must be positive"));
    }
    let pairs = fusion_pairs(a.pairs, a.size, seed)?;
    data::write_dataset(&a.out.join("fusion"), &pairs)?;
    let train = gate_corpus(a.gate_per_class, a.gate_per_class, a.gate_size, seed.wrapping_add(1));
    let held = gate_corpus(a.heldout_per_class, a.heldout_per_class, a.gate_size, seed.wrapping_add(2));
    for (dir, set) in [("train", &train), ("heldout", &held)] {
        let root = a.out.join("gate").join(dir).join("vi");
        let written = par::map_items(set, |s| save_image(&s.image, &root.join(format!("{}.png", s.id))));
        written.into_iter().collect::<moctefuse::Result<()>>()?;
    }
    println!(
        "wrote {} fusion pairs ({}x{}), {} gate training and {} held-out images under {}",
        pairs.len(),
        a.size,
        a.size,
        train.len(),
        held.len(),
        a.out.display()
    );
    Ok(())
}
