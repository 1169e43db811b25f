//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use deer_core::data::{Dataset, Geometry, Split};
use deer_core::io::dataset::{is_non_empty, Manifest};
use deer_core::io::{
    load_sinogram, load_split, save_image, write_dataset, Checkpoint, ExperimentConfig,
    JsonlWriter, RunEvent,
};
use deer_core::metrics::{evaluate as score_methods, Method};
use deer_core::model::{BpVariant, Generator};
use deer_core::tensor::gradcheck::{self, certification_suite};
use deer_core::train::{train as run_training, TrainState};
use deer_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::output::{check_overwrite, config_name, resolve_out, write_png, CliError, CliResult};
use crate::{EvaluateArgs, GenDataArgs, GradCheckArgs, ReconstructArgs, RunDir, TrainArgs};

pub const DATA_DIR: &str = "data";
pub const LOG_FILE: &str = "train.jsonl";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

fn load_config(run: &RunDir) -> CliResult<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(&run.config)?;
    let out = resolve_out(
        run.out.as_deref(),
        cfg.out_dir.as_deref(),
        &config_name(&run.config),
    );
    Ok((cfg, out))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

pub fn gen_data(args: GenDataArgs) -> CliResult<ExitCode> {
    let (mut cfg, out) = load_config(&args.run)?;
    if let Some(seed) = args.seed {
        cfg.data.seed = seed;
    }
    cfg.validate()?;
    let geometry = cfg.geometry()?;
    let dir = out.join(DATA_DIR);
    let counts = [
        (Split::Train, cfg.data.train),
        (Split::Val, cfg.data.val),
        (Split::Test, cfg.data.test),
    ];
    eprintln!(
        "simulating {}/{}/{} phantoms at {}px, {} views into {}",
        cfg.data.train,
        cfg.data.val,
        cfg.data.test,
        geometry.n,
        geometry.nv_few,
        dir.display()
    );
    let manifest = write_dataset(&dir, geometry, cfg.data.seed, &counts, args.run.force)?;
    println!("manifest {}", manifest.hash());
    Ok(ExitCode::SUCCESS)
}

fn checkpoint_path(out: &Path, epoch: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR)
        .join(format!("epoch-{epoch:04}.ckpt"))
}

fn load_dataset(dir: &Path, split: Split, expected: &Geometry) -> CliResult<Dataset> {
    let manifest = Manifest::load(dir)?;
    if manifest.geometry != *expected {
        return Err(CliError::Usage(format!(
            "dataset {} has geometry {:?}, config expects {:?}",
            dir.display(),
            manifest.geometry,
            expected
        )));
    }
    Ok(load_split(dir, split)?)
}

pub fn train(args: TrainArgs) -> CliResult<ExitCode> {
    let (mut cfg, out) = load_config(&args.run)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let tc = cfg.train_config()?;
    let hash = cfg.hash();
    let data_dir = args.data.clone().unwrap_or_else(|| out.join(DATA_DIR));
    let geometry = cfg.geometry()?;
    let train_set = load_dataset(&data_dir, Split::Train, &geometry)?;
    let val_set = load_dataset(&data_dir, Split::Val, &geometry)?;
    let log_path = out.join(LOG_FILE);

    let mut state = match &args.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.config_hash != hash {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was written under config {}, current config is {hash}",
                    path.display(),
                    ck.config_hash
                )));
            }
            let state = ck.to_state()?;
            create_dir(&out)?;
            JsonlWriter::append(&log_path)?.write(&RunEvent::Resume {
                epoch: state.epoch,
                checkpoint: path.clone(),
            })?;
            eprintln!(
                "resuming after epoch {} from {}",
                state.epoch,
                path.display()
            );
            state
        }
        None => {
            let ck_dir = out.join(CHECKPOINT_DIR);
            if log_path.exists() || is_non_empty(&ck_dir)? {
                if !args.run.force {
                    return Err(CliError::Usage(format!(
                        "{} already holds a run; pass --resume <checkpoint> or --force",
                        out.display()
                    )));
                }
                let _ = fs::remove_file(&log_path);
                let _ = fs::remove_dir_all(&ck_dir);
                let _ = fs::remove_file(out.join(FINAL_CHECKPOINT));
            }
            create_dir(&out)?;
            write_text(&out.join(RESOLVED_CONFIG), &cfg.to_toml()?)?;
            JsonlWriter::append(&log_path)?.write(&RunEvent::Start {
                config_hash: hash.clone(),
                config: cfg.clone(),
            })?;
            TrainState::new(&tc)?
        }
    };
    create_dir(&out.join(CHECKPOINT_DIR))?;

    let mut log = JsonlWriter::append(&log_path)?;
    let total = tc.total_epochs();
    let keep = args.keep_last;
    run_training(&tc, &train_set, &val_set, &mut state, |state, record| {
        log.write(&RunEvent::Epoch(record.clone()))?;
        let path = checkpoint_path(&out, state.epoch);
        Checkpoint::from_state(&tc, &hash, state).save(&path)?;
        if keep > 0 && state.epoch > keep {
            let _ = fs::remove_file(checkpoint_path(&out, state.epoch - keep));
        }
        eprintln!(
            "epoch {}/{total} {:?} loss {:.5} val {:?} psnr {} ssim {:.4} mae {:.5}",
            state.epoch,
            record.phase,
            record.loss_total,
            record.val_stage,
            record.val_psnr,
            record.val_ssim,
            record.val_mae
        );
        Ok(())
    })?;
    let final_path = out.join(FINAL_CHECKPOINT);
    Checkpoint::from_state(&tc, &hash, &state).save(&final_path)?;
    println!("{}", final_path.display());
    Ok(ExitCode::SUCCESS)
}

fn dense_views_of(path: &Path, explicit: Option<usize>) -> CliResult<Option<usize>> {
    if explicit.is_some() {
        return Ok(explicit);
    }
    let file = deer_core::io::RasterFile::load(path)?;
    let views = file.header.shape.first().copied();
    let meta = |k: &str| {
        file.header
            .meta
            .get(k)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
    };
    // Header counts only apply when they describe this very sinogram.
    Ok(match (meta("nv_few"), meta("nv_dense")) {
        (Some(few), Some(dense)) if Some(few) == views => Some(dense),
        _ => None,
    })
}

pub fn reconstruct(args: ReconstructArgs) -> CliResult<ExitCode> {
    check_overwrite(&args.out, args.force)?;
    if let Some(png) = &args.png {
        check_overwrite(png, args.force)?;
    }
    let ck = Checkpoint::load(&args.checkpoint)?;
    let state = ck.to_state()?;
    let sino = load_sinogram(&args.sinogram)?;
    let dense = dense_views_of(&args.sinogram, args.dense_views)?;
    let rec = state.generator.reconstruct_sinogram(&sino, dense)?;
    save_image(&rec.out, &args.out)?;
    if let Some(png) = &args.png {
        write_png(&rec.out, args.png_window, png)?;
    }
    println!("{}", args.out.display());
    Ok(ExitCode::SUCCESS)
}

fn parse_split(s: &str) -> CliResult<Split> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| CliError::Usage(format!("unknown split `{s}` (train, val or test)")))
}

/// Refuses checkpoints whose geometry cannot consume `data`.
fn check_compatible(gen: &Generator<f32>, data: &Dataset, path: &Path) -> CliResult<()> {
    let m = gen.config();
    let g = data.geometry();
    if m.n != g.n || m.n_det != g.n_det {
        return Err(CliError::Usage(format!(
            "checkpoint {} is {}px with {} detector bins, dataset is {}px with {}",
            path.display(),
            m.n,
            m.n_det,
            g.n,
            g.n_det
        )));
    }
    let view_dependent = gen
        .bp()
        .is_some_and(|bp| bp.variant() == BpVariant::ViewDependent);
    if view_dependent && m.nv_dense != g.nv_dense {
        return Err(Error::ViewMismatch {
            expected: m.nv_dense,
            actual: g.nv_dense,
        }
        .into());
    }
    Ok(())
}

pub fn evaluate(args: EvaluateArgs) -> CliResult<ExitCode> {
    if args.checkpoint.is_empty() {
        return Err(CliError::Usage(
            "at least one --checkpoint is required".into(),
        ));
    }
    let out = resolve_out(args.out.as_deref(), None, "eval");
    let report_json = out.join("report.json");
    check_overwrite(&report_json, args.force)?;
    let split = parse_split(&args.split)?;
    let mut data = load_split(&args.data, split)?;
    if let Some(views) = args.views {
        let g = *data.geometry();
        data = data.reacquire(Geometry {
            nv_few: views,
            nv_dense: 2 * views,
            ..g
        })?;
    }

    let mut loaded = Vec::with_capacity(args.checkpoint.len());
    for path in &args.checkpoint {
        let ck = Checkpoint::load(path)?;
        let state = ck.to_state()?;
        check_compatible(&state.generator, &data, path)?;
        loaded.push((ck.config.ssim, state.generator));
    }
    let ssim = loaded[0].0;
    let mut labels: Vec<String> = Vec::new();
    let mut unique = |base: &str| {
        let mut label = base.to_string();
        let mut k = 2;
        while labels.contains(&label) {
            label = format!("{base}#{k}");
            k += 1;
        }
        labels.push(label.clone());
        label
    };
    let mut methods = vec![Method::fbp_fewview(), Method::fbp_dense()];
    for (_, gen) in &loaded {
        let label = unique(gen.config().variant.label());
        if gen.bp().is_some() {
            methods.push(Method::deer_bp(format!("{label}-BP"), gen));
        }
        methods.push(Method::generator(label, gen));
    }
    let report = score_methods(&methods, &data, &ssim)?;
    create_dir(&out)?;
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Invalid(format!("report: {e}")))?;
    write_text(&report_json, &json)?;
    let table = report.table();
    write_text(&out.join("report.txt"), &table)?;
    println!("{table}");
    Ok(ExitCode::SUCCESS)
}

pub fn grad_check(args: GradCheckArgs) -> CliResult<ExitCode> {
    if args.trials == 0 {
        return Err(CliError::Usage("--trials must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut failed = 0;
    for spec in certification_suite() {
        let err = gradcheck::grad_check(&spec, args.trials, &mut rng)?;
        let ok = err < args.tol;
        failed += usize::from(!ok);
        println!(
            "{:<24} max rel err {err:.3e}  {}",
            spec.name,
            if ok { "pass" } else { "FAIL" }
        );
    }
    if failed > 0 {
        eprintln!("{failed} operator(s) above tolerance {:e}", args.tol);
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}
