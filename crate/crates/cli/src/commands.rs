//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array4, Axis};
use serde_json::json;
use ultralbm::analysis::gradsuite::{run_check, tolerance, CHECKS};
use ultralbm::analysis::count_flops;
use ultralbm::checkpoint::{load_checkpoint, save_checkpoint};
use ultralbm::data::{generate_synthetic, load_dataset, load_images, split_dataset, write_dataset, write_prediction, Sample};
use ultralbm::network::Model;
use ultralbm::training::{
    distill_train, evaluate, over_seeds, train, write_history_csv, write_history_json, EpochRecord, TrainOutcome,
};
use ultralbm::{Error, Result};

use crate::config::{require, RunConfig};
use crate::Command;

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn set_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn log_epoch(seed: u64, r: &EpochRecord) {
    eprintln!(
        "seed {seed} epoch {:>3} lr {:.2e} loss {:.4} val_loss {:.4} val_iou {:.4} val_dsc {:.4}",
        r.epoch, r.lr, r.train_loss, r.val_loss, r.val_iou, r.val_dsc
    );
}

fn load_split(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let dir = require(&cfg.paths.data_dir, "--data-dir")?;
    let data = load_dataset(dir, Some(cfg.train.image_size))?;
    split_dataset(&data, cfg.data.split, cfg.data.split_seed)
}

/// Runs one training job per seed, writing `seed_<s>/` artifacts and a summary.
fn run_seeds(
    cfg: &RunConfig,
    out: &Path,
    mut job: impl FnMut(&RunConfig, u64) -> Result<TrainOutcome>,
) -> Result<()> {
    cfg.write(out)?;
    let seeds = cfg.seed_list();
    let mut dscs = Vec::new();
    let ious = over_seeds(&seeds, |seed| {
        let mut run_cfg = cfg.clone();
        run_cfg.train.seed = seed;
        run_cfg.seeds = Some(vec![seed]);
        let dir = out.join(format!("seed_{seed}"));
        run_cfg.write(&dir)?;
        let outcome = job(&run_cfg, seed)?;
        save_checkpoint(&dir.join("best.ckpt"), &outcome.best, &outcome.normalization)?;
        write_history_csv(&dir.join("history.csv"), &outcome.history)?;
        write_history_json(&dir.join("history.json"), &outcome)?;
        let best = outcome.history.iter().find(|r| r.epoch == outcome.best_epoch);
        dscs.push(best.map_or(f64::NAN, |r| r.val_dsc));
        Ok(outcome.best_val_iou)
    })?;
    let dsc = ultralbm::training::SeedSummary::new(seeds.clone(), dscs);
    let summary = json!({
        "seeds": seeds,
        "best_val_iou": ious,
        "best_val_dsc": dsc,
    });
    write_json(&out.join("summary.json"), &summary)?;
    println!(
        "val_iou {:.4} ± {:.4}  val_dsc {:.4} ± {:.4}  over {} seed(s); artifacts in {}",
        ious.mean,
        ious.std,
        dsc.mean,
        dsc.std,
        seeds.len(),
        out.display()
    );
    Ok(())
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train {
            config,
            data_dir,
            out_dir,
            model,
            train: targs,
        } => {
            let mut cfg = RunConfig::load(config.config.as_deref())?;
            set_path(&mut cfg.paths.data_dir, data_dir);
            set_path(&mut cfg.paths.out_dir, out_dir);
            model.apply(&mut cfg, "full")?;
            targs.apply(&mut cfg)?;
            let out = cfg.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs/train"));
            let (tr, va) = load_split(&cfg)?;
            let mcfg = cfg.model();
            run_seeds(&cfg, &out, |rc, seed| {
                let mut m = Model::new(&mcfg, seed)?;
                train(&mut m, &tr, &va, &rc.train, |r| log_epoch(seed, r))
            })
        }
        Command::Distill {
            config,
            data_dir,
            out_dir,
            teacher,
            model,
            train: targs,
            distill,
        } => {
            let mut cfg = RunConfig::load(config.config.as_deref())?;
            set_path(&mut cfg.paths.data_dir, data_dir);
            set_path(&mut cfg.paths.out_dir, out_dir);
            set_path(&mut cfg.paths.teacher, teacher);
            model.apply(&mut cfg, "t")?;
            targs.apply(&mut cfg)?;
            distill.apply(&mut cfg)?;
            let out = cfg.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs/distill"));
            let strategy = cfg.distill.strategy();
            let teacher = match strategy {
                Some(_) => Some(load_checkpoint(require(&cfg.paths.teacher, "--teacher")?)?),
                None => None,
            };
            let (tr, va) = load_split(&cfg)?;
            let mcfg = cfg.model();
            run_seeds(&cfg, &out, |rc, seed| {
                let mut m = Model::new(&mcfg, seed)?;
                match (&strategy, &teacher) {
                    (Some(st), Some((t, tn))) => {
                        distill_train(&mut m, t, tn, &tr, &va, &rc.train, st, |r| log_epoch(seed, r))
                    }
                    _ => train(&mut m, &tr, &va, &rc.train, |r| log_epoch(seed, r)),
                }
            })
        }
        Command::Eval {
            config,
            checkpoint,
            data_dir,
            out_dir,
            image_size,
            batch_size,
        } => {
            let mut cfg = RunConfig::load(config.config.as_deref())?;
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            set_path(&mut cfg.paths.data_dir, data_dir);
            set_path(&mut cfg.paths.out_dir, out_dir);
            if let Some(s) = image_size {
                cfg.train.image_size = s;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            cfg.train.validate()?;
            let ckpt = require(&cfg.paths.checkpoint, "--checkpoint")?;
            let (model, norm) = load_checkpoint(ckpt)?;
            cfg.model = Some(model.config.clone());
            let data = load_dataset(require(&cfg.paths.data_dir, "--data-dir")?, Some(cfg.train.image_size))?;
            let (ov, loss) = evaluate(&model, &data, &norm, cfg.train.batch_size)?;
            let report = json!({
                "checkpoint": ckpt,
                "samples": data.len(),
                "iou": ov.iou(),
                "dsc": ov.dsc(),
                "bce_dice": loss,
            });
            if let Some(out) = &cfg.paths.out_dir {
                cfg.write(out)?;
                write_json(&out.join("eval.json"), &report)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Predict {
            config,
            checkpoint,
            data_dir,
            out_dir,
            image_size,
        } => {
            let mut cfg = RunConfig::load(config.config.as_deref())?;
            set_path(&mut cfg.paths.checkpoint, checkpoint);
            set_path(&mut cfg.paths.data_dir, data_dir);
            set_path(&mut cfg.paths.out_dir, out_dir);
            if let Some(s) = image_size {
                cfg.train.image_size = s;
            }
            cfg.train.validate()?;
            let (model, norm) = load_checkpoint(require(&cfg.paths.checkpoint, "--checkpoint")?)?;
            cfg.model = Some(model.config.clone());
            let images = load_images(require(&cfg.paths.data_dir, "--data-dir")?, Some(cfg.train.image_size))?;
            let out = require(&cfg.paths.out_dir, "--out-dir")?.clone();
            cfg.write(&out)?;
            for chunk in images.chunks(cfg.train.batch_size.max(1)) {
                let s = cfg.train.image_size;
                let mut x = Array4::zeros((chunk.len(), 3, s, s));
                for (k, (_, img)) in chunk.iter().enumerate() {
                    x.index_axis_mut(Axis(0), k).assign(&norm.apply(img));
                }
                let p = model.forward(&x)?;
                for (k, (id, _)) in chunk.iter().enumerate() {
                    write_prediction(&out, id, &p.slice(s![k, 0, .., ..]).to_owned())?;
                }
            }
            println!("wrote {} prediction(s) to {}", images.len(), out.display());
            Ok(())
        }
        Command::Analyze {
            config,
            out_dir,
            model,
            analyze,
        } => {
            let mut cfg = RunConfig::load(config.config.as_deref())?;
            set_path(&mut cfg.paths.out_dir, out_dir);
            model.apply(&mut cfg, "full")?;
            analyze.apply(&mut cfg)?;
            let mcfg = cfg.model();
            let a = &cfg.analyze;
            let m = Model::new(&mcfg, 0)?;
            let report = count_flops(&m, [a.batch, mcfg.in_channels, a.input_size, a.input_size], a.convention)?;
            let text = report.to_json()?;
            if let Some(out) = &cfg.paths.out_dir {
                cfg.write(out)?;
                let path = out.join("analyze.json");
                fs::write(&path, &text).map_err(|e| Error::io(&path, e))?;
            }
            eprintln!("{}", report.table());
            println!("{text}");
            Ok(())
        }
        Command::Gendata { config, out_dir, synth } => {
            let mut cfg = RunConfig::load(config.config.as_deref())?;
            set_path(&mut cfg.paths.out_dir, out_dir);
            synth.apply(&mut cfg)?;
            let out = cfg.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("data/synthetic"));
            let samples = generate_synthetic(&cfg.synth)?;
            write_dataset(&out, &samples)?;
            cfg.write(&out)?;
            println!("wrote {} sample(s) to {}", samples.len(), out.display());
            Ok(())
        }
        Command::Gradcheck {
            config,
            out_dir,
            gradcheck,
        } => {
            let mut cfg = RunConfig::load(config.config.as_deref())?;
            set_path(&mut cfg.paths.out_dir, out_dir);
            gradcheck.apply(&mut cfg)?;
            let names: Vec<String> = if cfg.gradcheck.checks.is_empty() {
                CHECKS.iter().map(|s| s.to_string()).collect()
            } else {
                cfg.gradcheck.checks.clone()
            };
            let mut rows = Vec::new();
            let mut failed = Vec::new();
            for name in &names {
                let r = run_check(name, cfg.gradcheck.seed)?;
                let tol = tolerance(name);
                let pass = r.max_rel_error < tol;
                println!(
                    "{name:<20} max_rel_error {:.3e}  tol {tol:.0e}  coords {:>5}  {}",
                    r.max_rel_error,
                    r.checked,
                    if pass { "PASS" } else { "FAIL" }
                );
                if !pass {
                    failed.push(name.clone());
                }
                rows.push(json!({ "check": name, "tolerance": tol, "pass": pass, "report": r }));
            }
            if let Some(out) = &cfg.paths.out_dir {
                cfg.write(out)?;
                write_json(&out.join("gradcheck.json"), &json!(rows))?;
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Contract(format!("gradient check failed: {}", failed.join(", "))))
            }
        }
    }
}
