use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::Serialize;
use snows::netgraph::{Manifest, NetworkGraph};
use snows::oracles::suite::{self, Suite};
use snows::pipeline::data::{Dataset, RecordFormat, SyntheticSpec};
use snows::pipeline::{
    accuracy, checkpoint, layer_losses, layer_task, layers, prune_network_with, PruneConfig, RunOptions,
};
use snows::studies::{self, Bench};
use snows::{zoo, Error, Result, Tensor};

use crate::args::SuiteArg;
use crate::config::*;

/// `{version, seed, command}` next to the resolved `config.json`.
#[derive(Debug, Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    threads: usize,
}

fn start_run<C: Serialize>(out: &Path, command: &str, seed: u64, cfg: &C) -> Result<()> {
    fs::create_dir_all(out)?;
    write_json(&out.join("config.json"), cfg)?;
    write_json(
        &out.join("run.json"),
        &RunInfo {
            command,
            version: crate::VERSION,
            seed,
            threads: rayon::current_num_threads(),
        },
    )
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    checkpoint::write_atomic(path, text.as_bytes())
}

fn csv_file<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    studies::write_csv(rows, BufWriter::new(File::create(path)?))
}

fn output_width(m: &Manifest) -> Result<usize> {
    let shapes = m.infer_shapes()?;
    shapes
        .last()
        .and_then(|s| s.last().copied())
        .ok_or_else(|| Error::Config("manifest has no ops".into()))
}

fn load_data(d: &DataConfig, manifest: &Manifest) -> Result<Dataset> {
    let path = require("data", &d.path)?;
    let fmt = RecordFormat {
        label_bytes: d.label_bytes,
        feature_shape: manifest.input_shape.clone(),
        encoding: d.encoding,
    };
    let classes = match d.classes {
        Some(c) => c,
        None => output_width(manifest)?,
    };
    Dataset::from_records(&checkpoint::read_file(path)?, &fmt, classes)
}

fn load_model(manifest: &Option<PathBuf>, ckpt: &Option<PathBuf>) -> Result<(NetworkGraph, std::collections::BTreeMap<String, snows::masks::Mask>)> {
    let m = checkpoint::load_manifest(require("manifest", manifest)?)?;
    checkpoint::load::<f64>(require("checkpoint", ckpt)?, m)
}

fn calibration(data: &Dataset, n: usize, seed: u64) -> Result<Tensor> {
    Ok(data.calibration(n.min(data.len()), seed)?.x)
}

pub fn prune(c: &PruneRun) -> Result<()> {
    let out = require("out", &c.out)?;
    let (dense, _) = load_model(&c.manifest, &c.checkpoint)?;
    let data = load_data(&c.data, dense.manifest())?;
    let calib = calibration(&data, c.calib_n, c.seed)?;
    let mut cfg = PruneConfig::uniform(dense.manifest(), c.mask.clone(), c.k);
    for (w, spec) in &c.layer_masks {
        if !cfg.masks.contains_key(w) {
            return Err(Error::Config(format!("layer_masks names `{w}`, which is not a prunable weight")));
        }
        cfg.masks.insert(w.clone(), spec.clone());
    }
    cfg.method = c.method;
    cfg.newton = c.newton;
    cfg.seed = c.seed;
    cfg.validate(dense.manifest())?;
    start_run(out, "prune", c.seed, c)?;
    let (start, completed) = match &c.resume {
        Some(p) => checkpoint::load::<f64>(p, dense.manifest().clone())?,
        None => (dense.clone(), Default::default()),
    };
    let opts = RunOptions {
        completed,
        partial_checkpoint: Some(out.join("partial.snws")),
    };
    let result = prune_network_with(&start, &cfg, &calib, opts)?;
    checkpoint::save(&out.join("pruned.snws"), &result.graph, &result.masks)?;
    result.write_report(out)?;
    let _ = fs::remove_file(out.join("partial.snws"));
    let r = &result.report;
    println!(
        "pruned {} layers: {} of {} prunable weights zero ({:.2}%)",
        r.layers.len(),
        r.zeros,
        r.prunable_params,
        100.0 * r.sparsity
    );
    for l in &r.layers {
        println!("  {:<24} K={} loss {:.4e} -> {:.4e}", l.name, l.horizon, l.loss_magnitude, l.loss_final);
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    samples: usize,
    accuracy: f64,
    reference_accuracy: Option<f64>,
    /// `accuracy − reference_accuracy`.
    accuracy_delta: Option<f64>,
    k: usize,
    calibration_samples: Option<usize>,
    layers: Vec<snows::pipeline::LayerLoss>,
}

pub fn eval(c: &EvalRun) -> Result<()> {
    let out = require("out", &c.out)?;
    let (graph, _) = load_model(&c.manifest, &c.checkpoint)?;
    let data = load_data(&c.data, graph.manifest())?;
    start_run(out, "eval", c.seed, c)?;
    let acc = accuracy(&graph, &data)?;
    let mut report = EvalReport {
        samples: data.len(),
        accuracy: acc,
        reference_accuracy: None,
        accuracy_delta: None,
        k: c.k,
        calibration_samples: None,
        layers: Vec::new(),
    };
    if let Some(reference) = &c.reference {
        let (dense, _) = checkpoint::load::<f64>(reference, graph.manifest().clone())?;
        let ra = accuracy(&dense, &data)?;
        let calib = calibration(&data, c.calib_n, c.seed)?;
        report.reference_accuracy = Some(ra);
        report.accuracy_delta = Some(acc - ra);
        report.calibration_samples = Some(calib.shape()[0]);
        report.layers = layer_losses(&dense, &graph, &calib, c.k)?;
    }
    write_json(&out.join("eval.json"), &report)?;
    match report.reference_accuracy {
        Some(ra) => println!("accuracy {acc:.4} (reference {ra:.4}, delta {:+.4}) on {} samples", acc - ra, data.len()),
        None => println!("accuracy {acc:.4} on {} samples", data.len()),
    }
    for l in &report.layers {
        println!("  {:<24} K={} loss {:.4e}", l.name, l.horizon, l.loss);
    }
    Ok(())
}

pub fn ablate(c: &AblateRun) -> Result<()> {
    let out = require("out", &c.out)?;
    let study = c
        .study
        .ok_or_else(|| Error::Config("missing required `study` (flag --study)".into()))?;
    start_run(out, "ablate", c.seed, c)?;
    let (graph, calib) = match &c.manifest {
        Some(_) => {
            let (g, _) = load_model(&c.manifest, &c.checkpoint)?;
            let data = load_data(&c.data, g.manifest())?;
            let calib = calibration(&data, c.calib_n, c.seed)?;
            (g, calib)
        }
        None => {
            let Bench {
                dense,
                train,
                train_report,
                ..
            } = c.bench.build()?;
            log::info!("toy CNN trained to {:.3} train accuracy", train_report.train_accuracy);
            let calib = calibration(&train, c.calib_n, c.seed)?;
            (dense, calib)
        }
    };
    let layer = match &c.layer {
        Some(l) => l.clone(),
        None => layers(graph.manifest())
            .first()
            .map(|l| l.name())
            .ok_or_else(|| Error::Config("the network has no prunable layer".into()))?,
    };
    let single = || -> Result<_> {
        let masks = studies::layer_masks(&graph, &layer, &c.mask)?;
        layer_task(&graph, &layer, masks, c.k, &calib)
    };
    match study {
        Study::KSweep => {
            let rows = studies::k_sweep(&graph, &calib, &c.mask, &c.ks, &c.newton, c.seed)?;
            csv_file(&out.join("k_sweep.csv"), &rows)?;
            for r in &rows {
                println!("K={} {:<24} {:.4e} -> {:.4e} ({:.2}s)", r.k, r.layer, r.loss_magnitude, r.loss_final, r.seconds);
            }
        }
        Study::CgIters => {
            let (rows, summary) = studies::cg_iters_sweep(&single()?, &c.cg_iters, &c.newton, c.seed)?;
            csv_file(&out.join("cg_iters_steps.csv"), &rows)?;
            csv_file(&out.join("cg_iters_summary.csv"), &summary)?;
            for s in &summary {
                println!("max_iters {:>5}: loss {:.4e} -> {:.4e}, {} CG iterations, {:.2}s", s.max_iters, s.loss_init, s.loss_final, s.cg_iters, s.seconds);
            }
        }
        Study::SgdVsNewton => {
            let (rows, s) = studies::sgd_vs_newton(&single()?, &c.newton, &c.lrs, &c.sgd, c.seed)?;
            csv_file(&out.join("sgd_vs_newton.csv"), &rows)?;
            write_json(&out.join("sgd_vs_newton.json"), &s)?;
            println!("{layer}: start {:.4e}, Newton {:.4e} after {} steps ({:.2}s)", s.loss_init, s.newton_loss, s.newton_steps, s.newton_seconds);
            for r in &s.sgd {
                println!("  SGD lr {:e}: {}", r.lr, if r.diverged { "diverged".to_string() } else { format!("{:.4e}", r.loss_final) });
            }
        }
        Study::FisherVsNewton => {
            let (rows, s) = studies::fisher_vs_newton(&single()?, &c.newton, c.seed)?;
            csv_file(&out.join("fisher_vs_newton.csv"), &rows)?;
            write_json(&out.join("fisher_vs_newton.json"), &s)?;
            println!(
                "{layer}: start {:.4e}, Newton {:.4e} ({:.2}s), Fisher {:.4e} ({:.2}s)",
                s.loss_init, s.newton_loss, s.newton_seconds, s.fisher_loss, s.fisher_seconds
            );
        }
    }
    Ok(())
}

/// Prints the table; returns whether every check passed.
pub fn oracle(which: SuiteArg, out: Option<&Path>) -> Result<bool> {
    let checks = match which {
        SuiteArg::All => suite::run_all()?,
        s => suite::run(match s {
            SuiteArg::Hvp => Suite::Hvp,
            SuiteArg::Cg => Suite::Cg,
            SuiteArg::K0 => Suite::K0,
            SuiteArg::ToyQuadratic => Suite::ToyQuadratic,
            SuiteArg::Gradients => Suite::Gradients,
            SuiteArg::Invariants => Suite::Invariants,
            SuiteArg::All => unreachable!(),
        })?,
    };
    print!("{}", suite::render_table(&checks));
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} checks, {failed} failed", checks.len());
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("oracle.json"), &checks)?;
    }
    Ok(failed == 0)
}

pub fn gen_data(c: &GenDataRun) -> Result<()> {
    let out = require("out", &c.out)?;
    if c.test_samples > 0 && c.test_out.is_none() {
        return Err(Error::Config("test_samples needs test_out (flag --test-out)".into()));
    }
    let spec = SyntheticSpec {
        samples: c.synthetic.samples + c.test_samples,
        ..c.synthetic.clone()
    };
    let all = spec.generate()?;
    let fmt = RecordFormat {
        label_bytes: 1,
        feature_shape: c.synthetic.feature_shape.clone(),
        encoding: c.encoding,
    };
    match c.test_out.as_deref().filter(|_| c.test_samples > 0) {
        Some(test_out) => {
            let (train, test) = all.split(c.synthetic.samples)?;
            write_records(out, &train, &fmt)?;
            write_records(test_out, &test, &fmt)
        }
        None => write_records(out, &all, &fmt),
    }
}

fn write_records(path: &Path, data: &Dataset, fmt: &RecordFormat) -> Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    checkpoint::write_atomic(path, &data.to_records(fmt)?)?;
    println!("wrote {} records of {} bytes to {}", data.len(), fmt.record_len(), path.display());
    Ok(())
}

pub fn init_model(c: &InitModelRun) -> Result<()> {
    let out = require("out", &c.out)?;
    let manifest = match c.arch {
        Arch::Mlp => {
            let [d] = c.input[..] else {
                return Err(Error::Config(format!("the MLP takes a flat input, got {:?}", c.input)));
            };
            let mut widths = vec![d];
            widths.extend(&c.hidden);
            widths.push(c.classes);
            zoo::mlp(&widths)?
        }
        Arch::Cnn | Arch::Resnet => {
            let [ch, h, w] = c.input[..] else {
                return Err(Error::Config(format!("conv nets take (c, h, w) inputs, got {:?}", c.input)));
            };
            if c.arch == Arch::Cnn {
                zoo::cnn([ch, h, w], c.width, c.classes)?
            } else {
                zoo::resnet([ch, h, w], c.width, c.classes)?
            }
        }
    };
    start_run(out, "init-model", c.seed, c)?;
    let mut graph = zoo::init(&manifest, snows::Rng::substream(c.seed, "init").next_u64())?;
    if let Some(path) = &c.train_data {
        let fmt = RecordFormat {
            label_bytes: c.label_bytes,
            feature_shape: manifest.input_shape.clone(),
            encoding: c.encoding,
        };
        let data = Dataset::from_records(&checkpoint::read_file(path)?, &fmt, c.classes)?;
        let r = zoo::train(&mut graph, &data, &c.train_config())?;
        write_json(&out.join("train.json"), &r)?;
        println!("trained {} epochs: train accuracy {:.4}", r.epoch_loss.len(), r.train_accuracy);
    }
    zoo::export(&graph, out)?;
    println!(
        "wrote manifest.json and dense.snws ({} parameters) to {}",
        studies::param_count(&graph),
        out.display()
    );
    Ok(())
}
