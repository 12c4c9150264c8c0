//! Resolved run configurations.
//!
//! Each subcommand has one serializable config. It starts from defaults,
//! is replaced wholesale by `--config FILE` when given (missing fields keep
//! their defaults), and then every flag that was passed overwrites its
//! field. The result is echoed to `config.json` in the output directory
//! and can be fed back through `--config` to replay the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use snows::newton::NewtonConfig;
use snows::pipeline::data::{Encoding, SyntheticSpec};
use snows::pipeline::{MaskSpec, Method};
use snows::studies::{SgdSettings, ToyCnnBench};
use snows::zoo::TrainConfig;
use snows::{Error, Result};

use crate::args::*;

macro_rules! set {
    ($target:expr, $flag:expr) => {
        if let Some(v) = $flag.clone() {
            $target = v.into();
        }
    };
}

fn load<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T> {
    let Some(path) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("config `{}`: {e}", path.display())))
}

pub fn require<'a>(field: &str, v: &'a Option<PathBuf>) -> Result<&'a Path> {
    v.as_deref()
        .ok_or_else(|| Error::Config(format!("missing required `{field}` (flag --{})", field.replace('_', "-"))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub encoding: Encoding,
    pub label_bytes: usize,
    pub classes: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            encoding: Encoding::F32,
            label_bytes: 1,
            classes: None,
        }
    }
}

impl DataConfig {
    fn apply(&mut self, f: &DataFlags) {
        if f.data.is_some() {
            self.path = f.data.clone();
        }
        set!(self.encoding, f.data_encoding);
        set!(self.label_bytes, f.label_bytes);
        if f.classes.is_some() {
            self.classes = f.classes;
        }
    }
}

fn apply_solver(n: &mut NewtonConfig, f: &SolverFlags) {
    set!(n.cg.lambda, f.lambda);
    set!(n.cg.tol, f.cg_tol);
    set!(n.cg.max_iters, f.cg_max_iters);
    set!(n.cg.eps_fd, f.eps_fd);
    set!(n.batch_size, f.batch_size);
    set!(n.max_epochs, f.max_epochs);
    set!(n.lambda_retries, f.lambda_retries);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PruneRun {
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub k: usize,
    /// Mask for every prunable weight not listed in `layer_masks`.
    pub mask: MaskSpec,
    pub layer_masks: BTreeMap<String, MaskSpec>,
    pub method: Method,
    pub newton: NewtonConfig,
    pub calib_n: usize,
    pub seed: u64,
    pub resume: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for PruneRun {
    fn default() -> Self {
        PruneRun {
            manifest: None,
            checkpoint: None,
            data: DataConfig::default(),
            k: 1,
            mask: MaskSpec::NOfM { n: 2, m: 4 },
            layer_masks: BTreeMap::new(),
            method: Method::Snows,
            newton: NewtonConfig::default(),
            calib_n: 1024,
            seed: 0,
            resume: None,
            out: None,
        }
    }
}

impl PruneRun {
    pub fn resolve(a: &PruneArgs) -> Result<Self> {
        let mut c: Self = load(&a.config)?;
        if a.manifest.is_some() {
            c.manifest = a.manifest.clone();
        }
        if a.checkpoint.is_some() {
            c.checkpoint = a.checkpoint.clone();
        }
        c.data.apply(&a.data);
        set!(c.k, a.k);
        set!(c.mask, a.mask);
        set!(c.method, a.method);
        apply_solver(&mut c.newton, &a.solver);
        set!(c.calib_n, a.calib_n);
        set!(c.seed, a.seed);
        if a.resume.is_some() {
            c.resume = a.resume.clone();
        }
        if a.out.is_some() {
            c.out = a.out.clone();
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRun {
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub data: DataConfig,
    pub k: usize,
    pub calib_n: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for EvalRun {
    fn default() -> Self {
        EvalRun {
            manifest: None,
            checkpoint: None,
            reference: None,
            data: DataConfig::default(),
            k: 1,
            calib_n: 1024,
            seed: 0,
            out: None,
        }
    }
}

impl EvalRun {
    pub fn resolve(a: &EvalArgs) -> Result<Self> {
        let mut c: Self = load(&a.config)?;
        if a.manifest.is_some() {
            c.manifest = a.manifest.clone();
        }
        if a.checkpoint.is_some() {
            c.checkpoint = a.checkpoint.clone();
        }
        if a.reference.is_some() {
            c.reference = a.reference.clone();
        }
        c.data.apply(&a.data);
        set!(c.k, a.k);
        set!(c.calib_n, a.calib_n);
        set!(c.seed, a.seed);
        if a.out.is_some() {
            c.out = a.out.clone();
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Study {
    KSweep,
    CgIters,
    SgdVsNewton,
    FisherVsNewton,
}

impl From<StudyArg> for Study {
    fn from(s: StudyArg) -> Self {
        match s {
            StudyArg::KSweep => Study::KSweep,
            StudyArg::CgIters => Study::CgIters,
            StudyArg::SgdVsNewton => Study::SgdVsNewton,
            StudyArg::FisherVsNewton => Study::FisherVsNewton,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateRun {
    pub study: Option<Study>,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    /// Used when no manifest is given.
    pub bench: ToyCnnBench,
    pub layer: Option<String>,
    pub k: usize,
    pub ks: Vec<usize>,
    pub cg_iters: Vec<usize>,
    pub lrs: Vec<f64>,
    pub sgd: SgdSettings,
    pub mask: MaskSpec,
    pub newton: NewtonConfig,
    pub calib_n: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for AblateRun {
    fn default() -> Self {
        AblateRun {
            study: None,
            manifest: None,
            checkpoint: None,
            data: DataConfig::default(),
            bench: ToyCnnBench::default(),
            layer: None,
            k: 3,
            ks: vec![0, 1, 3, 5],
            cg_iters: vec![5, 50, 500],
            lrs: vec![1e-3, 1e-2, 1e-1],
            sgd: SgdSettings::default(),
            mask: MaskSpec::NOfM { n: 2, m: 4 },
            newton: NewtonConfig::default(),
            calib_n: 512,
            seed: 0,
            out: None,
        }
    }
}

impl AblateRun {
    pub fn resolve(a: &AblateArgs) -> Result<Self> {
        let mut c: Self = load(&a.config)?;
        if let Some(s) = a.study {
            c.study = Some(s.into());
        }
        if a.manifest.is_some() {
            c.manifest = a.manifest.clone();
        }
        if a.checkpoint.is_some() {
            c.checkpoint = a.checkpoint.clone();
        }
        c.data.apply(&a.data);
        if a.layer.is_some() {
            c.layer = a.layer.clone();
        }
        set!(c.k, a.k);
        set!(c.ks, a.ks);
        set!(c.cg_iters, a.cg_iters);
        set!(c.lrs, a.lrs);
        set!(c.sgd.steps, a.sgd_steps);
        set!(c.sgd.batch_size, a.sgd_batch_size);
        set!(c.mask, a.mask);
        apply_solver(&mut c.newton, &a.solver);
        set!(c.calib_n, a.calib_n);
        set!(c.seed, a.seed);
        if a.out.is_some() {
            c.out = a.out.clone();
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataRun {
    pub synthetic: SyntheticSpec,
    pub encoding: Encoding,
    pub out: Option<PathBuf>,
    /// Held out from the same draw, so both files share class prototypes.
    pub test_samples: usize,
    pub test_out: Option<PathBuf>,
}

impl Default for GenDataRun {
    fn default() -> Self {
        GenDataRun {
            synthetic: ToyCnnBench::default().data,
            encoding: Encoding::F32,
            out: None,
            test_samples: 0,
            test_out: None,
        }
    }
}

impl GenDataRun {
    pub fn resolve(a: &GenDataArgs) -> Result<Self> {
        let mut c: Self = load(&a.config)?;
        set!(c.synthetic.samples, a.samples);
        set!(c.synthetic.classes, a.classes);
        set!(c.synthetic.feature_shape, a.shape);
        set!(c.synthetic.noise, a.noise);
        set!(c.synthetic.seed, a.seed);
        set!(c.encoding, a.data_encoding);
        set!(c.test_samples, a.test_samples);
        if a.out.is_some() {
            c.out = a.out.clone();
        }
        if a.test_out.is_some() {
            c.test_out = a.test_out.clone();
        }
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Cnn,
    Resnet,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Mlp => Arch::Mlp,
            ArchArg::Cnn => Arch::Cnn,
            ArchArg::Resnet => Arch::Resnet,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitModelRun {
    pub arch: Arch,
    pub input: Vec<usize>,
    pub width: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
    pub train_data: Option<PathBuf>,
    pub encoding: Encoding,
    pub label_bytes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub out: Option<PathBuf>,
}

impl Default for InitModelRun {
    fn default() -> Self {
        let bench = ToyCnnBench::default();
        InitModelRun {
            arch: Arch::Cnn,
            input: bench.data.feature_shape.clone(),
            width: bench.width,
            hidden: vec![64],
            classes: bench.data.classes,
            seed: 0,
            train_data: None,
            encoding: Encoding::F32,
            label_bytes: 1,
            epochs: bench.train.epochs,
            batch_size: bench.train.batch_size,
            lr: bench.train.lr,
            momentum: bench.train.momentum,
            out: None,
        }
    }
}

impl InitModelRun {
    /// Training settings; shuffling draws from the `shuffle` sub-stream of
    /// `seed`.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            momentum: self.momentum,
            seed: snows::Rng::substream(self.seed, "shuffle").next_u64(),
        }
    }

    pub fn resolve(a: &InitModelArgs) -> Result<Self> {
        let mut c: Self = load(&a.config)?;
        set!(c.arch, a.arch);
        set!(c.input, a.input);
        set!(c.width, a.width);
        set!(c.hidden, a.hidden);
        set!(c.classes, a.classes);
        set!(c.seed, a.seed);
        if a.train_data.is_some() {
            c.train_data = a.train_data.clone();
        }
        set!(c.encoding, a.data_encoding);
        set!(c.label_bytes, a.label_bytes);
        set!(c.epochs, a.epochs);
        set!(c.lr, a.lr);
        if a.out.is_some() {
            c.out = a.out.clone();
        }
        Ok(c)
    }
}
