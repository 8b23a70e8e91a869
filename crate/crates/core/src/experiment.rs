//! The experiment matrix: run specs, per-cell scheduling with resume markers,
//! and the stage commands the CLI exposes.
//!
//! Output directory layout:
//!
//! ```text
//! manifest.txt            effective config, seeds, fixed design choices
//! models/oracle-run{r}.bin
//! models/surrogate-run{r}-size{n}-beta{b}.bin
//! cells/...               per-cell rows and completion markers
//! oracle_accuracy.csv     weight_mse.csv     attack.csv
//! mse_vs_size.csv  rel_acc_vs_eps.csv  transfer_vs_size.csv  metadata.txt
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;

use crate::attack::{accuracy, combine, whitebox_rel_acc};
use crate::dataset::{check_mnist_dir, load_mnist, sample_subset, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::extraction::{
    query_phase_noisy, train_oracle, train_surrogate, write_query_log, SurrogateInit, TrainConfig,
};
use crate::network::{layer_mse, MlpModel};
use crate::numerics::{derive_seed, SeededRng};
use crate::power::{write_power_trace, LeakageNoise};
use crate::report::{self, ATTACK_RESULTS_HEADER, MSE_RESULTS_HEADER};

pub const DEFAULT_EPSILONS: [f64; 10] = [0.0, 0.0001, 0.001, 0.01, 0.05, 0.1, 0.25, 0.5, 0.75, 1.0];
pub const DEFAULT_SIZES: [usize; 7] = [1, 10, 100, 1000, 10000, 30000, 60000];

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const ORACLE_ACCURACY_FILE: &str = "oracle_accuracy.csv";
pub const MSE_RESULTS_FILE: &str = "weight_mse.csv";
pub const ATTACK_RESULTS_FILE: &str = "attack.csv";

const ORACLE_ACCURACY_HEADER: &str = "run_seed,test_accuracy";

/// Everything that defines an experiment. Field names double as config keys.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub subset_sizes: Vec<usize>,
    pub betas: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub n_runs: usize,
    pub base_seed: u64,
    pub oracle_learning_rate: f64,
    pub oracle_epochs: usize,
    pub oracle_batch_size: usize,
    pub surrogate_learning_rate: f64,
    pub surrogate_epochs: usize,
    pub surrogate_init: SurrogateInit,
    pub leakage_noise_std: f64,
    pub workers: usize,
    /// Clip adversarial pixels to [0, 1].
    pub clip: bool,
    /// Test images used for attacks; 0 means the whole test set.
    pub attack_samples: usize,
    /// Subset sizes whose surrogates are attacked; empty means all of them.
    pub attack_sizes: Vec<usize>,
    /// Also write each cell's first-epoch query log and power trace.
    pub export_traces: bool,
}

impl Default for RunSpec {
    fn default() -> Self {
        let oracle = TrainConfig::oracle_default(0);
        let surrogate = TrainConfig::surrogate_default(0, 1.0);
        RunSpec {
            data_dir: PathBuf::from("data/mnist"),
            out_dir: PathBuf::from("results"),
            subset_sizes: DEFAULT_SIZES.to_vec(),
            betas: vec![0.0, 1.0],
            epsilons: DEFAULT_EPSILONS.to_vec(),
            n_runs: 10,
            base_seed: 0,
            oracle_learning_rate: oracle.learning_rate,
            oracle_epochs: oracle.epochs,
            oracle_batch_size: oracle.batch_size,
            surrogate_learning_rate: surrogate.learning_rate,
            surrogate_epochs: surrogate.epochs,
            surrogate_init: surrogate.init,
            leakage_noise_std: 0.0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            clip: true,
            attack_samples: 0,
            attack_sizes: Vec::new(),
            export_traces: false,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value for {key}: {value:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_value(key, v)).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!(
            "bad value for {key}: {other:?} (want true/false)"
        ))),
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// `key = value` lines; `#` starts a comment line; blank lines are ignored.
pub fn parse_config(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got {line:?}",
                n + 1
            ))
        })?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

impl RunSpec {
    pub const KEYS: [&'static str; 19] = [
        "data_dir",
        "out_dir",
        "subset_sizes",
        "betas",
        "epsilons",
        "n_runs",
        "base_seed",
        "oracle_learning_rate",
        "oracle_epochs",
        "oracle_batch_size",
        "surrogate_learning_rate",
        "surrogate_epochs",
        "surrogate_init",
        "leakage_noise_std",
        "workers",
        "clip",
        "attack_samples",
        "attack_sizes",
        "export_traces",
    ];

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value),
            "out_dir" => self.out_dir = PathBuf::from(value),
            "subset_sizes" => self.subset_sizes = parse_list(key, value)?,
            "betas" => self.betas = parse_list(key, value)?,
            "epsilons" => self.epsilons = parse_list(key, value)?,
            "n_runs" => self.n_runs = parse_value(key, value)?,
            "base_seed" => self.base_seed = parse_value(key, value)?,
            "oracle_learning_rate" => self.oracle_learning_rate = parse_value(key, value)?,
            "oracle_epochs" => self.oracle_epochs = parse_value(key, value)?,
            "oracle_batch_size" => self.oracle_batch_size = parse_value(key, value)?,
            "surrogate_learning_rate" => self.surrogate_learning_rate = parse_value(key, value)?,
            "surrogate_epochs" => self.surrogate_epochs = parse_value(key, value)?,
            "surrogate_init" => self.surrogate_init = SurrogateInit::parse(value.trim())?,
            "leakage_noise_std" => self.leakage_noise_std = parse_value(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            "clip" => self.clip = parse_bool(key, value)?,
            "attack_samples" => self.attack_samples = parse_value(key, value)?,
            "attack_sizes" => self.attack_sizes = parse_list(key, value)?,
            "export_traces" => self.export_traces = parse_bool(key, value)?,
            other => {
                return Err(Error::Config(format!(
                    "unknown key {other:?}; known keys: {}",
                    Self::KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Applies a config file's contents on top of `self`.
    pub fn apply_config(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_config(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    pub fn apply_config_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_config(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.subset_sizes.is_empty() || self.betas.is_empty() || self.epsilons.is_empty() {
            return bad("subset_sizes, betas and epsilons must be nonempty".into());
        }
        if self.n_runs == 0 {
            return bad("n_runs must be >= 1".into());
        }
        if self.workers == 0 {
            return bad("workers must be >= 1".into());
        }
        if let Some(s) = self.subset_sizes.iter().find(|&&s| s == 0) {
            return bad(format!("subset sizes must be >= 1, got {s}"));
        }
        if let Some(b) = self.betas.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
            return bad(format!("betas must be finite and >= 0, got {b}"));
        }
        if let Some(e) = self
            .epsilons
            .iter()
            .find(|e| !(**e >= 0.0 && e.is_finite()))
        {
            return bad(format!("epsilons must be finite and >= 0, got {e}"));
        }
        self.oracle_config(0).validate()?;
        self.surrogate_config(0, 0.0).validate()
    }

    /// The spec in config-file form; parsing it back gives an equal spec.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| writeln!(out, "{k} = {v}").unwrap();
        kv("data_dir", self.data_dir.display().to_string());
        kv("out_dir", self.out_dir.display().to_string());
        kv("subset_sizes", join(&self.subset_sizes));
        kv("betas", join(&self.betas));
        kv("epsilons", join(&self.epsilons));
        kv("n_runs", self.n_runs.to_string());
        kv("base_seed", self.base_seed.to_string());
        kv(
            "oracle_learning_rate",
            self.oracle_learning_rate.to_string(),
        );
        kv("oracle_epochs", self.oracle_epochs.to_string());
        kv("oracle_batch_size", self.oracle_batch_size.to_string());
        kv(
            "surrogate_learning_rate",
            self.surrogate_learning_rate.to_string(),
        );
        kv("surrogate_epochs", self.surrogate_epochs.to_string());
        kv("surrogate_init", self.surrogate_init.as_str().to_string());
        kv("leakage_noise_std", self.leakage_noise_std.to_string());
        kv("workers", self.workers.to_string());
        kv("clip", self.clip.to_string());
        kv("attack_samples", self.attack_samples.to_string());
        kv("attack_sizes", join(&self.attack_sizes));
        kv("export_traces", self.export_traces.to_string());
        out
    }

    /// Config text plus seeds and the fixed modelling choices, as comments.
    pub fn manifest_text(&self) -> String {
        let mut out = String::from("# switchleak run manifest; reusable as a config file\n");
        out.push_str(&self.to_config_text());
        out.push_str("\n# seeds\n");
        writeln!(out, "# base_seed {}", self.base_seed).unwrap();
        for (r, s) in self.run_seeds().iter().enumerate() {
            writeln!(out, "# run {r} seed {s}").unwrap();
        }
        out.push_str(
            "# per-run streams: oracle-init, surrogate-init, oracle-order, subset-{size}, query-stream/epoch-{k}\n\
             \n# fixed choices\n\
             # rng = ChaCha8, substreams keyed by SplitMix64 of the tag\n\
             # init = Glorot uniform weights, zero biases\n\
             # hidden backward = sigma(2s)(1 - sigma(2s))\n\
             # surrogate power = sum (a_curr - a_prev) a_curr with a = sigma(2s)\n\
             # oracle targets = hard one-hot labels\n\
             # query pairing = sliding pairs, stream reshuffled every epoch\n\
             # surrogate update = one SGD step per pair\n\
             # fgsm = untargeted, true label, sgn(0) = 0\n\
             # weight mse = all parameters pooled\n",
        );
        out
    }

    pub fn run_seeds(&self) -> Vec<u64> {
        (0..self.n_runs)
            .map(|r| derive_seed(self.base_seed, &format!("run-{r}")))
            .collect()
    }

    pub fn oracle_config(&self, run_seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.oracle_learning_rate,
            epochs: self.oracle_epochs,
            batch_size: self.oracle_batch_size,
            ..TrainConfig::oracle_default(run_seed)
        }
    }

    pub fn surrogate_config(&self, run_seed: u64, beta: f64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.surrogate_learning_rate,
            epochs: self.surrogate_epochs,
            init: self.surrogate_init,
            noise: LeakageNoise {
                std: self.leakage_noise_std,
            },
            ..TrainConfig::surrogate_default(run_seed, beta)
        }
    }

    /// Every (run, size, β) cell, runs outermost.
    pub fn cells(&self) -> Vec<Cell> {
        let seeds = self.run_seeds();
        let mut cells =
            Vec::with_capacity(seeds.len() * self.subset_sizes.len() * self.betas.len());
        for (run, &run_seed) in seeds.iter().enumerate() {
            for &size in &self.subset_sizes {
                for &beta in &self.betas {
                    cells.push(Cell {
                        run,
                        run_seed,
                        size,
                        beta,
                    });
                }
            }
        }
        cells
    }

    pub fn attack_cells(&self) -> Vec<Cell> {
        self.cells()
            .into_iter()
            .filter(|c| self.attack_sizes.is_empty() || self.attack_sizes.contains(&c.size))
            .collect()
    }
}

/// One unit of scheduling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub run: usize,
    pub run_seed: u64,
    pub size: usize,
    pub beta: f64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!("run{}-size{}-beta{}", self.run, self.size, self.beta)
    }

    /// Inverse of the surrogate file naming, `surrogate-{id}.bin`.
    pub fn from_surrogate_path(path: &Path, spec: &RunSpec) -> Result<Cell> {
        let bad = || {
            Error::Argument(format!(
                "{}: surrogate files must be named surrogate-run<r>-size<n>-beta<b>.bin",
                path.display()
            ))
        };
        let stem = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("surrogate-run"))
            .and_then(|n| n.strip_suffix(".bin"))
            .ok_or_else(bad)?;
        let (run, rest) = stem.split_once("-size").ok_or_else(bad)?;
        let (size, beta) = rest.split_once("-beta").ok_or_else(bad)?;
        let run: usize = run.parse().map_err(|_| bad())?;
        let seeds = spec.run_seeds();
        let run_seed = *seeds.get(run).ok_or_else(|| {
            Error::Argument(format!(
                "{}: run {run} is outside n_runs = {}",
                path.display(),
                spec.n_runs
            ))
        })?;
        Ok(Cell {
            run,
            run_seed,
            size: size.parse().map_err(|_| bad())?,
            beta: beta.parse().map_err(|_| bad())?,
        })
    }
}

/// Paths inside an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(out_dir: &Path) -> Self {
        Layout {
            root: std::path::absolute(out_dir).unwrap_or_else(|_| out_dir.to_path_buf()),
        }
    }

    pub fn oracle(&self, run: usize) -> PathBuf {
        self.root
            .join("models")
            .join(format!("oracle-run{run}.bin"))
    }

    pub fn surrogate(&self, cell: &Cell) -> PathBuf {
        self.root
            .join("models")
            .join(format!("surrogate-{}.bin", cell.id()))
    }

    fn cell_file(&self, name: String) -> PathBuf {
        self.root.join("cells").join(name)
    }

    fn oracle_accuracy_row(&self, run: usize) -> PathBuf {
        self.cell_file(format!("oracle-run{run}.accuracy.csv"))
    }

    fn mse_row(&self, cell: &Cell) -> PathBuf {
        self.cell_file(format!("{}.mse.csv", cell.id()))
    }

    fn attack_rows(&self, cell: &Cell) -> PathBuf {
        self.cell_file(format!("{}.attack.csv", cell.id()))
    }

    fn extract_marker(&self, cell: &Cell) -> PathBuf {
        self.cell_file(format!("{}.extract.done", cell.id()))
    }

    fn attack_marker(&self, cell: &Cell) -> PathBuf {
        self.cell_file(format!("{}.attack.done", cell.id()))
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

struct Data {
    train: LabeledDataset,
    test: LabeledDataset,
}

fn load_data(spec: &RunSpec, need_train: bool) -> Result<Data> {
    check_mnist_dir(&spec.data_dir)?;
    let t = Instant::now();
    let test = load_mnist(&spec.data_dir, Split::Test)?;
    let train = if need_train {
        load_mnist(&spec.data_dir, Split::Train)?
    } else {
        test.take(0)
    };
    info!(
        "loaded MNIST from {} ({} train, {} test) in {:.1?}",
        std::path::absolute(&spec.data_dir)
            .unwrap_or_else(|_| spec.data_dir.clone())
            .display(),
        train.len(),
        test.len(),
        t.elapsed()
    );
    Ok(Data { train, test })
}

fn pool(spec: &RunSpec) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", spec.workers)))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn attack_set(spec: &RunSpec, data: &Data) -> LabeledDataset {
    if spec.attack_samples == 0 || spec.attack_samples >= data.test.len() {
        data.test.clone()
    } else {
        data.test.take(spec.attack_samples)
    }
}

/// Runs `work` on every item in the pool; failures are collected per item.
fn run_cells<T: Sync>(
    stage: &'static str,
    items: &[T],
    name: impl Fn(&T) -> String + Sync,
    work: impl Fn(&T) -> Result<()> + Sync,
) -> Result<()> {
    let failed: Vec<String> = items
        .par_iter()
        .filter_map(|item| match work(item) {
            Ok(()) => None,
            Err(e) => {
                let msg = format!("{}: {e}", name(item));
                warn!("{stage} failed for {msg}");
                Some(msg)
            }
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::CellsFailed { stage, failed })
    }
}

fn train_oracles(spec: &RunSpec, layout: &Layout, data: &Data) -> Result<Vec<MlpModel>> {
    let seeds = spec.run_seeds();
    let runs: Vec<usize> = (0..spec.n_runs).collect();
    run_cells(
        "train-oracle",
        &runs,
        |r| format!("oracle run {r}"),
        |&r| {
            let path = layout.oracle(r);
            let row = layout.oracle_accuracy_row(r);
            if path.exists() && row.exists() {
                info!("oracle run {r} already trained at {}", path.display());
                return Ok(());
            }
            let t = Instant::now();
            let trained = train_oracle(&data.train, &spec.oracle_config(seeds[r]))?;
            let acc = accuracy(&trained.model, &data.test);
            trained.model.save(&path)?;
            crate::write_atomic(&row, format!("{},{acc}\n", seeds[r]).as_bytes())?;
            info!(
                "oracle run {r} (seed {}): test accuracy {acc:.4} in {:.1?}, saved {}",
                seeds[r],
                t.elapsed(),
                path.display()
            );
            Ok(())
        },
    )?;
    runs.iter()
        .map(|&r| MlpModel::load(layout.oracle(r)))
        .collect()
}

fn load_oracles(
    spec: &RunSpec,
    layout: &Layout,
    oracle_file: Option<&Path>,
) -> Result<Vec<MlpModel>> {
    if let Some(f) = oracle_file {
        let m = MlpModel::load(f)?;
        info!("using oracle {} for every run", absolute(f).display());
        return Ok(vec![m; spec.n_runs]);
    }
    (0..spec.n_runs)
        .map(|r| {
            let path = layout.oracle(r);
            if !path.exists() {
                return Err(Error::Config(format!(
                    "no oracle for run {r} at {}; run train-oracle first or pass an oracle file",
                    path.display()
                )));
            }
            MlpModel::load(&path)
        })
        .collect()
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

fn extract_cell(
    spec: &RunSpec,
    layout: &Layout,
    data: &Data,
    oracle: &MlpModel,
    cell: &Cell,
) -> Result<()> {
    let marker = layout.extract_marker(cell);
    if marker.exists() {
        info!("cell {} already extracted", cell.id());
        return Ok(());
    }
    let t = Instant::now();
    let mut subset_rng = SeededRng::new(cell.run_seed).substream(&format!("subset-{}", cell.size));
    let subset = sample_subset(&data.train, cell.size, &mut subset_rng)?;
    let cfg = spec.surrogate_config(cell.run_seed, cell.beta);
    let trained = train_surrogate(oracle, &subset, &cfg)?;
    let mse = layer_mse(oracle, &trained.model)?;
    let path = layout.surrogate(cell);
    trained.model.save(&path)?;
    crate::write_atomic(
        &layout.mse_row(cell),
        report::mse_row(cell.run_seed, cell.size, cell.beta, &mse).as_bytes(),
    )?;
    if spec.export_traces && cell.size > 1 {
        let mut rng = SeededRng::new(cell.run_seed)
            .substream("query-stream")
            .substream("epoch-0");
        let log = query_phase_noisy(oracle, &subset, &mut rng, cfg.noise)?;
        write_query_log(
            layout.cell_file(format!("{}.queries.csv", cell.id())),
            cell.run_seed,
            &subset,
            &log,
        )?;
        let trace: Vec<_> = log.records.iter().map(|r| r.power).collect();
        write_power_trace(layout.cell_file(format!("{}.power.txt", cell.id())), &trace)?;
    }
    crate::write_atomic(&marker, b"")?;
    info!(
        "cell {}: weight mse {:.6e} in {:.1?}, saved {}",
        cell.id(),
        mse.pooled,
        t.elapsed(),
        path.display()
    );
    Ok(())
}

fn attack_cells(
    spec: &RunSpec,
    layout: &Layout,
    data: &Data,
    oracles: &[MlpModel],
    cells: &[(Cell, PathBuf)],
) -> Result<()> {
    let test = attack_set(spec, data);
    let mut runs: Vec<usize> = cells
        .iter()
        .filter(|(c, _)| !layout.attack_marker(c).exists())
        .map(|(c, _)| c.run)
        .collect();
    runs.sort_unstable();
    runs.dedup();
    // the white-box column depends only on the run's oracle
    let whitebox: Vec<Option<Vec<f64>>> = (0..oracles.len())
        .map(|r| {
            if !runs.contains(&r) {
                return Ok(None);
            }
            let t = Instant::now();
            let wb = whitebox_rel_acc(&oracles[r], &test, &spec.epsilons, spec.clip)?;
            info!("white-box sweep for run {r} in {:.1?}", t.elapsed());
            Ok(Some(wb))
        })
        .collect::<Result<_>>()?;
    run_cells(
        "attack",
        cells,
        |(c, _)| c.id(),
        |(cell, surrogate_path)| {
            let marker = layout.attack_marker(cell);
            if marker.exists() {
                info!("cell {} already attacked", cell.id());
                return Ok(());
            }
            let t = Instant::now();
            let surrogate = MlpModel::load(surrogate_path)?;
            let wb = whitebox[cell.run]
                .as_ref()
                .expect("white-box column computed for pending runs");
            let rows = combine(
                wb,
                &oracles[cell.run],
                &surrogate,
                &test,
                &spec.epsilons,
                spec.clip,
            )?;
            crate::write_atomic(
                &layout.attack_rows(cell),
                report::attack_rows(cell.run_seed, cell.size, cell.beta, &rows).as_bytes(),
            )?;
            crate::write_atomic(&marker, b"")?;
            info!(
                "cell {}: attacks evaluated in {:.1?}",
                cell.id(),
                t.elapsed()
            );
            Ok(())
        },
    )
}

fn concat_rows(header: &str, parts: impl IntoIterator<Item = PathBuf>) -> Result<String> {
    let mut out = format!("{header}\n");
    for p in parts {
        out.push_str(&read(&p)?);
    }
    Ok(out)
}

fn assemble_oracle_accuracy(spec: &RunSpec, layout: &Layout) -> Result<PathBuf> {
    let text = concat_rows(
        ORACLE_ACCURACY_HEADER,
        (0..spec.n_runs).map(|r| layout.oracle_accuracy_row(r)),
    )?;
    let path = layout.file(ORACLE_ACCURACY_FILE);
    crate::write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

fn assemble_mse(cells: &[Cell], layout: &Layout) -> Result<PathBuf> {
    let text = concat_rows(MSE_RESULTS_HEADER, cells.iter().map(|c| layout.mse_row(c)))?;
    let path = layout.file(MSE_RESULTS_FILE);
    crate::write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

fn assemble_attack(cells: &[Cell], layout: &Layout) -> Result<PathBuf> {
    let text = concat_rows(
        ATTACK_RESULTS_HEADER,
        cells.iter().map(|c| layout.attack_rows(c)),
    )?;
    let path = layout.file(ATTACK_RESULTS_FILE);
    crate::write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

fn prepare(spec: &RunSpec) -> Result<Layout> {
    spec.validate()?;
    Ok(Layout::new(&spec.out_dir))
}

fn write_manifest(spec: &RunSpec, layout: &Layout) -> Result<PathBuf> {
    let path = layout.file(MANIFEST_FILE);
    crate::write_atomic(&path, spec.manifest_text().as_bytes())?;
    info!("manifest written to {}", path.display());
    Ok(path)
}

/// Trains (or reuses) one oracle per run. Returns the model files.
pub fn cmd_train_oracle(spec: &RunSpec) -> Result<Vec<PathBuf>> {
    let layout = prepare(spec)?;
    let data = load_data(spec, true)?;
    pool(spec)?.install(|| train_oracles(spec, &layout, &data))?;
    let acc = assemble_oracle_accuracy(spec, &layout)?;
    info!("oracle accuracies in {}", acc.display());
    Ok((0..spec.n_runs).map(|r| layout.oracle(r)).collect())
}

/// Trains one surrogate per cell. Returns the surrogate files.
///
/// With `oracle_file`, every run extracts that oracle; otherwise each run
/// uses its own oracle from a previous `train-oracle`.
pub fn cmd_extract(spec: &RunSpec, oracle_file: Option<&Path>) -> Result<Vec<PathBuf>> {
    let layout = prepare(spec)?;
    let data = load_data(spec, true)?;
    let oracles = load_oracles(spec, &layout, oracle_file)?;
    let cells = spec.cells();
    info!("{} extraction cells scheduled", cells.len());
    pool(spec)?.install(|| {
        run_cells("extract", &cells, Cell::id, |c| {
            extract_cell(spec, &layout, &data, &oracles[c.run], c)
        })
    })?;
    let mse = assemble_mse(&cells, &layout)?;
    info!("weight MSE rows in {}", mse.display());
    Ok(cells.iter().map(|c| layout.surrogate(c)).collect())
}

/// Attacks surrogates and writes the per-ε table. Returns its path.
///
/// An empty `surrogate_files` means every attack cell of the spec.
pub fn cmd_attack(
    spec: &RunSpec,
    oracle_file: Option<&Path>,
    surrogate_files: &[PathBuf],
) -> Result<PathBuf> {
    let layout = prepare(spec)?;
    let data = load_data(spec, false)?;
    let oracles = load_oracles(spec, &layout, oracle_file)?;
    let jobs: Vec<(Cell, PathBuf)> = if surrogate_files.is_empty() {
        spec.attack_cells()
            .into_iter()
            .map(|c| {
                let p = layout.surrogate(&c);
                (c, p)
            })
            .collect()
    } else {
        surrogate_files
            .iter()
            .map(|p| Ok((Cell::from_surrogate_path(p, spec)?, p.clone())))
            .collect::<Result<_>>()?
    };
    if let Some((c, p)) = jobs.iter().find(|(_, p)| !p.exists()) {
        return Err(Error::Config(format!(
            "surrogate for cell {} not found at {}; run extract first",
            c.id(),
            p.display()
        )));
    }
    pool(spec)?.install(|| attack_cells(spec, &layout, &data, &oracles, &jobs))?;
    let mut cells: Vec<Cell> = jobs.into_iter().map(|(c, _)| c).collect();
    cells.sort_by(|a, b| {
        (a.run, a.size)
            .cmp(&(b.run, b.size))
            .then(a.beta.total_cmp(&b.beta))
    });
    cells.dedup();
    let path = assemble_attack(&cells, &layout)?;
    info!("attack results in {}", path.display());
    Ok(path)
}

/// Re-aggregates `weight_mse.csv` and `attack.csv` into the summary tables.
pub fn cmd_report(spec: &RunSpec) -> Result<Vec<PathBuf>> {
    let layout = prepare(spec)?;
    let mse = read(&layout.file(MSE_RESULTS_FILE))?;
    let attack_path = layout.file(ATTACK_RESULTS_FILE);
    let attack = if attack_path.exists() {
        read(&attack_path)?
    } else {
        format!("{ATTACK_RESULTS_HEADER}\n")
    };
    let results = report::parse_results(&mse, &attack)?;
    let agg = report::aggregate(&results);
    let files = report::emit_tables(&agg, &layout.root, &spec.manifest_text())?;
    for f in &files {
        info!("wrote {}", f.display());
    }
    Ok(files)
}

/// Oracle training, extraction, attacks and aggregation in one go.
pub fn cmd_full(spec: &RunSpec) -> Result<Vec<PathBuf>> {
    let layout = prepare(spec)?;
    let data = load_data(spec, true)?;
    let pool = pool(spec)?;
    let cells = spec.cells();
    let attack_jobs: Vec<(Cell, PathBuf)> = spec
        .attack_cells()
        .into_iter()
        .map(|c| {
            let p = layout.surrogate(&c);
            (c, p)
        })
        .collect();
    info!(
        "full run into {}: {} runs, {} extraction cells, {} attack cells",
        layout.root.display(),
        spec.n_runs,
        cells.len(),
        attack_jobs.len()
    );
    let manifest = write_manifest(spec, &layout)?;
    pool.install(|| -> Result<()> {
        let oracles = train_oracles(spec, &layout, &data)?;
        run_cells("extract", &cells, Cell::id, |c| {
            extract_cell(spec, &layout, &data, &oracles[c.run], c)
        })?;
        attack_cells(spec, &layout, &data, &oracles, &attack_jobs)
    })?;
    let mut files = vec![
        manifest,
        assemble_oracle_accuracy(spec, &layout)?,
        assemble_mse(&cells, &layout)?,
        assemble_attack(&spec.attack_cells(), &layout)?,
    ];
    files.extend(cmd_report(spec)?);
    Ok(files)
}
