//! Command implementations behind the `tinyformer` binary.
//!
//! Each `cmd_*` function does the work of one verb and writes human-readable
//! output to the given writer, so tests can drive them without a process.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use tinyformer::checkpoint;
use tinyformer::config::{ModelConfig, RunConfig, ABLATION_ROWS};
use tinyformer::data::{read_ppm, write_pgm, Dataset};
use tinyformer::eval::EvalResult;
use tinyformer::flops::{flops_count, FlopsReport};
use tinyformer::gradcheck::suite::{self, CaseReport};
use tinyformer::model::Model;
use tinyformer::tensor::{Shape, Tensor};
use tinyformer::train::{self, activation_gray, feature_maps, EpochLog};
use tinyformer::{Error, ParamStore};

pub const CHECKPOINT_FILE: &str = "model.tfck";
pub const METRICS_FILE: &str = "metrics.log";
pub const ABLATION_FILE: &str = "ablation.txt";

/// Failure classes mapped to exit codes by the binary.
#[derive(Debug)]
pub enum CliError {
    /// Bad input: config, arguments, file contents. Exit code 1.
    Validation(String),
    /// Anything that went wrong while running. Exit code 2.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "invalid input: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::Checkpoint(_) | Error::Format(_) | Error::UnknownName(_) => {
                CliError::Validation(e.to_string())
            }
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Reads a config file (or starts from the defaults) and applies `--seed`.
pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse(&text)?;
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.data.seed = s;
    }
    Ok(cfg)
}

/// Path of the config written next to a checkpoint.
pub fn sidecar(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".config");
    PathBuf::from(s)
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path, w: &mut dyn Write) -> CliResult<()> {
    for (split, n) in [("train", cfg.train_images), ("eval", cfg.eval_images)] {
        let ds = Dataset::generate(&train::split_config(cfg, split), n)?;
        let dir = out.join(split);
        ds.save(&dir)?;
        let objects: usize = ds.targets.iter().map(Vec::len).sum();
        writeln!(w, "{split}: {n} images, {objects} objects -> {}", dir.display())?;
    }
    Ok(())
}

/// Result of [`cmd_train`].
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub logs: Vec<EpochLog>,
    pub final_eval: Option<EvalResult>,
}

/// Trains, appends one line per epoch to `out/metrics.log` and writes the
/// checkpoint with its config sidecar.
pub fn cmd_train(cfg: &RunConfig, out: &Path, w: &mut dyn Write) -> CliResult<TrainArtifacts> {
    let (train_ds, eval_ds) = train::datasets(cfg)?;
    fs::create_dir_all(out)?;
    let mut log = OpenOptions::new().create(true).append(true).open(out.join(METRICS_FILE))?;
    let mut io_err = None;
    let outcome = train::train(cfg, &train_ds, &eval_ds, |l| {
        let r = writeln!(log, "{l}").and_then(|_| log.flush()).and_then(|_| writeln!(w, "{l}"));
        if let Err(e) = r {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let ckpt = out.join(CHECKPOINT_FILE);
    checkpoint::save(&outcome.store, &ckpt)?;
    fs::write(sidecar(&ckpt), cfg.render())?;
    writeln!(w, "checkpoint: {}", ckpt.display())?;
    Ok(TrainArtifacts { checkpoint: ckpt, logs: outcome.logs, final_eval: outcome.final_eval })
}

/// Rebuilds the model described by a checkpoint's sidecar and loads its
/// weights.
pub fn load_model(ckpt: &Path) -> CliResult<(RunConfig, Model, ParamStore)> {
    let side = sidecar(ckpt);
    let text = fs::read_to_string(&side).map_err(|e| CliError::Validation(format!("{}: {e}", side.display())))?;
    let cfg = RunConfig::parse(&text)?;
    let mut store = ParamStore::new();
    let model = Model::new(&mut store, cfg.model, cfg.seed)?;
    let bytes = fs::read(ckpt).map_err(|e| CliError::Validation(format!("{}: {e}", ckpt.display())))?;
    checkpoint::load_into(&mut store, &bytes)?;
    Ok((cfg, model, store))
}

/// Evaluates a checkpoint on `data`, or on the eval split its config names.
pub fn cmd_eval(ckpt: &Path, data: Option<&Path>, w: &mut dyn Write) -> CliResult<EvalResult> {
    let (cfg, model, mut store) = load_model(ckpt)?;
    let ds = match data {
        Some(d) => Dataset::load(d)?,
        None => train::datasets(&cfg)?.1,
    };
    if ds.cfg.extent != cfg.model.image_size {
        return Err(CliError::Validation(format!(
            "dataset extent {} does not match the model's image_size {}",
            ds.cfg.extent, cfg.model.image_size
        )));
    }
    let params = train::eval_params(&cfg, &ds);
    let r = train::evaluate(&model, &mut store, &ds, &params, cfg.score_threshold)?;
    write!(w, "{}", r.table())?;
    write!(w, "{}", r.to_kv())?;
    Ok(r)
}

/// One row of the ablation grid, averaged over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub name: &'static str,
    pub model: ModelConfig,
    /// `(seed, AP, AP_S)` per run.
    pub runs: Vec<(u64, f64, f64)>,
    pub flops: u64,
}

impl AblationResult {
    pub fn mean_ap(&self) -> f64 {
        self.runs.iter().map(|r| r.1).sum::<f64>() / self.runs.len() as f64
    }

    pub fn mean_ap_s(&self) -> f64 {
        self.runs.iter().map(|r| r.2).sum::<f64>() / self.runs.len() as f64
    }
}

pub fn ablation_table(rows: &[AblationResult]) -> String {
    let mut s = format!("{:<10} {:>8} {:>8} {:>12}  per-seed AP / AP_S\n", "row", "AP", "AP_S", "GFLOPs");
    for r in rows {
        let seeds: Vec<String> = r.runs.iter().map(|(sd, a, b)| format!("s{sd}:{a:.4}/{b:.4}")).collect();
        s.push_str(&format!(
            "{:<10} {:>8.4} {:>8.4} {:>12.6}  {}\n",
            r.name,
            r.mean_ap(),
            r.mean_ap_s(),
            2.0 * r.flops as f64 / 1e9,
            seeds.join(" ")
        ));
    }
    s
}

/// Trains every grid row for `cfg.ablate_seeds` consecutive seeds starting
/// at `cfg.seed`. Rows of one seed share the dataset and, through name-based
/// initialization, every parameter they have in common.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path, w: &mut dyn Write) -> CliResult<Vec<AblationResult>> {
    fs::create_dir_all(out)?;
    let mut rows: Vec<AblationResult> = ABLATION_ROWS
        .iter()
        .map(|r| {
            let model = r.apply(&cfg.model);
            AblationResult { name: r.name, model, runs: Vec::new(), flops: flops_count(&model).total_macs() }
        })
        .collect();
    for k in 0..cfg.ablate_seeds as u64 {
        let seed = cfg.seed + k;
        let seeded = RunConfig { seed, ..cfg.clone() };
        let (train_ds, eval_ds) = train::datasets(&seeded)?;
        for row in rows.iter_mut() {
            let run = RunConfig { model: row.model, ..seeded.clone() };
            run.validate()?;
            let tag = format!("{}.seed{seed}", row.name.trim_start_matches('+').replace('+', "_"));
            let mut log = OpenOptions::new().create(true).append(true).open(out.join(format!("{tag}.log")))?;
            let outcome = train::train(&run, &train_ds, &eval_ds, |l| {
                let _ = writeln!(log, "{l}");
            })?;
            let r = outcome
                .final_eval
                .ok_or_else(|| CliError::Validation("ablation needs epochs >= 1 and a non-empty eval set".into()))?;
            writeln!(w, "{} seed={seed} ap={:.6} ap_s={:.6}", row.name, r.ap, r.ap_s)?;
            row.runs.push((seed, r.ap, r.ap_s));
        }
    }
    let table = ablation_table(&rows);
    fs::write(out.join(ABLATION_FILE), &table)?;
    write!(w, "{table}")?;
    Ok(rows)
}

pub fn cmd_flops(cfg: &RunConfig, w: &mut dyn Write) -> CliResult<FlopsReport> {
    let r = flops_count(&cfg.model);
    write!(w, "{}", r.table())?;
    Ok(r)
}

/// Runs the gradient-check suite; fails when any case exceeds the tolerance.
pub fn cmd_gradcheck(filter: Option<&str>, w: &mut dyn Write) -> CliResult<Vec<CaseReport>> {
    let reports = suite::run(filter)?;
    let mut failed = 0;
    for r in &reports {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        writeln!(w, "{:<24} trials={} max_rel_err={:.3e} {verdict}", r.name, r.trials, r.max_rel_err)?;
        failed += usize::from(!r.passed());
    }
    writeln!(w, "{} cases, {failed} failed (tolerance {:e})", reports.len(), suite::TOLERANCE)?;
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} gradient checks failed")));
    }
    Ok(reports)
}

/// Writes `level{l}.pgm` for each requested neck level of one PPM image.
pub fn cmd_dump_features(ckpt: &Path, image: &Path, levels: &[usize], out: &Path, w: &mut dyn Write) -> CliResult<Vec<PathBuf>> {
    let (cfg, model, mut store) = load_model(ckpt)?;
    let img = read_ppm(image)?;
    let s = cfg.model.image_size;
    if img.width != s || img.height != s {
        return Err(CliError::Validation(format!("image is {}x{}, the model expects {s}x{s}", img.width, img.height)));
    }
    let x = Tensor::from_vec(Shape::new(1, 3, s, s), img.to_planar())?;
    fs::create_dir_all(out)?;
    let mut paths = Vec::new();
    for (l, t) in feature_maps(&model, &mut store, x, levels)? {
        let (h, wd, gray) = activation_gray(&t, 0);
        let p = out.join(format!("level{l}.pgm"));
        write_pgm(&p, wd, h, &gray)?;
        writeln!(w, "level {l}: {wd}x{h} -> {}", p.display())?;
        paths.push(p);
    }
    Ok(paths)
}
