//! Subcommand bodies. Each takes the parsed flags, resolves the run
//! configuration, locks its output directory and returns a one-line summary.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use warpgrid::metrics::{evaluate_pair, EvalReport};
use warpgrid::predictor::TinyPredictor;
use warpgrid::solver::direct_solve;
use warpgrid::synth::{generate_dataset, load_dataset, SyntheticPair, MANIFEST_FILE};
use warpgrid::train::{train_predictor, TrainData};
use warpgrid::{ConfidenceMap, ImageBuffer, Mask, Prediction};

use crate::config::{RunConfig, SolverMode};
use crate::{create_file, viz, CliError, Command, Common, PairArgs, RunLock};

pub const RUN_CONFIG_FILE: &str = "run_config.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const EVAL_JSON_FILE: &str = "eval.json";
pub const EVAL_CSV_FILE: &str = "eval.csv";

pub fn trace_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}_trace.json"))
}

pub fn dispatch(command: Command) -> Result<String, CliError> {
    match command {
        Command::Synth {
            common,
            count,
            size,
            occlusion,
        } => synth(&common, count, size, occlusion),
        Command::Solve {
            common,
            pairs,
            iterations,
            solver,
            checkpoint,
        } => solve(&common, &pairs, iterations, solver, checkpoint),
        Command::Train {
            common,
            data,
            real,
            held_out,
            steps,
        } => train(&common, data, real, held_out, steps),
        Command::Eval {
            common,
            data,
            pred,
            ground_truth,
        } => eval(&common, data, pred, ground_truth),
        Command::Viz { common, pairs, pred } => visualize(&common, &pairs, &pred),
    }
}

fn base_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_run_config(dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    let path = dir.join(RUN_CONFIG_FILE);
    fs::write(&path, cfg.to_json()).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn synth(
    common: &Common,
    count: Option<usize>,
    size: Option<usize>,
    occlusion: Option<f64>,
) -> Result<String, CliError> {
    let mut cfg = base_config(common)?;
    if let Some(c) = count {
        cfg.synth.count = c;
    }
    if let Some(s) = size {
        cfg.size = s;
    }
    if let Some(o) = occlusion {
        cfg.synth.occlusion_fraction = o;
    }
    let cfg = cfg.resolve()?;
    let _lock = RunLock::acquire(&common.out)?;
    let manifest = generate_dataset(cfg.synth.count, &cfg.synth_config(), &common.out)?;
    Ok(format!(
        "synth: {} pairs of {}x{} in {}",
        manifest.pairs.len(),
        manifest.height,
        manifest.width,
        common.out.join(MANIFEST_FILE).display()
    ))
}

/// Images and masks to solve or render, by id.
struct PairInput {
    id: String,
    image_s: ImageBuffer,
    image_t: ImageBuffer,
    mask_s: Mask,
    mask_t: Mask,
}

fn dataset_dir(flag: Option<&PathBuf>, configured: Option<&PathBuf>, what: &str) -> Result<PathBuf, CliError> {
    flag.or(configured)
        .cloned()
        .ok_or_else(|| CliError::Usage(format!("no {what} directory (flag or config datasets)")))
}

fn load_pairs(dir: &Path, ids: &[String]) -> Result<Vec<(String, SyntheticPair)>, CliError> {
    let (manifest, pairs) = load_dataset(dir)?;
    let all: Vec<(String, SyntheticPair)> = manifest.pairs.into_iter().map(|r| r.id).zip(pairs).collect();
    if ids.is_empty() {
        return Ok(all);
    }
    ids.iter()
        .map(|id| {
            all.iter()
                .find(|(k, _)| k == id)
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("pair {id} is not in {}", dir.display())))
        })
        .collect()
}

fn pair_inputs(args: &PairArgs, cfg: &RunConfig) -> Result<Vec<PairInput>, CliError> {
    if let (Some(s), Some(t)) = (&args.source, &args.target) {
        let image_s = ImageBuffer::load_png(s)?;
        let image_t = ImageBuffer::load_png(t)?;
        let mask = |p: &Option<PathBuf>, img: &ImageBuffer| -> Result<Mask, CliError> {
            Ok(match p {
                Some(p) => Mask::load_png(p)?,
                None => Mask::full(img.height(), img.width()),
            })
        };
        return Ok(vec![PairInput {
            id: args.id.clone(),
            mask_s: mask(&args.mask_s, &image_s)?,
            mask_t: mask(&args.mask_t, &image_t)?,
            image_s,
            image_t,
        }]);
    }
    let dir = dataset_dir(args.data.as_ref(), cfg.datasets.data.as_ref(), "data")?;
    Ok(load_pairs(&dir, &args.ids)?
        .into_iter()
        .map(|(id, p)| PairInput {
            id,
            image_s: p.image_s,
            image_t: p.image_t,
            mask_s: p.mask_s,
            mask_t: p.mask_t,
        })
        .collect())
}

fn solve(
    common: &Common,
    args: &PairArgs,
    iterations: Option<usize>,
    solver: Option<SolverMode>,
    checkpoint: Option<PathBuf>,
) -> Result<String, CliError> {
    let mut cfg = base_config(common)?;
    if let Some(n) = iterations {
        cfg.direct = cfg.direct.with_iterations(n);
    }
    if let Some(m) = solver {
        cfg.solver = m;
    }
    if checkpoint.is_some() {
        cfg.checkpoint = checkpoint;
    }
    if args.data.is_some() {
        cfg.datasets.data = args.data.clone();
    }
    let cfg = cfg.resolve()?;
    let inputs = pair_inputs(args, &cfg)?;
    let model = match cfg.solver {
        SolverMode::Direct => None,
        SolverMode::Predictor => {
            let path = cfg
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::Usage("solver = predictor needs a checkpoint".into()))?;
            Some(TinyPredictor::load(path)?.0)
        }
    };
    let _lock = RunLock::acquire(&common.out)?;
    write_run_config(&common.out, &cfg)?;
    inputs.par_iter().try_for_each(|p| -> Result<(), CliError> {
        let (pred, trace) = match &model {
            None => {
                let out = direct_solve(&p.image_s, &p.image_t, &p.mask_s, &p.mask_t, &cfg.direct)?;
                (out.prediction, out.trace)
            }
            Some(m) => (m.predict(&p.image_s, &p.image_t)?, Vec::new()),
        };
        pred.save(&common.out, &p.id)?;
        let file = create_file(&trace_path(&common.out, &p.id))?;
        serde_json::to_writer(BufWriter::new(file), &trace)?;
        Ok(())
    })?;
    Ok(format!("solve: {} pairs into {}", inputs.len(), common.out.display()))
}

fn train(
    common: &Common,
    data: Option<PathBuf>,
    real: Option<PathBuf>,
    held_out: Option<PathBuf>,
    steps: Option<usize>,
) -> Result<String, CliError> {
    let mut cfg = base_config(common)?;
    if let Some(n) = steps {
        cfg.train = cfg.train.with_iterations(n);
    }
    cfg.datasets.data = data.or(cfg.datasets.data);
    cfg.datasets.real_proxy = real.or(cfg.datasets.real_proxy);
    cfg.datasets.held_out = held_out.or(cfg.datasets.held_out);
    let cfg = cfg.resolve()?;
    let load = |p: &Option<PathBuf>| -> Result<Vec<SyntheticPair>, CliError> {
        match p {
            Some(dir) => Ok(load_dataset(dir)?.1),
            None => Ok(Vec::new()),
        }
    };
    let train_dir = dataset_dir(cfg.datasets.data.as_ref(), None, "training data")?;
    let synthetic = load(&Some(train_dir))?;
    let real_proxy = load(&cfg.datasets.real_proxy)?;
    let held = load(&cfg.datasets.held_out)?;
    let _lock = RunLock::acquire(&common.out)?;
    write_run_config(&common.out, &cfg)?;
    let mut log = BufWriter::new(create_file(&common.out.join(TRAIN_LOG_FILE))?);
    let out = train_predictor(
        &TrainData {
            synthetic: &synthetic,
            real_proxy: &real_proxy,
            held_out: &held,
        },
        &cfg.train,
        Some(&common.out),
        Some(&mut log),
    )?;
    let last = out
        .log
        .last()
        .and_then(|r| r.held_out.as_ref())
        .and_then(|h| h.synthetic_dense)
        .map(|v| format!(", held-out synthetic dense {v:.6}"))
        .unwrap_or_default();
    Ok(format!(
        "train: {} checkpoints in {}{last}",
        out.checkpoints.len(),
        common.out.display()
    ))
}

/// Ground-truth grids as a prediction with full confidence.
pub fn ground_truth_prediction(pair: &SyntheticPair) -> Result<Prediction, CliError> {
    let (h, w) = (pair.grid_st.height(), pair.grid_st.width());
    Ok(Prediction {
        grid_st: pair.grid_st.clone(),
        grid_ts: pair.grid_ts.clone(),
        conf_s: ConfidenceMap::filled(h, w, 1.0)?,
        conf_t: ConfidenceMap::filled(h, w, 1.0)?,
    })
}

fn eval(common: &Common, data: Option<PathBuf>, pred: Option<PathBuf>, ground_truth: bool) -> Result<String, CliError> {
    let mut cfg = base_config(common)?;
    cfg.datasets.data = data.or(cfg.datasets.data);
    cfg.datasets.predictions = pred.or(cfg.datasets.predictions);
    let cfg = cfg.resolve()?;
    let dir = dataset_dir(cfg.datasets.data.as_ref(), None, "data")?;
    let pairs = load_pairs(&dir, &[])?;
    let pred_dir = if ground_truth {
        None
    } else {
        Some(dataset_dir(cfg.datasets.predictions.as_ref(), None, "prediction")?)
    };
    let per_pair = pairs
        .par_iter()
        .map(|(id, pair)| -> Result<_, CliError> {
            let p = match &pred_dir {
                None => ground_truth_prediction(pair)?,
                Some(d) => Prediction::load(d, id)?,
            };
            Ok(evaluate_pair(id, &p, pair, &cfg.alphas)?)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let report = EvalReport::aggregate(&cfg.alphas, per_pair);
    let _lock = RunLock::acquire(&common.out)?;
    write_run_config(&common.out, &cfg)?;
    fs::write(common.out.join(EVAL_JSON_FILE), serde_json::to_string_pretty(&report)?)?;
    fs::write(common.out.join(EVAL_CSV_FILE), report.to_csv())?;
    let pck: Vec<String> = report
        .pck
        .iter()
        .map(|e| match e.value {
            Some(v) => format!("PCK@{}={v:.4}", e.alpha),
            None => format!("PCK@{}=n/a", e.alpha),
        })
        .collect();
    Ok(format!("eval: {} pairs, {}", report.pairs, pck.join(" ")))
}

fn visualize(common: &Common, args: &PairArgs, pred_dir: &Path) -> Result<String, CliError> {
    let cfg = base_config(common)?.resolve()?;
    let inputs = pair_inputs(args, &cfg)?;
    let _lock = RunLock::acquire(&common.out)?;
    inputs.par_iter().try_for_each(|p| -> Result<(), CliError> {
        let pred = Prediction::load(pred_dir, &p.id)?;
        viz::render(&p.image_s, &p.image_t, &pred, &common.out, &p.id)?;
        Ok(())
    })?;
    Ok(format!("viz: {} pairs into {}", inputs.len(), common.out.display()))
}
