use std::path::{Path, PathBuf};

use scformer::attention::Transform;
use scformer::data::{evaluate, load_csv, write_predictions_csv, Dataset, Metrics, Split};
use scformer::hippo::{LegsOperator, PrefixStates};
use scformer::model::{
    forward_graph, init_params, load_checkpoint, save_checkpoint, Checkpoint, ModelParams,
    Precision,
};
use scformer::numerics::{Graph, Scalar, Tensor};
use scformer::trainer::{make_batch, ModelForecaster, Trainer};
use scformer::verify::{self, Suite};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::error::{io_err, CliError};

pub const CHECKPOINT_DIR: &str = "checkpoint";

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let bytes = serde_json::to_vec_pretty(value).expect("artifacts serialize");
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))
}

/// CSV files keep fixed schemas, so their seed goes into a JSON sidecar.
fn write_sidecar(csv: &Path, seed: u64, extra: serde_json::Value) -> Result<(), CliError> {
    let mut meta = json!({ "file": csv.file_name().map(|n| n.to_string_lossy()), "seed": seed });
    if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
        m.extend(e);
    }
    write_json(&csv.with_extension("meta.json"), &meta)
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    let series = load_csv(
        &cfg.dataset.path,
        &cfg.dataset.date_column,
        cfg.dataset.channels.as_deref(),
    )?;
    if series.num_channels() != cfg.model.channels {
        return Err(CliError::ConfigInvalid(format!(
            "dataset has {} channels but model.channels is {}",
            series.num_channels(),
            cfg.model.channels
        )));
    }
    Ok(Dataset::prepare(
        series,
        &cfg.split,
        cfg.model.lookback,
        cfg.model.horizon,
        cfg.model.hippo_order,
    )?)
}

#[derive(Serialize)]
pub struct MetricsArtifact {
    pub seed: u64,
    pub split: Split,
    pub precision: Precision,
    pub checkpoint: PathBuf,
    #[serde(flatten)]
    pub metrics: Metrics,
}

fn metrics_artifact<T: Scalar>(
    cfg: &RunConfig,
    ds: &Dataset,
    params: &ModelParams<Tensor<T>>,
    split: Split,
    checkpoint: &Path,
) -> Result<(MetricsArtifact, Vec<f64>), CliError> {
    let samples = ds.samples(split);
    let f = ModelForecaster {
        params,
        config: &cfg.model,
    };
    let (metrics, preds) = evaluate(ds, &f, &samples, cfg.train.batch_size)?;
    Ok((
        MetricsArtifact {
            seed: cfg.seed,
            split,
            precision: cfg.model.precision,
            checkpoint: checkpoint.to_path_buf(),
            metrics,
        },
        preds,
    ))
}

/// Runs `$body` with `T` bound to the configured precision.
macro_rules! with_precision {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.model.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn train(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    with_precision!(cfg, train_typed(cfg, resume))
}

fn train_typed<T: Scalar>(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    let out = &cfg.out;
    create_dir(out)?;
    write_json(&out.join("run_config.json"), cfg)?;
    let ds = load_dataset(cfg)?;
    let ckpt_dir = out.join(CHECKPOINT_DIR);
    let mut trainer = if resume {
        let last = load_checkpoint::<T>(&ckpt_dir.join("last"), Some(&cfg.model))?;
        Trainer::resume(&ds, &cfg.train, last)?
    } else {
        Trainer::new(
            &ds,
            &cfg.model,
            &cfg.train,
            init_params::<T>(&cfg.model, cfg.seed)?,
        )?
    };
    let (train, val) = (ds.samples(Split::Train), ds.samples(Split::Val));
    let fitted = trainer.fit(&train, &val, Some(&ckpt_dir));
    trainer
        .history
        .write(&out.join("history.json"))
        .map_err(CliError::Data)?;
    fitted?;
    let best_dir = ckpt_dir.join("best");
    if !best_dir.join(scformer::model::MANIFEST_FILE).exists() {
        save_checkpoint(&best_dir, &trainer.best_checkpoint())?;
    }
    let (artifact, _) = metrics_artifact(cfg, &ds, &trainer.best, Split::Test, &best_dir)?;
    write_json(&out.join("metrics.json"), &artifact)?;
    eprintln!(
        "trained {} epochs, best val mse {:.6}, test mse {:.6} mae {:.6}",
        trainer.history.epochs.len(),
        trainer.best_val(),
        artifact.metrics.mse,
        artifact.metrics.mae
    );
    Ok(())
}

fn checkpoint_path(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.out.join(CHECKPOINT_DIR).join("best"))
}

fn load_params<T: Scalar>(cfg: &RunConfig, dir: &Path) -> Result<Checkpoint<T>, CliError> {
    let ckpt = load_checkpoint::<T>(dir, Some(&cfg.model))?;
    Ok(ckpt)
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>, split: Split) -> Result<(), CliError> {
    with_precision!(cfg, eval_typed(cfg, checkpoint, split))
}

fn eval_typed<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    split: Split,
) -> Result<(), CliError> {
    let dir = checkpoint_path(cfg, checkpoint);
    let ckpt = load_params::<T>(cfg, &dir)?;
    let ds = load_dataset(cfg)?;
    let (artifact, _) = metrics_artifact(cfg, &ds, &ckpt.params, split, &dir)?;
    create_dir(&cfg.out)?;
    let name = match split {
        Split::Test => "metrics.json".to_string(),
        other => format!("metrics_{other}.json"),
    };
    write_json(&cfg.out.join(name), &artifact)?;
    eprintln!(
        "{split} mse {:.6} mae {:.6}",
        artifact.metrics.mse, artifact.metrics.mae
    );
    Ok(())
}

pub fn predict(cfg: &RunConfig, checkpoint: Option<&Path>, split: Split) -> Result<(), CliError> {
    with_precision!(cfg, predict_typed(cfg, checkpoint, split))
}

fn predict_typed<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    split: Split,
) -> Result<(), CliError> {
    let dir = checkpoint_path(cfg, checkpoint);
    let ckpt = load_params::<T>(cfg, &dir)?;
    let ds = load_dataset(cfg)?;
    let (artifact, preds) = metrics_artifact(cfg, &ds, &ckpt.params, split, &dir)?;
    create_dir(&cfg.out)?;
    let path = cfg.out.join("predictions.csv");
    let rows = write_predictions_csv(&path, &ds, &ds.samples(split), &preds)?;
    write_sidecar(
        &path,
        cfg.seed,
        json!({ "split": split, "rows": rows, "samples": artifact.metrics.samples, "units": "raw", "checkpoint": dir }),
    )?;
    eprintln!("wrote {rows} rows to {}", path.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum InspectTarget {
    Hippo,
    Attention,
    Params,
}

pub struct InspectOptions<'a> {
    pub checkpoint: Option<&'a Path>,
    pub split: Split,
    /// Position of the sample within `split` for attention dumps.
    pub sample: usize,
    /// Keep every `stride`-th prefix state in hippo dumps.
    pub stride: usize,
}

pub fn inspect(
    cfg: &RunConfig,
    what: InspectTarget,
    opts: &InspectOptions,
) -> Result<(), CliError> {
    create_dir(&cfg.out)?;
    match what {
        InspectTarget::Hippo => inspect_hippo(cfg, opts),
        InspectTarget::Attention => with_precision!(cfg, inspect_attention(cfg, opts)),
        InspectTarget::Params => with_precision!(cfg, inspect_params(cfg, opts)),
    }
}

/// `k, channel, coeff_0..coeff_{N-1}`: state after consuming `k` scaled samples.
fn inspect_hippo(cfg: &RunConfig, opts: &InspectOptions) -> Result<(), CliError> {
    if opts.stride == 0 {
        return Err(CliError::Usage("--stride must be positive".into()));
    }
    let ds = load_dataset(cfg)?;
    let c = ds.channels();
    let end = ds.bounds.test.end;
    let n = cfg.model.hippo_order;
    let op = LegsOperator::new(n).map_err(|e| CliError::Data(e.into()))?;
    let stride = opts.stride;
    let states = PrefixStates::build_retaining(&ds.scaled[..end * c], c, &op, |k| k % stride == 0)
        .map_err(|e| CliError::Data(e.into()))?;
    let path = cfg.out.join("hippo_states.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io {
        path: path.clone(),
        message: e.to_string(),
    })?;
    let csv_err = |e: csv::Error| CliError::Io {
        path: path.clone(),
        message: e.to_string(),
    };
    let mut header = vec!["k".to_string(), "channel".to_string()];
    header.extend((0..n).map(|i| format!("coeff_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    let mut rows = 0;
    for k in (0..=end).step_by(stride) {
        let state = states.prefix(k).expect("retained by stride");
        for (ch, name) in ds.series.channels.iter().enumerate() {
            let mut rec = vec![k.to_string(), name.clone()];
            rec.extend(state[ch * n..(ch + 1) * n].iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
            rows += 1;
        }
    }
    w.flush().map_err(io_err(&path))?;
    write_sidecar(
        &path,
        cfg.seed,
        json!({ "rows": rows, "stride": stride, "order": n, "space": "scaled" }),
    )?;
    eprintln!("wrote {rows} state rows to {}", path.display());
    Ok(())
}

/// Last-layer scores per head, one `C×C` CSV each, labelled by channel.
fn inspect_attention<T: Scalar>(cfg: &RunConfig, opts: &InspectOptions) -> Result<(), CliError> {
    let dir = checkpoint_path(cfg, opts.checkpoint);
    let ckpt = load_params::<T>(cfg, &dir)?;
    let ds = load_dataset(cfg)?;
    let samples = ds.samples(opts.split);
    let sample = *samples.get(opts.sample).ok_or_else(|| {
        CliError::Usage(format!(
            "--sample {} out of range: {} split has {} samples",
            opts.sample,
            opts.split,
            samples.len()
        ))
    })?;
    let (batch, _) = make_batch::<T>(&ds, &[sample], &cfg.model)?;
    let mut g = Graph::new();
    let p = ckpt.params.constant(&mut g);
    let fwd = forward_graph(&mut g, &p, &batch, &cfg.model)?;
    let last = *fwd
        .scores
        .last()
        .ok_or_else(|| CliError::Usage("model has no encoder blocks".into()))?;
    let scores = g.value(last);
    let c = ds.channels();
    let names = &ds.series.channels;
    let mut files = Vec::new();
    for head in 0..cfg.model.heads {
        let path = cfg.out.join(format!("attention_head{head}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Io {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let csv_err = |e: csv::Error| CliError::Io {
            path: path.clone(),
            message: e.to_string(),
        };
        let mut header = vec!["channel".to_string()];
        header.extend(names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        let base = head * c * c;
        for (i, name) in names.iter().enumerate() {
            let mut rec = vec![name.clone()];
            rec.extend((0..c).map(|j| scores.data()[base + i * c + j].as_f64().to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush().map_err(io_err(&path))?;
        files.push(path.file_name().map(|f| f.to_string_lossy().into_owned()));
    }
    let first = ds.series.timestamps[sample.start + cfg.model.lookback - 1].clone();
    write_json(
        &cfg.out.join("attention.json"),
        &json!({
            "seed": cfg.seed,
            "checkpoint": dir,
            "split": opts.split,
            "sample": opts.sample,
            "window_end": first,
            "layer": cfg.model.depth - 1,
            "softmax": cfg.model.softmax,
            "files": files,
        }),
    )?;
    eprintln!(
        "wrote {} head matrices to {}",
        cfg.model.heads,
        cfg.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TransformCount {
    name: String,
    kind: &'static str,
    free_weights: usize,
    dense_weights: usize,
    ratio: f64,
}

/// Structural counts; uses the checkpoint when available, else a fresh init.
fn inspect_params<T: Scalar>(cfg: &RunConfig, opts: &InspectOptions) -> Result<(), CliError> {
    let dir = opts.checkpoint.map(Path::to_path_buf).or_else(|| {
        let d = checkpoint_path(cfg, None);
        d.join(scformer::model::MANIFEST_FILE).exists().then_some(d)
    });
    let params = match &dir {
        Some(d) => load_params::<T>(cfg, d)?.params,
        None => init_params::<T>(&cfg.model, cfg.seed)?,
    };
    let d = cfg.model.d_model;
    let mut transforms = Vec::new();
    for (b, block) in params.blocks.iter().enumerate() {
        for (name, t) in block.transforms() {
            let kind = match t {
                Transform::Triangular(_) => "triangular",
                Transform::Conv(_) => "conv",
                Transform::Dense(_) => "dense",
            };
            let free = t.weight_params();
            transforms.push(TransformCount {
                name: format!("blocks.{b}.{name}"),
                kind,
                free_weights: free,
                dense_weights: d * d,
                ratio: free as f64 / (d * d) as f64,
            });
        }
    }
    write_json(
        &cfg.out.join("params.json"),
        &json!({
            "seed": cfg.seed,
            "checkpoint": dir,
            "variant": cfg.model.variant,
            "constrained": cfg.model.constrained,
            "d_model": d,
            "total_params": params.total_params(),
            "free_params": params.free_params(),
            "transforms": transforms,
        }),
    )?;
    for t in &transforms {
        println!("{}\t{}\t{}\t{:.4}", t.name, t.kind, t.free_weights, t.ratio);
    }
    Ok(())
}

pub fn verify(suite: Suite, seed: u64, out: &Path) -> Result<(), CliError> {
    let report = verify::run(suite, seed);
    create_dir(out)?;
    write_json(&out.join("report.json"), &report)?;
    for c in &report.checks {
        let verdict = match (c.pass, c.informational) {
            (true, _) => "PASS",
            (false, true) => "INFO",
            (false, false) => "FAIL",
        };
        println!(
            "{verdict} {}.{} value={:.3e} threshold={:.3e}",
            c.suite, c.name, c.value, c.threshold
        );
    }
    if report.pass {
        Ok(())
    } else {
        Err(CliError::VerifyFailed {
            failed: report.failed,
        })
    }
}
