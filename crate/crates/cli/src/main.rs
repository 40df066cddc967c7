use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fpc_core::error::Error;
use fpc_core::explain::{gradcam, overlay, write_heatmap_csv};
use fpc_core::io::{self, load_dataset, load_image, load_manifest, load_model, save_model, write_manifest};
use fpc_core::metrics::{report_from_probs, roc_csv};
use fpc_core::model::Model;
use fpc_core::settings::RunConfig;
use fpc_core::synth::synth_dataset;
use fpc_core::training::{predict, stratified_split, train_loop};
use fpc_core::{DType, Element, Tensor};

/// Fetal ultrasound plane classifier.
#[derive(Parser, Debug)]
#[command(name = "fpc", version)]
struct Cli {
    /// Seed for every random stream (overrides the config `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Compute precision.
    #[arg(long, global = true, default_value = "f32", value_parser = parse_dtype)]
    dtype: DType,

    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,

    /// Override a config key, e.g. `--set epochs=15`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset with manifest.csv and boxes.csv.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        resolution: usize,
    },
    /// Stratified train/test split of a manifest.
    Split {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        train_out: PathBuf,
        #[arg(long)]
        test_out: PathBuf,
    },
    /// Train a model and save it as an archive.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Line-delimited JSON epoch log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a model on a manifest.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON metrics report.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Plain-text metrics table.
        #[arg(long)]
        table: Option<PathBuf>,
        /// One-vs-rest ROC coordinates.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Grad-CAM heatmaps and overlays.
    Explain {
        #[arg(long)]
        model: PathBuf,
        /// A single image.
        #[arg(long, conflicts_with = "data", required_unless_present = "data")]
        image: Option<PathBuf>,
        /// Every image of a manifest.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Class to explain; defaults to the prediction.
        #[arg(long)]
        target: Option<usize>,
        /// At most this many manifest images.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Penultimate-layer embeddings as CSV.
    ExportEmbeddings {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_dtype(s: &str) -> Result<DType, String> {
    DType::from_code(s).ok_or_else(|| format!("unknown dtype `{s}` (f32, f64)"))
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::UnknownKey { .. } | Error::InvalidArgument(_) => Failure::Usage(e.to_string()),
            Error::NonFinite { .. } => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.dtype {
        DType::F32 => run::<f32>(&cli),
        DType::F64 => run::<f64>(&cli),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}

fn settings(cli: &Cli) -> Result<RunConfig, Failure> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for kv in &cli.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run<T: Element>(cli: &Cli) -> Outcome {
    let cfg = settings(cli)?;
    let say = |msg: String| {
        if !cli.quiet {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Synth { out, per_class, resolution } => {
            let labels = &cfg.model.labels;
            let s = synth_dataset(out, labels, *per_class, *resolution, cfg.train.seed)?;
            say(format!("wrote {} images to {}", s.records.len(), out.display()));
        }
        Command::Split { data, train_out, test_out } => {
            let m = load_manifest(data, &cfg.model.labels)?;
            let (train, test) = stratified_split(
                &m.records,
                &cfg.model.labels,
                cfg.train.train_fraction,
                cfg.train.seed,
                cfg.train.patient_split,
            )?;
            write_manifest(train_out, &rebase(&train, &m.base, train_out))?;
            write_manifest(test_out, &rebase(&test, &m.base, test_out))?;
            say(format!("split {} records: {} train, {} test", m.records.len(), train.len(), test.len()));
        }
        Command::Train { data, out, log } => {
            let mut model = Model::<T>::build(&cfg.model, cfg.train.seed)?;
            let [c, r, _] = model.input_shape();
            let m = load_manifest(data, &cfg.model.labels)?;
            let ds = load_dataset::<T>(&m, &cfg.model.labels, c, r)?;
            let pc = model.param_counts();
            say(format!(
                "training on {} images; parameters: backbone {}, attention {}, head {}, trainable {}",
                ds.len(),
                pc.backbone,
                pc.attention,
                pc.head,
                pc.trainable
            ));
            let mut lines = String::new();
            let mut json_err = None;
            train_loop(&mut model, &ds, &cfg.train, |e| {
                say(format!("epoch {:>3}  loss {:.4}  acc {:.4}  {:.1}s", e.epoch, e.loss, e.accuracy, e.wall_time));
                match e.to_json() {
                    Ok(s) => {
                        lines.push_str(&s);
                        lines.push('\n');
                    }
                    Err(err) => json_err = Some(err),
                }
            })?;
            if let Some(err) = json_err {
                return Err(Failure::from(err));
            }
            if let Some(p) = log {
                io::write_atomic(p, lines.as_bytes())?;
            }
            save_model(&model, out)?;
            say(format!("saved {}", out.display()));
        }
        Command::Eval { model, data, report, table, roc } => {
            let model = load_model::<T>(model)?;
            let labels = &model.config.labels;
            let [c, r, _] = model.input_shape();
            let m = load_manifest(data, labels)?;
            let ds = load_dataset::<T>(&m, labels, c, r)?;
            let probs = predict(&model, &ds.images, 64)?;
            let rep = report_from_probs(&probs, &ds.labels, labels)?;
            let text = rep.to_table();
            if let Some(p) = report {
                io::write_atomic(p, rep.to_json()?.as_bytes())?;
            }
            if let Some(p) = table {
                io::write_atomic(p, text.as_bytes())?;
            }
            if let Some(p) = roc {
                io::write_atomic(p, roc_csv(&probs, &ds.labels, labels)?.as_bytes())?;
            }
            if !cli.quiet {
                print!("{text}");
            }
        }
        Command::Explain { model, image, data, out, target, limit } => {
            let model = load_model::<T>(model)?;
            let [c, r, _] = model.input_shape();
            let paths: Vec<PathBuf> = match (image, data) {
                (Some(p), _) => vec![p.clone()],
                (None, Some(d)) => {
                    let m = load_manifest(d, &model.config.labels)?;
                    let n = limit.unwrap_or(m.records.len());
                    m.records.iter().take(n).map(|rec| m.resolve(rec)).collect()
                }
                (None, None) => return Err(Failure::Usage("explain needs --image or --data".into())),
            };
            fs::create_dir_all(out).map_err(Error::from)?;
            for p in &paths {
                let x = load_image::<T>(p, r, c)?;
                let hm = gradcam(&model, &x, *target, &cfg.explain)?;
                let stem = p.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
                let gray: Tensor<f64> = x.cast();
                let ov = overlay(&hm.values, &gray, cfg.explain.overlay_alpha)?;
                io::save_gray(&out.join(format!("{stem}_heatmap.png")), &hm.values)?;
                io::save_rgb(&out.join(format!("{stem}_overlay.png")), &ov)?;
                write_heatmap_csv(&out.join(format!("{stem}_heatmap.csv")), &hm.values)?;
                let labels = &model.config.labels;
                say(format!(
                    "{}: predicted {}, explained {}",
                    p.display(),
                    labels[hm.predicted],
                    labels[hm.target]
                ));
            }
        }
        Command::ExportEmbeddings { model, data, out } => {
            let model = load_model::<T>(model)?;
            let labels = &model.config.labels;
            let [c, r, _] = model.input_shape();
            let m = load_manifest(data, labels)?;
            let ds = load_dataset::<T>(&m, labels, c, r)?;
            let width = model.config.mlp_hidden[1];
            let mut text = String::from("path,label");
            for j in 0..width {
                text.push_str(&format!(",e{j}"));
            }
            text.push('\n');
            for (chunk, recs) in ds.images.chunks(64).zip(m.records.chunks(64)) {
                let x = Tensor::stack(chunk)?;
                let emb = model.extract_embedding(&x)?;
                for (row, rec) in emb.data().chunks(width).zip(recs) {
                    text.push_str(&format!("{},{}", csv_field(&rec.image_path), rec.label));
                    for v in row {
                        text.push_str(&format!(",{v}"));
                    }
                    text.push('\n');
                }
            }
            io::write_atomic(out, text.as_bytes())?;
            say(format!("wrote {} embeddings to {}", ds.len(), out.display()));
        }
    }
    Ok(())
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Re-expresses record paths relative to the directory of `dest`.
fn rebase(records: &[io::Record], base: &Path, dest: &Path) -> Vec<io::Record> {
    let dest_dir = dest.parent().unwrap_or(Path::new(""));
    records
        .iter()
        .map(|r| {
            let abs = base.join(&r.image_path);
            let path = relative_to(&abs, dest_dir).unwrap_or(abs);
            io::Record {
                image_path: path.to_string_lossy().into_owned(),
                ..r.clone()
            }
        })
        .collect()
}

fn relative_to(path: &Path, dir: &Path) -> Option<PathBuf> {
    let path = absolute(path)?;
    let dir = absolute(dir)?;
    let common = path.components().zip(dir.components()).take_while(|(a, b)| a == b).count();
    let mut out = PathBuf::new();
    for _ in dir.components().skip(common) {
        out.push("..");
    }
    for c in path.components().skip(common) {
        out.push(c);
    }
    Some(out)
}

fn absolute(p: &Path) -> Option<PathBuf> {
    let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
    std::path::absolute(p).ok().map(|a| a.components().collect())
}
