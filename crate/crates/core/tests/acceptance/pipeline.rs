//! Criteria that train or persist whole models on the synthetic dataset.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::OnceLock;

use fpc_core::attention::AttentionVariant;
use fpc_core::explain::{gradcam, CamLayer, CamScore, GradcamConfig, Heatmap};
use fpc_core::io::{self, Archive, Manifest};
use fpc_core::metrics::{report_from_probs, MetricsReport};
use fpc_core::model::{Model, ModelConfig};
use fpc_core::synth::{self, BBox};
use fpc_core::training::{argmax, predict, stratified_split, train_loop, Dataset, TrainConfig};
use fpc_core::{Error, Tensor};
use tempfile::TempDir;

use crate::Outcome;

const PER_CLASS: usize = 200;
const RESOLUTION: usize = 64;
const EPOCHS: usize = 15;
const ABLATION_SEEDS: u64 = 5;

fn labels() -> Vec<String> {
    ModelConfig::default().labels
}

/// Artifacts of one `synth -> split -> train -> eval` run.
struct Run {
    _dir: TempDir,
    images: Vec<u8>,
    archive: Vec<u8>,
    report_json: String,
    report: MetricsReport,
    model: Model<f32>,
    test: Dataset<f32>,
    test_paths: Vec<String>,
    boxes: HashMap<String, BBox>,
}

fn fail(e: Error) -> String {
    e.to_string()
}

/// Synthetic data written to disk and split into manifests.
struct Data {
    dir: TempDir,
    train: Manifest,
    test: Manifest,
}

fn make_data() -> Result<Data, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().join("data");
    synth::synth_dataset(&root, &labels(), PER_CLASS, RESOLUTION, 0).map_err(fail)?;
    let all = io::load_manifest(&root.join("manifest.csv"), &labels()).map_err(fail)?;
    let (train, test) = stratified_split(&all.records, &labels(), 0.8, 0, false).map_err(fail)?;
    for (name, recs) in [("train.csv", &train), ("test.csv", &test)] {
        io::write_manifest(&root.join(name), recs).map_err(fail)?;
    }
    let train = io::load_manifest(&root.join("train.csv"), &labels()).map_err(fail)?;
    let test = io::load_manifest(&root.join("test.csv"), &labels()).map_err(fail)?;
    Ok(Data { dir, train, test })
}

fn train_model(cfg: &ModelConfig, train: &Dataset<f32>, seed: u64) -> Result<Model<f32>, String> {
    let mut model = Model::<f32>::build(cfg, seed).map_err(fail)?;
    let tcfg = TrainConfig { epochs: EPOCHS, seed, ..TrainConfig::default() };
    train_loop(&mut model, train, &tcfg, |_| {}).map_err(fail)?;
    Ok(model)
}

fn full_run() -> Result<Run, String> {
    let data = make_data()?;
    let root = data.dir.path().join("data");
    let mut images = Vec::new();
    let mut names: Vec<PathBuf> = fs::read_dir(root.join("images")).map_err(|e| e.to_string())?.map(|e| e.unwrap().path()).collect();
    names.sort();
    for n in names {
        images.extend(fs::read(n).map_err(|e| e.to_string())?);
    }
    let train = io::load_dataset::<f32>(&data.train, &labels(), 1, RESOLUTION).map_err(fail)?;
    let model = train_model(&ModelConfig::default(), &train, 0)?;
    let model_path = data.dir.path().join("model.fpta");
    io::save_model(&model, &model_path).map_err(fail)?;
    let model = io::load_model::<f32>(&model_path).map_err(fail)?;
    let test = io::load_dataset::<f32>(&data.test, &labels(), 1, RESOLUTION).map_err(fail)?;
    let probs = predict(&model, &test.images, 64).map_err(fail)?;
    let report = report_from_probs(&probs, &test.labels, &labels()).map_err(fail)?;
    let boxes = synth::load_boxes(&root.join("boxes.csv"))
        .map_err(fail)?
        .into_iter()
        .collect();
    Ok(Run {
        images,
        archive: fs::read(&model_path).map_err(|e| e.to_string())?,
        report_json: report.to_json().map_err(fail)?,
        report,
        model,
        test,
        test_paths: data.test.records.iter().map(|r| r.image_path.clone()).collect(),
        boxes,
        _dir: data.dir,
    })
}

fn shared_run() -> &'static Result<Run, String> {
    static RUN: OnceLock<Result<Run, String>> = OnceLock::new();
    RUN.get_or_init(full_run)
}

pub fn end_to_end() -> Outcome {
    let first = shared_run().as_ref().map_err(Clone::clone)?;
    let second = full_run()?;
    let (top1, top2) = (first.report.top1, first.report.top2);
    let same = first.images == second.images && first.archive == second.archive && first.report_json == second.report_json;
    crate::check(
        top1 >= 0.90 && top2 >= 0.98 && same,
        format!("top-1 {top1:.4} (>= 0.90), top-2 {top2:.4} (>= 0.98), second run bitwise identical: {same}"),
    )
}

pub fn ablation() -> Outcome {
    let data = make_data()?;
    let train = io::load_dataset::<f32>(&data.train, &labels(), 1, RESOLUTION).map_err(fail)?;
    let test = io::load_dataset::<f32>(&data.test, &labels(), 1, RESOLUTION).map_err(fail)?;
    let mut mean = HashMap::new();
    for variant in AttentionVariant::ALL {
        let mut accs = Vec::new();
        for seed in 0..ABLATION_SEEDS {
            let acc = if variant == AttentionVariant::Ssa && seed == 0 {
                shared_run().as_ref().map_err(Clone::clone)?.report.top1
            } else {
                let cfg = ModelConfig { attention: variant, ..ModelConfig::default() };
                let model = train_model(&cfg, &train, seed)?;
                let probs = predict(&model, &test.images, 64).map_err(fail)?;
                report_from_probs(&probs, &test.labels, &labels()).map_err(fail)?.top1
            };
            accs.push(acc);
        }
        let m = accs.iter().sum::<f64>() / accs.len() as f64;
        eprintln!("ablation {variant}: {accs:.4?} mean {m:.4}");
        mean.insert(variant, m);
    }
    let base = mean[&AttentionVariant::None];
    let mut ok = true;
    let mut parts = vec![format!("none {:.2}", 100.0 * base)];
    for v in [AttentionVariant::Sda, AttentionVariant::Mha, AttentionVariant::Ssa] {
        let delta = 100.0 * (mean[&v] - base);
        ok &= delta.abs() < 5.0 && delta > -2.0;
        parts.push(format!("{v} {:.2} ({delta:+.2})", 100.0 * mean[&v]));
    }
    crate::check(ok, format!("mean top-1 over {ABLATION_SEEDS} seeds: {}", parts.join(", ")))
}

fn argmax2d(t: &Tensor<f64>) -> (usize, usize) {
    let w = t.shape()[1];
    let i = argmax(t.data());
    (i % w, i / w)
}

fn cam(model: &Model<f32>, image: &Tensor<f32>, cfg: &GradcamConfig) -> Result<Heatmap, String> {
    gradcam(model, image, None, cfg).map_err(fail)
}

pub fn gradcam_suite() -> Outcome {
    let run = shared_run().as_ref().map_err(Clone::clone)?;
    let model = &run.model;
    let mut shifted = model.clone();
    let bias = shifted.mlp[2].b;
    shifted.store.param_mut(bias).value = shifted.store.param(bias).value.map(|v| v + 3.5);

    let configs = [
        GradcamConfig::default(),
        GradcamConfig { score: CamScore::Prob, ..GradcamConfig::default() },
        GradcamConfig { layer: CamLayer::Attended, ..GradcamConfig::default() },
    ];
    let (mut negative, mut unnormalised, mut shift_diff, mut nondeterministic) = (0, 0, 0.0f64, 0);
    let (mut confident, mut inside) = (0, 0);
    let probs = predict(model, &run.test.images, 64).map_err(fail)?;
    let k = model.config.num_classes;
    for (i, image) in run.test.images.iter().enumerate() {
        for cfg in &configs {
            let h = cam(model, image, cfg)?;
            if h.values.data().iter().chain(h.raw.data()).any(|&v| v < 0.0) {
                negative += 1;
            }
            let max = h.values.data().iter().copied().fold(0.0, f64::max);
            if !(max == 1.0 || h.values.data().iter().all(|&v| v == 0.0)) {
                unnormalised += 1;
            }
            if cfg.score == CamScore::Logit && i % 4 == 0 {
                let again = cam(model, image, cfg)?;
                if again != h {
                    nondeterministic += 1;
                }
                let s = cam(&shifted, image, cfg)?;
                shift_diff = shift_diff.max(s.values.max_abs_diff(&h.values));
                if s.target != h.target {
                    shift_diff = f64::INFINITY;
                }
            }
        }
        let row = &probs.data()[i * k..(i + 1) * k];
        let label = run.test.labels[i];
        let Some(bbox) = run.boxes.get(&run.test_paths[i]) else { continue };
        if argmax(row) == label && row[label] >= 0.9 {
            confident += 1;
            let h = cam(model, image, &GradcamConfig::default())?;
            let (x, y) = argmax2d(&h.values);
            if bbox.contains(x, y) {
                inside += 1;
            }
        }
    }
    let frac = inside as f64 / confident.max(1) as f64;
    let ok = negative == 0 && unnormalised == 0 && shift_diff == 0.0 && nondeterministic == 0 && confident > 0 && frac >= 0.9;
    crate::check(
        ok,
        format!(
            "{} images: negative {negative}, unnormalised {unnormalised}, logit-shift diff {shift_diff:.1e}, \
             nondeterministic {nondeterministic}; peak inside shape box {inside}/{confident} = {frac:.3} (>= 0.90)",
            run.test.images.len()
        ),
    )
}

fn expect_err(result: Result<Model<f32>, Error>, needle: &str, what: &str) -> Result<String, String> {
    match result {
        Ok(_) => Err(format!("{what}: archive accepted")),
        Err(e) if e.to_string().contains(needle) => Ok(format!("{what}: {e}")),
        Err(e) => Err(format!("{what}: unexpected error `{e}`")),
    }
}

pub fn persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let path = dir.path().join("m.fpta");
    let mut model = Model::<f32>::build(&ModelConfig::default(), 7).map_err(fail)?;
    // Random values everywhere, including running statistics.
    for (i, p) in model.store.params_mut().iter_mut().enumerate() {
        p.value = fpc_core::layers::init::uniform(p.value.shape(), 7, i as u64).map(|v| 0.2 * v);
    }
    for (i, b) in model.store.buffers_mut().iter_mut().enumerate() {
        b.value = fpc_core::layers::init::uniform(b.value.shape(), 8, i as u64).map(|v| 1.0 + 0.5 * v);
    }
    io::save_model(&model, &path).map_err(fail)?;
    let loaded = io::load_model::<f32>(&path).map_err(fail)?;
    let x = Tensor::stack(&(0..4).map(|i| fpc_core::layers::init::uniform::<f32>(&[1, 64, 64], 9, i)).collect::<Vec<_>>()).map_err(fail)?;
    let same_forward = model.forward(&x).map_err(fail)? == loaded.forward(&x).map_err(fail)?;
    let same_params = model.store == loaded.store && model.config == loaded.config;

    let bytes = fs::read(&path).map_err(|e| e.to_string())?;
    let corrupt = |name: &str, data: &[u8]| -> Result<Model<f32>, Error> {
        let p = dir.path().join(name);
        fs::write(&p, data).map_err(Error::from)?;
        io::load_model::<f32>(&p)
    };
    let mut flipped = bytes.clone();
    let mid = bytes.len() / 2;
    flipped[mid] ^= 0x40;
    let mut notes = vec![
        expect_err(corrupt("flipped.fpta", &flipped), "CRC", "flipped byte")?,
        expect_err(corrupt("truncated.fpta", &bytes[..bytes.len() - 100]), "CRC", "truncated")?,
    ];
    let mut archive = Archive::load(&path).map_err(fail)?;
    let victim = archive.tensors[3].name.clone();
    archive.tensors[3].name = format!("{victim}_renamed");
    let renamed = dir.path().join("renamed.fpta");
    archive.save(&renamed).map_err(fail)?;
    notes.push(expect_err(io::load_model::<f32>(&renamed), &victim, "renamed tensor")?);
    crate::check(
        same_forward && same_params,
        format!("bitwise forward {same_forward}, parameters and config {same_params}; {}", notes.join("; ")),
    )
}
