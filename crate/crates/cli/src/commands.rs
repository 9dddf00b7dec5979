// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use tlens::anomaly::{self, Calibration, DemoMode, DetectConfig, DetectReport, DetectorKind, McTask};
use tlens::causal::{
    basis_model_influences, causal_basis_extraction, fidelity_report, load_bases, save_bases, CbeConfig,
    ErasureContext, LensReadout,
};
use tlens::lens::{self, Lens, LensTrainConfig, LogitLens};
use tlens::model::{self, batch_windows, split_ranges, tokenize, ModelConfig, TrainConfig};
use tlens::staticlens::{self, EmbeddingTable, Extractor, ProjectionLens, StaticConfig};
use tlens::{aitchison, diagnostics, difficulty, ModelF32, TunedLensF32};

use crate::run::Run;
use crate::{heatmap, Calib, Common, Demos, Detector, LensArgs, Preset, Variant};

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

fn load_model(run: &mut Run, path: &Path) -> Result<ModelF32> {
    run.input("model", path)?;
    ModelF32::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn load_tuned(run: &mut Run, path: &Path, model: &ModelF32) -> Result<TunedLensF32> {
    run.input("lens", path)?;
    let lens = TunedLensF32::load(path).with_context(|| format!("loading lens {}", path.display()))?;
    if lens.config != model.config {
        bail!("lens {} was trained for a different model configuration", path.display());
    }
    Ok(lens)
}

fn load_lens(run: &mut Run, args: &LensArgs, model: &ModelF32) -> Result<Box<dyn Lens<f32>>> {
    run.param("variant", args.variant)?;
    Ok(match args.variant {
        Variant::Plain => Box::new(LogitLens::<f32>::Plain),
        Variant::Extended => Box::new(LogitLens::<f32>::Extended),
        Variant::Debiased | Variant::Tuned => {
            let path = args.lens.as_deref().context("--lens is required for the tuned and debiased variants")?;
            Box::new(load_tuned(run, path, model)?)
        }
    })
}

/// Train, lens and evaluation token slices of a byte corpus.
fn load_corpus(run: &mut Run, path: &Path) -> Result<[Vec<usize>; 3]> {
    run.input("corpus", path)?;
    let ids = tokenize(&fs::read(path)?);
    let [a, b, c] = split_ranges(ids.len());
    Ok([ids[a].to_vec(), ids[b].to_vec(), ids[c].to_vec()])
}

fn load_task(run: &mut Run, path: &Path) -> Result<McTask> {
    run.input("task", path)?;
    McTask::load(path).with_context(|| format!("loading task {}", path.display()))
}

/// `all`, or comma-separated indices and inclusive ranges `a-b`, each
/// below `limit`.
fn parse_layers(spec: &str, limit: usize) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..limit).collect());
    }
    let mut out = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (lo, hi) = match part.split_once('-') {
            Some((a, b)) => (a.parse::<usize>()?, b.parse::<usize>()?),
            None => {
                let v = part.parse::<usize>().with_context(|| format!("bad layer {part:?}"))?;
                (v, v)
            }
        };
        if lo > hi || hi >= limit {
            bail!("layer range {part:?} outside 0..{limit}");
        }
        out.extend(lo..=hi);
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        bail!("no layers selected");
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn train_model(
    corpus: &Path,
    preset: Preset,
    steps: usize,
    batch_size: usize,
    seq_len: usize,
    lr: f64,
    checkpoint_every: usize,
    common: &Common,
) -> Result<()> {
    let mut run = Run::new("train-model", &common.out, common.seed)?;
    run.input("corpus", corpus)?;
    let bytes = fs::read(corpus)?;
    let train_bytes = &bytes[split_ranges(bytes.len())[0].clone()];
    let config = match preset {
        Preset::Desk => ModelConfig::desk(),
        Preset::Tiny => ModelConfig {
            max_seq_len: ModelConfig::desk().max_seq_len,
            ..ModelConfig::tiny(3, 32, 2)
        },
    };
    let train = TrainConfig {
        steps,
        batch_size,
        seq_len,
        lr,
        checkpoint_every,
        seed: common.seed,
        ..Default::default()
    };
    run.param("config", preset)?;
    run.param("train", format!("{train:?}"))?;
    let outcome = model::train_base_model::<f32>(train_bytes, config, &train)?;
    outcome.model.save(run.artifact("model.tlns")?)?;
    for (step, snapshot) in &outcome.checkpoints {
        snapshot.save(run.artifact(&format!("checkpoints/step_{step:06}.tlns"))?)?;
    }
    let losses = csv_string(
        &["step", "loss"],
        outcome.losses.iter().enumerate().map(|(s, l)| vec![(s + 1).to_string(), format!("{l:.9}")]),
    )?;
    run.write("losses.csv", losses)?;
    run.finish()
}

#[allow(clippy::too_many_arguments)]
pub fn train_lens(
    model_path: &Path,
    corpus: &Path,
    steps: usize,
    seq_len: usize,
    batch_tokens: usize,
    variant: Variant,
    include_final_block: bool,
    common: &Common,
) -> Result<()> {
    let mut run = Run::new("train-lens", &common.out, common.seed)?;
    let model = load_model(&mut run, model_path)?;
    let [_, lens_slice, _] = load_corpus(&mut run, corpus)?;
    let train_matrix = match variant {
        Variant::Tuned => true,
        Variant::Debiased => false,
        other => bail!("{other:?} lenses have nothing to train"),
    };
    let cfg = LensTrainConfig {
        steps,
        seq_len,
        batch_tokens,
        include_final_block,
        train_matrix,
        seed: common.seed,
        ..Default::default()
    };
    run.param("variant", variant)?;
    run.param("lens_train", format!("{cfg:?}"))?;
    let (lens, log) = lens::train_translators(&model, &lens_slice, &cfg)?;
    lens.save(run.artifact("lens.tlns")?)?;
    let rows = log.losses.iter().enumerate().flat_map(|(s, per_layer)| {
        per_layer
            .iter()
            .enumerate()
            .map(move |(l, x)| vec![(s + 1).to_string(), l.to_string(), format!("{x:.9}")])
    });
    run.write("lens_loss.csv", csv_string(&["step", "layer", "kl_nats"], rows)?)?;
    run.finish()
}

pub fn eval_lens(model_path: &Path, corpus: &Path, lens: &LensArgs, seq_len: usize, common: &Common) -> Result<()> {
    let mut run = Run::new("eval-lens", &common.out, common.seed)?;
    let model = load_model(&mut run, model_path)?;
    let lens = load_lens(&mut run, lens, &model)?;
    let [_, _, eval] = load_corpus(&mut run, corpus)?;
    let report = lens::eval_per_layer(lens.as_ref(), &model, &eval, seq_len)?;
    run.write("eval.csv", report.to_csv()?)?;
    run.write_json("eval.json", &report)?;
    run.finish()
}

pub fn bias(model_path: &Path, corpus: &Path, lens: &LensArgs, layers: &str, seq_len: usize, common: &Common) -> Result<()> {
    let mut run = Run::new("bias", &common.out, common.seed)?;
    let model = load_model(&mut run, model_path)?;
    let lens = load_lens(&mut run, lens, &model)?;
    let [_, _, eval] = load_corpus(&mut run, corpus)?;
    let layers = parse_layers(layers, model.n_layers() + 1)?;
    run.param("layers", &layers)?;
    let rows = layers
        .iter()
        .map(|&l| Ok(vec![l.to_string(), format!("{:.9}", lens::marginal_bias(lens.as_ref(), &model, &eval, seq_len, l)?)]))
        .collect::<Result<Vec<_>>>()?;
    run.write("bias.csv", csv_string(&["layer", "bias_bits"], rows)?)?;
    run.finish()
}

pub fn transfer(model_path: &Path, lens_path: &Path, corpus: &Path, seq_len: usize, common: &Common) -> Result<()> {
    let mut run = Run::new("transfer", &common.out, common.seed)?;
    let model = load_model(&mut run, model_path)?;
    let lens = load_tuned(&mut run, lens_path, &model)?;
    let [_, _, eval] = load_corpus(&mut run, corpus)?;
    let matrix = lens::transfer_penalty_matrix(&lens, &model, &eval, seq_len)?;
    let rows = matrix.iter().enumerate().flat_map(|(probe, row)| {
        row.iter()
            .enumerate()
            .map(move |(layer, x)| vec![probe.to_string(), layer.to_string(), format!("{x:.9}")])
    });
    run.write("transfer.csv", csv_string(&["translator", "layer", "penalty_nats"], rows)?)?;
    run.finish()
}

pub fn covdrift(model_path: &Path, corpus: &Path, layers: &str, k: usize, seq_len: usize, common: &Common) -> Result<()> {
    let mut run = Run::new("covdrift", &common.out, common.seed)?;
    let model = load_model(&mut run, model_path)?;
    let [_, _, eval] = load_corpus(&mut run, corpus)?;
    let layers = parse_layers(layers, model.n_layers() + 1)?;
    run.param("layers", &layers)?;
    run.param("drop_outlier_dims", k)?;
    let mut rows = Vec::new();
    for &a in &layers {
        for &b in &layers {
            let s = lens::covariance_similarity(&model, &eval, seq_len, a, b, k)?;
            rows.push(vec![a.to_string(), b.to_string(), format!("{s:.9}")]);
        }
    }
    run.write("covdrift.csv", csv_string(&["layer_a", "layer_b", "similarity"], rows)?)?;
    run.finish()
}

#[allow(clippy::too_many_arguments)]
pub fn cbe(
    model_path: &Path,
    lens_path: &Path,
    corpus: &Path,
    layers: &str,
    k: usize,
    max_iter: usize,
    n_seqs: usize,
    seq_len: usize,
    common: &Common,
) -> Result<()> {
    let mut run = Run::new("cbe", &common.out, common.seed)?;
    let model = load_model(&mut run, model_path)?;
    let lens = load_tuned(&mut run, lens_path, &model)?;
    let [_, _, eval] = load_corpus(&mut run, corpus)?;
    let layers = parse_layers(layers, model.n_layers())?;
    run.param("layers", &layers)?;
    run.param("k", k)?;
    run.param("max_iter", max_iter)?;
    run.param("n_seqs", n_seqs)?;
    run.param("seq_len", seq_len)?;
    let (ids, layout) = batch_windows(&eval, seq_len, n_seqs)?;
    let trace = model.forward_batch(&ids, layout)?;
    let mut bases = Vec::with_capacity(layers.len());
    for &layer in &layers {
        let h = &trace.hidden[layer];
        let ctx = ErasureContext::from_states(layer, h)?;
        let f = LensReadout::new(&lens, &model, layer)?;
        let cfg = CbeConfig {
            k,
            max_iter,
            seed: common.seed,
            ..Default::default()
        };
        bases.push(causal_basis_extraction(&f, layer, h, layout, &ctx, &[], &cfg)?);
    }
    save_bases(&bases, run.artifact("bases.tlns")?)?;
    let rows = bases.iter().flat_map(|b| {
        b.influences
            .iter()
            .enumerate()
            .map(move |(i, s)| vec![b.layer.to_string(), i.to_string(), format!("{s:.9e}")])
    });
    run.write("cbe.csv", csv_string(&["layer", "index", "influence_bits"], rows)?)?;
    run.finish()
}

pub fn fidelity(model_path: &Path, bases_path: &Path, corpus: &Path, n_seqs: usize, seq_len: usize, common: &Common) -> Result<()> {
    #[derive(Serialize)]
    struct Summary {
        layer: usize,
        spearman: f64,
    }
    let mut run = Run::new("fidelity", &common.out, common.seed)?;
    let model = load_model(&mut run, model_path)?;
    run.input("bases", bases_path)?;
    let bases = load_bases(bases_path)?;
    let [_, _, eval] = load_corpus(&mut run, corpus)?;
    run.param("n_seqs", n_seqs)?;
    run.param("seq_len", seq_len)?;
    let (ids, layout) = batch_windows(&eval, seq_len, n_seqs)?;
    let trace = model.forward_batch(&ids, layout)?;
    let mut summary = Vec::new();
    for basis in &bases {
        let ctx = ErasureContext::from_states(basis.layer, &trace.hidden[basis.layer])?;
        let model_bits = basis_model_influences(basis, &model, &ids, layout, &ctx)?;
        let report = fidelity_report(basis.layer, &basis.influences, &model_bits)?;
        run.write(&format!("fidelity_layer{}.csv", basis.layer), report.to_csv()?)?;
        summary.push(Summary {
            layer: basis.layer,
            spearman: report.spearman,
        });
    }
    run.write_json("fidelity.json", &summary)?;
    run.finish()
}

#[allow(clippy::too_many_arguments)]
pub fn align(
    model_path: &Path,
    lens: &LensArgs,
    bases_path: &Path,
    corpus: &Path,
    m: usize,
    n_seqs: usize,
    seq_len: usize,
    common: &Common,
) -> Result<()> {
    let mut run = Run::new("align", &common.out, common.seed)?;
    let model = load_model(&mut run, model_path)?;
    let lens = load_lens(&mut run, lens, &model)?;
    run.input("bases", bases_path)?;
    let bases = load_bases(bases_path)?;
    let [_, _, eval] = load_corpus(&mut run, corpus)?;
    run.param("m", m)?;
    run.param("n_seqs", n_seqs)?;
    run.param("seq_len", seq_len)?;
    let (ids, layout) = batch_windows(&eval, seq_len, n_seqs)?;
    let cfg = aitchison::AlignmentConfig { m, seed: common.seed };
    let rows = aitchison::alignment_sweep(&model, lens.as_ref(), &bases, &ids, layout, &cfg)?;
    run.write("align.csv", aitchison::alignment_csv(&rows)?)?;
    run.write_json("align.json", &rows)?;
    run.finish()
}

#[allow(clippy::too_many_arguments)]
pub fn inject_eval(
    model_path: &Path,
    lens: &LensArgs,
    task_path: &Path,
    detector: Detector,
    inject: bool,
    splits: usize,
    bootstrap: usize,
    common: &Common,
) -> Result<()> {
    let mut run = Run::new("inject-eval", &common.out, common.seed)?;
    let model = load_model(&mut run, model_path)?;
    let lens = load_lens(&mut run, lens, &model)?;
    let task = load_task(&mut run, task_path)?;
    let kind = match detector {
        Detector::Iforest => DetectorKind::IForest,
        Detector::Lof => DetectorKind::Lof,
        Detector::Srm => DetectorKind::Srm,
    };
    let cfg = DetectConfig {
        n_splits: splits,
        inject,
        bootstrap,
        seed: common.seed,
        ..Default::default()
    };
    run.param("detector", detector)?;
    run.param("detect", &cfg)?;
    let report = anomaly::detect_eval(&task, &model, lens.as_ref(), kind, &cfg)?;
    run.write("detect.csv", csv_string(&DetectReport::CSV_HEADER, [report.csv_record().to_vec()])?)?;
    run.write_json("detect.json", &report)?;
    run.finish()
}

pub fn sweep_accuracy(model_path: &Path, lens: &LensArgs, task_path: &Path, demos: Demos, calibration: Calib, common: &Common) -> Result<()> {
    let mut run = Run::new("sweep-accuracy", &common.out, common.seed)?;
    let model = load_model(&mut run, model_path)?;
    let lens = load_lens(&mut run, lens, &model)?;
    let task = load_task(&mut run, task_path)?;
    run.param("demos", demos)?;
    run.param("calibration", calibration)?;
    let demos = match demos {
        Demos::None => DemoMode::None,
        Demos::Correct => DemoMode::Correct,
        Demos::Incorrect => DemoMode::Incorrect,
    };
    let calibration = match calibration {
        Calib::None => Calibration::None,
        Calib::Median => Calibration::Median,
    };
    let acc = anomaly::layer_accuracy_sweep(&task, &model, lens.as_ref(), demos, calibration)?;
    let rows = acc.iter().enumerate().map(|(l, a)| vec![l.to_string(), format!("{a:.9}")]);
    run.write("accuracy.csv", csv_string(&["layer", "accuracy"], rows)?)?;
    run.finish()
}

pub fn depth(checkpoints: &Path, lens_path: &Path, task_path: &Path, common: &Common) -> Result<()> {
    #[derive(Serialize)]
    struct Summary {
        rho_tuned: Option<f64>,
        rho_logit: Option<f64>,
        n_checkpoints: usize,
    }
    let mut run = Run::new("depth", &common.out, common.seed)?;
    run.input("checkpoints", checkpoints)?;
    let mut files: Vec<PathBuf> = fs::read_dir(checkpoints)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "tlns"))
        .collect();
    files.sort();
    let models = files
        .iter()
        .map(|p| ModelF32::load(p).with_context(|| format!("loading checkpoint {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let last = models.last().context("no .tlns checkpoints found")?;
    let lens = load_tuned(&mut run, lens_path, last)?;
    let task = load_task(&mut run, task_path)?;
    let report = difficulty::difficulty_correlation(&task, &models, &lens, DemoMode::None)?;
    run.write("depth.csv", report.to_csv()?)?;
    run.write_json(
        "depth.json",
        &Summary {
            rho_tuned: report.rho_tuned,
            rho_logit: report.rho_logit,
            n_checkpoints: models.len(),
        },
    )?;
    run.finish()
}

pub fn diagnostics(model_path: &Path, corpus: &Path, seq_len: usize, dim: Option<usize>, n: usize, common: &Common) -> Result<()> {
    #[derive(Serialize)]
    struct Baseline {
        dim: usize,
        n: usize,
        p5: f64,
    }
    let mut run = Run::new("diagnostics", &common.out, common.seed)?;
    let model = load_model(&mut run, model_path)?;
    let [_, _, eval] = load_corpus(&mut run, corpus)?;
    run.param("seq_len", seq_len)?;
    let rows = diagnostics::grad_residual_alignment(&model, &eval, seq_len)?;
    run.write("grad_alignment.csv", diagnostics::alignment_csv(&rows)?)?;
    let deletion = diagnostics::layer_deletion_sweep(&model, &eval, seq_len)?;
    run.write("deletion.csv", deletion.to_csv()?)?;
    if let Some(dim) = dim {
        let p5 = diagnostics::random_cosine_baseline(dim, n, 5.0, common.seed)?;
        run.write_json("random_cosine.json", &Baseline { dim, n, p5 })?;
    }
    run.finish()
}

#[allow(clippy::too_many_arguments)]
pub fn staticlens(
    model_path: &Path,
    lens_path: Option<&Path>,
    embeddings: Option<&Path>,
    layers: &str,
    k: usize,
    shuffles: usize,
    extractors: &str,
    common: &Common,
) -> Result<()> {
    let mut run = Run::new("staticlens", &common.out, common.seed)?;
    let model = load_model(&mut run, model_path)?;
    let tuned = lens_path.map(|p| load_tuned(&mut run, p, &model)).transpose()?;
    let projection = match &tuned {
        Some(l) => ProjectionLens::Tuned(l),
        None => ProjectionLens::Logit,
    };
    let table = match embeddings {
        Some(p) => {
            run.input("embeddings", p)?;
            EmbeddingTable::load(p)?
        }
        None => EmbeddingTable::from_unembedding(&model)?,
    };
    let layers = parse_layers(layers, model.n_layers())?;
    let extractors: Vec<Extractor> = if extractors == "all" {
        Extractor::ALL.to_vec()
    } else {
        extractors.split(',').map(|s| Extractor::parse(s.trim())).collect::<tlens::Result<_>>()?
    };
    let cfg = StaticConfig {
        k,
        n_shuffles: shuffles,
        seed: common.seed,
    };
    run.param("layers", &layers)?;
    run.param("extractors", extractors.iter().map(|e| e.name()).collect::<Vec<_>>())?;
    run.param("k", k)?;
    run.param("shuffles", shuffles)?;
    let mut rows = Vec::new();
    for &e in &extractors {
        for &l in &layers {
            rows.extend(staticlens::static_scores(&model, projection, &table, e, l, &cfg)?);
        }
    }
    run.write("static.csv", staticlens::static_scores_csv(&rows)?)?;
    run.finish()
}

pub fn heatmap(
    model_path: &Path,
    lens: &LensArgs,
    text: Option<&str>,
    corpus: Option<&Path>,
    seq_len: usize,
    common: &Common,
) -> Result<()> {
    let mut run = Run::new("heatmap", &common.out, common.seed)?;
    let model = load_model(&mut run, model_path)?;
    let lens = load_lens(&mut run, lens, &model)?;
    let ids = match (text, corpus) {
        (Some(t), _) => {
            run.param("text", t)?;
            tokenize(t.as_bytes())
        }
        (None, Some(c)) => {
            let [_, _, eval] = load_corpus(&mut run, c)?;
            run.param("seq_len", seq_len)?;
            eval.into_iter().take(seq_len).collect()
        }
        (None, None) => bail!("give --text or --corpus"),
    };
    let grid = lens::prediction_grid(lens.as_ref(), &model, &ids)?;
    run.write("heatmap.svg", heatmap::render(&grid, &ids)?)?;
    run.write_json("heatmap.json", &grid)?;
    run.finish()
}
