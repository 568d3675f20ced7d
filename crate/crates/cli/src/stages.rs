//! Pipeline stages. Each writes its artifacts under `out` and returns the
//! metrics that go into `metrics.json`. Metrics hold no absolute paths or
//! timings, so a rerun elsewhere reproduces them byte for byte.

use std::fs;
use std::path::{Path, PathBuf};

use coordfuse::datamodel::{load_manifest, make_splits, synth_dataset, Fold, Manifest, Session, SplitAssignment};
use coordfuse::embeddings::{mean_pool_windows, read_matrix, stack_session, write_matrix};
use coordfuse::fusion::{build_model, predict_dataset, train_regressor, BranchConfig, FusionModel, SessionInputs, Variant};
use coordfuse::fvtc::{fvtc_matrix, FvtcMatrix};
use coordfuse::metrics::{evaluate, EvalReport, ReportTable};
use coordfuse::tensor::{load_checkpoint, save_checkpoint};
use coordfuse::vqvae::{codebook_perplexity, encode_matrices, train_vqvae, VqvaeModel};
use coordfuse::Error;
use log::info;
use serde_json::{json, Map, Value};

use crate::config::RunConfig;
use crate::error::{io_err, CliError, CliResult};
use crate::gradsuite;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VQVAE_CKPT: &str = "vqvae.ckpt";

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

/// Order-sensitive digest of a stream of floats, for metrics comparisons.
fn checksum<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

fn invalid_data(record: impl Into<String>, reason: impl Into<String>) -> CliError {
    CliError::Core(Error::Validation {
        record: record.into(),
        reason: reason.into(),
    })
}

fn fvtc_file(dir: &Path, session: &Session, index: usize) -> PathBuf {
    dir.join(format!("{}_{index}.fmat", session.file_stem()))
}

fn load_session_fvtc(cfg: &RunConfig, dir: &Path, session: &Session) -> CliResult<Vec<FvtcMatrix>> {
    session
        .segments
        .iter()
        .map(|seg| {
            let m = FvtcMatrix::read(fvtc_file(dir, session, seg.index))?;
            if m.max_delay() != cfg.fvtc.max_delay {
                return Err(invalid_data(
                    session.key(),
                    format!("FVTC matrix has D={}, config expects {}", m.max_delay(), cfg.fvtc.max_delay),
                ));
            }
            Ok(m)
        })
        .collect()
}

fn splits(cfg: &RunConfig, manifest: &Manifest) -> CliResult<SplitAssignment> {
    Ok(make_splits(manifest, cfg.split.ratios, cfg.split_seed())?)
}

fn split_json(split: &SplitAssignment) -> Value {
    let c = split.counts();
    json!({"train": c[0], "val": c[1], "test": c[2]})
}

pub fn synth(cfg: &RunConfig, out: &Path) -> CliResult<Value> {
    let dir = out.join("data");
    let manifest = synth_dataset(&cfg.synth, &dir)?;
    let severities: Vec<f64> = manifest.sessions.iter().map(|s| f64::from(s.severity)).collect();
    info!("synthesized {} sessions under {}", manifest.sessions.len(), dir.display());
    Ok(json!({
        "manifest": format!("data/{MANIFEST_FILE}"),
        "subjects": manifest.subjects().len(),
        "sessions": manifest.sessions.len(),
        "segments": manifest.segment_count(),
        "severity_mean": severities.iter().sum::<f64>() / severities.len() as f64,
    }))
}

pub fn fvtc(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> CliResult<Value> {
    let manifest = load_manifest(manifest_path)?;
    manifest.validate(true)?;
    let dir = out.join("fvtc");
    ensure_dir(&dir)?;
    let mut all = Vec::new();
    let mut degenerate = 0;
    for session in &manifest.sessions {
        for seg in &session.segments {
            let segment = manifest.load_segment(session, seg)?;
            let m = fvtc_matrix(&segment, cfg.fvtc.max_delay, cfg.fvtc.normalize)?;
            degenerate += m.degenerate_channels().iter().filter(|&&d| d).count();
            m.write(fvtc_file(&dir, session, seg.index))?;
            all.extend(m.values().iter().copied());
        }
    }
    info!("wrote {} FVTC matrices", manifest.segment_count());
    Ok(json!({
        "matrices": manifest.segment_count(),
        "D": cfg.fvtc.max_delay,
        "normalized": cfg.fvtc.normalize,
        "degenerate_channels": degenerate,
        "checksum": checksum(&all),
    }))
}

pub fn train_vqvae_stage(cfg: &RunConfig, manifest_path: &Path, fvtc_dir: &Path, out: &Path) -> CliResult<Value> {
    let manifest = load_manifest(manifest_path)?;
    manifest.validate(false)?;
    let split = splits(cfg, &manifest)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for session in &manifest.sessions {
        let mats = load_session_fvtc(cfg, fvtc_dir, session)?;
        match split.fold_of(&session.subject_id) {
            Some(Fold::Train) => train.extend(mats),
            Some(Fold::Val) => val.extend(mats),
            _ => {}
        }
    }
    info!("training VQ-VAE on {} matrices ({} validation)", train.len(), val.len());
    let result = train_vqvae(&train, &val, cfg.vqvae.model.clone(), cfg.vqvae.train, cfg.seed)?;
    let models = out.join("models");
    ensure_dir(&models)?;
    save_checkpoint(
        models.join(VQVAE_CKPT),
        &result.model.to_checkpoint(result.best_epoch, cfg.seed, None),
    )?;
    write_json(&out.join("vqvae_history.json"), &result.history)?;

    let latents = result.model.latents(&train.iter().map(|m| m.values()).collect::<Vec<_>>())?;
    let codebook = result.model.codebook();
    let indices: Vec<usize> = latents
        .iter()
        .flat_map(|g| g.rows().into_iter().map(|r| codebook.nearest(r.as_slice().expect("row is contiguous"))).collect::<Vec<_>>())
        .collect();
    let first = result.history.first().map(|e| e.train.total);
    let last = result.history.last().map(|e| e.train.total);
    let best = result.history.iter().find(|e| e.epoch == result.best_epoch).map(|e| e.val);
    Ok(json!({
        "model": format!("models/{VQVAE_CKPT}"),
        "split": split_json(&split),
        "train_matrices": train.len(),
        "val_matrices": val.len(),
        "epochs_run": result.history.len(),
        "best_epoch": result.best_epoch,
        "first_train_total": first,
        "last_train_total": last,
        "best_val": best,
        "codebook_perplexity": codebook_perplexity(&indices)?,
    }))
}

pub fn encode(cfg: &RunConfig, model_path: &Path, manifest_path: &Path, fvtc_dir: &Path, out: &Path) -> CliResult<Value> {
    let model = VqvaeModel::from_checkpoint(&load_checkpoint(model_path)?)?;
    let manifest = load_manifest(manifest_path)?;
    manifest.validate(true)?;
    let artic_dir = out.join("embeddings").join("artic");
    let speech_dir = out.join("embeddings").join("speech");
    ensure_dir(&artic_dir)?;
    let mut artic_sum = Vec::new();
    let mut speech_sum = Vec::new();
    let mut speech_sessions = 0;
    let mut speech_dim = None;
    for session in &manifest.sessions {
        let mats = load_session_fvtc(cfg, fvtc_dir, session)?;
        let artic = encode_matrices(&model, &mats)?;
        write_matrix(artic_dir.join(format!("{}.fmat", session.file_stem())), &artic, Map::new())?;
        artic_sum.extend(artic.iter().copied());

        if session.segments.iter().all(|s| s.ssl_path.is_some()) {
            let pooled = session
                .segments
                .iter()
                .map(|seg| mean_pool_windows(&manifest.load_windows(session, seg)?, seg.index))
                .collect::<coordfuse::Result<Vec<_>>>()?;
            let stack = stack_session(&pooled, &session.subject_id, &session.session_id)?;
            ensure_dir(&speech_dir)?;
            write_matrix(speech_dir.join(format!("{}.fmat", session.file_stem())), &stack.values, Map::new())?;
            speech_sum.extend(stack.values.iter().copied());
            speech_dim = Some(stack.dim());
            speech_sessions += 1;
        }
    }
    info!("encoded {} sessions", manifest.sessions.len());
    Ok(json!({
        "embeddings": "embeddings",
        "sessions": manifest.sessions.len(),
        "artic_dim": model.config.embedding_len(),
        "speech_sessions": speech_sessions,
        "speech_dim": speech_dim,
        "artic_checksum": checksum(&artic_sum),
        "speech_checksum": checksum(&speech_sum),
    }))
}

fn load_matrix_opt(path: PathBuf, needed: bool, what: &str, key: &str) -> CliResult<Option<ndarray::Array2<f64>>> {
    if !needed {
        return Ok(None);
    }
    if !path.exists() {
        return Err(invalid_data(key, format!("no {what} embeddings at {}", path.display())));
    }
    Ok(Some(read_matrix(path)?))
}

/// Session inputs per fold for the modalities `variants` need.
fn load_inputs(
    manifest: &Manifest,
    split: &SplitAssignment,
    emb_dir: &Path,
    speech: bool,
    artic: bool,
) -> CliResult<[Vec<SessionInputs>; 3]> {
    let mut folds: [Vec<SessionInputs>; 3] = Default::default();
    for session in &manifest.sessions {
        let stem = format!("{}.fmat", session.file_stem());
        let key = session.key();
        let input = SessionInputs {
            id: key.clone(),
            severity: f64::from(session.severity),
            speech: load_matrix_opt(emb_dir.join("speech").join(&stem), speech, "speech", &key)?,
            artic: load_matrix_opt(emb_dir.join("artic").join(&stem), artic, "articulatory", &key)?,
        };
        let fold = split
            .fold_of(&session.subject_id)
            .ok_or_else(|| invalid_data(&session.subject_id, "subject has no fold"))?;
        folds[fold.index()].push(input);
    }
    Ok(folds)
}

fn input_dim(sessions: &[SessionInputs], pick: fn(&SessionInputs) -> Option<&ndarray::Array2<f64>>) -> Option<usize> {
    sessions.iter().find_map(|s| pick(s).map(|m| m.ncols()))
}

fn branch_with_dim(base: &BranchConfig, dim: Option<usize>) -> Option<BranchConfig> {
    dim.map(|d| BranchConfig {
        input_dim: d,
        ..base.clone()
    })
}

fn report_row(model: &FusionModel, sessions: &[SessionInputs]) -> CliResult<EvalReport> {
    let v = model.config.variant;
    Ok(evaluate(&predict_dataset(model, sessions)?, v.model_label(), v.features_label())?)
}

pub fn train(cfg: &RunConfig, variants: &[Variant], manifest_path: &Path, emb_dir: &Path, out: &Path) -> CliResult<Value> {
    if variants.is_empty() {
        return Err(CliError::Config("no variants to train".into()));
    }
    let manifest = load_manifest(manifest_path)?;
    manifest.validate(false)?;
    let split = splits(cfg, &manifest)?;
    let speech = variants.iter().any(|v| v.uses_speech());
    let artic = variants.iter().any(|v| v.uses_artic());
    let [tr, va, te] = load_inputs(&manifest, &split, emb_dir, speech, artic)?;
    let speech_dim = input_dim(&tr, |s| s.speech.as_ref());
    let artic_dim = input_dim(&tr, |s| s.artic.as_ref());

    let models_dir = out.join("models");
    ensure_dir(&models_dir)?;
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    let mut trained: Vec<FusionModel> = Vec::new();
    // wall times stay out of the metrics so reruns compare bytewise
    let mut timings = Map::new();
    for &variant in variants {
        let clock = std::time::Instant::now();
        let mut model = build_model(
            variant,
            branch_with_dim(&cfg.regressor.speech, speech_dim),
            branch_with_dim(&cfg.regressor.artic, artic_dim),
            &cfg.regressor.head_hidden,
            cfg.seed,
        )?;
        model.config.cross_attention = cfg.regressor.cross_attention;
        info!("training {variant} on {} sessions ({} validation)", tr.len(), va.len());
        let result = train_regressor(model, &tr, &va, cfg.regressor.train, cfg.seed)?;
        save_checkpoint(
            models_dir.join(format!("{variant}.ckpt")),
            &result.model.to_checkpoint(result.best_epoch, cfg.seed, None),
        )?;
        write_json(&out.join(format!("history_{variant}.json")), &result.history)?;
        let test = report_row(&result.model, &te)?;
        let train_row = report_row(&result.model, &tr)?;
        summaries.push(json!({
            "variant": variant,
            "parameters": result.model.params.num_elements(),
            "epochs_run": result.history.len(),
            "best_epoch": result.best_epoch,
            "train": train_row,
            "test": test,
        }));
        rows.push(test);
        trained.push(result.model);
        timings.insert(variant.to_string(), json!(clock.elapsed().as_secs_f64()));
    }
    write_json(&out.join("timings.json"), &timings)?;
    let table = ReportTable::new(rows);
    write_text(&out.join("report.json"), &(table.to_json() + "\n"))?;
    write_text(&out.join("report.txt"), &table.to_text())?;

    let with = trained.iter().find(|m| m.config.variant == Variant::FusionMha);
    let without = trained.iter().find(|m| m.config.variant == Variant::FusionNomha);
    let ablation = match (with, without) {
        (Some(a), Some(b)) => {
            let names_b: Vec<&str> = b.params.names().collect();
            let diff: Vec<String> = a.params.names().filter(|n| !names_b.contains(n)).map(String::from).collect();
            json!({
                "removed_parameters": diff,
                "difference_is_mha": diff == a.mha_params() && names_b.iter().all(|n| a.params.get(n).is_some()),
            })
        }
        _ => Value::Null,
    };
    Ok(json!({
        "split": split_json(&split),
        "variants": summaries,
        "report": table,
        "ablation": ablation,
    }))
}

pub fn eval(
    cfg: &RunConfig,
    models: &[PathBuf],
    manifest_path: &Path,
    emb_dir: &Path,
    fold: Fold,
    out: &Path,
) -> CliResult<Value> {
    if models.is_empty() {
        return Err(CliError::Config("no models to evaluate".into()));
    }
    let loaded = models
        .iter()
        .map(|p| Ok(FusionModel::from_checkpoint(&load_checkpoint(p)?)?))
        .collect::<CliResult<Vec<_>>>()?;
    let manifest = load_manifest(manifest_path)?;
    manifest.validate(false)?;
    let split = splits(cfg, &manifest)?;
    let speech = loaded.iter().any(|m| m.config.speech.is_some());
    let artic = loaded.iter().any(|m| m.config.artic.is_some());
    let folds = load_inputs(&manifest, &split, emb_dir, speech, artic)?;
    let sessions = &folds[fold.index()];

    let mut rows = Vec::new();
    let mut csv = String::from("model,session,predicted,actual\n");
    for model in &loaded {
        let preds = predict_dataset(model, sessions)?;
        for p in &preds {
            csv.push_str(&format!("{},{},{},{}\n", model.config.variant, p.session, p.predicted, p.actual));
        }
        let v = model.config.variant;
        rows.push(evaluate(&preds, v.model_label(), v.features_label())?);
    }
    let table = ReportTable::new(rows);
    write_text(&out.join("report.json"), &(table.to_json() + "\n"))?;
    write_text(&out.join("report.txt"), &table.to_text())?;
    write_text(&out.join("predictions.csv"), &csv)?;
    println!("{}", table.to_text().trim_end());
    Ok(json!({
        "fold": fold,
        "variants": loaded.iter().map(|m| m.config.variant).collect::<Vec<_>>(),
        "report": table,
    }))
}

pub fn gradcheck(cfg: &RunConfig, out: &Path) -> CliResult<Value> {
    let results = gradsuite::run_suite(cfg.seed)?;
    let width = results.iter().map(|r| r.op.len()).max().unwrap_or(2);
    for r in &results {
        println!(
            "{:width$}  {:.3e}  {}",
            r.op,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    write_json(&out.join("gradcheck.json"), &results)?;
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.op.as_str()).collect();
    let metrics = json!({"tolerance": gradsuite::TOLERANCE, "step": gradsuite::STEP, "ops": results});
    if !failed.is_empty() {
        write_json(&out.join("metrics.json"), &metrics)?;
        return Err(CliError::GradCheck(format!("{} above tolerance", failed.join(", "))));
    }
    Ok(metrics)
}

/// synth, fvtc, train-vqvae, encode, train and test-fold eval in one run.
pub fn pipeline(cfg: &RunConfig, variants: &[Variant], out: &Path) -> CliResult<Value> {
    let synth_m = synth(cfg, out)?;
    let manifest = out.join("data").join(MANIFEST_FILE);
    let fvtc_m = fvtc(cfg, &manifest, out)?;
    let vq_m = train_vqvae_stage(cfg, &manifest, &out.join("fvtc"), out)?;
    let enc_m = encode(cfg, &out.join("models").join(VQVAE_CKPT), &manifest, &out.join("fvtc"), out)?;
    let train_m = train(cfg, variants, &manifest, &out.join("embeddings"), out)?;
    let eval_dir = out.join("eval");
    ensure_dir(&eval_dir)?;
    let models: Vec<PathBuf> = variants.iter().map(|v| out.join("models").join(format!("{v}.ckpt"))).collect();
    let eval_m = eval(cfg, &models, &manifest, &out.join("embeddings"), Fold::Test, &eval_dir)?;
    Ok(json!({
        "synth": synth_m,
        "fvtc": fvtc_m,
        "train_vqvae": vq_m,
        "encode": enc_m,
        "train": train_m,
        "eval": eval_m,
    }))
}
