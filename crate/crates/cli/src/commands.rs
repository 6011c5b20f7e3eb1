//! Command implementations. Every command resolves its configuration, runs
//! through tether-core, writes its artifacts plus a manifest, and maps
//! failures onto the documented exit codes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use tether_core::encoder::{Checkpoint, EncoderParams, EncoderSnapshot};
use tether_core::eval::{evaluate, write_embedding_dump, MetricsReport, Protocol, SplitTag};
use tether_core::gradcheck::{check_all, CheckOptions};
use tether_core::synthdata::{
    generate_classification, generate_identities, load_splits, save_splits, DatasetKind,
    DatasetSplits,
};
use tether_core::textfmt::csv_f64;
use tether_core::trainer::{
    caption_table_from_centroids, recommend_alpha, run_pretraining, run_training, ModelHead,
    RunRecord, TrainOutcome,
};
use tether_core::Error as CoreError;

use crate::config::JobConfig;
use crate::exit_codes;
use crate::manifest::RunManifest;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    MissingInput(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    CheckFailed(String),
    #[error("{0}")]
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => exit_codes::CONFIG,
            CliError::MissingInput(_) => exit_codes::MISSING_INPUT,
            CliError::Divergence(_) => exit_codes::DIVERGENCE,
            CliError::CheckFailed(_) => exit_codes::CHECK_FAILED,
            CliError::Other(_) => exit_codes::FAILURE,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match &e {
            CoreError::InvalidConfig(_) | CoreError::InvalidSpec(_) | CoreError::Json(_) => {
                CliError::Config(e.to_string())
            }
            CoreError::Io(_) | CoreError::DataFormat(_) => CliError::MissingInput(e.to_string()),
            CoreError::DivergenceDetected { .. }
            | CoreError::NonFinite { .. }
            | CoreError::NonFiniteGradient => CliError::Divergence(e.to_string()),
            _ => CliError::Other(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::MissingInput(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, CliError>;

pub struct Context {
    pub config: JobConfig,
    pub config_path: Option<PathBuf>,
    pub command: String,
    pub out: PathBuf,
}

impl Context {
    pub fn prepare(
        command: &str,
        config_path: Option<&Path>,
        out: &Path,
        seed_override: Option<u64>,
    ) -> CliResult<Self> {
        let mut config = match config_path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::MissingInput(format!("cannot read config {}: {e}", path.display()))
                })?;
                serde_json::from_str::<JobConfig>(&text).map_err(|e| {
                    CliError::Config(format!("cannot parse config {}: {e}", path.display()))
                })?
            }
            None => JobConfig::default(),
        };
        if let Some(seed) = seed_override {
            config.seed = seed;
        }
        std::fs::create_dir_all(out)?;
        Ok(Self {
            config,
            config_path: config_path.map(Path::to_path_buf),
            command: command.to_string(),
            out: out.to_path_buf(),
        })
    }

    fn manifest(&self) -> RunManifest {
        RunManifest::new(
            &self.command,
            self.config_path.as_deref(),
            self.config.clone(),
            &self.out,
        )
    }

    fn data_dir(&self) -> CliResult<&Path> {
        self.config
            .data
            .as_deref()
            .ok_or_else(|| CliError::Config("config field \"data\" is not set".into()))
    }

    fn pretrained_path(&self) -> CliResult<&Path> {
        self.config
            .pretrained_checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Config("config field \"pretrained_checkpoint\" is not set".into()))
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult {
    std::fs::write(path, serde_json::to_string_pretty(value).expect("serializable"))?;
    Ok(())
}

fn load_dataset(ctx: &Context, manifest: &mut RunManifest) -> CliResult<DatasetSplits> {
    let dir = ctx.data_dir()?;
    manifest.record_input(&dir.join("data.csv"));
    manifest.record_input(&dir.join("spec.json"));
    Ok(load_splits(dir)?)
}

fn load_checkpoint(path: &Path, manifest: &mut RunManifest) -> CliResult<Checkpoint> {
    manifest.record_input(path);
    Checkpoint::load(path).map_err(|e| match e {
        CoreError::Io(io) => CliError::MissingInput(format!("{}: {io}", path.display())),
        other => other.into(),
    })
}

fn write_record(
    record: &RunRecord,
    manifest: &mut RunManifest,
    out: &Path,
    stem: &str,
) -> CliResult {
    let csv_path = out.join(format!("{stem}_steps.csv"));
    std::fs::write(&csv_path, record.to_csv())?;
    manifest.record_output(&csv_path);
    let json_path = out.join(format!("{stem}_record.json"));
    write_json(
        &json_path,
        &serde_json::json!({ "manifest": manifest.echo(), "record": record }),
    )?;
    manifest.record_output(&json_path);
    Ok(())
}

pub fn gen_data(ctx: &Context) -> CliResult {
    let mut manifest = ctx.manifest();
    let spec = ctx.config.synthetic_spec();
    let splits = match ctx.config.data_kind {
        DatasetKind::Classification => generate_classification(&spec)?,
        DatasetKind::Identities => generate_identities(&spec)?,
    };
    save_splits(&splits, &ctx.out)?;
    manifest.record_output(&ctx.out.join("data.csv"));
    manifest.record_output(&ctx.out.join("spec.json"));
    manifest.save()?;
    println!(
        "generated {} dataset: {} pretrain / {} finetune / {} test_id / {} test_ood samples",
        match splits.kind {
            DatasetKind::Classification => "classification",
            DatasetKind::Identities => "identity",
        },
        splits.pretrain.len(),
        splits.finetune_id.len(),
        splits.test_id.len(),
        splits.test_ood.len()
    );
    Ok(())
}

pub fn pretrain(ctx: &Context) -> CliResult {
    let mut manifest = ctx.manifest();
    let splits = load_dataset(ctx, &mut manifest)?;
    let arch = ctx.config.encoder_arch();
    if arch.input_dim != splits.spec.input_dim {
        return Err(CliError::Config(format!(
            "encoder input_dim {} does not match dataset input_dim {}",
            arch.input_dim, splits.spec.input_dim
        )));
    }
    let (params, record) = run_pretraining(&arch, &splits, &ctx.config.pretrain_config())?;

    let ckpt_path = ctx.out.join("checkpoint.json");
    Checkpoint {
        encoder: params,
        caption_table: None,
        arc_weights: None,
    }
    .save(&ckpt_path)?;
    manifest.record_output(&ckpt_path);
    write_record(&record, &mut manifest, &ctx.out, "pretrain")?;
    manifest.save()?;

    if record.diverged {
        return Err(CliError::Divergence("pretraining diverged".into()));
    }
    println!(
        "pretrained encoder over {} steps, final loss {:.6}",
        record.steps.len(),
        record.final_total_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn save_trained(outcome: &TrainOutcome, path: &Path) -> CliResult {
    let (caption_table, arc_weights) = match &outcome.model.head {
        ModelHead::None => (None, None),
        ModelHead::CaptionTable(t) => (Some(t.clone()), None),
        ModelHead::ArcWeights(w) => (None, Some(w.clone())),
    };
    Checkpoint {
        encoder: outcome.model.encoder.clone(),
        caption_table,
        arc_weights,
    }
    .save(path)?;
    Ok(())
}

pub fn train(ctx: &Context) -> CliResult {
    let mut manifest = ctx.manifest();
    let splits = load_dataset(ctx, &mut manifest)?;
    let pretrained = load_checkpoint(ctx.pretrained_path()?, &mut manifest)?;
    let outcome = run_training(&pretrained.encoder, &splits, &ctx.config.train_config())?;

    let ckpt_path = ctx.out.join("checkpoint.json");
    save_trained(&outcome, &ckpt_path)?;
    manifest.record_output(&ckpt_path);
    write_record(&outcome.record, &mut manifest, &ctx.out, "train")?;
    manifest.save()?;

    if outcome.record.diverged {
        return Err(CliError::Divergence(format!(
            "loss became non-finite after {} steps",
            outcome.record.steps.len()
        )));
    }
    println!(
        "fine-tuned for {} steps, final loss {:.6}",
        outcome.record.steps.len(),
        outcome.record.final_total_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn split_tag(name: &str) -> SplitTag {
    if name == "test_ood" {
        SplitTag::Ood
    } else {
        SplitTag::Id
    }
}

/// Evaluates `model` on one split, building a centroid caption table from
/// the reference encoder when the checkpoint does not carry one.
fn evaluate_checkpoint(
    model: &Checkpoint,
    reference: &EncoderParams,
    splits: &DatasetSplits,
    split_name: &str,
) -> CliResult<MetricsReport> {
    let snapshot = EncoderSnapshot::of(reference);
    let data = splits.split(split_name)?;
    let class_names = splits.class_names();
    let report = match splits.kind {
        DatasetKind::Classification => {
            let fallback;
            let table = match &model.caption_table {
                Some(t) => t,
                None => {
                    fallback =
                        caption_table_from_centroids(reference, &splits.pretrain, &class_names)?;
                    &fallback
                }
            };
            evaluate(
                &model.encoder,
                &snapshot,
                data,
                &Protocol::Classification {
                    table,
                    class_names: &class_names,
                },
                split_tag(split_name),
            )?
        }
        DatasetKind::Identities => evaluate(
            &model.encoder,
            &snapshot,
            data,
            &Protocol::Verification,
            split_tag(split_name),
        )?,
    };
    Ok(report)
}

pub fn eval(ctx: &Context) -> CliResult {
    let mut manifest = ctx.manifest();
    let splits = load_dataset(ctx, &mut manifest)?;
    let reference = load_checkpoint(ctx.pretrained_path()?, &mut manifest)?;
    let model = match &ctx.config.checkpoint {
        Some(path) => load_checkpoint(path, &mut manifest)?,
        None => reference.clone(),
    };

    let split_name = ctx.config.eval_split.as_str();
    let mut report = evaluate_checkpoint(&model, &reference.encoder, &splits, split_name)?;
    report.config = serde_json::to_value(&ctx.config).expect("serializable");

    let json_path = ctx.out.join("metrics.json");
    write_json(
        &json_path,
        &serde_json::json!({ "manifest": manifest.echo(), "report": report }),
    )?;
    manifest.record_output(&json_path);

    let csv_path = ctx.out.join("metrics.csv");
    std::fs::write(&csv_path, report.to_csv())?;
    manifest.record_output(&csv_path);

    let data = splits.split(split_name)?;
    let emb = tether_core::encoder::forward_vision(&model.encoder, &data.features_matrix())?;
    let dump_path = ctx.out.join("embeddings.csv");
    write_embedding_dump(&emb, &data.labels(), &dump_path)?;
    manifest.record_output(&dump_path);
    manifest.save()?;

    for (name, value) in &report.metrics {
        println!("{name} = {value:.6}");
    }
    Ok(())
}

pub fn gradcheck(ctx: &Context) -> CliResult {
    let mut manifest = ctx.manifest();
    let opts = CheckOptions {
        instances: ctx.config.gradcheck_instances,
        seed: ctx.config.seed,
        corrupt: ctx.config.corrupt_gradient.clone(),
    };
    let tolerance = ctx.config.gradcheck_tolerance;
    let checks = check_all(&opts)?;

    let json_path = ctx.out.join("gradcheck.json");
    write_json(
        &json_path,
        &serde_json::json!({
            "manifest": manifest.echo(),
            "tolerance": tolerance,
            "checks": checks,
        }),
    )?;
    manifest.record_output(&json_path);
    manifest.save()?;

    let mut failed = Vec::new();
    for check in &checks {
        let status = if check.passed(tolerance) { "ok" } else { "FAIL" };
        println!(
            "{status:4} {name:<26} max rel err {err:.3e} over {n} instances",
            name = check.name,
            err = check.max_rel_err,
            n = check.instances
        );
        if !check.passed(tolerance) {
            failed.push(check.name.clone());
        }
    }
    if !failed.is_empty() {
        return Err(CliError::CheckFailed(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )));
    }
    Ok(())
}

/// Primary in-distribution metric per dataset kind, used to pick the
/// recommended drift weight.
fn primary_metric(kind: DatasetKind) -> &'static str {
    match kind {
        DatasetKind::Classification => "accuracy",
        DatasetKind::Identities => "tar@far=1e-1",
    }
}

pub fn sweep(ctx: &Context) -> CliResult {
    if ctx.config.sweep_alphas.len() < 2 {
        return Err(CliError::Config(
            "sweep needs at least two alpha values".into(),
        ));
    }
    let mut manifest = ctx.manifest();
    let splits = load_dataset(ctx, &mut manifest)?;
    let pretrained = load_checkpoint(ctx.pretrained_path()?, &mut manifest)?;

    let mut rows: Vec<(f64, MetricsReport, MetricsReport)> = Vec::new();
    for &alpha in &ctx.config.sweep_alphas {
        let mut cfg = ctx.config.train_config();
        cfg.alpha = alpha;
        let outcome = run_training(&pretrained.encoder, &splits, &cfg)?;
        if outcome.record.diverged {
            return Err(CliError::Divergence(format!(
                "run with alpha {alpha} diverged"
            )));
        }
        let (caption_table, arc_weights) = match &outcome.model.head {
            ModelHead::None => (None, None),
            ModelHead::CaptionTable(t) => (Some(t.clone()), None),
            ModelHead::ArcWeights(w) => (None, Some(w.clone())),
        };
        let model = Checkpoint {
            encoder: outcome.model.encoder,
            caption_table,
            arc_weights,
        };
        let id = evaluate_checkpoint(&model, &pretrained.encoder, &splits, "test_id")?;
        let ood = evaluate_checkpoint(&model, &pretrained.encoder, &splits, "test_ood")?;
        rows.push((alpha, id, ood));
    }

    let primary = primary_metric(splits.kind);
    let id_rows: Vec<(f64, f64)> = rows
        .iter()
        .map(|(a, id, _)| (*a, id.get(primary).unwrap_or(0.0)))
        .collect();
    let recommended = recommend_alpha(&id_rows, ctx.config.sweep_max_id_drop);

    // Table: one row per alpha, ID metrics then OOD metrics then probe drift.
    let metric_names: Vec<String> = rows[0].1.metrics.keys().cloned().collect();
    let mut csv = String::from("alpha");
    for name in &metric_names {
        let _ = write!(csv, ",id_{name}");
    }
    for name in &metric_names {
        let _ = write!(csv, ",ood_{name}");
    }
    csv.push_str(",drift\n");
    for (alpha, id, ood) in &rows {
        let _ = write!(csv, "{}", csv_f64(*alpha));
        for name in &metric_names {
            let _ = write!(csv, ",{}", csv_f64(id.get(name).unwrap_or(f64::NAN)));
        }
        for name in &metric_names {
            let _ = write!(csv, ",{}", csv_f64(ood.get(name).unwrap_or(f64::NAN)));
        }
        let _ = writeln!(csv, ",{}", csv_f64(id.get("mean_drift").unwrap_or(f64::NAN)));
    }
    let csv_path = ctx.out.join("sweep.csv");
    std::fs::write(&csv_path, &csv)?;
    manifest.record_output(&csv_path);

    let json_rows: Vec<serde_json::Value> = rows
        .iter()
        .map(|(alpha, id, ood)| {
            serde_json::json!({ "alpha": alpha, "id": id.metrics, "ood": ood.metrics })
        })
        .collect();
    let json_path = ctx.out.join("sweep.json");
    write_json(
        &json_path,
        &serde_json::json!({
            "manifest": manifest.echo(),
            "primary_id_metric": primary,
            "recommended_alpha": recommended,
            "rows": json_rows,
        }),
    )?;
    manifest.record_output(&json_path);
    manifest.save()?;

    print!("{csv}");
    if let Some(alpha) = recommended {
        println!("recommended alpha: {alpha}");
    }
    Ok(())
}
