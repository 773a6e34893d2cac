use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use abconformer::data::{self, ComplexRecord};
use abconformer::encoding::{one_hot_context, CONTEXT_HALF_WIDTH};
use abconformer::metrics::{self, MetricsReport, RoleSeries};
use abconformer::model::{self, ModelParams, Prediction};
use abconformer::train::{self, TrainOptions, TrainOutcome};
use abconformer::{io, pad_batch, ChainRole, Config, Error, SampleInput};
use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::overrides::ConfigOverrides;
use crate::{Commands, Global};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    /// A check ran and did not pass.
    Check(String),
    Lib(Error),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(msg) | Failure::Check(msg) => f.write_str(msg),
            Failure::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Result<T> = std::result::Result<T, Failure>;

#[derive(Debug, Args)]
pub struct LabelArgs {
    /// Structure files with fixed-column ATOM records; the file stem becomes the id
    #[arg(long, required = true, num_args = 1..)]
    pub structure: Vec<PathBuf>,
    /// Antibody heavy chain id
    #[arg(long)]
    pub heavy: Option<char>,
    /// Antibody light chain id
    #[arg(long)]
    pub light: Option<char>,
    /// Antigen chain id
    #[arg(long)]
    pub antigen: char,
}

#[derive(Debug, Args)]
pub struct FoldsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `id<TAB>cluster` file; defaults to the manifest's cluster fields
    #[arg(long)]
    pub clusters: Option<PathBuf>,
    /// Number of folds
    #[arg(long, default_value_t = 5)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// `id<TAB>fold` file from `folds`
    #[arg(long)]
    pub folds: Option<PathBuf>,
    /// Hold out this fold for validation and train on the rest
    #[arg(long, requires = "folds", conflicts_with = "all_folds")]
    pub fold: Option<usize>,
    /// Train one model per fold, each under `<out>/fold<k>/`
    #[arg(long, requires = "folds")]
    pub all_folds: bool,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct ModelInput {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Checkpoint written by `train`
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub input: ModelInput,
    /// Also write final-step attention maps next to each prediction
    #[arg(long)]
    pub export_attn: bool,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct PanEpitopeArgs {
    #[command(flatten)]
    pub input: ModelInput,
    /// Epitope threshold (same as --threshold-pan)
    #[arg(long)]
    pub threshold: Option<f64>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Manifest with labels
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory of `<id>.json` predictions
    #[arg(long)]
    pub predictions: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub predictions: PathBuf,
    /// Grid spacing on [0, 1]
    #[arg(long, default_value_t = 0.01)]
    pub step: f64,
}

#[derive(Debug, Args)]
pub struct ExportAttnArgs {
    #[command(flatten)]
    pub input: ModelInput,
    /// Only these ids (default: every record)
    #[arg(long, num_args = 1..)]
    pub id: Vec<String>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    /// Labeled manifest to draw the batch from; synthetic complexes otherwise
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Number of synthetic complexes
    #[arg(long, default_value_t = 2)]
    pub samples: usize,
    /// Longest synthetic chain
    #[arg(long, default_value_t = 8)]
    pub max_len: usize,
    /// Finite-difference step
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    /// Largest accepted relative error
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
}

pub fn name(cmd: &Commands) -> &'static str {
    match cmd {
        Commands::Label(_) => "label",
        Commands::Folds(_) => "folds",
        Commands::Encode(_) => "encode",
        Commands::Train(_) => "train",
        Commands::Predict(_) => "predict",
        Commands::PanEpitope(_) => "pan-epitope",
        Commands::Evaluate(_) => "evaluate",
        Commands::Sweep(_) => "sweep",
        Commands::ExportAttn(_) => "export-attn",
        Commands::GradCheck(_) => "grad-check",
    }
}

pub fn run(cmd: Commands, g: &Global) -> Result<()> {
    std::fs::create_dir_all(&g.out).map_err(|e| Error::Io {
        path: g.out.clone(),
        source: e,
    })?;
    match cmd {
        Commands::Label(a) => label(a, g),
        Commands::Folds(a) => folds(a, g),
        Commands::Encode(a) => encode(a, g),
        Commands::Train(a) => train_cmd(a, g),
        Commands::Predict(a) => predict(a, g),
        Commands::PanEpitope(a) => pan_epitope(a, g),
        Commands::Evaluate(a) => evaluate(a, g),
        Commands::Sweep(a) => sweep(a, g),
        Commands::ExportAttn(a) => export_attn(a, g),
        Commands::GradCheck(a) => grad_check(a, g),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| {
        Error::Io {
            path: path.to_path_buf(),
            source: e,
        }
        .into()
    })
}

/// Config file (or the checkpoint's own config) with flag overrides on top.
fn load_config(g: &Global, overrides: &ConfigOverrides, ckpt: Option<&Path>) -> Result<Config> {
    let base = match (&g.config, ckpt) {
        (Some(path), _) => Config::from_path(path)?,
        (None, Some(ckpt)) => {
            let header = train::read_checkpoint_header(ckpt)?;
            Config::from_json_str(&header.config.to_string())?
        }
        (None, None) => Config::default(),
    };
    Ok(base.with_overrides(&overrides.0)?)
}

fn manifest_dir(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn label(a: LabelArgs, g: &Global) -> Result<()> {
    let mut records = Vec::new();
    for path in &a.structure {
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| Failure::Usage(format!("{} has no file name", path.display())))?;
        let chains = data::parse_structure(path)?;
        let (record, warnings) = data::label_complex(&id, &chains, a.heavy, a.light, a.antigen)?;
        for w in warnings {
            eprintln!("warning: {id}: {w}");
        }
        records.push(record);
    }
    let out = g.out.join("manifest.jsonl");
    data::write_manifest(&out, &records)?;
    println!("{} records -> {}", records.len(), out.display());
    Ok(())
}

fn folds(a: FoldsArgs, g: &Global) -> Result<()> {
    let mut records = data::read_manifest(&a.manifest)?;
    if let Some(path) = &a.clusters {
        data::assign_clusters(&mut records, &data::read_tsv_pairs(path)?)?;
    }
    let items = data::record_clusters(&records)?;
    let folds = data::build_folds(&items, a.k, g.seed)?;
    let ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    let out = g.out.join("folds.tsv");
    write(&out, &data::folds_tsv(&ids, &folds))?;
    let mut sizes = vec![0; a.k];
    for &f in &folds {
        sizes[f] += 1;
    }
    println!("fold sizes {sizes:?} -> {}", out.display());
    Ok(())
}

fn encode(a: EncodeArgs, g: &Global) -> Result<()> {
    let records = data::read_manifest(&a.manifest)?;
    let mut out_records = Vec::with_capacity(records.len());
    for record in &records {
        let mut r = record.clone();
        for role in ChainRole::ALL {
            let chain = match role {
                ChainRole::AbH => r.ab_h.as_mut(),
                ChainRole::AbL => r.ab_l.as_mut(),
                ChainRole::Ag => Some(&mut r.ag),
            };
            let Some(chain) = chain else { continue };
            let features = one_hot_context(&chain.sequence, CONTEXT_HALF_WIDTH)?.features;
            let file = format!("{}.{}.onehot", record.id, role.key());
            io::write_matrix(g.out.join(&file), features.view())?;
            chain.embedding = Some(file);
        }
        out_records.push(r);
    }
    let out = g.out.join("manifest.jsonl");
    data::write_manifest(&out, &out_records)?;
    println!("encoded {} records -> {}", records.len(), out.display());
    Ok(())
}

/// Resolves antibody chains and encodes every record.
fn load_samples(
    manifest: &Path,
    config: &Config,
    require_labels: bool,
) -> Result<(Vec<ComplexRecord>, Vec<SampleInput>)> {
    let records: Vec<ComplexRecord> = data::read_manifest(manifest)?
        .iter()
        .map(data::resolve_antibody_chains)
        .collect();
    let base = manifest_dir(manifest);
    let samples = records
        .par_iter()
        .map(|r| data::encode_record(r, config.input_dim, base, require_labels))
        .collect::<abconformer::Result<Vec<_>>>()?;
    Ok((records, samples))
}

fn report(outcome: &TrainOutcome, dir: &Path) {
    println!(
        "{} steps, final loss {:.6}, checkpoints in {}",
        outcome.steps,
        outcome.losses.last().copied().unwrap_or(f64::NAN),
        dir.display()
    );
}

fn train_cmd(a: TrainArgs, g: &Global) -> Result<()> {
    let config = load_config(g, &a.overrides, None)?;
    let (records, samples) = load_samples(&a.manifest, &config, true)?;
    write(&g.out.join("config.json"), &config.to_json_string())?;
    let fold_of = match &a.folds {
        Some(path) => Some(data::lookup_folds(&records, &data::read_tsv_pairs(path)?)?),
        None => None,
    };
    if a.all_folds {
        let folds = fold_of.expect("clap enforces --folds");
        let k = folds.iter().max().map_or(0, |m| m + 1);
        let outcomes = train::cross_validate(&samples, &folds, k, &config, g.seed, Some(&g.out))?;
        for (i, o) in outcomes.iter().enumerate() {
            report(o, &g.out.join(format!("fold{i}")));
        }
        return Ok(());
    }
    let (train_set, val): (Vec<SampleInput>, Vec<SampleInput>) = match (a.fold, &fold_of) {
        (Some(k), Some(folds)) => {
            let (val, tr): (Vec<_>, Vec<_>) =
                samples.into_iter().zip(folds).partition(|(_, &f)| f == k);
            (
                tr.into_iter().map(|x| x.0).collect(),
                val.into_iter().map(|x| x.0).collect(),
            )
        }
        _ => (samples, Vec::new()),
    };
    let opts = TrainOptions {
        seed: g.seed,
        out_dir: Some(&g.out),
        validation: (!val.is_empty()).then_some(val.as_slice()),
        init: None,
    };
    let outcome = train::train_loop(&train_set, &config, &opts)?;
    report(&outcome, &g.out);
    Ok(())
}

fn load_model(
    input: &ModelInput,
    g: &Global,
    overrides: &ConfigOverrides,
) -> Result<(Config, ModelParams)> {
    let config = load_config(g, overrides, Some(&input.ckpt))?;
    let (params, _) = train::load_checkpoint(&input.ckpt, &config)?;
    Ok((config, params))
}

fn predict_one(
    sample: &SampleInput,
    params: &ModelParams,
    config: &Config,
    pan: bool,
) -> abconformer::Result<Prediction> {
    let batch = pad_batch(std::slice::from_ref(sample), config.input_dim)?;
    if pan {
        model::predict_pan_epitope(&batch, params, config)
    } else {
        model::predict(&batch, params, config)
    }
}

fn predict(a: PredictArgs, g: &Global) -> Result<()> {
    let (config, params) = load_model(&a.input, g, &a.overrides)?;
    let (records, samples) = load_samples(&a.input.manifest, &config, false)?;
    if let Some(r) = records.iter().find(|r| r.ab_h.is_none()) {
        return Err(Error::Data(format!("{}: no antibody chain; use pan-epitope", r.id)).into());
    }
    samples.par_iter().try_for_each(|s| -> Result<()> {
        let mut pred = predict_one(s, &params, &config, false)?;
        if a.export_attn {
            let files = model::export_attention(&pred, &g.out)?;
            pred.maps = files
                .iter()
                .filter_map(|f| f.file_name())
                .map(|f| f.to_string_lossy().into_owned())
                .collect();
        }
        write(&g.out.join(format!("{}.json", s.id)), &pred.to_json())
    })?;
    println!("{} predictions -> {}", samples.len(), g.out.display());
    Ok(())
}

fn pan_epitope(a: PanEpitopeArgs, g: &Global) -> Result<()> {
    let mut overrides = a.overrides.clone();
    if let Some(t) = a.threshold {
        overrides
            .0
            .insert("threshold_pan".into(), serde_json::Value::from(t));
    }
    let (config, params) = load_model(&a.input, g, &overrides)?;
    let (_, samples) = load_samples(&a.input.manifest, &config, false)?;
    samples.par_iter().try_for_each(|s| -> Result<()> {
        let pred = predict_one(s, &params, &config, true)?;
        write(&g.out.join(format!("{}.json", s.id)), &pred.to_json())
    })?;
    println!(
        "{} antigen-only predictions -> {}",
        samples.len(),
        g.out.display()
    );
    Ok(())
}

fn read_prediction(dir: &Path, id: &str) -> Result<Prediction> {
    let path = dir.join(format!("{id}.json"));
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| {
        Error::Parse {
            path,
            line: 1,
            msg: e.to_string(),
        }
        .into()
    })
}

/// Per role, predicted probabilities paired with manifest labels.
fn collect_series(manifest: &Path, predictions: &Path) -> Result<Vec<(ChainRole, RoleSeries)>> {
    let records: Vec<ComplexRecord> = data::read_manifest(manifest)?
        .iter()
        .map(data::resolve_antibody_chains)
        .collect();
    let mut series: HashMap<ChainRole, RoleSeries> = HashMap::new();
    for r in &records {
        let pred = read_prediction(predictions, &r.id)?;
        for role in ChainRole::ALL {
            let (Some(rp), Some(chain)) = (pred.role(role), r.chain(role)) else {
                continue;
            };
            let labels = chain
                .labels
                .clone()
                .ok_or_else(|| Error::Data(format!("{}: {role} has no labels", r.id)))?;
            if labels.len() != rp.prob.len() {
                return Err(Error::Data(format!(
                    "{}: {role} has {} labels but {} predicted residues",
                    r.id,
                    labels.len(),
                    rp.prob.len()
                ))
                .into());
            }
            let entry = series.entry(role).or_insert_with(|| RoleSeries {
                complexes: Vec::new(),
                threshold: rp.threshold,
            });
            entry.complexes.push((rp.prob.clone(), labels));
        }
    }
    Ok(ChainRole::ALL
        .iter()
        .filter_map(|r| series.remove(r).map(|s| (*r, s)))
        .collect())
}

fn evaluate(a: EvaluateArgs, g: &Global) -> Result<()> {
    let series = collect_series(&a.manifest, &a.predictions)?;
    let report = MetricsReport::from_series(&series)?;
    let out = g.out.join("metrics.csv");
    write(&out, &report.to_csv())?;
    for (role, m) in &report.roles {
        println!(
            "{role}: F1 {:.4} MCC {:.4} ROC-AUC {:.4} PR-AUC {:.4}",
            m.confusion.f1.value, m.confusion.mcc.value, m.roc_auc.value, m.pr_auc.value
        );
    }
    println!("-> {}", out.display());
    Ok(())
}

fn sweep(a: SweepArgs, g: &Global) -> Result<()> {
    if !(a.step > 0.0 && a.step <= 1.0) {
        return Err(Failure::Usage(format!(
            "--step must be in (0, 1], got {}",
            a.step
        )));
    }
    let grid = metrics::uniform_grid(a.step);
    let series = collect_series(&a.manifest, &a.predictions)?;
    let mut rows = Vec::new();
    for (role, s) in &series {
        let scores: Vec<f64> = s
            .complexes
            .iter()
            .flat_map(|c| c.0.iter().copied())
            .collect();
        let labels: Vec<u8> = s
            .complexes
            .iter()
            .flat_map(|c| c.1.iter().copied())
            .collect();
        rows.push((
            *role,
            metrics::threshold_sweep(&scores, &labels, None, &grid)?,
        ));
    }
    let out = g.out.join("sweep.csv");
    write(&out, &metrics::sweep_csv(&rows))?;
    println!(
        "{} thresholds x {} roles -> {}",
        grid.len(),
        rows.len(),
        out.display()
    );
    Ok(())
}

fn export_attn(a: ExportAttnArgs, g: &Global) -> Result<()> {
    let (config, params) = load_model(&a.input, g, &a.overrides)?;
    let (_, samples) = load_samples(&a.input.manifest, &config, false)?;
    let chosen: Vec<&SampleInput> = samples
        .iter()
        .filter(|s| a.id.is_empty() || a.id.contains(&s.id))
        .collect();
    if chosen.is_empty() {
        return Err(Error::Data("no manifest record matches --id".into()).into());
    }
    let mut count = 0;
    for s in chosen {
        let pred = predict_one(s, &params, &config, false)?;
        count += model::export_attention(&pred, &g.out)?.len();
    }
    println!("{count} maps -> {}", g.out.display());
    Ok(())
}

fn grad_check(a: GradCheckArgs, g: &Global) -> Result<()> {
    let config = load_config(g, &a.overrides, None)?;
    let samples = match &a.manifest {
        Some(path) => load_samples(path, &config, true)?.1,
        None => {
            if a.max_len == 0 || a.samples == 0 {
                return Err(Failure::Usage(
                    "--samples and --max-len must be positive".into(),
                ));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
            (0..a.samples)
                .map(|i| {
                    let lens = [0, 1, 2].map(|k| 1 + (i * 3 + k * 5 + g.seed as usize) % a.max_len);
                    data::synthetic_complex(
                        &mut rng,
                        &format!("synthetic{i}"),
                        lens,
                        config.input_dim,
                    )
                })
                .collect()
        }
    };
    let batch = pad_batch(&samples, config.input_dim)?;
    let mut params = ModelParams::init(&config, g.seed);
    let report = train::grad_check(&batch, &mut params, &config, a.step)?;
    println!("{}", report.describe(&params));
    if report.max_rel_error >= a.tolerance {
        return Err(Failure::Check(format!(
            "max relative error {:.3e} is not below {:.1e}",
            report.max_rel_error, a.tolerance
        )));
    }
    Ok(())
}
