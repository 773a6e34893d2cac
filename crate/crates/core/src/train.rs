//! Loss, gradients, AdamW with clipping and EMA, checkpoints and the training loop.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{pad_batch, Batch, ChainRole, SampleInput, TokenMask};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, RoleSeries};
use crate::model::{self, ModelParams};
use crate::tape::{Tape, Var};

/// Mean of `-log p(true class)` over the valid rows; 0 when no row is valid.
pub fn masked_ce(logits: ArrayView2<'_, f64>, labels: &[u8], mask: &TokenMask) -> f64 {
    if mask.valid() == 0 {
        return 0.0;
    }
    let mut tape = Tape::new();
    let x = tape.constant_view(logits);
    let s = tape.cross_entropy_sum(x, labels.to_vec(), mask.valid());
    tape.scalar(s) / mask.valid() as f64
}

/// Arithmetic mean of the three chain losses.
pub fn total_loss(h: f64, l: f64, ag: f64) -> Result<f64> {
    if [h, l, ag].iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "non-finite chain loss ({h}, {l}, {ag})"
        )));
    }
    Ok((h + l + ag) / 3.0)
}

/// Loss node plus the per-role values, `[H, L, Ag]`.
pub struct LossVars {
    pub loss: Var,
    pub role_losses: [f64; 3],
}

/// Per role, cross-entropy is pooled over every valid residue of the batch;
/// the three role means are then averaged.
pub fn loss_on_tape(tape: &mut Tape<'_>, logits: &[Vec<Var>; 3], batch: &Batch) -> LossVars {
    let mut terms = Vec::new();
    let mut role_losses = [0.0; 3];
    for role in ChainRole::ALL {
        let rb = batch.role(role);
        let count: usize = rb.masks.iter().map(|m| m.valid()).sum();
        if count == 0 {
            continue;
        }
        let mut sum: Option<Var> = None;
        for (b, &z) in logits[role.index()].iter().enumerate() {
            let valid = rb.masks[b].valid();
            if valid == 0 {
                continue;
            }
            let ce = tape.cross_entropy_sum(z, rb.valid_labels(b), valid);
            sum = Some(match sum {
                Some(s) => tape.add(s, ce),
                None => ce,
            });
        }
        let mean = tape.scale(sum.expect("count > 0"), 1.0 / count as f64);
        role_losses[role.index()] = tape.scalar(mean);
        terms.push(tape.scale(mean, 1.0 / 3.0));
    }
    let loss = terms
        .into_iter()
        .reduce(|a, b| tape.add(a, b))
        .unwrap_or_else(|| tape.constant(Array2::zeros((1, 1))));
    LossVars { loss, role_losses }
}

#[derive(Debug, Clone)]
pub struct LossAndGrads {
    pub loss: f64,
    pub role_losses: [f64; 3],
    /// One tensor per parameter, shaped like the store.
    pub grads: Vec<Array2<f64>>,
}

/// Training loss of a batch without gradients.
pub fn loss_value(batch: &Batch, params: &ModelParams, config: &Config) -> Result<f64> {
    let mut tape = Tape::new();
    let p = params.store.bind(&mut tape);
    let out = model::forward_on_tape(&mut tape, &p, &params.layout, batch, config)?;
    let lv = loss_on_tape(&mut tape, &out.logits, batch);
    Ok(tape.scalar(lv.loss))
}

/// Loss and its exact gradient with respect to every parameter.
pub fn backward(batch: &Batch, params: &ModelParams, config: &Config) -> Result<LossAndGrads> {
    let mut tape = Tape::new();
    let p = params.store.bind(&mut tape);
    let out = model::forward_on_tape(&mut tape, &p, &params.layout, batch, config)?;
    let lv = loss_on_tape(&mut tape, &out.logits, batch);
    let loss = tape.scalar(lv.loss);
    total_loss(lv.role_losses[0], lv.role_losses[1], lv.role_losses[2])?;
    let raw = tape.backward(lv.loss, params.store.n_tensors());
    let mut grads = Vec::with_capacity(raw.len());
    let mut offset = 0;
    for (g, t) in raw.into_iter().zip(params.store.tensors()) {
        let g = g.unwrap_or_else(|| Array2::zeros(t.dim()));
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient at parameter index {}",
                offset + k
            )));
        }
        offset += t.len();
        grads.push(g);
    }
    Ok(LossAndGrads {
        loss,
        role_losses: lv.role_losses,
        grads,
    })
}

pub fn global_norm(grads: &[Array2<f64>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales so the global L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Array2<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyper {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
}

impl From<&Config> for Hyper {
    fn from(c: &Config) -> Self {
        Hyper {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            adam_eps: c.adam_eps,
            weight_decay: c.weight_decay,
            clip_norm: c.clip_norm,
            ema_decay: c.ema_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
    pub ema: Vec<Array2<f64>>,
    pub hyper: Hyper,
}

impl OptimState {
    /// Zero moments; the EMA shadow starts at the current parameters.
    pub fn new(params: &ModelParams, hyper: Hyper) -> OptimState {
        let zeros: Vec<_> = params
            .store
            .tensors()
            .iter()
            .map(|t| Array2::zeros(t.dim()))
            .collect();
        OptimState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            ema: params.store.tensors().to_vec(),
            hyper,
        }
    }

    /// Copy of `params` holding the EMA shadow values.
    pub fn ema_params(&self, params: &ModelParams) -> ModelParams {
        let mut out = params.clone();
        for (dst, src) in out.store.tensors_mut().iter_mut().zip(&self.ema) {
            dst.assign(src);
        }
        out
    }
}

/// AdamW with bias correction; the decay multiplies the weights by
/// `1 - lr·λ` before the adaptive update.
pub fn adamw_step(params: &mut ModelParams, grads: &[Array2<f64>], state: &mut OptimState) {
    let h = state.hyper;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - h.beta1.powi(t);
    let c2 = 1.0 - h.beta2.powi(t);
    let shrink = 1.0 - h.learning_rate * h.weight_decay;
    for (((p, g), m), v) in params
        .store
        .tensors_mut()
        .iter_mut()
        .zip(grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        ndarray::Zip::from(p)
            .and(g)
            .and(m)
            .and(v)
            .for_each(|p, &g, m, v| {
                *m = h.beta1 * *m + (1.0 - h.beta1) * g;
                *v = h.beta2 * *v + (1.0 - h.beta2) * g * g;
                let update = (*m / c1) / ((*v / c2).sqrt() + h.adam_eps);
                *p = *p * shrink - h.learning_rate * update;
            });
    }
}

/// `shadow ← decay·shadow + (1 − decay)·params`.
pub fn ema_update(state: &mut OptimState, params: &ModelParams) {
    let d = state.hyper.ema_decay;
    for (s, p) in state.ema.iter_mut().zip(params.store.tensors()) {
        ndarray::Zip::from(s)
            .and(p)
            .for_each(|s, &p| *s = d * *s + (1.0 - d) * p);
    }
}

/// Which weights a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weights {
    Raw,
    Ema,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub param_count: usize,
    pub config_hash: String,
    pub step: u64,
    pub weights: Weights,
    pub config: serde_json::Value,
}

/// JSON header line followed by `param_count` little-endian f32 values.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParams,
    config: &Config,
    step: u64,
    weights: Weights,
) -> Result<()> {
    let path = path.as_ref();
    let header = CheckpointHeader {
        param_count: params.len(),
        config_hash: config.shape_hash(),
        step,
        weights,
        config: serde_json::from_str(&config.to_json_string())?,
    };
    let mut bytes = serde_json::to_vec(&header)?;
    bytes.push(b'\n');
    bytes.reserve(4 * params.len());
    for t in params.store.tensors() {
        for &v in t {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint_header(path: impl AsRef<Path>) -> Result<CheckpointHeader> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&line).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: e.to_string(),
    })
}

/// Loads weights for `config`; the shape hash and count must match.
pub fn load_checkpoint(
    path: impl AsRef<Path>,
    config: &Config,
) -> Result<(ModelParams, CheckpointHeader)> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(f);
    let mut line = String::new();
    reader
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&line).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 1,
        msg: e.to_string(),
    })?;
    if header.config_hash != config.shape_hash() {
        return Err(Error::Model(format!(
            "{}: checkpoint shape hash {} does not match config {}",
            path.display(),
            header.config_hash,
            config.shape_hash()
        )));
    }
    let mut params = ModelParams::zeros(config);
    if header.param_count != params.len() {
        return Err(Error::Model(format!(
            "{}: checkpoint has {} values, model needs {}",
            path.display(),
            header.param_count,
            params.len()
        )));
    }
    let mut raw = Vec::new();
    reader
        .read_to_end(&mut raw)
        .map_err(|e| Error::io(path, e))?;
    if raw.len() != 4 * header.param_count {
        return Err(Error::Model(format!(
            "{}: expected {} bytes of weights, found {}",
            path.display(),
            4 * header.param_count,
            raw.len()
        )));
    }
    let values: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    params.store.set_flat(&values)?;
    Ok((params, header))
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(flat index, analytic, finite difference)` of the worst parameter.
    pub worst: Option<(usize, f64, f64)>,
    /// `(analytic, finite difference)` in flat-index order.
    pub entries: Vec<(f64, f64)>,
}

impl GradCheckReport {
    pub fn describe(&self, params: &ModelParams) -> String {
        match self.worst {
            Some((k, a, fd)) => {
                let (name, r, c) = params.store.locate(k).unwrap_or(("?", 0, 0));
                format!(
                    "checked {} parameters, max relative error {:.3e} at {k} ({name}[{r},{c}]): analytic {a:.6e}, fd {fd:.6e}",
                    self.checked, self.max_rel_error
                )
            }
            None => format!("checked {} parameters", self.checked),
        }
    }
}

/// `|a − fd| / max(|a|, |fd|, 1e-8)`.
pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1e-8)
}

/// Compares every analytic gradient with a central difference of step `h`.
pub fn grad_check(
    batch: &Batch,
    params: &mut ModelParams,
    config: &Config,
    h: f64,
) -> Result<GradCheckReport> {
    let analytic: Vec<f64> = backward(batch, params, config)?
        .grads
        .iter()
        .flat_map(|g| g.iter().copied())
        .collect();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
        entries: Vec::new(),
    };
    let mut flat = 0;
    for t in 0..params.store.n_tensors() {
        let n = params.store.tensors()[t].len();
        for k in 0..n {
            let original = params.store.tensors()[t]
                .as_slice()
                .expect("standard layout")[k];
            let set = |params: &mut ModelParams, v: f64| {
                params.store.tensors_mut()[t]
                    .as_slice_mut()
                    .expect("standard layout")[k] = v;
            };
            set(params, original + h);
            let up = loss_value(batch, params, config)?;
            set(params, original - h);
            let down = loss_value(batch, params, config)?;
            set(params, original);
            let fd = (up - down) / (2.0 * h);
            let a = analytic[flat + k];
            let err = relative_error(a, fd);
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((flat + k, a, fd));
            }
            report.checked += 1;
            report.entries.push((a, fd));
        }
        flat += n;
    }
    Ok(report)
}

/// Predicts `samples` in batches and pools probabilities per role. With
/// `pan_epitope`, antibodies are dropped and only the antigen is scored.
pub fn evaluate(
    samples: &[SampleInput],
    params: &ModelParams,
    config: &Config,
    pan_epitope: bool,
) -> Result<MetricsReport> {
    let mut series: Vec<(ChainRole, RoleSeries)> = ChainRole::ALL
        .iter()
        .map(|&r| {
            let threshold = if pan_epitope {
                config.threshold_pan
            } else {
                config.threshold(r)
            };
            (
                r,
                RoleSeries {
                    complexes: Vec::new(),
                    threshold,
                },
            )
        })
        .collect();
    for chunk in samples.chunks(config.batch_size) {
        let mut batch = pad_batch(chunk, config.input_dim)?;
        if pan_epitope {
            batch = model::zero_antibodies(&batch);
        }
        for (b, pred) in model::predict_batch(&batch, params, config)?
            .into_iter()
            .enumerate()
        {
            for role in ChainRole::ALL {
                if let Some(rp) = pred.role(role) {
                    let labels = batch.role(role).valid_labels(b);
                    series[role.index()]
                        .1
                        .complexes
                        .push((rp.prob.clone(), labels));
                }
            }
        }
    }
    MetricsReport::from_series(&series)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions<'a> {
    pub seed: u64,
    pub out_dir: Option<&'a Path>,
    pub validation: Option<&'a [SampleInput]>,
    /// Start from these weights instead of a seeded initialization.
    pub init: Option<ModelParams>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub ema: ModelParams,
    /// Loss of every optimizer step.
    pub losses: Vec<f64>,
    /// `(epoch, role, metric, value)` rows of the metric log.
    pub metrics: Vec<(usize, String, String, f64)>,
    pub steps: u64,
    pub checkpoints: Vec<PathBuf>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Seeded shuffling, per-batch padding, backward, clipping, AdamW and EMA.
/// With an output directory, writes `loss.csv`, `metrics.csv` and raw and EMA
/// checkpoints after every epoch.
pub fn train_loop(
    train: &[SampleInput],
    config: &Config,
    opts: &TrainOptions<'_>,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut params = opts
        .init
        .clone()
        .unwrap_or_else(|| ModelParams::init(config, opts.seed));
    let mut state = OptimState::new(&params, Hyper::from(config));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::new();
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    if let Some(dir) = opts.out_dir {
        crate::io::create_dir(dir)?;
    }
    let cap = (config.steps > 0).then_some(config.steps as u64);

    'epochs: for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut role_sums = [0.0; 3];
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if cap.is_some_and(|c| state.step >= c) {
                break;
            }
            let samples: Vec<SampleInput> = chunk.iter().map(|&i| train[i].clone()).collect();
            let batch = pad_batch(&samples, config.input_dim)?;
            let mut lg = backward(&batch, &params, config).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!(
                    "{msg} at step {} (epoch {epoch}, samples {})",
                    state.step + 1,
                    batch.ids.join(",")
                )),
                other => other,
            })?;
            clip_gradients(&mut lg.grads, config.clip_norm);
            adamw_step(&mut params, &lg.grads, &mut state);
            ema_update(&mut state, &params);
            losses.push(lg.loss);
            for (sum, l) in role_sums.iter_mut().zip(lg.role_losses) {
                *sum += l;
            }
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        for role in ChainRole::ALL {
            metrics.push((
                epoch,
                role.to_string(),
                "train_loss".to_string(),
                role_sums[role.index()] / batches as f64,
            ));
        }
        metrics.push((
            epoch,
            "all".to_string(),
            "train_loss".to_string(),
            losses[losses.len() - batches..].iter().sum::<f64>() / batches as f64,
        ));
        let ema = state.ema_params(&params);
        if let Some(val) = opts.validation.filter(|v| !v.is_empty()) {
            let report = evaluate(val, &ema, config, false)?;
            for (role, m) in &report.roles {
                for (name, metric) in m.named() {
                    metrics.push((epoch, role.to_string(), name.to_string(), metric.value));
                }
            }
        }
        if let Some(dir) = opts.out_dir {
            for (tag, weights, p) in [("raw", Weights::Raw, &params), ("ema", Weights::Ema, &ema)] {
                let path = dir.join(format!("epoch{epoch:03}.{tag}.ckpt"));
                save_checkpoint(&path, p, config, state.step, weights)?;
                checkpoints.push(path);
            }
            write_logs(dir, &losses, &metrics)?;
        }
        if cap.is_some_and(|c| state.step >= c) {
            break 'epochs;
        }
    }

    let ema = state.ema_params(&params);
    if let Some(dir) = opts.out_dir {
        for (tag, weights, p) in [("raw", Weights::Raw, &params), ("ema", Weights::Ema, &ema)] {
            let path = dir.join(format!("final.{tag}.ckpt"));
            save_checkpoint(&path, p, config, state.step, weights)?;
            checkpoints.push(path);
        }
        write_logs(dir, &losses, &metrics)?;
    }
    Ok(TrainOutcome {
        params,
        ema,
        losses,
        metrics,
        steps: state.step,
        checkpoints,
    })
}

fn write_logs(dir: &Path, losses: &[f64], metrics: &[(usize, String, String, f64)]) -> Result<()> {
    let mut loss_csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(loss_csv, "{},{l}", i + 1).unwrap();
    }
    write_text(&dir.join("loss.csv"), &loss_csv)?;
    let mut metric_csv = String::from("epoch,role,metric,value\n");
    for (e, role, name, v) in metrics {
        writeln!(metric_csv, "{e},{role},{name},{v}").unwrap();
    }
    write_text(&dir.join("metrics.csv"), &metric_csv)
}

/// Trains one model per fold on the records outside it, validating on the fold.
/// Outputs go to `<out_dir>/fold<k>/`.
pub fn cross_validate(
    samples: &[SampleInput],
    folds: &[usize],
    k: usize,
    config: &Config,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<Vec<TrainOutcome>> {
    if folds.len() != samples.len() {
        return Err(Error::Data(format!(
            "{} fold indices for {} samples",
            folds.len(),
            samples.len()
        )));
    }
    (0..k)
        .map(|fold| {
            let (val, tr): (Vec<_>, Vec<_>) =
                samples.iter().zip(folds).partition(|(_, &f)| f == fold);
            let val: Vec<SampleInput> = val.into_iter().map(|(s, _)| s.clone()).collect();
            let tr: Vec<SampleInput> = tr.into_iter().map(|(s, _)| s.clone()).collect();
            let dir = out_dir.map(|d| d.join(format!("fold{fold}")));
            let opts = TrainOptions {
                seed: seed.wrapping_add(fold as u64),
                out_dir: dir.as_deref(),
                validation: Some(&val),
                init: None,
            };
            train_loop(&tr, config, &opts)
        })
        .collect()
}
