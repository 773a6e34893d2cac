//! The three-branch model: input projection, stacked blocks, per-role
//! two-class heads, prediction with thresholds and attention-map export.

use std::path::{Path, PathBuf};

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::batch::{Batch, ChainRole, TokenMask};
use crate::config::Config;
use crate::conformer::{self, ChainVars, LayerParams};
use crate::error::{Error, Result};
use crate::io;
use crate::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::sliding::{self, AttentionMaps};
use crate::tape::{Tape, Var};

/// Where each tensor lives in the [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub projection: (ParamId, ParamId),
    pub layers: Vec<LayerParams>,
    /// Per-role `d_model x 2` heads, indexed by [`ChainRole::index`].
    pub heads: [(ParamId, ParamId); 3],
}

impl ModelLayout {
    fn build(config: &Config) -> (ModelLayout, ParamBuilder) {
        let mut b = ParamBuilder::default();
        let projection = b.affine("input", config.input_dim, config.d_model);
        let layers = (0..config.n_blocks)
            .map(|i| LayerParams::register(&mut b, &format!("block{i}"), config))
            .collect();
        let heads =
            ChainRole::ALL.map(|role| b.affine(&format!("head.{}", role.key()), config.d_model, 2));
        (
            ModelLayout {
                projection,
                layers,
                heads,
            },
            b,
        )
    }
}

/// All learnable weights of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layout: ModelLayout,
    pub store: ParamStore,
}

impl ModelParams {
    /// Seeded initialization: norm scales 1, offsets 0, affine maps uniform in `±1/√fan_in`.
    pub fn init(config: &Config, seed: u64) -> ModelParams {
        let (layout, builder) = ModelLayout::build(config);
        ModelParams {
            layout,
            store: ParamStore::initialized(builder.into_specs(), seed),
        }
    }

    pub fn zeros(config: &Config) -> ModelParams {
        let (layout, builder) = ModelLayout::build(config);
        ModelParams {
            layout,
            store: ParamStore::zeros(builder.into_specs()),
        }
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }
}

/// Logits and sliding maps for a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[role][sample]`, each `padded_len x 2`.
    pub logits: [Vec<Array2<f64>>; 3],
    /// Final-block sliding maps per sample: `(vs Ab-H, vs Ab-L)`.
    pub maps: Vec<(AttentionMaps, AttentionMaps)>,
}

/// Handles produced by [`forward_on_tape`].
pub struct TapeForward {
    /// `[role][sample]`.
    pub logits: [Vec<Var>; 3],
    pub final_runs: Vec<(sliding::RunVars, sliding::RunVars)>,
}

fn check_batch(batch: &Batch, config: &Config) -> Result<()> {
    if batch.width() != config.input_dim {
        return Err(Error::Shape(format!(
            "batch features are {}-wide, model expects input_dim = {}",
            batch.width(),
            config.input_dim
        )));
    }
    if batch
        .role(ChainRole::Ag)
        .masks
        .iter()
        .any(|m| m.is_absent())
    {
        return Err(Error::Data("every sample needs an antigen chain".into()));
    }
    Ok(())
}

fn check_finite(tape: &Tape<'_>, vars: &[Var], block: usize) -> Result<()> {
    for &v in vars {
        if tape.value(v).iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite activation in block {block}"
            )));
        }
    }
    Ok(())
}

/// Records the full forward pass for every sample of `batch`.
pub fn forward_on_tape(
    tape: &mut Tape<'_>,
    p: &Bound,
    layout: &ModelLayout,
    batch: &Batch,
    config: &Config,
) -> Result<TapeForward> {
    check_batch(batch, config)?;
    let mut logits: [Vec<Var>; 3] = Default::default();
    let mut final_runs = Vec::with_capacity(batch.size());
    for b in 0..batch.size() {
        let masks = ChainRole::ALL.map(|r| batch.role(r).masks[b]);
        let mut chains = ChainRole::ALL.map(|role| {
            let x = tape.constant(batch.role(role).sample(b).to_owned());
            let x = crate::encoding::project_on_tape(
                tape,
                x,
                p[layout.projection.0],
                p[layout.projection.1],
            );
            tape.row_scale(x, masks[role.index()].to_vec())
        });
        let [mh, ml, mag] = &masks;
        let mut last_runs = None;
        for (i, layer) in layout.layers.iter().enumerate() {
            let [h, l, ag] = chains;
            let h = conformer::antibody_pre(tape, h, mh, p, &layer.heavy);
            let l = conformer::antibody_pre(tape, l, ml, p, &layer.light);
            let out = conformer::antigen_layer(
                tape,
                ChainVars { x: ag, mask: mag },
                ChainVars { x: h, mask: mh },
                ChainVars { x: l, mask: ml },
                p,
                &layer.antigen,
                config,
            )?;
            let h = conformer::antibody_post(tape, out.heavy, mh, p, &layer.heavy);
            let l = conformer::antibody_post(tape, out.light, ml, p, &layer.light);
            chains = [h, l, out.antigen];
            check_finite(tape, &chains, i + 1)?;
            last_runs = Some((out.slide_h, out.slide_l));
        }
        for role in ChainRole::ALL {
            let (w, bias) = layout.heads[role.index()];
            let z = tape.matmul(chains[role.index()], p[w]);
            logits[role.index()].push(tape.add_bias(z, p[bias]));
        }
        final_runs.push(last_runs.expect("n_blocks >= 1"));
    }
    Ok(TapeForward { logits, final_runs })
}

/// Per-role logits (`padded_len x 2` per sample) and final-block sliding maps.
pub fn forward(batch: &Batch, params: &ModelParams, config: &Config) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let p = params.store.bind(&mut tape);
    let out = forward_on_tape(&mut tape, &p, &params.layout, batch, config)?;
    let logits = out
        .logits
        .map(|vars| vars.iter().map(|&v| tape.value(v).to_owned()).collect());
    let maps = out
        .final_runs
        .iter()
        .enumerate()
        .map(|(b, (h, l))| {
            let ag = &batch.role(ChainRole::Ag).masks[b];
            (
                sliding::collect_maps(&tape, h, ag, &batch.role(ChainRole::AbH).masks[b]),
                sliding::collect_maps(&tape, l, ag, &batch.role(ChainRole::AbL).masks[b]),
            )
        })
        .collect();
    Ok(ForwardOutput { logits, maps })
}

/// Class-1 probability of each valid row.
pub fn interface_probabilities(logits: &Array2<f64>, mask: &TokenMask) -> Vec<f64> {
    (0..mask.valid())
        .map(|i| {
            let (z0, z1) = (logits[[i, 0]], logits[[i, 1]]);
            let m = z0.max(z1);
            let (e0, e1) = ((z0 - m).exp(), (z1 - m).exp());
            e1 / (e0 + e1)
        })
        .collect()
}

/// Calls at a threshold: `1` iff `probability >= threshold`.
pub fn threshold_calls(probs: &[f64], threshold: f64) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= threshold)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolePrediction {
    pub prob: Vec<f64>,
    pub call: Vec<u8>,
    pub threshold: f64,
}

/// Interface predictions for one complex. Absent roles are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ab_h: Option<RolePrediction>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ab_l: Option<RolePrediction>,
    pub ag: Option<RolePrediction>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub maps: Vec<String>,
    /// Final-block maps `(vs Ab-H, vs Ab-L)`; empty in agnostic mode.
    #[serde(skip)]
    pub attention: Option<(AttentionMaps, AttentionMaps)>,
}

impl Prediction {
    pub fn role(&self, role: ChainRole) -> Option<&RolePrediction> {
        match role {
            ChainRole::AbH => self.ab_h.as_ref(),
            ChainRole::AbL => self.ab_l.as_ref(),
            ChainRole::Ag => self.ag.as_ref(),
        }
    }

    fn role_mut(&mut self, role: ChainRole) -> &mut Option<RolePrediction> {
        match role {
            ChainRole::AbH => &mut self.ab_h,
            ChainRole::AbL => &mut self.ab_l,
            ChainRole::Ag => &mut self.ag,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("prediction serializes")
    }

    pub fn is_agnostic(&self) -> bool {
        self.ab_h.is_none() && self.ab_l.is_none()
    }
}

/// Predictions for every sample of a batch. Antibody-specific samples use the
/// per-role thresholds; samples with both antibodies absent report only the
/// antigen, at `threshold_pan`.
pub fn predict_batch(
    batch: &Batch,
    params: &ModelParams,
    config: &Config,
) -> Result<Vec<Prediction>> {
    let out = forward(batch, params, config)?;
    let mut preds = Vec::with_capacity(batch.size());
    for (b, id) in batch.ids.iter().enumerate() {
        let agnostic = [ChainRole::AbH, ChainRole::AbL]
            .iter()
            .all(|&r| batch.role(r).masks[b].is_absent());
        let mut pred = Prediction {
            id: id.clone(),
            ab_h: None,
            ab_l: None,
            ag: None,
            maps: Vec::new(),
            attention: None,
        };
        for role in ChainRole::ALL {
            let mask = batch.role(role).masks[b];
            if mask.is_absent() {
                continue;
            }
            let threshold = if agnostic {
                config.threshold_pan
            } else {
                config.threshold(role)
            };
            let prob = interface_probabilities(&out.logits[role.index()][b], &mask);
            let call = threshold_calls(&prob, threshold);
            *pred.role_mut(role) = Some(RolePrediction {
                prob,
                call,
                threshold,
            });
        }
        if !agnostic {
            pred.attention = Some(out.maps[b].clone());
        }
        preds.push(pred);
    }
    Ok(preds)
}

/// Antibody-specific prediction for one padded single-sample batch.
pub fn predict(batch: &Batch, params: &ModelParams, config: &Config) -> Result<Prediction> {
    if batch.size() != 1 {
        return Err(Error::Shape(format!(
            "predict takes one complex, got {}",
            batch.size()
        )));
    }
    for role in ChainRole::ALL {
        if batch.role(role).masks[0].is_absent() {
            return Err(Error::Data(format!(
                "{}: chain {role} missing; resolve antibody chains before predicting",
                batch.ids[0]
            )));
        }
    }
    Ok(predict_batch(batch, params, config)?.remove(0))
}

/// Antigen-only prediction: both antibody chains are replaced by absent
/// zero-length chains, so every sliding module is skipped.
pub fn predict_pan_epitope(
    batch: &Batch,
    params: &ModelParams,
    config: &Config,
) -> Result<Prediction> {
    if batch.size() != 1 {
        return Err(Error::Shape(format!(
            "predict takes one complex, got {}",
            batch.size()
        )));
    }
    Ok(predict_batch(&zero_antibodies(batch), params, config)?.remove(0))
}

/// Copy of `batch` with both antibody roles absent and zero-embedded.
pub fn zero_antibodies(batch: &Batch) -> Batch {
    let mut out = batch.clone();
    for role in [ChainRole::AbH, ChainRole::AbL] {
        let rb = out.role_mut(role);
        let (n, _, w) = rb.features.dim();
        rb.features = ndarray::Array3::zeros((n, 0, w));
        rb.labels = Array2::zeros((n, 0));
        rb.masks = vec![TokenMask::full(0); n];
    }
    out
}

/// Writes final-step `Ŵ` of the final block for both pairings, cropped to
/// valid rows and columns, as `<id>.<H|L>.step<k>.wmat`. Returns the paths.
pub fn export_attention(
    prediction: &Prediction,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let out_dir = out_dir.as_ref();
    let Some((h, l)) = &prediction.attention else {
        return Err(Error::Model("no sliding maps in agnostic mode".into()));
    };
    io::create_dir(out_dir)?;
    let mut written = Vec::new();
    for (tag, maps) in [("H", h), ("L", l)] {
        let Some(matrix) = maps.final_row_normalized() else {
            continue;
        };
        let path = out_dir.join(format!(
            "{}.{tag}.step{}.wmat",
            prediction.id,
            maps.steps.len()
        ));
        io::write_matrix(&path, matrix.view())?;
        written.push(path);
    }
    Ok(written)
}

/// Rows of a padded logits matrix for valid positions.
pub fn valid_logits(logits: &Array2<f64>, mask: &TokenMask) -> Array2<f64> {
    logits.slice(s![..mask.valid(), ..]).to_owned()
}
