//! Sliding attention between a sliding chain `X` (the antigen) and a
//! reference chain `Y` (one antibody chain).
//!
//! Each step combines a feature affinity `A` (row-max-shifted exponentiated
//! dot products) with a Gaussian kernel `S` over 1-D positions, masks the
//! product into `W`, and normalizes it by rows (`Ŵ`) and by columns (`W̃`).
//! Embeddings are updated by residual cross-attention through `Ŵ` and `W̃ᵀ`,
//! and every sliding position moves to the `Ŵ`-weighted mean of the reference
//! positions:
//!
//! ```text
//! X' = Ŵ (Y E_Y) + X
//! Y' = W̃ᵀ (X E_X) + Y
//! P' = Ŵ Q            (equivalently p'_i - p_i = Σ_j Ŵ_ij (q_j - p_i) when rows sum to 1)
//! ```
//!
//! The bandwidth `h` is fixed for the whole run and derived from the valid
//! reference length. All functions here run on a [`Tape`], so the model
//! differentiates exactly the code that these plain entry points exercise.

use ndarray::{Array2, ArrayView2};

use crate::batch::TokenMask;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Settings read by sliding attention. Built from [`Config`]; the fields are
/// public so tests can use `epsilon = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlidingSettings {
    pub min_bw: f64,
    pub max_bw: f64,
    pub scale: f64,
    pub steps: usize,
    pub epsilon: f64,
}

impl From<&Config> for SlidingSettings {
    fn from(c: &Config) -> Self {
        SlidingSettings {
            min_bw: c.min_bw,
            max_bw: c.max_bw,
            scale: c.scale,
            steps: c.sliding_step,
            epsilon: c.epsilon,
        }
    }
}

/// The four bias-free `d x d` maps of one sliding module.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingParams {
    /// Projects sliding embeddings for feature scores.
    pub e_s: Array2<f64>,
    /// Projects reference embeddings for feature scores.
    pub e_r: Array2<f64>,
    /// Value map applied to sliding embeddings (updates `Y`).
    pub e_x: Array2<f64>,
    /// Value map applied to reference embeddings (updates `X`).
    pub e_y: Array2<f64>,
}

/// Tape handles for the four maps.
#[derive(Debug, Clone, Copy)]
pub struct SlidingVars {
    pub e_s: Var,
    pub e_r: Var,
    pub e_x: Var,
    pub e_y: Var,
}

impl SlidingParams {
    pub fn zeros(d: usize) -> Self {
        SlidingParams {
            e_s: Array2::zeros((d, d)),
            e_r: Array2::zeros((d, d)),
            e_x: Array2::zeros((d, d)),
            e_y: Array2::zeros((d, d)),
        }
    }

    pub fn dim(&self) -> usize {
        self.e_s.nrows()
    }

    fn on_tape<'a>(&'a self, tape: &mut Tape<'a>) -> SlidingVars {
        SlidingVars {
            e_s: tape.constant_view(self.e_s.view()),
            e_r: tape.constant_view(self.e_r.view()),
            e_x: tape.constant_view(self.e_x.view()),
            e_y: tape.constant_view(self.e_y.view()),
        }
    }
}

/// State carried from one sliding step to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingState {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub positions: Vec<f64>,
    pub reference_positions: Vec<f64>,
    pub x_mask: TokenMask,
    pub y_mask: TokenMask,
    pub bandwidth: f64,
    pub step: usize,
}

impl SlidingState {
    /// Initial state with default positions and the bandwidth from `settings`.
    pub fn new(
        x: Array2<f64>,
        y: Array2<f64>,
        x_mask: TokenMask,
        y_mask: TokenMask,
        settings: &SlidingSettings,
    ) -> Result<SlidingState> {
        check_shapes(x.view(), y.view(), &x_mask, &y_mask)?;
        let bandwidth = compute_bandwidth(&y_mask, settings)?;
        Ok(SlidingState {
            positions: initial_positions(&x_mask, y_mask.valid()),
            reference_positions: reference_positions(y_mask.len()),
            x,
            y,
            x_mask,
            y_mask,
            bandwidth,
            step: 0,
        })
    }

    /// Pairwise mask `M`.
    pub fn mask(&self) -> Array2<f64> {
        self.x_mask.outer(&self.y_mask)
    }
}

/// Matrices produced by one sliding step (padded shape `m x n`).
#[derive(Debug, Clone, PartialEq)]
pub struct StepMaps {
    pub feature: Array2<f64>,
    pub spatial: Array2<f64>,
    pub weighted: Array2<f64>,
    pub row_normalized: Array2<f64>,
    pub col_normalized: Array2<f64>,
    /// Sliding positions after the step.
    pub positions: Vec<f64>,
}

/// Per-step history of one sliding run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionMaps {
    pub steps: Vec<StepMaps>,
    pub bandwidth: f64,
    pub x_valid: usize,
    pub y_valid: usize,
}

impl AttentionMaps {
    pub fn last(&self) -> Option<&StepMaps> {
        self.steps.last()
    }

    /// Final-step `Ŵ` restricted to valid rows and columns.
    pub fn final_row_normalized(&self) -> Option<Array2<f64>> {
        self.last().map(|s| {
            s.row_normalized
                .slice(ndarray::s![..self.x_valid, ..self.y_valid])
                .to_owned()
        })
    }
}

/// `h = min(max_bw, max(min_bw, n_valid / scale))`.
pub fn compute_bandwidth(reference: &TokenMask, settings: &SlidingSettings) -> Result<f64> {
    if reference.valid() == 0 {
        return Err(Error::Shape(
            "bandwidth needs at least one valid reference position".into(),
        ));
    }
    let raw = reference.valid() as f64 / settings.scale;
    Ok(settings.max_bw.min(settings.min_bw.max(raw)))
}

/// Spreads the valid sliding residues evenly over `[0, n_valid - 1]`; a single
/// residue starts at the midpoint. Padded rows start at 0.
pub fn initial_positions(sliding: &TokenMask, reference_valid: usize) -> Vec<f64> {
    let m = sliding.valid();
    let span = reference_valid.saturating_sub(1) as f64;
    (0..sliding.len())
        .map(|i| match m {
            _ if i >= m => 0.0,
            1 => span / 2.0,
            _ => i as f64 * span / (m - 1) as f64,
        })
        .collect()
}

/// Reference positions `0, 1, ..., n - 1`.
pub fn reference_positions(n: usize) -> Vec<f64> {
    (0..n).map(|j| j as f64).collect()
}

fn check_shapes(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    x_mask: &TokenMask,
    y_mask: &TokenMask,
) -> Result<()> {
    if x.ncols() != y.ncols() || x.nrows() != x_mask.len() || y.nrows() != y_mask.len() {
        return Err(Error::Shape(format!(
            "sliding inputs {:?} and {:?} with mask lengths {} and {}",
            x.dim(),
            y.dim(),
            x_mask.len(),
            y_mask.len()
        )));
    }
    Ok(())
}

/// Records `exp(a - rowmax a)` with `a = (X E_S)(Y E_R)ᵀ / √d`. The row
/// maximum runs over the `reference_valid` leading columns.
pub fn feature_attention_on_tape(
    tape: &mut Tape<'_>,
    x: Var,
    y: Var,
    e_s: Var,
    e_r: Var,
    reference_valid: usize,
) -> Var {
    let d = tape.shape(x).1 as f64;
    let xs = tape.matmul(x, e_s);
    let yr = tape.matmul(y, e_r);
    let yr_t = tape.transpose(yr);
    let dots = tape.matmul(xs, yr_t);
    let scores = tape.scale(dots, 1.0 / d.sqrt());
    let shifted = tape.row_max_shift(scores, reference_valid);
    tape.exp(shifted)
}

/// Row-normalized and column-normalized weighted attention.
pub struct WeightedVars {
    pub weighted: Var,
    pub row_normalized: Var,
    pub col_normalized: Var,
}

pub fn weighted_attention_on_tape(
    tape: &mut Tape<'_>,
    feature: Var,
    spatial: Var,
    mask: Array2<f64>,
    epsilon: f64,
) -> WeightedVars {
    let product = tape.mul(feature, spatial);
    let weighted = tape.mul_const(product, mask);
    let row_normalized = tape.row_normalize(weighted, epsilon);
    let col_normalized = tape.col_normalize(weighted, epsilon);
    WeightedVars {
        weighted,
        row_normalized,
        col_normalized,
    }
}

/// Handles for the quantities of one recorded step.
pub struct StepVars {
    pub x: Var,
    pub y: Var,
    pub positions: Var,
    pub feature: Var,
    pub spatial: Var,
    pub weights: WeightedVars,
}

/// Records one step. `positions` is an `m x 1` column.
#[allow(clippy::too_many_arguments)]
pub fn step_on_tape(
    tape: &mut Tape<'_>,
    x: Var,
    y: Var,
    positions: Var,
    reference_positions: &[f64],
    x_mask: &TokenMask,
    y_mask: &TokenMask,
    params: SlidingVars,
    bandwidth: f64,
    epsilon: f64,
) -> StepVars {
    let feature = feature_attention_on_tape(tape, x, y, params.e_s, params.e_r, y_mask.valid());
    let spatial = tape.gaussian(positions, reference_positions.to_vec(), bandwidth);
    let weights = weighted_attention_on_tape(tape, feature, spatial, x_mask.outer(y_mask), epsilon);

    let y_values = tape.matmul(y, params.e_y);
    let x_msg = tape.matmul(weights.row_normalized, y_values);
    let x_next = tape.add(x_msg, x);

    let x_values = tape.matmul(x, params.e_x);
    let col_t = tape.transpose(weights.col_normalized);
    let y_msg = tape.matmul(col_t, x_values);
    let y_next = tape.add(y_msg, y);

    let q = tape.constant(
        Array2::from_shape_vec((reference_positions.len(), 1), reference_positions.to_vec())
            .unwrap(),
    );
    let p_next = tape.matmul(weights.row_normalized, q);

    StepVars {
        x: x_next,
        y: y_next,
        positions: p_next,
        feature,
        spatial,
        weights,
    }
}

/// Result handles of a full run on a tape.
pub struct RunVars {
    pub x: Var,
    pub y: Var,
    pub steps: Vec<StepVars>,
    pub bandwidth: f64,
}

/// Records `settings.steps` sliding steps. If either chain has no valid
/// residue the inputs are returned unchanged and no step is recorded.
pub fn run_on_tape(
    tape: &mut Tape<'_>,
    x: Var,
    y: Var,
    x_mask: &TokenMask,
    y_mask: &TokenMask,
    params: SlidingVars,
    settings: &SlidingSettings,
) -> Result<RunVars> {
    if x_mask.is_absent() || y_mask.is_absent() {
        return Ok(RunVars {
            x,
            y,
            steps: Vec::new(),
            bandwidth: 0.0,
        });
    }
    if settings.steps == 0 {
        return Err(Error::Config("sliding_step must be at least 1".into()));
    }
    let bandwidth = compute_bandwidth(y_mask, settings)?;
    let q = reference_positions(y_mask.len());
    let p0 = initial_positions(x_mask, y_mask.valid());
    let mut positions = tape.constant(Array2::from_shape_vec((p0.len(), 1), p0).unwrap());
    let (mut x, mut y) = (x, y);
    let mut steps = Vec::with_capacity(settings.steps);
    for _ in 0..settings.steps {
        let step = step_on_tape(
            tape,
            x,
            y,
            positions,
            &q,
            x_mask,
            y_mask,
            params,
            bandwidth,
            settings.epsilon,
        );
        x = step.x;
        y = step.y;
        positions = step.positions;
        steps.push(step);
    }
    Ok(RunVars {
        x,
        y,
        steps,
        bandwidth,
    })
}

/// Copies recorded step matrices off the tape.
pub fn collect_maps(
    tape: &Tape<'_>,
    run: &RunVars,
    x_mask: &TokenMask,
    y_mask: &TokenMask,
) -> AttentionMaps {
    AttentionMaps {
        steps: run
            .steps
            .iter()
            .map(|s| StepMaps {
                feature: tape.value(s.feature).to_owned(),
                spatial: tape.value(s.spatial).to_owned(),
                weighted: tape.value(s.weights.weighted).to_owned(),
                row_normalized: tape.value(s.weights.row_normalized).to_owned(),
                col_normalized: tape.value(s.weights.col_normalized).to_owned(),
                positions: tape.value(s.positions).column(0).to_vec(),
            })
            .collect(),
        bandwidth: run.bandwidth,
        x_valid: x_mask.valid(),
        y_valid: y_mask.valid(),
    }
}

/// Feature attention `A` for plain matrices; the row maximum covers the first
/// `reference_valid` columns.
pub fn feature_attention(
    x: ArrayView2<'_, f64>,
    y: ArrayView2<'_, f64>,
    e_s: ArrayView2<'_, f64>,
    e_r: ArrayView2<'_, f64>,
    reference_valid: usize,
) -> Result<Array2<f64>> {
    let d = x.ncols();
    if y.ncols() != d || e_s.dim() != (d, d) || e_r.dim() != (d, d) || d == 0 {
        return Err(Error::Shape(format!(
            "feature attention: X {:?}, Y {:?}, E_S {:?}, E_R {:?}",
            x.dim(),
            y.dim(),
            e_s.dim(),
            e_r.dim()
        )));
    }
    let mut tape = Tape::new();
    let (xv, yv) = (tape.constant_view(x), tape.constant_view(y));
    let (sv, rv) = (tape.constant_view(e_s), tape.constant_view(e_r));
    let out = feature_attention_on_tape(&mut tape, xv, yv, sv, rv, reference_valid.min(y.nrows()));
    Ok(tape.value(out).to_owned())
}

/// Gaussian spatial kernel `S_ij = exp(-(p_i - q_j)^2 / (2 h^2))`.
pub fn spatial_attention(
    positions: &[f64],
    reference_positions: &[f64],
    bandwidth: f64,
) -> Array2<f64> {
    let mut tape = Tape::new();
    let p =
        tape.constant(Array2::from_shape_vec((positions.len(), 1), positions.to_vec()).unwrap());
    let s = tape.gaussian(p, reference_positions.to_vec(), bandwidth);
    tape.value(s).to_owned()
}

/// Mean-shift displacement `Σ_j Ŵ_ij (q_j − p_i)` of every sliding position.
/// Equals `Ŵ Q − P` whenever the rows of `Ŵ` sum to one.
pub fn displacement(
    row_normalized: ArrayView2<'_, f64>,
    positions: &[f64],
    reference_positions: &[f64],
) -> Vec<f64> {
    row_normalized
        .outer_iter()
        .zip(positions)
        .map(|(row, &p)| {
            row.iter()
                .zip(reference_positions)
                .map(|(w, q)| w * (q - p))
                .sum()
        })
        .collect()
}

/// `(W, Ŵ, W̃)` for plain matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedAttention {
    pub weighted: Array2<f64>,
    pub row_normalized: Array2<f64>,
    pub col_normalized: Array2<f64>,
}

pub fn weighted_attention(
    feature: ArrayView2<'_, f64>,
    spatial: ArrayView2<'_, f64>,
    mask: ArrayView2<'_, f64>,
    epsilon: f64,
) -> Result<WeightedAttention> {
    if feature.dim() != spatial.dim() || feature.dim() != mask.dim() {
        return Err(Error::Shape(format!(
            "weighted attention: A {:?}, S {:?}, M {:?}",
            feature.dim(),
            spatial.dim(),
            mask.dim()
        )));
    }
    let mut tape = Tape::new();
    let (a, s) = (tape.constant_view(feature), tape.constant_view(spatial));
    let w = weighted_attention_on_tape(&mut tape, a, s, mask.to_owned(), epsilon);
    Ok(WeightedAttention {
        weighted: tape.value(w.weighted).to_owned(),
        row_normalized: tape.value(w.row_normalized).to_owned(),
        col_normalized: tape.value(w.col_normalized).to_owned(),
    })
}

/// One step from `state`; both updates read the pre-step `X` and `Y`.
pub fn sliding_step(
    state: &SlidingState,
    params: &SlidingParams,
    epsilon: f64,
) -> Result<(SlidingState, StepMaps)> {
    check_shapes(state.x.view(), state.y.view(), &state.x_mask, &state.y_mask)?;
    if params.dim() != state.x.ncols() || state.positions.len() != state.x.nrows() {
        return Err(Error::Shape(format!(
            "sliding params are {}x{}, embeddings {}-wide, {} positions for {} rows",
            params.dim(),
            params.dim(),
            state.x.ncols(),
            state.positions.len(),
            state.x.nrows()
        )));
    }
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape);
    let x = tape.constant_view(state.x.view());
    let y = tape.constant_view(state.y.view());
    let p = tape.constant(
        Array2::from_shape_vec((state.positions.len(), 1), state.positions.clone()).unwrap(),
    );
    let step = step_on_tape(
        &mut tape,
        x,
        y,
        p,
        &state.reference_positions,
        &state.x_mask,
        &state.y_mask,
        vars,
        state.bandwidth,
        epsilon,
    );
    let positions = tape.value(step.positions).column(0).to_vec();
    let maps = StepMaps {
        feature: tape.value(step.feature).to_owned(),
        spatial: tape.value(step.spatial).to_owned(),
        weighted: tape.value(step.weights.weighted).to_owned(),
        row_normalized: tape.value(step.weights.row_normalized).to_owned(),
        col_normalized: tape.value(step.weights.col_normalized).to_owned(),
        positions: positions.clone(),
    };
    let next = SlidingState {
        x: tape.value(step.x).to_owned(),
        y: tape.value(step.y).to_owned(),
        positions,
        step: state.step + 1,
        ..state.clone()
    };
    Ok((next, maps))
}

/// Output of [`run_sliding`].
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingOutput {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub maps: AttentionMaps,
}

/// Runs `settings.steps` steps from default initial positions.
pub fn run_sliding(
    x0: ArrayView2<'_, f64>,
    y0: ArrayView2<'_, f64>,
    x_mask: &TokenMask,
    y_mask: &TokenMask,
    params: &SlidingParams,
    settings: &SlidingSettings,
) -> Result<SlidingOutput> {
    check_shapes(x0, y0, x_mask, y_mask)?;
    if params.dim() != x0.ncols() {
        return Err(Error::Shape(format!(
            "sliding params are {0}x{0}, embeddings {1}-wide",
            params.dim(),
            x0.ncols()
        )));
    }
    let mut tape = Tape::new();
    let vars = params.on_tape(&mut tape);
    let x = tape.constant_view(x0);
    let y = tape.constant_view(y0);
    let run = run_on_tape(&mut tape, x, y, x_mask, y_mask, vars, settings)?;
    Ok(SlidingOutput {
        x: tape.value(run.x).to_owned(),
        y: tape.value(run.y).to_owned(),
        maps: collect_maps(&tape, &run, x_mask, y_mask),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn settings() -> SlidingSettings {
        SlidingSettings::from(&Config::default())
    }

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut state = seed
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        Array2::from_shape_fn((rows, cols), |_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn bandwidth_cases() {
        let s = settings();
        assert_eq!(compute_bandwidth(&TokenMask::full(300), &s).unwrap(), 100.0);
        assert_eq!(compute_bandwidth(&TokenMask::full(60), &s).unwrap(), 48.0);
        assert_eq!(compute_bandwidth(&TokenMask::full(600), &s).unwrap(), 144.0);
        assert_eq!(
            compute_bandwidth(&TokenMask::new(300, 400).unwrap(), &s).unwrap(),
            100.0
        );
        assert!(compute_bandwidth(&TokenMask::new(0, 5).unwrap(), &s).is_err());
    }

    #[test]
    fn feature_attention_zero_inputs_all_ones() {
        let e = rand_matrix(3, 3, 1);
        let a = feature_attention(
            Array2::zeros((2, 3)).view(),
            rand_matrix(4, 3, 2).view(),
            e.view(),
            e.view(),
            4,
        )
        .unwrap();
        assert!(a.iter().all(|&v| v == 1.0));
        let a = feature_attention(
            rand_matrix(2, 3, 3).view(),
            Array2::zeros((4, 3)).view(),
            e.view(),
            e.view(),
            4,
        )
        .unwrap();
        assert!(a.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn feature_attention_row_max_is_one() {
        let a = feature_attention(
            rand_matrix(5, 4, 4).view(),
            rand_matrix(6, 4, 5).view(),
            rand_matrix(4, 4, 6).view(),
            rand_matrix(4, 4, 7).view(),
            6,
        )
        .unwrap();
        for row in a.rows() {
            assert_eq!(row.fold(0.0f64, |m, &v| m.max(v)), 1.0);
            assert!(row.iter().all(|&v| v > 0.0 && v <= 1.0));
        }
    }

    #[test]
    fn feature_attention_hand_case() {
        // With d = 2, X = √2·I and identity maps, a_ij is the i-th entry of y_j,
        // so these rows give a = [[0, ln2], [ln3, 0]].
        let r2 = 2f64.sqrt();
        let x = arr2(&[[r2, 0.0], [0.0, r2]]);
        let y = arr2(&[[0.0, 3f64.ln()], [2f64.ln(), 0.0]]);
        let id = Array2::eye(2);
        let a = feature_attention(x.view(), y.view(), id.view(), id.view(), 2).unwrap();
        let expected = arr2(&[[0.5, 1.0], [1.0, 1.0 / 3.0]]);
        for (got, want) in a.iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-15, "{a}");
        }
    }

    #[test]
    fn spatial_cases() {
        let h = 7.0;
        let s = spatial_attention(&[3.0, 3.0, 3.0], &[3.0, 10.0, 17.0], h);
        assert_eq!(s[[0, 0]], 1.0);
        assert!((s[[0, 1]] - (-0.5f64).exp()).abs() < 1e-15);
        assert!((s[[0, 1]] - 0.606531).abs() < 1e-6);
        assert!((s[[0, 2]] - 0.135335).abs() < 1e-6);
        let sym = spatial_attention(&[10.0], &[3.0, 17.0], h);
        assert_eq!(sym[[0, 0]], sym[[0, 1]]);
    }

    #[test]
    fn bandwidth_monotonicity() {
        let mut last = 0.0;
        for h in [0.5, 1.0, 2.0, 48.0, 144.0] {
            let s = spatial_attention(&[0.0], &[3.5], h)[[0, 0]];
            assert!(s > last);
            last = s;
        }
    }

    #[test]
    fn weighted_masking_and_sums() {
        let a = rand_matrix(3, 4, 8).mapv(|v| v.abs() + 0.1);
        let s = rand_matrix(3, 4, 9).mapv(|v| v.abs() + 0.1);
        let m = TokenMask::new(2, 3)
            .unwrap()
            .outer(&TokenMask::new(3, 4).unwrap());
        let w = weighted_attention(a.view(), s.view(), m.view(), 1e-9).unwrap();
        assert!(w.row_normalized.row(2).iter().all(|&v| v == 0.0));
        assert!(w.row_normalized.column(3).iter().all(|&v| v == 0.0));
        for i in 0..2 {
            let total = w.weighted.row(i).sum();
            let sum = w.row_normalized.row(i).sum();
            assert!(sum < 1.0);
            assert!((sum - total / (total + 1e-9)).abs() < 1e-15);
        }
        for col in w.col_normalized.columns() {
            assert!(col.sum() <= 1.0);
        }

        let one = weighted_attention(
            arr2(&[[0.8]]).view(),
            arr2(&[[0.5]]).view(),
            arr2(&[[1.0]]).view(),
            1e-9,
        )
        .unwrap();
        assert!((one.row_normalized[[0, 0]] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn weighted_ignores_masked_garbage() {
        let a = rand_matrix(3, 4, 10).mapv(|v| v.abs() + 0.1);
        let s = rand_matrix(3, 4, 11).mapv(|v| v.abs() + 0.1);
        let m = TokenMask::new(2, 3)
            .unwrap()
            .outer(&TokenMask::new(3, 4).unwrap());
        let base = weighted_attention(a.view(), s.view(), m.view(), 1e-9).unwrap();
        let mut a2 = a.clone();
        let mut s2 = s.clone();
        for ((i, j), &mv) in m.indexed_iter() {
            if mv == 0.0 {
                a2[[i, j]] = 1e3 * (i + j) as f64;
                s2[[i, j]] = 0.123;
            }
        }
        assert_eq!(
            weighted_attention(a2.view(), s2.view(), m.view(), 1e-9).unwrap(),
            base
        );
    }

    fn state(m: usize, n: usize, d: usize, y_zero: bool) -> SlidingState {
        let y = if y_zero {
            Array2::zeros((n, d))
        } else {
            rand_matrix(n, d, 12)
        };
        SlidingState::new(
            rand_matrix(m, d, 13),
            y,
            TokenMask::full(m),
            TokenMask::full(n),
            &settings(),
        )
        .unwrap()
    }

    fn params(d: usize) -> SlidingParams {
        SlidingParams {
            e_s: rand_matrix(d, d, 14),
            e_r: rand_matrix(d, d, 15),
            e_x: rand_matrix(d, d, 16),
            e_y: rand_matrix(d, d, 17),
        }
    }

    #[test]
    fn zero_reference_leaves_sliding_embeddings() {
        let st = state(4, 5, 3, true);
        let (next, maps) = sliding_step(&st, &params(3), 1e-9).unwrap();
        assert_eq!(next.x, st.x);
        assert!(maps.feature.iter().all(|&v| v == 1.0));
        assert_eq!(next.step, 1);
    }

    #[test]
    fn one_hot_and_uniform_rows() {
        // tiny bandwidth concentrates the kernel on the nearest reference position
        let mut st = state(1, 5, 2, false);
        st.positions = vec![3.0];
        st.bandwidth = 1e-3;
        let (next, _) = sliding_step(&st, &params(2), 0.0).unwrap();
        assert!((next.positions[0] - 3.0).abs() < 1e-12);

        // zero feature maps and huge bandwidth give uniform rows
        let mut st = state(2, 5, 2, false);
        st.bandwidth = 1e12;
        let (next, maps) = sliding_step(&st, &SlidingParams::zeros(2), 0.0).unwrap();
        for i in 0..2 {
            assert!((maps.row_normalized.row(i).sum() - 1.0).abs() < 1e-12);
            assert!((next.positions[i] - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn run_records_each_step() {
        let s = settings();
        let st = state(4, 6, 3, false);
        let out = run_sliding(
            st.x.view(),
            st.y.view(),
            &st.x_mask,
            &st.y_mask,
            &params(3),
            &s,
        )
        .unwrap();
        assert_eq!(out.maps.steps.len(), 3);

        let one = SlidingSettings { steps: 1, ..s };
        let out = run_sliding(
            st.x.view(),
            st.y.view(),
            &st.x_mask,
            &st.y_mask,
            &params(3),
            &one,
        )
        .unwrap();
        let (next, maps) = sliding_step(&st, &params(3), s.epsilon).unwrap();
        assert_eq!(out.x, next.x);
        assert_eq!(out.y, next.y);
        assert_eq!(out.maps.steps[0], maps);
    }

    #[test]
    fn absent_reference_is_no_op() {
        let x = rand_matrix(3, 2, 18);
        let y = Array2::zeros((0, 2));
        let out = run_sliding(
            x.view(),
            y.view(),
            &TokenMask::full(3),
            &TokenMask::full(0),
            &params(2),
            &settings(),
        )
        .unwrap();
        assert_eq!(out.x, x);
        assert!(out.maps.steps.is_empty());
    }

    #[test]
    fn initial_positions_spread() {
        assert_eq!(
            initial_positions(&TokenMask::full(3), 5),
            vec![0.0, 2.0, 4.0]
        );
        assert_eq!(
            initial_positions(&TokenMask::new(1, 2).unwrap(), 5),
            vec![2.0, 0.0]
        );
    }
}
