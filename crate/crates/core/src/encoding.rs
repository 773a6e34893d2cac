//! Per-residue input features: contextual one-hot windows or external
//! embeddings read from disk, and the affine projection to model width.

use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::config::ONE_HOT_DIM;
use crate::error::{Error, Result};
use crate::io;
use crate::tape::{Tape, Var};

/// Canonical amino acids in alphabetical one-letter order; index 20 is `X`.
pub const ALPHABET: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";
pub const ALPHABET_SIZE: usize = 21;
pub const CONTEXT_HALF_WIDTH: usize = 15;

pub fn residue_index(symbol: u8) -> usize {
    let upper = symbol.to_ascii_uppercase();
    ALPHABET.iter().position(|&a| a == upper).unwrap_or(20)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureSource {
    OneHot,
    External,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub features: Array2<f64>,
    pub source: FeatureSource,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.features.ncols()
    }
}

/// Row `i` concatenates one-hot blocks for positions `i - window ..= i + window`;
/// positions outside the sequence contribute all-zero blocks.
pub fn one_hot_context(sequence: &str, window: usize) -> Result<EncodedSequence> {
    let residues = sequence.as_bytes();
    if residues.is_empty() {
        return Err(Error::Encoding("empty sequence".into()));
    }
    let span = 2 * window + 1;
    let mut features = Array2::zeros((residues.len(), span * ALPHABET_SIZE));
    for i in 0..residues.len() {
        for block in 0..span {
            let Some(pos) = (i + block)
                .checked_sub(window)
                .filter(|&p| p < residues.len())
            else {
                continue;
            };
            features[[i, block * ALPHABET_SIZE + residue_index(residues[pos])]] = 1.0;
        }
    }
    debug_assert!(window != CONTEXT_HALF_WIDTH || features.ncols() == ONE_HOT_DIM);
    Ok(EncodedSequence {
        features,
        source: FeatureSource::OneHot,
    })
}

/// Reads an embedding matrix and checks it has `expected_len` rows. The width
/// (normally [`EMBEDDING_DIM`](crate::config::EMBEDDING_DIM)) is checked later against the model input width.
pub fn load_embeddings(path: impl AsRef<Path>, expected_len: usize) -> Result<EncodedSequence> {
    let path = path.as_ref();
    let features = io::read_matrix(path)?;
    if features.nrows() != expected_len {
        return Err(Error::Encoding(format!(
            "length mismatch in {}: {} rows, sequence has {expected_len} residues",
            path.display(),
            features.nrows()
        )));
    }
    Ok(EncodedSequence {
        features,
        source: FeatureSource::External,
    })
}

/// Records `x W + b` on a tape.
pub fn project_on_tape(tape: &mut Tape<'_>, x: Var, weight: Var, bias: Var) -> Var {
    let xw = tape.matmul(x, weight);
    tape.add_bias(xw, bias)
}

/// `x W + b` row by row.
pub fn input_projection(
    x: &EncodedSequence,
    weight: ArrayView2<'_, f64>,
    bias: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    if weight.nrows() != x.width() || bias.dim() != (1, weight.ncols()) {
        return Err(Error::Shape(format!(
            "projection expects {}-wide input and a 1x{} bias, got input width {} and bias {:?}",
            weight.nrows(),
            weight.ncols(),
            x.width(),
            bias.dim()
        )));
    }
    let mut tape = Tape::new();
    let xv = tape.constant_view(x.features.view());
    let wv = tape.constant(weight.to_owned());
    let bv = tape.constant(bias.to_owned());
    let out = project_on_tape(&mut tape, xv, wv, bv);
    Ok(tape.value(out).to_owned())
}
