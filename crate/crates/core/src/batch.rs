//! Chain roles, prefix masks and dynamic batch padding.

use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ChainRole {
    AbH,
    AbL,
    Ag,
}

impl ChainRole {
    pub const ALL: [ChainRole; 3] = [ChainRole::AbH, ChainRole::AbL, ChainRole::Ag];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Short tag used in file names and CSV rows.
    pub fn tag(self) -> &'static str {
        match self {
            ChainRole::AbH => "H",
            ChainRole::AbL => "L",
            ChainRole::Ag => "Ag",
        }
    }

    /// Field name used in JSON manifests and prediction files.
    pub fn key(self) -> &'static str {
        match self {
            ChainRole::AbH => "ab_h",
            ChainRole::AbL => "ab_l",
            ChainRole::Ag => "ag",
        }
    }

    pub fn from_tag(tag: &str) -> Option<ChainRole> {
        ChainRole::ALL
            .into_iter()
            .find(|r| r.tag().eq_ignore_ascii_case(tag) || r.key() == tag)
    }
}

impl std::fmt::Display for ChainRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// Validity flags for a padded chain. Valid positions always form a prefix,
/// so the mask is stored as `(valid, len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenMask {
    valid: usize,
    len: usize,
}

impl TokenMask {
    pub fn new(valid: usize, len: usize) -> Result<TokenMask> {
        if valid > len {
            return Err(Error::Shape(format!(
                "mask valid count {valid} exceeds length {len}"
            )));
        }
        Ok(TokenMask { valid, len })
    }

    pub fn full(len: usize) -> TokenMask {
        TokenMask { valid: len, len }
    }

    pub fn valid(&self) -> usize {
        self.valid
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_absent(&self) -> bool {
        self.valid == 0
    }

    pub fn get(&self, i: usize) -> bool {
        i < self.valid
    }

    pub fn to_vec(&self) -> Vec<f64> {
        (0..self.len)
            .map(|i| if self.get(i) { 1.0 } else { 0.0 })
            .collect()
    }

    /// Column vector (`len x 1`) of 0/1 flags, for row masking.
    pub fn column(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.len, 1), |(i, _)| if self.get(i) { 1.0 } else { 0.0 })
    }

    /// Pairwise mask `M = self ⊗ other` (rows index `self`).
    pub fn outer(&self, other: &TokenMask) -> Array2<f64> {
        Array2::from_shape_fn((self.len, other.len), |(i, j)| {
            if self.get(i) && other.get(j) {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// One chain of one sample before padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainInput {
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
}

/// All three chains of one sample; `None` marks an absent chain.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInput {
    pub id: String,
    pub chains: [Option<ChainInput>; 3],
}

impl SampleInput {
    pub fn chain(&self, role: ChainRole) -> Option<&ChainInput> {
        self.chains[role.index()].as_ref()
    }
}

/// Padded tensors for one chain role across a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct RoleBatch {
    /// `batch x len x width`; zero at padded positions.
    pub features: Array3<f64>,
    pub masks: Vec<TokenMask>,
    /// `batch x len`; values at padded positions carry no meaning.
    pub labels: Array2<u8>,
}

impl RoleBatch {
    pub fn len(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn sample(&self, b: usize) -> ArrayView2<'_, f64> {
        self.features.slice(s![b, .., ..])
    }

    /// Features of sample `b` with padding stripped.
    pub fn valid_features(&self, b: usize) -> ArrayView2<'_, f64> {
        let n = self.masks[b].valid();
        self.features.slice(s![b, ..n, ..])
    }

    pub fn valid_labels(&self, b: usize) -> Vec<u8> {
        let n = self.masks[b].valid();
        self.labels.slice(s![b, ..n]).to_vec()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub roles: [RoleBatch; 3],
}

impl Batch {
    pub fn role(&self, role: ChainRole) -> &RoleBatch {
        &self.roles[role.index()]
    }

    pub fn role_mut(&mut self, role: ChainRole) -> &mut RoleBatch {
        &mut self.roles[role.index()]
    }

    pub fn size(&self) -> usize {
        self.ids.len()
    }

    pub fn width(&self) -> usize {
        self.roles[0].features.shape()[2]
    }
}

/// Pads every role to the longest valid chain of that role in the batch.
/// Padding is trailing and zero; absent chains get an all-zero mask.
pub fn pad_batch(samples: &[SampleInput], width: usize) -> Result<Batch> {
    if samples.is_empty() {
        return Err(Error::Shape("empty record list".into()));
    }
    let roles = ChainRole::ALL.map(|role| pad_role(samples, role, width));
    let [h, l, ag] = roles;
    Ok(Batch {
        ids: samples.iter().map(|s| s.id.clone()).collect(),
        roles: [h?, l?, ag?],
    })
}

fn pad_role(samples: &[SampleInput], role: ChainRole, width: usize) -> Result<RoleBatch> {
    let mut len = 0;
    for sample in samples {
        if let Some(chain) = sample.chain(role) {
            if chain.features.ncols() != width {
                return Err(Error::Shape(format!(
                    "{} chain {} has width {}, expected {width}",
                    sample.id,
                    role,
                    chain.features.ncols()
                )));
            }
            if chain.labels.len() != chain.features.nrows() {
                return Err(Error::Shape(format!(
                    "{} chain {} has {} labels for {} residues",
                    sample.id,
                    role,
                    chain.labels.len(),
                    chain.features.nrows()
                )));
            }
            len = len.max(chain.features.nrows());
        }
    }
    let mut features = Array3::zeros((samples.len(), len, width));
    let mut labels = Array2::zeros((samples.len(), len));
    let mut masks = Vec::with_capacity(samples.len());
    for (b, sample) in samples.iter().enumerate() {
        let valid = match sample.chain(role) {
            Some(chain) => {
                let n = chain.features.nrows();
                features.slice_mut(s![b, ..n, ..]).assign(&chain.features);
                for (i, &y) in chain.labels.iter().enumerate() {
                    labels[[b, i]] = y;
                }
                n
            }
            None => 0,
        };
        masks.push(TokenMask::new(valid, len)?);
    }
    Ok(RoleBatch {
        features,
        masks,
        labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(n: usize, w: usize, seed: f64) -> ChainInput {
        ChainInput {
            features: Array2::from_shape_fn((n, w), |(i, j)| seed + i as f64 + 0.1 * j as f64),
            labels: (0..n).map(|i| (i % 2) as u8).collect(),
        }
    }

    fn sample(id: &str, h: usize, l: Option<usize>, ag: usize) -> SampleInput {
        SampleInput {
            id: id.into(),
            chains: [
                Some(chain(h, 2, 1.0)),
                l.map(|n| chain(n, 2, 2.0)),
                Some(chain(ag, 2, 3.0)),
            ],
        }
    }

    #[test]
    fn pads_to_longest() {
        let batch =
            pad_batch(&[sample("a", 3, Some(2), 4), sample("b", 5, Some(2), 1)], 2).unwrap();
        let h = batch.role(ChainRole::AbH);
        assert_eq!(h.len(), 5);
        assert_eq!(h.masks[0].to_vec(), vec![1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(h.features[[0, 3, 0]], 0.0);
        assert_eq!(h.valid_features(0), chain(3, 2, 1.0).features);
    }

    #[test]
    fn single_record_all_valid() {
        let batch = pad_batch(&[sample("a", 3, Some(2), 4)], 2).unwrap();
        for role in ChainRole::ALL {
            let rb = batch.role(role);
            assert_eq!(rb.masks[0].valid(), rb.len());
        }
    }

    #[test]
    fn absent_chain_zero_mask() {
        let batch = pad_batch(&[sample("a", 3, None, 4)], 2).unwrap();
        let l = batch.role(ChainRole::AbL);
        assert!(l.masks[0].is_absent());
        assert!(l.features.iter().all(|&x| x == 0.0));

        let mixed = pad_batch(&[sample("a", 3, None, 4), sample("b", 3, Some(4), 4)], 2).unwrap();
        let l = mixed.role(ChainRole::AbL);
        assert_eq!(l.len(), 4);
        assert_eq!(l.masks[0].valid(), 0);
        assert!(l.sample(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn errors() {
        assert!(pad_batch(&[], 2).is_err());
        assert!(pad_batch(&[sample("a", 3, Some(2), 4)], 3).is_err());
    }

    #[test]
    fn outer_mask() {
        let m = TokenMask::new(1, 2)
            .unwrap()
            .outer(&TokenMask::new(2, 3).unwrap());
        assert_eq!(m, ndarray::arr2(&[[1.0, 1.0, 0.0], [0.0, 0.0, 0.0]]));
    }
}
