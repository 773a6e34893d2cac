//! Dataset records, structure parsing, contact labels and cross-validation folds.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::batch::{ChainInput, ChainRole, SampleInput};
use crate::config::ONE_HOT_DIM;
use crate::encoding::{load_embeddings, one_hot_context, CONTEXT_HALF_WIDTH};
use crate::error::{Error, Result};

/// Contact cutoff between heavy atoms, in Å (strict).
pub const CONTACT_CUTOFF: f64 = 4.0;
/// Radius of a residue patch, in Å (strict).
pub const PATCH_RADIUS: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub sequence: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
    /// Embedding matrix file, relative to the manifest directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedding: Option<String>,
}

/// One line of a dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ab_h: Option<ChainRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ab_l: Option<ChainRecord>,
    pub ag: ChainRecord,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster: Option<String>,
}

impl ComplexRecord {
    pub fn chain(&self, role: ChainRole) -> Option<&ChainRecord> {
        match role {
            ChainRole::AbH => self.ab_h.as_ref(),
            ChainRole::AbL => self.ab_l.as_ref(),
            ChainRole::Ag => Some(&self.ag),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for role in ChainRole::ALL {
            let Some(c) = self.chain(role) else { continue };
            if c.sequence.is_empty() {
                return Err(Error::Data(format!("{}: empty {role} sequence", self.id)));
            }
            if let Some(labels) = &c.labels {
                if labels.len() != c.sequence.len() {
                    return Err(Error::Data(format!(
                        "{}: {role} has {} labels for {} residues",
                        self.id,
                        labels.len(),
                        c.sequence.len()
                    )));
                }
                if labels.iter().any(|&l| l > 1) {
                    return Err(Error::Data(format!(
                        "{}: {role} labels must be 0 or 1",
                        self.id
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ComplexRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let record: ComplexRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        record.validate().map_err(|e| err(e.to_string()))?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ComplexRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[ComplexRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_json());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One atom with its sequence-ordinal residue index.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomRecord {
    pub chain: char,
    pub residue: usize,
    pub residue_name: String,
    pub atom_name: String,
    pub element: String,
    pub coords: [f64; 3],
}

impl AtomRecord {
    /// Anything other than hydrogen or deuterium.
    pub fn is_heavy(&self) -> bool {
        !matches!(self.element.as_str(), "H" | "D")
    }
}

/// Atoms of one chain, residues numbered `0..n_residues` by occurrence.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainAtoms {
    pub id: char,
    pub residue_names: Vec<String>,
    pub atoms: Vec<AtomRecord>,
}

impl ChainAtoms {
    pub fn n_residues(&self) -> usize {
        self.residue_names.len()
    }

    /// One-letter sequence; non-standard residues become `X`.
    pub fn sequence(&self) -> String {
        self.residue_names.iter().map(|n| one_letter(n)).collect()
    }

    /// Heavy-atom coordinates per residue.
    pub fn heavy_atoms(&self) -> Vec<Vec<[f64; 3]>> {
        let mut out = vec![Vec::new(); self.n_residues()];
        for a in self.atoms.iter().filter(|a| a.is_heavy()) {
            out[a.residue].push(a.coords);
        }
        out
    }
}

pub fn one_letter(three: &str) -> char {
    match three {
        "ALA" => 'A',
        "CYS" => 'C',
        "ASP" => 'D',
        "GLU" => 'E',
        "PHE" => 'F',
        "GLY" => 'G',
        "HIS" => 'H',
        "ILE" => 'I',
        "LYS" => 'K',
        "LEU" => 'L',
        "MET" | "MSE" => 'M',
        "ASN" => 'N',
        "PRO" => 'P',
        "GLN" => 'Q',
        "ARG" => 'R',
        "SER" => 'S',
        "THR" => 'T',
        "VAL" => 'V',
        "TRP" => 'W',
        "TYR" => 'Y',
        _ => 'X',
    }
}

fn columns(line: &str, start: usize, end: usize) -> &str {
    // 1-based inclusive column range
    line.get(start - 1..end.min(line.len())).unwrap_or("")
}

fn infer_element(atom_name: &str) -> String {
    atom_name
        .chars()
        .find(|c| c.is_ascii_alphabetic())
        .map(|c| c.to_ascii_uppercase().to_string())
        .unwrap_or_default()
}

/// Parses fixed-column `ATOM` records; other record types are skipped and
/// parsing stops at the first `ENDMDL`. Alternate locations after the first
/// are dropped.
pub fn parse_structure_str(text: &str, path: &Path) -> Result<Vec<ChainAtoms>> {
    let mut chains: Vec<ChainAtoms> = Vec::new();
    let mut last_residue: HashMap<char, (String, String)> = HashMap::new();
    let mut seen_atoms: HashSet<(char, usize, String)> = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        if line.starts_with("ENDMDL") {
            break;
        }
        if !line.starts_with("ATOM  ") {
            continue;
        }
        if line.len() < 54 || !line.is_ascii() {
            return Err(err(format!(
                "truncated ATOM record ({} columns, need 54)",
                line.len()
            )));
        }
        let atom_name = columns(line, 13, 16).trim().to_string();
        let residue_name = columns(line, 18, 20).trim().to_string();
        let chain = line.as_bytes()[21] as char;
        let serial = columns(line, 23, 27).to_string();
        let mut coords = [0.0f64; 3];
        for (k, c) in coords.iter_mut().enumerate() {
            let field = columns(line, 31 + 8 * k, 38 + 8 * k).trim();
            *c = field
                .parse()
                .map_err(|_| err(format!("bad coordinate {field:?}")))?;
            if !c.is_finite() {
                return Err(err(format!("non-finite coordinate {field:?}")));
            }
        }
        let element = match columns(line, 77, 78).trim() {
            "" => infer_element(&atom_name),
            e => e.to_ascii_uppercase(),
        };
        if element.is_empty() {
            return Err(err(format!("no element for atom {atom_name:?}")));
        }
        if atom_name.is_empty() || residue_name.is_empty() {
            return Err(err("blank atom or residue name".into()));
        }

        let idx = match chains.iter().position(|c| c.id == chain) {
            Some(idx) => idx,
            None => {
                chains.push(ChainAtoms {
                    id: chain,
                    residue_names: Vec::new(),
                    atoms: Vec::new(),
                });
                chains.len() - 1
            }
        };
        let target = &mut chains[idx];
        let key = (serial, residue_name.clone());
        if last_residue.get(&chain) != Some(&key) {
            target.residue_names.push(residue_name.clone());
            last_residue.insert(chain, key);
        }
        let residue = target.n_residues() - 1;
        if !seen_atoms.insert((chain, residue, atom_name.clone())) {
            continue;
        }
        target.atoms.push(AtomRecord {
            chain,
            residue,
            residue_name,
            atom_name,
            element,
            coords,
        });
    }
    if chains.is_empty() {
        return Err(Error::Data(format!("{}: no ATOM records", path.display())));
    }
    Ok(chains)
}

pub fn parse_structure(path: impl AsRef<Path>) -> Result<Vec<ChainAtoms>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_structure_str(&text, path)
}

fn distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn within(a: &[[f64; 3]], b: &[[f64; 3]], cutoff: f64) -> bool {
    a.iter().any(|x| b.iter().any(|y| distance(x, y) < cutoff))
}

/// Residue pairs `(i, j)` whose closest heavy atoms are strictly closer than 4 Å.
pub fn contacts(first: &[Vec<[f64; 3]>], second: &[Vec<[f64; 3]>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (i, a) in first.iter().enumerate() {
        for (j, b) in second.iter().enumerate() {
            if within(a, b, CONTACT_CUTOFF) {
                out.push((i, j));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct InterfaceLabels {
    pub first: Vec<u8>,
    pub second: Vec<u8>,
    /// Residues without heavy atoms, labeled 0.
    pub warnings: Vec<String>,
}

/// A residue is labeled 1 when it has at least one contact partner on the other side.
pub fn label_interfaces(first: &ChainAtoms, second: &[&ChainAtoms]) -> Result<InterfaceLabels> {
    if first.atoms.is_empty() || second.iter().all(|c| c.atoms.is_empty()) {
        return Err(Error::Data(
            "interface labeling needs atoms on both sides".into(),
        ));
    }
    let a = first.heavy_atoms();
    let mut warnings = Vec::new();
    for (i, r) in a.iter().enumerate() {
        if r.is_empty() {
            warnings.push(format!("chain {} residue {i} has no heavy atoms", first.id));
        }
    }
    let mut first_labels = vec![0u8; a.len()];
    let mut second_labels = Vec::new();
    for chain in second {
        let b = chain.heavy_atoms();
        for (j, r) in b.iter().enumerate() {
            if r.is_empty() {
                warnings.push(format!("chain {} residue {j} has no heavy atoms", chain.id));
            }
        }
        let mut labels = vec![0u8; b.len()];
        for (i, j) in contacts(&a, &b) {
            first_labels[i] = 1;
            labels[j] = 1;
        }
        second_labels.extend(labels);
    }
    Ok(InterfaceLabels {
        first: first_labels,
        second: second_labels,
        warnings,
    })
}

/// Residues with a heavy atom strictly within 10 Å of a heavy atom of `center`,
/// including `center` itself, in ascending order.
pub fn residue_patch(chain: &ChainAtoms, center: usize) -> Result<Vec<usize>> {
    if center >= chain.n_residues() {
        return Err(Error::Data(format!(
            "chain {} has no residue {center}",
            chain.id
        )));
    }
    let heavy = chain.heavy_atoms();
    let c = &heavy[center];
    Ok((0..heavy.len())
        .filter(|&j| j == center || within(c, &heavy[j], PATCH_RADIUS))
        .collect())
}

/// Builds a labeled record from a parsed structure. Antigen labels count
/// contacts with either antibody chain.
pub fn label_complex(
    id: &str,
    chains: &[ChainAtoms],
    heavy: Option<char>,
    light: Option<char>,
    antigen: char,
) -> Result<(ComplexRecord, Vec<String>)> {
    let find = |c: char| {
        chains
            .iter()
            .find(|x| x.id == c)
            .ok_or_else(|| Error::Data(format!("{id}: chain {c} not in structure")))
    };
    let ag = find(antigen)?;
    let h = heavy.map(find).transpose()?;
    let l = light.map(find).transpose()?;
    let antibodies: Vec<&ChainAtoms> = [h, l].into_iter().flatten().collect();
    let record_for = |c: &ChainAtoms, labels: Vec<u8>| ChainRecord {
        sequence: c.sequence(),
        labels: Some(labels),
        embedding: None,
    };
    let mut warnings = Vec::new();
    let ag_labels = if antibodies.is_empty() {
        vec![0; ag.n_residues()]
    } else {
        let r = label_interfaces(ag, &antibodies)?;
        warnings.extend(r.warnings);
        r.first
    };
    let ab = |c: Option<&ChainAtoms>| -> Result<Option<ChainRecord>> {
        let Some(c) = c else { return Ok(None) };
        let r = label_interfaces(c, &[ag])?;
        Ok(Some(record_for(c, r.first)))
    };
    let record = ComplexRecord {
        id: id.to_string(),
        ab_h: ab(h)?,
        ab_l: ab(l)?,
        ag: record_for(ag, ag_labels),
        cluster: None,
    };
    warnings.dedup();
    Ok((record, warnings))
}

/// Copies a lone antibody chain into the empty role. Records with neither
/// chain are left as antibody-agnostic samples.
pub fn resolve_antibody_chains(record: &ComplexRecord) -> ComplexRecord {
    let mut out = record.clone();
    match (&record.ab_h, &record.ab_l) {
        (Some(h), None) => out.ab_l = Some(h.clone()),
        (None, Some(l)) => out.ab_h = Some(l.clone()),
        _ => {}
    }
    out
}

/// Encodes every chain for a model with `input_dim` inputs. A chain's
/// embedding file (relative to `base_dir`) is used when present; otherwise
/// one-hot context features are computed when `input_dim` is 651.
/// Missing labels become zeros unless `require_labels`.
pub fn encode_record(
    record: &ComplexRecord,
    input_dim: usize,
    base_dir: &Path,
    require_labels: bool,
) -> Result<SampleInput> {
    let mut chains: [Option<ChainInput>; 3] = Default::default();
    for role in ChainRole::ALL {
        let Some(c) = record.chain(role) else {
            continue;
        };
        let features = match &c.embedding {
            Some(file) => load_embeddings(base_dir.join(file), c.sequence.len())?.features,
            None if input_dim == ONE_HOT_DIM => {
                one_hot_context(&c.sequence, CONTEXT_HALF_WIDTH)?.features
            }
            None => {
                return Err(Error::Data(format!(
                    "{}: {role} has no embedding file and input_dim is {input_dim}",
                    record.id
                )))
            }
        };
        if features.ncols() != input_dim {
            return Err(Error::Encoding(format!(
                "{}: {role} features are {}-wide, input_dim is {input_dim}",
                record.id,
                features.ncols()
            )));
        }
        let labels = match &c.labels {
            Some(l) => l.clone(),
            None if require_labels => {
                return Err(Error::Data(format!("{}: {role} has no labels", record.id)))
            }
            None => vec![0; c.sequence.len()],
        };
        chains[role.index()] = Some(ChainInput { features, labels });
    }
    Ok(SampleInput {
        id: record.id.clone(),
        chains,
    })
}

/// Random complex for smoke tests and gradient checks: random sequences with
/// one-hot context features when `input_dim` is 651, uniform features in
/// `[-1, 1]` otherwise, and random labels. A zero length leaves the chain absent.
pub fn synthetic_complex(
    rng: &mut impl Rng,
    id: &str,
    lens: [usize; 3],
    input_dim: usize,
) -> SampleInput {
    use crate::encoding::ALPHABET;
    let chains = lens.map(|n| {
        (n > 0).then(|| {
            let features = if input_dim == ONE_HOT_DIM {
                let seq: String = (0..n)
                    .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())] as char)
                    .collect();
                one_hot_context(&seq, CONTEXT_HALF_WIDTH)
                    .expect("non-empty")
                    .features
            } else {
                ndarray::Array2::from_shape_fn((n, input_dim), |_| rng.random_range(-1.0..=1.0))
            };
            let labels = (0..n).map(|_| u8::from(rng.random_bool(0.4))).collect();
            ChainInput { features, labels }
        })
    });
    SampleInput {
        id: id.to_string(),
        chains,
    }
}

/// Fold index per record. Clusters are visited in id order and records in id
/// order within a cluster; a single round-robin counter, started at a seeded
/// offset, runs across all of them, so every cluster and every fold is
/// balanced to within one record.
pub fn build_folds(items: &[(String, String)], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        return Err(Error::Data(format!(
            "fold count must be at least 2, got {k}"
        )));
    }
    let mut clusters: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, (_, cluster)) in items.iter().enumerate() {
        clusters.entry(cluster.as_str()).or_default().push(i);
    }
    let mut folds = vec![0; items.len()];
    let mut counter = ChaCha8Rng::seed_from_u64(seed).random_range(0..k);
    for members in clusters.values_mut() {
        members.sort_by(|&a, &b| items[a].0.cmp(&items[b].0));
        for &i in members.iter() {
            folds[i] = counter % k;
            counter += 1;
        }
    }
    Ok(folds)
}

/// `(id, cluster)` pairs for records, all of which must carry a cluster id.
pub fn record_clusters(records: &[ComplexRecord]) -> Result<Vec<(String, String)>> {
    records
        .iter()
        .map(|r| {
            r.cluster
                .clone()
                .map(|c| (r.id.clone(), c))
                .ok_or_else(|| Error::Data(format!("{}: missing cluster id", r.id)))
        })
        .collect()
}

/// Two-column TSV without a header.
pub fn parse_tsv_pairs(text: &str, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split('\t');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(a), Some(b), None) if !a.is_empty() && !b.is_empty() => {
                out.push((a.to_string(), b.trim_end().to_string()))
            }
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected two tab-separated fields".into(),
                })
            }
        }
    }
    Ok(out)
}

pub fn read_tsv_pairs(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tsv_pairs(&text, path)
}

/// Attaches cluster ids from `id<TAB>cluster` pairs; unknown ids are an error.
pub fn assign_clusters(records: &mut [ComplexRecord], pairs: &[(String, String)]) -> Result<()> {
    let map: HashMap<&str, &str> = pairs
        .iter()
        .map(|(a, b)| (a.as_str(), b.as_str()))
        .collect();
    for r in records {
        let c = map
            .get(r.id.as_str())
            .ok_or_else(|| Error::Data(format!("{}: missing cluster id", r.id)))?;
        r.cluster = Some(c.to_string());
    }
    Ok(())
}

pub fn folds_tsv(ids: &[String], folds: &[usize]) -> String {
    let mut out = String::new();
    for (id, f) in ids.iter().zip(folds) {
        writeln!(out, "{id}\t{f}").unwrap();
    }
    out
}

/// Fold index per record from `id<TAB>fold` pairs.
pub fn lookup_folds(records: &[ComplexRecord], pairs: &[(String, String)]) -> Result<Vec<usize>> {
    let map: HashMap<&str, &str> = pairs
        .iter()
        .map(|(a, b)| (a.as_str(), b.as_str()))
        .collect();
    records
        .iter()
        .map(|r| {
            let f = map
                .get(r.id.as_str())
                .ok_or_else(|| Error::Data(format!("{}: not in fold file", r.id)))?;
            f.parse()
                .map_err(|_| Error::Data(format!("{}: bad fold index {f:?}", r.id)))
        })
        .collect()
}
