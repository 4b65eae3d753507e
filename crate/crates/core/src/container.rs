//! Binary model file.
//!
//! Layout: magic `TCRF`, format version (u32 LE), section count (u32 LE),
//! then sections of `tag: [u8; 4]`, `len: u64 LE`, payload. Text sections
//! hold TOML; forests, tables and θ are little-endian binary. Nothing
//! time-dependent is stored, so equal models give equal bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::forest::{DecisionForest, DecisionTree, Node};
use crate::inference::LbpParams;
use crate::labels::{ClassIndex, LabelDomain, Layer, Rgb};
use crate::potentials::{CooccurrenceTable, ThetaParams, EPS_H};
use crate::training::{Mode, TcrfModel, TrainingSeeds};

pub const MAGIC: &[u8; 4] = b"TCRF";
pub const VERSION: u32 = 1;

const NODE_SPLIT: u8 = 0;
const NODE_LEAF: u8 = 1;

#[derive(Serialize, Deserialize)]
struct DomainSection {
    base: Vec<String>,
    occlusion: Vec<String>,
    base_palette: Vec<[u8; 3]>,
    occlusion_palette: Vec<[u8; 3]>,
}

#[derive(Serialize, Deserialize)]
struct MetaSection {
    mode: Mode,
    site_size: usize,
    dataset_hash: String,
    seeds: TrainingSeeds,
    lbp: LbpParams,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.at)))?;
        let out = &self.bytes[self.at..end];
        self.at = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.at == self.bytes.len()
    }
}

fn toml_section<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    toml::to_string(value)
        .map(String::into_bytes)
        .map_err(|e| Error::Format(e.to_string()))
}

fn from_toml_section<T: for<'de> Deserialize<'de>>(tag: &str, bytes: &[u8]) -> Result<T> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Format(format!("section {tag} is not UTF-8")))?;
    toml::from_str(text).map_err(|e| Error::Format(format!("section {tag}: {e}")))
}

fn encode_forest(f: &DecisionForest) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u32(f.n_trees() as u32);
    w.u32(f.n_classes() as u32);
    w.u32(f.n_features() as u32);
    w.u64(f.seed());
    for tree in f.trees() {
        w.u32(tree.nodes().len() as u32);
        for node in tree.nodes() {
            match *node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    w.u8(NODE_SPLIT);
                    w.u16(feature);
                    w.u8(threshold);
                    w.u32(left);
                    w.u32(right);
                }
                Node::Leaf { class } => {
                    w.u8(NODE_LEAF);
                    w.u16(class);
                    w.u8(0);
                    w.u32(0);
                    w.u32(0);
                }
            }
        }
    }
    w.0
}

fn decode_forest(bytes: &[u8]) -> Result<DecisionForest> {
    let mut r = Reader::new(bytes);
    let n_trees = r.u32()? as usize;
    let nc = r.u32()? as usize;
    let nf = r.u32()? as usize;
    let seed = r.u64()?;
    let mut trees = Vec::with_capacity(n_trees.min(1 << 16));
    for _ in 0..n_trees {
        let n = r.u32()? as usize;
        let mut nodes = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let tag = r.u8()?;
            let a = r.u16()?;
            let t = r.u8()?;
            let left = r.u32()?;
            let right = r.u32()?;
            nodes.push(match tag {
                NODE_SPLIT => Node::Split {
                    feature: a,
                    threshold: t,
                    left,
                    right,
                },
                NODE_LEAF => Node::Leaf { class: a as ClassIndex },
                other => return Err(Error::Format(format!("unknown node tag {other}"))),
            });
        }
        trees.push(DecisionTree::from_nodes(nodes, nf, nc).map_err(|e| Error::Format(e.to_string()))?);
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after forest".into()));
    }
    DecisionForest::from_trees(trees, nc, nf, seed).map_err(|e| Error::Format(e.to_string()))
}

fn encode_table(t: &CooccurrenceTable) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.u8(match t.layer() {
        Layer::Base => 0,
        Layer::Occlusion => 1,
    });
    w.u32(t.n_classes() as u32);
    t.raw().iter().for_each(|&c| w.u64(c));
    t.scaled().iter().for_each(|&h| w.f64(h));
    w.0
}

fn decode_table(bytes: &[u8]) -> Result<CooccurrenceTable> {
    let mut r = Reader::new(bytes);
    let layer = match r.u8()? {
        0 => Layer::Base,
        1 => Layer::Occlusion,
        other => return Err(Error::Format(format!("unknown layer tag {other}"))),
    };
    let n = r.u32()? as usize;
    let raw = (0..n * n).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
    let scaled = (0..n * n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    if !r.done() {
        return Err(Error::Format("trailing bytes after table".into()));
    }
    let table = CooccurrenceTable::from_counts(layer, n, raw, EPS_H).map_err(|e| Error::Format(e.to_string()))?;
    // the stored matrix is redundant; a mismatch means corruption
    if table.scaled().iter().zip(&scaled).any(|(a, b)| a.to_bits() != b.to_bits()) {
        return Err(Error::Format(format!("{layer} table: scaled matrix disagrees with counts")));
    }
    Ok(table)
}

/// Serializes a model.
pub fn encode_model(model: &TcrfModel) -> Result<Vec<u8>> {
    model.validate()?;
    let d = &model.domain;
    let colors = |l: Layer| d.palette(l).iter().map(|c| c.0).collect::<Vec<_>>();
    let domain = DomainSection {
        base: d.classes(Layer::Base).to_vec(),
        occlusion: d.classes(Layer::Occlusion).to_vec(),
        base_palette: colors(Layer::Base),
        occlusion_palette: colors(Layer::Occlusion),
    };
    let meta = MetaSection {
        mode: model.mode,
        site_size: model.site_size,
        dataset_hash: model.dataset_hash.clone(),
        seeds: model.seeds,
        lbp: model.lbp,
    };
    let mut theta = Writer(Vec::new());
    model.theta.0.iter().for_each(|&v| theta.f64(v));

    let mut sections: Vec<(&[u8; 4], Vec<u8>)> = vec![
        (b"DOMN", toml_section(&domain)?),
        (b"FEAT", toml_section(&model.features)?),
        (b"FRSB", encode_forest(&model.base_forest)),
        (b"FRSO", encode_forest(&model.occlusion_forest)),
    ];
    if let Some(f) = &model.product_forest {
        sections.push((b"FRSP", encode_forest(f)));
    }
    sections.push((b"TABB", encode_table(&model.base_table)));
    sections.push((b"TABO", encode_table(&model.occlusion_table)));
    sections.push((b"THTA", theta.0));
    sections.push((b"META", toml_section(&meta)?));

    let mut w = Writer(MAGIC.to_vec());
    w.u32(VERSION);
    w.u32(sections.len() as u32);
    for (tag, payload) in sections {
        w.0.extend_from_slice(tag);
        w.u64(payload.len() as u64);
        w.0.extend_from_slice(&payload);
    }
    Ok(w.0)
}

/// Parses a model written by [`encode_model`].
pub fn decode_model(bytes: &[u8]) -> Result<TcrfModel> {
    let mut r = Reader::new(bytes);
    if r.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let count = r.u32()?;
    let mut sections = std::collections::BTreeMap::new();
    for _ in 0..count {
        let tag = String::from_utf8_lossy(r.take(4)?).into_owned();
        let len = r.u64()? as usize;
        let payload = r.take(len)?;
        if sections.insert(tag.clone(), payload).is_some() {
            return Err(Error::Format(format!("duplicate section {tag}")));
        }
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after last section".into()));
    }
    let get = |tag: &str| {
        sections
            .get(tag)
            .copied()
            .ok_or_else(|| Error::Format(format!("missing section {tag}")))
    };

    let ds: DomainSection = from_toml_section("DOMN", get("DOMN")?)?;
    let rgb = |v: Vec<[u8; 3]>| v.into_iter().map(Rgb).collect();
    let domain = LabelDomain::new(ds.base, ds.occlusion)
        .and_then(|d| d.with_palette(Layer::Base, rgb(ds.base_palette)))
        .and_then(|d| d.with_palette(Layer::Occlusion, rgb(ds.occlusion_palette)))
        .map_err(|e| Error::Format(e.to_string()))?;
    let meta: MetaSection = from_toml_section("META", get("META")?)?;
    let mut tr = Reader::new(get("THTA")?);
    let mut theta = [0.0; 7];
    for v in &mut theta {
        *v = tr.f64()?;
    }
    if !tr.done() {
        return Err(Error::Format("theta section has the wrong length".into()));
    }
    let model = TcrfModel {
        domain,
        features: from_toml_section("FEAT", get("FEAT")?)?,
        site_size: meta.site_size,
        base_forest: decode_forest(get("FRSB")?)?,
        occlusion_forest: decode_forest(get("FRSO")?)?,
        product_forest: sections.get("FRSP").map(|b| decode_forest(b)).transpose()?,
        base_table: decode_table(get("TABB")?)?,
        occlusion_table: decode_table(get("TABO")?)?,
        theta: ThetaParams(theta),
        mode: meta.mode,
        lbp: meta.lbp,
        seeds: meta.seeds,
        dataset_hash: meta.dataset_hash,
    };
    model.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &TcrfModel) -> Result<()> {
    write_atomic(path, &encode_model(model)?)
}

pub fn load_model(path: &Path) -> Result<TcrfModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}
