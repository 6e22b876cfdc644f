//! Synthetic training sets: generation, splitting and the on-disk format.
//!
//! File layout (newline-delimited JSON):
//!
//! ```text
//! {"format_version":1,"model":{..},"prior":{..},"p":..,"m":..,"n":..,"master_seed":..}
//! {"p":0,"m":0,"seed":..,"theta":[..],"y":[..]}
//! ...
//! {"records":<count>,"sha256":"<hex digest of every preceding byte>"}
//! ```
//!
//! Reals are written in shortest round-trip form and parsed exactly, so a
//! write/read cycle is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ModelSpec, ThetaVector};
use crate::prior::{sample_prior, PriorSpec};
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalRecord {
    pub p: usize,
    pub m: usize,
    pub theta: ThetaVector,
    pub y: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetRole {
    Train,
    Validation,
}

/// Marks a file holding one side of a split rather than the full set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetInfo {
    pub role: SubsetRole,
    pub ratio: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub format_version: u32,
    pub model: ModelSpec,
    pub prior: PriorSpec,
    pub p: usize,
    pub m: usize,
    pub n: usize,
    pub master_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<SubsetInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub header: DatasetHeader,
    pub records: Vec<SignalRecord>,
}

pub fn record_seed(master: u64, p: usize, m: usize) -> u64 {
    rng::derive_seed(master, &[rng::tags::RECORD, p as u64, m as u64])
}

/// Samples `p` parameter vectors and simulates `m` signals for each.
pub fn generate_dataset(
    model: &ModelSpec,
    prior: &PriorSpec,
    p: usize,
    m: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    if p == 0 || m == 0 {
        return Err(Error::InvalidSpec(format!(
            "P and M must be >= 1 (got P={p}, M={m})"
        )));
    }
    model.validate()?;
    if prior.dim() != model.dim() {
        return Err(Error::Shape(format!(
            "prior has dimension {} but the model estimates {} parameters",
            prior.dim(),
            model.dim()
        )));
    }
    let thetas = sample_prior(prior, p, seed)?;
    let records = (0..p * m)
        .into_par_iter()
        .map(|idx| {
            let (pi, mi) = (idx / m, idx % m);
            let s = record_seed(seed, pi, mi);
            let theta = &thetas[pi];
            model
                .simulate(&theta.values, s)
                .map(|y| SignalRecord {
                    p: pi,
                    m: mi,
                    theta: theta.clone(),
                    y,
                    seed: s,
                })
                .map_err(|e| Error::Record {
                    p: pi,
                    m: mi,
                    source: Box::new(e),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticDataset {
        header: DatasetHeader {
            format_version: FORMAT_VERSION,
            model: model.clone(),
            prior: prior.clone(),
            p,
            m,
            n: model.n(),
            master_seed: seed,
            subset: None,
        },
        records,
    })
}

impl SyntheticDataset {
    /// Rebuilds the full dataset described by a header.
    pub fn regenerate(header: &DatasetHeader) -> Result<Self> {
        generate_dataset(
            &header.model,
            &header.prior,
            header.p,
            header.m,
            header.master_seed,
        )
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Packages one side of a split as its own dataset.
    pub fn subset(&self, records: Vec<SignalRecord>, info: SubsetInfo) -> Self {
        let mut header = self.header.clone();
        header.subset = Some(info);
        Self { header, records }
    }
}

/// Seeded shuffle of the records, cut at `round(ratio * len)`.
///
/// Each side keeps the original record order.
pub fn split_dataset(
    records: &[SignalRecord],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<SignalRecord>, Vec<SignalRecord>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidSpec(format!(
            "split ratio {ratio} must lie in (0, 1)"
        )));
    }
    let n = records.len();
    let n_train = (ratio * n as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidSpec(format!(
            "split ratio {ratio} on {n} records leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::derived_stream(seed, &[rng::tags::SPLIT]));
    let mut train_idx = idx[..n_train].to_vec();
    let mut val_idx = idx[n_train..].to_vec();
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((
        train_idx.into_iter().map(|i| records[i].clone()).collect(),
        val_idx.into_iter().map(|i| records[i].clone()).collect(),
    ))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    p: usize,
    m: usize,
    seed: u64,
    theta: Vec<f64>,
    y: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FooterLine {
    records: usize,
    sha256: String,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn json_err(line: usize) -> impl Fn(serde_json::Error) -> Error {
    move |e| Error::Parse {
        line,
        msg: e.to_string(),
    }
}

/// Serializes to the newline-delimited format in memory.
pub fn encode_dataset(z: &SyntheticDataset) -> Result<Vec<u8>> {
    if z.records.is_empty() {
        return Err(Error::InvalidSpec(
            "refusing to write a dataset without records".into(),
        ));
    }
    let mut buf = Vec::new();
    serde_json::to_writer(&mut buf, &z.header).map_err(json_err(1))?;
    buf.push(b'\n');
    for (i, r) in z.records.iter().enumerate() {
        let line = RecordLine {
            p: r.p,
            m: r.m,
            seed: r.seed,
            theta: r.theta.values.clone(),
            y: r.y.clone(),
        };
        serde_json::to_writer(&mut buf, &line).map_err(json_err(i + 2))?;
        buf.push(b'\n');
    }
    let digest = hex::encode(Sha256::digest(&buf));
    let footer = FooterLine {
        records: z.records.len(),
        sha256: digest,
    };
    serde_json::to_writer(&mut buf, &footer).map_err(json_err(z.records.len() + 2))?;
    buf.push(b'\n');
    Ok(buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<SyntheticDataset> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 1 + bytes[..e.valid_up_to()]
            .iter()
            .filter(|&&b| b == b'\n')
            .count(),
        msg: format!("invalid UTF-8 at byte offset {}", e.valid_up_to()),
    })?;
    let lines: Vec<&str> = text.split_terminator('\n').collect();
    let Some(first) = lines.first() else {
        return Err(Error::Parse {
            line: 1,
            msg: "empty file".into(),
        });
    };
    let probe: VersionProbe = serde_json::from_str(first).map_err(json_err(1))?;
    if probe.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: probe.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let header: DatasetHeader = serde_json::from_str(first).map_err(json_err(1))?;
    if lines.len() < 2 {
        return Err(Error::Parse {
            line: 2,
            msg: "truncated file: missing footer".into(),
        });
    }
    let footer_no = lines.len();
    let footer: FooterLine =
        serde_json::from_str(lines[footer_no - 1]).map_err(|e| Error::Parse {
            line: footer_no,
            msg: format!("truncated file or bad footer: {e}"),
        })?;
    let body_len: usize = lines[..footer_no - 1].iter().map(|l| l.len() + 1).sum();
    let digest = hex::encode(Sha256::digest(&bytes[..body_len]));
    if digest != footer.sha256 {
        return Err(Error::Checksum(format!(
            "footer says {}, content hashes to {digest}",
            footer.sha256
        )));
    }
    let body = &lines[1..footer_no - 1];
    if body.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "dataset has no records (P*M >= 1 required)".into(),
        });
    }
    if footer.records != body.len() {
        return Err(Error::Parse {
            line: footer_no,
            msg: format!(
                "footer counts {} records, file holds {}",
                footer.records,
                body.len()
            ),
        });
    }
    let mask = header.prior.positivity_mask();
    let dim = header.prior.dim();
    let mut per_p = vec![0usize; header.p];
    let mut records = Vec::with_capacity(body.len());
    for (i, raw) in body.iter().enumerate() {
        let line = i + 2;
        let r: RecordLine = serde_json::from_str(raw).map_err(json_err(line))?;
        let bad = |msg: String| Error::Parse { line, msg };
        if r.p >= header.p || r.m >= header.m {
            return Err(bad(format!(
                "index (p={}, m={}) outside P={}, M={}",
                r.p, r.m, header.p, header.m
            )));
        }
        if r.y.len() != header.n {
            return Err(bad(format!(
                "signal length {} != N={}",
                r.y.len(),
                header.n
            )));
        }
        if r.theta.len() != dim {
            return Err(bad(format!("theta length {} != {dim}", r.theta.len())));
        }
        if !header.prior.contains(&r.theta) {
            return Err(bad(format!(
                "theta {:?} outside the prior support",
                r.theta
            )));
        }
        per_p[r.p] += 1;
        let theta = ThetaVector::new(r.theta, mask.clone()).map_err(|e| bad(e.to_string()))?;
        records.push(SignalRecord {
            p: r.p,
            m: r.m,
            theta,
            y: r.y,
            seed: r.seed,
        });
    }
    if header.subset.is_none() {
        if records.len() != header.p * header.m {
            return Err(Error::Parse {
                line: footer_no,
                msg: format!(
                    "expected P*M = {} records, found {}",
                    header.p * header.m,
                    records.len()
                ),
            });
        }
        if let Some(p) = per_p.iter().position(|&c| c != header.m) {
            return Err(Error::Parse {
                line: footer_no,
                msg: format!("realization p={p} has {} records", per_p[p]),
            });
        }
    }
    Ok(SyntheticDataset { header, records })
}

pub fn write_dataset(z: &SyntheticDataset, path: &Path) -> Result<()> {
    let bytes = encode_dataset(z)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<SyntheticDataset> {
    decode_dataset(&fs::read(path)?)
}
