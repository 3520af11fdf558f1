// SPDX-License-Identifier: MIT OR Apache-2.0

//! Plain-text matrices and the world/batch documents built from them.
//!
//! A matrix is a `rows cols` line followed by `rows` lines of
//! whitespace-separated decimals. A document is a TOML header followed by
//! named matrix blocks, each introduced by a `[[matrix NAME]]` line.

use std::fmt::Write as _;

use editleak_core::editors::EditBatch;
use editleak_core::worldsim::{SyntheticWorld, WorldConfig};
use editleak_core::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

const BLOCK_OPEN: &str = "[[matrix ";

fn format_err(line: usize, msg: impl Into<String>) -> HarnessError {
    HarnessError::Format { line, msg: msg.into() }
}

/// Shortest round-tripping decimal for every entry.
pub fn write_matrix(m: &Mat) -> String {
    let mut s = format!("{} {}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|x| format!("{x:?}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

pub fn read_matrix(text: &str) -> Result<Mat> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let m = parse_block(&mut lines, 1)?;
    if let Some((n, l)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(format_err(n, format!("trailing content {l:?}")));
    }
    Ok(m)
}

fn parse_block<'a>(lines: &mut impl Iterator<Item = (usize, &'a str)>, start: usize) -> Result<Mat> {
    let (n, header) = lines.find(|(_, l)| !l.trim().is_empty()).ok_or_else(|| format_err(start, "missing shape line"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    let parse_dim = |s: &str| s.parse::<usize>().map_err(|_| format_err(n, format!("bad dimension {s:?}")));
    let (rows, cols) = match dims.as_slice() {
        [r, c] => (parse_dim(r)?, parse_dim(c)?),
        _ => return Err(format_err(n, "shape line must be `rows cols`")),
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut last = n;
    for i in 0..rows {
        let (ln, l) = lines.next().ok_or_else(|| format_err(last + 1, format!("expected row {} of {rows}", i + 1)))?;
        last = ln;
        let before = data.len();
        for tok in l.split_whitespace() {
            let x = tok.parse::<f64>().map_err(|_| format_err(ln, format!("bad number {tok:?}")))?;
            if !x.is_finite() {
                return Err(format_err(ln, format!("non-finite entry {tok:?}")));
            }
            data.push(x);
        }
        if data.len() - before != cols {
            return Err(format_err(ln, format!("expected {cols} entries, found {}", data.len() - before)));
        }
    }
    Mat::new(rows, cols, data).map_err(HarnessError::from)
}

/// TOML header plus named matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub header: String,
    pub blocks: Vec<(String, Mat)>,
}

impl Document {
    pub fn render(&self) -> String {
        let mut s = self.header.clone();
        if !s.ends_with('\n') {
            s.push('\n');
        }
        for (name, m) in &self.blocks {
            let _ = writeln!(s, "{BLOCK_OPEN}{name}]]");
            s.push_str(&write_matrix(m));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let all: Vec<&str> = text.lines().collect();
        let first_block = all.iter().position(|l| l.starts_with(BLOCK_OPEN)).unwrap_or(all.len());
        let header = all[..first_block].join("\n");
        let mut blocks = Vec::new();
        let mut it = all.iter().copied().enumerate().skip(first_block).map(|(i, l)| (i + 1, l)).peekable();
        while let Some((n, l)) = it.next() {
            if l.trim().is_empty() {
                continue;
            }
            let name = l
                .strip_prefix(BLOCK_OPEN)
                .and_then(|r| r.strip_suffix("]]"))
                .ok_or_else(|| format_err(n, format!("expected `{BLOCK_OPEN}NAME]]`")))?;
            let m = parse_block(&mut it, n + 1)?;
            blocks.push((name.to_string(), m));
        }
        Ok(Document { header, blocks })
    }

    fn take(&mut self, name: &str) -> Result<Mat> {
        let i = self
            .blocks
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| HarnessError::Output(format!("document has no matrix {name:?}")))?;
        Ok(self.blocks.remove(i).1)
    }
}

fn header_of<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| HarnessError::Output(e.to_string()))
}

fn parse_header<T: for<'de> Deserialize<'de>>(h: &str) -> Result<T> {
    toml::from_str(h).map_err(|e| HarnessError::Output(format!("document header: {e}")))
}

pub fn world_document(world: &SyntheticWorld) -> Result<Document> {
    let mut blocks = vec![("subjects".to_string(), world.subject_embeddings().clone())];
    for (t, (a, b)) in world.template_maps().iter().zip(world.template_offsets()).enumerate() {
        blocks.push((format!("template_map {t}"), a.clone()));
        blocks.push((format!("template_offset {t}"), Mat::column_vector(b)?));
    }
    blocks.push(("base_weight".into(), world.base_weight().clone()));
    blocks.push(("unembedding".into(), world.unembedding().clone()));
    if let Some(kp) = world.preserved_keys() {
        blocks.push(("preserved_keys".into(), kp.clone()));
    }
    Ok(Document { header: header_of(world.config())?, blocks })
}

pub fn world_from_document(mut doc: Document) -> Result<SyntheticWorld> {
    let cfg: WorldConfig = parse_header(&doc.header)?;
    let subjects = doc.take("subjects")?;
    let mut maps = Vec::with_capacity(cfg.n_templates);
    let mut offsets = Vec::with_capacity(cfg.n_templates);
    for t in 0..cfg.n_templates {
        maps.push(doc.take(&format!("template_map {t}"))?);
        offsets.push(doc.take(&format!("template_offset {t}"))?.column(0));
    }
    let w = doc.take("base_weight")?;
    let u = doc.take("unembedding")?;
    let kp = if cfg.n_preserved > 0 { Some(doc.take("preserved_keys")?) } else { None };
    Ok(SyntheticWorld::from_parts(cfg, subjects, maps, offsets, w, u, kp)?)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatchHeader {
    subject_ids: Vec<usize>,
    template_ids: Vec<usize>,
    object_token_ids: Vec<usize>,
}

pub fn batch_document(batch: &EditBatch) -> Result<Document> {
    let h = BatchHeader {
        subject_ids: batch.subject_ids.clone(),
        template_ids: batch.template_ids.clone(),
        object_token_ids: batch.object_token_ids.clone(),
    };
    Ok(Document { header: header_of(&h)?, blocks: vec![("k".into(), batch.k().clone()), ("r".into(), batch.r().clone())] })
}

pub fn batch_from_document(mut doc: Document) -> Result<EditBatch> {
    let h: BatchHeader = parse_header(&doc.header)?;
    let k = doc.take("k")?;
    let r = doc.take("r")?;
    Ok(EditBatch::new(h.subject_ids, h.template_ids, h.object_token_ids, k, r)?)
}
