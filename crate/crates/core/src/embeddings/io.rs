//! word2vec text embeddings, MUSE-style dictionaries and map files.

use std::fmt::Write as _;
use std::path::Path;

use super::{BilingualDictionary, CrosslingualMap, DictProvenance, EmbeddingMatrix};
use crate::error::{Error, Result};

pub fn format_embeddings(e: &EmbeddingMatrix) -> Result<String> {
    let mut out = format!("{} {}\n", e.len(), e.dim());
    for (i, tok) in e.tokens().iter().enumerate() {
        if tok.is_empty() || tok.chars().any(char::is_whitespace) {
            return Err(Error::format(
                "embeddings",
                format!("token {tok:?} is empty or contains whitespace"),
            ));
        }
        out.push_str(tok);
        for v in e.row(i) {
            write!(out, " {v:.6}").expect("write to string");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_embeddings(text: &str) -> Result<EmbeddingMatrix> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("embeddings", "empty file"))?;
    let mut parts = header.split_whitespace();
    let (Some(v), Some(d), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(Error::format("embeddings", format!("bad header {header:?}")));
    };
    let rows: usize = v
        .parse()
        .map_err(|_| Error::format("embeddings", "bad row count"))?;
    let dim: usize = d
        .parse()
        .map_err(|_| Error::format("embeddings", "bad dimension"))?;
    let mut tokens = Vec::with_capacity(rows);
    let mut data = Vec::with_capacity(rows * dim);
    for (i, line) in lines.enumerate() {
        let mut fields = line.split(' ');
        let tok = fields.next().unwrap_or_default();
        let before = data.len();
        for f in fields {
            let x: f64 = f
                .parse()
                .map_err(|_| Error::format("embeddings", format!("row {}: bad value {f:?}", i + 1)))?;
            data.push(x);
        }
        if data.len() - before != dim {
            return Err(Error::format(
                "embeddings",
                format!("row {}: expected {dim} values, found {}", i + 1, data.len() - before),
            ));
        }
        tokens.push(tok.to_string());
    }
    if tokens.len() != rows {
        return Err(Error::format(
            "embeddings",
            format!("header declares {rows} rows, found {}", tokens.len()),
        ));
    }
    EmbeddingMatrix::new(tokens, dim, data)
}

pub fn save_embeddings(e: &EmbeddingMatrix, path: &Path) -> Result<()> {
    let text = format_embeddings(e)?;
    std::fs::write(path, text).map_err(|err| Error::io(path, err))
}

pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(&text)
}

pub fn save_dictionary(dict: &BilingualDictionary, path: &Path) -> Result<()> {
    let mut out = String::new();
    for (s, t) in &dict.pairs {
        out.push_str(s);
        out.push('\t');
        out.push_str(t);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_dictionary(path: &Path, provenance: DictProvenance) -> Result<BilingualDictionary> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (s, t) = line
            .split_once('\t')
            .or_else(|| line.split_once(' '))
            .ok_or_else(|| Error::format("dictionary", format!("line {}: expected source<TAB>target", i + 1)))?;
        pairs.push((s.trim().to_string(), t.trim().to_string()));
    }
    Ok(BilingualDictionary::new(pairs, provenance))
}

pub fn save_map(map: &CrosslingualMap, path: &Path) -> Result<()> {
    let d = map.dim();
    let mut out = format!("map-v1 {d}\n");
    for i in 0..d {
        let row: Vec<String> = map.matrix()[i * d..(i + 1) * d]
            .iter()
            .map(|v| format!("{v:.17e}"))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn load_map(path: &Path) -> Result<CrosslingualMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    let d: usize = header
        .strip_prefix("map-v1 ")
        .and_then(|n| n.trim().parse().ok())
        .ok_or_else(|| Error::format("map", format!("bad header {header:?}")))?;
    let mut data = Vec::with_capacity(d * d);
    for line in lines {
        for f in line.split_whitespace() {
            data.push(f.parse::<f64>().map_err(|_| Error::format("map", format!("bad value {f:?}")))?);
        }
    }
    if data.len() != d * d {
        return Err(Error::format("map", format!("expected {} values, found {}", d * d, data.len())));
    }
    Ok(CrosslingualMap::from_matrix(d, data))
}
