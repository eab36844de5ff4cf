//! Plain-text embedding matrices: a `count dim` header line followed by one
//! `key v1 v2 ... vdim` line per item.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub rows: Vec<(String, Vec<f32>)>,
}

impl EmbeddingMatrix {
    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.rows.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_slice())
    }
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
    let mut hdr = header.split_whitespace();
    let mut field = |name: &str| -> Result<usize> {
        hdr.next()
            .ok_or_else(|| parse_err(1, format!("header missing {name}")))?
            .parse::<usize>()
            .map_err(|e| parse_err(1, format!("bad {name}: {e}")))
    };
    let count = field("count")?;
    let dim = field("dim")?;

    let mut rows = Vec::with_capacity(count);
    for (ln, line) in lines {
        let mut parts = line.split_whitespace();
        let key = parts.next().expect("non-empty line").to_string();
        let vals = parts
            .map(|p| p.parse::<f32>())
            .collect::<std::result::Result<Vec<f32>, _>>()
            .map_err(|e| parse_err(ln + 1, e.to_string()))?;
        if vals.len() != dim {
            return Err(parse_err(ln + 1, format!("expected {dim} values, got {}", vals.len())));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(ln + 1, "non-finite value".into()));
        }
        rows.push((key, vals));
    }
    if rows.len() != count {
        return Err(parse_err(1, format!("header declares {count} rows, file has {}", rows.len())));
    }
    Ok(EmbeddingMatrix { dim, rows })
}

pub fn write_embeddings(path: &Path, m: &EmbeddingMatrix) -> Result<()> {
    let mut out = format!("{} {}\n", m.rows.len(), m.dim);
    for (k, v) in &m.rows {
        out.push_str(k);
        for x in v {
            write!(out, " {x}").expect("string write");
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.txt");
        let m = EmbeddingMatrix {
            dim: 2,
            rows: vec![("a".into(), vec![0.5, -1.25]), ("b".into(), vec![3.0, 1e-3])],
        };
        write_embeddings(&p, &m).unwrap();
        assert_eq!(read_embeddings(&p).unwrap(), m);

        fs::write(&p, "1 2\na 1.0\n").unwrap();
        assert!(matches!(read_embeddings(&p), Err(Error::Parse { line: 2, .. })));
        fs::write(&p, "2 1\na 1.0\n").unwrap();
        assert!(read_embeddings(&p).is_err());
        fs::write(&p, "1 1\na NaN\n").unwrap();
        assert!(read_embeddings(&p).is_err());
    }
}
