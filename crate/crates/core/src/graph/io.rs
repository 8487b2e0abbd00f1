//! Edge, feature and label file formats.
//!
//! - edges: whitespace separated `u v` per line, `#` starts a comment
//! - features: CSV with header `node_id,f0,...,f{d-1}`, or binary: magic
//!   `NSRG`, u32 version, u64 n, u64 d, then row-major little-endian f32
//! - labels: CSV `node_id,class_id`, header optional

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::AttributedGraph;
use crate::error::{Error, Result};
use crate::numeric::Matrix;

const FEATURE_MAGIC: &[u8; 4] = b"NSRG";
const FEATURE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureFormat {
    #[default]
    Csv,
    Binary,
}

/// Locations of the three files describing a graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphFiles {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
}

impl GraphFiles {
    /// Conventional names inside `dir`: `edges.txt`, `features.csv` or
    /// `features.bin`, `labels.csv`.
    pub fn in_dir(dir: impl AsRef<Path>, format: FeatureFormat) -> Self {
        let dir = dir.as_ref();
        let features = match format {
            FeatureFormat::Csv => "features.csv",
            FeatureFormat::Binary => "features.bin",
        };
        Self {
            edges: dir.join("edges.txt"),
            features: dir.join(features),
            labels: dir.join("labels.csv"),
        }
    }

    /// Like [`GraphFiles::in_dir`], picking whichever feature file exists (CSV first).
    pub fn discover(dir: impl AsRef<Path>) -> Self {
        let csv = Self::in_dir(dir.as_ref(), FeatureFormat::Csv);
        if csv.features.exists() {
            csv
        } else {
            Self::in_dir(dir, FeatureFormat::Binary)
        }
    }
}

fn load_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

pub fn load_graph(edge_file: &Path, feature_file: &Path, label_file: &Path) -> Result<AttributedGraph> {
    let features = read_features(feature_file)?;
    let n = features.rows();
    let labels = read_labels(label_file, n)?;
    let edges = read_edges(edge_file, n)?;
    AttributedGraph::from_edges(features, &edges, labels)
}

pub fn save_graph(g: &AttributedGraph, files: &GraphFiles, format: FeatureFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(&files.edges)?);
    for (u, v) in g.edges() {
        writeln!(w, "{u} {v}")?;
    }
    w.flush()?;
    write_features(g.features(), &files.features, format)?;
    let mut w = BufWriter::new(File::create(&files.labels)?);
    writeln!(w, "node_id,class_id")?;
    for (v, c) in g.node_class().iter().enumerate() {
        writeln!(w, "{v},{c}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_features(features: &Matrix, path: &Path, format: FeatureFormat) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    match format {
        FeatureFormat::Csv => {
            write!(w, "node_id")?;
            for j in 0..features.cols() {
                write!(w, ",f{j}")?;
            }
            writeln!(w)?;
            for r in 0..features.rows() {
                write!(w, "{r}")?;
                for v in features.row(r) {
                    write!(w, ",{v}")?;
                }
                writeln!(w)?;
            }
        }
        FeatureFormat::Binary => {
            w.write_all(FEATURE_MAGIC)?;
            w.write_all(&FEATURE_VERSION.to_le_bytes())?;
            w.write_all(&(features.rows() as u64).to_le_bytes())?;
            w.write_all(&(features.cols() as u64).to_le_bytes())?;
            for &v in features.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a feature matrix, detecting the binary format by its magic bytes.
pub fn read_features(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(FEATURE_MAGIC) {
        read_binary_features(path, &bytes)
    } else {
        read_csv_features(path, &bytes)
    }
}

fn read_binary_features(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    let mut cursor = &bytes[4..];
    let mut u32_buf = [0u8; 4];
    let mut u64_buf = [0u8; 8];
    let truncated = |_| load_err(path, 0, "truncated binary feature header");
    cursor.read_exact(&mut u32_buf).map_err(truncated)?;
    let version = u32::from_le_bytes(u32_buf);
    if version != FEATURE_VERSION {
        return Err(load_err(path, 0, format!("unsupported feature file version {version}")));
    }
    cursor.read_exact(&mut u64_buf).map_err(truncated)?;
    let n = u64::from_le_bytes(u64_buf) as usize;
    cursor.read_exact(&mut u64_buf).map_err(truncated)?;
    let d = u64::from_le_bytes(u64_buf) as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|x| x.checked_mul(4))
        .ok_or_else(|| load_err(path, 0, "feature dimensions overflow"))?;
    if cursor.len() != expected {
        return Err(load_err(
            path,
            0,
            format!("expected {expected} bytes of f32 data for {n}x{d}, found {}", cursor.len()),
        ));
    }
    let data = cursor
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Matrix::from_vec(n, d, data)
}

fn read_csv_features(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    let text = std::str::from_utf8(bytes).map_err(|_| load_err(path, 0, "feature file is not UTF-8"))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| load_err(path, 1, "empty feature file"))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.first() != Some(&"node_id") {
        return Err(load_err(path, 1, "header must start with `node_id`"));
    }
    let d = columns.len() - 1;
    let mut rows: Vec<(usize, Vec<f64>, usize)> = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != d + 1 {
            return Err(load_err(
                path,
                lineno,
                format!("expected {} columns, found {}", d + 1, fields.len()),
            ));
        }
        let id: usize = fields[0]
            .parse()
            .map_err(|_| load_err(path, lineno, format!("bad node id `{}`", fields[0])))?;
        let values = fields[1..]
            .iter()
            .map(|f| {
                f.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| load_err(path, lineno, format!("bad feature value `{f}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((id, values, lineno));
    }
    let n = rows.len();
    let mut data = vec![0.0; n * d];
    let mut seen = vec![false; n];
    for (id, values, lineno) in rows {
        if id >= n {
            return Err(load_err(path, lineno, format!("node id {id} out of range for {n} rows")));
        }
        if std::mem::replace(&mut seen[id], true) {
            return Err(load_err(path, lineno, format!("duplicate node id {id}")));
        }
        data[id * d..(id + 1) * d].copy_from_slice(&values);
    }
    Matrix::from_vec(n, d, data)
}

fn read_labels(path: &Path, n: usize) -> Result<Vec<u32>> {
    let reader = BufReader::new(File::open(path)?);
    let mut labels: Vec<Option<u32>> = vec![None; n];
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if i == 0 && line.starts_with("node_id") {
            continue;
        }
        let mut parts = line.split(',').map(str::trim);
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(load_err(path, lineno, "expected `node_id,class_id`"));
        };
        let v: usize = a
            .parse()
            .map_err(|_| load_err(path, lineno, format!("bad node id `{a}`")))?;
        let c: u32 = b
            .parse()
            .map_err(|_| load_err(path, lineno, format!("bad class id `{b}`")))?;
        if v >= n {
            return Err(load_err(path, lineno, format!("dangling node id {v} (graph has {n} nodes)")));
        }
        if labels[v].replace(c).is_some() {
            return Err(load_err(path, lineno, format!("duplicate label for node {v}")));
        }
    }
    labels
        .into_iter()
        .enumerate()
        .map(|(v, c)| c.ok_or_else(|| load_err(path, 0, format!("node {v} has no label"))))
        .collect()
}

fn read_edges(path: &Path, n: usize) -> Result<Vec<(usize, usize)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut edges = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut parts = content.split_whitespace();
        let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(load_err(path, lineno, "expected `u v`"));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| load_err(path, lineno, format!("bad node id `{s}`")))
        };
        let (u, v) = (parse(a)?, parse(b)?);
        if u >= n || v >= n {
            return Err(load_err(
                path,
                lineno,
                format!("dangling node id {} (graph has {n} nodes)", u.max(v)),
            ));
        }
        edges.push((u, v));
    }
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SynthConfig;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn path_graph_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let e = write(dir.path(), "e.txt", "# path\n0 1\n1 2 # trailing\n\n");
        let f = write(dir.path(), "f.csv", "node_id,f0\n2,0.5\n0,1\n1,-2\n");
        let l = write(dir.path(), "l.csv", "node_id,class_id\n0,0\n1,0\n2,1\n");
        let g = load_graph(&e, &f, &l).unwrap();
        assert_eq!((0..3).map(|v| g.degree(v)).collect::<Vec<_>>(), vec![1, 2, 1]);
        assert_eq!(g.features().get(2, 0), 0.5);
        assert_eq!(g.class_of(2), 1);
    }

    #[test]
    fn both_directions_collapse() {
        let dir = tempfile::tempdir().unwrap();
        let e = write(dir.path(), "e.txt", "0 1\n1 0\n");
        let f = write(dir.path(), "f.csv", "node_id,f0\n0,0\n1,0\n");
        let l = write(dir.path(), "l.csv", "0,0\n1,0\n");
        assert_eq!(load_graph(&e, &f, &l).unwrap().num_edges(), 1);
    }

    fn expect_line(err: Error, want: usize) {
        match err {
            Error::Load { line, .. } => assert_eq!(line, want),
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let f = write(dir.path(), "f.csv", "node_id,f0\n0,0\n1,0\n");
        let l = write(dir.path(), "l.csv", "0,0\n1,0\n");
        let dangling = write(dir.path(), "e.txt", "0 1\n1 7\n");
        expect_line(load_graph(&dangling, &f, &l).unwrap_err(), 2);

        let e = write(dir.path(), "e2.txt", "0 1\n");
        let ragged = write(dir.path(), "f2.csv", "node_id,f0,f1\n0,1,2\n1,3\n");
        expect_line(load_graph(&e, &ragged, &l).unwrap_err(), 3);

        let dup = write(dir.path(), "l2.csv", "node_id,class_id\n0,0\n1,0\n0,1\n");
        expect_line(load_graph(&e, &f, &dup).unwrap_err(), 4);
    }

    #[test]
    fn truncated_binary_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.bin");
        write_features(&Matrix::filled(3, 2, 0.5), &p, FeatureFormat::Binary).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_features(&p), Err(Error::Load { .. })));
    }

    #[test]
    fn generated_graph_round_trips() {
        let cfg = SynthConfig {
            n_normal: 900,
            n_anomaly_per_class: 50,
            ..SynthConfig::default()
        };
        let g = cfg.generate(5).unwrap();
        assert_eq!(g.num_nodes(), 1000);
        for format in [FeatureFormat::Csv, FeatureFormat::Binary] {
            let dir = tempfile::tempdir().unwrap();
            let files = GraphFiles::in_dir(dir.path(), format);
            save_graph(&g, &files, format).unwrap();
            let back = load_graph(&files.edges, &files.features, &files.labels).unwrap();
            assert_eq!(back, g);
        }
    }
}
