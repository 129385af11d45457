//! Dataset directory reader and writer, plus an importer for the LINQS
//! `.content` / `.cites` citation format.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GraphDataset, Splits};
use crate::diff::Matrix;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let text = read_text(path)?;
    Ok(text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r').to_string()))
        .filter(|(_, l)| !l.trim().is_empty())
        .collect())
}

/// Reads a dataset directory (`meta.json`, `features.tsv`, `edges.tsv`,
/// `labels.tsv`, optional `splits.json`).
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<GraphDataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta: Meta =
        serde_json::from_str(&read_text(&meta_path)?).map_err(|e| Error::parse(&meta_path, e.line(), e.to_string()))?;
    let n = meta.num_nodes;

    let fpath = dir.join("features.tsv");
    let flines = lines(&fpath)?;
    if flines.len() != n {
        return Err(Error::parse(&fpath, flines.len(), format!("expected {n} feature rows, found {}", flines.len())));
    }
    let mut data = Vec::with_capacity(n * meta.num_features);
    for (ln, l) in &flines {
        let before = data.len();
        for tok in l.split('\t') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| Error::parse(&fpath, *ln, format!("not a number: '{tok}'")))?;
            if !v.is_finite() {
                return Err(Error::parse(&fpath, *ln, "non-finite feature"));
            }
            data.push(v);
        }
        if data.len() - before != meta.num_features {
            return Err(Error::parse(
                &fpath,
                *ln,
                format!("expected {} features, found {}", meta.num_features, data.len() - before),
            ));
        }
    }
    let features = Matrix::from_vec(n, meta.num_features, data)?;

    let epath = dir.join("edges.tsv");
    let mut edges = Vec::new();
    let mut seen = HashSet::new();
    for (ln, l) in lines(&epath)? {
        let toks: Vec<&str> = l.split('\t').map(str::trim).collect();
        if toks.len() != 2 {
            return Err(Error::parse(&epath, ln, "expected 'u<TAB>v'"));
        }
        let parse = |t: &str| {
            t.parse::<usize>()
                .map_err(|_| Error::parse(&epath, ln, format!("not a node index: '{t}'")))
        };
        let (u, v) = (parse(toks[0])?, parse(toks[1])?);
        if u == v {
            return Err(Error::parse(&epath, ln, format!("self-loop at node {u}")));
        }
        if u >= n || v >= n {
            return Err(Error::parse(&epath, ln, format!("edge ({u}, {v}) out of range for {n} nodes")));
        }
        if u > v {
            return Err(Error::parse(&epath, ln, format!("edge ({u}, {v}) must be written with u < v")));
        }
        if !seen.insert((u, v)) {
            return Err(Error::parse(&epath, ln, format!("duplicate edge ({u}, {v})")));
        }
        edges.push((u, v));
    }

    let lpath = dir.join("labels.tsv");
    let llines = lines(&lpath)?;
    if llines.len() != n {
        return Err(Error::parse(&lpath, llines.len(), format!("expected {n} labels, found {}", llines.len())));
    }
    let mut labels = Vec::with_capacity(n);
    for (ln, l) in &llines {
        let y: i64 = l
            .trim()
            .parse()
            .map_err(|_| Error::parse(&lpath, *ln, format!("not an integer label: '{l}'")))?;
        labels.push(match y {
            -1 => None,
            y if y >= 0 && (y as usize) < meta.num_classes => Some(y as usize),
            y => return Err(Error::parse(&lpath, *ln, format!("label {y} outside [0, {})", meta.num_classes))),
        });
    }

    let spath = dir.join("splits.json");
    let splits = if spath.exists() {
        serde_json::from_str(&read_text(&spath)?).map_err(|e| Error::parse(&spath, e.line(), e.to_string()))?
    } else {
        Splits::default()
    };

    GraphDataset::new(features, edges, labels, meta.num_classes, splits).map_err(|e| match e {
        Error::Contract(msg) => Error::parse(dir, 0, msg),
        other => other,
    })
}

fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(body).map_err(|e| Error::io(path, e))
}

/// Writes `g` as a dataset directory, creating it if needed.
pub fn save_dataset(g: &GraphDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        num_nodes: g.num_nodes(),
        num_features: g.num_features(),
        num_classes: g.num_classes(),
    };
    let mut meta_s = serde_json::to_string(&meta).expect("meta serializes");
    meta_s.push('\n');
    write_file(&dir.join("meta.json"), meta_s.as_bytes())?;

    let mut fs_ = String::with_capacity(g.num_nodes() * g.num_features() * 4);
    for r in 0..g.num_nodes() {
        for (j, v) in g.features().row(r).iter().enumerate() {
            if j > 0 {
                fs_.push('\t');
            }
            fs_.push_str(&v.to_string());
        }
        fs_.push('\n');
    }
    write_file(&dir.join("features.tsv"), fs_.as_bytes())?;

    let mut es = String::new();
    for &(u, v) in g.edges() {
        es.push_str(&format!("{u}\t{v}\n"));
    }
    write_file(&dir.join("edges.tsv"), es.as_bytes())?;

    let mut ls = String::new();
    for y in g.labels() {
        match y {
            Some(y) => ls.push_str(&format!("{y}\n")),
            None => ls.push_str("-1\n"),
        }
    }
    write_file(&dir.join("labels.tsv"), ls.as_bytes())?;

    let mut ss = serde_json::to_string(&g.splits).expect("splits serialize");
    ss.push('\n');
    write_file(&dir.join("splits.json"), ss.as_bytes())
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let r: Box<dyn Read> = if path.extension().is_some_and(|e| e == "gz") {
        Box::new(flate2::read::GzDecoder::new(f))
    } else {
        Box::new(f)
    };
    Ok(Box::new(BufReader::new(r)))
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    open_maybe_gz(path)?
        .lines()
        .collect::<std::io::Result<Vec<_>>>()
        .map_err(|e| Error::io(path, e))
}

/// Imports a LINQS citation dataset. Nodes keep file order, class names are
/// indexed in sorted order, and citations become undirected edges with
/// duplicates and self-citations dropped. Either file may be gzip-compressed.
pub fn import_linqs(content: impl AsRef<Path>, cites: impl AsRef<Path>) -> Result<GraphDataset> {
    let content: PathBuf = content.as_ref().into();
    let cites: PathBuf = cites.as_ref().into();
    let mut ids = HashMap::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (i, line) in read_lines(&content)?.iter().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() < 3 {
            return Err(Error::parse(&content, i + 1, "expected '<id> <features>+ <label>'"));
        }
        let feats = toks[1..toks.len() - 1]
            .iter()
            .map(|t| t.parse::<f64>().map_err(|_| Error::parse(&content, i + 1, format!("bad feature '{t}'"))))
            .collect::<Result<Vec<_>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != feats.len() {
                return Err(Error::parse(&content, i + 1, "feature count differs from first row"));
            }
        }
        if ids.insert(toks[0].to_string(), rows.len()).is_some() {
            return Err(Error::parse(&content, i + 1, format!("duplicate paper id {}", toks[0])));
        }
        rows.push(feats);
        names.push(toks[toks.len() - 1].to_string());
    }
    let classes: Vec<&String> = names.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let class_of: HashMap<&String, usize> = classes.iter().enumerate().map(|(k, c)| (*c, k)).collect();
    let labels = names.iter().map(|n| Some(class_of[n])).collect();
    let num_classes = classes.len();

    let mut edges = BTreeSet::new();
    for (i, line) in read_lines(&cites)?.iter().enumerate() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.is_empty() {
            continue;
        }
        if toks.len() != 2 {
            return Err(Error::parse(&cites, i + 1, "expected '<cited> <citing>'"));
        }
        // Citations to papers outside the content file are skipped.
        let (Some(&a), Some(&b)) = (ids.get(toks[0]), ids.get(toks[1])) else {
            continue;
        };
        if a != b {
            edges.insert((a.min(b), a.max(b)));
        }
    }
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len();
    let x = Matrix::from_vec(n, d, rows.into_iter().flatten().collect())?;
    GraphDataset::new(x, edges.into_iter().collect(), labels, num_classes, Splits::default())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::path2;

    #[test]
    fn round_trip_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let g = GraphDataset::new(
            Matrix::from_rows(&[[0.1, -2.5], [1e-300, 3.0], [0.0, 7.25]]).unwrap(),
            vec![(0, 2), (1, 2)],
            vec![Some(1), None, Some(0)],
            2,
            Splits {
                train: vec![0],
                ood: vec![1],
                ..Default::default()
            },
        )
        .unwrap();
        save_dataset(&g, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, g);
        let first: Vec<_> = ["features.tsv", "edges.tsv", "labels.tsv", "splits.json", "meta.json"]
            .iter()
            .map(|f| fs::read(dir.path().join(f)).unwrap())
            .collect();
        save_dataset(&back, dir.path()).unwrap();
        for (f, bytes) in ["features.tsv", "edges.tsv", "labels.tsv", "splits.json", "meta.json"].iter().zip(first) {
            assert_eq!(fs::read(dir.path().join(f)).unwrap(), bytes, "{f}");
        }
    }

    #[test]
    fn minimal_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&path2(), dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap().num_nodes(), 2);
    }

    fn expect_edge_error(body: &str, needle: &str) {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&path2(), dir.path()).unwrap();
        fs::write(dir.path().join("edges.tsv"), body).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { file, line, msg }) => {
                assert!(file.ends_with("edges.tsv"));
                assert!(line >= 1);
                assert!(msg.contains(needle), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_edges_are_parse_errors() {
        expect_edge_error("0\t0\n", "self-loop");
        expect_edge_error("0\t5\n", "out of range");
        expect_edge_error("0\t1\n0\t1\n", "duplicate");
        expect_edge_error("0 x\n", "expected");
    }

    #[test]
    fn missing_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn linqs_import() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("t.content");
        let k = dir.path().join("t.cites");
        fs::write(&c, "p1\t1\t0\tZeta\np2\t0\t1\tAlpha\np3\t1\t1\tZeta\n").unwrap();
        fs::write(&k, "p1\tp2\np2\tp1\np3\tp3\np1\tmissing\np3\tp2\n").unwrap();
        let g = import_linqs(&c, &k).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_classes(), 2);
        assert_eq!(g.labels(), &[Some(1), Some(0), Some(1)]);
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }
}
