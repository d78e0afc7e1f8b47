use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::{Graph, Masks, Split};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.txt";
pub const MASKS_FILE: &str = "masks.txt";

/// Locations of the files making up one graph.
#[derive(Clone, Debug)]
pub struct GraphPaths {
    pub edges: PathBuf,
    pub features: PathBuf,
    pub labels: PathBuf,
    pub masks: Option<PathBuf>,
}

impl GraphPaths {
    /// Standard file names inside `dir`; the masks file is used only if it
    /// exists.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let masks = dir.join(MASKS_FILE);
        GraphPaths {
            edges: dir.join(EDGES_FILE),
            features: dir.join(FEATURES_FILE),
            labels: dir.join(LABELS_FILE),
            masks: masks.exists().then_some(masks),
        }
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

pub fn load_graph<T: Scalar>(paths: &GraphPaths) -> Result<Graph<T>> {
    let labels_text = fs::read_to_string(&paths.labels)?;
    let mut labels = Vec::new();
    for (ln, line) in content_lines(&labels_text) {
        let label = line
            .parse::<usize>()
            .map_err(|e| parse_err(&paths.labels, ln, format!("bad label {line:?}: {e}")))?;
        labels.push(label);
    }

    let features_text = fs::read_to_string(&paths.features)?;
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (ln, line) in content_lines(&features_text) {
        let mut count = 0;
        for field in line.split(',') {
            let v = field
                .trim()
                .parse::<T>()
                .map_err(|_| parse_err(&paths.features, ln, format!("bad feature {field:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(&paths.features, ln, "non-finite feature"));
            }
            data.push(v);
            count += 1;
        }
        match width {
            None => width = Some(count),
            Some(w) if w != count => {
                return Err(parse_err(
                    &paths.features,
                    ln,
                    format!("{count} columns, expected {w}"),
                ))
            }
            _ => {}
        }
        rows += 1;
    }
    if rows != labels.len() {
        return Err(Error::Graph(format!(
            "{rows} feature rows but {} labels",
            labels.len()
        )));
    }
    let features = Matrix::from_vec(rows, width.unwrap_or(0), data)?;
    let n = labels.len();

    let edges_text = fs::read_to_string(&paths.edges)?;
    let mut edges = Vec::new();
    for (ln, line) in content_lines(&edges_text) {
        if line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (Some(a), Some(b), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(&paths.edges, ln, "expected `src<TAB>dst`"));
        };
        let parse = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| parse_err(&paths.edges, ln, format!("bad node index {s:?}: {e}")))
        };
        let (a, b) = (parse(a)?, parse(b)?);
        if a >= n || b >= n {
            return Err(parse_err(
                &paths.edges,
                ln,
                format!("node index out of range: ({a}, {b}) with {n} nodes"),
            ));
        }
        edges.push((a, b));
    }

    let g = Graph::new(&edges, features, labels, None)?;
    match &paths.masks {
        None => Ok(g),
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let mut assignment = Vec::with_capacity(n);
            for (ln, line) in content_lines(&text) {
                assignment.push(match line {
                    "train" => Some(Split::Train),
                    "val" => Some(Split::Val),
                    "test" => Some(Split::Test),
                    "none" => None,
                    other => return Err(parse_err(path, ln, format!("unknown split {other:?}"))),
                });
            }
            if assignment.len() != n {
                return Err(Error::Graph(format!(
                    "{} mask lines for {n} nodes",
                    assignment.len()
                )));
            }
            g.with_masks(Masks::from_assignment(assignment))
        }
    }
}

/// Writes the four standard files into `dir` (created if missing).
pub fn write_graph<T: Scalar>(g: &Graph<T>, dir: impl AsRef<Path>) -> Result<GraphPaths> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;

    let mut w = BufWriter::new(fs::File::create(dir.join(EDGES_FILE))?);
    writeln!(w, "# undirected edge list: src<TAB>dst, 0-based")?;
    for &(a, b) in g.edges() {
        writeln!(w, "{a}\t{b}")?;
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join(FEATURES_FILE))?);
    for row in g.features().row_iter() {
        let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join(LABELS_FILE))?);
    for l in g.labels() {
        writeln!(w, "{l}")?;
    }
    w.flush()?;

    let mut w = BufWriter::new(fs::File::create(dir.join(MASKS_FILE))?);
    for a in g.masks().assignment() {
        writeln!(w, "{}", a.map_or("none", Split::name))?;
    }
    w.flush()?;

    Ok(GraphPaths::in_dir(dir))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{generate_sbm, split_nodes, SbmSpec};

    fn write(dir: &Path, name: &str, text: &str) {
        fs::write(dir.join(name), text).unwrap();
    }

    fn valid_dir() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), EDGES_FILE, "# comment\n0\t1\n1\t2\n");
        write(dir.path(), FEATURES_FILE, "0.5,1\n-2,3.25\n0,0\n");
        write(dir.path(), LABELS_FILE, "0\n1\n1\n");
        dir
    }

    #[test]
    fn round_trip_is_exact() {
        let g = generate_sbm::<f32>(&SbmSpec {
            n: 40,
            classes: 3,
            feature_dim: 5,
            p_in: 0.2,
            p_out: 0.05,
            signal: 2.0,
            seed: 5,
        })
        .unwrap();
        let g = split_nodes(g, (0.5, 0.25, 0.2), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = write_graph(&g, dir.path()).unwrap();
        let back: Graph<f32> = load_graph(&paths).unwrap();
        assert_eq!(back.edges(), g.edges());
        assert_eq!(back.features(), g.features());
        assert_eq!(back.labels(), g.labels());
        assert_eq!(back.masks(), g.masks());
    }

    #[test]
    fn loads_minimal_files() {
        let dir = valid_dir();
        let g: Graph<f64> = load_graph(&GraphPaths::in_dir(dir.path())).unwrap();
        assert_eq!(g.num_nodes(), 3);
        assert_eq!(g.num_classes(), 2);
        assert_eq!(g.features().get(1, 1), 3.25);
        assert_eq!(g.masks().count(Split::Train), 0);
    }

    #[test]
    fn malformed_edge_reports_line() {
        let dir = valid_dir();
        write(dir.path(), EDGES_FILE, "0\t1\n\n1 x\n");
        let err = load_graph::<f32>(&GraphPaths::in_dir(dir.path())).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_range_and_count_mismatch() {
        let dir = valid_dir();
        write(dir.path(), EDGES_FILE, "0\t7\n");
        let err = load_graph::<f32>(&GraphPaths::in_dir(dir.path())).unwrap_err();
        assert!(err.to_string().contains("out of range"), "{err}");

        let dir = valid_dir();
        write(dir.path(), LABELS_FILE, "0\n1\n");
        assert!(matches!(
            load_graph::<f32>(&GraphPaths::in_dir(dir.path())),
            Err(Error::Graph(_))
        ));
    }

    #[test]
    fn mask_file_validation() {
        let dir = valid_dir();
        write(dir.path(), MASKS_FILE, "train\nval\nbogus\n");
        assert!(matches!(
            load_graph::<f32>(&GraphPaths::in_dir(dir.path())),
            Err(Error::Parse { line: 3, .. })
        ));
        write(dir.path(), MASKS_FILE, "train\nnone\ntest\n");
        let g = load_graph::<f32>(&GraphPaths::in_dir(dir.path())).unwrap();
        assert_eq!(g.masks().nodes(Split::Test), vec![2]);
    }
}
