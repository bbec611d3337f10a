//! Canonical on-disk datasets and train/validation/test splits.
//!
//! A dataset `name` in directory `dir` is a set of UTF-8 text files:
//!
//! - `name.meta`: lines `nodes=N`, `features=X`, `classes=C`, `directed=0|1`
//! - `name.edges`: one `src<TAB>dst` per line, 0-based
//! - `name.x`: N lines of X space-separated reals
//! - `name.y`: N lines holding a class id
//! - `name.ids` (optional): N lines holding the original integer identifier
//!
//! Split files hold three sections introduced by `#train`, `#val` and `#test`,
//! with one node index per line.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::SparseGraph;

pub const DEFAULT_SPLIT_FRACTIONS: (f64, f64, f64) = (0.6, 0.2, 0.2);

const FILE_KINDS: [&str; 5] = ["meta", "edges", "x", "y", "ids"];

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalDataset {
    pub graph: SparseGraph,
    pub name: String,
    /// SHA-256 over the files read, in the order meta, edges, x, y, ids.
    /// Each file contributes its extension, a NUL byte, its length as
    /// little-endian u64 and its contents.
    pub source_checksum: String,
}

pub fn dataset_path(dir: &Path, name: &str, kind: &str) -> PathBuf {
    dir.join(format!("{name}.{kind}"))
}

/// Whether the mandatory files of `name` exist in `dir`.
pub fn dataset_exists(dir: &Path, name: &str) -> bool {
    FILE_KINDS[..4].iter().all(|k| dataset_path(dir, name, k).is_file())
}

struct Meta {
    nodes: usize,
    features: usize,
    classes: usize,
    directed: bool,
}

/// Lines with their 1-based line numbers. Trailing `\r` is dropped.
fn numbered_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
}

fn parse_meta(path: &Path, text: &str) -> Result<Meta> {
    let mut values: HashMap<&str, (usize, usize)> = HashMap::new();
    for (line, raw) in numbered_lines(text) {
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        let (key, value) = l
            .split_once('=')
            .ok_or_else(|| Error::parse(path, line, format!("expected key=value, got {l:?}")))?;
        let key = key.trim();
        if !matches!(key, "nodes" | "features" | "classes" | "directed") {
            return Err(Error::parse(path, line, format!("unknown key {key:?}")));
        }
        let v: usize = value
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line, format!("{key} must be a non-negative integer, got {:?}", value.trim())))?;
        if values.insert(key, (v, line)).is_some() {
            return Err(Error::parse(path, line, format!("duplicate key {key:?}")));
        }
    }
    let last_line = text.lines().count().max(1);
    let get = |key: &str| {
        values
            .get(key)
            .copied()
            .ok_or_else(|| Error::parse(path, last_line, format!("missing key {key:?}")))
    };
    let (directed, directed_line) = get("directed")?;
    if directed > 1 {
        return Err(Error::parse(path, directed_line, "directed must be 0 or 1"));
    }
    let meta = Meta {
        nodes: get("nodes")?.0,
        features: get("features")?.0,
        classes: get("classes")?.0,
        directed: directed == 1,
    };
    if meta.nodes == 0 {
        return Err(Error::parse(path, get("nodes")?.1, "a dataset needs at least one node"));
    }
    if meta.classes < 2 {
        return Err(Error::parse(path, get("classes")?.1, "a dataset needs at least two classes"));
    }
    Ok(meta)
}

fn parse_index(path: &Path, line: usize, token: &str, bound: usize, what: &str) -> Result<usize> {
    let v: usize = token
        .parse()
        .map_err(|_| Error::parse(path, line, format!("{what} {token:?} is not a non-negative integer")))?;
    if v >= bound {
        return Err(Error::parse(path, line, format!("{what} {v} out of range [0, {bound})")));
    }
    Ok(v)
}

fn parse_edges(path: &Path, text: &str, nodes: usize) -> Result<Vec<(usize, usize)>> {
    let mut arcs = Vec::new();
    for (line, raw) in numbered_lines(text) {
        if raw.trim().is_empty() {
            continue;
        }
        let mut fields = raw.split('\t');
        let (Some(s), Some(d), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::parse(path, line, format!("expected `src<TAB>dst`, got {raw:?}")));
        };
        arcs.push((
            parse_index(path, line, s.trim(), nodes, "node")?,
            parse_index(path, line, d.trim(), nodes, "node")?,
        ));
    }
    Ok(arcs)
}

/// Exactly `n` lines (a single trailing newline is allowed).
fn exact_lines<'a>(path: &Path, text: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let lines: Vec<&str> = numbered_lines(text).map(|(_, l)| l).collect();
    if lines.len() != n {
        return Err(Error::parse(
            path,
            lines.len().min(n) + 1,
            format!("expected {n} lines, found {}", lines.len()),
        ));
    }
    Ok(lines)
}

fn parse_features(path: &Path, text: &str, nodes: usize, width: usize) -> Result<Array2<f64>> {
    let lines = exact_lines(path, text, nodes)?;
    let mut x = Array2::zeros((nodes, width));
    for (i, raw) in lines.iter().enumerate() {
        let line = i + 1;
        let mut count = 0;
        for tok in raw.split_whitespace() {
            if count == width {
                count += 1;
                break;
            }
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(path, line, format!("feature {tok:?} is not a real number")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, line, format!("non-finite feature {tok:?}")));
            }
            x[[i, count]] = v;
            count += 1;
        }
        if count != width {
            let found = raw.split_whitespace().count();
            return Err(Error::parse(path, line, format!("expected {width} features, found {found}")));
        }
    }
    Ok(x)
}

fn parse_labels(path: &Path, text: &str, nodes: usize, classes: usize) -> Result<Vec<usize>> {
    exact_lines(path, text, nodes)?
        .iter()
        .enumerate()
        .map(|(i, raw)| parse_index(path, i + 1, raw.trim(), classes, "label"))
        .collect()
}

fn parse_ids(path: &Path, text: &str, nodes: usize) -> Result<Vec<u64>> {
    exact_lines(path, text, nodes)?
        .iter()
        .enumerate()
        .map(|(i, raw)| {
            raw.trim()
                .parse()
                .map_err(|_| Error::parse(path, i + 1, format!("identifier {raw:?} is not a non-negative integer")))
        })
        .collect()
}

fn hash_file(hasher: &mut Sha256, kind: &str, bytes: &[u8]) {
    hasher.update(kind.as_bytes());
    hasher.update([0u8]);
    hasher.update((bytes.len() as u64).to_le_bytes());
    hasher.update(bytes);
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: &Path, name: &str) -> Result<CanonicalDataset> {
    let mut hasher = Sha256::new();
    let mut texts: HashMap<&str, String> = HashMap::new();
    for kind in FILE_KINDS {
        let path = dataset_path(dir, name, kind);
        if kind == "ids" && !path.exists() {
            continue;
        }
        let text = read_text(&path)?;
        hash_file(&mut hasher, kind, text.as_bytes());
        texts.insert(kind, text);
    }

    let meta_path = dataset_path(dir, name, "meta");
    let meta = parse_meta(&meta_path, &texts["meta"])?;
    let arcs = parse_edges(&dataset_path(dir, name, "edges"), &texts["edges"], meta.nodes)?;
    let features = parse_features(&dataset_path(dir, name, "x"), &texts["x"], meta.nodes, meta.features)?;
    let y_path = dataset_path(dir, name, "y");
    let labels = parse_labels(&y_path, &texts["y"], meta.nodes, meta.classes)?;
    let ids = match texts.get("ids") {
        Some(t) => Some(parse_ids(&dataset_path(dir, name, "ids"), t, meta.nodes)?),
        None => None,
    };

    let first = labels[0];
    if labels.iter().all(|&l| l == first) {
        return Err(Error::parse(&y_path, 1, "labels must cover at least two classes"));
    }

    let graph = SparseGraph::new(meta.nodes, &arcs, meta.directed, features, labels, meta.classes, ids)?;
    Ok(CanonicalDataset {
        graph,
        name: name.to_string(),
        source_checksum: hex::encode(hasher.finalize()),
    })
}

/// Writes `g` in canonical form and returns the checksum `load_dataset` will report.
///
/// Undirected edges are written once as `(min, max)`. Features use the shortest
/// decimal form that parses back to the same `f64`. The `.ids` file is written
/// only when identifiers differ from `0..N`.
pub fn save_dataset(dir: &Path, name: &str, g: &SparseGraph) -> Result<String> {
    use std::fmt::Write as _;

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<(&str, String)> = Vec::new();

    files.push((
        "meta",
        format!(
            "nodes={}\nfeatures={}\nclasses={}\ndirected={}\n",
            g.num_nodes(),
            g.num_features(),
            g.num_classes(),
            u8::from(g.is_directed())
        ),
    ));

    let mut edges = String::new();
    if g.is_directed() {
        for (s, d) in g.arcs() {
            let _ = writeln!(edges, "{s}\t{d}");
        }
    } else {
        for (s, d) in g.undirected_pairs() {
            let _ = writeln!(edges, "{s}\t{d}");
        }
    }
    files.push(("edges", edges));

    let mut x = String::new();
    for row in g.features().rows() {
        let mut first = true;
        for v in row {
            if !first {
                x.push(' ');
            }
            first = false;
            let _ = write!(x, "{v:?}");
        }
        x.push('\n');
    }
    files.push(("x", x));

    let mut y = String::new();
    for l in g.labels() {
        let _ = writeln!(y, "{l}");
    }
    files.push(("y", y));

    let ids_path = dataset_path(dir, name, "ids");
    if g.node_ids().iter().enumerate().any(|(i, &id)| id != i as u64) {
        let mut ids = String::new();
        for id in g.node_ids() {
            let _ = writeln!(ids, "{id}");
        }
        files.push(("ids", ids));
    } else if ids_path.exists() {
        fs::remove_file(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
    }

    let mut hasher = Sha256::new();
    for (kind, text) in &files {
        let path = dataset_path(dir, name, kind);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        hash_file(&mut hasher, kind, text.as_bytes());
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Disjoint train/validation/test node sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSet {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    /// `None` for splits read from a file.
    pub seed: Option<u64>,
    pub fractions: Option<(f64, f64, f64)>,
    pub stratified: bool,
}

impl SplitSet {
    pub fn validate(&self, num_nodes: usize) -> Result<()> {
        let mut owner = vec![None; num_nodes];
        for (name, set) in [("train", &self.train), ("val", &self.val), ("test", &self.test)] {
            for &i in set {
                if i >= num_nodes {
                    return Err(Error::NodeOutOfRange { node: i, num_nodes });
                }
                if let Some(prev) = owner[i].replace(name) {
                    return Err(Error::InvalidArgument(format!("node {i} appears in both {prev} and {name}")));
                }
            }
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items over `fractions` plus an
/// implicit leftover share `1 - Σ fractions`. Ties go to the earlier share.
fn apportion(n: usize, fractions: [f64; 3]) -> [usize; 3] {
    let leftover = (1.0 - fractions.iter().sum::<f64>()).max(0.0);
    let shares = [fractions[0], fractions[1], fractions[2], leftover];
    let quotas: Vec<f64> = shares.iter().map(|f| f * n as f64).collect();
    // Tolerance absorbs products such as 0.6 * 10 landing just under an integer.
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - counts[a] as f64;
        let rb = quotas[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(n.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    [counts[0], counts[1], counts[2]]
}

/// Seeded split of the nodes of `g`.
///
/// Stratified splits apportion each class separately and give every split
/// with a positive fraction at least one node of every class.
pub fn make_splits(g: &SparseGraph, fractions: (f64, f64, f64), seed: u64, stratified: bool) -> Result<SplitSet> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(format!("split fractions must be non-negative, got {fractions:?}")));
    }
    let total: f64 = f.iter().sum();
    if total <= 0.0 || total > 1.0 + 1e-12 {
        return Err(Error::InvalidArgument(format!("split fractions must sum to (0, 1], got {total}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sets: [Vec<usize>; 3] = Default::default();
    let groups: Vec<Vec<usize>> = if stratified {
        let mut by_class = vec![Vec::new(); g.num_classes()];
        for (v, &l) in g.labels().iter().enumerate() {
            by_class[l].push(v);
        }
        by_class.retain(|c| !c.is_empty());
        by_class
    } else {
        vec![(0..g.num_nodes()).collect()]
    };

    let required = f.iter().filter(|&&v| v > 0.0).count();
    for mut nodes in groups {
        let mut counts = apportion(nodes.len(), f);
        if stratified {
            if nodes.len() < required {
                return Err(Error::InvalidArgument(format!(
                    "class {} has {} nodes, fewer than the {required} splits it must appear in",
                    g.labels()[nodes[0]],
                    nodes.len()
                )));
            }
            for s in 0..3 {
                if f[s] > 0.0 && counts[s] == 0 {
                    let donor = (0..3).max_by_key(|&d| (counts[d], std::cmp::Reverse(d))).unwrap_or(0);
                    counts[donor] -= 1;
                    counts[s] += 1;
                }
            }
        }
        nodes.shuffle(&mut rng);
        let mut rest = nodes.as_slice();
        for s in 0..3 {
            let (take, tail) = rest.split_at(counts[s]);
            sets[s].extend_from_slice(take);
            rest = tail;
        }
    }
    for s in &mut sets {
        s.sort_unstable();
    }
    let [train, val, test] = sets;
    Ok(SplitSet {
        train,
        val,
        test,
        seed: Some(seed),
        fractions: Some(fractions),
        stratified,
    })
}

pub fn load_splits(path: &Path, num_nodes: usize) -> Result<SplitSet> {
    let text = read_text(path)?;
    let mut sections: [Option<Vec<usize>>; 3] = Default::default();
    let mut current: Option<usize> = None;
    for (line, raw) in numbered_lines(&text) {
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        if let Some(header) = l.strip_prefix('#') {
            let idx = match header.trim() {
                "train" => 0,
                "val" => 1,
                "test" => 2,
                other => return Err(Error::parse(path, line, format!("unknown section #{other}"))),
            };
            if sections[idx].is_some() {
                return Err(Error::parse(path, line, format!("section #{} repeated", header.trim())));
            }
            sections[idx] = Some(Vec::new());
            current = Some(idx);
            continue;
        }
        let Some(idx) = current else {
            return Err(Error::parse(path, line, "index before the first section header"));
        };
        let v = parse_index(path, line, l, num_nodes, "node")?;
        if let Some(s) = sections[idx].as_mut() {
            s.push(v);
        }
    }
    let names = ["train", "val", "test"];
    let mut out: Vec<Vec<usize>> = Vec::with_capacity(3);
    for (i, s) in sections.into_iter().enumerate() {
        match s {
            Some(s) => out.push(s),
            None => {
                return Err(Error::parse(path, text.lines().count().max(1), format!("missing section #{}", names[i])))
            }
        }
    }
    let test = out.pop().unwrap_or_default();
    let val = out.pop().unwrap_or_default();
    let train = out.pop().unwrap_or_default();
    if train.is_empty() {
        return Err(Error::parse(path, 1, "the #train section is empty"));
    }
    let split = SplitSet {
        train,
        val,
        test,
        seed: None,
        fractions: None,
        stratified: false,
    };
    split
        .validate(num_nodes)
        .map_err(|e| Error::parse(path, 0, e.to_string()))?;
    Ok(split)
}

pub fn save_splits(path: &Path, split: &SplitSet) -> Result<()> {
    let mut out = String::new();
    for (header, set) in [("#train", &split.train), ("#val", &split.val), ("#test", &split.test)] {
        out.push_str(header);
        out.push('\n');
        for i in set {
            out.push_str(&i.to_string());
            out.push('\n');
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Published statistics of a benchmark graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReferenceStats {
    pub name: &'static str,
    pub homophily: f64,
    pub nodes: usize,
    pub edges: usize,
    pub spectral_radius: f64,
    pub features: usize,
    pub classes: usize,
}

pub const REFERENCE_STATS: [ReferenceStats; 9] = [
    ReferenceStats { name: "texas", homophily: 0.11, nodes: 183, edges: 295, spectral_radius: 2.56, features: 1703, classes: 5 },
    ReferenceStats { name: "wisconsin", homophily: 0.21, nodes: 251, edges: 466, spectral_radius: 2.88, features: 1703, classes: 5 },
    ReferenceStats { name: "actor", homophily: 0.22, nodes: 7600, edges: 26752, spectral_radius: 9.99, features: 932, classes: 5 },
    ReferenceStats { name: "squirrel", homophily: 0.22, nodes: 5201, edges: 198493, spectral_radius: 138.60, features: 2089, classes: 5 },
    ReferenceStats { name: "chameleon", homophily: 0.23, nodes: 2277, edges: 31421, spectral_radius: 61.90, features: 2089, classes: 5 },
    ReferenceStats { name: "cornell", homophily: 0.30, nodes: 183, edges: 280, spectral_radius: 2.68, features: 1703, classes: 5 },
    ReferenceStats { name: "citeseer", homophily: 0.74, nodes: 3327, edges: 9104, spectral_radius: 13.74, features: 3703, classes: 6 },
    ReferenceStats { name: "pubmed", homophily: 0.80, nodes: 19717, edges: 88648, spectral_radius: 23.24, features: 500, classes: 3 },
    ReferenceStats { name: "cora", homophily: 0.81, nodes: 2708, edges: 10556, spectral_radius: 14.39, features: 1433, classes: 7 },
];

pub fn reference_stats(name: &str) -> Option<&'static ReferenceStats> {
    let lower = name.to_ascii_lowercase();
    REFERENCE_STATS.iter().find(|r| r.name == lower)
}
