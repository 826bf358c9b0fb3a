//! JSON-lines readers and writers for catalogues, logs, pairs and ground truth.
//!
//! A catalogue directory holds `products.jsonl`, `taxonomy.jsonl` and an
//! optional `complementary.jsonl`. Every error names the file and the 1-based
//! line it came from.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use twotower_core::catalog::{
    Catalog, CategoryTaxonomy, ComplementaryMap, GroundTruth, Interaction, InteractionLog, Pair, PairKind, PairSet,
    Product, ValidationError,
};

pub const PRODUCTS_FILE: &str = "products.jsonl";
pub const TAXONOMY_FILE: &str = "taxonomy.jsonl";
pub const COMPLEMENTARY_FILE: &str = "complementary.jsonl";

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: malformed record: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("{path}:{line}: {message}")]
    Invalid { path: PathBuf, line: usize, message: String },
}

impl LoadError {
    fn io(path: &Path, source: io::Error) -> Self {
        LoadError::Io { path: path.to_path_buf(), source }
    }

    /// The 1-based line the error refers to, when there is one.
    pub fn line(&self) -> Option<usize> {
        match self {
            LoadError::Io { .. } => None,
            LoadError::Parse { line, .. } | LoadError::Invalid { line, .. } => Some(*line),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyRecord {
    pub category_id: String,
    pub parent_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplementaryRecord {
    pub source_category: String,
    pub target_categories: Vec<String>,
}

/// First line of a pairs file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairsHeader {
    pub kind: PairKind,
    pub min_cooccurrence: u32,
}

/// Records with the line each one came from. Blank lines are skipped.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>, LoadError> {
    let file = File::open(path).map_err(|e| LoadError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LoadError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| LoadError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

/// Writes through a temporary file in the same directory and renames it
/// into place, so readers never see a partial file.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut BufWriter<File>) -> io::Result<()>) -> io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        write(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
    }
    fs::rename(&tmp, path)
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, items: impl IntoIterator<Item = &'a T>) -> io::Result<()> {
    write_atomic(path, |w| {
        for item in items {
            serde_json::to_writer(&mut *w, item)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

fn invalid(path: &Path, lines: &[usize], e: ValidationError) -> LoadError {
    LoadError::Invalid {
        path: path.to_path_buf(),
        line: lines.get(e.index).copied().unwrap_or(0),
        message: e.violation.to_string(),
    }
}

pub fn load_taxonomy(path: &Path) -> Result<CategoryTaxonomy, LoadError> {
    let records: Vec<(usize, TaxonomyRecord)> = read_jsonl(path)?;
    let lines: Vec<usize> = records.iter().map(|r| r.0).collect();
    CategoryTaxonomy::new(records.into_iter().map(|(_, r)| (r.category_id, r.parent_id)).collect())
        .map_err(|e| invalid(path, &lines, e))
}

pub fn load_complementary(path: &Path, taxonomy: &CategoryTaxonomy) -> Result<ComplementaryMap, LoadError> {
    let records: Vec<(usize, ComplementaryRecord)> = read_jsonl(path)?;
    let lines: Vec<usize> = records.iter().map(|r| r.0).collect();
    ComplementaryMap::new(records.into_iter().map(|(_, r)| (r.source_category, r.target_categories)).collect(), taxonomy)
        .map_err(|e| invalid(path, &lines, e))
}

/// Loads `products.jsonl`, `taxonomy.jsonl` and, if present,
/// `complementary.jsonl` from `dir`, validating every invariant.
pub fn load_catalog(dir: &Path) -> Result<Catalog, LoadError> {
    let taxonomy = load_taxonomy(&dir.join(TAXONOMY_FILE))?;
    let map_path = dir.join(COMPLEMENTARY_FILE);
    let map = if map_path.exists() { load_complementary(&map_path, &taxonomy)? } else { ComplementaryMap::default() };
    let products_path = dir.join(PRODUCTS_FILE);
    let products: Vec<(usize, Product)> = read_jsonl(&products_path)?;
    let lines: Vec<usize> = products.iter().map(|r| r.0).collect();
    Catalog::new(products.into_iter().map(|(_, p)| p).collect(), taxonomy, map)
        .map_err(|e| invalid(&products_path, &lines, e))
}

pub fn save_catalog(dir: &Path, catalog: &Catalog) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(PRODUCTS_FILE), catalog.products())?;
    let taxonomy: Vec<TaxonomyRecord> = catalog
        .taxonomy()
        .records()
        .map(|(id, parent)| TaxonomyRecord { category_id: id.into(), parent_id: parent.map(Into::into) })
        .collect();
    write_jsonl(&dir.join(TAXONOMY_FILE), &taxonomy)?;
    let map: Vec<ComplementaryRecord> = catalog
        .complementary()
        .iter()
        .map(|(s, t)| ComplementaryRecord { source_category: s.into(), target_categories: t.to_vec() })
        .collect();
    write_jsonl(&dir.join(COMPLEMENTARY_FILE), &map)
}

pub fn load_log(path: &Path) -> Result<InteractionLog, LoadError> {
    let events: Vec<(usize, Interaction)> = read_jsonl(path)?;
    let lines: Vec<usize> = events.iter().map(|r| r.0).collect();
    InteractionLog::new(events.into_iter().map(|(_, e)| e).collect()).map_err(|e| invalid(path, &lines, e))
}

pub fn save_log(path: &Path, log: &InteractionLog) -> io::Result<()> {
    write_jsonl(path, log.events())
}

pub fn save_pairs(path: &Path, pairs: &PairSet) -> io::Result<()> {
    let header = PairsHeader { kind: pairs.kind, min_cooccurrence: pairs.min_cooccurrence };
    write_atomic(path, |w| {
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for p in &pairs.pairs {
            serde_json::to_writer(&mut *w, p)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

/// Reads a pairs file: a header line, then one pair per line.
pub fn load_pairs(path: &Path) -> Result<PairSet, LoadError> {
    let file = File::open(path).map_err(|e| LoadError::io(path, e))?;
    let mut header: Option<PairsHeader> = None;
    let mut pairs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| LoadError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| LoadError::Parse { path: path.to_path_buf(), line: i + 1, message: e.to_string() };
        let bad = |message: String| LoadError::Invalid { path: path.to_path_buf(), line: i + 1, message };
        match &header {
            None => header = Some(serde_json::from_str(&line).map_err(parse_err)?),
            Some(h) => {
                let p: Pair = serde_json::from_str(&line).map_err(parse_err)?;
                if p.query_id == p.target_id {
                    return Err(bad(format!("self-pair for {:?}", p.query_id)));
                }
                if p.weight < h.min_cooccurrence.max(1) {
                    return Err(bad(format!("weight {} below the mining threshold {}", p.weight, h.min_cooccurrence)));
                }
                pairs.push(p);
            }
        }
    }
    let header = header.ok_or_else(|| LoadError::Parse { path: path.to_path_buf(), line: 1, message: "missing header".into() })?;
    Ok(PairSet { kind: header.kind, min_cooccurrence: header.min_cooccurrence, pairs })
}

pub fn save_ground_truth(path: &Path, truth: &[GroundTruth]) -> io::Result<()> {
    write_jsonl(path, truth)
}

pub fn load_ground_truth(path: &Path) -> Result<Vec<GroundTruth>, LoadError> {
    Ok(read_jsonl(path)?.into_iter().map(|(_, g)| g).collect())
}
