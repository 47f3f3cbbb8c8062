use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{binarize, ChunkingConfig, ExtractError};

/// What produced a matrix: enough to reproduce it against the same scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub scorer: String,
    pub chunking: ChunkingConfig,
    pub templates: Vec<String>,
    /// Hash over document ids and texts plus query ids, questions, and templates.
    pub content_hash: String,
    #[serde(default)]
    pub binarized: bool,
}

impl Provenance {
    /// Provenance for matrices built outside the extraction path (reference
    /// indicators, hand-built fixtures).
    pub fn external(source: &str, content_hash: String) -> Self {
        Provenance {
            scorer: source.to_string(),
            chunking: ChunkingConfig::default(),
            templates: Vec::new(),
            content_hash,
            binarized: false,
        }
    }

    pub fn fingerprint(&self) -> String {
        crate::hash::digest_str(&serde_json::to_string(self).expect("provenance serializes"))
    }
}

/// Documents x queries grid of values in [0, 1], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    doc_ids: Vec<String>,
    query_ids: Vec<String>,
    values: Vec<f64>,
    provenance: Provenance,
    row_of: HashMap<String, usize>,
}

impl FeatureMatrix {
    pub fn new(
        doc_ids: Vec<String>,
        query_ids: Vec<String>,
        values: Vec<f64>,
        provenance: Provenance,
    ) -> Result<Self, ExtractError> {
        if values.len() != doc_ids.len() * query_ids.len() {
            return Err(ExtractError::Matrix(format!(
                "{} values for a {}x{} grid",
                values.len(),
                doc_ids.len(),
                query_ids.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(ExtractError::OutOfRange(*v));
        }
        let mut row_of = HashMap::with_capacity(doc_ids.len());
        for (i, id) in doc_ids.iter().enumerate() {
            if row_of.insert(id.clone(), i).is_some() {
                return Err(ExtractError::Matrix(format!("duplicate doc_id {id:?}")));
            }
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(q) = query_ids.iter().find(|q| !seen.insert(q.as_str())) {
            return Err(ExtractError::Matrix(format!("duplicate query_id {q:?}")));
        }
        Ok(FeatureMatrix {
            doc_ids,
            query_ids,
            values,
            provenance,
            row_of,
        })
    }

    pub fn doc_ids(&self) -> &[String] {
        &self.doc_ids
    }

    pub fn query_ids(&self) -> &[String] {
        &self.query_ids
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    pub fn n_rows(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.query_ids.len()
    }

    pub fn row_index(&self, doc_id: &str) -> Option<usize> {
        self.row_of.get(doc_id).copied()
    }

    pub fn col_index(&self, query_id: &str) -> Option<usize> {
        self.query_ids.iter().position(|q| q == query_id)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.n_cols();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn row_for(&self, doc_id: &str) -> Option<&[f64]> {
        self.row_index(doc_id).map(|i| self.row(i))
    }

    pub fn get(&self, doc_id: &str, query_id: &str) -> Option<f64> {
        let i = self.row_index(doc_id)?;
        let j = self.col_index(query_id)?;
        Some(self.values[i * self.n_cols() + j])
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_rows()).map(|i| self.values[i * self.n_cols() + j]).collect()
    }

    /// The subgrid over `query_ids`, in the given order.
    pub fn select_columns(&self, query_ids: &[String]) -> Result<FeatureMatrix, ExtractError> {
        let cols = query_ids
            .iter()
            .map(|q| {
                self.col_index(q)
                    .ok_or_else(|| ExtractError::Matrix(format!("no column {q:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut values = Vec::with_capacity(self.n_rows() * cols.len());
        for i in 0..self.n_rows() {
            let row = self.row(i);
            values.extend(cols.iter().map(|&j| row[j]));
        }
        FeatureMatrix::new(self.doc_ids.clone(), query_ids.to_vec(), values, self.provenance.clone())
    }

    /// The subgrid over `doc_ids`, in the given order.
    pub fn select_rows(&self, doc_ids: &[String]) -> Result<FeatureMatrix, ExtractError> {
        let mut values = Vec::with_capacity(doc_ids.len() * self.n_cols());
        for id in doc_ids {
            let row = self
                .row_for(id)
                .ok_or_else(|| ExtractError::Matrix(format!("no row {id:?}")))?;
            values.extend_from_slice(row);
        }
        FeatureMatrix::new(doc_ids.to_vec(), self.query_ids.clone(), values, self.provenance.clone())
    }

    /// Every cell mapped through [`binarize`] to 0.0 or 1.0.
    pub fn binarized(&self) -> FeatureMatrix {
        let values = self
            .values
            .iter()
            .map(|&v| if binarize(v).expect("values are in range") { 1.0 } else { 0.0 })
            .collect();
        let mut provenance = self.provenance.clone();
        provenance.binarized = true;
        FeatureMatrix::new(self.doc_ids.clone(), self.query_ids.clone(), values, provenance)
            .expect("same shape")
    }

    /// Header `doc_id,<query ids>` then one row per document with 17
    /// significant digits per value.
    pub fn to_csv(&self) -> String {
        let mut rows = Vec::with_capacity(self.n_rows());
        for i in 0..self.n_rows() {
            rows.push(self.row(i).iter().map(|&v| Some(v)).collect::<Vec<_>>());
        }
        write_csv(&self.doc_ids, &self.query_ids, &rows)
    }

    pub fn sidecar_path(path: &Path) -> PathBuf {
        let mut name = path.as_os_str().to_owned();
        name.push(".provenance.json");
        PathBuf::from(name)
    }

    /// Writes the CSV plus its provenance sidecar.
    pub fn save(&self, path: &Path) -> Result<(), ExtractError> {
        let cache_err = |e: std::io::Error| ExtractError::Cache {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        write_atomic(path, self.to_csv().as_bytes()).map_err(cache_err)?;
        let sidecar = serde_json::to_string_pretty(&self.provenance).expect("provenance serializes");
        write_atomic(&Self::sidecar_path(path), sidecar.as_bytes()).map_err(cache_err)
    }

    /// Reads a matrix written by [`FeatureMatrix::save`]. Every cell must be
    /// present; the sidecar is optional.
    pub fn load(path: &Path) -> Result<FeatureMatrix, ExtractError> {
        let (doc_ids, query_ids, rows) = read_csv(path)?;
        let mut values = Vec::with_capacity(rows.len() * query_ids.len());
        for (doc, row) in doc_ids.iter().zip(&rows) {
            for (q, v) in query_ids.iter().zip(row) {
                values.push(v.ok_or_else(|| ExtractError::Cache {
                    path: path.display().to_string(),
                    message: format!("missing value for ({doc:?}, {q:?})"),
                })?);
            }
        }
        let sidecar = Self::sidecar_path(path);
        let provenance = match std::fs::read_to_string(&sidecar) {
            Ok(s) => serde_json::from_str(&s).map_err(|e| ExtractError::Cache {
                path: sidecar.display().to_string(),
                message: e.to_string(),
            })?,
            Err(_) => Provenance::external(
                &format!("file:{}", path.display()),
                crate::hash::digest_str(&std::fs::read_to_string(path).unwrap_or_default()),
            ),
        };
        FeatureMatrix::new(doc_ids, query_ids, values, provenance)
    }
}

pub(crate) fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn quote(field: &str) -> String {
    if field.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", field.replace('"', "\"\""))
    } else {
        field.to_string()
    }
}

/// Cache CSV; `None` cells are written empty.
pub(crate) fn write_csv(doc_ids: &[String], query_ids: &[String], rows: &[Vec<Option<f64>>]) -> String {
    let mut out = String::from("doc_id");
    for q in query_ids {
        out.push(',');
        out.push_str(&quote(q));
    }
    out.push('\n');
    for (doc, row) in doc_ids.iter().zip(rows) {
        out.push_str(&quote(doc));
        for v in row {
            out.push(',');
            if let Some(v) = v {
                out.push_str(&format_value(*v));
            }
        }
        out.push('\n');
    }
    out
}

type CsvGrid = (Vec<String>, Vec<String>, Vec<Vec<Option<f64>>>);

pub(crate) fn read_csv(path: &Path) -> Result<CsvGrid, ExtractError> {
    let err = |message: String| ExtractError::Cache {
        path: path.display().to_string(),
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| err(e.to_string()))?;
    let header = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    if header.get(0) != Some("doc_id") {
        return Err(err("header must start with doc_id".into()));
    }
    let query_ids: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut doc_ids = Vec::new();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| err(e.to_string()))?;
        if record.len() != query_ids.len() + 1 {
            return Err(err(format!("row {} has {} fields", i + 2, record.len())));
        }
        doc_ids.push(record[0].to_string());
        let row = record
            .iter()
            .skip(1)
            .map(|cell| {
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse::<f64>()
                        .map(Some)
                        .map_err(|e| err(format!("row {}: {cell:?}: {e}", i + 2)))
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    Ok((doc_ids, query_ids, rows))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}
