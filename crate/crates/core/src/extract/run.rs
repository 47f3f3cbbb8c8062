use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::matrix::{read_csv, write_atomic, write_csv};
use super::{
    chunk_words, continuous_feature, render_prompt, template_for, Chunk, ChunkingConfig,
    ExtractError, FeatureMatrix, Provenance, TokenUnit,
};
use crate::data::{Dataset, Document, FeatureQuery, QuerySet};
use crate::hash::Fingerprint;
use crate::scorer::{ScoreRequest, Scorer};

type Progress<'a> = &'a (dyn Fn(usize, usize) + Sync);

#[derive(Default, Clone, Copy)]
pub struct ExtractOptions<'a> {
    /// Feature cache path; cells already present with matching provenance
    /// are not re-scored.
    pub cache: Option<&'a Path>,
    /// Called with `(completed, total)` cells as extraction advances.
    pub progress: Option<Progress<'a>>,
}

/// Sidecar written next to a feature cache. The flattened provenance keeps it
/// readable by [`FeatureMatrix::load`].
#[derive(Debug, Serialize, Deserialize)]
struct CacheSidecar {
    #[serde(flatten)]
    provenance: Provenance,
    doc_fingerprints: BTreeMap<String, String>,
    query_fingerprints: BTreeMap<String, String>,
}

fn doc_fingerprint(doc: &Document) -> String {
    Fingerprint::new().part(&doc.doc_id).part(&doc.text).finish()
}

fn query_fingerprint(q: &FeatureQuery) -> String {
    Fingerprint::new()
        .part(&q.query_id)
        .part(&q.question)
        .part(&q.template_id)
        .finish()
}

/// Hash identifying the (documents, queries) content of an extraction.
pub fn content_hash(dataset: &Dataset, queries: &QuerySet) -> String {
    let mut fp = Fingerprint::new().part("docs");
    for doc in dataset.documents() {
        fp = fp.part(&doc.doc_id).part(&doc.text);
    }
    fp = fp.part("queries");
    for q in &queries.queries {
        fp = fp.part(&q.query_id).part(&q.question).part(&q.template_id);
    }
    fp.finish()
}

pub struct Extractor<'a> {
    scorer: &'a dyn Scorer,
    cfg: ChunkingConfig,
}

impl<'a> Extractor<'a> {
    pub fn new(scorer: &'a dyn Scorer, cfg: ChunkingConfig) -> Self {
        Extractor { scorer, cfg }
    }

    pub fn provenance(&self, dataset: &Dataset, queries: &QuerySet) -> Provenance {
        let mut templates: Vec<String> = queries.queries.iter().map(|q| q.template_id.clone()).collect();
        templates.sort();
        templates.dedup();
        Provenance {
            scorer: self.scorer.identity(),
            chunking: self.cfg,
            templates,
            content_hash: content_hash(dataset, queries),
            binarized: false,
        }
    }

    /// Word budget per chunk for `doc`. With backend tokens the scorer is
    /// probed once with the whole document and the reported prompt length
    /// converts the token budget into words.
    fn word_budget(&self, doc: &Document, probe: &FeatureQuery) -> Result<usize, ExtractError> {
        if self.cfg.token_unit == TokenUnit::WhitespaceWords {
            return Ok(self.cfg.max_tokens_per_chunk);
        }
        let words: Vec<&str> = doc.text.split_whitespace().collect();
        let chunk = Chunk {
            text: words.join(" "),
            tokens: words.len(),
        };
        let prompt = render_prompt(template_for(probe)?, &chunk, probe)?;
        let response = self
            .scorer
            .score(&ScoreRequest::for_query(prompt.clone(), &probe.query_id))
            .map_err(|source| ExtractError::Scorer {
                doc_id: doc.doc_id.clone(),
                query_id: probe.query_id.clone(),
                source,
            })?;
        let prompt_words = prompt.split_whitespace().count();
        Ok(match response.prompt_token_count {
            Some(tokens) if tokens > 0 && prompt_words > 0 => {
                let tokens_per_word = tokens as f64 / prompt_words as f64;
                ((self.cfg.max_tokens_per_chunk as f64 / tokens_per_word).floor() as usize).max(1)
            }
            _ => self.cfg.max_tokens_per_chunk,
        })
    }

    fn score_cell(&self, doc: &Document, chunks: &[Chunk], query: &FeatureQuery) -> Result<f64, ExtractError> {
        let template = template_for(query)?;
        let mut responses = Vec::with_capacity(chunks.len());
        for chunk in chunks {
            let prompt = render_prompt(template, chunk, query)?;
            let response = self
                .scorer
                .score(&ScoreRequest::for_query(prompt, &query.query_id))
                .map_err(|source| ExtractError::Scorer {
                    doc_id: doc.doc_id.clone(),
                    query_id: query.query_id.clone(),
                    source,
                })?;
            responses.push(response);
        }
        Ok(continuous_feature(&responses))
    }

    /// Continuous feature for one document and one query, chunked and pooled
    /// exactly as in [`Extractor::run`].
    pub fn feature(&self, doc: &Document, query: &FeatureQuery) -> Result<f64, ExtractError> {
        self.cfg.validate()?;
        template_for(query)?;
        if query.question.trim().is_empty() {
            return Err(ExtractError::EmptyQuestion(query.query_id.clone()));
        }
        if doc.text.trim().is_empty() {
            return Err(ExtractError::BlankDocument(doc.doc_id.clone()));
        }
        let budget = self.word_budget(doc, query)?;
        let chunks = chunk_words(&doc.text, budget, self.cfg.max_chunks);
        self.score_cell(doc, &chunks, query)
    }

    pub fn run(
        &self,
        dataset: &Dataset,
        queries: &QuerySet,
        options: ExtractOptions<'_>,
    ) -> Result<FeatureMatrix, ExtractError> {
        self.cfg.validate()?;
        if dataset.is_empty() {
            return Err(ExtractError::EmptyDataset);
        }
        if queries.is_empty() {
            return Err(ExtractError::EmptyQuerySet);
        }
        for q in &queries.queries {
            template_for(q)?;
            if q.question.trim().is_empty() {
                return Err(ExtractError::EmptyQuestion(q.query_id.clone()));
            }
        }
        let docs = dataset.documents();
        if let Some(blank) = docs.iter().find(|d| d.text.trim().is_empty()) {
            return Err(ExtractError::BlankDocument(blank.doc_id.clone()));
        }

        let provenance = self.provenance(dataset, queries);
        let doc_fps: Vec<String> = docs.iter().map(doc_fingerprint).collect();
        let query_fps: Vec<String> = queries.queries.iter().map(query_fingerprint).collect();
        let n_queries = queries.len();
        let total = docs.len() * n_queries;

        let mut cells: Vec<Option<f64>> = vec![None; total];
        if let Some(path) = options.cache {
            self.fill_from_cache(path, &provenance, &doc_fps, &query_fps, docs, queries, &mut cells)?;
        }
        let done = AtomicUsize::new(cells.iter().filter(|c| c.is_some()).count());
        if let Some(report) = options.progress {
            report(done.load(Ordering::Relaxed), total);
        }

        // Chunk plans only for documents with at least one missing cell.
        let aborted = AtomicBool::new(false);
        let plans: Vec<Option<Result<Vec<Chunk>, ExtractError>>> = docs
            .par_iter()
            .enumerate()
            .map(|(i, doc)| {
                let row = &cells[i * n_queries..(i + 1) * n_queries];
                if row.iter().all(Option::is_some) {
                    return None;
                }
                Some(
                    self.word_budget(doc, &queries.queries[0])
                        .map(|budget| chunk_words(&doc.text, budget, self.cfg.max_chunks)),
                )
            })
            .collect();

        let mut chunk_plans: Vec<Option<Vec<Chunk>>> = Vec::with_capacity(docs.len());
        let mut plan_error = None;
        for plan in plans {
            match plan {
                Some(Ok(chunks)) => chunk_plans.push(Some(chunks)),
                Some(Err(e)) => {
                    plan_error.get_or_insert(e);
                    chunk_plans.push(None);
                }
                None => chunk_plans.push(None),
            }
        }
        if let Some(e) = plan_error {
            if let Some(path) = options.cache {
                write_cache(path, &provenance, docs, queries, &doc_fps, &query_fps, &cells)?;
            }
            return Err(e);
        }

        let scored: Vec<Option<Result<f64, ExtractError>>> = (0..total)
            .into_par_iter()
            .map(|cell| {
                if cells[cell].is_some() || aborted.load(Ordering::Relaxed) {
                    return None;
                }
                let (i, j) = (cell / n_queries, cell % n_queries);
                let chunks = chunk_plans[i].as_ref().expect("plan exists for incomplete rows");
                let result = self.score_cell(&docs[i], chunks, &queries.queries[j]);
                match &result {
                    Ok(_) => {
                        let n = done.fetch_add(1, Ordering::Relaxed) + 1;
                        if let Some(report) = options.progress {
                            report(n, total);
                        }
                    }
                    Err(_) => aborted.store(true, Ordering::Relaxed),
                }
                Some(result)
            })
            .collect();

        let mut first_error = None;
        for (cell, outcome) in scored.into_iter().enumerate() {
            match outcome {
                Some(Ok(v)) => cells[cell] = Some(v),
                Some(Err(e)) if first_error.is_none() => first_error = Some(e),
                _ => {}
            }
        }

        if let Some(path) = options.cache {
            write_cache(path, &provenance, docs, queries, &doc_fps, &query_fps, &cells)?;
        }
        if let Some(e) = first_error {
            return Err(e);
        }
        let values = cells
            .into_iter()
            .map(|c| c.expect("all cells scored"))
            .collect();
        FeatureMatrix::new(
            docs.iter().map(|d| d.doc_id.clone()).collect(),
            queries.ids(),
            values,
            provenance,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn fill_from_cache(
        &self,
        path: &Path,
        provenance: &Provenance,
        doc_fps: &[String],
        query_fps: &[String],
        docs: &[Document],
        queries: &QuerySet,
        cells: &mut [Option<f64>],
    ) -> Result<(), ExtractError> {
        let sidecar_path = FeatureMatrix::sidecar_path(path);
        if !path.exists() || !sidecar_path.exists() {
            return Ok(());
        }
        let sidecar: CacheSidecar = match std::fs::read_to_string(&sidecar_path)
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
        {
            Some(s) => s,
            None => {
                log::warn!("ignoring unreadable cache sidecar {}", sidecar_path.display());
                return Ok(());
            }
        };
        if sidecar.provenance.scorer != provenance.scorer
            || sidecar.provenance.chunking != provenance.chunking
        {
            return Ok(());
        }
        let (cached_docs, cached_queries, rows) = read_csv(path)?;
        let n_queries = queries.len();
        let col_of: BTreeMap<&str, usize> = cached_queries
            .iter()
            .enumerate()
            .map(|(j, q)| (q.as_str(), j))
            .collect();
        let row_of: BTreeMap<&str, usize> = cached_docs
            .iter()
            .enumerate()
            .map(|(i, d)| (d.as_str(), i))
            .collect();
        for (i, doc) in docs.iter().enumerate() {
            if sidecar.doc_fingerprints.get(&doc.doc_id) != Some(&doc_fps[i]) {
                continue;
            }
            let Some(&ci) = row_of.get(doc.doc_id.as_str()) else { continue };
            for (j, q) in queries.queries.iter().enumerate() {
                if sidecar.query_fingerprints.get(&q.query_id) != Some(&query_fps[j]) {
                    continue;
                }
                if let Some(&cj) = col_of.get(q.query_id.as_str()) {
                    if let Some(v) = rows[ci][cj].filter(|v| (0.0..=1.0).contains(v)) {
                        cells[i * n_queries + j] = Some(v);
                    }
                }
            }
        }
        Ok(())
    }
}

fn write_cache(
    path: &Path,
    provenance: &Provenance,
    docs: &[Document],
    queries: &QuerySet,
    doc_fps: &[String],
    query_fps: &[String],
    cells: &[Option<f64>],
) -> Result<(), ExtractError> {
    let n_queries = queries.len();
    let doc_ids: Vec<String> = docs.iter().map(|d| d.doc_id.clone()).collect();
    let rows: Vec<Vec<Option<f64>>> = cells.chunks(n_queries).map(<[_]>::to_vec).collect();
    let csv = write_csv(&doc_ids, &queries.ids(), &rows);
    let sidecar = CacheSidecar {
        provenance: provenance.clone(),
        doc_fingerprints: doc_ids.iter().cloned().zip(doc_fps.iter().cloned()).collect(),
        query_fingerprints: queries.ids().into_iter().zip(query_fps.iter().cloned()).collect(),
    };
    let cache_err = |e: std::io::Error| ExtractError::Cache {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    write_atomic(path, csv.as_bytes()).map_err(cache_err)?;
    let sidecar = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
    write_atomic(&FeatureMatrix::sidecar_path(path), sidecar.as_bytes()).map_err(cache_err)
}

/// Scores every (document, query) cell: chunk, render, score, calibrate,
/// max-pool. With a cache path, matching cells are reused and the cache is
/// rewritten afterwards (also when scoring fails part-way).
pub fn extract_matrix(
    dataset: &Dataset,
    queries: &QuerySet,
    scorer: &dyn Scorer,
    cfg: &ChunkingConfig,
    cache: Option<&Path>,
) -> Result<FeatureMatrix, ExtractError> {
    Extractor::new(scorer, *cfg).run(
        dataset,
        queries,
        ExtractOptions {
            cache,
            progress: None,
        },
    )
}
