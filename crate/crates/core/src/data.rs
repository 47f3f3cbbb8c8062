//! Documents, feature queries, and the loaders for their on-disk formats.
//!
//! Datasets are JSON-lines files with one document per line; query sets are a
//! single JSON document. Both preserve file order, and query order defines the
//! feature-column order everywhere downstream.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::prompt;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate doc_id {doc_id:?} on lines {first} and {second}")]
    DuplicateDocId {
        doc_id: String,
        first: usize,
        second: usize,
    },
    #[error("line {line}: unknown split {value:?} (expected \"train\" or \"test\")")]
    UnknownSplit { line: usize, value: String },
    #[error("invalid query set: {0}")]
    InvalidQueries(String),
    #[error("duplicate query_id {0:?}")]
    DuplicateQueryId(String),
    #[error("query {0:?} has an empty question")]
    EmptyQuestion(String),
    #[error("query {query_id:?} names unknown template {template_id:?}")]
    UnknownTemplate {
        query_id: String,
        template_id: String,
    },
    #[error("{0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Test => f.write_str("test"),
        }
    }
}

/// One free-text record with its per-task binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
    /// Absent tasks are unlabeled for this document.
    pub labels: BTreeMap<String, bool>,
    pub split: Split,
    /// Ground-truth indicators keyed by query id (reference codes, expert annotations).
    pub reference_features: Option<BTreeMap<String, bool>>,
}

impl Document {
    pub fn label(&self, task: &str) -> Option<bool> {
        self.labels.get(task).copied()
    }

    pub fn reference(&self, query_id: &str) -> Option<bool> {
        self.reference_features
            .as_ref()
            .and_then(|r| r.get(query_id).copied())
    }
}

/// How a task name maps onto the reporting structure.
///
/// Task names of the form `group/label` are members of a multi-label group;
/// each member is still trained and scored as an independent binary task.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum TaskKind {
    SingleLabel,
    MultiLabelGroup { group: String },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub struct Task {
    pub name: String,
    pub kind: TaskKind,
}

impl Task {
    pub fn from_name(name: &str) -> Self {
        let kind = match name.split_once('/') {
            Some((group, _)) if !group.is_empty() => TaskKind::MultiLabelGroup {
                group: group.to_string(),
            },
            _ => TaskKind::SingleLabel,
        };
        Task {
            name: name.to_string(),
            kind,
        }
    }

    pub fn group(&self) -> Option<&str> {
        match &self.kind {
            TaskKind::MultiLabelGroup { group } => Some(group),
            TaskKind::SingleLabel => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    documents: Vec<Document>,
    tasks: Vec<Task>,
    index: HashMap<String, usize>,
}

impl Dataset {
    /// Builds a dataset, checking doc-id uniqueness and non-empty fields.
    pub fn new(documents: Vec<Document>) -> Result<Self, DataError> {
        let mut index = HashMap::with_capacity(documents.len());
        let mut task_names = BTreeSet::new();
        for (i, doc) in documents.iter().enumerate() {
            if doc.doc_id.is_empty() {
                return Err(DataError::Malformed {
                    line: i + 1,
                    message: "doc_id must be non-empty".into(),
                });
            }
            if doc.text.is_empty() {
                return Err(DataError::Malformed {
                    line: i + 1,
                    message: format!("document {:?} has empty text", doc.doc_id),
                });
            }
            if let Some(prev) = index.insert(doc.doc_id.clone(), i) {
                return Err(DataError::DuplicateDocId {
                    doc_id: doc.doc_id.clone(),
                    first: prev + 1,
                    second: i + 1,
                });
            }
            task_names.extend(doc.labels.keys().cloned());
        }
        let tasks = task_names.iter().map(|n| Task::from_name(n)).collect();
        Ok(Dataset {
            documents,
            tasks,
            index,
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, name: &str) -> Option<&Task> {
        self.tasks.iter().find(|t| t.name == name)
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.index.get(doc_id).map(|&i| &self.documents[i])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Document> {
        self.documents.iter().filter(move |d| d.split == split)
    }

    pub fn has_reference_features(&self) -> bool {
        self.documents
            .iter()
            .any(|d| d.reference_features.is_some())
    }

    /// Labeled documents of `split` for `task`, in file order.
    pub fn labeled(&self, task: &str, split: Split) -> Vec<(&Document, bool)> {
        self.split(split)
            .filter_map(|d| d.label(task).map(|y| (d, y)))
            .collect()
    }

    /// Groups of task names for macro-averaged reporting: each multi-label
    /// group and each single-label task, in task-name order.
    pub fn report_units(&self) -> Vec<(String, Vec<String>)> {
        let mut units: Vec<(String, Vec<String>)> = Vec::new();
        for task in &self.tasks {
            let key = task.group().unwrap_or(&task.name).to_string();
            match units.iter_mut().find(|(k, _)| *k == key) {
                Some((_, members)) => members.push(task.name.clone()),
                None => units.push((key, vec![task.name.clone()])),
            }
        }
        units
    }

    /// Cross-checks against a query set: reference feature ids must be
    /// queries, expected-support keys must be tasks.
    pub fn check_queries(&self, queries: &QuerySet) -> Result<(), DataError> {
        for doc in &self.documents {
            if let Some(refs) = &doc.reference_features {
                for qid in refs.keys() {
                    if queries.position(qid).is_none() {
                        return Err(DataError::Inconsistent(format!(
                            "document {:?} has reference feature {:?} which is not in query set {:?}",
                            doc.doc_id, qid, queries.name
                        )));
                    }
                }
            }
        }
        for q in &queries.queries {
            if let Some(support) = &q.expected_support {
                for task in support.keys() {
                    if self.task(task).is_none() {
                        return Err(DataError::Inconsistent(format!(
                            "query {:?} annotates unknown task {:?}",
                            q.query_id, task
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Serializes back to the JSON-lines format accepted by [`load_dataset`].
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for doc in &self.documents {
            let record = DocumentRecordOut {
                doc_id: &doc.doc_id,
                text: &doc.text,
                labels: doc.labels.iter().map(|(k, &v)| (k.as_str(), v as u8)).collect(),
                split: doc.split,
                reference_features: doc
                    .reference_features
                    .as_ref()
                    .map(|r| r.iter().map(|(k, &v)| (k.as_str(), v as u8)).collect()),
            };
            out.push_str(&serde_json::to_string(&record).expect("document serializes"));
            out.push('\n');
        }
        out
    }

    /// Hash over every document field, in file order.
    pub fn content_hash(&self) -> String {
        crate::hash::digest_str(&self.to_jsonl())
    }
}

#[derive(Serialize)]
struct DocumentRecordOut<'a> {
    doc_id: &'a str,
    text: &'a str,
    labels: BTreeMap<&'a str, u8>,
    split: Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    reference_features: Option<BTreeMap<&'a str, u8>>,
}

#[derive(Deserialize)]
struct DocumentRecord {
    doc_id: String,
    text: String,
    #[serde(default)]
    labels: BTreeMap<String, Value>,
    split: String,
    #[serde(default)]
    reference_features: Option<BTreeMap<String, Value>>,
}

fn binary_value(v: &Value, what: &str, line: usize) -> Result<bool, DataError> {
    match v.as_u64() {
        Some(0) => Ok(false),
        Some(1) => Ok(true),
        _ => Err(DataError::Malformed {
            line,
            message: format!("{what} must be 0 or 1, got {v}"),
        }),
    }
}

/// Parses a dataset from JSON-lines text. Blank lines are skipped.
pub fn parse_dataset(content: &str) -> Result<Dataset, DataError> {
    let mut documents = Vec::new();
    let mut lines_of: HashMap<String, usize> = HashMap::new();
    for (i, raw) in content.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: DocumentRecord =
            serde_json::from_str(raw).map_err(|e| DataError::Malformed {
                line,
                message: e.to_string(),
            })?;
        let split = match record.split.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => {
                return Err(DataError::UnknownSplit {
                    line,
                    value: other.to_string(),
                })
            }
        };
        if record.doc_id.is_empty() {
            return Err(DataError::Malformed {
                line,
                message: "doc_id must be non-empty".into(),
            });
        }
        if record.text.is_empty() {
            return Err(DataError::Malformed {
                line,
                message: "text must be non-empty".into(),
            });
        }
        if let Some(&first) = lines_of.get(&record.doc_id) {
            return Err(DataError::DuplicateDocId {
                doc_id: record.doc_id,
                first,
                second: line,
            });
        }
        lines_of.insert(record.doc_id.clone(), line);
        let labels = record
            .labels
            .iter()
            .map(|(k, v)| Ok((k.clone(), binary_value(v, "label", line)?)))
            .collect::<Result<_, DataError>>()?;
        let reference_features = record
            .reference_features
            .map(|r| {
                r.iter()
                    .map(|(k, v)| Ok((k.clone(), binary_value(v, "reference feature", line)?)))
                    .collect::<Result<BTreeMap<_, _>, DataError>>()
            })
            .transpose()?;
        documents.push(Document {
            doc_id: record.doc_id,
            text: record.text,
            labels,
            split,
            reference_features,
        });
    }
    Dataset::new(documents)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_dataset(&content)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Support {
    Supports,
    NotRelevant,
}

/// An expert-written yes/no question whose scored answer becomes one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureQuery {
    pub query_id: String,
    pub question: String,
    pub template_id: String,
    #[serde(default)]
    pub custom: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected_support: Option<BTreeMap<String, Support>>,
}

impl FeatureQuery {
    pub fn supports(&self, task: &str) -> Option<Support> {
        self.expected_support
            .as_ref()
            .and_then(|s| s.get(task).copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub name: String,
    /// Set on files holding direct downstream questions (one per task,
    /// `query_id` naming the task) rather than feature queries.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub downstream: bool,
    pub queries: Vec<FeatureQuery>,
}

impl QuerySet {
    /// Validates ids, questions, and template references.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = BTreeSet::new();
        for q in &self.queries {
            if q.query_id.is_empty() {
                return Err(DataError::InvalidQueries("query_id must be non-empty".into()));
            }
            if !seen.insert(q.query_id.as_str()) {
                return Err(DataError::DuplicateQueryId(q.query_id.clone()));
            }
            if q.question.trim().is_empty() {
                return Err(DataError::EmptyQuestion(q.query_id.clone()));
            }
            if prompt::builtin(&q.template_id).is_none() {
                return Err(DataError::UnknownTemplate {
                    query_id: q.query_id.clone(),
                    template_id: q.template_id.clone(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    /// Column index of `query_id`: its position in file order.
    pub fn position(&self, query_id: &str) -> Option<usize> {
        self.queries.iter().position(|q| q.query_id == query_id)
    }

    pub fn get(&self, query_id: &str) -> Option<&FeatureQuery> {
        self.queries.iter().find(|q| q.query_id == query_id)
    }

    pub fn ids(&self) -> Vec<String> {
        self.queries.iter().map(|q| q.query_id.clone()).collect()
    }

    /// The subset without custom queries, order preserved.
    pub fn without_custom(&self) -> QuerySet {
        QuerySet {
            name: format!("{}-without-custom", self.name),
            downstream: self.downstream,
            queries: self.queries.iter().filter(|q| !q.custom).cloned().collect(),
        }
    }

    pub fn content_hash(&self) -> String {
        crate::hash::digest_str(&serde_json::to_string(self).expect("query set serializes"))
    }
}

pub fn parse_queries(content: &str) -> Result<QuerySet, DataError> {
    let set: QuerySet =
        serde_json::from_str(content).map_err(|e| DataError::InvalidQueries(e.to_string()))?;
    set.validate()?;
    Ok(set)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<QuerySet, DataError> {
    let path = path.as_ref();
    let content = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_queries(&content)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(id: &str, split: &str, label: &str) -> String {
        format!(
            r#"{{"doc_id":"{id}","text":"pt stable","labels":{{"readmission":{label}}},"split":"{split}"}}"#
        )
    }

    #[test]
    fn two_valid_lines_keep_order() {
        let content = format!("{}\n{}\n", line("b", "train", "1"), line("a", "test", "0"));
        let ds = parse_dataset(&content).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.documents()[0].doc_id, "b");
        assert_eq!(ds.documents()[1].doc_id, "a");
        assert_eq!(ds.get("a").unwrap().label("readmission"), Some(false));
    }

    #[test]
    fn duplicate_doc_id_names_both_lines() {
        let content = format!(
            "{}\n{}\n{}\n",
            line("a", "train", "1"),
            line("b", "train", "0"),
            line("a", "test", "0")
        );
        let err = parse_dataset(&content).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("\"a\""), "{msg}");
        assert!(msg.contains("lines 1 and 3"), "{msg}");
    }

    #[test]
    fn label_must_be_binary() {
        let err = parse_dataset(&line("a", "train", "2")).unwrap_err();
        assert!(err.to_string().contains("label must be 0 or 1"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let content = format!("{}\n{{not json\n", line("a", "train", "1"));
        match parse_dataset(&content).unwrap_err() {
            DataError::Malformed { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_split_rejected() {
        let err = parse_dataset(&line("a", "validation", "1")).unwrap_err();
        assert!(matches!(err, DataError::UnknownSplit { line: 1, .. }));
    }

    #[test]
    fn group_tasks_are_detected() {
        let content = r#"{"doc_id":"a","text":"x","labels":{"cxr/edema":1,"cxr/fracture":0,"mortality":0},"split":"train"}"#;
        let ds = parse_dataset(content).unwrap();
        assert_eq!(ds.tasks().len(), 3);
        assert_eq!(ds.task("cxr/edema").unwrap().group(), Some("cxr"));
        assert_eq!(ds.task("mortality").unwrap().group(), None);
        let units = ds.report_units();
        assert_eq!(
            units,
            vec![
                ("cxr".to_string(), vec!["cxr/edema".to_string(), "cxr/fracture".to_string()]),
                ("mortality".to_string(), vec!["mortality".to_string()]),
            ]
        );
    }

    #[test]
    fn round_trip_through_jsonl() {
        let content = r#"{"doc_id":"a","text":"line one\nline \"two\"","labels":{"t":1},"split":"train","reference_features":{"q1":0}}
{"doc_id":"b","text":"other","labels":{},"split":"test"}"#;
        let ds = parse_dataset(content).unwrap();
        let again = parse_dataset(&ds.to_jsonl()).unwrap();
        assert_eq!(ds, again);
    }

    const QUERIES: &str = r#"{"name":"mimic","queries":[
        {"query_id":"has_chronic","question":"Does the patient have a chronic illness?","template_id":"mimic","custom":true},
        {"query_id":"enlarged_heart","question":"Does this patient have an enlarged heart?","template_id":"cxr","custom":false,
         "expected_support":{"cardiomegaly":"supports","fracture":"not-relevant"}}
    ]}"#;

    #[test]
    fn queries_load_in_file_order() {
        let qs = parse_queries(QUERIES).unwrap();
        assert_eq!(qs.ids(), vec!["has_chronic", "enlarged_heart"]);
        assert_eq!(qs.position("enlarged_heart"), Some(1));
        assert_eq!(
            qs.get("enlarged_heart").unwrap().supports("cardiomegaly"),
            Some(Support::Supports)
        );
        assert_eq!(qs.without_custom().ids(), vec!["enlarged_heart"]);
    }

    #[test]
    fn duplicate_query_id_rejected() {
        let content = r#"{"name":"x","queries":[
            {"query_id":"a","question":"Q?","template_id":"mimic"},
            {"query_id":"a","question":"R?","template_id":"mimic"}]}"#;
        assert!(matches!(
            parse_queries(content).unwrap_err(),
            DataError::DuplicateQueryId(id) if id == "a"
        ));
    }

    #[test]
    fn empty_question_and_unknown_template_rejected() {
        let empty = r#"{"name":"x","queries":[{"query_id":"a","question":"  ","template_id":"mimic"}]}"#;
        assert!(matches!(parse_queries(empty).unwrap_err(), DataError::EmptyQuestion(_)));
        let unknown = r#"{"name":"x","queries":[{"query_id":"a","question":"Q?","template_id":"nope"}]}"#;
        assert!(matches!(
            parse_queries(unknown).unwrap_err(),
            DataError::UnknownTemplate { .. }
        ));
    }

    #[test]
    fn cross_checks_reference_ids_and_support_tasks() {
        let qs = parse_queries(QUERIES).unwrap();
        let ds = parse_dataset(
            r#"{"doc_id":"a","text":"x","labels":{"cardiomegaly":1,"fracture":0},"split":"test","reference_features":{"enlarged_heart":1}}"#,
        )
        .unwrap();
        ds.check_queries(&qs).unwrap();
        let bad = parse_dataset(
            r#"{"doc_id":"a","text":"x","labels":{"cardiomegaly":1,"fracture":0},"split":"test","reference_features":{"ghost":1}}"#,
        )
        .unwrap();
        assert!(bad.check_queries(&qs).is_err());
        let missing_task =
            parse_dataset(r#"{"doc_id":"a","text":"x","labels":{"cardiomegaly":1},"split":"test"}"#).unwrap();
        assert!(missing_task.check_queries(&qs).is_err());
    }
}
