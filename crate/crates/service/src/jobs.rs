use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobKind {
    Extract,
    Train,
    Experiment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_finished(self) -> bool {
        matches!(self, JobStatus::Done | JobStatus::Failed)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub completed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Job {
    pub job_id: String,
    pub kind: JobKind,
    pub status: JobStatus,
    pub progress: Progress,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Job {
    pub fn new(job_id: impl Into<String>, kind: JobKind) -> Self {
        Job {
            job_id: job_id.into(),
            kind,
            status: JobStatus::Queued,
            progress: Progress::default(),
            result: None,
            error: None,
        }
    }

    /// Moves along queued → running → done | failed; anything else is refused.
    pub fn advance(&mut self, to: JobStatus) -> Result<(), String> {
        let ok = matches!(
            (self.status, to),
            (JobStatus::Queued, JobStatus::Running)
                | (JobStatus::Running, JobStatus::Done)
                | (JobStatus::Running, JobStatus::Failed)
        );
        if !ok {
            return Err(format!("job {} cannot go from {:?} to {:?}", self.job_id, self.status, to));
        }
        self.status = to;
        Ok(())
    }

    pub fn finish(&mut self, outcome: Result<Value, String>) {
        match outcome {
            Ok(v) => {
                self.result = Some(v);
                self.status = JobStatus::Done;
            }
            Err(e) => {
                self.error = Some(e);
                self.status = JobStatus::Failed;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transitions_are_forward_only() {
        let mut job = Job::new("j", JobKind::Extract);
        assert!(job.advance(JobStatus::Done).is_err());
        job.advance(JobStatus::Running).unwrap();
        assert!(job.advance(JobStatus::Queued).is_err());
        job.advance(JobStatus::Failed).unwrap();
        assert!(job.advance(JobStatus::Running).is_err());
        assert!(job.status.is_finished());
    }

    #[test]
    fn wire_names_are_snake_case() {
        let job = Job::new("extract-1", JobKind::Extract);
        let v = serde_json::to_value(&job).unwrap();
        assert_eq!(v["status"], "queued");
        assert_eq!(v["kind"], "extract");
        assert_eq!(v["progress"], serde_json::json!({"completed": 0, "total": 0}));
        assert!(v.get("error").is_none());
    }
}
