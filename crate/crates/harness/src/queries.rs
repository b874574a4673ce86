use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;

use mica_core::agents::QueryContext;
use mica_core::kb::KnowledgeBase;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryCategory {
    General,
    Assembly,
    PartAttribute,
    Maintenance,
    FaultHandling,
}

impl QueryCategory {
    pub const ALL: [QueryCategory; 5] = [
        QueryCategory::General,
        QueryCategory::Assembly,
        QueryCategory::PartAttribute,
        QueryCategory::Maintenance,
        QueryCategory::FaultHandling,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            QueryCategory::General => "general",
            QueryCategory::Assembly => "assembly",
            QueryCategory::PartAttribute => "part_attribute",
            QueryCategory::Maintenance => "maintenance",
            QueryCategory::FaultHandling => "fault_handling",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            QueryCategory::General => "General Question",
            QueryCategory::Assembly => "Assembly-related",
            QueryCategory::PartAttribute => "Part Attribute",
            QueryCategory::Maintenance => "Maintenance-related",
            QueryCategory::FaultHandling => "Fault Handling",
        }
    }

    /// General questions have no structured KB target, so KBA is not scored.
    pub fn has_kba(self) -> bool {
        self != QueryCategory::General
    }
}

impl fmt::Display for QueryCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QueryCategory {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown query category \"{s}\""))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub id: String,
    pub category: QueryCategory,
    pub text: String,
    pub reference: String,
    pub rubric: String,
    /// Current step id, when the question is asked during an assembly step.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<String>,
    /// Part in focus according to perception.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub focus: Option<String>,
}

impl QueryRecord {
    pub fn context(&self) -> QueryContext {
        QueryContext {
            step: self.step.clone(),
            focus: self.focus.clone(),
            parts: self.focus.iter().cloned().collect(),
        }
    }
}

pub fn read_queries(reader: impl BufRead) -> Result<Vec<QueryRecord>, HarnessError> {
    let mut out: Vec<QueryRecord> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| HarnessError::Query {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QueryRecord = serde_json::from_str(&line).map_err(|e| HarnessError::Query {
            line: i + 1,
            reason: e.to_string(),
        })?;
        if rec.text.trim().is_empty() {
            return Err(HarnessError::Query {
                line: i + 1,
                reason: "empty query text".into(),
            });
        }
        if out.iter().any(|q| q.id == rec.id) {
            return Err(HarnessError::Query {
                line: i + 1,
                reason: format!("duplicate query id \"{}\"", rec.id),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>, HarnessError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| HarnessError::io(path, e))?;
    read_queries(std::io::BufReader::new(file))
}

/// Every rubric id must exist in the KB.
pub fn check_rubrics(queries: &[QueryRecord], kb: &KnowledgeBase) -> Result<(), HarnessError> {
    match queries.iter().find(|q| kb.rubric(&q.rubric).is_none()) {
        Some(q) => Err(HarnessError::Config(format!(
            "query {} references unknown rubric \"{}\"",
            q.id, q.rubric
        ))),
        None => Ok(()),
    }
}
