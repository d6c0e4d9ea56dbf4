//! Cohort queries: a conjunction of predicates over the indexed attributes.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{ArchiveError, InstanceRecord, INDEXED_ATTRIBUTES};

/// Pseudo-attribute naming a series' user tags.
pub const USER_TAGS: &str = "user_tags";

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Predicate {
    Equals { attr: String, value: String },
    Prefix { attr: String, value: String },
    /// Inclusive on both ends; compares values as strings.
    DateRange { attr: String, from: String, to: String },
    In { attr: String, values: BTreeSet<String> },
    HasTag { tag: String },
}

impl Predicate {
    pub fn attribute(&self) -> &str {
        match self {
            Predicate::Equals { attr, .. }
            | Predicate::Prefix { attr, .. }
            | Predicate::DateRange { attr, .. }
            | Predicate::In { attr, .. } => attr,
            Predicate::HasTag { .. } => USER_TAGS,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Predicate::Equals { .. } => "equals",
            Predicate::Prefix { .. } => "prefix",
            Predicate::DateRange { .. } => "date_range",
            Predicate::In { .. } => "in",
            Predicate::HasTag { .. } => "has_tag",
        }
    }

    fn validate(&self) -> Result<(), ArchiveError> {
        let attr = self.attribute();
        if attr != USER_TAGS && !INDEXED_ATTRIBUTES.iter().any(|(name, _)| *name == attr) {
            return Err(ArchiveError::UnknownAttribute(attr.to_string()));
        }
        if let Predicate::DateRange { attr, from, to } = self {
            if attr == USER_TAGS {
                return Err(ArchiveError::InvalidQuery("date_range does not apply to user_tags".into()));
            }
            if from > to {
                return Err(ArchiveError::InvalidQuery(format!("empty range {from}..{to}")));
            }
        }
        Ok(())
    }

    /// Whether `record` (with its series' tags) satisfies this predicate.
    /// Absent attributes satisfy nothing. Predicates on `user_tags` hold when
    /// any tag satisfies them.
    pub fn matches(&self, record: &InstanceRecord) -> bool {
        let attr = self.attribute();
        if attr == USER_TAGS {
            let tags = &record.user_tags;
            return match self {
                Predicate::HasTag { tag } | Predicate::Equals { value: tag, .. } => tags.contains(tag),
                Predicate::Prefix { value, .. } => tags.iter().any(|t| t.starts_with(value.as_str())),
                Predicate::In { values, .. } => tags.iter().any(|t| values.contains(t)),
                Predicate::DateRange { .. } => false,
            };
        }
        let Some(v) = record.indexed_attributes.get(attr) else {
            return false;
        };
        match self {
            Predicate::Equals { value, .. } => v == value,
            Predicate::Prefix { value, .. } => v.starts_with(value.as_str()),
            Predicate::DateRange { from, to, .. } => from <= v && v <= to,
            Predicate::In { values, .. } => values.contains(v),
            Predicate::HasTag { .. } => unreachable!("has_tag addresses user_tags"),
        }
    }
}

/// A conjunction of predicates; the empty conjunction matches everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortQuery {
    #[serde(default)]
    pub predicates: Vec<Predicate>,
}

impl CohortQuery {
    pub fn all() -> Self {
        CohortQuery::default()
    }

    pub fn new(predicates: Vec<Predicate>) -> Self {
        CohortQuery { predicates }
    }

    pub fn validate(&self) -> Result<(), ArchiveError> {
        self.predicates.iter().try_for_each(Predicate::validate)
    }

    pub fn matches(&self, record: &InstanceRecord) -> bool {
        self.predicates.iter().all(|p| p.matches(record))
    }

    /// Predicates sorted by (attribute, kind, content) with duplicates removed.
    pub fn canonical(&self) -> CohortQuery {
        let mut predicates = self.predicates.clone();
        predicates.sort_by(|a, b| {
            (a.attribute(), a.kind())
                .cmp(&(b.attribute(), b.kind()))
                .then_with(|| sort_key(a).cmp(&sort_key(b)))
        });
        predicates.dedup();
        CohortQuery { predicates }
    }

    /// Compact JSON of the canonical form; equal queries encode identically.
    pub fn encode(&self) -> String {
        serde_json::to_string(&self.canonical()).expect("query serializes")
    }

    pub fn decode(text: &str) -> Result<CohortQuery, ArchiveError> {
        let q: CohortQuery =
            serde_json::from_str(text).map_err(|e| ArchiveError::InvalidQuery(e.to_string()))?;
        q.validate()?;
        Ok(q)
    }
}

fn sort_key(p: &Predicate) -> String {
    serde_json::to_string(p).expect("predicate serializes")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryLevel {
    Instance,
    Series,
    Study,
}

impl std::str::FromStr for QueryLevel {
    type Err = ArchiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "instance" => Ok(QueryLevel::Instance),
            "series" => Ok(QueryLevel::Series),
            "study" => Ok(QueryLevel::Study),
            other => Err(ArchiveError::InvalidQuery(format!("unknown level {other:?}"))),
        }
    }
}

/// One series whose instances matched a query. Attributes come from the
/// matching instance with the smallest SOP instance UID.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeriesRollup {
    pub series_instance_uid: String,
    pub study_instance_uid: String,
    pub patient_id: String,
    pub representative_sop_instance_uid: String,
    pub attributes: std::collections::BTreeMap<String, String>,
    pub instance_count: usize,
    pub matched_instances: usize,
    pub user_tags: BTreeSet<String>,
}

/// One study whose instances matched a query.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyRollup {
    pub study_instance_uid: String,
    pub patient_id: String,
    pub representative_sop_instance_uid: String,
    pub attributes: std::collections::BTreeMap<String, String>,
    pub series_count: usize,
    pub instance_count: usize,
    pub matched_series: usize,
    pub matched_instances: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "level", content = "results", rename_all = "snake_case")]
pub enum QueryResult {
    Instance(Vec<InstanceRecord>),
    Series(Vec<SeriesRollup>),
    Study(Vec<StudyRollup>),
}

impl QueryResult {
    pub fn len(&self) -> usize {
        match self {
            QueryResult::Instance(v) => v.len(),
            QueryResult::Series(v) => v.len(),
            QueryResult::Study(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
