//! Content-addressed instance and object storage with a queryable metadata
//! index, series tagging and frozen cohorts.
//!
//! Layout under the data directory:
//!
//! ```text
//! blobs/<sha[0..2]>/<sha>     instance files
//! objects/<sha[0..2]>/<sha>   object payloads
//! index.jsonl                 committed index transactions
//! tmp/                        staging area for atomic renames
//! ```
//!
//! A blob is durable before the index line that makes it visible is written.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dicom::{extract_metadata, parse_part10, tags, DicomDataset, DicomError, FileMeta, Tag};
use crate::dimse::InstanceSink;
use crate::par::{self, ExecMode};

mod journal;
mod query;

use journal::Journal;
pub use query::{CohortQuery, Predicate, QueryLevel, QueryResult, SeriesRollup, StudyRollup, USER_TAGS};

/// The indexed attribute set, by keyword.
pub const INDEXED_ATTRIBUTES: [(&str, Tag); 12] = [
    ("PatientID", tags::PATIENT_ID),
    ("PatientName", tags::PATIENT_NAME),
    ("Modality", tags::MODALITY),
    ("StudyDate", tags::STUDY_DATE),
    ("StudyInstanceUID", tags::STUDY_INSTANCE_UID),
    ("SeriesInstanceUID", tags::SERIES_INSTANCE_UID),
    ("SOPInstanceUID", tags::SOP_INSTANCE_UID),
    ("SeriesDescription", tags::SERIES_DESCRIPTION),
    ("BodyPartExamined", tags::BODY_PART_EXAMINED),
    ("Rows", tags::ROWS),
    ("Columns", tags::COLUMNS),
    ("InstanceNumber", tags::INSTANCE_NUMBER),
];

/// Histogram bucket for series lacking the attribute.
pub const MISSING_BUCKET: &str = "(missing)";

const LOCK_STRIPES: usize = 64;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("SOP instance {0} already stored with different content")]
    UidConflict(String),
    #[error("dataset lacks {0}")]
    MissingRequiredUid(&'static str),
    #[error("storage quota exhausted")]
    StorageFull,
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("invalid tag name {0:?}")]
    InvalidTagName(String),
    #[error("unknown series {0}")]
    UnknownSeries(String),
    #[error("unknown instance {0}")]
    UnknownInstance(String),
    #[error("not found")]
    NotFound,
    #[error("invalid bucket or key {0:?}")]
    InvalidKey(String),
    #[error("invalid name {0:?}")]
    InvalidName(String),
    #[error("a cohort named {0:?} already exists")]
    DuplicateName(String),
    #[error("unknown cohort {0:?}")]
    UnknownCohort(String),
    #[error("index corrupt: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Dicom(#[from] DicomError),
    #[error("I/O error: {0}")]
    Io(io::Error),
}

impl From<io::Error> for ArchiveError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::StorageFull {
            ArchiveError::StorageFull
        } else {
            ArchiveError::Io(e)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub sop_instance_uid: String,
    pub series_instance_uid: String,
    pub study_instance_uid: String,
    pub patient_id: String,
    pub indexed_attributes: BTreeMap<String, String>,
    pub content_sha256: String,
    pub size: u64,
    pub received_at: DateTime<Utc>,
    /// Tags of the owning series.
    #[serde(default)]
    pub user_tags: BTreeSet<String>,
}

impl InstanceRecord {
    fn study_date(&self) -> &str {
        self.indexed_attributes.get("StudyDate").map_or("", String::as_str)
    }

    #[cfg(test)]
    pub(crate) fn test_record(sop: &str, series: &str, study: &str) -> Self {
        InstanceRecord {
            sop_instance_uid: sop.into(),
            series_instance_uid: series.into(),
            study_instance_uid: study.into(),
            patient_id: String::new(),
            indexed_attributes: BTreeMap::new(),
            content_sha256: String::new(),
            size: 0,
            received_at: DateTime::<Utc>::UNIX_EPOCH,
            user_tags: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cohort {
    pub name: String,
    pub series_uids: Vec<String>,
    pub origin_query: CohortQuery,
    pub created_at: DateTime<Utc>,
    pub created_by: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectRef {
    pub bucket: String,
    pub key: String,
    pub sha256: String,
    pub size: u64,
    pub media_type: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReconcileReport {
    pub verified: usize,
    /// Records dropped because their blob was missing or did not hash to the recorded digest.
    pub dropped_records: Vec<String>,
    pub orphan_blobs_removed: usize,
    pub orphan_objects_removed: usize,
}

#[derive(Debug, Clone)]
pub struct ArchiveConfig {
    /// Upper bound on stored instance and object bytes.
    pub quota_bytes: Option<u64>,
    pub exec: ExecMode,
}

impl Default for ArchiveConfig {
    fn default() -> Self {
        ArchiveConfig {
            quota_bytes: None,
            exec: ExecMode::default(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum Entry {
    Instance { record: InstanceRecord },
    /// Replaces the tag sets of the listed series.
    SeriesTags { tags: BTreeMap<String, BTreeSet<String>> },
    Cohort { cohort: Cohort },
    Object { object: ObjectRef },
    Drop { sop_instance_uid: String },
}

#[derive(Default)]
struct State {
    records: Vec<InstanceRecord>,
    by_uid: HashMap<String, usize>,
    series_members: HashMap<String, Vec<usize>>,
    series_tags: HashMap<String, BTreeSet<String>>,
    cohorts: BTreeMap<String, Cohort>,
    objects: BTreeMap<(String, String), ObjectRef>,
    stored_bytes: u64,
}

impl State {
    fn replay(entries: Vec<Entry>) -> State {
        // An instance entry is live unless a later drop names its UID.
        let mut last_drop: HashMap<String, usize> = HashMap::new();
        for (pos, e) in entries.iter().enumerate() {
            if let Entry::Drop { sop_instance_uid } = e {
                last_drop.insert(sop_instance_uid.clone(), pos);
            }
        }
        let mut st = State::default();
        for (pos, entry) in entries.into_iter().enumerate() {
            match entry {
                Entry::Instance { record } => {
                    if last_drop.get(&record.sop_instance_uid).is_none_or(|&d| d < pos) {
                        st.insert(record);
                    }
                }
                Entry::Drop { .. } => {}
                Entry::SeriesTags { tags } => st.set_tags(tags),
                Entry::Cohort { cohort } => {
                    st.cohorts.insert(cohort.name.clone(), cohort);
                }
                Entry::Object { object } => st.put_object(object),
            }
        }
        st
    }

    fn insert(&mut self, mut record: InstanceRecord) {
        record.user_tags = self
            .series_tags
            .get(&record.series_instance_uid)
            .cloned()
            .unwrap_or_default();
        let idx = self.records.len();
        self.stored_bytes += record.size;
        self.by_uid.insert(record.sop_instance_uid.clone(), idx);
        self.series_members
            .entry(record.series_instance_uid.clone())
            .or_default()
            .push(idx);
        self.records.push(record);
    }

    fn set_tags(&mut self, tags: BTreeMap<String, BTreeSet<String>>) {
        for (series, set) in tags {
            for &i in self.series_members.get(&series).map(Vec::as_slice).unwrap_or_default() {
                self.records[i].user_tags = set.clone();
            }
            self.series_tags.insert(series, set);
        }
    }

    fn put_object(&mut self, object: ObjectRef) {
        let key = (object.bucket.clone(), object.key.clone());
        if let Some(old) = self.objects.insert(key, object.clone()) {
            self.stored_bytes -= old.size;
        }
        self.stored_bytes += object.size;
    }
}

/// The archive. All operations are safe to call concurrently.
pub struct Archive {
    root: PathBuf,
    config: ArchiveConfig,
    /// Lock order: stripe, then journal, then state.
    journal: Mutex<Journal>,
    state: RwLock<State>,
    stripes: Vec<Mutex<()>>,
    report: ReconcileReport,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn content_path(dir: &Path, sha: &str) -> PathBuf {
    dir.join(&sha[..2]).join(sha)
}

fn valid_tag_name(tag: &str) -> bool {
    (1..=64).contains(&tag.len()) && tag.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn valid_cohort_name(name: &str) -> bool {
    (1..=128).contains(&name.len())
        && name.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.'))
}

fn valid_object_path(s: &str) -> bool {
    !s.is_empty()
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || matches!(b, b'.' | b'_' | b'/' | b'-'))
        && !s.split('/').any(|seg| seg == "..")
}

impl Archive {
    /// Opens (creating if needed) the archive under `root`, replays the index
    /// and reconciles it against the blob store.
    pub fn open(root: impl AsRef<Path>, config: ArchiveConfig) -> Result<Archive, ArchiveError> {
        let root = root.as_ref().to_path_buf();
        for dir in ["blobs", "objects", "tmp"] {
            fs::create_dir_all(root.join(dir))?;
        }
        for stale in fs::read_dir(root.join("tmp"))? {
            let _ = fs::remove_file(stale?.path());
        }
        let (journal, entries) = Journal::open::<Entry>(&root.join("index.jsonl"))?;
        let state = State::replay(entries);
        let mut archive = Archive {
            root,
            config,
            journal: Mutex::new(journal),
            state: RwLock::new(state),
            stripes: (0..LOCK_STRIPES).map(|_| Mutex::new(())).collect(),
            report: ReconcileReport::default(),
        };
        archive.report = archive.reconcile()?;
        Ok(archive)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn exec_mode(&self) -> ExecMode {
        self.config.exec
    }

    /// Outcome of the reconciliation run at open.
    pub fn reconcile_report(&self) -> &ReconcileReport {
        &self.report
    }

    fn blobs_dir(&self) -> PathBuf {
        self.root.join("blobs")
    }

    fn objects_dir(&self) -> PathBuf {
        self.root.join("objects")
    }

    fn stripe(&self, key: &str) -> std::sync::MutexGuard<'_, ()> {
        let h = Sha256::digest(key.as_bytes());
        let idx = u16::from_le_bytes([h[0], h[1]]) as usize % LOCK_STRIPES;
        self.stripes[idx].lock().expect("stripe lock")
    }

    fn read_state(&self) -> std::sync::RwLockReadGuard<'_, State> {
        self.state.read().expect("state lock")
    }

    fn commit(&self, entry: &Entry, apply: impl FnOnce(&mut State)) -> Result<(), ArchiveError> {
        let mut journal = self.journal.lock().expect("journal lock");
        journal.append(entry)?;
        let mut st = self.state.write().expect("state lock");
        apply(&mut st);
        Ok(())
    }

    /// Writes `bytes` at its content address, durably, unless already present.
    fn write_content(&self, dir: &Path, sha: &str, bytes: &[u8]) -> Result<(), ArchiveError> {
        let dest = content_path(dir, sha);
        if dest.exists() && sha256_hex(&fs::read(&dest)?) == sha {
            return Ok(());
        }
        let parent = dest.parent().expect("content path has a parent");
        fs::create_dir_all(parent)?;
        let tmp = tempfile::NamedTempFile::new_in(self.root.join("tmp"))?;
        {
            use std::io::Write;
            let mut f = tmp.as_file();
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        tmp.persist(&dest).map_err(|e| e.error)?;
        fs::File::open(parent)?.sync_all()?;
        Ok(())
    }

    fn check_quota(&self, extra: u64) -> Result<(), ArchiveError> {
        if let Some(limit) = self.config.quota_bytes {
            if self.read_state().stored_bytes + extra > limit {
                return Err(ArchiveError::StorageFull);
            }
        }
        Ok(())
    }

    /// Stores and indexes one instance. Re-ingesting identical content is a
    /// no-op returning the existing record.
    pub fn ingest_instance(&self, _meta: &FileMeta, ds: &DicomDataset, raw: &[u8]) -> Result<InstanceRecord, ArchiveError> {
        let uid = |tag: Tag, name: &'static str| {
            ds.get_str(tag)
                .filter(|s| !s.is_empty())
                .ok_or(ArchiveError::MissingRequiredUid(name))
        };
        let sop = uid(tags::SOP_INSTANCE_UID, "SOPInstanceUID")?;
        let series = uid(tags::SERIES_INSTANCE_UID, "SeriesInstanceUID")?;
        let study = uid(tags::STUDY_INSTANCE_UID, "StudyInstanceUID")?;
        let tag_list: Vec<Tag> = INDEXED_ATTRIBUTES.iter().map(|(_, t)| *t).collect();
        let indexed_attributes = extract_metadata(ds, &tag_list)?;
        let sha = sha256_hex(raw);

        let _guard = self.stripe(&sop);
        if let Some(existing) = self.instance(&sop) {
            return if existing.content_sha256 == sha {
                Ok(existing)
            } else {
                Err(ArchiveError::UidConflict(sop))
            };
        }
        self.check_quota(raw.len() as u64)?;
        self.write_content(&self.blobs_dir(), &sha, raw)?;
        let record = InstanceRecord {
            sop_instance_uid: sop,
            series_instance_uid: series,
            study_instance_uid: study,
            patient_id: indexed_attributes.get("PatientID").cloned().unwrap_or_default(),
            indexed_attributes,
            content_sha256: sha,
            size: raw.len() as u64,
            received_at: Utc::now(),
            user_tags: BTreeSet::new(),
        };
        let entry = Entry::Instance { record: record.clone() };
        self.commit(&entry, |st| st.insert(record))?;
        let uid = match &entry {
            Entry::Instance { record } => &record.sop_instance_uid,
            _ => unreachable!(),
        };
        tracing::debug!(sop = %uid, "instance ingested");
        Ok(self.instance(uid).expect("just inserted"))
    }

    /// Parses a Part-10 file and ingests it.
    pub fn ingest_part10(&self, raw: &[u8]) -> Result<InstanceRecord, ArchiveError> {
        let (meta, ds) = parse_part10(raw)?;
        self.ingest_instance(&meta, &ds, raw)
    }

    pub fn instance(&self, sop_uid: &str) -> Option<InstanceRecord> {
        let st = self.read_state();
        st.by_uid.get(sop_uid).map(|&i| st.records[i].clone())
    }

    pub fn instance_count(&self) -> usize {
        self.read_state().records.len()
    }

    /// All instances, in ingest order.
    pub fn instances(&self) -> Vec<InstanceRecord> {
        self.read_state().records.clone()
    }

    /// Instances of one series ordered by InstanceNumber, then UID.
    pub fn series_instances(&self, series_uid: &str) -> Result<Vec<InstanceRecord>, ArchiveError> {
        let st = self.read_state();
        let members = st
            .series_members
            .get(series_uid)
            .ok_or_else(|| ArchiveError::UnknownSeries(series_uid.to_string()))?;
        let mut out: Vec<InstanceRecord> = members.iter().map(|&i| st.records[i].clone()).collect();
        out.sort_by(|a, b| {
            let n = |r: &InstanceRecord| {
                r.indexed_attributes
                    .get("InstanceNumber")
                    .and_then(|s| s.trim().parse::<i64>().ok())
                    .unwrap_or(i64::MAX)
            };
            n(a).cmp(&n(b)).then_with(|| a.sop_instance_uid.cmp(&b.sop_instance_uid))
        });
        Ok(out)
    }

    /// Reads an instance's stored file image.
    pub fn read_instance(&self, sop_uid: &str) -> Result<Vec<u8>, ArchiveError> {
        let record = self
            .instance(sop_uid)
            .ok_or_else(|| ArchiveError::UnknownInstance(sop_uid.to_string()))?;
        Ok(fs::read(self.blob_path(&record.content_sha256))?)
    }

    pub fn blob_path(&self, sha: &str) -> PathBuf {
        content_path(&self.blobs_dir(), sha)
    }

    fn matching(&self, st: &State, q: &CohortQuery) -> Vec<usize> {
        par::map_range(self.config.exec, st.records.len(), |i| q.matches(&st.records[i]).then_some(i))
            .into_iter()
            .flatten()
            .collect()
    }

    /// Runs `q` at the given level. Results are ordered by StudyDate
    /// descending (absent dates last), then by the level's UID ascending.
    pub fn query_index(&self, q: &CohortQuery, level: QueryLevel) -> Result<QueryResult, ArchiveError> {
        q.validate()?;
        let st = self.read_state();
        let hits = self.matching(&st, q);
        Ok(match level {
            QueryLevel::Instance => {
                let mut out: Vec<InstanceRecord> = hits.iter().map(|&i| st.records[i].clone()).collect();
                out.sort_by(|a, b| {
                    (Reverse(a.study_date()), &a.sop_instance_uid).cmp(&(Reverse(b.study_date()), &b.sop_instance_uid))
                });
                QueryResult::Instance(out)
            }
            QueryLevel::Series => QueryResult::Series(series_rollups(&st, &hits)),
            QueryLevel::Study => QueryResult::Study(study_rollups(&st, &hits)),
        })
    }

    /// Counts matching series by the value of `attr`.
    pub fn aggregate_values(&self, attr: &str, q: &CohortQuery) -> Result<BTreeMap<String, usize>, ArchiveError> {
        if !INDEXED_ATTRIBUTES.iter().any(|(name, _)| *name == attr) {
            return Err(ArchiveError::UnknownAttribute(attr.to_string()));
        }
        q.validate()?;
        let st = self.read_state();
        let hits = self.matching(&st, q);
        let mut out = BTreeMap::new();
        for rollup in series_rollups(&st, &hits) {
            let value = rollup.attributes.get(attr).cloned().unwrap_or_else(|| MISSING_BUCKET.to_string());
            *out.entry(value).or_insert(0) += 1;
        }
        Ok(out)
    }

    /// Adds then removes tags on every listed series, atomically. Returns the
    /// number of instance records updated.
    pub fn apply_tags(
        &self,
        selection: &[String],
        add: &BTreeSet<String>,
        remove: &BTreeSet<String>,
    ) -> Result<usize, ArchiveError> {
        if let Some(bad) = add.iter().chain(remove).find(|t| !valid_tag_name(t)) {
            return Err(ArchiveError::InvalidTagName(bad.clone()));
        }
        let mut journal = self.journal.lock().expect("journal lock");
        let mut st = self.state.write().expect("state lock");
        let mut updated = BTreeMap::new();
        let mut count = 0;
        for series in selection {
            let members = st
                .series_members
                .get(series)
                .ok_or_else(|| ArchiveError::UnknownSeries(series.clone()))?;
            count += members.len();
            let mut set = updated
                .get(series)
                .cloned()
                .unwrap_or_else(|| st.series_tags.get(series).cloned().unwrap_or_default());
            set.extend(add.iter().cloned());
            set.retain(|t| !remove.contains(t));
            updated.insert(series.clone(), set);
        }
        if selection.is_empty() {
            return Ok(0);
        }
        journal.append(&Entry::SeriesTags { tags: updated.clone() })?;
        st.set_tags(updated);
        Ok(count)
    }

    /// Stores an object under (bucket, key), replacing any previous value atomically.
    pub fn store_object(&self, bucket: &str, key: &str, media_type: &str, bytes: &[u8]) -> Result<ObjectRef, ArchiveError> {
        for part in [bucket, key] {
            if !valid_object_path(part) {
                return Err(ArchiveError::InvalidKey(part.to_string()));
            }
        }
        let _guard = self.stripe(&format!("{bucket}\0{key}"));
        self.check_quota(bytes.len() as u64)?;
        let sha = sha256_hex(bytes);
        self.write_content(&self.objects_dir(), &sha, bytes)?;
        let object = ObjectRef {
            bucket: bucket.to_string(),
            key: key.to_string(),
            sha256: sha,
            size: bytes.len() as u64,
            media_type: media_type.to_string(),
        };
        let stored = object.clone();
        self.commit(&Entry::Object { object }, |st| st.put_object(stored))?;
        Ok(self.object_ref(bucket, key)?)
    }

    pub fn object_ref(&self, bucket: &str, key: &str) -> Result<ObjectRef, ArchiveError> {
        for part in [bucket, key] {
            if !valid_object_path(part) {
                return Err(ArchiveError::InvalidKey(part.to_string()));
            }
        }
        self.read_state()
            .objects
            .get(&(bucket.to_string(), key.to_string()))
            .cloned()
            .ok_or(ArchiveError::NotFound)
    }

    pub fn fetch_object(&self, bucket: &str, key: &str) -> Result<Vec<u8>, ArchiveError> {
        let object = self.object_ref(bucket, key)?;
        Ok(fs::read(content_path(&self.objects_dir(), &object.sha256))?)
    }

    /// Objects in `bucket` whose key starts with `prefix`, ordered by key.
    pub fn list_objects(&self, bucket: &str, prefix: &str) -> Vec<ObjectRef> {
        self.read_state()
            .objects
            .values()
            .filter(|o| o.bucket == bucket && o.key.starts_with(prefix))
            .cloned()
            .collect()
    }

    /// Freezes the series-level result of `q` under `name`.
    pub fn create_cohort(&self, name: &str, q: &CohortQuery, created_by: &str) -> Result<Cohort, ArchiveError> {
        if !valid_cohort_name(name) {
            return Err(ArchiveError::InvalidName(name.to_string()));
        }
        q.validate()?;
        let mut journal = self.journal.lock().expect("journal lock");
        let mut st = self.state.write().expect("state lock");
        if st.cohorts.contains_key(name) {
            return Err(ArchiveError::DuplicateName(name.to_string()));
        }
        let hits = self.matching(&st, q);
        let cohort = Cohort {
            name: name.to_string(),
            series_uids: series_rollups(&st, &hits)
                .into_iter()
                .map(|r| r.series_instance_uid)
                .collect(),
            origin_query: q.clone(),
            created_at: Utc::now(),
            created_by: created_by.to_string(),
        };
        journal.append(&Entry::Cohort { cohort: cohort.clone() })?;
        st.cohorts.insert(name.to_string(), cohort.clone());
        Ok(cohort)
    }

    pub fn cohort(&self, name: &str) -> Result<Cohort, ArchiveError> {
        self.read_state()
            .cohorts
            .get(name)
            .cloned()
            .ok_or_else(|| ArchiveError::UnknownCohort(name.to_string()))
    }

    pub fn resolve_cohort(&self, name: &str) -> Result<Vec<String>, ArchiveError> {
        Ok(self.cohort(name)?.series_uids)
    }

    pub fn cohorts(&self) -> Vec<Cohort> {
        self.read_state().cohorts.values().cloned().collect()
    }

    /// Re-verifies every record against its blob and removes unreferenced
    /// blobs. Records whose blob is missing or altered are dropped.
    fn reconcile(&self) -> Result<ReconcileReport, ArchiveError> {
        let mut report = ReconcileReport::default();
        let (records, objects): (Vec<(String, String)>, BTreeSet<String>) = {
            let st = self.read_state();
            (
                st.records
                    .iter()
                    .map(|r| (r.sop_instance_uid.clone(), r.content_sha256.clone()))
                    .collect(),
                st.objects.values().map(|o| o.sha256.clone()).collect(),
            )
        };
        let blobs = self.blobs_dir();
        let intact = par::map(self.config.exec, &records, |(_, sha)| {
            fs::read(content_path(&blobs, sha)).is_ok_and(|bytes| sha256_hex(&bytes) == *sha)
        });
        let mut referenced = BTreeSet::new();
        for ((uid, sha), ok) in records.iter().zip(intact) {
            if ok {
                report.verified += 1;
                referenced.insert(sha.clone());
            } else {
                tracing::warn!(sop = %uid, "dropping record whose blob is missing or altered");
                report.dropped_records.push(uid.clone());
            }
        }
        if !report.dropped_records.is_empty() {
            let mut journal = self.journal.lock().expect("journal lock");
            for uid in &report.dropped_records {
                journal.append(&Entry::Drop {
                    sop_instance_uid: uid.clone(),
                })?;
            }
            let entries = Journal::open::<Entry>(journal.path())?.1;
            *self.state.write().expect("state lock") = State::replay(entries);
        }
        report.orphan_blobs_removed = remove_unreferenced(&blobs, &referenced)?;
        report.orphan_objects_removed = remove_unreferenced(&self.objects_dir(), &objects)?;
        Ok(report)
    }
}

fn remove_unreferenced(dir: &Path, keep: &BTreeSet<String>) -> Result<usize, ArchiveError> {
    let mut removed = 0;
    for shard in fs::read_dir(dir)? {
        let shard = shard?.path();
        if !shard.is_dir() {
            continue;
        }
        for file in fs::read_dir(&shard)? {
            let path = file?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if !keep.contains(name) {
                fs::remove_file(&path)?;
                removed += 1;
            }
        }
    }
    Ok(removed)
}

fn series_rollups(st: &State, hits: &[usize]) -> Vec<SeriesRollup> {
    let mut groups: BTreeMap<&str, Vec<&InstanceRecord>> = BTreeMap::new();
    for &i in hits {
        let r = &st.records[i];
        groups.entry(&r.series_instance_uid).or_default().push(r);
    }
    let mut out: Vec<SeriesRollup> = groups
        .into_iter()
        .map(|(series, matched)| {
            let rep = matched
                .iter()
                .min_by(|a, b| a.sop_instance_uid.cmp(&b.sop_instance_uid))
                .expect("non-empty group");
            SeriesRollup {
                series_instance_uid: series.to_string(),
                study_instance_uid: rep.study_instance_uid.clone(),
                patient_id: rep.patient_id.clone(),
                representative_sop_instance_uid: rep.sop_instance_uid.clone(),
                attributes: rep.indexed_attributes.clone(),
                instance_count: st.series_members[series].len(),
                matched_instances: matched.len(),
                user_tags: rep.user_tags.clone(),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        let date = |r: &SeriesRollup| r.attributes.get("StudyDate").cloned().unwrap_or_default();
        (Reverse(date(a)), &a.series_instance_uid).cmp(&(Reverse(date(b)), &b.series_instance_uid))
    });
    out
}

fn study_rollups(st: &State, hits: &[usize]) -> Vec<StudyRollup> {
    let mut totals: HashMap<&str, (BTreeSet<&str>, usize)> = HashMap::new();
    for r in &st.records {
        let t = totals.entry(&r.study_instance_uid).or_default();
        t.0.insert(&r.series_instance_uid);
        t.1 += 1;
    }
    let mut groups: BTreeMap<&str, Vec<&InstanceRecord>> = BTreeMap::new();
    for &i in hits {
        let r = &st.records[i];
        groups.entry(&r.study_instance_uid).or_default().push(r);
    }
    let mut out: Vec<StudyRollup> = groups
        .into_iter()
        .map(|(study, matched)| {
            let rep = matched
                .iter()
                .min_by(|a, b| a.sop_instance_uid.cmp(&b.sop_instance_uid))
                .expect("non-empty group");
            let (series, instances) = &totals[study];
            StudyRollup {
                study_instance_uid: study.to_string(),
                patient_id: rep.patient_id.clone(),
                representative_sop_instance_uid: rep.sop_instance_uid.clone(),
                attributes: rep.indexed_attributes.clone(),
                series_count: series.len(),
                instance_count: *instances,
                matched_series: matched.iter().map(|r| &r.series_instance_uid).collect::<BTreeSet<_>>().len(),
                matched_instances: matched.len(),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        let date = |r: &StudyRollup| r.attributes.get("StudyDate").cloned().unwrap_or_default();
        (Reverse(date(a)), &a.study_instance_uid).cmp(&(Reverse(date(b)), &b.study_instance_uid))
    });
    out
}

impl InstanceSink for Archive {
    fn store(&self, _sop_instance_uid: &str, part10: Vec<u8>) -> Result<(), String> {
        self.ingest_part10(&part10).map(|_| ()).map_err(|e| e.to_string())
    }
}
