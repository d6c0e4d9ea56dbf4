use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use minipacs_core::archive::*;
use minipacs_core::fixtures::{series_fixture, InstanceSpec};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use sha2::{Digest, Sha256};

const MODALITIES: [&str; 20] = [
    "CT", "MR", "CT", "PT", "MR", "CT", "US", "MR", "CT", "CT", "MR", "PT", "CT", "MR", "US", "CT", "MR", "CT", "CT", "MR",
];

/// Attribute values as the fixture generator wrote them.
fn oracle_attrs(s: &InstanceSpec) -> BTreeMap<&'static str, String> {
    let mut m = BTreeMap::from([
        ("PatientID", s.patient_id.clone()),
        ("PatientName", s.patient_name.clone()),
        ("Modality", s.modality.clone()),
        ("StudyInstanceUID", s.study_uid.clone()),
        ("SeriesInstanceUID", s.series_uid.clone()),
        ("SOPInstanceUID", s.sop_uid.clone()),
        ("SeriesDescription", s.series_description.clone()),
        ("Rows", s.rows.to_string()),
        ("Columns", s.cols.to_string()),
        ("InstanceNumber", s.instance_number.to_string()),
    ]);
    if let Some(d) = &s.study_date {
        m.insert("StudyDate", d.clone());
    }
    if let Some(b) = &s.body_part {
        m.insert("BodyPartExamined", b.clone());
    }
    m
}

fn oracle_match(p: &Predicate, attrs: &BTreeMap<&'static str, String>, tags: &BTreeSet<String>) -> bool {
    match p {
        Predicate::HasTag { tag } => tags.contains(tag),
        Predicate::Equals { attr, value } if attr == "user_tags" => tags.contains(value),
        Predicate::Prefix { attr, value } if attr == "user_tags" => tags.iter().any(|t| t.starts_with(value.as_str())),
        Predicate::In { attr, values } if attr == "user_tags" => tags.iter().any(|t| values.contains(t)),
        Predicate::Equals { attr, value } => attrs.get(attr.as_str()) == Some(value),
        Predicate::Prefix { attr, value } => attrs.get(attr.as_str()).is_some_and(|v| v.starts_with(value.as_str())),
        Predicate::DateRange { attr, from, to } => {
            attrs.get(attr.as_str()).is_some_and(|v| from.as_str() <= v.as_str() && v.as_str() <= to.as_str())
        }
        Predicate::In { attr, values } => attrs.get(attr.as_str()).is_some_and(|v| values.contains(v)),
    }
}

struct World {
    _dir: tempfile::TempDir,
    archive: Archive,
    specs: Vec<InstanceSpec>,
    tags: BTreeMap<String, BTreeSet<String>>,
}

fn world(seed: u64) -> World {
    let dir = tempfile::tempdir().unwrap();
    let archive = Archive::open(dir.path(), ArchiveConfig::default()).unwrap();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut specs = series_fixture(&mut rng, "42", &MODALITIES, 10, 4, 4);
    for s in specs.iter_mut().filter(|s| s.series_uid.ends_with(".13")) {
        s.study_date = None;
    }
    for s in &specs {
        archive.ingest_part10(&s.part10()).unwrap();
    }
    let mut tags: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    let series: BTreeSet<String> = specs.iter().map(|s| s.series_uid.clone()).collect();
    for name in ["train", "test", "review", "train_2"] {
        let chosen: Vec<String> = series.iter().filter(|_| rng.gen_bool(0.35)).cloned().collect();
        archive.apply_tags(&chosen, &BTreeSet::from([name.to_string()]), &BTreeSet::new()).unwrap();
        for s in chosen {
            tags.entry(s).or_default().insert(name.to_string());
        }
    }
    World { _dir: dir, archive, specs, tags }
}

fn random_query(rng: &mut StdRng, specs: &[InstanceSpec]) -> CohortQuery {
    let n = rng.gen_range(0..=3);
    let mut preds = Vec::new();
    for _ in 0..n {
        let s = specs.choose(rng).unwrap();
        let attrs = oracle_attrs(s);
        let names: Vec<&&str> = attrs.keys().collect();
        let attr = names.choose(rng).unwrap().to_string();
        let value = attrs[attr.as_str()].clone();
        let p = match rng.gen_range(0..7) {
            0 | 1 => Predicate::Equals { attr, value },
            2 => Predicate::Prefix { attr, value: value[..rng.gen_range(0..=value.len())].to_string() },
            3 => {
                let other = specs.choose(rng).unwrap().study_date.clone().unwrap_or_else(|| "20200601".into());
                let d = attrs.get("StudyDate").cloned().unwrap_or_else(|| "20200101".into());
                let (from, to) = if d <= other { (d, other) } else { (other, d) };
                Predicate::DateRange { attr: "StudyDate".into(), from, to }
            }
            4 => {
                let mut values: BTreeSet<String> = BTreeSet::from([value]);
                if let Some(v) = oracle_attrs(specs.choose(rng).unwrap()).get(attr.as_str()) {
                    values.insert(v.clone());
                }
                values.insert("nonexistent".into());
                Predicate::In { attr, values }
            }
            5 => Predicate::HasTag { tag: ["train", "test", "review", "absent"].choose(rng).unwrap().to_string() },
            _ => Predicate::Equals { attr, value: format!("{value}x") },
        };
        preds.push(p);
    }
    CohortQuery::new(preds)
}

fn oracle_instances<'a>(w: &'a World, q: &CohortQuery) -> Vec<&'a InstanceSpec> {
    let none = BTreeSet::new();
    w.specs
        .iter()
        .filter(|s| {
            let attrs = oracle_attrs(s);
            let tags = w.tags.get(&s.series_uid).unwrap_or(&none);
            q.predicates.iter().all(|p| oracle_match(p, &attrs, tags))
        })
        .collect()
}

#[test]
fn ingest_fixture_and_reverify_digests() {
    let w = world(1);
    assert_eq!(w.archive.instance_count(), 200);
    for s in &w.specs {
        let raw = s.part10();
        let rec = w.archive.instance(&s.sop_uid).unwrap();
        assert_eq!(rec.content_sha256, hex::encode(Sha256::digest(&raw)));
        let blob = std::fs::read(w.archive.blob_path(&rec.content_sha256)).unwrap();
        assert_eq!(hex::encode(Sha256::digest(&blob)), rec.content_sha256);
        assert_eq!(rec.size, raw.len() as u64);
    }
}

#[test]
fn random_queries_match_brute_force() {
    let w = world(2);
    let mut rng = StdRng::seed_from_u64(99);
    let mut nonempty = 0;
    for _ in 0..500 {
        let q = random_query(&mut rng, &w.specs);
        let hits = oracle_instances(&w, &q);
        nonempty += usize::from(!hits.is_empty());

        let mut expected: Vec<(Reverse<String>, String)> = hits
            .iter()
            .map(|s| (Reverse(s.study_date.clone().unwrap_or_default()), s.sop_uid.clone()))
            .collect();
        expected.sort();
        let QueryResult::Instance(got) = w.archive.query_index(&q, QueryLevel::Instance).unwrap() else { panic!() };
        let got: Vec<String> = got.into_iter().map(|r| r.sop_instance_uid).collect();
        assert_eq!(got, expected.into_iter().map(|e| e.1).collect::<Vec<_>>(), "{q:?}");

        let mut series: Vec<(Reverse<String>, String)> = hits
            .iter()
            .map(|s| (Reverse(s.study_date.clone().unwrap_or_default()), s.series_uid.clone()))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        series.sort();
        let QueryResult::Series(rows) = w.archive.query_index(&q, QueryLevel::Series).unwrap() else { panic!() };
        assert_eq!(
            rows.iter().map(|r| r.series_instance_uid.clone()).collect::<Vec<_>>(),
            series.iter().map(|e| e.1.clone()).collect::<Vec<_>>()
        );
        for r in &rows {
            assert_eq!(r.instance_count, 10);
            assert_eq!(r.matched_instances, hits.iter().filter(|s| s.series_uid == r.series_instance_uid).count());
        }

        let studies: BTreeSet<&str> = hits.iter().map(|s| s.study_uid.as_str()).collect();
        let QueryResult::Study(rows) = w.archive.query_index(&q, QueryLevel::Study).unwrap() else { panic!() };
        assert_eq!(rows.iter().map(|r| r.study_instance_uid.as_str()).collect::<BTreeSet<_>>(), studies);
    }
    assert!(nonempty > 200, "generator too sparse: {nonempty}");
}

#[test]
fn histogram_sums_to_series_count() {
    let w = world(3);
    let mut rng = StdRng::seed_from_u64(7);
    let attrs = ["PatientID", "Modality", "StudyDate", "BodyPartExamined", "SeriesDescription", "Rows"];
    for i in 0..100 {
        let q = random_query(&mut rng, &w.specs);
        let attr = attrs[i % attrs.len()];
        let hist = w.archive.aggregate_values(attr, &q).unwrap();
        let series = w.archive.query_index(&q, QueryLevel::Series).unwrap().len();
        assert_eq!(hist.values().sum::<usize>(), series);
    }
    let modality = w.archive.aggregate_values("Modality", &CohortQuery::all()).unwrap();
    let mut expected = BTreeMap::new();
    for m in MODALITIES {
        *expected.entry(m.to_string()).or_insert(0) += 1;
    }
    assert_eq!(modality, expected);
    let body = w.archive.aggregate_values("BodyPartExamined", &CohortQuery::all()).unwrap();
    assert_eq!(body[MISSING_BUCKET], (0..20).filter(|s| s % 3 == 2).count());
    assert!(w.archive.aggregate_values("Modality", &CohortQuery::new(vec![Predicate::HasTag { tag: "none".into() }])).unwrap().is_empty());
    assert!(matches!(w.archive.aggregate_values("Nope", &CohortQuery::all()), Err(ArchiveError::UnknownAttribute(_))));
}

#[test]
fn five_series_modality_example() {
    let dir = tempfile::tempdir().unwrap();
    let a = Archive::open(dir.path(), ArchiveConfig::default()).unwrap();
    let specs = series_fixture(&mut StdRng::seed_from_u64(4), "43", &["CT", "MR", "CT", "MR", "CT"], 2, 4, 4);
    for s in &specs {
        a.ingest_part10(&s.part10()).unwrap();
    }
    let q = CohortQuery::new(vec![Predicate::Equals { attr: "Modality".into(), value: "CT".into() }]);
    let QueryResult::Series(rows) = a.query_index(&q, QueryLevel::Series).unwrap() else { panic!() };
    let mut ct: Vec<String> = specs.iter().filter(|s| s.modality == "CT").map(|s| s.series_uid.clone()).collect();
    ct.dedup();
    assert_eq!(rows.iter().map(|r| r.series_instance_uid.clone()).collect::<BTreeSet<_>>(), ct.into_iter().collect());
    assert_eq!(
        a.aggregate_values("Modality", &CohortQuery::all()).unwrap(),
        BTreeMap::from([("CT".to_string(), 3), ("MR".to_string(), 2)])
    );
    assert_eq!(a.query_index(&CohortQuery::all(), QueryLevel::Instance).unwrap().len(), 10);
}

#[test]
fn concurrent_disjoint_tags_union() {
    let w = world(5);
    let archive = Arc::new(w.archive);
    let series = w.specs[0].series_uid.clone();
    let handles: Vec<_> = (0..8)
        .map(|i| {
            let (a, s) = (archive.clone(), series.clone());
            std::thread::spawn(move || {
                a.apply_tags(&[s], &BTreeSet::from([format!("t{i}")]), &BTreeSet::new()).unwrap();
            })
        })
        .collect();
    for h in handles {
        h.join().unwrap();
    }
    let rows = archive.series_instances(&series).unwrap();
    let mut expected = w.tags.get(&series).cloned().unwrap_or_default();
    expected.extend((0..8).map(|i| format!("t{i}")));
    assert!(rows.iter().all(|r| r.user_tags == expected));
}

#[test]
fn object_store_round_trip_and_racing_overwrites() {
    let dir = tempfile::tempdir().unwrap();
    let a = Arc::new(Archive::open(dir.path(), ArchiveConfig::default()).unwrap());
    let mut rng = StdRng::seed_from_u64(6);
    let blob: Vec<u8> = (0..1 << 20).map(|_| rng.gen()).collect();
    let r = a.store_object("bucket", "big.bin", "application/octet-stream", &blob).unwrap();
    assert_eq!(r.sha256, hex::encode(Sha256::digest(&blob)));
    assert_eq!(a.fetch_object("bucket", "big.bin").unwrap(), blob);

    let payloads: Vec<Vec<u8>> = vec![vec![0xAA; 300_000], vec![0x55; 200_000]];
    for _ in 0..10 {
        let handles: Vec<_> = payloads
            .iter()
            .cloned()
            .map(|p| {
                let a = a.clone();
                std::thread::spawn(move || a.store_object("bucket", "race", "x", &p).unwrap())
            })
            .collect();
        let reader = {
            let a = a.clone();
            let payloads = payloads.clone();
            std::thread::spawn(move || {
                for _ in 0..50 {
                    if let Ok(got) = a.fetch_object("bucket", "race") {
                        assert!(payloads.contains(&got));
                    }
                }
            })
        };
        for h in handles {
            h.join().unwrap();
        }
        reader.join().unwrap();
        assert!(payloads.contains(&a.fetch_object("bucket", "race").unwrap()));
    }
}

#[test]
fn crash_between_blob_and_index_leaves_instance_invisible() {
    let dir = tempfile::tempdir().unwrap();
    let specs = series_fixture(&mut StdRng::seed_from_u64(8), "44", &["CT"], 3, 4, 4);
    {
        let a = Archive::open(dir.path(), ArchiveConfig::default()).unwrap();
        a.ingest_part10(&specs[0].part10()).unwrap();
        a.ingest_part10(&specs[1].part10()).unwrap();
    }
    // Blob of the third instance reached disk; its index line did not.
    let raw = specs[2].part10();
    let sha = hex::encode(Sha256::digest(&raw));
    let path = dir.path().join("blobs").join(&sha[..2]).join(&sha);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(&path, &raw).unwrap();
    // A torn index line from an interrupted commit.
    let mut journal = std::fs::OpenOptions::new().append(true).open(dir.path().join("index.jsonl")).unwrap();
    std::io::Write::write_all(&mut journal, br#"{"op":"instance","record":{"sop_ins"#).unwrap();
    drop(journal);

    let a = Archive::open(dir.path(), ArchiveConfig::default()).unwrap();
    assert_eq!(a.instance_count(), 2);
    assert!(a.instance(&specs[2].sop_uid).is_none());
    assert_eq!(a.reconcile_report().orphan_blobs_removed, 1);
    assert!(!path.exists());
    a.ingest_part10(&raw).unwrap();
    drop(a);
    let a = Archive::open(dir.path(), ArchiveConfig::default()).unwrap();
    assert_eq!(a.instance_count(), 3);
    assert_eq!(a.reconcile_report().verified, 3);
}
