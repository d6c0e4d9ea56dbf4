use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{Duration, TimeZone, Utc};
use minipacs_core::clock::{self, ManualClock};
use minipacs_core::federation::{
    aggregate_round, sign_envelope, sign_envelope_at, verify_envelope, FedRequest, FederationError,
    JobSpec, JobState, LocalCluster, ReplayCache, RoundResult, SharedSecret, SignedEnvelope, INSTANCE_HEADER,
    LOCAL_PARTICIPANT, SIGNATURE_HEADER,
};
use minipacs_core::fixtures::{linear_regression, regression_csv, series_fixture};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn centralized_step(x: &[Vec<f64>], y: &[f64], w: &[f64], lr: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mut grad = vec![0.0; w.len()];
    for (row, t) in x.iter().zip(y) {
        let mut pred = 0.0;
        for j in 0..w.len() {
            pred += row[j] * w[j];
        }
        for j in 0..w.len() {
            grad[j] += 2.0 * row[j] * (pred - t) / n;
        }
    }
    (0..w.len()).map(|j| w[j] - lr * grad[j]).collect()
}

fn partitioned_cluster(dir: &std::path::Path, seed: u64, d: usize, n: usize) -> (LocalCluster, Vec<Vec<f64>>, Vec<f64>) {
    let cluster = LocalCluster::build(dir, 3, clock::system()).unwrap();
    let mut rng = StdRng::seed_from_u64(seed);
    let (x, y) = linear_regression(&mut rng, d, n);
    let part = n / 3;
    for k in 0..3 {
        let range = k * part..(k + 1) * part;
        cluster.load_training_data(k, &regression_csv(&x[range.clone()], &y[range])).unwrap();
    }
    (cluster, x, y)
}

fn participants(cluster: &LocalCluster) -> Vec<String> {
    std::iter::once(LOCAL_PARTICIPANT.to_string()).chain(cluster.remote_ids()).collect()
}

#[test]
fn one_round_equals_centralized_step() {
    let dir = tempfile::tempdir().unwrap();
    let (cluster, x, y) = partitioned_cluster(dir.path(), 11, 5, 300);
    let w0 = vec![0.5, -0.25, 0.0, 1.0, 0.125];
    let spec = JobSpec {
        workflow: "local_train".into(),
        participants: participants(&cluster),
        rounds: 1,
        lr: 0.1,
        init_params: w0.clone(),
        quorum: None,
    };
    let job = cluster.coordinator().run_federated_job(spec, "tester").unwrap();
    assert_eq!(job.state, JobState::Completed);
    let got = job.final_params.unwrap();
    let want = centralized_step(&x, &y, &w0, 0.1);
    for (g, w) in got.iter().zip(&want) {
        assert!((g - w).abs() <= 1e-9, "{g} vs {w}");
    }
    let record = &job.history[0];
    assert_eq!(record.results.len(), 3);
    assert!(record.results.iter().all(|r| r.sample_count == 100 && r.metrics.contains_key("loss")));
}

#[test]
fn multi_round_tracks_centralized_descent() {
    let dir = tempfile::tempdir().unwrap();
    let (cluster, x, y) = partitioned_cluster(dir.path(), 12, 3, 90);
    let spec = JobSpec {
        workflow: "local_train".into(),
        participants: participants(&cluster),
        rounds: 4,
        lr: 0.2,
        init_params: vec![0.0; 3],
        quorum: None,
    };
    let job = cluster.coordinator().run_federated_job(spec, "tester").unwrap();
    let mut w = vec![0.0; 3];
    for record in &job.history {
        w = centralized_step(&x, &y, &w, 0.2);
        for (g, c) in record.aggregated.as_ref().unwrap().iter().zip(&w) {
            assert!((g - c).abs() <= 1e-9);
        }
    }
    let stored = cluster.coordinator().job(&job.job_id).unwrap();
    assert_eq!(stored, job);
}

#[test]
fn aggregate_matches_exact_weighted_mean() {
    let mut rng = StdRng::seed_from_u64(5);
    for _ in 0..100 {
        let k = rng.gen_range(1..8);
        let d = rng.gen_range(1..10);
        // Dyadic values and integer counts keep every partial sum exact.
        let results: Vec<RoundResult> = (0..k)
            .map(|i| RoundResult {
                participant: format!("p{i}"),
                params: (0..d).map(|_| rng.gen_range(-4096i64..4096) as f64 / 1024.0).collect(),
                sample_count: rng.gen_range(1..1000),
                metrics: BTreeMap::new(),
            })
            .collect();
        let total: u64 = results.iter().map(|r| r.sample_count).sum();
        let got = aggregate_round(&results).unwrap();
        for j in 0..d {
            let num: i128 = results
                .iter()
                .map(|r| r.sample_count as i128 * (r.params[j] * 1024.0) as i128)
                .sum();
            let want = num as f64 / 1024.0 / total as f64;
            assert!((got[j] - want).abs() <= 1e-12, "{} vs {want}", got[j]);
        }
    }
}

fn count(haystack: &[u8], needle: &[u8]) -> usize {
    haystack.windows(needle.len()).filter(|w| *w == needle).count()
}

#[test]
fn wire_carries_no_imaging_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let (cluster, _, _) = partitioned_cluster(dir.path(), 13, 5, 300);
    let mut rng = StdRng::seed_from_u64(2);
    for (k, m) in cluster.members.iter().enumerate() {
        for spec in series_fixture(&mut rng, &format!("71{k}"), &["CT"], 2, 8, 8) {
            m.archive.ingest_part10(&spec.part10()).unwrap();
        }
    }
    let spec = JobSpec {
        workflow: "local_train".into(),
        participants: participants(&cluster),
        rounds: 3,
        lr: 0.1,
        init_params: vec![0.0; 5],
        quorum: None,
    };
    let job = cluster.coordinator().run_federated_job(spec, "tester").unwrap();
    assert_eq!(job.history.len(), 3);
    let wire = cluster.transport.captured();
    assert!(count(&wire, b"/params") >= 6);
    assert_eq!(count(&wire, b"DICM"), 0);
    assert_eq!(count(&wire, &[0xE0, 0x7F, 0x10, 0x00]), 0);

    // A correctly signed request whose body is a Part-10 file.
    let coordinator = cluster.coordinator();
    let site1 = &cluster.members[1].node;
    let link = site1.link(coordinator.instance_id()).unwrap();
    let part10 = series_fixture(&mut rng, "72", &["CT"], 1, 4, 4)[0].part10();
    let path = format!("/fed/v1/jobs/{}/round/0/result", job.job_id);
    let env = sign_envelope(&link.shared_secret, "POST", &path, &part10, Utc::now().timestamp());
    let req = FedRequest {
        method: "POST".into(),
        path,
        headers: BTreeMap::from([
            (SIGNATURE_HEADER.to_string(), env.header_value()),
            (INSTANCE_HEADER.to_string(), site1.instance_id().to_string()),
        ]),
        body: part10,
    };
    let before = cluster.members[0].audit.len();
    let resp = coordinator.handle(&req);
    assert_eq!(resp.status, 422);
    assert_eq!(count(&resp.body, b"DICM"), 0);
    let events = cluster.members[0].audit.events().unwrap();
    let new: Vec<_> = events[before as usize..].iter().filter(|e| e.action == "fed.guard").collect();
    assert_eq!(new.len(), 1);
    assert!(new[0].resource.contains("Part-10"));
    minipacs_core::auth::verify_chain(&events).unwrap();
}

#[test]
fn mutated_envelopes_rejected_with_their_class() {
    let mut rng = StdRng::seed_from_u64(77);
    let secret = SharedSecret::random();
    let cache = ReplayCache::new();
    let now = 1_800_000_000i64;
    let mut accepted = Vec::new();
    for i in 0..1000 {
        let body: Vec<u8> = (0..rng.gen_range(0..64)).map(|_| rng.gen()).collect();
        let mut nonce = [0u8; 16];
        rng.fill(&mut nonce);
        let path = format!("/fed/v1/jobs/j{i}/round/0/params");
        let fresh = sign_envelope_at(&secret, "POST", &path, &body, now - rng.gen_range(0..=300), nonce);
        match i % 4 {
            0 => {
                let mut env = fresh.clone();
                match rng.gen_range(0..4) {
                    0 if !env.body.is_empty() => {
                        let k = rng.gen_range(0..env.body.len());
                        env.body[k] ^= 1 << rng.gen_range(0..8);
                    }
                    1 => env.nonce[rng.gen_range(0..16)] ^= 1 << rng.gen_range(0..8),
                    2 => env.timestamp ^= 1 << rng.gen_range(0..20),
                    _ => env.signature[rng.gen_range(0..32)] ^= 1 << rng.gen_range(0..8),
                }
                let r = verify_envelope(&secret, &env, now, &cache, "peer");
                assert!(matches!(r, Err(FederationError::BadSignature)), "{r:?}");
            }
            1 => {
                let skew = if rng.gen() { rng.gen_range(301..100_000) } else { -rng.gen_range(301..100_000) };
                let env = sign_envelope_at(&secret, "POST", &path, &body, now - skew, nonce);
                let r = verify_envelope(&secret, &env, now, &cache, "peer");
                assert!(matches!(r, Err(FederationError::ClockSkew)), "{r:?}");
            }
            2 => {
                assert!(verify_envelope(&secret, &fresh, now, &cache, "peer").is_ok());
                let later = fresh.timestamp + rng.gen_range(-300..=300);
                let r = verify_envelope(&secret, &fresh, later, &cache, "peer");
                assert!(matches!(r, Err(FederationError::ReplayDetected)), "{r:?}");
            }
            _ => accepted.push(fresh),
        }
    }
    for env in &accepted {
        // Through the header round trip the wire uses.
        let parsed = SignedEnvelope::from_parts(&env.method, &env.path, &env.header_value(), env.body.clone()).unwrap();
        assert_eq!(verify_envelope(&secret, &parsed, now, &cache, "peer").unwrap(), &env.body[..]);
    }
}

#[test]
fn invites_expire_and_are_single_use() {
    let dir = tempfile::tempdir().unwrap();
    let manual = ManualClock::new(Utc.with_ymd_and_hms(2026, 3, 1, 12, 0, 0).unwrap());
    let cluster = LocalCluster::build(dir.path(), 3, manual.clock()).unwrap();
    let (a, b, c) = (&cluster.members[0], &cluster.members[1], &cluster.members[2]);
    assert_eq!(a.node.links().len(), 2);
    assert_eq!(b.node.links()[0].remote_instance_id, a.node.instance_id());

    let invite = b.node.create_invite().unwrap();
    c.node.link_instances(&b.endpoint, &invite.token).unwrap();
    let again = a.node.link_instances(&b.endpoint, &invite.token);
    assert!(matches!(again, Err(FederationError::InviteAlreadyUsed)), "{again:?}");

    let late = b.node.create_invite().unwrap();
    manual.advance(Duration::minutes(16));
    let r = a.node.link_instances(&b.endpoint, &late.token);
    assert!(matches!(r, Err(FederationError::InviteExpired)), "{r:?}");
    assert!(a.node.links().iter().all(|l| l.remote_instance_id != b.node.instance_id() || l.link_id == "site1"));

    let bogus = a.node.link_instances(&b.endpoint, &"ab".repeat(32));
    assert!(matches!(bogus, Err(FederationError::UnknownInvite)), "{bogus:?}");
    let offline = a.node.link_instances("inproc://nowhere", &invite.token);
    assert!(matches!(offline, Err(FederationError::EndpointUnreachable(_))));
}

#[test]
fn links_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let ids = {
        let cluster = LocalCluster::build(dir.path(), 2, clock::system()).unwrap();
        cluster.coordinator().links()
    };
    let cluster = LocalCluster::build_existing(dir.path(), 2, clock::system()).unwrap();
    assert_eq!(cluster.coordinator().links(), ids);
}

#[test]
fn quorum_and_rejection() {
    let dir = tempfile::tempdir().unwrap();
    let (cluster, _, _) = partitioned_cluster(dir.path(), 14, 2, 60);
    let base = JobSpec {
        workflow: "local_train".into(),
        participants: participants(&cluster),
        rounds: 2,
        lr: 0.1,
        init_params: vec![0.0; 2],
        quorum: None,
    };
    let coordinator: &Arc<_> = cluster.coordinator();

    cluster.transport.set_offline(&cluster.members[2].endpoint, true);
    let err = coordinator.run_federated_job(base.clone(), "tester").unwrap_err();
    assert!(matches!(err, FederationError::QuorumNotMet { round: 0, respondents: 2, quorum: 3 }), "{err:?}");
    let aborted = coordinator.jobs().into_iter().find(|j| j.state == JobState::Aborted).unwrap();
    assert_eq!(aborted.history[0].missing, vec!["site2".to_string()]);
    assert_eq!(aborted.error_code.as_deref(), Some("QuorumNotMet"));

    let relaxed = JobSpec { quorum: Some(2), ..base.clone() };
    let job = coordinator.run_federated_job(relaxed, "tester").unwrap();
    assert_eq!(job.state, JobState::Completed);
    assert!(job.history.iter().all(|r| r.results.len() == 2));
    cluster.transport.set_offline(&cluster.members[2].endpoint, false);

    // site1 loses its data, so its training run fails and it says so.
    cluster.members[1].archive.store_object("datasets", "train.csv", "text/csv", b"x0,x1,y\n").unwrap();
    let err = coordinator.run_federated_job(base.clone(), "tester").unwrap_err();
    match err {
        FederationError::ParticipantRejected { participant, .. } => assert_eq!(participant, "site1"),
        other => panic!("{other:?}"),
    }

    let bad = JobSpec { participants: vec!["nobody".into()], ..base.clone() };
    assert!(matches!(coordinator.run_federated_job(bad, "t"), Err(FederationError::UnknownLink(_))));
    let bad = JobSpec { workflow: "threshold_segmentation".into(), ..base };
    assert!(matches!(coordinator.run_federated_job(bad, "t"), Err(FederationError::CapabilityMissing(_))));
}
