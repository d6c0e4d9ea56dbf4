mod common;

use common::start_node;
use minipacs_core::auth::{Outcome, Role, SYSTEM};
use minipacs_core::dimse::{scu_echo, scu_send, AssociationConfig, DimseError, STATUS_SUCCESS};
use minipacs_core::fixtures::{series_fixture, InstanceSpec};
use rand::rngs::StdRng;
use rand::SeedableRng;

#[test]
fn stored_instances_are_queryable_and_audited_as_system() {
    let node = start_node();
    let scu = AssociationConfig::new(&node.server.platform().config.ae_title, "MODALITY1", 16384).unwrap();
    let mut rng = StdRng::seed_from_u64(11);
    let specs = series_fixture(&mut rng, "71", &["CT", "MR"], 3, 16, 16);
    let files: Vec<Vec<u8>> = specs.iter().map(InstanceSpec::part10).collect();

    let before = node.audit_len() as usize;
    let outcomes = scu_send(node.server.dimse_addr(), &scu, &files).unwrap();
    assert!(outcomes.iter().all(|o| o.status == STATUS_SUCCESS));

    let viewer = node.user("vic", &[Role::Viewer]);
    let (status, series) = viewer.get("/instances?level=series");
    assert_eq!((status, series["total"].as_u64()), (200, Some(2)));
    let (_, instances) = viewer.get("/instances?level=instance");
    let mut got: Vec<&str> =
        instances["results"].as_array().unwrap().iter().map(|r| r["sop_instance_uid"].as_str().unwrap()).collect();
    let mut want: Vec<&str> = specs.iter().map(|s| s.sop_uid.as_str()).collect();
    got.sort();
    want.sort();
    assert_eq!(got, want);

    let events = node.server.platform().audit.events().unwrap();
    let ingests: Vec<_> = events[before..].iter().filter(|e| e.action == "ingest").collect();
    assert_eq!(ingests.len(), 6);
    for (e, s) in ingests.iter().zip(&specs) {
        assert_eq!((e.principal.as_str(), e.outcome), (SYSTEM, Outcome::Allowed));
        assert_eq!(e.resource, format!("instance:{}", s.sop_uid));
    }
}

#[test]
fn associations_for_another_ae_are_rejected() {
    let node = start_node();
    let addr = node.server.dimse_addr();
    let wrong = AssociationConfig::new("SOMEONEELSE", "MODALITY1", 16384).unwrap();
    assert!(matches!(scu_echo(addr, &wrong), Err(DimseError::AssociationRejected(_))));
    let right = AssociationConfig::new(&node.server.platform().config.ae_title, "MODALITY1", 16384).unwrap();
    assert_eq!(scu_echo(addr, &right).unwrap(), STATUS_SUCCESS);
    assert_eq!(node.audit_len(), 0);
}
