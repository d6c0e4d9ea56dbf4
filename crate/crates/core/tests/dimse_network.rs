use std::net::TcpStream;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use minipacs_core::dicom::{parse_part10, TransferSyntax};
use minipacs_core::dimse::*;
use minipacs_core::fixtures::series_fixture;
use rand::rngs::StdRng;
use rand::SeedableRng;
use sha2::{Digest, Sha256};

#[derive(Default)]
struct MemorySink {
    files: Mutex<Vec<(String, Vec<u8>)>>,
    fail: bool,
}

impl InstanceSink for MemorySink {
    fn store(&self, uid: &str, part10: Vec<u8>) -> Result<(), String> {
        if self.fail {
            return Err("disk full".into());
        }
        self.files.lock().unwrap().push((uid.to_string(), part10));
        Ok(())
    }
}

fn server(max_pdu: u32, sink: Arc<MemorySink>) -> DimseServer {
    let cfg = AssociationConfig::new(DEFAULT_AE_TITLE, "ANY", max_pdu).unwrap();
    DimseServer::bind("127.0.0.1:0", cfg, sink).unwrap()
}

fn scu_cfg(max_pdu: u32) -> AssociationConfig {
    AssociationConfig::new(DEFAULT_AE_TITLE, "TESTSCU", max_pdu).unwrap()
}

#[test]
fn echo_round_trip_with_message_ids() {
    let sink = Arc::new(MemorySink::default());
    let srv = server(16384, sink);
    let proposals = [(VERIFICATION_SOP_CLASS.to_string(), vec!["1.2.840.10008.1.2".to_string()])];
    let mut assoc = ScuAssociation::open(srv.local_addr(), &scu_cfg(16384), &proposals).unwrap();
    for _ in 0..25 {
        assert_eq!(assoc.echo().unwrap(), STATUS_SUCCESS);
    }
    assoc.release().unwrap();
    assert_eq!(scu_echo(srv.local_addr(), &scu_cfg(16384)).unwrap(), STATUS_SUCCESS);
    srv.shutdown();
}

#[test]
fn large_store_is_byte_identical_across_pdu_sizes() {
    let mut rng = StdRng::seed_from_u64(11);
    let spec = series_fixture(&mut rng, "77", &["CT"], 1, 1024, 1024).remove(0);
    let file = spec.part10();
    assert!(file.len() > 2 * 1024 * 1024);
    let (_, original) = parse_part10(&file).unwrap();
    let mut digests = Vec::new();
    for max in [4096u32, 8192, 16384] {
        let sink = Arc::new(MemorySink::default());
        let srv = server(max, sink.clone());
        let out = scu_send(srv.local_addr(), &scu_cfg(max), std::slice::from_ref(&file)).unwrap();
        assert_eq!(out, vec![StoreOutcome { sop_instance_uid: spec.sop_uid.clone(), status: STATUS_SUCCESS }]);
        srv.shutdown();
        let files = sink.files.lock().unwrap();
        let (uid, received) = &files[0];
        assert_eq!(uid, &spec.sop_uid);
        let (_, ds) = parse_part10(received).unwrap();
        assert_eq!(ds, original);
        digests.push(Sha256::digest(received).to_vec());
    }
    assert_eq!(digests[0], digests[1]);
    assert_eq!(digests[1], digests[2]);
}

#[test]
fn sink_failure_reported_as_out_of_resources() {
    let sink = Arc::new(MemorySink { fail: true, ..Default::default() });
    let srv = server(16384, sink);
    let mut rng = StdRng::seed_from_u64(3);
    let file = series_fixture(&mut rng, "78", &["MR"], 1, 8, 8)[0].part10();
    let out = scu_send(srv.local_addr(), &scu_cfg(16384), &[file]).unwrap();
    assert_eq!(out[0].status, STATUS_OUT_OF_RESOURCES);
    srv.shutdown();
}

#[test]
fn implicit_file_transcoded_when_only_explicit_accepted() {
    let sink = Arc::new(MemorySink::default());
    let mut cfg = AssociationConfig::new(DEFAULT_AE_TITLE, "ANY", 16384).unwrap();
    cfg.supported_transfer_syntaxes = vec!["1.2.840.10008.1.2.1".to_string()];
    let srv = DimseServer::bind("127.0.0.1:0", cfg, sink.clone()).unwrap();
    let mut rng = StdRng::seed_from_u64(5);
    let mut spec = series_fixture(&mut rng, "79", &["CT"], 1, 16, 16).remove(0);
    spec.transfer_syntax = TransferSyntax::ImplicitVrLittleEndian;
    let file = spec.part10();
    let out = scu_send(srv.local_addr(), &scu_cfg(16384), std::slice::from_ref(&file)).unwrap();
    assert_eq!(out[0].status, STATUS_SUCCESS);
    srv.shutdown();
    let (meta, ds) = parse_part10(&sink.files.lock().unwrap()[0].1).unwrap();
    assert_eq!(meta.transfer_syntax_uid, "1.2.840.10008.1.2.1");
    assert_eq!(ds, parse_part10(&file).unwrap().1);
}

#[test]
fn wrong_called_ae_is_rejected() {
    let srv = server(16384, Arc::new(MemorySink::default()));
    let cfg = AssociationConfig::new("NOBODY", "TESTSCU", 16384).unwrap();
    match scu_echo(srv.local_addr(), &cfg) {
        Err(DimseError::AssociationRejected(rj)) => {
            assert_eq!((rj.result, rj.source, rj.reason), (1, 1, 7));
            assert_eq!(rj.describe(), "called AE not recognized");
        }
        other => panic!("expected rejection, got {other:?}"),
    }
    srv.shutdown();
}

#[test]
fn pdata_before_association_aborts() {
    let srv = server(16384, Arc::new(MemorySink::default()));
    let mut stream = TcpStream::connect(srv.local_addr()).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(5))).unwrap();
    let pdu = Pdu::PDataTf(PDataTf {
        pdvs: vec![Pdv { context_id: 1, is_command: true, is_last: true, data: vec![0; 8] }],
    });
    write_pdu(&mut stream, &pdu).unwrap();
    match read_pdu(&mut stream, 1024).unwrap() {
        Pdu::Abort(_) => {}
        other => panic!("expected abort, got {other:?}"),
    }
    drop(stream);
    std::thread::sleep(Duration::from_millis(100));
    let summaries = srv.summaries();
    assert!(summaries[0].error.as_deref().unwrap().contains("protocol violation"));
    srv.shutdown();
}

#[test]
fn idle_association_is_aborted() {
    let mut cfg = AssociationConfig::new(DEFAULT_AE_TITLE, "ANY", 16384).unwrap();
    cfg.idle_timeout = Duration::from_millis(200);
    let srv = DimseServer::bind("127.0.0.1:0", cfg, Arc::new(MemorySink::default())).unwrap();
    let proposals = [(VERIFICATION_SOP_CLASS.to_string(), vec!["1.2.840.10008.1.2".to_string()])];
    let mut assoc = ScuAssociation::open(srv.local_addr(), &scu_cfg(16384), &proposals).unwrap();
    std::thread::sleep(Duration::from_millis(500));
    assert!(assoc.echo().is_err());
    srv.shutdown();
}
