mod common;

use std::time::Duration;

use common::{poll, start_node, Client, TestNode};
use minipacs_core::auth::Role;
use minipacs_core::federation::LOCAL_PARTICIPANT;
use minipacs_core::fixtures::{linear_regression, regression_csv};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde_json::{json, Value};

fn with_training_data(node: &TestNode, x: &[Vec<f64>], y: &[f64]) {
    node.server.platform().archive.store_object("datasets", "train.csv", "text/csv", &regression_csv(x, y)).unwrap();
}

fn link(from: &Client, to: &TestNode, to_admin: &Client) -> (u16, Value) {
    let (status, invite) = to_admin.post_json("/federation/invites", &json!({}));
    assert_eq!(status, 201, "{invite}");
    from.post_json("/federation/links", &json!({ "endpoint": to.server.base_url(), "token": invite["token"] }))
}

#[test]
fn linked_nodes_train_together() {
    let (a, b) = (start_node(), start_node());
    let (admin_a, admin_b) = (a.user("ada", &[Role::Admin]), b.user("bo", &[Role::Admin]));
    let (status, linked) = link(&admin_a, &b, &admin_b);
    assert_eq!(status, 201, "{linked}");

    let (_, links_a) = admin_a.get("/federation/links");
    let (_, links_b) = admin_b.get("/federation/links");
    assert_eq!(links_a["links"].as_array().unwrap().len(), 1);
    assert_eq!(links_b["links"].as_array().unwrap().len(), 1);
    assert_eq!(links_a["links"][0]["remote_instance_id"], links_b["instance_id"]);
    assert_eq!(links_b["links"][0]["remote_instance_id"], links_a["instance_id"]);
    assert!(links_a["links"][0].get("shared_secret").is_none());
    assert!(!serde_json::to_string(&links_b).unwrap().contains("secret"));

    let mut rng = StdRng::seed_from_u64(41);
    let (x, y) = linear_regression(&mut rng, 3, 120);
    with_training_data(&a, &x[..60], &y[..60]);
    with_training_data(&b, &x[60..], &y[60..]);
    let remote = linked["remote_instance_id"].as_str().unwrap();
    let spec = json!({
        "workflow": "local_train", "participants": [LOCAL_PARTICIPANT, remote],
        "rounds": 2, "lr": 0.1, "init_params": [0.0, 0.0, 0.0],
    });
    let (status, job) = admin_a.post_json("/federation/jobs", &spec);
    assert_eq!(status, 202, "{job}");
    let id = job["job_id"].as_str().unwrap().to_string();
    let done = poll(Duration::from_secs(30), || {
        let (_, j) = admin_a.get(&format!("/federation/jobs/{id}"));
        (j["state"] != "running").then_some(j)
    });
    assert_eq!(done["state"], "completed", "{done}");
    let history = done["history"].as_array().unwrap();
    assert_eq!(history.len(), 2);
    for round in history {
        let counts: Vec<u64> = round["results"].as_array().unwrap().iter().map(|r| r["sample_count"].as_u64().unwrap()).collect();
        assert_eq!(counts, [60, 60], "{round}");
    }
    let (_, jobs) = admin_a.get("/federation/jobs");
    assert!(jobs.as_array().unwrap().iter().any(|j| j["job_id"] == id.as_str()));
    assert_eq!(admin_a.get("/federation/jobs/nope").0, 404);

    let viewer = a.user("vic", &[Role::Viewer]);
    assert_eq!(viewer.get("/federation/jobs").0, 200);
    assert_eq!(viewer.post_json("/federation/jobs", &spec).0, 403);
}

#[test]
fn invites_are_single_use_and_tokens_must_match() {
    let (a, b, c) = (start_node(), start_node(), start_node());
    let (admin_a, admin_b, admin_c) =
        (a.user("ada", &[Role::Admin]), b.user("bo", &[Role::Admin]), c.user("cy", &[Role::Admin]));
    let (_, invite) = admin_b.post_json("/federation/invites", &json!({}));
    let body = json!({ "endpoint": b.server.base_url(), "token": invite["token"] });
    assert_eq!(admin_a.post_json("/federation/links", &body).0, 201);
    let (status, reused) = admin_c.post_json("/federation/links", &body);
    assert!(status >= 400, "{reused}");

    let (_, fresh) = admin_b.post_json("/federation/invites", &json!({}));
    let mut forged = fresh["token"].as_str().unwrap().to_string();
    let last = if forged.ends_with('0') { "1" } else { "0" };
    forged.replace_range(forged.len() - 1.., last);
    let (status, body) =
        admin_c.post_json("/federation/links", &json!({ "endpoint": b.server.base_url(), "token": forged }));
    assert!(status >= 400, "{body}");

    assert_eq!(admin_b.get("/federation/links").1["links"].as_array().unwrap().len(), 1);
    assert_eq!(admin_c.get("/federation/links").1["links"], json!([]));
    // The untouched invite still works.
    let (status, body) =
        admin_c.post_json("/federation/links", &json!({ "endpoint": b.server.base_url(), "token": fresh["token"] }));
    assert_eq!(status, 201, "{body}");
    let (status, body) = admin_c.post_json("/federation/links", &json!({ "endpoint": b.server.base_url() }));
    assert_eq!((status, body["error_code"].as_str()), (400, Some("InvalidBody")));
}
