use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::rngs::StdRng;
use rand::seq::IndexedRandom;
use rand::SeedableRng;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;
use wheelgen_core::exemplars::build_corpus;
use wheelgen_core::{ConceptGroup, GenerationRequest, ImageRef, ImageTensor, SymmetryConfig};
use wheelgen_service::{router, AppState, JobState, Service, ServiceConfig};

const CANVAS: usize = 32;

fn config(dir: &TempDir) -> ServiceConfig {
    ServiceConfig {
        store: dir.path().to_path_buf(),
        canvas: CANVAS,
        seed_corpus: 60,
        ..ServiceConfig::default()
    }
}

struct Reply {
    status: StatusCode,
    content_type: Option<String>,
    bytes: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }
}

async fn send(app: &Router, method: Method, uri: &str, body: Vec<u8>) -> Reply {
    let req = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let content_type = res.headers().get("content-type").map(|v| v.to_str().unwrap().to_string());
    let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
    Reply {
        status,
        content_type,
        bytes,
    }
}

async fn get(app: &Router, uri: &str) -> Reply {
    send(app, Method::GET, uri, Vec::new()).await
}

async fn post(app: &Router, uri: &str, body: &Value) -> Reply {
    send(app, Method::POST, uri, serde_json::to_vec(body).unwrap()).await
}

async fn session(app: &Router) -> String {
    let r = send(app, Method::POST, "/sessions", Vec::new()).await;
    assert_eq!(r.status, StatusCode::CREATED);
    r.json()["id"].as_str().unwrap().to_string()
}

async fn upload(app: &Router, img: &ImageTensor) -> ImageRef {
    let r = send(app, Method::POST, "/images", img.to_png().unwrap()).await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&r.bytes));
    serde_json::from_value(r.json()["image"].clone()).unwrap()
}

async fn wait_job(app: &Router, id: &str) -> Value {
    let started = Instant::now();
    loop {
        let r = get(app, &format!("/jobs/{id}")).await;
        assert_eq!(r.status, StatusCode::OK);
        let job = r.json();
        match job["state"].as_str().unwrap() {
            "done" | "failed" => return job,
            _ => {}
        }
        assert!(started.elapsed() < Duration::from_secs(300), "job {id} stuck: {job}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

async fn run_to_record(app: &Router, uri: &str, body: &Value) -> Value {
    let r = post(app, uri, body).await;
    assert_eq!(r.status, StatusCode::ACCEPTED, "{}", String::from_utf8_lossy(&r.bytes));
    let job = wait_job(app, r.json()["job_id"].as_str().unwrap()).await;
    assert_eq!(job["state"], "done", "{job}");
    job
}

fn wheels(n: usize) -> Vec<ImageTensor> {
    build_corpus(n, 11, CANVAS).unwrap().items.into_iter().map(|i| i.image).collect()
}

/// Two keyword groups with two weighted images each, k = 4, four outputs.
async fn two_by_two(app: &Router) -> GenerationRequest {
    let imgs = wheels(4);
    let mut refs = Vec::new();
    for img in &imgs {
        refs.push(upload(app, img).await);
    }
    let groups = vec![
        ConceptGroup::new("bold")
            .with_image("a", refs[0].clone(), 1.0)
            .with_image("b", refs[1].clone(), 0.5),
        ConceptGroup::new("dynamic")
            .with_image("c", refs[2].clone(), 1.0)
            .with_image("d", refs[3].clone(), 0.5),
    ];
    let mut req = GenerationRequest::new(groups, SymmetryConfig::for_canvas(CANVAS, 4), "");
    req.output_count = 4;
    req.seed = 7;
    req
}

#[tokio::test]
async fn sessions() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(config(&dir)).unwrap();
    let app = svc.router();
    let a = session(&app).await;
    let b = session(&app).await;
    assert_ne!(a, b);
    let named = post(&app, "/sessions", &json!({ "name": "rims" })).await;
    assert_eq!(named.status, StatusCode::CREATED);
    assert_eq!(named.json()["name"], "rims");
    assert_eq!(send(&app, Method::POST, "/sessions", b"{not json".to_vec()).await.status, StatusCode::BAD_REQUEST);
    assert_eq!(post(&app, "/sessions", &json!({ "name": 3 })).await.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, &format!("/sessions/{a}")).await.status, StatusCode::OK);
    assert_eq!(get(&app, "/sessions/nope").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn generate_and_fetch_images() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(config(&dir)).unwrap();
    let app = svc.router();
    let sid = session(&app).await;
    let req = two_by_two(&app).await;
    let job = run_to_record(&app, &format!("/sessions/{sid}/generate"), &serde_json::to_value(&req).unwrap()).await;

    let urls: Vec<&str> = job["outputs"].as_array().unwrap().iter().map(|u| u.as_str().unwrap()).collect();
    assert_eq!(urls.len(), 4);
    for url in &urls {
        let r = get(&app, url).await;
        assert_eq!(r.status, StatusCode::OK);
        assert_eq!(r.content_type.as_deref(), Some("image/png"));
        let img = ImageTensor::from_encoded(&r.bytes).unwrap();
        assert_eq!((img.width(), img.height()), (CANVAS, CANVAS));
    }
    // the empty backend_id was filled with the deployment default
    assert_eq!(job["request"]["backend_id"], "stub-mixture");

    let rid = job["record_id"].as_str().unwrap();
    let rec = get(&app, &format!("/generations/{rid}")).await.json();
    assert_eq!(rec["output_urls"].as_array().unwrap().len(), 4);
    assert_eq!(rec["request"]["seed"], 7);
    let session = get(&app, &format!("/sessions/{sid}")).await.json();
    assert_eq!(session["jobs"], json!([job["id"]]));

    let replay = send(&app, Method::POST, &format!("/generations/{rid}/replay"), Vec::new()).await;
    assert_eq!(replay.json()["identical"], true);
}

#[tokio::test]
async fn generate_rejections() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(config(&dir)).unwrap();
    let app = svc.router();
    let sid = session(&app).await;
    let uri = format!("/sessions/{sid}/generate");
    let base = GenerationRequest::new(vec![ConceptGroup::new("bold")], SymmetryConfig::for_canvas(CANVAS, 4), "");

    let mut four = base.clone();
    four.concepts = ["bold", "dynamic", "simple", "sharp"].iter().map(|k| ConceptGroup::new(k)).collect();
    let r = post(&app, &uri, &serde_json::to_value(&four).unwrap()).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(r.json()["violations"].as_array().unwrap().iter().any(|v| v["field"] == "concepts"));

    let mut unknown = base.clone();
    unknown.backend_id = "no-such-model".into();
    let r = post(&app, &uri, &serde_json::to_value(&unknown).unwrap()).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let v = r.json();
    assert_eq!(v["violations"][0]["field"], "backend_id", "{v}");

    let mut k1 = base.clone();
    k1.symmetry.k = 1;
    assert_eq!(post(&app, &uri, &serde_json::to_value(&k1).unwrap()).await.status, StatusCode::UNPROCESSABLE_ENTITY);

    let missing = ImageRef::for_png(b"never uploaded", &wheels(1)[0]);
    let mut ghost = base.clone();
    ghost.concepts[0] = ConceptGroup::new("bold").with_image("x", missing, 1.0);
    let r = post(&app, &uri, &serde_json::to_value(&ghost).unwrap()).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["violations"][0]["field"], "concepts[0].inspirations[0].image");

    let r = post(&app, "/sessions/nope/generate", &serde_json::to_value(&base).unwrap()).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let r = send(&app, Method::POST, &uri, b"[1,2".to_vec()).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(post(&app, &uri, &json!({ "concepts": [] })).await.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, "/jobs/nope").await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn jobs_wait_in_fifo_order_without_workers() {
    let dir = tempfile::tempdir().unwrap();
    let state = Arc::new(AppState::open(config(&dir)).unwrap());
    let app = router(state.clone());
    let sid = session(&app).await;
    let req = GenerationRequest::new(vec![ConceptGroup::new("bold")], SymmetryConfig::for_canvas(CANVAS, 4), "");
    let mut ids = Vec::new();
    for seed in 0..2 {
        let mut r = req.clone();
        r.seed = seed;
        let reply = post(&app, &format!("/sessions/{sid}/generate"), &serde_json::to_value(&r).unwrap()).await;
        assert_eq!(reply.status, StatusCode::ACCEPTED);
        ids.push(reply.json()["job_id"].as_str().unwrap().to_string());
    }
    let queued = get(&app, &format!("/jobs/{}", ids[0])).await.json();
    assert_eq!(queued["state"], "queued");
    assert!(queued.get("record_id").is_none());

    let job = state.jobs.next().unwrap();
    assert_eq!(job.id, ids[0]);
    assert_eq!(get(&app, &format!("/jobs/{}", ids[0])).await.json()["state"], "running");
    let outcome = state.run_job(&job);
    let done = state.jobs.finish(&job.id, outcome);
    assert_eq!(done.state, JobState::Done);
    assert_eq!(done.outputs.len(), 1);
    assert_eq!(get(&app, &format!("/jobs/{}", ids[1])).await.json()["state"], "queued");
}

#[tokio::test]
async fn feedback_builds_lineage() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(config(&dir)).unwrap();
    let app = svc.router();
    let sid = session(&app).await;
    let mut req = two_by_two(&app).await;
    // a keyword-only group so exemplars get sampled
    req.concepts.push(ConceptGroup::new("simple"));
    req.output_count = 1;
    let root = run_to_record(&app, &format!("/sessions/{sid}/generate"), &serde_json::to_value(&req).unwrap()).await;
    let root_id = root["record_id"].as_str().unwrap().to_string();

    let lin = get(&app, &format!("/generations/{root_id}/lineage")).await.json();
    assert_eq!(lin["chain"].as_array().unwrap().len(), 1);

    let removal = json!({ "removed_inspiration_ids": ["b"], "note": "drop the faint one" });
    let child = run_to_record(&app, &format!("/generations/{root_id}/feedback"), &removal).await;
    let child_id = child["record_id"].as_str().unwrap().to_string();
    let child_rec = get(&app, &format!("/generations/{child_id}")).await.json();
    assert_eq!(child_rec["parent_id"], root_id.as_str());
    let ids: Vec<&str> = child_rec["request"]["concepts"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|g| g["inspirations"].as_array().unwrap())
        .map(|i| i["id"].as_str().unwrap())
        .collect();
    assert_eq!(ids, vec!["a", "c", "d"]);

    // empty delta: same request, new seed
    let grand = run_to_record(&app, &format!("/generations/{child_id}/feedback"), &json!({})).await;
    let grand_id = grand["record_id"].as_str().unwrap().to_string();
    let mut parent_req = child_rec["request"].clone();
    let mut grand_req = grand["request"].clone();
    assert_ne!(parent_req["seed"], grand_req["seed"]);
    parent_req["seed"] = json!(0);
    grand_req["seed"] = json!(0);
    assert_eq!(parent_req, grand_req);

    let lin = get(&app, &format!("/generations/{grand_id}/lineage")).await.json();
    let chain = lin["chain"].as_array().unwrap();
    let order: Vec<&str> = chain.iter().map(|e| e["id"].as_str().unwrap()).collect();
    assert_eq!(order, vec![root_id.as_str(), child_id.as_str(), grand_id.as_str()]);
    assert_eq!(chain[1]["feedback"]["note"], "drop the faint one");
    // exemplar ids match the provenance stored with each record
    for entry in chain {
        let rec = get(&app, &format!("/generations/{}", entry["id"].as_str().unwrap())).await.json();
        let mut stored: Vec<Value> = Vec::new();
        for g in rec["resolved_conditioning"]["groups"].as_array().unwrap() {
            stored.extend(g["exemplar_ids"].as_array().unwrap().iter().cloned());
        }
        if let Some(t) = rec["resolved_conditioning"]["template"].get("exemplar_id").filter(|t| !t.is_null()) {
            stored.push(t.clone());
        }
        assert!(!stored.is_empty());
        assert_eq!(entry["exemplar_ids"], Value::Array(stored));
        assert_eq!(entry["resolved_conditioning"], rec["resolved_conditioning"]);
    }

    let r = post(&app, &format!("/generations/{root_id}/feedback"), &json!({ "removed_inspiration_ids": ["zz"] })).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    let r = send(&app, Method::POST, &format!("/generations/{root_id}/feedback"), b"{".to_vec()).await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);

    assert_eq!(send(&app, Method::DELETE, &format!("/generations/{child_id}"), Vec::new()).await.status, StatusCode::CONFLICT);
    assert_eq!(send(&app, Method::DELETE, &format!("/generations/{grand_id}"), Vec::new()).await.status, StatusCode::NO_CONTENT);
    assert_eq!(get(&app, &format!("/generations/{grand_id}")).await.status, StatusCode::NOT_FOUND);
    let r = post(&app, &format!("/generations/{grand_id}/feedback"), &json!({})).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, &format!("/generations/{grand_id}/lineage")).await.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn restart_keeps_records_images_and_queued_jobs() {
    let dir = tempfile::tempdir().unwrap();
    let (rid, urls, pngs, pending) = {
        let svc = Service::start(config(&dir)).unwrap();
        let app = svc.router();
        let sid = session(&app).await;
        let req = two_by_two(&app).await;
        let job = run_to_record(&app, &format!("/sessions/{sid}/generate"), &serde_json::to_value(&req).unwrap()).await;
        let urls: Vec<String> = job["outputs"].as_array().unwrap().iter().map(|u| u.as_str().unwrap().to_string()).collect();
        let mut pngs = Vec::new();
        for u in &urls {
            pngs.push(get(&app, u).await.bytes);
        }
        svc.shutdown();

        // queued while no worker runs
        let state = Arc::new(AppState::open(config(&dir)).unwrap());
        let app = router(state);
        let r = post(&app, &format!("/sessions/{sid}/generate"), &serde_json::to_value(&req).unwrap()).await;
        assert_eq!(r.status, StatusCode::ACCEPTED);
        (job["record_id"].as_str().unwrap().to_string(), urls, pngs, r.json()["job_id"].as_str().unwrap().to_string())
    };

    let svc = Service::start(config(&dir)).unwrap();
    let app = svc.router();
    assert_eq!(get(&app, &format!("/generations/{rid}")).await.status, StatusCode::OK);
    for (u, before) in urls.iter().zip(&pngs) {
        assert_eq!(&get(&app, u).await.bytes, before);
    }
    let replay = send(&app, Method::POST, &format!("/generations/{rid}/replay"), Vec::new()).await.json();
    assert_eq!(replay["identical"], true);
    let job = wait_job(&app, &pending).await;
    assert_eq!(job["state"], "done");
    // same snapshot, same seed, same pixels
    assert_eq!(job["outputs"].as_array().unwrap().iter().map(|u| u.as_str().unwrap()).collect::<Vec<_>>(), urls);
}

#[tokio::test]
async fn images_and_backends() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(config(&dir)).unwrap();
    let app = svc.router();
    let img = &wheels(1)[0];
    let r = upload(&app, img).await;
    let again = upload(&app, img).await;
    assert_eq!(r, again);
    let fetched = get(&app, &format!("/images/{}.png", r.sha256)).await;
    assert_eq!(fetched.bytes, img.to_png().unwrap());
    assert_eq!(send(&app, Method::POST, "/images", b"GIF89a".to_vec()).await.status, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, &format!("/images/{}", "0".repeat(64))).await.status, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/images/..%2Fjobs").await.status, StatusCode::NOT_FOUND);

    let b = get(&app, "/backends").await.json();
    assert_eq!(b["canvas"], CANVAS);
    let ids: BTreeMap<&str, bool> =
        b["backends"].as_array().unwrap().iter().map(|x| (x["id"].as_str().unwrap(), x["default"].as_bool().unwrap())).collect();
    assert_eq!(ids, BTreeMap::from([("stub-mixture", true), ("stub-zero", false)]));
}

/// Independent tally: top ceil(pct%) of the wheels with any vote, ties at the cut included.
fn oracle(counts: &BTreeMap<String, u32>, pct: usize) -> (Vec<String>, u32) {
    let mut voted: Vec<(&String, u32)> = counts.iter().filter(|(_, c)| **c > 0).map(|(k, c)| (k, *c)).collect();
    voted.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
    let take = (pct * voted.len()).div_ceil(100).max(1);
    let threshold = voted[take - 1].1;
    (voted.iter().filter(|(_, c)| *c >= threshold).map(|(k, _)| k.to_string()).collect(), threshold)
}

#[tokio::test]
async fn annotation_quorum_and_aggregation() {
    let dir = tempfile::tempdir().unwrap();
    let svc = Service::start(config(&dir)).unwrap();
    let app = svc.router();

    let before = get(&app, "/keywords/dynamic/exemplars").await.json();
    assert_eq!(before["below_quorum"], true);
    assert_eq!(before["exemplars"], json!([]));
    assert_eq!(get(&app, "/keywords/no-such-word/exemplars").await.status, StatusCode::NOT_FOUND);

    let r = post(&app, "/annotation", &json!({ "id": "dyn-1", "keyword": "Dynamic" })).await;
    assert_eq!(r.status, StatusCode::CREATED);
    let round = r.json();
    let candidates: Vec<String> = serde_json::from_value(round["task"]["candidate_wheel_ids"].clone()).unwrap();
    assert_eq!(candidates.len(), 25);
    assert_eq!(round["quorum"], 16);
    assert_eq!(post(&app, "/annotation", &json!({ "id": "dyn-1", "keyword": "dynamic" })).await.status, StatusCode::CONFLICT);
    let r = post(&app, "/annotation", &json!({ "keyword": "dynamic", "candidates": ["ghost"] })).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    let mut rng = StdRng::seed_from_u64(3);
    let mut tally: BTreeMap<String, u32> = BTreeMap::new();
    // favour the first few candidates so the top is not one big tie
    let weights: Vec<(usize, u32)> = (0..25).map(|i| (i, if i < 4 { 6 } else { 1 })).collect();
    for rater in 0..16 {
        let mut picks: Vec<String> = Vec::new();
        while picks.len() < 10 {
            let (i, _) = weights.choose_weighted(&mut rng, |w| w.1).unwrap();
            if !picks.contains(&candidates[*i]) {
                picks.push(candidates[*i].clone());
            }
        }
        for p in &picks {
            *tally.entry(p.clone()).or_insert(0) += 1;
        }
        let r = post(&app, "/annotation/dyn-1/votes", &json!({ "rater_id": format!("r{rater}"), "selected": picks })).await;
        assert_eq!(r.status, StatusCode::OK, "{}", String::from_utf8_lossy(&r.bytes));
        if rater == 14 {
            let mid = get(&app, "/keywords/dynamic/exemplars").await.json();
            assert_eq!(mid["below_quorum"], true);
            assert_eq!(mid["exemplars"], json!([]));
            assert!(mid["explanation"].as_str().unwrap().contains("15 of the 16"));
        }
        if rater == 0 {
            let dup = post(&app, "/annotation/dyn-1/votes", &json!({ "rater_id": "r0", "selected": picks })).await;
            assert_eq!(dup.status, StatusCode::CONFLICT);
            let short = post(&app, "/annotation/dyn-1/votes", &json!({ "rater_id": "x", "selected": [candidates[0]] })).await;
            assert_eq!(short.status, StatusCode::UNPROCESSABLE_ENTITY);
        }
    }
    let status = get(&app, "/annotation/dyn-1").await.json();
    assert_eq!(status["votes"]["rater_count"], 16);
    let served: BTreeMap<String, u32> = serde_json::from_value(status["votes"]["counts"].clone()).unwrap();
    let tally_full: BTreeMap<String, u32> = candidates.iter().map(|c| (c.clone(), tally.get(c).copied().unwrap_or(0))).collect();
    assert_eq!(served, tally_full);

    let (expected, threshold) = oracle(&tally, 5);
    let after = get(&app, "/keywords/dynamic/exemplars").await.json();
    assert_eq!(after["below_quorum"], false);
    let got: Vec<String> = after["exemplars"].as_array().unwrap().iter().map(|e| e["id"].as_str().unwrap().to_string()).collect();
    assert_eq!(got, expected);
    assert_eq!(after["threshold_votes"], threshold);
    let first = &after["exemplars"][0];
    assert_eq!(first["votes"], tally[first["id"].as_str().unwrap()]);
    assert_eq!(get(&app, first["image_url"].as_str().unwrap()).await.content_type.as_deref(), Some("image/png"));

    let kws = get(&app, "/keywords").await.json();
    let dynamic = kws["keywords"].as_array().unwrap().iter().find(|k| k["keyword"] == "dynamic").unwrap().clone();
    assert_eq!(dynamic["exemplars"], expected.len());
    assert_eq!(post(&app, "/annotation/nope/votes", &json!({ "rater_id": "a", "selected": [] })).await.status, StatusCode::NOT_FOUND);

    // the aggregated set persists across a restart
    svc.shutdown();
    let svc = Service::start(config(&dir)).unwrap();
    let again = get(&svc.router(), "/keywords/dynamic/exemplars").await.json();
    assert_eq!(again["exemplars"], after["exemplars"]);
}
