use std::sync::Arc;
use std::thread;
use std::time::Duration;

use balpm_core::harness::config::{ExperimentConfig, LabelMode, ModelConfig, SimData};
use balpm_core::harness::{load_data, run_experiment, DataSource, RunOptions, RunState};
use balpm_core::label_service::{ItemTexts, LabelQueue, ServiceLabelSource};
use balpm_core::sim::{CompletionsPerPrompt, FeatureLift, SimConfig};
use balpm_core::{PolicyConfig, TrainConfig};
use serde_json::{json, Value};
use tokio::sync::oneshot;

struct Server {
    base: String,
    stop: Option<oneshot::Sender<()>>,
    handle: Option<thread::JoinHandle<()>>,
}

impl Drop for Server {
    fn drop(&mut self) {
        if let Some(s) = self.stop.take() {
            let _ = s.send(());
        }
        if let Some(h) = self.handle.take() {
            h.join().unwrap();
        }
    }
}

fn start(queue: Arc<LabelQueue>, token: Option<&str>) -> Server {
    let (addr_tx, addr_rx) = std::sync::mpsc::channel();
    let (stop_tx, stop_rx) = oneshot::channel::<()>();
    let router = balpm_service::router(queue, token.map(str::to_string));
    let handle = thread::spawn(move || {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build().unwrap();
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
            addr_tx.send(listener.local_addr().unwrap()).unwrap();
            balpm_service::serve(listener, router, async {
                let _ = stop_rx.await;
            })
            .await
            .unwrap();
        });
    });
    let addr = addr_rx.recv().unwrap();
    Server { base: format!("http://{addr}"), stop: Some(stop_tx), handle: Some(handle) }
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn post(base: &str, path: &str, body: Value, headers: &[(&str, &str)]) -> (u16, Value) {
    let mut req = agent().post(format!("{base}{path}"));
    for (k, v) in headers {
        req = req.header(*k, *v);
    }
    let mut resp = req.header("content-type", "application/json").send(body.to_string()).unwrap();
    let code = resp.status().as_u16();
    (code, serde_json::from_str(&resp.body_mut().read_to_string().unwrap()).unwrap())
}

fn get(base: &str, path: &str) -> (u16, Value) {
    let mut resp = agent().get(format!("{base}{path}")).call().unwrap();
    let code = resp.status().as_u16();
    (code, serde_json::from_str(&resp.body_mut().read_to_string().unwrap()).unwrap())
}

fn batch(n: usize) -> Vec<ItemTexts> {
    (0..n)
        .map(|i| ItemTexts { tuple_id: format!("t{i}"), prompt_text: Some(format!("prompt {i}")), ..Default::default() })
        .collect()
}

#[test]
fn contract_over_http() {
    let queue = Arc::new(LabelQueue::in_memory(Duration::from_secs(60)));
    let srv = start(queue.clone(), None);
    let (code, body) = post(&srv.base, "/api/items/next", json!({"count": 2}), &[]);
    assert_eq!(code, 200);
    assert_eq!(body["items"], json!([]));
    assert_eq!(body["status"]["phase"], "idle");

    queue.publish_batch(0, batch(5)).unwrap();
    let (_, st) = get(&srv.base, "/api/status");
    assert_eq!((st["round"].as_u64(), st["pending"].as_u64()), (Some(0), Some(5)));

    let (_, body) = post(&srv.base, "/api/items/next", json!({"count": 2}), &[("X-Balpm-Session", "alice")]);
    let items = body["items"].as_array().unwrap();
    assert_eq!(items.len(), 2);
    assert_eq!(items[0]["prompt_text"], "prompt 0");
    assert_eq!(body["status"]["leased"], 2);
    let id = items[0]["tuple_id"].as_str().unwrap().to_string();

    let (code, err) = post(&srv.base, "/api/labels", json!({"tuple_id": id, "preference": 1, "session": "bob"}), &[]);
    assert_eq!((code, err["code"].as_str()), (409, Some("lease_held")));
    let (code, ok) = post(&srv.base, "/api/labels", json!({"tuple_id": id, "preference": 1, "session": "alice"}), &[]);
    assert_eq!((code, ok["ack"].as_str()), (200, Some("recorded")));
    let (code, ok) = post(&srv.base, "/api/labels", json!({"tuple_id": id, "preference": 1, "session": "alice"}), &[]);
    assert_eq!((code, ok["ack"].as_str()), (200, Some("duplicate")));
    let (code, err) = post(&srv.base, "/api/labels", json!({"tuple_id": id, "preference": 2, "session": "alice"}), &[]);
    assert_eq!((code, err["code"].as_str()), (409, Some("conflict")));
    assert_eq!(queue.label(&id), Some(true));

    let (code, err) = post(&srv.base, "/api/labels", json!({"tuple_id": "nope", "preference": "skip"}), &[]);
    assert_eq!((code, err["code"].as_str()), (404, Some("unknown_tuple")));
    let (code, err) = post(&srv.base, "/api/labels", json!({"tuple_id": id, "preference": 7}), &[]);
    assert_eq!((code, err["code"].as_str()), (400, Some("invalid_request")));
    let (code, _) = post(&srv.base, "/api/items/next", json!({"count": 0}), &[]);
    assert_eq!(code, 400);
}

#[test]
fn token_required_when_configured() {
    let queue = Arc::new(LabelQueue::in_memory(Duration::from_secs(60)));
    let srv = start(queue, Some("s3cret"));
    let (code, err) = get(&srv.base, "/api/status");
    assert_eq!((code, err["code"].as_str()), (401, Some("unauthorized")));
    let (code, _) = post(&srv.base, "/api/items/next", json!({"count": 1}), &[("X-Balpm-Token", "s3cret")]);
    assert_eq!(code, 200);
}

fn service_config(out: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Sim(SimData {
            env: SimConfig {
                n_prompts: 10,
                completions_per_prompt: CompletionsPerPrompt::Fixed(2),
                feature_lift: FeatureLift::Raw,
                ..Default::default()
            },
            val_prompts: 10,
            test_prompts: 10,
        }),
        labels: LabelMode::Service,
        policy: PolicyConfig { batch_size: 5, entropy: balpm_core::entropy::EntropyConfig { k: 2, d_x: 1.0 }, ..Default::default() },
        train: TrainConfig { max_epochs: 3, ..Default::default() },
        model: ModelConfig { ensemble_size: 2, hidden: vec![4] },
        rounds: 1,
        init_train_size: 5,
        output_dir: out.to_path_buf(),
        ..Default::default()
    }
}

/// Label everything the queue hands out with two sessions until `rounds`
/// batches are done; returns the submitted labels per round.
fn label_rounds(base: &str, rounds: usize) -> Vec<Vec<(String, bool)>> {
    let mut done: Vec<Vec<(String, bool)>> = Vec::new();
    while done.len() < rounds {
        let (_, st) = get(base, "/api/status");
        if st["phase"] != "labeling" || st["round"].as_u64() != Some(done.len() as u64) {
            thread::sleep(Duration::from_millis(20));
            continue;
        }
        let (_, a) = post(base, "/api/items/next", json!({"count": 3, "session": "a"}), &[]);
        let (_, b) = post(base, "/api/items/next", json!({"count": 3, "session": "b"}), &[]);
        let ids = |v: &Value| -> Vec<String> {
            v["items"].as_array().unwrap().iter().map(|i| i["tuple_id"].as_str().unwrap().to_string()).collect()
        };
        let (ia, ib) = (ids(&a), ids(&b));
        assert!(ia.iter().all(|x| !ib.contains(x)), "overlapping leases {ia:?} {ib:?}");
        assert_eq!(ia.len() + ib.len(), 5);
        let mut round = Vec::new();
        for (session, list) in [("a", ia), ("b", ib)] {
            for (n, id) in list.into_iter().enumerate() {
                let pref = if n % 2 == 0 { 1 } else { 2 };
                let (code, _) = post(base, "/api/labels", json!({"tuple_id": id, "preference": pref, "session": session}), &[]);
                assert_eq!(code, 200);
                round.push((id, pref == 1));
            }
        }
        let (_, st) = get(base, "/api/status");
        assert_eq!(st["labels_used"].as_u64(), Some(5 * (done.len() as u64 + 1)));
        done.push(round);
    }
    done
}

#[test]
fn harness_round_trip_in_service_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = service_config(&dir.path().join("run"));
    let queue = Arc::new(LabelQueue::open(&dir.path().join("queue"), Duration::from_secs(60)).unwrap());
    let srv = start(queue.clone(), None);

    let harness_queue = queue.clone();
    let harness_cfg = cfg.clone();
    let harness = thread::spawn(move || {
        let data = load_data(&harness_cfg).unwrap();
        let mut src = ServiceLabelSource::new(harness_queue, data.texts.clone(), Duration::from_secs(120));
        run_experiment(&harness_cfg, &data, &mut src, &RunOptions::default()).unwrap()
    });
    // Round 0 is the initial set, round 1 the first acquired batch.
    let submitted = label_rounds(&srv.base, 2);
    let summary = harness.join().unwrap();
    assert_eq!(summary.labels_used, 10);
    assert!(summary.finished);
    let rows = balpm_core::harness::read_metrics(std::fs::File::open(cfg.output_dir.join("metrics.csv")).unwrap()).unwrap();
    assert_eq!(rows.iter().map(|r| r.labels_used).collect::<Vec<_>>(), vec![5, 10]);

    let state: RunState =
        serde_json::from_str(&std::fs::read_to_string(cfg.output_dir.join("state.json")).unwrap()).unwrap();
    assert_eq!(state.split.train_ids.len(), 10);
    for round in &submitted {
        for (id, label) in round {
            assert_eq!(state.labels.get(id), Some(label));
            assert!(state.split.train_ids.contains(id));
        }
    }
    assert_eq!(state.labels.len(), 10);
    let (_, st) = get(&srv.base, "/api/status");
    assert_eq!(st["ll_curve"].as_array().unwrap().len(), 2);
    assert_eq!(st["phase"], "finished");
}
