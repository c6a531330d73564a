use asyncfl_core::wire::{self, MessageType, Role, WireMessage};
use serde_json::Value;

fn fixture(name: &str) -> Vec<u8> {
    let path = format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"));
    std::fs::read(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[test]
fn worker_init_fixture() {
    let raw = fixture("worker_init.json");
    let WireMessage::WorkerInit(m) = wire::decode(&raw).unwrap() else {
        panic!("wrong variant")
    };
    assert_eq!(m.headers.worker_id, "id001");
    assert_eq!(m.content.role, Role::Trainer);
    assert_eq!(m.content.system_info.gpu, "NVIDIA GeForce GTX 1080 Ti");
    assert_eq!(m.content.data_description.size, 123);
    assert_eq!(m.content.data_description.qod, 0.95);
}

#[test]
fn server_init_resp_fixture() {
    let raw = fixture("server_init_resp.json");
    let WireMessage::ServerInitResp(m) = wire::decode(&raw).unwrap() else {
        panic!("wrong variant")
    };
    assert_eq!(m.content.model_info.url, "global-models/cifar10_5w_v2.pkl");
    assert_eq!(m.content.model_info.version, 2);
    assert_eq!(m.content.model_info.exchange_at.performance, 0.9);
    assert_eq!(m.content.model_info.exchange_at.epoch, 100);
    assert_eq!(m.content.storage_info.region_name, "asia-southeast-2");
    assert_eq!(m.content.strategy, "asyn2f");
}

#[test]
fn server_notify_fixture() {
    let raw = fixture("server_notify.json");
    let WireMessage::ServerNotify(m) = wire::decode(&raw).unwrap() else {
        panic!("wrong variant")
    };
    let g = &m.content.global_model;
    assert_eq!(g.version, 1);
    assert_eq!(g.total_data_size, 42432);
    assert_eq!(g.avg_qod, 0.89);
    assert_eq!(g.avg_loss, 1.232);
    assert_eq!(m.content.learning_rate, Some(0.01));
    assert_eq!(m.content.worker_id, vec!["id001".to_string()]);
}

#[test]
fn worker_notify_fixture() {
    let raw = fixture("worker_notify.json");
    let WireMessage::WorkerNotify(m) = wire::decode(&raw).unwrap() else {
        panic!("wrong variant")
    };
    assert_eq!(m.content.storage_path, "cifar10_5w/id001");
    assert_eq!(m.content.file_name, "epoch_1.pkl");
    assert_eq!(m.content.global_version_used, 2);
    assert_eq!(m.content.performance, 0.8934);
    assert_eq!(m.content.loss, 1.232);
    let out = wire::encode(&WireMessage::WorkerNotify(m)).unwrap();
    assert!(String::from_utf8(out).unwrap().contains("\"loss\":1.232"));
}

#[test]
fn fixtures_reencode_to_the_same_json() {
    for name in [
        "worker_init.json",
        "server_init_resp.json",
        "server_notify.json",
        "worker_notify.json",
    ] {
        let raw = fixture(name);
        let msg = wire::decode(&raw).unwrap();
        let out = wire::encode(&msg).unwrap();
        assert_eq!(json(&out), json(&raw), "{name}");
        assert_eq!(wire::decode(&out).unwrap(), msg, "{name}");
    }
}

#[test]
fn unknown_fields_survive() {
    let mut v = json(&fixture("server_notify.json"));
    v["content"]["note"] = Value::from("kept");
    v["headers"]["trace"] = Value::from(7);
    let raw = serde_json::to_vec(&v).unwrap();
    let out = wire::encode(&wire::decode(&raw).unwrap()).unwrap();
    assert_eq!(json(&out), v);
}

#[test]
fn optional_learning_rate_may_be_absent() {
    let mut v = json(&fixture("server_notify.json"));
    v["content"].as_object_mut().unwrap().remove("learning_rate");
    let msg = wire::decode(&serde_json::to_vec(&v).unwrap()).unwrap();
    let WireMessage::ServerNotify(m) = &msg else { panic!() };
    assert_eq!(m.content.learning_rate, None);
    assert!(!String::from_utf8(wire::encode(&msg).unwrap()).unwrap().contains("learning_rate"));
}

#[test]
fn malformed_fixtures_are_rejected() {
    // hand-written samples with missing commas and a trailing comment
    let printed = br#"{"headers":{"message_type":"WORKER_NOTIFY","worker_id":"id001","session_id":"s","timestamp":"2023-07-15 12:39:35"},"content":{"storage_path":"a/b","file_name":"epoch_1.pkl","global_version_used": 2 "performance": 0.8934}}"#;
    assert!(matches!(wire::decode(printed), Err(wire::WireError::Parse(_))));
    let mut v = json(&fixture("worker_init.json"));
    v["content"]["role"] = Value::from("trainer|tester");
    assert!(wire::decode(&serde_json::to_vec(&v).unwrap()).is_err());
    let mut v = json(&fixture("worker_init.json"));
    v["headers"]["message_type"] = Value::from("WORKER_HELLO");
    assert!(matches!(
        wire::decode(&serde_json::to_vec(&v).unwrap()),
        Err(wire::WireError::Protocol(_))
    ));
    assert_eq!(MessageType::WorkerInit.as_str(), "WORKER_INIT");
}
