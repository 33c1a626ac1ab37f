use std::collections::HashSet;
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use catrec::encoder_input::IM;
use catrec::ingest::{ingest, IngestOptions};
use catrec::model::EncoderSettings;
use catrec::synthetic::{generate, SyntheticSpec};
use catrec::training::{run_training, TrainingConfig};
use catrec::{AnyRecommender, Mode, Recommender};
use catrec_service::{router, AppState, ServiceConfig, TurnResponse};

/// A small two-stage model trained on the synthetic keyword corpus.
fn trained() -> &'static AnyRecommender {
    static MODEL: OnceLock<AnyRecommender> = OnceLock::new();
    MODEL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let (movies, redial) = generate(&SyntheticSpec::default()).write_to(dir.path()).unwrap();
        let data = ingest(&IngestOptions {
            redial_files: vec![redial],
            test_files: vec![],
            movielens: movies,
            seed: 7,
            include_empty_history: false,
        })
        .unwrap();
        let cfg = TrainingConfig {
            mode: Mode::TwoStage,
            seed: 7,
            max_len: 48,
            learning_rate: 3e-3,
            max_epochs: 30,
            scorer_learning_rate: 5e-2,
            scorer_batch_size: 32,
            scorer_max_epochs: 30,
            encoder: EncoderSettings {
                hidden_size: 32,
                num_layers: 2,
                num_heads: 2,
                intermediate_size: 64,
                dropout: 0.0,
                init_range: 0.1,
                min_token_count: 1,
                ..EncoderSettings::default()
            },
            ..TrainingConfig::default()
        };
        AnyRecommender::F32(run_training::<f32>(&cfg, &data.catalog, &data.samples).unwrap().model)
    })
}

fn app_with(cfg: ServiceConfig) -> Router {
    router(Arc::new(AppState::new(trained().clone(), &cfg).unwrap()))
}

fn app() -> Router {
    app_with(ServiceConfig::default())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value, Option<String>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let retry = resp.headers().get("retry-after").map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value, retry)
}

async fn new_session(app: &Router) -> String {
    let (status, v, _) = call(app, "POST", "/sessions", None).await;
    assert_eq!(status, StatusCode::CREATED);
    v["session_id"].as_str().unwrap().to_string()
}

async fn say(app: &Router, id: &str, text: &str) -> TurnResponse {
    let (status, v, _) = call(app, "POST", &format!("/sessions/{id}/messages"), Some(json!({ "text": text }))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

#[tokio::test]
async fn health_reports_model() {
    let (status, v, _) = call(&app(), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    assert_eq!(v["mode"], "two_stage");
    assert_eq!(v["categories"], 19);
    assert_eq!(v["items"].as_u64().unwrap() as usize, trained().catalog().len());
}

#[tokio::test]
async fn session_ids_are_unique_and_start_empty() {
    let app = app();
    let mut ids = HashSet::new();
    for _ in 0..1000 {
        assert!(ids.insert(new_session(&app).await));
    }
    let id = ids.iter().next().unwrap();
    let (status, v, _) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["history"].as_array().unwrap().len(), 0);
}

#[tokio::test]
async fn turn_shape_and_ranking() {
    let app = app();
    let id = new_session(&app).await;
    let t = say(&app, &id, "hello").await;
    assert_eq!(t.history_length, 1);
    assert_eq!(t.top_k.len(), 10);
    assert!(t.top_k.windows(2).all(|w| w[0].score >= w[1].score));
    assert_eq!(t.cat_pref.len(), 19);
    assert!(t.cat_pref.iter().all(|p| p.value > 0.0 && p.value < 1.0));
    let total: f64 = t.top_k.iter().map(|r| r.score).sum();
    assert!(total <= 1.0 + 1e-6);

    let (status, v, _) = call(&app, "POST", &format!("/sessions/{id}/messages"), Some(json!({"text": "more", "k": 3}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(v["top_k"].as_array().unwrap().len(), 3);
    assert_eq!(v["history_length"], 2);
}

#[tokio::test]
async fn keyword_request_surfaces_its_genre() {
    let app = app();
    let id = new_session(&app).await;
    let t = say(&app, &id, "i am looking for something funny").await;
    let comedy = t.cat_pref.iter().find(|p| p.category == "Comedy").unwrap();
    assert!(comedy.value > 0.5, "{comedy:?}");
    assert!(t.explanation.contains("Comedy("), "{}", t.explanation);
    assert_eq!(t.top_k[0].title, "The Funny Story");
    assert_eq!(t.top_k[0].year, Some(1990));
}

#[tokio::test]
async fn fresh_sessions_answer_identically() {
    let app = app();
    let a = new_session(&app).await;
    let b = new_session(&app).await;
    let mut ra = say(&app, &a, "can you suggest a scary movie").await;
    let rb = say(&app, &b, "can you suggest a scary movie").await;
    ra.session_id = rb.session_id.clone();
    assert_eq!(ra, rb);
}

#[tokio::test]
async fn errors_map_to_statuses() {
    let app = app();
    let (s, v, _) = call(&app, "POST", "/sessions/nope/messages", Some(json!({"text": "hi"}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(v["error"].as_str().unwrap().contains("nope"));
    let id = new_session(&app).await;
    let uri = format!("/sessions/{id}/messages");
    let (s, _, _) = call(&app, "POST", &uri, Some(json!({"text": "   "}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _, _) = call(&app, "POST", &uri, Some(json!({"text": "hi", "k": 0}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _, _) = call(&app, "POST", &uri, Some(json!({"words": "hi"}))).await;
    assert!(s.is_client_error());
    let sys = format!("/sessions/{id}/system-turns");
    let (s, _, _) = call(&app, "POST", &sys, Some(json!({"accepted_item": 1_000_000}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _, _) = call(&app, "POST", &sys, Some(json!({}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    // Failed requests leave the history alone.
    let (_, v, _) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(v["history"].as_array().unwrap().len(), 0);
    let (s, _, _) = call(&app, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _, _) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _, _) = call(&app, "DELETE", &format!("/sessions/{id}"), None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn system_turn_is_recorded_and_masked() {
    let app = app();
    let model = trained();
    let id = new_session(&app).await;
    say(&app, &id, "hello").await;
    let item = model.catalog().items()[3].clone();
    let (s, v, _) = call(
        &app,
        "POST",
        &format!("/sessions/{id}/system-turns"),
        Some(json!({"text": "you might enjoy", "accepted_item": item.item_index})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["history_length"], 2);
    let (_, v, _) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    let history: Vec<catrec::corpus::Utterance> = serde_json::from_value(v["history"].clone()).unwrap();
    assert_eq!(history[1].text, format!("you might enjoy @{}", item.redial_id));
    assert_eq!(history[1].mentions, vec![item.redial_id]);
    let input = model.form_input(&history).unwrap();
    let AnyRecommender::F32(m) = model else { unreachable!() };
    let tokens = m.preference.as_ref().unwrap().formatter.tokenizer.decode_tokens(&input.token_ids);
    assert!(tokens.contains(&IM));
    assert!(!tokens.iter().any(|t| t.contains(&item.redial_id.to_string())));
}

#[tokio::test]
async fn recorded_turn_changes_the_next_answer() {
    let app = app();
    let (a, b) = (new_session(&app).await, new_session(&app).await);
    for id in [&a, &b] {
        say(&app, id, "hi there").await;
    }
    let (s, _, _) = call(&app, "POST", &format!("/sessions/{a}/system-turns"), Some(json!({"text": "what kind of movies do you like?"}))).await;
    assert_eq!(s, StatusCode::OK);
    let ra = say(&app, &a, "anything scary would be great").await;
    let rb = say(&app, &b, "anything scary would be great").await;
    assert_eq!(ra.history_length, 3);
    assert_eq!(rb.history_length, 2);
    assert_ne!(ra.cat_pref, rb.cat_pref);
}

#[tokio::test]
async fn full_store_refuses_with_retry_hint() {
    let app = app_with(ServiceConfig {
        max_sessions: 2,
        retry_after_secs: 7,
        ..ServiceConfig::default()
    });
    new_session(&app).await;
    new_session(&app).await;
    let (s, v, retry) = call(&app, "POST", "/sessions", None).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(retry.as_deref(), Some("7"));
    assert!(v["error"].is_string());
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_posts_to_one_session_serialize() {
    let app = app();
    let id = new_session(&app).await;
    let mut tasks = Vec::new();
    for n in 0..12 {
        let (app, id) = (app.clone(), id.clone());
        tasks.push(tokio::spawn(async move { say(&app, &id, &format!("message {n}")).await.history_length }));
    }
    let mut lengths = Vec::new();
    for t in tasks {
        lengths.push(t.await.unwrap());
    }
    lengths.sort_unstable();
    assert_eq!(lengths, (1..=12).collect::<Vec<_>>());
    let (_, v, _) = call(&app, "GET", &format!("/sessions/{id}"), None).await;
    assert_eq!(v["history"].as_array().unwrap().len(), 12);
}

#[test]
fn oracle_checkpoint_cannot_serve() {
    let AnyRecommender::F32(m) = trained() else { unreachable!() };
    let oracle = Recommender::new(Mode::Oracle, None, m.scorer.clone(), m.catalog.clone()).unwrap();
    assert!(AppState::new(AnyRecommender::F32(oracle), &ServiceConfig::default()).is_err());
}

#[test]
fn loads_from_config_files() {
    let dir = tempfile::tempdir().unwrap();
    let AnyRecommender::F32(m) = trained() else { unreachable!() };
    let ckpt = dir.path().join("model");
    m.save(&ckpt).unwrap();
    let catalog = dir.path().join("catalog.tsv");
    m.catalog.save(&catalog).unwrap();
    let cfg = ServiceConfig {
        checkpoint: ckpt,
        catalog,
        ..ServiceConfig::default()
    };
    let st = AppState::from_config(&cfg).unwrap();
    assert_eq!(st.model.mode(), Mode::TwoStage);
    assert_eq!(st.default_k, 10);
}
