use std::time::Duration;

use base64::Engine;
use it2i_core::adapter::RefinedPrompt;
use it2i_core::backends::{
    digest_hex, BackendError, BackendRegistry, BackendSpec, Capability, Health,
};
use it2i_core::protocol::TagKind;
use it2i_core::router::{ChangeClass, GenerationKind, GenerationRequest};
use it2i_core::session::{ImageId, SessionId};
use it2i_testkit::{refused_addr, solid_png, SdStub};

fn request(kind: GenerationKind, change: Option<ChangeClass>, backend: &str) -> GenerationRequest {
    let sid = SessionId::parse("sd-test").unwrap();
    let parent = (kind != GenerationKind::New).then(|| ImageId::new(&sid, 1));
    GenerationRequest {
        image_id: ImageId::new(&sid, 2),
        ordinal: 2,
        kind,
        tag_kind: TagKind::Image,
        description: "a cute dog".into(),
        refined: RefinedPrompt {
            positive: "a cute dog, studio light".into(),
            negative: "blurry".into(),
            source_description: "a cute dog".into(),
            variation_hint: None,
            warning: None,
        },
        parent_id: parent,
        seed: 0x1_2345_6789,
        width: 64,
        height: 64,
        change_class: change,
        backend_name: backend.into(),
        downgraded_from_edit: false,
        batch: 1,
        notes: vec![],
    }
}

fn registry(stub: &SdStub, timeout: f64) -> BackendRegistry {
    let mut spec = BackendSpec::sd_http("sd", &stub.base_url(), &Capability::ALL);
    spec.timeout = timeout;
    BackendRegistry::new(vec![spec])
}

#[tokio::test]
async fn txt2img_returns_the_stub_image() {
    let png = solid_png(64, 64, [10, 200, 30]);
    let stub = SdStub::start(png.clone()).await;
    let result = registry(&stub, 5.0)
        .generate("sd", &request(GenerationKind::New, None, "sd"), None)
        .await
        .unwrap();
    assert_eq!(result.bytes, png);
    assert_eq!(result.content_digest, digest_hex(&png));
    assert_eq!((result.width, result.height), (64, 64));
    assert_eq!(result.backend_name, "sd");

    let (path, body) = &stub.requests()[0];
    assert_eq!(path, "/sdapi/v1/txt2img");
    assert_eq!(body["prompt"], "a cute dog, studio light");
    assert_eq!(body["negative_prompt"], "blurry");
    assert_eq!(body["seed"], 0x2345_6789);
    assert_eq!(body["width"], 64);
    assert_eq!(body["height"], 64);
    assert_eq!(body["steps"], 20);
    assert!(body.get("init_images").is_none());
}

#[tokio::test]
async fn edits_use_img2img_with_strength_by_change() {
    let parent = solid_png(64, 64, [1, 2, 3]);
    let stub = SdStub::start(solid_png(64, 64, [9, 9, 9])).await;
    let reg = registry(&stub, 5.0);
    let cases = [
        (GenerationKind::Edit, Some(ChangeClass::Small), 0.35),
        (GenerationKind::Edit, Some(ChangeClass::Large), 0.75),
        (GenerationKind::RefineUpscale, None, 0.3),
    ];
    for (kind, change, _) in cases {
        reg.generate("sd", &request(kind, change, "sd"), Some(&parent)).await.unwrap();
    }
    let requests = stub.requests();
    for ((path, body), (_, _, strength)) in requests.iter().zip(cases) {
        assert_eq!(path, "/sdapi/v1/img2img");
        assert_eq!(body["denoising_strength"], strength);
        let init = body["init_images"][0].as_str().unwrap();
        assert_eq!(base64::engine::general_purpose::STANDARD.decode(init).unwrap(), parent);
    }
}

#[tokio::test]
async fn edits_without_parent_bytes_are_rejected() {
    let stub = SdStub::start(solid_png(16, 16, [0, 0, 0])).await;
    let err = registry(&stub, 5.0)
        .generate("sd", &request(GenerationKind::Edit, Some(ChangeClass::Small), "sd"), None)
        .await
        .unwrap_err();
    assert_eq!(err, BackendError::MissingParent);
    assert_eq!(stub.hits(), 0);
}

#[tokio::test]
async fn http_errors_are_typed() {
    let stub = SdStub::start(solid_png(16, 16, [0, 0, 0])).await;
    stub.fail_with(500);
    let err = registry(&stub, 5.0)
        .generate("sd", &request(GenerationKind::New, None, "sd"), None)
        .await
        .unwrap_err();
    assert!(matches!(err, BackendError::BackendHttpError { status: 500, .. }), "{err:?}");
    assert_eq!(err.code(), "backend_http_error");
}

#[tokio::test]
async fn bad_payloads_are_decode_errors() {
    let stub = SdStub::start(solid_png(16, 16, [0, 0, 0])).await;
    let reg = registry(&stub, 5.0);
    for payload in ["!!!not-base64!!!", "aGVsbG8="] {
        stub.bad_payload(payload);
        let err = reg
            .generate("sd", &request(GenerationKind::New, None, "sd"), None)
            .await
            .unwrap_err();
        assert!(matches!(err, BackendError::DecodeError(_)), "{payload}: {err:?}");
    }
}

#[tokio::test]
async fn one_retry_after_a_timeout() {
    let png = solid_png(32, 32, [5, 5, 5]);
    let stub = SdStub::start(png.clone()).await;
    stub.hang_first(1);
    let result = registry(&stub, 0.3)
        .generate("sd", &request(GenerationKind::New, None, "sd"), None)
        .await
        .unwrap();
    assert_eq!(result.bytes, png);
    assert_eq!(stub.hits(), 2);

    let stub = SdStub::start(png).await;
    stub.hang_first(5);
    let err = registry(&stub, 0.2)
        .generate("sd", &request(GenerationKind::New, None, "sd"), None)
        .await
        .unwrap_err();
    assert_eq!(err, BackendError::BackendTimeout);
    assert_eq!(stub.hits(), 2);
}

#[tokio::test]
async fn in_flight_limit_is_enforced() {
    let stub = SdStub::start(solid_png(16, 16, [0, 0, 0])).await;
    // the first two requests hang until their timeout, so the third must wait
    stub.hang_first(2);
    let mut spec = BackendSpec::sd_http("sd", &stub.base_url(), &Capability::ALL);
    spec.timeout = 0.4;
    spec.max_in_flight = 2;
    let reg = std::sync::Arc::new(BackendRegistry::new(vec![spec]));
    let mut tasks = Vec::new();
    for _ in 0..3 {
        let reg = reg.clone();
        tasks.push(tokio::spawn(async move {
            reg.generate("sd", &request(GenerationKind::New, None, "sd"), None).await
        }));
    }
    tokio::time::sleep(Duration::from_millis(150)).await;
    assert_eq!(stub.hits(), 2);
    for t in tasks {
        assert!(t.await.unwrap().is_ok());
    }
}

#[tokio::test]
async fn health_probe() {
    let stub = SdStub::start(solid_png(16, 16, [0, 0, 0])).await;
    assert_eq!(registry(&stub, 2.0).health("sd").await, Health::Ok);

    let addr = refused_addr().await;
    let down = BackendRegistry::new(vec![BackendSpec::sd_http("sd", &format!("http://{addr}"), &Capability::ALL)]);
    assert!(matches!(down.health("sd").await, Health::Down(_)));

    let mock = BackendRegistry::new(vec![BackendSpec::mock("mock")]);
    assert_eq!(mock.health("mock").await, Health::Ok);
}

#[tokio::test]
async fn unknown_backend() {
    let reg = BackendRegistry::new(vec![BackendSpec::mock("mock")]);
    let err = reg
        .generate("nope", &request(GenerationKind::New, None, "nope"), None)
        .await
        .unwrap_err();
    assert_eq!(err, BackendError::UnknownBackend("nope".into()));
}
