use std::time::{Duration, Instant};

use futures::StreamExt;
use it2i_core::llm::{ChatMessage, LlmClient, LlmConfig, LlmError, OpenAiClient};
use it2i_testkit::{refused_addr, ChatReply, ChatStub};

fn config(api_base: String) -> LlmConfig {
    LlmConfig {
        api_base,
        api_key_ref: String::new(),
        model: "stub-model".into(),
        timeout: 1.0,
        max_retries: 2,
        retry_backoff_ms: 10,
        ..Default::default()
    }
}

fn hello() -> Vec<ChatMessage> {
    vec![ChatMessage::system("be brief"), ChatMessage::user("hi")]
}

#[tokio::test]
async fn streams_chunks_in_order() {
    let stub = ChatStub::start(vec![ChatReply::Chunks {
        pieces: vec!["hel".into(), "lo".into()],
        delay: Duration::from_millis(5),
    }])
    .await;
    let client = OpenAiClient::new(config(stub.api_base())).unwrap();
    let stream = client.complete_stream(&hello()).await.unwrap();
    assert_eq!(stream.retries, 0);
    let chunks: Vec<String> = stream.map(Result::unwrap).collect().await;
    assert_eq!(chunks, vec!["hel", "lo"]);
    assert_eq!(chunks.concat(), "hello");

    let request = &stub.requests()[0];
    assert_eq!(request["model"], "stub-model");
    assert_eq!(request["stream"], true);
    assert_eq!(request["messages"][0]["role"], "system");
    assert_eq!(request["messages"][1]["content"], "hi");
}

#[tokio::test]
async fn retries_server_errors_before_first_chunk() {
    let stub = ChatStub::start(vec![
        ChatReply::Status(500, "boom".into()),
        ChatReply::Status(503, "busy".into()),
        ChatReply::text("ok"),
    ])
    .await;
    let client = OpenAiClient::new(config(stub.api_base())).unwrap();
    let stream = client.complete_stream(&hello()).await.unwrap();
    assert_eq!(stream.retries, 2);
    assert_eq!(stream.collect_text().await.unwrap(), "ok");
    assert_eq!(stub.hits(), 3);
}

#[tokio::test]
async fn gives_up_after_max_retries() {
    let stub = ChatStub::always(ChatReply::Status(500, "down".into())).await;
    let client = OpenAiClient::new(config(stub.api_base())).unwrap();
    let err = client.complete_stream(&hello()).await.unwrap_err();
    assert!(matches!(err, LlmError::UpstreamError { status: 500, .. }), "{err:?}");
    assert_eq!(stub.hits(), 3);
}

#[tokio::test]
async fn hanging_upstream_times_out() {
    let stub = ChatStub::always(ChatReply::Hang).await;
    let client = OpenAiClient::new(LlmConfig {
        timeout: 0.2,
        max_retries: 1,
        ..config(stub.api_base())
    })
    .unwrap();
    let started = Instant::now();
    let err = client.complete_stream(&hello()).await.unwrap_err();
    assert_eq!(err, LlmError::Timeout);
    assert_eq!(stub.hits(), 2);
    assert!(started.elapsed() < Duration::from_secs(3));
}

#[tokio::test]
async fn auth_failures_are_not_retried() {
    for status in [401, 403] {
        let stub = ChatStub::always(ChatReply::Status(status, "bad key".into())).await;
        let client = OpenAiClient::new(config(stub.api_base())).unwrap();
        let err = client.complete_stream(&hello()).await.unwrap_err();
        assert_eq!(
            err,
            LlmError::AuthFailed {
                status,
                body: "bad key".into()
            }
        );
        assert_eq!(stub.hits(), 1);
    }
}

#[tokio::test]
async fn client_errors_are_not_retried() {
    let stub = ChatStub::always(ChatReply::Status(400, "bad request".into())).await;
    let client = OpenAiClient::new(config(stub.api_base())).unwrap();
    let err = client.complete_stream(&hello()).await.unwrap_err();
    assert!(matches!(err, LlmError::UpstreamError { status: 400, .. }));
    assert_eq!(stub.hits(), 1);
}

#[tokio::test]
async fn mid_stream_drop_is_an_interruption() {
    let stub = ChatStub::start(vec![ChatReply::Truncated {
        pieces: vec!["par".into(), "tial".into(), "never".into()],
        n: 2,
    }])
    .await;
    let client = OpenAiClient::new(config(stub.api_base())).unwrap();
    let mut stream = client.complete_stream(&hello()).await.unwrap();
    let mut text = String::new();
    let mut error = None;
    while let Some(item) = stream.next().await {
        match item {
            Ok(chunk) => text.push_str(&chunk),
            Err(e) => {
                error = Some(e);
                break;
            }
        }
    }
    assert_eq!(text, "partial");
    assert!(matches!(error, Some(LlmError::StreamInterrupted(_))), "{error:?}");
    assert_eq!(stub.hits(), 1);
}

#[tokio::test]
async fn connection_refused_is_a_transport_error() {
    let addr = refused_addr().await;
    let client = OpenAiClient::new(LlmConfig {
        max_retries: 0,
        ..config(format!("http://{addr}/v1"))
    })
    .unwrap();
    let err = client.complete_stream(&hello()).await.unwrap_err();
    assert!(matches!(err, LlmError::Transport(_)), "{err:?}");
}

#[tokio::test]
async fn complete_once_uses_the_plain_api() {
    let stub = ChatStub::start(vec![ChatReply::text("a refined caption")]).await;
    let client = OpenAiClient::new(config(stub.api_base())).unwrap();
    assert_eq!(client.complete_once(&hello()).await.unwrap(), "a refined caption");
    assert_eq!(stub.requests()[0]["stream"], false);
}

#[tokio::test]
async fn bearer_key_comes_from_the_named_variable() {
    let stub = ChatStub::start(vec![ChatReply::text("x")]).await;
    let missing = OpenAiClient::new(LlmConfig {
        api_key_ref: "IT2I_TEST_KEY_THAT_IS_NOT_SET".into(),
        ..config(stub.api_base())
    })
    .unwrap();
    assert_eq!(
        missing.complete_stream(&hello()).await.unwrap_err(),
        LlmError::MissingApiKey("IT2I_TEST_KEY_THAT_IS_NOT_SET".into())
    );
    assert_eq!(stub.hits(), 0);
}
