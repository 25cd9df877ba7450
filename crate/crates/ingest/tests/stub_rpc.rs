use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use bytepatch_core::minievm::parse_transactions;
use bytepatch_core::samples::addr;
use bytepatch_ingest::{BlockTag, DiskCache, Fetcher, IngestError, RetryPolicy, RpcEndpoint};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

#[derive(Default)]
struct Stub {
    code: BTreeMap<String, String>,
    blocks: BTreeMap<u64, Value>,
    requests: AtomicUsize,
    /// Answer every request with 503.
    broken: bool,
}

async fn handle(State(stub): State<Arc<Stub>>, Json(req): Json<Value>) -> Result<Json<Value>, StatusCode> {
    stub.requests.fetch_add(1, Ordering::SeqCst);
    if stub.broken {
        return Err(StatusCode::SERVICE_UNAVAILABLE);
    }
    let params = &req["params"];
    let result = match req["method"].as_str() {
        Some("eth_getCode") => {
            let a = params[0].as_str().unwrap().to_lowercase();
            json!(stub.code.get(&a).cloned().unwrap_or_else(|| "0x".into()))
        }
        Some("eth_getBlockByNumber") => {
            let n = u64::from_str_radix(params[0].as_str().unwrap().trim_start_matches("0x"), 16).unwrap();
            // Earlier blocks answer later, so reassembly order is exercised.
            tokio::time::sleep(Duration::from_millis(40u64.saturating_sub(n * 5))).await;
            stub.blocks.get(&n).cloned().unwrap_or(Value::Null)
        }
        _ => {
            return Ok(Json(json!({
                "jsonrpc": "2.0", "id": req["id"],
                "error": {"code": -32601, "message": "method not found"}
            })))
        }
    };
    Ok(Json(json!({"jsonrpc": "2.0", "id": req["id"], "result": result})))
}

async fn serve(stub: Stub) -> (String, Arc<Stub>) {
    let stub = Arc::new(stub);
    let app = Router::new().route("/", post(handle)).with_state(stub.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (url, stub)
}

fn token() -> String {
    format!("{:?}", addr(0x70c3))
}

fn tx(hash: &str, from: u64, to: &str, input: &str) -> Value {
    json!({
        "hash": hash,
        "from": format!("{:?}", addr(from)),
        "to": to,
        "input": input,
        "value": "0x0",
        "gas": "0x186a0",
        "nonce": "0x0",
        "blockNumber": "0x1",
    })
}

fn chain() -> Stub {
    let t = token();
    let other = format!("{:?}", addr(0x0123));
    let mut blocks = BTreeMap::new();
    blocks.insert(1, json!({"number": "0x1", "transactions": [tx("0xa1", 1, &t, "0xa9059cbb")]}));
    blocks.insert(2, json!({"number": "0x2", "transactions": [tx("0xb0", 2, &other, "0x")]}));
    blocks.insert(
        3,
        json!({"number": "0x3", "transactions": [tx("0xc1", 3, &t, "0x70a08231"), tx("0xc2", 4, &t, "0x")]}),
    );
    for n in 4..=6 {
        blocks.insert(n, json!({"number": format!("{n:#x}"), "transactions": []}));
    }
    let mut create = tx("0xd0", 5, &t, "0x6000");
    create["to"] = Value::Null;
    blocks.insert(7, json!({"number": "0x7", "transactions": [create]}));
    Stub {
        code: BTreeMap::from([(t, "0x60016001015b00".into())]),
        blocks,
        ..Default::default()
    }
}

fn quick(url: &str) -> RpcEndpoint {
    RpcEndpoint::new(
        url,
        Duration::from_secs(2),
        RetryPolicy {
            max_attempts: 3,
            backoff: Duration::from_millis(10),
        },
    )
    .unwrap()
}

#[tokio::test]
async fn fetches_known_code() {
    let (url, _) = serve(chain()).await;
    let f = Fetcher::new(quick(&url), None).unwrap();
    let code = f.fetch_code(addr(0x70c3), BlockTag::Latest).await.unwrap();
    assert_eq!(code, hex::decode("60016001015b00").unwrap());
}

#[tokio::test]
async fn empty_account_has_no_code() {
    let (url, _) = serve(chain()).await;
    let f = Fetcher::new(quick(&url), None).unwrap();
    let err = f.fetch_code(addr(0xdead), BlockTag::Number(5)).await.unwrap_err();
    assert!(matches!(err, IngestError::EmptyCode { .. }), "{err}");
}

#[tokio::test]
async fn failing_server_is_retried_then_reported() {
    let (url, stub) = serve(Stub {
        broken: true,
        ..Default::default()
    })
    .await;
    let f = Fetcher::new(quick(&url), None).unwrap();
    let err = f.fetch_code(addr(1), BlockTag::Latest).await.unwrap_err();
    assert!(matches!(err, IngestError::Rpc(_)), "{err}");
    assert_eq!(stub.requests.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn unreachable_server_is_an_rpc_error() {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/", listener.local_addr().unwrap());
    drop(listener);
    let f = Fetcher::new(quick(&url), None).unwrap();
    assert!(matches!(f.fetch_code(addr(1), BlockTag::Latest).await, Err(IngestError::Rpc(_))));
}

#[tokio::test]
async fn transactions_come_back_in_block_order() {
    let (url, _) = serve(chain()).await;
    let f = Fetcher::new(quick(&url), None).unwrap();
    let txs = f.fetch_transactions(addr(0x70c3), 1, 7).await.unwrap();
    let ids: Vec<_> = txs.iter().map(|t| t.id.clone().unwrap()).collect();
    assert_eq!(ids, ["0xa1", "0xc1", "0xc2"]);
    assert_eq!(txs[0].from, addr(1));
    assert_eq!(txs[0].data, hex::decode("a9059cbb").unwrap());
    assert_eq!(txs[0].gas, 100_000);
    assert!(txs.iter().all(|t| t.to == Some(addr(0x70c3))));

    // Every fixture survives a trip through the replay input format.
    let text = serde_json::to_string(&txs).unwrap();
    assert_eq!(parse_transactions(&text).unwrap(), txs);
}

#[tokio::test]
async fn empty_and_oversized_ranges() {
    let (url, stub) = serve(chain()).await;
    let mut f = Fetcher::new(quick(&url), None).unwrap();
    assert!(f.fetch_transactions(addr(0x70c3), 5, 4).await.unwrap().is_empty());
    assert!(f.fetch_transactions(addr(0x70c3), 4, 6).await.unwrap().is_empty());
    f.max_blocks = 3;
    let err = f.fetch_transactions(addr(0x70c3), 1, 4).await.unwrap_err();
    assert_eq!(err, IngestError::RangeTooLarge { from: 1, to: 4, cap: 3 });
    assert_eq!(stub.requests.load(Ordering::SeqCst), 3);
}

#[tokio::test]
async fn second_fetch_is_served_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let (url, stub) = serve(chain()).await;
    let f = Fetcher::new(quick(&url), Some(DiskCache::new(dir.path()))).unwrap();
    let first_code = f.fetch_code(addr(0x70c3), BlockTag::Number(7)).await.unwrap();
    let first_txs = f.fetch_transactions(addr(0x70c3), 1, 7).await.unwrap();
    let after_first = stub.requests.load(Ordering::SeqCst);
    assert_eq!(after_first, 8);

    let again = Fetcher::new(quick(&url), Some(DiskCache::new(dir.path()))).unwrap();
    assert_eq!(again.fetch_code(addr(0x70c3), BlockTag::Number(7)).await.unwrap(), first_code);
    assert_eq!(again.fetch_transactions(addr(0x70c3), 1, 7).await.unwrap(), first_txs);
    assert_eq!(stub.requests.load(Ordering::SeqCst), after_first);
}

#[tokio::test]
async fn missing_block_is_malformed() {
    let (url, _) = serve(chain()).await;
    let f = Fetcher::new(quick(&url), None).unwrap();
    let err = f.fetch_transactions(addr(0x70c3), 6, 9).await.unwrap_err();
    assert!(matches!(err, IngestError::InvalidResponse(_)), "{err}");
}
