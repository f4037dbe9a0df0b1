use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::{Arc, Mutex};

use serde_json::{json, Value};
use tollnet_core::channel::{Chain, DigestMode};
use tollnet_core::harness::{run_integration, HarnessError, IntegrationConfig};
use tollnet_core::net::{EdgeServer, ProxyServer};
use tollnet_core::node::{EdgeConfig, EdgeService};
use tollnet_core::{ChainConfig, KeyPair, PriceModel, Proxy, ProxyConfig, TokenAmount};

fn exchange(addr: &str, line: &str) -> Value {
    let mut s = TcpStream::connect(addr).unwrap();
    s.write_all(line.as_bytes()).unwrap();
    s.write_all(b"\n").unwrap();
    let mut reply = String::new();
    BufReader::new(s).read_line(&mut reply).unwrap();
    serde_json::from_str(&reply).unwrap()
}

#[test]
fn integration_run_balances_to_the_wei() {
    let report = run_integration(&IntegrationConfig::default()).unwrap();
    assert_eq!(report.session.tasks.len(), 5);
    assert_eq!(report.user_channel_collateral, TokenAmount::from_ether(2));
    let total: TokenAmount = report.balances.iter().map(|b| b.balance).sum();
    // Genesis: proxy 10, terminal 10, three edges at 1 ether each.
    assert_eq!(total, TokenAmount::from_ether(23));
}

#[test]
fn withdraw_closes_terminal_channel() {
    let cfg = IntegrationConfig {
        withdraw: true,
        ..IntegrationConfig::default()
    };
    let report = run_integration(&cfg).unwrap();
    assert!(report.user_channel_collateral.is_zero());
    let close = report.session.close_receipt.expect("close confirmed");
    assert!(close.succeeded());
}

#[test]
fn forged_payment_aborts_without_paying_edges() {
    let cfg = IntegrationConfig {
        forge_at: Some(1),
        ..IntegrationConfig::default()
    };
    match run_integration(&cfg) {
        Err(e @ HarnessError::Aborted(_)) => {
            assert_eq!(e.exit_code(), 1);
            assert!(e.to_string().contains("invalid_agreement"), "{e}");
        }
        other => panic!("expected abort, got {other:?}"),
    }
}

#[test]
fn proxy_rejects_bad_requests_and_duplicates() {
    let proxy_key = KeyPair::from_label("sock-proxy");
    let edge_key = KeyPair::from_label("sock-edge");
    let chain = Chain::new(
        ChainConfig::default(),
        [
            (proxy_key.address(), TokenAmount::from_ether(10)),
            (edge_key.address(), TokenAmount::from_ether(1)),
        ],
        DigestMode::Salted,
    )
    .unwrap();
    let chain = Arc::new(Mutex::new(chain));
    let proxy = Proxy::new(proxy_key, ProxyConfig::default(), 1).unwrap();
    let server = ProxyServer::spawn("127.0.0.1:0", proxy, chain.clone()).unwrap();
    let addr = server.local_addr().to_string();

    let bad = exchange(&addr, "{not json");
    assert_eq!(bad["type"], "error");
    assert_eq!(bad["payload"]["code"], "bad_request");

    let edge = EdgeServer::spawn(
        "127.0.0.1:0",
        EdgeService::new(edge_key.clone(), EdgeConfig::default()),
        chain.clone(),
    )
    .unwrap();
    let record = edge
        .register(&addr, Some(PriceModel::scheme(2).unwrap()))
        .unwrap();
    assert_eq!(record.ledger_address, edge_key.address());
    assert!(edge.register(&addr, None).is_err());

    let list = exchange(
        &addr,
        &json!({"type": "discover", "payload": {}}).to_string(),
    );
    assert_eq!(list["type"], "edge_list");
    assert_eq!(list["payload"]["edges"].as_array().unwrap().len(), 1);

    let unknown = exchange(
        &addr,
        &json!({"type": "match_request", "payload": {
            "user": format!("{}", KeyPair::from_label("nobody").address()),
            "candidates": [format!("0x{}", "11".repeat(20))],
            "task_descriptor": "face-detect#0"
        }})
        .to_string(),
    );
    assert_eq!(unknown["type"], "error");

    edge.shutdown();
    server.shutdown();
}
