//! Newline-delimited JSON messages spoken by the proxy and edge services.
//!
//! Proxy traffic wraps every message as `{"type": ..., "payload": ...}`.
//! Edge traffic is flat: `{"type": "task", "id": 3, "image_b64": "..."}`.

use std::io::{self, BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::chainsim::{SimTime, TokenAmount, TxHandle};
use crate::channel::SignedAgreement;
use crate::crypto::Address;
use crate::pricing::PriceModel;
use crate::proxy::{EdgeRecord, EdgeSummary, MatchRequest, MatchResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegisterEdge {
    pub ledger_address: Address,
    pub network_address: String,
    /// Pricing the edge advertises; the proxy falls back to scheme 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price_model: Option<PriceModel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayRequest {
    pub agreement: SignedAgreement,
    pub edge: Address,
    #[serde(default)]
    pub withdraw: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PayAck {
    /// The proxy→edge agreement produced by the relay.
    pub agreement: SignedAgreement,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub close_tx: Option<TxHandle>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub code: String,
    #[serde(default)]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum ProxyMessage {
    RegisterEdge(RegisterEdge),
    RegisterAck(EdgeRecord),
    Discover {},
    EdgeList { edges: Vec<EdgeSummary> },
    MatchRequest(MatchRequest),
    MatchResult(MatchResult),
    Pay(PayRequest),
    PayAck(PayAck),
    Error(WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EdgeRequest {
    Task {
        id: u64,
        image_b64: String,
    },
    /// Proxy delivering its latest cumulative agreement.
    Claim {
        agreement: SignedAgreement,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EdgeResponse {
    Result {
        id: u64,
        face: FaceBox,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        service_time_s: Option<SimTime>,
    },
    ClaimAck {
        best: TokenAmount,
    },
    Error {
        code: String,
        #[serde(default, skip_serializing_if = "String::is_empty")]
        detail: String,
    },
}

/// Writes one message followed by `\n` and flushes.
pub fn send<W: Write, T: Serialize>(w: &mut W, msg: &T) -> io::Result<()> {
    let mut line = serde_json::to_vec(msg).map_err(io::Error::other)?;
    line.push(b'\n');
    w.write_all(&line)?;
    w.flush()
}

/// Reads one message; `Ok(None)` on a clean end of stream.
pub fn recv<R: BufRead, T: DeserializeOwned>(r: &mut R) -> io::Result<Option<T>> {
    let mut line = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        if !line.trim().is_empty() {
            break;
        }
    }
    serde_json::from_str(&line)
        .map(Some)
        .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{Channel, ChannelStatus, DigestMode};
    use crate::crypto::{keccak256, KeyPair};
    use serde_json::{json, Value};

    fn agreement() -> SignedAgreement {
        let key = KeyPair::from_label("u");
        let ch = Channel {
            id: keccak256(b"c"),
            sender: key.address(),
            receiver: Address([2; 20]),
            deposit: TokenAmount::from_ether(1),
            status: ChannelStatus::Open,
            opened_at: SimTime::ZERO,
        };
        SignedAgreement::sign(
            &key,
            &ch,
            TokenAmount::from_milli_ether(207),
            DigestMode::Salted,
        )
    }

    #[test]
    fn proxy_envelope_shape() {
        let a = agreement();
        let msg = ProxyMessage::Pay(PayRequest {
            agreement: a.clone(),
            edge: Address([2; 20]),
            withdraw: true,
        });
        let v: Value = serde_json::to_value(&msg).unwrap();
        assert_eq!(v["type"], "pay");
        assert_eq!(
            v["payload"]["agreement"]["cumulative_value"],
            "207000000000000000"
        );
        let sig = v["payload"]["agreement"]["signature"].as_str().unwrap();
        assert!(sig.starts_with("0x") && sig.len() == 132);
        assert_eq!(
            v["payload"]["edge"],
            "0x0202020202020202020202020202020202020202"
        );
        let back: ProxyMessage = serde_json::from_value(v).unwrap();
        assert_eq!(back, msg);

        let err = ProxyMessage::Error(WireError {
            code: "duplicate_edge".into(),
            detail: "x".into(),
        });
        assert_eq!(
            serde_json::to_value(&err).unwrap(),
            json!({"type": "error", "payload": {"code": "duplicate_edge", "detail": "x"}})
        );
        let d: ProxyMessage = serde_json::from_str(r#"{"type":"discover","payload":{}}"#).unwrap();
        assert_eq!(d, ProxyMessage::Discover {});
    }

    #[test]
    fn edge_messages_are_flat() {
        let req: EdgeRequest =
            serde_json::from_str(r#"{"type":"task","id":4,"image_b64":"aGk="}"#).unwrap();
        assert_eq!(
            req,
            EdgeRequest::Task {
                id: 4,
                image_b64: "aGk=".into()
            }
        );
        let resp = EdgeResponse::Result {
            id: 4,
            face: FaceBox {
                x: 1,
                y: 2,
                w: 3,
                h: 4,
            },
            service_time_s: None,
        };
        assert_eq!(
            serde_json::to_value(&resp).unwrap(),
            json!({"type": "result", "id": 4, "face": {"x": 1, "y": 2, "w": 3, "h": 4}})
        );
        let bad = EdgeResponse::Error {
            code: "bad_payload".into(),
            detail: String::new(),
        };
        assert_eq!(
            serde_json::to_value(&bad).unwrap(),
            json!({"type": "error", "code": "bad_payload"})
        );
    }

    #[test]
    fn line_codec_round_trip() {
        let mut buf = Vec::new();
        send(&mut buf, &ProxyMessage::Discover {}).unwrap();
        buf.extend_from_slice(b"\n");
        send(&mut buf, &ProxyMessage::EdgeList { edges: vec![] }).unwrap();
        let mut r = io::Cursor::new(buf);
        let a: ProxyMessage = recv(&mut r).unwrap().unwrap();
        let b: ProxyMessage = recv(&mut r).unwrap().unwrap();
        assert_eq!(a, ProxyMessage::Discover {});
        assert_eq!(b, ProxyMessage::EdgeList { edges: vec![] });
        assert!(recv::<_, ProxyMessage>(&mut r).unwrap().is_none());
        let mut junk = io::Cursor::new(b"{not json}\n".to_vec());
        assert_eq!(
            recv::<_, ProxyMessage>(&mut junk).unwrap_err().kind(),
            io::ErrorKind::InvalidData
        );
    }
}
