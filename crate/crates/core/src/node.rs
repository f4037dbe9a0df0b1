//! Edge and terminal actors.
//!
//! [`EdgeService`] answers face-detection tasks with a deterministic stub
//! and tracks the proxy's claims. [`TerminalSession`] drives a user through
//! discover → match → serve → pay over any [`Network`], either paying
//! through its channel to the proxy (PC) or with one on-chain transfer per
//! task (WPC).

use std::collections::BTreeMap;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chainsim::{Receipt, SimTime, TokenAmount, TxHandle};
use crate::channel::{
    Chain, Channel, ChannelError, ClaimOutcome, ClaimTracker, DigestMode, SignedAgreement,
};
use crate::crypto::{keccak256, Address, KeyPair};
use crate::pricing::PriceModel;
use crate::proxy::{EdgeRecord, EdgeSummary, MatchRequest, MatchResult, Proxy, ProxyError};
use crate::wire::{FaceBox, PayAck};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NodeError {
    #[error("bad_payload: {0}")]
    BadPayload(String),
    /// An error reported by the proxy or an edge.
    #[error("{code}: {detail}")]
    Remote { code: String, detail: String },
    #[error("i/o: {0}")]
    Io(String),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("increment of {requested} exceeds the remaining deposit {remaining}")]
    ExceedsDeposit {
        requested: TokenAmount,
        remaining: TokenAmount,
    },
    #[error("session has no open channel to the proxy")]
    NoChannel,
    #[error("operation not valid in {0:?} mode")]
    WrongMode(SessionMode),
    #[error("no edges discovered")]
    NoEdges,
    #[error("task {task} aborted at {step}: {source}")]
    Aborted {
        task: u64,
        step: &'static str,
        source: Box<NodeError>,
    },
}

impl NodeError {
    pub fn code(&self) -> &str {
        match self {
            Self::BadPayload(_) => "bad_payload",
            Self::Remote { code, .. } => code,
            Self::Io(_) => "io",
            Self::Protocol(_) => "protocol",
            Self::Channel(_) => "ledger",
            Self::ExceedsDeposit { .. } => "exceeds_deposit",
            Self::NoChannel => "no_channel",
            Self::WrongMode(_) => "wrong_mode",
            Self::NoEdges => "no_edges",
            Self::Aborted { source, .. } => source.code(),
        }
    }
}

impl From<ProxyError> for NodeError {
    fn from(e: ProxyError) -> Self {
        Self::Remote {
            code: e.code().to_string(),
            detail: e.to_string(),
        }
    }
}

impl From<std::io::Error> for NodeError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Task {
    pub id: u64,
    /// Base64-encoded image bytes.
    pub payload: String,
    pub posted_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceResult {
    pub task_id: u64,
    pub face_box: FaceBox,
    pub service_time: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub image_width: u32,
    pub image_height: u32,
    #[serde(rename = "service_time_s")]
    pub service_time: SimTime,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            image_width: 640,
            image_height: 480,
            service_time: SimTime::from_millis(14_900),
        }
    }
}

/// Stand-in for the face detector: a box derived from the image hash,
/// always inside a `width × height` frame.
pub fn face_box(image: &[u8], width: u32, height: u32) -> FaceBox {
    let h = keccak256(image).0;
    let word = |i: usize| u32::from_be_bytes([h[i], h[i + 1], h[i + 2], h[i + 3]]);
    let x = word(0) % width;
    let y = word(4) % height;
    FaceBox {
        x,
        y,
        w: 1 + word(8) % (width - x),
        h: 1 + word(12) % (height - y),
    }
}

#[derive(Debug, Clone)]
pub struct EdgeService {
    key: KeyPair,
    config: EdgeConfig,
    claims: Option<ClaimTracker>,
    served: u64,
}

impl EdgeService {
    pub fn new(key: KeyPair, config: EdgeConfig) -> Self {
        assert!(
            config.image_width > 0 && config.image_height > 0,
            "image dimensions must be positive"
        );
        Self {
            key,
            config,
            claims: None,
            served: 0,
        }
    }

    pub fn address(&self) -> Address {
        self.key.address()
    }

    pub fn key(&self) -> &KeyPair {
        &self.key
    }

    pub fn config(&self) -> &EdgeConfig {
        &self.config
    }

    pub fn served(&self) -> u64 {
        self.served
    }

    pub fn serve_task(&mut self, id: u64, image_b64: &str) -> Result<ServiceResult, NodeError> {
        let bytes = BASE64
            .decode(image_b64)
            .map_err(|e| NodeError::BadPayload(e.to_string()))?;
        if bytes.is_empty() {
            return Err(NodeError::BadPayload("empty image".into()));
        }
        self.served += 1;
        Ok(ServiceResult {
            task_id: id,
            face_box: face_box(&bytes, self.config.image_width, self.config.image_height),
            service_time: self.config.service_time,
        })
    }

    /// Stores a proxy agreement if it verifies and improves on the best one.
    /// A claim on a newer channel (after a reopen) replaces the tracker.
    pub fn accept_claim(
        &mut self,
        chain: &Chain,
        a: SignedAgreement,
    ) -> Result<ClaimOutcome, NodeError> {
        if a.receiver != self.address() {
            return Err(NodeError::Remote {
                code: "wrong_receiver".into(),
                detail: format!("claim is for {}", a.receiver),
            });
        }
        let channel =
            chain
                .open_channel_between(&a.sender, &a.receiver)
                .ok_or(ChannelError::NotOpen {
                    sender: a.sender,
                    receiver: a.receiver,
                })?;
        if self.claims.as_ref().map(|t| t.channel_id()) != Some(channel.id) {
            self.claims = Some(ClaimTracker::new(channel));
        }
        let tracker = self.claims.as_mut().expect("set above");
        Ok(tracker.accept(chain, a)?)
    }

    pub fn best_claim(&self) -> Option<&SignedAgreement> {
        self.claims.as_ref().and_then(|t| t.best())
    }

    /// Cashes out the best claim by closing the proxy→edge channel.
    pub fn close(&self, chain: &mut Chain, at: SimTime) -> Result<TxHandle, NodeError> {
        let best = self.best_claim().ok_or(NodeError::NoChannel)?;
        Ok(chain.submit_close(best, &self.key, at.max(chain.clock()))?)
    }
}

/// Transport between a terminal and the proxy/edges, plus access to the
/// ledger both sides observe.
pub trait Network {
    fn discover(&mut self) -> Result<Vec<EdgeSummary>, NodeError>;
    fn request_match(&mut self, req: &MatchRequest) -> Result<MatchResult, NodeError>;
    fn serve(&mut self, edge: &EdgeSummary, task: &Task) -> Result<ServiceResult, NodeError>;
    fn pay(
        &mut self,
        agreement: &SignedAgreement,
        edge: Address,
        withdraw: bool,
    ) -> Result<PayAck, NodeError>;
    fn proxy_address(&self) -> Address;
    fn with_chain<R>(&mut self, f: impl FnOnce(&mut Chain) -> R) -> R;
}

/// Everything in one process, no sockets; what the experiments run on.
#[derive(Debug, Clone)]
pub struct LocalNetwork {
    chain: Chain,
    proxy: Proxy,
    edges: BTreeMap<Address, EdgeService>,
}

impl LocalNetwork {
    pub fn new(chain: Chain, proxy: Proxy) -> Self {
        Self {
            chain,
            proxy,
            edges: BTreeMap::new(),
        }
    }

    /// Registers `edge` with the proxy (opening and confirming its channel).
    pub fn add_edge(
        &mut self,
        edge: EdgeService,
        price_model: PriceModel,
    ) -> Result<EdgeRecord, NodeError> {
        let addr = edge.address();
        let at = self.chain.clock();
        let record = self.proxy.register_edge(
            &mut self.chain,
            addr,
            format!("local:{addr}"),
            price_model,
            at,
        )?;
        self.edges.insert(addr, edge);
        Ok(record)
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn chain_mut(&mut self) -> &mut Chain {
        &mut self.chain
    }

    pub fn proxy(&self) -> &Proxy {
        &self.proxy
    }

    pub fn proxy_mut(&mut self) -> &mut Proxy {
        &mut self.proxy
    }

    pub fn edge(&self, a: &Address) -> Option<&EdgeService> {
        self.edges.get(a)
    }
}

impl Network for LocalNetwork {
    fn discover(&mut self) -> Result<Vec<EdgeSummary>, NodeError> {
        Ok(self.proxy.discover(&self.chain))
    }

    fn request_match(&mut self, req: &MatchRequest) -> Result<MatchResult, NodeError> {
        Ok(self.proxy.schedule(&self.chain, req)?)
    }

    fn serve(&mut self, edge: &EdgeSummary, task: &Task) -> Result<ServiceResult, NodeError> {
        let service = self
            .edges
            .get_mut(&edge.ledger_address)
            .ok_or_else(|| NodeError::Io(format!("no route to {}", edge.network_address)))?;
        service.serve_task(task.id, &task.payload)
    }

    fn pay(
        &mut self,
        agreement: &SignedAgreement,
        edge: Address,
        withdraw: bool,
    ) -> Result<PayAck, NodeError> {
        let at = self.chain.clock();
        let receipt =
            self.proxy
                .relay_payment(&mut self.chain, agreement.clone(), edge, withdraw, at)?;
        if let Some(service) = self.edges.get_mut(&edge) {
            service.accept_claim(&self.chain, receipt.edge_agreement.clone())?;
        }
        Ok(PayAck {
            agreement: receipt.edge_agreement,
            close_tx: receipt.close_tx,
        })
    }

    fn proxy_address(&self) -> Address {
        self.proxy.address()
    }

    fn with_chain<R>(&mut self, f: impl FnOnce(&mut Chain) -> R) -> R {
        f(&mut self.chain)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SessionMode {
    #[serde(rename = "PC")]
    Pc,
    #[serde(rename = "WPC")]
    Wpc,
}

impl SessionMode {
    pub fn label(self) -> &'static str {
        match self {
            Self::Pc => "PC",
            Self::Wpc => "WPC",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TerminalSession {
    key: KeyPair,
    mode: SessionMode,
    digest_mode: DigestMode,
    channel: Option<Channel>,
    cumulative_paid: TokenAmount,
    open_receipt: Option<Receipt>,
    now: SimTime,
}

impl TerminalSession {
    pub fn new(key: KeyPair, mode: SessionMode) -> Self {
        Self {
            key,
            mode,
            digest_mode: DigestMode::Salted,
            channel: None,
            cumulative_paid: TokenAmount::ZERO,
            open_receipt: None,
            now: SimTime::ZERO,
        }
    }

    pub fn address(&self) -> Address {
        self.key.address()
    }

    pub fn mode(&self) -> SessionMode {
        self.mode
    }

    pub fn channel(&self) -> Option<&Channel> {
        self.channel.as_ref()
    }

    pub fn cumulative_paid(&self) -> TokenAmount {
        self.cumulative_paid
    }

    pub fn open_receipt(&self) -> Option<&Receipt> {
        self.open_receipt.as_ref()
    }

    /// Opens the user→proxy channel and waits for it to confirm.
    pub fn open<N: Network>(
        &mut self,
        net: &mut N,
        deposit: TokenAmount,
    ) -> Result<Receipt, NodeError> {
        if self.mode != SessionMode::Pc {
            return Err(NodeError::WrongMode(self.mode));
        }
        let proxy = net.proxy_address();
        let key = &self.key;
        let (channel, receipt, mode) = net.with_chain(|chain| {
            let at = chain.clock();
            chain
                .open_channel(key, proxy, deposit, at)
                .map(|(c, r)| (c, r, chain.mode()))
        })?;
        self.channel = Some(channel);
        self.digest_mode = mode;
        self.cumulative_paid = TokenAmount::ZERO;
        self.now = receipt.included_at;
        self.open_receipt = Some(receipt.clone());
        Ok(receipt)
    }

    /// Signs a new cumulative agreement raised by `increment`.
    pub fn make_agreement(&mut self, increment: TokenAmount) -> Result<SignedAgreement, NodeError> {
        if self.mode != SessionMode::Pc {
            return Err(NodeError::WrongMode(self.mode));
        }
        let channel = self.channel.as_ref().ok_or(NodeError::NoChannel)?;
        let remaining = channel.deposit.saturating_sub(self.cumulative_paid);
        if increment > remaining {
            return Err(NodeError::ExceedsDeposit {
                requested: increment,
                remaining,
            });
        }
        self.cumulative_paid = self.cumulative_paid + increment;
        Ok(SignedAgreement::sign(
            &self.key,
            channel,
            self.cumulative_paid,
            self.digest_mode,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RunOptions {
    /// Ask the proxy to close the user channel along with the last payment.
    pub withdraw_on_last: bool,
    /// Sign task `k`'s agreement with a stranger's key (fault injection).
    pub forge_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: u64,
    pub edge: Address,
    pub price: TokenAmount,
    pub face_box: FaceBox,
    pub finished_at: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionReport {
    pub mode: SessionMode,
    pub tasks: Vec<TaskRecord>,
    /// From the first on-chain submission to the last confirmation or
    /// service completion.
    pub total_time: SimTime,
    /// Gas attributable to the session, whoever paid it.
    pub gas_fee: TokenAmount,
    pub gas_units: u64,
    pub close_receipt: Option<Receipt>,
}

impl SessionReport {
    pub fn total_paid(&self) -> TokenAmount {
        self.tasks.iter().map(|t| t.price).sum()
    }
}

/// Deterministic pseudo-image for task `id` of `user`.
pub fn task_payload(user: &Address, id: u64) -> String {
    let mut bytes = Vec::with_capacity(256);
    let mut block = keccak256([user.0.as_slice(), &id.to_be_bytes()].concat());
    while bytes.len() < 256 {
        bytes.extend_from_slice(&block.0);
        block = keccak256(block);
    }
    BASE64.encode(bytes)
}

/// Runs `f`, retrying it once; a second failure aborts the task.
fn attempt<T>(
    task: u64,
    step: &'static str,
    mut f: impl FnMut() -> Result<T, NodeError>,
) -> Result<T, NodeError> {
    f().or_else(|_| f()).map_err(|e| NodeError::Aborted {
        task,
        step,
        source: Box::new(e),
    })
}

/// Running totals of a session in progress.
#[derive(Debug, Clone)]
struct Progress {
    started_at: SimTime,
    gas_fee: TokenAmount,
    gas_units: u64,
    tasks: Vec<TaskRecord>,
    close_receipt: Option<Receipt>,
}

impl Progress {
    fn start<N: Network>(session: &mut TerminalSession, net: &mut N) -> Result<Self, NodeError> {
        let schedule = net.with_chain(|c| c.config().gas_schedule);
        let (started_at, gas_fee, gas_units) = match session.mode {
            SessionMode::Pc => {
                let open = session.open_receipt.as_ref().ok_or(NodeError::NoChannel)?;
                (open.submitted_at, open.fee, schedule.open_gas)
            }
            SessionMode::Wpc => {
                session.now = session.now.max(net.with_chain(|c| c.clock()));
                (session.now, TokenAmount::ZERO, 0)
            }
        };
        Ok(Self {
            started_at,
            gas_fee,
            gas_units,
            tasks: Vec::new(),
            close_receipt: None,
        })
    }

    fn report(self, session: &TerminalSession) -> SessionReport {
        SessionReport {
            mode: session.mode,
            tasks: self.tasks,
            total_time: session.now - self.started_at,
            gas_fee: self.gas_fee,
            gas_units: self.gas_units,
            close_receipt: self.close_receipt,
        }
    }
}

/// Carries task `id` from discovery through payment.
fn run_task<N: Network>(
    session: &mut TerminalSession,
    net: &mut N,
    progress: &mut Progress,
    id: u64,
    withdraw: bool,
    forge: bool,
) -> Result<(), NodeError> {
    let schedule = net.with_chain(|c| c.config().gas_schedule);
    let user = session.address();
    let task = Task {
        id,
        payload: task_payload(&user, id),
        posted_at: session.now,
    };
    let edges = attempt(id, "discover", || match net.discover()? {
        v if v.is_empty() => Err(NodeError::NoEdges),
        v => Ok(v),
    })?;
    let req = MatchRequest {
        user,
        candidates: edges.iter().map(|e| e.ledger_address).collect(),
        task_descriptor: format!("face-detect#{id}"),
    };
    let matched = attempt(id, "match", || net.request_match(&req))?;
    let edge = edges
        .iter()
        .find(|e| e.ledger_address == matched.chosen_edge)
        .ok_or_else(|| NodeError::Protocol("proxy chose an edge outside the candidates".into()))?;
    let result = attempt(id, "serve", || net.serve(edge, &task))?;
    session.now = session.now + result.service_time;
    let now = session.now;
    net.with_chain(|c| c.advance_until(now))?;

    match session.mode {
        SessionMode::Pc => {
            let mut agreement = session.make_agreement(matched.quoted_price)?;
            if forge {
                let stranger = KeyPair::from_label("forger");
                agreement.signature = SignedAgreement::sign(
                    &stranger,
                    session.channel.as_ref().expect("checked by make_agreement"),
                    agreement.cumulative_value,
                    session.digest_mode,
                )
                .signature;
            }
            let ack = attempt(id, "pay", || {
                net.pay(&agreement, matched.chosen_edge, withdraw)
            })?;
            if let Some(close) = ack.close_tx {
                let receipt = net.with_chain(|c| c.wait(close))?;
                progress.gas_fee = progress.gas_fee + receipt.fee;
                progress.gas_units += schedule.close_gas;
                session.now = receipt.included_at;
                progress.close_receipt = Some(receipt);
            }
        }
        SessionMode::Wpc => {
            let key = &session.key;
            let receipt = net.with_chain(|c| {
                c.submit_transfer(key, matched.chosen_edge, matched.quoted_price, now)
                    .and_then(|h| c.wait(h))
            })?;
            progress.gas_fee = progress.gas_fee + receipt.fee;
            progress.gas_units += schedule.transfer_gas;
            session.now = receipt.included_at;
        }
    }
    progress.tasks.push(TaskRecord {
        id,
        edge: matched.chosen_edge,
        price: matched.quoted_price,
        face_box: result.face_box,
        finished_at: session.now,
    });
    Ok(())
}

/// Runs `n` tasks back to back. Each task is discovered, matched, served,
/// then paid for; task k+1 starts once task k is settled.
pub fn run_tasks<N: Network>(
    session: &mut TerminalSession,
    net: &mut N,
    n: u64,
    opts: RunOptions,
) -> Result<SessionReport, NodeError> {
    let mut progress = Progress::start(session, net)?;
    for id in 0..n {
        let withdraw = opts.withdraw_on_last && id + 1 == n;
        run_task(
            session,
            net,
            &mut progress,
            id,
            withdraw,
            opts.forge_at == Some(id),
        )?;
    }
    Ok(progress.report(session))
}

/// Runs one session per entry of `counts` by sharing their common prefix.
///
/// A session of `k` tasks is the first `k − 1` tasks of the longest one
/// followed by a final task run on a copy of the state, so the result for
/// each `k` equals `run_tasks(session, net, k, opts)` on the original state.
/// Returns the reports and the final networks in ascending task count.
pub fn run_task_prefixes<N: Network + Clone>(
    session: &mut TerminalSession,
    net: &mut N,
    counts: &[u64],
    opts: RunOptions,
) -> Result<Vec<(u64, SessionReport, N)>, NodeError> {
    let mut counts = counts.to_vec();
    counts.sort_unstable();
    counts.dedup();
    let Some(&longest) = counts.last() else {
        return Ok(Vec::new());
    };
    let mut progress = Progress::start(session, net)?;
    let mut out = Vec::with_capacity(counts.len());
    for id in 0..longest {
        let forge = opts.forge_at == Some(id);
        if counts.binary_search(&(id + 1)).is_ok() {
            let (mut s, mut n, mut p) = (session.clone(), net.clone(), progress.clone());
            run_task(&mut s, &mut n, &mut p, id, opts.withdraw_on_last, forge)?;
            out.push((id + 1, p.report(&s), n));
        }
        if id + 1 < longest {
            run_task(session, net, &mut progress, id, false, forge)?;
        }
    }
    Ok(out)
}
