//! Socket transport: proxy and edge servers plus a terminal-side client.
//!
//! The ledger is not networked. Every actor in a process shares one
//! [`SharedChain`], whose mutex is the single exclusive-access point the
//! ledger requires.

use std::io::{self, BufReader};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::channel::{Chain, SignedAgreement};
use crate::crypto::Address;
use crate::node::{EdgeService, Network, NodeError, ServiceResult, Task};
use crate::pricing::PriceModel;
use crate::proxy::{EdgeRecord, EdgeSummary, MatchRequest, MatchResult, Proxy, ProxyError};
use crate::wire::{
    recv, send, EdgeRequest, EdgeResponse, PayAck, PayRequest, ProxyMessage, RegisterEdge,
    WireError,
};

pub type SharedChain = Arc<Mutex<Chain>>;

/// Connection attempts before giving up, with doubling sleeps in between.
const CONNECT_ATTEMPTS: u32 = 4;
const CONNECT_BACKOFF: Duration = Duration::from_millis(25);
const IO_TIMEOUT: Duration = Duration::from_secs(10);

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    // A panicked handler thread must not wedge the remaining actors.
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

fn connect(addr: &str) -> io::Result<TcpStream> {
    let mut delay = CONNECT_BACKOFF;
    let mut last = None;
    for attempt in 0..CONNECT_ATTEMPTS {
        if attempt > 0 {
            thread::sleep(delay);
            delay *= 2;
        }
        match addr.to_socket_addrs().and_then(|mut a| {
            a.next()
                .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "no address"))
                .and_then(|sa| TcpStream::connect_timeout(&sa, IO_TIMEOUT))
        }) {
            Ok(s) => {
                s.set_read_timeout(Some(IO_TIMEOUT))?;
                s.set_write_timeout(Some(IO_TIMEOUT))?;
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) => last = Some(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

/// One persistent request/response connection.
struct Conn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Conn {
    fn open(addr: &str) -> io::Result<Self> {
        let stream = connect(addr)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    fn call<Req: serde::Serialize, Resp: serde::de::DeserializeOwned>(
        &mut self,
        req: &Req,
    ) -> io::Result<Resp> {
        send(&mut self.writer, req)?;
        recv(&mut self.reader)?
            .ok_or_else(|| io::Error::new(io::ErrorKind::UnexpectedEof, "peer closed"))
    }
}

/// A running accept loop. Dropping it does not stop the server; call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn serve<F>(bind: &str, handler: F) -> io::Result<ServerHandle>
where
    F: Fn(TcpStream) + Send + Sync + 'static,
{
    let listener = TcpListener::bind(bind)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let handler = Arc::new(handler);
    let flag = stop.clone();
    let thread = thread::Builder::new()
        .name(format!("accept-{addr}"))
        .spawn(move || {
            for stream in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { continue };
                let h = handler.clone();
                let _ = thread::Builder::new().spawn(move || h(stream));
            }
        })?;
    Ok(ServerHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}

fn wire_error(code: &str, detail: impl ToString) -> WireError {
    WireError {
        code: code.to_string(),
        detail: detail.to_string(),
    }
}

impl From<ProxyError> for WireError {
    fn from(e: ProxyError) -> Self {
        wire_error(e.code(), e)
    }
}

/// The proxy behind a socket.
pub struct ProxyServer {
    handle: ServerHandle,
    proxy: Arc<Mutex<Proxy>>,
}

impl ProxyServer {
    pub fn spawn(bind: &str, proxy: Proxy, chain: SharedChain) -> io::Result<Self> {
        let proxy = Arc::new(Mutex::new(proxy));
        let shared = proxy.clone();
        let handle = serve(bind, move |stream| {
            let _ = handle_proxy_conn(stream, &shared, &chain);
        })?;
        Ok(Self { handle, proxy })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.handle.local_addr()
    }

    pub fn proxy(&self) -> MutexGuard<'_, Proxy> {
        lock(&self.proxy)
    }

    pub fn shutdown(self) {
        self.handle.shutdown();
    }
}

fn handle_proxy_conn(
    stream: TcpStream,
    proxy: &Mutex<Proxy>,
    chain: &Mutex<Chain>,
) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    loop {
        let reply = match recv::<_, ProxyMessage>(&mut reader) {
            Ok(None) => break,
            Ok(Some(msg)) => proxy_reply(msg, proxy, chain),
            Err(e) if e.kind() == io::ErrorKind::InvalidData => {
                ProxyMessage::Error(wire_error("bad_request", e))
            }
            Err(e) => return Err(e),
        };
        send(&mut writer, &reply)?;
    }
    let _ = writer.shutdown(Shutdown::Both);
    Ok(())
}

fn proxy_reply(msg: ProxyMessage, proxy: &Mutex<Proxy>, chain: &Mutex<Chain>) -> ProxyMessage {
    match msg {
        ProxyMessage::RegisterEdge(r) => {
            let model = r
                .price_model
                .unwrap_or_else(|| PriceModel::scheme(1).expect("scheme 1 exists"));
            let mut p = lock(proxy);
            let mut c = lock(chain);
            let at = c.clock();
            match p.register_edge(&mut c, r.ledger_address, r.network_address, model, at) {
                Ok(record) => ProxyMessage::RegisterAck(record),
                Err(e) => ProxyMessage::Error(e.into()),
            }
        }
        ProxyMessage::Discover {} => {
            let p = lock(proxy);
            let c = lock(chain);
            ProxyMessage::EdgeList {
                edges: p.discover(&c),
            }
        }
        ProxyMessage::MatchRequest(req) => {
            let mut p = lock(proxy);
            let c = lock(chain);
            match p.schedule(&c, &req) {
                Ok(m) => ProxyMessage::MatchResult(m),
                Err(e) => ProxyMessage::Error(e.into()),
            }
        }
        ProxyMessage::Pay(req) => relay(req, proxy, chain),
        other => ProxyMessage::Error(wire_error(
            "unexpected_message",
            format!("proxy does not accept {}", message_type(&other)),
        )),
    }
}

fn message_type(m: &ProxyMessage) -> String {
    serde_json::to_value(m)
        .ok()
        .and_then(|v| v.get("type").and_then(|t| t.as_str()).map(str::to_owned))
        .unwrap_or_default()
}

fn relay(req: PayRequest, proxy: &Mutex<Proxy>, chain: &Mutex<Chain>) -> ProxyMessage {
    let mut p = lock(proxy);
    let (receipt, edge_addr) = {
        let mut c = lock(chain);
        let at = c.clock();
        match p.relay_payment(&mut c, req.agreement, req.edge, req.withdraw, at) {
            Ok(r) => (r, p.edge(&req.edge).map(|e| e.network_address.clone())),
            Err(e) => return ProxyMessage::Error(e.into()),
        }
    };
    // The chain lock is released: the edge verifies the claim against it.
    if let Some(addr) = edge_addr {
        if let Err(e) = deliver_claim(&addr, &receipt.edge_agreement) {
            return ProxyMessage::Error(wire_error("edge_unreachable", e));
        }
    }
    ProxyMessage::PayAck(PayAck {
        agreement: receipt.edge_agreement,
        close_tx: receipt.close_tx,
    })
}

fn deliver_claim(addr: &str, agreement: &SignedAgreement) -> Result<(), String> {
    let mut conn = Conn::open(addr).map_err(|e| e.to_string())?;
    match conn.call::<_, EdgeResponse>(&EdgeRequest::Claim {
        agreement: agreement.clone(),
    }) {
        Ok(EdgeResponse::ClaimAck { .. }) => Ok(()),
        Ok(EdgeResponse::Error { code, detail }) => Err(format!("{code}: {detail}")),
        Ok(other) => Err(format!("unexpected reply {other:?}")),
        Err(e) => Err(e.to_string()),
    }
}

/// An edge behind a socket.
pub struct EdgeServer {
    handle: ServerHandle,
    service: Arc<Mutex<EdgeService>>,
}

impl EdgeServer {
    pub fn spawn(bind: &str, service: EdgeService, chain: SharedChain) -> io::Result<Self> {
        let service = Arc::new(Mutex::new(service));
        let shared = service.clone();
        let handle = serve(bind, move |stream| {
            let _ = handle_edge_conn(stream, &shared, &chain);
        })?;
        Ok(Self { handle, service })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.handle.local_addr()
    }

    pub fn service(&self) -> MutexGuard<'_, EdgeService> {
        lock(&self.service)
    }

    /// Announces this edge to the proxy at `proxy_addr`.
    pub fn register(
        &self,
        proxy_addr: &str,
        price_model: Option<PriceModel>,
    ) -> Result<EdgeRecord, NodeError> {
        let ledger_address = self.service().address();
        let mut conn = Conn::open(proxy_addr)?;
        let reply: ProxyMessage = conn.call(&ProxyMessage::RegisterEdge(RegisterEdge {
            ledger_address,
            network_address: self.local_addr().to_string(),
            price_model,
        }))?;
        match reply {
            ProxyMessage::RegisterAck(r) => Ok(r),
            other => Err(remote_error(other)),
        }
    }

    pub fn shutdown(self) {
        self.handle.shutdown();
    }
}

fn handle_edge_conn(
    stream: TcpStream,
    service: &Mutex<EdgeService>,
    chain: &Mutex<Chain>,
) -> io::Result<()> {
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = stream;
    loop {
        let reply = match recv::<_, EdgeRequest>(&mut reader) {
            Ok(None) => break,
            Ok(Some(EdgeRequest::Task { id, image_b64 })) => {
                match lock(service).serve_task(id, &image_b64) {
                    Ok(r) => EdgeResponse::Result {
                        id,
                        face: r.face_box,
                        service_time_s: Some(r.service_time),
                    },
                    Err(e) => EdgeResponse::Error {
                        code: e.code().to_string(),
                        detail: String::new(),
                    },
                }
            }
            Ok(Some(EdgeRequest::Claim { agreement })) => {
                let mut svc = lock(service);
                let c = lock(chain);
                match svc.accept_claim(&c, agreement) {
                    Ok(_) => EdgeResponse::ClaimAck {
                        best: svc
                            .best_claim()
                            .map(|a| a.cumulative_value)
                            .unwrap_or_default(),
                    },
                    Err(e) => EdgeResponse::Error {
                        code: e.code().to_string(),
                        detail: e.to_string(),
                    },
                }
            }
            Err(e) if e.kind() == io::ErrorKind::InvalidData => EdgeResponse::Error {
                code: "bad_payload".into(),
                detail: e.to_string(),
            },
            Err(e) => return Err(e),
        };
        send(&mut writer, &reply)?;
    }
    let _ = writer.shutdown(Shutdown::Both);
    Ok(())
}

fn remote_error(msg: ProxyMessage) -> NodeError {
    match msg {
        ProxyMessage::Error(WireError { code, detail }) => NodeError::Remote { code, detail },
        other => NodeError::Protocol(format!("unexpected reply {}", message_type(&other))),
    }
}

/// Terminal-side transport over sockets.
pub struct TcpNetwork {
    proxy_addr: String,
    proxy_address: Address,
    conn: Option<Conn>,
    chain: SharedChain,
}

impl TcpNetwork {
    pub fn new(proxy_addr: impl Into<String>, proxy_address: Address, chain: SharedChain) -> Self {
        Self {
            proxy_addr: proxy_addr.into(),
            proxy_address,
            conn: None,
            chain,
        }
    }

    /// One proxy round trip; a broken connection is dropped so the
    /// caller's retry reconnects.
    fn call(&mut self, msg: &ProxyMessage) -> Result<ProxyMessage, NodeError> {
        if self.conn.is_none() {
            self.conn = Some(Conn::open(&self.proxy_addr)?);
        }
        let conn = self.conn.as_mut().expect("connected");
        conn.call(msg).map_err(|e| {
            self.conn = None;
            NodeError::from(e)
        })
    }
}

impl Network for TcpNetwork {
    fn discover(&mut self) -> Result<Vec<EdgeSummary>, NodeError> {
        match self.call(&ProxyMessage::Discover {})? {
            ProxyMessage::EdgeList { edges } => Ok(edges),
            other => Err(remote_error(other)),
        }
    }

    fn request_match(&mut self, req: &MatchRequest) -> Result<MatchResult, NodeError> {
        match self.call(&ProxyMessage::MatchRequest(req.clone()))? {
            ProxyMessage::MatchResult(m) => Ok(m),
            other => Err(remote_error(other)),
        }
    }

    fn serve(&mut self, edge: &EdgeSummary, task: &Task) -> Result<ServiceResult, NodeError> {
        let mut conn = Conn::open(&edge.network_address)?;
        let reply: EdgeResponse = conn.call(&EdgeRequest::Task {
            id: task.id,
            image_b64: task.payload.clone(),
        })?;
        match reply {
            EdgeResponse::Result {
                id,
                face,
                service_time_s,
            } if id == task.id => Ok(ServiceResult {
                task_id: id,
                face_box: face,
                service_time: service_time_s.ok_or_else(|| {
                    NodeError::Protocol("edge did not report service time".into())
                })?,
            }),
            EdgeResponse::Error { code, detail } if code == "bad_payload" => {
                Err(NodeError::BadPayload(detail))
            }
            EdgeResponse::Error { code, detail } => Err(NodeError::Remote { code, detail }),
            other => Err(NodeError::Protocol(format!(
                "unexpected edge reply {other:?}"
            ))),
        }
    }

    fn pay(
        &mut self,
        agreement: &SignedAgreement,
        edge: Address,
        withdraw: bool,
    ) -> Result<PayAck, NodeError> {
        let msg = ProxyMessage::Pay(PayRequest {
            agreement: agreement.clone(),
            edge,
            withdraw,
        });
        match self.call(&msg)? {
            ProxyMessage::PayAck(ack) => Ok(ack),
            other => Err(remote_error(other)),
        }
    }

    fn proxy_address(&self) -> Address {
        self.proxy_address
    }

    fn with_chain<R>(&mut self, f: impl FnOnce(&mut Chain) -> R) -> R {
        f(&mut lock(&self.chain))
    }
}
