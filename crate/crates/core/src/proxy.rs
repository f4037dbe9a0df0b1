//! The matching-and-relay intermediary.
//!
//! The proxy holds one channel from every user and one channel to every
//! registered edge. It picks the cheapest edge for each task and turns a
//! user's cumulative agreement into an equal-value (minus fee) agreement on
//! its own channel to the chosen edge.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chainsim::{LedgerError, SimTime, TokenAmount, TxHandle};
use crate::channel::{
    Chain, Channel, ChannelError, ChannelId, ClaimOutcome, ClaimTracker, DigestMode,
    SignedAgreement,
};
use crate::crypto::{keccak256, Address, Digest, KeyPair};
use crate::pricing::{PriceFeed, PriceModel, PricingError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub edge_deposit: TokenAmount,
    #[serde(default)]
    pub fee: TokenAmount,
    #[serde(default)]
    pub strict_paper_digest: bool,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self {
            edge_deposit: TokenAmount::from_ether(1),
            fee: TokenAmount::ZERO,
            strict_paper_digest: false,
        }
    }
}

impl ProxyConfig {
    pub fn validate(&self) -> Result<(), ProxyError> {
        if self.edge_deposit.is_zero() {
            return Err(ProxyError::InvalidConfig("edge deposit must be positive"));
        }
        if self.fee >= self.edge_deposit {
            return Err(ProxyError::InvalidConfig(
                "fee must be below the edge deposit",
            ));
        }
        Ok(())
    }

    pub fn digest_mode(&self) -> DigestMode {
        if self.strict_paper_digest {
            DigestMode::Strict
        } else {
            DigestMode::Salted
        }
    }

    /// Fixed-width encoding hashed by [`Proxy::audit_fingerprint`]:
    /// a 16-byte tag, edge deposit and fee as 32-byte big-endian words,
    /// then one byte for the digest mode.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 32 + 32 + 1);
        out.extend_from_slice(b"tollnet-proxy/v1");
        for amount in [self.edge_deposit, self.fee] {
            out.extend_from_slice(&[0u8; 16]);
            out.extend_from_slice(&amount.wei().to_be_bytes());
        }
        out.push(u8::from(self.strict_paper_digest));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeStatus {
    /// Registered, but the proxy could not yet fund its channel.
    Pending,
    Available,
    Busy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub ledger_address: Address,
    pub network_address: String,
    pub channel_id: Option<ChannelId>,
    pub registered_at: SimTime,
    pub registration_seq: u64,
    pub price_model: PriceModel,
    pub status: EdgeStatus,
}

/// What a terminal learns from discovery.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSummary {
    pub ledger_address: Address,
    pub network_address: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchRequest {
    pub user: Address,
    pub candidates: Vec<Address>,
    #[serde(default)]
    pub task_descriptor: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    pub chosen_edge: Address,
    pub quoted_price: TokenAmount,
}

/// One quoted candidate for [`greedy_select`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Candidate {
    pub edge: Address,
    pub price: TokenAmount,
    pub registration_seq: u64,
}

/// Cheapest candidate; ties go to the earliest registration, then the
/// lexicographically smallest address.
pub fn greedy_select(candidates: &[Candidate]) -> Option<&Candidate> {
    candidates
        .iter()
        .min_by_key(|c| (c.price, c.registration_seq, c.edge))
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProxyError {
    #[error("edge {0} is already registered")]
    DuplicateEdge(Address),
    #[error("edge {0} is not registered")]
    UnknownEdge(Address),
    #[error("match request has no candidates")]
    NoCandidates,
    #[error("every candidate edge is busy or lacks channel capacity; retry later")]
    AllBusy,
    #[error("edge {0} has no open channel from the proxy")]
    EdgeUnavailable(Address),
    #[error("no open channel from user {0} to the proxy")]
    NoUserChannel(Address),
    #[error("agreement is not addressed to the proxy")]
    WrongReceiver,
    #[error("user agreement failed verification")]
    InvalidAgreement,
    #[error("agreement value {offered} does not exceed the best claim {best}")]
    StaleAgreement {
        offered: TokenAmount,
        best: TokenAmount,
    },
    #[error("increment {increment} is below the relay fee {fee}")]
    BelowFee {
        increment: TokenAmount,
        fee: TokenAmount,
    },
    #[error("channel to edge {edge} would be exhausted: needs {needed}, remaining {remaining}")]
    ChannelExhausted {
        edge: Address,
        needed: TokenAmount,
        remaining: TokenAmount,
    },
    #[error("invalid proxy config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error(transparent)]
    Pricing(#[from] PricingError),
    #[error("registry log: {0}")]
    Log(String),
}

impl ProxyError {
    /// Stable wire-level error code.
    pub fn code(&self) -> &'static str {
        match self {
            Self::DuplicateEdge(_) => "duplicate_edge",
            Self::UnknownEdge(_) => "unknown_edge",
            Self::NoCandidates => "no_candidates",
            Self::AllBusy => "all_busy",
            Self::EdgeUnavailable(_) => "edge_unavailable",
            Self::NoUserChannel(_) => "no_user_channel",
            Self::WrongReceiver => "wrong_receiver",
            Self::InvalidAgreement => "invalid_agreement",
            Self::StaleAgreement { .. } => "stale_agreement",
            Self::BelowFee { .. } => "below_fee",
            Self::ChannelExhausted { .. } => "channel_exhausted",
            Self::InvalidConfig(_) => "invalid_config",
            Self::Channel(ChannelError::Ledger(LedgerError::InsufficientBalance { .. })) => {
                "insufficient_funds"
            }
            Self::Channel(_) => "ledger",
            Self::Pricing(_) => "pricing",
            Self::Log(_) => "registry_log",
        }
    }
}

/// Registration events, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RegistryEvent {
    Register {
        ledger_address: Address,
        network_address: String,
        price_model: PriceModel,
        registered_at: SimTime,
    },
}

/// Append-only registration log.
#[derive(Debug, Clone)]
pub struct RegistryLog {
    path: PathBuf,
}

impl RegistryLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&self, event: &RegistryEvent) -> Result<(), ProxyError> {
        let mut line = serde_json::to_string(event).map_err(|e| ProxyError::Log(e.to_string()))?;
        line.push('\n');
        OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(|e| ProxyError::Log(e.to_string()))
    }

    /// Reads every event; a missing file is an empty log.
    pub fn read_all(&self) -> Result<Vec<RegistryEvent>, ProxyError> {
        let file = match File::open(&self.path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(ProxyError::Log(e.to_string())),
        };
        let mut events = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| ProxyError::Log(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let event = serde_json::from_str(&line)
                .map_err(|e| ProxyError::Log(format!("line {}: {e}", i + 1)))?;
            events.push(event);
        }
        Ok(events)
    }
}

/// Proxy-side view of one user's channel.
#[derive(Debug, Clone)]
struct UserAccount {
    tracker: ClaimTracker,
    relayed: TokenAmount,
    fees: TokenAmount,
    closing: Option<TxHandle>,
}

#[derive(Debug, Clone)]
struct EdgeChannel {
    channel: Channel,
    cumulative: TokenAmount,
    last: Option<SignedAgreement>,
}

impl EdgeChannel {
    fn remaining(&self) -> TokenAmount {
        self.channel.deposit.saturating_sub(self.cumulative)
    }
}

/// Result of a successful relay.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelayReceipt {
    /// New cumulative agreement on the proxy→edge channel.
    pub edge_agreement: SignedAgreement,
    /// Close transaction for the user channel when `withdraw` was set.
    pub close_tx: Option<TxHandle>,
    pub fee_retained: TokenAmount,
}

/// Per-user relay accounting, exposed for audits and tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UserLedger {
    pub best_claim: TokenAmount,
    pub relayed_to_edges: TokenAmount,
    pub fees_retained: TokenAmount,
}

#[derive(Debug, Clone)]
pub struct Proxy {
    key: KeyPair,
    config: ProxyConfig,
    price_seed: u64,
    edges: BTreeMap<Address, EdgeRecord>,
    feeds: BTreeMap<Address, PriceFeed>,
    edge_channels: BTreeMap<Address, EdgeChannel>,
    users: BTreeMap<Address, UserAccount>,
    next_seq: u64,
    log: Option<RegistryLog>,
}

impl Proxy {
    pub fn new(key: KeyPair, config: ProxyConfig, price_seed: u64) -> Result<Self, ProxyError> {
        config.validate()?;
        Ok(Self {
            key,
            config,
            price_seed,
            edges: BTreeMap::new(),
            feeds: BTreeMap::new(),
            edge_channels: BTreeMap::new(),
            users: BTreeMap::new(),
            next_seq: 0,
            log: None,
        })
    }

    /// Persists future registrations to `log`.
    pub fn with_log(mut self, log: RegistryLog) -> Self {
        self.log = Some(log);
        self
    }

    pub fn address(&self) -> Address {
        self.key.address()
    }

    pub fn config(&self) -> &ProxyConfig {
        &self.config
    }

    pub fn audit_fingerprint(&self) -> Digest {
        keccak256(self.config.canonical_bytes())
    }

    pub fn edge(&self, a: &Address) -> Option<&EdgeRecord> {
        self.edges.get(a)
    }

    /// Edges in registration order.
    pub fn edges(&self) -> Vec<&EdgeRecord> {
        let mut v: Vec<_> = self.edges.values().collect();
        v.sort_by_key(|e| e.registration_seq);
        v
    }

    /// Registers an edge and funds its channel, waiting for confirmation.
    ///
    /// When the proxy cannot cover deposit plus gas, the record is kept as
    /// [`EdgeStatus::Pending`] and funded later by [`Proxy::retry_pending`].
    pub fn register_edge(
        &mut self,
        chain: &mut Chain,
        ledger_address: Address,
        network_address: String,
        price_model: PriceModel,
        at: SimTime,
    ) -> Result<EdgeRecord, ProxyError> {
        if self.edges.contains_key(&ledger_address) {
            return Err(ProxyError::DuplicateEdge(ledger_address));
        }
        price_model.validate()?;
        let seq = self.next_seq;
        let feed = PriceFeed::new(ledger_address, price_model, self.price_seed, seq)?;
        if let Some(log) = &self.log {
            log.append(&RegistryEvent::Register {
                ledger_address,
                network_address: network_address.clone(),
                price_model,
                registered_at: at,
            })?;
        }
        self.next_seq += 1;
        self.feeds.insert(ledger_address, feed);
        self.edges.insert(
            ledger_address,
            EdgeRecord {
                ledger_address,
                network_address,
                channel_id: None,
                registered_at: at,
                registration_seq: seq,
                price_model,
                status: EdgeStatus::Pending,
            },
        );
        self.fund_edge(chain, ledger_address, at)?;
        Ok(self.edges[&ledger_address].clone())
    }

    /// Rebuilds the registry from logged events without re-logging them.
    pub fn replay(
        &mut self,
        chain: &mut Chain,
        events: &[RegistryEvent],
    ) -> Result<usize, ProxyError> {
        let log = self.log.take();
        let mut restored = 0;
        let mut result = Ok(());
        for event in events {
            let RegistryEvent::Register {
                ledger_address,
                network_address,
                price_model,
                ..
            } = event;
            if self.edges.contains_key(ledger_address) {
                continue;
            }
            let at = chain.clock();
            if let Err(e) = self.register_edge(
                chain,
                *ledger_address,
                network_address.clone(),
                *price_model,
                at,
            ) {
                result = Err(e);
                break;
            }
            restored += 1;
        }
        self.log = log;
        result.map(|_| restored)
    }

    fn fund_edge(
        &mut self,
        chain: &mut Chain,
        edge: Address,
        at: SimTime,
    ) -> Result<bool, ProxyError> {
        let at = at.max(chain.clock());
        let handle = match chain.submit_open(&self.key, edge, self.config.edge_deposit, at) {
            Ok(h) => h,
            Err(ChannelError::Ledger(LedgerError::InsufficientBalance { .. })) => return Ok(false),
            Err(e) => return Err(e.into()),
        };
        chain.wait(handle)?;
        let channel = chain.opened_channel(handle)?.clone();
        let record = self.edges.get_mut(&edge).expect("edge registered");
        record.channel_id = Some(channel.id);
        record.status = EdgeStatus::Available;
        self.edge_channels.insert(
            edge,
            EdgeChannel {
                channel,
                cumulative: TokenAmount::ZERO,
                last: None,
            },
        );
        Ok(true)
    }

    /// Funds any edges still pending; returns how many became available.
    pub fn retry_pending(&mut self, chain: &mut Chain, at: SimTime) -> Result<usize, ProxyError> {
        let pending: Vec<Address> = self
            .edges()
            .into_iter()
            .filter(|e| e.status == EdgeStatus::Pending)
            .map(|e| e.ledger_address)
            .collect();
        let mut funded = 0;
        for edge in pending {
            if self.fund_edge(chain, edge, at)? {
                funded += 1;
            }
        }
        Ok(funded)
    }

    /// Opens a fresh channel to an edge whose previous channel was closed.
    pub fn reopen_edge_channel(
        &mut self,
        chain: &mut Chain,
        edge: Address,
        at: SimTime,
    ) -> Result<ChannelId, ProxyError> {
        if !self.edges.contains_key(&edge) {
            return Err(ProxyError::UnknownEdge(edge));
        }
        if chain.open_channel_between(&self.address(), &edge).is_some() {
            return Err(ChannelError::DuplicateOpen {
                sender: self.address(),
                receiver: edge,
            }
            .into());
        }
        self.edge_channels.remove(&edge);
        self.edges.get_mut(&edge).expect("checked").status = EdgeStatus::Pending;
        if !self.fund_edge(chain, edge, at)? {
            return Err(ChannelError::Ledger(LedgerError::InsufficientBalance {
                needed: self.config.edge_deposit,
                available: chain.balance(&self.address()),
            })
            .into());
        }
        Ok(self.edge_channels[&edge].channel.id)
    }

    pub fn set_status(&mut self, edge: &Address, status: EdgeStatus) -> Result<(), ProxyError> {
        let record = self
            .edges
            .get_mut(edge)
            .ok_or(ProxyError::UnknownEdge(*edge))?;
        if record.status != EdgeStatus::Pending {
            record.status = status;
        }
        Ok(())
    }

    /// The proxy's channel to `edge` is still the one on the ledger.
    fn edge_channel_live(&self, chain: &Chain, edge: &Address) -> Option<&EdgeChannel> {
        let ec = self.edge_channels.get(edge)?;
        match chain.open_channel_between(&self.address(), edge) {
            Some(c) if c.id == ec.channel.id => Some(ec),
            _ => None,
        }
    }

    /// Available edges whose proxy channel is live, in registration order.
    pub fn discover(&self, chain: &Chain) -> Vec<EdgeSummary> {
        self.edges()
            .into_iter()
            .filter(|e| e.status == EdgeStatus::Available)
            .filter(|e| self.edge_channel_live(chain, &e.ledger_address).is_some())
            .map(|e| EdgeSummary {
                ledger_address: e.ledger_address,
                network_address: e.network_address.clone(),
            })
            .collect()
    }

    /// Re-samples every edge's price for a new task epoch and picks the
    /// cheapest eligible candidate. Candidates that are busy, or whose
    /// channel could not absorb their own quote, are skipped.
    pub fn schedule(
        &mut self,
        chain: &Chain,
        req: &MatchRequest,
    ) -> Result<MatchResult, ProxyError> {
        if req.candidates.is_empty() {
            return Err(ProxyError::NoCandidates);
        }
        if let Some(unknown) = req.candidates.iter().find(|c| !self.edges.contains_key(c)) {
            return Err(ProxyError::UnknownEdge(*unknown));
        }
        let quotes: BTreeMap<Address, TokenAmount> = self
            .feeds
            .iter_mut()
            .map(|(a, f)| (*a, f.advance().price))
            .collect();
        let fee = self.config.fee;
        let eligible: Vec<Candidate> = req
            .candidates
            .iter()
            .filter(|a| self.edges[*a].status == EdgeStatus::Available)
            .filter_map(|a| {
                let price = quotes[a];
                let ec = self.edge_channel_live(chain, a)?;
                (price.saturating_sub(fee) <= ec.remaining()).then_some(Candidate {
                    edge: *a,
                    price,
                    registration_seq: self.edges[a].registration_seq,
                })
            })
            .collect();
        let best = greedy_select(&eligible).ok_or(ProxyError::AllBusy)?;
        Ok(MatchResult {
            chosen_edge: best.edge,
            quoted_price: best.price,
        })
    }

    /// Verifies a user's cumulative agreement and signs the matching
    /// increment (minus fee) to `edge`. Nothing is signed on any failure.
    pub fn relay_payment(
        &mut self,
        chain: &mut Chain,
        agreement: SignedAgreement,
        edge: Address,
        withdraw: bool,
        at: SimTime,
    ) -> Result<RelayReceipt, ProxyError> {
        let me = self.address();
        if agreement.receiver != me {
            return Err(ProxyError::WrongReceiver);
        }
        if !self.edges.contains_key(&edge) {
            return Err(ProxyError::UnknownEdge(edge));
        }
        let user = agreement.sender;
        let user_channel = chain
            .open_channel_between(&user, &me)
            .ok_or(ProxyError::NoUserChannel(user))?
            .clone();
        let account = self.users.entry(user).or_insert_with(|| UserAccount {
            tracker: ClaimTracker::new(&user_channel),
            relayed: TokenAmount::ZERO,
            fees: TokenAmount::ZERO,
            closing: None,
        });
        if account.tracker.channel_id() != user_channel.id {
            *account = UserAccount {
                tracker: ClaimTracker::new(&user_channel),
                relayed: TokenAmount::ZERO,
                fees: TokenAmount::ZERO,
                closing: None,
            };
        }
        let best = account.tracker.best_value();
        if agreement.cumulative_value <= best {
            return Err(ProxyError::StaleAgreement {
                offered: agreement.cumulative_value,
                best,
            });
        }
        let increment = agreement.cumulative_value - best;
        let fee = self.config.fee;
        if increment < fee {
            return Err(ProxyError::BelowFee { increment, fee });
        }
        let edge_increment = increment - fee;
        let ec = self
            .edge_channel_live(chain, &edge)
            .ok_or(ProxyError::EdgeUnavailable(edge))?;
        if edge_increment > ec.remaining() {
            return Err(ProxyError::ChannelExhausted {
                edge,
                needed: edge_increment,
                remaining: ec.remaining(),
            });
        }

        let account = self.users.get_mut(&user).expect("inserted above");
        match account.tracker.accept(chain, agreement) {
            Ok(ClaimOutcome::Improved) => {}
            Ok(ClaimOutcome::Stale) => unreachable!("value checked above"),
            Err(ChannelError::InvalidAgreement) => return Err(ProxyError::InvalidAgreement),
            Err(e) => return Err(e.into()),
        }
        account.relayed = account.relayed + edge_increment;
        account.fees = account.fees + fee;

        let mode = chain.mode();
        let ec = self.edge_channels.get_mut(&edge).expect("live channel");
        ec.cumulative = ec.cumulative + edge_increment;
        let edge_agreement = SignedAgreement::sign(&self.key, &ec.channel, ec.cumulative, mode);
        ec.last = Some(edge_agreement.clone());

        let close_tx = if withdraw {
            let latest = account.tracker.best().expect("just accepted").clone();
            let handle = chain.submit_close(&latest, &self.key, at.max(chain.clock()))?;
            account.closing = Some(handle);
            Some(handle)
        } else {
            None
        };
        Ok(RelayReceipt {
            edge_agreement,
            close_tx,
            fee_retained: fee,
        })
    }

    /// Closes a user's channel with the best claim held.
    pub fn close_user_channel(
        &mut self,
        chain: &mut Chain,
        user: &Address,
        at: SimTime,
    ) -> Result<TxHandle, ProxyError> {
        let account = self
            .users
            .get_mut(user)
            .ok_or(ProxyError::NoUserChannel(*user))?;
        let best = account
            .tracker
            .best()
            .ok_or(ProxyError::NoUserChannel(*user))?
            .clone();
        let handle = chain.submit_close(&best, &self.key, at.max(chain.clock()))?;
        account.closing = Some(handle);
        Ok(handle)
    }

    pub fn user_ledger(&self, user: &Address) -> Option<UserLedger> {
        self.users.get(user).map(|a| UserLedger {
            best_claim: a.tracker.best_value(),
            relayed_to_edges: a.relayed,
            fees_retained: a.fees,
        })
    }

    /// Cumulative value promised to `edge` on the current channel.
    pub fn edge_cumulative(&self, edge: &Address) -> TokenAmount {
        self.edge_channels
            .get(edge)
            .map(|ec| ec.cumulative)
            .unwrap_or_default()
    }

    pub fn edge_agreement(&self, edge: &Address) -> Option<&SignedAgreement> {
        self.edge_channels.get(edge).and_then(|ec| ec.last.as_ref())
    }

    pub fn edge_channel(&self, edge: &Address) -> Option<&Channel> {
        self.edge_channels.get(edge).map(|ec| &ec.channel)
    }
}
