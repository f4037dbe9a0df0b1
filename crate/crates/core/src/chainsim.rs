//! Deterministic simulated ledger.
//!
//! Accounts hold wei balances, transactions are queued until the next block
//! strictly after their submission time, and every transaction pays
//! `gas_used × gas_price` into [`FEE_SINK`]. The sum of all balances, fee sink
//! and contract escrow included, never changes.
//!
//! Contract calls (channel open/close) are dispatched at inclusion time to a
//! [`Contract`] supplied by the caller of [`Ledger::advance_until_with`]. A
//! failing contract call reverts its value transfer but still pays gas.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::iter::Sum;
use std::ops::{Add, Sub};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::crypto::{Address, Signature};

pub const WEI_PER_GWEI: u128 = 1_000_000_000;
pub const WEI_PER_ETHER: u128 = 1_000_000_000_000_000_000;

/// Account receiving every gas fee.
pub const FEE_SINK: Address = Address([0xfe; 20]);

/// Non-negative wei quantity with checked arithmetic.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct TokenAmount(u128);

impl TokenAmount {
    pub const ZERO: TokenAmount = TokenAmount(0);

    pub const fn from_wei(wei: u128) -> Self {
        Self(wei)
    }

    pub const fn from_gwei(gwei: u128) -> Self {
        Self(gwei * WEI_PER_GWEI)
    }

    pub const fn from_ether(ether: u128) -> Self {
        Self(ether * WEI_PER_ETHER)
    }

    /// Milli-ether, handy for prices such as 0.207 ether = 207 milli.
    pub const fn from_milli_ether(milli: u128) -> Self {
        Self(milli * (WEI_PER_ETHER / 1000))
    }

    pub const fn wei(self) -> u128 {
        self.0
    }

    pub fn is_zero(self) -> bool {
        self.0 == 0
    }

    pub fn as_ether_f64(self) -> f64 {
        let whole = self.0 / WEI_PER_ETHER;
        let frac = self.0 % WEI_PER_ETHER;
        whole as f64 + frac as f64 / WEI_PER_ETHER as f64
    }

    pub fn checked_add(self, rhs: Self) -> Option<Self> {
        self.0.checked_add(rhs.0).map(Self)
    }

    pub fn checked_sub(self, rhs: Self) -> Option<Self> {
        self.0.checked_sub(rhs.0).map(Self)
    }

    pub fn checked_mul(self, factor: u128) -> Option<Self> {
        self.0.checked_mul(factor).map(Self)
    }

    pub fn saturating_sub(self, rhs: Self) -> Self {
        Self(self.0.saturating_sub(rhs.0))
    }
}

impl Add for TokenAmount {
    type Output = TokenAmount;

    fn add(self, rhs: Self) -> Self {
        self.checked_add(rhs).expect("token amount overflow")
    }
}

impl Sub for TokenAmount {
    type Output = TokenAmount;

    fn sub(self, rhs: Self) -> Self {
        self.checked_sub(rhs).expect("token amount underflow")
    }
}

impl Sum for TokenAmount {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(TokenAmount::ZERO, Add::add)
    }
}

impl fmt::Display for TokenAmount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Debug for TokenAmount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} wei", self.0)
    }
}

impl FromStr for TokenAmount {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse::<u128>().map(Self)
    }
}

// Decimal wei strings on the wire; u128 does not survive a JSON number.
impl Serialize for TokenAmount {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TokenAmount {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Simulated time with millisecond resolution.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct SimTime(u64);

impl SimTime {
    pub const ZERO: SimTime = SimTime(0);

    pub const fn from_millis(ms: u64) -> Self {
        Self(ms)
    }

    pub const fn from_secs(s: u64) -> Self {
        Self(s * 1000)
    }

    pub fn from_secs_f64(s: f64) -> Self {
        assert!(s.is_finite() && s >= 0.0, "negative or non-finite time {s}");
        Self((s * 1000.0).round() as u64)
    }

    pub const fn millis(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl Add for SimTime {
    type Output = SimTime;

    fn add(self, rhs: Self) -> Self {
        Self(self.0 + rhs.0)
    }
}

impl Sub for SimTime {
    type Output = SimTime;

    fn sub(self, rhs: Self) -> Self {
        Self(self.0 - rhs.0)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}s", self.as_secs_f64())
    }
}

impl fmt::Debug for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

impl Serialize for SimTime {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_f64(self.as_secs_f64())
    }
}

impl<'de> Deserialize<'de> for SimTime {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = f64::deserialize(deserializer)?;
        if !s.is_finite() || s < 0.0 {
            return Err(serde::de::Error::custom(
                "time must be a non-negative number",
            ));
        }
        Ok(Self::from_secs_f64(s))
    }
}

/// Gas units charged per transaction kind.
///
/// With the defaults, 50 transfers at 7 Gwei cost 0.005635 ether, and
/// 50 × 16,100 / (103,000 + 80,000) ≈ 4.40.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GasSchedule {
    pub transfer_gas: u64,
    pub open_gas: u64,
    pub close_gas: u64,
}

impl Default for GasSchedule {
    fn default() -> Self {
        Self {
            transfer_gas: 16_100,
            open_gas: 103_000,
            close_gas: 80_000,
        }
    }
}

impl GasSchedule {
    pub fn gas_for(&self, kind: &TxKind) -> u64 {
        match kind {
            TxKind::Transfer => self.transfer_gas,
            TxKind::ChannelOpen { .. } => self.open_gas,
            TxKind::ChannelClose { .. } => self.close_gas,
        }
    }
}

/// How block timestamps are laid out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "model")]
pub enum BlockTiming {
    /// Block `k` is produced at `k × interval`.
    #[default]
    Fixed,
    /// Exponential inter-block gaps with mean `interval`, seeded.
    Poisson { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainConfig {
    #[serde(rename = "block_interval_s")]
    pub block_interval: SimTime,
    pub gas_price: TokenAmount,
    #[serde(default)]
    pub gas_schedule: GasSchedule,
    #[serde(default)]
    pub block_timing: BlockTiming,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            block_interval: SimTime::from_secs(15),
            gas_price: TokenAmount::from_gwei(1),
            gas_schedule: GasSchedule::default(),
            block_timing: BlockTiming::Fixed,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), LedgerError> {
        if self.block_interval == SimTime::ZERO {
            return Err(LedgerError::InvalidConfig(
                "block interval must be positive",
            ));
        }
        if self.gas_price.is_zero() {
            return Err(LedgerError::InvalidConfig("gas price must be positive"));
        }
        let g = &self.gas_schedule;
        if g.transfer_gas == 0 || g.open_gas == 0 || g.close_gas == 0 {
            return Err(LedgerError::InvalidConfig("gas units must be positive"));
        }
        Ok(())
    }

    pub fn fee(&self, kind: &TxKind) -> TokenAmount {
        self.gas_price
            .checked_mul(u128::from(self.gas_schedule.gas_for(kind)))
            .expect("gas fee overflow")
    }

    /// First fixed-grid block boundary strictly after `t`.
    pub fn next_boundary(&self, t: SimTime) -> SimTime {
        let i = self.block_interval.millis();
        SimTime::from_millis((t.millis() / i + 1) * i)
    }

    /// Wait until inclusion on the fixed grid; always in `(0, interval]`.
    pub fn confirmation_latency(&self, submit_time: SimTime) -> SimTime {
        self.next_boundary(submit_time) - submit_time
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TxKind {
    Transfer,
    ChannelOpen {
        receiver: Address,
    },
    ChannelClose {
        sender: Address,
        receiver: Address,
        value: TokenAmount,
        signature: Signature,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transaction {
    pub from: Address,
    pub to: Address,
    pub value: TokenAmount,
    pub gas_used: u64,
    #[serde(flatten)]
    pub kind: TxKind,
    pub submitted_at: SimTime,
}

impl Transaction {
    /// Builds a transaction whose `gas_used` matches `schedule` for its kind.
    pub fn new(
        schedule: &GasSchedule,
        from: Address,
        to: Address,
        value: TokenAmount,
        kind: TxKind,
        submitted_at: SimTime,
    ) -> Self {
        Self {
            from,
            to,
            value,
            gas_used: schedule.gas_for(&kind),
            kind,
            submitted_at,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxHandle(pub u64);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "reason")]
pub enum TxStatus {
    Success,
    Reverted(String),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub handle: TxHandle,
    pub block_number: u64,
    pub included_at: SimTime,
    pub submitted_at: SimTime,
    pub fee: TokenAmount,
    pub status: TxStatus,
}

impl Receipt {
    pub fn latency(&self) -> SimTime {
        self.included_at - self.submitted_at
    }

    pub fn succeeded(&self) -> bool {
        self.status == TxStatus::Success
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IncludedTx {
    pub tx: Transaction,
    pub receipt: Receipt,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub number: u64,
    pub timestamp: SimTime,
    pub transactions: Vec<IncludedTx>,
}

#[derive(Debug, Clone, Copy)]
pub struct BlockContext {
    pub number: u64,
    pub timestamp: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("insufficient balance: need {needed:?}, have {available:?}")]
    InsufficientBalance {
        needed: TokenAmount,
        available: TokenAmount,
    },
    #[error("time regression: clock is at {now}, requested {requested}")]
    TimeRegression { now: SimTime, requested: SimTime },
    #[error("gas_used {got} does not match schedule ({expected})")]
    GasMismatch { expected: u64, got: u64 },
    #[error("unknown transaction handle {0:?}")]
    UnknownTx(TxHandle),
    #[error("balance overflow")]
    Overflow,
    #[error("invalid chain config: {0}")]
    InvalidConfig(&'static str),
}

/// Mutable view of balances handed to contracts during execution.
pub struct BalanceBook<'a> {
    balances: &'a mut BTreeMap<Address, TokenAmount>,
}

impl BalanceBook<'_> {
    pub fn balance(&self, a: &Address) -> TokenAmount {
        self.balances.get(a).copied().unwrap_or_default()
    }

    pub fn transfer(
        &mut self,
        from: &Address,
        to: &Address,
        amount: TokenAmount,
    ) -> Result<(), LedgerError> {
        move_funds(self.balances, from, to, amount)
    }
}

fn move_funds(
    balances: &mut BTreeMap<Address, TokenAmount>,
    from: &Address,
    to: &Address,
    amount: TokenAmount,
) -> Result<(), LedgerError> {
    if amount.is_zero() || from == to {
        return Ok(());
    }
    let available = balances.get(from).copied().unwrap_or_default();
    let remaining = available
        .checked_sub(amount)
        .ok_or(LedgerError::InsufficientBalance {
            needed: amount,
            available,
        })?;
    let credited = balances
        .get(to)
        .copied()
        .unwrap_or_default()
        .checked_add(amount)
        .ok_or(LedgerError::Overflow)?;
    balances.insert(*from, remaining);
    balances.insert(*to, credited);
    Ok(())
}

/// Executes contract-call transactions at inclusion time.
pub trait Contract {
    /// `tx.value` has already moved from `tx.from` to `tx.to` when this runs.
    /// Returning `Err` reverts that transfer; the gas fee stays charged.
    fn execute(
        &mut self,
        tx: &Transaction,
        handle: TxHandle,
        ctx: BlockContext,
        book: &mut BalanceBook<'_>,
    ) -> Result<(), String>;
}

/// Reverts every contract call.
pub struct NoContracts;

impl Contract for NoContracts {
    fn execute(
        &mut self,
        _: &Transaction,
        _: TxHandle,
        _: BlockContext,
        _: &mut BalanceBook<'_>,
    ) -> Result<(), String> {
        Err("no contract deployed".into())
    }
}

#[derive(Debug, Clone)]
struct PendingTx {
    handle: TxHandle,
    tx: Transaction,
}

#[derive(Debug, Clone)]
pub struct Ledger {
    config: ChainConfig,
    balances: BTreeMap<Address, TokenAmount>,
    clock: SimTime,
    pending: VecDeque<PendingTx>,
    history: Vec<Block>,
    receipts: Vec<Option<Receipt>>,
    next_block_at: SimTime,
    block_rng: Option<ChaCha20Rng>,
}

impl Ledger {
    /// Creates a ledger at time 0 with genesis block 0 and the given allocations.
    pub fn new(
        config: ChainConfig,
        genesis: impl IntoIterator<Item = (Address, TokenAmount)>,
    ) -> Result<Self, LedgerError> {
        config.validate()?;
        let mut balances = BTreeMap::new();
        for (addr, amount) in genesis {
            let entry: &mut TokenAmount = balances.entry(addr).or_default();
            *entry = entry.checked_add(amount).ok_or(LedgerError::Overflow)?;
        }
        let block_rng = match config.block_timing {
            BlockTiming::Fixed => None,
            BlockTiming::Poisson { seed } => Some(ChaCha20Rng::seed_from_u64(seed)),
        };
        let mut ledger = Self {
            config,
            balances,
            clock: SimTime::ZERO,
            pending: VecDeque::new(),
            history: vec![Block {
                number: 0,
                timestamp: SimTime::ZERO,
                transactions: Vec::new(),
            }],
            receipts: Vec::new(),
            next_block_at: SimTime::ZERO,
            block_rng,
        };
        ledger.next_block_at = ledger.schedule_after(SimTime::ZERO, 0);
        Ok(ledger)
    }

    fn schedule_after(&mut self, prev: SimTime, prev_number: u64) -> SimTime {
        let interval = self.config.block_interval;
        match self.block_rng.as_mut() {
            None => SimTime::from_millis((prev_number + 1) * interval.millis()),
            Some(rng) => {
                let exp = Exp::new(1.0 / interval.as_secs_f64()).expect("positive rate");
                let gap = SimTime::from_secs_f64(exp.sample(rng)).max(SimTime::from_millis(1));
                prev + gap
            }
        }
    }

    pub fn config(&self) -> &ChainConfig {
        &self.config
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn balance(&self, a: &Address) -> TokenAmount {
        self.balances.get(a).copied().unwrap_or_default()
    }

    pub fn balances(&self) -> &BTreeMap<Address, TokenAmount> {
        &self.balances
    }

    /// Σ of every balance, including the fee sink and contract escrow.
    pub fn total_supply(&self) -> TokenAmount {
        self.balances.values().copied().sum()
    }

    pub fn history(&self) -> &[Block] {
        &self.history
    }

    pub fn head(&self) -> &Block {
        self.history.last().expect("genesis block exists")
    }

    pub fn next_block_at(&self) -> SimTime {
        self.next_block_at
    }

    pub fn receipt(&self, handle: TxHandle) -> Option<&Receipt> {
        self.receipts
            .get(handle.0 as usize)
            .and_then(Option::as_ref)
    }

    pub fn pending_len(&self) -> usize {
        self.pending.len()
    }

    /// Pending transactions, in submission order.
    pub fn pending(&self) -> impl Iterator<Item = (TxHandle, &Transaction)> {
        self.pending.iter().map(|p| (p.handle, &p.tx))
    }

    fn committed_outflow(&self, from: &Address) -> TokenAmount {
        self.pending
            .iter()
            .filter(|p| &p.tx.from == from)
            .map(|p| p.tx.value + self.config.fee(&p.tx.kind))
            .sum()
    }

    /// Queues `tx` for the next block strictly after `tx.submitted_at`.
    ///
    /// The sender must cover value plus fee on top of whatever its earlier
    /// pending transactions already commit.
    pub fn submit(&mut self, tx: Transaction) -> Result<TxHandle, LedgerError> {
        if tx.submitted_at < self.clock {
            return Err(LedgerError::TimeRegression {
                now: self.clock,
                requested: tx.submitted_at,
            });
        }
        let expected = self.config.gas_schedule.gas_for(&tx.kind);
        if tx.gas_used != expected {
            return Err(LedgerError::GasMismatch {
                expected,
                got: tx.gas_used,
            });
        }
        let needed = tx
            .value
            .checked_add(self.config.fee(&tx.kind))
            .ok_or(LedgerError::Overflow)?;
        let available = self
            .balance(&tx.from)
            .saturating_sub(self.committed_outflow(&tx.from));
        if available < needed {
            return Err(LedgerError::InsufficientBalance { needed, available });
        }
        let handle = TxHandle(self.receipts.len() as u64);
        self.receipts.push(None);
        self.pending.push_back(PendingTx { handle, tx });
        Ok(handle)
    }

    /// Produces every block in `(clock, t]` with no contract deployed.
    pub fn advance_until(&mut self, t: SimTime) -> Result<Vec<Block>, LedgerError> {
        self.advance_until_with(t, &mut NoContracts)
    }

    pub fn advance_until_with(
        &mut self,
        t: SimTime,
        contract: &mut dyn Contract,
    ) -> Result<Vec<Block>, LedgerError> {
        if t < self.clock {
            return Err(LedgerError::TimeRegression {
                now: self.clock,
                requested: t,
            });
        }
        let mut produced = Vec::new();
        while self.next_block_at <= t {
            produced.push(self.produce_block(contract));
        }
        self.clock = t;
        Ok(produced)
    }

    /// Produces blocks until `handle` is included and returns its receipt.
    /// The clock stops at the including block's timestamp.
    pub fn advance_until_included(
        &mut self,
        handle: TxHandle,
        contract: &mut dyn Contract,
    ) -> Result<Receipt, LedgerError> {
        if handle.0 as usize >= self.receipts.len() {
            return Err(LedgerError::UnknownTx(handle));
        }
        loop {
            if let Some(r) = self.receipt(handle) {
                return Ok(r.clone());
            }
            self.produce_block(contract);
        }
    }

    fn produce_block(&mut self, contract: &mut dyn Contract) -> Block {
        let number = self.head().number + 1;
        let timestamp = self.next_block_at;
        let ctx = BlockContext { number, timestamp };

        let mut included = Vec::new();
        let mut waiting = VecDeque::with_capacity(self.pending.len());
        while let Some(p) = self.pending.pop_front() {
            if p.tx.submitted_at < timestamp {
                let receipt = self.apply(&p, ctx, contract);
                self.receipts[p.handle.0 as usize] = Some(receipt.clone());
                included.push(IncludedTx { tx: p.tx, receipt });
            } else {
                waiting.push_back(p);
            }
        }
        self.pending = waiting;

        let block = Block {
            number,
            timestamp,
            transactions: included,
        };
        self.history.push(block.clone());
        self.clock = timestamp;
        self.next_block_at = self.schedule_after(timestamp, number);
        block
    }

    fn apply(&mut self, p: &PendingTx, ctx: BlockContext, contract: &mut dyn Contract) -> Receipt {
        let tx = &p.tx;
        let fee = self.config.fee(&tx.kind);
        let mut receipt = Receipt {
            handle: p.handle,
            block_number: ctx.number,
            included_at: ctx.timestamp,
            submitted_at: tx.submitted_at,
            fee: TokenAmount::ZERO,
            status: TxStatus::Success,
        };

        let needed = tx.value.checked_add(fee);
        if needed.is_none_or(|n| self.balance(&tx.from) < n) {
            receipt.status = TxStatus::Failed("insufficient balance at inclusion".into());
            return receipt;
        }
        move_funds(&mut self.balances, &tx.from, &FEE_SINK, fee).expect("fee checked above");
        receipt.fee = fee;
        move_funds(&mut self.balances, &tx.from, &tx.to, tx.value).expect("value checked above");

        if !matches!(tx.kind, TxKind::Transfer) {
            let mut book = BalanceBook {
                balances: &mut self.balances,
            };
            if let Err(reason) = contract.execute(tx, p.handle, ctx, &mut book) {
                move_funds(&mut self.balances, &tx.to, &tx.from, tx.value)
                    .expect("reverted contract keeps the call value");
                receipt.status = TxStatus::Reverted(reason);
            }
        }
        receipt
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn addr(b: u8) -> Address {
        Address([b; 20])
    }

    fn config(interval_s: u64, gwei: u128) -> ChainConfig {
        ChainConfig {
            block_interval: SimTime::from_secs(interval_s),
            gas_price: TokenAmount::from_gwei(gwei),
            ..ChainConfig::default()
        }
    }

    fn transfer(
        cfg: &ChainConfig,
        from: u8,
        to: u8,
        value: TokenAmount,
        at: SimTime,
    ) -> Transaction {
        Transaction::new(
            &cfg.gas_schedule,
            addr(from),
            addr(to),
            value,
            TxKind::Transfer,
            at,
        )
    }

    #[test]
    fn token_amount_units_and_checks() {
        assert_eq!(TokenAmount::from_ether(1).wei(), 10u128.pow(18));
        assert_eq!(TokenAmount::from_gwei(1).wei(), 10u128.pow(9));
        assert_eq!(TokenAmount::from_milli_ether(207).as_ether_f64(), 0.207);
        assert!(TokenAmount::ZERO
            .checked_sub(TokenAmount::from_wei(1))
            .is_none());
        assert!(TokenAmount::from_wei(u128::MAX)
            .checked_add(TokenAmount::from_wei(1))
            .is_none());
        let json = serde_json::to_string(&TokenAmount::from_ether(3)).unwrap();
        assert_eq!(json, "\"3000000000000000000\"");
    }

    #[test]
    fn config_validation() {
        let mut c = ChainConfig::default();
        assert!(c.validate().is_ok());
        c.gas_price = TokenAmount::ZERO;
        assert!(c.validate().is_err());
        let c = ChainConfig {
            block_interval: SimTime::ZERO,
            ..ChainConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = ChainConfig::default();
        c.gas_schedule.close_gas = 0;
        assert!(Ledger::new(c, []).is_err());
    }

    #[test]
    fn transfer_debits_value_plus_fee() {
        let cfg = config(15, 1);
        let mut l = Ledger::new(cfg, [(addr(1), TokenAmount::from_ether(10))]).unwrap();
        let h = l
            .submit(transfer(
                &cfg,
                1,
                2,
                TokenAmount::from_ether(1),
                SimTime::ZERO,
            ))
            .unwrap();
        l.advance_until(SimTime::from_secs(15)).unwrap();
        let fee = TokenAmount::from_wei(16_100 * WEI_PER_GWEI);
        assert_eq!(
            l.balance(&addr(1)),
            TokenAmount::from_ether(10) - TokenAmount::from_ether(1) - fee
        );
        assert_eq!(l.balance(&addr(2)), TokenAmount::from_ether(1));
        assert_eq!(l.balance(&FEE_SINK), fee);
        assert!(l.receipt(h).unwrap().succeeded());
    }

    #[test]
    fn balance_after_transfer_at_seven_gwei() {
        let cfg = config(15, 7);
        let mut l = Ledger::new(cfg, [(addr(1), TokenAmount::from_ether(10))]).unwrap();
        l.submit(transfer(
            &cfg,
            1,
            2,
            TokenAmount::from_ether(1),
            SimTime::ZERO,
        ))
        .unwrap();
        l.advance_until(SimTime::from_secs(30)).unwrap();
        let expected = 10 * WEI_PER_ETHER - WEI_PER_ETHER - 16_100 * 7 * WEI_PER_GWEI;
        assert_eq!(l.balance(&addr(1)).wei(), expected);
        assert_eq!(l.balance(&addr(9)), TokenAmount::ZERO);
    }

    #[test]
    fn inclusion_at_next_boundary() {
        let cfg = config(15, 1);
        let mut l = Ledger::new(cfg, [(addr(1), TokenAmount::from_ether(10))]).unwrap();
        l.advance_until(SimTime::from_secs(7)).unwrap();
        let h = l
            .submit(transfer(
                &cfg,
                1,
                2,
                TokenAmount::from_ether(1),
                SimTime::from_secs(7),
            ))
            .unwrap();
        l.advance_until(SimTime::from_secs(14)).unwrap();
        assert!(l.receipt(h).is_none());
        l.advance_until(SimTime::from_secs(15)).unwrap();
        let r = l.receipt(h).unwrap();
        assert_eq!(r.included_at, SimTime::from_secs(15));
        assert_eq!(r.latency(), SimTime::from_secs(8));
        assert_eq!(r.block_number, 1);
    }

    #[test]
    fn exact_balance_is_spendable() {
        let cfg = config(5, 1);
        let fee = cfg.fee(&TxKind::Transfer);
        let value = TokenAmount::from_ether(2);
        let mut l = Ledger::new(cfg, [(addr(1), value + fee)]).unwrap();
        l.submit(transfer(&cfg, 1, 2, value, SimTime::ZERO))
            .unwrap();
        l.advance_until(SimTime::from_secs(5)).unwrap();
        assert_eq!(l.balance(&addr(1)), TokenAmount::ZERO);
    }

    #[test]
    fn insufficient_balance_rejected_without_state_change() {
        let cfg = config(5, 1);
        let mut l = Ledger::new(cfg, [(addr(1), TokenAmount::from_ether(1))]).unwrap();
        let err = l
            .submit(transfer(
                &cfg,
                1,
                2,
                TokenAmount::from_ether(1),
                SimTime::ZERO,
            ))
            .unwrap_err();
        assert!(matches!(err, LedgerError::InsufficientBalance { .. }));
        assert_eq!(l.pending_len(), 0);
        assert_eq!(l.balance(&addr(1)), TokenAmount::from_ether(1));
    }

    #[test]
    fn pending_commitments_count_against_balance() {
        let cfg = config(5, 1);
        let mut l = Ledger::new(cfg, [(addr(1), TokenAmount::from_ether(1))]).unwrap();
        let half = TokenAmount::from_milli_ether(500);
        l.submit(transfer(&cfg, 1, 2, half, SimTime::ZERO)).unwrap();
        assert!(l.submit(transfer(&cfg, 1, 2, half, SimTime::ZERO)).is_err());
    }

    #[test]
    fn gas_mismatch_rejected() {
        let cfg = config(5, 1);
        let mut l = Ledger::new(cfg, [(addr(1), TokenAmount::from_ether(1))]).unwrap();
        let mut tx = transfer(&cfg, 1, 2, TokenAmount::from_wei(1), SimTime::ZERO);
        tx.gas_used += 1;
        assert!(matches!(l.submit(tx), Err(LedgerError::GasMismatch { .. })));
    }

    #[test]
    fn advance_produces_dense_empty_blocks() {
        let mut l = Ledger::new(config(5, 1), []).unwrap();
        let blocks = l.advance_until(SimTime::from_secs(17)).unwrap();
        assert_eq!(blocks.len(), 3);
        for (i, b) in blocks.iter().enumerate() {
            assert_eq!(b.number, i as u64 + 1);
            assert_eq!(b.timestamp, SimTime::from_secs(5 * (i as u64 + 1)));
            assert!(b.transactions.is_empty());
        }
        assert_eq!(l.clock(), SimTime::from_secs(17));
        assert!(matches!(
            l.advance_until(SimTime::from_secs(16)),
            Err(LedgerError::TimeRegression { .. })
        ));
    }

    #[test]
    fn same_instant_submissions_included_fifo() {
        let cfg = config(5, 1);
        let mut l = Ledger::new(cfg, [(addr(1), TokenAmount::from_ether(10))]).unwrap();
        let mut handles = Vec::new();
        for to in 2..8u8 {
            handles.push(
                l.submit(transfer(
                    &cfg,
                    1,
                    to,
                    TokenAmount::from_wei(u128::from(to)),
                    SimTime::ZERO,
                ))
                .unwrap(),
            );
        }
        let blocks = l.advance_until(SimTime::from_secs(5)).unwrap();
        let order: Vec<_> = blocks[0]
            .transactions
            .iter()
            .map(|t| t.receipt.handle)
            .collect();
        assert_eq!(order, handles);
    }

    #[test]
    fn submission_before_clock_rejected() {
        let cfg = config(5, 1);
        let mut l = Ledger::new(cfg, [(addr(1), TokenAmount::from_ether(10))]).unwrap();
        l.advance_until(SimTime::from_secs(6)).unwrap();
        let err = l
            .submit(transfer(
                &cfg,
                1,
                2,
                TokenAmount::from_wei(1),
                SimTime::from_secs(3),
            ))
            .unwrap_err();
        assert!(matches!(err, LedgerError::TimeRegression { .. }));
    }

    #[test]
    fn confirmation_latency_boundaries() {
        let cfg = config(15, 1);
        assert_eq!(
            cfg.confirmation_latency(SimTime::from_secs(15)),
            SimTime::from_secs(15)
        );
        assert_eq!(
            cfg.confirmation_latency(SimTime::ZERO),
            SimTime::from_secs(15)
        );
        assert_eq!(
            cfg.confirmation_latency(SimTime::from_millis(14_999)),
            SimTime::from_millis(1)
        );
        assert_eq!(
            cfg.confirmation_latency(SimTime::from_secs(7)),
            SimTime::from_secs(8)
        );
    }

    #[test]
    fn mean_fixed_grid_latency_is_half_interval() {
        let cfg = config(10, 1);
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let n = 10_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let t = SimTime::from_millis(rng.random_range(0..1_000_000));
                cfg.confirmation_latency(t).as_secs_f64()
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 5.0).abs() < 3.0 * se, "mean {mean}, se {se}");
    }

    #[test]
    fn poisson_blocks_have_memoryless_mean_wait() {
        let cfg = ChainConfig {
            block_interval: SimTime::from_secs(5),
            block_timing: BlockTiming::Poisson { seed: 42 },
            ..ChainConfig::default()
        };
        let mut l = Ledger::new(cfg, [(addr(1), TokenAmount::from_ether(1000))]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let n = 4000;
        let mut total = 0.0;
        let mut now = SimTime::ZERO;
        for _ in 0..n {
            now = now + SimTime::from_millis(rng.random_range(0..20_000));
            l.advance_until(now).unwrap();
            let h = l
                .submit(transfer(&cfg, 1, 2, TokenAmount::from_wei(1), now))
                .unwrap();
            let r = l.advance_until_included(h, &mut NoContracts).unwrap();
            assert!(r.included_at > now);
            total += r.latency().as_secs_f64();
            now = l.clock();
        }
        let mean = total / n as f64;
        // Exponential with mean 5 s: standard error 5/sqrt(n).
        assert!(
            (mean - 5.0).abs() < 3.0 * 5.0 / (n as f64).sqrt(),
            "mean wait {mean}"
        );
        let heights: Vec<u64> = l.history().iter().map(|b| b.number).collect();
        assert!(heights.windows(2).all(|w| w[1] == w[0] + 1));
        assert!(l
            .history()
            .windows(2)
            .all(|w| w[1].timestamp > w[0].timestamp));
    }

    #[test]
    fn contract_calls_revert_without_contract_but_pay_gas() {
        let cfg = config(5, 1);
        let mut l = Ledger::new(cfg, [(addr(1), TokenAmount::from_ether(2))]).unwrap();
        let tx = Transaction::new(
            &cfg.gas_schedule,
            addr(1),
            addr(0xcc),
            TokenAmount::from_ether(1),
            TxKind::ChannelOpen { receiver: addr(2) },
            SimTime::ZERO,
        );
        let h = l.submit(tx).unwrap();
        l.advance_until(SimTime::from_secs(5)).unwrap();
        let r = l.receipt(h).unwrap();
        assert!(matches!(r.status, TxStatus::Reverted(_)));
        assert_eq!(l.balance(&addr(0xcc)), TokenAmount::ZERO);
        assert_eq!(
            l.balance(&addr(1)),
            TokenAmount::from_ether(2) - cfg.fee(&TxKind::ChannelOpen { receiver: addr(2) })
        );
        assert_eq!(l.total_supply(), TokenAmount::from_ether(2));
    }

    #[test]
    fn replay_gives_identical_history() {
        let run = || {
            let cfg = ChainConfig {
                block_timing: BlockTiming::Poisson { seed: 9 },
                ..config(5, 3)
            };
            let mut l = Ledger::new(cfg, [(addr(1), TokenAmount::from_ether(5))]).unwrap();
            for i in 0..20u64 {
                let at = l.clock() + SimTime::from_millis(1234 * i);
                l.advance_until(at).unwrap();
                l.submit(transfer(
                    &cfg,
                    1,
                    2,
                    TokenAmount::from_gwei(u128::from(i)),
                    at,
                ))
                .unwrap();
            }
            l.advance_until(l.clock() + SimTime::from_secs(60)).unwrap();
            serde_json::to_vec(l.history()).unwrap()
        };
        assert_eq!(run(), run());
    }
}
