//! Uni-directional payment channel contract.
//!
//! The contract escrows the sender's deposit at [`CHANNEL_CONTRACT`], verifies
//! cumulative off-chain agreements for free, settles on a receiver-initiated
//! close, and answers collateral queries. [`Chain`] bundles the contract with
//! a [`Ledger`] so callers see one blockchain.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chainsim::{
    BalanceBook, Block, BlockContext, ChainConfig, Contract, Ledger, LedgerError, Receipt, SimTime,
    TokenAmount, Transaction, TxHandle, TxKind, TxStatus,
};
use crate::crypto::{
    agreement_digest, keccak256, recover, sign, Address, Digest, KeyPair, Signature,
};

/// Escrow account of the channel contract.
pub const CHANNEL_CONTRACT: Address = Address([0xc0; 20]);

pub type ChannelId = Digest;

/// Which salt goes into the agreement digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DigestMode {
    /// Salt is the channel id; agreements cannot be replayed across channels.
    #[default]
    Salted,
    /// All-zero salt: digest covers only (sender, receiver, value).
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelStatus {
    Open,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channel {
    pub id: ChannelId,
    pub sender: Address,
    pub receiver: Address,
    pub deposit: TokenAmount,
    pub status: ChannelStatus,
    pub opened_at: SimTime,
}

impl Channel {
    pub fn salt(&self, mode: DigestMode) -> [u8; 32] {
        match mode {
            DigestMode::Salted => self.id.0,
            DigestMode::Strict => [0u8; 32],
        }
    }

    pub fn is_open(&self) -> bool {
        self.status == ChannelStatus::Open
    }
}

/// `keccak256(sender ‖ receiver ‖ inclusion block number as 32-byte big-endian)`.
pub fn channel_id(sender: &Address, receiver: &Address, block_number: u64) -> ChannelId {
    let mut buf = [0u8; 72];
    buf[..20].copy_from_slice(&sender.0);
    buf[20..40].copy_from_slice(&receiver.0);
    buf[64..].copy_from_slice(&block_number.to_be_bytes());
    keccak256(buf)
}

/// A sender-signed claim to `cumulative_value` of the channel deposit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SignedAgreement {
    pub sender: Address,
    pub receiver: Address,
    pub cumulative_value: TokenAmount,
    pub signature: Signature,
}

impl SignedAgreement {
    pub fn sign(
        key: &KeyPair,
        channel: &Channel,
        cumulative_value: TokenAmount,
        mode: DigestMode,
    ) -> Self {
        let digest = agreement_digest(
            &key.address(),
            &channel.receiver,
            cumulative_value,
            &channel.salt(mode),
        );
        Self {
            sender: key.address(),
            receiver: channel.receiver,
            cumulative_value,
            signature: sign(key, &digest),
        }
    }

    pub fn digest(&self, salt: &[u8; 32]) -> Digest {
        agreement_digest(&self.sender, &self.receiver, self.cumulative_value, salt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Settlement {
    pub paid_to_receiver: TokenAmount,
    pub refunded_to_sender: TokenAmount,
    pub gas_charged: TokenAmount,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChannelError {
    #[error("deposit must be positive")]
    ZeroDeposit,
    #[error("an open or pending channel already exists for {sender} -> {receiver}")]
    DuplicateOpen { sender: Address, receiver: Address },
    #[error("no open channel for {sender} -> {receiver}")]
    NotOpen { sender: Address, receiver: Address },
    #[error("agreement failed verification")]
    InvalidAgreement,
    #[error("only the channel receiver may close")]
    NotReceiver,
    #[error("agreement refers to a different channel")]
    WrongChannel,
    #[error("transaction reverted: {0}")]
    Reverted(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

/// On-ledger channel registry; runs inside block production.
#[derive(Debug, Clone, Default)]
pub struct ChannelContract {
    mode: DigestMode,
    channels: BTreeMap<ChannelId, Channel>,
    open_index: BTreeMap<(Address, Address), ChannelId>,
    opened_by: BTreeMap<TxHandle, ChannelId>,
    settlements: BTreeMap<TxHandle, (ChannelId, Settlement)>,
}

impl ChannelContract {
    pub fn new(mode: DigestMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn mode(&self) -> DigestMode {
        self.mode
    }

    pub fn channel(&self, id: &ChannelId) -> Option<&Channel> {
        self.channels.get(id)
    }

    pub fn open_channel_between(&self, sender: &Address, receiver: &Address) -> Option<&Channel> {
        self.open_index
            .get(&(*sender, *receiver))
            .and_then(|id| self.channels.get(id))
    }

    pub fn channels(&self) -> impl Iterator<Item = &Channel> {
        self.channels.values()
    }

    pub fn verify_agreement(&self, a: &SignedAgreement) -> bool {
        let Some(channel) = self.open_channel_between(&a.sender, &a.receiver) else {
            return false;
        };
        if a.cumulative_value > channel.deposit {
            return false;
        }
        let digest = a.digest(&channel.salt(self.mode));
        matches!(recover(&digest, &a.signature), Ok(signer) if signer == a.sender)
    }

    pub fn collateral(&self, sender: &Address, receiver: &Address) -> TokenAmount {
        self.open_channel_between(sender, receiver)
            .map(|c| c.deposit)
            .unwrap_or_default()
    }

    fn execute_open(
        &mut self,
        tx: &Transaction,
        receiver: &Address,
        handle: TxHandle,
        ctx: BlockContext,
    ) -> Result<(), String> {
        if tx.value.is_zero() {
            return Err("zero deposit".into());
        }
        if self.open_index.contains_key(&(tx.from, *receiver)) {
            return Err("channel already open".into());
        }
        let id = channel_id(&tx.from, receiver, ctx.number);
        self.channels.insert(
            id,
            Channel {
                id,
                sender: tx.from,
                receiver: *receiver,
                deposit: tx.value,
                status: ChannelStatus::Open,
                opened_at: ctx.timestamp,
            },
        );
        self.open_index.insert((tx.from, *receiver), id);
        self.opened_by.insert(handle, id);
        Ok(())
    }

    fn execute_close(
        &mut self,
        tx: &Transaction,
        agreement: SignedAgreement,
        handle: TxHandle,
        book: &mut BalanceBook<'_>,
    ) -> Result<(), String> {
        if !self.verify_agreement(&agreement) {
            return Err("agreement failed verification".into());
        }
        let id = self.open_index[&(agreement.sender, agreement.receiver)];
        let channel = self.channels.get_mut(&id).expect("indexed channel exists");
        if tx.from != channel.receiver {
            return Err("caller is not the channel receiver".into());
        }
        let paid = agreement.cumulative_value;
        let refund = channel.deposit - paid;
        book.transfer(&CHANNEL_CONTRACT, &channel.receiver, paid)
            .map_err(|e| e.to_string())?;
        book.transfer(&CHANNEL_CONTRACT, &channel.sender, refund)
            .map_err(|e| e.to_string())?;
        channel.status = ChannelStatus::Closed;
        self.open_index
            .remove(&(agreement.sender, agreement.receiver));
        self.settlements.insert(
            handle,
            (
                id,
                Settlement {
                    paid_to_receiver: paid,
                    refunded_to_sender: refund,
                    gas_charged: TokenAmount::ZERO,
                },
            ),
        );
        Ok(())
    }
}

impl Contract for ChannelContract {
    fn execute(
        &mut self,
        tx: &Transaction,
        handle: TxHandle,
        ctx: BlockContext,
        book: &mut BalanceBook<'_>,
    ) -> Result<(), String> {
        if tx.to != CHANNEL_CONTRACT {
            return Err("contract call sent to the wrong address".into());
        }
        match &tx.kind {
            TxKind::Transfer => Ok(()),
            TxKind::ChannelOpen { receiver } => self.execute_open(tx, receiver, handle, ctx),
            TxKind::ChannelClose {
                sender,
                receiver,
                value,
                signature,
            } => {
                if !tx.value.is_zero() {
                    return Err("close carries no value".into());
                }
                let agreement = SignedAgreement {
                    sender: *sender,
                    receiver: *receiver,
                    cumulative_value: *value,
                    signature: *signature,
                };
                self.execute_close(tx, agreement, handle, book)
            }
        }
    }
}

/// A ledger with the channel contract deployed.
#[derive(Debug, Clone)]
pub struct Chain {
    ledger: Ledger,
    contract: ChannelContract,
}

impl Chain {
    pub fn new(
        config: ChainConfig,
        genesis: impl IntoIterator<Item = (Address, TokenAmount)>,
        mode: DigestMode,
    ) -> Result<Self, ChannelError> {
        Ok(Self {
            ledger: Ledger::new(config, genesis)?,
            contract: ChannelContract::new(mode),
        })
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn contract(&self) -> &ChannelContract {
        &self.contract
    }

    pub fn config(&self) -> &ChainConfig {
        self.ledger.config()
    }

    pub fn mode(&self) -> DigestMode {
        self.contract.mode()
    }

    pub fn clock(&self) -> SimTime {
        self.ledger.clock()
    }

    pub fn balance(&self, a: &Address) -> TokenAmount {
        self.ledger.balance(a)
    }

    pub fn advance_until(&mut self, t: SimTime) -> Result<Vec<Block>, ChannelError> {
        Ok(self.ledger.advance_until_with(t, &mut self.contract)?)
    }

    /// Produces blocks until `handle` is included.
    pub fn wait(&mut self, handle: TxHandle) -> Result<Receipt, ChannelError> {
        Ok(self
            .ledger
            .advance_until_included(handle, &mut self.contract)?)
    }

    pub fn submit_transfer(
        &mut self,
        from: &KeyPair,
        to: Address,
        value: TokenAmount,
        at: SimTime,
    ) -> Result<TxHandle, ChannelError> {
        let tx = Transaction::new(
            &self.config().gas_schedule,
            from.address(),
            to,
            value,
            TxKind::Transfer,
            at,
        );
        Ok(self.ledger.submit(tx)?)
    }

    fn open_pending(&self, sender: &Address, receiver: &Address) -> bool {
        self.ledger.pending().any(|(_, tx)| {
            &tx.from == sender
                && matches!(&tx.kind, TxKind::ChannelOpen { receiver: r } if r == receiver)
        })
    }

    pub fn submit_open(
        &mut self,
        sender: &KeyPair,
        receiver: Address,
        deposit: TokenAmount,
        at: SimTime,
    ) -> Result<TxHandle, ChannelError> {
        if deposit.is_zero() {
            return Err(ChannelError::ZeroDeposit);
        }
        let from = sender.address();
        if self
            .contract
            .open_channel_between(&from, &receiver)
            .is_some()
            || self.open_pending(&from, &receiver)
        {
            return Err(ChannelError::DuplicateOpen {
                sender: from,
                receiver,
            });
        }
        let tx = Transaction::new(
            &self.config().gas_schedule,
            from,
            CHANNEL_CONTRACT,
            deposit,
            TxKind::ChannelOpen { receiver },
            at,
        );
        Ok(self.ledger.submit(tx)?)
    }

    /// Channel created by a confirmed open transaction.
    pub fn opened_channel(&self, handle: TxHandle) -> Result<&Channel, ChannelError> {
        let receipt = self
            .ledger
            .receipt(handle)
            .ok_or(LedgerError::UnknownTx(handle))?;
        if let TxStatus::Reverted(r) | TxStatus::Failed(r) = &receipt.status {
            return Err(ChannelError::Reverted(r.clone()));
        }
        let id = self.contract.opened_by[&handle];
        Ok(&self.contract.channels[&id])
    }

    /// Submits an open and waits for its confirmation.
    pub fn open_channel(
        &mut self,
        sender: &KeyPair,
        receiver: Address,
        deposit: TokenAmount,
        at: SimTime,
    ) -> Result<(Channel, Receipt), ChannelError> {
        let handle = self.submit_open(sender, receiver, deposit, at)?;
        let receipt = self.wait(handle)?;
        Ok((self.opened_channel(handle)?.clone(), receipt))
    }

    pub fn submit_close(
        &mut self,
        agreement: &SignedAgreement,
        caller: &KeyPair,
        at: SimTime,
    ) -> Result<TxHandle, ChannelError> {
        let channel = self
            .contract
            .open_channel_between(&agreement.sender, &agreement.receiver)
            .ok_or(ChannelError::NotOpen {
                sender: agreement.sender,
                receiver: agreement.receiver,
            })?;
        if caller.address() != channel.receiver {
            return Err(ChannelError::NotReceiver);
        }
        if !self.contract.verify_agreement(agreement) {
            return Err(ChannelError::InvalidAgreement);
        }
        let tx = Transaction::new(
            &self.config().gas_schedule,
            caller.address(),
            CHANNEL_CONTRACT,
            TokenAmount::ZERO,
            TxKind::ChannelClose {
                sender: agreement.sender,
                receiver: agreement.receiver,
                value: agreement.cumulative_value,
                signature: agreement.signature,
            },
            at,
        );
        Ok(self.ledger.submit(tx)?)
    }

    /// Settlement produced by a confirmed close transaction.
    pub fn settlement(&self, handle: TxHandle) -> Result<Settlement, ChannelError> {
        let receipt = self
            .ledger
            .receipt(handle)
            .ok_or(LedgerError::UnknownTx(handle))?;
        if let TxStatus::Reverted(r) | TxStatus::Failed(r) = &receipt.status {
            return Err(ChannelError::Reverted(r.clone()));
        }
        let (_, mut settlement) = self.contract.settlements[&handle];
        settlement.gas_charged = receipt.fee;
        Ok(settlement)
    }

    /// Submits a receiver close and waits for its confirmation.
    pub fn close_channel(
        &mut self,
        agreement: &SignedAgreement,
        caller: &KeyPair,
        at: SimTime,
    ) -> Result<(Settlement, Receipt), ChannelError> {
        let handle = self.submit_close(agreement, caller, at)?;
        let receipt = self.wait(handle)?;
        Ok((self.settlement(handle)?, receipt))
    }

    pub fn verify_agreement(&self, a: &SignedAgreement) -> bool {
        self.contract.verify_agreement(a)
    }

    pub fn collateral(&self, sender: &Address, receiver: &Address) -> TokenAmount {
        self.contract.collateral(sender, receiver)
    }

    pub fn open_channel_between(&self, sender: &Address, receiver: &Address) -> Option<&Channel> {
        self.contract.open_channel_between(sender, receiver)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClaimOutcome {
    Improved,
    Stale,
}

/// Receiver-side best claim on one channel; never decreases.
#[derive(Debug, Clone)]
pub struct ClaimTracker {
    channel: ChannelId,
    best: Option<SignedAgreement>,
}

impl ClaimTracker {
    pub fn new(channel: &Channel) -> Self {
        Self {
            channel: channel.id,
            best: None,
        }
    }

    pub fn channel_id(&self) -> ChannelId {
        self.channel
    }

    pub fn best(&self) -> Option<&SignedAgreement> {
        self.best.as_ref()
    }

    pub fn best_value(&self) -> TokenAmount {
        self.best
            .as_ref()
            .map(|a| a.cumulative_value)
            .unwrap_or_default()
    }

    pub fn accept(
        &mut self,
        chain: &Chain,
        a: SignedAgreement,
    ) -> Result<ClaimOutcome, ChannelError> {
        match chain.open_channel_between(&a.sender, &a.receiver) {
            Some(c) if c.id == self.channel => {}
            Some(_) => return Err(ChannelError::WrongChannel),
            None => {
                return Err(ChannelError::NotOpen {
                    sender: a.sender,
                    receiver: a.receiver,
                })
            }
        }
        if !chain.verify_agreement(&a) {
            return Err(ChannelError::InvalidAgreement);
        }
        if a.cumulative_value <= self.best_value() && self.best.is_some() {
            return Ok(ClaimOutcome::Stale);
        }
        self.best = Some(a);
        Ok(ClaimOutcome::Improved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chainsim::{FEE_SINK, WEI_PER_GWEI};

    fn setup(mode: DigestMode) -> (Chain, KeyPair, KeyPair) {
        let sender = KeyPair::from_label("sender");
        let receiver = KeyPair::from_label("receiver");
        let chain = Chain::new(
            ChainConfig {
                block_interval: SimTime::from_secs(5),
                ..ChainConfig::default()
            },
            [
                (sender.address(), TokenAmount::from_ether(10)),
                (receiver.address(), TokenAmount::from_ether(1)),
            ],
            mode,
        )
        .unwrap();
        (chain, sender, receiver)
    }

    #[test]
    fn open_escrows_deposit_and_charges_gas() {
        let (mut chain, s, r) = setup(DigestMode::Salted);
        let (channel, receipt) = chain
            .open_channel(&s, r.address(), TokenAmount::from_ether(1), SimTime::ZERO)
            .unwrap();
        assert!(channel.is_open());
        assert_eq!(
            channel.id,
            channel_id(&s.address(), &r.address(), receipt.block_number)
        );
        assert_eq!(chain.balance(&CHANNEL_CONTRACT), TokenAmount::from_ether(1));
        let open_fee = TokenAmount::from_wei(103_000 * WEI_PER_GWEI);
        assert_eq!(
            chain.balance(&s.address()),
            TokenAmount::from_ether(9) - open_fee
        );
        assert_eq!(
            chain.collateral(&s.address(), &r.address()),
            TokenAmount::from_ether(1)
        );
        assert_eq!(
            chain.collateral(&r.address(), &s.address()),
            TokenAmount::ZERO
        );
    }

    #[test]
    fn zero_and_duplicate_opens_rejected() {
        let (mut chain, s, r) = setup(DigestMode::Salted);
        assert_eq!(
            chain
                .submit_open(&s, r.address(), TokenAmount::ZERO, SimTime::ZERO)
                .unwrap_err(),
            ChannelError::ZeroDeposit
        );
        chain
            .submit_open(&s, r.address(), TokenAmount::from_ether(1), SimTime::ZERO)
            .unwrap();
        assert!(matches!(
            chain.submit_open(&s, r.address(), TokenAmount::from_ether(1), SimTime::ZERO),
            Err(ChannelError::DuplicateOpen { .. })
        ));
        chain.advance_until(SimTime::from_secs(5)).unwrap();
        assert!(matches!(
            chain.submit_open(
                &s,
                r.address(),
                TokenAmount::from_ether(1),
                SimTime::from_secs(5)
            ),
            Err(ChannelError::DuplicateOpen { .. })
        ));
    }

    #[test]
    fn distinct_receivers_get_independent_channels() {
        let (mut chain, s, r) = setup(DigestMode::Salted);
        let other = KeyPair::from_label("other");
        chain
            .open_channel(&s, r.address(), TokenAmount::from_ether(1), SimTime::ZERO)
            .unwrap();
        let now = chain.clock();
        chain
            .open_channel(&s, other.address(), TokenAmount::from_ether(2), now)
            .unwrap();
        assert_eq!(
            chain.collateral(&s.address(), &r.address()),
            TokenAmount::from_ether(1)
        );
        assert_eq!(
            chain.collateral(&s.address(), &other.address()),
            TokenAmount::from_ether(2)
        );
        assert_eq!(
            chain.collateral(&r.address(), &other.address()),
            TokenAmount::ZERO
        );
    }

    #[test]
    fn verify_checks_signer_and_deposit_bound() {
        let (mut chain, s, r) = setup(DigestMode::Salted);
        let (channel, _) = chain
            .open_channel(&s, r.address(), TokenAmount::from_ether(1), SimTime::ZERO)
            .unwrap();
        let ok =
            SignedAgreement::sign(&s, &channel, TokenAmount::from_ether(1), DigestMode::Salted);
        assert!(chain.verify_agreement(&ok));

        let over = SignedAgreement::sign(
            &s,
            &channel,
            TokenAmount::from_ether(1) + TokenAmount::from_wei(1),
            DigestMode::Salted,
        );
        assert!(!chain.verify_agreement(&over));

        let mut by_receiver = SignedAgreement::sign(
            &r,
            &channel,
            TokenAmount::from_milli_ether(1),
            DigestMode::Salted,
        );
        by_receiver.sender = s.address();
        assert!(!chain.verify_agreement(&by_receiver));
    }

    #[test]
    fn close_settles_and_charges_caller() {
        let (mut chain, s, r) = setup(DigestMode::Salted);
        let (channel, _) = chain
            .open_channel(&s, r.address(), TokenAmount::from_ether(1), SimTime::ZERO)
            .unwrap();
        let sender_before = chain.balance(&s.address());
        let a = SignedAgreement::sign(
            &s,
            &channel,
            TokenAmount::from_milli_ether(300),
            DigestMode::Salted,
        );
        let now = chain.clock();
        let (settlement, _) = chain.close_channel(&a, &r, now).unwrap();
        let close_fee = TokenAmount::from_wei(80_000 * WEI_PER_GWEI);
        assert_eq!(
            settlement.paid_to_receiver,
            TokenAmount::from_milli_ether(300)
        );
        assert_eq!(
            settlement.refunded_to_sender,
            TokenAmount::from_milli_ether(700)
        );
        assert_eq!(settlement.gas_charged, close_fee);
        assert_eq!(
            chain.balance(&r.address()),
            TokenAmount::from_ether(1) + TokenAmount::from_milli_ether(300) - close_fee
        );
        assert_eq!(
            chain.balance(&s.address()),
            sender_before + TokenAmount::from_milli_ether(700)
        );
        assert_eq!(chain.balance(&CHANNEL_CONTRACT), TokenAmount::ZERO);
        assert_eq!(
            chain.collateral(&s.address(), &r.address()),
            TokenAmount::ZERO
        );
        assert!(!chain.contract().channel(&channel.id).unwrap().is_open());

        let now = chain.clock();
        assert!(matches!(
            chain.close_channel(&a, &r, now),
            Err(ChannelError::NotOpen { .. })
        ));
    }

    #[test]
    fn zero_claim_refunds_everything() {
        let (mut chain, s, r) = setup(DigestMode::Salted);
        let (channel, _) = chain
            .open_channel(&s, r.address(), TokenAmount::from_ether(1), SimTime::ZERO)
            .unwrap();
        let a = SignedAgreement::sign(&s, &channel, TokenAmount::ZERO, DigestMode::Salted);
        let now = chain.clock();
        let (settlement, _) = chain.close_channel(&a, &r, now).unwrap();
        assert_eq!(settlement.paid_to_receiver, TokenAmount::ZERO);
        assert_eq!(settlement.refunded_to_sender, TokenAmount::from_ether(1));
    }

    #[test]
    fn only_receiver_may_close() {
        let (mut chain, s, r) = setup(DigestMode::Salted);
        let (channel, _) = chain
            .open_channel(&s, r.address(), TokenAmount::from_ether(1), SimTime::ZERO)
            .unwrap();
        let a = SignedAgreement::sign(
            &s,
            &channel,
            TokenAmount::from_milli_ether(1),
            DigestMode::Salted,
        );
        let now = chain.clock();
        assert_eq!(
            chain.submit_close(&a, &s, now).unwrap_err(),
            ChannelError::NotReceiver
        );
    }

    #[test]
    fn racing_closes_second_reverts_and_pays_gas() {
        let (mut chain, s, r) = setup(DigestMode::Salted);
        let (channel, _) = chain
            .open_channel(&s, r.address(), TokenAmount::from_ether(1), SimTime::ZERO)
            .unwrap();
        let a1 = SignedAgreement::sign(
            &s,
            &channel,
            TokenAmount::from_milli_ether(100),
            DigestMode::Salted,
        );
        let a2 = SignedAgreement::sign(
            &s,
            &channel,
            TokenAmount::from_milli_ether(200),
            DigestMode::Salted,
        );
        let now = chain.clock();
        let h1 = chain.submit_close(&a1, &r, now).unwrap();
        let h2 = chain.submit_close(&a2, &r, now).unwrap();
        let supply = chain.ledger().total_supply();
        chain.wait(h2).unwrap();
        assert!(chain.settlement(h1).is_ok());
        assert!(matches!(
            chain.settlement(h2),
            Err(ChannelError::Reverted(_))
        ));
        assert_eq!(chain.ledger().total_supply(), supply);
        assert_eq!(
            chain.balance(&FEE_SINK),
            TokenAmount::from_wei((103_000 + 2 * 80_000) * WEI_PER_GWEI)
        );
    }

    #[test]
    fn salted_digest_blocks_replay_on_reopened_pair() {
        for (mode, replay_accepted) in [(DigestMode::Salted, false), (DigestMode::Strict, true)] {
            let (mut chain, s, r) = setup(mode);
            let (c1, _) = chain
                .open_channel(&s, r.address(), TokenAmount::from_ether(1), SimTime::ZERO)
                .unwrap();
            let old = SignedAgreement::sign(&s, &c1, TokenAmount::from_milli_ether(400), mode);
            let zero = SignedAgreement::sign(&s, &c1, TokenAmount::ZERO, mode);
            let now = chain.clock();
            chain.close_channel(&zero, &r, now).unwrap();
            let now = chain.clock();
            let (c2, _) = chain
                .open_channel(&s, r.address(), TokenAmount::from_ether(1), now)
                .unwrap();
            assert_ne!(c1.id, c2.id);
            assert_eq!(chain.verify_agreement(&old), replay_accepted, "{mode:?}");
        }
    }

    #[test]
    fn claims_are_monotone() {
        let (mut chain, s, r) = setup(DigestMode::Salted);
        let (channel, _) = chain
            .open_channel(&s, r.address(), TokenAmount::from_ether(1), SimTime::ZERO)
            .unwrap();
        let mut tracker = ClaimTracker::new(&channel);
        let sign = |v| {
            SignedAgreement::sign(
                &s,
                &channel,
                TokenAmount::from_milli_ether(v),
                DigestMode::Salted,
            )
        };
        assert_eq!(
            tracker.accept(&chain, sign(200)).unwrap(),
            ClaimOutcome::Improved
        );
        assert_eq!(
            tracker.accept(&chain, sign(100)).unwrap(),
            ClaimOutcome::Stale
        );
        assert_eq!(tracker.best_value(), TokenAmount::from_milli_ether(200));
        assert_eq!(
            tracker.accept(&chain, sign(300)).unwrap(),
            ClaimOutcome::Improved
        );
        assert_eq!(tracker.best_value(), TokenAmount::from_milli_ether(300));

        let mut forged = sign(900);
        forged.signature = sign(901).signature;
        assert_eq!(
            tracker.accept(&chain, forged).unwrap_err(),
            ChannelError::InvalidAgreement
        );
        assert_eq!(tracker.best_value(), TokenAmount::from_milli_ether(300));
    }

    #[test]
    fn fifty_unit_claims_sum() {
        let (mut chain, s, r) = setup(DigestMode::Salted);
        let (channel, _) = chain
            .open_channel(&s, r.address(), TokenAmount::from_ether(1), SimTime::ZERO)
            .unwrap();
        let unit = TokenAmount::from_milli_ether(17);
        let mut tracker = ClaimTracker::new(&channel);
        let mut cumulative = TokenAmount::ZERO;
        for _ in 0..50 {
            cumulative = cumulative + unit;
            let a = SignedAgreement::sign(&s, &channel, cumulative, DigestMode::Salted);
            tracker.accept(&chain, a).unwrap();
        }
        assert_eq!(tracker.best_value(), unit.checked_mul(50).unwrap());
    }
}
