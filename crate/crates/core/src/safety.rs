//! Randomized channel sessions checked against the ledger's safety rules.
//!
//! Each session opens a channel with a random deposit, streams cumulative
//! agreements (some forged, some over the deposit, delivered out of order),
//! closes with the receiver's best claim, then replays old claims on a
//! reopened channel. Any broken rule is reported with the session index.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::chainsim::{ChainConfig, TokenAmount};
use crate::channel::{
    Chain, ChannelError, ClaimTracker, DigestMode, SignedAgreement, CHANNEL_CONTRACT,
};
use crate::crypto::{sign, Address, KeyPair};
use crate::seed::substream;

/// Counters summed over every session.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SafetyStats {
    pub sessions: u64,
    pub claims_accepted: u64,
    pub forged_attempts: u64,
    pub forged_rejected: u64,
    pub over_deposit_attempts: u64,
    pub over_deposit_rejected: u64,
    pub replay_attempts: u64,
    pub replay_rejected: u64,
}

impl SafetyStats {
    fn merge(mut self, o: Self) -> Self {
        self.sessions += o.sessions;
        self.claims_accepted += o.claims_accepted;
        self.forged_attempts += o.forged_attempts;
        self.forged_rejected += o.forged_rejected;
        self.over_deposit_attempts += o.over_deposit_attempts;
        self.over_deposit_rejected += o.over_deposit_rejected;
        self.replay_attempts += o.replay_attempts;
        self.replay_rejected += o.replay_rejected;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub session: u64,
    pub rule: String,
}

#[derive(Debug, Clone, Default)]
pub struct SafetyReport {
    pub stats: SafetyStats,
    pub violations: Vec<Violation>,
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn fails(r: Result<impl Sized, ChannelError>) -> bool {
    r.is_err()
}

/// Runs randomized session `index` derived from `seed`.
pub fn check_session(seed: u64, index: u64) -> Result<SafetyStats, String> {
    let mut rng = substream(seed, &[0x5afe, index]);
    let sender = KeyPair::random(&mut rng);
    let receiver = KeyPair::random(&mut rng);
    let forger = KeyPair::random(&mut rng);
    let stranger = Address(rng.random());
    let mut stats = SafetyStats {
        sessions: 1,
        ..SafetyStats::default()
    };

    let deposit = TokenAmount::from_wei(rng.random_range(1..=5 * 10u128.pow(18)));
    let funds = TokenAmount::from_ether(20);
    let mut chain = Chain::new(
        ChainConfig::default(),
        [
            (sender.address(), funds),
            (receiver.address(), TokenAmount::from_ether(1)),
        ],
        DigestMode::Salted,
    )
    .map_err(|e| e.to_string())?;
    let supply = chain.ledger().total_supply();

    ensure!(
        chain
            .collateral(&sender.address(), &receiver.address())
            .is_zero(),
        "collateral before any open"
    );
    let (channel, _) = chain
        .open_channel(&sender, receiver.address(), deposit, chain.clock())
        .map_err(|e| e.to_string())?;
    ensure!(
        chain.collateral(&sender.address(), &receiver.address()) == deposit,
        "collateral differs from deposit"
    );
    for (a, b) in [
        (receiver.address(), sender.address()),
        (sender.address(), stranger),
        (stranger, receiver.address()),
    ] {
        ensure!(
            chain.collateral(&a, &b).is_zero(),
            "nonzero collateral for an unknown pair"
        );
    }

    // Honest cumulative claims, non-decreasing and within the deposit.
    let steps = rng.random_range(1..=8usize);
    let mut values: Vec<u128> = (0..steps)
        .map(|_| rng.random_range(0..=deposit.wei()))
        .collect();
    values.sort_unstable();
    let honest: Vec<SignedAgreement> = values
        .iter()
        .map(|&v| {
            SignedAgreement::sign(
                &sender,
                &channel,
                TokenAmount::from_wei(v),
                DigestMode::Salted,
            )
        })
        .collect();
    // Deliver out of order; the tracked best must never fall.
    let mut tracker = ClaimTracker::new(&channel);
    let mut delivery = honest.clone();
    delivery.shuffle(&mut rng);
    let mut best_seen = TokenAmount::ZERO;
    for a in delivery {
        let value = a.cumulative_value;
        tracker
            .accept(&chain, a)
            .map_err(|e| format!("honest claim refused: {e}"))?;
        stats.claims_accepted += 1;
        best_seen = best_seen.max(value);
        ensure!(
            tracker.best_value() == best_seen,
            "tracked best is not the running maximum"
        );
    }

    // Forgeries: foreign signers, and an honest signature on a raised value.
    let top = tracker.best_value();
    let forged_value = TokenAmount::from_wei(rng.random_range(0..=deposit.wei()));
    let signed_by = |key: &KeyPair| {
        let mut a = SignedAgreement::sign(&sender, &channel, forged_value, DigestMode::Salted);
        a.signature = sign(key, &a.digest(&channel.salt(DigestMode::Salted)));
        a
    };
    let by_forger = signed_by(&forger);
    let mut raised = honest.last().expect("at least one step").clone();
    raised.cumulative_value =
        raised.cumulative_value.max(TokenAmount::from_wei(1)) + TokenAmount::from_wei(1);
    if raised.cumulative_value > deposit {
        raised.cumulative_value = deposit;
        raised.signature =
            SignedAgreement::sign(&sender, &channel, TokenAmount::ZERO, DigestMode::Salted)
                .signature;
    }
    let receiver_signed = signed_by(&receiver);
    for f in [by_forger, raised, receiver_signed] {
        stats.forged_attempts += 1;
        // The tracker checks through the contract's own verifier.
        let rejected = fails(tracker.accept(&chain, f.clone()))
            && fails(chain.submit_close(&f, &receiver, chain.clock()));
        if rejected {
            stats.forged_rejected += 1;
        }
    }
    ensure!(
        tracker.best_value() == top,
        "a forged claim moved the tracked best"
    );

    // Claims above the deposit, signed correctly, are still void.
    let over = SignedAgreement::sign(
        &sender,
        &channel,
        deposit + TokenAmount::from_wei(rng.random_range(1..=10u128.pow(18))),
        DigestMode::Salted,
    );
    stats.over_deposit_attempts += 1;
    if fails(tracker.accept(&chain, over.clone()))
        && fails(chain.submit_close(&over, &receiver, chain.clock()))
    {
        stats.over_deposit_rejected += 1;
    }

    // Only the receiver may close.
    let best = tracker.best().expect("at least one claim").clone();
    ensure!(
        matches!(
            chain.submit_close(&best, &sender, chain.clock()),
            Err(ChannelError::NotReceiver)
        ),
        "sender was allowed to close"
    );

    let before_receiver = chain.balance(&receiver.address());
    let before_sender = chain.balance(&sender.address());
    let (settlement, receipt) = chain
        .close_channel(&best, &receiver, chain.clock())
        .map_err(|e| format!("close failed: {e}"))?;
    ensure!(
        settlement.paid_to_receiver + settlement.refunded_to_sender == deposit,
        "payout {} + refund {} != deposit {}",
        settlement.paid_to_receiver,
        settlement.refunded_to_sender,
        deposit
    );
    ensure!(
        settlement.paid_to_receiver == top,
        "payout is not the best claim"
    );
    ensure!(
        chain.balance(&receiver.address()) == before_receiver + top - receipt.fee,
        "receiver balance off"
    );
    ensure!(
        chain.balance(&sender.address()) == before_sender + settlement.refunded_to_sender,
        "sender balance off"
    );
    ensure!(
        chain.balance(&CHANNEL_CONTRACT).is_zero(),
        "escrow not empty after close"
    );
    ensure!(
        chain.ledger().total_supply() == supply,
        "total supply changed"
    );
    ensure!(
        chain
            .collateral(&sender.address(), &receiver.address())
            .is_zero(),
        "collateral nonzero after close"
    );
    ensure!(
        fails(chain.submit_close(&best, &receiver, chain.clock())),
        "closed channel closed twice"
    );

    // Reopen the same pair; every old claim must be dead on the new channel.
    let (reopened, _) = chain
        .open_channel(&sender, receiver.address(), deposit, chain.clock())
        .map_err(|e| e.to_string())?;
    ensure!(reopened.id != channel.id, "reopened channel reused its id");
    let mut fresh = ClaimTracker::new(&reopened);
    let older = &honest[rng.random_range(0..honest.len())];
    for old in [&best, older] {
        stats.replay_attempts += 1;
        if !chain.verify_agreement(old) && fails(fresh.accept(&chain, old.clone())) {
            stats.replay_rejected += 1;
        }
    }
    Ok(stats)
}

/// Runs `sessions` randomized sessions in parallel.
pub fn run_channel_safety(seed: u64, sessions: u64) -> SafetyReport {
    let results: Vec<(u64, Result<SafetyStats, String>)> = (0..sessions)
        .into_par_iter()
        .map(|i| (i, check_session(seed, i)))
        .collect();
    let mut report = SafetyReport::default();
    for (session, r) in results {
        match r {
            Ok(s) => report.stats = report.stats.merge(s),
            Err(rule) => report.violations.push(Violation { session, rule }),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_is_clean() {
        let r = run_channel_safety(7, 64);
        assert!(r.violations.is_empty(), "{:?}", r.violations);
        let s = r.stats;
        assert_eq!(s.sessions, 64);
        assert_eq!(s.forged_attempts, 3 * 64);
        assert_eq!(s.forged_rejected, s.forged_attempts);
        assert_eq!(s.over_deposit_rejected, s.over_deposit_attempts);
        assert_eq!(s.replay_rejected, s.replay_attempts);
        assert_eq!(s.replay_attempts, 2 * 64);
    }

    #[test]
    fn sessions_are_reproducible() {
        assert_eq!(check_session(3, 11), check_session(3, 11));
    }
}
