use proptest::prelude::*;
use tollnet_core::channel::{Chain, ClaimTracker, DigestMode, SignedAgreement};
use tollnet_core::safety::check_session;
use tollnet_core::{ChainConfig, KeyPair, TokenAmount};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn random_sessions_hold_every_rule(seed in any::<u64>(), index in any::<u64>()) {
        let stats = check_session(seed, index).map_err(TestCaseError::fail)?;
        prop_assert_eq!(stats.forged_rejected, stats.forged_attempts);
        prop_assert_eq!(stats.over_deposit_rejected, stats.over_deposit_attempts);
        prop_assert_eq!(stats.replay_rejected, stats.replay_attempts);
    }

    #[test]
    fn close_splits_deposit_exactly(deposit in 1u128..=10u128.pow(19), frac in 0.0f64..=1.0) {
        let s = KeyPair::from_label("prop-sender");
        let r = KeyPair::from_label("prop-receiver");
        let mut chain = Chain::new(
            ChainConfig::default(),
            [(s.address(), TokenAmount::from_ether(100)), (r.address(), TokenAmount::from_ether(1))],
            DigestMode::Salted,
        ).unwrap();
        let deposit = TokenAmount::from_wei(deposit);
        let (ch, _) = chain.open_channel(&s, r.address(), deposit, chain.clock()).unwrap();
        let value = TokenAmount::from_wei(((deposit.wei() as f64) * frac) as u128).min(deposit);
        let a = SignedAgreement::sign(&s, &ch, value, DigestMode::Salted);
        let mut t = ClaimTracker::new(&ch);
        t.accept(&chain, a).unwrap();
        let (st, _) = chain.close_channel(t.best().unwrap(), &r, chain.clock()).unwrap();
        prop_assert_eq!(st.paid_to_receiver, value);
        prop_assert_eq!(st.paid_to_receiver + st.refunded_to_sender, deposit);
        prop_assert!(chain.collateral(&s.address(), &r.address()).is_zero());
    }
}
