//! Pay-per-task edge offloading over simulated off-chain payment channels.
//!
//! A terminal opens one channel to a proxy and pays for each task with a
//! signed cumulative agreement; the proxy matches tasks to the cheapest
//! registered edge and relays payment over its own channel to that edge.

pub mod chainsim;
pub mod channel;
pub mod crypto;
pub mod harness;
pub mod net;
pub mod node;
pub mod pricing;
pub mod proxy;
pub mod safety;
pub mod seed;
pub mod wire;

pub use chainsim::{BlockTiming, ChainConfig, GasSchedule, SimTime, TokenAmount};
pub use channel::{Chain, Channel, SignedAgreement};
pub use crypto::{Address, KeyPair};
pub use harness::{ExperimentConfig, ExperimentRow, HarnessError, IntegrationConfig};
pub use node::{SessionMode, SessionReport, TerminalSession};
pub use pricing::PriceModel;
pub use proxy::{Proxy, ProxyConfig};
