//! Per-task edge prices drawn from spot-market style distributions.

use rand::distr::Uniform;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chainsim::{TokenAmount, WEI_PER_ETHER};
use crate::crypto::Address;
use crate::seed::substream;

/// Sampled prices are quantized to this many wei (one micro-ether).
pub const PRICE_RESOLUTION_WEI: u128 = 1_000_000_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PricingError {
    #[error("standard deviation must be positive, got {0}")]
    NonPositiveStd(f64),
    #[error("uniform bounds must satisfy 0 <= lo < hi, got [{0}, {1}]")]
    BadInterval(f64, f64),
    #[error("unknown price scheme {0}; expected 1, 2 or 3")]
    UnknownScheme(u8),
    #[error("edge count must be at least 1")]
    NoEdges,
}

/// Price distribution in ether per task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "variant")]
pub enum PriceModel {
    Normal { mean: f64, std: f64 },
    Uniform { lo: f64, hi: f64 },
}

impl PriceModel {
    /// Scheme 1: N(0.207, 0.01); scheme 2: N(0.207, 0.005); scheme 3: U[0.17, 0.23].
    pub fn scheme(id: u8) -> Result<Self, PricingError> {
        match id {
            1 => Ok(Self::Normal {
                mean: 0.207,
                std: 0.01,
            }),
            2 => Ok(Self::Normal {
                mean: 0.207,
                std: 0.005,
            }),
            3 => Ok(Self::Uniform { lo: 0.17, hi: 0.23 }),
            other => Err(PricingError::UnknownScheme(other)),
        }
    }

    pub fn validate(&self) -> Result<(), PricingError> {
        match *self {
            Self::Normal { std, .. } if std.is_nan() || std <= 0.0 => {
                Err(PricingError::NonPositiveStd(std))
            }
            Self::Uniform { lo, hi } if !(lo >= 0.0 && lo < hi) => {
                Err(PricingError::BadInterval(lo, hi))
            }
            _ => Ok(()),
        }
    }

    /// Upper end of the support used for sizing deposits; mean + 6σ for normals.
    pub fn price_ceiling(&self) -> f64 {
        match *self {
            Self::Normal { mean, std } => mean + 6.0 * std,
            Self::Uniform { hi, .. } => hi,
        }
    }

    fn draw_ether<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::Normal { mean, std } => {
                let normal = Normal::new(mean, std).expect("validated std");
                loop {
                    let x = normal.sample(rng);
                    if x >= 0.0 {
                        return x;
                    }
                }
            }
            Self::Uniform { lo, hi } => Uniform::new_inclusive(lo, hi)
                .expect("validated interval")
                .sample(rng),
        }
    }
}

/// Rounds an ether value half-up to [`PRICE_RESOLUTION_WEI`].
pub fn quantize_ether(ether: f64) -> TokenAmount {
    assert!(
        ether.is_finite() && ether >= 0.0,
        "price must be non-negative"
    );
    let units_per_ether = (WEI_PER_ETHER / PRICE_RESOLUTION_WEI) as f64;
    let units = (ether * units_per_ether + 0.5).floor() as u128;
    TokenAmount::from_wei(units * PRICE_RESOLUTION_WEI)
}

pub fn sample_price<R: Rng + ?Sized>(model: &PriceModel, rng: &mut R) -> TokenAmount {
    quantize_ether(model.draw_ether(rng))
}

/// E[min of n i.i.d. U(lo, hi)] = lo + (hi − lo)/(n + 1).
pub fn expected_min_uniform(lo: f64, hi: f64, n: usize) -> Result<f64, PricingError> {
    if n == 0 {
        return Err(PricingError::NoEdges);
    }
    Ok(lo + (hi - lo) / (n as f64 + 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PriceQuote {
    pub edge: Address,
    pub price: TokenAmount,
    pub epoch: u64,
}

/// Independent price stream for one edge.
#[derive(Debug, Clone)]
pub struct PriceFeed {
    edge: Address,
    model: PriceModel,
    rng: ChaCha20Rng,
    epoch: u64,
    current: Option<TokenAmount>,
}

impl PriceFeed {
    /// `stream` should be distinct per edge, e.g. the edge's registration index.
    pub fn new(
        edge: Address,
        model: PriceModel,
        seed: u64,
        stream: u64,
    ) -> Result<Self, PricingError> {
        model.validate()?;
        Ok(Self {
            edge,
            model,
            rng: substream(seed, &[0x7072_6963, stream]),
            epoch: 0,
            current: None,
        })
    }

    pub fn model(&self) -> &PriceModel {
        &self.model
    }

    /// Re-samples the price for the next task epoch.
    pub fn advance(&mut self) -> PriceQuote {
        self.epoch += 1;
        let price = sample_price(&self.model, &mut self.rng);
        self.current = Some(price);
        PriceQuote {
            edge: self.edge,
            price,
            epoch: self.epoch,
        }
    }

    pub fn current(&self) -> Option<PriceQuote> {
        self.current.map(|price| PriceQuote {
            edge: self.edge,
            price,
            epoch: self.epoch,
        })
    }
}
