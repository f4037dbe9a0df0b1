//! Keys, addresses and recoverable signatures over keccak digests.
//!
//! Semantics follow the Ethereum conventions: keccak256 digests, secp256k1
//! ECDSA with RFC 6979 nonces, low-s normalization, and addresses taken from
//! the last 20 bytes of the hashed uncompressed public key.

/// secp256k1 group order n, big-endian.
const CURVE_ORDER: [u8; 32] = [
    0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xfe,
    0xba, 0xae, 0xdc, 0xe6, 0xaf, 0x48, 0xa0, 0x3b, 0xbf, 0xd2, 0x5e, 0x8c, 0xd0, 0x36, 0x41, 0x41,
];

/// floor(n / 2); canonical signatures have s at or below this.
const HALF_ORDER: [u8; 32] = [
    0x7f, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff,
    0x5d, 0x57, 0x6e, 0x73, 0x57, 0xa4, 0x50, 0x1d, 0xdf, 0xe9, 0x2f, 0x46, 0x68, 0x1b, 0x20, 0xa0,
];

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use secp256k1::ecdsa::{RecoverableSignature, RecoveryId};
use secp256k1::{Message, SecretKey, SECP256K1};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha3::{Digest as _, Keccak256};
use thiserror::Error;

use crate::chainsim::TokenAmount;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("secret scalar is zero or not below the curve order")]
    InvalidSecret,
    #[error("bytes do not encode a point on secp256k1")]
    InvalidPoint,
    #[error("malformed signature: {0}")]
    MalformedSignature(&'static str),
    #[error("signature does not recover to a public key")]
    Unrecoverable,
    #[error("invalid hex: {0}")]
    Hex(String),
}

fn decode_prefixed_hex<const N: usize>(s: &str) -> Result<[u8; N], CryptoError> {
    let body = s
        .strip_prefix("0x")
        .ok_or_else(|| CryptoError::Hex(format!("missing 0x prefix in {s:?}")))?;
    let mut out = [0u8; N];
    hex::decode_to_slice(body, &mut out).map_err(|e| CryptoError::Hex(e.to_string()))?;
    Ok(out)
}

macro_rules! fixed_bytes {
    ($(#[$meta:meta])* $name:ident, $len:expr) => {
        $(#[$meta])*
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub [u8; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub const fn new(bytes: [u8; $len]) -> Self {
                Self(bytes)
            }

            pub fn as_bytes(&self) -> &[u8; $len] {
                &self.0
            }
        }

        impl AsRef<[u8]> for $name {
            fn as_ref(&self) -> &[u8] {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "0x{}", hex::encode(self.0))
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self)
            }
        }

        impl FromStr for $name {
            type Err = CryptoError;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                decode_prefixed_hex::<$len>(s).map(Self)
            }
        }

        impl Serialize for $name {
            fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
                serializer.collect_str(self)
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
                let s = String::deserialize(deserializer)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

fixed_bytes!(
    /// 20-byte account identifier.
    Address,
    20
);

fixed_bytes!(
    /// 32-byte keccak256 output.
    Digest,
    32
);

pub fn keccak256(data: impl AsRef<[u8]>) -> Digest {
    Digest(Keccak256::digest(data.as_ref()).into())
}

/// A validated secp256k1 public key.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PublicKey(secp256k1::PublicKey);

impl PublicKey {
    /// Parses 64 bytes of uncompressed point coordinates (x ‖ y, no tag byte).
    pub fn from_uncompressed(xy: &[u8; 64]) -> Result<Self, CryptoError> {
        let mut tagged = [0u8; 65];
        tagged[0] = 0x04;
        tagged[1..].copy_from_slice(xy);
        secp256k1::PublicKey::from_slice(&tagged)
            .map(Self)
            .map_err(|_| CryptoError::InvalidPoint)
    }

    pub fn to_uncompressed(&self) -> [u8; 64] {
        let tagged = self.0.serialize_uncompressed();
        let mut out = [0u8; 64];
        out.copy_from_slice(&tagged[1..]);
        out
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey(0x{})", hex::encode(self.to_uncompressed()))
    }
}

pub fn derive_address(public: &PublicKey) -> Address {
    let hash = keccak256(public.to_uncompressed());
    let mut out = [0u8; 20];
    out.copy_from_slice(&hash.0[12..]);
    Address(out)
}

/// Derives an address from raw uncompressed coordinates, rejecting off-curve input.
pub fn address_from_uncompressed(xy: &[u8; 64]) -> Result<Address, CryptoError> {
    PublicKey::from_uncompressed(xy).map(|pk| derive_address(&pk))
}

#[derive(Clone)]
pub struct KeyPair {
    secret: SecretKey,
    public: PublicKey,
    address: Address,
}

impl KeyPair {
    pub fn from_secret_bytes(secret: &[u8; 32]) -> Result<Self, CryptoError> {
        let secret = SecretKey::from_byte_array(secret).map_err(|_| CryptoError::InvalidSecret)?;
        let public = PublicKey(secret.public_key(SECP256K1));
        let address = derive_address(&public);
        Ok(Self {
            secret,
            public,
            address,
        })
    }

    /// Draws a uniformly random valid secret from `rng`.
    pub fn random<R: RngCore + ?Sized>(rng: &mut R) -> Self {
        loop {
            let mut bytes = [0u8; 32];
            rng.fill_bytes(&mut bytes);
            if let Ok(kp) = Self::from_secret_bytes(&bytes) {
                return kp;
            }
        }
    }

    /// Deterministic key for a named actor: the secret is keccak256 of the label.
    pub fn from_label(label: &str) -> Self {
        let mut seed = keccak256(label.as_bytes()).0;
        loop {
            if let Ok(kp) = Self::from_secret_bytes(&seed) {
                return kp;
            }
            seed = keccak256(seed).0;
        }
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn address(&self) -> Address {
        self.address
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.secret_bytes()
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("address", &self.address)
            .finish_non_exhaustive()
    }
}

/// Recoverable ECDSA signature. `v` is the raw recovery id (0 or 1).
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature {
    pub r: [u8; 32],
    pub s: [u8; 32],
    pub v: u8,
}

impl Signature {
    pub fn to_bytes(&self) -> [u8; 65] {
        let mut out = [0u8; 65];
        out[..32].copy_from_slice(&self.r);
        out[32..64].copy_from_slice(&self.s);
        out[64] = self.v;
        out
    }

    pub fn from_bytes(bytes: &[u8; 65]) -> Self {
        let mut r = [0u8; 32];
        let mut s = [0u8; 32];
        r.copy_from_slice(&bytes[..32]);
        s.copy_from_slice(&bytes[32..64]);
        Self { r, s, v: bytes[64] }
    }

    fn to_recoverable(self) -> Result<RecoverableSignature, CryptoError> {
        if self.v > 1 {
            return Err(CryptoError::MalformedSignature(
                "recovery id must be 0 or 1",
            ));
        }
        let in_range = |x: &[u8; 32]| *x != [0u8; 32] && *x < CURVE_ORDER;
        if !in_range(&self.r) || !in_range(&self.s) {
            return Err(CryptoError::MalformedSignature(
                "r or s is zero or out of range",
            ));
        }
        if self.s > HALF_ORDER {
            return Err(CryptoError::MalformedSignature("s is not in low-s form"));
        }
        let recid = RecoveryId::try_from(i32::from(self.v))
            .map_err(|_| CryptoError::MalformedSignature("recovery id must be 0 or 1"))?;
        let mut compact = [0u8; 64];
        compact[..32].copy_from_slice(&self.r);
        compact[32..].copy_from_slice(&self.s);
        RecoverableSignature::from_compact(&compact, recid)
            .map_err(|_| CryptoError::MalformedSignature("unparseable compact signature"))
    }
}

impl fmt::Display for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", hex::encode(self.to_bytes()))
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({self})")
    }
}

impl FromStr for Signature {
    type Err = CryptoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        decode_prefixed_hex::<65>(s).map(|b| Self::from_bytes(&b))
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Signs the raw digest (no message prefix) with a deterministic RFC 6979 nonce.
pub fn sign(key: &KeyPair, digest: &Digest) -> Signature {
    // libsecp256k1 emits low-s signatures with RFC 6979 nonces.
    let sig = SECP256K1.sign_ecdsa_recoverable(&Message::from_digest(digest.0), &key.secret);
    let (recid, compact) = sig.serialize_compact();
    let mut r = [0u8; 32];
    let mut s = [0u8; 32];
    r.copy_from_slice(&compact[..32]);
    s.copy_from_slice(&compact[32..]);
    Signature {
        r,
        s,
        v: i32::from(recid) as u8,
    }
}

pub fn recover(digest: &Digest, sig: &Signature) -> Result<Address, CryptoError> {
    let sig = sig.to_recoverable()?;
    let key = SECP256K1
        .recover_ecdsa(&Message::from_digest(digest.0), &sig)
        .map_err(|_| CryptoError::Unrecoverable)?;
    Ok(derive_address(&PublicKey(key)))
}

/// Digest of a payment agreement:
/// `keccak256(sender[20] ‖ receiver[20] ‖ value as 32-byte big-endian ‖ salt[32])`.
pub fn agreement_digest(
    sender: &Address,
    receiver: &Address,
    value: TokenAmount,
    channel_salt: &[u8; 32],
) -> Digest {
    let mut buf = [0u8; 104];
    buf[..20].copy_from_slice(&sender.0);
    buf[20..40].copy_from_slice(&receiver.0);
    buf[56..72].copy_from_slice(&value.wei().to_be_bytes());
    buf[72..].copy_from_slice(channel_salt);
    keccak256(buf)
}
