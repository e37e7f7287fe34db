//! BIP-39 mnemonics and BIP-32 private-key derivation.

use std::fmt;
use std::str::FromStr;

use bip39::Mnemonic;
use hmac::{Hmac, Mac};
use k256::elliptic_curve::sec1::ToEncodedPoint;
use k256::{NonZeroScalar, PublicKey, Scalar};
use ripemd::Ripemd160;
use sha2::{Digest, Sha256, Sha512};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::curve;
use crate::field::FieldElement;

type HmacSha512 = Hmac<Sha512>;

pub const HARDENED: u32 = 0x8000_0000;
const XPRV_VERSION: [u8; 4] = [0x04, 0x88, 0xad, 0xe4];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HdError {
    #[error("invalid mnemonic: {0}")]
    Mnemonic(String),
    #[error("invalid derivation path: {0}")]
    InvalidPath(String),
    #[error("derived key is invalid at this index")]
    InvalidChild,
}

/// Encodes entropy (16..=32 bytes, multiple of 4) as English BIP-39 words.
pub fn entropy_to_mnemonic(entropy: &[u8]) -> Result<String, HdError> {
    Mnemonic::from_entropy(entropy)
        .map(|m| m.to_string())
        .map_err(|e| HdError::Mnemonic(e.to_string()))
}

/// Parses words and verifies the checksum.
pub fn mnemonic_to_entropy(words: &str) -> Result<Vec<u8>, HdError> {
    Mnemonic::parse(words)
        .map(|m| m.to_entropy())
        .map_err(|e| HdError::Mnemonic(e.to_string()))
}

/// PBKDF2-HMAC-SHA512 seed.
pub fn mnemonic_to_seed(words: &str, passphrase: &str) -> Result<Zeroizing<[u8; 64]>, HdError> {
    let m = Mnemonic::parse(words).map_err(|e| HdError::Mnemonic(e.to_string()))?;
    Ok(Zeroizing::new(m.to_seed(passphrase)))
}

/// The 24-word phrase for a 32-byte wallet scalar.
pub fn scalar_to_mnemonic(scalar: &FieldElement) -> Result<String, HdError> {
    entropy_to_mnemonic(&Zeroizing::new(scalar.to_bytes_be()))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DerivationPath(Vec<u32>);

impl DerivationPath {
    pub fn new(indices: Vec<u32>) -> Self {
        DerivationPath(indices)
    }

    pub fn indices(&self) -> &[u32] {
        &self.0
    }
}

impl FromStr for DerivationPath {
    type Err = HdError;

    /// `m/44'/60'/0'/0/0`; `h` or `H` also mark hardened steps.
    fn from_str(s: &str) -> Result<Self, HdError> {
        let mut parts = s.trim().split('/');
        if parts.next() != Some("m") {
            return Err(HdError::InvalidPath(format!("{s:?} must start with m")));
        }
        let mut out = Vec::new();
        for part in parts {
            let (digits, hardened) = match part.strip_suffix(['\'', 'h', 'H']) {
                Some(d) => (d, true),
                None => (part, false),
            };
            let idx: u32 = digits
                .parse()
                .map_err(|_| HdError::InvalidPath(format!("bad element {part:?}")))?;
            if idx >= HARDENED {
                return Err(HdError::InvalidPath(format!("index {idx} out of range")));
            }
            out.push(if hardened { idx | HARDENED } else { idx });
        }
        Ok(DerivationPath(out))
    }
}

impl fmt::Display for DerivationPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "m")?;
        for i in &self.0 {
            if i & HARDENED != 0 {
                write!(f, "/{}'", i & !HARDENED)?;
            } else {
                write!(f, "/{i}")?;
            }
        }
        Ok(())
    }
}

/// Extended private key.
#[derive(Clone)]
pub struct ExtendedKey {
    secret: NonZeroScalar,
    chain_code: [u8; 32],
    depth: u8,
    parent_fingerprint: [u8; 4],
    child_number: u32,
}

impl fmt::Debug for ExtendedKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ExtendedKey")
            .field("public", &hex::encode(self.public_bytes()))
            .field("depth", &self.depth)
            .field("child_number", &self.child_number)
            .finish_non_exhaustive()
    }
}

fn hash160(bytes: &[u8]) -> [u8; 20] {
    Ripemd160::digest(Sha256::digest(bytes)).into()
}

impl ExtendedKey {
    pub fn master(seed: &[u8]) -> Result<Self, HdError> {
        let mut mac = HmacSha512::new_from_slice(b"Bitcoin seed").expect("any key length");
        mac.update(seed);
        let out = Zeroizing::new(mac.finalize().into_bytes());
        let secret = Option::from(NonZeroScalar::try_from(&out[..32]).ok())
            .flatten()
            .ok_or(HdError::InvalidChild)?;
        Ok(ExtendedKey {
            secret,
            chain_code: out[32..].try_into().unwrap(),
            depth: 0,
            parent_fingerprint: [0; 4],
            child_number: 0,
        })
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey::from_secret_scalar(&self.secret)
    }

    pub fn public_bytes(&self) -> [u8; 33] {
        curve::point_to_bytes(&self.public_key())
    }

    pub fn private_bytes(&self) -> Zeroizing<[u8; 32]> {
        Zeroizing::new(self.secret.to_bytes().into())
    }

    pub fn scalar(&self) -> FieldElement {
        curve::scalar_to_field(&self.secret)
    }

    pub fn chain_code(&self) -> &[u8; 32] {
        &self.chain_code
    }

    pub fn fingerprint(&self) -> [u8; 4] {
        hash160(self.public_key().to_encoded_point(true).as_bytes())[..4]
            .try_into()
            .unwrap()
    }

    pub fn derive_child(&self, index: u32) -> Result<Self, HdError> {
        let mut mac = HmacSha512::new_from_slice(&self.chain_code).expect("any key length");
        if index & HARDENED != 0 {
            mac.update(&[0]);
            mac.update(&self.private_bytes()[..]);
        } else {
            mac.update(&self.public_bytes());
        }
        mac.update(&index.to_be_bytes());
        let out = Zeroizing::new(mac.finalize().into_bytes());
        let tweak: Scalar = Option::from(NonZeroScalar::try_from(&out[..32]).ok())
            .flatten()
            .map(|s: NonZeroScalar| *s)
            .ok_or(HdError::InvalidChild)?;
        let child = Option::from(NonZeroScalar::new(tweak + *self.secret)).ok_or(HdError::InvalidChild)?;
        Ok(ExtendedKey {
            secret: child,
            chain_code: out[32..].try_into().unwrap(),
            depth: self.depth.checked_add(1).ok_or(HdError::InvalidPath("too deep".into()))?,
            parent_fingerprint: self.fingerprint(),
            child_number: index,
        })
    }

    pub fn derive_path(&self, path: &DerivationPath) -> Result<Self, HdError> {
        path.indices().iter().try_fold(self.clone(), |k, &i| k.derive_child(i))
    }

    /// Base58Check `xprv` serialization.
    pub fn to_xprv(&self) -> String {
        let mut raw = Zeroizing::new(Vec::with_capacity(78));
        raw.extend_from_slice(&XPRV_VERSION);
        raw.push(self.depth);
        raw.extend_from_slice(&self.parent_fingerprint);
        raw.extend_from_slice(&self.child_number.to_be_bytes());
        raw.extend_from_slice(&self.chain_code);
        raw.push(0);
        raw.extend_from_slice(&self.private_bytes()[..]);
        bs58::encode(&raw[..]).with_check().into_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Published BIP-39 English vectors (passphrase "TREZOR").
    const ZERO16_WORDS: &str =
        "abandon abandon abandon abandon abandon abandon abandon abandon abandon abandon abandon about";
    const ZERO16_SEED: &str = "c55257c360c07c72029aebc1b53c05ed0362ada38ead3e3e9efa3708e53495531f09a6987599d18264c1e1c92f2cf141630c7a3c4ab7c81b2f001698e7463b04";

    #[test]
    fn bip39_zero_entropy_vector() {
        assert_eq!(entropy_to_mnemonic(&[0u8; 16]).unwrap(), ZERO16_WORDS);
        assert_eq!(mnemonic_to_entropy(ZERO16_WORDS).unwrap(), vec![0u8; 16]);
        assert_eq!(hex::encode(&mnemonic_to_seed(ZERO16_WORDS, "TREZOR").unwrap()[..]), ZERO16_SEED);
        let w24 = entropy_to_mnemonic(&[0u8; 32]).unwrap();
        assert_eq!(w24.split(' ').count(), 24);
        assert!(w24.ends_with("abandon art"));
    }

    #[test]
    fn bip39_checksum_word_changes_with_any_bit() {
        let base = [0x5au8; 32];
        let last = |e: &[u8]| entropy_to_mnemonic(e).unwrap().rsplit(' ').next().unwrap().to_string();
        // 256-bit entropy: the last word is 3 entropy bits followed by the
        // 8-bit SHA-256 checksum, so flipping any bit must change it.
        for bit in 0..256 {
            let mut e = base;
            e[bit / 8] ^= 1 << (bit % 8);
            let sum_a = Sha256::digest(base)[0];
            let sum_b = Sha256::digest(e)[0];
            let in_last_word = bit / 8 == 31 && bit % 8 < 3;
            let expect_change = sum_a != sum_b || in_last_word;
            assert_eq!(last(&e) != last(&base), expect_change, "bit {bit}");
        }
        assert!(mnemonic_to_entropy("abandon abandon abandon abandon abandon abandon abandon abandon abandon abandon abandon abandon").is_err());
    }

    // Published BIP-32 vectors 1 and 2: (path, xprv, compressed pubkey).
    const BIP32_V1_SEED: &str = "000102030405060708090a0b0c0d0e0f";
    const BIP32_V1: &[(&str, &str, &str)] = &[
        ("m", "xprv9s21ZrQH143K3QTDL4LXw2F7HEK3wJUD2nW2nRk4stbPy6cq3jPPqjiChkVvvNKmPGJxWUtg6LnF5kejMRNNU3TGtRBeJgk33yuGBxrMPHi", "0339a36013301597daef41fbe593a02cc513d0b55527ec2df1050e2e8ff49c85c2"),
        ("m/0'", "xprv9uHRZZhk6KAJC1avXpDAp4MDc3sQKNxDiPvvkX8Br5ngLNv1TxvUxt4cV1rGL5hj6KCesnDYUhd7oWgT11eZG7XnxHrnYeSvkzY7d2bhkJ7", "035a784662a4a20a65bf6aab9ae98a6c068a81c52e4b032c0fb5400c706cfccc56"),
        ("m/0'/1", "xprv9wTYmMFdV23N2TdNG573QoEsfRrWKQgWeibmLntzniatZvR9BmLnvSxqu53Kw1UmYPxLgboyZQaXwTCg8MSY3H2EU4pWcQDnRnrVA1xe8fs", "03501e454bf00751f24b1b489aa925215d66af2234e3891c3b21a52bedb3cd711c"),
        ("m/0'/1/2'", "xprv9z4pot5VBttmtdRTWfWQmoH1taj2axGVzFqSb8C9xaxKymcFzXBDptWmT7FwuEzG3ryjH4ktypQSAewRiNMjANTtpgP4mLTj34bhnZX7UiM", "0357bfe1e341d01c69fe5654309956cbea516822fba8a601743a012a7896ee8dc2"),
        ("m/0'/1/2'/2", "xprvA2JDeKCSNNZky6uBCviVfJSKyQ1mDYahRjijr5idH2WwLsEd4Hsb2Tyh8RfQMuPh7f7RtyzTtdrbdqqsunu5Mm3wDvUAKRHSC34sJ7in334", "02e8445082a72f29b75ca48748a914df60622a609cacfce8ed0e35804560741d29"),
        ("m/0'/1/2'/2/1000000000", "xprvA41z7zogVVwxVSgdKUHDy1SKmdb533PjDz7J6N6mV6uS3ze1ai8FHa8kmHScGpWmj4WggLyQjgPie1rFSruoUihUZREPSL39UNdE3BBDu76", "022a471424da5e657499d1ff51cb43c47481a03b1e77f951fe64cec9f5a48f7011"),
    ];
    const BIP32_V2_SEED: &str = "fffcf9f6f3f0edeae7e4e1dedbd8d5d2cfccc9c6c3c0bdbab7b4b1aeaba8a5a29f9c999693908d8a8784817e7b7875726f6c696663605d5a5754514e4b484542";
    const BIP32_V2: &[(&str, &str, &str)] = &[
        ("m", "xprv9s21ZrQH143K31xYSDQpPDxsXRTUcvj2iNHm5NUtrGiGG5e2DtALGdso3pGz6ssrdK4PFmM8NSpSBHNqPqm55Qn3LqFtT2emdEXVYsCzC2U", "03cbcaa9c98c877a26977d00825c956a238e8dddfbd322cce4f74b0b5bd6ace4a7"),
        ("m/0", "xprv9vHkqa6EV4sPZHYqZznhT2NPtPCjKuDKGY38FBWLvgaDx45zo9WQRUT3dKYnjwih2yJD9mkrocEZXo1ex8G81dwSM1fwqWpWkeS3v86pgKt", "02fc9e5af0ac8d9b3cecfe2a888e2117ba3d089d8585886c9c826b6b22a98d12ea"),
        ("m/0/2147483647'", "xprv9wSp6B7kry3Vj9m1zSnLvN3xH8RdsPP1Mh7fAaR7aRLcQMKTR2vidYEeEg2mUCTAwCd6vnxVrcjfy2kRgVsFawNzmjuHc2YmYRmagcEPdU9", "03c01e7425647bdefa82b12d9bad5e3e6865bee0502694b94ca58b666abc0a5c3b"),
        ("m/0/2147483647'/1", "xprv9zFnWC6h2cLgpmSA46vutJzBcfJ8yaJGg8cX1e5StJh45BBciYTRXSd25UEPVuesF9yog62tGAQtHjXajPPdbRCHuWS6T8XA2ECKADdw4Ef", "03a7d1d856deb74c508e05031f9895dab54626251b3806e16b4bd12e781a7df5b9"),
        ("m/0/2147483647'/1/2147483646'", "xprvA1RpRA33e1JQ7ifknakTFpgNXPmW2YvmhqLQYMmrj4xJXXWYpDPS3xz7iAxn8L39njGVyuoseXzU6rcxFLJ8HFsTjSyQbLYnMpCqE2VbFWc", "02d2b36900396c9282fa14628566582f206a5dd0bcc8d5e892611806cafb0301f0"),
        ("m/0/2147483647'/1/2147483646'/2", "xprvA2nrNbFZABcdryreWet9Ea4LvTJcGsqrMzxHx98MMrotbir7yrKCEXw7nadnHM8Dq38EGfSh6dqA9QWTyefMLEcBYJUuekgW4BYPJcr9E7j", "024d902e1a2fc7a8755ab5b694c575fce742c48d9ff192e63df5193e4c7afe1f9c"),
    ];

    #[test]
    fn bip32_published_vectors() {
        for (seed, rows) in [(BIP32_V1_SEED, BIP32_V1), (BIP32_V2_SEED, BIP32_V2)] {
            let master = ExtendedKey::master(&hex::decode(seed).unwrap()).unwrap();
            for (path, xprv, public) in rows {
                let key = master.derive_path(&path.parse().unwrap()).unwrap();
                assert_eq!(key.to_xprv(), *xprv, "{path}");
                assert_eq!(hex::encode(key.public_bytes()), *public, "{path}");
            }
        }
    }

    #[test]
    fn bip39_published_vectors() {
        let rows = [
            ("7f7f7f7f7f7f7f7f7f7f7f7f7f7f7f7f", "legal winner thank year wave sausage worth useful legal winner thank yellow", "2e8905819b8723fe2c1d161860e5ee1830318dbf49a83bd451cfb8440c28bd6fa457fe1296106559a3c80937a1c1069be3a3a5bd381ee6260e8d9739fce1f607"),
            ("80808080808080808080808080808080", "letter advice cage absurd amount doctor acoustic avoid letter advice cage above", "d71de856f81a8acc65e6fc851a38d4d7ec216fd0796d0a6827a3ad6ed5511a30fa280f12eb2e47ed2ac03b5c462a0358d18d69fe4f985ec81778c1b370b652a8"),
            ("ffffffffffffffffffffffffffffffff", "zoo zoo zoo zoo zoo zoo zoo zoo zoo zoo zoo wrong", "ac27495480225222079d7be181583751e86f571027b0497b5b5d11218e0a8a13332572917f0f8e5a589620c6f15b11c61dee327651a14c34e18231052e48c069"),
            ("9e885d952ad362caeb4efe34a8e91bd2", "ozone drill grab fiber curtain grace pudding thank cruise elder eight picnic", "274ddc525802f7c828d8ef7ddbcdc5304e87ac3535913611fbbfa986d0c9e5476c91689f9c8a54fd55bd38606aa6a8595ad213d4c9c9f9aca3fb217069a41028"),
        ];
        for (entropy, words, seed) in rows {
            let e = hex::decode(entropy).unwrap();
            assert_eq!(entropy_to_mnemonic(&e).unwrap(), words);
            assert_eq!(mnemonic_to_entropy(words).unwrap(), e);
            assert_eq!(hex::encode(&mnemonic_to_seed(words, "TREZOR").unwrap()[..]), seed);
        }
    }

    #[test]
    fn path_parsing() {
        let p: DerivationPath = "m/44'/60'/0'/0/7".parse().unwrap();
        assert_eq!(p.indices(), &[44 | HARDENED, 60 | HARDENED, HARDENED, 0, 7]);
        assert_eq!(p.to_string(), "m/44'/60'/0'/0/7");
        assert_eq!("m/0h/1H".parse::<DerivationPath>().unwrap().indices(), &[HARDENED, 1 | HARDENED]);
        assert_eq!("m".parse::<DerivationPath>().unwrap().indices(), &[] as &[u32]);
        for bad in ["", "44/0", "m/x", "m/2147483648", "m//1", "m/-1"] {
            assert!(bad.parse::<DerivationPath>().is_err(), "{bad}");
        }
    }
}
