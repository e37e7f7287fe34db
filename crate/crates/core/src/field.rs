//! Prime-field arithmetic, Shamir splitting and Lagrange interpolation.
//!
//! Every element carries a handle to the [`Field`] it lives in, so mixing
//! elements of different fields is caught at the operator boundary instead of
//! silently producing garbage. The production field is the secp256k1 group
//! order; small primes are accepted for hand-checkable tests.

use std::fmt;
use std::ops::{Add, Mul, Neg, Sub};
use std::sync::{Arc, OnceLock};

use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};
use thiserror::Error;

/// Order of the secp256k1 scalar group, big-endian hex.
pub const SECP256K1_ORDER_HEX: &str =
    "fffffffffffffffffffffffffffffffebaaedce6af48a03bbfd25e8cd0364141";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ShamirError {
    #[error("modulus {0} is not prime")]
    NotPrime(String),
    #[error("invalid share policy: {0}")]
    InvalidPolicy(String),
    #[error("share x-coordinate must be nonzero")]
    ZeroX,
    #[error("duplicate share x-coordinate")]
    DuplicateX,
    #[error("need at least {needed} shares, got {got}")]
    TooFewShares { needed: usize, got: usize },
    #[error("x-coordinate collides with an existing share")]
    XCollision,
    #[error("value is not a canonical field element")]
    NonCanonical,
    #[error("elements belong to different fields")]
    FieldMismatch,
}

/// Modulus and derived constants of a prime field.
#[derive(Debug, PartialEq, Eq)]
pub struct FieldSpec {
    modulus: BigUint,
    byte_len: usize,
}

/// Cheaply clonable handle to a [`FieldSpec`].
#[derive(Clone)]
pub struct Field(Arc<FieldSpec>);

impl fmt::Debug for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Field({})", self.0.modulus)
    }
}

impl PartialEq for Field {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0) || self.0.modulus == other.0.modulus
    }
}

impl Eq for Field {}

impl Field {
    /// Builds a field over `modulus`, rejecting composites (Miller-Rabin).
    pub fn new(modulus: BigUint) -> Result<Self, ShamirError> {
        if !is_probable_prime(&modulus) {
            return Err(ShamirError::NotPrime(modulus.to_string()));
        }
        Ok(Self::new_unchecked(modulus))
    }

    pub fn small(modulus: u64) -> Result<Self, ShamirError> {
        Self::new(BigUint::from(modulus))
    }

    fn new_unchecked(modulus: BigUint) -> Self {
        let byte_len = modulus.bits().div_ceil(8) as usize;
        Field(Arc::new(FieldSpec { modulus, byte_len }))
    }

    /// The secp256k1 scalar field. Shared process-wide.
    pub fn secp256k1_order() -> Self {
        static ORDER: OnceLock<Field> = OnceLock::new();
        ORDER
            .get_or_init(|| {
                let m = BigUint::parse_bytes(SECP256K1_ORDER_HEX.as_bytes(), 16)
                    .expect("order constant parses");
                Field::new_unchecked(m)
            })
            .clone()
    }

    pub fn modulus(&self) -> &BigUint {
        &self.0.modulus
    }

    /// Width of the fixed-length big-endian encoding of an element.
    pub fn byte_len(&self) -> usize {
        self.0.byte_len
    }

    /// Reduces `value` into the field.
    pub fn element(&self, value: impl Into<BigUint>) -> FieldElement {
        FieldElement {
            value: value.into() % &self.0.modulus,
            field: self.clone(),
        }
    }

    pub fn zero(&self) -> FieldElement {
        self.element(0u32)
    }

    pub fn one(&self) -> FieldElement {
        self.element(1u32)
    }

    /// Parses a big-endian encoding, rejecting values `>= modulus`.
    pub fn from_bytes_be(&self, bytes: &[u8]) -> Result<FieldElement, ShamirError> {
        let value = BigUint::from_bytes_be(bytes);
        if value >= self.0.modulus {
            return Err(ShamirError::NonCanonical);
        }
        Ok(FieldElement {
            value,
            field: self.clone(),
        })
    }

    /// Uniform element via rejection sampling on the modulus bit length.
    pub fn random<R: RngCore + CryptoRng + ?Sized>(&self, rng: &mut R) -> FieldElement {
        let bits = self.0.modulus.bits();
        let mut buf = vec![0u8; self.0.byte_len];
        let excess = (self.0.byte_len as u64 * 8 - bits) as u32;
        loop {
            rng.fill_bytes(&mut buf);
            buf[0] &= 0xffu8.checked_shr(excess).unwrap_or(0);
            let value = BigUint::from_bytes_be(&buf);
            if value < self.0.modulus {
                return FieldElement {
                    value,
                    field: self.clone(),
                };
            }
        }
    }

    pub fn random_nonzero<R: RngCore + CryptoRng + ?Sized>(&self, rng: &mut R) -> FieldElement {
        loop {
            let e = self.random(rng);
            if !e.is_zero() {
                return e;
            }
        }
    }
}

/// An integer in `[0, modulus)`.
#[derive(Clone, PartialEq, Eq)]
pub struct FieldElement {
    value: BigUint,
    field: Field,
}

impl fmt::Debug for FieldElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value)
    }
}

impl FieldElement {
    pub fn field(&self) -> &Field {
        &self.field
    }

    pub fn value(&self) -> &BigUint {
        &self.value
    }

    pub fn is_zero(&self) -> bool {
        self.value.is_zero()
    }

    /// Fixed-width big-endian encoding (`field().byte_len()` bytes).
    pub fn to_bytes_be(&self) -> Vec<u8> {
        let raw = self.value.to_bytes_be();
        let mut out = vec![0u8; self.field.byte_len()];
        if !self.is_zero() {
            out[self.field.byte_len() - raw.len()..].copy_from_slice(&raw);
        }
        out
    }

    /// Multiplicative inverse via Fermat; `None` for zero.
    pub fn inverse(&self) -> Option<FieldElement> {
        if self.is_zero() {
            return None;
        }
        let m = self.field.modulus();
        let exp = m - BigUint::from(2u32);
        Some(FieldElement {
            value: self.value.modpow(&exp, m),
            field: self.field.clone(),
        })
    }

    fn same_field(&self, other: &FieldElement) {
        assert!(self.field == other.field, "{}", ShamirError::FieldMismatch);
    }
}

impl<'a> Add<&'a FieldElement> for &'a FieldElement {
    type Output = FieldElement;
    fn add(self, rhs: &FieldElement) -> FieldElement {
        self.same_field(rhs);
        self.field.element(&self.value + &rhs.value)
    }
}

impl<'a> Sub<&'a FieldElement> for &'a FieldElement {
    type Output = FieldElement;
    fn sub(self, rhs: &FieldElement) -> FieldElement {
        self.same_field(rhs);
        let m = self.field.modulus();
        self.field.element(&self.value + m - &rhs.value)
    }
}

impl<'a> Mul<&'a FieldElement> for &'a FieldElement {
    type Output = FieldElement;
    fn mul(self, rhs: &FieldElement) -> FieldElement {
        self.same_field(rhs);
        self.field.element(&self.value * &rhs.value)
    }
}

impl Neg for &FieldElement {
    type Output = FieldElement;
    fn neg(self) -> FieldElement {
        &self.field.zero() - self
    }
}

macro_rules! forward_owned {
    ($($tr:ident $m:ident),*) => {$(
        impl $tr<FieldElement> for FieldElement {
            type Output = FieldElement;
            fn $m(self, rhs: FieldElement) -> FieldElement { (&self).$m(&rhs) }
        }
        impl<'a> $tr<&'a FieldElement> for FieldElement {
            type Output = FieldElement;
            fn $m(self, rhs: &FieldElement) -> FieldElement { (&self).$m(rhs) }
        }
    )*};
}
forward_owned!(Add add, Sub sub, Mul mul);

fn is_probable_prime(n: &BigUint) -> bool {
    const BASES: [u32; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    let two = BigUint::from(2u32);
    if *n < two {
        return false;
    }
    for b in BASES {
        let b = BigUint::from(b);
        if *n == b {
            return true;
        }
        if (n % &b).is_zero() {
            return false;
        }
    }
    let one = BigUint::one();
    let n_minus_1 = n - &one;
    let mut d = n_minus_1.clone();
    let mut s = 0u32;
    while (&d % &two).is_zero() {
        d >>= 1;
        s += 1;
    }
    'witness: for b in BASES {
        let mut x = BigUint::from(b).modpow(&d, n);
        if x == one || x == n_minus_1 {
            continue;
        }
        for _ in 1..s {
            x = x.modpow(&two, n);
            if x == n_minus_1 {
                continue 'witness;
            }
        }
        return false;
    }
    true
}

/// One Shamir share: the polynomial evaluated at a nonzero `x`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SharePoint {
    pub x: FieldElement,
    pub y: FieldElement,
}

impl SharePoint {
    pub fn new(x: FieldElement, y: FieldElement) -> Result<Self, ShamirError> {
        if x.field() != y.field() {
            return Err(ShamirError::FieldMismatch);
        }
        if x.is_zero() {
            return Err(ShamirError::ZeroX);
        }
        Ok(SharePoint { x, y })
    }

    /// `x ‖ y`, each in the field's fixed width.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.x.to_bytes_be();
        out.extend_from_slice(&self.y.to_bytes_be());
        out
    }

    pub fn from_bytes(field: &Field, bytes: &[u8]) -> Result<Self, ShamirError> {
        let w = field.byte_len();
        if bytes.len() != 2 * w {
            return Err(ShamirError::NonCanonical);
        }
        let x = field.from_bytes_be(&bytes[..w])?;
        let y = field.from_bytes_be(&bytes[w..])?;
        SharePoint::new(x, y)
    }
}

/// Threshold `k` out of `xs.len()` shares at fixed x-coordinates.
#[derive(Clone, Debug)]
pub struct SharePolicy {
    k: usize,
    xs: Vec<FieldElement>,
}

impl SharePolicy {
    pub fn new(k: usize, xs: Vec<FieldElement>) -> Result<Self, ShamirError> {
        if k == 0 || k > xs.len() {
            return Err(ShamirError::InvalidPolicy(format!(
                "threshold {k} outside 1..={}",
                xs.len()
            )));
        }
        if xs.iter().any(FieldElement::is_zero) {
            return Err(ShamirError::InvalidPolicy("zero x-coordinate".into()));
        }
        check_distinct(xs.iter()).map_err(|_| {
            ShamirError::InvalidPolicy("duplicate x-coordinate".into())
        })?;
        Ok(SharePolicy { k, xs })
    }

    /// `k`-of-`n` at x = 1..=n.
    pub fn sequential(field: &Field, k: usize, n: usize) -> Result<Self, ShamirError> {
        Self::new(k, (1..=n as u64).map(|i| field.element(i)).collect())
    }

    pub fn threshold(&self) -> usize {
        self.k
    }

    pub fn share_count(&self) -> usize {
        self.xs.len()
    }

    pub fn xs(&self) -> &[FieldElement] {
        &self.xs
    }
}

fn check_distinct<'a>(xs: impl Iterator<Item = &'a FieldElement>) -> Result<(), ShamirError> {
    let mut seen = std::collections::HashSet::new();
    for x in xs {
        if !seen.insert(x.value().clone()) {
            return Err(ShamirError::DuplicateX);
        }
    }
    Ok(())
}

fn eval_poly(coeffs: &[FieldElement], x: &FieldElement) -> FieldElement {
    coeffs
        .iter()
        .rev()
        .fold(x.field().zero(), |acc, c| &(&acc * x) + c)
}

/// Splits `secret` on a random degree `k-1` polynomial.
pub fn split_secret<R: RngCore + CryptoRng + ?Sized>(
    secret: &FieldElement,
    policy: &SharePolicy,
    rng: &mut R,
) -> Result<Vec<SharePoint>, ShamirError> {
    let field = secret.field();
    let coeffs: Vec<_> = (1..policy.k).map(|_| field.random(rng)).collect();
    split_with_coefficients(secret, &coeffs, policy)
}

/// Splits with caller-chosen higher coefficients `a1..a(k-1)`.
pub fn split_with_coefficients(
    secret: &FieldElement,
    coefficients: &[FieldElement],
    policy: &SharePolicy,
) -> Result<Vec<SharePoint>, ShamirError> {
    if coefficients.len() + 1 != policy.k {
        return Err(ShamirError::InvalidPolicy(format!(
            "threshold {} needs {} coefficients, got {}",
            policy.k,
            policy.k - 1,
            coefficients.len()
        )));
    }
    let field = secret.field();
    if policy.xs.iter().chain(coefficients).any(|e| e.field() != field) {
        return Err(ShamirError::FieldMismatch);
    }
    let mut poly = Vec::with_capacity(policy.k);
    poly.push(secret.clone());
    poly.extend_from_slice(coefficients);
    Ok(policy
        .xs
        .iter()
        .map(|x| SharePoint {
            x: x.clone(),
            y: eval_poly(&poly, x),
        })
        .collect())
}

/// Value at `x` of the unique polynomial through `points`.
pub fn interpolate_at(points: &[SharePoint], x: &FieldElement) -> Result<FieldElement, ShamirError> {
    if points.is_empty() {
        return Err(ShamirError::TooFewShares { needed: 1, got: 0 });
    }
    check_distinct(points.iter().map(|p| &p.x))?;
    let field = x.field();
    let mut acc = field.zero();
    for (i, pi) in points.iter().enumerate() {
        let mut num = field.one();
        let mut den = field.one();
        for (j, pj) in points.iter().enumerate() {
            if i != j {
                num = num * (x - &pj.x);
                den = den * (&pi.x - &pj.x);
            }
        }
        let basis = num * den.inverse().expect("distinct x gives nonzero denominator");
        acc = acc + &pi.y * &basis;
    }
    Ok(acc)
}

/// Sorts by x ascending and keeps the first `k`.
fn select_shares(shares: &[SharePoint], k: usize) -> Result<Vec<SharePoint>, ShamirError> {
    if k == 0 || shares.len() < k {
        return Err(ShamirError::TooFewShares {
            needed: k.max(1),
            got: shares.len(),
        });
    }
    check_distinct(shares.iter().map(|p| &p.x))?;
    let mut sorted = shares.to_vec();
    sorted.sort_by(|a, b| a.x.value().cmp(b.x.value()));
    sorted.truncate(k);
    Ok(sorted)
}

/// Recovers `P(0)` from the first `k` shares by x.
pub fn reconstruct_secret(shares: &[SharePoint], k: usize) -> Result<FieldElement, ShamirError> {
    let chosen = select_shares(shares, k)?;
    interpolate_at(&chosen, &chosen[0].x.field().zero())
}

/// Issues a new share at `new_x` on the polynomial the existing shares lie on.
pub fn derive_share_at(
    shares: &[SharePoint],
    k: usize,
    new_x: &FieldElement,
) -> Result<SharePoint, ShamirError> {
    if new_x.is_zero() {
        return Err(ShamirError::ZeroX);
    }
    if shares.iter().any(|s| s.x == *new_x) {
        return Err(ShamirError::XCollision);
    }
    let chosen = select_shares(shares, k)?;
    Ok(SharePoint {
        x: new_x.clone(),
        y: interpolate_at(&chosen, new_x)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn pt(f: &Field, x: u64, y: u64) -> SharePoint {
        SharePoint::new(f.element(x), f.element(y)).unwrap()
    }

    /// Direct polynomial evaluation with machine integers.
    fn naive_eval(coeffs: &[u64], x: u64, p: u64) -> u64 {
        coeffs.iter().enumerate().fold(0, |acc, (i, c)| {
            (acc + c * x.pow(i as u32)) % p
        })
    }

    /// Brute force: the degree-1 line mod p through two points, found by
    /// trying every (a0, a1).
    fn brute_line(p: u64, pts: &[(u64, u64)]) -> (u64, u64) {
        for a0 in 0..p {
            for a1 in 0..p {
                if pts.iter().all(|&(x, y)| naive_eval(&[a0, a1], x, p) == y) {
                    return (a0, a1);
                }
            }
        }
        unreachable!()
    }

    #[test]
    fn forced_coefficient_vector_mod_17() {
        let f = Field::small(17).unwrap();
        let policy = SharePolicy::sequential(&f, 2, 3).unwrap();
        let shares = split_with_coefficients(&f.element(5u32), &[f.element(3u32)], &policy).unwrap();
        let expected: Vec<_> = (1..=3).map(|x| (x, naive_eval(&[5, 3], x, 17))).collect();
        assert_eq!(expected, vec![(1, 8), (2, 11), (3, 14)]);
        for (s, (x, y)) in shares.iter().zip(expected) {
            assert_eq!(*s, pt(&f, x, y));
        }
    }

    #[test]
    fn threshold_one_is_constant() {
        let f = Field::small(17).unwrap();
        let policy = SharePolicy::sequential(&f, 1, 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let shares = split_secret(&f.element(9u32), &policy, &mut rng).unwrap();
        assert!(shares.iter().all(|s| s.y == f.element(9u32)));
    }

    #[test]
    fn zero_secret_shares_lie_on_line_through_origin() {
        let f = Field::small(101).unwrap();
        let policy = SharePolicy::sequential(&f, 2, 3).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let shares = split_secret(&f.zero(), &policy, &mut rng).unwrap();
        let slope = &shares[0].y * &shares[0].x.inverse().unwrap();
        for s in &shares {
            assert_eq!(s.y, &slope * &s.x);
        }
    }

    #[test]
    fn reconstruct_matches_brute_force_line() {
        let f = Field::small(17).unwrap();
        let (a0, _) = brute_line(17, &[(1, 8), (3, 14)]);
        assert_eq!(a0, 5);
        let got = reconstruct_secret(&[pt(&f, 1, 8), pt(&f, 3, 14)], 2).unwrap();
        assert_eq!(got, f.element(a0));
        let got = reconstruct_secret(&[pt(&f, 2, 11), pt(&f, 1, 8)], 2).unwrap();
        assert_eq!(got, f.element(5u32));
    }

    #[test]
    fn reconstruct_constant() {
        let f = Field::small(101).unwrap();
        assert_eq!(reconstruct_secret(&[pt(&f, 7, 42)], 1).unwrap(), f.element(42u32));
    }

    #[test]
    fn interpolate_square() {
        let f = Field::small(101).unwrap();
        let pts = [pt(&f, 1, 1), pt(&f, 2, 4), pt(&f, 3, 9)];
        assert_eq!(interpolate_at(&pts, &f.zero()).unwrap(), f.zero());
        assert_eq!(interpolate_at(&pts, &f.element(4u32)).unwrap(), f.element(16u32));
        assert_eq!(
            interpolate_at(&[pt(&f, 5, 33)], &f.element(88u32)).unwrap(),
            f.element(33u32)
        );
    }

    #[test]
    fn derive_share_vectors() {
        let f = Field::small(17).unwrap();
        let base = [pt(&f, 1, 8), pt(&f, 2, 11)];
        assert_eq!(derive_share_at(&base, 2, &f.element(3u32)).unwrap(), pt(&f, 3, naive_eval(&[5, 3], 3, 17)));
        let four = derive_share_at(&base, 2, &f.element(4u32)).unwrap();
        assert_eq!(four, pt(&f, 4, naive_eval(&[5, 3], 4, 17)));
        assert_eq!(four.y, f.zero());
        assert_eq!(reconstruct_secret(&[pt(&f, 1, 8), four], 2).unwrap(), f.element(5u32));
    }

    #[test]
    fn error_paths() {
        let f = Field::small(17).unwrap();
        assert!(matches!(
            SharePolicy::new(4, vec![f.element(1u32), f.element(2u32), f.element(3u32)]),
            Err(ShamirError::InvalidPolicy(_))
        ));
        assert!(matches!(
            SharePolicy::new(2, vec![f.element(1u32), f.element(1u32)]),
            Err(ShamirError::InvalidPolicy(_))
        ));
        assert!(matches!(
            SharePolicy::new(1, vec![f.element(0u32)]),
            Err(ShamirError::InvalidPolicy(_))
        ));
        assert!(matches!(
            SharePolicy::new(1, vec![f.element(17u32)]),
            Err(ShamirError::InvalidPolicy(_))
        ));
        assert_eq!(
            reconstruct_secret(&[pt(&f, 1, 8)], 2),
            Err(ShamirError::TooFewShares { needed: 2, got: 1 })
        );
        assert_eq!(
            reconstruct_secret(&[pt(&f, 1, 8), pt(&f, 1, 9)], 2),
            Err(ShamirError::DuplicateX)
        );
        assert_eq!(
            derive_share_at(&[pt(&f, 1, 8), pt(&f, 2, 11)], 2, &f.element(2u32)),
            Err(ShamirError::XCollision)
        );
        assert_eq!(SharePoint::new(f.zero(), f.one()), Err(ShamirError::ZeroX));
        assert!(Field::small(15).is_err());
        assert!(Field::small(1).is_err());
    }

    #[test]
    fn production_order_is_prime() {
        let f = Field::secp256k1_order();
        assert!(is_probable_prime(f.modulus()));
        assert_eq!(f.byte_len(), 32);
    }

    #[test]
    fn primality_matches_trial_division() {
        for n in 0u64..2000 {
            let trial = n >= 2 && (2..n).take_while(|d| d * d <= n).all(|d| n % d != 0);
            assert_eq!(is_probable_prime(&BigUint::from(n)), trial, "n = {n}");
        }
    }

    #[test]
    fn inverse_times_self_is_one() {
        let f = Field::small(257).unwrap();
        for v in 1u32..257 {
            let e = f.element(v);
            assert_eq!(&e * &e.inverse().unwrap(), f.one());
        }
        assert!(f.zero().inverse().is_none());
    }
}
