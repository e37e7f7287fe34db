//! Error classes shared by the wire protocol and the CLI.
//!
//! Every module error maps onto exactly one class; a class is what crosses
//! process boundaries (as a wire status byte) and what the CLI reports.

use std::fmt;

use crate::auth::AuthError;
use crate::curve::CryptoError;
use crate::field::ShamirError;
use crate::hd::HdError;
use crate::kms::KmsError;
use crate::network::NetworkError;
use crate::storage::StorageError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum ErrorClass {
    BadSignature = 1,
    Expired = 2,
    AudienceMismatch = 3,
    NotFound = 4,
    EpochMismatch = 5,
    AlreadyAssigned = 6,
    AlreadyEnrolled = 7,
    InsufficientNodes = 8,
    InsufficientStorages = 9,
    Unavailable = 10,
    Unprovisioned = 11,
    AuthFailure = 12,
    Malformed = 13,
    BadIndex = 14,
    InvalidArgument = 15,
    Unsupported = 16,
    Internal = 17,
}

impl ErrorClass {
    pub const ALL: [ErrorClass; 17] = [
        ErrorClass::BadSignature,
        ErrorClass::Expired,
        ErrorClass::AudienceMismatch,
        ErrorClass::NotFound,
        ErrorClass::EpochMismatch,
        ErrorClass::AlreadyAssigned,
        ErrorClass::AlreadyEnrolled,
        ErrorClass::InsufficientNodes,
        ErrorClass::InsufficientStorages,
        ErrorClass::Unavailable,
        ErrorClass::Unprovisioned,
        ErrorClass::AuthFailure,
        ErrorClass::Malformed,
        ErrorClass::BadIndex,
        ErrorClass::InvalidArgument,
        ErrorClass::Unsupported,
        ErrorClass::Internal,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<ErrorClass> {
        ErrorClass::ALL.iter().copied().find(|c| c.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            ErrorClass::BadSignature => "BAD_SIGNATURE",
            ErrorClass::Expired => "EXPIRED",
            ErrorClass::AudienceMismatch => "AUDIENCE_MISMATCH",
            ErrorClass::NotFound => "NOT_FOUND",
            ErrorClass::EpochMismatch => "EPOCH_MISMATCH",
            ErrorClass::AlreadyAssigned => "ALREADY_ASSIGNED",
            ErrorClass::AlreadyEnrolled => "ALREADY_ENROLLED",
            ErrorClass::InsufficientNodes => "INSUFFICIENT_NODES",
            ErrorClass::InsufficientStorages => "INSUFFICIENT_STORAGES",
            ErrorClass::Unavailable => "UNAVAILABLE",
            ErrorClass::Unprovisioned => "UNPROVISIONED",
            ErrorClass::AuthFailure => "AUTH_FAILURE",
            ErrorClass::Malformed => "MALFORMED",
            ErrorClass::BadIndex => "BAD_INDEX",
            ErrorClass::InvalidArgument => "INVALID_ARGUMENT",
            ErrorClass::Unsupported => "UNSUPPORTED",
            ErrorClass::Internal => "INTERNAL",
        }
    }

    /// CLI exit status: 3 auth, 4 threshold/unavailable, 5 integrity,
    /// 2 bad input, 1 anything else.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::BadSignature | ErrorClass::Expired | ErrorClass::AudienceMismatch => 3,
            ErrorClass::InsufficientNodes
            | ErrorClass::InsufficientStorages
            | ErrorClass::Unavailable
            | ErrorClass::Unprovisioned => 4,
            ErrorClass::AuthFailure | ErrorClass::EpochMismatch | ErrorClass::Malformed => 5,
            ErrorClass::BadIndex | ErrorClass::InvalidArgument | ErrorClass::Unsupported => 2,
            ErrorClass::NotFound
            | ErrorClass::AlreadyAssigned
            | ErrorClass::AlreadyEnrolled
            | ErrorClass::Internal => 1,
        }
    }
}

impl fmt::Display for ErrorClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub trait Classify {
    fn class(&self) -> ErrorClass;
}

impl Classify for AuthError {
    fn class(&self) -> ErrorClass {
        match self {
            AuthError::BadSignature => ErrorClass::BadSignature,
            AuthError::Expired => ErrorClass::Expired,
            AuthError::AudienceMismatch => ErrorClass::AudienceMismatch,
        }
    }
}

impl Classify for CryptoError {
    fn class(&self) -> ErrorClass {
        match self {
            CryptoError::AuthFailure => ErrorClass::AuthFailure,
            CryptoError::Malformed(_) => ErrorClass::Malformed,
            CryptoError::Entropy => ErrorClass::Internal,
            CryptoError::InvalidScalar | CryptoError::BadLength { .. } => ErrorClass::InvalidArgument,
        }
    }
}

impl Classify for ShamirError {
    fn class(&self) -> ErrorClass {
        match self {
            ShamirError::NonCanonical => ErrorClass::Malformed,
            _ => ErrorClass::InvalidArgument,
        }
    }
}

impl Classify for HdError {
    fn class(&self) -> ErrorClass {
        match self {
            HdError::InvalidChild => ErrorClass::Internal,
            _ => ErrorClass::InvalidArgument,
        }
    }
}

impl Classify for NetworkError {
    fn class(&self) -> ErrorClass {
        match self {
            NetworkError::Auth(e) => e.class(),
            NetworkError::InvalidConfig(_) => ErrorClass::InvalidArgument,
            NetworkError::InsufficientNodes { .. } => ErrorClass::InsufficientNodes,
            NetworkError::AlreadyAssigned => ErrorClass::AlreadyAssigned,
            NetworkError::NotFound => ErrorClass::NotFound,
            NetworkError::BadIndex(_) => ErrorClass::BadIndex,
            NetworkError::Unavailable(_) => ErrorClass::Unavailable,
            NetworkError::Crypto(e) => e.class(),
            NetworkError::Shamir(e) => e.class(),
            NetworkError::Malformed(_) => ErrorClass::Malformed,
        }
    }
}

impl Classify for StorageError {
    fn class(&self) -> ErrorClass {
        match self {
            StorageError::Auth(e) => e.class(),
            StorageError::NotFound => ErrorClass::NotFound,
            StorageError::EpochMismatch { .. } => ErrorClass::EpochMismatch,
            StorageError::Unprovisioned => ErrorClass::Unprovisioned,
            StorageError::Unavailable(_) => ErrorClass::Unavailable,
            StorageError::Crypto(e) => e.class(),
            StorageError::Io(_) => ErrorClass::Internal,
            StorageError::Corrupt(_) => ErrorClass::Malformed,
        }
    }
}

impl Classify for KmsError {
    fn class(&self) -> ErrorClass {
        match self {
            KmsError::AlreadyEnrolled => ErrorClass::AlreadyEnrolled,
            KmsError::Unprovisioned(_) => ErrorClass::Unprovisioned,
            KmsError::InsufficientStorages(_) => ErrorClass::InsufficientStorages,
            KmsError::Inconsistent(_) => ErrorClass::Malformed,
            KmsError::Network(e) => e.class(),
            KmsError::Storage(e) => e.class(),
            KmsError::Crypto(e) => e.class(),
            KmsError::Shamir(e) => e.class(),
            KmsError::Hd(e) => e.class(),
        }
    }
}

/// Rebuilds a network error from its wire class.
pub fn network_error_from(class: ErrorClass, detail: &str) -> NetworkError {
    match class {
        ErrorClass::BadSignature => AuthError::BadSignature.into(),
        ErrorClass::Expired => AuthError::Expired.into(),
        ErrorClass::AudienceMismatch => AuthError::AudienceMismatch.into(),
        ErrorClass::NotFound => NetworkError::NotFound,
        ErrorClass::AlreadyAssigned => NetworkError::AlreadyAssigned,
        ErrorClass::AuthFailure => CryptoError::AuthFailure.into(),
        ErrorClass::Unavailable => NetworkError::Unavailable(detail.to_string()),
        ErrorClass::BadIndex => NetworkError::BadIndex(0),
        ErrorClass::InvalidArgument => NetworkError::InvalidConfig(detail.to_string()),
        ErrorClass::InsufficientNodes => NetworkError::InsufficientNodes { needed: 0, available: 0 },
        _ => NetworkError::Malformed(format!("{class}: {detail}")),
    }
}

/// Rebuilds a storage error from its wire class.
pub fn storage_error_from(class: ErrorClass, detail: &str) -> StorageError {
    match class {
        ErrorClass::BadSignature => AuthError::BadSignature.into(),
        ErrorClass::Expired => AuthError::Expired.into(),
        ErrorClass::AudienceMismatch => AuthError::AudienceMismatch.into(),
        ErrorClass::NotFound => StorageError::NotFound,
        ErrorClass::EpochMismatch => {
            let mut nums = detail.split(',').filter_map(|n| n.trim().parse().ok());
            StorageError::EpochMismatch {
                record: nums.next().unwrap_or(0),
                current: nums.next().unwrap_or(0),
            }
        }
        ErrorClass::Unprovisioned => StorageError::Unprovisioned,
        ErrorClass::Unavailable => StorageError::Unavailable(detail.to_string()),
        ErrorClass::AuthFailure => CryptoError::AuthFailure.into(),
        ErrorClass::Internal => StorageError::Io(detail.to_string()),
        _ => StorageError::Corrupt(format!("{class}: {detail}")),
    }
}
