//! Key management flows over the three storages.
//!
//! The wallet scalar is split 2-of-3 at x = 1 (network), 2 (server) and
//! 3 (device). Each key share is sealed under an ephemeral keypair (Ekp) whose
//! scalar is itself split 2-of-3 at the same x-coordinates; the network's key
//! share is additionally sealed under the identity's postbox key first, so
//! that reading it needs `t` nodes twice over. Storage payloads:
//!
//! ```text
//! network blob : "KSNB" ‖ version ‖ wallet pubkey (33) ‖ u32 len ‖ outer box ‖ ekp share
//! server/device: PrivkeyShard = sealed key share, EkpShard = ekp share
//! ekp share    : generation (u64 BE) ‖ x (32) ‖ y (32)
//! ```
//!
//! Any two storages reconstruct the key; no single one can. Flows that rewrite
//! storages do so network, server, device in order and restore the earlier
//! writes if a later one fails.

use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use hkdf::Hkdf;
use k256::PublicKey;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;
use zeroize::Zeroizing;

use crate::auth::{IdToken, Identity};
use crate::curve::{self, CryptoError, EncKeypair, SealedBox, Signature, POINT_LEN};
use crate::error::{Classify, ErrorClass};
use crate::field::{self, Field, FieldElement, ShamirError, SharePoint, SharePolicy};
use crate::hd::{self, DerivationPath, ExtendedKey, HdError};
use crate::meter::Meter;
use crate::network::{NetworkClient, NetworkError};
use crate::storage::{DeviceStore, ServerApi, Slot, StorageError};

pub const NETWORK_X: u32 = 1;
pub const SERVER_X: u32 = 2;
pub const DEVICE_X: u32 = 3;

const BLOB_MAGIC: &[u8; 4] = b"KSNB";
const BLOB_VERSION: u8 = 1;
const EKP_SHARE_LEN: usize = 8 + 64;
const NETWORK_ENTROPY_TAG: &[u8] = b"keyshard/network-entropy/v1";
const DEVICE_ENTROPY_INFO: &[u8] = b"keyshard/device-entropy/v1";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KmsError {
    #[error("identity is already enrolled")]
    AlreadyEnrolled,
    #[error("device {0:?} is not provisioned")]
    Unprovisioned(String),
    #[error("not enough storages reachable: {0}")]
    InsufficientStorages(String),
    #[error("storages disagree: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Storage(#[from] StorageError),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Shamir(#[from] ShamirError),
    #[error(transparent)]
    Hd(#[from] HdError),
}

impl KmsError {
    fn is_availability(&self) -> bool {
        matches!(
            self.class(),
            ErrorClass::InsufficientNodes
                | ErrorClass::Unavailable
                | ErrorClass::Unprovisioned
                | ErrorClass::InsufficientStorages
        )
    }

    /// Reclassifies an availability failure of one storage as a shortage of
    /// storages; everything else passes through.
    fn short(self, storage: &str) -> KmsError {
        if self.is_availability() {
            KmsError::InsufficientStorages(format!("{storage}: {self}"))
        } else {
            self
        }
    }
}

/// Per-client flow state. Holds no key material.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Session {
    pub device_id: String,
    pub meter: Meter,
}

impl Session {
    pub fn new(device_id: impl Into<String>) -> Self {
        Session {
            device_id: device_id.into(),
            meter: Meter::default(),
        }
    }

    /// Returns the counters accumulated so far and resets them.
    pub fn take_meter(&mut self) -> Meter {
        std::mem::take(&mut self.meter)
    }
}

/// The reconstructed wallet key. The scalar bytes are wiped on drop.
pub struct KeyHandle {
    scalar: Zeroizing<[u8; 32]>,
    public: PublicKey,
}

impl fmt::Debug for KeyHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyHandle")
            .field("public", &hex::encode(self.public_bytes()))
            .finish_non_exhaustive()
    }
}

impl KeyHandle {
    fn new(scalar: &FieldElement) -> Result<Self, KmsError> {
        let public = curve::public_from_scalar(scalar)?;
        let mut bytes = Zeroizing::new([0u8; 32]);
        bytes.copy_from_slice(&Zeroizing::new(scalar.to_bytes_be()));
        Ok(KeyHandle { scalar: bytes, public })
    }

    fn field_scalar(&self) -> FieldElement {
        Field::secp256k1_order()
            .from_bytes_be(&self.scalar[..])
            .expect("stored scalar is canonical")
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.public
    }

    pub fn public_bytes(&self) -> [u8; POINT_LEN] {
        curve::point_to_bytes(&self.public)
    }

    pub fn sign(&self, digest: &[u8]) -> Result<Signature, KmsError> {
        Ok(curve::sign_digest(digest, &self.field_scalar())?)
    }

    /// The 24-word BIP-39 encoding of the scalar.
    pub fn seed_phrase(&self) -> Result<Zeroizing<String>, KmsError> {
        Ok(Zeroizing::new(hd::entropy_to_mnemonic(&self.scalar[..])?))
    }

    /// BIP-32 key at `path` under the seed of [`Self::seed_phrase`] with an
    /// empty passphrase.
    pub fn derive(&self, path: &DerivationPath) -> Result<ExtendedKey, KmsError> {
        let words = self.seed_phrase()?;
        let seed = hd::mnemonic_to_seed(&words, "")?;
        Ok(ExtendedKey::master(&seed[..])?.derive_path(path)?)
    }
}

/// Every share held by the three storages, opened. Only for audits and
/// compromise drills; the values are secret.
#[derive(Clone, Debug)]
pub struct VaultAudit {
    pub public: PublicKey,
    pub generation: u64,
    /// Network, server, device.
    pub key_shares: [SharePoint; 3],
    pub ekp_shares: [SharePoint; 3],
}

#[derive(Clone, Debug)]
struct EkpShare {
    generation: u64,
    share: SharePoint,
}

impl EkpShare {
    fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.generation.to_be_bytes().to_vec();
        out.extend_from_slice(&self.share.to_bytes());
        out
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self, KmsError> {
        if bytes.len() != EKP_SHARE_LEN {
            return Err(KmsError::Inconsistent("ekp share length".into()));
        }
        Ok(EkpShare {
            generation: u64::from_be_bytes(bytes[..8].try_into().unwrap()),
            share: SharePoint::from_bytes(&Field::secp256k1_order(), &bytes[8..])?,
        })
    }
}

/// One storage's contribution: a sealed key share and an Ekp share.
#[derive(Clone, Debug)]
struct Piece {
    x: u32,
    sealed: SealedBox,
    ekp: EkpShare,
}

struct NetworkBlob {
    public: PublicKey,
    outer: SealedBox,
    ekp: EkpShare,
}

impl NetworkBlob {
    fn to_bytes(&self) -> Vec<u8> {
        let outer = self.outer.to_bytes();
        let mut out = BLOB_MAGIC.to_vec();
        out.push(BLOB_VERSION);
        out.extend_from_slice(&curve::point_to_bytes(&self.public));
        out.extend_from_slice(&(outer.len() as u32).to_be_bytes());
        out.extend_from_slice(&outer);
        out.extend_from_slice(&self.ekp.to_bytes());
        out
    }

    fn from_bytes(bytes: &[u8]) -> Result<Self, KmsError> {
        let bad = |what: &str| KmsError::Inconsistent(format!("network blob {what}"));
        let head = 4 + 1 + POINT_LEN + 4;
        if bytes.len() < head || &bytes[..4] != BLOB_MAGIC {
            return Err(bad("header"));
        }
        if bytes[4] != BLOB_VERSION {
            return Err(bad("version"));
        }
        let public = curve::point_from_bytes(&bytes[5..5 + POINT_LEN])?;
        let n = u32::from_be_bytes(bytes[head - 4..head].try_into().unwrap()) as usize;
        if bytes.len() != head + n + EKP_SHARE_LEN {
            return Err(bad("length"));
        }
        Ok(NetworkBlob {
            public,
            outer: SealedBox::from_bytes(&bytes[head..head + n])?,
            ekp: EkpShare::from_bytes(&bytes[head + n..])?,
        })
    }
}

type Records = Vec<(Slot, Vec<u8>)>;

/// What the storages held before a rewrite, for rollback.
#[derive(Default)]
struct Prior {
    network: Option<Vec<u8>>,
    server: Option<Records>,
    device: Option<Records>,
}

fn x_of(x: u32) -> FieldElement {
    Field::secp256k1_order().element(x)
}

fn storage_policy() -> SharePolicy {
    SharePolicy::new(2, vec![x_of(NETWORK_X), x_of(SERVER_X), x_of(DEVICE_X)]).expect("fixed policy is valid")
}

fn device_error(device_id: &str, e: StorageError) -> KmsError {
    match e {
        StorageError::Unprovisioned | StorageError::NotFound => KmsError::Unprovisioned(device_id.to_string()),
        e => e.into(),
    }
}

fn check_x(share: &SharePoint, x: u32, what: &str) -> Result<(), KmsError> {
    if share.x != x_of(x) {
        return Err(KmsError::Inconsistent(format!("{what} share has the wrong x-coordinate")));
    }
    Ok(())
}

fn open_key_share(sealed: &SealedBox, ekp: &EncKeypair) -> Result<SharePoint, KmsError> {
    let bytes = Zeroizing::new(ekp.open(sealed)?);
    Ok(SharePoint::from_bytes(&Field::secp256k1_order(), &bytes)?)
}

/// Shares from three storages must lie on one line.
fn check_collinear(shares: &[SharePoint; 3], what: &str) -> Result<(), KmsError> {
    let predicted = field::interpolate_at(&shares[..2], &shares[2].x)?;
    if predicted != shares[2].y {
        return Err(KmsError::Inconsistent(format!("{what} shares are not on one polynomial")));
    }
    Ok(())
}

/// Orchestrates the flows against a node network, a server store and a
/// directory of device stores.
pub struct Kms {
    network: NetworkClient,
    server: Arc<dyn ServerApi>,
    device_dir: PathBuf,
    locks: Mutex<HashMap<Identity, Arc<Mutex<()>>>>,
}

impl fmt::Debug for Kms {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kms")
            .field("network", &self.network)
            .field("device_dir", &self.device_dir)
            .finish_non_exhaustive()
    }
}

impl Kms {
    pub fn new(network: NetworkClient, server: Arc<dyn ServerApi>, device_dir: impl Into<PathBuf>) -> Self {
        Kms {
            network,
            server,
            device_dir: device_dir.into(),
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn device(&self, device_id: &str) -> DeviceStore {
        DeviceStore::new(self.device_dir.clone(), device_id)
    }

    /// Flows for one identity run one at a time.
    fn identity_lock(&self, token: &IdToken) -> Arc<Mutex<()>> {
        let mut map = self.locks.lock().unwrap_or_else(|e| e.into_inner());
        map.entry(token.identity()).or_default().clone()
    }

    /// Creates a wallet key for the token's identity and provisions the
    /// session's device. Returns the wallet public key.
    pub fn signup<R: RngCore + CryptoRng + ?Sized>(
        &self,
        session: &mut Session,
        token: &IdToken,
        rng: &mut R,
    ) -> Result<PublicKey, KmsError> {
        let cell = self.identity_lock(token);
        let _guard = cell.lock().unwrap_or_else(|e| e.into_inner());
        let meter = &mut session.meter;

        match self.server.get(token, Slot::EkpShard, meter) {
            Ok(_) => return Err(KmsError::AlreadyEnrolled),
            Err(StorageError::NotFound) => {}
            Err(e) => return Err(e.into()),
        }

        let assigned = match self.network.assign_postbox(token, meter) {
            Ok(pk) => Some(pk),
            // An earlier signup got this far and then failed; resume with
            // the existing postbox.
            Err(NetworkError::AlreadyAssigned) => None,
            Err(e) => return Err(e.into()),
        };
        let postbox = self.network.fetch_postbox_key(token, meter)?;
        if assigned.is_some_and(|pk| pk != *postbox.public()) {
            return Err(KmsError::Inconsistent("postbox key does not match the dealt key".into()));
        }

        let e_network: Zeroizing<[u8; 32]> = {
            let mut h = Sha256::new();
            h.update(NETWORK_ENTROPY_TAG);
            h.update(Zeroizing::new(postbox.scalar().to_bytes_be()));
            Zeroizing::new(h.finalize().into())
        };
        let e_server = Zeroizing::new(self.server.entropy(token, meter)?);
        let e_device = {
            let mut ikm = Zeroizing::new([0u8; 32]);
            rng.fill_bytes(&mut ikm[..]);
            let mut out = Zeroizing::new([0u8; 32]);
            Hkdf::<Sha256>::new(Some(session.device_id.as_bytes()), &ikm[..])
                .expand(DEVICE_ENTROPY_INFO, &mut out[..])
                .expect("32 bytes is a valid hkdf length");
            out
        };
        let master = curve::combine_entropy(&e_network[..], &e_server[..], &e_device[..])?;
        let public = curve::public_from_scalar(&master)?;
        let shares = field::split_secret(&master, &storage_policy(), rng)?;

        self.write_vault(token, &session.device_id, &public, &shares, postbox.public(), 1, &Prior::default(), rng, meter)?;
        Ok(public)
    }

    /// Reconstructs the key from the server and the session's device. The
    /// network is not contacted.
    pub fn signin(&self, session: &mut Session, token: &IdToken) -> Result<KeyHandle, KmsError> {
        let server = self.load_server(token, &mut session.meter)?;
        let device = self.load_device(&session.device_id)?;
        let ekp = self.ekp_from(&[&server.ekp, &device.ekp])?;
        let s_server = open_key_share(&server.sealed, &ekp)?;
        let s_device = open_key_share(&device.sealed, &ekp)?;
        check_x(&s_server, SERVER_X, "server")?;
        check_x(&s_device, DEVICE_X, "device")?;
        self.key_from(&[s_server, s_device])
    }

    pub fn sign_transaction(&self, session: &mut Session, token: &IdToken, digest: &[u8]) -> Result<Signature, KmsError> {
        self.signin(session, token)?.sign(digest)
    }

    /// Replaces the Ekp and re-seals the unchanged key shares in all three
    /// storages. Returns the new Ekp generation.
    pub fn rotate_ekp<R: RngCore + CryptoRng + ?Sized>(
        &self,
        session: &mut Session,
        token: &IdToken,
        rng: &mut R,
    ) -> Result<u64, KmsError> {
        let cell = self.identity_lock(token);
        let _guard = cell.lock().unwrap_or_else(|e| e.into_inner());
        self.rotate_locked(session, token, rng)
    }

    fn rotate_locked<R: RngCore + CryptoRng + ?Sized>(
        &self,
        session: &mut Session,
        token: &IdToken,
        rng: &mut R,
    ) -> Result<u64, KmsError> {
        let meter = &mut session.meter;
        let postbox = self.network.fetch_postbox_key(token, meter).map_err(|e| KmsError::from(e).short("network"))?;
        let (blob_bytes, blob) = self.load_network(token, meter).map_err(|e| e.short("network"))?;
        let (server_prior, server) = self.load_server_raw(token, meter).map_err(|e| e.short("server"))?;
        let (device_prior, device) = self.load_device_raw(&session.device_id).map_err(|e| e.short("device"))?;

        let network = Piece {
            x: NETWORK_X,
            sealed: blob.outer.clone(),
            ekp: blob.ekp.clone(),
        };
        let audit = self.open_all(&blob.public, [&network, &server, &device], &postbox)?;
        let prior = Prior {
            network: Some(blob_bytes),
            server: Some(server_prior),
            device: Some(device_prior),
        };
        let generation = audit.generation + 1;
        self.write_vault(token, &session.device_id, &blob.public, &audit.key_shares, postbox.public(), generation, &prior, rng, meter)?;
        Ok(generation)
    }

    /// Draws a fresh polynomial through the same key and rewrites all three
    /// storages under a new Ekp. Any two readable storages suffice to start;
    /// all three must accept the writes. Returns the new Ekp generation.
    pub fn reshare_key<R: RngCore + CryptoRng + ?Sized>(
        &self,
        session: &mut Session,
        token: &IdToken,
        rng: &mut R,
    ) -> Result<u64, KmsError> {
        let cell = self.identity_lock(token);
        let _guard = cell.lock().unwrap_or_else(|e| e.into_inner());
        let meter = &mut session.meter;

        let postbox = self.network.fetch_postbox_key(token, meter).map_err(|e| KmsError::from(e).short("network"))?;
        let mut prior = Prior::default();
        let mut pieces = Vec::new();
        let mut public = None;
        let mut missing = Vec::new();

        match self.load_network(token, meter) {
            Ok((bytes, blob)) => {
                prior.network = Some(bytes);
                public = Some(blob.public);
                pieces.push(Piece {
                    x: NETWORK_X,
                    sealed: blob.outer,
                    ekp: blob.ekp,
                });
            }
            Err(e) if e.is_availability() || e.class() == ErrorClass::NotFound => missing.push(format!("network: {e}")),
            Err(e) => return Err(e),
        }
        match self.load_server_raw(token, meter) {
            Ok((raw, piece)) => {
                prior.server = Some(raw);
                pieces.push(piece);
            }
            Err(e) if e.is_availability() => missing.push(format!("server: {e}")),
            Err(e) => return Err(e),
        }
        match self.load_device_raw(&session.device_id) {
            Ok((raw, piece)) => {
                prior.device = Some(raw);
                pieces.push(piece);
            }
            Err(e) if e.is_availability() => missing.push(format!("device: {e}")),
            Err(e) => return Err(e),
        }
        if pieces.len() < 2 {
            return Err(KmsError::InsufficientStorages(missing.join("; ")));
        }

        let generation = pieces.iter().map(|p| p.ekp.generation).max().unwrap_or(0) + 1;
        let ekp = self.ekp_from(&[&pieces[0].ekp, &pieces[1].ekp])?;
        let shares = pieces[..2]
            .iter()
            .map(|p| self.open_piece(p, &ekp, &postbox))
            .collect::<Result<Vec<_>, _>>()?;
        let master = field::reconstruct_secret(&shares, 2)?;
        let derived = curve::public_from_scalar(&master)?;
        if public.is_some_and(|pk| pk != derived) {
            return Err(KmsError::Inconsistent("reconstructed key does not match the network record".into()));
        }
        let fresh = field::split_secret(&master, &storage_policy(), rng)?;
        drop(master);
        self.write_vault(token, &session.device_id, &derived, &fresh, postbox.public(), generation, &prior, rng, meter)
            .map_err(|e| e.short("write"))?;
        Ok(generation)
    }

    /// Rebuilds the device share from the network and the server, provisions
    /// `new_device_id`, points the session at it and rotates the Ekp so the
    /// old device's artifacts stop opening anything.
    pub fn recover_device<R: RngCore + CryptoRng + ?Sized>(
        &self,
        session: &mut Session,
        token: &IdToken,
        new_device_id: &str,
        rng: &mut R,
    ) -> Result<PublicKey, KmsError> {
        let cell = self.identity_lock(token);
        let _guard = cell.lock().unwrap_or_else(|e| e.into_inner());
        let meter = &mut session.meter;

        let postbox = self.network.fetch_postbox_key(token, meter).map_err(|e| KmsError::from(e).short("network"))?;
        let (_, blob) = self.load_network(token, meter).map_err(|e| e.short("network"))?;
        let server = self.load_server(token, meter).map_err(|e| e.short("server"))?;
        let network = Piece {
            x: NETWORK_X,
            sealed: blob.outer.clone(),
            ekp: blob.ekp.clone(),
        };
        let ekp = self.ekp_from(&[&network.ekp, &server.ekp])?;
        let s_network = self.open_piece(&network, &ekp, &postbox)?;
        let s_server = self.open_piece(&server, &ekp, &postbox)?;
        let master = field::reconstruct_secret(&[s_network.clone(), s_server.clone()], 2)?;
        if curve::public_from_scalar(&master)? != blob.public {
            return Err(KmsError::Inconsistent("reconstructed key does not match the network record".into()));
        }
        drop(master);

        let s_device = field::derive_share_at(&[s_network, s_server], 2, &x_of(DEVICE_X))?;
        let e_device = field::derive_share_at(&[network.ekp.share.clone(), server.ekp.share.clone()], 2, &x_of(DEVICE_X))?;
        let sealed = curve::seal(&Zeroizing::new(s_device.to_bytes()), ekp.public(), rng)?;
        let ekp_share = EkpShare {
            generation: server.ekp.generation,
            share: e_device,
        };
        self.device(new_device_id)
            .provision(&[(Slot::PrivkeyShard, sealed.to_bytes()), (Slot::EkpShard, ekp_share.to_bytes())])
            .map_err(|e| device_error(new_device_id, e))?;
        session.device_id = new_device_id.to_string();
        self.rotate_locked(session, token, rng)?;
        Ok(blob.public)
    }

    /// Recovers the key from the network and the device alone, without any
    /// server call, and returns it as a 24-word phrase.
    pub fn disaster_recover(&self, session: &mut Session, token: &IdToken) -> Result<Zeroizing<String>, KmsError> {
        let meter = &mut session.meter;
        let postbox = self.network.fetch_postbox_key(token, meter)?;
        let (_, blob) = self.load_network(token, meter)?;
        let device = self.load_device(&session.device_id)?;
        let network = Piece {
            x: NETWORK_X,
            sealed: blob.outer,
            ekp: blob.ekp,
        };
        let ekp = self.ekp_from(&[&network.ekp, &device.ekp])?;
        let shares = [
            self.open_piece(&network, &ekp, &postbox)?,
            self.open_piece(&device, &ekp, &postbox)?,
        ];
        let key = self.key_from(&shares)?;
        if key.public != blob.public {
            return Err(KmsError::Inconsistent("reconstructed key does not match the network record".into()));
        }
        key.seed_phrase()
    }

    /// Signs in and encodes the key as a 24-word phrase.
    pub fn export_seed_phrase(&self, session: &mut Session, token: &IdToken) -> Result<Zeroizing<String>, KmsError> {
        self.signin(session, token)?.seed_phrase()
    }

    pub fn derive_chain_key(
        &self,
        session: &mut Session,
        token: &IdToken,
        path: &DerivationPath,
    ) -> Result<ExtendedKey, KmsError> {
        self.signin(session, token)?.derive(path)
    }

    /// Reads and opens everything in all three storages, checking that the
    /// key shares and Ekp shares are each consistent.
    pub fn audit_vault(&self, session: &mut Session, token: &IdToken) -> Result<VaultAudit, KmsError> {
        let meter = &mut session.meter;
        let postbox = self.network.fetch_postbox_key(token, meter)?;
        let (_, blob) = self.load_network(token, meter)?;
        let server = self.load_server(token, meter)?;
        let device = self.load_device(&session.device_id)?;
        let network = Piece {
            x: NETWORK_X,
            sealed: blob.outer,
            ekp: blob.ekp,
        };
        self.open_all(&blob.public, [&network, &server, &device], &postbox)
    }

    fn open_all(&self, public: &PublicKey, pieces: [&Piece; 3], postbox: &EncKeypair) -> Result<VaultAudit, KmsError> {
        let ekp_shares = pieces.map(|p| p.ekp.share.clone());
        check_collinear(&ekp_shares, "ekp")?;
        let ekp = self.ekp_from(&[&pieces[0].ekp, &pieces[1].ekp])?;
        let key_shares = [
            self.open_piece(pieces[0], &ekp, postbox)?,
            self.open_piece(pieces[1], &ekp, postbox)?,
            self.open_piece(pieces[2], &ekp, postbox)?,
        ];
        check_collinear(&key_shares, "key")?;
        if self.key_from(&key_shares[..2])?.public != *public {
            return Err(KmsError::Inconsistent("key shares do not match the network record".into()));
        }
        Ok(VaultAudit {
            public: *public,
            generation: pieces.iter().map(|p| p.ekp.generation).max().unwrap_or(0),
            key_shares,
            ekp_shares,
        })
    }

    fn ekp_from(&self, shares: &[&EkpShare]) -> Result<EncKeypair, KmsError> {
        let points: Vec<_> = shares.iter().map(|s| s.share.clone()).collect();
        let scalar = field::reconstruct_secret(&points, 2)?;
        Ok(EncKeypair::from_scalar(&scalar)?)
    }

    fn key_from(&self, shares: &[SharePoint]) -> Result<KeyHandle, KmsError> {
        let master = field::reconstruct_secret(shares, 2)?;
        if master.is_zero() {
            return Err(KmsError::Crypto(CryptoError::InvalidScalar));
        }
        KeyHandle::new(&master)
    }

    /// Opens a piece's key share; the network's needs the postbox too.
    fn open_piece(&self, piece: &Piece, ekp: &EncKeypair, postbox: &EncKeypair) -> Result<SharePoint, KmsError> {
        let share = if piece.x == NETWORK_X {
            let inner = Zeroizing::new(ekp.open(&piece.sealed)?);
            open_key_share(&SealedBox::from_bytes(&inner)?, postbox)?
        } else {
            open_key_share(&piece.sealed, ekp)?
        };
        check_x(&share, piece.x, "stored")?;
        check_x(&piece.ekp.share, piece.x, "ekp")?;
        Ok(share)
    }

    fn load_network(&self, token: &IdToken, meter: &mut Meter) -> Result<(Vec<u8>, NetworkBlob), KmsError> {
        let bytes = self.network.retrieve_blob(token, meter)?;
        let blob = NetworkBlob::from_bytes(&bytes)?;
        Ok((bytes, blob))
    }

    fn load_server(&self, token: &IdToken, meter: &mut Meter) -> Result<Piece, KmsError> {
        Ok(self.load_server_raw(token, meter)?.1)
    }

    fn load_server_raw(&self, token: &IdToken, meter: &mut Meter) -> Result<(Records, Piece), KmsError> {
        let ekp = self.server.get(token, Slot::EkpShard, meter)?;
        let sealed = self.server.get(token, Slot::PrivkeyShard, meter)?;
        let piece = Piece {
            x: SERVER_X,
            sealed: SealedBox::from_bytes(&sealed)?,
            ekp: EkpShare::from_bytes(&ekp)?,
        };
        Ok((vec![(Slot::PrivkeyShard, sealed), (Slot::EkpShard, ekp)], piece))
    }

    fn load_device(&self, device_id: &str) -> Result<Piece, KmsError> {
        Ok(self.load_device_raw(device_id)?.1)
    }

    fn load_device_raw(&self, device_id: &str) -> Result<(Records, Piece), KmsError> {
        let store = self.device(device_id);
        let ekp = store.device_get(Slot::EkpShard).map_err(|e| device_error(device_id, e))?;
        let sealed = store.device_get(Slot::PrivkeyShard).map_err(|e| device_error(device_id, e))?;
        let piece = Piece {
            x: DEVICE_X,
            sealed: SealedBox::from_bytes(&sealed)?,
            ekp: EkpShare::from_bytes(&ekp)?,
        };
        Ok((vec![(Slot::PrivkeyShard, sealed), (Slot::EkpShard, ekp)], piece))
    }

    /// Seals `shares` (network, server, device) under a fresh Ekp and writes
    /// them out. Everything is sealed before the first write; a failed write
    /// puts back what `prior` recorded.
    #[allow(clippy::too_many_arguments)]
    fn write_vault<R: RngCore + CryptoRng + ?Sized>(
        &self,
        token: &IdToken,
        device_id: &str,
        public: &PublicKey,
        shares: &[SharePoint],
        postbox: &PublicKey,
        generation: u64,
        prior: &Prior,
        rng: &mut R,
        meter: &mut Meter,
    ) -> Result<(), KmsError> {
        let [s_network, s_server, s_device] = shares else {
            return Err(KmsError::Inconsistent("expected three key shares".into()));
        };
        let ekp = EncKeypair::generate(rng)?;
        let ekp_shares = field::split_secret(&ekp.scalar(), &storage_policy(), rng)?;
        let wrap = |share: &SharePoint, rng: &mut R| curve::seal(&Zeroizing::new(share.to_bytes()), ekp.public(), rng);

        let inner = curve::seal(&Zeroizing::new(s_network.to_bytes()), postbox, rng)?;
        let blob = NetworkBlob {
            public: *public,
            outer: curve::seal(&inner.to_bytes(), ekp.public(), rng)?,
            ekp: EkpShare {
                generation,
                share: ekp_shares[0].clone(),
            },
        }
        .to_bytes();
        let server_records = [
            (Slot::PrivkeyShard, wrap(s_server, rng)?.to_bytes()),
            (
                Slot::EkpShard,
                EkpShare {
                    generation,
                    share: ekp_shares[1].clone(),
                }
                .to_bytes(),
            ),
        ];
        let device_records = [
            (Slot::PrivkeyShard, wrap(s_device, rng)?.to_bytes()),
            (
                Slot::EkpShard,
                EkpShare {
                    generation,
                    share: ekp_shares[2].clone(),
                }
                .to_bytes(),
            ),
        ];
        let device = self.device(device_id);

        self.network.store_blob(token, &blob, rng, meter)?;
        if let Err(e) = self.server.put(token, &server_records, meter) {
            self.undo_network(token, prior, rng, meter);
            return Err(e.into());
        }
        if let Err(e) = device.provision(&device_records) {
            self.undo_network(token, prior, rng, meter);
            let _ = match &prior.server {
                Some(old) => self.server.put(token, old, meter),
                None => self.server.delete(token, meter),
            };
            return Err(device_error(device_id, e));
        }
        Ok(())
    }

    fn undo_network<R: RngCore + CryptoRng + ?Sized>(&self, token: &IdToken, prior: &Prior, rng: &mut R, meter: &mut Meter) {
        // With no earlier blob there is nothing to restore: the new one is
        // unreadable without the server or device Ekp share.
        if let Some(old) = &prior.network {
            let _ = self.network.store_blob(token, old, rng, meter);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::{MockIdp, KMS_AUDIENCE};
    use crate::clock::ManualClock;
    use crate::network::{NetworkConfig, NodeNetwork};
    use crate::storage::ServerStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    struct Fixture {
        kms: Kms,
        net: NodeNetwork,
        server: Arc<ServerStore>,
        idp: MockIdp,
        rng: ChaCha20Rng,
        _dir: tempfile::TempDir,
    }

    fn fixture() -> Fixture {
        let mut rng = ChaCha20Rng::seed_from_u64(77);
        let idp = MockIdp::generate(&mut rng);
        let clock = Arc::new(ManualClock::new(1_000));
        let net = NodeNetwork::init(NetworkConfig::new(5, 3).unwrap(), idp.verifier(), clock.clone(), &mut rng).unwrap();
        let server = Arc::new(ServerStore::in_memory(idp.verifier(), clock, &mut rng));
        let dir = tempfile::tempdir().unwrap();
        let kms = Kms::new(net.client(), server.clone(), dir.path());
        Fixture {
            kms,
            net,
            server,
            idp,
            rng,
            _dir: dir,
        }
    }

    fn token(f: &Fixture, who: &str) -> IdToken {
        f.idp.issue_token(&Identity::new("https://idp.test", who), KMS_AUDIENCE, 3600, 1_000)
    }

    #[test]
    fn signup_then_signin_gives_same_key() {
        let mut f = fixture();
        let tok = token(&f, "alice");
        let mut s = Session::new("phone");
        let public = f.kms.signup(&mut s, &tok, &mut f.rng).unwrap();
        s.take_meter();
        let key = f.kms.signin(&mut s, &tok).unwrap();
        assert_eq!(*key.public_key(), public);
        let m = s.take_meter();
        assert_eq!(m.node_fetches, 0);
        assert_eq!(m.server_calls, 2);
        assert!(matches!(f.kms.signup(&mut s, &tok, &mut f.rng), Err(KmsError::AlreadyEnrolled)));
    }

    #[test]
    fn audit_shares_sit_at_fixed_coordinates() {
        let mut f = fixture();
        let tok = token(&f, "bob");
        let mut s = Session::new("phone");
        let public = f.kms.signup(&mut s, &tok, &mut f.rng).unwrap();
        let audit = f.kms.audit_vault(&mut s, &tok).unwrap();
        assert_eq!(audit.public, public);
        assert_eq!(audit.generation, 1);
        for (i, x) in [NETWORK_X, SERVER_X, DEVICE_X].into_iter().enumerate() {
            assert_eq!(audit.key_shares[i].x, x_of(x));
            assert_eq!(audit.ekp_shares[i].x, x_of(x));
        }
    }

    #[test]
    fn rotation_changes_ekp_not_key() {
        let mut f = fixture();
        let tok = token(&f, "carol");
        let mut s = Session::new("phone");
        let public = f.kms.signup(&mut s, &tok, &mut f.rng).unwrap();
        let before = f.kms.audit_vault(&mut s, &tok).unwrap();
        assert_eq!(f.kms.rotate_ekp(&mut s, &tok, &mut f.rng).unwrap(), 2);
        let after = f.kms.audit_vault(&mut s, &tok).unwrap();
        assert_eq!(before.key_shares, after.key_shares);
        assert_ne!(before.ekp_shares, after.ekp_shares);
        assert_eq!(*f.kms.signin(&mut s, &tok).unwrap().public_key(), public);

        assert_eq!(f.kms.reshare_key(&mut s, &tok, &mut f.rng).unwrap(), 3);
        let reshared = f.kms.audit_vault(&mut s, &tok).unwrap();
        assert_ne!(reshared.key_shares, after.key_shares);
        assert_eq!(reshared.public, public);
    }

    #[test]
    fn failed_device_write_rolls_back_server() {
        let mut f = fixture();
        let tok = token(&f, "dave");
        let mut s = Session::new("phone");
        f.kms.signup(&mut s, &tok, &mut f.rng).unwrap();
        let server_before = f.server.server_get(&tok, Slot::EkpShard).unwrap();

        // A directory where the device file should be makes the write fail.
        let path = f.kms.device("phone").path();
        let saved = std::fs::read(&path).unwrap();
        std::fs::remove_file(&path).unwrap();
        std::fs::create_dir(&path).unwrap();
        let err = f.kms.reshare_key(&mut s, &tok, &mut f.rng);
        assert!(err.is_err());
        assert_eq!(f.server.server_get(&tok, Slot::EkpShard).unwrap(), server_before);

        std::fs::remove_dir(&path).unwrap();
        std::fs::write(&path, saved).unwrap();
        f.kms.audit_vault(&mut s, &tok).unwrap();
    }

    #[test]
    fn two_storages_needed() {
        let mut f = fixture();
        let tok = token(&f, "erin");
        let mut s = Session::new("phone");
        f.kms.signup(&mut s, &tok, &mut f.rng).unwrap();
        f.server.set_available(false);
        assert_eq!(f.kms.signin(&mut s, &tok).unwrap_err().class(), ErrorClass::Unavailable);
        assert!(f.kms.disaster_recover(&mut s, &tok).is_ok());
        f.kms.device("phone").wipe().unwrap();
        assert_eq!(f.kms.disaster_recover(&mut s, &tok).unwrap_err().class(), ErrorClass::Unprovisioned);
        f.server.set_available(true);
        f.kms.recover_device(&mut s, &tok, "tablet", &mut f.rng).unwrap();
        assert_eq!(s.device_id, "tablet");
        for i in 1..=3 {
            f.net.mark_node(i, crate::network::NodeHealth::Dead).unwrap();
        }
        assert_eq!(f.kms.rotate_ekp(&mut s, &tok, &mut f.rng).unwrap_err().class(), ErrorClass::InsufficientStorages);
        assert!(f.kms.signin(&mut s, &tok).is_ok());
    }
}
