//! Server and device storage backends.
//!
//! The server store wraps every record in an at-rest AEAD layer keyed by the
//! current epoch secret, `HKDF(master, "keyshard/at-rest/v1" ‖ epoch)`.
//! Rotation re-encrypts every record under the next epoch.
//!
//! Server file format (all integers big-endian):
//!
//! ```text
//! header  := "KSSV" version:u8
//! frame   := len:u32 kind:u8 body            (len counts kind + body)
//! kind 1  := record   identity slot:u8 epoch:u64 ct_len:u32 ct
//! kind 2  := delete   identity
//! kind 3  := epoch    epoch:u64
//! identity := url_len:u32 url id_len:u32 id
//! ```
//!
//! Puts append; rotation rewrites the file compacted. Replaying the log
//! yields the index. The device store keeps one file per device id:
//! `"KSDV" version:u8 (slot:u8 len:u32 bytes)*`.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use zeroize::Zeroizing;

use crate::auth::{AuthError, IdToken, Identity, TokenVerifier, KMS_AUDIENCE};
use crate::clock::Clock;
use crate::curve::CryptoError;
use crate::meter::Meter;

const SERVER_MAGIC: &[u8; 4] = b"KSSV";
const DEVICE_MAGIC: &[u8; 4] = b"KSDV";
const FORMAT_VERSION: u8 = 1;
const AT_REST_INFO: &[u8] = b"keyshard/at-rest/v1";
const NONCE_LEN: usize = 12;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StorageError {
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error("no record in slot")]
    NotFound,
    #[error("record sealed under epoch {record}, store is at {current}")]
    EpochMismatch { record: u64, current: u64 },
    #[error("device is not provisioned")]
    Unprovisioned,
    #[error("storage unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error("io: {0}")]
    Io(String),
    #[error("corrupt store: {0}")]
    Corrupt(String),
}

impl From<std::io::Error> for StorageError {
    fn from(e: std::io::Error) -> Self {
        StorageError::Io(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Slot {
    PrivkeyShard,
    EkpShard,
}

impl Slot {
    pub const ALL: [Slot; 2] = [Slot::PrivkeyShard, Slot::EkpShard];

    pub fn tag(self) -> u8 {
        match self {
            Slot::PrivkeyShard => 1,
            Slot::EkpShard => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Slot> {
        match tag {
            1 => Some(Slot::PrivkeyShard),
            2 => Some(Slot::EkpShard),
            _ => None,
        }
    }
}

/// One persisted server record. The payload only exists inside
/// `at_rest_ciphertext` (nonce ‖ AEAD output).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VaultRecord {
    pub identity: Identity,
    pub slot: Slot,
    pub at_rest_epoch: u64,
    pub at_rest_ciphertext: Vec<u8>,
}

fn epoch_secret(master: &[u8; 32], epoch: u64) -> Zeroizing<[u8; 32]> {
    let hk = Hkdf::<Sha256>::new(None, master);
    let mut info = AT_REST_INFO.to_vec();
    info.extend_from_slice(&epoch.to_be_bytes());
    let mut out = Zeroizing::new([0u8; 32]);
    hk.expand(&info, &mut out[..]).expect("valid HKDF length");
    out
}

fn record_aad(identity: &Identity, slot: Slot, epoch: u64) -> Vec<u8> {
    let mut aad = identity.key_bytes();
    aad.push(slot.tag());
    aad.extend_from_slice(&epoch.to_be_bytes());
    aad
}

fn seal_record<R: RngCore + ?Sized>(
    secret: &[u8; 32],
    identity: &Identity,
    slot: Slot,
    epoch: u64,
    payload: &[u8],
    rng: &mut R,
) -> VaultRecord {
    let cipher = ChaCha20Poly1305::new(Key::from_slice(secret));
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let ct = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: payload,
                aad: &record_aad(identity, slot, epoch),
            },
        )
        .expect("in-memory encryption");
    let mut at_rest_ciphertext = nonce.to_vec();
    at_rest_ciphertext.extend_from_slice(&ct);
    VaultRecord {
        identity: identity.clone(),
        slot,
        at_rest_epoch: epoch,
        at_rest_ciphertext,
    }
}

/// Decrypts a record's at-rest layer with an explicit epoch secret.
pub fn open_record(record: &VaultRecord, secret: &[u8; 32]) -> Result<Vec<u8>, StorageError> {
    if record.at_rest_ciphertext.len() < NONCE_LEN {
        return Err(StorageError::Corrupt("short record".into()));
    }
    let (nonce, ct) = record.at_rest_ciphertext.split_at(NONCE_LEN);
    ChaCha20Poly1305::new(Key::from_slice(secret))
        .decrypt(
            Nonce::from_slice(nonce),
            Payload {
                msg: ct,
                aad: &record_aad(&record.identity, record.slot, record.at_rest_epoch),
            },
        )
        .map_err(|_| StorageError::Crypto(CryptoError::AuthFailure))
}

/// Token-gated access to the server's two slots per identity.
pub trait ServerApi: Send + Sync {
    /// Writes all `records` for the token's identity in one atomic step.
    fn put(&self, token: &IdToken, records: &[(Slot, Vec<u8>)], meter: &mut Meter) -> Result<(), StorageError>;
    fn get(&self, token: &IdToken, slot: Slot, meter: &mut Meter) -> Result<Vec<u8>, StorageError>;
    /// Removes every record of the token's identity.
    fn delete(&self, token: &IdToken, meter: &mut Meter) -> Result<(), StorageError>;
    /// Fresh server-side entropy for key generation.
    fn entropy(&self, token: &IdToken, meter: &mut Meter) -> Result<[u8; 32], StorageError>;
    /// Moves the at-rest layer to a new epoch.
    fn rotate_at_rest(&self, token: &IdToken, meter: &mut Meter) -> Result<u64, StorageError>;
}

struct ServerState {
    epoch: u64,
    records: BTreeMap<(Identity, Slot), VaultRecord>,
}

/// Encrypted-at-rest server store, optionally file-backed.
pub struct ServerStore {
    state: RwLock<ServerState>,
    master: Zeroizing<[u8; 32]>,
    verifier: TokenVerifier,
    clock: Arc<dyn Clock>,
    rng: Mutex<ChaCha20Rng>,
    available: AtomicBool,
    path: Option<PathBuf>,
}

impl std::fmt::Debug for ServerStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ServerStore")
            .field("epoch", &self.epoch())
            .field("path", &self.path)
            .finish_non_exhaustive()
    }
}

impl ServerStore {
    /// Memory-only store.
    pub fn in_memory<R: RngCore + CryptoRng + ?Sized>(
        verifier: TokenVerifier,
        clock: Arc<dyn Clock>,
        rng: &mut R,
    ) -> Self {
        let mut master = Zeroizing::new([0u8; 32]);
        rng.fill_bytes(&mut master[..]);
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        ServerStore {
            state: RwLock::new(ServerState {
                epoch: 0,
                records: BTreeMap::new(),
            }),
            master,
            verifier,
            clock,
            rng: Mutex::new(ChaCha20Rng::from_seed(seed)),
            available: AtomicBool::new(true),
            path: None,
        }
    }

    /// Opens (or creates) a file-backed store. The master at-rest secret
    /// lives next to the log in `<path>.key`.
    pub fn open<R: RngCore + CryptoRng + ?Sized>(
        path: &Path,
        verifier: TokenVerifier,
        clock: Arc<dyn Clock>,
        rng: &mut R,
    ) -> Result<Self, StorageError> {
        let mut store = Self::in_memory(verifier, clock, rng);
        let key_path = key_path(path);
        if key_path.exists() {
            let hexed = Zeroizing::new(fs::read_to_string(&key_path)?);
            let bytes = Zeroizing::new(
                hex::decode(hexed.trim()).map_err(|_| StorageError::Corrupt("key file".into()))?,
            );
            if bytes.len() != 32 {
                return Err(StorageError::Corrupt("key file length".into()));
            }
            store.master.copy_from_slice(&bytes);
        } else {
            write_atomic(&key_path, hex::encode(&store.master[..]).as_bytes())?;
        }
        if path.exists() {
            let state = replay_log(&fs::read(path)?)?;
            *store.state.get_mut().unwrap() = state;
        } else {
            let st = store.state.get_mut().unwrap();
            write_atomic(path, &compacted_log(st))?;
        }
        store.path = Some(path.to_path_buf());
        Ok(store)
    }

    pub fn epoch(&self) -> u64 {
        self.read().epoch
    }

    pub fn set_available(&self, up: bool) {
        self.available.store(up, Ordering::SeqCst);
    }

    pub fn is_available(&self) -> bool {
        self.available.load(Ordering::SeqCst)
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, ServerState> {
        self.state.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, ServerState> {
        self.state.write().unwrap_or_else(|e| e.into_inner())
    }

    fn authorize(&self, token: &IdToken) -> Result<Identity, StorageError> {
        if !self.is_available() {
            return Err(StorageError::Unavailable("server is down".into()));
        }
        Ok(self.verifier.verify(token, KMS_AUDIENCE, self.clock.now())?)
    }

    pub fn server_put(&self, token: &IdToken, records: &[(Slot, Vec<u8>)]) -> Result<(), StorageError> {
        let identity = self.authorize(token)?;
        let mut st = self.write();
        let secret = epoch_secret(&self.master, st.epoch);
        let mut rng = self.rng.lock().unwrap_or_else(|e| e.into_inner());
        let sealed: Vec<_> = records
            .iter()
            .map(|(slot, payload)| seal_record(&secret, &identity, *slot, st.epoch, payload, &mut *rng))
            .collect();
        if let Some(path) = &self.path {
            let mut frames = Vec::new();
            for r in &sealed {
                frames.extend_from_slice(&record_frame(r));
            }
            append(path, &frames)?;
        }
        for r in sealed {
            st.records.insert((identity.clone(), r.slot), r);
        }
        Ok(())
    }

    pub fn server_get(&self, token: &IdToken, slot: Slot) -> Result<Vec<u8>, StorageError> {
        let identity = self.authorize(token)?;
        let st = self.read();
        let record = st.records.get(&(identity, slot)).ok_or(StorageError::NotFound)?;
        if record.at_rest_epoch != st.epoch {
            return Err(StorageError::EpochMismatch {
                record: record.at_rest_epoch,
                current: st.epoch,
            });
        }
        open_record(record, &epoch_secret(&self.master, st.epoch))
    }

    pub fn server_delete(&self, token: &IdToken) -> Result<(), StorageError> {
        let identity = self.authorize(token)?;
        let mut st = self.write();
        if let Some(path) = &self.path {
            append(path, &frame(2, &identity_bytes(&identity)))?;
        }
        st.records.retain(|(id, _), _| *id != identity);
        Ok(())
    }

    pub fn server_entropy(&self, token: &IdToken) -> Result<[u8; 32], StorageError> {
        self.authorize(token)?;
        let mut out = [0u8; 32];
        self.rng.lock().unwrap_or_else(|e| e.into_inner()).fill_bytes(&mut out);
        Ok(out)
    }

    /// Re-encrypts every record under epoch + 1 and compacts the log.
    pub fn rotate_at_rest(&self) -> Result<u64, StorageError> {
        let mut st = self.write();
        let old = epoch_secret(&self.master, st.epoch);
        let next = st.epoch + 1;
        let new = epoch_secret(&self.master, next);
        let mut rng = self.rng.lock().unwrap_or_else(|e| e.into_inner());
        let mut rotated = BTreeMap::new();
        for (key, record) in &st.records {
            let payload = Zeroizing::new(open_record(record, &old)?);
            rotated.insert(
                key.clone(),
                seal_record(&new, &record.identity, record.slot, next, &payload, &mut *rng),
            );
        }
        let staged = ServerState {
            epoch: next,
            records: rotated,
        };
        if let Some(path) = &self.path {
            write_atomic(path, &compacted_log(&staged))?;
        }
        *st = staged;
        Ok(next)
    }

    /// Raw persisted records, as an attacker with disk access would see them.
    pub fn raw_records(&self) -> Vec<VaultRecord> {
        self.read().records.values().cloned().collect()
    }

    /// The live epoch secret, for breach drills.
    pub fn current_epoch_secret(&self) -> [u8; 32] {
        *epoch_secret(&self.master, self.epoch())
    }

    /// Overwrites a record with raw bytes, e.g. a restored backup.
    pub fn import_raw(&self, record: VaultRecord) {
        self.write()
            .records
            .insert((record.identity.clone(), record.slot), record);
    }
}

impl ServerApi for ServerStore {
    fn put(&self, token: &IdToken, records: &[(Slot, Vec<u8>)], meter: &mut Meter) -> Result<(), StorageError> {
        meter.server_calls += 1;
        self.server_put(token, records)
    }

    fn get(&self, token: &IdToken, slot: Slot, meter: &mut Meter) -> Result<Vec<u8>, StorageError> {
        meter.server_calls += 1;
        self.server_get(token, slot)
    }

    fn delete(&self, token: &IdToken, meter: &mut Meter) -> Result<(), StorageError> {
        meter.server_calls += 1;
        self.server_delete(token)
    }

    fn entropy(&self, token: &IdToken, meter: &mut Meter) -> Result<[u8; 32], StorageError> {
        meter.server_calls += 1;
        self.server_entropy(token)
    }

    fn rotate_at_rest(&self, token: &IdToken, meter: &mut Meter) -> Result<u64, StorageError> {
        meter.server_calls += 1;
        self.authorize(token)?;
        ServerStore::rotate_at_rest(self)
    }
}

fn key_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".key");
    PathBuf::from(p)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StorageError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn append(path: &Path, bytes: &[u8]) -> Result<(), StorageError> {
    let mut f = OpenOptions::new().append(true).open(path)?;
    f.write_all(bytes)?;
    f.sync_data()?;
    Ok(())
}

fn identity_bytes(id: &Identity) -> Vec<u8> {
    id.key_bytes()
}

fn frame(kind: u8, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + body.len());
    out.extend_from_slice(&(body.len() as u32 + 1).to_be_bytes());
    out.push(kind);
    out.extend_from_slice(body);
    out
}

fn record_frame(r: &VaultRecord) -> Vec<u8> {
    let mut body = identity_bytes(&r.identity);
    body.push(r.slot.tag());
    body.extend_from_slice(&r.at_rest_epoch.to_be_bytes());
    body.extend_from_slice(&(r.at_rest_ciphertext.len() as u32).to_be_bytes());
    body.extend_from_slice(&r.at_rest_ciphertext);
    frame(1, &body)
}

fn compacted_log(st: &ServerState) -> Vec<u8> {
    let mut out = SERVER_MAGIC.to_vec();
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&frame(3, &st.epoch.to_be_bytes()));
    for r in st.records.values() {
        out.extend_from_slice(&record_frame(r));
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], StorageError> {
        if self.buf.len() < n {
            return Err(StorageError::Corrupt("truncated".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u8(&mut self) -> Result<u8, StorageError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, StorageError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, StorageError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, StorageError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| StorageError::Corrupt("utf8".into()))
    }

    fn identity(&mut self) -> Result<Identity, StorageError> {
        let verifier_url = self.string()?;
        let verifier_id = self.string()?;
        Ok(Identity {
            verifier_url,
            verifier_id,
        })
    }
}

fn replay_log(bytes: &[u8]) -> Result<ServerState, StorageError> {
    let mut cur = Cursor { buf: bytes };
    if cur.take(4)? != SERVER_MAGIC {
        return Err(StorageError::Corrupt("bad magic".into()));
    }
    if cur.u8()? != FORMAT_VERSION {
        return Err(StorageError::Corrupt("unsupported version".into()));
    }
    let mut st = ServerState {
        epoch: 0,
        records: BTreeMap::new(),
    };
    while !cur.buf.is_empty() {
        let len = cur.u32()? as usize;
        let mut body = Cursor { buf: cur.take(len)? };
        match body.u8()? {
            1 => {
                let identity = body.identity()?;
                let slot = Slot::from_tag(body.u8()?).ok_or(StorageError::Corrupt("slot".into()))?;
                let at_rest_epoch = body.u64()?;
                let n = body.u32()? as usize;
                let at_rest_ciphertext = body.take(n)?.to_vec();
                st.records.insert(
                    (identity.clone(), slot),
                    VaultRecord {
                        identity,
                        slot,
                        at_rest_epoch,
                        at_rest_ciphertext,
                    },
                );
            }
            2 => {
                let identity = body.identity()?;
                st.records.retain(|(id, _), _| *id != identity);
            }
            3 => st.epoch = body.u64()?,
            k => return Err(StorageError::Corrupt(format!("frame kind {k}"))),
        }
    }
    Ok(st)
}

/// File-backed device storage: one file per device id under `dir`.
#[derive(Clone, Debug)]
pub struct DeviceStore {
    dir: PathBuf,
    device_id: String,
}

impl DeviceStore {
    pub fn new(dir: impl Into<PathBuf>, device_id: impl Into<String>) -> Self {
        DeviceStore {
            dir: dir.into(),
            device_id: device_id.into(),
        }
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn path(&self) -> PathBuf {
        self.dir.join(format!("{}.device", hex::encode(self.device_id.as_bytes())))
    }

    pub fn is_provisioned(&self) -> bool {
        self.path().exists()
    }

    fn load(&self) -> Result<BTreeMap<Slot, Vec<u8>>, StorageError> {
        let bytes = match fs::read(self.path()) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StorageError::Unprovisioned),
            Err(e) => return Err(e.into()),
        };
        let mut cur = Cursor { buf: &bytes };
        if cur.take(4)? != DEVICE_MAGIC || cur.u8()? != FORMAT_VERSION {
            return Err(StorageError::Corrupt("device header".into()));
        }
        let mut slots = BTreeMap::new();
        while !cur.buf.is_empty() {
            let slot = Slot::from_tag(cur.u8()?).ok_or(StorageError::Corrupt("slot".into()))?;
            let n = cur.u32()? as usize;
            slots.insert(slot, cur.take(n)?.to_vec());
        }
        Ok(slots)
    }

    fn save(&self, slots: &BTreeMap<Slot, Vec<u8>>) -> Result<(), StorageError> {
        fs::create_dir_all(&self.dir)?;
        let mut out = DEVICE_MAGIC.to_vec();
        out.push(FORMAT_VERSION);
        for (slot, payload) in slots {
            out.push(slot.tag());
            out.extend_from_slice(&(payload.len() as u32).to_be_bytes());
            out.extend_from_slice(payload);
        }
        write_atomic(&self.path(), &out)
    }

    pub fn device_put(&self, slot: Slot, payload: &[u8]) -> Result<(), StorageError> {
        let mut slots = match self.load() {
            Ok(s) => s,
            Err(StorageError::Unprovisioned) => BTreeMap::new(),
            Err(e) => return Err(e),
        };
        slots.insert(slot, payload.to_vec());
        self.save(&slots)
    }

    /// Replaces the whole device file in one write.
    pub fn provision(&self, slots: &[(Slot, Vec<u8>)]) -> Result<(), StorageError> {
        self.save(&slots.iter().cloned().collect())
    }

    pub fn device_get(&self, slot: Slot) -> Result<Vec<u8>, StorageError> {
        self.load()?.remove(&slot).ok_or(StorageError::NotFound)
    }

    pub fn wipe(&self) -> Result<(), StorageError> {
        match fs::remove_file(self.path()) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e.into()),
        }
    }
}
