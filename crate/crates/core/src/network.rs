//! Simulated threshold node network.
//!
//! Each node independently verifies the caller's token on every request. Per
//! identity the network runs one round of additive dealing: every live node
//! picks a random scalar, Shamir-shares it `t`-of-`n` and seals each sub-share
//! to the recipient node's key. Node `j` keeps the sum of what it was dealt.
//! The postbox scalar (sum of all dealt scalars) exists only when a client
//! interpolates `t` node shares.
//!
//! Blobs are split chunk-wise with the same `t`-of-`n` sharing. The framed
//! blob is `version (1) ‖ length (u64 BE) ‖ bytes ‖ zero padding`, cut into
//! 31-byte chunks so every chunk is a canonical scalar.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, MutexGuard};

use k256::PublicKey;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::auth::{AuthError, IdToken, Identity, TokenVerifier, KMS_AUDIENCE};
use crate::clock::Clock;
use crate::curve::{self, CryptoError, EncKeypair, SealedBox};
use crate::field::{self, Field, FieldElement, ShamirError, SharePoint, SharePolicy};
use crate::meter::Meter;

pub const DEFAULT_NODES: usize = 9;
pub const DEFAULT_THRESHOLD: usize = 5;

/// Plaintext bytes carried per blob chunk.
pub const CHUNK_BYTES: usize = 31;
const BLOB_HEADER: usize = 9;
const BLOB_VERSION: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NetworkError {
    #[error(transparent)]
    Auth(#[from] AuthError),
    #[error("invalid network config: {0}")]
    InvalidConfig(String),
    #[error("only {available} of the {needed} required nodes responded")]
    InsufficientNodes { needed: usize, available: usize },
    #[error("identity already has a postbox key")]
    AlreadyAssigned,
    #[error("nothing stored for this identity")]
    NotFound,
    #[error("no node with index {0}")]
    BadIndex(usize),
    #[error("node unavailable: {0}")]
    Unavailable(String),
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Shamir(#[from] ShamirError),
    #[error("malformed: {0}")]
    Malformed(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub nodes: usize,
    pub threshold: usize,
    /// Injected per-request latency of every node.
    pub latency_ms: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            nodes: DEFAULT_NODES,
            threshold: DEFAULT_THRESHOLD,
            latency_ms: 0,
        }
    }
}

impl NetworkConfig {
    pub fn new(nodes: usize, threshold: usize) -> Result<Self, NetworkError> {
        let cfg = NetworkConfig {
            nodes,
            threshold,
            latency_ms: 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.threshold == 0 || self.threshold > self.nodes {
            return Err(NetworkError::InvalidConfig(format!(
                "threshold {} outside 1..={}",
                self.threshold, self.nodes
            )));
        }
        if self.nodes > 255 {
            return Err(NetworkError::InvalidConfig("at most 255 nodes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeHealth {
    Healthy,
    /// Drops every request.
    Dead,
    /// Serves requests; its stored state is visible to the adversary.
    Compromised,
}

impl std::str::FromStr for NodeHealth {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "healthy" => Ok(NodeHealth::Healthy),
            "dead" => Ok(NodeHealth::Dead),
            "compromised" => Ok(NodeHealth::Compromised),
            other => Err(format!("unknown node state {other:?}")),
        }
    }
}

/// A node's share of one identity's postbox key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeShare {
    pub node_index: u32,
    pub share: SharePoint,
    pub identity: Identity,
}

/// A node's slice of a stored blob: one y-value per chunk, at x = node index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlobShard {
    pub node_index: u32,
    pub blob_id: [u8; 16],
    pub chunks: Vec<FieldElement>,
}

impl BlobShard {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + 32 * self.chunks.len());
        out.extend_from_slice(&self.node_index.to_be_bytes());
        out.extend_from_slice(&self.blob_id);
        out.extend_from_slice(&(self.chunks.len() as u32).to_be_bytes());
        for c in &self.chunks {
            out.extend_from_slice(&c.to_bytes_be());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetworkError> {
        let bad = || NetworkError::Malformed("blob shard".into());
        if bytes.len() < 24 {
            return Err(bad());
        }
        let node_index = u32::from_be_bytes(bytes[..4].try_into().unwrap());
        let blob_id: [u8; 16] = bytes[4..20].try_into().unwrap();
        let count = u32::from_be_bytes(bytes[20..24].try_into().unwrap()) as usize;
        let body = &bytes[24..];
        if body.len() != count * 32 {
            return Err(bad());
        }
        let field = Field::secp256k1_order();
        let chunks = body
            .chunks(32)
            .map(|c| field.from_bytes_be(c))
            .collect::<Result<_, _>>()?;
        Ok(BlobShard {
            node_index,
            blob_id,
            chunks,
        })
    }
}

#[derive(Clone, Debug)]
pub enum NodeRequest {
    Info,
    /// Deal a fresh sharing to `participants` (index, node key).
    DkgDeal { participants: Vec<(u32, PublicKey)> },
    /// Sub-shares addressed to this node, by dealer index.
    DkgFinalize { deals: Vec<(u32, SealedBox)> },
    FetchShare,
    StoreBlob(BlobShard),
    FetchBlob,
}

#[derive(Clone, Debug)]
pub enum NodeResponse {
    Info { index: u32, public: PublicKey },
    Dealt { commitment: PublicKey, sealed: Vec<(u32, SealedBox)> },
    Finalized,
    Share(NodeShare),
    Stored,
    Blob(BlobShard),
}

struct NodeState {
    health: NodeHealth,
    latency_ms: u64,
    keypair: EncKeypair,
    rng: ChaCha20Rng,
    shares: BTreeMap<Identity, FieldElement>,
    dealt: BTreeMap<Identity, ()>,
    blobs: BTreeMap<Identity, BlobShard>,
}

/// One simulated node. All state sits behind a mutex, so requests for the
/// same node are serialized.
pub struct Node {
    index: u32,
    threshold: usize,
    verifier: TokenVerifier,
    clock: Arc<dyn Clock>,
    state: Mutex<NodeState>,
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("index", &self.index)
            .field("health", &self.health())
            .finish_non_exhaustive()
    }
}

impl Node {
    pub fn new<R: RngCore + CryptoRng + ?Sized>(
        index: u32,
        threshold: usize,
        verifier: TokenVerifier,
        clock: Arc<dyn Clock>,
        rng: &mut R,
    ) -> Result<Self, NetworkError> {
        let keypair = EncKeypair::generate(rng)?;
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Ok(Node {
            index,
            threshold,
            verifier,
            clock,
            state: Mutex::new(NodeState {
                health: NodeHealth::Healthy,
                latency_ms: 0,
                keypair,
                rng: ChaCha20Rng::from_seed(seed),
                shares: BTreeMap::new(),
                dealt: BTreeMap::new(),
                blobs: BTreeMap::new(),
            }),
        })
    }

    fn lock(&self) -> MutexGuard<'_, NodeState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    pub fn health(&self) -> NodeHealth {
        self.lock().health
    }

    pub fn set_health(&self, health: NodeHealth) {
        self.lock().health = health;
    }

    pub fn latency_ms(&self) -> u64 {
        self.lock().latency_ms
    }

    pub fn set_latency_ms(&self, ms: u64) {
        self.lock().latency_ms = ms;
    }

    pub fn public_key(&self) -> PublicKey {
        *self.lock().keypair.public()
    }

    /// Everything this node persists about `identity`.
    pub fn stored_state(&self, identity: &Identity) -> (Option<NodeShare>, Option<BlobShard>) {
        let st = self.lock();
        let share = st.shares.get(identity).map(|y| self.node_share(identity, y.clone()));
        (share, st.blobs.get(identity).cloned())
    }

    fn node_share(&self, identity: &Identity, y: FieldElement) -> NodeShare {
        let x = Field::secp256k1_order().element(self.index);
        NodeShare {
            node_index: self.index,
            share: SharePoint::new(x, y).expect("node index is nonzero"),
            identity: identity.clone(),
        }
    }

    /// Verifies the token, then serves one request.
    pub fn handle(&self, token: &IdToken, req: &NodeRequest) -> Result<NodeResponse, NetworkError> {
        let mut st = self.lock();
        if st.health == NodeHealth::Dead {
            return Err(NetworkError::Unavailable(format!("node {} is down", self.index)));
        }
        let identity = self.verifier.verify(token, KMS_AUDIENCE, self.clock.now())?;
        let field = Field::secp256k1_order();
        match req {
            NodeRequest::Info => Ok(NodeResponse::Info {
                index: self.index,
                public: *st.keypair.public(),
            }),
            NodeRequest::DkgDeal { participants } => {
                if st.shares.contains_key(&identity) || st.dealt.contains_key(&identity) {
                    return Err(NetworkError::AlreadyAssigned);
                }
                if participants.len() < self.threshold {
                    return Err(NetworkError::InsufficientNodes {
                        needed: self.threshold,
                        available: participants.len(),
                    });
                }
                let xs = participants.iter().map(|(j, _)| field.element(*j)).collect();
                let policy = SharePolicy::new(self.threshold, xs)?;
                let contribution = field.random_nonzero(&mut st.rng);
                let shares = field::split_secret(&contribution, &policy, &mut st.rng)?;
                let mut sealed = Vec::with_capacity(participants.len());
                for ((j, key), share) in participants.iter().zip(shares) {
                    let mut plain = self.index.to_be_bytes().to_vec();
                    plain.extend_from_slice(&identity.key_bytes());
                    plain.extend_from_slice(&share.y.to_bytes_be());
                    sealed.push((*j, curve::seal(&plain, key, &mut st.rng)?));
                }
                let commitment = curve::public_from_scalar(&contribution)?;
                st.dealt.insert(identity, ());
                Ok(NodeResponse::Dealt { commitment, sealed })
            }
            NodeRequest::DkgFinalize { deals } => {
                if st.shares.contains_key(&identity) {
                    return Err(NetworkError::AlreadyAssigned);
                }
                let id_bytes = identity.key_bytes();
                let mut sum = field.zero();
                for (dealer, sealed) in deals {
                    let plain = st.keypair.open(sealed)?;
                    let expected_len = 4 + id_bytes.len() + 32;
                    if plain.len() != expected_len
                        || plain[..4] != dealer.to_be_bytes()
                        || plain[4..4 + id_bytes.len()] != id_bytes[..]
                    {
                        return Err(NetworkError::Malformed("sub-share binding".into()));
                    }
                    sum = sum + field.from_bytes_be(&plain[4 + id_bytes.len()..])?;
                }
                st.shares.insert(identity, sum);
                Ok(NodeResponse::Finalized)
            }
            NodeRequest::FetchShare => {
                let y = st.shares.get(&identity).cloned().ok_or(NetworkError::NotFound)?;
                Ok(NodeResponse::Share(self.node_share(&identity, y)))
            }
            NodeRequest::StoreBlob(shard) => {
                if shard.node_index != self.index {
                    return Err(NetworkError::Malformed("shard addressed to another node".into()));
                }
                st.blobs.insert(identity, shard.clone());
                Ok(NodeResponse::Stored)
            }
            NodeRequest::FetchBlob => st
                .blobs
                .get(&identity)
                .cloned()
                .map(NodeResponse::Blob)
                .ok_or(NetworkError::NotFound),
        }
    }

    pub fn snapshot(&self) -> NodeSnapshot {
        let st = self.lock();
        NodeSnapshot {
            index: self.index,
            health: st.health,
            latency_ms: st.latency_ms,
            key: hex::encode(st.keypair.scalar().to_bytes_be()),
            shares: st
                .shares
                .iter()
                .map(|(id, y)| (id.clone(), hex::encode(y.to_bytes_be())))
                .collect(),
            dealt: st.dealt.keys().cloned().collect(),
            blobs: st
                .blobs
                .iter()
                .map(|(id, b)| (id.clone(), hex::encode(b.to_bytes())))
                .collect(),
        }
    }

    pub fn restore<R: RngCore + CryptoRng + ?Sized>(
        snap: &NodeSnapshot,
        threshold: usize,
        verifier: TokenVerifier,
        clock: Arc<dyn Clock>,
        rng: &mut R,
    ) -> Result<Self, NetworkError> {
        let field = Field::secp256k1_order();
        let bad = |what: &str| NetworkError::Malformed(format!("node snapshot {what}"));
        let scalar = |h: &str| -> Result<FieldElement, NetworkError> {
            let bytes = hex::decode(h).map_err(|_| bad("hex"))?;
            Ok(field.from_bytes_be(&bytes)?)
        };
        let keypair = EncKeypair::from_scalar(&scalar(&snap.key)?)?;
        let mut shares = BTreeMap::new();
        for (id, y) in &snap.shares {
            shares.insert(id.clone(), scalar(y)?);
        }
        let mut blobs = BTreeMap::new();
        for (id, b) in &snap.blobs {
            let bytes = hex::decode(b).map_err(|_| bad("hex"))?;
            blobs.insert(id.clone(), BlobShard::from_bytes(&bytes)?);
        }
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        Ok(Node {
            index: snap.index,
            threshold,
            verifier,
            clock,
            state: Mutex::new(NodeState {
                health: snap.health,
                latency_ms: snap.latency_ms,
                keypair,
                rng: ChaCha20Rng::from_seed(seed),
                shares,
                dealt: snap.dealt.iter().map(|id| (id.clone(), ())).collect(),
                blobs,
            }),
        })
    }
}

/// Serializable node state (CLI persistence).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeSnapshot {
    pub index: u32,
    pub health: NodeHealth,
    pub latency_ms: u64,
    pub key: String,
    pub shares: Vec<(Identity, String)>,
    pub dealt: Vec<Identity>,
    pub blobs: Vec<(Identity, String)>,
}

/// Transport to one node: in-process call or a wire client.
pub trait NodeEndpoint: Send + Sync {
    fn index(&self) -> u32;
    /// Returns the response and the latency to charge to the meter.
    fn call(&self, token: &IdToken, req: &NodeRequest) -> Result<(NodeResponse, u64), NetworkError>;
}

impl NodeEndpoint for Arc<Node> {
    fn index(&self) -> u32 {
        Node::index(self)
    }

    fn call(&self, token: &IdToken, req: &NodeRequest) -> Result<(NodeResponse, u64), NetworkError> {
        let latency = self.latency_ms();
        self.handle(token, req).map(|r| (r, latency))
    }
}

/// Client-side coordinator: minimum-contact fetches, DKG orchestration and
/// blob splitting, over any set of endpoints.
#[derive(Clone)]
pub struct NetworkClient {
    endpoints: Vec<Arc<dyn NodeEndpoint>>,
    threshold: usize,
}

impl std::fmt::Debug for NetworkClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NetworkClient")
            .field("nodes", &self.endpoints.len())
            .field("threshold", &self.threshold)
            .finish()
    }
}

fn unexpected(what: &str) -> NetworkError {
    NetworkError::Malformed(format!("unexpected response to {what}"))
}

impl NetworkClient {
    pub fn new(endpoints: Vec<Arc<dyn NodeEndpoint>>, threshold: usize) -> Result<Self, NetworkError> {
        NetworkConfig {
            nodes: endpoints.len(),
            threshold,
            latency_ms: 0,
        }
        .validate()?;
        Ok(NetworkClient { endpoints, threshold })
    }

    pub fn threshold(&self) -> usize {
        self.threshold
    }

    pub fn node_count(&self) -> usize {
        self.endpoints.len()
    }

    fn call(
        &self,
        ep: &Arc<dyn NodeEndpoint>,
        token: &IdToken,
        req: &NodeRequest,
        meter: &mut Meter,
    ) -> Result<NodeResponse, NetworkError> {
        meter.node_fetches += 1;
        let (resp, latency) = ep.call(token, req)?;
        meter.latency_ms += latency;
        Ok(resp)
    }

    /// Runs the dealing round for the token's identity and returns the
    /// postbox public key.
    pub fn assign_postbox(&self, token: &IdToken, meter: &mut Meter) -> Result<PublicKey, NetworkError> {
        let mut participants = Vec::new();
        for ep in &self.endpoints {
            match self.call(ep, token, &NodeRequest::Info, meter) {
                Ok(NodeResponse::Info { index, public }) if index == ep.index() => {
                    participants.push((index, public))
                }
                Ok(_) => return Err(unexpected("info")),
                Err(NetworkError::Unavailable(_)) => {}
                Err(e) => return Err(e),
            }
        }
        self.require(participants.len())?;

        let mut commitments = Vec::new();
        let mut inbox: BTreeMap<u32, Vec<(u32, SealedBox)>> = BTreeMap::new();
        let deal = NodeRequest::DkgDeal {
            participants: participants.clone(),
        };
        for ep in self.live(&participants) {
            match self.call(ep, token, &deal, meter) {
                Ok(NodeResponse::Dealt { commitment, sealed }) => {
                    commitments.push(commitment);
                    for (j, boxed) in sealed {
                        inbox.entry(j).or_default().push((ep.index(), boxed));
                    }
                }
                Ok(_) => return Err(unexpected("deal")),
                Err(NetworkError::Unavailable(_)) => {}
                Err(e) => return Err(e),
            }
        }
        self.require(commitments.len())?;

        let mut finalized = 0;
        for ep in self.live(&participants) {
            let deals = inbox.remove(&ep.index()).unwrap_or_default();
            match self.call(ep, token, &NodeRequest::DkgFinalize { deals }, meter) {
                Ok(NodeResponse::Finalized) => finalized += 1,
                Ok(_) => return Err(unexpected("finalize")),
                Err(NetworkError::Unavailable(_)) => {}
                Err(e) => return Err(e),
            }
        }
        self.require(finalized)?;

        let sum = commitments
            .iter()
            .map(|c| c.to_projective())
            .fold(k256::ProjectivePoint::IDENTITY, |acc, p| acc + p);
        PublicKey::from_affine(sum.to_affine())
            .map_err(|_| NetworkError::Crypto(CryptoError::InvalidScalar))
    }

    fn live<'a>(&'a self, participants: &'a [(u32, PublicKey)]) -> impl Iterator<Item = &'a Arc<dyn NodeEndpoint>> {
        self.endpoints
            .iter()
            .filter(move |ep| participants.iter().any(|(i, _)| *i == ep.index()))
    }

    fn require(&self, available: usize) -> Result<(), NetworkError> {
        if available < self.threshold {
            return Err(NetworkError::InsufficientNodes {
                needed: self.threshold,
                available,
            });
        }
        Ok(())
    }

    /// Contacts nodes in index order until `t` shares are in hand.
    pub fn fetch_postbox_shares(&self, token: &IdToken, meter: &mut Meter) -> Result<Vec<NodeShare>, NetworkError> {
        let mut shares = Vec::new();
        let mut not_found = 0;
        for ep in &self.endpoints {
            if shares.len() == self.threshold {
                break;
            }
            match self.call(ep, token, &NodeRequest::FetchShare, meter) {
                Ok(NodeResponse::Share(s)) if s.node_index == ep.index() => shares.push(s),
                Ok(_) => return Err(unexpected("share fetch")),
                Err(NetworkError::Unavailable(_)) => {}
                Err(NetworkError::NotFound) => not_found += 1,
                Err(e) => return Err(e),
            }
        }
        if shares.is_empty() && not_found > 0 {
            return Err(NetworkError::NotFound);
        }
        self.require(shares.len())?;
        Ok(shares)
    }

    /// Fetches `t` shares and interpolates the postbox scalar.
    pub fn fetch_postbox_key(&self, token: &IdToken, meter: &mut Meter) -> Result<EncKeypair, NetworkError> {
        let shares = self.fetch_postbox_shares(token, meter)?;
        let points: Vec<_> = shares.into_iter().map(|s| s.share).collect();
        let scalar = field::reconstruct_secret(&points, self.threshold)?;
        Ok(EncKeypair::from_scalar(&scalar)?)
    }

    /// Splits `blob` across all nodes; at least `t` must acknowledge.
    pub fn store_blob<R: RngCore + CryptoRng + ?Sized>(
        &self,
        token: &IdToken,
        blob: &[u8],
        rng: &mut R,
        meter: &mut Meter,
    ) -> Result<(), NetworkError> {
        let shards = split_blob(blob, &self.endpoints.iter().map(|e| e.index()).collect::<Vec<_>>(), self.threshold, rng)?;
        let mut acked = 0;
        for (ep, shard) in self.endpoints.iter().zip(shards) {
            match self.call(ep, token, &NodeRequest::StoreBlob(shard), meter) {
                Ok(NodeResponse::Stored) => acked += 1,
                Ok(_) => return Err(unexpected("blob store")),
                Err(NetworkError::Unavailable(_)) => {}
                Err(e) => return Err(e),
            }
        }
        self.require(acked)
    }

    /// Collects blob shards until `t` agree on one blob id, then rebuilds it.
    pub fn retrieve_blob(&self, token: &IdToken, meter: &mut Meter) -> Result<Vec<u8>, NetworkError> {
        let mut groups: BTreeMap<[u8; 16], Vec<BlobShard>> = BTreeMap::new();
        let mut not_found = 0;
        let mut answered = 0;
        for ep in &self.endpoints {
            if groups.values().any(|g| g.len() >= self.threshold) {
                break;
            }
            match self.call(ep, token, &NodeRequest::FetchBlob, meter) {
                Ok(NodeResponse::Blob(b)) if b.node_index == ep.index() => {
                    answered += 1;
                    groups.entry(b.blob_id).or_default().push(b);
                }
                Ok(_) => return Err(unexpected("blob fetch")),
                Err(NetworkError::Unavailable(_)) => {}
                Err(NetworkError::NotFound) => not_found += 1,
                Err(e) => return Err(e),
            }
        }
        if let Some(group) = groups.into_values().find(|g| g.len() >= self.threshold) {
            return join_blob(&group, self.threshold);
        }
        if answered == 0 && not_found > 0 {
            return Err(NetworkError::NotFound);
        }
        Err(NetworkError::InsufficientNodes {
            needed: self.threshold,
            available: answered,
        })
    }
}

/// Frames and splits `blob`, one shard per entry of `indices`.
pub fn split_blob<R: RngCore + CryptoRng + ?Sized>(
    blob: &[u8],
    indices: &[u32],
    threshold: usize,
    rng: &mut R,
) -> Result<Vec<BlobShard>, NetworkError> {
    let field = Field::secp256k1_order();
    let policy = SharePolicy::new(threshold, indices.iter().map(|i| field.element(*i)).collect())?;
    let mut framed = Vec::with_capacity(BLOB_HEADER + blob.len() + CHUNK_BYTES);
    framed.push(BLOB_VERSION);
    framed.extend_from_slice(&(blob.len() as u64).to_be_bytes());
    framed.extend_from_slice(blob);
    let padded = framed.len().div_ceil(CHUNK_BYTES) * CHUNK_BYTES;
    framed.resize(padded, 0);

    let mut blob_id = [0u8; 16];
    rng.fill_bytes(&mut blob_id);
    let mut shards: Vec<BlobShard> = indices
        .iter()
        .map(|&i| BlobShard {
            node_index: i,
            blob_id,
            chunks: Vec::with_capacity(padded / CHUNK_BYTES),
        })
        .collect();
    for chunk in framed.chunks(CHUNK_BYTES) {
        let secret = field.from_bytes_be(chunk)?;
        for (shard, point) in shards.iter_mut().zip(field::split_secret(&secret, &policy, rng)?) {
            shard.chunks.push(point.y);
        }
    }
    Ok(shards)
}

/// Inverse of [`split_blob`] given at least `threshold` shards of one blob.
pub fn join_blob(shards: &[BlobShard], threshold: usize) -> Result<Vec<u8>, NetworkError> {
    let bad = |m: &str| NetworkError::Malformed(format!("blob: {m}"));
    let first = shards.first().ok_or_else(|| bad("no shards"))?;
    if shards.iter().any(|s| s.blob_id != first.blob_id || s.chunks.len() != first.chunks.len()) {
        return Err(bad("inconsistent shards"));
    }
    let field = Field::secp256k1_order();
    let mut framed = Vec::with_capacity(first.chunks.len() * CHUNK_BYTES);
    for c in 0..first.chunks.len() {
        let points = shards
            .iter()
            .map(|s| SharePoint::new(field.element(s.node_index), s.chunks[c].clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let value = field::reconstruct_secret(&points, threshold)?.to_bytes_be();
        if value[0] != 0 {
            return Err(bad("chunk out of range"));
        }
        framed.extend_from_slice(&value[1..]);
    }
    if framed.len() < BLOB_HEADER || framed[0] != BLOB_VERSION {
        return Err(bad("header"));
    }
    let len = u64::from_be_bytes(framed[1..9].try_into().unwrap()) as usize;
    let body = &framed[BLOB_HEADER..];
    if len > body.len() || body[len..].iter().any(|&b| b != 0) {
        return Err(bad("length"));
    }
    Ok(body[..len].to_vec())
}

/// Everything the compromised nodes hold.
#[derive(Clone, Debug, Default)]
pub struct AdversaryView {
    pub node_shares: Vec<NodeShare>,
    pub blob_shards: Vec<(Identity, BlobShard)>,
}

/// In-process network of [`Node`]s.
pub struct NodeNetwork {
    config: NetworkConfig,
    nodes: Vec<Arc<Node>>,
}

impl std::fmt::Debug for NodeNetwork {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodeNetwork").field("config", &self.config).finish_non_exhaustive()
    }
}

impl NodeNetwork {
    pub fn init<R: RngCore + CryptoRng + ?Sized>(
        config: NetworkConfig,
        verifier: TokenVerifier,
        clock: Arc<dyn Clock>,
        rng: &mut R,
    ) -> Result<Self, NetworkError> {
        config.validate()?;
        let nodes = (1..=config.nodes as u32)
            .map(|i| {
                let node = Node::new(i, config.threshold, verifier.clone(), clock.clone(), rng)?;
                node.set_latency_ms(config.latency_ms);
                Ok(Arc::new(node))
            })
            .collect::<Result<_, NetworkError>>()?;
        Ok(NodeNetwork { config, nodes })
    }

    pub fn from_nodes(config: NetworkConfig, nodes: Vec<Arc<Node>>) -> Result<Self, NetworkError> {
        config.validate()?;
        if nodes.len() != config.nodes {
            return Err(NetworkError::InvalidConfig("node count mismatch".into()));
        }
        Ok(NodeNetwork { config, nodes })
    }

    pub fn config(&self) -> NetworkConfig {
        self.config
    }

    pub fn nodes(&self) -> &[Arc<Node>] {
        &self.nodes
    }

    pub fn node(&self, index: usize) -> Result<&Arc<Node>, NetworkError> {
        index
            .checked_sub(1)
            .and_then(|i| self.nodes.get(i))
            .ok_or(NetworkError::BadIndex(index))
    }

    pub fn client(&self) -> NetworkClient {
        let endpoints = self
            .nodes
            .iter()
            .map(|n| Arc::new(n.clone()) as Arc<dyn NodeEndpoint>)
            .collect();
        NetworkClient::new(endpoints, self.config.threshold).expect("validated config")
    }

    pub fn mark_node(&self, index: usize, health: NodeHealth) -> Result<(), NetworkError> {
        self.node(index)?.set_health(health);
        Ok(())
    }

    pub fn set_latency_ms(&self, ms: u64) {
        for n in &self.nodes {
            n.set_latency_ms(ms);
        }
    }

    pub fn adversary_view(&self) -> AdversaryView {
        let mut view = AdversaryView::default();
        for node in self.nodes.iter().filter(|n| n.health() == NodeHealth::Compromised) {
            let st = node.lock();
            for (id, y) in &st.shares {
                view.node_shares.push(node.node_share(id, y.clone()));
            }
            for (id, b) in &st.blobs {
                view.blob_shards.push((id.clone(), b.clone()));
            }
        }
        view
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::auth::MockIdp;
    use crate::clock::ManualClock;

    fn setup(n: usize, t: usize) -> (NodeNetwork, MockIdp, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let idp = MockIdp::generate(&mut rng);
        let net = NodeNetwork::init(
            NetworkConfig::new(n, t).unwrap(),
            idp.verifier(),
            Arc::new(ManualClock::new(1000)),
            &mut rng,
        )
        .unwrap();
        (net, idp, rng)
    }

    fn token(idp: &MockIdp, who: &str) -> IdToken {
        idp.issue_token(&Identity::new("https://idp.test", who), KMS_AUDIENCE, 3600, 1000)
    }

    #[test]
    fn config_validation() {
        let d = NetworkConfig::default();
        assert_eq!((d.nodes, d.threshold), (9, 5));
        assert!(NetworkConfig::new(3, 2).is_ok());
        assert!(matches!(NetworkConfig::new(9, 10), Err(NetworkError::InvalidConfig(_))));
        assert!(matches!(NetworkConfig::new(9, 0), Err(NetworkError::InvalidConfig(_))));
    }

    #[test]
    fn postbox_fetch_matches_assigned_key() {
        let (net, idp, _) = setup(9, 5);
        let tok = token(&idp, "alice");
        let client = net.client();
        let mut m = Meter::default();
        let public = client.assign_postbox(&tok, &mut m).unwrap();
        let mut m = Meter::default();
        let kp = client.fetch_postbox_key(&tok, &mut m).unwrap();
        assert_eq!(*kp.public(), public);
        assert_eq!(m.node_fetches, 5);
        assert_eq!(client.assign_postbox(&tok, &mut m), Err(NetworkError::AlreadyAssigned));
    }

    #[test]
    fn fetch_threshold_boundary() {
        let (net, idp, _) = setup(9, 5);
        let tok = token(&idp, "bob");
        let client = net.client();
        client.assign_postbox(&tok, &mut Meter::default()).unwrap();
        for i in 1..=4 {
            net.mark_node(i, NodeHealth::Dead).unwrap();
        }
        let mut m = Meter::default();
        let shares = client.fetch_postbox_shares(&tok, &mut m).unwrap();
        assert_eq!(shares.iter().map(|s| s.node_index).collect::<Vec<_>>(), vec![5, 6, 7, 8, 9]);
        assert_eq!(m.node_fetches, 9);
        net.mark_node(5, NodeHealth::Dead).unwrap();
        assert_eq!(
            client.fetch_postbox_shares(&tok, &mut Meter::default()),
            Err(NetworkError::InsufficientNodes { needed: 5, available: 4 })
        );
        net.mark_node(1, NodeHealth::Healthy).unwrap();
        let shares = client.fetch_postbox_shares(&tok, &mut Meter::default()).unwrap();
        assert_eq!(shares[0].node_index, 1);
        assert!(matches!(net.mark_node(10, NodeHealth::Dead), Err(NetworkError::BadIndex(10))));
    }

    #[test]
    fn blob_round_trips() {
        let (net, idp, mut rng) = setup(9, 5);
        let tok = token(&idp, "carol");
        let client = net.client();
        for len in [0usize, 1, 22, 23, 100, 333] {
            let blob: Vec<u8> = (0..len).map(|i| (i * 7) as u8).collect();
            client.store_blob(&tok, &blob, &mut rng, &mut Meter::default()).unwrap();
            assert_eq!(client.retrieve_blob(&tok, &mut Meter::default()).unwrap(), blob);
        }
        let all_ff = vec![0xffu8; 64];
        client.store_blob(&tok, &all_ff, &mut rng, &mut Meter::default()).unwrap();
        assert_eq!(client.retrieve_blob(&tok, &mut Meter::default()).unwrap(), all_ff);
        assert_eq!(
            client.retrieve_blob(&token(&idp, "nobody"), &mut Meter::default()),
            Err(NetworkError::NotFound)
        );
    }

    #[test]
    fn shard_chunk_count() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for len in [0usize, 21, 22, 23, 53, 54, 200] {
            let shards = split_blob(&vec![1u8; len], &[1, 2, 3], 2, &mut rng).unwrap();
            assert_eq!(shards[0].chunks.len(), (len + BLOB_HEADER).div_ceil(CHUNK_BYTES));
        }
    }

    #[test]
    fn stale_shards_are_not_mixed() {
        let (net, idp, mut rng) = setup(9, 5);
        let tok = token(&idp, "dave");
        let client = net.client();
        client.store_blob(&tok, b"old", &mut rng, &mut Meter::default()).unwrap();
        for i in 1..=4 {
            net.mark_node(i, NodeHealth::Dead).unwrap();
        }
        client.store_blob(&tok, b"new", &mut rng, &mut Meter::default()).unwrap();
        for i in 1..=4 {
            net.mark_node(i, NodeHealth::Healthy).unwrap();
        }
        assert_eq!(client.retrieve_blob(&tok, &mut Meter::default()).unwrap(), b"new");
    }

    #[test]
    fn token_errors_reach_every_operation() {
        let (net, idp, mut rng) = setup(3, 2);
        let client = net.client();
        let good = token(&idp, "erin");
        client.assign_postbox(&good, &mut Meter::default()).unwrap();
        let mut bad_sig = good.clone();
        bad_sig.signature[3] ^= 0x40;
        let expired = idp.issue_token(&good.identity(), KMS_AUDIENCE, 10, 100);
        let wrong_aud = idp.issue_token(&good.identity(), "other", 3600, 1000);
        for (tok, err) in [
            (&bad_sig, AuthError::BadSignature),
            (&expired, AuthError::Expired),
            (&wrong_aud, AuthError::AudienceMismatch),
        ] {
            let e = NetworkError::Auth(err);
            let m = &mut Meter::default();
            assert_eq!(client.assign_postbox(tok, m).unwrap_err(), e);
            assert_eq!(client.fetch_postbox_shares(tok, m).unwrap_err(), e);
            assert_eq!(client.store_blob(tok, b"x", &mut rng, m).unwrap_err(), e);
            assert_eq!(client.retrieve_blob(tok, m).unwrap_err(), e);
        }
    }

    #[test]
    fn compromised_node_view() {
        let (net, idp, mut rng) = setup(9, 5);
        let tok = token(&idp, "frank");
        let client = net.client();
        client.assign_postbox(&tok, &mut Meter::default()).unwrap();
        client.store_blob(&tok, b"secret blob", &mut rng, &mut Meter::default()).unwrap();
        net.mark_node(3, NodeHealth::Compromised).unwrap();
        let view = net.adversary_view();
        assert_eq!(view.node_shares.len(), 1);
        assert_eq!(view.node_shares[0].node_index, 3);
        assert_eq!(view.blob_shards.len(), 1);
        assert_eq!(view.blob_shards[0].1.node_index, 3);
        // compromised nodes still serve
        assert!(client.fetch_postbox_shares(&tok, &mut Meter::default()).is_ok());
    }

    #[test]
    fn latency_is_metered() {
        let (net, idp, _) = setup(9, 5);
        net.set_latency_ms(50);
        let tok = token(&idp, "gina");
        let client = net.client();
        client.assign_postbox(&tok, &mut Meter::default()).unwrap();
        let mut m = Meter::default();
        client.fetch_postbox_shares(&tok, &mut m).unwrap();
        assert_eq!(m.latency_ms, 250);
    }

    #[test]
    fn snapshot_restore_preserves_state() {
        let (net, idp, mut rng) = setup(3, 2);
        let tok = token(&idp, "hank");
        let client = net.client();
        let public = client.assign_postbox(&tok, &mut Meter::default()).unwrap();
        client.store_blob(&tok, b"persist me", &mut rng, &mut Meter::default()).unwrap();
        net.mark_node(2, NodeHealth::Dead).unwrap();
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(1000));
        let nodes = net
            .nodes()
            .iter()
            .map(|n| {
                let snap: NodeSnapshot = serde_json::from_str(&serde_json::to_string(&n.snapshot()).unwrap()).unwrap();
                Arc::new(Node::restore(&snap, 2, idp.verifier(), clock.clone(), &mut rng).unwrap())
            })
            .collect();
        let restored = NodeNetwork::from_nodes(net.config(), nodes).unwrap();
        let c2 = restored.client();
        assert_eq!(*c2.fetch_postbox_key(&tok, &mut Meter::default()).unwrap().public(), public);
        assert_eq!(c2.retrieve_blob(&tok, &mut Meter::default()).unwrap(), b"persist me");
        assert_eq!(restored.node(2).unwrap().health(), NodeHealth::Dead);
    }
}
