//! Length-prefixed binary protocol over TCP for the server store and nodes.
//!
//! Request frame (all integers big-endian):
//!
//! ```text
//! u32 len ‖ u8 version ‖ u8 op ‖ u64 correlation ‖ u32 tlen ‖ token ‖ u32 plen ‖ payload
//! ```
//!
//! Response frame:
//!
//! ```text
//! u32 len ‖ u8 version ‖ u8 status ‖ u64 correlation ‖ u32 plen ‖ payload
//! ```
//!
//! `len` counts the bytes after itself. Status 0 is success; anything else is
//! an [`ErrorClass`] code with a UTF-8 detail string as payload. A frame with
//! an unknown version or op gets an `UNSUPPORTED` reply and the connection
//! stays open.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use k256::PublicKey;

use crate::auth::{IdToken, Identity};
use crate::curve::{self, SealedBox, POINT_LEN};
use crate::error::{network_error_from, storage_error_from, Classify, ErrorClass};
use crate::field::{Field, SharePoint};
use crate::meter::Meter;
use crate::network::{BlobShard, Node, NodeEndpoint, NodeRequest, NodeResponse, NodeShare, NetworkError};
use crate::storage::{ServerApi, ServerStore, Slot, StorageError};

pub const WIRE_VERSION: u8 = 1;
pub const MAX_FRAME: usize = 16 << 20;
const STATUS_OK: u8 = 0;
const POLL: Duration = Duration::from_millis(50);
const CLIENT_TIMEOUT: Duration = Duration::from_secs(30);

pub mod op {
    pub const SERVER_PUT: u8 = 0x01;
    pub const SERVER_GET: u8 = 0x02;
    pub const SERVER_DELETE: u8 = 0x03;
    pub const SERVER_ENTROPY: u8 = 0x04;
    pub const SERVER_ROTATE: u8 = 0x05;
    pub const NODE_INFO: u8 = 0x10;
    pub const NODE_DEAL: u8 = 0x11;
    pub const NODE_FINALIZE: u8 = 0x12;
    pub const NODE_FETCH_SHARE: u8 = 0x13;
    pub const NODE_STORE_BLOB: u8 = 0x14;
    pub const NODE_FETCH_BLOB: u8 = 0x15;
}

/// An error reply: class plus detail.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Failure {
    pub class: ErrorClass,
    pub detail: String,
}

impl Failure {
    pub fn new(class: ErrorClass, detail: impl Into<String>) -> Self {
        Failure {
            class,
            detail: detail.into(),
        }
    }

    fn malformed(what: &str) -> Self {
        Failure::new(ErrorClass::Malformed, what)
    }
}

impl<E: Classify + std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::new(e.class(), e.to_string())
    }
}

/// Payload encoder.
#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u8(mut self, v: u8) -> Self {
        self.0.push(v);
        self
    }
    fn u32(mut self, v: u32) -> Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    fn u64(mut self, v: u64) -> Self {
        self.0.extend_from_slice(&v.to_be_bytes());
        self
    }
    fn raw(mut self, b: &[u8]) -> Self {
        self.0.extend_from_slice(b);
        self
    }
    fn bytes(self, b: &[u8]) -> Self {
        self.u32(b.len() as u32).raw(b)
    }
}

/// Payload decoder; every read is bounds-checked.
struct Dec<'a>(&'a [u8]);

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], Failure> {
        if self.0.len() < n {
            return Err(Failure::malformed("truncated payload"));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, Failure> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, Failure> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, Failure> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8], Failure> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String, Failure> {
        String::from_utf8(self.bytes()?.to_vec()).map_err(|_| Failure::malformed("utf-8"))
    }
    fn point(&mut self) -> Result<PublicKey, Failure> {
        Ok(curve::point_from_bytes(self.take(POINT_LEN)?)?)
    }
    fn sealed(&mut self) -> Result<SealedBox, Failure> {
        Ok(SealedBox::from_bytes(self.bytes()?)?)
    }
    /// Caps a declared element count by what the remaining bytes could hold.
    fn count(&mut self, min_item: usize) -> Result<usize, Failure> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item) > self.0.len() {
            return Err(Failure::malformed("count exceeds payload"));
        }
        Ok(n)
    }
    fn finish(self) -> Result<(), Failure> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(Failure::malformed("trailing bytes"))
        }
    }
}

/// Reads exactly `buf.len()` bytes. With `idle_ok`, a stop request seen
/// before the first byte arrives ends the read with `Ok(false)`.
fn read_full(stream: &mut TcpStream, buf: &mut [u8], stop: Option<&AtomicBool>, idle_ok: bool) -> io::Result<bool> {
    let mut got = 0;
    while got < buf.len() {
        match stream.read(&mut buf[got..]) {
            Ok(0) if got == 0 && idle_ok => return Ok(false),
            Ok(0) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Ok(n) => got += n,
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                if let Some(stop) = stop {
                    if stop.load(Ordering::SeqCst) && (got == 0 && idle_ok) {
                        return Ok(false);
                    }
                    continue;
                }
                return Err(e);
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(true)
}

fn read_frame(stream: &mut TcpStream, stop: Option<&AtomicBool>) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    if !read_full(stream, &mut len, stop, true)? {
        return Ok(None);
    }
    let len = u32::from_be_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(io::Error::new(io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut body = vec![0u8; len];
    read_full(stream, &mut body, stop, false)?;
    Ok(Some(body))
}

fn write_frame(stream: &mut TcpStream, body: &[u8]) -> io::Result<()> {
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(body);
    stream.write_all(&out)?;
    stream.flush()
}

/// Request frame body for `op`.
pub fn encode_request(version: u8, op: u8, correlation: u64, token: &str, payload: &[u8]) -> Vec<u8> {
    Enc::default()
        .u8(version)
        .u8(op)
        .u64(correlation)
        .bytes(token.as_bytes())
        .bytes(payload)
        .0
}

fn encode_response(correlation: u64, result: &Result<Vec<u8>, Failure>) -> Vec<u8> {
    let enc = Enc::default().u8(WIRE_VERSION);
    match result {
        Ok(payload) => enc.u8(STATUS_OK).u64(correlation).bytes(payload).0,
        Err(f) => enc.u8(f.class.code()).u64(correlation).bytes(f.detail.as_bytes()).0,
    }
}

/// What a listener serves.
pub trait WireService: Send + Sync + 'static {
    fn dispatch(&self, op: u8, token: &str, payload: &[u8]) -> Result<Vec<u8>, Failure>;

    /// Artificial delay before each reply.
    fn delay(&self) -> Duration {
        Duration::ZERO
    }
}

fn serve_request(service: &dyn WireService, body: &[u8]) -> Vec<u8> {
    let mut d = Dec(body);
    let (Ok(version), Ok(op), Ok(correlation)) = (d.u8(), d.u8(), d.u64()) else {
        return encode_response(0, &Err(Failure::malformed("short header")));
    };
    let result = if version != WIRE_VERSION {
        Err(Failure::new(ErrorClass::Unsupported, format!("wire version {version}")))
    } else {
        (|| {
            let token = std::str::from_utf8(d.bytes()?).map_err(|_| Failure::new(ErrorClass::BadSignature, "token"))?;
            let payload = d.bytes()?;
            d.finish()?;
            service.dispatch(op, token, payload)
        })()
    };
    let delay = service.delay();
    if !delay.is_zero() {
        thread::sleep(delay);
    }
    encode_response(correlation, &result)
}

fn serve_connection(service: Arc<dyn WireService>, mut stream: TcpStream, stop: Arc<AtomicBool>) {
    let _ = stream.set_nodelay(true);
    if stream.set_read_timeout(Some(POLL)).is_err() {
        return;
    }
    loop {
        let body = match read_frame(&mut stream, Some(&stop)) {
            Ok(Some(b)) => b,
            _ => return,
        };
        // A stopped listener answers nothing, even on a live connection.
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let reply = serve_request(service.as_ref(), &body);
        if write_frame(&mut stream, &reply).is_err() || stop.load(Ordering::SeqCst) {
            return;
        }
    }
}

/// A running listener. Dropping it stops accepting and closes idle
/// connections within one poll interval.
pub struct WireServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl WireServer {
    pub fn bind(addr: impl ToSocketAddrs, service: Arc<dyn WireService>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = thread::spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        if stream.set_nonblocking(false).is_ok() {
                            let (svc, flag) = (service.clone(), flag.clone());
                            thread::spawn(move || serve_connection(svc, stream, flag));
                        }
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                    Err(_) => thread::sleep(Duration::from_millis(5)),
                }
            }
        });
        Ok(WireServer {
            addr,
            stop,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    /// Blocks until the accept loop ends (it never does on its own).
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

impl Drop for WireServer {
    fn drop(&mut self) {
        self.stop_now();
    }
}

/// Serves a [`ServerStore`].
pub struct ServerService(pub Arc<ServerStore>);

fn parse_token(token: &str) -> Result<IdToken, Failure> {
    Ok(IdToken::parse(token)?)
}

fn slot(tag: u8) -> Result<Slot, Failure> {
    Slot::from_tag(tag).ok_or_else(|| Failure::malformed("slot"))
}

impl WireService for ServerService {
    fn dispatch(&self, op: u8, token: &str, payload: &[u8]) -> Result<Vec<u8>, Failure> {
        let store = &self.0;
        let mut d = Dec(payload);
        match op {
            op::SERVER_PUT => {
                let n = d.u8()?;
                let mut records = Vec::with_capacity(n as usize);
                for _ in 0..n {
                    let s = slot(d.u8()?)?;
                    records.push((s, d.bytes()?.to_vec()));
                }
                d.finish()?;
                store.server_put(&parse_token(token)?, &records)?;
                Ok(Vec::new())
            }
            op::SERVER_GET => {
                let s = slot(d.u8()?)?;
                d.finish()?;
                Ok(store.server_get(&parse_token(token)?, s)?)
            }
            op::SERVER_DELETE => {
                d.finish()?;
                store.server_delete(&parse_token(token)?)?;
                Ok(Vec::new())
            }
            op::SERVER_ENTROPY => {
                d.finish()?;
                Ok(store.server_entropy(&parse_token(token)?)?.to_vec())
            }
            op::SERVER_ROTATE => {
                d.finish()?;
                let token = parse_token(token)?;
                ServerApi::rotate_at_rest(store.as_ref(), &token, &mut Meter::default())
                    .map(|e| e.to_be_bytes().to_vec())
                    .map_err(Failure::from)
            }
            other => Err(Failure::new(ErrorClass::Unsupported, format!("op {other:#04x}"))),
        }
    }
}

/// Serves one [`Node`], replying after the node's configured latency.
pub struct NodeService(pub Arc<Node>);

fn encode_node_response(resp: &NodeResponse) -> Vec<u8> {
    match resp {
        NodeResponse::Info { index, public } => Enc::default().u32(*index).raw(&curve::point_to_bytes(public)).0,
        NodeResponse::Dealt { commitment, sealed } => {
            let mut e = Enc::default()
                .raw(&curve::point_to_bytes(commitment))
                .u32(sealed.len() as u32);
            for (j, b) in sealed {
                e = e.u32(*j).bytes(&b.to_bytes());
            }
            e.0
        }
        NodeResponse::Finalized | NodeResponse::Stored => Vec::new(),
        NodeResponse::Share(s) => Enc::default()
            .u32(s.node_index)
            .raw(&s.share.to_bytes())
            .bytes(s.identity.verifier_url.as_bytes())
            .bytes(s.identity.verifier_id.as_bytes())
            .0,
        NodeResponse::Blob(b) => b.to_bytes(),
    }
}

fn decode_node_response(op: u8, payload: &[u8]) -> Result<NodeResponse, Failure> {
    let mut d = Dec(payload);
    let resp = match op {
        op::NODE_INFO => NodeResponse::Info {
            index: d.u32()?,
            public: d.point()?,
        },
        op::NODE_DEAL => {
            let commitment = d.point()?;
            let n = d.count(8)?;
            let mut sealed = Vec::with_capacity(n);
            for _ in 0..n {
                sealed.push((d.u32()?, d.sealed()?));
            }
            NodeResponse::Dealt { commitment, sealed }
        }
        op::NODE_FINALIZE => NodeResponse::Finalized,
        op::NODE_STORE_BLOB => NodeResponse::Stored,
        op::NODE_FETCH_SHARE => {
            let node_index = d.u32()?;
            let share = SharePoint::from_bytes(&Field::secp256k1_order(), d.take(64)?)?;
            let url = d.string()?;
            let id = d.string()?;
            if url.is_empty() || id.is_empty() {
                return Err(Failure::malformed("identity"));
            }
            NodeResponse::Share(NodeShare {
                node_index,
                share,
                identity: Identity::new(url, id),
            })
        }
        op::NODE_FETCH_BLOB => return Ok(NodeResponse::Blob(BlobShard::from_bytes(payload)?)),
        other => return Err(Failure::new(ErrorClass::Unsupported, format!("op {other:#04x}"))),
    };
    d.finish()?;
    Ok(resp)
}

fn encode_node_request(req: &NodeRequest) -> (u8, Vec<u8>) {
    match req {
        NodeRequest::Info => (op::NODE_INFO, Vec::new()),
        NodeRequest::DkgDeal { participants } => {
            let mut e = Enc::default().u32(participants.len() as u32);
            for (i, pk) in participants {
                e = e.u32(*i).raw(&curve::point_to_bytes(pk));
            }
            (op::NODE_DEAL, e.0)
        }
        NodeRequest::DkgFinalize { deals } => {
            let mut e = Enc::default().u32(deals.len() as u32);
            for (dealer, b) in deals {
                e = e.u32(*dealer).bytes(&b.to_bytes());
            }
            (op::NODE_FINALIZE, e.0)
        }
        NodeRequest::FetchShare => (op::NODE_FETCH_SHARE, Vec::new()),
        NodeRequest::StoreBlob(shard) => (op::NODE_STORE_BLOB, shard.to_bytes()),
        NodeRequest::FetchBlob => (op::NODE_FETCH_BLOB, Vec::new()),
    }
}

fn decode_node_request(op: u8, payload: &[u8]) -> Result<NodeRequest, Failure> {
    let mut d = Dec(payload);
    let req = match op {
        op::NODE_INFO => NodeRequest::Info,
        op::NODE_DEAL => {
            let n = d.count(4 + POINT_LEN)?;
            let mut participants = Vec::with_capacity(n);
            for _ in 0..n {
                participants.push((d.u32()?, d.point()?));
            }
            NodeRequest::DkgDeal { participants }
        }
        op::NODE_FINALIZE => {
            let n = d.count(8)?;
            let mut deals = Vec::with_capacity(n);
            for _ in 0..n {
                deals.push((d.u32()?, d.sealed()?));
            }
            NodeRequest::DkgFinalize { deals }
        }
        op::NODE_FETCH_SHARE => NodeRequest::FetchShare,
        op::NODE_STORE_BLOB => return Ok(NodeRequest::StoreBlob(BlobShard::from_bytes(payload)?)),
        op::NODE_FETCH_BLOB => NodeRequest::FetchBlob,
        other => return Err(Failure::new(ErrorClass::Unsupported, format!("op {other:#04x}"))),
    };
    d.finish()?;
    Ok(req)
}

impl WireService for NodeService {
    fn dispatch(&self, op: u8, token: &str, payload: &[u8]) -> Result<Vec<u8>, Failure> {
        let req = decode_node_request(op, payload)?;
        let token = parse_token(token)?;
        Ok(encode_node_response(&self.0.handle(&token, &req)?))
    }

    fn delay(&self) -> Duration {
        Duration::from_millis(self.0.latency_ms())
    }
}

/// One logical connection to a listener, reopened on demand.
pub struct WireClient {
    addr: SocketAddr,
    conn: Mutex<Option<TcpStream>>,
    next: AtomicU64,
}

impl std::fmt::Debug for WireClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("WireClient").field("addr", &self.addr).finish()
    }
}

impl WireClient {
    pub fn new(addr: SocketAddr) -> Self {
        WireClient {
            addr,
            conn: Mutex::new(None),
            next: AtomicU64::new(1),
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    fn connect(&self) -> io::Result<TcpStream> {
        let s = TcpStream::connect_timeout(&self.addr, Duration::from_secs(2))?;
        s.set_nodelay(true)?;
        s.set_read_timeout(Some(CLIENT_TIMEOUT))?;
        s.set_write_timeout(Some(CLIENT_TIMEOUT))?;
        Ok(s)
    }

    /// Sends one frame with an explicit version and returns the raw status
    /// and payload. The outer error is a transport failure.
    pub fn call_raw(&self, version: u8, op: u8, token: &str, payload: &[u8]) -> io::Result<(u8, Vec<u8>)> {
        let correlation = self.next.fetch_add(1, Ordering::Relaxed);
        let body = encode_request(version, op, correlation, token, payload);
        let mut guard = self.conn.lock().unwrap_or_else(|e| e.into_inner());
        let reused = guard.is_some();
        let attempt = |stream: &mut TcpStream| -> io::Result<Option<Vec<u8>>> {
            write_frame(stream, &body)?;
            read_frame(stream, None)
        };
        let mut stream = match guard.take() {
            Some(s) => s,
            None => self.connect()?,
        };
        let reply = match attempt(&mut stream) {
            Ok(Some(r)) => r,
            // The listener may have dropped an idle kept-alive connection;
            // try once more on a fresh one.
            Ok(None) | Err(_) if reused => {
                stream = self.connect()?;
                attempt(&mut stream)?.ok_or_else(|| io::Error::from(io::ErrorKind::UnexpectedEof))?
            }
            Ok(None) => return Err(io::ErrorKind::UnexpectedEof.into()),
            Err(e) => return Err(e),
        };
        *guard = Some(stream);
        drop(guard);

        let mut d = Dec(&reply);
        let bad = |_| io::Error::new(io::ErrorKind::InvalidData, "malformed response");
        let _version = d.u8().map_err(bad)?;
        let status = d.u8().map_err(bad)?;
        let echoed = d.u64().map_err(bad)?;
        let payload = d.bytes().map_err(bad)?.to_vec();
        d.finish().map_err(bad)?;
        if echoed != correlation && echoed != 0 {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "correlation id mismatch"));
        }
        Ok((status, payload))
    }

    /// Sends a current-version request; returns the payload or the failure
    /// the peer reported, plus the round-trip time.
    pub fn call(&self, op: u8, token: &str, payload: &[u8]) -> io::Result<(Result<Vec<u8>, Failure>, Duration)> {
        let start = Instant::now();
        let (status, payload) = self.call_raw(WIRE_VERSION, op, token, payload)?;
        let rtt = start.elapsed();
        if status == STATUS_OK {
            return Ok((Ok(payload), rtt));
        }
        let class = ErrorClass::from_code(status).unwrap_or(ErrorClass::Malformed);
        Ok((Err(Failure::new(class, String::from_utf8_lossy(&payload))), rtt))
    }
}

fn millis(d: Duration) -> u64 {
    d.as_millis() as u64
}

/// [`ServerApi`] over the wire.
#[derive(Debug)]
pub struct RemoteServer(WireClient);

impl RemoteServer {
    pub fn new(addr: SocketAddr) -> Self {
        RemoteServer(WireClient::new(addr))
    }

    fn call(&self, op: u8, token: &IdToken, payload: &[u8], meter: &mut Meter) -> Result<Vec<u8>, StorageError> {
        meter.server_calls += 1;
        let (result, rtt) = self
            .0
            .call(op, &token.serialize(), payload)
            .map_err(|e| StorageError::Unavailable(format!("server {}: {e}", self.0.addr())))?;
        meter.latency_ms += millis(rtt);
        result.map_err(|f| storage_error_from(f.class, &f.detail))
    }
}

impl ServerApi for RemoteServer {
    fn put(&self, token: &IdToken, records: &[(Slot, Vec<u8>)], meter: &mut Meter) -> Result<(), StorageError> {
        let mut e = Enc::default().u8(records.len() as u8);
        for (slot, bytes) in records {
            e = e.u8(slot.tag()).bytes(bytes);
        }
        self.call(op::SERVER_PUT, token, &e.0, meter).map(|_| ())
    }

    fn get(&self, token: &IdToken, slot: Slot, meter: &mut Meter) -> Result<Vec<u8>, StorageError> {
        self.call(op::SERVER_GET, token, &[slot.tag()], meter)
    }

    fn delete(&self, token: &IdToken, meter: &mut Meter) -> Result<(), StorageError> {
        self.call(op::SERVER_DELETE, token, &[], meter).map(|_| ())
    }

    fn entropy(&self, token: &IdToken, meter: &mut Meter) -> Result<[u8; 32], StorageError> {
        let bytes = self.call(op::SERVER_ENTROPY, token, &[], meter)?;
        bytes.try_into().map_err(|_| StorageError::Corrupt("entropy length".into()))
    }

    fn rotate_at_rest(&self, token: &IdToken, meter: &mut Meter) -> Result<u64, StorageError> {
        let bytes = self.call(op::SERVER_ROTATE, token, &[], meter)?;
        let mut d = Dec(&bytes);
        let epoch = d.u64().map_err(|_| StorageError::Corrupt("epoch".into()))?;
        d.finish().map_err(|_| StorageError::Corrupt("epoch".into()))?;
        Ok(epoch)
    }
}

/// [`NodeEndpoint`] over the wire; charges measured round-trip time.
#[derive(Debug)]
pub struct RemoteNode {
    index: u32,
    client: WireClient,
}

impl RemoteNode {
    pub fn new(index: u32, addr: SocketAddr) -> Self {
        RemoteNode {
            index,
            client: WireClient::new(addr),
        }
    }
}

impl NodeEndpoint for RemoteNode {
    fn index(&self) -> u32 {
        self.index
    }

    fn call(&self, token: &IdToken, req: &NodeRequest) -> Result<(NodeResponse, u64), NetworkError> {
        let (op, payload) = encode_node_request(req);
        let (result, rtt) = self
            .client
            .call(op, &token.serialize(), &payload)
            .map_err(|e| NetworkError::Unavailable(format!("node {} at {}: {e}", self.index, self.client.addr())))?;
        let payload = result.map_err(|f| network_error_from(f.class, &f.detail))?;
        let resp = decode_node_response(op, &payload).map_err(|f| network_error_from(f.class, &f.detail))?;
        Ok((resp, millis(rtt)))
    }
}
