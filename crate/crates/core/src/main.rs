use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use keyshard::auth::{IdToken, Identity, MockIdp, KMS_AUDIENCE};
use keyshard::clock::{Clock, ManualClock, SystemClock};
use keyshard::error::ErrorClass;
use keyshard::hd::DerivationPath;
use keyshard::kms::{Kms, Session};
use keyshard::meter::Meter;
use keyshard::network::{
    NetworkClient, NetworkConfig, Node, NodeEndpoint, NodeHealth, NodeNetwork, NodeSnapshot, DEFAULT_NODES,
    DEFAULT_THRESHOLD,
};
use keyshard::storage::{ServerApi, ServerStore};
use keyshard::wire::{self, Failure, NodeService, RemoteNode, RemoteServer, ServerService, WireServer, WireService};

const ISSUER: &str = "https://idp.keyshard.test";
const TOKEN_TTL: u64 = 3600;
const CONFIG_FILE: &str = "keyshard.conf";
const STATUS_FILE: &str = "status.json";

#[derive(Parser)]
#[command(name = "keyshard", version, about = "Threshold key backup across device, server and node network")]
struct Cli {
    /// State directory (config, node snapshots, server log, devices).
    #[arg(long, global = true, env = "KEYSHARD_STATE", default_value = "keyshard-state")]
    state_dir: PathBuf,
    /// Print reports as JSON.
    #[arg(long, global = true)]
    json: bool,
    /// Talk to a `serve-server` process instead of the local store.
    #[arg(long, global = true)]
    server_addr: Option<SocketAddr>,
    /// Comma-separated `serve-node` addresses, node 1 first.
    #[arg(long, global = true, value_delimiter = ',')]
    node_addrs: Vec<SocketAddr>,
    /// Audience claim put in issued tokens.
    #[arg(long, global = true, default_value = KMS_AUDIENCE)]
    audience: String,
    /// Issue tokens this many seconds in the past.
    #[arg(long, global = true, default_value_t = 0, hide = true)]
    token_age: u64,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct Who {
    #[arg(long)]
    user: String,
    #[arg(long, default_value = "device-1")]
    device: String,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Profile {
    Test,
    Production,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ServerState {
    Up,
    Down,
}

#[derive(Subcommand)]
enum Command {
    /// Create the state directory: nodes, server store and identity provider.
    InitNetwork {
        #[arg(long, default_value_t = DEFAULT_NODES)]
        nodes: usize,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: usize,
        #[arg(long, default_value_t = 0)]
        latency_ms: u64,
        #[arg(long, value_enum, default_value = "production")]
        profile: Profile,
        /// RNG seed (test profile only).
        #[arg(long)]
        seed: Option<u64>,
        /// Fixed unix time (test profile only).
        #[arg(long)]
        clock: Option<u64>,
        /// Replace an existing state directory.
        #[arg(long)]
        force: bool,
    },
    /// Create a wallet key and provision the device.
    Signup(Who),
    /// Rebuild the key from server and device.
    Signin(Who),
    /// Sign a 32-byte digest.
    Sign {
        #[command(flatten)]
        who: Who,
        #[arg(long)]
        digest_hex: String,
    },
    /// Replace the encryption keypair; key shares stay.
    Rotate(Who),
    /// Fresh polynomial for the same key.
    Reshare(Who),
    /// Provision a new device from network and server.
    RecoverDevice {
        #[arg(long)]
        user: String,
        #[arg(long)]
        new_device: String,
    },
    /// Server-free recovery from network and device.
    DisasterRecover {
        #[command(flatten)]
        who: Who,
        #[arg(long)]
        assume_server_dead: bool,
        #[arg(long)]
        reveal: bool,
    },
    /// Print the key as a 24-word phrase (fingerprint unless --reveal).
    ExportSeed {
        #[command(flatten)]
        who: Who,
        #[arg(long)]
        reveal: bool,
    },
    /// BIP-32 child key under the wallet seed.
    Derive {
        #[command(flatten)]
        who: Who,
        #[arg(long)]
        path: String,
        /// Also print the extended private key.
        #[arg(long)]
        reveal: bool,
    },
    /// Set a node's health.
    MarkNode {
        #[arg(long)]
        index: usize,
        #[arg(long, value_parser = parse_health)]
        state: NodeHealth,
    },
    /// Mark the server up or down.
    MarkServer {
        #[arg(long, value_enum)]
        state: ServerState,
    },
    /// Move the server's at-rest encryption to a new epoch.
    RotateSalt {
        #[arg(long, default_value = "operator")]
        user: String,
    },
    /// Counters, epochs and node health.
    Status,
    /// Serve one node over the wire protocol.
    ServeNode {
        #[arg(long)]
        index: usize,
        #[arg(long, default_value = "127.0.0.1:0")]
        addr: SocketAddr,
        #[arg(long)]
        latency_ms: Option<u64>,
    },
    /// Serve the server store over the wire protocol.
    ServeServer {
        #[arg(long, default_value = "127.0.0.1:0")]
        addr: SocketAddr,
    },
}

fn parse_health(s: &str) -> Result<NodeHealth, String> {
    s.parse()
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::new(ErrorClass::InvalidArgument, msg)
}

fn internal(e: impl Display) -> Failure {
    Failure::new(ErrorClass::Internal, e.to_string())
}

/// `key = value` lines; `#` starts a comment.
#[derive(Default)]
struct Config(BTreeMap<String, String>);

impl Config {
    fn path(state: &Path) -> PathBuf {
        state.join(CONFIG_FILE)
    }

    fn load(state: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(Self::path(state))
            .map_err(|_| usage(format!("no config in {}; run init-network first", state.display())))?;
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(format!("config line {}: expected key = value", n + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(Config(map))
    }

    fn save(&self, state: &Path) -> Result<(), Failure> {
        let mut out = String::new();
        for (k, v) in &self.0 {
            out.push_str(&format!("{k} = {v}\n"));
        }
        fs::write(Self::path(state), out).map_err(internal)
    }

    fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, Failure> {
        self.get(key)
            .map(|v| v.parse().map_err(|_| usage(format!("config {key}: bad number {v:?}"))))
            .transpose()
    }

    fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T, Failure> {
        self.num(key)?.ok_or_else(|| usage(format!("config is missing {key}")))
    }

    fn is_test(&self) -> bool {
        self.get("profile") == Some("test")
    }
}

#[derive(Default, Serialize, Deserialize)]
struct Status {
    invocations: u64,
    last_command: String,
    last_meter: Meter,
    server_epoch: Option<u64>,
}

impl Status {
    fn load(state: &Path) -> Status {
        fs::read(state.join(STATUS_FILE))
            .ok()
            .and_then(|b| serde_json::from_slice(&b).ok())
            .unwrap_or_default()
    }

    fn save(&self, state: &Path) -> Result<(), Failure> {
        fs::write(state.join(STATUS_FILE), serde_json::to_vec_pretty(self).map_err(internal)?).map_err(internal)
    }
}

/// Ordered report printed as `key=value` lines or one JSON object.
#[derive(Default)]
struct Report(Vec<(String, Value)>);

impl Report {
    fn add(&mut self, key: &str, value: impl Into<Value>) -> &mut Self {
        self.0.push((key.to_string(), value.into()));
        self
    }

    fn meter(&mut self, m: &Meter) -> &mut Self {
        self.add("node_fetches", m.node_fetches)
            .add("server_calls", m.server_calls)
            .add("latency_ms", m.latency_ms)
    }

    fn print(&self, json: bool) {
        let mut out = std::io::stdout().lock();
        if json {
            let obj: serde_json::Map<String, Value> = self.0.iter().cloned().collect();
            let _ = writeln!(out, "{}", Value::Object(obj));
        } else {
            for (k, v) in &self.0 {
                match v {
                    Value::String(s) => {
                        let _ = writeln!(out, "{k}={s}");
                    }
                    v => {
                        let _ = writeln!(out, "{k}={v}");
                    }
                }
            }
        }
    }
}

fn nodes_dir(state: &Path) -> PathBuf {
    state.join("nodes")
}

fn node_path(state: &Path, index: usize) -> PathBuf {
    nodes_dir(state).join(format!("{index}.json"))
}

fn load_snapshot(state: &Path, index: usize) -> Result<NodeSnapshot, Failure> {
    let bytes = fs::read(node_path(state, index)).map_err(|_| Failure::new(ErrorClass::BadIndex, format!("no node {index}")))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::new(ErrorClass::Malformed, format!("node {index}: {e}")))
}

fn save_snapshot(state: &Path, snap: &NodeSnapshot) -> Result<(), Failure> {
    fs::create_dir_all(nodes_dir(state)).map_err(internal)?;
    let tmp = node_path(state, snap.index as usize).with_extension("tmp");
    fs::write(&tmp, serde_json::to_vec_pretty(snap).map_err(internal)?).map_err(internal)?;
    fs::rename(&tmp, node_path(state, snap.index as usize)).map_err(internal)
}

/// Loaded configuration plus everything derived from it for one invocation.
struct Ctx {
    state: PathBuf,
    cfg: Config,
    clock: Arc<dyn Clock>,
    idp: MockIdp,
    rng: ChaCha20Rng,
    status: Status,
    audience: String,
    token_age: u64,
}

impl Ctx {
    fn open(cli: &Cli) -> Result<Ctx, Failure> {
        let cfg = Config::load(&cli.state_dir)?;
        let mut status = Status::load(&cli.state_dir);
        status.invocations += 1;
        let seed: Option<u64> = cfg.num("seed")?;
        let fixed_clock: Option<u64> = cfg.num("clock")?;
        if !cfg.is_test() && (seed.is_some() || fixed_clock.is_some()) {
            return Err(usage("seed and clock are only accepted in the test profile"));
        }
        let rng = match seed {
            Some(seed) => {
                let mut h = Sha256::new();
                h.update(b"keyshard/cli-rng/v1");
                h.update(seed.to_be_bytes());
                h.update(status.invocations.to_be_bytes());
                ChaCha20Rng::from_seed(h.finalize().into())
            }
            None => ChaCha20Rng::from_entropy(),
        };
        let clock: Arc<dyn Clock> = match fixed_clock {
            Some(t) => Arc::new(ManualClock::new(t)),
            None => Arc::new(SystemClock),
        };
        let secret: [u8; 32] = cfg
            .get("idp_secret")
            .and_then(|h| hex::decode(h).ok())
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| usage("config idp_secret missing or malformed"))?;
        Ok(Ctx {
            state: cli.state_dir.clone(),
            cfg,
            clock,
            idp: MockIdp::new(secret),
            rng,
            status,
            audience: cli.audience.clone(),
            token_age: cli.token_age,
        })
    }

    fn token(&self, user: &str) -> IdToken {
        let now = self.clock.now().saturating_sub(self.token_age);
        self.idp.issue_token(&Identity::new(ISSUER, user), &self.audience, TOKEN_TTL, now)
    }

    fn threshold(&self) -> Result<usize, Failure> {
        self.cfg.required("threshold")
    }

    fn node_count(&self) -> Result<usize, Failure> {
        self.cfg.required("nodes")
    }

    fn server_down(&self) -> bool {
        self.cfg.get("server_down") == Some("true")
    }

    fn restore_node(&mut self, index: usize) -> Result<Node, Failure> {
        let snap = load_snapshot(&self.state, index)?;
        Node::restore(&snap, self.threshold()?, self.idp.verifier(), self.clock.clone(), &mut self.rng).map_err(Failure::from)
    }

    fn open_server(&mut self) -> Result<ServerStore, Failure> {
        let store = ServerStore::open(&self.state.join("server.log"), self.idp.verifier(), self.clock.clone(), &mut self.rng)?;
        store.set_available(!self.server_down());
        Ok(store)
    }

    fn finish(&mut self, command: &str, meter: &Meter) -> Result<(), Failure> {
        self.status.last_command = command.to_string();
        self.status.last_meter = *meter;
        self.status.save(&self.state)
    }
}

/// Where the storages live for this invocation.
enum Backend {
    Local { net: NodeNetwork, server: Arc<ServerStore> },
    Wire { client: NetworkClient, server: Arc<RemoteServer> },
}

impl Backend {
    fn open(ctx: &mut Ctx, cli: &Cli) -> Result<Backend, Failure> {
        let server_addr = cli.server_addr.or(ctx.cfg.num("server_addr")?);
        let node_addrs = if cli.node_addrs.is_empty() {
            ctx.cfg
                .get("node_addrs")
                .map(|s| {
                    s.split(',')
                        .filter(|a| !a.trim().is_empty())
                        .map(|a| a.trim().parse().map_err(|_| usage(format!("bad node address {a:?}"))))
                        .collect::<Result<Vec<SocketAddr>, _>>()
                })
                .transpose()?
                .unwrap_or_default()
        } else {
            cli.node_addrs.clone()
        };
        match (server_addr, node_addrs.is_empty()) {
            (Some(addr), false) => {
                let endpoints = node_addrs
                    .iter()
                    .enumerate()
                    .map(|(i, a)| Arc::new(RemoteNode::new(i as u32 + 1, *a)) as Arc<dyn NodeEndpoint>)
                    .collect();
                Ok(Backend::Wire {
                    client: NetworkClient::new(endpoints, ctx.threshold()?)?,
                    server: Arc::new(RemoteServer::new(addr)),
                })
            }
            (None, true) => {
                let n = ctx.node_count()?;
                let nodes = (1..=n).map(|i| ctx.restore_node(i).map(Arc::new)).collect::<Result<_, _>>()?;
                let config = NetworkConfig {
                    nodes: n,
                    threshold: ctx.threshold()?,
                    latency_ms: ctx.cfg.num("latency_ms")?.unwrap_or(0),
                };
                Ok(Backend::Local {
                    net: NodeNetwork::from_nodes(config, nodes)?,
                    server: Arc::new(ctx.open_server()?),
                })
            }
            _ => Err(usage("wire mode needs both --server-addr and --node-addrs")),
        }
    }

    fn kms(&self, state: &Path) -> Kms {
        let devices = state.join("devices");
        match self {
            Backend::Local { net, server } => Kms::new(net.client(), server.clone(), devices),
            Backend::Wire { client, server } => Kms::new(client.clone(), server.clone(), devices),
        }
    }

    fn server(&self) -> Arc<dyn ServerApi> {
        match self {
            Backend::Local { server, .. } => server.clone(),
            Backend::Wire { server, .. } => server.clone(),
        }
    }

    /// Writes node state back after a local run.
    fn persist(&self, state: &Path) -> Result<(), Failure> {
        if let Backend::Local { net, .. } = self {
            for node in net.nodes() {
                save_snapshot(state, &node.snapshot())?;
            }
        }
        Ok(())
    }

    fn server_epoch(&self) -> Option<u64> {
        match self {
            Backend::Local { server, .. } => Some(server.epoch()),
            Backend::Wire { .. } => None,
        }
    }
}

fn fingerprint(secret: &str) -> String {
    hex::encode(&Sha256::digest(secret.as_bytes())[..8])
}

fn init_network(cli: &Cli, cmd: &Command) -> Result<Report, Failure> {
    let Command::InitNetwork {
        nodes,
        threshold,
        latency_ms,
        profile,
        seed,
        clock,
        force,
    } = cmd
    else {
        unreachable!()
    };
    if *profile == Profile::Production && (seed.is_some() || clock.is_some()) {
        return Err(usage("--seed and --clock require --profile test"));
    }
    let config = NetworkConfig {
        nodes: *nodes,
        threshold: *threshold,
        latency_ms: *latency_ms,
    };
    config.validate()?;
    let state = &cli.state_dir;
    if Config::path(state).exists() {
        if !force {
            return Err(usage(format!("{} already initialized; pass --force to replace", state.display())));
        }
        fs::remove_dir_all(state).map_err(internal)?;
    }
    fs::create_dir_all(state).map_err(internal)?;

    let mut rng = match seed {
        Some(s) => ChaCha20Rng::seed_from_u64(*s),
        None => ChaCha20Rng::from_entropy(),
    };
    let clock_src: Arc<dyn Clock> = match clock {
        Some(t) => Arc::new(ManualClock::new(*t)),
        None => Arc::new(SystemClock),
    };
    let idp = MockIdp::generate(&mut rng);
    let net = NodeNetwork::init(config, idp.verifier(), clock_src.clone(), &mut rng)?;
    for node in net.nodes() {
        save_snapshot(state, &node.snapshot())?;
    }
    let server = ServerStore::open(&state.join("server.log"), idp.verifier(), clock_src, &mut rng)?;

    let mut cfg = Config::default();
    cfg.set("profile", if *profile == Profile::Test { "test" } else { "production" });
    cfg.set("nodes", nodes);
    cfg.set("threshold", threshold);
    cfg.set("latency_ms", latency_ms);
    cfg.set("idp_secret", hex::encode(idp.secret()));
    cfg.set("server_down", false);
    if let Some(s) = seed {
        cfg.set("seed", s);
    }
    if let Some(t) = clock {
        cfg.set("clock", t);
    }
    cfg.save(state)?;
    Status {
        server_epoch: Some(server.epoch()),
        last_command: "init-network".into(),
        ..Status::default()
    }
    .save(state)?;

    let mut r = Report::default();
    r.add("state", state.display().to_string())
        .add("nodes", *nodes)
        .add("threshold", *threshold)
        .add("latency_ms", *latency_ms);
    Ok(r)
}

fn mark_node(cli: &Cli, index: usize, health: NodeHealth) -> Result<Report, Failure> {
    let ctx = Ctx::open(cli)?;
    if index == 0 || index > ctx.node_count()? {
        return Err(Failure::new(ErrorClass::BadIndex, format!("no node {index}")));
    }
    let mut snap = load_snapshot(&ctx.state, index)?;
    snap.health = health;
    save_snapshot(&ctx.state, &snap)?;
    let mut r = Report::default();
    r.add("node", index).add("health", health_name(health));
    Ok(r)
}

fn health_name(h: NodeHealth) -> &'static str {
    match h {
        NodeHealth::Healthy => "healthy",
        NodeHealth::Dead => "dead",
        NodeHealth::Compromised => "compromised",
    }
}

fn status(cli: &Cli) -> Result<Report, Failure> {
    let ctx = Ctx::open(cli)?;
    let mut r = Report::default();
    r.add("profile", ctx.cfg.get("profile").unwrap_or("production").to_string())
        .add("nodes", ctx.node_count()?)
        .add("threshold", ctx.threshold()?)
        .add("last_command", ctx.status.last_command.clone())
        .meter(&ctx.status.last_meter);
    match ctx.status.server_epoch {
        Some(e) => r.add("server_epoch", e),
        None => r.add("server_epoch", "unknown"),
    };
    r.add("server", if ctx.server_down() { "down" } else { "up" });
    let health: Vec<String> = (1..=ctx.node_count()?)
        .map(|i| load_snapshot(&ctx.state, i).map(|s| format!("{i}:{}", health_name(s.health))))
        .collect::<Result<_, _>>()?;
    r.add("node_health", health.join(","));
    Ok(r)
}

/// Node service that writes its snapshot back after every state change.
struct PersistentNode {
    inner: NodeService,
    state: PathBuf,
    lock: Mutex<()>,
}

impl WireService for PersistentNode {
    fn dispatch(&self, op: u8, token: &str, payload: &[u8]) -> Result<Vec<u8>, Failure> {
        let out = self.inner.dispatch(op, token, payload)?;
        if matches!(op, wire::op::NODE_DEAL | wire::op::NODE_FINALIZE | wire::op::NODE_STORE_BLOB) {
            let _g = self.lock.lock().unwrap_or_else(|e| e.into_inner());
            save_snapshot(&self.state, &self.inner.0.snapshot())?;
        }
        Ok(out)
    }

    fn delay(&self) -> std::time::Duration {
        self.inner.delay()
    }
}

fn announce(server: &WireServer) {
    println!("listening {}", server.local_addr());
    let _ = std::io::stdout().flush();
}

fn serve_node(cli: &Cli, index: usize, addr: SocketAddr, latency_ms: Option<u64>) -> Result<Report, Failure> {
    let mut ctx = Ctx::open(cli)?;
    let node = Arc::new(ctx.restore_node(index)?);
    if let Some(ms) = latency_ms {
        node.set_latency_ms(ms);
    }
    let service = PersistentNode {
        inner: NodeService(node),
        state: ctx.state.clone(),
        lock: Mutex::new(()),
    };
    let server = WireServer::bind(addr, Arc::new(service)).map_err(|e| Failure::new(ErrorClass::Unavailable, format!("bind {addr}: {e}")))?;
    announce(&server);
    server.wait();
    Ok(Report::default())
}

fn serve_server(cli: &Cli, addr: SocketAddr) -> Result<Report, Failure> {
    let mut ctx = Ctx::open(cli)?;
    let store = Arc::new(ctx.open_server()?);
    let server = WireServer::bind(addr, Arc::new(ServerService(store))).map_err(|e| Failure::new(ErrorClass::Unavailable, format!("bind {addr}: {e}")))?;
    announce(&server);
    server.wait();
    Ok(Report::default())
}

/// Runs one key-management command against the configured backend.
fn run_flow(cli: &Cli) -> Result<Report, Failure> {
    let mut ctx = Ctx::open(cli)?;
    let backend = Backend::open(&mut ctx, cli)?;
    let kms = backend.kms(&ctx.state);
    let mut r = Report::default();

    let (name, mut session) = match &cli.cmd {
        Command::Signup(w) | Command::Signin(w) | Command::Rotate(w) | Command::Reshare(w) => {
            (command_name(&cli.cmd), Session::new(&w.device))
        }
        Command::Sign { who, .. }
        | Command::DisasterRecover { who, .. }
        | Command::ExportSeed { who, .. }
        | Command::Derive { who, .. } => (command_name(&cli.cmd), Session::new(&who.device)),
        Command::RecoverDevice { .. } | Command::RotateSalt { .. } => (command_name(&cli.cmd), Session::new("")),
        _ => unreachable!("not a flow command"),
    };

    let result: Result<(), Failure> = (|| {
        match &cli.cmd {
            Command::Signup(w) => {
                let public = kms.signup(&mut session, &ctx.token(&w.user), &mut ctx.rng)?;
                r.add("public_key", hex::encode(keyshard::curve::point_to_bytes(&public)));
            }
            Command::Signin(w) => {
                let key = kms.signin(&mut session, &ctx.token(&w.user))?;
                r.add("public_key", hex::encode(key.public_bytes()));
            }
            Command::Sign { who, digest_hex } => {
                let digest = hex::decode(digest_hex.trim()).map_err(|_| usage("--digest-hex is not hex"))?;
                if digest.len() != 32 {
                    return Err(usage("--digest-hex must be 32 bytes"));
                }
                let key = kms.signin(&mut session, &ctx.token(&who.user))?;
                let sig = key.sign(&digest)?;
                r.add("public_key", hex::encode(key.public_bytes()))
                    .add("signature", hex::encode(sig.to_bytes()));
            }
            Command::Rotate(w) => {
                let generation = kms.rotate_ekp(&mut session, &ctx.token(&w.user), &mut ctx.rng)?;
                r.add("ekp_generation", generation);
            }
            Command::Reshare(w) => {
                let generation = kms.reshare_key(&mut session, &ctx.token(&w.user), &mut ctx.rng)?;
                r.add("ekp_generation", generation);
            }
            Command::RecoverDevice { user, new_device } => {
                let public = kms.recover_device(&mut session, &ctx.token(user), new_device, &mut ctx.rng)?;
                r.add("public_key", hex::encode(keyshard::curve::point_to_bytes(&public)))
                    .add("device", new_device.clone());
            }
            Command::DisasterRecover {
                who,
                assume_server_dead,
                reveal,
            } => {
                if !assume_server_dead && !ctx.server_down() {
                    return Err(usage(
                        "server is not marked down; run mark-server --state down or pass --assume-server-dead",
                    ));
                }
                let words = kms.disaster_recover(&mut session, &ctx.token(&who.user))?;
                phrase(&mut r, &words, *reveal);
            }
            Command::ExportSeed { who, reveal } => {
                let words = kms.export_seed_phrase(&mut session, &ctx.token(&who.user))?;
                phrase(&mut r, &words, *reveal);
            }
            Command::Derive { who, path, reveal } => {
                let path: DerivationPath = path.parse()?;
                let key = kms.derive_chain_key(&mut session, &ctx.token(&who.user), &path)?;
                r.add("path", path.to_string())
                    .add("public_key", hex::encode(key.public_bytes()));
                if *reveal {
                    r.add("xprv", key.to_xprv());
                }
            }
            Command::RotateSalt { user } => {
                let epoch = backend.server().rotate_at_rest(&ctx.token(user), &mut session.meter)?;
                r.add("server_epoch", epoch);
                ctx.status.server_epoch = Some(epoch);
            }
            _ => unreachable!(),
        }
        Ok(())
    })();

    // Node state changes even when a flow fails part-way (e.g. dealt
    // postboxes), so it is written back either way.
    backend.persist(&ctx.state)?;
    if let Some(e) = backend.server_epoch() {
        ctx.status.server_epoch = Some(e);
    }
    let meter = session.meter;
    ctx.finish(name, &meter)?;
    result?;
    r.meter(&meter);
    Ok(r)
}

fn phrase(r: &mut Report, words: &str, reveal: bool) {
    if reveal {
        r.add("mnemonic", words.to_string());
    } else {
        r.add("mnemonic_fingerprint", fingerprint(words));
    }
}

fn command_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::InitNetwork { .. } => "init-network",
        Command::Signup(_) => "signup",
        Command::Signin(_) => "signin",
        Command::Sign { .. } => "sign",
        Command::Rotate(_) => "rotate",
        Command::Reshare(_) => "reshare",
        Command::RecoverDevice { .. } => "recover-device",
        Command::DisasterRecover { .. } => "disaster-recover",
        Command::ExportSeed { .. } => "export-seed",
        Command::Derive { .. } => "derive",
        Command::MarkNode { .. } => "mark-node",
        Command::MarkServer { .. } => "mark-server",
        Command::RotateSalt { .. } => "rotate-salt",
        Command::Status => "status",
        Command::ServeNode { .. } => "serve-node",
        Command::ServeServer { .. } => "serve-server",
    }
}

fn run(cli: &Cli) -> Result<Report, Failure> {
    match &cli.cmd {
        Command::InitNetwork { .. } => init_network(cli, &cli.cmd),
        Command::MarkNode { index, state } => mark_node(cli, *index, *state),
        Command::MarkServer { state } => {
            let mut cfg = Config::load(&cli.state_dir)?;
            cfg.set("server_down", *state == ServerState::Down);
            cfg.save(&cli.state_dir)?;
            let mut r = Report::default();
            r.add("server", if *state == ServerState::Down { "down" } else { "up" });
            Ok(r)
        }
        Command::Status => status(cli),
        Command::ServeNode { index, addr, latency_ms } => serve_node(cli, *index, *addr, *latency_ms),
        Command::ServeServer { addr } => serve_server(cli, *addr),
        _ => run_flow(cli),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(report) => {
            report.print(cli.json);
            ExitCode::SUCCESS
        }
        Err(f) => {
            let code = f.class.exit_code();
            if cli.json {
                eprintln!("{}", json!({"error": f.class.name(), "exit": code, "detail": f.detail}));
            } else {
                eprintln!("error class={} exit={} detail={:?}", f.class.name(), code, f.detail);
            }
            ExitCode::from(code as u8)
        }
    }
}
