#![allow(dead_code)]

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use tempfile::TempDir;

use keyshard::auth::{IdToken, Identity, MockIdp, KMS_AUDIENCE};
use keyshard::clock::ManualClock;
use keyshard::kms::Kms;
use keyshard::network::{NetworkClient, NetworkConfig, NodeEndpoint, NodeHealth, NodeNetwork};
use keyshard::storage::{ServerApi, ServerStore};
use keyshard::wire::{NodeService, RemoteNode, RemoteServer, ServerService, WireServer};

pub const NOW: u64 = 1_700_000_000;
pub const ISSUER: &str = "https://idp.example";

type Transport = (
    Vec<Arc<dyn NodeEndpoint>>,
    Arc<dyn ServerApi>,
    Vec<Option<WireServer>>,
    Option<WireServer>,
);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    InProcess,
    Wire,
}

/// Nodes, server and devices wired together, either directly or through
/// localhost listeners. The same seed gives the same state in both modes.
pub struct Harness {
    pub mode: Mode,
    pub net: NodeNetwork,
    pub server: Arc<ServerStore>,
    pub server_api: Arc<dyn ServerApi>,
    pub endpoints: Vec<Arc<dyn NodeEndpoint>>,
    pub client: NetworkClient,
    pub idp: MockIdp,
    pub clock: Arc<ManualClock>,
    pub rng: ChaCha20Rng,
    pub kms: Kms,
    pub dir: TempDir,
    node_listeners: Vec<Option<WireServer>>,
    server_listener: Option<WireServer>,
}

impl Harness {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self::with_config(mode, seed, 9, 5)
    }

    pub fn with_config(mode: Mode, seed: u64, nodes: usize, threshold: usize) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let idp = MockIdp::generate(&mut rng);
        let clock = Arc::new(ManualClock::new(NOW));
        let net = NodeNetwork::init(
            NetworkConfig::new(nodes, threshold).unwrap(),
            idp.verifier(),
            clock.clone(),
            &mut rng,
        )
        .unwrap();
        let server = Arc::new(ServerStore::in_memory(idp.verifier(), clock.clone(), &mut rng));
        let dir = tempfile::tempdir().unwrap();

        let (endpoints, server_api, node_listeners, server_listener): Transport = match mode {
            Mode::InProcess => (
                net.nodes().iter().map(|n| Arc::new(n.clone()) as Arc<dyn NodeEndpoint>).collect(),
                server.clone(),
                Vec::new(),
                None,
            ),
            Mode::Wire => {
                let listeners: Vec<WireServer> = net
                    .nodes()
                    .iter()
                    .map(|n| WireServer::bind("127.0.0.1:0", Arc::new(NodeService(n.clone()))).unwrap())
                    .collect();
                let endpoints = listeners
                    .iter()
                    .enumerate()
                    .map(|(i, l)| Arc::new(RemoteNode::new(i as u32 + 1, l.local_addr())) as Arc<dyn NodeEndpoint>)
                    .collect();
                let srv = WireServer::bind("127.0.0.1:0", Arc::new(ServerService(server.clone()))).unwrap();
                let api = Arc::new(RemoteServer::new(srv.local_addr()));
                (endpoints, api, listeners.into_iter().map(Some).collect(), Some(srv))
            }
        };
        let client = NetworkClient::new(endpoints.clone(), threshold).unwrap();
        let kms = Kms::new(client.clone(), server_api.clone(), dir.path().join("devices"));
        Harness {
            mode,
            net,
            server,
            server_api,
            endpoints,
            client,
            idp,
            clock,
            rng,
            kms,
            dir,
            node_listeners,
            server_listener,
        }
    }

    pub fn identity(user: &str) -> Identity {
        Identity::new(ISSUER, user)
    }

    pub fn token(&self, user: &str) -> IdToken {
        self.idp.issue_token(&Self::identity(user), KMS_AUDIENCE, 3600, NOW)
    }

    /// In wire mode the node's listener goes away; in-process the node
    /// stops answering.
    pub fn kill_node(&mut self, index: usize) {
        match self.mode {
            Mode::InProcess => self.net.mark_node(index, NodeHealth::Dead).unwrap(),
            Mode::Wire => {
                if let Some(l) = self.node_listeners[index - 1].take() {
                    l.shutdown();
                }
            }
        }
    }

    pub fn revive_node(&mut self, index: usize) {
        match self.mode {
            Mode::InProcess => self.net.mark_node(index, NodeHealth::Healthy).unwrap(),
            Mode::Wire => panic!("listeners are not restarted in wire mode"),
        }
    }

    pub fn kill_server(&mut self) {
        match self.mode {
            Mode::InProcess => self.server.set_available(false),
            Mode::Wire => {
                if let Some(l) = self.server_listener.take() {
                    l.shutdown();
                }
            }
        }
    }

    pub fn device_path(&self, device_id: &str) -> std::path::PathBuf {
        self.kms.device(device_id).path()
    }
}

/// All `k`-element index subsets of `0..n`, in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}
