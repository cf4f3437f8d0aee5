//! Multi-process training over a small message-passing layer.
//!
//! Every node loads the full dataset and owns a subset of the classes. LLW
//! needs only a global sum per `w̄` refresh. WW moves whole class bundles:
//! nodes are paired round-robin, the higher node ships its weight vectors
//! (plus the dual variables the partner will touch) to the lower node, which
//! runs every cross pair and sends the vectors back.
//!
//! Frames on the wire are `[u32 tag][u64 payload length][payload]`, all
//! little-endian.

use std::io::{BufReader, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::time::{Duration, Instant};

use crate::dataset::{EpochShuffler, SparseDataset};
use crate::error::{Error, Result};
use crate::llw::{self, LlwState};
use crate::model::WeightMatrix;
use crate::sched::{build_schedule, chunk_classes, two_level_schedule};
use crate::solver::{EpochStats, Reducer, SolverConfig, Termination, TrainStats};
use crate::ww::{self, PairCtx, TaskResult, WwColumn, WwState};

pub const PROTOCOL_VERSION: u32 = 1;

const TAG_HANDSHAKE: u32 = 1;
const TAG_SPARSE_WEIGHT: u32 = 2;
const TAG_ALLREDUCE: u32 = 3;
const TAG_BARRIER: u32 = 4;
const TAG_SHUTDOWN: u32 = 5;

/// Dual variable carried along with a weight vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaEntry {
    pub sample: u32,
    pub value: f64,
    pub last_update: u32,
}

/// Non-zero entries of one class weight vector, with 1-based indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseWeightMessage {
    pub class_id: u32,
    pub entries: Vec<(u32, f64)>,
    pub alpha: Vec<AlphaEntry>,
}

impl SparseWeightMessage {
    pub fn from_dense(class_id: usize, w: &[f64]) -> Self {
        Self {
            class_id: class_id as u32,
            entries: w
                .iter()
                .enumerate()
                .filter(|(_, &v)| v != 0.0)
                .map(|(j, &v)| (j as u32 + 1, v))
                .collect(),
            alpha: Vec::new(),
        }
    }

    pub fn to_dense(&self, dim: usize) -> Result<Vec<f64>> {
        let mut w = vec![0.0; dim];
        for &(j, v) in &self.entries {
            let slot = w
                .get_mut(j as usize - 1)
                .ok_or_else(|| Error::Protocol(format!("feature {j} beyond dimension {dim}")))?;
            *slot = v;
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Handshake { version: u32, dataset_hash: [u8; 8], node_id: u32 },
    SparseWeight(SparseWeightMessage),
    AllreduceChunk(Vec<f64>),
    BarrierToken,
    Shutdown,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

/// Encodes one frame.
pub fn encode_frame(msg: &Message) -> Vec<u8> {
    let mut payload = Vec::new();
    let tag = match msg {
        Message::Handshake { version, dataset_hash, node_id } => {
            put_u32(&mut payload, *version);
            payload.extend_from_slice(dataset_hash);
            put_u32(&mut payload, *node_id);
            TAG_HANDSHAKE
        }
        Message::SparseWeight(m) => {
            payload.reserve(16 + 12 * m.entries.len() + 16 * m.alpha.len());
            put_u32(&mut payload, m.class_id);
            put_u64(&mut payload, m.entries.len() as u64);
            for &(j, v) in &m.entries {
                put_u32(&mut payload, j);
                put_f64(&mut payload, v);
            }
            put_u64(&mut payload, m.alpha.len() as u64);
            for a in &m.alpha {
                put_u32(&mut payload, a.sample);
                put_f64(&mut payload, a.value);
                put_u32(&mut payload, a.last_update);
            }
            TAG_SPARSE_WEIGHT
        }
        Message::AllreduceChunk(values) => {
            payload.reserve(8 * values.len());
            for &v in values {
                put_f64(&mut payload, v);
            }
            TAG_ALLREDUCE
        }
        Message::BarrierToken => TAG_BARRIER,
        Message::Shutdown => TAG_SHUTDOWN,
    };
    let mut frame = Vec::with_capacity(12 + payload.len());
    put_u32(&mut frame, tag);
    put_u64(&mut frame, payload.len() as u64);
    frame.extend_from_slice(&payload);
    frame
}

struct Cursor<'a> {
    buf: &'a [u8],
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Protocol("payload shorter than its contents".into()));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self, item_size: usize) -> Result<usize> {
        let n = self.u64()?;
        if n > (self.buf.len() / item_size) as u64 {
            return Err(Error::Protocol(format!("count {n} exceeds the payload")));
        }
        Ok(n as usize)
    }

    fn finish(&self) -> Result<()> {
        if self.buf.is_empty() {
            Ok(())
        } else {
            Err(Error::Protocol(format!("{} trailing payload bytes", self.buf.len())))
        }
    }
}

fn decode_payload(tag: u32, payload: &[u8]) -> Result<Message> {
    let mut cur = Cursor { buf: payload };
    let msg = match tag {
        TAG_HANDSHAKE => {
            let version = cur.u32()?;
            let dataset_hash: [u8; 8] = cur.take(8)?.try_into().unwrap();
            let node_id = cur.u32()?;
            Message::Handshake { version, dataset_hash, node_id }
        }
        TAG_SPARSE_WEIGHT => {
            let class_id = cur.u32()?;
            let nnz = cur.count(12)?;
            let mut entries = Vec::with_capacity(nnz);
            for _ in 0..nnz {
                let j = cur.u32()?;
                let v = cur.f64()?;
                if j == 0 || entries.last().is_some_and(|&(last, _)| j <= last) {
                    return Err(Error::Protocol("weight indices must be 1-based and increasing".into()));
                }
                if v == 0.0 || !v.is_finite() {
                    return Err(Error::Protocol(format!("bad weight value {v}")));
                }
                entries.push((j, v));
            }
            let m = cur.count(16)?;
            let mut alpha = Vec::with_capacity(m);
            for _ in 0..m {
                alpha.push(AlphaEntry {
                    sample: cur.u32()?,
                    value: cur.f64()?,
                    last_update: cur.u32()?,
                });
            }
            Message::SparseWeight(SparseWeightMessage { class_id, entries, alpha })
        }
        TAG_ALLREDUCE => {
            if payload.len() % 8 != 0 {
                return Err(Error::Protocol("allreduce payload is not a whole number of f64".into()));
            }
            let values = payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            cur.buf = &[];
            Message::AllreduceChunk(values)
        }
        TAG_BARRIER => Message::BarrierToken,
        TAG_SHUTDOWN => Message::Shutdown,
        other => return Err(Error::Protocol(format!("unknown message tag {other}"))),
    };
    cur.finish()?;
    Ok(msg)
}

/// Decodes one frame from a byte slice that holds exactly that frame.
pub fn decode_frame(bytes: &[u8]) -> Result<Message> {
    let mut input = bytes;
    let msg = read_frame(&mut input)?;
    if !input.is_empty() {
        return Err(Error::Protocol("bytes after the frame".into()));
    }
    Ok(msg)
}

/// Reads one frame from a stream.
pub fn read_frame<R: Read>(input: &mut R) -> Result<Message> {
    let mut header = [0u8; 12];
    input.read_exact(&mut header).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated,
        _ => Error::Io(e),
    })?;
    let tag = u32::from_le_bytes(header[..4].try_into().unwrap());
    let len = u64::from_le_bytes(header[4..].try_into().unwrap());
    let mut payload = Vec::new();
    input.take(len).read_to_end(&mut payload)?;
    if (payload.len() as u64) < len {
        return Err(Error::Truncated);
    }
    decode_payload(tag, &payload)
}

/// Point-to-point and collective communication between training nodes.
///
/// Messages between an ordered pair of nodes arrive in order, exactly once.
/// Collectives go through node 0, which combines contributions in ascending
/// node order, so every node sees bit-identical results.
pub trait Transport {
    fn node_id(&self) -> usize;
    fn num_nodes(&self) -> usize;
    fn send(&mut self, peer: usize, msg: &Message) -> Result<()>;
    fn receive(&mut self, peer: usize) -> Result<Message>;

    fn barrier(&mut self) -> Result<()> {
        let (me, n) = (self.node_id(), self.num_nodes());
        if me == 0 {
            for peer in 1..n {
                expect_barrier(self.receive(peer)?, peer)?;
            }
            for peer in 1..n {
                self.send(peer, &Message::BarrierToken)?;
            }
        } else {
            self.send(0, &Message::BarrierToken)?;
            expect_barrier(self.receive(0)?, 0)?;
        }
        Ok(())
    }

    fn allreduce_sum(&mut self, values: Vec<f64>) -> Result<Vec<f64>> {
        let (me, n) = (self.node_id(), self.num_nodes());
        if me == 0 {
            let mut total = values;
            for peer in 1..n {
                let part = expect_chunk(self.receive(peer)?, peer)?;
                if part.len() != total.len() {
                    return Err(Error::Protocol(format!(
                        "node {peer} contributed {} values, expected {}",
                        part.len(),
                        total.len()
                    )));
                }
                for (t, p) in total.iter_mut().zip(&part) {
                    *t += p;
                }
            }
            let msg = Message::AllreduceChunk(total);
            for peer in 1..n {
                self.send(peer, &msg)?;
            }
            match msg {
                Message::AllreduceChunk(total) => Ok(total),
                _ => unreachable!(),
            }
        } else {
            self.send(0, &Message::AllreduceChunk(values))?;
            expect_chunk(self.receive(0)?, 0)
        }
    }
}

fn unexpected(msg: &Message, peer: usize, wanted: &str) -> Error {
    match msg {
        Message::Shutdown => Error::PeerDisconnected {
            peer,
            msg: "peer shut down".into(),
        },
        other => Error::Protocol(format!("expected {wanted} from node {peer}, got {other:?}")),
    }
}

fn expect_barrier(msg: Message, peer: usize) -> Result<()> {
    match msg {
        Message::BarrierToken => Ok(()),
        other => Err(unexpected(&other, peer, "a barrier token")),
    }
}

fn expect_chunk(msg: Message, peer: usize) -> Result<Vec<f64>> {
    match msg {
        Message::AllreduceChunk(v) => Ok(v),
        other => Err(unexpected(&other, peer, "an allreduce chunk")),
    }
}

fn expect_weights(msg: Message, peer: usize) -> Result<SparseWeightMessage> {
    match msg {
        Message::SparseWeight(m) => Ok(m),
        other => Err(unexpected(&other, peer, "a weight message")),
    }
}

/// Nodes living in one process, connected by channels. Frames are encoded
/// exactly as on the wire.
pub struct InProcTransport {
    node_id: usize,
    senders: Vec<Option<Sender<Vec<u8>>>>,
    receivers: Vec<Option<Receiver<Vec<u8>>>>,
}

impl InProcTransport {
    /// A fully connected group of `n` nodes; element `k` is node `k`.
    pub fn mesh(n: usize) -> Vec<InProcTransport> {
        let mut nodes: Vec<InProcTransport> = (0..n)
            .map(|k| InProcTransport {
                node_id: k,
                senders: (0..n).map(|_| None).collect(),
                receivers: (0..n).map(|_| None).collect(),
            })
            .collect();
        for from in 0..n {
            for to in 0..n {
                if from != to {
                    let (tx, rx) = channel();
                    nodes[from].senders[to] = Some(tx);
                    nodes[to].receivers[from] = Some(rx);
                }
            }
        }
        nodes
    }

    fn check_peer(&self, peer: usize) -> Result<()> {
        if peer == self.node_id || peer >= self.senders.len() {
            return Err(Error::InvalidArgument(format!("no peer {peer}")));
        }
        Ok(())
    }
}

impl Transport for InProcTransport {
    fn node_id(&self) -> usize {
        self.node_id
    }

    fn num_nodes(&self) -> usize {
        self.senders.len()
    }

    fn send(&mut self, peer: usize, msg: &Message) -> Result<()> {
        self.check_peer(peer)?;
        self.senders[peer]
            .as_ref()
            .unwrap()
            .send(encode_frame(msg))
            .map_err(|_| Error::PeerDisconnected {
                peer,
                msg: "channel closed".into(),
            })
    }

    fn receive(&mut self, peer: usize) -> Result<Message> {
        self.check_peer(peer)?;
        let frame = self.receivers[peer]
            .as_ref()
            .unwrap()
            .recv()
            .map_err(|_| Error::PeerDisconnected {
                peer,
                msg: "channel closed".into(),
            })?;
        decode_frame(&frame)
    }
}

struct Link {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

/// Full-mesh TCP transport. Node `k` listens on `addrs[k]`, connects to every
/// lower node and accepts every higher one; each connection starts with a
/// handshake that checks the protocol version and the dataset hash.
pub struct TcpTransport {
    node_id: usize,
    links: Vec<Option<Link>>,
}

impl TcpTransport {
    /// Binds `addrs[node_id]` and joins the group.
    pub fn connect(node_id: usize, addrs: &[String], dataset_hash: [u8; 8], timeout: Duration) -> Result<Self> {
        let me = addrs
            .get(node_id)
            .ok_or_else(|| Error::InvalidArgument(format!("rank {node_id} has no address")))?;
        let listener = TcpListener::bind(me.as_str())?;
        Self::with_listener(node_id, listener, addrs, dataset_hash, timeout)
    }

    /// Joins the group using an already bound listener for this node.
    pub fn with_listener(
        node_id: usize,
        listener: TcpListener,
        addrs: &[String],
        dataset_hash: [u8; 8],
        timeout: Duration,
    ) -> Result<Self> {
        let n = addrs.len();
        if node_id >= n {
            return Err(Error::InvalidArgument(format!("rank {node_id} outside {n} nodes")));
        }
        let deadline = Instant::now() + timeout;
        let hello = Message::Handshake {
            version: PROTOCOL_VERSION,
            dataset_hash,
            node_id: node_id as u32,
        };
        let mut links: Vec<Option<Link>> = (0..n).map(|_| None).collect();

        for (peer, addr) in addrs.iter().enumerate().take(node_id) {
            let stream = connect_retry(addr, deadline)?;
            let mut link = Link::new(stream)?;
            link.write(&hello)?;
            let id = check_handshake(link.read(peer)?, dataset_hash)?;
            if id != peer {
                return Err(Error::Handshake(format!("{addr} answered as node {id}, expected {peer}")));
            }
            links[peer] = Some(link);
        }

        listener.set_nonblocking(true)?;
        let mut pending = n - node_id - 1;
        while pending > 0 {
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    let mut link = Link::new(stream)?;
                    let msg = link.read(usize::MAX)?;
                    // answer before judging, so the peer sees the mismatch too
                    link.write(&hello)?;
                    let id = check_handshake(msg, dataset_hash)?;
                    if id <= node_id || id >= n || links[id].is_some() {
                        return Err(Error::Handshake(format!("unexpected connection from node {id}")));
                    }
                    links[id] = Some(link);
                    pending -= 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() > deadline {
                        return Err(Error::Handshake(format!("timed out waiting for {pending} peers")));
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => return Err(e.into()),
            }
        }
        log::info!("node {node_id} connected to {} peers", n - 1);
        Ok(Self { node_id, links })
    }

    fn link(&mut self, peer: usize) -> Result<&mut Link> {
        self.links
            .get_mut(peer)
            .and_then(Option::as_mut)
            .ok_or_else(|| Error::InvalidArgument(format!("no peer {peer}")))
    }
}

fn connect_retry(addr: &str, deadline: Instant) -> Result<TcpStream> {
    loop {
        let attempt = addr
            .to_socket_addrs()
            .map_err(Error::Io)
            .and_then(|mut it| it.next().ok_or_else(|| Error::InvalidArgument(format!("cannot resolve {addr}"))))
            .and_then(|sa| TcpStream::connect(sa).map_err(Error::Io));
        match attempt {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() > deadline => {
                return Err(Error::Handshake(format!("cannot reach {addr}: {e}")));
            }
            Err(_) => std::thread::sleep(Duration::from_millis(20)),
        }
    }
}

fn check_handshake(msg: Message, hash: [u8; 8]) -> Result<usize> {
    match msg {
        Message::Handshake { version, dataset_hash, node_id } => {
            if version != PROTOCOL_VERSION {
                return Err(Error::Handshake(format!(
                    "node {node_id} speaks protocol {version}, expected {PROTOCOL_VERSION}"
                )));
            }
            if dataset_hash != hash {
                return Err(Error::Handshake(format!("node {node_id} loaded a different dataset")));
            }
            Ok(node_id as usize)
        }
        other => Err(Error::Handshake(format!("expected a handshake, got {other:?}"))),
    }
}

impl Link {
    fn new(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    fn write(&mut self, msg: &Message) -> Result<()> {
        self.writer.write_all(&encode_frame(msg))?;
        Ok(())
    }

    fn read(&mut self, peer: usize) -> Result<Message> {
        read_frame(&mut self.reader).map_err(|e| match e {
            Error::Truncated => Error::PeerDisconnected {
                peer,
                msg: "connection closed".into(),
            },
            Error::Io(io) => Error::PeerDisconnected { peer, msg: io.to_string() },
            other => other,
        })
    }
}

impl Transport for TcpTransport {
    fn node_id(&self) -> usize {
        self.node_id
    }

    fn num_nodes(&self) -> usize {
        self.links.len()
    }

    fn send(&mut self, peer: usize, msg: &Message) -> Result<()> {
        self.link(peer)?.write(msg).map_err(|e| Error::PeerDisconnected { peer, msg: e.to_string() })
    }

    fn receive(&mut self, peer: usize) -> Result<Message> {
        self.link(peer)?.read(peer)
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for link in self.links.iter_mut().flatten() {
            let _ = link.write(&Message::Shutdown);
        }
    }
}

/// Sums through [`Transport::allreduce_sum`].
pub struct TransportReducer<'a, T: Transport + ?Sized> {
    pub transport: &'a mut T,
}

impl<T: Transport + ?Sized> Reducer for TransportReducer<'_, T> {
    fn sum(&mut self, values: Vec<f64>) -> Result<Vec<f64>> {
        self.transport.allreduce_sum(values)
    }
}

/// Result of a distributed run as seen by one node.
#[derive(Debug, Clone)]
pub struct DistOutcome {
    /// The assembled model; only node 0 has it.
    pub model: Option<WeightMatrix>,
    pub stats: TrainStats,
    /// Percentage of non-zero dual variables over all nodes.
    pub alpha_density: f64,
    /// Classes owned by this node.
    pub owned_classes: Vec<usize>,
}

/// Refuses to train unless every node loaded the same data.
fn check_same_dataset<T: Transport + ?Sized>(ds: &SparseDataset, transport: &mut T) -> Result<()> {
    let n = transport.num_nodes();
    let mut slots = vec![0.0; 8 * n];
    for (k, b) in ds.content_hash().iter().enumerate() {
        slots[8 * transport.node_id() + k] = f64::from(*b);
    }
    let all = transport.allreduce_sum(slots)?;
    for peer in 0..n {
        if all[8 * peer..8 * peer + 8] != all[..8] {
            return Err(Error::Handshake(format!("node {peer} loaded a different dataset")));
        }
    }
    Ok(())
}

/// Class ownership per node: one balanced bundle per node, possibly empty.
pub fn node_bundles(ds: &SparseDataset, num_nodes: usize) -> Vec<Vec<usize>> {
    let sizes = ds.class_sizes();
    let mut bundles = chunk_classes(ds.num_classes(), num_nodes, Some(&sizes));
    bundles.resize(num_nodes, Vec::new());
    bundles
}

/// Collects every class weight vector at node 0.
fn gather_model<T: Transport + ?Sized>(
    transport: &mut T,
    ds: &SparseDataset,
    owned: &[(usize, Vec<f64>)],
    bundles: &[Vec<usize>],
) -> Result<Option<WeightMatrix>> {
    let me = transport.node_id();
    if me != 0 {
        for (class, w) in owned {
            transport.send(0, &Message::SparseWeight(SparseWeightMessage::from_dense(*class, w)))?;
        }
        return Ok(None);
    }
    let mut model = WeightMatrix::zeros(ds.dim(), ds.label_names().to_vec());
    for (class, w) in owned {
        model.class_weights_mut(*class).copy_from_slice(w);
    }
    for (peer, bundle) in bundles.iter().enumerate().skip(1) {
        for _ in bundle {
            let msg = expect_weights(transport.receive(peer)?, peer)?;
            let class = msg.class_id as usize;
            if !bundle.contains(&class) {
                return Err(Error::Protocol(format!("node {peer} sent class {class} it does not own")));
            }
            model.class_weights_mut(class).copy_from_slice(&msg.to_dense(ds.dim())?);
        }
    }
    Ok(Some(model))
}

fn alpha_density_global<T: Transport + ?Sized>(transport: &mut T, ds: &SparseDataset, nonzero: usize) -> Result<f64> {
    let total = transport.allreduce_sum(vec![nonzero as f64])?[0];
    Ok(100.0 * total / (ds.len() * (ds.num_classes() - 1)) as f64)
}

fn check_group(ds: &SparseDataset, cfg: &SolverConfig, num_nodes: usize) -> Result<()> {
    cfg.validate()?;
    if ds.num_classes() < 2 {
        return Err(Error::InvalidArgument("training needs at least two classes".into()));
    }
    if num_nodes == 0 {
        return Err(Error::InvalidArgument("no nodes".into()));
    }
    Ok(())
}

/// LLW with classes partitioned over nodes; each `w̄` refresh is a global sum.
pub fn llw_distributed_train<T: Transport + ?Sized>(
    ds: &SparseDataset,
    cfg: &SolverConfig,
    transport: &mut T,
) -> Result<DistOutcome> {
    check_group(ds, cfg, transport.num_nodes())?;
    check_same_dataset(ds, transport)?;
    let bundles = node_bundles(ds, transport.num_nodes());
    let mine = bundles[transport.node_id()].clone();
    let mut state = LlwState::for_classes(ds, cfg, &mine);
    let stats = llw::run_epochs(&mut state, ds, cfg, &mut TransportReducer { transport: &mut *transport })?;

    let weights = state.weights(ds);
    let owned: Vec<(usize, Vec<f64>)> = state
        .owned_classes()
        .into_iter()
        .map(|c| (c, weights.class_weights(c).to_vec()))
        .collect();
    let nonzero = state
        .columns
        .iter()
        .map(|col| col.alpha.iter().filter(|&&a| a > 0.0).count())
        .sum();
    let alpha_density = alpha_density_global(transport, ds, nonzero)?;
    let model = gather_model(transport, ds, &owned, &bundles)?;
    transport.barrier()?;
    Ok(DistOutcome {
        model,
        stats,
        alpha_density,
        owned_classes: mine,
    })
}

/// Message carrying column `col` with its dual variables for `samples`.
fn column_message(col: &WwColumn, samples: &[usize]) -> SparseWeightMessage {
    let mut msg = SparseWeightMessage::from_dense(col.class, &col.w);
    msg.alpha = samples
        .iter()
        .map(|&i| AlphaEntry {
            sample: i as u32,
            value: col.alpha[i],
            last_update: col.last_update[i],
        })
        .collect();
    msg
}

/// Writes a received vector and its dual variables into `col`.
fn apply_message(col: &mut WwColumn, msg: &SparseWeightMessage, n: usize) -> Result<()> {
    col.w = msg.to_dense(col.w.len())?;
    for a in &msg.alpha {
        let i = a.sample as usize;
        if i >= n {
            return Err(Error::Protocol(format!("sample {i} out of range")));
        }
        col.alpha[i] = a.value;
        col.last_update[i] = a.last_update;
    }
    Ok(())
}

/// WW with one class bundle per node. Produces the same iterates as
/// [`ww::train_with_plan`] on the two-level plan over [`node_bundles`].
///
/// The primal objective needs every weight vector, so per-epoch rows carry
/// only the dual; node 0 adds primal and gap to the final row.
pub fn ww_distributed_train<T: Transport + ?Sized>(
    ds: &SparseDataset,
    cfg: &SolverConfig,
    transport: &mut T,
) -> Result<DistOutcome> {
    let (me, n_nodes) = (transport.node_id(), transport.num_nodes());
    check_group(ds, cfg, n_nodes)?;
    check_same_dataset(ds, transport)?;
    let start = Instant::now();
    let bundles = node_bundles(ds, n_nodes);
    let mine = bundles[me].clone();
    let global_plan = two_level_schedule(&bundles.iter().filter(|b| !b.is_empty()).cloned().collect::<Vec<_>>())?;
    // intra-bundle rounds restricted to the classes this node owns
    let local_phases: Vec<Vec<Vec<(usize, usize)>>> = global_plan
        .local_rounds
        .iter()
        .map(|r| {
            r.pairs
                .iter()
                .filter(|(a, _)| mine.contains(a))
                .map(|&p| vec![p])
                .collect::<Vec<_>>()
        })
        .filter(|phase| !phase.is_empty())
        .collect();
    let node_rounds = build_schedule(n_nodes.max(2))?;

    let mut state = WwState::for_classes(ds, cfg, &mine);
    let pool = cfg.thread_pool();
    let mut stats = TrainStats::default();
    let dual0 = transport.allreduce_sum(vec![state.dual_objective()])?[0];
    stats.epochs.push(EpochStats {
        epoch: 0,
        dual: dual0,
        primal: None,
        gap: None,
        active: 0,
        seconds: 0.0,
    });

    let mut shuffler = EpochShuffler::new(ds.len(), cfg.seed);
    let mut term = Termination::default();
    for epoch in 1..=cfg.max_epochs {
        let epoch32 = epoch as u32;
        state.set_epoch(epoch32);
        let full = term.next_epoch_full(cfg);
        let members = ww::shuffled_members(ds, shuffler.next_order());
        let ctx = PairCtx {
            ds,
            members: &members,
            c: cfg.c,
            eps: cfg.epsilon,
            epoch: epoch32,
            full,
            shrink_after: cfg.shrink_after,
        };
        let mut total = TaskResult::default();
        for phase in &local_phases {
            total.merge(pool.install(|| ww::run_tasks(&mut state.columns, phase, &ctx, cfg.record_pairs)));
        }

        for round in node_rounds.rounds.iter().filter(|_| n_nodes > 1) {
            let Some(&(lo, hi)) = round.pairs.iter().find(|&&(a, b)| a == me || b == me) else {
                continue;
            };
            if bundles[lo].is_empty() || bundles[hi].is_empty() {
                continue;
            }
            if me == hi {
                // ship our columns with the dual variables the partner's
                // samples will touch, then take them back
                let samples: Vec<usize> = bundles[lo].iter().flat_map(|&c| ds.class_members(c).iter().copied()).collect();
                for col in &state.columns {
                    transport.send(lo, &Message::SparseWeight(column_message(col, &samples)))?;
                }
                for _ in 0..state.columns.len() {
                    let msg = expect_weights(transport.receive(lo)?, lo)?;
                    let class = msg.class_id as usize;
                    let col = state
                        .columns
                        .iter_mut()
                        .find(|c| c.class == class)
                        .ok_or_else(|| Error::Protocol(format!("node {lo} returned class {class} not owned here")))?;
                    apply_message(col, &msg, ds.len())?;
                }
            } else {
                let mut guests = Vec::with_capacity(bundles[hi].len());
                for _ in 0..bundles[hi].len() {
                    let msg = expect_weights(transport.receive(hi)?, hi)?;
                    let class = msg.class_id as usize;
                    if !bundles[hi].contains(&class) || guests.iter().any(|g: &WwColumn| g.class == class) {
                        return Err(Error::Protocol(format!("unexpected class {class} from node {hi}")));
                    }
                    let mut col = WwColumn::new(class, ds.len(), ds.dim());
                    apply_message(&mut col, &msg, ds.len())?;
                    guests.push(col);
                }
                let own = state.columns.len();
                state.columns.extend(guests);
                let task = vec![global_cross_pairs(&bundles, lo, hi)];
                let r = pool.install(|| ww::run_tasks(&mut state.columns, &task, &ctx, cfg.record_pairs));
                total.merge(r);
                let samples: Vec<usize> = mine.iter().flat_map(|&c| ds.class_members(c).iter().copied()).collect();
                let guests: Vec<WwColumn> = state.columns.drain(own..).collect();
                for col in &guests {
                    transport.send(hi, &Message::SparseWeight(column_message(col, &samples)))?;
                }
            }
        }

        let global = transport.allreduce_sum(vec![
            state.dual_objective(),
            total.updates as f64,
            total.visits as f64,
        ])?;
        stats.epochs.push(EpochStats {
            epoch,
            dual: global[0],
            primal: None,
            gap: None,
            active: global[2] as usize,
            seconds: start.elapsed().as_secs_f64(),
        });
        if cfg.record_pairs {
            stats.pair_log.push(total.pairs);
        }
        log::debug!("node {me} ww epoch {epoch}: dual {:.10e} updates {}", global[0], global[1]);
        if term.observe(global[1] == 0.0, full) {
            stats.converged = true;
            break;
        }
    }

    let owned: Vec<(usize, Vec<f64>)> = state.columns.iter().map(|c| (c.class, c.w.clone())).collect();
    let nonzero = state
        .columns
        .iter()
        .map(|col| col.alpha.iter().filter(|&&a| a > 0.0).count())
        .sum();
    let alpha_density = alpha_density_global(transport, ds, nonzero)?;
    let model = gather_model(transport, ds, &owned, &bundles)?;
    if let (Some(w), true) = (&model, cfg.trace_objective) {
        let primal = ww::ww_primal(w, ds, cfg.c);
        let last = stats.epochs.last_mut().unwrap();
        last.primal = Some(primal);
        last.gap = Some(primal - last.dual);
    }
    transport.barrier()?;
    Ok(DistOutcome {
        model,
        stats,
        alpha_density,
        owned_classes: mine,
    })
}

/// Cross pairs between node bundles, lower bundle first, row-major.
fn global_cross_pairs(bundles: &[Vec<usize>], a: usize, b: usize) -> Vec<(usize, usize)> {
    bundles[a]
        .iter()
        .flat_map(|&x| bundles[b].iter().map(move |&y| (x.min(y), x.max(y))))
        .collect()
}

/// The single-process plan that [`ww_distributed_train`] reproduces.
pub fn ww_equivalent_plan(ds: &SparseDataset, num_nodes: usize) -> Result<ww::EpochPlan> {
    let bundles: Vec<Vec<usize>> = node_bundles(ds, num_nodes).into_iter().filter(|b| !b.is_empty()).collect();
    Ok(ww::EpochPlan::two_level(&two_level_schedule(&bundles)?))
}
