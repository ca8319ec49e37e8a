//! Star-topology all-reduce over TCP.
//!
//! The coordinator accepts one connection per worker, then repeatedly reads
//! one frame from every worker in rank order, sums them in that order and
//! sends the sum back to all. Any error closes every connection, so peers
//! fail instead of blocking.

use std::io::BufReader;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::wire::{read_frame, Frame, HEADER_LEN};
use super::{sum_contributions, Collective, CommLedger, Opcode, ReducePayload};
use crate::error::{GbunError, Result};

struct Peer {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Peer {
    fn new(stream: TcpStream, timeout: Duration) -> Result<Self> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        let writer = stream.try_clone()?;
        Ok(Self {
            reader: BufReader::new(stream),
            writer,
        })
    }
}

pub struct TcpCoordinator {
    listener: TcpListener,
    world_size: usize,
    timeout: Duration,
}

impl TcpCoordinator {
    pub fn bind(addr: impl ToSocketAddrs, world_size: usize, timeout: Duration) -> Result<Self> {
        if world_size == 0 || world_size > u16::MAX as usize {
            return Err(GbunError::config(format!("invalid world size {world_size}")));
        }
        let listener = TcpListener::bind(addr)
            .map_err(|e| GbunError::network(format!("cannot bind coordinator: {e}")))?;
        Ok(Self {
            listener,
            world_size,
            timeout,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn spawn(self) -> JoinHandle<Result<()>> {
        thread::spawn(move || self.run())
    }

    fn accept_all(&self) -> Result<Vec<Peer>> {
        let mut peers: Vec<Option<Peer>> = (0..self.world_size).map(|_| None).collect();
        let deadline = Instant::now() + self.timeout;
        self.listener.set_nonblocking(true)?;
        let mut joined = 0;
        while joined < self.world_size {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    let mut peer = Peer::new(stream, self.timeout)?;
                    let hello = read_frame(&mut peer.reader)?
                        .ok_or_else(|| GbunError::network("worker closed before handshake"))?;
                    let id = hello.worker_id as usize;
                    if hello.opcode != Opcode::Handshake || !hello.values.is_empty() {
                        return Err(GbunError::protocol("expected a handshake frame"));
                    }
                    if id >= self.world_size || peers[id].is_some() {
                        return Err(GbunError::protocol(format!(
                            "handshake from invalid or duplicate worker id {id}"
                        )));
                    }
                    peers[id] = Some(peer);
                    joined += 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(GbunError::network(format!(
                            "only {joined} of {} workers connected before the timeout",
                            self.world_size
                        )));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(GbunError::network(e.to_string())),
            }
        }
        let mut peers: Vec<Peer> = peers.into_iter().map(Option::unwrap).collect();
        for (id, peer) in peers.iter_mut().enumerate() {
            Frame::handshake(id as u16).write_to(&mut peer.writer)?;
        }
        Ok(peers)
    }

    /// Serves reductions until every worker disconnects cleanly.
    pub fn run(self) -> Result<()> {
        let mut peers = self.accept_all()?;
        loop {
            let mut frames = Vec::with_capacity(peers.len());
            for (id, peer) in peers.iter_mut().enumerate() {
                match read_frame(&mut peer.reader)? {
                    Some(f) => {
                        if f.worker_id as usize != id {
                            return Err(GbunError::protocol(format!(
                                "connection {id} sent a frame for worker {}",
                                f.worker_id
                            )));
                        }
                        frames.push(f);
                    }
                    None if id == 0 => break,
                    None => {
                        return Err(GbunError::network(format!(
                            "worker {id} disconnected mid-round"
                        )))
                    }
                }
            }
            if frames.is_empty() {
                // worker 0 finished; every other worker must finish too
                for (id, peer) in peers.iter_mut().enumerate().skip(1) {
                    if read_frame(&mut peer.reader)?.is_some() {
                        return Err(GbunError::protocol(format!(
                            "worker {id} kept sending after worker 0 finished"
                        )));
                    }
                }
                return Ok(());
            }
            let payloads: Vec<ReducePayload> = frames
                .into_iter()
                .map(|f| ReducePayload::new(f.opcode, f.round, f.values))
                .collect();
            if payloads[0].opcode == Opcode::Handshake {
                return Err(GbunError::protocol("handshake frame inside a session"));
            }
            let sum = sum_contributions(payloads.iter())?;
            for (id, peer) in peers.iter_mut().enumerate() {
                let reply = Frame {
                    opcode: sum.opcode,
                    worker_id: id as u16,
                    round: sum.round,
                    values: sum.values.clone(),
                };
                reply.write_to(&mut peer.writer)?;
            }
        }
    }
}

pub struct TcpWorker {
    rank: usize,
    world_size: usize,
    peer: Peer,
    ledger: CommLedger,
}

impl TcpWorker {
    /// Connects to the coordinator, retrying until `timeout` elapses, and
    /// waits for the whole group to join.
    pub fn connect(
        addr: impl ToSocketAddrs,
        rank: usize,
        world_size: usize,
        timeout: Duration,
    ) -> Result<Self> {
        if rank >= world_size {
            return Err(GbunError::config(format!(
                "rank {rank} outside world size {world_size}"
            )));
        }
        let addrs: Vec<SocketAddr> = addr
            .to_socket_addrs()
            .map_err(|e| GbunError::network(format!("bad coordinator address: {e}")))?
            .collect();
        let deadline = Instant::now() + timeout;
        let stream = loop {
            match addrs.iter().find_map(|a| TcpStream::connect(a).ok()) {
                Some(s) => break s,
                None if Instant::now() >= deadline => {
                    return Err(GbunError::network(format!(
                        "cannot reach coordinator at {addrs:?}"
                    )))
                }
                None => thread::sleep(Duration::from_millis(20)),
            }
        };
        let mut peer = Peer::new(stream, timeout)?;
        let mut ledger = CommLedger::new(rank, "tcp", HEADER_LEN as u64);
        Frame::handshake(rank as u16).write_to(&mut peer.writer)?;
        let ack = read_frame(&mut peer.reader)?
            .ok_or_else(|| GbunError::network("coordinator closed during handshake"))?;
        if ack.opcode != Opcode::Handshake || ack.worker_id as usize != rank {
            return Err(GbunError::protocol("unexpected handshake reply"));
        }
        ledger.record_setup(2, 2 * HEADER_LEN as u64);
        Ok(Self {
            rank,
            world_size,
            peer,
            ledger,
        })
    }
}

impl Collective for TcpWorker {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.world_size
    }

    fn transport(&self) -> &'static str {
        "tcp"
    }

    fn allreduce_sum(&mut self, payload: ReducePayload) -> Result<ReducePayload> {
        let out = Frame {
            opcode: payload.opcode,
            worker_id: self.rank as u16,
            round: payload.round,
            values: payload.values,
        };
        out.write_to(&mut self.peer.writer)?;
        let reply = read_frame(&mut self.peer.reader)?
            .ok_or_else(|| GbunError::network("coordinator closed the connection"))?;
        if reply.opcode != out.opcode || reply.round != out.round {
            return Err(GbunError::protocol(format!(
                "sent {} round {}, got {} round {}",
                out.opcode, out.round, reply.opcode, reply.round
            )));
        }
        if reply.values.len() != out.values.len() {
            return Err(GbunError::protocol("reply length differs from request"));
        }
        self.ledger.record(
            out.opcode,
            out.round,
            out.values.len(),
            reply.values.len(),
            2,
            (out.wire_len() + reply.wire_len()) as u64,
        );
        Ok(ReducePayload::new(reply.opcode, reply.round, reply.values))
    }

    fn ledger(&self) -> &CommLedger {
        &self.ledger
    }
}
