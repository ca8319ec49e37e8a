//! All-reduce-sum between training workers.
//!
//! Each boosting round needs exactly two global sums: the normalization sums
//! (`NORM_STATS`, `2K + 1` values) and the linear system (`SYSTEM_AB`,
//! `K^2 + K` values, once per class). Transports implement [`Collective`];
//! every one sums contributions in ascending worker order so results are
//! bit-identical whichever transport carried them.

mod inprocess;
mod ledger;
pub mod tcp;
pub mod wire;

use std::fmt;
use std::str::FromStr;

pub use inprocess::{InProcessGroup, InProcessWorker};
pub use ledger::{ledger_report, CommLedger, RoundComm, RoundTotals};
pub use tcp::{TcpCoordinator, TcpWorker};

use crate::error::{GbunError, Result};

/// Default time a worker waits on its peers before failing.
pub const DEFAULT_TIMEOUT_SECS: u64 = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(u8)]
pub enum Opcode {
    Handshake = 0,
    NormStats = 1,
    SystemAb = 2,
}

impl Opcode {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Opcode::Handshake),
            1 => Ok(Opcode::NormStats),
            2 => Ok(Opcode::SystemAb),
            other => Err(GbunError::protocol(format!("unknown opcode {other}"))),
        }
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Opcode::Handshake => "HANDSHAKE",
            Opcode::NormStats => "NORM_STATS",
            Opcode::SystemAb => "SYSTEM_AB",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReducePayload {
    pub opcode: Opcode,
    pub round: u32,
    pub values: Vec<f64>,
}

impl ReducePayload {
    pub fn new(opcode: Opcode, round: u32, values: Vec<f64>) -> Self {
        Self {
            opcode,
            round,
            values,
        }
    }
}

/// Checks that every contribution to one reduce agrees on opcode, round and
/// length, then sums them in the given (ascending worker) order.
pub(crate) fn sum_contributions<'a, I>(mut parts: I) -> Result<ReducePayload>
where
    I: Iterator<Item = &'a ReducePayload>,
{
    let first = parts
        .next()
        .ok_or_else(|| GbunError::protocol("empty reduction"))?;
    let mut out = first.clone();
    for (offset, p) in parts.enumerate() {
        if p.opcode != first.opcode || p.round != first.round {
            return Err(GbunError::protocol(format!(
                "worker {} sent {} for round {}, worker 0 sent {} for round {}",
                offset + 1,
                p.opcode,
                p.round,
                first.opcode,
                first.round
            )));
        }
        if p.values.len() != first.values.len() {
            return Err(GbunError::protocol(format!(
                "worker {} sent {} values, worker 0 sent {}",
                offset + 1,
                p.values.len(),
                first.values.len()
            )));
        }
        for (acc, v) in out.values.iter_mut().zip(&p.values) {
            *acc += v;
        }
    }
    Ok(out)
}

/// One worker's handle on a reduction group.
pub trait Collective: Send {
    fn rank(&self) -> usize;

    fn world_size(&self) -> usize;

    fn transport(&self) -> &'static str;

    /// Blocks until every worker has contributed; returns the elementwise
    /// sum. Workers must issue the same sequence of (opcode, round, length).
    fn allreduce_sum(&mut self, payload: ReducePayload) -> Result<ReducePayload>;

    fn ledger(&self) -> &CommLedger;
}

/// Single worker without any transport: the reduction is the identity and
/// nothing is counted.
pub struct LocalCollective {
    ledger: CommLedger,
}

impl LocalCollective {
    pub fn new() -> Self {
        Self {
            ledger: CommLedger::new(0, "local", 0),
        }
    }
}

impl Default for LocalCollective {
    fn default() -> Self {
        Self::new()
    }
}

impl Collective for LocalCollective {
    fn rank(&self) -> usize {
        0
    }

    fn world_size(&self) -> usize {
        1
    }

    fn transport(&self) -> &'static str {
        "local"
    }

    fn allreduce_sum(&mut self, payload: ReducePayload) -> Result<ReducePayload> {
        Ok(payload)
    }

    fn ledger(&self) -> &CommLedger {
        &self.ledger
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    InProcess,
    Tcp,
}

impl FromStr for TransportKind {
    type Err = GbunError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inprocess" | "in-process" => Ok(Self::InProcess),
            "tcp" => Ok(Self::Tcp),
            other => Err(GbunError::config(format!(
                "unknown transport `{other}` (inprocess, tcp)"
            ))),
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::InProcess => "inprocess",
            Self::Tcp => "tcp",
        })
    }
}

/// Values each worker sends per round with `k` output neurons and one
/// system: `(2K + 1) + (K^2 + K)`.
pub fn predicted_comm_values(k: usize) -> usize {
    predicted_comm_values_multi(k, 1)
}

/// As [`predicted_comm_values`] with one `SYSTEM_AB` reduce per class.
pub fn predicted_comm_values_multi(k: usize, systems: usize) -> usize {
    (2 * k + 1) + systems * (k * k + k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicted_counts() {
        assert_eq!(predicted_comm_values(64), 4289);
        assert_eq!(predicted_comm_values(64) * 8, 34_312);
        assert_eq!(predicted_comm_values(1), 5);
        assert_eq!(predicted_comm_values_multi(64, 26), 108_289);
    }

    #[test]
    fn local_is_identity() {
        let mut c = LocalCollective::new();
        let p = ReducePayload::new(Opcode::NormStats, 3, vec![1.5, -2.0]);
        assert_eq!(c.allreduce_sum(p.clone()).unwrap(), p);
        assert!(c.ledger().rounds().is_empty());
    }

    #[test]
    fn mismatched_contributions_are_rejected() {
        let a = ReducePayload::new(Opcode::NormStats, 0, vec![1.0]);
        let b = ReducePayload::new(Opcode::NormStats, 1, vec![1.0]);
        let c = ReducePayload::new(Opcode::NormStats, 0, vec![1.0, 2.0]);
        let d = ReducePayload::new(Opcode::SystemAb, 0, vec![1.0]);
        for bad in [&b, &c, &d] {
            assert!(sum_contributions([&a, bad].into_iter()).is_err());
        }
        let ok = sum_contributions([&a, &a, &a].into_iter()).unwrap();
        assert_eq!(ok.values, vec![3.0]);
    }
}
