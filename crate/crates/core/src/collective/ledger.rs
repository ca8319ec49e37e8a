use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Opcode;

/// Traffic of one worker during one round.
///
/// `frames` and `bytes_on_wire` cover both directions; for TCP,
/// `bytes_on_wire == frames * header + (values_sent + values_received) * 8`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundComm {
    pub round: u32,
    pub values_sent: u64,
    pub values_received: u64,
    pub frames: u64,
    pub bytes_on_wire: u64,
    pub norm_reduces: u64,
    pub norm_values_sent: u64,
    pub system_reduces: u64,
    pub system_values_sent: u64,
}

/// Per-round communication counters of one worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    pub worker: usize,
    pub transport: String,
    pub header_bytes: u64,
    /// Connection setup traffic, not attributed to any round.
    pub setup_frames: u64,
    pub setup_bytes: u64,
    rounds: BTreeMap<u32, RoundComm>,
}

impl CommLedger {
    pub fn new(worker: usize, transport: &str, header_bytes: u64) -> Self {
        Self {
            worker,
            transport: transport.to_string(),
            header_bytes,
            setup_frames: 0,
            setup_bytes: 0,
            rounds: BTreeMap::new(),
        }
    }

    pub(crate) fn record(
        &mut self,
        opcode: Opcode,
        round: u32,
        sent: usize,
        received: usize,
        frames: u64,
        bytes: u64,
    ) {
        let entry = self.rounds.entry(round).or_insert_with(|| RoundComm {
            round,
            ..RoundComm::default()
        });
        entry.values_sent += sent as u64;
        entry.values_received += received as u64;
        entry.frames += frames;
        entry.bytes_on_wire += bytes;
        match opcode {
            Opcode::NormStats => {
                entry.norm_reduces += 1;
                entry.norm_values_sent += sent as u64;
            }
            Opcode::SystemAb => {
                entry.system_reduces += 1;
                entry.system_values_sent += sent as u64;
            }
            Opcode::Handshake => {}
        }
    }

    pub(crate) fn record_setup(&mut self, frames: u64, bytes: u64) {
        self.setup_frames += frames;
        self.setup_bytes += bytes;
    }

    pub fn rounds(&self) -> Vec<&RoundComm> {
        self.rounds.values().collect()
    }

    pub fn round(&self, round: u32) -> Option<&RoundComm> {
        self.rounds.get(&round)
    }
}

/// Per-round aggregate over a set of workers' ledgers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundTotals {
    pub round: u32,
    pub workers: usize,
    pub values_sent: u64,
    pub values_received: u64,
    pub frames: u64,
    pub bytes_on_wire: u64,
    /// Largest per-worker `values_sent`; equal across workers in practice.
    pub max_worker_values_sent: u64,
}

pub fn ledger_report(ledgers: &[CommLedger]) -> Vec<RoundTotals> {
    let mut totals: BTreeMap<u32, RoundTotals> = BTreeMap::new();
    for ledger in ledgers {
        for r in ledger.rounds.values() {
            let t = totals.entry(r.round).or_insert(RoundTotals {
                round: r.round,
                workers: 0,
                values_sent: 0,
                values_received: 0,
                frames: 0,
                bytes_on_wire: 0,
                max_worker_values_sent: 0,
            });
            t.workers += 1;
            t.values_sent += r.values_sent;
            t.values_received += r.values_received;
            t.frames += r.frames;
            t.bytes_on_wire += r.bytes_on_wire;
            t.max_worker_values_sent = t.max_worker_values_sent.max(r.values_sent);
        }
    }
    totals.into_values().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_ledger_reports_nothing() {
        assert!(ledger_report(&[CommLedger::new(0, "tcp", 16)]).is_empty());
        assert!(ledger_report(&[]).is_empty());
    }

    #[test]
    fn totals_add_across_workers() {
        let mut a = CommLedger::new(0, "tcp", 16);
        let mut b = CommLedger::new(1, "tcp", 16);
        a.record(Opcode::NormStats, 0, 5, 5, 2, 2 * 16 + 80);
        a.record(Opcode::SystemAb, 0, 6, 6, 2, 2 * 16 + 96);
        b.record(Opcode::NormStats, 0, 5, 5, 2, 2 * 16 + 80);
        let report = ledger_report(&[a.clone(), b]);
        assert_eq!(report.len(), 1);
        assert_eq!(report[0].workers, 2);
        assert_eq!(report[0].values_sent, 16);
        assert_eq!(report[0].max_worker_values_sent, 11);
        let r = a.round(0).unwrap();
        assert_eq!((r.norm_reduces, r.system_reduces, r.system_values_sent), (1, 1, 6));
        let json = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<CommLedger>(&json).unwrap(), a);
    }
}
