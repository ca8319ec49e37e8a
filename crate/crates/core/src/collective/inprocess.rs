use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

use super::{sum_contributions, Collective, CommLedger, ReducePayload};
use crate::error::{GbunError, Result};

struct HubState {
    slots: Vec<Option<ReducePayload>>,
    arrived: usize,
    generation: u64,
    result: Option<Arc<ReducePayload>>,
    failure: Option<String>,
}

struct Hub {
    world_size: usize,
    timeout: Duration,
    state: Mutex<HubState>,
    ready: Condvar,
}

/// Shared rendezvous for workers running as threads of one process.
pub struct InProcessGroup {
    hub: Arc<Hub>,
}

impl InProcessGroup {
    pub fn new(world_size: usize, timeout: Duration) -> Result<Self> {
        if world_size == 0 {
            return Err(GbunError::config("world size must be at least 1"));
        }
        Ok(Self {
            hub: Arc::new(Hub {
                world_size,
                timeout,
                state: Mutex::new(HubState {
                    slots: vec![None; world_size],
                    arrived: 0,
                    generation: 0,
                    result: None,
                    failure: None,
                }),
                ready: Condvar::new(),
            }),
        })
    }

    /// One handle per rank, in rank order.
    pub fn workers(&self) -> Vec<InProcessWorker> {
        (0..self.hub.world_size)
            .map(|rank| InProcessWorker {
                rank,
                hub: Arc::clone(&self.hub),
                ledger: CommLedger::new(rank, "inprocess", 0),
            })
            .collect()
    }
}

pub struct InProcessWorker {
    rank: usize,
    hub: Arc<Hub>,
    ledger: CommLedger,
}

impl InProcessWorker {
    fn reduce(&self, payload: ReducePayload) -> Result<Arc<ReducePayload>> {
        let hub = &*self.hub;
        let mut st = hub.state.lock().unwrap();
        if let Some(msg) = &st.failure {
            return Err(GbunError::protocol(msg.clone()));
        }
        if st.slots[self.rank].is_some() {
            return Err(GbunError::protocol(format!(
                "worker {} contributed twice to one reduction",
                self.rank
            )));
        }
        st.slots[self.rank] = Some(payload);
        st.arrived += 1;
        let my_generation = st.generation;

        if st.arrived == hub.world_size {
            let summed = sum_contributions(st.slots.iter().map(|s| s.as_ref().unwrap()));
            match summed {
                Ok(sum) => {
                    let sum = Arc::new(sum);
                    st.result = Some(Arc::clone(&sum));
                    st.slots.iter_mut().for_each(|s| *s = None);
                    st.arrived = 0;
                    st.generation += 1;
                    hub.ready.notify_all();
                    return Ok(sum);
                }
                Err(e) => {
                    st.failure = Some(e.to_string());
                    hub.ready.notify_all();
                    return Err(e);
                }
            }
        }

        let deadline = Instant::now() + hub.timeout;
        loop {
            if st.generation != my_generation {
                return Ok(Arc::clone(st.result.as_ref().unwrap()));
            }
            if let Some(msg) = &st.failure {
                return Err(GbunError::protocol(msg.clone()));
            }
            let now = Instant::now();
            if now >= deadline {
                let msg = format!("worker {} timed out waiting for peers", self.rank);
                st.failure = Some(msg.clone());
                hub.ready.notify_all();
                return Err(GbunError::network(msg));
            }
            st = hub.ready.wait_timeout(st, deadline - now).unwrap().0;
        }
    }
}

impl Collective for InProcessWorker {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.hub.world_size
    }

    fn transport(&self) -> &'static str {
        "inprocess"
    }

    fn allreduce_sum(&mut self, payload: ReducePayload) -> Result<ReducePayload> {
        let (opcode, round, sent) = (payload.opcode, payload.round, payload.values.len());
        let result = self.reduce(payload)?;
        self.ledger
            .record(opcode, round, sent, result.values.len(), 0, 0);
        Ok((*result).clone())
    }

    fn ledger(&self) -> &CommLedger {
        &self.ledger
    }
}

impl Drop for InProcessWorker {
    fn drop(&mut self) {
        // Any reduction after this point can never complete.
        if let Ok(mut st) = self.hub.state.lock() {
            if st.failure.is_none() {
                st.failure = Some(format!("worker {} left the group", self.rank));
                self.hub.ready.notify_all();
            }
        }
    }
}
