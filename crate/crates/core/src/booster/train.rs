use std::collections::BTreeMap;
use std::fmt;
use std::sync::mpsc;
use std::thread;

use log::{debug, info};

use super::{add_round_scores, BoosterModel, RoundModel, Scorer, TrainConfig};
use crate::collective::{
    Collective, CommLedger, InProcessGroup, LocalCollective, Opcode, ReducePayload,
    TcpCoordinator, TcpWorker, TransportKind,
};
use crate::dataset::{partition, partition_rows, SparseDataset};
use crate::error::{GbunError, Result};
use crate::forward::{assignments, Forwarder, NormStats, NormSums, UntrainedNet};
use crate::hashwgen::WeightGenerator;
use crate::matrix::Matrix;
use crate::metrics::{evaluate, EvalResult};
use crate::solver::{accumulate_ab_into, solve_weights, AccumulateScratch, SystemAB};

/// What one worker reports after finishing a round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundEvent {
    pub rank: usize,
    pub round_index: u32,
    /// Post-update loss summed over the worker's own samples.
    pub loss_sum: f64,
    pub samples: usize,
    /// Payload values this worker sent during the round.
    pub values_sent: u64,
    /// Largest ridge used when a system needed jitter.
    pub jitter: Option<f64>,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    /// 1-based.
    pub round: u32,
    pub train_loss: f64,
    pub valid: Option<EvalResult>,
    pub comm_values: u64,
}

impl fmt::Display for RoundReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "round={} train_loss={}", self.round, self.train_loss)?;
        if let Some(v) = &self.valid {
            write!(f, " valid_{}={}", v.metric, v.value)?;
        }
        write!(f, " comm_values={}", self.comm_values)
    }
}

/// Everything one worker produced.
pub struct WorkerResult {
    pub model: BoosterModel,
    /// Final scores of the worker's own samples.
    pub scores: Matrix,
    pub ledger: CommLedger,
    pub forward_passes: usize,
}

/// Runs every boosting round on one shard.
///
/// All workers of a group must call this with the same configuration and
/// initial model. `on_round` sees each finished round.
pub fn run_worker(
    cfg: &TrainConfig,
    initial: &BoosterModel,
    shard: &SparseDataset,
    coll: &mut dyn Collective,
    on_round: &mut dyn FnMut(&RoundEvent, &RoundModel) -> Result<()>,
) -> Result<WorkerResult> {
    let mut model = initial.clone();
    model.rounds.clear();
    let objective = model.objective_impl()?;
    let generator = model.generator()?;
    let (k, c) = (model.k, model.num_classes);
    let labels = shard.labels();
    objective.check_labels(labels, c)?;

    let mut forwarder = Forwarder::new(shard, cfg.batches);
    let mut scores = Matrix::zeros(shard.num_samples(), c);
    let mut scratch = AccumulateScratch::default();
    let mut system = SystemAB::zeros(k);

    for t in 0..cfg.rounds {
        let z = forwarder.forward(UntrainedNet {
            round: t,
            k,
            generator: generator.as_ref(),
        })?;
        let sums = coll.allreduce_sum(ReducePayload::new(
            Opcode::NormStats,
            t,
            NormSums::of(&z).to_payload(),
        ))?;
        let norm_stats = NormStats::from_sums(&NormSums::from_payload(&sums.values, k)?)?;
        let p = assignments(z, &norm_stats)?;
        let gh = objective.grad_hess(&scores, labels)?;

        let mut weights = Matrix::zeros(c, k);
        let mut jitter: Option<f64> = None;
        for class in 0..c {
            let (g, h) = gh.class(class);
            accumulate_ab_into(&p, &g, &h, &mut scratch, &mut system);
            let pooled = coll.allreduce_sum(ReducePayload::new(
                Opcode::SystemAb,
                t,
                system.to_payload(),
            ))?;
            let pooled = SystemAB::from_payload(&pooled.values, k)?;
            let sol = solve_weights(&pooled.a, &pooled.b, cfg.lambda).map_err(|e| {
                GbunError::Solver {
                    round: t + 1,
                    detail: format!("class {class}: {e}"),
                }
            })?;
            if let Some(r) = sol.jitter {
                debug!("round {}: class {class} system needed ridge {r:e}", t + 1);
                jitter = Some(jitter.map_or(r, |j: f64| j.max(r)));
            }
            weights.row_mut(class).copy_from_slice(&sol.w);
        }
        if let Some(r) = jitter {
            info!("round {}: singular system regularized with ridge up to {r:e}", t + 1);
        }
        add_round_scores(&mut scores, &p, &weights, cfg.eta);

        let round = RoundModel {
            round_index: t,
            norm_stats,
            weights,
        };
        let event = RoundEvent {
            rank: coll.rank(),
            round_index: t,
            loss_sum: objective.loss_sum(&scores, labels),
            samples: shard.num_samples(),
            values_sent: coll.ledger().round(t).map_or(0, |r| r.values_sent),
            jitter,
        };
        on_round(&event, &round)?;
        model.rounds.push(round);
    }

    Ok(WorkerResult {
        model,
        scores,
        ledger: coll.ledger().clone(),
        forward_passes: forwarder.passes(),
    })
}

/// Turns per-worker round events into log reports, scoring a validation set
/// along the way.
pub struct Monitor<'v> {
    world_size: usize,
    rounds: u32,
    eval_every: u32,
    metric: String,
    model: BoosterModel,
    generator: Box<dyn WeightGenerator>,
    valid: Option<Scorer<'v>>,
    pending: BTreeMap<u32, (Vec<Option<RoundEvent>>, Option<RoundModel>)>,
    next: u32,
    reports: Vec<RoundReport>,
}

impl<'v> Monitor<'v> {
    pub fn new(
        cfg: &TrainConfig,
        initial: &BoosterModel,
        world_size: usize,
        valid: Option<&'v SparseDataset>,
    ) -> Result<Self> {
        let scorer = match valid {
            Some(ds) if cfg.eval_every > 0 => {
                initial.objective_impl()?.check_labels(ds.labels(), initial.num_classes)?;
                Some(Scorer::new(ds, initial.num_classes, cfg.batches))
            }
            _ => None,
        };
        Ok(Self {
            world_size,
            rounds: cfg.rounds,
            eval_every: cfg.eval_every,
            metric: cfg.metric_name()?,
            model: initial.clone(),
            generator: initial.generator()?,
            valid: scorer,
            pending: BTreeMap::new(),
            next: 0,
            reports: Vec::new(),
        })
    }

    /// Records one worker's event; the model is needed from rank 0 only.
    /// Returns the reports of any rounds that became complete.
    pub fn observe(&mut self, event: RoundEvent, round: Option<RoundModel>) -> Result<Vec<RoundReport>> {
        let entry = self
            .pending
            .entry(event.round_index)
            .or_insert_with(|| (vec![None; self.world_size], None));
        if round.is_some() {
            entry.1 = round;
        }
        let rank = event.rank;
        entry.0[rank] = Some(event);

        let mut done = Vec::new();
        while let Some((events, model)) = self.pending.get(&self.next) {
            if events.iter().any(Option::is_none) || model.is_none() {
                break;
            }
            let (events, model) = self.pending.remove(&self.next).unwrap();
            let report = self.finish_round(events.into_iter().flatten().collect(), model.unwrap())?;
            self.reports.push(report.clone());
            done.push(report);
            self.next += 1;
        }
        Ok(done)
    }

    fn finish_round(&mut self, events: Vec<RoundEvent>, round: RoundModel) -> Result<RoundReport> {
        let t = round.round_index;
        // rank order keeps the reported loss deterministic
        let loss: f64 = events.iter().map(|e| e.loss_sum).sum();
        let samples: usize = events.iter().map(|e| e.samples).sum();
        let mut valid = None;
        if let Some(scorer) = &mut self.valid {
            scorer.add_round(self.generator.as_ref(), self.model.k, self.model.eta, &round)?;
            let n = t + 1;
            if n.is_multiple_of(self.eval_every) || n == self.rounds {
                let objective = self.model.objective_impl()?;
                let mut probs = scorer.scores().clone();
                for i in 0..probs.rows() {
                    objective.transform(probs.row_mut(i));
                }
                valid = Some(evaluate(&self.metric, &probs, scorer.dataset().labels())?);
            }
        }
        Ok(RoundReport {
            round: t + 1,
            train_loss: loss / samples as f64,
            valid,
            comm_values: events[0].values_sent,
        })
    }

    pub fn reports(&self) -> &[RoundReport] {
        &self.reports
    }
}

pub struct TrainOutcome {
    pub model: BoosterModel,
    /// Final training scores in the original row order.
    pub train_scores: Matrix,
    pub reports: Vec<RoundReport>,
    pub ledgers: Vec<CommLedger>,
    /// Forward passes made by each worker.
    pub forward_passes: Vec<usize>,
}

/// Trains on one node without any transport.
pub fn train_single(
    cfg: &TrainConfig,
    train_ds: &SparseDataset,
    valid: Option<&SparseDataset>,
    on_report: &mut dyn FnMut(&RoundReport),
) -> Result<TrainOutcome> {
    let initial = cfg.initial_model(train_ds)?;
    let mut monitor = Monitor::new(cfg, &initial, 1, valid)?;
    let mut coll = LocalCollective::new();
    let result = run_worker(cfg, &initial, train_ds, &mut coll, &mut |ev, rm| {
        for r in monitor.observe(ev.clone(), Some(rm.clone()))? {
            on_report(&r);
        }
        Ok(())
    })?;
    Ok(TrainOutcome {
        model: result.model,
        train_scores: result.scores,
        reports: monitor.reports().to_vec(),
        ledgers: vec![result.ledger],
        forward_passes: vec![result.forward_passes],
    })
}

/// Trains with `cfg.partitions` workers running as threads of this process,
/// connected by the configured transport (TCP goes through localhost).
pub fn train(
    cfg: &TrainConfig,
    train_ds: &SparseDataset,
    valid: Option<&SparseDataset>,
    on_report: &mut dyn FnMut(&RoundReport),
) -> Result<TrainOutcome> {
    let initial = cfg.initial_model(train_ds)?;
    let world = cfg.partitions;
    let shards = partition(train_ds, world, cfg.partition_strategy)?;
    let mut monitor = Monitor::new(cfg, &initial, world, valid)?;
    info!(
        "training {} rounds on {} samples, {} worker(s) over {}, {} weights",
        cfg.rounds,
        train_ds.num_samples(),
        world,
        cfg.transport,
        initial.mode.name()
    );

    let mut collectives: Vec<Box<dyn Collective>> = Vec::with_capacity(world);
    let mut coordinator = None;
    match cfg.transport {
        TransportKind::InProcess => {
            let group = InProcessGroup::new(world, cfg.timeout)?;
            collectives.extend(group.workers().into_iter().map(|w| Box::new(w) as Box<dyn Collective>));
        }
        TransportKind::Tcp => {
            let coord = TcpCoordinator::bind("127.0.0.1:0", world, cfg.timeout)?;
            let addr = coord.local_addr()?;
            coordinator = Some(coord.spawn());
            let timeout = cfg.timeout;
            let connected: Vec<Result<TcpWorker>> = thread::scope(|s| {
                let hs: Vec<_> = (0..world)
                    .map(|r| s.spawn(move || TcpWorker::connect(addr, r, world, timeout)))
                    .collect();
                hs.into_iter().map(|h| h.join().expect("connect thread")).collect()
            });
            for w in connected {
                collectives.push(Box::new(w?));
            }
        }
    }

    let (tx, rx) = mpsc::channel::<(RoundEvent, Option<RoundModel>)>();
    let (results, monitor_result) = thread::scope(|s| {
        let handles: Vec<_> = collectives
            .into_iter()
            .zip(&shards)
            .map(|(mut coll, shard)| {
                let tx = tx.clone();
                let initial = &initial;
                s.spawn(move || {
                    let rank = coll.rank();
                    let res = run_worker(cfg, initial, shard, coll.as_mut(), &mut |ev, rm| {
                        let model = (rank == 0).then(|| rm.clone());
                        // the monitor going away is reported through its own result
                        let _ = tx.send((ev.clone(), model));
                        Ok(())
                    });
                    if let Err(e) = &res {
                        debug!("worker {rank} failed: {e}");
                    }
                    res
                })
            })
            .collect();
        drop(tx);

        let mut monitor_result = Ok(());
        for (ev, rm) in rx {
            if monitor_result.is_err() {
                continue;
            }
            match monitor.observe(ev, rm) {
                Ok(reports) => reports.iter().for_each(|r| on_report(r)),
                Err(e) => monitor_result = Err(e),
            }
        }
        let results: Vec<Result<WorkerResult>> = handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect();
        (results, monitor_result)
    });

    let coordinator_result = coordinator.map(|h| h.join().expect("coordinator thread panicked"));
    let results = pick_error(results)?;
    if let Some(Err(e)) = coordinator_result {
        return Err(e);
    }
    monitor_result?;

    let mut train_scores = Matrix::zeros(train_ds.num_samples(), initial.num_classes);
    let rows = partition_rows(train_ds.num_samples(), world, cfg.partition_strategy)?;
    for (shard_rows, res) in rows.iter().zip(&results) {
        for (local, &global) in shard_rows.iter().enumerate() {
            train_scores.row_mut(global).copy_from_slice(res.scores.row(local));
        }
    }
    let ledgers = results.iter().map(|r| r.ledger.clone()).collect();
    let forward_passes = results.iter().map(|r| r.forward_passes).collect();
    let model = results.into_iter().next().unwrap().model;
    Ok(TrainOutcome {
        model,
        train_scores,
        reports: monitor.reports().to_vec(),
        ledgers,
        forward_passes,
    })
}

/// When workers fail, most errors are just peers noticing the group broke;
/// report the one that is not a transport symptom when there is one.
fn pick_error(results: Vec<Result<WorkerResult>>) -> Result<Vec<WorkerResult>> {
    if results.iter().all(Result::is_ok) {
        return Ok(results.into_iter().map(|r| r.ok().unwrap()).collect());
    }
    let mut errors: Vec<GbunError> = results.into_iter().filter_map(Result::err).collect();
    let root = errors
        .iter()
        .position(|e| !matches!(e, GbunError::Network(_) | GbunError::Protocol(_)))
        .unwrap_or(0);
    Err(errors.swap_remove(root))
}
