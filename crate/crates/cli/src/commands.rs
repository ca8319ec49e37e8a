use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr};
use std::time::Duration;

use gbun::booster::{
    predict_batched, run_worker, save_model, to_probabilities, train as train_local, load_model,
    Monitor, RoundReport, TrainConfig,
};
use gbun::collective::{
    ledger_report, predicted_comm_values_multi, CommLedger, TcpCoordinator, TcpWorker,
};
use gbun::collective::wire::HEADER_LEN;
use gbun::dataset::{partition, read_libsvm_file, SparseDataset};
use gbun::metrics::evaluate;
use gbun::{GbunError, Matrix};
use log::info;
use serde_json::json;

use crate::{CliError, CommReportArgs, EvalArgs, PredictArgs, Role, TrainArgs};

type CliResult<T = ()> = Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn config_from(args: &TrainArgs) -> TrainConfig {
    TrainConfig {
        objective: args.objective.clone(),
        k: args.k,
        rounds: args.rounds,
        eta: args.eta,
        lambda: args.lambda,
        num_classes: args.num_class,
        mode: args.mode,
        seed: args.seed,
        sparsify_fraction: args.sparsify,
        partitions: args.partitions,
        transport: args.transport,
        partition_strategy: args.partition_strategy,
        batches: args.batches,
        eval_every: args.eval_every,
        metric: args.metric.clone(),
        timeout: Duration::from_secs(args.timeout_secs),
    }
}

/// Role-specific flags, checked before any data is read.
fn check_role(args: &TrainArgs) -> CliResult<Option<(String, usize, usize)>> {
    match args.role {
        Role::Standalone => {
            if args.coordinator.is_some() || args.world_size.is_some() || args.rank.is_some() {
                return Err(usage(
                    "--coordinator, --world-size and --rank need --role coordinator or worker",
                ));
            }
            Ok(None)
        }
        Role::Coordinator | Role::Worker => {
            let addr = args
                .coordinator
                .clone()
                .ok_or_else(|| usage("this role requires --coordinator <host:port>"))?;
            let world = args
                .world_size
                .ok_or_else(|| usage("this role requires --world-size"))?;
            if world == 0 {
                return Err(usage("--world-size must be at least 1"));
            }
            if args.partitions != 1 {
                return Err(usage("--partitions applies to standalone runs; use --world-size"));
            }
            let rank = match (args.role, args.rank) {
                (Role::Coordinator, None | Some(0)) => 0,
                (Role::Coordinator, Some(_)) => {
                    return Err(usage("the coordinator always trains as rank 0"))
                }
                (_, None) => return Err(usage("worker role requires --rank")),
                (_, Some(r)) if r == 0 || r >= world => {
                    return Err(usage(format!("--rank must lie in 1..{world} for workers")))
                }
                (_, Some(r)) => r,
            };
            Ok(Some((addr, world, rank)))
        }
    }
}

fn write_ledger(path: &str, model_k: usize, classes: usize, ledgers: &[CommLedger]) -> CliResult {
    let dump = json!({ "k": model_k, "num_classes": classes, "ledgers": ledgers });
    let text = serde_json::to_string_pretty(&dump)
        .map_err(|e| GbunError::Data(format!("cannot serialize ledger: {e}")))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn train(args: TrainArgs) -> CliResult {
    let role = check_role(&args)?;
    let cfg = config_from(&args);
    cfg.validate()?;
    let train_ds = read_libsvm_file(&args.data, args.num_features)?;
    let valid = match &args.valid {
        Some(path) => Some(read_libsvm_file(path, None)?),
        None => None,
    };
    let stdout = io::stdout();
    let mut print = |r: &RoundReport| {
        let mut out = stdout.lock();
        let _ = writeln!(out, "{r}");
        let _ = out.flush();
    };

    let (model, ledgers) = match role {
        None => {
            let outcome = train_local(&cfg, &train_ds, valid.as_ref(), &mut print)?;
            (outcome.model, outcome.ledgers)
        }
        Some((addr, world, rank)) => {
            train_distributed(&cfg, &args, &train_ds, valid.as_ref(), &addr, world, rank, &mut print)?
        }
    };
    save_model(&model, &args.model)?;
    if let Some(path) = &args.ledger {
        write_ledger(path, model.k, model.num_classes, &ledgers)?;
    }
    info!("wrote {} rounds to {}", model.num_rounds(), args.model);
    Ok(())
}

/// Address to dial for a coordinator listening on `bound`.
fn dial_address(bound: std::net::SocketAddr) -> std::net::SocketAddr {
    let mut addr = bound;
    match bound.ip() {
        IpAddr::V4(ip) if ip.is_unspecified() => addr.set_ip(IpAddr::V4(Ipv4Addr::LOCALHOST)),
        IpAddr::V6(ip) if ip.is_unspecified() => addr.set_ip(IpAddr::V6(Ipv6Addr::LOCALHOST)),
        _ => {}
    }
    addr
}

/// One process of a TCP group. Every process reads the full data set and
/// keeps its own partition, so all of them agree on the model setup. The
/// logged train loss covers this worker's partition only.
#[allow(clippy::too_many_arguments)]
fn train_distributed(
    cfg: &TrainConfig,
    args: &TrainArgs,
    train_ds: &SparseDataset,
    valid: Option<&SparseDataset>,
    addr: &str,
    world: usize,
    rank: usize,
    print: &mut dyn FnMut(&RoundReport),
) -> CliResult<(gbun::booster::BoosterModel, Vec<CommLedger>)> {
    let initial = cfg.initial_model(train_ds)?;
    let shard = partition(train_ds, world, cfg.partition_strategy)?
        .into_iter()
        .nth(rank)
        .expect("rank checked against world size");

    let timeout = cfg.timeout;
    let (relay, connect_to) = if args.role == Role::Coordinator {
        let coord = TcpCoordinator::bind(addr, world, timeout)?;
        let dial = dial_address(coord.local_addr()?);
        info!("coordinator listening on {}", coord.local_addr()?);
        (Some(coord.spawn()), dial.to_string())
    } else {
        (None, addr.to_string())
    };
    let mut coll = TcpWorker::connect(connect_to.as_str(), rank, world, timeout)?;

    let mut monitor = Monitor::new(cfg, &initial, 1, valid)?;
    let result = run_worker(cfg, &initial, &shard, &mut coll, &mut |ev, rm| {
        let mut local = ev.clone();
        local.rank = 0;
        for r in monitor.observe(local, Some(rm.clone()))? {
            print(&r);
        }
        Ok(())
    });
    drop(coll);
    let relay_result = relay.map(|h| h.join().expect("relay thread panicked"));
    let result = result?;
    if let Some(r) = relay_result {
        r?;
    }
    Ok((result.model, vec![result.ledger]))
}

fn format_rows(m: &Matrix, out: &mut dyn Write) -> io::Result<()> {
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", line.join("\t"))?;
    }
    Ok(())
}

pub fn predict(args: PredictArgs) -> CliResult {
    if args.batches == 0 {
        return Err(usage("--batches must be at least 1"));
    }
    let model = load_model(&args.model)?;
    let ds = read_libsvm_file(&args.data, None)?;
    let mut preds = predict_batched(&model, &ds, args.batches)?;
    if args.probabilities {
        preds = to_probabilities(&model, &preds)?;
    }
    match &args.output {
        Some(path) => {
            let mut w = BufWriter::new(File::create(path)?);
            format_rows(&preds, &mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = io::stdout();
            let mut w = BufWriter::new(stdout.lock());
            format_rows(&preds, &mut w)?;
            w.flush()?;
        }
    }
    Ok(())
}

fn read_predictions(path: &str) -> CliResult<Matrix> {
    let reader = BufReader::new(File::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| GbunError::Parse {
                line: i + 1,
                msg: format!("bad prediction value: {e}"),
            })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(GbunError::Parse {
                    line: i + 1,
                    msg: format!("{} columns, expected {}", row.len(), first.len()),
                }
                .into());
            }
        }
        rows.push(row);
    }
    Ok(Matrix::from_rows(&rows))
}

pub fn eval(args: EvalArgs) -> CliResult {
    let preds = read_predictions(&args.predictions)?;
    let ds = read_libsvm_file(&args.data, None)?;
    if preds.rows() != ds.num_samples() {
        return Err(GbunError::Data(format!(
            "{} predictions for {} samples",
            preds.rows(),
            ds.num_samples()
        ))
        .into());
    }
    let result = evaluate(&args.metric, &preds, ds.labels())?;
    println!("{result}");
    Ok(())
}

fn analytic_report(k: usize, classes: usize, workers: usize) -> CliResult {
    if k == 0 || classes == 0 || workers == 0 {
        return Err(usage("--analytic needs positive K, C and S"));
    }
    let norm = 2 * k + 1;
    let system = classes * (k * k + k);
    let per_worker = predicted_comm_values_multi(k, classes);
    let frames = 2 * (1 + classes);
    println!("k={k} classes={classes} workers={workers}");
    println!("norm_stats_values={norm}");
    println!("system_ab_values={system}");
    if classes == 1 {
        println!(
            "values_per_worker_per_round={per_worker} expansion=K^2+3K+1={}+{}+1",
            k * k,
            3 * k
        );
    } else {
        println!("values_per_worker_per_round={per_worker} expansion=(2K+1)+C(K^2+K)");
    }
    println!("payload_bytes_per_worker_per_round={}", per_worker * 8);
    println!(
        "tcp_bytes_per_worker_per_round={} frames={frames} header_bytes={HEADER_LEN}",
        frames * HEADER_LEN + 2 * per_worker * 8
    );
    println!("values_all_workers_per_round={}", per_worker * workers);
    Ok(())
}

fn ledger_file_report(path: &str) -> CliResult {
    let text = fs::read_to_string(path)?;
    let malformed = |e: String| GbunError::Data(format!("malformed ledger {path}: {e}"));
    let dump: serde_json::Value = serde_json::from_str(&text).map_err(|e| malformed(e.to_string()))?;
    let k = dump["k"].as_u64().ok_or_else(|| malformed("missing k".into()))? as usize;
    let classes = dump["num_classes"]
        .as_u64()
        .ok_or_else(|| malformed("missing num_classes".into()))? as usize;
    let ledgers: Vec<CommLedger> =
        serde_json::from_value(dump["ledgers"].clone()).map_err(|e| malformed(e.to_string()))?;
    let predicted = predicted_comm_values_multi(k, classes) as u64;
    let frames = 2 * (1 + classes) as u64;
    let mut all_match = true;
    for t in ledger_report(&ledgers) {
        let wire_ledgers = ledgers.iter().filter(|l| l.header_bytes > 0).count() as u64;
        let header = ledgers.first().map_or(0, |l| l.header_bytes);
        let predicted_bytes = wire_ledgers * (frames * header + 2 * predicted * 8);
        let ok = t.max_worker_values_sent == predicted
            && t.values_sent == predicted * t.workers as u64
            && t.bytes_on_wire == predicted_bytes;
        all_match &= ok;
        println!(
            "round={} workers={} values_per_worker={} predicted_values={} bytes_on_wire={} predicted_bytes={} match={}",
            t.round + 1,
            t.workers,
            t.max_worker_values_sent,
            predicted,
            t.bytes_on_wire,
            predicted_bytes,
            ok
        );
    }
    println!("all_rounds_match={all_match}");
    Ok(())
}

pub fn comm_report(args: CommReportArgs) -> CliResult {
    match (&args.analytic, &args.ledger) {
        (Some(v), _) => analytic_report(v[0], v[1], v[2]),
        (None, Some(path)) => ledger_file_report(path),
        (None, None) => Err(usage("give --ledger <file> or --analytic K C S")),
    }
}
