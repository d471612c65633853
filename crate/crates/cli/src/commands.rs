use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use pqfl::bench::{self, BenchError, CsvSink, RoundMetrics, RoundSink};
use pqfl::fedcore::{self, Architecture, ClientDataset, FedError, Optimizer, SyntheticSpec, TrainConfig};
use pqfl::protocol::{self, ProtocolConfig, ProtocolError, RunOptions};
use pqfl::seed;
use pqfl::sig::{self, ParameterSet, SchemeId, SigError};

use crate::{BenchArgs, CliError, DatasetKind, KeygenArgs, OptimizerKind, ReportArgs, RunArgs};

/// Writes to stdout, ignoring a closed pipe.
fn say(text: &str) {
    let _ = io::stdout().lock().write_all(text.as_bytes());
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn sig_error(e: SigError) -> CliError {
    match e {
        SigError::UnknownName(_) | SigError::ParameterSetMismatch { .. } | SigError::StrictModeViolation(_) => {
            CliError::Usage(e.to_string())
        }
        other => runtime(other),
    }
}

fn fed_error(e: FedError) -> CliError {
    match e {
        FedError::InvalidConfig(_) | FedError::InvalidDataset(_) | FedError::TooFewSamples { .. } => {
            CliError::Usage(e.to_string())
        }
        other => runtime(other),
    }
}

fn protocol_error(e: ProtocolError) -> CliError {
    match e {
        ProtocolError::Sig(e) => sig_error(e),
        ProtocolError::Fed(e) => fed_error(e),
        other => runtime(other),
    }
}

fn bench_error(e: BenchError) -> CliError {
    match e {
        BenchError::TooFewIterations { .. } => CliError::Usage(e.to_string()),
        BenchError::Sig(e) => sig_error(e),
        other => runtime(other),
    }
}

/// A family name picks its default parameter set; a parameter set name is
/// taken as is.
fn parse_params(name: &str) -> Result<ParameterSet, CliError> {
    let name = name.trim();
    if let Ok(scheme) = name.parse::<SchemeId>() {
        return Ok(scheme.default_params());
    }
    name.parse::<ParameterSet>().map_err(sig_error)
}

/// `all` expands to the post-quantum families.
fn parse_param_list(list: &str) -> Result<Vec<ParameterSet>, CliError> {
    if list.trim() == "all" {
        return Ok(SchemeId::POST_QUANTUM.iter().map(|s| s.default_params()).collect());
    }
    let mut out = Vec::new();
    for item in list.split(',').filter(|s| !s.trim().is_empty()) {
        let p = parse_params(item)?;
        if !out.contains(&p) {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(CliError::Usage("no schemes given".into()));
    }
    Ok(out)
}

fn with_param_set(scheme: ParameterSet, param_set: Option<ParameterSet>) -> Result<ParameterSet, CliError> {
    match param_set {
        None => Ok(scheme),
        Some(p) if p.scheme() == scheme.scheme() => Ok(p),
        Some(p) => Err(sig_error(SigError::ParameterSetMismatch {
            scheme: scheme.scheme(),
            params: p,
        })),
    }
}

fn write_secret(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut opts = OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(path)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        f.set_permissions(fs::Permissions::from_mode(0o600))?;
    }
    f.write_all(bytes)
}

pub fn keygen(args: &KeygenArgs) -> Result<(), CliError> {
    let params = with_param_set(parse_params(&args.scheme)?, args.param_set)?;
    sig::ensure_allowed(params.scheme(), args.strict).map_err(sig_error)?;
    if args.clients == 0 {
        return Err(CliError::Usage("--clients must be at least 1".into()));
    }
    fs::create_dir_all(&args.out).map_err(|e| runtime(format!("{}: {e}", args.out.display())))?;
    let meta = sig::metadata(params);
    let mut manifest = String::from("# id role scheme parameter_set pk_len sk_len\n");
    for id in 0..=args.clients {
        let seed = args.seed.map(|s| seed::derive_bytes(s, "keygen", &[u64::from(id)]));
        let kp = sig::keygen(params, seed.as_ref()).map_err(sig_error)?;
        let stem = args.out.join(format!("participant-{id:02}"));
        let pk = stem.with_extension("pk");
        let sk = stem.with_extension("sk");
        fs::write(&pk, &kp.public_key).map_err(|e| runtime(format!("{}: {e}", pk.display())))?;
        write_secret(&sk, &kp.secret_key).map_err(|e| runtime(format!("{}: {e}", sk.display())))?;
        let role = if id == protocol::SERVER_ID { "server" } else { "client" };
        let _ = writeln!(
            manifest,
            "{id} {role} {} {} {} {}",
            params.scheme(),
            params,
            kp.public_key.len(),
            kp.secret_key.len()
        );
    }
    let path = args.out.join("keys.manifest");
    fs::write(&path, manifest).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    say(&format!(
        "wrote {} key pairs ({params}, pk {} B, sk {} B) to {}\n",
        args.clients + 1,
        meta.public_key_len,
        meta.secret_key_len,
        args.out.display()
    ));
    Ok(())
}

fn load_dataset(args: &RunArgs) -> Result<ClientDataset, CliError> {
    match args.dataset {
        DatasetKind::Synthetic => fedcore::synthetic(&SyntheticSpec {
            num_samples: args.samples,
            num_features: args.features,
            num_classes: args.classes,
            separation: args.separation,
            seed: seed::derive_seed(args.seed, "data", &[]),
        })
        .map_err(fed_error),
        DatasetKind::Idx => {
            let (Some(images), Some(labels)) = (&args.images, &args.labels) else {
                return Err(CliError::Usage("--dataset idx needs --images and --labels".into()));
            };
            for p in [images, labels] {
                if !p.is_file() {
                    return Err(CliError::Usage(format!("{}: no such file", p.display())));
                }
            }
            fedcore::load_idx(images, labels, args.subset, args.classes).map_err(fed_error)
        }
    }
}

/// Prints each round as it completes and appends it to the CSV.
struct ConsoleSink {
    csv: CsvSink,
}

impl RoundSink for ConsoleSink {
    fn record(&self, m: RoundMetrics) -> Result<(), BenchError> {
        say(&format!(
            "round {:>3} scheme={} verified={} rejected={} loss={:.6} sign_s={:.6} verify_s={:.6} wall_s={:.6}\n",
            m.round, m.scheme, m.verified_count, m.rejected_count, m.global_loss, m.sign_time_s, m.verify_time_s, m.wall_time_s
        ));
        self.csv.record(m)
    }
}

pub fn run(args: &RunArgs) -> Result<(), CliError> {
    let schemes = parse_param_list(&args.scheme)?;
    let schemes = match (args.param_set, schemes.as_slice()) {
        (None, _) => schemes,
        (Some(_), [one]) => vec![with_param_set(*one, args.param_set)?],
        (Some(_), _) => return Err(CliError::Usage("--param-set needs a single --scheme".into())),
    };
    for p in &schemes {
        sig::ensure_allowed(p.scheme(), args.strict).map_err(sig_error)?;
    }
    let dataset = load_dataset(args)?;
    let architecture = if args.hidden == 0 {
        Architecture::logistic(dataset.num_features(), args.classes)
    } else {
        Architecture::mlp(dataset.num_features(), args.hidden, args.classes)
    };
    let mut cfg = match args.optimizer {
        OptimizerKind::Sgd => TrainConfig::default(),
        OptimizerKind::Adamw => TrainConfig {
            optimizer: match Optimizer::adamw() {
                Optimizer::AdamW { beta1, beta2, eps, .. } => Optimizer::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay: args.weight_decay,
                },
                other => other,
            },
            ..TrainConfig::adamw_default()
        },
    };
    cfg.num_clients = args.clients;
    cfg.num_rounds = args.rounds;
    cfg.local_epochs = args.local_epochs;
    cfg.batch_size = args.batch_size;
    cfg.seed = args.seed;
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    let setup = fedcore::FederatedSetup::new(dataset, architecture, cfg).map_err(fed_error)?;

    let sink = ConsoleSink {
        csv: CsvSink::create(&args.out).map_err(runtime)?,
    };
    let mut finals = Vec::new();
    for &params in &schemes {
        let opts = RunOptions {
            params,
            protocol: ProtocolConfig {
                strict: args.strict,
                verify_signatures: !args.no_verify,
                bind_header: !args.payload_only_signatures,
            },
            attack: args.attack.clone(),
            transport: args.transport.clone(),
        };
        let result = protocol::run_training_with_setup(&setup, &opts, Some(&sink)).map_err(protocol_error)?;
        let verified: usize = result.outcomes.iter().map(|o| o.verified.len()).sum();
        let rejected: usize = result.outcomes.iter().map(|o| o.rejected.len()).sum();
        let loss = result.outcomes.last().map_or(f64::NAN, |o| o.global_loss);
        finals.push(format!(
            "final scheme={} params={} rounds={} verified={verified} rejected={rejected} loss={loss:.9}",
            params.scheme(),
            params,
            result.outcomes.len()
        ));
    }
    for line in finals {
        say(&format!("{line}\n"));
    }
    say(&format!("metrics written to {}\n", args.out.display()));
    Ok(())
}

pub fn bench(args: &BenchArgs) -> Result<(), CliError> {
    let params = parse_param_list(&args.schemes)?;
    if args.sizes.is_empty() || args.sizes.contains(&0) {
        return Err(CliError::Usage("--sizes must be positive byte counts".into()));
    }
    let records = bench::microbench(&params, &args.sizes, args.iters).map_err(bench_error)?;
    if let Some(out) = &args.out {
        let f = File::create(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
        bench::write_microbench_csv(&records, f).map_err(runtime)?;
    }
    say(&bench::summarize_microbench(&records));
    Ok(())
}

pub fn report(args: &ReportArgs) -> Result<(), CliError> {
    let file = File::open(&args.csv).map_err(|e| CliError::Usage(format!("{}: {e}", args.csv.display())))?;
    let mut header = String::new();
    BufReader::new(&file).read_line(&mut header).map_err(runtime)?;
    let columns: Vec<&str> = header.trim().split(',').collect();
    let read = || File::open(&args.csv).map_err(runtime);
    if columns.first() == Some(&"scheme") && columns.contains(&"parameter_set") {
        let records = bench::parse_microbench_csv(read()?).map_err(runtime)?;
        say(&bench::summarize_microbench(&records));
    } else if columns == bench::ROUND_CSV_HEADER {
        let records = bench::parse_csv(read()?).map_err(runtime)?;
        say(&bench::summarize(&records));
    } else {
        return Err(CliError::Usage(format!(
            "{}: not a run or bench CSV (header {:?})",
            args.csv.display(),
            header.trim()
        )));
    }
    Ok(())
}
