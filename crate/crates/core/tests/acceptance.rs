//! Acceptance criteria 1-10. Runs sequentially so timing-sensitive checks do
//! not compete with each other, and prints one line per criterion.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use pqfl::bench::{microbench, read_csv, BenchOp, CsvSink, MIN_ITERATIONS};
use pqfl::channel::{AttackConfig, AttackKind, DeliveryAction, DirectionFilter, PoisonSource, ReplayScope, Target};
use pqfl::codec::{self, MessageHeader, MessageType, ParameterVector, SignedEnvelope};
use pqfl::fedcore::{loss_and_grad, plain_fedavg, synthetic, Architecture, FederatedSetup, SyntheticSpec, TrainConfig};
use pqfl::protocol::{run_training_with_setup, ProtocolConfig, Rejection, RunOptions, TrainingResult, Transport};
use pqfl::sig::{self, ParameterSet, SchemeId, SignatureBytes};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

const SCHEMES: [ParameterSet; 4] = [
    ParameterSet::MlDsa44,
    ParameterSet::Falcon1024,
    ParameterSet::SphincsSha2_128s,
    ParameterSet::HmacSha256,
];

/// M = 10, T = 10 on the default synthetic dataset with a small MLP.
fn standard_setup(seed: u64) -> FederatedSetup {
    let data = synthetic(&SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    })
    .expect("synthetic data");
    let cfg = TrainConfig {
        num_clients: 10,
        num_rounds: 10,
        batch_size: 32,
        learning_rate: 0.05,
        seed,
        ..TrainConfig::default()
    };
    FederatedSetup::new(data, Architecture::mlp(32, 64, 10), cfg).expect("setup")
}

fn run(setup: &FederatedSetup, opts: &RunOptions) -> Result<TrainingResult, String> {
    run_training_with_setup(setup, opts, None).map_err(|e| e.to_string())
}

fn with_attack(params: ParameterSet, attack: AttackConfig) -> RunOptions {
    let mut o = RunOptions::new(params);
    o.attack = attack;
    o
}

fn flip_bit(bytes: &mut [u8], bit: usize) {
    bytes[bit / 8] ^= 1 << (bit % 8);
}

fn signature_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let max_len = 4usize << 20;
    let mut summary = Vec::new();
    for p in SCHEMES {
        let kp = sig::keygen(p, Some(&[1; 32])).map_err(|e| e.to_string())?;
        let other = sig::keygen(p, Some(&[2; 32])).map_err(|e| e.to_string())?;
        let mut signed = Vec::with_capacity(100);
        for i in 0..100 {
            let len = match i {
                0 => 1,
                1 => max_len,
                // log-uniform over [1 B, 4 MiB]
                _ => (2f64.powf(rng.random_range(0.0..22.0)) as usize).clamp(1, max_len),
            };
            let mut msg = vec![0u8; len];
            rng.fill_bytes(&mut msg);
            let s = sig::sign(&kp, &msg).map_err(|e| e.to_string())?;
            ensure!(sig::verify(&kp.public_key, p, &msg, &s), "{p}: honest signature {i} ({len} B) rejected");
            ensure!(!sig::verify(&other.public_key, p, &msg, &s), "{p}: signature {i} verified under a wrong key");
            signed.push((msg, s));
        }
        for k in 0..256 {
            let (msg, s) = &signed[rng.random_range(0..signed.len())];
            let mut m = msg.clone();
            let bit = rng.random_range(0..m.len() * 8);
            flip_bit(&mut m, bit);
            ensure!(!sig::verify(&kp.public_key, p, &m, s), "{p}: payload flip {k} accepted");
            let mut t = SignatureBytes {
                scheme: s.scheme,
                bytes: s.bytes.clone(),
            };
            let bit = rng.random_range(0..t.bytes.len() * 8);
            flip_bit(&mut t.bytes, bit);
            ensure!(!sig::verify(&kp.public_key, p, msg, &t), "{p}: signature flip {k} accepted");
        }
        summary.push(p.scheme().name());
    }
    Ok(format!(
        "{}: 100 round trips, 100 wrong-key rejections, 256+256 bit flips rejected",
        summary.join("/")
    ))
}

fn median(mut v: Vec<usize>) -> usize {
    v.sort_unstable();
    v[v.len() / 2]
}

fn size_and_speed_orderings() -> Outcome {
    let params = [ParameterSet::MlDsa44, ParameterSet::Falcon1024, ParameterSet::SphincsSha2_128s];
    let recs = microbench(&params, &[1 << 20], MIN_ITERATIONS).map_err(|e| e.to_string())?;
    let speed: Vec<f64> = params
        .iter()
        .map(|p| {
            recs.iter()
                .filter(|r| r.parameter_set == p.name() && r.op != BenchOp::Keygen)
                .map(|r| r.median_s)
                .sum()
        })
        .collect();
    let mut msg = vec![0u8; 1 << 20];
    ChaCha8Rng::seed_from_u64(2).fill_bytes(&mut msg);
    let mut sig_len = Vec::new();
    let mut pk_len = Vec::new();
    for p in params {
        let kp = sig::keygen(p, None).map_err(|e| e.to_string())?;
        pk_len.push(kp.public_key.len());
        let n = if p.scheme() == SchemeId::SphincsPlus { 3 } else { MIN_ITERATIONS };
        let lens = (0..n)
            .map(|_| sig::sign(&kp, &msg).map(|s| s.len()))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| e.to_string())?;
        sig_len.push(median(lens));
    }
    let [d, f, s] = [0, 1, 2];
    ensure!(
        speed[d] < speed[f] && speed[f] < speed[s],
        "sign+verify medians dilithium {:.6} falcon {:.6} sphincs+ {:.6}",
        speed[d],
        speed[f],
        speed[s]
    );
    ensure!(sig_len[f] < sig_len[d] && sig_len[d] < sig_len[s], "signature sizes {sig_len:?}");
    ensure!(pk_len[s] < pk_len[d] && pk_len[d] < pk_len[f], "public key sizes {pk_len:?}");
    Ok(format!(
        "sign+verify @1 MiB {:.3}/{:.3}/{:.3} ms; sig {}/{}/{} B; pk {}/{}/{} B (dilithium/falcon/sphincs+)",
        speed[d] * 1e3,
        speed[f] * 1e3,
        speed[s] * 1e3,
        sig_len[d],
        sig_len[f],
        sig_len[s],
        pk_len[d],
        pk_len[f],
        pk_len[s]
    ))
}

fn scheme_transparency() -> Outcome {
    let setup = standard_setup(42);
    let runs = SCHEMES
        .iter()
        .map(|&p| run(&setup, &RunOptions::new(p)).map(|r| (p, r)))
        .collect::<Result<Vec<_>, _>>()?;
    let reference = &runs[0].1.model.params;
    for (p, r) in &runs {
        ensure!(r.model.params.bit_eq(reference), "{p} final parameters differ from {}", runs[0].0);
        ensure!(r.outcomes.iter().all(|o| o.verified.len() == 10), "{p}: an honest update was rejected");
    }
    Ok(format!(
        "4 schemes, M=10, T=10: final parameters bit-identical, final loss {:.6}",
        runs[0].1.outcomes.last().map(|o| o.global_loss).unwrap_or(f64::NAN)
    ))
}

fn oracle_equivalence() -> Outcome {
    let setup = standard_setup(7);
    let secured = run(&setup, &RunOptions::new(ParameterSet::MlDsa44))?;
    let ids: Vec<u32> = setup.client_ids().collect();
    let (oracle, losses) = plain_fedavg(&setup, &ids).map_err(|e| e.to_string())?;
    ensure!(secured.model.params.bit_eq(&oracle.params), "secured run differs from plain FedAvg");
    for (o, l) in secured.outcomes.iter().zip(&losses) {
        ensure!(o.global_loss.to_bits() == l.to_bits(), "round {} loss {} vs {}", o.round, o.global_loss, l);
    }
    Ok(format!("dilithium run = plain FedAvg bit-exactly over {} parameters", oracle.params.len()))
}

fn poisoning_defense() -> Outcome {
    let setup = standard_setup(11);
    let honest: Vec<u32> = (2..=10).collect();
    let (oracle, _) = plain_fedavg(&setup, &honest).map_err(|e| e.to_string())?;
    let mut substitute = AttackConfig::new(AttackKind::Substitute, Target::Client(1), DirectionFilter::ClientToServer, 1.0, 3);
    substitute.poison = Some(PoisonSource::Negate { scale: 1.0 });
    let attacks = [
        ("bitflip", AttackConfig::new(AttackKind::BitFlip, Target::Client(1), DirectionFilter::ClientToServer, 1.0, 3)),
        ("substitute", substitute),
    ];
    let mut tampered = 0;
    for (name, attack) in attacks {
        let r = run(&setup, &with_attack(ParameterSet::MlDsa44, attack))?;
        for o in &r.outcomes {
            ensure!(o.attacked_accepted() == 0, "{name}: tampered update entered S in round {}", o.round);
            ensure!(o.verified == honest, "{name}: round {} verified {:?}", o.round, o.verified);
            ensure!(
                o.rejected == vec![(1, Rejection::SignatureInvalid)],
                "{name}: round {} rejections {:?}",
                o.round,
                o.rejected
            );
        }
        ensure!(r.model.params.bit_eq(&oracle.params), "{name}: final model differs from the 9-client oracle");
        tampered += r.channel.tampered;
    }
    Ok(format!("{tampered} tampered envelopes, all rejected; final model = 9-client oracle for bitflip and substitute"))
}

fn defense_value() -> Outcome {
    let setup = standard_setup(13);
    let mut attack = AttackConfig::new(AttackKind::Substitute, Target::Client(1), DirectionFilter::ClientToServer, 1.0, 5);
    attack.poison = Some(PoisonSource::Negate { scale: 1.0 });
    let secured = run(&setup, &with_attack(ParameterSet::MlDsa44, attack.clone()))?;
    let mut baseline_opts = with_attack(ParameterSet::MlDsa44, attack);
    baseline_opts.protocol = ProtocolConfig::baseline();
    let baseline = run(&setup, &baseline_opts)?;
    let s = secured.outcomes.last().map(|o| o.global_loss).unwrap_or(f64::NAN);
    let b = baseline.outcomes.last().map(|o| o.global_loss).unwrap_or(f64::NAN);
    ensure!(
        baseline.outcomes.iter().all(|o| o.attacked_accepted() == 1),
        "baseline did not aggregate the poisoned update every round"
    );
    ensure!(b > s, "baseline final loss {b:.6} does not exceed secured {s:.6}");
    Ok(format!("final loss baseline {b:.6} > secured {s:.6} (margin {:.6})", b - s))
}

fn replay_defense() -> Outcome {
    let data = synthetic(&SyntheticSpec {
        num_samples: 400,
        num_features: 8,
        num_classes: 4,
        seed: 17,
        ..SyntheticSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        num_clients: 10,
        num_rounds: 80,
        batch_size: 10,
        learning_rate: 0.05,
        seed: 17,
        ..TrainConfig::default()
    };
    let setup = FederatedSetup::new(data, Architecture::logistic(8, 4), cfg).map_err(|e| e.to_string())?;
    let mut attack = AttackConfig::new(AttackKind::Replay, Target::All, DirectionFilter::Both, 0.5, 23);
    attack.replay_scope = ReplayScope::PriorRounds;
    let r = run(&setup, &with_attack(ParameterSet::MlDsa44, attack))?;
    let messages = r.channel.delivered();
    ensure!(messages >= 1000, "only {messages} messages in the campaign");
    let mut up = 0;
    let mut down = 0;
    for o in &r.outcomes {
        let replayed_up = o.uplink.iter().filter(|u| u.action == DeliveryAction::Replayed).count();
        ensure!(
            o.uplink.iter().all(|u| u.action != DeliveryAction::Replayed || !u.accepted),
            "round {}: a replayed update entered S",
            o.round
        );
        let stale = o.rejected.iter().filter(|(_, why)| matches!(why, Rejection::StaleRound(_))).count();
        ensure!(stale == replayed_up, "round {}: {replayed_up} uplink replays, {stale} stale-round rejections", o.round);
        ensure!(o.rejected.len() == stale, "round {}: unexpected rejections {:?}", o.round, o.rejected);
        for (id, why) in &o.abstained {
            ensure!(why.starts_with("replay detected"), "round {}: client {id} abstained: {why}", o.round);
        }
        up += replayed_up;
        down += o.abstained.len();
    }
    ensure!(up as u64 + down as u64 == r.channel.replayed, "replays {} vs rejected {}", r.channel.replayed, up + down);
    ensure!(up > 0 && down > 0, "campaign did not replay in both directions");
    Ok(format!(
        "{messages} messages, {} replays ({up} uplink stale-round, {down} downlink ReplayDetected), 0 entered S",
        r.channel.replayed
    ))
}

fn random_vector(rng: &mut ChaCha8Rng) -> ParameterVector {
    let rank = rng.random_range(1..=4);
    let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(1..=6)).collect();
    let n: usize = shape.iter().product();
    let values = (0..n)
        .map(|_| loop {
            let v = f32::from_bits(rng.random());
            if v.is_finite() {
                break v;
            }
        })
        .collect();
    ParameterVector::new(shape, values).expect("finite values")
}

fn codec_exactness() -> Outcome {
    let one = ParameterVector::new(vec![1], vec![1.0]).map_err(|e| e.to_string())?;
    let bytes = codec::encode_params(&one).map_err(|e| e.to_string())?;
    let expected = [1, 0, 0, 0, 1, 0, 0, 0, 0, 0, 0, 0, 0x00, 0x00, 0x80, 0x3F];
    ensure!(bytes == expected, "1.0f encodes to {bytes:02x?}");
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for i in 0..1000 {
        let p = random_vector(&mut rng);
        let enc = codec::encode_params(&p).map_err(|e| e.to_string())?;
        let dec = codec::decode_params(&enc).map_err(|e| format!("case {i}: {e}"))?;
        ensure!(dec.bit_eq(&p) && dec.shape() == p.shape(), "params case {i} not bit-exact");
        ensure!(codec::encode_params(&dec).map_err(|e| e.to_string())? == enc, "params case {i} re-encodes differently");
    }
    let schemes = [SchemeId::Dilithium, SchemeId::Falcon, SchemeId::SphincsPlus, SchemeId::TestScheme];
    let types = [MessageType::ModelDistribution, MessageType::UpdateSubmission, MessageType::PublicKeyAnnounce];
    for i in 0..1000 {
        let payload = codec::encode_params(&random_vector(&mut rng)).map_err(|e| e.to_string())?;
        let scheme = schemes[rng.random_range(0..4)];
        let mut sig = vec![0u8; rng.random_range(0..8000)];
        rng.fill_bytes(&mut sig);
        let env = SignedEnvelope {
            header: MessageHeader {
                msg_type: types[rng.random_range(0..3)],
                scheme,
                round: rng.random(),
                sender_id: rng.random(),
                payload_len: payload.len() as u64,
            },
            payload,
            signature: SignatureBytes { scheme, bytes: sig },
        };
        let enc = codec::encode_envelope(&env).map_err(|e| e.to_string())?;
        ensure!(enc.len() == env.encoded_len(), "envelope case {i} length");
        let dec = codec::decode_envelope(&enc).map_err(|e| format!("envelope case {i}: {e}"))?;
        ensure!(dec == env, "envelope case {i} not bit-exact");
        ensure!(codec::encode_envelope(&dec).map_err(|e| e.to_string())? == enc, "envelope case {i} re-encodes differently");
    }
    Ok("1.0f layout matches; 1000 parameter vectors and 1000 envelopes round-trip bit-exactly".into())
}

fn gradient_check() -> Outcome {
    let mut worst = 0f64;
    let instances = 24;
    for seed in 0..instances {
        let (arch, data, params) = common::random_instance(100 + seed);
        let rows: Vec<usize> = (0..data.len()).collect();
        let mut grad = vec![0.0; params.len()];
        loss_and_grad(&arch, &params, &data, &rows, Some(&mut grad));
        let fd = common::fd_grad(&arch, &params, &data, &rows, 1e-6);
        for (i, (&a, &n)) in grad.iter().zip(&fd).enumerate() {
            let e = common::rel_err(a, n);
            worst = worst.max(e);
            ensure!(e <= 1e-4, "instance {seed} parameter {i}: analytic {a} vs numeric {n} (rel {e:e})");
        }
    }
    Ok(format!("{instances} logistic/MLP instances, worst relative error {worst:.2e} (limit 1e-4)"))
}

fn envelope_len(param_count: usize, sig_len: usize) -> u64 {
    let payload = 4 + 8 + 4 * param_count;
    (codec::HEADER_LEN + payload + 4 + sig_len) as u64
}

fn transport_equivalence() -> Outcome {
    let setup = standard_setup(21);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut results = Vec::new();
    for (name, transport) in [("inprocess", Transport::InProcess), ("tcp", Transport::Tcp("127.0.0.1:0".into()))] {
        let path = dir.path().join(format!("{name}.csv"));
        let sink = CsvSink::create(&path).map_err(|e| e.to_string())?;
        let mut opts = RunOptions::new(ParameterSet::MlDsa44);
        opts.transport = transport;
        let r = run_training_with_setup(&setup, &opts, Some(&sink)).map_err(|e| e.to_string())?;
        drop(sink);
        let rows = read_csv(&path).map_err(|e| e.to_string())?;
        results.push((r, rows));
    }
    let (inproc, in_rows) = &results[0];
    let (tcp, tcp_rows) = &results[1];
    ensure!(tcp.model.params.bit_eq(&inproc.model.params), "tcp and in-process final parameters differ");
    let p = setup.initial.params.len();
    let sig_len = sig::metadata(ParameterSet::MlDsa44).signature_max_len;
    let per_round = 2 * 10 * envelope_len(p, sig_len);
    ensure!(in_rows.len() == 10 && tcp_rows.len() == 10, "expected 10 CSV rows per run");
    for (a, b) in in_rows.iter().zip(tcp_rows) {
        ensure!(a.payload_bytes == per_round, "in-process round {}: {} B vs {per_round} B", a.round, a.payload_bytes);
        ensure!(b.payload_bytes == per_round, "tcp round {}: {} B vs {per_round} B", b.round, b.payload_bytes);
        ensure!(b.global_loss.to_bits() == a.global_loss.to_bits(), "round {} loss differs", a.round);
    }
    Ok(format!("final parameters bit-identical; payload_bytes = {per_round} B per round in both CSVs"))
}

fn main() -> ExitCode {
    let criteria: [(&str, u64, fn() -> Outcome); 10] = [
        ("signature correctness", 120, signature_correctness),
        ("size and speed orderings", 300, size_and_speed_orderings),
        ("scheme transparency", 120, scheme_transparency),
        ("oracle equivalence", 60, oracle_equivalence),
        ("poisoning defense", 120, poisoning_defense),
        ("defense value", 120, defense_value),
        ("replay defense", 60, replay_defense),
        ("codec exactness", 30, codec_exactness),
        ("gradient check", 30, gradient_check),
        ("transport equivalence", 120, transport_equivalence),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, limit, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == n.to_string()) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        let result = match result {
            Ok(detail) if elapsed > Duration::from_secs(*limit) => {
                Err(format!("{detail}; took {:.1} s, limit {limit} s", elapsed.as_secs_f64()))
            }
            other => other,
        };
        match result {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail} [{:.1} s]", elapsed.as_secs_f64()),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name}: {why} [{:.1} s]", elapsed.as_secs_f64());
            }
        }
    }
    if failed == 0 {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: {failed} criteria failed");
        ExitCode::FAILURE
    }
}
