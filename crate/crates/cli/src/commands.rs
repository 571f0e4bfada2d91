use std::path::Path;
use std::time::Instant;

use lpforge::accel::{simulate, ArrayConfig, SimReport};
use lpforge::linalg::{gemm_int, gemm_ref, gemm_ternary, pack_ternary, AccMatrix, ActivationMatrix, Matrix};
use lpforge::netspec::{self, bundled, compute_cost, footprint, parse_topology_named, Mode, NetworkSpec};
use lpforge::quant::{self, QuantSpec};
use lpforge::toytrain::{self, load_checkpoint, save_checkpoint, EpochRecord, Scheme, TrainConfig};
use lpforge::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;
use crate::Failure;

type Out = Result<Value, Failure>;

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report serializes")
}

pub fn run(cmd: &Command) -> Out {
    match cmd {
        Command::Quantize(a) => quantize(a),
        Command::Gemm(a) => gemm(a),
        Command::Sim(a) => sim(a),
        Command::Analyze(a) => analyze(a),
        Command::Widen(a) => widen(a),
        Command::Cost(a) => cost(a),
        Command::Train(a) => train(a),
        Command::Bench(a) => bench(a),
    }
}

/// Loads a topology file, falling back to the bundled set.
pub fn load_topology(arg: &str) -> Result<NetworkSpec, Error> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = std::fs::read_to_string(path)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("network");
        let name = text
            .lines()
            .next()
            .and_then(|l| l.strip_prefix("# "))
            .map(str::trim)
            .filter(|n| !n.is_empty())
            .unwrap_or(stem);
        return parse_topology_named(name, &text);
    }
    bundled(arg).ok_or_else(|| {
        Error::Io(format!(
            "`{arg}` is neither a readable file nor a bundled topology ({})",
            netspec::BUNDLED.join(", ")
        ))
    })
}

fn quantize(a: &QuantizeArgs) -> Out {
    let (codes, scale, deq) = match a.kind {
        Kind::Weights => {
            let q = quant::quantize_weights(&a.values, a.bits)?;
            let codes = q.codes().map(|c| to_value(&c));
            (codes, q.scale(), quant::dequantize(&q))
        }
        Kind::Activations => {
            let q = quant::quantize_activations(&a.values, a.bits)?;
            let codes = q.codes().map(|c| to_value(&c));
            (codes, q.scale(), quant::dequantize(&q))
        }
    };
    Ok(json!({
        "kind": match a.kind { Kind::Weights => "weights", Kind::Activations => "activations" },
        "bits": a.bits,
        "scale": scale,
        "codes": codes.unwrap_or(Value::Null),
        "dequantized": deq,
    }))
}

/// Seeded operands: 8-bit activation codes and ternary weight codes.
pub fn random_operands(m: usize, n: usize, k: usize, seed: u64) -> (ActivationMatrix, Matrix<i32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<u8> = (0..m * k).map(|_| rng.random()).collect();
    let b: Vec<i32> = (0..k * n).map(|_| rng.random_range(-1..=1)).collect();
    (
        Matrix::from_vec(m, k, a).expect("sized"),
        Matrix::from_vec(k, n, b).expect("sized"),
    )
}

fn check_dims(d: &Dims) -> Result<(), Failure> {
    if d.m == 0 || d.n == 0 || d.k == 0 {
        return Err(Failure::Usage("--m, --n and --k must be at least 1".into()));
    }
    Ok(())
}

fn narrow(m: &Matrix<i128>) -> Result<AccMatrix, Error> {
    let data = m
        .data()
        .iter()
        .map(|&v| i32::try_from(v).map_err(|_| Error::Invariant(format!("{v} does not fit in 32 bits"))))
        .collect::<Result<Vec<_>, _>>()?;
    Matrix::from_vec(m.rows(), m.cols(), data)
}

fn ref_product(a: &ActivationMatrix, b: &Matrix<i32>) -> Result<AccMatrix, Error> {
    let out = gemm_ref(&a.map(|&v| v as f64), &b.map(|&v| v as f64))?;
    let data = out.data().iter().map(|&v| v as i32).collect();
    Matrix::from_vec(out.rows(), out.cols(), data)
}

fn gemm_with(backend: Backend, a: &ActivationMatrix, b: &Matrix<i32>) -> Result<AccMatrix, Error> {
    match backend {
        Backend::Ref => ref_product(a, b),
        Backend::Ternary => gemm_ternary(a, &pack_ternary(b)?),
        Backend::Int => narrow(&gemm_int(&a.map(|&v| v as u32), b)?),
    }
}

fn hex(v: u64) -> String {
    format!("{v:016x}")
}

fn gemm(a: &GemmArgs) -> Out {
    check_dims(&a.dims)?;
    let Dims { m, n, k, seed } = a.dims;
    let (x, w) = random_operands(m, n, k, seed);
    let out = gemm_with(a.backend, &x, &w)?;
    let backend = match a.backend {
        Backend::Ref => "ref",
        Backend::Ternary => "ternary",
        Backend::Int => "int",
    };
    Ok(json!({
        "backend": backend,
        "m": m,
        "n": n,
        "k": k,
        "seed": seed,
        "checksum": hex(out.checksum()),
    }))
}

#[derive(Serialize)]
struct SimOutput {
    #[serde(flatten)]
    report: SimReport,
    array_rows: usize,
    array_cols: usize,
    seed: u64,
    checksum: String,
}

fn sim(a: &SimArgs) -> Out {
    check_dims(&a.dims)?;
    let Dims { m, n, k, seed } = a.dims;
    let cfg = ArrayConfig::new(a.rows, a.cols)?;
    let (x, w) = random_operands(m, n, k, seed);
    let result = simulate(&x, &pack_ternary(&w)?, &cfg)?;
    Ok(to_value(&SimOutput {
        report: result.report(k, &cfg),
        array_rows: cfg.rows,
        array_cols: cfg.cols,
        seed,
        checksum: hex(result.output.checksum()),
    }))
}

fn analyze(a: &AnalyzeArgs) -> Out {
    let spec = load_topology(&a.topology)?;
    let mode: Mode = a.mode.parse()?;
    let q = QuantSpec::new(a.wbits, a.abits)?;
    Ok(to_value(&footprint(&spec, a.batch, mode, q)?))
}

fn widen(a: &WidenArgs) -> Out {
    let spec = load_topology(&a.topology)?;
    let wide = netspec::widen(&spec, a.factor, a.fraction)?;
    let text = wide.to_text();
    if let Some(path) = &a.output {
        std::fs::write(path, &text).map_err(Error::from)?;
    }
    let widened: Vec<&str> = spec
        .layers()
        .iter()
        .zip(wide.layers())
        .filter(|(a, b)| a != b)
        .filter_map(|(_, b)| match b {
            netspec::Layer::Conv { name, .. } => Some(name.as_str()),
            _ => None,
        })
        .collect();
    Ok(json!({
        "source": spec.name(),
        "network": wide.name(),
        "factor": a.factor,
        "fraction": a.fraction,
        "conv_layers": spec.conv_count(),
        "widened_layers": widened,
        "params_before": spec.total_params(),
        "params_after": wide.total_params(),
        "output": a.output.as_ref().map(|p| p.display().to_string()),
        "topology": if a.output.is_none() { Value::from(text) } else { Value::Null },
    }))
}

fn cost(a: &CostArgs) -> Out {
    let spec = load_topology(&a.topology)?;
    let report = compute_cost(&spec, QuantSpec::new(a.wbits, a.abits)?);
    let mut v = to_value(&report);
    if let Some(b) = &a.baseline {
        let base_spec = load_topology(b)?;
        let base = compute_cost(&base_spec, QuantSpec::new(a.baseline_wbits, a.baseline_abits)?);
        v["baseline"] = json!({
            "network": base.network,
            "weight_bits": base.weight_bits,
            "act_bits": base.act_bits,
            "total_fmas": base.total_fmas,
            "cost": base.cost,
        });
        v["ratio"] = json!(report.ratio_to(&base));
    }
    Ok(v)
}

#[derive(Serialize)]
struct TrainOutput {
    scheme: Scheme,
    seed: u64,
    config: TrainConfig,
    teacher_accuracy: Option<f64>,
    final_accuracy: f64,
    epochs_to_90: Option<usize>,
    history: Vec<EpochRecord>,
}

fn train(a: &TrainArgs) -> Out {
    let scheme: Scheme = a.scheme.parse()?;
    let mut cfg = TrainConfig {
        seed: a.seed,
        ..TrainConfig::default()
    };
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(s) = a.sigma {
        cfg.dataset.sigma = s;
    }
    if let Some(c) = a.classes {
        cfg.dataset.classes = c;
    }
    cfg.validate()?;

    let mut teacher_accuracy = None;
    let teacher = if !scheme.needs_teacher() {
        None
    } else if let Some(path) = &a.teacher {
        Some(load_checkpoint(path)?)
    } else {
        let (t, h) = toytrain::train_teacher(&cfg)?;
        teacher_accuracy = Some(h.final_accuracy());
        Some(t)
    };
    let (net, history) = toytrain::train(&cfg, scheme, teacher.as_ref())?;
    if let Some(path) = &a.history {
        std::fs::write(path, history.to_json_lines()).map_err(Error::from)?;
    }
    if let Some(path) = &a.checkpoint {
        save_checkpoint(&net, path)?;
    }
    Ok(to_value(&TrainOutput {
        scheme,
        seed: cfg.seed,
        config: cfg,
        teacher_accuracy,
        final_accuracy: history.final_accuracy(),
        epochs_to_90: history.epochs_to_threshold(0.9),
        history: history.epochs,
    }))
}

fn bench(a: &BenchArgs) -> Out {
    if a.m == 0 || a.n == 0 || a.k == 0 || a.reps == 0 {
        return Err(Failure::Usage("--m, --n, --k and --reps must be at least 1".into()));
    }
    let (x, w) = random_operands(a.m, a.n, a.k, a.seed);
    let xf = x.map(|&v| v as f64);
    let wf = w.map(|&v| v as f64);
    let packed = pack_ternary(&w)?;
    let macs = (a.m * a.n * a.k) as f64;

    let mut rows = Vec::new();
    let time = |f: &dyn Fn() -> Result<u64, Error>| -> Result<(f64, u64), Error> {
        let mut best = f64::INFINITY;
        let mut sum = 0;
        for _ in 0..a.reps {
            let t = Instant::now();
            sum = f()?;
            best = best.min(t.elapsed().as_secs_f64());
        }
        Ok((best, sum))
    };
    let (t_ref, c_ref) = time(&|| {
        let out = gemm_ref(&xf, &wf)?;
        let acc: AccMatrix = Matrix::from_vec(out.rows(), out.cols(), out.data().iter().map(|&v| v as i32).collect())?;
        Ok(acc.checksum())
    })?;
    let (t_tern, c_tern) = time(&|| Ok(gemm_ternary(&x, &packed)?.checksum()))?;
    if c_ref != c_tern {
        return Err(Error::Invariant("ternary kernel disagrees with the float reference".into()).into());
    }
    for (name, secs) in [("ref-float", t_ref), ("ternary-packed", t_tern)] {
        rows.push(json!({
            "backend": name,
            "seconds": secs,
            "mmacs_per_s": macs / secs.max(1e-12) / 1e6,
        }));
    }
    Ok(json!({
        "m": a.m,
        "n": a.n,
        "k": a.k,
        "reps": a.reps,
        "seed": a.seed,
        "threads": rayon::current_num_threads(),
        "checksum": hex(c_ref),
        "backends": rows,
    }))
}
