//! `rose`: prune single layers, compare methods, flag columnar layers and run
//! the built-in oracle checks.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use rose_core::method::{run_method, Method, MethodRun};
use rose_core::oracle::{cross_check, run_oracle_suite};
use rose_core::report::{CompareRow, DetectRecord, PruneReport};
use rose_core::rose::{importance_scores, loss_profile, prune_with_block_order};
use rose_core::rtns::{read_manifest, read_tensor, write_atomic, write_tensor};
use rose_core::synth::FixtureSpec;
use rose_core::tensor::{
    DenseMatrix, Permutation, SparsityConfig, SparsityPattern, DEFAULT_BLOCKSIZE,
    DEFAULT_COLUMNAR_THRESHOLD, DEFAULT_DAMP_FRACTION,
};
use rose_core::{column_norms, PruneError};

#[derive(Parser)]
#[command(
    name = "rose",
    version,
    about = "Layer-wise pruning with OBS compensation and loss-ordered reordering"
)]
struct Cli {
    /// Worker threads for the row-parallel kernels (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune one layer and write the weights and a JSON report.
    Prune(PruneArgs),
    /// Run every method at every sparsity and write a CSV table.
    Compare(CompareArgs),
    /// Report the loss spread of each layer and whether it counts as columnar.
    Detect(DetectArgs),
    /// Run the engine-versus-oracle checks; exits 0 only if all pass.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Columnar,
    Uniform,
}

#[derive(Args)]
struct LayerArgs {
    /// Weight tensor (RTNS, rows = outputs, cols = inputs). Repeatable for `detect`.
    #[arg(long, conflicts_with = "synth")]
    weights: Vec<PathBuf>,
    /// JSON manifest listing activation batches.
    #[arg(long)]
    acts: Option<PathBuf>,
    /// Generate a synthetic layer instead of reading files.
    #[arg(long, value_enum)]
    synth: Option<SynthKind>,
    #[arg(long)]
    rows: Option<usize>,
    #[arg(long)]
    cols: Option<usize>,
    #[arg(long)]
    hot_gain: Option<f64>,
    /// Calibration rows for synthetic layers.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Debug)]
struct SparsityList(Vec<f64>);

fn parse_sparsity_list(s: &str) -> Result<SparsityList, String> {
    let values = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<f64>().map_err(|_| format!("not a number: {t:?}")))
        .collect::<Result<Vec<_>, _>>()?;
    if values.is_empty() {
        return Err("sparsity list is empty".into());
    }
    Ok(SparsityList(values))
}

#[derive(Args)]
struct ConfigArgs {
    /// Target sparsity, or a comma-separated list.
    #[arg(long, value_parser = parse_sparsity_list)]
    sparsity: Option<SparsityList>,
    /// Columns per block (default 128, or M with --pattern).
    #[arg(long)]
    blocksize: Option<usize>,
    /// Semi-structured N:M pattern; sets sparsity to (M-N)/M.
    #[arg(long)]
    pattern: Option<String>,
    /// Relative loss range above which a layer is reordered.
    #[arg(long, default_value_t = DEFAULT_COLUMNAR_THRESHOLD)]
    threshold: f64,
    /// Hessian dampening as a fraction of the mean diagonal.
    #[arg(long, default_value_t = DEFAULT_DAMP_FRACTION)]
    damp: f64,
}

#[derive(Args)]
struct PruneArgs {
    #[command(flatten)]
    layer: LayerArgs,
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long, default_value = "rose")]
    method: Method,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Cross-check the run against the naive oracle (layers up to 64 wide).
    #[arg(long)]
    verify: bool,
    /// Visit blocks in this order (comma list) instead of running a method.
    #[arg(long, hide = true)]
    block_order: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    layer: LayerArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Number of consecutive seeds to average over (synthetic layers only).
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    /// Directory for compare.csv; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DetectArgs {
    #[command(flatten)]
    layer: LayerArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for detect.json; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random layers to check.
    #[arg(long, default_value_t = 8)]
    cases: usize,
}

struct Layer {
    name: String,
    weights: DenseMatrix,
    acts: Vec<DenseMatrix>,
}

type CliResult<T> = Result<T, String>;

fn ctx(what: impl std::fmt::Display) -> impl FnOnce(PruneError) -> String {
    move |e| format!("{what}: {e}")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Prune(a) => cmd_prune(&a),
        Command::Compare(a) => cmd_compare(&a),
        Command::Detect(a) => cmd_detect(&a),
        Command::Verify(a) => cmd_verify(&a),
    };
    match result {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn build_configs(a: &ConfigArgs) -> CliResult<Vec<SparsityConfig>> {
    let configs = match &a.pattern {
        Some(p) => {
            let SparsityPattern::SemiStructured { n, m } =
                SparsityPattern::parse_nm(p).map_err(|e| e.to_string())?
            else {
                unreachable!()
            };
            let cfg = SparsityConfig::semi_structured(n, m);
            vec![match a.blocksize {
                Some(bs) => cfg.with_blocksize(bs),
                None => cfg,
            }]
        }
        None => {
            let list = a
                .sparsity
                .as_ref()
                .ok_or("either --sparsity or --pattern is required")?;
            list.0
                .iter()
                .map(|&p| {
                    SparsityConfig::unstructured(p)
                        .with_blocksize(a.blocksize.unwrap_or(DEFAULT_BLOCKSIZE))
                })
                .collect()
        }
    };
    configs
        .into_iter()
        .map(|c| {
            let c = c.with_damp(a.damp).with_threshold(a.threshold);
            c.validate().map_err(|e| e.to_string())?;
            Ok(c)
        })
        .collect()
}

fn fixture(a: &LayerArgs, kind: SynthKind) -> FixtureSpec {
    let base = match kind {
        SynthKind::Columnar => FixtureSpec::columnar(),
        SynthKind::Uniform => FixtureSpec::uniform(),
    };
    FixtureSpec {
        rows: a.rows.unwrap_or(base.rows),
        cols: a.cols.unwrap_or(base.cols),
        hot_gain: a.hot_gain.unwrap_or(base.hot_gain),
        samples: a.samples.unwrap_or(base.samples),
        ..base
    }
}

fn load_layers(a: &LayerArgs, seed: u64) -> CliResult<Vec<Layer>> {
    if let Some(kind) = a.synth {
        let spec = fixture(a, kind);
        let (w, x) = spec.generate(seed).map_err(ctx("synthetic layer"))?;
        let name = match kind {
            SynthKind::Columnar => format!("synth-columnar-{seed}"),
            SynthKind::Uniform => format!("synth-uniform-{seed}"),
        };
        return Ok(vec![Layer {
            name,
            weights: w,
            acts: vec![x],
        }]);
    }
    if a.weights.is_empty() {
        return Err("give --weights with --acts, or --synth".into());
    }
    let manifest = a.acts.as_ref().ok_or("--weights needs --acts")?;
    let acts = read_manifest(manifest).map_err(ctx(manifest.display()))?;
    a.weights
        .iter()
        .map(|p| {
            Ok(Layer {
                name: p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| p.display().to_string()),
                weights: read_tensor(p).map_err(ctx(p.display()))?,
                acts: acts.clone(),
            })
        })
        .collect()
}

fn parse_block_order(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| format!("bad block index {t:?}"))
        })
        .collect()
}

fn elapsed_ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn run_manual_order(
    layer: &Layer,
    cfg: &SparsityConfig,
    order: &[usize],
) -> Result<(MethodRun, Permutation), PruneError> {
    let outcome = prune_with_block_order(&layer.weights, &layer.acts, cfg, order)?;
    let perm = Permutation::from_block_order(layer.weights.cols(), cfg.blocksize, order)?;
    let norms = column_norms(&layer.acts)?;
    let profile = loss_profile(&importance_scores(&layer.weights, &norms)?, cfg)?;
    let run = MethodRun {
        method: Method::Sparsegpt,
        outcome,
        profile,
        plan: None,
    };
    Ok((run, perm))
}

fn cmd_prune(a: &PruneArgs) -> CliResult<ExitCode> {
    let configs = build_configs(&a.config)?;
    if a.verify && matches!(a.method, Method::Magnitude | Method::Wanda) && a.block_order.is_none()
    {
        return Err(format!(
            "--verify applies to the OBS-based methods, not {}",
            a.method
        ));
    }
    let block_order = a
        .block_order
        .as_deref()
        .map(parse_block_order)
        .transpose()?;
    let layer = single_layer_seeded(&a.layer, a.layer.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| format!("{}: {e}", a.out.display()))?;

    let mut all_passed = true;
    for cfg in &configs {
        let start = Instant::now();
        let label = format!("layer {}", layer.name);
        let (run, order) = match &block_order {
            Some(o) => {
                let (run, perm) = run_manual_order(&layer, cfg, o).map_err(ctx(&label))?;
                (run, Some(perm))
            }
            None => {
                let run =
                    run_method(a.method, &layer.weights, &layer.acts, cfg).map_err(ctx(&label))?;
                let order = run
                    .plan
                    .as_ref()
                    .filter(|p| p.was_reordered)
                    .map(|p| p.permutation.clone());
                (run, order)
            }
        };
        let mut timings = BTreeMap::new();
        timings.insert("prune".to_string(), elapsed_ms(start));
        let mut report = PruneReport::from_run(&run, cfg, timings);
        if let Some(p) = order.as_ref().filter(|_| block_order.is_some()) {
            report.was_reordered = !p.is_identity();
            report.permutation = Some(p.forward().to_vec());
        }
        if a.verify {
            let t = Instant::now();
            let v = cross_check(&layer.weights, &layer.acts, cfg, order.as_ref())
                .map_err(ctx(format!("{label}: verify")))?;
            report
                .timings_ms
                .insert("verify".to_string(), elapsed_ms(t));
            if !v.passed {
                eprintln!(
                    "verify failed for {}: masks_equal={} final_error_rel_diff={:e}",
                    layer.name, v.masks_equal, v.final_error_rel_diff
                );
                all_passed = false;
            }
            report.verify = Some(v);
        }

        let suffix = if configs.len() == 1 {
            String::new()
        } else {
            format!("-{}", cfg.sparsity)
        };
        let weights_path = a.out.join(format!("weights{suffix}.rtns"));
        let report_path = a.out.join(format!("report{suffix}.json"));
        write_tensor(&weights_path, &run.outcome.pruned_weights)
            .map_err(ctx(weights_path.display()))?;
        let json = serde_json::to_vec_pretty(&report).map_err(|e| e.to_string())?;
        write_atomic(&report_path, &json).map_err(ctx(report_path.display()))?;
        println!(
            "{} {} sparsity={} relative_error={:.6e} R_rel={:.4} reordered={} -> {}",
            layer.name,
            run.method,
            cfg.sparsity,
            report.relative_error,
            report.r_rel,
            report.was_reordered,
            report_path.display()
        );
    }
    Ok(if all_passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn cmd_compare(a: &CompareArgs) -> CliResult<ExitCode> {
    let configs = build_configs(&a.config)?;
    if a.seeds == 0 {
        return Err("--seeds must be at least 1".into());
    }
    let seeds: Vec<u64> = if a.layer.synth.is_some() {
        (0..a.seeds).map(|k| a.layer.seed.wrapping_add(k)).collect()
    } else {
        vec![a.layer.seed]
    };
    let layers = seeds
        .iter()
        .map(|&s| single_layer_seeded(&a.layer, s))
        .collect::<CliResult<Vec<_>>>()?;

    let mut rows = Vec::new();
    for cfg in &configs {
        for method in Method::ALL {
            let (mut err, mut r_rel, mut wall) = (0.0, 0.0, 0.0);
            let mut reordered = true;
            for layer in &layers {
                let start = Instant::now();
                let run = run_method(method, &layer.weights, &layer.acts, cfg)
                    .map_err(ctx(format!("layer {} ({method})", layer.name)))?;
                wall += elapsed_ms(start);
                err += run.outcome.relative_error;
                r_rel += run.profile.relative_range;
                reordered &= run.was_reordered();
            }
            let k = layers.len() as f64;
            rows.push(CompareRow {
                method,
                sparsity: cfg.sparsity,
                relative_error: err / k,
                r_rel: r_rel / k,
                was_reordered: reordered && matches!(method, Method::Rose | Method::RoseAscending),
                wall_ms: wall / k,
            });
        }
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| e.to_string())?;
    }
    let bytes = w.into_inner().map_err(|e| e.to_string())?;
    emit(a.out.as_deref(), "compare.csv", &bytes)?;
    Ok(ExitCode::SUCCESS)
}

fn single_layer_seeded(a: &LayerArgs, seed: u64) -> CliResult<Layer> {
    let mut layers = load_layers(a, seed)?;
    if layers.len() != 1 {
        return Err("this command takes exactly one layer".into());
    }
    Ok(layers.remove(0))
}

fn cmd_detect(a: &DetectArgs) -> CliResult<ExitCode> {
    let cfg = if a.config.sparsity.is_none() && a.config.pattern.is_none() {
        let defaults = ConfigArgs {
            sparsity: Some(SparsityList(vec![0.5])),
            blocksize: a.config.blocksize,
            pattern: None,
            threshold: a.config.threshold,
            damp: a.config.damp,
        };
        build_configs(&defaults)?
    } else {
        build_configs(&a.config)?
    }
    .remove(0);
    let layers = load_layers(&a.layer, a.layer.seed)?;
    let mut records = Vec::new();
    for layer in &layers {
        let profile = column_norms(&layer.acts)
            .and_then(|n| importance_scores(&layer.weights, &n))
            .and_then(|s| loss_profile(&s, &cfg))
            .map_err(ctx(format!("layer {}", layer.name)))?;
        records.push(DetectRecord {
            layer: layer.name.clone(),
            r_rel: profile.relative_range,
            columnar: profile.relative_range > cfg.columnar_threshold,
            block_losses: profile.block_losses,
        });
    }
    let json = serde_json::to_vec_pretty(&records).map_err(|e| e.to_string())?;
    emit(a.out.as_deref(), "detect.json", &json)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_verify(a: &VerifyArgs) -> CliResult<ExitCode> {
    let checks = run_oracle_suite(a.seed, a.cases).map_err(ctx("oracle suite"))?;
    let mut ok = true;
    for c in &checks {
        println!(
            "{} {} (deviation {:.3e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.deviation
        );
        ok &= c.passed;
    }
    println!(
        "{}/{} checks passed",
        checks.iter().filter(|c| c.passed).count(),
        checks.len()
    );
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn emit(out: Option<&Path>, file: &str, bytes: &[u8]) -> CliResult<()> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
            let path = dir.join(file);
            write_atomic(&path, bytes).map_err(ctx(path.display()))
        }
        None => std::io::stdout()
            .write_all(bytes)
            .map_err(|e| e.to_string()),
    }
}
