//! One function per subcommand. Each reads its inputs, runs the core
//! routine, and writes its outputs followed by a [`RunManifest`].

use std::fs;
use std::path::{Path, PathBuf};

use peel_core::forward::network_forward;
use peel_core::metrics::{knn_distance, relative_error, score, ImageScore};
use peel_core::model::{
    build_arch, load_model, random_init, save_model, Activation, ArchManifest, ArchName,
    ArchOptions, Block, InitScheme, StemLayer, MODEL_FILE, WEIGHTS_FILE,
};
use peel_core::pipeline::invert_any_block;
use peel_core::tensor::{read_tns, write_tns};
use peel_core::{
    invert_shallow, oracle_invert_block, peel_with_truth, InversionReport, NetworkSpec, PeelError,
    PeelRun, ShallowReport, Tensor, Truth,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::*;
use crate::error::{CliError, CliResult};
use crate::image_io::{read_any, write_any};
use crate::manifest::{manifest_path, write_json, RunManifest};
use crate::table::{layer_of_blocks, ErrorTable, FAILURE_THRESHOLD};

pub fn run(command: Command) -> CliResult<()> {
    match command {
        Command::GenModel(a) => gen_model(&a),
        Command::Forward(a) => forward(&a),
        Command::InvertBlock(a) => invert_block(&a),
        Command::InvertShallow(a) => invert_shallow_cmd(&a),
        Command::Peel(a) => peel(&a),
        Command::Oracle(a) => oracle(&a),
        Command::Metrics(a) => metrics(&a),
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn create_parent(file: &Path) -> CliResult<()> {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

/// `dir/stem.ext` → `dir/stem.suffix`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn load(dir: &Path) -> CliResult<NetworkSpec> {
    Ok(load_model(dir)?)
}

fn block_index(net: &NetworkSpec, k: usize) -> CliResult<usize> {
    if k == 0 || k > net.num_blocks() {
        return Err(CliError::validation(format!(
            "block {k} out of range 1..={}",
            net.num_blocks()
        )));
    }
    Ok(k - 1)
}

fn set_activation(net: &mut NetworkSpec, act: Activation) {
    for layer in &mut net.stem {
        if let StemLayer::Activation(a) = layer {
            *a = act;
        }
    }
    for block in &mut net.blocks {
        match block {
            Block::Residual(b) => b.activation = act,
            Block::Plain(l) => l.activation = act,
        }
    }
}

#[derive(Serialize)]
struct GenModelConfig {
    arch: String,
    init: InitArg,
    sigma: Option<f64>,
    pooling: bool,
    prelu: Option<f64>,
    input_dims: [usize; 3],
    width: usize,
    input_scale: f64,
}

pub fn gen_model(a: &GenModelArgs) -> CliResult<()> {
    let arch: ArchName = a.arch.parse()?;
    let activation = match a.prelu {
        Some(s) => Activation::Prelu { a: s },
        None => Activation::Relu,
    };
    let mut net = match &arch {
        ArchName::Custom(path) => ArchManifest::from_path(path)?.to_network()?,
        name => build_arch(
            name,
            &ArchOptions {
                input_dims: a.input_dims,
                pooling: a.pooling,
                width: a.width,
                activation,
                input_scale: a.input_scale,
            },
        )?,
    };
    if a.prelu.is_some() {
        set_activation(&mut net, activation);
    }
    let scheme = match a.init {
        InitArg::FanInUniform => InitScheme::fan_in_uniform(a.seed),
        InitArg::FanIn => InitScheme::fan_in(a.seed),
        InitArg::Gaussian => InitScheme::gaussian(a.sigma, a.seed),
    };
    let net = random_init(&net, &scheme)?;
    save_model(&net, &a.out)?;

    let custom = matches!(arch, ArchName::Custom(_));
    let config = GenModelConfig {
        arch: if custom {
            "custom".into()
        } else {
            a.arch.clone()
        },
        init: a.init,
        sigma: (a.init == InitArg::Gaussian).then_some(a.sigma),
        pooling: a.pooling,
        prelu: a.prelu,
        input_dims: net.input_dims,
        width: a.width,
        input_scale: a.input_scale,
    };
    let mut m = RunManifest::new("gen-model", &config).seed("init", a.seed);
    if let ArchName::Custom(path) = &arch {
        m.input("arch", path)?;
    }
    m.model(&a.out)?;
    m.output(MODEL_FILE, &a.out.join(MODEL_FILE))?;
    m.output(WEIGHTS_FILE, &a.out.join(WEIGHTS_FILE))?;
    m.write(&manifest_path(&a.out, true))?;
    log::info!("wrote {} blocks to {}", net.num_blocks(), a.out.display());
    Ok(())
}

pub fn forward(a: &ForwardArgs) -> CliResult<()> {
    let net = load(&a.model)?;
    let x = read_any(&a.input)?;
    let trace = network_forward(&x, &net)?;
    create_dir(&a.out)?;
    let mut m = RunManifest::new("forward", &serde_json::json!({}));
    m.model(&a.model)?;
    m.input("input", &a.input)?;
    let mut outputs = vec![("stem.tns".to_string(), &trace.stem_output)];
    for (k, y) in trace.block_outputs.iter().enumerate() {
        outputs.push((format!("block_{:02}.tns", k + 1), y));
    }
    outputs.push(("output.tns".to_string(), &trace.output));
    for (name, t) in outputs {
        let path = a.out.join(&name);
        write_tns(t, &path)?;
        m.output(&name, &path)?;
    }
    m.write(&manifest_path(&a.out, true))
}

#[derive(Serialize)]
struct BlockOutput<'a> {
    block: usize,
    residual: bool,
    report: &'a InversionReport,
}

pub fn invert_block(a: &InvertBlockArgs) -> CliResult<()> {
    let net = load(&a.model)?;
    let l = block_index(&net, a.block)?;
    let y = read_tns(&a.features)?;
    let cfg = a.solver.config(a.seed);
    let block = &net.blocks[l];
    let (x, mut report) = invert_any_block(&y, block, &cfg)?;
    if let Some(path) = &a.truth {
        report.oracle_relative_error = Some(relative_error(&x, &read_any(path)?)?);
    }
    log::info!(
        "block {}: objective {:.3e}, {} epochs in {:.1}s",
        a.block,
        report.final_objective,
        report.iterations,
        report.wall_clock_secs
    );
    create_parent(&a.out)?;
    write_tns(&x, &a.out)?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| sibling(&a.out, "report.json"));
    create_parent(&report_path)?;
    write_json(
        &BlockOutput {
            block: a.block,
            residual: block.as_residual().is_some(),
            report: &report,
        },
        &report_path,
    )?;

    let mut m = RunManifest::new(
        "invert-block",
        &serde_json::json!({ "block": a.block, "solver": cfg }),
    )
    .seed("solver", a.seed);
    m.model(&a.model)?;
    m.input("features", &a.features)?;
    if let Some(p) = &a.truth {
        m.input("truth", p)?;
    }
    m.output("estimate", &a.out)?;
    m.output("report", &report_path)?;
    m.write(&manifest_path(&a.out, false))
}

#[derive(Serialize)]
struct ShallowOutput<'a> {
    report: &'a ShallowReport,
    score: Option<ImageScore>,
}

pub fn invert_shallow_cmd(a: &InvertShallowArgs) -> CliResult<()> {
    let net = load(&a.model)?;
    if net.stem.is_empty() {
        return Err(CliError::validation("model has no stem to invert"));
    }
    let phi = read_tns(&a.features)?;
    let cfg = a.reg.config(a.lr, a.final_lr, a.epochs, a.seed);
    let (img, mut report) = invert_shallow(&phi, &net.stem, net.input_dims, &cfg)?;
    let score = match &a.truth {
        Some(path) => {
            let truth = read_any(path)?;
            report.oracle_relative_error = Some(relative_error(&img, &truth)?);
            Some(score(&img, &truth, 255.0)?)
        }
        None => None,
    };
    create_parent(&a.out)?;
    let clamped = write_any(&img, &a.out)?;
    let report_path = a
        .report
        .clone()
        .unwrap_or_else(|| sibling(&a.out, "report.json"));
    create_parent(&report_path)?;
    write_json(
        &ShallowOutput {
            report: &report,
            score,
        },
        &report_path,
    )?;

    let mut m = RunManifest::new("invert-shallow", &cfg).seed("solver", a.seed);
    m.model(&a.model)?;
    m.input("features", &a.features)?;
    if let Some(p) = &a.truth {
        m.input("truth", p)?;
    }
    m.output("image", &a.out)?;
    m.output("report", &report_path)?;
    m.clamped_values = clamped;
    m.write(&manifest_path(&a.out, false))
}

#[derive(Debug, Serialize)]
struct StageSummary<'a> {
    block: usize,
    layer: usize,
    residual: bool,
    report: &'a InversionReport,
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    seed: u64,
    image: String,
    blocks: Vec<StageSummary<'a>>,
    shallow: Option<&'a ShallowReport>,
    image_relative_error: Option<f64>,
    image_score: Option<ImageScore>,
}

#[derive(Debug, Serialize)]
struct PeelReport<'a> {
    runs: Vec<RunSummary<'a>>,
    table: ErrorTable,
    failure_threshold: f64,
    /// Warnings a reader should see before trusting the reconstruction.
    flags: Vec<String>,
}

fn run_flags(net: &NetworkSpec, runs: &[PeelRun]) -> Vec<String> {
    let mut flags = Vec::new();
    let plain: Vec<String> = net
        .blocks
        .iter()
        .enumerate()
        .filter(|(_, b)| b.as_residual().is_none())
        .map(|(i, _)| (i + 1).to_string())
        .collect();
    if !plain.is_empty() {
        flags.push(format!(
            "blocks {} have no skip connection; their inputs are not identifiable from the outputs",
            plain.join(", ")
        ));
    }
    for (r, run) in runs.iter().enumerate() {
        if let Some(e) = run.image_relative_error {
            if !(e <= FAILURE_THRESHOLD) {
                flags.push(format!(
                    "run {r}: image relative error {e:.4} above failure threshold {FAILURE_THRESHOLD}"
                ));
            }
        }
    }
    flags
}

pub fn peel(a: &PeelArgs) -> CliResult<()> {
    if a.runs == 0 || a.jobs == 0 {
        return Err(CliError::validation("--runs and --jobs must be positive"));
    }
    let net = load(&a.model)?;
    let y = read_tns(&a.features)?;
    let truth_image = a.truth_image.as_deref().map(read_any).transpose()?;
    let trace = truth_image
        .as_ref()
        .map(|x| network_forward(x, &net))
        .transpose()?;
    let truth = truth_image
        .as_ref()
        .zip(trace.as_ref())
        .map(|(image, trace)| Truth { image, trace });

    let seeds: Vec<u64> = (0..a.runs as u64).map(|r| a.seed.wrapping_add(r)).collect();
    let block_cfgs: Vec<_> = seeds.iter().map(|&s| a.solver.config(s)).collect();
    let shallow_cfgs: Vec<_> = seeds
        .iter()
        .map(|&s| {
            a.reg
                .config(a.shallow_lr, a.shallow_final_lr, a.shallow_epochs, s)
        })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| CliError::validation(format!("thread pool: {e}")))?;
    let runs: Vec<PeelRun> = pool.install(|| {
        (0..a.runs)
            .into_par_iter()
            .map(|r| peel_with_truth(&y, &net, &block_cfgs[r], &shallow_cfgs[r], truth))
            .collect::<Result<_, PeelError>>()
    })?;

    create_parent(&a.out)?;
    let mut m = RunManifest::new(
        "peel",
        &serde_json::json!({
            "runs": a.runs,
            "solver": block_cfgs[0],
            "shallow": shallow_cfgs[0],
        }),
    );
    for (r, &s) in seeds.iter().enumerate() {
        m.seeds.insert(format!("run{r}"), s);
    }
    m.model(&a.model)?;
    m.input("features", &a.features)?;
    if let Some(p) = &a.truth_image {
        m.input("truth_image", p)?;
    }

    let layers = layer_of_blocks(&net);
    let mut summaries = Vec::with_capacity(runs.len());
    for (r, run) in runs.iter().enumerate() {
        let out = if r == 0 {
            a.out.clone()
        } else {
            let ext = a.out.extension().unwrap_or_default().to_string_lossy();
            sibling(&a.out, &format!("run{r}.{ext}"))
        };
        m.clamped_values += write_any(&run.image, &out)?;
        m.output(&format!("image_run{r}"), &out)?;
        let image_score = truth_image
            .as_ref()
            .map(|t| score(&run.image, t, 255.0))
            .transpose()?;
        summaries.push(RunSummary {
            seed: seeds[r],
            image: out
                .file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
            blocks: run
                .blocks
                .iter()
                .map(|s| StageSummary {
                    block: s.block,
                    layer: layers[s.block - 1],
                    residual: net.blocks[s.block - 1].as_residual().is_some(),
                    report: &s.report,
                })
                .collect(),
            shallow: run.shallow.as_ref(),
            image_relative_error: run.image_relative_error,
            image_score,
        });
    }

    let table = ErrorTable::from_runs(&net, &runs);
    let markdown = table.to_markdown();
    let flags = run_flags(&net, &runs);
    for f in &flags {
        log::warn!("{f}");
    }
    let report = PeelReport {
        runs: summaries,
        table,
        failure_threshold: FAILURE_THRESHOLD,
        flags,
    };
    create_parent(&a.report)?;
    write_json(&report, &a.report)?;
    m.output("report", &a.report)?;
    let table_path = a
        .table
        .clone()
        .unwrap_or_else(|| a.report.with_extension("md"));
    create_parent(&table_path)?;
    fs::write(&table_path, &markdown).map_err(|e| CliError::io(&table_path, e))?;
    m.output("table", &table_path)?;
    print!("{markdown}");
    m.write(&manifest_path(&a.out, false))
}

pub fn oracle(a: &OracleArgs) -> CliResult<()> {
    let net = load(&a.model)?;
    let l = block_index(&net, a.block)?;
    let block = net.blocks[l].as_residual().ok_or_else(|| {
        CliError::from(PeelError::Unsupported(format!(
            "block {} is not residual",
            a.block
        )))
    })?;
    let y = read_tns(&a.features)?;
    let sol = oracle_invert_block(&y, block, a.max_hidden)?;
    create_parent(&a.out)?;
    write_json(&sol, &a.out)?;
    let mut m = RunManifest::new(
        "oracle",
        &serde_json::json!({ "block": a.block, "max_hidden": a.max_hidden }),
    );
    m.model(&a.model)?;
    m.input("features", &a.features)?;
    m.output("solution", &a.out)?;
    m.write(&manifest_path(&a.out, false))
}

#[derive(Serialize)]
struct MetricsOutput {
    #[serde(flatten)]
    score: ImageScore,
    max_val: f64,
    knn_distance: Option<f64>,
}

pub fn metrics(a: &MetricsArgs) -> CliResult<()> {
    let reference = read_any(&a.reference)?;
    let test = read_any(&a.test)?;
    let knn = if a.knn_ref.is_empty() {
        None
    } else {
        let refs = a
            .knn_ref
            .iter()
            .map(|p| read_any(p))
            .collect::<Result<Vec<Tensor>, _>>()?;
        Some(knn_distance(&test, &refs)?)
    };
    let out = MetricsOutput {
        score: score(&test, &reference, a.max_val)?,
        max_val: a.max_val,
        knn_distance: knn,
    };
    match &a.out {
        None => {
            println!(
                "{}",
                serde_json::to_string_pretty(&out).expect("metrics serialize")
            );
            Ok(())
        }
        Some(path) => {
            create_parent(path)?;
            write_json(&out, path)?;
            let mut m = RunManifest::new("metrics", &serde_json::json!({ "max_val": a.max_val }));
            m.input("ref", &a.reference)?;
            m.input("test", &a.test)?;
            for (i, p) in a.knn_ref.iter().enumerate() {
                m.input(&format!("knn_ref{i}"), p)?;
            }
            m.output("metrics", path)?;
            m.write(&manifest_path(path, false))
        }
    }
}
