//! Command-line front-end for chain-linked recovery of low-rank matrices
//! from noisy, partially observed, overlapping submatrices.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/manifest error, 3 numerical
//! failure. All output files are written atomically, and every run with the
//! same inputs (and seed, where applicable) produces byte-identical files.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use cmmi::aggregate::{estimate_noise, fuse, redistribute};
use cmmi::block_model::{estimate_q, load_manifest, rescale, ObservedBlock, RescaledBlock};
use cmmi::chain_graph::{
    build_graph, holistic_recover, recoverability, select_chain, vertices_of_observed,
    vertices_of_rescaled, zero_scores,
};
use cmmi::inference::{ci_matrices, stderr_matrix, variance_components};
use cmmi::integrate::{cmmi_full, ChainRecovery};
use cmmi::io::{
    self, write_ci_csv, write_embedding_csv, write_manifest_file, write_matrix_csv,
    write_recoverable_csv, write_recovered_csv, write_results_csv, ManifestEntry, ManifestFile,
};
use cmmi::spectral_embed::{embed, residual_score, select_rank, ModeSpec, Signature};
use cmmi::{linalg, CmmiError};

#[derive(Parser)]
#[command(
    name = "cmmi",
    version,
    about = "Recover unobserved regions of a low-rank matrix from overlapping submatrices",
    disable_help_subcommand = true
)]
struct Cli {
    /// Cap the worker-thread pool for replicate-level parallelism
    /// (0 keeps the library default).
    #[arg(long, global = true, default_value_t = 0, value_name = "K")]
    threads: usize,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Rescale and spectrally embed every block of a manifest.
    Embed(EmbedArgs),
    /// Recover the rectangle spanned by the ends of a block chain.
    Integrate(IntegrateArgs),
    /// Partition entities into connected overlap components.
    Recoverable(RecoverableArgs),
    /// Pick a good chain between two entities and optionally recover it.
    Chain(ChainArgs),
    /// Stitch all blocks into one frame and emit the full estimate.
    Holistic(HolisticArgs),
    /// Fuse repeated observations by inverse-variance weighting.
    Aggregate(AggregateArgs),
    /// Run a seeded synthetic chain-recovery experiment.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    /// Positive semidefinite symmetric blocks.
    Psd,
    /// Indefinite symmetric blocks (requires --signature).
    Indef,
    /// Rectangular blocks with separate row/column entities.
    Asym,
}

fn parse_signature(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected \"D+,D-\", got {s:?}"));
    }
    let plus = parts[0].trim().parse::<usize>().map_err(|e| e.to_string())?;
    let minus = parts[1].trim().parse::<usize>().map_err(|e| e.to_string())?;
    Ok((plus, minus))
}

fn parse_entry(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected \"S,T\", got {s:?}"));
    }
    let a = parts[0].trim().parse::<usize>().map_err(|e| e.to_string())?;
    let b = parts[1].trim().parse::<usize>().map_err(|e| e.to_string())?;
    Ok((a, b))
}

/// Mode/rank/signature flags shared by the recovery subcommands.
#[derive(Args)]
struct ModeFlags {
    /// Block structure: psd, indef, or asym.
    #[arg(long, value_enum, default_value_t = ModeArg::Psd)]
    mode: ModeArg,

    /// Embedding rank for the psd and asym modes.
    #[arg(long, value_name = "D", conflicts_with = "signature")]
    rank: Option<usize>,

    /// Signature "D+,D-" for the indef mode.
    #[arg(long, value_name = "D+,D-", value_parser = parse_signature)]
    signature: Option<(usize, usize)>,
}

impl ModeFlags {
    /// Resolve the flags into a concrete mode, or None when the rank was
    /// left for automatic selection (psd/asym only).
    fn resolve(&self) -> Result<Option<ModeSpec>, Failure> {
        match self.mode {
            ModeArg::Indef => {
                let (p, m) = self.signature.ok_or_else(|| {
                    usage("the indef mode requires --signature D+,D-")
                })?;
                let signature = Signature::new(p, m).map_err(Failure::Lib)?;
                Ok(Some(ModeSpec::Indefinite { signature }))
            }
            ModeArg::Psd => {
                if self.signature.is_some() {
                    return Err(usage("--signature only applies to the indef mode"));
                }
                Ok(self.rank.map(|d| ModeSpec::Psd { d }))
            }
            ModeArg::Asym => {
                if self.signature.is_some() {
                    return Err(usage("--signature only applies to the indef mode"));
                }
                Ok(self.rank.map(|d| ModeSpec::Asymmetric { d }))
            }
        }
    }

    /// Like `resolve`, but the rank is mandatory.
    fn resolve_required(&self) -> Result<ModeSpec, Failure> {
        self.resolve()?
            .ok_or_else(|| usage("this subcommand requires --rank D (or --signature for indef)"))
    }
}

#[derive(Args)]
struct EmbedArgs {
    /// Manifest describing the observed blocks.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,

    #[command(flatten)]
    mode: ModeFlags,

    /// Directory that receives one `<id>_embedding.csv` per block.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct IntegrateArgs {
    /// Manifest describing the observed blocks.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,

    /// Comma-separated block ids, first to last.
    #[arg(long, value_name = "i0,i1,...", value_delimiter = ',', required = true)]
    chain: Vec<String>,

    #[command(flatten)]
    mode: ModeFlags,

    /// Also write stderr/interval files for this two-sided level (psd only).
    #[arg(long, value_name = "ALPHA")]
    ci: Option<f64>,

    /// Print the recovered value at one global (row, col) entity pair.
    #[arg(long, value_name = "S,T", value_parser = parse_entry)]
    entry: Option<(usize, usize)>,

    /// Output CSV for the recovered rectangle.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct RecoverableArgs {
    /// Manifest describing the observed blocks.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,

    /// Minimum shared entities for two blocks to count as connected
    /// (defaults to --rank / the signature total).
    #[arg(long, value_name = "R")]
    threshold: Option<usize>,

    #[command(flatten)]
    mode: ModeFlags,

    /// Output CSV of (entity, component) memberships.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct ChainArgs {
    /// Manifest describing the observed blocks.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,

    /// Global (row, col) entity pair to connect.
    #[arg(long, value_name = "S,T", value_parser = parse_entry, required = true)]
    entry: (usize, usize),

    #[command(flatten)]
    mode: ModeFlags,

    /// Minimum shared entities for an overlap edge (defaults to the rank).
    #[arg(long, value_name = "R")]
    threshold: Option<usize>,

    /// Also run the recovery along the chosen chain.
    #[arg(long)]
    recover: bool,

    /// Also write stderr/interval files for this level (psd only, with --recover).
    #[arg(long, value_name = "ALPHA")]
    ci: Option<f64>,

    /// Output CSV for the recovered rectangle (with --recover).
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct HolisticArgs {
    /// Manifest describing the observed blocks.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,

    #[command(flatten)]
    mode: ModeFlags,

    /// Minimum shared entities for an overlap edge (defaults to the rank).
    #[arg(long, value_name = "R")]
    threshold: Option<usize>,

    /// Output CSV holding the full assembled estimate (NA = unrecoverable).
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct AggregateArgs {
    /// Manifest describing the observed blocks.
    #[arg(long, value_name = "PATH")]
    manifest: PathBuf,

    /// Rank of the per-block projection used to estimate noise levels.
    #[arg(long, value_name = "D", required = true)]
    rank: usize,

    /// Directory that receives the fused manifest and value files.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

#[derive(Args)]
struct SimulateArgs {
    /// JSON experiment configuration.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,

    /// Random seed; required so no run carries hidden entropy.
    #[arg(long, value_name = "U64", required = true)]
    seed: u64,

    /// Write measured wall-clock times instead of zeros (breaks
    /// byte-reproducibility of the output across runs).
    #[arg(long)]
    timings: bool,

    /// Output CSV with one row per replicate.
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
}

/// A failed invocation: either bad flags (exit 1) or a library error
/// (exit 2 for data problems, 3 for numerical failures).
enum Failure {
    Usage(String),
    Lib(CmmiError),
}

fn usage(msg: &str) -> Failure {
    Failure::Usage(msg.to_string())
}

impl From<CmmiError> for Failure {
    fn from(e: CmmiError) -> Self {
        Failure::Lib(e)
    }
}

fn failure_code(f: &Failure) -> i32 {
    match f {
        Failure::Usage(_) => 1,
        Failure::Lib(CmmiError::Numerical(_)) => 3,
        Failure::Lib(_) => 2,
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    std::process::exit(0);
                }
                _ => {
                    eprint!("{e}");
                    std::process::exit(1);
                }
            }
        }
    };
    if cli.threads > 0 {
        // Ignore the error when a pool already exists (e.g. under tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global();
    }
    match run(cli.cmd) {
        Ok(()) => {}
        Err(f) => {
            match &f {
                Failure::Usage(msg) => eprintln!("error: {msg}"),
                Failure::Lib(e) => eprintln!("error: {e}"),
            }
            std::process::exit(failure_code(&f));
        }
    }
}

fn run(cmd: Cmd) -> Result<(), Failure> {
    match cmd {
        Cmd::Embed(args) => cmd_embed(args),
        Cmd::Integrate(args) => cmd_integrate(args),
        Cmd::Recoverable(args) => cmd_recoverable(args),
        Cmd::Chain(args) => cmd_chain(args),
        Cmd::Holistic(args) => cmd_holistic(args),
        Cmd::Aggregate(args) => cmd_aggregate(args),
        Cmd::Simulate(args) => cmd_simulate(args),
    }
}

/// Load a manifest and make every block's sampling rate concrete: stored
/// rates pass through, missing ones are estimated from the realized mask
/// density.
fn load_blocks(path: &Path) -> Result<Vec<ObservedBlock>, Failure> {
    let blocks = load_manifest(path)?;
    blocks
        .into_iter()
        .map(|b| {
            if b.q.is_some() {
                Ok(b)
            } else {
                let q = estimate_q(&b)?;
                b.with_q(q).map_err(Failure::Lib)
            }
        })
        .collect()
}

fn rescale_all(blocks: &[ObservedBlock]) -> Result<Vec<RescaledBlock>, Failure> {
    blocks
        .iter()
        .map(|b| rescale(b).map_err(Failure::Lib))
        .collect()
}

/// Pick the embedding rank from a rescaled block's spectrum when the user
/// left `--rank` out: eigenvalue magnitudes (descending) for symmetric
/// blocks, singular values for rectangular ones.
fn auto_mode(block: &RescaledBlock, flags: &ModeFlags) -> Result<ModeSpec, Failure> {
    if let Some(mode) = flags.resolve()? {
        return Ok(mode);
    }
    let spectrum: Vec<f64> = if block.symmetric {
        let (vals, _) = linalg::eigh_desc(&block.a)?;
        let mut mags: Vec<f64> = vals.iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| b.total_cmp(a));
        mags
    } else {
        let (_, sv, _) = linalg::svd_thin(&block.a)?;
        sv
    };
    let d = select_rank(&spectrum)?;
    Ok(match flags.mode {
        ModeArg::Psd => ModeSpec::Psd { d },
        ModeArg::Asym => ModeSpec::Asymmetric { d },
        ModeArg::Indef => unreachable!("indef always resolves explicitly"),
    })
}

fn cmd_embed(args: EmbedArgs) -> Result<(), Failure> {
    let blocks = load_blocks(&args.manifest)?;
    let rescaled = rescale_all(&blocks)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::Lib(CmmiError::Io(e)))?;
    for block in &rescaled {
        let mode = auto_mode(block, &args.mode)?;
        let e = embed(block, &mode)?;
        let score = residual_score(&e)?;
        let path = args.out.join(format!("{}_embedding.csv", block.block_id));
        write_embedding_csv(&path, &e)?;
        println!(
            "block {}: n={} d={}+{} residual_score={}",
            block.block_id,
            block.n_rows(),
            e.signature.d_plus,
            e.signature.d_minus,
            score.c
        );
    }
    Ok(())
}

/// Everything `integrate` produces; shared with `chain --recover`.
fn integrate_chain(
    blocks: &[ObservedBlock],
    chain_ids: &[String],
    mode: &ModeSpec,
    ci: Option<f64>,
    entry: Option<(usize, usize)>,
    out: &Path,
) -> Result<(), Failure> {
    if chain_ids.is_empty() {
        return Err(usage("--chain needs at least one block id"));
    }
    if ci.is_some() && !matches!(mode, ModeSpec::Psd { .. }) {
        return Err(usage("--ci is only available in the psd mode"));
    }
    let by_id: HashMap<&str, &ObservedBlock> =
        blocks.iter().map(|b| (b.block_id.as_str(), b)).collect();
    let mut chain_blocks = Vec::with_capacity(chain_ids.len());
    for id in chain_ids {
        let block = by_id.get(id.as_str()).ok_or_else(|| {
            Failure::Lib(CmmiError::Data(format!(
                "chain references unknown block id {id:?}"
            )))
        })?;
        chain_blocks.push(rescale(block)?);
    }
    let refs: Vec<&RescaledBlock> = chain_blocks.iter().collect();

    let started = std::time::Instant::now();
    let recovery: ChainRecovery = cmmi_full(&refs, mode)?;
    let wall_ms = started.elapsed().as_millis();

    let rec = &recovery.recovered;
    let row_ids = rec.row_entities.ids();
    let col_ids = rec.col_entities.ids();
    write_recovered_csv(out, row_ids, col_ids, &rec.estimate.view())?;

    let mut interval = None;
    if let Some(alpha) = ci {
        let vc = variance_components(&recovery, &chain_blocks[0], chain_blocks.last().unwrap())?;
        let stderr = stderr_matrix(&vc);
        let (lower, upper) = ci_matrices(&rec.estimate.view(), &stderr.view(), alpha)?;
        let stderr_path = sibling_path(out, "_stderr");
        let ci_path = sibling_path(out, "_ci");
        write_recovered_csv(&stderr_path, row_ids, col_ids, &stderr.view())?;
        write_ci_csv(&ci_path, row_ids, col_ids, &lower.view(), &upper.view())?;
        interval = Some((stderr, lower, upper));
    }

    let overlaps: Vec<usize> = recovery.maps.iter().map(|m| m.overlap_size).collect();
    println!(
        "chain {} | overlaps {:?} | {}x{} cells | wall {} ms",
        chain_ids.join(" -> "),
        overlaps,
        row_ids.len(),
        col_ids.len(),
        wall_ms
    );

    if let Some((s, t)) = entry {
        let i = rec.row_entities.position(s).ok_or_else(|| {
            Failure::Lib(CmmiError::Data(format!(
                "row entity {s} is outside the recovered rectangle"
            )))
        })?;
        let j = rec.col_entities.position(t).ok_or_else(|| {
            Failure::Lib(CmmiError::Data(format!(
                "column entity {t} is outside the recovered rectangle"
            )))
        })?;
        match &interval {
            Some((stderr, lower, upper)) => println!(
                "entry ({s},{t}): estimate={} stderr={} interval=[{}, {}]",
                io::format_value(rec.estimate[[i, j]]),
                io::format_value(stderr[[i, j]]),
                io::format_value(lower[[i, j]]),
                io::format_value(upper[[i, j]])
            ),
            None => println!(
                "entry ({s},{t}): estimate={}",
                io::format_value(rec.estimate[[i, j]])
            ),
        }
    }
    Ok(())
}

/// `name.csv` -> `name<suffix>.csv` next to the original.
fn sibling_path(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("csv");
    path.with_file_name(format!("{stem}{suffix}.{ext}"))
}

fn cmd_integrate(args: IntegrateArgs) -> Result<(), Failure> {
    let mode = args.mode.resolve_required()?;
    let blocks = load_blocks(&args.manifest)?;
    integrate_chain(&blocks, &args.chain, &mode, args.ci, args.entry, &args.out)
}

fn cmd_recoverable(args: RecoverableArgs) -> Result<(), Failure> {
    let threshold = match args.threshold {
        Some(t) => t,
        None => args.mode.resolve_required()?.d(),
    };
    let blocks = load_blocks(&args.manifest)?;
    let ids: Vec<String> = blocks.iter().map(|b| b.block_id.clone()).collect();
    let vertices = vertices_of_observed(&blocks, &zero_scores(&ids))?;
    let g = build_graph(vertices, threshold)?;
    let mask = recoverability(&g);
    let mut memberships = Vec::new();
    for (idx, comp) in mask.components.iter().enumerate() {
        let mut entities: Vec<usize> = comp
            .rows
            .ids()
            .iter()
            .chain(comp.cols.ids())
            .copied()
            .collect();
        entities.sort_unstable();
        entities.dedup();
        memberships.extend(entities.into_iter().map(|e| (e, idx)));
    }
    let covered = memberships.len();
    write_recoverable_csv(&args.out, &memberships)?;
    println!(
        "{} component(s) | {} entity membership(s) -> {}",
        mask.components.len(),
        covered,
        args.out.display()
    );
    Ok(())
}

fn cmd_chain(args: ChainArgs) -> Result<(), Failure> {
    let mode = args.mode.resolve_required()?;
    let threshold = args.threshold.unwrap_or_else(|| mode.d());
    if args.recover && args.out.is_none() {
        return Err(usage("--recover needs --out PATH for the recovered CSV"));
    }
    if !args.recover && args.ci.is_some() {
        return Err(usage("--ci only applies together with --recover"));
    }
    let blocks = load_blocks(&args.manifest)?;
    let rescaled = rescale_all(&blocks)?;
    let mut scores = Vec::with_capacity(rescaled.len());
    for block in &rescaled {
        let e = embed(block, &mode)?;
        scores.push(residual_score(&e)?);
    }
    let vertices = vertices_of_rescaled(&rescaled, &scores)?;
    let g = build_graph(vertices, threshold)?;
    let (s, t) = args.entry;
    let chain = match select_chain(&g, s, t) {
        Ok(c) => c,
        Err(CmmiError::Data(msg)) => {
            let mask = recoverability(&g);
            let partition: Vec<String> = mask
                .components
                .iter()
                .map(|c| format!("{{{}}}", c.members.join(", ")))
                .collect();
            return Err(Failure::Lib(CmmiError::Data(format!(
                "{msg}; block components: {}",
                partition.join(" ")
            ))));
        }
        Err(e) => return Err(Failure::Lib(e)),
    };
    println!("chain: {}", chain.join(" -> "));
    for id in &chain {
        let c = scores
            .iter()
            .find(|sc| &sc.block_id == id)
            .map(|sc| sc.c)
            .unwrap_or(f64::NAN);
        println!("c({id}) = {}", io::format_value(c));
    }
    if args.recover {
        integrate_chain(
            &blocks,
            &chain,
            &mode,
            args.ci,
            Some((s, t)),
            args.out.as_deref().unwrap(),
        )?;
    }
    Ok(())
}

fn cmd_holistic(args: HolisticArgs) -> Result<(), Failure> {
    let mode = args.mode.resolve_required()?;
    let threshold = args.threshold.unwrap_or_else(|| mode.d());
    let blocks = load_blocks(&args.manifest)?;
    let rescaled = rescale_all(&blocks)?;
    let mut scores = Vec::with_capacity(rescaled.len());
    for block in &rescaled {
        let e = embed(block, &mode)?;
        scores.push(residual_score(&e)?);
    }
    let vertices = vertices_of_rescaled(&rescaled, &scores)?;
    let g = build_graph(vertices, threshold)?;
    let result = holistic_recover(&g, &rescaled, &mode)?;
    write_recovered_csv(
        &args.out,
        &result.row_ids,
        &result.col_ids,
        &result.estimate.view(),
    )?;
    let total = result.estimate.len();
    let covered = result.estimate.iter().filter(|v| !v.is_nan()).count();
    println!(
        "{} component(s) | {covered}/{total} cells covered -> {}",
        result.components.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_aggregate(args: AggregateArgs) -> Result<(), Failure> {
    if args.rank == 0 {
        return Err(usage("--rank must be at least 1"));
    }
    let blocks = load_blocks(&args.manifest)?;
    let noise = blocks
        .iter()
        .map(|b| estimate_noise(b, args.rank))
        .collect::<cmmi::Result<Vec<_>>>()?;
    let fused = fuse(&blocks, &noise)?;
    let updated = redistribute(&fused, &blocks)?;
    std::fs::create_dir_all(&args.out).map_err(|e| Failure::Lib(CmmiError::Io(e)))?;
    let mut entries = Vec::with_capacity(updated.len());
    for block in &updated {
        let file = format!("{}.csv", block.block_id);
        let mut values = block.values.clone();
        for (v, &o) in values.iter_mut().zip(block.mask.iter()) {
            if o == 0 {
                *v = f64::NAN;
            }
        }
        write_matrix_csv(&args.out.join(&file), &values.view())?;
        entries.push(ManifestEntry {
            id: block.block_id.clone(),
            rows: block.row_entities.ids().to_vec(),
            cols: if block.symmetric {
                None
            } else {
                Some(block.col_entities.ids().to_vec())
            },
            values: file,
            q: block.q,
        });
    }
    write_manifest_file(&args.out.join("manifest.json"), &ManifestFile { blocks: entries })?;
    println!(
        "fused {} cell(s) across {} block(s) -> {}",
        fused.values.len(),
        updated.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), Failure> {
    let text = std::fs::read_to_string(&args.config).map_err(|e| {
        Failure::Lib(CmmiError::Manifest(format!(
            "cannot read config {}: {e}",
            args.config.display()
        )))
    })?;
    let mut cfg = cmmi::sim_harness::SimConfig::from_json(&text)?;
    cfg.seed = args.seed;
    let result = cmmi::sim_harness::run_experiment(&cfg)?;
    write_results_csv(&args.out, &result, args.timings)?;
    let median = result
        .median_max_err()
        .map(|v| io::format_value(v))
        .unwrap_or_else(|| "NA".into());
    println!(
        "{}/{} replicate(s) succeeded | median max_err {} -> {}",
        result.rows.len(),
        cfg.replicates,
        median,
        args.out.display()
    );
    if !result.failures.is_empty() {
        for (rep, msg) in &result.failures {
            eprintln!("replicate {rep} failed: {msg}");
        }
    }
    Ok(())
}
