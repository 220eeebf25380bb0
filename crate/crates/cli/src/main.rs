//! Command line driver: configuration ingestion, pipeline orchestration,
//! dataset cache management, comparison tables and machine-readable
//! reports.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 internal inconsistency.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use blowup_core::coeff::CycloField;
use blowup_core::cohring::{build_geometry, BlowupGeometry, Center, GeometrySpec};
use blowup_core::gwdata::{
    dataset_from_text, dataset_to_text, gw_space_x, gw_space_xt, gw_space_z, preset_seeds_x,
    preset_seeds_xt, preset_seeds_z, wdvv_close, GWDataset,
};
use blowup_core::reconstruct as rec;
use blowup_core::series::key_string;

mod config;
mod report;

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "blowup",
    about = "Exact genus-zero Gromov-Witten reconstruction for blowups"
)]
struct Cli {
    /// Configuration file (TOML). See README for the schema.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Reconstruction degree budget (overrides the config).
    #[arg(long, global = true)]
    bound: Option<i64>,
    /// Extra window margin on top of the computed minimum.
    #[arg(long, global = true)]
    order_margin: Option<i64>,
    /// Dataset cache directory (or BLOWUP_CACHE_DIR).
    #[arg(long, global = true)]
    cache_dir: Option<PathBuf>,
    /// Output directory for reports and datasets.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Force the full decomposition-theorem verification suite.
    #[arg(long, global = true)]
    verify: bool,
    /// Dump a named series (tau0, sigma0, psi0) to stdout.
    #[arg(long, global = true)]
    dump_series: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute and print the closed-form initial conditions.
    InitCond,
    /// Run the reconstruction pipeline and write the blowup dataset.
    Reconstruct,
    /// Run the WDVV oracle on the blowup geometry directly.
    Oracle,
    /// Compare two dataset files; exits nonzero on any difference.
    Compare { left: PathBuf, right: PathBuf },
    /// Run the module-level invariant suites at desk scale.
    Selftest,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                blowup_core::Error::Config(_) => ExitCode::from(2),
                blowup_core::Error::Verification(_) => ExitCode::from(1),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn run(cli: &Cli) -> blowup_core::Result<ExitCode> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.bound, cli.order_margin)?;
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let cache_dir = cli
        .cache_dir
        .clone()
        .or_else(|| std::env::var("BLOWUP_CACHE_DIR").ok().map(PathBuf::from))
        .or_else(|| cfg.cache_dir.clone());
    match &cli.command {
        Command::InitCond => init_cond(&cfg, &out_dir, cli.dump_series.as_deref()),
        Command::Reconstruct => reconstruct(&cfg, &out_dir, cache_dir.as_deref(), cli.verify),
        Command::Oracle => oracle(&cfg, &out_dir, cache_dir.as_deref()),
        Command::Compare { left, right } => compare(&cfg, left, right),
        Command::Selftest => selftest(),
    }
}

fn geometry_of(cfg: &RunConfig) -> blowup_core::Result<BlowupGeometry> {
    let spec = match (cfg.base.as_str(), cfg.center.as_str()) {
        ("P2", "point") => GeometrySpec::ProjectiveSpace {
            n: 2,
            center: Center::Point,
        },
        ("P3", "point") => GeometrySpec::ProjectiveSpace {
            n: 3,
            center: Center::Point,
        },
        ("P4", "point") => GeometrySpec::ProjectiveSpace {
            n: 4,
            center: Center::Point,
        },
        ("P3", "line") => GeometrySpec::ProjectiveSpace {
            n: 3,
            center: Center::Line,
        },
        ("P4", "line") => GeometrySpec::ProjectiveSpace {
            n: 4,
            center: Center::Line,
        },
        (b, c) => {
            return Err(blowup_core::Error::Config(format!(
                "unsupported geometry {b}/{c}"
            )))
        }
    };
    let r = match spec {
        GeometrySpec::ProjectiveSpace {
            n,
            center: Center::Point,
        } => n,
        GeometrySpec::ProjectiveSpace {
            n,
            center: Center::Line,
        } => n - 1,
    };
    let field = CycloField::for_codimension(r);
    build_geometry(&spec, &field)
}

fn geometry_tag(cfg: &RunConfig, geom: &BlowupGeometry) -> String {
    let descr = format!(
        "{}/{} r={} m={} seeds={:?}",
        cfg.base, cfg.center, geom.r, geom.field.m, cfg.extra_seeds
    );
    format!("{}-{}-{}", cfg.base, cfg.center, short_hash(&descr))
}

fn short_hash(s: &str) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(s.as_bytes());
    let d = h.finalize();
    d[..6].iter().map(|b| format!("{b:02x}")).collect()
}

fn init_cond(
    cfg: &RunConfig,
    out_dir: &Path,
    dump: Option<&str>,
) -> blowup_core::Result<ExitCode> {
    let geom = geometry_of(cfg)?;
    let budget = rec::budget_for(&geom, cfg.bound, cfg.order_margin);
    let policy = rec::pipeline_policy(&geom, &budget);
    let initial = rec::initial_data(&geom, &policy)?;
    let text = report::initial_report(&geom, &initial, &budget);
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("init_cond.txt");
    std::fs::write(&path, &text)?;
    println!("{text}");
    if let Some(name) = dump {
        dump_series(name, &initial)?;
    }
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn load_or_compute_oracle(
    cfg: &RunConfig,
    geom: &BlowupGeometry,
    cache_dir: Option<&Path>,
    bound: i64,
) -> blowup_core::Result<(GWDataset, String)> {
    let tag = geometry_tag(cfg, geom);
    let space = gw_space_xt(geom);
    if let Some(dir) = cache_dir {
        let path = dir.join(format!("oracle-{tag}-b{bound}.txt"));
        if path.exists() {
            let text = std::fs::read_to_string(&path)?;
            let data = dataset_from_text(&space, &text)?;
            return Ok((data, tag));
        }
    }
    let mut seeds = preset_seeds_xt(geom);
    seeds.extend(cfg.extra_seeds_parsed(geom)?);
    let data = wdvv_close(&space, &seeds, bound)?;
    let residual = data.wdvv_residual(true)?;
    if !residual.is_zero() {
        return Err(blowup_core::Error::Verification(
            "oracle WDVV residual nonzero".into(),
        ));
    }
    if let Some(dir) = cache_dir {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("oracle-{tag}-b{bound}.txt"));
        std::fs::write(&path, dataset_to_text(&data, &tag))?;
    }
    Ok((data, tag))
}

fn reconstruct(
    cfg: &RunConfig,
    out_dir: &Path,
    cache_dir: Option<&Path>,
    force_verify: bool,
) -> blowup_core::Result<ExitCode> {
    let geom = geometry_of(cfg)?;
    let tag = geometry_tag(cfg, &geom);
    let result = run_pipeline(cfg, &geom, force_verify)?;
    std::fs::create_dir_all(out_dir)?;
    let ds_path = out_dir.join("dataset_reconstructed.txt");
    std::fs::write(&ds_path, dataset_to_text(&result.dataset, &tag))?;
    let report_text = report::reconstruction_report(&geom, cfg, &result);
    let report_path = out_dir.join("reconstruct_report.txt");
    std::fs::write(&report_path, &report_text)?;
    println!("{report_text}");
    println!("wrote {}", ds_path.display());
    println!("wrote {}", report_path.display());
    let _ = cache_dir;
    if result.report.all_ok() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(blowup_core::Error::Verification(
            "decomposition verification failed; see report".into(),
        ))
    }
}

pub(crate) fn run_pipeline(
    cfg: &RunConfig,
    geom: &BlowupGeometry,
    force_verify: bool,
) -> blowup_core::Result<rec::DecompositionResult> {
    let budget = rec::budget_for(geom, cfg.bound, cfg.order_margin);
    let policy = rec::pipeline_policy(geom, &budget);
    let space_x = gw_space_x(geom);
    let seeds_x = preset_seeds_x(geom);
    let gw_bound_x = cfg.bound * geom.x_c1_pairing[0] + 12;
    let gw_x = wdvv_close(&space_x, &seeds_x, gw_bound_x)?;
    if !gw_x.wdvv_residual(true)?.is_zero() {
        return Err(blowup_core::Error::Verification(
            "input dataset for the base fails WDVV".into(),
        ));
    }
    let space_z = gw_space_z(geom);
    let gw_z = wdvv_close(&space_z, &preset_seeds_z(geom), gw_bound_x)?;
    rec::run_reconstruction(geom, &gw_x, &gw_z, cfg.bound, &policy, force_verify)
}

fn oracle(
    cfg: &RunConfig,
    out_dir: &Path,
    cache_dir: Option<&Path>,
) -> blowup_core::Result<ExitCode> {
    let geom = geometry_of(cfg)?;
    let (data, tag) = load_or_compute_oracle(cfg, &geom, cache_dir, cfg.bound)?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("dataset_oracle.txt");
    std::fs::write(&path, dataset_to_text(&data, &tag))?;
    println!(
        "oracle dataset: {} invariants within -K.d <= {}",
        data.inv.len(),
        cfg.bound
    );
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn compare(cfg: &RunConfig, left: &Path, right: &Path) -> blowup_core::Result<ExitCode> {
    let geom = geometry_of(cfg)?;
    let space = gw_space_xt(&geom);
    let lt = std::fs::read_to_string(left)?;
    let rt = std::fs::read_to_string(right)?;
    let ld = dataset_from_text(&space, &lt)?;
    let rd = dataset_from_text(&space, &rt)?;
    let mut diffs = 0;
    for (k, v) in &ld.inv {
        match rd.inv.get(k) {
            Some(w) if w == v => {}
            Some(w) => {
                println!("DIFF d={:?} ins={:?}: {v} vs {w}", k.0, k.1);
                diffs += 1;
            }
            None => {
                println!("ONLY LEFT d={:?} ins={:?}: {v}", k.0, k.1);
                diffs += 1;
            }
        }
    }
    for (k, w) in &rd.inv {
        if !ld.inv.contains_key(k) {
            println!("ONLY RIGHT d={:?} ins={:?}: {w}", k.0, k.1);
            diffs += 1;
        }
    }
    if diffs == 0 {
        println!("datasets identical: {} records", ld.inv.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("{diffs} differences");
        Ok(ExitCode::from(1))
    }
}

fn selftest() -> blowup_core::Result<ExitCode> {
    let checks = rec::selftest_checks()?;
    let mut ok = true;
    for (name, pass) in &checks {
        println!("{} {}", if *pass { "PASS" } else { "FAIL" }, name);
        ok = ok && *pass;
    }
    if ok {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(blowup_core::Error::Verification("selftest failed".into()))
    }
}

fn dump_series(name: &str, initial: &rec::InitialData) -> blowup_core::Result<()> {
    match name {
        "tau0" => {
            for (k, v) in &initial.tau0.terms {
                println!("{} * {:?}", key_string(k), v);
            }
        }
        "sigma0" => {
            for (j, s) in initial.sigma0.iter().enumerate() {
                println!(
                    "sigma0[{j}]: lambda = {:?}, h coeffs (x 2 pi i) = {:?}",
                    s.constants.lambda_value, s.h.coeffs
                );
                for (k, v) in &s.series.terms {
                    println!("  {} * {:?}", key_string(k), v);
                }
            }
        }
        "psi0" => {
            for (k, v) in &initial.psi0.terms {
                println!(
                    "{} * matrix({} nonzero)",
                    key_string(k),
                    v.e.iter().filter(|c| !c.is_zero()).count()
                );
            }
        }
        other => {
            return Err(blowup_core::Error::Config(format!(
                "unknown series {other}"
            )))
        }
    }
    Ok(())
}
