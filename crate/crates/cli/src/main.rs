use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use gda_core::dataset::{read_dataset, GdaDataset};
use gda_core::estimator::{estimate_domains, nmi, train_ssl, DomainEstimate};
use gda_core::harness::pipeline::{
    estimate_stage, evaluate, prepare, train_stage, DomainStage,
};
use gda_core::harness::{
    apply_scenario, cluster_sweep, grid_sweep, parse_scenario, plots, run_experiment, ExperimentConfig,
};
use gda_core::metrics::matched_agreement;
use gda_core::problem::classify_scenario;
use gda_core::synthgen::generate_to_dir;
use gda_core::trainer::TrainedModel;

#[derive(Parser)]
#[command(name = "gda", version, about = "Generalized domain adaptation toolkit")]
struct Cli {
    /// Global seed; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML experiment config (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ShapeDomains dataset (images + manifest.csv) into --out-dir.
    Synth {
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        domains: Option<usize>,
        #[arg(long)]
        per_cell: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Scenario utilities.
    Scenario {
        #[command(subcommand)]
        action: ScenarioCmd,
    },
    /// Train the label-free estimator on a dataset and write domains.csv.
    EstimateDomains {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Cluster count (defaults to the config, then the dataset's domain count).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Prepare the training split, estimate domains and train the classifier.
    Train {
        /// Reuse assignments from a `sample_index,cluster` CSV over the training split.
        #[arg(long)]
        domains: Option<PathBuf>,
        /// Disable the class-prior regularizer.
        #[arg(long)]
        no_lp: bool,
    },
    /// Evaluate a classifier checkpoint on the held-out split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Full pipeline: data, scenario, estimation, training, evaluation, plots.
    Run {
        #[arg(long)]
        no_lp: bool,
        /// Override the scenario's labeled fraction.
        #[arg(long)]
        labeled_fraction: Option<f64>,
    },
    /// Estimator sweeps.
    Sweep {
        #[command(subcommand)]
        kind: SweepCmd,
    },
    /// Re-render plots from the artifacts in --out-dir.
    Plot,
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Print the adaptation settings a dataset instance realizes.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
        /// Split string to apply first, e.g. "d0(0-3), d1(4-7)".
        #[arg(long)]
        split: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        labeled_fraction: f64,
        /// Keep domain labels visible when applying --split.
        #[arg(long)]
        show_domains: bool,
    },
}

#[derive(Subcommand)]
enum SweepCmd {
    /// NMI against domains and classes per grid size.
    Grid {
        #[arg(long, value_delimiter = ',')]
        grids: Option<Vec<usize>>,
    },
    /// NMI (and optionally HOS) per cluster count.
    Clusters {
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long)]
        train: bool,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn print_report(report: &gda_core::metrics::MetricsReport) {
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.2}"));
    println!(
        "OS* {}  UNK {}  HOS {}  OS {}",
        show(report.os_star),
        show(report.unk),
        show(report.hos),
        show(report.os)
    );
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let out = &cli.out_dir;
    match &cli.command {
        Command::Synth {
            classes,
            domains,
            per_cell,
            image_size,
        } => {
            let cfg = load_config(cli)?;
            let mut synth = cfg.seeded().data.synth;
            synth.num_classes = classes.unwrap_or(synth.num_classes);
            synth.num_domains = domains.unwrap_or(synth.num_domains);
            synth.samples_per_cell = per_cell.unwrap_or(synth.samples_per_cell);
            synth.image_size = image_size.unwrap_or(synth.image_size);
            let (ds, manifest) = generate_to_dir(&synth, out)?;
            println!("{} samples -> {}", ds.len(), manifest.display());
        }
        Command::Scenario {
            action:
                ScenarioCmd::Validate {
                    manifest,
                    split,
                    labeled_fraction,
                    show_domains,
                },
        } => {
            let (mut ds, _) = read_dataset(manifest)?;
            if let Some(text) = split {
                let mut spec = parse_scenario(text)?;
                spec.labeled_fraction = *labeled_fraction;
                spec.hide_domain_labels = !show_domains;
                ds = apply_scenario(&ds, &spec, &[], cli.seed.unwrap_or(0))?;
            }
            let names = classify_scenario(&ds)?;
            if names.is_empty() {
                println!("(no named setting)");
            }
            for n in names {
                println!("{n}");
            }
        }
        Command::EstimateDomains { manifest, k } => {
            let cfg = load_config(cli)?.seeded();
            let ds: GdaDataset = match manifest.as_ref().or(cfg.data.manifest.as_ref()) {
                Some(m) => read_dataset(m)?.0,
                None => gda_core::synthgen::generate(&cfg.data.synth)?,
            };
            std::fs::create_dir_all(out)?;
            let k = k.or(cfg.cluster.k).unwrap_or(ds.domains().len());
            let blind = ds.stripped();
            let view = blind.blinded();
            let (mut enc, log) = train_ssl(&view, &cfg.encoder, &cfg.ssl)?;
            let est: DomainEstimate = estimate_domains(&view, &mut enc, k, &cfg.cluster)?;
            est.write_csv(&out.join("domains.csv"))?;
            enc.save(&out.join("encoder.ckpt"))?;
            write_json(&out.join("ssl_log.json"), &log)?;
            let truth: Vec<usize> = ds.iter().map(|s| s.domain_label as usize).collect();
            println!(
                "k={k}  NMI vs domains {:.3}  matched agreement {:.3}",
                nmi(&est.assignments, &truth)?,
                matched_agreement(&est.assignments, &truth)?
            );
        }
        Command::Train { domains, no_lp } => {
            let mut cfg = load_config(cli)?;
            if *no_lp {
                cfg.train.lp_weight = 0.0;
            }
            let cfg = cfg.seeded();
            std::fs::create_dir_all(out)?;
            let prepared = prepare(&cfg)?;
            let stage = match domains {
                Some(path) => {
                    let assignments = DomainEstimate::read_assignments(path)?;
                    if assignments.len() != prepared.train.len() {
                        bail!(
                            "{} assignments for {} training samples",
                            assignments.len(),
                            prepared.train.len()
                        );
                    }
                    let num_domains = assignments.iter().max().map_or(1, |m| m + 1);
                    DomainStage {
                        assignments,
                        num_domains,
                        estimate: None,
                        features: None,
                        ssl_log: None,
                        nmi_domain: None,
                        agreement: None,
                    }
                }
                None => estimate_stage(&cfg, &prepared, Some(out))?,
            };
            let mut model = train_stage(&cfg, &prepared, &stage)?;
            model.log.write_csv(&out.join("train_log.csv"))?;
            model.save(&out.join("classifier.ckpt"))?;
            let last = model.log.epochs.last().map_or(0.0, |e| e.train_acc);
            println!("trained; final training accuracy {last:.3}");
        }
        Command::Evaluate { checkpoint } => {
            let cfg = load_config(cli)?.seeded();
            let prepared = prepare(&cfg)?;
            let mut model = TrainedModel::load(checkpoint)?;
            let known: Vec<u32> = prepared.known.iter().copied().collect();
            if model.known_classes != known {
                bail!(
                    "checkpoint known classes {:?} differ from the scenario's {:?}",
                    model.known_classes,
                    known
                );
            }
            let report = evaluate(&mut model, &prepared.test, &prepared.known, None)?;
            std::fs::create_dir_all(out)?;
            write_json(&out.join("metrics.json"), &report)?;
            print_report(&report);
        }
        Command::Run { no_lp, labeled_fraction } => {
            let mut cfg = load_config(cli)?;
            if *no_lp {
                cfg.train.lp_weight = 0.0;
            }
            if let Some(f) = labeled_fraction {
                cfg.scenario.labeled_fraction = *f;
            }
            let outcome = run_experiment(&cfg, out)?;
            info!("artifacts in {}", out.display());
            let names = &outcome.summary.scenarios;
            println!("scenario: {}", if names.is_empty() { "(no named setting)".to_string() } else { names.join(", ") });
            if let Some(a) = outcome.summary.domain_agreement {
                println!("domain agreement {a:.3}");
            }
            print_report(&outcome.report);
            if let Some(b) = &outcome.baseline {
                print!("baseline: ");
                print_report(b);
            }
        }
        Command::Sweep { kind } => {
            let mut cfg = load_config(cli)?;
            match kind {
                SweepCmd::Grid { grids } => {
                    if let Some(g) = grids {
                        cfg.sweep.grids = g.clone();
                    }
                    for r in grid_sweep(&cfg, out)? {
                        println!("g={}  NMI domain {:.3}  NMI class {:.3}", r.grid, r.nmi_domain, r.nmi_class);
                    }
                }
                SweepCmd::Clusters { ks, train } => {
                    if let Some(k) = ks {
                        cfg.sweep.cluster_counts = k.clone();
                    }
                    cfg.sweep.train_per_count |= *train;
                    for r in cluster_sweep(&cfg, out)? {
                        let hos = r.hos.map_or(String::new(), |h| format!("  HOS {h:.2}"));
                        println!("k={}  NMI domain {:.3}{hos}", r.k, r.nmi_domain);
                    }
                }
            }
        }
        Command::Plot => {
            for p in plots::plot_run(out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}
