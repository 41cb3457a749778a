use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use egpo_core::harness::report::{aggregate, find_summaries, load_summary, render};
use egpo_core::harness::{collect_dataset, evaluate_checkpoint, run, Method, RunConfig};
use egpo_core::rng;
use egpo_core::sim::generate_scene;
use egpo_core::theory::{verify_theorem1, InstanceRanges};

#[derive(Parser)]
#[command(name = "egpo", version, about = "Expert-guided policy optimization on a 2D driving simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// egpo, sac, sac_rs, sac_lag, bc or cql_offline.
    #[arg(long)]
    method: Option<String>,
    /// Repeatable: rule_switch, no_intervention_min, no_pid, no_cql, zero_env_reward.
    #[arg(long)]
    ablation: Vec<String>,
    /// Guardian density threshold.
    #[arg(long)]
    eta: Option<f64>,
    /// Override the environment step budget.
    #[arg(long)]
    steps: Option<usize>,
}

impl RunArgs {
    fn build(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = &self.method {
            cfg.method = Method::parse(m)?;
        }
        for a in &self.ablation {
            cfg.ablation.set(a)?;
        }
        if let Some(e) = self.eta {
            cfg.guardian.eta = e;
        }
        if let Some(n) = self.steps {
            cfg.total_env_steps = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Toml,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run; writes config, metrics, summary and checkpoints under --out.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Offline methods: demonstration dataset written by `collect`.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test scenes with the guardian off.
    Evaluate {
        checkpoint: PathBuf,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        episodes: Option<usize>,
        /// Write the per-episode results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Roll out the expert and save a demonstration dataset.
    Collect {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 10_000)]
        transitions: usize,
        /// Expert quality in (0, 1].
        #[arg(long)]
        quality: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Behavior cloning from a dataset.
    Bc {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check the training-risk bound and its lemmas on random tabular instances.
    VerifyTheory {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the full report as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate `summary.json` files under one or more directories.
    Report {
        #[arg(required = true)]
        roots: Vec<PathBuf>,
        /// Fraction of each run's test evaluations to average.
        #[arg(long, default_value_t = 0.1)]
        window: f64,
        #[arg(long)]
        json: bool,
    },
    /// Scene utilities.
    Scene {
        #[command(subcommand)]
        command: SceneCommand,
    },
}

#[derive(Subcommand)]
enum SceneCommand {
    /// Print the generated scene for a seed.
    Dump {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "toml")]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut o = std::io::stdout().lock();
            match writeln!(o, "{text}") {
                Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
                r => Ok(r?),
            }
        }
    }
}

fn train_cmd(cfg: RunConfig, out: Option<&Path>) -> Result<()> {
    let (_, summary) = run(&cfg, out)?;
    let line = serde_json::json!({
        "label": summary.label,
        "seed": summary.seed,
        "env_steps": summary.env_steps,
        "updates": summary.updates,
        "mean_train_cost": summary.mean_train_cost(),
        "final_test": summary.final_test,
        "final_lambda": summary.final_lambda,
    });
    println!("{line}");
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { run, out, dataset } => {
            let mut cfg = run.build()?;
            if dataset.is_some() {
                cfg.dataset = dataset;
            }
            train_cmd(cfg, out.as_deref())
        }
        Command::Evaluate {
            checkpoint,
            run,
            episodes,
            out,
        } => {
            let mut cfg = run.build()?;
            if let Some(n) = episodes {
                cfg.eval_episodes = n;
            }
            let ev = evaluate_checkpoint(&checkpoint, &cfg)?;
            println!("{}", serde_json::to_string(&ev.summary)?);
            if let Some(p) = out {
                emit(&serde_json::to_string_pretty(&ev.episodes)?, Some(&p))?;
            }
            Ok(())
        }
        Command::Collect {
            run,
            transitions,
            quality,
            out,
        } => {
            let mut cfg = run.build()?;
            if let Some(q) = quality {
                cfg.expert.quality = q;
                cfg.expert.validate()?;
            }
            let ds = collect_dataset(&cfg.env, &cfg.train_scenes, &cfg.expert, transitions, cfg.seed)?;
            ds.save(&out)?;
            let line = serde_json::json!({
                "path": out,
                "transitions": ds.transitions.len(),
                "unsafe_step_rate": ds.unsafe_step_rate(),
                "config_hash": ds.header.config_hash,
            });
            println!("{line}");
            Ok(())
        }
        Command::Bc {
            run,
            dataset,
            epochs,
            out,
        } => {
            let mut cfg = run.build()?;
            cfg.method = Method::Bc;
            cfg.dataset = Some(dataset);
            if let Some(e) = epochs {
                cfg.bc_epochs = e;
            }
            train_cmd(cfg, out.as_deref())
        }
        Command::VerifyTheory { instances, seed, out } => {
            let rep = verify_theorem1(instances, &InstanceRanges::default(), &mut rng::derive(seed, 0))?;
            println!(
                "instances={} bound_violations={} lemma1_failures={} lemma2_violations={} lemma3_violations={} k_eta_non_monotone={} min_slack={:.3e}",
                rep.instances,
                rep.bound_violations,
                rep.lemma1_failures,
                rep.lemma2_violations,
                rep.lemma3_violations,
                rep.k_eta_non_monotone,
                rep.min_slack
            );
            if let Some(p) = out {
                emit(&serde_json::to_string_pretty(&rep)?, Some(&p))?;
            }
            if !rep.all_passed() {
                bail!("{} checks failed", rep.failures.len().max(1));
            }
            Ok(())
        }
        Command::Report { roots, window, json } => {
            let mut runs = vec![];
            for r in &roots {
                for p in find_summaries(r)? {
                    runs.push(load_summary(&p)?);
                }
            }
            if runs.is_empty() {
                bail!("no summary.json found");
            }
            let rows = aggregate(&runs, window);
            if json {
                for r in &rows {
                    println!("{}", serde_json::to_string(r)?);
                }
            } else {
                print!("{}", render(&rows));
            }
            Ok(())
        }
        Command::Scene {
            command: SceneCommand::Dump {
                seed,
                config,
                format,
                out,
            },
        } => {
            let cfg = RunArgs {
                config,
                ..Default::default()
            }
            .build()?;
            let scene = generate_scene(seed, &cfg.env.difficulty);
            let text = match format {
                Format::Toml => toml::to_string_pretty(&scene)?,
                Format::Json => serde_json::to_string_pretty(&scene)?,
            };
            emit(&text, out.as_deref())
        }
    }
}
