use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use qac_core::archive::{load_model, save_model, ModelArchive};
use qac_core::complete::{beam_search, build_mpc_index, BeamConfig, MpcIndex, DEFAULT_MIN_COUNT};
use qac_core::corpus::{
    load_query_log, load_splits, make_splits, save_splits, LogFormat, SplitConfig, UserId,
};
use qac_core::model::ModelConfig;
use qac_core::synthetic::{generate, SyntheticConfig};
use qac_core::train::{spawn_user, train_with_progress, AdadeltaConfig, TrainConfig};
use qac_service::{router, AppState, Engine, EngineConfig};

mod report;

#[derive(Parser)]
#[command(name = "qac", version, about = "Personalized query auto-completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Normalize a tab-separated query log and write user-disjoint splits.
    Prepare {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        user_column: usize,
        #[arg(long, default_value_t = 1)]
        query_column: usize,
        #[arg(long, default_value_t = 2)]
        time_column: usize,
        /// chrono format string, or "unix" for epoch seconds.
        #[arg(long, default_value = "%Y-%m-%d %H:%M:%S")]
        time_format: String,
        #[arg(long)]
        no_header: bool,
        #[arg(long, default_value_t = 1)]
        test_users: usize,
        #[arg(long, default_value_t = 0.02)]
        valid_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic two-archetype corpus as splits.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a model; prints one JSON line per epoch.
    Train {
        /// JSON with training and model settings; missing keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print `rank \t completion \t logprob` for a prefix.
    Complete {
        #[arg(long)]
        model: PathBuf,
        /// Numeric user id, a training user key, or "new".
        #[arg(long, default_value = "new")]
        user: String,
        #[arg(long)]
        prefix: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Build a most-popular-completion index from the training split.
    MpcBuild {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_MIN_COUNT)]
        min_count: u64,
    },
    /// Print `rank \t query \t count` from an MPC index.
    MpcComplete {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        prefix: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Evaluate MRR on the test split and write a JSON report plus CSV plots.
    Eval {
        /// Required unless --variant is mpc.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// unadapted, concat, factor (must match the model) or mpc.
        #[arg(long)]
        variant: String,
        #[arg(long)]
        out: PathBuf,
        /// Online learning rate; tuned on the validation split when omitted.
        #[arg(long)]
        online_lr: Option<f64>,
        /// Unadapted model for the improvement curve; defaults to the same
        /// model with online updates disabled.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Queries for the likelihood-ratio case study (repeatable).
        #[arg(long)]
        probe: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 100)]
        beam_width: usize,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Apply selections in batches of this size.
        #[arg(long, default_value_t = 1)]
        defer_updates: usize,
        #[arg(long, default_value_t = 1.0)]
        online_lr: f64,
        /// Directory of static UI assets served under /ui/.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
}

/// Training settings and model settings in one flat JSON object.
#[derive(Debug, Default, Serialize, Deserialize)]
struct TrainFile {
    #[serde(flatten)]
    train: TrainConfig,
    #[serde(flatten)]
    model: ModelConfig,
}

fn read_train_file(path: Option<&Path>) -> Result<TrainFile> {
    let Some(path) = path else {
        return Ok(TrainFile::default());
    };
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn resolve_user(archive: &mut ModelArchive, user: &str) -> Result<UserId> {
    if user == "new" {
        return Ok(spawn_user(&mut archive.users)?);
    }
    if let Some(&id) = archive.user_keys.get(user) {
        return Ok(id);
    }
    let id = UserId(
        user.parse()
            .with_context(|| format!("unknown user {user:?}"))?,
    );
    if id.0 == 0 || !archive.users.contains(id) {
        bail!("user id {id} is not in the model");
    }
    Ok(id)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare {
            log,
            out,
            user_column,
            query_column,
            time_column,
            time_format,
            no_header,
            test_users,
            valid_fraction,
            seed,
        } => {
            let format = LogFormat {
                user_column,
                query_column,
                time_column,
                time_format,
                has_header: !no_header,
            };
            let loaded = load_query_log(&log, &format)?;
            let split = make_splits(
                &loaded.records,
                &SplitConfig {
                    test_users,
                    valid_fraction,
                    seed,
                },
            )?;
            std::fs::create_dir_all(&out)?;
            save_splits(&out, &split)?;
            eprintln!(
                "{} records ({} skipped): train {}, valid {}, test {}",
                loaded.records.len(),
                loaded.skipped,
                split.train.len(),
                split.valid.len(),
                split.test.len()
            );
        }
        Command::Synth { out, seed } => {
            let corpus = generate(&SyntheticConfig {
                seed,
                ..Default::default()
            })?;
            std::fs::create_dir_all(&out)?;
            save_splits(&out, &corpus.split)?;
            eprintln!(
                "train {}, valid {}, test {}",
                corpus.split.train.len(),
                corpus.split.valid.len(),
                corpus.split.test.len()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = read_train_file(config.as_deref())?;
            let split = load_splits(&data)?;
            let model = train_with_progress(&cfg.train, &cfg.model, &split, |m| {
                println!("{}", serde_json::to_string(m).expect("metrics serialize"));
            })?;
            let keys: BTreeMap<String, UserId> = model
                .user_table
                .iter()
                .map(|(k, id)| (k.to_string(), id))
                .collect();
            save_model(&model.params, &model.users, &model.vocab, &keys, &out)?;
            eprintln!(
                "saved {} ({} parameters, {} users)",
                out.display(),
                model.params.parameter_count(),
                model.users.len()
            );
        }
        Command::Complete {
            model,
            user,
            prefix,
            top,
        } => {
            let mut archive = load_model(&model)?;
            let user = resolve_user(&mut archive, &user)?;
            let cfg = BeamConfig {
                top_n: top,
                beam_width: BeamConfig::default().beam_width.max(top),
                ..Default::default()
            };
            let ranked = beam_search(
                &archive.params,
                &archive.users,
                user,
                &archive.vocab,
                &prefix,
                &cfg,
            )?;
            for (i, c) in ranked.iter().enumerate() {
                println!("{}\t{}\t{:.4}", i + 1, c.text, c.logprob);
            }
        }
        Command::MpcBuild {
            data,
            out,
            min_count,
        } => {
            let split = load_splits(&data)?;
            let index = build_mpc_index(&split.train, min_count);
            index.save(&out)?;
            eprintln!("indexed {} queries", index.len());
        }
        Command::MpcComplete { index, prefix, top } => {
            let index = MpcIndex::load(&index)?;
            for (i, (q, count)) in index.complete(&prefix, top).iter().enumerate() {
                println!("{}\t{q}\t{count}", i + 1);
            }
        }
        Command::Eval {
            model,
            data,
            variant,
            out,
            online_lr,
            baseline,
            probe,
            seed,
            threads,
            beam_width,
        } => {
            let request = report::EvalRequest {
                model,
                data,
                variant,
                online_lr,
                baseline,
                probes: probe,
                seed,
                threads,
                beam: BeamConfig {
                    beam_width,
                    ..Default::default()
                },
            };
            let rep = report::run_eval(&request)?;
            report::write(&rep, &out)?;
            let r = &rep.result;
            eprintln!(
                "{}: mrr_all {:.4} (seen {:.4} over {}, unseen {:.4} over {})",
                rep.variant, r.mrr_all, r.mrr_seen, r.n_seen, r.mrr_unseen, r.n_unseen
            );
        }
        Command::Serve {
            model,
            port,
            host,
            defer_updates,
            online_lr,
            ui,
        } => {
            let archive = load_model(&model)?;
            let engine = Engine::new(
                archive,
                EngineConfig {
                    online: AdadeltaConfig {
                        lr: online_lr,
                        ..Default::default()
                    },
                    defer_updates,
                    ..Default::default()
                },
            )?;
            let addr: SocketAddr = format!("{host}:{port}").parse().context("bad host/port")?;
            let app = router(AppState::new(engine), ui);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(qac_service::serve(addr, app))?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .init();
    run(Cli::parse())
}
