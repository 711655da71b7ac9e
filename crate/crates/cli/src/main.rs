//! `rcp`: pretrain a toy backbone, train pruning and repair plug-ins, evaluate and report.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use rcp_core::backbone::{Backbone, ForwardMode};
use rcp_core::checkpoint;
use rcp_core::config::RunConfig;
use rcp_core::harness::{evaluate, generate_batch, pretrain, GradcheckSetup, Split, Trainer, STEP_CSV_HEADER};
use rcp_core::metrics::{drift_csv, flops_total, kv_cache_bytes, CostModel, FLOPS_FORMULA};
use rcp_core::rcp::RcpModel;
use rcp_core::report::{build_report, Summary};
use rcp_core::{Error, Result};

/// Environment variable naming the directory that relative output dirs live under.
const OUTPUT_ROOT_ENV: &str = "RCP_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "rcp", version, about = "Learned token pruning with representation repair on a toy decoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Flat `key = value` config file; missing keys take their defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_kv)]
    set: Vec<(String, String)>,
    /// Plug-in variant: full, pruner-only, no-adapter, no-repair-loss, mean-only-repair, topk.
    #[arg(long)]
    variant: Option<String>,
    /// Target retention r*.
    #[arg(long)]
    target_retention: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain and freeze the backbone; prints full-token accuracy.
    Pretrain {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Overwrite an existing backbone checkpoint.
        #[arg(long)]
        force: bool,
    },
    /// Train the plug-in modules against the frozen backbone.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a trained plug-in on the eval split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Student pass: `masked` (attention masking) or `gathered` (rows removed).
        #[arg(long, default_value = "gathered")]
        mode: String,
    },
    /// Write drift, retention, efficiency and summary files for a trained run.
    Report {
        /// Variant directory holding config.txt, plugin.bin and metrics.csv.
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Finite-difference check of the total loss on a small configuration.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Analytic FLOPs and KV-cache bytes under uniform retention.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Pruneable tokens per sequence.
        #[arg(long, default_value_t = 576)]
        tokens: usize,
        /// Tokens that are never pruned.
        #[arg(long, default_value_t = 0)]
        fixed: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 0.33, 0.22, 0.11])]
        retention: Vec<f64>,
    },
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut set = self.set.clone();
        if let Some(v) = &self.variant {
            set.push(("variant".into(), v.clone()));
        }
        if let Some(r) = self.target_retention {
            set.push(("target_retention".into(), r.to_string()));
        }
        RunConfig::parse_with(&text, &set)
    }
}

fn run_root(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) => Path::new(&root).join(&cfg.output_dir),
        None => PathBuf::from(&cfg.output_dir),
    }
}

fn variant_dir(cfg: &RunConfig) -> PathBuf {
    run_root(cfg).join(cfg.variant.name())
}

fn require(paths: &[PathBuf]) -> Result<()> {
    let missing: Vec<String> = paths.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::MissingArtifacts(missing))
    }
}

fn load_backbone(cfg: &RunConfig, path: &Path) -> Result<Backbone> {
    require(&[path.to_path_buf()])?;
    Backbone::from_store(cfg.backbone(), checkpoint::load(path)?)
}

fn load_model(cfg: &RunConfig, path: &Path) -> Result<RcpModel> {
    require(&[path.to_path_buf()])?;
    RcpModel::from_store(cfg.rcp(), &cfg.backbone(), checkpoint::load(path)?)
}

fn cmd_pretrain(cfg: RunConfig, force: bool) -> Result<()> {
    let dir = run_root(&cfg);
    let ckpt = dir.join("backbone.bin");
    if ckpt.exists() && !force {
        return Err(Error::config("output_dir", format!("{} exists; pass --force to overwrite", ckpt.display())));
    }
    fs::create_dir_all(&dir)?;
    let task = cfg.task();
    let pc = cfg.pretrain();
    let mut csv = String::from("step,loss\n");
    let (backbone, losses) = pretrain(&cfg.backbone(), &task, &pc, |s, l| {
        if s % 100 == 0 {
            eprintln!("pretrain step {s} loss {l:.5}");
        }
    })?;
    for (s, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{s},{l}\n"));
    }
    let examples = generate_batch(&task, cfg.seed, Split::Eval, 0, cfg.eval_examples)?;
    let full = evaluate(&backbone, None, &examples, ForwardMode::Teacher, 1.0)?;
    checkpoint::save(&ckpt, backbone.store())?;
    fs::write(dir.join("backbone.txt"), cfg.to_text())?;
    fs::write(dir.join("pretrain.csv"), csv)?;
    println!("accuracy_full {:.4}", full.accuracy);
    println!("digest {}", backbone.store().digest_hex());
    Ok(())
}

fn cmd_train(cfg: RunConfig, force: bool) -> Result<()> {
    let root = run_root(&cfg);
    let backbone = load_backbone(&cfg, &root.join("backbone.bin"))?;
    let dir = variant_dir(&cfg);
    let plugin = dir.join("plugin.bin");
    if plugin.exists() && !force {
        return Err(Error::config("variant", format!("{} exists; pass --force to overwrite", plugin.display())));
    }
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let model = RcpModel::new(cfg.rcp(), &cfg.backbone(), cfg.seed)?;
    let mut trainer = Trainer::new(&backbone, model, cfg.task(), cfg.train())?;
    let mut csv = format!("{STEP_CSV_HEADER}\n");
    let log = trainer.run(|m| {
        if m.step % 50 == 0 {
            eprintln!(
                "step {} task {:.4} repair {:.4} sparse {:.4} r_bar {:.3}",
                m.step, m.task_loss, m.repair_loss, m.sparse_loss, m.r_bar
            );
        }
    })?;
    for m in &log {
        csv.push_str(&m.csv_row());
        csv.push('\n');
    }
    fs::write(dir.join("metrics.csv"), csv)?;
    let model = trainer.into_model();
    checkpoint::save(&plugin, model.store())?;
    if let Some(last) = log.last() {
        println!("final r_bar {:.4} task_loss {:.5} repair_loss {:.5}", last.r_bar, last.task_loss, last.repair_loss);
    }
    println!("plugin {}", plugin.display());
    Ok(())
}

fn cmd_eval(cfg: RunConfig, mode: &str) -> Result<()> {
    let mode = match mode {
        "masked" => ForwardMode::Masked,
        "gathered" => ForwardMode::Gathered,
        other => return Err(Error::config("mode", format!("expected masked or gathered, got `{other}`"))),
    };
    let backbone = load_backbone(&cfg, &run_root(&cfg).join("backbone.bin"))?;
    let model = load_model(&cfg, &variant_dir(&cfg).join("plugin.bin"))?;
    let examples = generate_batch(&cfg.task(), cfg.seed, Split::Eval, 0, cfg.eval_examples)?;
    let r = evaluate(&backbone, Some(&model), &examples, mode, cfg.target_retention)?;
    let out = json!({
        "accuracy": r.accuracy,
        "avg_tokens": r.avg_tokens,
        "r_bar": r.r_bar,
        "per_layer_retention": r.per_layer_retention,
    });
    println!("{}", serde_json::to_string_pretty(&out).expect("plain json"));
    Ok(())
}

fn cmd_report(run_dir: Option<PathBuf>, args: &ConfigArgs) -> Result<()> {
    let dir = match run_dir {
        Some(d) => d,
        None => variant_dir(&args.load()?),
    };
    let parent = dir.parent().map(Path::to_path_buf).unwrap_or_default();
    let needed = [
        dir.join("config.txt"),
        dir.join("plugin.bin"),
        dir.join("metrics.csv"),
        parent.join("backbone.bin"),
    ];
    require(&needed)?;
    let cfg = RunConfig::parse(&fs::read_to_string(&needed[0])?)?;
    let backbone = load_backbone(&cfg, &needed[3])?;
    let model = load_model(&cfg, &needed[1])?;
    let rep = build_report(&cfg, &backbone, &model)?;
    fs::write(dir.join("drift.csv"), drift_csv(&rep.drift))?;
    fs::write(dir.join("retention.csv"), rep.retention.to_csv())?;
    fs::write(dir.join("efficiency.csv"), &rep.efficiency_csv)?;
    let summary = summary_json(&rep.summary);
    fs::write(dir.join("summary.json"), format!("{summary}\n"))?;
    println!("{}", rep.retention.table_row());
    println!("{summary}");
    Ok(())
}

fn summary_json(s: &Summary) -> String {
    let map: serde_json::Map<String, serde_json::Value> =
        Summary::KEYS.iter().zip(s.values()).map(|(k, v)| (k.to_string(), json!(v))).collect();
    serde_json::to_string_pretty(&map).expect("plain json")
}

fn cmd_gradcheck(seed: u64, step: f64, tol: f64) -> Result<()> {
    let r = GradcheckSetup::toy(seed)?.check(step)?;
    println!("coordinates {}", r.coordinates);
    println!("max_rel_error {:e}", r.max_rel_error);
    if r.max_rel_error > tol {
        return Err(Error::NonFinite(format!(
            "gradient check: relative error {:e} exceeds {tol:e} at {:?}",
            r.max_rel_error, r.worst
        )));
    }
    Ok(())
}

fn cmd_flops(cfg: RunConfig, tokens: usize, fixed: usize, retention: &[f64]) -> Result<()> {
    let cost = |r: f64| {
        CostModel::from_retention(
            cfg.n_layers,
            cfg.d_model,
            cfg.n_heads,
            cfg.d_ff,
            cfg.bytes_per_element,
            fixed,
            tokens,
            &vec![r; cfg.n_layers],
        )
    };
    let dense = cost(1.0);
    let (f0, b0) = (flops_total(&dense), kv_cache_bytes(&dense));
    println!("# {FLOPS_FORMULA}");
    println!("retention,tokens,flops,kv_bytes,flops_ratio,cache_ratio");
    for &r in retention {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::config("retention", format!("{r} is outside [0, 1]")));
        }
        let c = cost(r);
        let (f, b) = (flops_total(&c), kv_cache_bytes(&c));
        println!(
            "{r},{},{f},{b},{:.6},{:.6}",
            c.seq_lens[0],
            f as f64 / f0 as f64,
            b as f64 / b0 as f64
        );
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite(_) | Error::MaskedRow { .. } | Error::DegenerateMask | Error::EmptyRegion(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let res = match cli.cmd {
        Command::Pretrain { cfg, force } => cfg.load().and_then(|c| cmd_pretrain(c, force)),
        Command::Train { cfg, force } => cfg.load().and_then(|c| cmd_train(c, force)),
        Command::Eval { cfg, mode } => cfg.load().and_then(|c| cmd_eval(c, &mode)),
        Command::Report { run_dir, cfg } => cmd_report(run_dir, &cfg),
        Command::Gradcheck { seed, step, tol } => cmd_gradcheck(seed, step, tol),
        Command::Flops { cfg, tokens, fixed, retention } => cfg.load().and_then(|c| cmd_flops(c, tokens, fixed, &retention)),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
