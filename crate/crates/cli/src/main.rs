mod config;
mod error;
mod io;
mod stages;

use bytepatch_core::asm::{disassemble, jumpdest_analysis, to_hex};
use bytepatch_core::cfg::recover_blocks;
use bytepatch_core::deploy::{bundle, encode_upgrade, estimate_deploy_cost};
use bytepatch_ingest::{BlockTag, DiskCache, Fetcher, RetryPolicy, RpcEndpoint};
use clap::{Args, Parser, Subcommand};
use config::{DeployConfig, PipelineConfig};
use error::{exit, CliError};
use serde_json::{json, Value};
use stages::{PatchInputs, ReplayInputs};
use std::path::{Path, PathBuf};
use std::time::Duration;

#[derive(Parser)]
#[command(name = "bytepatch", version, about = "Patch deployed EVM bytecode and test the patch against recorded traffic")]
struct Cli {
    /// Machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decode bytecode into an instruction listing.
    Disasm {
        code: PathBuf,
        /// Also list basic blocks.
        #[arg(long)]
        blocks: bool,
    },
    /// Rewrite bytecode according to a vulnerability report.
    Patch {
        #[command(flatten)]
        inputs: PatchArgs,
        /// Patched code, as hex.
        #[arg(long, short)]
        out: PathBuf,
        /// Rewrite summary (JSON).
        #[arg(long)]
        summary: Option<PathBuf>,
    },
    /// Replay transactions against original and patched code.
    Test {
        #[arg(long)]
        original: PathBuf,
        #[arg(long)]
        patched: PathBuf,
        /// Summary written by `patch`; locates template code precisely.
        #[arg(long)]
        rewrite: Option<PathBuf>,
        #[command(flatten)]
        replay: ReplayArgs,
        /// Write the diff report here.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Plan a proxy deployment, or an upgrade of an existing proxy.
    DeployPlan {
        code: PathBuf,
        #[arg(long)]
        owner: String,
        /// Owner's next nonce.
        #[arg(long, default_value_t = 0)]
        nonce: u64,
        /// Existing proxy to upgrade.
        #[arg(long)]
        proxy: Option<String>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Download contract code and transactions over JSON-RPC.
    Fetch {
        #[arg(long)]
        rpc: String,
        #[arg(long)]
        address: String,
        #[arg(long)]
        from: u64,
        #[arg(long)]
        to: u64,
        /// Transaction fixture output.
        #[arg(long, short)]
        out: PathBuf,
        /// Also save the code at block `to`.
        #[arg(long)]
        code_out: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        max_blocks: u64,
        #[arg(long, default_value_t = 8)]
        in_flight: usize,
        #[arg(long, default_value_t = 30)]
        timeout_secs: u64,
        #[arg(long, default_value_t = 3)]
        attempts: u32,
        /// Defaults to $BYTEPATCH_CACHE_DIR, else .bytepatch-cache.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        #[arg(long)]
        no_cache: bool,
    },
    /// Patch, test and plan deployment in one go.
    Pipeline(PipelineArgs),
}

#[derive(Args, Clone, Default)]
struct PatchArgs {
    #[arg(long)]
    code: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    dsl: Option<PathBuf>,
    /// JSON map of storage variable names to slots, for the DSL.
    #[arg(long)]
    names: Option<PathBuf>,
    /// Function signatures, one per line.
    #[arg(long)]
    signatures: Option<PathBuf>,
    /// Directory of `.evm` templates overriding built-ins by name.
    #[arg(long)]
    templates: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct ReplayArgs {
    /// Fixture JSON with `accounts` and optionally `transactions`.
    #[arg(long)]
    world: PathBuf,
    #[arg(long)]
    txs: Option<PathBuf>,
    #[arg(long)]
    contract: Option<String>,
    /// Id of a transaction the patch must stop; repeatable.
    #[arg(long = "known-attack")]
    known_attacks: Vec<String>,
    #[arg(long)]
    fork: Option<String>,
    #[arg(long)]
    step_limit: Option<u64>,
    /// Compare LOG events too.
    #[arg(long)]
    strict_logs: bool,
}

#[derive(Args, Clone, Default)]
struct PipelineArgs {
    /// TOML config; flags below override it.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    code: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    dsl: Option<PathBuf>,
    #[arg(long)]
    names: Option<PathBuf>,
    #[arg(long)]
    signatures: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long)]
    txs: Option<PathBuf>,
    #[arg(long)]
    contract: Option<String>,
    #[arg(long = "known-attack")]
    known_attacks: Vec<String>,
    #[arg(long)]
    fork: Option<String>,
    #[arg(long)]
    step_limit: Option<u64>,
    #[arg(long)]
    strict_logs: bool,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Plan deployment for this owner.
    #[arg(long)]
    owner: Option<String>,
    #[arg(long)]
    nonce: Option<u64>,
    #[arg(long)]
    proxy: Option<String>,
}

/// What a command prints.
struct Output {
    json: Value,
    text: String,
}

fn disasm(code: &Path, blocks: bool) -> Result<Output, CliError> {
    let bytes = io::read_code(code)?;
    let program = disassemble(&bytes);
    let cfg = recover_blocks(&program, &jumpdest_analysis(&bytes));
    let instructions: Vec<Value> = program
        .instructions
        .iter()
        .map(|i| {
            let mut v = json!({"offset": i.offset, "op": i.mnemonic()});
            if !i.operand.is_empty() {
                v["operand"] = json!(to_hex(&i.operand));
            }
            if i.missing > 0 {
                v["missing"] = json!(i.missing);
            }
            v
        })
        .collect();
    let mut text = program.listing();
    if blocks {
        text.push('\n');
        for b in &cfg.blocks {
            text.push_str(&format!("block {:#06x}..{:#06x} {}\n", b.start, b.end, b.terminator));
        }
    }
    Ok(Output {
        json: json!({
            "length": bytes.len(),
            "code_end": cfg.code_end,
            "instructions": instructions,
            "blocks": cfg.blocks,
        }),
        text,
    })
}

fn patch_inputs(a: &PatchArgs) -> PatchInputs {
    PatchInputs {
        code: a.code.clone(),
        report: a.report.clone(),
        dsl: a.dsl.clone(),
        names: a.names.clone(),
        signatures: a.signatures.clone(),
        templates: a.templates.clone(),
    }
}

fn replay_inputs(a: &ReplayArgs) -> ReplayInputs {
    ReplayInputs {
        world: a.world.clone(),
        txs: a.txs.clone(),
        contract: a.contract.clone(),
        known_attacks: a.known_attacks.clone(),
        fork: a.fork.clone(),
        step_limit: a.step_limit,
        strict_logs: a.strict_logs,
    }
}

fn patch_text(p: &stages::Patched) -> String {
    let r = &p.rewrite;
    let mut text = format!(
        "{} -> {} bytes (+{}), {} patch(es)\n",
        r.original_length,
        r.patched_code.len(),
        r.size_increase,
        r.report.len()
    );
    for n in &r.report {
        text.push_str(&format!(
            "  {:#06x} {} via {}: +{} gas per traversal\n",
            n.pc, n.kind, n.template, n.traversal_gas_delta
        ));
    }
    for w in &p.warnings {
        text.push_str(&format!("warning: {w}\n"));
    }
    text
}

fn replay_text(report: &bytepatch_core::difftester::DiffReport) -> String {
    let mut text = String::new();
    for t in &report.transactions {
        let mark = if t.downstream_of_divergence { " (downstream)" } else { "" };
        text.push_str(&format!(
            "{:>4} {:<24} {:?}{mark} gas {} -> {}\n",
            t.index, t.id, t.verdict, t.original_gas, t.patched_gas
        ));
    }
    match report.mean_gas_overhead {
        Some(g) => text.push_str(&format!("mean overhead {g:.1} gas\n")),
        None => text.push_str("no transaction reached patched code\n"),
    }
    text
}

fn test_cmd(
    original: &Path,
    patched: &Path,
    rewrite: Option<&Path>,
    replay: &ReplayArgs,
    out: Option<&Path>,
) -> Result<Output, CliError> {
    let orig = io::read_code(original)?;
    let new = io::read_code(patched)?;
    let regions = match rewrite {
        Some(p) => {
            let summary: Value = io::read_json(p)?;
            let ranges: Vec<(usize, usize)> = serde_json::from_value(summary["template_ranges"].clone())
                .map_err(|e| CliError::input(format!("{}: template_ranges: {e}", p.display())))?;
            ranges.into_iter().map(|(a, b)| a..b).collect()
        }
        None => Vec::new(),
    };
    let replayed = stages::replay(&replay_inputs(replay), &orig, &new, None, regions)?;
    if let Some(out) = out {
        io::write_json(out, &replayed.report)?;
    }
    stages::judge(&replayed.report)?;
    Ok(Output {
        json: serde_json::to_value(&replayed.report).map_err(|e| CliError::Internal(e.to_string()))?,
        text: replay_text(&replayed.report),
    })
}

fn deploy_plan(code: &[u8], d: &DeployConfig) -> Result<Value, CliError> {
    let owner = io::parse_address(&d.owner)?;
    Ok(match &d.proxy {
        Some(proxy) => {
            let plan = encode_upgrade(io::parse_address(proxy)?, owner, d.nonce, code)?;
            let mut v = to_value(&plan);
            v["kind"] = json!("upgrade");
            v["cost_estimate"] = json!(estimate_deploy_cost(&plan.new_logic_code));
            v
        }
        None => {
            let b = bundle(code, owner, d.nonce)?;
            let mut v = to_value(&b);
            v["kind"] = json!("fresh");
            v
        }
    })
}

fn to_value<T: serde::Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("plans serialize")
}

fn fetch_cmd(
    rpc: &str,
    address: &str,
    range: (u64, u64),
    out: &Path,
    code_out: Option<&Path>,
    limits: (u64, usize, u64, u32),
    cache: Option<DiskCache>,
) -> Result<Output, CliError> {
    let (max_blocks, in_flight, timeout_secs, attempts) = limits;
    let address = io::parse_address(address)?;
    let endpoint = RpcEndpoint::new(
        rpc,
        Duration::from_secs(timeout_secs),
        RetryPolicy {
            max_attempts: attempts,
            ..Default::default()
        },
    )?;
    let mut fetcher = Fetcher::new(endpoint, cache)?;
    fetcher.max_blocks = max_blocks;
    fetcher.in_flight = in_flight;
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let (txs, code) = rt.block_on(async {
        let txs = fetcher.fetch_transactions(address, range.0, range.1).await?;
        let code = match code_out {
            Some(_) => Some(fetcher.fetch_code(address, BlockTag::Number(range.1)).await?),
            None => None,
        };
        Ok::<_, CliError>((txs, code))
    })?;
    io::write_json(out, &json!({ "transactions": txs }))?;
    if let (Some(p), Some(code)) = (code_out, &code) {
        io::write_atomic(p, &stages::hex_file(code))?;
    }
    Ok(Output {
        json: json!({"ok": true, "transactions": txs.len(), "code_length": code.map(|c| c.len())}),
        text: format!("{} transaction(s) written to {}\n", txs.len(), out.display()),
    })
}

fn merge_pipeline(a: &PipelineArgs) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    macro_rules! over {
        ($($f:ident),*) => { $( if a.$f.is_some() { cfg.$f = a.$f.clone(); } )* };
    }
    over!(code, report, dsl, names, signatures, templates, world, txs, contract, fork, step_limit, out_dir);
    if !a.known_attacks.is_empty() {
        cfg.known_attacks = a.known_attacks.clone();
    }
    cfg.strict_logs |= a.strict_logs;
    if let Some(owner) = &a.owner {
        cfg.deploy = Some(DeployConfig {
            owner: owner.clone(),
            nonce: a.nonce.unwrap_or(0),
            proxy: a.proxy.clone(),
        });
    } else if let Some(d) = cfg.deploy.as_mut() {
        if let Some(n) = a.nonce {
            d.nonce = n;
        }
        if a.proxy.is_some() {
            d.proxy = a.proxy.clone();
        }
    }
    Ok(cfg)
}

fn pipeline(cfg: &PipelineConfig) -> Result<Output, (CliError, Option<PathBuf>)> {
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    let fail_to = Some(out_dir.clone());
    cfg.check_inputs().map_err(|e| (e, None))?;
    let at = |stage: &'static str| {
        let dir = fail_to.clone();
        move |e: CliError| (e.with_stage(stage), dir)
    };

    let inputs = PatchInputs {
        code: cfg.code.clone().unwrap(),
        report: cfg.report.clone().unwrap(),
        dsl: cfg.dsl.clone(),
        names: cfg.names.clone(),
        signatures: cfg.signatures.clone(),
        templates: cfg.templates.clone(),
    };
    let patched = stages::patch(&inputs).map_err(at("patch"))?;
    let code = &patched.rewrite.patched_code;
    io::write_atomic(&out_dir.join("patched.hex"), &stages::hex_file(code)).map_err(at("patch"))?;
    io::write_json(&out_dir.join("rewrite.json"), &stages::rewrite_summary(&patched)).map_err(at("patch"))?;

    let replay = ReplayInputs {
        world: cfg.world.clone().unwrap(),
        txs: cfg.txs.clone(),
        contract: cfg.contract.clone(),
        known_attacks: cfg.known_attacks.clone(),
        fork: cfg.fork.clone(),
        step_limit: cfg.step_limit,
        strict_logs: cfg.strict_logs,
    };
    let regions = stages::regions_of(&patched.rewrite);
    let replayed = stages::replay(&replay, &patched.original, code, Some(&patched.report.contract), regions)
        .map_err(at("test"))?;
    io::write_json(&out_dir.join("diff_report.json"), &replayed.report).map_err(at("test"))?;
    stages::judge(&replayed.report).map_err(at("test"))?;

    let mut artifacts = vec!["patched.hex", "rewrite.json", "diff_report.json"];
    if let Some(d) = &cfg.deploy {
        let plan = deploy_plan(code, d).map_err(at("deploy"))?;
        io::write_json(&out_dir.join("deploy_plan.json"), &plan).map_err(at("deploy"))?;
        artifacts.push("deploy_plan.json");
    }
    // A failure report from an earlier run would now be stale.
    let _ = std::fs::remove_file(out_dir.join("failure.json"));

    let report = &replayed.report;
    Ok(Output {
        json: json!({
            "ok": true,
            "patched_code": to_hex(code),
            "size_increase": patched.rewrite.size_increase,
            "counts": report.counts,
            "mean_gas_overhead": report.mean_gas_overhead,
            "warnings": patched.warnings,
            "out_dir": out_dir,
            "artifacts": artifacts,
        }),
        text: format!(
            "{}{}artifacts in {}\n",
            patch_text(&patched),
            replay_text(report),
            out_dir.display()
        ),
    })
}

impl CliError {
    fn with_stage(self, stage: &'static str) -> Self {
        match self {
            CliError::Rejected { code, message, mut details } => {
                details["stage"] = json!(stage);
                CliError::Rejected { code, message, details }
            }
            other => other,
        }
    }
}

fn run(cli: &Cli) -> Result<Output, CliError> {
    match &cli.command {
        Command::Disasm { code, blocks } => disasm(code, *blocks),
        Command::Patch { inputs, out, summary } => {
            let p = stages::patch(&patch_inputs(inputs))?;
            io::write_atomic(out, &stages::hex_file(&p.rewrite.patched_code))?;
            let s = stages::rewrite_summary(&p);
            if let Some(path) = summary {
                io::write_json(path, &s)?;
            }
            Ok(Output {
                json: s,
                text: patch_text(&p),
            })
        }
        Command::Test {
            original,
            patched,
            rewrite,
            replay,
            out,
        } => test_cmd(original, patched, rewrite.as_deref(), replay, out.as_deref()),
        Command::DeployPlan {
            code,
            owner,
            nonce,
            proxy,
            out,
        } => {
            let bytes = io::read_code(code)?;
            let d = DeployConfig {
                owner: owner.clone(),
                nonce: *nonce,
                proxy: proxy.clone(),
            };
            let plan = deploy_plan(&bytes, &d)?;
            if let Some(out) = out {
                io::write_json(out, &plan)?;
            }
            let text = format!(
                "{} plan, {} transaction(s), estimated {} gas\n",
                plan["kind"].as_str().unwrap_or(""),
                plan["transactions"].as_array().map_or(0, Vec::len),
                plan["cost_estimate"]
            );
            Ok(Output { json: plan, text })
        }
        Command::Fetch {
            rpc,
            address,
            from,
            to,
            out,
            code_out,
            max_blocks,
            in_flight,
            timeout_secs,
            attempts,
            cache_dir,
            no_cache,
        } => {
            let cache = match (no_cache, cache_dir) {
                (true, _) => None,
                (false, Some(d)) => Some(DiskCache::new(d)),
                (false, None) => Some(DiskCache::from_env()),
            };
            fetch_cmd(
                rpc,
                address,
                (*from, *to),
                out,
                code_out.as_deref(),
                (*max_blocks, *in_flight, *timeout_secs, *attempts),
                cache,
            )
        }
        Command::Pipeline(args) => {
            let cfg = merge_pipeline(args)?;
            pipeline(&cfg).map_err(|(e, dir)| {
                if let Some(dir) = dir {
                    // Best effort: the exit code already carries the verdict.
                    let _ = io::write_json(&dir.join("failure.json"), &e.to_json());
                }
                e
            })
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(out) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&out.json).unwrap());
            } else {
                print!("{}", out.text);
            }
            exit::OK
        }
        Err(e) => {
            if cli.json {
                println!("{}", serde_json::to_string_pretty(&e.to_json()).unwrap());
            } else {
                eprintln!("error: {e}");
            }
            e.exit_code()
        }
    };
    std::process::exit(code);
}
