// SPDX-License-Identifier: Apache-2.0

//! `binlift`: load, disassemble, discover and type RISC-V ELF images.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use binlift::discovery::{discover, seed_entry_points, DiscoveryConfig, DiscoveryState};
use binlift::ir::validate_block;
use binlift::mem::{load_elf, LoadOptions, Memory};
use binlift::report;
use binlift::typeinf::recovery_loop;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(
    name = "binlift",
    version,
    about = "Binary lifting and signature recovery for RISC-V ELF images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the memory map.
    Info(Common),
    /// Linear disassembly of executable segments.
    Disasm(Common),
    /// Discover functions and classify their blocks.
    Discover(Pipeline),
    /// Recover function signatures, feeding code pointers back into discovery.
    Typeinf(Pipeline),
}

#[derive(Args, Debug)]
struct Common {
    /// ELF file to load.
    path: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Write the report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Pipeline {
    #[command(flatten)]
    common: Common,
    /// Extra function entry, in hexadecimal; repeatable.
    #[arg(long = "entry", value_parser = parse_hex)]
    entries: Vec<u64>,
    #[arg(long)]
    max_funcs: Option<usize>,
    #[arg(long)]
    max_block_bytes: Option<u64>,
    /// Largest constant set tracked before widening.
    #[arg(long)]
    const_set_cap: Option<usize>,
}

impl Pipeline {
    fn config(&self) -> DiscoveryConfig {
        let d = DiscoveryConfig::default();
        DiscoveryConfig {
            max_block_bytes: self.max_block_bytes.unwrap_or(d.max_block_bytes),
            const_set_cap: self.const_set_cap.unwrap_or(d.const_set_cap),
            max_functions: self.max_funcs.unwrap_or(d.max_functions),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
    Dot,
}

fn parse_hex(s: &str) -> Result<u64, String> {
    let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).unwrap_or(s);
    u64::from_str_radix(digits, 16).map_err(|e| format!("{s:?} is not a hexadecimal address: {e}"))
}

enum Failure {
    /// Unreadable input or unsupported request.
    Load(anyhow::Error),
    /// A pipeline stage produced a malformed block.
    Invariant(String),
}

fn load(path: &Path) -> Result<Memory, Failure> {
    let bytes = fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Load)?;
    load_elf(&bytes, &LoadOptions::default())
        .with_context(|| format!("loading {}", path.display()))
        .map_err(Failure::Load)
}

fn json(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values always serialize");
    s.push('\n');
    s
}

fn no_dot(what: &str) -> Failure {
    Failure::Load(anyhow::anyhow!("--format dot is not available for {what}"))
}

fn check_blocks(st: &DiscoveryState) -> Result<(), Failure> {
    for f in st.explored.values() {
        for (addr, b) in &f.blocks {
            if let Some(v) = validate_block(&b.block).first() {
                return Err(Failure::Invariant(format!("block {addr:?}: {v}")));
            }
        }
    }
    Ok(())
}

fn warn_failures(mem: &Memory, st: &DiscoveryState) {
    for (a, why) in &st.failures {
        log::warn!("{a}: {why}");
    }
    if st.explored.is_empty() {
        log::warn!("no functions found; entry point is {:?}", mem.entry());
    }
}

fn run(cli: &Cli) -> Result<(String, Option<PathBuf>), Failure> {
    let (common, text) = match &cli.command {
        Command::Info(c) => {
            let mem = load(&c.path)?;
            let out = match c.format {
                Format::Text => report::info_text(&mem),
                Format::Json => json(&report::info_json(&mem)),
                Format::Dot => return Err(no_dot("info")),
            };
            (c, out)
        }
        Command::Disasm(c) => {
            let mem = load(&c.path)?;
            let lines = report::disasm(&mem);
            let out = match c.format {
                Format::Text => report::disasm_text(&lines),
                Format::Json => json(&report::disasm_json(&lines)),
                Format::Dot => return Err(no_dot("disasm")),
            };
            (c, out)
        }
        Command::Discover(p) => {
            let mem = load(&p.common.path)?;
            let st = discover(&mem, seed_entry_points(&mem, &p.entries), &p.config());
            check_blocks(&st)?;
            warn_failures(&mem, &st);
            let out = match p.common.format {
                Format::Text => report::discover_text(&mem, &st),
                Format::Json => json(&report::discover_json(&mem, &st)),
                Format::Dot => report::discover_dot(&mem, &st),
            };
            (&p.common, out)
        }
        Command::Typeinf(p) => {
            let mem = load(&p.common.path)?;
            let r = recovery_loop(&mem, &p.entries, &p.config());
            check_blocks(&r.state)?;
            warn_failures(&mem, &r.state);
            let out = match p.common.format {
                Format::Text => report::typeinf_text(&mem, &r),
                Format::Json => json(&report::typeinf_json(&mem, &r)),
                Format::Dot => report::discover_dot(&mem, &r.state),
            };
            (&p.common, out)
        }
    };
    Ok((text, common.out.clone()))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BINLIFT_LOG", "warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok((text, out)) => {
            let written = match &out {
                Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
                None => std::io::stdout()
                    .write_all(text.as_bytes())
                    .context("writing standard output"),
            };
            match written {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(2)
                }
            }
        }
        Err(Failure::Load(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Invariant(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(1)
        }
    }
}
