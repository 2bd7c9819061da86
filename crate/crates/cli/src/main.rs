use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use firmirq::asm::assemble;
use firmirq::cfg::build_cfg;
use firmirq::driver::{run_analysis, AnalysisConfig, AnalysisReport, FixedSr, Mode};
use firmirq::fixtures;
use firmirq::image::FirmwareImage;
use firmirq::machine::{run_concrete, MachineError, RunInputs, ScheduledFiring};
use firmirq::mmio::Layout;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "firmirq", version, about = "Symbolic execution of MVM-32 firmware with interrupt inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Assemble a source file into a firmware image.
    Asm {
        source: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// Print the symbol table.
        #[arg(long)]
        symbols: bool,
    },
    /// Run an image concretely from reset.
    Run {
        #[command(flatten)]
        input: Input,
        #[arg(long, default_value_t = 1_000_000)]
        steps: u64,
        /// Interrupt to raise, as `step:line:sr[:dr,dr,...]`. Repeatable.
        #[arg(long = "fire")]
        fire: Vec<String>,
        /// Values returned by data-register reads outside service routines.
        #[arg(long, value_delimiter = ',')]
        dr: Vec<String>,
    },
    /// Explore an image symbolically and write a coverage report.
    Analyze {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        opts: AnalysisOpts,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        trend: Option<PathBuf>,
    },
    /// Print the interrupt model table recovered during an analysis.
    Imt {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        opts: AnalysisOpts,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the control flow graph.
    Cfg {
        #[command(flatten)]
        input: Input,
        #[arg(long)]
        dot: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run several modes with one shared budget and tabulate coverage.
    Compare {
        #[command(flatten)]
        input: Input,
        #[command(flatten)]
        opts: AnalysisOpts,
        #[arg(long, value_delimiter = ',', default_value = "no_int,fixed,aim")]
        modes: Vec<Mode>,
        /// CSV output path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct Input {
    /// Image file (`.s` sources are assembled) or bundled fixture name.
    image: String,
    /// Register layout declarations.
    #[arg(long)]
    layout: Option<PathBuf>,
}

#[derive(Args, Debug, Default)]
struct AnalysisOpts {
    /// `key = value` settings, overridden by flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    isr_window: Option<u64>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    deterministic: bool,
}

struct Loaded {
    image: FirmwareImage,
    layout: Layout,
}

fn load(input: &Input) -> Result<Loaded> {
    let path = Path::new(&input.image);
    let (image, fixture_layout) = if path.exists() {
        let image = if path.extension().is_some_and(|e| e == "s") {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            assemble(&text).with_context(|| format!("cannot assemble {}", path.display()))?.image
        } else {
            FirmwareImage::load(path).with_context(|| format!("cannot load {}", path.display()))?
        };
        (image, None)
    } else if let Ok(f) = fixtures::by_name(&input.image) {
        let image = FirmwareImage::from_bytes(f.binary)?;
        (image, f.layout)
    } else {
        bail!("cannot read {}: no such file or bundled fixture", input.image);
    };
    let layout = match (&input.layout, fixture_layout) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            Layout::parse(&text, &image.map)?
        }
        (None, Some(text)) => Layout::parse(text, &image.map)?,
        (None, None) => Layout::default(),
    };
    Ok(Loaded { image, layout })
}

fn set_key(config: &mut AnalysisConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value.parse().map_err(|_| anyhow!("`{key}` expects a number, got `{value}`"))
    }
    match key {
        "mode" => config.mode = value.parse().map_err(|e| anyhow!("{e}"))?,
        "steps" | "step_budget" => config.step_budget = num(key, value)?,
        "time_budget_secs" => config.time_budget_secs = Some(num(key, value)?),
        "isr_window" => config.isr_window = num(key, value)?,
        "max_seq_len" => config.max_seq_len = num(key, value)?,
        "path_cap" => config.path_cap = num(key, value)?,
        "local_path_cap" => config.local_path_cap = num(key, value)?,
        "solver_budget" => config.solver_budget = num(key, value)?,
        "deterministic" => {
            config.deterministic = value.parse().map_err(|_| anyhow!("`deterministic` expects true or false"))?
        }
        "fixed_sr" => config.fixed_sr = value.parse::<FixedSr>().map_err(|e| anyhow!("{e}"))?,
        _ => bail!("unknown setting `{key}`"),
    }
    Ok(())
}

fn parse_config_text(config: &mut AnalysisConfig, text: &str) -> Result<()> {
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| anyhow!("config line {}: expected `key = value`", i + 1))?;
        set_key(config, key.trim(), value.trim().trim_matches('"')).with_context(|| format!("config line {}", i + 1))?;
    }
    Ok(())
}

impl AnalysisOpts {
    fn resolve(&self) -> Result<AnalysisConfig> {
        let mut config = AnalysisConfig { deterministic: false, ..Default::default() };
        if let Some(p) = &self.config {
            let text = fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            parse_config_text(&mut config, &text)?;
        }
        if let Some(m) = self.mode {
            config.mode = m;
        }
        if let Some(s) = self.steps {
            config.step_budget = s;
        }
        if let Some(w) = self.isr_window {
            config.isr_window = w;
        }
        if let Some(k) = self.max_seq_len {
            config.max_seq_len = k;
        }
        if self.deterministic {
            config.deterministic = true;
        }
        if config.isr_window == 0 || config.max_seq_len == 0 || config.step_budget == 0 {
            bail!("steps, isr-window and max-seq-len must be positive");
        }
        Ok(config)
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn report_json(report: &AnalysisReport) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    text
}

fn parse_u32(text: &str) -> Result<u32> {
    let t = text.trim();
    let parsed = match t.strip_prefix("0x") {
        Some(hex) => u32::from_str_radix(hex, 16),
        None => t.parse(),
    };
    parsed.map_err(|_| anyhow!("bad number `{text}`"))
}

fn parse_firing(text: &str) -> Result<ScheduledFiring> {
    let parts: Vec<&str> = text.splitn(4, ':').collect();
    if parts.len() < 3 {
        bail!("firing `{text}` is not `step:line:sr[:dr,...]`");
    }
    let dr = match parts.get(3) {
        Some(list) if !list.is_empty() => list.split(',').map(parse_u32).collect::<Result<_>>()?,
        _ => Vec::new(),
    };
    Ok(ScheduledFiring { step: parts[0].parse()?, line: parse_u32(parts[1])?, sr: parse_u32(parts[2])?, dr })
}

fn cmd_run(input: &Input, steps: u64, fire: &[String], dr: &[String]) -> Result<u8> {
    let loaded = load(input)?;
    let mut schedule: Vec<ScheduledFiring> = fire.iter().map(|f| parse_firing(f)).collect::<Result<_>>()?;
    schedule.sort_by_key(|f| f.step);
    let inputs = RunInputs {
        dr_values: dr.iter().map(|d| parse_u32(d)).collect::<Result<_>>()?,
        schedule,
        categories: loaded.layout.entries.clone(),
        recorded_reads: None,
    };
    let (state, blocks, outcome, code) = match run_concrete(&loaded.image, &inputs, steps) {
        Ok(r) => (r.state, r.trace.len(), "halted".to_string(), 0),
        Err(f) => {
            let code = match f.error {
                MachineError::StepBudgetExhausted(_) => 0,
                _ => 2,
            };
            (f.state, f.trace.len(), f.error.to_string(), code)
        }
    };
    let out = json!({
        "outcome": outcome,
        "pc": format!("0x{:08x}", state.pc),
        "steps": state.steps,
        "blocks_entered": blocks,
        "regs": state.regs.iter().map(|r| format!("0x{r:08x}")).collect::<Vec<_>>(),
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(code)
}

fn cmd_analyze(input: &Input, opts: &AnalysisOpts, out: Option<&Path>, trend: Option<&Path>) -> Result<u8> {
    let loaded = load(input)?;
    let config = opts.resolve()?;
    let report = run_analysis(&loaded.image, &loaded.layout, &config);
    write_or_print(out, &report_json(&report))?;
    if let Some(t) = trend {
        fs::write(t, report.trend_csv()).with_context(|| format!("cannot write {}", t.display()))?;
    }
    eprintln!(
        "{}: {}/{} blocks covered, {} sequences, {} faults",
        config.mode,
        report.coverage.covered,
        report.coverage.total_blocks,
        report.sequences.count,
        report.faults.len()
    );
    Ok(if report.faults.is_empty() { 0 } else { 2 })
}

fn cmd_imt(input: &Input, opts: &AnalysisOpts, out: Option<&Path>) -> Result<u8> {
    let loaded = load(input)?;
    let config = opts.resolve()?;
    let report = run_analysis(&loaded.image, &loaded.layout, &config);
    let mut text = serde_json::to_string_pretty(&report.imt)?;
    text.push('\n');
    write_or_print(out, &text)?;
    Ok(0)
}

fn cmd_cfg(input: &Input, dot: bool, out: Option<&Path>) -> Result<u8> {
    let loaded = load(input)?;
    let cfg = build_cfg(&loaded.image);
    let text = if dot {
        cfg.to_dot()
    } else {
        let mut s = String::new();
        for b in cfg.blocks.values() {
            let succ: Vec<String> = b.successors.iter().map(|x| format!("0x{x:08x}")).collect();
            let unknown = if b.unknown_successors { " ?" } else { "" };
            s.push_str(&format!("0x{:08x}..0x{:08x} -> [{}]{unknown}\n", b.start, b.end, succ.join(", ")));
        }
        s
    };
    write_or_print(out, &text)?;
    Ok(0)
}

fn cmd_compare(input: &Input, opts: &AnalysisOpts, modes: &[Mode], out: Option<&Path>) -> Result<u8> {
    if modes.len() < 2 {
        bail!("compare needs at least two modes");
    }
    let loaded = load(input)?;
    let base = opts.resolve()?;
    let reports: Vec<AnalysisReport> = std::thread::scope(|s| {
        let handles: Vec<_> = modes
            .iter()
            .map(|m| {
                let config = AnalysisConfig { mode: *m, ..base.clone() };
                let loaded = &loaded;
                s.spawn(move || run_analysis(&loaded.image, &loaded.layout, &config))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("analysis thread")).collect()
    });
    let baseline = modes.iter().position(|m| *m == Mode::NoInt).unwrap_or(0);
    let base_covered = reports[baseline].coverage.covered as i64;
    let mut csv = String::from("mode,covered,total,percent,delta_vs_baseline,faults\n");
    println!("{:<12} {:>8} {:>8} {:>8} {:>8}", "mode", "covered", "total", "percent", "delta");
    for (m, r) in modes.iter().zip(&reports) {
        let delta = r.coverage.covered as i64 - base_covered;
        println!(
            "{:<12} {:>8} {:>8} {:>7.1}% {:>+8}",
            m.to_string(),
            r.coverage.covered,
            r.coverage.total_blocks,
            r.coverage.percent,
            delta
        );
        csv.push_str(&format!(
            "{m},{},{},{:.2},{delta},{}\n",
            r.coverage.covered,
            r.coverage.total_blocks,
            r.coverage.percent,
            r.faults.len()
        ));
    }
    if let Some(p) = out {
        fs::write(p, csv).with_context(|| format!("cannot write {}", p.display()))?;
    }
    Ok(if reports.iter().any(|r| !r.faults.is_empty()) { 2 } else { 0 })
}

fn cmd_asm(source: &Path, out: &Path, symbols: bool) -> Result<u8> {
    let text = fs::read_to_string(source).with_context(|| format!("cannot read {}", source.display()))?;
    let unit = assemble(&text).with_context(|| format!("cannot assemble {}", source.display()))?;
    unit.image.save(out).with_context(|| format!("cannot write {}", out.display()))?;
    if symbols {
        for (name, addr) in &unit.symbols {
            println!("0x{addr:08x} {name}");
        }
    }
    Ok(0)
}

fn dispatch(cli: Cli) -> Result<u8> {
    match &cli.command {
        Command::Asm { source, out, symbols } => cmd_asm(source, out, *symbols),
        Command::Run { input, steps, fire, dr } => cmd_run(input, *steps, fire, dr),
        Command::Analyze { input, opts, out, trend } => cmd_analyze(input, opts, out.as_deref(), trend.as_deref()),
        Command::Imt { input, opts, out } => cmd_imt(input, opts, out.as_deref()),
        Command::Cfg { input, dot, out } => cmd_cfg(input, *dot, out.as_deref()),
        Command::Compare { input, opts, modes, out } => cmd_compare(input, opts, modes, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_and_flags() {
        let mut c = AnalysisConfig::default();
        parse_config_text(&mut c, "# comment\nmode = fixed:20\nsteps = 500\nfixed_sr = 0x4\n").unwrap();
        assert_eq!((c.mode, c.step_budget, c.fixed_sr), (Mode::Fixed(20), 500, FixedSr::Forced(4)));
        assert!(parse_config_text(&mut c, "bogus = 1").is_err());
        assert!(parse_config_text(&mut c, "steps").is_err());
    }

    #[test]
    fn firing_syntax() {
        let f = parse_firing("10:3:0x20:1,2").unwrap();
        assert_eq!((f.step, f.line, f.sr, f.dr), (10, 3, 0x20, vec![1, 2]));
        assert!(parse_firing("10:3").is_err());
    }
}
