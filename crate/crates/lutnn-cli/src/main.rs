//! Command-line driver for the training-to-netlist flow.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lutnn::netlist::{area_report, emit_verilog, VerilogStyle};
use lutnn::pipeline::{
    export, load_datasets, netlist_accuracy, run_phase1, run_phase2, run_phase3, Metrics,
    ModelArchive, NetlistArchive, PipelineConfig,
};

#[derive(Parser)]
#[command(name = "lutnn", about = "Train, prune, expand, and harden LUT-based networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Pipeline configuration file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override per-phase epochs, e.g. 20,5,20.
    #[arg(long, value_delimiter = ',')]
    phase_epochs: Option<Vec<usize>>,
    /// Override the pruning target density in (0, 1].
    #[arg(long)]
    density: Option<f64>,
    /// Override the node input count k.
    #[arg(long, value_name = "K")]
    klut: Option<usize>,
    /// Override the parameter input count p.
    #[arg(long, value_name = "P")]
    pinputs: Option<usize>,
    /// Override tiling factors, e.g. 8x8.
    #[arg(long, value_name = "TIxTO")]
    tile: Option<String>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = &self.phase_epochs {
            if e.len() != 3 {
                bail!("--phase-epochs expects three values, e.g. 20,5,20");
            }
            cfg.train.epochs = [e[0], e[1], e[2]];
        }
        if let Some(d) = self.density {
            cfg.prune.density = Some(d);
            cfg.prune.threshold = None;
        }
        if let Some(k) = self.klut {
            cfg.expand.k = k;
        }
        if let Some(p) = self.pinputs {
            cfg.expand.p = p;
        }
        if let Some(t) = &self.tile {
            let (ti, to) = t
                .split_once('x')
                .with_context(|| format!("tile must look like 8x8, got {t}"))?;
            cfg.expand.t_i = ti.parse().context("t_i")?;
            cfg.expand.t_o = to.parse().context("t_o")?;
        }
        if let Some(o) = &self.out {
            cfg.output_dir = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Phase 1: high-precision training.
    Train(ConfigArgs),
    /// Phase 2: prune to the target density and retrain binarized.
    Prune {
        #[command(flatten)]
        config: ConfigArgs,
        /// Phase-1 archive; defaults to <out>/phase1.json.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Phase 3: expand target layers into LUT nodes and retrain.
    Expand {
        #[command(flatten)]
        config: ConfigArgs,
        /// Phase-2 archive; defaults to <out>/phase2.json.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Harden and write netlist, Verilog, area report, and metrics.
    Export {
        #[command(flatten)]
        config: ConfigArgs,
        /// Trained archive; defaults to <out>/phase3.json.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Run the hardened netlist over the configured test set.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Netlist archive; defaults to <out>/netlist.json.
        #[arg(long)]
        netlist: Option<PathBuf>,
        /// Evaluate at most this many samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Print the area report of a hardened netlist.
    Report {
        /// Netlist archive.
        #[arg(long)]
        netlist: PathBuf,
        /// Also print machine-readable JSON.
        #[arg(long)]
        json: bool,
    },
    /// Emit Verilog from a hardened netlist without re-running export.
    Emit {
        #[arg(long)]
        netlist: PathBuf,
        #[arg(long, default_value = "generic")]
        style: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn metrics_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.output_dir.join("metrics.csv")
}

fn load_metrics(cfg: &PipelineConfig) -> Metrics {
    std::fs::read_to_string(metrics_path(cfg))
        .ok()
        .and_then(|t| Metrics::parse(&t).ok())
        .unwrap_or_default()
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let (train, test) = load_datasets(&cfg)?;
            let mut metrics = Metrics::default();
            let archive = run_phase1(&cfg, &train, &test, &mut metrics, false)?;
            std::fs::create_dir_all(&cfg.output_dir)?;
            let path = cfg.output_dir.join("phase1.json");
            archive.save(&path)?;
            metrics.save(&metrics_path(&cfg))?;
            println!("wrote {}", path.display());
        }
        Command::Prune { config, input } => {
            let cfg = config.load()?;
            let input = input.unwrap_or_else(|| cfg.output_dir.join("phase1.json"));
            let mut archive = ModelArchive::load(&input)?;
            archive.config = cfg.clone();
            let (train, test) = load_datasets(&cfg)?;
            let mut metrics = load_metrics(&cfg);
            let out = run_phase2(&archive, &train, &test, &mut metrics, false)?;
            let path = cfg.output_dir.join("phase2.json");
            out.save(&path)?;
            metrics.save(&metrics_path(&cfg))?;
            println!("wrote {}", path.display());
        }
        Command::Expand { config, input } => {
            let cfg = config.load()?;
            let input = input.unwrap_or_else(|| cfg.output_dir.join("phase2.json"));
            let mut archive = ModelArchive::load(&input)?;
            archive.config = cfg.clone();
            let (train, test) = load_datasets(&cfg)?;
            let mut metrics = load_metrics(&cfg);
            let out = run_phase3(&archive, &train, &test, &mut metrics, false)?;
            let path = cfg.output_dir.join("phase3.json");
            out.save(&path)?;
            metrics.save(&metrics_path(&cfg))?;
            println!("wrote {}", path.display());
        }
        Command::Export { config, input } => {
            let cfg = config.load()?;
            let input = input.unwrap_or_else(|| cfg.output_dir.join("phase3.json"));
            let archive = ModelArchive::load(&input)?;
            let metrics = load_metrics(&cfg);
            let artifacts = export(&archive, &metrics, &cfg.output_dir)?;
            println!("wrote {}", artifacts.netlist.display());
            println!("wrote {}", artifacts.verilog_generic.display());
            println!("wrote {}", artifacts.verilog_primitive.display());
            println!("wrote {}", artifacts.area_json.display());
            println!("wrote {}", artifacts.area_table.display());
            println!("wrote {}", artifacts.metrics_csv.display());
        }
        Command::Simulate {
            config,
            netlist,
            limit,
        } => {
            let cfg = config.load()?;
            let netlist = netlist.unwrap_or_else(|| cfg.output_dir.join("netlist.json"));
            let archive = NetlistArchive::load(&netlist)?;
            let (_, test) = load_datasets(&cfg)?;
            let (acc, n) = netlist_accuracy(&archive.netlist, &test, limit)?;
            println!(
                "hardened netlist accuracy: {:.2}% over {n} samples",
                acc * 100.0
            );
        }
        Command::Report { netlist, json } => {
            let archive = NetlistArchive::load(&netlist)?;
            let report = area_report(&archive.netlist);
            println!(
                "{:<16} {:>12} {:>12} {:>12} {:>12} {:>12}",
                "layer", "logical", "packed", "popcount", "mask bits", "rom bits"
            );
            for l in &report.layers {
                println!(
                    "{:<16} {:>12} {:>12} {:>12} {:>12} {:>12}",
                    l.name, l.logical_luts, l.packed_luts, l.popcount_luts, l.mask_bits, l.rom_bits
                );
            }
            println!(
                "{:<16} {:>12} {:>12} {:>12} {:>12} {:>12}",
                "total",
                report.total_logical_luts,
                report.total_physical_luts,
                report.total_popcount_luts,
                report.total_mask_bits,
                report.total_rom_bits
            );
            for n in &report.notes {
                println!("note: {n}");
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            }
        }
        Command::Emit {
            netlist,
            style,
            out,
        } => {
            let archive = NetlistArchive::load(&netlist)?;
            let style = match style.as_str() {
                "generic" => VerilogStyle::Generic,
                "primitive" => VerilogStyle::Primitive,
                other => bail!("unknown style {other}; use generic or primitive"),
            };
            let text = emit_verilog(&archive.netlist, style)?;
            std::fs::write(&out, text)?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}
