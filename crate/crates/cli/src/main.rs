use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use oass::nn::GradBlock;

mod commands;

/// Occlusion-aware seamless segmentation toolkit.
#[derive(Parser, Debug)]
#[command(name = "oass", version, about)]
struct Cli {
    /// Worker threads. The OASS_THREADS environment variable takes precedence.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaxonomyArg {
    Oass18,
    Cityscapes19,
}

impl TaxonomyArg {
    fn build(self) -> oass::labels::Taxonomy {
        match self {
            TaxonomyArg::Oass18 => oass::labels::Taxonomy::oass18(),
            TaxonomyArg::Cityscapes19 => oass::labels::Taxonomy::cityscapes19(),
        }
    }
}

#[derive(Args, Debug)]
struct TaxonomyOpt {
    #[arg(long, value_enum, default_value = "oass18")]
    taxonomy: TaxonomyArg,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Score a prediction directory against ground truth on all five metrics.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Report JSON path.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        taxonomy: TaxonomyOpt,
    },
    /// Fuse branch outputs into panoptic and amodal panoptic outputs.
    Fuse {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = oass::fusion::DEFAULT_SCORE_THRESHOLD)]
        score_threshold: f64,
        #[command(flatten)]
        taxonomy: TaxonomyOpt,
    },
    /// Amodal-oriented mixing of a source image onto a target image.
    Aomix(AoMixArgs),
    /// Pseudo-label a teacher probability tensor and print its confidence weight.
    Pseudolabel {
        #[arg(long)]
        probs: PathBuf,
        #[arg(long, default_value_t = 0.968)]
        tau: f64,
        /// Student probabilities; prints the weighted target loss.
        #[arg(long)]
        student: Option<PathBuf>,
        /// Ignore the crop margin rows when computing the loss.
        #[arg(long)]
        margins: bool,
        /// Pseudo-label PNG path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exponential-moving-average teacher update with a fixed student.
    Ema {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long, default_value_t = 0.999)]
        eta: f64,
        #[arg(long, default_value_t = 1)]
        steps: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        /// gap, pool, ua, dpe or all.
        #[arg(long, default_value = "all")]
        block: BlockArg,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Relative-error bound for success.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Flip one analytic gradient entry; the check is expected to fail.
        #[arg(long)]
        fault: bool,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate seeded synthetic scenes with certified metric values.
    Synth(SynthArgs),
    /// Color-render a semantic or panoptic PNG.
    Render {
        #[arg(long, conflicts_with = "panoptic", required_unless_present = "panoptic")]
        semantic: Option<PathBuf>,
        #[arg(long)]
        panoptic: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        taxonomy: TaxonomyOpt,
    },
}

#[derive(Clone, Copy, Debug)]
struct BlockArg(Option<GradBlock>);

impl std::str::FromStr for BlockArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "all" {
            return Ok(BlockArg(None));
        }
        s.parse()
            .map(|b| BlockArg(Some(b)))
            .map_err(|e: oass::error::Error| e.to_string())
    }
}

#[derive(Args, Debug)]
struct AoMixArgs {
    /// Source RGB image.
    #[arg(long)]
    source: PathBuf,
    /// Source semantic PNG.
    #[arg(long)]
    source_labels: PathBuf,
    /// Source amodal instance JSON.
    #[arg(long)]
    source_amodal: PathBuf,
    /// Target RGB image.
    #[arg(long)]
    target: PathBuf,
    /// Instance JSON whose amodal masks shape the random occluder mask.
    /// Defaults to the source's own masks.
    #[arg(long)]
    occluders: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    scale_min: f64,
    #[arg(long, default_value_t = 0.8)]
    scale_max: f64,
    /// Fill color as `r,g,b`.
    #[arg(long, default_value = "0,0,0")]
    fill: Rgb,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    taxonomy: TaxonomyOpt,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug)]
struct Rgb([u8; 3]);

impl std::str::FromStr for Rgb {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(',').collect();
        if parts.len() != 3 {
            return Err(format!("expected r,g,b, got {s:?}"));
        }
        let mut rgb = [0u8; 3];
        for (v, p) in rgb.iter_mut().zip(parts) {
            *v = p.trim().parse().map_err(|_| format!("bad color component {p:?}"))?;
        }
        Ok(Rgb(rgb))
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory; receives gt/, pred/ and certificates.json.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: u64,
    #[arg(long, default_value_t = 64)]
    height: u32,
    #[arg(long, default_value_t = 64)]
    width: u32,
    #[arg(long, default_value_t = 2)]
    min_objects: u32,
    #[arg(long, default_value_t = 6)]
    max_objects: u32,
    #[arg(long, default_value_t = 0.5)]
    occlusion_prob: f64,
    #[arg(long, default_value_t = 2)]
    perturbation: u32,
    #[arg(long, default_value_t = 0.5)]
    void_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Skip the brute-force certificates.
    #[arg(long)]
    no_certificate: bool,
    /// Also write color renders of every panoptic map.
    #[arg(long)]
    render: bool,
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, String> {
    match std::env::var("OASS_THREADS") {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .map(Some)
            .ok_or_else(|| format!("OASS_THREADS={v:?} is not a positive integer")),
        Err(_) => Ok(flag),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let threads = match thread_count(cli.threads) {
        Ok(t) => t,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
