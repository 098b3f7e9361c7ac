use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use resq_core::container::{describe, load_model, load_model_full, save_model};
use resq_core::ensemble::{Grouping, DEFAULT_THRESHOLD_RATIO};
use resq_core::network::Layer;
use resq_core::pipeline::{canonical_json, run_pipeline, write_outputs, write_report, GroupingChoice, PipelineOutput, RunConfig};
use resq_core::{synth, Error, Network};

#[derive(Parser)]
#[command(name = "resq", version, about = "Residual-expansion quantization with certified error bounds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full pipeline, print or write the report, optionally emit containers.
    Quantize {
        #[command(flatten)]
        run: RunArgs,
        /// Directory for the expanded (and ensemble member) containers.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Report path; printed to stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Record the quantization pass wall time in the report.
        #[arg(long)]
        timing: bool,
    },
    /// Print the certified error bounds.
    Bound {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print the bit-operation costs.
    Bops {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Measure the logit error on calibration inputs (requires --calib).
    Eval {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Describe a model container.
    Inspect {
        model: PathBuf,
    },
    /// Write a seeded random ReLU MLP container, for trying the tool out.
    Synth {
        out: PathBuf,
        /// Layer widths, input first.
        #[arg(long, value_delimiter = ',', default_value = "16,32,10")]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Insert a batch-norm after every hidden dense layer.
        #[arg(long)]
        batch_norm: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Model container directory.
    model: PathBuf,
    #[arg(long, default_value_t = 8)]
    bits: u32,
    #[arg(long, default_value_t = 1)]
    order: usize,
    /// Fraction of rows kept in masked orders.
    #[arg(long, default_value_t = 1.0)]
    sparsity: f64,
    /// First masked order.
    #[arg(long = "mask-from", default_value_t = 2)]
    mask_from: usize,
    /// Cluster sizes such as `2,2`, or `auto`.
    #[arg(long)]
    grouping: Option<String>,
    #[arg(long = "threshold-ratio", default_value_t = DEFAULT_THRESHOLD_RATIO)]
    threshold_ratio: f64,
    /// Fake-quantize activations to this many bits (needs --calib).
    #[arg(long = "activation-bits")]
    activation_bits: Option<u32>,
    /// JSON list of flat input vectors.
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, Error> {
        let grouping = match self.grouping.as_deref() {
            None => None,
            Some("auto") => Some(GroupingChoice::Auto {
                candidates: Vec::new(),
                threshold_ratio: self.threshold_ratio,
            }),
            Some(s) => Some(GroupingChoice::Explicit {
                sizes: s.parse::<Grouping>()?.sizes().to_vec(),
            }),
        };
        Ok(RunConfig {
            bits: self.bits,
            order: self.order,
            sparsity: self.sparsity,
            mask_from_order: self.mask_from,
            grouping,
            activation_bits: self.activation_bits,
            seed: self.seed,
            calibration_inputs: self.calib.clone(),
        })
    }

    fn run(&self, timing: bool) -> Result<PipelineOutput, Error> {
        let net = load_model(&self.model)?;
        run_pipeline(&net, &self.config()?, None, timing)
    }
}

fn emit(json: String) -> Result<(), Error> {
    print!("{json}");
    Ok(())
}

fn synth_model(out: &Path, dims: &[usize], seed: u64, batch_norm: bool) -> Result<(), Error> {
    if dims.len() < 2 {
        return Err(Error::InvalidInput("--dims needs at least an input and an output width".into()));
    }
    let mut rng = synth::rng(seed);
    let mlp = synth::mlp(&mut rng, dims, Default::default())?;
    let mut layers = Vec::new();
    let last = mlp.layers().len() - 1;
    for (i, layer) in mlp.layers().iter().enumerate() {
        layers.push(layer.clone());
        if let (true, Layer::Dense(d)) = (batch_norm && i != last, layer) {
            layers.push(Layer::BatchNorm(synth::batch_norm(&mut rng, d.out_features())?));
        }
    }
    save_model(&Network::new(vec![dims[0]], layers)?.round_to_f32(), out)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Quantize {
            run,
            out,
            report,
            timing,
        } => {
            let result = run.run(timing)?;
            if let Some(dir) = out {
                write_outputs(&result, dir)?;
            }
            match report {
                Some(path) => write_report(&result.report, path),
                None => emit(canonical_json(&result.report)?),
            }
        }
        Command::Bound { run } => emit(canonical_json(&run.run(false)?.report.bounds)?),
        Command::Bops { run } => emit(canonical_json(&run.run(false)?.report.cost)?),
        Command::Eval { run } => {
            if run.calib.is_none() {
                return Err(Error::InvalidInput("eval needs --calib".into()));
            }
            emit(canonical_json(&run.run(false)?.report.empirical)?)
        }
        Command::Inspect { model } => emit(canonical_json(&describe(&load_model_full(model)?))?),
        Command::Synth {
            out,
            dims,
            seed,
            batch_norm,
        } => synth_model(&out, &dims, seed, batch_norm),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_internal() { 3 } else { 2 })
        }
    }
}
