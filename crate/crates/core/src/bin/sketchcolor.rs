use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sketchcolor::checkpoint::Checkpoint;
use sketchcolor::config::{echo_lines, ConfigFile};
use sketchcolor::datagen::{gen_synthetic_triple, load_dataset, write_dataset, SceneSpec};
use sketchcolor::evaluation::{evaluate, report_to_jsonl, EvalOptions, Metric, ReferencePolicy};
use sketchcolor::inference::{Colorizer, InferenceRequest, Mode, DEFAULT_GUIDANCE, DEFAULT_STEPS};
use sketchcolor::injection::Thresholds;
use sketchcolor::sampler::SamplerKind;
use sketchcolor::training::{run_stage, StageId};
use sketchcolor::{Error, ImageTensor, Result};

const EXIT_OTHER: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_PROVENANCE: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "sketchcolor", version, about = "Reference-based sketch colorization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic (sketch, color, mask) triples and a manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Run one training stage and write the updated checkpoint.
    Train {
        #[arg(long)]
        stage: StageId,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_in: Option<PathBuf>,
        #[arg(long)]
        ckpt_out: PathBuf,
        /// Parameter seed for a fresh checkpoint (ignored with --ckpt-in).
        #[arg(long, default_value_t = 0)]
        init_seed: u64,
    },
    /// Colorize one sketch.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "vanilla")]
        mode: Mode,
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        sketch_mask: Option<PathBuf>,
        #[arg(long)]
        reference_mask: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Colorize a dataset and write a line-delimited metric report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "vanilla")]
        mode: Mode,
        #[arg(long, default_value = "psnr,ms_ssim,embed_cosine")]
        metrics: String,
        /// References are deformed ground truths.
        #[arg(long, overrides_with = "no_tps")]
        tps: bool,
        /// References are other items of the set, randomly paired (default).
        #[arg(long)]
        no_tps: bool,
        /// Maximum control-point displacement in pixels.
        #[arg(long, default_value_t = 4.0)]
        tps_magnitude: f64,
        #[arg(long, default_value_t = 4)]
        tps_grid: usize,
        #[arg(long, default_value_t = 8)]
        batch_size: usize,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        sampling: Sampling,
    },
}

#[derive(Args, Debug, Clone)]
struct Sampling {
    #[arg(long, default_value_t = DEFAULT_STEPS)]
    steps: usize,
    #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
    guidance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "ddim")]
    sampler: SamplerKind,
    /// Sketch-mask threshold for background injection.
    #[arg(long, default_value_t = 0.5)]
    ts_s: f64,
    /// Reference-mask threshold for token partitioning.
    #[arg(long, default_value_t = 0.5)]
    ts_r: f64,
}

impl Sampling {
    fn echo(&self) -> String {
        format!(
            "steps = {}\nguidance = {}\nseed = {}\nsampler = {}\nts_s = {}\nts_r = {}\n",
            self.steps, self.guidance, self.seed, self.sampler, self.ts_s, self.ts_r
        )
    }

    fn thresholds(&self) -> Result<Thresholds> {
        let t = Thresholds { sketch: self.ts_s, reference: self.ts_r };
        t.validate()?;
        Ok(t)
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) | Error::Shape(_) => EXIT_USAGE,
        Error::Provenance(_) => EXIT_PROVENANCE,
        Error::Io { .. } | Error::Image { .. } | Error::Checkpoint(_) => EXIT_IO,
        _ => EXIT_OTHER,
    }
}

fn write(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// `<output>.config.txt`, written beside every artifact.
fn echo_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".config.txt");
    PathBuf::from(s)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

fn gen_data(out: &Path, count: usize, seed: u64, image_size: usize) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let triples = (0..count)
        .map(|i| gen_synthetic_triple(&SceneSpec::random(rng.random(), image_size), format!("{i:06}")))
        .collect::<Result<Vec<_>>>()?;
    write_dataset(out, &triples)?;
    let echo = format!("command = gen-data\ncount = {count}\nseed = {seed}\nimage_size = {image_size}\n");
    write(&out.join("gen-data.config.txt"), echo.as_bytes())?;
    println!("wrote {count} triples to {}", display(out));
    Ok(())
}

fn train(
    stage: StageId,
    config: Option<&Path>,
    data: &Path,
    ckpt_in: Option<&Path>,
    ckpt_out: &Path,
    init_seed: u64,
) -> Result<()> {
    let file = match config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let cfg = file.stage_config(stage)?;
    let mut ck = match ckpt_in {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if file.has_model_keys() && file.model_config()? != ck.config {
                return Err(Error::Config("model.* keys disagree with the input checkpoint's config".into()));
            }
            ck
        }
        None => {
            if stage != StageId::S0 {
                return Err(Error::Provenance(format!(
                    "stage {stage} needs --ckpt-in with stage {} completed",
                    stage.prerequisite().expect("only stage 0 lacks one")
                )));
            }
            Checkpoint::init(&file.model_config()?, init_seed)?
        }
    };
    let dataset = load_dataset(data)?;
    println!("stage {stage}: {} steps on {} triples", cfg.steps, dataset.len());
    run_stage(&cfg, &dataset, &mut ck, |step, loss| println!("step {step} loss {loss:.6}"))?;
    ck.save(ckpt_out)?;
    let mut echo = format!("command = train\ndata = {}\n", display(data));
    if let Some(p) = ckpt_in {
        echo.push_str(&format!("ckpt_in = {}\n", display(p)));
    } else {
        echo.push_str(&format!("init_seed = {init_seed}\n"));
    }
    echo.push_str(&echo_lines("", &cfg)?);
    echo.push_str(&echo_lines("model", &ck.config)?);
    echo.push_str(&format!("stages_completed = {}\n", ck.stages_string()));
    write(&echo_path(ckpt_out), echo.as_bytes())?;
    println!("wrote {} (stages {})", display(ckpt_out), ck.stages_string());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sample(
    ckpt: &Path,
    mode: Mode,
    sketch: &Path,
    reference: &Path,
    sketch_mask: Option<&Path>,
    reference_mask: Option<&Path>,
    out: &Path,
    s: &Sampling,
) -> Result<()> {
    if mode.uses_background() && (sketch_mask.is_none() || reference_mask.is_none()) {
        return Err(Error::InvalidArgument(format!("{mode} mode needs --sketch-mask and --reference-mask")));
    }
    let colorizer = Colorizer::new(Checkpoint::load(ckpt)?)?;
    colorizer.check_mode(mode)?;
    let mut req = InferenceRequest::new(ImageTensor::load_png(sketch, 1)?, ImageTensor::load_png(reference, 3)?, mode);
    if let (Some(a), Some(b)) = (sketch_mask, reference_mask) {
        req = req.with_masks(ImageTensor::load_png(a, 1)?, ImageTensor::load_png(b, 1)?);
    }
    req = InferenceRequest {
        thresholds: s.thresholds()?,
        guidance: s.guidance,
        steps: s.steps,
        seed: s.seed,
        sampler: s.sampler,
        ..req
    };
    let img = colorizer.colorize(&req)?;
    img.save_png(out)?;
    let mut echo = format!(
        "command = sample\nckpt = {}\nmode = {mode}\nsketch = {}\nreference = {}\n",
        display(ckpt),
        display(sketch),
        display(reference)
    );
    if let (Some(a), Some(b)) = (sketch_mask, reference_mask) {
        echo.push_str(&format!("sketch_mask = {}\nreference_mask = {}\n", display(a), display(b)));
    }
    echo.push_str(&s.echo());
    write(&echo_path(out), echo.as_bytes())?;
    println!("wrote {}", display(out));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    ckpt: &Path,
    data: &Path,
    mode: Mode,
    metrics: &str,
    tps: bool,
    tps_magnitude: f64,
    tps_grid: usize,
    batch_size: usize,
    out: &Path,
    s: &Sampling,
) -> Result<()> {
    let metrics = Metric::parse_list(metrics)?;
    if tps && (tps_grid < 2 || !(tps_magnitude >= 0.0)) {
        return Err(Error::InvalidArgument("--tps-grid must be >= 2 and --tps-magnitude >= 0".into()));
    }
    let colorizer = Colorizer::new(Checkpoint::load(ckpt)?)?;
    colorizer.check_mode(mode)?;
    let dataset = load_dataset(data)?;
    let references = if tps { ReferencePolicy::Tps { grid: tps_grid, magnitude: tps_magnitude } } else { ReferencePolicy::Shuffled };
    let opts = EvalOptions {
        mode,
        metrics: metrics.clone(),
        references,
        steps: s.steps,
        guidance: s.guidance,
        sampler: s.sampler,
        thresholds: s.thresholds()?,
        seed: s.seed,
        batch_size,
    };
    let lines = evaluate(&dataset, &colorizer.model, &opts)?;
    write(out, report_to_jsonl(&lines)?.as_bytes())?;
    let mut echo = format!(
        "command = eval\nckpt = {}\ndata = {}\nmode = {mode}\nmetrics = {}\nbatch_size = {batch_size}\n",
        display(ckpt),
        display(data),
        metrics.iter().map(|m| m.name()).collect::<Vec<_>>().join(", "),
    );
    match references {
        ReferencePolicy::Tps { grid, magnitude } => {
            echo.push_str(&format!("references = tps\ntps_grid = {grid}\ntps_magnitude = {magnitude}\n"))
        }
        ReferencePolicy::Shuffled => echo.push_str("references = shuffled\n"),
    }
    echo.push_str(&s.echo());
    write(&echo_path(out), echo.as_bytes())?;
    for l in lines.iter().filter(|l| l.count.is_some()) {
        match l.value {
            Some(v) => println!("{}: {v:.6} over {}", l.metric, l.count.unwrap_or(0)),
            None => println!("{}: undefined", l.metric),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { out, count, seed, image_size } => gen_data(&out, count, seed, image_size),
        Command::Train { stage, config, data, ckpt_in, ckpt_out, init_seed } => {
            train(stage, config.as_deref(), &data, ckpt_in.as_deref(), &ckpt_out, init_seed)
        }
        Command::Sample { ckpt, mode, sketch, reference, sketch_mask, reference_mask, out, sampling } => sample(
            &ckpt,
            mode,
            &sketch,
            &reference,
            sketch_mask.as_deref(),
            reference_mask.as_deref(),
            &out,
            &sampling,
        ),
        Command::Eval { ckpt, data, mode, metrics, tps, no_tps, tps_magnitude, tps_grid, batch_size, out, sampling } => eval(
            &ckpt,
            &data,
            mode,
            &metrics,
            tps && !no_tps,
            tps_magnitude,
            tps_grid,
            batch_size,
            &out,
            &sampling,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
