mod checkpoint;
mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vidpad::ablation::{
    ablation_clip_length, ablation_csv, ablation_scales, evaluate_split, train_model, Experiment,
    SCALE_SUBSETS,
};
use vidpad::cost::count_cost;
use vidpad::data::{generate_dataset, ClipStore, Split};
use vidpad::metrics::report_csv;
use vidpad::model::infer;
use vidpad::msmhsa::{attention_rollout, to_pgm, upsample_nearest};
use vidpad::tensor::io;
use vidpad::train::{sample_frames, SampleMode};

use crate::config::{parse_scales, RunConfig};

#[derive(Parser)]
#[command(name = "vidpad", version, about = "Video face anti-spoofing transformer on synthetic clips")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// key=value config file; built-in defaults when omitted
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set lr=0.001` (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// Print the effective config and exit
    #[arg(long)]
    dump_config: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for kv in &self.overrides {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k.trim(), v.trim()).context("--set")?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(steps) = self.steps {
            cfg.train.steps = steps;
        }
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Axis {
    Scales,
    ClipLength,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Dev => Split::Dev,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes <out_dir>/checkpoint and <out_dir>/train_log.csv
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Suppress per-step progress on stderr
        #[arg(long)]
        quiet: bool,
    },
    /// Select a threshold on one split and report metrics on another
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset store; regenerated from the checkpoint config when omitted
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, value_enum, default_value = "dev")]
        threshold_split: SplitArg,
        /// Report CSV path; stdout only when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-frame attention rollout maps for one clip, one layer and one head
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Clip id from the dataset manifest
        #[arg(long)]
        clip: String,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytic per-clip FLOP and parameter counts
    CountCost {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate one run per grid cell
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated cells: frame counts, or `+`-joined scale subsets (default: all seven)
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic dataset store
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the invariant checks
    Selftest,
}

fn dataset(cfg: &RunConfig, data: Option<&Path>) -> Result<ClipStore> {
    let dir = data.map(Path::to_path_buf).or_else(|| {
        (!cfg.data_dir.is_empty()).then(|| PathBuf::from(&cfg.data_dir))
    });
    match dir {
        Some(d) => ClipStore::load(&d).with_context(|| format!("loading dataset {}", d.display())),
        None => Ok(generate_dataset(&cfg.synth_spec())?),
    }
}

fn experiment(cfg: &RunConfig) -> Experiment {
    Experiment {
        model: cfg.model_config(),
        train: cfg.train.clone(),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    print!("{text}");
    if let Some(p) = out {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_train(args: &ConfigArgs, quiet: bool) -> Result<()> {
    let cfg = args.resolve()?;
    let out = cfg.require_out_dir()?.to_path_buf();
    let exp = experiment(&cfg);
    exp.model.validate()?;
    let store = dataset(&cfg, None)?;
    let train = store.split_vec(Split::Train);
    let every = (cfg.train.steps / 20).max(1);
    let (params, log) = train_model(&exp, &train, |r| {
        if !quiet && (r.step % every == 0 || r.step + 1 == cfg.train.steps) {
            eprintln!("step {} loss {:.5} lr {:e}", r.step, r.loss, r.lr);
        }
    })?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    checkpoint::save(&out.join("checkpoint"), &cfg, &params)?;
    fs::write(out.join("train_log.csv"), log.to_csv())?;
    println!("wrote {}", out.join("checkpoint").display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, data: Option<&Path>, split: Split, threshold_split: Split, out: Option<&Path>) -> Result<()> {
    let (cfg, params) = checkpoint::load(ckpt)?;
    let store = dataset(&cfg, data)?;
    for s in [split, threshold_split] {
        if store.split(s).next().is_none() {
            bail!("dataset has no {} clips", s.as_str());
        }
    }
    let e = evaluate_split(&params, &cfg.model_config(), &store, threshold_split, split)?;
    write_or_print(out, &report_csv([(split.as_str(), &e.report)]))
}

fn cmd_export(ckpt: &Path, data: Option<&Path>, clip_id: &str, layer: usize, head: usize, out: &Path) -> Result<()> {
    let (cfg, params) = checkpoint::load(ckpt)?;
    let model = cfg.model_config();
    if layer >= model.depth {
        bail!("layer {layer} out of range (depth {})", model.depth);
    }
    if head >= model.scales.len() {
        bail!("head {head} out of range ({} heads)", model.scales.len());
    }
    let store = dataset(&cfg, data)?;
    let src = store
        .clips
        .iter()
        .map(|c| &c.clip)
        .find(|c| c.clip_id == clip_id)
        .ok_or_else(|| anyhow!("no clip {clip_id:?} in dataset"))?;
    let mut unused = vidpad::rng::stream(model.seed, "eval");
    let clip = sample_frames(src, model.frames, SampleMode::Uniform, &mut unused)?;
    let (_, attention) = infer(&clip, &params, &model, true)?;
    let weights = &attention[layer][head];
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for f in 0..model.frames {
        let map = attention_rollout(weights, f, model.token_height(), model.token_width())?;
        let stem = format!("attn_L{layer}_H{head}_F{f}");
        io::save(&map, out.join(format!("{stem}.vpt")))?;
        let big = upsample_nearest(&map, model.height, model.width)?;
        fs::write(out.join(format!("{stem}.pgm")), to_pgm(&big)?)?;
    }
    println!("wrote {} maps to {}", model.frames, out.display());
    Ok(())
}

fn cmd_ablate(args: &ConfigArgs, axis: Axis, grid: Option<&str>, out: Option<&Path>) -> Result<()> {
    let cfg = args.resolve()?;
    let exp = experiment(&cfg);
    let store = dataset(&cfg, None)?;
    let rows = match axis {
        Axis::Scales => {
            let subsets: Vec<Vec<usize>> = match grid {
                Some(g) => g.split(',').map(|s| parse_scales(s, '+')).collect::<Result<_>>()?,
                None => SCALE_SUBSETS.iter().map(|s| s.to_vec()).collect(),
            };
            for s in &subsets {
                let mut m = exp.model.clone();
                m.scales = s.clone();
                m.validate()?;
            }
            ablation_scales(&exp, &store, &subsets)?
        }
        Axis::ClipLength => {
            let g = grid.unwrap_or("1,2,4,8,16");
            let ts: Vec<usize> = g
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| anyhow!("invalid frame count {s:?}")))
                .collect::<Result<_>>()?;
            ablation_clip_length(&exp, &store, &ts)?
        }
    };
    write_or_print(out, &ablation_csv(&rows))
}

fn run(cli: Cli) -> Result<()> {
    let dump = |c: &ConfigArgs| -> Result<bool> {
        if c.dump_config {
            print!("{}", c.resolve()?.dump());
        }
        Ok(c.dump_config)
    };
    match &cli.cmd {
        Command::Train { cfg, quiet } => {
            if !dump(cfg)? {
                cmd_train(cfg, *quiet)?;
            }
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            threshold_split,
            out,
        } => cmd_eval(checkpoint, data.as_deref(), (*split).into(), (*threshold_split).into(), out.as_deref())?,
        Command::ExportAttention {
            checkpoint,
            data,
            clip,
            layer,
            head,
            out,
        } => cmd_export(checkpoint, data.as_deref(), clip, *layer, *head, out)?,
        Command::CountCost { cfg, out } => {
            if !dump(cfg)? {
                let report = count_cost(&cfg.resolve()?.model_config())?;
                write_or_print(out.as_deref(), &report.to_csv())?;
            }
        }
        Command::Ablate { cfg, axis, grid, out } => {
            if !dump(cfg)? {
                cmd_ablate(cfg, *axis, grid.as_deref(), out.as_deref())?;
            }
        }
        Command::GenData { cfg, out } => {
            if !dump(cfg)? {
                let store = generate_dataset(&cfg.resolve()?.synth_spec())?;
                store.save(out)?;
                println!("wrote {} clips to {}", store.clips.len(), out.display());
            }
        }
        Command::Selftest => {
            let results = vidpad::selftest::run_all();
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                bail!("{failed} self-test check(s) failed");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
