//! `qdepth`: dataset generation, codec pretraining, co-training, evaluation
//! and inspection tools.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use qdepth::codec::{perplexity, pretrain_codec, Codec, DepthMap, TokenGrid};
use qdepth::config::RunConfig;
use qdepth::cotrain::{evaluate_policy, loss_gradcheck, train_loop, VariantSpec};
use qdepth::experts::Model;
use qdepth::io::{encode_pgm, read_pgm, write_bytes};
use qdepth::mask::{build_mask, MaskVariant, TokenLayout};
use qdepth::numerics::op_suite;
use qdepth::par::{self, Exec};
use qdepth::synthworld::{gen_dataset, load_dataset, write_dataset};

#[derive(Parser)]
#[command(
    name = "qdepth",
    version,
    about = "Depth-token co-training on a synthetic tabletop task"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output location.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long)]
    force: bool,
}

#[derive(Args, Clone, Default)]
struct VariantFlags {
    #[arg(long)]
    no_depth_loss: bool,
    /// Drops the depth branch entirely (implies --no-depth-loss).
    #[arg(long)]
    no_depth_expert: bool,
    /// Regress depth pixels instead of predicting codebook tokens.
    #[arg(long)]
    pixel_depth: bool,
    /// Let proprio tokens attend to depth tokens.
    #[arg(long)]
    dreamvla_mask: bool,
}

impl VariantFlags {
    fn apply(&self, v: &mut VariantSpec) {
        if self.no_depth_loss || self.no_depth_expert {
            v.depth_loss_on = false;
        }
        if self.no_depth_expert {
            v.depth_expert_on = false;
        }
        if self.pixel_depth {
            v.latent_prediction = false;
        }
        if self.dreamvla_mask {
            v.hybrid_mask = false;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate scripted demonstrations into a dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the depth codec on dataset frames and save its checkpoint.
    PretrainCodec {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Co-train the policy with depth supervision; writes a checkpoint and a JSONL report.
    Cotrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        codec: Option<PathBuf>,
        #[command(flatten)]
        variant: VariantFlags,
    },
    /// Closed-loop success rate of a trained policy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Tokenize a 16-bit depth PGM into a QDTK file.
    EncodeDepth {
        input: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Decode a QDTK file into an 8-bit PGM.
    DecodeDepth {
        input: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Print the attention mask for a token layout.
    MaskDump {
        /// Token counts: text,image,depth,proprio,action.
        #[arg(long, default_value = "6,16,16,1,4")]
        layout: String,
        #[arg(long)]
        dreamvla_mask: bool,
    },
    /// Finite-difference check of every tape op and the combined loss.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Entries checked per parameter tensor of the combined loss.
        #[arg(long, default_value_t = 8)]
        entries: usize,
    },
}

enum Failure {
    Usage(String),
    Validation(qdepth::Error),
    Runtime(qdepth::Error),
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) | Failure::Validation(_) => 1,
            Failure::Runtime(_) | Failure::Check(_) => 2,
        }
    }
}

impl From<qdepth::Error> for Failure {
    fn from(e: qdepth::Error) -> Self {
        use qdepth::Error as E;
        match e {
            E::Config(_)
            | E::Param(_)
            | E::Shape { .. }
            | E::Index { .. }
            | E::Format { .. }
            | E::Json(_) => Failure::Validation(e),
            _ => Failure::Runtime(e),
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Check(m) => f.write_str(m),
            Failure::Validation(e) | Failure::Runtime(e) => write!(f, "{e}"),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = match thread_cap() {
        Ok(t) => t,
        Err(f) => return report(f),
    };
    let exec = if threads > 1 {
        Exec::Parallel
    } else {
        Exec::Sequential
    };
    match par::with_thread_cap(threads, || run(cli.command, exec)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    eprintln!("error: {f}");
    ExitCode::from(f.code())
}

fn thread_cap() -> std::result::Result<usize, Failure> {
    match std::env::var("QDVW_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Failure::Usage(format!(
                "QDVW_THREADS must be a positive integer, got {v:?}"
            ))),
        },
    }
}

fn load_config(common: &Common) -> std::result::Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn check_writable(path: &Path, force: bool) -> Outcome {
    if path.exists() && !force {
        return Err(Failure::Usage(format!(
            "{} already exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn run(command: Command, exec: Exec) -> Outcome {
    match command {
        Command::GenData { common } => gen_data(&common, exec),
        Command::PretrainCodec { common, data } => pretrain(&common, data, exec),
        Command::Cotrain {
            common,
            data,
            codec,
            variant,
        } => cotrain(&common, data, codec, &variant, exec),
        Command::Eval {
            common,
            model,
            episodes,
        } => eval(&common, model, episodes, exec),
        Command::EncodeDepth {
            input,
            codec,
            common,
        } => encode_depth(&input, &codec, &common),
        Command::DecodeDepth {
            input,
            codec,
            common,
        } => decode_depth(&input, &codec, &common),
        Command::MaskDump {
            layout,
            dreamvla_mask,
        } => mask_dump(&layout, dreamvla_mask),
        Command::GradCheck { seed, entries } => grad_check(seed, entries),
    }
}

fn gen_data(common: &Common, exec: Exec) -> Outcome {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let dir = common.out.clone().unwrap_or_else(|| cfg.paths.data.clone());
    if dir.exists() {
        check_writable(&dir, common.force)?;
        if !dir.join("manifest.json").exists()
            && dir.read_dir().map_or(true, |mut d| d.next().is_some())
        {
            return Err(Failure::Usage(format!(
                "{} is not a dataset directory; refusing to replace it",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(&dir).map_err(|e| {
            Failure::Runtime(qdepth::Error::Io {
                path: dir.clone(),
                source: e,
            })
        })?;
    }
    let data = gen_dataset(cfg.episodes, cfg.seed, &cfg.world, exec)?;
    write_dataset(&dir, &data)?;
    println!(
        "wrote {} episodes ({} steps) to {}",
        data.episodes.len(),
        data.num_steps(),
        dir.display()
    );
    Ok(())
}

fn pretrain(common: &Common, data: Option<PathBuf>, exec: Exec) -> Outcome {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| cfg.paths.codec.clone());
    check_writable(&out, common.force)?;
    let dataset = load_dataset(&data.unwrap_or_else(|| cfg.paths.data.clone()))?;
    let frames: Vec<DepthMap> = dataset
        .episodes
        .iter()
        .flat_map(|e| e.steps.iter().map(|s| s.depth.clone()))
        .take(cfg.codec_frames)
        .collect();
    let opts = qdepth::codec::PretrainOptions {
        seed: cfg.seed,
        ..cfg.pretrain
    };
    let (codec, log) = pretrain_codec(&frames, &cfg.codec, &opts, exec)?;
    codec.save(&out)?;
    let mut lines = String::new();
    for m in &log {
        lines.push_str(&serde_json::to_string(m).map_err(qdepth::Error::from)?);
        lines.push('\n');
    }
    write_bytes(&out.with_extension("metrics.jsonl"), lines.as_bytes())?;
    let tokens: Vec<usize> = frames
        .iter()
        .map(|f| codec.tokenize(f).map(|t| t.indices))
        .collect::<qdepth::Result<Vec<_>>>()?
        .concat();
    println!(
        "codec saved to {} ({} frames, perplexity {:.2})",
        out.display(),
        frames.len(),
        perplexity(tokens, cfg.codec.codebook_size)
    );
    Ok(())
}

fn cotrain(
    common: &Common,
    data: Option<PathBuf>,
    codec: Option<PathBuf>,
    flags: &VariantFlags,
    exec: Exec,
) -> Outcome {
    let mut cfg = load_config(common)?;
    flags.apply(&mut cfg.cotrain.variant);
    cfg.validate()?;
    let (model_path, report_path) = match &common.out {
        Some(dir) => (dir.join("model.qdvw"), dir.join("report.jsonl")),
        None => (cfg.paths.model.clone(), cfg.paths.report.clone()),
    };
    check_writable(&model_path, common.force)?;
    check_writable(&report_path, common.force)?;
    let dataset = load_dataset(&data.unwrap_or_else(|| cfg.paths.data.clone()))?;
    let codec = Codec::load(&codec.unwrap_or_else(|| cfg.paths.codec.clone()))?;
    eprintln!("config hash {:016x}", cfg.hash()?);
    let out = train_loop(&dataset, &codec, &cfg.cotrain, cfg.seed, exec)?;
    for p in [&model_path, &report_path] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| qdepth::Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
    }
    out.model.save(&model_path)?;
    write_bytes(&report_path, out.report.to_jsonl()?.as_bytes())?;
    let last = out.report.records.last().expect("at least one step");
    println!(
        "trained {} steps: total {:.4} action {:.4}; checkpoint {}",
        out.report.records.len(),
        last.total,
        last.action,
        model_path.display()
    );
    if let Some(m) = &out.report.final_metrics {
        println!("{}", serde_json::to_string(m).map_err(qdepth::Error::from)?);
    }
    Ok(())
}

fn eval(common: &Common, model: Option<PathBuf>, episodes: Option<usize>, exec: Exec) -> Outcome {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let model = Model::load(&model.unwrap_or_else(|| cfg.paths.model.clone()))?;
    let n = episodes.unwrap_or(match cfg.cotrain.train.eval_episodes {
        0 => 100,
        n => n,
    });
    let result = evaluate_policy(
        &model,
        &cfg.world,
        n,
        cfg.seed,
        cfg.cotrain.train.max_episode_steps,
        exec,
    )?;
    let json = serde_json::to_string_pretty(&result).map_err(qdepth::Error::from)?;
    if let Some(out) = &common.out {
        check_writable(out, common.force)?;
        write_bytes(out, json.as_bytes())?;
    }
    println!(
        "success rate {:.3} over {} episodes",
        result.success_rate, n
    );
    Ok(())
}

fn encode_depth(input: &Path, codec: &Path, common: &Common) -> Outcome {
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| input.with_extension("qdtk"));
    check_writable(&out, common.force)?;
    let codec = Codec::load(codec)?;
    let planes = read_pgm(input)?;
    let depth = DepthMap::from_plane(&planes[0])?;
    let tokens = codec.tokenize(&depth)?;
    write_bytes(&out, &tokens.to_bytes()?)?;
    println!(
        "{} tokens ({}x{}) -> {}",
        tokens.indices.len(),
        tokens.side,
        tokens.side,
        out.display()
    );
    Ok(())
}

fn decode_depth(input: &Path, codec: &Path, common: &Common) -> Outcome {
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| input.with_extension("pgm"));
    check_writable(&out, common.force)?;
    let codec = Codec::load(codec)?;
    let bytes = std::fs::read(input).map_err(|e| qdepth::Error::Io {
        path: input.to_path_buf(),
        source: e,
    })?;
    let tokens = TokenGrid::from_bytes(&bytes)?;
    let depth = codec.detokenize(&tokens)?;
    write_bytes(&out, &encode_pgm(&[depth.to_plane8()]))?;
    println!(
        "decoded {}x{} depth -> {}",
        depth.width(),
        depth.height(),
        out.display()
    );
    Ok(())
}

fn mask_dump(layout: &str, dreamvla: bool) -> Outcome {
    let layout = TokenLayout::parse(layout)?;
    let variant = if dreamvla {
        MaskVariant::DreamVla
    } else {
        MaskVariant::Hybrid
    };
    let mask = build_mask(&layout, variant);
    print!("{}", mask.to_bit_rows());
    println!("{} tokens, {} allowed pairs", mask.len(), mask.count_true());
    print!("{}", mask.block_summary(&layout));
    Ok(())
}

fn grad_check(seed: u64, entries: usize) -> Outcome {
    const TOL: f64 = 1e-4;
    let mut rows = op_suite(seed)?;
    for v in [VariantSpec::full(), VariantSpec::pixel_regression()] {
        rows.push(loss_gradcheck(seed, v, Some(entries.max(1)))?);
    }
    println!("{:<20} {:>8} {:>12}", "op", "entries", "max rel err");
    let mut worst: f64 = 0.0;
    for r in &rows {
        let flag = if r.max_rel_err < TOL { "" } else { "  FAIL" };
        println!(
            "{:<20} {:>8} {:>12.3e}{flag}",
            r.name, r.checked, r.max_rel_err
        );
        worst = worst.max(r.max_rel_err);
    }
    if worst < TOL {
        println!("all {} checks below {TOL:e}", rows.len());
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative error {worst:.3e} exceeds {TOL:e}"
        )))
    }
}
