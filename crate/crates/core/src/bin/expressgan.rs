use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use expressgan::aucode::{self, AuSchema, AuVector, PresetBook};
use expressgan::facedata::synth::{self, SyntheticAuMap, SyntheticSpec};
use expressgan::facedata::{self, FaceBox, ImageTensor};
use expressgan::inference::{self, EditRequest, SweepSpec};
use expressgan::models::Model;
use expressgan::service::{self, ServiceConfig};
use expressgan::training::{self, checkpoint, TrainConfig, Trainer};
use expressgan::{Error, Result};

#[derive(Parser)]
#[command(name = "expressgan", version, about = "AU-conditioned facial expression editing")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a `key = value` config file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint (its stored config is used).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Edit one image.
    Edit {
        #[command(flatten)]
        common: EditArgs,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        dump_masks: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drive one AU through a list of intensities.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        au: usize,
        #[arg(long, default_value = "0,0.33,0.66,1", value_delimiter = ',')]
        levels: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Frames interpolating from the source expression to the target.
    Interp {
        #[command(flatten)]
        common: EditArgs,
        #[arg(long)]
        steps: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Render a synthetic annotated face dataset.
    SynthData {
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// AU schema file (default: the built-in 14 AUs).
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out metrics of a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Evaluate every image instead of the held-out split.
        #[arg(long)]
        all: bool,
    },
    /// HTTP inference server.
    Serve {
        #[arg(long, env = "GANIM_MODEL")]
        model: PathBuf,
        #[arg(long, env = "GANIM_ADDR", default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
        #[arg(long, env = "GANIM_MAX_INFLIGHT", default_value_t = 4)]
        max_inflight: usize,
        #[arg(long, env = "GANIM_QUEUE_DEPTH", default_value_t = 16)]
        queue_depth: usize,
        #[arg(long, env = "GANIM_MAX_IMAGE_SIDE", default_value_t = 1024)]
        max_image_side: usize,
    },
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    input: PathBuf,
    /// `<idx>:<val>,...` over schema positions, or a preset name.
    #[arg(long)]
    target: String,
    /// Source expression in the same form; estimated when absent.
    #[arg(long)]
    source: Option<String>,
    /// Face box `x,y,w,h` for images larger than the model.
    #[arg(long = "box", value_name = "X,Y,W,H")]
    face_box: Option<String>,
    /// Fail instead of estimating a missing source.
    #[arg(long)]
    no_estimate: bool,
}

fn parse_aus(spec: &str, schema: &AuSchema) -> Result<AuVector> {
    let book = PresetBook::default();
    if book.names().iter().any(|n| n == spec) {
        return book.preset(spec, schema);
    }
    let v = aucode::parse_sparse(spec, schema.len())?;
    Ok(aucode::validate(v.values(), schema)?.vector)
}

struct Loaded {
    model: Model<f32>,
    schema: AuSchema,
}

fn load_model(path: &Path) -> Result<Loaded> {
    let ck = checkpoint::load(path)?;
    Ok(Loaded {
        model: ck.model,
        schema: ck.meta.schema,
    })
}

fn request(common: &EditArgs, m: &Loaded) -> Result<EditRequest> {
    let mut req = EditRequest::new(parse_aus(&common.target, &m.schema)?);
    req.source = common.source.as_deref().map(|s| parse_aus(s, &m.schema)).transpose()?;
    req.face_box = common.face_box.as_deref().map(FaceBox::parse).transpose()?;
    req.estimate_source = !common.no_estimate;
    Ok(req)
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    out.with_file_name(format!("{stem}_{suffix}.png"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

fn write_frames(dir: &Path, frames: &[ImageTensor]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        write(&dir.join(format!("frame_{i:03}.png")), &f.encode_png()?)?;
    }
    println!("wrote {} frames to {}", frames.len(), dir.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, resume } => {
            let outcome = match (config, resume) {
                (_, Some(ck)) => {
                    let ck = checkpoint::load(&ck)?;
                    let dir = ck
                        .meta
                        .config
                        .dataset
                        .clone()
                        .ok_or_else(|| Error::Invalid("checkpoint config has no dataset".into()))?;
                    let data = facedata::load_dataset_dir(&dir, &ck.meta.schema)?;
                    Trainer::resume(ck, &data)?.run()?
                }
                (Some(path), None) => training::train(&TrainConfig::load(&path)?)?,
                (None, None) => return Err(Error::Invalid("train needs --config or --resume".into())),
            };
            for m in &outcome.epochs {
                println!("{}", m.record());
            }
            if let Some(p) = outcome.final_checkpoint {
                println!("final checkpoint {}", p.display());
            }
        }
        Cmd::Edit {
            common,
            alpha,
            dump_masks,
            out,
        } => {
            let m = load_model(&common.model)?;
            let mut req = request(&common, &m)?;
            req.alpha = alpha;
            req.dump_masks = dump_masks;
            let image = ImageTensor::decode_png(&std::fs::read(&common.input)?)?;
            let result = inference::edit(&m.model, &image, &req)?;
            write(&out, &result.image.encode_png()?)?;
            if let Some(masks) = result.masks {
                write(&sibling(&out, "attention"), &masks.attention_png()?)?;
                write(&sibling(&out, "color"), &masks.color.encode_png()?)?;
            }
            println!("wrote {}", out.display());
        }
        Cmd::Sweep {
            model,
            input,
            au,
            levels,
            out_dir,
        } => {
            let m = load_model(&model)?;
            let image = ImageTensor::load_png(&input)?;
            let spec = SweepSpec { au, levels, base: None };
            write_frames(&out_dir, &inference::sweep(&m.model, &image, &spec)?)?;
        }
        Cmd::Interp {
            common,
            steps,
            out_dir,
        } => {
            let m = load_model(&common.model)?;
            let req = request(&common, &m)?;
            let image = ImageTensor::load_png(&common.input)?;
            let frames: Vec<ImageTensor> = inference::interpolate_request(&m.model, &image, &req, steps)?
                .into_iter()
                .map(|o| o.image)
                .collect();
            write_frames(&out_dir, &frames)?;
        }
        Cmd::SynthData {
            count,
            size,
            seed,
            schema,
            out,
        } => {
            let schema = match schema {
                Some(p) => AuSchema::load(&p)?,
                None => AuSchema::default(),
            };
            let map = SyntheticAuMap::for_schema(&schema);
            let items = synth::generate(&SyntheticSpec::new(count, size, seed).with_schema(schema, map))?;
            facedata::save_dataset(&out, &items)?;
            println!("wrote {count} faces to {}", out.display());
        }
        Cmd::Eval { model, data, all } => {
            let digest = checkpoint::file_digest(&model)?;
            let ck = checkpoint::load(&model)?;
            let items = facedata::load_dataset_dir(&data, &ck.meta.schema)?;
            let cfg = &ck.meta.config;
            let indices = if all {
                (0..items.len()).collect()
            } else {
                facedata::split_indices(items.len(), cfg.seed, cfg.holdout_fraction).1
            };
            let e = training::evaluate(&ck.model, &items, &indices, cfg.seed)?;
            println!("model_id {digest}");
            println!("samples {}", e.samples);
            println!("au_mae {:.6}", e.au_mae);
            println!("expression_error {:.6}", e.expression_error);
            println!("identity_error {:.6}", e.identity_error);
            println!("cycle_l1 {:.6}", e.cycle_l1);
            println!("gp_norm {:.6}", e.gp_norm);
        }
        Cmd::Serve {
            model,
            addr,
            max_inflight,
            queue_depth,
            max_image_side,
        } => {
            let cfg = ServiceConfig {
                max_inflight,
                queue_depth,
                max_wild_side: max_image_side,
            };
            tokio::runtime::Runtime::new()?.block_on(service::serve(model, addr, cfg))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
