use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use maskblend_core::align::{align_code, segment_at_image_resolution, AlignOptions};
use maskblend_core::archive::{Archive, Dtype};
use maskblend_core::backend::toy::{make_toy_world, ToyWorldConfig};
use maskblend_core::backend::{synth_prefix, Backend, BackendConfig, Generator};
use maskblend_core::blend::{blend_structure, optimize_appearance, BlendOptions};
use maskblend_core::latent::{load_code, save_code, transfer_structure, FSCode, LatentCode, WPlusCode};
use maskblend_core::masks::{
    load_label_png, region_indicator_set, resample_mask, Provenance, TargetMask, UNCOVERED,
};
use maskblend_core::metrics::evaluate_pairs;
use maskblend_core::pipeline::{
    hair_transfer, reconstruct, EmbeddingCache, PipelineOptions, Workspace,
};
use maskblend_core::progress::Progress;
use maskblend_core::{Image, Tensor};

#[derive(Parser)]
#[command(name = "maskblend", version, about = "Latent-space image compositing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct BackendArgs {
    /// Backend config JSON; the seed-42 toy world when omitted.
    #[arg(long)]
    backend: Option<PathBuf>,
}

impl BackendArgs {
    fn load(&self) -> Result<Backend> {
        let cfg = match &self.backend {
            Some(p) => BackendConfig::from_file(p).with_context(|| format!("reading {}", p.display()))?,
            None => BackendConfig::default(),
        };
        Ok(cfg.load()?)
    }
}

#[derive(Args)]
struct OptionArgs {
    /// Pipeline options JSON (embed/align/blend budgets, m, label scheme).
    #[arg(long)]
    options: Option<PathBuf>,
    /// Structure block; overrides the options file.
    #[arg(long)]
    m: Option<usize>,
    /// Directory for the persistent embedding cache.
    #[arg(long)]
    cache: Option<PathBuf>,
}

impl OptionArgs {
    fn load(&self) -> Result<PipelineOptions> {
        let mut o: PipelineOptions = match &self.options {
            Some(p) => serde_json::from_slice(&std::fs::read(p)?).with_context(|| format!("parsing {}", p.display()))?,
            None => PipelineOptions::default(),
        };
        if self.m.is_some() {
            o.m = self.m;
        }
        Ok(o)
    }

    fn cache(&self) -> Result<EmbeddingCache> {
        Ok(match &self.cache {
            Some(d) => EmbeddingCache::on_disk(d)?,
            None => EmbeddingCache::in_memory(),
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Embed an image: W+ projection, then FS refinement.
    Embed {
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        opts: OptionArgs,
        /// FS code output; the W+ code goes to `<out>.wplus`, traces to
        /// `<out>.trace.json`.
        #[arg(long)]
        out: PathBuf,
        /// Also write the FS reconstruction as PNG.
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Align a reconstruction code to a target mask.
    Align {
        /// W+ reconstruction code from `embed`.
        #[arg(long)]
        code: PathBuf,
        /// Reference image for the style term; the code's rendering if omitted.
        #[arg(long)]
        image: Option<PathBuf>,
        /// FS reconstruction; when given the output is an FS code with the
        /// structure transferred inside the region.
        #[arg(long)]
        fs: Option<PathBuf>,
        #[arg(long)]
        target_mask: PathBuf,
        /// Class owned by this reference (repeatable).
        #[arg(long = "class", required = true)]
        classes: Vec<u8>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        lambda_s: Option<f64>,
        #[arg(long)]
        m: Option<usize>,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Blend aligned codes into one FS code.
    Blend {
        /// Aligned codes, lowest priority first (W+ or FS).
        #[arg(long, num_args = 1.., required = true)]
        aligned: Vec<PathBuf>,
        /// Comma-separated classes per aligned code, in the same order.
        #[arg(long = "classes", num_args = 1.., required = true)]
        classes: Vec<String>,
        #[arg(long)]
        target_mask: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        m: Option<usize>,
        #[command(flatten)]
        backend: BackendArgs,
        /// Blended FS code; weights go to `<out>.u.bin` (float32).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        render: Option<PathBuf>,
    },
    /// Hair transfer from `--hair` onto `--face`.
    Transfer {
        #[arg(long)]
        face: PathBuf,
        #[arg(long)]
        hair: PathBuf,
        /// Appearance source for the hair region.
        #[arg(long)]
        appearance: Option<PathBuf>,
        /// Target label mask; 255 marks pixels to inpaint.
        #[arg(long)]
        shape_mask: Option<PathBuf>,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        opts: OptionArgs,
        /// Directory for intermediate masks, codes and traces.
        #[arg(long)]
        workspace: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed and re-render an image.
    Reconstruct {
        #[arg(long)]
        image: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        #[command(flatten)]
        opts: OptionArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction metrics over a CSV of `original,reconstruction` paths.
    Metrics {
        #[arg(long)]
        pairs: PathBuf,
        #[command(flatten)]
        backend: BackendArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Toy-world helpers.
    #[command(subcommand)]
    Toy(ToyCommand),
    /// Run the HTTP service.
    Serve {
        /// Service config JSON; defaults with the toy backend when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: std::net::SocketAddr,
    },
}

#[derive(Subcommand)]
enum ToyCommand {
    /// Write the toy networks as weight archives plus a backend config.
    Export {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        dir: PathBuf,
    },
    /// Render a random toy image.
    Sample {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Seed of the sampled latent.
        #[arg(long, default_value_t = 0)]
        latent_seed: u64,
        #[arg(long, default_value_t = 0.7)]
        psi: f64,
        #[arg(long, default_value_t = 0.3)]
        jitter: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the W+ code.
        #[arg(long)]
        code: Option<PathBuf>,
        /// Also write the segmentation as a label PNG.
        #[arg(long)]
        mask: Option<PathBuf>,
    },
}

struct LogProgress;

impl Progress for LogProgress {
    fn report(&self, stage: &str, iteration: usize, total: usize) {
        if iteration.is_multiple_of(100) || iteration == total {
            log::info!("{stage}: {iteration}/{total}");
        }
    }
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_image(p: &Path, gen: &dyn Generator) -> Result<Image> {
    let r = gen.resolution();
    Ok(Image::load_png(p).with_context(|| format!("reading {}", p.display()))?.resized(r, r))
}

/// Label PNG → target mask at generator resolution. Pixels are attributed
/// to the region owning their class; 255 stays uncovered.
fn load_target(p: &Path, regions: &[BTreeSet<u8>], gen: &dyn Generator, num_classes: usize) -> Result<TargetMask> {
    let (h, w, labels) = load_label_png(p).with_context(|| format!("reading {}", p.display()))?;
    let prov = labels
        .iter()
        .map(|&l| {
            if l == UNCOVERED {
                Provenance::Inpainted
            } else {
                regions
                    .iter()
                    .position(|c| c.contains(&l))
                    .map(Provenance::Reference)
                    .unwrap_or(Provenance::Inpainted)
            }
        })
        .collect();
    let t = TargetMask::new(h, w, labels, prov, num_classes)?;
    let r = gen.resolution();
    Ok(if (h, w) == (r, r) { t } else { t.resize_nearest(r, r) })
}

fn write_json(p: &Path, v: &impl serde::Serialize) -> Result<()> {
    std::fs::write(p, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", p.display()))
}

fn read_wplus(p: &Path, gen: &dyn Generator) -> Result<WPlusCode> {
    match load_code(p, Some(gen))? {
        LatentCode::WPlus(w) => Ok(w),
        LatentCode::FS(_) => bail!("{} is an FS code; pass the W+ code written by `embed`", p.display()),
    }
}

fn parse_classes(s: &str) -> Result<BTreeSet<u8>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<u8>().with_context(|| format!("bad class id {t:?}")))
        .collect()
}

#[derive(Deserialize)]
struct PairRow {
    original: PathBuf,
    reconstruction: PathBuf,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Embed {
            image,
            backend,
            opts,
            out,
            render,
        } => {
            let b = backend.load()?;
            let options = opts.load()?;
            let img = Image::load_png(&image)?;
            let cache = opts.cache()?;
            let rec = reconstruct(&b, &img, &options, &cache, &LogProgress)?;
            let fp = b.generator.fingerprint();
            save_code(&LatentCode::FS(rec.code.clone()), fp, &out)?;
            save_code(&LatentCode::WPlus(rec.wplus.clone()), fp, with_suffix(&out, ".wplus"))?;
            let r = b.generator.resolution();
            let cached = cache
                .get_or_embed(
                    b.generator.as_ref(),
                    b.extractor.as_ref(),
                    &img.resized(r, r),
                    rec.code.m,
                    &options.embed,
                    &LogProgress,
                )?
                .0;
            write_json(
                &with_suffix(&out, ".trace.json"),
                &serde_json::json!({ "wplus": cached.wplus_trace, "fs": cached.fs_trace }),
            )?;
            if let Some(p) = render {
                rec.image.save_png(p)?;
            }
        }
        Command::Align {
            code,
            image,
            fs,
            target_mask,
            classes,
            iters,
            lambda_s,
            m,
            backend,
            out,
        } => {
            let b = backend.load()?;
            let gen = b.generator.as_ref();
            let w_rec = read_wplus(&code, gen)?;
            let fs_rec = match &fs {
                Some(p) => match load_code(p, Some(gen))? {
                    LatentCode::FS(f) => Some(f),
                    LatentCode::WPlus(_) => bail!("{} is not an FS code", p.display()),
                },
                None => None,
            };
            let m = m
                .or(fs_rec.as_ref().map(|f| f.m))
                .unwrap_or_else(|| maskblend_core::pipeline::default_split(gen));
            let ref_img = match &image {
                Some(p) => load_image(p, gen)?,
                None => w_rec.synth(gen)?,
            };
            let classes: BTreeSet<u8> = classes.into_iter().collect();
            let target = load_target(&target_mask, std::slice::from_ref(&classes), gen, b.segmenter.num_classes())?;
            if !target.is_complete() {
                bail!("target mask has uncovered pixels; inpaint it first");
            }
            let mut o = AlignOptions::default();
            o.iters = iters.unwrap_or(o.iters);
            o.lambda_s = lambda_s.unwrap_or(o.lambda_s);
            let a = align_code(&b, &w_rec, &target, &ref_img, &classes, m, &o, &LogProgress)?;
            log::info!("final cross-entropy {:.5}", a.final_xent);
            write_json(&with_suffix(&out, ".trace.json"), &a.trace)?;
            let fp = gen.fingerprint();
            match fs_rec {
                Some(f) => {
                    let own = segment_at_image_resolution(b.segmenter.as_ref(), &ref_img)?;
                    let f_align = transfer_structure(gen, &f.f, &a.code, &target, &own, &classes, m)?;
                    let code = FSCode { f: f_align, ..f };
                    save_code(&LatentCode::FS(code), fp, &out)?;
                }
                None => save_code(&LatentCode::WPlus(a.code), fp, &out)?,
            }
        }
        Command::Blend {
            aligned,
            classes,
            target_mask,
            iters,
            m,
            backend,
            out,
            render,
        } => {
            if aligned.len() != classes.len() {
                bail!("{} aligned codes but {} class lists", aligned.len(), classes.len());
            }
            let b = backend.load()?;
            let gen = b.generator.as_ref();
            let class_sets = classes.iter().map(|c| parse_classes(c)).collect::<Result<Vec<_>>>()?;
            let mut parts = Vec::new();
            for p in &aligned {
                parts.push(match load_code(p, Some(gen))? {
                    LatentCode::FS(f) => (f.f, f.s, Some(f.m)),
                    LatentCode::WPlus(w) => {
                        let m = m.unwrap_or_else(|| maskblend_core::pipeline::default_split(gen));
                        (synth_prefix(gen, &w.w, m)?, w.w.rows(m..gen.num_style_blocks())?, None)
                    }
                });
            }
            let m = m
                .or_else(|| parts.iter().find_map(|p| p.2))
                .unwrap_or_else(|| maskblend_core::pipeline::default_split(gen));
            let target = load_target(&target_mask, &class_sets, gen, b.segmenter.num_classes())?;
            if !target.is_complete() {
                bail!("target mask has uncovered pixels; inpaint it first");
            }
            let shape = gen.block_shapes()[m];
            let alphas: Vec<_> = class_sets.iter().map(|c| region_indicator_set(&target, c)).collect();
            let alphas_m: Vec<_> = alphas.iter().map(|a| resample_mask(a, shape.height, shape.width)).collect();
            let f_aligns: Vec<Tensor> = parts.iter().map(|p| p.0.clone()).collect();
            let s_refs: Vec<Tensor> = parts.iter().map(|p| p.1.clone()).collect();
            let f_blend = blend_structure(&f_aligns, &alphas_m)?;
            let imgs = f_aligns
                .iter()
                .zip(&s_refs)
                .map(|(f, s)| maskblend_core::backend::synth_suffix(gen, f, s))
                .collect::<maskblend_core::Result<Vec<_>>>()?;
            let mut o = BlendOptions::default();
            o.iters = iters.unwrap_or(o.iters);
            let res = optimize_appearance(gen, b.extractor.as_ref(), &f_blend, &s_refs, &imgs, &alphas, &o, &LogProgress)?;
            let code = FSCode {
                f: f_blend,
                s: res.s_blend,
                m,
                generator_fingerprint: gen.fingerprint().to_string(),
            };
            save_code(&LatentCode::FS(code.clone()), gen.fingerprint(), &out)?;
            let mut ar = Archive::new(serde_json::json!({ "kind": "blend_weights" }));
            ar.push("u", Dtype::F32, res.weights.u.clone());
            ar.write(with_suffix(&out, ".u.bin"), b"BBSBW1")?;
            write_json(&with_suffix(&out, ".trace.json"), &res.trace)?;
            if let Some(p) = render {
                code.synth(gen)?.save_png(p)?;
            }
        }
        Command::Transfer {
            face,
            hair,
            appearance,
            shape_mask,
            backend,
            opts,
            workspace,
            out,
        } => {
            let b = backend.load()?;
            let gen = b.generator.as_ref();
            let options = opts.load()?;
            let hair_classes = options.labels.hair_classes();
            let n = b.segmenter.num_classes();
            let other: BTreeSet<u8> = (0..n as u8).filter(|c| !hair_classes.contains(c)).collect();
            let target = shape_mask
                .as_deref()
                .map(|p| load_target(p, &[other, hair_classes], gen, n))
                .transpose()?;
            let ws = workspace.map(Workspace::create).transpose()?;
            let cache = opts.cache()?;
            let face = load_image(&face, gen)?;
            let hair = load_image(&hair, gen)?;
            let result = match appearance {
                None => hair_transfer(&b, face, Some(hair), target, options, &cache, ws.as_ref(), &LogProgress)?,
                Some(app) => {
                    let mut req = maskblend_core::pipeline::hair_request(n, face, hair, target, options)?;
                    req.regions[1].appearance = Some(load_image(&app, gen)?);
                    maskblend_core::pipeline::compose(&b, &req, &cache, ws.as_ref(), &LogProgress)?
                }
            };
            result.image.save_png(&out)?;
        }
        Command::Reconstruct {
            image,
            backend,
            opts,
            out,
        } => {
            let b = backend.load()?;
            let rec = reconstruct(&b, &Image::load_png(&image)?, &opts.load()?, &opts.cache()?, &LogProgress)?;
            rec.image.save_png(&out)?;
        }
        Command::Metrics { pairs, backend, out } => {
            let b = backend.load()?;
            let base = pairs.parent().unwrap_or(Path::new("."));
            let mut originals = Vec::new();
            let mut recons = Vec::new();
            for row in csv::Reader::from_path(&pairs)?.deserialize() {
                let row: PairRow = row?;
                let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
                let a = Image::load_png(resolve(&row.original))?;
                let r = Image::load_png(resolve(&row.reconstruction))?;
                originals.push(a);
                recons.push(r);
            }
            let report = evaluate_pairs(&originals, &recons, b.extractor.as_ref())?;
            write_json(&out, &report)?;
        }
        Command::Toy(ToyCommand::Export { seed, dir }) => {
            let world = make_toy_world(&ToyWorldConfig::with_seed(seed))?;
            world.save(&dir)?;
            println!("{}", dir.join("backend.json").display());
        }
        Command::Toy(ToyCommand::Sample {
            seed,
            latent_seed,
            psi,
            jitter,
            out,
            code,
            mask,
        }) => {
            let world = make_toy_world(&ToyWorldConfig::with_seed(seed))?;
            let b = world.backend();
            let w = WPlusCode::new(world.sample_wplus(latent_seed, psi, jitter))?;
            let img = w.synth(b.generator.as_ref())?;
            img.save_png(&out)?;
            if let Some(p) = code {
                save_code(&LatentCode::WPlus(w), b.generator.fingerprint(), p)?;
            }
            if let Some(p) = mask {
                let labels = segment_at_image_resolution(b.segmenter.as_ref(), &img)?;
                let names = maskblend_core::masks::task::NAMES;
                labels.save(&p, &maskblend_core::masks::LabelTable::from_names(&names))?;
            }
        }
        Command::Serve { config, addr } => {
            let cfg = match config {
                Some(p) => maskblend_service::ServiceConfig::from_file(p)?,
                None => {
                    let mut c = maskblend_service::ServiceConfig::default();
                    c.apply_env();
                    c
                }
            };
            tokio::runtime::Runtime::new()?.block_on(maskblend_service::serve(cfg, addr))?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
