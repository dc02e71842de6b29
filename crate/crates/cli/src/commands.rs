//! The subcommands, callable without going through argument parsing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ffabic::codec::{band_probes, compress, decompress, DecodeOptions};
use ffabic::entropy::Bitstream;
use ffabic::ffab::{band_shapes, Band};
use ffabic::model::Model;
use ffabic::prior::PriorKind;
use ffabic::training::{train_stage, Config, Dataset, Stage, StageRun};
use ffabic::Tensor32;

use crate::bdrate::{bd_rate, read_single_curve, CURVE_HEADER};
use crate::error::{CliError, CliResult};
use crate::imageio::{list_pngs, quantize_8bit, read_png, write_gray_map, write_png};
use crate::metrics::{ms_ssim, ms_ssim_scales, psnr};

pub const EVAL_HEADER: &str = "file\tbpp\tpsnr\tms_ssim";
pub const ABLATION_HEADER: &str = "window_base\tbpp\tpsnr\tms_ssim\tfinal_loss";
pub const BANDS_HEADER: &str = "block\tband\theads\twindow\theight\twidth";

pub fn load_config(path: &Path) -> CliResult<Config> {
    let text = std::fs::read_to_string(path)?;
    Ok(Config::from_toml(&text)?)
}

pub fn load_model(path: &Path) -> CliResult<Model<f32>> {
    Ok(Model::load(path)?)
}

/// Training crops from a PNG directory, or synthetic images when none is given.
pub fn load_dataset(dir: Option<&Path>, crop: usize) -> CliResult<Dataset<f32>> {
    match dir {
        Some(dir) => {
            let images = list_pngs(dir)?.iter().map(|p| read_png(p)).collect::<CliResult<Vec<_>>>()?;
            Ok(Dataset::images(images, crop)?)
        }
        None => Ok(Dataset::Synthetic { size: crop }),
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    /// `None` runs stages 1 to 3 in order.
    pub stage: Option<Stage>,
    pub seed: Option<u64>,
    pub data: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

/// Checkpoint a single stage starts from, found in the output directory.
fn predecessor(cfg: &Config, stage: Stage) -> Option<&'static str> {
    let toy = cfg.model.prior.kind == PriorKind::ToyLatent;
    match stage {
        Stage::Prior => None,
        Stage::Codec | Stage::Joint => toy.then_some("prior.ckpt"),
        Stage::Denoiser => Some("codec.ckpt"),
    }
}

pub fn train(args: &TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    let data = load_dataset(args.data.as_deref(), cfg.train.crop)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config.toml"), cfg.to_toml())?;

    let stages = match args.stage {
        Some(s) => vec![s],
        None => vec![Stage::Prior, Stage::Codec, Stage::Denoiser],
    };
    if args.resume.is_some() && stages.len() != 1 {
        return Err(CliError::Usage("--resume needs --stage".into()));
    }
    let mut model = match args.stage.and_then(|s| predecessor(&cfg, s)) {
        Some(name) => {
            let path = args.out.join(name);
            if !path.exists() {
                return Err(CliError::Usage(format!("{} not found; train the earlier stage first", path.display())));
            }
            let m = load_model(&path)?;
            if m.cfg != cfg.model {
                return Err(CliError::Core(ffabic::Error::Model(format!("{} was trained with a different architecture", path.display()))));
            }
            m
        }
        None => Model::new(cfg.model, cfg.train.seed)?,
    };
    for stage in stages {
        if stage == Stage::Prior && cfg.model.prior.kind != PriorKind::ToyLatent {
            if args.stage.is_some() {
                return Err(CliError::Usage("the fixed filter prior has no training stage".into()));
            }
            continue;
        }
        log::info!("{stage}: {} steps", cfg.train.steps(stage));
        let run = StageRun { out: Some(args.out.clone()), resume: args.resume.clone(), stop_after: None };
        train_stage(&mut model, &cfg.train, &data, stage, &run)?;
    }
    Ok(())
}

pub fn compress_file(model: &Path, input: &Path, output: &Path) -> CliResult<usize> {
    let m = load_model(model)?;
    let x: Tensor32 = read_png(input)?;
    let bytes = compress(&m, &x)?.to_bytes()?;
    std::fs::write(output, &bytes)?;
    Ok(bytes.len())
}

pub fn decompress_file(model: &Path, input: &Path, output: &Path, opts: &DecodeOptions) -> CliResult<()> {
    let m = load_model(model)?;
    let bs = Bitstream::from_bytes(&std::fs::read(input)?)?;
    let x = decompress(&m, &bs, opts)?;
    write_png(output, &x)
}

/// Scores of one coded image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageScore {
    pub file: String,
    pub bpp: f64,
    pub psnr: f64,
    /// NaN when the image is smaller than one MS-SSIM window.
    pub ms_ssim: f64,
}

/// Codes every image through a real stream and scores the 8-bit reconstruction.
pub fn evaluate(model: &Model<f32>, images: &[PathBuf], opts: &DecodeOptions) -> CliResult<Vec<ImageScore>> {
    let mut out = Vec::with_capacity(images.len());
    for path in images {
        let x: Tensor32 = read_png(path)?;
        out.push(score_image(model, &x, opts, &path.file_name().unwrap_or_default().to_string_lossy())?);
    }
    Ok(out)
}

pub fn score_image(model: &Model<f32>, x: &Tensor32, opts: &DecodeOptions, name: &str) -> CliResult<ImageScore> {
    let (_, h, w) = x.dims3();
    let bytes = compress(model, x)?.to_bytes()?;
    let rec = quantize_8bit(&decompress(model, &Bitstream::from_bytes(&bytes)?, opts)?);
    let ms = if ms_ssim_scales(h, w) > 0 { ms_ssim(x, &rec)? } else { f64::NAN };
    Ok(ImageScore { file: name.to_string(), bpp: bytes.len() as f64 * 8.0 / (h * w) as f64, psnr: psnr(x, &rec)?, ms_ssim: ms })
}

pub fn eval_tsv(scores: &[ImageScore]) -> String {
    let mut s = format!("{EVAL_HEADER}\n");
    for r in scores {
        writeln!(s, "{}\t{:.6}\t{:.4}\t{:.6}", r.file, r.bpp, r.psnr, r.ms_ssim).unwrap();
    }
    s
}

pub fn eval(model: &Path, dir: &Path, out: &Path, opts: &DecodeOptions) -> CliResult<Vec<ImageScore>> {
    let m = load_model(model)?;
    let scores = evaluate(&m, &list_pngs(dir)?, opts)?;
    std::fs::write(out, eval_tsv(&scores))?;
    Ok(scores)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// One point per model: mean bpp, PSNR and (when defined) MS-SSIM over the images.
pub fn rd_curve(models: &[PathBuf], dir: &Path, out: &Path, label: &str, opts: &DecodeOptions) -> CliResult<()> {
    let images = list_pngs(dir)?;
    let mut s = format!("{CURVE_HEADER}\n");
    for path in models {
        let m = load_model(path)?;
        let scores = evaluate(&m, &images, opts)?;
        let bpp = mean(scores.iter().map(|r| r.bpp));
        writeln!(s, "{label}\t{bpp:.6}\tpsnr\t{:.4}", mean(scores.iter().map(|r| r.psnr))).unwrap();
        let ms = mean(scores.iter().map(|r| r.ms_ssim));
        if ms.is_finite() {
            writeln!(s, "{label}\t{bpp:.6}\tms_ssim\t{ms:.6}").unwrap();
        }
    }
    std::fs::write(out, s)?;
    Ok(())
}

pub fn bd_rate_files(anchor: &Path, test: &Path, metric: &str) -> CliResult<f64> {
    bd_rate(&read_single_curve(anchor, metric)?, &read_single_curve(test, metric)?)
}

/// `+12.345%` style.
pub fn format_percent(v: f64) -> String {
    format!("{v:+.3}%")
}

/// Writes one grayscale map per band and probed block plus an index TSV; returns the map count.
pub fn bands(model: &Path, input: &Path, out: &Path) -> CliResult<usize> {
    let m = load_model(model)?;
    let x: Tensor32 = read_png(input)?;
    let probes = band_probes(&m, &x)?;
    let ffab = m.cfg.codec.ffab;
    let shapes = band_shapes(&ffab)?;
    let group = ffab.num_heads / 4;
    std::fs::create_dir_all(out)?;
    let mut index = format!("{BANDS_HEADER}\n");
    for p in &probes {
        for band in Band::ALL {
            let map = &p.maps[band.index()];
            write_gray_map(&out.join(format!("{}_{}.png", p.block, band.label())), map)?;
            let heads: Vec<String> =
                (0..ffab.num_heads).filter(|&h| Band::of_head(h, ffab.num_heads) == band).map(|h| h.to_string()).collect();
            debug_assert_eq!(heads.len(), group);
            let win = shapes.get(band);
            writeln!(
                index,
                "{}\t{}\t{}\t{}x{}\t{}\t{}",
                p.block,
                band.label(),
                heads.join(","),
                win.height,
                win.width,
                map.shape()[0],
                map.shape()[1]
            )
            .unwrap();
        }
    }
    std::fs::write(out.join("bands.tsv"), index)?;
    Ok(probes.len() * 4)
}

#[derive(Debug, Clone)]
pub struct AblationArgs {
    pub config: PathBuf,
    pub dir: PathBuf,
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub bases: Vec<usize>,
}

/// One row of the window-size ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub window_base: usize,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub final_loss: f64,
}

/// Trains the prior once, then a codec per window base, and scores each on `dir`
/// with the sampler bypassed.
pub fn ablate_windows(args: &AblationArgs) -> CliResult<Vec<AblationRow>> {
    if args.bases.is_empty() {
        return Err(CliError::Usage("no window bases given".into()));
    }
    let cfg = load_config(&args.config)?;
    let data = load_dataset(args.data.as_deref(), cfg.train.crop)?;
    let images = list_pngs(&args.dir)?;
    let mut shared: Model<f32> = Model::new(cfg.model, cfg.train.seed)?;
    if cfg.model.prior.kind == PriorKind::ToyLatent {
        log::info!("ablation: training the shared prior");
        train_stage(&mut shared, &cfg.train, &data, Stage::Prior, &StageRun::default())?;
    }
    let opts = DecodeOptions { bypass: true, ..Default::default() };
    let mut rows = Vec::new();
    for &base in &args.bases {
        let mut mcfg = cfg.model;
        mcfg.codec.ffab.window_base = base;
        let mut model: Model<f32> = Model::new(mcfg, cfg.train.seed)?;
        for name in shared.params.names_with_prefix("prior.") {
            *model.params.get_mut(name).expect("prior shapes do not depend on the window") = shared.params.expect(name).clone();
        }
        log::info!("ablation: window base {base}");
        let logs = train_stage(&mut model, &cfg.train, &data, Stage::Codec, &StageRun::default())?;
        let tail = &logs[logs.len().saturating_sub(10)..];
        let final_loss = mean(tail.iter().map(|l| l.report.total));
        let scores = evaluate(&model, &images, &opts)?;
        rows.push(AblationRow {
            window_base: base,
            bpp: mean(scores.iter().map(|r| r.bpp)),
            psnr: mean(scores.iter().map(|r| r.psnr)),
            ms_ssim: mean(scores.iter().map(|r| r.ms_ssim)),
            final_loss,
        });
    }
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        writeln!(s, "{}\t{:.6}\t{:.4}\t{:.6}\t{:.6}", r.window_base, r.bpp, r.psnr, r.ms_ssim, r.final_loss).unwrap();
    }
    std::fs::write(&args.out, s)?;
    Ok(rows)
}
