use std::fs;
use std::io::Write;
use std::path::Path;

use log::info;
use serde::Serialize;
use serde_json::json;

use gsvq::codec::{self, CompressedFileHeader, SizeReport, MAGIC};
use gsvq::compress::{self, CompressReport, CompressionConfig, QuantizedCloud};
use gsvq::metrics::{self, EvalOptions, EvalReport};
use gsvq::ply;
use gsvq::render::{self, Camera, RenderOptions};
use gsvq::synth::{self, SceneSpec};
use gsvq::SplatCloud;

use crate::error::{CliError, Failure};
use crate::CompressArgs;

fn read(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::io(e, format!("cannot read {}", path.display())))
}

fn print_json(value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::new(Failure::Numeric, e))?;
    emit(&text)
}

/// Write a line to stdout; a closed pipe is not an error.
fn emit(line: &str) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{line}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(CliError::io(e, "cannot write to stdout")),
        _ => Ok(()),
    }
}

fn load_ply(path: &Path) -> Result<SplatCloud, CliError> {
    let bytes = read(path)?;
    ply::read_ply(&bytes).map_err(|e| CliError::ply(e, format!("cannot parse {}", path.display())))
}

fn load_nvqg(path: &Path) -> Result<QuantizedCloud, CliError> {
    let bytes = read(path)?;
    codec::decode_bytes(&bytes).map_err(|e| CliError::codec(e, format!("cannot decode {}", path.display())))
}

/// A PLY or an .nvqg file, told apart by the magic bytes.
fn load_model(path: &Path) -> Result<SplatCloud, CliError> {
    let bytes = read(path)?;
    if bytes.starts_with(&MAGIC) {
        let q =
            codec::decode_bytes(&bytes).map_err(|e| CliError::codec(e, format!("cannot decode {}", path.display())))?;
        compress::dequantize(&q).map_err(|e| CliError::compress(e, "cannot dequantize"))
    } else {
        ply::read_ply(&bytes).map_err(|e| CliError::ply(e, format!("cannot parse {}", path.display())))
    }
}

fn load_cameras(path: &Path) -> Result<Vec<Camera>, CliError> {
    render::load_cameras(path).map_err(|e| CliError::render(e, format!("cannot load cameras from {}", path.display())))
}

pub fn build_config(opts: &CompressArgs) -> Result<CompressionConfig, CliError> {
    let mut cfg = match &opts.config {
        Some(p) => {
            let text = String::from_utf8(read(p)?)
                .map_err(|e| CliError::new(Failure::Usage, format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::new(Failure::Usage, format!("{}: {e}", p.display())))?
        }
        None => CompressionConfig::default(),
    };
    if let Some(size) = &opts.size {
        cfg = cfg.with_size(size).map_err(|e| CliError::compress(e, "--size"))?;
    }
    if let Some(v) = opts.seed {
        cfg.seed = v;
    }
    if let Some(v) = opts.prune_lambda {
        cfg.prune_lambda = v;
    }
    if let Some(v) = opts.prune_threshold {
        cfg.prune_threshold = v;
    }
    if let Some(v) = opts.vq_steps {
        cfg.vq_steps = v;
    }
    if let Some(v) = opts.finetune_steps {
        cfg.finetune_steps = v;
    }
    if opts.render_loss {
        cfg.render_loss = true;
    }
    if let Some(bg) = opts.background {
        cfg.background = bg;
    }
    cfg.validate().map_err(|e| CliError::compress(e, "invalid settings"))?;
    Ok(cfg)
}

fn run_compress(
    cloud: &SplatCloud,
    cfg: &CompressionConfig,
    cams: Option<&[Camera]>,
) -> Result<(QuantizedCloud, CompressReport), CliError> {
    if cfg.render_loss && cams.is_none() {
        return Err(CliError::new(Failure::Usage, "--render-loss needs --cameras"));
    }
    let (q, _, report) =
        compress::compress(cloud, cfg, cams).map_err(|e| CliError::compress(e, "compression failed"))?;
    Ok((q, report))
}

#[derive(Serialize)]
struct CompressOutput<'a> {
    input: String,
    output: String,
    input_bytes: u64,
    output_bytes: u64,
    /// Uncompressed float payload of the input splats over the output size.
    ratio_vs_input: f64,
    sizes: SizeReport,
    pipeline: CompressReport,
    config: &'a CompressionConfig,
}

pub fn compress(input: &Path, out: &Path, cameras: Option<&Path>, opts: &CompressArgs) -> Result<(), CliError> {
    let cfg = build_config(opts)?;
    let cloud = load_ply(input)?;
    let input_bytes = fs::metadata(input).map(|m| m.len()).unwrap_or(0);
    let cams = cameras.map(load_cameras).transpose()?;
    info!("compressing {} splats from {}", cloud.len(), input.display());
    let (q, report) = run_compress(&cloud, &cfg, cams.as_deref())?;
    let written = codec::encode(&q, out).map_err(|e| CliError::codec(e, format!("cannot write {}", out.display())))?;
    let sizes = codec::size_report(&q);
    info!("wrote {written} bytes to {}", out.display());
    print_json(&CompressOutput {
        input: input.display().to_string(),
        output: out.display().to_string(),
        input_bytes,
        output_bytes: written,
        ratio_vs_input: cloud.uncompressed_bytes() as f64 / written as f64,
        sizes,
        pipeline: report,
        config: &cfg,
    })
}

pub fn decompress(input: &Path, out: &Path) -> Result<(), CliError> {
    let q = load_nvqg(input)?;
    let cloud = compress::dequantize(&q).map_err(|e| CliError::compress(e, "cannot dequantize"))?;
    ply::save_ply(&cloud, out).map_err(|e| CliError::ply(e, format!("cannot write {}", out.display())))?;
    print_json(&json!({
        "input": input.display().to_string(),
        "output": out.display().to_string(),
        "splats": cloud.len(),
        "sh_degree": cloud.sh_degree(),
    }))
}

pub fn render(input: &Path, cameras: &Path, out: &Path, raw: bool, background: [f64; 3]) -> Result<(), CliError> {
    let cloud = load_model(input)?;
    let cams = load_cameras(cameras)?;
    fs::create_dir_all(out).map_err(|e| CliError::io(e, format!("cannot create {}", out.display())))?;
    let opts = RenderOptions { background };
    let mut views = Vec::new();
    for (i, cam) in cams.iter().enumerate() {
        let (img, stats) =
            render::render(&cloud, cam, &opts).map_err(|e| CliError::render(e, format!("camera {i}")))?;
        let png = out.join(format!("view_{i:03}.png"));
        img.save_png(&png)
            .map_err(|e| CliError::render(e, format!("cannot write {}", png.display())))?;
        if raw {
            let f = out.join(format!("view_{i:03}.f32"));
            img.save_raw_f32(&f)
                .map_err(|e| CliError::render(e, format!("cannot write {}", f.display())))?;
        }
        views.push(json!({
            "camera": i,
            "file": png.display().to_string(),
            "visible": stats.visible,
            "culled": stats.culled,
            "singular": stats.singular,
        }));
    }
    print_json(&json!({ "splats": cloud.len(), "views": views }))
}

pub struct EvalArgs<'a> {
    pub original: &'a Path,
    pub input: Option<&'a Path>,
    pub cameras: Option<&'a Path>,
    pub sizes: Option<&'a [String]>,
    pub csv: Option<&'a Path>,
    pub eight_bit: bool,
    pub opts: &'a CompressArgs,
}

pub fn eval(args: EvalArgs<'_>) -> Result<(), CliError> {
    let original = load_ply(args.original)?;
    let cams = args.cameras.map(load_cameras).transpose()?.unwrap_or_default();
    let cfg = build_config(args.opts)?;
    let opts = EvalOptions {
        render: RenderOptions {
            background: cfg.background,
        },
        eight_bit: args.eight_bit,
    };
    let evaluate = |q: &QuantizedCloud| -> Result<EvalReport, CliError> {
        metrics::evaluate(&original, q, &cams, &opts).map_err(|e| CliError::metrics(e, "evaluation failed"))
    };

    if let Some(sizes) = args.sizes {
        let mut lines = vec![EvalReport::CSV_HEADER.to_string()];
        emit(&lines[0])?;
        for size in sizes {
            let c = cfg
                .clone()
                .with_size(size)
                .map_err(|e| CliError::compress(e, "--sizes"))?;
            info!("sweep: compressing at {size}");
            let train_cams = (!cams.is_empty()).then_some(cams.as_slice());
            let (q, _) = run_compress(&original, &c, train_cams)?;
            let row = evaluate(&q)?.csv_row(size);
            emit(&row)?;
            lines.push(row);
        }
        return write_csv(args.csv, &lines);
    }

    let input = args.input.expect("clap requires --in without --sizes");
    let q = load_nvqg(input)?;
    let report = evaluate(&q)?;
    write_csv(
        args.csv,
        &[
            EvalReport::CSV_HEADER.to_string(),
            report.csv_row(&input.display().to_string()),
        ],
    )?;
    print_json(&report)
}

fn write_csv(path: Option<&Path>, lines: &[String]) -> Result<(), CliError> {
    if let Some(p) = path {
        let mut text = lines.join("\n");
        text.push('\n');
        fs::write(p, text).map_err(|e| CliError::io(e, format!("cannot write {}", p.display())))?;
    }
    Ok(())
}

pub fn synth(
    spec: &SceneSpec,
    out: &Path,
    cameras_out: Option<&Path>,
    views: usize,
    radius: f64,
    image_size: u32,
) -> Result<(), CliError> {
    let cloud = synth::generate_cloud(spec).map_err(|e| CliError::synth(e, "invalid scene"))?;
    ply::save_ply(&cloud, out).map_err(|e| CliError::ply(e, format!("cannot write {}", out.display())))?;
    if let Some(p) = cameras_out {
        if views == 0 || image_size == 0 || !(radius > 0.0) {
            return Err(CliError::new(
                Failure::Usage,
                "--views, --radius and --image-size must be positive",
            ));
        }
        let cams = synth::generate_orbit_cameras(views, radius, image_size);
        render::save_cameras(&cams, p).map_err(|e| CliError::render(e, format!("cannot write {}", p.display())))?;
    }
    print_json(&json!({
        "output": out.display().to_string(),
        "splats": cloud.len(),
        "sh_degree": cloud.sh_degree(),
        "cameras": cameras_out.map(|p| p.display().to_string()),
    }))
}

pub fn inspect(input: &Path) -> Result<(), CliError> {
    let bytes = read(input)?;
    if bytes.starts_with(&MAGIC) {
        let header = CompressedFileHeader::parse(&bytes).map_err(|e| CliError::codec(e, "bad header"))?;
        let q = codec::decode_bytes(&bytes)
            .map_err(|e| CliError::codec(e, format!("cannot decode {}", input.display())))?;
        let groups: Vec<_> = compress::Group::ALL
            .iter()
            .map(|&g| {
                let (dim, bits, entries) = header.groups[g.index()];
                json!({ "group": g, "dim": dim, "bits": bits, "entries": entries })
            })
            .collect();
        return print_json(&json!({
            "format": "nvqg",
            "version": header.version,
            "splats": header.splat_count,
            "sh_degree": header.sh_degree(),
            "groups": groups,
            "sizes": codec::size_report(&q),
        }));
    }
    let cloud = ply::read_ply(&bytes).map_err(|e| CliError::ply(e, format!("cannot parse {}", input.display())))?;
    let mut lo = [f32::INFINITY; 3];
    let mut hi = [f32::NEG_INFINITY; 3];
    for s in &cloud.splats {
        for k in 0..3 {
            lo[k] = lo[k].min(s.position[k]);
            hi[k] = hi[k].max(s.position[k]);
        }
    }
    print_json(&json!({
        "format": "ply",
        "splats": cloud.len(),
        "sh_degree": cloud.sh_degree(),
        "file_bytes": bytes.len(),
        "uncompressed_bytes": cloud.uncompressed_bytes(),
        "bounds": (!cloud.is_empty()).then_some([lo, hi]),
    }))
}
