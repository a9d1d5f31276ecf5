//! The compression pipeline: opacity pruning, NSVQ codebook training and
//! fine-tuning with frozen assignments.
//!
//! All four attribute groups are trained on attribute-space squared error.
//! With `render_loss` on, the colour and SH codebooks additionally receive
//! the exact colour-path gradient of a render-space MSE against images of the
//! unquantized cloud; scale and rotation never see it.
//!
//! Every random draw comes from a stream keyed by (seed, purpose, group,
//! step, chunk) with a fixed chunk size, and gradients are merged in splat
//! order, so results do not depend on the number of threads.

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::render::{sh_basis, BlendWeights, Camera, Frame, Image, RenderError, RenderOptions};
use crate::rng;
use crate::splat::{sh_rest_len, sh_rest_per_channel, GaussianSplat, SplatCloud, SplatError};
use crate::vq::{index_bits, kmeans_init, nsvq_backward, quantize_nsvq, Codebook, KMeansOptions, VqError};

const TAG_KMEANS: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_NSVQ: u64 = 3;
const TAG_REPLACE: u64 = 4;
const TAG_RENDER: u64 = 5;

/// Samples per RNG stream in a parallel batch.
const CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum CompressError {
    #[error("cannot compress an empty cloud")]
    EmptyCloud,
    #[error("render loss requested but no cameras were given")]
    MissingCameras,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("unknown size {0:?}; expected one of 0.5k, 1k, 2k, 4k, 8k, 16k")]
    UnknownSize(String),
    #[error("{group} index {index} of splat {splat} is out of range for {entries} entries")]
    IndexOutOfRange {
        group: Group,
        splat: usize,
        index: u32,
        entries: usize,
    },
    #[error("quantized cloud is inconsistent: {0}")]
    Inconsistent(String),
    #[error("splat count mismatch: {expected} vs {got}")]
    CountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Splat(#[from] SplatError),
}

/// The four quantized attribute groups, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Scale,
    Rotation,
    Colour,
    Sh,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Scale, Group::Rotation, Group::Colour, Group::Sh];

    pub fn dim(self) -> usize {
        match self {
            Group::Scale => 3,
            Group::Rotation => 4,
            Group::Colour => 3,
            Group::Sh => 45,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Group::Scale => "s",
            Group::Rotation => "r",
            Group::Colour => "c",
            Group::Sh => "sh",
        }
    }

    pub fn get(self, s: &GaussianSplat) -> &[f32] {
        match self {
            Group::Scale => &s.log_scale,
            Group::Rotation => &s.rotation,
            Group::Colour => &s.color_dc,
            Group::Sh => &s.sh_rest,
        }
    }

    pub fn get_mut(self, s: &mut GaussianSplat) -> &mut [f32] {
        match self {
            Group::Scale => &mut s.log_scale,
            Group::Rotation => &mut s.rotation,
            Group::Colour => &mut s.color_dc,
            Group::Sh => &mut s.sh_rest,
        }
    }

    /// Components that carry data at the given SH degree.
    pub fn active_dim(self, sh_degree: u8) -> usize {
        match self {
            Group::Sh => sh_rest_len(sh_degree),
            g => g.dim(),
        }
    }
}

impl std::fmt::Display for Group {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Named sizes and their scale/rotation entry counts. Colour and SH use a
/// quarter of that.
pub const NAMED_SIZES: [(&str, usize); 6] = [
    ("0.5k", 512),
    ("1k", 1024),
    ("2k", 2048),
    ("4k", 4096),
    ("8k", 8192),
    ("16k", 16384),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    pub entries_s: usize,
    pub entries_r: usize,
    pub entries_c: usize,
    pub entries_sh: usize,
    /// Weight of the summed-opacity penalty.
    pub prune_lambda: f64,
    /// Splats with activated opacity below this are removed.
    pub prune_threshold: f64,
    pub prune_steps: usize,
    /// Step size for the opacity logits during pruning.
    pub lr_attr: f64,
    pub vq_steps: usize,
    pub finetune_steps: usize,
    /// Step size for codebook entries under the attribute loss. At 0.5 or
    /// below a full-batch step never overshoots the assignment mean.
    pub lr_codebook: f64,
    /// Step size for colour/SH entries under the render loss; stable below
    /// about 2.35.
    pub lr_render: f64,
    pub batch_size: usize,
    /// Steps between dead-entry replacements; 0 disables replacement.
    pub replace_period: usize,
    /// Entries used fewer times than this in a period are replaced.
    pub replace_threshold: u64,
    /// Half-width of uniform noise added to replaced entries.
    pub replace_jitter: f32,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    pub seed: u64,
    pub render_loss: bool,
    pub background: [f64; 3],
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            entries_s: 16384,
            entries_r: 16384,
            entries_c: 4096,
            entries_sh: 4096,
            prune_lambda: 1e-4,
            prune_threshold: 0.005,
            prune_steps: 100,
            lr_attr: 1e-3,
            vq_steps: 1000,
            finetune_steps: 100,
            lr_codebook: 0.5,
            lr_render: 2.0,
            batch_size: 16384,
            replace_period: 500,
            replace_threshold: 1,
            replace_jitter: 0.0,
            kmeans_iters: 25,
            kmeans_tol: 1e-6,
            seed: 0,
            render_loss: false,
            background: [0.0; 3],
        }
    }
}

impl CompressionConfig {
    /// Entry counts for a named size such as `"16k"` or `"0.5k"`.
    pub fn size_entries(name: &str) -> Result<[usize; 4], CompressError> {
        NAMED_SIZES
            .iter()
            .find(|(n, _)| *n == name)
            .map(|&(_, e)| [e, e, e / 4, e / 4])
            .ok_or_else(|| CompressError::UnknownSize(name.to_string()))
    }

    pub fn with_size(mut self, name: &str) -> Result<Self, CompressError> {
        self.set_entries(Self::size_entries(name)?);
        Ok(self)
    }

    pub fn entries(&self) -> [usize; 4] {
        [self.entries_s, self.entries_r, self.entries_c, self.entries_sh]
    }

    pub fn set_entries(&mut self, e: [usize; 4]) {
        [self.entries_s, self.entries_r, self.entries_c, self.entries_sh] = e;
    }

    pub fn validate(&self) -> Result<(), CompressError> {
        let bad = |m: String| Err(CompressError::InvalidConfig(m));
        for (g, e) in Group::ALL.iter().zip(self.entries()) {
            if e < 2 || !e.is_power_of_two() {
                return bad(format!("entries_{g} = {e} must be a power of two >= 2"));
            }
            if e > 1 << 24 {
                return bad(format!("entries_{g} = {e} exceeds 2^24"));
            }
        }
        for (name, v) in [
            ("lr_attr", self.lr_attr),
            ("lr_codebook", self.lr_codebook),
            ("lr_render", self.lr_render),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} = {v} must be positive"));
            }
        }
        if !(self.prune_lambda >= 0.0 && self.prune_lambda.is_finite()) {
            return bad(format!("prune_lambda = {} must be >= 0", self.prune_lambda));
        }
        if !(0.0..=1.0).contains(&self.prune_threshold) {
            return bad(format!("prune_threshold = {} must lie in [0, 1]", self.prune_threshold));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.replace_jitter >= 0.0 && self.replace_jitter.is_finite()) {
            return bad(format!("replace_jitter = {} must be >= 0", self.replace_jitter));
        }
        if self.background.iter().any(|v| !v.is_finite()) {
            return bad("background must be finite".into());
        }
        Ok(())
    }

    fn kmeans_options(&self) -> KMeansOptions {
        KMeansOptions {
            max_iters: self.kmeans_iters,
            tol: self.kmeans_tol,
        }
    }

    /// Entry count actually used for `g`; SH collapses to one zero entry
    /// when the cloud has no higher-order coefficients.
    fn effective_entries(&self, g: Group, sh_degree: u8) -> usize {
        if g == Group::Sh && sh_degree == 0 {
            1
        } else {
            self.entries()[g.index()]
        }
    }
}

/// Per-splat positions and opacities at full precision plus one codebook
/// index per attribute group.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedCloud {
    positions: Vec<[f32; 3]>,
    opacities: Vec<f32>,
    indices: [Vec<u32>; 4],
    codebooks: [Codebook; 4],
    sh_degree: u8,
}

impl QuantizedCloud {
    /// Checks lengths, dimensions, power-of-two entry counts and index ranges.
    pub fn new(
        positions: Vec<[f32; 3]>,
        opacities: Vec<f32>,
        indices: [Vec<u32>; 4],
        codebooks: [Codebook; 4],
        sh_degree: u8,
    ) -> Result<Self, CompressError> {
        if sh_degree > 3 {
            return Err(SplatError::InvalidShDegree(sh_degree).into());
        }
        let n = positions.len();
        if opacities.len() != n {
            return Err(CompressError::CountMismatch {
                expected: n,
                got: opacities.len(),
            });
        }
        for g in Group::ALL {
            let cb = &codebooks[g.index()];
            if cb.dim() != g.dim() {
                return Err(CompressError::Inconsistent(format!(
                    "{g} codebook has dim {}, expected {}",
                    cb.dim(),
                    g.dim()
                )));
            }
            if !cb.entries().is_power_of_two() {
                return Err(CompressError::Inconsistent(format!(
                    "{g} codebook has {} entries, not a power of two",
                    cb.entries()
                )));
            }
            let idx = &indices[g.index()];
            if idx.len() != n {
                return Err(CompressError::CountMismatch {
                    expected: n,
                    got: idx.len(),
                });
            }
            if let Some(splat) = idx.iter().position(|&k| k as usize >= cb.entries()) {
                return Err(CompressError::IndexOutOfRange {
                    group: g,
                    splat,
                    index: idx[splat],
                    entries: cb.entries(),
                });
            }
        }
        Ok(Self {
            positions,
            opacities,
            indices,
            codebooks,
            sh_degree,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn sh_degree(&self) -> u8 {
        self.sh_degree
    }

    pub fn positions(&self) -> &[[f32; 3]] {
        &self.positions
    }

    pub fn opacities(&self) -> &[f32] {
        &self.opacities
    }

    pub fn indices(&self, g: Group) -> &[u32] {
        &self.indices[g.index()]
    }

    pub fn codebook(&self, g: Group) -> &Codebook {
        &self.codebooks[g.index()]
    }

    pub fn codebooks(&self) -> &[Codebook; 4] {
        &self.codebooks
    }

    /// Index bit widths in group order.
    pub fn bits(&self) -> [u32; 4] {
        Group::ALL.map(|g| index_bits(self.codebook(g).entries()))
    }

    /// Number of splats assigned to each entry of `g`.
    pub fn assignment_counts(&self, g: Group) -> Vec<u64> {
        let mut counts = vec![0u64; self.codebook(g).entries()];
        for &k in self.indices(g) {
            counts[k as usize] += 1;
        }
        counts
    }
}

/// Replace each splat's quantized attributes by its codebook rows.
pub fn dequantize(q: &QuantizedCloud) -> Result<SplatCloud, CompressError> {
    let mut splats = Vec::with_capacity(q.len());
    for i in 0..q.len() {
        let mut s = GaussianSplat {
            position: q.positions[i],
            opacity: q.opacities[i],
            ..Default::default()
        };
        for g in Group::ALL {
            let k = q.indices[g.index()][i];
            let cb = &q.codebooks[g.index()];
            if k as usize >= cb.entries() {
                return Err(CompressError::IndexOutOfRange {
                    group: g,
                    splat: i,
                    index: k,
                    entries: cb.entries(),
                });
            }
            g.get_mut(&mut s).copy_from_slice(cb.vector(k as usize));
        }
        splats.push(s);
    }
    Ok(SplatCloud::new(splats, q.sh_degree)?)
}

/// Per-group mean squared error per active component between raw and
/// quantized attributes.
pub fn attribute_mse(cloud: &SplatCloud, q: &QuantizedCloud) -> Result<[f64; 4], CompressError> {
    if cloud.len() != q.len() {
        return Err(CompressError::CountMismatch {
            expected: cloud.len(),
            got: q.len(),
        });
    }
    let mut out = [0.0; 4];
    for g in Group::ALL {
        let cb = q.codebook(g);
        let idx = q.indices(g);
        let dim = g.active_dim(cloud.sh_degree());
        if cloud.is_empty() || dim == 0 {
            continue;
        }
        let mut acc = 0.0;
        for (s, &k) in cloud.splats.iter().zip(idx) {
            let z = cb.vector(k as usize);
            for (a, b) in g.get(s).iter().zip(z) {
                let d = f64::from(*a) - f64::from(*b);
                acc += d * d;
            }
        }
        out[g.index()] = acc / (cloud.len() * dim) as f64;
    }
    Ok(out)
}

/// Gradient steps on the summed activated opacity, then threshold removal.
pub fn prune(cloud: &SplatCloud, cfg: &CompressionConfig, steps: usize) -> SplatCloud {
    let step = cfg.lr_attr * cfg.prune_lambda;
    let splats: Vec<GaussianSplat> = cloud
        .splats
        .iter()
        .filter_map(|s| {
            let mut s = *s;
            if step > 0.0 && steps > 0 {
                let mut o = f64::from(s.opacity);
                for _ in 0..steps {
                    let sig = crate::splat::sigmoid(o);
                    o -= step * sig * (1.0 - sig);
                }
                s.opacity = o as f32;
            }
            let keep = crate::splat::sigmoid(f64::from(s.opacity)) >= cfg.prune_threshold;
            keep.then_some(s)
        })
        .collect();
    let removed = cloud.len() - splats.len();
    if splats.is_empty() && !cloud.is_empty() {
        warn!("pruning removed all {removed} splats");
    } else {
        info!("pruning removed {removed} of {} splats", cloud.len());
    }
    SplatCloud::new(splats, cloud.sh_degree()).expect("degree already validated")
}

fn group_data(cloud: &SplatCloud, g: Group) -> Vec<f32> {
    cloud.splats.iter().flat_map(|s| g.get(s).iter().copied()).collect()
}

fn assign_all(cloud: &SplatCloud, cb: &Codebook, g: Group) -> Vec<u32> {
    cloud
        .splats
        .par_iter()
        .map(|s| cb.nearest(g.get(s)).map(|(k, _)| k as u32))
        .collect::<Result<_, _>>()
        .expect("codebook dim matches group")
}

/// Gradient of the per-camera render MSE against a fixed target, given
/// per-splat colours; zero where a colour channel is clamped.
struct RenderView {
    weights: BlendWeights,
    target: Image,
    basis: Vec<[f64; 16]>,
}

impl RenderView {
    fn new(frame: &Frame, target: Image) -> Self {
        let basis = (0..frame.splat_count())
            .map(|i| frame.view_dir(i).map(sh_basis).unwrap_or([0.0; 16]))
            .collect();
        Self {
            weights: frame.blend_weights(),
            target,
            basis,
        }
    }

    fn colour(&self, i: usize, dc: &[f64], rest: &[f64], rest_per_channel: usize) -> [f64; 3] {
        let b = &self.basis[i];
        let mut out = [0.0; 3];
        for (ch, o) in out.iter_mut().enumerate() {
            let mut acc = b[0] * dc[ch];
            for j in 0..rest_per_channel {
                acc += b[j + 1] * rest[ch * 15 + j];
            }
            *o = acc + 0.5;
        }
        out
    }

    /// Returns the loss and dL/dcolour per splat.
    fn loss_grad(&self, colours: &[[f64; 3]], opts: &RenderOptions) -> (f64, Vec<[f64; 3]>) {
        let img = self.weights.render(colours, opts).expect("colour count matches");
        let count = img.data().len() as f64;
        let mut loss = 0.0;
        let up: Vec<f64> = img
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(a, b)| {
                let d = a - b;
                loss += d * d;
                2.0 * d / count
            })
            .collect();
        let up = Image::from_data(img.width(), img.height(), up).expect("same size");
        let mut g = self.weights.backward(&up).expect("same size");
        for (gi, c) in g.iter_mut().zip(colours) {
            for ch in 0..3 {
                if !(0.0..=1.0).contains(&c[ch]) {
                    gi[ch] = 0.0;
                }
            }
        }
        (loss / count, g)
    }

    /// Chain dL/dcolour into the DC and SH coefficient gradients of splat `i`.
    fn coefficient_grads(&self, i: usize, g: [f64; 3], rest_per_channel: usize) -> ([f64; 3], [f64; 45]) {
        let b = &self.basis[i];
        let mut dc = [0.0; 3];
        let mut rest = [0.0; 45];
        for ch in 0..3 {
            dc[ch] = b[0] * g[ch];
            for j in 0..rest_per_channel {
                rest[ch * 15 + j] = b[j + 1] * g[ch];
            }
        }
        (dc, rest)
    }
}

fn render_views(
    geometry: &SplatCloud,
    reference: &SplatCloud,
    cams: &[Camera],
    opts: &RenderOptions,
) -> Result<Vec<RenderView>, CompressError> {
    cams.iter()
        .map(|cam| {
            let target = Frame::new(reference, cam)?.render(opts);
            let frame = Frame::new(geometry, cam)?;
            Ok(RenderView::new(&frame, target))
        })
        .collect()
}

/// Mean render MSE of the dequantized cloud against the reference renders.
fn mean_render_mse(views: &[RenderView], colours: impl Fn(&RenderView) -> Vec<[f64; 3]>, opts: &RenderOptions) -> f64 {
    let total: f64 = views.iter().map(|v| v.loss_grad(&colours(v), opts).0).sum();
    total / views.len() as f64
}

fn hard_colours(view: &RenderView, q: &QuantizedCloud) -> Vec<[f64; 3]> {
    let rpc = sh_rest_per_channel(q.sh_degree);
    let (cb_c, cb_sh) = (q.codebook(Group::Colour), q.codebook(Group::Sh));
    (0..q.len())
        .map(|i| {
            let dc: Vec<f64> = cb_c
                .vector(q.indices(Group::Colour)[i] as usize)
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            let rest: Vec<f64> = cb_sh
                .vector(q.indices(Group::Sh)[i] as usize)
                .iter()
                .map(|&v| f64::from(v))
                .collect();
            view.colour(i, &dc, &rest, rpc)
        })
        .collect()
}

fn apply_update(cb: &mut Codebook, grad: &[f64], lr: f64) {
    let dim = cb.dim();
    for k in 0..cb.entries() {
        let g = &grad[k * dim..(k + 1) * dim];
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (z, gv) in cb.vector_mut(k).iter_mut().zip(g) {
            *z = (f64::from(*z) - lr * gv) as f32;
        }
    }
}

/// Per-batch attribute-loss gradient for one group.
///
/// The loss is `(1/B) Σ ‖t - t̃‖²`; its gradient reaches the selected entries
/// through the noise-substitution backward pass.
fn attribute_grad(
    cloud: &SplatCloud,
    batch: &[usize],
    cb: &Codebook,
    g: Group,
    seed: u64,
    step: usize,
) -> Result<Vec<f64>, CompressError> {
    let b = batch.len() as f64;
    let parts = batch
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut r = rng::stream(seed, &[TAG_NSVQ, g as u64, step as u64, ci as u64]);
            chunk
                .iter()
                .map(|&i| {
                    let t = g.get(&cloud.splats[i]);
                    let s = quantize_nsvq(t, cb, &mut r)?;
                    let t64: Vec<f64> = t.iter().map(|&v| f64::from(v)).collect();
                    let z: Vec<f64> = cb.vector(s.index).iter().map(|&v| f64::from(v)).collect();
                    let up: Vec<f64> = s.surrogate.iter().zip(&t64).map(|(a, b0)| 2.0 * (a - b0) / b).collect();
                    let (_, gz) = nsvq_backward(&t64, &z, &s.unit_noise, &up)?;
                    Ok((s.index, gz))
                })
                .collect::<Result<Vec<_>, CompressError>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let dim = cb.dim();
    let mut grad = vec![0.0; cb.entries() * dim];
    for (k, gz) in parts.into_iter().flatten() {
        for (a, v) in grad[k * dim..(k + 1) * dim].iter_mut().zip(gz) {
            *a += v;
        }
    }
    Ok(grad)
}

/// Render-loss gradient for the colour and SH codebooks through the
/// noise-substitution surrogate of every splat.
fn render_grad_nsvq(
    cloud: &SplatCloud,
    view: &RenderView,
    cb_c: &Codebook,
    cb_sh: &Codebook,
    opts: &RenderOptions,
    seed: u64,
    step: usize,
) -> Result<(f64, Vec<f64>, Vec<f64>), CompressError> {
    let rpc = sh_rest_per_channel(cloud.sh_degree());
    let n = cloud.len();
    let ids: Vec<usize> = (0..n).collect();
    type Sample = (Vec<f64>, Vec<f64>, crate::vq::NsvqSample, crate::vq::NsvqSample);
    let samples: Vec<Sample> = ids
        .par_chunks(CHUNK)
        .enumerate()
        .map(|(ci, chunk)| {
            let mut r = rng::stream(seed, &[TAG_RENDER, step as u64, ci as u64]);
            chunk
                .iter()
                .map(|&i| {
                    let s = &cloud.splats[i];
                    let c = quantize_nsvq(&s.color_dc, cb_c, &mut r)?;
                    let sh = quantize_nsvq(&s.sh_rest, cb_sh, &mut r)?;
                    let tc = s.color_dc.iter().map(|&v| f64::from(v)).collect();
                    let tsh = s.sh_rest.iter().map(|&v| f64::from(v)).collect();
                    Ok((tc, tsh, c, sh))
                })
                .collect::<Result<Vec<_>, CompressError>>()
        })
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();
    let colours: Vec<[f64; 3]> = samples
        .iter()
        .enumerate()
        .map(|(i, (_, _, c, sh))| view.colour(i, &c.surrogate, &sh.surrogate, rpc))
        .collect();
    let (loss, g) = view.loss_grad(&colours, opts);
    let mut grad_c = vec![0.0; cb_c.entries() * 3];
    let mut grad_sh = vec![0.0; cb_sh.entries() * 45];
    for (i, (tc, tsh, c, sh)) in samples.iter().enumerate() {
        if g[i] == [0.0; 3] {
            continue;
        }
        let (gdc, grest) = view.coefficient_grads(i, g[i], rpc);
        let zc: Vec<f64> = cb_c.vector(c.index).iter().map(|&v| f64::from(v)).collect();
        let (_, gz) = nsvq_backward(tc, &zc, &c.unit_noise, &gdc)?;
        for (a, v) in grad_c[c.index * 3..][..3].iter_mut().zip(gz) {
            *a += v;
        }
        if rpc > 0 {
            let zsh: Vec<f64> = cb_sh.vector(sh.index).iter().map(|&v| f64::from(v)).collect();
            let (_, gz) = nsvq_backward(tsh, &zsh, &sh.unit_noise, &grest)?;
            for (a, v) in grad_sh[sh.index * 45..][..45].iter_mut().zip(gz) {
                *a += v;
            }
        }
    }
    Ok((loss, grad_c, grad_sh))
}

/// Summary of one training run, per group in storage order.
#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainStats {
    pub kmeans_mse: [f64; 4],
    pub trained_mse: [f64; 4],
    pub replaced: [usize; 4],
    pub render_mse_start: Option<f64>,
    pub render_mse_end: Option<f64>,
}

/// K-means initialization followed by `vq_steps` NSVQ training steps.
pub fn train_codebooks(
    cloud: &SplatCloud,
    cfg: &CompressionConfig,
    cams: Option<&[Camera]>,
) -> Result<(QuantizedCloud, TrainStats), CompressError> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(CompressError::EmptyCloud);
    }
    let cams = match cams {
        Some(c) if !c.is_empty() => Some(c),
        _ if cfg.render_loss => return Err(CompressError::MissingCameras),
        _ => None,
    };
    let deg = cloud.sh_degree();
    let n = cloud.len();
    let mut stats = TrainStats::default();

    let mut codebooks: Vec<Codebook> = Group::ALL
        .iter()
        .map(|&g| {
            let entries = cfg.effective_entries(g, deg);
            if entries == 1 {
                return Ok(Codebook::zeros(1, g.dim())?);
            }
            let data = group_data(cloud, g);
            let mut r = rng::stream(cfg.seed, &[TAG_KMEANS, g as u64]);
            let km = kmeans_init(&data, g.dim(), entries, &mut r, &cfg.kmeans_options())?;
            info!(
                "k-means {g}: {} entries, {} iterations, converged {}",
                entries, km.iterations, km.converged
            );
            Ok(km.codebook)
        })
        .collect::<Result<_, CompressError>>()?;

    let snapshot = |cbs: &[Codebook]| -> Result<QuantizedCloud, CompressError> {
        let indices = Group::ALL.map(|g| assign_all(cloud, &cbs[g.index()], g));
        QuantizedCloud::new(
            cloud.splats.iter().map(|s| s.position).collect(),
            cloud.splats.iter().map(|s| s.opacity).collect(),
            indices,
            [cbs[0].clone(), cbs[1].clone(), cbs[2].clone(), cbs[3].clone()],
            deg,
        )
    };
    let init = snapshot(&codebooks)?;
    stats.kmeans_mse = attribute_mse(cloud, &init)?;
    if cfg.vq_steps == 0 {
        stats.trained_mse = stats.kmeans_mse;
        return Ok((init, stats));
    }

    let opts = RenderOptions {
        background: cfg.background,
    };
    let views = match cams {
        Some(c) if cfg.render_loss => Some(render_views(cloud, cloud, c, &opts)?),
        _ => None,
    };
    if let Some(v) = &views {
        stats.render_mse_start = Some(mean_render_mse(v, |view| hard_colours(view, &init), &opts));
    }

    let trainable: Vec<Group> = Group::ALL
        .into_iter()
        .filter(|&g| codebooks[g.index()].entries() > 1)
        .collect();
    for cb in &codebooks {
        cb.reset_usage();
    }
    let batch_size = cfg.batch_size.min(n);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = n;
    let mut epoch = 0u64;
    for step in 0..cfg.vq_steps {
        if cursor + batch_size > n {
            order = (0..n).collect();
            order.shuffle(&mut rng::stream(cfg.seed, &[TAG_SHUFFLE, epoch]));
            epoch += 1;
            cursor = 0;
        }
        let batch = &order[cursor..cursor + batch_size];
        cursor += batch_size;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; 4];
        for &g in &trainable {
            grads[g.index()] = Some(attribute_grad(cloud, batch, &codebooks[g.index()], g, cfg.seed, step)?);
        }
        let mut render = None;
        if let Some(v) = &views {
            let view = &v[step % v.len()];
            render = Some(render_grad_nsvq(
                cloud,
                view,
                &codebooks[Group::Colour.index()],
                &codebooks[Group::Sh.index()],
                &opts,
                cfg.seed,
                step,
            )?);
        }
        for &g in &trainable {
            let grad = grads[g.index()].as_ref().expect("trainable group has a gradient");
            apply_update(&mut codebooks[g.index()], grad, cfg.lr_codebook);
        }
        if let Some((_, gc, gsh)) = &render {
            apply_update(&mut codebooks[Group::Colour.index()], gc, cfg.lr_render);
            if codebooks[Group::Sh.index()].entries() > 1 {
                apply_update(&mut codebooks[Group::Sh.index()], gsh, cfg.lr_render);
            }
        }
        if cfg.replace_period > 0 && (step + 1) % cfg.replace_period == 0 {
            for &g in &trainable {
                let mut r = rng::stream(cfg.seed, &[TAG_REPLACE, g as u64, step as u64]);
                let k = codebooks[g.index()].replace_inactive_with_jitter(
                    cfg.replace_threshold,
                    cfg.replace_jitter,
                    &mut r,
                );
                stats.replaced[g.index()] += k;
                if k > 0 {
                    info!("step {}: replaced {k} inactive {g} entries", step + 1);
                }
            }
        }
    }

    let q = snapshot(&codebooks)?;
    stats.trained_mse = attribute_mse(cloud, &q)?;
    if let Some(v) = &views {
        stats.render_mse_end = Some(mean_render_mse(v, |view| hard_colours(view, &q), &opts));
    }
    Ok((q, stats))
}

/// Frozen-assignment fine-tuning: one closed-form Lloyd step per entry, then
/// `finetune_steps` full-batch gradient steps on the hard-quantized loss.
///
/// With `render_loss` on and cameras given, the colour/SH polish minimizes
/// the render MSE of the dequantized cloud against renders of `cloud`.
/// Indices never change.
pub fn finetune_frozen(
    q: &QuantizedCloud,
    cloud: &SplatCloud,
    cfg: &CompressionConfig,
    cams: Option<&[Camera]>,
) -> Result<QuantizedCloud, CompressError> {
    cfg.validate()?;
    if cloud.len() != q.len() {
        return Err(CompressError::CountMismatch {
            expected: q.len(),
            got: cloud.len(),
        });
    }
    let mut out = q.clone();
    let n = q.len();
    if n == 0 {
        return Ok(out);
    }
    for g in Group::ALL {
        let cb = &mut out.codebooks[g.index()];
        let dim = g.dim();
        let idx = &q.indices[g.index()];
        let mut sums = vec![0.0f64; cb.entries() * dim];
        let mut counts = vec![0usize; cb.entries()];
        for (s, &k) in cloud.splats.iter().zip(idx) {
            counts[k as usize] += 1;
            for (a, &v) in sums[k as usize * dim..][..dim].iter_mut().zip(g.get(s)) {
                *a += f64::from(v);
            }
        }
        let means: Vec<Option<Vec<f64>>> = (0..cb.entries())
            .map(|k| (counts[k] > 0).then(|| sums[k * dim..][..dim].iter().map(|s| s / counts[k] as f64).collect()))
            .collect();
        for (k, m) in means.iter().enumerate() {
            if let Some(m) = m {
                for (z, v) in cb.vector_mut(k).iter_mut().zip(m) {
                    *z = *v as f32;
                }
            }
        }
        let render_polish =
            cfg.render_loss && cams.is_some_and(|c| !c.is_empty()) && matches!(g, Group::Colour | Group::Sh);
        if render_polish {
            continue;
        }
        // ∂/∂z (1/N) Σ ‖t - z‖² over the frozen assignment
        for _ in 0..cfg.finetune_steps {
            let mut grad = vec![0.0; cb.entries() * dim];
            for (k, m) in means.iter().enumerate() {
                if let Some(m) = m {
                    let z = cb.vector(k);
                    for j in 0..dim {
                        grad[k * dim + j] = 2.0 * counts[k] as f64 / n as f64 * (f64::from(z[j]) - m[j]);
                    }
                }
            }
            apply_update(cb, &grad, cfg.lr_codebook);
        }
    }

    if let Some(cams) = cams.filter(|c| cfg.render_loss && !c.is_empty()) {
        let opts = RenderOptions {
            background: cfg.background,
        };
        let geometry = dequantize(&out)?;
        let views = render_views(&geometry, cloud, cams, &opts)?;
        let rpc = sh_rest_per_channel(q.sh_degree);
        for step in 0..cfg.finetune_steps {
            let view = &views[step % views.len()];
            let colours = hard_colours(view, &out);
            let (_, g) = view.loss_grad(&colours, &opts);
            let mut grad_c = vec![0.0; out.codebook(Group::Colour).entries() * 3];
            let mut grad_sh = vec![0.0; out.codebook(Group::Sh).entries() * 45];
            for i in 0..n {
                if g[i] == [0.0; 3] {
                    continue;
                }
                let (gdc, grest) = view.coefficient_grads(i, g[i], rpc);
                let kc = out.indices(Group::Colour)[i] as usize;
                for (a, v) in grad_c[kc * 3..][..3].iter_mut().zip(gdc) {
                    *a += v;
                }
                let ksh = out.indices(Group::Sh)[i] as usize;
                for (a, v) in grad_sh[ksh * 45..][..45].iter_mut().zip(grest) {
                    *a += v;
                }
            }
            apply_update(&mut out.codebooks[Group::Colour.index()], &grad_c, cfg.lr_render);
            if rpc > 0 {
                apply_update(&mut out.codebooks[Group::Sh.index()], &grad_sh, cfg.lr_render);
            }
        }
    }
    Ok(out)
}

/// Usage of one codebook after compression.
#[derive(Debug, Clone, Serialize)]
pub struct GroupReport {
    pub group: Group,
    pub entries: usize,
    pub bits: u32,
    pub active_fraction: f64,
    /// `histogram[b]` counts entries used by `n` splats with
    /// `floor(log2(n)) + 1 == b`; bucket 0 holds unused entries.
    pub usage_histogram: Vec<u64>,
    pub kmeans_mse: f64,
    pub trained_mse: f64,
    pub final_mse: f64,
    pub replaced: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompressReport {
    pub input_splats: usize,
    pub pruned_splats: usize,
    pub output_splats: usize,
    pub groups: Vec<GroupReport>,
    pub render_mse_start: Option<f64>,
    pub render_mse_end: Option<f64>,
    pub render_mse_final: Option<f64>,
}

fn usage_histogram(counts: &[u64]) -> Vec<u64> {
    let mut hist = vec![0u64; 1];
    for &c in counts {
        let b = if c == 0 {
            0
        } else {
            (u64::BITS - c.leading_zeros()) as usize
        };
        if hist.len() <= b {
            hist.resize(b + 1, 0);
        }
        hist[b] += 1;
    }
    hist
}

/// Prune, train and fine-tune. Returns the quantized cloud, the pruned cloud
/// it approximates, and a report.
pub fn compress(
    cloud: &SplatCloud,
    cfg: &CompressionConfig,
    cams: Option<&[Camera]>,
) -> Result<(QuantizedCloud, SplatCloud, CompressReport), CompressError> {
    cfg.validate()?;
    if cloud.is_empty() {
        return Err(CompressError::EmptyCloud);
    }
    if cfg.render_loss && cams.is_none_or(|c| c.is_empty()) {
        return Err(CompressError::MissingCameras);
    }
    let pruned = prune(cloud, cfg, cfg.prune_steps);
    if pruned.is_empty() {
        return Err(CompressError::EmptyCloud);
    }
    let (trained, stats) = train_codebooks(&pruned, cfg, cams)?;
    let q = finetune_frozen(&trained, &pruned, cfg, cams)?;
    let final_mse = attribute_mse(&pruned, &q)?;

    let render_mse_final = match cams {
        Some(c) if cfg.render_loss => {
            let opts = RenderOptions {
                background: cfg.background,
            };
            let views = render_views(&dequantize(&q)?, &pruned, c, &opts)?;
            Some(mean_render_mse(&views, |v| hard_colours(v, &q), &opts))
        }
        _ => None,
    };
    let groups = Group::ALL
        .iter()
        .map(|&g| {
            let counts = q.assignment_counts(g);
            GroupReport {
                group: g,
                entries: q.codebook(g).entries(),
                bits: index_bits(q.codebook(g).entries()),
                active_fraction: counts.iter().filter(|&&c| c > 0).count() as f64 / counts.len() as f64,
                usage_histogram: usage_histogram(&counts),
                kmeans_mse: stats.kmeans_mse[g.index()],
                trained_mse: stats.trained_mse[g.index()],
                final_mse: final_mse[g.index()],
                replaced: stats.replaced[g.index()],
            }
        })
        .collect();
    let report = CompressReport {
        input_splats: cloud.len(),
        pruned_splats: cloud.len() - pruned.len(),
        output_splats: q.len(),
        groups,
        render_mse_start: stats.render_mse_start,
        render_mse_end: stats.render_mse_end,
        render_mse_final,
    };
    Ok((q, pruned, report))
}
