//! Depth-sorted alpha compositing and its colour-path gradient.
//!
//! Splats are binned into screen tiles using a bound derived from the alpha
//! cutoff, so every pixel visits exactly the splats an exhaustive scan would
//! blend, in the same order.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::splat::SplatCloud;

use super::{project, Camera, Image, RenderError, ALPHA_MAX, ALPHA_MIN, SINGULAR_DET, TRANSMITTANCE_MIN};

const TILE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderOptions {
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self { background: [0.0; 3] }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RenderStats {
    pub visible: usize,
    pub culled: usize,
    /// Splats skipped because their 2D covariance was (near) singular.
    pub singular: usize,
}

/// Per-row pixel counts, splat ids, blend weights and final transmittance.
type WeightRow = (Vec<u32>, Vec<u32>, Vec<f64>, Vec<f64>);

#[derive(Debug, Clone)]
struct Blob {
    id: u32,
    mean: [f64; 2],
    /// Inverse covariance as (a, b, c) of [[a, b], [b, c]].
    conic: [f64; 3],
    opacity: f64,
    /// Inclusive pixel bounds outside which alpha is below the cutoff.
    bbox: [usize; 4],
}

/// A cloud projected into one camera, ready for compositing with any colours.
#[derive(Debug, Clone)]
pub struct Frame {
    width: usize,
    height: usize,
    splat_count: usize,
    blobs: Vec<Blob>,
    tiles_x: usize,
    tile_lists: Vec<Vec<u32>>,
    colours: Vec<[f64; 3]>,
    view_dirs: Vec<Option<[f64; 3]>>,
    stats: RenderStats,
}

impl Frame {
    pub fn new(cloud: &SplatCloud, cam: &Camera) -> Result<Self, RenderError> {
        cam.validate()?;
        let (width, height) = (cam.width as usize, cam.height as usize);
        let n = cloud.len();
        let mut stats = RenderStats::default();
        let mut colours = vec![[0.0; 3]; n];
        let mut view_dirs = vec![None; n];

        let projected = cloud
            .splats
            .par_iter()
            .map(|s| s.activate().map(|a| project(&a, cam)))
            .collect::<Result<Vec<_>, _>>()?;

        let mut staged = Vec::new();
        for (i, p) in projected.into_iter().enumerate() {
            let Some(p) = p else {
                stats.culled += 1;
                continue;
            };
            colours[i] = p.colour;
            view_dirs[i] = Some(p.view_dir);
            let [[a, b], [_, c]] = p.cov;
            let det = a * c - b * b;
            if !(det >= SINGULAR_DET) {
                stats.singular += 1;
                continue;
            }
            stats.visible += 1;
            let level = (255.0 * p.opacity.min(ALPHA_MAX)).ln();
            if !(level > 0.0) {
                continue;
            }
            // alpha >= 1/255 needs (d^T Σ'^-1 d) <= 2 ln(255 o); bound by λ_max
            let lambda_max = 0.5 * (a + c) + (0.25 * (a - c) * (a - c) + b * b).sqrt();
            let radius = (2.0 * level * lambda_max).sqrt() * 1.0001 + 0.01;
            let x0 = (p.mean[0] - radius).ceil();
            let x1 = (p.mean[0] + radius).floor();
            let y0 = (p.mean[1] - radius).ceil();
            let y1 = (p.mean[1] + radius).floor();
            if x1 < 0.0 || y1 < 0.0 || x0 > (width - 1) as f64 || y0 > (height - 1) as f64 {
                continue;
            }
            let clampi = |v: f64, hi: usize| v.max(0.0).min(hi as f64) as usize;
            staged.push((
                p.depth,
                Blob {
                    id: i as u32,
                    mean: p.mean,
                    conic: [c / det, -b / det, a / det],
                    opacity: p.opacity,
                    bbox: [
                        clampi(x0, width - 1),
                        clampi(y0, height - 1),
                        clampi(x1, width - 1),
                        clampi(y1, height - 1),
                    ],
                },
            ));
        }
        // stable: equal depths keep splat order
        staged.sort_by(|a, b| a.0.total_cmp(&b.0));
        let blobs: Vec<Blob> = staged.into_iter().map(|(_, b)| b).collect();

        let tiles_x = width.div_ceil(TILE);
        let tiles_y = height.div_ceil(TILE);
        let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
        for (slot, blob) in blobs.iter().enumerate() {
            let [x0, y0, x1, y1] = blob.bbox;
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    tile_lists[ty * tiles_x + tx].push(slot as u32);
                }
            }
        }

        Ok(Self {
            width,
            height,
            splat_count: n,
            blobs,
            tiles_x,
            tile_lists,
            colours,
            view_dirs,
            stats,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn stats(&self) -> RenderStats {
        self.stats
    }

    /// SH colours (unclamped) by splat index; zero for culled splats.
    pub fn sh_colours(&self) -> &[[f64; 3]] {
        &self.colours
    }

    /// Camera-to-splat direction by splat index; `None` when culled.
    pub fn view_dir(&self, splat: usize) -> Option<[f64; 3]> {
        self.view_dirs[splat]
    }

    pub fn splat_count(&self) -> usize {
        self.splat_count
    }

    /// Walk the blended splats of one pixel front to back, calling
    /// `f(splat_index, alpha, transmittance_before)`. Returns the final
    /// transmittance.
    fn composite_pixel(&self, x: usize, y: usize, mut f: impl FnMut(usize, f64, f64)) -> f64 {
        let list = &self.tile_lists[(y / TILE) * self.tiles_x + x / TILE];
        let (px, py) = (x as f64, y as f64);
        let mut t = 1.0;
        for &slot in list {
            let b = &self.blobs[slot as usize];
            if x < b.bbox[0] || x > b.bbox[2] || y < b.bbox[1] || y > b.bbox[3] {
                continue;
            }
            let dx = b.mean[0] - px;
            let dy = b.mean[1] - py;
            let power = -0.5 * (b.conic[0] * dx * dx + b.conic[2] * dy * dy) - b.conic[1] * dx * dy;
            if power > 0.0 {
                continue;
            }
            let alpha = (b.opacity * power.exp()).min(ALPHA_MAX);
            if alpha < ALPHA_MIN {
                continue;
            }
            let next = t * (1.0 - alpha);
            if next < TRANSMITTANCE_MIN {
                break;
            }
            f(b.id as usize, alpha, t);
            t = next;
        }
        t
    }

    fn check_colours(&self, colours: &[[f64; 3]]) -> Result<(), RenderError> {
        if colours.len() != self.splat_count {
            return Err(RenderError::ColourCount {
                expected: self.splat_count,
                got: colours.len(),
            });
        }
        Ok(())
    }

    /// Composite with the given per-splat colours, clamped to [0, 1].
    pub fn render_with(&self, colours: &[[f64; 3]], opts: &RenderOptions) -> Result<Image, RenderError> {
        self.check_colours(colours)?;
        let rows: Vec<Vec<f64>> = (0..self.height)
            .into_par_iter()
            .map(|y| {
                let mut row = Vec::with_capacity(self.width * 3);
                for x in 0..self.width {
                    let mut c = [0.0; 3];
                    let t = self.composite_pixel(x, y, |id, alpha, t| {
                        let w = alpha * t;
                        for ch in 0..3 {
                            c[ch] += colours[id][ch].clamp(0.0, 1.0) * w;
                        }
                    });
                    for ch in 0..3 {
                        row.push(c[ch] + t * opts.background[ch]);
                    }
                }
                row
            })
            .collect();
        Image::from_data(self.width, self.height, rows.concat())
    }

    pub fn render(&self, opts: &RenderOptions) -> Image {
        self.render_with(&self.colours, opts)
            .expect("frame colours match splat count")
    }

    /// Gradient of `Σ_p upstream(p) · C(p)` with respect to each splat's
    /// blended colour: `Σ_p upstream(p) · alpha_i(p) · T_i(p)`.
    pub fn colour_backward(&self, upstream: &Image) -> Result<Vec<[f64; 3]>, RenderError> {
        if upstream.width() != self.width || upstream.height() != self.height {
            return Err(RenderError::ImageSize {
                expected: self.width * self.height * 3,
                got: upstream.data().len(),
            });
        }
        let tiles_y = self.height.div_ceil(TILE);
        let partial: Vec<BTreeMap<usize, [f64; 3]>> = (0..self.tiles_x * tiles_y)
            .into_par_iter()
            .map(|tile| {
                let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
                let mut acc = BTreeMap::new();
                for y in ty * TILE..((ty + 1) * TILE).min(self.height) {
                    for x in tx * TILE..((tx + 1) * TILE).min(self.width) {
                        let g = upstream.get(x, y);
                        self.composite_pixel(x, y, |id, alpha, t| {
                            let e: &mut [f64; 3] = acc.entry(id).or_insert([0.0; 3]);
                            for ch in 0..3 {
                                e[ch] += g[ch] * alpha * t;
                            }
                        });
                    }
                }
                acc
            })
            .collect();
        let mut grads = vec![[0.0; 3]; self.splat_count];
        for tile in partial {
            for (id, g) in tile {
                for ch in 0..3 {
                    grads[id][ch] += g[ch];
                }
            }
        }
        Ok(grads)
    }

    /// Per-pixel blend weights `alpha_i · T_i`, for repeated compositing of
    /// the same geometry with changing colours.
    pub fn blend_weights(&self) -> BlendWeights {
        let rows: Vec<WeightRow> = (0..self.height)
            .into_par_iter()
            .map(|y| {
                let mut counts = Vec::with_capacity(self.width);
                let mut ids = Vec::new();
                let mut weights = Vec::new();
                let mut finals = Vec::with_capacity(self.width);
                for x in 0..self.width {
                    let before = ids.len();
                    let t = self.composite_pixel(x, y, |id, alpha, t| {
                        ids.push(id as u32);
                        weights.push(alpha * t);
                    });
                    counts.push((ids.len() - before) as u32);
                    finals.push(t);
                }
                (counts, ids, weights, finals)
            })
            .collect();
        let mut offsets = Vec::with_capacity(self.width * self.height + 1);
        offsets.push(0usize);
        let mut ids = Vec::new();
        let mut weights = Vec::new();
        let mut final_transmittance = Vec::with_capacity(self.width * self.height);
        for (counts, row_ids, row_weights, finals) in rows {
            for c in counts {
                offsets.push(offsets.last().unwrap() + c as usize);
            }
            ids.extend(row_ids);
            weights.extend(row_weights);
            final_transmittance.extend(finals);
        }
        BlendWeights {
            width: self.width,
            height: self.height,
            splat_count: self.splat_count,
            offsets,
            ids,
            weights,
            final_transmittance,
        }
    }
}

/// Sparse per-pixel compositing weights of one frame.
#[derive(Debug, Clone)]
pub struct BlendWeights {
    width: usize,
    height: usize,
    splat_count: usize,
    offsets: Vec<usize>,
    ids: Vec<u32>,
    weights: Vec<f64>,
    final_transmittance: Vec<f64>,
}

impl BlendWeights {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Accumulated weight of pixel `p` (row-major index): `1 - T_final`.
    pub fn coverage(&self, p: usize) -> f64 {
        self.weights[self.offsets[p]..self.offsets[p + 1]].iter().sum()
    }

    pub fn final_transmittance(&self, p: usize) -> f64 {
        self.final_transmittance[p]
    }

    pub fn render(&self, colours: &[[f64; 3]], opts: &RenderOptions) -> Result<Image, RenderError> {
        if colours.len() != self.splat_count {
            return Err(RenderError::ColourCount {
                expected: self.splat_count,
                got: colours.len(),
            });
        }
        let mut data = Vec::with_capacity(self.width * self.height * 3);
        for p in 0..self.width * self.height {
            let mut c = [0.0; 3];
            for k in self.offsets[p]..self.offsets[p + 1] {
                let col = colours[self.ids[k] as usize];
                for ch in 0..3 {
                    c[ch] += col[ch].clamp(0.0, 1.0) * self.weights[k];
                }
            }
            let t = self.final_transmittance[p];
            for ch in 0..3 {
                data.push(c[ch] + t * opts.background[ch]);
            }
        }
        Image::from_data(self.width, self.height, data)
    }

    /// Same contract as [`Frame::colour_backward`].
    pub fn backward(&self, upstream: &Image) -> Result<Vec<[f64; 3]>, RenderError> {
        if upstream.width() != self.width || upstream.height() != self.height {
            return Err(RenderError::ImageSize {
                expected: self.width * self.height * 3,
                got: upstream.data().len(),
            });
        }
        let up = upstream.data();
        let mut grads = vec![[0.0; 3]; self.splat_count];
        for p in 0..self.width * self.height {
            for k in self.offsets[p]..self.offsets[p + 1] {
                let g = &mut grads[self.ids[k] as usize];
                for ch in 0..3 {
                    g[ch] += up[3 * p + ch] * self.weights[k];
                }
            }
        }
        Ok(grads)
    }
}

/// Render a cloud with its SH colours.
pub fn render(cloud: &SplatCloud, cam: &Camera, opts: &RenderOptions) -> Result<(Image, RenderStats), RenderError> {
    let frame = Frame::new(cloud, cam)?;
    Ok((frame.render(opts), frame.stats()))
}

/// Gradient of `Σ_p upstream(p) · render(cloud)(p)` with respect to each
/// splat's blended colour.
pub fn render_colour_backward(
    cloud: &SplatCloud,
    cam: &Camera,
    upstream: &Image,
) -> Result<Vec<[f64; 3]>, RenderError> {
    Frame::new(cloud, cam)?.colour_backward(upstream)
}
