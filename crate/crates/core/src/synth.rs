//! Synthetic single-category dataset: a flat-shaded box seen from discrete yaws.
//!
//! Each face has its own base color, so which faces are visible (and where)
//! encodes the orientation, the same cue real part-level features carry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clustering::FeatureGrid;
use crate::error::{Error, Result};
use crate::io::image::rgb_to_tensor;
use crate::tensor::{derive_seed, Tensor};

pub const FACES: usize = 6;
/// Simulated feature width: outward normal (3), background (1), appearance (3).
pub const FEATURE_CHANNELS: usize = 7;
const LABELS: usize = FACES + 1;
/// Weight of the color channels relative to the geometric ones.
const APPEARANCE_WEIGHT: f64 = 0.25;
pub const BACKGROUND: u8 = FACES as u8;

/// Outward normals, in face order `+z, -z, +x, -x, +y, -y`.
const NORMALS: [[f64; 3]; FACES] = [
    [0.0, 0.0, 1.0],
    [0.0, 0.0, -1.0],
    [1.0, 0.0, 0.0],
    [-1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, -1.0, 0.0],
];

/// Base colors in `[0, 1]`; the last entry is the background.
pub const PALETTE: [[f64; 3]; FACES + 1] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.35, 0.85],
    [0.20, 0.75, 0.30],
    [0.90, 0.80, 0.20],
    [0.80, 0.80, 0.85],
    [0.60, 0.30, 0.70],
    [0.10, 0.10, 0.12],
];

/// Box half-extents along x, y, z.
const HALF: [f64; 3] = [0.5, 0.225, 0.275];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub yaw_bins: usize,
    pub samples_per_bin: usize,
    pub image_size: usize,
    pub patch_size: usize,
    /// Maximum translation per axis, in pixels.
    pub translation_px: f64,
    /// Maximum relative scale change.
    pub scale_jitter: f64,
    /// Maximum per-channel color offset, in `[0, 1]` color units.
    pub color_jitter: f64,
    /// Standard deviation of the noise added to simulated features.
    pub feature_noise: f64,
    /// Camera elevation above the ground plane.
    pub elevation_deg: f64,
    /// Pixels per unit length at scale 1.
    pub base_scale: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            yaw_bins: 8,
            samples_per_bin: 200,
            image_size: 32,
            patch_size: 4,
            translation_px: 2.0,
            scale_jitter: 0.1,
            color_jitter: 0.06,
            feature_noise: 0.05,
            elevation_deg: 25.0,
            base_scale: 0.65,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn len(&self) -> usize {
        self.yaw_bins * self.samples_per_bin
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.yaw_bins < 2 {
            return Err(Error::invalid("yaw_bins must be at least 2"));
        }
        if self.samples_per_bin == 0 {
            return Err(Error::invalid("samples_per_bin must be positive"));
        }
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::invalid(format!(
                "image_size {} is not a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        let nonneg = [
            ("translation_px", self.translation_px),
            ("scale_jitter", self.scale_jitter),
            ("color_jitter", self.color_jitter),
            ("feature_noise", self.feature_noise),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        if self.scale_jitter >= 1.0 {
            return Err(Error::invalid("scale_jitter must be below 1"));
        }
        if !(self.base_scale > 0.0 && self.base_scale.is_finite()) {
            return Err(Error::invalid("base_scale must be positive"));
        }
        if !(0.0..90.0).contains(&self.elevation_deg) {
            return Err(Error::invalid("elevation_deg must lie in [0, 90)"));
        }

        // Farthest projected corner over every rendered yaw, in pixels at scale 1.
        let half = self.image_size as f64 / 2.0;
        let extent = (0..self.yaw_bins)
            .map(|b| {
                let view = View {
                    yaw_deg: self.yaw_degrees(b),
                    elevation_deg: self.elevation_deg,
                    scale: 1.0,
                    dx: 0.0,
                    dy: 0.0,
                };
                box_corners()
                    .iter()
                    .map(|&c| {
                        let p = project(&view, c);
                        p[0].abs().max(p[1].abs())
                    })
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
            * self.base_scale
            * self.image_size as f64;
        // Pixel centers sit half a pixel inside the frame edge.
        let limit = half - 0.5;
        if extent >= limit {
            return Err(Error::invalid(format!(
                "base_scale {} renders the object larger than the frame",
                self.base_scale
            )));
        }
        if extent * (1.0 + self.scale_jitter) >= limit {
            return Err(Error::invalid(format!(
                "scale_jitter {} pushes the object off-frame",
                self.scale_jitter
            )));
        }
        if extent * (1.0 + self.scale_jitter) + self.translation_px >= limit {
            return Err(Error::invalid(format!(
                "translation_px {} pushes the object off-frame",
                self.translation_px
            )));
        }
        Ok(())
    }

    pub fn yaw_degrees(&self, bin: usize) -> f64 {
        360.0 * bin as f64 / self.yaw_bins as f64
    }
}

/// Placement of one rendered object.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub yaw_deg: f64,
    pub elevation_deg: f64,
    /// Pixels per unit length.
    pub scale: f64,
    pub dx: f64,
    pub dy: f64,
}

#[derive(Clone, Debug)]
pub struct Raster {
    pub size: usize,
    /// Face index per pixel, [`BACKGROUND`] where empty, row-major.
    pub face: Vec<u8>,
    pub visible: Vec<usize>,
}

fn project(view: &View, p: [f64; 3]) -> [f64; 3] {
    let (sy, cy) = view.yaw_deg.to_radians().sin_cos();
    let (se, ce) = view.elevation_deg.to_radians().sin_cos();
    let x = p[0] * cy + p[2] * sy;
    let z = -p[0] * sy + p[2] * cy;
    let y2 = p[1] * ce - z * se;
    let z2 = p[1] * se + z * ce;
    [x, y2, z2]
}

fn box_corners() -> Vec<[f64; 3]> {
    (0..8)
        .map(|i| [0, 1, 2].map(|a| if i >> a & 1 == 1 { HALF[a] } else { -HALF[a] }))
        .collect()
}

fn face_corners(f: usize) -> [[f64; 3]; 4] {
    let n = NORMALS[f];
    let axis = n.iter().position(|v| *v != 0.0).unwrap();
    let (a, b) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let mut out = [[0.0; 3]; 4];
    let signs = [(-1.0, -1.0), (1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)];
    for (corner, (sa, sb)) in out.iter_mut().zip(signs) {
        corner[axis] = n[axis] * HALF[axis];
        corner[a] = sa * HALF[a];
        corner[b] = sb * HALF[b];
    }
    out
}

fn inside(quad: &[[f64; 2]; 4], x: f64, y: f64) -> bool {
    let mut pos = false;
    let mut neg = false;
    for i in 0..4 {
        let [x0, y0] = quad[i];
        let [x1, y1] = quad[(i + 1) % 4];
        let cross = (x1 - x0) * (y - y0) - (y1 - y0) * (x - x0);
        pos |= cross > 0.0;
        neg |= cross < 0.0;
    }
    !(pos && neg)
}

/// Rasterizes the box: back faces culled, remaining faces painted far to near.
pub fn rasterize(view: &View, size: usize) -> Raster {
    let center = size as f64 / 2.0;
    let mut faces: Vec<(usize, f64, [[f64; 2]; 4])> = Vec::new();
    for f in 0..FACES {
        let normal = project(view, NORMALS[f]);
        if normal[2] <= 1e-9 {
            continue;
        }
        let corners = face_corners(f).map(|c| project(view, c));
        let depth = corners.iter().map(|c| c[2]).sum::<f64>() / 4.0;
        let quad = corners.map(|c| {
            [
                center + view.dx + c[0] * view.scale,
                center + view.dy - c[1] * view.scale,
            ]
        });
        faces.push((f, depth, quad));
    }
    faces.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));

    let mut face = vec![BACKGROUND; size * size];
    for &(f, _, ref quad) in &faces {
        for py in 0..size {
            for px in 0..size {
                if inside(quad, px as f64 + 0.5, py as f64 + 0.5) {
                    face[py * size + px] = f as u8;
                }
            }
        }
    }
    let mut visible: Vec<usize> = faces.iter().map(|f| f.0).collect();
    visible.sort_unstable();
    Raster {
        size,
        face,
        visible,
    }
}

impl Raster {
    /// Per patch, the fraction of pixels covered by each face and by background.
    pub fn coverage(&self, patch: usize) -> Vec<[f64; LABELS]> {
        coverage_of(&self.face, self.size, patch)
    }

    /// Patches at least half covered by the object.
    pub fn patch_mask(&self, patch: usize) -> Vec<bool> {
        self.coverage(patch)
            .iter()
            .map(|c| c[FACES] <= 0.5)
            .collect()
    }
}

fn coverage_of(labels: &[u8], size: usize, patch: usize) -> Vec<[f64; LABELS]> {
    let g = size / patch;
    let norm = (patch * patch) as f64;
    let mut out = vec![[0.0; LABELS]; g * g];
    for py in 0..size {
        for px in 0..size {
            let cell = (py / patch) * g + px / patch;
            out[cell][labels[py * size + px] as usize] += 1.0 / norm;
        }
    }
    out
}

/// Feature of one pixel: the outward normal of its face (so opposite faces
/// get opposite codes, like part features telling front from back), a
/// background indicator, and weak color channels carrying appearance.
fn pixel_code(label: u8, rgb: [f64; 3]) -> [f64; FEATURE_CHANNELS] {
    let mut code = [0.0; FEATURE_CHANNELS];
    match NORMALS.get(label as usize) {
        Some(n) => code[..3].copy_from_slice(n),
        None => code[3] = 1.0,
    }
    for c in 0..3 {
        code[4 + c] = APPEARANCE_WEIGHT * (rgb[c] - 0.5);
    }
    code
}

/// Patch-averaged pixel codes, with optional additive Gaussian noise.
fn patch_features(
    id: &str,
    labels: &[u8],
    rgb: impl Fn(usize) -> [f64; 3],
    size: usize,
    patch: usize,
    noise: Option<(&Normal<f64>, &mut ChaCha8Rng)>,
) -> Result<FeatureGrid> {
    let g = size / patch;
    let norm = (patch * patch) as f64;
    let mut acc = vec![[0.0f64; FEATURE_CHANNELS]; g * g];
    for py in 0..size {
        for px in 0..size {
            let i = py * size + px;
            let cell = &mut acc[(py / patch) * g + px / patch];
            for (a, v) in cell.iter_mut().zip(pixel_code(labels[i], rgb(i))) {
                *a += v / norm;
            }
        }
    }
    let mut data: Vec<f32> = acc.iter().flat_map(|t| t.map(|v| v as f32)).collect();
    if let Some((dist, rng)) = noise {
        for v in &mut data {
            *v += dist.sample(rng) as f32;
        }
    }
    FeatureGrid::new(id, g, g, FEATURE_CHANNELS, patch, data)
}

/// One rendered sample with its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub image_id: String,
    pub yaw_bin: usize,
    pub view: View,
    /// 8-bit RGB, row-major, interleaved.
    pub pixels: Vec<u8>,
    pub features: FeatureGrid,
    /// Ground-truth patch mask (object coverage at least one half).
    pub mask: Vec<bool>,
    pub visible_faces: Vec<usize>,
}

impl SyntheticSample {
    /// Image as `[3, H, W]` in `[-1, 1]`.
    pub fn image(&self, size: usize) -> Tensor<f32> {
        rgb_to_tensor(&self.pixels, size, size)
    }
}

pub fn sample_id(index: usize) -> String {
    format!("img_{index:05}")
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Renders sample `index`; bins cycle fastest so every prefix is balanced.
pub fn render_sample(spec: &SyntheticSpec, index: usize) -> Result<SyntheticSample> {
    let yaw_bin = index % spec.yaw_bins;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[index as u64]));
    let sym = |r: f64, rng: &mut ChaCha8Rng| {
        if r > 0.0 {
            rng.random_range(-r..=r)
        } else {
            0.0
        }
    };
    let scale_factor = 1.0 + sym(spec.scale_jitter, &mut rng);
    let view = View {
        yaw_deg: spec.yaw_degrees(yaw_bin),
        elevation_deg: spec.elevation_deg,
        scale: spec.base_scale * spec.image_size as f64 * scale_factor,
        dx: sym(spec.translation_px, &mut rng),
        dy: sym(spec.translation_px, &mut rng),
    };
    let mut colors = PALETTE;
    for color in colors.iter_mut().take(FACES) {
        for ch in color.iter_mut() {
            *ch += sym(spec.color_jitter, &mut rng);
        }
    }
    render_view(spec, sample_id(index), yaw_bin, view, &colors, rng.random())
}

/// Renders an explicit placement and face coloring; `noise_seed` drives the
/// feature noise.
pub fn render_view(
    spec: &SyntheticSpec,
    image_id: String,
    yaw_bin: usize,
    view: View,
    colors: &[[f64; 3]; FACES + 1],
    noise_seed: u64,
) -> Result<SyntheticSample> {
    let size = spec.image_size;
    let raster = rasterize(&view, size);
    let pixels: Vec<u8> = raster
        .face
        .iter()
        .flat_map(|&f| colors[f as usize].map(quantize))
        .collect();
    let dist = Normal::new(0.0, spec.feature_noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let features = patch_features(
        &image_id,
        &raster.face,
        |i| [0, 1, 2].map(|c| pixels[3 * i + c] as f64 / 255.0),
        size,
        spec.patch_size,
        Some((&dist, &mut rng)),
    )?;
    Ok(SyntheticSample {
        image_id,
        yaw_bin,
        view,
        pixels,
        features,
        mask: raster.patch_mask(spec.patch_size),
        visible_faces: raster.visible,
    })
}

pub fn generate(spec: &SyntheticSpec) -> Result<Vec<SyntheticSample>> {
    spec.validate()?;
    (0..spec.len()).map(|i| render_sample(spec, i)).collect()
}

/// Simulated features for an arbitrary image: every pixel is labeled with the
/// nearest palette entry and patches record label coverage. This lets
/// generated images be classified with the same pose model as the data.
pub fn features_from_image(
    image: &Tensor<f32>,
    patch: usize,
    image_id: &str,
) -> Result<FeatureGrid> {
    let (h, w) = match image.shape() {
        [3, h, w] | [1, 3, h, w] => (*h, *w),
        s => {
            return Err(Error::shape(format!(
                "expected a [3, H, W] image, got {s:?}"
            )))
        }
    };
    if h != w || patch == 0 || h % patch != 0 {
        return Err(Error::shape(format!(
            "image {h}x{w} cannot be split into {patch}-pixel patches"
        )));
    }
    let d = image.data();
    let rgb = |i: usize| [0, 1, 2].map(|c| (d[c * h * w + i] as f64 + 1.0) / 2.0);
    let labels: Vec<u8> = (0..h * w)
        .map(|i| {
            let rgb = rgb(i);
            let mut best = (0u8, f64::INFINITY);
            for (j, p) in PALETTE.iter().enumerate() {
                let dist: f64 = rgb.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.1 {
                    best = (j as u8, dist);
                }
            }
            best.0
        })
        .collect();
    patch_features(image_id, &labels, rgb, h, patch, None)
}
