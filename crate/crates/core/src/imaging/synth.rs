//! Synthetic EM-like planes with exact ground truth.
//!
//! Each plane is a Voronoi tessellation of Poisson-disk seeds. Pixels within
//! half a membrane width of a cell boundary are membrane (label 0, dark);
//! interiors carry their cell index (bright). Membrane darkness fades along
//! a smooth random field so some boundary stretches are faint, and dark
//! clutter (dots and short strokes) is painted inside cells without touching
//! the labels. Gaussian noise and blur finish the image.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{GrayImage, Grid, LabelMap, Stack};
use crate::error::{Error, Result};
use crate::seed;

const MEMBRANE_MEAN: f64 = 0.25;
const INTERIOR_MEAN: f64 = 0.7;
/// Amplitude of the along-membrane fading field (unit variance before scaling).
const MEMBRANE_FADE: f64 = 0.15;
const FADE_FIELD_SIGMA: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub cell_count: usize,
    /// Full membrane thickness in pixels.
    pub membrane_width: f64,
    /// Standard deviation of additive pixel noise, applied before the blur.
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    /// Clutter objects per 1000 pixels.
    pub clutter_density: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            cell_count: 40,
            membrane_width: 2.0,
            noise_sigma: 0.2,
            blur_sigma: 1.0,
            clutter_density: 1.5,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.height < 32 || self.width < 32 {
            return bad(format!("synthetic planes must be at least 32x32, got {}x{}", self.height, self.width));
        }
        if !(self.membrane_width >= 1.0) {
            return bad(format!("membrane_width must be >= 1, got {}", self.membrane_width));
        }
        if self.cell_count == 0 {
            return bad("cell_count must be >= 1".into());
        }
        if !(self.noise_sigma >= 0.0 && self.blur_sigma >= 0.0 && self.clutter_density >= 0.0) {
            return bad("noise_sigma, blur_sigma and clutter_density must be >= 0".into());
        }
        Ok(())
    }
}

/// One generated plane plus the seed points that define its tessellation.
#[derive(Debug, Clone)]
pub struct SynthPlane {
    pub image: GrayImage,
    pub labels: LabelMap,
    /// Seed positions as `(row, col)`; cell `i` has label `i + 1`.
    pub seeds: Vec<(f64, f64)>,
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
}

/// Dart-throwing Poisson-disk sampling, shrinking the radius when the
/// plane saturates before `n` seeds fit.
fn poisson_seeds<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<Vec<(f64, f64)>> {
    let (h, w) = (cfg.height as f64, cfg.width as f64);
    let n = cfg.cell_count;
    let min_radius = 2.0 * cfg.membrane_width;
    let mut radius = 0.6 * (h * w / n as f64).sqrt();
    if n > 1 && radius < min_radius {
        return Err(Error::InvalidArgument(format!(
            "{n} cells do not fit a {}x{} plane with membrane width {}",
            cfg.height, cfg.width, cfg.membrane_width
        )));
    }
    loop {
        let mut seeds: Vec<(f64, f64)> = Vec::with_capacity(n);
        let mut attempts = 0;
        while seeds.len() < n && attempts < 200 * n {
            attempts += 1;
            let p = (rng.gen::<f64>() * h, rng.gen::<f64>() * w);
            if seeds.iter().all(|&s| dist2(s, p) >= radius * radius) {
                seeds.push(p);
            }
        }
        if seeds.len() == n {
            return Ok(seeds);
        }
        radius *= 0.9;
        if radius < min_radius {
            return Err(Error::InvalidArgument(format!(
                "could not place {n} cells at least {min_radius} px apart"
            )));
        }
    }
}

/// Separable Gaussian blur with edge replication.
pub(crate) fn gaussian_blur(img: &Grid<f64>, sigma: f64) -> Grid<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> =
        (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = img.dims();
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let horizontal = Grid::from_fn(h, w, |y, x| {
        kernel
            .iter()
            .enumerate()
            .map(|(j, k)| k * img.get(y, clampi(x as isize + j as isize - radius, w)))
            .sum::<f64>()
    });
    Grid::from_fn(h, w, |y, x| {
        kernel
            .iter()
            .enumerate()
            .map(|(j, k)| k * horizontal.get(clampi(y as isize + j as isize - radius, h), x))
            .sum::<f64>()
    })
}

/// Zero-mean, unit-variance smooth random field.
fn smooth_field<R: Rng>(h: usize, w: usize, sigma: f64, rng: &mut R) -> Grid<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let white = Grid::from_fn(h, w, |_, _| normal.sample(rng));
    let field = gaussian_blur(&white, sigma);
    let n = (h * w) as f64;
    let mean = field.data().iter().sum::<f64>() / n;
    let std = (field.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    field.map(|v| (v - mean) / std.max(1e-12))
}

fn paint_disc(img: &mut Grid<f64>, cy: f64, cx: f64, r: f64, value: f64) {
    let (h, w) = img.dims();
    let y0 = (cy - r).floor().max(0.0) as usize;
    let x0 = (cx - r).floor().max(0.0) as usize;
    let y1 = ((cy + r).ceil() as usize).min(h - 1);
    let x1 = ((cx + r).ceil() as usize).min(w - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            if dist2((y as f64, x as f64), (cy, cx)) <= r * r {
                img.set(y, x, value);
            }
        }
    }
}

/// Generates one plane.
pub fn synth_plane<R: Rng>(cfg: &SynthConfig, rng: &mut R) -> Result<SynthPlane> {
    cfg.validate()?;
    let seeds = poisson_seeds(cfg, rng)?;
    let (h, w) = (cfg.height, cfg.width);
    let half = cfg.membrane_width / 2.0;

    let labels = Grid::from_fn(h, w, |y, x| {
        let p = (y as f64, x as f64);
        let (a, da) = seeds
            .iter()
            .enumerate()
            .map(|(i, &s)| (i, dist2(p, s)))
            .fold((0, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
        // Distance from p to the bisector between seed a and seed b.
        let near_boundary = seeds.iter().enumerate().any(|(b, &sb)| {
            b != a && (dist2(p, sb) - da) / (2.0 * dist2(seeds[a], sb).sqrt()) <= half
        });
        if near_boundary {
            0
        } else {
            a as u32 + 1
        }
    });

    let interior: Vec<f64> =
        (0..seeds.len()).map(|_| INTERIOR_MEAN + rng.gen_range(-0.05..0.05)).collect();
    let fade = smooth_field(h, w, FADE_FIELD_SIGMA, rng);
    let mut image = Grid::from_fn(h, w, |y, x| match labels.get(y, x) {
        0 => (MEMBRANE_MEAN + MEMBRANE_FADE * fade.get(y, x)).clamp(0.05, 0.7),
        l => interior[l as usize - 1],
    });

    let clutter = (cfg.clutter_density * (h * w) as f64 / 1000.0).round() as usize;
    for i in 0..clutter {
        let value = MEMBRANE_MEAN + rng.gen_range(-0.05..0.1);
        let cy = rng.gen::<f64>() * h as f64;
        let cx = rng.gen::<f64>() * w as f64;
        if i % 2 == 0 {
            paint_disc(&mut image, cy, cx, rng.gen_range(1.0..2.5), value);
        } else {
            // A short straight stroke, membrane-like in width.
            let angle = rng.gen::<f64>() * std::f64::consts::PI;
            let len = rng.gen_range(4.0..9.0);
            let steps = (len * 2.0) as usize;
            for s in 0..=steps {
                let t = s as f64 / steps as f64 - 0.5;
                paint_disc(&mut image, cy + t * len * angle.sin(), cx + t * len * angle.cos(), half, value);
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for v in image.data_mut() {
            *v += normal.sample(rng);
        }
    }
    let image = gaussian_blur(&image, cfg.blur_sigma).map(|v| v.clamp(0.0, 1.0));
    Ok(SynthPlane { image, labels, seeds })
}

/// Generates `n_planes` planes; plane `i` draws from its own seeded stream.
pub fn synth_stack(cfg: &SynthConfig, n_planes: usize, seed_value: u64) -> Result<(Stack<f64>, Stack<u32>)> {
    if n_planes == 0 {
        return Err(Error::InvalidArgument("n_planes must be >= 1".into()));
    }
    let mut images = Vec::with_capacity(n_planes);
    let mut labels = Vec::with_capacity(n_planes);
    for i in 0..n_planes {
        let mut rng = seed::rng_for(seed_value, &format!("synth-plane-{i}"));
        let plane = synth_plane(cfg, &mut rng)?;
        images.push(plane.image);
        labels.push(plane.labels);
    }
    Ok((Stack::new(images)?, Stack::new(labels)?))
}
