//! Procedural retinal OCT B-scan phantoms.
//!
//! A phantom is a 64x64 grayscale image in `[0, 1]`, rows running from the
//! vitreous (top) down to the choroid. Layer boundaries are per-column
//! curves built from a two-term sinusoid plus a Gaussian foveal dip:
//!
//! ```text
//! base(x)       = top_row + a1 sin(2pi x/64 + p1) + a2 sin(4pi x/64 + p2)
//! ilm(x)        = base(x) + depth * exp(-(x - c)^2 / (2 w^2))   inner surface
//! opl(x)        = base(x) + inner_thickness                     inner/outer split
//! rpe_top(x)    = opl(x) + outer_thickness
//! rpe_bottom(x) = rpe_top(x) + rpe_thickness
//! ```
//!
//! Fluid lesions lift the neurosensory retina (`ilm`, `opl`, retina bottom)
//! by `lift(x)` and leave a dark gap above a still-visible RPE band.
//! Speckle is multiplicative log-normal with unit mean plus additive
//! Gaussian read noise.

use std::fmt;
use std::ops::RangeInclusive;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Rng, Tensor};

pub const IMAGE_SIZE: usize = 64;

const VITREOUS: f64 = 0.04;
const INNER_RETINA: f64 = 0.36;
const OUTER_RETINA: f64 = 0.26;
const RPE: f64 = 0.95;
const CHOROID_TOP: f64 = 0.30;
const CHOROID_BOTTOM: f64 = 0.10;
const FLUID: f64 = 0.06;

/// Rows that may hold the RPE band, augmentation shifts included.
pub const RPE_WINDOW: RangeInclusive<usize> = 22..=52;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Pathology {
    Normal,
    MacularHole,
    CystoidEdema,
    SubretinalFluid,
    Detachment,
}

impl Pathology {
    pub const ALL: [Pathology; 5] = [
        Pathology::Normal,
        Pathology::MacularHole,
        Pathology::CystoidEdema,
        Pathology::SubretinalFluid,
        Pathology::Detachment,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pathology::Normal => "normal",
            Pathology::MacularHole => "macular_hole",
            Pathology::CystoidEdema => "cystoid_edema",
            Pathology::SubretinalFluid => "subretinal_fluid",
            Pathology::Detachment => "detachment",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Pathology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pathology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pathology::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown pathology class `{s}`")))
    }
}

/// Lesion geometry, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub enum Lesion {
    None,
    /// Full-thickness gap over `width` columns centred on the fovea.
    MacularHole { width: f64 },
    /// `count` dark ellipses with horizontal semi-axes in `[min_radius, max_radius]`.
    Cysts { count: usize, min_radius: f64, max_radius: f64 },
    /// Parabolic dome of fluid under the fovea.
    SubretinalFluid { height: f64, width: f64 },
    /// Flat-topped lift of the retina over `width` columns.
    Detachment { lift: f64, width: f64 },
}

const DETACHMENT_RAMP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    pub top_row: f64,
    /// `(amplitude, phase)` at one and two cycles per image width.
    pub wave: [(f64, f64); 2],
    pub fovea_center: f64,
    pub fovea_depth: f64,
    pub fovea_width: f64,
    pub inner_thickness: f64,
    pub outer_thickness: f64,
    pub rpe_thickness: f64,
    pub speckle_sigma: f64,
    pub read_noise: f64,
    pub lesion: Lesion,
}

/// Integer row boundaries of one column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ColumnLayers {
    pub ilm: usize,
    pub opl: usize,
    /// First row below the neurosensory retina (start of fluid or RPE).
    pub retina_bottom: usize,
    pub rpe_top: usize,
    pub rpe_bottom: usize,
    /// Inside a macular hole.
    pub hole: bool,
}

/// An elliptical cyst: centre `(col, row)` and semi-axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cyst {
    pub col: f64,
    pub row: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Cyst {
    pub fn contains(&self, col: usize, row: usize) -> bool {
        let dx = (col as f64 - self.col) / self.rx;
        let dy = (row as f64 - self.row) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

/// Sampling ranges for the noise parameters of random phantoms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseBounds {
    pub speckle: (f64, f64),
    pub read_noise: (f64, f64),
}

impl Default for NoiseBounds {
    fn default() -> Self {
        NoiseBounds { speckle: (0.15, 0.25), read_noise: (0.01, 0.03) }
    }
}

impl NoiseBounds {
    pub fn validate(&self) -> Result<()> {
        let ok = |(lo, hi): (f64, f64)| lo >= 0.0 && lo <= hi && hi <= 1.0;
        if ok(self.speckle) && ok(self.read_noise) {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid noise bounds {self:?}")))
        }
    }
}

impl PhantomSpec {
    /// Noiseless normal retina with mid-range geometry.
    pub fn normal() -> Self {
        PhantomSpec {
            top_row: 20.0,
            wave: [(1.0, 0.3), (0.5, 1.1)],
            fovea_center: 32.0,
            fovea_depth: 4.0,
            fovea_width: 4.5,
            inner_thickness: 10.0,
            outer_thickness: 5.0,
            rpe_thickness: 3.5,
            speckle_sigma: 0.0,
            read_noise: 0.0,
            lesion: Lesion::None,
        }
    }

    /// Random geometry for `pathology`. Bounds:
    /// top row 17-22, wave amplitudes up to 1.5 and 0.8 px, fovea centre
    /// 29-35 with depth 3-5 and width 3.5-5.5, inner/outer/RPE thickness
    /// 9-12 / 4-6 / 3-4 px; hole width 6-12; 2-5 cysts of radius 2-3.5;
    /// fluid dome 3-6 px high and 14-24 wide; detachment lift 6-9 over 36-56
    /// columns.
    pub fn random(pathology: Pathology, noise: &NoiseBounds, rng: &mut Rng) -> Self {
        let tau = 2.0 * std::f64::consts::PI;
        let mut spec = PhantomSpec {
            top_row: rng.uniform_range(17.0, 22.0),
            wave: [
                (rng.uniform_range(0.0, 1.5), rng.uniform_range(0.0, tau)),
                (rng.uniform_range(0.0, 0.8), rng.uniform_range(0.0, tau)),
            ],
            fovea_center: rng.uniform_range(29.0, 35.0),
            fovea_depth: rng.uniform_range(3.0, 5.0),
            fovea_width: rng.uniform_range(3.5, 5.5),
            inner_thickness: rng.uniform_range(9.0, 12.0),
            outer_thickness: rng.uniform_range(4.0, 6.0),
            rpe_thickness: rng.uniform_range(3.0, 4.0),
            speckle_sigma: rng.uniform_range(noise.speckle.0, noise.speckle.1),
            read_noise: rng.uniform_range(noise.read_noise.0, noise.read_noise.1),
            lesion: Lesion::None,
        };
        spec.lesion = match pathology {
            Pathology::Normal => Lesion::None,
            Pathology::MacularHole => Lesion::MacularHole { width: rng.uniform_range(6.0, 12.0) },
            Pathology::CystoidEdema => Lesion::Cysts {
                count: rng.int_range(2, 5) as usize,
                min_radius: 2.0,
                max_radius: 3.5,
            },
            Pathology::SubretinalFluid => Lesion::SubretinalFluid {
                height: rng.uniform_range(3.0, 6.0),
                width: rng.uniform_range(14.0, 24.0),
            },
            Pathology::Detachment => Lesion::Detachment {
                lift: rng.uniform_range(6.0, 9.0),
                width: rng.uniform_range(36.0, 56.0),
            },
        };
        spec
    }

    pub fn pathology(&self) -> Pathology {
        match self.lesion {
            Lesion::None => Pathology::Normal,
            Lesion::MacularHole { .. } => Pathology::MacularHole,
            Lesion::Cysts { .. } => Pathology::CystoidEdema,
            Lesion::SubretinalFluid { .. } => Pathology::SubretinalFluid,
            Lesion::Detachment { .. } => Pathology::Detachment,
        }
    }

    fn base(&self, x: f64) -> f64 {
        let tau = 2.0 * std::f64::consts::PI;
        let n = IMAGE_SIZE as f64;
        let [(a1, p1), (a2, p2)] = self.wave;
        self.top_row + a1 * (tau * x / n + p1).sin() + a2 * (2.0 * tau * x / n + p2).sin()
    }

    fn dip(&self, x: f64) -> f64 {
        let d = x - self.fovea_center;
        self.fovea_depth * (-d * d / (2.0 * self.fovea_width * self.fovea_width)).exp()
    }

    /// Upward displacement of the neurosensory retina at column `x`.
    pub fn lift(&self, x: f64) -> f64 {
        let d = (x - self.fovea_center).abs();
        match self.lesion {
            Lesion::SubretinalFluid { height, width } => {
                let half = width / 2.0;
                height * (1.0 - (d / half).powi(2)).max(0.0)
            }
            Lesion::Detachment { lift, width } => {
                let half = width / 2.0;
                if d <= half - DETACHMENT_RAMP {
                    lift
                } else if d < half {
                    lift * (half - d) / DETACHMENT_RAMP
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    }

    /// Rounded layer boundaries for every column.
    pub fn layers(&self) -> Vec<ColumnLayers> {
        (0..IMAGE_SIZE)
            .map(|col| {
                let x = col as f64;
                let base = self.base(x);
                let lift = self.lift(x);
                let rpe_top = base + self.inner_thickness + self.outer_thickness;
                let clamp = |v: f64| v.round().max(0.0) as usize;
                let hole = match self.lesion {
                    Lesion::MacularHole { width } => (x - self.fovea_center).abs() <= width / 2.0,
                    _ => false,
                };
                ColumnLayers {
                    ilm: clamp(base + self.dip(x) - lift),
                    opl: clamp(base + self.inner_thickness - lift),
                    retina_bottom: clamp(rpe_top - lift),
                    rpe_top: clamp(rpe_top),
                    rpe_bottom: clamp(rpe_top + self.rpe_thickness),
                    hole,
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("inner_thickness", self.inner_thickness),
            ("outer_thickness", self.outer_thickness),
            ("rpe_thickness", self.rpe_thickness),
        ] {
            if !(v >= 1.0) {
                return bad(format!("{name} must be >= 1 px, got {v}"));
            }
        }
        if !(self.fovea_depth >= 0.0 && self.fovea_depth <= self.inner_thickness - 3.0) {
            return bad(format!(
                "fovea depth {} must leave at least 3 px of inner retina",
                self.fovea_depth
            ));
        }
        if !(self.fovea_width > 0.0) {
            return bad("fovea width must be positive".into());
        }
        if !(self.speckle_sigma >= 0.0 && self.read_noise >= 0.0) {
            return bad("noise levels must be non-negative".into());
        }
        for (col, l) in self.layers().iter().enumerate() {
            if l.ilm < 1 || l.rpe_bottom > IMAGE_SIZE - 1 {
                return bad(format!("layers leave the image at column {col}: {l:?}"));
            }
            if l.ilm >= l.opl || l.opl >= l.retina_bottom {
                return bad(format!("retina band collapses at column {col}: {l:?}"));
            }
        }
        match self.lesion {
            Lesion::None => {}
            Lesion::MacularHole { width } => {
                if !(1.0..=32.0).contains(&width) {
                    return bad(format!("hole width {width} outside [1, 32]"));
                }
            }
            Lesion::Cysts { count, min_radius, max_radius } => {
                // Cysts sit away from the foveal dip, where the band is full height.
                let band = self.inner_thickness + self.outer_thickness;
                if count == 0 || !(min_radius >= 1.0 && min_radius <= max_radius) {
                    return bad(format!("invalid cyst parameters {:?}", self.lesion));
                }
                if 2.0 * max_radius + 5.0 > band {
                    return bad(format!("cysts of radius {max_radius} do not fit a {band:.1} px band"));
                }
            }
            Lesion::SubretinalFluid { height, width } => {
                if !(height >= 1.0 && width >= 2.0) {
                    return bad(format!("invalid fluid dome {:?}", self.lesion));
                }
            }
            Lesion::Detachment { lift, width } => {
                if !(lift >= 1.0 && width > 2.0 * DETACHMENT_RAMP) {
                    return bad(format!("invalid detachment {:?}", self.lesion));
                }
            }
        }
        Ok(())
    }
}

fn choroid(row: usize, rpe_bottom: usize) -> f64 {
    let depth = (row - rpe_bottom) as f64;
    let span = (IMAGE_SIZE - rpe_bottom).max(1) as f64;
    CHOROID_TOP + (CHOROID_BOTTOM - CHOROID_TOP) * depth / span
}

/// Places cysts inside the retina band, rejecting any that would touch a
/// boundary or another cyst.
fn place_cysts(spec: &PhantomSpec, layers: &[ColumnLayers], rng: &mut Rng) -> Vec<Cyst> {
    let Lesion::Cysts { count, min_radius, max_radius } = spec.lesion else {
        return Vec::new();
    };
    let mut cysts: Vec<Cyst> = Vec::with_capacity(count);
    let mut attempts = 0;
    while cysts.len() < count && attempts < 500 {
        attempts += 1;
        let rx = rng.uniform_range(min_radius, max_radius);
        let ry = rx * rng.uniform_range(0.75, 1.0);
        let col = spec.fovea_center + rng.uniform_range(-18.0, 18.0);
        let lo_col = (col - rx).floor().max(0.0) as usize;
        let hi_col = ((col + rx).ceil() as usize).min(IMAGE_SIZE - 1);
        let top = (lo_col..=hi_col).map(|c| layers[c].ilm).max().unwrap_or(0) as f64 + 2.0 + ry;
        let bottom = (lo_col..=hi_col).map(|c| layers[c].retina_bottom).min().unwrap_or(0) as f64 - 3.0 - ry;
        if top > bottom || lo_col == 0 || hi_col == IMAGE_SIZE - 1 {
            continue;
        }
        let row = rng.uniform_range(top, bottom);
        let cyst = Cyst { col, row, rx, ry };
        let clear = cysts.iter().all(|o| {
            let dx = (o.col - col) / (o.rx + rx + 1.5);
            let dy = (o.row - row) / (o.ry + ry + 1.5);
            dx * dx + dy * dy > 1.0
        });
        if clear {
            cysts.push(cyst);
        }
    }
    cysts
}

/// A rendered phantom together with the cysts carved into it.
#[derive(Debug, Clone)]
pub struct Phantom {
    /// Row-major `IMAGE_SIZE x IMAGE_SIZE` intensities in `[0, 1]`.
    pub pixels: Vec<f64>,
    pub cysts: Vec<Cyst>,
}

impl Phantom {
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_parts(
            vec![1, IMAGE_SIZE, IMAGE_SIZE],
            self.pixels.iter().map(|&v| v as f32).collect(),
        )
    }
}

pub fn render(spec: &PhantomSpec, seed: u64) -> Result<Phantom> {
    spec.validate()?;
    let layers = spec.layers();
    let cysts = place_cysts(spec, &layers, &mut Rng::derive(seed, 1));
    let mut noise = Rng::derive(seed, 0);
    let n = IMAGE_SIZE;
    let mut pixels = vec![0.0; n * n];
    for row in 0..n {
        for col in 0..n {
            let l = &layers[col];
            let clean = if row >= l.rpe_bottom {
                choroid(row, l.rpe_bottom)
            } else if row >= l.rpe_top {
                RPE
            } else if row < l.ilm || l.hole {
                VITREOUS
            } else if row >= l.retina_bottom || cysts.iter().any(|c| c.contains(col, row)) {
                FLUID
            } else if row < l.opl {
                INNER_RETINA
            } else {
                OUTER_RETINA
            };
            let mut v = clean;
            if spec.speckle_sigma > 0.0 {
                let s = spec.speckle_sigma;
                v *= (s * noise.normal() - 0.5 * s * s).exp();
            }
            if spec.read_noise > 0.0 {
                v += spec.read_noise * noise.normal();
            }
            pixels[row * n + col] = v.clamp(0.0, 1.0);
        }
    }
    Ok(Phantom { pixels, cysts })
}

/// `[1, 64, 64]` phantom image in `[0, 1]`.
pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<Tensor<f32>> {
    Ok(render(spec, seed)?.to_tensor())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    Off,
    /// Mirror with probability 1/2.
    Random,
    Always,
}

impl FromStr for Flip {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" | "false" | "0" => Ok(Flip::Off),
            "random" | "on" | "true" | "1" => Ok(Flip::Random),
            "always" => Ok(Flip::Always),
            _ => Err(Error::Config(format!("flip must be off, random or always, got `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    pub flip: Flip,
    pub max_translate: usize,
    /// Multiplicative contrast factor range.
    pub contrast: (f64, f64),
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { flip: Flip::Random, max_translate: 3, contrast: (0.85, 1.15), noise_sigma: 0.02 }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        AugmentConfig { flip: Flip::Off, max_translate: 0, contrast: (1.0, 1.0), noise_sigma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.contrast;
        if !(lo > 0.0 && lo <= 1.0 && hi >= 1.0) {
            return Err(Error::Config(format!("contrast range ({lo}, {hi}) must be positive and contain 1")));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!("noise sigma {} must be >= 0", self.noise_sigma)));
        }
        if self.max_translate >= IMAGE_SIZE / 2 {
            return Err(Error::Config(format!("translation {} is too large", self.max_translate)));
        }
        Ok(())
    }
}

/// Flip, integer translation with edge clamping, contrast scaling and
/// additive noise, in that order; the result is clamped to `[0, 1]`.
pub fn augment(image: &Tensor<f32>, config: &AugmentConfig, seed: u64) -> Result<Tensor<f32>> {
    config.validate()?;
    let (h, w) = match *image.shape() {
        [1, h, w] | [h, w] => (h, w),
        _ => return Err(Error::Shape(format!("augment expects [1, H, W], got {:?}", image.shape()))),
    };
    let mut rng = Rng::new(seed);
    let flip = match config.flip {
        Flip::Off => false,
        Flip::Always => true,
        Flip::Random => rng.coin(),
    };
    let t = config.max_translate as i64;
    let (dx, dy) = if t > 0 { (rng.int_range(-t, t), rng.int_range(-t, t)) } else { (0, 0) };
    let gain = rng.uniform_range(config.contrast.0, config.contrast.1);

    let src = image.data();
    let mut out = vec![0f32; h * w];
    for r in 0..h {
        let sr = (r as i64 - dy).clamp(0, h as i64 - 1) as usize;
        for c in 0..w {
            let mut sc = (c as i64 - dx).clamp(0, w as i64 - 1) as usize;
            if flip {
                sc = w - 1 - sc;
            }
            let mut v = src[sr * w + sc] as f64 * gain;
            if config.noise_sigma > 0.0 {
                v += config.noise_sigma * rng.normal();
            }
            out[r * w + c] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Ok(Tensor::from_parts(image.shape().to_vec(), out))
}

/// Proportions of each pathology class, indexed by [`Pathology::index`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMix(pub [f64; 5]);

impl Default for ClassMix {
    fn default() -> Self {
        ClassMix([0.2; 5])
    }
}

impl ClassMix {
    pub fn only(class: Pathology) -> Self {
        let mut m = [0.0; 5];
        m[class.index()] = 1.0;
        ClassMix(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Config(format!("class proportions must be >= 0: {:?}", self.0)));
        }
        let sum: f64 = self.0.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Proportions(sum));
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut Rng) -> Pathology {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut last = Pathology::Normal;
        for class in Pathology::ALL {
            let p = self.0[class.index()];
            if p > 0.0 {
                acc += p;
                last = class;
                if u < acc {
                    return class;
                }
            }
        }
        last
    }
}

/// Parses `name=proportion` pairs separated by commas; omitted classes get 0.
impl FromStr for ClassMix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut m = [0.0; 5];
        let mut seen = [false; 5];
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected class=proportion, got `{part}`")))?;
            let class: Pathology = name.trim().parse()?;
            if seen[class.index()] {
                return Err(Error::Config(format!("class `{class}` listed twice")));
            }
            seen[class.index()] = true;
            m[class.index()] = value
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("invalid proportion `{value}` for {class}")))?;
        }
        let mix = ClassMix(m);
        mix.validate()?;
        Ok(mix)
    }
}

impl fmt::Display for ClassMix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = Pathology::ALL
            .iter()
            .map(|c| format!("{}={}", c.name(), self.0[c.index()]))
            .collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub count: usize,
    pub mix: ClassMix,
    pub augment: AugmentConfig,
    pub noise: NoiseBounds,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            count: 2000,
            mix: ClassMix::default(),
            augment: AugmentConfig::default(),
            noise: NoiseBounds::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetEntry {
    pub class: Pathology,
    /// Seed from which this item alone can be regenerated.
    pub seed: u64,
}

/// Training images `[M, 1, 64, 64]` in `[-1, 1]` with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub entries: Vec<DatasetEntry>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn class_counts(&self) -> [usize; 5] {
        let mut counts = [0; 5];
        for e in &self.entries {
            counts[e.class.index()] += 1;
        }
        counts
    }
}

/// One dataset item from its own seed: class draw, geometry, phantom,
/// augmentation. Returns the `[1, 64, 64]` image in `[0, 1]`.
pub fn dataset_item(
    item_seed: u64,
    mix: &ClassMix,
    augment_cfg: &AugmentConfig,
    noise: &NoiseBounds,
) -> Result<(Pathology, Tensor<f32>)> {
    let mut rng = Rng::new(item_seed);
    let class = mix.sample(&mut rng);
    let spec = PhantomSpec::random(class, noise, &mut rng);
    let phantom_seed = rng.next_u64();
    let aug_seed = rng.next_u64();
    let image = generate_phantom(&spec, phantom_seed)?;
    Ok((class, augment(&image, augment_cfg, aug_seed)?))
}

pub fn build_dataset(config: &DatasetConfig) -> Result<Dataset> {
    if config.count < 1 {
        return Err(Error::Config("dataset count must be >= 1".into()));
    }
    config.mix.validate()?;
    config.augment.validate()?;
    config.noise.validate()?;

    let items = par::map_indices(config.count, |i| {
        let seed = Rng::derive_seed(config.seed, i as u64);
        dataset_item(seed, &config.mix, &config.augment, &config.noise).map(|(c, img)| (c, seed, img))
    });
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = Vec::with_capacity(config.count * plane);
    let mut entries = Vec::with_capacity(config.count);
    for item in items {
        let (class, seed, img) = item?;
        data.extend(img.data().iter().map(|&v| 2.0 * v - 1.0));
        entries.push(DatasetEntry { class, seed });
    }
    Ok(Dataset {
        images: Tensor::from_parts(vec![config.count, 1, IMAGE_SIZE, IMAGE_SIZE], data),
        entries,
    })
}

const PROFILE_WIDTH: usize = 9;
const LESION_WIDTH: usize = 5;
const DARK: f64 = 0.17;
const TISSUE: f64 = 0.2;

/// Horizontal running mean over `width` columns. Near the borders the
/// window slides inward instead of padding, so every column averages
/// `width` distinct source columns.
fn smooth_rows(image: &[f64], width: usize) -> Vec<f64> {
    let n = IMAGE_SIZE;
    let mut out = vec![0.0; n * n];
    for r in 0..n {
        let row = &image[r * n..(r + 1) * n];
        for c in 0..n {
            let start = c.saturating_sub(width / 2).min(n - width);
            out[r * n + c] = row[start..start + width].iter().sum::<f64>() / width as f64;
        }
    }
    out
}

/// 3x3 box mean (edge-clamped).
fn smooth_box(image: &[f64]) -> Vec<f64> {
    let n = IMAGE_SIZE as i64;
    let mut out = vec![0.0; image.len()];
    for r in 0..n {
        for c in 0..n {
            let mut acc = 0.0;
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let rr = (r + dr).clamp(0, n - 1);
                    let cc = (c + dc).clamp(0, n - 1);
                    acc += image[(rr * n + cc) as usize];
                }
            }
            out[(r * n + c) as usize] = acc / 9.0;
        }
    }
    out
}

/// Runs of rows at or above `min + 0.6 (max - min)` in a column profile.
/// Profiles with less than 0.2 of contrast have no bright run.
pub fn bright_runs(profile: &[f64]) -> Vec<(usize, usize)> {
    let max = profile.iter().copied().fold(f64::MIN, f64::max);
    let min = profile.iter().copied().fold(f64::MAX, f64::min);
    if max - min < 0.2 {
        return Vec::new();
    }
    let threshold = min + 0.6 * (max - min);
    let mut runs = Vec::new();
    let mut start = None;
    for (i, &v) in profile.iter().enumerate() {
        match (v >= threshold, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                runs.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        runs.push((s, profile.len() - 1));
    }
    runs
}

fn checked_pixels(image: &[f64]) -> Result<()> {
    if image.len() != IMAGE_SIZE * IMAGE_SIZE {
        return Err(Error::Shape(format!(
            "expected {} pixels, got {}",
            IMAGE_SIZE * IMAGE_SIZE,
            image.len()
        )));
    }
    Ok(())
}

/// Per-column verdict of the layer-profile oracle: after horizontal
/// smoothing, the column has exactly one bright run and it lies in
/// [`RPE_WINDOW`].
pub fn column_profile_ok(image: &[f64]) -> Result<Vec<bool>> {
    checked_pixels(image)?;
    let n = IMAGE_SIZE;
    let s = smooth_rows(image, PROFILE_WIDTH);
    Ok((0..n)
        .map(|c| {
            let profile: Vec<f64> = (0..n).map(|r| s[r * n + c]).collect();
            match bright_runs(&profile)[..] {
                [(a, b)] => RPE_WINDOW.contains(&a) && RPE_WINDOW.contains(&b),
                _ => false,
            }
        })
        .collect())
}

/// Whether every column passes the layer-profile oracle.
pub fn normal_profile_ok(image: &[f64]) -> Result<bool> {
    Ok(column_profile_ok(image)?.into_iter().all(|ok| ok))
}

/// Fraction of columns passing the layer-profile oracle, in `[0, 1]`.
/// Clean phantoms score 1; featureless or noisy images score near 0.
pub fn layeredness(image: &[f64]) -> Result<f64> {
    let cols = column_profile_ok(image)?;
    Ok(cols.iter().filter(|&&ok| ok).count() as f64 / cols.len() as f64)
}

/// Image statistics the classifier decides on.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionStats {
    /// Longest run of central columns with (almost) no tissue above the RPE.
    pub hole_columns: usize,
    /// Columns with at least two dark rows directly above the RPE.
    pub gap_columns: usize,
    /// Dark blobs of at least two pixels inside the retina band.
    pub cyst_blobs: usize,
}

pub fn lesion_stats(image: &[f64]) -> Result<LesionStats> {
    checked_pixels(image)?;
    let n = IMAGE_SIZE;
    let s = smooth_rows(image, LESION_WIDTH);
    let b = smooth_box(image);
    let at = |r: usize, c: usize| s[r * n + c];

    let mut rpe_top = vec![0usize; n];
    let mut gap = vec![0usize; n];
    let mut tissue = vec![0usize; n];
    let mut ilm = vec![0usize; n];
    for c in 0..n {
        let peak = RPE_WINDOW.clone().max_by(|&a, &b| at(a, c).total_cmp(&at(b, c))).unwrap_or(0);
        let cut = 0.55 * at(peak, c);
        let mut top = peak;
        while top > 0 && at(top - 1, c) >= cut {
            top -= 1;
        }
        rpe_top[c] = top;
        // One partial-volume row may sit between the RPE and the fluid.
        let dark_run = |from: usize| (0..from).rev().take_while(|&r| at(r, c) < DARK).count();
        let g = match dark_run(top) {
            0 if top > 0 => dark_run(top - 1),
            g => g,
        };
        gap[c] = g;
        tissue[c] = (0..top).filter(|&r| at(r, c) >= TISSUE).count();
        ilm[c] = (0..top).find(|&r| at(r, c) >= TISSUE).unwrap_or(top);
    }

    let mut hole_columns = 0;
    let mut run = 0;
    for &t in &tissue[16..48] {
        run = if t <= 2 { run + 1 } else { 0 };
        hole_columns = hole_columns.max(run);
    }
    let gap_columns = gap.iter().filter(|&&g| g >= 2).count();

    // 4-connected dark components inside the band.
    let mut dark = vec![false; n * n];
    for c in 0..n {
        let lo = ilm[c] + 3;
        let hi = rpe_top[c].saturating_sub(gap[c] + 2);
        for r in lo..hi {
            dark[r * n + c] = b[r * n + c] < DARK;
        }
    }
    let mut seen = vec![false; n * n];
    let mut cyst_blobs = 0;
    for start in 0..n * n {
        if !dark[start] || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let mut size = 0;
        while let Some(p) = stack.pop() {
            size += 1;
            let (r, c) = (p / n, p % n);
            let mut push = |q: usize| {
                if dark[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if r > 0 {
                push(p - n);
            }
            if r + 1 < n {
                push(p + n);
            }
            if c > 0 {
                push(p - 1);
            }
            if c + 1 < n {
                push(p + 1);
            }
        }
        if size >= 2 {
            cyst_blobs += 1;
        }
    }
    Ok(LesionStats { hole_columns, gap_columns, cyst_blobs })
}

/// Fixed decision rule over [`LesionStats`]: hole, then fluid gap width
/// (wide gaps are detachments), then cysts, else normal.
pub fn classify(image: &[f64]) -> Result<Pathology> {
    let st = lesion_stats(image)?;
    Ok(if st.hole_columns >= 3 {
        Pathology::MacularHole
    } else if st.gap_columns >= 27 {
        Pathology::Detachment
    } else if st.gap_columns >= 4 {
        Pathology::SubretinalFluid
    } else if st.cyst_blobs >= 1 {
        Pathology::CystoidEdema
    } else {
        Pathology::Normal
    })
}

fn region_mean(pixels: &[f64], cells: impl Iterator<Item = (usize, usize)>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (r, c) in cells {
        sum += pixels[r * IMAGE_SIZE + c];
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Region-statistics check that the lesion declared by `spec` is visible in
/// `phantom`: a hole is darker than 0.3x the flanking retina at the same
/// depths, cysts are darker than 0.5x the surrounding band, fluid under a
/// lifted retina is darker than 0.3x the retina above it while the RPE stays
/// bright, and a normal retina passes [`normal_profile_ok`].
pub fn check_lesion(spec: &PhantomSpec, phantom: &Phantom) -> std::result::Result<(), String> {
    let px = &phantom.pixels;
    let layers = spec.layers();
    let band = |c: usize| {
        let l = layers[c];
        (l.ilm..l.retina_bottom).map(move |r| (r, c))
    };
    let ratio = |inside: Option<f64>, outside: Option<f64>| match (inside, outside) {
        (Some(a), Some(b)) if b > 0.0 => Ok(a / b),
        _ => Err("empty region".to_string()),
    };
    match spec.lesion {
        Lesion::None => {
            if normal_profile_ok(px).map_err(|e| e.to_string())? {
                Ok(())
            } else {
                Err("a column lacks a single RPE run".into())
            }
        }
        Lesion::MacularHole { .. } => {
            let hole: Vec<usize> = (0..IMAGE_SIZE).filter(|&c| layers[c].hole).collect();
            let (lo, hi) = match (hole.first(), hole.last()) {
                (Some(&lo), Some(&hi)) => (lo, hi),
                _ => return Err("hole covers no column".into()),
            };
            let top = hole.iter().map(|&c| layers[c].ilm).min().unwrap_or(0);
            let bottom = hole.iter().map(|&c| layers[c].retina_bottom).max().unwrap_or(0);
            let flanks: Vec<usize> = (lo.saturating_sub(6)..lo).chain(hi + 1..(hi + 7).min(IMAGE_SIZE)).collect();
            let inside = region_mean(px, hole.iter().flat_map(|&c| band(c)));
            let outside = region_mean(
                px,
                flanks.iter().flat_map(|&c| band(c).filter(|&(r, _)| (top..bottom).contains(&r))),
            );
            let q = ratio(inside, outside)?;
            if q < 0.3 { Ok(()) } else { Err(format!("hole/flank intensity ratio {q:.3}")) }
        }
        Lesion::Cysts { .. } => {
            if phantom.cysts.is_empty() {
                return Err("no cyst was placed".into());
            }
            let in_cyst = |r: usize, c: usize| phantom.cysts.iter().any(|k| k.contains(c, r));
            let inside = region_mean(px, (0..IMAGE_SIZE).flat_map(band).filter(|&(r, c)| in_cyst(r, c)));
            let outside = region_mean(px, (0..IMAGE_SIZE).flat_map(band).filter(|&(r, c)| !in_cyst(r, c)));
            let q = ratio(inside, outside)?;
            if q < 0.5 { Ok(()) } else { Err(format!("cyst/band intensity ratio {q:.3}")) }
        }
        Lesion::SubretinalFluid { .. } | Lesion::Detachment { .. } => {
            let lifted: Vec<usize> = (0..IMAGE_SIZE)
                .filter(|&c| layers[c].rpe_top >= layers[c].retina_bottom + 2)
                .collect();
            let centre = spec.fovea_center.round() as usize;
            if !lifted.contains(&centre) {
                return Err("retina is not lifted at the fovea".into());
            }
            if let Lesion::Detachment { lift, width } = spec.lesion {
                let flat = (width / 2.0 - DETACHMENT_RAMP).floor();
                let short = lifted.iter().filter(|&&c| (c as f64 - spec.fovea_center).abs() <= flat).count();
                let expected = (0..IMAGE_SIZE).filter(|&c| (c as f64 - spec.fovea_center).abs() <= flat).count();
                if short != expected {
                    return Err(format!("flat lift of {lift:.1} px missing on {} columns", expected - short));
                }
            }
            let fluid = region_mean(
                px,
                lifted.iter().flat_map(|&c| (layers[c].retina_bottom..layers[c].rpe_top).map(move |r| (r, c))),
            );
            let retina = region_mean(px, lifted.iter().flat_map(|&c| band(c)));
            let q = ratio(fluid, retina)?;
            if q >= 0.3 {
                return Err(format!("fluid/retina intensity ratio {q:.3}"));
            }
            let rpe = region_mean(
                px,
                lifted.iter().flat_map(|&c| (layers[c].rpe_top..layers[c].rpe_bottom).map(move |r| (r, c))),
            )
            .unwrap_or(0.0);
            if rpe < 0.6 {
                return Err(format!("RPE under the fluid has mean {rpe:.3}"));
            }
            Ok(())
        }
    }
}
