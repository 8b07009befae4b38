//! Physical weather model and procedural weather generators.
//!
//! A degraded image is `X = T * (Y + P) + (1 - T) * A` with transmission `T`,
//! particle layer `P` and atmospheric light `A`. Its degradation pattern
//! `G(X) = P + (1/T - 1) * (A - X)` satisfies `Y = X - G(X)`.

use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Error, Result};
use crate::imaging::Image;
use crate::real::Real;

/// Transmission floor; keeps `1/T` finite.
pub const T_MIN: f64 = 0.05;

/// Maximum angular jitter applied to each rain streak, in degrees.
pub const RAIN_ANGLE_JITTER_DEG: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub enum Atmosphere<R = f32> {
    Scalar(R),
    /// Spatial light map; accepted by the model equations, never produced by the generators.
    Map(Image<R>),
}

/// The `(T, P, A)` triple. `T` and `P` may have one channel (broadcast) or
/// as many channels as the clean image.
#[derive(Clone, Debug, PartialEq)]
pub struct DegradationField<R = f32> {
    pub transmission: Image<R>,
    pub particles: Image<R>,
    pub light: Atmosphere<R>,
}

/// Output of [`compose_degraded`]: the stored (clipped) image and the exact composite.
#[derive(Clone, Debug, PartialEq)]
pub struct Composite<R = f32> {
    pub clipped: Image<R>,
    pub unclipped: Image<R>,
}

#[inline]
fn broadcast_index(layer_channels: usize, pixel: usize, c: usize) -> usize {
    if layer_channels == 1 {
        pixel
    } else {
        pixel * layer_channels + c
    }
}

impl<R: Real> DegradationField<R> {
    /// No weather: `T = 1`, `P = 0`, `A = 0`.
    pub fn clear(height: usize, width: usize) -> Self {
        Self {
            transmission: Image::filled(height, width, 1, R::ONE),
            particles: Image::zeros(height, width, 1),
            light: Atmosphere::Scalar(R::ZERO),
        }
    }

    fn check_layer(name: &str, layer: &Image<R>, h: usize, w: usize, c: usize) -> Result<()> {
        if layer.height() != h || layer.width() != w || (layer.channels() != 1 && layer.channels() != c) {
            return Err(shape_err!(
                "{name} layer {:?} incompatible with {h}x{w}x{c}",
                layer.dims()
            ));
        }
        Ok(())
    }

    /// Checks shape compatibility against an image of `h x w x c`.
    pub fn check_compatible(&self, h: usize, w: usize, c: usize) -> Result<()> {
        Self::check_layer("transmission", &self.transmission, h, w, c)?;
        Self::check_layer("particle", &self.particles, h, w, c)?;
        if let Atmosphere::Map(a) = &self.light {
            Self::check_layer("atmospheric light", a, h, w, c)?;
        }
        Ok(())
    }

    /// Checks `T >= T_MIN` and `P >= 0`.
    pub fn check_invariants(&self) -> Result<()> {
        let floor = R::from_f64(T_MIN);
        if let Some(t) = self.transmission.data().iter().find(|&&t| !(t >= floor && t <= R::ONE)) {
            return Err(Error::Domain(format!("transmission {t:?} outside [{T_MIN}, 1]")));
        }
        if let Some(p) = self.particles.data().iter().find(|&&p| !(p >= R::ZERO)) {
            return Err(Error::Domain(format!("negative particle value {p:?}")));
        }
        Ok(())
    }

    #[inline]
    fn at(&self, pixel: usize, c: usize) -> (R, R, R) {
        let t = self.transmission.data()[broadcast_index(self.transmission.channels(), pixel, c)];
        let p = self.particles.data()[broadcast_index(self.particles.channels(), pixel, c)];
        let a = match &self.light {
            Atmosphere::Scalar(a) => *a,
            Atmosphere::Map(m) => m.data()[broadcast_index(m.channels(), pixel, c)],
        };
        (t, p, a)
    }
}

/// Scalar form of the scattering model, `t (y + p) + (1 - t) a`.
#[inline]
pub fn compose_scalar<R: Real>(y: R, t: R, p: R, a: R) -> R {
    t * (y + p) + (R::ONE - t) * a
}

/// Scalar form of the degradation pattern, `p + (1/t - 1)(a - x)`.
#[inline]
pub fn pattern_scalar<R: Real>(x: R, t: R, p: R, a: R) -> R {
    p + (R::ONE / t - R::ONE) * (a - x)
}

/// Degrades `clean` with `field`.
///
/// Evaluated in f64 and rounded once, which keeps the f32 round trip through
/// [`degradation_pattern_analytic`] within 1e-6 even where `T` is small.
pub fn compose_degraded<R: Real>(clean: &Image<R>, field: &DegradationField<R>) -> Result<Composite<R>> {
    let (h, w, c) = clean.dims();
    field.check_compatible(h, w, c)?;
    let mut out = Vec::with_capacity(clean.data().len());
    for pixel in 0..h * w {
        for ch in 0..c {
            let (t, p, a) = field.at(pixel, ch);
            let y = clean.data()[pixel * c + ch];
            out.push(R::from_f64(compose_scalar(
                y.to_f64(),
                t.to_f64(),
                p.to_f64(),
                a.to_f64(),
            )));
        }
    }
    let unclipped = Image::from_vec(h, w, c, out)?;
    Ok(Composite {
        clipped: unclipped.clipped(),
        unclipped,
    })
}

/// Analytic degradation pattern of `degraded` under a known field.
///
/// Evaluated in f64 and rounded once, so `X - G(X)` in `R` recovers the clean
/// image up to the rounding already present in `X`.
pub fn degradation_pattern_analytic<R: Real>(degraded: &Image<R>, field: &DegradationField<R>) -> Result<Image<R>> {
    let (h, w, c) = degraded.dims();
    field.check_compatible(h, w, c)?;
    let floor = R::from_f64(T_MIN);
    if let Some(t) = field.transmission.data().iter().find(|&&t| !(t >= floor)) {
        return Err(Error::Domain(format!("transmission {t:?} below floor {T_MIN}")));
    }
    let mut out = Vec::with_capacity(degraded.data().len());
    for pixel in 0..h * w {
        for ch in 0..c {
            let (t, p, a) = field.at(pixel, ch);
            let x = degraded.data()[pixel * c + ch];
            out.push(R::from_f64(pattern_scalar(
                x.to_f64(),
                t.to_f64(),
                p.to_f64(),
                a.to_f64(),
            )));
        }
    }
    Image::from_vec(h, w, c, out)
}

/// `X - Y`: the pattern label of an observed pair.
pub fn residual_pattern<R: Real>(degraded: &Image<R>, clean: &Image<R>) -> Result<Image<R>> {
    degraded.sub(clean)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RainConfig {
    /// Streaks per 1000 pixels.
    pub density: f64,
    /// Streak length in pixels.
    pub length: f64,
    /// Streak direction in degrees from vertical.
    pub angle: f64,
    pub intensity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnowConfig {
    /// Flakes per 1000 pixels.
    pub count: f64,
    pub radius_min: f64,
    pub radius_max: f64,
    pub opacity: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthProfile {
    /// Depth 1 at the top row falling linearly to 0 at the bottom row.
    Ramp,
    /// Depth 0 at a seed-jittered center rising to 1 at the far corner.
    Radial,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FogConfig {
    pub beta: f64,
    pub depth_profile: DepthProfile,
    /// Atmospheric light level.
    pub light: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum WeatherComponent {
    Rain(RainConfig),
    Snow(SnowConfig),
    Fog(FogConfig),
}

/// The weather condition of one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeatherSpec {
    pub components: Vec<WeatherComponent>,
    pub seed: u64,
}

fn unit_interval(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(param_err!("{name} must lie in [0, 1], got {v}"));
    }
    Ok(())
}

fn non_negative(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(param_err!("{name} must be a finite non-negative number, got {v}"));
    }
    Ok(())
}

impl Default for RainConfig {
    fn default() -> Self {
        Self {
            density: 2.0,
            length: 10.0,
            angle: 15.0,
            intensity: 0.7,
        }
    }
}

impl Default for SnowConfig {
    fn default() -> Self {
        Self {
            count: 1.5,
            radius_min: 1.0,
            radius_max: 3.0,
            opacity: 0.8,
        }
    }
}

impl Default for FogConfig {
    fn default() -> Self {
        Self {
            beta: 1.2,
            depth_profile: DepthProfile::Ramp,
            light: 0.9,
        }
    }
}

impl FogConfig {
    /// Heavy haze: twice the default attenuation under the same light.
    pub fn heavy() -> Self {
        Self {
            beta: 2.4,
            ..Self::default()
        }
    }
}

impl RainConfig {
    pub fn validate(&self) -> Result<()> {
        non_negative("rain.density", self.density)?;
        non_negative("rain.length", self.length)?;
        if !self.angle.is_finite() {
            return Err(param_err!("rain.angle must be finite"));
        }
        unit_interval("rain.intensity", self.intensity)
    }
}

impl SnowConfig {
    pub fn validate(&self) -> Result<()> {
        non_negative("snow.count", self.count)?;
        non_negative("snow.radius_min", self.radius_min)?;
        non_negative("snow.radius_max", self.radius_max)?;
        if self.radius_max < self.radius_min {
            return Err(param_err!("snow.radius_max < snow.radius_min"));
        }
        unit_interval("snow.opacity", self.opacity)
    }
}

impl FogConfig {
    pub fn validate(&self) -> Result<()> {
        non_negative("fog.beta", self.beta)?;
        unit_interval("fog.light", self.light)
    }
}

impl WeatherSpec {
    pub fn rain(seed: u64) -> Self {
        Self {
            components: alloc::vec![WeatherComponent::Rain(RainConfig::default())],
            seed,
        }
    }

    pub fn fog(seed: u64) -> Self {
        Self {
            components: alloc::vec![WeatherComponent::Fog(FogConfig::default())],
            seed,
        }
    }

    /// Rain streaks seen through fog.
    pub fn rain_fog(seed: u64) -> Self {
        Self {
            components: alloc::vec![
                WeatherComponent::Rain(RainConfig::default()),
                WeatherComponent::Fog(FogConfig::default()),
            ],
            seed,
        }
    }

    /// Rain streaks over heavy haze.
    pub fn rain_heavy_fog(seed: u64) -> Self {
        Self {
            components: alloc::vec![
                WeatherComponent::Rain(RainConfig::default()),
                WeatherComponent::Fog(FogConfig::heavy()),
            ],
            seed,
        }
    }
}

impl WeatherSpec {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(param_err!("weather spec needs at least one component"));
        }
        let mut fogs = 0;
        for comp in &self.components {
            match comp {
                WeatherComponent::Rain(r) => r.validate()?,
                WeatherComponent::Snow(s) => s.validate()?,
                WeatherComponent::Fog(f) => {
                    fogs += 1;
                    f.validate()?
                }
            }
        }
        if fogs > 1 {
            return Err(param_err!("at most one fog component is supported"));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer; derives independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn particle_count(per_kilopixel: f64, h: usize, w: usize) -> usize {
    libm::round(per_kilopixel * (h * w) as f64 / 1000.0) as usize
}

fn dist_to_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let s = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (ax + s * dx - px, ay + s * dy - py);
    libm::sqrt(qx * qx + qy * qy)
}

/// Rain streak layer (single channel). Streaks are anti-aliased segments,
/// fully covered within 0.25 px of the axis and fading out by 1.25 px.
pub fn gen_rain(seed: u64, cfg: &RainConfig, h: usize, w: usize) -> Result<Image<f32>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7261_696e));
    let mut layer = Image::<f32>::zeros(h, w, 1);
    for _ in 0..particle_count(cfg.density, h, w) {
        let cx = rng.gen::<f64>() * w as f64;
        let cy = rng.gen::<f64>() * h as f64;
        let jitter = rng.gen_range(-RAIN_ANGLE_JITTER_DEG..=RAIN_ANGLE_JITTER_DEG);
        let theta = (cfg.angle + jitter).to_radians();
        let (dx, dy) = (libm::sin(theta), libm::cos(theta));
        let half = cfg.length / 2.0;
        let (ax, ay, bx, by) = (cx - dx * half, cy - dy * half, cx + dx * half, cy + dy * half);
        let x0 = (ax.min(bx) - 2.0).max(0.0) as usize;
        let x1 = ((ax.max(bx) + 2.0).max(0.0) as usize).min(w);
        let y0 = (ay.min(by) - 2.0).max(0.0) as usize;
        let y1 = ((ay.max(by) + 2.0).max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let d = dist_to_segment(x as f64 + 0.5, y as f64 + 0.5, ax, ay, bx, by);
                let coverage = (1.25 - d).clamp(0.0, 1.0);
                if coverage > 0.0 {
                    let v = (cfg.intensity * coverage) as f32;
                    if v > layer.get(y, x, 0) {
                        layer.set(y, x, 0, v);
                    }
                }
            }
        }
    }
    Ok(layer)
}

/// Snow layer (single channel): discs with a Gaussian rim, peak value `opacity`.
pub fn gen_snow(seed: u64, cfg: &SnowConfig, h: usize, w: usize) -> Result<Image<f32>> {
    cfg.validate()?;
    const RIM_SIGMA: f64 = 0.6;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x736e_6f77));
    let mut layer = Image::<f32>::zeros(h, w, 1);
    for _ in 0..particle_count(cfg.count, h, w) {
        let cx = rng.gen::<f64>() * w as f64;
        let cy = rng.gen::<f64>() * h as f64;
        let radius = if cfg.radius_max > cfg.radius_min {
            rng.gen_range(cfg.radius_min..cfg.radius_max)
        } else {
            cfg.radius_min
        };
        let reach = radius + 3.0 * RIM_SIGMA;
        let x0 = (cx - reach).max(0.0) as usize;
        let x1 = ((cx + reach + 1.0).max(0.0) as usize).min(w);
        let y0 = (cy - reach).max(0.0) as usize;
        let y1 = ((cy + reach + 1.0).max(0.0) as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let (ox, oy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let d = libm::sqrt(ox * ox + oy * oy);
                let kernel = if d <= radius {
                    1.0
                } else {
                    let e = d - radius;
                    libm::exp(-(e * e) / (2.0 * RIM_SIGMA * RIM_SIGMA))
                };
                let v = (cfg.opacity * kernel) as f32;
                if v > layer.get(y, x, 0) {
                    layer.set(y, x, 0, v);
                }
            }
        }
    }
    Ok(layer)
}

/// Synthetic depth in `[0, 1]`.
pub fn depth_map(seed: u64, profile: DepthProfile, h: usize, w: usize) -> Image<f64> {
    match profile {
        DepthProfile::Ramp => Image::from_fn(
            h,
            w,
            1,
            |y, _, _| {
                if h > 1 {
                    1.0 - y as f64 / (h - 1) as f64
                } else {
                    1.0
                }
            },
        ),
        DepthProfile::Radial => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x0066_6f67));
            let cx = (w as f64) * rng.gen_range(1.0 / 3.0..2.0 / 3.0);
            let cy = (h as f64) * rng.gen_range(1.0 / 3.0..2.0 / 3.0);
            let far = [(0.0, 0.0), (w as f64, 0.0), (0.0, h as f64), (w as f64, h as f64)]
                .iter()
                .map(|&(x, y)| libm::sqrt((x - cx) * (x - cx) + (y - cy) * (y - cy)))
                .fold(0.0, f64::max)
                .max(1e-9);
            Image::from_fn(h, w, 1, |y, x, _| {
                let (ox, oy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                (libm::sqrt(ox * ox + oy * oy) / far).min(1.0)
            })
        }
    }
}

/// Transmission map `max(exp(-beta d), T_MIN)` and scalar light.
pub fn gen_fog(seed: u64, cfg: &FogConfig, h: usize, w: usize) -> Result<(Image<f32>, f32)> {
    cfg.validate()?;
    let depth = depth_map(seed, cfg.depth_profile, h, w);
    let t = depth.map(|d| libm::exp(-cfg.beta * d).max(T_MIN)).cast::<f32>();
    Ok((t, cfg.light as f32))
}

/// Procedural clean scene: a smooth four-corner gradient, random rectangles and
/// ellipses, and mild texture noise, clipped to `[0, 1]`.
pub fn gen_clean_scene(seed: u64, h: usize, w: usize) -> Image<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x7363_656e));
    let corners: [[f64; 3]; 4] = core::array::from_fn(|_| core::array::from_fn(|_| rng.gen_range(0.1..0.9)));
    let (hf, wf) = ((h.max(2) - 1) as f64, (w.max(2) - 1) as f64);
    let mut img: Vec<[f64; 3]> = (0..h * w)
        .map(|i| {
            let (u, v) = ((i % w) as f64 / wf, (i / w) as f64 / hf);
            core::array::from_fn(|c| {
                let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
                let bottom = corners[2][c] * (1.0 - u) + corners[3][c] * u;
                top * (1.0 - v) + bottom * v
            })
        })
        .collect();

    let shapes = rng.gen_range(6..=12);
    for _ in 0..shapes {
        let color: [f64; 3] = core::array::from_fn(|_| rng.gen::<f64>());
        let alpha = rng.gen_range(0.6..1.0);
        let cx = rng.gen::<f64>() * w as f64;
        let cy = rng.gen::<f64>() * h as f64;
        let rx = rng.gen_range(0.08..0.35) * w as f64;
        let ry = rng.gen_range(0.08..0.35) * h as f64;
        let ellipse = rng.gen::<bool>();
        for (i, px) in img.iter_mut().enumerate() {
            let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
            let (nx, ny) = ((x - cx) / rx, (y - cy) / ry);
            let inside = if ellipse {
                nx * nx + ny * ny <= 1.0
            } else {
                nx.abs() <= 1.0 && ny.abs() <= 1.0
            };
            if inside {
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - alpha) + color[c] * alpha;
                }
            }
        }
    }

    let mut data = Vec::with_capacity(h * w * 3);
    for px in &img {
        for &v in px {
            let n = rng.gen_range(-0.03..0.03);
            data.push((v + n).clamp(0.0, 1.0) as f32);
        }
    }
    Image::from_vec(h, w, 3, data).expect("scene dims")
}

/// One synthetic training/evaluation pair with its analytic field.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub degraded: Image<f32>,
    pub degraded_unclipped: Image<f32>,
    pub clean: Image<f32>,
    pub field: DegradationField<f32>,
}

/// Generates the pair for `scene_seed` under `spec`. Particle layers are
/// summed; transmission and light come from the fog component when present.
pub fn make_pair(spec: &WeatherSpec, scene_seed: u64, h: usize, w: usize) -> Result<SyntheticPair> {
    spec.validate()?;
    let clean = gen_clean_scene(scene_seed, h, w);
    let mut field = DegradationField::<f32>::clear(h, w);
    let pair_seed = mix_seed(spec.seed, scene_seed);
    for (i, comp) in spec.components.iter().enumerate() {
        let seed = mix_seed(pair_seed, i as u64 + 1);
        match comp {
            WeatherComponent::Rain(cfg) => add_layer(&mut field.particles, &gen_rain(seed, cfg, h, w)?),
            WeatherComponent::Snow(cfg) => add_layer(&mut field.particles, &gen_snow(seed, cfg, h, w)?),
            WeatherComponent::Fog(cfg) => {
                let (t, a) = gen_fog(seed, cfg, h, w)?;
                field.transmission = t;
                field.light = Atmosphere::Scalar(a);
            }
        }
    }
    let composite = compose_degraded(&clean, &field)?;
    Ok(SyntheticPair {
        degraded: composite.clipped,
        degraded_unclipped: composite.unclipped,
        clean,
        field,
    })
}

fn add_layer(acc: &mut Image<f32>, layer: &Image<f32>) {
    for (a, b) in acc.data_mut().iter_mut().zip(layer.data()) {
        *a += *b;
    }
}
