//! Pixel container and full-reference quality metrics.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::real::Real;

/// PSNR reported for (numerically) identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Dense `height x width x channels` array, row-major with the channel axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<R = f32> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<R>,
}

impl<R: Real> Image<R> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, R::ZERO)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: R) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<R>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(shape_err!(
                "{}x{}x{} image needs {} values, got {}",
                height,
                width,
                channels,
                height * width * channels,
                data.len()
            ));
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds an image from `f(row, col, channel)`.
    pub fn from_fn(height: usize, width: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> R) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }
    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }
    #[inline]
    pub fn data(&self) -> &[R] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }
    pub fn into_vec(self) -> Vec<R> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> R {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: R) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_dims<S: Real>(&self, other: &Image<S>) -> bool {
        self.dims() == other.dims()
    }

    pub fn map(&self, mut f: impl FnMut(R) -> R) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clipped(&self) -> Self {
        self.map(|v| v.max(R::ZERO).min(R::ONE))
    }

    pub fn cast<S: Real>(&self) -> Image<S> {
        Image {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|v| S::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Element-wise `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        if !self.same_dims(other) {
            return Err(shape_err!("cannot subtract {:?} from {:?}", other.dims(), self.dims()));
        }
        Ok(Self {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a - b).collect(),
        })
    }

    /// Per-channel population variance, accumulated in f64.
    pub fn channel_variance(&self) -> Vec<f64> {
        let n = (self.height * self.width) as f64;
        (0..self.channels)
            .map(|c| {
                let vals = self.data.iter().skip(c).step_by(self.channels);
                let mean = vals.clone().map(|v| v.to_f64()).sum::<f64>() / n;
                vals.map(|v| (v.to_f64() - mean) * (v.to_f64() - mean)).sum::<f64>() / n
            })
            .collect()
    }
}

fn check_same<R: Real>(a: &Image<R>, b: &Image<R>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(shape_err!("image dimensions differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    Ok(())
}

/// Mean squared error over every pixel and channel, in f64.
pub fn mse<R: Real>(a: &Image<R>, b: &Image<R>) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data.len();
    if n == 0 {
        return Err(param_err!("empty image"));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x.to_f64() - y.to_f64();
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP_DB`].
pub fn psnr<R: Real>(a: &Image<R>, b: &Image<R>, max_val: f64) -> Result<f64> {
    if !(max_val > 0.0) {
        return Err(param_err!("psnr max_val must be positive, got {max_val}"));
    }
    let err = mse(a, b)?;
    let peak = max_val * max_val;
    if err < peak * 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * libm::log10(peak / err))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *wi = libm::exp(-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let total: f64 = w.iter().sum();
    for wi in &mut w {
        *wi /= total;
    }
    w
}

/// Valid-mode separable Gaussian filter of one plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let oh = h - SSIM_WINDOW + 1;
    let ow = w - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                acc += wk * plane[y * w + x + k];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (k, &wk) in win.iter().enumerate() {
                acc += wk * rows[(y + k) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic range 1,
/// averaged over valid window positions and then over channels.
pub fn ssim<R: Real>(a: &Image<R>, b: &Image<R>) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, ch) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(param_err!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        ));
    }
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let win = gaussian_window();
    let mut total = 0.0;
    for c in 0..ch {
        let pa: Vec<f64> = a.data.iter().skip(c).step_by(ch).map(|v| v.to_f64()).collect();
        let pb: Vec<f64> = b.data.iter().skip(c).step_by(ch).map(|v| v.to_f64()).collect();
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &win);
        let mu_b = filter_valid(&pb, h, w, &win);
        let e_aa = filter_valid(&paa, h, w, &win);
        let e_bb = filter_valid(&pbb, h, w, &win);
        let e_ab = filter_valid(&pab, h, w, &win);
        let mut acc = 0.0;
        for i in 0..mu_a.len() {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            acc += num / den;
        }
        total += acc / mu_a.len() as f64;
    }
    Ok(total / ch as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub dataset_id: String,
    pub checkpoint_id: String,
    pub shots: usize,
    pub seed: u64,
    pub psnr_cap_db: f64,
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl Iterator<Item = f64> + Clone) -> Self {
        let n = values.clone().count();
        if n == 0 {
            return Self::default();
        }
        let mean = values.clone().sum::<f64>() / n as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: libm::sqrt(var),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub records: Vec<ImageScore>,
    pub psnr: Summary,
    pub ssim: Summary,
}

impl MetricsReport {
    pub fn new(meta: ReportMeta, records: Vec<ImageScore>) -> Self {
        let psnr = Summary::of(records.iter().map(|r| r.psnr_db));
        let ssim = Summary::of(records.iter().map(|r| r.ssim));
        Self {
            meta,
            records,
            psnr,
            ssim,
        }
    }

    /// Scores one restored image against its reference and appends it.
    pub fn score<R: Real>(id: &str, restored: &Image<R>, clean: &Image<R>) -> Result<ImageScore> {
        Ok(ImageScore {
            id: id.into(),
            psnr_db: psnr(restored, clean, 1.0)?,
            ssim: ssim(restored, clean)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(seed: u64, h: usize, w: usize) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, 3, |_, _, _| rng.gen::<f64>())
    }

    #[test]
    fn psnr_closed_forms() {
        let zero = Image::<f64>::zeros(16, 16, 3);
        let tenth = Image::<f64>::filled(16, 16, 3, 0.1);
        let one = Image::<f64>::filled(16, 16, 3, 1.0);
        assert!((psnr(&zero, &tenth, 1.0).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&zero, &one, 1.0).unwrap(), 0.0);
        assert_eq!(psnr(&tenth, &tenth, 1.0).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_rejects_bad_inputs() {
        let a = Image::<f32>::zeros(4, 4, 3);
        let b = Image::<f32>::zeros(4, 5, 3);
        assert!(matches!(psnr(&a, &b, 1.0), Err(crate::Error::Shape(_))));
        assert!(matches!(psnr(&a, &a, 0.0), Err(crate::Error::Param(_))));
    }

    #[test]
    fn psnr_is_symmetric_and_monotone_in_noise() {
        let base = noise_image(3, 24, 24).map(|v| 0.25 + 0.5 * v);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let unit: Vec<f64> = (0..base.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut last = f64::INFINITY;
        for amp in [0.01, 0.05, 0.1] {
            let noisy = Image::from_vec(
                24,
                24,
                3,
                base.data().iter().zip(&unit).map(|(v, u)| v + amp * u).collect(),
            )
            .unwrap();
            let p = psnr(&base, &noisy, 1.0).unwrap();
            assert_eq!(p, psnr(&noisy, &base, 1.0).unwrap());
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn ssim_closed_forms() {
        let zero = Image::<f64>::zeros(16, 16, 3);
        let one = Image::<f64>::filled(16, 16, 3, 1.0);
        let expected = 1e-4 / 1.0001;
        assert!((ssim(&zero, &one).unwrap() - expected).abs() < 1e-9);
        let x = noise_image(1, 20, 20);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_small_noise_and_symmetry() {
        let x = noise_image(5, 32, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y = x.map(|v| (v + rng.gen_range(-0.001..0.001)).clamp(0.0, 1.0));
        let s = ssim(&x, &y).unwrap();
        assert!(s > 0.99, "ssim {s}");
        assert!((s - ssim(&y, &x).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_tiny_images() {
        let a = Image::<f32>::zeros(10, 30, 3);
        assert!(matches!(ssim(&a, &a), Err(crate::Error::Param(_))));
    }

    #[test]
    fn report_aggregates_match_records() {
        let records: Vec<ImageScore> = (0..7)
            .map(|i| ImageScore {
                id: alloc::format!("p{i}"),
                psnr_db: 20.0 + i as f64 * 0.37,
                ssim: 0.5 + i as f64 * 0.01,
            })
            .collect();
        let report = MetricsReport::new(ReportMeta::default(), records.clone());
        let mean = records.iter().map(|r| r.psnr_db).sum::<f64>() / 7.0;
        assert!((report.psnr.mean - mean).abs() < 1e-9);
        let smean = records.iter().map(|r| r.ssim).sum::<f64>() / 7.0;
        assert!((report.ssim.mean - smean).abs() < 1e-9);
    }
}
