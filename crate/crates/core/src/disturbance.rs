//! Heavy, light and instance-level disturbed views of an input image.
//!
//! Every random quantity is drawn from the caller's rng in a fixed order,
//! and the number of draws does not depend on the configuration, so two
//! configurations that differ only in magnitudes consume the stream
//! identically.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{NsaError, Result};
use crate::geometry::{apply_geo, GeoRecord, Image, ImageSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InsdView {
    ShareLid,
    ShareHid,
    Dedicated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotometricConfig {
    pub brightness_jitter: f64,
    pub contrast_jitter: f64,
    pub saturation_jitter: f64,
    pub blur_sigma_max: f64,
    pub noise_sigma_max: f64,
}

impl PhotometricConfig {
    pub fn none() -> Self {
        Self {
            brightness_jitter: 0.0,
            contrast_jitter: 0.0,
            saturation_jitter: 0.0,
            blur_sigma_max: 0.0,
            noise_sigma_max: 0.0,
        }
    }

    pub fn scaled(&self, f: f64) -> Self {
        Self {
            brightness_jitter: self.brightness_jitter * f,
            contrast_jitter: self.contrast_jitter * f,
            saturation_jitter: self.saturation_jitter * f,
            blur_sigma_max: self.blur_sigma_max * f,
            noise_sigma_max: self.noise_sigma_max * f,
        }
    }
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        Self {
            brightness_jitter: 0.25,
            contrast_jitter: 0.4,
            saturation_jitter: 0.8,
            blur_sigma_max: 1.2,
            noise_sigma_max: 0.08,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceConfig {
    pub s_hid: f64,
    pub v_hid_enabled: bool,
    pub s_lid: f64,
    pub d_lid: f64,
    pub photometric: PhotometricConfig,
    /// Multiplier on `photometric` for the light view.
    pub lid_jitter_scale: f64,
    pub insd_view: InsdView,
    /// Output resolution of the heavy and light views; `None` keeps the input size.
    pub out_size: Option<(usize, usize)>,
    /// Stride of the coarsest feature level, the unit of LID translation.
    pub coarsest_stride: usize,
    pub rng_seed: u64,
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        Self {
            s_hid: 3.5,
            v_hid_enabled: true,
            s_lid: 1.5,
            d_lid: 0.25,
            photometric: PhotometricConfig::default(),
            lid_jitter_scale: 0.5,
            insd_view: InsdView::ShareLid,
            out_size: None,
            coarsest_stride: 8,
            rng_seed: 0,
        }
    }
}

impl DisturbanceConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.photometric;
        let bad = |m: &str| Err(NsaError::Config(m.to_string()));
        if !(self.s_hid >= 1.0) {
            return bad("disturbance.s_hid must be >= 1");
        }
        if !(self.s_lid >= 1.0) {
            return bad("disturbance.s_lid must be >= 1");
        }
        if !(0.0..1.0).contains(&self.d_lid) {
            return bad("disturbance.d_lid must lie in [0, 1)");
        }
        let mags = [
            p.brightness_jitter,
            p.contrast_jitter,
            p.saturation_jitter,
            p.blur_sigma_max,
            p.noise_sigma_max,
            self.lid_jitter_scale,
        ];
        if mags.iter().any(|v| !(*v >= 0.0)) {
            return bad("jitter magnitudes must be >= 0");
        }
        if self.coarsest_stride == 0 {
            return bad("coarsest stride must be positive");
        }
        Ok(())
    }

    /// Seed for the `index`-th sample of a batch.
    pub fn sample_seed(&self, index: u64) -> u64 {
        self.rng_seed ^ index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViewKind {
    Hid,
    Lid,
    Insd,
}

/// Jitter values actually applied to a view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhotometricParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub blur_sigma: f64,
    pub noise_sigma: f64,
    pub noise_seed: u64,
}

impl PhotometricParams {
    pub fn is_noop(&self) -> bool {
        self.brightness == 0.0
            && self.contrast == 1.0
            && self.saturation == 1.0
            && self.blur_sigma == 0.0
            && self.noise_sigma == 0.0
    }

    /// Draw jitter values; always consumes exactly six draws.
    pub fn sample<R: Rng + ?Sized>(cfg: &PhotometricConfig, rng: &mut R) -> Self {
        let sym = |rng: &mut R, m: f64| m * (2.0 * rng.gen::<f64>() - 1.0);
        let brightness = sym(rng, cfg.brightness_jitter);
        let contrast = 1.0 + sym(rng, cfg.contrast_jitter);
        let saturation = 1.0 + sym(rng, cfg.saturation_jitter);
        let blur_sigma = cfg.blur_sigma_max * rng.gen::<f64>();
        let noise_sigma = cfg.noise_sigma_max * rng.gen::<f64>();
        let noise_seed = rng.gen::<u64>();
        Self {
            brightness,
            contrast,
            saturation,
            blur_sigma,
            noise_sigma,
            noise_seed,
        }
    }

    /// Brightness → contrast → saturation → blur → noise, clamped to `[0, 1]`.
    pub fn apply(&self, img: &Image) -> Image {
        let (w, h) = (img.width(), img.height());
        let mut out = img.clone();
        let n = w * h;
        let mean = img.mean() as f32;
        {
            let d = out.data_mut();
            let (b, c, s) = (self.brightness as f32, self.contrast as f32, self.saturation as f32);
            for i in 0..n {
                let mut px = [d[i], d[n + i], d[2 * n + i]];
                for v in &mut px {
                    *v = (*v + b - mean) * c + mean;
                }
                let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                for (ch, v) in px.iter().enumerate() {
                    d[ch * n + i] = gray + (v - gray) * s;
                }
            }
        }
        if self.blur_sigma > 1e-3 {
            out = gaussian_blur(&out, self.blur_sigma);
        }
        if self.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.noise_sigma).expect("finite sigma");
            let mut rng = ChaCha8Rng::seed_from_u64(self.noise_seed);
            for v in out.data_mut() {
                *v += normal.sample(&mut rng) as f32;
            }
        }
        for v in out.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        out
    }
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let norm: f32 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);
    let (w, h) = (img.width(), img.height());
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    let mut tmp = Image::new(w, h);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * img.get(c, y, mirror(x as isize + k as isize - radius, w));
                }
                tmp.set(c, y, x, acc);
            }
        }
    }
    let mut out = Image::new(w, h);
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * tmp.get(c, mirror(y as isize + k as isize - radius, h), x);
                }
                out.set(c, y, x, acc);
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct DisturbedView {
    pub image: ImageSample,
    pub geo: GeoRecord,
    pub kind: ViewKind,
    pub photometric: PhotometricParams,
    /// The view needed reflective padding because the resized input was
    /// smaller than the output resolution.
    pub padded: bool,
}

fn geometric_view(
    img: &ImageSample,
    geo: GeoRecord,
    kind: ViewKind,
    photometric: PhotometricParams,
) -> Result<DisturbedView> {
    let mut image = apply_geo(&geo, img)?;
    if !photometric.is_noop() {
        image.pixels = Arc::new(photometric.apply(&image.pixels));
    }
    Ok(DisturbedView {
        image,
        geo,
        kind,
        photometric,
        padded: geo.reflect_pad,
    })
}

fn out_size(img: &ImageSample, cfg: &DisturbanceConfig) -> (usize, usize) {
    cfg.out_size.unwrap_or((img.width(), img.height()))
}

/// Heavy view: large random zoom, optional mirror, center crop, strong jitter.
pub fn make_hid<R: Rng + ?Sized>(img: &ImageSample, cfg: &DisturbanceConfig, rng: &mut R) -> Result<DisturbedView> {
    let scale = 1.0 + (cfg.s_hid - 1.0) * rng.gen::<f64>();
    let flip = rng.gen::<bool>() && cfg.v_hid_enabled;
    let photometric = PhotometricParams::sample(&cfg.photometric, rng);
    let geo = GeoRecord::centered(
        img.frame,
        (img.width(), img.height()),
        scale,
        flip,
        out_size(img, cfg),
        (0.0, 0.0),
    );
    geometric_view(img, geo, ViewKind::Hid, photometric)
}

/// Light view: small zoom, sub-stride translation, mild jitter.
pub fn make_lid<R: Rng + ?Sized>(img: &ImageSample, cfg: &DisturbanceConfig, rng: &mut R) -> Result<DisturbedView> {
    let scale = 1.0 + (cfg.s_lid - 1.0) * rng.gen::<f64>();
    let max_shift = cfg.d_lid * cfg.coarsest_stride as f64;
    let tx = max_shift * rng.gen::<f64>();
    let ty = max_shift * rng.gen::<f64>();
    let photometric = PhotometricParams::sample(&cfg.photometric.scaled(cfg.lid_jitter_scale), rng);
    let geo = GeoRecord::centered(
        img.frame,
        (img.width(), img.height()),
        scale,
        false,
        out_size(img, cfg),
        (tx, ty),
    );
    geometric_view(img, geo, ViewKind::Lid, photometric)
}

/// Instance-level view. Shared modes re-tag an existing view without
/// recomputation; the dedicated mode is photometric-only.
pub fn make_insd<R: Rng + ?Sized>(
    img: &ImageSample,
    cfg: &DisturbanceConfig,
    rng: &mut R,
    lid_view: Option<&DisturbedView>,
    hid_view: Option<&DisturbedView>,
) -> Result<DisturbedView> {
    let shared = |v: Option<&DisturbedView>, name: &str| -> Result<DisturbedView> {
        let v = v.ok_or_else(|| NsaError::State(format!("instance view shares the {name} view, which is missing")))?;
        Ok(DisturbedView {
            kind: ViewKind::Insd,
            ..v.clone()
        })
    };
    match cfg.insd_view {
        InsdView::ShareLid => shared(lid_view, "light"),
        InsdView::ShareHid => shared(hid_view, "heavy"),
        InsdView::Dedicated => {
            let photometric = PhotometricParams::sample(&cfg.photometric, rng);
            let geo = GeoRecord::identity(img.frame, (img.width(), img.height()));
            geometric_view(img, geo, ViewKind::Insd, photometric)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{transform_labels, BBox, Domain, FrameId, LabelKind, LabelSet};

    fn sample() -> ImageSample {
        let mut img = Image::new(32, 32);
        for y in 0..32 {
            for x in 0..32 {
                img.set(0, y, x, x as f32 / 32.0);
                img.set(1, y, x, y as f32 / 32.0);
                img.set(2, y, x, if (x / 4 + y / 4) % 2 == 0 { 0.8 } else { 0.2 });
            }
        }
        let f = FrameId(7);
        ImageSample::new(img, Domain::Source, f).with_labels(LabelSet::new(
            f,
            LabelKind::GroundTruth,
            vec![BBox::new(4.0, 4.0, 12.0, 14.0, 0), BBox::new(14.0, 10.0, 30.0, 28.0, 1)],
        ))
    }

    fn quiet() -> DisturbanceConfig {
        DisturbanceConfig {
            s_hid: 1.0,
            v_hid_enabled: false,
            s_lid: 1.0,
            d_lid: 0.0,
            photometric: PhotometricConfig::none(),
            ..DisturbanceConfig::default()
        }
    }

    #[test]
    fn degenerate_hid_is_identity() {
        let s = sample();
        let v = make_hid(&s, &quiet(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(v.geo.is_identity());
        assert_eq!(*v.image.pixels, *s.pixels);
    }

    #[test]
    fn degenerate_lid_is_identity() {
        let s = sample();
        let v = make_lid(&s, &quiet(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(v.geo.is_identity());
        assert_eq!(*v.image.pixels, *s.pixels);
    }

    #[test]
    fn views_are_deterministic() {
        let s = sample();
        let cfg = DisturbanceConfig::default();
        let a = make_hid(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = make_hid(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(*a.image.pixels, *b.image.pixels);
        assert_eq!(a.geo, b.geo);
        let a = make_lid(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = make_lid(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(*a.image.pixels, *b.image.pixels);
    }

    #[test]
    fn hid_scale_is_uniform() {
        // U[1, 3.5]: mean 2.25, sd 2.5/√12
        let s = sample();
        let cfg = DisturbanceConfig {
            photometric: PhotometricConfig::none(),
            ..DisturbanceConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let scale = 1.0 + (cfg.s_hid - 1.0) * rng.gen::<f64>();
            let _ = rng.gen::<bool>();
            let _ = PhotometricParams::sample(&cfg.photometric, &mut rng);
            sum += scale;
        }
        let mean = sum / n as f64;
        let sigma = 2.5 / 12f64.sqrt() / (n as f64).sqrt();
        assert!((mean - 2.25).abs() < 3.0 * sigma, "mean {mean}");
        // and the real constructor stays inside the range
        for seed in 0..50 {
            let v = make_hid(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!((1.0..=3.5).contains(&v.geo.scale));
        }
    }

    #[test]
    fn lid_translation_bounded_by_stride_fraction() {
        let s = sample();
        let cfg = DisturbanceConfig::default();
        for seed in 0..200 {
            let v = make_lid(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert!(v.geo.translation.0.abs() <= 2.0 && v.geo.translation.1.abs() <= 2.0);
            assert!((1.0..=1.5).contains(&v.geo.scale));
            assert!(v.geo.translation.0 / cfg.coarsest_stride as f64 <= cfg.d_lid);
        }
    }

    #[test]
    fn shared_insd_reuses_lid_pixels() {
        let s = sample();
        let cfg = DisturbanceConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let lid = make_lid(&s, &cfg, &mut rng).unwrap();
        let ins = make_insd(&s, &cfg, &mut rng, Some(&lid), None).unwrap();
        assert_eq!(ins.kind, ViewKind::Insd);
        assert!(Arc::ptr_eq(&ins.image.pixels, &lid.image.pixels));
        assert!(make_insd(&s, &cfg, &mut rng, None, None).is_err());
    }

    #[test]
    fn dedicated_insd() {
        let s = sample();
        let mut cfg = quiet();
        cfg.insd_view = InsdView::Dedicated;
        let v = make_insd(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(0), None, None).unwrap();
        assert!(v.geo.is_identity());
        assert_eq!(*v.image.pixels, *s.pixels);

        cfg.photometric.noise_sigma_max = 0.1;
        let a = make_insd(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(5), None, None).unwrap();
        let b = make_insd(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(5), None, None).unwrap();
        assert!(a.geo.is_identity());
        assert_eq!(*a.image.pixels, *b.image.pixels);
        assert_ne!(*a.image.pixels, *s.pixels);
    }

    #[test]
    fn surviving_boxes_land_inside_view() {
        let s = sample();
        let cfg = DisturbanceConfig::default();
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in [make_hid(&s, &cfg, &mut rng).unwrap(), make_lid(&s, &cfg, &mut rng).unwrap()] {
                let labels = transform_labels(&v.geo, s.labels.as_ref().unwrap()).unwrap();
                for b in labels.boxes {
                    assert!(b.x_min >= 0.0 && b.y_min >= 0.0);
                    assert!(b.x_max <= v.image.width() as f64 && b.y_max <= v.image.height() as f64);
                }
            }
        }
    }

    #[test]
    fn small_input_is_padded() {
        let s = sample();
        let cfg = DisturbanceConfig {
            out_size: Some((48, 48)),
            s_hid: 1.0,
            ..DisturbanceConfig::default()
        };
        let v = make_hid(&s, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(v.padded);
        assert_eq!((v.image.width(), v.image.height()), (48, 48));
    }
}
