//! Deterministic toy person dataset.
//!
//! Identity is carried by the body (garment colors and silhouette); content by
//! position, background color (tied to the camera), background brightness and
//! background texture. Body pixels are therefore bit-identical across all
//! images of one identity, which makes disentanglement measurable.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::{check_generator_divisibility, normalize, ImageSize, Normalization};
use super::manifest::{DatasetManifest, ManifestEntry};
use super::{Domain, PersonImage, Split};
use crate::parallel::{map_range, try_map_range, Parallelism};
use crate::{Error, Result};

/// Ranges of the per-identity factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdentityFactors {
    /// Garment colors are drawn per channel from `[color_min, 255]`.
    pub color_min: u8,
    /// Body width as a fraction of image width, `(min, max)`.
    pub width_fraction: (f32, f32),
    /// Fraction of the body height taken by the upper garment, `(min, max)`.
    pub torso_fraction: (f32, f32),
}

impl Default for IdentityFactors {
    fn default() -> Self {
        Self {
            color_min: 0,
            width_fraction: (0.35, 0.6),
            torso_fraction: (0.35, 0.6),
        }
    }
}

/// Ranges of the per-image factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ContentFactors {
    /// Maximum horizontal shift of the body, fraction of image width.
    pub max_offset: f32,
    /// Per-image jitter added to the camera's background color.
    pub background_jitter: u8,
    /// Background gain range.
    pub brightness: (f32, f32),
    /// Amplitude of the horizontal background stripes.
    pub texture: u8,
}

impl Default for ContentFactors {
    fn default() -> Self {
        Self {
            max_offset: 0.15,
            background_jitter: 30,
            brightness: (0.6, 1.2),
            texture: 20,
        }
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub image_size: ImageSize,
    pub seed: u64,
    pub num_cameras: u32,
    pub domain: Domain,
    /// Generator depth the images must be compatible with.
    pub generator_blocks: usize,
    pub identity_factors: IdentityFactors,
    pub content_factors: ContentFactors,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_identities: 16,
            images_per_identity: 8,
            image_size: ImageSize::new(48, 16),
            seed: 7,
            num_cameras: 4,
            domain: Domain::Source,
            generator_blocks: 4,
            identity_factors: IdentityFactors::default(),
            content_factors: ContentFactors::default(),
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::config("synthetic dataset needs at least 2 identities"));
        }
        if self.images_per_identity < 2 {
            return Err(Error::config("synthetic dataset needs at least 2 images per identity"));
        }
        if self.num_cameras == 0 {
            return Err(Error::config("synthetic dataset needs at least 1 camera"));
        }
        check_generator_divisibility(self.image_size, self.generator_blocks)
    }

    /// Split of image `j` of identity `i`; every identity keeps at least one
    /// training image.
    pub fn split_of(&self, identity: usize, image: usize) -> Split {
        let n = self.images_per_identity;
        let gallery = match n {
            0..=2 => 0,
            3..=5 => 1,
            _ => 2,
        };
        if n == 2 {
            return match (image, identity % 2) {
                (0, _) => Split::Train,
                (_, 0) => Split::Query,
                _ => Split::Gallery,
            };
        }
        if image == n - 1 {
            Split::Query
        } else if image + 1 + gallery >= n {
            Split::Gallery
        } else {
            Split::Train
        }
    }

    pub fn camera_of(&self, identity: usize, image: usize) -> u32 {
        ((identity + image) % self.num_cameras as usize) as u32 + 1
    }

    pub fn file_name(&self, identity: usize, image: usize) -> String {
        format!(
            "{identity:04}_c{}s1_{image:06}_00.png",
            self.camera_of(identity, image)
        )
    }
}

/// The identity factors realized for one identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentityLook {
    pub upper: [u8; 3],
    pub lower: [u8; 3],
    pub width_fraction: f32,
    pub torso_fraction: f32,
}

fn mix(seed: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut z = seed;
    for &p in parts {
        z = z.wrapping_add(p.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

fn identity_look(spec: &SyntheticSpec, identity: usize) -> IdentityLook {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, &[1, identity as u64]));
    let f = &spec.identity_factors;
    let mut color = || {
        let mut c = [0u8; 3];
        for v in &mut c {
            *v = rng.random_range(f.color_min..=255);
        }
        c
    };
    let upper = color();
    let lower = color();
    let width_fraction = rng.random_range(f.width_fraction.0..=f.width_fraction.1);
    let torso_fraction = rng.random_range(f.torso_fraction.0..=f.torso_fraction.1);
    IdentityLook {
        upper,
        lower,
        width_fraction,
        torso_fraction,
    }
}

fn camera_background(domain: Domain, camera: u32) -> [f32; 3] {
    // Source cameras sit in cool tones, target cameras in warm ones.
    let t = camera as f32 * 0.9;
    let base = match domain {
        Domain::Source => [60.0, 110.0, 150.0],
        Domain::Target => [150.0, 110.0, 60.0],
    };
    [
        base[0] + 40.0 * t.sin(),
        base[1] + 40.0 * (t * 1.7).cos(),
        base[2] + 40.0 * (t * 2.3).sin(),
    ]
}

fn render(spec: &SyntheticSpec, look: &IdentityLook, identity: usize, image: usize) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(spec.seed, &[2, identity as u64, image as u64]));
    let c = &spec.content_factors;
    let (h, w) = (spec.image_size.height as i64, spec.image_size.width as i64);
    let camera = spec.camera_of(identity, image);

    let base = camera_background(spec.domain, camera);
    let jitter = c.background_jitter as f32;
    let mut bg = [0f32; 3];
    for (ch, v) in bg.iter_mut().enumerate() {
        let j = if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
        *v = base[ch] + j;
    }
    let gain = rng.random_range(c.brightness.0..=c.brightness.1);
    let phase = rng.random_range(0.0..std::f32::consts::TAU);
    let period = rng.random_range(3.0f32..9.0);
    let max_shift = (c.max_offset * w as f32).floor() as i64;
    let shift = if max_shift > 0 { rng.random_range(-max_shift..=max_shift) } else { 0 };
    let vshift = if h >= 16 { rng.random_range(-(h / 16)..=h / 16) } else { 0 };

    let body_w = ((look.width_fraction * w as f32).round() as i64).max(2);
    let body_h = ((0.8 * h as f32).round() as i64).max(2);
    let top = (h - body_h) / 2 + vshift;
    let left = (w - body_w) / 2 + shift;
    let torso_h = ((look.torso_fraction * body_h as f32).round() as i64).clamp(1, body_h - 1);

    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        let stripe = c.texture as f32 * ((y as f32 / period) * std::f32::consts::TAU + phase).sin();
        for x in 0..w {
            let inside = x >= left && x < left + body_w && y >= top && y < top + body_h;
            let px = if inside {
                if y < top + torso_h {
                    look.upper
                } else {
                    look.lower
                }
            } else {
                let mut p = [0u8; 3];
                for ch in 0..3 {
                    p[ch] = ((bg[ch] + stripe) * gain).round().clamp(0.0, 255.0) as u8;
                }
                p
            };
            img.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    img
}

/// Rendered images plus their manifest (root is empty until written).
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticSpec,
    pub images: Vec<RgbImage>,
    pub manifest: DatasetManifest,
}

impl SyntheticDataset {
    pub fn look(&self, identity: usize) -> IdentityLook {
        identity_look(&self.spec, identity)
    }

    /// Writes split folders of PNG files plus `manifest.csv` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<DatasetManifest> {
        for split in Split::ALL {
            std::fs::create_dir_all(dir.join(split.as_str()))?;
        }
        try_map_range(self.images.len(), Parallelism::Parallel, |i| {
            let path = dir.join(&self.manifest.entries()[i].path);
            self.images[i].save(&path).map_err(Error::from)
        })?;
        let manifest = DatasetManifest::from_entries(dir, self.manifest.entries().to_vec())?;
        manifest.write_csv(&dir.join("manifest.csv"))?;
        Ok(manifest)
    }

    /// Normalized in-memory images for the given manifest indices.
    pub fn person_images(&self, indices: &[usize], norm: &Normalization) -> Result<Vec<PersonImage>> {
        indices
            .iter()
            .map(|&i| {
                let e = &self.manifest.entries()[i];
                Ok(PersonImage {
                    pixels: normalize(&self.images[i], norm)?,
                    identity: e.identity,
                    camera: e.camera,
                    domain: self.spec.domain,
                    path: e.path.clone(),
                })
            })
            .collect()
    }
}

/// Renders the dataset described by `spec`.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    make_synthetic_with(spec, Parallelism::default())
}

pub fn make_synthetic_with(spec: &SyntheticSpec, par: Parallelism) -> Result<SyntheticDataset> {
    spec.validate()?;
    let n = spec.images_per_identity;
    let total = spec.num_identities * n;
    let looks: Vec<IdentityLook> = (0..spec.num_identities).map(|i| identity_look(spec, i)).collect();
    let images = map_range(total, par, |k| render(spec, &looks[k / n], k / n, k % n));
    let entries = (0..total)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            let split = spec.split_of(i, j);
            ManifestEntry {
                path: format!("{split}/{}", spec.file_name(i, j)),
                identity: i as i64,
                camera: spec.camera_of(i, j),
                split,
            }
        })
        .collect();
    Ok(SyntheticDataset {
        spec: spec.clone(),
        images,
        manifest: DatasetManifest::from_entries("", entries)?,
    })
}
