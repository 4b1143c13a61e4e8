//! Synthetic textured-object images with localized defects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::{Image, Mask};

pub const MAX_PLACEMENT_TRIES: usize = 100;
pub const MIN_DEFECT_FRACTION: f64 = 0.005;
pub const MAX_DEFECT_FRACTION: f64 = 0.10;
pub const BRIGHT_DEFECT: f32 = 0.95;
/// Darker than the object, brighter than the background.
pub const DARK_DEFECT: f32 = 0.28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObjectKind {
    Disk,
    Square,
}

impl ObjectKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectKind::Disk => "disk",
            ObjectKind::Square => "square",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "disk" => Ok(ObjectKind::Disk),
            "square" => Ok(ObjectKind::Square),
            other => Err(Error::Invalid(format!("unknown object kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DefectKind {
    BrightSpot,
    DarkSpot,
    Scratch,
}

pub const DEFECT_KINDS: [DefectKind; 3] =
    [DefectKind::BrightSpot, DefectKind::DarkSpot, DefectKind::Scratch];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub object: ObjectKind,
    /// Mean intensity of the object surface.
    pub object_intensity: f32,
    pub texture_amplitude: f32,
    /// Spatial frequency of the sinusoidal texture, in cycles per pixel.
    pub texture_frequency: f32,
    pub background: f32,
    pub pixel_noise: f32,
    pub defect_kinds: Vec<DefectKind>,
    /// Spot radius range in pixels (inclusive).
    pub spot_radius: (usize, usize),
    /// Scratch length range in pixels (inclusive).
    pub scratch_length: (usize, usize),
    pub scratch_width: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            object: ObjectKind::Disk,
            object_intensity: 0.55,
            texture_amplitude: 0.08,
            texture_frequency: 0.15,
            background: 0.12,
            pixel_noise: 0.02,
            defect_kinds: DEFECT_KINDS.to_vec(),
            spot_radius: (3, 7),
            scratch_length: (14, 28),
            scratch_width: 2,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Invalid(format!("image_size {} too small", self.image_size)));
        }
        if self.defect_kinds.is_empty() {
            return Err(Error::Invalid("no defect kinds".into()));
        }
        if self.spot_radius.0 > self.spot_radius.1 || self.scratch_length.0 > self.scratch_length.1 {
            return Err(Error::Invalid("empty defect size range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    /// 1 when the image contains a defect.
    pub label: u8,
    /// Pixel ground truth (all zero for normal images).
    pub mask: Mask,
    pub object_mask: Mask,
    pub object: ObjectKind,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

pub fn caption(object: ObjectKind, defective: bool) -> String {
    if defective {
        format!("a photo of a {} with a defect", object.name())
    } else {
        format!("a photo of a {}", object.name())
    }
}

struct Layout {
    cy: f32,
    cx: f32,
    size: f32,
    phase: f32,
    angle: f32,
}

fn draw_object<R: Rng>(spec: &SyntheticSpec, object: ObjectKind, rng: &mut R) -> (Image, Mask) {
    let n = spec.image_size;
    let nf = n as f32;
    let jitter = nf * 0.06;
    let layout = Layout {
        cy: nf / 2.0 + rng.random_range(-jitter..=jitter),
        cx: nf / 2.0 + rng.random_range(-jitter..=jitter),
        size: nf * rng.random_range(0.27..=0.33),
        phase: rng.random_range(0.0..std::f32::consts::TAU),
        angle: rng.random_range(0.0..std::f32::consts::PI),
    };
    let mut img = Image::filled(n, n, spec.background);
    let mut mask = Mask::empty(n, n);
    let (sa, ca) = layout.angle.sin_cos();
    let w = std::f32::consts::TAU * spec.texture_frequency;
    for y in 0..n {
        for x in 0..n {
            let (dy, dx) = (y as f32 + 0.5 - layout.cy, x as f32 + 0.5 - layout.cx);
            let inside = match object {
                ObjectKind::Disk => (dy * dy + dx * dx).sqrt() <= layout.size,
                ObjectKind::Square => dy.abs() <= layout.size * 0.9 && dx.abs() <= layout.size * 0.9,
            };
            let noise = spec.pixel_noise * rng.random_range(-1.0f32..=1.0);
            let v = if inside {
                mask.set(y, x, true);
                let u = dx * ca + dy * sa;
                spec.object_intensity + spec.texture_amplitude * (w * u + layout.phase).sin()
            } else {
                spec.background
            };
            img.set(y, x, (v + noise).clamp(0.0, 1.0));
        }
    }
    (img, mask)
}

fn rasterize_defect<R: Rng>(
    spec: &SyntheticSpec,
    kind: DefectKind,
    rng: &mut R,
) -> Mask {
    let n = spec.image_size;
    let mut m = Mask::empty(n, n);
    let cy = rng.random_range(0.0..n as f32);
    let cx = rng.random_range(0.0..n as f32);
    match kind {
        DefectKind::BrightSpot | DefectKind::DarkSpot => {
            let r = rng.random_range(spec.spot_radius.0..=spec.spot_radius.1) as f32;
            for y in 0..n {
                for x in 0..n {
                    let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                    if dy * dy + dx * dx <= r * r {
                        m.set(y, x, true);
                    }
                }
            }
        }
        DefectKind::Scratch => {
            let len = rng.random_range(spec.scratch_length.0..=spec.scratch_length.1) as f32;
            let theta = rng.random_range(0.0..std::f32::consts::PI);
            let (s, c) = theta.sin_cos();
            let half_w = spec.scratch_width as f32 / 2.0;
            for y in 0..n {
                for x in 0..n {
                    let (dy, dx) = (y as f32 + 0.5 - cy, x as f32 + 0.5 - cx);
                    let along = dx * c + dy * s;
                    let across = -dx * s + dy * c;
                    if along.abs() <= len / 2.0 && across.abs() <= half_w {
                        m.set(y, x, true);
                    }
                }
            }
        }
    }
    m
}

/// Paint a defect strictly inside the object; rejection-sampled.
fn add_defect<R: Rng>(
    spec: &SyntheticSpec,
    image: &mut Image,
    object_mask: &Mask,
    rng: &mut R,
) -> Result<Mask> {
    let area = (spec.image_size * spec.image_size) as f64;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let kind = spec.defect_kinds[rng.random_range(0..spec.defect_kinds.len())];
        let m = rasterize_defect(spec, kind, rng);
        let count = m.count() as f64;
        let frac = count / area;
        let inside = m
            .bits
            .iter()
            .zip(&object_mask.bits)
            .all(|(&d, &o)| d == 0 || o == 1);
        if !inside || !(MIN_DEFECT_FRACTION..=MAX_DEFECT_FRACTION).contains(&frac) {
            continue;
        }
        let value = match kind {
            DefectKind::BrightSpot => BRIGHT_DEFECT,
            DefectKind::DarkSpot => DARK_DEFECT,
            DefectKind::Scratch => {
                if rng.random_bool(0.5) {
                    BRIGHT_DEFECT
                } else {
                    DARK_DEFECT
                }
            }
        };
        for (i, &b) in m.bits.iter().enumerate() {
            if b == 1 {
                let jitter = spec.pixel_noise * rng.random_range(-1.0f32..=1.0);
                image.pixels[i] = (value + jitter).clamp(0.0, 1.0);
            }
        }
        return Ok(m);
    }
    Err(Error::DefectPlacement(MAX_PLACEMENT_TRIES))
}

/// One image of `object`, defective or not.
pub fn gen_sample<R: Rng>(
    spec: &SyntheticSpec,
    object: ObjectKind,
    defective: bool,
    rng: &mut R,
) -> Result<Sample> {
    let (mut image, object_mask) = draw_object(spec, object, rng);
    let n = spec.image_size;
    let mask = if defective {
        add_defect(spec, &mut image, &object_mask, rng)?
    } else {
        Mask::empty(n, n)
    };
    Ok(Sample {
        image,
        label: defective as u8,
        mask,
        object_mask,
        object,
        caption: caption(object, defective),
    })
}

/// `k_shots` normal training images and a balanced test set of `n_test`.
pub fn gen_dataset(spec: &SyntheticSpec, k_shots: usize, n_test: usize, seed: u64) -> Result<DatasetSplit> {
    spec.validate()?;
    if k_shots == 0 {
        return Err(Error::NoShots);
    }
    if n_test % 2 != 0 {
        return Err(Error::Invalid(format!("n_test must be even, got {n_test}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = (0..k_shots)
        .map(|_| gen_sample(spec, spec.object, false, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let test = (0..n_test)
        .map(|i| gen_sample(spec, spec.object, i % 2 == 1, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(DatasetSplit { train, test })
}

/// Mixed-object, half-defective image/caption pairs for pretraining.
pub fn gen_corpus(spec: &SyntheticSpec, n: usize, seed: u64) -> Result<Vec<Sample>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let object = if (i / 2) % 2 == 0 {
                ObjectKind::Disk
            } else {
                ObjectKind::Square
            };
            gen_sample(spec, object, i % 2 == 1, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let spec = SyntheticSpec::default();
        let a = gen_dataset(&spec, 2, 10, 42).unwrap();
        let b = gen_dataset(&spec, 2, 10, 42).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 2);
        assert!(a.train.iter().all(|s| s.label == 0 && s.mask.count() == 0));
        assert_eq!(a.test.iter().filter(|s| s.label == 1).count(), 5);
        assert_ne!(a, gen_dataset(&spec, 2, 10, 43).unwrap());
    }

    #[test]
    fn defects_lie_inside_object_with_bounded_area() {
        for object in [ObjectKind::Disk, ObjectKind::Square] {
            let spec = SyntheticSpec {
                object,
                ..Default::default()
            };
            let d = gen_dataset(&spec, 1, 40, 7).unwrap();
            let area = (spec.image_size * spec.image_size) as f64;
            for s in d.test.iter().filter(|s| s.label == 1) {
                let frac = s.mask.count() as f64 / area;
                assert!((MIN_DEFECT_FRACTION..=MAX_DEFECT_FRACTION).contains(&frac));
                for (&m, &o) in s.mask.bits.iter().zip(&s.object_mask.bits) {
                    assert!(m == 0 || o == 1);
                }
            }
        }
    }

    #[test]
    fn impossible_placement_fails() {
        let spec = SyntheticSpec {
            spot_radius: (40, 40),
            scratch_length: (200, 200),
            ..Default::default()
        };
        assert!(matches!(
            gen_dataset(&spec, 1, 2, 0),
            Err(Error::DefectPlacement(MAX_PLACEMENT_TRIES))
        ));
    }

    #[test]
    fn bad_arguments() {
        let spec = SyntheticSpec::default();
        assert!(gen_dataset(&spec, 0, 2, 0).is_err());
        assert!(gen_dataset(&spec, 1, 3, 0).is_err());
    }

    #[test]
    fn corpus_mixes_objects_and_captions() {
        let c = gen_corpus(&SyntheticSpec::default(), 8, 1).unwrap();
        assert_eq!(c[0].caption, "a photo of a disk");
        assert_eq!(c[1].caption, "a photo of a disk with a defect");
        assert_eq!(c[2].caption, "a photo of a square");
        assert_eq!(c[3].caption, "a photo of a square with a defect");
    }
}
