//! Synthetic labelled volumes with organ-like primitives confined to an axial
//! band, and the binary volume file format.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::params::TaskId;
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    Sphere,
    Box,
    Ellipsoid,
    Tube,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub class: String,
    pub shape: Primitive,
    /// Range of the primitive's characteristic radius in millimetres.
    pub size_mm: (f64, f64),
    /// Intensity added inside the organ.
    pub intensity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub task: TaskId,
    /// `(H, W, D)`; the last axis is the body axis.
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    /// Normalized `[low, high)` interval of the body axis where organs live.
    pub band: (f64, f64),
    pub organs: Vec<OrganSpec>,
    pub samples: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Recipe {
    pub fn classes(&self) -> Vec<String> {
        self.organs.iter().map(|o| o.class.clone()).collect()
    }

    /// Slice indices `[z0, z1)` covered by the band.
    pub fn band_slices(&self) -> (usize, usize) {
        let d = self.shape[2] as f64;
        let z0 = (self.band.0 * d).round() as usize;
        let z1 = ((self.band.1 * d).round() as usize).min(self.shape[2]);
        (z0, z1)
    }

    fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Recipe(m));
        if self.shape.contains(&0) {
            return fail(format!("volume shape {:?} has an empty axis", self.shape));
        }
        if self.spacing.iter().any(|s| !(*s > 0.0)) {
            return fail(format!("spacing {:?} must be positive", self.spacing));
        }
        if !(0.0 <= self.band.0 && self.band.0 < self.band.1 && self.band.1 <= 1.0) {
            return fail(format!("band {:?} is not a sub-interval of [0, 1]", self.band));
        }
        if self.organs.is_empty() {
            return fail("recipe declares no organs".into());
        }
        if !(self.noise >= 0.0) {
            return fail(format!("noise {} must be non-negative", self.noise));
        }
        let (z0, z1) = self.band_slices();
        for (i, o) in self.organs.iter().enumerate() {
            if self.organs[..i].iter().any(|p| p.class == o.class) {
                return fail(format!("class `{}` appears twice", o.class));
            }
            let (lo, hi) = o.size_mm;
            if !(lo > 0.0 && lo <= hi) {
                return fail(format!("size range {:?} of `{}` is invalid", o.size_mm, o.class));
            }
            let half = o.shape.half_extents(hi);
            let need_z = 2.0 * half[2] / self.spacing[2];
            if need_z > (z1 - z0) as f64 {
                return fail(format!(
                    "organ `{}` spans {need_z:.1} slices but the band holds {}",
                    o.class,
                    z1 - z0
                ));
            }
            for a in 0..2 {
                if 2.0 * half[a] / self.spacing[a] > self.shape[a] as f64 {
                    return fail(format!("organ `{}` does not fit in-plane", o.class));
                }
            }
        }
        Ok(())
    }
}

impl Primitive {
    /// Half extents in millimetres along `(H, W, D)` for radius `r`.
    fn half_extents(self, r: f64) -> [f64; 3] {
        match self {
            Primitive::Sphere => [r, r, r],
            Primitive::Box => [r, 0.8 * r, 0.75 * r],
            Primitive::Ellipsoid => [1.3 * r, 0.8 * r, r],
            Primitive::Tube => [0.6 * r, 0.6 * r, 1.2 * r],
        }
    }

    /// Whether offset `p` (mm) from the centre lies inside.
    fn contains(self, r: f64, p: [f64; 3]) -> bool {
        let h = self.half_extents(r);
        let q = [p[0] / h[0], p[1] / h[1], p[2] / h[2]];
        match self {
            Primitive::Box => q.iter().all(|v| v.abs() <= 1.0),
            Primitive::Tube => q[0] * q[0] + q[1] * q[1] <= 1.0 && q[2].abs() <= 1.0,
            Primitive::Sphere | Primitive::Ellipsoid => q.iter().map(|v| v * v).sum::<f64>() <= 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    /// `[1, H, W, D]`.
    pub image: Tensor,
    /// `[O, H, W, D]` with entries in `{0, 1}`.
    pub labels: Tensor,
    pub class_names: Vec<String>,
    pub spacing: [f64; 3],
}

const MAX_PLACEMENT_TRIES: usize = 200;

/// Generates `recipe.samples` volumes. Each sample has its own derived seed.
pub fn generate_dataset(recipe: &Recipe) -> Result<Vec<VolumeSample>> {
    recipe.validate()?;
    (0..recipe.samples)
        .map(|i| generate_sample(recipe, seed::derive(recipe.seed, &format!("sample{i}"))))
        .collect()
}

fn generate_sample(recipe: &Recipe, sample_seed: u64) -> Result<VolumeSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let [h, w, d] = recipe.shape;
    let n = h * w * d;
    let sp = recipe.spacing;
    let (z0, z1) = recipe.band_slices();
    let mut occupied = vec![false; n];
    let mut labels = vec![0.0; recipe.organs.len() * n];
    let mut image: Vec<f64> = (0..n).map(|i| ((i % d) as f64 + 0.5) / d as f64).collect();
    for (ci, organ) in recipe.organs.iter().enumerate() {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_TRIES {
            let r = if organ.size_mm.0 < organ.size_mm.1 {
                rng.random_range(organ.size_mm.0..=organ.size_mm.1)
            } else {
                organ.size_mm.0
            };
            let half = organ.shape.half_extents(r);
            let mut centre = [0.0; 3];
            let bounds = [(0.0, h as f64), (0.0, w as f64), (z0 as f64, z1 as f64)];
            for a in 0..3 {
                let hv = half[a] / sp[a];
                let (lo, hi) = (bounds[a].0 + hv, bounds[a].1 - hv);
                centre[a] = if lo < hi { rng.random_range(lo..hi) } else { 0.5 * (bounds[a].0 + bounds[a].1) };
            }
            let voxels = rasterize(organ.shape, r, centre, recipe.shape, sp, (z0, z1));
            if voxels.is_empty() || voxels.iter().any(|&v| occupied[v]) {
                continue;
            }
            for &v in &voxels {
                occupied[v] = true;
                labels[ci * n + v] = 1.0;
                image[v] += organ.intensity;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(Error::Recipe(format!(
                "could not place `{}` without overlap after {MAX_PLACEMENT_TRIES} tries",
                organ.class
            )));
        }
    }
    if recipe.noise > 0.0 {
        let dist = Normal::new(0.0, recipe.noise).expect("noise is finite and non-negative");
        image.iter_mut().for_each(|v| *v += dist.sample(&mut rng));
    }
    Ok(VolumeSample {
        image: Tensor::new([1, h, w, d], image)?,
        labels: Tensor::new([recipe.organs.len(), h, w, d], labels)?,
        class_names: recipe.classes(),
        spacing: sp,
    })
}

/// Voxel indices inside the primitive, restricted to slices `[z0, z1)`.
fn rasterize(
    shape: Primitive,
    r: f64,
    centre: [f64; 3],
    dims: [usize; 3],
    sp: [f64; 3],
    (z0, z1): (usize, usize),
) -> Vec<usize> {
    let [h, w, d] = dims;
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            for k in z0..z1 {
                let p = [
                    (i as f64 + 0.5 - centre[0]) * sp[0],
                    (j as f64 + 0.5 - centre[1]) * sp[1],
                    (k as f64 + 0.5 - centre[2]) * sp[2],
                ];
                if shape.contains(r, p) {
                    out.push((i * w + j) * d + k);
                }
            }
        }
    }
    out
}

fn organ(class: &str, shape: Primitive, size_mm: (f64, f64), intensity: f64) -> OrganSpec {
    OrganSpec {
        class: class.into(),
        shape,
        size_mm,
        intensity,
    }
}

/// The three-task sequence used for desk experiments: disjoint body-axis
/// bands, a bright base task, a dark second task and a low-contrast third task
/// that shares a class name with the base.
pub fn desk_sequence(shape: [usize; 3], samples: usize, seed: u64) -> Vec<Recipe> {
    let third = 1.0 / 3.0;
    let mk = |task: u32, band: (f64, f64), organs: Vec<OrganSpec>| Recipe {
        task: TaskId(task),
        shape,
        spacing: [1.0, 1.0, 2.0],
        band,
        organs,
        samples,
        noise: 0.05,
        seed: seed::derive(seed, &format!("recipe{task}")),
    };
    vec![
        mk(
            0,
            (0.0, third),
            vec![
                organ("liver", Primitive::Ellipsoid, (4.0, 4.8), 0.8),
                organ("esophagus", Primitive::Tube, (3.5, 4.0), 0.5),
            ],
        ),
        mk(
            1,
            (third, 2.0 * third),
            vec![
                organ("heart", Primitive::Sphere, (4.5, 5.5), -0.6),
                organ("aorta", Primitive::Box, (3.5, 4.5), -0.3),
            ],
        ),
        mk(
            2,
            (2.0 * third, 1.0),
            vec![
                organ("esophagus", Primitive::Box, (5.0, 6.0), 0.3),
                organ("tumor", Primitive::Sphere, (4.5, 5.0), 0.25),
            ],
        ),
    ]
}

/// Seeded shuffle then an `(1 - test_fraction) : test_fraction` split.
pub fn split<T: Clone>(items: &[T], test_fraction: f64, seed: u64) -> (Vec<T>, Vec<T>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = (items.len() as f64 * test_fraction).round() as usize;
    let test = idx[..n_test].iter().map(|&i| items[i].clone()).collect();
    let train = idx[n_test..].iter().map(|&i| items[i].clone()).collect();
    (train, test)
}

const VOLUME_MAGIC: [u8; 4] = *b"LVOL";
const VOLUME_VERSION: u32 = 1;

/// Serializes a sample: magic, version, three u64 extents, three f64
/// spacings, f32 image, u32 class count, then per class a length-prefixed
/// name and a packed bitmask.
pub fn write_volume(sample: &VolumeSample, path: &Path) -> Result<()> {
    let bytes = encode_volume(sample)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_volume(sample: &VolumeSample) -> Result<Vec<u8>> {
    let s = sample.image.shape();
    if s.len() != 4 || s[0] != 1 {
        return Err(Error::dim(format!("volume image must be [1, H, W, D], got {s:?}")));
    }
    let n = s[1] * s[2] * s[3];
    let mut out = Vec::with_capacity(64 + n * 4 + n / 8 * sample.class_names.len());
    out.extend_from_slice(&VOLUME_MAGIC);
    out.extend_from_slice(&VOLUME_VERSION.to_le_bytes());
    for &e in &s[1..] {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for sp in sample.spacing {
        out.extend_from_slice(&sp.to_le_bytes());
    }
    for &v in sample.image.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out.extend_from_slice(&(sample.class_names.len() as u32).to_le_bytes());
    for (c, name) in sample.class_names.iter().enumerate() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let mask = &sample.labels.data()[c * n..(c + 1) * n];
        let mut packed = vec![0u8; n.div_ceil(8)];
        for (i, &m) in mask.iter().enumerate() {
            if m > 0.5 {
                packed[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&packed);
    }
    Ok(out)
}

pub fn read_volume(path: &Path) -> Result<VolumeSample> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

pub fn decode_volume(bytes: &[u8]) -> Result<VolumeSample> {
    let mut r = Reader { b: bytes };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().expect("four bytes");
    if magic != VOLUME_MAGIC {
        return Err(CheckpointError::BadMagic { expected: VOLUME_MAGIC, found: magic }.into());
    }
    let version = r.u32("version")?;
    if version != VOLUME_VERSION {
        return Err(CheckpointError::VersionMismatch { expected: VOLUME_VERSION, found: version }.into());
    }
    let mut ext = [0usize; 3];
    for e in &mut ext {
        *e = r.u64("extents")? as usize;
    }
    if ext.contains(&0) {
        return Err(CheckpointError::Malformed(format!("volume extents {ext:?}")).into());
    }
    let mut spacing = [0.0; 3];
    for s in &mut spacing {
        *s = f64::from_le_bytes(r.take(8, "spacing")?.try_into().expect("eight bytes"));
    }
    let n = ext
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .filter(|&n| n <= r.b.len() / 4)
        .ok_or(CheckpointError::Truncated("image"))?;
    let raw = r.take(n * 4, "image")?;
    let image: Vec<f64> = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
        .collect();
    let classes = r.u32("class count")? as usize;
    let mut names = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..classes {
        let len = r.u32("class name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "class name")?)
            .map_err(|_| CheckpointError::Malformed("class name is not UTF-8".into()))?;
        names.push(name.to_string());
        let packed = r.take(n.div_ceil(8), "mask")?;
        labels.extend((0..n).map(|i| f64::from((packed[i / 8] >> (i % 8)) & 1)));
    }
    if !r.b.is_empty() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", r.b.len())).into());
    }
    let [h, w, d] = ext;
    Ok(VolumeSample {
        image: Tensor::new([1, h, w, d], image)?,
        labels: if classes == 0 {
            Tensor::zeros([1, h, w, d])?
        } else {
            Tensor::new([classes, h, w, d], labels)?
        },
        class_names: names,
        spacing,
    })
}

pub(crate) struct Reader<'a> {
    pub b: &'a [u8],
}

impl<'a> Reader<'a> {
    pub fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        if self.b.len() < n {
            return Err(CheckpointError::Truncated(what));
        }
        let (head, tail) = self.b.split_at(n);
        self.b = tail;
        Ok(head)
    }

    pub fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    pub fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("four bytes")))
    }

    pub fn u64(&mut self, what: &'static str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("eight bytes")))
    }
}

pub(crate) fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
