//! Multi-modal volumes: data model, `.mmv` container, z-score normalization
//! and a synthetic lesion phantom.
//!
//! Grids are row-major with z fastest: voxel `(x, y, z)` lives at
//! `(x * ny + y) * nz + z`.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MODALITIES: [&str; 4] = ["T1", "T1ce", "T2", "FLAIR"];

const MAGIC: &str = "MMV1";
const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("degenerate modality {0:?}: no nonzero voxels")]
    DegenerateModality(String),
    #[error("payload size mismatch: {0}")]
    PayloadSize(String),
    #[error("unknown data type tag {0:?}")]
    UnknownDtype(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("lesions cannot fit: {0}")]
    LesionFit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Dims = [usize; 3];

#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalVolume {
    dims: Dims,
    spacing: [f64; 3],
    modalities: Vec<String>,
    data: Vec<Vec<f32>>,
    mask: Option<Vec<u8>>,
}

impl MultiModalVolume {
    pub fn new(
        dims: Dims,
        spacing: [f64; 3],
        modalities: Vec<String>,
        data: Vec<Vec<f32>>,
        mask: Option<Vec<u8>>,
    ) -> Result<Self, VolumeError> {
        let n = dims.iter().product::<usize>();
        if n == 0 {
            return Err(VolumeError::Invalid(format!("empty dims {dims:?}")));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(VolumeError::Invalid(format!("spacing {spacing:?} must be positive")));
        }
        if modalities.is_empty() {
            return Err(VolumeError::Invalid("no modalities".into()));
        }
        for (i, m) in modalities.iter().enumerate() {
            if m.is_empty() || m.contains(char::is_whitespace) {
                return Err(VolumeError::Invalid(format!("bad modality name {m:?}")));
            }
            if modalities[..i].contains(m) {
                return Err(VolumeError::Invalid(format!("duplicate modality {m:?}")));
            }
        }
        if data.len() != modalities.len() {
            return Err(VolumeError::Invalid(format!(
                "{} grids for {} modalities",
                data.len(),
                modalities.len()
            )));
        }
        if let Some(bad) = data.iter().find(|g| g.len() != n) {
            return Err(VolumeError::Invalid(format!("grid of {} voxels, dims need {n}", bad.len())));
        }
        if mask.as_ref().is_some_and(|m| m.len() != n) {
            return Err(VolumeError::Invalid("mask dims differ from data".into()));
        }
        Ok(Self {
            dims,
            spacing,
            modalities,
            data,
            mask,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn modalities(&self) -> &[String] {
        &self.modalities
    }

    pub fn modality_index(&self, name: &str) -> Option<usize> {
        self.modalities.iter().position(|m| m == name)
    }

    pub fn channel(&self, m: usize) -> &[f32] {
        &self.data[m]
    }

    pub fn channels(&self) -> &[Vec<f32>] {
        &self.data
    }

    pub fn mask(&self) -> Option<&[u8]> {
        self.mask.as_deref()
    }

    pub fn with_mask(mut self, mask: Option<Vec<u8>>) -> Result<Self, VolumeError> {
        if mask.as_ref().is_some_and(|m| m.len() != self.n_voxels()) {
            return Err(VolumeError::Invalid("mask dims differ from data".into()));
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        linear_index(self.dims, [x, y, z])
    }

    /// World coordinate (mm) of voxel `idx`: grid index times spacing.
    pub fn world(&self, idx: usize) -> [f64; 3] {
        let [x, y, z] = grid_coords(self.dims, idx);
        [
            x as f64 * self.spacing[0],
            y as f64 * self.spacing[1],
            z as f64 * self.spacing[2],
        ]
    }

    /// Upper corner of the voxel-centre bounding box in world units.
    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| (self.dims[a] - 1) as f64 * self.spacing[a])
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), VolumeError> {
        let [nx, ny, nz] = self.dims;
        let [sx, sy, sz] = self.spacing;
        let header = format!(
            "{MAGIC}\ndims {nx} {ny} {nz}\nspacing {sx:?} {sy:?} {sz:?}\nmodalities {}\ndtype f32\nhas_mask {}\nend\n",
            self.modalities.join(" "),
            u8::from(self.mask.is_some())
        );
        w.write_all(header.as_bytes())?;
        for grid in &self.data {
            let mut buf = Vec::with_capacity(grid.len() * 4);
            for v in grid {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        if let Some(mask) = &self.mask {
            w.write_all(mask)?;
        }
        Ok(())
    }

    pub fn read_from(r: impl Read) -> Result<Self, VolumeError> {
        let mut r = BufReader::new(r);
        let field = |r: &mut BufReader<_>, key: &str| -> Result<Vec<String>, VolumeError> {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(VolumeError::Header(format!("missing {key:?}")));
            }
            let mut parts = line.split_whitespace().map(str::to_string);
            match parts.next() {
                Some(k) if k == key => Ok(parts.collect()),
                other => Err(VolumeError::Header(format!("expected {key:?}, found {other:?}"))),
            }
        };
        field(&mut r, MAGIC)?;
        let dims = parse_triple::<usize>(&field(&mut r, "dims")?, "dims")?;
        let spacing = parse_triple::<f64>(&field(&mut r, "spacing")?, "spacing")?;
        let modalities = field(&mut r, "modalities")?;
        let dtype = field(&mut r, "dtype")?;
        if dtype != ["f32"] {
            return Err(VolumeError::UnknownDtype(dtype.join(" ")));
        }
        let has_mask = match field(&mut r, "has_mask")?.as_slice() {
            [f] if f == "0" => false,
            [f] if f == "1" => true,
            other => return Err(VolumeError::Header(format!("bad has_mask {other:?}"))),
        };
        field(&mut r, "end")?;

        let n: usize = dims.iter().product();
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        let expected = modalities.len() * n * 4 + if has_mask { n } else { 0 };
        if payload.len() != expected {
            return Err(VolumeError::PayloadSize(format!(
                "expected {expected} bytes, found {}",
                payload.len()
            )));
        }
        let data = payload[..modalities.len() * n * 4]
            .chunks_exact(n * 4)
            .map(|grid| {
                grid.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect()
            })
            .collect();
        let mask = has_mask.then(|| payload[modalities.len() * n * 4..].to_vec());
        Self::new(dims, spacing, modalities, data, mask)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VolumeError> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VolumeError> {
        Self::read_from(std::fs::File::open(path)?)
    }
}

fn parse_triple<T: std::str::FromStr>(parts: &[String], key: &str) -> Result<[T; 3], VolumeError> {
    let vals: Vec<T> = parts
        .iter()
        .map(|p| p.parse::<T>())
        .collect::<Result<_, _>>()
        .map_err(|_| VolumeError::Header(format!("unparsable {key}: {parts:?}")))?;
    vals.try_into()
        .map_err(|_| VolumeError::Header(format!("{key} needs 3 values")))
}

pub fn linear_index(dims: Dims, [x, y, z]: [usize; 3]) -> usize {
    (x * dims[1] + y) * dims[2] + z
}

pub fn grid_coords(dims: Dims, idx: usize) -> [usize; 3] {
    let z = idx % dims[2];
    let y = (idx / dims[2]) % dims[1];
    let x = idx / (dims[1] * dims[2]);
    [x, y, z]
}

/// Background voxels are exactly `+0.0`; anything else (including `-0.0`)
/// is foreground.
fn is_foreground(v: f32) -> bool {
    v.to_bits() != 0
}

/// Per-modality z-score over foreground voxels; background stays `+0.0`.
///
/// A foreground voxel that lands exactly on the mean is stored as `-0.0`, so
/// the foreground set, and therefore the statistics, survive a second pass.
pub fn normalize(vol: &MultiModalVolume) -> Result<MultiModalVolume, VolumeError> {
    let mut data = Vec::with_capacity(vol.data.len());
    for (name, grid) in vol.modalities.iter().zip(&vol.data) {
        let (mut n, mut sum) = (0usize, 0.0f64);
        for &v in grid.iter().filter(|v| is_foreground(**v)) {
            n += 1;
            sum += v as f64;
        }
        if n == 0 {
            return Err(VolumeError::DegenerateModality(name.clone()));
        }
        let mean = sum / n as f64;
        let var = grid
            .iter()
            .filter(|v| is_foreground(**v))
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / n as f64;
        let std = var.max(VARIANCE_FLOOR).sqrt();
        let out = grid
            .iter()
            .map(|&v| {
                if !is_foreground(v) {
                    return 0.0;
                }
                let z = ((v as f64 - mean) / std) as f32;
                if z == 0.0 {
                    -0.0
                } else {
                    z
                }
            })
            .collect();
        data.push(out);
    }
    Ok(MultiModalVolume {
        data,
        ..vol.clone()
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: Dims,
    pub n_lesions: usize,
    /// (min, max) lesion radius in voxels.
    pub lesion_radius_range: (f64, f64),
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [48, 48, 48],
            n_lesions: 2,
            lesion_radius_range: (6.0, 9.0),
            noise_sigma: 0.05,
            seed: 42,
        }
    }
}

// Tissue signatures in (T1, T1ce, T2, FLAIR) order.
const WHITE_MATTER: [f64; 4] = [1.0, 0.9, 0.55, 0.6];
const GREY_MATTER: [f64; 4] = [0.7, 0.7, 0.8, 0.75];
const LESION: [f64; 4] = [0.5, 1.3, 1.4, 1.6];

/// Semi-axes of the brain ellipsoid as a fraction of each dimension.
const BRAIN_FRACTION: f64 = 0.42;
/// White-matter core as a fraction of the brain ellipsoid.
const CORE_FRACTION: f64 = 0.6;

struct Ellipsoid {
    center: [f64; 3],
    semi_axes: [f64; 3],
}

impl Ellipsoid {
    fn radius2(&self, p: [f64; 3]) -> f64 {
        (0..3)
            .map(|a| ((p[a] - self.center[a]) / self.semi_axes[a]).powi(2))
            .sum()
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        self.radius2(p) <= 1.0
    }
}

/// Deterministic synthetic brain: an ellipsoidal head on an exact-zero
/// background, a brighter white-matter core, and `n_lesions` ellipsoidal
/// lesions (mask class 1) that are dark in T1 and bright in T1ce, T2 and
/// FLAIR. Gaussian noise is added inside the head and the result smoothed
/// with a unit-sigma Gaussian.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<MultiModalVolume, VolumeError> {
    let dims = spec.dims;
    if dims.iter().any(|&d| d < 4) {
        return Err(VolumeError::Invalid(format!("phantom dims {dims:?} too small")));
    }
    let (rmin, rmax) = spec.lesion_radius_range;
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(VolumeError::Invalid("noise_sigma must be >= 0".into()));
    }
    if spec.n_lesions > 0 && !(rmin > 0.0 && rmin <= rmax) {
        return Err(VolumeError::Invalid(format!("bad radius range {rmin}..{rmax}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let center = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let brain = Ellipsoid {
        center,
        semi_axes: dims.map(|d| BRAIN_FRACTION * d as f64),
    };
    let core = Ellipsoid {
        center,
        semi_axes: brain.semi_axes.map(|a| a * CORE_FRACTION),
    };

    let mut lesions = Vec::with_capacity(spec.n_lesions);
    for i in 0..spec.n_lesions {
        let r = if rmax > rmin { rng.random_range(rmin..=rmax) } else { rmin };
        // Volume-preserving elongation.
        let u1: f64 = rng.random_range(-0.15..0.15);
        let u2: f64 = rng.random_range(-0.15..0.15);
        let semi_axes = [r * u1.exp(), r * u2.exp(), r * (-(u1 + u2)).exp()];
        let reach = semi_axes.iter().copied().fold(0.0, f64::max) + 1.0;
        let room = brain.semi_axes.map(|a| a - reach);
        if room.iter().any(|&a| a <= 0.0) {
            return Err(VolumeError::LesionFit(format!(
                "lesion {i} with radius {r:.2} exceeds the head"
            )));
        }
        let inner = Ellipsoid {
            center,
            semi_axes: room,
        };
        let mut placed = None;
        for _ in 0..1000 {
            let p = [0, 1, 2].map(|a| center[a] + rng.random_range(-room[a]..room[a]));
            if inner.contains(p) {
                placed = Some(p);
                break;
            }
        }
        let center = placed.ok_or_else(|| VolumeError::LesionFit(format!("no room for lesion {i}")))?;
        lesions.push(Ellipsoid { center, semi_axes });
    }

    let n: usize = dims.iter().product();
    let mut inside = vec![false; n];
    let mut mask = vec![0u8; n];
    let mut clean = vec![vec![0.0f64; n]; 4];
    for idx in 0..n {
        let p = grid_coords(dims, idx).map(|c| c as f64);
        if !brain.contains(p) {
            continue;
        }
        inside[idx] = true;
        let tissue = if lesions.iter().any(|l| l.contains(p)) {
            mask[idx] = 1;
            &LESION
        } else if core.contains(p) {
            &WHITE_MATTER
        } else {
            &GREY_MATTER
        };
        for m in 0..4 {
            clean[m][idx] = tissue[m];
        }
    }

    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| VolumeError::Invalid(e.to_string()))?;
    let mut data = Vec::with_capacity(4);
    for grid in clean.iter_mut() {
        if spec.noise_sigma > 0.0 {
            for (v, &ins) in grid.iter_mut().zip(&inside) {
                if ins {
                    *v += noise.sample(&mut rng);
                }
            }
        }
        let smooth = gaussian_smooth(grid, dims, 1.0);
        data.push(
            smooth
                .iter()
                .zip(&inside)
                .map(|(&v, &ins)| if ins { nonzero_f32(v) } else { 0.0 })
                .collect(),
        );
    }
    MultiModalVolume::new(
        dims,
        [1.0; 3],
        DEFAULT_MODALITIES.iter().map(|s| s.to_string()).collect(),
        data,
        Some(mask),
    )
}

/// Keeps head voxels distinguishable from the `+0.0` background.
fn nonzero_f32(v: f64) -> f32 {
    let f = v as f32;
    if f.to_bits() == 0 {
        -0.0
    } else {
        f
    }
}

/// Separable Gaussian blur with zero padding, kernel radius `ceil(3 sigma)`.
fn gaussian_smooth(grid: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let weights: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
    let strides = [dims[1] * dims[2], dims[2], 1];
    let mut cur = grid.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let c = grid_coords(dims, idx)[axis] as isize;
            let mut acc = 0.0;
            for (w, k) in weights.iter().zip(-radius..=radius) {
                let p = c + k;
                if p >= 0 && (p as usize) < dims[axis] {
                    let j = (idx as isize + k * strides[axis] as isize) as usize;
                    acc += w * cur[j];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}
