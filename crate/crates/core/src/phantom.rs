//! Deterministic synthetic datasets: a T1-like image, ground-truth labels
//! and a soft probabilistic atlas for 14 ellipsoidal structures inside a
//! brain-shaped region, sized so the full pipeline trains and evaluates in
//! minutes on a CPU.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::nifti::NiftiError;
use crate::volume::{
    AtlasVolume, LabelVolume, ScalarVolume, VolumeHeader, STRUCTURE_COUNT,
};

/// Semi-axis enlargement applied to each structure before blurring its
/// atlas channel, imitating the soft halo a registered atlas carries.
const ATLAS_ENLARGE: f64 = 0.25;
/// Margin (voxels) between the volume border and the zero-intensity air
/// region surrounding the head ellipsoid.
const HEAD_MARGIN: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("structures {0} and {1} overlap")]
    OverlappingStructures(u8, u8),
    #[error("structure {0} extends outside the volume")]
    StructureOutOfBounds(u8),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Volume(#[from] NiftiError),
}

/// One ellipsoidal structure: center and semi-axes in voxel coordinates.
#[derive(Clone, Copy, Debug)]
pub struct StructureSpec {
    pub center: [f64; 3],
    pub semi_axes: [f64; 3],
    pub mean_intensity: f32,
}

#[derive(Clone, Debug)]
pub struct PhantomSpec {
    pub volume_size: [usize; 3],
    pub spacing: [f32; 3],
    /// Exactly one entry per structure class, in label order.
    pub structures: Vec<StructureSpec>,
    pub background_intensity: f32,
    pub noise_sigma: f32,
    /// Number of 3x3x3 box smoothing passes over the atlas channels.
    pub atlas_blur: usize,
    pub seed: u64,
}

impl PhantomSpec {
    /// The standard constellation scaled to a cubic volume of side `side`
    /// (at least 64): two translation-identical "hemisphere" blocks of
    /// seven ellipsoids each, 31 voxels apart in x. The two members of a
    /// left/right pair share their shape, intensity and in-block position,
    /// and the blocks sit farther apart than a patch can see, so local
    /// appearance cannot tell a structure from its twin; only the spatial
    /// prior can.
    pub fn with_size(side: usize) -> Self {
        let c = (side / 2) as f64;
        let block_offset = 15.5;
        let step = 7.2;
        let slots_yz = [
            (-step, -step),
            (-step, 0.0),
            (-step, step),
            (step, -step),
            (step, 0.0),
            (step, step),
            (0.0, 0.0),
        ];
        let mut structures = Vec::with_capacity(STRUCTURE_COUNT);
        for (pair, &(dy, dz)) in slots_yz.iter().enumerate() {
            let size_of = |k: usize| 2.8 + 0.2 * ((pair + k) % 3) as f64;
            let semi_axes = [size_of(0), size_of(1), size_of(2)];
            let mean_intensity = 200.0 + 125.0 * pair as f32;
            for side_sign in [-1.0, 1.0] {
                structures.push(StructureSpec {
                    center: [c + side_sign * block_offset, c + dy, c + dz],
                    semi_axes,
                    mean_intensity,
                });
            }
        }
        PhantomSpec {
            volume_size: [side; 3],
            spacing: [1.0; 3],
            structures,
            background_intensity: 100.0,
            noise_sigma: 12.0,
            atlas_blur: 1,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<(), PhantomError> {
        if self.structures.len() != STRUCTURE_COUNT {
            return Err(PhantomError::InvalidSpec(format!(
                "expected {STRUCTURE_COUNT} structures, got {}",
                self.structures.len()
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma <= 0.0 {
            return Err(PhantomError::InvalidSpec("noise_sigma must be positive".into()));
        }
        let head_center: Vec<f64> = self.volume_size.iter().map(|&n| (n / 2) as f64).collect();
        let head_semi: Vec<f64> = self
            .volume_size
            .iter()
            .map(|&n| n as f64 / 2.0 - HEAD_MARGIN)
            .collect();
        for (i, s) in self.structures.iter().enumerate() {
            let class = i as u8 + 1;
            let clearance = self.atlas_blur as f64 + ATLAS_ENLARGE + 1.0;
            let mut head_q = 0.0;
            for a in 0..3 {
                let margin = s.semi_axes[a] + clearance;
                if s.center[a] - margin < 0.0
                    || s.center[a] + margin > (self.volume_size[a] - 1) as f64
                {
                    return Err(PhantomError::StructureOutOfBounds(class));
                }
                // Conservative check that the structure plus its fringe
                // stays inside the head (nonzero intensity) region.
                let reach = (s.center[a] - head_center[a]).abs() + s.semi_axes[a] + 1.0;
                head_q += (reach / head_semi[a]) * (reach / head_semi[a]);
            }
            if head_q > 1.0 {
                return Err(PhantomError::StructureOutOfBounds(class));
            }
            if (s.mean_intensity - self.background_intensity).abs() < 2.0 * self.noise_sigma {
                return Err(PhantomError::InvalidSpec(format!(
                    "structure {class} intensity too close to background"
                )));
            }
        }
        Ok(())
    }
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self::with_size(96)
    }
}

/// A generated cohort: per-subject image and ground truth, plus one shared
/// atlas built from subject 0.
#[derive(Clone, Debug)]
pub struct PhantomDataset {
    pub subjects: Vec<(ScalarVolume, LabelVolume)>,
    pub atlas: AtlasVolume,
}

/// Generates the image, label and atlas volumes for one spec. Everything
/// is a pure function of the spec (noise comes from `spec.seed`).
pub fn generate(
    spec: &PhantomSpec,
) -> Result<(ScalarVolume, LabelVolume, AtlasVolume), PhantomError> {
    let (image, labels, atlas) = generate_inner(spec, true)?;
    Ok((image, labels, atlas.expect("atlas requested")))
}

fn generate_inner(
    spec: &PhantomSpec,
    want_atlas: bool,
) -> Result<(ScalarVolume, LabelVolume, Option<AtlasVolume>), PhantomError> {
    spec.validate()?;
    let [nx, ny, nz] = spec.volume_size;
    let nvox = nx * ny * nz;

    // Labels: ellipsoid membership, with overlaps rejected.
    let mut labels = vec![0u8; nvox];
    for (i, s) in spec.structures.iter().enumerate() {
        let class = i as u8 + 1;
        let lo = |a: usize| (s.center[a] - s.semi_axes[a] - 1.0).max(0.0) as usize;
        let hi = |a: usize| ((s.center[a] + s.semi_axes[a] + 1.0) as usize).min(spec.volume_size[a] - 1);
        for z in lo(2)..=hi(2) {
            for y in lo(1)..=hi(1) {
                for x in lo(0)..=hi(0) {
                    if inside_ellipsoid([x, y, z], s.center, s.semi_axes, 0.0) {
                        let slot = &mut labels[x + nx * (y + ny * z)];
                        if *slot != 0 {
                            return Err(PhantomError::OverlappingStructures(*slot, class));
                        }
                        *slot = class;
                    }
                }
            }
        }
    }

    // Partial-volume fringe: background voxels within half a voxel of a
    // structure surface lean toward that structure's intensity. Structure
    // voxels stay at their full class mean, so the hard, ambiguous voxels
    // all sit on the background side of each boundary.
    let mut fringe = vec![0.0f32; nvox];
    for s in &spec.structures {
        let gap = (s.mean_intensity - spec.background_intensity) as f64;
        let s_min = s.semi_axes.iter().copied().fold(f64::INFINITY, f64::min);
        let lo = |a: usize| (s.center[a] - s.semi_axes[a] - 2.0).max(0.0) as usize;
        let hi = |a: usize| {
            ((s.center[a] + s.semi_axes[a] + 2.0) as usize).min(spec.volume_size[a] - 1)
        };
        for z in lo(2)..=hi(2) {
            for y in lo(1)..=hi(1) {
                for x in lo(0)..=hi(0) {
                    let idx = x + nx * (y + ny * z);
                    if labels[idx] != 0 {
                        continue;
                    }
                    let mut q = 0.0;
                    for (a, &v) in [x, y, z].iter().enumerate() {
                        let d = (v as f64 - s.center[a]) / s.semi_axes[a];
                        q += d * d;
                    }
                    let dist = (q.sqrt() - 1.0) * s_min;
                    if dist < 0.5 {
                        let blend = (gap * (0.5 - dist).min(0.5)) as f32;
                        fringe[idx] = fringe[idx].max(blend);
                    }
                }
            }
        }
    }

    // Image: class mean (or background plus fringe) with Gaussian noise
    // inside the head ellipsoid; exact zero outside (air, as after
    // skull-stripping).
    let head_center = [(nx / 2) as f64, (ny / 2) as f64, (nz / 2) as f64];
    let head_semi = [
        (nx as f64) / 2.0 - HEAD_MARGIN,
        (ny as f64) / 2.0 - HEAD_MARGIN,
        (nz as f64) / 2.0 - HEAD_MARGIN,
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0f64, spec.noise_sigma as f64)
        .map_err(|e| PhantomError::InvalidSpec(e.to_string()))?;
    let mut image = vec![0.0f32; nvox];
    let mut idx = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if inside_ellipsoid([x, y, z], head_center, head_semi, 0.0) {
                    let mean = match labels[idx] {
                        0 => spec.background_intensity + fringe[idx],
                        c => spec.structures[c as usize - 1].mean_intensity,
                    };
                    image[idx] = (mean as f64 + noise.sample(&mut rng)) as f32;
                }
                idx += 1;
            }
        }
    }

    let header = VolumeHeader::new_3d(spec.volume_size, spec.spacing);
    let image = ScalarVolume::from_data(header.clone(), image)?;
    let labels = LabelVolume::from_data(header, labels)?;

    let atlas = if want_atlas {
        Some(build_atlas(spec)?)
    } else {
        None
    };
    Ok((image, labels, atlas))
}

#[inline]
fn inside_ellipsoid(v: [usize; 3], center: [f64; 3], semi: [f64; 3], enlarge: f64) -> bool {
    let mut acc = 0.0;
    for a in 0..3 {
        let d = (v[a] as f64 - center[a]) / (semi[a] + enlarge);
        acc += d * d;
    }
    acc <= 1.0
}

/// Atlas channels: box-smoothed indicators of slightly enlarged ellipsoids;
/// the background channel is synthesized as the complement and every voxel
/// vector renormalized.
fn build_atlas(spec: &PhantomSpec) -> Result<AtlasVolume, PhantomError> {
    let [nx, ny, nz] = spec.volume_size;
    let nvox = nx * ny * nz;
    let mut raw = vec![0.0f32; nvox * STRUCTURE_COUNT];
    let mut scratch = vec![0.0f32; nvox];
    for (i, s) in spec.structures.iter().enumerate() {
        let channel = &mut raw[i * nvox..(i + 1) * nvox];
        let lo = |a: usize| (s.center[a] - s.semi_axes[a] - 2.0).max(0.0) as usize;
        let hi = |a: usize| {
            ((s.center[a] + s.semi_axes[a] + 2.0) as usize).min(spec.volume_size[a] - 1)
        };
        for z in lo(2)..=hi(2) {
            for y in lo(1)..=hi(1) {
                for x in lo(0)..=hi(0) {
                    if inside_ellipsoid([x, y, z], s.center, s.semi_axes, ATLAS_ENLARGE) {
                        channel[x + nx * (y + ny * z)] = 1.0;
                    }
                }
            }
        }
        for _ in 0..spec.atlas_blur {
            box_blur_axis(channel, &mut scratch, nx, ny, nz, 0);
            box_blur_axis(&scratch, channel, nx, ny, nz, 1);
            box_blur_axis(channel, &mut scratch, nx, ny, nz, 2);
            channel.copy_from_slice(&scratch);
        }
    }
    let header = VolumeHeader::new_4d(
        [nx, ny, nz, STRUCTURE_COUNT],
        spec.spacing,
    );
    Ok(AtlasVolume::from_channels(header, STRUCTURE_COUNT, raw)?)
}

/// Mean over the 3-window along one axis, zero outside the volume.
fn box_blur_axis(src: &[f32], dst: &mut [f32], nx: usize, ny: usize, nz: usize, axis: usize) {
    let (stride, extent) = match axis {
        0 => (1usize, nx),
        1 => (nx, ny),
        _ => (nx * ny, nz),
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let pos = [x, y, z][axis];
                let mut acc = src[i];
                if pos > 0 {
                    acc += src[i - stride];
                }
                if pos + 1 < extent {
                    acc += src[i + stride];
                }
                dst[i] = acc / 3.0;
            }
        }
    }
}

/// Generates `n_subjects` subjects by jittering the default constellation:
/// a rigid shift of up to 2.7 voxels per axis (triangular) shared by all
/// structures, a local shift of up to 0.3 voxels per structure, and a
/// per-structure intensity factor within 5%. The atlas is built once from
/// subject 0, standing in for a population atlas registered per subject.
pub fn default_dataset(n_subjects: usize, seed: u64) -> Result<PhantomDataset, PhantomError> {
    sized_dataset(96, n_subjects, seed)
}

/// [`default_dataset`] over a cubic volume of the given side length.
pub fn sized_dataset(side: usize, n_subjects: usize, seed: u64) -> Result<PhantomDataset, PhantomError> {
    if n_subjects < 1 {
        return Err(PhantomError::InvalidSpec("need at least one subject".into()));
    }
    let base = PhantomSpec::with_size(side);
    let mut subjects = Vec::with_capacity(n_subjects);
    let mut atlas = None;
    for i in 0..n_subjects {
        let sub_seed = seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let spec = jittered_spec(&base, sub_seed);
        let (image, labels, subject_atlas) = generate_inner(&spec, i == 0)?;
        if i == 0 {
            atlas = subject_atlas;
        }
        subjects.push((image, labels));
    }
    Ok(PhantomDataset {
        subjects,
        atlas: atlas.expect("subject 0 builds the atlas"),
    })
}

/// Derives one subject's spec. Two calls with the same sub-seed produce
/// identical specs (and therefore identical subjects).
fn jittered_spec(base: &PhantomSpec, sub_seed: u64) -> PhantomSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed);
    // Triangular on [-2.7, 2.7]: the tails are thin, which keeps the same
    // structure of different subjects overlapping.
    let mut rigid = [0.0f64; 3];
    for r in &mut rigid {
        *r = (rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0)) * 1.35;
    }
    let mut spec = base.clone();
    for s in &mut spec.structures {
        let mut local = [0.0f64; 3];
        for l in &mut local {
            *l = rng.gen_range(-0.3..0.3);
        }
        for a in 0..3 {
            s.center[a] += rigid[a] + local[a];
        }
        let factor = 1.0 + rng.gen_range(-0.05..0.05f32);
        s.mean_intensity *= factor;
    }
    spec.seed = sub_seed.wrapping_add(0x9E37_79B9);
    spec
}
