//! Training sample construction.
//!
//! Positive samples come from every structure voxel; negative samples are
//! drawn from the structure boundary band (background voxels within a
//! Chebyshev distance of the structures, the default) or uniformly from the
//! background brain tissue. Each sample carries three orthogonal 32x32
//! patches and the voxel's 15 atlas prior probabilities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::volume::{AtlasVolume, LabelVolume, ScalarVolume, CLASS_COUNT};

/// Side length of the square 2.5D patches.
pub const PATCH_SIZE: usize = 32;
/// The center voxel sits at patch index (16,16); rows and columns cover
/// offsets -16..=+15.
const HALF: isize = (PATCH_SIZE / 2) as isize;

pub type PatchPlane = [[f32; PATCH_SIZE]; PATCH_SIZE];

/// One training record: voxel location, the three view patches in
/// axial/coronal/sagittal order, the atlas prior vector and the class label.
#[derive(Clone, Debug)]
pub struct Sample {
    pub voxel: [usize; 3],
    pub patches: Box<[PatchPlane; 3]>,
    pub prior: [f32; CLASS_COUNT],
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplingMode {
    /// Negatives only from background voxels near structure boundaries.
    BoundaryRestricted,
    /// Negatives uniformly from all nonzero background voxels.
    RandomBackground,
}

#[derive(Clone, Copy, Debug)]
pub struct SamplingConfig {
    pub mode: SamplingMode,
    /// Chebyshev distance of the boundary band, in voxels.
    pub boundary_distance: usize,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig {
            mode: SamplingMode::BoundaryRestricted,
            boundary_distance: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SamplingError {
    #[error("label volume contains no structure voxels")]
    NoStructureVoxels,
    #[error("no eligible negative voxels to sample from")]
    EmptyNegativePool,
    #[error("image has no nonzero voxels")]
    DegenerateImage,
    #[error("volumes do not share a grid: {0}")]
    GridMismatch(String),
}

/// The selected samples plus a note on whether the negative pool was too
/// small and had to be drawn with replacement.
#[derive(Clone, Debug)]
pub struct SampleSelection {
    pub samples: Vec<Sample>,
    pub negatives_with_replacement: bool,
}

/// Marks background voxels whose Chebyshev distance to the nearest
/// structure voxel is at most `distance`, via `distance` rounds of
/// 26-connectivity dilation of the structure set minus the set itself.
///
/// `distance` must be at least 1.
pub fn boundary_mask(labels: &LabelVolume, distance: usize) -> Vec<bool> {
    assert!(distance >= 1, "boundary distance must be at least 1");
    let structure: Vec<bool> = labels.data().iter().map(|&v| v != 0).collect();
    let mut current = structure.clone();
    let mut scratch = vec![false; current.len()];
    let [nx, ny, nz] = labels.dims();
    for _ in 0..distance {
        dilate_axis(&current, &mut scratch, nx, ny, nz, 0);
        dilate_axis(&scratch, &mut current, nx, ny, nz, 1);
        dilate_axis(&current, &mut scratch, nx, ny, nz, 2);
        std::mem::swap(&mut current, &mut scratch);
    }
    current
        .iter()
        .zip(&structure)
        .map(|(&near, &s)| near && !s)
        .collect()
}

/// One-voxel dilation along a single axis; three of these make a 3x3x3 box
/// (26-connectivity) dilation.
fn dilate_axis(src: &[bool], dst: &mut [bool], nx: usize, ny: usize, nz: usize, axis: usize) {
    let (stride, extent) = match axis {
        0 => (1, nx),
        1 => (nx, ny),
        _ => (nx * ny, nz),
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = x + nx * (y + ny * z);
                let pos = [x, y, z][axis];
                let mut v = src[i];
                if !v && pos > 0 {
                    v = src[i - stride];
                }
                if !v && pos + 1 < extent {
                    v = src[i + stride];
                }
                dst[i] = v;
            }
        }
    }
}

/// Builds the balanced training set: every structure voxel as a positive,
/// and the same number of negatives drawn uniformly without replacement
/// from the configured pool. Positives appear in scan order (x fastest),
/// negatives in draw order; the whole list is a pure function of the
/// inputs and the seed.
pub fn select_samples(
    image: &ScalarVolume,
    labels: &LabelVolume,
    atlas: &AtlasVolume,
    config: &SamplingConfig,
) -> Result<SampleSelection, SamplingError> {
    check_same_grid(image, labels, atlas)?;
    let [nx, ny, nz] = labels.dims();

    let mut positives = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let label = labels.at(x, y, z);
                if label != 0 {
                    positives.push(([x, y, z], label));
                }
            }
        }
    }
    if positives.is_empty() {
        return Err(SamplingError::NoStructureVoxels);
    }

    let eligible: Vec<bool> = match config.mode {
        SamplingMode::BoundaryRestricted => boundary_mask(labels, config.boundary_distance),
        SamplingMode::RandomBackground => labels
            .data()
            .iter()
            .zip(image.data())
            .map(|(&l, &v)| l == 0 && v != 0.0)
            .collect(),
    };
    let mut pool: Vec<[usize; 3]> = Vec::new();
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if eligible[i] {
                    pool.push([x, y, z]);
                }
                i += 1;
            }
        }
    }
    if pool.is_empty() {
        return Err(SamplingError::EmptyNegativePool);
    }

    let wanted = positives.len();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (negatives, with_replacement) = if pool.len() >= wanted {
        for i in 0..wanted {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        pool.truncate(wanted);
        (pool, false)
    } else {
        let drawn = (0..wanted)
            .map(|_| pool[rng.gen_range(0..pool.len())])
            .collect();
        (drawn, true)
    };

    let mut samples = Vec::with_capacity(2 * wanted);
    for (voxel, label) in positives {
        samples.push(make_sample(image, atlas, voxel, label));
    }
    for voxel in negatives {
        samples.push(make_sample(image, atlas, voxel, 0));
    }
    Ok(SampleSelection {
        samples,
        negatives_with_replacement: with_replacement,
    })
}

fn make_sample(image: &ScalarVolume, atlas: &AtlasVolume, voxel: [usize; 3], label: u8) -> Sample {
    Sample {
        voxel,
        patches: extract_patch_2p5d(image, voxel),
        prior: prior_vector(atlas, voxel),
        label,
    }
}

fn check_same_grid(
    image: &ScalarVolume,
    labels: &LabelVolume,
    atlas: &AtlasVolume,
) -> Result<(), SamplingError> {
    if image.dims() != labels.dims() || image.dims() != atlas.dims() {
        return Err(SamplingError::GridMismatch(format!(
            "image {:?}, labels {:?}, atlas {:?}",
            image.dims(),
            labels.dims(),
            atlas.dims()
        )));
    }
    Ok(())
}

#[inline]
fn at_or_zero(image: &ScalarVolume, x: isize, y: isize, z: isize) -> f32 {
    let [nx, ny, nz] = image.dims();
    if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
        0.0
    } else {
        image.at(x as usize, y as usize, z as usize)
    }
}

/// Extracts the axial, coronal and sagittal 32x32 patches centered on a
/// voxel. Positions outside the volume read as zero.
///
/// Axial fixes z (rows over y, columns over x); coronal fixes y (rows over
/// z, columns over x); sagittal fixes x (rows over z, columns over y).
pub fn extract_patch_2p5d(image: &ScalarVolume, voxel: [usize; 3]) -> Box<[PatchPlane; 3]> {
    let [x, y, z] = [voxel[0] as isize, voxel[1] as isize, voxel[2] as isize];
    let mut patches = Box::new([[[0.0f32; PATCH_SIZE]; PATCH_SIZE]; 3]);
    for r in 0..PATCH_SIZE as isize {
        let dr = r - HALF;
        for c in 0..PATCH_SIZE as isize {
            let dc = c - HALF;
            patches[0][r as usize][c as usize] = at_or_zero(image, x + dc, y + dr, z);
            patches[1][r as usize][c as usize] = at_or_zero(image, x + dc, y, z + dr);
            patches[2][r as usize][c as usize] = at_or_zero(image, x, y + dc, z + dr);
        }
    }
    patches
}

/// The voxel's 15 atlas probabilities in class-index order.
pub fn prior_vector(atlas: &AtlasVolume, voxel: [usize; 3]) -> [f32; CLASS_COUNT] {
    atlas.prior_at(voxel[0], voxel[1], voxel[2])
}

/// Z-scores the image over its nonzero voxels; zero (non-brain) voxels stay
/// exactly zero. The standard deviation is floored at 1e-6.
pub fn normalize_intensity(image: &ScalarVolume) -> Result<ScalarVolume, SamplingError> {
    let nonzero: Vec<f64> = image
        .data()
        .iter()
        .filter(|&&v| v != 0.0)
        .map(|&v| v as f64)
        .collect();
    if nonzero.is_empty() {
        return Err(SamplingError::DegenerateImage);
    }
    let n = nonzero.len() as f64;
    let mean = nonzero.iter().sum::<f64>() / n;
    let var = nonzero.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sigma = var.sqrt().max(1e-6);

    let data = image
        .data()
        .iter()
        .map(|&v| {
            if v == 0.0 {
                0.0
            } else {
                ((v as f64 - mean) / sigma) as f32
            }
        })
        .collect();
    ScalarVolume::from_data(image.header.clone(), data)
        .map_err(|e| SamplingError::GridMismatch(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeHeader;

    fn labels_from(dims: [usize; 3], voxels: &[([usize; 3], u8)]) -> LabelVolume {
        let mut data = vec![0u8; dims[0] * dims[1] * dims[2]];
        for &([x, y, z], c) in voxels {
            data[x + dims[0] * (y + dims[1] * z)] = c;
        }
        LabelVolume::from_data(VolumeHeader::new_3d(dims, [1.0; 3]), data).unwrap()
    }

    fn uniform_atlas(dims: [usize; 3]) -> AtlasVolume {
        let nvox = dims[0] * dims[1] * dims[2];
        let mut raw = vec![0.0f32; nvox * 15];
        raw[..nvox].fill(1.0);
        AtlasVolume::from_channels(
            VolumeHeader::new_4d([dims[0], dims[1], dims[2], 15], [1.0; 3]),
            15,
            raw,
        )
        .unwrap()
    }

    fn image_from_fn(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f32) -> ScalarVolume {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        ScalarVolume::from_data(VolumeHeader::new_3d(dims, [1.0; 3]), data).unwrap()
    }

    /// Brute-force oracle: background voxels within Chebyshev distance `d`
    /// of any structure voxel.
    fn brute_force_mask(labels: &LabelVolume, d: usize) -> Vec<bool> {
        let [nx, ny, nz] = labels.dims();
        let structures: Vec<[usize; 3]> =
            (1..=14u8).flat_map(|c| labels.class_voxels(c)).collect();
        let mut mask = vec![false; nx * ny * nz];
        let mut i = 0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if labels.at(x, y, z) == 0 {
                        mask[i] = structures.iter().any(|s| {
                            let dx = (s[0] as isize - x as isize).unsigned_abs();
                            let dy = (s[1] as isize - y as isize).unsigned_abs();
                            let dz = (s[2] as isize - z as isize).unsigned_abs();
                            dx.max(dy).max(dz) <= d
                        });
                    }
                    i += 1;
                }
            }
        }
        mask
    }

    #[test]
    fn boundary_mask_of_center_voxel_is_chebyshev_ball() {
        let labels = labels_from([13, 13, 13], &[([6, 6, 6], 1)]);
        let mask = boundary_mask(&labels, 5);
        let count = mask.iter().filter(|&&m| m).count();
        assert_eq!(count, 11 * 11 * 11 - 1);
        assert_eq!(mask, brute_force_mask(&labels, 5));
    }

    #[test]
    fn boundary_mask_of_empty_labels_is_empty() {
        let labels = labels_from([8, 8, 8], &[]);
        assert!(boundary_mask(&labels, 5).iter().all(|&m| !m));
    }

    #[test]
    fn boundary_mask_distance_one_on_solid_cube_is_shell() {
        let mut voxels = Vec::new();
        for z in 3..6 {
            for y in 3..6 {
                for x in 3..6 {
                    voxels.push(([x, y, z], 2u8));
                }
            }
        }
        let labels = labels_from([10, 10, 10], &voxels);
        let mask = boundary_mask(&labels, 1);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 5 * 5 * 5 - 27);
        assert_eq!(mask, brute_force_mask(&labels, 1));
    }

    #[test]
    fn boundary_mask_matches_brute_force_on_irregular_volume() {
        let labels = labels_from(
            [14, 11, 9],
            &[([2, 3, 4], 1), ([10, 8, 2], 5), ([7, 1, 7], 14), ([2, 4, 4], 1)],
        );
        for d in 1..=4 {
            assert_eq!(
                boundary_mask(&labels, d),
                brute_force_mask(&labels, d),
                "d={d}"
            );
        }
    }

    #[test]
    fn select_samples_is_balanced_and_boundary_restricted() {
        let dims = [24, 24, 24];
        let mut voxels = Vec::new();
        for z in 10..14 {
            for y in 10..14 {
                for x in 10..14 {
                    voxels.push(([x, y, z], 3u8));
                }
            }
        }
        let labels = labels_from(dims, &voxels);
        let image = image_from_fn(dims, |_, _, _| 1.0);
        let atlas = uniform_atlas(dims);
        let config = SamplingConfig {
            seed: 9,
            ..SamplingConfig::default()
        };
        let selection = select_samples(&image, &labels, &atlas, &config).unwrap();
        let positives = selection.samples.iter().filter(|s| s.label != 0).count();
        let negatives = selection.samples.len() - positives;
        assert_eq!(positives, 64);
        assert_eq!(negatives, 64);
        assert!(!selection.negatives_with_replacement);

        // Every negative must be within Chebyshev distance 5 of the cube.
        for s in selection.samples.iter().filter(|s| s.label == 0) {
            let d = voxels
                .iter()
                .map(|&([x, y, z], _)| {
                    let dx = (x as isize - s.voxel[0] as isize).unsigned_abs();
                    let dy = (y as isize - s.voxel[1] as isize).unsigned_abs();
                    let dz = (z as isize - s.voxel[2] as isize).unsigned_abs();
                    dx.max(dy).max(dz)
                })
                .min()
                .unwrap();
            assert!(d >= 1 && d <= 5, "negative at distance {d}");
        }
    }

    #[test]
    fn select_samples_is_deterministic() {
        let dims = [16, 16, 16];
        let labels = labels_from(dims, &[([8, 8, 8], 1), ([9, 8, 8], 1)]);
        let image = image_from_fn(dims, |x, y, z| (x + y + z) as f32 + 1.0);
        let atlas = uniform_atlas(dims);
        let config = SamplingConfig {
            seed: 1234,
            ..SamplingConfig::default()
        };
        let a = select_samples(&image, &labels, &atlas, &config).unwrap();
        let b = select_samples(&image, &labels, &atlas, &config).unwrap();
        assert_eq!(a.samples.len(), b.samples.len());
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.voxel, sb.voxel);
            assert_eq!(sa.label, sb.label);
        }
    }

    #[test]
    fn random_background_mode_reaches_beyond_the_boundary_band() {
        let dims = [32, 32, 32];
        let labels = labels_from(dims, &[([16, 16, 16], 7)]);
        let image = image_from_fn(dims, |_, _, _| 2.0);
        let atlas = uniform_atlas(dims);
        // One structure voxel means one negative per seed, so scan several
        // seeds; voxels beyond the band dominate the pool overwhelmingly.
        let mut saw_far = false;
        for seed in 0..20 {
            let config = SamplingConfig {
                mode: SamplingMode::RandomBackground,
                boundary_distance: 5,
                seed,
            };
            let selection = select_samples(&image, &labels, &atlas, &config).unwrap();
            for s in selection.samples.iter().filter(|s| s.label == 0) {
                let dx = (s.voxel[0] as isize - 16).unsigned_abs();
                let dy = (s.voxel[1] as isize - 16).unsigned_abs();
                let dz = (s.voxel[2] as isize - 16).unsigned_abs();
                if dx.max(dy).max(dz) > 5 {
                    saw_far = true;
                }
            }
        }
        assert!(saw_far);
    }

    #[test]
    fn all_background_labels_are_an_error() {
        let dims = [8, 8, 8];
        let labels = labels_from(dims, &[]);
        let image = image_from_fn(dims, |_, _, _| 1.0);
        let atlas = uniform_atlas(dims);
        assert!(matches!(
            select_samples(&image, &labels, &atlas, &SamplingConfig::default()),
            Err(SamplingError::NoStructureVoxels)
        ));
    }

    #[test]
    fn corner_patch_is_zero_outside_the_volume() {
        let image = image_from_fn([20, 20, 20], |_, _, _| 5.0);
        let patches = extract_patch_2p5d(&image, [0, 0, 0]);
        for plane in patches.iter() {
            // Rows/cols below the center index correspond to negative
            // coordinates, which lie outside the volume.
            for r in 0..PATCH_SIZE {
                for c in 0..PATCH_SIZE {
                    let inside = r >= 16 && c >= 16;
                    let expected = if inside { 5.0 } else { 0.0 };
                    assert_eq!(plane[r][c], expected);
                }
            }
        }
    }

    #[test]
    fn center_of_patch_is_the_voxel_value_in_all_views() {
        let image = image_from_fn([40, 40, 40], |x, y, z| (x * 10000 + y * 100 + z) as f32);
        let patches = extract_patch_2p5d(&image, [20, 21, 22]);
        let v = image.at(20, 21, 22);
        for plane in patches.iter() {
            assert_eq!(plane[16][16], v);
        }
        // Orientation: axial rows move along y, coronal and sagittal rows
        // along z.
        assert_eq!(patches[0][17][16], image.at(20, 22, 22));
        assert_eq!(patches[0][16][17], image.at(21, 21, 22));
        assert_eq!(patches[1][17][16], image.at(20, 21, 23));
        assert_eq!(patches[1][16][17], image.at(21, 21, 22));
        assert_eq!(patches[2][17][16], image.at(20, 21, 23));
        assert_eq!(patches[2][16][17], image.at(20, 22, 22));
    }

    #[test]
    fn constant_volume_gives_constant_interior_patches() {
        let image = image_from_fn([64, 64, 64], |_, _, _| 3.5);
        let patches = extract_patch_2p5d(&image, [32, 32, 32]);
        for plane in patches.iter() {
            assert!(plane.iter().flatten().all(|&v| v == 3.5));
        }
    }

    #[test]
    fn normalize_maps_two_values_to_plus_minus_one() {
        let image = image_from_fn([2, 1, 1], |x, _, _| if x == 0 { 1.0 } else { 3.0 });
        let out = normalize_intensity(&image).unwrap();
        assert!((out.at(0, 0, 0) + 1.0).abs() < 1e-6);
        assert!((out.at(1, 0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_keeps_zero_voxels_zero() {
        let image = image_from_fn([4, 1, 1], |x, _, _| if x < 2 { 0.0 } else { x as f32 });
        let out = normalize_intensity(&image).unwrap();
        assert_eq!(out.at(0, 0, 0), 0.0);
        assert_eq!(out.at(1, 0, 0), 0.0);
    }

    #[test]
    fn normalize_constant_image_is_all_zero() {
        let image = image_from_fn([3, 3, 3], |_, _, _| 7.0);
        let out = normalize_intensity(&image).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_is_a_fixed_point_on_standardized_data() {
        let image = image_from_fn([2, 1, 1], |x, _, _| if x == 0 { -1.0 } else { 1.0 });
        let out = normalize_intensity(&image).unwrap();
        assert!((out.at(0, 0, 0) + 1.0).abs() < 1e-6);
        assert!((out.at(1, 0, 0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn normalize_rejects_all_zero_image() {
        let header = VolumeHeader::new_3d([2, 2, 2], [1.0; 3]);
        let image = ScalarVolume::from_data(header, vec![0.0; 8]).unwrap();
        assert!(matches!(
            normalize_intensity(&image),
            Err(SamplingError::DegenerateImage)
        ));
    }
}
