//! Segmentation of a new volume: atlas-derived ROI, per-voxel MAP labeling
//! with the trained network, and per-class largest-component filtering.

use rayon::prelude::*;

use crate::model::{forward, Batch, ModelParams};
use crate::sampling::{extract_patch_2p5d, prior_vector, PATCH_SIZE};
use crate::tensor::{Tensor, TensorError};
use crate::volume::{AtlasVolume, LabelVolume, ScalarVolume, CLASS_COUNT, STRUCTURE_COUNT};

#[derive(Debug, thiserror::Error)]
pub enum InferenceError {
    #[error("no atlas voxel exceeds the ROI probability threshold")]
    EmptyRoi,
    #[error("volumes do not share a grid: {0}")]
    GridMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("label volume construction failed: {0}")]
    Volume(#[from] crate::nifti::NiftiError),
}

/// Inclusive axis-aligned bounding box.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Roi {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl Roi {
    pub fn contains(&self, v: [usize; 3]) -> bool {
        (0..3).all(|a| v[a] >= self.min[a] && v[a] <= self.max[a])
    }

    pub fn voxel_count(&self) -> usize {
        (0..3).map(|a| self.max[a] - self.min[a] + 1).product()
    }
}

/// Bounding box of all voxels where some structure channel exceeds
/// `prob_threshold`, expanded by `margin` voxels per side and clipped to
/// the volume.
pub fn compute_roi(
    atlas: &AtlasVolume,
    prob_threshold: f32,
    margin: usize,
) -> Result<Roi, InferenceError> {
    let [nx, ny, nz] = atlas.dims();
    let nvox = nx * ny * nz;
    let data = atlas.data();
    let mut min = [usize::MAX; 3];
    let mut max = [0usize; 3];
    let mut any = false;
    let mut v = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut best = 0.0f32;
                for c in 1..CLASS_COUNT {
                    let p = data[c * nvox + v];
                    if p > best {
                        best = p;
                    }
                }
                if best > prob_threshold {
                    any = true;
                    let pos = [x, y, z];
                    for a in 0..3 {
                        min[a] = min[a].min(pos[a]);
                        max[a] = max[a].max(pos[a]);
                    }
                }
                v += 1;
            }
        }
    }
    if !any {
        return Err(InferenceError::EmptyRoi);
    }
    let dims = [nx, ny, nz];
    for a in 0..3 {
        min[a] = min[a].saturating_sub(margin);
        max[a] = (max[a] + margin).min(dims[a] - 1);
    }
    Ok(Roi { min, max })
}

/// Labels every voxel in the ROI with its maximum-posterior class (lowest
/// class index on ties); voxels outside the ROI stay background.
///
/// Voxels are visited in a fixed scan order (z, then y, then x) and each
/// sample's forward pass is independent of its batch, so the output does
/// not depend on `batch_size` or on how work is spread across threads.
pub fn classify_roi(
    model: &ModelParams<f32>,
    image: &ScalarVolume,
    atlas: &AtlasVolume,
    roi: &Roi,
    batch_size: usize,
) -> Result<LabelVolume, InferenceError> {
    if image.dims() != atlas.dims() {
        return Err(InferenceError::GridMismatch(format!(
            "image {:?}, atlas {:?}",
            image.dims(),
            atlas.dims()
        )));
    }
    let dims = image.dims();
    if (0..3).any(|a| roi.min[a] > roi.max[a] || roi.max[a] >= dims[a]) {
        return Err(InferenceError::GridMismatch(format!(
            "roi {roi:?} outside volume {dims:?}"
        )));
    }

    let mut voxels = Vec::with_capacity(roi.voxel_count());
    for z in roi.min[2]..=roi.max[2] {
        for y in roi.min[1]..=roi.max[1] {
            for x in roi.min[0]..=roi.max[0] {
                voxels.push([x, y, z]);
            }
        }
    }

    let labels_per_chunk: Result<Vec<Vec<u8>>, InferenceError> = voxels
        .par_chunks(batch_size.max(1))
        .map(|chunk| {
            let batch = build_batch(image, atlas, chunk);
            let probs = forward(model, &batch)?;
            let mut out = Vec::with_capacity(chunk.len());
            for row in 0..chunk.len() {
                let p = &probs.values()[row * CLASS_COUNT..(row + 1) * CLASS_COUNT];
                let mut arg = 0usize;
                for (c, &v) in p.iter().enumerate() {
                    if v > p[arg] {
                        arg = c;
                    }
                }
                out.push(arg as u8);
            }
            Ok(out)
        })
        .collect();

    let mut data = vec![0u8; dims[0] * dims[1] * dims[2]];
    for (voxel, label) in voxels.iter().zip(labels_per_chunk?.into_iter().flatten()) {
        data[voxel[0] + dims[0] * (voxel[1] + dims[1] * voxel[2])] = label;
    }
    let mut header = image.header.clone();
    header.datatype_code = crate::nifti::datatype::UINT8;
    Ok(LabelVolume::from_data(header, data)?)
}

fn build_batch(image: &ScalarVolume, atlas: &AtlasVolume, voxels: &[[usize; 3]]) -> Batch<f32> {
    let b = voxels.len();
    let plane = PATCH_SIZE * PATCH_SIZE;
    let mut patches = Tensor::zeros(&[b, 3, PATCH_SIZE, PATCH_SIZE]);
    let mut priors = Tensor::zeros(&[b, CLASS_COUNT]);
    for (slot, &voxel) in voxels.iter().enumerate() {
        let p = extract_patch_2p5d(image, voxel);
        for view in 0..3 {
            let dst = &mut patches.values_mut()[(slot * 3 + view) * plane..][..plane];
            for (row, chunk) in p[view].iter().zip(dst.chunks_mut(PATCH_SIZE)) {
                chunk.copy_from_slice(row);
            }
        }
        priors.values_mut()[slot * CLASS_COUNT..(slot + 1) * CLASS_COUNT]
            .copy_from_slice(&prior_vector(atlas, voxel));
    }
    Batch::new(patches, priors).expect("shapes are consistent by construction")
}

/// Keeps, for each class independently, only the largest 6-connected
/// component (on equal sizes, the one containing the smallest row-major
/// voxel index); all other voxels of that class become background.
pub fn largest_component_filter(labels: &LabelVolume) -> LabelVolume {
    let [nx, ny, nz] = labels.dims();
    let n = nx * ny * nz;
    let src = labels.data();
    let mut out = src.to_vec();
    let mut visited = vec![false; n];

    for class in 1..=STRUCTURE_COUNT as u8 {
        visited.fill(false);
        let mut components: Vec<Vec<usize>> = Vec::new();
        for start in 0..n {
            if src[start] != class || visited[start] {
                continue;
            }
            // BFS over face neighbors.
            let mut component = vec![start];
            let mut queue = vec![start];
            visited[start] = true;
            while let Some(i) = queue.pop() {
                let x = i % nx;
                let y = (i / nx) % ny;
                let z = i / (nx * ny);
                let mut push = |j: usize| {
                    if src[j] == class && !visited[j] {
                        visited[j] = true;
                        component.push(j);
                        queue.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < nx {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - nx);
                }
                if y + 1 < ny {
                    push(i + nx);
                }
                if z > 0 {
                    push(i - nx * ny);
                }
                if z + 1 < nz {
                    push(i + nx * ny);
                }
            }
            components.push(component);
        }
        if components.len() <= 1 {
            continue;
        }
        // Scan order guarantees each component's first element is its
        // smallest index, and components are discovered in that order, so
        // a strictly-greater comparison keeps the right one on ties.
        let mut best = 0;
        for (k, component) in components.iter().enumerate().skip(1) {
            if component.len() > components[best].len() {
                best = k;
            }
        }
        for (k, component) in components.iter().enumerate() {
            if k != best {
                for &i in component {
                    out[i] = 0;
                }
            }
        }
    }
    LabelVolume::from_data(labels.header.clone(), out).expect("filter preserves validity")
}
