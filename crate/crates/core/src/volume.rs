//! In-memory volume types shared across the pipeline.
//!
//! All volumes use the NIfTI storage order: x varies fastest, then y, then z
//! (and the channel axis slowest for 4D atlases). Image, labels and atlas are
//! assumed to share one voxel grid; no resampling happens anywhere.

use crate::nifti::{datatype, NiftiError};

/// Number of output classes: background plus 14 structures.
pub const CLASS_COUNT: usize = 15;

/// Number of sub-cortical structure classes (labels 1..=14).
pub const STRUCTURE_COUNT: usize = 14;

/// Structure names in label order (label 1 is `Tha.L`, label 14 is `Acc.R`).
pub const STRUCTURE_NAMES: [&str; STRUCTURE_COUNT] = [
    "Tha.L", "Tha.R", "Cau.L", "Cau.R", "Put.L", "Put.R", "Pal.L", "Pal.R", "Hip.L", "Hip.R",
    "Amy.L", "Amy.R", "Acc.L", "Acc.R",
];

/// Orientation fields carried through unchanged. The pipeline never
/// interprets them; they exist so a written file keeps whatever qform/sform
/// its source had.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    /// qfac, stored in pixdim[0].
    pub qfac: f32,
    /// quatern_b..d followed by qoffset_x..z.
    pub quatern: [f32; 6],
    /// srow_x, srow_y, srow_z concatenated.
    pub srow: [f32; 12],
}

/// The header fields the pipeline reads, writes and validates.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeHeader {
    /// Extents of the used axes only (length 3 or 4).
    pub dims: Vec<usize>,
    /// Voxel spacing per used axis in millimetres.
    pub pixdim: Vec<f32>,
    /// NIfTI datatype code of the stored element type.
    pub datatype_code: i16,
    /// Byte offset of the data block.
    pub vox_offset: u64,
    pub scl_slope: f32,
    pub scl_inter: f32,
    /// Free text, truncated to 80 bytes on write.
    pub description: String,
    pub orientation: Orientation,
}

impl VolumeHeader {
    pub fn new_3d(dims: [usize; 3], pixdim: [f32; 3]) -> Self {
        VolumeHeader {
            dims: dims.to_vec(),
            pixdim: pixdim.to_vec(),
            datatype_code: datatype::FLOAT32,
            vox_offset: 352,
            scl_slope: 1.0,
            scl_inter: 0.0,
            description: String::new(),
            orientation: Orientation::default(),
        }
    }

    pub fn new_4d(dims: [usize; 4], pixdim: [f32; 3]) -> Self {
        VolumeHeader {
            dims: dims.to_vec(),
            pixdim: vec![pixdim[0], pixdim[1], pixdim[2], 1.0],
            ..Self::new_3d([dims[0], dims[1], dims[2]], pixdim)
        }
    }

    /// Spatial extents (first three axes).
    pub fn dims3(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.dims[2]]
    }

    /// Spatial voxel spacing in mm.
    pub fn spacing3(&self) -> [f32; 3] {
        [self.pixdim[0], self.pixdim[1], self.pixdim[2]]
    }

    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }

    pub(crate) fn validate(&self) -> Result<(), NiftiError> {
        if self.dims.len() < 3 || self.dims.len() > 7 {
            return Err(NiftiError::MalformedHeader(format!(
                "unsupported dimensionality {}",
                self.dims.len()
            )));
        }
        if self.dims.iter().any(|&d| d < 1) {
            return Err(NiftiError::MalformedHeader("zero extent".into()));
        }
        for axis in 0..3 {
            if !self.pixdim[axis].is_finite() || self.pixdim[axis] <= 0.0 {
                return Err(NiftiError::MalformedHeader(format!(
                    "non-positive spacing on axis {axis}"
                )));
            }
        }
        if self.vox_offset < 352 {
            return Err(NiftiError::MalformedHeader(format!(
                "vox_offset {} below data start",
                self.vox_offset
            )));
        }
        Ok(())
    }
}

/// A 3D intensity image (the T1-w volume), stored as f32 with x fastest.
#[derive(Clone, Debug)]
pub struct ScalarVolume {
    pub header: VolumeHeader,
    data: Vec<f32>,
}

impl ScalarVolume {
    /// Builds a volume after checking that the data extent matches the
    /// header and every value is finite.
    pub fn from_data(header: VolumeHeader, data: Vec<f32>) -> Result<Self, NiftiError> {
        header.validate()?;
        let expected = header.dims3().iter().product::<usize>();
        if data.len() != expected {
            return Err(NiftiError::MalformedHeader(format!(
                "data length {} does not match dims (expected {expected})",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(NiftiError::NonFiniteValue { index: pos });
        }
        Ok(ScalarVolume { header, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims3()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.dims();
        x + nx * (y + ny * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// A 3D map of class indices 0..=14 (0 = background).
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    pub header: VolumeHeader,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn from_data(header: VolumeHeader, data: Vec<u8>) -> Result<Self, NiftiError> {
        header.validate()?;
        let expected = header.dims3().iter().product::<usize>();
        if data.len() != expected {
            return Err(NiftiError::MalformedHeader(format!(
                "label data length {} does not match dims (expected {expected})",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|&v| v as usize >= CLASS_COUNT) {
            return Err(NiftiError::InvalidLabel {
                value: data[pos] as f64,
                index: pos,
            });
        }
        Ok(LabelVolume { header, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims3()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.dims();
        x + nx * (y + ny * z)
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[self.index(x, y, z)]
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    /// Voxel coordinates of every voxel labelled `class`, in scan order.
    pub fn class_voxels(&self, class: u8) -> Vec<[usize; 3]> {
        let [nx, ny, nz] = self.dims();
        let mut out = Vec::new();
        let mut i = 0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if self.data[i] == class {
                        out.push([x, y, z]);
                    }
                    i += 1;
                }
            }
        }
        out
    }
}

/// Per-voxel class probabilities: 15 channels, channel 0 = background.
///
/// Channels are stored in NIfTI 4D order (whole 3D plane per channel).
/// Construction normalizes every voxel's vector to sum to one.
#[derive(Clone, Debug)]
pub struct AtlasVolume {
    pub header: VolumeHeader,
    data: Vec<f32>,
}

impl AtlasVolume {
    /// Builds an atlas from 14 or 15 raw channels.
    ///
    /// With 15 channels, channel 0 is the background. With 14, channels map
    /// to classes 1..=14 and the background is synthesized as
    /// `max(0, 1 - sum)`. Every voxel vector is then clamped to `[0, 1]`
    /// per channel and renormalized to sum to one.
    pub fn from_channels(
        mut header: VolumeHeader,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, NiftiError> {
        if channels != CLASS_COUNT && channels != STRUCTURE_COUNT {
            return Err(NiftiError::WrongChannelCount(channels));
        }
        header.validate()?;
        let nvox = header.dims3().iter().product::<usize>();
        if data.len() != nvox * channels {
            return Err(NiftiError::MalformedHeader(format!(
                "atlas data length {} does not match dims",
                data.len()
            )));
        }

        let mut full = vec![0.0f32; nvox * CLASS_COUNT];
        let structure_offset = if channels == CLASS_COUNT { 1 } else { 0 };
        for v in 0..nvox {
            let mut vector = [0.0f64; CLASS_COUNT];
            for c in 0..STRUCTURE_COUNT {
                let raw = data[(c + structure_offset) * nvox + v] as f64;
                vector[c + 1] = raw.clamp(0.0, 1.0);
            }
            let structure_sum: f64 = vector[1..].iter().sum();
            vector[0] = if channels == CLASS_COUNT {
                (data[v] as f64).clamp(0.0, 1.0)
            } else {
                (1.0 - structure_sum).max(0.0)
            };
            let total = vector[0] + structure_sum;
            if total > 0.0 {
                for (c, value) in vector.iter().enumerate() {
                    full[c * nvox + v] = (value / total) as f32;
                }
            } else {
                full[v] = 1.0;
            }
        }

        header.dims = vec![header.dims[0], header.dims[1], header.dims[2], CLASS_COUNT];
        if header.pixdim.len() < 4 {
            header.pixdim.push(1.0);
        }
        Ok(AtlasVolume { header, data: full })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.header.dims3()
    }

    #[inline]
    fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        let [nx, ny, _] = self.dims();
        x + nx * (y + ny * z)
    }

    /// The 15-vector of class probabilities at one voxel, class-index order.
    pub fn prior_at(&self, x: usize, y: usize, z: usize) -> [f32; CLASS_COUNT] {
        let nvox = self.dims().iter().product::<usize>();
        let v = self.voxel_index(x, y, z);
        let mut out = [0.0f32; CLASS_COUNT];
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.data[c * nvox + v];
        }
        out
    }

    /// Probability of `class` at one voxel.
    #[inline]
    pub fn channel_at(&self, class: usize, x: usize, y: usize, z: usize) -> f32 {
        let nvox: usize = self.dims().iter().product();
        self.data[class * nvox + self.voxel_index(x, y, z)]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}
