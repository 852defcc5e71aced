//! NIfTI-1 single-file (.nii) reader and writer.
//!
//! Only the uncompressed single-file layout is handled: a 348-byte header
//! with magic `n+1\0` at offset 344 and voxel data at `vox_offset`. Both
//! endiannesses are read (detected from `sizeof_hdr`); files are always
//! written little-endian with `vox_offset` 352. Compressed `.nii.gz` input
//! is out of scope; decompress externally.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use crate::volume::{AtlasVolume, LabelVolume, Orientation, ScalarVolume, VolumeHeader};

/// NIfTI datatype codes supported by this reader.
pub mod datatype {
    pub const UINT8: i16 = 2;
    pub const INT16: i16 = 4;
    pub const FLOAT32: i16 = 16;
}

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: u64 = 352;
const MAGIC: [u8; 4] = [b'n', b'+', b'1', 0];

#[derive(Debug, thiserror::Error)]
pub enum NiftiError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated data: need {expected} bytes after vox_offset, found {actual}")]
    TruncatedData { expected: u64, actual: u64 },
    #[error("atlas must have 14 or 15 channels, found {0}")]
    WrongChannelCount(usize),
    #[error("label value {value} at flat index {index} is not an integer in 0..=14")]
    InvalidLabel { value: f64, index: usize },
    #[error("non-finite value at flat index {index}")]
    NonFiniteValue { index: usize },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// Reads a 3D scalar volume, applying `scl_slope`/`scl_inter` when the
/// slope is nonzero.
pub fn read_volume(path: &Path) -> Result<ScalarVolume, NiftiError> {
    let (header, data) = read_decoded(path, 3)?;
    ScalarVolume::from_data(header, data)
}

/// Reads a 3D label volume; every decoded value must be an integer in 0..=14.
pub fn read_labels(path: &Path) -> Result<LabelVolume, NiftiError> {
    let (header, data) = read_decoded(path, 3)?;
    let mut labels = Vec::with_capacity(data.len());
    for (index, &value) in data.iter().enumerate() {
        let rounded = value.round();
        if !value.is_finite() || (value - rounded).abs() > 1e-4 || !(0.0..15.0).contains(&rounded) {
            return Err(NiftiError::InvalidLabel {
                value: value as f64,
                index,
            });
        }
        labels.push(rounded as u8);
    }
    LabelVolume::from_data(header, labels)
}

/// Reads a 4D probabilistic atlas with 14 or 15 channels and normalizes it
/// to 15 channels summing to one per voxel (see [`AtlasVolume::from_channels`]).
pub fn read_atlas(path: &Path) -> Result<AtlasVolume, NiftiError> {
    let (header, data) = read_decoded(path, 4)?;
    let channels = header.dims[3];
    AtlasVolume::from_channels(header, channels, data)
}

/// Writes a scalar volume as 32-bit float data.
pub fn write_volume(volume: &ScalarVolume, path: &Path) -> Result<(), NiftiError> {
    let mut header = volume.header.clone();
    header.datatype_code = datatype::FLOAT32;
    let mut bytes = vec![0u8; volume.data().len() * 4];
    LittleEndian::write_f32_into(volume.data(), &mut bytes);
    write_file(&header, &bytes, 32, path)
}

/// Writes a label volume as unsigned 8-bit data.
pub fn write_labels(labels: &LabelVolume, path: &Path) -> Result<(), NiftiError> {
    let mut header = labels.header.clone();
    header.datatype_code = datatype::UINT8;
    write_file(&header, labels.data(), 8, path)
}

/// Writes a 15-channel atlas as 4D 32-bit float data.
pub fn write_atlas(atlas: &AtlasVolume, path: &Path) -> Result<(), NiftiError> {
    let mut header = atlas.header.clone();
    header.datatype_code = datatype::FLOAT32;
    let mut bytes = vec![0u8; atlas.data().len() * 4];
    LittleEndian::write_f32_into(atlas.data(), &mut bytes);
    write_file(&header, &bytes, 32, path)
}

fn read_decoded(path: &Path, want_ndim: usize) -> Result<(VolumeHeader, Vec<f32>), NiftiError> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(NiftiError::MalformedHeader(format!(
            "file is {} bytes, shorter than the 348-byte header",
            bytes.len()
        )));
    }
    let big_endian = match LittleEndian::read_i32(&bytes[0..4]) {
        348 => false,
        _ if BigEndian::read_i32(&bytes[0..4]) == 348 => true,
        other => {
            return Err(NiftiError::MalformedHeader(format!(
                "sizeof_hdr is {other}, expected 348"
            )))
        }
    };
    if bytes[344..348] != MAGIC {
        return Err(NiftiError::MalformedHeader(format!(
            "magic bytes {:?} are not \"n+1\\0\"",
            &bytes[344..348]
        )));
    }

    let header = if big_endian {
        decode_header::<BigEndian>(&bytes)
    } else {
        decode_header::<LittleEndian>(&bytes)
    }?;

    if header.dims.len() != want_ndim {
        return Err(NiftiError::MalformedHeader(format!(
            "expected a {want_ndim}D volume, found {}D",
            header.dims.len()
        )));
    }

    let elem_size = match header.datatype_code {
        datatype::UINT8 => 1,
        datatype::INT16 => 2,
        datatype::FLOAT32 => 4,
        other => return Err(NiftiError::UnsupportedDatatype(other)),
    };
    let count = header.voxel_count();
    let expected = (count * elem_size) as u64;
    let available = (bytes.len() as u64).saturating_sub(header.vox_offset);
    if available < expected {
        return Err(NiftiError::TruncatedData {
            expected,
            actual: available,
        });
    }

    let data_bytes = &bytes[header.vox_offset as usize..header.vox_offset as usize + expected as usize];
    let mut data = vec![0.0f32; count];
    match (header.datatype_code, big_endian) {
        (datatype::UINT8, _) => {
            for (dst, &src) in data.iter_mut().zip(data_bytes) {
                *dst = src as f32;
            }
        }
        (datatype::INT16, false) => {
            for (i, dst) in data.iter_mut().enumerate() {
                *dst = LittleEndian::read_i16(&data_bytes[2 * i..]) as f32;
            }
        }
        (datatype::INT16, true) => {
            for (i, dst) in data.iter_mut().enumerate() {
                *dst = BigEndian::read_i16(&data_bytes[2 * i..]) as f32;
            }
        }
        (datatype::FLOAT32, false) => LittleEndian::read_f32_into(data_bytes, &mut data),
        (datatype::FLOAT32, true) => BigEndian::read_f32_into(data_bytes, &mut data),
        _ => unreachable!(),
    }

    if header.scl_slope != 0.0 && (header.scl_slope != 1.0 || header.scl_inter != 0.0) {
        for v in &mut data {
            *v = *v * header.scl_slope + header.scl_inter;
        }
    }
    Ok((header, data))
}

fn decode_header<E: ByteOrder>(bytes: &[u8]) -> Result<VolumeHeader, NiftiError> {
    let ndim = E::read_i16(&bytes[40..42]);
    if !(1..=7).contains(&ndim) {
        return Err(NiftiError::MalformedHeader(format!("dim[0] is {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim as usize);
    let mut pixdim = Vec::with_capacity(ndim as usize);
    for axis in 0..ndim as usize {
        let extent = E::read_i16(&bytes[42 + 2 * axis..]);
        if extent < 1 {
            return Err(NiftiError::MalformedHeader(format!(
                "dim[{}] is {extent}",
                axis + 1
            )));
        }
        dims.push(extent as usize);
        pixdim.push(E::read_f32(&bytes[80 + 4 * axis..]));
    }
    // Trailing singleton axes collapse so a (x,y,z,1) file reads as 3D.
    while dims.len() > 3 && dims[dims.len() - 1] == 1 {
        dims.pop();
        pixdim.pop();
    }

    let vox_offset = E::read_f32(&bytes[108..112]);
    if !vox_offset.is_finite() || vox_offset < DATA_OFFSET as f32 {
        return Err(NiftiError::MalformedHeader(format!(
            "vox_offset {vox_offset} below data start"
        )));
    }

    let description = {
        let raw = &bytes[148..228];
        let end = raw.iter().position(|&b| b == 0).unwrap_or(raw.len());
        String::from_utf8_lossy(&raw[..end]).into_owned()
    };

    let mut quatern = [0.0f32; 6];
    E::read_f32_into(&bytes[256..280], &mut quatern);
    let mut srow = [0.0f32; 12];
    E::read_f32_into(&bytes[280..328], &mut srow);

    let header = VolumeHeader {
        dims,
        pixdim,
        datatype_code: E::read_i16(&bytes[70..72]),
        vox_offset: vox_offset as u64,
        scl_slope: E::read_f32(&bytes[112..116]),
        scl_inter: E::read_f32(&bytes[116..120]),
        description,
        orientation: Orientation {
            qform_code: E::read_i16(&bytes[252..254]),
            sform_code: E::read_i16(&bytes[254..256]),
            qfac: E::read_f32(&bytes[76..80]),
            quatern,
            srow,
        },
    };
    header.validate()?;
    Ok(header)
}

pub(crate) fn encode_header<E: ByteOrder>(header: &VolumeHeader, bitpix: i16) -> [u8; HEADER_SIZE] {
    let mut out = [0u8; HEADER_SIZE];
    E::write_i32(&mut out[0..4], 348);
    out[38] = b'r'; // "regular"

    let ndim = header.dims.len();
    E::write_i16(&mut out[40..42], ndim as i16);
    for axis in 0..7 {
        let extent = header.dims.get(axis).copied().unwrap_or(1);
        E::write_i16(&mut out[42 + 2 * axis..], extent as i16);
    }
    E::write_i16(&mut out[70..72], header.datatype_code);
    E::write_i16(&mut out[72..74], bitpix);
    E::write_f32(&mut out[76..80], header.orientation.qfac);
    for axis in 0..7 {
        let spacing = header.pixdim.get(axis).copied().unwrap_or(1.0);
        E::write_f32(&mut out[80 + 4 * axis..], spacing);
    }
    E::write_f32(&mut out[108..112], DATA_OFFSET as f32);
    E::write_f32(&mut out[112..116], 1.0); // scl_slope
    E::write_f32(&mut out[116..120], 0.0); // scl_inter

    let descrip = header.description.as_bytes();
    let n = descrip.len().min(79);
    out[148..148 + n].copy_from_slice(&descrip[..n]);

    E::write_i16(&mut out[252..254], header.orientation.qform_code);
    E::write_i16(&mut out[254..256], header.orientation.sform_code);
    for (i, &q) in header.orientation.quatern.iter().enumerate() {
        E::write_f32(&mut out[256 + 4 * i..], q);
    }
    for (i, &s) in header.orientation.srow.iter().enumerate() {
        E::write_f32(&mut out[280 + 4 * i..], s);
    }
    out[344..348].copy_from_slice(&MAGIC);
    out
}

fn write_file(
    header: &VolumeHeader,
    data_bytes: &[u8],
    bitpix: i16,
    path: &Path,
) -> Result<(), NiftiError> {
    let encoded = encode_header::<LittleEndian>(header, bitpix);
    let mut file = std::io::BufWriter::new(fs::File::create(path)?);
    file.write_all(&encoded)?;
    file.write_all(&[0u8; 4])?; // no header extensions
    file.write_all(data_bytes)?;
    file.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = tempfile::tempdir().unwrap();
        // Keep the dir alive by leaking it; tests are short-lived.
        let path = dir.path().join(name);
        std::mem::forget(dir);
        path
    }

    fn scalar(dims: [usize; 3], pixdim: [f32; 3], data: Vec<f32>) -> ScalarVolume {
        ScalarVolume::from_data(VolumeHeader::new_3d(dims, pixdim), data).unwrap()
    }

    #[test]
    fn scalar_round_trip_is_identity() {
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5 - 3.0).collect();
        let vol = scalar([2, 3, 4], [1.0, 1.25, 2.0], data.clone());
        let path = tmp("v.nii");
        write_volume(&vol, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.dims(), [2, 3, 4]);
        assert_eq!(back.header.pixdim, vol.header.pixdim);
        assert_eq!(back.data(), &data[..]);
    }

    #[test]
    fn written_file_has_expected_size_and_magic() {
        let vol = scalar([2, 2, 2], [1.0; 3], vec![0.0; 8]);
        let path = tmp("z.nii");
        write_volume(&vol, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 352 + 8 * 4);
        assert_eq!(&bytes[344..348], &MAGIC);
        assert_eq!(LittleEndian::read_i32(&bytes[0..4]), 348);
    }

    #[test]
    fn label_round_trip_is_bit_identical() {
        let data: Vec<u8> = (0..27).map(|i| (i % 15) as u8).collect();
        let labels =
            LabelVolume::from_data(VolumeHeader::new_3d([3, 3, 3], [1.0; 3]), data.clone())
                .unwrap();
        let path = tmp("l.nii");
        write_labels(&labels, &path).unwrap();
        let back = read_labels(&path).unwrap();
        assert_eq!(back.data(), &data[..]);
    }

    #[test]
    fn atlas_round_trip_preserves_probabilities() {
        let nvox = 8;
        let mut raw = vec![0.0f32; nvox * 15];
        raw[0..nvox].fill(1.0); // background everywhere
        raw[0] = 0.25;
        raw[5 * nvox] = 0.75; // voxel 0: class 5 at 0.75
        let atlas =
            AtlasVolume::from_channels(VolumeHeader::new_4d([2, 2, 2, 15], [1.0; 3]), 15, raw)
                .unwrap();
        let path = tmp("a.nii");
        write_atlas(&atlas, &path).unwrap();
        let back = read_atlas(&path).unwrap();
        assert_eq!(back.data(), atlas.data());
        assert_eq!(back.prior_at(0, 0, 0)[5], 0.75);
    }

    #[test]
    fn truncated_data_is_reported() {
        let vol = scalar([4, 4, 4], [1.0; 3], vec![1.0; 64]);
        let path = tmp("t.nii");
        write_volume(&vol, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 10);
        fs::write(&path, &bytes).unwrap();
        match read_volume(&path) {
            Err(NiftiError::TruncatedData { expected, actual }) => {
                assert_eq!(expected, 256);
                assert_eq!(actual, 246);
            }
            other => panic!("expected TruncatedData, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let vol = scalar([2, 2, 2], [1.0; 3], vec![0.0; 8]);
        let path = tmp("m.nii");
        write_volume(&vol, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[344] = b'x';
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(NiftiError::MalformedHeader(_))
        ));
    }

    #[test]
    fn bad_sizeof_hdr_is_rejected() {
        let vol = scalar([2, 2, 2], [1.0; 3], vec![0.0; 8]);
        let path = tmp("s.nii");
        write_volume(&vol, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = 0x11;
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(NiftiError::MalformedHeader(_))
        ));
    }

    #[test]
    fn unsupported_datatype_is_rejected() {
        let vol = scalar([2, 2, 2], [1.0; 3], vec![0.0; 8]);
        let path = tmp("d.nii");
        write_volume(&vol, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        LittleEndian::write_i16(&mut bytes[70..72], 8); // int32, unsupported
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_volume(&path),
            Err(NiftiError::UnsupportedDatatype(8))
        ));
    }

    #[test]
    fn big_endian_file_decodes_to_same_volume() {
        let data: Vec<f32> = (0..12).map(|i| (i as f32).sin()).collect();
        let vol = scalar([3, 2, 2], [0.5, 1.0, 1.5], data.clone());
        let mut header = vol.header.clone();
        header.datatype_code = datatype::FLOAT32;
        let encoded = encode_header::<BigEndian>(&header, 32);
        let mut bytes = encoded.to_vec();
        bytes.extend_from_slice(&[0u8; 4]);
        let mut data_bytes = vec![0u8; data.len() * 4];
        BigEndian::write_f32_into(&data, &mut data_bytes);
        bytes.extend_from_slice(&data_bytes);
        let path = tmp("be.nii");
        fs::write(&path, &bytes).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.dims(), vol.dims());
        assert_eq!(back.header.pixdim, vol.header.pixdim);
        assert_eq!(back.data(), vol.data());
    }

    #[test]
    fn int16_data_with_scaling_is_applied() {
        let vol = scalar([2, 2, 1], [1.0; 3], vec![0.0; 4]);
        let path = tmp("i16.nii");
        write_volume(&vol, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        LittleEndian::write_i16(&mut bytes[70..72], datatype::INT16);
        LittleEndian::write_i16(&mut bytes[72..74], 16);
        LittleEndian::write_f32(&mut bytes[112..116], 0.5); // scl_slope
        LittleEndian::write_f32(&mut bytes[116..120], 10.0); // scl_inter
        bytes.truncate(352);
        for raw in [100i16, -20, 0, 7] {
            let mut b = [0u8; 2];
            LittleEndian::write_i16(&mut b, raw);
            bytes.extend_from_slice(&b);
        }
        fs::write(&path, &bytes).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.data(), &[60.0, 0.0, 10.0, 13.5]);
    }

    #[test]
    fn label_file_with_fractional_values_is_rejected() {
        let vol = scalar([2, 2, 1], [1.0; 3], vec![0.0, 1.0, 2.5, 3.0]);
        let path = tmp("frac.nii");
        write_volume(&vol, &path).unwrap();
        assert!(matches!(
            read_labels(&path),
            Err(NiftiError::InvalidLabel { index: 2, .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_identity_on_random_volumes(
            nx in 1usize..6, ny in 1usize..6, nz in 1usize..6,
            px in 0.25f32..4.0, py in 0.25f32..4.0, pz in 0.25f32..4.0,
            seed in any::<u32>(),
        ) {
            let n = nx * ny * nz;
            let data: Vec<f32> = (0..n)
                .map(|i| ((i as u32).wrapping_mul(2654435761).wrapping_add(seed) as f32 / u32::MAX as f32) * 200.0 - 100.0)
                .collect();
            let vol = scalar([nx, ny, nz], [px, py, pz], data.clone());
            let path = tmp("prop.nii");
            write_volume(&vol, &path).unwrap();
            let back = read_volume(&path).unwrap();
            prop_assert_eq!(back.dims(), [nx, ny, nz]);
            prop_assert_eq!(&back.header.pixdim, &vec![px, py, pz]);
            prop_assert_eq!(back.data(), &data[..]);
        }
    }
}
