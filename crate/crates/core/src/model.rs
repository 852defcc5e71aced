//! The four-branch classification network.
//!
//! Three identical convolutional branches process the axial, coronal and
//! sagittal 32x32 patches; a fourth branch passes the 15 atlas prior
//! probabilities straight into the fusion stage. Each conv branch is two
//! conv-conv-pool blocks (32 then 64 filters, all 3x3 kernels, ReLU) and an
//! FC-180; the concatenated features go through FC-540 and FC-270 into a
//! 15-way softmax.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::sampling::PATCH_SIZE;
use crate::tensor::ops::{
    conv2d, conv2d_backward, dense, dense_backward, maxpool2, maxpool2_backward, relu,
    relu_backward, softmax,
};
use crate::tensor::{Elem, LayerParams, Tensor, TensorError};
use crate::volume::CLASS_COUNT;

pub const VIEW_NAMES: [&str; 3] = ["axial", "coronal", "sagittal"];
pub const BRANCH_FC_UNITS: usize = 180;
pub const FUSION1_UNITS: usize = 540;
pub const FUSION2_UNITS: usize = 270;

/// Flattened width after the two pooling stages: 64 filters over 8x8.
const FLAT_WIDTH: usize = 64 * (PATCH_SIZE / 4) * (PATCH_SIZE / 4);
const LAYERS_PER_BRANCH: usize = 5;
const FUSION1_IDX: usize = 15;
const FUSION2_IDX: usize = 16;
const CLASSIFIER_IDX: usize = 17;

const CHECKPOINT_MAGIC: [u8; 4] = *b"SCKT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("unsupported checkpoint version {0}")]
    VersionMismatch(u32),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

/// All learnable parameters, in a fixed layer order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T: Elem = f32> {
    pub layers: Vec<LayerParams<T>>,
    pub use_atlas_branch: bool,
}

/// (name, weight shape, bias shape) for every layer, in order.
fn layer_specs(use_atlas_branch: bool) -> Vec<(String, Vec<usize>, Vec<usize>)> {
    let mut specs = Vec::with_capacity(18);
    for view in VIEW_NAMES {
        specs.push((format!("{view}.conv1"), vec![32, 1, 3, 3], vec![32]));
        specs.push((format!("{view}.conv2"), vec![32, 32, 3, 3], vec![32]));
        specs.push((format!("{view}.conv3"), vec![64, 32, 3, 3], vec![64]));
        specs.push((format!("{view}.conv4"), vec![64, 64, 3, 3], vec![64]));
        specs.push((
            format!("{view}.fc"),
            vec![FLAT_WIDTH, BRANCH_FC_UNITS],
            vec![BRANCH_FC_UNITS],
        ));
    }
    let fusion_in = fusion_input_width(use_atlas_branch);
    specs.push(("fusion.fc1".into(), vec![fusion_in, FUSION1_UNITS], vec![FUSION1_UNITS]));
    specs.push(("fusion.fc2".into(), vec![FUSION1_UNITS, FUSION2_UNITS], vec![FUSION2_UNITS]));
    specs.push(("fusion.out".into(), vec![FUSION2_UNITS, CLASS_COUNT], vec![CLASS_COUNT]));
    specs
}

/// Width of the fusion input: three FC-180 outputs, plus the 15 prior
/// probabilities when the atlas branch is enabled.
pub fn fusion_input_width(use_atlas_branch: bool) -> usize {
    3 * BRANCH_FC_UNITS + if use_atlas_branch { CLASS_COUNT } else { 0 }
}

/// Builds a freshly initialized model. Weights draw from the uniform
/// distribution on +-sqrt(6 / fan_in), biases start at zero; the fixed
/// layer order fixes the draw order, so the result is a pure function of
/// the seed.
pub fn build_model<T: Elem>(seed: u64, use_atlas_branch: bool) -> ModelParams<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_specs(use_atlas_branch)
        .into_iter()
        .map(|(name, w_shape, b_shape)| {
            // For conv [F,C,3,3] fan_in = C*9; for dense [N,M] fan_in = N.
            let fan_in: usize = if w_shape.len() == 4 {
                w_shape[1] * w_shape[2] * w_shape[3]
            } else {
                w_shape[0]
            };
            let bound = (6.0 / fan_in as f64).sqrt();
            let len: usize = w_shape.iter().product();
            let values = (0..len)
                .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            let weights = Tensor::from_vec(&w_shape, values).expect("consistent shape");
            let bias = Tensor::zeros(&b_shape);
            LayerParams::new(name, weights, bias)
        })
        .collect();
    ModelParams {
        layers,
        use_atlas_branch,
    }
}

impl<T: Elem> ModelParams<T> {
    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.parameter_count()).sum()
    }

    pub fn cast<U: Elem>(&self) -> ModelParams<U> {
        ModelParams {
            layers: self.layers.iter().map(|l| l.cast()).collect(),
            use_atlas_branch: self.use_atlas_branch,
        }
    }
}

/// One forward batch: 2.5D patches `[B,3,32,32]` and priors `[B,15]`.
#[derive(Clone, Debug)]
pub struct Batch<T: Elem = f32> {
    pub patches: Tensor<T>,
    pub priors: Tensor<T>,
}

impl<T: Elem> Batch<T> {
    pub fn new(patches: Tensor<T>, priors: Tensor<T>) -> Result<Self, TensorError> {
        let b = match *patches.shape() {
            [b, 3, PATCH_SIZE, PATCH_SIZE] => b,
            _ => {
                return Err(TensorError::ShapeMismatch(format!(
                    "patches must be [B,3,{PATCH_SIZE},{PATCH_SIZE}], got {:?}",
                    patches.shape()
                )))
            }
        };
        if priors.shape() != [b, CLASS_COUNT] {
            return Err(TensorError::ShapeMismatch(format!(
                "priors must be [{b},{CLASS_COUNT}], got {:?}",
                priors.shape()
            )));
        }
        Ok(Batch { patches, priors })
    }

    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Activations cached by [`forward_trace`] for the backward pass.
/// Pre-activation tensors are stored; ReLU outputs are recomputed on demand.
pub struct Trace<T: Elem = f32> {
    branches: Vec<BranchTrace<T>>,
    fusion_input: Tensor<T>,
    fusion1_out: Tensor<T>,
    fusion2_out: Tensor<T>,
}

struct BranchTrace<T: Elem> {
    input: Tensor<T>,
    conv1_out: Tensor<T>,
    conv2_out: Tensor<T>,
    pool1: Tensor<T>,
    conv3_out: Tensor<T>,
    conv4_out: Tensor<T>,
    fc_in: Tensor<T>,
    fc_out: Tensor<T>,
}

impl<T: Elem> Trace<T> {
    /// Fingerprint of the piecewise-linear region the forward pass landed
    /// in: the sign of every ReLU pre-activation and the argmax of every
    /// pooling window. Finite-difference gradient checks compare the
    /// fingerprints of their two evaluation points and discard probes that
    /// straddle a kink, where central differences do not estimate the
    /// derivative.
    pub fn activation_pattern(&self) -> Vec<u8> {
        let mut pattern = Vec::new();
        let mut push_signs = |t: &Tensor<T>| {
            pattern.extend(t.values().iter().map(|&v| (v > T::zero()) as u8));
        };
        for branch in &self.branches {
            push_signs(&branch.conv1_out);
            push_signs(&branch.conv2_out);
            push_signs(&branch.conv3_out);
            push_signs(&branch.conv4_out);
            push_signs(&branch.fc_out);
        }
        push_signs(&self.fusion1_out);
        push_signs(&self.fusion2_out);
        for branch in &self.branches {
            pool_argmax_pattern(&relu(&branch.conv2_out), &mut pattern);
            pool_argmax_pattern(&relu(&branch.conv4_out), &mut pattern);
        }
        pattern
    }
}

/// Appends the row-major offset of each 2x2 pooling window's first maximum.
fn pool_argmax_pattern<T: Elem>(input: &Tensor<T>, pattern: &mut Vec<u8>) {
    let (b, f, h, w) = match *input.shape() {
        [b, f, h, w] => (b, f, h, w),
        _ => return,
    };
    for plane in 0..b * f {
        let src = &input.values()[plane * h * w..];
        for py in 0..h / 2 {
            for px in 0..w / 2 {
                let base = (2 * py) * w + 2 * px;
                let mut best = src[base];
                let mut best_code = 0u8;
                for (code, &off) in [1usize, w, w + 1].iter().enumerate() {
                    let v = src[base + off];
                    if v > best {
                        best = v;
                        best_code = code as u8 + 1;
                    }
                }
                pattern.push(best_code);
            }
        }
    }
}

fn branch_forward<T: Elem>(
    layers: &[LayerParams<T>],
    input: Tensor<T>,
) -> Result<BranchTrace<T>, TensorError> {
    let b = input.shape()[0];
    let conv1_out = conv2d(&input, &layers[0].weights, &layers[0].bias)?;
    let conv2_out = conv2d(&relu(&conv1_out), &layers[1].weights, &layers[1].bias)?;
    let pool1 = maxpool2(&relu(&conv2_out))?;
    let conv3_out = conv2d(&pool1, &layers[2].weights, &layers[2].bias)?;
    let conv4_out = conv2d(&relu(&conv3_out), &layers[3].weights, &layers[3].bias)?;
    let pool2 = maxpool2(&relu(&conv4_out))?;
    let fc_in = pool2.with_shape(&[b, FLAT_WIDTH])?;
    let fc_out = dense(&fc_in, &layers[4].weights, &layers[4].bias)?;
    Ok(BranchTrace {
        input,
        conv1_out,
        conv2_out,
        pool1,
        conv3_out,
        conv4_out,
        fc_in,
        fc_out,
    })
}

/// Copies channel `view` of the `[B,3,S,S]` patch tensor into `[B,1,S,S]`.
fn branch_input<T: Elem>(patches: &Tensor<T>, view: usize) -> Tensor<T> {
    let b = patches.shape()[0];
    let plane = PATCH_SIZE * PATCH_SIZE;
    let mut out = Tensor::zeros(&[b, 1, PATCH_SIZE, PATCH_SIZE]);
    for s in 0..b {
        let src = &patches.values()[(s * 3 + view) * plane..][..plane];
        out.values_mut()[s * plane..][..plane].copy_from_slice(src);
    }
    out
}

/// Full forward pass retaining the activations needed for [`backward`].
/// Returns the logits `[B,15]`.
pub fn forward_trace<T: Elem>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
) -> Result<(Tensor<T>, Trace<T>), TensorError> {
    let b = batch.len();
    let mut branches = Vec::with_capacity(3);
    for view in 0..3 {
        let layers = &params.layers[view * LAYERS_PER_BRANCH..(view + 1) * LAYERS_PER_BRANCH];
        branches.push(branch_forward(layers, branch_input(&batch.patches, view))?);
    }

    let width = fusion_input_width(params.use_atlas_branch);
    let mut fusion_input = Tensor::zeros(&[b, width]);
    for s in 0..b {
        let row = &mut fusion_input.values_mut()[s * width..(s + 1) * width];
        for (view, branch) in branches.iter().enumerate() {
            let src = &branch.fc_out.values()[s * BRANCH_FC_UNITS..(s + 1) * BRANCH_FC_UNITS];
            for (dst, &v) in row[view * BRANCH_FC_UNITS..].iter_mut().zip(src) {
                *dst = if v > T::zero() { v } else { T::zero() };
            }
        }
        if params.use_atlas_branch {
            let src = &batch.priors.values()[s * CLASS_COUNT..(s + 1) * CLASS_COUNT];
            row[3 * BRANCH_FC_UNITS..].copy_from_slice(src);
        }
    }

    let fusion1 = &params.layers[FUSION1_IDX];
    let fusion2 = &params.layers[FUSION2_IDX];
    let classifier = &params.layers[CLASSIFIER_IDX];
    let fusion1_out = dense(&fusion_input, &fusion1.weights, &fusion1.bias)?;
    let fusion2_out = dense(&relu(&fusion1_out), &fusion2.weights, &fusion2.bias)?;
    let logits = dense(&relu(&fusion2_out), &classifier.weights, &classifier.bias)?;
    Ok((
        logits,
        Trace {
            branches,
            fusion_input,
            fusion1_out,
            fusion2_out,
        },
    ))
}

/// Forward pass returning softmax probabilities `[B,15]`; every row sums
/// to one.
pub fn forward<T: Elem>(
    params: &ModelParams<T>,
    batch: &Batch<T>,
) -> Result<Tensor<T>, TensorError> {
    let (logits, _) = forward_trace(params, batch)?;
    softmax(&logits)
}

/// Reverse pass: accumulates parameter gradients for the whole network
/// given the gradient of the loss with respect to the logits.
pub fn backward<T: Elem>(
    params: &mut ModelParams<T>,
    trace: &Trace<T>,
    grad_logits: &Tensor<T>,
) -> Result<(), TensorError> {
    let b = grad_logits.shape()[0];

    let zr2 = relu(&trace.fusion2_out);
    let g_zr2 = {
        let LayerParams { weights, bias, .. } = &mut params.layers[CLASSIFIER_IDX];
        dense_backward(&zr2, weights, bias, grad_logits)?
    };
    let g_z2 = relu_backward(&trace.fusion2_out, &g_zr2);
    let zr1 = relu(&trace.fusion1_out);
    let g_zr1 = {
        let LayerParams { weights, bias, .. } = &mut params.layers[FUSION2_IDX];
        dense_backward(&zr1, weights, bias, &g_z2)?
    };
    let g_z1 = relu_backward(&trace.fusion1_out, &g_zr1);
    let grad_concat = {
        let LayerParams { weights, bias, .. } = &mut params.layers[FUSION1_IDX];
        dense_backward(&trace.fusion_input, weights, bias, &g_z1)?
    };

    let width = fusion_input_width(params.use_atlas_branch);
    for (view, branch) in trace.branches.iter().enumerate() {
        // Slice this branch's 180 columns out of the fusion gradient and
        // push them through the branch ReLU.
        let mut g_fr = Tensor::zeros(&[b, BRANCH_FC_UNITS]);
        for s in 0..b {
            let src = &grad_concat.values()
                [s * width + view * BRANCH_FC_UNITS..s * width + (view + 1) * BRANCH_FC_UNITS];
            g_fr.values_mut()[s * BRANCH_FC_UNITS..(s + 1) * BRANCH_FC_UNITS].copy_from_slice(src);
        }
        let g_fc = relu_backward(&branch.fc_out, &g_fr);
        let layer_base = view * LAYERS_PER_BRANCH;

        let g_flat = {
            let LayerParams { weights, bias, .. } = &mut params.layers[layer_base + 4];
            dense_backward(&branch.fc_in, weights, bias, &g_fc)?
        };
        let g_pool2 = g_flat.with_shape(&[b, 64, PATCH_SIZE / 4, PATCH_SIZE / 4])?;
        let r4 = relu(&branch.conv4_out);
        let g_r4 = maxpool2_backward(&r4, &g_pool2)?;
        let g_a4 = relu_backward(&branch.conv4_out, &g_r4);
        let r3 = relu(&branch.conv3_out);
        let g_r3 = {
            let LayerParams { weights, bias, .. } = &mut params.layers[layer_base + 3];
            conv2d_backward(&r3, weights, bias, &g_a4)?
        };
        let g_a3 = relu_backward(&branch.conv3_out, &g_r3);
        let g_pool1 = {
            let LayerParams { weights, bias, .. } = &mut params.layers[layer_base + 2];
            conv2d_backward(&branch.pool1, weights, bias, &g_a3)?
        };
        let r2 = relu(&branch.conv2_out);
        let g_r2 = maxpool2_backward(&r2, &g_pool1)?;
        let g_a2 = relu_backward(&branch.conv2_out, &g_r2);
        let r1 = relu(&branch.conv1_out);
        let g_r1 = {
            let LayerParams { weights, bias, .. } = &mut params.layers[layer_base + 1];
            conv2d_backward(&r1, weights, bias, &g_a2)?
        };
        let g_a1 = relu_backward(&branch.conv1_out, &g_r1);
        let LayerParams { weights, bias, .. } = &mut params.layers[layer_base];
        conv2d_backward(&branch.input, weights, bias, &g_a1)?;
    }
    Ok(())
}

/// A trained model plus the training metadata carried in its checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub params: ModelParams<f32>,
    pub epochs_run: u32,
    pub best_val_accuracy: f32,
}

impl ModelCheckpoint {
    /// Serializes to the binary checkpoint format: magic `SCKT`, u32
    /// version, u8 atlas flag, u32 tensor count, then per tensor a u32
    /// name length, the name bytes, u32 ndim, u32 dims and little-endian
    /// f32 values. Training metadata rides along as two `meta.*` tensors.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        out.write_all(&CHECKPOINT_MAGIC)?;
        out.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        out.write_u8(self.params.use_atlas_branch as u8)?;
        let tensor_count = self.params.layers.len() * 2 + 2;
        out.write_u32::<LittleEndian>(tensor_count as u32)?;
        for layer in &self.params.layers {
            write_tensor(&mut out, &format!("{}.weight", layer.name), &layer.weights)?;
            write_tensor(&mut out, &format!("{}.bias", layer.name), &layer.bias)?;
        }
        write_raw_tensor(&mut out, "meta.epochs_run", &[1], &[self.epochs_run as f32])?;
        write_raw_tensor(
            &mut out,
            "meta.best_val_accuracy",
            &[1],
            &[self.best_val_accuracy],
        )?;
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path)?;
        let mut cursor = std::io::Cursor::new(bytes.as_slice());
        let mut magic = [0u8; 4];
        read_exact(&mut cursor, &mut magic)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(ModelError::CorruptCheckpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut cursor)?;
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::VersionMismatch(version));
        }
        let flag = {
            let mut b = [0u8; 1];
            read_exact(&mut cursor, &mut b)?;
            b[0] != 0
        };
        let count = read_u32(&mut cursor)? as usize;

        let specs = layer_specs(flag);
        if count != specs.len() * 2 + 2 {
            return Err(ModelError::CorruptCheckpoint(format!(
                "expected {} tensors, found {count}",
                specs.len() * 2 + 2
            )));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (name, w_shape, b_shape) in &specs {
            let weights = read_named_tensor(&mut cursor, &format!("{name}.weight"), w_shape)?;
            let bias = read_named_tensor(&mut cursor, &format!("{name}.bias"), b_shape)?;
            layers.push(LayerParams::new(name.clone(), weights, bias));
        }
        let epochs = read_named_tensor(&mut cursor, "meta.epochs_run", &[1])?;
        let acc = read_named_tensor(&mut cursor, "meta.best_val_accuracy", &[1])?;
        if cursor.position() != bytes.len() as u64 {
            return Err(ModelError::CorruptCheckpoint(format!(
                "{} trailing bytes",
                bytes.len() as u64 - cursor.position()
            )));
        }
        Ok(ModelCheckpoint {
            params: ModelParams {
                layers,
                use_atlas_branch: flag,
            },
            epochs_run: epochs.values()[0] as u32,
            best_val_accuracy: acc.values()[0],
        })
    }
}

fn write_tensor<W: Write>(out: &mut W, name: &str, tensor: &Tensor<f32>) -> Result<(), ModelError> {
    write_raw_tensor(out, name, tensor.shape(), tensor.values())
}

fn write_raw_tensor<W: Write>(
    out: &mut W,
    name: &str,
    shape: &[usize],
    values: &[f32],
) -> Result<(), ModelError> {
    out.write_u32::<LittleEndian>(name.len() as u32)?;
    out.write_all(name.as_bytes())?;
    out.write_u32::<LittleEndian>(shape.len() as u32)?;
    for &d in shape {
        out.write_u32::<LittleEndian>(d as u32)?;
    }
    for &v in values {
        out.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_exact(cursor: &mut std::io::Cursor<&[u8]>, buf: &mut [u8]) -> Result<(), ModelError> {
    cursor
        .read_exact(buf)
        .map_err(|_| ModelError::CorruptCheckpoint("unexpected end of file".into()))
}

fn read_u32(cursor: &mut std::io::Cursor<&[u8]>) -> Result<u32, ModelError> {
    cursor
        .read_u32::<LittleEndian>()
        .map_err(|_| ModelError::CorruptCheckpoint("unexpected end of file".into()))
}

fn read_named_tensor(
    cursor: &mut std::io::Cursor<&[u8]>,
    expected_name: &str,
    expected_shape: &[usize],
) -> Result<Tensor<f32>, ModelError> {
    let name_len = read_u32(cursor)? as usize;
    if name_len > 1024 {
        return Err(ModelError::CorruptCheckpoint(format!(
            "implausible name length {name_len}"
        )));
    }
    let mut name_bytes = vec![0u8; name_len];
    read_exact(cursor, &mut name_bytes)?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| ModelError::CorruptCheckpoint("tensor name is not utf-8".into()))?;
    if name != expected_name {
        return Err(ModelError::CorruptCheckpoint(format!(
            "expected tensor {expected_name:?}, found {name:?}"
        )));
    }
    let ndim = read_u32(cursor)? as usize;
    if ndim != expected_shape.len() {
        return Err(ModelError::CorruptCheckpoint(format!(
            "tensor {name}: expected {} dims, found {ndim}",
            expected_shape.len()
        )));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(read_u32(cursor)? as usize);
    }
    if shape != expected_shape {
        return Err(ModelError::CorruptCheckpoint(format!(
            "tensor {name}: expected shape {expected_shape:?}, found {shape:?}"
        )));
    }
    let len: usize = shape.iter().product();
    let mut values = vec![0.0f32; len];
    for v in &mut values {
        *v = cursor
            .read_f32::<LittleEndian>()
            .map_err(|_| ModelError::CorruptCheckpoint("unexpected end of file".into()))?;
    }
    Ok(Tensor::from_vec(&shape, values).expect("shape just validated"))
}
