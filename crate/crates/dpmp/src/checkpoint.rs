//! Versioned binary model checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic         8 B   "DPMPCKPT"
//! version       u32
//! variant       u8    0 direct, 1 ae, 2 vae, 3 cvae
//! space         u8    0 joint, 1 task
//! flags         u8    bit0..2 stage1..3 done, bit3 diag-only covariance,
//!                     bit4 optimizer section present
//! pad           u8
//! latent_dim, n_bas, n_joints, n_steps, image_h, image_w   u32 each
//! cov_floor, leaky_slope                                   f64 each
//! encoder_hidden: count u32, then count × u32
//! head_hidden:    count u32, then count × u32
//! tensors: count u32, then per tensor len u32 + len × f32
//!          (encoder tensors, decoder tensors, then heads joint by joint;
//!          weights before bias per layer, column-major)
//! optimizer (if flagged): lr, beta1, beta2, eps f64, step u64,
//!          count u32, then per tensor len u32 + len × f32 first moment
//!          + len × f32 second moment
//! ```
//!
//! Decoding validates every tensor length against the shapes the header
//! implies before any model is built, so arbitrary input cannot trigger
//! oversized allocations or panics.

use std::path::Path;

use thiserror::Error;

use crate::nn::{chol_param_count, Adam, AdamParams};
use crate::pipeline::{DpmpModel, ModelArch, PipelineError, Space, VariantKind};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"DPMPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_DIM: u64 = 1 << 16;
const MAX_IMAGE_DIM: u64 = 1 << 12;
const MAX_HIDDEN_LAYERS: usize = 32;
const MAX_JOINTS: u64 = 64;
const MAX_STEPS: u64 = 1 << 20;

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (expected {CHECKPOINT_VERSION})")]
    VersionMismatch { found: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Corrupt(msg.into())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.at + n > self.bytes.len() {
            return Err(corrupt("unexpected end of file"));
        }
        let out = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_block(&mut self, len: usize) -> Result<Vec<f64>, CheckpointError> {
        let raw = self.take(len * 4)?;
        let mut out = Vec::with_capacity(len);
        for chunk in raw.chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(corrupt("non-finite tensor value"));
            }
            out.push(v);
        }
        Ok(out)
    }
}

/// Dense-stack tensor lengths: weights then bias per layer.
fn stack_lens(sizes: &[u64], out: &mut Vec<u64>) {
    for w in sizes.windows(2) {
        out.push(w[0] * w[1]);
        out.push(w[1]);
    }
}

/// Tensor lengths a model with this variant and architecture must have,
/// in checkpoint order. Pure arithmetic; nothing is allocated.
pub fn expected_tensor_lens(variant: VariantKind, arch: &ModelArch) -> Vec<u64> {
    let input = (arch.image_h * arch.image_w * 3) as u64;
    let latent = arch.latent_dim as u64;
    let hidden: Vec<u64> = arch.encoder_hidden.iter().map(|h| *h as u64).collect();
    let mut lens = Vec::new();

    if variant.stochastic_latent() {
        let mut trunk = vec![input];
        trunk.extend(&hidden);
        stack_lens(&trunk, &mut lens);
        let h_last = *trunk.last().unwrap();
        lens.extend([h_last * latent, latent, h_last * latent, latent]);
    } else {
        let mut sizes = vec![input];
        sizes.extend(&hidden);
        sizes.push(latent);
        stack_lens(&sizes, &mut lens);
    }

    if variant.has_autoencoder() {
        let mut sizes = vec![latent];
        sizes.extend(hidden.iter().rev());
        sizes.push(input);
        stack_lens(&sizes, &mut lens);
    }

    let head_in = latent + if variant.conditioned() { 2 } else { 0 };
    let head_out = (arch.n_bas + chol_param_count(arch.n_bas, arch.diag_only)) as u64;
    for _ in 0..arch.n_joints {
        let mut sizes = vec![head_in];
        sizes.extend(arch.head_hidden.iter().map(|h| *h as u64));
        sizes.push(head_out);
        stack_lens(&sizes, &mut lens);
    }
    lens
}

/// Serialize a model to checkpoint bytes.
pub fn encode_checkpoint(model: &DpmpModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let variant = match model.variant {
        VariantKind::Direct => 0u8,
        VariantKind::Ae => 1,
        VariantKind::Vae => 2,
        VariantKind::Cvae => 3,
    };
    out.push(variant);
    out.push(match model.space {
        Space::Joint => 0,
        Space::Task => 1,
    });
    let mut flags = 0u8;
    if model.stage1_done {
        flags |= 1;
    }
    if model.stage2_done {
        flags |= 2;
    }
    if model.stage3_done {
        flags |= 4;
    }
    if model.arch.diag_only {
        flags |= 8;
    }
    if model.optimizer.is_some() {
        flags |= 16;
    }
    out.push(flags);
    out.push(0);
    for v in [
        model.arch.latent_dim,
        model.arch.n_bas,
        model.arch.n_joints,
        model.arch.n_steps,
        model.arch.image_h,
        model.arch.image_w,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&model.arch.cov_floor.to_le_bytes());
    out.extend_from_slice(&model.arch.leaky_slope.to_le_bytes());
    for list in [&model.arch.encoder_hidden, &model.arch.head_hidden] {
        out.extend_from_slice(&(list.len() as u32).to_le_bytes());
        for v in list {
            out.extend_from_slice(&(*v as u32).to_le_bytes());
        }
    }
    let tensors = model.tensor_slices();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for v in t {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    if let Some(adam) = &model.optimizer {
        for v in [
            adam.params.lr,
            adam.params.beta1,
            adam.params.beta2,
            adam.params.eps,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&adam.step_count.to_le_bytes());
        out.extend_from_slice(&(adam.first_moment.len() as u32).to_le_bytes());
        for (m, v) in adam.first_moment.iter().zip(&adam.second_moment) {
            out.extend_from_slice(&(m.len() as u32).to_le_bytes());
            for x in m {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
            for x in v {
                out.extend_from_slice(&(*x as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Decode checkpoint bytes into a model.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<DpmpModel, CheckpointError> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let variant = match r.u8()? {
        0 => VariantKind::Direct,
        1 => VariantKind::Ae,
        2 => VariantKind::Vae,
        3 => VariantKind::Cvae,
        other => return Err(corrupt(format!("unknown variant tag {other}"))),
    };
    let space = match r.u8()? {
        0 => Space::Joint,
        1 => Space::Task,
        other => return Err(corrupt(format!("unknown space tag {other}"))),
    };
    let flags = r.u8()?;
    if flags & !0b11111 != 0 {
        return Err(corrupt("unknown flag bits set"));
    }
    if r.u8()? != 0 {
        return Err(corrupt("nonzero pad byte"));
    }
    let latent_dim = r.u32()? as u64;
    let n_bas = r.u32()? as u64;
    let n_joints = r.u32()? as u64;
    let n_steps = r.u32()? as u64;
    let image_h = r.u32()? as u64;
    let image_w = r.u32()? as u64;
    if latent_dim == 0 || latent_dim > MAX_DIM || n_bas == 0 || n_bas > MAX_DIM {
        return Err(corrupt("latent or basis dim out of range"));
    }
    if n_joints == 0 || n_joints > MAX_JOINTS || n_steps < 2 || n_steps > MAX_STEPS {
        return Err(corrupt("joint count or step count out of range"));
    }
    if image_h == 0 || image_h > MAX_IMAGE_DIM || image_w == 0 || image_w > MAX_IMAGE_DIM {
        return Err(corrupt("image dims out of range"));
    }
    let cov_floor = r.f64()?;
    let leaky_slope = r.f64()?;
    if !(cov_floor > 0.0) || !cov_floor.is_finite() || !leaky_slope.is_finite() {
        return Err(corrupt("bad covariance floor or activation slope"));
    }
    let mut hidden_lists = Vec::new();
    for what in ["encoder_hidden", "head_hidden"] {
        let count = r.u32()? as usize;
        if count > MAX_HIDDEN_LAYERS {
            return Err(corrupt(format!("{what} has {count} layers")));
        }
        let mut list = Vec::with_capacity(count);
        for _ in 0..count {
            let v = r.u32()? as u64;
            if v == 0 || v > MAX_DIM {
                return Err(corrupt(format!("{what} width {v} out of range")));
            }
            list.push(v as usize);
        }
        hidden_lists.push(list);
    }
    let arch = ModelArch {
        image_h: image_h as usize,
        image_w: image_w as usize,
        latent_dim: latent_dim as usize,
        encoder_hidden: hidden_lists[0].clone(),
        head_hidden: hidden_lists[1].clone(),
        n_bas: n_bas as usize,
        n_joints: n_joints as usize,
        n_steps: n_steps as usize,
        diag_only: flags & 8 != 0,
        cov_floor,
        leaky_slope,
    };

    let expected = expected_tensor_lens(variant, &arch);
    let tensor_count = r.u32()? as usize;
    if tensor_count != expected.len() {
        return Err(corrupt(format!(
            "{tensor_count} tensors, architecture implies {}",
            expected.len()
        )));
    }
    // Validate every declared length against the architecture before
    // reading values; the reader bounds each block by the file size.
    let mut tensors = Vec::with_capacity(tensor_count);
    for want in &expected {
        let len = r.u32()? as u64;
        if len != *want {
            return Err(corrupt(format!(
                "tensor length {len}, architecture implies {want}"
            )));
        }
        tensors.push(r.f32_block(len as usize)?);
    }

    let optimizer = if flags & 16 != 0 {
        let lr = r.f64()?;
        let beta1 = r.f64()?;
        let beta2 = r.f64()?;
        let eps = r.f64()?;
        if !(lr.is_finite() && beta1.is_finite() && beta2.is_finite() && eps.is_finite()) {
            return Err(corrupt("non-finite optimizer hyperparameters"));
        }
        let step_count = r.u64()?;
        let count = r.u32()? as usize;
        if count > expected.len() {
            return Err(corrupt("optimizer tracks more tensors than the model has"));
        }
        let mut first = Vec::with_capacity(count);
        let mut second = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            if len as u64 > MAX_DIM * MAX_DIM {
                return Err(corrupt("optimizer tensor too large"));
            }
            first.push(r.f32_block(len)?);
            second.push(r.f32_block(len)?);
        }
        Some(Adam {
            params: AdamParams {
                lr,
                beta1,
                beta2,
                eps,
            },
            step_count,
            first_moment: first,
            second_moment: second,
        })
    } else {
        None
    };
    if r.at != bytes.len() {
        return Err(corrupt("trailing bytes after checkpoint payload"));
    }

    let mut model = DpmpModel::init(variant, space, &arch, 0)?;
    for (slot, values) in model.tensor_slices_mut().into_iter().zip(&tensors) {
        slot.copy_from_slice(values);
    }
    model.stage1_done = flags & 1 != 0;
    model.stage2_done = flags & 2 != 0;
    model.stage3_done = flags & 4 != 0;
    model.optimizer = optimizer;
    Ok(model)
}

pub fn save_checkpoint(model: &DpmpModel, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<DpmpModel, CheckpointError> {
    let bytes = std::fs::read(path)?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> ModelArch {
        ModelArch {
            image_h: 16,
            image_w: 16,
            latent_dim: 6,
            encoder_hidden: vec![24, 12],
            head_hidden: vec![10],
            n_bas: 4,
            n_joints: 3,
            n_steps: 20,
            diag_only: false,
            cov_floor: 1e-6,
            leaky_slope: 0.01,
        }
    }

    #[test]
    fn round_trip_preserves_f32_quantized_params() {
        for variant in [
            VariantKind::Direct,
            VariantKind::Ae,
            VariantKind::Vae,
            VariantKind::Cvae,
        ] {
            let mut model = DpmpModel::init(variant, Space::Task, &arch(), 3).unwrap();
            model.stage2_done = true;
            // Quantize in-memory params so the f32 file round-trips exactly.
            for t in model.tensor_slices_mut() {
                for v in t.iter_mut() {
                    *v = *v as f32 as f64;
                }
            }
            let bytes = encode_checkpoint(&model);
            let loaded = decode_checkpoint(&bytes).unwrap();
            assert_eq!(model, loaded, "variant {variant:?}");
        }
    }

    #[test]
    fn encoding_is_deterministic() {
        let model = DpmpModel::init(VariantKind::Vae, Space::Joint, &arch(), 5).unwrap();
        assert_eq!(encode_checkpoint(&model), encode_checkpoint(&model));
    }

    #[test]
    fn expected_lens_match_real_models() {
        for variant in [
            VariantKind::Direct,
            VariantKind::Ae,
            VariantKind::Vae,
            VariantKind::Cvae,
        ] {
            let model = DpmpModel::init(variant, Space::Task, &arch(), 1).unwrap();
            let want: Vec<u64> = model.tensor_slices().iter().map(|s| s.len() as u64).collect();
            assert_eq!(expected_tensor_lens(variant, &arch()), want, "{variant:?}");
        }
    }

    #[test]
    fn optimizer_state_round_trips() {
        let mut model = DpmpModel::init(VariantKind::Ae, Space::Task, &arch(), 3).unwrap();
        let lens: Vec<usize> = model.heads[0]
            .mlp
            .tensor_slices()
            .iter()
            .map(|s| s.len())
            .collect();
        let mut adam = Adam::new(AdamParams::with_lr(0.5), &lens);
        adam.step_count = 17;
        adam.first_moment[0][0] = 0.25;
        adam.second_moment[0][0] = 0.125;
        model.optimizer = Some(adam);
        for t in model.tensor_slices_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        let loaded = decode_checkpoint(&encode_checkpoint(&model)).unwrap();
        assert_eq!(loaded.optimizer, model.optimizer);
    }

    #[test]
    fn truncated_and_tampered_files_error() {
        let model = DpmpModel::init(VariantKind::Ae, Space::Task, &arch(), 3).unwrap();
        let bytes = encode_checkpoint(&model);
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 1]),
            Err(CheckpointError::Corrupt(_))
        ));
        assert!(matches!(
            decode_checkpoint(b"not a checkpoint"),
            Err(CheckpointError::BadMagic)
        ));
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        assert!(matches!(
            decode_checkpoint(&versioned),
            Err(CheckpointError::VersionMismatch { found: 9 })
        ));
        // Corrupt a tensor length field: first tensor length sits right
        // after the fixed header + hidden lists + tensor count.
        let mut tampered = bytes.clone();
        let offset = 8 + 4 + 4 + 24 + 16 + (4 + 2 * 4) + (4 + 4) + 4;
        tampered[offset] ^= 0xff;
        assert!(decode_checkpoint(&tampered).is_err());
    }
}
