//! Encoder initialization from pretrained weight files.
//!
//! Two sources are accepted: a checkpoint written by `save_model` (its
//! encoder tensors are copied) or, for the transformer encoder, a
//! safetensors file in the reference PyTorch layout: linear weights as
//! `out x in`, the patch convolution as `out x in x kh x kw`. The downsample
//! layers may be attached either to the end of their stage
//! (`layers.{i}.downsample`) or to the start of the next
//! (`layers.{i+1}.downsample`).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use ndarray::ArrayViewMutD;
use safetensors::{Dtype, SafeTensors};

use super::checkpoint::{decode, is_checkpoint};
use super::layers::Parameters;
use super::{ModelError, SliceEncoder};

/// Replaces the parameters of `encoder` with those stored at `path`.
pub fn load_pretrained_encoder(path: &Path, encoder: &mut SliceEncoder) -> Result<(), ModelError> {
    let bytes = fs::read(path)?;
    if is_checkpoint(&bytes) {
        let (model, _) = decode(&bytes)?;
        return copy_encoder(&model.encoder, encoder);
    }
    match encoder {
        SliceEncoder::Transformer(_) => load_safetensors(&bytes, encoder),
        SliceEncoder::SmallConv(_) => Err(ModelError::Checkpoint(
            "small_conv_baseline weights must come from a checkpoint".into(),
        )),
    }
}

fn copy_encoder(src: &SliceEncoder, dst: &mut SliceEncoder) -> Result<(), ModelError> {
    let mut tensors = Vec::new();
    src.visit("", &mut |name, a| tensors.push((name.to_string(), a.to_owned())));
    let mut mismatch = None;
    let mut k = 0;
    dst.visit_mut("", &mut |name, mut a| {
        match tensors.get(k) {
            Some((n, t)) if n == name && t.shape() == a.shape() => a.assign(t),
            _ => {
                mismatch.get_or_insert_with(|| name.to_string());
            }
        }
        k += 1;
    });
    if k != tensors.len() {
        mismatch.get_or_insert_with(|| "tensor count".into());
    }
    match mismatch {
        Some(name) => Err(ModelError::Checkpoint(format!(
            "pretrained encoder does not match at {name}"
        ))),
        None => Ok(()),
    }
}

fn to_f64(dtype: Dtype, data: &[u8]) -> Result<Vec<f64>, ModelError> {
    Ok(match dtype {
        Dtype::F64 => data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        Dtype::F32 => data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        Dtype::F16 => data
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        Dtype::BF16 => data
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f64())
            .collect(),
        other => return Err(ModelError::Checkpoint(format!("unsupported tensor dtype {other:?}"))),
    })
}

fn source_name(name: &str, shifted_downsample: bool) -> String {
    if !shifted_downsample {
        return name.to_string();
    }
    let mut parts: Vec<String> = name.split('.').map(str::to_string).collect();
    if parts.len() > 2 && parts[0] == "layers" && parts[2] == "downsample" {
        if let Ok(i) = parts[1].parse::<usize>() {
            parts[1] = (i + 1).to_string();
        }
    }
    parts.join(".")
}

/// Writes reference-layout values into one of our tensors.
fn assign(name: &str, dst: &mut ArrayViewMutD<'_, f64>, shape: &[usize], values: &[f64]) -> Result<(), ModelError> {
    let wrong = || ModelError::Checkpoint(format!("{name}: stored shape {shape:?} does not fit {:?}", dst.shape()));
    let ours = dst.shape().to_vec();
    if name.ends_with("patch_embed.proj.weight") {
        // (out, in, kh, kw) -> ((ky, kx, in), out)
        let [o, c, kh, kw] = shape else { return Err(wrong()) };
        if ours != [kh * kw * c, *o] {
            return Err(wrong());
        }
        for oc in 0..*o {
            for ic in 0..*c {
                for ky in 0..*kh {
                    for kx in 0..*kw {
                        dst[[(ky * kw + kx) * c + ic, oc]] = values[((oc * c + ic) * kh + ky) * kw + kx];
                    }
                }
            }
        }
    } else if ours.len() == 2 && name.ends_with(".weight") {
        // (out, in) -> (in, out)
        if shape != [ours[1], ours[0]] {
            return Err(wrong());
        }
        for i in 0..ours[0] {
            for o in 0..ours[1] {
                dst[[i, o]] = values[o * ours[0] + i];
            }
        }
    } else {
        if shape != ours.as_slice() {
            return Err(wrong());
        }
        for (d, &v) in dst.iter_mut().zip(values) {
            *d = v;
        }
    }
    Ok(())
}

fn load_safetensors(bytes: &[u8], encoder: &mut SliceEncoder) -> Result<(), ModelError> {
    let st = SafeTensors::deserialize(bytes).map_err(|e| ModelError::Parse(format!("safetensors: {e}")))?;
    let index: HashMap<&str, ()> = st.names().into_iter().map(|n| (n, ())).collect();
    let shifted = !index.contains_key("layers.0.downsample.reduction.weight")
        && index.contains_key("layers.1.downsample.reduction.weight");
    let mut result = Ok(());
    encoder.visit_mut("", &mut |name, mut a| {
        if result.is_err() {
            return;
        }
        let src = source_name(name, shifted);
        result = st
            .tensor(&src)
            .map_err(|_| ModelError::Checkpoint(format!("pretrained file lacks tensor {src}")))
            .and_then(|t| {
                let values = to_f64(t.dtype(), t.data())?;
                assign(name, &mut a, t.shape(), &values)
            });
    });
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::swin::{SwinConfig, SwinEncoder};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use safetensors::tensor::TensorView;

    fn micro() -> SwinConfig {
        SwinConfig {
            patch_size: 4,
            embed_dim: 4,
            depths: vec![1, 1],
            num_heads: vec![1, 2],
            window_size: 7,
            mlp_ratio: 2,
        }
    }

    /// Exports `enc` in the reference layout as f32 safetensors bytes.
    fn export(enc: &SliceEncoder, shift_downsample: bool) -> Vec<u8> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        enc.visit("", &mut |name, a| {
            let shape = a.shape().to_vec();
            let (shape, values): (Vec<usize>, Vec<f64>) = if name.ends_with("patch_embed.proj.weight") {
                let (o, c, k) = (shape[1], 3, 4);
                let mut v = vec![0.0; o * c * k * k];
                for oc in 0..o {
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                v[((oc * c + ic) * k + ky) * k + kx] = a[[(ky * k + kx) * c + ic, oc]];
                            }
                        }
                    }
                }
                (vec![o, c, k, k], v)
            } else if shape.len() == 2 && name.ends_with(".weight") {
                let t = a.into_dimensionality::<ndarray::Ix2>().unwrap();
                (vec![shape[1], shape[0]], t.t().iter().copied().collect())
            } else {
                (shape, a.iter().copied().collect())
            };
            let bytes = values.iter().flat_map(|v| (*v as f32).to_le_bytes()).collect();
            tensors.push((source_name(name, shift_downsample), shape, bytes));
        });
        tensors.push(("head.weight".into(), vec![2, 8], vec![0; 64]));
        let views: Vec<(String, TensorView<'_>)> = tensors
            .iter()
            .map(|(n, s, b)| (n.clone(), TensorView::new(Dtype::F32, s.clone(), b).unwrap()))
            .collect();
        safetensors::serialize(views, None).unwrap()
    }

    fn build(seed: u64) -> SliceEncoder {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SliceEncoder::Transformer(SwinEncoder::new(&micro(), 3, 224, &mut rng))
    }

    fn rounded(enc: &SliceEncoder) -> Vec<f64> {
        let mut v = Vec::new();
        enc.visit("", &mut |_, a| v.extend(a.iter().map(|x| *x as f32 as f64)));
        v
    }

    #[test]
    fn safetensors_in_reference_layout_load_by_name() {
        micro().validate(224).unwrap();
        let source = build(1);
        for shift in [false, true] {
            let bytes = export(&source, shift);
            let mut target = build(2);
            assert_ne!(rounded(&target), rounded(&source));
            load_safetensors(&bytes, &mut target).unwrap();
            assert_eq!(rounded(&target), rounded(&source));
        }
    }

    #[test]
    fn missing_tensor_is_reported() {
        let source = build(1);
        let bytes = export(&source, false);
        let mut bigger = {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let cfg = SwinConfig {
                depths: vec![2, 1],
                ..micro()
            };
            SliceEncoder::Transformer(SwinEncoder::new(&cfg, 3, 224, &mut rng))
        };
        let err = load_safetensors(&bytes, &mut bigger).unwrap_err();
        assert!(err.to_string().contains("layers.0.blocks.1"), "{err}");
    }
}
