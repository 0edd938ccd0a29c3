//! On-disk formats: model directories, smoothing plans and quantized model
//! directories. Tensors travel in TAR1 containers, structure in JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use avq_core::quant::{QuantGrid, QuantizedLayer, QuantizedModel, QuantizedModelLayer};
use avq_core::smoothing::{LayerPlan, RegionMask, SmoothingPlan};
use avq_core::tar1::{self, Payload};
use avq_core::tensor::{DecoderLayer, DecoderModel, LayerKind, LayerSpec, WeightTensor};
use avq_core::uvmap::UVVertexSet;

use crate::error::{CliError, CliResult};

#[derive(Debug, Serialize, Deserialize)]
struct LayerManifest {
    kind: LayerKind,
    kernel: usize,
    stride: usize,
    padding: usize,
    activation_slope: Option<f32>,
    in_channels: usize,
    out_channels: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    layers: Vec<LayerManifest>,
    has_input_transform: bool,
}

pub fn save_model(dir: &Path, model: &DecoderModel) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = ModelManifest {
        layers: model
            .layers
            .iter()
            .map(|l| LayerManifest {
                kind: l.spec.kind,
                kernel: l.spec.kernel,
                stride: l.spec.stride,
                padding: l.spec.padding,
                activation_slope: l.spec.activation_slope,
                in_channels: l.weights.in_channels,
                out_channels: l.weights.out_channels,
            })
            .collect(),
        has_input_transform: model.input_transform.is_some(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    for (i, layer) in model.layers.iter().enumerate() {
        let w = &layer.weights;
        tar1::save_f32(
            &dir.join(format!("layer{i:02}.weights.tar1")),
            &[
                w.in_channels as u32,
                w.out_channels as u32,
                w.kh as u32,
                w.kw as u32,
            ],
            w.data.clone(),
        )?;
        tar1::save_f32(
            &dir.join(format!("layer{i:02}.bias.tar1")),
            &[layer.bias.len() as u32],
            layer.bias.clone(),
        )?;
    }
    if let Some(t) = &model.input_transform {
        tar1::save_f32(&dir.join("input_transform.tar1"), &[t.len() as u32], t.clone())?;
    }
    Ok(())
}

fn expect_f32(payload: Payload, what: &str) -> CliResult<Vec<f32>> {
    match payload {
        Payload::F32(v) => Ok(v),
        other => Err(CliError::Format(format!(
            "{what}: expected f32 payload, found {other:?}"
        ))),
    }
}

pub fn load_model(dir: &Path) -> CliResult<DecoderModel> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: ModelManifest = serde_json::from_str(&text)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, lm) in manifest.layers.iter().enumerate() {
        let spec = LayerSpec::new(lm.kind, lm.kernel, lm.stride, lm.padding, lm.activation_slope)?;
        let warc = tar1::load(&dir.join(format!("layer{i:02}.weights.tar1")))?;
        let wdata = expect_f32(warc.payload, "layer weights")?;
        let weights = WeightTensor::new(lm.in_channels, lm.out_channels, lm.kernel, lm.kernel, wdata)?;
        let barc = tar1::load(&dir.join(format!("layer{i:02}.bias.tar1")))?;
        let bias = expect_f32(barc.payload, "layer bias")?;
        layers.push(DecoderLayer::new(spec, weights, bias)?);
    }
    let mut model = DecoderModel::new(layers)?;
    if manifest.has_input_transform {
        let tarc = tar1::load(&dir.join("input_transform.tar1"))?;
        model.input_transform = Some(expect_f32(tarc.payload, "input transform")?);
    }
    Ok(model)
}

/// Smoothing plans serialize as an array of
/// `{layer_index, scales[], exempt[], alpha}` objects.
#[derive(Debug, Serialize, Deserialize)]
struct PlanEntry {
    layer_index: usize,
    scales: Vec<f32>,
    exempt: Vec<usize>,
    alpha: f32,
}

pub fn save_plan(path: &Path, plan: &SmoothingPlan) -> CliResult<()> {
    let entries: Vec<PlanEntry> = plan
        .layers
        .iter()
        .map(|l| PlanEntry {
            layer_index: l.layer_index,
            scales: l.scales.clone(),
            exempt: l.exempt.clone(),
            alpha: plan.alpha,
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&entries)?)?;
    Ok(())
}

pub fn load_plan(path: &Path) -> CliResult<SmoothingPlan> {
    let text = std::fs::read_to_string(path)?;
    let entries: Vec<PlanEntry> = serde_json::from_str(&text)?;
    let alpha = entries.first().map_or(0.8, |e| e.alpha);
    Ok(SmoothingPlan {
        alpha,
        layers: entries
            .into_iter()
            .map(|e| LayerPlan {
                layer_index: e.layer_index,
                scales: e.scales,
                exempt: e.exempt,
            })
            .collect(),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantLayerManifest {
    kind: LayerKind,
    kernel: usize,
    stride: usize,
    padding: usize,
    activation_slope: Option<f32>,
    in_channels: usize,
    out_channels: usize,
    weight_grid: QuantGrid,
    act_grid: Option<QuantGrid>,
    bias: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize)]
struct QuantModelManifest {
    layers: Vec<QuantLayerManifest>,
    input_transform: Option<Vec<f32>>,
}

pub fn save_quantized(dir: &Path, model: &QuantizedModel) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = QuantModelManifest {
        layers: model
            .layers
            .iter()
            .map(|l| QuantLayerManifest {
                kind: l.spec.kind,
                kernel: l.spec.kernel,
                stride: l.spec.stride,
                padding: l.spec.padding,
                activation_slope: l.spec.activation_slope,
                in_channels: l.weights.in_channels,
                out_channels: l.weights.out_channels,
                weight_grid: l.weights.grid.clone(),
                act_grid: l.act_grid.clone(),
                bias: l.bias.clone(),
            })
            .collect(),
        input_transform: model.input_transform.clone(),
    };
    std::fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    for (i, layer) in model.layers.iter().enumerate() {
        tar1::save_i32(
            &dir.join(format!("layer{i:02}.qweights.tar1")),
            &[layer.weights.dim() as u32, layer.weights.out_channels as u32],
            layer.weights.qweights.clone(),
        )?;
    }
    Ok(())
}

pub fn load_quantized(dir: &Path) -> CliResult<QuantizedModel> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: QuantModelManifest = serde_json::from_str(&text)?;
    let mut layers = Vec::with_capacity(manifest.layers.len());
    for (i, lm) in manifest.layers.iter().enumerate() {
        let spec = LayerSpec::new(lm.kind, lm.kernel, lm.stride, lm.padding, lm.activation_slope)?;
        let arc = tar1::load(&dir.join(format!("layer{i:02}.qweights.tar1")))?;
        let q = match arc.payload {
            Payload::I32(v) => v,
            other => {
                return Err(CliError::Format(format!(
                    "quantized weights: expected i32 payload, found {other:?}"
                )))
            }
        };
        layers.push(QuantizedModelLayer {
            spec,
            weights: QuantizedLayer {
                in_channels: lm.in_channels,
                out_channels: lm.out_channels,
                kernel: lm.kernel,
                qweights: q,
                grid: lm.weight_grid.clone(),
            },
            bias: lm.bias.clone(),
            act_grid: lm.act_grid.clone(),
        });
    }
    Ok(QuantizedModel {
        layers,
        input_transform: manifest.input_transform,
    })
}

/// Masks are TAR1 u8 tensors of shape (H, W); nonzero means member.
pub fn load_mask(path: &Path) -> CliResult<RegionMask> {
    let arc = tar1::load(path)?;
    if arc.dims.len() != 2 {
        return Err(CliError::Format(format!(
            "mask must be rank 2, found {:?}",
            arc.dims
        )));
    }
    let (h, w) = (arc.dims[0] as usize, arc.dims[1] as usize);
    match arc.payload {
        Payload::U8(v) => Ok(RegionMask::new(h, w, v.iter().map(|b| *b != 0).collect())?),
        other => Err(CliError::Format(format!(
            "mask: expected u8 payload, found {other:?}"
        ))),
    }
}

pub fn save_mask(path: &Path, mask: &RegionMask) -> CliResult<()> {
    tar1::save_u8(
        path,
        &[mask.height as u32, mask.width as u32],
        mask.membership.iter().map(|b| u8::from(*b)).collect(),
    )?;
    Ok(())
}

/// Vertex UV files are TAR1 f32 tensors of shape (V, 2).
pub fn load_uv_vertices(path: &Path) -> CliResult<UVVertexSet> {
    let arc = tar1::load(path)?;
    if arc.dims.len() != 2 || arc.dims[1] != 2 {
        return Err(CliError::Format(format!(
            "vertex UV file must be (V, 2), found {:?}",
            arc.dims
        )));
    }
    Ok(UVVertexSet::new(expect_f32(arc.payload, "vertex UVs")?)?)
}

pub fn save_uv_vertices(path: &Path, verts: &UVVertexSet) -> CliResult<()> {
    tar1::save_f32(
        path,
        &[(verts.len()) as u32, 2],
        verts.coords.clone(),
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::canonical_decoder;
    use crate::fixtures::{facial_region_mask, facial_uv_vertices};

    #[test]
    fn model_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = canonical_decoder(3, true);
        model.input_transform = Some(vec![1.5; model.in_channels()]);
        save_model(dir.path(), &model).unwrap();
        let back = load_model(dir.path()).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn plan_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let plan = SmoothingPlan {
            alpha: 0.8,
            layers: vec![LayerPlan {
                layer_index: 1,
                scales: vec![1.0, 2.5, 0.25],
                exempt: vec![0],
            }],
        };
        let path = dir.path().join("plan.json");
        save_plan(&path, &plan).unwrap();
        assert_eq!(load_plan(&path).unwrap(), plan);
    }

    #[test]
    fn mask_and_uv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = facial_region_mask(16, 16);
        let mpath = dir.path().join("mask.tar1");
        save_mask(&mpath, &mask).unwrap();
        assert_eq!(load_mask(&mpath).unwrap(), mask);
        let verts = facial_uv_vertices(1, 64);
        let vpath = dir.path().join("uv.tar1");
        save_uv_vertices(&vpath, &verts).unwrap();
        assert_eq!(load_uv_vertices(&vpath).unwrap(), verts);
    }
}
