//! The main classifier: a rectifier MLP with a softmax head, stored as one
//! flat `f32` buffer so that any parameter can be addressed by a single index.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CcedError, Result};
use crate::numerics::{self, MatrixView};

pub const WEIGHT_MAGIC: &[u8; 6] = b"CCEDW1";

/// Layer widths `[d0, d1, ..., dL]`; `d0` is the input width and `dL` the
/// number of classes. Hidden layers use the rectifier.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub layer_dims: Vec<usize>,
}

impl ModelSpec {
    pub fn new(layer_dims: Vec<usize>) -> Result<Self> {
        let spec = Self { layer_dims };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(CcedError::shape("a model needs at least one layer"));
        }
        if self.layer_dims.contains(&0) {
            return Err(CcedError::shape("layer widths must be positive"));
        }
        if self.class_count() < 2 {
            return Err(CcedError::shape("a classifier needs at least two classes"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn class_count(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.layer_dims.len() - 1
    }

    /// Total number of weights and biases.
    pub fn param_count(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_dims
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let layer = LayerLayout {
                    weight_offset: offset,
                    bias_offset: offset + rows * cols,
                    rows,
                    cols,
                };
                offset = layer.end();
                layer
            })
            .collect()
    }
}

/// Position of one layer inside the flat buffer: the row-major weight matrix
/// followed immediately by its bias vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub weight_offset: usize,
    pub bias_offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayerLayout {
    pub fn end(&self) -> usize {
        self.bias_offset + self.rows
    }

    pub fn contains(&self, index: usize) -> bool {
        (self.weight_offset..self.end()).contains(&index)
    }
}

/// Where a flat parameter index lands in the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamSite {
    Weight { layer: usize, row: usize, col: usize },
    Bias { layer: usize, row: usize },
}

impl ParamSite {
    pub fn layer(&self) -> usize {
        match *self {
            ParamSite::Weight { layer, .. } | ParamSite::Bias { layer, .. } => layer,
        }
    }

    pub fn row(&self) -> usize {
        match *self {
            ParamSite::Weight { row, .. } | ParamSite::Bias { row, .. } => row,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    buffer: Vec<f32>,
    layout: Vec<LayerLayout>,
}

impl Parameters {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            buffer: vec![0.0; spec.param_count()],
            layout: spec.layout(),
        }
    }

    pub fn from_buffer(spec: &ModelSpec, buffer: Vec<f32>) -> Result<Self> {
        spec.validate()?;
        if buffer.len() != spec.param_count() {
            return Err(CcedError::shape(format!(
                "model {:?} has {} parameters, buffer holds {}",
                spec.layer_dims,
                spec.param_count(),
                buffer.len()
            )));
        }
        Ok(Self {
            buffer,
            layout: spec.layout(),
        })
    }

    pub fn buffer(&self) -> &[f32] {
        &self.buffer
    }

    pub fn buffer_mut(&mut self) -> &mut [f32] {
        &mut self.buffer
    }

    pub fn len(&self) -> usize {
        self.buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buffer.is_empty()
    }

    pub fn layout(&self) -> &[LayerLayout] {
        &self.layout
    }

    pub fn weights(&self, layer: usize) -> MatrixView<'_> {
        let l = &self.layout[layer];
        MatrixView {
            rows: l.rows,
            cols: l.cols,
            values: &self.buffer[l.weight_offset..l.bias_offset],
        }
    }

    pub fn bias(&self, layer: usize) -> &[f32] {
        let l = &self.layout[layer];
        &self.buffer[l.bias_offset..l.end()]
    }

    pub fn site(&self, index: usize) -> Option<ParamSite> {
        let layer = self.layout.iter().position(|l| l.contains(index))?;
        let l = &self.layout[layer];
        Some(if index < l.bias_offset {
            let local = index - l.weight_offset;
            ParamSite::Weight {
                layer,
                row: local / l.cols,
                col: local % l.cols,
            }
        } else {
            ParamSite::Bias {
                layer,
                row: index - l.bias_offset,
            }
        })
    }

    fn check_spec(&self, spec: &ModelSpec) -> Result<()> {
        if self.layout != spec.layout() {
            return Err(CcedError::shape(format!(
                "parameters do not match model {:?}",
                spec.layer_dims
            )));
        }
        Ok(())
    }
}

/// Output of one inference: the softmax check signal and its argmax
/// (`None` when the signal is degenerate).
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub check_signal: Vec<f32>,
    pub predicted_class: Option<usize>,
}

impl InferenceResult {
    pub fn from_logits(logits: &[f32]) -> Result<Self> {
        let check_signal = numerics::softmax(logits)?;
        let predicted_class = numerics::argmax(&check_signal)?;
        Ok(Self {
            check_signal,
            predicted_class,
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.predicted_class.is_none()
    }
}

/// Per-layer outputs of a forward pass: index 0 is the input, index `l + 1`
/// is the (post-activation) output of layer `l`, the last entry the logits.
pub(crate) fn activations(
    spec: &ModelSpec,
    params: &Parameters,
    input: &[f32],
) -> Result<Vec<Vec<f32>>> {
    params.check_spec(spec)?;
    if input.len() != spec.input_dim() {
        return Err(CcedError::shape(format!(
            "model expects {} input features, got {}",
            spec.input_dim(),
            input.len()
        )));
    }
    let last = spec.layer_count() - 1;
    let mut acts = Vec::with_capacity(spec.layer_count() + 1);
    acts.push(input.to_vec());
    for layer in 0..spec.layer_count() {
        let mut out = numerics::affine(params.weights(layer), params.bias(layer), &acts[layer])?;
        if layer != last {
            numerics::relu_in_place(&mut out);
        }
        acts.push(out);
    }
    Ok(acts)
}

pub fn forward(spec: &ModelSpec, params: &Parameters, input: &[f32]) -> Result<InferenceResult> {
    let acts = activations(spec, params, input)?;
    InferenceResult::from_logits(acts.last().unwrap())
}

pub fn save_weights(spec: &ModelSpec, params: &Parameters, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_weights(spec, params)?).map_err(|e| CcedError::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(ModelSpec, Parameters)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CcedError::io(path, e))?;
    decode_weights(&bytes)
}

pub fn encode_weights(spec: &ModelSpec, params: &Parameters) -> Result<Vec<u8>> {
    params.check_spec(spec)?;
    let mut out = Vec::with_capacity(10 + 4 * spec.layer_dims.len() + 4 * params.len());
    out.extend_from_slice(WEIGHT_MAGIC);
    out.extend_from_slice(&(spec.layer_dims.len() as u32).to_le_bytes());
    for d in &spec.layer_dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in params.buffer() {
        out.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<(ModelSpec, Parameters)> {
    let format_err = |offset: usize, message: String| CcedError::Format {
        offset: offset as u64,
        message,
    };
    let read_u32 = |offset: usize| -> Result<u32> {
        bytes
            .get(offset..offset + 4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
            .ok_or_else(|| {
                format_err(
                    offset,
                    format!("truncated header: need 4 bytes, {} left", bytes.len().saturating_sub(offset)),
                )
            })
    };

    if bytes.len() < WEIGHT_MAGIC.len() || &bytes[..WEIGHT_MAGIC.len()] != WEIGHT_MAGIC {
        return Err(format_err(0, "bad magic, expected \"CCEDW1\"".into()));
    }
    let mut offset = WEIGHT_MAGIC.len();
    let dim_count = read_u32(offset)? as usize;
    offset += 4;
    if dim_count < 2 {
        return Err(format_err(offset - 4, format!("layer count {dim_count} is below 2")));
    }
    let mut dims = Vec::with_capacity(dim_count);
    for _ in 0..dim_count {
        dims.push(read_u32(offset)? as usize);
        offset += 4;
    }
    let spec = ModelSpec { layer_dims: dims };
    spec.validate()
        .map_err(|e| format_err(WEIGHT_MAGIC.len() + 4, e.to_string()))?;

    let expected = spec.param_count() * 4;
    let actual = bytes.len() - offset;
    if actual != expected {
        return Err(format_err(
            offset,
            format!("parameter buffer should be {expected} bytes, found {actual}"),
        ));
    }
    let buffer = bytes[offset..]
        .chunks_exact(4)
        .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let params = Parameters::from_buffer(&spec, buffer)?;
    Ok((spec, params))
}
