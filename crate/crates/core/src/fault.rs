//! Transient single-bit faults in model parameters.
//!
//! A fault is one XOR-toggled bit in one 32-bit parameter, present for exactly
//! one inference. [`CleanTrace`] replays a fault against cached fault-free
//! activations: only the hit unit and the layers downstream of it are
//! recomputed, with the same summation order as a full forward pass, so the
//! result is bit-identical to running [`forward`] on a flipped copy.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CcedError, Result};
use crate::model::{self, forward, InferenceResult, ModelSpec, ParamSite, Parameters};
use crate::numerics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FaultSpec {
    pub param_index: usize,
    /// 0 is the mantissa LSB, 31 the sign bit.
    #[serde(rename = "bit")]
    pub bit_position: u8,
}

impl FaultSpec {
    pub fn new(param_index: usize, bit_position: u8) -> Self {
        Self {
            param_index,
            bit_position,
        }
    }

    pub fn validate(&self, param_count: usize) -> Result<()> {
        if self.param_index >= param_count {
            return Err(CcedError::domain(format!(
                "fault index {} outside parameter range 0..{param_count}",
                self.param_index
            )));
        }
        if self.bit_position > 31 {
            return Err(CcedError::domain(format!(
                "bit position {} outside 0..=31",
                self.bit_position
            )));
        }
        Ok(())
    }
}

/// Toggle one bit of the IEEE-754 pattern of `value`.
#[inline]
pub fn flip_bit(value: f32, bit: u8) -> f32 {
    f32::from_bits(value.to_bits() ^ (1u32 << bit))
}

/// Deterministic random stream addressed by `(seed, stream_id)`.
///
/// Trials and trees each get their own stream so results do not depend on
/// execution order or worker count.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Draw a parameter index and a bit position, independently and uniformly.
pub fn sample_fault(rng: &mut RngStream, param_count: usize) -> Result<FaultSpec> {
    if param_count == 0 {
        return Err(CcedError::domain("cannot sample a fault from zero parameters"));
    }
    let param_index = rng.rng.gen_range(0..param_count);
    let bit_position = rng.rng.gen_range(0..32u8);
    Ok(FaultSpec {
        param_index,
        bit_position,
    })
}

/// A copy of `params` with the fault applied. The input is left untouched.
pub fn apply_fault(params: &Parameters, fault: FaultSpec) -> Result<Parameters> {
    fault.validate(params.len())?;
    let mut faulty = params.clone();
    let slot = &mut faulty.buffer_mut()[fault.param_index];
    *slot = flip_bit(*slot, fault.bit_position);
    Ok(faulty)
}

/// Fault-free activations of one input, reusable across many fault replays.
#[derive(Debug, Clone)]
pub struct CleanTrace {
    acts: Vec<Vec<f32>>,
    result: InferenceResult,
}

impl CleanTrace {
    pub fn new(spec: &ModelSpec, params: &Parameters, input: &[f32]) -> Result<Self> {
        let acts = model::activations(spec, params, input)?;
        let result = InferenceResult::from_logits(acts.last().unwrap())?;
        Ok(Self { acts, result })
    }

    pub fn clean(&self) -> &InferenceResult {
        &self.result
    }

    /// Inference with `fault` active, without copying or mutating `params`.
    ///
    /// `params` must be the parameters the trace was built from.
    pub fn faulty(&self, params: &Parameters, fault: FaultSpec) -> Result<InferenceResult> {
        fault.validate(params.len())?;
        let site = params.site(fault.param_index).expect("validated index");
        let layer = site.layer();
        let row = site.row();
        let last = params.layout().len() - 1;

        let w = params.weights(layer);
        let bias = params.bias(layer)[row];
        let input = &self.acts[layer];
        let unit = match site {
            ParamSite::Weight { col, .. } => {
                let mut faulty_row = w.row(row).to_vec();
                faulty_row[col] = flip_bit(faulty_row[col], fault.bit_position);
                numerics::dot_bias(&faulty_row, bias, input)
            }
            ParamSite::Bias { .. } => {
                numerics::dot_bias(w.row(row), flip_bit(bias, fault.bit_position), input)
            }
        };

        let mut out = self.acts[layer + 1].clone();
        out[row] = if layer == last {
            unit
        } else {
            numerics::relu_scalar(unit)
        };
        for next in layer + 1..=last {
            out = numerics::affine(params.weights(next), params.bias(next), &out)?;
            if next != last {
                numerics::relu_in_place(&mut out);
            }
        }
        InferenceResult::from_logits(&out)
    }
}

/// Forward pass with a transient fault. `params` is unchanged afterwards.
pub fn faulty_forward(
    spec: &ModelSpec,
    params: &Parameters,
    input: &[f32],
    fault: FaultSpec,
) -> Result<InferenceResult> {
    CleanTrace::new(spec, params, input)?.faulty(params, fault)
}

/// Reference path: flip a private copy and run the ordinary forward pass.
pub fn faulty_forward_by_copy(
    spec: &ModelSpec,
    params: &Parameters,
    input: &[f32],
    fault: FaultSpec,
) -> Result<InferenceResult> {
    forward(spec, &apply_fault(params, fault)?, input)
}
