//! RGB 3D encoder with a top-down pyramid merge, per-frame flow encoder, heads and checkpoints.

mod checkpoint;
mod input;
mod network;
mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC};
pub use input::{flow_batch, rgb_batch};
pub use network::{DualEncoder, EncoderConfig, Features, FlowEncoderKind, FlowOutput, RgbStages};
pub use params::{Bound, ParamSet};

/// Largest absolute change of local flow features at timestamps other than
/// `frame` when that frame's input is perturbed by `delta` everywhere.
pub fn cross_frame_sensitivity(
    enc: &DualEncoder,
    flows: &crate::tensor::Tensor,
    frame: usize,
    delta: f64,
) -> crate::Result<f64> {
    use crate::tensor::Tape;
    let local = |x: &crate::tensor::Tensor| -> crate::Result<crate::tensor::Tensor> {
        let mut tape = Tape::new();
        let b = enc.params.bind(&mut tape, false);
        let v = tape.constant(x.clone());
        let out = enc.flow_forward(&mut tape, &b, v)?;
        Ok(tape.value(out.lc).clone())
    };
    let s = flows.shape().to_vec();
    let base = local(flows)?;
    let mut moved = flows.clone();
    let per_frame: usize = s[2..].iter().product();
    for bi in 0..s[0] {
        let o = (bi * s[1] + frame) * per_frame;
        for v in &mut moved.data_mut()[o..o + per_frame] {
            *v += delta;
        }
    }
    let after = local(&moved)?;
    let frames = s[1];
    let embed = base.shape()[2];
    let mut worst: f64 = 0.0;
    for bi in 0..s[0] {
        for t in (0..frames).filter(|&t| t != frame) {
            for k in 0..embed {
                let i = (bi * frames + t) * embed + k;
                worst = worst.max((after.data()[i] - base.data()[i]).abs());
            }
        }
    }
    Ok(worst)
}
