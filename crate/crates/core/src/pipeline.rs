//! The shared path from a scene sample to a depth prediction: build both
//! cue volumes, push them through the fusion graph, decode with the
//! soft-argmax head. Training, evaluation, inference, and the acceptance
//! suite all go through these functions so their forward passes cannot
//! drift apart.

use crate::error::Result;
use crate::eval::{masked_eval, MetricReport, EVAL_RANGE};
use crate::fusion::{forward_depth, FusionConfig};
use crate::geometry::{relative_pose, HypothesisSet, Pose};
use crate::store::{ParamLeaves, ParamStore};
use crate::synthdata::{LoadedScene, SceneSample};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};
use crate::volumes::{build_cost_volume, depth_to_onehot, volume_argmax_depth, CueVolume};

/// Frames matched against the target: its two temporal neighbors.
pub const SOURCE_FRAMES: [usize; 2] = [0, 2];

/// Source images paired with their target-to-source poses.
pub fn source_views(sample: &SceneSample) -> Vec<(Tensor<f32>, Pose)> {
    SOURCE_FRAMES
        .iter()
        .map(|&f| {
            (
                sample.images[f].clone(),
                relative_pose(&sample.poses[1], &sample.poses[f]),
            )
        })
        .collect()
}

/// Both cue volumes of one sample.
#[derive(Debug, Clone)]
pub struct SampleVolumes {
    pub multi: CueVolume,
    pub mono: CueVolume,
}

pub fn build_sample_volumes(sample: &SceneSample, hyp: &HypothesisSet) -> Result<SampleVolumes> {
    let sources = source_views(sample);
    let multi = build_cost_volume(&sample.images[1], &sources, &sample.intrinsics, hyp)?;
    let mono = depth_to_onehot(&sample.mono_depth, hyp)?;
    Ok(SampleVolumes { multi, mono })
}

/// Fusion forward on prebuilt volumes; returns the `[h, w, 1]` depth var.
pub fn forward_on_tape<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &mut ParamLeaves,
    store: &ParamStore<E>,
    sample: &SceneSample,
    vols: &SampleVolumes,
    cfg: &FusionConfig,
    hyp: &HypothesisSet,
) -> Result<Var> {
    let cm = tape.constant(vols.multi.data.cast::<E>())?;
    let co = tape.constant(vols.mono.data.cast::<E>())?;
    let img = if cfg.use_image_context {
        Some(tape.constant(sample.images[1].cast::<E>())?)
    } else {
        None
    };
    forward_depth(tape, leaves, store, cm, co, img, cfg, hyp)
}

/// Volumes plus forward on a throwaway tape; returns the `[h, w]` depth map.
pub fn predict_depth<E: Scalar>(
    store: &ParamStore<E>,
    sample: &SceneSample,
    cfg: &FusionConfig,
    hyp: &HypothesisSet,
) -> Result<Tensor<E>> {
    let vols = build_sample_volumes(sample, hyp)?;
    predict_depth_from_volumes(store, sample, &vols, cfg, hyp)
}

/// Forward on prebuilt volumes with a throwaway tape.
pub fn predict_depth_from_volumes<E: Scalar>(
    store: &ParamStore<E>,
    sample: &SceneSample,
    vols: &SampleVolumes,
    cfg: &FusionConfig,
    hyp: &HypothesisSet,
) -> Result<Tensor<E>> {
    let mut tape = Tape::new();
    let mut leaves = ParamLeaves::new();
    let d = forward_on_tape(&mut tape, &mut leaves, store, sample, vols, cfg, hyp)?;
    let t = tape.value(d).clone();
    let (h, w) = (t.shape()[0], t.shape()[1]);
    t.reshape(&[h, w])
}

/// The three predictors of one scene evaluated side by side: the fused
/// network output, the monocular input depth, and the argmax of the raw
/// matching volume.
#[derive(Debug, Clone)]
pub struct SceneEvaluation {
    pub id: String,
    pub fused: MetricReport,
    pub mono: MetricReport,
    pub multi: MetricReport,
    pub fused_depth: Tensor<f32>,
    pub multi_depth: Tensor<f32>,
}

pub fn evaluate_scene<E: Scalar>(
    store: &ParamStore<E>,
    cfg: &FusionConfig,
    hyp: &HypothesisSet,
    scene: &LoadedScene,
) -> Result<SceneEvaluation> {
    let sample = &scene.sample;
    let vols = build_sample_volumes(sample, hyp)?;
    let fused_depth = predict_depth_from_volumes(store, sample, &vols, cfg, hyp)?.cast::<f32>();
    let multi_depth = volume_argmax_depth(&vols.multi);
    let gt = &sample.gt_depth;
    let mask = &sample.dynamic_mask;
    Ok(SceneEvaluation {
        id: scene.id.clone(),
        fused: masked_eval(&fused_depth, gt, mask, EVAL_RANGE)?,
        mono: masked_eval(&sample.mono_depth, gt, mask, EVAL_RANGE)?,
        multi: masked_eval(&multi_depth, gt, mask, EVAL_RANGE)?,
        fused_depth,
        multi_depth,
    })
}
