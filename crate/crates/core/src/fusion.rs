//! Cross-cue fusion of the two depth volumes and the soft-argmax depth head.
//!
//! The full pipeline per sample: both volumes pass shallow downsampling
//! convs; two attention blocks then let each cue's pairwise structure steer
//! the other (query and key projected from the guide cue, value from the
//! other cue); the enhanced pair is concatenated, upsampled, scaled by a
//! learned gamma, and added to a plain conv-and-concat path at full
//! resolution. Ablation variants reduce or rewire this graph and own only
//! the parameters their graph touches, so every stored parameter is
//! reachable by gradients.
//!
//! All tape math is generic over f32/f64; volumes enter as constants and
//! parameters come from a [`ParamStore`] via [`ParamLeaves`].

use std::fmt;

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CueError, Result};
use crate::geometry::HypothesisSet;
use crate::store::{ParamLeaves, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Largest allowed token count of one attention matrix side. At hw tokens
/// the matrix holds hw*hw entries; past this cap the build refuses instead
/// of silently allocating gigabytes.
pub const MAX_ATTENTION_TOKENS: usize = 4096;

/// Channel width of the image-context encoder output.
pub const CONTEXT_CHANNELS: usize = 16;

/// Hidden width of the depth head.
const HEAD_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoRMulti,
    NoRMono,
    IntraCueSelfAttention,
    NoResidual,
    PlainConcat,
    PureMulti,
    PureMono,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Full,
        Variant::NoRMulti,
        Variant::NoRMono,
        Variant::IntraCueSelfAttention,
        Variant::NoResidual,
        Variant::PlainConcat,
        Variant::PureMulti,
        Variant::PureMono,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoRMulti => "no_R_multi",
            Variant::NoRMono => "no_R_mono",
            Variant::IntraCueSelfAttention => "intra_cue_self_attention",
            Variant::NoResidual => "no_residual",
            Variant::PlainConcat => "plain_concat",
            Variant::PureMulti => "pure_multi",
            Variant::PureMono => "pure_mono",
        }
    }

    fn uses_attention(&self) -> bool {
        matches!(
            self,
            Variant::Full
                | Variant::NoRMulti
                | Variant::NoRMono
                | Variant::IntraCueSelfAttention
                | Variant::NoResidual
        )
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = CueError;

    fn from_str(s: &str) -> Result<Variant> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::ALL.iter().map(|v| v.name()).collect();
                CueError::Config(format!(
                    "unknown variant {s:?}, expected one of {}",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Hypothesis count M; the volumes' channel dimension.
    pub m: usize,
    /// Spatial reduction before attention; must divide H and W.
    pub downsample_factor: usize,
    pub variant: Variant,
    pub use_image_context: bool,
    /// Channels of the raw input image (context encoder input width).
    pub image_channels: usize,
}

impl FusionConfig {
    pub fn desk_default(m: usize, variant: Variant) -> Self {
        FusionConfig {
            m,
            downsample_factor: 4,
            variant,
            use_image_context: true,
            image_channels: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(CueError::Config("fusion config needs M >= 1".into()));
        }
        if self.downsample_factor == 0 {
            return Err(CueError::Config("downsample_factor must be >= 1".into()));
        }
        if !self.downsample_factor.is_power_of_two() {
            return Err(CueError::Config(format!(
                "downsample_factor must be a power of two (conv strides), got {}",
                self.downsample_factor
            )));
        }
        if self.use_image_context && self.image_channels == 0 {
            return Err(CueError::Config(
                "image context enabled but image_channels = 0".into(),
            ));
        }
        Ok(())
    }

    /// Stride pair of the two downsampling convs whose product is the factor.
    fn strides(&self) -> (usize, usize) {
        match self.downsample_factor {
            1 => (1, 1),
            2 => (2, 1),
            4 => (2, 2),
            f => {
                // Power-of-two guaranteed by validate; split as evenly as
                // the two layers allow.
                let s1 = 1 << (f.trailing_zeros() / 2);
                (s1, f / s1)
            }
        }
    }
}

/// Names of every parameter the variant's graph uses, in creation order.
/// Initialization, checkpoint layout, and the no-disconnected-parameters
/// check all derive from this single list.
pub fn parameter_names(cfg: &FusionConfig) -> Vec<(String, Vec<usize>)> {
    let m = cfg.m;
    let mut names: Vec<(String, Vec<usize>)> = Vec::new();
    let conv = |names: &mut Vec<(String, Vec<usize>)>, prefix: &str, k: usize, cin: usize, cout: usize| {
        names.push((format!("{prefix}.w"), vec![k, k, cin, cout]));
        names.push((format!("{prefix}.b"), vec![cout]));
    };

    if cfg.variant.uses_attention() {
        for cue in ["multi", "mono"] {
            conv(&mut names, &format!("ds.{cue}.conv1"), 3, m, m);
            conv(&mut names, &format!("ds.{cue}.conv2"), 3, m, m);
        }
        // enh_multi: guide mono, value multi (dropped by no_R_mono).
        // enh_mono: guide multi, value mono (dropped by no_R_multi).
        let branches: &[&str] = match cfg.variant {
            Variant::NoRMono => &["enh_mono"],
            Variant::NoRMulti => &["enh_multi"],
            _ => &["enh_multi", "enh_mono"],
        };
        for b in branches {
            for proj in ["q", "k", "v"] {
                conv(&mut names, &format!("att.{b}.{proj}"), 1, m, m);
            }
        }
        names.push(("gamma".into(), vec![1]));
    }
    match cfg.variant {
        Variant::NoResidual => {}
        Variant::PureMulti => conv(&mut names, "fcat.multi", 3, m, m),
        Variant::PureMono => conv(&mut names, "fcat.mono", 3, m, m),
        _ => {
            conv(&mut names, "fcat.multi", 3, m, m);
            conv(&mut names, "fcat.mono", 3, m, m);
        }
    }
    let head_in = 2 * m
        + if cfg.use_image_context {
            CONTEXT_CHANNELS
        } else {
            0
        };
    if cfg.use_image_context {
        conv(&mut names, "ctx.conv1", 3, cfg.image_channels, CONTEXT_CHANNELS);
        conv(&mut names, "ctx.conv2", 3, CONTEXT_CHANNELS, CONTEXT_CHANNELS);
    }
    conv(&mut names, "head.conv1", 3, head_in, HEAD_HIDDEN);
    conv(&mut names, "head.conv2", 1, HEAD_HIDDEN, m);
    names
}

/// Fresh training parameters: weights uniform in ±1/sqrt(fan_in), biases
/// zero, gamma zero (training starts at the plain concat path) except the
/// no_residual variant, whose only path is through gamma, so it starts at 1.
pub fn init_params<E: Scalar>(cfg: &FusionConfig, seed: u64) -> Result<ParamStore<E>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, shape) in parameter_names(cfg) {
        let t = if name == "gamma" {
            let g = if cfg.variant == Variant::NoResidual {
                1.0
            } else {
                0.0
            };
            Tensor::full(&[1], E::from_f64(g))
        } else if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else {
            let fan_in: usize = shape[..shape.len() - 1].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut t = Tensor::zeros(&shape);
            for v in t.data_mut() {
                *v = E::from_f64(rng.gen_range(-bound..bound));
            }
            t
        };
        store.insert(&name, t)?;
    }
    Ok(store)
}

fn conv_layer<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &mut ParamLeaves,
    store: &ParamStore<E>,
    prefix: &str,
    x: Var,
    stride: usize,
    relu: bool,
) -> Result<Var> {
    let w = leaves.leaf(tape, store, &format!("{prefix}.w"))?;
    let b = leaves.leaf(tape, store, &format!("{prefix}.b"))?;
    let k = tape.value(w).shape()[0];
    let pad = k / 2;
    let y = tape.conv2d(x, w, b, stride, pad)?;
    if relu {
        tape.relu(y)
    } else {
        Ok(y)
    }
}

/// One cross-cue attention block. Query and key are 1x1 projections of the
/// guide feature, value of the value feature; attention runs over all hw
/// positions: out = row_softmax(Q Kᵀ) · V, reshaped back to [h,w,M].
pub fn cca<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &mut ParamLeaves,
    store: &ParamStore<E>,
    branch: &str,
    guide: Var,
    value: Var,
) -> Result<Var> {
    let shape = tape.value(guide).shape().to_vec();
    if shape != tape.value(value).shape() {
        return Err(CueError::Shape(format!(
            "cca guide {:?} vs value {:?}",
            shape,
            tape.value(value).shape()
        )));
    }
    let (h, w, m) = (shape[0], shape[1], shape[2]);
    let hw = h * w;
    if hw > MAX_ATTENTION_TOKENS {
        return Err(CueError::Config(format!(
            "attention over {hw} positions exceeds the {MAX_ATTENTION_TOKENS} cap; \
             increase downsample_factor"
        )));
    }
    let q = conv_layer(tape, leaves, store, &format!("att.{branch}.q"), guide, 1, false)?;
    let k = conv_layer(tape, leaves, store, &format!("att.{branch}.k"), guide, 1, false)?;
    let v = conv_layer(tape, leaves, store, &format!("att.{branch}.v"), value, 1, false)?;
    // [h,w,M] is channel-contiguous, so the token matrix is a free reshape.
    let q2 = tape.reshape(q, &[hw, m])?;
    let k2 = tape.reshape(k, &[hw, m])?;
    let v2 = tape.reshape(v, &[hw, m])?;
    let kt = tape.transpose(k2)?;
    let logits = tape.matmul(q2, kt)?;
    let r = tape.row_softmax(logits)?;
    let out = tape.matmul(r, v2)?;
    tape.reshape(out, &[h, w, m])
}

/// Two stride convs reducing each volume to attention resolution.
fn downsample_cue<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &mut ParamLeaves,
    store: &ParamStore<E>,
    cue: &str,
    x: Var,
    cfg: &FusionConfig,
) -> Result<Var> {
    let (s1, s2) = cfg.strides();
    let y = conv_layer(tape, leaves, store, &format!("ds.{cue}.conv1"), x, s1, true)?;
    conv_layer(tape, leaves, store, &format!("ds.{cue}.conv2"), y, s2, false)
}

/// Downsampled feature pair (multi, mono) at H/factor x W/factor.
pub fn downsample_cues<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &mut ParamLeaves,
    store: &ParamStore<E>,
    c_multi: Var,
    c_mono: Var,
    cfg: &FusionConfig,
) -> Result<(Var, Var)> {
    let sm = tape.value(c_multi).shape().to_vec();
    if sm != tape.value(c_mono).shape() {
        return Err(CueError::Shape(format!(
            "cue volumes disagree: {:?} vs {:?}",
            sm,
            tape.value(c_mono).shape()
        )));
    }
    let f = cfg.downsample_factor;
    if sm[0] % f != 0 || sm[1] % f != 0 {
        return Err(CueError::Config(format!(
            "downsample_factor {f} does not divide {}x{}",
            sm[0], sm[1]
        )));
    }
    let fm = downsample_cue(tape, leaves, store, "multi", c_multi, cfg)?;
    let fo = downsample_cue(tape, leaves, store, "mono", c_mono, cfg)?;
    Ok((fm, fo))
}

fn fcat<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &mut ParamLeaves,
    store: &ParamStore<E>,
    cue: &str,
    x: Var,
) -> Result<Var> {
    conv_layer(tape, leaves, store, &format!("fcat.{cue}"), x, 1, true)
}

/// The fused feature map F at full resolution with 2M channels, per the
/// configured variant.
pub fn ccf_forward<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &mut ParamLeaves,
    store: &ParamStore<E>,
    c_multi: Var,
    c_mono: Var,
    cfg: &FusionConfig,
) -> Result<Var> {
    cfg.validate()?;
    match cfg.variant {
        Variant::PureMulti => {
            let x = fcat(tape, leaves, store, "multi", c_multi)?;
            tape.concat_last(x, x)
        }
        Variant::PureMono => {
            let x = fcat(tape, leaves, store, "mono", c_mono)?;
            tape.concat_last(x, x)
        }
        Variant::PlainConcat => {
            let a = fcat(tape, leaves, store, "multi", c_multi)?;
            let b = fcat(tape, leaves, store, "mono", c_mono)?;
            tape.concat_last(a, b)
        }
        v => {
            let (f_multi, f_mono) = downsample_cues(tape, leaves, store, c_multi, c_mono, cfg)?;
            // The mono-guided attention enhances the multi feature and is
            // what no_R_mono removes (the raw multi feature passes through
            // instead); the multi-guided attention enhances the mono feature
            // and is what no_R_multi removes. The intra variant keeps both
            // blocks but makes each cue guide itself.
            let enh_multi = match v {
                Variant::NoRMono => f_multi,
                Variant::IntraCueSelfAttention => {
                    cca(tape, leaves, store, "enh_multi", f_multi, f_multi)?
                }
                _ => cca(tape, leaves, store, "enh_multi", f_mono, f_multi)?,
            };
            let enh_mono = match v {
                Variant::NoRMulti => f_mono,
                Variant::IntraCueSelfAttention => {
                    cca(tape, leaves, store, "enh_mono", f_mono, f_mono)?
                }
                _ => cca(tape, leaves, store, "enh_mono", f_multi, f_mono)?,
            };
            let fused = tape.concat_last(enh_multi, enh_mono)?;
            let up = tape.upsample(fused, cfg.downsample_factor)?;
            let gamma = leaves.leaf(tape, store, "gamma")?;
            let scaled = tape.scale_var(up, gamma)?;
            if v == Variant::NoResidual {
                return Ok(scaled);
            }
            let a = fcat(tape, leaves, store, "multi", c_multi)?;
            let b = fcat(tape, leaves, store, "mono", c_mono)?;
            let f_cat = tape.concat_last(a, b)?;
            tape.add(scaled, f_cat)
        }
    }
}

/// Two-conv image context encoder, 16 channels at full resolution.
pub fn image_context<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &mut ParamLeaves,
    store: &ParamStore<E>,
    image: Var,
) -> Result<Var> {
    let y = conv_layer(tape, leaves, store, "ctx.conv1", image, 1, true)?;
    conv_layer(tape, leaves, store, "ctx.conv2", y, 1, true)
}

/// Soft-argmax depth decode: conv3x3 -> ReLU -> conv1x1 -> channel softmax,
/// then expected inverse depth over the hypothesis grid, then reciprocal.
/// Output is a convex combination of hypothesis inverse depths, so depth
/// stays inside [d_min, d_max].
pub fn depth_head<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &mut ParamLeaves,
    store: &ParamStore<E>,
    fused: Var,
    context: Option<Var>,
    hyp: &HypothesisSet,
) -> Result<Var> {
    let x = match context {
        Some(ctx) => tape.concat_last(fused, ctx)?,
        None => fused,
    };
    let y = conv_layer(tape, leaves, store, "head.conv1", x, 1, true)?;
    let logits = conv_layer(tape, leaves, store, "head.conv2", y, 1, false)?;
    let p = tape.channel_softmax(logits)?;
    let shape = tape.value(p).shape().to_vec();
    let (h, w, m) = (shape[0], shape[1], shape[2]);
    if m != hyp.m() {
        return Err(CueError::Shape(format!(
            "head emits {m} channels but hypothesis set has {}",
            hyp.m()
        )));
    }
    let inv: Vec<E> = hyp
        .depths()
        .iter()
        .map(|&d| E::from_f64(1.0 / d))
        .collect();
    let inv_row = tape.constant(Tensor::from_vec(&[m, 1], inv)?).unwrap();
    let p2 = tape.reshape(p, &[h * w, m])?;
    let inv_depth = tape.matmul(p2, inv_row)?;
    let depth = tape.recip(inv_depth)?;
    tape.reshape(depth, &[h, w, 1])
}

/// Full forward pass from volumes (and image) to a depth map on the tape.
pub fn forward_depth<E: Scalar>(
    tape: &mut Tape<E>,
    leaves: &mut ParamLeaves,
    store: &ParamStore<E>,
    c_multi: Var,
    c_mono: Var,
    image: Option<Var>,
    cfg: &FusionConfig,
    hyp: &HypothesisSet,
) -> Result<Var> {
    let fused = ccf_forward(tape, leaves, store, c_multi, c_mono, cfg)?;
    let ctx = match (cfg.use_image_context, image) {
        (true, Some(img)) => Some(image_context(tape, leaves, store, img)?),
        (true, None) => {
            return Err(CueError::Config(
                "config asks for image context but no image was provided".into(),
            ))
        }
        (false, _) => None,
    };
    depth_head(tape, leaves, store, fused, ctx, hyp)
}
