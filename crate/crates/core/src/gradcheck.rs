//! Central finite-difference verification of tape gradients.
//!
//! Runs only in f64: at single precision the difference quotient drowns in
//! rounding noise. The step is 1e-5, the classic balance between truncation
//! and round-off at double precision.
//!
//! ReLU makes the loss piecewise smooth, and a probe interval can straddle a
//! kink: the central difference then reports the average of two one-sided
//! slopes rather than the derivative at the point, indicting a correct
//! gradient. Each probe therefore also compares against its one-sided
//! quotients when those disagree with each other, and retries at a tighter
//! step, before a mismatch counts. A wrong gradient still fails: away from
//! kinks the sided and central quotients agree, so it has nothing to hide
//! behind at any step.

use std::collections::BTreeMap;

use rand::{seq::index::sample, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CueError, Result};
use crate::store::{ParamLeaves, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const FD_STEP: f64 = 1e-5;
// Retry step for probes whose primary interval straddles a ReLU kink.
const FD_STEP_FINE: f64 = 1e-6;
// Analytic and numeric gradient both below this magnitude count as matching:
// the difference quotient itself is only good to ~1e-10 absolute.
const BOTH_ZERO: f64 = 1e-6;
// Denominator floor for relative errors. Central differences of a loss of
// order 10 carry rounding noise around 1e-9 absolute at these steps; without
// a floor that noise reads as large relative error on gradients that are
// themselves near zero, where it is meaningless.
const REL_FLOOR: f64 = 1e-3;
// The forward and backward quotients of one probe differ beyond this only
// when the interval contains a kink; truncation keeps smooth regions orders
// of magnitude below it.
const SIDE_SPLIT: f64 = 1e-4;

fn floored_rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Builds a scalar loss from parameter leaves. Must be deterministic: it is
/// re-invoked hundreds of times under perturbed parameters.
pub type GraphBuilder<'a> =
    dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &mut ParamLeaves) -> Result<Var> + 'a;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[flat_index]` of the worst probe.
    pub worst: String,
    /// Total scalar probes evaluated.
    pub checked: usize,
    pub loss: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "checked {} scalars, loss {:.6e}, max rel err {:.3e} (worst at {})",
            self.checked, self.loss, self.max_rel_err, self.worst
        )
    }
}

/// Compares tape gradients of every parameter scalar against central finite
/// differences. Tensors larger than `per_tensor_cap` are subsampled with a
/// seeded choice so reruns probe identical coordinates.
pub fn grad_check(
    store: &ParamStore<f64>,
    build: &GraphBuilder,
    per_tensor_cap: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    grad_check_impl(store, build, per_tensor_cap, seed, None)
}

pub(crate) fn grad_check_impl(
    store: &ParamStore<f64>,
    build: &GraphBuilder,
    per_tensor_cap: usize,
    seed: u64,
    loss_grad_fault: Option<f64>,
) -> Result<GradCheckReport> {
    if per_tensor_cap == 0 {
        return Err(CueError::Config("per_tensor_cap must be >= 1".into()));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let mut leaves = ParamLeaves::new();
    let loss_var = build(&mut tape, store, &mut leaves)?;
    if let Some(factor) = loss_grad_fault {
        tape.set_grad_fault(loss_var, factor);
    }
    let loss = tape.value(loss_var).item()?;
    if !loss.is_finite() {
        return Err(CueError::Numeric(format!("non-finite loss {loss}")));
    }
    let grads = tape.backward(loss_var)?;
    let mut analytic: BTreeMap<String, Tensor<f64>> = BTreeMap::new();
    for (name, var) in leaves.vars() {
        let g = grads
            .get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()));
        analytic.insert(name.to_string(), g);
    }
    drop(tape);

    // Numeric probes against a mutable copy, restoring after each.
    let mut probe_store = store.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: "-".into(),
        checked: 0,
        loss,
    };

    let names: Vec<String> = analytic.keys().cloned().collect();
    for name in names {
        let n = store.value(&name)?.len();
        let picks: Vec<usize> = if n <= per_tensor_cap {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, per_tensor_cap).into_vec();
            v.sort_unstable();
            v
        };
        for i in picks {
            let base = store.value(&name)?.data()[i];
            let ga = analytic[&name].data()[i];
            let eval = |store: &ParamStore<f64>| -> Result<f64> {
                let mut tape = Tape::new();
                let mut leaves = ParamLeaves::new();
                let v = build(&mut tape, store, &mut leaves)?;
                Ok(tape.value(v).item()?)
            };

            // A central difference blends the two one-sided slopes whenever a
            // ReLU kink falls inside the probe interval, so a mismatch there
            // does not yet condemn the analytic gradient. When the forward
            // and backward quotients of the same probe disagree (the kink's
            // signature; they come free from the evaluations already done),
            // the gradient only has to match one side. A tighter second step
            // resolves kinks sitting inside the fine interval's shadow.
            let mut rel = f64::INFINITY;
            for step in [FD_STEP, FD_STEP_FINE] {
                set_at(&mut probe_store, &name, i, base + step)?;
                let plus = eval(&probe_store)?;
                set_at(&mut probe_store, &name, i, base - step)?;
                let minus = eval(&probe_store)?;
                set_at(&mut probe_store, &name, i, base)?;

                let central = (plus - minus) / (2.0 * step);
                if ga.abs() < BOTH_ZERO && central.abs() < BOTH_ZERO {
                    rel = 0.0;
                    break;
                }
                rel = rel.min(floored_rel(ga, central));
                let fwd = (plus - loss) / step;
                let bwd = (loss - minus) / step;
                if floored_rel(fwd, bwd) > SIDE_SPLIT {
                    rel = rel.min(floored_rel(ga, fwd)).min(floored_rel(ga, bwd));
                }
                if rel < 1e-5 {
                    break;
                }
            }
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

fn set_at(store: &mut ParamStore<f64>, name: &str, i: usize, v: f64) -> Result<()> {
    let mut t = store.value(name)?.clone();
    t.data_mut()[i] = v;
    store.set_value(name, t)
}

/// Hypothesis count of the whole-pipeline probe graph.
pub const PROBE_M: usize = 8;

/// Checks a fusion variant's entire compute path in one graph: cue volumes
/// from a small rendered scene enter the variant's forward pass and the
/// training loss, and every parameter's gradient is compared against finite
/// differences. The scene is small and the loss's triplet count reduced so
/// all eight variants finish in seconds; the graph still exercises every
/// operator the full-size path uses.
pub fn check_full_pipeline(
    variant: crate::fusion::Variant,
    per_tensor_cap: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    use crate::fusion::{init_params, FusionConfig};
    use crate::geometry::make_hypotheses;
    use crate::losses::{final_loss, range_mask, LossConfig};
    use crate::pipeline::{build_sample_volumes, forward_on_tape};
    use crate::synthdata::{generate_scene, DatasetParams};

    let p = DatasetParams {
        scenes: 1,
        base_seed: 33,
        resolution: (16, 24),
        d_min: 2.0,
        d_max: 30.0,
        sigma_s: 0.06,
        sigma_n: 0.04,
    };
    let (_, sample) = generate_scene(&p, 0)?;
    let hyp = make_hypotheses(p.d_min, p.d_max, PROBE_M)?;
    let vols = build_sample_volumes(&sample, &hyp)?;
    let fcfg = FusionConfig {
        m: PROBE_M,
        downsample_factor: 4,
        variant,
        use_image_context: true,
        image_channels: 1,
    };
    let store = init_params::<f64>(&fcfg, seed)?;
    let gt = sample.gt_depth.cast::<f64>();
    let mono = sample.mono_depth.cast::<f64>();
    let loss_cfg = LossConfig {
        vnl_samples: 24,
        ..LossConfig::default()
    };
    let mask = range_mask(&gt, loss_cfg.valid_range.0, loss_cfg.valid_range.1);
    grad_check(
        &store,
        &|tape, store, leaves| {
            let pred = forward_on_tape(tape, leaves, store, &sample, &vols, &fcfg, &hyp)?;
            let terms = final_loss(
                tape,
                &mono,
                pred,
                &gt,
                &sample.intrinsics,
                &mask,
                &loss_cfg,
                seed ^ 0xa5a5,
            )?;
            Ok(terms.final_term)
        },
        per_tensor_cap,
        seed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn quadratic_store(n: usize) -> ParamStore<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut s = ParamStore::new();
        s.insert("p", Tensor::from_fn(&[n], |_| rng.gen_range(-1.0..1.0)))
            .unwrap();
        s
    }

    /// loss = ||p||^2, so the exact gradient is 2p.
    fn quadratic(tape: &mut Tape<f64>, store: &ParamStore<f64>, leaves: &mut ParamLeaves) -> Result<Var> {
        let p = leaves.leaf(tape, store, "p")?;
        let n = tape.value(p).len();
        let sq = tape.square(p)?;
        let m = tape.mean(sq)?;
        tape.scale_const(m, n as f64)
    }

    #[test]
    fn quadratic_gradient_is_near_machine_precision() {
        let store = quadratic_store(16);
        let report = grad_check(&store, &quadratic, 64, 7).unwrap();
        assert_eq!(report.checked, 16);
        assert!(
            report.max_rel_err < 1e-9,
            "rel err {} too large for an analytic polynomial",
            report.max_rel_err
        );
        assert!(report.passes(1e-9));
    }

    #[test]
    fn corrupted_backward_is_reported() {
        let store = quadratic_store(8);
        let report = grad_check_impl(&store, &quadratic, 64, 7, Some(2.0)).unwrap();
        assert!(
            report.max_rel_err > 0.3,
            "an off-by-2 backward must be flagged, got {}",
            report.max_rel_err
        );
        assert!(!report.passes(1e-4));
    }

    #[test]
    fn conv_softmax_graph_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(57);
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::from_fn(&[3, 3, 2, 3], |_| rng.gen_range(-0.5..0.5)))
            .unwrap();
        store
            .insert("b", Tensor::from_fn(&[3], |_| rng.gen_range(-0.1..0.1)))
            .unwrap();
        let x0 = Tensor::from_fn(&[4, 5, 2], |_| rng.gen_range(0.0..1.0));
        let t0 = Tensor::from_fn(&[4, 5, 3], |_| rng.gen_range(0.0..1.0));
        let build = move |tape: &mut Tape<f64>,
                          store: &ParamStore<f64>,
                          leaves: &mut ParamLeaves|
              -> Result<Var> {
            let w = leaves.leaf(tape, store, "w")?;
            let b = leaves.leaf(tape, store, "b")?;
            let x = tape.constant(x0.clone())?;
            let y = tape.conv2d(x, w, b, 1, 1)?;
            let s = tape.channel_softmax(y)?;
            let t = tape.constant(t0.clone())?;
            let d = tape.sub(s, t)?;
            let sq = tape.square(d)?;
            tape.mean(sq)
        };
        let report = grad_check(&store, &build, 32, 3).unwrap();
        assert!(report.passes(1e-6), "{report}");
    }

    #[test]
    fn subsampling_respects_the_cap() {
        let store = quadratic_store(100);
        let report = grad_check(&store, &quadratic, 10, 1).unwrap();
        assert_eq!(report.checked, 10);
        // Same seed probes the same coordinates.
        let again = grad_check(&store, &quadratic, 10, 1).unwrap();
        assert_eq!(report.max_rel_err, again.max_rel_err);
    }
}
