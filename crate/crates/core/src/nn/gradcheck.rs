//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};

use super::{NodeId, ParamStore, Tape, Tensor5};

/// Finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-4;
/// Largest share of probed elements that may be skipped because the probe
/// interval crosses a ReLU or max-pool switch.
pub const MAX_KINK_FRACTION: f64 = 0.25;
/// Tensors larger than this are checked on a random subset of this size.
pub const MAX_ELEMENTS_PER_TENSOR: usize = 256;
/// Denominator floor of the relative error, so that gradients that are zero
/// up to rounding do not produce spurious huge ratios.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Elements whose probe interval crossed a kink and were not compared.
    pub kinks: usize,
    /// Description of the element with the largest error.
    pub worst: String,
}

impl GradCheckResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol && (self.kinks as f64) <= MAX_KINK_FRACTION * (self.checked + self.kinks) as f64
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Scalar objective applied to the subgraph output: returns the value and its
/// gradient with respect to the output.
pub type Head<'a> = dyn Fn(&Tensor5<f64>) -> Result<(f64, Tensor5<f64>)> + 'a;

/// Head `L = Σ probe ⊙ y` with a fixed random probe of the given shape.
pub fn probe_head<R: Rng + ?Sized>(shape: [usize; 5], rng: &mut R) -> impl Fn(&Tensor5<f64>) -> Result<(f64, Tensor5<f64>)> {
    let n: usize = shape.iter().product();
    let probe = Tensor5::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("probe");
    move |y: &Tensor5<f64>| {
        if y.shape() != probe.shape() {
            return Err(Error::Shape(format!("probe {:?} vs output {:?}", probe.shape(), y.shape())));
        }
        let v = y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
        Ok((v, probe.clone()))
    }
}

/// Compares tape gradients of `head(forward(params, inputs))` with
/// Richardson-extrapolated central differences `(4·D(h/2) − D(h)) / 3`, over
/// parameters and inputs. Elements whose probes do not all share the branch
/// signature of the unperturbed point are counted as kinks and skipped.
pub fn grad_check<F, R>(
    name: &str,
    params: &mut ParamStore<f64>,
    inputs: &[Tensor5<f64>],
    forward: F,
    head: &Head<'_>,
    h: f64,
    rng: &mut R,
) -> Result<GradCheckResult>
where
    F: Fn(&ParamStore<f64>, &mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
    R: Rng + ?Sized,
{
    let eval = |params: &ParamStore<f64>, inputs: &[Tensor5<f64>]| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let ids: Vec<_> = inputs.iter().map(|x| tape.input(x.clone(), false)).collect();
        let out = forward(params, &mut tape, &ids)?;
        Ok((head(tape.value(out))?.0, tape.branch_signature()))
    };
    let base_signature = eval(params, inputs)?.1;
    // Probes at ±h and ±h/2 via `at(delta)`; None when a probe changes branch.
    let derivative = |at: &mut dyn FnMut(f64) -> Result<(f64, u64)>| -> Result<Option<f64>> {
        let mut d = [0.0; 2];
        for (slot, step) in d.iter_mut().zip([h, h / 2.0]) {
            let (lp, sp) = at(step)?;
            let (lm, sm) = at(-step)?;
            if sp != base_signature || sm != base_signature {
                return Ok(None);
            }
            *slot = (lp - lm) / (2.0 * step);
        }
        Ok(Some((4.0 * d[1] - d[0]) / 3.0))
    };

    params.zero_grad();
    let mut tape = Tape::new();
    let ids: Vec<_> = inputs.iter().map(|x| tape.input(x.clone(), true)).collect();
    let out = forward(params, &mut tape, &ids)?;
    let (_, seed) = head(tape.value(out))?;
    let input_grads = tape.backward(params, out, seed)?;

    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    let mut kinks = 0;
    let mut record = |numeric: Option<f64>, what: String, analytic: f64| {
        let Some(numeric) = numeric else {
            kinks += 1;
            return;
        };
        checked += 1;
        let err = relative_error(analytic, numeric);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, format!("{what}: analytic {analytic:.6e}, numeric {numeric:.6e}"));
        }
    };

    let analytic_params: Vec<Vec<f64>> = params.iter().map(|p| p.grad.clone()).collect();
    let pids: Vec<_> = (0..params.len()).map(super::ParamId).collect();
    for (pi, &pid) in pids.iter().enumerate() {
        let len = params.get(pid).len();
        for e in pick(len, rng) {
            let orig = params.get(pid).value[e];
            let numeric = derivative(&mut |delta| {
                params.get_mut(pid).value[e] = orig + delta;
                let r = eval(params, inputs);
                params.get_mut(pid).value[e] = orig;
                r
            })?;
            let label = format!("{}[{e}]", params.get(pid).name);
            record(numeric, label, analytic_params[pi][e]);
        }
    }

    let mut perturbed = inputs.to_vec();
    for (ii, id) in ids.iter().enumerate() {
        let g = input_grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor5::zeros(inputs[ii].shape()));
        for e in pick(inputs[ii].len(), rng) {
            let orig = inputs[ii].data()[e];
            let numeric = derivative(&mut |delta| {
                perturbed[ii].data_mut()[e] = orig + delta;
                let r = eval(params, &perturbed);
                perturbed[ii].data_mut()[e] = orig;
                r
            })?;
            record(numeric, format!("input{ii}[{e}]"), g.data()[e]);
        }
    }
    params.zero_grad();

    Ok(GradCheckResult {
        name: name.to_string(),
        max_rel_error: worst.0,
        checked,
        kinks,
        worst: worst.1,
    })
}

fn pick<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Vec<usize> {
    if len <= MAX_ELEMENTS_PER_TENSOR {
        (0..len).collect()
    } else {
        let mut v = sample(rng, len, MAX_ELEMENTS_PER_TENSOR).into_vec();
        v.sort_unstable();
        v
    }
}

/// One entry of the verification suite with its pass threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteEntry {
    pub result: GradCheckResult,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.result.passes(self.tolerance)
    }
}

/// Per-layer threshold.
pub const LAYER_TOLERANCE: f64 = 1e-5;
/// Threshold for a whole network with loss.
pub const NETWORK_TOLERANCE: f64 = 1e-4;
/// Threshold for a purely affine subgraph.
pub const LINEAR_TOLERANCE: f64 = 1e-9;
/// Central differences of an affine map are exact for any step; a unit step
/// keeps cancellation error well below [`LINEAR_TOLERANCE`].
pub const AFFINE_STEP: f64 = 1.0;

fn random_tensor<R: Rng + ?Sized>(shape: [usize; 5], rng: &mut R) -> Tensor5<f64> {
    let n = shape.iter().product();
    Tensor5::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Distinct values at least 0.01 apart, so that no ±h perturbation reorders them.
fn separated_tensor<R: Rng + ?Sized>(shape: [usize; 5], rng: &mut R) -> Tensor5<f64> {
    use rand::seq::SliceRandom;
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| (i as f64 - n as f64 / 2.0) * 0.01 + 0.005).collect();
    v.shuffle(rng);
    Tensor5::from_vec(shape, v).expect("shape")
}

fn randomize_params<R: Rng + ?Sized>(p: &mut ParamStore<f64>, rng: &mut R) {
    for q in p.iter_mut() {
        q.value.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
    }
}

/// Runs the finite-difference suite in 64-bit precision: every layer on its
/// own, an affine subgraph, softmax with the combined loss, and both network
/// variants at two levels with the combined loss.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    use super::{ConvLayer, Exec, NormLayer};
    use crate::loss;
    use crate::models::{ArchitectureSpec, Model, Variant};
    use crate::rng::{stream, tag};
    use crate::volume::BodyRegionLabel;

    let mut out = Vec::new();
    let h = DEFAULT_STEP;
    let mut case = 0u64;
    let mut next_rng = || {
        case += 1;
        stream(seed, &[tag::GRADCHECK, case])
    };

    for k in [3usize, 1] {
        let mut r = next_rng();
        let mut p = ParamStore::new();
        let conv = ConvLayer::new(&mut p, "conv", 2, 3, k, &mut r);
        randomize_params(&mut p, &mut r);
        let x = random_tensor([1, 2, 4, 4, 4], &mut r);
        let head = probe_head([1, 3, 4, 4, 4], &mut r);
        let res = grad_check(&format!("conv3d k={k}"), &mut p, &[x], |p, t, i| t.conv(p, &conv, &i[0]), &head, h, &mut r)?;
        out.push(SuiteEntry { result: res, tolerance: LAYER_TOLERANCE });
    }

    {
        let mut r = next_rng();
        let mut p = ParamStore::new();
        let x = separated_tensor([1, 2, 4, 4, 4], &mut r);
        let head = probe_head([1, 2, 2, 2, 2], &mut r);
        let res = grad_check("maxpool", &mut p, &[x], |_, t, i| t.maxpool(&i[0]), &head, h, &mut r)?;
        out.push(SuiteEntry { result: res, tolerance: LAYER_TOLERANCE });
    }

    {
        let mut r = next_rng();
        let mut p = ParamStore::new();
        let x = random_tensor([1, 2, 3, 2, 3], &mut r);
        let head = probe_head([1, 2, 6, 4, 6], &mut r);
        let res = grad_check("upsample", &mut p, &[x], |_, t, i| Ok(t.upsample(&i[0])), &head, h, &mut r)?;
        out.push(SuiteEntry { result: res, tolerance: LAYER_TOLERANCE });
    }

    {
        let mut r = next_rng();
        let mut p = ParamStore::new();
        let norm = NormLayer::new(&mut p, "norm", 3);
        randomize_params(&mut p, &mut r);
        let x = random_tensor([1, 3, 2, 3, 4], &mut r);
        let head = probe_head([1, 3, 2, 3, 4], &mut r);
        let res = grad_check("instance_norm", &mut p, &[x], |p, t, i| t.norm(p, &norm, &i[0]), &head, h, &mut r)?;
        out.push(SuiteEntry { result: res, tolerance: LAYER_TOLERANCE });
    }

    {
        let mut r = next_rng();
        let mut p = ParamStore::new();
        let mut x = random_tensor([1, 2, 3, 3, 3], &mut r);
        for v in x.data_mut() {
            *v = v.signum() * (v.abs() + 0.05);
        }
        let head = probe_head([1, 2, 3, 3, 3], &mut r);
        let res = grad_check("relu", &mut p, &[x], |_, t, i| Ok(t.relu(&i[0])), &head, h, &mut r)?;
        out.push(SuiteEntry { result: res, tolerance: LAYER_TOLERANCE });
    }

    {
        let mut r = next_rng();
        let mut p = ParamStore::new();
        let a = random_tensor([1, 2, 2, 3, 2], &mut r);
        let b = random_tensor([1, 3, 2, 3, 2], &mut r);
        let head = probe_head([1, 5, 2, 3, 2], &mut r);
        let res = grad_check("concat", &mut p, &[a, b], |_, t, i| t.concat(&i[0], &i[1]), &head, h, &mut r)?;
        out.push(SuiteEntry { result: res, tolerance: LAYER_TOLERANCE });
    }

    {
        let mut r = next_rng();
        let mut p = ParamStore::new();
        let a = random_tensor([1, 2, 2, 3, 2], &mut r);
        let b = random_tensor([1, 2, 2, 3, 2], &mut r);
        let head = probe_head([1, 2, 2, 3, 2], &mut r);
        let res = grad_check("add", &mut p, &[a, b], |_, t, i| t.add(&i[0], &i[1]), &head, h, &mut r)?;
        out.push(SuiteEntry { result: res, tolerance: LAYER_TOLERANCE });
    }

    {
        let mut r = next_rng();
        let mut p = ParamStore::new();
        let c1 = ConvLayer::new(&mut p, "c1", 2, 2, 3, &mut r);
        let c2 = ConvLayer::new(&mut p, "c2", 2, 2, 1, &mut r);
        randomize_params(&mut p, &mut r);
        let x = random_tensor([1, 2, 2, 2, 2], &mut r);
        let head = probe_head([1, 4, 4, 4, 4], &mut r);
        let res = grad_check(
            "affine subgraph",
            &mut p,
            &[x],
            |p, t, i| {
                let a = t.conv(p, &c1, &i[0])?;
                let b = t.conv(p, &c2, &a)?;
                let s = t.add(&a, &b)?;
                let cat = t.concat(&s, &a)?;
                Ok(t.upsample(&cat))
            },
            &head,
            AFFINE_STEP,
            &mut r,
        )?;
        out.push(SuiteEntry { result: res, tolerance: LINEAR_TOLERANCE });
    }

    let labels_for = |n: usize, r: &mut crate::rng::StreamRng| -> Vec<BodyRegionLabel> {
        (0..n)
            .map(|i| {
                if i % 7 == 3 {
                    BodyRegionLabel::Ignore
                } else {
                    BodyRegionLabel::CLASSES[r.random_range(0..6)]
                }
            })
            .collect()
    };

    {
        let mut r = next_rng();
        let mut p = ParamStore::new();
        let shape = [1, 6, 2, 3, 4];
        let x = random_tensor(shape, &mut r);
        let labels = labels_for(24, &mut r);
        let head = |y: &Tensor5<f64>| -> Result<(f64, Tensor5<f64>)> {
            let (v, g) = loss::combined_loss_with_grad(y, &labels)?;
            Ok((v.combined, g))
        };
        let res = grad_check("softmax + combined loss", &mut p, &[x], |_, t, i| Ok(t.softmax(i[0])), &head, h, &mut r)?;
        out.push(SuiteEntry { result: res, tolerance: LAYER_TOLERANCE });
    }

    for variant in [Variant::Unet3d, Variant::MultiresUnet3d] {
        let mut r = next_rng();
        let spec = ArchitectureSpec::new(variant, 2).with_levels(2);
        let mut model = Model::<f64>::build(spec, r.random())?;
        let x = random_tensor([1, 3, 2, 4, 4], &mut r);
        let labels = labels_for(32, &mut r);
        let head = |y: &Tensor5<f64>| -> Result<(f64, Tensor5<f64>)> {
            let (v, g) = loss::combined_loss_with_grad(y, &labels)?;
            Ok((v.combined, g))
        };
        let net = model.clone();
        let res = grad_check(
            &format!("{variant} two-level network + loss"),
            model.params_mut(),
            &[x],
            |p, t, i| {
                let y = net.forward_with(p, t, &i[0])?;
                Ok(t.softmax(y))
            },
            &head,
            h,
            &mut r,
        )?;
        out.push(SuiteEntry { result: res, tolerance: NETWORK_TOLERANCE });
    }

    Ok(out)
}
