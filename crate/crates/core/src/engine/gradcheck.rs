//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::param::{Layer, Mode, Param};
use super::tensor::Tensor5;
use crate::error::Result;

/// A scalar function of an input tensor and a set of parameters.
pub trait Objective {
    fn loss(&mut self, input: &Tensor5) -> Result<f64>;

    /// Loss and input gradient. Parameter gradients are written (not
    /// accumulated) into the params' `grad` fields.
    fn loss_and_grad(&mut self, input: &Tensor5) -> Result<(f64, Tensor5)>;

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param));

    /// Input entries sitting on a kink (e.g. a ReLU at zero) are skipped.
    fn skip_input(&self, _input: &Tensor5, _flat_index: usize) -> bool {
        false
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Fraction of each parameter tensor's entries to check (at least one each).
    pub param_fraction: f64,
    /// Cap on checked input entries; `None` checks all of them.
    pub max_input_entries: Option<usize>,
    pub check_input: bool,
    /// Denominator floor of the relative error.
    pub abs_floor: f64,
    pub seed: u64,
    /// Skip entries whose one-sided differences disagree by more than the
    /// tolerance, i.e. where the step crosses a ReLU or max-pool kink.
    pub skip_kinks: bool,
    /// Fail when more than this fraction of entries had to be skipped.
    pub max_skip_fraction: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            param_fraction: 1.0,
            max_input_entries: None,
            check_input: true,
            abs_floor: 1e-6,
            seed: 0,
            skip_kinks: false,
            max_skip_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EntryError {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst: Option<EntryError>,
    /// Max relative error per checked tensor, "input" included.
    pub per_tensor: Vec<(String, f64)>,
    pub checked: usize,
    pub skipped: usize,
    /// Set when the loss or a gradient went NaN or infinite.
    pub nonfinite: Option<String>,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Loss at +h and -h.
fn two_sided(obj: &mut dyn Objective, input: &Tensor5, h: f64, perturb: &mut dyn FnMut(&mut dyn Objective, f64)) -> Result<(f64, f64)> {
    perturb(obj, h);
    let plus = obj.loss(input)?;
    perturb(obj, -2.0 * h);
    let minus = obj.loss(input)?;
    perturb(obj, h);
    Ok((plus, minus))
}

fn at_kink(base: f64, plus: f64, minus: f64, h: f64, tolerance: f64, floor: f64) -> bool {
    let fwd = (plus - base) / h;
    let bwd = (base - minus) / h;
    relative_error(fwd, bwd, floor) > tolerance
}

fn perturb_param(obj: &mut dyn Objective, ordinal: usize, index: usize, delta: f64) {
    let mut k = 0;
    obj.visit_params_mut(&mut |_, p| {
        if p.trainable {
            if k == ordinal {
                p.value[index] += delta;
            }
            k += 1;
        }
    });
}

/// Compares analytic gradients of `obj` at `input` with central differences.
pub fn gradcheck(obj: &mut dyn Objective, input: &Tensor5, tolerance: f64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        tolerance,
        max_rel_error: 0.0,
        worst: None,
        per_tensor: Vec::new(),
        checked: 0,
        skipped: 0,
        nonfinite: None,
        passed: false,
    };
    let (loss, grad_in) = obj.loss_and_grad(input)?;
    if !loss.is_finite() {
        report.nonfinite = Some(format!("loss is {loss}"));
        return Ok(report);
    }
    if !grad_in.all_finite() {
        report.nonfinite = Some("input gradient".into());
        return Ok(report);
    }
    // Snapshot analytic parameter gradients before any perturbation.
    let mut analytic: Vec<(String, Vec<f64>)> = Vec::new();
    obj.visit_params_mut(&mut |name, p| {
        if p.trainable {
            analytic.push((name.to_string(), p.grad.clone()));
        }
    });
    if let Some((name, _)) = analytic.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        report.nonfinite = Some(format!("gradient of {name}"));
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;
    let kink = |base: f64, plus: f64, minus: f64| opts.skip_kinks && at_kink(base, plus, minus, h, tolerance, opts.abs_floor);

    let record = |report: &mut GradCheckReport, tensor: &str, index: usize, a: f64, n: f64, tensor_max: &mut f64| {
        let e = relative_error(a, n, opts.abs_floor);
        report.checked += 1;
        *tensor_max = tensor_max.max(e);
        if !n.is_finite() {
            report.nonfinite = Some(format!("finite difference of {tensor}[{index}]"));
        }
        if e > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(e);
            report.worst = Some(EntryError {
                tensor: tensor.to_string(),
                index,
                analytic: a,
                numeric: n,
                rel_error: e,
            });
        }
    };

    for (ordinal, (name, grads)) in analytic.iter().enumerate() {
        let len = grads.len();
        if len == 0 {
            continue;
        }
        let take = ((len as f64 * opts.param_fraction).ceil() as usize).clamp(1, len);
        let mut picks: Vec<usize> = if take == len {
            (0..len).collect()
        } else {
            sample(&mut rng, len, take).into_vec()
        };
        picks.sort_unstable();
        let mut tensor_max = 0.0;
        for idx in picks {
            let (plus, minus) = two_sided(obj, input, h, &mut |o, d| perturb_param(o, ordinal, idx, d))?;
            if kink(loss, plus, minus) {
                report.skipped += 1;
                continue;
            }
            record(&mut report, name, idx, grads[idx], (plus - minus) / (2.0 * h), &mut tensor_max);
        }
        report.per_tensor.push((name.clone(), tensor_max));
    }

    if opts.check_input && !input.is_empty() {
        let len = input.len();
        let take = opts.max_input_entries.unwrap_or(len).min(len);
        let mut picks: Vec<usize> = if take == len {
            (0..len).collect()
        } else {
            sample(&mut rng, len, take).into_vec()
        };
        picks.sort_unstable();
        let mut x = input.clone();
        let mut tensor_max = 0.0;
        for idx in picks {
            if obj.skip_input(input, idx) {
                report.skipped += 1;
                continue;
            }
            let orig = x.data()[idx];
            x.data_mut()[idx] = orig + h;
            let plus = obj.loss(&x)?;
            x.data_mut()[idx] = orig - h;
            let minus = obj.loss(&x)?;
            x.data_mut()[idx] = orig;
            if kink(loss, plus, minus) {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            record(&mut report, "input", idx, grad_in.data()[idx], numeric, &mut tensor_max);
        }
        report.per_tensor.push(("input".into(), tensor_max));
    }

    let seen = report.checked + report.skipped;
    let skipped_ok = seen == 0 || (report.skipped as f64) <= opts.max_skip_fraction * seen as f64 || !opts.skip_kinks;
    report.passed = report.nonfinite.is_none() && report.max_rel_error < tolerance && skipped_ok;
    Ok(report)
}

/// Wraps a [`Layer`] as the objective `sum(probe * layer(x))`.
pub struct LayerObjective<L: Layer> {
    pub layer: L,
    pub probe: Tensor5,
    pub mode: Mode,
    /// Skip input entries with |x| below this (kinks at zero).
    pub kink_radius: Option<f64>,
}

impl<L: Layer> LayerObjective<L> {
    pub fn new(layer: L, probe: Tensor5) -> Self {
        LayerObjective {
            layer,
            probe,
            mode: Mode::Train,
            kink_radius: None,
        }
    }
}

impl<L: Layer> Objective for LayerObjective<L> {
    fn loss(&mut self, input: &Tensor5) -> Result<f64> {
        let y = self.layer.forward(input, self.mode)?;
        y.expect_shape(self.probe.shape(), "gradcheck probe")?;
        Ok(y.data().iter().zip(self.probe.data()).map(|(a, b)| a * b).sum())
    }

    fn loss_and_grad(&mut self, input: &Tensor5) -> Result<(f64, Tensor5)> {
        let loss = self.loss(input)?;
        self.layer.zero_grad();
        let gin = self.layer.backward(&self.probe)?;
        Ok((loss, gin))
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.layer.visit_params_mut("", f);
    }

    fn skip_input(&self, input: &Tensor5, flat_index: usize) -> bool {
        match self.kink_radius {
            Some(r) => input.data()[flat_index].abs() <= r,
            None => false,
        }
    }
}
