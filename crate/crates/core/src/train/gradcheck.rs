use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{Layer, Mode};
use crate::tensor::Tensor4;

/// Name under which the input gradient is reported.
pub const INPUT_NAME: &str = "input";

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub threshold: f64,
    pub step: f64,
    /// Tensors with at most this many elements are checked exhaustively.
    pub exhaustive_limit: usize,
    /// Elements sampled from larger tensors.
    pub samples: usize,
    pub seed: u64,
    pub mode: Mode,
    pub check_input: bool,
    /// Scales the analytic gradient of this tensor's largest element by 1.1
    /// before comparing, to exercise the failure path.
    pub inject_fault: Option<String>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            threshold: 1e-4,
            step: 1e-5,
            exhaustive_limit: 256,
            samples: 256,
            seed: 0,
            mode: Mode::Train,
            check_input: true,
            inject_fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error per tensor, in parameter order, input last.
    pub errors: Vec<(String, f64)>,
    pub threshold: f64,
    pub pass: bool,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.errors.iter().map(|(_, e)| *e).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &(String, f64)> {
        self.errors.iter().filter(|(_, e)| *e >= self.threshold)
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("tensor\tmax_rel_err\tstatus\n");
        for (name, e) in &self.errors {
            let status = if *e < self.threshold { "ok" } else { "FAIL" };
            s.push_str(&format!("{name}\t{e:.3e}\t{status}\n"));
        }
        s
    }
}

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn objective(
    layer: &mut dyn Layer<f64>,
    x: &Tensor4<f64>,
    r: &Tensor4<f64>,
    mode: Mode,
) -> Result<f64> {
    layer.forward(x, mode)?.dot(r)
}

fn pick(numel: usize, opts: &GradCheckOptions, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if numel <= opts.exhaustive_limit {
        (0..numel).collect()
    } else {
        let mut v = sample(rng, numel, opts.samples.min(numel)).into_vec();
        v.sort_unstable();
        v
    }
}

/// Compares backpropagated gradients with central differences of
/// `L = sum(forward(x) * R)` for a seeded random `R`.
pub fn grad_check(
    layer: &mut dyn Layer<f64>,
    x: &Tensor4<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let out_shape = layer.output_shape(x.shape())?;
    let r = Tensor4::<f64>::randn(out_shape, 1.0, &mut rng);

    layer.zero_grad();
    let y = layer.forward(x, opts.mode)?;
    if !y.all_finite() {
        return Err(Error::Numeric {
            tensor: "output".into(),
            detail: "non-finite forward output".into(),
        });
    }
    let grad_x = layer.backward(&r)?;
    let mut analytic: Vec<(String, Tensor4<f64>)> = layer
        .params()
        .into_iter()
        .map(|(n, p)| (n, p.grad.clone()))
        .collect();
    if opts.check_input {
        analytic.push((INPUT_NAME.to_string(), grad_x));
    }
    for (name, g) in &analytic {
        if !g.all_finite() {
            return Err(Error::Numeric {
                tensor: name.clone(),
                detail: "non-finite analytic gradient".into(),
            });
        }
    }

    let h = opts.step;
    let n_params = analytic.len() - usize::from(opts.check_input);
    let mut errors = Vec::with_capacity(analytic.len());
    let mut x_work = x.clone();
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        let idx = pick(grad.numel(), opts, &mut rng);
        let faulty = opts.inject_fault.as_deref() == Some(name.as_str());
        let fault_at = idx
            .iter()
            .copied()
            .max_by(|&a, &b| grad.data()[a].abs().total_cmp(&grad.data()[b].abs()));
        let mut worst = 0.0f64;
        for &j in &idx {
            let numeric = if ti < n_params {
                let nudge = |layer: &mut dyn Layer<f64>, delta: f64| {
                    let mut params = layer.params_mut();
                    let v = &mut params[ti].1.value.data_mut()[j];
                    *v += delta;
                };
                let orig = layer.params()[ti].1.value.data()[j];
                nudge(layer, h);
                let plus = objective(layer, x, &r, opts.mode)?;
                nudge(layer, -2.0 * h);
                let minus = objective(layer, x, &r, opts.mode)?;
                layer.params_mut()[ti].1.value.data_mut()[j] = orig;
                (plus - minus) / (2.0 * h)
            } else {
                let orig = x_work.data()[j];
                x_work.data_mut()[j] = orig + h;
                let plus = objective(layer, &x_work, &r, opts.mode)?;
                x_work.data_mut()[j] = orig - h;
                let minus = objective(layer, &x_work, &r, opts.mode)?;
                x_work.data_mut()[j] = orig;
                (plus - minus) / (2.0 * h)
            };
            if !numeric.is_finite() {
                return Err(Error::Numeric {
                    tensor: name.clone(),
                    detail: format!("non-finite numeric gradient at element {j}"),
                });
            }
            let mut a = grad.data()[j];
            if faulty && Some(j) == fault_at {
                a *= 1.1;
            }
            worst = worst.max(relative_error(a, numeric));
        }
        errors.push((name.clone(), worst));
    }
    layer.zero_grad();
    let pass = errors.iter().all(|(_, e)| *e < opts.threshold);
    Ok(GradCheckReport {
        errors,
        threshold: opts.threshold,
        pass,
    })
}
