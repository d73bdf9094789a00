//! Central finite-difference verification of analytic gradients.
//!
//! Runs a network in surrogate mode (binarizers become clipped-linear, so
//! the composite is differentiable almost everywhere), projects the output
//! onto a fixed random direction to obtain a scalar loss, and compares the
//! backward pass against central differences over every parameter and
//! input element.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grad::{Ctx, GradFlow, Network, Value};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
}

impl CheckResult {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Relative disagreement between a finite difference and an analytic value;
/// treats a pair that is jointly tiny as agreeing.
fn rel_err(fd: f64, analytic: f64) -> f64 {
    let scale = fd.abs().max(analytic.abs());
    if scale < 1e-7 {
        0.0
    } else {
        (fd - analytic).abs() / scale
    }
}

/// Fixed projection of a network output onto a scalar.
struct Projection {
    real: Vec<f64>,
    planes: [Vec<f64>; 2],
    gamma: [f64; 2],
}

impl Projection {
    fn for_output(out: &Value, rng: &mut impl Rng) -> Projection {
        let mut gen = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
        match out {
            Value::Real(t) => Projection {
                real: gen(t.len()),
                planes: [Vec::new(), Vec::new()],
                gamma: [0.0; 2],
            },
            Value::Planes(b) => {
                let n = b.planes[0].len();
                Projection {
                    real: Vec::new(),
                    planes: [gen(n), gen(n)],
                    gamma: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                }
            }
        }
    }

    fn loss(&self, out: &Value) -> f64 {
        match out {
            Value::Real(t) => t.data().iter().zip(&self.real).map(|(a, b)| a * b).sum(),
            Value::Planes(b) => {
                let mut acc = 0.0;
                for pl in 0..2 {
                    acc += b.planes[pl]
                        .data()
                        .iter()
                        .zip(&self.planes[pl])
                        .map(|(a, w)| a * w)
                        .sum::<f64>();
                    acc += b.gamma[pl] * self.gamma[pl];
                }
                acc
            }
        }
    }

    fn seed_grad(&self, out: &Value) -> GradFlow {
        match out {
            Value::Real(t) => GradFlow::Real(
                Tensor::from_vec(t.shape(), self.real.clone()).expect("sized"),
            ),
            Value::Planes(b) => GradFlow::Planes {
                dplanes: [
                    Tensor::from_vec(b.planes[0].shape(), self.planes[0].clone()).expect("sized"),
                    Tensor::from_vec(b.planes[1].shape(), self.planes[1].clone()).expect("sized"),
                ],
                dgamma: self.gamma,
            },
        }
    }
}

fn param_count(net: &mut Network) -> Vec<usize> {
    let mut sizes = Vec::new();
    net.visit_params(&mut |view| sizes.push(view.data.len()));
    sizes
}

fn nudge_param(net: &mut Network, slot: usize, idx: usize, delta: f64) {
    let mut cur = 0usize;
    net.visit_params(&mut |view| {
        if cur == slot {
            view.data[idx] += delta;
        }
        cur += 1;
    });
}

fn read_grad(net: &mut Network, slot: usize, idx: usize) -> f64 {
    let mut cur = 0usize;
    let mut g = 0.0;
    net.visit_params(&mut |view| {
        if cur == slot {
            g = view.grad[idx];
        }
        cur += 1;
    });
    g
}

/// Check every parameter and input gradient of `net` at `input` against
/// central finite differences with step `h`.
pub fn check_network(
    net: &mut Network,
    input: &Tensor,
    h: f64,
    rng: &mut impl Rng,
) -> Result<CheckResult> {
    let ctx = Ctx::surrogate();
    // Burn-in: lets data-dependent initialization (binarizer scales) settle.
    let out = net.forward(Value::Real(input.clone()), &ctx)?;
    let proj = Projection::for_output(&out, rng);

    net.zero_grads();
    let out = net.forward(Value::Real(input.clone()), &ctx)?;
    let dinput = net.backward(proj.seed_grad(&out))?;
    let dinput = match dinput {
        GradFlow::Real(t) => t,
        GradFlow::Planes { .. } => {
            return Err(Error::internal("gradcheck expects a real network input"))
        }
    };

    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    let mut worst = String::from("none");
    let update = |fd: f64, an: f64, what: String, max_rel: &mut f64, worst: &mut String| {
        let e = rel_err(fd, an);
        if e > *max_rel {
            *max_rel = e;
            *worst = format!("{what}: fd {fd:.6e} vs analytic {an:.6e}");
        }
    };

    // Parameters.
    let sizes = param_count(net);
    for (slot, &len) in sizes.iter().enumerate() {
        for idx in 0..len {
            nudge_param(net, slot, idx, h);
            let lp = proj.loss(&net.forward(Value::Real(input.clone()), &ctx)?);
            nudge_param(net, slot, idx, -2.0 * h);
            let lm = proj.loss(&net.forward(Value::Real(input.clone()), &ctx)?);
            nudge_param(net, slot, idx, h);
            let fd = (lp - lm) / (2.0 * h);
            let an = read_grad(net, slot, idx);
            update(fd, an, format!("param[{slot}][{idx}]"), &mut max_rel, &mut worst);
            checked += 1;
        }
    }

    // Inputs.
    let mut x = input.clone();
    for idx in 0..x.len() {
        let orig = x.data()[idx];
        x.data_mut()[idx] = orig + h;
        let lp = proj.loss(&net.forward(Value::Real(x.clone()), &ctx)?);
        x.data_mut()[idx] = orig - h;
        let lm = proj.loss(&net.forward(Value::Real(x.clone()), &ctx)?);
        x.data_mut()[idx] = orig;
        let fd = (lp - lm) / (2.0 * h);
        let an = dinput.data()[idx];
        update(fd, an, format!("input[{idx}]"), &mut max_rel, &mut worst);
        checked += 1;
    }

    Ok(CheckResult {
        checked,
        max_rel_err: max_rel,
        worst,
    })
}
