//! Shared test support: the central-difference gradient oracle. It is
//! independent of the backward pass it checks — gradients are estimated from
//! forward evaluations alone.

use navlab::tensornet::{Graph, ParamSet, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// Evaluate the analytic gradient of `build`'s scalar loss against central
/// finite differences for every element of every parameter. Returns the
/// worst relative error.
pub fn grad_check<F>(params: &mut ParamSet<f64>, build: F) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamSet<f64>) -> Tensor<'g, f64>,
{
    params.zero_grads();
    {
        let g = Graph::new();
        let loss = build(&g, params);
        g.backward_into(loss, params).expect("backward succeeds");
    }
    let names: Vec<String> = params.names().to_vec();
    let analytic: Vec<ndarray::ArrayD<f64>> = names
        .iter()
        .map(|n| params.get(n).unwrap().grad.clone())
        .collect();

    let mut worst = 0.0f64;
    for (pi, name) in names.iter().enumerate() {
        let len = params.get(name).unwrap().value.len();
        for k in 0..len {
            let orig = read_at(params, name, k);
            write_at(params, name, k, orig + FD_STEP);
            let plus = eval(&build, params);
            write_at(params, name, k, orig - FD_STEP);
            let minus = eval(&build, params);
            write_at(params, name, k, orig);
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[pi].as_slice().unwrap()[k];
            let denom = a.abs().max(numeric.abs());
            let err = if denom > 1e-6 {
                (a - numeric).abs() / denom
            } else if (a - numeric).abs() < 1e-9 {
                0.0
            } else {
                (a - numeric).abs()
            };
            if err > worst {
                worst = err;
            }
        }
    }
    params.zero_grads();
    worst
}

fn eval<F>(build: &F, params: &ParamSet<f64>) -> f64
where
    F: for<'g> Fn(&'g Graph<f64>, &ParamSet<f64>) -> Tensor<'g, f64>,
{
    let g = Graph::new();
    build(&g, params).scalar_value()
}

fn read_at(params: &ParamSet<f64>, name: &str, k: usize) -> f64 {
    params.get(name).unwrap().value.as_slice().unwrap()[k]
}

fn write_at(params: &mut ParamSet<f64>, name: &str, k: usize, v: f64) {
    params.get_mut(name).unwrap().value.as_slice_mut().unwrap()[k] = v;
}
