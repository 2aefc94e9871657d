use crate::teacher::TrainError;
use crate::tensornet::{Elem, Graph, Tensor, TensorError};
use ndarray::{Array1, Array2};

/// Negative cosine similarity between the (constant) teacher features and
/// the student's transformed features, averaged over the batch. In `[-1, 1]`.
pub fn feature_distill_loss<'g, E: Elem>(
    g: &'g Graph<E>,
    teacher_z: &Array2<E>,
    z_tilde: Tensor<'g, E>,
) -> Result<Tensor<'g, E>, TrainError> {
    if teacher_z.shape() != z_tilde.shape().as_slice() {
        return Err(TrainError::Invalid(format!(
            "feature distill: teacher {:?} vs student {:?}",
            teacher_z.shape(),
            z_tilde.shape()
        )));
    }
    let min_norm = 1e-12;
    for row in teacher_z.outer_iter() {
        let n = row.iter().map(|v| (*v * *v).as_f64()).sum::<f64>().sqrt();
        if n < min_norm {
            return Err(TrainError::Tensor(TensorError::Invalid(
                "feature distill: zero-norm teacher feature".into(),
            )));
        }
    }
    let zt = z_tilde.value();
    let d = z_tilde.shape()[1];
    for i in 0..z_tilde.shape()[0] {
        let mut n = 0.0;
        for j in 0..d {
            let v = zt[[i, j]].as_f64();
            n += v * v;
        }
        if n.sqrt() < min_norm {
            return Err(TrainError::Tensor(TensorError::Invalid(
                "feature distill: zero-norm student feature".into(),
            )));
        }
    }
    let mut tz = teacher_z.clone();
    for mut row in tz.outer_iter_mut() {
        let n = E::from_f64(
            row.iter()
                .map(|v| (*v * *v).as_f64())
                .sum::<f64>()
                .sqrt(),
        );
        row.mapv_inplace(|v| v / n);
    }
    let cos = z_tilde
        .l2_normalize_rows()?
        .mul(g.constant2(tz))?
        .row_sum()?
        .mean_all();
    Ok(cos.neg())
}

/// Closed-form KL between diagonal Gaussians, teacher first, averaged over
/// the batch and summed over action dimensions. Teacher parameters are
/// constants.
pub fn policy_distill_loss<'g, E: Elem>(
    g: &'g Graph<E>,
    teacher_mu: &Array2<E>,
    teacher_log_std: &Array1<E>,
    student_mu: Tensor<'g, E>,
    student_log_std: Tensor<'g, E>,
) -> Result<Tensor<'g, E>, TrainError> {
    let n = teacher_mu.shape()[0];
    let d = teacher_mu.shape()[1];
    if student_mu.shape() != vec![n, d] || teacher_log_std.len() != d {
        return Err(TrainError::Invalid(format!(
            "policy distill: teacher mu {:?} / log_std {:?} vs student mu {:?}",
            teacher_mu.shape(),
            teacher_log_std.shape(),
            student_mu.shape()
        )));
    }
    if teacher_log_std.iter().any(|v| !v.exp().as_f64().is_finite() || v.exp().as_f64() <= 0.0) {
        return Err(TrainError::Invalid(
            "policy distill: non-positive teacher sigma".into(),
        ));
    }

    // KL(t || s) per dim:
    //   log sigma_s - log sigma_t + 0.5 exp(2 log sigma_t - 2 log sigma_s)
    //   + 0.5 (mu_t - mu_s)^2 exp(-2 log sigma_s) - 0.5
    let ls_s = student_log_std.broadcast_rows(n)?;
    let ls_t = g.constant2(
        teacher_log_std
            .broadcast((n, d))
            .expect("broadcast fits")
            .to_owned(),
    );
    let var_ratio = ls_t.sub(ls_s)?.mul_scalar(2.0).exp().mul_scalar(0.5);
    let mu_diff = student_mu.sub(g.constant2(teacher_mu.clone()))?;
    let mahal = mu_diff
        .square()
        .mul(ls_s.mul_scalar(-2.0).exp())?
        .mul_scalar(0.5);
    let kl = ls_s
        .sub(ls_t)?
        .add(var_ratio)?
        .add(mahal)?
        .add_scalar(-0.5)
        .row_sum()?
        .mean_all();
    Ok(kl)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fd_loss_at_fixed_points() {
        let g = Graph::<f64>::new();
        let z = arr2(&[[0.6, 0.8, 0.0], [1.0, 0.0, 0.0]]);
        // Identical features -> -1.
        let same = feature_distill_loss(&g, &z, g.constant2(z.clone()))
            .unwrap()
            .scalar_value();
        assert!((same + 1.0).abs() < 1e-12);
        // Orthogonal -> 0.
        let orth = arr2(&[[-0.8, 0.6, 0.0], [0.0, 1.0, 0.0]]);
        let zero = feature_distill_loss(&g, &z, g.constant2(orth))
            .unwrap()
            .scalar_value();
        assert!(zero.abs() < 1e-12);
        // Opposite -> +1.
        let opp = z.mapv(|v| -v);
        let one = feature_distill_loss(&g, &z, g.constant2(opp))
            .unwrap()
            .scalar_value();
        assert!((one - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fd_rejects_zero_norm() {
        let g = Graph::<f64>::new();
        let z = arr2(&[[0.0, 0.0]]);
        let s = g.constant2(arr2(&[[1.0, 0.0]]));
        assert!(feature_distill_loss(&g, &z, s).is_err());
    }

    #[test]
    fn pd_loss_identical_is_zero_and_closed_form() {
        let g = Graph::<f64>::new();
        let mu = arr2(&[[0.3, -0.2, 0.5]]);
        let ls = arr1(&[0.1, -0.3, 0.0]);
        let kl = policy_distill_loss(
            &g,
            &mu,
            &ls,
            g.constant2(mu.clone()),
            g.constant1(ls.clone()),
        )
        .unwrap()
        .scalar_value();
        assert!(kl.abs() < 1e-12, "{kl}");

        // mu_t = 0, mu_s = 1, sigma = 1, one dimension -> 0.5.
        let kl2 = policy_distill_loss(
            &g,
            &arr2(&[[0.0]]),
            &arr1(&[0.0]),
            g.constant2(arr2(&[[1.0]])),
            g.constant1(arr1(&[0.0])),
        )
        .unwrap()
        .scalar_value();
        assert!((kl2 - 0.5).abs() < 1e-12, "{kl2}");
    }

    #[test]
    fn pd_loss_nonnegative_on_random_pairs() {
        let g = Graph::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let mu_t = arr2(&[[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]]);
            let ls_t = arr1(&[rng.gen_range(-1.0..0.5), rng.gen_range(-1.0..0.5)]);
            let mu_s = arr2(&[[rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)]]);
            let ls_s = arr1(&[rng.gen_range(-1.0..0.5), rng.gen_range(-1.0..0.5)]);
            let kl = policy_distill_loss(&g, &mu_t, &ls_t, g.constant2(mu_s), g.constant1(ls_s))
                .unwrap()
                .scalar_value();
            assert!(kl >= -1e-10, "negative KL {kl}");
        }
    }
}
