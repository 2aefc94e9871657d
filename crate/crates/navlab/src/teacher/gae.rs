use super::TrainError;

/// Generalized advantage estimation over one environment's trajectory.
///
/// `bootstrap` is the value estimate of the state after the last stored
/// transition; it is ignored past terminal steps. Returns
/// `(advantages, returns)` with `returns = advantages + values`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let t = rewards.len();
    if values.len() != t || dones.len() != t {
        return Err(TrainError::LengthMismatch(format!(
            "rewards {}, values {}, dones {}",
            t,
            values.len(),
            dones.len()
        )));
    }
    let mut advantages = vec![0.0; t];
    let mut gae = 0.0;
    for i in (0..t).rev() {
        let not_done = if dones[i] { 0.0 } else { 1.0 };
        let next_value = if i + 1 < t { values[i + 1] } else { bootstrap };
        let delta = rewards[i] + gamma * next_value * not_done - values[i];
        gae = delta + gamma * lambda * not_done * gae;
        advantages[i] = gae;
    }
    let returns = advantages
        .iter()
        .zip(values.iter())
        .map(|(a, v)| a + v)
        .collect();
    Ok((advantages, returns))
}
