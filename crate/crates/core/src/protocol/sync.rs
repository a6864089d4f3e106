use crate::error::{Error, Result};
use crate::param::ParamVector;

/// An outstanding fragment all-reduce.
#[derive(Debug, Clone, PartialEq)]
pub struct InFlightSync {
    pub fragment: usize,
    pub initiated_step: u64,
    pub completes_at_step: u64,
    /// Pseudo-gradients in worker order.
    pub contributions: Vec<ParamVector>,
    /// Bytes put on the wire, `M * S_p`.
    pub bytes: u64,
    /// Wall-clock duration of the transfer.
    pub seconds: f64,
}

impl InFlightSync {
    pub fn overlap(&self) -> u64 {
        self.completes_at_step - self.initiated_step
    }
}

/// Mean of the worker contributions, summed in worker order.
pub fn aggregate(contributions: &[ParamVector], workers: usize) -> Result<ParamVector> {
    if contributions.len() != workers || workers == 0 {
        return Err(Error::internal(format!(
            "expected {workers} contributions, got {}",
            contributions.len()
        )));
    }
    let mut sum = contributions[0].clone();
    for c in &contributions[1..] {
        if c.len() != sum.len() {
            return Err(Error::internal("contributions differ in length"));
        }
        sum.axpy(1.0, c);
    }
    let m = workers as f64;
    Ok(ParamVector::new(sum.iter().map(|v| v / m).collect()))
}

/// `(1 - alpha) * local + alpha * global`
pub fn blend(local: &ParamVector, global: &ParamVector, alpha: f64) -> ParamVector {
    ParamVector::new(
        local
            .iter()
            .zip(global.iter())
            .map(|(l, g)| (1.0 - alpha) * l + alpha * g)
            .collect(),
    )
}

/// Delay-compensated fragment state.
///
/// With displacement `d = now - at_init` over `tau` steps, change rate
/// `g = d / tau` and divergence `div = (global - at_init) / H`:
///
/// ```text
/// g_corr = g + lambda * g * g * div        (elementwise)
/// result = global + g_corr * tau
/// ```
///
/// `g_corr * tau` is expanded to `d + lambda * tau * g * g * div` so that the
/// uncorrected path reproduces `global + d` exactly. `literal_sign` flips
/// the displacement to `at_init - now`.
pub fn compensate(
    now: &ParamVector,
    at_init: &ParamVector,
    global: &ParamVector,
    lambda: f64,
    local_steps: u64,
    tau: u64,
    literal_sign: bool,
) -> Result<ParamVector> {
    if tau == 0 {
        return Err(Error::internal("compensation requires an overlap of at least one step"));
    }
    if local_steps == 0 {
        return Err(Error::internal("compensation requires H >= 1"));
    }
    if now.len() != at_init.len() || now.len() != global.len() {
        return Err(Error::internal("compensation inputs differ in length"));
    }
    let tau_f = tau as f64;
    let h = local_steps as f64;
    let out = now
        .iter()
        .zip(at_init.iter())
        .zip(global.iter())
        .map(|((&cur, &init), &glob)| {
            let d = if literal_sign { init - cur } else { cur - init };
            let g = d / tau_f;
            let div = (glob - init) / h;
            let correction = lambda * tau_f * (g * g * div);
            glob + d + correction
        })
        .collect();
    Ok(ParamVector::new(out))
}
