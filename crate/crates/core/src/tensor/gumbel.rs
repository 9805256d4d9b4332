use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Gumbel-Softmax relaxation over the last dimension of `logits`.
///
/// Returns `softmax((logits + G) / temperature)` with i.i.d. Gumbel noise
/// `G`. With `straight_through` the forward value is the one-hot argmax of
/// that soft sample while gradients follow the soft sample.
pub fn gumbel_softmax(
    tape: &mut Tape,
    logits: Var,
    temperature: f64,
    straight_through: bool,
    rng: &mut RngStream,
) -> Result<Var> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::Invalid(format!(
            "gumbel_softmax temperature must be positive, got {temperature}"
        )));
    }
    let shape = tape.shape(logits).to_vec();
    let noise: Vec<f64> = (0..tape.value(logits).len()).map(|_| rng.gumbel()).collect();
    let noise = tape.constant(&shape, noise)?;
    let perturbed = tape.add(logits, noise)?;
    let scaled = tape.scale(perturbed, 1.0 / temperature);
    let soft = tape.softmax(scaled);
    Ok(if straight_through {
        tape.straight_through(soft)
    } else {
        soft
    })
}
