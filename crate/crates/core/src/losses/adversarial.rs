use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{Tape, Var};
use crate::error::{contract, Result};

/// Default gradient-penalty weight.
pub const DEFAULT_LAMBDA_GP: f64 = 10.0;

/// Terms of one critic evaluation over a batch.
#[derive(Clone, Copy, Debug)]
pub struct AdversarialTerms {
    /// `E[D(fake)] - E[D(real)] + lambda * penalty`, minimized by the critic.
    pub critic_loss: Var,
    /// `-E[D(fake)]`, minimized by the generator.
    pub generator_loss: Var,
    /// `E[(|grad D(x_hat)| - 1)^2]` before weighting.
    pub penalty: Var,
}

/// Critic mapping one image variable to a scalar score.
pub type Critic<'a> = dyn Fn(&mut Tape, Var) -> Result<Var> + 'a;

/// WGAN-GP losses. Each `x_hat` is a fresh differentiable leaf placed
/// uniformly at random on the segment between a real and a fake sample, and
/// its input gradient is taken with `create_graph` so the penalty can be
/// differentiated again with respect to the critic parameters.
pub fn adversarial_loss(
    tape: &mut Tape,
    critic: &Critic<'_>,
    real: &[Var],
    fake: &[Var],
    lambda_gp: f64,
    rng: &mut ChaCha8Rng,
) -> Result<AdversarialTerms> {
    if real.is_empty() || real.len() != fake.len() {
        return contract(
            "adversarial_loss",
            format!("need equal nonempty batches, got {} real and {} fake", real.len(), fake.len()),
        );
    }
    if !tape.is_recording() {
        return contract("adversarial_loss", "the gradient penalty needs a recording tape");
    }
    if !(lambda_gp >= 0.0) {
        return contract("adversarial_loss", format!("lambda_gp {lambda_gp} is negative"));
    }
    let b = real.len() as f64;
    let mut real_sum = None;
    let mut fake_sum = None;
    let mut pen_sum = None;
    let acc = |tape: &mut Tape, slot: &mut Option<Var>, v: Var| -> Result<()> {
        *slot = Some(match *slot {
            None => v,
            Some(s) => tape.add(s, v)?,
        });
        Ok(())
    };
    for (&r, &f) in real.iter().zip(fake) {
        if tape.shape(r) != tape.shape(f) {
            return contract(
                "adversarial_loss",
                format!("real {:?} and fake {:?} differ", tape.shape(r), tape.shape(f)),
            );
        }
        let sr = critic(tape, r)?;
        acc(tape, &mut real_sum, sr)?;
        let sf = critic(tape, f)?;
        acc(tape, &mut fake_sum, sf)?;

        let eps: f64 = rng.random_range(0.0..1.0);
        let mix = tape
            .value(r)
            .zip_map(tape.value(f), |a, c| eps * a + (1.0 - eps) * c);
        let x_hat = tape.leaf(mix, true);
        let score = critic(tape, x_hat)?;
        let g = tape.grad(score, &[x_hat], true)?[0];
        let norm = tape.l2_norm(g)?;
        let dev = tape.add_scalar(norm, -1.0);
        let sq = tape.mul(dev, dev)?;
        acc(tape, &mut pen_sum, sq)?;
    }
    let real_mean = tape.scale(real_sum.expect("nonempty"), 1.0 / b);
    let fake_mean = tape.scale(fake_sum.expect("nonempty"), 1.0 / b);
    let penalty = tape.scale(pen_sum.expect("nonempty"), 1.0 / b);
    let wdist = tape.sub(fake_mean, real_mean)?;
    let weighted = tape.scale(penalty, lambda_gp);
    let critic_loss = tape.add(wdist, weighted)?;
    let generator_loss = tape.neg(fake_mean);
    Ok(AdversarialTerms {
        critic_loss,
        generator_loss,
        penalty,
    })
}

/// `-E[D(fake)]` alone, for generator steps that do not need the penalty.
pub fn generator_adversarial_loss(tape: &mut Tape, critic: &Critic<'_>, fake: &[Var]) -> Result<Var> {
    if fake.is_empty() {
        return contract("adversarial_loss", "empty batch");
    }
    let mut sum = None;
    for &f in fake {
        let s = critic(tape, f)?;
        sum = Some(match sum {
            None => s,
            Some(acc) => tape.add(acc, s)?,
        });
    }
    Ok(tape.scale(sum.expect("nonempty"), -1.0 / fake.len() as f64))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::diff::{grad_check_many, Tensor};

    fn batch(tape: &mut Tape, seed: u64, count: usize) -> Vec<Var> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|_| tape.constant(Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()))
            .collect()
    }

    fn unit(scale: f64) -> Tensor {
        let raw: Vec<f64> = (0..12).map(|i| (i as f64 - 5.5) / 3.0).collect();
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        Tensor::matrix(4, 3, raw.iter().map(|v| scale * v / n).collect()).unwrap()
    }

    fn linear_critic(u: Tensor) -> impl Fn(&mut Tape, Var) -> Result<Var> {
        move |t: &mut Tape, x: Var| {
            let w = t.constant(u.clone());
            let p = t.mul(w, x)?;
            t.sum(p)
        }
    }

    #[test]
    fn constant_critic_pays_lambda() {
        let mut t = Tape::new();
        let real = batch(&mut t, 1, 3);
        let fake = batch(&mut t, 2, 3);
        let c = |t: &mut Tape, x: Var| {
            let z = t.scale(x, 0.0);
            let s = t.sum(z)?;
            Ok(t.add_scalar(s, 0.7))
        };
        let out = adversarial_loss(&mut t, &c, &real, &fake, 10.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!((t.value(out.critic_loss).item() - 10.0).abs() < 1e-9);
        assert!((t.value(out.generator_loss).item() + 0.7).abs() < 1e-12);
    }

    #[test]
    fn penalty_of_linear_critics() {
        for (scale, want) in [(1.0, 0.0), (2.0, 10.0)] {
            let mut t = Tape::new();
            let real = batch(&mut t, 3, 4);
            let fake = batch(&mut t, 4, 4);
            let c = linear_critic(unit(scale));
            let out = adversarial_loss(&mut t, &c, &real, &fake, 10.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let pen = 10.0 * t.value(out.penalty).item();
            assert!((pen - want).abs() < 1e-9, "{pen}");
        }
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut t = Tape::new();
        let c = linear_critic(unit(1.0));
        assert!(adversarial_loss(&mut t, &c, &[], &[], 10.0, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        assert!(generator_adversarial_loss(&mut t, &c, &[]).is_err());
    }

    #[test]
    fn critic_loss_gradcheck_through_the_penalty() {
        // Nonlinear critic D(x) = sum(tanh(W * x)) + 0.5 sum(x^3 * W) with
        // trainable W; the penalty makes this a second-order derivative.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = Tensor::matrix(4, 3, (0..12).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let err = grad_check_many(
            |t, v| {
                let w = v[0];
                let critic = move |t: &mut Tape, x: Var| {
                    let a = t.mul(w, x)?;
                    let a = t.tanh(a)?;
                    let s1 = t.sum(a)?;
                    let cube = t.pow(x, 3.0);
                    let b = t.mul(cube, w)?;
                    let s2 = t.sum(b)?;
                    let s2 = t.scale(s2, 0.5);
                    t.add(s1, s2)
                };
                let real = batch(t, 8, 2);
                let fake = batch(t, 9, 2);
                let out = adversarial_loss(t, &critic, &real, &fake, 10.0, &mut ChaCha8Rng::seed_from_u64(3))?;
                Ok(out.critic_loss)
            },
            &[w0],
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
