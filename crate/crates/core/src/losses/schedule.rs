use serde::{Deserialize, Serialize};

use crate::diff::{Tape, Var};
use crate::error::{contract, Error, Result};

/// Weights of the training objective and the warm-up schedule of the two
/// variable weights. `sigma1` (rendering terms) is 0 and `sigma4` (vertex
/// terms) is 1 for the first `hold_steps` steps; both then move linearly to
/// 1 and 0 over `warmup_steps` steps. The defaults are one epoch each of
/// the default 16-sample set at batch size 4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub sigma2: f64,
    pub sigma3: f64,
    pub hold_steps: usize,
    pub warmup_steps: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            sigma2: 0.2,
            sigma3: 0.001,
            hold_steps: 4,
            warmup_steps: 4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2 >= 0.0 && self.sigma3 >= 0.0) {
            return Err(Error::Config("sigma2 and sigma3 must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn sigma1(&self, step: usize) -> f64 {
        if step < self.hold_steps {
            return 0.0;
        }
        if self.warmup_steps == 0 {
            return 1.0;
        }
        ((step - self.hold_steps) as f64 / self.warmup_steps as f64).min(1.0)
    }

    pub fn sigma4(&self, step: usize) -> f64 {
        1.0 - self.sigma1(step)
    }

    /// First step at which the schedule is fully ramped.
    pub fn ramp_end(&self) -> usize {
        self.hold_steps + self.warmup_steps
    }
}

/// Image-space terms, present once the rendering weight is nonzero.
#[derive(Clone, Copy, Debug)]
pub struct RenderTerms {
    pub pixel: Var,
    pub identity: Var,
    pub adversarial: Var,
}

/// Every scalar entering the objective.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub render: Option<RenderTerms>,
    /// Distance between the coarse albedo and the refined one.
    pub vertex_texture: Var,
    /// Distance between the projected colors and the illuminated refined albedo.
    pub vertex_projected: Var,
}

/// `sigma1 [L_pix + sigma2 L_id + sigma3 L_adv] + sigma4 [L_vert + L_vert']`.
pub fn total_loss(tape: &mut Tape, terms: &LossTerms, weights: &LossWeights, step: usize) -> Result<Var> {
    let (s1, s4) = (weights.sigma1(step), weights.sigma4(step));
    let vert = tape.add(terms.vertex_texture, terms.vertex_projected)?;
    let vert = tape.scale(vert, s4);
    match (&terms.render, s1 > 0.0) {
        (Some(r), _) => {
            let id = tape.scale(r.identity, weights.sigma2);
            let adv = tape.scale(r.adversarial, weights.sigma3);
            let img = tape.add(r.pixel, id)?;
            let img = tape.add(img, adv)?;
            let img = tape.scale(img, s1);
            tape.add(img, vert)
        }
        (None, false) => Ok(vert),
        (None, true) => contract("total_loss", format!("rendering terms missing at step {step} (sigma1 = {s1})")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tensor;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let w = LossWeights {
            hold_steps: 10,
            warmup_steps: 20,
            ..LossWeights::default()
        };
        assert_eq!((w.sigma1(0), w.sigma4(0)), (0.0, 1.0));
        assert_eq!((w.sigma1(9), w.sigma4(9)), (0.0, 1.0));
        assert_eq!((w.sigma1(20), w.sigma4(20)), (0.5, 0.5));
        assert_eq!((w.sigma1(30), w.sigma4(30)), (1.0, 0.0));
        assert_eq!((w.sigma1(1000), w.sigma4(1000)), (1.0, 0.0));
        let ramp_now = LossWeights {
            hold_steps: 0,
            warmup_steps: 4,
            ..w
        };
        assert_eq!(ramp_now.sigma1(0), 0.0);
        assert_eq!(ramp_now.sigma1(2), 0.5);
        assert_eq!(LossWeights::default().sigma2, 0.2);
        assert_eq!(LossWeights::default().sigma3, 0.001);
    }

    #[test]
    fn step_zero_is_vertex_terms_only_and_blocks_render_gradients() {
        let w = LossWeights::default();
        let mut t = Tape::new();
        let img = t.param(Tensor::vector(vec![0.4, 0.9]));
        let pixel = t.sum(img).unwrap();
        let identity = t.scale(pixel, 2.0);
        let adversarial = t.scale(pixel, -3.0);
        let a = t.constant(Tensor::scalar(0.25));
        let b = t.constant(Tensor::scalar(0.5));
        let terms = LossTerms {
            render: Some(RenderTerms {
                pixel,
                identity,
                adversarial,
            }),
            vertex_texture: a,
            vertex_projected: b,
        };
        let l = total_loss(&mut t, &terms, &w, 0).unwrap();
        assert_eq!(t.value(l).item(), 0.75);
        let g = t.backward(l).unwrap();
        assert!(g.get_or_zeros(&t, img).data().iter().all(|&v| v == 0.0));

        let late = total_loss(&mut t, &terms, &w, w.ramp_end()).unwrap();
        let want = 1.3 * (1.0 + 0.2 * 2.0 - 0.001 * 3.0);
        assert!((t.value(late).item() - want).abs() < 1e-12);
        let none = LossTerms { render: None, ..terms };
        assert!(total_loss(&mut t, &none, &w, w.ramp_end()).is_err());
        let early = total_loss(&mut t, &none, &w, 0).unwrap();
        assert_eq!(t.value(early).item(), 0.75);
    }
}
