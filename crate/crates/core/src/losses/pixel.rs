use crate::diff::{Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

/// Face-region and projected-coverage masks of one image, row-major pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPair {
    pub face: Vec<bool>,
    pub proj: Vec<bool>,
}

impl MaskPair {
    pub fn new(face: Vec<bool>, proj: Vec<bool>) -> Result<Self> {
        if face.len() != proj.len() {
            return contract("mask_pair", format!("face mask has {} pixels, coverage {}", face.len(), proj.len()));
        }
        Ok(Self { face, proj })
    }

    /// Both masks set everywhere.
    pub fn full(pixels: usize) -> Self {
        Self {
            face: vec![true; pixels],
            proj: vec![true; pixels],
        }
    }

    pub fn pixels(&self) -> usize {
        self.face.len()
    }

    /// Pixels inside both masks.
    pub fn intersection(&self) -> Vec<bool> {
        self.face.iter().zip(&self.proj).map(|(&a, &b)| a && b).collect()
    }
}

fn mask_weights(mask: &[bool]) -> Tensor {
    Tensor::vector(mask.iter().map(|&m| f64::from(u8::from(m))).collect())
}

/// Mean over the masked pixels of the per-pixel RGB Euclidean distance.
pub fn pixel_loss(tape: &mut Tape, x: Var, rendered: Var, masks: &MaskPair) -> Result<Var> {
    let p = masks.pixels();
    if tape.shape(x) != [p, 3] || tape.shape(rendered) != [p, 3] {
        return contract(
            "pixel_loss",
            format!("images {:?} and {:?} for {p} mask pixels", tape.shape(x), tape.shape(rendered)),
        );
    }
    let m = masks.intersection();
    let count = m.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::DegenerateMask("face and projection masks do not intersect".into()));
    }
    let d = tape.sub(x, rendered)?;
    let norms = tape.row_norms(d)?;
    let w = tape.constant(mask_weights(&m));
    let masked = tape.mul(norms, w)?;
    let total = tape.sum(masked)?;
    Ok(tape.scale(total, 1.0 / count as f64))
}

/// Mean per-vertex Euclidean distance between two `n x 3` fields.
pub fn vertex_loss(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    match (tape.shape(a), tape.shape(b)) {
        ([n, 3], [m, 3]) if n == m && *n > 0 => {}
        (sa, sb) => return contract("vertex_loss", format!("expected equal n x 3 fields, got {sa:?} and {sb:?}")),
    }
    let d = tape.sub(a, b)?;
    let norms = tape.row_norms(d)?;
    tape.mean(norms)
}

/// [`vertex_loss`] restricted to vertices flagged valid; errors when none are.
pub fn vertex_loss_masked(tape: &mut Tape, a: Var, b: Var, valid: &[bool]) -> Result<Var> {
    match (tape.shape(a), tape.shape(b)) {
        ([n, 3], [m, 3]) if n == m && *n == valid.len() => {}
        (sa, sb) => {
            return contract(
                "vertex_loss",
                format!("fields {sa:?} and {sb:?} with {} validity flags", valid.len()),
            )
        }
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(Error::DegenerateMask("no valid vertices".into()));
    }
    let d = tape.sub(a, b)?;
    let norms = tape.row_norms(d)?;
    let w = tape.constant(mask_weights(valid));
    let masked = tape.mul(norms, w)?;
    let total = tape.sum(masked)?;
    Ok(tape.scale(total, 1.0 / count as f64))
}
