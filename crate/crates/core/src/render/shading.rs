use crate::diff::{Tape, Tensor, Var};
use crate::error::{contract, Result};

/// Real spherical-harmonics basis constants, bands 0 to 2.
pub const SH_C0: f64 = 0.282095;
pub const SH_C1: f64 = 0.488603;
pub const SH_C2: f64 = 1.092548;
pub const SH_C3: f64 = 0.315392;
pub const SH_C4: f64 = 0.546274;

/// Number of lighting values: 9 basis functions per color channel, stored
/// channel-major (`l[c * 9 + b]`).
pub const LIGHTING_LEN: usize = 27;

/// `Y_0..Y_8` at a unit normal:
/// `C0, C1 y, C1 z, C1 x, C2 xy, C2 yz, C3 (3z^2 - 1), C2 xz, C4 (x^2 - y^2)`.
pub fn sh_basis(n: [f64; 3]) -> [f64; 9] {
    let [x, y, z] = n;
    [
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C3 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C4 * (x * x - y * y),
    ]
}

/// Lighting with only the DC term, scaled so the shading multiplier is `gain`.
pub fn ambient_lighting(gain: f64) -> [f64; LIGHTING_LEN] {
    let mut l = [0.0; LIGHTING_LEN];
    for c in 0..3 {
        l[c * 9] = gain / SH_C0;
    }
    l
}

/// `P x 9` basis values for `P x 3` normals.
pub fn sh_basis_rows(tape: &mut Tape, normals: Var) -> Result<Var> {
    let p = match tape.shape(normals) {
        [p, 3] => *p,
        s => return contract("sh_shade", format!("normals must be P x 3, got {s:?}")),
    };
    let x = tape.slice_cols(normals, 0, 1)?;
    let y = tape.slice_cols(normals, 1, 2)?;
    let z = tape.slice_cols(normals, 2, 3)?;
    let one = tape.constant(Tensor::full(&[p, 1], SH_C0));
    let xy = tape.mul(x, y)?;
    let yz = tape.mul(y, z)?;
    let xz = tape.mul(x, z)?;
    let zz = tape.mul(z, z)?;
    let xx = tape.mul(x, x)?;
    let yy = tape.mul(y, y)?;
    let cols = [
        one,
        tape.scale(y, SH_C1),
        tape.scale(z, SH_C1),
        tape.scale(x, SH_C1),
        tape.scale(xy, SH_C2),
        tape.scale(yz, SH_C2),
        {
            let t = tape.scale(zz, 3.0 * SH_C3);
            tape.add_scalar(t, -SH_C3)
        },
        tape.scale(xz, SH_C2),
        {
            let d = tape.sub(xx, yy)?;
            tape.scale(d, SH_C4)
        },
    ];
    let mut out = cols[0];
    for &c in &cols[1..] {
        out = tape.concat_cols(out, c)?;
    }
    Ok(out)
}

/// `color_c = albedo_c * sum_b l[c * 9 + b] Y_b(normal)` per row.
pub fn sh_shade(tape: &mut Tape, albedo: Var, normals: Var, lighting: Var) -> Result<Var> {
    if tape.shape(lighting).iter().product::<usize>() != LIGHTING_LEN {
        return contract("sh_shade", format!("lighting must have 27 values, got {:?}", tape.shape(lighting)));
    }
    if tape.shape(albedo) != tape.shape(normals) {
        return contract(
            "sh_shade",
            format!("albedo {:?} and normals {:?} differ", tape.shape(albedo), tape.shape(normals)),
        );
    }
    let y = sh_basis_rows(tape, normals)?;
    let l = tape.reshape(lighting, &[3, 9])?;
    let l = tape.transpose(l)?;
    let gain = tape.matmul(y, l)?;
    tape.mul(albedo, gain)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::grad_check_many;

    fn normals() -> Tensor {
        let raw = [[0.0, 0.0, 1.0], [0.6, 0.0, 0.8], [-0.48, 0.6, 0.64], [1.0, 0.0, 0.0]];
        Tensor::matrix(4, 3, raw.iter().flatten().copied().collect()).unwrap()
    }

    #[test]
    fn dc_only_lighting_returns_albedo() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(4, 3, (0..12).map(|i| i as f64 / 12.0).collect()).unwrap());
        let n = t.constant(normals());
        let l = t.constant(Tensor::vector(ambient_lighting(1.0).to_vec()));
        let c = sh_shade(&mut t, a, n, l).unwrap();
        assert!(t.value(c).max_abs_diff(t.value(a)) < 1e-15);
        let zero = t.constant(Tensor::zeros(&[27]));
        let c = sh_shade(&mut t, a, n, zero).unwrap();
        assert!(t.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_match_scalar_basis() {
        let mut t = Tape::new();
        let nv = t.constant(normals());
        let y = sh_basis_rows(&mut t, nv).unwrap();
        for r in 0..4 {
            let n = normals();
            let want = sh_basis([n.at2(r, 0), n.at2(r, 1), n.at2(r, 2)]);
            for (a, b) in t.value(y).row(r).iter().zip(want) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn lighting_and_normal_gradcheck() {
        let light: Vec<f64> = (0..27).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect();
        let albedo = Tensor::matrix(4, 3, (0..12).map(|i| 0.2 + i as f64 / 20.0).collect()).unwrap();
        let err = grad_check_many(
            |t, v| {
                let c = sh_shade(t, v[0], v[1], v[2])?;
                let s = t.mul(c, c)?;
                t.sum(s)
            },
            &[albedo, normals(), Tensor::vector(light)],
            1e-6,
            None,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
