use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::{grad_check_many, Tape, Tensor, Var};

fn config(size: usize) -> RenderConfig {
    RenderConfig {
        image_size: size,
        ..RenderConfig::default()
    }
}

fn quad() -> (Tensor, Arc<Vec<[usize; 3]>>) {
    let p = Tensor::matrix(4, 3, vec![-1., -1., 0., 1., -1., 0., 1., 1., 0., -1., 1., 0.]).unwrap();
    (p, Arc::new(vec![[0, 1, 2], [0, 2, 3]]))
}

/// A bumpy open patch: a 5x5 grid lifted toward the camera in the middle.
fn patch() -> (Tensor, Arc<Vec<[usize; 3]>>) {
    let mut pos = Vec::new();
    for i in 0..5 {
        for j in 0..5 {
            let (x, y) = (j as f64 * 0.5 - 1.0, i as f64 * 0.5 - 1.0);
            pos.extend([x, y, 0.4 * (-(x * x + y * y)).exp() + 0.05 * x * y]);
        }
    }
    let mut tris = Vec::new();
    for i in 0..4 {
        for j in 0..4 {
            let a = i * 5 + j;
            tris.push([a, a + 1, a + 6]);
            tris.push([a, a + 6, a + 5]);
        }
    }
    (Tensor::matrix(25, 3, pos).unwrap(), Arc::new(tris))
}

fn colors(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(n, 3, (0..3 * n).map(|_| rng.random_range(0.1..0.9)).collect()).unwrap()
}

fn lighting(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = ambient_lighting(0.9).to_vec();
    for v in &mut l {
        *v += rng.random_range(-0.2..0.2);
    }
    Tensor::vector(l)
}

fn screen_of(p: &Tensor, pose: &Pose, cfg: &RenderConfig) -> Tensor {
    let pts = transform_points(p, pose, cfg);
    Tensor::matrix(pts.len(), 3, pts.iter().flat_map(|q| cfg.project_point(*q)).collect()).unwrap()
}

#[test]
fn no_triangles_means_background() {
    let b = rasterize(&Tensor::zeros(&[0, 3]), &[], 16).unwrap();
    assert!(b.triangle_id.iter().all(|&t| t == -1));
    assert_eq!(b.covered(), 0);
    assert!(rasterize(&Tensor::zeros(&[0, 3]), &[], 4).is_err());
}

#[test]
fn large_triangle_covers_center_with_unit_barycentrics() {
    let s = Tensor::matrix(3, 3, vec![-40., -40., 5., 60., 8., 5., 8., 60., 5.]).unwrap();
    let b = rasterize(&s, &[[0, 1, 2]], 16).unwrap();
    let center = 8 * 16 + 8;
    assert_eq!(b.triangle_id[center], 0);
    assert!((b.barycentric[center].iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn nearer_triangle_wins_shared_pixels() {
    let cfg = config(16);
    // Same footprint, the second one one unit closer to the camera, listed in both orders.
    let far = [[-1., -1., 0.], [1., -1., 0.], [0., 1., 0.]];
    let near = [[-1., -1., 1.], [1., -1., 1.], [0., 1., 1.]];
    for order in [[far, near], [near, far]] {
        let pts: Vec<f64> = order.iter().flatten().flat_map(|p| cfg.project_point(*p)).collect();
        let s = Tensor::matrix(6, 3, pts).unwrap();
        let b = rasterize(&s, &[[0, 1, 2], [3, 4, 5]], 16).unwrap();
        let near_id = if order[0] == near { 0 } else { 1 };
        let center = 8 * 16 + 8;
        assert_eq!(b.triangle_id[center], near_id);
        assert!((b.depth[center] - 9.0).abs() < 1e-12);
    }
}

#[test]
fn geometry_behind_the_camera_is_not_drawn() {
    let cfg = config(16);
    let (p, tris) = quad();
    let pose = Pose {
        rotation: [0.0; 3],
        translation: [0.0, 0.0, 20.0],
    };
    let b = rasterize(&screen_of(&p, &pose, &cfg), &tris, 16).unwrap();
    assert_eq!(b.covered(), 0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn barycentrics_on_covered_pixels_are_a_partition_of_unity(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 9;
        let pts: Vec<f64> = (0..n).flat_map(|_| [rng.random_range(-4.0..20.0), rng.random_range(-4.0..20.0), rng.random_range(1.0..10.0)]).collect();
        let tris: Vec<[usize; 3]> = (0..3).map(|t| [3 * t, 3 * t + 1, 3 * t + 2]).collect();
        let b = rasterize(&Tensor::matrix(n, 3, pts).unwrap(), &tris, 16).unwrap();
        for (px, &id) in b.triangle_id.iter().enumerate() {
            prop_assert_eq!(b.mask()[px], id >= 0);
            if id >= 0 {
                let w = b.barycentric[px];
                prop_assert!(w.iter().all(|&x| x >= -1e-9));
                prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn constant_attributes_interpolate_to_constant() {
    let cfg = config(16);
    let (p, tris) = quad();
    let mut t = Tape::new();
    let s = t.constant(p);
    let a = t.constant(Tensor::matrix(4, 3, [0.2, 0.5, 0.7].repeat(4)).unwrap());
    let pose = t.constant(Tensor::zeros(&[6]));
    let l = t.constant(Tensor::zeros(&[27]));
    let out = render_image(&mut t, s, a, pose, l, &tris, &cfg, Shading::AlbedoOnly).unwrap();
    assert!(out.buffers.covered() > 100);
    for (px, &m) in out.mask.iter().enumerate() {
        let row = t.value(out.image).row(px);
        if m {
            for (c, want) in [0.2, 0.5, 0.7].iter().enumerate() {
                assert!((row[c] - want).abs() < 1e-12);
            }
        } else {
            assert_eq!(row, [0.0; 3]);
        }
    }
}

#[test]
fn pixel_on_a_vertex_takes_its_attribute() {
    let cfg = config(16);
    // Vertex 0 projects onto the center of pixel (8, 8).
    let h = 0.078125;
    let p = Tensor::matrix(3, 3, vec![h, -h, 0., 2., -h, 0., h, -2., 0.]).unwrap();
    let tris = Arc::new(vec![[0, 1, 2]]);
    let mut t = Tape::new();
    let s = t.constant(p);
    let a = t.constant(Tensor::matrix(3, 3, vec![0.9, 0.1, 0.3, 0., 0., 0., 1., 1., 1.]).unwrap());
    let pose = t.constant(Tensor::zeros(&[6]));
    let l = t.constant(Tensor::zeros(&[27]));
    let out = render_image(&mut t, s, a, pose, l, &tris, &cfg, Shading::AlbedoOnly).unwrap();
    let px = 8 * 16 + 8;
    assert_eq!(out.buffers.triangle_id[px], 0);
    let row = t.value(out.image).row(px);
    for (c, want) in [0.9, 0.1, 0.3].iter().enumerate() {
        assert!((row[c] - want).abs() < 1e-12);
    }
}

#[test]
fn albedo_only_matches_interpolation_and_dc_light_matches_albedo() {
    let cfg = config(24);
    let (p, tris) = patch();
    let alb = colors(25, 3);
    let mut t = Tape::new();
    let s = t.constant(p);
    let a = t.constant(alb);
    let pose = t.constant(Tensor::vector(vec![0.1, -0.2, 0.05, 0.0, 0.1, 0.0]));
    let dc = t.constant(Tensor::vector(ambient_lighting(1.0).to_vec()));
    let plain = render_image(&mut t, s, a, pose, dc, &tris, &cfg, Shading::AlbedoOnly).unwrap();
    let w = barycentric_weights(&mut t, plain.screen, &plain.buffers, &tris);
    let direct = interpolate(&mut t, &plain.buffers, &tris, w, a).unwrap();
    assert_eq!(t.value(plain.image), t.value(direct));
    let lit = render_image(&mut t, s, a, pose, dc, &tris, &cfg, Shading::Lit).unwrap();
    assert!(t.value(lit.image).max_abs_diff(t.value(plain.image)) < 1e-12);
}

#[test]
fn empty_mesh_renders_background() {
    let cfg = config(8);
    let mut t = Tape::new();
    let s = t.constant(Tensor::zeros(&[0, 3]));
    let a = t.constant(Tensor::zeros(&[0, 3]));
    let pose = t.constant(Tensor::zeros(&[6]));
    let l = t.constant(Tensor::zeros(&[27]));
    let out = render_image(&mut t, s, a, pose, l, &Arc::new(vec![]), &cfg, Shading::Lit).unwrap();
    assert!(t.value(out.image).data().iter().all(|&v| v == 0.0));
    assert!(out.mask.iter().all(|&m| !m));
}

#[test]
fn vertex_relabeling_leaves_the_image_unchanged() {
    let cfg = config(24);
    let (p, tris) = patch();
    let alb = colors(25, 5);
    let perm: Vec<usize> = (0..25).map(|i| (i * 7) % 25).collect();
    let mut inv = vec![0; 25];
    for (i, &v) in perm.iter().enumerate() {
        inv[v] = i;
    }
    let pick = |t: &Tensor| Tensor::matrix(25, 3, perm.iter().flat_map(|&v| t.row(v).to_vec()).collect()).unwrap();
    let tris2: Vec<[usize; 3]> = tris.iter().map(|tr| tr.map(|v| inv[v])).collect();
    let run = |p: Tensor, a: Tensor, tr: Arc<Vec<[usize; 3]>>| {
        let mut t = Tape::no_grad();
        let v = [t.constant(p), t.constant(a), t.constant(Tensor::vector(vec![0.2, 0.1, 0.0, 0.0, 0.0, 0.3])), t.constant(lighting(1))];
        let out = render_image(&mut t, v[0], v[1], v[2], v[3], &tr, &cfg, Shading::Lit).unwrap();
        t.value(out.image).clone()
    };
    let a = run(p.clone(), alb.clone(), tris);
    let b = run(pick(&p), pick(&alb), Arc::new(tris2));
    assert!(a.max_abs_diff(&b) < 1e-12);
}

/// Pixels whose 4-neighbourhood is fully covered.
fn interior(mask: &[bool], size: usize) -> Vec<f64> {
    (0..size * size)
        .map(|px| {
            let (i, j) = (px / size, px % size);
            let ok = mask[px]
                && i > 0
                && j > 0
                && i + 1 < size
                && j + 1 < size
                && mask[px - 1]
                && mask[px + 1]
                && mask[px - size]
                && mask[px + size];
            f64::from(u8::from(ok))
        })
        .collect()
}

fn weighted_render(t: &mut Tape, v: &[Var], tris: &Arc<Vec<[usize; 3]>>, cfg: &RenderConfig, weights: &Tensor) -> crate::Result<Var> {
    let out = render_image(t, v[0], v[1], v[2], v[3], tris, cfg, Shading::Lit)?;
    let w = t.constant(weights.clone());
    let y = t.mul(out.image, w)?;
    t.sum(y)
}

#[test]
fn render_gradcheck_wrt_albedo_lighting_pose_and_shape() {
    let cfg = config(24);
    let (p, tris) = patch();
    let alb = colors(25, 8);
    let pose = Tensor::vector(vec![0.15, -0.1, 0.05, 0.05, -0.02, 0.3]);
    let light = lighting(4);
    let mask = {
        let mut t = Tape::no_grad();
        let v = [t.constant(p.clone()), t.constant(alb.clone()), t.constant(pose.clone()), t.constant(light.clone())];
        render_image(&mut t, v[0], v[1], v[2], v[3], &tris, &cfg, Shading::Lit).unwrap().mask
    };
    let inner = interior(&mask, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let weights = Tensor::matrix(576, 3, inner.iter().flat_map(|&m| [m * rng.random_range(0.5..1.5), m, m * 0.7]).collect()).unwrap();
    let err = grad_check_many(
        |t, v| weighted_render(t, v, &tris, &cfg, &weights),
        &[p, alb, pose, light],
        1e-6,
        None,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn mean_pixel_gradcheck_wrt_albedo() {
    let cfg = config(16);
    let (p, tris) = quad();
    let err = grad_check_many(
        |t, v| {
            let s = t.constant(p.clone());
            let pose = t.constant(Tensor::vector(vec![0.0, 0.2, 0.0, 0.0, 0.0, 0.0]));
            let l = t.constant(lighting(2));
            let out = render_image(t, s, v[0], pose, l, &tris, &cfg, Shading::Lit)?;
            t.mean(out.image)
        },
        &[colors(4, 1)],
        1e-6,
        None,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn projected_colors_of_a_constant_image_are_constant() {
    let cfg = config(24);
    let (p, tris) = patch();
    let img = Tensor::matrix(576, 3, [0.3, 0.6, 0.9].repeat(576)).unwrap();
    let pose = Pose::default();
    let (tp, valid) = project_vertex_colors(&img, &p, &pose, &tris, &cfg).unwrap();
    assert!(valid.iter().filter(|&&v| v).count() > 10);
    for (i, &ok) in valid.iter().enumerate() {
        let want = if ok { [0.3, 0.6, 0.9] } else { [0.0; 3] };
        for c in 0..3 {
            assert!((tp.at2(i, c) - want[c]).abs() < 1e-12);
        }
    }
    // Turned away from the camera the patch is invalid everywhere.
    let back = Pose {
        rotation: [0.0, std::f64::consts::PI, 0.0],
        translation: [0.0; 3],
    };
    let (_, valid) = project_vertex_colors(&img, &p, &back, &tris, &cfg).unwrap();
    assert!(valid.iter().all(|&v| !v));
}

#[test]
fn projection_onto_pixel_centers_and_midpoints() {
    let cfg = config(16);
    let img = Tensor::matrix(256, 3, (0..768).map(|i| (i % 97) as f64 / 97.0).collect()).unwrap();
    let h = 0.078125;
    // Vertex 0 on the center of pixel (8, 8); vertex 1 halfway between (8, 8) and (8, 9).
    let p = Tensor::matrix(3, 3, vec![h, -h, 0., 2.0 * h, -h, 0., h, 3.0, 0.]).unwrap();
    let tris = [[0usize, 1, 2]];
    let (tp, valid) = project_vertex_colors(&img, &p, &Pose::default(), &tris, &cfg).unwrap();
    assert!(valid[0] && valid[1]);
    let at = |px: usize| img.row(px).to_vec();
    for c in 0..3 {
        assert!((tp.at2(0, c) - at(8 * 16 + 8)[c]).abs() < 1e-12);
        let mid = 0.5 * (at(8 * 16 + 8)[c] + at(8 * 16 + 9)[c]);
        assert!((tp.at2(1, c) - mid).abs() < 1e-12);
    }
    assert!(!valid[2], "out of frame");
}
