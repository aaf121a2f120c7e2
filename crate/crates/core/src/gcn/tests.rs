use std::sync::{Arc, OnceLock};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diff::{grad_check_many, SparseMatrix, Tape, Tensor};
use crate::error::Error;
use crate::mesh::{
    build_adjacency, icosphere, max_eigenvalue, normalized_laplacian, scaled_laplacian, LambdaMax, MeshHierarchy,
    MeshTopology,
};

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn small_graph() -> (Arc<SparseMatrix>, nalgebra::DMatrix<f64>) {
    // Ten vertices: a ring plus two chords, one triangle fan.
    let mut tris = Vec::new();
    for i in 0..10 {
        tris.push([i, (i + 1) % 10, (i + 1) % 10]);
    }
    tris.push([0, 3, 6]);
    tris.push([2, 7, 7]);
    let l = normalized_laplacian(&build_adjacency(&tris, 10).unwrap());
    let lm = max_eigenvalue(&l, 1e-13).unwrap();
    let s = scaled_laplacian(&l, lm).unwrap();
    let dense = nalgebra::DMatrix::from_fn(10, 10, |i, j| s.get(i, j));
    (Arc::new(s), dense)
}

fn hierarchy() -> &'static MeshHierarchy {
    static H: OnceLock<MeshHierarchy> = OnceLock::new();
    H.get_or_init(|| {
        let (pos, tris) = icosphere(3);
        let topo = MeshTopology::new(pos.len(), tris).unwrap();
        MeshHierarchy::build(&topo, &pos, 4, 0.25, LambdaMax::default()).unwrap()
    })
}

fn small_config() -> GcnConfig {
    GcnConfig {
        embedding_dim: 8,
        decoder_channels: vec![6, 5, 4, 3],
        refiner_width: 4,
        refiner_blocks: 2,
        cheb_order: 6,
        discriminator_channels: vec![2, 3, 3, 2, 2, 2],
    }
}

#[test]
fn cheb_conv_matches_spectral_oracle() {
    let (l, dense) = small_graph();
    let eig = nalgebra::SymmetricEigen::new(dense);
    let (k, fi, fo) = (5, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&mut rng, &[10, fi], 1.0);
    let theta = random(&mut rng, &[k, fi, fo], 1.0);
    let mut t = Tape::new();
    let (xv, th) = (t.constant(x.clone()), t.constant(theta.clone()));
    let b = t.constant(Tensor::zeros(&[fo]));
    let y = cheb_conv(&mut t, &l, xv, th, b).unwrap();
    let u = &eig.eigenvectors;
    for j in 0..fo {
        let mut want = nalgebra::DVector::<f64>::zeros(10);
        for i in 0..fi {
            // g(lambda) = sum_k theta[k,i,j] T_k(lambda) via the closed form cos(k acos).
            let g = nalgebra::DVector::from_fn(10, |m, _| {
                let lam = eig.eigenvalues[m].clamp(-1.0, 1.0);
                (0..k).map(|kk| theta.data()[(kk * fi + i) * fo + j] * (kk as f64 * lam.acos()).cos()).sum::<f64>()
            });
            let xi = nalgebra::DVector::from_fn(10, |r, _| x.at2(r, i));
            want += u * nalgebra::DMatrix::from_diagonal(&g) * u.transpose() * xi;
        }
        let scale = want.amax().max(1e-300);
        for r in 0..10 {
            let got = t.value(y).at2(r, j);
            assert!((got - want[r]).abs() / scale < 1e-10, "{got} vs {}", want[r]);
        }
    }
}

#[test]
fn cheb_conv_is_linear_without_bias() {
    let (l, _) = small_graph();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta = random(&mut rng, &[4, 3, 2], 1.0);
    let (x, y) = (random(&mut rng, &[10, 3], 1.0), random(&mut rng, &[10, 3], 1.0));
    let (a, b) = (1.7, -0.4);
    let run = |input: &Tensor| {
        let mut t = Tape::no_grad();
        let xv = t.constant(input.clone());
        let th = t.constant(theta.clone());
        let bias = t.constant(Tensor::zeros(&[2]));
        let out = cheb_conv(&mut t, &l, xv, th, bias).unwrap();
        t.value(out).clone()
    };
    let combo = x.zip_map(&y, |p, q| a * p + b * q);
    let want = run(&x).zip_map(&run(&y), |p, q| a * p + b * q);
    assert!(run(&combo).max_abs_diff(&want) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn cheb_conv_is_permutation_equivariant(seed in 0u64..1000) {
        let (l, _) = small_graph();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..10).collect();
        for i in (1..10).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let x = random(&mut rng, &[10, 2], 1.0);
        let theta = random(&mut rng, &[6, 2, 2], 1.0);
        let bias = random(&mut rng, &[2], 1.0);
        // Vertex i of the relabeled graph is vertex perm[i] of the original.
        let trips: Vec<(usize, usize, f64)> = {
            let inv: Vec<usize> = { let mut v = vec![0; 10]; for (i, &p) in perm.iter().enumerate() { v[p] = i; } v };
            l.triplets().into_iter().map(|(r, c, v)| (inv[r], inv[c], v)).collect()
        };
        let lp = Arc::new(SparseMatrix::from_triplets(10, 10, trips).unwrap());
        let xp = Tensor::matrix(10, 2, perm.iter().flat_map(|&p| x.row(p).to_vec()).collect()).unwrap();
        let run = |lap: &Arc<SparseMatrix>, input: &Tensor| {
            let mut t = Tape::no_grad();
            let v = [t.constant(input.clone()), t.constant(theta.clone()), t.constant(bias.clone())];
            let out = cheb_conv(&mut t, lap, v[0], v[1], v[2]).unwrap();
            t.value(out).clone()
        };
        let y = run(&l, &x);
        let yp = run(&lp, &xp);
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..2 {
                prop_assert!((yp.at2(i, c) - y.at2(p, c)).abs() < 1e-12);
            }
        }
    }
}

fn bound_block(block: &ResidualBlock, hierarchy: &MeshHierarchy, seed: u64, zero: bool) -> ParamStore {
    let mut store = ParamStore::new();
    let spec = NetworkSpec {
        name: "n".into(),
        layers: vec![LayerSpec::Residual(block.clone())],
    };
    spec.init(hierarchy, &mut store, &mut ChaCha8Rng::seed_from_u64(seed));
    if zero {
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            let t = store.get_mut(&n).unwrap();
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    store
}

#[test]
fn zero_residual_block_is_identity() {
    let h = hierarchy();
    let block = ResidualBlock::new("b", 2, 6, 3, 3);
    assert!(block.shortcut.is_none());
    let store = bound_block(&block, h, 1, true);
    let mut t = Tape::new();
    let p = store.bind(&mut t, false).scoped("n");
    let x = t.constant(random(&mut ChaCha8Rng::seed_from_u64(2), &[h.levels[2].vertex_count(), 3], 1.0));
    let y = block.forward(&mut t, &p, h, x).unwrap();
    assert_eq!(t.value(y), t.value(x));
}

#[test]
fn residual_parameter_count_sums_layers() {
    let h = hierarchy();
    let block = ResidualBlock::new("b", 1, 6, 4, 7);
    let want = block.conv1.param_count() + 7 + block.conv2.param_count() + block.shortcut.as_ref().unwrap().param_count();
    assert_eq!(want, 6 * 4 * 7 + 7 + 7 + 6 * 7 * 7 + 7 + 4 * 7 + 7);
    let store = bound_block(&block, h, 1, false);
    assert_eq!(store.count("n."), want);
}

#[test]
fn residual_block_gradcheck() {
    let h = hierarchy();
    let block = ResidualBlock::new("b", 3, 6, 2, 3);
    let store = bound_block(&block, h, 4, false);
    let n = h.levels[3].vertex_count();
    let x = random(&mut ChaCha8Rng::seed_from_u64(9), &[n, 2], 1.0);
    let names: Vec<String> = store.names().cloned().collect();
    let mut points = vec![x];
    points.extend(names.iter().map(|k| store.get(k).unwrap().clone()));
    let err = grad_check_many(
        |t, v| {
            let p = bind_vars(&names, &v[1..]).scoped("n");
            let y = block.forward(t, &p, h, v[0])?;
            let sq = t.mul(y, y)?;
            t.sum(sq)
        },
        &points,
        1e-6,
        None,
    )
    .unwrap();
    assert!(err < 1e-5, "{err}");
}

fn bind_vars(names: &[String], vars: &[crate::diff::Var]) -> BoundParams {
    BoundParams::from_pairs(names.iter().cloned().zip(vars.iter().copied()))
}

#[test]
fn decoder_shapes_constant_output_and_level_check() {
    let h = hierarchy();
    let nets = TextureNets::new(GcnConfig::default(), h).unwrap();
    let mut store = ParamStore::new();
    nets.init(h, &mut store, 7);
    store.get_mut("decoder.out.theta").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    store.insert("decoder.out.bias", Tensor::vector(vec![0.25, -0.5, 0.75]));
    let mut t = Tape::no_grad();
    let p = store.bind(&mut t, false);
    let e = t.constant(Tensor::zeros(&[128]));
    let y = nets.decoder_forward(&mut t, &p, h, e).unwrap();
    assert_eq!(t.shape(y), [642, 3]);
    for r in 0..642 {
        assert_eq!(t.value(y).row(r), [0.25, -0.5, 0.75]);
    }
    let mut cfg = GcnConfig::default();
    cfg.decoder_channels = vec![8, 8, 8];
    assert!(matches!(TextureNets::new(cfg, h), Err(Error::Config(_))));
    let bad = t.constant(Tensor::zeros(&[64]));
    assert!(nets.decoder_forward(&mut t, &p, h, bad).is_err());
}

#[test]
fn hierarchy_matches_icosphere_scale() {
    assert_eq!(hierarchy().vertex_counts(), vec![642, 161, 41, 11]);
}

fn store_for(nets: &TextureNets, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    nets.init(hierarchy(), &mut store, seed);
    // Non-zero biases so every parameter path is exercised.
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        if n.ends_with("bias") || n.ends_with(".b") {
            store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
    }
    store
}

/// Gradient check with respect to the listed inputs and named parameters.
fn check_net<F>(store: &ParamStore, check: &[&str], inputs: Vec<Tensor>, f: F) -> f64
where
    F: Fn(&mut Tape, &BoundParams, &[crate::diff::Var]) -> crate::Result<crate::diff::Var>,
{
    let n_in = inputs.len();
    let mut points = inputs;
    points.extend(check.iter().map(|k| store.get(k).unwrap().clone()));
    grad_check_many(
        |t, v| {
            let mut p = store.bind(t, false);
            for (k, &var) in check.iter().zip(&v[n_in..]) {
                p.set(k, var);
            }
            let y = f(t, &p, &v[..n_in])?;
            let w = t.sin(y)?;
            t.sum(w)
        },
        &points,
        1e-6,
        None,
    )
    .unwrap()
}

#[test]
fn decoder_gradcheck_on_four_level_hierarchy() {
    let h = hierarchy();
    let nets = TextureNets::new(small_config(), h).unwrap();
    let store = store_for(&nets, 11);
    let e = random(&mut ChaCha8Rng::seed_from_u64(12), &[8], 1.0);
    let err = check_net(
        &store,
        &["decoder.out.bias", "decoder.block0.act_bias", "decoder.up1.bias", "decoder.block3.conv2.bias"],
        vec![e],
        |t, p, v| nets.decoder_forward(t, p, h, v[0]),
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn refiner_shapes_bias_field_and_gradcheck() {
    let h = hierarchy();
    let nets = TextureNets::new(small_config(), h).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tt = random(&mut rng, &[642, 3], 1.0);
    let tp = random(&mut rng, &[642, 3], 1.0);

    let mut zero = ParamStore::new();
    nets.init(h, &mut zero, 1);
    let names: Vec<String> = zero.names().cloned().collect();
    for n in &names {
        zero.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    zero.insert("refiner.up.bias", Tensor::vector(vec![1., 2., 3., 4.]));
    let mut t = Tape::no_grad();
    let p = zero.bind(&mut t, false);
    let (a, b) = (t.constant(tt.clone()), t.constant(tp.clone()));
    let y = nets.refiner_forward(&mut t, &p, h, a, b).unwrap();
    assert_eq!(t.shape(y), [642, 4]);
    assert!((0..642).all(|r| t.value(y).row(r) == [1., 2., 3., 4.]));
    let short = t.constant(Tensor::zeros(&[641, 3]));
    assert!(nets.refiner_forward(&mut t, &p, h, short, b).is_err());

    let store = store_for(&nets, 21);
    let err = check_net(
        &store,
        &["refiner.up.bias", "refiner.block0.shortcut.theta"],
        vec![tt, tp],
        |t, p, v| nets.refiner_forward(t, p, h, v[0], v[1]),
    );
    assert!(err < 1e-4, "{err}");
}

#[test]
fn combiner_bounds_constant_and_gradcheck() {
    let h = hierarchy();
    let nets = TextureNets::new(small_config(), h).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let dec = random(&mut rng, &[642, 3], 3.0);
    let rf = random(&mut rng, &[642, 4], 3.0);

    let mut store = store_for(&nets, 5);
    let mut t = Tape::no_grad();
    let p = store.bind(&mut t, false);
    let (a, b) = (t.constant(dec.clone()), t.constant(rf.clone()));
    let y = nets.combiner_forward(&mut t, &p, h, a, b).unwrap();
    assert!(t.value(y).data().iter().all(|v| v.abs() < 1.0));
    assert!(nets.combiner_forward(&mut t, &p, h, b, a).is_err());

    store.get_mut("combiner.conv.theta").unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    store.insert("combiner.conv.bias", Tensor::vector(vec![0.3, -2.0, 0.0]));
    let mut t = Tape::no_grad();
    let p = store.bind(&mut t, false);
    let (a, b) = (t.constant(dec.clone()), t.constant(rf.clone()));
    let y = nets.combiner_forward(&mut t, &p, h, a, b).unwrap();
    let want = [0.3f64.tanh(), (-2.0f64).tanh(), 0.0];
    assert!((0..642).all(|r| t.value(y).row(r) == want));

    let store = store_for(&nets, 6);
    let err = check_net(&store, &["combiner.conv.theta", "combiner.conv.bias"], vec![dec.map(|v| v * 0.1), rf.map(|v| v * 0.1)], |t, p, v| {
        nets.combiner_forward(t, p, h, v[0], v[1])
    });
    assert!(err < 1e-5, "{err}");
}

#[test]
fn parameter_store_round_trips_through_checkpoint() {
    let h = hierarchy();
    let nets = TextureNets::new(GcnConfig::default(), h).unwrap();
    let store = store_for(&nets, 2);
    assert_eq!(store.count(""), nets.param_count(h));
    assert_eq!(read_checkpoint(&write_checkpoint(&store)).unwrap(), store);
}

#[test]
fn initialization_is_seeded() {
    let h = hierarchy();
    let nets = TextureNets::new(small_config(), h).unwrap();
    let (mut a, mut b, mut c) = (ParamStore::new(), ParamStore::new(), ParamStore::new());
    nets.init(h, &mut a, 1);
    nets.init(h, &mut b, 1);
    nets.init(h, &mut c, 2);
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn discriminator_constant_score_and_size_contract() {
    let d = Discriminator::new(&GcnConfig::default()).unwrap();
    let mut store = ParamStore::new();
    d.init(&mut store, 3);
    let names: Vec<String> = store.names().cloned().collect();
    for n in &names {
        store.get_mut(n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    store.insert("disc.dense.b", Tensor::vector(vec![-1.25]));
    let mut t = Tape::no_grad();
    let p = store.bind(&mut t, false);
    let img = t.constant(random(&mut ChaCha8Rng::seed_from_u64(1), &[64 * 64, 3], 1.0));
    let s = d.forward(&mut t, &p, img, 64, 64).unwrap();
    assert_eq!(t.shape(s), [] as [usize; 0]);
    assert_eq!(t.value(s).item(), -1.25);
    let bad = t.constant(Tensor::zeros(&[48 * 48, 3]));
    assert!(d.forward(&mut t, &p, bad, 48, 48).is_err());
}

#[test]
fn discriminator_pools_64_to_one_pixel() {
    let d = Discriminator::new(&small_config()).unwrap();
    let mut store = ParamStore::new();
    d.init(&mut store, 3);
    let mut t = Tape::no_grad();
    let p = store.bind(&mut t, false);
    let img = t.constant(random(&mut ChaCha8Rng::seed_from_u64(1), &[64 * 64, 3], 1.0));
    let f = d.features(&mut t, &p, img, 64, 64).unwrap();
    assert_eq!(t.shape(f), [2, 1, 1]);
}

#[test]
fn discriminator_gradcheck_wrt_image_directions() {
    // The image enters through a few random directions so the finite
    // difference sweep stays small; each checks a directional derivative.
    let d = Discriminator::new(&small_config()).unwrap();
    let mut store = ParamStore::new();
    d.init(&mut store, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let base = random(&mut rng, &[64 * 64, 3], 1.0);
    let dirs = random(&mut rng, &[64 * 64 * 3, 6], 1.0);
    let coeffs = random(&mut rng, &[6, 1], 0.1);
    let err = grad_check_many(
        |t, v| {
            let p = store.bind(t, false);
            let b = t.constant(base.clone());
            let m = t.constant(dirs.clone());
            let delta = t.matmul(m, v[0])?;
            let delta = t.reshape(delta, &[64 * 64, 3])?;
            let img = t.add(b, delta)?;
            d.forward(t, &p, img, 64, 64)
        },
        &[coeffs],
        1e-6,
        None,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
    let params: Vec<String> = store.names().filter(|n| n.starts_with("disc.conv5") || n.starts_with("disc.dense")).cloned().collect();
    let names: Vec<&str> = params.iter().map(String::as_str).collect();
    let err = check_net(&store, &names, vec![], |t, p, _| {
        let img = t.constant(base.clone());
        d.forward(t, p, img, 64, 64)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn forwards_are_deterministic() {
    let h = hierarchy();
    let nets = TextureNets::new(small_config(), h).unwrap();
    let store = store_for(&nets, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (e, a, b) = (random(&mut rng, &[8], 1.0), random(&mut rng, &[642, 3], 1.0), random(&mut rng, &[642, 3], 1.0));
    let run = || {
        let mut t = Tape::new();
        let p = store.bind(&mut t, true);
        let v = [t.constant(e.clone()), t.constant(a.clone()), t.constant(b.clone())];
        let y = nets.forward(&mut t, &p, h, v[0], v[1], v[2]).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run(), run());
}
