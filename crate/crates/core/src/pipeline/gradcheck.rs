use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::dataset::synth_dataset;
use super::setup::Setup;
use super::train::{generator_objective, is_generator, TrainData, TrainState};
use crate::diff::{grad_check_many, SparseMatrix, Tape, Tensor, Var, VjpFault};
use crate::error::Result;
use crate::gcn::{cheb_conv, BoundParams, Discriminator, GcnConfig, ParamStore, ResidualBlock, TextureNets};
use crate::losses::{
    adversarial_loss, generator_adversarial_loss, identity_loss, pixel_loss, vertex_loss, vertex_loss_masked,
    MaskPair, ToyEmbedder,
};
use crate::mesh::{icosphere, LambdaMax, MeshHierarchy, MeshTopology};
use crate::morphable::{synth_model, BasisDims};
use crate::render::{ambient_lighting, render_image, RenderConfig, Shading};

/// One component's finite-difference result.
#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub component: &'static str,
    pub max_rel_error: f64,
    pub threshold: f64,
}

impl GradRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.threshold
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub rows: Vec<GradRow>,
}

impl GradReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(GradRow::passed)
    }

    /// One `gradcheck component=... max_rel_error=... threshold=... status=...`
    /// line per component.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for r in &self.rows {
            let _ = writeln!(
                s,
                "gradcheck component={} max_rel_error={:e} threshold={:e} status={}",
                r.component,
                r.max_rel_error,
                r.threshold,
                if r.passed() { "pass" } else { "fail" }
            );
        }
        s
    }
}

/// Every differentiable component the suite checks, in report order.
pub const COMPONENTS: &[&str] = &[
    "cheb_conv",
    "residual_block",
    "decoder",
    "refiner",
    "combiner",
    "discriminator",
    "render_albedo",
    "render_lighting",
    "render_pose",
    "render_shape",
    "pixel_loss",
    "identity_loss",
    "vertex_loss",
    "adversarial_generator",
    "gradient_penalty",
    "total_loss",
];

const STEP: f64 = 1e-6;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// Scalar read-out `sum(w * sin(y))` with fixed random weights, so no
/// gradient entry cancels by symmetry.
fn readout(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(&mut rng, tape.shape(y), 0.5, 1.5);
    let s = tape.sin(y)?;
    let w = tape.constant(w);
    let p = tape.mul(s, w)?;
    tape.sum(p)
}

struct Fixture {
    hierarchy: MeshHierarchy,
    nets: TextureNets,
    critic: Discriminator,
    store: ParamStore,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let (verts, tris) = icosphere(1);
    let topo = MeshTopology::new(verts.len(), tris)?;
    let hierarchy = MeshHierarchy::build(&topo, &verts, 2, 0.25, LambdaMax::default())?;
    let config = toy_gcn();
    let nets = TextureNets::new(config.clone(), &hierarchy)?;
    let critic = Discriminator::new(&config)?;
    let mut store = ParamStore::new();
    nets.init(&hierarchy, &mut store, seed);
    critic.init(&mut store, seed + 1);
    Ok(Fixture {
        hierarchy,
        nets,
        critic,
        store,
    })
}

fn toy_gcn() -> GcnConfig {
    GcnConfig {
        embedding_dim: 4,
        decoder_channels: vec![3, 2],
        refiner_width: 2,
        refiner_blocks: 1,
        cheb_order: 3,
        discriminator_channels: vec![2; 6],
    }
}

/// Gradient check over selected parameters plus extra inputs. The function
/// receives the parameters (checked ones rebound to the perturbed handles)
/// and the input handles.
fn check_params<F>(store: &ParamStore, names: &[&str], inputs: Vec<Tensor>, fault: Option<VjpFault>, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &BoundParams, &[Var]) -> Result<Var>,
{
    let n_in = inputs.len();
    let mut points = inputs;
    for n in names {
        points.push(store.get(n).cloned().unwrap_or_else(|| panic!("fixture lacks `{n}`")));
    }
    grad_check_many(
        |t, v| {
            let mut p = store.bind(t, false);
            for (k, &var) in names.iter().zip(&v[n_in..]) {
                p.set(k, var);
            }
            f(t, &p, &v[..n_in])
        },
        &points,
        STEP,
        fault,
    )
}

fn row(component: &'static str, threshold: f64, err: Result<f64>) -> GradRow {
    GradRow {
        component,
        max_rel_error: err.unwrap_or(f64::INFINITY),
        threshold,
    }
}

fn random_laplacian(rng: &mut ChaCha8Rng, n: usize) -> Result<Arc<SparseMatrix>> {
    let mut trips = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(0.4) {
                trips.push((i, j, rng.random_range(-0.5..0.5)));
            }
        }
        trips.push((i, i, rng.random_range(-0.5..0.5)));
    }
    Ok(Arc::new(SparseMatrix::from_triplets(n, n, trips)?))
}

/// Pixels whose 4-neighborhood is covered; perturbations used by the check
/// never move the silhouette across them.
fn interior(mask: &[bool], size: usize) -> Vec<f64> {
    (0..size * size)
        .map(|px| {
            let (i, j) = (px / size, px % size);
            let ok = i > 0
                && j > 0
                && i + 1 < size
                && j + 1 < size
                && [px, px - 1, px + 1, px - size, px + size].iter().all(|&q| mask[q]);
            f64::from(u8::from(ok))
        })
        .collect()
}

/// Finite-difference report for every component in [`COMPONENTS`] at toy
/// scale. `fault` scales one operation's vector-Jacobian product, which makes
/// every component using it fail (a negative control).
pub fn gradcheck_suite(seed: u64, fault: Option<VjpFault>) -> Result<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fx = fixture(seed)?;
    let h = &fx.hierarchy;
    let n0 = h.finest().vertex_count();
    let mut rows = Vec::new();

    let lap = random_laplacian(&mut rng, 7)?;
    let x = random(&mut rng, &[7, 2], -1.0, 1.0);
    let theta = random(&mut rng, &[3, 2, 2], -1.0, 1.0);
    let bias = random(&mut rng, &[2], -1.0, 1.0);
    rows.push(row(
        "cheb_conv",
        1e-6,
        grad_check_many(
            |t, v| {
                let y = cheb_conv(t, &lap, v[0], v[1], v[2])?;
                readout(t, y, 1)
            },
            &[x, theta, bias],
            STEP,
            fault.clone(),
        ),
    ));

    let block = ResidualBlock::new("res", 0, 3, 2, 3);
    let mut bstore = ParamStore::new();
    for (name, shape, fan_in) in block.param_shapes() {
        bstore.init_uniform(&name, &shape, fan_in.max(2), &mut rng);
    }
    let names: Vec<String> = bstore.names().cloned().collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let xb = random(&mut rng, &[n0, 2], -1.0, 1.0);
    rows.push(row(
        "residual_block",
        1e-5,
        check_params(&bstore, &names, vec![xb], fault.clone(), |t, p, v| {
            let y = block.forward(t, p, h, v[0])?;
            readout(t, y, 2)
        }),
    ));

    let emb = random(&mut rng, &[4], -1.0, 1.0);
    rows.push(row(
        "decoder",
        1e-5,
        check_params(
            &fx.store,
            &["decoder.dense.b", "decoder.block0.act_bias", "decoder.up0.bias", "decoder.out.theta"],
            vec![emb],
            fault.clone(),
            |t, p, v| {
                let y = fx.nets.decoder_forward(t, p, h, v[0])?;
                readout(t, y, 3)
            },
        ),
    ));

    let tt = random(&mut rng, &[n0, 3], 0.0, 1.0);
    let tp = random(&mut rng, &[n0, 3], 0.0, 1.0);
    rows.push(row(
        "refiner",
        1e-5,
        check_params(
            &fx.store,
            &["refiner.block0.conv1.bias", "refiner.block0.act_bias", "refiner.up.theta"],
            vec![tt.clone(), tp.clone()],
            fault.clone(),
            |t, p, v| {
                let y = fx.nets.refiner_forward(t, p, h, v[0], v[1])?;
                readout(t, y, 4)
            },
        ),
    ));

    let dec = random(&mut rng, &[n0, 3], -1.0, 1.0);
    let refined = random(&mut rng, &[n0, 2], -1.0, 1.0);
    rows.push(row(
        "combiner",
        1e-5,
        check_params(
            &fx.store,
            &["combiner.conv.theta", "combiner.conv.bias"],
            vec![dec, refined],
            fault.clone(),
            |t, p, v| {
                let y = fx.nets.combiner_forward(t, p, h, v[0], v[1])?;
                readout(t, y, 5)
            },
        ),
    ));

    let image = random(&mut rng, &[64 * 64, 3], 0.0, 1.0);
    rows.push(row(
        "discriminator",
        1e-5,
        check_params(
            &fx.store,
            &["disc.conv0.b", "disc.conv3.w", "disc.conv5.b", "disc.dense.w", "disc.dense.b"],
            vec![],
            fault.clone(),
            |t, p, _| {
                let x = t.constant(image.clone());
                fx.critic.forward(t, p, x, 64, 64)
            },
        ),
    ));

    rows.extend(render_rows(&mut rng, fault.clone())?);
    rows.extend(loss_rows(&mut rng, &fx, fault.clone())?);
    rows.push(row("total_loss", 1e-4, total_loss_check(seed, fault)));
    Ok(GradReport { rows })
}

fn render_rows(rng: &mut ChaCha8Rng, fault: Option<VjpFault>) -> Result<Vec<GradRow>> {
    let cfg = RenderConfig {
        image_size: 24,
        ..RenderConfig::default()
    };
    let (verts, tris) = icosphere(1);
    let n = verts.len();
    let shape = Tensor::from_parts(vec![n, 3], verts.iter().flatten().copied().collect());
    let tris = Arc::new(tris);
    let albedo = random(rng, &[n, 3], 0.2, 0.9);
    let pose = Tensor::vector(vec![0.2, -0.15, 0.05, 0.03, -0.02, 0.5]);
    let mut light = ambient_lighting(0.9).to_vec();
    light.iter_mut().for_each(|v| *v += rng.random_range(-0.2..0.2));
    let light = Tensor::vector(light);
    let mask = {
        let mut t = Tape::no_grad();
        let v = [shape.clone(), albedo.clone(), pose.clone(), light.clone()].map(|x| t.constant(x));
        render_image(&mut t, v[0], v[1], v[2], v[3], &tris, &cfg, Shading::Lit)?.mask
    };
    let inner = interior(&mask, cfg.image_size);
    let weights = Tensor::from_parts(
        vec![inner.len(), 3],
        inner.iter().flat_map(|&m| [m * rng.random_range(0.5..1.5), m, 0.7 * m]).collect(),
    );
    let base = [shape, albedo, pose, light];
    let mut out = Vec::new();
    for (which, name) in [(1, "render_albedo"), (3, "render_lighting"), (2, "render_pose"), (0, "render_shape")] {
        let err = grad_check_many(
            |t, v| {
                let mut vars = base.clone().map(|x| t.constant(x));
                vars[which] = v[0];
                let img = render_image(t, vars[0], vars[1], vars[2], vars[3], &tris, &cfg, Shading::Lit)?.image;
                let w = t.constant(weights.clone());
                let y = t.mul(img, w)?;
                t.sum(y)
            },
            std::slice::from_ref(&base[which]),
            STEP,
            fault.clone(),
        );
        out.push(row(name, 1e-4, err));
    }
    Ok(out)
}

fn loss_rows(rng: &mut ChaCha8Rng, fx: &Fixture, fault: Option<VjpFault>) -> Result<Vec<GradRow>> {
    let size = 16;
    let p = size * size;
    let x = random(rng, &[p, 3], 0.0, 1.0);
    let r = random(rng, &[p, 3], 0.0, 1.0);
    let face: Vec<bool> = (0..p).map(|i| i % 5 != 0).collect();
    let proj: Vec<bool> = (0..p).map(|i| i % 7 != 0).collect();
    let masks = MaskPair::new(face, proj)?;
    let embed = ToyEmbedder::new(size, 6, 3)?;
    let a = random(rng, &[20, 3], 0.0, 1.0);
    let b = random(rng, &[20, 3], 0.0, 1.0);
    let valid: Vec<bool> = (0..20).map(|i| i % 3 != 0).collect();

    let mut out = vec![
        row(
            "pixel_loss",
            1e-6,
            grad_check_many(|t, v| pixel_loss(t, v[0], v[1], &masks), &[x.clone(), r.clone()], STEP, fault.clone()),
        ),
        row(
            "identity_loss",
            1e-6,
            grad_check_many(|t, v| identity_loss(t, v[0], v[1], &embed), &[x, r], STEP, fault.clone()),
        ),
        row(
            "vertex_loss",
            1e-6,
            grad_check_many(
                |t, v| {
                    let l = vertex_loss(t, v[0], v[1])?;
                    let m = vertex_loss_masked(t, v[0], v[1], &valid)?;
                    t.add(l, m)
                },
                &[a, b],
                STEP,
                fault.clone(),
            ),
        ),
    ];

    let real = random(rng, &[64 * 64, 3], 0.0, 1.0);
    let fake = random(rng, &[64 * 64, 3], 0.0, 1.0);
    let critic_names = ["disc.conv0.b", "disc.conv5.w", "disc.dense.w", "disc.dense.b"];
    out.push(row(
        "adversarial_generator",
        1e-5,
        check_params(&fx.store, &critic_names, vec![], fault.clone(), |t, p, _| {
            let critic = |t: &mut Tape, x: Var| fx.critic.forward(t, p, x, 64, 64);
            let f = t.constant(fake.clone());
            generator_adversarial_loss(t, &critic, &[f])
        }),
    ));
    out.push(row(
        "gradient_penalty",
        1e-4,
        check_params(&fx.store, &critic_names, vec![], fault, |t, p, _| {
            let critic = |t: &mut Tape, x: Var| fx.critic.forward(t, p, x, 64, 64);
            let (rv, fv) = (t.constant(real.clone()), t.constant(fake.clone()));
            let mut eps_rng = ChaCha8Rng::seed_from_u64(9);
            Ok(adversarial_loss(t, &critic, &[rv], &[fv], 10.0, &mut eps_rng)?.penalty)
        }),
    ));
    Ok(out)
}

/// The training objective mid-ramp (every term active) on a 42-vertex model,
/// with respect to a subset of generator parameters.
fn total_loss_check(seed: u64, fault: Option<VjpFault>) -> Result<f64> {
    let mut config = RunConfig::default();
    config.seed = seed;
    config.gcn = toy_gcn();
    config.gcn.decoder_channels = vec![3, 2];
    config.model.vertices = 42;
    config.loss.weights.hold_steps = 0;
    config.loss.weights.warmup_steps = 2;
    config.data.count = 2;
    config.data.detail_first_mode = 4;
    config.data.detail_modes = 8;
    let model = synth_model(seed, 42, BasisDims::default())?;
    let setup = Setup::with_model(config, model)?;
    let data = TrainData::new(&setup, synth_dataset(&setup, 2)?)?;
    let store = TrainState::new(&setup).params;
    let names: Vec<String> = store
        .names()
        .filter(|n| is_generator(n) && (n.starts_with("combiner.") || n.ends_with("out.bias") || n.ends_with("up.bias")))
        .cloned()
        .collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    check_params(&store, &names, vec![], fault, |t, p, _| {
        Ok(generator_objective(&setup, &data, t, p, &[0, 1], 1)?.total)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_build_passes_with_one_row_per_component() {
        let report = gradcheck_suite(1, None).unwrap();
        let names: Vec<&str> = report.rows.iter().map(|r| r.component).collect();
        assert_eq!(names, COMPONENTS);
        assert!(report.all_passed(), "{}", report.to_text());
    }

    #[test]
    fn corrupted_spmm_backward_fails_cheb_conv() {
        let fault = VjpFault {
            op: "spmm".into(),
            factor: 1.05,
        };
        let report = gradcheck_suite(1, Some(fault)).unwrap();
        let cheb = report.rows.iter().find(|r| r.component == "cheb_conv").unwrap();
        assert!(!cheb.passed(), "{}", report.to_text());
        assert!(report.to_text().contains("component=cheb_conv"));
    }
}
