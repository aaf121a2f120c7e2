use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::{prepare, Prepared, Sample};
use super::optim::Adam;
use super::setup::Setup;
use crate::diff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gcn::{to_albedo, write_checkpoint_file, BoundParams, ParamStore};
use crate::losses::{
    adversarial_loss, generator_adversarial_loss, identity_loss, pixel_loss, total_loss, vertex_loss,
    vertex_loss_masked, LossTerms, MaskPair, RenderTerms,
};
use crate::render::{render_image, shade_vertices, Shading};

pub const GENERATOR_PREFIXES: [&str; 3] = ["decoder.", "refiner.", "combiner."];
pub const CRITIC_PREFIX: &str = "disc.";

pub fn is_generator(name: &str) -> bool {
    GENERATOR_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Samples with their frozen network inputs.
pub struct TrainData {
    pub samples: Vec<Sample>,
    pub prepared: Vec<Prepared>,
}

impl TrainData {
    pub fn new(setup: &Setup, samples: Vec<Sample>) -> Result<Self> {
        let prepared = samples.iter().map(|s| prepare(setup, s)).collect::<Result<_>>()?;
        Ok(Self { samples, prepared })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Parameters, optimizer state and the index of the next step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub generator_opt: Adam,
    pub critic_opt: Adam,
    pub step: usize,
}

const STEP_KEY: &str = "train.step";
const COUNTS_KEY: &str = "meta.vertex_counts";

impl TrainState {
    pub fn new(setup: &Setup) -> Self {
        let mut params = ParamStore::new();
        setup.nets.init(&setup.hierarchy, &mut params, setup.config.seed);
        setup.critic.init(&mut params, setup.config.seed.wrapping_add(1));
        let t = &setup.config.train;
        Self {
            params,
            generator_opt: Adam::new(t.learning_rate, t.beta1, t.beta2, t.epsilon),
            critic_opt: Adam::new(t.critic_learning_rate, t.beta1, t.beta2, t.epsilon),
            step: 0,
        }
    }

    /// Everything needed to resume: parameters, optimizer moments, the step
    /// counter and the hierarchy's vertex counts.
    pub fn to_checkpoint(&self, setup: &Setup) -> ParamStore {
        let mut store = self.params.clone();
        self.generator_opt.save("opt.generator", &mut store);
        self.critic_opt.save("opt.critic", &mut store);
        store.insert(STEP_KEY, Tensor::scalar(self.step as f64));
        let counts = setup.hierarchy.vertex_counts().iter().map(|&c| c as f64).collect();
        store.insert(COUNTS_KEY, Tensor::vector(counts));
        store
    }

    pub fn from_checkpoint(setup: &Setup, store: &ParamStore) -> Result<Self> {
        let params = checkpoint_params(setup, store)?;
        let mut state = Self::new(setup);
        state.params = params;
        state.generator_opt.load("opt.generator", store);
        state.critic_opt.load("opt.critic", store);
        state.step = store.get(STEP_KEY).map_or(0, |s| s.item() as usize);
        Ok(state)
    }
}

/// Network parameters of a checkpoint, checked against the current model and
/// configuration.
pub fn checkpoint_params(setup: &Setup, store: &ParamStore) -> Result<ParamStore> {
    let want: Vec<f64> = setup.hierarchy.vertex_counts().iter().map(|&c| c as f64).collect();
    match store.get(COUNTS_KEY) {
        Some(c) if c.data() == want.as_slice() => {}
        Some(c) => {
            return Err(Error::Config(format!(
                "checkpoint hierarchy has vertex counts {:?}, model gives {:?}",
                c.data(),
                want
            )))
        }
        None => return Err(Error::Config("checkpoint has no hierarchy vertex counts".into())),
    }
    let reference = TrainState::new(setup).params;
    let mut out = ParamStore::new();
    for (name, t) in reference.iter() {
        match store.get(name) {
            Some(v) if v.shape() == t.shape() => out.insert(name.clone(), v.clone()),
            Some(v) => {
                return Err(Error::Config(format!(
                    "checkpoint parameter `{name}` has shape {:?}, configuration needs {:?}",
                    v.shape(),
                    t.shape()
                )))
            }
            None => return Err(Error::Config(format!("checkpoint lacks parameter `{name}`"))),
        }
    }
    Ok(out)
}

/// Refined albedo `T'` for one sample.
pub fn refine(setup: &Setup, tape: &mut Tape, params: &BoundParams, prep: &Prepared) -> Result<Var> {
    let e = tape.constant(prep.embedding.clone());
    let t = tape.constant(prep.coarse.clone());
    let tp = tape.constant(prep.projected.clone());
    let x = setup.nets.forward(tape, params, &setup.hierarchy, e, t, tp)?;
    Ok(to_albedo(tape, x))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub sigma: [f64; 4],
    pub pixel: Option<f64>,
    pub identity: Option<f64>,
    pub adversarial: Option<f64>,
    pub vertex_texture: f64,
    pub vertex_projected: f64,
    pub total: f64,
    pub critic_loss: Option<f64>,
    pub penalty: Option<f64>,
}

impl StepLog {
    pub const HEADER: &'static str =
        "step\tsigma1\tsigma2\tsigma3\tsigma4\tpixel\tidentity\tadversarial\tvertex_texture\tvertex_projected\ttotal\tcritic\tpenalty";

    /// Tab-separated row matching [`StepLog::HEADER`]; absent terms print `-`.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| v.to_string());
        let mut s = self.step.to_string();
        for v in self.sigma {
            let _ = write!(s, "\t{v}");
        }
        for v in [self.pixel, self.identity, self.adversarial] {
            let _ = write!(s, "\t{}", opt(v));
        }
        let _ = write!(s, "\t{}\t{}\t{}", self.vertex_texture, self.vertex_projected, self.total);
        for v in [self.critic_loss, self.penalty] {
            let _ = write!(s, "\t{}", opt(v));
        }
        s
    }
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ea1_11ed);
    rng.set_stream(step as u64);
    rng
}

fn draw_batch(rng: &mut ChaCha8Rng, count: usize, batch: usize) -> Vec<usize> {
    index::sample(rng, count, batch.min(count)).into_vec()
}

fn mean_of(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = tape.add(acc, v)?;
    }
    Ok(tape.scale(acc, 1.0 / vars.len() as f64))
}

fn critic_fn<'a>(setup: &'a Setup, params: &'a BoundParams) -> impl Fn(&mut Tape, Var) -> Result<Var> + 'a {
    let s = setup.image_size();
    move |t: &mut Tape, x: Var| setup.critic.forward(t, params, x, s, s)
}

/// Real image restricted to the rendered coverage and the fake render, both
/// as plain tensors, for one sample under the current generator.
fn critic_pair(setup: &Setup, params: &ParamStore, sample: &Sample, prep: &Prepared) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::no_grad();
    let bound = params.bind(&mut tape, false);
    let albedo = refine(setup, &mut tape, &bound, prep)?;
    let out = render_prepared(setup, &mut tape, prep, albedo, Shading::Lit)?;
    let mut real = sample.image.clone();
    for (p, &m) in out.mask.iter().enumerate() {
        if !m {
            real.data_mut()[3 * p..3 * p + 3].fill(0.0);
        }
    }
    Ok((real, tape.value(out.image).clone()))
}

pub fn render_prepared(
    setup: &Setup,
    tape: &mut Tape,
    prep: &Prepared,
    albedo: Var,
    shading: Shading,
) -> Result<crate::render::RenderOutput> {
    let s = tape.constant(prep.shape.clone());
    let p = tape.constant(prep.pose.clone());
    let l = tape.constant(prep.lighting.clone());
    render_image(tape, s, albedo, p, l, &setup.triangles, &setup.config.render, shading)
}

fn critic_update(setup: &Setup, data: &TrainData, state: &mut TrainState, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let batch = draw_batch(rng, data.len(), setup.config.train.batch_size);
    let mut reals = Vec::new();
    let mut fakes = Vec::new();
    for &i in &batch {
        let (r, f) = critic_pair(setup, &state.params, &data.samples[i], &data.prepared[i])?;
        reals.push(r);
        fakes.push(f);
    }
    let mut tape = Tape::new();
    let bound = state.params.bind_prefix(&mut tape, CRITIC_PREFIX);
    let real: Vec<Var> = reals.into_iter().map(|r| tape.constant(r)).collect();
    let fake: Vec<Var> = fakes.into_iter().map(|f| tape.constant(f)).collect();
    let critic = critic_fn(setup, &bound);
    let terms = adversarial_loss(&mut tape, &critic, &real, &fake, setup.config.loss.lambda_gp, rng)?;
    let loss = tape.value(terms.critic_loss).item();
    let penalty = tape.value(terms.penalty).item();
    let grads = tape.backward(terms.critic_loss)?;
    let named = bound.named_grads(&tape, &grads, CRITIC_PREFIX);
    if !loss.is_finite() || named.values().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: state.step,
            detail: format!("critic loss {loss}"),
        });
    }
    state.critic_opt.step(&mut state.params, &named)?;
    Ok((loss, penalty))
}

/// Generator objective of one step and the refined albedo of each batch entry.
pub struct Objective {
    pub terms: LossTerms,
    pub total: Var,
    pub albedos: Vec<Var>,
}

/// Records the full generator objective for the samples in `batch` at
/// `step`. Critic parameters in `params` are used as given, so binding them
/// as constants keeps them out of the gradient.
pub fn generator_objective(
    setup: &Setup,
    data: &TrainData,
    tape: &mut Tape,
    params: &BoundParams,
    batch: &[usize],
    step: usize,
) -> Result<Objective> {
    let cfg = &setup.config;
    let weights = cfg.loss.weights;
    let s1 = weights.sigma1(step);
    let (mut vt, mut vp, mut pix, mut ids, mut fakes, mut albedos) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for &i in batch {
        let (sample, prep) = (&data.samples[i], &data.prepared[i]);
        let albedo = refine(setup, tape, params, prep)?;
        albedos.push(albedo);
        if cfg.loss.use_vertex {
            let t = tape.constant(prep.coarse.clone());
            vt.push(vertex_loss(tape, t, albedo)?);
            let s = tape.constant(prep.shape.clone());
            let p = tape.constant(prep.pose.clone());
            let l = tape.constant(prep.lighting.clone());
            let lit = shade_vertices(tape, s, albedo, p, l, &setup.triangles, &cfg.render)?;
            let tp = tape.constant(prep.projected.clone());
            vp.push(vertex_loss_masked(tape, tp, lit, &prep.valid)?);
        }
        if s1 > 0.0 {
            let out = render_prepared(setup, tape, prep, albedo, Shading::Lit)?;
            let masks = MaskPair::new(sample.face_mask.clone(), out.mask.clone())?;
            let x = tape.constant(sample.image.clone());
            pix.push(pixel_loss(tape, x, out.image, &masks)?);
            ids.push(identity_loss(tape, x, out.image, &setup.embedder)?);
            fakes.push(out.image);
        }
    }
    let zero = |tape: &mut Tape| tape.constant(Tensor::scalar(0.0));
    let vertex_texture = if vt.is_empty() { zero(tape) } else { mean_of(tape, &vt)? };
    let vertex_projected = if vp.is_empty() { zero(tape) } else { mean_of(tape, &vp)? };
    let render = if s1 > 0.0 {
        let adversarial = if cfg.loss.use_adversarial {
            let critic = critic_fn(setup, params);
            generator_adversarial_loss(tape, &critic, &fakes)?
        } else {
            zero(tape)
        };
        Some(RenderTerms {
            pixel: mean_of(tape, &pix)?,
            identity: mean_of(tape, &ids)?,
            adversarial,
        })
    } else {
        None
    };
    let terms = LossTerms {
        render,
        vertex_texture,
        vertex_projected,
    };
    let total = total_loss(tape, &terms, &weights, step)?;
    Ok(Objective { terms, total, albedos })
}

/// One training step: critic updates (only while the rendering terms are
/// active and the adversarial term is enabled) followed by one generator
/// update. `dump_dir` receives a diagnostic checkpoint if a loss or gradient
/// becomes non-finite.
pub fn train_step(setup: &Setup, data: &TrainData, state: &mut TrainState, dump_dir: Option<&Path>) -> Result<StepLog> {
    let cfg = &setup.config;
    let weights = cfg.loss.weights;
    let step = state.step;
    let (s1, s4) = (weights.sigma1(step), weights.sigma4(step));
    let mut rng = step_rng(cfg.seed, step);

    let mut critic_log = None;
    if cfg.loss.use_adversarial && s1 > 0.0 {
        for _ in 0..cfg.train.critic_steps {
            critic_log = Some(critic_update(setup, data, state, &mut rng)?);
        }
    }

    let batch = draw_batch(&mut rng, data.len(), cfg.train.batch_size);
    let mut tape = Tape::new();
    let bound = state.params.bind_where(&mut tape, is_generator);
    let Objective { terms, total, albedos } = generator_objective(setup, data, &mut tape, &bound, &batch, step)?;
    let render = terms.render;
    let (vertex_texture, vertex_projected) = (terms.vertex_texture, terms.vertex_projected);
    let value = |v: Var| tape.value(v).item();
    let log = StepLog {
        step,
        sigma: [s1, weights.sigma2, weights.sigma3, s4],
        pixel: render.map(|r| value(r.pixel)),
        identity: render.map(|r| value(r.identity)),
        adversarial: render.map(|r| value(r.adversarial)),
        vertex_texture: value(vertex_texture),
        vertex_projected: value(vertex_projected),
        total: value(total),
        critic_loss: critic_log.map(|c| c.0),
        penalty: critic_log.map(|c| c.1),
    };
    let grads = tape.backward(total)?;
    let mut named = BTreeMap::new();
    for prefix in GENERATOR_PREFIXES {
        named.extend(bound.named_grads(&tape, &grads, prefix));
    }
    let bad_grad = named.iter().find(|(_, g)| !g.is_finite()).map(|(k, _)| k.clone());
    if !log.total.is_finite() || bad_grad.is_some() {
        let detail = match bad_grad {
            Some(k) => format!("gradient of `{k}` (total loss {})", log.total),
            None => format!("total loss {}", log.total),
        };
        if let Some(dir) = dump_dir {
            let mut dump = state.to_checkpoint(setup);
            for (b, (&i, &a)) in batch.iter().zip(&albedos).enumerate() {
                dump.insert(format!("dump.batch{b}.sample"), Tensor::scalar(i as f64));
                dump.insert(format!("dump.batch{b}.albedo"), tape.value(a).clone());
            }
            let path = dir.join(format!("nonfinite_step{step}.ckpt"));
            write_checkpoint_file(&dump, &path)?;
            return Err(Error::NonFinite {
                step,
                detail: format!("{detail}; tensors dumped to {}", path.display()),
            });
        }
        return Err(Error::NonFinite { step, detail });
    }
    state.generator_opt.step(&mut state.params, &named)?;
    state.step += 1;
    Ok(log)
}

/// Runs `steps` training steps from the current state, calling `on_step`
/// after each.
pub fn train(
    setup: &Setup,
    data: &TrainData,
    state: &mut TrainState,
    steps: usize,
    dump_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepLog, &TrainState),
) -> Result<Vec<StepLog>> {
    let mut logs = Vec::with_capacity(steps);
    for _ in 0..steps {
        let log = train_step(setup, data, state, dump_dir)?;
        on_step(&log, state);
        logs.push(log);
    }
    Ok(logs)
}

/// Mean pixel loss of the refined renders over the whole dataset.
pub fn mean_pixel_loss(setup: &Setup, data: &TrainData, params: &ParamStore) -> Result<f64> {
    let mut total = 0.0;
    for (sample, prep) in data.samples.iter().zip(&data.prepared) {
        let mut tape = Tape::no_grad();
        let bound = params.bind(&mut tape, false);
        let albedo = refine(setup, &mut tape, &bound, prep)?;
        let out = render_prepared(setup, &mut tape, prep, albedo, Shading::Lit)?;
        let masks = MaskPair::new(sample.face_mask.clone(), out.mask)?;
        let x = tape.constant(sample.image.clone());
        let l = pixel_loss(&mut tape, x, out.image, &masks)?;
        total += tape.value(l).item();
    }
    Ok(total / data.len() as f64)
}
