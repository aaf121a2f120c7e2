use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::setup::Setup;
use crate::diff::{Tape, Tensor};
use crate::error::{contract, Error, Result};
use crate::gcn::{read_checkpoint_file, write_checkpoint_file, ParamStore};
use crate::losses::EmbeddingFn;
use crate::morphable::{laplacian_modes, CoefficientVector, COEFF_LEN};
use crate::render::{ambient_lighting, project_vertex_colors, render_image, transform_points, Pose, Shading};

/// One training or evaluation example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `P x 3` RGB image in `[0, 1]`.
    pub image: Tensor,
    pub face_mask: Vec<bool>,
    pub coeffs: CoefficientVector,
    pub gt_albedo: Option<Tensor>,
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn normal(rng: &mut ChaCha8Rng, scale: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * scale
}

fn random_coeffs(rng: &mut ChaCha8Rng) -> CoefficientVector {
    let mut c = CoefficientVector::default();
    c.identity.iter_mut().for_each(|v| *v = normal(rng, 0.6));
    c.expression.iter_mut().for_each(|v| *v = normal(rng, 0.4));
    c.texture.iter_mut().for_each(|v| *v = normal(rng, 0.8));
    c.pose = [
        rng.random_range(-0.15..0.15),
        rng.random_range(-0.3..0.3),
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        rng.random_range(-0.05..0.05),
        0.0,
    ];
    let mut light = ambient_lighting(rng.random_range(0.75..0.95));
    let key = [rng.random_range(-0.4..0.4), rng.random_range(0.0..0.4), rng.random_range(0.2..0.5)];
    for ch in 0..3 {
        let tint = rng.random_range(0.9..1.1);
        light[ch * 9 + 1] = key[1] * tint;
        light[ch * 9 + 2] = key[2] * tint;
        light[ch * 9 + 3] = key[0] * tint;
        for b in 4..9 {
            light[ch * 9 + b] = normal(rng, 0.03);
        }
    }
    c.lighting = light;
    c
}

/// Albedo perturbation drawn from mid-frequency Laplacian eigenvectors,
/// scaled so its largest entry is `amplitude`.
fn detail_field(rng: &mut ChaCha8Rng, modes: &[Vec<f64>], n: usize, amplitude: f64) -> Vec<f64> {
    let mut d = vec![0.0; 3 * n];
    for c in 0..3 {
        for mode in modes {
            let w = normal(rng, 1.0);
            for i in 0..n {
                d[3 * i + c] += w * mode[i];
            }
        }
    }
    let peak = d.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        d.iter_mut().for_each(|v| *v *= amplitude / peak);
    }
    d
}

/// Deterministic synthetic dataset. Each sample draws coefficients, adds a
/// hidden detail field to the model albedo, and renders the result under
/// the sample's pose and lighting; the face mask is the rendered coverage.
pub fn synth_dataset(setup: &Setup, count: usize) -> Result<Vec<Sample>> {
    if count == 0 {
        return contract("synth_dataset", "count must be at least 1");
    }
    let data = &setup.config.data;
    let n = setup.model.vertex_count();
    let first = data.detail_first_mode.min(n - 1);
    let modes = laplacian_modes(&setup.model.topology, first, data.detail_modes.min(n - first));
    (0..count)
        .map(|i| {
            let mut rng = sample_rng(setup.config.seed, i);
            let coeffs = random_coeffs(&mut rng);
            let detail = detail_field(&mut rng, &modes, n, data.detail_amplitude);
            let coarse = setup.model.texture_from_coeffs(&coeffs.texture)?;
            let albedo = Tensor::from_parts(
                vec![n, 3],
                coarse.data().iter().zip(&detail).map(|(a, d)| (a + d).clamp(0.02, 0.98)).collect(),
            );
            let shape = setup.model.shape_from_coeffs(&coeffs.identity, &coeffs.expression)?;
            let (image, mask) = render_plain(setup, &shape, &albedo, &coeffs, Shading::Lit)?;
            Ok(Sample {
                image,
                face_mask: mask,
                coeffs,
                gt_albedo: Some(albedo),
            })
        })
        .collect()
}

/// Renders without recording gradients; returns the image and coverage mask.
pub fn render_plain(
    setup: &Setup,
    shape: &Tensor,
    albedo: &Tensor,
    coeffs: &CoefficientVector,
    shading: Shading,
) -> Result<(Tensor, Vec<bool>)> {
    let mut tape = Tape::no_grad();
    let s = tape.constant(shape.clone());
    let a = tape.constant(albedo.clone());
    let p = tape.constant(Tensor::vector(coeffs.pose.to_vec()));
    let l = tape.constant(Tensor::vector(coeffs.lighting.to_vec()));
    let out = render_image(&mut tape, s, a, p, l, &setup.triangles, &setup.config.render, shading)?;
    Ok((tape.value(out.image).clone(), out.mask))
}

/// Frozen per-sample inputs to the texture networks: the coarse albedo and
/// shape from the (oracle) coefficients, the input embedding, and the image
/// colors under each projected vertex.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub embedding: Tensor,
    pub shape: Tensor,
    pub coarse: Tensor,
    pub projected: Tensor,
    pub valid: Vec<bool>,
    pub pose: Tensor,
    pub lighting: Tensor,
}

pub fn prepare(setup: &Setup, sample: &Sample) -> Result<Prepared> {
    let c = &sample.coeffs;
    let shape = setup.model.shape_from_coeffs(&c.identity, &c.expression)?;
    let coarse = setup.model.texture_from_coeffs(&c.texture)?;
    let pose = Pose::from_slice(&c.pose)?;
    let (projected, mut valid) = project_vertex_colors(&sample.image, &shape, &pose, &setup.triangles, &setup.config.render)?;
    restrict_to_mask(setup, &shape, &pose, &sample.face_mask, &mut valid);
    Ok(Prepared {
        embedding: setup.embedder.embed_plain(&sample.image)?,
        shape,
        coarse,
        projected,
        valid,
        pose: pose.to_tensor(),
        lighting: Tensor::vector(c.lighting.to_vec()),
    })
}

/// Drops vertices whose bilinear footprint touches a pixel outside the face
/// mask, so projected colors never blend in background.
fn restrict_to_mask(setup: &Setup, shape: &Tensor, pose: &Pose, mask: &[bool], valid: &mut [bool]) {
    let cfg = &setup.config.render;
    let size = cfg.image_size;
    let cam = transform_points(shape, pose, cfg);
    for (i, p) in cam.iter().enumerate() {
        if !valid[i] {
            continue;
        }
        let [u, v, _] = cfg.project_point(*p);
        let (x, y) = (u - 0.5, v - 0.5);
        let (x0, y0) = (x.floor().max(0.0) as usize, y.floor().max(0.0) as usize);
        let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
        valid[i] = [(y0, x0), (y0, x1), (y1, x0), (y1, x1)].iter().all(|&(r, c)| mask[r * size + c]);
    }
}

/// Stores a dataset in the tensor-container format used for checkpoints.
pub fn write_dataset_file(samples: &[Sample], path: &Path) -> Result<()> {
    let mut store = ParamStore::new();
    for (i, s) in samples.iter().enumerate() {
        store.insert(format!("sample{i:05}.image"), s.image.clone());
        let mask = s.face_mask.iter().map(|&m| f64::from(u8::from(m))).collect();
        store.insert(format!("sample{i:05}.mask"), Tensor::vector(mask));
        store.insert(format!("sample{i:05}.coeffs"), Tensor::vector(s.coeffs.to_vec()));
        if let Some(a) = &s.gt_albedo {
            store.insert(format!("sample{i:05}.albedo"), a.clone());
        }
    }
    write_checkpoint_file(&store, path)
}

pub fn read_dataset_file(path: &Path) -> Result<Vec<Sample>> {
    let store = read_checkpoint_file(path)?;
    let bad = |d: String| Error::Parse { offset: 0, detail: d };
    let mut out = Vec::new();
    loop {
        let key = |f: &str| format!("sample{:05}.{f}", out.len());
        let Some(image) = store.get(&key("image")) else { break };
        let mask = store.get(&key("mask")).ok_or_else(|| bad(format!("{} missing", key("mask"))))?;
        let coeffs = store.get(&key("coeffs")).ok_or_else(|| bad(format!("{} missing", key("coeffs"))))?;
        if coeffs.numel() != COEFF_LEN || mask.numel() != image.rows() {
            return Err(bad(format!("sample {} has inconsistent sizes", out.len())));
        }
        out.push(Sample {
            image: image.clone(),
            face_mask: mask.data().iter().map(|&m| m != 0.0).collect(),
            coeffs: CoefficientVector::from_slice(coeffs.data())?,
            gt_albedo: store.get(&key("albedo")).cloned(),
        });
    }
    if out.is_empty() {
        return Err(bad("no samples".into()));
    }
    Ok(out)
}
