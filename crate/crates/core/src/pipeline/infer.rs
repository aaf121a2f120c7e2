use std::path::{Path, PathBuf};

use super::dataset::{prepare, Prepared, Sample};
use super::setup::Setup;
use super::train::{refine, render_prepared};
use crate::diff::{Tape, Tensor};
use crate::error::Result;
use crate::gcn::ParamStore;
use crate::mesh::{write_obj, ObjMesh};
use crate::render::{write_mask_png, write_png, Shading};

/// Reconstruction of one sample.
#[derive(Clone, Debug)]
pub struct Inference {
    pub shape: Tensor,
    pub coarse_albedo: Tensor,
    pub refined_albedo: Tensor,
    pub coarse_image: Tensor,
    pub refined_image: Tensor,
    /// Refined albedo rendered without illumination.
    pub albedo_image: Tensor,
    /// Pixels covered by the projected face.
    pub proj_mask: Vec<bool>,
}

pub fn infer(setup: &Setup, params: &ParamStore, sample: &Sample) -> Result<Inference> {
    infer_prepared(setup, params, &prepare(setup, sample)?)
}

pub fn infer_prepared(setup: &Setup, params: &ParamStore, prep: &Prepared) -> Result<Inference> {
    let mut tape = Tape::no_grad();
    let bound = params.bind(&mut tape, false);
    let refined = refine(setup, &mut tape, &bound, prep)?;
    let coarse = tape.constant(prep.coarse.clone());
    let coarse_out = render_prepared(setup, &mut tape, prep, coarse, Shading::Lit)?;
    let refined_out = render_prepared(setup, &mut tape, prep, refined, Shading::Lit)?;
    let albedo_out = render_prepared(setup, &mut tape, prep, refined, Shading::AlbedoOnly)?;
    Ok(Inference {
        shape: prep.shape.clone(),
        coarse_albedo: prep.coarse.clone(),
        refined_albedo: tape.value(refined).clone(),
        coarse_image: tape.value(coarse_out.image).clone(),
        refined_image: tape.value(refined_out.image).clone(),
        albedo_image: tape.value(albedo_out.image).clone(),
        proj_mask: refined_out.mask,
    })
}

fn colored_mesh(setup: &Setup, shape: &Tensor, albedo: &Tensor) -> ObjMesh {
    ObjMesh {
        positions: setup.model.positions(shape),
        colors: Some(setup.model.positions(albedo)),
        triangles: setup.triangles.to_vec(),
    }
}

impl Inference {
    /// Writes `coarse.obj`, `refined.obj`, `coarse.png`, `refined.png`,
    /// `albedo.png` and `mask.png` into `dir`.
    pub fn write(&self, setup: &Setup, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let size = setup.image_size();
        let mut written = Vec::new();
        for (name, albedo) in [("coarse.obj", &self.coarse_albedo), ("refined.obj", &self.refined_albedo)] {
            let path = dir.join(name);
            std::fs::write(&path, write_obj(&colored_mesh(setup, &self.shape, albedo)))?;
            written.push(path);
        }
        for (name, image) in [
            ("coarse.png", &self.coarse_image),
            ("refined.png", &self.refined_image),
            ("albedo.png", &self.albedo_image),
        ] {
            let path = dir.join(name);
            write_png(&path, image, size, size)?;
            written.push(path);
        }
        let path = dir.join("mask.png");
        write_mask_png(&path, &self.proj_mask, size, size)?;
        written.push(path);
        Ok(written)
    }
}
