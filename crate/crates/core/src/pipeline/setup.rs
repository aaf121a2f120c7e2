use std::sync::Arc;

use super::config::RunConfig;
use crate::error::Result;
use crate::gcn::{Discriminator, TextureNets};
use crate::losses::ToyEmbedder;
use crate::mesh::MeshHierarchy;
use crate::morphable::{read_model_file, synth_model, BasisDims, MorphableModel};

/// Frozen components shared by training, inference and evaluation: the
/// morphable model, its mesh hierarchy, the network layouts and the
/// embedding function.
pub struct Setup {
    pub config: RunConfig,
    pub model: MorphableModel,
    pub hierarchy: MeshHierarchy,
    pub triangles: Arc<Vec<[usize; 3]>>,
    pub nets: TextureNets,
    pub critic: Discriminator,
    pub embedder: ToyEmbedder,
}

impl Setup {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = match &config.model.path {
            Some(p) => read_model_file(p)?,
            None => synth_model(config.model.seed, config.model.vertices, BasisDims::default())?,
        };
        Self::with_model(config, model)
    }

    pub fn with_model(config: RunConfig, model: MorphableModel) -> Result<Self> {
        config.validate()?;
        let positions = model.positions(&model.shape_mean);
        let hierarchy = MeshHierarchy::build(
            &model.topology,
            &positions,
            config.gcn.levels(),
            config.hierarchy.fraction,
            config.hierarchy.lambda_max,
        )?;
        let nets = TextureNets::new(config.gcn.clone(), &hierarchy)?;
        let critic = Discriminator::new(&config.gcn)?;
        let embedder = ToyEmbedder::new(config.render.image_size, config.gcn.embedding_dim, config.seed ^ 0x5eed)?;
        Ok(Self {
            triangles: Arc::new(model.topology.triangles().to_vec()),
            config,
            model,
            hierarchy,
            nets,
            critic,
            embedder,
        })
    }

    pub fn image_size(&self) -> usize {
        self.config.render.image_size
    }
}
