use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cheb::ChebLayer;
use super::network::{check_levels, check_rows, LayerSpec, NetworkSpec, ResidualBlock, Signal};
use super::params::{BoundParams, ParamStore};
use crate::diff::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::mesh::MeshHierarchy;

/// Widths and depths of the texture networks and the critic.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcnConfig {
    pub embedding_dim: usize,
    /// Output width of each decoder block, coarsest first. One block per level.
    pub decoder_channels: Vec<usize>,
    pub refiner_width: usize,
    pub refiner_blocks: usize,
    /// Number of Chebyshev polynomials per convolution.
    pub cheb_order: usize,
    /// Output width of each of the six critic convolutions.
    pub discriminator_channels: Vec<usize>,
}

impl Default for GcnConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 128,
            decoder_channels: vec![64, 32, 16, 8],
            refiner_width: 16,
            refiner_blocks: 2,
            cheb_order: 6,
            discriminator_channels: vec![8, 16, 16, 32, 32, 32],
        }
    }
}

impl GcnConfig {
    pub fn levels(&self) -> usize {
        self.decoder_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.embedding_dim == 0 {
            return bad("embedding_dim must be positive");
        }
        if self.decoder_channels.len() < 2 {
            return bad("decoder_channels needs at least two levels");
        }
        if self.decoder_channels.contains(&0) || self.refiner_width == 0 {
            return bad("channel widths must be positive");
        }
        if self.refiner_blocks == 0 {
            return bad("refiner_blocks must be positive");
        }
        if self.cheb_order == 0 {
            return bad("cheb_order must be at least 1");
        }
        if self.discriminator_channels.len() != DISCRIMINATOR_LAYERS || self.discriminator_channels.contains(&0) {
            return bad("discriminator_channels must list six positive widths");
        }
        Ok(())
    }

    /// Dense map to the coarsest level, then residual blocks separated by
    /// upsampling (sparse up-matrix followed by a convolution), then a 3-channel
    /// convolution.
    pub fn decoder_spec(&self) -> NetworkSpec {
        let levels = self.levels();
        let k = self.cheb_order;
        let ch = &self.decoder_channels;
        let mut layers = vec![LayerSpec::Dense {
            name: "dense".into(),
            input: self.embedding_dim,
            level: levels - 1,
            channels: ch[0],
        }];
        let mut width = ch[0];
        for (i, &out) in ch.iter().enumerate() {
            let level = levels - 1 - i;
            if i > 0 {
                layers.push(LayerSpec::Up { from: level + 1 });
                layers.push(LayerSpec::Cheb {
                    layer: ChebLayer::new(format!("up{}", i - 1), k, width, width),
                    level,
                });
            }
            layers.push(LayerSpec::Residual(ResidualBlock::new(&format!("block{i}"), level, k, width, out)));
            width = out;
        }
        layers.push(LayerSpec::Cheb {
            layer: ChebLayer::new("out", k, width, 3),
            level: 0,
        });
        NetworkSpec {
            name: "decoder".into(),
            layers,
        }
    }

    /// Downsample once, residual blocks on the coarser mesh, upsample once.
    pub fn refiner_spec(&self) -> NetworkSpec {
        let k = self.cheb_order;
        let w = self.refiner_width;
        let mut layers = vec![LayerSpec::Down { from: 0 }];
        for i in 0..self.refiner_blocks {
            let f_in = if i == 0 { 6 } else { w };
            layers.push(LayerSpec::Residual(ResidualBlock::new(&format!("block{i}"), 1, k, f_in, w)));
        }
        layers.push(LayerSpec::Up { from: 1 });
        layers.push(LayerSpec::Cheb {
            layer: ChebLayer::new("up", k, w, w),
            level: 0,
        });
        NetworkSpec {
            name: "refiner".into(),
            layers,
        }
    }

    pub fn combiner_spec(&self) -> NetworkSpec {
        NetworkSpec {
            name: "combiner".into(),
            layers: vec![
                LayerSpec::Cheb {
                    layer: ChebLayer::new("conv", self.cheb_order, 3 + self.refiner_width, 3),
                    level: 0,
                },
                LayerSpec::Tanh,
            ],
        }
    }
}

/// Decoder, Refiner and Combiner bound to one mesh hierarchy.
#[derive(Clone, Debug)]
pub struct TextureNets {
    pub config: GcnConfig,
    pub decoder: NetworkSpec,
    pub refiner: NetworkSpec,
    pub combiner: NetworkSpec,
}

impl TextureNets {
    pub fn new(config: GcnConfig, hierarchy: &MeshHierarchy) -> Result<Self> {
        config.validate()?;
        check_levels("decoder", hierarchy, config.levels())?;
        let nets = Self {
            decoder: config.decoder_spec(),
            refiner: config.refiner_spec(),
            combiner: config.combiner_spec(),
            config,
        };
        let n0 = Signal::Mesh { level: 0, channels: 3 };
        if nets.decoder.validate(hierarchy, Signal::Vector(nets.config.embedding_dim))? != n0 {
            return Err(Error::Config("decoder does not end at the finest level".into()));
        }
        nets.refiner.validate(hierarchy, Signal::Mesh { level: 0, channels: 6 })?;
        nets.combiner.validate(hierarchy, Signal::Mesh { level: 0, channels: 3 + nets.config.refiner_width })?;
        Ok(nets)
    }

    pub fn init(&self, hierarchy: &MeshHierarchy, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.decoder.init(hierarchy, store, &mut rng);
        self.refiner.init(hierarchy, store, &mut rng);
        self.combiner.init(hierarchy, store, &mut rng);
    }

    pub fn param_count(&self, hierarchy: &MeshHierarchy) -> usize {
        self.decoder.param_count(hierarchy) + self.refiner.param_count(hierarchy) + self.combiner.param_count(hierarchy)
    }

    /// Embedding vector to an `n x 3` albedo field.
    pub fn decoder_forward(&self, tape: &mut Tape, params: &BoundParams, hierarchy: &MeshHierarchy, embedding: Var) -> Result<Var> {
        if tape.shape(embedding).iter().product::<usize>() != self.config.embedding_dim {
            return contract(
                "decoder_forward",
                format!("embedding {:?} is not {}-dimensional", tape.shape(embedding), self.config.embedding_dim),
            );
        }
        self.decoder.forward(tape, params, hierarchy, embedding)
    }

    /// Coarse albedo `t` and projected colors `tp`, both `n x 3`, to
    /// `n x refiner_width` features.
    pub fn refiner_forward(&self, tape: &mut Tape, params: &BoundParams, hierarchy: &MeshHierarchy, t: Var, tp: Var) -> Result<Var> {
        let n = hierarchy.finest().vertex_count();
        check_rows("refiner_forward", tape, t, n, 3)?;
        check_rows("refiner_forward", tape, tp, n, 3)?;
        let x = tape.concat_cols(t, tp)?;
        self.refiner.forward(tape, params, hierarchy, x)
    }

    /// Joins decoder and refiner outputs into a texture in `(-1, 1)`.
    pub fn combiner_forward(&self, tape: &mut Tape, params: &BoundParams, hierarchy: &MeshHierarchy, dec: Var, refined: Var) -> Result<Var> {
        let n = hierarchy.finest().vertex_count();
        check_rows("combiner_forward", tape, dec, n, 3)?;
        check_rows("combiner_forward", tape, refined, n, self.config.refiner_width)?;
        let x = tape.concat_cols(dec, refined)?;
        self.combiner.forward(tape, params, hierarchy, x)
    }

    /// Full generator: decoder, refiner and combiner, returning the texture in
    /// `(-1, 1)` scale.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        hierarchy: &MeshHierarchy,
        embedding: Var,
        t: Var,
        tp: Var,
    ) -> Result<Var> {
        let dec = self.decoder_forward(tape, params, hierarchy, embedding)?;
        let refined = self.refiner_forward(tape, params, hierarchy, t, tp)?;
        self.combiner_forward(tape, params, hierarchy, dec, refined)
    }
}

/// Maps a `(-1, 1)` texture to albedo in `(0, 1)`.
pub fn to_albedo(tape: &mut Tape, x: Var) -> Var {
    let h = tape.scale(x, 0.5);
    tape.add_scalar(h, 0.5)
}

pub const DISCRIMINATOR_LAYERS: usize = 6;

/// Image critic: six 3x3 convolutions each followed by 2x2 max pooling, then
/// a global mean and a dense layer to one unbounded score.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub channels: Vec<usize>,
}

impl Discriminator {
    pub fn new(config: &GcnConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            channels: config.discriminator_channels.clone(),
        })
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        let mut ci = 3;
        for (i, &co) in self.channels.iter().enumerate() {
            out.push((format!("disc.conv{i}.w"), vec![co, ci, 3, 3], ci * 9));
            out.push((format!("disc.conv{i}.b"), vec![co], 0));
            ci = co;
        }
        out.push(("disc.dense.w".into(), vec![ci, 1], ci));
        out.push(("disc.dense.b".into(), vec![1], 0));
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s, _)| s.iter().product::<usize>()).sum()
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, shape, fan_in) in self.param_shapes() {
            if fan_in == 0 {
                store.init_zeros(&name, &shape);
            } else {
                store.init_uniform(&name, &shape, fan_in, &mut rng);
            }
        }
    }

    /// Scores an image stored as `(h * w) x 3` pixel rows.
    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, image: Var, h: usize, w: usize) -> Result<Var> {
        let x = self.features(tape, params, image, h, w)?;
        let (c, hh, ww) = match tape.shape(x) {
            [c, a, b] => (*c, *a, *b),
            _ => unreachable!("features are [C, H, W]"),
        };
        let flat = tape.reshape(x, &[c, hh * ww])?;
        let pooled = tape.sum_cols(flat)?;
        let pooled = tape.scale(pooled, 1.0 / (hh * ww) as f64);
        let row = tape.reshape(pooled, &[1, c])?;
        let s = tape.matmul(row, params.get("disc.dense.w")?)?;
        let s = tape.add_row_bias(s, params.get("disc.dense.b")?)?;
        tape.reshape(s, &[])
    }

    /// Feature map after the last pooling stage, `[C, h / 64, w / 64]`.
    pub fn features(&self, tape: &mut Tape, params: &BoundParams, image: Var, h: usize, w: usize) -> Result<Var> {
        let stride = 1usize << DISCRIMINATOR_LAYERS;
        if h == 0 || w == 0 || h % stride != 0 || w % stride != 0 {
            return contract("discriminator_forward", format!("{h}x{w} is not divisible by {stride}"));
        }
        check_rows("discriminator_forward", tape, image, h * w, 3)?;
        let chw = tape.transpose(image)?;
        let mut x = tape.reshape(chw, &[3, h, w])?;
        let (mut hh, mut ww) = (h, w);
        for (i, &co) in self.channels.iter().enumerate() {
            let y = tape.conv2d(x, params.get(&format!("disc.conv{i}.w"))?)?;
            let flat = tape.reshape(y, &[co, hh * ww])?;
            let b = tape.broadcast_cols(params.get(&format!("disc.conv{i}.b"))?, hh * ww)?;
            let y = tape.add(flat, b)?;
            let y = tape.reshape(y, &[co, hh, ww])?;
            x = tape.max_pool2(y)?;
            hh /= 2;
            ww /= 2;
        }
        Ok(x)
    }
}
