use rand_chacha::ChaCha8Rng;

use super::cheb::ChebLayer;
use super::params::{BoundParams, ParamStore};
use crate::diff::{Tape, Var};
use crate::error::{contract, Error, Result};
use crate::mesh::MeshHierarchy;

/// One stage of a mesh network. Levels index a [`MeshHierarchy`] (0 = finest).
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// Affine map from a vector to `vertices x channels` features at `level`.
    Dense { name: String, input: usize, level: usize, channels: usize },
    Cheb { layer: ChebLayer, level: usize },
    Residual(ResidualBlock),
    /// Coarsen from `from` to `from + 1`.
    Down { from: usize },
    /// Refine from `from` to `from - 1`.
    Up { from: usize },
    BiasedRelu { name: String, channels: usize },
    Tanh,
}

/// Two Chebyshev convolutions with a biased ReLU between them, plus a shortcut.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBlock {
    pub name: String,
    pub level: usize,
    pub conv1: ChebLayer,
    pub conv2: ChebLayer,
    /// `None` when input and output widths agree.
    pub shortcut: Option<ChebLayer>,
}

impl ResidualBlock {
    pub fn new(name: &str, level: usize, k: usize, f_in: usize, f_out: usize) -> Self {
        Self {
            name: name.to_string(),
            level,
            conv1: ChebLayer::new(format!("{name}.conv1"), k, f_in, f_out),
            conv2: ChebLayer::new(format!("{name}.conv2"), k, f_out, f_out),
            shortcut: (f_in != f_out).then(|| ChebLayer::new(format!("{name}.shortcut"), 1, f_in, f_out)),
        }
    }

    pub fn act_bias_name(&self) -> String {
        format!("{}.act_bias", self.name)
    }

    pub fn f_in(&self) -> usize {
        self.conv1.f_in
    }

    pub fn f_out(&self) -> usize {
        self.conv2.f_out
    }

    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = self.conv1.param_shapes();
        out.push((self.act_bias_name(), vec![self.conv1.f_out], 0));
        out.extend(self.conv2.param_shapes());
        if let Some(s) = &self.shortcut {
            out.extend(s.param_shapes());
        }
        out
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, hierarchy: &MeshHierarchy, x: Var) -> Result<Var> {
        let lap = &hierarchy.levels[self.level].scaled;
        let h = self.conv1.forward(tape, params, lap, x)?;
        let h = tape.biased_relu(h, params.get(&self.act_bias_name())?)?;
        let h = self.conv2.forward(tape, params, lap, h)?;
        let s = match &self.shortcut {
            Some(layer) => layer.forward(tape, params, lap, x)?,
            None => x,
        };
        tape.add(h, s)
    }
}

/// Ordered layer list evaluated on a mesh hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

/// Where a feature tensor lives: a vector or a per-vertex matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Signal {
    Vector(usize),
    Mesh { level: usize, channels: usize },
}

impl NetworkSpec {
    fn qualified(&self, local: &str) -> String {
        format!("{}.{local}", self.name)
    }

    /// Walks the layer list and returns the output signal, failing on the
    /// first incompatible pair of stages.
    pub fn validate(&self, hierarchy: &MeshHierarchy, input: Signal) -> Result<Signal> {
        let levels = hierarchy.levels.len();
        let bad = |i: usize, why: String| Err(Error::Config(format!("{} layer {i}: {why}", self.name)));
        let mut cur = input;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match (layer, cur) {
                (LayerSpec::Dense { input, level, channels, .. }, Signal::Vector(d)) => {
                    if *input != d {
                        return bad(i, format!("dense expects {input} inputs, got {d}"));
                    }
                    if *level >= levels {
                        return bad(i, format!("level {level} outside a {levels}-level hierarchy"));
                    }
                    Signal::Mesh { level: *level, channels: *channels }
                }
                (LayerSpec::Cheb { layer, level }, Signal::Mesh { level: l, channels }) => {
                    if *level != l || layer.f_in != channels {
                        return bad(i, format!("conv at level {level} with {} inputs after level {l} x {channels}", layer.f_in));
                    }
                    Signal::Mesh { level: l, channels: layer.f_out }
                }
                (LayerSpec::Residual(b), Signal::Mesh { level: l, channels }) => {
                    if b.level != l || b.f_in() != channels {
                        return bad(i, format!("block at level {} with {} inputs after level {l} x {channels}", b.level, b.f_in()));
                    }
                    Signal::Mesh { level: l, channels: b.f_out() }
                }
                (LayerSpec::Down { from }, Signal::Mesh { level: l, channels }) => {
                    if *from != l || l + 1 >= levels {
                        return bad(i, format!("cannot downsample from level {from} at level {l}"));
                    }
                    Signal::Mesh { level: l + 1, channels }
                }
                (LayerSpec::Up { from }, Signal::Mesh { level: l, channels }) => {
                    if *from != l || l == 0 {
                        return bad(i, format!("cannot upsample from level {from} at level {l}"));
                    }
                    Signal::Mesh { level: l - 1, channels }
                }
                (LayerSpec::BiasedRelu { channels: c, .. }, Signal::Mesh { channels, .. }) if *c == channels => cur,
                (LayerSpec::Tanh, s) => s,
                (layer, s) => return bad(i, format!("{layer:?} cannot follow {s:?}")),
            };
        }
        Ok(cur)
    }

    /// `(name, shape, fan_in)` of every parameter; a fan-in of 0 marks a bias.
    pub fn param_shapes(&self, hierarchy: &MeshHierarchy) -> Vec<(String, Vec<usize>, usize)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                LayerSpec::Dense { name, input, level, channels } => {
                    let width = hierarchy.levels[*level].vertex_count() * channels;
                    out.push((format!("{name}.w"), vec![*input, width], *input));
                    out.push((format!("{name}.b"), vec![width], 0));
                }
                LayerSpec::Cheb { layer, .. } => out.extend(layer.param_shapes()),
                LayerSpec::Residual(b) => out.extend(b.param_shapes()),
                LayerSpec::BiasedRelu { name, channels } => out.push((format!("{name}.bias"), vec![*channels], 0)),
                LayerSpec::Down { .. } | LayerSpec::Up { .. } | LayerSpec::Tanh => {}
            }
        }
        out.into_iter().map(|(n, s, f)| (self.qualified(&n), s, f)).collect()
    }

    pub fn param_count(&self, hierarchy: &MeshHierarchy) -> usize {
        self.param_shapes(hierarchy)
            .iter()
            .map(|(_, s, _)| s.iter().product::<usize>())
            .sum()
    }

    /// Fan-in scaled uniform weights, zero biases.
    pub fn init(&self, hierarchy: &MeshHierarchy, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for (name, shape, fan_in) in self.param_shapes(hierarchy) {
            if fan_in == 0 {
                store.init_zeros(&name, &shape);
            } else {
                store.init_uniform(&name, &shape, fan_in, rng);
            }
        }
    }

    pub fn forward(&self, tape: &mut Tape, params: &BoundParams, hierarchy: &MeshHierarchy, x: Var) -> Result<Var> {
        let scoped = params.scoped(&self.name);
        let mut cur = x;
        for layer in &self.layers {
            cur = match layer {
                LayerSpec::Dense { name, level, channels, .. } => {
                    let n = hierarchy.levels[*level].vertex_count();
                    let d = tape.shape(cur).iter().product::<usize>();
                    let row = tape.reshape(cur, &[1, d])?;
                    let w = scoped.get(&format!("{name}.w"))?;
                    let y = tape.matmul(row, w)?;
                    let y = tape.add_row_bias(y, scoped.get(&format!("{name}.b"))?)?;
                    tape.reshape(y, &[n, *channels])?
                }
                LayerSpec::Cheb { layer, level } => {
                    layer.forward(tape, &scoped, &hierarchy.levels[*level].scaled, cur)?
                }
                LayerSpec::Residual(b) => b.forward(tape, &scoped, hierarchy, cur)?,
                LayerSpec::Down { from } => tape.spmm(&hierarchy.down[*from], cur)?,
                LayerSpec::Up { from } => tape.spmm(&hierarchy.up[*from - 1], cur)?,
                LayerSpec::BiasedRelu { name, .. } => tape.biased_relu(cur, scoped.get(&format!("{name}.bias"))?)?,
                LayerSpec::Tanh => tape.tanh(cur)?,
            };
        }
        Ok(cur)
    }
}

pub(crate) fn check_levels(name: &str, hierarchy: &MeshHierarchy, want: usize) -> Result<()> {
    if hierarchy.levels.len() != want {
        return Err(Error::Config(format!(
            "{name} needs a {want}-level mesh hierarchy, got {}",
            hierarchy.levels.len()
        )));
    }
    Ok(())
}

pub(crate) fn check_rows(op: &str, tape: &Tape, x: Var, rows: usize, cols: usize) -> Result<()> {
    if tape.shape(x) != [rows, cols] {
        return contract(op, format!("expected [{rows}, {cols}], got {:?}", tape.shape(x)));
    }
    Ok(())
}
