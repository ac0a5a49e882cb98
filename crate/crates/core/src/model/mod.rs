//! The padded auto-encoder: patching, transformer encoder with LSTM
//! compression to a latent vector, and a mirrored transformer decoder.

mod checkpoint;
mod config;
pub mod forward;
mod params;

pub use checkpoint::{load, save, CheckpointHeader, TensorEntry, FORMAT_VERSION};
pub use config::ModelConfig;
pub use forward::Bound;
pub use params::{assemble, initialise, BlockIds, Layout, LstmIds, ParamStore};

use crate::corruption::{corrupt, CorruptionSpec};
use crate::error::{PaeError, Result};
use crate::numerics::{Graph, NodeId, Tensor};
use crate::rng::{self, Stream};

/// `[l × p]` → `[l·m × p/m]`; row `i·m + j` holds samples `[j·D, (j+1)·D)`
/// of channel `i`. Row-major storage makes this a pure reshape.
pub fn patchify(x: &Tensor, patches_per_channel: usize) -> Result<Tensor> {
    let (rows, cols) = (x.rows(), x.cols());
    if x.shape().len() != 2 || patches_per_channel == 0 || cols % patches_per_channel != 0 {
        return Err(PaeError::Shape {
            op: "patchify",
            left: x.shape().to_vec(),
            right: vec![patches_per_channel],
        });
    }
    x.reshaped(&[rows * patches_per_channel, cols / patches_per_channel])
}

pub fn depatchify(xp: &Tensor, rows: usize, cols: usize) -> Result<Tensor> {
    if xp.len() != rows * cols || rows == 0 || xp.rows() % rows != 0 {
        return Err(PaeError::Shape {
            op: "depatchify",
            left: xp.shape().to_vec(),
            right: vec![rows, cols],
        });
    }
    xp.reshaped(&[rows, cols])
}

/// 128-d (by default) encoding of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent(pub Vec<f64>);

impl Latent {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub latent: Latent,
    /// Encoder output row 0, handed to the decoder.
    pub class_row: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub recon: Tensor,
    pub corrupted: Tensor,
    pub mask: Vec<bool>,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PaeModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub layout: Layout,
}

/// Dropout stream for a training forward pass keyed by the corruption seed.
fn dropout_stream(seed: u64) -> Stream {
    rng::substream(seed, &[0xd0])
}

impl PaeModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layout) = initialise(&config, seed);
        Ok(Self { config, params, layout })
    }

    pub fn from_params(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let (params, layout) = assemble(&config, named).map_err(PaeError::Mismatch)?;
        Ok(Self { config, params, layout })
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    /// Borrows every parameter into `g`, differentiable or not.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, differentiable: bool) -> Bound<'a> {
        let nodes = self
            .params
            .tensors()
            .iter()
            .map(|t| if differentiable { g.param(t) } else { g.leaf(t) })
            .collect();
        Bound {
            cfg: &self.config,
            layout: &self.layout,
            nodes,
        }
    }

    fn check_window(&self, x: &Tensor) -> Result<()> {
        let want = [self.config.channels, self.config.samples];
        if x.shape() != want {
            return Err(PaeError::Shape {
                op: "model input",
                left: x.shape().to_vec(),
                right: want.to_vec(),
            });
        }
        Ok(())
    }

    /// Patchifies and zeroes masked rows, returning the token node.
    fn masked_patches(&self, g: &mut Graph<'_>, x: &Tensor, mask: &[bool]) -> Result<NodeId> {
        self.check_window(x)?;
        let mut xp = patchify(x, self.config.patches_per_channel)?;
        if mask.len() != xp.rows() {
            return Err(PaeError::Shape {
                op: "mask",
                left: vec![mask.len()],
                right: vec![xp.rows()],
            });
        }
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            xp.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(g.constant(xp))
    }

    /// Eval-mode encoding of an already corrupted window.
    pub fn encode(&self, x_corrupted: &Tensor, mask: &[bool]) -> Result<Encoded> {
        self.encode_with(x_corrupted, mask, false, 0)
    }

    pub fn encode_with(&self, x_corrupted: &Tensor, mask: &[bool], training: bool, seed: u64) -> Result<Encoded> {
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let patches = self.masked_patches(&mut g, x_corrupted, mask)?;
        let out = forward::encode(&mut g, &b, patches, training, &mut dropout_stream(seed))?;
        Ok(Encoded {
            latent: Latent(g.value(out.latent).to_vec()),
            class_row: g.value(out.class_row).to_vec(),
        })
    }

    pub fn decode(&self, encoded: &Encoded) -> Result<Tensor> {
        let (l, d) = (self.config.latent_dim, self.config.patch_len());
        if encoded.latent.len() != l || encoded.class_row.len() != d {
            return Err(PaeError::Shape {
                op: "decode",
                left: vec![encoded.latent.len(), encoded.class_row.len()],
                right: vec![l, d],
            });
        }
        if !encoded.latent.values().iter().all(|v| v.is_finite()) {
            return Err(PaeError::Numeric { stage: "decoder input".into() });
        }
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let z = g.constant(Tensor::matrix(1, l, encoded.latent.0.clone())?);
        let c = g.constant(Tensor::matrix(1, d, encoded.class_row.clone())?);
        let out = forward::decode(&mut g, &b, z, c, false, &mut dropout_stream(0))?;
        Ok(g.tensor(out))
    }

    /// Builds corrupt → encode → decode → MSE-to-clean into `g`.
    fn reconstruct_graph<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x_clean: &Tensor,
        spec: &CorruptionSpec,
        training: bool,
        differentiable: bool,
    ) -> Result<(Bound<'a>, NodeId, NodeId, Tensor, Vec<bool>)> {
        self.check_window(x_clean)?;
        let corrupted = corrupt(x_clean, spec, self.config.patches_per_channel)?;
        let b = self.bind(g, differentiable);
        let patches = self.masked_patches(g, &corrupted.input, &corrupted.mask)?;
        let mut drop = dropout_stream(spec.seed);
        let enc = forward::encode(g, &b, patches, training, &mut drop)?;
        let recon = forward::decode(g, &b, enc.latent, enc.class_row, training, &mut drop)?;
        let target = g.constant(x_clean.clone());
        let loss = g.mse(recon, target)?;
        Ok((b, recon, loss, corrupted.input, corrupted.mask))
    }

    pub fn reconstruct(&self, x_clean: &Tensor, spec: &CorruptionSpec, training: bool) -> Result<Reconstruction> {
        let mut g = Graph::new();
        let (_, recon, loss, corrupted, mask) = self.reconstruct_graph(&mut g, x_clean, spec, training, false)?;
        Ok(Reconstruction {
            recon: g.tensor(recon),
            corrupted,
            mask,
            loss: g.scalar(loss),
        })
    }

    /// Training-mode loss and per-parameter gradients (store order).
    pub fn loss_and_grads(&self, x_clean: &Tensor, spec: &CorruptionSpec) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let (b, _, loss, _, _) = self.reconstruct_graph(&mut g, x_clean, spec, true, true)?;
        g.backward(loss)?;
        let grads = b
            .nodes
            .iter()
            .zip(self.params.tensors())
            .map(|(&id, t)| g.grad(id).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        Ok((g.scalar(loss), grads))
    }
}
