//! The blocked hierarchical VAE architecture.
//!
//! The encoder is a stack of L fully connected layers. Layer i consumes the
//! previous carrier h^{i-1} (h^0 = x) and emits z^i, split into a feature
//! block s^i and the next carrier h^i; the last layer's carrier is the
//! residual c^L. The assembled representation is z = (s^1;…;s^L;c^L). Each
//! block has its own part-decoder into a shared merge space; the merge
//! decoder maps the concatenated parts back to pixel space with a sigmoid
//! output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndgrad::{Array, Bindings, Graph, NodeId};
use crate::nn::{init_mlp, Activation, Mlp, MlpSpec};
use crate::rng::{subseed, Stream, StreamKind};

/// Per-layer latent dimensions and the feature/carrier split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockLayout {
    /// Feature block widths s^1..s^L.
    pub s_dims: Vec<usize>,
    /// Carrier widths h^1..h^{L-1} (empty when L = 1).
    pub h_dims: Vec<usize>,
    /// Residual width c^L.
    pub c_dim: usize,
}

impl BlockLayout {
    pub fn new(s_dims: Vec<usize>, h_dims: Vec<usize>, c_dim: usize) -> Result<Self> {
        if s_dims.is_empty() {
            return Err(Error::Validation("layout needs at least one layer".into()));
        }
        if h_dims.len() + 1 != s_dims.len() {
            return Err(Error::Validation(format!(
                "layout with {} layers needs {} carrier widths, got {}",
                s_dims.len(),
                s_dims.len() - 1,
                h_dims.len()
            )));
        }
        if s_dims.iter().chain(h_dims.iter()).any(|&d| d == 0) || c_dim == 0 {
            return Err(Error::Validation(
                "layout dimensions must be positive".into(),
            ));
        }
        Ok(BlockLayout {
            s_dims,
            h_dims,
            c_dim,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.s_dims.len()
    }

    /// Total width of the assembled representation z.
    pub fn latent_dim(&self) -> usize {
        self.s_dims.iter().sum::<usize>() + self.c_dim
    }

    /// Carrier width emitted by layer i (the residual at the last layer).
    pub fn carrier_dim(&self, layer: usize) -> usize {
        if layer + 1 < self.num_layers() {
            self.h_dims[layer]
        } else {
            self.c_dim
        }
    }

    /// Full width of z^i = (s^i; carrier).
    pub fn layer_out_dim(&self, layer: usize) -> usize {
        self.s_dims[layer] + self.carrier_dim(layer)
    }

    /// Offset of s^i within the assembled z.
    pub fn block_offset(&self, layer: usize) -> usize {
        self.s_dims[..layer].iter().sum()
    }

    pub fn residual_offset(&self) -> usize {
        self.s_dims.iter().sum()
    }

    /// Traversable blocks: the L feature blocks followed by the residual's
    /// 2-wide sub-blocks.
    pub fn traversal_blocks(&self) -> usize {
        self.num_layers() + self.c_dim.div_ceil(2)
    }

    /// (offset, width) within z of a traversable block.
    pub fn traversal_span(&self, block_index: usize) -> Result<(usize, usize)> {
        let l = self.num_layers();
        if block_index < l {
            return Ok((self.block_offset(block_index), self.s_dims[block_index]));
        }
        let sub = block_index - l;
        if sub >= self.c_dim.div_ceil(2) {
            return Err(Error::Validation(format!(
                "block index {} out of range ({} traversable blocks)",
                block_index,
                self.traversal_blocks()
            )));
        }
        let offset = self.residual_offset() + 2 * sub;
        let width = (self.c_dim - 2 * sub).min(2);
        Ok((offset, width))
    }
}

/// Training regime. Decides which auxiliary parameter groups exist.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Supervised,
    Unsupervised,
}

/// Architecture hyperparameters (everything except the learned values).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BhivaeArch {
    pub layout: BlockLayout,
    pub data_dim: usize,
    pub mode: Mode,
    /// Hidden widths of each encoder layer's trunk (one list per layer).
    pub enc_hidden: Vec<Vec<usize>>,
    /// Shared merge-space width m for the part decoders.
    pub merge_dim: usize,
    /// Hidden widths of the merge decoder.
    pub dec_hidden: Vec<usize>,
    /// Class count n_i per layer (supervised mode; one per layer).
    pub class_counts: Vec<usize>,
    /// Hidden widths of each per-layer discriminator (unsupervised mode).
    pub disc_hidden: Vec<usize>,
}

impl BhivaeArch {
    pub fn validate(&self) -> Result<()> {
        let l = self.layout.num_layers();
        if self.enc_hidden.len() != l {
            return Err(Error::Validation(format!(
                "enc_hidden needs {} entries, got {}",
                l,
                self.enc_hidden.len()
            )));
        }
        if self.enc_hidden.iter().any(|h| h.is_empty()) {
            return Err(Error::Validation(
                "each encoder layer needs at least one hidden width".into(),
            ));
        }
        if self.data_dim == 0 || self.merge_dim == 0 {
            return Err(Error::Validation(
                "data_dim and merge_dim must be positive".into(),
            ));
        }
        match self.mode {
            Mode::Supervised => {
                if self.class_counts.len() != l {
                    return Err(Error::Validation(format!(
                        "supervised mode needs {} class counts, got {}",
                        l,
                        self.class_counts.len()
                    )));
                }
                if self.class_counts.iter().any(|&n| n < 2) {
                    return Err(Error::Validation(
                        "class counts must be at least 2".into(),
                    ));
                }
            }
            Mode::Unsupervised => {
                if self.disc_hidden.is_empty() {
                    return Err(Error::Validation(
                        "unsupervised mode needs discriminator hidden widths".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    fn enc_in_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.data_dim
        } else {
            self.layout.h_dims[layer - 1]
        }
    }
}

/// All learned parameter groups.
#[derive(Clone, Debug)]
pub struct BhivaeParams {
    pub arch: BhivaeArch,
    pub enc_trunks: Vec<Mlp>,
    pub enc_means: Vec<Mlp>,
    /// Log-variance heads (supervised mode only).
    pub enc_logvars: Vec<Mlp>,
    /// L feature-block decoders plus one residual decoder.
    pub part_decoders: Vec<Mlp>,
    pub merge_decoder: Mlp,
    /// Per-layer softmax classifiers C_i over s^i (supervised mode).
    pub classifiers: Vec<Mlp>,
    /// Per-layer linear maps from carrier width to classifier input width.
    pub projections: Vec<Mlp>,
    /// Per-layer 3-class discriminators (unsupervised mode).
    pub discriminators: Vec<Mlp>,
}

fn single_layer(in_dim: usize, out_dim: usize) -> Result<MlpSpec> {
    MlpSpec::new(vec![in_dim, out_dim], Activation::Relu, Activation::Identity)
}

impl BhivaeParams {
    pub fn init(arch: &BhivaeArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let l = arch.layout.num_layers();
        let mut counter = 0u64;
        let mut next_seed = || {
            counter += 1;
            subseed(seed, counter)
        };

        let mut enc_trunks = Vec::with_capacity(l);
        let mut enc_means = Vec::with_capacity(l);
        let mut enc_logvars = Vec::new();
        for i in 0..l {
            let mut sizes = vec![arch.enc_in_dim(i)];
            sizes.extend(&arch.enc_hidden[i]);
            let trunk_spec = MlpSpec::new(sizes, Activation::Relu, Activation::Relu)?;
            let trunk_out = trunk_spec.out_dim();
            enc_trunks.push(init_mlp(&trunk_spec, next_seed())?);
            let out = arch.layout.layer_out_dim(i);
            enc_means.push(init_mlp(&single_layer(trunk_out, out)?, next_seed())?);
            if arch.mode == Mode::Supervised {
                enc_logvars.push(init_mlp(&single_layer(trunk_out, out)?, next_seed())?);
            }
        }

        let mut part_decoders = Vec::with_capacity(l + 1);
        for i in 0..l {
            part_decoders.push(init_mlp(
                &single_layer(arch.layout.s_dims[i], arch.merge_dim)?,
                next_seed(),
            )?);
        }
        part_decoders.push(init_mlp(
            &single_layer(arch.layout.c_dim, arch.merge_dim)?,
            next_seed(),
        )?);

        let mut merge_sizes = vec![(l + 1) * arch.merge_dim];
        merge_sizes.extend(&arch.dec_hidden);
        merge_sizes.push(arch.data_dim);
        let merge_spec = MlpSpec::new(merge_sizes, Activation::Relu, Activation::Sigmoid)?;
        let merge_decoder = init_mlp(&merge_spec, next_seed())?;

        let mut classifiers = Vec::new();
        let mut projections = Vec::new();
        let mut discriminators = Vec::new();
        match arch.mode {
            Mode::Supervised => {
                for i in 0..l {
                    classifiers.push(init_mlp(
                        &single_layer(arch.layout.s_dims[i], arch.class_counts[i])?,
                        next_seed(),
                    )?);
                    projections.push(init_mlp(
                        &single_layer(arch.layout.carrier_dim(i), arch.layout.s_dims[i])?,
                        next_seed(),
                    )?);
                }
            }
            Mode::Unsupervised => {
                for i in 0..l {
                    let mut sizes = vec![arch.layout.layer_out_dim(i)];
                    sizes.extend(&arch.disc_hidden);
                    sizes.push(3);
                    discriminators.push(init_mlp(
                        &MlpSpec::new(sizes, Activation::Relu, Activation::Identity)?,
                        next_seed(),
                    )?);
                }
            }
        }

        Ok(BhivaeParams {
            arch: arch.clone(),
            enc_trunks,
            enc_means,
            enc_logvars,
            part_decoders,
            merge_decoder,
            classifiers,
            projections,
            discriminators,
        })
    }

    /// Visit every (name, array) parameter pair in a fixed order.
    pub fn visit_params<'a>(&'a self, visit: &mut impl FnMut(String, &'a Array)) {
        for (i, trunk) in self.enc_trunks.iter().enumerate() {
            trunk.visit_params(&format!("enc.{i}.trunk"), visit);
        }
        for (i, mean) in self.enc_means.iter().enumerate() {
            mean.visit_params(&format!("enc.{i}.mean"), visit);
        }
        for (i, lv) in self.enc_logvars.iter().enumerate() {
            lv.visit_params(&format!("enc.{i}.logvar"), visit);
        }
        for (i, part) in self.part_decoders.iter().enumerate() {
            part.visit_params(&format!("dec.part.{i}"), visit);
        }
        self.merge_decoder.visit_params("dec.merge", visit);
        for (i, cls) in self.classifiers.iter().enumerate() {
            cls.visit_params(&format!("cls.{i}"), visit);
        }
        for (i, proj) in self.projections.iter().enumerate() {
            proj.visit_params(&format!("proj.{i}"), visit);
        }
        for (i, disc) in self.discriminators.iter().enumerate() {
            disc.visit_params(&format!("disc.{i}"), visit);
        }
    }

    pub fn visit_params_mut(&mut self, visit: &mut impl FnMut(String, &mut Array)) {
        for (i, trunk) in self.enc_trunks.iter_mut().enumerate() {
            trunk.visit_params_mut(&format!("enc.{i}.trunk"), visit);
        }
        for (i, mean) in self.enc_means.iter_mut().enumerate() {
            mean.visit_params_mut(&format!("enc.{i}.mean"), visit);
        }
        for (i, lv) in self.enc_logvars.iter_mut().enumerate() {
            lv.visit_params_mut(&format!("enc.{i}.logvar"), visit);
        }
        for (i, part) in self.part_decoders.iter_mut().enumerate() {
            part.visit_params_mut(&format!("dec.part.{i}"), visit);
        }
        self.merge_decoder.visit_params_mut("dec.merge", visit);
        for (i, cls) in self.classifiers.iter_mut().enumerate() {
            cls.visit_params_mut(&format!("cls.{i}"), visit);
        }
        for (i, proj) in self.projections.iter_mut().enumerate() {
            proj.visit_params_mut(&format!("proj.{i}"), visit);
        }
        for (i, disc) in self.discriminators.iter_mut().enumerate() {
            disc.visit_params_mut(&format!("disc.{i}"), visit);
        }
    }

    /// Bind every parameter group's current values.
    pub fn bind_all(&self, b: &mut Bindings) {
        self.visit_params(&mut |name, arr| {
            b.set(name, arr.clone());
        });
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum EncodeMode {
    Deterministic,
    Stochastic,
}

/// Encoder outputs: per-layer splits plus the distributions behind them.
#[derive(Clone, Debug)]
pub struct LatentCode {
    /// Feature blocks s^1..s^L, each [batch, s_i].
    pub s_parts: Vec<Array>,
    /// Residual c^L, [batch, c].
    pub c_part: Array,
    /// Intermediate carriers h^1..h^{L-1}.
    pub h_parts: Vec<Array>,
    /// Per-layer posterior means over z^i (always recorded).
    pub means: Vec<Array>,
    /// Per-layer log-variances (stochastic mode).
    pub log_vars: Option<Vec<Array>>,
    /// Noise draws used by stochastic encoding, for exact replay.
    pub noises: Option<Vec<Array>>,
}

impl BhivaeParams {
    /// Encode a [batch, data_dim] input.
    ///
    /// Deterministic mode returns posterior means and ignores `seed`;
    /// stochastic mode reparameterizes with z = μ + exp(lv/2)·ε.
    pub fn encode(&self, x: &Array, mode: EncodeMode, seed: u64) -> Result<LatentCode> {
        let noises = match mode {
            EncodeMode::Deterministic => None,
            EncodeMode::Stochastic => {
                let batch = x.shape()[0];
                let l = self.arch.layout.num_layers();
                let mut draws = Vec::with_capacity(l);
                for i in 0..l {
                    let dim = self.arch.layout.layer_out_dim(i);
                    let mut eps = Array::zeros(&[batch, dim]);
                    Stream::derive(seed, StreamKind::EncodeNoise, i as u64)
                        .fill_normal(eps.data_mut());
                    draws.push(eps);
                }
                Some(draws)
            }
        };
        self.encode_with_noises(x, noises)
    }

    /// Encode with explicit noise draws (None = deterministic).
    pub fn encode_with_noises(&self, x: &Array, noises: Option<Vec<Array>>) -> Result<LatentCode> {
        if x.rank() != 2 || x.shape()[1] != self.arch.data_dim {
            return Err(Error::Validation(format!(
                "encode expects [batch, {}], got {:?}",
                self.arch.data_dim,
                x.shape()
            )));
        }
        if noises.is_some() && self.enc_logvars.is_empty() {
            return Err(Error::Contract(
                "stochastic encoding requires log-variance heads (supervised mode)".into(),
            ));
        }
        let layout = &self.arch.layout;
        let l = layout.num_layers();
        let mut s_parts = Vec::with_capacity(l);
        let mut h_parts = Vec::with_capacity(l.saturating_sub(1));
        let mut means = Vec::with_capacity(l);
        let mut log_vars = noises.as_ref().map(|_| Vec::with_capacity(l));
        let mut c_part = None;

        let mut carrier = x.clone();
        for i in 0..l {
            let trunk_out = self.enc_trunks[i].forward(&carrier)?;
            let mu = self.enc_means[i].forward(&trunk_out)?;
            let z = match &noises {
                None => mu.clone(),
                Some(draws) => {
                    let lv = self.enc_logvars[i].forward(&trunk_out)?;
                    let eps = &draws[i];
                    if eps.shape() != mu.shape() {
                        return Err(Error::Validation(format!(
                            "noise for layer {} has shape {:?}, expected {:?}",
                            i,
                            eps.shape(),
                            mu.shape()
                        )));
                    }
                    let mut z = mu.clone();
                    for ((zv, &lvv), &ev) in
                        z.data_mut().iter_mut().zip(lv.data()).zip(eps.data())
                    {
                        *zv += (0.5 * lvv).exp() * ev;
                    }
                    log_vars.as_mut().unwrap().push(lv);
                    z
                }
            };
            means.push(mu);
            let (s, rest) = split_last_axis(&z, layout.s_dims[i]);
            s_parts.push(s);
            if i + 1 < l {
                h_parts.push(rest.clone());
                carrier = rest;
            } else {
                c_part = Some(rest);
            }
        }

        Ok(LatentCode {
            s_parts,
            c_part: c_part.expect("at least one layer"),
            h_parts,
            means,
            log_vars,
            noises,
        })
    }

    /// Decode an assembled [batch, d(z)] representation to pixel space.
    pub fn decode(&self, z: &Array) -> Result<Array> {
        let layout = &self.arch.layout;
        if z.rank() != 2 || z.shape()[1] != layout.latent_dim() {
            return Err(Error::Validation(format!(
                "decode expects [batch, {}], got {:?}",
                layout.latent_dim(),
                z.shape()
            )));
        }
        let l = layout.num_layers();
        let mut merged: Vec<Array> = Vec::with_capacity(l + 1);
        for i in 0..l {
            let block = slice_last_axis(z, layout.block_offset(i), layout.s_dims[i]);
            merged.push(self.part_decoders[i].forward(&block)?);
        }
        let resid = slice_last_axis(z, layout.residual_offset(), layout.c_dim);
        merged.push(self.part_decoders[l].forward(&resid)?);
        let cat = concat_last_axis(&merged);
        self.merge_decoder.forward(&cat)
    }
}

/// Concatenate feature blocks and residual into z = (s^1;…;s^L;c^L).
pub fn assemble(code: &LatentCode) -> Array {
    let mut parts: Vec<&Array> = code.s_parts.iter().collect();
    parts.push(&code.c_part);
    concat_refs(&parts)
}

/// Split an assembled z back into (s_parts, c_part).
pub fn split(z: &Array, layout: &BlockLayout) -> Result<(Vec<Array>, Array)> {
    if z.rank() != 2 || z.shape()[1] != layout.latent_dim() {
        return Err(Error::Validation(format!(
            "split expects [batch, {}], got {:?}",
            layout.latent_dim(),
            z.shape()
        )));
    }
    let mut s_parts = Vec::with_capacity(layout.num_layers());
    for i in 0..layout.num_layers() {
        s_parts.push(slice_last_axis(z, layout.block_offset(i), layout.s_dims[i]));
    }
    let c_part = slice_last_axis(z, layout.residual_offset(), layout.c_dim);
    Ok((s_parts, c_part))
}

/// Set all coordinates of one traversable block to `t`.
pub fn traverse_block(
    z: &Array,
    layout: &BlockLayout,
    block_index: usize,
    t: f64,
) -> Result<Array> {
    if z.rank() != 2 || z.shape()[1] != layout.latent_dim() {
        return Err(Error::Validation(format!(
            "traverse expects [batch, {}], got {:?}",
            layout.latent_dim(),
            z.shape()
        )));
    }
    let (offset, width) = layout.traversal_span(block_index)?;
    let mut out = z.clone();
    let d = layout.latent_dim();
    let rows = z.shape()[0];
    for r in 0..rows {
        for v in &mut out.data_mut()[r * d + offset..r * d + offset + width] {
            *v = t;
        }
    }
    Ok(out)
}

fn split_last_axis(z: &Array, first_width: usize) -> (Array, Array) {
    let w = z.shape()[1];
    (
        slice_last_axis(z, 0, first_width),
        slice_last_axis(z, first_width, w - first_width),
    )
}

fn slice_last_axis(a: &Array, start: usize, len: usize) -> Array {
    let w = a.shape()[1];
    let rows = a.shape()[0];
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * w + start..r * w + start + len]);
    }
    Array::new(vec![rows, len], data).expect("slice shape")
}

fn concat_refs(parts: &[&Array]) -> Array {
    let rows = parts[0].shape()[0];
    let total: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            let w = p.shape()[1];
            data.extend_from_slice(&p.data()[r * w..(r + 1) * w]);
        }
    }
    Array::new(vec![rows, total], data).expect("concat shape")
}

fn concat_last_axis(parts: &[Array]) -> Array {
    let refs: Vec<&Array> = parts.iter().collect();
    concat_refs(&refs)
}

/// Encoder subgraph handles (training-time form).
pub struct EncoderNodes {
    /// s^1..s^L.
    pub s_nodes: Vec<NodeId>,
    /// h^1..h^{L-1} then c^L.
    pub carrier_nodes: Vec<NodeId>,
    /// Full per-layer z^i = (s^i; carrier^i).
    pub z_nodes: Vec<NodeId>,
    pub mean_nodes: Vec<NodeId>,
    pub logvar_nodes: Option<Vec<NodeId>>,
}

impl EncoderNodes {
    pub fn c_node(&self) -> NodeId {
        *self.carrier_nodes.last().expect("at least one layer")
    }
}

impl BhivaeParams {
    /// Insert the encoder into `g`. Stochastic form adds noise inputs named
    /// `eps.{i}` of shape [batch, layer_out_dim(i)].
    pub fn encoder_nodes(
        &self,
        g: &mut Graph,
        x: NodeId,
        batch: usize,
        stochastic: bool,
    ) -> Result<EncoderNodes> {
        let layout = &self.arch.layout;
        let l = layout.num_layers();
        let mut s_nodes = Vec::with_capacity(l);
        let mut carrier_nodes = Vec::with_capacity(l);
        let mut z_nodes = Vec::with_capacity(l);
        let mut mean_nodes = Vec::with_capacity(l);
        let mut logvar_nodes = stochastic.then(Vec::new);

        let mut carrier = x;
        for i in 0..l {
            let trunk = self.enc_trunks[i].nodes(g, carrier, &format!("enc.{i}.trunk"))?;
            let mu = self.enc_means[i].nodes(g, trunk, &format!("enc.{i}.mean"))?;
            mean_nodes.push(mu);
            let z = if stochastic {
                let lv = self.enc_logvars[i].nodes(g, trunk, &format!("enc.{i}.logvar"))?;
                logvar_nodes.as_mut().unwrap().push(lv);
                let eps = g.input(format!("eps.{i}"), &[batch, layout.layer_out_dim(i)])?;
                let half = g.scale(lv, 0.5)?;
                let sd = g.exp(half);
                let noise = g.mul(sd, eps)?;
                g.add(mu, noise)?
            } else {
                mu
            };
            z_nodes.push(z);
            let s = g.slice(z, 0, layout.s_dims[i])?;
            let rest = g.slice(z, layout.s_dims[i], layout.carrier_dim(i))?;
            s_nodes.push(s);
            carrier_nodes.push(rest);
            carrier = rest;
        }

        Ok(EncoderNodes {
            s_nodes,
            carrier_nodes,
            z_nodes,
            mean_nodes,
            logvar_nodes,
        })
    }

    /// Insert the decoder into `g`, from per-block nodes to reconstruction.
    pub fn decoder_nodes(
        &self,
        g: &mut Graph,
        s_nodes: &[NodeId],
        c_node: NodeId,
    ) -> Result<NodeId> {
        let l = self.arch.layout.num_layers();
        let mut merged = Vec::with_capacity(l + 1);
        for (i, &s) in s_nodes.iter().enumerate() {
            merged.push(self.part_decoders[i].nodes(g, s, &format!("dec.part.{i}"))?);
        }
        merged.push(self.part_decoders[l].nodes(g, c_node, &format!("dec.part.{l}"))?);
        let cat = g.concat(&merged)?;
        self.merge_decoder.nodes(g, cat, "dec.merge")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_layout() -> BlockLayout {
        BlockLayout::new(vec![2, 2, 2], vec![8, 8], 8).unwrap()
    }

    fn tiny_arch(mode: Mode) -> BhivaeArch {
        BhivaeArch {
            layout: BlockLayout::new(vec![2, 2], vec![4], 3).unwrap(),
            data_dim: 16,
            mode,
            enc_hidden: vec![vec![8], vec![8]],
            merge_dim: 6,
            dec_hidden: vec![10],
            class_counts: if mode == Mode::Supervised {
                vec![3, 4]
            } else {
                vec![]
            },
            disc_hidden: if mode == Mode::Unsupervised {
                vec![8]
            } else {
                vec![]
            },
        }
    }

    #[test]
    fn layout_dims() {
        let layout = paper_layout();
        assert_eq!(layout.latent_dim(), 14);
        assert_eq!(layout.num_layers(), 3);
        assert_eq!(layout.layer_out_dim(0), 10);
        assert_eq!(layout.layer_out_dim(2), 10);
        assert_eq!(layout.carrier_dim(2), 8);

        let single = BlockLayout::new(vec![3], vec![], 5).unwrap();
        assert_eq!(single.latent_dim(), 8);

        assert!(BlockLayout::new(vec![2, 2], vec![], 4).is_err());
        assert!(BlockLayout::new(vec![], vec![], 4).is_err());
    }

    #[test]
    fn traversal_spans() {
        let layout = paper_layout();
        // 3 feature blocks + 4 residual sub-blocks.
        assert_eq!(layout.traversal_blocks(), 7);
        assert_eq!(layout.traversal_span(0).unwrap(), (0, 2));
        assert_eq!(layout.traversal_span(2).unwrap(), (4, 2));
        assert_eq!(layout.traversal_span(3).unwrap(), (6, 2));
        assert_eq!(layout.traversal_span(6).unwrap(), (12, 2));
        assert!(layout.traversal_span(7).is_err());

        // Odd residual width leaves a 1-wide tail sub-block.
        let odd = BlockLayout::new(vec![2], vec![], 3).unwrap();
        assert_eq!(odd.traversal_blocks(), 3);
        assert_eq!(odd.traversal_span(2).unwrap(), (4, 1));
    }

    #[test]
    fn encode_shapes_and_purity() {
        let params = BhivaeParams::init(&tiny_arch(Mode::Supervised), 42).unwrap();
        let x = Array::new(vec![5, 16], (0..80).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let code = params.encode(&x, EncodeMode::Deterministic, 0).unwrap();
        assert_eq!(code.s_parts.len(), 2);
        assert_eq!(code.s_parts[0].shape(), &[5, 2]);
        assert_eq!(code.s_parts[1].shape(), &[5, 2]);
        assert_eq!(code.c_part.shape(), &[5, 3]);
        assert_eq!(code.h_parts.len(), 1);
        assert_eq!(code.h_parts[0].shape(), &[5, 4]);

        let again = params.encode(&x, EncodeMode::Deterministic, 99).unwrap();
        assert_eq!(assemble(&code).data(), assemble(&again).data());
    }

    #[test]
    fn stochastic_with_zero_noise_matches_deterministic() {
        let params = BhivaeParams::init(&tiny_arch(Mode::Supervised), 1).unwrap();
        let x = Array::new(vec![3, 16], (0..48).map(|i| (i % 5) as f64 / 5.0).collect()).unwrap();
        let zero_noises: Vec<Array> = (0..2)
            .map(|i| Array::zeros(&[3, params.arch.layout.layer_out_dim(i)]))
            .collect();
        let stoch = params.encode_with_noises(&x, Some(zero_noises)).unwrap();
        let det = params.encode(&x, EncodeMode::Deterministic, 0).unwrap();
        assert_eq!(assemble(&stoch).data(), assemble(&det).data());
        assert!(stoch.log_vars.is_some());
    }

    #[test]
    fn stochastic_replays_by_seed() {
        let params = BhivaeParams::init(&tiny_arch(Mode::Supervised), 1).unwrap();
        let x = Array::new(vec![4, 16], vec![0.25; 64]).unwrap();
        let a = params.encode(&x, EncodeMode::Stochastic, 7).unwrap();
        let b = params.encode(&x, EncodeMode::Stochastic, 7).unwrap();
        let c = params.encode(&x, EncodeMode::Stochastic, 8).unwrap();
        assert_eq!(assemble(&a).data(), assemble(&b).data());
        assert_ne!(assemble(&a).data(), assemble(&c).data());
    }

    #[test]
    fn assemble_split_roundtrip() {
        let params = BhivaeParams::init(&tiny_arch(Mode::Unsupervised), 3).unwrap();
        let x = Array::new(vec![4, 16], (0..64).map(|i| (i % 11) as f64 / 11.0).collect()).unwrap();
        let code = params.encode(&x, EncodeMode::Deterministic, 0).unwrap();
        let z = assemble(&code);
        assert_eq!(z.shape(), &[4, 7]);
        let (s_parts, c_part) = split(&z, &params.arch.layout).unwrap();
        for (orig, back) in code.s_parts.iter().zip(&s_parts) {
            assert_eq!(orig.data(), back.data());
        }
        assert_eq!(code.c_part.data(), c_part.data());
    }

    #[test]
    fn decode_stays_in_unit_interval() {
        let params = BhivaeParams::init(&tiny_arch(Mode::Unsupervised), 5).unwrap();
        let z = Array::new(vec![3, 7], (0..21).map(|i| i as f64 - 10.0).collect()).unwrap();
        let xh = params.decode(&z).unwrap();
        assert_eq!(xh.shape(), &[3, 16]);
        assert!(xh.data().iter().all(|&v| v > 0.0 && v < 1.0));

        // Identical z rows decode identically.
        let z2 = Array::new(vec![2, 7], [z.row(0), z.row(0)].concat()).unwrap();
        let xh2 = params.decode(&z2).unwrap();
        assert_eq!(xh2.row(0), xh2.row(1));
    }

    #[test]
    fn traverse_touches_exactly_one_block() {
        let layout = paper_layout();
        let z = Array::new(vec![1, 14], (0..14).map(|i| i as f64 / 10.0).collect()).unwrap();
        let out = traverse_block(&z, &layout, 1, -3.0).unwrap();
        for (j, (&a, &b)) in z.data().iter().zip(out.data()).enumerate() {
            if (2..4).contains(&j) {
                assert_eq!(b, -3.0);
            } else {
                assert_eq!(a, b);
            }
        }

        // Disjoint blocks commute and re-setting a constant block is a no-op.
        let ab = traverse_block(&traverse_block(&z, &layout, 0, 1.0).unwrap(), &layout, 3, 2.0)
            .unwrap();
        let ba = traverse_block(&traverse_block(&z, &layout, 3, 2.0).unwrap(), &layout, 0, 1.0)
            .unwrap();
        assert_eq!(ab.data(), ba.data());
        let fixed = traverse_block(&ab, &layout, 0, 1.0).unwrap();
        assert_eq!(fixed.data(), ab.data());

        assert!(traverse_block(&z, &layout, 7, 0.0).is_err());
    }

    #[test]
    fn graph_encoder_decoder_match_eager() {
        let params = BhivaeParams::init(&tiny_arch(Mode::Unsupervised), 11).unwrap();
        let x = Array::new(vec![3, 16], (0..48).map(|i| (i % 13) as f64 / 13.0).collect())
            .unwrap();

        let mut g = Graph::new();
        let xn = g.input("x", &[3, 16]).unwrap();
        let enc = params.encoder_nodes(&mut g, xn, 3, false).unwrap();
        let recon = params
            .decoder_nodes(&mut g, &enc.s_nodes, enc.c_node())
            .unwrap();
        let mut b = Bindings::new();
        b.set("x", x.clone());
        params.bind_all(&mut b);
        let eval = g.evaluate(&b).unwrap();

        let code = params.encode(&x, EncodeMode::Deterministic, 0).unwrap();
        let eager = params.decode(&assemble(&code)).unwrap();
        for (a, e) in eval.value(recon).data().iter().zip(eager.data()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_reaches_every_encoder_group() {
        let params = BhivaeParams::init(&tiny_arch(Mode::Unsupervised), 17).unwrap();
        let mut g = Graph::new();
        let xn = g.input("x", &[4, 16]).unwrap();
        let enc = params.encoder_nodes(&mut g, xn, 4, false).unwrap();
        let recon = params
            .decoder_nodes(&mut g, &enc.s_nodes, enc.c_node())
            .unwrap();
        // A simple scalar objective touching every pixel.
        let sq = g.mul(recon, recon).unwrap();
        let loss = g.mean_all(sq);

        let mut b = Bindings::new();
        let x = Array::new(vec![4, 16], (0..64).map(|i| (i % 9) as f64 / 9.0).collect()).unwrap();
        b.set("x", x);
        params.bind_all(&mut b);
        let eval = g.evaluate(&b).unwrap();

        // Gradient must be nonzero for every encoder weight matrix.
        let wrt = g.inputs_with_prefix("enc.");
        let weight_ids: Vec<_> = wrt
            .iter()
            .filter(|(n, _)| n.ends_with(".w"))
            .cloned()
            .collect();
        assert!(weight_ids.len() >= 4);
        let ids: Vec<NodeId> = weight_ids.iter().map(|&(_, id)| id).collect();
        let grads = g.gradients(&eval, loss, &ids).unwrap();
        for (name, id) in &weight_ids {
            let norm: f64 = grads[id].data().iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "zero gradient for {name}");
        }
    }
}
