//! The U-shaped segmentation network: deformable patch embedding, a
//! four-stage transformer encoder, a mirrored decoder with skip fusion, and
//! a full-resolution head with optional auxiliary heads.

use crate::attention::{alternating_kind, AttentionConfig, AttentionKind, TransformerBlock};
use crate::deform::{EmbedKind, PatchEmbedDown, PatchEmbedFirst};
use crate::error::{Error, Result};
use crate::layers::{map_to_tokens, tokens_to_map, Conv2d, ConvTranspose2d, LayerNorm, Linear};
use crate::ops::Conv2dOpts;
use crate::params::{Init, ParamStore, Session, WEIGHT_STD};
use crate::posenc::{PosEnc, PosEncKind};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Which attention layers the transformer blocks use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionMix {
    /// NMSA at even block positions, DMSA at odd.
    NmsaDmsa,
    /// Fixed windows everywhere.
    WmsaWmsa,
}

impl AttentionMix {
    pub fn name(self) -> &'static str {
        match self {
            AttentionMix::NmsaDmsa => "nmsa+dmsa",
            AttentionMix::WmsaWmsa => "wmsa+wmsa",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::NmsaDmsa, Self::WmsaWmsa].into_iter().find(|k| k.name() == s)
    }

    pub fn kind(self, block: usize) -> AttentionKind {
        match self {
            AttentionMix::NmsaDmsa => alternating_kind(block),
            AttentionMix::WmsaWmsa => AttentionKind::Wmsa,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub variant: String,
    pub in_channels: usize,
    pub embed_dims: [usize; 4],
    pub heads: [usize; 4],
    pub depths: [usize; 4],
    pub decoder_depths: [usize; 3],
    pub neighborhood: usize,
    pub window: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    pub deep_supervision: bool,
    pub attention: AttentionMix,
    pub posenc: PosEncKind,
    pub embedding: EmbedKind,
}

impl NetworkConfig {
    fn preset(variant: &str, embed_dims: [usize; 4], heads: [usize; 4], window: usize, num_classes: usize) -> Self {
        Self {
            variant: variant.to_string(),
            in_channels: 1,
            embed_dims,
            heads,
            depths: [1, 2, 5, 1],
            decoder_depths: [1, 1, 1],
            neighborhood: 7,
            window,
            patch_size: 4,
            num_classes,
            deep_supervision: true,
            attention: AttentionMix::NmsaDmsa,
            posenc: PosEncKind::MsDepe,
            embedding: EmbedKind::Deformable,
        }
    }

    pub fn tiny() -> Self {
        Self::preset("tiny", [64, 128, 256, 512], [2, 4, 8, 16], 7, 9)
    }

    pub fn base() -> Self {
        Self::preset("base", [128, 256, 512, 1024], [4, 8, 16, 32], 7, 9)
    }

    /// Desk-scale configuration used for tests and the synthetic task.
    pub fn nano() -> Self {
        Self::preset("nano", [16, 32, 64, 128], [1, 2, 4, 8], 4, 3)
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "base" => Some(Self::base()),
            "nano" => Some(Self::nano()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::config("in_channels", "must be >= 1"));
        }
        for i in 0..4 {
            if self.embed_dims[i] == 0 {
                return Err(Error::config("embed_dims", "entries must be >= 1"));
            }
            if i > 0 && self.embed_dims[i] != 2 * self.embed_dims[i - 1] {
                return Err(Error::config(
                    "embed_dims",
                    format!("must double between stages, got {:?}", self.embed_dims),
                ));
            }
            if self.heads[i] == 0 || self.embed_dims[i] % self.heads[i] != 0 {
                return Err(Error::config(
                    "heads",
                    format!("heads[{i}]={} does not divide embed_dims[{i}]={}", self.heads[i], self.embed_dims[i]),
                ));
            }
            if self.depths[i] == 0 {
                return Err(Error::config("depths", "every stage needs at least one block"));
            }
        }
        if self.decoder_depths.contains(&0) {
            return Err(Error::config("decoder_depths", "every stage needs at least one block"));
        }
        if self.neighborhood == 0 || self.neighborhood % 2 == 0 {
            return Err(Error::config("neighborhood", format!("must be odd, got {}", self.neighborhood)));
        }
        if self.window == 0 {
            return Err(Error::config("window", "must be >= 1"));
        }
        if self.patch_size < 2 || self.patch_size % 2 != 0 {
            return Err(Error::config("patch_size", format!("must be even and >= 2, got {}", self.patch_size)));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be >= 2"));
        }
        Ok(())
    }

    /// Input extents must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        self.patch_size * 8
    }

    fn attention(&self, stage: usize, block: usize) -> Result<AttentionConfig> {
        AttentionConfig::new(
            self.embed_dims[stage],
            self.heads[stage],
            self.attention.kind(block),
            self.neighborhood,
            self.window,
        )
    }
}

#[derive(Clone, Debug)]
struct DecoderStage {
    up: ConvTranspose2d,
    fuse: Linear,
    blocks: Vec<TransformerBlock>,
    aux: Option<Conv2d>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub cfg: NetworkConfig,
    embed: PatchEmbedFirst,
    downs: Vec<PatchEmbedDown>,
    posenc: Vec<PosEnc>,
    encoder: Vec<Vec<TransformerBlock>>,
    decoder: Vec<DecoderStage>,
    norm_out: LayerNorm,
    head_up1: ConvTranspose2d,
    head_up2: ConvTranspose2d,
    head: Conv2d,
}

/// Tape handles for one forward pass.
#[derive(Clone, Debug)]
pub struct NetworkOutput {
    /// `[classes, H, W]`.
    pub logits: Var,
    /// Auxiliary logits from the finest to the coarsest decoder stage.
    pub aux_logits: Vec<Var>,
    /// Encoder grids, finest first.
    pub encoder_grids: Vec<(usize, usize)>,
    /// Decoder stage grids, coarsest first.
    pub decoder_grids: Vec<(usize, usize)>,
}

/// Materialized outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub logits: Tensor,
    pub aux_logits: Vec<Tensor>,
}

impl Network {
    /// Builds the network and its parameters; initialization depends only on
    /// `seed` and parameter names.
    pub fn build(cfg: &NetworkConfig, seed: u64) -> Result<(Network, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let st = &mut store;
        let d = cfg.embed_dims;
        let embed = PatchEmbedFirst::new(st, "embed", cfg.embedding, cfg.in_channels, d[0], cfg.patch_size)?;
        let downs = (0..3).map(|i| PatchEmbedDown::new(st, &format!("down{}", i + 1), d[i], d[i + 1])).collect();
        let posenc = (0..4).map(|i| PosEnc::new(st, &format!("enc{i}.pe"), cfg.posenc, d[i])).collect();
        let mut encoder = Vec::with_capacity(4);
        for i in 0..4 {
            let mut blocks = Vec::with_capacity(cfg.depths[i]);
            for b in 0..cfg.depths[i] {
                blocks.push(TransformerBlock::new(st, &format!("enc{i}.block{b}"), cfg.attention(i, b)?));
            }
            encoder.push(blocks);
        }
        let mut decoder = Vec::with_capacity(3);
        for j in 0..3 {
            let stage = 2 - j;
            let name = format!("dec{j}");
            let up = ConvTranspose2d::new(st, &format!("{name}.up"), d[stage + 1], d[stage], 2);
            let fuse = Linear::new(st, &format!("{name}.fuse"), 2 * d[stage], d[stage]);
            let mut blocks = Vec::with_capacity(cfg.decoder_depths[j]);
            for b in 0..cfg.decoder_depths[j] {
                blocks.push(TransformerBlock::new(st, &format!("{name}.block{b}"), cfg.attention(stage, b)?));
            }
            let aux = cfg.deep_supervision.then(|| {
                Conv2d::new(
                    st,
                    &format!("{name}.aux"),
                    d[stage],
                    cfg.num_classes,
                    1,
                    Conv2dOpts::new(1, 0),
                    Init::TruncNormal(WEIGHT_STD),
                )
            });
            decoder.push(DecoderStage { up, fuse, blocks, aux });
        }
        let norm_out = LayerNorm::new(st, "norm_out", d[0]);
        let head_up1 = ConvTranspose2d::new(st, "head.up1", d[0], d[0], 2);
        let head_up2 = ConvTranspose2d::new(st, "head.up2", d[0], d[0], cfg.patch_size / 2);
        let head = Conv2d::new(
            st,
            "head.out",
            d[0],
            cfg.num_classes,
            1,
            Conv2dOpts::new(1, 0),
            Init::TruncNormal(WEIGHT_STD),
        );
        let net = Network {
            cfg: cfg.clone(),
            embed,
            downs,
            posenc,
            encoder,
            decoder,
            norm_out,
            head_up1,
            head_up2,
            head,
        };
        Ok((net, store))
    }

    pub fn forward(&self, s: &mut Session, image: Var) -> Result<NetworkOutput> {
        let shape = s.shape(image).to_vec();
        let m = self.cfg.required_multiple();
        if shape.len() != 3 || shape[0] != self.cfg.in_channels {
            return Err(Error::dim(format!(
                "network expects a [{}, H, W] image, got {shape:?}",
                self.cfg.in_channels
            )));
        }
        if shape[1] % m != 0 || shape[2] % m != 0 {
            return Err(Error::dim(format!(
                "image {}x{} must have extents that are multiples of {m}",
                shape[1], shape[2]
            )));
        }

        let mut skips = Vec::with_capacity(3);
        let mut encoder_grids = Vec::with_capacity(4);
        let (mut x, mut grid) = self.embed.forward(s, image)?;
        for i in 0..4 {
            if i > 0 {
                (x, grid) = self.downs[i - 1].forward(s, x, grid)?;
            }
            x = self.posenc[i].forward(s, x, grid)?;
            for b in &self.encoder[i] {
                x = b.forward(s, x, grid)?;
            }
            encoder_grids.push(grid);
            if i < 3 {
                skips.push((x, grid));
            }
        }

        let mut aux_logits = Vec::new();
        let mut decoder_grids = Vec::with_capacity(3);
        for stage in &self.decoder {
            let (skip, skip_grid) = skips.pop().expect("three skips");
            let map = tokens_to_map(s, x, grid.0, grid.1)?;
            let up = stage.up.forward(s, map)?;
            let up = map_to_tokens(s, up)?;
            grid = (grid.0 * 2, grid.1 * 2);
            debug_assert_eq!(grid, skip_grid);
            let cat = s.concat(&[up, skip], 1)?;
            x = stage.fuse.forward(s, cat)?;
            for b in &stage.blocks {
                x = b.forward(s, x, grid)?;
            }
            decoder_grids.push(grid);
            if let Some(aux) = &stage.aux {
                let map = tokens_to_map(s, x, grid.0, grid.1)?;
                aux_logits.push(aux.forward(s, map)?);
            }
        }
        aux_logits.reverse();

        let x = self.norm_out.forward(s, x)?;
        let map = tokens_to_map(s, x, grid.0, grid.1)?;
        let y = self.head_up1.forward(s, map)?;
        let y = s.gelu(y);
        let y = self.head_up2.forward(s, y)?;
        let y = s.gelu(y);
        let logits = self.head.forward(s, y)?;
        Ok(NetworkOutput {
            logits,
            aux_logits,
            encoder_grids,
            decoder_grids,
        })
    }

    /// Attention kind of every encoder block, stage by stage.
    pub fn encoder_kinds(&self) -> Vec<Vec<AttentionKind>> {
        self.encoder.iter().map(|st| st.iter().map(|b| b.attn.cfg.kind).collect()).collect()
    }

    /// Inference without gradient tracking.
    pub fn predict(&self, store: &ParamStore, image: &Tensor) -> Result<Prediction> {
        let mut s = Session::inference(store);
        let x = s.constant(image.clone());
        let out = self.forward(&mut s, x)?;
        Ok(Prediction {
            logits: s.value(out.logits).clone(),
            aux_logits: out.aux_logits.iter().map(|&v| s.value(v).clone()).collect(),
        })
    }
}

/// Total scalar parameter count.
pub fn param_count(store: &ParamStore) -> usize {
    store.scalar_count()
}

/// Per-class argmax of `[classes, H, W]` logits.
pub fn argmax_mask(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[0];
    let n = logits.numel() / c;
    let d = logits.data();
    (0..n)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if d[k * n + p] > d[best * n + p] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nano_shapes() {
        let (net, store) = Network::build(&NetworkConfig::nano(), 0).unwrap();
        let mut s = Session::inference(&store);
        let img = s.constant(Tensor::full(&[1, 64, 64], 0.5));
        let out = net.forward(&mut s, img).unwrap();
        assert_eq!(out.encoder_grids, vec![(16, 16), (8, 8), (4, 4), (2, 2)]);
        assert_eq!(out.decoder_grids, vec![(4, 4), (8, 8), (16, 16)]);
        assert_eq!(s.shape(out.logits), &[3, 64, 64]);
        let aux: Vec<Vec<usize>> = out.aux_logits.iter().map(|&v| s.shape(v).to_vec()).collect();
        assert_eq!(aux, vec![vec![3, 16, 16], vec![3, 8, 8], vec![3, 4, 4]]);
    }

    #[test]
    fn rejects_bad_configs_and_inputs() {
        let mut cfg = NetworkConfig::tiny();
        cfg.heads[0] = 3;
        match Network::build(&cfg, 0) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "heads"),
            other => panic!("unexpected {other:?}"),
        }
        let (net, store) = Network::build(&NetworkConfig::nano(), 0).unwrap();
        let err = net.predict(&store, &Tensor::zeros(&[1, 40, 40])).unwrap_err();
        assert!(err.to_string().contains("32"));
    }

    #[test]
    fn argmax_picks_largest() {
        let t = Tensor::new(&[2, 3], vec![0.0, 5.0, 1.0, 1.0, 2.0, 1.0]).unwrap();
        assert_eq!(argmax_mask(&t), vec![1, 0, 0]);
    }
}
