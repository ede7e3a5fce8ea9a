//! Non-hierarchical ViG: two-stage convolutional patch embedding, learnable
//! position embeddings, a stack of ViG blocks, final RMSNorm, global average
//! pooling and a linear classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::block::{ffn_hidden, vig_block_forward, BlockParams, Mixer, NORM_EPS};
use crate::error::{Error, Result};
use crate::gla::{HeadLayout, GATE_RANK};
use crate::tensor::{conv2d, matmul, rmsnorm, silu, ConvGeometry, Tensor};

pub const PATCH_SIZE: usize = 16;
/// 9×9 convolution, stride 8.
pub const PATCH_STAGE1: ConvGeometry = ConvGeometry {
    kernel: 9,
    stride: 8,
    pad: 4,
};
/// 3×3 convolution, stride 2.
pub const PATCH_STAGE2: ConvGeometry = ConvGeometry {
    kernel: 3,
    stride: 2,
    pad: 1,
};
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViGConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub mixer: Mixer,
}

impl ViGConfig {
    fn imagenet(dim: usize, heads: usize) -> Self {
        Self {
            image_height: 224,
            image_width: 224,
            depth: 12,
            dim,
            heads,
            num_classes: 1000,
            mixer: Mixer::Full,
        }
    }

    pub fn vig_t() -> Self {
        Self::imagenet(192, 3)
    }

    pub fn vig_s() -> Self {
        Self::imagenet(384, 6)
    }

    pub fn vig_b() -> Self {
        Self::imagenet(768, 12)
    }

    /// Desk-scale model: 2 blocks, width 32, one head.
    pub fn tiny(image_height: usize, image_width: usize, num_classes: usize) -> Self {
        Self {
            image_height,
            image_width,
            depth: 2,
            dim: 32,
            heads: 1,
            num_classes,
            mixer: Mixer::Full,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "vig-t" => Some(Self::vig_t()),
            "vig-s" => Some(Self::vig_s()),
            "vig-b" => Some(Self::vig_b()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_height == 0
            || self.image_width == 0
            || self.image_height % PATCH_SIZE != 0
            || self.image_width % PATCH_SIZE != 0
        {
            return Err(Error::InvalidArgument(format!(
                "image size {}×{} is not a positive multiple of {PATCH_SIZE}",
                self.image_height, self.image_width
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidArgument("num_classes must be ≥ 1".into()));
        }
        HeadLayout::new(self.dim, self.heads)?;
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / PATCH_SIZE, self.image_width / PATCH_SIZE)
    }

    /// `T = H·W / p²`.
    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn layout(&self) -> HeadLayout {
        HeadLayout {
            dim: self.dim,
            heads: self.heads,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViGParams {
    pub patch1_w: Tensor,
    pub patch1_b: Tensor,
    pub patch2_w: Tensor,
    pub patch2_b: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub norm: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl ViGParams {
    pub fn init(config: &ViGConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let std = INIT_STD;
        Ok(Self {
            patch1_w: Tensor::randn([9, 9, 3, d], std, &mut rng),
            patch1_b: Tensor::zeros([d]),
            patch2_w: Tensor::randn([3, 3, d, d], std, &mut rng),
            patch2_b: Tensor::zeros([d]),
            pos_embed: Tensor::randn([config.tokens(), d], std, &mut rng),
            blocks: (0..config.depth)
                .map(|_| BlockParams::init(config.layout(), std, &mut rng))
                .collect(),
            norm: Tensor::full([d], 1.0),
            head_w: Tensor::randn([d, config.num_classes], std, &mut rng),
            head_b: Tensor::zeros([config.num_classes]),
        })
    }

    /// Every learnable tensor with a stable dotted name, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_embed.conv1.weight".to_string(), &self.patch1_w),
            ("patch_embed.conv1.bias".to_string(), &self.patch1_b),
            ("patch_embed.conv2.weight".to_string(), &self.patch2_w),
            ("patch_embed.conv2.bias".to_string(), &self.patch2_b),
            ("pos_embed".to_string(), &self.pos_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.extend(b.named_tensors().into_iter().map(|(n, t)| (format!("blocks.{i}.{n}"), t)));
        }
        out.push(("norm".to_string(), &self.norm));
        out.push(("head.weight".to_string(), &self.head_w));
        out.push(("head.bias".to_string(), &self.head_b));
        out
    }

    /// Mutable access in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.patch1_w,
            &mut self.patch1_b,
            &mut self.patch2_w,
            &mut self.patch2_b,
            &mut self.pos_embed,
        ];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.norm);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Rebuild from tensors in canonical order, checking every shape
    /// against a freshly laid out model for `config`.
    pub fn from_tensors(config: &ViGConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut template = Self::zeros_like(config)?;
        let slots = template.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::shape(
                "ViGParams::from_tensors",
                format!("expected {} tensors, got {}", slots.len(), tensors.len()),
            ));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::shape(
                    "ViGParams::from_tensors",
                    format!("expected {:?}, got {:?}", slot.shape(), t.shape()),
                ));
            }
            *slot = t;
        }
        Ok(template)
    }

    fn zeros_like(config: &ViGConfig) -> Result<Self> {
        let mut p = Self::init(config, 0)?;
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(p)
    }
}

fn check_image(img: &Tensor) -> Result<(usize, usize)> {
    match img.shape()[..] {
        [h, w, 3] if h > 0 && w > 0 && h % PATCH_SIZE == 0 && w % PATCH_SIZE == 0 => Ok((h, w)),
        _ => Err(Error::InvalidArgument(format!(
            "image {:?} is not H×W×3 with H, W positive multiples of {PATCH_SIZE}",
            img.shape()
        ))),
    }
}

/// 9×9/8 conv → silu → 3×3/2 conv: an `H×W×3` image to an `H/16 × W/16 × d` grid.
pub fn patch_embed(img: &Tensor, p: &ViGParams) -> Result<Tensor> {
    check_image(img)?;
    let stage1 = silu(&conv2d(img, &p.patch1_w, &p.patch1_b, PATCH_STAGE1)?);
    conv2d(&stage1, &p.patch2_w, &p.patch2_b, PATCH_STAGE2)
}

fn head(tokens: &Tensor, p: &ViGParams) -> Result<Tensor> {
    let pooled = rmsnorm(tokens, &p.norm, NORM_EPS)?.mean_rows();
    let (_, c) = p.head_w.dims2()?;
    let d = pooled.numel();
    let logits = matmul(&pooled.reshape([1, d])?, &p.head_w)?.add_row(&p.head_b)?;
    logits.reshape([c])
}

fn run(img: &Tensor, p: &ViGParams, config: &ViGConfig, pos: &Tensor) -> Result<Tensor> {
    let tokens = patch_embed(img, p)?;
    let (gh, gw) = (tokens.shape()[0], tokens.shape()[1]);
    let mut x = tokens.reshape([gh * gw, config.dim])?.add(pos)?.reshape([gh, gw, config.dim])?;
    for b in &p.blocks {
        x = vig_block_forward(&x, b, config.mixer)?;
    }
    head(&x, p)
}

/// Class logits for one image of the configured size.
pub fn vig_forward(img: &Tensor, p: &ViGParams, config: &ViGConfig) -> Result<Tensor> {
    let (h, w) = check_image(img)?;
    if (h, w) != (config.image_height, config.image_width) {
        return Err(Error::InvalidArgument(format!(
            "image is {h}×{w}, model expects {}×{}",
            config.image_height, config.image_width
        )));
    }
    run(img, p, config, &p.pos_embed)
}

/// Logits at a different resolution, with position embeddings bilinearly
/// resampled to the new token grid.
pub fn vig_forward_at_resolution(img: &Tensor, p: &ViGParams, config: &ViGConfig) -> Result<Tensor> {
    let (h, w) = check_image(img)?;
    let pos = resample_pos_embed(&p.pos_embed, config.grid(), (h / PATCH_SIZE, w / PATCH_SIZE))?;
    run(img, p, config, &pos)
}

/// Bilinear resampling of a `(gh·gw) × d` position table to `(nh·nw) × d`
/// with half-pixel centers and edge clamping.
pub fn resample_pos_embed(pos: &Tensor, from: (usize, usize), to: (usize, usize)) -> Result<Tensor> {
    let (n, d) = pos.dims2()?;
    if n != from.0 * from.1 || to.0 == 0 || to.1 == 0 {
        return Err(Error::shape("resample_pos_embed", format!("{n} rows for grid {from:?} -> {to:?}")));
    }
    let coord = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let x = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).clamp(0.0, (src_len - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(src_len - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = vec![0.0; to.0 * to.1 * d];
    for y in 0..to.0 {
        let (y0, y1, fy) = coord(y, from.0, to.0);
        for x in 0..to.1 {
            let (x0, x1, fx) = coord(x, from.1, to.1);
            let o = &mut out[(y * to.1 + x) * d..][..d];
            for (r, c, wgt) in [
                (y0, x0, (1.0 - fy) * (1.0 - fx)),
                (y0, x1, (1.0 - fy) * fx),
                (y1, x0, fy * (1.0 - fx)),
                (y1, x1, fy * fx),
            ] {
                if wgt == 0.0 {
                    continue;
                }
                for (ov, pv) in o.iter_mut().zip(pos.row(r * from.1 + c)) {
                    *ov += wgt * pv;
                }
            }
        }
    }
    Tensor::new([to.0 * to.1, d], out)
}

/// Closed-form itemized parameter count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub items: Vec<(String, usize)>,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.items.iter().map(|(_, n)| n).sum()
    }
}

/// Projections `W_Q, W_K` (`d × d/2`), `W_V`, `W_O` (`d × d`).
pub fn attention_projection_params(d: usize) -> usize {
    2 * d * (d / 2) + 2 * d * d
}

/// Unidirectional GLA layer: projections plus a `d_k`-wide low-rank gate.
pub fn gla_layer_params(d: usize) -> usize {
    let dk = d / 2;
    attention_projection_params(d) + d * GATE_RANK + GATE_RANK * dk + dk
}

/// BiGLA layer: the gate's second factor and bias are `2·d_k` wide.
pub fn bigla_layer_params(d: usize) -> usize {
    let dk = d / 2;
    attention_projection_params(d) + d * GATE_RANK + GATE_RANK * 2 * dk + 2 * dk
}

pub fn param_count(config: &ViGConfig) -> Result<ParamCount> {
    config.validate()?;
    let d = config.dim;
    let n = config.depth;
    let f = ffn_hidden(d);
    let dk = d / 2;
    let items = vec![
        ("patch_embed.conv1".into(), 9 * 9 * 3 * d + d),
        ("patch_embed.conv2".into(), 3 * 3 * d * d + d),
        ("pos_embed".into(), config.tokens() * d),
        ("blocks.norms".into(), n * 2 * d),
        ("blocks.dwconv".into(), n * (9 * d + d)),
        ("blocks.bigla.projections".into(), n * attention_projection_params(d)),
        ("blocks.bigla.gates".into(), n * (d * GATE_RANK + GATE_RANK * 2 * dk + 2 * dk)),
        ("blocks.gate2d".into(), n * (d * d + d)),
        ("blocks.ffn".into(), n * 3 * d * f),
        ("norm".into(), d),
        ("head".into(), d * config.num_classes + config.num_classes),
    ];
    Ok(ParamCount { items })
}
