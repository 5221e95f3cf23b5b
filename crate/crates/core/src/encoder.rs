//! Vision transformer backbone and projection head.

use crate::augment::FloatImage;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{ActKind, Graph, Scalar, Tensor, Var};
use std::collections::BTreeMap;

const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl ViTConfig {
    /// Desk-scale preset.
    pub fn vit_micro() -> Self {
        ViTConfig {
            image_size: 64,
            patch_size: 8,
            embed_dim: 64,
            depth: 3,
            heads: 4,
            mlp_ratio: 4,
        }
    }

    pub fn vit_small() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4,
        }
    }

    pub fn vit_base() -> Self {
        ViTConfig {
            image_size: 224,
            patch_size: 16,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_ratio: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidParameter(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patch-grid side for the configured image size.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count including the class token.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DinoHeadConfig {
    pub hidden: usize,
    pub bottleneck: usize,
    pub out_dim: usize,
    pub use_bn: bool,
    pub norm_last_layer: bool,
}

impl DinoHeadConfig {
    /// Desk-scale head.
    pub fn desk() -> Self {
        DinoHeadConfig {
            hidden: 256,
            bottleneck: 64,
            out_dim: 1024,
            use_bn: false,
            norm_last_layer: true,
        }
    }

    /// Full-scale head dimensions.
    pub fn paper() -> Self {
        DinoHeadConfig {
            hidden: 2048,
            bottleneck: 256,
            out_dim: 65536,
            use_bn: false,
            norm_last_layer: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_dim < 2 {
            return Err(Error::InvalidParameter("head out_dim must be >= 2".into()));
        }
        if self.use_bn {
            return Err(Error::InvalidParameter(
                "batch-norm head variant is not supported".into(),
            ));
        }
        Ok(())
    }
}

/// Named parameter map; iteration order is the sorted name order everywhere
/// (initialization, optimization, serialization).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    map: BTreeMap<String, Tensor<f32>>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(map: BTreeMap<String, Tensor<f32>>) -> Self {
        ParameterSet { map }
    }

    pub fn insert(&mut self, name: &str, t: Tensor<f32>) {
        self.map.insert(name.to_string(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.map.get(name)
    }

    pub fn map(&self) -> &BTreeMap<String, Tensor<f32>> {
        &self.map
    }

    pub fn map_mut(&mut self) -> &mut BTreeMap<String, Tensor<f32>> {
        &mut self.map
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn cast_f64(&self) -> BTreeMap<String, Tensor<f64>> {
        self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
    }

    /// Leafs every parameter into a graph.
    pub fn leaf_into<T: Scalar>(&self, g: &Graph<T>, requires_grad: bool) -> BTreeMap<String, Var> {
        self.map
            .iter()
            .map(|(k, v)| (k.clone(), g.leaf(v.cast(), requires_grad)))
            .collect()
    }
}

fn trunc_normal(shape: &[usize], rng: &mut Stream) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.trunc_gauss(0.02) as f32)
}

fn tensor_stream(seed: u64, name: &str) -> Stream {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    Stream::tagged(seed, h)
}

/// Truncated-normal (sigma 0.02) weights, zero biases, unit LayerNorm gains.
/// Each tensor draws from its own name-tagged stream, so initialization is
/// independent of insertion order.
pub fn init_vit_params(cfg: &ViTConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let mut p = ParameterSet::new();
    let add_normal = |p: &mut ParameterSet, name: &str, shape: &[usize]| {
        let mut s = tensor_stream(seed, name);
        p.insert(name, trunc_normal(shape, &mut s));
    };
    add_normal(&mut p, "patch_embed.weight", &[3 * cfg.patch_size * cfg.patch_size, d]);
    p.insert("patch_embed.bias", Tensor::zeros(&[d]));
    add_normal(&mut p, "cls", &[1, d]);
    add_normal(&mut p, "pos", &[cfg.tokens(), d]);
    for i in 0..cfg.depth {
        let b = format!("block{i}");
        p.insert(&format!("{b}.ln1.gamma"), Tensor::full(&[d], 1.0));
        p.insert(&format!("{b}.ln1.beta"), Tensor::zeros(&[d]));
        add_normal(&mut p, &format!("{b}.attn.qkv.weight"), &[d, 3 * d]);
        p.insert(&format!("{b}.attn.qkv.bias"), Tensor::zeros(&[3 * d]));
        add_normal(&mut p, &format!("{b}.attn.out.weight"), &[d, d]);
        p.insert(&format!("{b}.attn.out.bias"), Tensor::zeros(&[d]));
        p.insert(&format!("{b}.ln2.gamma"), Tensor::full(&[d], 1.0));
        p.insert(&format!("{b}.ln2.beta"), Tensor::zeros(&[d]));
        add_normal(&mut p, &format!("{b}.mlp.fc1.weight"), &[d, cfg.mlp_ratio * d]);
        p.insert(&format!("{b}.mlp.fc1.bias"), Tensor::zeros(&[cfg.mlp_ratio * d]));
        add_normal(&mut p, &format!("{b}.mlp.fc2.weight"), &[cfg.mlp_ratio * d, d]);
        p.insert(&format!("{b}.mlp.fc2.bias"), Tensor::zeros(&[d]));
    }
    p.insert("final_ln.gamma", Tensor::full(&[d], 1.0));
    p.insert("final_ln.beta", Tensor::zeros(&[d]));
    Ok(p)
}

/// Projection-head parameters appended under the `head.` prefix.
///
/// The MLP layers use fan-in-scaled normal init instead of the backbone's
/// fixed sigma: at desk-scale widths a 0.02 init leaves the bottleneck with
/// near-zero norm, and the L2 normalization then amplifies gradients by
/// 1/norm until clipping stalls training.
pub fn init_head_params(cfg: &DinoHeadConfig, embed_dim: usize, seed: u64, p: &mut ParameterSet) -> Result<()> {
    cfg.validate()?;
    let add_fan_in = |p: &mut ParameterSet, name: &str, shape: &[usize]| {
        let sigma = (2.0 / shape[0] as f64).sqrt();
        let mut s = tensor_stream(seed, name);
        p.insert(name, Tensor::from_fn(shape, |_| s.trunc_gauss(sigma) as f32));
    };
    add_fan_in(p, "head.fc1.weight", &[embed_dim, cfg.hidden]);
    p.insert("head.fc1.bias", Tensor::zeros(&[cfg.hidden]));
    add_fan_in(p, "head.fc2.weight", &[cfg.hidden, cfg.hidden]);
    p.insert("head.fc2.bias", Tensor::zeros(&[cfg.hidden]));
    add_fan_in(p, "head.fc3.weight", &[cfg.hidden, cfg.bottleneck]);
    p.insert("head.fc3.bias", Tensor::zeros(&[cfg.bottleneck]));
    // the output layer is row-normalized, so only its directions matter
    let mut s = tensor_stream(seed, "head.last.dir");
    p.insert("head.last.dir", trunc_normal(&[cfg.out_dim, cfg.bottleneck], &mut s));
    Ok(())
}

/// Packs same-sized views into a `[B, 3, S, S]` tensor.
pub fn batch_views<T: Scalar>(views: &[&FloatImage]) -> Result<Tensor<T>> {
    let first = views
        .first()
        .ok_or_else(|| Error::Contract("empty view batch".into()))?;
    let s = first.side;
    let c = first.channels;
    let mut data = Vec::with_capacity(views.len() * c * s * s);
    for v in views {
        if v.side != s || v.channels != c {
            return Err(Error::ShapeMismatch {
                op: "batch_views",
                lhs: vec![c, s, s],
                rhs: vec![v.channels, v.side, v.side],
            });
        }
        data.extend(v.data.iter().map(|&x| T::from_f64(x as f64)));
    }
    Tensor::new(&[views.len(), c, s, s], data)
}

/// Pre-norm transformer forward; returns the class-token embeddings `[B, d]`.
/// Views smaller than the configured image size use a bilinearly resampled
/// positional table.
pub fn vit_forward<T: Scalar>(
    g: &Graph<T>,
    vars: &BTreeMap<String, Var>,
    cfg: &ViTConfig,
    images: Var,
) -> Result<Var> {
    let shape = g.shape(images);
    if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] {
        return Err(Error::ShapeMismatch {
            op: "vit_forward",
            lhs: shape,
            rhs: vec![0, 3, cfg.image_size, cfg.image_size],
        });
    }
    let (batch, side) = (shape[0], shape[2]);
    if side % cfg.patch_size != 0 {
        return Err(Error::InvalidParameter(format!(
            "view side {side} not divisible by patch size {}",
            cfg.patch_size
        )));
    }
    let grid = side / cfg.patch_size;
    let tokens = grid * grid + 1;

    let v = |name: &str| -> Result<Var> {
        vars.get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    };

    let patches = g.extract_patches(images, cfg.patch_size)?;
    let x = g.linear(patches, v("patch_embed.weight")?, v("patch_embed.bias")?)?;
    let x = g.prepend_cls(x, v("cls")?, batch)?;
    let pos = if grid == cfg.grid() {
        v("pos")?
    } else {
        g.interp_pos(v("pos")?, cfg.grid(), grid)?
    };
    let mut x = g.add_pos(x, pos, batch)?;

    let eps = T::from_f64(LN_EPS);
    for i in 0..cfg.depth {
        let b = format!("block{i}");
        let h = g.layer_norm(x, v(&format!("{b}.ln1.gamma"))?, v(&format!("{b}.ln1.beta"))?, eps)?;
        let qkv = g.linear(h, v(&format!("{b}.attn.qkv.weight"))?, v(&format!("{b}.attn.qkv.bias"))?)?;
        let attn = g.mha(qkv, batch, tokens, cfg.heads)?;
        let attn = g.linear(attn, v(&format!("{b}.attn.out.weight"))?, v(&format!("{b}.attn.out.bias"))?)?;
        x = g.add(x, attn)?;
        let h2 = g.layer_norm(x, v(&format!("{b}.ln2.gamma"))?, v(&format!("{b}.ln2.beta"))?, eps)?;
        let m = g.linear(h2, v(&format!("{b}.mlp.fc1.weight"))?, v(&format!("{b}.mlp.fc1.bias"))?)?;
        let m = g.activation(m, ActKind::Gelu);
        let m = g.linear(m, v(&format!("{b}.mlp.fc2.weight"))?, v(&format!("{b}.mlp.fc2.bias"))?)?;
        x = g.add(x, m)?;
    }
    let x = g.layer_norm(x, v("final_ln.gamma")?, v("final_ln.beta")?, eps)?;
    g.gather_cls(x, tokens)
}

/// Projection head: three linear layers with GELU, an L2-normalized
/// bottleneck, and a weight-normalized output layer with unit gain.
pub fn dino_head_forward<T: Scalar>(
    g: &Graph<T>,
    vars: &BTreeMap<String, Var>,
    cls: Var,
) -> Result<Var> {
    let v = |name: &str| -> Result<Var> {
        vars.get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    };
    let h = g.linear(cls, v("head.fc1.weight")?, v("head.fc1.bias")?)?;
    let h = g.activation(h, ActKind::Gelu);
    let h = g.linear(h, v("head.fc2.weight")?, v("head.fc2.bias")?)?;
    let h = g.activation(h, ActKind::Gelu);
    let b = g.linear(h, v("head.fc3.weight")?, v("head.fc3.bias")?)?;
    let b = g.l2_normalize_rows(b);
    g.weight_norm_linear(b, v("head.last.dir")?)
}
