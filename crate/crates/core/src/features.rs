//! Frozen backbone, multi-scale query pooling and masked global pooling.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d, ConvSpec};
use crate::episodes::LabelMask;
use crate::error::{config_err, Error, Result};
use crate::params::ParamStore;
use crate::spatial::SpatialMap;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Residual stride-8 extractor; its mid-level stages are concatenated
    /// and projected to `output_channels`. Weights come from a checkpoint.
    #[default]
    PretrainedMidlevel,
    /// Four bias-free conv stages (1/8 resolution) with random weights.
    TinyRandom,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub frozen: bool,
    pub output_channels: usize,
    /// Checkpoint whose `backbone` group replaces the seeded initialization.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<std::path::PathBuf>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            kind: BackboneKind::PretrainedMidlevel,
            frozen: true,
            output_channels: 256,
            weights: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `[height, width, channels]`
    pub data: Tensor,
    /// 1-based scale index; scale 1 is the native resolution.
    pub scale: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype {
    /// `[channels]`
    pub data: Tensor,
    pub class_index: usize,
}

/// One conv layer of the backbone: `(name, kernel, c_in, c_out, spec)`.
type LayerDef = (&'static str, usize, usize, usize, ConvSpec);

fn tiny_layers() -> Vec<LayerDef> {
    vec![
        ("stage1", 3, 3, 16, ConvSpec::strided(2, 1)),
        ("stage2", 3, 16, 32, ConvSpec::strided(2, 1)),
        ("stage3", 3, 32, 32, ConvSpec::strided(2, 1)),
        ("stage4", 3, 32, 32, ConvSpec::dilated(2)),
    ]
}

fn midlevel_layers() -> Vec<LayerDef> {
    vec![
        ("stem1", 3, 3, 32, ConvSpec::strided(2, 1)),
        ("stem2", 3, 32, 32, ConvSpec::SAME3),
        ("conv2.down", 3, 32, 64, ConvSpec::strided(2, 1)),
        ("conv2.block.a", 3, 64, 64, ConvSpec::SAME3),
        ("conv2.block.b", 3, 64, 64, ConvSpec::SAME3),
        ("conv3.down", 3, 64, 128, ConvSpec::strided(2, 1)),
        ("conv3.block.a", 3, 128, 128, ConvSpec::SAME3),
        ("conv3.block.b", 3, 128, 128, ConvSpec::SAME3),
        ("conv4.down", 3, 128, 256, ConvSpec::dilated(2)),
        ("conv4.block.a", 3, 256, 256, ConvSpec::dilated(2)),
        ("conv4.block.b", 3, 256, 256, ConvSpec::dilated(2)),
    ]
}

/// Channel widths of the two tapped mid-level stages.
fn tap_channels(kind: BackboneKind) -> (usize, usize) {
    match kind {
        BackboneKind::TinyRandom => (32, 32),
        BackboneKind::PretrainedMidlevel => (128, 256),
    }
}

fn spec_of(kind: BackboneKind, name: &str) -> ConvSpec {
    let layers = match kind {
        BackboneKind::TinyRandom => tiny_layers(),
        BackboneKind::PretrainedMidlevel => midlevel_layers(),
    };
    layers
        .into_iter()
        .find(|l| l.0 == name)
        .map(|l| l.4)
        .expect("known layer")
}

/// He-normal initialized backbone parameters (group `backbone`).
pub fn init_backbone<R: Rng + ?Sized>(cfg: &BackboneConfig, rng: &mut R) -> Result<ParamStore> {
    if !cfg.frozen {
        return Err(config_err!("backbone fine-tuning is not supported; set frozen = true"));
    }
    if cfg.output_channels == 0 {
        return Err(config_err!("backbone output_channels must be positive"));
    }
    let mut p = ParamStore::new();
    let (layers, bias) = match cfg.kind {
        BackboneKind::TinyRandom => (tiny_layers(), false),
        BackboneKind::PretrainedMidlevel => (midlevel_layers(), true),
    };
    for (name, k, cin, cout, _) in layers {
        let std = (2.0 / (k * k * cin) as f64).sqrt();
        p.insert(format!("backbone.{name}.weight"), Tensor::randn(&[k, k, cin, cout], std, rng));
        if bias {
            p.insert(format!("backbone.{name}.bias"), Tensor::zeros(&[cout]));
        }
    }
    let (a, b) = tap_channels(cfg.kind);
    let std = (2.0 / (a + b) as f64).sqrt();
    p.insert(
        "backbone.project.weight",
        Tensor::randn(&[1, 1, a + b, cfg.output_channels], std, rng),
    );
    if bias {
        p.insert("backbone.project.bias", Tensor::zeros(&[cfg.output_channels]));
    }
    Ok(p)
}

fn layer(p: &ParamStore, kind: BackboneKind, name: &str, x: &Tensor, relu: bool) -> Tensor {
    let w = p.get(&format!("backbone.{name}.weight"));
    let b = p.try_get(&format!("backbone.{name}.bias"));
    let y = conv2d(x, w, b, spec_of(kind, name));
    if relu {
        y.map(|v| v.max(0.0))
    } else {
        y
    }
}

fn residual(p: &ParamStore, kind: BackboneKind, stage: &str, x: Tensor) -> Tensor {
    let h = layer(p, kind, &format!("{stage}.block.a"), &x, true);
    let h = layer(p, kind, &format!("{stage}.block.b"), &h, false);
    x.zip_map(&h, |a, b| (a + b).max(0.0))
}

/// Smallest input side the backbones accept.
pub const MIN_INPUT_SIDE: usize = 8;

/// Runs the frozen backbone on a normalized `H×W×3` image.
pub fn extract_features(image: &Tensor, cfg: &BackboneConfig, params: &ParamStore) -> Result<FeatureMap> {
    let (h, w, c) = image.dims3();
    if c != 3 {
        return Err(Error::Input(format!("expected 3 image channels, got {c}")));
    }
    if h < MIN_INPUT_SIDE || w < MIN_INPUT_SIDE {
        return Err(Error::Input(format!("image {h}x{w} smaller than {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}")));
    }
    if !image.is_finite() {
        return Err(Error::Input("image contains non-finite values".into()));
    }
    let k = cfg.kind;
    let (tap_a, tap_b) = match k {
        BackboneKind::TinyRandom => {
            let x = layer(params, k, "stage1", image, true);
            let x = layer(params, k, "stage2", &x, true);
            let a = layer(params, k, "stage3", &x, true);
            let b = layer(params, k, "stage4", &a, true);
            (a, b)
        }
        BackboneKind::PretrainedMidlevel => {
            let x = layer(params, k, "stem1", image, true);
            let x = layer(params, k, "stem2", &x, true);
            let x = layer(params, k, "conv2.down", &x, true);
            let x = residual(params, k, "conv2", x);
            let x = layer(params, k, "conv3.down", &x, true);
            let a = residual(params, k, "conv3", x);
            let x = layer(params, k, "conv4.down", &a, true);
            let b = residual(params, k, "conv4", x);
            (a, b)
        }
    };
    let cat = concat_channels(&tap_a, &tap_b);
    let out = conv2d(
        &cat,
        params.get("backbone.project.weight"),
        params.try_get("backbone.project.bias"),
        ConvSpec::POINTWISE,
    )
    .map(|v| v.max(0.0));
    debug_assert_eq!(out.dims3().2, cfg.output_channels);
    Ok(FeatureMap { data: out, scale: 1 })
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (h, w, ca) = a.dims3();
    let (hb, wb, cb) = b.dims3();
    assert_eq!((h, w), (hb, wb));
    let mut out = Vec::with_capacity(h * w * (ca + cb));
    for (ra, rb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    Tensor::from_vec(&[h, w, ca + cb], out)
}

/// Spatial sizes of the `z` query scales: each side is halved (rounding up)
/// per scale, e.g. 60 → 60, 30, 15, 8.
pub fn scale_sizes(h: usize, w: usize, z: usize) -> Result<Vec<(usize, usize)>> {
    if z == 0 {
        return Err(config_err!("number of scales must be at least 1"));
    }
    let mut sizes: Vec<(usize, usize)> = Vec::with_capacity(z);
    for i in 0..z {
        let d = 1usize << i.min(63);
        let s = (h.div_ceil(d), w.div_ceil(d));
        if let Some(prev) = sizes.last() {
            if *prev == s {
                return Err(config_err!(
                    "{z} scales requested but a {h}x{w} map supports only {} distinct resolutions",
                    sizes.len()
                ));
            }
        }
        sizes.push(s);
    }
    Ok(sizes)
}

/// Multi-scale query pyramid by adaptive average pooling.
pub fn multiscale_query(feat: &FeatureMap, z: usize) -> Result<Vec<FeatureMap>> {
    let (h, w, _) = feat.data.dims3();
    let sizes = scale_sizes(h, w, z)?;
    Ok(sizes
        .into_iter()
        .enumerate()
        .map(|(i, (sh, sw))| FeatureMap {
            data: if i == 0 {
                feat.data.clone()
            } else {
                SpatialMap::area(h, w, sh, sw).apply(&feat.data)
            },
            scale: i + 1,
        })
        .collect())
}

/// Downsamples a binary mask to `(h, w)`: area interpolation, then any
/// positive coverage counts as foreground.
pub fn downsample_mask(mask: &LabelMask, h: usize, w: usize) -> Vec<bool> {
    let m = Tensor::from_vec(
        &[mask.height, mask.width, 1],
        mask.labels.iter().map(|&l| if l != 0 { 1.0 } else { 0.0 }).collect(),
    );
    SpatialMap::area(mask.height, mask.width, h, w)
        .apply(&m)
        .data()
        .iter()
        .map(|&v| v > 0.0)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PooledSupport {
    pub prototype: Prototype,
    /// True when the mask vanished at feature resolution and the plain
    /// spatial mean was used instead.
    pub fell_back: bool,
}

/// Foreground-only spatial average of `feat` under `mask` (nonzero = foreground).
pub fn masked_global_pool(feat: &FeatureMap, mask: &LabelMask, class_index: usize) -> PooledSupport {
    let (h, w, c) = feat.data.dims3();
    let fg = downsample_mask(mask, h, w);
    let mut acc = vec![0.0; c];
    let mut count = 0usize;
    for (cell, row) in fg.iter().zip(feat.data.data().chunks(c)) {
        if *cell {
            count += 1;
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    let fell_back = count == 0;
    if fell_back {
        log::warn!("support mask for class {class_index} is empty at {h}x{w}; using the unmasked mean");
        for row in feat.data.data().chunks(c) {
            for (a, v) in acc.iter_mut().zip(row) {
                *a += v;
            }
        }
        count = h * w;
    }
    let inv = 1.0 / count as f64;
    PooledSupport {
        prototype: Prototype {
            data: Tensor::from_vec(&[c], acc.into_iter().map(|v| v * inv).collect()),
            class_index,
        },
        fell_back,
    }
}
