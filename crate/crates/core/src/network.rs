//! Multi-way encoding (prototype fusion per class, scale combination, class
//! fusion) and the decoder producing `N+1`-way logits plus the metric
//! learning embedding.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    average_scales_graph, class_prototype_graph, combine_scales_graph, conv_layer, init_relation,
    init_scale_attn, residual_block, scale_attention_graph,
};
use crate::autograd::{Graph, Var};
use crate::episodes::LabelMask;
use crate::error::{config_err, Error, Result};
use crate::features::{
    extract_features, init_backbone, masked_global_pool, multiscale_query, scale_sizes,
    BackboneConfig, FeatureMap, Prototype,
};
use crate::params::{Binder, ParamStore};
use crate::spatial::SpatialMap;
use crate::tensor::Tensor;

/// How a prototype joins a query scale (first letter) and how the per-class
/// results join each other (second letter). `A` = add, `C` = concat.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionMode {
    #[default]
    #[serde(rename = "A+C")]
    AddConcat,
    #[serde(rename = "C+C")]
    ConcatConcat,
    #[serde(rename = "A+A")]
    AddAdd,
    #[serde(rename = "C+A")]
    ConcatAdd,
}

impl FusionMode {
    pub fn adds_prototype(self) -> bool {
        matches!(self, FusionMode::AddConcat | FusionMode::AddAdd)
    }

    pub fn concats_classes(self) -> bool {
        matches!(self, FusionMode::AddConcat | FusionMode::ConcatConcat)
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FusionMode::AddConcat => "A+C",
            FusionMode::ConcatConcat => "C+C",
            FusionMode::AddAdd => "A+A",
            FusionMode::ConcatAdd => "C+A",
        })
    }
}

impl FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A+C" => Ok(FusionMode::AddConcat),
            "C+C" => Ok(FusionMode::ConcatConcat),
            "A+A" => Ok(FusionMode::AddAdd),
            "C+A" => Ok(FusionMode::ConcatAdd),
            _ => Err(config_err!("unknown fusion mode {s:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_way: usize,
    pub scales: usize,
    pub relation_groups: usize,
    pub fusion: FusionMode,
    pub use_as: bool,
    pub use_am: bool,
    pub backbone: BackboneConfig,
    pub input_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_way: 2,
            scales: 4,
            relation_groups: 4,
            fusion: FusionMode::AddConcat,
            use_as: true,
            use_am: true,
            backbone: BackboneConfig::default(),
            input_size: 473,
        }
    }
}

impl ModelConfig {
    pub fn channels(&self) -> usize {
        self.backbone.output_channels
    }

    pub fn decoder_prefix(&self) -> String {
        format!("decoder.n{}", self.n_way)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_way == 0 || self.n_way > 254 {
            return Err(config_err!("n_way must be in 1..=254"));
        }
        if self.scales == 0 {
            return Err(config_err!("scales must be at least 1"));
        }
        let c = self.channels();
        if c == 0 || self.relation_groups == 0 || !c.is_multiple_of(self.relation_groups) {
            return Err(config_err!(
                "relation_groups = {} must divide channels = {c}",
                self.relation_groups
            ));
        }
        if self.input_size < crate::features::MIN_INPUT_SIDE {
            return Err(config_err!("input_size {} too small", self.input_size));
        }
        Ok(())
    }
}

/// `[W, H, N·C]` (or `[W, H, C]` when classes are summed) with channel block
/// `n` belonging to `class_order[n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySupportEmbedding {
    pub data: Tensor,
    pub class_order: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegPrediction {
    /// `[h, w, N+1]` at feature resolution.
    pub logits: Tensor,
    /// `[H, W, N+1]` softmax of the upsampled logits; label 0 is background.
    pub probs: Tensor,
    /// `[h, w, C]` decoder tap used for metric learning.
    pub pml_embedding: Tensor,
}

impl SegPrediction {
    pub fn labels(&self) -> LabelMask {
        let (h, w, _) = self.probs.dims3();
        LabelMask::new(
            h,
            w,
            self.probs.argmax_last().into_iter().map(|l| l as u8).collect(),
        )
    }
}

/// Backbone outputs for one episode: the query pyramid and pooled shots.
#[derive(Clone, Debug)]
pub struct EncodedEpisode {
    pub query_scales: Vec<FeatureMap>,
    /// `shots[n][k]`
    pub shots: Vec<Vec<Prototype>>,
    pub fallbacks: usize,
}

/// Graph handles for one forward pass.
pub struct ForwardVars {
    pub embedding: Var,
    pub pml: Var,
    pub logits: Var,
    pub probs: Var,
}

pub fn init_decoder(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> ParamStore {
    let c = cfg.channels();
    let n = cfg.n_way;
    let din = if cfg.fusion.concats_classes() { n * c } else { c };
    let pre = cfg.decoder_prefix();
    let mut p = ParamStore::new();
    let he = |fan: usize| (2.0 / fan as f64).sqrt();
    p.insert(format!("{pre}.conv_in.weight"), Tensor::randn(&[1, 1, din, c], he(din), rng));
    p.insert(format!("{pre}.conv_in.bias"), Tensor::zeros(&[c]));
    p.insert(format!("{pre}.res.a.weight"), Tensor::randn(&[3, 3, c, c], he(9 * c), rng));
    p.insert(format!("{pre}.res.a.bias"), Tensor::zeros(&[c]));
    p.insert(format!("{pre}.res.b.weight"), Tensor::randn(&[3, 3, c, c], 0.5 * he(9 * c), rng));
    p.insert(format!("{pre}.res.b.bias"), Tensor::zeros(&[c]));
    p.insert(
        format!("{pre}.conv_out.weight"),
        Tensor::randn(&[1, 1, c, n + 1], 0.1 * (1.0 / c as f64).sqrt(), rng),
    );
    p.insert(format!("{pre}.conv_out.bias"), Tensor::zeros(&[n + 1]));
    p
}

fn init_fusion(c: usize, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut p = ParamStore::new();
    p.insert(
        "fusion.proj.weight",
        Tensor::randn(&[1, 1, 2 * c, c], (1.0 / c as f64).sqrt(), rng),
    );
    p.insert("fusion.proj.bias", Tensor::zeros(&[c]));
    p
}

/// Every learnable (non-backbone) group plus the frozen backbone.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = cfg.channels();
    let mut p = init_backbone(&cfg.backbone, &mut rng)?;
    p.extend(init_relation(c, cfg.relation_groups, &mut rng)?);
    p.extend(init_scale_attn(c, &mut rng));
    if !cfg.fusion.adds_prototype() {
        p.extend(init_fusion(c, &mut rng));
    }
    p.extend(init_decoder(cfg, &mut rng));
    Ok(p)
}

/// Fuses the query pyramid with N prototypes into the query-support embedding.
pub fn encode_graph(
    g: &mut Graph,
    b: &mut Binder,
    query_scales: &[Var],
    prototypes: &[Var],
    fusion: FusionMode,
    use_am: bool,
) -> Result<Var> {
    let (h, w, c) = g.value(query_scales[0]).dims3();
    for &q in query_scales {
        if g.value(q).dims3().2 != c {
            return Err(config_err!("query scales disagree on channel count"));
        }
    }
    let mut per_class = Vec::with_capacity(prototypes.len());
    for &proto in prototypes {
        if g.value(proto).len() != c {
            return Err(config_err!(
                "prototype has {} channels, query features have {c}",
                g.value(proto).len()
            ));
        }
        let mut branches = Vec::with_capacity(query_scales.len());
        for &q in query_scales {
            let x = if fusion.adds_prototype() {
                g.add_row(q, proto)
            } else {
                let (qh, qw, _) = g.value(q).dims3();
                let zeros = g.constant(Tensor::zeros(&[qh, qw, c]));
                let tiled = g.add_row(zeros, proto);
                let cat = g.concat_last(&[q, tiled]);
                conv_layer(g, b, "fusion.proj", cat)
            };
            branches.push(scale_attention_graph(g, b, x));
        }
        let s = if use_am {
            combine_scales_graph(g, &branches, h, w)
        } else {
            let feats: Vec<Var> = branches.iter().map(|br| br.1).collect();
            average_scales_graph(g, &feats, h, w)
        };
        per_class.push(s);
    }
    Ok(if fusion.concats_classes() {
        g.concat_last(&per_class)
    } else {
        g.sum(&per_class)
    })
}

/// Decoder: 1×1 conv to `C` (metric-learning tap), residual block, 1×1 conv
/// to `N+1`. Softmax is taken after upsampling the logits to `out_hw`.
pub fn decode_graph(
    g: &mut Graph,
    b: &mut Binder,
    embedding: Var,
    n_way: usize,
    out_hw: (usize, usize),
) -> Result<(Var, Var, Var)> {
    let pre = format!("decoder.n{n_way}");
    let win = format!("{pre}.conv_in.weight");
    let Some(w) = b.store().try_get(&win) else {
        return Err(config_err!("no decoder head for {n_way}-way prediction"));
    };
    let din = w.shape()[2];
    let have = g.value(embedding).dims3().2;
    if din != have {
        return Err(config_err!(
            "decoder head {pre} expects {din} input channels, embedding has {have}"
        ));
    }
    let pml = conv_layer(g, b, &format!("{pre}.conv_in"), embedding);
    let x = g.relu(pml);
    let x = residual_block(g, b, &format!("{pre}.res"), x);
    let logits = conv_layer(g, b, &format!("{pre}.conv_out"), x);
    let (lh, lw, _) = g.value(logits).dims3();
    let up = if (lh, lw) == out_hw {
        logits
    } else {
        g.spatial(logits, Rc::new(SpatialMap::bilinear(lh, lw, out_hw.0, out_hw.1)))
    };
    let probs = g.softmax_last(up);
    Ok((pml, logits, probs))
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        let params = init_params(&cfg, seed)?;
        Ok(Model { cfg, params })
    }

    pub fn from_params(cfg: ModelConfig, params: ParamStore) -> Result<Model> {
        cfg.validate()?;
        Ok(Model { cfg, params })
    }

    /// Backbone pass: query pyramid plus pooled support vectors.
    /// `supports[n][k] = (normalized image, binary mask)`.
    pub fn encode_inputs(&self, query: &Tensor, supports: &[Vec<(Tensor, LabelMask)>]) -> Result<EncodedEpisode> {
        if supports.len() != self.cfg.n_way {
            return Err(config_err!(
                "model is {}-way but episode has {} classes",
                self.cfg.n_way,
                supports.len()
            ));
        }
        let qf = extract_features(query, &self.cfg.backbone, &self.params)?;
        let query_scales = multiscale_query(&qf, self.cfg.scales)?;
        let mut fallbacks = 0;
        let mut shots = Vec::with_capacity(supports.len());
        for (n, class_shots) in supports.iter().enumerate() {
            if class_shots.is_empty() {
                return Err(Error::Episode(format!("class {} has no support shots", n + 1)));
            }
            let mut pooled = Vec::with_capacity(class_shots.len());
            for (img, mask) in class_shots {
                let f = extract_features(img, &self.cfg.backbone, &self.params)?;
                let p = masked_global_pool(&f, mask, n + 1);
                fallbacks += usize::from(p.fell_back);
                pooled.push(p.prototype);
            }
            shots.push(pooled);
        }
        Ok(EncodedEpisode {
            query_scales,
            shots,
            fallbacks,
        })
    }

    /// Attention, fusion and decoding on the tape.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        enc: &EncodedEpisode,
        out_hw: (usize, usize),
    ) -> Result<ForwardVars> {
        let scales: Vec<Var> = enc
            .query_scales
            .iter()
            .map(|s| g.constant(s.data.clone()))
            .collect();
        let mut protos = Vec::with_capacity(enc.shots.len());
        for shots in &enc.shots {
            let c = shots[0].data.len();
            let mut data = Vec::with_capacity(shots.len() * c);
            for s in shots {
                data.extend_from_slice(s.data.data());
            }
            let f = g.constant(Tensor::from_vec(&[shots.len(), c], data));
            protos.push(class_prototype_graph(g, b, f, self.cfg.use_as));
        }
        let embedding = encode_graph(g, b, &scales, &protos, self.cfg.fusion, self.cfg.use_am)?;
        let (pml, logits, probs) = decode_graph(g, b, embedding, self.cfg.n_way, out_hw)?;
        Ok(ForwardVars {
            embedding,
            pml,
            logits,
            probs,
        })
    }

    /// Inference on prepared inputs; parameters are bound as constants.
    pub fn predict_encoded(&self, enc: &EncodedEpisode, out_hw: (usize, usize)) -> Result<SegPrediction> {
        let mut g = Graph::new();
        let mut b = Binder::new(&self.params, false);
        let v = self.forward_graph(&mut g, &mut b, enc, out_hw)?;
        Ok(SegPrediction {
            logits: g.value(v.logits).clone(),
            probs: g.value(v.probs).clone(),
            pml_embedding: g.value(v.pml).clone(),
        })
    }

    /// Full pipeline for one episode given normalized images and binary support masks.
    pub fn forward_episode(&self, query: &Tensor, supports: &[Vec<(Tensor, LabelMask)>]) -> Result<SegPrediction> {
        let enc = self.encode_inputs(query, supports)?;
        let (h, w, _) = query.dims3();
        self.predict_encoded(&enc, (h, w))
    }
}

/// Tensor-level encode: query pyramid and N prototypes to the embedding.
pub fn encode(
    query_scales: &[FeatureMap],
    prototypes: &[Prototype],
    fusion: FusionMode,
    use_am: bool,
    params: &ParamStore,
) -> Result<QuerySupportEmbedding> {
    if prototypes.is_empty() || query_scales.is_empty() {
        return Err(config_err!("encode needs at least one prototype and one scale"));
    }
    let mut g = Graph::new();
    let mut b = Binder::new(params, false);
    let qs: Vec<Var> = query_scales.iter().map(|q| g.constant(q.data.clone())).collect();
    let ps: Vec<Var> = prototypes.iter().map(|p| g.constant(p.data.clone())).collect();
    let out = encode_graph(&mut g, &mut b, &qs, &ps, fusion, use_am)?;
    Ok(QuerySupportEmbedding {
        data: g.value(out).clone(),
        class_order: prototypes.iter().map(|p| p.class_index).collect(),
    })
}

/// Tensor-level decode to `out_hw` resolution.
pub fn decode(
    emb: &QuerySupportEmbedding,
    n_way: usize,
    params: &ParamStore,
    out_hw: (usize, usize),
) -> Result<SegPrediction> {
    let mut g = Graph::new();
    let mut b = Binder::new(params, false);
    let e = g.constant(emb.data.clone());
    let (pml, logits, probs) = decode_graph(&mut g, &mut b, e, n_way, out_hw)?;
    Ok(SegPrediction {
        logits: g.value(logits).clone(),
        probs: g.value(probs).clone(),
        pml_embedding: g.value(pml).clone(),
    })
}

/// Feature-map size the configured backbone produces for a square input.
pub fn feature_size(cfg: &ModelConfig) -> usize {
    let mut s = cfg.input_size;
    for _ in 0..3 {
        s = (s + 2 - 3) / 2 + 1;
    }
    s
}

/// Checks that `scales` pyramid levels are available at the feature size.
pub fn validate_pyramid(cfg: &ModelConfig) -> Result<()> {
    let f = feature_size(cfg);
    scale_sizes(f, f, cfg.scales).map(|_| ())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{BackboneKind, FeatureMap};
    use rand::SeedableRng;

    fn tiny_cfg(n: usize, c: usize, z: usize) -> ModelConfig {
        ModelConfig {
            n_way: n,
            scales: z,
            relation_groups: 2,
            fusion: FusionMode::AddConcat,
            use_as: true,
            use_am: true,
            backbone: BackboneConfig {
                kind: BackboneKind::TinyRandom,
                frozen: true,
                output_channels: c,
                weights: None,
            },
            input_size: 48,
        }
    }

    fn rand_scales(rng: &mut ChaCha8Rng, c: usize) -> Vec<FeatureMap> {
        let base = FeatureMap {
            data: Tensor::randn(&[6, 6, c], 1.0, rng),
            scale: 1,
        };
        multiscale_query(&base, 2).unwrap()
    }

    #[test]
    fn fusion_mode_parsing_round_trips() {
        for m in [
            FusionMode::AddConcat,
            FusionMode::ConcatConcat,
            FusionMode::AddAdd,
            FusionMode::ConcatAdd,
        ] {
            assert_eq!(m.to_string().parse::<FusionMode>().unwrap(), m);
        }
        assert!("A*C".parse::<FusionMode>().is_err());
    }

    #[test]
    fn embedding_width_is_n_times_c() {
        let cfg = tiny_cfg(2, 8, 2);
        let p = init_params(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let qs = rand_scales(&mut rng, 8);
        let protos: Vec<Prototype> = (1..=2)
            .map(|n| Prototype {
                data: Tensor::randn(&[8], 1.0, &mut rng),
                class_index: n,
            })
            .collect();
        let e = encode(&qs, &protos, cfg.fusion, true, &p).unwrap();
        assert_eq!(e.data.shape(), &[6, 6, 16]);
        let d = decode(&e, 2, &p, (48, 48)).unwrap();
        assert_eq!(d.logits.shape(), &[6, 6, 3]);
        assert_eq!(d.probs.shape(), &[48, 48, 3]);
        assert_eq!(d.pml_embedding.shape(), &[6, 6, 8]);
        for row in d.probs.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let cfg = tiny_cfg(1, 8, 2);
        let p = init_params(&cfg, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let qs = rand_scales(&mut rng, 8);
        let bad = Prototype {
            data: Tensor::zeros(&[4]),
            class_index: 1,
        };
        assert!(matches!(
            encode(&qs, &[bad], cfg.fusion, true, &p),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn decoder_head_mismatch_is_config_error() {
        let cfg = tiny_cfg(2, 8, 2);
        let p = init_params(&cfg, 0).unwrap();
        let emb = QuerySupportEmbedding {
            data: Tensor::zeros(&[6, 6, 16]),
            class_order: vec![1, 2],
        };
        assert!(decode(&emb, 3, &p, (6, 6)).is_err());
        let narrow = QuerySupportEmbedding {
            data: Tensor::zeros(&[6, 6, 8]),
            class_order: vec![1],
        };
        assert!(decode(&narrow, 2, &p, (6, 6)).is_err());
    }

    #[test]
    fn feature_size_matches_backbone_stride() {
        let mut cfg = tiny_cfg(1, 8, 1);
        assert_eq!(feature_size(&cfg), 6);
        cfg.input_size = 473;
        assert_eq!(feature_size(&cfg), 60);
    }
}
