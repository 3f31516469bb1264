//! Support-level relational attention and multi-scale attention.
//!
//! Support modulation (group `relation`): for every group `r`, shot `k`
//! attends over all shots `j` with weights
//! `softmax_j(<W_A^r F_k, W_B^r F_j> / sqrt(d_k))` and aggregates
//! `W_V^r F_j`; the per-group results are concatenated and added to `F_k`.
//!
//! Multi-scale combination (group `scale_attn`): each scale yields a 1-channel
//! attention logit map and a transformed feature map; both are upsampled to
//! the finest scale, the logits are softmax-normalized across scales at every
//! pixel, and the transformed maps are summed with those weights. One
//! parameter set serves every class branch and every scale.

use std::rc::Rc;

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::conv::ConvSpec;
use crate::error::{config_err, Result};
use crate::features::Prototype;
use crate::params::{Binder, ParamStore};
use crate::spatial::SpatialMap;
use crate::tensor::Tensor;

pub fn init_relation<R: Rng + ?Sized>(channels: usize, groups: usize, rng: &mut R) -> Result<ParamStore> {
    if groups == 0 || !channels.is_multiple_of(groups) {
        return Err(config_err!("N_r = {groups} must divide C = {channels}"));
    }
    let dk = channels / groups;
    let std = 1.0 / (channels as f64).sqrt();
    let mut p = ParamStore::new();
    for r in 0..groups {
        p.insert(format!("relation.wa.{r}"), Tensor::randn(&[channels, dk], std, rng));
        p.insert(format!("relation.wb.{r}"), Tensor::randn(&[channels, dk], std, rng));
        p.insert(format!("relation.wv.{r}"), Tensor::randn(&[channels, dk], 0.1 * std, rng));
    }
    Ok(p)
}

pub fn relation_groups(params: &ParamStore) -> usize {
    (0..)
        .take_while(|r| params.contains(&format!("relation.wa.{r}")))
        .count()
}

/// Row-stochastic `K×K` relation weights of group `r` for stacked shots `f` (`[K, C]`).
pub fn relation_weights_graph(g: &mut Graph, b: &mut Binder, f: Var, r: usize) -> Var {
    let wa = b.var(g, &format!("relation.wa.{r}"));
    let wb = b.var(g, &format!("relation.wb.{r}"));
    let dk = g.value(wa).shape()[1];
    let qa = g.matmul(f, wa);
    let kb = g.matmul(f, wb);
    let kbt = g.transpose(kb);
    let logits = g.matmul(qa, kbt);
    let logits = g.scale(logits, 1.0 / (dk as f64).sqrt());
    g.softmax_last(logits)
}

/// `F_k + concat_r Σ_j w^r_kj W_V^r F_j` for every shot; `[K, C]` in and out.
pub fn relational_modulate_graph(g: &mut Graph, b: &mut Binder, f: Var) -> Var {
    let groups = relation_groups(b.store());
    let mut parts = Vec::with_capacity(groups);
    for r in 0..groups {
        let w = relation_weights_graph(g, b, f, r);
        let wv = b.var(g, &format!("relation.wv.{r}"));
        let v = g.matmul(f, wv);
        parts.push(g.matmul(w, v));
    }
    let modulator = g.concat_last(&parts);
    g.add(f, modulator)
}

/// Class prototype from `[K, C]` shots: mean of the (optionally modulated) shots.
/// Modulation is skipped for a single shot.
pub fn class_prototype_graph(g: &mut Graph, b: &mut Binder, f: Var, use_as: bool) -> Var {
    let (k, c) = {
        let s = g.value(f).shape();
        (s[0], s[1])
    };
    let shots = if use_as && k > 1 {
        relational_modulate_graph(g, b, f)
    } else {
        f
    };
    let avg = g.constant(Tensor::full(&[1, k], 1.0 / k as f64));
    let mean = g.matmul(avg, shots);
    g.reshape(mean, &[c])
}

fn stack(shots: &[Prototype]) -> Tensor {
    assert!(!shots.is_empty(), "need at least one support vector");
    let c = shots[0].data.len();
    let mut data = Vec::with_capacity(shots.len() * c);
    for s in shots {
        assert_eq!(s.data.len(), c, "support vectors differ in length");
        data.extend_from_slice(s.data.data());
    }
    Tensor::from_vec(&[shots.len(), c], data)
}

pub fn relation_weights(shots: &[Prototype], params: &ParamStore, r: usize) -> Tensor {
    let mut g = Graph::new();
    let mut b = Binder::new(params, false);
    let f = g.constant(stack(shots));
    let w = relation_weights_graph(&mut g, &mut b, f, r);
    g.value(w).clone()
}

pub fn relational_modulate(shots: &[Prototype], params: &ParamStore) -> Vec<Prototype> {
    let mut g = Graph::new();
    let mut b = Binder::new(params, false);
    let f = g.constant(stack(shots));
    let out = relational_modulate_graph(&mut g, &mut b, f);
    let c = shots[0].data.len();
    g.value(out)
        .data()
        .chunks(c)
        .zip(shots)
        .map(|(row, s)| Prototype {
            data: Tensor::from_vec(&[c], row.to_vec()),
            class_index: s.class_index,
        })
        .collect()
}

pub fn class_prototype(shots: &[Prototype], params: &ParamStore, use_as: bool) -> Prototype {
    let mut g = Graph::new();
    let mut b = Binder::new(params, false);
    let f = g.constant(stack(shots));
    let out = class_prototype_graph(&mut g, &mut b, f, use_as);
    Prototype {
        data: g.value(out).clone(),
        class_index: shots[0].class_index,
    }
}

// ---------------------------------------------------------------------------
// Multi-scale attention

const SCALE_CONVS: [(&str, usize, bool); 6] = [
    // (name, kernel, outputs one channel)
    ("attn.conv1", 3, false),
    ("attn.conv2", 3, false),
    ("attn.conv3", 1, true),
    ("trans.conv", 1, false),
    ("trans.res.a", 3, false),
    ("trans.res.b", 3, false),
];

pub fn init_scale_attn<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> ParamStore {
    let mut p = ParamStore::new();
    for (name, k, single) in SCALE_CONVS {
        let cout = if single { 1 } else { channels };
        let mut std = (2.0 / (k * k * channels) as f64).sqrt();
        if name == "trans.res.b" {
            std *= 0.5;
        }
        p.insert(
            format!("scale_attn.{name}.weight"),
            Tensor::randn(&[k, k, channels, cout], std, rng),
        );
        p.insert(format!("scale_attn.{name}.bias"), Tensor::zeros(&[cout]));
    }
    p
}

fn conv_named(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Var {
    let w = b.var(g, &format!("{prefix}.weight"));
    let bias = b.try_var(g, &format!("{prefix}.bias"));
    let k = g.value(w).shape()[0];
    let spec = if k == 1 { ConvSpec::POINTWISE } else { ConvSpec::SAME3 };
    g.conv(x, w, bias, spec)
}

/// Two 3×3 convs plus identity skip, `C` channels throughout.
pub(crate) fn residual_block(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Var {
    let h = conv_named(g, b, &format!("{prefix}.a"), x);
    let h = g.relu(h);
    let h = conv_named(g, b, &format!("{prefix}.b"), h);
    let s = g.add(x, h);
    g.relu(s)
}

pub(crate) fn conv_layer(g: &mut Graph, b: &mut Binder, prefix: &str, x: Var) -> Var {
    conv_named(g, b, prefix, x)
}

/// Attention logits `[h, w, 1]` and transformed features `[h, w, C]` for one scale.
pub fn scale_attention_graph(g: &mut Graph, b: &mut Binder, x: Var) -> (Var, Var) {
    let a = conv_named(g, b, "scale_attn.attn.conv1", x);
    let a = g.relu(a);
    let a = conv_named(g, b, "scale_attn.attn.conv2", a);
    let a = g.relu(a);
    let attn = conv_named(g, b, "scale_attn.attn.conv3", a);

    let t = conv_named(g, b, "scale_attn.trans.conv", x);
    let t = g.relu(t);
    let trans = residual_block(g, b, "scale_attn.trans.res", t);
    (attn, trans)
}

fn upsample_to(g: &mut Graph, x: Var, h: usize, w: usize) -> Var {
    let (xh, xw, _) = g.value(x).dims3();
    if (xh, xw) == (h, w) {
        x
    } else {
        g.spatial(x, Rc::new(SpatialMap::bilinear(xh, xw, h, w)))
    }
}

/// Per-pixel softmax over scales of the upsampled logits, used as convex
/// weights on the upsampled transformed maps. Output is at `(h, w)`.
pub fn combine_scales_graph(g: &mut Graph, branches: &[(Var, Var)], h: usize, w: usize) -> Var {
    assert!(!branches.is_empty());
    let (logits, feats): (Vec<Var>, Vec<Var>) = branches
        .iter()
        .map(|&(a, t)| (upsample_to(g, a, h, w), upsample_to(g, t, h, w)))
        .unzip();
    let stacked = g.concat_last(&logits);
    let weights = g.softmax_last(stacked);
    let weighted: Vec<Var> = feats
        .iter()
        .enumerate()
        .map(|(z, &f)| {
            let wz = g.slice_last(weights, z, 1);
            g.mul_col(f, wz)
        })
        .collect();
    g.sum(&weighted)
}

/// Equal-weight combination used when multi-scale attention is disabled.
pub fn average_scales_graph(g: &mut Graph, feats: &[Var], h: usize, w: usize) -> Var {
    let up: Vec<(Var, f64)> = feats
        .iter()
        .map(|&f| (upsample_to(g, f, h, w), 1.0 / feats.len() as f64))
        .collect();
    g.lin_comb(&up)
}

pub fn scale_attention(x: &Tensor, params: &ParamStore) -> (Tensor, Tensor) {
    let mut g = Graph::new();
    let mut b = Binder::new(params, false);
    let xv = g.constant(x.clone());
    let (a, t) = scale_attention_graph(&mut g, &mut b, xv);
    (g.value(a).clone(), g.value(t).clone())
}

/// `branches[z] = (attention logits [h_z, w_z, 1], transformed [h_z, w_z, C])`.
pub fn combine_scales(branches: &[(Tensor, Tensor)], h: usize, w: usize) -> Tensor {
    let mut g = Graph::new();
    let vars: Vec<(Var, Var)> = branches
        .iter()
        .map(|(a, t)| (g.constant(a.clone()), g.constant(t.clone())))
        .collect();
    let out = combine_scales_graph(&mut g, &vars, h, w);
    g.value(out).clone()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shots(k: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<Prototype> {
        (0..k)
            .map(|_| Prototype {
                data: Tensor::randn(&[c], 1.0, rng),
                class_index: 1,
            })
            .collect()
    }

    #[test]
    fn single_shot_weight_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = init_relation(8, 2, &mut rng).unwrap();
        let w = relation_weights(&shots(1, 8, &mut rng), &p, 1);
        assert_eq!(w.shape(), &[1, 1]);
        assert!((w.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_shots_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = init_relation(8, 4, &mut rng).unwrap();
        let one = shots(1, 8, &mut rng).pop().unwrap();
        let w = relation_weights(&vec![one; 4], &p, 0);
        assert!(w.data().iter().all(|v| (v - 0.25).abs() < 1e-12));
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = init_relation(8, 2, &mut rng).unwrap();
        for r in 0..2 {
            *p.get_mut(&format!("relation.wv.{r}")).unwrap() = Tensor::zeros(&[8, 4]);
        }
        let s = shots(3, 8, &mut rng);
        let out = relational_modulate(&s, &p);
        for (a, b) in out.iter().zip(&s) {
            assert!(a.data.bit_eq(&b.data));
        }
        let with = class_prototype(&s, &p, true);
        let without = class_prototype(&s, &p, false);
        assert!(with.data.max_abs_diff(&without.data) < 1e-15);
    }

    #[test]
    fn identical_pair_stays_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_relation(8, 2, &mut rng).unwrap();
        let one = shots(1, 8, &mut rng).pop().unwrap();
        let out = relational_modulate(&[one.clone(), one], &p);
        assert!(out[0].data.bit_eq(&out[1].data));
    }

    #[test]
    fn single_shot_bypasses_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = init_relation(8, 2, &mut rng).unwrap();
        let s = shots(1, 8, &mut rng);
        assert!(class_prototype(&s, &p, true).data.bit_eq(&s[0].data));
    }

    #[test]
    fn plain_average_without_modulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = init_relation(8, 2, &mut rng).unwrap();
        let s = shots(5, 8, &mut rng);
        let got = class_prototype(&s, &p, false);
        for c in 0..8 {
            let mean = s.iter().map(|x| x.data.data()[c]).sum::<f64>() / 5.0;
            assert!((got.data.data()[c] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn n_r_must_divide_channels() {
        assert!(init_relation(10, 4, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn scale_attention_shapes_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = init_scale_attn(4, &mut rng);
        let x = Tensor::randn(&[5, 3, 4], 1.0, &mut rng);
        let (a, t) = scale_attention(&x, &p);
        assert_eq!(a.shape(), &[5, 3, 1]);
        assert_eq!(t.shape(), &[5, 3, 4]);
        let (a2, t2) = scale_attention(&x, &p);
        assert!(a.bit_eq(&a2) && t.bit_eq(&t2));
        for name in ["attn.conv1", "attn.conv2", "attn.conv3"] {
            let w = p.get_mut(&format!("scale_attn.{name}.weight")).unwrap();
            *w = Tensor::zeros(w.shape());
        }
        let (a0, _) = scale_attention(&x, &p);
        assert!(a0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_scale_combination_is_the_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[4, 4, 1], 1.0, &mut rng);
        let t = Tensor::randn(&[4, 4, 3], 1.0, &mut rng);
        let out = combine_scales(&[(a, t.clone())], 4, 4);
        assert!(out.max_abs_diff(&t) < 1e-15);
    }

    #[test]
    fn equal_logits_average_the_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Tensor::randn(&[4, 4, 1], 1.0, &mut rng);
        let t1 = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
        let t2 = Tensor::randn(&[4, 4, 2], 1.0, &mut rng);
        let out = combine_scales(&[(a.clone(), t1.clone()), (a, t2.clone())], 4, 4);
        let mean = t1.zip_map(&t2, |x, y| 0.5 * (x + y));
        assert!(out.max_abs_diff(&mean) < 1e-12);
    }
}
