//! Retargets a trained coarse model onto a different landmark tree.
//!
//! The branch decoders' last two stages are widened (doubled), carried
//! weights keep their values, and every weight that lets an old output read
//! a newly added channel is zeroed so pre-surgery outputs are reproduced
//! exactly. Each target node gets a fresh 1×1 head over its source branch's
//! pre-final features, initialized to copy the source response. Edge
//! convolutions are rebuilt for the target tree: edges whose endpoint pair
//! maps onto a source edge carry its kernel, new edges start at zero (the
//! message pass starts as the identity there).

use super::{edge_kernel_size, PCDModel, SurgeryInfo};
use crate::error::{Error, Result};
use crate::tensor::{sc, Parameter, Scalar, Tensor};
use crate::tree::DendriticTree;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::collections::HashMap;

/// How one carried parameter is reshaped into the widened model.
enum Xform {
    /// Not carried into the new model.
    Drop,
    /// Conv weight `[co,ci,k,k]` grown to the given dims: old block copied,
    /// old-output rows read zero from new inputs, new-output rows fresh.
    ConvWiden { co: usize, ci: usize },
    /// Transposed-conv weight `[ci,co,k,k]` grown likewise (fan-out is the
    /// second axis here).
    TconvWiden { ci: usize, co: usize },
    /// Batch-norm vector grown to `c`; new entries take the init value
    /// (gamma/var 1, beta/mean 0).
    BnExtend { c: usize },
    /// Conv weight `[co,ci,k,k]` with inputs zero-padded to `ci`.
    ZeroPadIn { ci: usize },
}

/// Grow `model` onto `target_tree`. `split_map[t]` names the source node
/// whose branch produces target node `t`'s response. The source model must
/// be a coarse-only build that has not itself been produced by surgery.
pub fn network_surgery<F: Scalar>(
    model: &PCDModel<F>,
    target_tree: &DendriticTree,
    split_map: &[usize],
    seed: u64,
) -> Result<PCDModel<F>> {
    if model.surgery.is_some() {
        return Err(Error::config("model has already undergone surgery"));
    }
    if model.cfg.with_fine_stage {
        return Err(Error::config("surgery on a fine-stage model is not supported"));
    }
    let src_n = model.tree.n();
    if split_map.len() != target_tree.n() {
        return Err(Error::config(format!(
            "split map covers {} nodes but target tree has {}",
            split_map.len(),
            target_tree.n()
        )));
    }
    if let Some(&bad) = split_map.iter().find(|&&s| s >= src_n) {
        return Err(Error::config(format!(
            "split map references source node {bad}, but source tree has {src_n}"
        )));
    }

    let old = model.branch.clone();
    let new = old.widened();
    let stages = old.channels.len();
    let feat = {
        let spec =
            super::BackboneSpec::with_fire_outs(3, model.cfg.stem_out, &model.cfg.fire_outs);
        spec.out_channels()
    };

    // Transform plan over carried parameter names; everything absent is
    // copied verbatim.
    let mut plan: HashMap<String, Xform> = HashMap::new();
    let mut prefixes: Vec<String> = (0..src_n).map(|i| format!("br{i}")).collect();
    prefixes.push("brbg".to_string());
    for p in &prefixes {
        for j in 0..stages {
            let ci_t = if j == 0 { feat } else { new.squeezes[j - 1] };
            plan.insert(
                format!("{p}.t{j}.w"),
                Xform::TconvWiden { ci: ci_t, co: new.channels[j] },
            );
            for part in ["gamma", "beta", "rmean", "rvar"] {
                plan.insert(format!("{p}.t{j}.bn.{part}"), Xform::BnExtend { c: new.channels[j] });
                plan.insert(format!("{p}.s{j}.bn.{part}"), Xform::BnExtend { c: new.squeezes[j] });
            }
            plan.insert(
                format!("{p}.s{j}.w"),
                Xform::ConvWiden { co: new.squeezes[j], ci: new.channels[j] },
            );
        }
        if p == "brbg" {
            plan.insert("brbg.out.w".to_string(), Xform::ZeroPadIn { ci: new.squeezes[stages - 1] });
        } else {
            // Node responses come from the per-target heads now.
            plan.insert(format!("{p}.out.w"), Xform::Drop);
            plan.insert(format!("{p}.out.b"), Xform::Drop);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params: Vec<Parameter<F>> = Vec::with_capacity(model.params.len());
    let mut index: HashMap<String, usize> = HashMap::new();
    let push = |params: &mut Vec<Parameter<F>>,
                    index: &mut HashMap<String, usize>,
                    name: String,
                    value: Tensor<F>,
                    trainable: bool| {
        index.insert(name.clone(), params.len());
        let mut p = Parameter::new(name, value);
        p.trainable = trainable;
        params.push(p);
    };

    for p in &model.params {
        if p.name.starts_with("edge.") {
            continue;
        }
        match plan.get(&p.name) {
            None => push(&mut params, &mut index, p.name.clone(), p.value.clone(), p.trainable),
            Some(Xform::Drop) => {}
            Some(&Xform::ConvWiden { co, ci }) => {
                let v = widen_conv(&p.value, co, ci, false, &mut rng)?;
                push(&mut params, &mut index, p.name.clone(), v, p.trainable);
            }
            Some(&Xform::TconvWiden { ci, co }) => {
                let v = widen_conv(&p.value, co, ci, true, &mut rng)?;
                push(&mut params, &mut index, p.name.clone(), v, p.trainable);
            }
            Some(&Xform::BnExtend { c }) => {
                let init = if p.name.ends_with(".gamma") || p.name.ends_with(".rvar") {
                    F::one()
                } else {
                    F::zero()
                };
                let mut v = Tensor::filled(&[c], init);
                v.data_mut()[..p.value.len()].copy_from_slice(p.value.data());
                push(&mut params, &mut index, p.name.clone(), v, p.trainable);
            }
            Some(&Xform::ZeroPadIn { ci }) => {
                let (co, ci_old, kh, kw) = p.value.dims4()?;
                let mut v = Tensor::zeros(&[co, ci, kh, kw]);
                for o in 0..co {
                    for c in 0..ci_old {
                        for e in 0..kh * kw {
                            v.data_mut()[(o * ci + c) * kh * kw + e] =
                                p.value.data()[(o * ci_old + c) * kh * kw + e];
                        }
                    }
                }
                push(&mut params, &mut index, p.name.clone(), v, p.trainable);
            }
        }
    }

    // Per-target heads: copy the mapped source response conv, zero weight on
    // the widened feature channels, so each target initially reproduces its
    // source node's response map.
    let sq_old = old.squeezes[stages - 1];
    let sq_new = new.squeezes[stages - 1];
    for (t, &s) in split_map.iter().enumerate() {
        let src_w = &model.params[model.index[&format!("br{s}.out.w")]].value;
        let src_b = &model.params[model.index[&format!("br{s}.out.b")]].value;
        let mut w = Tensor::zeros(&[1, sq_new, 1, 1]);
        w.data_mut()[..sq_old].copy_from_slice(src_w.data());
        push(&mut params, &mut index, format!("head.t{t}.w"), w, true);
        push(&mut params, &mut index, format!("head.t{t}.b"), src_b.clone(), true);
    }

    // Target edge convolutions. An edge whose mapped endpoints form a source
    // edge carries that kernel; genuinely new edges start at zero so their
    // messages begin as the identity.
    let ek = edge_kernel_size(model.cfg.image_size);
    let src_edges: HashMap<(usize, usize), usize> = model
        .tree
        .directed_edges()
        .into_iter()
        .enumerate()
        .map(|(i, e)| (e, i))
        .collect();
    for (a, b) in target_tree.directed_edges() {
        let carried = if split_map[a] != split_map[b] {
            src_edges.contains_key(&(split_map[a], split_map[b]))
        } else {
            false
        };
        let (w, bias) = if carried {
            let sa = split_map[a];
            let sb = split_map[b];
            let w = model.params[model.index[&format!("edge.{sa}to{sb}.w")]].value.clone();
            let bv = model.params[model.index[&format!("edge.{sa}to{sb}.b")]].value.clone();
            (w, bv)
        } else {
            (Tensor::zeros(&[1, 1, ek, ek]), Tensor::zeros(&[1]))
        };
        push(&mut params, &mut index, format!("edge.{a}to{b}.w"), w, true);
        push(&mut params, &mut index, format!("edge.{a}to{b}.b"), bias, true);
    }

    let info = SurgeryInfo {
        source_tree: model.tree.name().to_string(),
        source_n: src_n,
        split_map: split_map.to_vec(),
    };
    Ok(PCDModel::from_parts(
        target_tree.clone(),
        model.cfg.clone(),
        new,
        Some(info),
        params,
        index,
    ))
}

/// Grow a (transposed) convolution weight. `transposed` selects the
/// `[ci,co,k,k]` layout; otherwise `[co,ci,k,k]`. Old weights keep their
/// positions, old outputs read zero from new inputs, and new output
/// channels draw fresh He-initialized values over the full fan-in.
fn widen_conv<F: Scalar>(
    old: &Tensor<F>,
    co: usize,
    ci: usize,
    transposed: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<F>> {
    let (d0, d1, kh, kw) = old.dims4()?;
    let (co_old, ci_old) = if transposed { (d1, d0) } else { (d0, d1) };
    if co < co_old || ci < ci_old {
        return Err(Error::config("surgery cannot shrink a layer"));
    }
    let shape = if transposed { [ci, co, kh, kw] } else { [co, ci, kh, kw] };
    let mut v = Tensor::zeros(&shape);
    let std = (2.0 / (ci * kh * kw) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    {
        let data = v.data_mut();
        let at = |o: usize, c: usize, e: usize| {
            if transposed {
                (c * co + o) * kh * kw + e
            } else {
                (o * ci + c) * kh * kw + e
            }
        };
        let at_old = |o: usize, c: usize, e: usize| {
            if transposed {
                (c * co_old + o) * kh * kw + e
            } else {
                (o * ci_old + c) * kh * kw + e
            }
        };
        for o in 0..co_old {
            for c in 0..ci_old {
                for e in 0..kh * kw {
                    data[at(o, c, e)] = old.data()[at_old(o, c, e)];
                }
            }
        }
        for o in co_old..co {
            for c in 0..ci {
                for e in 0..kh * kw {
                    data[at(o, c, e)] = sc(dist.sample(rng));
                }
            }
        }
    }
    Ok(v)
}
