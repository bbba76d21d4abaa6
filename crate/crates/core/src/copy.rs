//! The copy layer: mixes base-vocabulary generation probabilities with
//! source-position copy probabilities over a dynamically extended vocabulary.
//!
//! The decoder alone can only generate ids below the cutoff — every KB
//! element is masked to `<unk>` on the way in. This layer reads the raw
//! cross-attention scores, turns them into a distribution over source
//! positions, projects that onto the extended vocabulary by the (unmasked)
//! ids each position holds, and blends it with the generation distribution
//! using a learned balancing factor. Unseen KB tokens become reachable
//! purely by being attended to.

use crate::autodiff::{Array, AutodiffError, Graph, NodeId};

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Floor inside the training log so an untrained copy target (probability
/// numerically 0) yields a large finite loss instead of −∞.
pub const EPS_FLOOR: f64 = 1e-12;

/// Learnable parameters of the balancing projection: a single column that
/// reduces the attention-context vector to one logit per decode position.
#[derive(Debug, Clone)]
pub struct CopyParams {
    pub w: Array,
}

impl CopyParams {
    /// `context_dim` is the width of `A·V`, i.e. the concatenated value
    /// dimension of the cross-attention layer.
    pub fn zeros(context_dim: usize) -> Self {
        CopyParams { w: Array::zeros(&[context_dim, 1]) }
    }
}

/// Graph nodes for one decoding pass (all target positions as rows).
pub struct CopyStepOutput {
    /// Raw per-step attention scores `[tgt × src]`, averaged over heads.
    pub attention: NodeId,
    /// Generation distribution over the base target vocabulary `[tgt × base]`.
    pub p_gen: NodeId,
    /// Copy distribution over the extended vocabulary `[tgt × extended]`.
    pub p_copy: NodeId,
    /// Balancing factor per decode position `[tgt × 1]`.
    pub alpha: NodeId,
    /// Final mixed distribution over the extended vocabulary `[tgt × extended]`.
    pub p_final: NodeId,
}

/// Raw (unscaled) attention scores averaged over heads: one `[tgt × src]`
/// matrix from per-head `Q [tgt × d]`, `K [src × d]`.
pub fn attention_matrix(g: &mut Graph, q_heads: &[NodeId], k_heads: &[NodeId]) -> Result<NodeId> {
    if q_heads.is_empty() || q_heads.len() != k_heads.len() {
        return Err(AutodiffError::ShapeMismatch {
            op: "attention_matrix",
            a: vec![q_heads.len()],
            b: vec![k_heads.len()],
        });
    }
    let mut acc: Option<NodeId> = None;
    for (&q, &k) in q_heads.iter().zip(k_heads) {
        let kt = g.transpose(k)?;
        let scores = g.matmul(q, kt)?;
        acc = Some(match acc {
            None => scores,
            Some(prev) => g.add(prev, scores)?,
        });
    }
    g.affine(acc.unwrap(), 1.0 / q_heads.len() as f64, 0.0)
}

/// Balancing factor: `sigmoid(W ᵀ(A ᵀV))` evaluated for every decode
/// position at once — `sigmoid((A·V)·W)`, shape `[tgt × 1]`.
pub fn balance(g: &mut Graph, attention: NodeId, v: NodeId, params_w: NodeId) -> Result<NodeId> {
    let context = g.matmul(attention, v)?;
    let logit = g.matmul(context, params_w)?;
    g.sigmoid(logit)
}

/// Copy distribution: softmax over source positions, scattered onto
/// extended-vocabulary ids. Positions sharing an id pool their mass;
/// positions holding non-KB tokens contribute to their base id. `source_ids`
/// are the *unmasked* ids aligned with the attention columns.
pub fn copy_distribution(
    g: &mut Graph,
    attention: NodeId,
    source_ids: &[usize],
    cutoff: usize,
    extended_size: usize,
) -> Result<NodeId> {
    if extended_size < cutoff {
        return Err(AutodiffError::IndexOutOfRange {
            op: "copy_distribution",
            index: cutoff,
            size: extended_size,
        });
    }
    let weights = g.softmax(attention)?;
    g.scatter_add_cols(weights, source_ids, extended_size)
}

/// Final distribution: `(1−α)·p_gen_extended + α·p_copy`. The generation
/// distribution is zero-extended over the extra ids, so everything above the
/// base vocabulary can only come from copying.
pub fn combine(g: &mut Graph, p_gen: NodeId, p_copy: NodeId, alpha: NodeId) -> Result<NodeId> {
    let (t, base) = (g.value(p_gen).shape()[0], g.value(p_gen).shape()[1]);
    let extended = g.value(p_copy).shape()[1];
    if extended < base {
        return Err(AutodiffError::ShapeMismatch {
            op: "combine",
            a: vec![t, base],
            b: g.value(p_copy).shape().to_vec(),
        });
    }
    let p_gen_ext = if extended == base {
        p_gen
    } else {
        let zeros = g.leaf(Array::zeros(&[t, extended - base]))?;
        g.concat_cols(p_gen, zeros)?
    };
    let one_minus_alpha = g.affine(alpha, -1.0, 1.0)?;
    let gen_part = g.scale_rows(p_gen_ext, one_minus_alpha)?;
    let copy_part = g.scale_rows(p_copy, alpha)?;
    g.add(gen_part, copy_part)
}

/// Training loss: mean `−log(p_final[target] + ε)` over non-ignored rows.
pub fn copy_nll(
    g: &mut Graph,
    p_final: NodeId,
    targets: &[usize],
    ignore: Option<usize>,
) -> Result<NodeId> {
    let logp = g.log_floor(p_final, EPS_FLOOR)?;
    g.cross_entropy(logp, targets, ignore)
}

/// Full copy pass from raw attention inputs to the mixed distribution.
/// `v` is the concatenated per-head value matrix `[src × d_v]` and
/// `base_logits` the decoder's output logits `[tgt × base]`.
#[allow(clippy::too_many_arguments)]
pub fn copy_forward(
    g: &mut Graph,
    q_heads: &[NodeId],
    k_heads: &[NodeId],
    v: NodeId,
    params_w: NodeId,
    base_logits: NodeId,
    source_ids: &[usize],
    cutoff: usize,
    extended_size: usize,
) -> Result<CopyStepOutput> {
    let attention = attention_matrix(g, q_heads, k_heads)?;
    let alpha = balance(g, attention, v, params_w)?;
    let p_gen = g.softmax(base_logits)?;
    let p_copy = copy_distribution(g, attention, source_ids, cutoff, extended_size)?;
    let p_final = combine(g, p_gen, p_copy, alpha)?;
    Ok(CopyStepOutput { attention, p_gen, p_copy, alpha, p_final })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arr(shape: &[usize], data: &[f64]) -> Array {
        Array::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn orthogonal_queries_give_zero_scores() {
        let mut g = Graph::new();
        let q = g.leaf(arr(&[2, 2], &[1.0, 0.0, 1.0, 0.0])).unwrap();
        let k = g.leaf(arr(&[3, 2], &[0.0, 1.0, 0.0, -2.0, 0.0, 0.5])).unwrap();
        let a = attention_matrix(&mut g, &[q], &[k]).unwrap();
        assert!(g.value(a).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn one_by_one_attention_is_a_scalar_product() {
        let mut g = Graph::new();
        let q = g.leaf(arr(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let k = g.leaf(arr(&[1, 3], &[4.0, -5.0, 6.0])).unwrap();
        let a = attention_matrix(&mut g, &[q], &[k]).unwrap();
        assert_eq!(g.value(a).data(), &[4.0 - 10.0 + 18.0]);
    }

    #[test]
    fn attention_matches_per_element_dot_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q1 = Array::uniform(&[4, 4], -1.0, 1.0, &mut rng);
        let k1 = Array::uniform(&[4, 4], -1.0, 1.0, &mut rng);
        let q2 = Array::uniform(&[4, 4], -1.0, 1.0, &mut rng);
        let k2 = Array::uniform(&[4, 4], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let nq1 = g.leaf(q1.clone()).unwrap();
        let nk1 = g.leaf(k1.clone()).unwrap();
        let nq2 = g.leaf(q2.clone()).unwrap();
        let nk2 = g.leaf(k2.clone()).unwrap();
        let a = attention_matrix(&mut g, &[nq1, nq2], &[nk1, nk2]).unwrap();
        for t in 0..4 {
            for s in 0..4 {
                let mut expect = 0.0;
                for d in 0..4 {
                    expect += q1.at2(t, d) * k1.at2(s, d);
                    expect += q2.at2(t, d) * k2.at2(s, d);
                }
                expect /= 2.0;
                assert!((g.value(a).at2(t, s) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_weights_balance_to_half() {
        let mut g = Graph::new();
        let a = g.leaf(arr(&[2, 3], &[0.3, -1.0, 2.0, 0.0, 0.5, 0.25])).unwrap();
        let v = g.leaf(arr(&[3, 4], &[0.1; 12])).unwrap();
        let w = g.leaf(Array::zeros(&[4, 1])).unwrap();
        let alpha = balance(&mut g, a, v, w).unwrap();
        assert_eq!(g.value(alpha).data(), &[0.5, 0.5]);
    }

    #[test]
    fn balance_stays_inside_the_open_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let mut g = Graph::new();
            let a = g.leaf(Array::uniform(&[1, 3], -2.0, 2.0, &mut rng)).unwrap();
            let v = g.leaf(Array::uniform(&[3, 4], -2.0, 2.0, &mut rng)).unwrap();
            let w = g.leaf(Array::uniform(&[4, 1], -2.0, 2.0, &mut rng)).unwrap();
            let alpha = balance(&mut g, a, v, w).unwrap();
            let val = g.value(alpha).data()[0];
            assert!(val > 0.0 && val < 1.0, "alpha {val}");
        }
    }

    #[test]
    fn balance_gradient_wrt_weights_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let v = Array::uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let w = Array::uniform(&[5, 1], -1.0, 1.0, &mut rng);
        let err = grad_check(
            |g, p| {
                let alpha = balance(g, p[0], p[1], p[2])?;
                g.sum(alpha)
            },
            &[a, v, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn uniform_attention_gives_quarter_mass_to_the_kb_id() {
        let mut g = Graph::new();
        // One row of identical scores over 4 source positions → softmax 0.25
        // each. Position 2 holds the only KB id (7).
        let a = g.leaf(arr(&[1, 4], &[1.3; 4])).unwrap();
        let p = copy_distribution(&mut g, a, &[2, 4, 7, 3], 6, 9).unwrap();
        assert!((g.value(p).at2(0, 7) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn repeated_source_ids_pool_their_mass() {
        let mut g = Graph::new();
        let a = g.leaf(arr(&[1, 4], &[0.0; 4])).unwrap();
        let p = copy_distribution(&mut g, a, &[7, 1, 7, 2], 6, 9).unwrap();
        assert!((g.value(p).at2(0, 7) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn copy_distribution_is_a_distribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let mut g = Graph::new();
            let a = g.leaf(Array::uniform(&[2, 5], -3.0, 3.0, &mut rng)).unwrap();
            let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..10)).collect();
            let p = copy_distribution(&mut g, a, &ids, 6, 10).unwrap();
            for r in 0..2 {
                let s: f64 = (0..10).map(|c| g.value(p).at2(r, c)).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    fn mixed_setup(
        g: &mut Graph,
        alpha_val: f64,
    ) -> (NodeId, NodeId, NodeId) {
        let p_gen_raw = g.leaf(arr(&[1, 3], &[0.0, 1.0, 2.0])).unwrap();
        let p_gen = g.softmax(p_gen_raw).unwrap();
        let a = g.leaf(arr(&[1, 2], &[1.0, 0.0])).unwrap();
        let p_copy = copy_distribution(g, a, &[4, 1], 3, 5).unwrap();
        let alpha = g.leaf(arr(&[1, 1], &[alpha_val])).unwrap();
        (p_gen, p_copy, alpha)
    }

    #[test]
    fn alpha_zero_reduces_to_zero_extended_generation() {
        let mut g = Graph::new();
        let (p_gen, p_copy, alpha) = mixed_setup(&mut g, 0.0);
        let p_final = combine(&mut g, p_gen, p_copy, alpha).unwrap();
        let gen = g.value(p_gen).data().to_vec();
        let fin = g.value(p_final).data();
        assert_eq!(&fin[..3], &gen[..]);
        assert_eq!(&fin[3..], &[0.0, 0.0]);
    }

    #[test]
    fn alpha_one_reduces_to_the_copy_distribution() {
        let mut g = Graph::new();
        let (p_gen, p_copy, alpha) = mixed_setup(&mut g, 1.0);
        let p_final = combine(&mut g, p_gen, p_copy, alpha).unwrap();
        assert_eq!(g.value(p_final).data(), g.value(p_copy).data());
    }

    #[test]
    fn source_without_kb_ids_degenerates_to_a_base_mix() {
        let mut g = Graph::new();
        let p_gen_raw = g.leaf(arr(&[1, 4], &[0.5, -0.5, 1.0, 0.0])).unwrap();
        let p_gen = g.softmax(p_gen_raw).unwrap();
        let a = g.leaf(arr(&[1, 3], &[0.2, 0.9, -0.4])).unwrap();
        // All source ids below the cutoff; extended size == base size.
        let p_copy = copy_distribution(&mut g, a, &[2, 0, 3], 4, 4).unwrap();
        let alpha = g.leaf(arr(&[1, 1], &[0.3])).unwrap();
        let p_final = combine(&mut g, p_gen, p_copy, alpha).unwrap();
        let fin = g.value(p_final);
        assert_eq!(fin.shape(), &[1, 4]);
        let sum: f64 = fin.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        for c in 0..4 {
            let expect = 0.7 * g.value(p_gen).at2(0, c) + 0.3 * g.value(p_copy).at2(0, c);
            assert!((fin.at2(0, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn certain_target_has_near_zero_loss_and_uniform_is_log_n() {
        let mut g = Graph::new();
        let sure = g.leaf(arr(&[1, 4], &[0.0, 1.0, 0.0, 0.0])).unwrap();
        let loss = copy_nll(&mut g, sure, &[1], None).unwrap();
        assert!(g.value(loss).data()[0].abs() < 1e-9);

        let uniform = g.leaf(arr(&[1, 5], &[0.2; 5])).unwrap();
        let loss = copy_nll(&mut g, uniform, &[3], None).unwrap();
        assert!((g.value(loss).data()[0] - 5.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn copy_loss_gradient_matches_finite_differences() {
        // Three decode positions over a three-token source.
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let heads = 2;
        let d = 4;
        let mut params: Vec<Array> = (0..2 * heads)
            .map(|_| Array::uniform(&[3, d], -0.8, 0.8, &mut rng))
            .collect();
        params.push(Array::uniform(&[3, 2 * d], -0.8, 0.8, &mut rng)); // V
        params.push(Array::uniform(&[2 * d, 1], -0.8, 0.8, &mut rng)); // W
        params.push(Array::uniform(&[3, 6], -0.8, 0.8, &mut rng)); // logits
        let source_ids = [1, 7, 4];
        let err = grad_check(
            |g, p| {
                let out = copy_forward(
                    g,
                    &[p[0], p[1]],
                    &[p[2], p[3]],
                    p[4],
                    p[5],
                    p[6],
                    &source_ids,
                    6,
                    8,
                )?;
                copy_nll(g, out.p_final, &[7, 2, 4], None)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    /// Straight-line recomputation of the whole pipeline from raw inputs,
    /// sharing no code with the graph ops.
    #[allow(clippy::too_many_arguments)]
    fn brute_force_p_final(
        q_heads: &[Array],
        k_heads: &[Array],
        v: &Array,
        w: &Array,
        logits: &Array,
        source_ids: &[usize],
        extended: usize,
    ) -> Vec<Vec<f64>> {
        let t_len = q_heads[0].shape()[0];
        let s_len = k_heads[0].shape()[0];
        let d = q_heads[0].shape()[1];
        let dv = v.shape()[1];
        let base = logits.shape()[1];
        let mut out = Vec::new();
        for t in 0..t_len {
            // Eq. 1 per head, then average.
            let mut scores = vec![0.0; s_len];
            for s in 0..s_len {
                for (q, k) in q_heads.iter().zip(k_heads) {
                    for j in 0..d {
                        scores[s] += q.at2(t, j) * k.at2(s, j);
                    }
                }
                scores[s] /= q_heads.len() as f64;
            }
            // Eq. 2.
            let mut logit = 0.0;
            for j in 0..dv {
                let mut ctx = 0.0;
                for s in 0..s_len {
                    ctx += scores[s] * v.at2(s, j);
                }
                logit += ctx * w.data()[j];
            }
            let alpha = 1.0 / (1.0 + (-logit).exp());
            // Copy distribution.
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|x| (x - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let mut p_copy = vec![0.0; extended];
            for (s, &id) in source_ids.iter().enumerate() {
                p_copy[id] += exps[s] / z;
            }
            // Generation distribution, zero-extended.
            let lmax = (0..base).map(|c| logits.at2(t, c)).fold(f64::NEG_INFINITY, f64::max);
            let lexps: Vec<f64> = (0..base).map(|c| (logits.at2(t, c) - lmax).exp()).collect();
            let lz: f64 = lexps.iter().sum();
            let mut row = vec![0.0; extended];
            for i in 0..extended {
                let gen = if i < base { lexps[i] / lz } else { 0.0 };
                row[i] = (1.0 - alpha) * gen + alpha * p_copy[i];
            }
            out.push(row);
        }
        out
    }

    #[test]
    fn pipeline_matches_brute_force_recomputation() {
        for seed in 0..60u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t_len = 1 + (seed as usize % 4);
            let s_len = 1 + (seed as usize * 7 % 4);
            let heads = 1 + (seed as usize % 3);
            let d = 2 + (seed as usize % 3);
            let base = 4 + (seed as usize % 3);
            let extended = base + 1 + (seed as usize % (12 - base));
            let cutoff = base;
            let q_heads: Vec<Array> =
                (0..heads).map(|_| Array::uniform(&[t_len, d], -1.5, 1.5, &mut rng)).collect();
            let k_heads: Vec<Array> =
                (0..heads).map(|_| Array::uniform(&[s_len, d], -1.5, 1.5, &mut rng)).collect();
            let v = Array::uniform(&[s_len, heads * d], -1.5, 1.5, &mut rng);
            let w = Array::uniform(&[heads * d, 1], -1.5, 1.5, &mut rng);
            let logits = Array::uniform(&[t_len, base], -2.0, 2.0, &mut rng);
            let source_ids: Vec<usize> =
                (0..s_len).map(|_| rng.gen_range(0..extended)).collect();

            let mut g = Graph::new();
            let qh: Vec<NodeId> = q_heads.iter().map(|a| g.leaf(a.clone()).unwrap()).collect();
            let kh: Vec<NodeId> = k_heads.iter().map(|a| g.leaf(a.clone()).unwrap()).collect();
            let nv = g.leaf(v.clone()).unwrap();
            let nw = g.leaf(w.clone()).unwrap();
            let nl = g.leaf(logits.clone()).unwrap();
            let out = copy_forward(&mut g, &qh, &kh, nv, nw, nl, &source_ids, cutoff, extended)
                .unwrap();
            let expect =
                brute_force_p_final(&q_heads, &k_heads, &v, &w, &logits, &source_ids, extended);
            for t in 0..t_len {
                let sum: f64 = (0..extended).map(|i| g.value(out.p_final).at2(t, i)).sum();
                assert!((sum - 1.0).abs() < 1e-9, "seed {seed} row {t} sums to {sum}");
                for i in 0..extended {
                    let got = g.value(out.p_final).at2(t, i);
                    assert!(got >= 0.0);
                    assert!(
                        (got - expect[t][i]).abs() < 1e-9,
                        "seed {seed} [{t},{i}]: {got} vs {}",
                        expect[t][i]
                    );
                }
            }
        }
    }

    #[test]
    fn mass_above_cutoff_only_on_ids_present_in_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        for _ in 0..50 {
            let cutoff = 5;
            let extended = 9;
            let mut g = Graph::new();
            let q = g.leaf(Array::uniform(&[2, 3], -1.0, 1.0, &mut rng)).unwrap();
            let k = g.leaf(Array::uniform(&[3, 3], -1.0, 1.0, &mut rng)).unwrap();
            let v = g.leaf(Array::uniform(&[3, 3], -1.0, 1.0, &mut rng)).unwrap();
            let w = g.leaf(Array::uniform(&[3, 1], -1.0, 1.0, &mut rng)).unwrap();
            let logits = g.leaf(Array::uniform(&[2, cutoff], -1.0, 1.0, &mut rng)).unwrap();
            let source_ids: Vec<usize> = (0..3).map(|_| rng.gen_range(0..extended)).collect();
            let out =
                copy_forward(&mut g, &[q], &[k], v, w, logits, &source_ids, cutoff, extended)
                    .unwrap();
            for t in 0..2 {
                for id in cutoff..extended {
                    let mass = g.value(out.p_final).at2(t, id);
                    if !source_ids.contains(&id) {
                        assert_eq!(mass, 0.0, "phantom mass on absent id {id}");
                    }
                }
            }
        }
    }

    #[test]
    fn unseen_source_id_is_reachable_when_attended() {
        let mut g = Graph::new();
        let q = g.leaf(arr(&[1, 2], &[0.4, -0.2])).unwrap();
        let k = g.leaf(arr(&[2, 2], &[0.1, 0.3, -0.6, 0.2])).unwrap();
        let v = g.leaf(arr(&[2, 2], &[0.5, -0.1, 0.2, 0.7])).unwrap();
        let w = g.leaf(arr(&[2, 1], &[0.3, -0.9])).unwrap();
        let logits = g.leaf(arr(&[1, 4], &[0.1, 0.2, -0.1, 0.0])).unwrap();
        // Id 6 stands in for a KB token never seen in training: nothing in
        // the model depends on it, yet it must receive probability.
        let out = copy_forward(&mut g, &[q], &[k], v, w, logits, &[2, 6], 4, 7).unwrap();
        let alpha = g.value(out.alpha).data()[0];
        assert!(alpha > 0.0);
        assert!(g.value(out.p_final).at2(0, 6) > 0.0);
    }
}
