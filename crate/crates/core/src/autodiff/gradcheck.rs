//! Central-difference gradient verification.

use super::array::Array;
use super::graph::{Graph, NodeId};
use super::Result;

/// Compares analytic gradients against central differences for a scalar
/// function of the given parameters. `build` must be deterministic (no
/// dropout). Returns the maximum relative error over all parameter elements,
/// with denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(build: F, params: &[Array], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let eval = |values: &[Array]| -> Result<(f64, Vec<Array>)> {
        let mut graph = Graph::new();
        let ids: Vec<NodeId> = values
            .iter()
            .map(|v| graph.leaf(v.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut graph, &ids)?;
        let value = graph.value(loss).data()[0];
        let grads = graph.backward(loss)?;
        let param_grads = ids
            .iter()
            .map(|&id| {
                grads
                    .get(id)
                    .cloned()
                    .unwrap_or_else(|| Array::zeros(graph.value(id).shape()))
            })
            .collect();
        Ok((value, param_grads))
    };

    let (_, analytic) = eval(params)?;
    let mut max_rel = 0.0f64;
    let mut perturbed: Vec<Array> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for ei in 0..param.len() {
            let orig = param.data()[ei];
            perturbed[pi].data_mut()[ei] = orig + eps;
            let (fp, _) = eval(&perturbed)?;
            perturbed[pi].data_mut()[ei] = orig - eps;
            let (fm, _) = eval(&perturbed)?;
            perturbed[pi].data_mut()[ei] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matmul_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let params = vec![
            Array::uniform(&[4, 8], -1.0, 1.0, &mut rng),
            Array::uniform(&[8, 5], -1.0, 1.0, &mut rng),
            Array::uniform(&[5, 3], -1.0, 1.0, &mut rng),
        ];
        let err = grad_check(
            |g, p| {
                let ab = g.matmul(p[0], p[1])?;
                let abc = g.matmul(ab, p[2])?;
                g.sum(abc)
            },
            &params,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    /// Every differentiable primitive, randomized shapes ≤ 8 per dim,
    /// 100 seeds. Step 1e-5 throughout: small enough that truncation stays
    /// orders below the 1e-4 bound, large enough that f64 roundoff in the
    /// difference quotient cannot surface on near-cancelling gradients.
    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = 2 + (seed as usize % 7); // 2..=8
            let n = 2 + (seed as usize * 3 % 7);
            let k = 2 + (seed as usize * 5 % 7);
            let x = Array::uniform(&[m, n], -1.0, 1.0, &mut rng);
            let y = Array::uniform(&[m, n], -1.0, 1.0, &mut rng);
            let w = Array::uniform(&[n, k], -1.0, 1.0, &mut rng);
            let bias = Array::uniform(&[n], -1.0, 1.0, &mut rng);
            let col = Array::uniform(&[m, 1], -1.0, 1.0, &mut rng);
            let positive = Array::uniform(&[m, n], 0.05, 1.0, &mut rng);
            let targets: Vec<usize> = (0..m).map(|r| (seed as usize + r) % n).collect();
            let ids: Vec<usize> = (0..n).map(|j| (seed as usize + j) % (n + 2)).collect();
            let table = Array::uniform(&[5, n], -1.0, 1.0, &mut rng);
            let lookups: Vec<usize> = (0..m).map(|r| (seed as usize + 2 * r) % 5).collect();

            let checks: Vec<(&str, f64)> = vec![
                (
                    "matmul",
                    grad_check(|g, p| { let c = g.matmul(p[0], p[1])?; g.sum(c) }, &[x.clone(), w.clone()], 1e-5).unwrap(),
                ),
                (
                    "transpose",
                    grad_check(|g, p| { let t = g.transpose(p[0])?; g.sum(t) }, &[x.clone()], 1e-5).unwrap(),
                ),
                (
                    "add",
                    grad_check(|g, p| { let c = g.add(p[0], p[1])?; g.sum(c) }, &[x.clone(), y.clone()], 1e-5).unwrap(),
                ),
                (
                    "add_bias",
                    grad_check(|g, p| { let c = g.add_bias(p[0], p[1])?; g.sum(c) }, &[x.clone(), bias.clone()], 1e-5).unwrap(),
                ),
                (
                    "affine",
                    grad_check(|g, p| { let c = g.affine(p[0], -1.0, 1.0)?; g.sum(c) }, &[x.clone()], 1e-5).unwrap(),
                ),
                (
                    "mul",
                    grad_check(|g, p| { let c = g.mul(p[0], p[1])?; g.sum(c) }, &[x.clone(), y.clone()], 1e-5).unwrap(),
                ),
                (
                    "scale_rows",
                    grad_check(|g, p| { let c = g.scale_rows(p[0], p[1])?; g.sum(c) }, &[x.clone(), col.clone()], 1e-5).unwrap(),
                ),
                (
                    "softmax",
                    grad_check(
                        |g, p| {
                            let s = g.softmax(p[0])?;
                            // Weight the outputs so the check is not the
                            // trivial d(sum of each row)=0 case.
                            let wts = g.mul(s, p[1])?;
                            g.sum(wts)
                        },
                        &[x.clone(), y.clone()],
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "log_softmax",
                    grad_check(
                        |g, p| {
                            let s = g.log_softmax(p[0])?;
                            let wts = g.mul(s, p[1])?;
                            g.sum(wts)
                        },
                        &[x.clone(), y.clone()],
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "sigmoid",
                    grad_check(|g, p| { let s = g.sigmoid(p[0])?; g.sum(s) }, &[x.clone()], 1e-5).unwrap(),
                ),
                (
                    "relu",
                    grad_check(|g, p| { let s = g.relu(p[0])?; g.sum(s) }, &[x.clone()], 1e-5).unwrap(),
                ),
                (
                    "embedding",
                    grad_check(
                        |g, p| { let e = g.embedding(p[0], &lookups)?; g.sum(e) },
                        &[table.clone()],
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "layer_norm",
                    grad_check(
                        |g, p| { let l = g.layer_norm(p[0], p[1], p[2])?; let wts = g.mul(l, p[3])?; g.sum(wts) },
                        &[x.clone(), bias.clone(), Array::uniform(&[n], -1.0, 1.0, &mut rng), y.clone()],
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "concat_slice",
                    grad_check(
                        |g, p| {
                            let c = g.concat_cols(p[0], p[1])?;
                            let s = g.slice_cols(c, 1, n)?;
                            g.sum(s)
                        },
                        &[x.clone(), y.clone()],
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "cross_entropy",
                    grad_check(
                        |g, p| {
                            let lp = g.log_softmax(p[0])?;
                            g.cross_entropy(lp, &targets, None)
                        },
                        &[x.clone()],
                        1e-5,
                    )
                    .unwrap(),
                ),
                (
                    "log_floor",
                    grad_check(|g, p| { let l = g.log_floor(p[0], 1e-9)?; g.sum(l) }, &[positive.clone()], 1e-5).unwrap(),
                ),
                (
                    "scatter_add_cols",
                    grad_check(
                        |g, p| {
                            let s = g.scatter_add_cols(p[0], &ids, n + 2)?;
                            let wts = g.mul(s, p[1])?;
                            g.sum(wts)
                        },
                        &[x.clone(), Array::uniform(&[m, n + 2], -1.0, 1.0, &mut rng)],
                        1e-5,
                    )
                    .unwrap(),
                ),
            ];
            for (name, err) in checks {
                assert!(err < 1e-4, "seed {seed}: {name} relative error {err}");
            }
        }
    }

    #[test]
    fn forward_backward_is_bit_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let a = Array::uniform(&[6, 6], -1.0, 1.0, &mut rng);
            let b = Array::uniform(&[6, 6], -1.0, 1.0, &mut rng);
            let mut g = Graph::new();
            let na = g.leaf(a).unwrap();
            let nb = g.leaf(b).unwrap();
            let c = g.matmul(na, nb).unwrap();
            let s = g.softmax(c).unwrap();
            let l = g.sum(s).unwrap();
            let grads = g.backward(l).unwrap();
            (
                g.value(l).data().to_vec(),
                grads.get(na).unwrap().data().to_vec(),
            )
        };
        assert_eq!(run(), run());
    }
}
