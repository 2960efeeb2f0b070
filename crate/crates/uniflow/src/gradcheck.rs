//! Finite-difference verification of the tape's gradients.
//!
//! `check_gradients` rebuilds the forward pass with single-coordinate
//! perturbations and compares central differences against the analytic
//! gradient. Everything runs in f64; the builder closure must be
//! deterministic (same loss for same parameter values).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

use crate::graph::{Graph, NodeId};
use crate::tensor::{Result, Tensor};

/// |a - n| / (|a| + |n| + 1e-12)
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

/// Max relative error between analytic and central-difference gradients over
/// every parameter tensor, sampling at most `max_coords` coordinates per
/// tensor (deterministically, from `seed`).
pub fn check_gradients<F>(
    build: &F,
    params: &[Tensor<f64>],
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&mut g, &ids)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[pi], p.shape());
        let coords: Vec<usize> = if p.len() <= max_coords {
            (0..p.len()).collect()
        } else {
            sample_indices(&mut rng, p.len(), max_coords)
        };
        for ci in coords {
            let fp = eval_perturbed(build, params, pi, ci, h)?;
            let fm = eval_perturbed(build, params, pi, ci, -h)?;
            let numeric = (fp - fm) / (2.0 * h);
            let r = rel_err(analytic.data()[ci], numeric);
            if r > worst {
                worst = r;
            }
        }
    }
    Ok(worst)
}

fn eval_perturbed<F>(build: &F, params: &[Tensor<f64>], pi: usize, ci: usize, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut t = t.clone();
            if i == pi {
                t.data_mut()[ci] += h;
            }
            g.leaf(t)
        })
        .collect();
    let loss = build(&mut g, &ids)?;
    Ok(g.scalar_value(loss))
}

fn sample_indices(rng: &mut ChaCha8Rng, len: usize, k: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, len, k).into_vec()
}

/// One random gradient-check instance for each differentiable op. Returns
/// (op name, max rel err) pairs; `instances` fresh draws per op.
pub fn op_gradient_sweep(instances: usize, seed: u64) -> Result<Vec<(String, f64)>> {
    const H: f64 = 1e-5;
    const COORDS: usize = 64;
    let mut results = Vec::new();
    let ops: Vec<(&str, OpCase)> = op_cases();
    for (name, case) in ops {
        let mut worst = 0.0f64;
        for inst in 0..instances {
            let mut rng = ChaCha8Rng::seed_from_u64(
                seed ^ (inst as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ hash_name(name),
            );
            let r = case(&mut rng, H, COORDS)?;
            if r > worst {
                worst = r;
            }
        }
        results.push((name.to_string(), worst));
    }
    Ok(results)
}

fn hash_name(name: &str) -> u64 {
    name.bytes().fold(1469598103934665603u64, |h, b| (h ^ b as u64).wrapping_mul(1099511628211))
}

type OpCase = Box<dyn Fn(&mut ChaCha8Rng, f64, usize) -> Result<f64>>;

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(2..=5)
}

fn op_cases() -> Vec<(&'static str, OpCase)> {
    let mut v: Vec<(&'static str, OpCase)> = Vec::new();

    v.push((
        "add",
        Box::new(|rng, h, k| {
            let (r, c) = (dim(rng), dim(rng));
            let a = Tensor::randn(&[r, c], 1.0, rng);
            let b = Tensor::randn(&[r, c], 1.0, rng);
            check_gradients(
                &|g: &mut Graph<f64>, ids: &[NodeId]| {
                    let s = g.add(ids[0], ids[1])?;
                    g.mean_all(s)
                },
                &[a, b],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "sub",
        Box::new(|rng, h, k| {
            let (r, c) = (dim(rng), dim(rng));
            let a = Tensor::randn(&[r, c], 1.0, rng);
            let b = Tensor::randn(&[r, c], 1.0, rng);
            check_gradients(
                &|g: &mut Graph<f64>, ids: &[NodeId]| {
                    let s = g.sub(ids[0], ids[1])?;
                    let sq = g.mul(s, s)?;
                    g.mean_all(sq)
                },
                &[a, b],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "mul",
        Box::new(|rng, h, k| {
            let (r, c) = (dim(rng), dim(rng));
            let a = Tensor::randn(&[r, c], 1.0, rng);
            let b = Tensor::randn(&[r, c], 1.0, rng);
            check_gradients(
                &|g: &mut Graph<f64>, ids: &[NodeId]| {
                    let s = g.mul(ids[0], ids[1])?;
                    g.mean_all(s)
                },
                &[a, b],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "scale",
        Box::new(|rng, h, k| {
            let (r, c) = (dim(rng), dim(rng));
            let a = Tensor::randn(&[r, c], 1.0, rng);
            let alpha: f64 = rng.gen_range(-2.0..2.0);
            check_gradients(
                &move |g: &mut Graph<f64>, ids: &[NodeId]| {
                    let s = g.scale(ids[0], alpha)?;
                    let sq = g.mul(s, s)?;
                    g.mean_all(sq)
                },
                &[a],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "add_bias",
        Box::new(|rng, h, k| {
            let (r, c) = (dim(rng), dim(rng));
            let x = Tensor::randn(&[r, c], 1.0, rng);
            let b = Tensor::randn(&[c], 1.0, rng);
            check_gradients(
                &|g: &mut Graph<f64>, ids: &[NodeId]| {
                    let s = g.add_bias(ids[0], ids[1])?;
                    let sq = g.mul(s, s)?;
                    g.mean_all(sq)
                },
                &[x, b],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "matmul",
        Box::new(|rng, h, k| {
            let (m, kk, n) = (dim(rng), dim(rng), dim(rng));
            let a = Tensor::randn(&[m, kk], 1.0, rng);
            let b = Tensor::randn(&[kk, n], 1.0, rng);
            check_gradients(
                &|g: &mut Graph<f64>, ids: &[NodeId]| {
                    let s = g.matmul(ids[0], ids[1])?;
                    let sq = g.mul(s, s)?;
                    g.mean_all(sq)
                },
                &[a, b],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "matmul_nt",
        Box::new(|rng, h, k| {
            let (m, kk, n) = (dim(rng), dim(rng), dim(rng));
            let a = Tensor::randn(&[m, kk], 1.0, rng);
            let b = Tensor::randn(&[n, kk], 1.0, rng);
            check_gradients(
                &|g: &mut Graph<f64>, ids: &[NodeId]| {
                    let s = g.matmul_nt(ids[0], ids[1])?;
                    let sq = g.mul(s, s)?;
                    g.mean_all(sq)
                },
                &[a, b],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "softmax_rows",
        Box::new(|rng, h, k| {
            let (r, c) = (dim(rng), dim(rng));
            let x = Tensor::randn(&[r, c], 1.0, rng);
            let w = Tensor::randn(&[r, c], 1.0, rng);
            check_gradients(
                &move |g: &mut Graph<f64>, ids: &[NodeId]| {
                    let s = g.softmax_rows(ids[0])?;
                    let wn = g.constant(w.clone());
                    let p = g.mul(s, wn)?;
                    g.mean_all(p)
                },
                &[x],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "masked_softmax_rows",
        Box::new(|rng, h, k| {
            let (r, c) = (dim(rng), dim(rng));
            let x = Tensor::randn(&[r, c], 1.0, rng);
            let w = Tensor::randn(&[r, c], 1.0, rng);
            let mut mask = vec![false; r * c];
            for i in 0..r {
                for j in 0..c {
                    mask[i * c + j] = rng.gen_bool(0.6);
                }
                let forced = rng.gen_range(0..c);
                mask[i * c + forced] = true;
            }
            let mask = Arc::new(mask);
            check_gradients(
                &move |g: &mut Graph<f64>, ids: &[NodeId]| {
                    let s = g.masked_softmax_rows(ids[0], Arc::clone(&mask))?;
                    let wn = g.constant(w.clone());
                    let p = g.mul(s, wn)?;
                    g.mean_all(p)
                },
                &[x],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "layer_norm",
        Box::new(|rng, h, k| {
            let (r, c) = (dim(rng), dim(rng));
            let x = Tensor::randn(&[r, c], 1.0, rng);
            let gamma = Tensor::randn(&[c], 0.5, rng).map(|v| v + 1.0);
            let beta = Tensor::randn(&[c], 0.5, rng);
            let w = Tensor::randn(&[r, c], 1.0, rng);
            check_gradients(
                &move |g: &mut Graph<f64>, ids: &[NodeId]| {
                    let s = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
                    let wn = g.constant(w.clone());
                    let p = g.mul(s, wn)?;
                    g.mean_all(p)
                },
                &[x, gamma, beta],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "gelu",
        Box::new(|rng, h, k| {
            let (r, c) = (dim(rng), dim(rng));
            let x = Tensor::randn(&[r, c], 2.0, rng);
            check_gradients(
                &|g: &mut Graph<f64>, ids: &[NodeId]| {
                    let s = g.gelu(ids[0])?;
                    g.mean_all(s)
                },
                &[x],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "embedding",
        Box::new(|rng, h, k| {
            let (n, d, l) = (dim(rng) + 2, dim(rng), dim(rng) + 1);
            let table = Tensor::randn(&[n, d], 1.0, rng);
            let ids: Vec<usize> = (0..l).map(|_| rng.gen_range(0..n)).collect();
            let ids = Arc::new(ids);
            check_gradients(
                &move |g: &mut Graph<f64>, leaf: &[NodeId]| {
                    let e = g.embedding(leaf[0], Arc::clone(&ids))?;
                    let sq = g.mul(e, e)?;
                    g.mean_all(sq)
                },
                &[table],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "gather_rows",
        Box::new(|rng, h, k| {
            let (n, d, l) = (dim(rng) + 1, dim(rng), dim(rng) + 2);
            let x = Tensor::randn(&[n, d], 1.0, rng);
            let idx: Vec<usize> = (0..l).map(|_| rng.gen_range(0..n)).collect();
            let idx = Arc::new(idx);
            check_gradients(
                &move |g: &mut Graph<f64>, leaf: &[NodeId]| {
                    let e = g.gather_rows(leaf[0], Arc::clone(&idx))?;
                    let sq = g.mul(e, e)?;
                    g.mean_all(sq)
                },
                &[x],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "gather_flat",
        Box::new(|rng, h, k| {
            let n = dim(rng) * dim(rng) + 3;
            let l = dim(rng) * 2;
            let x = Tensor::randn(&[n], 1.0, rng);
            let idx: Vec<usize> = (0..l).map(|_| rng.gen_range(0..n)).collect();
            let idx = Arc::new(idx);
            let out_shape = vec![l];
            check_gradients(
                &move |g: &mut Graph<f64>, leaf: &[NodeId]| {
                    let e = g.gather_flat(leaf[0], Arc::clone(&idx), &out_shape)?;
                    let sq = g.mul(e, e)?;
                    g.mean_all(sq)
                },
                &[x],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "slice_cols",
        Box::new(|rng, h, k| {
            let (r, c) = (dim(rng), dim(rng) + 2);
            let x = Tensor::randn(&[r, c], 1.0, rng);
            let len = rng.gen_range(1..=c - 1);
            let start = rng.gen_range(0..=c - len);
            check_gradients(
                &move |g: &mut Graph<f64>, leaf: &[NodeId]| {
                    let e = g.slice_cols(leaf[0], start, len)?;
                    let sq = g.mul(e, e)?;
                    g.mean_all(sq)
                },
                &[x],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "concat_rows",
        Box::new(|rng, h, k| {
            let c = dim(rng);
            let a = Tensor::randn(&[dim(rng), c], 1.0, rng);
            let b = Tensor::randn(&[dim(rng), c], 1.0, rng);
            check_gradients(
                &|g: &mut Graph<f64>, leaf: &[NodeId]| {
                    let e = g.concat_rows(&[leaf[0], leaf[1]])?;
                    let sq = g.mul(e, e)?;
                    g.mean_all(sq)
                },
                &[a, b],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "concat_cols",
        Box::new(|rng, h, k| {
            let r = dim(rng);
            let a = Tensor::randn(&[r, dim(rng)], 1.0, rng);
            let b = Tensor::randn(&[r, dim(rng)], 1.0, rng);
            check_gradients(
                &|g: &mut Graph<f64>, leaf: &[NodeId]| {
                    let e = g.concat_cols(&[leaf[0], leaf[1]])?;
                    let sq = g.mul(e, e)?;
                    g.mean_all(sq)
                },
                &[a, b],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "reshape",
        Box::new(|rng, h, k| {
            let (r, c) = (dim(rng), dim(rng) * 2);
            let x = Tensor::randn(&[r, c], 1.0, rng);
            let new_shape = vec![r * c / 2, 2];
            check_gradients(
                &move |g: &mut Graph<f64>, leaf: &[NodeId]| {
                    let e = g.reshape(leaf[0], &new_shape)?;
                    let sq = g.mul(e, e)?;
                    g.mean_all(sq)
                },
                &[x],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "mean_pool_rows",
        Box::new(|rng, h, k| {
            let group = rng.gen_range(2..=3);
            let (r, c) = (group * dim(rng), dim(rng));
            let x = Tensor::randn(&[r, c], 1.0, rng);
            check_gradients(
                &move |g: &mut Graph<f64>, leaf: &[NodeId]| {
                    let e = g.mean_pool_rows(leaf[0], group)?;
                    let sq = g.mul(e, e)?;
                    g.mean_all(sq)
                },
                &[x],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "mean_all",
        Box::new(|rng, h, k| {
            let x = Tensor::randn(&[dim(rng), dim(rng)], 1.0, rng);
            check_gradients(
                &|g: &mut Graph<f64>, leaf: &[NodeId]| {
                    let sq = g.mul(leaf[0], leaf[0])?;
                    g.mean_all(sq)
                },
                &[x],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "sum_all",
        Box::new(|rng, h, k| {
            let x = Tensor::randn(&[dim(rng), dim(rng)], 1.0, rng);
            check_gradients(
                &|g: &mut Graph<f64>, leaf: &[NodeId]| {
                    let sq = g.mul(leaf[0], leaf[0])?;
                    g.sum_all(sq)
                },
                &[x],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "mse",
        Box::new(|rng, h, k| {
            let (r, c) = (dim(rng), dim(rng));
            let a = Tensor::randn(&[r, c], 1.0, rng);
            let b = Tensor::randn(&[r, c], 1.0, rng);
            check_gradients(
                &|g: &mut Graph<f64>, leaf: &[NodeId]| g.mse(leaf[0], leaf[1]),
                &[a, b],
                h,
                k,
                7,
            )
        }),
    ));

    v.push((
        "ce_logits",
        Box::new(|rng, h, k| {
            let (r, c) = (dim(rng), dim(rng) + 2);
            let x = Tensor::randn(&[r, c], 1.0, rng);
            let targets: Vec<usize> = (0..r).map(|_| rng.gen_range(0..c)).collect();
            let mut weights: Vec<f64> = (0..r).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
            let forced = rng.gen_range(0..r);
            weights[forced] = 1.0;
            let targets = Arc::new(targets);
            let weights = Arc::new(weights);
            check_gradients(
                &move |g: &mut Graph<f64>, leaf: &[NodeId]| {
                    g.ce_logits(leaf[0], Arc::clone(&targets), Arc::clone(&weights))
                },
                &[x],
                h,
                k,
                7,
            )
        }),
    ));

    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rel_err_is_zero_for_equal_values() {
        assert_eq!(rel_err(1.5, 1.5), 0.0);
        assert!(rel_err(1.0, 1.1) > 0.0);
    }

    #[test]
    fn quadratic_loss_checks_out() {
        // loss = mean((x - 2)^2); exact gradient known, oracle must agree.
        let x = Tensor::from_vec(&[3], vec![0.5, 2.0, -1.0]).unwrap();
        let target = Tensor::full(&[3], 2.0);
        let worst = check_gradients(
            &move |g: &mut Graph<f64>, ids: &[NodeId]| {
                let t = g.constant(target.clone());
                g.mse(ids[0], t)
            },
            &[x],
            1e-5,
            64,
            0,
        )
        .unwrap();
        assert!(worst < 1e-9, "rel err {}", worst);
    }

    #[test]
    fn deliberately_wrong_gradient_is_caught() {
        // mean(x^3) built as x * x * x has gradient 3x^2 / n; pretending the
        // loss is mean(x^2) must blow past the tolerance.
        let x = Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap();
        let cubic = |g: &mut Graph<f64>, ids: &[NodeId]| {
            let sq = g.mul(ids[0], ids[0])?;
            let cu = g.mul(sq, ids[0])?;
            g.mean_all(cu)
        };
        let quad = |g: &mut Graph<f64>, ids: &[NodeId]| {
            let sq = g.mul(ids[0], ids[0])?;
            g.mean_all(sq)
        };
        let good = check_gradients(&cubic, &[x.clone()], 1e-5, 64, 0).unwrap();
        assert!(good < 1e-8);

        // Cross-check: analytic from quad, numeric from cubic.
        let mut g = Graph::new();
        let id = g.leaf(x.clone());
        let loss = quad(&mut g, &[id]).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(id).unwrap().data()[0];
        let mut xp = x.clone();
        xp.data_mut()[0] += 1e-5;
        let mut gp = Graph::new();
        let idp = gp.leaf(xp);
        let lp = cubic(&mut gp, &[idp]).unwrap();
        let mut xm = x.clone();
        xm.data_mut()[0] -= 1e-5;
        let mut gm = Graph::new();
        let idm = gm.leaf(xm);
        let lm = cubic(&mut gm, &[idm]).unwrap();
        let numeric = (gp.scalar_value(lp) - gm.scalar_value(lm)) / 2e-5;
        assert!(rel_err(analytic, numeric) > 1e-2);
    }

    #[test]
    fn sweep_covers_every_op_under_tolerance() {
        // Smoke version; the acceptance suite runs 20+ instances per op.
        for (name, worst) in op_gradient_sweep(3, 0xC0FFEE).unwrap() {
            assert!(worst < 1e-4, "{} rel err {}", name, worst);
        }
    }
}
