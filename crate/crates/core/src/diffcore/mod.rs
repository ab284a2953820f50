//! Tensors, forward kernels and a reverse-mode tape for the handful of
//! primitives the model is built from.

mod gradcheck;
mod ops;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, EntrySelection, GradCheckReport, WorstEntry};
pub use ops::{
    cosine_sim, gelu, gelu_scalar, layer_norm, linear, mlp_block, self_attention, softmax,
    AttentionWeights, COSINE_EPS, LAYER_NORM_EPS,
};
pub use params::{ParamId, ParamSlot, ParamStore};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Result;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store_with<T: Real>(rng: &mut ChaCha8Rng, shapes: &[(&str, &[usize])]) -> (ParamStore<T>, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = shapes
            .iter()
            .map(|(name, shape)| {
                let n = shape.iter().product();
                let data = (0..n).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
                store.add(*name, Tensor::new(shape.to_vec(), data).unwrap())
            })
            .collect();
        (store, ids)
    }

    /// Contracts `node` against fixed pseudo-random weights so every output
    /// entry carries a distinct gradient.
    fn probe<T: Real>(tape: &mut Tape<T>, node: NodeId, seed: u64) -> NodeId {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = tape.value(node).shape().to_vec();
        let n: usize = shape.iter().product();
        let w = (0..n).map(|_| T::lit(rng.random_range(-1.0..1.0))).collect();
        let w = tape.leaf(Tensor::new(vec![n], w).unwrap());
        let flat = tape.concat(&[node], &[n]).unwrap();
        let prod = tape.concat(&[flat], &[1, n]).unwrap();
        let w2 = tape.concat(&[w], &[n, 1]).unwrap();
        let y = tape.linear(prod, w2, None).unwrap();
        tape.sum(y)
    }

    fn check<T: Real>(store: &mut ParamStore<T>, f: impl Fn(&ParamStore<T>, &mut Tape<T>) -> Result<NodeId>) -> f64 {
        let report = grad_check(store, 1e-3, EntrySelection::All, f).unwrap();
        assert!(report.checked > 0, "nothing checked");
        assert!(report.max_rel_error.is_finite(), "{:?}", report.worst);
        report.max_rel_error
    }

    #[test]
    fn sum_of_linear_has_outer_product_grad() {
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::from_f64(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap());
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap());
        let wn = tape.param(&store, w);
        let y = tape.linear(x, wn, None).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        // d/dW_kj sum_j (x W)_j = x_k
        assert_eq!(store.grad(w).data(), &[1.0, 1.0, 2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn cosine_with_itself_has_zero_grad() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::from_f64(&[4], &[0.3, -1.2, 2.0, 0.7]).unwrap());
        let mut tape = Tape::new();
        let an = tape.param(&store, a);
        let s = tape.cosine(an, an).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert!(store.grad(a).data().iter().all(|g| g.abs() < 1e-5));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Tensor::zeros(&[3]));
        let mut tape = Tape::new();
        let an = tape.param(&store, a);
        assert!(tape.backward(an, &mut store).is_err());
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut store, ids) = store_with::<f32>(&mut rng, &[("w", &[4, 3]), ("b", &[3])]);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_f64(&[2, 4], &[0.5, -0.2, 0.1, 0.9, 1.0, 0.0, -0.4, 0.3]).unwrap());
        let (w, b) = (tape.param(&store, ids[0]), tape.param(&store, ids[1]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        let g = tape.gelu(y);
        let loss = tape.sum(g);
        tape.backward(loss, &mut store).unwrap();
        let once: Vec<f32> = store.grad(ids[0]).data().to_vec();
        tape.backward(loss, &mut store).unwrap();
        for (twice, once) in store.grad(ids[0]).data().iter().zip(&once) {
            assert_eq!(*twice, 2.0 * once);
        }
        store.zero_grad();
        assert!(store.grad(ids[0]).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn frozen_slots_are_untouched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut store, ids) = store_with::<f64>(&mut rng, &[("w", &[2, 2]), ("b", &[2])]);
        store.set_trainable(ids[1], false);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let (w, b) = (tape.param(&store, ids[0]), tape.param(&store, ids[1]));
        let y = tape.linear(x, w, Some(b)).unwrap();
        let loss = tape.sum(y);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad(ids[0]).data().iter().any(|&g| g != 0.0));
        assert!(store.grad(ids[1]).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn reverse_sweep_visits_each_node_once_in_reverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (store, ids) = store_with::<f64>(&mut rng, &[("a", &[3]), ("b", &[3])]);
        let mut tape = Tape::new();
        let a = tape.param(&store, ids[0]);
        let b = tape.param(&store, ids[1]);
        let s = tape.cosine(a, b).unwrap();
        let sa = tape.scale(a, s).unwrap();
        let c = tape.add(sa, b).unwrap();
        let loss = tape.sum(c);
        let grads = tape.gradients(loss).unwrap();
        let order: Vec<usize> = grads.visit_order().iter().map(|n| n.index()).collect();
        assert_eq!(order, (0..tape.len()).rev().collect::<Vec<_>>());
    }

    #[test]
    fn quadratic_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (mut store, ids) = store_with::<f64>(&mut rng, &[("p", &[7])]);
        let err = check(&mut store, |s, t| {
            let p = t.param(s, ids[0]);
            let pp = t.concat(&[p], &[1, 7])?;
            let pc = t.concat(&[p], &[7, 1])?;
            let y = t.linear(pp, pc, None)?;
            Ok(t.sum(y))
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn unused_slot_checks_as_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (mut store, ids) = store_with::<f64>(&mut rng, &[("used", &[3]), ("unused", &[2])]);
        let report = grad_check(&mut store, 1e-3, EntrySelection::All, |s, t| {
            let p = t.param(s, ids[0]);
            let q = t.gelu(p);
            Ok(t.sum(q))
        })
        .unwrap();
        assert_eq!(report.checked, 5);
        assert!(report.max_rel_error < 1e-3);
    }

    fn primitive_suite<T: Real>(tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let shapes: &[(&str, &[usize])] = &[
            ("x", &[3, 4]),
            ("w", &[4, 4]),
            ("b", &[4]),
            ("g", &[4]),
            ("beta", &[4]),
            ("u", &[4]),
            ("v", &[4]),
        ];
        let (mut store, ids) = store_with::<T>(&mut rng, shapes);
        let p = |t: &mut Tape<T>, s: &ParamStore<T>, i: usize| t.param(s, ids[i]);

        let err = check(&mut store, |s, t| {
            let (x, w, b) = (p(t, s, 0), p(t, s, 1), p(t, s, 2));
            let y = t.linear(x, w, Some(b))?;
            Ok(probe(t, y, 1))
        });
        assert!(err < tol, "linear {err}");

        let err = check(&mut store, |s, t| {
            let (x, g, beta) = (p(t, s, 0), p(t, s, 3), p(t, s, 4));
            let y = t.layer_norm(x, g, beta, T::lit(1e-5))?;
            Ok(probe(t, y, 2))
        });
        assert!(err < tol, "layer_norm {err}");

        let err = check(&mut store, |s, t| {
            let x = p(t, s, 0);
            let y = t.gelu(x);
            Ok(probe(t, y, 3))
        });
        assert!(err < tol, "gelu {err}");

        let err = check(&mut store, |s, t| {
            let (u, v) = (p(t, s, 5), p(t, s, 6));
            let c = t.cosine(u, v)?;
            let y = t.scale(v, c)?;
            Ok(probe(t, y, 4))
        });
        assert!(err < tol, "cosine/scale {err}");

        let err = check(&mut store, |s, t| {
            let (x, w) = (p(t, s, 0), p(t, s, 1));
            let q = t.linear(x, w, None)?;
            let y = t.attention(q, x, x, 2)?;
            Ok(probe(t, y, 5))
        });
        assert!(err < tol, "attention {err}");

        let err = check(&mut store, |s, t| {
            let (x, u) = (p(t, s, 0), p(t, s, 5));
            let cat = t.concat(&[u, x], &[4, 4])?;
            let first = t.select_row(cat, 0)?;
            let rest = t.mean_rows(cat, 1, 4)?;
            let y = t.weighted_sum(&[(first, T::lit(0.5)), (rest, T::lit(-2.0))])?;
            Ok(probe(t, y, 6))
        });
        assert!(err < tol, "concat/select/mean {err}");

        let err = check(&mut store, |s, t| {
            let u = p(t, s, 5);
            let l = t.wce(u, 2, &[T::lit(1.0), T::lit(0.5), T::lit(0.1), T::lit(2.0)])?;
            Ok(l)
        });
        assert!(err < tol, "wce {err}");
    }

    #[test]
    fn primitives_pass_grad_check() {
        primitive_suite::<f64>(1e-3);
    }

    #[test]
    fn f32_gradients_track_f64() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (store64, ids) = store_with::<f64>(&mut rng, &[("x", &[4, 8]), ("w", &[8, 8]), ("g", &[8]), ("b", &[8])]);
        let store32 = store64.cast::<f32>();
        fn graph<T: Real>(s: &ParamStore<T>, t: &mut Tape<T>, ids: &[ParamId]) -> NodeId {
            let x = t.param(s, ids[0]);
            let w = t.param(s, ids[1]);
            let (g, b) = (t.param(s, ids[2]), t.param(s, ids[3]));
            let h = t.layer_norm(x, g, b, T::lit(1e-5)).unwrap();
            let q = t.linear(h, w, None).unwrap();
            let a = t.attention(q, h, h, 2).unwrap();
            let a = t.gelu(a);
            let m = t.mean_rows(a, 0, 4).unwrap();
            t.wce(m, 3, &[T::lit(1.0); 8]).unwrap()
        }
        let mut t64 = Tape::new();
        let l64 = graph(&store64, &mut t64, &ids);
        let g64 = t64.gradients(l64).unwrap();
        let mut t32 = Tape::new();
        let l32 = graph(&store32, &mut t32, &ids);
        let g32 = t32.gradients(l32).unwrap();
        for ((p64, a), (p32, b)) in g64.param_grads().zip(g32.param_grads()) {
            assert_eq!(p64, p32);
            let scale = a.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(a.max_abs_diff(&b.cast()) < 1e-4 * scale.max(1.0));
        }
    }

    #[test]
    fn random_composite_graph_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut store, ids) = store_with::<f64>(
            &mut rng,
            &[("x", &[5, 6]), ("w1", &[6, 6]), ("w2", &[6, 3]), ("g", &[6]), ("b", &[6])],
        );
        let err = check(&mut store, |s, t| {
            let x = t.param(s, ids[0]);
            let (w1, w2) = (t.param(s, ids[1]), t.param(s, ids[2]));
            let (g, b) = (t.param(s, ids[3]), t.param(s, ids[4]));
            let h = t.layer_norm(x, g, b, 1e-5)?;
            let a = t.attention(h, h, h, 1)?;
            let r = t.add(a, x)?;
            let z = t.linear(r, w1, None)?;
            let z = t.gelu(z);
            let pooled = t.mean_rows(z, 0, 5)?;
            let first = t.select_row(z, 0)?;
            let c = t.cosine(pooled, first)?;
            let mixed = t.scale(pooled, c)?;
            let logits = t.linear(mixed, w2, None)?;
            t.wce(logits, 1, &[1.0, 1.0, 0.1])
        });
        assert!(err < 1e-3, "{err}");
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (store, ids) = store_with::<f32>(&mut rng, &[("x", &[9, 8]), ("w", &[8, 8])]);
        let run = || {
            let mut t = Tape::new();
            let x = t.param(&store, ids[0]);
            let w = t.param(&store, ids[1]);
            let q = t.linear(x, w, None).unwrap();
            let y = t.attention(q, x, x, 2).unwrap();
            t.value(y).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
