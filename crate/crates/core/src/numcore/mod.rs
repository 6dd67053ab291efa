//! Reverse-mode automatic differentiation over dense float64 tensors.
//!
//! The graph supports an optional recording backward pass whose chain-rule
//! steps become graph nodes themselves, which is what makes Jacobian-norm
//! regularizers differentiable (gradients of gradients). Reductions use a
//! fixed left-to-right order so identical graphs evaluate bitwise identically.

mod graph;
mod kernels;
mod tensor;

pub mod fdcheck;

pub use graph::{Graph, NodeId, RecordedGrads};
pub use kernels::{
    argmax, cross_entropy, dot, kl_divergence, matvec, matvec_transposed, norm1, norm2, norm_inf,
    norm_sq, softmax, sum, tanh_vec,
};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_dot_product() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let x = g.input(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let y = g.dot(w, x).unwrap();
        assert_eq!(g.value(y).as_scalar().unwrap(), 11.0);
        g.backward(y).unwrap();
        assert_eq!(g.grad(w).unwrap().values(), &[3.0, 4.0]);
        assert_eq!(g.grad(x).unwrap().values(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_softmax_cross_entropy() {
        // ∂CE(softmax(z), y)/∂z = p − onehot(y)
        let mut g = Graph::new();
        let z = g.input(Tensor::vector(vec![0.0, 0.0]).unwrap());
        let p = g.softmax(z).unwrap();
        let loss = g.cross_entropy(p, 0).unwrap();
        g.backward(loss).unwrap();
        let got = g.grad(z).unwrap().values().to_vec();
        assert!((got[0] - (-0.5)).abs() < 1e-12);
        assert!((got[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let v = g.input(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(g.backward(v), Err(Error::RootNotScalar { .. })));
    }

    #[test]
    fn unreachable_nodes_have_zero_gradient() {
        let mut g = Graph::new();
        let a = g.input(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = g.input(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let s = g.sum(a).unwrap();
        g.backward(s).unwrap();
        assert!(g.grad(b).is_none());
        assert_eq!(g.grad_or_zeros(b).values(), &[0.0, 0.0]);
        assert_eq!(g.grad(a).unwrap().values(), &[1.0, 1.0]);
    }

    #[test]
    fn double_backward_square_of_gradient() {
        // g(w) = (d/dx [w·x²])² = (2wx)²; at w=1, x=1: ∂g/∂w = 8wx·... = 8.
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0]).unwrap());
        let x = g.input(Tensor::vector(vec![1.0]).unwrap());
        let x2 = g.elem_mul(x, x).unwrap();
        let wx2 = g.elem_mul(w, x2).unwrap();
        let y = g.sum(wx2).unwrap();
        let grads = g.backward_recorded(y).unwrap();
        let gx = grads.get(x).unwrap();
        assert_eq!(g.value(gx).values(), &[2.0]); // 2wx = 2
        let sq = g.norm_sq(gx).unwrap();
        g.double_backward(sq).unwrap();
        let dw = g.grad(w).unwrap().values()[0];
        assert!((dw - 8.0).abs() < 1e-12, "got {dw}");
    }

    #[test]
    fn double_backward_linear_root_has_zero_curvature() {
        // Pure linear root: first gradients are constant in the leaves, so
        // second-order gradients vanish.
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![2.0, -1.0]).unwrap());
        let x = g.input(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let y = g.dot(w, x).unwrap();
        let grads = g.backward_recorded(y).unwrap();
        let gx = grads.get(x).unwrap();
        let s = g.sum(gx).unwrap();
        g.double_backward(s).unwrap();
        // d(sum of ∂y/∂x)/dx = 0; toward w it is d(Σw)/dw = 1 per entry.
        assert_eq!(g.grad_or_zeros(x).values(), &[0.0, 0.0]);
        assert_eq!(g.grad(w).unwrap().values(), &[1.0, 1.0]);
    }

    #[test]
    fn double_backward_requires_recording() {
        let mut g = Graph::new();
        let w = g.param(Tensor::vector(vec![1.0]).unwrap());
        let y = g.sum(w).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(
            g.double_backward(y),
            Err(Error::BackwardNotRecorded)
        ));
    }

    #[test]
    fn recorded_and_value_backward_agree_bitwise() {
        let recipe = GraphRecipe::random(&mut ChaCha8Rng::seed_from_u64(42));
        let leaves = recipe.random_leaves(&mut ChaCha8Rng::seed_from_u64(43));

        let (mut g1, leaf_ids1, root1) = recipe.build(&leaves);
        g1.backward(root1).unwrap();
        let plain: Vec<Vec<f64>> = leaf_ids1
            .iter()
            .map(|&id| g1.grad_or_zeros(id).values().to_vec())
            .collect();

        let (mut g2, leaf_ids2, root2) = recipe.build(&leaves);
        let rec = g2.backward_recorded(root2).unwrap();
        for (i, &id) in leaf_ids2.iter().enumerate() {
            let got = match rec.get(id) {
                Some(node) => g2.value(node).values().to_vec(),
                None => g2.grad_or_zeros(id).values().to_vec(),
            };
            let want = &plain[i];
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(want.iter()) {
                assert_eq!(
                    a.to_bits(),
                    b.to_bits(),
                    "recorded vs plain backward diverged"
                );
            }
        }
    }

    #[test]
    fn identical_graphs_are_bitwise_deterministic() {
        let recipe = GraphRecipe::random(&mut ChaCha8Rng::seed_from_u64(7));
        let leaves = recipe.random_leaves(&mut ChaCha8Rng::seed_from_u64(8));
        let run = || {
            let (mut g, leaf_ids, root) = recipe.build(&leaves);
            g.backward(root).unwrap();
            let v = g.value(root).as_scalar().unwrap();
            let grads: Vec<Vec<u64>> = leaf_ids
                .iter()
                .map(|&id| {
                    g.grad_or_zeros(id)
                        .values()
                        .iter()
                        .map(|x| x.to_bits())
                        .collect()
                })
                .collect();
            (v.to_bits(), grads)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn gradient_check_100_random_graphs() {
        // Spec-level invariant: analytic gradients match central differences
        // with relative error ≤ 1e-6 across random graphs (depth ≤ 4, dims ≤ 8).
        let mut seed_rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..100 {
            let recipe = GraphRecipe::random(&mut seed_rng);
            let leaves = recipe.random_leaves(&mut seed_rng);
            let flat = GraphRecipe::flatten(&leaves);

            let (mut g, leaf_ids, root) = recipe.build(&leaves);
            g.backward(root).unwrap();
            let analytic: Vec<f64> = leaf_ids
                .iter()
                .flat_map(|&id| g.grad_or_zeros(id).values().to_vec())
                .collect();

            let eval = |flat_vals: &[f64]| {
                let ls = recipe.unflatten(flat_vals);
                let (g, _, root) = recipe.build(&ls);
                g.value(root).as_scalar().unwrap()
            };
            let numeric = fdcheck::central_diff_grad(eval, &flat, 1e-5);
            let err = fdcheck::grad_rel_error(&analytic, &numeric);
            assert!(err <= 1e-6, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn second_order_matches_finite_differences_of_first_order() {
        // d/dW of ‖∂(sum tanh(Wx))/∂x‖² against central differences of the
        // recorded first-order gradient.
        let w0 = [0.3, -0.8, 1.1, 0.4];
        let x0 = [0.5, -0.25];

        let first_order = |w: &[f64]| -> Vec<f64> {
            let mut g = Graph::new();
            let wn = g.param(Tensor::matrix(2, 2, w.to_vec()).unwrap());
            let xn = g.input(Tensor::vector(x0.to_vec()).unwrap());
            let h = g.matvec(wn, xn).unwrap();
            let t = g.tanh(h).unwrap();
            let s = g.sum(t).unwrap();
            g.backward(s).unwrap();
            g.grad(xn).unwrap().values().to_vec()
        };

        let scalar_of_grad = |w: &[f64]| -> f64 { first_order(w).iter().map(|v| v * v).sum() };

        let analytic = {
            let mut g = Graph::new();
            let wn = g.param(Tensor::matrix(2, 2, w0.to_vec()).unwrap());
            let xn = g.input(Tensor::vector(x0.to_vec()).unwrap());
            let h = g.matvec(wn, xn).unwrap();
            let t = g.tanh(h).unwrap();
            let s = g.sum(t).unwrap();
            let rec = g.backward_recorded(s).unwrap();
            let gx = rec.get(xn).unwrap();
            let obj = g.norm_sq(gx).unwrap();
            g.double_backward(obj).unwrap();
            g.grad(wn).unwrap().values().to_vec()
        };
        let numeric = fdcheck::central_diff_grad(scalar_of_grad, &w0, 1e-5);
        let err = fdcheck::grad_rel_error(&analytic, &numeric);
        assert!(err <= 1e-7, "rel err {err}");
    }

    #[test]
    fn vat_style_kl_gradient_matches_fd() {
        // KL between a fixed distribution and a softmax of shifted logits,
        // differentiated w.r.t. the shift.
        let p0 = softmax(&[0.4, -0.2, 0.1]).unwrap();
        let z0 = [0.0, 0.5, -0.5];
        let eval = |d: &[f64]| {
            let logits: Vec<f64> = z0.iter().zip(d.iter()).map(|(a, b)| a + b).collect();
            let q = softmax(&logits).unwrap();
            kl_divergence(&p0, &q).unwrap()
        };
        let analytic = {
            let mut g = Graph::new();
            let d = g.input(Tensor::vector(vec![0.0; 3]).unwrap());
            let z = g.constant(Tensor::vector(z0.to_vec()).unwrap());
            let logits = g.add(z, d).unwrap();
            let q = g.softmax(logits).unwrap();
            let p = g.constant(Tensor::vector(p0.clone()).unwrap());
            let klv = g.kl(p, q).unwrap();
            g.backward(klv).unwrap();
            g.grad(d).unwrap().values().to_vec()
        };
        let numeric = fdcheck::central_diff_grad(eval, &[0.0; 3], 1e-6);
        let err = fdcheck::grad_rel_error(&analytic, &numeric);
        assert!(err <= 1e-7, "rel err {err}");
    }

    proptest! {
        #[test]
        fn softmax_normalizes(z in proptest::collection::vec(-500.0_f64..500.0, 2..9)) {
            let p = softmax(&z).unwrap();
            let total = sum(&p);
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn softmax_shift_invariant(
            z in proptest::collection::vec(-2.0_f64..2.0, 2..6),
            a in -2.0_f64..2.0,
        ) {
            let p = softmax(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|&v| v + a).collect();
            let q = softmax(&shifted).unwrap();
            for (x, y) in p.iter().zip(q.iter()) {
                prop_assert!((x - y).abs() <= 1e-15);
            }
        }

        #[test]
        fn softmax_shift_invariant_wide(
            z in proptest::collection::vec(-50.0_f64..50.0, 2..6),
            a in -100.0_f64..100.0,
        ) {
            // Rounding of z_i + a perturbs logits by ~ε·|z_i + a|; the
            // tolerance scales accordingly.
            let p = softmax(&z).unwrap();
            let shifted: Vec<f64> = z.iter().map(|&v| v + a).collect();
            let q = softmax(&shifted).unwrap();
            let zmax = z.iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
            let tol = 1e-15 * (1.0 + a.abs() + zmax);
            for (x, y) in p.iter().zip(q.iter()) {
                prop_assert!((x - y).abs() <= tol);
            }
        }

        #[test]
        fn kl_gibbs_inequality(
            zp in proptest::collection::vec(-5.0_f64..5.0, 3),
            zq in proptest::collection::vec(-5.0_f64..5.0, 3),
        ) {
            let p = softmax(&zp).unwrap();
            let q = softmax(&zq).unwrap();
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= 0.0);
            // Zero iff equal: distinguishable inputs give strictly positive KL.
            let dist: f64 = p.iter().zip(q.iter()).map(|(a, b)| (a - b).abs()).sum();
            if dist > 1e-9 {
                prop_assert!(kl > 0.0);
            }
            let self_kl = kl_divergence(&p, &p).unwrap();
            prop_assert!(self_kl == 0.0);
        }
    }

    // ── random graph recipes for the gradient-check invariant ───────────

    #[derive(Clone, Debug)]
    enum Step {
        Tanh(usize),
        ScaleBy(usize, f64),
        AddPair(usize, usize),
        MulPair(usize, usize),
        Softmax(usize),
        MatVec(usize), // uses the matrix leaf
    }

    #[derive(Clone, Debug)]
    enum Reduce {
        Sum(usize),
        NormSq(usize),
        Kl(usize, usize),
        CrossEntropy(usize, usize),
    }

    /// A reproducible recipe: leaf shapes, a sequence of ops over a growing
    /// list of vector slots, and a final scalar reduction.
    struct GraphRecipe {
        dim: usize,
        n_vec_leaves: usize,
        steps: Vec<Step>,
        reduce: Reduce,
    }

    impl GraphRecipe {
        fn random(rng: &mut ChaCha8Rng) -> Self {
            let dim = rng.random_range(2..=8);
            let n_vec_leaves = rng.random_range(1..=3);
            let depth = rng.random_range(1..=4);
            let mut slots = n_vec_leaves;
            let mut steps = Vec::new();
            let mut dist_slots: Vec<usize> = Vec::new();
            for _ in 0..depth {
                let src = rng.random_range(0..slots);
                let step = match rng.random_range(0..6) {
                    0 => Step::Tanh(src),
                    1 => Step::ScaleBy(src, rng.random_range(-2.0..2.0)),
                    2 => Step::AddPair(src, rng.random_range(0..slots)),
                    3 => Step::MulPair(src, rng.random_range(0..slots)),
                    4 => {
                        dist_slots.push(slots);
                        Step::Softmax(src)
                    }
                    _ => Step::MatVec(src),
                };
                steps.push(step);
                slots += 1;
            }
            let reduce = if dist_slots.len() >= 2 && rng.random_range(0..3) == 0 {
                Reduce::Kl(dist_slots[0], dist_slots[1])
            } else if !dist_slots.is_empty() && rng.random_range(0..3) == 0 {
                Reduce::CrossEntropy(dist_slots[0], rng.random_range(0..dim))
            } else if rng.random_range(0..2) == 0 {
                Reduce::Sum(slots - 1)
            } else {
                Reduce::NormSq(slots - 1)
            };
            GraphRecipe {
                dim,
                n_vec_leaves,
                steps,
                reduce,
            }
        }

        /// Leaf layout: n_vec_leaves vectors of `dim`, then one dim×dim matrix.
        fn random_leaves(&self, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
            let mut out = Vec::new();
            for _ in 0..self.n_vec_leaves {
                out.push((0..self.dim).map(|_| rng.random_range(-1.5..1.5)).collect());
            }
            out.push(
                (0..self.dim * self.dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect(),
            );
            out
        }

        fn flatten(leaves: &[Vec<f64>]) -> Vec<f64> {
            leaves.iter().flatten().copied().collect()
        }

        fn unflatten(&self, flat: &[f64]) -> Vec<Vec<f64>> {
            let mut out = Vec::new();
            let mut pos = 0;
            for _ in 0..self.n_vec_leaves {
                out.push(flat[pos..pos + self.dim].to_vec());
                pos += self.dim;
            }
            out.push(flat[pos..].to_vec());
            out
        }

        fn build(&self, leaves: &[Vec<f64>]) -> (Graph, Vec<NodeId>, NodeId) {
            let mut g = Graph::new();
            let mut leaf_ids = Vec::new();
            let mut slots: Vec<NodeId> = Vec::new();
            for leaf in &leaves[..self.n_vec_leaves] {
                let id = g.input(Tensor::vector(leaf.clone()).unwrap());
                leaf_ids.push(id);
                slots.push(id);
            }
            let w = g.param(
                Tensor::matrix(self.dim, self.dim, leaves[self.n_vec_leaves].clone()).unwrap(),
            );
            leaf_ids.push(w);
            for step in &self.steps {
                let next = match *step {
                    Step::Tanh(a) => g.tanh(slots[a]).unwrap(),
                    Step::ScaleBy(a, k) => g.scale(slots[a], k).unwrap(),
                    Step::AddPair(a, b) => g.add(slots[a], slots[b]).unwrap(),
                    Step::MulPair(a, b) => g.elem_mul(slots[a], slots[b]).unwrap(),
                    Step::Softmax(a) => g.softmax(slots[a]).unwrap(),
                    Step::MatVec(a) => g.matvec(w, slots[a]).unwrap(),
                };
                slots.push(next);
            }
            let root = match self.reduce {
                Reduce::Sum(a) => g.sum(slots[a]).unwrap(),
                Reduce::NormSq(a) => g.norm_sq(slots[a]).unwrap(),
                Reduce::Kl(p, q) => g.kl(slots[p], slots[q]).unwrap(),
                Reduce::CrossEntropy(p, class) => g.cross_entropy(slots[p], class).unwrap(),
            };
            (g, leaf_ids, root)
        }
    }
}
