//! Kernel two-sample statistic between scaling vectors and the pairwise
//! repulsion penalty built from it.
//!
//! Treating the n entries of a scaling vector as n scalar samples, the
//! squared maximum mean discrepancy between vectors u and v is
//!
//!   MMD² = Σ_{z≠k} κ(u_z,u_k)/(n(n−1)) + Σ_{z≠k} κ(v_z,v_k)/(n(n−1))
//!          − (2/n²)·Σ_{z,k} κ(u_z,v_k)
//!
//! with the RBF kernel κ(a,b) = exp(−(a−b)²/n). The penalty sums the layer
//! MMD² values per member pair, inverts each pair's sum (plus a small shift
//! keeping it finite at zero distance) and averages over pairs, so members
//! whose vectors collapse onto each other pay a steep price.

use crate::autodiff::{Tape, ValueId};
use crate::error::{Error, Result};
use crate::network::ScalingSet;

/// Shift added inside the inverse so identical scaling sets stay finite.
pub const PENALTY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Rbf,
}

/// Kernel choice for the two-sample statistic. Only the RBF kernel with
/// bandwidth equal to the vector length is implemented; the enum exists so
/// configs can name the kernel and future ones slot in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KernelSpec {
    pub kind: KernelKind,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            kind: KernelKind::Rbf,
        }
    }
}

#[inline]
fn rbf(a: f64, b: f64, n: f64) -> f64 {
    let d = a - b;
    (-(d * d) / n).exp()
}

/// Forward value of MMD² for equal-length vectors (n ≥ 2).
///
/// Swapping the arguments must reproduce the value bit for bit, so the
/// cross sum adds each transposed pair (z,k) / (k,z) as one two-operand
/// addition; everything else about the accumulation order is fixed.
pub(crate) fn mmd2_rbf_value(u: &[f64], v: &[f64]) -> f64 {
    let n = u.len();
    let nf = n as f64;
    let mut within_u = 0.0;
    let mut within_v = 0.0;
    let mut cross = 0.0;
    for z in 0..n {
        cross += rbf(u[z], v[z], nf);
        for k in (z + 1)..n {
            within_u += 2.0 * rbf(u[z], u[k], nf);
            within_v += 2.0 * rbf(v[z], v[k], nf);
            cross += rbf(u[z], v[k], nf) + rbf(u[k], v[z], nf);
        }
    }
    within_u / (nf * (nf - 1.0)) + within_v / (nf * (nf - 1.0)) - 2.0 * cross / (nf * nf)
}

/// Gradient of [`mmd2_rbf_value`] with respect to both vectors.
pub(crate) fn mmd2_rbf_grad(u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = u.len();
    let nf = n as f64;
    let within_coef = -4.0 / (nf * nf * (nf - 1.0));
    let cross_coef = 4.0 / (nf * nf * nf);
    let mut gu = vec![0.0; n];
    let mut gv = vec![0.0; n];
    for a in 0..n {
        let mut acc_u = 0.0;
        let mut acc_v = 0.0;
        for k in 0..n {
            if k != a {
                acc_u += rbf(u[a], u[k], nf) * (u[a] - u[k]);
                acc_v += rbf(v[a], v[k], nf) * (v[a] - v[k]);
            }
        }
        let mut cross_u = 0.0;
        let mut cross_v = 0.0;
        for k in 0..n {
            cross_u += rbf(u[a], v[k], nf) * (u[a] - v[k]);
            cross_v += rbf(u[k], v[a], nf) * (v[a] - u[k]);
        }
        gu[a] = within_coef * acc_u + cross_coef * cross_u;
        gv[a] = within_coef * acc_v + cross_coef * cross_v;
    }
    (gu, gv)
}

/// Squared maximum mean discrepancy between two equal-length vectors.
pub fn mmd2(u: &[f64], v: &[f64], kernel: &KernelSpec) -> Result<f64> {
    let KernelKind::Rbf = kernel.kind;
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "mmd2",
            lhs: vec![u.len()],
            rhs: vec![v.len()],
        });
    }
    if u.len() < 2 {
        return Err(Error::invalid("mmd2", "vectors need at least 2 entries"));
    }
    Ok(mmd2_rbf_value(u, v))
}

/// Penalty value for a full set of members:
/// (2λ/(N(N−1))) · Σ_{i<j} 1/(Σ_l MMD²(s^{l,i}, s^{l,j}) + ε).
pub fn penalty_value(sets: &[ScalingSet], lambda: f64, kernel: &KernelSpec) -> Result<f64> {
    let n = sets.len();
    if n < 2 {
        return Err(Error::invalid("diversity_penalty", "need at least 2 members"));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut pair = 0.0;
            for (su, sv) in sets[i].vectors.iter().zip(&sets[j].vectors) {
                pair += mmd2(su.data(), sv.data(), kernel)?;
            }
            acc += 1.0 / (pair + PENALTY_EPS);
        }
    }
    let nf = n as f64;
    Ok(2.0 * lambda / (nf * (nf - 1.0)) * acc)
}

/// Same penalty assembled on a tape from already-registered scaling leaves,
/// one `Vec<ValueId>` per member holding its per-layer vectors. Gradients
/// flow back into those leaves.
pub fn penalty_on_tape(
    tape: &mut Tape,
    member_vectors: &[Vec<ValueId>],
    lambda: f64,
    kernel: &KernelSpec,
) -> Result<ValueId> {
    let KernelKind::Rbf = kernel.kind;
    let n = member_vectors.len();
    if n < 2 {
        return Err(Error::invalid("diversity_penalty", "need at least 2 members"));
    }
    let mut acc: Option<ValueId> = None;
    for i in 0..n {
        for j in (i + 1)..n {
            if member_vectors[i].len() != member_vectors[j].len() {
                return Err(Error::invalid(
                    "diversity_penalty",
                    "members disagree on layer count",
                ));
            }
            let mut pair: Option<ValueId> = None;
            for (&u, &v) in member_vectors[i].iter().zip(&member_vectors[j]) {
                let m = tape.mmd2_rbf(u, v)?;
                pair = Some(match pair {
                    None => m,
                    Some(p) => tape.add(p, m)?,
                });
            }
            let pair = pair.ok_or_else(|| {
                Error::invalid("diversity_penalty", "members have no scaling vectors")
            })?;
            let inv = tape.recip_shift(pair, PENALTY_EPS);
            acc = Some(match acc {
                None => inv,
                Some(a) => tape.add(a, inv)?,
            });
        }
    }
    let nf = n as f64;
    Ok(tape.scale_const(acc.unwrap(), 2.0 * lambda / (nf * (nf - 1.0))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, Tape, Tensor};

    #[test]
    fn identical_constant_vectors_give_exact_zero() {
        let k = KernelSpec::default();
        assert_eq!(mmd2(&[0.0, 0.0], &[0.0, 0.0], &k).unwrap(), 0.0);
        assert_eq!(mmd2(&[3.5, 3.5, 3.5], &[3.5, 3.5, 3.5], &k).unwrap(), 0.0);
    }

    #[test]
    fn hand_evaluated_three_sum_case() {
        // u=[1,1], v=[0,0], n=2: within terms are 1 each, the cross sum has
        // four kernel values exp(-1/2), so MMD² = 2 − 2·exp(−1/2).
        let k = KernelSpec::default();
        let got = mmd2(&[1.0, 1.0], &[0.0, 0.0], &k).unwrap();
        let expect = 2.0 - 2.0 * (-0.5f64).exp();
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
    }

    #[test]
    fn symmetry_is_exact() {
        // Bitwise, not approximate: the cross sum pairs transposed terms so
        // the rounding sequence cannot depend on argument order.
        let k = KernelSpec::default();
        let mut state = 0x2545f4914f6cdd1du64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 6.0 - 3.0
        };
        for n in [2usize, 3, 5, 11] {
            for _ in 0..25 {
                let u: Vec<f64> = (0..n).map(|_| next()).collect();
                let v: Vec<f64> = (0..n).map(|_| next()).collect();
                let a = mmd2(&u, &v, &k).unwrap();
                let b = mmd2(&v, &u, &k).unwrap();
                assert_eq!(a.to_bits(), b.to_bits(), "u={u:?}, v={v:?}");
            }
        }
    }

    #[test]
    fn short_vectors_are_rejected() {
        let k = KernelSpec::default();
        assert!(mmd2(&[1.0], &[0.0], &k).is_err());
    }

    #[test]
    fn lower_bound_and_finiteness_on_random_vectors() {
        // MMD² ≥ −2/n: each within-term is positive and the cross term is
        // at most 2. Checked on a deterministic pseudo-random sweep.
        let k = KernelSpec::default();
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 8.0 - 4.0
        };
        for n in [2usize, 3, 7, 16] {
            for _ in 0..20 {
                let u: Vec<f64> = (0..n).map(|_| next()).collect();
                let v: Vec<f64> = (0..n).map(|_| next()).collect();
                let m = mmd2(&u, &v, &k).unwrap();
                assert!(m.is_finite());
                assert!(m >= -2.0 / n as f64 - 1e-12, "n={n}, m={m}");
            }
        }
    }

    #[test]
    fn tape_gradient_matches_finite_differences() {
        let u0 = [0.4, -0.9, 1.3];
        let v0 = [1.0, 0.2, -0.7];
        let f = |uv: &[f64]| {
            let mut t = Tape::new();
            let u = t.leaf(uv.to_vec(), vec![3]).unwrap();
            let v = t.leaf(v0.to_vec(), vec![3]).unwrap();
            let m = t.mmd2_rbf(u, v).unwrap();
            t.value(m)[0]
        };
        let numeric = gradcheck::central_diff(&mut { f }, &u0, 1e-5);
        let mut t = Tape::new();
        let u = t.leaf(u0.to_vec(), vec![3]).unwrap();
        let v = t.leaf(v0.to_vec(), vec![3]).unwrap();
        let m = t.mmd2_rbf(u, v).unwrap();
        t.backward(m).unwrap();
        gradcheck::assert_close(t.grad(u), &numeric, 1e-6, 1e-9);

        let g = |uv: &[f64]| {
            let mut t = Tape::new();
            let u = t.leaf(u0.to_vec(), vec![3]).unwrap();
            let v = t.leaf(uv.to_vec(), vec![3]).unwrap();
            let m = t.mmd2_rbf(u, v).unwrap();
            t.value(m)[0]
        };
        let numeric_v = gradcheck::central_diff(&mut { g }, &v0, 1e-5);
        gradcheck::assert_close(t.grad(v), &numeric_v, 1e-6, 1e-9);
    }

    fn set_from(member: usize, layers: &[&[f64]]) -> ScalingSet {
        ScalingSet {
            member,
            vectors: layers
                .iter()
                .map(|l| Tensor::new(vec![l.len()], l.to_vec()).unwrap())
                .collect(),
        }
    }

    #[test]
    fn identical_sets_hit_the_eps_ceiling() {
        let k = KernelSpec::default();
        let a = set_from(0, &[&[0.5, 0.5]]);
        let b = set_from(1, &[&[0.5, 0.5]]);
        let p = penalty_value(&[a, b], 0.1, &k).unwrap();
        // One pair, distance exactly zero: penalty = 2λ/(N(N−1)) · 1/ε.
        let expect = 0.1 * 1.0 / PENALTY_EPS;
        assert!((p - expect).abs() / expect < 1e-12);
    }

    #[test]
    fn zero_lambda_gives_zero() {
        let k = KernelSpec::default();
        let a = set_from(0, &[&[0.5, 0.1]]);
        let b = set_from(1, &[&[0.2, 0.9]]);
        assert_eq!(penalty_value(&[a, b], 0.0, &k).unwrap(), 0.0);
    }

    #[test]
    fn single_member_is_rejected() {
        let k = KernelSpec::default();
        let a = set_from(0, &[&[0.5, 0.1]]);
        assert!(penalty_value(&[a], 0.1, &k).is_err());
    }

    #[test]
    fn penalty_decreases_as_members_separate() {
        let k = KernelSpec::default();
        let mut last = f64::INFINITY;
        for d in [0.1, 0.5, 1.0] {
            let a = set_from(0, &[&[0.0, 0.0], &[0.0, 0.0, 0.0]]);
            let b = set_from(1, &[&[d, d], &[d, d, d]]);
            let p = penalty_value(&[a, b], 0.1, &k).unwrap();
            assert!(p < last, "penalty must fall as separation grows");
            last = p;
        }
    }

    #[test]
    fn tape_penalty_matches_value_and_finite_differences() {
        // 3 members, 2 layers of widths 2 and 3.
        let vals: Vec<Vec<Vec<f64>>> = vec![
            vec![vec![0.1, -0.4], vec![0.7, 0.2, -0.1]],
            vec![vec![0.9, 0.3], vec![-0.5, 0.8, 0.4]],
            vec![vec![-0.2, 0.6], vec![0.3, -0.9, 1.1]],
        ];
        let lambda = 0.1;
        let k = KernelSpec::default();

        let sets: Vec<ScalingSet> = vals
            .iter()
            .enumerate()
            .map(|(i, layers)| {
                set_from(i, &layers.iter().map(|l| l.as_slice()).collect::<Vec<_>>())
            })
            .collect();
        let direct = penalty_value(&sets, lambda, &k).unwrap();

        let build = |flat_first: &[f64]| {
            let mut t = Tape::new();
            let mut ids = Vec::new();
            for (i, layers) in vals.iter().enumerate() {
                let mut member = Vec::new();
                for (l, layer) in layers.iter().enumerate() {
                    let data = if i == 0 && l == 0 {
                        flat_first.to_vec()
                    } else {
                        layer.clone()
                    };
                    member.push(t.leaf(data, vec![layer.len()]).unwrap());
                }
                ids.push(member);
            }
            let p = penalty_on_tape(&mut t, &ids, lambda, &k).unwrap();
            (t, ids, p)
        };

        let (t, _, p) = build(&vals[0][0]);
        assert!((t.value(p)[0] - direct).abs() < 1e-12 * direct.abs().max(1.0));

        let mut f = |x: &[f64]| {
            let (t, _, p) = build(x);
            t.value(p)[0]
        };
        let numeric = gradcheck::central_diff(&mut f, &vals[0][0], 1e-5);
        let (mut t, ids, p) = build(&vals[0][0]);
        t.backward(p).unwrap();
        gradcheck::assert_close(t.grad(ids[0][0]), &numeric, 1e-4, 1e-9);
    }
}
