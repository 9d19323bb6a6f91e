//! Scalar reverse-mode differentiation on an arena tape, plus the rotation
//! and kinematics helpers built on it.
//!
//! The tape is rebuilt for every evaluation; branches that depend on values
//! (small-angle series, behind-camera gating) are chosen eagerly while the
//! graph is constructed, so backward passes never branch.

use crate::geom::Vec3;
use crate::skeleton::KinematicTree;

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(u32);

/// Arena of scalar operations with cached forward values and local partials.
#[derive(Debug, Default)]
pub struct Tape {
    vals: Vec<f64>,
    lhs: Vec<u32>,
    rhs: Vec<u32>,
    dl: Vec<f64>,
    dr: Vec<f64>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.vals[v.0 as usize]
    }

    fn push(&mut self, val: f64, l: (u32, f64), r: (u32, f64)) -> Var {
        let id = self.vals.len() as u32;
        self.vals.push(val);
        self.lhs.push(l.0);
        self.rhs.push(r.0);
        self.dl.push(l.1);
        self.dr.push(r.1);
        Var(id)
    }

    /// Leaf with respect to which gradients will be read.
    pub fn input(&mut self, v: f64) -> Var {
        self.push(v, (NONE, 0.0), (NONE, 0.0))
    }

    pub fn constant(&mut self, v: f64) -> Var {
        self.push(v, (NONE, 0.0), (NONE, 0.0))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, (a.0, 1.0), (b.0, 1.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, (a.0, 1.0), (b.0, -1.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va * vb, (a.0, vb), (b.0, va))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        self.push(va / vb, (a.0, 1.0 / vb), (b.0, -va / (vb * vb)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = -self.value(a);
        self.push(v, (a.0, -1.0), (NONE, 0.0))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = k * self.value(a);
        self.push(v, (a.0, k), (NONE, 0.0))
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, (a.0, 1.0), (NONE, 0.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va * va, (a.0, 2.0 * va), (NONE, 0.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).sqrt();
        self.push(v, (a.0, 0.5 / v), (NONE, 0.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).exp();
        self.push(v, (a.0, v), (NONE, 0.0))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.sin(), (a.0, va.cos()), (NONE, 0.0))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let va = self.value(a);
        self.push(va.cos(), (a.0, -va.sin()), (NONE, 0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).tanh();
        self.push(v, (a.0, 1.0 - v * v), (NONE, 0.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = 1.0 / (1.0 + (-self.value(a)).exp());
        self.push(v, (a.0, v * (1.0 - v)), (NONE, 0.0))
    }

    pub fn sum(&mut self, vars: &[Var]) -> Var {
        let mut acc = match vars.first() {
            Some(&v) => v,
            None => return self.constant(0.0),
        };
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Adjoints of every node with respect to `out`; index with `Var`
    /// handles via [`grad`](Self::grad).
    pub fn backward(&self, out: Var) -> Vec<f64> {
        let mut adj = vec![0.0; self.vals.len()];
        adj[out.0 as usize] = 1.0;
        for i in (0..=out.0 as usize).rev() {
            let g = adj[i];
            if g == 0.0 {
                continue;
            }
            if self.lhs[i] != NONE {
                adj[self.lhs[i] as usize] += g * self.dl[i];
            }
            if self.rhs[i] != NONE {
                adj[self.rhs[i] as usize] += g * self.dr[i];
            }
        }
        adj
    }

    pub fn grad(adjoints: &[f64], v: Var) -> f64 {
        adjoints[v.0 as usize]
    }
}

/// Differentiable 3-vector.
#[derive(Debug, Clone, Copy)]
pub struct TVec3(pub [Var; 3]);

impl TVec3 {
    pub fn inputs(tape: &mut Tape, v: &Vec3) -> Self {
        TVec3([tape.input(v.x), tape.input(v.y), tape.input(v.z)])
    }

    pub fn constants(tape: &mut Tape, v: &Vec3) -> Self {
        TVec3([tape.constant(v.x), tape.constant(v.y), tape.constant(v.z)])
    }

    pub fn add(&self, tape: &mut Tape, o: &TVec3) -> TVec3 {
        TVec3(std::array::from_fn(|i| tape.add(self.0[i], o.0[i])))
    }

    pub fn sub(&self, tape: &mut Tape, o: &TVec3) -> TVec3 {
        TVec3(std::array::from_fn(|i| tape.sub(self.0[i], o.0[i])))
    }

    pub fn dot(&self, tape: &mut Tape, o: &TVec3) -> Var {
        let mut acc = tape.mul(self.0[0], o.0[0]);
        for i in 1..3 {
            let p = tape.mul(self.0[i], o.0[i]);
            acc = tape.add(acc, p);
        }
        acc
    }

    pub fn cross(&self, tape: &mut Tape, o: &TVec3) -> TVec3 {
        let [a0, a1, a2] = self.0;
        let [b0, b1, b2] = o.0;
        let term = |t: &mut Tape, x: Var, y: Var, u: Var, v: Var| {
            let p = t.mul(x, y);
            let q = t.mul(u, v);
            t.sub(p, q)
        };
        TVec3([
            term(tape, a1, b2, a2, b1),
            term(tape, a2, b0, a0, b2),
            term(tape, a0, b1, a1, b0),
        ])
    }

    pub fn scale_var(&self, tape: &mut Tape, k: Var) -> TVec3 {
        TVec3(std::array::from_fn(|i| tape.mul(self.0[i], k)))
    }

    pub fn norm_sq(&self, tape: &mut Tape) -> Var {
        let c = *self;
        c.dot(tape, self)
    }

    pub fn values(&self, tape: &Tape) -> Vec3 {
        Vec3::new(
            tape.value(self.0[0]),
            tape.value(self.0[1]),
            tape.value(self.0[2]),
        )
    }
}

/// Differentiable 3x3 matrix, row-major.
#[derive(Debug, Clone, Copy)]
pub struct TMat3(pub [[Var; 3]; 3]);

impl TMat3 {
    pub fn identity(tape: &mut Tape) -> Self {
        let (o, z) = (tape.constant(1.0), tape.constant(0.0));
        TMat3([[o, z, z], [z, o, z], [z, z, o]])
    }

    pub fn constants(tape: &mut Tape, m: &nalgebra::Matrix3<f64>) -> Self {
        TMat3(std::array::from_fn(|r| {
            std::array::from_fn(|c| tape.constant(m[(r, c)]))
        }))
    }

    pub fn from_columns(c0: &TVec3, c1: &TVec3, c2: &TVec3) -> Self {
        TMat3(std::array::from_fn(|r| [c0.0[r], c1.0[r], c2.0[r]]))
    }

    pub fn matmul(&self, tape: &mut Tape, o: &TMat3) -> TMat3 {
        let mut out = [[self.0[0][0]; 3]; 3];
        for r in 0..3 {
            for c in 0..3 {
                let mut acc = tape.mul(self.0[r][0], o.0[0][c]);
                for k in 1..3 {
                    let p = tape.mul(self.0[r][k], o.0[k][c]);
                    acc = tape.add(acc, p);
                }
                out[r][c] = acc;
            }
        }
        TMat3(out)
    }

    pub fn apply(&self, tape: &mut Tape, v: &TVec3) -> TVec3 {
        TVec3(std::array::from_fn(|r| {
            let mut acc = tape.mul(self.0[r][0], v.0[0]);
            for k in 1..3 {
                let p = tape.mul(self.0[r][k], v.0[k]);
                acc = tape.add(acc, p);
            }
            acc
        }))
    }

    /// Squared Frobenius distance to a constant matrix.
    pub fn frobenius_sq_to(&self, tape: &mut Tape, target: &nalgebra::Matrix3<f64>) -> Var {
        let mut terms = Vec::with_capacity(9);
        for r in 0..3 {
            for c in 0..3 {
                let d = tape.add_const(self.0[r][c], -target[(r, c)]);
                terms.push(tape.square(d));
            }
        }
        tape.sum(&terms)
    }
}

/// Rodrigues formula for an axis-angle vector. The small-angle branch (a
/// second-order series, exact to the tolerance of the cutoff) is selected
/// eagerly from the current value.
pub fn rodrigues(tape: &mut Tape, aa: &TVec3) -> TMat3 {
    let sq = aa.norm_sq(tape);
    let (a, b) = if tape.value(sq) < 1e-12 {
        // sin(t)/t ~ 1 - sq/6, (1-cos t)/t^2 ~ 1/2 - sq/24
        let s = tape.scale(sq, -1.0 / 6.0);
        let a = tape.add_const(s, 1.0);
        let c = tape.scale(sq, -1.0 / 24.0);
        let b = tape.add_const(c, 0.5);
        (a, b)
    } else {
        let theta = tape.sqrt(sq);
        let st = tape.sin(theta);
        let a = tape.div(st, theta);
        let ct = tape.cos(theta);
        let one_m = tape.neg(ct);
        let one_m = tape.add_const(one_m, 1.0);
        let b = tape.div(one_m, sq);
        (a, b)
    };
    // R = I + a K + b K^2 with K the skew matrix of aa.
    let [x, y, z] = aa.0;
    let zero = tape.constant(0.0);
    let nx = tape.neg(x);
    let ny = tape.neg(y);
    let nz = tape.neg(z);
    let k = TMat3([[zero, nz, y], [z, zero, nx], [ny, x, zero]]);
    let k2 = k.matmul(tape, &k);
    let mut out = [[zero; 3]; 3];
    for r in 0..3 {
        for c in 0..3 {
            let ak = tape.mul(a, k.0[r][c]);
            let bk2 = tape.mul(b, k2.0[r][c]);
            let s = tape.add(ak, bk2);
            out[r][c] = if r == c { tape.add_const(s, 1.0) } else { s };
        }
    }
    TMat3(out)
}

/// Gram-Schmidt assembly of a rotation from six reals (two column vectors).
/// Norms are cushioned by a tiny epsilon so training-time outputs near zero
/// stay differentiable.
pub fn mat_from_6d(tape: &mut Tape, d: &[Var; 6]) -> TMat3 {
    let a1 = TVec3([d[0], d[1], d[2]]);
    let a2 = TVec3([d[3], d[4], d[5]]);
    let n1sq = a1.norm_sq(tape);
    let n1sq = tape.add_const(n1sq, 1e-12);
    let n1 = tape.sqrt(n1sq);
    let inv1 = {
        let one = tape.constant(1.0);
        tape.div(one, n1)
    };
    let b1 = a1.scale_var(tape, inv1);
    let proj = b1.dot(tape, &a2);
    let along = b1.scale_var(tape, proj);
    let ortho = a2.sub(tape, &along);
    let n2sq = ortho.norm_sq(tape);
    let n2sq = tape.add_const(n2sq, 1e-12);
    let n2 = tape.sqrt(n2sq);
    let inv2 = {
        let one = tape.constant(1.0);
        tape.div(one, n2)
    };
    let b2 = ortho.scale_var(tape, inv2);
    let b3 = b1.cross(tape, &b2);
    TMat3::from_columns(&b1, &b2, &b3)
}

/// Differentiable forward kinematics over per-joint local rotation matrices:
/// returns root-relative positions and global rotations.
pub fn fk_on_tape(
    tape: &mut Tape,
    tree: &KinematicTree,
    local: &[TMat3],
) -> (Vec<TVec3>, Vec<TMat3>) {
    let n = tree.joint_count();
    assert_eq!(local.len(), n);
    let zero = TVec3([
        tape.constant(0.0),
        tape.constant(0.0),
        tape.constant(0.0),
    ]);
    let mut positions = vec![zero; n];
    let mut rotations = Vec::with_capacity(n);
    rotations.push(local[0]);
    for j in 1..n {
        let p = tree.parent(j).expect("validated tree");
        let offset = TVec3::constants(tape, tree.offset(j));
        let moved = rotations[p].apply(tape, &offset);
        positions[j] = positions[p].add(tape, &moved);
        rotations.push(rotations[p].matmul(tape, &local[j]));
    }
    (positions, rotations)
}

/// Perspective projection onto Z=1; caller must gate on depth beforehand.
pub fn project_on_tape(tape: &mut Tape, p: &TVec3) -> [Var; 2] {
    [tape.div(p.0[0], p.0[2]), tape.div(p.0[1], p.0[2])]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{random_rotation, Rotation};
    use crate::skeleton::{fk_with_rotations, KinematicTree, Pose, JOINT_COUNT};
    use approx::assert_relative_eq;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient of a scalar function.
    fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                let mut xm = x.to_vec();
                xp[i] += h;
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let den: f64 = a.iter().zip(b).map(|(x, y)| x * x + y * y).sum::<f64>().sqrt();
        if den < 1e-12 {
            num
        } else {
            num / den
        }
    }

    #[test]
    fn scalar_ops_forward_values() {
        let mut t = Tape::new();
        let a = t.input(3.0);
        let b = t.input(4.0);
        let s = t.add(a, b);
        let m = t.mul(s, a);
        let q = t.sqrt(m);
        assert_relative_eq!(t.value(q), 21.0f64.sqrt());
        let e = t.exp(b);
        assert_relative_eq!(t.value(e), 4.0f64.exp());
    }

    #[test]
    fn backward_matches_hand_derivative() {
        // f(a, b) = (a*b + sin(a))^2; df/da = 2(ab + sin a)(b + cos a).
        let mut t = Tape::new();
        let a = t.input(0.7);
        let b = t.input(-1.3);
        let ab = t.mul(a, b);
        let sa = t.sin(a);
        let inner = t.add(ab, sa);
        let f = t.square(inner);
        let adj = t.backward(f);
        let inner_v = 0.7 * -1.3 + 0.7f64.sin();
        assert_relative_eq!(
            Tape::grad(&adj, a),
            2.0 * inner_v * (-1.3 + 0.7f64.cos()),
            epsilon = 1e-12
        );
        assert_relative_eq!(Tape::grad(&adj, b), 2.0 * inner_v * 0.7, epsilon = 1e-12);
    }

    #[test]
    fn composite_gradient_vs_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut f = |x: &[f64]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = x.iter().map(|&v| t.input(v)).collect();
            // Mix of every nonlinearity.
            let s0 = t.sigmoid(vars[0]);
            let t1 = t.tanh(vars[1]);
            let d = t.div(vars[2], s0);
            let c = t.cos(vars[3]);
            let e = t.exp(vars[4]);
            let sum = t.sum(&[s0, t1, d, c, e, vars[5]]);
            let sq = t.square(sum);
            t.value(sq)
        };
        let got = {
            let mut t = Tape::new();
            let vars: Vec<Var> = x.iter().map(|&v| t.input(v)).collect();
            let s0 = t.sigmoid(vars[0]);
            let t1 = t.tanh(vars[1]);
            let d = t.div(vars[2], s0);
            let c = t.cos(vars[3]);
            let e = t.exp(vars[4]);
            let sum = t.sum(&[s0, t1, d, c, e, vars[5]]);
            let sq = t.square(sum);
            let adj = t.backward(sq);
            vars.iter().map(|&v| Tape::grad(&adj, v)).collect::<Vec<_>>()
        };
        let fd = fd_grad(&mut f, &x, 1e-6);
        assert!(rel_err(&got, &fd) < 1e-7, "rel err {}", rel_err(&got, &fd));
    }

    #[test]
    fn rodrigues_matches_reference_rotation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let aa = Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            );
            let mut t = Tape::new();
            let v = TVec3::inputs(&mut t, &aa);
            let m = rodrigues(&mut t, &v);
            let reference = Rotation::from_axis_angle(&aa);
            for r in 0..3 {
                for c in 0..3 {
                    assert_relative_eq!(
                        t.value(m.0[r][c]),
                        reference.matrix()[(r, c)],
                        epsilon = 1e-12
                    );
                }
            }
        }
        // Small-angle branch agrees too.
        let aa = Vec3::new(1e-8, -2e-8, 5e-9);
        let mut t = Tape::new();
        let v = TVec3::inputs(&mut t, &aa);
        let m = rodrigues(&mut t, &v);
        let reference = Rotation::from_axis_angle(&aa);
        for r in 0..3 {
            for c in 0..3 {
                assert_relative_eq!(
                    t.value(m.0[r][c]),
                    reference.matrix()[(r, c)],
                    epsilon = 1e-14
                );
            }
        }
    }

    #[test]
    fn rodrigues_gradient_vs_finite_differences() {
        let aa = [0.4, -0.9, 0.3];
        // Scalar probe: sum of matrix entries weighted by fixed coefficients.
        let coeffs: Vec<f64> = (0..9).map(|i| (i as f64 * 0.7).sin()).collect();
        let mut f = |x: &[f64]| {
            let mut t = Tape::new();
            let v = TVec3([t.input(x[0]), t.input(x[1]), t.input(x[2])]);
            let m = rodrigues(&mut t, &v);
            let mut acc = 0.0;
            for r in 0..3 {
                for c in 0..3 {
                    acc += coeffs[3 * r + c] * t.value(m.0[r][c]);
                }
            }
            acc
        };
        let got = {
            let mut t = Tape::new();
            let v = TVec3([t.input(aa[0]), t.input(aa[1]), t.input(aa[2])]);
            let m = rodrigues(&mut t, &v);
            let mut terms = Vec::new();
            for r in 0..3 {
                for c in 0..3 {
                    terms.push(t.scale(m.0[r][c], coeffs[3 * r + c]));
                }
            }
            let s = t.sum(&terms);
            let adj = t.backward(s);
            v.0.iter().map(|&x| Tape::grad(&adj, x)).collect::<Vec<_>>()
        };
        let fd = fd_grad(&mut f, &aa, 1e-6);
        assert!(rel_err(&got, &fd) < 1e-8);
    }

    #[test]
    fn six_d_assembly_matches_geom() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = random_rotation(&mut rng);
        let d = crate::geom::rot_to_6d(&r);
        let mut t = Tape::new();
        let vars: [Var; 6] = std::array::from_fn(|i| t.input(d.0[i]));
        let m = mat_from_6d(&mut t, &vars);
        for row in 0..3 {
            for c in 0..3 {
                assert_relative_eq!(t.value(m.0[row][c]), r.matrix()[(row, c)], epsilon = 1e-6);
            }
        }
    }

    #[test]
    fn fk_on_tape_matches_skeleton_fk() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let tree = KinematicTree::default_humanoid();
        let pose = Pose {
            local: (0..JOINT_COUNT).map(|_| random_rotation(&mut rng)).collect(),
        };
        let (jp, rots) = fk_with_rotations(&tree, &pose);
        let mut t = Tape::new();
        let local: Vec<TMat3> = pose
            .local
            .iter()
            .map(|r| TMat3::constants(&mut t, r.matrix()))
            .collect();
        let (pos, grots) = fk_on_tape(&mut t, &tree, &local);
        for j in 0..JOINT_COUNT {
            assert_relative_eq!(pos[j].values(&t), jp.positions[j], epsilon = 1e-12);
            for r in 0..3 {
                for c in 0..3 {
                    assert_relative_eq!(
                        t.value(grots[j].0[r][c]),
                        rots[j].matrix()[(r, c)],
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn fk_position_gradient_vs_finite_differences() {
        // Probe: squared distance of the left wrist to a fixed point, as a
        // function of all 72 axis-angle parameters.
        let tree = KinematicTree::default_humanoid();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let x: Vec<f64> = (0..3 * JOINT_COUNT)
            .map(|_| rng.random_range(-0.5..0.5))
            .collect();
        let target = Vec3::new(0.3, -0.2, 0.4);
        let eval = |x: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
            let mut t = Tape::new();
            let vars: Vec<Var> = x.iter().map(|&v| t.input(v)).collect();
            let local: Vec<TMat3> = (0..JOINT_COUNT)
                .map(|j| {
                    let aa = TVec3([vars[3 * j], vars[3 * j + 1], vars[3 * j + 2]]);
                    rodrigues(&mut t, &aa)
                })
                .collect();
            let (pos, _) = fk_on_tape(&mut t, &tree, &local);
            let tgt = TVec3::constants(&mut t, &target);
            let d = pos[crate::skeleton::joints::L_WRIST].sub(&mut t, &tgt);
            let loss = d.norm_sq(&mut t);
            let value = t.value(loss);
            if !want_grad {
                return (value, vec![]);
            }
            let adj = t.backward(loss);
            (value, vars.iter().map(|&v| Tape::grad(&adj, v)).collect())
        };
        let (_, got) = eval(&x, true);
        let mut f = |x: &[f64]| eval(x, false).0;
        let fd = fd_grad(&mut f, &x, 1e-6);
        let e = rel_err(&got, &fd);
        assert!(e < 1e-7, "rel err {e}");
    }
}
