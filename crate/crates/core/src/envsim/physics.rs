//! Reduced-coordinate dynamics of a planar tree of rods.
//!
//! Generalized coordinates are `[x, z, θ, q₁ … q_J]`: the root centre, the
//! root heading and one hinge angle per non-root limb in preorder. Each
//! substep assembles `M(q)` and the generalized forces, takes a
//! semi-implicit Euler step with implicit joint damping, then resolves
//! ground contacts and joint limits as impulses with projected Gauss-Seidel.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::morphology::MorphologyGraph;

/// Physical constants of the simulator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsConfig {
    pub gravity: f64,
    /// Internal integration step in seconds.
    pub substep: f64,
    /// Rod density in kg/m³.
    pub density: f64,
    pub joint_damping: f64,
    /// Rotor inertia added to every hinge.
    pub armature: f64,
    pub friction: f64,
    pub solver_iterations: usize,
    /// Fraction of penetration removed per substep.
    pub baumgarte: f64,
    pub contact_slop: f64,
}

impl Default for PhysicsConfig {
    fn default() -> Self {
        Self {
            gravity: 9.81,
            substep: 1.0 / 240.0,
            density: 1000.0,
            joint_damping: 1.0,
            armature: 0.01,
            friction: 1.0,
            solver_iterations: 30,
            baumgarte: 0.2,
            contact_slop: 1e-4,
        }
    }
}

/// Contacts closer than this are handed to the solver speculatively.
const CONTACT_MARGIN: f64 = 0.02;

/// Rest angles of successive child slots relative to the parent axis.
const REST_OFFSETS: [f64; 3] = [0.0, -PI / 3.0, PI / 3.0];

#[derive(Clone, Debug)]
struct Body {
    parent: Option<usize>,
    /// Attached at the parent's proximal end, pointing backwards.
    mirrored: bool,
    offset: f64,
    length: f64,
    radius: f64,
    mass: f64,
    inertia: f64,
    half_range: f64,
    max_torque: f64,
    /// Body indices from the root down to this body, inclusive.
    path: Vec<usize>,
}

/// Positions and velocities derived from the generalized state.
#[derive(Clone, Debug)]
pub(crate) struct Kinematics {
    pub angle: Vec<f64>,
    pub omega: Vec<f64>,
    /// Rotation pivot: the root centre for the root, the hinge otherwise.
    pub pivot: Vec<[f64; 2]>,
    pub center: Vec<[f64; 2]>,
    pub distal: Vec<[f64; 2]>,
    pub proximal: Vec<[f64; 2]>,
}

fn unit(a: f64) -> [f64; 2] {
    [a.cos(), a.sin()]
}

fn perp(r: [f64; 2]) -> [f64; 2] {
    [-r[1], r[0]]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

fn axpy(a: [f64; 2], s: f64, d: [f64; 2]) -> [f64; 2] {
    [a[0] + s * d[0], a[1] + s * d[1]]
}

/// Planar articulated body plus its state.
#[derive(Clone, Debug)]
pub struct PlanarSim {
    bodies: Vec<Body>,
    q: Vec<f64>,
    v: Vec<f64>,
    cfg: PhysicsConfig,
}

impl PlanarSim {
    /// Builds the rest pose of `g`, lifted so the lowest contact sphere sits
    /// `clearance` above the ground.
    pub fn new(g: &MorphologyGraph, cfg: &PhysicsConfig, clearance: f64) -> Result<Self> {
        let order = g.preorder();
        let index: std::collections::BTreeMap<_, _> =
            order.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let mut bodies: Vec<Body> = Vec::with_capacity(order.len());
        for &id in &order {
            let limb = g.limb(id)?;
            let (l, r) = (limb.attr.length, limb.attr.radius);
            let mass = cfg.density * PI * r * r * l;
            let parent = limb.parent.map(|p| index[&p]);
            let (mirrored, k) = match parent {
                Some(0) => (limb.slot % 2 == 0, (limb.slot as usize - 1) / 2),
                Some(_) => (false, limb.slot as usize - 1),
                None => (false, 0),
            };
            let mut path = parent.map_or_else(Vec::new, |p| bodies[p].path.clone());
            path.push(bodies.len());
            bodies.push(Body {
                parent,
                mirrored,
                offset: if parent.is_some() { REST_OFFSETS[k % 3] } else { 0.0 },
                length: l,
                radius: r,
                mass,
                inertia: mass * (l * l / 12.0 + r * r / 4.0),
                half_range: 0.5 * limb.joint.rotation_range,
                max_torque: limb.joint.max_torque,
                path,
            });
        }
        let n = bodies.len() + 2;
        let mut sim = Self { bodies, q: vec![0.0; n], v: vec![0.0; n], cfg: cfg.clone() };
        let lowest = sim
            .contact_points(&sim.kinematics())
            .iter()
            .map(|c| c.point[1] - c.radius)
            .fold(f64::INFINITY, f64::min);
        sim.q[1] = clearance - lowest;
        Ok(sim)
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn limb_count(&self) -> usize {
        self.bodies.len()
    }

    pub fn joint_count(&self) -> usize {
        self.bodies.len() - 1
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    pub fn set_state(&mut self, q: &[f64], v: &[f64]) -> Result<()> {
        if q.len() != self.q.len() || v.len() != self.v.len() {
            return Err(Error::Dimension(format!(
                "state of {} coordinates expected, got q {} v {}",
                self.q.len(),
                q.len(),
                v.len()
            )));
        }
        self.q.copy_from_slice(q);
        self.v.copy_from_slice(v);
        Ok(())
    }

    pub fn root_position(&self) -> [f64; 2] {
        [self.q[0], self.q[1]]
    }

    pub fn masses(&self) -> Vec<f64> {
        self.bodies.iter().map(|b| b.mass).collect()
    }

    pub fn max_torques(&self) -> Vec<f64> {
        self.bodies[1..].iter().map(|b| b.max_torque).collect()
    }

    pub(crate) fn kinematics(&self) -> Kinematics {
        let nb = self.bodies.len();
        let mut k = Kinematics {
            angle: vec![0.0; nb],
            omega: vec![0.0; nb],
            pivot: vec![[0.0; 2]; nb],
            center: vec![[0.0; 2]; nb],
            distal: vec![[0.0; 2]; nb],
            proximal: vec![[0.0; 2]; nb],
        };
        for (i, b) in self.bodies.iter().enumerate() {
            match b.parent {
                None => {
                    let c = [self.q[0], self.q[1]];
                    let u = unit(self.q[2]);
                    k.angle[i] = self.q[2];
                    k.omega[i] = self.v[2];
                    k.pivot[i] = c;
                    k.center[i] = c;
                    k.proximal[i] = axpy(c, -0.5 * b.length, u);
                    k.distal[i] = axpy(c, 0.5 * b.length, u);
                }
                Some(p) => {
                    let (base, attach) = if b.mirrored {
                        (k.angle[p] + PI, k.proximal[p])
                    } else {
                        (k.angle[p], k.distal[p])
                    };
                    let a = base + b.offset + self.q[i + 2];
                    let u = unit(a);
                    k.angle[i] = a;
                    k.omega[i] = k.omega[p] + self.v[i + 2];
                    k.pivot[i] = attach;
                    k.proximal[i] = attach;
                    k.center[i] = axpy(attach, 0.5 * b.length, u);
                    k.distal[i] = axpy(attach, b.length, u);
                }
            }
        }
        k
    }

    /// Jacobian rows `(∂y_x/∂q, ∂y_z/∂q)` of a point rigidly attached to `body`.
    fn point_jacobian(&self, k: &Kinematics, body: usize, y: [f64; 2]) -> (Vec<f64>, Vec<f64>) {
        let n = self.q.len();
        let (mut jx, mut jz) = (vec![0.0; n], vec![0.0; n]);
        jx[0] = 1.0;
        jz[1] = 1.0;
        for &a in &self.bodies[body].path {
            let d = perp(sub(y, k.pivot[a]));
            jx[a + 2] = d[0];
            jz[a + 2] = d[1];
        }
        (jx, jz)
    }

    /// Velocity-product acceleration `J̇·q̇` of a point attached to `body`.
    fn point_bias(&self, k: &Kinematics, body: usize, y: [f64; 2]) -> [f64; 2] {
        let path = &self.bodies[body].path;
        let mut acc = [0.0; 2];
        for w in path.windows(2) {
            let seg = sub(k.proximal[w[1]], k.pivot[w[0]]);
            acc = axpy(acc, -k.omega[w[0]].powi(2), seg);
        }
        axpy(acc, -k.omega[body].powi(2), sub(y, k.pivot[body]))
    }

    /// Joint-space mass matrix including armature.
    fn mass_matrix(&self, k: &Kinematics) -> DMatrix<f64> {
        let n = self.q.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, b) in self.bodies.iter().enumerate() {
            let (jx, jz) = self.point_jacobian(k, i, k.center[i]);
            let cols: Vec<usize> = [0, 1].into_iter().chain(b.path.iter().map(|a| a + 2)).collect();
            for &r in &cols {
                for &c in &cols {
                    let ang = if r >= 2 && c >= 2 { b.inertia } else { 0.0 };
                    m[(r, c)] += b.mass * (jx[r] * jx[c] + jz[r] * jz[c]) + ang;
                }
            }
        }
        for j in 3..n {
            m[(j, j)] += self.cfg.armature;
        }
        m
    }

    /// Total mechanical energy: `½ q̇ᵀ M q̇` plus gravitational potential.
    pub fn energy(&self) -> f64 {
        let k = self.kinematics();
        let m = self.mass_matrix(&k);
        let v = DVector::from_column_slice(&self.v);
        0.5 * v.dot(&(&m * &v)) + self.potential(&k)
    }

    pub(crate) fn contact_points(&self, k: &Kinematics) -> Vec<ContactPoint> {
        let mut out = Vec::with_capacity(self.bodies.len() + 1);
        out.push(ContactPoint { body: 0, point: k.proximal[0], radius: self.bodies[0].radius });
        for (i, b) in self.bodies.iter().enumerate() {
            out.push(ContactPoint { body: i, point: k.distal[i], radius: b.radius });
        }
        out
    }

    /// Advances by one step of length `h` with joint torques `tau` (N·m,
    /// one per non-root limb in preorder, clamped to each joint's limit).
    pub fn step(&mut self, tau: &[f64], h: f64) -> Result<()> {
        let n = self.q.len();
        if tau.len() != self.joint_count() {
            return Err(Error::Dimension(format!(
                "{} joint torques expected, got {}",
                self.joint_count(),
                tau.len()
            )));
        }
        let k = self.kinematics();
        let mut m = self.mass_matrix(&k);
        let v0 = DVector::from_column_slice(&self.v);
        let mut rhs = &m * &v0;
        let energy_before = 0.5 * v0.dot(&rhs) + self.potential(&k);

        let g = self.cfg.gravity;
        for (i, b) in self.bodies.iter().enumerate() {
            let (jx, jz) = self.point_jacobian(&k, i, k.center[i]);
            let bias = self.point_bias(&k, i, k.center[i]);
            let f = [-b.mass * bias[0], b.mass * (-g - bias[1])];
            for c in 0..n {
                rhs[c] += h * (jx[c] * f[0] + jz[c] * f[1]);
            }
        }
        let tau: Vec<f64> =
            tau.iter().zip(&self.bodies[1..]).map(|(&t, b)| t.clamp(-b.max_torque, b.max_torque)).collect();
        for (j, t) in tau.iter().enumerate() {
            rhs[j + 3] += h * t;
        }
        for j in 3..n {
            m[(j, j)] += h * self.cfg.joint_damping;
        }
        let chol = m
            .cholesky()
            .ok_or_else(|| Error::SimulationDiverged("mass matrix lost positive definiteness".into()))?;
        let mut v = chol.solve(&rhs);

        self.solve_constraints(&k, &chol, &mut v, h);

        let q0 = self.q.clone();
        for c in 0..n {
            self.q[c] += h * v[c];
        }
        for (j, b) in self.bodies[1..].iter().enumerate() {
            let col = j + 3;
            let q = &mut self.q[col];
            if *q > b.half_range || *q < -b.half_range {
                *q = q.clamp(-b.half_range, b.half_range);
                if v[col] * q.signum() > 0.0 {
                    // inelastic impulse along M⁻¹eⱼ that stops the hinge
                    let mut e = DVector::zeros(n);
                    e[col] = 1.0;
                    let dir = chol.solve(&e);
                    let scale = v[col] / dir[col];
                    v.axpy(-scale, &dir, 1.0);
                }
            }
        }
        self.v.copy_from_slice(v.as_slice());
        if self.q.iter().chain(&self.v).any(|x| !x.is_finite()) {
            return Err(Error::SimulationDiverged("non-finite state after substep".into()));
        }
        self.bound_energy(energy_before, &tau, &q0);
        Ok(())
    }

    fn potential(&self, k: &Kinematics) -> f64 {
        self.bodies.iter().enumerate().map(|(i, b)| b.mass * self.cfg.gravity * k.center[i][1]).sum()
    }

    /// Removes any energy the step created beyond the work done by the
    /// actuators, by scaling the velocity.
    fn bound_energy(&mut self, before: f64, tau: &[f64], q0: &[f64]) {
        let work: f64 = tau.iter().enumerate().map(|(j, t)| t * (self.q[j + 3] - q0[j + 3])).sum();
        let k = self.kinematics();
        let m = self.mass_matrix(&k);
        let v = DVector::from_column_slice(&self.v);
        let kinetic = 0.5 * v.dot(&(&m * &v));
        let excess = kinetic + self.potential(&k) - (before + work);
        if excess > 0.0 && kinetic > 0.0 {
            let scale = ((kinetic - excess).max(0.0) / kinetic).sqrt();
            self.v.iter_mut().for_each(|x| *x *= scale);
        }
    }

    fn solve_constraints(
        &self,
        k: &Kinematics,
        chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
        v: &mut DVector<f64>,
        h: f64,
    ) {
        let n = self.q.len();
        let mut rows: Vec<Row> = Vec::new();
        let push_out = |gap: f64| {
            if gap >= 0.0 {
                -gap / h
            } else {
                self.cfg.baumgarte * (-gap - self.cfg.contact_slop).max(0.0) / h
            }
        };
        for c in self.contact_points(k) {
            let gap = c.point[1] - c.radius;
            if gap > CONTACT_MARGIN {
                continue;
            }
            let (jx, jz) = self.point_jacobian(k, c.body, c.point);
            let normal = rows.len();
            rows.push(Row::new(jz, push_out(gap), Bound::NonNegative, chol));
            rows.push(Row::new(jx, 0.0, Bound::Friction(normal), chol));
        }
        for (j, b) in self.bodies[1..].iter().enumerate() {
            let col = j + 3;
            let q = self.q[col];
            let predicted = q + h * v[col];
            for side in [1.0, -1.0] {
                // side·q ≤ half_range
                let gap = b.half_range - side * q;
                if b.half_range - side * predicted < 0.0 || gap < 0.0 {
                    let mut jac = vec![0.0; n];
                    jac[col] = -side;
                    rows.push(Row::new(jac, push_out(gap), Bound::NonNegative, chol));
                }
            }
        }
        if rows.is_empty() {
            return;
        }
        let mu = self.cfg.friction;
        for _ in 0..self.cfg.solver_iterations {
            for r in 0..rows.len() {
                let row = &rows[r];
                if row.w <= 0.0 {
                    continue;
                }
                let vel: f64 = row.jac.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
                let mut lambda = row.lambda + (row.target - vel) / row.w;
                lambda = match row.bound {
                    Bound::NonNegative => lambda.max(0.0),
                    Bound::Friction(nrm) => {
                        let cap = mu * rows[nrm].lambda;
                        lambda.clamp(-cap, cap)
                    }
                };
                let delta = lambda - rows[r].lambda;
                if delta != 0.0 {
                    v.axpy(delta, &rows[r].minv_jt, 1.0);
                    rows[r].lambda = lambda;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Bound {
    NonNegative,
    /// Coulomb cone around the normal row at this index.
    Friction(usize),
}

struct Row {
    jac: Vec<f64>,
    minv_jt: DVector<f64>,
    w: f64,
    target: f64,
    bound: Bound,
    lambda: f64,
}

impl Row {
    fn new(jac: Vec<f64>, target: f64, bound: Bound, chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> Self {
        let jt = DVector::from_column_slice(&jac);
        let minv_jt = chol.solve(&jt);
        let w = jt.dot(&minv_jt);
        Self { jac, minv_jt, w, target, bound, lambda: 0.0 }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ContactPoint {
    pub body: usize,
    pub point: [f64; 2],
    pub radius: f64,
}

/// Kinematic snapshot of one limb.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LimbState {
    pub joint_angle: f64,
    pub joint_velocity: f64,
    pub center: [f64; 2],
    pub velocity: [f64; 2],
    pub angle: f64,
}

impl PlanarSim {
    /// Per-limb kinematics in preorder. The root's joint entries are zero.
    pub fn limb_states(&self) -> Vec<LimbState> {
        let k = self.kinematics();
        (0..self.bodies.len())
            .map(|i| {
                let (jx, jz) = self.point_jacobian(&k, i, k.center[i]);
                let vx = jx.iter().zip(&self.v).map(|(a, b)| a * b).sum();
                let vz = jz.iter().zip(&self.v).map(|(a, b)| a * b).sum();
                let (ja, jv) = if i == 0 { (0.0, 0.0) } else { (self.q[i + 2], self.v[i + 2]) };
                LimbState { joint_angle: ja, joint_velocity: jv, center: k.center[i], velocity: [vx, vz], angle: k.angle[i] }
            })
            .collect()
    }

    /// Capsule end points and radii in preorder, for drawing.
    pub fn segments(&self) -> Vec<([f64; 2], [f64; 2], f64)> {
        let k = self.kinematics();
        self.bodies.iter().enumerate().map(|(i, b)| (k.proximal[i], k.distal[i], b.radius)).collect()
    }
}
