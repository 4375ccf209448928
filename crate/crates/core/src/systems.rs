//! Dynamical systems: potentials, forces, endpoints and target regions.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Boltzmann constant in eV/K. With it the double-well barrier is about
/// ten thermal units at 1200 K.
pub const BOLTZMANN: f64 = 8.617333262e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    #[default]
    Overdamped,
    Underdamped,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainParams {
    pub bond_k: f64,
    pub bond_length: f64,
    pub angle_k: f64,
    pub angle: f64,
    pub dihedral_height: f64,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            bond_k: 100.0,
            bond_length: 1.0,
            angle_k: 50.0,
            angle: 110f64.to_radians(),
            dihedral_height: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Potential {
    /// Two-channel 2D double well.
    DoubleWell,
    /// Four beads with harmonic bonds and angles and a two-well dihedral term.
    Chain4(ChainParams),
    /// `½ k Σ x²`.
    Harmonic { stiffness: f64 },
}

/// Collective variable used by the hard target test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cv {
    Identity,
    /// Dihedral angle over atoms 0-1-2-3 (radians, wrapped differences).
    Dihedral,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PointKind {
    Minimum,
    Saddle,
    Maximum,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CriticalPoint {
    pub position: Vec<f64>,
    pub energy: f64,
    pub kind: PointKind,
}

/// Axis-aligned box sampled on a uniform grid of Newton starting points.
#[derive(Clone, Debug)]
pub struct SearchGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub resolution: usize,
}

#[derive(Clone, Debug)]
pub struct SystemSpec {
    pub name: String,
    pub potential: Potential,
    pub n_atoms: usize,
    pub spatial_dim: usize,
    /// Per-coordinate masses.
    pub masses: Vec<f64>,
    pub friction: f64,
    pub boltzmann: f64,
    pub base_temperature: f64,
    pub dt: f64,
    pub horizon: usize,
    pub integrator: Integrator,
    pub r_a: Vec<f64>,
    pub r_b: Vec<f64>,
    pub target_radius: f64,
    pub cv: Cv,
}

pub const SYSTEM_NAMES: &[&str] = &["double_well", "chain4", "harmonic1d"];

impl SystemSpec {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "double_well" => Self::double_well(),
            "chain4" => Self::chain4(),
            "harmonic1d" => Ok(Self::harmonic1d(1.0)),
            other => Err(CoreError::Config(format!(
                "unknown system '{other}' (expected one of {})",
                SYSTEM_NAMES.join(", ")
            ))),
        }
    }

    /// Double well with endpoints located by the critical-point finder.
    pub fn double_well() -> Result<Self> {
        static ENDPOINTS: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
        let mut sys = Self::double_well_unlocated();
        if let Some((a, b)) = ENDPOINTS.get() {
            sys.r_a = a.clone();
            sys.r_b = b.clone();
            return Ok(sys);
        }
        let points = find_critical_points(&sys, &double_well_grid())?;
        let mut minima: Vec<_> = points
            .into_iter()
            .filter(|p| p.kind == PointKind::Minimum)
            .collect();
        minima.sort_by(|a, b| a.position[0].total_cmp(&b.position[0]));
        if minima.len() != 2 {
            return Err(CoreError::Invalid(format!(
                "double well: expected 2 minima, found {}",
                minima.len()
            )));
        }
        sys.r_a = minima[0].position.clone();
        sys.r_b = minima[1].position.clone();
        sys.validate()?;
        let _ = ENDPOINTS.set((sys.r_a.clone(), sys.r_b.clone()));
        Ok(sys)
    }

    /// Double well with placeholder endpoints, before the finder has run.
    pub fn double_well_unlocated() -> Self {
        Self {
            name: "double_well".into(),
            potential: Potential::DoubleWell,
            n_atoms: 1,
            spatial_dim: 2,
            masses: vec![1.0; 2],
            friction: 1.0,
            boltzmann: BOLTZMANN,
            base_temperature: 1200.0,
            dt: 0.01,
            horizon: 1000,
            integrator: Integrator::Overdamped,
            r_a: vec![-1.0, 0.0],
            r_b: vec![1.0, 0.0],
            target_radius: 0.5,
            cv: Cv::Identity,
        }
    }

    /// Four-bead chain whose endpoints are its two dihedral minima.
    pub fn chain4() -> Result<Self> {
        let params = ChainParams::default();
        let mut sys = Self {
            name: "chain4".into(),
            potential: Potential::Chain4(params),
            n_atoms: 4,
            spatial_dim: 3,
            masses: vec![1.0; 12],
            friction: 1.0,
            boltzmann: BOLTZMANN,
            base_temperature: 1200.0,
            dt: 0.005,
            horizon: 1000,
            integrator: Integrator::Overdamped,
            r_a: Vec::new(),
            r_b: Vec::new(),
            target_radius: 0.5,
            cv: Cv::Dihedral,
        };
        let mut ends = Vec::new();
        for phi in [-90f64, 90.0] {
            let x0 = chain_geometry(&params, phi.to_radians());
            ends.push(minimize(&sys, &x0, 1e-10, 500)?);
        }
        ends.sort_by(|a, b| dihedral(a).total_cmp(&dihedral(b)));
        sys.r_a = center(&ends[0], 3);
        sys.r_b = center(&ends[1], 3);
        sys.validate()?;
        Ok(sys)
    }

    /// One coordinate in a harmonic well; used for equilibrium checks.
    pub fn harmonic1d(stiffness: f64) -> Self {
        Self {
            name: "harmonic1d".into(),
            potential: Potential::Harmonic { stiffness },
            n_atoms: 1,
            spatial_dim: 1,
            masses: vec![1.0],
            friction: 1.0,
            boltzmann: BOLTZMANN,
            base_temperature: 1200.0,
            dt: 0.01,
            horizon: 100,
            integrator: Integrator::Overdamped,
            r_a: vec![0.0],
            r_b: vec![1.0],
            target_radius: 0.25,
            cv: Cv::Identity,
        }
    }

    /// Number of position coordinates.
    pub fn dim(&self) -> usize {
        self.n_atoms * self.spatial_dim
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        let bad = |m: &str| Err(CoreError::Config(format!("system {}: {m}", self.name)));
        if self.masses.len() != n || self.masses.iter().any(|&m| !(m > 0.0)) {
            return bad("masses must be positive, one per coordinate");
        }
        if !(self.friction > 0.0) {
            return bad("friction must be positive");
        }
        if !(self.target_radius > 0.0) {
            return bad("target radius must be positive");
        }
        if !(self.boltzmann > 0.0) || !(self.base_temperature > 0.0) || !(self.dt > 0.0) {
            return bad("k_B, temperature and dt must be positive");
        }
        if self.horizon == 0 {
            return bad("horizon must be at least one step");
        }
        if self.r_a.len() != n || self.r_b.len() != n || self.r_a == self.r_b {
            return bad("R_A and R_B must be distinct positions of system dimension");
        }
        if !self.energy(&self.r_a)?.is_finite() || !self.energy(&self.r_b)?.is_finite() {
            return bad("energy must be finite at the endpoints");
        }
        Ok(())
    }

    fn check_dim(&self, r: &[f64]) -> Result<()> {
        if r.len() != self.dim() {
            return Err(CoreError::Dimension {
                expected: self.dim(),
                got: r.len(),
            });
        }
        Ok(())
    }

    pub fn energy(&self, r: &[f64]) -> Result<f64> {
        self.check_dim(r)?;
        Ok(self.energy_unchecked(r))
    }

    pub fn energy_unchecked(&self, r: &[f64]) -> f64 {
        match &self.potential {
            Potential::DoubleWell => double_well_energy(r[0], r[1]),
            Potential::Chain4(p) => chain_energy_grad(p, r, None),
            Potential::Harmonic { stiffness } => {
                0.5 * stiffness * r.iter().map(|x| x * x).sum::<f64>()
            }
        }
    }

    /// Energy and gradient `∇U` written into `grad`.
    pub fn energy_grad(&self, r: &[f64], grad: &mut [f64]) -> f64 {
        debug_assert_eq!(r.len(), self.dim());
        match &self.potential {
            Potential::DoubleWell => {
                let (gx, gy) = double_well_grad(r[0], r[1]);
                grad[0] = gx;
                grad[1] = gy;
                double_well_energy(r[0], r[1])
            }
            Potential::Chain4(p) => chain_energy_grad(p, r, Some(grad)),
            Potential::Harmonic { stiffness } => {
                for (g, x) in grad.iter_mut().zip(r) {
                    *g = stiffness * x;
                }
                0.5 * stiffness * r.iter().map(|x| x * x).sum::<f64>()
            }
        }
    }

    /// `−∇U(R)`.
    pub fn force(&self, r: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(r)?;
        let mut g = vec![0.0; r.len()];
        self.energy_grad(r, &mut g);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite {
                context: "force".into(),
            });
        }
        Ok(g.into_iter().map(|v| -v).collect())
    }

    /// Hessian-vector product by central differences of the analytic gradient.
    pub fn hessian_vec(&self, r: &[f64], v: &[f64], out: &mut [f64]) {
        let n = r.len();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            out.iter_mut().for_each(|o| *o = 0.0);
            return;
        }
        let h = 1e-5 / norm;
        let mut rp = r.to_vec();
        let mut rm = r.to_vec();
        for i in 0..n {
            rp[i] += h * v[i];
            rm[i] -= h * v[i];
        }
        let mut gp = vec![0.0; n];
        let mut gm = vec![0.0; n];
        self.energy_grad(&rp, &mut gp);
        self.energy_grad(&rm, &mut gm);
        for i in 0..n {
            out[i] = (gp[i] - gm[i]) / (2.0 * h);
        }
    }

    /// Symmetrized finite-difference Hessian.
    pub fn hessian(&self, r: &[f64]) -> DMatrix<f64> {
        let n = r.len();
        let mut h = DMatrix::zeros(n, n);
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            self.hessian_vec(r, &e, &mut col);
            for i in 0..n {
                h[(i, j)] = col[i];
            }
        }
        (&h + h.transpose()) * 0.5
    }

    pub fn cv_value(&self, r: &[f64]) -> Vec<f64> {
        match self.cv {
            Cv::Identity => r.to_vec(),
            Cv::Dihedral => vec![dihedral(r)],
        }
    }

    /// Distance between two positions in CV space.
    pub fn cv_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        match self.cv {
            Cv::Identity => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Cv::Dihedral => wrap_angle(dihedral(a) - dihedral(b)).abs(),
        }
    }

    /// `(cv(R) − target)·∇cv(R)`, the gradient of `½‖cv(R) − target‖²`
    /// (angle differences wrapped).
    pub fn cv_pull_grad(&self, r: &[f64], target: &[f64], out: &mut [f64]) {
        match self.cv {
            Cv::Identity => {
                for ((o, x), t) in out.iter_mut().zip(r).zip(target) {
                    *o = x - t;
                }
            }
            Cv::Dihedral => {
                let (phi, g) = dihedral_grad(r);
                let d = wrap_angle(phi - target[0]);
                for (o, gi) in out.iter_mut().zip(&g) {
                    *o = d * gi;
                }
            }
        }
    }

    /// Hard membership test `‖cv(R) − cv(R_B)‖ < δ`.
    pub fn in_target(&self, r: &[f64]) -> bool {
        self.cv_distance(r, &self.r_b) < self.target_radius
    }

    /// Thermal noise scale per coordinate, `√(2γ k_B T / m)`.
    pub fn noise_scale(&self, temperature: f64) -> Vec<f64> {
        self.masses
            .iter()
            .map(|m| (2.0 * self.friction * self.boltzmann * temperature / m).sqrt())
            .collect()
    }
}

pub fn double_well_grid() -> SearchGrid {
    SearchGrid {
        lo: vec![-2.5, -2.5],
        hi: vec![2.5, 2.5],
        resolution: 41,
    }
}

pub fn double_well_energy(x: f64, y: f64) -> f64 {
    let r = 1.0 - x * x - y * y;
    let a = (x + y) * (x + y) - 1.0;
    let b = (x - y) * (x - y) - 1.0;
    let c = x * x - 2.0;
    (4.0 * r * r + 2.0 * c * c + a * a + b * b - 2.0) / 6.0
}

pub fn double_well_grad(x: f64, y: f64) -> (f64, f64) {
    let r = 1.0 - x * x - y * y;
    let a = (x + y) * (x + y) - 1.0;
    let b = (x - y) * (x - y) - 1.0;
    let gx = -16.0 * r * x + 8.0 * (x * x - 2.0) * x + 4.0 * a * (x + y) + 4.0 * b * (x - y);
    let gy = -16.0 * r * y + 4.0 * a * (x + y) - 4.0 * b * (x - y);
    (gx / 6.0, gy / 6.0)
}

type V3 = [f64; 3];

fn sub3(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot3(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: V3, b: V3) -> V3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn scale3(a: V3, s: f64) -> V3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn atom(r: &[f64], i: usize) -> V3 {
    [r[3 * i], r[3 * i + 1], r[3 * i + 2]]
}

fn add_atom(g: &mut [f64], i: usize, v: V3) {
    for k in 0..3 {
        g[3 * i + k] += v[k];
    }
}

/// Signed dihedral angle of atoms 0-1-2-3 in `(−π, π]`.
pub fn dihedral(r: &[f64]) -> f64 {
    let (p0, p1, p2, p3) = (atom(r, 0), atom(r, 1), atom(r, 2), atom(r, 3));
    let b1 = sub3(p1, p0);
    let b2 = sub3(p2, p1);
    let b3 = sub3(p3, p2);
    let m = cross3(b1, b2);
    let n = cross3(b2, b3);
    let y = dot3(b2, b2).sqrt() * dot3(b1, n);
    let x = dot3(m, n);
    y.atan2(x)
}

/// Angle wrapped into `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let w = a.rem_euclid(tau);
    if w > std::f64::consts::PI {
        w - tau
    } else {
        w
    }
}

fn chain_energy_grad(p: &ChainParams, r: &[f64], mut grad: Option<&mut [f64]>) -> f64 {
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut e = 0.0;
    for i in 0..3 {
        let d = sub3(atom(r, i + 1), atom(r, i));
        let len = dot3(d, d).sqrt();
        let ext = len - p.bond_length;
        e += 0.5 * p.bond_k * ext * ext;
        if let Some(g) = grad.as_deref_mut() {
            if len > 0.0 {
                let f = scale3(d, p.bond_k * ext / len);
                add_atom(g, i + 1, f);
                add_atom(g, i, scale3(f, -1.0));
            }
        }
    }
    for j in 1..3 {
        let u = sub3(atom(r, j - 1), atom(r, j));
        let v = sub3(atom(r, j + 1), atom(r, j));
        let (lu, lv) = (dot3(u, u).sqrt(), dot3(v, v).sqrt());
        let cos = (dot3(u, v) / (lu * lv)).clamp(-1.0, 1.0);
        let theta = cos.acos();
        let dev = theta - p.angle;
        e += 0.5 * p.angle_k * dev * dev;
        if let Some(g) = grad.as_deref_mut() {
            let sin = (1.0 - cos * cos).sqrt().max(1e-12);
            let de_dcos = -p.angle_k * dev / sin;
            let du = sub3(scale3(v, 1.0 / (lu * lv)), scale3(u, cos / (lu * lu)));
            let dv = sub3(scale3(u, 1.0 / (lu * lv)), scale3(v, cos / (lv * lv)));
            let gu = scale3(du, de_dcos);
            let gv = scale3(dv, de_dcos);
            add_atom(g, j - 1, gu);
            add_atom(g, j + 1, gv);
            add_atom(g, j, scale3([gu[0] + gv[0], gu[1] + gv[1], gu[2] + gv[2]], -1.0));
        }
    }
    let (phi, dphi) = dihedral_grad(r);
    e += p.dihedral_height * phi.cos().powi(2);
    if let Some(g) = grad {
        let de_dphi = -p.dihedral_height * (2.0 * phi).sin();
        for (gi, d) in g.iter_mut().zip(&dphi) {
            *gi += de_dphi * d;
        }
    }
    e
}

/// Dihedral angle and its gradient with respect to the 12 coordinates
/// (zero when the angle is undefined).
pub fn dihedral_grad(r: &[f64]) -> (f64, [f64; 12]) {
    let phi = dihedral(r);
    let mut out = [0.0; 12];
    let (p0, p1, p2, p3) = (atom(r, 0), atom(r, 1), atom(r, 2), atom(r, 3));
    let b1 = sub3(p1, p0);
    let b2 = sub3(p2, p1);
    let b3 = sub3(p3, p2);
    let m = cross3(b1, b2);
    let n = cross3(b2, b3);
    let (mm, nn, bb) = (dot3(m, m), dot3(n, n), dot3(b2, b2));
    if mm > 0.0 && nn > 0.0 {
        let lb = bb.sqrt();
        let d0 = scale3(m, -lb / mm);
        let d3 = scale3(n, lb / nn);
        let s1 = dot3(b1, b2) / bb;
        let s3 = dot3(b3, b2) / bb;
        let d1 = sub3(scale3(d3, s3), scale3(d0, s1 + 1.0));
        // The angle is translation invariant, so the four terms sum to zero.
        let d2 = [
            -(d0[0] + d1[0] + d3[0]),
            -(d0[1] + d1[1] + d3[1]),
            -(d0[2] + d1[2] + d3[2]),
        ];
        for (i, d) in [d0, d1, d2, d3].into_iter().enumerate() {
            add_atom(&mut out, i, d);
        }
    }
    (phi, out)
}

/// Ideal chain with every bond and angle at rest and the given dihedral.
pub fn chain_geometry(p: &ChainParams, phi: f64) -> Vec<f64> {
    let l = p.bond_length;
    let (s, c) = p.angle.sin_cos();
    let p0 = [l * c, l * s, 0.0];
    let p1 = [0.0, 0.0, 0.0];
    let p2 = [l, 0.0, 0.0];
    let p3 = [
        l - l * c,
        l * s * phi.cos(),
        l * s * phi.sin(),
    ];
    let mut r = [p0, p1, p2, p3].concat();
    let actual = dihedral(&r);
    if (wrap_angle(actual - phi)).abs() > 1e-9 {
        // Opposite handedness convention: mirror through the xy plane.
        for i in 0..4 {
            r[3 * i + 2] = -r[3 * i + 2];
        }
    }
    r
}

fn center(r: &[f64], d: usize) -> Vec<f64> {
    let n = r.len() / d;
    let mut c = vec![0.0; d];
    for i in 0..n {
        for k in 0..d {
            c[k] += r[i * d + k] / n as f64;
        }
    }
    r.iter().enumerate().map(|(i, v)| v - c[i % d]).collect()
}

fn grad_of(sys: &SystemSpec, x: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    sys.energy_grad(x, &mut g);
    g
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Levenberg–Marquardt damped Newton descent to a local minimum.
pub fn minimize(sys: &SystemSpec, x0: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    sys.check_dim(x0)?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut e = sys.energy_unchecked(&x);
    let mut mu = 1e-3;
    for _ in 0..max_iter {
        let g = grad_of(sys, &x);
        if norm(&g) < tol {
            break;
        }
        let h = sys.hessian(&x) + DMatrix::identity(n, n) * mu;
        let Some(step) = h.lu().solve(&DVector::from_column_slice(&g)) else {
            mu *= 10.0;
            continue;
        };
        let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a - s).collect();
        let et = sys.energy_unchecked(&trial);
        if et <= e {
            x = trial;
            e = et;
            mu = (mu / 3.0).max(1e-12);
        } else {
            mu *= 4.0;
        }
    }
    if !e.is_finite() {
        return Err(CoreError::NonFinite {
            context: "minimize".into(),
        });
    }
    Ok(x)
}

/// Newton iteration on `∇U = 0` with backtracking on the gradient norm.
fn newton_stationary(sys: &SystemSpec, x0: &[f64]) -> Option<(Vec<f64>, f64)> {
    let mut x = x0.to_vec();
    let mut g = grad_of(sys, &x);
    let mut gn = norm(&g);
    for _ in 0..200 {
        if gn < 1e-14 {
            break;
        }
        let h = sys.hessian(&x);
        let step = h.lu().solve(&DVector::from_column_slice(&g))?;
        let mut alpha = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = x
                .iter()
                .zip(step.iter())
                .map(|(a, s)| a - alpha * s)
                .collect();
            let gt = grad_of(sys, &trial);
            let gtn = norm(&gt);
            if gtn < gn {
                x = trial;
                g = gt;
                gn = gtn;
                improved = true;
                break;
            }
            alpha *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Some((x, gn))
}

fn classify(sys: &SystemSpec, x: &[f64]) -> PointKind {
    let eig = SymmetricEigen::new(sys.hessian(x)).eigenvalues;
    let scale = eig.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-6 * scale;
    if eig.iter().all(|&v| v > tol) {
        PointKind::Minimum
    } else if eig.iter().all(|&v| v < -tol) {
        PointKind::Maximum
    } else {
        PointKind::Saddle
    }
}

/// Stationary points reached by Newton from every node of `grid`.
///
/// Points closer than 1e-4 are merged, keeping the one with the smaller
/// gradient norm. A stationary point whose Hessian is not definite is a
/// saddle, which covers degenerate saddles with a flat Hessian direction.
pub fn find_critical_points(sys: &SystemSpec, grid: &SearchGrid) -> Result<Vec<CriticalPoint>> {
    let n = sys.dim();
    if grid.lo.len() != n || grid.hi.len() != n {
        return Err(CoreError::Dimension {
            expected: n,
            got: grid.lo.len(),
        });
    }
    let res = grid.resolution.max(2);
    let total = res.pow(n as u32);
    let mut found: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut idx = vec![0usize; n];
    for _ in 0..total {
        let x0: Vec<f64> = (0..n)
            .map(|k| grid.lo[k] + (grid.hi[k] - grid.lo[k]) * idx[k] as f64 / (res - 1) as f64)
            .collect();
        if let Some((x, gn)) = newton_stationary(sys, &x0) {
            let inside = (0..n).all(|k| x[k] >= grid.lo[k] - 1e-9 && x[k] <= grid.hi[k] + 1e-9);
            if gn < 1e-10 && inside {
                match found.iter_mut().find(|(p, _)| {
                    p.iter().zip(&x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() < 1e-4
                }) {
                    Some(entry) if gn < entry.1 => *entry = (x, gn),
                    Some(_) => {}
                    None => found.push((x, gn)),
                }
            }
        }
        for k in 0..n {
            idx[k] += 1;
            if idx[k] < res {
                break;
            }
            idx[k] = 0;
        }
    }
    let mut points: Vec<CriticalPoint> = found
        .into_iter()
        .map(|(x, _)| CriticalPoint {
            energy: sys.energy_unchecked(&x),
            kind: classify(sys, &x),
            position: x,
        })
        .collect();
    if !points.iter().any(|p| p.kind == PointKind::Minimum) {
        return Err(CoreError::NoMinima);
    }
    points.sort_by(|a, b| {
        a.energy
            .total_cmp(&b.energy)
            .then(a.position[0].total_cmp(&b.position[0]))
    });
    Ok(points)
}
