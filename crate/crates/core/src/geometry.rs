//! Rigid alignment (Kabsch) and aligned RMSD.
//!
//! Point sets are flat row-major slices of `N` atoms with `d` coordinates.

use nalgebra::DMatrix;

use crate::error::{CoreError, Result};

/// Proper rigid motion `q ↦ R q + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidTransform {
    pub dim: usize,
    /// Row-major `d × d` rotation.
    pub rotation: Vec<f64>,
    pub translation: Vec<f64>,
}

impl RigidTransform {
    pub fn identity(dim: usize) -> Self {
        let mut rotation = vec![0.0; dim * dim];
        for i in 0..dim {
            rotation[i * dim + i] = 1.0;
        }
        Self {
            dim,
            rotation,
            translation: vec![0.0; dim],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.dim)
    }

    /// `R v` for every atom vector in `v` (no translation).
    pub fn rotate(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; v.len()];
        for (o, x) in out.chunks_exact_mut(d).zip(v.chunks_exact(d)) {
            for i in 0..d {
                o[i] = (0..d).map(|j| self.rotation[i * d + j] * x[j]).sum();
            }
        }
        out
    }

    /// `Rᵀ v` for every atom vector in `v`.
    pub fn rotate_inverse(&self, v: &[f64]) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; v.len()];
        for (o, x) in out.chunks_exact_mut(d).zip(v.chunks_exact(d)) {
            for i in 0..d {
                o[i] = (0..d).map(|j| self.rotation[j * d + i] * x[j]).sum();
            }
        }
        out
    }

    /// `ρ · Q`.
    pub fn apply(&self, points: &[f64]) -> Vec<f64> {
        let mut out = self.rotate(points);
        for o in out.chunks_exact_mut(self.dim) {
            for (a, t) in o.iter_mut().zip(&self.translation) {
                *a += t;
            }
        }
        out
    }

    /// `ρ⁻¹ · X`.
    pub fn apply_inverse(&self, points: &[f64]) -> Vec<f64> {
        let shifted: Vec<f64> = points
            .iter()
            .enumerate()
            .map(|(i, x)| x - self.translation[i % self.dim])
            .collect();
        self.rotate_inverse(&shifted)
    }

    pub fn determinant(&self) -> f64 {
        DMatrix::from_row_slice(self.dim, self.dim, &self.rotation).determinant()
    }

    /// Composition `self ∘ other`.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let d = self.dim;
        let a = DMatrix::from_row_slice(d, d, &self.rotation);
        let b = DMatrix::from_row_slice(d, d, &other.rotation);
        let r = &a * &b;
        let mut translation = self.rotate(&other.translation);
        for (t, s) in translation.iter_mut().zip(&self.translation) {
            *t += s;
        }
        RigidTransform {
            dim: d,
            rotation: r.transpose().as_slice().to_vec(),
            translation,
        }
    }
}

fn check(p: &[f64], q: &[f64], d: usize) -> Result<usize> {
    if d == 0 || p.len() % d != 0 || p.is_empty() {
        return Err(CoreError::Invalid(format!(
            "point set of length {} is not a whole number of {d}-vectors",
            p.len()
        )));
    }
    if p.len() != q.len() {
        return Err(CoreError::Dimension {
            expected: p.len(),
            got: q.len(),
        });
    }
    Ok(p.len() / d)
}

fn centroid(x: &[f64], d: usize, mask: Option<&[bool]>) -> Vec<f64> {
    let mut c = vec![0.0; d];
    let mut count = 0.0;
    for (i, a) in x.chunks_exact(d).enumerate() {
        if mask.is_none_or(|m| m[i]) {
            for k in 0..d {
                c[k] += a[k];
            }
            count += 1.0;
        }
    }
    c.iter_mut().for_each(|v| *v /= count);
    c
}

/// Proper rigid transform `ρ` minimizing `‖P − ρ·Q‖`.
pub fn kabsch_align(p: &[f64], q: &[f64], d: usize) -> Result<RigidTransform> {
    kabsch_align_masked(p, q, d, None)
}

/// Kabsch fit restricted to atoms where `mask` is true; all atoms when `None`.
pub fn kabsch_align_masked(
    p: &[f64],
    q: &[f64],
    d: usize,
    mask: Option<&[bool]>,
) -> Result<RigidTransform> {
    let n = check(p, q, d)?;
    if let Some(m) = mask {
        if m.len() != n || !m.iter().any(|&b| b) {
            return Err(CoreError::Invalid("alignment mask selects no atoms".into()));
        }
    }
    let cp = centroid(p, d, mask);
    let cq = centroid(q, d, mask);
    // Cross-covariance H = Σ (q_i − c_q)(p_i − c_p)ᵀ.
    let mut h = DMatrix::<f64>::zeros(d, d);
    for (i, (a, b)) in p.chunks_exact(d).zip(q.chunks_exact(d)).enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        for r in 0..d {
            for c in 0..d {
                h[(r, c)] += (b[r] - cq[r]) * (a[c] - cp[c]);
            }
        }
    }
    let rotation = if h.norm() < 1e-14 {
        DMatrix::identity(d, d)
    } else {
        let svd = h.svd(true, true);
        let u = svd.u.expect("svd u");
        let v = svd.v_t.expect("svd v").transpose();
        let mut corr = DMatrix::<f64>::identity(d, d);
        if (&v * u.transpose()).determinant() < 0.0 {
            corr[(d - 1, d - 1)] = -1.0;
        }
        v * corr * u.transpose()
    };
    let rot: Vec<f64> = rotation.transpose().as_slice().to_vec();
    let mut t = RigidTransform {
        dim: d,
        rotation: rot,
        translation: vec![0.0; d],
    };
    let rc = t.rotate(&cq);
    t.translation = cp.iter().zip(&rc).map(|(a, b)| a - b).collect();
    Ok(t)
}

/// `√(‖P − ρ·Q‖² / N)` after Kabsch; plain Euclidean below three dimensions.
pub fn aligned_rmsd(p: &[f64], q: &[f64], d: usize) -> Result<f64> {
    let n = check(p, q, d)?;
    let sq: f64 = if d < 3 {
        p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum()
    } else {
        let t = kabsch_align(p, q, d)?;
        let aq = t.apply(q);
        p.iter().zip(&aq).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    Ok((sq / n as f64).sqrt())
}

/// Frame used for featurization: Kabsch of the target onto the state in 3D,
/// identity otherwise or when `equivariant` is false.
pub fn target_frame(x: &[f64], target: &[f64], d: usize, equivariant: bool) -> RigidTransform {
    if d < 3 || !equivariant {
        return RigidTransform::identity(d);
    }
    kabsch_align(x, target, d).unwrap_or_else(|_| RigidTransform::identity(d))
}
