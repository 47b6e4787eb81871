//! Scalar abstraction and small fixed-size linear algebra.
//!
//! The whole pipeline is generic over [`Real`] so that training runs in f32
//! and the gradient oracles run the identical code path in f64.

use std::fmt::Debug;
use std::iter::Sum;

/// Scalar type the pipeline is instantiated with (f32 for training,
/// f64 for verification).
pub trait Real: num_traits::Float + Sum + Default + Debug + Send + Sync + 'static {
    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_usize(x: usize) -> Self {
        Self::from_f64(x as f64)
    }
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

pub type Vec3<T> = [T; 3];

pub fn vec3<T: Real>(x: T, y: T, z: T) -> Vec3<T> {
    [x, y, z]
}

pub fn add<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale<T: Real>(a: Vec3<T>, s: T) -> Vec3<T> {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot<T: Real>(a: Vec3<T>, b: Vec3<T>) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross<T: Real>(a: Vec3<T>, b: Vec3<T>) -> Vec3<T> {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm<T: Real>(a: Vec3<T>) -> T {
    dot(a, a).sqrt()
}

pub fn normalize<T: Real>(a: Vec3<T>) -> Vec3<T> {
    let n = norm(a);
    if n == T::zero() {
        a
    } else {
        scale(a, T::one() / n)
    }
}

/// Row-major 3x3 matrix. Rows are the camera basis vectors when used as a
/// rotation (world = R * cam convention is up to the caller).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat3<T> {
    pub rows: [Vec3<T>; 3],
}

impl<T: Real> Mat3<T> {
    pub fn identity() -> Self {
        let o = T::one();
        let z = T::zero();
        Mat3 {
            rows: [[o, z, z], [z, o, z], [z, z, o]],
        }
    }

    pub fn from_columns(c0: Vec3<T>, c1: Vec3<T>, c2: Vec3<T>) -> Self {
        Mat3 {
            rows: [
                [c0[0], c1[0], c2[0]],
                [c0[1], c1[1], c2[1]],
                [c0[2], c1[2], c2[2]],
            ],
        }
    }

    pub fn mul_vec(&self, v: Vec3<T>) -> Vec3<T> {
        [
            dot(self.rows[0], v),
            dot(self.rows[1], v),
            dot(self.rows[2], v),
        ]
    }

    pub fn transpose(&self) -> Self {
        let r = &self.rows;
        Mat3 {
            rows: [
                [r[0][0], r[1][0], r[2][0]],
                [r[0][1], r[1][1], r[2][1]],
                [r[0][2], r[1][2], r[2][2]],
            ],
        }
    }

    pub fn mul_mat(&self, other: &Self) -> Self {
        let ot = other.transpose();
        Mat3 {
            rows: [
                [
                    dot(self.rows[0], ot.rows[0]),
                    dot(self.rows[0], ot.rows[1]),
                    dot(self.rows[0], ot.rows[2]),
                ],
                [
                    dot(self.rows[1], ot.rows[0]),
                    dot(self.rows[1], ot.rows[1]),
                    dot(self.rows[1], ot.rows[2]),
                ],
                [
                    dot(self.rows[2], ot.rows[0]),
                    dot(self.rows[2], ot.rows[1]),
                    dot(self.rows[2], ot.rows[2]),
                ],
            ],
        }
    }

    /// Max abs element of R^T R - I; small for orthonormal R.
    pub fn orthonormality_error(&self) -> T {
        let m = self.transpose().mul_mat(self);
        let mut err = T::zero();
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { T::one() } else { T::zero() };
                err = err.max((m.rows[i][j] - target).abs());
            }
        }
        err
    }

    pub fn to_row_major(&self) -> [T; 9] {
        let r = &self.rows;
        [
            r[0][0], r[0][1], r[0][2], r[1][0], r[1][1], r[1][2], r[2][0], r[2][1], r[2][2],
        ]
    }

    pub fn from_row_major(m: [T; 9]) -> Self {
        Mat3 {
            rows: [[m[0], m[1], m[2]], [m[3], m[4], m[5]], [m[6], m[7], m[8]]],
        }
    }
}

/// Cubic smoothstep, 0 at u<=0, 1 at u>=1.
pub fn smoothstep<T: Real>(u: T) -> T {
    let u = u.max(T::zero()).min(T::one());
    u * u * (T::from_f64(3.0) - T::from_f64(2.0) * u)
}

pub fn logistic<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mat_vec_roundtrip() {
        let m = Mat3::<f64>::from_row_major([1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        assert_eq!(m.to_row_major(), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);
        assert_eq!(m.mul_vec([1.0, 0.0, 0.0]), [1.0, 4.0, 7.0]);
    }

    #[test]
    fn identity_is_orthonormal() {
        let m = Mat3::<f64>::identity();
        assert!(m.orthonormality_error() < 1e-15);
    }

    #[test]
    fn smoothstep_midpoint() {
        assert_eq!(smoothstep(0.5f64), 0.5);
        assert_eq!(smoothstep(-1.0f64), 0.0);
        assert_eq!(smoothstep(2.0f64), 1.0);
    }
}
