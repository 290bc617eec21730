//! Cosine noise schedule and the v-prediction target.

use crate::error::{shape_err, Result, TdaError};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// `(alpha, sigma) = (cos(πt/2), sin(πt/2))` for `t ∈ [0, 1]`.
pub fn noise_schedule<T: Scalar>(t: T) -> Result<(T, T)> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(TdaError::Domain(format!("t = {t} is outside [0, 1]")));
    }
    Ok(schedule_unchecked(t))
}

#[inline]
pub(crate) fn schedule_unchecked<T: Scalar>(t: T) -> (T, T) {
    // The endpoints are pinned so that t=0 and t=1 are exact.
    if t == T::zero() {
        return (T::one(), T::zero());
    }
    if t == T::one() {
        return (T::zero(), T::one());
    }
    let half_pi = T::lit(std::f64::consts::FRAC_PI_2);
    let (s, c) = (half_pi * t).sin_cos();
    (c, s)
}

/// `alpha_t · eps − sigma_t · z0`.
pub fn v_target<T: Scalar>(z0: &Matrix<T>, eps: &Matrix<T>, t: T) -> Result<Matrix<T>> {
    if !z0.same_shape(eps) {
        return shape_err(format!(
            "z0 is {:?} but eps is {:?}",
            z0.shape(),
            eps.shape()
        ));
    }
    let (alpha, sigma) = noise_schedule(t)?;
    eps.axpby(alpha, z0, -sigma)
}

/// Forward-diffused latent `alpha_t · z0 + sigma_t · eps`.
pub fn diffuse<T: Scalar>(z0: &Matrix<T>, eps: &Matrix<T>, t: T) -> Result<Matrix<T>> {
    if !z0.same_shape(eps) {
        return shape_err(format!(
            "z0 is {:?} but eps is {:?}",
            z0.shape(),
            eps.shape()
        ));
    }
    let (alpha, sigma) = noise_schedule(t)?;
    z0.axpby(alpha, eps, sigma)
}
