//! Monotone rational-quadratic splines on `[-B, B]` with identity tails.
//!
//! Bin widths and heights are given as positive fractions of the interval
//! (they sum to one); the `K - 1` interior knot derivatives are positive and
//! the two boundary derivatives are fixed at 1 so the spline joins the
//! identity tails with a continuous slope.

use crate::error::{Error, Result};

/// Partial derivatives are laid out in this order.
const P_U: usize = 0;
const P_XK: usize = 1;
const P_W: usize = 2;
const P_YK: usize = 3;
const P_H: usize = 4;
const P_DK: usize = 5;
const P_DK1: usize = 6;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Bin {
    pub k: usize,
    pub x_k: f64,
    pub w: f64,
    pub y_k: f64,
    pub h: f64,
    pub d_k: f64,
    pub d_k1: f64,
}

/// Value, log-slope and their partials inside one bin.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BinEval {
    pub value: f64,
    pub log_deriv: f64,
    pub dv: [f64; 7],
    pub dl: [f64; 7],
}

fn validate(widths: &[f64], heights: &[f64], derivs: &[f64], bound: f64) -> Result<()> {
    let k = widths.len();
    if k < 2 || heights.len() != k || derivs.len() + 1 != k {
        return Err(Error::shape(
            "rq_spline",
            format!(
                "widths {}, heights {}, derivs {} (need K, K, K-1 with K >= 2)",
                widths.len(),
                heights.len(),
                derivs.len()
            ),
        ));
    }
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(Error::InvalidArgument(format!("tail bound {bound}")));
    }
    for (name, vals) in [("width", widths), ("height", heights), ("derivative", derivs)] {
        if let Some(v) = vals.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidArgument(format!("non-positive bin {name} {v}")));
        }
    }
    for (name, vals) in [("widths", widths), ("heights", heights)] {
        let s: f64 = vals.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("bin {name} sum to {s}, not 1")));
        }
    }
    Ok(())
}

fn boundary_deriv(derivs: &[f64], k: usize) -> f64 {
    if k == 0 || k > derivs.len() {
        1.0
    } else {
        derivs[k - 1]
    }
}

/// Finds the bin whose x-interval holds `u`; `None` in the identity tails.
pub(crate) fn locate_x(u: f64, widths: &[f64], heights: &[f64], derivs: &[f64], bound: f64) -> Option<Bin> {
    locate(u, widths, heights, derivs, bound, true)
}

/// Finds the bin whose y-interval holds `v`; `None` in the identity tails.
pub(crate) fn locate_y(v: f64, widths: &[f64], heights: &[f64], derivs: &[f64], bound: f64) -> Option<Bin> {
    locate(v, widths, heights, derivs, bound, false)
}

fn locate(t: f64, widths: &[f64], heights: &[f64], derivs: &[f64], bound: f64, by_x: bool) -> Option<Bin> {
    if !(-bound..bound).contains(&t) {
        return None;
    }
    let span = 2.0 * bound;
    let (mut cw, mut ch) = (0.0, 0.0);
    let mut found = None;
    for k in 0..widths.len() {
        let x_k = -bound + span * cw;
        let y_k = -bound + span * ch;
        let edge = if by_x { x_k } else { y_k };
        if k > 0 && t < edge {
            break;
        }
        found = Some(Bin {
            k,
            x_k,
            w: span * widths[k],
            y_k,
            h: span * heights[k],
            d_k: boundary_deriv(derivs, k),
            d_k1: boundary_deriv(derivs, k + 1),
        });
        cw += widths[k];
        ch += heights[k];
    }
    found
}

pub(crate) fn eval_bin(u: f64, bin: &Bin) -> BinEval {
    let Bin { x_k, w, y_k, h, d_k, d_k1, .. } = *bin;
    let xi = (u - x_k) / w;
    let t = xi * (1.0 - xi);
    let s = h / w;
    let a = s * xi * xi + d_k * t;
    let dsum = d_k1 + d_k - 2.0 * s;
    let den = s + dsum * t;
    let num = d_k1 * xi * xi + 2.0 * s * t + d_k * (1.0 - xi) * (1.0 - xi);
    let value = y_k + h * a / den;
    let log_deriv = 2.0 * s.ln() + num.ln() - 2.0 * den.ln();

    let den2 = den * den;
    let a_xi = 2.0 * s * xi + d_k * (1.0 - 2.0 * xi);
    let d_xi = dsum * (1.0 - 2.0 * xi);
    let a_s = xi * xi;
    let d_s = 1.0 - 2.0 * t;
    let v_xi = h * (a_xi * den - a * d_xi) / den2;
    let v_s = h * (a_s * den - a * d_s) / den2;
    let v_h = a / den;
    let v_dk = h * t * (den - a) / den2;
    let v_dk1 = -h * a * t / den2;

    let n_xi = 2.0 * d_k1 * xi + 2.0 * s * (1.0 - 2.0 * xi) - 2.0 * d_k * (1.0 - xi);
    let l_xi = n_xi / num - 2.0 * d_xi / den;
    let l_s = 2.0 / s + 2.0 * t / num - 2.0 * d_s / den;
    let l_dk = (1.0 - xi) * (1.0 - xi) / num - 2.0 * t / den;
    let l_dk1 = xi * xi / num - 2.0 * t / den;

    let chain = |p_xi: f64, p_s: f64, p_h: f64, p_yk: f64, p_dk: f64, p_dk1: f64| {
        let mut out = [0.0; 7];
        out[P_U] = p_xi / w;
        out[P_XK] = -p_xi / w;
        out[P_W] = -(p_xi * xi + p_s * s) / w;
        out[P_YK] = p_yk;
        out[P_H] = p_h + p_s / w;
        out[P_DK] = p_dk;
        out[P_DK1] = p_dk1;
        out
    };
    BinEval {
        value,
        log_deriv,
        dv: chain(v_xi, v_s, v_h, 1.0, v_dk, v_dk1),
        dl: chain(l_xi, l_s, 0.0, 0.0, l_dk, l_dk1),
    }
}

/// Solves the bin's quadratic for the pre-image of `v`.
pub(crate) fn invert_bin(v: f64, bin: &Bin) -> f64 {
    let Bin { x_k, w, y_k, h, d_k, d_k1, .. } = *bin;
    let s = h / w;
    let delta = v - y_k;
    let dsum = d_k1 + d_k - 2.0 * s;
    let a = h * (s - d_k) + delta * dsum;
    let b = h * d_k - delta * dsum;
    let c = -s * delta;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let xi = (2.0 * c / (-b - disc.sqrt())).clamp(0.0, 1.0);
    x_k + xi * w
}

/// Scatters bin-local partials onto the fractional widths, heights and
/// interior derivatives. `cv` and `cl` weight the value and log-slope partials.
pub(crate) fn scatter_partials(
    bin: &Bin,
    eval: &BinEval,
    cv: f64,
    cl: f64,
    bound: f64,
    g_widths: &mut [f64],
    g_heights: &mut [f64],
    g_derivs: &mut [f64],
) {
    let span = 2.0 * bound;
    let g = |i: usize| cv * eval.dv[i] + cl * eval.dl[i];
    let (g_x, g_w, g_y, g_h) = (g(P_XK), g(P_W), g(P_YK), g(P_H));
    for j in 0..bin.k {
        g_widths[j] += span * g_x;
        g_heights[j] += span * g_y;
    }
    g_widths[bin.k] += span * g_w;
    g_heights[bin.k] += span * g_h;
    if bin.k >= 1 {
        g_derivs[bin.k - 1] += g(P_DK);
    }
    if bin.k < g_derivs.len() {
        g_derivs[bin.k] += g(P_DK1);
    }
}

pub(crate) fn partial_u(eval: &BinEval) -> (f64, f64) {
    (eval.dv[P_U], eval.dl[P_U])
}

/// Evaluates the spline at `u`, returning `(v, dv/du)`.
pub fn rq_spline(u: f64, widths: &[f64], heights: &[f64], derivs: &[f64], bound: f64) -> Result<(f64, f64)> {
    validate(widths, heights, derivs, bound)?;
    if !u.is_finite() {
        return Err(Error::NonFinite { op: "rq_spline" });
    }
    Ok(match locate_x(u, widths, heights, derivs, bound) {
        None => (u, 1.0),
        Some(bin) => {
            let e = eval_bin(u, &bin);
            (e.value, e.log_deriv.exp())
        }
    })
}

/// Inverts [`rq_spline`], returning `(u, du/dv)`.
pub fn rq_spline_inverse(v: f64, widths: &[f64], heights: &[f64], derivs: &[f64], bound: f64) -> Result<(f64, f64)> {
    validate(widths, heights, derivs, bound)?;
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "rq_spline_inverse" });
    }
    Ok(match locate_y(v, widths, heights, derivs, bound) {
        None => (v, 1.0),
        Some(bin) => {
            let u = invert_bin(v, &bin);
            let e = eval_bin(u, &bin);
            (u, (-e.log_deriv).exp())
        }
    })
}

/// `(v, log dv/du)` for parameters already known to be valid.
pub(crate) fn forward_log(u: f64, widths: &[f64], heights: &[f64], derivs: &[f64], bound: f64) -> (f64, f64) {
    match locate_x(u, widths, heights, derivs, bound) {
        None => (u, 0.0),
        Some(bin) => {
            let e = eval_bin(u, &bin);
            (e.value, e.log_deriv)
        }
    }
}

/// `(u, log du/dv)` for parameters already known to be valid.
pub(crate) fn inverse_log(v: f64, widths: &[f64], heights: &[f64], derivs: &[f64], bound: f64) -> (f64, f64) {
    match locate_y(v, widths, heights, derivs, bound) {
        None => (v, 0.0),
        Some(bin) => {
            let u = invert_bin(v, &bin);
            (u, -eval_bin(u, &bin).log_deriv)
        }
    }
}

/// Inverse value only, for sampling.
pub(crate) fn inverse_value(v: f64, widths: &[f64], heights: &[f64], derivs: &[f64], bound: f64) -> f64 {
    match locate_y(v, widths, heights, derivs, bound) {
        None => v,
        Some(bin) => invert_bin(v, &bin),
    }
}

/// Knot coordinates `(x_k, y_k)` for `k = 0..=K`.
pub fn knots(widths: &[f64], heights: &[f64], bound: f64) -> Vec<(f64, f64)> {
    let span = 2.0 * bound;
    let (mut cw, mut ch) = (0.0, 0.0);
    let mut out = Vec::with_capacity(widths.len() + 1);
    out.push((-bound, -bound));
    for (w, h) in widths.iter().zip(heights) {
        cw += w;
        ch += h;
        out.push((-bound + span * cw, -bound + span * ch));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_params(rng: &mut ChaCha8Rng, k: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut norm = |n: usize| {
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect::<Vec<_>>()
        };
        let w = norm(k);
        let h = norm(k);
        let d = (0..k - 1).map(|_| rng.random_range(0.1..4.0)).collect();
        (w, h, d)
    }

    #[test]
    fn knots_map_to_knots() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w, h, d) = random_params(&mut rng, 8);
        for (x, y) in knots(&w, &h, 3.0).into_iter().take(8) {
            let (v, _) = rq_spline(x, &w, &h, &d, 3.0).unwrap();
            assert_eq!(v, y);
        }
    }

    #[test]
    fn identity_tails() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (w, h, d) = random_params(&mut rng, 8);
        assert_eq!(rq_spline(4.0, &w, &h, &d, 3.0).unwrap(), (4.0, 1.0));
        assert_eq!(rq_spline(-7.5, &w, &h, &d, 3.0).unwrap(), (-7.5, 1.0));
    }

    #[test]
    fn inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (w, h, d) = random_params(&mut rng, 8);
        for _ in 0..1000 {
            let u = rng.random_range(-3.0..3.0);
            let (v, dv) = rq_spline(u, &w, &h, &d, 3.0).unwrap();
            let (back, du) = rq_spline_inverse(v, &w, &h, &d, 3.0).unwrap();
            assert!((back - u).abs() < 1e-10, "{u} -> {v} -> {back}");
            assert!((dv * du - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn slope_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (w, h, d) = random_params(&mut rng, 6);
        for _ in 0..200 {
            let u = rng.random_range(-2.9..2.9);
            let (_, dv) = rq_spline(u, &w, &h, &d, 3.0).unwrap();
            let e = 1e-6;
            let fd = (rq_spline(u + e, &w, &h, &d, 3.0).unwrap().0 - rq_spline(u - e, &w, &h, &d, 3.0).unwrap().0)
                / (2.0 * e);
            assert!(dv > 0.0);
            assert!((fd - dv).abs() < 1e-6 * dv.max(1.0), "{fd} vs {dv}");
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let w = [0.5, 0.5];
        assert!(rq_spline(0.0, &w, &[1.0, 0.0], &[1.0], 3.0).is_err());
        assert!(rq_spline(0.0, &w, &w, &[-1.0], 3.0).is_err());
        assert!(rq_spline(0.0, &w, &w, &[1.0, 1.0], 3.0).is_err());
    }
}
