//! Small one-dimensional quadrature toolkit: a fixed 4-point Gauss–Legendre
//! rule for low-degree polynomial integrands and adaptive Gauss–Kronrod (7/15)
//! for everything else.

use crate::error::{Error, Result};

const GL4_NODES: [f64; 2] = [0.339_981_043_584_856_3, 0.861_136_311_594_052_6];
const GL4_WEIGHTS: [f64; 2] = [0.652_145_154_862_546_1, 0.347_854_845_137_453_9];

/// 4-point Gauss–Legendre on `[a, b]`; exact for polynomials of degree ≤ 7.
pub fn gauss_legendre4<F: Fn(f64) -> f64>(f: F, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let mut s = 0.0;
    for (x, w) in GL4_NODES.iter().zip(GL4_WEIGHTS) {
        s += w * (f(c - r * x) + f(c + r * x));
    }
    s * r
}

// Kronrod abscissae on [0, 1]; odd indices are the 7-point Gauss nodes.
const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

/// One G7/K15 panel: `(kronrod estimate, |kronrod − gauss|)`.
fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for k in 0..7 {
        let dx = r * XGK[k];
        let pair = f(c - dx) + f(c + dx);
        kronrod += WGK[k] * pair;
        if k % 2 == 1 {
            gauss += WG[k / 2] * pair;
        }
    }
    (kronrod * r, ((kronrod - gauss) * r).abs())
}

const MAX_PANELS: usize = 4000;

/// Globally adaptive Gauss–Kronrod integration of `f` over `[a, b]` to
/// absolute tolerance `tol`: the panel with the largest error estimate is
/// bisected until the summed estimate drops below `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    if b <= a {
        return Ok(0.0);
    }
    let (est, err) = gk15(&f, a, b);
    let mut panels = vec![(a, b, est, err)];
    loop {
        let total_err: f64 = panels.iter().map(|p| p.3).sum();
        if total_err <= tol {
            break;
        }
        let (k, &(lo, hi, _, e)) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .3.total_cmp(&y.1 .3))
            .unwrap();
        let m = 0.5 * (lo + hi);
        if panels.len() >= MAX_PANELS || m <= lo || m >= hi {
            return Err(Error::QuadratureFailure(format!(
                "no convergence on [{a}, {b}] (error estimate {total_err:.3e}, worst panel \
                 [{lo}, {hi}] with {e:.3e}, tolerance {tol:.3e})"
            )));
        }
        let (l, le) = gk15(&f, lo, m);
        let (r, re) = gk15(&f, m, hi);
        panels[k] = (lo, m, l, le);
        panels.push((m, hi, r, re));
    }
    Ok(panels.iter().map(|p| p.2).sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn monomial_integral(k: i32, a: f64, b: f64) -> f64 {
        (b.powi(k + 1) - a.powi(k + 1)) / (k + 1) as f64
    }

    #[test]
    fn gauss_legendre_exact_to_degree_seven() {
        for k in 0..=7 {
            let got = gauss_legendre4(|u| u.powi(k), -0.3, 0.9);
            assert!((got - monomial_integral(k, -0.3, 0.9)).abs() < 1e-15, "k={k}");
        }
    }

    #[test]
    fn kronrod_panel_exact_for_high_degree() {
        for k in 0..=21 {
            let (est, _) = gk15(&|u: f64| u.powi(k), -1.0, 0.5);
            assert!((est - monomial_integral(k, -1.0, 0.5)).abs() < 1e-14, "k={k}");
        }
        // Gauss part must be exact to degree 13, so the error estimate vanishes.
        let (_, err) = gk15(&|u: f64| u.powi(13), -1.0, 0.5);
        assert!(err < 1e-14);
    }

    #[test]
    fn adaptive_handles_kinks() {
        let v = integrate(|u| u.abs().sqrt(), -1.0, 1.0, 1e-10).unwrap();
        assert!((v - 4.0 / 3.0).abs() < 1e-9);
        let e = integrate(f64::exp, 0.0, 1.0, 1e-12).unwrap();
        assert!((e - (std::f64::consts::E - 1.0)).abs() < 1e-12);
        assert_eq!(integrate(f64::exp, 1.0, 1.0, 1e-12).unwrap(), 0.0);
    }
}
