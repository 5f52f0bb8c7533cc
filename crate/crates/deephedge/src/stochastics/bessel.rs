//! Modified Bessel functions needed by the NIG density.
//!
//! Polynomial approximations from Abramowitz & Stegun 9.8 (absolute error
//! below ~2e-7 on the relevant ranges), which is far below the quadrature
//! tolerances used downstream.

/// Modified Bessel function of the first kind, order 1, for |x| <= 3.75.
fn bessel_i1_small(x: f64) -> f64 {
    let t = (x / 3.75) * (x / 3.75);
    x * (0.5
        + t * (0.87890594
            + t * (0.51498869
                + t * (0.15084934 + t * (0.02658733 + t * (0.00301532 + t * 0.00032411))))))
}

/// Modified Bessel function of the second kind, order 1, for x > 0.
pub fn bessel_k1(x: f64) -> f64 {
    debug_assert!(x > 0.0);
    if x <= 2.0 {
        let t = x * x / 4.0;
        let poly = 1.0
            + t * (0.15443144
                + t * (-0.67278579
                    + t * (-0.18156897
                        + t * (-0.01919402 + t * (-0.00110404 + t * -0.00004686)))));
        (x / 2.0).ln() * bessel_i1_small(x) + poly / x
    } else {
        let s = 2.0 / x;
        let poly = 1.25331414
            + s * (0.23498619
                + s * (-0.03655620
                    + s * (0.01504268 + s * (-0.00780353 + s * (0.00325614 + s * -0.00068245)))));
        poly * (-x).exp() / x.sqrt()
    }
}
