//! Float helpers routed through `libm` so the crate stays `no_std`.

pub(crate) use libm::{exp, log as ln, pow, sqrt};

pub(crate) fn sq(x: f64) -> f64 {
    x * x
}

/// ln after clamping the argument from below; keeps losses finite.
pub(crate) fn ln_floored(x: f64, floor: f64) -> f64 {
    ln(if x < floor { floor } else { x })
}
