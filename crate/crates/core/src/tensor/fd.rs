//! Central finite-difference oracle for gradient checks.

use std::collections::BTreeMap;

use super::tape::GradMap;
use super::Tensor;
use crate::error::Error;
use crate::Result;

/// Named parameter set handed to the probed function.
pub type ParamMap = BTreeMap<String, Tensor>;

/// Coordinates to probe: (parameter name, flat index).
pub type Coord = (String, usize);

/// Compare analytic gradients against central finite differences of `f` at
/// the given coordinates. Returns the maximum relative error
/// `|(f(w+eps e_i) - f(w-eps e_i)) / (2 eps) - g_i| / (|g_i| + 1e-8)`.
pub fn finite_diff_check<F>(
    f: F,
    params: &ParamMap,
    grads: &GradMap,
    coords: &[Coord],
    eps: f64,
) -> Result<f64>
where
    F: Fn(&ParamMap) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::contract(format!("finite difference step must be > 0, got {eps}")));
    }
    let mut worst: f64 = 0.0;
    let mut work = params.clone();
    for (name, idx) in coords {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no gradient for {name}")))?
            .data()[*idx];
        let orig = params
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("no parameter {name}")))?
            .data()[*idx];

        work.get_mut(name).unwrap().data_mut()[*idx] = orig + eps;
        let fp = f(&work)?;
        work.get_mut(name).unwrap().data_mut()[*idx] = orig - eps;
        let fm = f(&work)?;
        work.get_mut(name).unwrap().data_mut()[*idx] = orig;

        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function value while probing {name}[{idx}]"
            )));
        }
        let fd = (fp - fm) / (2.0 * eps);
        let rel = (fd - g).abs() / (g.abs() + 1e-8);
        if rel > worst {
            worst = rel;
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tape::{grad, Tape};

    fn quadratic(p: &ParamMap) -> Result<f64> {
        let w = &p["w"];
        Ok(0.5 * w.data().iter().map(|v| v * v).sum::<f64>())
    }

    #[test]
    fn quadratic_is_exact() {
        let w = Tensor::new(vec![1, 4], vec![0.5, -1.5, 2.0, 0.0]).unwrap();
        let mut tape = Tape::new();
        let wid = tape.param("w", &w);
        let sq = tape.mul(wid, wid).unwrap();
        let ones = tape.constant(Tensor::new(vec![4, 1], vec![1.0; 4]).unwrap());
        let summed = tape.matmul(sq, ones).unwrap();
        let loss = tape.scalar_mul(summed, 0.5);
        let grads = grad(&tape, loss, &["w"]).unwrap();

        let mut params = ParamMap::new();
        params.insert("w".into(), w);
        let coords: Vec<Coord> = (0..4).map(|i| ("w".to_string(), i)).collect();
        let err = finite_diff_check(quadratic, &params, &grads, &coords, 1e-4).unwrap();
        assert!(err <= 1e-6, "quadratic fd error {err}");
    }

    #[test]
    fn zero_step_rejected() {
        let params = ParamMap::new();
        let grads = GradMap::new();
        let r = finite_diff_check(quadratic, &params, &grads, &[], 0.0);
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
