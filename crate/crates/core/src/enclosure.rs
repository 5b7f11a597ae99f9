//! Lipschitz-based one-step bounds: the Grönwall trajectory-variation bound
//! and the a priori interval enclosure of the next state.

use crate::dynamics::VectorField;
use crate::error::{Error, Result};

/// `‖f(x)‖₂ (e^{LΔt} − 1) / L`, with the `L → 0` limit `‖f(x)‖₂ Δt`.
pub fn gronwall_variation_bound(field: &VectorField, l2: f64, x: &[f64], dt: f64) -> Result<f64> {
    if !(dt >= 0.0) {
        return Err(Error::Domain(format!("step must be non-negative, got {dt}")));
    }
    if !(l2 >= 0.0) || !l2.is_finite() {
        return Err(Error::Domain(format!("Lipschitz norm must be non-negative, got {l2}")));
    }
    let f = field.eval(x)?;
    let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if l2 == 0.0 {
        return Ok(fnorm * dt);
    }
    Ok(fnorm * (l2 * dt).exp_m1() / l2)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AprioriEnclosure {
    pub center: Vec<f64>,
    pub radius_vector: Vec<f64>,
}

impl AprioriEnclosure {
    /// Closed-box membership `|y − center| ≤ radius` componentwise.
    pub fn contains(&self, y: &[f64]) -> Result<bool> {
        if y.len() != self.center.len() {
            return Err(Error::Shape(format!(
                "point has dimension {}, enclosure {}",
                y.len(),
                self.center.len()
            )));
        }
        Ok(y.iter()
            .zip(&self.center)
            .zip(&self.radius_vector)
            .all(|((y, c), r)| (y - c).abs() <= *r))
    }
}

/// Largest step for which the enclosure hypothesis `Δt √n ‖L‖₂ < 1` holds
/// (exclusive bound).
pub fn max_enclosure_step(l2: f64, n: usize) -> f64 {
    1.0 / ((n as f64).sqrt() * l2)
}

/// Box `x + [−1, 1]^{n×n} Δt f(x) / (1 − √n Δt ‖L‖₂)`, realized with
/// radius `Σ_j |Δt f_j(x)| / (1 − √n Δt ‖L‖₂)` in every component.
pub fn apriori_enclosure(field: &VectorField, l2: f64, x: &[f64], dt: f64) -> Result<AprioriEnclosure> {
    if !(dt >= 0.0) {
        return Err(Error::Domain(format!("step must be non-negative, got {dt}")));
    }
    let n = x.len();
    let q = (n as f64).sqrt() * dt * l2;
    if !(q < 1.0) {
        return Err(Error::StepTooLarge {
            dt,
            max_dt: max_enclosure_step(l2, n),
        });
    }
    let f = field.eval(x)?;
    let r = f.iter().map(|v| (dt * v).abs()).sum::<f64>() / (1.0 - q);
    Ok(AprioriEnclosure {
        center: x.to_vec(),
        radius_vector: vec![r; n],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::LinearStiffSystem;
    use crate::tensor::Tensor;
    use approx::assert_abs_diff_eq;

    fn decay() -> VectorField {
        VectorField::linear(Tensor::from_rows(&[vec![-1.0]]).unwrap()).unwrap()
    }

    #[test]
    fn gronwall_examples() {
        let f = decay();
        assert_eq!(gronwall_variation_bound(&f, 1.0, &[1.0], 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(
            gronwall_variation_bound(&f, 1.0, &[1.0], 1.0).unwrap(),
            std::f64::consts::E - 1.0,
            epsilon = 1e-15
        );
        assert_eq!(gronwall_variation_bound(&f, 1.0, &[0.0], 3.0).unwrap(), 0.0);
        assert_eq!(gronwall_variation_bound(&f, 0.0, &[2.0], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn scalar_enclosure() {
        let enc = apriori_enclosure(&decay(), 1.0, &[1.0], 0.1).unwrap();
        assert_abs_diff_eq!(enc.radius_vector[0], 0.1 / 0.9, epsilon = 1e-15);
        assert!(enc.contains(&[(-0.1f64).exp()]).unwrap());

        let zero = VectorField::linear(Tensor::zeros(&[2, 2])).unwrap();
        let enc = apriori_enclosure(&zero, 1.0, &[0.3, 0.2], 0.1).unwrap();
        assert_eq!(enc.radius_vector, vec![0.0, 0.0]);
        assert!(enc.contains(&[0.3, 0.2]).unwrap());
        assert!(!enc.contains(&[0.3, 0.2000001]).unwrap());
    }

    #[test]
    fn stiff_step_limit() {
        let sys = LinearStiffSystem::stiff();
        let l = sys
            .field()
            .lipschitz_estimate(&[-1.0, -1.0], &[1.0, 1.0], 2, &mut crate::rng::Rng::new(0))
            .unwrap();
        let max = max_enclosure_step(l.norm2, 2);
        assert_abs_diff_eq!(max, 7.07e-4, epsilon = 1e-6);
        match apriori_enclosure(&sys.field(), l.norm2, &[0.1, 0.1], 1e-3) {
            Err(Error::StepTooLarge { max_dt, .. }) => assert_abs_diff_eq!(max_dt, max, epsilon = 1e-18),
            other => panic!("expected StepTooLarge, got {other:?}"),
        }
    }

    #[test]
    fn closed_box_boundaries() {
        let enc = AprioriEnclosure {
            center: vec![1.0, -1.0],
            radius_vector: vec![0.5, 0.25],
        };
        assert!(enc.contains(&[1.0, -1.0]).unwrap());
        assert!(enc.contains(&[1.5, -0.75]).unwrap());
        assert!(!enc.contains(&[2.0, -0.5]).unwrap());
        assert!(enc.contains(&[1.0]).is_err());
    }
}
