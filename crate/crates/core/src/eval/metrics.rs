use crate::error::{Error, Result};

/// Coefficient of determination `1 - SS_res / SS_tot`.
pub fn r2(y: &[f64], pred: &[f64]) -> Result<f64> {
    check(y, pred)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    if ss_tot == 0.0 {
        return Ok(if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY });
    }
    Ok(1.0 - ss_res / ss_tot)
}

pub fn rmse(y: &[f64], pred: &[f64]) -> Result<f64> {
    check(y, pred)?;
    Ok((y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64).sqrt())
}

fn check(y: &[f64], pred: &[f64]) -> Result<()> {
    if y.is_empty() || y.len() != pred.len() {
        return Err(Error::Dimension {
            expected: y.len(),
            got: pred.len(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_constant() {
        let y = [1.0, 2.0, 4.0];
        assert_eq!(r2(&y, &y).unwrap(), 1.0);
        assert_eq!(rmse(&y, &y).unwrap(), 0.0);
        let c = [2.0; 3];
        assert!(r2(&y, &c).unwrap() <= 0.0);
        assert!((rmse(&y, &[1.0, 2.0, 5.0]).unwrap() - (1.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }
}
