use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before the log.
pub const PROB_EPS: f64 = 1e-7;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predictions for {b} labels")));
    }
    if a == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(())
}

/// Mean binary cross-entropy of fake probabilities against 0/1 labels.
pub fn bce_loss(probs: &[f64], labels: &[f64]) -> Result<f64> {
    check_len(probs.len(), labels.len())?;
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

/// Gradient of the mean loss with respect to the pre-sigmoid logits,
/// `(p - y) / n`. Seeding here instead of at the probability avoids the
/// vanishing product of the clamp and the sigmoid slope on confident
/// mistakes.
pub fn bce_logit_grad(probs: &[f64], labels: &[f64]) -> Result<Tensor> {
    check_len(probs.len(), labels.len())?;
    let n = probs.len() as f64;
    Ok(Tensor::new(
        vec![probs.len(), 1],
        probs.iter().zip(labels).map(|(p, y)| (p - y) / n).collect(),
    ))
}

/// Mean softmax cross-entropy of `[n, c]` logits, with its gradient.
pub fn cross_entropy(logits: &Tensor, classes: &[usize]) -> Result<(f64, Tensor)> {
    let (n, c) = (logits.dim(0), logits.dim(1));
    check_len(n, classes.len())?;
    let mut grad = vec![0.0; n * c];
    let mut total = 0.0;
    for (i, (row, &k)) in logits.data().chunks(c).zip(classes).enumerate() {
        if k >= c {
            return Err(Error::Shape(format!("class {k} out of range for {c} logits")));
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        total += z.ln() + max - row[k];
        for (j, v) in row.iter().enumerate() {
            let p = (v - max).exp() / z;
            grad[i * c + j] = (p - if j == k { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    Ok((total / n as f64, Tensor::new(vec![n, c], grad)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_closed_forms() {
        assert!(bce_loss(&[1.0 - PROB_EPS], &[1.0]).unwrap() < 1e-6);
        assert!((bce_loss(&[0.5, 0.5], &[0.0, 1.0]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        // Clamping keeps certain mistakes finite.
        let worst = bce_loss(&[0.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((worst + PROB_EPS.ln()).abs() < 1e-9);
        assert!(bce_loss(&[0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn logit_gradient_matches_finite_difference() {
        let z = [0.3, -1.2, 2.0];
        let y = [1.0, 0.0, 0.0];
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let probs: Vec<f64> = z.iter().map(|&v| sig(v)).collect();
        let g = bce_logit_grad(&probs, &y).unwrap();
        for i in 0..3 {
            let h = 1e-6;
            let at = |d: f64| {
                let p: Vec<f64> = z.iter().enumerate().map(|(j, &v)| sig(if j == i { v + d } else { v })).collect();
                bce_loss(&p, &y).unwrap()
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_uniform_and_gradient_rows() {
        let logits = Tensor::zeros(&[2, 13]);
        let (loss, g) = cross_entropy(&logits, &[0, 12]).unwrap();
        assert!((loss - 13f64.ln()).abs() < 1e-12);
        for row in g.data().chunks(13) {
            assert!(row.iter().sum::<f64>().abs() < 1e-15);
        }
        assert!(cross_entropy(&logits, &[0, 13]).is_err());
    }
}
