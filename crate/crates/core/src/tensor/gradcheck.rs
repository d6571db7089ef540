//! Central finite-difference gradient checker (64-bit).

use super::Tensor;

/// Largest relative discrepancy between analytic gradients and central
/// differences (h = 1e-5) over every element of every input. The
/// denominator is floored at 1e-4 so that vanishing gradients are compared
/// absolutely.
pub fn check_gradient<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let h = 1e-5;
    let inputs: Vec<Tensor<f64>> = inputs.iter().map(|t| t.with_requires_grad(true)).collect();
    f(&inputs).backward().unwrap();
    let mut worst: f64 = 0.0;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);
        for j in 0..x.numel() {
            let eval = |delta: f64| {
                let perturbed: Vec<Tensor<f64>> = inputs
                    .iter()
                    .enumerate()
                    .map(|(k, t)| {
                        let mut d = t.data().to_vec();
                        if k == i {
                            d[j] += delta;
                        }
                        Tensor::new(d, t.shape()).unwrap()
                    })
                    .collect();
                f(&perturbed).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}
