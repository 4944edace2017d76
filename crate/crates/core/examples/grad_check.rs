//! Check reverse-mode gradients against central differences.

use meshmae::autodiff::{grad_check, Graph, Tensor, Var};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // loss = mean(softmax(x @ w) * y)
    let x = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect())?;
    let w = Tensor::new(vec![4, 2], (0..8).map(|i| (i as f64 * 0.71).cos()).collect())?;
    let y = Tensor::new(vec![3, 2], vec![1.0, -2.0, 0.5, 0.0, 3.0, -1.0])?;
    let program = move |g: &mut Graph<f64>, v: &[Var]| {
        let h = g.matmul(v[0], v[1])?;
        let s = g.softmax(h, 1)?;
        let y = g.input(y.clone());
        let p = g.mul(s, y)?;
        Ok(g.mean(p))
    };
    let report = grad_check(program, &[x, w], 1e-6, 1e-6, None)?;
    for (i, r) in report.inputs.iter().enumerate() {
        println!("input {i}: {} coordinates, max relative error {:.2e}", r.checked, r.max_rel_error);
    }
    println!("passed: {}", report.passed());
    Ok(())
}
