use super::{AutodiffError, Graph, Tensor, Var};

/// Denominator floor of the relative error, so that coordinates whose true
/// gradient is essentially zero are compared on an absolute scale.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Coordinates whose relative error is within the requested tolerance.
    pub within_tolerance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    /// Fraction of checked coordinates within tolerance, over all inputs.
    pub fn fraction_within(&self) -> f64 {
        let checked: usize = self.inputs.iter().map(|r| r.checked).sum();
        let ok: usize = self.inputs.iter().map(|r| r.within_tolerance).sum();
        if checked == 0 {
            1.0
        } else {
            ok as f64 / checked as f64
        }
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= self.tolerance
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Compares the reverse-mode gradient of the scalar program `f` with central
/// differences of step `step`, evaluated in 64-bit.
///
/// With `max_coords`, at most that many evenly spaced coordinates of each
/// input are probed.
pub fn grad_check<F>(
    f: F,
    inputs: &[Tensor<f64>],
    step: f64,
    tolerance: f64,
    max_coords: Option<usize>,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, AutodiffError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;

    let mut work = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());
    for (k, &v) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let analytic = g.grad(v).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let count = max_coords.map_or(n, |c| c.min(n));
        let mut report = InputReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0, within_tolerance: 0 };
        for c in 0..count {
            let j = if count == n { c } else { c * n / count };
            let x0 = work[k].data()[j];
            work[k].data_mut()[j] = x0 + step;
            let plus = eval(&work)?;
            work[k].data_mut()[j] = x0 - step;
            let minus = eval(&work)?;
            work[k].data_mut()[j] = x0;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = rel_error(analytic[j], numeric);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.max_abs_error = report.max_abs_error.max((analytic[j] - numeric).abs());
            report.checked += 1;
            if rel <= tolerance {
                report.within_tolerance += 1;
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport { inputs: reports, tolerance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Fixed random projection so vector-valued ops reduce to a scalar with
    /// non-uniform upstream gradients.
    fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var, AutodiffError> {
        let w = random(g.shape(y), &mut ChaCha8Rng::seed_from_u64(seed));
        let w = g.input(w);
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    }

    fn check(
        f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>,
        shapes: &[&[usize]],
        seed: u64,
    ) -> GradCheckReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<_> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        grad_check(f, &inputs, 1e-4, 1e-4, None).unwrap()
    }

    #[test]
    fn identity_program_is_exact() {
        let x = Tensor::from_f64(&[4], &[1.0, -2.0, 3.0, 0.5]).unwrap();
        let r = grad_check(|g, v| Ok(g.sum(v[0])), &[x], 2f64.powi(-13), 0.0, None).unwrap();
        assert_eq!(r.max_rel_error(), 0.0);
    }

    #[test]
    fn primitives_match_finite_differences() {
        type P = fn(&mut Graph<f64>, &[Var]) -> Result<Var, AutodiffError>;
        let cases: Vec<(&str, P, Vec<&[usize]>)> = vec![
            ("matmul", |g, v| { let y = g.matmul(v[0], v[1])?; project(g, y, 1) }, vec![&[3, 4], &[4, 5]]),
            ("matmul_tt", |g, v| { let y = g.matmul_t(v[0], v[1], true, true)?; project(g, y, 1) }, vec![&[4, 3], &[5, 4]]),
            ("bmm", |g, v| { let y = g.matmul_t(v[0], v[1], false, true)?; project(g, y, 2) }, vec![&[2, 3, 4], &[2, 5, 4]]),
            ("bmm_shared", |g, v| { let y = g.matmul(v[0], v[1])?; project(g, y, 2) }, vec![&[2, 3, 4], &[4, 2]]),
            ("add", |g, v| { let y = g.add(v[0], v[1])?; let y = g.mul(y, y)?; project(g, y, 3) }, vec![&[3, 4], &[4]]),
            ("sub", |g, v| { let y = g.sub(v[0], v[1])?; let y = g.mul(y, y)?; project(g, y, 3) }, vec![&[3, 4], &[4]]),
            ("mul", |g, v| { let y = g.mul(v[0], v[1])?; project(g, y, 4) }, vec![&[2, 3, 4], &[3, 4]]),
            ("scale", |g, v| { let y = g.scale(v[0], -1.7); project(g, y, 5) }, vec![&[6]]),
            ("transpose", |g, v| { let y = g.transpose(v[0])?; project(g, y, 6) }, vec![&[2, 3, 4]]),
            ("permute", |g, v| { let y = g.permute(v[0], &[1, 2, 0])?; project(g, y, 6) }, vec![&[2, 3, 4]]),
            ("reshape", |g, v| { let y = g.reshape(v[0], &[6, 2])?; let y = g.mul(y, y)?; project(g, y, 7) }, vec![&[3, 4]]),
            ("concat", |g, v| { let y = g.concat(&[v[0], v[1]], 1)?; let y = g.mul(y, y)?; project(g, y, 8) }, vec![&[2, 3, 2], &[2, 1, 2]]),
            ("slice", |g, v| { let y = g.slice(v[0], 1, 1, 3)?; let y = g.mul(y, y)?; project(g, y, 9) }, vec![&[2, 4, 3]]),
            ("sum", |g, v| { let y = g.mul(v[0], v[0])?; Ok(g.sum(y)) }, vec![&[5]]),
            ("mean", |g, v| { let y = g.mul(v[0], v[0])?; Ok(g.mean(y)) }, vec![&[5, 2]]),
            ("max_over_axis", |g, v| { let y = g.max_over_axis(v[0], 1)?; project(g, y, 10) }, vec![&[3, 6, 4]]),
            ("softmax", |g, v| { let y = g.softmax(v[0], 1)?; project(g, y, 11) }, vec![&[3, 5, 2]]),
            ("layer_norm", |g, v| { let y = g.layer_norm(v[0], 1e-5)?; project(g, y, 12) }, vec![&[4, 8]]),
            ("gelu", |g, v| { let y = g.gelu(v[0]); project(g, y, 13) }, vec![&[20]]),
            ("gather_rows", |g, v| { let y = g.gather_rows(v[0], &[2, 0, 2, 1])?; project(g, y, 14) }, vec![&[3, 4]]),
            ("cross_entropy", |g, v| g.cross_entropy(v[0], &[1, 0, 3]), vec![&[3, 4]]),
            ("chamfer", |g, v| { let y = g.chamfer(v[0], v[1])?; project(g, y, 15) }, vec![&[2, 7, 3], &[2, 5, 3]]),
        ];
        for (name, f, shapes) in cases {
            let r = check(f, &shapes, 42);
            assert!(r.passed(), "{name}: {r:?}");
        }
    }

    #[test]
    fn three_layer_mlp() {
        let f = |g: &mut Graph<f64>, v: &[Var]| -> Result<Var, AutodiffError> {
            let mut h = v[0];
            for l in 0..3 {
                h = g.matmul(h, v[1 + 2 * l])?;
                h = g.add(h, v[2 + 2 * l])?;
                if l < 2 {
                    h = g.gelu(h);
                }
            }
            g.cross_entropy(h, &[0, 2, 1, 2, 0])
        };
        let r = check(f, &[&[5, 6], &[6, 8], &[8], &[8, 8], &[8], &[8, 3], &[3]], 7);
        assert!(r.fraction_within() >= 0.99, "{r:?}");
    }
}
