//! Small deterministic Nelder–Mead simplex search on a box.
//!
//! Used by the stiffness identification, whose inner objective (an
//! equilibrium solve) makes gradients too noisy for quasi-Newton outer
//! loops. Reflections are clamped into the box so iterates stay feasible.

pub(crate) struct NmOptions {
    pub max_iters: usize,
    /// Converged when the simplex diameter drops below this.
    pub xtol: f64,
    /// Converged when the objective spread drops below this.
    pub ftol: f64,
}

impl Default for NmOptions {
    fn default() -> Self {
        NmOptions {
            max_iters: 300,
            xtol: 1e-7,
            ftol: 1e-16,
        }
    }
}

pub(crate) struct NmResult {
    pub x: Vec<f64>,
    pub fx: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn clamp_into(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

pub(crate) fn minimize<F>(
    mut f: F,
    x0: &[f64],
    scale: &[f64],
    lo: &[f64],
    hi: &[f64],
    opts: &NmOptions,
) -> NmResult
where
    F: FnMut(&[f64]) -> f64,
{
    let n = x0.len();
    let mut simplex: Vec<Vec<f64>> = Vec::with_capacity(n + 1);
    let mut start = x0.to_vec();
    clamp_into(&mut start, lo, hi);
    simplex.push(start.clone());
    for i in 0..n {
        let mut v = start.clone();
        // Step towards the interior if the vertex would leave the box.
        if v[i] + scale[i] <= hi[i] {
            v[i] += scale[i];
        } else {
            v[i] -= scale[i];
        }
        clamp_into(&mut v, lo, hi);
        simplex.push(v);
    }
    let mut fv: Vec<f64> = simplex.iter().map(|v| f(v)).collect();

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iters {
        iterations += 1;
        // Order ascending by objective.
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| fv[a].partial_cmp(&fv[b]).unwrap_or(std::cmp::Ordering::Equal));
        let reorder: Vec<Vec<f64>> = idx.iter().map(|&i| simplex[i].clone()).collect();
        let forder: Vec<f64> = idx.iter().map(|&i| fv[i]).collect();
        simplex = reorder;
        fv = forder;

        let diam = simplex[1..]
            .iter()
            .map(|v| {
                v.iter()
                    .zip(simplex[0].iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if diam < opts.xtol || (fv[n] - fv[0]).abs() < opts.ftol {
            converged = true;
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; n];
        for v in &simplex[..n] {
            for i in 0..n {
                centroid[i] += v[i] / n as f64;
            }
        }

        let mut reflected: Vec<f64> = (0..n)
            .map(|i| centroid[i] + alpha * (centroid[i] - simplex[n][i]))
            .collect();
        clamp_into(&mut reflected, lo, hi);
        let fr = f(&reflected);

        if fr < fv[0] {
            let mut expanded: Vec<f64> = (0..n)
                .map(|i| centroid[i] + gamma * (reflected[i] - centroid[i]))
                .collect();
            clamp_into(&mut expanded, lo, hi);
            let fe = f(&expanded);
            if fe < fr {
                simplex[n] = expanded;
                fv[n] = fe;
            } else {
                simplex[n] = reflected;
                fv[n] = fr;
            }
        } else if fr < fv[n - 1] {
            simplex[n] = reflected;
            fv[n] = fr;
        } else {
            let mut contracted: Vec<f64> = if fr < fv[n] {
                (0..n)
                    .map(|i| centroid[i] + rho * (reflected[i] - centroid[i]))
                    .collect()
            } else {
                (0..n)
                    .map(|i| centroid[i] + rho * (simplex[n][i] - centroid[i]))
                    .collect()
            };
            clamp_into(&mut contracted, lo, hi);
            let fc = f(&contracted);
            if fc < fv[n].min(fr) {
                simplex[n] = contracted;
                fv[n] = fc;
            } else {
                // Shrink towards the best vertex.
                for k in 1..=n {
                    for i in 0..n {
                        simplex[k][i] = simplex[0][i] + sigma * (simplex[k][i] - simplex[0][i]);
                    }
                    fv[k] = f(&simplex[k]);
                }
            }
        }
    }

    let mut best = 0;
    for k in 1..=n {
        if fv[k] < fv[best] {
            best = k;
        }
    }
    NmResult {
        x: simplex[best].clone(),
        fx: fv[best],
        iterations,
        converged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic_bowl() {
        let f = |x: &[f64]| (x[0] - 1.5).powi(2) + 3.0 * (x[1] + 0.5).powi(2);
        let r = minimize(
            f,
            &[0.0, 0.0],
            &[0.5, 0.5],
            &[-5.0, -5.0],
            &[5.0, 5.0],
            &NmOptions::default(),
        );
        assert!(r.converged);
        assert!((r.x[0] - 1.5).abs() < 1e-5);
        assert!((r.x[1] + 0.5).abs() < 1e-5);
    }

    #[test]
    fn respects_bounds() {
        let f = |x: &[f64]| (x[0] + 10.0).powi(2);
        let r = minimize(
            f,
            &[0.5, 0.0],
            &[0.25, 0.25],
            &[0.0, -1.0],
            &[1.0, 1.0],
            &NmOptions::default(),
        );
        assert!(r.x[0] >= 0.0 && r.x[0] <= 1.0);
        assert!((r.x[0] - 0.0).abs() < 1e-6);
    }

    #[test]
    fn deterministic_across_runs() {
        let f = |x: &[f64]| x[0].powi(2) + x[1].powi(2) + (x[0] * x[1]).sin();
        let run = || {
            minimize(
                f,
                &[1.0, -1.0],
                &[0.3, 0.3],
                &[-2.0, -2.0],
                &[2.0, 2.0],
                &NmOptions::default(),
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a.x, b.x);
        assert_eq!(a.fx, b.fx);
    }
}
