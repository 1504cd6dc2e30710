//! Derivative-free simplex minimization with optional lower bounds.
//!
//! A plain Nelder-Mead implementation (reflection 1, expansion 2,
//! contraction 0.5, shrink 0.5). Coordinates with a lower bound are clamped
//! before every objective evaluation, which is how the covariance-factor
//! diagonal is kept nonnegative. Fully deterministic.

/// Stopping rules for [`minimize`].
#[derive(Debug, Clone, Copy)]
pub struct Options {
    /// Total objective-evaluation-driven iteration budget.
    pub max_iter: usize,
    /// Stop when the simplex's best-worst spread falls below this.
    pub tol: f64,
    /// Offset used to build the initial simplex around the start point.
    pub init_step: f64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            max_iter: 500,
            tol: 1e-8,
            init_step: 0.25,
        }
    }
}

/// Result of a minimization run.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn clamp(x: &mut [f64], lower: &[Option<f64>]) {
    for (xi, lo) in x.iter_mut().zip(lower) {
        if let Some(lo) = lo {
            if *xi < *lo {
                *xi = *lo;
            }
        }
    }
}

/// Minimizes `f` starting from `x0`. `lower[i]` (when present) is a hard
/// lower bound for coordinate `i`. After the first run converges, one
/// restart with a tighter simplex polishes the solution within the same
/// iteration budget.
pub fn minimize(
    mut f: impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    lower: &[Option<f64>],
    opts: &Options,
) -> Outcome {
    assert_eq!(x0.len(), lower.len(), "bound per coordinate");
    let mut total_iterations = 0;
    let first = run_simplex(&mut f, x0, lower, opts.init_step, opts, &mut total_iterations);
    if !first.converged || total_iterations >= opts.max_iter {
        return Outcome {
            iterations: total_iterations,
            ..first
        };
    }
    let polish = run_simplex(
        &mut f,
        &first.x,
        lower,
        opts.init_step / 10.0,
        opts,
        &mut total_iterations,
    );
    let best = if polish.value < first.value { polish } else { first };
    Outcome {
        iterations: total_iterations,
        ..best
    }
}

fn run_simplex(
    f: &mut impl FnMut(&[f64]) -> f64,
    x0: &[f64],
    lower: &[Option<f64>],
    step: f64,
    opts: &Options,
    iterations: &mut usize,
) -> Outcome {
    let dim = x0.len();
    let eval = |f: &mut dyn FnMut(&[f64]) -> f64, mut x: Vec<f64>| -> (Vec<f64>, f64) {
        clamp(&mut x, lower);
        let v = f(&x);
        (x, if v.is_nan() { f64::INFINITY } else { v })
    };

    if dim == 0 {
        let (x, value) = eval(f, x0.to_vec());
        return Outcome {
            x,
            value,
            iterations: 0,
            converged: true,
        };
    }

    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(dim + 1);
    simplex.push(eval(f, x0.to_vec()));
    for i in 0..dim {
        let mut x = x0.to_vec();
        x[i] += if x[i].abs() > 1.0 { step * x[i].abs() } else { step };
        simplex.push(eval(f, x));
    }

    let mut converged = false;
    while *iterations < opts.max_iter {
        *iterations += 1;
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("no NaN objective"));
        let spread = simplex[dim].1 - simplex[0].1;
        if spread.abs() < opts.tol {
            converged = true;
            break;
        }

        // Centroid of all but the worst vertex.
        let mut centroid = vec![0.0; dim];
        for (x, _) in &simplex[..dim] {
            for (c, xi) in centroid.iter_mut().zip(x) {
                *c += xi / dim as f64;
            }
        }
        let worst = simplex[dim].clone();
        let point = |alpha: f64| -> Vec<f64> {
            centroid
                .iter()
                .zip(&worst.0)
                .map(|(c, w)| c + alpha * (c - w))
                .collect()
        };

        let reflected = eval(f, point(1.0));
        if reflected.1 < simplex[0].1 {
            let expanded = eval(f, point(2.0));
            simplex[dim] = if expanded.1 < reflected.1 { expanded } else { reflected };
        } else if reflected.1 < simplex[dim - 1].1 {
            simplex[dim] = reflected;
        } else {
            let contracted = if reflected.1 < worst.1 {
                eval(f, point(0.5))
            } else {
                eval(f, point(-0.5))
            };
            if contracted.1 < worst.1.min(reflected.1) {
                simplex[dim] = contracted;
            } else {
                // Shrink toward the best vertex.
                let best = simplex[0].0.clone();
                for vertex in simplex.iter_mut().skip(1) {
                    let x: Vec<f64> = best
                        .iter()
                        .zip(&vertex.0)
                        .map(|(b, v)| b + 0.5 * (v - b))
                        .collect();
                    *vertex = eval(f, x);
                }
            }
        }
    }

    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("no NaN objective"));
    let (x, value) = simplex.swap_remove(0);
    Outcome {
        x,
        value,
        iterations: *iterations,
        converged,
    }
}
