#![allow(clippy::needless_range_loop)]

//! Nonnegative least squares via the Lawson-Hanson active-set method on the
//! normal equations. Problems here are tiny (a handful of coefficients), so
//! dense Gaussian elimination on the passive-set subsystem is plenty.

/// Minimize ||A x - y||^2 subject to x >= 0. `rows` are the rows of A, all
/// of length `n`. Columns are internally rescaled to unit norm; all-zero
/// columns get coefficient 0.
pub fn nnls(rows: &[Vec<f64>], y: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(rows.len(), y.len());
    if n == 0 {
        return Vec::new();
    }

    let mut scale = vec![0.0f64; n];
    for row in rows {
        debug_assert_eq!(row.len(), n);
        for (j, v) in row.iter().enumerate() {
            scale[j] += v * v;
        }
    }
    for s in &mut scale {
        *s = s.sqrt();
        if *s == 0.0 {
            *s = 1.0;
        }
    }

    // Normal equations on the rescaled columns.
    let mut ata = vec![vec![0.0f64; n]; n];
    let mut aty = vec![0.0f64; n];
    for (row, &yi) in rows.iter().zip(y) {
        for j in 0..n {
            let vj = row[j] / scale[j];
            aty[j] += vj * yi;
            for k in j..n {
                ata[j][k] += vj * row[k] / scale[k];
            }
        }
    }
    for j in 0..n {
        for k in 0..j {
            ata[j][k] = ata[k][j];
        }
    }

    let tol = 1e-10 * (1.0 + aty.iter().fold(0.0f64, |m, v| m.max(v.abs())));
    let mut x = vec![0.0f64; n];
    let mut passive = vec![false; n];

    for _ in 0..(3 * n + 10) {
        // Negative gradient w = A'y - A'A x.
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if passive[j] {
                continue;
            }
            let g: f64 = aty[j] - ata[j].iter().zip(&x).map(|(a, xi)| a * xi).sum::<f64>();
            if g > tol && best.is_none_or(|(_, bg)| g > bg) {
                best = Some((j, g));
            }
        }
        let Some((enter, _)) = best else { break };
        passive[enter] = true;

        loop {
            let support: Vec<usize> = (0..n).filter(|j| passive[*j]).collect();
            let z = solve_subsystem(&ata, &aty, &support);
            let Some(z) = z else {
                // Singular subsystem: the entering column adds nothing new.
                passive[enter] = false;
                break;
            };
            if z.iter().all(|v| *v > tol) {
                for (idx, &j) in support.iter().enumerate() {
                    x[j] = z[idx];
                }
                break;
            }
            // Step from x toward z until the first passive variable hits 0.
            let mut alpha = f64::INFINITY;
            for (idx, &j) in support.iter().enumerate() {
                if z[idx] <= tol {
                    let denom = x[j] - z[idx];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    } else {
                        alpha = 0.0;
                    }
                }
            }
            let alpha = alpha.clamp(0.0, 1.0);
            for (idx, &j) in support.iter().enumerate() {
                x[j] += alpha * (z[idx] - x[j]);
                if x[j] <= tol {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|p| *p) {
                break;
            }
        }
    }

    for j in 0..n {
        x[j] /= scale[j];
    }
    x
}

/// Solve ata[support][support] z = aty[support] by Gaussian elimination with
/// partial pivoting. Returns None when the subsystem is singular.
fn solve_subsystem(ata: &[Vec<f64>], aty: &[f64], support: &[usize]) -> Option<Vec<f64>> {
    let k = support.len();
    let mut m = vec![vec![0.0f64; k + 1]; k];
    for (r, &i) in support.iter().enumerate() {
        for (c, &j) in support.iter().enumerate() {
            m[r][c] = ata[i][j];
        }
        m[r][k] = aty[i];
    }
    for col in 0..k {
        let pivot_row = (col..k)
            .max_by(|a, b| m[*a][col].abs().total_cmp(&m[*b][col].abs()))
            .expect("non-empty");
        if m[pivot_row][col].abs() < 1e-12 {
            return None;
        }
        m.swap(col, pivot_row);
        for r in 0..k {
            if r == col {
                continue;
            }
            let f = m[r][col] / m[col][col];
            for c in col..=k {
                m[r][c] -= f * m[col][c];
            }
        }
    }
    Some((0..k).map(|r| m[r][k] / m[r][r]).collect())
}
