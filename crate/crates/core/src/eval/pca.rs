use serde::{Deserialize, Serialize};

use crate::error::{GamaError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaResult {
    pub mean: Vec<f64>,
    /// Top two eigenvalues of the sample covariance, descending.
    pub eigenvalues: [f64; 2],
    /// Orthonormal principal directions matching `eigenvalues`.
    pub components: [Vec<f64>; 2],
    /// Share of total variance carried by each component.
    pub explained_ratio: [f64; 2],
    pub coords: Vec<[f64; 2]>,
}

fn covariance(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len();
    let k = rows[0].len();
    let mut mean = vec![0.0; k];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; k * k];
    for r in rows {
        let d: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..k {
            for j in i..k {
                cov[i * k + j] += d[i] * d[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..k {
        for j in i..k {
            cov[i * k + j] /= denom;
            cov[j * k + i] = cov[i * k + j];
        }
    }
    (mean, cov)
}

fn matvec(a: &[f64], k: usize, v: &[f64]) -> Vec<f64> {
    (0..k)
        .map(|i| (0..k).map(|j| a[i * k + j] * v[j]).sum())
        .collect()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
    n
}

fn orthogonalize(v: &mut [f64], against: &[Vec<f64>]) {
    for u in against {
        let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
        for (x, y) in v.iter_mut().zip(u) {
            *x -= d * y;
        }
    }
}

/// Leading eigenpair of the symmetric PSD matrix restricted to the complement
/// of `found`, by power iteration.
fn power_iteration(cov: &[f64], k: usize, found: &[Vec<f64>]) -> (f64, Vec<f64>) {
    // Deterministic start with distinct weights so no direction is missed by symmetry.
    let mut v: Vec<f64> = (0..k)
        .map(|i| 1.0 + 0.1 * i as f64 + 0.01 * (i * i) as f64)
        .collect();
    orthogonalize(&mut v, found);
    if normalize(&mut v) == 0.0 {
        v = vec![0.0; k];
        v[found.len() % k] = 1.0;
        orthogonalize(&mut v, found);
        normalize(&mut v);
    }
    let mut lambda = 0.0;
    for _ in 0..200_000 {
        let mut w = matvec(cov, k, &v);
        orthogonalize(&mut w, found);
        if normalize(&mut w) == 0.0 {
            return (0.0, v);
        }
        let next: f64 = matvec(cov, k, &w).iter().zip(&w).map(|(a, b)| a * b).sum();
        let delta: f64 = w
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        v = w;
        let settled = (next - lambda).abs() <= 1e-15 * next.abs().max(1e-300) && delta < 1e-10;
        lambda = next;
        if settled {
            break;
        }
    }
    (lambda.max(0.0), v)
}

/// Mean-centred PCA onto the top two covariance eigenvectors.
pub fn pca_top2(rows: &[Vec<f64>]) -> Result<PcaResult> {
    if rows.len() < 3 {
        return Err(GamaError::Data(format!(
            "PCA needs at least 3 rows, got {}",
            rows.len()
        )));
    }
    let k = rows[0].len();
    if k < 2 || rows.iter().any(|r| r.len() != k) {
        return Err(GamaError::Data(
            "PCA rows must share a width of at least 2".into(),
        ));
    }
    let (mean, cov) = covariance(rows);
    let total: f64 = (0..k).map(|i| cov[i * k + i]).sum();
    if total <= 0.0 {
        return Err(GamaError::Data(
            "PCA input has no variance: all rows are identical".into(),
        ));
    }
    let (l1, v1) = power_iteration(&cov, k, &[]);
    let (l2, v2) = power_iteration(&cov, k, std::slice::from_ref(&v1));
    let coords = rows
        .iter()
        .map(|r| {
            let d: Vec<f64> = r.iter().zip(&mean).map(|(v, m)| v - m).collect();
            [
                d.iter().zip(&v1).map(|(a, b)| a * b).sum(),
                d.iter().zip(&v2).map(|(a, b)| a * b).sum(),
            ]
        })
        .collect();
    Ok(PcaResult {
        mean,
        eigenvalues: [l1, l2],
        components: [v1, v2],
        explained_ratio: [l1 / total, l2 / total],
        coords,
    })
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations, descending.
/// Kept as an independent cross-check for the power-iteration path.
pub fn jacobi_eigenvalues(matrix: &[f64], k: usize) -> Vec<f64> {
    let mut a = matrix.to_vec();
    for _ in 0..100 {
        let off: f64 = (0..k)
            .flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * k + j].powi(2))
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..k {
            for q in p + 1..k {
                let apq = a[p * k + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * k + q] - a[p * k + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for r in 0..k {
                    let (arp, arq) = (a[r * k + p], a[r * k + q]);
                    a[r * k + p] = c * arp - s * arq;
                    a[r * k + q] = s * arp + c * arq;
                }
                for r in 0..k {
                    let (apr, aqr) = (a[p * k + r], a[q * k + r]);
                    a[p * k + r] = c * apr - s * aqr;
                    a[q * k + r] = s * apr + c * aqr;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..k).map(|i| a[i * k + i]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    eig
}

/// PCA of clean and perturbed embeddings in one shared plane.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaExport {
    pub result: PcaResult,
    /// `false` for clean rows, `true` for perturbed rows, aligned with `result.coords`.
    pub perturbed: Vec<bool>,
}

impl PcaExport {
    /// `x,y,group` rows with six decimals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,group\n");
        for (c, &p) in self.result.coords.iter().zip(&self.perturbed) {
            s.push_str(&format!(
                "{:.6},{:.6},{}\n",
                c[0],
                c[1],
                if p { "perturbed" } else { "clean" }
            ));
        }
        s
    }
}

pub fn pca_embed_export(clean: &[Vec<f32>], perturbed: &[Vec<f32>]) -> Result<PcaExport> {
    let rows: Vec<Vec<f64>> = clean
        .iter()
        .chain(perturbed)
        .map(|r| r.iter().map(|&v| v as f64).collect())
        .collect();
    let result = pca_top2(&rows)?;
    let flags = std::iter::repeat_n(false, clean.len())
        .chain(std::iter::repeat_n(true, perturbed.len()))
        .collect();
    Ok(PcaExport {
        result,
        perturbed: flags,
    })
}

/// Distance between the clean and perturbed centroids in the PCA plane.
pub fn centroid_separation(coords: &[[f64; 2]], perturbed: &[bool]) -> Result<f64> {
    let mut sums = [[0.0f64; 2]; 2];
    let mut counts = [0usize; 2];
    for (c, &p) in coords.iter().zip(perturbed) {
        let g = p as usize;
        sums[g][0] += c[0];
        sums[g][1] += c[1];
        counts[g] += 1;
    }
    if counts.contains(&0) {
        return Err(GamaError::Data(
            "both clean and perturbed groups are needed".into(),
        ));
    }
    let centre = |g: usize| [sums[g][0] / counts[g] as f64, sums[g][1] / counts[g] as f64];
    let (a, b) = (centre(0), centre(1));
    Ok(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt())
}
