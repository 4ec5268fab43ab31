//! Continual-learning metrics over the lower-triangular accuracy matrix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `A[i][j]`: accuracy on task `j` after training through task `i`, for `j <= i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AccuracyMatrix {
    rows: Vec<Vec<f64>>,
}

impl AccuracyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds from complete lower-triangular rows (row `i` has `i + 1` entries).
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let mut m = Self::new();
        for r in rows {
            m.push_row(r)?;
        }
        Ok(m)
    }

    pub fn push_row(&mut self, row: Vec<f64>) -> Result<()> {
        let i = self.rows.len();
        if row.len() != i + 1 {
            return Err(Error::IncompleteMatrix(format!(
                "row {i} needs {} entries, got {}",
                i + 1,
                row.len()
            )));
        }
        if let Some(bad) = row.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::IncompleteMatrix(format!("accuracy {bad} outside [0, 1]")));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Tasks trained so far.
    pub fn tasks(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.rows.get(i).and_then(|r| r.get(j)).copied()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.rows.iter().enumerate().map(|(i, r)| r[i]).collect()
    }

    fn final_row(&self) -> Result<&[f64]> {
        self.rows
            .last()
            .map(Vec::as_slice)
            .ok_or_else(|| Error::IncompleteMatrix("no tasks evaluated".into()))
    }

    /// CSV with header `after,task_1..task_T`; entries above the diagonal are empty.
    pub fn to_csv_string(&self) -> String {
        let t = self.tasks();
        let mut out = String::from("after");
        for j in 1..=t {
            out.push_str(&format!(",task_{j}"));
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&format!("task_{}", i + 1));
            for j in 0..t {
                out.push(',');
                if let Some(a) = row.get(j) {
                    out.push_str(&format!("{a}"));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut rows = Vec::new();
        for rec in reader.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .filter(|s| !s.is_empty())
                .map(|s| s.parse::<f64>().map_err(|e| Error::IncompleteMatrix(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }
}

/// Mean final-row accuracy.
pub fn acc(a: &AccuracyMatrix) -> Result<f64> {
    let last = a.final_row()?;
    Ok(last.iter().sum::<f64>() / last.len() as f64)
}

/// Mean of `A[T-1][j] - A[j][j]` over `j < T-1`.
pub fn bwt(a: &AccuracyMatrix) -> Result<f64> {
    let t = a.tasks();
    if t < 2 {
        return Err(Error::SingleTask);
    }
    let last = a.final_row()?;
    let s: f64 = (0..t - 1).map(|j| last[j] - a.rows[j][j]).sum();
    Ok(s / (t - 1) as f64)
}

/// Mean of `A[j][j] - b_j` over `j >= 1`; `baselines[j]` is task `j`'s single-task accuracy.
pub fn fwt(a: &AccuracyMatrix, baselines: &[f64]) -> Result<f64> {
    let t = a.tasks();
    if t < 2 {
        return Err(Error::SingleTask);
    }
    let mut s = 0.0;
    for j in 1..t {
        let b = baselines.get(j).ok_or(Error::MissingBaseline(j))?;
        s += a.rows[j][j] - b;
    }
    Ok(s / (t - 1) as f64)
}

/// `F_j = A[j][j] - A[T-1][j]` for `j < T-1`.
pub fn forgetting(a: &AccuracyMatrix) -> Result<Vec<f64>> {
    let last = a.final_row()?;
    let t = a.tasks();
    Ok((0..t - 1).map(|j| a.rows[j][j] - last[j]).collect())
}

/// Means over consecutive blocks of `block` entries; the last block may be shorter.
pub fn interval_forgetting(f: &[f64], block: usize) -> Vec<f64> {
    assert!(block >= 1, "block must be >= 1");
    f.chunks(block)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

/// `(1 / lambda_stab) * sum(weights)`.
pub fn forgetting_bound(lambda_stab: f64, weights: &[f64]) -> f64 {
    weights.iter().sum::<f64>() / lambda_stab
}

/// Transitions whose `D_0.5(q^{t-1} || q^t)` exceeds [`forgetting_bound`].
pub fn forgetting_bound_check(div_history: &[f64], lambda_stab: f64, weights: &[f64]) -> usize {
    let bound = forgetting_bound(lambda_stab, weights);
    div_history.iter().filter(|&&d| !(d <= bound)).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc: f64,
    /// Absent for single-task streams.
    pub bwt: Option<f64>,
    /// Absent without baselines or for single-task streams.
    pub fwt: Option<f64>,
    pub per_task_forgetting: Vec<f64>,
    pub interval_forgetting: Vec<f64>,
    pub bound_violations: usize,
    pub bound_transitions: usize,
}

impl MetricsReport {
    pub fn compute(
        a: &AccuracyMatrix,
        baselines: Option<&[f64]>,
        interval: usize,
        bound_divergences: &[f64],
        lambda_stab: f64,
        weights: &[f64],
    ) -> Result<Self> {
        let f = forgetting(a)?;
        let multi = a.tasks() >= 2;
        Ok(Self {
            acc: acc(a)?,
            bwt: if multi { Some(bwt(a)?) } else { None },
            fwt: match baselines {
                Some(b) if multi => Some(fwt(a, b)?),
                _ => None,
            },
            interval_forgetting: interval_forgetting(&f, interval.max(1)),
            per_task_forgetting: f,
            bound_violations: forgetting_bound_check(bound_divergences, lambda_stab, weights),
            bound_transitions: bound_divergences.len(),
        })
    }

    pub fn mean_forgetting(&self) -> f64 {
        if self.per_task_forgetting.is_empty() {
            0.0
        } else {
            self.per_task_forgetting.iter().sum::<f64>() / self.per_task_forgetting.len() as f64
        }
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergences::{renyi_1d, renyi_quadrature_oracle, ArgumentOrder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, t: usize) -> AccuracyMatrix {
        AccuracyMatrix::from_rows((0..t).map(|i| (0..=i).map(|_| rng.gen_range(0.0..=1.0)).collect()).collect()).unwrap()
    }

    #[test]
    fn acc_examples() {
        assert_eq!(acc(&AccuracyMatrix::from_rows(vec![vec![0.9]]).unwrap()).unwrap(), 0.9);
        let a = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.6]]).unwrap();
        assert!((acc(&a).unwrap() - 0.7).abs() < 1e-15);
        assert!(matches!(acc(&AccuracyMatrix::new()), Err(Error::IncompleteMatrix(_))));
        assert!(AccuracyMatrix::from_rows(vec![vec![0.9, 0.1]]).is_err());
    }

    #[test]
    fn bwt_and_fwt_examples() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.85]]).unwrap();
        assert!((bwt(&a).unwrap() + 0.1).abs() < 1e-12);
        let same = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.9, 0.85]]).unwrap();
        assert_eq!(bwt(&same).unwrap(), 0.0);
        assert!(matches!(bwt(&AccuracyMatrix::from_rows(vec![vec![0.5]]).unwrap()), Err(Error::SingleTask)));

        let b = AccuracyMatrix::from_rows(vec![vec![0.7], vec![0.6, 0.9]]).unwrap();
        assert!((fwt(&b, &[0.7, 0.8]).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(fwt(&b, &[0.0, 0.9]).unwrap(), 0.0);
        assert!(matches!(fwt(&b, &[0.7]), Err(Error::MissingBaseline(1))));
    }

    #[test]
    fn forgetting_examples() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.7], vec![0.7, 0.7, 0.5]]).unwrap();
        let f = forgetting(&a).unwrap();
        assert!((f[0] - 0.2).abs() < 1e-12);
        assert!((f[1] - 0.0).abs() < 1e-12);
        let flat = AccuracyMatrix::from_rows(vec![vec![0.5], vec![0.5, 0.6]]).unwrap();
        assert_eq!(forgetting(&flat).unwrap(), vec![0.0]);
    }

    #[test]
    fn random_matrices_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..200 {
            let t = rng.gen_range(2..12);
            let a = random_matrix(&mut rng, t);
            let base: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut s_acc = 0.0;
            let mut s_bwt = 0.0;
            let mut s_fwt = 0.0;
            for j in 0..t {
                s_acc += a.get(t - 1, j).unwrap();
                if j < t - 1 {
                    s_bwt += a.get(t - 1, j).unwrap() - a.get(j, j).unwrap();
                }
                if j >= 1 {
                    s_fwt += a.get(j, j).unwrap() - base[j];
                }
            }
            assert!((acc(&a).unwrap() - s_acc / t as f64).abs() < 1e-12);
            assert!((bwt(&a).unwrap() - s_bwt / (t - 1) as f64).abs() < 1e-12);
            assert!((fwt(&a, &base).unwrap() - s_fwt / (t - 1) as f64).abs() < 1e-12);
            let f = forgetting(&a).unwrap();
            for (j, fj) in f.iter().enumerate() {
                assert_eq!(*fj, a.get(j, j).unwrap() - a.get(t - 1, j).unwrap());
            }
        }
    }

    #[test]
    fn bwt_is_negated_mean_forgetting_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let t = rng.gen_range(2..20);
            let a = random_matrix(&mut rng, t);
            let f = forgetting(&a).unwrap();
            let mean_f = f.iter().sum::<f64>() / f.len() as f64;
            assert_eq!(bwt(&a).unwrap(), -mean_f);
        }
    }

    #[test]
    fn interval_examples() {
        let f = [0.1, 0.3, 0.2, 0.6, 0.5];
        assert_eq!(interval_forgetting(&f, 1), f.to_vec());
        let all = interval_forgetting(&f, 5);
        assert_eq!(all.len(), 1);
        assert!((all[0] - 0.34).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.gen_range(1..40);
            let block = rng.gen_range(1..10);
            let f: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let got = interval_forgetting(&f, block);
            let mut start = 0;
            let mut k = 0;
            while start < n {
                let end = (start + block).min(n);
                let mut s = 0.0;
                for v in &f[start..end] {
                    s += v;
                }
                assert!((got[k] - s / (end - start) as f64).abs() < 1e-12);
                start = end;
                k += 1;
            }
            assert_eq!(k, got.len());
        }
    }

    #[test]
    fn bound_examples() {
        let w = [0.25; 4];
        assert!((forgetting_bound(0.7, &w) - 1.0 / 0.7).abs() < 1e-12);
        assert!((forgetting_bound(0.7, &w) - 1.4286).abs() < 1e-4);
        assert_eq!(forgetting_bound_check(&[0.0, 0.0], 0.7, &w), 0);

        // N(0,1) vs N(m,1): D_0.5 = m^2/4, so m = 2*sqrt(2) gives exactly 2.0.
        let m = 2.0 * 2f64.sqrt();
        let d = renyi_1d(m, 1.0, 0.0, 1.0, 0.5, ArgumentOrder::Reverse).unwrap();
        let quad = renyi_quadrature_oracle((m, 1.0), (0.0, 1.0), 0.5, 40.0, 40001, ArgumentOrder::Reverse).unwrap();
        assert!((quad - 2.0).abs() < 1e-8);
        assert!((d - 2.0).abs() < 1e-12);
        assert_eq!(forgetting_bound_check(&[d, 0.1], 0.7, &w), 1);
    }

    #[test]
    fn csv_round_trip_and_layout() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.8, 0.75]]).unwrap();
        let text = a.to_csv_string();
        assert_eq!(text, "after,task_1,task_2\ntask_1,0.9,\ntask_2,0.8,0.75\n");
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        a.write_csv(&p).unwrap();
        assert_eq!(AccuracyMatrix::read_csv(&p).unwrap(), a);
    }

    #[test]
    fn report_compute() {
        let a = AccuracyMatrix::from_rows(vec![vec![0.9], vec![0.7, 0.8]]).unwrap();
        let r = MetricsReport::compute(&a, Some(&[0.9, 0.85]), 20, &[0.1], 0.7, &[1.0]).unwrap();
        assert!((r.acc - 0.75).abs() < 1e-12);
        assert!((r.bwt.unwrap() + 0.2).abs() < 1e-12);
        assert!((r.fwt.unwrap() + 0.05).abs() < 1e-12);
        assert_eq!(r.bound_violations, 0);
        let single = MetricsReport::compute(&AccuracyMatrix::from_rows(vec![vec![0.5]]).unwrap(), None, 20, &[], 0.7, &[1.0]).unwrap();
        assert_eq!(single.bwt, None);
        assert_eq!(single.acc, 0.5);
    }
}
