//! Calibrated job-time model.
//!
//! Iteration time at parallelism degree `d` is affine in the packed adapter
//! load: `t(d) = t0(d) + tau(d) * sum_k load_k` with `load = rank * batch *
//! seq_len`. A job runs for the largest `train_steps` among its configs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CostError;
use crate::workload::LoraConfig;

/// Rejection threshold for the relative RMSE of a per-degree fit.
pub const MAX_RELATIVE_RMSE: f64 = 0.25;

/// One profiled training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub parallelism_degree: u32,
    pub packed_ranks: Vec<u32>,
    pub packed_batch_sizes: Vec<u32>,
    pub seq_len: u32,
    /// Seconds per iteration.
    pub iter_time: f64,
}

impl ProfileRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.parallelism_degree == 0 {
            return Err("parallelism_degree must be >= 1".into());
        }
        if self.packed_ranks.is_empty() || self.packed_ranks.len() != self.packed_batch_sizes.len()
        {
            return Err("ranks and batch sizes must be equal-length non-empty lists".into());
        }
        if self.packed_ranks.contains(&0) || self.packed_batch_sizes.contains(&0) {
            return Err("ranks and batch sizes must be positive".into());
        }
        if self.seq_len == 0 {
            return Err("seq_len must be >= 1".into());
        }
        if !(self.iter_time > 0.0 && self.iter_time.is_finite()) {
            return Err("iter_time must be positive".into());
        }
        Ok(())
    }

    /// Total adapter load of the packed set.
    pub fn load(&self) -> f64 {
        self.packed_ranks
            .iter()
            .zip(&self.packed_batch_sizes)
            .map(|(&r, &b)| adapter_load(r, b, self.seq_len))
            .sum()
    }
}

/// Adapter load in rank x sample x token units.
pub fn adapter_load(rank: u32, batch_size: u32, seq_len: u32) -> f64 {
    rank as f64 * batch_size as f64 * seq_len as f64
}

pub fn config_load(cfg: &LoraConfig) -> f64 {
    adapter_load(cfg.rank, cfg.batch_size, cfg.seq_len)
}

/// Fitted coefficients for one parallelism degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeFit {
    /// Seconds per iteration with no adapter load.
    pub t0: f64,
    /// Seconds per iteration per unit of adapter load.
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub residuals: Vec<f64>,
    #[serde(default)]
    pub relative_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TimeModel {
    pub degrees: BTreeMap<u32, DegreeFit>,
}

impl TimeModel {
    /// Builds a model from known `(degree, t0, tau)` triples.
    pub fn from_coefficients(
        coeffs: impl IntoIterator<Item = (u32, f64, f64)>,
    ) -> Result<Self, CostError> {
        let mut degrees = BTreeMap::new();
        for (d, t0, tau) in coeffs {
            check_coefficients(d, t0, tau)?;
            degrees.insert(
                d,
                DegreeFit {
                    t0,
                    tau,
                    residuals: Vec::new(),
                    relative_rmse: 0.0,
                },
            );
        }
        Ok(TimeModel { degrees })
    }

    pub fn fit(&self, degree: u32) -> Result<&DegreeFit, CostError> {
        self.degrees
            .get(&degree)
            .ok_or(CostError::UncalibratedDegree(degree))
    }

    pub fn is_calibrated(&self, degree: u32) -> bool {
        self.degrees.contains_key(&degree)
    }

    /// Seconds per iteration for a packed set of loads.
    pub fn iteration_time(&self, degree: u32, total_load: f64) -> Result<f64, CostError> {
        let f = self.fit(degree)?;
        Ok(f.t0 + f.tau * total_load)
    }
}

fn check_coefficients(degree: u32, t0: f64, tau: f64) -> Result<(), CostError> {
    if degree == 0 || !(t0 > 0.0 && t0.is_finite()) || !(tau >= 0.0 && tau.is_finite()) {
        return Err(CostError::NonPhysicalFit { degree, t0, tau });
    }
    Ok(())
}

/// Least-squares fit of `iter_time ~ t0 + tau * load` per degree.
pub fn calibrate_time_model(profiles: &[ProfileRecord]) -> Result<TimeModel, CostError> {
    if profiles.is_empty() {
        return Err(CostError::NoProfiles);
    }
    let mut by_degree: BTreeMap<u32, Vec<&ProfileRecord>> = BTreeMap::new();
    for p in profiles {
        p.validate().map_err(CostError::Profile)?;
        by_degree.entry(p.parallelism_degree).or_default().push(p);
    }
    let mut degrees = BTreeMap::new();
    for (degree, recs) in by_degree {
        if recs.len() < 2 {
            return Err(CostError::InsufficientRecords {
                degree,
                found: recs.len(),
            });
        }
        let xs: Vec<f64> = recs.iter().map(|r| r.load()).collect();
        let ys: Vec<f64> = recs.iter().map(|r| r.iter_time).collect();
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
        let x_scale = xs.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
        if sxx <= f64::EPSILON * x_scale * x_scale * n {
            return Err(CostError::DegenerateDesign { degree });
        }
        let mut tau = sxy / sxx;
        // Noise-free zero slopes can come out as -1e-17.
        if tau < 0.0 && tau * x_scale > -1e-9 * my {
            tau = 0.0;
        }
        let t0 = my - tau * mx;
        check_coefficients(degree, t0, tau)?;
        let residuals: Vec<f64> = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| y - (t0 + tau * x))
            .collect();
        let rmse = (residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt();
        let relative_rmse = rmse / my;
        if relative_rmse > MAX_RELATIVE_RMSE {
            return Err(CostError::FitQuality {
                degree,
                relative_rmse,
            });
        }
        log::debug!("degree {degree}: t0={t0:.6e} tau={tau:.6e} rel_rmse={relative_rmse:.3e}");
        degrees.insert(
            degree,
            DegreeFit {
                t0,
                tau,
                residuals,
                relative_rmse,
            },
        );
    }
    Ok(TimeModel { degrees })
}

/// Predicted seconds to train `configs` packed in one job at `degree`.
pub fn job_time(tm: &TimeModel, configs: &[&LoraConfig], degree: u32) -> Result<f64, CostError> {
    if configs.is_empty() {
        return Err(CostError::EmptyJob);
    }
    if let Some(c) = configs.iter().find(|c| c.train_steps == 0) {
        return Err(CostError::ZeroTrainSteps(c.id.clone()));
    }
    let steps = configs.iter().map(|c| c.train_steps).max().unwrap_or(0);
    let load: f64 = configs.iter().map(|c| config_load(c)).sum();
    Ok(tm.iteration_time(degree, load)? * steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(d: u32, ranks: &[u32], bs: &[u32], s: u32, t: f64) -> ProfileRecord {
        ProfileRecord {
            parallelism_degree: d,
            packed_ranks: ranks.to_vec(),
            packed_batch_sizes: bs.to_vec(),
            seq_len: s,
            iter_time: t,
        }
    }

    #[test]
    fn two_point_fit() {
        let tm = calibrate_time_model(&[rec(1, &[1], &[1], 1, 1.0), rec(1, &[2], &[1], 1, 1.5)])
            .unwrap();
        let f = tm.fit(1).unwrap();
        assert!((f.t0 - 0.5).abs() < 1e-12);
        assert!((f.tau - 0.5).abs() < 1e-12);
    }

    #[test]
    fn equal_loads_are_degenerate() {
        let err = calibrate_time_model(&[rec(1, &[2], &[1], 4, 1.0), rec(1, &[1], &[2], 4, 1.2)])
            .unwrap_err();
        assert_eq!(err, CostError::DegenerateDesign { degree: 1 });
    }

    #[test]
    fn single_record_is_insufficient() {
        let err = calibrate_time_model(&[rec(2, &[2], &[1], 4, 1.0)]).unwrap_err();
        assert_eq!(
            err,
            CostError::InsufficientRecords {
                degree: 2,
                found: 1
            }
        );
        assert_eq!(
            calibrate_time_model(&[]).unwrap_err(),
            CostError::NoProfiles
        );
    }

    #[test]
    fn poor_fit_is_refused() {
        let recs = [
            rec(1, &[1], &[1], 1, 1.0),
            rec(1, &[2], &[1], 1, 5.0),
            rec(1, &[3], &[1], 1, 1.0),
            rec(1, &[4], &[1], 1, 5.0),
        ];
        assert!(matches!(
            calibrate_time_model(&recs),
            Err(CostError::FitQuality { degree: 1, .. })
        ));
    }

    #[test]
    fn batch_one_to_eight_costs_ten_percent() {
        // Iteration time grows 10% when the batch goes from 1 to 8.
        let recs = [
            rec(1, &[64], &[1], 1024, 1.0),
            rec(1, &[64], &[8], 1024, 1.1),
        ];
        let tm = calibrate_time_model(&recs).unwrap();
        let f = tm.fit(1).unwrap();
        let d_load = adapter_load(64, 8, 1024) - adapter_load(64, 1, 1024);
        let ratio = f.tau * d_load / f.t0;
        assert!((ratio - 0.10).abs() < 0.005, "{ratio}");
        let t1 = tm.iteration_time(1, adapter_load(64, 1, 1024)).unwrap();
        let t8 = tm.iteration_time(1, adapter_load(64, 8, 1024)).unwrap();
        assert!(((t8 - t1) / t1 - 0.10).abs() < 1e-12);
    }

    #[test]
    fn job_time_is_affine() {
        let tm = TimeModel::from_coefficients([(1, 0.5, 0.5)]).unwrap();
        let c = LoraConfig::new(1, 1.0, 1, 1e-4, 1, 100);
        let twin = LoraConfig::new(1, 2.0, 1, 1e-4, 1, 100);
        assert!((job_time(&tm, &[&c], 1).unwrap() - 100.0).abs() < 1e-12);
        assert!((job_time(&tm, &[&c, &twin], 1).unwrap() - 150.0).abs() < 1e-12);
        assert_eq!(
            job_time(&tm, &[&c], 2).unwrap_err(),
            CostError::UncalibratedDegree(2)
        );
        let mut zero = c.clone();
        zero.train_steps = 0;
        assert!(matches!(
            job_time(&tm, &[&zero], 1),
            Err(CostError::ZeroTrainSteps(_))
        ));
    }
}
