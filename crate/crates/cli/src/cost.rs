//! Job cost model and the worst-case processing cost of shared jobs.

use thiserror::Error;

/// Hourly price of one accelerator VM.
pub const ACCELERATOR_PRICE_PER_HOUR: f64 = 4.5;
/// Hourly price of one fully utilized worker VM.
pub const WORKER_PRICE_PER_HOUR: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CostError {
    #[error("parameter {0} is negative or not finite")]
    NegativeParam(&'static str),
    #[error("invalid sizes: {0}")]
    InvalidSizes(String),
}

/// Inputs of the cost model. Times and prices share one unit (e.g. hours and
/// dollars per hour).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CostParams {
    pub t: f64,
    pub n_workers: f64,
    pub n_clients: f64,
    pub accelerators_per_client: f64,
    pub c_cpu: f64,
    pub c_mem: f64,
    pub c_acc: f64,
    /// Mean CPU used per worker.
    pub worker_cpu: f64,
    /// Mean memory used per worker.
    pub worker_mem: f64,
    /// CPU allocated per client.
    pub client_cpu: f64,
    /// Memory allocated per client.
    pub client_mem: f64,
}

impl CostParams {
    /// Prices an in-process run: each client holds one accelerator, worker
    /// CPU is billed at the worker VM price scaled by measured utilization,
    /// memory and client CPU are free. `hours` is the job time.
    pub fn open_source(hours: f64, n_workers: usize, n_clients: usize, worker_cpu: f64) -> Self {
        Self {
            t: hours,
            n_workers: n_workers as f64,
            n_clients: n_clients as f64,
            accelerators_per_client: 1.0,
            c_cpu: WORKER_PRICE_PER_HOUR,
            c_mem: 0.0,
            c_acc: ACCELERATOR_PRICE_PER_HOUR,
            worker_cpu,
            worker_mem: 0.0,
            client_cpu: 0.0,
            client_mem: 0.0,
        }
    }

    fn fields(&self) -> [(&'static str, f64); 11] {
        [
            ("t", self.t),
            ("n_workers", self.n_workers),
            ("n_clients", self.n_clients),
            ("accelerators_per_client", self.accelerators_per_client),
            ("c_cpu", self.c_cpu),
            ("c_mem", self.c_mem),
            ("c_acc", self.c_acc),
            ("worker_cpu", self.worker_cpu),
            ("worker_mem", self.worker_mem),
            ("client_cpu", self.client_cpu),
            ("client_mem", self.client_mem),
        ]
    }

    pub fn validate(&self) -> Result<(), CostError> {
        match self
            .fields()
            .into_iter()
            .find(|(_, v)| !(v.is_finite() && *v >= 0.0))
        {
            Some((name, _)) => Err(CostError::NegativeParam(name)),
            None => Ok(()),
        }
    }
}

/// `t * (C_cpu * (n_W * cpu_W + n_T * cpu_T) + C_mem * (n_W * mem_W + n_T * mem_T)
/// + C_acc * n_T * acc_per_T)`.
pub fn cost(p: &CostParams) -> Result<f64, CostError> {
    p.validate()?;
    let cpu = p.n_workers * p.worker_cpu + p.n_clients * p.client_cpu;
    let mem = p.n_workers * p.worker_mem + p.n_clients * p.client_mem;
    let acc = p.n_clients * p.accelerators_per_client;
    Ok(p.t * (p.c_cpu * cpu + p.c_mem * mem + p.c_acc * acc))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SharingBounds {
    /// All jobs run at the same speed and every batch is produced once.
    pub best: f64,
    /// Jobs run one after another and only the cached window is reused.
    pub worst: f64,
}

/// Processing cost of `k` jobs sharing one pipeline whose single pass costs
/// `one_pass`, with a cache of `cache_size` out of `dataset_size` batches.
pub fn sharing_cost_bounds(
    k: u64,
    one_pass: f64,
    cache_size: u64,
    dataset_size: u64,
) -> Result<SharingBounds, CostError> {
    if k == 0 {
        return Err(CostError::InvalidSizes("k must be at least 1".into()));
    }
    if cache_size == 0 || cache_size > dataset_size {
        return Err(CostError::InvalidSizes(format!(
            "need 0 < cache ({cache_size}) <= dataset ({dataset_size})"
        )));
    }
    if !(one_pass.is_finite() && one_pass >= 0.0) {
        return Err(CostError::NegativeParam("one_pass"));
    }
    let reuse = cache_size as f64 / dataset_size as f64;
    let k = k as f64;
    Ok(SharingBounds {
        best: one_pass,
        worst: k * one_pass - (k - 1.0) * reuse * one_pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_rejected() {
        let p = CostParams {
            c_mem: -1.0,
            ..Default::default()
        };
        assert_eq!(cost(&p), Err(CostError::NegativeParam("c_mem")));
        let p = CostParams {
            t: f64::NAN,
            ..Default::default()
        };
        assert_eq!(cost(&p), Err(CostError::NegativeParam("t")));
    }

    #[test]
    fn sharing_sizes_checked() {
        assert!(sharing_cost_bounds(0, 1.0, 1, 1).is_err());
        assert!(sharing_cost_bounds(2, 1.0, 0, 1).is_err());
        assert!(sharing_cost_bounds(2, 1.0, 3, 2).is_err());
    }
}
