//! Worker reports and detection of training changes that call for
//! re-optimizing the deployment.

use crate::sync::SyncTiming;

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerReport {
    pub worker: usize,
    pub epoch: u64,
    pub iteration: u64,
    /// False when the worker did not finish publishing its gradient.
    pub success_flag: bool,
    pub iter_time: f64,
    pub sync_timing: SyncTiming,
    pub observed_batch_size: usize,
    pub observed_param_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChangeEvent {
    pub epoch: u64,
    pub iteration: u64,
    pub from: (usize, usize),
    pub to: (usize, usize),
}

/// Compares reports against the (batch size, parameter count) the current
/// deployment was profiled for. At most one change is pending at a time;
/// [`ChangeDetector::rebaseline`] resolves it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeDetector {
    baseline: (usize, usize),
    pending: bool,
}

impl ChangeDetector {
    pub fn new(batch_size: usize, param_count: usize) -> Self {
        Self {
            baseline: (batch_size, param_count),
            pending: false,
        }
    }

    pub fn baseline(&self) -> (usize, usize) {
        self.baseline
    }

    pub fn is_pending(&self) -> bool {
        self.pending
    }

    pub fn observe(&mut self, report: &WorkerReport) -> Option<ChangeEvent> {
        let seen = (report.observed_batch_size, report.observed_param_count);
        if self.pending || !report.success_flag || seen == self.baseline {
            return None;
        }
        self.pending = true;
        Some(ChangeEvent {
            epoch: report.epoch,
            iteration: report.iteration,
            from: self.baseline,
            to: seen,
        })
    }

    pub fn rebaseline(&mut self, batch_size: usize, param_count: usize) {
        self.baseline = (batch_size, param_count);
        self.pending = false;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(epoch: u64, batch: usize, params: usize) -> WorkerReport {
        WorkerReport {
            worker: 0,
            epoch,
            iteration: 0,
            success_flag: true,
            iter_time: 1.0,
            sync_timing: SyncTiming::default(),
            observed_batch_size: batch,
            observed_param_count: params,
        }
    }

    #[test]
    fn constant_schedule_never_fires() {
        let mut d = ChangeDetector::new(64, 100);
        assert!((0..50).all(|e| d.observe(&report(e, 64, 100)).is_none()));
    }

    #[test]
    fn batch_change_fires_once_until_resolved() {
        let mut d = ChangeDetector::new(64, 100);
        let fired: Vec<u64> = (0..6)
            .flat_map(|e| (0..3).map(move |_| e))
            .filter_map(|e| {
                d.observe(&report(e, if e >= 3 { 256 } else { 64 }, 100))
                    .map(|c| c.epoch)
            })
            .collect();
        assert_eq!(fired, vec![3]);
        assert!(d.is_pending());
        d.rebaseline(256, 100);
        assert!(d.observe(&report(4, 256, 100)).is_none());
    }

    #[test]
    fn three_stage_model_schedule_fires_twice() {
        let mut d = ChangeDetector::new(32, 100);
        let mut fired = 0;
        for e in 0..9 {
            let params = [100, 200, 400][e as usize / 3];
            if let Some(c) = d.observe(&report(e, 32, params)) {
                fired += 1;
                d.rebaseline(c.to.0, c.to.1);
            }
        }
        assert_eq!(fired, 2);
    }

    #[test]
    fn failed_reports_are_ignored() {
        let mut d = ChangeDetector::new(64, 100);
        let mut r = report(1, 128, 100);
        r.success_flag = false;
        assert!(d.observe(&r).is_none());
    }
}
