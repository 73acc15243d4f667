use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    /// Lower is better.
    TrainLoss,
    /// Higher is better.
    TrainF1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Zero-patience early stopping: halt at the first epoch whose monitored
/// metric improves on the best so far by less than `min_delta`.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStop {
    pub metric: StopMetric,
    pub min_delta: f64,
    best: Option<f64>,
    epochs: usize,
    stopped_epoch: Option<usize>,
}

impl EarlyStop {
    pub fn new(metric: StopMetric, min_delta: f64) -> Self {
        EarlyStop {
            metric,
            min_delta,
            best: None,
            epochs: 0,
            stopped_epoch: None,
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// 1-based epoch at which stopping fired.
    pub fn stopped_epoch(&self) -> Option<usize> {
        self.stopped_epoch
    }

    pub fn update(&mut self, value: f64) -> StopDecision {
        if self.stopped_epoch.is_some() {
            return StopDecision::Stop;
        }
        self.epochs += 1;
        let Some(best) = self.best else {
            self.best = Some(value);
            return StopDecision::Continue;
        };
        let improvement = match self.metric {
            StopMetric::TrainLoss => best - value,
            StopMetric::TrainF1 => value - best,
        };
        if improvement >= self.min_delta {
            self.best = Some(value);
            StopDecision::Continue
        } else {
            self.stopped_epoch = Some(self.epochs);
            StopDecision::Stop
        }
    }
}
