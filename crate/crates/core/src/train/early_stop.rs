/// Outcome of feeding one validation value to [`EarlyStopping`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Observation {
    /// Strictly better than every earlier value.
    Improved,
    NotImproved,
    /// `patience` consecutive non-improvements; training should end.
    Stop,
}

impl Observation {
    pub fn improved(self) -> bool {
        self == Observation::Improved
    }
}

/// Lower-is-better patience counter. Ties count as no improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<f64>,
    best_epoch: Option<usize>,
    epochs_seen: usize,
    since_best: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        assert!(patience >= 1, "patience must be at least 1");
        EarlyStopping {
            patience,
            best: None,
            best_epoch: None,
            epochs_seen: 0,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, value: f64) -> Observation {
        self.epochs_seen += 1;
        if self.best.is_none_or(|b| value < b) {
            self.best = Some(value);
            self.best_epoch = Some(self.epochs_seen);
            self.since_best = 0;
            return Observation::Improved;
        }
        self.since_best += 1;
        if self.since_best >= self.patience {
            Observation::Stop
        } else {
            Observation::NotImproved
        }
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// 1-based epoch of the best value.
    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }
}
