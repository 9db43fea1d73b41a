//! Learning-rate decay on validation plateaus and the natural-data mixing ramp.

use super::TrainConfig;

/// Number of trailing epochs whose relative improvement over the running best
/// falls below `min_rel_improvement`.
pub fn trailing_plateau_epochs(history: &[f64], min_rel_improvement: f64) -> usize {
    let Some((&first, rest)) = history.split_first() else {
        return 0;
    };
    let mut best = first;
    let mut trailing = 0;
    for &v in rest {
        let rel = if best.abs() > 0.0 {
            (best - v) / best.abs()
        } else {
            best - v
        };
        if rel < min_rel_improvement {
            trailing += 1;
        } else {
            trailing = 0;
        }
        best = best.min(v);
    }
    trailing
}

/// Returns `current_lr / lr_decay_factor` once the validation loss has stayed
/// flat (relative best improvement under the threshold) for `plateau_epochs`
/// epochs after the epoch that opened the plateau, else `current_lr`.
///
/// `history` should start at the last decay; [`PlateauScheduler`] does that.
pub fn lr_schedule_step(history: &[f64], current_lr: f64, config: &TrainConfig) -> f64 {
    if trailing_plateau_epochs(history, config.plateau_min_rel_improvement) >= config.plateau_epochs
    {
        current_lr / config.lr_decay_factor
    } else {
        current_lr
    }
}

/// Tracks validation history and applies [`lr_schedule_step`] with a cooldown:
/// each decay restarts the window, so decays are at least `plateau_epochs` apart.
#[derive(Clone, Debug)]
pub struct PlateauScheduler {
    lr: f64,
    history: Vec<f64>,
    window_start: usize,
}

impl PlateauScheduler {
    pub fn new(lr_initial: f64) -> Self {
        Self {
            lr: lr_initial,
            history: Vec::new(),
            window_start: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    /// Records one validation loss and returns the learning rate for the next epoch.
    pub fn observe(&mut self, val_loss: f64, config: &TrainConfig) -> f64 {
        self.history.push(val_loss);
        let new_lr = lr_schedule_step(&self.history[self.window_start..], self.lr, config);
        if new_lr != self.lr {
            self.lr = new_lr;
            self.window_start = self.history.len() - 1;
        }
        self.lr
    }
}

/// Fraction of natural images in the epoch's sample stream.
pub fn mix_schedule(epoch: usize, config: &TrainConfig) -> f64 {
    let target = config.mix_target_fraction;
    if epoch < config.warmup_epochs {
        return 0.0;
    }
    if config.mix_ramp_end_epoch <= config.warmup_epochs || epoch >= config.mix_ramp_end_epoch {
        return target;
    }
    target * (epoch - config.warmup_epochs) as f64
        / (config.mix_ramp_end_epoch - config.warmup_epochs) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> TrainConfig {
        TrainConfig::paper()
    }

    #[test]
    fn improving_history_keeps_rate() {
        assert_eq!(lr_schedule_step(&[1.0, 0.9, 0.8], 0.0015, &cfg()), 0.0015);
    }

    #[test]
    fn flat_history_divides_by_five() {
        let lr = lr_schedule_step(&[1.0; 5], 0.0015, &cfg());
        assert!((lr - 0.0003).abs() < 1e-15);
        // one epoch shorter is not yet a plateau
        assert_eq!(lr_schedule_step(&[1.0; 4], 0.0015, &cfg()), 0.0015);
    }

    #[test]
    fn sub_threshold_improvement_is_plateau() {
        let h = [1.0, 0.9995, 0.999, 0.9985, 0.998];
        assert!(lr_schedule_step(&h, 1.0, &cfg()) < 1.0);
        let h = [1.0, 0.99, 0.98, 0.97, 0.96];
        assert_eq!(lr_schedule_step(&h, 1.0, &cfg()), 1.0);
    }

    #[test]
    fn scheduler_decays_are_spaced() {
        let c = cfg();
        let mut s = PlateauScheduler::new(1.0);
        let mut decays = Vec::new();
        for epoch in 0..20 {
            let before = s.lr();
            if s.observe(1.0, &c) != before {
                decays.push(epoch);
            }
        }
        assert_eq!(decays, vec![4, 8, 12, 16]);
        assert!((s.lr() - 1.0 / 625.0).abs() < 1e-15);
    }

    #[test]
    fn mix_ramp() {
        let mut c = cfg();
        c.warmup_epochs = 20;
        c.mix_ramp_end_epoch = 60;
        c.mix_target_fraction = 0.5;
        assert_eq!(mix_schedule(0, &c), 0.0);
        assert_eq!(mix_schedule(19, &c), 0.0);
        assert_eq!(mix_schedule(60, &c), 0.5);
        assert_eq!(mix_schedule(100, &c), 0.5);
        assert!((mix_schedule(40, &c) - 0.25).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn lr_never_increases(losses in proptest::collection::vec(0.1f64..10.0, 1..60)) {
            let c = cfg();
            let mut s = PlateauScheduler::new(0.0015);
            let mut prev = s.lr();
            for v in losses {
                let lr = s.observe(v, &c);
                prop_assert!(lr <= prev);
                if lr < prev {
                    prop_assert!((prev / lr - c.lr_decay_factor).abs() < 1e-9);
                }
                prev = lr;
            }
        }
    }
}
