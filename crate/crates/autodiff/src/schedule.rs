//! Cosine annealing with warm restarts.

use std::f64::consts::PI;

/// How the restart factor `gamma` acts on successive cycles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RestartMode {
    /// Cycle `c` peaks at `gamma^c · base_lr`; every cycle lasts `t0` epochs.
    #[default]
    Amplitude,
    /// Cycle `c` lasts `t0 · gamma^c` epochs (at least one); every cycle
    /// peaks at `base_lr`.
    Period,
}

pub fn cosine_restart_lr(epoch: usize, base_lr: f64, t0: usize, gamma: f64, mode: RestartMode) -> f64 {
    let t0 = t0.max(1) as f64;
    let (amplitude, t, period) = match mode {
        RestartMode::Amplitude => {
            let cycle = (epoch as f64 / t0).floor();
            (gamma.powf(cycle), epoch as f64 - cycle * t0, t0)
        }
        RestartMode::Period => {
            let mut t = epoch as f64;
            let mut period = t0;
            while t >= period {
                t -= period;
                period = (period * gamma).max(1.0);
            }
            (1.0, t, period)
        }
    };
    amplitude * base_lr * 0.5 * (1.0 + (PI * t / period).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn amplitude_restarts() {
        let lr = |e| cosine_restart_lr(e, 3e-5, 100, 0.5, RestartMode::Amplitude);
        assert_eq!(lr(0), 3e-5);
        assert!((lr(50) - 1.5e-5).abs() < 1e-18);
        assert!((lr(100) - 1.5e-5).abs() < 1e-18);
        assert!((lr(200) - 0.75e-5).abs() < 1e-18);
        assert!(lr(99) < lr(100));
    }

    #[test]
    fn period_restarts() {
        let lr = |e| cosine_restart_lr(e, 1.0, 100, 0.5, RestartMode::Period);
        assert_eq!(lr(0), 1.0);
        assert_eq!(lr(100), 1.0);
        assert!((lr(125) - 0.5).abs() < 1e-12);
        assert_eq!(lr(150), 1.0);
    }
}
