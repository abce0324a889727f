/// Outcome of [`early_stop_check`]; `best_epoch` is a 0-based index into the
/// history.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub stop: bool,
    pub best_epoch: usize,
}

/// Scan a history of a metric where higher is better. An epoch improves when
/// it beats the best value so far by more than `min_delta`; training stops
/// once `patience` consecutive epochs have failed to improve.
pub fn early_stop_check(history: &[f64], patience: usize, min_delta: f64) -> StopDecision {
    let patience = patience.max(1);
    let mut best = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    for (i, &v) in history.iter().enumerate() {
        if v > best + min_delta {
            best = v;
            best_epoch = i;
            stale = 0;
        } else {
            stale += 1;
        }
    }
    StopDecision {
        stop: stale >= patience,
        best_epoch,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn improving_never_stops() {
        let h: Vec<f64> = (0..20).map(|i| i as f64).collect();
        for n in 1..=h.len() {
            assert!(!early_stop_check(&h[..n], 1, 0.0).stop);
        }
    }

    #[test]
    fn flat_history_stops_after_patience() {
        let h = [0.5; 6];
        let first = (1..=h.len())
            .find(|&n| early_stop_check(&h[..n], 3, 0.0).stop)
            .unwrap();
        assert_eq!(first, 4);
        assert_eq!(early_stop_check(&h[..4], 3, 0.0).best_epoch, 0);
    }
}
