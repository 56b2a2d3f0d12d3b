use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum StatsError {
    #[error("no values")]
    EmptyInput,
    #[error("values must be positive")]
    NonPositiveValue,
    #[error("baseline must be positive")]
    NonPositiveBaseline,
}

/// `n / Σ 1/xᵢ`; damps the effect of large outliers.
pub fn harmonic_mean(values: &[f64]) -> Result<f64, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    // Written as a negated test so that NaN is rejected too.
    if values.iter().any(|v| !(*v > 0.0)) {
        return Err(StatsError::NonPositiveValue);
    }
    // Scaled by the minimum: equal inputs come back exactly, and tiny or huge
    // values do not overflow the reciprocal sum.
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let scaled: f64 = values.iter().map(|v| min / v).sum();
    Ok(min * (values.len() as f64 / scaled))
}

pub fn arithmetic_mean(values: &[f64]) -> Result<f64, StatsError> {
    if values.is_empty() {
        return Err(StatsError::EmptyInput);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Relative improvement of `candidate` over `baseline`.
pub fn performance_rate(baseline_ms: f64, candidate_ms: f64) -> Result<f64, StatsError> {
    if !(baseline_ms > 0.0) {
        return Err(StatsError::NonPositiveBaseline);
    }
    Ok((baseline_ms - candidate_ms) / baseline_ms)
}

/// Nearest-rank percentile of already sorted samples; `p` in `[0, 100]`.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil() as usize;
    Some(sorted[rank.clamp(1, sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MsgCount {
    /// Every client sends `msgs`.
    PerClient,
    /// `msgs` is split across the clients.
    Total,
}

impl MsgCount {
    pub fn as_str(self) -> &'static str {
        match self {
            MsgCount::PerClient => "per-client",
            MsgCount::Total => "total",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepStats {
    pub rep: usize,
    pub total_ms: f64,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub throughput: f64,
    pub sent: u64,
    pub replies: u64,
    pub errors: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchStats {
    pub clients: usize,
    /// The `msgs` setting as given.
    pub msgs: usize,
    pub count: MsgCount,
    /// Messages sent per repetition.
    pub messages: u64,
    pub reps: Vec<RepStats>,
    pub harmonic_mean_ms: f64,
    /// `harmonic_mean_ms / messages`.
    pub ms_per_msg: f64,
    /// Percentiles over all round trips of all repetitions, in ms.
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub throughput: f64,
}

pub const CSV_HEADER: &str = "clients,msgs,rep,total_ms,ms_per_msg,p50,p95,p99,throughput";

impl BenchStats {
    /// Aggregates repetitions. `round_trips_ms` holds every round trip.
    pub fn from_reps(
        clients: usize,
        msgs: usize,
        count: MsgCount,
        messages: u64,
        reps: Vec<RepStats>,
        round_trips_ms: &mut [f64],
    ) -> Result<Self, StatsError> {
        let totals: Vec<f64> = reps.iter().map(|r| r.total_ms).collect();
        let harmonic_mean_ms = harmonic_mean(&totals)?;
        let ms_per_msg = harmonic_mean_ms / messages.max(1) as f64;
        round_trips_ms.sort_by(f64::total_cmp);
        let pct = |p| percentile(round_trips_ms, p).unwrap_or(0.0);
        let sent: u64 = reps.iter().map(|r| r.sent).sum();
        let elapsed_s: f64 = totals.iter().sum::<f64>() / 1e3;
        Ok(BenchStats {
            clients,
            msgs,
            count,
            messages,
            harmonic_mean_ms,
            ms_per_msg,
            p50: pct(50.0),
            p95: pct(95.0),
            p99: pct(99.0),
            throughput: if elapsed_s > 0.0 { sent as f64 / elapsed_s } else { 0.0 },
            reps,
        })
    }

    /// One row per repetition plus a summary row with `rep = hm`.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut rows: Vec<String> = self
            .reps
            .iter()
            .map(|r| {
                format!(
                    "{},{},{},{:.3},{:.6},{:.3},{:.3},{:.3},{:.1}",
                    self.clients,
                    self.msgs,
                    r.rep,
                    r.total_ms,
                    r.total_ms / self.messages.max(1) as f64,
                    r.p50,
                    r.p95,
                    r.p99,
                    r.throughput
                )
            })
            .collect();
        rows.push(format!(
            "{},{},hm,{:.3},{:.6},{:.3},{:.3},{:.3},{:.1}",
            self.clients, self.msgs, self.harmonic_mean_ms, self.ms_per_msg, self.p50, self.p95, self.p99, self.throughput
        ));
        rows
    }

    pub fn sent(&self) -> u64 {
        self.reps.iter().map(|r| r.sent).sum()
    }

    pub fn replies(&self) -> u64 {
        self.reps.iter().map(|r| r.replies).sum()
    }

    pub fn errors(&self) -> u64 {
        self.reps.iter().map(|r| r.errors).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn harmonic_examples() {
        assert_eq!(harmonic_mean(&[10.0, 10.0, 10.0]), Ok(10.0));
        assert_eq!(harmonic_mean(&[1.0, 4.0, 4.0]), Ok(2.0));
        assert_eq!(harmonic_mean(&[]), Err(StatsError::EmptyInput));
        assert_eq!(harmonic_mean(&[1.0, 0.0]), Err(StatsError::NonPositiveValue));
        assert_eq!(harmonic_mean(&[1.0, -2.0]), Err(StatsError::NonPositiveValue));
        assert_eq!(harmonic_mean(&[f64::NAN]), Err(StatsError::NonPositiveValue));
    }

    #[test]
    fn performance_rate_examples() {
        assert!((performance_rate(29.0, 12.0).unwrap() - 0.5862).abs() < 5e-5);
        assert!((performance_rate(738.0, 147.0).unwrap() - 0.8008).abs() < 5e-5);
        assert_eq!(performance_rate(5.0, 5.0), Ok(0.0));
        assert_eq!(performance_rate(0.0, 1.0), Err(StatsError::NonPositiveBaseline));
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), Some(50.0));
        assert_eq!(percentile(&v, 99.0), Some(99.0));
        assert_eq!(percentile(&v, 100.0), Some(100.0));
        assert_eq!(percentile(&v, 0.0), Some(1.0));
        assert_eq!(percentile(&[], 50.0), None);
    }

    fn rep(total_ms: f64) -> RepStats {
        RepStats { rep: 0, total_ms, p50: 1.0, p95: 2.0, p99: 3.0, throughput: 1.0, sent: 1, replies: 1, errors: 0 }
    }

    #[test]
    fn single_message_run() {
        let s = BenchStats::from_reps(1, 1, MsgCount::PerClient, 1, vec![rep(4.0)], &mut [4.0]).unwrap();
        assert_eq!(s.ms_per_msg, s.harmonic_mean_ms);
        assert_eq!(s.csv_rows().len(), 2);
        assert_eq!(CSV_HEADER.split(',').count(), s.csv_rows()[0].split(',').count());
    }

    proptest! {
        #[test]
        fn harmonic_matches_reciprocal_sum(values in prop::collection::vec(0.001f64..1e6, 1..20)) {
            let oracle = values.len() as f64 / values.iter().fold(0.0, |acc, v| acc + v.recip());
            let hm = harmonic_mean(&values).unwrap();
            prop_assert!((hm - oracle).abs() <= 1e-9 * oracle);
            prop_assert!(hm <= arithmetic_mean(&values).unwrap() * (1.0 + 1e-12));
        }

        #[test]
        fn ms_per_msg_accounting(totals in prop::collection::vec(0.01f64..1e5, 1..10), clients in 1usize..2000, msgs in 1usize..5000) {
            let reps = totals.iter().map(|t| rep(*t)).collect();
            let s = BenchStats::from_reps(clients, msgs, MsgCount::PerClient, (clients * msgs) as u64, reps, &mut [1.0, 2.0]).unwrap();
            let back = s.ms_per_msg * clients as f64 * msgs as f64;
            prop_assert!((back - s.harmonic_mean_ms).abs() <= 1e-9 * s.harmonic_mean_ms);
        }

        #[test]
        fn percentiles_are_ordered(mut samples in prop::collection::vec(0.0f64..1e4, 1..500)) {
            samples.sort_by(f64::total_cmp);
            let p = |x| percentile(&samples, x).unwrap();
            prop_assert!(p(50.0) <= p(95.0) && p(95.0) <= p(99.0));
        }
    }
}
