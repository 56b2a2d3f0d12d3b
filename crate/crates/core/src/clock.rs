//! Process-wide microsecond clock: monotonic, anchored to the wall clock at first use.

use std::sync::OnceLock;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

static ANCHOR: OnceLock<(Instant, u64)> = OnceLock::new();

pub fn now_us() -> u64 {
    let (origin, epoch_us) = ANCHOR.get_or_init(|| {
        let epoch = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_micros() as u64)
            .unwrap_or(0);
        (Instant::now(), epoch)
    });
    epoch_us + origin.elapsed().as_micros() as u64
}

pub fn ms_to_us(ms: u64) -> u64 {
    ms.saturating_mul(1_000)
}

#[cfg(test)]
mod tests {
    #[test]
    fn monotone() {
        let a = super::now_us();
        let b = super::now_us();
        assert!(b >= a);
        assert!(a > 1_500_000_000_000_000);
    }
}
