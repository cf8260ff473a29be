use std::time::Instant;

/// Optional wall-clock limit measured on the monotonic clock.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Deadline {
    start: Instant,
    limit: Option<f64>,
}

impl Deadline {
    pub(crate) fn new(limit: Option<f64>) -> Self {
        Self {
            start: Instant::now(),
            limit,
        }
    }

    pub(crate) fn expired(&self) -> bool {
        self.limit.is_some_and(|l| self.start.elapsed().as_secs_f64() >= l)
    }
}
