/// Linear interpolation from `start` to `end` over `steps`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearSchedule {
    pub start: f64,
    pub end: f64,
    pub steps: u64,
}

impl LinearSchedule {
    pub fn new(start: f64, end: f64, steps: u64) -> Self {
        Self { start, end, steps }
    }

    pub fn value(&self, step: u64) -> f64 {
        if self.steps == 0 || step >= self.steps {
            return self.end;
        }
        let frac = step as f64 / self.steps as f64;
        self.start + frac * (self.end - self.start)
    }
}

/// Default exploration: 1.0 to 0.05 over 1e5 steps.
pub fn epsilon_schedule(step: u64, schedule: &LinearSchedule) -> f64 {
    schedule.value(step)
}
