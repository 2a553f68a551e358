//! Monotonic time sources, injectable so timing-dependent stages can be
//! driven deterministically in tests.

use std::time::{Duration, Instant};

use crate::model::{Micros, MICROS_PER_SEC};

pub trait Clock {
    fn now_micros(&self) -> Micros;
    /// Blocks until `now_micros() >= t`; returns immediately for past instants.
    fn sleep_until(&mut self, t: Micros);
}

/// Advances only when told to. `sleep_until` jumps straight to the target.
#[derive(Debug, Clone, Default)]
pub struct VirtualClock {
    now: Micros,
}

impl VirtualClock {
    pub fn starting_at(now: Micros) -> Self {
        VirtualClock { now }
    }

    pub fn advance(&mut self, by: Micros) {
        self.now += by;
    }
}

impl Clock for VirtualClock {
    fn now_micros(&self) -> Micros {
        self.now
    }

    fn sleep_until(&mut self, t: Micros) {
        self.now = self.now.max(t);
    }
}

/// Wall-clock time mapped onto a trace timeline: `origin` corresponds to the
/// moment of construction and the timeline runs `speed` times faster than
/// real time. Clones share the same anchor.
#[derive(Debug, Clone)]
pub struct ScaledWallClock {
    anchor: Instant,
    origin: Micros,
    speed: f64,
}

impl ScaledWallClock {
    pub fn new(origin: Micros, speed: f64) -> Self {
        assert!(speed > 0.0 && speed.is_finite(), "speed must be positive");
        ScaledWallClock {
            anchor: Instant::now(),
            origin,
            speed,
        }
    }
}

impl Clock for ScaledWallClock {
    fn now_micros(&self) -> Micros {
        let elapsed = self.anchor.elapsed().as_secs_f64() * self.speed;
        self.origin + (elapsed * MICROS_PER_SEC as f64) as Micros
    }

    fn sleep_until(&mut self, t: Micros) {
        loop {
            let now = self.now_micros();
            if now >= t {
                return;
            }
            let wall = (t - now) as f64 / self.speed / MICROS_PER_SEC as f64;
            std::thread::sleep(Duration::from_secs_f64(wall.max(1e-6)));
        }
    }
}
