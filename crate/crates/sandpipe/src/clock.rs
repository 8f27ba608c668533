//! Injectable time source.
//!
//! Every component that cares about wall time (the poll scheduler, archive
//! rotation, token expiry) takes a [`Clock`] instead of calling the OS
//! directly, so tests and the `--clock virtual:<speedup>` mode can drive
//! midnight crossings and poll intervals in milliseconds.

use std::sync::{Arc, Mutex};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

#[derive(Clone)]
pub struct Clock(Arc<Inner>);

enum Inner {
    System,
    /// Virtual seconds advance `speedup` times faster than real seconds,
    /// starting from `epoch` at construction time.
    Virtual {
        anchor: Instant,
        epoch: f64,
        speedup: f64,
    },
    /// Advances only when `advance` is called. For tests.
    Manual(Mutex<f64>),
}

impl Clock {
    pub fn system() -> Self {
        Clock(Arc::new(Inner::System))
    }

    pub fn virtual_from(epoch: f64, speedup: f64) -> Self {
        Clock(Arc::new(Inner::Virtual {
            anchor: Instant::now(),
            epoch,
            speedup,
        }))
    }

    pub fn manual(start: f64) -> Self {
        Clock(Arc::new(Inner::Manual(Mutex::new(start))))
    }

    /// Current time as seconds since the Unix epoch.
    pub fn now(&self) -> f64 {
        match &*self.0 {
            Inner::System => SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .expect("system clock before epoch")
                .as_secs_f64(),
            Inner::Virtual {
                anchor,
                epoch,
                speedup,
            } => epoch + anchor.elapsed().as_secs_f64() * speedup,
            Inner::Manual(t) => *t.lock().unwrap(),
        }
    }

    /// Move a manual clock forward. No-op on other clock kinds.
    pub fn advance(&self, secs: f64) {
        if let Inner::Manual(t) = &*self.0 {
            *t.lock().unwrap() += secs;
        }
    }

    pub fn set(&self, now: f64) {
        if let Inner::Manual(t) = &*self.0 {
            *t.lock().unwrap() = now;
        }
    }

    /// Parse the CLI clock spec: `system` or `virtual:<speedup>`.
    pub fn parse_spec(spec: &str) -> Result<Clock, String> {
        if spec == "system" {
            return Ok(Clock::system());
        }
        if let Some(rate) = spec.strip_prefix("virtual:") {
            let speedup: f64 = rate
                .parse()
                .map_err(|_| format!("bad virtual clock speedup: {rate}"))?;
            if speedup <= 0.0 {
                return Err("virtual clock speedup must be positive".into());
            }
            let epoch = Clock::system().now();
            return Ok(Clock::virtual_from(epoch, speedup));
        }
        Err(format!("unknown clock spec: {spec}"))
    }
}

impl std::fmt::Debug for Clock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match &*self.0 {
            Inner::System => write!(f, "Clock::System"),
            Inner::Virtual { speedup, .. } => write!(f, "Clock::Virtual(x{speedup})"),
            Inner::Manual(t) => write!(f, "Clock::Manual({})", *t.lock().unwrap()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manual_clock_advances_only_on_demand() {
        let c = Clock::manual(100.0);
        assert_eq!(c.now(), 100.0);
        c.advance(5.5);
        assert_eq!(c.now(), 105.5);
    }

    #[test]
    fn virtual_clock_scales() {
        let c = Clock::virtual_from(0.0, 1000.0);
        std::thread::sleep(std::time::Duration::from_millis(20));
        let t = c.now();
        assert!(t >= 20.0, "expected >= 20 virtual seconds, got {t}");
    }

    #[test]
    fn parse_specs() {
        assert!(Clock::parse_spec("system").is_ok());
        assert!(Clock::parse_spec("virtual:3600").is_ok());
        assert!(Clock::parse_spec("virtual:-1").is_err());
        assert!(Clock::parse_spec("warp").is_err());
    }
}
