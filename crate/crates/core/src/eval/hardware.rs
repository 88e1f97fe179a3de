use std::fmt;
use std::process::Command;
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// A value that was either measured or could not be read.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Reading {
    Measured(f64),
    #[default]
    Unavailable,
}

impl Reading {
    pub fn value(&self) -> Option<f64> {
        match self {
            Reading::Measured(v) => Some(*v),
            Reading::Unavailable => None,
        }
    }

    pub fn is_available(&self) -> bool {
        matches!(self, Reading::Measured(_))
    }
}

impl From<Option<f64>> for Reading {
    fn from(v: Option<f64>) -> Self {
        match v {
            Some(x) if x.is_finite() => Reading::Measured(x),
            _ => Reading::Unavailable,
        }
    }
}

impl fmt::Display for Reading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Reading::Measured(v) => write!(f, "{v}"),
            Reading::Unavailable => f.write_str("unavailable"),
        }
    }
}

impl Serialize for Reading {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Reading::Measured(v) => s.serialize_f64(*v),
            Reading::Unavailable => s.serialize_str("unavailable"),
        }
    }
}

impl<'de> Deserialize<'de> for Reading {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Reading::Measured(v)),
            Raw::Text(t) if t == "unavailable" => Ok(Reading::Unavailable),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"unavailable\", got {t:?}"))),
        }
    }
}

/// Source of accelerator readings. Each method returns `None` when the
/// quantity cannot be read.
pub trait HardwareProbe {
    /// Watts.
    fn power(&mut self) -> Option<f64>;
    /// Percent.
    fn gpu_util(&mut self) -> Option<f64>;
    /// MiB.
    fn memory(&mut self) -> Option<f64>;
    /// Degrees Celsius.
    fn temperature(&mut self) -> Option<f64>;
}

/// Returns fixed values. Useful in tests and as a template.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StubProbe {
    pub power: Option<f64>,
    pub gpu_util: Option<f64>,
    pub memory: Option<f64>,
    pub temperature: Option<f64>,
}

impl HardwareProbe for StubProbe {
    fn power(&mut self) -> Option<f64> {
        self.power
    }
    fn gpu_util(&mut self) -> Option<f64> {
        self.gpu_util
    }
    fn memory(&mut self) -> Option<f64> {
        self.memory
    }
    fn temperature(&mut self) -> Option<f64> {
        self.temperature
    }
}

/// Runs one shell command per quantity and parses the first line of its
/// stdout as a number, e.g.
/// `nvidia-smi --query-gpu=power.draw --format=csv,noheader,nounits`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommandProbe {
    pub power: Option<String>,
    pub gpu_util: Option<String>,
    pub memory: Option<String>,
    pub temperature: Option<String>,
}

impl CommandProbe {
    fn run(cmd: &Option<String>) -> Option<f64> {
        let cmd = cmd.as_deref()?;
        let out = match Command::new("sh").arg("-c").arg(cmd).output() {
            Ok(o) => o,
            Err(e) => {
                log::warn!("probe command {cmd:?} failed to start: {e}");
                return None;
            }
        };
        if !out.status.success() {
            log::warn!("probe command {cmd:?} exited with {}", out.status);
            return None;
        }
        let text = String::from_utf8_lossy(&out.stdout);
        let parsed = parse_numeric_line(&text);
        if parsed.is_none() {
            log::warn!("probe command {cmd:?} printed no number: {:?}", text.trim());
        }
        parsed
    }
}

/// First non-empty line parsed as `f64`, tolerating a trailing unit word.
pub fn parse_numeric_line(text: &str) -> Option<f64> {
    let line = text.lines().map(str::trim).find(|l| !l.is_empty())?;
    let token = line.split_whitespace().next()?;
    token.trim_end_matches(|c: char| c == '%' || c == ',').parse().ok().filter(|v: &f64| v.is_finite())
}

impl HardwareProbe for CommandProbe {
    fn power(&mut self) -> Option<f64> {
        Self::run(&self.power)
    }
    fn gpu_util(&mut self) -> Option<f64> {
        Self::run(&self.gpu_util)
    }
    fn memory(&mut self) -> Option<f64> {
        Self::run(&self.memory)
    }
    fn temperature(&mut self) -> Option<f64> {
        Self::run(&self.temperature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareMetrics {
    /// seconds
    pub inference_time: f64,
    /// W
    pub power: Reading,
    /// %
    pub gpu_util: Reading,
    /// MiB
    pub memory: Reading,
    /// °C
    pub temperature: Reading,
}

static PROBE_LOCK: Mutex<()> = Mutex::new(());

/// Times `run` and reads the probe once the workload has returned. Without a
/// probe every accelerator field is `Unavailable`.
pub fn capture_hardware_metrics<T, F>(probe: Option<&mut dyn HardwareProbe>, run: F) -> Result<(HardwareMetrics, T)>
where
    F: FnOnce() -> Result<T>,
{
    let start = Instant::now();
    let outcome = run();
    let elapsed = start.elapsed().as_secs_f64();
    let value = match outcome {
        Ok(v) => v,
        Err(e) => {
            return Err(Error::Workload { elapsed_s: elapsed, message: e.to_string() });
        }
    };
    let mut metrics = HardwareMetrics {
        inference_time: elapsed.max(f64::MIN_POSITIVE),
        power: Reading::Unavailable,
        gpu_util: Reading::Unavailable,
        memory: Reading::Unavailable,
        temperature: Reading::Unavailable,
    };
    if let Some(p) = probe {
        let _guard = PROBE_LOCK.lock().unwrap_or_else(|e| e.into_inner());
        metrics.power = p.power().into();
        metrics.gpu_util = p.gpu_util().into();
        metrics.memory = p.memory().into();
        metrics.temperature = p.temperature().into();
    }
    Ok((metrics, value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    #[test]
    fn sleep_is_timed() {
        let (m, v) = capture_hardware_metrics(None, || {
            std::thread::sleep(Duration::from_millis(100));
            Ok(7)
        })
        .unwrap();
        assert_eq!(v, 7);
        assert!((0.1..0.2).contains(&m.inference_time), "{}", m.inference_time);
    }

    #[test]
    fn no_probe_is_unavailable() {
        let (m, _) = capture_hardware_metrics(None, || Ok(())).unwrap();
        assert!(m.inference_time > 0.0);
        for r in [m.power, m.gpu_util, m.memory, m.temperature] {
            assert_eq!(r, Reading::Unavailable);
        }
        let json = serde_json::to_value(m).unwrap();
        assert_eq!(json["power"], "unavailable");
    }

    #[test]
    fn stub_values_echo() {
        let mut stub = StubProbe { power: Some(47.41), gpu_util: Some(4.0), memory: Some(923.0), temperature: Some(34.0) };
        let (m, _) = capture_hardware_metrics(Some(&mut stub), || Ok(())).unwrap();
        assert_eq!(m.power, Reading::Measured(47.41));
        assert_eq!(m.gpu_util, Reading::Measured(4.0));
        assert_eq!(m.memory, Reading::Measured(923.0));
        assert_eq!(m.temperature, Reading::Measured(34.0));
        let back: HardwareMetrics = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn failing_workload_keeps_elapsed() {
        let err = capture_hardware_metrics::<(), _>(None, || {
            std::thread::sleep(Duration::from_millis(20));
            Err(Error::InvalidArgument("boom".into()))
        })
        .unwrap_err();
        match err {
            Error::Workload { elapsed_s, message } => {
                assert!(elapsed_s >= 0.02);
                assert!(message.contains("boom"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn command_probe_parses() {
        let mut p = CommandProbe {
            power: Some("echo '47.41 W'".into()),
            gpu_util: Some("printf '\\n 4 %%\\n'".into()),
            memory: Some("echo nope".into()),
            temperature: Some("exit 3".into()),
        };
        assert_eq!(p.power(), Some(47.41));
        assert_eq!(p.gpu_util(), Some(4.0));
        assert_eq!(p.memory(), None);
        assert_eq!(p.temperature(), None);
        assert_eq!(parse_numeric_line("923\n924"), Some(923.0));
        assert_eq!(parse_numeric_line("NaN"), None);
    }
}
