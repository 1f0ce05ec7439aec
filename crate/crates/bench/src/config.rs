//! Run configuration. Every CLI flag has a config-file key of the same name
//! (`key = value`, `#` starts a comment); flags override the file.

use std::path::PathBuf;
use std::str::FromStr;

use disagg_txn::txn::Isolation;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(field: &str, message: impl Into<String>) -> Self {
        ConfigError {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WorkloadKind {
    Kvs,
    SmallBank,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Lotus,
    MnLock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutFormat {
    Json,
    Csv,
    Table,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CrashSpec {
    pub cn: u16,
    pub at_ms: u64,
}

impl FromStr for CrashSpec {
    type Err = String;

    /// `cn:<id>@<ms>`
    fn from_str(s: &str) -> Result<Self, String> {
        let bad = || format!("expected cn:<id>@<ms>, got {s:?}");
        let rest = s.trim().strip_prefix("cn:").ok_or_else(bad)?;
        let (id, ms) = rest.split_once('@').ok_or_else(bad)?;
        Ok(CrashSpec {
            cn: id.trim().parse().map_err(|_| bad())?,
            at_ms: ms.trim().parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub workload: WorkloadKind,
    pub mode: Mode,
    pub cns: u16,
    pub mns: u16,
    pub coordinators: usize,
    /// Transaction attempts; ignored when `duration_ms` is set.
    pub txns: Option<u64>,
    pub duration_ms: Option<u64>,
    /// Share of read-write transactions; the workload default when unset.
    pub rw_ratio: Option<f64>,
    /// Zipf exponent; 0 means uniform.
    pub zipf: f64,
    pub isolation: Isolation,
    pub versions: usize,
    pub cache_entries: usize,
    pub seed: u64,
    pub crashes: Vec<CrashSpec>,
    pub reshard: bool,
    pub history: Option<PathBuf>,
    pub out: OutFormat,
    /// Keys (kvs) or accounts (smallbank); the workload default when unset.
    pub keys: Option<u64>,
    /// Concurrent clients; one per coordinator when unset.
    pub clients: Option<usize>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            workload: WorkloadKind::Kvs,
            mode: Mode::Lotus,
            cns: 3,
            mns: 3,
            coordinators: 8,
            txns: Some(10_000),
            duration_ms: None,
            rw_ratio: None,
            zipf: 0.99,
            isolation: Isolation::Serializable,
            versions: 4,
            cache_entries: 1 << 16,
            seed: 1,
            crashes: Vec::new(),
            reshard: false,
            history: None,
            out: OutFormat::Table,
            keys: None,
            clients: None,
        }
    }
}

/// Keys accepted by [`BenchConfig::apply`], in flag order.
pub const KEYS: &[&str] = &[
    "workload",
    "mode",
    "cns",
    "mns",
    "coordinators",
    "txns",
    "duration",
    "rw-ratio",
    "zipf",
    "isolation",
    "versions",
    "cache-entries",
    "seed",
    "crash",
    "reshard",
    "history",
    "out",
    "keys",
    "clients",
];

fn num<T: FromStr>(field: &str, v: &str) -> Result<T, ConfigError> {
    v.trim()
        .replace('_', "")
        .parse()
        .map_err(|_| ConfigError::new(field, format!("not a valid number: {v:?}")))
}

fn on_off(field: &str, v: &str) -> Result<bool, ConfigError> {
    match v.trim() {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(ConfigError::new(field, format!("expected on|off, got {v:?}"))),
    }
}

impl BenchConfig {
    pub fn default_keys(&self) -> u64 {
        self.keys.unwrap_or(match self.workload {
            WorkloadKind::Kvs => 100_000,
            WorkloadKind::SmallBank => 200_000,
        })
    }

    pub fn default_rw_ratio(&self) -> f64 {
        self.rw_ratio.unwrap_or(match self.workload {
            WorkloadKind::Kvs => 0.5,
            WorkloadKind::SmallBank => 0.85,
        })
    }

    pub fn client_count(&self) -> usize {
        self.clients.unwrap_or(self.cns as usize * self.coordinators)
    }

    /// Set one option by its flag name (without dashes; `_` also accepted).
    pub fn apply(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let key = key.trim().replace('_', "-");
        let k = key.as_str();
        let v = v.trim();
        match k {
            "workload" => {
                self.workload = match v {
                    "kvs" => WorkloadKind::Kvs,
                    "smallbank" => WorkloadKind::SmallBank,
                    _ => return Err(ConfigError::new(k, format!("expected kvs|smallbank, got {v:?}"))),
                }
            }
            "mode" => {
                self.mode = match v {
                    "lotus" => Mode::Lotus,
                    "mn-lock" => Mode::MnLock,
                    _ => return Err(ConfigError::new(k, format!("expected lotus|mn-lock, got {v:?}"))),
                }
            }
            "cns" => self.cns = num(k, v)?,
            "mns" => self.mns = num(k, v)?,
            "coordinators" => self.coordinators = num(k, v)?,
            "txns" => {
                self.txns = Some(num(k, v)?);
                self.duration_ms = None;
            }
            "duration" => {
                let ms = v.strip_suffix("ms").unwrap_or(v);
                self.duration_ms = Some(num(k, ms)?);
                self.txns = None;
            }
            "rw-ratio" => self.rw_ratio = Some(num(k, v)?),
            "zipf" => self.zipf = num(k, v)?,
            "isolation" => {
                self.isolation = match v.to_ascii_lowercase().as_str() {
                    "sr" => Isolation::Serializable,
                    "si" => Isolation::SnapshotIsolation,
                    _ => return Err(ConfigError::new(k, format!("expected sr|si, got {v:?}"))),
                }
            }
            "versions" => self.versions = num(k, v)?,
            "cache-entries" => self.cache_entries = num(k, v)?,
            "seed" => self.seed = num(k, v)?,
            "crash" => {
                for part in v.split(',').filter(|p| !p.trim().is_empty()) {
                    self.crashes.push(part.parse().map_err(|e: String| ConfigError::new(k, e))?);
                }
            }
            "reshard" => self.reshard = on_off(k, v)?,
            "history" => self.history = Some(PathBuf::from(v)),
            "out" => {
                self.out = match v {
                    "json" => OutFormat::Json,
                    "csv" => OutFormat::Csv,
                    "table" => OutFormat::Table,
                    _ => return Err(ConfigError::new(k, format!("expected json|csv|table, got {v:?}"))),
                }
            }
            "keys" => self.keys = Some(num(k, v)?),
            "clients" => self.clients = Some(num(k, v)?),
            _ => return Err(ConfigError::new(k, "unknown option")),
        }
        Ok(())
    }

    /// Apply a `key = value` document.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::new(&format!("line {}", n + 1), "expected key = value"))?;
            self.apply(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.cns == 0 {
            return Err(ConfigError::new("cns", "must be at least 1"));
        }
        if self.mns == 0 {
            return Err(ConfigError::new("mns", "must be at least 1"));
        }
        if self.coordinators == 0 {
            return Err(ConfigError::new("coordinators", "must be at least 1"));
        }
        if self.txns.is_none() && self.duration_ms.is_none() {
            return Err(ConfigError::new("txns", "either txns or duration is required"));
        }
        if self.txns == Some(0) || self.duration_ms == Some(0) {
            return Err(ConfigError::new("txns", "run length must be positive"));
        }
        let rw = self.default_rw_ratio();
        if !(0.0..=1.0).contains(&rw) {
            return Err(ConfigError::new("rw-ratio", format!("{rw} is outside [0, 1]")));
        }
        if !(self.zipf >= 0.0 && self.zipf.is_finite()) {
            return Err(ConfigError::new("zipf", format!("{} must be a finite value >= 0", self.zipf)));
        }
        if self.versions < 2 || self.versions > 64 {
            return Err(ConfigError::new("versions", "must be between 2 and 64"));
        }
        if self.cache_entries == 0 {
            return Err(ConfigError::new("cache-entries", "must be positive"));
        }
        let min_keys = if self.workload == WorkloadKind::SmallBank { 2 } else { 1 };
        if self.default_keys() < min_keys || self.default_keys() >= 1 << 32 {
            return Err(ConfigError::new("keys", format!("must be in {min_keys}..2^32")));
        }
        if self.clients == Some(0) {
            return Err(ConfigError::new("clients", "must be positive"));
        }
        for c in &self.crashes {
            if c.cn >= self.cns {
                return Err(ConfigError::new("crash", format!("cn {} does not exist", c.cn)));
            }
        }
        if !self.crashes.is_empty() && self.mode == Mode::MnLock {
            return Err(ConfigError::new("crash", "crash recovery is only supported in lotus mode"));
        }
        if !self.crashes.is_empty() && self.crashes.len() as u16 >= self.cns {
            return Err(ConfigError::new("crash", "at least one compute node must survive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_and_flags_agree() {
        let mut a = BenchConfig::default();
        a.apply_file("workload = smallbank\n# comment\nzipf=0.5  # trailing\ncrash = cn:1@20, cn:2@30\nreshard = on\n")
            .unwrap();
        let mut b = BenchConfig::default();
        for (k, v) in [("workload", "smallbank"), ("zipf", "0.5"), ("crash", "cn:1@20"), ("crash", "cn:2@30"), ("reshard", "on")] {
            b.apply(k, v).unwrap();
        }
        assert_eq!(a, b);
        assert_eq!(a.crashes, vec![CrashSpec { cn: 1, at_ms: 20 }, CrashSpec { cn: 2, at_ms: 30 }]);
    }

    #[test]
    fn every_key_is_accepted() {
        let sample = [
            "kvs", "lotus", "3", "3", "8", "100", "50", "0.5", "0.99", "si", "4", "1000", "7", "cn:0@5", "off", "h.bin",
            "json", "1000", "4",
        ];
        for (k, v) in KEYS.iter().zip(sample) {
            BenchConfig::default().apply(k, v).unwrap_or_else(|e| panic!("{k}: {e}"));
        }
    }

    #[test]
    fn errors_name_the_field() {
        let mut c = BenchConfig::default();
        assert_eq!(c.apply("zipf", "abc").unwrap_err().field, "zipf");
        assert_eq!(c.apply("bogus", "1").unwrap_err().field, "bogus");
        c.zipf = -1.0;
        assert_eq!(c.validate().unwrap_err().field, "zipf");
        let mut c = BenchConfig::default();
        c.rw_ratio = Some(1.5);
        assert_eq!(c.validate().unwrap_err().field, "rw-ratio");
        let mut c = BenchConfig::default();
        c.crashes.push(CrashSpec { cn: 9, at_ms: 1 });
        assert_eq!(c.validate().unwrap_err().field, "crash");
        assert!(BenchConfig::default().apply_file("nonsense").is_err());
    }
}
