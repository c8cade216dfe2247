//! `key=value` config files, flag/file/environment resolution and the config echo.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use anyhow::{Context, Result};

pub const SEED_ENV: &str = "AKSPACE_SEED";

/// Bad arguments or configuration; reported with exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// Turns a library error raised while checking configuration into a usage error.
pub fn usage_from(e: impl fmt::Display) -> anyhow::Error {
    usage(e.to_string())
}

fn normalize(key: &str) -> String {
    key.trim().replace('-', "_")
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_config(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| usage(format!("{origin}:{}: expected key=value, got `{line}`", i + 1)))?;
        let key = normalize(k);
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(usage(format!("{origin}:{}: duplicate key `{key}`", i + 1)));
        }
    }
    Ok(map)
}

/// Resolved settings of one subcommand: command-line flag, then config file, then default.
pub struct Settings {
    file: BTreeMap<String, String>,
    used: BTreeSet<String>,
    echo: Vec<(String, String)>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if !p.is_file() {
                    return Err(usage(format!("config file {} not found", p.display())));
                }
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                parse_config(&text, &p.display().to_string())?
            }
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            used: BTreeSet::new(),
            echo: Vec::new(),
        })
    }

    fn from_file<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let Some(raw) = self.file.get(key) else {
            return Ok(None);
        };
        self.used.insert(key.to_string());
        raw.parse()
            .map(Some)
            .map_err(|_| usage(format!("config: bad value `{raw}` for `{key}`")))
    }

    pub fn record(&mut self, key: &str, value: impl fmt::Display) {
        self.echo.push((key.to_string(), value.to_string()));
    }

    pub fn get<T: FromStr + fmt::Display + Clone>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T> {
        let from_file = self.from_file(key)?;
        let v = flag.or(from_file).unwrap_or(default);
        self.record(key, &v);
        Ok(v)
    }

    pub fn get_opt<T: FromStr + fmt::Display + Clone>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>> {
        let from_file = self.from_file(key)?;
        let v = flag.or(from_file);
        if let Some(x) = &v {
            self.record(key, x);
        }
        Ok(v)
    }

    pub fn get_bool(&mut self, key: &str, flag: bool) -> Result<bool> {
        let from_file: Option<bool> = self.from_file(key)?;
        let v = flag || from_file.unwrap_or(false);
        self.record(key, v);
        Ok(v)
    }

    /// Seed from `--seed`, then the config file, then `AKSPACE_SEED`, then 0.
    pub fn seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let env = match std::env::var(SEED_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<u64>()
                    .map_err(|_| usage(format!("{SEED_ENV}=`{s}` is not an unsigned integer")))?,
            ),
            Err(_) => None,
        };
        let from_file = self.from_file("seed")?;
        let seed = flag.or(from_file).or(env).unwrap_or(0);
        self.record("seed", seed);
        Ok(seed)
    }

    /// Removes and returns file entries for `keys` that were not consumed yet.
    pub fn take_keys(&mut self, keys: &[&str]) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for k in keys {
            if let Some(v) = self.file.get(*k) {
                if self.used.insert(k.to_string()) {
                    out.insert(k.to_string(), v.clone());
                }
            }
        }
        out
    }

    /// Fails on config-file keys that no setting consumed.
    pub fn check_unused(&self) -> Result<()> {
        let unknown: Vec<&str> = self
            .file
            .keys()
            .filter(|k| !self.used.contains(*k))
            .map(String::as_str)
            .collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(usage(format!("config: unknown keys {}", unknown.join(", "))))
        }
    }

    pub fn echo_text(&self) -> String {
        self.echo.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Prints the resolved settings and writes them to `dir/config.txt`.
    pub fn write_echo(&self, command: &str, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let text = format!("command={command}\n{}", self.echo_text());
        eprint!("{text}");
        let path = dir.join("config.txt");
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// A kMA list, either `a,b,c` or an inclusive range `start:stop:step`.
#[derive(Clone, Debug, PartialEq)]
pub struct KmaGrid(pub Vec<f64>);

impl FromStr for KmaGrid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let num = |t: &str| t.trim().parse::<f64>().map_err(|_| format!("bad kMA value `{t}`"));
        let values = if s.contains(':') {
            let parts: Vec<&str> = s.split(':').collect();
            let [a, b, step] = parts[..] else {
                return Err(format!("expected start:stop:step, got `{s}`"));
            };
            let (a, b, step) = (num(a)?, num(b)?, num(step)?);
            if !(step > 0.0) || b < a {
                return Err(format!("empty kMA range `{s}`"));
            }
            let count = ((b - a) / step + 1e-9).floor() as usize + 1;
            // rounded so that 0.1 + 2·0.05 prints as 0.2
            (0..count).map(|i| ((a + i as f64 * step) * 1e9).round() / 1e9).collect()
        } else {
            s.split(',').map(num).collect::<std::result::Result<Vec<_>, _>>()?
        };
        if values.is_empty() {
            return Err("empty kMA grid".into());
        }
        if let Some(bad) = values.iter().find(|&&k| !(k > 0.0 && k <= 1.0)) {
            return Err(format!("kMA {bad} outside (0, 1]"));
        }
        Ok(KmaGrid(values))
    }
}

impl fmt::Display for KmaGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Comma-separated list, used for policy names.
#[derive(Clone, Debug, PartialEq)]
pub struct List(pub Vec<String>);

impl FromStr for List {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let items: Vec<String> = s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect();
        if items.is_empty() {
            return Err("empty list".into());
        }
        Ok(List(items))
    }
}

impl fmt::Display for List {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(","))
    }
}
