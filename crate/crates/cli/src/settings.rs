//! Layered `key = value` settings: defaults < config file < flags.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// `extra` holds free-form `KEY=VALUE` overrides, applied after `flags`.
    pub fn layered(config: Option<&Path>, flags: Vec<(&str, Option<String>)>, extra: &[(String, String)]) -> Result<Self> {
        let mut values = BTreeMap::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            for (k, v) in crossview::train::parse_kv(&text).with_context(|| format!("parsing config {}", path.display()))? {
                values.insert(k, v);
            }
        }
        for (k, v) in flags {
            if let Some(v) = v {
                values.insert(k.to_string(), v);
            }
        }
        for (k, v) in extra {
            values.insert(k.clone(), v.clone());
        }
        Ok(Self { values })
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|e| anyhow!("bad value `{v}` for `{key}`: {e}")),
        }
    }

    pub fn take_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.take(key)?.unwrap_or(default))
    }

    pub fn take_string(&mut self, key: &str) -> Option<String> {
        self.values.remove(key)
    }

    /// Removes and returns every remaining key.
    pub fn drain(&mut self) -> BTreeMap<String, String> {
        std::mem::take(&mut self.values)
    }

    pub fn finish(self) -> Result<()> {
        if let Some(k) = self.values.keys().next() {
            bail!("unknown setting `{k}` for this command");
        }
        Ok(())
    }
}

pub fn flag<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

pub fn parse_list<T: FromStr>(key: &str, text: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    text.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|e| anyhow!("bad entry `{s}` in `{key}`: {e}")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        std::fs::write(&cfg, "epochs = 3\nlr = 0.5\n").unwrap();
        let mut s = Settings::layered(Some(&cfg), vec![("epochs", Some("7".into())), ("batch_size", None)], &[]).unwrap();
        assert_eq!(s.take::<usize>("epochs").unwrap(), Some(7));
        assert_eq!(s.take::<f64>("lr").unwrap(), Some(0.5));
        assert_eq!(s.take_or("batch_size", 32usize).unwrap(), 32);
        assert!(s.finish().is_ok());
        let mut s = Settings::layered(None, vec![("k", Some("x".into()))], &[("lr".into(), "1".into())]).unwrap();
        assert!(s.take::<usize>("k").is_err());
        let s = Settings::layered(None, vec![("zzz", Some("1".into()))], &[]).unwrap();
        assert!(s.finish().is_err());
        assert_eq!(parse_list::<usize>("h", "0, 2,3").unwrap(), vec![0, 2, 3]);
    }
}
