//! Flat `key = value` text used for configs, cohort specs and reports.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Default, Clone)]
pub struct KvMap {
    entries: BTreeMap<String, (usize, String)>,
}

impl KvMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: idx + 1,
                msg: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: "empty key".into(),
                });
            }
            if entries
                .insert(key.clone(), (idx + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Parse {
                    line: idx + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(KvMap { entries })
    }

    pub fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => v.parse::<T>().map(Some).map_err(|_| Error::Parse {
                line,
                msg: format!("invalid value `{v}` for `{key}`"),
            }),
        }
    }

    pub fn take_list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some((line, v)) => parse_list(&v).map(Some).ok_or_else(|| Error::Parse {
                line,
                msg: format!("invalid list `{v}` for `{key}`"),
            }),
        }
    }

    /// Fails on any key nobody consumed.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, (line, _))) => Err(Error::Parse {
                line,
                msg: format!("unknown key `{k}`"),
            }),
        }
    }
}

/// Parses a comma-separated list; an empty string is an empty list.
pub fn parse_list<T: FromStr>(s: &str) -> Option<Vec<T>> {
    let s = s.trim();
    if s.is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|p| p.trim().parse().ok()).collect()
}

pub fn join_list<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects_leftovers() {
        let mut kv = KvMap::parse("# c\na = 1\n\nb = 0.5, 2\n").unwrap();
        assert_eq!(kv.take::<u32>("a").unwrap(), Some(1));
        assert_eq!(kv.take_list::<f64>("b").unwrap(), Some(vec![0.5, 2.0]));
        assert_eq!(kv.take::<u32>("zzz").unwrap(), None);
        kv.finish().unwrap();

        let mut kv = KvMap::parse("a = 1\nstray = 2").unwrap();
        kv.take::<u32>("a").unwrap();
        assert!(matches!(kv.finish(), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn reports_bad_lines() {
        assert!(matches!(
            KvMap::parse("a = 1\nnonsense"),
            Err(Error::Parse { line: 2, .. })
        ));
        let mut kv = KvMap::parse("x = abc").unwrap();
        assert!(kv.take::<f64>("x").is_err());
    }
}
