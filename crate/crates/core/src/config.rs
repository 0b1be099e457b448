//! Sectioned `key = value` config files.
//!
//! ```text
//! # comment
//! [network]
//! depth = 2
//! width = 40
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<(String, String), String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Parse(format!("line {}: unterminated section header", lineno + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
            let key = (section.clone(), k.trim().to_string());
            if values.insert(key, v.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key `{}`", lineno + 1, k.trim())));
            }
        }
        Ok(Self { values })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.values.get(&(section.to_string(), key.to_string())).map(String::as_str)
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key).ok_or_else(|| Error::MissingKey(format!("{section}.{key}")))
    }

    pub fn require_parse<T: FromStr>(&self, section: &str, key: &str) -> Result<T> {
        parse_value(section, key, self.require(section, key)?)
    }

    pub fn parse_or<T: FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.get(section, key) {
            Some(v) => parse_value(section, key, v),
            None => Ok(default),
        }
    }

    /// Comma separated list; an empty string is an empty list.
    pub fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>> {
        v.split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<T>().map_err(|_| Error::Parse(format!("bad list entry `{s}`"))))
            .collect()
    }
}

fn parse_value<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T> {
    v.parse::<T>().map_err(|_| Error::InvalidConfig(format!("{section}.{key}: cannot parse `{v}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let c = Config::parse("top = 1\n[a]\nx = 2 # two\n\n[b]\nx=  hello \nl = 1, 2,3\n").unwrap();
        assert_eq!(c.get("", "top"), Some("1"));
        assert_eq!(c.require_parse::<i32>("a", "x").unwrap(), 2);
        assert_eq!(c.get("b", "x"), Some("hello"));
        assert_eq!(Config::parse_list::<u32>(c.get("b", "l").unwrap()).unwrap(), vec![1, 2, 3]);
        assert_eq!(c.parse_or("a", "missing", 7u8).unwrap(), 7);
    }

    #[test]
    fn reports_missing_and_bad_keys() {
        let c = Config::parse("[a]\nx = nope\n").unwrap();
        match c.require("a", "y") {
            Err(Error::MissingKey(k)) => assert_eq!(k, "a.y"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(c.require_parse::<f64>("a", "x"), Err(Error::InvalidConfig(_))));
        assert!(Config::parse("[a\n").is_err());
        assert!(Config::parse("[a]\nx = 1\nx = 2\n").is_err());
        assert!(Config::parse("[a]\njunk\n").is_err());
    }
}
