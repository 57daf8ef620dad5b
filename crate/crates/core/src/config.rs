//! Flat `key = value` configuration text with layering and snapshots.
//!
//! Blank lines and `#` comments are ignored. Later layers override earlier ones.
//! Settings structs expose their fields through [`Settings::visit`], which serves
//! both for applying a layer and for taking a snapshot.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeyValues {
    entries: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
}

impl KeyValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = KeyValues::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", n + 1)))?;
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Parse(format!("line {}: empty key", n + 1)));
            }
            kv.entries.insert(k.to_string(), v.trim().to_string());
        }
        Ok(kv)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        let v = self.entries.get(key).map(String::as_str);
        if v.is_some() {
            self.used.borrow_mut().insert(key.to_string());
        }
        v
    }

    /// Overrides entries of `self` with those of `top`.
    pub fn layer(&mut self, top: &KeyValues) {
        for (k, v) in &top.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Keys never read through [`KeyValues::get`].
    pub fn unused(&self) -> Vec<String> {
        let used = self.used.borrow();
        self.entries.keys().filter(|k| !used.contains(*k)).cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

/// A scalar or small tuple that round-trips through text.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! from_str_value {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse::<$t>().map_err(|e| Error::Parse(format!("`{s}`: {e}")))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

from_str_value!(f64, usize, u64, bool, String);

impl<X: ConfigValue + Copy> ConfigValue for [X; 3] {
    fn parse_value(s: &str) -> Result<Self> {
        let v: Vec<X> = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|w| !w.is_empty())
            .map(X::parse_value)
            .collect::<Result<_>>()?;
        if v.len() != 3 {
            return Err(Error::Parse(format!("`{s}`: expected three values")));
        }
        Ok([v[0], v[1], v[2]])
    }
    fn render(&self) -> String {
        format!("{},{},{}", self[0].render(), self[1].render(), self[2].render())
    }
}

impl<X: ConfigValue> ConfigValue for Option<X> {
    fn parse_value(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("none") {
            Ok(None)
        } else {
            X::parse_value(s).map(Some)
        }
    }
    fn render(&self) -> String {
        match self {
            Some(x) => x.render(),
            None => "none".to_string(),
        }
    }
}

pub trait Visitor {
    fn value<X: ConfigValue>(&mut self, key: &str, x: &mut X) -> Result<()>;
}

/// A settings struct whose fields are addressable as `prefix.field`.
pub trait Settings {
    fn visit<V: Visitor>(&mut self, prefix: &str, v: &mut V) -> Result<()>;

    fn apply(&mut self, kv: &KeyValues, prefix: &str) -> Result<()> {
        self.visit(prefix, &mut Reader(kv))
    }

    fn snapshot(&self, prefix: &str, out: &mut KeyValues)
    where
        Self: Clone,
    {
        let mut copy = self.clone();
        copy.visit(prefix, &mut Writer(out)).expect("writing a snapshot cannot fail");
    }
}

pub fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

struct Reader<'a>(&'a KeyValues);

impl Visitor for Reader<'_> {
    fn value<X: ConfigValue>(&mut self, key: &str, x: &mut X) -> Result<()> {
        if let Some(s) = self.0.get(key) {
            *x = X::parse_value(s).map_err(|e| Error::Parse(format!("{key}: {e}")))?;
        }
        Ok(())
    }
}

struct Writer<'a>(&'a mut KeyValues);

impl Visitor for Writer<'_> {
    fn value<X: ConfigValue>(&mut self, key: &str, x: &mut X) -> Result<()> {
        self.0.set(key, x.render());
        Ok(())
    }
}

/// Implements [`Settings`] for a struct by listing its fields.
#[macro_export]
macro_rules! settings {
    ($ty:ty { $($field:ident),* $(,)? } $(nested { $($sub:ident),* $(,)? })?) => {
        impl $crate::config::Settings for $ty {
            fn visit<V: $crate::config::Visitor>(&mut self, prefix: &str, v: &mut V) -> $crate::Result<()> {
                $( v.value(&$crate::config::join(prefix, stringify!($field)), &mut self.$field)?; )*
                $($( self.$sub.visit(&$crate::config::join(prefix, stringify!($sub)), v)?; )*)?
                Ok(())
            }
        }
    };
}
