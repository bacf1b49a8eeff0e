//! Flag and config-file parsing into a resolved parameter map.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use paultrap::floquet::ScanRange;

#[derive(Clone, Copy, Debug)]
pub enum Kind {
    Float,
    Int,
    /// `lo:hi:count`, or a single value.
    Range,
    Choice(&'static [&'static str]),
}

impl Kind {
    fn grammar(&self) -> String {
        match self {
            Kind::Float => "<number>".into(),
            Kind::Int => "<integer>".into(),
            Kind::Range => "<lo:hi:count>".into(),
            Kind::Choice(options) => options.join("|"),
        }
    }

    fn check(&self, value: &str) -> bool {
        match self {
            Kind::Float => parse_float(value).is_some(),
            Kind::Int => value.parse::<u64>().is_ok(),
            Kind::Range => parse_range(value).is_some(),
            Kind::Choice(options) => options.contains(&value),
        }
    }
}

/// One accepted key of a subcommand with its default.
#[derive(Clone, Copy, Debug)]
pub struct Param {
    pub key: &'static str,
    pub kind: Kind,
    pub default: &'static str,
    pub help: &'static str,
}

pub const fn param(key: &'static str, kind: Kind, default: &'static str, help: &'static str) -> Param {
    Param { key, kind, default, help }
}

#[derive(Debug)]
pub struct UsageError {
    pub message: String,
    pub grammar: String,
}

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error: {}\n\n{}", self.message, self.grammar)
    }
}

/// Fully resolved configuration of one run.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub subcommand: String,
    pub params: BTreeMap<String, String>,
    pub out: Option<PathBuf>,
    pub format: String,
    pub seed: u64,
    pub config_file: Option<PathBuf>,
}

impl RunConfig {
    pub fn float(&self, key: &str) -> f64 {
        parse_float(&self.params[key]).expect("validated at parse time")
    }

    pub fn int(&self, key: &str) -> usize {
        self.params[key].parse().expect("validated at parse time")
    }

    pub fn text(&self, key: &str) -> &str {
        &self.params[key]
    }

    pub fn range(&self, key: &str) -> ScanRange {
        parse_range(&self.params[key]).expect("validated at parse time")
    }
}

fn parse_float(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_range(s: &str) -> Option<ScanRange> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.as_slice() {
        [v] => ScanRange::new(parse_float(v)?, parse_float(v)?, 1).ok(),
        [lo, hi, count] => {
            let count = count.trim().parse::<usize>().ok()?;
            ScanRange::new(parse_float(lo)?, parse_float(hi)?, count).ok()
        }
        _ => None,
    }
}

/// Keys shared by every subcommand besides its own parameters.
const COMMON: [&str; 4] = ["out", "format", "seed", "config"];

pub fn grammar(subcommand: &str, params: &[Param], formats: &[&str]) -> String {
    let mut s = format!("usage: paultrap {subcommand} [--key value]... [--config FILE]\n\n");
    for p in params {
        s.push_str(&format!(
            "  --{:<10} {:<28} {} (default {})\n",
            p.key,
            p.kind.grammar(),
            p.help,
            p.default
        ));
    }
    s.push_str(&format!("  --{:<10} {:<28} output file; stdout when absent\n", "out", "<path>"));
    s.push_str(&format!(
        "  --{:<10} {:<28} output format (default {})\n",
        "format",
        formats.join("|"),
        formats[0]
    ));
    s.push_str(&format!("  --{:<10} {:<28} deterministic seed (default 0)\n", "seed", "<integer>"));
    s.push_str(&format!(
        "  --{:<10} {:<28} plain `key = value` lines; flags override\n",
        "config", "<path>"
    ));
    s
}

/// Reads `key = value` lines; `#` starts a comment.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!("config line {}: expected `key = value`, got `{line}`", lineno + 1));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(format!("config line {}: expected `key = value`, got `{line}`", lineno + 1));
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

fn split_flags(args: &[String]) -> Result<Vec<(String, String)>, String> {
    let mut pairs = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let arg = &args[i];
        let Some(body) = arg.strip_prefix("--") else {
            return Err(format!("unexpected argument `{arg}`; flags take the form --key value"));
        };
        if let Some((k, v)) = body.split_once('=') {
            pairs.push((k.to_string(), v.to_string()));
            i += 1;
        } else {
            let Some(v) = args.get(i + 1) else {
                return Err(format!("flag `--{body}` is missing its value"));
            };
            pairs.push((body.to_string(), v.clone()));
            i += 2;
        }
    }
    Ok(pairs)
}

/// Merges defaults, the config file and flags, in increasing precedence.
pub fn resolve(
    subcommand: &str,
    args: &[String],
    params: &[Param],
    formats: &[&str],
    read_file: impl Fn(&str) -> std::io::Result<String>,
) -> Result<RunConfig, UsageError> {
    let usage = |message: String| UsageError {
        message,
        grammar: grammar(subcommand, params, formats),
    };
    let flags = split_flags(args).map_err(usage)?;
    let known = |k: &str| params.iter().any(|p| p.key == k) || COMMON.contains(&k);
    for (k, _) in &flags {
        if !known(k) {
            return Err(usage(format!("unknown flag `--{k}` for `{subcommand}`")));
        }
    }
    let config_file = flags.iter().rev().find(|(k, _)| k == "config").map(|(_, v)| v.clone());
    let mut merged: BTreeMap<String, String> = BTreeMap::new();
    if let Some(path) = &config_file {
        let text = read_file(path).map_err(|e| usage(format!("cannot read config file `{path}`: {e}")))?;
        let pairs = parse_config_text(&text).map_err(usage)?;
        for (k, v) in pairs {
            if k == "config" || !known(&k) {
                return Err(usage(format!("unknown key `{k}` in config file `{path}`")));
            }
            merged.insert(k, v);
        }
    }
    for (k, v) in flags {
        if k != "config" {
            merged.insert(k, v);
        }
    }

    let mut resolved = BTreeMap::new();
    for p in params {
        let value = merged.remove(p.key).unwrap_or_else(|| p.default.to_string());
        if !p.kind.check(&value) {
            return Err(usage(format!(
                "flag `--{}` expects {}, got `{value}`",
                p.key,
                p.kind.grammar()
            )));
        }
        resolved.insert(p.key.to_string(), value);
    }
    let format = merged.remove("format").unwrap_or_else(|| formats[0].to_string());
    if !formats.contains(&format.as_str()) {
        return Err(usage(format!(
            "flag `--format` expects {} for `{subcommand}`, got `{format}`",
            formats.join("|")
        )));
    }
    let seed_text = merged.remove("seed").unwrap_or_else(|| "0".into());
    let seed = seed_text
        .parse::<u64>()
        .map_err(|_| usage(format!("flag `--seed` expects <integer>, got `{seed_text}`")))?;
    let out = merged.remove("out").map(PathBuf::from);
    Ok(RunConfig {
        subcommand: subcommand.to_string(),
        params: resolved,
        out,
        format,
        seed,
        config_file: config_file.map(PathBuf::from),
    })
}
