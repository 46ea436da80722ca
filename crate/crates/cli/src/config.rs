//! Flat key = value run configuration: file parsing, flag merging, and the
//! effective-config echo that lands in every output directory.
//!
//! Precedence is fixed: built-in defaults, then the `--config` file, then
//! command-line flags. Unknown keys are rejected rather than ignored so a
//! typo cannot silently fall back to a default.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

/// Environment variable holding the default output root.
pub const OUT_DIR_ENV: &str = "NQNET_OUT_DIR";

pub type KvMap = BTreeMap<String, String>;

/// Parses a key = value document: one pair per line, `#` comments and blank
/// lines skipped, duplicate keys rejected.
pub fn parse_kv(text: &str) -> Result<KvMap, CliError> {
    let mut map = KvMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Config(format!(
                "config line {}: expected `key = value`, got `{raw}`",
                idx + 1
            )));
        };
        let key = key.trim();
        if key.is_empty() {
            return Err(CliError::Config(format!("config line {}: empty key", idx + 1)));
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(CliError::Config(format!(
                "config line {}: duplicate key `{key}`",
                idx + 1
            )));
        }
    }
    Ok(map)
}

/// Loads the file at `path` when given; no file means an empty map.
pub fn load(path: Option<&Path>) -> Result<KvMap, CliError> {
    match path {
        None => Ok(KvMap::new()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Io(format!("reading config {}: {e}", p.display())))?;
            parse_kv(&text)
        }
    }
}

/// Rejects any key outside the command's documented set.
pub fn check_keys(map: &KvMap, allowed: &[&str]) -> Result<(), CliError> {
    for key in map.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(CliError::Config(format!(
                "unknown config key `{key}` (allowed: {})",
                allowed.join(", ")
            )));
        }
    }
    Ok(())
}

/// Parses a scalar config value, naming the key on failure.
pub fn value<T>(key: &str, raw: &str) -> Result<T, CliError>
where
    T: FromStr,
    T::Err: Display,
{
    raw.parse::<T>()
        .map_err(|e| CliError::Config(format!("config key `{key}`: cannot parse `{raw}`: {e}")))
}

/// Parses a comma-separated list of scalars.
pub fn value_list<T>(key: &str, raw: &str) -> Result<Vec<T>, CliError>
where
    T: FromStr,
    T::Err: Display,
{
    raw.split(',').map(|part| value(key, part.trim())).collect()
}

/// Parses a boolean config value (`true`/`false`/`1`/`0`).
pub fn value_bool(key: &str, raw: &str) -> Result<bool, CliError> {
    match raw {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(CliError::Config(format!(
            "config key `{key}`: expected true or false, got `{other}`"
        ))),
    }
}

/// Output directory resolution: flag, then `out_dir` file key, then
/// `$NQNET_OUT_DIR/<command>`, then `out/<command>`.
pub fn resolve_out_dir(
    flag: Option<&Path>,
    file: &KvMap,
    command: &str,
) -> PathBuf {
    if let Some(dir) = flag {
        return dir.to_path_buf();
    }
    if let Some(dir) = file.get("out_dir") {
        return PathBuf::from(dir);
    }
    let root = std::env::var(OUT_DIR_ENV).unwrap_or_else(|_| "out".to_string());
    Path::new(&root).join(command)
}

/// Creates the output directory and writes the effective configuration into
/// it as `config.txt`, one sorted key = value pair per line.
pub fn echo_config(
    dir: &Path,
    command: &str,
    pairs: &[(String, String)],
) -> Result<(), CliError> {
    fs::create_dir_all(dir)
        .map_err(|e| CliError::Io(format!("creating {}: {e}", dir.display())))?;
    let mut sorted: Vec<&(String, String)> = pairs.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut text = format!("# effective configuration for `nqnet {command}`\n");
    for (key, val) in sorted {
        text.push_str(&format!("{key} = {val}\n"));
    }
    let path = dir.join("config.txt");
    fs::write(&path, text)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))
}

/// Writes a text file inside the run directory.
pub fn write_output(dir: &Path, name: &str, content: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    fs::write(&path, content)
        .map_err(|e| CliError::Io(format!("writing {}: {e}", path.display())))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_pairs_comments_and_blanks() {
        let map = parse_kv("# header\n\nmodel = wave\nn=512\n  seed =  7 \n").unwrap();
        assert_eq!(map.get("model").unwrap(), "wave");
        assert_eq!(map.get("n").unwrap(), "512");
        assert_eq!(map.get("seed").unwrap(), "7");
    }

    #[test]
    fn rejects_malformed_lines_and_duplicates() {
        assert!(parse_kv("just words\n").is_err());
        assert!(parse_kv("= value\n").is_err());
        assert!(parse_kv("a = 1\na = 2\n").is_err());
    }

    #[test]
    fn rejects_unknown_keys() {
        let map = parse_kv("n = 3\nbogus = 1\n").unwrap();
        let err = check_keys(&map, &["n", "seed"]).unwrap_err();
        assert!(err.to_string().contains("bogus"));
        assert!(check_keys(&map, &["n", "bogus"]).is_ok());
    }

    #[test]
    fn scalar_and_list_parsing_name_the_key() {
        assert_eq!(value::<usize>("n", "12").unwrap(), 12);
        let err = value::<usize>("n", "twelve").unwrap_err();
        assert!(err.to_string().contains("`n`"));
        assert_eq!(value_list::<usize>("hidden", "64, 32").unwrap(), vec![64, 32]);
        assert!(value_bool("warm_start", "true").unwrap());
        assert!(value_bool("warm_start", "yes").is_err());
    }
}
