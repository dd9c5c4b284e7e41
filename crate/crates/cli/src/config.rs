//! Config files supply flag defaults. A TOML file holds top-level keys that
//! apply to every command and one table per command:
//!
//! ```toml
//! seed = 7
//! [eval]
//! method = "alpha-qe"
//! nqe = 8
//! ```
//!
//! A `manifest.json` from an earlier run is accepted as well. Flags given on
//! the command line always win.

use std::ffi::OsString;
use std::path::Path;

use anyhow::Result;
use qexpand_core::Error;
use serde_json::Value;

fn config_path(args: &[OsString]) -> Option<OsString> {
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().cloned();
        }
        if let Some(v) = s.strip_prefix("--config=") {
            return Some(v.into());
        }
    }
    None
}

fn config_error(path: &Path, msg: impl std::fmt::Display) -> anyhow::Error {
    Error::Config(format!("{}: {msg}", path.display())).into()
}

/// Flag values for `command` from a TOML config or a manifest, as JSON.
pub fn load(path: &Path, command: &str) -> Result<serde_json::Map<String, Value>> {
    let text = std::fs::read_to_string(path).map_err(|e| config_error(path, e))?;
    let mut out = serde_json::Map::new();
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: Value = serde_json::from_str(&text).map_err(|e| config_error(path, e))?;
        let recorded = manifest.get("command").and_then(Value::as_str).unwrap_or_default();
        if recorded != command {
            return Err(config_error(
                path,
                format!("manifest is for `{recorded}`, not `{command}`"),
            ));
        }
        if let Some(Value::Object(m)) = manifest.get("config") {
            out.extend(m.clone());
        }
        return Ok(out);
    }
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| config_error(path, e.message()))?;
    let json = serde_json::to_value(table).map_err(|e| config_error(path, e))?;
    let Value::Object(map) = json else { unreachable!() };
    for (k, v) in &map {
        if !v.is_object() {
            out.insert(k.clone(), v.clone());
        }
    }
    if let Some(section) = map.get(command) {
        let Value::Object(section) = section else {
            return Err(config_error(path, format!("`{command}` must be a table")));
        };
        out.extend(section.clone());
    }
    Ok(out)
}

fn render(v: &Value) -> Option<String> {
    match v {
        Value::Null | Value::Bool(_) => None,
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Array(items) => Some(items.iter().filter_map(render).collect::<Vec<_>>().join(",")),
        Value::Object(_) => None,
    }
}

/// Turns config entries into flags, skipping any the user passed.
pub fn to_flags(values: &serde_json::Map<String, Value>, given: &[OsString]) -> Vec<OsString> {
    let passed = |key: &str| {
        let flag = format!("--{key}");
        given.iter().any(|a| {
            let a = a.to_string_lossy();
            a == flag || a.starts_with(&format!("{flag}="))
        })
    };
    let mut flags = Vec::new();
    for (key, v) in values {
        if key == "config" || passed(key) {
            continue;
        }
        match v {
            Value::Bool(true) => flags.push(format!("--{key}").into()),
            Value::Array(a) if a.is_empty() => {}
            _ => {
                if let Some(s) = render(v) {
                    flags.push(format!("--{key}").into());
                    flags.push(s.into());
                }
            }
        }
    }
    flags
}

/// Inserts config-supplied flags right after the subcommand.
pub fn apply(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    if argv.len() < 2 {
        return Ok(argv);
    }
    let rest = &argv[2..];
    let Some(path) = config_path(rest) else {
        return Ok(argv);
    };
    let command = argv[1].to_string_lossy().into_owned();
    let values = load(Path::new(&path), &command)?;
    let mut out = argv[..2].to_vec();
    out.extend(to_flags(&values, rest));
    out.extend_from_slice(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_table_overrides_top_level_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(
            &p,
            "seed = 3\nnqe = 1\n[eval]\nnqe = [1, 2]\nmethod = \"aqe\"\nposition-only = true\n",
        )
        .unwrap();
        let values = load(&p, "eval").unwrap();
        let given: Vec<OsString> = vec!["--method".into(), "dqe".into()];
        let flags: Vec<String> = to_flags(&values, &given)
            .into_iter()
            .map(|s| s.into_string().unwrap())
            .collect();
        assert_eq!(flags, ["--nqe", "1,2", "--position-only", "--seed", "3"]);
    }

    #[test]
    fn manifest_for_another_command_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        std::fs::write(&p, r#"{"command": "synth", "config": {"classes": 5}}"#).unwrap();
        assert!(load(&p, "eval").is_err());
        assert_eq!(load(&p, "synth").unwrap()["classes"], 5);
    }
}
