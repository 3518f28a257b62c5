//! Config files as flag sources. Entries become `--key value` arguments
//! placed ahead of the command line's own flags, which therefore win.

use std::path::Path;

const COMMANDS: &[&str] = &["gen-data", "train", "run", "analyze", "report"];

fn flag(key: &str) -> String {
    format!("--{}", key.trim().replace('_', "-"))
}

fn push_value(out: &mut Vec<String>, key: &str, value: &serde_json::Value) -> Result<(), String> {
    use serde_json::Value;
    match value {
        Value::Bool(true) => out.push(flag(key)),
        Value::Bool(false) | Value::Null => {}
        Value::String(s) => out.extend([flag(key), s.clone()]),
        Value::Number(n) => out.extend([flag(key), n.to_string()]),
        Value::Array(items) => {
            out.push(flag(key));
            for v in items {
                match v {
                    Value::String(s) => out.push(s.clone()),
                    Value::Number(n) => out.push(n.to_string()),
                    _ => return Err(format!("config key `{key}`: unsupported list item")),
                }
            }
        }
        Value::Object(_) => return Err(format!("config key `{key}`: nested tables are not flags")),
    }
    Ok(())
}

/// Flags described by a config file.
pub fn file_flags(path: &Path) -> Result<Vec<String>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut out = Vec::new();
    if text.trim_start().starts_with('{') {
        let map: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        for (k, v) in &map {
            push_value(&mut out, k, v)?;
        }
        return Ok(out);
    }
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), n + 1))?;
        let v = v.trim();
        let value = match v {
            "true" => serde_json::Value::Bool(true),
            "false" => serde_json::Value::Bool(false),
            _ => serde_json::Value::String(v.to_string()),
        };
        push_value(&mut out, k, &value)?;
    }
    Ok(out)
}

/// The argument vector with `--config FILE` replaced by the file's flags,
/// inserted right after the subcommand.
pub fn merge(argv: &[String]) -> Result<Vec<String>, String> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut file = None;
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            file = Some(it.next().ok_or("--config needs a file")?.clone());
        } else if let Some(p) = a.strip_prefix("--config=") {
            file = Some(p.to_string());
        } else {
            rest.push(a.clone());
        }
    }
    let Some(file) = file else {
        return Ok(rest);
    };
    let flags = file_flags(Path::new(&file))?;
    let at = rest
        .iter()
        .position(|a| COMMANDS.contains(&a.as_str()))
        .ok_or("--config needs a subcommand")?;
    rest.splice(at + 1..at + 1, flags);
    Ok(rest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn key_value_file_lands_before_explicit_flags() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "# run settings\njobs = 2\nregime=ar\nverbose=false\n").unwrap();
        let out = merge(&args(&format!("x run --config {} --jobs 4", p.display()))).unwrap();
        assert_eq!(out, args("x run --jobs 2 --regime ar --jobs 4"));
    }

    #[test]
    fn json_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"no_span_aware": true, "epochs": 3, "compare": ["a", "b"]}"#).unwrap();
        let out = merge(&args(&format!("x --config={} train", p.display()))).unwrap();
        assert_eq!(out, args("x train --compare a b --epochs 3 --no-span-aware"));
    }

    #[test]
    fn malformed_line_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "jobs 2\n").unwrap();
        assert!(merge(&args(&format!("x run --config {}", p.display()))).unwrap_err().contains(":1:"));
    }
}
