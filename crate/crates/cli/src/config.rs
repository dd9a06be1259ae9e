use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Debug)]
pub enum CliError {
    Core(cca_core::Error),
    Usage(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Numeric(_) => 3,
            CliError::Core(_) | CliError::Usage(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => e.fmt(f),
            CliError::Usage(msg) | CliError::Numeric(msg) => f.write_str(msg),
        }
    }
}

impl From<cca_core::Error> for CliError {
    fn from(e: cca_core::Error) -> Self {
        CliError::Core(e)
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// Overlays the flags given on the command line onto the config file.
pub fn resolve<T: Serialize + DeserializeOwned>(flags: &T, config: Option<&Path>) -> CliResult<T> {
    let mut merged = match config {
        None => Map::new(),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            match serde_json::from_str(&text) {
                Ok(Value::Object(map)) => map,
                Ok(_) => {
                    return Err(CliError::Usage(format!(
                        "config {} must be a JSON object",
                        path.display()
                    )))
                }
                Err(e) => return Err(CliError::Usage(format!("config {}: {e}", path.display()))),
            }
        }
    };
    if let Value::Object(given) =
        serde_json::to_value(flags).map_err(|e| CliError::Usage(e.to_string()))?
    {
        merged.extend(given);
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| {
        let origin = config.map_or("flags".to_string(), |p| p.display().to_string());
        CliError::Usage(format!("invalid configuration ({origin}): {e}"))
    })
}

pub fn require<'a>(value: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a PathBuf> {
    value
        .as_ref()
        .ok_or_else(|| CliError::Usage(format!("--{flag} is required (flag or config key)")))
}

#[derive(Debug, Serialize)]
pub struct Report<C: Serialize, R: Serialize> {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub seed: u64,
    pub wall_time_secs: f64,
    pub config: C,
    pub result: R,
}

/// Prints the report to stdout and optionally writes it to `path`.
pub fn emit<C: Serialize, R: Serialize>(
    command: &'static str,
    seed: u64,
    started: Instant,
    config: C,
    result: R,
    path: Option<&Path>,
) -> CliResult<()> {
    let report = Report {
        command,
        tool_version: cca_core::VERSION,
        seed,
        wall_time_secs: started.elapsed().as_secs_f64(),
        config,
        result,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Usage(e.to_string()))?;
    println!("{text}");
    if let Some(path) = path {
        fs::write(path, text + "\n")
            .map_err(|e| CliError::Usage(format!("cannot write report {}: {e}", path.display())))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, Default, Serialize, Deserialize, PartialEq)]
    #[serde(default, deny_unknown_fields)]
    struct Demo {
        #[serde(skip_serializing_if = "Option::is_none")]
        a: Option<u32>,
        #[serde(skip_serializing_if = "Option::is_none")]
        b: Option<String>,
        #[serde(skip_serializing_if = "std::ops::Not::not")]
        flag: bool,
    }

    fn config_file(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn flags_override_config_values() {
        let f = config_file(r#"{"a": 1, "b": "file", "flag": true}"#);
        let flags = Demo {
            a: Some(7),
            ..Demo::default()
        };
        let got = resolve(&flags, Some(f.path())).unwrap();
        assert_eq!(
            got,
            Demo {
                a: Some(7),
                b: Some("file".into()),
                flag: true
            }
        );
    }

    #[test]
    fn no_config_keeps_flags() {
        let flags = Demo {
            b: Some("x".into()),
            ..Demo::default()
        };
        assert_eq!(resolve(&flags, None).unwrap(), flags);
    }

    #[test]
    fn bad_configs_are_usage_errors() {
        for text in [
            r#"{"unknown": 1}"#,
            "[1, 2]",
            "{not json",
            r#"{"a": "text"}"#,
        ] {
            let f = config_file(text);
            let err = resolve(&Demo::default(), Some(f.path())).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text}: {err}");
        }
        let missing = resolve(
            &Demo::default(),
            Some(Path::new("/nonexistent/config.json")),
        )
        .unwrap_err();
        assert_eq!(missing.exit_code(), 2);
    }
}
