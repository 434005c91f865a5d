//! Invocation of external command-line tools (normalizers, classifiers)
//! that talk to the pipeline through files.

use std::path::Path;
use std::process::Command;

use crate::error::{Error, Result};

/// A program plus leading arguments, e.g. `python3 tools/cyclegan.py`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalToolSpec {
    pub program: String,
    pub args: Vec<String>,
}

impl ExternalToolSpec {
    /// Split a command line on whitespace. No shell quoting is supported.
    pub fn parse(command: &str) -> Result<Self> {
        let mut parts = command.split_whitespace().map(str::to_string);
        let program = parts
            .next()
            .ok_or_else(|| Error::InvalidArgument("empty external command".into()))?;
        Ok(ExternalToolSpec {
            program,
            args: parts.collect(),
        })
    }

    pub fn command_line(&self) -> String {
        std::iter::once(self.program.as_str())
            .chain(self.args.iter().map(String::as_str))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Run with `extra` appended to the configured arguments, in `cwd`.
    pub fn run(&self, cwd: &Path, extra: &[&str]) -> Result<()> {
        let output = Command::new(&self.program)
            .args(&self.args)
            .args(extra)
            .current_dir(cwd)
            .output()
            .map_err(|e| {
                Error::ExternalTool(format!("cannot start {:?}: {e}", self.command_line()))
            })?;
        if !output.status.success() {
            let stderr = String::from_utf8_lossy(&output.stderr);
            return Err(Error::ExternalTool(format!(
                "{:?} {} exited with {}: {}",
                self.command_line(),
                extra.join(" "),
                output.status,
                stderr.trim()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_splits_program_and_args() {
        let spec = ExternalToolSpec::parse("  python3 tool.py --fast ").unwrap();
        assert_eq!(spec.program, "python3");
        assert_eq!(spec.args, vec!["tool.py", "--fast"]);
        assert!(ExternalToolSpec::parse("   ").is_err());
    }

    #[test]
    fn nonzero_exit_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExternalToolSpec::parse("sh -c").unwrap();
        assert!(spec.run(dir.path(), &["exit 0"]).is_ok());
        let err = spec.run(dir.path(), &["echo broken >&2; exit 3"]).unwrap_err();
        assert!(err.to_string().contains("broken"));
    }
}
