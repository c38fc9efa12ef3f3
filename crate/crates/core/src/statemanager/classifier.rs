//! Rule-based read-only command classifier.

use serde::{Deserialize, Serialize};

pub const DEFAULT_READ_ONLY_PATTERNS: &[&str] = &[
    "grep",
    "cat",
    "find",
    "ls",
    "git diff",
    "python -m pytest --collect-only",
];

/// Matches whitespace-normalized commands against token-prefix patterns.
/// `ls` matches `ls -la` but not `lsof`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classifier {
    patterns: Vec<String>,
}

impl Default for Classifier {
    fn default() -> Self {
        Self::new(DEFAULT_READ_ONLY_PATTERNS.iter().copied())
    }
}

pub fn normalize_command(cmd: &str) -> String {
    cmd.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Classifier {
    pub fn new<S: AsRef<str>>(patterns: impl IntoIterator<Item = S>) -> Self {
        let patterns = patterns
            .into_iter()
            .map(|p| normalize_command(p.as_ref()))
            .filter(|p| !p.is_empty())
            .collect();
        Classifier { patterns }
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    /// The first pattern matching `cmd`, if any.
    pub fn matching_pattern(&self, cmd: &str) -> Option<&str> {
        let cmd = normalize_command(cmd);
        self.patterns
            .iter()
            .find(|p| {
                cmd.strip_prefix(p.as_str())
                    .is_some_and(|rest| rest.is_empty() || rest.starts_with(' '))
            })
            .map(String::as_str)
    }

    pub fn is_read_only(&self, cmd: &str) -> bool {
        self.matching_pattern(cmd).is_some()
    }
}
