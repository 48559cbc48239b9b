use std::fmt::Display;

use thiserror::Error;

/// A failed command. `code` is the process exit status.
#[derive(Debug, Error)]
#[error("{msg}")]
pub struct CliError {
    pub kind: &'static str,
    pub msg: String,
    pub code: i32,
}

impl CliError {
    pub const USAGE: i32 = 2;
    pub const FAILURE: i32 = 1;

    /// Bad flag or setting value.
    pub fn invalid(msg: impl Display) -> Self {
        Self {
            kind: "validation",
            msg: msg.to_string(),
            code: Self::USAGE,
        }
    }

    pub fn config(msg: impl Display) -> Self {
        Self {
            kind: "config",
            msg: msg.to_string(),
            code: Self::USAGE,
        }
    }

    pub fn failed(kind: &'static str, msg: impl Display) -> Self {
        Self {
            kind,
            msg: msg.to_string(),
            code: Self::FAILURE,
        }
    }

    /// One line: `error: kind=<kind> msg="<escaped message>"`.
    pub fn line(&self) -> String {
        format!("error: kind={} msg={}", self.kind, quote(&self.msg))
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if c.is_control() => out.push_str(&format!("\\u{{{:x}}}", c as u32)),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_line_is_single_line() {
        let e = CliError::failed("io", "bad \"file\"\nsecond line");
        assert_eq!(e.line(), r#"error: kind=io msg="bad \"file\"\nsecond line""#);
        assert!(!e.line().contains('\n'));
    }
}
