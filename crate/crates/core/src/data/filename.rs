use regex::Regex;

use crate::{Error, Result};

/// Market1501-style `<pid>_c<cam>...`; the pid may be `-1` for distractors.
pub const DEFAULT_PATTERN: &str = r"^(?P<id>-?\d+)_c(?P<cam>\d+)";

/// Regex-based label extraction rule with named groups `id` and `cam`.
#[derive(Debug, Clone)]
pub struct LabelPattern {
    regex: Regex,
}

impl LabelPattern {
    pub fn new(pattern: &str) -> Result<Self> {
        let regex = Regex::new(pattern)
            .map_err(|e| Error::config(format!("bad filename pattern `{pattern}`: {e}")))?;
        let names: Vec<_> = regex.capture_names().flatten().collect();
        for group in ["id", "cam"] {
            if !names.contains(&group) {
                return Err(Error::config(format!(
                    "filename pattern `{pattern}` lacks a `(?P<{group}>...)` group"
                )));
            }
        }
        Ok(Self { regex })
    }

    pub fn as_str(&self) -> &str {
        self.regex.as_str()
    }
}

impl Default for LabelPattern {
    fn default() -> Self {
        Self::new(DEFAULT_PATTERN).expect("default pattern is valid")
    }
}

/// Extracts `(identity, camera)` from the file name component of `path`.
pub fn parse_entry(path: &str, pattern: &LabelPattern) -> Result<(i64, u32)> {
    let name = path.rsplit(['/', '\\']).next().unwrap_or(path);
    let fail = |reason: String| Error::Parse {
        file: path.to_string(),
        reason,
    };
    let caps = pattern
        .regex
        .captures(name)
        .ok_or_else(|| fail(format!("does not match `{}`", pattern.as_str())))?;
    let identity: i64 = caps["id"]
        .parse()
        .map_err(|e| fail(format!("identity: {e}")))?;
    let camera: u32 = caps["cam"]
        .parse()
        .map_err(|e| fail(format!("camera: {e}")))?;
    if camera == 0 {
        return Err(fail("camera ids start at 1".into()));
    }
    Ok((identity, camera))
}
