// SPDX-License-Identifier: Apache-2.0

//! Line-delimited result records.

use std::fmt;

/// One test outcome, printed as a single `key=value` line.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub test: String,
    pub statistic: f64,
    pub p_value: Option<f64>,
    pub pass: bool,
    pub detail: String,
}

impl Record {
    pub fn new(test: &str, statistic: f64, p_value: Option<f64>, pass: bool) -> Self {
        Record {
            test: test.to_string(),
            statistic,
            p_value,
            pass,
            detail: String::new(),
        }
    }

    pub fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }
}

impl fmt::Display for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "test={} stat={:.6}", self.test, self.statistic)?;
        match self.p_value {
            Some(p) => write!(f, " p={p:.6e}")?,
            None => f.write_str(" p=-")?,
        }
        write!(f, " result={}", if self.pass { "PASS" } else { "FAIL" })?;
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

/// Human-readable tally.
pub fn summary(records: &[Record]) -> String {
    let passed = records.iter().filter(|r| r.pass).count();
    let failed: Vec<&str> = records
        .iter()
        .filter(|r| !r.pass)
        .map(|r| r.test.as_str())
        .collect();
    if failed.is_empty() {
        format!("{passed}/{} passed", records.len())
    } else {
        format!(
            "{passed}/{} passed; failed: {}",
            records.len(),
            failed.join(", ")
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn line_format() {
        let r = Record::new("uniform", 1.5, Some(0.25), true).detail("n=10");
        assert_eq!(
            r.to_string(),
            "test=uniform stat=1.500000 p=2.500000e-1 result=PASS n=10"
        );
        let s = Record::new("shape", 0.0, None, false);
        assert_eq!(s.to_string(), "test=shape stat=0.000000 p=- result=FAIL");
        assert_eq!(summary(&[r, s]), "1/2 passed; failed: shape");
    }
}
