use serde::Serialize;

/// One pass/fail observation produced by a check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Finding {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of a property check. Checks never error; failures are findings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub passed: bool,
    pub findings: Vec<Finding>,
}

pub type ValidationReport = CheckReport;

impl CheckReport {
    pub fn new(name: impl Into<String>) -> Self {
        CheckReport { name: name.into(), passed: true, findings: Vec::new() }
    }

    pub fn record(&mut self, check: impl Into<String>, passed: bool, detail: impl Into<String>) {
        self.passed &= passed;
        self.findings.push(Finding { check: check.into(), passed, detail: detail.into() });
    }

    pub fn pass(&mut self, check: impl Into<String>, detail: impl Into<String>) {
        self.record(check, true, detail);
    }

    pub fn fail(&mut self, check: impl Into<String>, detail: impl Into<String>) {
        self.record(check, false, detail);
    }

    pub fn failures(&self) -> impl Iterator<Item = &Finding> {
        self.findings.iter().filter(|f| !f.passed)
    }

    pub fn merge(&mut self, other: CheckReport) {
        self.passed &= other.passed;
        self.findings.extend(other.findings);
    }
}
