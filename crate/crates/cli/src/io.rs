//! Line-oriented file handoffs between pipeline stages.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use diffplan_core::proposer::{parse_response, serialize_response, ResponseRecord};
use diffplan_core::scene::Scenario;

use crate::CliError;

pub fn read_scenarios(path: &Path) -> Result<Vec<Scenario>, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot open scenarios {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let scenario: Scenario = serde_json::from_str(&line).map_err(|e| {
            CliError::Data(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        out.push(scenario);
    }
    Ok(out)
}

pub fn write_scenarios(path: &Path, scenarios: &[Scenario]) -> Result<(), CliError> {
    let file = fs::File::create(path)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for s in scenarios {
        let line = serde_json::to_string(s)
            .map_err(|e| CliError::Data(format!("serializing scenario {}: {e}", s.id)))?;
        writeln!(w, "{line}").map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))
}

pub fn read_responses(path: &Path, expected_len: usize) -> Result<Vec<ResponseRecord>, CliError> {
    let file = fs::File::open(path)
        .map_err(|e| CliError::Config(format!("cannot open responses {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let record = parse_response(&line, expected_len).map_err(|e| {
            CliError::Data(format!("{} line {}: {e}", path.display(), lineno + 1))
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_responses(path: &Path, records: &[ResponseRecord]) -> Result<(), CliError> {
    let file = fs::File::create(path)
        .map_err(|e| CliError::Config(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", serialize_response(r)).map_err(|e| CliError::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Data(e.to_string()))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text)
        .map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}
