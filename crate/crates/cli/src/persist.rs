//! Lossless campaign persistence: JSON whose floating-point numbers are
//! written as hexadecimal floats.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Number, Value};
use tad_core::campaign::{CampaignState, IterationRecord};

use crate::config::CampaignConfig;
use crate::error::{CliError, Result};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersistedState {
    pub format_version: u64,
    pub config: CampaignConfig,
    /// Campaign state with its history moved to [`Self::history`].
    pub state: CampaignState,
    pub history: Vec<IterationRecord>,
}

impl PersistedState {
    pub fn new(config: CampaignConfig, mut state: CampaignState) -> Self {
        let history = std::mem::take(&mut state.history);
        Self {
            format_version: FORMAT_VERSION,
            config,
            state,
            history,
        }
    }

    /// Reassembled campaign state.
    pub fn into_parts(self) -> (CampaignConfig, CampaignState) {
        let mut state = self.state;
        state.history = self.history;
        (self.config, state)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut v = serde_json::to_value(self)
            .map_err(|e| CliError::Config(format!("state is not serializable: {e}")))?;
        encode_floats(&mut v);
        serde_json::to_string_pretty(&v)
            .map_err(|e| CliError::Config(format!("state is not serializable: {e}")))
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let mut v: Value = parse_json(text, origin)?;
        let found = v
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| parse_error(origin, 0, 0, 0, "missing integer format_version".into()))?;
        if found != FORMAT_VERSION {
            return Err(CliError::UnsupportedVersion {
                found,
                supported: FORMAT_VERSION,
            });
        }
        decode_floats(&mut v);
        serde_json::from_value(v).map_err(|e| parse_error(origin, 0, 0, 0, e.to_string()))
    }
}

pub fn save_state(config: &CampaignConfig, state: &CampaignState, path: &Path) -> Result<()> {
    let text = PersistedState::new(config.clone(), state.clone()).to_json()?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn load_state(path: &Path) -> Result<PersistedState> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    PersistedState::from_json(&text, path)
}

/// Parses JSON, reporting failures with a byte offset into `text`.
pub(crate) fn parse_json<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        parse_error(
            origin,
            byte_offset(text, line, column),
            line,
            column,
            e.to_string(),
        )
    })
}

fn parse_error(
    origin: &Path,
    offset: usize,
    line: usize,
    column: usize,
    message: String,
) -> CliError {
    CliError::Parse {
        path: origin.display().to_string(),
        offset,
        line,
        column,
        message,
    }
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (start + column.saturating_sub(1)).min(text.len())
}

/// Exact hexadecimal rendering of a finite `f64`, e.g. `0x1.8p+1` for 3.
pub fn format_hex_f64(v: f64) -> String {
    let bits = v.to_bits();
    let sign = if bits >> 63 == 1 { "-" } else { "" };
    let exp = ((bits >> 52) & 0x7ff) as i64;
    let mant = bits & ((1u64 << 52) - 1);
    let (lead, e) = match (exp, mant) {
        (0, 0) => return format!("{sign}0x0p+0"),
        (0, _) => (0, -1022),
        _ => (1, exp - 1023),
    };
    let digits = format!("{mant:013x}");
    let digits = digits.trim_end_matches('0');
    if digits.is_empty() {
        format!("{sign}0x{lead}p{e:+}")
    } else {
        format!("{sign}0x{lead}.{digits}p{e:+}")
    }
}

pub fn parse_hex_f64(s: &str) -> Option<f64> {
    hexf_parse::parse_hexf64(s, false).ok()
}

fn looks_hex(s: &str) -> bool {
    s.strip_prefix('-').unwrap_or(s).starts_with("0x")
}

fn encode_floats(v: &mut Value) {
    match v {
        Value::Number(n) if n.is_f64() => {
            if let Some(f) = n.as_f64() {
                *v = Value::String(format_hex_f64(f));
            }
        }
        Value::Array(items) => items.iter_mut().for_each(encode_floats),
        Value::Object(map) => map.values_mut().for_each(encode_floats),
        _ => {}
    }
}

fn decode_floats(v: &mut Value) {
    match v {
        Value::String(s) if looks_hex(s) => {
            if let Some(n) = parse_hex_f64(s).and_then(Number::from_f64) {
                *v = Value::Number(n);
            }
        }
        Value::Array(items) => items.iter_mut().for_each(decode_floats),
        Value::Object(map) => map.values_mut().for_each(decode_floats),
        _ => {}
    }
}
