//! Crash report parsing and normalization.
//!
//! A [`CrashReport`] is the unit the rest of the pipeline works on: a
//! normalized stacktrace (innermost frame first), the crash line, the
//! original tool output, and a content-derived fingerprint used for
//! exact deduplication.

use std::fmt;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metric::{frame_key, FrameKeyMode};

/// Wire format version of `*.report.json` files.
pub const REPORT_VERSION: u32 = 1;

/// One call-stack entry.
///
/// At least one of `function`, `module`, `address` is populated;
/// `line` is 0 whenever `file` is empty.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    pub function: String,
    pub module: String,
    pub file: String,
    pub line: u64,
    pub column: u64,
    pub address: u64,
}

impl Frame {
    /// True when the frame carries enough identity to take part in
    /// comparison: a function name, a module path, or an address.
    pub fn is_identifiable(&self) -> bool {
        !self.function.is_empty() || !self.module.is_empty() || self.address != 0
    }
}

/// An ordered call stack, index 0 = innermost (crash site) frame.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Stacktrace {
    pub frames: Vec<Frame>,
}

impl Stacktrace {
    pub fn new(frames: Vec<Frame>) -> Self {
        Stacktrace { frames }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Report fingerprint: lowercase hex SHA-256 over the frame-key sequence.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReportId(String);

impl ReportId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ReportId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<String> for ReportId {
    fn from(s: String) -> Self {
        ReportId(s)
    }
}

/// A parsed crash: normalized stacktrace plus the crash location and the
/// original tool output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrashReport {
    pub id: ReportId,
    pub crashline: String,
    pub stacktrace: Stacktrace,
    pub raw: String,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    version: u32,
    id: String,
    crashline: String,
    frames: Vec<Frame>,
    raw: String,
}

impl CrashReport {
    /// Builds a report from already-normalized frames.
    pub fn from_normalized(trace: Stacktrace, raw: String, mode: FrameKeyMode) -> Result<Self> {
        if trace.is_empty() {
            return Err(Error::EmptyTrace);
        }
        let id = fingerprint(&trace, mode);
        let crashline = crashline(&trace);
        Ok(CrashReport {
            id,
            crashline,
            stacktrace: trace,
            raw,
        })
    }

    /// Parses raw tool output, applies the ignore rules and fingerprints
    /// the surviving frames.
    pub fn from_raw(text: &str, rules: &IgnoreRules, mode: FrameKeyMode) -> Result<Self> {
        let trace = parse_raw_stacktrace(text)?;
        let trace = normalize(trace, rules)?;
        Self::from_normalized(trace, text.to_string(), mode)
    }

    /// Serializes the report into its canonical JSON form.
    pub fn to_json(&self) -> String {
        let file = ReportFile {
            version: REPORT_VERSION,
            id: self.id.as_str().to_string(),
            crashline: self.crashline.clone(),
            frames: self.stacktrace.frames.clone(),
            raw: self.raw.clone(),
        };
        let mut out = serde_json::to_string_pretty(&file).expect("report serialization");
        out.push('\n');
        out
    }

    /// Canonical file name for this report.
    pub fn file_name(&self) -> String {
        format!("{}.report.json", self.id)
    }
}

/// Parses a canonical report file and verifies its fingerprint under the
/// given frame-key mode.
pub fn parse_report_json(bytes: &[u8], mode: FrameKeyMode) -> Result<CrashReport> {
    let file: ReportFile =
        serde_json::from_slice(bytes).map_err(|e| Error::Parse(format!("bad report: {e}")))?;
    if file.version != REPORT_VERSION {
        return Err(Error::Parse(format!(
            "unsupported report version {}",
            file.version
        )));
    }
    let trace = Stacktrace::new(file.frames);
    if trace.is_empty() {
        return Err(Error::Parse("report has no frames".into()));
    }
    for (i, frame) in trace.frames.iter().enumerate() {
        if !frame.is_identifiable() {
            return Err(Error::Parse(format!("frame {i} has no identity")));
        }
        if frame.file.is_empty() && frame.line != 0 {
            return Err(Error::Parse(format!("frame {i} has a line but no file")));
        }
    }
    let actual = fingerprint(&trace, mode);
    if actual.as_str() != file.id {
        return Err(Error::FingerprintMismatch {
            claimed: file.id,
            actual: actual.as_str().to_string(),
        });
    }
    Ok(CrashReport {
        id: actual,
        crashline: file.crashline,
        stacktrace: trace,
        raw: file.raw,
    })
}

/// Computes the report fingerprint: SHA-256 over the length-prefixed
/// frame-key sequence. Equal key sequences give equal fingerprints.
pub fn fingerprint(trace: &Stacktrace, mode: FrameKeyMode) -> ReportId {
    let mut hasher = Sha256::new();
    for frame in &trace.frames {
        let key = frame_key(frame, mode);
        hasher.update((key.len() as u64).to_le_bytes());
        hasher.update(key.as_bytes());
    }
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for byte in digest {
        use fmt::Write;
        write!(hex, "{byte:02x}").unwrap();
    }
    ReportId(hex)
}

/// `file:line` of the first frame with a known source file; empty when no
/// frame has one.
pub fn crashline(trace: &Stacktrace) -> String {
    trace
        .frames
        .iter()
        .find(|f| !f.file.is_empty())
        .map(|f| format!("{}:{}", f.file, f.line))
        .unwrap_or_default()
}

// Line grammars. Every frame line starts with `#N`; what follows is either
// debugger output (`0xADDR in FUNC at FILE:LINE[:COL]`, each part optional)
// or sanitizer output (`0xADDR in FUNC FILE:LINE[:COL]` or
// `0xADDR in FUNC (MODULE+0xOFF)`, trailing decorations ignored).
static FRAME_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^#\d+\s+(.*)$").unwrap());
static DEBUGGER_AT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?:0x([0-9a-fA-F]+)\s+)?(?:in\s+(.+?)\s+)?at\s+(\S+):(\d+)(?::(\d+))?$")
        .unwrap()
});
static MODULE_OFFSET: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?:0x([0-9a-fA-F]+)\s+)?(?:in\s+(.+?)\s+)?\(([^()]+)\+0x([0-9a-fA-F]+)\)")
        .unwrap()
});
static SANITIZER_FILE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"^(?:0x([0-9a-fA-F]+)\s+)?in\s+(.+?)\s+(\S+):(\d+)(?::(\d+))?$").unwrap()
});
static BARE_ADDR: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^0x([0-9a-fA-F]+)(?:\s+in\s+(.+?))?\s*$").unwrap());
static BARE_FUNC: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^in\s+(.+?)\s*$").unwrap());

/// Extracts frames from raw debugger or sanitizer output, one frame per
/// matching line, in textual order. Lines that match no grammar are
/// skipped.
pub fn parse_raw_stacktrace(text: &str) -> Result<Stacktrace> {
    let mut frames = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        let Some(caps) = FRAME_LINE.captures(line) else {
            continue;
        };
        let rest = caps.get(1).map_or("", |m| m.as_str()).trim();
        if let Some(frame) = parse_frame_body(rest) {
            if frame.is_identifiable() {
                frames.push(frame);
            }
        }
    }
    if frames.is_empty() {
        return Err(Error::EmptyTrace);
    }
    Ok(Stacktrace::new(frames))
}

fn parse_frame_body(rest: &str) -> Option<Frame> {
    if let Some(c) = DEBUGGER_AT.captures(rest) {
        return Some(Frame {
            function: cap_str(&c, 2),
            module: String::new(),
            file: cap_str(&c, 3),
            line: cap_u64_dec(&c, 4),
            column: cap_u64_dec(&c, 5),
            address: cap_u64_hex(&c, 1),
        });
    }
    if let Some(c) = MODULE_OFFSET.captures(rest) {
        // The module-relative offset is the stable datum; keep it as the
        // address unless the line also carries nothing else to key on.
        let offset = cap_u64_hex(&c, 4);
        return Some(Frame {
            function: cap_str(&c, 2),
            module: cap_str(&c, 3),
            file: String::new(),
            line: 0,
            column: 0,
            address: offset,
        });
    }
    if let Some(c) = SANITIZER_FILE.captures(rest) {
        return Some(Frame {
            function: cap_str(&c, 2),
            module: String::new(),
            file: cap_str(&c, 3),
            line: cap_u64_dec(&c, 4),
            column: cap_u64_dec(&c, 5),
            address: cap_u64_hex(&c, 1),
        });
    }
    if let Some(c) = BARE_ADDR.captures(rest) {
        return Some(Frame {
            function: cap_str(&c, 2),
            address: cap_u64_hex(&c, 1),
            ..Frame::default()
        });
    }
    if let Some(c) = BARE_FUNC.captures(rest) {
        return Some(Frame {
            function: cap_str(&c, 1),
            ..Frame::default()
        });
    }
    None
}

fn cap_str(caps: &regex::Captures<'_>, idx: usize) -> String {
    caps.get(idx).map_or_else(String::new, |m| m.as_str().to_string())
}

fn cap_u64_dec(caps: &regex::Captures<'_>, idx: usize) -> u64 {
    caps.get(idx)
        .and_then(|m| m.as_str().parse().ok())
        .unwrap_or(0)
}

fn cap_u64_hex(caps: &regex::Captures<'_>, idx: usize) -> u64 {
    caps.get(idx)
        .and_then(|m| u64::from_str_radix(m.as_str(), 16).ok())
        .unwrap_or(0)
}

/// One frame-filtering rule.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IgnorePattern {
    Prefix(String),
    Substring(String),
}

impl IgnorePattern {
    fn matches(&self, s: &str) -> bool {
        match self {
            IgnorePattern::Prefix(p) => s.starts_with(p.as_str()),
            IgnorePattern::Substring(p) => s.contains(p.as_str()),
        }
    }
}

/// Ordered frame-filtering rules matched against function and module
/// names. Matching is case-sensitive.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IgnoreRules {
    pub patterns: Vec<IgnorePattern>,
}

const DEFAULT_RULES: &str = include_str!("../data/ignore_rules.txt");

impl IgnoreRules {
    pub fn empty() -> Self {
        IgnoreRules::default()
    }

    /// The built-in rule set: sanitizer runtime and libc abort frames.
    pub fn builtin() -> Self {
        Self::parse(DEFAULT_RULES)
    }

    /// Parses the rule file format: one rule per line, `prefix:PAT` or
    /// `contains:PAT` (bare lines mean `contains`), `#` comments.
    pub fn parse(text: &str) -> Self {
        let mut patterns = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let pattern = if let Some(p) = line.strip_prefix("prefix:") {
                IgnorePattern::Prefix(p.to_string())
            } else if let Some(p) = line.strip_prefix("contains:") {
                IgnorePattern::Substring(p.to_string())
            } else {
                IgnorePattern::Substring(line.to_string())
            };
            patterns.push(pattern);
        }
        IgnoreRules { patterns }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Ok(Self::parse(&std::fs::read_to_string(path)?))
    }

    pub fn matches(&self, frame: &Frame) -> bool {
        self.patterns
            .iter()
            .any(|p| p.matches(&frame.function) || p.matches(&frame.module))
    }
}

/// Drops every frame whose function or module matches an ignore rule,
/// preserving the order of survivors.
pub fn normalize(trace: Stacktrace, rules: &IgnoreRules) -> Result<Stacktrace> {
    let frames: Vec<Frame> = trace
        .frames
        .into_iter()
        .filter(|f| !rules.matches(f))
        .collect();
    if frames.is_empty() {
        return Err(Error::AllFramesFiltered);
    }
    Ok(Stacktrace::new(frames))
}
