//! Text codecs for action chunks: the canonical bracketed list-of-lists
//! representation, the reserved-token digit encoding used by the action-token
//! ablation, and coalescing of raw micro-actions into larger chunks.
//!
//! Everything here is a pure function over immutable inputs and safe for
//! unrestricted concurrent use.

use std::fmt;

use thiserror::Error;

use crate::model::{Action, ActionChunk, Axis, InvariantError};

/// Treat accumulated sums below this as zero for the sign-conflict rule, so
/// 3-decimal inputs that cancel exactly do not leave phantom signs behind.
const SIGN_ZERO_EPS: f64 = 1e-12;

/// Tolerance when normalizing a parsed gripper field to 0.0 / 1.0.
const GRIPPER_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("chunk is empty")]
    EmptyChunk,
    #[error("no action list found in text")]
    NoListFound,
    #[error("inner list {inner} has {fields} fields, expected 4")]
    BadArity { inner: usize, fields: usize },
    #[error("inner list {inner}: field {field:?} is not numeric")]
    NonNumeric { inner: usize, field: String },
    #[error("inner list {inner}: gripper value {value} is not binary")]
    GripperNotBinary { inner: usize, value: f64 },
    #[error("inner list {inner}: {source}")]
    Invariant {
        inner: usize,
        source: InvariantError,
    },
    #[error("invalid coalesce config: {0}")]
    BadConfig(&'static str),
    #[error("invalid token map: {0}")]
    BadTokenMap(String),
}

/// Rules for merging consecutive micro-actions into larger chunks.
///
/// `per_axis_note` records the 2.5 cm single-dimension threshold that the
/// source procedure names but whose group boundaries are already fully
/// explained by the sign-conflict and absolute-cap rules; it does not
/// participate in the default boundary decision. The same 2.5 cm value is
/// the movement threshold for direction labels (see the annotation module).
#[derive(Debug, Clone, PartialEq)]
pub struct CoalesceConfig {
    pub axis_cap: f64,
    pub sign_conflict_enabled: bool,
    pub per_axis_note: f64,
    pub partition_tolerance: f64,
}

impl Default for CoalesceConfig {
    fn default() -> Self {
        Self {
            axis_cap: 0.05,
            sign_conflict_enabled: true,
            per_axis_note: 0.025,
            partition_tolerance: 5e-4,
        }
    }
}

impl CoalesceConfig {
    pub fn validate(&self) -> Result<(), CodecError> {
        if !(self.axis_cap > 0.0) {
            return Err(CodecError::BadConfig("axis_cap must be > 0"));
        }
        if !(self.per_axis_note > 0.0) {
            return Err(CodecError::BadConfig("per_axis_note must be > 0"));
        }
        Ok(())
    }
}

struct GroupAcc {
    sums: [f64; 3],
    gripper: f64,
}

impl GroupAcc {
    fn start(action: &Action) -> Self {
        Self {
            sums: [action.dx(), action.dy(), action.dz()],
            gripper: action.gripper(),
        }
    }

    fn sum(&self, axis: Axis) -> f64 {
        match axis {
            Axis::X => self.sums[0],
            Axis::Y => self.sums[1],
            Axis::Z => self.sums[2],
        }
    }

    fn add(&mut self, action: &Action) {
        self.sums[0] += action.dx();
        self.sums[1] += action.dy();
        self.sums[2] += action.dz();
    }

    fn into_action(self, inner: usize) -> Result<Action, CodecError> {
        Action::new(self.sums[0], self.sums[1], self.sums[2], self.gripper)
            .map_err(|source| CodecError::Invariant { inner, source })
    }
}

/// Merges a raw action sequence into a contiguous, order-preserving partition
/// of group sums. A group boundary is inserted before an incoming action
/// whenever any of the following holds:
///
/// 1. its gripper command differs from the current group's,
/// 2. sign conflict: some axis has a nonzero accumulated sum and a nonzero
///    incoming value of the opposite sign (when enabled),
/// 3. cap: accepting the action would push some axis past `axis_cap` in
///    absolute value.
///
/// Each output action is the exact double-precision sum of its constituents
/// and carries the group's uniform gripper value.
pub fn coalesce(raw: &[Action], cfg: &CoalesceConfig) -> Result<ActionChunk, CodecError> {
    cfg.validate()?;
    let mut groups: Vec<Action> = Vec::new();
    let mut acc: Option<GroupAcc> = None;
    for action in raw {
        let boundary = match &acc {
            None => false,
            Some(group) => {
                let gripper_change = action.gripper() != group.gripper;
                let sign_conflict = cfg.sign_conflict_enabled
                    && Axis::ALL.iter().any(|&axis| {
                        let accumulated = group.sum(axis);
                        let incoming = action.axis(axis);
                        accumulated.abs() > SIGN_ZERO_EPS
                            && incoming.abs() > SIGN_ZERO_EPS
                            && accumulated.signum() != incoming.signum()
                    });
                let cap_exceeded = Axis::ALL
                    .iter()
                    .any(|&axis| (group.sum(axis) + action.axis(axis)).abs() > cfg.axis_cap);
                gripper_change || sign_conflict || cap_exceeded
            }
        };
        if boundary {
            let finished = acc.take().expect("boundary only after a group started");
            groups.push(finished.into_action(groups.len())?);
        }
        match acc.as_mut() {
            Some(group) => group.add(action),
            None => acc = Some(GroupAcc::start(action)),
        }
    }
    if let Some(group) = acc {
        groups.push(group.into_action(groups.len())?);
    }
    Ok(ActionChunk::new(groups))
}

fn fmt_chunk_value(value: f64) -> String {
    if value == 0.0 {
        "0.0".to_string()
    } else {
        format!("{value:.3}")
    }
}

fn fmt_chunk_gripper(value: f64) -> &'static str {
    if value == 0.0 {
        "0.0"
    } else {
        "1.0"
    }
}

/// Renders a chunk as its canonical list-of-lists literal: three fractional
/// digits per displacement except exact zero (`0.0`), gripper as `1.0`/`0.0`,
/// one space after each comma.
pub fn serialize_chunk(chunk: &ActionChunk) -> Result<String, CodecError> {
    if chunk.is_empty() {
        return Err(CodecError::EmptyChunk);
    }
    let inner = chunk
        .iter()
        .map(|a| {
            format!(
                "[{}, {}, {}, {}]",
                fmt_chunk_value(a.dx()),
                fmt_chunk_value(a.dy()),
                fmt_chunk_value(a.dz()),
                fmt_chunk_gripper(a.gripper())
            )
        })
        .collect::<Vec<_>>()
        .join(", ");
    Ok(format!("[{inner}]"))
}

/// Where and how the action list was located inside a model completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseDiagnostics {
    pub stripped_fences: bool,
    /// Character offsets of the extracted list literal within the input.
    pub source_span: (usize, usize),
}

/// Strips surrounding code fences and whitespace, if present.
pub(crate) fn strip_fences(text: &str) -> &str {
    let (start, end, _) = fence_free_region(text);
    &text[start..end]
}

/// Locates the content region after removing surrounding code fences.
/// Returns byte offsets into `text` plus whether fences were removed.
fn fence_free_region(text: &str) -> (usize, usize, bool) {
    let mut start = text.len() - text.trim_start().len();
    let mut end = start + text[start..].trim_end().len();
    let mut stripped = false;
    let body = &text[start..end];
    if body.starts_with("```") {
        stripped = true;
        match body.find('\n') {
            Some(nl) => start += nl + 1,
            None => start += 3,
        }
    }
    let body = &text[start..end];
    if stripped || body.ends_with("```") {
        if let Some(stripped_body) = body.strip_suffix("```") {
            if body.len() > 3 {
                stripped = true;
                end = start + stripped_body.trim_end().len();
            }
        }
    }
    let body = &text[start..end];
    let retrim = body.len() - body.trim_start().len();
    (start + retrim, end, stripped)
}

/// Finds the first balanced list-of-lists literal (a `[` whose next
/// significant character is another `[`). Returns byte offsets.
fn find_list_literal(text: &str) -> Option<(usize, usize)> {
    let bytes = text.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'[' {
            let mut j = i + 1;
            while j < bytes.len() && bytes[j].is_ascii_whitespace() {
                j += 1;
            }
            if j < bytes.len() && bytes[j] == b'[' {
                let mut depth = 0usize;
                for (k, &b) in bytes.iter().enumerate().skip(i) {
                    match b {
                        b'[' => depth += 1,
                        b']' => {
                            depth = depth.saturating_sub(1);
                            if depth == 0 {
                                return Some((i, k + 1));
                            }
                        }
                        _ => {}
                    }
                }
                return None; // unbalanced
            }
        }
        i += 1;
    }
    None
}

fn parse_inner_list(inner: usize, body: &str) -> Result<Action, CodecError> {
    let fields: Vec<&str> = body.split(',').map(str::trim).collect();
    let fields: Vec<&str> = if fields.len() == 1 && fields[0].is_empty() {
        Vec::new()
    } else {
        fields
    };
    if fields.len() != 4 {
        return Err(CodecError::BadArity {
            inner,
            fields: fields.len(),
        });
    }
    let mut values = [0.0f64; 4];
    for (slot, field) in values.iter_mut().zip(&fields) {
        *slot = field.parse::<f64>().map_err(|_| CodecError::NonNumeric {
            inner,
            field: field.to_string(),
        })?;
    }
    let gripper = if values[3].abs() <= GRIPPER_EPS {
        0.0
    } else if (values[3] - 1.0).abs() <= GRIPPER_EPS {
        1.0
    } else {
        return Err(CodecError::GripperNotBinary {
            inner,
            value: values[3],
        });
    };
    Action::new(values[0], values[1], values[2], gripper)
        .map_err(|source| CodecError::Invariant { inner, source })
}

/// Extracts and parses the first action list from a model completion.
///
/// Surrounding code fences and whitespace are stripped, prose before the
/// list is skipped, and any bracketed lists after the first are ignored.
/// Every inner list must carry exactly 4 numeric fields; the gripper field
/// is normalized to 0.0/1.0 when within 1e-6 of those values.
pub fn parse_chunk(text: &str) -> Result<(ActionChunk, ParseDiagnostics), CodecError> {
    let (region_start, region_end, stripped_fences) = fence_free_region(text);
    let region = &text[region_start..region_end];
    let (lit_start, lit_end) = find_list_literal(region).ok_or(CodecError::NoListFound)?;
    let literal = &region[lit_start..lit_end];

    let mut actions = Vec::new();
    let bytes = literal.as_bytes();
    let mut i = 1; // skip outer '['
    let mut inner = 0usize;
    while i < bytes.len() {
        match bytes[i] {
            b'[' => {
                let close = literal[i..]
                    .find(']')
                    .map(|off| i + off)
                    .ok_or(CodecError::NoListFound)?;
                actions.push(parse_inner_list(inner, &literal[i + 1..close])?);
                inner += 1;
                i = close + 1;
            }
            b']' => break,
            _ => i += 1,
        }
    }
    if actions.is_empty() {
        return Err(CodecError::NoListFound);
    }

    let abs_start = region_start + lit_start;
    let abs_end = region_start + lit_end;
    let span_start = text[..abs_start].chars().count();
    let span_end = span_start + text[abs_start..abs_end].chars().count();
    Ok((
        ActionChunk::new(actions),
        ParseDiagnostics {
            stripped_fences,
            source_span: (span_start, span_end),
        },
    ))
}

/// Bijective mapping between the digit characters `'0'..='9'` and ten
/// reserved vocabulary token strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMap {
    tokens: [String; 10],
    token_id_base: u32,
}

impl TokenMap {
    /// The default mapping onto Gemma-3's ten least likely tokens:
    /// digit `d` becomes `<unused{6133+d}>` with token id `262035+d`.
    pub fn gemma3_default() -> Self {
        let tokens = std::array::from_fn(|d| format!("<unused{}>", 6133 + d));
        Self {
            tokens,
            token_id_base: 262035,
        }
    }

    pub fn new(tokens: [String; 10], token_id_base: u32) -> Result<Self, CodecError> {
        for (d, token) in tokens.iter().enumerate() {
            if token.is_empty() {
                return Err(CodecError::BadTokenMap(format!("digit {d} maps to an empty token")));
            }
            if tokens.iter().filter(|t| *t == token).count() != 1 {
                return Err(CodecError::BadTokenMap(format!("token {token:?} is not unique")));
            }
        }
        Ok(Self {
            tokens,
            token_id_base,
        })
    }

    pub fn token_for(&self, digit: char) -> Option<&str> {
        digit
            .to_digit(10)
            .map(|d| self.tokens[d as usize].as_str())
    }

    pub fn token_id(&self, digit: char) -> Option<u32> {
        digit.to_digit(10).map(|d| self.token_id_base + d)
    }

    pub fn token_id_base(&self) -> u32 {
        self.token_id_base
    }

    /// Serializes as the table format: one `digit<TAB>token<TAB>id` row per
    /// digit in ascending order.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (d, token) in self.tokens.iter().enumerate() {
            out.push_str(&format!("{d}\t{token}\t{}\n", self.token_id_base + d as u32));
        }
        out
    }

    /// Parses the table format. Rows may appear in any order but must cover
    /// each digit exactly once with ids contiguous from the base.
    pub fn from_table(text: &str) -> Result<Self, CodecError> {
        let mut tokens: [Option<(String, u32)>; 10] = Default::default();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            let digit: usize = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| CodecError::BadTokenMap(format!("line {}: bad digit", lineno + 1)))?;
            let token = parts
                .next()
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .ok_or_else(|| CodecError::BadTokenMap(format!("line {}: missing token", lineno + 1)))?;
            let id: u32 = parts
                .next()
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| CodecError::BadTokenMap(format!("line {}: bad token id", lineno + 1)))?;
            if digit > 9 {
                return Err(CodecError::BadTokenMap(format!("line {}: digit out of range", lineno + 1)));
            }
            if tokens[digit].is_some() {
                return Err(CodecError::BadTokenMap(format!("digit {digit} appears twice")));
            }
            tokens[digit] = Some((token.to_string(), id));
        }
        let mut resolved: Vec<(String, u32)> = Vec::with_capacity(10);
        for (d, slot) in tokens.into_iter().enumerate() {
            resolved.push(slot.ok_or_else(|| {
                CodecError::BadTokenMap(format!("digit {d} is not covered"))
            })?);
        }
        let base = resolved[0].1;
        for (d, (_, id)) in resolved.iter().enumerate() {
            if *id != base + d as u32 {
                return Err(CodecError::BadTokenMap(format!(
                    "token id for digit {d} is {id}, expected {}",
                    base + d as u32
                )));
            }
        }
        let tokens: [String; 10] = resolved
            .into_iter()
            .map(|(t, _)| t)
            .collect::<Vec<_>>()
            .try_into()
            .expect("exactly ten rows");
        Self::new(tokens, base)
    }
}

impl fmt::Display for TokenMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_table())
    }
}

/// Replaces every digit character with its reserved-token string; all other
/// characters pass through verbatim.
pub fn encode_at(text: &str, map: &TokenMap) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match map.token_for(ch) {
            Some(token) => out.push_str(token),
            None => out.push(ch),
        }
    }
    out
}

/// Replaces every reserved-token occurrence back with its digit; text that
/// matches no token passes through unchanged.
pub fn decode_at(text: &str, map: &TokenMap) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    'scan: while !rest.is_empty() {
        for (d, token) in map.tokens.iter().enumerate() {
            if rest.starts_with(token.as_str()) {
                out.push(char::from(b'0' + d as u8));
                rest = &rest[token.len()..];
                continue 'scan;
            }
        }
        let ch = rest.chars().next().expect("nonempty");
        out.push(ch);
        rest = &rest[ch.len_utf8()..];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn act(dx: f64, dy: f64, dz: f64, g: f64) -> Action {
        Action::new(dx, dy, dz, g).unwrap()
    }

    /// The 10-action "Grasp the Yellow Pepper" sub-trajectory.
    pub(crate) fn pepper_raw() -> Vec<Action> {
        [
            [0.000, 0.000, 0.000, 1.0],
            [-0.002, 0.000, -0.007, 1.0],
            [0.000, -0.004, -0.016, 1.0],
            [0.002, -0.002, -0.014, 1.0],
            [0.003, 0.000, -0.008, 1.0],
            [0.002, 0.000, -0.011, 1.0],
            [0.000, 0.000, -0.005, 1.0],
            [0.000, 0.000, -0.007, 1.0],
            [0.000, 0.000, -0.006, 1.0],
            [0.001, -0.003, -0.003, 0.0],
        ]
        .iter()
        .map(|a| act(a[0], a[1], a[2], a[3]))
        .collect()
    }

    pub(crate) const PEPPER_POST: &str = "[[-0.002, -0.004, -0.023, 1.0], [0.007, -0.002, -0.045, 1.0], [0.0, 0.0, -0.006, 1.0], [0.001, -0.003, -0.003, 0.0]]";

    #[test]
    fn coalesce_reproduces_pepper_groups() {
        let chunk = coalesce(&pepper_raw(), &CoalesceConfig::default()).unwrap();
        assert_eq!(serialize_chunk(&chunk).unwrap(), PEPPER_POST);
    }

    #[test]
    fn coalesce_empty_input_is_empty() {
        let chunk = coalesce(&[], &CoalesceConfig::default()).unwrap();
        assert!(chunk.is_empty());
    }

    #[test]
    fn coalesce_splits_on_sign_conflict() {
        let raw = vec![act(0.01, 0.0, 0.0, 1.0), act(-0.01, 0.0, 0.0, 1.0)];
        let chunk = coalesce(&raw, &CoalesceConfig::default()).unwrap();
        assert_eq!(chunk.actions(), &raw[..]);
    }

    #[test]
    fn coalesce_splits_on_axis_cap() {
        let raw = vec![act(0.03, 0.0, 0.0, 1.0), act(0.03, 0.0, 0.0, 1.0)];
        let chunk = coalesce(&raw, &CoalesceConfig::default()).unwrap();
        assert_eq!(chunk.len(), 2);
    }

    #[test]
    fn coalesce_merges_within_cap_without_conflicts() {
        let raw = vec![act(0.02, 0.0, 0.0, 1.0), act(0.03, 0.0, 0.0, 1.0)];
        let chunk = coalesce(&raw, &CoalesceConfig::default()).unwrap();
        assert_eq!(chunk.len(), 1);
        assert!((chunk.actions()[0].dx() - 0.05).abs() < 1e-12);
    }

    #[test]
    fn zero_components_are_sign_compatible() {
        // dx incoming 0 against accumulated +, dy accumulated 0 against
        // incoming -: neither is a conflict, so one group results.
        let raw = vec![act(0.003, 0.0, 0.0, 1.0), act(0.0, -0.002, 0.0, 1.0)];
        let chunk = coalesce(&raw, &CoalesceConfig::default()).unwrap();
        assert_eq!(chunk.len(), 1, "{chunk:?}");
        assert_eq!(chunk.actions()[0], act(0.003, -0.002, 0.0, 1.0));
    }

    #[test]
    fn serialize_formats_zero_and_gripper() {
        let chunk = ActionChunk::new(vec![act(0.0, 0.0, 0.0, 1.0)]);
        assert_eq!(serialize_chunk(&chunk).unwrap(), "[[0.0, 0.0, 0.0, 1.0]]");
        let chunk = ActionChunk::new(vec![act(0.007, -0.002, -0.045, 1.0)]);
        assert_eq!(
            serialize_chunk(&chunk).unwrap(),
            "[[0.007, -0.002, -0.045, 1.0]]"
        );
    }

    #[test]
    fn serialize_empty_chunk_is_an_error() {
        assert!(matches!(
            serialize_chunk(&ActionChunk::default()),
            Err(CodecError::EmptyChunk)
        ));
    }

    #[test]
    fn parse_normalizes_integer_gripper() {
        let (chunk, diag) = parse_chunk("[[0.01, 0.02, 0.0, 1]]").unwrap();
        assert_eq!(chunk.actions(), &[act(0.01, 0.02, 0.0, 1.0)]);
        assert!(!diag.stripped_fences);
        assert_eq!(diag.source_span, (0, 22));
    }

    #[test]
    fn parse_strips_fences() {
        let (chunk, diag) = parse_chunk("```\n[[0.0, 0.0, -0.006, 1.0]]\n```").unwrap();
        assert_eq!(chunk.actions(), &[act(0.0, 0.0, -0.006, 1.0)]);
        assert!(diag.stripped_fences);
    }

    #[test]
    fn parse_strips_language_tagged_fences() {
        let (chunk, diag) = parse_chunk("```python\n[[0.0, 0.0, -0.006, 1.0]]\n```").unwrap();
        assert_eq!(chunk.len(), 1);
        assert!(diag.stripped_fences);
    }

    #[test]
    fn parse_skips_leading_prose_and_trailing_lists() {
        let text = "sure, here you go: [[0.01, 0.0, 0.0, 1.0]] and also [[9.0, 9.0, 9.0, 9.0]]";
        let (chunk, diag) = parse_chunk(text).unwrap();
        assert_eq!(chunk.len(), 1);
        assert_eq!(chunk.actions()[0].dx(), 0.01);
        let (s, e) = diag.source_span;
        assert_eq!(&text[s..e], "[[0.01, 0.0, 0.0, 1.0]]");
    }

    #[test]
    fn parse_rejects_bad_arity() {
        assert!(matches!(
            parse_chunk("move down then [[0.1, 0.2]]"),
            Err(CodecError::BadArity { inner: 0, fields: 2 })
        ));
    }

    #[test]
    fn parse_rejects_non_numeric() {
        assert!(matches!(
            parse_chunk("[[0.1, 0.2, abc, 1.0]]"),
            Err(CodecError::NonNumeric { .. })
        ));
    }

    #[test]
    fn parse_rejects_nonbinary_gripper() {
        assert!(matches!(
            parse_chunk("[[0.1, 0.0, 0.0, 0.5]]"),
            Err(CodecError::GripperNotBinary { .. })
        ));
    }

    #[test]
    fn parse_reports_no_list_for_prose() {
        assert!(matches!(
            parse_chunk("there is no list here"),
            Err(CodecError::NoListFound)
        ));
    }

    #[test]
    fn encode_at_matches_reference_example() {
        let map = TokenMap::gemma3_default();
        assert_eq!(
            encode_at("-0.002", &map),
            "-<unused6133>.<unused6133><unused6133><unused6135>"
        );
        assert_eq!(encode_at("1.0", &map), "<unused6134>.<unused6133>");
        assert_eq!(encode_at("", &map), "");
    }

    #[test]
    fn decode_at_matches_reference_example() {
        let map = TokenMap::gemma3_default();
        assert_eq!(
            decode_at("-<unused6133>.<unused6133><unused6133><unused6135>", &map),
            "-0.002"
        );
        assert_eq!(decode_at("no tokens in here", &map), "no tokens in here");
    }

    #[test]
    fn token_map_records_reference_ids() {
        let map = TokenMap::gemma3_default();
        assert_eq!(map.token_id('0'), Some(262035));
        assert_eq!(map.token_id('9'), Some(262044));
        assert_eq!(map.token_for('9'), Some("<unused6142>"));
    }

    #[test]
    fn token_map_table_round_trip() {
        let map = TokenMap::gemma3_default();
        let parsed = TokenMap::from_table(&map.to_table()).unwrap();
        assert_eq!(parsed, map);
    }

    #[test]
    fn shipped_token_table_matches_default() {
        let shipped = TokenMap::from_table(include_str!("../assets/token_map.tsv")).unwrap();
        assert_eq!(shipped, TokenMap::gemma3_default());
    }

    #[test]
    fn token_map_rejects_gaps_and_duplicates() {
        assert!(TokenMap::from_table("0\t<a>\t100\n").is_err());
        let mut table = TokenMap::gemma3_default().to_table();
        table = table.replace("<unused6134>", "<unused6133>");
        assert!(TokenMap::from_table(&table).is_err());
    }

    fn arb_action() -> impl Strategy<Value = Action> {
        (
            -100i32..=100,
            -100i32..=100,
            -100i32..=100,
            proptest::bool::ANY,
        )
            .prop_map(|(x, y, z, g)| {
                act(
                    f64::from(x) / 1000.0,
                    f64::from(y) / 1000.0,
                    f64::from(z) / 1000.0,
                    if g { 1.0 } else { 0.0 },
                )
            })
    }

    fn arb_chunk() -> impl Strategy<Value = ActionChunk> {
        proptest::collection::vec(arb_action(), 1..8).prop_map(ActionChunk::new)
    }

    proptest! {
        #[test]
        fn prop_chunk_round_trip(chunk in arb_chunk()) {
            let text = serialize_chunk(&chunk).unwrap();
            let (parsed, _) = parse_chunk(&text).unwrap();
            prop_assert_eq!(parsed, chunk);
        }

        #[test]
        fn prop_at_round_trip(s in ".*") {
            let map = TokenMap::gemma3_default();
            prop_assert_eq!(decode_at(&encode_at(&s, &map), &map), s);
        }

        #[test]
        fn prop_coalesce_conserves_axis_sums(actions in proptest::collection::vec(arb_action(), 0..40)) {
            let chunk = coalesce(&actions, &CoalesceConfig::default()).unwrap();
            for axis in Axis::ALL {
                let input: f64 = actions.iter().map(|a| a.axis(axis)).sum();
                let output: f64 = chunk.iter().map(|a| a.axis(axis)).sum();
                prop_assert!((input - output).abs() < 1e-9);
            }
        }
    }
}
