//! The ruleset image: a line-oriented text file with a trailing SHA-256
//! line covering every byte before it.

use std::fmt::{self, Write as _};

use sha2::{Digest as _, Sha256};

use super::grammar::{parse_rule, valid_chain_name};
use super::{builtin_table, Chain, Policy, Ruleset, RulesetError, Table, ValidationError};

pub const IMAGE_MAGIC: &str = "#picofw-ruleset v1";
const VERSION_PREFIX: &str = "#version ";
const SHA_PREFIX: &str = "#sha256 ";

/// A SHA-256 digest.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// Accepts exactly 64 lowercase hex characters.
    pub fn from_hex(text: &str) -> Option<Digest> {
        if text.len() != 64 || !text.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return None;
        }
        let mut out = [0u8; 32];
        hex::decode_to_slice(text, &mut out).ok()?;
        Some(Digest(out))
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.to_hex())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn compute_checksum(body: &str) -> Digest {
    Digest(Sha256::digest(body.as_bytes()).into())
}

/// Digest of the bytes an image's checksum line covers: everything before
/// the first line starting with `#sha256 `, or the whole text if absent.
pub fn image_digest(text: &str) -> Digest {
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        if line.starts_with(SHA_PREFIX) {
            return compute_checksum(&text[..offset]);
        }
        offset += line.len();
    }
    compute_checksum(text)
}

/// Everything the checksum covers: the image minus its `#sha256` line.
pub(crate) fn body_text(rs: &Ruleset) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{IMAGE_MAGIC}");
    let _ = writeln!(s, "{VERSION_PREFIX}{}", rs.version());
    for table in [Table::Filter, Table::Nat] {
        let _ = writeln!(s, "*{}", table.name());
        let chains = rs.chains(table);
        for c in &chains {
            let policy = c.policy.map_or("-", |p| p.name());
            let _ = writeln!(s, ":{} {}", c.name, policy);
        }
        for c in &chains {
            for r in &c.rules {
                let _ = writeln!(s, "{}", r.line(&c.name));
            }
        }
    }
    s
}

/// Canonical image text, checksum line included.
pub fn serialize_ruleset(rs: &Ruleset) -> String {
    let mut body = body_text(rs);
    let digest = compute_checksum(&body);
    let _ = writeln!(body, "{SHA_PREFIX}{digest}");
    body
}

/// Parses and validates an image. A present `#sha256` line must match the
/// bytes preceding it; a missing one is accepted.
pub fn parse_ruleset(text: &str) -> Result<Ruleset, RulesetError> {
    let fmt_err = |line: usize, message: String| RulesetError::Format { line, message };

    let mut rs = Ruleset::new();
    let mut section: Option<Table> = None;
    let mut seen_sections: Vec<Table> = Vec::new();
    let mut version_seen = false;
    let mut offset = 0usize;
    let mut sha: Option<(usize, &str, usize)> = None;

    for (idx, raw_line) in text.split_inclusive('\n').enumerate() {
        let lineno = idx + 1;
        let line_start = offset;
        offset += raw_line.len();
        let line = raw_line.strip_suffix('\n').unwrap_or(raw_line);
        if line.contains('\r') {
            return Err(fmt_err(lineno, "carriage return in image (LF line endings required)".into()));
        }
        if let Some((sha_line, _, _)) = sha {
            if !line.is_empty() {
                return Err(fmt_err(lineno, format!("content after #sha256 line {sha_line}")));
            }
            continue;
        }
        if idx == 0 {
            if line != IMAGE_MAGIC {
                return Err(fmt_err(lineno, format!("expected `{IMAGE_MAGIC}` header")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        if let Some(hexpart) = line.strip_prefix(SHA_PREFIX) {
            sha = Some((lineno, hexpart, line_start));
            continue;
        }
        if line.starts_with("#sha256") {
            return Err(RulesetError::Integrity {
                declared: line.to_string(),
                actual: compute_checksum(&text[..line_start]).to_hex(),
            });
        }
        if let Some(v) = line.strip_prefix(VERSION_PREFIX) {
            if version_seen || section.is_some() {
                return Err(fmt_err(lineno, "#version must appear once, before any table".into()));
            }
            let version = v
                .parse::<u64>()
                .ok()
                .filter(|_| v.bytes().all(|b| b.is_ascii_digit()))
                .ok_or_else(|| fmt_err(lineno, format!("malformed version `{v}`")))?;
            rs = rs.with_version(version);
            version_seen = true;
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        if let Some(name) = line.strip_prefix('*') {
            let table = match name {
                "filter" => Table::Filter,
                "nat" => Table::Nat,
                other => return Err(fmt_err(lineno, format!("unknown table `{other}`"))),
            };
            if seen_sections.contains(&table) {
                return Err(fmt_err(lineno, format!("table `{name}` declared twice")));
            }
            seen_sections.push(table);
            section = Some(table);
            continue;
        }
        let table = section.ok_or_else(|| fmt_err(lineno, "content before any `*table` line".into()))?;
        if let Some(decl) = line.strip_prefix(':') {
            let (name, policy) = decl
                .split_once(' ')
                .ok_or_else(|| fmt_err(lineno, "chain declaration needs `:<NAME> <POLICY>`".into()))?;
            match builtin_table(name) {
                Some(t) if t == table => {
                    let policy: Policy = policy
                        .parse()
                        .map_err(|p| fmt_err(lineno, format!("invalid policy `{p}` for {name}")))?;
                    rs.chain_mut(name).expect("built-in chain").policy = Some(policy);
                }
                Some(_) => {
                    return Err(fmt_err(lineno, format!("chain {name} does not belong to table {}", table.name())))
                }
                None => {
                    if policy != "-" {
                        return Err(fmt_err(lineno, format!("user chain {name} must use `-` as policy")));
                    }
                    if !valid_chain_name(name) {
                        return Err(ValidationError::BadChainName(name.to_string()).into());
                    }
                    if rs.table_of(name).is_some() {
                        return Err(RulesetError::ChainExists(name.to_string()));
                    }
                    rs.insert_chain(table, Chain::user(name));
                }
            }
            continue;
        }
        if line.starts_with("-A") {
            let parsed = parse_rule(line).map_err(|source| RulesetError::Syntax { line: lineno, source })?;
            if rs.table_of(&parsed.chain) != Some(table) {
                return Err(fmt_err(
                    lineno,
                    format!("chain `{}` is not declared in table {}", parsed.chain, table.name()),
                ));
            }
            rs.chain_mut(&parsed.chain).expect("declared chain").rules.push(parsed.rule);
            continue;
        }
        return Err(fmt_err(lineno, format!("unrecognized line `{line}`")));
    }

    if let Some((_, declared, start)) = sha {
        let actual = compute_checksum(&text[..start]);
        match Digest::from_hex(declared) {
            Some(d) if d == actual => {}
            _ => {
                return Err(RulesetError::Integrity {
                    declared: declared.to_string(),
                    actual: actual.to_hex(),
                })
            }
        }
    }
    if text.is_empty() {
        return Err(fmt_err(1, format!("expected `{IMAGE_MAGIC}` header")));
    }

    rs.validate()?;
    Ok(rs)
}
