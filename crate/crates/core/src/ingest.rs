//! Reader for C-style vendor configuration files (mme.cfg and friends) and
//! extraction of a [`TwinDescriptor`] from the parse tree.
//!
//! Grammar:
//!
//! ```text
//! document := members | '{' members '}'
//! members  := (pair (sep pair)* sep?)?        sep := ',' | newline
//! pair     := key ':' value                   key := ident | string
//! value    := object | array | string | int | bool | ip | cidr
//! object   := '{' members '}'
//! array    := '[' (value (sep value)* sep?)? ']'
//! ```
//!
//! `//` line comments and `/* */` block comments are skipped.

use std::fmt;
use std::net::{IpAddr, Ipv4Addr};

use ipnet::{IpNet, Ipv4Net};
use thiserror::Error;

use crate::model::{
    join_violations, validate_descriptor, LinkProfile, Micros, SliceSpec, TwinDescriptor,
    Violation, DEFAULT_CAPTURE_INTERFACE, MICROS_PER_SEC,
};

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Object(Vec<(String, Node)>),
    Array(Vec<Node>),
    Str(String),
    Int(i64),
    Bool(bool),
    Ip(IpAddr),
    Cidr(IpNet),
}

impl Node {
    pub fn get(&self, key: &str) -> Option<&Node> {
        match self {
            Node::Object(fields) => fields.iter().find(|(k, _)| k == key).map(|(_, v)| v),
            _ => None,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Node::Object(_) => "object",
            Node::Array(_) => "array",
            Node::Str(_) => "string",
            Node::Int(_) => "integer",
            Node::Bool(_) => "boolean",
            Node::Ip(_) => "IP address",
            Node::Cidr(_) => "CIDR",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhysConfigDocument {
    pub root: Node,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("syntax error at line {line}, column {column}: expected {expected}, found {found}")]
pub struct SyntaxError {
    pub line: usize,
    pub column: usize,
    pub expected: String,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    LBrace,
    RBrace,
    LBracket,
    RBracket,
    Colon,
    Comma,
    Newline,
    Ident(String),
    Str(String),
    Int(i64),
    Ip(Ipv4Addr),
    Cidr(Ipv4Net),
    Eof,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::LBrace => f.write_str("'{'"),
            Tok::RBrace => f.write_str("'}'"),
            Tok::LBracket => f.write_str("'['"),
            Tok::RBracket => f.write_str("']'"),
            Tok::Colon => f.write_str("':'"),
            Tok::Comma => f.write_str("','"),
            Tok::Newline => f.write_str("newline"),
            Tok::Ident(s) => write!(f, "identifier `{s}`"),
            Tok::Str(s) => write!(f, "string {s:?}"),
            Tok::Int(i) => write!(f, "integer {i}"),
            Tok::Ip(ip) => write!(f, "IP {ip}"),
            Tok::Cidr(n) => write!(f, "CIDR {n}"),
            Tok::Eof => f.write_str("end of input"),
        }
    }
}

#[derive(Debug, Clone)]
struct Spanned {
    tok: Tok,
    line: usize,
    column: usize,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    column: usize,
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Self {
        Lexer {
            src: text.as_bytes(),
            pos: 0,
            line: 1,
            column: 1,
        }
    }

    fn peek(&self) -> Option<u8> {
        self.src.get(self.pos).copied()
    }

    fn peek_at(&self, off: usize) -> Option<u8> {
        self.src.get(self.pos + off).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.pos += 1;
        if b == b'\n' {
            self.line += 1;
            self.column = 1;
        } else if b & 0xC0 != 0x80 {
            // count characters, not UTF-8 continuation bytes
            self.column += 1;
        }
        Some(b)
    }

    fn err(&self, line: usize, column: usize, expected: &str, found: impl Into<String>) -> SyntaxError {
        SyntaxError {
            line,
            column,
            expected: expected.to_string(),
            found: found.into(),
        }
    }

    fn found_here(&self) -> String {
        match self.peek() {
            None => "end of input".into(),
            Some(_) => {
                let rest = &self.src[self.pos..];
                let s = String::from_utf8_lossy(&rest[..rest.len().min(4)]);
                let c = s.chars().next().unwrap_or('?');
                format!("{c:?}")
            }
        }
    }

    fn tokens(mut self) -> Result<Vec<Spanned>, SyntaxError> {
        let mut out = Vec::new();
        loop {
            self.skip_blank_and_comments()?;
            let (line, column) = (self.line, self.column);
            let Some(b) = self.peek() else {
                out.push(Spanned { tok: Tok::Eof, line, column });
                return Ok(out);
            };
            let tok = match b {
                b'\n' => {
                    self.bump();
                    Tok::Newline
                }
                b'{' => {
                    self.bump();
                    Tok::LBrace
                }
                b'}' => {
                    self.bump();
                    Tok::RBrace
                }
                b'[' => {
                    self.bump();
                    Tok::LBracket
                }
                b']' => {
                    self.bump();
                    Tok::RBracket
                }
                b':' => {
                    self.bump();
                    Tok::Colon
                }
                b',' => {
                    self.bump();
                    Tok::Comma
                }
                b'"' => self.string(line, column)?,
                b'-' | b'0'..=b'9' => self.numeric(line, column)?,
                b if b.is_ascii_alphabetic() || b == b'_' => {
                    let start = self.pos;
                    while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
                        self.bump();
                    }
                    Tok::Ident(String::from_utf8_lossy(&self.src[start..self.pos]).into_owned())
                }
                _ => return Err(self.err(line, column, "a token", self.found_here())),
            };
            out.push(Spanned { tok, line, column });
        }
    }

    fn skip_blank_and_comments(&mut self) -> Result<(), SyntaxError> {
        loop {
            match (self.peek(), self.peek_at(1)) {
                (Some(b' ' | b'\t' | b'\r'), _) => {
                    self.bump();
                }
                (Some(b'/'), Some(b'/')) => {
                    while !matches!(self.peek(), None | Some(b'\n')) {
                        self.bump();
                    }
                }
                (Some(b'/'), Some(b'*')) => {
                    let (line, column) = (self.line, self.column);
                    self.bump();
                    self.bump();
                    loop {
                        match (self.peek(), self.peek_at(1)) {
                            (None, _) => {
                                return Err(self.err(line, column, "end of block comment `*/`", "end of input"))
                            }
                            (Some(b'*'), Some(b'/')) => {
                                self.bump();
                                self.bump();
                                break;
                            }
                            _ => {
                                self.bump();
                            }
                        }
                    }
                }
                _ => return Ok(()),
            }
        }
    }

    fn string(&mut self, line: usize, column: usize) -> Result<Tok, SyntaxError> {
        self.bump();
        let mut buf = Vec::new();
        loop {
            match self.bump() {
                None | Some(b'\n') => {
                    return Err(self.err(line, column, "closing '\"' of string", "unterminated string"))
                }
                Some(b'"') => break,
                Some(b'\\') => match self.bump() {
                    Some(b'n') => buf.push(b'\n'),
                    Some(b't') => buf.push(b'\t'),
                    Some(c @ (b'"' | b'\\' | b'/')) => buf.push(c),
                    _ => {
                        return Err(self.err(line, column, "valid escape sequence in string", "bad escape"))
                    }
                },
                Some(c) => buf.push(c),
            }
        }
        String::from_utf8(buf)
            .map(Tok::Str)
            .map_err(|_| self.err(line, column, "UTF-8 string", "invalid UTF-8"))
    }

    /// Integers, dotted-quad IPs and CIDR blocks all start with a digit.
    fn numeric(&mut self, line: usize, column: usize) -> Result<Tok, SyntaxError> {
        let start = self.pos;
        if self.peek() == Some(b'-') {
            self.bump();
        }
        while matches!(self.peek(), Some(c) if c.is_ascii_digit() || c == b'.' || c == b'/') {
            self.bump();
        }
        if matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || c == b'_') {
            return Err(self.err(line, column, "integer, IP address or CIDR", self.found_here()));
        }
        let text = std::str::from_utf8(&self.src[start..self.pos]).expect("ascii");
        let bad = || SyntaxError {
            line,
            column,
            expected: "integer, IP address or CIDR".into(),
            found: format!("`{text}`"),
        };
        if text.contains('/') {
            let net: Ipv4Net = text.parse().map_err(|_| bad())?;
            Ok(Tok::Cidr(net))
        } else if text.contains('.') {
            let ip: Ipv4Addr = text.parse().map_err(|_| bad())?;
            Ok(Tok::Ip(ip))
        } else {
            text.parse::<i64>().map(Tok::Int).map_err(|_| bad())
        }
    }
}

fn unexpected_at(t: &Spanned, expected: &str) -> SyntaxError {
    SyntaxError {
        line: t.line,
        column: t.column,
        expected: expected.into(),
        found: t.tok.to_string(),
    }
}

const MAX_DEPTH: usize = 64;

struct Parser {
    toks: Vec<Spanned>,
    pos: usize,
    depth: usize,
}

impl Parser {
    fn peek(&self) -> &Spanned {
        &self.toks[self.pos]
    }

    fn next(&mut self) -> Spanned {
        let t = self.toks[self.pos].clone();
        if self.pos + 1 < self.toks.len() {
            self.pos += 1;
        }
        t
    }

    fn skip_newlines(&mut self) {
        while self.peek().tok == Tok::Newline {
            self.next();
        }
    }

    fn unexpected(&self, expected: &str) -> SyntaxError {
        unexpected_at(self.peek(), expected)
    }

    fn document(&mut self) -> Result<Node, SyntaxError> {
        self.skip_newlines();
        let root = if self.peek().tok == Tok::LBrace {
            self.next();
            let obj = self.members(Tok::RBrace)?;
            self.next();
            obj
        } else {
            self.members(Tok::Eof)?
        };
        self.skip_newlines();
        if self.peek().tok != Tok::Eof {
            return Err(self.unexpected("end of input"));
        }
        Ok(root)
    }

    /// Parses pairs up to (not consuming) `close`.
    fn members(&mut self, close: Tok) -> Result<Node, SyntaxError> {
        let mut fields: Vec<(String, Node)> = Vec::new();
        loop {
            self.skip_newlines();
            if self.peek().tok == close {
                return Ok(Node::Object(fields));
            }
            let key_tok = self.next();
            let key = match key_tok.tok {
                Tok::Ident(ref s) | Tok::Str(ref s) => s.clone(),
                _ => return Err(unexpected_at(&key_tok, &format!("field name or {close}"))),
            };
            if self.peek().tok != Tok::Colon {
                return Err(self.unexpected("':'"));
            }
            self.next();
            self.skip_newlines();
            let value = self.value()?;
            if fields.iter().any(|(k, _)| *k == key) {
                return Err(SyntaxError {
                    line: key_tok.line,
                    column: key_tok.column,
                    expected: "unique field name".into(),
                    found: format!("duplicate field `{key}`"),
                });
            }
            fields.push((key, value));
            self.separator(&close)?;
        }
    }

    fn separator(&mut self, close: &Tok) -> Result<(), SyntaxError> {
        match &self.peek().tok {
            Tok::Comma | Tok::Newline => {
                self.next();
                Ok(())
            }
            t if t == close => Ok(()),
            _ => Err(self.unexpected(&format!("',', newline or {close}"))),
        }
    }

    fn value(&mut self) -> Result<Node, SyntaxError> {
        let t = self.next();
        if matches!(t.tok, Tok::LBrace | Tok::LBracket) {
            if self.depth >= MAX_DEPTH {
                return Err(unexpected_at(&t, "nesting depth within 64"));
            }
            self.depth += 1;
        }
        Ok(match t.tok {
            Tok::LBrace => {
                let obj = self.members(Tok::RBrace)?;
                self.next();
                self.depth -= 1;
                obj
            }
            Tok::LBracket => {
                let mut items = Vec::new();
                loop {
                    self.skip_newlines();
                    if self.peek().tok == Tok::RBracket {
                        self.next();
                        break;
                    }
                    items.push(self.value()?);
                    self.separator(&Tok::RBracket)?;
                }
                self.depth -= 1;
                Node::Array(items)
            }
            Tok::Str(s) => Node::Str(s),
            Tok::Int(i) => Node::Int(i),
            Tok::Ip(ip) => Node::Ip(IpAddr::V4(ip)),
            Tok::Cidr(n) => Node::Cidr(IpNet::V4(n)),
            Tok::Ident(ref s) if s == "true" => Node::Bool(true),
            Tok::Ident(ref s) if s == "false" => Node::Bool(false),
            _ => return Err(unexpected_at(&t, "a value")),
        })
    }
}

/// Parses the whole text into a tree; comments and whitespace are dropped.
pub fn parse_phys_config(text: &str) -> Result<PhysConfigDocument, SyntaxError> {
    let toks = Lexer::new(text).tokens()?;
    let mut p = Parser { toks, pos: 0, depth: 0 };
    Ok(PhysConfigDocument { root: p.document()? })
}

/// Values used where the configuration file is silent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DescriptorDefaults {
    pub network_name: Option<String>,
    pub plmn: Option<String>,
    pub ue_count: Option<u32>,
    pub capture_interface: Option<String>,
    pub window_us: Option<Micros>,
    pub link_profile: Option<LinkProfile>,
    pub qci: Option<u8>,
}

pub const DEFAULT_NETWORK_NAME: &str = "physical-twin";
pub const DEFAULT_PLMN: &str = "00101";
pub const DEFAULT_WINDOW_US: Micros = 120 * MICROS_PER_SEC;

#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub descriptor: TwinDescriptor,
    /// Keys present in the document that extraction does not use.
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExtractError {
    #[error("required path `{0}` is missing")]
    Missing(String),
    #[error("`{path}` must be {expected}, found {found}")]
    WrongType {
        path: String,
        expected: &'static str,
        found: String,
    },
    #[error("extracted descriptor is invalid: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
}

const TOP_LEVEL_KEYS: &[&str] = &[
    "access_point_list",
    "ue_count",
    "plmn",
    "network_name",
    "capture_interface",
];
const APN_KEYS: &[&str] = &["apn", "ip", "cidr", "tun_bw", "tun_bw_dl", "tun_bw_ul", "qci"];

fn wrong(path: &str, expected: &'static str, n: &Node) -> ExtractError {
    ExtractError::WrongType {
        path: path.into(),
        expected,
        found: n.kind().into(),
    }
}

fn as_string(path: &str, n: &Node) -> Result<String, ExtractError> {
    match n {
        Node::Str(s) => Ok(s.clone()),
        Node::Int(i) if *i >= 0 => Ok(i.to_string()),
        _ => Err(wrong(path, "a string", n)),
    }
}

fn as_uint<T: TryFrom<i64>>(path: &str, n: &Node, expected: &'static str) -> Result<T, ExtractError> {
    match n {
        Node::Int(i) if *i >= 0 => T::try_from(*i).map_err(|_| ExtractError::WrongType {
            path: path.into(),
            expected,
            found: i.to_string(),
        }),
        Node::Int(i) => Err(ExtractError::WrongType {
            path: path.into(),
            expected,
            found: i.to_string(),
        }),
        _ => Err(wrong(path, expected, n)),
    }
}

/// Maps a parse tree onto a descriptor: one slice per `access_point_list`
/// entry, `ue_count` from the document, everything else from `defaults`.
pub fn extract_descriptor(
    doc: &PhysConfigDocument,
    defaults: &DescriptorDefaults,
) -> Result<Extraction, ExtractError> {
    let root = &doc.root;
    let Node::Object(fields) = root else {
        return Err(wrong("<root>", "an object", root));
    };
    let mut warnings = Vec::new();
    for (k, _) in fields {
        if !TOP_LEVEL_KEYS.contains(&k.as_str()) {
            warnings.push(format!("ignored unknown key `{k}`"));
        }
    }

    let apns = match root.get("access_point_list") {
        Some(Node::Array(items)) => items,
        Some(other) => return Err(wrong("access_point_list", "an array", other)),
        None => return Err(ExtractError::Missing("access_point_list".into())),
    };

    let mut slices = Vec::with_capacity(apns.len());
    for (i, apn) in apns.iter().enumerate() {
        let base = format!("access_point_list[{i}]");
        let Node::Object(apn_fields) = apn else {
            return Err(wrong(&base, "an object", apn));
        };
        for (k, _) in apn_fields {
            if !APN_KEYS.contains(&k.as_str()) {
                warnings.push(format!("ignored unknown key `{base}.{k}`"));
            }
        }
        let field = |name: &str| -> Result<&Node, ExtractError> {
            apn.get(name)
                .ok_or_else(|| ExtractError::Missing(format!("{base}.{name}")))
        };
        let path = |name: &str| format!("{base}.{name}");

        let dnn = match field("apn")? {
            Node::Str(s) => s.clone(),
            n => return Err(wrong(&path("apn"), "a string", n)),
        };
        let gateway_ip = match field("ip")? {
            Node::Ip(ip) => *ip,
            n => return Err(wrong(&path("ip"), "an IP address", n)),
        };
        let subnet = match field("cidr")? {
            Node::Cidr(net) => *net,
            n => return Err(wrong(&path("cidr"), "a CIDR block", n)),
        };
        let shared_bw = apn
            .get("tun_bw")
            .map(|n| as_uint::<u64>(&path("tun_bw"), n, "a non-negative integer"))
            .transpose()?;
        let directional = |key: &str| -> Result<u64, ExtractError> {
            match apn.get(key) {
                Some(n) => as_uint::<u64>(&path(key), n, "a non-negative integer"),
                None => shared_bw.ok_or_else(|| ExtractError::Missing(path("tun_bw"))),
            }
        };
        let dl_bandwidth_bps = directional("tun_bw_dl")?;
        let ul_bandwidth_bps = directional("tun_bw_ul")?;
        let qci = match apn.get("qci") {
            Some(n) => as_uint::<u8>(&path("qci"), n, "an integer in 0..=255")?,
            None => defaults.qci.ok_or_else(|| ExtractError::Missing(path("qci")))?,
        };
        slices.push(SliceSpec {
            dnn,
            subnet,
            gateway_ip,
            dl_bandwidth_bps,
            ul_bandwidth_bps,
            qci,
        });
    }

    let ue_count = match root.get("ue_count") {
        Some(n) => as_uint::<u32>("ue_count", n, "a non-negative integer")?,
        None => defaults
            .ue_count
            .ok_or_else(|| ExtractError::Missing("ue_count".into()))?,
    };
    let plmn = match root.get("plmn") {
        Some(n) => as_string("plmn", n)?,
        None => defaults.plmn.clone().unwrap_or_else(|| DEFAULT_PLMN.into()),
    };
    let network_name = match root.get("network_name") {
        Some(n) => as_string("network_name", n)?,
        None => defaults
            .network_name
            .clone()
            .unwrap_or_else(|| DEFAULT_NETWORK_NAME.into()),
    };
    let capture_interface = match root.get("capture_interface") {
        Some(n) => as_string("capture_interface", n)?,
        None => defaults
            .capture_interface
            .clone()
            .unwrap_or_else(|| DEFAULT_CAPTURE_INTERFACE.into()),
    };

    let descriptor = TwinDescriptor {
        network_name,
        plmn,
        ue_count,
        capture_interface,
        window_us: defaults.window_us.unwrap_or(DEFAULT_WINDOW_US),
        link_profile: defaults.link_profile.unwrap_or_default(),
        slices,
    };
    let violations = validate_descriptor(&descriptor);
    if !violations.is_empty() {
        return Err(ExtractError::Invalid(violations));
    }
    Ok(Extraction {
        descriptor,
        warnings,
    })
}
