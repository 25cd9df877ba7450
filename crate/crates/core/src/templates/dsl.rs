//! The patch DSL.
//!
//! ```text
//! add_require_patch:
//!   initWallet:
//!     - sload(m_numOwner) == 0
//!
//! delete_public_function_patch:
//!   - initDaylimit
//!   - initMultiowned
//! ```
//!
//! Functions are named by signature (`transfer(address,uint256)`), by
//! selector (`0xa9059cbb`) or by bare name. Conditions:
//!
//! ```text
//! cond    := or
//! or      := and ("or" and)*
//! and     := not ("and" not)*
//! not     := "not" not | cmp
//! cmp     := primary (("==" | "!=" | "<" | "<=" | ">" | ">=") primary)?
//! primary := INT | HEX | "(" cond ")"
//!          | "sload(" (NAME | INT | HEX) ")" | "caller()" | "callvalue()"
//!          | "calldata(" INT ")"
//! ```
//!
//! `calldata(i)` is the i-th 32-byte argument word, after the selector.

use crate::builder::AsmItem;
use crate::hash::Selector;
use crate::json::parse_quantity;
use crate::opcode::Opcode;
use primitive_types::U256;
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DslError {
    #[error("line {line}, column {col}: {message}")]
    SyntaxError {
        line: usize,
        col: usize,
        message: String,
    },
    #[error("line {line}, column {col}: storage name `{name}` is not in the name map")]
    UnresolvedStorageName {
        name: String,
        line: usize,
        col: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FunctionRef {
    Signature(String),
    Selector(Selector),
    Name(String),
}

impl FunctionRef {
    pub fn parse(text: &str) -> Option<FunctionRef> {
        let t = text.trim();
        if t.contains('(') {
            let ok = t.ends_with(')')
                && t.find('(').is_some_and(|i| i > 0 && is_ident(&t[..i]))
                && t.matches('(').count() == 1;
            return ok.then(|| FunctionRef::Signature(t.to_string()));
        }
        if t.starts_with("0x") {
            return Selector::from_hex(t).map(FunctionRef::Selector);
        }
        is_ident(t).then(|| FunctionRef::Name(t.to_string()))
    }
}

impl fmt::Display for FunctionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FunctionRef::Signature(s) | FunctionRef::Name(s) => f.write_str(s),
            FunctionRef::Selector(s) => write!(f, "{s}"),
        }
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_' || c == '$')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '$')
}

/// A storage slot, remembering the name it was written with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StorageRef {
    pub name: Option<String>,
    pub slot: U256,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
}

impl CmpOp {
    fn symbol(self) -> &'static str {
        match self {
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
            CmpOp::Lt => "<",
            CmpOp::Le => "<=",
            CmpOp::Gt => ">",
            CmpOp::Ge => ">=",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expr {
    Lit(U256),
    Sload(StorageRef),
    Caller,
    Callvalue,
    Calldata(u64),
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Not(Box<Expr>),
}

impl Expr {
    fn precedence(&self) -> u8 {
        match self {
            Expr::Or(..) => 1,
            Expr::And(..) => 2,
            Expr::Not(_) => 3,
            Expr::Cmp(..) => 4,
            _ => 5,
        }
    }

    fn is_boolean(&self) -> bool {
        matches!(self, Expr::Cmp(..) | Expr::And(..) | Expr::Or(..) | Expr::Not(_))
    }

    /// Code leaving the value of the expression on the stack.
    pub fn compile(&self, out: &mut Vec<AsmItem>) {
        use Opcode as O;
        match self {
            Expr::Lit(v) => out.push(AsmItem::push_value(*v)),
            Expr::Sload(s) => {
                out.push(AsmItem::push_value(s.slot));
                out.push(AsmItem::Op(O::SLOAD));
            }
            Expr::Caller => out.push(AsmItem::Op(O::CALLER)),
            Expr::Callvalue => out.push(AsmItem::Op(O::CALLVALUE)),
            Expr::Calldata(i) => {
                out.push(AsmItem::push_value(U256::from(*i) * 32 + 4));
                out.push(AsmItem::Op(O::CALLDATALOAD));
            }
            Expr::Cmp(op, a, b) => {
                // Binary opcodes take their first operand from the top.
                b.compile(out);
                a.compile(out);
                let (code, negate) = match op {
                    CmpOp::Eq => (O::EQ, false),
                    CmpOp::Ne => (O::EQ, true),
                    CmpOp::Lt => (O::LT, false),
                    CmpOp::Ge => (O::LT, true),
                    CmpOp::Gt => (O::GT, false),
                    CmpOp::Le => (O::GT, true),
                };
                out.push(AsmItem::Op(code));
                if negate {
                    out.push(AsmItem::Op(O::ISZERO));
                }
            }
            Expr::And(a, b) | Expr::Or(a, b) => {
                b.compile_bool(out);
                a.compile_bool(out);
                out.push(AsmItem::Op(if matches!(self, Expr::And(..)) { O::AND } else { O::OR }));
            }
            Expr::Not(a) => {
                a.compile(out);
                out.push(AsmItem::Op(O::ISZERO));
            }
        }
    }

    fn compile_bool(&self, out: &mut Vec<AsmItem>) {
        self.compile(out);
        if !self.is_boolean() {
            out.push(AsmItem::Op(Opcode::ISZERO));
            out.push(AsmItem::Op(Opcode::ISZERO));
        }
    }

    fn fmt_child(&self, child: &Expr, min: u8, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if child.precedence() < min {
            write!(f, "({child})")
        } else {
            write!(f, "{child}")
        }
    }
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Lit(v) if *v <= U256::from(u32::MAX) => write!(f, "{v}"),
            Expr::Lit(v) => write!(f, "{v:#x}"),
            Expr::Sload(StorageRef { name: Some(n), .. }) => write!(f, "sload({n})"),
            Expr::Sload(StorageRef { slot, .. }) => write!(f, "sload({slot})"),
            Expr::Caller => f.write_str("caller()"),
            Expr::Callvalue => f.write_str("callvalue()"),
            Expr::Calldata(i) => write!(f, "calldata({i})"),
            Expr::Cmp(op, a, b) => {
                self.fmt_child(a, 5, f)?;
                write!(f, " {} ", op.symbol())?;
                self.fmt_child(b, 5, f)
            }
            Expr::And(a, b) => {
                self.fmt_child(a, 2, f)?;
                f.write_str(" and ")?;
                self.fmt_child(b, 3, f)
            }
            Expr::Or(a, b) => {
                self.fmt_child(a, 1, f)?;
                f.write_str(" or ")?;
                self.fmt_child(b, 2, f)
            }
            Expr::Not(a) => {
                f.write_str("not ")?;
                self.fmt_child(a, 3, f)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RequireClause {
    pub function: FunctionRef,
    /// All must hold.
    pub conditions: Vec<Expr>,
}

impl RequireClause {
    /// The conjunction of all conditions.
    pub fn condition(&self) -> Expr {
        let mut iter = self.conditions.iter().cloned();
        let first = iter.next().unwrap_or(Expr::Lit(U256::one()));
        iter.fold(first, |acc, c| Expr::And(Box::new(acc), Box::new(c)))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PatchDslFile {
    pub add_require: Vec<RequireClause>,
    pub delete_public_function: Vec<FunctionRef>,
}

impl PatchDslFile {
    pub fn is_empty(&self) -> bool {
        self.add_require.is_empty() && self.delete_public_function.is_empty()
    }
}

impl fmt::Display for PatchDslFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.add_require.is_empty() {
            writeln!(f, "add_require_patch:")?;
            for clause in &self.add_require {
                writeln!(f, "  {}:", clause.function)?;
                for c in &clause.conditions {
                    writeln!(f, "    - {c}")?;
                }
            }
        }
        if !self.delete_public_function.is_empty() {
            if !self.add_require.is_empty() {
                writeln!(f)?;
            }
            writeln!(f, "delete_public_function_patch:")?;
            for func in &self.delete_public_function {
                writeln!(f, "  - {func}")?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
enum Tok {
    Num(U256),
    Ident(String),
    LParen,
    RParen,
    Op(CmpOp),
}

struct Lexer<'a> {
    line: usize,
    /// Column of the first character of `text`.
    base_col: usize,
    text: &'a str,
}

impl Lexer<'_> {
    fn err(&self, col: usize, message: impl Into<String>) -> DslError {
        DslError::SyntaxError {
            line: self.line,
            col,
            message: message.into(),
        }
    }

    fn tokens(&self) -> Result<Vec<(Tok, usize)>, DslError> {
        let bytes = self.text.as_bytes();
        let mut out = Vec::new();
        let mut i = 0;
        while i < bytes.len() {
            let c = bytes[i] as char;
            let col = self.base_col + i;
            if c.is_whitespace() {
                i += 1;
                continue;
            }
            let two = self.text.get(i..i + 2);
            let (tok, len) = match c {
                '(' => (Tok::LParen, 1),
                ')' => (Tok::RParen, 1),
                '=' if two == Some("==") => (Tok::Op(CmpOp::Eq), 2),
                '!' if two == Some("!=") => (Tok::Op(CmpOp::Ne), 2),
                '<' if two == Some("<=") => (Tok::Op(CmpOp::Le), 2),
                '>' if two == Some(">=") => (Tok::Op(CmpOp::Ge), 2),
                '<' => (Tok::Op(CmpOp::Lt), 1),
                '>' => (Tok::Op(CmpOp::Gt), 1),
                '&' if two == Some("&&") => (Tok::Ident("and".into()), 2),
                '|' if two == Some("||") => (Tok::Ident("or".into()), 2),
                '!' => (Tok::Ident("not".into()), 1),
                c if c.is_ascii_digit() => {
                    let len = self.text[i..]
                        .find(|ch: char| !ch.is_ascii_alphanumeric())
                        .unwrap_or(bytes.len() - i);
                    let lit = &self.text[i..i + len];
                    let v = parse_quantity(lit).map_err(|_| self.err(col, format!("bad number `{lit}`")))?;
                    (Tok::Num(v), len)
                }
                c if c.is_ascii_alphabetic() || c == '_' || c == '$' => {
                    let len = self.text[i..]
                        .find(|ch: char| !(ch.is_ascii_alphanumeric() || ch == '_' || ch == '$'))
                        .unwrap_or(bytes.len() - i);
                    (Tok::Ident(self.text[i..i + len].to_string()), len)
                }
                other => return Err(self.err(col, format!("unexpected character `{other}`"))),
            };
            out.push((tok, col));
            i += len;
        }
        Ok(out)
    }
}

struct Parser<'a> {
    toks: Vec<(Tok, usize)>,
    pos: usize,
    line: usize,
    end_col: usize,
    names: &'a BTreeMap<String, U256>,
}

impl Parser<'_> {
    fn err(&self, message: impl Into<String>) -> DslError {
        DslError::SyntaxError {
            line: self.line,
            col: self.col(),
            message: message.into(),
        }
    }

    fn col(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end_col, |t| t.1)
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.0)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|t| t.0.clone());
        self.pos += 1;
        t
    }

    fn keyword(&mut self, word: &str) -> bool {
        if matches!(self.peek(), Some(Tok::Ident(w)) if w == word) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: Tok, what: &str) -> Result<(), DslError> {
        if self.peek() == Some(&tok) {
            self.pos += 1;
            Ok(())
        } else {
            Err(self.err(format!("expected {what}")))
        }
    }

    fn or(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.and()?;
        while self.keyword("or") {
            lhs = Expr::Or(Box::new(lhs), Box::new(self.and()?));
        }
        Ok(lhs)
    }

    fn and(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.not()?;
        while self.keyword("and") {
            lhs = Expr::And(Box::new(lhs), Box::new(self.not()?));
        }
        Ok(lhs)
    }

    fn not(&mut self) -> Result<Expr, DslError> {
        if self.keyword("not") {
            return Ok(Expr::Not(Box::new(self.not()?)));
        }
        self.cmp()
    }

    fn cmp(&mut self) -> Result<Expr, DslError> {
        let lhs = self.primary()?;
        if let Some(Tok::Op(op)) = self.peek().cloned() {
            self.pos += 1;
            let rhs = self.primary()?;
            return Ok(Expr::Cmp(op, Box::new(lhs), Box::new(rhs)));
        }
        Ok(lhs)
    }

    fn primary(&mut self) -> Result<Expr, DslError> {
        let col = self.col();
        match self.next() {
            Some(Tok::Num(v)) => Ok(Expr::Lit(v)),
            Some(Tok::LParen) => {
                let e = self.or()?;
                self.expect(Tok::RParen, "`)`")?;
                Ok(e)
            }
            Some(Tok::Ident(name)) => {
                self.expect(Tok::LParen, &format!("`(` after `{name}`"))?;
                let arg_col = self.col();
                let arg = match self.peek() {
                    Some(Tok::RParen) => None,
                    _ => self.next(),
                };
                self.expect(Tok::RParen, "`)`")?;
                match (name.as_str(), arg) {
                    ("caller", None) => Ok(Expr::Caller),
                    ("callvalue", None) => Ok(Expr::Callvalue),
                    ("sload", Some(Tok::Num(slot))) => Ok(Expr::Sload(StorageRef { name: None, slot })),
                    ("sload", Some(Tok::Ident(var))) => match self.names.get(&var) {
                        Some(slot) => Ok(Expr::Sload(StorageRef {
                            name: Some(var),
                            slot: *slot,
                        })),
                        None => Err(DslError::UnresolvedStorageName {
                            name: var,
                            line: self.line,
                            col: arg_col,
                        }),
                    },
                    ("calldata", Some(Tok::Num(i))) if i <= U256::from(u32::MAX) => {
                        Ok(Expr::Calldata(i.as_u64()))
                    }
                    ("caller" | "callvalue" | "sload" | "calldata", _) => Err(DslError::SyntaxError {
                        line: self.line,
                        col: arg_col,
                        message: format!("bad argument to `{name}`"),
                    }),
                    _ => Err(DslError::SyntaxError {
                        line: self.line,
                        col,
                        message: format!("unknown function `{name}`"),
                    }),
                }
            }
            Some(_) => Err(DslError::SyntaxError {
                line: self.line,
                col,
                message: "expected an expression".into(),
            }),
            None => Err(self.err("unexpected end of condition")),
        }
    }
}

fn parse_condition(
    text: &str,
    line: usize,
    base_col: usize,
    names: &BTreeMap<String, U256>,
) -> Result<Expr, DslError> {
    let lexer = Lexer { line, base_col, text };
    let toks = lexer.tokens()?;
    let mut p = Parser {
        toks,
        pos: 0,
        line,
        end_col: base_col + text.len(),
        names,
    };
    let e = p.or()?;
    if p.pos < p.toks.len() {
        return Err(p.err("trailing input"));
    }
    Ok(e)
}

#[derive(PartialEq)]
enum Section {
    None,
    Require,
    Delete,
}

/// Parse a DSL file. `names` maps storage variable names to slots.
pub fn parse_patch_dsl(text: &str, names: &BTreeMap<String, U256>) -> Result<PatchDslFile, DslError> {
    let mut file = PatchDslFile::default();
    let mut section = Section::None;
    let mut current: Option<(usize, usize)> = None; // (clause index, header indent)

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim_end();
        if content.trim().is_empty() {
            continue;
        }
        let err = |col: usize, message: String| DslError::SyntaxError { line, col, message };
        if let Some(pos) = content.find('\t') {
            return Err(err(pos + 1, "tabs are not allowed for indentation".into()));
        }
        let indent = content.len() - content.trim_start().len();
        let body = content.trim_start();
        let col = indent + 1;

        if indent == 0 {
            section = match body.trim_end() {
                "add_require_patch:" => Section::Require,
                "delete_public_function_patch:" => Section::Delete,
                other => return Err(err(col, format!("unknown clause `{other}`"))),
            };
            current = None;
            continue;
        }

        let item = body.strip_prefix('-').map(|rest| {
            let lead = rest.len() - rest.trim_start().len();
            (rest.trim(), col + 1 + lead)
        });
        match section {
            Section::None => return Err(err(col, "indented line outside a clause".into())),
            Section::Delete => {
                let (name, name_col) = item.ok_or_else(|| err(col, "expected `- function`".into()))?;
                let func = FunctionRef::parse(name)
                    .ok_or_else(|| err(name_col, format!("bad function reference `{name}`")))?;
                if !file.delete_public_function.contains(&func) {
                    file.delete_public_function.push(func);
                }
            }
            Section::Require => match item {
                Some((cond, cond_col)) => {
                    let (clause, header_indent) =
                        current.ok_or_else(|| err(col, "condition before any function".into()))?;
                    if indent <= header_indent {
                        return Err(err(col, "condition must be indented below its function".into()));
                    }
                    let e = parse_condition(cond, line, cond_col, names)?;
                    file.add_require[clause].conditions.push(e);
                }
                None => {
                    let name = body
                        .strip_suffix(':')
                        .ok_or_else(|| err(col, "expected `function:`".into()))?;
                    let func = FunctionRef::parse(name)
                        .ok_or_else(|| err(col, format!("bad function reference `{name}`")))?;
                    let clause = match file.add_require.iter().position(|c| c.function == func) {
                        Some(i) => i,
                        None => {
                            file.add_require.push(RequireClause {
                                function: func,
                                conditions: Vec::new(),
                            });
                            file.add_require.len() - 1
                        }
                    };
                    current = Some((clause, indent));
                }
            },
        }
    }
    if let Some(empty) = file.add_require.iter().find(|c| c.conditions.is_empty()) {
        return Err(DslError::SyntaxError {
            line: text.lines().count().max(1),
            col: 1,
            message: format!("function `{}` has no conditions", empty.function),
        });
    }
    Ok(file)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIG: &str = "add_require_patch:\n  initWallet:\n    - sload(m_numOwner) == 0\n\ndelete_public_function_patch: \n  - initDayLimit\n  - initMultiowned\n";

    fn names() -> BTreeMap<String, U256> {
        BTreeMap::from([("m_numOwner".to_string(), U256::zero())])
    }

    #[test]
    fn wallet_patch() {
        let f = parse_patch_dsl(FIG, &names()).unwrap();
        assert_eq!(f.add_require.len(), 1);
        assert_eq!(f.add_require[0].function, FunctionRef::Name("initWallet".into()));
        assert_eq!(
            f.add_require[0].conditions[0],
            Expr::Cmp(
                CmpOp::Eq,
                Box::new(Expr::Sload(StorageRef {
                    name: Some("m_numOwner".into()),
                    slot: U256::zero()
                })),
                Box::new(Expr::Lit(U256::zero()))
            )
        );
        assert_eq!(
            f.delete_public_function,
            vec![
                FunctionRef::Name("initDayLimit".into()),
                FunctionRef::Name("initMultiowned".into())
            ]
        );
    }

    #[test]
    fn empty_file() {
        assert!(parse_patch_dsl("", &names()).unwrap().is_empty());
        assert!(parse_patch_dsl("# nothing\n\n", &names()).unwrap().is_empty());
    }

    #[test]
    fn caller_guard_roundtrip() {
        let text = "add_require_patch:\n  f():\n    - caller() == 0x1111111111111111111111111111111111111111\n";
        let f = parse_patch_dsl(text, &names()).unwrap();
        assert_eq!(f.add_require[0].function, FunctionRef::Signature("f()".into()));
        assert!(matches!(&f.add_require[0].conditions[0], Expr::Cmp(CmpOp::Eq, a, _) if **a == Expr::Caller));
        let printed = f.to_string();
        assert_eq!(parse_patch_dsl(&printed, &names()).unwrap(), f);
        assert_eq!(parse_patch_dsl(&printed, &names()).unwrap().to_string(), printed);
    }

    #[test]
    fn precedence() {
        let e = parse_condition("not caller() == 1 or callvalue() > 2 and sload(3) <= 4", 1, 1, &names()).unwrap();
        assert!(matches!(e, Expr::Or(..)));
        assert_eq!(e.to_string(), "not caller() == 1 or callvalue() > 2 and sload(3) <= 4");
        let e = parse_condition("(caller() == 1 or callvalue() == 0) and calldata(1) != 0", 1, 1, &names()).unwrap();
        assert_eq!(e.to_string(), "(caller() == 1 or callvalue() == 0) and calldata(1) != 0");
        let e = parse_condition("caller() == 1 && !(callvalue() > 0)", 1, 1, &names()).unwrap();
        assert_eq!(e.to_string(), "caller() == 1 and not callvalue() > 0");
    }

    #[test]
    fn errors_carry_positions() {
        let err = parse_patch_dsl("add_require_patch:\n  f:\n    - sload(owner) == 1\n", &names()).unwrap_err();
        assert_eq!(
            err,
            DslError::UnresolvedStorageName {
                name: "owner".into(),
                line: 3,
                col: 13
            }
        );
        let err = parse_patch_dsl("reentrancy_patch:\n", &names()).unwrap_err();
        assert!(matches!(err, DslError::SyntaxError { line: 1, col: 1, .. }));
        let err = parse_patch_dsl("add_require_patch:\n  f:\n    - caller() ==\n", &names()).unwrap_err();
        assert!(matches!(err, DslError::SyntaxError { line: 3, col: 18, .. }), "{err:?}");
        let err = parse_patch_dsl("add_require_patch:\n  f:\n    - frob(1)\n", &names()).unwrap_err();
        assert!(matches!(err, DslError::SyntaxError { line: 3, col: 7, .. }), "{err:?}");
    }

    #[test]
    fn function_refs() {
        assert_eq!(
            FunctionRef::parse("0xa9059cbb"),
            Some(FunctionRef::Selector(Selector([0xa9, 0x05, 0x9c, 0xbb])))
        );
        assert_eq!(FunctionRef::parse("transfer(address,uint256)"), Some(FunctionRef::Signature("transfer(address,uint256)".into())));
        assert_eq!(FunctionRef::parse("9lives"), None);
        assert_eq!(FunctionRef::parse("f(("), None);
    }
}
