//! Plain-text template files.
//!
//! One item per line:
//!
//! ```text
//! # comment
//! .mode replace            (or insert_before; replace is the default)
//! .replaces ADD
//! DUP1
//! PUSH @ok                 label reference
//! PUSH2 0x0004             explicit width
//! PUSH $limit              hole filled at specialization
//! ok:                      JUMPDEST defining `ok`
//! .out_of_line             items below are emitted once, after the copies
//! ```

use super::{make_instance, PatchMode, TemplateError, TemplateInstance};
use crate::builder::AsmItem;
use crate::json::parse_quantity;
use crate::opcode::Opcode;
use primitive_types::U256;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TextItem {
    Item(AsmItem),
    Hole { name: String, width: Option<usize> },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextTemplate {
    pub name: String,
    pub mode: PatchMode,
    pub replaces: Option<Opcode>,
    pub inline: Vec<TextItem>,
    pub out_of_line: Vec<TextItem>,
}

fn syntax(line: usize, message: impl Into<String>) -> TemplateError {
    TemplateError::TemplateSyntax {
        line,
        message: message.into(),
    }
}

fn parse_push(line_no: usize, mnemonic: &str, arg: &str) -> Result<TextItem, TemplateError> {
    let width = match mnemonic {
        "PUSH" => None,
        m => {
            let n: usize = m[4..]
                .parse()
                .map_err(|_| syntax(line_no, format!("bad push `{m}`")))?;
            if !(1..=32).contains(&n) {
                return Err(syntax(line_no, format!("bad push width {n}")));
            }
            Some(n)
        }
    };
    if let Some(label) = arg.strip_prefix('@') {
        return Ok(TextItem::Item(match width {
            None => AsmItem::PushLabel(label.to_string()),
            Some(w) => AsmItem::PushLabelWide(label.to_string(), w),
        }));
    }
    if let Some(hole) = arg.strip_prefix('$') {
        return Ok(TextItem::Hole {
            name: hole.to_string(),
            width,
        });
    }
    let value = parse_quantity(arg).map_err(|e| syntax(line_no, e))?;
    Ok(TextItem::Item(push_item(value, width).map_err(|m| syntax(line_no, m))?))
}

fn push_item(value: U256, width: Option<usize>) -> Result<AsmItem, String> {
    let minimal = crate::asm::minimal_be_bytes(value);
    match width {
        None => Ok(AsmItem::Push(minimal)),
        Some(w) if minimal.len() <= w => {
            let mut buf = [0u8; 32];
            value.to_big_endian(&mut buf);
            Ok(AsmItem::Push(buf[32 - w..].to_vec()))
        }
        Some(w) => Err(format!("value {value:#x} does not fit in {w} bytes")),
    }
}

pub fn parse_template_text(name: &str, text: &str) -> Result<TextTemplate, TemplateError> {
    let mut template = TextTemplate {
        name: name.to_string(),
        mode: PatchMode::Replace,
        replaces: None,
        inline: Vec::new(),
        out_of_line: Vec::new(),
    };
    let mut in_tail = false;
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut words = line.split_whitespace();
        let head = words.next().expect("non-empty line");
        let arg = words.next();
        if words.next().is_some() {
            return Err(syntax(line_no, "too many fields"));
        }
        let item = if let Some(directive) = head.strip_prefix('.') {
            match (directive, arg) {
                ("mode", Some("replace")) => template.mode = PatchMode::Replace,
                ("mode", Some("insert_before")) => template.mode = PatchMode::InsertBefore,
                ("replaces", Some(m)) => {
                    template.replaces = Some(
                        Opcode::from_mnemonic(m)
                            .ok_or_else(|| syntax(line_no, format!("unknown opcode `{m}`")))?,
                    )
                }
                ("out_of_line", None) => in_tail = true,
                _ => return Err(syntax(line_no, format!("bad directive `{line}`"))),
            }
            continue;
        } else if let Some(label) = head.strip_suffix(':') {
            if arg.is_some() || label.is_empty() {
                return Err(syntax(line_no, "a label stands on its own line"));
            }
            TextItem::Item(AsmItem::Label(label.to_string()))
        } else {
            let upper = head.to_ascii_uppercase();
            if upper.starts_with("PUSH") {
                let arg = arg.ok_or_else(|| syntax(line_no, "push needs an operand"))?;
                parse_push(line_no, &upper, arg)?
            } else {
                if arg.is_some() {
                    return Err(syntax(line_no, format!("{upper} takes no operand")));
                }
                let op = Opcode::from_mnemonic(&upper)
                    .ok_or_else(|| syntax(line_no, format!("unknown opcode `{head}`")))?;
                TextItem::Item(AsmItem::Op(op))
            }
        };
        if in_tail {
            template.out_of_line.push(item);
        } else {
            template.inline.push(item);
        }
    }
    Ok(template)
}

impl TextTemplate {
    /// Fill holes and build an instance.
    pub fn instantiate(&self, holes: &BTreeMap<String, U256>) -> Result<TemplateInstance, TemplateError> {
        let fill = |items: &[TextItem]| -> Result<Vec<AsmItem>, TemplateError> {
            items
                .iter()
                .map(|item| match item {
                    TextItem::Item(i) => Ok(i.clone()),
                    TextItem::Hole { name, width } => {
                        let value = holes
                            .get(name)
                            .ok_or_else(|| TemplateError::UnresolvedHole(name.clone()))?;
                        push_item(*value, *width).map_err(|message| TemplateError::TemplateSyntax {
                            line: 0,
                            message,
                        })
                    }
                })
                .collect()
        };
        make_instance(
            &self.name,
            self.mode,
            self.replaces,
            fill(&self.inline)?,
            fill(&self.out_of_line)?,
        )
    }
}

/// Every `<name>.evm` file in `dir`, keyed by file stem.
pub fn load_template_dir(dir: &Path) -> std::io::Result<BTreeMap<String, Result<TextTemplate, TemplateError>>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("evm") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else {
            continue;
        };
        let text = std::fs::read_to_string(&path)?;
        out.insert(stem.to_string(), parse_template_text(stem, &text));
    }
    Ok(out)
}
