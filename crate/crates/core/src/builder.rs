//! Label-aware instruction builder.
//!
//! Label pushes get the narrowest width that holds the resolved address.
//! Layout is relaxed until it stops changing; widths only grow, so it
//! terminates.

use crate::asm::minimal_be_bytes;
use crate::opcode::Opcode;
use primitive_types::U256;
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AsmItem {
    Op(Opcode),
    /// Push with an explicit operand; the width is the operand length.
    Push(Vec<u8>),
    /// Push of a label address.
    PushLabel(String),
    /// Push of a label address with a fixed width.
    PushLabelWide(String, usize),
    /// A JUMPDEST that defines a label.
    Label(String),
    /// Defines a label at the current position without emitting a byte.
    Mark(String),
    Raw(Vec<u8>),
}

impl AsmItem {
    pub fn push_value(value: impl Into<U256>) -> AsmItem {
        AsmItem::Push(minimal_be_bytes(value.into()))
    }

    /// Opcode this item emits first, if it is an instruction.
    pub fn opcode(&self) -> Option<Opcode> {
        match self {
            AsmItem::Op(op) => Some(*op),
            AsmItem::Push(bytes) => Some(Opcode::push(bytes.len())),
            AsmItem::PushLabel(_) => Some(Opcode::PUSH1),
            AsmItem::PushLabelWide(_, w) => Some(Opcode::push(*w)),
            AsmItem::Label(_) => Some(Opcode::JUMPDEST),
            AsmItem::Mark(_) | AsmItem::Raw(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BuildError {
    #[error("undefined label `{0}`")]
    UndefinedLabel(String),
    #[error("label `{0}` defined twice")]
    DuplicateLabel(String),
    #[error("push operand of {0} bytes exceeds 32")]
    OperandTooWide(usize),
    #[error("label `{label}` at {addr:#x} does not fit in {width} bytes")]
    LabelTooFar {
        label: String,
        addr: usize,
        width: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Assembled {
    pub code: Vec<u8>,
    pub labels: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Default)]
pub struct Assembler {
    items: Vec<AsmItem>,
}

impl Assembler {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn items(&self) -> &[AsmItem] {
        &self.items
    }

    pub fn into_items(self) -> Vec<AsmItem> {
        self.items
    }

    pub fn item(&mut self, item: AsmItem) -> &mut Self {
        self.items.push(item);
        self
    }

    pub fn extend(&mut self, items: impl IntoIterator<Item = AsmItem>) -> &mut Self {
        self.items.extend(items);
        self
    }

    pub fn op(&mut self, op: Opcode) -> &mut Self {
        self.item(AsmItem::Op(op))
    }

    pub fn ops(&mut self, ops: &[Opcode]) -> &mut Self {
        for op in ops {
            self.op(*op);
        }
        self
    }

    /// Minimal-width push.
    pub fn push(&mut self, value: impl Into<U256>) -> &mut Self {
        self.item(AsmItem::push_value(value))
    }

    /// Push with an exact width.
    pub fn push_n(&mut self, width: usize, value: impl Into<U256>) -> &mut Self {
        let mut buf = [0u8; 32];
        value.into().to_big_endian(&mut buf);
        self.item(AsmItem::Push(buf[32 - width..].to_vec()))
    }

    pub fn push_bytes(&mut self, bytes: &[u8]) -> &mut Self {
        self.item(AsmItem::Push(bytes.to_vec()))
    }

    pub fn push_label(&mut self, label: &str) -> &mut Self {
        self.item(AsmItem::PushLabel(label.to_string()))
    }

    pub fn label(&mut self, label: &str) -> &mut Self {
        self.item(AsmItem::Label(label.to_string()))
    }

    pub fn mark(&mut self, label: &str) -> &mut Self {
        self.item(AsmItem::Mark(label.to_string()))
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.item(AsmItem::Raw(bytes.to_vec()))
    }

    pub fn jump(&mut self, label: &str) -> &mut Self {
        self.push_label(label).op(Opcode::JUMP)
    }

    pub fn jumpi(&mut self, label: &str) -> &mut Self {
        self.push_label(label).op(Opcode::JUMPI)
    }

    /// `PUSH1 0; DUP1; REVERT`
    pub fn revert_empty(&mut self) -> &mut Self {
        self.push(0u8).ops(&[Opcode::DUP1, Opcode::REVERT])
    }

    pub fn build(&self) -> Result<Assembled, BuildError> {
        assemble_items(&self.items, 0)
    }

    pub fn build_at(&self, base: usize) -> Result<Assembled, BuildError> {
        assemble_items(&self.items, base)
    }
}

/// Lay out `items` as if the first byte sits at address `base`.
pub fn assemble_items(items: &[AsmItem], base: usize) -> Result<Assembled, BuildError> {
    let mut widths: Vec<usize> = items
        .iter()
        .map(|item| match item {
            AsmItem::PushLabelWide(_, w) => *w,
            _ => 1,
        })
        .collect();
    loop {
        let labels = layout(items, &widths, base)?;
        let mut changed = false;
        for (i, item) in items.iter().enumerate() {
            if let AsmItem::PushLabel(name) | AsmItem::PushLabelWide(name, _) = item {
                let addr = *labels
                    .get(name)
                    .ok_or_else(|| BuildError::UndefinedLabel(name.clone()))?;
                let need = minimal_be_bytes(U256::from(addr)).len();
                if matches!(item, AsmItem::PushLabel(_)) && need > widths[i] {
                    widths[i] = need;
                    changed = true;
                }
            }
        }
        if !changed {
            return emit(items, &widths, labels);
        }
    }
}

fn layout(
    items: &[AsmItem],
    widths: &[usize],
    base: usize,
) -> Result<BTreeMap<String, usize>, BuildError> {
    let mut labels = BTreeMap::new();
    let mut pc = base;
    for (item, width) in items.iter().zip(widths) {
        match item {
            AsmItem::Label(name) | AsmItem::Mark(name)
                if labels.insert(name.clone(), pc).is_some() => {
                    return Err(BuildError::DuplicateLabel(name.clone()));
                }
            _ => {}
        }
        pc += match item {
            AsmItem::Op(_) | AsmItem::Label(_) => 1,
            AsmItem::Push(bytes) => 1 + bytes.len(),
            AsmItem::PushLabel(_) | AsmItem::PushLabelWide(..) => 1 + width,
            AsmItem::Mark(_) => 0,
            AsmItem::Raw(bytes) => bytes.len(),
        };
    }
    Ok(labels)
}

fn emit(
    items: &[AsmItem],
    widths: &[usize],
    labels: BTreeMap<String, usize>,
) -> Result<Assembled, BuildError> {
    let mut code = Vec::new();
    for (item, &width) in items.iter().zip(widths) {
        match item {
            AsmItem::Op(op) => code.push(op.0),
            AsmItem::Label(_) => code.push(Opcode::JUMPDEST.0),
            AsmItem::Mark(_) => {}
            AsmItem::Raw(bytes) => code.extend_from_slice(bytes),
            AsmItem::Push(bytes) => {
                if bytes.is_empty() || bytes.len() > 32 {
                    return Err(BuildError::OperandTooWide(bytes.len()));
                }
                code.push(Opcode::push(bytes.len()).0);
                code.extend_from_slice(bytes);
            }
            AsmItem::PushLabel(name) | AsmItem::PushLabelWide(name, _) => {
                let addr = labels[name];
                let bytes = minimal_be_bytes(U256::from(addr));
                if bytes.len() > width || width > 32 {
                    return Err(BuildError::LabelTooFar {
                        label: name.clone(),
                        addr,
                        width,
                    });
                }
                code.push(Opcode::push(width).0);
                code.extend(std::iter::repeat_n(0, width - bytes.len()));
                code.extend_from_slice(&bytes);
            }
        }
    }
    Ok(Assembled { code, labels })
}
