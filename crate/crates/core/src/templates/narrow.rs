//! A word-size-parameterized model of the arithmetic templates.
//!
//! Running a template with 8-bit words makes it feasible to check every
//! operand pair. The machine understands only what the arithmetic
//! templates use and panics on anything else.

use crate::builder::AsmItem;
use crate::opcode::Opcode;
use std::collections::BTreeMap;

/// Run template `items` on `stack` (top first) with `bits`-wide words.
/// `None` means the template reverted.
pub fn run_narrow(items: &[AsmItem], bits: u32, stack: &[u64]) -> Option<Vec<u64>> {
    let mask = (1u64 << bits) - 1;
    let labels: BTreeMap<&str, usize> = items
        .iter()
        .enumerate()
        .filter_map(|(i, it)| match it {
            AsmItem::Label(n) => Some((n.as_str(), i)),
            _ => None,
        })
        .collect();
    // Labels are pushed as their item index.
    let mut st: Vec<u64> = stack.iter().rev().copied().collect();
    let mut pending: Option<usize> = None;
    let mut i = 0;
    while i < items.len() {
        let mut next = i + 1;
        let mut label_pushed = None;
        match &items[i] {
            AsmItem::Label(_) | AsmItem::Mark(_) => {}
            AsmItem::Push(bytes) => {
                st.push(bytes.iter().fold(0u64, |acc, b| (acc << 8) | *b as u64) & mask)
            }
            AsmItem::PushLabel(n) | AsmItem::PushLabelWide(n, _) => {
                st.push(u64::MAX);
                label_pushed = Some(labels[n.as_str()]);
            }
            AsmItem::Raw(_) => panic!("raw bytes in template"),
            AsmItem::Op(op) => {
                let op = *op;
                let n = op.0;
                let pop = |st: &mut Vec<u64>| st.pop().expect("stack underflow");
                match op {
                    _ if (0x80..=0x8f).contains(&n) => {
                        let d = (n - 0x7f) as usize;
                        st.push(st[st.len() - d]);
                    }
                    _ if (0x90..=0x9f).contains(&n) => {
                        let d = (n - 0x8f) as usize;
                        let top = st.len() - 1;
                        st.swap(top, top - d);
                    }
                    Opcode::ADD | Opcode::SUB | Opcode::MUL | Opcode::DIV | Opcode::LT | Opcode::GT
                    | Opcode::EQ | Opcode::OR | Opcode::AND => {
                        let a = pop(&mut st);
                        let b = pop(&mut st);
                        st.push(match op {
                            Opcode::ADD => a.wrapping_add(b) & mask,
                            Opcode::SUB => a.wrapping_sub(b) & mask,
                            Opcode::MUL => a.wrapping_mul(b) & mask,
                            Opcode::DIV => a.checked_div(b).unwrap_or(0),
                            Opcode::LT => (a < b) as u64,
                            Opcode::GT => (a > b) as u64,
                            Opcode::EQ => (a == b) as u64,
                            Opcode::OR => a | b,
                            _ => a & b,
                        });
                    }
                    Opcode::ISZERO => {
                        let a = pop(&mut st);
                        st.push((a == 0) as u64);
                    }
                    Opcode::POP => {
                        pop(&mut st);
                    }
                    Opcode::JUMPI => {
                        let _dest = pop(&mut st);
                        let cond = pop(&mut st);
                        if cond != 0 {
                            next = pending.expect("JUMPI target is a pushed label");
                        }
                    }
                    Opcode::REVERT => return None,
                    other => panic!("narrow machine lacks {other}"),
                }
            }
        }
        pending = label_pushed;
        i = next;
    }
    st.reverse();
    Some(st)
}

