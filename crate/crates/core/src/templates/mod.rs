//! Patch templates and their specialization to a contract.

pub mod dispatcher;
pub mod dsl;
pub mod narrow;
mod text;

pub use dispatcher::{
    locate_dispatcher, resolve_function, specialize_add_require,
    specialize_delete_public_function, DispatchEntry, DispatcherInfo,
};
pub use dsl::{parse_patch_dsl, Expr, FunctionRef, PatchDslFile, RequireClause, StorageRef};
pub use text::{load_template_dir, parse_template_text, TextTemplate};

use crate::asm::{disassemble, jumpdest_analysis};
use crate::builder::AsmItem;
use crate::cfg::recover_blocks;
use crate::gas::GasSchedule;
use crate::rewriter::PatchPoint;
use crate::opcode::Opcode;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TemplateError {
    #[error("unsupported vulnerability class `{0}`")]
    UnsupportedVulnerabilityClass(String),
    #[error("dispatcher not recognized: {0}")]
    DispatcherNotRecognized(String),
    #[error("function `{0}` not found")]
    FunctionNotFound(String),
    #[error("function name `{name}` is ambiguous: {candidates:?}")]
    AmbiguousFunction {
        name: String,
        candidates: Vec<String>,
    },
    #[error("{template}: expected {expected} at pc {pc:#x}, found {found}")]
    WrongInstruction {
        template: String,
        pc: usize,
        expected: Opcode,
        found: String,
    },
    #[error("{template}: stack delta {delta} on the success path, expected {expected}")]
    NotStackNeutral {
        template: String,
        delta: i64,
        expected: i64,
    },
    #[error("{template}: success path does not reach the end of the template")]
    NoSuccessPath { template: String },
    #[error("template line {line}: {message}")]
    TemplateSyntax { line: usize, message: String },
    #[error("template hole `${0}` has no value")]
    UnresolvedHole(String),
    #[error("access-control entries need a patch DSL file")]
    MissingDsl,
    #[error(transparent)]
    Dsl(#[from] dsl::DslError),
    #[error("report pc {pc:#x}: {message}")]
    BadReportPc { pc: usize, message: String },
}

/// Closed set of vulnerability classes accepted from reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VulnerabilityKind {
    IntAddOverflow,
    IntSubUnderflow,
    IntMulOverflow,
    AccessControl,
}

impl VulnerabilityKind {
    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        Ok(match text {
            "int_add_overflow" => VulnerabilityKind::IntAddOverflow,
            "int_sub_underflow" => VulnerabilityKind::IntSubUnderflow,
            "int_mul_overflow" => VulnerabilityKind::IntMulOverflow,
            "access_control" => VulnerabilityKind::AccessControl,
            other => return Err(TemplateError::UnsupportedVulnerabilityClass(other.to_string())),
        })
    }

    pub fn as_str(self) -> &'static str {
        match self {
            VulnerabilityKind::IntAddOverflow => "int_add_overflow",
            VulnerabilityKind::IntSubUnderflow => "int_sub_underflow",
            VulnerabilityKind::IntMulOverflow => "int_mul_overflow",
            VulnerabilityKind::AccessControl => "access_control",
        }
    }
}

impl fmt::Display for VulnerabilityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub pc: usize,
    /// Kept as text so that unknown classes surface as a template error
    /// rather than a parse failure.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selector: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    /// Set for arithmetic the detector believes is signed; such entries
    /// are not patched with unsigned checks.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub signed: bool,
}

/// Output of an external detector.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnerabilityReport {
    #[serde(default)]
    pub contract: String,
    #[serde(default)]
    pub entries: Vec<ReportEntry>,
    /// Operator-supplied pcs to ignore.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blacklist: Vec<usize>,
}

impl VulnerabilityReport {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Entries that are neither blacklisted nor marked signed.
    pub fn actionable(&self) -> impl Iterator<Item = &ReportEntry> {
        self.entries
            .iter()
            .filter(|e| !e.signed && !self.blacklist.contains(&e.pc))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    CheckedAdd,
    CheckedSub,
    CheckedMul,
    AddRequire,
    DeletePublicFunction,
    Identity,
}

impl TemplateId {
    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::CheckedAdd => "checked_add",
            TemplateId::CheckedSub => "checked_sub",
            TemplateId::CheckedMul => "checked_mul",
            TemplateId::AddRequire => "add_require",
            TemplateId::DeletePublicFunction => "delete_public_function",
            TemplateId::Identity => "identity",
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A template before specialization.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchTemplate {
    pub id: TemplateId,
    /// Instruction the template stands in for, for arithmetic templates.
    pub replaces: Option<Opcode>,
}

pub fn select_template(entry: &ReportEntry) -> Result<PatchTemplate, TemplateError> {
    let (id, replaces) = match VulnerabilityKind::parse(&entry.kind)? {
        VulnerabilityKind::IntAddOverflow => (TemplateId::CheckedAdd, Some(Opcode::ADD)),
        VulnerabilityKind::IntSubUnderflow => (TemplateId::CheckedSub, Some(Opcode::SUB)),
        VulnerabilityKind::IntMulOverflow => (TemplateId::CheckedMul, Some(Opcode::MUL)),
        VulnerabilityKind::AccessControl => (TemplateId::AddRequire, None),
    };
    Ok(PatchTemplate { id, replaces })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchMode {
    /// The template takes the place of the instruction at the patch point.
    Replace,
    /// The template runs first, then the original instruction.
    InsertBefore,
}

/// A template specialized to one patch point; free of holes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateInstance {
    pub template: String,
    pub mode: PatchMode,
    pub inline: Vec<AsmItem>,
    /// Emitted once after the patched copies, e.g. a shared revert stub.
    pub out_of_line: Vec<AsmItem>,
    /// Extra gas on the success path relative to the unpatched code.
    pub expected_extra_gas: u64,
}

/// Gas and net stack effect of the path through `items` that takes every
/// conditional jump to a label defined in `items` and skips those that
/// leave it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuccessPath {
    pub gas: u64,
    pub stack_delta: i64,
}

pub fn success_path(items: &[AsmItem], schedule: &GasSchedule) -> Option<SuccessPath> {
    let labels: BTreeMap<&str, usize> = items
        .iter()
        .enumerate()
        .filter_map(|(i, item)| match item {
            AsmItem::Label(n) | AsmItem::Mark(n) => Some((n.as_str(), i)),
            _ => None,
        })
        .collect();
    let mut gas = 0;
    let mut delta = 0i64;
    let mut i = 0;
    let mut pending_label: Option<&str> = None;
    let mut steps = 0;
    while i < items.len() {
        steps += 1;
        if steps > 10 * items.len() + 10 {
            return None;
        }
        let item = &items[i];
        let mut next = i + 1;
        match item {
            AsmItem::Mark(_) | AsmItem::Raw(_) => {}
            AsmItem::Label(_) => gas += schedule.cost_or_zero(Opcode::JUMPDEST),
            AsmItem::Push(_) | AsmItem::PushLabelWide(..) | AsmItem::PushLabel(_) => {
                gas += 3;
                delta += 1;
            }
            AsmItem::Op(op) => {
                let info = op.info()?;
                gas += schedule.static_gas(*op).ok()?;
                delta += info.outputs as i64 - info.inputs as i64;
                let local = pending_label.and_then(|l| labels.get(l)).copied();
                match *op {
                    // A guard jumping out of the template is its failure exit.
                    Opcode::JUMPI => {
                        if let Some(target) = local {
                            next = target;
                        }
                    }
                    Opcode::JUMP => next = local?,
                    op if op.is_halting_or_jump() => return None,
                    _ => {}
                }
            }
        }
        pending_label = match item {
            AsmItem::PushLabel(n) | AsmItem::PushLabelWide(n, _) => Some(n.as_str()),
            _ => None,
        };
        i = next;
    }
    Some(SuccessPath {
        gas,
        stack_delta: delta,
    })
}

/// Build an instance and derive its expected gas from the success path.
pub fn make_instance(
    template: &str,
    mode: PatchMode,
    replaced: Option<Opcode>,
    inline: Vec<AsmItem>,
    out_of_line: Vec<AsmItem>,
) -> Result<TemplateInstance, TemplateError> {
    let schedule = GasSchedule::default();
    let path = success_path(&inline, &schedule).ok_or_else(|| TemplateError::NoSuccessPath {
        template: template.to_string(),
    })?;
    let saved = match (mode, replaced) {
        (PatchMode::Replace, Some(op)) => schedule.cost_or_zero(op),
        _ => 0,
    };
    Ok(TemplateInstance {
        template: template.to_string(),
        mode,
        inline,
        out_of_line,
        expected_extra_gas: path.gas.saturating_sub(saved),
    })
}

fn arithmetic_instance(id: TemplateId, replaced: Opcode, inline: Vec<AsmItem>) -> TemplateInstance {
    make_instance(id.as_str(), PatchMode::Replace, Some(replaced), inline, Vec::new())
        .expect("built-in templates have a success path")
}

fn revert_items() -> [AsmItem; 3] {
    [
        AsmItem::push_value(0u8),
        AsmItem::Op(Opcode::DUP1),
        AsmItem::Op(Opcode::REVERT),
    ]
}

/// ADD that reverts when `a + b` wraps, i.e. when the sum is below `a`.
pub fn checked_add_instance() -> TemplateInstance {
    use Opcode as O;
    let mut items: Vec<AsmItem> = [O::DUP1, O::SWAP2, O::ADD, O::DUP1, O::SWAP2, O::SWAP1, O::LT, O::ISZERO]
        .into_iter()
        .map(AsmItem::Op)
        .collect();
    items.push(AsmItem::PushLabel("ok".into()));
    items.push(AsmItem::Op(O::JUMPI));
    items.extend(revert_items());
    items.push(AsmItem::Label("ok".into()));
    arithmetic_instance(TemplateId::CheckedAdd, O::ADD, items)
}

/// SUB computing `a - b` that reverts when `b > a`.
pub fn checked_sub_instance() -> TemplateInstance {
    use Opcode as O;
    let mut items: Vec<AsmItem> = [O::DUP1, O::DUP3, O::GT, O::ISZERO]
        .into_iter()
        .map(AsmItem::Op)
        .collect();
    items.push(AsmItem::PushLabel("ok".into()));
    items.push(AsmItem::Op(O::JUMPI));
    items.extend(revert_items());
    items.push(AsmItem::Label("ok".into()));
    items.push(AsmItem::Op(O::SUB));
    arithmetic_instance(TemplateId::CheckedSub, O::SUB, items)
}

/// MUL that reverts unless `a == 0` or `(a * b) / a == b`.
pub fn checked_mul_instance() -> TemplateInstance {
    use Opcode as O;
    let mut items: Vec<AsmItem> = [
        O::DUP2,
        O::DUP2,
        O::MUL,
        O::DUP2,
        O::DUP2,
        O::DIV,
        O::DUP4,
        O::EQ,
        O::DUP3,
        O::ISZERO,
        O::OR,
    ]
    .into_iter()
    .map(AsmItem::Op)
    .collect();
    items.push(AsmItem::PushLabel("ok".into()));
    items.push(AsmItem::Op(O::JUMPI));
    items.extend(revert_items());
    items.push(AsmItem::Label("ok".into()));
    items.extend([O::SWAP2, O::POP, O::POP].map(AsmItem::Op));
    arithmetic_instance(TemplateId::CheckedMul, O::MUL, items)
}

/// Changes nothing except routing the block through a trampoline.
pub fn identity_instance() -> TemplateInstance {
    TemplateInstance {
        template: TemplateId::Identity.as_str().to_string(),
        mode: PatchMode::InsertBefore,
        inline: Vec::new(),
        out_of_line: Vec::new(),
        expected_extra_gas: 0,
    }
}

/// Built-in instance for an arithmetic template.
pub fn arithmetic_for(id: TemplateId) -> Option<TemplateInstance> {
    match id {
        TemplateId::CheckedAdd => Some(checked_add_instance()),
        TemplateId::CheckedSub => Some(checked_sub_instance()),
        TemplateId::CheckedMul => Some(checked_mul_instance()),
        _ => None,
    }
}

/// Fail unless the success path of an arithmetic instance has the stack
/// effect of the binary instruction it replaces.
pub fn check_stack_neutral(instance: &TemplateInstance) -> Result<(), TemplateError> {
    let path = success_path(&instance.inline, &GasSchedule::default()).ok_or_else(|| {
        TemplateError::NoSuccessPath {
            template: instance.template.clone(),
        }
    })?;
    if path.stack_delta != -1 {
        return Err(TemplateError::NotStackNeutral {
            template: instance.template.clone(),
            delta: path.stack_delta,
            expected: -1,
        });
    }
    Ok(())
}

/// Patches derived from a report and an optional DSL file.
#[derive(Clone, Debug, Default)]
pub struct Specialized {
    pub patches: Vec<(PatchPoint, TemplateInstance)>,
    pub warnings: Vec<String>,
}

/// Turn report entries and DSL clauses into concrete patches for `code`.
///
/// Arithmetic entries must point at the instruction their template
/// replaces. Access-control entries only say that the DSL applies; the
/// DSL clauses are applied once, whether or not the report names them.
pub fn specialize_report(
    code: &[u8],
    report: &VulnerabilityReport,
    dsl: Option<&PatchDslFile>,
    signatures: &[String],
) -> Result<Specialized, TemplateError> {
    let program = disassemble(code);
    let cfg = recover_blocks(&program, &jumpdest_analysis(code));
    let mut out = Specialized::default();
    let mut wants_dsl = false;
    for entry in &report.entries {
        if report.blacklist.contains(&entry.pc) {
            out.warnings.push(format!("pc {:#x} is blacklisted, skipped", entry.pc));
        } else if entry.signed {
            out.warnings.push(format!(
                "pc {:#x} is signed arithmetic, not patched with an unsigned check",
                entry.pc
            ));
        }
    }
    for entry in report.actionable() {
        let template = select_template(entry)?;
        let Some(replaced) = template.replaces else {
            wants_dsl = true;
            continue;
        };
        let instance = arithmetic_for(template.id).expect("arithmetic template");
        let found = program.at(entry.pc).ok_or_else(|| TemplateError::BadReportPc {
            pc: entry.pc,
            message: "not an instruction boundary".into(),
        })?;
        if found.opcode != replaced {
            return Err(TemplateError::WrongInstruction {
                template: instance.template.clone(),
                pc: entry.pc,
                expected: replaced,
                found: found.mnemonic(),
            });
        }
        check_stack_neutral(&instance)?;
        let point = PatchPoint::locate(&cfg, entry.pc, entry.kind.clone()).map_err(|e| {
            TemplateError::BadReportPc {
                pc: entry.pc,
                message: e.to_string(),
            }
        })?;
        out.patches.push((point, instance));
    }
    match dsl {
        Some(file) if !file.is_empty() => {
            let info = locate_dispatcher(&program, &cfg)?;
            for clause in &file.add_require {
                out.patches.push(specialize_add_require(clause, &info, &cfg, signatures)?);
            }
            for func in &file.delete_public_function {
                out.patches.push(specialize_delete_public_function(func, &info, &cfg, signatures)?);
            }
        }
        _ if wants_dsl => return Err(TemplateError::MissingDsl),
        _ => {}
    }
    Ok(out)
}
