use super::*;
use crate::asm::parse_hex;
use crate::minievm::{execute, Transaction, WorldState};
use crate::templates::{checked_add_instance, identity_instance};
use primitive_types::H160;

fn point(code: &[u8], pc: usize, kind: &str) -> PatchPoint {
    let program = disassemble(code);
    let cfg = recover_blocks(&program, &jumpdest_analysis(code));
    PatchPoint::locate(&cfg, pc, kind).unwrap()
}

fn run(code: &[u8]) -> crate::minievm::Receipt {
    let to = H160::repeat_byte(0xcc);
    let mut world = WorldState::default();
    world.set_code(to, code.to_vec());
    let tx = Transaction::call(H160::repeat_byte(0xaa), to, vec![], 100_000);
    execute(&world, &tx.env()).1
}

#[test]
fn golden_checked_add() {
    let code = parse_hex("60016001015b00").unwrap();
    let p = point(&code, 4, "int_add_overflow");
    let out = rewrite(&code, &[(p, checked_add_instance())]).unwrap();
    assert_eq!(
        to_hex(&out.patched_code),
        "600756fefe5b005b600160018091018091901015601b57600080fd5b600556"
    );
    assert_eq!(out.padding, 0);
    assert_eq!(out.appended_region_start, 7);
    assert_eq!(out.size_increase, 24);
    assert_eq!(
        out.trampolines,
        vec![Trampoline {
            block_start: 0,
            block_end: 5,
            target: 7
        }]
    );
    let note = &out.report[0];
    assert_eq!(note.rejoin, Some(5));
    assert_eq!(note.traversal_gas_delta, 12 + 11 + 35);
    assert_eq!(run(&code).gas_used, 10);
    assert_eq!(run(&out.patched_code).gas_used, 68);
}

fn to_hex(b: &[u8]) -> String {
    hex::encode(b)
}

#[test]
fn no_patches_is_identity() {
    let code = parse_hex("60016001015b00").unwrap();
    let out = rewrite(&code, &[]).unwrap();
    assert_eq!(out.patched_code, code);
    assert_eq!(out.size_increase, 0);
    assert!(out.trampolines.is_empty());
}

#[test]
fn short_block_is_rejected() {
    // `ADD; JUMPDEST` leaves a one-byte block before the JUMPDEST.
    let code = parse_hex("015b00").unwrap();
    let p = point(&code, 0, "int_add_overflow");
    let err = rewrite(&code, &[(p, checked_add_instance())]).unwrap_err();
    assert!(matches!(
        err,
        RewriteError::InsufficientBlockSize { start: 0, end: 1, size: 1, needed: 3 }
    ));
}

#[test]
fn trampoline_shapes() {
    let t = trampoline_for(7, 5).unwrap();
    assert_eq!(encode(&t), vec![0x60, 0x07, 0x56, 0xfe, 0xfe]);
    let t = trampoline_for(0x1234, 4).unwrap();
    assert_eq!(encode(&t), vec![0x61, 0x12, 0x34, 0x56]);
    assert!(matches!(
        trampoline_for(7, 2),
        Err(RewriteError::InsufficientBlockSize { needed: 3, .. })
    ));
    let t = trampoline_with_entry(7, 4, true).unwrap();
    assert_eq!(encode(&t), vec![0x5b, 0x60, 0x07, 0x56]);
    assert!(trampoline_with_entry(7, 3, true).is_err());
}

#[test]
fn padding_cases() {
    assert_eq!(compute_padding(0, &[]), 0);
    assert_eq!(compute_padding(0, &parse_hex("6001").unwrap()), 0);
    // PUSH2 with one operand byte present.
    assert_eq!(compute_padding(0, &parse_hex("6101").unwrap()), 1);
    assert_eq!(compute_padding(0, &parse_hex("7f").unwrap()), 32);
    assert_eq!(compute_padding(2, &parse_hex("00007f0102").unwrap()), 30);
}

#[test]
fn truncated_tail_is_padded() {
    // STOP-free straight line, then a cut-off PUSH2 in the data tail.
    let code = parse_hex("6001600101005b61ff").unwrap();
    let p = point(&code, 4, "int_add_overflow");
    let out = rewrite(&code, &[(p, checked_add_instance())]).unwrap();
    assert_eq!(out.padding, 1);
    assert_eq!(out.appended_region_start, code.len() + 1);
    assert_eq!(out.patched_code[code.len()], 0);
    assert_eq!(run(&out.patched_code).gas_used, run(&code).gas_used + 12 + 35);
}

#[test]
fn identity_costs_two_hops() {
    let code = parse_hex("60016001015b00").unwrap();
    let p = point(&code, 4, "probe");
    let out = rewrite(&code, &[(p, identity_instance())]).unwrap();
    assert_eq!(out.report[0].traversal_gas_delta, 23);
    assert_eq!(run(&out.patched_code).gas_used, 10 + 23);
}

#[test]
fn entry_jumpdest_is_kept() {
    // Jump to 3, where a JUMPDEST block does the ADD.
    let code = parse_hex("6003565b60016001015b00").unwrap();
    let p = point(&code, 8, "int_add_overflow");
    assert_eq!(p.block.start, 3);
    let out = rewrite(&code, &[(p, checked_add_instance())]).unwrap();
    assert_eq!(out.patched_code[3], 0x5b);
    let r = run(&out.patched_code);
    assert!(r.is_success());
    assert_eq!(r.gas_used, run(&code).gas_used + 12 + 11 + 35);
}

#[test]
fn overlap_and_stale_points() {
    let code = parse_hex("60016001015b00").unwrap();
    let p = point(&code, 4, "int_add_overflow");
    let err = rewrite(
        &code,
        &[(p.clone(), checked_add_instance()), (p.clone(), checked_add_instance())],
    )
    .unwrap_err();
    assert_eq!(err, RewriteError::OverlappingPatches(4));

    let mut stale = p.clone();
    stale.block.end = 7;
    assert!(matches!(
        rewrite(&code, &[(stale, checked_add_instance())]),
        Err(RewriteError::StalePatchPoint { pc: 4, .. })
    ));

    let mut inside = p;
    inside.pc = 1;
    assert!(matches!(
        rewrite(&code, &[(inside, checked_add_instance())]),
        Err(RewriteError::BadPatchPoint { pc: 1, .. })
    ));
}

#[test]
fn state_changing_template_is_refused() {
    let code = parse_hex("60016001015b00").unwrap();
    let p = point(&code, 4, "x");
    let mut bad = identity_instance();
    bad.inline = vec![AsmItem::push_value(0u8), AsmItem::push_value(0u8), AsmItem::Op(Opcode::SSTORE)];
    assert!(matches!(
        rewrite(&code, &[(p, bad)]),
        Err(RewriteError::StateChangingTemplate { opcode: Opcode::SSTORE, .. })
    ));
}

#[test]
fn fallthrough_off_the_end() {
    let code = parse_hex("6001600101").unwrap();
    let p = point(&code, 4, "int_add_overflow");
    assert_eq!(
        rewrite(&code, &[(p, checked_add_instance())]).unwrap_err(),
        RewriteError::UnterminatedFallthrough(0)
    );
}

#[test]
fn size_cap() {
    let mut code = parse_hex("60016001015b00").unwrap();
    code.resize(MAX_CODE_SIZE - 10, 0);
    let p = point(&code, 4, "int_add_overflow");
    assert!(matches!(
        rewrite(&code, &[(p, checked_add_instance())]),
        Err(RewriteError::CodeSizeCapExceeded { cap: MAX_CODE_SIZE, .. })
    ));
}

#[test]
fn two_patches_in_one_block_share_a_copy() {
    // 1 + 1 + 1; both ADDs are in block 0.
    let code = parse_hex("600160016001010100").unwrap();
    let a = point(&code, 6, "int_add_overflow");
    let b = point(&code, 7, "int_add_overflow");
    let out = rewrite(&code, &[(b, checked_add_instance()), (a, checked_add_instance())]).unwrap();
    assert_eq!(out.trampolines.len(), 1);
    assert_eq!(out.report.len(), 2);
    let r = run(&out.patched_code);
    assert!(r.is_success());
    assert_eq!(r.gas_used, run(&code).gas_used + 12 + 35 + 35);
}

#[test]
fn chain_duplicates_reuse_patched_code() {
    // Block 0 ends in a JUMPI that is not taken, so it falls into block 8,
    // which has no JUMPDEST and must travel with block 0's copy.
    let code = parse_hex("6000600001600e576001600101005b00").unwrap();
    let a = point(&code, 4, "int_add_overflow");
    let b = point(&code, 12, "int_add_overflow");
    assert_eq!(b.block.start, 8);
    let out = rewrite(&code, &[(a, checked_add_instance()), (b, checked_add_instance())]).unwrap();
    assert_eq!(out.report[0].duplicated_blocks, vec![8]);
    assert_eq!(out.report[0].rejoin, None);
    assert_eq!(out.trampolines.len(), 2);
    let r = run(&out.patched_code);
    assert!(r.is_success());
    assert_eq!(r.gas_used, run(&code).gas_used + 12 + 35 + 35);
}

#[test]
fn padding_without_data_tail() {
    let code = parse_hex("60016101").unwrap();
    assert_eq!(compute_padding(code.len(), &code), 1);
}

#[test]
fn template_ranges_cover_only_template_code() {
    let code = parse_hex("60016001015b00").unwrap();
    let p = point(&code, 4, "int_add_overflow");
    let out = rewrite(&code, &[(p, checked_add_instance())]).unwrap();
    // The copy is JUMPDEST, PUSH1 1, PUSH1 1 (8..12), then the check.
    assert_eq!(out.template_ranges, vec![(12, 0x1c)]);
}
