mod common;

use bytepatch_core::asm::{assemble, disassemble};
use bytepatch_core::difftester::{replay_pair, ReplayOptions, Verdict};
use bytepatch_core::minievm::{Transaction, WorldState};
use bytepatch_core::rewriter::{rewrite, RewriteError};
use bytepatch_core::samples::{addr, bec};
use bytepatch_core::templates::{
    identity_instance, parse_patch_dsl, dsl::CmpOp, Expr, FunctionRef, PatchDslFile, RequireClause,
    StorageRef,
};
use common::*;
use primitive_types::U256;
use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use std::collections::{BTreeMap, BTreeSet};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn assemble_inverts_disassemble(code in proptest::collection::vec(any::<u8>(), 0..2048)) {
        prop_assert_eq!(assemble(&disassemble(&code)).unwrap(), code);
    }

    #[test]
    fn rewrite_keeps_addresses(seed in any::<u64>(), tail in any::<bool>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let prog = random_program(&mut rng, tail);
        prop_assume!(!prog.arith.is_empty());
        let mut patches = Vec::new();
        let mut used = BTreeSet::new();
        for &(pc, op) in &prog.arith {
            if rng.gen_bool(0.5) && used.insert(pc) {
                let inst = if rng.gen_bool(0.3) { identity_instance() } else { instance_for(op) };
                patches.push((locate(&prog.code, pc, "int_overflow"), inst));
            }
        }
        match rewrite(&prog.code, &patches) {
            Ok(out) => {
                let violation = address_preservation_violation(&prog.code, &out);
                prop_assert!(violation.is_none(), "{:?}", violation);
            }
            // Tiny blocks are legitimately unpatchable.
            Err(RewriteError::InsufficientBlockSize { .. }) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn identity_patch_is_invisible(seed in any::<u64>()) {
        let mut rng = StdRng::seed_from_u64(seed);
        let tail = rng.gen_bool(0.5);
        let prog = random_program(&mut rng, tail);
        let contract = addr(0xc0de);
        let mut world = WorldState::default();
        world.set_code(contract, prog.code.clone());
        let txs = vec![Transaction::call(addr(1), contract, vec![], 1_000_000); 2];
        if let Some(outcome) = identity_equivalence(&world, contract, &prog.code, &txs) {
            prop_assert_eq!(outcome.report.count(Verdict::Identical), txs.len());
            prop_assert!(outcome.gas_mismatches.is_empty(), "{:?}", outcome.gas_mismatches);
        }
    }
}

fn expr_strategy() -> impl Strategy<Value = Expr> {
    let leaf = prop_oneof![
        any::<u32>().prop_map(|v| Expr::Lit(U256::from(v))),
        (0u64..3).prop_map(|s| Expr::Sload(StorageRef {
            name: None,
            slot: U256::from(s)
        })),
        Just(Expr::Sload(StorageRef {
            name: Some("owner".into()),
            slot: U256::from(7)
        })),
        Just(Expr::Caller),
        Just(Expr::Callvalue),
        (0u64..4).prop_map(Expr::Calldata),
    ];
    leaf.prop_recursive(4, 24, 2, |inner| {
        let op = prop_oneof![
            Just(CmpOp::Eq),
            Just(CmpOp::Ne),
            Just(CmpOp::Lt),
            Just(CmpOp::Le),
            Just(CmpOp::Gt),
            Just(CmpOp::Ge)
        ];
        prop_oneof![
            (op, inner.clone(), inner.clone()).prop_map(|(o, a, b)| Expr::Cmp(o, Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::And(Box::new(a), Box::new(b))),
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Expr::Or(Box::new(a), Box::new(b))),
            inner.prop_map(|a| Expr::Not(Box::new(a))),
        ]
    })
}

proptest! {
    #[test]
    fn dsl_print_parse_fixed_point(conds in proptest::collection::vec(expr_strategy(), 1..4)) {
        let names = BTreeMap::from([("owner".to_string(), U256::from(7))]);
        let file = PatchDslFile {
            add_require: vec![RequireClause {
                function: FunctionRef::Signature("f(uint256)".into()),
                conditions: conds,
            }],
            delete_public_function: vec![FunctionRef::Name("g".into())],
        };
        let text = file.to_string();
        let parsed = parse_patch_dsl(&text, &names).unwrap();
        prop_assert_eq!(parsed.to_string(), text);
        let again = parse_patch_dsl(&parsed.to_string(), &names).unwrap();
        prop_assert_eq!(again, parsed);
    }
}

#[test]
fn replay_is_deterministic() {
    let s = bec::scenario(10);
    let spec = bytepatch_core::templates::specialize_report(&s.code, &s.report, None, &s.signatures).unwrap();
    let out = rewrite(&s.code, &spec.patches).unwrap();
    let run = || {
        replay_pair(
            &s.world,
            s.contract,
            &s.code,
            &out.patched_code,
            &s.transactions,
            &s.known_attacks,
            &ReplayOptions::default(),
        )
        .unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn boundary_words_disassemble_cleanly() {
    // A lone PUSH32 at the very end.
    let code = vec![0x7f];
    let p = disassemble(&code);
    assert_eq!(p.instructions[0].missing, 32);
    assert_eq!(assemble(&p).unwrap(), code);
}
