//! Property tests: the textual format round-trips, merging preserves sorted
//! permutations, and semantics-preserving transforms stay equivalent under
//! interpretation.

use proptest::prelude::*;

use systolic::externs::merge_streams;
use systolic::ir::expr::Expr;
use systolic::ir::{Parameter, Placement, Program};
use systolic::parse::{dump_spec, parse_spec};
use systolic::schedule::{Directive, Schedule};
use systolic::value::{Binding, ElemType, Scalar};
use systolic::verify::{differential_check, CheckOptions};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Merging two sorted streams yields a sorted permutation of the inputs.
    #[test]
    fn merge_is_a_sorted_permutation(
        mut a in proptest::collection::vec(-100i64..100, 1..12),
        mut b in proptest::collection::vec(-100i64..100, 1..12),
    ) {
        let n = a.len().min(b.len());
        a.truncate(n);
        b.truncate(n);
        a.sort_unstable();
        b.sort_unstable();
        let sa: Vec<Scalar> = a.iter().map(|&v| Scalar::Int(v)).collect();
        let sb: Vec<Scalar> = b.iter().map(|&v| Scalar::Int(v)).collect();
        let merged = merge_streams(n as i64, &sa, &sb).unwrap();
        let got: Vec<i64> = merged.iter().map(|v| v.as_index().unwrap()).collect();
        let mut want = [a.clone(), b.clone()].concat();
        want.sort_unstable();
        prop_assert_eq!(got, want);
    }

    /// parse(dump(parse(x))) == parse(x) over generated programs.
    #[test]
    fn textual_round_trip(
        extents in proptest::collection::vec(1i64..5, 1..3),
        factor_pick in 0usize..4,
        with_update in any::<bool>(),
    ) {
        let names = ["i", "j"];
        let tiles = ["ii", "jj"];
        let n = extents.len();
        let mut p = Program::new();
        p.add_parameter(Parameter::matrix("x", ElemType::Int, n)).unwrap();
        for v in names.iter().take(n) {
            p.add_var(v).unwrap();
        }
        for v in tiles.iter().take(n) {
            p.add_var(v).unwrap();
        }
        p.add_func("F", Placement::Device).unwrap();
        let idx: Vec<Expr> = names.iter().take(n).map(|v| Expr::var(v)).collect();
        p.add_definition("F", idx.clone(), Expr::param("x", idx.clone()), false).unwrap();
        if with_update {
            let mut lhs = idx.clone();
            let last = lhs.len() - 1;
            lhs[last] = Expr::int(0);
            p.add_definition("F", lhs, Expr::param("x", idx.clone()), true).unwrap();
        }
        for (d, v) in names.iter().take(n).enumerate() {
            p.set_bounds("F", v, Expr::int(0), Expr::int(extents[d])).unwrap();
        }
        let mut s = Schedule::new();
        let divisors: Vec<i64> = (1..=extents[0]).filter(|f| extents[0] % f == 0).collect();
        let f = divisors[factor_pick % divisors.len()];
        s.push("F", Directive::Tile {
            args: vec![Expr::var(names[0]), Expr::var(tiles[0]), Expr::int(f)],
        });
        let text1 = dump_spec(&p, &s);
        let (p2, s2) = parse_spec(&text1).unwrap();
        let text2 = dump_spec(&p2, &s2);
        let (p3, s3) = parse_spec(&text2).unwrap();
        prop_assert_eq!(&p2, &p3);
        prop_assert_eq!(&s2, &s3);
    }

    /// Tile then interpret equals the untiled interpretation: the transformed
    /// nest visits the same assignments.
    #[test]
    fn tiling_preserves_interpretation(
        extent in 1i64..9,
        factor_pick in 0usize..4,
        values in proptest::collection::vec(-9i64..9, 8..9),
    ) {
        let mut p = Program::new();
        p.add_parameter(Parameter::matrix("x", ElemType::Int, 1)).unwrap();
        p.add_var("i").unwrap();
        p.add_var("ii").unwrap();
        p.add_func("F", Placement::Device).unwrap();
        p.add_definition(
            "F",
            vec![Expr::var("i")],
            Expr::mul(Expr::param("x", vec![Expr::var("i")]), Expr::int(3)),
            false,
        ).unwrap();
        p.set_bounds("F", "i", Expr::int(0), Expr::int(extent)).unwrap();
        let divisors: Vec<i64> = (1..=extent).filter(|f| extent % f == 0).collect();
        let f = divisors[factor_pick % divisors.len()];
        let mut s = Schedule::new();
        s.push("F", Directive::Tile {
            args: vec![Expr::var("i"), Expr::var("ii"), Expr::int(f)],
        });
        let mut b = Binding::new();
        let data: Vec<i64> = values.into_iter().take(extent as usize).collect();
        b.set_tensor("x", systolic::value::Tensor::from_vec_i64(&data));
        let reg = systolic::externs::Registry::with_builtins();
        let report = differential_check(&p, &s, &b, &reg, &CheckOptions::default());
        prop_assert!(report.pass, "{}", report.render());
    }
}
