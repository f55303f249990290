mod common;

use common::{all_bool_traces, reference_sat, prop, to_signal};
use fairguard::metrics::Axis;
use fairguard::stl::{evaluate, parse_spec, Comparator, FairnessRule, Formula, SignalTrace, Statement};
use proptest::prelude::*;

const NAMES: [&str; 3] = ["p", "q", "r"];

fn formula_strategy() -> impl Strategy<Value = Formula> {
    let leaf = (0..NAMES.len()).prop_map(|i| prop(NAMES[i]));
    leaf.prop_recursive(4, 24, 2, |inner| {
        let iv = (0usize..3, 0usize..3).prop_map(|(a, w)| (a, a + w));
        prop_oneof![
            inner.clone().prop_map(Formula::not),
            (inner.clone(), inner.clone()).prop_map(|(l, r)| Formula::and(l, r)),
            (inner.clone(), inner.clone()).prop_map(|(l, r)| Formula::or(l, r)),
            (inner.clone(), inner.clone()).prop_map(|(l, r)| Formula::implies(l, r)),
            (iv.clone(), inner.clone()).prop_map(|((a, b), f)| Formula::always(a, b, f)),
            (iv.clone(), inner.clone()).prop_map(|((a, b), f)| Formula::eventually(a, b, f)),
            (iv, inner.clone(), inner).prop_map(|((a, b), l, r)| Formula::until(a, b, l, r)),
        ]
    })
}

fn traces_strategy(len: usize) -> impl Strategy<Value = Vec<(&'static str, Vec<bool>)>> {
    prop::collection::vec(prop::collection::vec(any::<bool>(), len), NAMES.len())
        .prop_map(|vs| NAMES.iter().copied().zip(vs).collect())
}

fn signal_trace(traces: &[(&'static str, Vec<bool>)]) -> SignalTrace {
    SignalTrace::new(traces.iter().map(|(n, v)| (*n, to_signal(v)))).unwrap()
}

fn implementation(f: &Formula, trace: &SignalTrace, t: usize) -> Option<bool> {
    evaluate(f, trace, t).ok()
}

/// Atoms with arbitrary constants and tolerances for printing checks.
fn rich_formula_strategy() -> impl Strategy<Value = Formula> {
    let cmp = prop_oneof![
        Just(Comparator::Eq),
        Just(Comparator::Le),
        Just(Comparator::Ge),
        Just(Comparator::Lt),
        Just(Comparator::Gt)
    ];
    let num = prop_oneof![any::<f64>().prop_filter("finite", |v| v.is_finite()), -10.0..10.0f64];
    let tol = prop_oneof![Just(fairguard::stl::DEFAULT_TOLERANCE), 1e-12..1.0f64];
    let leaf = (0..NAMES.len(), cmp, num, tol).prop_map(|(i, c, v, tol)| {
        let mut a = fairguard::stl::SignalAtom::new(NAMES[i], c, v);
        a.tolerance = tol;
        Formula::Predicate(fairguard::stl::Predicate::Signal(a))
    });
    leaf.prop_recursive(4, 24, 2, |inner| {
        let iv = (0usize..50, 0usize..50).prop_map(|(a, w)| (a, a + w));
        prop_oneof![
            inner.clone().prop_map(Formula::not),
            (inner.clone(), inner.clone()).prop_map(|(l, r)| Formula::and(l, r)),
            (inner.clone(), inner.clone()).prop_map(|(l, r)| Formula::or(l, r)),
            (inner.clone(), inner.clone()).prop_map(|(l, r)| Formula::implies(l, r)),
            (iv.clone(), inner.clone()).prop_map(|((a, b), f)| Formula::always(a, b, f)),
            (iv.clone(), inner.clone()).prop_map(|((a, b), f)| Formula::eventually(a, b, f)),
            (iv, inner.clone(), inner).prop_map(|((a, b), l, r)| Formula::until(a, b, l, r)),
        ]
    })
}

proptest! {
    #[test]
    fn de_morgan(l in formula_strategy(), r in formula_strategy(), traces in traces_strategy(10), t in 0usize..3) {
        let tr = signal_trace(&traces);
        let lhs = Formula::not(Formula::and(l.clone(), r.clone()));
        let rhs = Formula::or(Formula::not(l), Formula::not(r));
        prop_assert_eq!(implementation(&lhs, &tr, t), implementation(&rhs, &tr, t));
    }

    #[test]
    fn always_is_not_eventually_not(f in formula_strategy(), a in 0usize..3, w in 0usize..3, traces in traces_strategy(12)) {
        let tr = signal_trace(&traces);
        let box_f = Formula::always(a, a + w, f.clone());
        let dual = Formula::not(Formula::eventually(a, a + w, Formula::not(f)));
        prop_assert_eq!(implementation(&box_f, &tr, 0), implementation(&dual, &tr, 0));
    }

    #[test]
    fn matches_reference_interpreter(f in formula_strategy(), len in 1usize..=12, bits in prop::collection::vec(any::<bool>(), 36), t in 0usize..4) {
        let traces: Vec<(&str, Vec<bool>)> = NAMES
            .iter()
            .enumerate()
            .map(|(k, n)| (*n, bits[k * 12..k * 12 + len].to_vec()))
            .collect();
        let tr = signal_trace(&traces);
        prop_assert_eq!(implementation(&f, &tr, t), reference_sat(&f, &traces, t));
    }

    #[test]
    fn print_parse_fixpoint(f in rich_formula_strategy()) {
        let printed = f.to_string();
        let once = parse_spec(&printed).unwrap();
        prop_assert_eq!(&once.items, &vec![Statement::Formula(f)]);
        let twice = parse_spec(&once.to_string()).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn rules_round_trip(k in 0.0..1.0f64, c in -0.5..0.5f64, horizon in 0usize..500, spatial in any::<bool>()) {
        let axis = if spatial { Axis::Spatial } else { Axis::Temporal };
        let rule = FairnessRule::single(axis, "income", "demand", k, c, horizon);
        let spec = parse_spec(&rule.to_string()).unwrap();
        prop_assert_eq!(spec.rules().next(), Some(&rule));
    }
}

#[test]
fn until_over_every_short_trace() {
    for a in 0..3 {
        for b in a..4 {
            let f = Formula::until(a, b, prop("p"), prop("q"));
            for len in 1..=8 {
                for p in all_bool_traces(len) {
                    for q in all_bool_traces(len) {
                        let traces = vec![("p", p.clone()), ("q", q)];
                        let tr = signal_trace(&traces);
                        for t in 0..len {
                            // witness t' and every earlier step t'' in [t, t')
                            let brute = if t + b >= len {
                                None
                            } else {
                                let mut found = false;
                                for t1 in t + a..=t + b {
                                    let mut ok = traces[1].1[t1];
                                    for t2 in t..t1 {
                                        ok &= traces[0].1[t2];
                                    }
                                    found |= ok;
                                }
                                Some(found)
                            };
                            assert_eq!(implementation(&f, &tr, t), brute, "{f} at {t}");
                        }
                    }
                }
            }
        }
    }
}

#[test]
fn spec_file_with_rules_and_formulas() {
    let text = "# two rules\n\
        if |PC_spatial(income, demand)| >= 0.1 then always[0,1999] (PC_spatial(income, demand) == 0 and mean_spatial(demand) == keep and std_spatial(demand) == keep)\n\
        if |PC_temporal(assistance, demand)| then always[0,99] PC_temporal(assistance, demand)\n\
        always[0,5] gloss_spatial(g0, pred) <= 0.5 and always[0,5] gloss_spatial(g1, pred) <= 0.5\n";
    let spec = parse_spec(text).unwrap();
    assert_eq!(spec.rules().count(), 2);
    assert_eq!(spec.formulas().count(), 1);
    assert_eq!(parse_spec(&spec.to_string()).unwrap(), spec);
}
