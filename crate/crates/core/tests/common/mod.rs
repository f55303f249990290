//! Oracles shared by the integration tests.
#![allow(dead_code)]

use fairguard::stl::{Comparator, Formula, Predicate, Rhs};

/// Direct reading of the qualitative semantics on boolean traces. Signal
/// `name` is true at `t` when `traces[name][t]` is. `None` when some window
/// the formula mentions runs past the end of the trace.
pub fn reference_sat(f: &Formula, traces: &[(&str, Vec<bool>)], t: usize) -> Option<bool> {
    let len = traces[0].1.len();
    if t + f.horizon() >= len {
        return None;
    }
    Some(sat(f, traces, t))
}

fn sat(f: &Formula, traces: &[(&str, Vec<bool>)], t: usize) -> bool {
    match f {
        Formula::Predicate(Predicate::Signal(s)) => {
            let v = traces.iter().find(|(n, _)| *n == s.name).expect("signal").1[t];
            let x = if v { 1.0 } else { 0.0 };
            s.cmp.holds(x, s.rhs, s.tolerance)
        }
        Formula::Predicate(Predicate::Metric(_)) => panic!("boolean traces only"),
        Formula::Not(g) => !sat(g, traces, t),
        Formula::And(l, r) => sat(l, traces, t) & sat(r, traces, t),
        Formula::Or(l, r) => sat(l, traces, t) | sat(r, traces, t),
        Formula::Implies(l, r) => !sat(l, traces, t) | sat(r, traces, t),
        Formula::Always(i, g) => (t + i.a..=t + i.b).all(|s| sat(g, traces, s)),
        Formula::Eventually(i, g) => (t + i.a..=t + i.b).any(|s| sat(g, traces, s)),
        Formula::Until(i, l, r) => (t + i.a..=t + i.b)
            .any(|s| sat(r, traces, s) && (t..s).all(|u| sat(l, traces, u))),
    }
}

/// `name > 0.5`, read as "signal is true" on 0/1 traces.
pub fn prop(name: &str) -> Formula {
    Formula::signal(name, Comparator::Gt, 0.5)
}

pub fn to_signal(bits: &[bool]) -> Vec<f64> {
    bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
}

/// Every boolean vector of length `len`.
pub fn all_bool_traces(len: usize) -> impl Iterator<Item = Vec<bool>> {
    (0u32..1 << len).map(move |m| (0..len).map(|i| m >> i & 1 == 1).collect())
}

pub fn rhs_is_keep(r: &Rhs) -> bool {
    matches!(r, Rhs::Keep)
}

/// Synthetic panel with one low-income cluster whose demand follows its own
/// noisier AR(1) dynamics, so a student with shared weights under-serves it.
pub struct DynBench {
    pub groups: fairguard::dynamic_guard::GroupAssignment,
    pub train: fairguard::dynamic_guard::Series,
    pub test: fairguard::dynamic_guard::Series,
    pub planted: Vec<usize>,
}

pub fn dyn_bench(seed: u64) -> DynBench {
    use fairguard::dataio::{generate_synthetic, PlantedGroup, SynthSpec};
    use fairguard::dynamic_guard::{assign_groups, Extreme, Normalizer, ProtectedRule, Series};
    let spec = SynthSpec {
        timestamps: 1000,
        planted_group: Some(PlantedGroup {
            size: 6,
            shift: -4.0,
            noise_ar: 0.9,
            noise_scale_factor: 2.0,
        }),
        seed,
        ..SynthSpec::default()
    };
    let (panel, truth) = generate_synthetic(&spec).unwrap();
    let split = 800;
    let rule = ProtectedRule {
        feature: "income".into(),
        extreme: Extreme::Min,
        count: 1,
    };
    let groups = assign_groups(&panel, &["income".to_string()], split, 2, &rule, seed).unwrap();
    let raw = Series::demand(&panel);
    let z = Normalizer::fit(&raw, split).apply(&raw);
    DynBench {
        groups,
        train: z.slice(0, split),
        test: z.slice(split, 1000),
        planted: truth.planted_stations,
    }
}

pub fn bench_config(gamma: f64) -> fairguard::dynamic_guard::TrainConfig {
    fairguard::dynamic_guard::TrainConfig {
        gamma,
        zeta: 0.2,
        epochs: 10,
        learning_rate: 0.05,
        seed: 5,
        ..Default::default()
    }
}
