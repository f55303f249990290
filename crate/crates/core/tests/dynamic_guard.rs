mod common;

use fairguard::dynamic_guard::{
    batch_loss, evaluate_models, kmeans, predict, teacher_correct, train, ArPredictor, GroupAssignment, Mode,
    ModelFile, Normalizer, Predictor, Sample, Series, TeacherStatus, TrainConfig,
};
use fairguard::metrics::spearman;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn same_partition(a: &[usize], b: &[usize]) -> bool {
    (0..a.len()).all(|i| (0..a.len()).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

#[test]
fn kmeans_recovers_planted_clusters() {
    let centres = [[0.0, 0.0], [6.0, 0.0], [3.0, 6.0]];
    let mut hits = 0;
    for seed in 0..40 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let mut pts = Vec::new();
        let mut truth = Vec::new();
        for (c, centre) in centres.iter().enumerate() {
            for _ in 0..15 {
                pts.push(vec![centre[0] + gauss(&mut rng), centre[1] + gauss(&mut rng)]);
                truth.push(c);
            }
        }
        let fit = kmeans(&pts, 3, seed).unwrap();
        assert_eq!(fit, kmeans(&pts, 3, seed).unwrap());
        if same_partition(&fit.labels, &truth) {
            hits += 1;
        }
    }
    assert!(hits >= 38, "{hits}/40");
}

fn groups_of(stations: usize, protected: &[usize]) -> GroupAssignment {
    let labels = (0..stations).map(|s| usize::from(protected.contains(&s))).collect();
    GroupAssignment::from_labels(labels, vec![1]).unwrap()
}

fn loss_over(pred: &[f64], reference: &[f64], stations: usize, members: &[usize]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for i in 0..pred.len() {
        if members.contains(&(i % stations)) {
            sum += (pred[i] - reference[i]).powi(2);
            n += 1;
        }
    }
    sum / n as f64
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn teacher_leaves_satisfied_blocks_alone() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reference: Vec<f64> = (0..30).map(|_| gauss(&mut rng)).collect();
    let pred: Vec<f64> = reference.iter().map(|r| r + 0.1 * gauss(&mut rng)).collect();
    let groups = groups_of(10, &[7, 8, 9]);
    let cfg = TrainConfig {
        zeta: 0.5,
        ..TrainConfig::default()
    };
    let out = teacher_correct(&pred, &reference, 10, &groups, &cfg).unwrap();
    assert_eq!(out.status, TeacherStatus::Satisfied);
    assert_eq!(out.corrected, pred);
    // a vacuous bound never fires
    let far: Vec<f64> = pred.iter().map(|p| p + 100.0).collect();
    let loose = TrainConfig {
        zeta: 1e300,
        ..TrainConfig::default()
    };
    assert_eq!(teacher_correct(&far, &reference, 10, &groups, &loose).unwrap().corrected, far);
}

#[test]
fn teacher_fixes_one_violated_group() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (stations, steps) = (12, 4);
    let reference: Vec<f64> = (0..stations * steps).map(|_| gauss(&mut rng)).collect();
    let protected = [0, 5, 11];
    let pred: Vec<f64> = reference
        .iter()
        .enumerate()
        .map(|(i, r)| r + if protected.contains(&(i % stations)) { 1.5 } else { 0.1 } * gauss(&mut rng))
        .collect();
    let groups = groups_of(stations, &protected);
    for per_timestep in [false, true] {
        let cfg = TrainConfig {
            zeta: 0.3,
            per_timestep,
            ..TrainConfig::default()
        };
        assert!(loss_over(&pred, &reference, stations, &protected) > 0.3);
        let out = teacher_correct(&pred, &reference, stations, &groups, &cfg).unwrap();
        assert!(out.changed(), "{:?}", out.status);
        assert!((mean(&out.corrected) - mean(&pred)).abs() <= 1e-8);
        if per_timestep {
            for h in 0..steps {
                let r = h * stations..(h + 1) * stations;
                assert!(loss_over(&out.corrected[r.clone()], &reference[r], stations, &protected) <= 0.3 + 1e-8);
            }
        } else {
            let l = loss_over(&out.corrected, &reference, stations, &protected);
            assert!((l - 0.3 * 0.95).abs() < 1e-8, "{l}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn teacher_is_sound_and_keeps_the_mean(seed in 0u64..10_000, zeta in 0.05f64..2.0, split in 1usize..9) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stations = 10;
        let reference: Vec<f64> = (0..stations * 3).map(|_| gauss(&mut rng)).collect();
        let pred: Vec<f64> = reference.iter().map(|r| r + 2.0 * gauss(&mut rng)).collect();
        let labels = (0..stations).map(|s| usize::from(s >= split) + usize::from(s >= 9)).collect();
        let groups = GroupAssignment::from_labels(labels, vec![0, 2]).unwrap();
        let cfg = TrainConfig { zeta, ..TrainConfig::default() };
        let out = teacher_correct(&pred, &reference, stations, &groups, &cfg).unwrap();
        prop_assert!((mean(&out.corrected) - mean(&pred)).abs() <= 1e-8);
        if !matches!(out.status, TeacherStatus::Failed { .. }) {
            for (_, members) in groups.protected_groups() {
                prop_assert!(loss_over(&out.corrected, &reference, stations, &members) <= zeta + 1e-8);
            }
        }
    }
}

#[test]
fn analytic_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let lag = rng.random_range(1..6);
        let horizon = rng.random_range(1..4);
        let stations = rng.random_range(1..6);
        let gamma = rng.random_range(0.0..2.0);
        let params: Vec<f64> = (0..horizon * (lag + 1)).map(|_| gauss(&mut rng)).collect();
        let model = ArPredictor::from_params(lag, horizon, params.clone()).unwrap();
        let batch: Vec<Sample> = (0..rng.random_range(1..5))
            .map(|_| Sample {
                history: (0..lag * stations).map(|_| gauss(&mut rng)).collect(),
                truth: (0..horizon * stations).map(|_| gauss(&mut rng)).collect(),
                teacher: rng
                    .random_bool(0.7)
                    .then(|| (0..horizon * stations).map(|_| gauss(&mut rng)).collect()),
            })
            .collect();
        let mut grad = vec![0.0; params.len()];
        batch_loss(&model, &batch, stations, gamma, Some(&mut grad));
        let h = 1e-5;
        for k in 0..params.len() {
            let at = |d: f64| {
                let mut p = params.clone();
                p[k] += d;
                let m = ArPredictor::from_params(lag, horizon, p).unwrap();
                batch_loss(&m, &batch, stations, gamma, None).total(gamma)
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let rel = (grad[k] - fd).abs() / fd.abs().max(grad[k].abs()).max(1e-6);
            assert!(rel <= 1e-4, "param {k}: analytic {} vs fd {fd}", grad[k]);
        }
    }
}

/// Plain minibatch SGD written out directly, for comparison with `gamma = 0`.
fn supervised_reference(series: &Series, cfg: &TrainConfig) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let (n, m, s_n) = (cfg.lag, cfg.horizon, series.n_stations);
    let mut w = ArPredictor::new(n, m, cfg.seed).params().to_vec();
    let mut origins: Vec<usize> = (n..=series.n_steps - m).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        origins.shuffle(&mut rng);
        for chunk in origins.chunks(cfg.batch_size) {
            let mut g = vec![0.0; w.len()];
            let cells = (chunk.len() * m * s_n) as f64;
            for &t in chunk {
                for s in 0..s_n {
                    for h in 0..m {
                        let mut pred = w[m * n + h];
                        for j in 0..n {
                            pred += w[h * n + j] * series.at(s, t - n + j);
                        }
                        let e = 2.0 * (pred - series.at(s, t + h)) / cells;
                        for j in 0..n {
                            g[h * n + j] += e * series.at(s, t - n + j);
                        }
                        g[m * n + h] += e;
                    }
                }
            }
            for (p, d) in w.iter_mut().zip(&g) {
                *p -= cfg.learning_rate * d;
            }
        }
    }
    w
}

fn small_series(seed: u64, stations: usize, steps: usize) -> Series {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = Vec::new();
    for s in 0..stations {
        let mut x = 0.0;
        for t in 0..steps {
            x = 0.7 * x + gauss(&mut rng);
            v.push(x + (t as f64 * 0.3 + s as f64).sin());
        }
    }
    Series::new(stations, steps, v).unwrap()
}

#[test]
fn gamma_zero_is_plain_supervised_training() {
    let series = small_series(1, 5, 120);
    let cfg = TrainConfig {
        gamma: 0.0,
        lag: 6,
        horizon: 2,
        epochs: 3,
        batch_size: 7,
        seed: 11,
        ..TrainConfig::default()
    };
    let groups = groups_of(5, &[0, 1]);
    let (model, log) = train(ArPredictor::new(6, 2, 11), &series, &groups, &cfg).unwrap();
    let want = supervised_reference(&series, &cfg);
    for (a, b) in model.params().iter().zip(&want) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
    assert!(log.epochs.iter().all(|e| e.distill_loss == 0.0 && e.corrected == 0));
    assert!(log.to_csv().starts_with("epoch,loss,distill_loss,mse_pa\n0,"));
}

#[test]
fn training_is_deterministic() {
    let series = small_series(2, 6, 150);
    let cfg = TrainConfig {
        zeta: 0.3,
        lag: 5,
        horizon: 3,
        epochs: 2,
        ..TrainConfig::default()
    };
    let groups = groups_of(6, &[4, 5]);
    let run = || train(ArPredictor::new(5, 3, 1), &series, &groups, &cfg).unwrap();
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(a, b);
    assert_eq!(la, lb);
    assert!(la.epochs.iter().any(|e| e.corrected > 0));
}

#[test]
fn invalid_inputs_are_rejected() {
    let series = small_series(3, 4, 10);
    assert!(GroupAssignment::from_labels(vec![0, 0, 0, 0], vec![]).is_err());
    let groups = groups_of(4, &[0]);
    let cfg = TrainConfig::default();
    assert!(matches!(
        train(ArPredictor::new(24, 6, 0), &series, &groups, &cfg),
        Err(fairguard::dynamic_guard::DynamicError::InsufficientHistory { .. })
    ));
    for bad in [
        TrainConfig { gamma: -1.0, ..cfg.clone() },
        TrainConfig { zeta: 0.0, ..cfg.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
    let p = ArPredictor::new(24, 6, 0);
    assert!(predict(&p, &series, Mode::Raw, &groups, &cfg).is_err());
}

#[test]
fn prediction_modes() {
    let series = small_series(4, 8, 60);
    let groups = groups_of(8, &[6, 7]);
    let model = ArPredictor::new(10, 4, 2);
    let loose = TrainConfig {
        zeta: 1e6,
        lag: 10,
        horizon: 4,
        ..TrainConfig::default()
    };
    let raw = predict(&model, &series, Mode::Raw, &groups, &loose).unwrap();
    assert_eq!(raw.values.len(), 4 * 8);
    assert!(raw.teacher.is_none());
    let guarded = predict(&model, &series, Mode::Guarded, &groups, &loose).unwrap();
    assert_eq!(guarded.values, raw.values);
    let tight = TrainConfig { zeta: 0.05, ..loose };
    let guarded = predict(&model, &series, Mode::Guarded, &groups, &tight).unwrap();
    assert!(matches!(guarded.teacher, Some(TeacherStatus::Corrected { .. })));
    let reference = series.block(60 - 4, 4);
    assert!(loss_over(&guarded.values, &reference, 8, &[6, 7]) <= 0.05);
}

/// Repeats the last observed value plus a fixed per-station offset.
struct Offset(Vec<f64>, usize);

impl Predictor for Offset {
    fn lag(&self) -> usize {
        1
    }
    fn horizon(&self) -> usize {
        self.1
    }
    fn params(&self) -> &[f64] {
        &self.0
    }
    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
    fn forward(&self, history: &[f64], stations: usize) -> Vec<f64> {
        (0..self.1 * stations).map(|i| history[i % stations] + self.0[i % stations]).collect()
    }
    fn backward(&self, _: &[f64], _: usize, _: &[f64], _: &mut [f64]) {}
}

#[test]
fn evaluation_table_oracles() {
    let stations = 7;
    let flat = Series::new(stations, 40, (0..stations * 40).map(|i| (i / 40) as f64).collect()).unwrap();
    let groups = groups_of(stations, &[1, 3, 4]);
    let cfg = TrainConfig::default();
    let perfect = Offset(vec![0.0; stations], 3);
    let rows = evaluate_models(&[("perfect", &perfect)], &flat, &groups, &cfg, &[Mode::Raw]).unwrap();
    assert_eq!((rows[0].mse, rows[0].mse_pa, rows[0].bgl_pct), (0.0, 0.0, 100.0));

    let offsets = vec![0.1, 0.5, 2.0, 0.2, 1.0, 0.3, 0.0];
    let biased = Offset(offsets.clone(), 3);
    let rows = evaluate_models(&[("biased", &biased)], &flat, &groups, &cfg, &[Mode::Raw]).unwrap();
    let overall = offsets.iter().map(|o| o * o).sum::<f64>() / stations as f64;
    let below = [1, 3, 4].iter().filter(|&&s| offsets[s] * offsets[s] < overall).count();
    assert!((rows[0].mse - overall).abs() < 1e-12);
    assert!((rows[0].mse_pa - (0.25 + 0.04 + 1.0) / 3.0).abs() < 1e-12);
    assert_eq!(rows[0].bgl_pct, below as f64 / 3.0 * 100.0);
}

#[test]
fn model_file_round_trip() {
    let model = ArPredictor::new(4, 2, 9);
    let series = small_series(5, 3, 20);
    let file = ModelFile::new(&model, Normalizer::fit(&series, 20), groups_of(3, &[2]));
    let text = file.to_json();
    let back = ModelFile::from_json(&text).unwrap();
    assert_eq!(back, file);
    assert_eq!(back.model(), model);
    let broken = text.replace("\"version\": 1", "\"version\": 7");
    assert!(ModelFile::from_json(&broken).is_err());
}

#[test]
fn distillation_serves_the_protected_cluster() {
    let bench = common::dyn_bench(3);
    assert_eq!(bench.groups.protected_stations(), bench.planted);
    let mut pa = Vec::new();
    let mut mse = Vec::new();
    for gamma in [0.0, 0.5, 1.0, 2.0] {
        let cfg = common::bench_config(gamma);
        let (model, _) = train(ArPredictor::new(cfg.lag, cfg.horizon, cfg.seed), &bench.train, &bench.groups, &cfg).unwrap();
        let rows = evaluate_models(&[("ar", &model)], &bench.test, &bench.groups, &cfg, &[Mode::Raw, Mode::Guarded]).unwrap();
        pa.push(rows[0].mse_pa);
        mse.push(rows[0].mse);
        assert_eq!(rows[1].guard_satisfied_pct, 100.0);
    }
    assert!(pa[2] < pa[0], "{pa:?}");
    assert!(mse[2] <= 1.1 * mse[0], "{mse:?}");
    let rho = spearman(&[0.0, 0.5, 1.0, 2.0], &pa).unwrap();
    assert!(rho <= 0.0, "{rho}");
}
