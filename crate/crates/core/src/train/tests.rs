use chrono::{Datelike, Days, NaiveDate, Weekday};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{epiweek_aggregate, synth_generate, PanelDataset, SynthConfig};
use crate::diffcore::gradcheck::check_gradients;
use crate::diffcore::Tensor;
use crate::layers::Module;
use crate::model::ModelParams;

const PAPER_WEIGHTS: LossWeights = LossWeights { w1: 1.0, w2: 1.0, w3: 0.5 };

#[test]
fn loss_hand_oracle() {
    let pc = Tensor::from_rows(&[[1.0], [-1.0]]);
    let tc = Tensor::zeros(2, 1);
    let pm = Tensor::from_rows(&[[2.0, 0.0], [0.0, 0.0]]);
    let tm = Tensor::zeros(2, 2);
    let loss = multitask_loss_value(&pc, &tc, &pm, &tm, PAPER_WEIGHTS).unwrap();
    assert!((loss - 2.5).abs() <= 1e-12, "{loss}");
    assert_eq!(multitask_loss_value(&tc, &tc, &tm, &tm, PAPER_WEIGHTS).unwrap(), 0.0);
}

#[test]
fn loss_rejects_mismatched_shapes() {
    let err = multitask_loss_value(&Tensor::zeros(2, 1), &Tensor::zeros(3, 1), &Tensor::zeros(2, 2), &Tensor::zeros(2, 2), PAPER_WEIGHTS);
    assert!(matches!(err, Err(Error::Shape { .. })));
}

#[test]
fn zero_mobility_weight_ignores_mobility() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut random = |r, c| Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let (pc, tc, pm, tm) = (random(4, 1), random(4, 1), random(4, 4), random(4, 4));
    let w = LossWeights { w3: 0.0, ..PAPER_WEIGHTS };
    let base = multitask_loss_value(&pc, &tc, &pm, &tm, w).unwrap();
    let moved = multitask_loss_value(&pc, &tc, &random(4, 4), &tm, w).unwrap();
    assert_eq!(base, moved);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let pc = Tensor::from_rows(&[[0.3], [-1.2], [0.7]]);
    let pm = Tensor::from_rows(&[[0.1, -0.4, 0.2], [0.9, 0.0, -0.5], [0.3, 0.3, 1.1]]);
    let tc = Tensor::from_rows(&[[0.0], [0.5], [-0.2]]);
    let tm = Tensor::from_rows(&[[0.4, 0.1, 0.0], [0.2, 0.2, 0.2], [-0.3, 0.6, 0.8]]);
    let report = check_gradients(&[pc, pm], 1e-6, |tape, vars| {
        let tcv = tape.constant(tc.clone());
        let tmv = tape.constant(tm.clone());
        multitask_loss(tape, vars[0], tcv, vars[1], tmv, PAPER_WEIGHTS)
    })
    .unwrap();
    assert_eq!(report.checked, 12);
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn learning_rate_schedule() {
    let c = TrainConfig::default();
    assert_eq!(lr_at(0, &c), 1e-3);
    assert_eq!(lr_at(9, &c), 1e-3);
    assert_eq!(lr_at(10, &c), 9e-4);
    assert_eq!(lr_at(19, &c), 9e-4);
    assert_eq!(lr_at(25, &c), 8.1e-4);
    assert_eq!(lr_at(149, &c), 2.2876792454961e-4);
    let odd = TrainConfig { base_lr: 3e-3, decay_factor: 0.5, decay_every: 4, ..c };
    assert_eq!(lr_at(9, &odd), 7.5e-4);
}

proptest! {
    #[test]
    fn schedule_tracks_repeated_multiplication(epoch in 0usize..2000, base in 1e-6f64..1.0, factor in 0.05f64..1.0) {
        let c = TrainConfig { base_lr: base, decay_factor: factor, ..TrainConfig::default() };
        let naive = base * factor.powi((epoch / 10) as i32);
        let lr = lr_at(epoch, &c);
        prop_assert!((lr - naive).abs() <= 1e-12 * naive.abs().max(f64::MIN_POSITIVE));
    }
}

#[test]
fn rmsprop_one_step_oracle() {
    let mut p = Tensor::from_rows(&[[0.0]]);
    let mut opt = RmsProp::new([&p], 0.99, 1e-8);
    opt.step(&mut [&mut p], &[Tensor::from_rows(&[[1.0]])], 1e-3).unwrap();
    assert!((opt.mean_sq[0].get(0, 0) - 0.01).abs() <= 1e-15);
    let expected = -1e-3 / (0.1 + 1e-8);
    assert!((p.get(0, 0) - expected).abs() <= 1e-15, "{}", p.get(0, 0));
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut p = Tensor::from_rows(&[[0.5, -2.0], [3.0, 1e-3]]);
    let before = p.clone();
    let mut opt = RmsProp::new([&p], 0.99, 1e-8);
    for _ in 0..3 {
        opt.step(&mut [&mut p], &[Tensor::zeros(2, 2)], 1e-2).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn rmsprop_rejects_mismatched_lists() {
    let mut p = Tensor::zeros(1, 2);
    let mut opt = RmsProp::new([&p], 0.99, 1e-8);
    assert!(matches!(opt.step(&mut [&mut p], &[], 1e-3), Err(Error::Contract(_))));
    assert!(matches!(opt.step(&mut [&mut p], &[Tensor::zeros(2, 1)], 1e-3), Err(Error::Shape { .. })));
}

proptest! {
    #[test]
    fn clipping_bounds_the_global_norm(
        values in prop::collection::vec(-50.0f64..50.0, 1..40),
        split in 0usize..40,
        max_norm in 0.01f64..10.0,
    ) {
        let cut = split.min(values.len());
        let mut grads = vec![Tensor::row(values[..cut].to_vec()), Tensor::row(values[cut..].to_vec())];
        let before: Vec<f64> = values.clone();
        let norm = clip_global_norm(&mut grads, max_norm);
        let after: Vec<f64> = grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let post = after.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(post <= max_norm + 1e-9);
        let oracle = before.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - oracle).abs() <= 1e-9 * oracle.max(1.0));
        if oracle <= max_norm {
            prop_assert_eq!(after, before);
        } else {
            for (a, b) in after.iter().zip(&before) {
                prop_assert!((a - b * max_norm / oracle).abs() <= 1e-12 * b.abs().max(1.0));
            }
        }
    }
}

fn fixture() -> PanelDataset {
    synth_generate(&SynthConfig {
        n_regions: 3,
        n_days: 60,
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        epochs: 12,
        window: 5,
        batch_size: Some(4),
        base_lr: 5e-3,
        ..TrainConfig::default()
    }
}

#[test]
fn case_weights_zero_silence_the_case_stream() {
    let panel = fixture();
    let config = TrainConfig {
        w1: 0.0,
        w2: 0.0,
        ..small_config()
    };
    let prepared = prepare(&panel, &config).unwrap();
    let params = ModelParams::new(config.model_config(3), 5).unwrap();
    let mut tape = crate::diffcore::Tape::new();
    let vars = params.bind(&mut tape).unwrap();
    let w = &prepared.train[7];
    let out = vars.forward(&mut tape, &w.input).unwrap();
    let tc = tape.constant(w.target_cases.clone());
    let tm = tape.constant(w.target_mobility.clone());
    let loss = multitask_loss(&mut tape, out.cases_next, tc, out.mobility_next, tm, config.weights()).unwrap();
    let grads = tape.backward(loss).unwrap();
    let case_stream = ["gcn.", "case_gru.", "case_attention.", "case_decoder.", "generator."];
    let mut mobility_signal = 0.0;
    for ((name, _), g) in params.named_tensors().iter().zip(grads.iter()) {
        if case_stream.iter().any(|p| name.starts_with(p)) {
            assert!(g.data().iter().all(|&v| v == 0.0), "{name} has gradient");
        } else {
            mobility_signal += g.data().iter().map(|v| v.abs()).sum::<f64>();
        }
    }
    assert!(mobility_signal > 0.0);
}

#[test]
fn fit_contract_on_fixture() {
    let panel = fixture();
    let config = small_config();
    let result = fit(&panel, &config).unwrap();
    assert_eq!(result.log.len(), config.epochs);
    for (i, row) in result.log.iter().enumerate() {
        assert_eq!(row.epoch, i + 1);
        assert_eq!(row.lr, lr_at(i, &config));
    }
    let first = result.log[0].train_loss;
    let last = result.log.last().unwrap().train_loss;
    assert!(last < first, "{first} -> {last}");

    let ck = &result.checkpoint;
    let best = ck.best_val_loss.unwrap();
    let best_epoch = ck.best_epoch.unwrap();
    let logged_min = result.log.iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(best, logged_min);
    assert_eq!(result.log[best_epoch - 1].val_loss, best);
    let prepared = prepare(&panel, &config).unwrap();
    assert_eq!(dataset_loss(&ck.params, &prepared.val, config.weights()).unwrap(), best);

    let attention = ck.attention.case.as_ref().unwrap();
    assert_eq!(attention.len(), config.window);
    assert!((attention.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert_eq!(ck.region_ids, panel.region_ids());
}

#[test]
fn fit_is_bit_reproducible() {
    let panel = fixture();
    let config = TrainConfig { epochs: 4, ..small_config() };
    let a = fit(&panel, &config).unwrap();
    let b = fit(&panel, &config).unwrap();
    assert_eq!(a.checkpoint.to_bytes().unwrap(), b.checkpoint.to_bytes().unwrap());
    assert_eq!(a.log, b.log);
    let other = fit(&panel, &TrainConfig { seed: 1, ..config }).unwrap();
    assert_ne!(other.log, a.log);
}

#[test]
fn full_batch_and_ablations_train() {
    let panel = fixture();
    for config in [
        TrainConfig { batch_size: None, ..small_config() },
        TrainConfig { attention_enabled: false, ..small_config() },
        TrainConfig { edge_mode: crate::model::EdgeMode::Mobility, ..small_config() },
    ] {
        let result = fit(&panel, &config).unwrap();
        assert_eq!(result.log.len(), config.epochs);
        assert!(result.log.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
    }
}

#[test]
fn exploding_learning_rate_reports_divergence() {
    let panel = fixture();
    let config = TrainConfig {
        base_lr: 1e300,
        clip_norm: 1e300,
        ..small_config()
    };
    match fit(&panel, &config) {
        Err(Error::Diverged { epoch, .. }) => assert!(epoch >= 1),
        Err(Error::NonFiniteGradient { param }) => assert!(!param.is_empty()),
        other => panic!("expected divergence, got {:?}", other.map(|r| r.log)),
    }
}

#[test]
fn prepare_splits_chronologically_without_leakage() {
    let panel = fixture();
    let config = small_config();
    let prepared = prepare(&panel, &config).unwrap();
    // 55 windows, round(5.5) = 6 held out
    assert_eq!(prepared.val.len(), 6);
    assert_eq!(prepared.train.len(), 49);
    assert_eq!(prepared.stats_days, 54);
    assert!(prepared.train.last().unwrap().target_day < prepared.val[0].target_day);

    // perturbing only validation-target days leaves the statistics alone
    let mut daily = panel.daily_cases().to_vec();
    for row in &mut daily[54..] {
        for v in row.iter_mut() {
            *v *= 10.0;
        }
    }
    let changed = PanelDataset::from_daily(
        panel.region_ids().to_vec(),
        panel.start_date(),
        daily,
        panel.mobility().to_vec(),
        panel.population().to_vec(),
    )
    .unwrap();
    assert_eq!(prepare(&changed, &config).unwrap().stats, prepared.stats);

    let short = panel.slice_days(0..6).unwrap();
    assert!(matches!(prepare(&short, &config), Err(Error::Domain(_))));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    let bad = [
        TrainConfig { epochs: 0, ..TrainConfig::default() },
        TrainConfig { w3: -1.0, ..TrainConfig::default() },
        TrainConfig { base_lr: 0.0, ..TrainConfig::default() },
        TrainConfig { val_fraction: 1.0, ..TrainConfig::default() },
        TrainConfig { batch_size: Some(0), ..TrainConfig::default() },
        TrainConfig { rho: 1.0, ..TrainConfig::default() },
    ];
    for c in bad {
        assert!(matches!(c.validate(), Err(Error::Validation(_))), "{c:?}");
    }
    let parsed: std::result::Result<TrainConfig, _> = serde_json::from_str(r#"{"epochz": 3}"#);
    assert!(parsed.is_err());
}

fn constant_panel(n_days: usize, value: f64) -> PanelDataset {
    // 2021-01-03 is a Sunday
    let start = NaiveDate::from_ymd_opt(2021, 1, 3).unwrap();
    PanelDataset::from_daily(
        vec!["A".into(), "B".into()],
        start,
        vec![vec![value, 2.0 * value]; n_days],
        vec![Tensor::from_rows(&[[5.0, 1.0], [1.0, 5.0]]); n_days],
        vec![1000.0, 2000.0],
    )
    .unwrap()
}

#[test]
fn evaluator_trivial_forecasters() {
    let panel = constant_panel(70, 10.0);
    let truth = |o: usize, h: usize| Ok(panel.daily_cases()[o + 1..o + 1 + h].to_vec());
    let perfect = evaluate_forecaster(&panel, 28..70, &[14, 21], 5, truth).unwrap();
    assert!(!perfect.rows.is_empty());
    assert!(perfect.rows.iter().all(|r| r.model_mae == 0.0 && r.persistence_mae == 0.0));

    let c = 3.5;
    let offset = evaluate_forecaster(&panel, 28..70, &[14], 5, |_, h| Ok(vec![vec![10.0 + c, 20.0 + c]; h])).unwrap();
    for r in &offset.rows {
        // a daily offset of c accumulates to 7c over the week
        assert!((r.model_mae - 7.0 * c).abs() < 1e-9);
    }
}

#[test]
fn evaluator_weeks_origins_and_persistence_oracle() {
    let panel = synth_generate(&SynthConfig {
        n_regions: 3,
        n_days: 120,
        ..SynthConfig::default()
    })
    .unwrap();
    let dates = panel.dates();
    let mut origins = Vec::new();
    let report = evaluate_forecaster(&panel, 0..120, &[14, 21], 15, |o, h| {
        origins.push((o, h));
        Ok(vec![vec![0.0; 3]; h])
    })
    .unwrap();

    // independent oracle: complete Sunday-to-Saturday weeks via the epi-week aggregator
    let weeks: Vec<_> = epiweek_aggregate(panel.daily_cases(), dates)
        .unwrap()
        .into_iter()
        .filter(|w| !w.partial)
        .collect();
    let mut expected = Vec::new();
    for w in &weeks {
        let end = panel.day_index(w.start).unwrap() + 6;
        for h in [14usize, 21] {
            if end + 1 >= h + 15 {
                let origin = end - h;
                let prev: Vec<f64> = (0..3)
                    .map(|r| (origin - 6..=origin).map(|d| panel.daily_cases()[d][r]).sum())
                    .collect();
                let pers = prev.iter().zip(&w.totals).map(|(p, t)| (p - t).abs()).sum::<f64>() / 3.0;
                let model = w.totals.iter().map(|t| t.abs()).sum::<f64>() / 3.0;
                expected.push((w.start, h, origin, model, pers));
            }
        }
    }
    assert_eq!(report.rows.len(), expected.len());
    assert_eq!(report.rows.len() + report.skipped.len(), weeks.len() * 2);
    for (row, (start, h, origin, model, pers)) in report.rows.iter().zip(&expected) {
        assert_eq!(row.epiweek_start, *start);
        assert_eq!(row.epiweek_start.weekday(), Weekday::Sun);
        assert_eq!(row.horizon_days, *h);
        assert!((row.model_mae - model).abs() <= 1e-9 * model.max(1.0));
        assert!((row.persistence_mae - pers).abs() <= 1e-9 * pers.max(1.0));
        assert!(origins.contains(&(*origin, *h)));
        assert_eq!(dates[*origin] + Days::new(*h as u64), *start + Days::new(6));
    }
    assert!(report.skipped.iter().all(|s| s.contains("not enough history")));
}

#[test]
fn evaluator_rejects_bad_ranges() {
    let panel = constant_panel(30, 1.0);
    let f = |_: usize, h: usize| Ok(vec![vec![0.0; 2]; h]);
    assert!(matches!(evaluate_forecaster(&panel, 0..31, &[14], 5, f), Err(Error::Contract(_))));
    assert!(matches!(evaluate_forecaster(&panel, 0..30, &[3], 5, f), Err(Error::Contract(_))));
}

#[test]
fn model_evaluation_and_holdout_run() {
    let panel = fixture();
    let config = small_config();
    let params = ModelParams::new(config.model_config(3), 9).unwrap();
    let prepared = prepare(&panel, &config).unwrap();
    let report = evaluate_mae(&params, &prepared.stats, &panel, 0..60, &[14, 21]).unwrap();
    assert!(!report.rows.is_empty());
    assert!(report.rows.iter().all(|r| r.model_mae.is_finite() && r.model_mae >= 0.0));
    let (model, persistence) = report.mean_for(14).unwrap();
    assert!(model.is_finite() && persistence.is_finite());

    let holdout = evaluate_holdout(&params, &prepared.stats, &panel, 10).unwrap();
    assert_eq!(holdout.predicted.len(), 10);
    assert_eq!(holdout.origin, panel.dates()[49]);
    let last = &panel.daily_cases()[49];
    let oracle = (50..60)
        .map(|d| (0..3).map(|r| (last[r] - panel.daily_cases()[d][r]).abs()).sum::<f64>() / 3.0)
        .sum::<f64>()
        / 10.0;
    assert!((holdout.persistence_mae - oracle).abs() <= 1e-9 * oracle.max(1.0));
    assert!(matches!(evaluate_holdout(&params, &prepared.stats, &panel, 56), Err(Error::Contract(_))));
}

#[test]
fn csv_outputs_have_documented_headers() {
    let dir = tempfile::tempdir().unwrap();
    let log = vec![EpochLog { epoch: 1, lr: 1e-3, train_loss: 0.5, val_loss: 0.25 }];
    let path = dir.path().join("train_log.csv");
    write_train_log(&path, &log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), "epoch,lr,train_loss,val_loss");
    assert_eq!(text.lines().nth(1).unwrap(), "1,0.001,0.5,0.25");

    let report = EvalReport {
        rows: vec![EvalRow {
            epiweek_start: NaiveDate::from_ymd_opt(2021, 1, 3).unwrap(),
            horizon_days: 14,
            model_mae: 1.5,
            persistence_mae: 2.0,
        }],
        skipped: vec![],
    };
    let path = dir.path().join("eval.csv");
    report.write_csv(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text, "epiweek_start,horizon_days,model_mae,persistence_mae\n2021-01-03,14,1.5,2.0\n");
}
