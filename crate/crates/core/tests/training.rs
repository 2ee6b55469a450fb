use std::collections::{BTreeMap, BTreeSet};

use moct_autodiff::{gradcheck, GradcheckOptions, Tape, Var};
use moct_core::config::{ModelConfig, Variant};
use moct_core::model::Model;
use moct_core::synthdata::{generate_suite, MultiOrganSample, Scale, SliceSample};
use moct_core::training::{
    combined_loss, cross_entropy_loss, dataset_weights, kfold_split, one_hot, soft_dice_loss, split_multiclass,
    train_run, write_history_csv, FoldSplit, RunSpec, TaskMapping, TrainConfig, Trainer, DICE_EPS,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn eval_scalar(tape: &Tape<f64>, v: Var) -> f64 {
    tape.value(v)[0]
}

fn logits_var(tape: &mut Tape<f64>, shape: &[usize], data: Vec<f64>) -> Var {
    tape.constant(shape, data).unwrap()
}

#[test]
fn cross_entropy_uniform_two_class_is_ln2() {
    let mut tape = Tape::new();
    let logits = logits_var(&mut tape, &[1, 2, 2, 2], vec![0.0; 8]);
    let ce = cross_entropy_loss(&mut tape, logits, &[0, 1, 1, 0]).unwrap();
    assert!((eval_scalar(&tape, ce) - std::f64::consts::LN_2).abs() < 1e-12);
}

#[test]
fn cross_entropy_confident_correct_is_zero() {
    let labels = [1usize, 0, 0, 1];
    let mut data = vec![0.0; 8];
    for (i, &l) in labels.iter().enumerate() {
        data[l * 4 + i] = 1000.0;
    }
    let mut tape = Tape::new();
    let logits = logits_var(&mut tape, &[1, 2, 2, 2], data);
    let ce = cross_entropy_loss(&mut tape, logits, &labels).unwrap();
    assert!(eval_scalar(&tape, ce).abs() < 1e-12);
}

#[test]
fn cross_entropy_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, c, h, w) = (3, 4, 5, 6);
    let px = h * w;
    let data: Vec<f64> = (0..n * c * px).map(|_| rng.random_range(-6.0..6.0)).collect();
    let labels: Vec<usize> = (0..n * px).map(|_| rng.random_range(0..c)).collect();
    let mut tape = Tape::new();
    let logits = logits_var(&mut tape, &[n, c, h, w], data.clone());
    let ce = cross_entropy_loss(&mut tape, logits, &labels).unwrap();
    let mut total = 0.0;
    for b in 0..n {
        for i in 0..px {
            let z: f64 = (0..c).map(|k| data[(b * c + k) * px + i].exp()).sum();
            let own = data[(b * c + labels[b * px + i]) * px + i].exp();
            total += -(own / z).ln();
        }
    }
    let want = total / (n * px) as f64;
    assert!((eval_scalar(&tape, ce) - want).abs() < 1e-5);
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut tape = Tape::new();
    let logits = logits_var(&mut tape, &[1, 2, 1, 2], vec![0.0; 4]);
    let err = cross_entropy_loss(&mut tape, logits, &[0, 2]).unwrap_err().to_string();
    assert!(err.contains("label"), "{err}");
}

#[test]
fn soft_dice_perfect_prediction_is_near_zero() {
    let labels = [0usize, 1, 1, 0, 1, 0];
    let target = one_hot::<f64>(&labels, 1, 2).unwrap();
    let mut tape = Tape::new();
    let probs = tape.constant(&[1, 2, 2, 3], target.clone()).unwrap();
    let loss = soft_dice_loss(&mut tape, probs, &target, 1e-6).unwrap();
    assert!(eval_scalar(&tape, loss).abs() < 1e-6);
}

#[test]
fn soft_dice_half_probability_closed_form() {
    // Foreground class: 1 - 2*1 / (4*0.25 + 2) = 1/3.
    let labels = [1usize, 1, 0, 0];
    let target = one_hot::<f64>(&labels, 1, 2).unwrap();
    let fg: Vec<f64> = target[4..].to_vec();
    let mut tape = Tape::new();
    let probs = tape.constant(&[1, 1, 2, 2], vec![0.5; 4]).unwrap();
    let loss = soft_dice_loss(&mut tape, probs, &fg, 1e-12).unwrap();
    assert!((eval_scalar(&tape, loss) - 1.0 / 3.0).abs() < 1e-9);
}

#[test]
fn soft_dice_stays_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..1000 {
        let (n, c, px) = (rng.random_range(1..3), rng.random_range(2..4), rng.random_range(1..10));
        let logits: Vec<f64> = (0..n * c * px).map(|_| rng.random_range(-4.0..4.0)).collect();
        let labels: Vec<usize> = (0..n * px).map(|_| rng.random_range(0..c)).collect();
        let target = one_hot::<f64>(&labels, n, c).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(&[n, c, 1, px], logits).unwrap();
        let p = tape.softmax(l, 1).unwrap();
        let loss = soft_dice_loss(&mut tape, p, &target, DICE_EPS).unwrap();
        let v = eval_scalar(&tape, loss);
        assert!((0.0..=1.0 + 1e-9).contains(&v), "{v}");
    }
}

#[test]
fn soft_dice_rejects_shape_mismatch() {
    let mut tape = Tape::new();
    let p = tape.constant(&[1, 2, 2, 2], vec![0.5; 8]).unwrap();
    assert!(soft_dice_loss(&mut tape, p, &[1.0; 6], 1.0).is_err());
}

#[test]
fn combined_loss_four_pixel_case() {
    let labels = [1usize, 1, 0, 0];
    let mut tape = Tape::new();
    let logits = logits_var(&mut tape, &[1, 2, 2, 2], vec![0.0; 8]);
    let loss = combined_loss(&mut tape, logits, &labels, &[1.0], 1e-12).unwrap();
    // Both classes see the same 1/3 Dice loss at p = 0.5.
    let want = (1.0 / 3.0 + std::f64::consts::LN_2) / 2.0;
    assert!((eval_scalar(&tape, loss) - want).abs() < 1e-9);
}

fn weighted_loss(weight: f64) -> (f64, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data: Vec<f64> = (0..2 * 3 * 16).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels: Vec<usize> = (0..2 * 16).map(|_| rng.random_range(0..3)).collect();
    let mut tape = Tape::new();
    let mut arr = moct_autodiff::DiffArray::new(&[2, 3, 4, 4], data).unwrap().with_grad();
    let logits = tape.enroll(&mut arr);
    let loss = combined_loss(&mut tape, logits, &labels, &[weight, weight], DICE_EPS).unwrap();
    let grads = tape.backward(loss).unwrap();
    (eval_scalar(&tape, loss), grads.get(logits).unwrap().to_vec())
}

#[test]
fn combined_loss_is_linear_in_weight() {
    let (zero, g0) = weighted_loss(0.0);
    assert_eq!(zero, 0.0);
    assert!(g0.iter().all(|&g| g == 0.0));
    let (one, _) = weighted_loss(1.0);
    let (two, _) = weighted_loss(2.0);
    assert!(one > 0.0);
    assert!((two - 2.0 * one).abs() <= 1e-12 * one);
}

#[test]
fn combined_loss_gradcheck() {
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..2 * 3 * 9).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<usize> = (0..2 * 9).map(|_| rng.random_range(0..3)).collect();
        let weights = [rng.random_range(0.2..2.0), rng.random_range(0.2..2.0)];
        let input = moct_autodiff::DiffArray::new(&[2, 3, 3, 3], data).unwrap();
        let f = |tape: &mut Tape<f64>, v: &[Var]| {
            combined_loss(tape, v[0], &labels, &weights, DICE_EPS)
                .map_err(|e| moct_autodiff::AutodiffError::InvalidArgument { op: "combined_loss", detail: e.to_string() })
        };
        let err = gradcheck(&[input], f, &GradcheckOptions::default()).unwrap();
        assert!(err < 1e-3, "seed {seed}: {err}");
    }
}

#[test]
fn dataset_weights_for_full_scale_sizes() {
    let sizes: BTreeMap<String, usize> =
        [("S1", 18), ("S2", 17), ("S3", 20), ("S4", 100)].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
    let w = dataset_weights(&sizes).unwrap();
    // Independent arithmetic: mean of inverses, then ratio.
    let inv = [1.0 / 18.0, 1.0 / 17.0, 1.0 / 20.0, 1.0 / 100.0];
    let mean: f64 = inv.iter().sum::<f64>() / 4.0;
    for (name, i) in ["S1", "S2", "S3", "S4"].iter().zip(inv) {
        assert!((w[*name] - i / mean).abs() < 1e-12);
    }
    for (name, want) in [("S1", 1.274), ("S2", 1.349), ("S3", 1.147), ("S4", 0.229)] {
        assert!((w[name] - want).abs() < 1e-3, "{name}: {}", w[name]);
    }
}

#[test]
fn dataset_weights_equal_sizes_are_one() {
    let sizes: BTreeMap<String, usize> = ["a", "b", "c"].iter().map(|k| (k.to_string(), 7)).collect();
    assert!(dataset_weights(&sizes).unwrap().values().all(|&w| (w - 1.0).abs() < 1e-15));
}

#[test]
fn dataset_weights_reject_empty_input() {
    assert!(dataset_weights(&BTreeMap::new()).is_err());
    let zero: BTreeMap<String, usize> = [("a".to_string(), 0)].into_iter().collect();
    assert!(dataset_weights(&zero).is_err());
}

proptest! {
    #[test]
    fn dataset_weights_mean_one_and_monotone(sizes in prop::collection::vec(1usize..500, 1..8)) {
        let map: BTreeMap<String, usize> = sizes.iter().enumerate().map(|(i, &s)| (format!("d{i}"), s)).collect();
        let w = dataset_weights(&map).unwrap();
        let mean = w.values().sum::<f64>() / w.len() as f64;
        prop_assert!((mean - 1.0).abs() < 1e-9);
        for (a, sa) in &map {
            for (b, sb) in &map {
                if sa > sb {
                    prop_assert!(w[a] < w[b]);
                }
            }
        }
    }

    #[test]
    fn kfold_partitions_subjects(counts in prop::collection::vec(5usize..20, 1..4), seed in any::<u64>()) {
        let subjects: BTreeMap<String, Vec<String>> = counts
            .iter()
            .enumerate()
            .map(|(d, &n)| (format!("D{d}"), (0..n).map(|i| format!("D{d}-{i:03}")).collect()))
            .collect();
        let plan = kfold_split(&subjects, 5, seed).unwrap();
        let mut tested: BTreeMap<String, usize> = BTreeMap::new();
        for f in 0..5 {
            let s = plan.split(f).unwrap();
            let all: Vec<&String> = [&s.train, &s.validation, &s.test].iter().flat_map(|m| m.values().flatten()).collect();
            let unique: BTreeSet<&String> = all.iter().copied().collect();
            prop_assert_eq!(all.len(), unique.len());
            prop_assert_eq!(all.len(), counts.iter().sum::<usize>());
            for id in s.test.values().flatten() {
                *tested.entry(id.clone()).or_default() += 1;
            }
        }
        prop_assert_eq!(tested.len(), counts.iter().sum::<usize>());
        prop_assert!(tested.values().all(|&c| c == 1));
    }

    #[test]
    fn split_multiclass_partitions_labels(labels in prop::collection::vec(0u8..4, 16), present in prop::collection::btree_set(1u8..4, 1..4)) {
        let label_tasks: Vec<(u8, usize)> = present.iter().map(|&l| (l, 10 + l as usize)).collect();
        let labels: Vec<u8> = labels.into_iter().map(|v| if present.contains(&v) { v } else { 0 }).collect();
        let sample = multi(labels.clone(), label_tasks.clone());
        let out = split_multiclass(&sample);
        let in_slice: BTreeSet<usize> =
            label_tasks.iter().filter(|(l, _)| labels.contains(l)).map(|&(_, t)| t).collect();
        let got: BTreeSet<usize> = out.iter().map(|s| s.task_id).collect();
        prop_assert_eq!(got, in_slice);
        prop_assert_eq!(out.len(), out.iter().map(|s| s.task_id).collect::<BTreeSet<_>>().len());
        for i in 0..labels.len() {
            let covered = out.iter().filter(|s| s.target[i] == 1).count();
            prop_assert_eq!(covered, usize::from(labels[i] != 0));
        }
        for s in &out {
            prop_assert_eq!(&s.slab, &sample.slab);
            prop_assert!(s.target.iter().all(|&v| v <= 1));
        }
    }
}

fn multi(labels: Vec<u8>, label_tasks: Vec<(u8, usize)>) -> MultiOrganSample {
    let hw = (labels.len() as f64).sqrt() as usize;
    MultiOrganSample {
        slab: (0..3 * labels.len()).map(|i| i as f32).collect(),
        labels,
        label_tasks,
        subject: "X-000".into(),
        slice: 4,
        dataset: "X".into(),
        hw,
    }
}

#[test]
fn split_multiclass_two_organ_slice() {
    // Liver (label 1, task 1) and spleen (label 2, task 2) in one slice.
    let out = split_multiclass(&multi(vec![0, 1, 1, 2], vec![(1, 1), (2, 2)]));
    let tasks: Vec<usize> = out.iter().map(|s| s.task_id).collect();
    assert_eq!(tasks, [1, 2]);
    assert_eq!(out[0].target, [0, 1, 1, 0]);
    assert_eq!(out[1].target, [0, 0, 0, 1]);
}

#[test]
fn split_multiclass_single_organ_unchanged() {
    let out = split_multiclass(&multi(vec![0, 1, 1, 0], vec![(1, 3)]));
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].target, [0, 1, 1, 0]);
    assert_eq!(out[0].task_id, 3);
}

#[test]
fn kfold_ten_subjects() {
    let subjects: BTreeMap<String, Vec<String>> =
        [("D".to_string(), (0..10).map(|i| format!("s{i}")).collect())].into_iter().collect();
    let plan = kfold_split(&subjects, 5, 1).unwrap();
    assert_eq!(plan, kfold_split(&subjects, 5, 1).unwrap());
    let mut seen = BTreeSet::new();
    for f in 0..5 {
        let s = plan.split(f).unwrap();
        assert_eq!(FoldSplit::count(&s.test), 2);
        assert_eq!(FoldSplit::count(&s.validation), 2);
        assert_eq!(FoldSplit::count(&s.train), 6);
        let next = plan.split((f + 1) % 5).unwrap();
        assert_eq!(s.validation, next.test);
        seen.extend(s.test["D"].iter().cloned());
    }
    assert_eq!(seen.len(), 10);
}

#[test]
fn kfold_rejects_small_dataset() {
    let subjects: BTreeMap<String, Vec<String>> =
        [("D".to_string(), (0..4).map(|i| format!("s{i}")).collect())].into_iter().collect();
    assert!(kfold_split(&subjects, 5, 0).is_err());
}

fn square_sample(rng: &mut ChaCha8Rng, hw: usize, task: usize) -> SliceSample {
    let (y0, x0) = (rng.random_range(2..hw / 2), rng.random_range(2..hw / 2));
    let side = hw / 3;
    let inside = |y: usize, x: usize| (y0..y0 + side).contains(&y) && (x0..x0 + side).contains(&x);
    let target: Vec<u8> = (0..hw * hw).map(|i| u8::from(inside(i / hw, i % hw))).collect();
    let slab: Vec<f32> = (0..3)
        .flat_map(|_| target.iter().map(|&t| t as f32 * 1.5 - 0.5).collect::<Vec<_>>())
        .map(|v| v + rng.random_range(-0.2..0.2))
        .collect();
    SliceSample { slab, target, task_id: task, subject: "sq".into(), slice: 0, dataset: "sq".into(), hw }
}

#[test]
fn overfits_four_samples() {
    let cfg = ModelConfig { c_base: 8, heads: 2, image_hw: 16, n_tasks: 2, ..ModelConfig::desk() };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let samples: Vec<SliceSample> = (0..4).map(|i| square_sample(&mut rng, 16, 1 + i % 2)).collect();
    let batch: Vec<&SliceSample> = samples.iter().collect();
    let mut trainer = Trainer::new(Model::new(cfg, 0).unwrap(), 1e-3, DICE_EPS);
    let losses: Vec<f64> = (0..200).map(|_| trainer.step(&batch, &[1.0; 4], 1).unwrap() as f64).collect();
    assert!(losses[199] < 0.1, "final loss {}", losses[199]);
    let ma: Vec<f64> = losses.windows(20).map(|w| w.iter().sum::<f64>() / 20.0).collect();
    // ma[i] averages steps i+1..=i+20; start once the window lies past step 40.
    for i in 40..ma.len() - 1 {
        assert!(ma[i + 1] < ma[i], "moving average rose at step {}: {} -> {}", i + 21, ma[i], ma[i + 1]);
    }
}

struct Suite {
    _dir: tempfile::TempDir,
    manifest: moct_core::synthdata::DatasetManifest,
    split: FoldSplit,
}

fn suite() -> Suite {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_suite(dir.path(), 3, Scale::Desk).unwrap();
    let subjects = manifest.datasets.iter().map(|d| (d.name.clone(), d.subjects.iter().map(|s| s.id.clone()).collect())).collect();
    let split = kfold_split(&subjects, 5, 3).unwrap().split(0).unwrap();
    Suite { _dir: dir, manifest, split }
}

fn tiny_model() -> ModelConfig {
    ModelConfig { c_base: 8, heads: 2, image_hw: 16, ..ModelConfig::desk() }
}

#[test]
fn train_run_is_deterministic_and_keeps_best() {
    let s = suite();
    let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 4, lr: 1e-3, max_steps: Some(60), ..TrainConfig::default() };
    let run = RunSpec { variant: Variant::MoCtrans, dataset: None, fold: Some(0) };
    let a = train_run(&s.manifest, &s.split, &tiny_model(), &cfg, &run).unwrap();
    let b = train_run(&s.manifest, &s.split, &tiny_model(), &cfg, &run).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.steps, 60);
    assert_eq!(a.history.len(), 3);
    let best = a.history.iter().map(|r| r.mean_val_dice).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(a.history[a.best_epoch - 1].mean_val_dice, best);
    assert!(best >= a.history.last().unwrap().mean_val_dice);
    assert_eq!(a.checkpoint.meta.epoch, a.best_epoch);
    assert_eq!(a.checkpoint.meta.variant, Variant::MoCtrans);
    assert_eq!(a.history[0].val_dice.len(), 4);
    for (pa, pb) in a.checkpoint.model.params.iter().zip(b.checkpoint.model.params.iter()) {
        assert!(pa.1.data().iter().zip(pb.1.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn base_single_trains_on_its_dataset_only() {
    let s = suite();
    let cfg = TrainConfig { epochs: 1, seed: 1, max_steps: Some(2), ..TrainConfig::default() };
    let run = RunSpec { variant: Variant::BaseSingle, dataset: Some("S2".into()), fold: Some(0) };
    let out = train_run(&s.manifest, &s.split, &tiny_model(), &cfg, &run).unwrap();
    assert_eq!(out.checkpoint.meta.datasets, ["S2"]);
    assert_eq!(out.checkpoint.model.config.n_classes, 3);
    assert_eq!(out.history[0].val_dice.keys().copied().collect::<Vec<_>>(), [1, 2]);
    let mapping = TaskMapping::new(&s.manifest, Variant::BaseMulti, None).unwrap();
    assert_eq!(mapping.n_classes, 5);
    assert_eq!(mapping.class_of(3), Some(3));
}

#[test]
fn history_csv_layout() {
    let s = suite();
    let cfg = TrainConfig { epochs: 2, seed: 1, batch_size: 4, ..TrainConfig::default() };
    let run = RunSpec { variant: Variant::BaseSingle, dataset: Some("S3".into()), fold: Some(0) };
    let out = train_run(&s.manifest, &s.split, &tiny_model(), &cfg, &run).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("history.csv");
    write_history_csv(&path, &out.history, 4).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,mean_train_loss,val_dice_task_1,val_dice_task_2,val_dice_task_3,val_dice_task_4");
    assert_eq!(lines.len(), 3);
    let cells: Vec<&str> = lines[1].split(',').collect();
    assert_eq!(cells[0], "1");
    assert_eq!(&cells[2..], ["NA", "NA", cells[4], "NA"]);
    assert!(cells[4].parse::<f64>().is_ok());
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig { lr: 0.0, ..TrainConfig::default() }.validate().is_err());
    assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
    let parsed: TrainConfig = serde_json::from_str(r#"{"lr": 0.001, "weights": {"S1": 2.0}}"#).unwrap();
    assert_eq!(parsed.epochs, 30);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 1}"#).is_err());
}
