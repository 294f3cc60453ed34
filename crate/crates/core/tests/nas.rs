mod common;

use common::{close, randomize, rng};
use psvit_core::arch::{count_flops, CellChoice};
use psvit_core::harness::{DatasetSpec, SyntheticDataset};
use psvit_core::layers::{Ctx, ImageClassifier, ParamId};
use psvit_core::nas::{
    accuracy, evaluate_subnet, evolutionary_search, exhaustive_search, reduced_schedule, sample_path, toy_schedule,
    OptimConfig, Path, SearchConfig, Supernet, TrainConfig, Trainer,
};
use psvit_core::{Error, Tape};

use CellChoice::{Basic as B, Identity as I, SharedPair as S};

fn dataset() -> SyntheticDataset {
    SyntheticDataset::generate(DatasetSpec::default()).unwrap()
}

fn logits_of(model: &dyn ImageClassifier, img: &psvit_core::Tensor) -> Vec<f64> {
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, model.store());
    model.logits(&ctx, img).unwrap().value().data().to_vec()
}

#[test]
fn sampled_paths_are_uniform_per_cell() {
    let mut r = rng(3);
    let n = 30_000;
    let mut counts = vec![[0usize; 3]; 18];
    for _ in 0..n {
        let p = sample_path(18, &mut r);
        assert_eq!(p.len(), 18);
        for (c, choice) in p.0.iter().enumerate() {
            counts[c][CellChoice::ALL.iter().position(|x| x == choice).unwrap()] += 1;
        }
    }
    for (c, row) in counts.iter().enumerate() {
        for &k in row {
            let f = k as f64 / n as f64;
            assert!((0.323..=0.343).contains(&f), "cell {c}: frequency {f}");
        }
    }
}

#[test]
fn sampling_is_seeded_and_sized() {
    let net = Supernet::new(&toy_schedule(6), &mut rng(0)).unwrap();
    assert_eq!(net.num_cells(), 18);
    let a: Vec<Path> = (0..5).map({
        let mut r = rng(42);
        move |_| net.sample_path(&mut r)
    }).collect();
    let net = Supernet::new(&toy_schedule(6), &mut rng(0)).unwrap();
    let mut r = rng(42);
    for p in &a {
        assert_eq!(&net.sample_path(&mut r), p);
        assert_eq!(p.len(), 18);
    }
}

#[test]
fn path_parse_round_trips() {
    let p = Path(vec![B, S, I, B]);
    assert_eq!(p.to_string(), "BSIB");
    assert_eq!(Path::parse("B S|I,B").unwrap(), p);
    assert!(Path::parse("BXZ").is_err());
}

#[test]
fn extreme_paths_realize_expected_depths() {
    let net = Supernet::new(&toy_schedule(6), &mut rng(1)).unwrap();
    let all_i = net.genotype(&Path::uniform(I, 18)).unwrap();
    assert_eq!(all_i.depth(), 0);
    let all_s = net.genotype(&Path::uniform(S, 18)).unwrap();
    assert_eq!(all_s.depth(), 36);
    let all_b = net.genotype(&Path::uniform(B, 18)).unwrap();
    assert_eq!(all_b.depth(), 18);

    // identity-only forward: embed, two pools, head
    let ds = dataset();
    let path = Path::uniform(I, 18);
    let tape = Tape::new();
    let ctx = Ctx::frozen(&tape, &net.store);
    let (logits, maps) = net.forward_traced(&ctx, &path, &ds.images[0]).unwrap();
    assert!(maps.is_empty());
    assert_eq!(logits.value().numel(), 10);
}

#[test]
fn supernet_param_count_is_backbone_plus_cells() {
    let g = toy_schedule(2);
    let net = Supernet::new(&g, &mut rng(0)).unwrap();
    let backbone = count_flops(&net.genotype(&Path::uniform(I, 6)).unwrap()).unwrap().totals.params;
    let basic = count_flops(&net.genotype(&Path::uniform(B, 6)).unwrap()).unwrap().totals.params - backbone;
    let pair = count_flops(&net.genotype(&Path::uniform(S, 6)).unwrap()).unwrap().totals.params - backbone;
    assert_eq!(net.store.numel() as u64, backbone + basic + pair);
}

#[test]
fn extracted_subnets_match_supernet_views() {
    let mut net = Supernet::new(&toy_schedule(2), &mut rng(5)).unwrap();
    randomize(&mut net.store, &mut rng(6), 0.3);
    let ds = dataset();
    let mut r = rng(7);
    let mut paths = vec![Path::uniform(B, 6), Path::uniform(S, 6), Path::uniform(I, 6)];
    paths.extend((0..4).map(|_| net.sample_path(&mut r)));
    for path in &paths {
        let model = net.extract(path).unwrap();
        assert_eq!(model.genotype, net.genotype(path).unwrap());
        let view = net.view(path).unwrap();
        for img in &ds.images[..3] {
            let a = logits_of(&view, img);
            let b = logits_of(&model, img);
            assert!(close(&a, &b, 1e-12), "{path}: {a:?} vs {b:?}");
        }
    }
}

#[test]
fn identity_path_fitness_equals_standalone_head_model() {
    let net = Supernet::new(&toy_schedule(2), &mut rng(11)).unwrap();
    let ds = dataset();
    let all = ds.all();
    let data = all.examples().unwrap();
    let path = Path::uniform(I, 6);
    let standalone = net.extract(&path).unwrap();
    assert_eq!(standalone.genotype.depth(), 0);
    assert_eq!(
        evaluate_subnet(&net, &path, data).unwrap(),
        accuracy(&standalone, data).unwrap()
    );
}

#[test]
fn untrained_fitness_is_near_chance_and_pure() {
    let net = Supernet::new(&toy_schedule(2), &mut rng(12)).unwrap();
    let ds = dataset();
    let all = ds.all();
    let data = all.examples().unwrap();
    let mut r = rng(13);
    for _ in 0..3 {
        let p = net.sample_path(&mut r);
        let f = evaluate_subnet(&net, &p, data).unwrap();
        assert!((f - 0.1).abs() <= 0.08, "{p}: {f}");
        assert_eq!(f, evaluate_subnet(&net, &p, data).unwrap());
    }
}

#[test]
fn evaluation_rejects_wrong_path_length() {
    let net = Supernet::new(&toy_schedule(2), &mut rng(0)).unwrap();
    let ds = dataset();
    let all = ds.all();
    let err = evaluate_subnet(&net, &Path::uniform(B, 5), all.examples().unwrap());
    assert!(matches!(err, Err(Error::Contract(_))), "{err:?}");
}

#[test]
fn inactive_parameters_are_bit_unchanged() {
    let mut net = Supernet::new(&toy_schedule(2), &mut rng(2)).unwrap();
    let ds = dataset();
    let train = ds.train_split();
    let mut trainer = Trainer::new(
        TrainConfig {
            batch_size: 4,
            iterations: 12,
            ..TrainConfig::default()
        },
        net.store.len(),
    );
    for _ in 0..12 {
        let before = net.store.clone();
        let rec = trainer.step_supernet(&mut net, train.examples().unwrap(), None).unwrap();
        let path = Path::parse(rec.path.as_deref().unwrap()).unwrap();
        let active = net.path_params(&path).unwrap();
        for id in net.store.ids() {
            let same = before.get(id).data().iter().zip(net.store.get(id).data()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !active.contains(&id) {
                assert!(same, "{path}: inactive {} changed", net.store.name(id));
            }
        }
    }
}

#[test]
fn touched_parameters_are_exactly_the_active_path() {
    let net = Supernet::new(&toy_schedule(2), &mut rng(2)).unwrap();
    let ds = dataset();
    let mut r = rng(9);
    for _ in 0..5 {
        let path = net.sample_path(&mut r);
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &net.store);
        net.view(&path).unwrap().logits(&ctx, &ds.images[0]).unwrap();
        let mut touched: Vec<ParamId> = ctx.touched();
        touched.sort();
        assert_eq!(touched, net.path_params(&path).unwrap(), "{path}");
    }
}

#[test]
fn fixed_all_basic_path_overfits_one_batch() {
    let mut net = Supernet::new(&toy_schedule(2), &mut rng(4)).unwrap();
    let ds = dataset();
    let train = ds.train_split();
    let batch = train.examples().unwrap().head(8);
    let cfg = TrainConfig {
        optim: OptimConfig {
            label_smoothing: 0.0,
            ..OptimConfig::default()
        },
        batch_size: 8,
        iterations: 300,
        seed: 0,
    };
    let mut trainer = Trainer::new(cfg, net.store.len());
    let path = Path::uniform(B, 6);
    let mut last = f64::NAN;
    for _ in 0..300 {
        last = trainer.step_supernet(&mut net, batch, Some(&path)).unwrap().loss;
    }
    assert!(last < 0.05, "final loss {last}");
}

#[test]
fn training_trajectory_is_deterministic() {
    let ds = dataset();
    let train = ds.train_split();
    let run = || {
        let mut net = Supernet::new(&toy_schedule(2), &mut rng(8)).unwrap();
        let mut trainer = Trainer::new(
            TrainConfig {
                batch_size: 4,
                iterations: 6,
                seed: 21,
                ..TrainConfig::default()
            },
            net.store.len(),
        );
        (0..6)
            .map(|_| trainer.step_supernet(&mut net, train.examples().unwrap(), None).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

fn reduced_flops() -> impl Fn(&Path) -> psvit_core::Result<u64> {
    let net = Supernet::new(&reduced_schedule(), &mut rng(0)).unwrap();
    move |p: &Path| net.path_flops(p)
}

#[test]
fn surrogate_search_finds_exhaustive_winner() {
    let flops = reduced_flops();
    let lo = flops(&Path::uniform(I, 4)).unwrap();
    let hi = flops(&Path::uniform(S, 4)).unwrap();
    for (i, target) in [lo + (hi - lo) / 3, lo + (hi - lo) / 2, lo + 3 * (hi - lo) / 4].into_iter().enumerate() {
        let fitness = |p: &Path| Ok(-(flops(p)? as f64 - target as f64).abs());
        let exhaustive = exhaustive_search(4, u64::MAX, true, &flops, fitness).unwrap();
        let cfg = SearchConfig {
            population_size: 10,
            topk_retained: 5,
            max_iterations: 20,
            seed: i as u64,
            ..SearchConfig::default()
        };
        let out = evolutionary_search(4, &cfg, &flops, fitness).unwrap();
        assert_eq!(out.top[0].path, exhaustive[0].path, "target {target}");
    }
}

#[test]
fn search_respects_budget_and_keeps_elites() {
    let flops = reduced_flops();
    let lo = flops(&Path::uniform(I, 4)).unwrap();
    let hi = flops(&Path::uniform(S, 4)).unwrap();
    let budget = lo + (hi - lo) / 2;
    // favour expensive paths so the budget binds
    let fitness = |p: &Path| Ok(flops(p)? as f64);
    let cfg = SearchConfig {
        population_size: 8,
        topk_retained: 3,
        ..SearchConfig::with_budget(budget)
    };
    let out = evolutionary_search(4, &cfg, &flops, fitness).unwrap();
    assert!(out.archive.iter().all(|c| c.flops <= budget));
    assert!(out.top.iter().all(|c| c.flops <= budget));
    assert!(out.best_history.windows(2).all(|w| w[0] <= w[1]), "{:?}", out.best_history);
    let exhaustive = exhaustive_search(4, budget, true, &flops, fitness).unwrap();
    assert_eq!(out.top[0].path, exhaustive[0].path);
}

#[test]
fn every_candidate_is_repaired() {
    let flops = reduced_flops();
    let out = evolutionary_search(4, &SearchConfig::default(), &flops, |p| Ok(p.0.iter().filter(|c| **c == S).count() as f64)).unwrap();
    for c in &out.archive {
        let mut p = c.path.clone();
        assert!(!p.repair_last_layer(), "{} was not repaired", c.path);
    }
}

#[test]
fn search_is_deterministic_across_runs_and_workers() {
    let flops = reduced_flops();
    let fitness = |p: &Path| Ok(((flops(p)? % 997) as f64).sin());
    let cfg = SearchConfig {
        population_size: 12,
        topk_retained: 4,
        seed: 5,
        ..SearchConfig::default()
    };
    let a = evolutionary_search(4, &cfg, &flops, fitness).unwrap();
    let b = evolutionary_search(4, &cfg, &flops, fitness).unwrap();
    assert_eq!(a, b);
    let c = evolutionary_search(4, &SearchConfig { workers: 3, ..cfg }, &flops, fitness).unwrap();
    assert_eq!(a.archive, c.archive);
    assert_eq!(a.top, c.top);
}

#[test]
fn budget_below_identity_is_infeasible() {
    let flops = reduced_flops();
    let lo = flops(&Path::uniform(I, 4)).unwrap();
    let err = evolutionary_search(4, &SearchConfig::with_budget(lo - 1), &flops, |_| Ok(0.0));
    assert!(matches!(err, Err(Error::InfeasibleBudget { minimum, .. }) if minimum == lo), "{err:?}");
    // exactly the identity cost is feasible
    let out = evolutionary_search(4, &SearchConfig::with_budget(lo), &flops, |_| Ok(0.0)).unwrap();
    assert!(out.archive.iter().all(|c| c.path == Path::uniform(I, 4)));
}

#[test]
fn inconsistent_search_config_is_rejected() {
    let flops = reduced_flops();
    let cfg = SearchConfig {
        topk_retained: 60,
        ..SearchConfig::default()
    };
    assert!(evolutionary_search(4, &cfg, &flops, |_| Ok(0.0)).is_err());
}
