//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::panic::{self, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, ensure, Context, Result};
use fsml::adapters::{self, meta_test, AdaptConfig, AdapterKind, AdapterState, PretrainConfig};
use fsml::episodes::{check_disjoint_classes, check_episode, DatasetSplit, Episode, EpisodeSpec, Sampler};
use fsml::harness::{self, DatasetConfig, ExperimentConfig};
use fsml::network::{embed, EmbeddingModel, ParamId, RectifiedModel};
use fsml::retrieval::{self, evaluate, rank_members, Cutoffs};
use fsml::synthgen::gen_gaussian;
use fsml::tensor::Tensor;
use rand::Rng;

const GRADIENT_CASES: usize = 100;
const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const METRIC_INSTANCES: u64 = 1000;
const METRIC_GALLERY: usize = 20;
const METRIC_TOLERANCE: f64 = 1e-9;
const EPISODES: usize = 10_000;
const DIRECTION_MIN_EPISODES: usize = 50;
const CRML_MIN_GAIN: f64 = 0.05;
const DIRECTION_BUDGET: Duration = Duration::from_secs(30 * 60);
const GAPS: [f64; 3] = [0.0, 0.5, 1.0];
const BUDGETS: [usize; 4] = [0, 25, 100, 300];

fn config_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn load(name: &str) -> Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(&config_path(name))?)
}

struct Fixture {
    splits: [DatasetSplit; 3],
    pretrained: EmbeddingModel<f32>,
    suite: Vec<Episode>,
    cfg: ExperimentConfig,
}

/// The Gaussian experiment's data with a briefly pre-trained embedding.
fn fixture() -> Result<Fixture> {
    let cfg = load("gaussian.toml")?;
    let DatasetConfig::Gaussian(spec) = &cfg.dataset else {
        bail!("gaussian.toml must use the gaussian generator");
    };
    let splits = gen_gaussian(spec)?;
    let arch = cfg.network.clone().context("gaussian.toml sets the network")?;
    let pcfg = PretrainConfig {
        iterations: 100,
        ..cfg.pretrain.clone()
    };
    let (pretrained, _) = adapters::pretrain(&arch, &splits[0], &pcfg, 1)?;
    let suite = Sampler::Discrete(cfg.episodes.discrete()).suite(&splits[2], 20, 3)?;
    Ok(Fixture {
        splits,
        pretrained,
        suite,
        cfg,
    })
}

fn gradients() -> Result<String> {
    let start = Instant::now();
    let results = common::gradcheck::run_suite(GRADIENT_CASES, 11);
    let mut models = 0;
    let mut worst_model = 0.0f64;
    for conv in [false, true] {
        let mut seed = 0;
        let mut accepted = 0;
        while accepted < 20 && seed < 200 {
            if let Some(err) = common::gradcheck::model_check(&mut common::stream(1000 + seed), conv) {
                worst_model = worst_model.max(err);
                accepted += 1;
            }
            seed += 1;
        }
        models += accepted;
    }
    let elapsed = start.elapsed();
    let failed: Vec<String> = results.iter().filter(|r| r.failures > 0).map(|r| r.name.to_string()).collect();
    let worst = results.iter().map(|r| r.worst).fold(worst_model, f64::max);
    let fewest = results.iter().map(|r| r.cases).min().unwrap_or(0);
    ensure!(failed.is_empty(), "relative error >= {:e} in {failed:?}", common::gradcheck::TOLERANCE);
    ensure!(worst_model < common::gradcheck::TOLERANCE, "model gradient error {worst_model:e}");
    ensure!(fewest >= GRADIENT_CASES, "only {fewest} cases for some op");
    ensure!(elapsed < GRADIENT_BUDGET, "took {elapsed:?}");
    Ok(format!(
        "{} ops/losses x {GRADIENT_CASES} cases + {models} model cases, worst rel err {worst:.1e}",
        results.len()
    ))
}

fn metric_oracles() -> Result<String> {
    let mut worst = 0.0f64;
    let mut compared = 0;
    for trial in 0..METRIC_INSTANCES {
        for continuous in [false, true] {
            let mut r = common::stream(trial * 2 + u64::from(continuous));
            let inst = common::metrics::random_instance(&mut r, METRIC_GALLERY, continuous);
            let d = inst.items[0].len();
            let emb = Tensor::new(vec![inst.len(), d], inst.items.iter().flatten().copied().collect())?;
            let members: Vec<usize> = (0..inst.len()).collect();
            let ranked = rank_members(&emb, &inst.split(), &members)?;
            let mut pairs = Vec::new();
            if continuous {
                for k in 1..inst.len() {
                    pairs.push((retrieval::ndcg_at_k(&ranked, k)?, inst.ndcg_at(k)));
                    pairs.push((retrieval::mean_pose_distance_at_k(&ranked, k)?, inst.mpd_at(k)));
                }
            } else {
                pairs.push((retrieval::mean_average_precision(&ranked).value, inst.mean_average_precision()));
                let ks: Vec<usize> = (1..inst.len()).collect();
                for (k, v) in retrieval::recall_at_k(&ranked, &ks)? {
                    pairs.push((v, inst.recall_at(k)));
                }
            }
            for (got, want) in pairs {
                worst = worst.max((got - want).abs());
                compared += 1;
            }
        }
    }
    ensure!(worst <= METRIC_TOLERANCE, "worst deviation {worst:e}");
    Ok(format!(
        "{} instances, {compared} metric values, worst deviation {worst:.1e}",
        2 * METRIC_INSTANCES
    ))
}

fn episode_invariants() -> Result<String> {
    let cfg = load("gaussian.toml")?;
    let DatasetConfig::Gaussian(spec) = &cfg.dataset else {
        bail!("gaussian.toml must use the gaussian generator");
    };
    let splits = gen_gaussian(spec)?;
    check_disjoint_classes(&splits.iter().collect::<Vec<_>>()).map_err(|e| anyhow!(e))?;
    let mut r = common::stream(21);
    let mut violations = 0;
    for i in 0..EPISODES {
        let split = &splits[i % 3];
        let ep_spec = EpisodeSpec {
            way: r.random_range(2..=5),
            shot: r.random_range(1..=5),
            query: r.random_range(1..=15),
        };
        let ep = Sampler::Discrete(ep_spec).sample(split, r.random())?;
        let foreign = ep.classes.iter().any(|c| !split.classes().contains(c));
        violations += usize::from(check_episode(split, &ep_spec, &ep).is_err() || foreign);
    }
    ensure!(violations == 0, "{violations} violations");
    Ok(format!("{EPISODES} episodes over 3 class-disjoint splits, 0 violations"))
}

fn identity_rectifier(f: &Fixture) -> Result<String> {
    let test = &f.splits[2];
    let state = AdapterState::initial(AdapterKind::Crml, &f.pretrained, 0);
    ensure!(state.model.rectifier.as_ref().is_some_and(|r| r.is_identity()), "rectifier starts away from identity");
    let cutoffs = Cutoffs::default();
    let acfg = f.cfg.adapt.resolve(AdapterKind::Crml);
    let report = meta_test(&state, test, &f.suite, &acfg, &cutoffs, 5)?;
    for (e, ep) in f.suite.iter().enumerate() {
        let batch = test.batch(&ep.prediction);
        let plain = embed(&f.pretrained, &batch)?;
        let adapted = state.adapt(test, ep, 0, &acfg, 5)?.embed(&batch)?;
        ensure!(adapted.data() == plain.data(), "episode {e}: embeddings differ");
        let expected = evaluate(&plain, test, &ep.prediction, &cutoffs)?;
        ensure!(report.after.per_episode[e] == expected, "episode {e}: metrics differ");
    }
    Ok(format!("{} episodes, embeddings and metrics exactly equal", f.suite.len()))
}

fn reduction_law(f: &Fixture) -> Result<String> {
    let test = &f.splits[2];
    let acfg = AdaptConfig {
        max_meta_iterations: 0,
        select_steps: false,
        ..f.cfg.adapt.resolve(AdapterKind::Maml)
    };
    let sampler = Sampler::Discrete(f.cfg.episodes.discrete());
    let maml = adapters::maml_meta_train(&f.pretrained, &f.splits[0], &f.splits[1], &sampler, &acfg, 7)?;
    let sft = adapters::meta_train(AdapterKind::Sft, &f.pretrained, &f.splits[0], &f.splits[1], &sampler, &acfg, 7)?;
    ensure!(maml.model == sft.model && maml.inner_steps == sft.inner_steps, "initial states differ");
    let cutoffs = Cutoffs::default();
    let a = meta_test(&maml, test, &f.suite, &acfg, &cutoffs, 8)?;
    let b = meta_test(&sft, test, &f.suite, &acfg, &cutoffs, 8)?;
    ensure!(a == b, "meta-test reports differ");
    for (e, ep) in f.suite.iter().enumerate() {
        let x = maml.adapt(test, ep, acfg.inner_steps, &acfg, e as u64)?;
        let y = adapters::sft_adapt(&f.pretrained, test, ep, &acfg, e as u64)?;
        ensure!(x == y, "episode {e}: adapted parameters differ");
    }
    Ok(format!(
        "{} episodes, {} steps at alpha={}: reports and parameters bit-identical",
        f.suite.len(),
        acfg.inner_steps,
        acfg.inner_lr
    ))
}

fn bits(net: &RectifiedModel<f32>, ids: &[ParamId]) -> Vec<Vec<u32>> {
    ids.iter()
        .map(|&id| net.param(id).map(|t| t.data().iter().map(|v| v.to_bits()).collect()).unwrap_or_default())
        .collect()
}

fn freeze_contracts(f: &Fixture) -> Result<String> {
    let test = &f.splits[2];
    let sampler = Sampler::Discrete(f.cfg.episodes.discrete());
    let mut notes = Vec::new();
    for kind in [AdapterKind::Mtl, AdapterKind::Crml] {
        let acfg = f.cfg.adapt.resolve(kind);
        let initial = AdapterState::initial(kind, &f.pretrained, acfg.inner_steps);
        let frozen = kind.frozen_ids(&initial.model);
        ensure!(!frozen.is_empty(), "{kind:?} freezes nothing");
        let reference = bits(&initial.model, &frozen);
        let state = adapters::meta_train(kind, &f.pretrained, &f.splits[0], &f.splits[1], &sampler, &acfg, 9)?;
        ensure!(bits(&state.model, &frozen) == reference, "{kind:?}: meta-train moved a frozen parameter");
        let outer = state.outer_ids();
        ensure!(bits(&state.model, &outer) != bits(&initial.model, &outer), "{kind:?}: meta-train changed nothing");
        for (e, ep) in f.suite.iter().enumerate() {
            let adapted = state.adapt(test, ep, state.inner_steps, &acfg, e as u64)?;
            ensure!(bits(&adapted, &frozen) == reference, "{kind:?}: meta-test moved a frozen parameter");
        }
        notes.push(format!("{} {} frozen tensors", kind.name(), frozen.len()));
    }
    Ok(format!("{}, unchanged through meta-train and {} meta-test episodes", notes.join(", "), f.suite.len()))
}

fn map_means(table: &harness::ResultTable, kind: AdapterKind) -> Result<(f64, f64)> {
    let c = table.column("mAP").context("mAP column")?;
    let row = table.rows.iter().find(|r| r.adapter == kind).context("adapter row")?;
    Ok((row.mean(false, c).context("mAP before")?, row.mean(true, c).context("mAP after")?))
}

fn adaptation_direction() -> Result<String> {
    let start = Instant::now();
    let cfg = load("gaussian.toml")?;
    ensure!(cfg.episodes.test_episodes >= DIRECTION_MIN_EPISODES, "too few meta-test episodes");
    let spec = cfg.episodes.discrete();
    ensure!((spec.way, spec.shot) == (5, 5), "suite must be 5-way 5-shot");
    let dir = tempfile::tempdir()?;
    let table = harness::run(&cfg, dir.path())?;
    let mut parts = Vec::new();
    for kind in [AdapterKind::Sft, AdapterKind::Maml, AdapterKind::Mtl, AdapterKind::Crml] {
        let (before, after) = map_means(&table, kind)?;
        ensure!(after >= before, "{} mAP fell: {before:.4} -> {after:.4}", kind.name());
        parts.push(format!("{} {:.2}->{:.2}", kind.name(), 100.0 * before, 100.0 * after));
    }
    let (before, after) = map_means(&table, AdapterKind::Crml)?;
    ensure!(after - before >= CRML_MIN_GAIN, "crml gained only {:.2} points", 100.0 * (after - before));
    let elapsed = start.elapsed();
    ensure!(elapsed < DIRECTION_BUDGET, "took {elapsed:?}");
    Ok(format!("{} episodes; mAP {}", cfg.episodes.test_episodes, parts.join(", ")))
}

fn growth_trend() -> Result<String> {
    let cfg = load("gaussian.toml")?;
    let dir = tempfile::tempdir()?;
    let report = harness::compare_gap_levels(&cfg, &GAPS, dir.path())?;
    let trend = report.trend(AdapterKind::Crml).context("crml trend")?;
    let growth: Vec<String> = trend
        .growth
        .iter()
        .zip(GAPS)
        .map(|(g, gap)| format!("g={gap}: {}", g.map_or("n/a".into(), |g| format!("{:+.2}%", 100.0 * g))))
        .collect();
    ensure!(trend.strictly_increasing == Some(true), "crml growth not strictly increasing: {}", growth.join(", "));
    Ok(format!("crml growth {}", growth.join(", ")))
}

fn continuous_regime() -> Result<String> {
    let cfg = load("pose.toml")?;
    ensure!(cfg.episodes.pair_budgets == BUDGETS, "budgets must be {BUDGETS:?}");
    let dir = tempfile::tempdir()?;
    let table = harness::run(&cfg, dir.path())?;
    let (ndcg, mpd) = (table.column("nDCG@1").context("nDCG@1")?, table.column("mPD@1").context("mPD@1")?);
    let mut parts = Vec::new();
    for &kind in cfg.adapters.iter().filter(|&&k| k != AdapterKind::None) {
        let mut series = Vec::new();
        for b in BUDGETS {
            let row = table.row(kind, b).with_context(|| format!("{} row at budget {b}", kind.name()))?;
            series.push((row.mean(true, ndcg).context("nDCG")?, row.mean(true, mpd).context("mPD")?));
        }
        let text: Vec<String> = BUDGETS.iter().zip(&series).map(|(b, (n, m))| format!("{b}:{n:.4}/{m:.3}")).collect();
        for w in series.windows(2) {
            ensure!(w[1].0 >= w[0].0, "{} nDCG@1 fell: {}", kind.name(), text.join(" "));
            ensure!(w[1].1 <= w[0].1, "{} mPD@1 rose: {}", kind.name(), text.join(" "));
        }
        parts.push(format!("{} budget:nDCG@1/mPD@1 {}", kind.name(), text.join(" ")));
    }
    ensure!(!parts.is_empty(), "no adapted rows");
    Ok(parts.join("; "))
}

fn determinism() -> Result<String> {
    let dirs = [tempfile::tempdir()?, tempfile::tempdir()?];
    let mut csvs = Vec::new();
    for d in &dirs {
        let status = Command::new(env!("CARGO_BIN_EXE_fsml"))
            .arg("--config")
            .arg(config_path("gaussian.toml"))
            .arg("--out")
            .arg(d.path())
            .arg("run-all")
            .env("RUST_LOG", "warn")
            .output()?;
        ensure!(status.status.success(), "run-all failed: {}", String::from_utf8_lossy(&status.stderr));
        csvs.push(std::fs::read(d.path().join("episodes.csv"))?);
    }
    ensure!(csvs[0] == csvs[1], "episodes.csv differs between runs");
    Ok(format!("two run-all invocations, {} identical CSV bytes", csvs[0].len()))
}

fn main() -> ExitCode {
    let fixture = fixture();
    let fixture = &fixture;
    let with_fixture = |f: fn(&Fixture) -> Result<String>| {
        move || match fixture {
            Ok(fx) => f(fx),
            Err(e) => Err(anyhow!("fixture: {e:#}")),
        }
    };
    type Check<'a> = Box<dyn Fn() -> Result<String> + 'a>;
    let criteria: Vec<(&str, Check)> = vec![
        ("gradient suite", Box::new(gradients)),
        ("metric oracles", Box::new(metric_oracles)),
        ("episode invariants", Box::new(episode_invariants)),
        ("identity rectifier", Box::new(with_fixture(identity_rectifier))),
        ("maml/sft reduction", Box::new(with_fixture(reduction_law))),
        ("freeze contracts", Box::new(with_fixture(freeze_contracts))),
        ("adaptation direction", Box::new(adaptation_direction)),
        ("growth-rate trend", Box::new(growth_trend)),
        ("continuous regime", Box::new(continuous_regime)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| Err(anyhow!("panicked: {}", p.downcast_ref::<String>().cloned().unwrap_or_default())));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name} ({secs:.1}s): {detail}", i + 1),
            Err(e) => {
                failures += 1;
                println!("FAIL {:>2} {name} ({secs:.1}s): {e:#}", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
