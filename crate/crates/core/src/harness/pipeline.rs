//! The four stages. Each reads its inputs from the run directory and writes
//! its outputs there, so stages can run separately or back to back with
//! identical results.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail};
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::report::{growth_rate, ResultRow, ResultTable};
use super::{AtStage, DatasetConfig, ExperimentConfig, HarnessError, Stage, ROLES};
use crate::adapters::{self, AdapterKind, AdapterState};
use crate::episodes::file::{read_split, write_split};
use crate::episodes::{DatasetSplit, Sampler};
use crate::losses::LossKind;
use crate::network::checkpoint::Checkpoint;
use crate::network::{Architecture, EmbeddingModel, RectifiedModel};
use crate::rng;
use crate::synthgen;

fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("checkpoints")
}

fn write(path: PathBuf, text: &str) -> anyhow::Result<()> {
    fs::write(&path, text).map_err(|e| anyhow!("{}: {e}", path.display()))
}

fn load_data(out: &Path) -> anyhow::Result<[DatasetSplit; 3]> {
    let mut splits = Vec::with_capacity(3);
    for role in ROLES {
        let path = data_dir(out).join(format!("{role}.manifest"));
        let (split, _) = read_split(&path).map_err(|e| anyhow!("{}: {e}", path.display()))?;
        splits.push(split);
    }
    Ok(splits.try_into().expect("three roles"))
}

/// Loss kinds must suit the label type: log-ratio exactly for pose labels.
fn check_losses(cfg: &ExperimentConfig, continuous: bool) -> anyhow::Result<()> {
    let kinds = [("pretrain.loss", cfg.pretrain.loss.kind), ("adapt.default.loss", cfg.adapt.default.loss.kind)];
    for (key, kind) in kinds {
        if continuous != (kind == LossKind::LogRatio) {
            bail!(
                "{key} is {kind:?} but the data has {} labels",
                if continuous { "continuous" } else { "class" }
            );
        }
    }
    Ok(())
}

fn architecture(cfg: &ExperimentConfig, split: &DatasetSplit) -> anyhow::Result<Architecture> {
    let arch = match &cfg.network {
        Some(a) => a.clone(),
        None => match split.item_shape[..] {
            [d] => Architecture::mlp(d, &[64, 64]),
            [c, h, w] if h == w => {
                let blocks = (h.max(2).ilog2() as usize).min(4);
                Architecture::Conv {
                    in_channels: c,
                    image_size: h,
                    channels: [16, 32, 64, 64][..blocks].to_vec(),
                    embed_dim: Architecture::default_conv().embed_dim(),
                }
            }
            _ => bail!("no default architecture for items of shape {:?}", split.item_shape),
        },
    };
    if arch.input_shape() != split.item_shape {
        bail!(
            "architecture input {:?} does not match data items {:?}",
            arch.input_shape(),
            split.item_shape
        );
    }
    Ok(arch)
}

fn meta_sampler(cfg: &ExperimentConfig, continuous: bool) -> Sampler {
    if continuous {
        cfg.episodes.continuous(cfg.episodes.meta_pair_budget)
    } else {
        Sampler::Discrete(cfg.episodes.discrete())
    }
}

fn generate(cfg: &ExperimentConfig) -> anyhow::Result<([DatasetSplit; 3], Vec<String>)> {
    let seed = rng::substream(cfg.seed, "dataset");
    let described = |d: DatasetConfig| serde_json::to_string(&d).expect("spec serializes");
    Ok(match &cfg.dataset {
        DatasetConfig::Gaussian(spec) => {
            let spec = synthgen::GaussianSpec {
                seed: rng::child(seed, spec.seed),
                ..spec.clone()
            };
            let splits = synthgen::gen_gaussian(&spec)?;
            (splits, vec![described(DatasetConfig::Gaussian(spec)); 3])
        }
        DatasetConfig::Continuous(spec) => {
            let spec = synthgen::ContinuousPoseSpec {
                seed: rng::child(seed, spec.seed),
                ..spec.clone()
            };
            let splits = synthgen::gen_continuous(&spec)?;
            (splits, vec![described(DatasetConfig::Continuous(spec)); 3])
        }
        DatasetConfig::AttributeSwitch(spec) => {
            let spec = synthgen::AttributeSwitchSpec {
                seed: rng::child(seed, spec.seed),
                ..spec.clone()
            };
            let data = synthgen::gen_attribute_switch(&spec)?;
            (data.splits, vec![described(DatasetConfig::AttributeSwitch(spec)); 3])
        }
        DatasetConfig::Files { dir } => {
            let mut splits = Vec::new();
            let mut generators = Vec::new();
            for role in ROLES {
                let path = dir.join(format!("{role}.manifest"));
                let (s, g) = read_split(&path).map_err(|e| anyhow!("{}: {e}", path.display()))?;
                splits.push(s);
                generators.push(g);
            }
            (splits.try_into().expect("three roles"), generators)
        }
    })
}

/// Writes the resolved config and the three dataset splits.
pub fn gen(cfg: &ExperimentConfig, out: &Path) -> Result<[DatasetSplit; 3], HarnessError> {
    let stage = Stage::Gen;
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| anyhow!("{}: {e}", out.display())).at(stage)?;
    write(out.join("config.toml"), &cfg.to_toml()).at(stage)?;
    let (mut splits, generators) = generate(cfg).at(stage)?;
    let continuous = splits[0].is_continuous();
    if splits.iter().any(|s| s.is_continuous() != continuous) {
        return Err(HarnessError::new(stage, anyhow!("splits mix class and pose labels")));
    }
    for ((split, role), generator) in splits.iter_mut().zip(ROLES).zip(&generators) {
        split.name = role.to_string();
        write_split(&data_dir(out), split, generator).at(stage)?;
    }
    log::info!("gen: {} / {} / {} items", splits[0].len(), splits[1].len(), splits[2].len());
    Ok(splits)
}

/// Trains the embedding on meta-train data and saves `checkpoints/pretrained`.
pub fn pretrain(cfg: &ExperimentConfig, out: &Path) -> Result<EmbeddingModel<f32>, HarnessError> {
    let stage = Stage::Pretrain;
    let [train, _, _] = load_data(out).at(stage)?;
    check_losses(cfg, train.is_continuous()).at(stage)?;
    let arch = architecture(cfg, &train).at(stage)?;
    let (model, report) =
        adapters::pretrain::pretrain(&arch, &train, &cfg.pretrain, rng::substream(cfg.seed, "pretrain")).at(stage)?;
    let net = RectifiedModel::plain(model);
    Checkpoint::from_model(&net).save(&checkpoint_dir(out), "pretrained").at(stage)?;
    if let Some((first, last)) = report.first_and_last() {
        log::info!("pretrain: loss {first:.4} -> {last:.4}");
    }
    let trace = json!({ "losses": report.losses, "first_and_last": report.first_and_last() });
    write(out.join("pretrain.json"), &serde_json::to_string_pretty(&trace).expect("json")).at(stage)?;
    Ok(net.model)
}

fn load_pretrained(out: &Path) -> anyhow::Result<EmbeddingModel<f32>> {
    let ck = Checkpoint::load(&checkpoint_dir(out).join("pretrained.manifest"))?;
    let arch = ck.architecture()?;
    Ok(ck.into_model(&arch)?.model)
}

/// Meta-trains every configured adapter and saves `checkpoints/<adapter>`.
pub fn meta_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<AdapterState>, HarnessError> {
    let stage = Stage::MetaTrain;
    let [train, val, _] = load_data(out).at(stage)?;
    check_losses(cfg, train.is_continuous()).at(stage)?;
    let pretrained = load_pretrained(out).at(stage)?;
    let sampler = meta_sampler(cfg, train.is_continuous());
    let seed = rng::substream(cfg.seed, "meta");
    let mut states = Vec::new();
    let mut traces = Vec::new();
    for &kind in &cfg.adapters {
        let acfg = cfg.adapt.resolve(kind);
        let state = adapters::meta_train(kind, &pretrained, &train, &val, &sampler, &acfg, seed)
            .map_err(|e| anyhow!("{}: {e}", kind.name()))
            .at(stage)?;
        state.to_checkpoint().save(&checkpoint_dir(out), kind.name()).at(stage)?;
        log::info!("meta-train {}: {} iterations, {} inner steps", kind.name(), state.history.len(), state.inner_steps);
        traces.push(json!({
            "adapter": kind,
            "inner_steps": state.inner_steps,
            "validation": state.validation,
            "history": state.history,
        }));
        states.push(state);
    }
    write(out.join("meta_train.json"), &serde_json::to_string_pretty(&traces).expect("json")).at(stage)?;
    Ok(states)
}

/// Meta-tests every adapter on the meta-test split and writes the reports.
///
/// All adapters see the same episodes. On pose data every budget uses the
/// same episode seeds, so larger budgets extend the labeled pairs of smaller
/// ones over the same prediction pool.
pub fn eval(cfg: &ExperimentConfig, out: &Path) -> Result<ResultTable, HarnessError> {
    let stage = Stage::Eval;
    let [_, _, test] = load_data(out).at(stage)?;
    let root = rng::substream(cfg.seed, "eval");
    let (suite_seed, adapt_seed) = (rng::substream(root, "suite"), rng::substream(root, "adapt"));
    let n = cfg.episodes.test_episodes;
    let samplers: Vec<(Option<usize>, usize, Sampler)> = if test.is_continuous() {
        cfg.episodes
            .pair_budgets
            .iter()
            .map(|&b| (None, b, cfg.episodes.continuous(b)))
            .collect()
    } else {
        let spec = cfg.episodes.discrete();
        vec![(Some(spec.way), spec.shot, Sampler::Discrete(spec))]
    };
    let suites = samplers
        .iter()
        .map(|(_, _, s)| s.suite(&test, n, suite_seed))
        .collect::<Result<Vec<_>, _>>()
        .at(stage)?;
    let mut table = ResultTable::new(&cfg.eval);
    for &kind in &cfg.adapters {
        let path = checkpoint_dir(out).join(format!("{}.manifest", kind.name()));
        let state = Checkpoint::load(&path)
            .map_err(anyhow::Error::from)
            .and_then(|ck| Ok(AdapterState::from_checkpoint(ck)?))
            .map_err(|e| anyhow!("{}: {e}", path.display()))
            .at(stage)?;
        if state.kind != kind {
            return Err(HarnessError::new(stage, anyhow!("{} holds a {} state", path.display(), state.kind.name())));
        }
        let acfg = cfg.adapt.resolve(kind);
        for ((way, shot, _), suite) in samplers.iter().zip(&suites) {
            let report = adapters::meta_test(&state, &test, suite, &acfg, &cfg.eval, adapt_seed).at(stage)?;
            table.rows.push(ResultRow::new(kind, *way, *shot, state.inner_steps, &report, &cfg.eval));
        }
    }
    write(out.join("episodes.csv"), &table.to_csv()).at(stage)?;
    write(out.join("results.json"), &table.to_json()).at(stage)?;
    write(out.join("results.txt"), &table.to_text()).at(stage)?;
    Ok(table)
}

/// All stages in order.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<ResultTable, HarnessError> {
    gen(cfg, out)?;
    pretrain(cfg, out)?;
    meta_train(cfg, out)?;
    eval(cfg, out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapLevel {
    pub gap: f64,
    pub table: ResultTable,
}

/// mAP growth rate of one adapter across gap levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapTrend {
    pub adapter: AdapterKind,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub growth: Vec<Option<f64>>,
    /// Growth strictly increases from each gap level to the next.
    pub strictly_increasing: Option<bool>,
    /// Growth at the largest gap exceeds growth at the smallest.
    pub endpoint_increase: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub levels: Vec<GapLevel>,
    pub trends: Vec<GapTrend>,
}

impl GapReport {
    pub fn trend(&self, adapter: AdapterKind) -> Option<&GapTrend> {
        self.trends.iter().find(|t| t.adapter == adapter)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.trends {
            out.push_str(&format!("{:<8}", t.adapter.name()));
            for (i, level) in self.levels.iter().enumerate() {
                let g = t.growth[i].map(|g| format!("{:+.2}%", 100.0 * g)).unwrap_or_else(|| "n/a".into());
                out.push_str(&format!(
                    "  g={}: {:.2} -> {:.2} ({g})",
                    level.gap,
                    100.0 * t.before[i],
                    100.0 * t.after[i]
                ));
            }
            if let Some(inc) = t.strictly_increasing {
                out.push_str(&format!("  increasing={inc}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the whole pipeline once per gap level in `out/gap_<g>` and reports
/// the mAP growth rate against the gap.
pub fn compare_gap_levels(cfg: &ExperimentConfig, gaps: &[f64], out: &Path) -> Result<GapReport, HarnessError> {
    let stage = Stage::GapSweep;
    let DatasetConfig::Gaussian(spec) = &cfg.dataset else {
        return Err(HarnessError::new(stage, anyhow!("gap sweeps need the gaussian generator")));
    };
    if gaps.is_empty() || gaps.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(HarnessError::new(stage, anyhow!("gap levels must be nonempty and increasing")));
    }
    let mut levels = Vec::new();
    for &gap in gaps {
        let mut level_cfg = cfg.clone();
        level_cfg.dataset = DatasetConfig::Gaussian(synthgen::GaussianSpec { gap, ..spec.clone() });
        let table = run(&level_cfg, &out.join(format!("gap_{gap}")))?;
        levels.push(GapLevel { gap, table });
    }
    let trends = cfg
        .adapters
        .iter()
        .map(|&adapter| {
            let means = |after: bool| -> Vec<f64> {
                levels
                    .iter()
                    .map(|l| {
                        let c = l.table.column("mAP").expect("mAP column");
                        l.table.row(adapter, l.table.rows[0].shot).and_then(|r| r.mean(after, c)).unwrap_or(f64::NAN)
                    })
                    .collect()
            };
            let (before, after) = (means(false), means(true));
            let growth: Vec<Option<f64>> = before.iter().zip(&after).map(|(&b, &a)| growth_rate(b, a)).collect();
            let known: Option<Vec<f64>> = growth.iter().copied().collect();
            let (strictly_increasing, endpoint_increase) = match known {
                Some(g) if g.len() >= 2 => (
                    Some(g.windows(2).all(|w| w[1] > w[0])),
                    Some(g[g.len() - 1] > g[0]),
                ),
                _ => (None, None),
            };
            GapTrend {
                adapter,
                before,
                after,
                growth,
                strictly_increasing,
                endpoint_increase,
            }
        })
        .collect();
    let report = GapReport { levels, trends };
    write(out.join("gap_trend.json"), &serde_json::to_string_pretty(&report).expect("json")).at(stage)?;
    write(out.join("gap_trend.txt"), &report.to_text()).at(stage)?;
    Ok(report)
}
