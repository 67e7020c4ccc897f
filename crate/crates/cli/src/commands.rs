use std::collections::BTreeMap;

use fpo_core::annotate::PreferencePair;
use fpo_core::evalrep::{compare, eval_records, eval_records_csv, eval_seed, summarize, sweep, SweepReport};
use fpo_core::model::ModelCheckpoint;
use fpo_core::optimloss::{loss_log_csv, LossVariant};
use fpo_core::pipeline::{
    build_pairs, gradcheck_suite, run_preference, run_sft, sample_group, sft_dataset, task_spec,
    CandidateGroup, ExperimentConfig, GradCheckEntry, PairYield,
};
use fpo_core::rng::derive_seed;
use fpo_core::task::{DatasetRecord, TaskSpec};
use fpo_core::Error;
use serde::{Deserialize, Serialize};

use crate::artifacts::{self as art, Workspace};
use crate::{config, CliError};

pub const SCHEMA_TASK: &str = "task_spec";
pub const SCHEMA_SFT_DATA: &str = "sft_dataset";
pub const SCHEMA_SAMPLES: &str = "candidate_groups";
pub const SCHEMA_PAIRS: &str = "preference_pairs";
pub const SCHEMA_YIELD: &str = "pair_yield";
pub const SCHEMA_EVAL: &str = "eval_report";
pub const SCHEMA_SWEEP: &str = "sweep_report";
pub const SCHEMA_GRADCHECK: &str = "gradcheck";

/// Model names accepted by `eval`, in report order.
pub const MODEL_NAMES: [&str; 4] = ["sft", "fpo_token_sigmoid", "fpo_sequence_sigmoid", "dpo_utterance"];

fn pair_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.seed, "pairs", 0)
}

fn open(cfg: &ExperimentConfig) -> Result<Workspace, CliError> {
    let ws = Workspace::open(cfg)?;
    ws.write_text(
        art::CONFIG_SNAPSHOT,
        &format!("# config_hash={}\n{}", ws.hash, config::to_toml(cfg)?),
    )?;
    Ok(ws)
}

fn read_task(ws: &Workspace) -> Result<TaskSpec, CliError> {
    Ok(ws.read_doc(art::TASK, SCHEMA_TASK)?)
}

pub fn show_config(cfg: &ExperimentConfig) -> Result<(), CliError> {
    println!("# config_hash={}", cfg.hash());
    print!("{}", config::to_toml(cfg)?);
    Ok(())
}

pub fn gen_sft(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let ws = open(cfg)?;
    let spec = task_spec(cfg)?;
    let data = sft_dataset(cfg, &spec)?;
    ws.write_doc(art::TASK, SCHEMA_TASK, &spec)?;
    let p = ws.write_records(art::SFT_DATA, SCHEMA_SFT_DATA, &data)?;
    let corrupted = data.iter().filter(|r| !r.spans.is_empty()).count();
    println!("wrote {} ({} records, {corrupted} corrupted)", p.display(), data.len());
    Ok(())
}

pub fn train_sft(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let ws = open(cfg)?;
    let data: Vec<DatasetRecord> = ws.read_records(art::SFT_DATA, SCHEMA_SFT_DATA)?;
    let out = run_sft(cfg, &data)?;
    let p = ws.write_ckpt(art::SFT_CKPT, &out.checkpoint)?;
    ws.write_csv(art::SFT_LOSS, &loss_log_csv(&out.log))?;
    let last = out.log.last().map_or(f64::NAN, |e| e.loss);
    println!("wrote {} ({} steps, final batch loss {last:.4})", p.display(), out.log.len());
    Ok(())
}

pub fn sample(cfg: &ExperimentConfig, prompts: usize) -> Result<(), CliError> {
    let ws = open(cfg)?;
    let spec = read_task(&ws)?;
    let sft = ws.read_ckpt(art::SFT_CKPT)?;
    let groups = (0..prompts)
        .map(|i| sample_group(&sft, &spec, cfg, pair_seed(cfg), i))
        .collect::<fpo_core::Result<Vec<CandidateGroup>>>()?;
    let p = ws.write_records(art::SAMPLES, SCHEMA_SAMPLES, &groups)?;
    println!("wrote {} ({prompts} prompts x {} candidates)", p.display(), cfg.sampling.k);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YieldReport {
    pub target: usize,
    #[serde(flatten)]
    pub stats: PairYield,
}

pub fn build_pairs_cmd(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let ws = open(cfg)?;
    let spec = read_task(&ws)?;
    let sft = ws.read_ckpt(art::SFT_CKPT)?;
    let (pairs, stats) = build_pairs(&sft, &spec, cfg, pair_seed(cfg))?;
    let p = ws.write_records(art::PAIRS, SCHEMA_PAIRS, &pairs)?;
    let report = YieldReport {
        target: cfg.sampling.n_pairs,
        stats,
    };
    ws.write_doc(art::PAIR_YIELD, SCHEMA_YIELD, &report)?;
    let s = &report.stats;
    println!(
        "wrote {}: {} pairs from {} prompts ({:.1}% yield), {} degenerate",
        p.display(),
        s.selected,
        s.prompts,
        100.0 * s.selected as f64 / s.prompts.max(1) as f64,
        s.degenerate
    );
    for (kind, n) in &s.loser_span_kinds {
        println!("  loser spans {kind}: {n}");
    }
    Ok(())
}

pub fn train(cfg: &ExperimentConfig, variant: LossVariant) -> Result<(), CliError> {
    let ws = open(cfg)?;
    if !ws.exists(art::SFT_CKPT) {
        return Err(Error::MissingInput(ws.path(art::SFT_CKPT)).into());
    }
    let sft = ws.read_ckpt(art::SFT_CKPT)?;
    let pairs: Vec<PreferencePair> = ws.read_records(art::PAIRS, SCHEMA_PAIRS)?;
    let out = run_preference(cfg, &sft, &pairs, variant, 0)?;
    let name = variant.name();
    let p = ws.write_ckpt(&art::policy_ckpt(name), &out.checkpoint)?;
    ws.write_csv(&art::train_loss(name), &loss_log_csv(&out.log))?;
    println!(
        "wrote {} ({} pairs used, {} skipped, {} steps)",
        p.display(),
        out.used,
        out.skipped,
        out.log.len()
    );
    Ok(())
}

fn load_model(ws: &Workspace, name: &str) -> Result<ModelCheckpoint, CliError> {
    let file = if name == "sft" {
        art::SFT_CKPT.to_string()
    } else {
        art::policy_ckpt(name)
    };
    Ok(ws.read_ckpt(&file)?)
}

pub fn eval(cfg: &ExperimentConfig, models: &[String]) -> Result<(), CliError> {
    let ws = open(cfg)?;
    let spec = read_task(&ws)?;
    let names: Vec<String> = if models.is_empty() {
        MODEL_NAMES
            .iter()
            .filter(|m| **m == "sft" || ws.exists(&art::policy_ckpt(m)))
            .map(|m| m.to_string())
            .collect()
    } else {
        for m in models {
            if !MODEL_NAMES.contains(&m.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown model {m:?}; expected one of {}",
                    MODEL_NAMES.join(", ")
                )));
            }
        }
        models.to_vec()
    };
    let seed = eval_seed(cfg);
    let mut reports = BTreeMap::new();
    for name in &names {
        let ckpt = load_model(&ws, name)?;
        let records = eval_records(&ckpt, &spec, cfg.eval.n_samples, seed, &cfg.eval)?;
        let report = summarize(&records, &cfg.eval, seed);
        ws.write_doc(&art::eval_report(name), SCHEMA_EVAL, &report)?;
        ws.write_csv(&art::eval_records(name), &eval_records_csv(&records))?;
        println!(
            "{name:>22}: bad-case {:.4}  TER {:.4}  score {:.4}",
            report.bad_case_ratio, report.mean_ter, report.mean_score
        );
        reports.insert(name.clone(), report);
    }
    if reports.len() >= 2 && reports.contains_key("sft") {
        let table = compare(&reports, "sft")?;
        let p = ws.write_csv(art::COMPARISON, &table.to_csv())?;
        println!("wrote {}", p.display());
        for r in table.rows.iter().filter(|r| r.method != "sft") {
            if let Some(d) = r.bad_case_delta_pct {
                println!("{:>22}: bad-case {d:+.1}% vs sft", r.method);
            }
        }
    }
    Ok(())
}

pub fn sweep_cmd(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let ws = open(cfg)?;
    let spec = read_task(&ws)?;
    let sft = ws.read_ckpt(art::SFT_CKPT)?;
    let sw = &cfg.sweep;
    let report: SweepReport = sweep(cfg, &spec, &sft, &sw.budgets, &sw.methods, &sw.seeds)?;
    let p = ws.write_doc(art::SWEEP, SCHEMA_SWEEP, &report)?;
    ws.write_csv(art::SWEEP_RUNS, &report.runs_csv())?;
    ws.write_csv(art::SWEEP_CELLS, &report.cells_csv())?;
    println!("wrote {}", p.display());
    for c in &report.cells {
        println!(
            "  budget {:>4} {:>22}: bad-case {:.4} ± {:.4}{}",
            c.budget,
            c.method.name(),
            c.mean_bad_case_ratio,
            c.std_bad_case_ratio,
            if c.partial { " (partial)" } else { "" }
        );
    }
    Ok(())
}

pub fn gradcheck(cfg: &ExperimentConfig, instances: usize, h: f64, coords: usize) -> Result<(), CliError> {
    let ws = open(cfg)?;
    let spec = task_spec(cfg)?;
    let rows: Vec<GradCheckEntry> = gradcheck_suite(cfg, &spec, instances, h, coords)?;
    ws.write_doc(art::GRADCHECK, SCHEMA_GRADCHECK, &rows)?;
    for r in &rows {
        println!(
            "{:<30} max rel error {:.3e} over {} instances  {}",
            r.target,
            r.max_rel_error,
            r.instances,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.target.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}
