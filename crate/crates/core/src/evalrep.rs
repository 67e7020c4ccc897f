//! Evaluation reports, method comparison and data-efficiency sweeps.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotate::locate_errors;
use crate::error::{Error, Result};
use crate::model::{sample, ModelCheckpoint};
use crate::optimloss::LossVariant;
use crate::pipeline::{build_pair_pool, run_preference, EvalSettings, ExperimentConfig, PairYield};
use crate::rng::{derive_seed, rng_for};
use crate::scoring::{metric_intelligibility, score_output, QualityOracle};
use crate::seq::TokenSeq;
use crate::task::{reference_render, ErrorKind, TaskSpec};

/// Anything that maps a condition to an output sequence.
pub trait Generator: Sync {
    /// Output and whether the length limit forced its EOS.
    fn generate(&self, condition: &TokenSeq, settings: &EvalSettings, seed: u64) -> Result<(TokenSeq, bool)>;
}

impl Generator for ModelCheckpoint {
    fn generate(&self, condition: &TokenSeq, settings: &EvalSettings, seed: u64) -> Result<(TokenSeq, bool)> {
        let s = sample(self, condition, settings.temperature, settings.top_k, seed)?;
        Ok((s.output, s.meta.forced_eos))
    }
}

/// Emits the reference render for every text.
pub struct TeacherOracle<'a>(pub &'a TaskSpec);

impl Generator for TeacherOracle<'_> {
    fn generate(&self, condition: &TokenSeq, _: &EvalSettings, _: u64) -> Result<(TokenSeq, bool)> {
        Ok((reference_render(self.0, condition)?, false))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub mean_ter: f64,
    pub bad_cases: usize,
    pub bad_case_ratio: f64,
    pub mean_score: f64,
    pub mean_quality: f64,
    /// Samples with no detected span.
    pub clean: usize,
    /// Samples containing at least one span of each kind.
    pub kind_incidence: BTreeMap<String, usize>,
    pub forced_eos: usize,
    pub settings: EvalSettings,
    pub seed: u64,
}

/// Per-sample outcome, kept for long-format dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub text: TokenSeq,
    pub output: TokenSeq,
    pub ter: f64,
    pub quality: f64,
    pub score: f64,
    pub bad: bool,
    pub forced_eos: bool,
    pub kinds: Vec<ErrorKind>,
}

pub fn is_bad_case(ter: f64, quality: f64, settings: &EvalSettings) -> bool {
    ter > settings.ter_threshold || quality < settings.quality_threshold
}

pub fn eval_records(
    generator: &impl Generator,
    spec: &TaskSpec,
    n: usize,
    seed: u64,
    settings: &EvalSettings,
) -> Result<Vec<EvalRecord>> {
    if n == 0 {
        return Err(Error::Precondition("evaluation needs n >= 1".into()));
    }
    let oracle = QualityOracle::new(spec.silence);
    let weights = Default::default();
    (0..n)
        .into_par_iter()
        .map(|i| {
            let text = spec.sample_text(&mut rng_for(seed, "eval-text", i as u64));
            let reference = reference_render(spec, &text)?;
            let (output, forced_eos) = generator.generate(&text, settings, derive_seed(seed, "eval-gen", i as u64))?;
            let ter = 1.0 - metric_intelligibility(&output, &reference);
            let sc = score_output(&output, &reference, &oracle, &weights)?;
            let mut kinds: Vec<ErrorKind> = locate_errors(&reference, &output, spec.silence)?
                .into_iter()
                .map(|s| s.kind)
                .collect();
            kinds.sort();
            kinds.dedup();
            Ok(EvalRecord {
                text,
                output,
                ter,
                quality: sc.m,
                score: sc.s,
                bad: is_bad_case(ter, sc.m, settings),
                forced_eos,
                kinds,
            })
        })
        .collect()
}

pub fn summarize(records: &[EvalRecord], settings: &EvalSettings, seed: u64) -> EvalReport {
    let n = records.len();
    let nf = n as f64;
    let mut kind_incidence: BTreeMap<String, usize> =
        ErrorKind::ALL.iter().map(|k| (k.name().to_string(), 0)).collect();
    for r in records {
        for k in &r.kinds {
            *kind_incidence.get_mut(k.name()).expect("all kinds present") += 1;
        }
    }
    let bad_cases = records.iter().filter(|r| r.bad).count();
    EvalReport {
        n_samples: n,
        mean_ter: records.iter().map(|r| r.ter).sum::<f64>() / nf,
        bad_cases,
        bad_case_ratio: bad_cases as f64 / nf,
        mean_score: records.iter().map(|r| r.score).sum::<f64>() / nf,
        mean_quality: records.iter().map(|r| r.quality).sum::<f64>() / nf,
        clean: records.iter().filter(|r| r.kinds.is_empty()).count(),
        kind_incidence,
        forced_eos: records.iter().filter(|r| r.forced_eos).count(),
        settings: settings.clone(),
        seed,
    }
}

pub fn eval_generator(
    generator: &impl Generator,
    spec: &TaskSpec,
    n: usize,
    seed: u64,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    Ok(summarize(&eval_records(generator, spec, n, seed, settings)?, settings, seed))
}

/// Samples `n` fresh texts, decodes them with fixed settings and scores the outputs.
pub fn eval_model(
    ckpt: &ModelCheckpoint,
    spec: &TaskSpec,
    n: usize,
    seed: u64,
    settings: &EvalSettings,
) -> Result<EvalReport> {
    eval_generator(ckpt, spec, n, seed, settings)
}

pub const EVAL_RECORDS_HEADER: &str = "index,ter,quality,score,bad,kinds,text,output";

pub fn eval_records_csv(records: &[EvalRecord]) -> String {
    let join = |s: &TokenSeq| s.tokens().iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ");
    let mut out = String::from(EVAL_RECORDS_HEADER);
    out.push('\n');
    for (i, r) in records.iter().enumerate() {
        let kinds: Vec<&str> = r.kinds.iter().map(|k| k.name()).collect();
        out.push_str(&format!(
            "{i},{},{},{},{},{},{},{}\n",
            r.ter,
            r.quality,
            r.score,
            u8::from(r.bad),
            kinds.join(";"),
            join(&r.text),
            join(&r.output)
        ));
    }
    out
}

/// Percentage change of `value` relative to `base`; `None` when the base is
/// zero and the value is not.
pub fn relative_delta(base: f64, value: f64) -> Option<f64> {
    if base == 0.0 {
        (value == 0.0).then_some(0.0)
    } else {
        Some(100.0 * (value - base) / base)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub mean_ter: f64,
    pub bad_case_ratio: f64,
    pub mean_score: f64,
    pub ter_delta_pct: Option<f64>,
    pub bad_case_delta_pct: Option<f64>,
    pub score_delta_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub base: String,
    pub rows: Vec<ComparisonRow>,
}

/// Side-by-side table with deltas against `base`; rows sorted by method name.
pub fn compare(reports: &BTreeMap<String, EvalReport>, base: &str) -> Result<ComparisonTable> {
    if reports.len() < 2 {
        return Err(Error::Precondition("comparison needs >= 2 methods".into()));
    }
    let b = reports
        .get(base)
        .ok_or_else(|| Error::Precondition(format!("base method {base:?} not among reports")))?;
    for (m, r) in reports {
        if r.seed != b.seed || r.n_samples != b.n_samples || r.settings != b.settings {
            return Err(Error::Protocol(format!(
                "method {m:?} was evaluated under a different protocol than {base:?} (seed {} vs {})",
                r.seed, b.seed
            )));
        }
    }
    let rows = reports
        .iter()
        .map(|(m, r)| ComparisonRow {
            method: m.clone(),
            mean_ter: r.mean_ter,
            bad_case_ratio: r.bad_case_ratio,
            mean_score: r.mean_score,
            ter_delta_pct: relative_delta(b.mean_ter, r.mean_ter),
            bad_case_delta_pct: relative_delta(b.bad_case_ratio, r.bad_case_ratio),
            score_delta_pct: relative_delta(b.mean_score, r.mean_score),
        })
        .collect();
    Ok(ComparisonTable {
        base: base.to_string(),
        rows,
    })
}

pub const COMPARISON_HEADER: &str =
    "method,mean_ter,ter_delta_pct,bad_case_ratio,bad_case_delta_pct,mean_score,score_delta_pct";

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let opt = |d: Option<f64>| d.map_or_else(String::new, |v| format!("{v:.4}"));
        let mut s = String::from(COMPARISON_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.method,
                r.mean_ter,
                opt(r.ter_delta_pct),
                r.bad_case_ratio,
                opt(r.bad_case_delta_pct),
                r.mean_score,
                opt(r.score_delta_pct)
            ));
        }
        s
    }
}

/// One `(budget, method, seed)` run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub budget: usize,
    pub method: LossVariant,
    pub seed: u64,
    pub pairs_used: usize,
    pub partial: bool,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub budget: usize,
    pub method: LossVariant,
    pub seeds: usize,
    pub partial: bool,
    pub mean_bad_case_ratio: f64,
    pub std_bad_case_ratio: f64,
    pub mean_ter: f64,
    pub std_ter: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub budgets: Vec<usize>,
    pub methods: Vec<LossVariant>,
    pub seeds: Vec<u64>,
    pub runs: Vec<SweepRun>,
    pub cells: Vec<SweepCell>,
    /// Pair-pool statistics per seed.
    pub pools: Vec<PairYield>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v.sqrt())
}

/// Seed-specific config: the sweep seed replaces the global seed for pair
/// building, training and evaluation.
fn seed_config(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.seed = derive_seed(cfg.seed, "sweep-seed", seed);
    c
}

pub fn eval_seed(cfg: &ExperimentConfig) -> u64 {
    derive_seed(cfg.seed, "eval", 0)
}

/// Trains every `(budget, method, seed)` cell from the shared SFT checkpoint
/// and evaluates it. Budget 0 evaluates the SFT model itself.
pub fn sweep(
    cfg: &ExperimentConfig,
    spec: &TaskSpec,
    sft: &ModelCheckpoint,
    budgets: &[usize],
    methods: &[LossVariant],
    seeds: &[u64],
) -> Result<SweepReport> {
    if seeds.len() < 3 {
        return Err(Error::Precondition(format!("sweep needs >= 3 seeds, got {}", seeds.len())));
    }
    if budgets.is_empty() || budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Precondition("budgets must be non-empty and strictly increasing".into()));
    }
    if methods.is_empty() {
        return Err(Error::Precondition("no methods to sweep".into()));
    }
    let max_budget = *budgets.last().expect("non-empty");
    let pools = seeds
        .iter()
        .map(|&s| {
            let c = seed_config(cfg, s);
            build_pair_pool(sft, spec, &c, derive_seed(c.seed, "pairs", 0), max_budget, cfg.sampling.max_prompts)
        })
        .collect::<Result<Vec<_>>>()?;

    let jobs: Vec<(usize, LossVariant, usize)> = budgets
        .iter()
        .flat_map(|&b| methods.iter().flat_map(move |&m| (0..seeds.len()).map(move |si| (b, m, si))))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(budget, method, si)| {
            let c = seed_config(cfg, seeds[si]);
            let pool = &pools[si].0;
            let used = budget.min(pool.len());
            let model = if budget == 0 {
                sft.clone()
            } else {
                run_preference(&c, sft, &pool[..used], method, budget as u64)?.checkpoint
            };
            let report = eval_model(&model, spec, c.eval.n_samples, eval_seed(&c), &c.eval)?;
            Ok(SweepRun {
                budget,
                method,
                seed: seeds[si],
                pairs_used: used,
                partial: used < budget,
                report,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for &b in budgets {
        for &m in methods {
            let cell: Vec<&SweepRun> = runs.iter().filter(|r| r.budget == b && r.method == m).collect();
            let bad: Vec<f64> = cell.iter().map(|r| r.report.bad_case_ratio).collect();
            let ter: Vec<f64> = cell.iter().map(|r| r.report.mean_ter).collect();
            let (mb, sb) = mean_std(&bad);
            let (mt, st) = mean_std(&ter);
            cells.push(SweepCell {
                budget: b,
                method: m,
                seeds: cell.len(),
                partial: cell.iter().any(|r| r.partial),
                mean_bad_case_ratio: mb,
                std_bad_case_ratio: sb,
                mean_ter: mt,
                std_ter: st,
            });
        }
    }
    Ok(SweepReport {
        budgets: budgets.to_vec(),
        methods: methods.to_vec(),
        seeds: seeds.to_vec(),
        runs,
        cells,
        pools: pools.into_iter().map(|p| p.1).collect(),
    })
}

pub const SWEEP_RUNS_HEADER: &str = "budget,method,seed,pairs_used,partial,bad_case_ratio,mean_ter,mean_score";
pub const SWEEP_CELLS_HEADER: &str =
    "budget,method,seeds,partial,mean_bad_case_ratio,std_bad_case_ratio,mean_ter,std_ter";

impl SweepReport {
    /// Long-format per-run rows.
    pub fn runs_csv(&self) -> String {
        let mut s = String::from(SWEEP_RUNS_HEADER);
        s.push('\n');
        for r in &self.runs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.budget,
                r.method,
                r.seed,
                r.pairs_used,
                u8::from(r.partial),
                r.report.bad_case_ratio,
                r.report.mean_ter,
                r.report.mean_score
            ));
        }
        s
    }

    pub fn cells_csv(&self) -> String {
        let mut s = String::from(SWEEP_CELLS_HEADER);
        s.push('\n');
        for c in &self.cells {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.budget,
                c.method,
                c.seeds,
                u8::from(c.partial),
                c.mean_bad_case_ratio,
                c.std_bad_case_ratio,
                c.mean_ter,
                c.std_ter
            ));
        }
        s
    }

    pub fn cell(&self, budget: usize, method: LossVariant) -> Option<&SweepCell> {
        self.cells.iter().find(|c| c.budget == budget && c.method == method)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::task::WorldConfig;

    fn spec() -> TaskSpec {
        TaskSpec::generate(&WorldConfig::default(), 4).unwrap()
    }

    fn report(seed: u64, ter: f64, bad: f64, score: f64) -> EvalReport {
        EvalReport {
            n_samples: 10,
            mean_ter: ter,
            bad_cases: (bad * 10.0) as usize,
            bad_case_ratio: bad,
            mean_score: score,
            mean_quality: 1.0,
            clean: 10,
            kind_incidence: BTreeMap::new(),
            forced_eos: 0,
            settings: EvalSettings::default(),
            seed,
        }
    }

    #[test]
    fn teacher_oracle_is_perfect() {
        let s = spec();
        let r = eval_generator(&TeacherOracle(&s), &s, 200, 1, &EvalSettings::default()).unwrap();
        assert_eq!(r.mean_ter, 0.0);
        assert_eq!(r.bad_case_ratio, 0.0);
        assert_eq!(r.clean, 200);
        assert!((r.mean_score - 1.0).abs() < 1e-12);
    }

    struct Scripted(Vec<bool>);

    impl Generator for Scripted {
        fn generate(&self, c: &TokenSeq, _: &EvalSettings, seed: u64) -> Result<(TokenSeq, bool)> {
            // the index is recovered from the per-sample seed
            let i = (0..self.0.len())
                .find(|&i| derive_seed(0, "eval-gen", i as u64) == seed)
                .unwrap();
            let spec = TaskSpec::generate(&WorldConfig::default(), 4).unwrap();
            let clean = reference_render(&spec, c)?;
            Ok((if self.0[i] { TokenSeq::new(vec![crate::seq::EOS]) } else { clean }, false))
        }
    }

    #[test]
    fn bad_case_counting() {
        let s = spec();
        let mut script = vec![false; 10];
        script[3] = true;
        script[7] = true;
        let r = eval_generator(&Scripted(script), &s, 10, 0, &EvalSettings::default()).unwrap();
        assert_eq!(r.bad_cases, 2);
        assert!((r.bad_case_ratio - 0.2).abs() < 1e-15);
        assert_eq!(r.clean, 8);
        assert_eq!(r.kind_incidence["truncation"], 2);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let s = spec();
        let cfg = crate::model::ModelConfig {
            hidden_dim: 8,
            ..Default::default()
        };
        let ck = crate::model::init_model(&cfg, 2).unwrap();
        let st = EvalSettings::default();
        let a = eval_records(&ck, &s, 50, 7, &st).unwrap();
        let b = eval_records(&ck, &s, 50, 7, &st).unwrap();
        assert_eq!(eval_records_csv(&a), eval_records_csv(&b));
        assert_eq!(summarize(&a, &st, 7), summarize(&b, &st, 7));
        assert!(eval_records(&ck, &s, 0, 7, &st).is_err());
    }

    #[test]
    fn threshold_monotonicity() {
        let s = spec();
        let cfg = crate::model::ModelConfig {
            hidden_dim: 8,
            ..Default::default()
        };
        let ck = crate::model::init_model(&cfg, 3).unwrap();
        let recs = eval_records(&ck, &s, 100, 1, &EvalSettings::default()).unwrap();
        let mut last = f64::INFINITY;
        for t in [0.0, 0.05, 0.2, 0.5, 0.9, 1.0] {
            let st = EvalSettings {
                ter_threshold: t,
                ..Default::default()
            };
            let ratio = recs.iter().filter(|r| is_bad_case(r.ter, r.quality, &st)).count() as f64;
            assert!(ratio <= last);
            last = ratio;
        }
    }

    #[test]
    fn compare_examples() {
        let mut m = BTreeMap::new();
        m.insert("sft".to_string(), report(1, 0.10, 0.2, 0.8));
        m.insert("fpo".to_string(), report(1, 0.05, 0.1, 0.9));
        m.insert("dpo".to_string(), report(1, 0.10, 0.3, 0.8));
        let t = compare(&m, "sft").unwrap();
        let names: Vec<&str> = t.rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(names, vec!["dpo", "fpo", "sft"]);
        assert!((t.rows[1].ter_delta_pct.unwrap() + 50.0).abs() < 1e-9);
        assert_eq!(t.rows[2].ter_delta_pct, Some(0.0));
        assert_eq!(t.rows[2].bad_case_delta_pct, Some(0.0));
        for r in &t.rows {
            let raw = r.bad_case_ratio - 0.2;
            assert_eq!(r.bad_case_delta_pct.unwrap().signum() * raw.abs(), raw.signum() * raw.abs());
        }
        assert_eq!(t.to_csv(), compare(&m, "sft").unwrap().to_csv());
        m.insert("odd".to_string(), report(2, 0.1, 0.1, 0.1));
        assert!(matches!(compare(&m, "sft"), Err(Error::Protocol(_))));
    }

    #[test]
    fn zero_base_delta() {
        assert_eq!(relative_delta(0.0, 0.0), Some(0.0));
        assert_eq!(relative_delta(0.0, 0.1), None);
        assert!((relative_delta(0.2, 0.1).unwrap() + 50.0).abs() < 1e-12);
    }
}
