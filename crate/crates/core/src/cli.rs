//! Command-line surface: one subcommand per experiment stage.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::cohort::{sha256_hex, Cohort, MANIFEST_FILE};
use crate::config::RunConfig;
use crate::distill::{
    label_efficiency_experiment, template_samples, train_student, write_efficiency_csv, TeacherGrounder,
};
use crate::error::{Error, Result};
use crate::eval::{
    eval_consistency, eval_dice, eval_retrieval, gold_reports, permutation_baseline_map, rankings,
    read_report_dir, ConsistencyTable,
};
use crate::gradsuite::run_gradient_suite;
use crate::grpo::{greedy_reports, train_rft, write_rft_csv, ReportPolicy};
use crate::numeric::write_tensor;
use crate::optim::Parameterized;
use crate::pretrain::{pairs_from_cohort, pretrain, write_pretrain_csv};
use crate::rules::{score_text, LexicalScorer, RuleConfig};
use crate::sea::{train_mask_decoder, train_sea, SeaModel, SegDecoder};
use crate::textenc::Embedder;

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_IO: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "emad", version, about = "Evidence-grounded diagnostic reporting experiments")]
pub struct Cli {
    /// JSON run configuration (a previous run.json is accepted).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Global seed; overrides every module seed.
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<u64>,
    /// Output directory; overrides paths.outputs.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Write the synthetic cohort and its manifest.
    GenerateCohort,
    /// Image-text pretraining on the training split.
    Pretrain,
    /// Train the sentence-evidence aligner and mask decoder.
    TrainSea,
    /// Distill the trained grounder into a fresh student.
    Distill,
    /// Teacher vs student R@3 across label fractions.
    LabelEfficiency(LabelEfficiencyArgs),
    /// Group-relative policy optimization of the report policy.
    TrainGrpo,
    /// Score one report against one patient; prints the reward breakdown.
    ScoreReport(ScoreReportArgs),
    /// Retrieval and Dice metrics of the trained grounder.
    EvalGrounding(SplitArgs),
    /// Accuracy, format, guideline and entailment rates of a report set.
    EvalConsistency(EvalConsistencyArgs),
    /// Finite-difference checks of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct LabelEfficiencyArgs {
    /// Comma-separated label fractions; overrides the config.
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreReportArgs {
    /// Report text file.
    #[arg(long, value_name = "PATH")]
    pub report: PathBuf,
    /// Patient id in the cohort.
    #[arg(long, value_name = "ID")]
    pub patient: String,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitPart,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalConsistencyArgs {
    /// Policy checkpoint directory; greedy reports are scored.
    #[arg(long, value_name = "DIR", conflicts_with = "reports")]
    pub policy: Option<PathBuf>,
    /// Directory of `<patient_id>.txt` reports; gold reports when neither is given.
    #[arg(long, value_name = "DIR")]
    pub reports: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitPart,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    /// Random instances per loss; overrides the config.
    #[arg(long)]
    pub seeds: Option<usize>,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenerateCohort => "generate-cohort",
            Command::Pretrain => "pretrain",
            Command::TrainSea => "train-sea",
            Command::Distill => "distill",
            Command::LabelEfficiency(_) => "label-efficiency",
            Command::TrainGrpo => "train-grpo",
            Command::ScoreReport(_) => "score-report",
            Command::EvalGrounding(_) => "eval-grounding",
            Command::EvalConsistency(_) => "eval-consistency",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

/// Files written under the output directory, plus the metric rows.
struct RunOutputs {
    out: PathBuf,
    files: Vec<PathBuf>,
    metrics: Vec<(String, f64)>,
}

impl RunOutputs {
    fn new(out: &Path) -> Result<Self> {
        fs::create_dir_all(out)?;
        Ok(Self {
            out: out.to_path_buf(),
            files: Vec::new(),
            metrics: Vec::new(),
        })
    }

    fn path(&mut self, rel: &str) -> PathBuf {
        let p = self.out.join(rel);
        self.files.push(p.clone());
        p
    }

    fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.push((name.into(), value));
    }

    fn consistency(&mut self, prefix: &str, t: &ConsistencyTable) {
        self.metric(format!("{prefix}accuracy"), t.accuracy);
        self.metric(format!("{prefix}valid_format"), t.valid_format);
        self.metric(format!("{prefix}nia_consistency"), t.nia_consistency);
        self.metric(format!("{prefix}entailment"), t.entailment);
        self.metric(format!("{prefix}reports"), t.reports as f64);
    }

    fn finish(mut self, command: &Command, cfg: &RunConfig) -> Result<()> {
        let metrics_path = self.path("metrics.csv");
        let mut w = csv::Writer::from_path(&metrics_path)?;
        w.write_record(["metric", "value"])?;
        for (k, v) in &self.metrics {
            w.write_record([k.as_str(), &v.to_string()])?;
        }
        w.flush()?;
        let mut hashes = BTreeMap::new();
        for f in &self.files {
            let rel = f.strip_prefix(&self.out).unwrap_or(f).to_string_lossy().replace('\\', "/");
            hashes.insert(rel, sha256_hex(&fs::read(f)?));
        }
        let run = serde_json::json!({
            "command": command.name(),
            "args": command,
            "config": cfg,
            "version": env!("CARGO_PKG_VERSION"),
            "outputs": hashes,
        });
        fs::write(self.out.join("run.json"), serde_json::to_string_pretty(&run)?)?;
        Ok(())
    }
}

/// Parses `argv` and runs the subcommand; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_io() {
                EXIT_IO
            } else {
                EXIT_VALIDATION
            }
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.apply_seed(s);
    }
    if let Some(o) = &cli.out {
        cfg.paths.outputs = o.clone();
    }
    Ok(cfg)
}

/// Rules for `score-report`: a run config, or a bare rule config file.
fn load_score_config(cli: &Cli) -> Result<RunConfig> {
    match load_config(cli) {
        Err(Error::Json(_)) => {
            let path = cli.config.as_deref().expect("json errors come from a config file");
            let mut cfg = RunConfig {
                rules: RuleConfig::load(path)?,
                ..RunConfig::default()
            };
            cfg.policy.thresholds = cfg.rules.thresholds;
            if let Some(s) = cli.seed {
                cfg.apply_seed(s);
            }
            if let Some(o) = &cli.out {
                cfg.paths.outputs = o.clone();
            }
            Ok(cfg)
        }
        other => other,
    }
}

/// The cohort on disk, or the configured cohort generated in memory when its
/// directory has not been written.
fn load_cohort(cfg: &RunConfig) -> Result<Cohort> {
    let dir = cfg.cohort_dir();
    if dir.join(MANIFEST_FILE).exists() {
        Cohort::load(&dir)
    } else {
        eprintln!("cohort directory {} not found; generating in memory", dir.display());
        Cohort::generate(&cfg.cohort)
    }
}

fn split_indices(c: &Cohort, part: SplitPart) -> Vec<usize> {
    match part {
        SplitPart::Train => c.train_indices(),
        SplitPart::Val => c.val_indices(),
        SplitPart::Test => c.test_indices(),
        SplitPart::All => (0..c.len()).collect(),
    }
}

fn sea_dir(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint_dir().join("sea")
}

fn load_sea(cfg: &RunConfig) -> Result<SeaModel> {
    let dir = sea_dir(cfg);
    RunConfig::require(&dir)?;
    Ok(SeaModel {
        embedder: Embedder::load(&dir, "embedder")?,
        decoder: SegDecoder::load(&dir.join("decoder"))?,
        history: Vec::new(),
    })
}

fn run(cli: Cli) -> Result<i32> {
    let cfg = match &cli.command {
        Command::ScoreReport(_) => load_score_config(&cli)?,
        _ => load_config(&cli)?,
    };
    cfg.validate()?;
    let mut out = RunOutputs::new(cfg.outputs())?;
    let scorer = LexicalScorer::new(cfg.rules.lexicons.clone());
    let mut code = EXIT_OK;
    match &cli.command {
        Command::GenerateCohort => {
            let cohort = Cohort::generate(&cfg.cohort)?;
            let dir = cfg.cohort_dir();
            let manifest = cohort.write(&dir)?;
            out.metric("n_patients", cohort.len() as f64);
            out.metric("n_train", cohort.split.train.len() as f64);
            out.metric("n_val", cohort.split.val.len() as f64);
            out.metric("n_test", cohort.split.test.len() as f64);
            out.metric("files", manifest.files.len() as f64);
            eprintln!("wrote {} patients to {}", cohort.len(), dir.display());
        }
        Command::Pretrain => {
            let cohort = load_cohort(&cfg)?;
            let pairs = pairs_from_cohort(&cohort, &cohort.train_indices());
            let result = pretrain(&pairs, &cfg.pretrain)?;
            write_pretrain_csv(&out.path("pretrain_log.csv"), &result.log)?;
            let dir = cfg.checkpoint_dir().join("pretrain");
            fs::create_dir_all(&dir)?;
            for (name, t) in result.model.parameters() {
                write_tensor(&dir.join(format!("{name}.emad")), t)?;
            }
            if let (Some(first), Some(last)) = (result.log.first(), result.log.last()) {
                out.metric("l_pt_first", first.l_pt);
                out.metric("l_pt_last", last.l_pt);
                out.metric("l_itc_last", last.l_itc);
                out.metric("l_res_v_last", last.l_res_v);
                out.metric("l_res_t_last", last.l_res_t);
            }
        }
        Command::TrainSea => {
            let cohort = load_cohort(&cfg)?;
            let train = cohort.train_indices();
            let test = cohort.test_indices();
            let model = train_sea(&cohort, &train, &cfg.sea)?;
            let dir = sea_dir(&cfg);
            model.embedder.save(&dir, "embedder")?;
            model.decoder.save(&dir.join("decoder"))?;
            let mut w = csv::Writer::from_path(out.path("sea_log.csv"))?;
            for row in &model.history {
                w.serialize(row)?;
            }
            w.flush()?;
            let r = eval_retrieval(&model.embedder, &cohort, &test)?;
            let dice = eval_dice(&model.decoder, &model.embedder, &cohort, &test)?;
            let mut base_cfg = cfg.sea;
            base_cfg.decoder.cross_attention = false;
            let (baseline, _) = train_mask_decoder(&cohort, &train, &model.embedder, &base_cfg)?;
            let base = eval_dice(&baseline, &model.embedder, &cohort, &test)?;
            out.metric("r1", r.r1);
            out.metric("r3", r.r3);
            out.metric("map", r.map);
            for (s, d) in &dice.per_structure {
                out.metric(format!("dice_{s}"), *d);
            }
            out.metric("dice_overall", dice.overall);
            for (s, d) in &base.per_structure {
                out.metric(format!("dice_baseline_{s}"), *d);
            }
            out.metric("dice_baseline_overall", base.overall);
            eprintln!("R@3 {:.3} MAP {:.3} Dice {:.3} (baseline {:.3})", r.r3, r.map, dice.overall, base.overall);
        }
        Command::Distill => {
            let cohort = load_cohort(&cfg)?;
            let teacher = TeacherGrounder::from_sea(load_sea(&cfg)?, cfg.sea.tau);
            let samples = template_samples(&cohort, &cohort.train_indices());
            let student = train_student(&samples, &teacher, &cfg.distill)?;
            student.embedder.save(&cfg.checkpoint_dir().join("student"), "embedder")?;
            let mut w = csv::Writer::from_path(out.path("distill_log.csv"))?;
            w.write_record(["epoch", "objective"])?;
            for (e, v) in student.history.iter().enumerate() {
                w.write_record([e.to_string(), v.to_string()])?;
            }
            w.flush()?;
            let test = cohort.test_indices();
            let t = eval_retrieval(teacher.embedder(), &cohort, &test)?.r3;
            let s = eval_retrieval(&student.embedder, &cohort, &test)?.r3;
            out.metric("teacher_r3", t);
            out.metric("student_r3", s);
            out.metric("ratio", if t > 0.0 { s / t } else { 0.0 });
        }
        Command::LabelEfficiency(args) => {
            let cohort = load_cohort(&cfg)?;
            let fractions = args.fractions.clone().unwrap_or_else(|| cfg.label_efficiency.fractions.clone());
            if fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) || fractions.is_empty() {
                return Err(Error::Config("--fractions must lie in (0, 1]".into()));
            }
            let rows = label_efficiency_experiment(&cohort, &fractions, &cfg.label_efficiency.experiment())?;
            write_efficiency_csv(&out.path("label_efficiency.csv"), &rows)?;
            for r in &rows {
                out.metric(format!("teacher_r3@{}", r.fraction), r.teacher_r3);
                out.metric(format!("student_r3@{}", r.fraction), r.student_r3);
                out.metric(format!("ratio@{}", r.fraction), r.ratio);
            }
        }
        Command::TrainGrpo => {
            let cohort = load_cohort(&cfg)?;
            let init = ReportPolicy::new(cfg.policy)?;
            let result = train_rft(init.clone(), &cohort, &cohort.train_indices(), &cfg.rules, &scorer, &cfg.grpo)?;
            write_rft_csv(&out.path("rft_log.csv"), &result.log)?;
            result.policy.save(&cfg.checkpoint_dir().join("policy"))?;
            let test = cohort.test_indices();
            let nia = cfg.eval.nia_threshold;
            let pre = eval_consistency(&greedy_reports(&init, &cohort, &test), &cohort, &cfg.rules, &scorer, nia);
            let post = eval_consistency(&greedy_reports(&result.policy, &cohort, &test), &cohort, &cfg.rules, &scorer, nia);
            let tail = &result.log[result.log.len().saturating_sub(20)..];
            let w = &cfg.rules.weights;
            out.metric("gold_max", w.format + w.nia + w.consistency);
            if let Some(first) = result.log.first() {
                out.metric("reward_first", first.mean_reward);
            }
            out.metric("reward_last20", tail.iter().map(|l| l.mean_reward).sum::<f64>() / tail.len().max(1) as f64);
            out.consistency("pre_", &pre);
            out.consistency("post_", &post);
        }
        Command::ScoreReport(args) => {
            let text = fs::read_to_string(&args.report)?;
            let cohort = load_cohort(&cfg)?;
            let patient = cohort
                .patient(&args.patient)
                .ok_or_else(|| Error::Config(format!("unknown patient `{}`", args.patient)))?;
            let b = score_text(&text, &patient.record, &cfg.rules, &scorer);
            println!("{}", serde_json::to_string_pretty(&b)?);
            out.metric("r_format", b.r_format);
            out.metric("r_cat", b.r_cat);
            out.metric("r_bio", b.r_bio);
            out.metric("r_feat", b.r_feat);
            out.metric("r_nia", b.r_nia);
            out.metric("r_consistency", b.r_consistency);
            out.metric("total", b.total);
        }
        Command::EvalGrounding(args) => {
            let cohort = load_cohort(&cfg)?;
            let model = load_sea(&cfg)?;
            let idx = split_indices(&cohort, args.split);
            let (ranked, golds) = rankings(&model.embedder, &cohort, &idx)?;
            let r = crate::eval::retrieval_metrics(&ranked, &golds)?;
            let chance = permutation_baseline_map(&ranked, &golds, cfg.eval.chance_rounds, cfg.gradcheck.base_seed)?;
            let dice = eval_dice(&model.decoder, &model.embedder, &cohort, &idx)?;
            let mut w = csv::Writer::from_path(out.path("grounding.csv"))?;
            w.write_record(["structure", "dice"])?;
            for (s, d) in &dice.per_structure {
                w.write_record([s.as_str(), &d.to_string()])?;
            }
            w.write_record(["overall", &dice.overall.to_string()])?;
            w.flush()?;
            out.metric("r1", r.r1);
            out.metric("r3", r.r3);
            out.metric("map", r.map);
            out.metric("chance_map", chance);
            out.metric("queries", r.queries as f64);
            out.metric("dice_overall", dice.overall);
        }
        Command::EvalConsistency(args) => {
            let cohort = load_cohort(&cfg)?;
            let idx = split_indices(&cohort, args.split);
            let reports = match (&args.policy, &args.reports) {
                (Some(p), _) => greedy_reports(&ReportPolicy::load(p)?, &cohort, &idx),
                (None, Some(d)) => {
                    RunConfig::require(d)?;
                    let keep: std::collections::BTreeSet<&str> =
                        idx.iter().map(|&i| cohort.patients[i].record.id.as_str()).collect();
                    read_report_dir(d)?.into_iter().filter(|(id, _)| keep.contains(id.as_str())).collect()
                }
                (None, None) => gold_reports(&cohort, &idx),
            };
            let t = eval_consistency(&reports, &cohort, &cfg.rules, &scorer, cfg.eval.nia_threshold);
            out.consistency("", &t);
        }
        Command::Gradcheck(args) => {
            let seeds = args.seeds.unwrap_or(cfg.gradcheck.seeds);
            if seeds == 0 {
                return Err(Error::Config("--seeds must be positive".into()));
            }
            let results = run_gradient_suite(seeds, cfg.gradcheck.base_seed);
            let mut w = csv::Writer::from_path(out.path("gradcheck.csv"))?;
            w.write_record(["loss", "seeds", "max_rel_err", "worst_seed", "passed"])?;
            for r in &results {
                w.write_record([
                    r.name.clone(),
                    r.seeds.to_string(),
                    r.max_rel_err.to_string(),
                    r.worst_seed.to_string(),
                    r.passed.to_string(),
                ])?;
                out.metric(format!("{}_max_rel_err", r.name), r.max_rel_err);
                eprintln!("{} {:<24} max rel err {:.3e}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.max_rel_err);
            }
            w.flush()?;
            if results.iter().any(|r| !r.passed) {
                code = EXIT_VALIDATION;
            }
        }
    }
    out.finish(&cli.command, &cfg)?;
    Ok(code)
}
