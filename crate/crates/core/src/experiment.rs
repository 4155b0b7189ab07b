//! End-to-end runs: configuration, stage execution and report emission.
//!
//! Every stage reads its inputs from and writes its outputs to a run
//! directory named after the hash of the canonical configuration, so stages
//! can be rerun individually. All randomness derives from the global seed
//! through stage-named substreams.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::base::{init_base_model, loss_gradients, train_base, BaseTrainConfig, EpochRecord, EDITABLE};
use crate::baselines::{constrained_finetune_edit, finetune_edit, grid_search, FinetuneConfig, Scope, ZHU_GRID};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{build_dataset, generate_world, Dataset, Example, Split, TaskKind};
use crate::editor::{edit_once, edit_with_loop, EditorConfig, EditorParams};
use crate::error::{Error, Result};
use crate::eval::{dirichlet_compare, full_report, update_cosine, update_magnitude_map, EvalConfig, MetricsReport};
use crate::params::{ParamSet, TensorMap};
use crate::requests::{build_edit_requests, EditRequest};
use crate::rng::substream_seed;
use crate::trainer::{
    history_csv, train_editor, ConstraintKind, MarginSchedule, MultiplierForm, Norm, OptimizerKind, TrainConfig,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_entities: usize,
    pub n_relations: usize,
    pub n_answers: usize,
    pub templates_per_relation: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// `seed` is replaced by the `train-base` substream.
    pub train: BaseTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditorDims {
    pub embed_dim: usize,
    pub hidden: usize,
    pub cond_dim: usize,
    pub head_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    /// Shared by both fine-tuning baselines; `scope` is set per method.
    pub finetune: FinetuneConfig,
    pub zhu_grid: Vec<f64>,
    /// Validation requests scored per grid point.
    pub zhu_select_requests: usize,
    /// Matrix used by the single-matrix baselines.
    pub single_matrix: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub retain_subsample: Option<usize>,
    /// Cap on evaluated test requests; `None` evaluates all.
    pub max_test_requests: Option<usize>,
    pub loop_max_iter: usize,
    pub dirichlet_samples: usize,
    pub analysis_requests: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    pub world: WorldConfig,
    pub base: BaseConfig,
    pub editor: EditorDims,
    /// KL-constrained editor training; `seed`, `constraint` and
    /// `use_paraphrases` are set per variant.
    pub train: TrainConfig,
    /// Margin schedule of the L2-constrained variant.
    pub l2_margin: MarginSchedule,
    pub baselines: BaselineConfig,
    pub eval: EvalSettings,
    pub seed: u64,
    /// Parent of the run directory; not part of the run hash.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// QA world of 2000 facts with 32 answers.
    pub fn desk() -> Self {
        Self {
            task: TaskKind::Qa,
            world: WorldConfig {
                n_entities: 500,
                n_relations: 4,
                n_answers: 32,
                templates_per_relation: 3,
            },
            base: BaseConfig {
                embed_dim: 32,
                hidden_dim: 64,
                train: BaseTrainConfig {
                    lr: 0.1,
                    batch: 32,
                    max_epochs: 100,
                    momentum: 0.9,
                    seed: 0,
                    stop_at_train_accuracy: Some(1.0),
                },
            },
            editor: EditorDims {
                embed_dim: 32,
                hidden: 32,
                cond_dim: 64,
                head_hidden: 32,
            },
            train: TrainConfig {
                lr_phi: 1e-2,
                lr_lambda: 1e-1,
                max_steps: 4000,
                val_every: 50,
                margin: MarginSchedule::new(2e-2, 1e-4),
                multiplier: MultiplierForm::Relative,
                ..TrainConfig::default()
            },
            l2_margin: MarginSchedule::new(1.0, 1e-2),
            baselines: BaselineConfig {
                finetune: FinetuneConfig {
                    lr: 3e-2,
                    ..FinetuneConfig::default()
                },
                zhu_grid: ZHU_GRID.to_vec(),
                zhu_select_requests: 64,
                single_matrix: "W1".into(),
            },
            eval: EvalSettings {
                retain_subsample: Some(256),
                max_test_requests: None,
                loop_max_iter: 5,
                dirichlet_samples: 1000,
                analysis_requests: 100,
            },
            seed: 0,
            out_dir: None,
        }
    }

    /// 64-fact world that runs end to end in seconds.
    pub fn smoke() -> Self {
        let mut c = Self::desk();
        c.world = WorldConfig {
            n_entities: 16,
            n_relations: 4,
            n_answers: 8,
            templates_per_relation: 3,
        };
        c.base.embed_dim = 16;
        c.base.hidden_dim = 32;
        c.editor = EditorDims {
            embed_dim: 8,
            hidden: 8,
            cond_dim: 16,
            head_hidden: 8,
        };
        c.train.max_steps = 300;
        c.train.val_every = 20;
        c.train.batch = 8;
        c.train.lr_phi = 3e-3;
        c.train.optimizer = OptimizerKind::adam();
        c.baselines.zhu_select_requests = 8;
        c.eval.retain_subsample = Some(64);
        c.eval.analysis_requests = 8;
        c.eval.dirichlet_samples = 200;
        c
    }

    /// Canonical JSON with the output directory removed.
    pub fn canonical_json(&self) -> Result<String> {
        let mut c = self.clone();
        c.out_dir = None;
        Ok(serde_json::to_string_pretty(&c)?)
    }

    pub fn run_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    pub fn run_dir(&self, out: &Path) -> Result<PathBuf> {
        Ok(out.join(format!("run-{}", &self.run_hash()?[..16])))
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        substream_seed(self.seed, stage)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    TrainBase,
    BuildRequests,
    TrainEditor,
    Evaluate,
    Compare,
    Analyze,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::TrainBase,
        Stage::BuildRequests,
        Stage::TrainEditor,
        Stage::Evaluate,
        Stage::Compare,
        Stage::Analyze,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::TrainBase => "train-base",
            Stage::BuildRequests => "build-requests",
            Stage::TrainEditor => "train-editor",
            Stage::Evaluate => "evaluate",
            Stage::Compare => "compare",
            Stage::Analyze => "analyze",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage {s:?}")))
    }
}

/// Editor variants trained by the `train-editor` stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    /// KL constraint, `P^x = {x}`.
    Kl,
    /// KL constraint with paraphrase supervision.
    KlParaphrase,
    /// L2 constraint, `P^x = {x}`.
    L2,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Kl, Variant::KlParaphrase, Variant::L2];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Kl => "kl",
            Variant::KlParaphrase => "kl_px",
            Variant::L2 => "l2",
        }
    }

    fn train_config(self, cfg: &ExperimentConfig) -> TrainConfig {
        let mut t = cfg.train.clone();
        t.seed = cfg.stage_seed(&format!("train-editor/{}", self.name()));
        match self {
            Variant::Kl => {
                t.constraint = ConstraintKind::Kl;
                t.use_paraphrases = false;
            }
            Variant::KlParaphrase => {
                t.constraint = ConstraintKind::Kl;
                t.use_paraphrases = true;
            }
            Variant::L2 => {
                t.constraint = ConstraintKind::L2;
                t.use_paraphrases = false;
                t.margin = cfg.l2_margin;
            }
        }
        t
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown editor variant {s:?}")))
    }
}

/// Evaluated methods, in report order.
pub const METHODS: [&str; 9] = [
    "editor",
    "editor+loop",
    "editor+px",
    "editor+px+loop",
    "editor-l2",
    "finetune-all",
    "finetune-single",
    "zhu-all",
    "zhu-single",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestSets {
    pub train: Vec<EditRequest>,
    pub validation: Vec<EditRequest>,
    pub test: Vec<EditRequest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EditorSummary {
    pub variant: String,
    pub config: EditorConfig,
    pub train: TrainConfig,
    pub best_step: usize,
    pub best_margin: f64,
    pub best_score: f64,
    pub final_lambda: f64,
    pub final_margin: f64,
    pub theta_fingerprint_before: String,
    pub theta_fingerprint_after: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZhuSelection {
    pub scope: String,
    pub best_radius: f64,
    /// `(radius, success + retain)` per grid point.
    pub scores: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonMatrix {
    pub methods: Vec<String>,
    pub samples: usize,
    /// `p[i][j]`: probability that method `i` beats method `j`.
    pub p: Vec<Vec<f64>>,
}

/// A run directory bound to its configuration.
pub struct Run {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write(path, s)
}

fn read_json<D: DeserializeOwned>(path: &Path) -> Result<D> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&s)?)
}

fn stage_err(stage: Stage) -> impl FnOnce(Error) -> Error {
    move |e| Error::Stage {
        stage: stage.name().to_string(),
        source: Box::new(e),
    }
}

impl Run {
    /// Creates the run directory and writes the canonical configuration.
    pub fn create(config: ExperimentConfig, out: &Path) -> Result<Self> {
        let dir = config.run_dir(out)?;
        fs::create_dir_all(dir.join("reports")).map_err(|e| Error::io(&dir, e))?;
        let mut json = config.canonical_json()?;
        json.push('\n');
        write(&dir.join("config.json"), json)?;
        Ok(Self { config, dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn dataset(&self) -> Result<Dataset> {
        read_json(&self.path("dataset.json"))
    }

    pub fn base(&self) -> Result<ParamSet> {
        let t = load_checkpoint(&self.path("base.kelb"))?;
        ParamSet::new(t, EDITABLE.iter().map(|s| s.to_string()).collect())
    }

    pub fn requests(&self) -> Result<RequestSets> {
        read_json(&self.path("requests.json"))
    }

    pub fn editor(&self, variant: Variant) -> Result<EditorParams> {
        let summary: EditorSummary = read_json(&self.path(&format!("editor_{}.json", variant.name())))?;
        let t = load_checkpoint(&self.path(&format!("editor_{}.kelb", variant.name())))?;
        EditorParams::from_tensors(summary.config, t)
    }

    pub fn editor_summary(&self, variant: Variant) -> Result<EditorSummary> {
        read_json(&self.path(&format!("editor_{}.json", variant.name())))
    }

    pub fn report(&self, method: &str) -> Result<MetricsReport> {
        read_json(&self.path(&format!("reports/{method}.json")))
    }

    pub fn run_stage(&self, stage: Stage) -> Result<()> {
        log::info!("stage {}", stage.name());
        let r = match stage {
            Stage::GenData => self.gen_data(),
            Stage::TrainBase => self.train_base(),
            Stage::BuildRequests => self.build_requests(),
            Stage::TrainEditor => Variant::ALL.into_iter().try_for_each(|v| self.train_editor(v)),
            Stage::Evaluate => self.evaluate(),
            Stage::Compare => self.compare(),
            Stage::Analyze => self.analyze(),
        };
        r.map_err(stage_err(stage))
    }

    fn gen_data(&self) -> Result<()> {
        let c = &self.config;
        let w = &c.world;
        let world = generate_world(
            c.stage_seed("gen-data/world"),
            w.n_entities,
            w.n_relations,
            w.n_answers,
            w.templates_per_relation,
        )?;
        let ds = build_dataset(world, c.task, c.stage_seed("gen-data/dataset"))?;
        write_json(&self.path("dataset.json"), &ds)
    }

    fn train_base(&self) -> Result<()> {
        let c = &self.config;
        let ds = self.dataset()?;
        let theta0 = init_base_model::<f32>(
            c.base.embed_dim,
            c.base.hidden_dim,
            ds.n_classes(),
            ds.vocab_size(),
            c.stage_seed("train-base/init"),
        )?;
        let all: Vec<&Example> = ds.examples.iter().collect();
        let val = ds.subset(Split::Validation);
        let cfg = BaseTrainConfig {
            seed: c.stage_seed("train-base/order"),
            ..c.base.train.clone()
        };
        let (theta, history) = train_base(&theta0, &all, &val, &cfg)?;
        save_checkpoint(&self.path("base.kelb"), theta.tensors())?;
        write(&self.path("base_history.csv"), base_history_csv(&history))
    }

    fn build_requests(&self) -> Result<()> {
        let ds = self.dataset()?;
        let theta = self.base()?;
        let seed = |s: &str| self.config.stage_seed(&format!("build-requests/{s}"));
        let sets = RequestSets {
            train: build_edit_requests(&theta, &ds, Split::Train, seed("train"))?,
            validation: build_edit_requests(&theta, &ds, Split::Validation, seed("validation"))?,
            test: build_edit_requests(&theta, &ds, Split::Test, seed("test"))?,
        };
        write_json(&self.path("requests.json"), &sets)
    }

    pub fn train_editor(&self, variant: Variant) -> Result<()> {
        let c = &self.config;
        let ds = self.dataset()?;
        let theta = self.base()?;
        let reqs = self.requests()?;
        let ecfg = EditorConfig {
            vocab: ds.vocab_size(),
            embed_dim: c.editor.embed_dim,
            hidden: c.editor.hidden,
            cond_dim: c.editor.cond_dim,
            head_hidden: c.editor.head_hidden,
            targets: EditorConfig::targets_of(&theta)?,
            sep_token: ds.world.sep(),
            class_tokens: ds.class_tokens()?,
        };
        let phi0 = EditorParams::<f32>::init(ecfg.clone(), c.stage_seed(&format!("editor-init/{}", variant.name())))?;
        let tcfg = variant.train_config(c);
        let before = theta.fingerprint();
        let train_pool = ds.subset(Split::Train);
        let val_pool = ds.subset(Split::Validation);
        let name = variant.name();
        let out = match train_editor(&phi0, &reqs.train, &reqs.validation, &theta, &train_pool, &val_pool, &tcfg) {
            Ok(out) => out,
            Err(failure) => {
                save_checkpoint(&self.path(&format!("editor_{name}.last_good.kelb")), failure.last_good.tensors())?;
                write(&self.path(&format!("history_{name}.csv")), history_csv(&failure.history))?;
                return Err(failure.into());
            }
        };
        let after = theta.fingerprint();
        save_checkpoint(&self.path(&format!("editor_{name}.kelb")), out.phi.tensors())?;
        write(&self.path(&format!("history_{name}.csv")), history_csv(&out.history))?;
        write_json(
            &self.path(&format!("editor_{name}.json")),
            &EditorSummary {
                variant: name.to_string(),
                config: ecfg,
                train: tcfg,
                best_step: out.best_step,
                best_margin: out.best_margin,
                best_score: out.best_score,
                final_lambda: out.final_state.lambda,
                final_margin: out.final_state.margin,
                theta_fingerprint_before: before,
                theta_fingerprint_after: after,
            },
        )
    }

    fn test_requests(&self, reqs: &RequestSets) -> Vec<EditRequest> {
        let n = self.config.eval.max_test_requests.unwrap_or(usize::MAX);
        reqs.test.iter().take(n).cloned().collect()
    }

    fn finetune_config(&self, scope: Scope) -> FinetuneConfig {
        FinetuneConfig {
            scope,
            ..self.config.baselines.finetune.clone()
        }
    }

    fn eval_config(&self, stage: &str) -> EvalConfig {
        EvalConfig {
            retain_subsample: self.config.eval.retain_subsample,
            seed: self.config.stage_seed(stage),
        }
    }

    fn select_zhu(
        &self,
        theta: &ParamSet,
        ds: &Dataset,
        reqs: &RequestSets,
        scope: Scope,
    ) -> Result<ZhuSelection> {
        let val: Vec<EditRequest> = reqs
            .validation
            .iter()
            .take(self.config.baselines.zhu_select_requests)
            .cloned()
            .collect();
        let pool = ds.subset(Split::Validation);
        let ft = self.finetune_config(scope.clone());
        let ecfg = self.eval_config("evaluate/zhu-select");
        let (best, scores) = grid_search(&self.config.baselines.zhu_grid, |m| {
            let edit = |r: &EditRequest| constrained_finetune_edit(theta, r, m, Norm::LInf, &ft, |_, _| {});
            let rep = full_report("zhu", theta, &edit, &val, &pool, &pool, &ecfg)?;
            Ok(rep.success_rate + rep.retain_accuracy)
        })?;
        Ok(ZhuSelection {
            scope: scope_name(&scope),
            best_radius: best,
            scores,
        })
    }

    fn evaluate(&self) -> Result<()> {
        let ds = self.dataset()?;
        let theta = self.base()?;
        let reqs = self.requests()?;
        let test_reqs = self.test_requests(&reqs);
        let pool = ds.subset(Split::Test);
        let kl = self.editor(Variant::Kl)?;
        let px = self.editor(Variant::KlParaphrase)?;
        let l2 = self.editor(Variant::L2)?;
        let single = Scope::Matrix(self.config.baselines.single_matrix.clone());
        let zhu_all = self.select_zhu(&theta, &ds, &reqs, Scope::All)?;
        let zhu_single = self.select_zhu(&theta, &ds, &reqs, single.clone())?;
        write_json(&self.path("reports/zhu_selection.json"), &[&zhu_all, &zhu_single])?;
        let k = self.config.eval.loop_max_iter;
        let ecfg = self.eval_config("evaluate/retain");
        let ft_all = self.finetune_config(Scope::All);
        let ft_single = self.finetune_config(single);

        let mut summary = String::from("method,success_rate,retain_accuracy,equivalence_accuracy,performance_deterioration,mean_kl\n");
        for method in METHODS {
            let th = &theta;
            let report = match method {
                "editor" => self.report_for(method, th, &|r| Ok((edit_once(&kl, th, r)?, 1)), &test_reqs, &pool, &ecfg),
                "editor+loop" => self.report_for(method, th, &|r| edit_with_loop(&kl, th, r, k), &test_reqs, &pool, &ecfg),
                "editor+px" => self.report_for(method, th, &|r| Ok((edit_once(&px, th, r)?, 1)), &test_reqs, &pool, &ecfg),
                "editor+px+loop" => {
                    self.report_for(method, th, &|r| edit_with_loop(&px, th, r, k), &test_reqs, &pool, &ecfg)
                }
                "editor-l2" => self.report_for(method, th, &|r| Ok((edit_once(&l2, th, r)?, 1)), &test_reqs, &pool, &ecfg),
                "finetune-all" => self.report_for(method, th, &|r| finetune_edit(th, r, &ft_all), &test_reqs, &pool, &ecfg),
                "finetune-single" => {
                    self.report_for(method, th, &|r| finetune_edit(th, r, &ft_single), &test_reqs, &pool, &ecfg)
                }
                "zhu-all" => self.report_for(
                    method,
                    th,
                    &|r| constrained_finetune_edit(th, r, zhu_all.best_radius, Norm::LInf, &ft_all, |_, _| {}),
                    &test_reqs,
                    &pool,
                    &ecfg,
                ),
                "zhu-single" => self.report_for(
                    method,
                    th,
                    &|r| constrained_finetune_edit(th, r, zhu_single.best_radius, Norm::LInf, &ft_single, |_, _| {}),
                    &test_reqs,
                    &pool,
                    &ecfg,
                ),
                _ => unreachable!("method list is fixed"),
            }?;
            let _ = writeln!(
                summary,
                "{method},{:.6},{:.6},{:.6},{:.6},{:.6e}",
                report.success_rate,
                report.retain_accuracy,
                report.equivalence_accuracy,
                report.performance_deterioration,
                report.mean_kl
            );
        }
        write(&self.path("reports/summary.csv"), summary)
    }

    fn report_for(
        &self,
        method: &str,
        theta: &ParamSet,
        edit: &(dyn Fn(&EditRequest) -> Result<(ParamSet, usize)> + Sync),
        requests: &[EditRequest],
        pool: &[&Example],
        ecfg: &EvalConfig,
    ) -> Result<MetricsReport> {
        log::info!("evaluating {method} on {} requests", requests.len());
        let rep = full_report(method, theta, &edit, requests, pool, pool, ecfg)?;
        write_json(&self.path(&format!("reports/{method}.json")), &rep)?;
        Ok(rep)
    }

    fn compare(&self) -> Result<()> {
        let reports: Vec<MetricsReport> = METHODS.iter().map(|m| self.report(m)).collect::<Result<_>>()?;
        let n = self.config.eval.dirichlet_samples;
        let seed = self.config.stage_seed("compare");
        let mut p = vec![vec![0.0; reports.len()]; reports.len()];
        for (i, a) in reports.iter().enumerate() {
            for (j, b) in reports.iter().enumerate() {
                p[i][j] = dirichlet_compare(&a.metrics(), &b.metrics(), n, seed)?;
            }
        }
        let mut csv = String::from("method");
        for m in METHODS {
            let _ = write!(csv, ",{m}");
        }
        csv.push('\n');
        for (m, row) in METHODS.iter().zip(&p) {
            csv.push_str(m);
            for v in row {
                let _ = write!(csv, ",{v:.4}");
            }
            csv.push('\n');
        }
        write(&self.path("reports/dirichlet.csv"), csv)?;
        write_json(
            &self.path("reports/dirichlet.json"),
            &ComparisonMatrix {
                methods: METHODS.iter().map(|s| s.to_string()).collect(),
                samples: n,
                p,
            },
        )
    }

    fn analyze(&self) -> Result<()> {
        let theta = self.base()?;
        let reqs = self.requests()?;
        let zhu: Vec<ZhuSelection> = read_json(&self.path("reports/zhu_selection.json"))?;
        let kl = self.editor(Variant::Kl)?;
        let px = self.editor(Variant::KlParaphrase)?;
        let l2 = self.editor(Variant::L2)?;
        let ft_all = self.finetune_config(Scope::All);
        let names = theta.editable().to_vec();
        let sample: Vec<&EditRequest> = reqs.test.iter().take(self.config.eval.analysis_requests).collect();
        if sample.is_empty() {
            return Err(Error::Empty("analysis requests"));
        }
        let labels = ["gradient", "editor", "editor+px", "editor-l2", "finetune-all", "zhu-all"];
        let zhu_m = zhu[0].best_radius;

        let shifts: Vec<Vec<TensorMap>> = sample
            .iter()
            .map(|r| {
                let (_, g) = loss_gradients(&theta, &r.x, r.a, &names)?;
                let grad: TensorMap = g.into_iter().map(|(k, v)| (k, v.scale(-1.0))).collect();
                let delta = |p: ParamSet| theta.editable_delta(&p);
                Ok(vec![
                    grad,
                    delta(edit_once(&kl, &theta, r)?)?,
                    delta(edit_once(&px, &theta, r)?)?,
                    delta(edit_once(&l2, &theta, r)?)?,
                    delta(finetune_edit(&theta, r, &ft_all)?.0)?,
                    delta(constrained_finetune_edit(&theta, r, zhu_m, Norm::LInf, &ft_all, |_, _| {})?.0)?,
                ])
            })
            .collect::<Result<_>>()?;

        let n = sample.len() as f64;
        let mut cos = String::from("method");
        for l in labels {
            let _ = write!(cos, ",{l}");
        }
        cos.push('\n');
        for (i, li) in labels.iter().enumerate() {
            cos.push_str(li);
            for j in 0..labels.len() {
                let mut acc = 0.0;
                for s in &shifts {
                    acc += update_cosine(&s[i], &s[j])?;
                }
                let _ = write!(cos, ",{:.4}", acc / n);
            }
            cos.push('\n');
        }
        write(&self.path("reports/cosine.csv"), cos)?;

        let mut mag = String::from("method");
        for name in &names {
            let _ = write!(mag, ",{name}");
        }
        mag.push('\n');
        for (i, li) in labels.iter().enumerate().skip(1) {
            let mut avg: IndexMap<String, f64> = names.iter().map(|n| (n.clone(), 0.0)).collect();
            for s in &shifts {
                let mut edited = theta.clone();
                for (name, d) in &s[i] {
                    *edited.get_mut(name)? = theta.get(name)?.add(d)?;
                }
                for (k, v) in update_magnitude_map(&theta, &edited)? {
                    avg[&k] += v / n;
                }
            }
            mag.push_str(li);
            for v in avg.values() {
                let _ = write!(mag, ",{v:.4}");
            }
            mag.push('\n');
        }
        write(&self.path("reports/magnitudes.csv"), mag)
    }

    /// Runs every stage in order.
    pub fn run_all(&self) -> Result<()> {
        Stage::ALL.into_iter().try_for_each(|s| self.run_stage(s))
    }
}

fn scope_name(scope: &Scope) -> String {
    match scope {
        Scope::All => "all".into(),
        Scope::Matrix(m) => m.clone(),
    }
}

fn base_history_csv(rows: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,loss,train_accuracy,val_accuracy\n");
    for r in rows {
        let _ = writeln!(out, "{},{:.6e},{:.6},{:.6}", r.epoch, r.loss, r.train_accuracy, r.val_accuracy);
    }
    out
}

/// Creates the run directory under `out` and executes the full pipeline.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let run = Run::create(config.clone(), out)?;
    run.run_all()?;
    Ok(run.dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_hash_ignores_output_directory() {
        let a = ExperimentConfig::smoke();
        let mut b = a.clone();
        b.out_dir = Some("/elsewhere".into());
        assert_eq!(a.run_hash().unwrap(), b.run_hash().unwrap());
        let mut c = a.clone();
        c.seed = 1;
        assert_ne!(a.run_hash().unwrap(), c.run_hash().unwrap());
    }

    #[test]
    fn config_round_trips() {
        let c = ExperimentConfig::desk();
        let json = c.canonical_json().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn stage_and_variant_names_parse() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("nope".parse::<Stage>().is_err());
    }

    #[test]
    fn variant_configs() {
        let c = ExperimentConfig::desk();
        let kl = Variant::Kl.train_config(&c);
        let px = Variant::KlParaphrase.train_config(&c);
        let l2 = Variant::L2.train_config(&c);
        assert!(!kl.use_paraphrases && px.use_paraphrases && !l2.use_paraphrases);
        assert_eq!(l2.constraint, ConstraintKind::L2);
        assert_eq!(l2.margin, c.l2_margin);
        assert_ne!(kl.seed, px.seed);
    }

    #[test]
    fn missing_inputs_are_stage_tagged() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::create(ExperimentConfig::smoke(), dir.path()).unwrap();
        match run.run_stage(Stage::TrainBase) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "train-base"),
            other => panic!("{other:?}"),
        }
    }
}
