//! The command layer behind the `longtail` binary. Stages exchange data
//! through files in one output directory:
//!
//! | file                  | written by           |
//! |-----------------------|----------------------|
//! | `catalog.jsonl`       | generate             |
//! | `interactions.jsonl`  | generate             |
//! | `embeddings.jsonl`    | generate             |
//! | `intent.params`       | train intent         |
//! | `cf.model`            | train cf             |
//! | `markov.model`        | train gen            |
//! | `rankings.jsonl`      | train align          |
//! | `markov_aligned.model`| train align          |
//! | `weights.toml`        | train all, gridsearch|
//!
//! Reports carry the effective configuration as trailing comment lines.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io;
use std::path::{Path, PathBuf};

use crate::alignment::{read_rankings, write_rankings};
use crate::cf::{CfBackendKind, CfModel, CfScorer, ItemKnnIndex, MfModel};
use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_dataset, save_dataset, Dataset, SplitDataset};
use crate::embedding::{ingest_embeddings, pseudo_embed_catalog, write_embeddings, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::evaluation::{
    comparison_table, evaluate_configs, evaluation_users, fmt_sig, measure_latency, LatencyStats, PipelineConfig,
};
use crate::fusion::{Components, FusionWeights, GridResult, Recommender};
use crate::generative::MarkovModel;
use crate::intent::{AttentionParams, UserHistory};
use crate::pipeline;
use crate::Real;

pub const INTENT_FILE: &str = "intent.params";
pub const CF_FILE: &str = "cf.model";
pub const MARKOV_FILE: &str = "markov.model";
pub const RANKINGS_FILE: &str = "rankings.jsonl";
pub const ALIGNED_FILE: &str = "markov_aligned.model";
pub const WEIGHTS_FILE: &str = "weights.toml";
pub const LOCK_FILE: &str = ".longtail.lock";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Intent,
    Cf,
    Gen,
    Align,
    All,
}

/// Effective configuration plus the output directory.
#[derive(Clone, Debug)]
pub struct Context {
    pub config: RunConfig,
    pub output: PathBuf,
    pub force: bool,
}

/// Marks the output directory as in use for the lifetime of the guard.
pub struct Lock {
    path: PathBuf,
}

impl Lock {
    pub fn acquire(dir: &Path) -> Result<Lock> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock { path }),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(Error::io(
                &path,
                io::Error::new(
                    io::ErrorKind::AlreadyExists,
                    "another command is using this output directory (remove the marker if it is stale)",
                ),
            )),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl Context {
    pub fn new(config: RunConfig, output: impl Into<PathBuf>, force: bool) -> Result<Self> {
        config.validate()?;
        Ok(Context {
            config,
            output: output.into(),
            force,
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.output.join(name)
    }

    fn data_path(&self, name: &str) -> PathBuf {
        let p = Path::new(name);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.output.join(p)
        }
    }

    pub fn catalog_path(&self) -> PathBuf {
        self.data_path(&self.config.data.catalog)
    }

    pub fn interactions_path(&self) -> PathBuf {
        self.data_path(&self.config.data.interactions)
    }

    pub fn embeddings_path(&self) -> PathBuf {
        self.data_path(&self.config.data.embeddings)
    }

    fn require(&self, path: &Path, stage: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::Dependency {
                stage: stage.into(),
                detail: format!("{} not found; run that stage first", path.display()),
            })
        }
    }

    /// Comment block with the effective configuration.
    fn config_echo(&self) -> String {
        let mut s = String::from("# effective config\n");
        for line in self.config.to_toml().lines() {
            let _ = writeln!(s, "# {line}");
        }
        s
    }

    fn write(&self, name: &str, body: &str) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    fn write_report(&self, name: &str, body: &str) -> Result<PathBuf> {
        self.write(name, &format!("{body}\n{}", self.config_echo()))
    }
}

/// Data loaded for training or serving.
pub struct Inputs {
    pub dataset: Dataset,
    pub split: SplitDataset,
    pub embeddings: EmbeddingMatrix<Real>,
}

pub fn load_inputs(ctx: &Context) -> Result<Inputs> {
    for p in [ctx.catalog_path(), ctx.interactions_path(), ctx.embeddings_path()] {
        ctx.require(&p, "generate")?;
    }
    let dataset = load_dataset(&ctx.catalog_path(), &ctx.interactions_path())?;
    let embeddings = ingest_embeddings(&ctx.embeddings_path(), dataset.catalog())?;
    if embeddings.dim() != ctx.config.embedding.dim {
        return Err(Error::DimensionMismatch {
            expected: ctx.config.embedding.dim,
            found: embeddings.dim(),
        });
    }
    let split = pipeline::prepare(&dataset, &ctx.config)?;
    Ok(Inputs {
        dataset,
        split,
        embeddings,
    })
}

/// Writes a seeded synthetic catalog, its interactions and pseudo-embeddings.
pub fn cmd_generate(ctx: &Context) -> Result<Vec<PathBuf>> {
    let _lock = Lock::acquire(&ctx.output)?;
    let paths = [ctx.catalog_path(), ctx.interactions_path(), ctx.embeddings_path()];
    if !ctx.force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::io(
                p,
                io::Error::new(io::ErrorKind::AlreadyExists, "refusing to overwrite; pass --force"),
            ));
        }
    }
    let s = &ctx.config.synthetic;
    let dataset = generate_synthetic(ctx.config.seed, s.n_users, s.n_items, s.n_interactions, s.zipf_exponent)?;
    save_dataset(&dataset, &paths[0], &paths[1])?;
    let embeddings: EmbeddingMatrix<Real> =
        pseudo_embed_catalog(dataset.catalog(), ctx.config.embedding.dim, ctx.config.seed)?;
    write_embeddings(&paths[2], &embeddings)?;
    Ok(paths.to_vec())
}

fn load_cf(ctx: &Context, train: &Dataset) -> Result<CfScorer<Real>> {
    let path = ctx.path(CF_FILE);
    ctx.require(&path, "cf")?;
    let matrix = pipeline::cf_matrix(train, &ctx.config);
    let model = match ctx.config.cf.backend {
        CfBackendKind::ItemKnn => CfModel::ItemKnn(ItemKnnIndex::load(&path, &matrix)?),
        CfBackendKind::Bpr => {
            let mf = MfModel::load(&path)?;
            if mf.users() != matrix.users() || mf.items() != matrix.items() {
                return Err(Error::Dependency {
                    stage: "cf".into(),
                    detail: "factor file does not match the training split; retrain".into(),
                });
            }
            CfModel::Bpr(mf)
        }
    };
    Ok(CfScorer::with_model(matrix, model))
}

fn save_cf(ctx: &Context, scorer: &CfScorer<Real>) -> Result<PathBuf> {
    let path = ctx.path(CF_FILE);
    match scorer.model() {
        Some(CfModel::ItemKnn(knn)) => knn.save(&path, scorer.matrix())?,
        Some(CfModel::Bpr(mf)) => mf.save(&path)?,
        None => unreachable!("trained scorer has a model"),
    }
    Ok(path)
}

fn load_markov(ctx: &Context, name: &str, stage: &str) -> Result<MarkovModel<Real>> {
    let path = ctx.path(name);
    ctx.require(&path, stage)?;
    MarkovModel::load(&path)
}

/// Trains one stage, or every stage in order followed by the weight search.
pub fn cmd_train(ctx: &Context, component: Component) -> Result<Vec<PathBuf>> {
    let _lock = Lock::acquire(&ctx.output)?;
    let inputs = load_inputs(ctx)?;
    let cfg = &ctx.config;
    let mut written = Vec::new();
    let all = component == Component::All;
    if all || component == Component::Intent {
        let (params, _) = pipeline::train_intent_stage(&inputs.split, &inputs.embeddings, cfg)?;
        let path = ctx.path(INTENT_FILE);
        params.save(&path)?;
        written.push(path);
    }
    if all || component == Component::Cf {
        let (scorer, _) = pipeline::train_cf_stage(&inputs.split.train, cfg)?;
        written.push(save_cf(ctx, &scorer)?);
    }
    if all || component == Component::Gen {
        let model = pipeline::fit_generative_stage::<Real>(&inputs.split.train, cfg)?;
        let path = ctx.path(MARKOV_FILE);
        model.save(&path)?;
        written.push(path);
    }
    if all || component == Component::Align {
        let model = load_markov(ctx, MARKOV_FILE, "gen")?;
        let rankings_path = ctx.path(RANKINGS_FILE);
        write_rankings(
            &rankings_path,
            &pipeline::build_rankings(&model, &inputs.split.train, cfg)?,
        )?;
        let rankings = read_rankings(&rankings_path)?;
        let (aligned, _) = pipeline::align_stage(&model, &rankings, cfg)?;
        let path = ctx.path(ALIGNED_FILE);
        aligned.save(&path)?;
        written.push(rankings_path);
        written.push(path);
    }
    if all {
        let result = pipeline::tune_weights(&inputs.split, &inputs.embeddings, cfg)?;
        written.push(write_weights(ctx, &result)?);
    }
    Ok(written)
}

fn write_weights(ctx: &Context, result: &GridResult) -> Result<PathBuf> {
    let body = format!(
        "# validation {} = {}\n{}",
        metric_name(ctx),
        fmt_sig(result.best_score),
        toml::to_string(&result.best).expect("weights serialize")
    );
    ctx.write(WEIGHTS_FILE, &body)
}

fn metric_name(ctx: &Context) -> &'static str {
    match ctx.config.fusion.grid_metric {
        crate::fusion::GridMetric::Ndcg10 => "ndcg@10",
        crate::fusion::GridMetric::Recall50 => "recall@50",
    }
}

/// Serving weights: the searched weights when present, else the configured ones.
pub fn serving_weights(ctx: &Context) -> Result<FusionWeights> {
    let path = ctx.path(WEIGHTS_FILE);
    if !path.exists() {
        return Ok(ctx.config.fusion.weights);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let w: FusionWeights = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    w.validate()?;
    Ok(w)
}

/// Loads every trained artifact into a recommender over `inputs`.
pub fn load_recommender(ctx: &Context, inputs: &Inputs) -> Result<Recommender<Real>> {
    let intent_path = ctx.path(INTENT_FILE);
    ctx.require(&intent_path, "intent")?;
    let components = Components {
        embeddings: inputs.embeddings.clone(),
        attention: AttentionParams::load(&intent_path)?,
        cf: load_cf(ctx, &inputs.split.train)?,
        generative: load_markov(ctx, ALIGNED_FILE, "align")?,
    };
    Recommender::new(components, pipeline::recommender_options(&ctx.config))
}

fn training_history(inputs: &Inputs, user_id: &str) -> Result<UserHistory> {
    let events = inputs.split.train.sequence_of(user_id);
    if events.is_empty() {
        return Err(Error::ColdUser(user_id.to_owned()));
    }
    Ok(UserHistory::new(
        user_id,
        events.iter().map(|e| e.item_id.clone()).collect(),
    ))
}

/// Top-`k` table for a user. With `cold_history`, ranks the catalog by
/// semantic score against that item list instead of a training history.
pub fn cmd_recommend(ctx: &Context, user_id: &str, k: usize, cold_history: Option<&[String]>) -> Result<String> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    let inputs = load_inputs(ctx)?;
    let mut out = String::new();
    if let Some(items) = cold_history {
        let intent_path = ctx.path(INTENT_FILE);
        ctx.require(&intent_path, "intent")?;
        let attention = AttentionParams::load(&intent_path)?;
        let history = UserHistory::new(user_id, items.to_vec());
        let semantic = SemanticOnly {
            embeddings: &inputs.embeddings,
            attention: &attention,
            t_max: ctx.config.attention.t_max,
        };
        let _ = writeln!(out, "{:>4}  {:<12}  {:>10}", "rank", "item_id", "s_sem");
        for (r, (id, s)) in semantic.rank(&history, k)?.into_iter().enumerate() {
            let _ = writeln!(out, "{:>4}  {:<12}  {:>10}", r + 1, id, fmt_sig(s));
        }
        return Ok(out);
    }
    let history = training_history(&inputs, user_id)?;
    let recommender = load_recommender(ctx, &inputs)?;
    let (list, triples) = recommender.recommend(&history, &serving_weights(ctx)?, k)?;
    let _ = writeln!(
        out,
        "{:>4}  {:<12}  {:>10}  {:>10}  {:>10}  {:>10}",
        "rank", "item_id", "fused", "s_sem", "s_cf", "s_gen"
    );
    for (r, (id, s)) in list.items.iter().enumerate() {
        let t = &triples[id];
        let _ = writeln!(
            out,
            "{:>4}  {:<12}  {:>10}  {:>10}  {:>10}  {:>10}",
            r + 1,
            id,
            fmt_sig(*s),
            fmt_sig(t.s_sem),
            fmt_sig(t.s_cf),
            fmt_sig(t.s_gen)
        );
    }
    Ok(out)
}

/// Semantic ranking that needs no collaborative or generative artifacts.
struct SemanticOnly<'a> {
    embeddings: &'a EmbeddingMatrix<Real>,
    attention: &'a AttentionParams<Real>,
    t_max: usize,
}

impl SemanticOnly<'_> {
    fn rank(&self, history: &UserHistory, k: usize) -> Result<Vec<(String, Real)>> {
        let start = history.items.len().saturating_sub(self.t_max);
        let recent = UserHistory::new(history.user_id.clone(), history.items[start..].to_vec());
        let h = crate::intent::intent(&recent, self.attention, self.embeddings)?.h;
        crate::embedding::top_k_semantic(&h, self.embeddings, k, &history.item_set())
    }
}

/// Writes one key-value report per pipeline, a comparison table and a
/// latency file. Only the latency file depends on wall-clock time.
pub fn cmd_evaluate(ctx: &Context) -> Result<Vec<PathBuf>> {
    let _lock = Lock::acquire(&ctx.output)?;
    let inputs = load_inputs(ctx)?;
    let recommender = load_recommender(ctx, &inputs)?;
    let weights = serving_weights(ctx)?;
    let reports = evaluate_configs(
        &recommender,
        &inputs.split,
        &PipelineConfig::standard_set(weights),
        &pipeline::eval_options(&ctx.config),
    )?;
    let mut written = Vec::new();
    for (name, report) in &reports {
        let body = format!("pipeline={name}\n{}", report.to_key_values());
        written.push(ctx.write_report(&format!("report_{name}.txt"), &body)?);
    }
    let table = format!("fusion weights {weights}\n\n{}", comparison_table(&reports));
    written.push(ctx.write_report("comparison.txt", &table)?);
    let stats = bench_latency(ctx, &inputs, &recommender, &weights)?;
    written.push(ctx.write("latency.txt", &latency_lines(ctx, &stats))?);
    Ok(written)
}

/// Searches the fusion weight simplex on the validation slice and writes
/// the best point plus the full grid.
pub fn cmd_gridsearch(ctx: &Context) -> Result<(GridResult, Vec<PathBuf>)> {
    let _lock = Lock::acquire(&ctx.output)?;
    let inputs = load_inputs(ctx)?;
    let result = pipeline::tune_weights(&inputs.split, &inputs.embeddings, &ctx.config)?;
    let mut body = format!(
        "# grid step {}\nsemantic,collaborative,generative,{}\n",
        ctx.config.fusion.grid_step,
        metric_name(ctx)
    );
    for (w, score) in &result.evaluated {
        let _ = writeln!(
            body,
            "{},{},{},{}",
            w.semantic,
            w.collaborative,
            w.generative,
            fmt_sig(*score)
        );
    }
    let grid = ctx.write_report("gridsearch.txt", &body)?;
    let weights = write_weights(ctx, &result)?;
    Ok((result, vec![weights, grid]))
}

fn bench_latency(
    ctx: &Context,
    inputs: &Inputs,
    recommender: &Recommender<Real>,
    weights: &FusionWeights,
) -> Result<LatencyStats> {
    let mut users: Vec<UserHistory> = evaluation_users(&inputs.split, ctx.config.eval.relevance)
        .into_iter()
        .map(|(h, _)| h)
        .collect();
    users.truncate(ctx.config.eval.latency_users + ctx.config.eval.warmup);
    let k = *ctx.config.eval.k_list.iter().min().expect("validated nonempty");
    measure_latency(
        |h| recommender.recommend(h, weights, k).map(|_| ()),
        &users,
        ctx.config.eval.warmup,
    )
}

fn latency_lines(ctx: &Context, stats: &LatencyStats) -> String {
    let bound = ctx.config.eval.latency_bound_ms;
    format!(
        "median_ms={}\np95_ms={}\nmean_ms={}\nsamples={}\nbound_ms={}\nwithin_bound={}\n",
        fmt_sig(stats.median_ms),
        fmt_sig(stats.p95_ms),
        fmt_sig(stats.mean_ms),
        stats.samples,
        fmt_sig(bound),
        stats.median_ms < bound
    )
}

/// Times the end-to-end serving path over a user sample.
pub fn cmd_bench(ctx: &Context) -> Result<(LatencyStats, PathBuf)> {
    let _lock = Lock::acquire(&ctx.output)?;
    let inputs = load_inputs(ctx)?;
    let recommender = load_recommender(ctx, &inputs)?;
    let stats = bench_latency(ctx, &inputs, &recommender, &serving_weights(ctx)?)?;
    let path = ctx.write("bench.txt", &latency_lines(ctx, &stats))?;
    Ok((stats, path))
}
