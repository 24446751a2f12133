//! Training and evaluation of the full pipeline from a [`RunConfig`].
//!
//! Stage order: embeddings, intent encoder, collaborative backend, sequence
//! model fit on filtered sequences, beam candidates labelled by held-out
//! feedback, alignment, weight search.

use crate::alignment::{align_generative, build_partial_order, AlignReport, CandidateRanking, FeedbackTable};
use crate::cf::{
    build_matrix, train_bpr, ActionWeights, CfBackendKind, CfModel, CfScorer, InteractionMatrix, ItemKnnIndex,
};
use crate::config::RunConfig;
use crate::data::{chronological_split, classify_head_tail, Dataset, SplitDataset};
use crate::embedding::{pseudo_embed_catalog, EmbeddingMatrix};
use crate::error::Result;
use crate::evaluation::{evaluate_configs, EvalOptions, MetricReport, PipelineConfig};
use crate::fusion::{grid_search, Components, GridResult, Recommender, RecommenderOptions};
use crate::generative::{beam_search, filter_training_sequences, fit_markov, MarkovModel, SequenceModel};
use crate::intent::{train_intent, AttentionParams, IntentOptions, TrainReport, UserHistory};
use crate::scalar::Scalar;

/// Share of each user's training sequence held back for validation.
pub const VALIDATION_FRACTION: f64 = 0.10;

/// Assigns head/tail flags and splits chronologically.
pub fn prepare(dataset: &Dataset, config: &RunConfig) -> Result<SplitDataset> {
    let flagged = classify_head_tail(dataset, config.data.head_fraction)?;
    chronological_split(&flagged, config.data.holdout_fraction)
}

/// The last tenth of every user's training sequence, carved off `train`.
pub fn validation_split(train: &Dataset) -> Result<SplitDataset> {
    chronological_split(train, VALIDATION_FRACTION)
}

pub fn embeddings_for<T: Scalar>(dataset: &Dataset, config: &RunConfig) -> Result<EmbeddingMatrix<T>> {
    pseudo_embed_catalog(dataset.catalog(), config.embedding.dim, config.seed)
}

pub fn intent_options(config: &RunConfig) -> IntentOptions {
    IntentOptions {
        t_max: config.attention.t_max,
        triples_per_user: config.attention.triples_per_user,
    }
}

pub fn recommender_options(config: &RunConfig) -> RecommenderOptions {
    RecommenderOptions {
        t_max: config.attention.t_max,
        k_each: config.fusion.recall_k_each,
        beam_depth: config.beam.depth,
        normalization: config.fusion.normalization,
    }
}

pub fn action_weights<T: Scalar>(config: &RunConfig) -> ActionWeights<T> {
    ActionWeights {
        click: T::of(config.cf.click_weight),
        cart: T::of(config.cf.cart_weight),
        purchase: T::of(config.cf.purchase_weight),
    }
}

pub fn train_intent_stage<T: Scalar>(
    split: &SplitDataset,
    embeddings: &EmbeddingMatrix<T>,
    config: &RunConfig,
) -> Result<(AttentionParams<T>, TrainReport)> {
    train_intent(split, embeddings, &config.attention_training(), &intent_options(config))
}

pub fn cf_matrix<T: Scalar>(train: &Dataset, config: &RunConfig) -> InteractionMatrix<T> {
    build_matrix(train, &action_weights(config))
}

pub fn train_cf_stage<T: Scalar>(train: &Dataset, config: &RunConfig) -> Result<(CfScorer<T>, Option<TrainReport>)> {
    let matrix = cf_matrix(train, config);
    Ok(match config.cf.backend {
        CfBackendKind::ItemKnn => {
            let index = ItemKnnIndex::build(&matrix, config.cf.k_neighbors);
            (CfScorer::with_model(matrix, CfModel::ItemKnn(index)), None)
        }
        CfBackendKind::Bpr => {
            let (mf, report) = train_bpr(
                &matrix,
                config.cf.factors,
                config.cf.regularization,
                &config.bpr_training(),
            )?;
            (CfScorer::with_model(matrix, CfModel::Bpr(mf)), Some(report))
        }
    })
}

pub fn fit_generative_stage<T: Scalar>(train: &Dataset, config: &RunConfig) -> Result<MarkovModel<T>> {
    let filtered = filter_training_sequences(train, config.markov.min_length, config.markov.required_action);
    fit_markov(&filtered, config.markov.order, T::of(config.markov.alpha))
}

/// Beam candidates for each validation user's pre-validation history,
/// labelled by the validation slice's feedback.
pub fn build_rankings<T: Scalar>(
    model: &MarkovModel<T>,
    train: &Dataset,
    config: &RunConfig,
) -> Result<Vec<CandidateRanking<T>>> {
    let carve = validation_split(train)?;
    let feedback = FeedbackTable::new(&carve.test);
    let mut users = carve.test.users();
    if config.align.max_users > 0 {
        users.truncate(config.align.max_users);
    }
    let mut rankings = Vec::with_capacity(users.len());
    for user in users {
        let events = carve.train.sequence_of(user);
        let history = UserHistory::new(user, events.iter().map(|e| e.item_id.clone()).collect());
        let exclude = history.item_set();
        if exclude.len() >= model.vocabulary().len() {
            continue;
        }
        let beams = beam_search(model, &history, config.beam.width, config.beam.depth, &exclude)?;
        let k = model.order().min(history.items.len());
        let context = history.items[history.items.len() - k..].to_vec();
        rankings.push(build_partial_order(
            &beams,
            &context,
            &feedback,
            config.align.ctr_weight,
            config.align.cvr_weight,
        )?);
    }
    Ok(rankings)
}

pub fn align_stage<T: Scalar>(
    model: &MarkovModel<T>,
    rankings: &[CandidateRanking<T>],
    config: &RunConfig,
) -> Result<(MarkovModel<T>, AlignReport)> {
    align_generative(model, rankings, config.align.loss, &config.align_training())
}

#[derive(Clone, Debug)]
pub struct TrainedPipeline<T> {
    pub components: Components<T>,
    pub unaligned: MarkovModel<T>,
    pub rankings: Vec<CandidateRanking<T>>,
    pub intent_report: TrainReport,
    pub cf_report: Option<TrainReport>,
    pub align_report: AlignReport,
}

impl<T: Scalar> TrainedPipeline<T> {
    pub fn recommender(&self, config: &RunConfig) -> Result<Recommender<T>> {
        Recommender::new(self.components.clone(), recommender_options(config))
    }
}

/// Trains every component on `split.train`.
pub fn train_all<T: Scalar>(
    split: &SplitDataset,
    embeddings: &EmbeddingMatrix<T>,
    config: &RunConfig,
) -> Result<TrainedPipeline<T>> {
    let (attention, intent_report) = train_intent_stage(split, embeddings, config)?;
    let (cf, cf_report) = train_cf_stage(&split.train, config)?;
    let unaligned = fit_generative_stage(&split.train, config)?;
    let rankings = build_rankings(&unaligned, &split.train, config)?;
    let (aligned, align_report) = align_stage(&unaligned, &rankings, config)?;
    Ok(TrainedPipeline {
        components: Components {
            embeddings: embeddings.clone(),
            attention,
            cf,
            generative: aligned,
        },
        unaligned,
        rankings,
        intent_report,
        cf_report,
        align_report,
    })
}

/// Trains on the training split minus its validation slice and searches
/// the weight simplex on that slice.
pub fn tune_weights<T: Scalar>(
    split: &SplitDataset,
    embeddings: &EmbeddingMatrix<T>,
    config: &RunConfig,
) -> Result<GridResult> {
    let validation = validation_split(&split.train)?;
    let trained = train_all(&validation, embeddings, config)?;
    let recommender = trained.recommender(config)?;
    grid_search(
        &recommender,
        &validation,
        config.eval.relevance,
        config.fusion.grid_step,
        config.fusion.grid_metric,
    )
}

pub fn eval_options(config: &RunConfig) -> EvalOptions {
    EvalOptions {
        k_list: config.eval.k_list.clone(),
        diversity_pairs: config.eval.diversity_pairs,
        relevance: config.eval.relevance,
        tail_mode: config.eval.tail_mode,
        seed: config.seed,
    }
}

/// Trains the shared components once on `split.train` and evaluates every
/// configuration on `split.test`.
pub fn run_experiment<T: Scalar>(
    split: &SplitDataset,
    embeddings: &EmbeddingMatrix<T>,
    configs: &[PipelineConfig],
    config: &RunConfig,
) -> Result<Vec<(String, MetricReport)>> {
    if configs.is_empty() {
        return Ok(Vec::new());
    }
    let trained = train_all(split, embeddings, config)?;
    evaluate_configs(&trained.recommender(config)?, split, configs, &eval_options(config))
}
