//! Run and training configuration. Defaults follow the experiment protocol:
//! ten epochs with batch size 256, learning rate 1e-4, beam width 5, fusion
//! weights 0.4/0.4/0.2, cutoffs {10, 100, 1000} and a 10% head fraction.

use serde::{Deserialize, Serialize};

use crate::alignment::RankingLoss;
use crate::cf::CfBackendKind;
use crate::data::Action;
use crate::embedding::Pooling;
use crate::error::{Error, Result};
use crate::evaluation::{Relevance, TailCoverageMode};
use crate::fusion::{FusionWeights, GridMetric, Normalization};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub negatives_per_positive: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 10,
            batch_size: 256,
            learning_rate: 1e-4,
            seed: 0,
            negatives_per_positive: 1,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.negatives_per_positive == 0 {
            return Err(Error::Config("negatives_per_positive must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Relative paths resolve against the output directory.
    pub catalog: String,
    pub interactions: String,
    pub embeddings: String,
    pub head_fraction: f64,
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            catalog: "catalog.jsonl".into(),
            interactions: "interactions.jsonl".into(),
            embeddings: "embeddings.jsonl".into(),
            head_fraction: 0.10,
            holdout_fraction: 0.20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub zipf_exponent: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_users: 1000,
            n_items: 5000,
            n_interactions: 50_000,
            zipf_exponent: 1.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub dim: usize,
    pub pooling: Pooling,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            dim: 64,
            pooling: Pooling::Average,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionConfig {
    pub t_max: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub negatives_per_positive: usize,
    /// Next-item targets sampled per user for the training triples.
    pub triples_per_user: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig {
            t_max: 50,
            epochs: 10,
            batch_size: 256,
            learning_rate: 1e-4,
            negatives_per_positive: 1,
            triples_per_user: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfConfig {
    pub backend: CfBackendKind,
    pub k_neighbors: usize,
    pub click_weight: f64,
    pub cart_weight: f64,
    pub purchase_weight: f64,
    pub factors: usize,
    pub regularization: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for CfConfig {
    fn default() -> Self {
        CfConfig {
            backend: CfBackendKind::ItemKnn,
            k_neighbors: 100,
            click_weight: 1.0,
            cart_weight: 2.0,
            purchase_weight: 3.0,
            factors: 32,
            regularization: 1e-4,
            epochs: 10,
            batch_size: 256,
            learning_rate: 0.05,
        }
    }
}

impl CfConfig {
    pub fn action_weight(&self, action: Action) -> f64 {
        match action {
            Action::Click => self.click_weight,
            Action::AddToCart => self.cart_weight,
            Action::Purchase => self.purchase_weight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarkovConfig {
    pub order: usize,
    pub alpha: f64,
    /// Sequences shorter than this are rejected before fitting.
    pub min_length: usize,
    pub required_action: Option<Action>,
}

impl Default for MarkovConfig {
    fn default() -> Self {
        MarkovConfig {
            order: 2,
            alpha: 0.1,
            min_length: 2,
            required_action: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamConfig {
    pub width: usize,
    pub depth: usize,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { width: 5, depth: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub loss: RankingLoss,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub ctr_weight: f64,
    pub cvr_weight: f64,
    /// Users whose candidate lists are labelled; 0 means all.
    pub max_users: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            loss: RankingLoss::ListMle,
            epochs: 10,
            batch_size: 256,
            learning_rate: 0.5,
            ctr_weight: 1.0,
            cvr_weight: 1.0,
            max_users: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub weights: FusionWeights,
    pub normalization: Normalization,
    pub grid_step: f64,
    pub grid_metric: GridMetric,
    /// Candidates recalled from each channel before fusion.
    pub recall_k_each: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            weights: FusionWeights::default(),
            normalization: Normalization::ZScore,
            grid_step: 0.1,
            grid_metric: GridMetric::Ndcg10,
            recall_k_each: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
    pub diversity_pairs: usize,
    pub relevance: Relevance,
    pub tail_mode: TailCoverageMode,
    pub latency_users: usize,
    pub warmup: usize,
    pub latency_bound_ms: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_list: vec![10, 100, 1000],
            diversity_pairs: 20_000,
            relevance: Relevance::AnyAction,
            tail_mode: TailCoverageMode::Slots,
            latency_users: 200,
            warmup: 10,
            latency_bound_ms: 200.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub embedding: EmbeddingConfig,
    pub attention: AttentionConfig,
    pub cf: CfConfig,
    pub markov: MarkovConfig,
    pub beam: BeamConfig,
    pub align: AlignConfig,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            embedding: EmbeddingConfig::default(),
            attention: AttentionConfig::default(),
            cf: CfConfig::default(),
            markov: MarkovConfig::default(),
            beam: BeamConfig::default(),
            align: AlignConfig::default(),
            fusion: FusionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn attention_training(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.attention.epochs,
            batch_size: self.attention.batch_size,
            learning_rate: self.attention.learning_rate,
            seed: self.seed,
            negatives_per_positive: self.attention.negatives_per_positive,
        }
    }

    pub fn bpr_training(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.cf.epochs,
            batch_size: self.cf.batch_size,
            learning_rate: self.cf.learning_rate,
            seed: self.seed,
            negatives_per_positive: 1,
        }
    }

    pub fn align_training(&self) -> TrainingConfig {
        TrainingConfig {
            epochs: self.align.epochs,
            batch_size: self.align.batch_size,
            learning_rate: self.align.learning_rate,
            seed: self.seed,
            negatives_per_positive: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_owned()));
        let frac = |x: f64| x > 0.0 && x < 1.0;
        if !frac(self.data.head_fraction) {
            return bad("data.head_fraction must be in (0,1)");
        }
        if !frac(self.data.holdout_fraction) {
            return bad("data.holdout_fraction must be in (0,1)");
        }
        let s = &self.synthetic;
        if s.n_users == 0 || s.n_items == 0 || s.n_interactions < s.n_users {
            return bad("synthetic counts must be >= 1 with n_interactions >= n_users");
        }
        if !(s.zipf_exponent > 0.0) {
            return bad("synthetic.zipf_exponent must be > 0");
        }
        if !(crate::embedding::MIN_DIM..=crate::embedding::MAX_DIM).contains(&self.embedding.dim) {
            return bad("embedding.dim must be in [2, 4096]");
        }
        if self.attention.t_max == 0 || self.attention.triples_per_user == 0 {
            return bad("attention.t_max and attention.triples_per_user must be >= 1");
        }
        self.attention_training().validate()?;
        self.bpr_training().validate()?;
        self.align_training().validate()?;
        if self.cf.k_neighbors == 0 || self.cf.factors == 0 {
            return bad("cf.k_neighbors and cf.factors must be >= 1");
        }
        if [self.cf.click_weight, self.cf.cart_weight, self.cf.purchase_weight]
            .iter()
            .any(|w| !(*w >= 0.0))
            || self.cf.regularization < 0.0
        {
            return bad("cf weights and regularization must be nonnegative");
        }
        if self.markov.order == 0 || !(self.markov.alpha > 0.0) || self.markov.min_length == 0 {
            return bad("markov.order >= 1, markov.alpha > 0, markov.min_length >= 1 required");
        }
        if self.beam.width == 0 || self.beam.depth == 0 {
            return bad("beam.width and beam.depth must be >= 1");
        }
        if self.align.ctr_weight < 0.0
            || self.align.cvr_weight < 0.0
            || self.align.ctr_weight + self.align.cvr_weight == 0.0
        {
            return bad("align weights must be nonnegative and not both zero");
        }
        self.fusion.weights.validate()?;
        if !(self.fusion.grid_step > 0.0 && self.fusion.grid_step <= 1.0) {
            return bad("fusion.grid_step must be in (0,1]");
        }
        if self.fusion.recall_k_each == 0 {
            return bad("fusion.recall_k_each must be >= 1");
        }
        if self.eval.k_list.is_empty() || self.eval.k_list.contains(&0) {
            return bad("eval.k_list must be nonempty with positive cutoffs");
        }
        if self.eval.latency_users == 0 {
            return bad("eval.latency_users must be >= 1");
        }
        Ok(())
    }
}
