//! The flat run configuration file.
//!
//! Every key is optional and falls back to the library default. Unknown keys
//! are rejected. Relative paths are resolved against the directory of the
//! configuration file.
//!
//! ```toml
//! # data
//! train_path = "data/Restaurants_Train.xml"
//! eval_path = "data/Restaurants_Test.xml"
//! format = "semeval"          # semeval | twitter | jsonl; default by extension
//! wordvecs = "vectors.txt"    # word-vector text file; omitted = random init
//! out_dir = "runs/rest14"
//! seed = 1
//!
//! # encoder
//! d_model = 64
//! conv_kernel = 4
//! heads = 4
//! fusion_heads = 4
//! flip_fraction = 0.5
//! flip_count = 3              # overrides flip_fraction when present
//! pf_double_flip = true
//! pooling = "aspect_span"     # aspect_span | whole_sentence
//! fusion = true
//! dropout = 0.3
//!
//! # embedding and context encoder
//! embed_dim = 300
//! encoder = "bilstm"          # bilstm | raw
//! train_embeddings = false
//! embed_dropout = 0.3
//!
//! # optimizer and schedule
//! lr = 0.001
//! beta1 = 0.9
//! beta2 = 0.999
//! adam_eps = 1e-8
//! weight_decay = 1e-5
//! batch_size = 32
//! max_epochs = 50
//! patience = 10
//! max_steps = 200
//! ```

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mega_absa::data::CorpusFormat;
use mega_absa::encoder::{MegaConfig, PoolingScope};
use mega_absa::model::{ContextEncoder, ModelConfig};
use mega_absa::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub train_path: Option<PathBuf>,
    pub eval_path: Option<PathBuf>,
    pub format: Option<CorpusFormat>,
    pub wordvecs: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,

    pub d_model: usize,
    pub conv_kernel: usize,
    pub heads: usize,
    pub fusion_heads: usize,
    pub flip_fraction: f64,
    pub flip_count: Option<usize>,
    pub pf_double_flip: bool,
    pub pooling: PoolingScope,
    pub fusion: bool,
    pub dropout: f64,

    pub embed_dim: usize,
    pub encoder: ContextEncoder,
    pub train_embeddings: bool,
    pub embed_dropout: f64,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub max_steps: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        RunConfig {
            train_path: None,
            eval_path: None,
            format: None,
            wordvecs: None,
            out_dir: PathBuf::from("runs/default"),
            seed: t.seed,
            d_model: m.mega.d_model,
            conv_kernel: m.mega.conv_kernel,
            heads: m.mega.heads,
            fusion_heads: m.mega.fusion_heads,
            flip_fraction: m.mega.flip_fraction,
            flip_count: m.mega.flip_count,
            pf_double_flip: m.mega.pf_double_flip,
            pooling: m.mega.pooling,
            fusion: m.mega.fusion,
            dropout: m.mega.dropout,
            embed_dim: m.embed_dim,
            encoder: m.encoder,
            train_embeddings: m.train_embeddings,
            embed_dropout: m.embed_dropout,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            adam_eps: t.adam_eps,
            weight_decay: t.weight_decay,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            max_steps: t.max_steps,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        // toml's messages span several lines; keep the first
        toml::from_str(text).map_err(|e| anyhow::anyhow!(e.message().to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
        let mut cfg = RunConfig::parse(&text).with_context(|| format!("{}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut cfg.train_path, &mut cfg.eval_path, &mut cfg.wordvecs].into_iter().flatten() {
            resolve(p);
        }
        resolve(&mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            mega: MegaConfig {
                d_model: self.d_model,
                conv_kernel: self.conv_kernel,
                heads: self.heads,
                fusion_heads: self.fusion_heads,
                flip_fraction: self.flip_fraction,
                flip_count: self.flip_count,
                pf_double_flip: self.pf_double_flip,
                pooling: self.pooling,
                fusion: self.fusion,
                dropout: self.dropout,
            },
            embed_dim: self.embed_dim,
            encoder: self.encoder,
            train_embeddings: self.train_embeddings,
            embed_dropout: self.embed_dropout,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            adam_eps: self.adam_eps,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            max_steps: self.max_steps,
            seed: self.seed,
        }
    }

    /// Copies model settings from `m`, e.g. those stored in a checkpoint.
    pub fn set_model(&mut self, m: &ModelConfig) {
        self.d_model = m.mega.d_model;
        self.conv_kernel = m.mega.conv_kernel;
        self.heads = m.mega.heads;
        self.fusion_heads = m.mega.fusion_heads;
        self.flip_fraction = m.mega.flip_fraction;
        self.flip_count = m.mega.flip_count;
        self.pf_double_flip = m.mega.pf_double_flip;
        self.pooling = m.mega.pooling;
        self.fusion = m.mega.fusion;
        self.dropout = m.mega.dropout;
        self.embed_dim = m.embed_dim;
        self.encoder = m.encoder;
        self.train_embeddings = m.train_embeddings;
        self.embed_dropout = m.embed_dropout;
    }

    pub fn format_of(&self, path: &Path) -> CorpusFormat {
        self.format.unwrap_or_else(|| CorpusFormat::from_path(path))
    }
}
