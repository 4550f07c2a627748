//! Training loop, validation and experiment runs.

use std::fs::{File, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor};
use crate::datagen::{generate_range, Scene};
use crate::denoising::{assemble_decoder_input, make_denoising_groups, AttentionMask, GtObject, QueryBatch};
use crate::error::{io_err, Error, Result};
use crate::harness::checkpoint;
use crate::harness::config::TrainConfig;
use crate::harness::optim::{clip_global_norm, AdamW};
use crate::losses::{total_loss, LossBreakdown, LossWeights};
use crate::matching::{build_cost_matrix, hungarian_assign, MatchWeights};
use crate::metrics::{
    average_precision, coco_thresholds, dataset_instability, index_vector, mean_average_precision,
    Detection, EpochRecord, EpochRow, EvalImage, IndexVector, CSV_HEADER,
};
use crate::model::{decode, model_forward, FeatureMap, Mode, ModelParams};

// Training streams sit at the top of the stream space, far from the
// per-scene streams the dataset uses.
const INIT_STREAM: u64 = u64::MAX;
const SHUFFLE_STREAM: u64 = u64::MAX - 1;
const NOISE_STREAM: u64 = u64::MAX - 2;

fn stream(seed: u64, s: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s);
    rng
}

pub fn init_params(cfg: &TrainConfig) -> Result<ModelParams> {
    ModelParams::init(cfg.model(), &mut stream(cfg.seed, INIT_STREAM))
}

/// Total loss and its gradient for every parameter, for one scene and a
/// fixed query batch.
pub fn loss_and_grads(
    params: &ModelParams,
    features: &FeatureMap,
    gts: &[GtObject],
    batch: &QueryBatch,
    mask: Option<&AttentionMask>,
    match_weights: &MatchWeights,
    loss_weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let out = decode(&mut g, &bound, &params.config, features, batch, mask, Mode::Train)?;
    let finite = out
        .layers
        .iter()
        .all(|l| g.value(l.logits).iter().chain(g.value(l.boxes).iter()).all(|x| x.is_finite()));
    if !finite {
        let nan = LossBreakdown {
            total: f64::NAN,
            ..LossBreakdown::default()
        };
        return Ok((nan, Vec::new()));
    }
    let loss = total_loss(&mut g, &out, batch, gts, match_weights, loss_weights);
    if !loss.breakdown.is_finite() {
        return Ok((loss.breakdown, Vec::new()));
    }
    let mut grads = g.backward(loss.total)?;
    let tensors = bound
        .vars
        .iter()
        .zip(params.tensors())
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.dim())))
        .collect();
    Ok((loss.breakdown, tensors))
}

/// Model, optimizer state and the training random streams.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: ModelParams,
    opt: AdamW,
    shuffle_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg)?;
        let opt = AdamW::new(params.tensors().iter().map(|t| t.dim()), cfg.weight_decay);
        Ok(Self {
            shuffle_rng: stream(cfg.seed, SHUFFLE_STREAM),
            noise_rng: stream(cfg.seed, NOISE_STREAM),
            cfg,
            params,
            opt,
            epoch: 0,
        })
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    fn query_batch(&mut self, gts: &[GtObject]) -> Result<QueryBatch> {
        let cfg = &self.cfg;
        if cfg.baseline {
            return Ok(assemble_decoder_input(&[], cfg.queries));
        }
        let groups =
            make_denoising_groups(gts, cfg.dn_groups, &cfg.noise(), cfg.n_classes, &mut self.noise_rng)?;
        Ok(assemble_decoder_input(&groups, cfg.queries))
    }

    /// One pass over `scenes` in shuffled mini-batches; returns per-scene mean losses.
    pub fn train_epoch(&mut self, scenes: &[Scene]) -> Result<LossBreakdown> {
        if scenes.is_empty() {
            return Err(crate::error::invalid("no training scenes"));
        }
        let lr = self.cfg.lr_at(self.epoch);
        let (mw, lw) = (self.cfg.match_weights(), self.cfg.loss_weights());
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut self.shuffle_rng);

        let mut sum = LossBreakdown::default();
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut acc: Vec<Tensor> = self.params.tensors().iter().map(|t| Tensor::zeros(t.dim())).collect();
            for &i in chunk {
                let scene = &scenes[i];
                let batch = self.query_batch(&scene.objects)?;
                let mask = self.cfg.attention_mask.then(|| batch.mask());
                let (parts, grads) =
                    loss_and_grads(&self.params, &scene.features, &scene.objects, &batch, mask.as_ref(), &mw, &lw)?;
                if !parts.is_finite() || grads.iter().any(|g| g.iter().any(|x| !x.is_finite())) {
                    return Err(Error::NonFiniteLoss {
                        epoch: self.epoch + 1,
                        batch: b,
                        detail: format!("scene {}: {parts:?}", scene.index),
                    });
                }
                sum.add_assign(&parts);
                for (a, g) in acc.iter_mut().zip(&grads) {
                    *a += g;
                }
            }
            let k = 1.0 / chunk.len() as f64;
            acc.iter_mut().for_each(|a| a.mapv_inplace(|x| x * k));
            clip_global_norm(&mut acc, self.cfg.grad_clip);
            self.opt.step(self.params.tensors_mut(), &acc, lr);
        }
        self.epoch += 1;
        Ok(sum.scaled(1.0 / scenes.len() as f64))
    }
}

/// Validation results of one model state.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub index_vectors: Vec<IndexVector>,
    pub ap50: f64,
    pub mean_ap: f64,
}

/// Final-layer inference on `scenes`: matching index vectors and AP.
pub fn evaluate(params: &ModelParams, match_weights: &MatchWeights, scenes: &[Scene]) -> Result<Evaluation> {
    let config = params.config;
    let batch = assemble_decoder_input(&[], config.queries);
    let mut index_vectors = Vec::with_capacity(scenes.len());
    let mut images = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let layers = model_forward(params, &scene.features, &batch, None, Mode::Infer)?;
        let last = layers.last().expect("decoder has layers");
        let probs = last.probs();
        let boxes = last.boxes();
        let cost = build_cost_matrix(&probs, config.n_classes, &boxes, &scene.objects, match_weights)?;
        index_vectors.push(index_vector(&hungarian_assign(&cost).0, config.queries)?);
        let detections = probs
            .chunks(config.n_classes)
            .zip(&boxes)
            .map(|(p, &bbox)| {
                let (label, &score) = p
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .expect("at least one class");
                Detection { bbox, score, label }
            })
            .collect();
        images.push(EvalImage {
            detections,
            gts: scene.objects.clone(),
        });
    }
    Ok(Evaluation {
        index_vectors,
        ap50: average_precision(&images, config.n_classes, 0.5),
        mean_ap: mean_average_precision(&images, config.n_classes, &coco_thresholds()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub records: Vec<EpochRecord>,
    pub final_ap50: f64,
    pub config_digest: String,
    pub params: ModelParams,
}

impl ExperimentResult {
    /// Mean instability over every epoch that has one.
    pub fn mean_instability(&self) -> f64 {
        let v: Vec<f64> = self.records.iter().filter_map(|r| r.mean_is).collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn ap50_at(&self, epoch: usize) -> Option<f64> {
        self.records.iter().find(|r| r.epoch == epoch).map(|r| r.ap50)
    }

    pub fn epoch_secs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.wall_secs).collect()
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Directory receiving `metrics.csv`, `config.toml` and `final.ckpt`.
    pub out_dir: Option<PathBuf>,
    /// Replace results already present in `out_dir`.
    pub force: bool,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "final.ckpt";

struct CsvSink {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvSink {
    fn create(path: PathBuf) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(io_err(&path))?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        writer
            .write_record(CSV_HEADER)
            .and_then(|_| writer.flush().map_err(Into::into))
            .map_err(|source| Error::Csv { path: path.clone(), source })?;
        Ok(Self { path, writer })
    }

    fn append(&mut self, record: &EpochRecord) -> Result<()> {
        let path = &self.path;
        self.writer
            .serialize(EpochRow::from(record))
            .and_then(|_| self.writer.flush().map_err(Into::into))
            .map_err(|source| Error::Csv { path: path.clone(), source })
    }
}

fn prepare_out_dir(dir: &Path, cfg: &TrainConfig, force: bool) -> Result<CsvSink> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let metrics = dir.join(METRICS_FILE);
    if metrics.exists() && !force {
        return Err(Error::AlreadyExists(dir.to_path_buf()));
    }
    let config_path = dir.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_toml()).map_err(io_err(&config_path))?;
    CsvSink::create(metrics)
}

/// Builds the training and validation scenes of `cfg`.
pub fn build_dataset(cfg: &TrainConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let d = cfg.dataset();
    Ok((generate_range(&d, d.train_indices())?, generate_range(&d, d.val_indices())?))
}

pub fn run_experiment(cfg: &TrainConfig, opts: &RunOptions) -> Result<ExperimentResult> {
    let (train, val) = build_dataset(cfg)?;
    run_experiment_on(cfg, &train, &val, opts, &mut |_| {})
}

/// Trains for `cfg.epochs`, evaluating `val` after each epoch. `on_epoch`
/// sees every record as soon as it is written.
pub fn run_experiment_on(
    cfg: &TrainConfig,
    train: &[Scene],
    val: &[Scene],
    opts: &RunOptions,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<ExperimentResult> {
    cfg.validate()?;
    let mut sink = match &opts.out_dir {
        Some(dir) => Some(prepare_out_dir(dir, cfg, opts.force)?),
        None => None,
    };
    let mw = cfg.match_weights();
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut records: Vec<EpochRecord> = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let lr = cfg.lr_at(e);
        let start = Instant::now();
        let losses = trainer.train_epoch(train)?;
        let wall_secs = start.elapsed().as_secs_f64();
        let eval = evaluate(&trainer.params, &mw, val)?;
        let mean_is = match records.last() {
            Some(prev) => Some(dataset_instability(&eval.index_vectors, &prev.index_vectors)?),
            None => None,
        };
        let record = EpochRecord {
            epoch: e + 1,
            index_vectors: eval.index_vectors,
            mean_is,
            ap50: eval.ap50,
            mean_ap: eval.mean_ap,
            losses,
            lr,
            wall_secs,
        };
        if let Some(s) = sink.as_mut() {
            s.append(&record)?;
        }
        on_epoch(&record);
        records.push(record);
    }
    if let Some(dir) = &opts.out_dir {
        checkpoint::save(&dir.join(CHECKPOINT_FILE), cfg, &trainer.params)?;
    }
    Ok(ExperimentResult {
        final_ap50: records.last().map_or(0.0, |r| r.ap50),
        records,
        config_digest: cfg.digest(),
        params: trainer.params,
    })
}

/// Reads the rows of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<EpochRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|source| Error::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    reader
        .deserialize()
        .collect::<std::result::Result<Vec<EpochRow>, _>>()
        .map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })
}
