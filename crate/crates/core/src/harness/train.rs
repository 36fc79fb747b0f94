use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{RunConfig, Variant};
use super::model::{organ_phrase, prompt_tokens, prompt_vocabulary, step_loss, Model, ModelConfig};
use super::optim::{adam_step, cosine_lr, default_lr_min, AdamState};
use crate::error::{Error, Result};
use crate::objectives::{class_scores, ClassScores, THRESHOLD};
use crate::params::ParamStore;
use crate::prompt::{TokenSequence, Vocabulary};
use crate::synthdata::{Dataset, Split, SplitData};
use crate::tensor::{read_checkpoint, write_checkpoint, Tape, Tensor};

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const RUN_FILE: &str = "run.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const LOSS_FILE: &str = "loss.csv";
pub const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub class: String,
    pub dice: f64,
    pub jaccard: f64,
}

/// Scores of one model on one split. Timing is kept out of the serialized form
/// so that identical runs produce identical JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: Split,
    pub variant: Variant,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub classes: Vec<ClassMetric>,
    pub mean_dice: f64,
    pub mean_jaccard: f64,
    pub best_step: usize,
    /// Total training loss per step.
    pub loss_curve: Vec<f64>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl MetricsReport {
    fn new(
        split: Split,
        run: &RunConfig,
        dataset_hash: String,
        class_names: &[String],
        scores: &ClassScores,
    ) -> Self {
        let classes: Vec<ClassMetric> = class_names
            .iter()
            .zip(scores.dice.iter().zip(&scores.jaccard))
            .map(|(name, (&dice, &jaccard))| ClassMetric {
                class: name.clone(),
                dice,
                jaccard,
            })
            .collect();
        let k = classes.len() as f64;
        Self {
            split,
            variant: run.variant,
            seed: run.seed,
            config_hash: run.hash(),
            dataset_hash,
            mean_dice: classes.iter().map(|c| c.dice).sum::<f64>() / k,
            mean_jaccard: classes.iter().map(|c| c.jaccard).sum::<f64>() / k,
            classes,
            best_step: 0,
            loss_curve: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// Rows of `run_id,variant,class,dice,jaccard,seed`, mean last.
    pub fn csv_rows(&self, run_id: &str) -> Vec<String> {
        self.classes
            .iter()
            .map(|c| (c.class.as_str(), c.dice, c.jaccard))
            .chain([("mean", self.mean_dice, self.mean_jaccard)])
            .map(|(class, d, j)| format!("{run_id},{},{class},{d},{j},{}", self.variant, self.seed))
            .collect()
    }
}

pub const METRICS_CSV_HEADER: &str = "run_id,variant,class,dice,jaccard,seed";

/// What a run directory needs to rebuild its model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: RunConfig,
    pub model: ModelConfig,
    pub organ_phrase: String,
    pub class_names: Vec<String>,
    pub dataset_hash: String,
}

/// A model with its weights.
#[derive(Debug, Clone)]
pub struct Trained {
    pub record: RunRecord,
    pub model: Model,
    pub store: ParamStore,
    pub vocab: Vocabulary,
}

/// One line of the loss curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub seg: Option<f64>,
    pub align: Option<f64>,
}

/// Result of [`train`]: the best-validation model and its validation report.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub trained: Trained,
    pub report: MetricsReport,
    pub log: Vec<StepLog>,
}

fn build(run: &RunConfig, dataset: &Dataset) -> Result<Trained> {
    let synth = &dataset.manifest.config;
    if run.num_classes != synth.num_classes() {
        return Err(Error::Dataset(format!(
            "config expects {} classes but the dataset has {}",
            run.num_classes,
            synth.num_classes()
        )));
    }
    let class_names: Vec<String> = synth.organs.iter().map(|o| o.name.clone()).collect();
    let phrase = organ_phrase(run.num_classes, &class_names);
    let vocab = prompt_vocabulary(&phrase);
    let config = ModelConfig::from_run(run, vocab.len());
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let model = Model::new(&mut store, &mut rng, config);
    Ok(Trained {
        record: RunRecord {
            run: run.clone(),
            model: config,
            organ_phrase: phrase,
            class_names,
            dataset_hash: dataset.hash()?,
        },
        model,
        store,
        vocab,
    })
}

impl Trained {
    pub fn tokens(&self, data: &SplitData) -> Result<Vec<TokenSequence>> {
        let records: Vec<_> = data.records.iter().collect();
        prompt_tokens(
            &records,
            &self.record.organ_phrase,
            self.record.run.variant.uses_time(),
            &self.vocab,
            self.record.run.max_len,
        )
    }

    /// Probability maps `[n, K, H, W]` for a whole split.
    pub fn predict(&self, data: &SplitData) -> Result<Tensor> {
        let tokens = self.tokens(data)?;
        let mut parts = Vec::with_capacity(data.len());
        let rows: Vec<usize> = (0..data.len()).collect();
        for chunk in rows.chunks(EVAL_BATCH) {
            let (images, _) = data.gather(chunk)?;
            let batch_tokens: Vec<TokenSequence> =
                chunk.iter().map(|&r| tokens[r].clone()).collect();
            let tape = Tape::new();
            let p = self.store.bind(&tape);
            let out = self
                .model
                .forward(&p, tape.constant(images), &batch_tokens)?;
            let probs = out.probs.value();
            for i in 0..chunk.len() {
                parts.push(probs.index_outer(i)?);
            }
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::stack(&refs)?)
    }

    pub fn evaluate(&self, data: &SplitData, split: Split) -> Result<MetricsReport> {
        if data.num_classes() != self.record.run.num_classes {
            return Err(Error::Dataset(format!(
                "checkpoint predicts {} classes but the split has {}",
                self.record.run.num_classes,
                data.num_classes()
            )));
        }
        let probs = self.predict(data)?;
        let scores = class_scores(&probs, &data.masks, THRESHOLD)?;
        Ok(MetricsReport::new(
            split,
            &self.record.run,
            self.record.dataset_hash.clone(),
            &self.record.class_names,
            &scores,
        ))
    }

    /// Writes the weights, run record and vocabulary into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        let f = fs::File::create(&ckpt).map_err(Error::io(&ckpt))?;
        write_checkpoint(std::io::BufWriter::new(f), &self.store.to_named())
            .map_err(Error::io(&ckpt))?;
        write_json(&dir.join(RUN_FILE), &self.record)?;
        write_json(&dir.join(VOCAB_FILE), &self.vocab)
    }

    /// Loads a checkpoint written by [`Trained::save`]; the run record and
    /// vocabulary are read from the same directory.
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let dir = checkpoint.parent().unwrap_or(Path::new("."));
        let record: RunRecord = read_json(&dir.join(RUN_FILE))?;
        let vocab: Vocabulary = read_json(&dir.join(VOCAB_FILE))?;
        if vocab.len() != record.model.text.vocab_size {
            return Err(Error::Dataset("vocabulary does not match the model".into()));
        }
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, &mut ChaCha8Rng::seed_from_u64(0), record.model);
        let f = fs::File::open(checkpoint).map_err(Error::io(checkpoint))?;
        let named = read_checkpoint(std::io::BufReader::new(f)).map_err(Error::io(checkpoint))?;
        store.load_named(&named)?;
        Ok(Self {
            record,
            model,
            store,
            vocab,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::json(path))?;
    fs::write(path, text).map_err(Error::io(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(path))
}

/// Mirrors `[.., W]` rows of the selected samples in place.
fn hflip(t: &mut Tensor, flips: &[bool]) {
    let shape = t.shape().to_vec();
    let w = shape[shape.len() - 1];
    let per_sample: usize = shape[1..].iter().product();
    for (sample, &flip) in t.data_mut().chunks_mut(per_sample).zip(flips) {
        if flip {
            sample.chunks_mut(w).for_each(<[f64]>::reverse);
        }
    }
}

/// Batches drawn from a reshuffled permutation of the training rows. Order and
/// flips depend only on the seed, never on the model.
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn new(seed: u64, n: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        Self {
            rng,
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self, batch: usize) -> (Vec<usize>, Vec<bool>) {
        let mut rows = Vec::with_capacity(batch);
        while rows.len() < batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            rows.push(self.order[self.pos]);
            self.pos += 1;
        }
        let flips = (0..batch).map(|_| self.rng.gen_bool(0.5)).collect();
        (rows, flips)
    }
}

/// Trains on the training split, keeping the weights with the best validation
/// mean Dice. `observer` sees every step.
pub fn train(
    run: &RunConfig,
    dataset: &Dataset,
    mut observer: impl FnMut(&StepLog),
) -> Result<TrainOutcome> {
    run.validate()?;
    let start = Instant::now();
    let train_data = dataset.load(Split::Train)?;
    let val_data = dataset.load(Split::Val)?;
    let mut trained = build(run, dataset)?;
    let tokens = trained.tokens(&train_data)?;
    let mut adam = AdamState::new(&trained.store);
    let mut sampler = Sampler::new(run.seed, train_data.len());
    let lr_min = default_lr_min(run.lr0);
    let warmup = if run.effective_beta() > 0.0 {
        run.align_warmup_steps
    } else {
        0
    };

    let mut log = Vec::with_capacity(run.steps);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    for step in 0..run.steps {
        let (rows, flips) = sampler.next(run.batch_size);
        let (mut images, mut masks) = train_data.gather(&rows)?;
        if run.hflip {
            hflip(&mut images, &flips);
            hflip(&mut masks, &flips);
        }
        let batch_tokens: Vec<TokenSequence> = rows.iter().map(|&r| tokens[r].clone()).collect();
        let lr = cosine_lr(step, run.steps, run.lr0, lr_min)?;

        let tape = Tape::new();
        let entry = {
            let p = trained.store.bind(&tape);
            let out = trained
                .model
                .forward(&p, tape.constant(images), &batch_tokens)?;
            let loss = step_loss(&out, tape.constant(masks), run, step >= warmup)?;
            let grads = tape.backward(loss.total)?;
            trained.store.absorb_grads(&grads, &p);
            StepLog {
                step,
                lr,
                total: loss.total.item().expect("scalar loss"),
                seg: loss.seg.and_then(|v| v.item()),
                align: loss.align.and_then(|v| v.item()),
            }
        };
        adam_step(&mut trained.store, &mut adam, lr, run.weight_decay)?;
        observer(&entry);
        log.push(entry);

        let done = step + 1;
        if done >= warmup && (done % run.eval_every == 0 || done == run.steps) {
            let score = trained.evaluate(&val_data, Split::Val)?.mean_dice;
            if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
                best = Some((score, done, trained.store.clone()));
            }
        }
    }
    let (_, best_step, store) = best.expect("at least one validation pass");
    trained.store = store;
    let mut report = trained.evaluate(&val_data, Split::Val)?;
    report.best_step = best_step;
    report.loss_curve = log.iter().map(|l| l.total).collect();
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        trained,
        report,
        log,
    })
}

/// Writes `loss.csv` for a training log.
pub fn write_loss_csv(path: &Path, log: &[StepLog]) -> Result<()> {
    let mut out = String::from("step,lr,total,seg,align\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for l in log {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            l.step,
            l.lr,
            l.total,
            opt(l.seg),
            opt(l.align)
        ));
    }
    fs::write(path, out).map_err(Error::io(path))
}

/// Appends metric rows to a CSV file, writing the header for a new file.
pub fn append_metrics_csv(path: &PathBuf, report: &MetricsReport, run_id: &str) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(Error::io(path))?;
    let mut text = String::new();
    if fresh {
        text.push_str(METRICS_CSV_HEADER);
        text.push('\n');
    }
    for row in report.csv_rows(run_id) {
        text.push_str(&row);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hflip_mirrors_rows_of_selected_samples() {
        let mut t = Tensor::from_fn([2, 1, 1, 3], |i| i as f64);
        hflip(&mut t, &[true, false]);
        assert_eq!(t.data(), &[2.0, 1.0, 0.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn sampler_covers_every_row_each_epoch() {
        let mut s = Sampler::new(4, 10);
        let (a, _) = s.next(5);
        let (b, _) = s.next(5);
        let mut all: Vec<usize> = a.into_iter().chain(b).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        let mut t = Sampler::new(4, 10);
        let mut u = Sampler::new(4, 10);
        assert_eq!(t.next(7), u.next(7));
    }
}
