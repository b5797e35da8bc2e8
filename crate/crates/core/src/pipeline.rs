//! Dataset assembly, stratified cross-validation, training, ensembling,
//! soft pseudo-labeling and the confidence-threshold baseline.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::audio_io::{random_segment, resample, z_normalize, AudioClip, AudioError};
use crate::augment::{argmax, is_on_simplex, one_hot, AugmentError, Augmenter, Label, LabeledExample};
use crate::dsp::{DspError, MelExtractor, MelSpec, SpecConfig};
use crate::eval::{confusion_matrix, metrics, EvalError, MetricsReport};
use crate::nn::{
    adam_step, backward, forward, init_model, lr_schedule, model_to_bytes, AdamHyper, AdamState, Architecture,
    ClassProb, ModelParams, NnError, TrainConfig,
};
use crate::seed::{derive_seed, stable_hash};
use crate::{NUM_CLASSES, UNKNOWN_CLASS};

/// Tolerance for simplex checks on labels and model outputs.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Error, Debug)]
pub enum PipelineError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("known dataset contains label {class} outside classes 0-4 (example {id})")]
    KnownLabel { id: String, class: usize },
    #[error("class {class} has {count} examples, fewer than {k} folds")]
    TooFewExamples { class: usize, count: usize, k: usize },
    #[error("fold {fold} out of range for {k} folds")]
    FoldOutOfRange { fold: usize, k: usize },
    #[error("no models given")]
    NoModels,
    #[error("label of {id} is not on the simplex")]
    OffSimplex { id: String },
    #[error("threshold {0} outside (0, 1)")]
    InvalidThreshold(f64),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {reason}")]
    Csv { path: PathBuf, line: usize, reason: String },
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Where an example came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Source {
    Known,
    UnknownExternal,
    Pseudo,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Known => "known",
            Source::UnknownExternal => "unknown-external",
            Source::Pseudo => "pseudo",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: String,
    pub spec: MelSpec,
    pub label: Label,
    pub source: Source,
}

impl Example {
    /// Argmax of the label.
    pub fn class(&self) -> usize {
        argmax(&self.label)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>) -> Self {
        Self { examples }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_histogram(&self) -> [usize; NUM_CLASSES] {
        let mut hist = [0; NUM_CLASSES];
        self.examples.iter().for_each(|e| hist[e.class()] += 1);
        hist
    }

    pub fn specs(&self) -> Vec<MelSpec> {
        self.examples.iter().map(|e| e.spec.clone()).collect()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.examples.iter().map(Example::class).collect()
    }

    /// Sub-dataset restricted to the given classes.
    pub fn filter_classes(&self, keep: &[usize]) -> Dataset {
        Dataset::new(
            self.examples
                .iter()
                .filter(|e| keep.contains(&e.class()))
                .cloned()
                .collect(),
        )
    }
}

/// Waveform -> resample -> Z-normalise -> fixed-length segment -> log-mel.
#[derive(Debug)]
pub struct FrontEnd {
    extractor: MelExtractor,
    segment_s: f64,
}

impl FrontEnd {
    pub fn new(spec: SpecConfig, segment_s: f64) -> Result<Self> {
        if !(segment_s > 0.0) {
            return Err(PipelineError::Invalid(format!("segment length {segment_s} s must be positive")));
        }
        Ok(Self {
            extractor: MelExtractor::new(spec)?,
            segment_s,
        })
    }

    pub fn spec_config(&self) -> &SpecConfig {
        self.extractor.config()
    }

    pub fn segment_s(&self) -> f64 {
        self.segment_s
    }

    /// Features of one clip; `seed` fixes the segment position.
    pub fn features(&self, clip: &AudioClip, seed: u64) -> Result<MelSpec> {
        let clip = resample(clip, self.spec_config().sample_rate)?;
        let clip = z_normalize(&clip)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let segment = random_segment(&clip, self.segment_s, &mut rng)?;
        Ok(self.extractor.transform(&segment)?)
    }

    /// Features for many clips in parallel; the segment seed of each clip is
    /// derived from `seed` and its id, so results do not depend on order.
    pub fn features_batch(&self, clips: &[(&str, &AudioClip)], seed: u64) -> Result<Vec<MelSpec>> {
        clips
            .par_iter()
            .map(|(id, clip)| self.features(clip, clip_seed(seed, id)))
            .collect()
    }
}

/// Segment seed of the clip named `id`.
pub fn clip_seed(seed: u64, id: &str) -> u64 {
    derive_seed(seed, stable_hash(id.as_bytes()))
}

/// Known-class examples plus every unknown-source example relabelled to
/// one-hot class 5 and tagged as external.
pub fn assemble_unknown(known: Dataset, unknown_sources: Vec<Dataset>) -> Result<Dataset> {
    let mut out = known;
    for e in &out.examples {
        if !is_on_simplex(&e.label, SIMPLEX_TOL) || e.class() >= UNKNOWN_CLASS {
            return Err(PipelineError::KnownLabel {
                id: e.id.clone(),
                class: e.class(),
            });
        }
    }
    for source in unknown_sources {
        out.examples.extend(source.examples.into_iter().map(|e| Example {
            label: one_hot(UNKNOWN_CLASS),
            source: Source::UnknownExternal,
            ..e
        }));
    }
    Ok(out)
}

/// Fold id of every example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: Vec<usize>,
}

impl FoldSplit {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == fold).collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != fold).collect()
    }
}

/// Stratified k-fold split on label argmax. Each class is shuffled and dealt
/// round-robin, continuing the deal where the previous class stopped, so
/// fold sizes differ by at most one overall and per class.
pub fn make_folds(ds: &Dataset, k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(PipelineError::Invalid(format!("need at least 2 folds, got {k}")));
    }
    if let Some(e) = ds.examples.iter().find(|e| e.source == Source::Pseudo) {
        return Err(PipelineError::Invalid(format!(
            "pseudo-labelled example {} cannot be stratified",
            e.id
        )));
    }
    let hist = ds.class_histogram();
    let mut assignment = vec![0; ds.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut next = 0;
    for (class, &count) in hist.iter().enumerate() {
        if count == 0 {
            continue;
        }
        if count < k {
            return Err(PipelineError::TooFewExamples { class, count, k });
        }
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.examples[i].class() == class).collect();
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldSplit { k, assignment })
}

/// Everything needed to train one model.
#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub arch: Architecture,
    pub train: TrainConfig,
    pub augmenter: Augmenter,
}

/// Per-epoch summary of a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

/// Trains a model on `examples` (all used for training) with mini-batch Adam,
/// per-epoch exponential decay and on-the-fly augmentation. Mixing partners
/// are drawn from the same training set. Every batch's outputs are checked to
/// lie on the simplex.
pub fn train_model(
    examples: &[&Example],
    settings: &TrainSettings,
    seed: u64,
) -> Result<(ModelParams, Vec<EpochStats>)> {
    let cfg = &settings.train;
    cfg.validate()?;
    let mut params: ModelParams = init_model(&settings.arch, derive_seed(seed, 0));
    let mut state = AdamState::new(&params);
    let hyper = AdamHyper::from(cfg);
    let mut stats = Vec::with_capacity(cfg.epochs);
    if examples.is_empty() {
        return if cfg.epochs == 0 {
            Ok((params, stats))
        } else {
            Err(PipelineError::Invalid("no training examples".into()))
        };
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(seed, 1 + epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed);
        order.shuffle(&mut rng);
        let lr = lr_schedule(cfg.learning_rate, cfg.decay_rate, epoch);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(epoch_seed, b as u64));
            let mut specs = Vec::with_capacity(chunk.len());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let partner = examples[rng.random_range(0..examples.len())];
                let out = settings.augmenter.apply(
                    &LabeledExample {
                        spec: examples[i].spec.clone(),
                        label: examples[i].label,
                    },
                    &LabeledExample {
                        spec: partner.spec.clone(),
                        label: partner.label,
                    },
                    &mut rng,
                )?;
                specs.push(out.spec);
                labels.push(out.label);
            }
            let batch = backward(&params, &specs, &labels, cfg.label_smoothing)?;
            if let Some(p) = batch.probs.iter().find(|p| !is_on_simplex(&p.0, SIMPLEX_TOL)) {
                return Err(PipelineError::Invalid(format!("model output {:?} left the simplex", p.0)));
            }
            loss_sum += batch.loss * chunk.len() as f64;
            adam_step(&mut params, &batch.grads, &mut state, lr, hyper)?;
        }
        let mean_loss = loss_sum / examples.len() as f64;
        log::debug!("epoch {epoch}: lr {lr:.3e}, loss {mean_loss:.4}");
        stats.push(EpochStats { epoch, lr, mean_loss });
    }
    if !params.is_finite() {
        return Err(PipelineError::Invalid("training diverged to non-finite parameters".into()));
    }
    Ok((params, stats))
}

/// Probability mean over models for each input.
pub fn ensemble_probs(models: &[ModelParams], specs: &[MelSpec]) -> Result<Vec<ClassProb>> {
    if models.is_empty() {
        return Err(PipelineError::NoModels);
    }
    let outputs = models
        .iter()
        .map(|m| forward(m, specs))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((0..specs.len())
        .map(|i| {
            let rows: Vec<&[f64]> = outputs.iter().map(|o| &o[i].0[..]).collect();
            let mean = mean_probabilities(&rows);
            ClassProb(mean.try_into().expect("six classes"))
        })
        .collect())
}

/// Ensemble prediction for a single spectrogram.
pub fn ensemble_predict(models: &[ModelParams], spec: &MelSpec) -> Result<ClassProb> {
    Ok(ensemble_probs(models, std::slice::from_ref(spec))?.remove(0))
}

/// Elementwise mean of equally long probability vectors.
pub fn mean_probabilities(outputs: &[&[f64]]) -> Vec<f64> {
    let Some(first) = outputs.first() else {
        return Vec::new();
    };
    let mut mean = vec![0.0; first.len()];
    for out in outputs {
        mean.iter_mut().zip(out.iter()).for_each(|(m, p)| *m += p);
    }
    let n = outputs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Soft labels for unlabelled inputs: the ensemble output, no thresholding.
pub fn pseudo_label(models: &[ModelParams], unlabeled: &[MelSpec]) -> Result<Vec<Label>> {
    Ok(ensemble_probs(models, unlabeled)?.into_iter().map(|p| p.0).collect())
}

/// Wraps pseudo-labelled spectrograms as training examples.
pub fn pseudo_examples(items: Vec<(String, MelSpec, Label)>) -> Result<Vec<Example>> {
    items
        .into_iter()
        .map(|(id, spec, label)| {
            if !is_on_simplex(&label, SIMPLEX_TOL) {
                return Err(PipelineError::OffSimplex { id });
            }
            Ok(Example {
                id,
                spec,
                label,
                source: Source::Pseudo,
            })
        })
        .collect()
}

/// Predictions and metrics of models on a labelled dataset.
pub fn evaluate(models: &[ModelParams], ds: &Dataset) -> Result<(Vec<ClassProb>, MetricsReport)> {
    let probs = ensemble_probs(models, &ds.specs())?;
    let preds: Vec<usize> = probs.iter().map(ClassProb::argmax).collect();
    let report = metrics(&confusion_matrix(&preds, &ds.classes())?)?;
    Ok((probs, report))
}

/// Accuracy of hard predictions against the dataset classes.
pub fn accuracy(preds: &[usize], ds: &Dataset) -> f64 {
    let hits = preds.iter().zip(&ds.examples).filter(|(p, e)| **p == e.class()).count();
    hits as f64 / ds.len().max(1) as f64
}

/// Trains on every fold but `fold` (plus `extra` examples) and evaluates on
/// the held-out fold without augmentation.
pub fn train_fold(
    ds: &Dataset,
    split: &FoldSplit,
    fold: usize,
    extra: &[Example],
    settings: &TrainSettings,
    seed: u64,
) -> Result<(ModelParams, MetricsReport)> {
    if fold >= split.k {
        return Err(PipelineError::FoldOutOfRange { fold, k: split.k });
    }
    if split.assignment.len() != ds.len() {
        return Err(PipelineError::Invalid("fold split does not match the dataset".into()));
    }
    let mut train: Vec<&Example> = split.train_indices(fold).into_iter().map(|i| &ds.examples[i]).collect();
    train.extend(extra);
    let held_out = Dataset::new(split.test_indices(fold).into_iter().map(|i| ds.examples[i].clone()).collect());
    let (model, _) = train_model(&train, settings, derive_seed(seed, fold as u64))?;
    let (_, report) = evaluate(std::slice::from_ref(&model), &held_out)?;
    Ok((model, report))
}

/// Fold models and held-out reports of one cross-validation run.
#[derive(Debug, Clone)]
pub struct CvResult {
    pub models: Vec<ModelParams>,
    pub reports: Vec<MetricsReport>,
}

impl CvResult {
    pub fn mean_macro_f1(&self) -> f64 {
        self.reports.iter().map(|r| r.macro_f1).sum::<f64>() / self.reports.len() as f64
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.reports.iter().map(|r| r.accuracy).sum::<f64>() / self.reports.len() as f64
    }

    /// `key=value` report with full-precision metrics and a digest of every
    /// fold model, so equal text means bit-identical training.
    pub fn report_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "folds={}", self.reports.len());
        for (f, (r, m)) in self.reports.iter().zip(&self.models).enumerate() {
            let digest = model_to_bytes(m).map(|b| stable_hash(&b)).unwrap_or(0);
            let _ = writeln!(out, "fold{f}.accuracy={}", r.accuracy);
            let _ = writeln!(out, "fold{f}.macro_precision={}", r.macro_precision);
            let _ = writeln!(out, "fold{f}.macro_recall={}", r.macro_recall);
            let _ = writeln!(out, "fold{f}.macro_f1={}", r.macro_f1);
            let _ = writeln!(out, "fold{f}.model_fnv64={digest:016x}");
        }
        let _ = writeln!(out, "mean_accuracy={}", self.mean_accuracy());
        let _ = writeln!(out, "mean_macro_f1={}", self.mean_macro_f1());
        out
    }
}

/// Stratified k-fold cross-validation; folds train in parallel. `extra`
/// examples (pseudo labels) join every training partition and never a
/// held-out fold.
pub fn run_cv(ds: &Dataset, k: usize, extra: &[Example], settings: &TrainSettings, seed: u64) -> Result<CvResult> {
    let split = make_folds(ds, k, derive_seed(seed, 0xF01D))?;
    let results = (0..k)
        .into_par_iter()
        .map(|fold| train_fold(ds, &split, fold, extra, settings, seed))
        .collect::<Result<Vec<_>>>()?;
    let (models, reports) = results.into_iter().unzip();
    Ok(CvResult { models, reports })
}

/// Cross-validation again with pseudo-labelled examples appended to each
/// training partition. With no pseudo examples this is exactly [`run_cv`].
pub fn retrain_with_pseudo(
    ds: &Dataset,
    k: usize,
    pseudo: &[Example],
    settings: &TrainSettings,
    seed: u64,
) -> Result<CvResult> {
    if let Some(e) = pseudo.iter().find(|e| !is_on_simplex(&e.label, SIMPLEX_TOL)) {
        return Err(PipelineError::OffSimplex { id: e.id.clone() });
    }
    run_cv(ds, k, pseudo, settings, seed)
}

/// Open-set decision from a five-class output: the known class with the
/// highest probability if it reaches `tau`, otherwise class 5. The class-5
/// output of the shared network head is dropped and the rest renormalised.
pub fn threshold_decision(probs: &ClassProb, tau: f64) -> Result<usize> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(PipelineError::InvalidThreshold(tau));
    }
    let known = &probs.0[..UNKNOWN_CLASS];
    let total: f64 = known.iter().sum();
    let best = argmax(known);
    Ok(if known[best] / total >= tau { best } else { UNKNOWN_CLASS })
}

/// Confidence-threshold baseline for one input using a model (or ensemble)
/// trained on classes 0-4 only.
pub fn baseline_threshold_predict(models: &[ModelParams], spec: &MelSpec, tau: f64) -> Result<usize> {
    threshold_decision(&ensemble_predict(models, spec)?, tau)
}

/// Threshold grid 0.50, 0.55, ..., 0.95.
pub fn tau_grid() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

/// Best baseline accuracy over `taus` given precomputed five-class outputs.
pub fn best_threshold_accuracy(probs: &[ClassProb], ds: &Dataset, taus: &[f64]) -> Result<(f64, f64)> {
    let mut best = (f64::NEG_INFINITY, f64::NAN);
    for &tau in taus {
        let preds = probs
            .iter()
            .map(|p| threshold_decision(p, tau))
            .collect::<Result<Vec<_>>>()?;
        let acc = accuracy(&preds, ds);
        if acc > best.0 {
            best = (acc, tau);
        }
    }
    Ok(best)
}

// ---- run-directory files ----------------------------------------------

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// Fold model file name inside a run directory.
pub fn model_file_name(fold: usize) -> String {
    format!("fold{fold}.model")
}

/// Saves fold models and per-fold metrics plus the CV report.
pub fn save_cv(dir: &Path, cv: &CvResult) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (f, (model, report)) in cv.models.iter().zip(&cv.reports).enumerate() {
        let path = dir.join(model_file_name(f));
        crate::nn::save_model(model, &path)?;
        write_text(&dir.join(format!("fold{f}.metrics.txt")), &report.to_text())?;
        write_text(&dir.join(format!("fold{f}.confusion.csv")), &report.confusion.to_csv())?;
    }
    write_text(&dir.join("cv_report.txt"), &cv.report_text())
}

/// Loads every `*.model` in `dir`, sorted by file name.
pub fn load_models(dir: &Path) -> Result<Vec<(String, ModelParams)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "model"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(PipelineError::NoModels);
    }
    paths
        .into_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, crate::nn::load_model(&p)?))
        })
        .collect()
}

fn probs_header() -> String {
    (0..NUM_CLASSES).map(|k| format!(",p{k}")).collect()
}

/// `id,p0..p5` rows of soft labels.
pub fn pseudo_csv(rows: &[(String, Label)]) -> String {
    let mut out = format!("id{}\n", probs_header());
    for (id, label) in rows {
        out.push_str(id);
        label.iter().for_each(|p| {
            let _ = write!(out, ",{p}");
        });
        out.push('\n');
    }
    out
}

/// `filename,predicted,p0..p5` rows; predicted is the argmax.
pub fn predictions_csv(rows: &[(String, ClassProb)]) -> String {
    let mut out = format!("filename,predicted{}\n", probs_header());
    for (id, probs) in rows {
        let _ = write!(out, "{id},{}", probs.argmax());
        probs.0.iter().for_each(|p| {
            let _ = write!(out, ",{p}");
        });
        out.push('\n');
    }
    out
}

fn parse_probs(fields: &[&str]) -> Option<Label> {
    if fields.len() != NUM_CLASSES {
        return None;
    }
    let mut label = [0.0; NUM_CLASSES];
    for (slot, f) in label.iter_mut().zip(fields) {
        *slot = f.trim().parse().ok()?;
    }
    Some(label)
}

/// Reads a file written by [`pseudo_csv`].
pub fn read_pseudo_csv(path: &Path) -> Result<Vec<(String, Label)>> {
    let text = read_text(path)?;
    let bad = |line: usize, reason: &str| PipelineError::Csv {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    };
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            let label = parse_probs(&fields[1..]).ok_or_else(|| bad(n + 1, "expected id and 6 probabilities"))?;
            if !is_on_simplex(&label, SIMPLEX_TOL) {
                return Err(bad(n + 1, "probabilities are not on the simplex"));
            }
            Ok((fields[0].to_string(), label))
        })
        .collect()
}

/// Reads a file written by [`predictions_csv`].
pub fn read_predictions_csv(path: &Path) -> Result<Vec<(String, usize, ClassProb)>> {
    let text = read_text(path)?;
    let bad = |line: usize, reason: &str| PipelineError::Csv {
        path: path.to_path_buf(),
        line,
        reason: reason.into(),
    };
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 2 + NUM_CLASSES {
                return Err(bad(n + 1, "expected filename, class and 6 probabilities"));
            }
            let class: usize = fields[1].trim().parse().map_err(|_| bad(n + 1, "bad class id"))?;
            if class >= NUM_CLASSES {
                return Err(bad(n + 1, "class id out of range"));
            }
            let probs = parse_probs(&fields[2..]).ok_or_else(|| bad(n + 1, "bad probability"))?;
            Ok((fields[0].to_string(), class, ClassProb(probs)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::augment::AugmentConfig;
    use ndarray::Array2;

    fn spec_with(value: f32, class: usize) -> MelSpec {
        // class-dependent stripe so the toy problem is learnable
        let mut values = Array2::from_elem((16, 16), value);
        for c in 0..16 {
            values[[class * 2, c]] += 3.0;
        }
        MelSpec {
            values,
            config: SpecConfig::toy(),
        }
    }

    fn toy_dataset(per_class: usize, classes: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        Dataset::new(
            (0..classes)
                .flat_map(|c| (0..per_class).map(move |i| (c, i)))
                .map(|(c, i)| Example {
                    id: format!("c{c}_{i}"),
                    spec: spec_with(rng.random_range(-0.5..0.5), c),
                    label: one_hot(c),
                    source: if c == UNKNOWN_CLASS { Source::UnknownExternal } else { Source::Known },
                })
                .collect(),
        )
    }

    fn settings(epochs: usize) -> TrainSettings {
        TrainSettings {
            arch: Architecture::new(vec![4, 4, 8, 8]).unwrap(),
            train: TrainConfig {
                epochs,
                batch_size: 8,
                learning_rate: 5e-3,
                ..Default::default()
            },
            augmenter: Augmenter::new(AugmentConfig::disabled()).unwrap(),
        }
    }

    #[test]
    fn assemble_counts_and_tags() {
        let known = toy_dataset(100, 5);
        let unknown = |n: usize, tag: &str| {
            Dataset::new(
                (0..n)
                    .map(|i| Example {
                        id: format!("{tag}{i}"),
                        spec: spec_with(0.0, 0),
                        label: one_hot(2),
                        source: Source::Known,
                    })
                    .collect(),
            )
        };
        let ds = assemble_unknown(known.clone(), vec![unknown(100, "u")]).unwrap();
        assert_eq!(ds.len(), 600);
        assert_eq!(ds.class_histogram(), [100; 6]);
        assert_eq!(assemble_unknown(known.clone(), vec![]).unwrap(), known);
        let ds = assemble_unknown(known, vec![unknown(50, "a"), unknown(50, "b")]).unwrap();
        let unk: Vec<&Example> = ds.examples.iter().filter(|e| e.class() == 5).collect();
        assert_eq!(unk.len(), 100);
        assert!(unk.iter().all(|e| e.source == Source::UnknownExternal));
        let bad = toy_dataset(2, 6);
        assert!(matches!(assemble_unknown(bad, vec![]), Err(PipelineError::KnownLabel { .. })));
    }

    #[test]
    fn folds_are_stratified_partitions() {
        let ds = toy_dataset(100, 6);
        let split = make_folds(&ds, 5, 11).unwrap();
        let mut seen = vec![false; ds.len()];
        for f in 0..5 {
            let idx = split.test_indices(f);
            assert_eq!(idx.len(), 120);
            let mut hist = [0; 6];
            for &i in &idx {
                assert!(!seen[i]);
                seen[i] = true;
                hist[ds.examples[i].class()] += 1;
            }
            assert_eq!(hist, [20; 6]);
            assert_eq!(split.train_indices(f).len(), 480);
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(make_folds(&ds, 5, 11).unwrap(), split);
        assert_ne!(make_folds(&ds, 5, 12).unwrap(), split);
    }

    #[test]
    fn folds_balance_uneven_classes() {
        let mut ds = toy_dataset(7, 6);
        ds.examples.truncate(7 * 6 - 2);
        let split = make_folds(&ds, 5, 0).unwrap();
        let sizes: Vec<usize> = (0..5).map(|f| split.test_indices(f).len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for class in 0..6 {
            let total = ds.examples.iter().filter(|e| e.class() == class).count() as f64;
            for f in 0..5 {
                let n = split.test_indices(f).iter().filter(|&&i| ds.examples[i].class() == class).count() as f64;
                assert!((n - total / 5.0).abs() <= 1.0);
            }
        }
        let tiny = toy_dataset(4, 6);
        assert!(matches!(make_folds(&tiny, 5, 0), Err(PipelineError::TooFewExamples { .. })));
    }

    #[test]
    fn ensemble_means() {
        assert_eq!(mean_probabilities(&[&[0.6, 0.4], &[0.4, 0.6]]), vec![0.5, 0.5]);
        let arch = Architecture::new(vec![2, 2, 2, 2]).unwrap();
        let a: ModelParams = init_model(&arch, 1);
        let b: ModelParams = init_model(&arch, 2);
        let spec = spec_with(0.1, 3);
        let single = forward(&a, std::slice::from_ref(&spec)).unwrap()[0];
        assert_eq!(ensemble_predict(std::slice::from_ref(&a), &spec).unwrap(), single);
        let tripled = ensemble_predict(&[a.clone(), a.clone(), a.clone()], &spec).unwrap();
        for k in 0..6 {
            assert!((tripled.0[k] - single.0[k]).abs() < 1e-15);
        }
        let mixed = ensemble_predict(&[a, b], &spec).unwrap();
        assert!(is_on_simplex(&mixed.0, 1e-12));
        assert!(matches!(ensemble_predict(&[], &spec), Err(PipelineError::NoModels)));
    }

    #[test]
    fn pseudo_labels_are_ensemble_outputs() {
        let arch = Architecture::new(vec![2, 2, 2, 2]).unwrap();
        let models: Vec<ModelParams> = (0..3).map(|s| init_model(&arch, s)).collect();
        let specs: Vec<MelSpec> = (0..4).map(|c| spec_with(0.2, c)).collect();
        let labels = pseudo_label(&models, &specs).unwrap();
        for (label, spec) in labels.iter().zip(&specs) {
            assert!(is_on_simplex(label, 1e-12));
            assert_eq!(*label, ensemble_predict(&models, spec).unwrap().0);
        }
        assert_eq!(pseudo_label(&models, &specs).unwrap(), labels);
        let bad = pseudo_examples(vec![("x".into(), specs[0].clone(), [0.5; 6])]);
        assert!(matches!(bad, Err(PipelineError::OffSimplex { .. })));
    }

    #[test]
    fn threshold_limits_and_monotonicity() {
        let arch = Architecture::new(vec![2, 2, 2, 2]).unwrap();
        let model: ModelParams = init_model(&arch, 4);
        let specs: Vec<MelSpec> = (0..6).map(|c| spec_with(-0.3, c)).collect();
        for spec in &specs {
            let models = std::slice::from_ref(&model);
            assert_ne!(baseline_threshold_predict(models, spec, 1e-9).unwrap(), 5);
            assert_eq!(baseline_threshold_predict(models, spec, 1.0 - 1e-9).unwrap(), 5);
        }
        let probs = ClassProb([0.1, 0.5, 0.2, 0.1, 0.05, 0.05]);
        let mut unknown_seen = false;
        for i in 1..100 {
            let d = threshold_decision(&probs, i as f64 / 100.0).unwrap();
            if unknown_seen {
                assert_eq!(d, 5);
            }
            unknown_seen |= d == 5;
        }
        assert!(threshold_decision(&probs, 0.0).is_err());
        assert!(threshold_decision(&probs, 1.0).is_err());
        assert_eq!(tau_grid().len(), 10);
        assert_eq!(tau_grid()[9], 0.95);
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let ds = toy_dataset(20, 6);
        let split = make_folds(&ds, 5, 0).unwrap();
        let (_, report) = train_fold(&ds, &split, 0, &[], &settings(0), 1).unwrap();
        assert!((0.0..=0.5).contains(&report.accuracy));
    }

    #[test]
    fn training_learns_and_is_deterministic() {
        let ds = toy_dataset(10, 6);
        let split = make_folds(&ds, 5, 0).unwrap();
        let s = settings(25);
        let (m1, r1) = train_fold(&ds, &split, 2, &[], &s, 9).unwrap();
        let (m2, r2) = train_fold(&ds, &split, 2, &[], &s, 9).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(r1, r2);
        assert!(r1.accuracy >= 0.9, "accuracy {}", r1.accuracy);
        assert!(matches!(
            train_fold(&ds, &split, 5, &[], &s, 9),
            Err(PipelineError::FoldOutOfRange { .. })
        ));
    }

    #[test]
    fn empty_pseudo_matches_plain_cv() {
        let ds = toy_dataset(5, 6);
        let s = settings(2);
        let plain = run_cv(&ds, 5, &[], &s, 3).unwrap();
        let retrained = retrain_with_pseudo(&ds, 5, &[], &s, 3).unwrap();
        assert_eq!(plain.report_text(), retrained.report_text());
        assert_eq!(plain.models, retrained.models);
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ("a.wav".to_string(), ClassProb([0.1, 0.2, 0.3, 0.1, 0.2, 0.1])),
            ("b.wav".to_string(), ClassProb([1.0 / 3.0, 0.0, 0.0, 1.0 / 3.0, 0.0, 1.0 / 3.0])),
        ];
        let path = dir.path().join("pred.csv");
        write_text(&path, &predictions_csv(&rows)).unwrap();
        let back = read_predictions_csv(&path).unwrap();
        for ((id, p), (id2, class, p2)) in rows.iter().zip(&back) {
            assert_eq!(id, id2);
            assert_eq!(p, p2);
            assert_eq!(*class, p.argmax());
        }
        let labels: Vec<(String, Label)> = rows.iter().map(|(i, p)| (i.clone(), p.0)).collect();
        let path = dir.path().join("pseudo.csv");
        write_text(&path, &pseudo_csv(&labels)).unwrap();
        assert_eq!(read_pseudo_csv(&path).unwrap(), labels);
        write_text(&path, "id,p0\nx,0.5\n").unwrap();
        assert!(matches!(read_pseudo_csv(&path), Err(PipelineError::Csv { line: 2, .. })));
    }

    #[test]
    fn front_end_shapes_and_determinism() {
        let fe = FrontEnd::new(SpecConfig::toy(), 1.0).unwrap();
        let clip = AudioClip {
            samples: (0..12000).map(|i| (i as f32 * 0.05).sin()).collect(),
            sample_rate: 16000,
        };
        let a = fe.features(&clip, 5).unwrap();
        assert_eq!(a.shape(), (32, 64));
        assert_eq!(fe.features(&clip, 5).unwrap(), a);
        let batch = fe.features_batch(&[("x", &clip), ("y", &clip)], 2).unwrap();
        assert_eq!(batch[0], fe.features(&clip, clip_seed(2, "x")).unwrap());
    }
}
