//! Dynamic selection over several enhanced gloss sources: one encoder per
//! source, a shared pose decoder, and per-frame importance coefficients
//! that mix (soft) or select (hard) the candidate frames.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use slg_autodiff::{concat, Graph, ParamStore, Scalar, Tensor, Var};

use crate::checkpoint;
use crate::corpus::{build_vocab, NormStats, Vocabulary};
use crate::error::{Error, Result};
use crate::intensify::Strategy;
use crate::nn::Linear;
use crate::ptgen::{
    teacher_forcing, GenerateOptions, PoseDecoder, PoseExample, PoseSequence, PtConfig,
    SourceEncoder, POSE_DIM,
};
use crate::train::fit;
use crate::corpus::FRAME_DIM;

pub const KIND: &str = "dynamic-selection";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MixMode {
    Soft,
    Hard,
}

/// What the importance network reads for each source.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IcInput {
    /// Decoder states before the output projection.
    Hidden,
    /// The 151-value candidate frames.
    Output,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DynConfig {
    /// One enhancement strategy per source; `k` is their count.
    pub strategies: Vec<Strategy>,
    pub mlp_hidden: usize,
    pub ic_input: IcInput,
    pub mode: MixMode,
    /// Start the importance network's output layer at zero, so α begins
    /// uniform and hard mode begins on the first source.
    pub zero_init_ic: bool,
    /// At inference, let each source decode its own trajectory instead of
    /// consuming the mixed output.
    pub independent_histories: bool,
    pub pt: PtConfig,
}

impl Default for DynConfig {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Suffixation, Strategy::EndMarking],
            mlp_hidden: 256,
            ic_input: IcInput::Hidden,
            mode: MixMode::Soft,
            zero_init_ic: false,
            independent_histories: false,
            pt: PtConfig {
                embedding: 256,
                ff_size: 1024,
                ..PtConfig::default()
            },
        }
    }
}

impl DynConfig {
    pub fn k(&self) -> usize {
        self.strategies.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("dynamic selection needs at least one source".into()));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("MLP hidden size must be positive".into()));
        }
        self.pt.validate()
    }

    fn ic_width(&self) -> usize {
        match self.ic_input {
            IcInput::Hidden => self.pt.embedding,
            IcInput::Output => POSE_DIM,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DynNet {
    pub encoders: Vec<SourceEncoder>,
    pub decoder: PoseDecoder,
    ic1: Linear,
    ic2: Linear,
    ic_input: IcInput,
}

/// Parameter prefix of source `i`; source 0 shares the single-source name.
fn encoder_name(i: usize) -> String {
    if i == 0 {
        "encoder".into()
    } else {
        format!("encoder{i}")
    }
}

impl DynNet {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, config: &DynConfig, vocab_lens: &[usize]) -> Result<Self> {
        config.validate()?;
        if vocab_lens.len() != config.k() {
            return Err(Error::Config(format!(
                "{} vocabularies for {} sources",
                vocab_lens.len(),
                config.k()
            )));
        }
        let shape = config.pt.stack();
        let encoders = vocab_lens
            .iter()
            .enumerate()
            .map(|(i, &v)| SourceEncoder::new(store, &encoder_name(i), v, shape))
            .collect::<Result<_>>()?;
        let k = config.k();
        Ok(Self {
            encoders,
            decoder: PoseDecoder::new(store, shape, config.pt.zero_init_output)?,
            ic1: Linear::new(store, "ic.l1", k * config.ic_width(), config.mlp_hidden, true)?,
            ic2: if config.zero_init_ic {
                Linear::zeroed(store, "ic.l2", config.mlp_hidden, k)?
            } else {
                Linear::new(store, "ic.l2", config.mlp_hidden, k, true)?
            },
            ic_input: config.ic_input,
        })
    }

    pub fn k(&self) -> usize {
        self.encoders.len()
    }

    /// Softmax importance coefficients `[T, k]` from per-source states.
    pub fn coefficients<'g, S: Scalar>(&self, states: &[Var<'g, S>]) -> Result<Var<'g, S>> {
        let x = if states.len() == 1 {
            states[0]
        } else {
            concat(states, 1)?
        };
        Ok(self.ic2.forward(self.ic1.forward(x)?.relu())?.softmax())
    }

    fn ic_states<'g, S: Scalar>(&self, hidden: &[Var<'g, S>], out: &[Var<'g, S>]) -> Vec<Var<'g, S>> {
        match self.ic_input {
            IcInput::Hidden => hidden.to_vec(),
            IcInput::Output => out.to_vec(),
        }
    }
}

/// Index of the largest coefficient, lowest index on ties.
pub fn argmax(alpha: &[f32]) -> usize {
    let mut best = 0;
    for (i, &a) in alpha.iter().enumerate().skip(1) {
        if a > alpha[best] {
            best = i;
        }
    }
    best
}

fn check_mix(candidates: &[Vec<f32>], alpha: &[f32]) -> Result<()> {
    if candidates.is_empty() || candidates.len() != alpha.len() {
        return Err(Error::Validation(format!(
            "{} candidates for {} coefficients",
            candidates.len(),
            alpha.len()
        )));
    }
    let n = candidates[0].len();
    if candidates.iter().any(|c| c.len() != n) {
        return Err(Error::Validation("candidates differ in length".into()));
    }
    Ok(())
}

/// Convex combination `Σ α_k c_k`.
pub fn mix_soft(candidates: &[Vec<f32>], alpha: &[f32]) -> Result<Vec<f32>> {
    check_mix(candidates, alpha)?;
    let mut out: Vec<f32> = candidates[0].iter().map(|&v| v * alpha[0]).collect();
    for (c, &a) in candidates.iter().zip(alpha).skip(1) {
        for (o, &v) in out.iter_mut().zip(c) {
            *o += v * a;
        }
    }
    Ok(out)
}

/// The candidate with the largest coefficient, copied bit for bit.
pub fn mix_hard(candidates: &[Vec<f32>], alpha: &[f32]) -> Result<Vec<f32>> {
    check_mix(candidates, alpha)?;
    Ok(candidates[argmax(alpha)].clone())
}

/// One-hot rows marking the largest coefficient of each row.
fn one_hot_argmax<S: Scalar>(alpha: &Tensor<S>) -> Tensor<S> {
    let k = alpha.last_dim();
    let mut out = Tensor::zeros(alpha.shape());
    for r in 0..alpha.rows() {
        let row = alpha.row(r);
        let mut best = 0;
        for (j, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = j;
            }
        }
        out.data_mut()[r * k + best] = S::one();
    }
    out
}

/// Teacher-forced MSE of the mixed output for one example. All sources
/// decode the same ground-truth history. Hard mode weights the candidates
/// by a one-hot argmax in the forward pass while gradients reach the
/// coefficients through the softmax (straight-through).
pub fn dyn_loss<'g, S: Scalar>(
    net: &DynNet,
    g: &'g Graph<S>,
    ids: &[Vec<usize>],
    frames: &[Vec<f32>],
    noise: Option<(f64, u64)>,
    mode: MixMode,
) -> Result<Var<'g, S>> {
    if ids.len() != net.k() {
        return Err(Error::Validation(format!(
            "{} sources for a {}-source model",
            ids.len(),
            net.k()
        )));
    }
    let (hist, target) = teacher_forcing::<S>(frames, noise)?;
    let mut hidden = Vec::with_capacity(ids.len());
    let mut outs = Vec::with_capacity(ids.len());
    for (enc, src) in net.encoders.iter().zip(ids) {
        let memory = enc.forward(g, src)?;
        let (h, o) = net.decoder.forward(&hist, memory)?;
        hidden.push(h);
        outs.push(o);
    }
    let mut alpha = net.coefficients(&net.ic_states(&hidden, &outs))?;
    if mode == MixMode::Hard {
        alpha = alpha.straight_through(one_hot_argmax(&alpha.value()))?;
    }
    let mut mixed = outs[0].mul_rows(&alpha.slice(1, 0, 1)?)?;
    for (i, o) in outs.iter().enumerate().skip(1) {
        mixed = mixed.add(&o.mul_rows(&alpha.slice(1, i, 1)?)?)?;
    }
    Ok(mixed.mse(&target)?)
}

#[derive(Clone, Debug)]
pub struct DynModel {
    pub config: DynConfig,
    pub vocabs: Vec<Vocabulary>,
    pub stats: NormStats,
    pub params: ParamStore<f32>,
    net: DynNet,
}

/// One decoded frame with its candidates and coefficients, in normalized
/// space.
#[derive(Clone, Debug, PartialEq)]
pub struct DynStep {
    pub candidates: Vec<Vec<f32>>,
    pub alpha: Vec<f32>,
    pub output: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynGeneration {
    pub pose: PoseSequence,
    pub steps: Vec<DynStep>,
}

impl DynGeneration {
    pub fn alphas(&self) -> Vec<Vec<f32>> {
        self.steps.iter().map(|s| s.alpha.clone()).collect()
    }
}

/// Writes an α trace as CSV: frame index followed by one column per source.
pub fn write_alpha_csv(path: &Path, alphas: &[Vec<f32>]) -> Result<()> {
    let err = |e: csv::Error| Error::Format(e.to_string());
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let k = alphas.first().map_or(0, Vec::len);
    let mut header = vec!["frame".to_string()];
    header.extend((1..=k).map(|i| format!("alpha{i}")));
    w.write_record(&header).map_err(err)?;
    for (t, a) in alphas.iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(a.iter().map(|v| v.to_string()));
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(crate::error::io_err(path))
}

impl DynModel {
    pub fn new(config: DynConfig, vocabs: Vec<Vocabulary>, stats: NormStats) -> Result<Self> {
        stats.validate()?;
        let mut params = ParamStore::new(config.pt.seed);
        let lens: Vec<usize> = vocabs.iter().map(Vocabulary::len).collect();
        let net = DynNet::new(&mut params, &config, &lens)?;
        Ok(Self {
            config,
            vocabs,
            stats,
            params,
            net,
        })
    }

    /// Model with one vocabulary per source built from `examples`.
    pub fn for_examples(config: DynConfig, examples: &[PoseExample], stats: NormStats) -> Result<Self> {
        let vocabs = (0..config.k())
            .map(|i| {
                let seqs: Vec<Vec<String>> = examples
                    .iter()
                    .map(|e| e.sources.get(i).cloned().unwrap_or_default())
                    .collect();
                build_vocab(&seqs)
            })
            .collect();
        Self::new(config, vocabs, stats)
    }

    pub fn net(&self) -> &DynNet {
        &self.net
    }

    pub fn k(&self) -> usize {
        self.config.k()
    }

    fn ids<T: AsRef<str>>(&self, sources: &[Vec<T>]) -> Result<Vec<Vec<usize>>> {
        if sources.len() != self.k() {
            return Err(Error::Validation(format!(
                "{} gloss sources for a {}-source model",
                sources.len(),
                self.k()
            )));
        }
        Ok(sources.iter().zip(&self.vocabs).map(|(s, v)| v.encode(s)).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let vocabs: BTreeMap<String, Vocabulary> = self
            .vocabs
            .iter()
            .enumerate()
            .map(|(i, v)| (format!("source{i}"), v.clone()))
            .collect();
        checkpoint::save(dir, KIND, &self.config, vocabs, Some(&self.stats), &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let l: checkpoint::Loaded<DynConfig> = checkpoint::load(dir, KIND)?;
        let stats = l
            .stats
            .clone()
            .ok_or_else(|| Error::Checkpoint("pose model without normalization stats".into()))?;
        let vocabs = (0..l.config.k())
            .map(|i| l.vocab(&format!("source{i}")))
            .collect::<Result<_>>()?;
        let mut m = Self::new(l.config.clone(), vocabs, stats)?;
        checkpoint::restore(&mut m.params, l.tensors)?;
        Ok(m)
    }
}

pub fn encode_multi<T: AsRef<str>>(model: &DynModel, sources: &[Vec<T>]) -> Result<Vec<Tensor<f32>>> {
    let ids = model.ids(sources)?;
    let g = Graph::with_params(&model.params, false, 0);
    model
        .net
        .encoders
        .iter()
        .zip(&ids)
        .map(|(e, i)| Ok(e.forward(&g, i)?.value()))
        .collect()
}

/// Candidate output and decoder state of one source for the last row of
/// `history`.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub output: Vec<f32>,
    pub hidden: Vec<f32>,
}

fn decode_one(model: &DynModel, history: &Tensor<f32>, encoding: &Tensor<f32>) -> Result<Candidate> {
    let (output, hidden) =
        crate::ptgen::decode_last(&model.params, &model.net.decoder, history, encoding)?;
    Ok(Candidate { output, hidden })
}

fn history_tensor(history: &[Vec<f32>]) -> Result<Tensor<f32>> {
    if history.is_empty() || history.iter().any(|r| r.len() != POSE_DIM) {
        return Err(Error::Validation(format!(
            "history must be non-empty rows of {POSE_DIM} values"
        )));
    }
    Ok(Tensor::from_rows(history)?)
}

/// Runs the shared decoder once per source encoding on a common history.
pub fn decode_multi(model: &DynModel, history: &[Vec<f32>], encodings: &[Tensor<f32>]) -> Result<Vec<Candidate>> {
    if encodings.len() != model.k() {
        return Err(Error::Validation(format!(
            "{} encodings for a {}-source model",
            encodings.len(),
            model.k()
        )));
    }
    let h = history_tensor(history)?;
    encodings.iter().map(|e| decode_one(model, &h, e)).collect()
}

/// Importance coefficients for one frame from `k` per-source states.
pub fn importance_coefficients(model: &DynModel, states: &[Vec<f32>]) -> Result<Vec<f32>> {
    let width = model.config.ic_width();
    if states.len() != model.k() || states.iter().any(|s| s.len() != width) {
        return Err(Error::Validation(format!(
            "expected {} states of width {width}",
            model.k()
        )));
    }
    let g = Graph::with_params(&model.params, false, 0);
    let vars: Vec<Var<'_, f32>> = states
        .iter()
        .map(|s| Ok(g.constant(Tensor::new(vec![1, width], s.clone())?)))
        .collect::<Result<_>>()?;
    Ok(model.net.coefficients(&vars)?.value().into_vec())
}

fn state_of(model: &DynModel, c: &Candidate) -> Vec<f32> {
    match model.config.ic_input {
        IcInput::Hidden => c.hidden.clone(),
        IcInput::Output => c.output.clone(),
    }
}

pub fn train_dynamic(model: &mut DynModel, examples: &[PoseExample]) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::Precondition("no training examples".into()));
    }
    let ids: Vec<Vec<Vec<usize>>> = examples
        .iter()
        .map(|e| model.ids(&e.sources))
        .collect::<Result<_>>()?;
    let net = model.net.clone();
    let rate = model.config.pt.noise_rate;
    let mode = model.config.mode;
    fit(&mut model.params, examples.len(), model.config.pt.schedule(), |g, i, seed| {
        dyn_loss(&net, g, &ids[i], &examples[i].frames, rate.map(|r| (r, seed)), mode)
    })
}

/// Mean teacher-forced MSE of the mixed output under `mode`, without noise.
pub fn evaluate_mse(model: &DynModel, examples: &[PoseExample], mode: MixMode) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Precondition("no evaluation examples".into()));
    }
    let mut total = 0.0;
    for e in examples {
        let g = Graph::with_params(&model.params, false, 0);
        total += dyn_loss(&model.net, &g, &model.ids(&e.sources)?, &e.frames, None, mode)?.item() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Autoregressive generation with per-frame mixing under `mode`.
pub fn generate_dynamic<T: AsRef<str>>(
    model: &DynModel,
    sources: &[Vec<T>],
    opts: GenerateOptions,
    mode: MixMode,
) -> Result<DynGeneration> {
    let encodings = encode_multi(model, sources)?;
    let k = model.k();
    let mut shared = vec![0.0f32; POSE_DIM];
    let mut own: Vec<Vec<f32>> = vec![shared.clone(); k];
    let mut steps = Vec::new();
    let limit = opts.counter_length.map_or(opts.max_frames, |n| n.min(opts.max_frames));
    for t in 0..limit {
        let candidates: Vec<Candidate> = if model.config.independent_histories {
            own.iter()
                .zip(&encodings)
                .map(|(h, e)| decode_one(model, &Tensor::new(vec![h.len() / POSE_DIM, POSE_DIM], h.clone())?, e))
                .collect::<Result<_>>()?
        } else {
            let h = Tensor::new(vec![shared.len() / POSE_DIM, POSE_DIM], shared.clone())?;
            encodings.iter().map(|e| decode_one(model, &h, e)).collect::<Result<_>>()?
        };
        let states: Vec<Vec<f32>> = candidates.iter().map(|c| state_of(model, c)).collect();
        let alpha = importance_coefficients(model, &states)?;
        let outputs: Vec<Vec<f32>> = candidates.into_iter().map(|c| c.output).collect();
        let mut output = match mode {
            MixMode::Soft => mix_soft(&outputs, &alpha)?,
            MixMode::Hard => mix_hard(&outputs, &alpha)?,
        };
        let predicted = output[FRAME_DIM];
        if let Some(n) = opts.counter_length {
            output[FRAME_DIM] = ((t + 1) as f64 / n as f64) as f32;
        }
        shared.extend_from_slice(&output);
        for (h, c) in own.iter_mut().zip(&outputs) {
            h.extend_from_slice(c);
        }
        steps.push(DynStep {
            candidates: outputs,
            alpha,
            output,
        });
        if opts.counter_length.is_none() && predicted as f64 >= opts.threshold {
            break;
        }
    }
    let pose = PoseSequence {
        frames: steps
            .iter()
            .map(|s| model.stats.denormalize(&s.output[..FRAME_DIM]))
            .collect(),
        counters: steps.iter().map(|s| s.output[FRAME_DIM]).collect(),
    };
    Ok(DynGeneration { pose, steps })
}
