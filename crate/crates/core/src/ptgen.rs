//! Progressive Transformer: gloss encoder plus a counter-conditioned
//! autoregressive pose decoder trained with MSE.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use slg_autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::checkpoint;
use crate::corpus::{NormStats, SampleInstance, Vocabulary, FRAME_DIM};
use crate::error::{io_err, Error, Result};
use crate::intensify::{enhanced_gloss, Strategy};
use crate::nn::{embed_tokens, Decoder, Encoder, Linear, StackShape};
use crate::train::{fit, Schedule};

/// Joints plus the counter channel.
pub const POSE_DIM: usize = FRAME_DIM + 1;
pub const KIND: &str = "progressive-transformer";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PtConfig {
    pub layers: usize,
    pub heads: usize,
    pub embedding: usize,
    pub ff_size: usize,
    pub dropout: f64,
    /// `None` disables input noise.
    pub noise_rate: Option<f64>,
    pub max_frames: usize,
    pub threshold: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub zero_init_output: bool,
}

impl Default for PtConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            embedding: 512,
            ff_size: 2048,
            dropout: 0.0,
            noise_rate: Some(5.0),
            max_frames: 300,
            threshold: 0.98,
            lr: 1e-3,
            epochs: 30,
            batch_size: 8,
            seed: 1,
            zero_init_output: false,
        }
    }
}

impl PtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.embedding == 0 || self.ff_size == 0 {
            return bad("layer, head, embedding and feed-forward sizes must be positive".into());
        }
        if self.embedding % self.heads != 0 {
            return bad(format!(
                "embedding size {} not divisible by {} heads",
                self.embedding, self.heads
            ));
        }
        if self.max_frames == 0 {
            return bad("max frames must be at least 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold <= 1.0) {
            return bad(format!("counter threshold {} outside (0, 1]", self.threshold));
        }
        if let Some(r) = self.noise_rate {
            if !(r > 0.0) {
                return bad(format!("noise rate {r} must be positive"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.lr >= 0.0) || self.batch_size == 0 {
            return bad("learning rate must be non-negative and batch size positive".into());
        }
        Ok(())
    }

    pub fn stack(&self) -> StackShape {
        StackShape {
            layers: self.layers,
            heads: self.heads,
            dim: self.embedding,
            ff: self.ff_size,
            dropout: self.dropout,
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            seed: self.seed,
        }
    }
}

/// Gloss embedding plus transformer encoder.
#[derive(Clone, Debug)]
pub struct SourceEncoder {
    embed: ParamId,
    stack: Encoder,
}

impl SourceEncoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        vocab_len: usize,
        shape: StackShape,
    ) -> Result<Self> {
        Ok(Self {
            embed: store.xavier(&format!("{name}.embed"), vocab_len, shape.dim)?,
            stack: Encoder::new(store, name, shape)?,
        })
    }

    pub fn forward<'g, S: Scalar>(&self, g: &'g Graph<S>, ids: &[usize]) -> Result<Var<'g, S>> {
        self.stack.forward(embed_tokens(g.param(self.embed), ids)?)
    }
}

/// Decoder over `[frame, counter]` rows: the frame and the counter are
/// embedded by separate linear maps and summed.
#[derive(Clone, Debug)]
pub struct PoseDecoder {
    frame_in: Linear,
    counter_in: Linear,
    stack: Decoder,
    out: Linear,
}

impl PoseDecoder {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        shape: StackShape,
        zero_output: bool,
    ) -> Result<Self> {
        let d = shape.dim;
        Ok(Self {
            frame_in: Linear::new(store, "decoder.frame_in", FRAME_DIM, d, true)?,
            counter_in: Linear::new(store, "decoder.counter_in", 1, d, false)?,
            stack: Decoder::new(store, "decoder", shape)?,
            out: if zero_output {
                Linear::zeroed(store, "decoder.out", d, POSE_DIM)?
            } else {
                Linear::new(store, "decoder.out", d, POSE_DIM, true)?
            },
        })
    }

    /// Pre-projection hidden states `[T, d]` and outputs `[T, 151]` for a
    /// `[T, 151]` history.
    pub fn forward<'g, S: Scalar>(
        &self,
        history: &Tensor<S>,
        memory: Var<'g, S>,
    ) -> Result<(Var<'g, S>, Var<'g, S>)> {
        let g = memory.graph();
        let t = history.rows();
        let frames = Tensor::from_fn(&[t, FRAME_DIM], |i| {
            history.data()[(i / FRAME_DIM) * POSE_DIM + i % FRAME_DIM]
        });
        let counters = Tensor::from_fn(&[t, 1], |i| history.data()[i * POSE_DIM + FRAME_DIM]);
        let x = self
            .frame_in
            .forward(g.constant(frames))?
            .add(&self.counter_in.forward(g.constant(counters))?)?;
        let hidden = self.stack.forward(x, memory)?;
        let out = self.out.forward(hidden)?;
        Ok((hidden, out))
    }
}

#[derive(Clone, Debug)]
pub struct PtNet {
    pub encoder: SourceEncoder,
    pub decoder: PoseDecoder,
}

impl PtNet {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, config: &PtConfig, vocab_len: usize) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            encoder: SourceEncoder::new(store, "encoder", vocab_len, config.stack())?,
            decoder: PoseDecoder::new(store, config.stack(), config.zero_init_output)?,
        })
    }
}

/// One training or evaluation example: gloss sources and z-scored frames.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseExample {
    pub id: String,
    pub sources: Vec<Vec<String>>,
    pub frames: Vec<Vec<f32>>,
}

/// Builds examples whose `i`-th source is the gloss enhanced under
/// `strategies[i]` (`None` keeps the plain gloss).
pub fn pose_examples(
    instances: &[SampleInstance],
    stats: &NormStats,
    strategies: &[Option<Strategy>],
) -> Result<Vec<PoseExample>> {
    instances
        .iter()
        .map(|inst| {
            let frames = inst.frames.as_ref().ok_or_else(|| {
                Error::Precondition(format!("instance {} has no frames", inst.id))
            })?;
            Ok(PoseExample {
                id: inst.id.clone(),
                sources: strategies
                    .iter()
                    .map(|&s| enhanced_gloss(inst, s))
                    .collect::<Result<_>>()?,
                frames: frames.iter().map(|f| stats.normalize(f)).collect(),
            })
        })
        .collect()
}

/// Generated or reference poses in original units.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    pub frames: Vec<Vec<f32>>,
    pub counters: Vec<f32>,
}

impl PoseSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
        let err = |e: csv::Error| Error::Format(e.to_string());
        let mut header: Vec<String> = (0..FRAME_DIM).map(|i| format!("j{i}")).collect();
        header.push("counter".into());
        w.write_record(&header).map_err(err)?;
        for (f, c) in self.frames.iter().zip(&self.counters) {
            let row: Vec<String> = f.iter().chain(std::iter::once(c)).map(|v| v.to_string()).collect();
            w.write_record(&row).map_err(err)?;
        }
        w.flush().map_err(io_err(path))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let mut seq = PoseSequence {
            frames: Vec::new(),
            counters: Vec::new(),
        };
        for (n, rec) in r.records().enumerate() {
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: n + 2,
                message,
            };
            let rec = rec.map_err(|e| parse_err(e.to_string()))?;
            if rec.len() != POSE_DIM {
                return Err(parse_err(format!("expected {POSE_DIM} columns, found {}", rec.len())));
            }
            let vals = rec
                .iter()
                .map(|v| v.trim().parse::<f32>().map_err(|_| parse_err(format!("bad number {v:?}"))))
                .collect::<Result<Vec<f32>>>()?;
            seq.counters.push(vals[FRAME_DIM]);
            seq.frames.push(vals[..FRAME_DIM].to_vec());
        }
        Ok(seq)
    }
}

/// Progress targets `(t+1)/T` for `t = 0..T`.
pub fn counter_targets(t: usize) -> Result<Vec<f32>> {
    if t == 0 {
        return Err(Error::Precondition("counter targets need at least one frame".into()));
    }
    Ok((0..t).map(|i| ((i + 1) as f64 / t as f64) as f32).collect())
}

/// Adds zero-mean Gaussian noise with per-dimension standard deviation
/// `std[d] / rate` to every frame value.
pub fn add_gaussian_noise(frames: &[Vec<f32>], rate: f64, std: &[f32], seed: u64) -> Result<Vec<Vec<f32>>> {
    if !(rate > 0.0) {
        return Err(Error::Config(format!("noise rate {rate} must be positive")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0f64, 1.0).expect("unit normal");
    frames
        .iter()
        .map(|f| {
            if f.len() != std.len() {
                return Err(Error::Validation(format!(
                    "frame of {} values against {} std entries",
                    f.len(),
                    std.len()
                )));
            }
            Ok(f.iter()
                .zip(std)
                .map(|(&v, &s)| v + (unit.sample(&mut rng) * s as f64 / rate) as f32)
                .collect())
        })
        .collect()
}

/// Teacher-forced decoder inputs and targets. Input row 0 is the zero start
/// frame with counter 0; row `t` holds frame `t-1` (optionally noised) and
/// its counter.
pub fn teacher_forcing<S: Scalar>(
    frames: &[Vec<f32>],
    noise: Option<(f64, u64)>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let t = frames.len();
    let counters = counter_targets(t)?;
    let noised;
    let inputs = match noise {
        Some((rate, seed)) => {
            noised = add_gaussian_noise(frames, rate, &vec![1.0; FRAME_DIM], seed)?;
            &noised
        }
        None => frames,
    };
    let mut hist = vec![S::zero(); t * POSE_DIM];
    let mut target = vec![S::zero(); t * POSE_DIM];
    for i in 0..t {
        let row = &mut target[i * POSE_DIM..(i + 1) * POSE_DIM];
        for (o, &v) in row.iter_mut().zip(&frames[i]) {
            *o = S::from_f64(v as f64);
        }
        row[FRAME_DIM] = S::from_f64(counters[i] as f64);
        if i + 1 < t {
            let row = &mut hist[(i + 1) * POSE_DIM..(i + 2) * POSE_DIM];
            for (o, &v) in row.iter_mut().zip(&inputs[i]) {
                *o = S::from_f64(v as f64);
            }
            row[FRAME_DIM] = S::from_f64(counters[i] as f64);
        }
    }
    Ok((Tensor::new(vec![t, POSE_DIM], hist)?, Tensor::new(vec![t, POSE_DIM], target)?))
}

/// Teacher-forced MSE of one example over joints and counter.
pub fn pt_loss<'g, S: Scalar>(
    net: &PtNet,
    g: &'g Graph<S>,
    ids: &[usize],
    frames: &[Vec<f32>],
    noise: Option<(f64, u64)>,
) -> Result<Var<'g, S>> {
    let (hist, target) = teacher_forcing::<S>(frames, noise)?;
    let memory = net.encoder.forward(g, ids)?;
    let (_, out) = net.decoder.forward(&hist, memory)?;
    Ok(out.mse(&target)?)
}

#[derive(Clone, Debug)]
pub struct PtModel {
    pub config: PtConfig,
    pub vocab: Vocabulary,
    pub stats: NormStats,
    pub params: ParamStore<f32>,
    net: PtNet,
}

impl PtModel {
    pub fn new(config: PtConfig, vocab: Vocabulary, stats: NormStats) -> Result<Self> {
        stats.validate()?;
        let mut params = ParamStore::new(config.seed);
        let net = PtNet::new(&mut params, &config, vocab.len())?;
        Ok(Self {
            config,
            vocab,
            stats,
            params,
            net,
        })
    }

    /// Model with a source vocabulary built from the first source of
    /// `examples`.
    pub fn for_examples(config: PtConfig, examples: &[PoseExample], stats: NormStats) -> Result<Self> {
        let seqs: Vec<Vec<String>> = examples
            .iter()
            .map(|e| e.sources.first().cloned().unwrap_or_default())
            .collect();
        Self::new(config, crate::corpus::build_vocab(&seqs), stats)
    }

    pub fn net(&self) -> &PtNet {
        &self.net
    }

    pub fn encode<T: AsRef<str>>(&self, gloss: &[T]) -> Result<Tensor<f32>> {
        let g = Graph::with_params(&self.params, false, 0);
        Ok(self.net.encoder.forward(&g, &self.vocab.encode(gloss))?.value())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut vocabs = BTreeMap::new();
        vocabs.insert("source".to_string(), self.vocab.clone());
        checkpoint::save(dir, KIND, &self.config, vocabs, Some(&self.stats), &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let l: checkpoint::Loaded<PtConfig> = checkpoint::load(dir, KIND)?;
        let stats = l
            .stats
            .clone()
            .ok_or_else(|| Error::Checkpoint("pose model without normalization stats".into()))?;
        let mut m = Self::new(l.config.clone(), l.vocab("source")?, stats)?;
        checkpoint::restore(&mut m.params, l.tensors)?;
        Ok(m)
    }
}

fn history_tensor(history: &[Vec<f32>]) -> Result<Tensor<f32>> {
    if history.is_empty() {
        return Err(Error::Precondition("decoder history is empty".into()));
    }
    if let Some(r) = history.iter().find(|r| r.len() != POSE_DIM) {
        return Err(Error::Validation(format!(
            "history rows must have {POSE_DIM} values, found {}",
            r.len()
        )));
    }
    Ok(Tensor::from_rows(history)?)
}

/// Decoder output and hidden state for the last history row.
pub(crate) fn decode_last(
    params: &ParamStore<f32>,
    decoder: &PoseDecoder,
    history: &Tensor<f32>,
    encoding: &Tensor<f32>,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let g = Graph::with_params(params, false, 0);
    let (hidden, out) = decoder.forward(history, g.constant(encoding.clone()))?;
    let last = history.rows() - 1;
    Ok((out.value().row(last).to_vec(), hidden.value().row(last).to_vec()))
}

/// Next normalized frame and counter given a `[t, 151]` history.
pub fn decode_step(model: &PtModel, history: &[Vec<f32>], encoding: &Tensor<f32>) -> Result<Vec<f32>> {
    let h = history_tensor(history)?;
    Ok(decode_last(&model.params, &model.net.decoder, &h, encoding)?.0)
}

pub fn train_pt(model: &mut PtModel, examples: &[PoseExample]) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::Precondition("no training examples".into()));
    }
    let ids: Vec<Vec<usize>> = examples
        .iter()
        .map(|e| Ok(model.vocab.encode(e.sources.first().ok_or_else(|| {
            Error::Precondition(format!("example {} has no gloss source", e.id))
        })?)))
        .collect::<Result<_>>()?;
    let net = model.net.clone();
    let rate = model.config.noise_rate;
    fit(&mut model.params, examples.len(), model.config.schedule(), |g, i, seed| {
        pt_loss(&net, g, &ids[i], &examples[i].frames, rate.map(|r| (r, seed)))
    })
}

/// Mean teacher-forced MSE without noise.
pub fn evaluate_mse(model: &PtModel, examples: &[PoseExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Precondition("no evaluation examples".into()));
    }
    let mut total = 0.0;
    for e in examples {
        let g = Graph::with_params(&model.params, false, 0);
        let ids = model.vocab.encode(&e.sources[0]);
        total += pt_loss(&model.net, &g, &ids, &e.frames, None)?.item() as f64;
    }
    Ok(total / examples.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerateOptions {
    pub max_frames: usize,
    pub threshold: f64,
    /// Feed ground-truth counters for a sequence of this length instead of
    /// the predicted ones, stopping after that many frames.
    pub counter_length: Option<usize>,
}

impl GenerateOptions {
    pub fn from_config(c: &PtConfig) -> Self {
        Self {
            max_frames: c.max_frames,
            threshold: c.threshold,
            counter_length: None,
        }
    }
}

/// Autoregressive loop shared by the generators. `step` maps a history to
/// the next `[frame, counter]` row in normalized space.
pub(crate) fn rollout(
    opts: GenerateOptions,
    mut step: impl FnMut(&Tensor<f32>) -> Result<Vec<f32>>,
) -> Result<(Vec<Vec<f32>>, Vec<f32>)> {
    let mut history = vec![0.0f32; POSE_DIM];
    let mut frames = Vec::new();
    let mut counters = Vec::new();
    let limit = opts.counter_length.map_or(opts.max_frames, |n| n.min(opts.max_frames));
    for t in 0..limit {
        let rows = history.len() / POSE_DIM;
        let h = Tensor::new(vec![rows, POSE_DIM], history.clone())?;
        let mut out = step(&h)?;
        let predicted = out[FRAME_DIM];
        if let Some(n) = opts.counter_length {
            out[FRAME_DIM] = ((t + 1) as f64 / n as f64) as f32;
        }
        frames.push(out[..FRAME_DIM].to_vec());
        counters.push(out[FRAME_DIM]);
        history.extend_from_slice(&out);
        if opts.counter_length.is_none() && predicted as f64 >= opts.threshold {
            break;
        }
    }
    Ok((frames, counters))
}

pub fn generate<T: AsRef<str>>(model: &PtModel, gloss: &[T], opts: GenerateOptions) -> Result<PoseSequence> {
    let enc = model.encode(gloss)?;
    let (frames, counters) = rollout(opts, |h| {
        Ok(decode_last(&model.params, &model.net.decoder, h, &enc)?.0)
    })?;
    Ok(PoseSequence {
        frames: frames.iter().map(|f| model.stats.denormalize(f)).collect(),
        counters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use slg_autodiff::grad_check_params;

    pub(crate) fn tiny() -> PtConfig {
        PtConfig {
            layers: 1,
            heads: 2,
            embedding: 16,
            ff_size: 16,
            max_frames: 12,
            epochs: 1,
            batch_size: 1,
            ..PtConfig::default()
        }
    }

    fn frames(t: usize, phase: f32) -> Vec<Vec<f32>> {
        (0..t)
            .map(|i| (0..FRAME_DIM).map(|d| ((i as f32 + phase) * 0.3 + d as f32 * 0.1).sin()).collect())
            .collect()
    }

    fn model(cfg: PtConfig) -> PtModel {
        PtModel::new(cfg, Vocabulary::from_tokens(["A", "B"]), NormStats::identity(FRAME_DIM)).unwrap()
    }

    #[test]
    fn counters() {
        assert_eq!(counter_targets(1).unwrap(), vec![1.0]);
        assert_eq!(counter_targets(4).unwrap(), vec![0.25, 0.5, 0.75, 1.0]);
        for t in 1..50 {
            let c = counter_targets(t).unwrap();
            assert_eq!(*c.last().unwrap(), 1.0);
            assert!(c.windows(2).all(|w| w[0] < w[1]));
        }
        assert!(counter_targets(0).is_err());
    }

    #[test]
    fn config_invariants() {
        assert!(PtConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(PtConfig { max_frames: 0, ..tiny() }.validate().is_err());
        assert!(PtConfig { threshold: 0.0, ..tiny() }.validate().is_err());
        assert!(PtConfig { noise_rate: Some(0.0), ..tiny() }.validate().is_err());
    }

    #[test]
    fn noise_statistics() {
        assert!(add_gaussian_noise(&[vec![0.0]], 0.0, &[1.0], 1).is_err());
        let std = [2.0f32, 0.5];
        let clean = vec![vec![1.0f32, -3.0]; 100_000];
        let noised = add_gaussian_noise(&clean, 5.0, &std, 9).unwrap();
        for d in 0..2 {
            let diffs: Vec<f64> = noised.iter().zip(&clean).map(|(a, b)| (a[d] - b[d]) as f64).collect();
            let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
            let sd = (diffs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / diffs.len() as f64).sqrt();
            let want = std[d] as f64 / 5.0;
            assert!((sd - want).abs() < 0.02 * want, "{sd} vs {want}");
        }
        assert_eq!(noised, add_gaussian_noise(&clean, 5.0, &std, 9).unwrap());
    }

    #[test]
    fn teacher_forcing_layout() {
        let f = frames(3, 0.0);
        let (h, t) = teacher_forcing::<f32>(&f, None).unwrap();
        assert!(h.row(0).iter().all(|&v| v == 0.0));
        assert_eq!(&h.row(1)[..FRAME_DIM], &f[0][..]);
        assert_eq!(h.row(2)[FRAME_DIM], t.row(1)[FRAME_DIM]);
        assert_eq!(t.row(2)[FRAME_DIM], 1.0);
        let (hn, tn) = teacher_forcing::<f32>(&f, Some((5.0, 1))).unwrap();
        assert_eq!(tn, t);
        assert_ne!(hn.row(1), h.row(1));
        assert_eq!(hn.row(1)[FRAME_DIM], h.row(1)[FRAME_DIM]);
    }

    #[test]
    fn decode_step_shape_and_causality() {
        let m = model(tiny());
        let enc = m.encode(&["A", "B"]).unwrap();
        let mut hist: Vec<Vec<f32>> = vec![vec![0.0; POSE_DIM]];
        hist.extend(frames(7, 1.0).into_iter().map(|mut f| {
            f.push(0.5);
            f
        }));
        assert_eq!(decode_step(&m, &hist[..3], &enc).unwrap().len(), POSE_DIM);
        let g = Graph::with_params(&m.params, false, 0);
        let full = m.net.decoder.forward(&Tensor::from_rows(&hist).unwrap(), g.constant(enc.clone())).unwrap().1.value();
        for t in 1..=3 {
            assert_eq!(decode_step(&m, &hist[..t], &enc).unwrap(), full.row(t - 1));
        }
        assert!(decode_step(&m, &[vec![0.0; FRAME_DIM]], &enc).is_err());
    }

    #[test]
    fn zero_output_projection_gives_zero_frame() {
        let m = model(PtConfig {
            zero_init_output: true,
            ..tiny()
        });
        let enc = m.encode(&["A"]).unwrap();
        let out = decode_step(&m, &[vec![0.0; POSE_DIM]], &enc).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generation_cap_and_determinism() {
        let m = model(PtConfig {
            zero_init_output: true,
            ..tiny()
        });
        let opts = GenerateOptions {
            max_frames: 3,
            threshold: 0.98,
            counter_length: None,
        };
        let a = generate(&m, &["A"], opts).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(a, generate(&m, &["A"], opts).unwrap());
        let gt = generate(&m, &["A"], GenerateOptions { counter_length: Some(2), ..opts }).unwrap();
        assert_eq!(gt.counters, vec![0.5, 1.0]);
    }

    #[test]
    fn memorizes_single_instance() {
        let mut m = model(PtConfig {
            epochs: 200,
            noise_rate: None,
            ..tiny()
        });
        let ex = vec![PoseExample {
            id: "x".into(),
            sources: vec![vec!["A".into()]],
            frames: frames(6, 0.0),
        }];
        let curve = train_pt(&mut m, &ex).unwrap();
        assert!(curve[199] < 0.1 * curve[0], "{} -> {}", curve[0], curve[199]);
    }

    #[test]
    fn training_is_deterministic_without_noise() {
        let ex = vec![
            PoseExample { id: "a".into(), sources: vec![vec!["A".into()]], frames: frames(4, 0.0) },
            PoseExample { id: "b".into(), sources: vec![vec!["B".into()]], frames: frames(5, 2.0) },
        ];
        let run = || {
            let mut m = model(PtConfig { epochs: 3, noise_rate: None, ..tiny() });
            train_pt(&mut m, &ex).unwrap();
            m.params.iter().map(|(_, _, t)| t.clone()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_generation() {
        let dir = tempfile::tempdir().unwrap();
        let m = model(tiny());
        m.save(dir.path()).unwrap();
        let back = PtModel::load(dir.path()).unwrap();
        let opts = GenerateOptions::from_config(&m.config);
        assert_eq!(generate(&m, &["B", "A"], opts).unwrap(), generate(&back, &["B", "A"], opts).unwrap());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new(5);
        let net = PtNet::new(&mut store, &cfg, 6).unwrap();
        store.perturb(8, 0.3);
        let f = frames(3, 0.5);
        let err = grad_check_params(&store, |g| pt_loss(&net, g, &[4, 5], &f, Some((5.0, 2))), 1e-5, Some(4), 0)
            .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pose.csv");
        let s = PoseSequence { frames: frames(3, 0.0), counters: vec![0.1, 0.5, 1.0] };
        s.write_csv(&p).unwrap();
        assert_eq!(PoseSequence::read_csv(&p).unwrap(), s);
    }
}
