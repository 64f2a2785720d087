//! Pose-to-text back-translation: a transformer encoder over joint frames
//! with a CTC gloss-recognition head and an autoregressive text decoder.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use slg_autodiff::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::checkpoint;
use crate::corpus::{build_vocab, NormStats, SampleInstance, Vocabulary, FRAME_DIM};
use crate::error::{Error, Result};
use crate::nn::{embed_tokens, positional_encoding, Decoder, Encoder, Linear, StackShape};
use crate::ptgen::PoseSequence;
use crate::train::{fit, Schedule};

pub const KIND: &str = "back-translation";

/// CTC blank class. It coincides with the padding id of a [`Vocabulary`],
/// which never appears in a target.
pub const BLANK: usize = Vocabulary::PAD_ID;

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Fewest frames that can emit `target`: one per label plus a separating
/// blank between equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_ctc(log_probs: &[Vec<f64>], target: &[usize]) -> Result<usize> {
    let classes = log_probs.first().map_or(0, Vec::len);
    if log_probs.is_empty() || classes < 2 {
        return Err(Error::Validation("CTC needs at least one frame and two classes".into()));
    }
    if log_probs.iter().any(|r| r.len() != classes) {
        return Err(Error::Validation("CTC frames differ in class count".into()));
    }
    if let Some(&bad) = target.iter().find(|&&c| c == BLANK || c >= classes) {
        return Err(Error::Validation(format!("CTC target label {bad} is blank or out of range")));
    }
    let required = min_frames(target);
    if log_probs.len() < required {
        return Err(Error::InfeasibleAlignment {
            frames: log_probs.len(),
            required,
        });
    }
    Ok(classes)
}

/// Negative log-likelihood of `target` under per-frame log-probabilities
/// `[T][classes]`, with its gradient with respect to those log-probabilities.
pub fn ctc_nll_grad(log_probs: &[Vec<f64>], target: &[usize]) -> Result<(f64, Vec<Vec<f64>>)> {
    let classes = check_ctc(log_probs, target)?;
    let t_len = log_probs.len();
    let mut ext = vec![BLANK];
    for &c in target {
        ext.push(c);
        ext.push(BLANK);
    }
    let s_len = ext.len();
    let skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![vec![ninf; s_len]; t_len];
    alpha[0][0] = log_probs[0][ext[0]];
    if s_len > 1 {
        alpha[0][1] = log_probs[0][ext[1]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut a = alpha[t - 1][s];
            if s >= 1 {
                a = log_add(a, alpha[t - 1][s - 1]);
            }
            if skip(s) {
                a = log_add(a, alpha[t - 1][s - 2]);
            }
            alpha[t][s] = a + log_probs[t][ext[s]];
        }
    }
    let mut beta = vec![vec![ninf; s_len]; t_len];
    beta[t_len - 1][s_len - 1] = log_probs[t_len - 1][ext[s_len - 1]];
    if s_len > 1 {
        beta[t_len - 1][s_len - 2] = log_probs[t_len - 1][ext[s_len - 2]];
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut b = beta[t + 1][s];
            if s + 1 < s_len {
                b = log_add(b, beta[t + 1][s + 1]);
            }
            if s + 2 < s_len && skip(s + 2) {
                b = log_add(b, beta[t + 1][s + 2]);
            }
            beta[t][s] = b + log_probs[t][ext[s]];
        }
    }
    let mut log_p = alpha[t_len - 1][s_len - 1];
    if s_len > 1 {
        log_p = log_add(log_p, alpha[t_len - 1][s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::Divergence("CTC likelihood is zero or non-finite".into()));
    }
    // d(-log p)/d log y_t(k) is minus the posterior occupancy of class k at t.
    let mut grad = vec![vec![0.0; classes]; t_len];
    for t in 0..t_len {
        for s in 0..s_len {
            let occ = alpha[t][s] + beta[t][s] - log_probs[t][ext[s]] - log_p;
            if occ.is_finite() {
                grad[t][ext[s]] -= occ.exp();
            }
        }
    }
    Ok((-log_p, grad))
}

pub fn ctc_nll(log_probs: &[Vec<f64>], target: &[usize]) -> Result<f64> {
    Ok(ctc_nll_grad(log_probs, target)?.0)
}

/// CTC loss node over `[T, classes]` log-probabilities.
pub fn ctc_loss<'g, S: Scalar>(log_probs: Var<'g, S>, target: &[usize]) -> Result<Var<'g, S>> {
    let v = log_probs.value();
    let rows: Vec<Vec<f64>> = (0..v.rows())
        .map(|r| v.row(r).iter().map(|x| x.as_f64()).collect())
        .collect();
    let (nll, grad) = ctc_nll_grad(&rows, target)?;
    let classes = v.last_dim();
    let g = Tensor::from_fn(v.shape(), |i| S::from_f64(grad[i / classes][i % classes]));
    Ok(log_probs.scalar_with_grad(S::from_f64(nll), g)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BtConfig {
    pub layers: usize,
    pub heads: usize,
    pub embedding: usize,
    pub ff_size: usize,
    pub feature_size: usize,
    pub dropout: f64,
    pub recognition_weight: f64,
    pub translation_weight: f64,
    /// Only greedy decoding (width 1) is implemented.
    pub beam_width: usize,
    pub max_output: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for BtConfig {
    fn default() -> Self {
        Self {
            layers: 1,
            heads: 2,
            embedding: 128,
            ff_size: 512,
            feature_size: FRAME_DIM,
            dropout: 0.0,
            recognition_weight: 5.0,
            translation_weight: 1.0,
            beam_width: 1,
            max_output: 30,
            lr: 1e-3,
            epochs: 30,
            batch_size: 8,
            seed: 1,
        }
    }
}

impl BtConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.feature_size != FRAME_DIM {
            return bad(format!("feature size must be {FRAME_DIM}, got {}", self.feature_size));
        }
        if self.layers == 0 || self.heads == 0 || self.embedding == 0 || self.ff_size == 0 {
            return bad("layer, head, embedding and feed-forward sizes must be positive".into());
        }
        if self.embedding % self.heads != 0 {
            return bad(format!(
                "embedding size {} not divisible by {} heads",
                self.embedding, self.heads
            ));
        }
        if !(self.recognition_weight >= 0.0 && self.translation_weight >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        if self.beam_width != 1 {
            return bad(format!("beam width {} unsupported, only greedy decoding", self.beam_width));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(self.lr >= 0.0) || self.batch_size == 0 {
            return bad("dropout, learning rate or batch size out of range".into());
        }
        Ok(())
    }

    fn stack(&self) -> StackShape {
        StackShape {
            layers: self.layers,
            heads: self.heads,
            dim: self.embedding,
            ff: self.ff_size,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BtNet {
    dim: usize,
    frame_in: Linear,
    encoder: Encoder,
    gloss_head: Linear,
    text_embed: ParamId,
    decoder: Decoder,
    text_head: Linear,
    recognition_weight: f64,
    translation_weight: f64,
}

impl BtNet {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        config: &BtConfig,
        gloss_classes: usize,
        text_vocab: usize,
    ) -> Result<Self> {
        config.validate()?;
        let (shape, d) = (config.stack(), config.embedding);
        Ok(Self {
            dim: d,
            frame_in: Linear::new(store, "bt.frame_in", FRAME_DIM, d, true)?,
            encoder: Encoder::new(store, "bt.encoder", shape)?,
            gloss_head: Linear::new(store, "bt.gloss_head", d, gloss_classes, true)?,
            text_embed: store.xavier("bt.text_embed", text_vocab, d)?,
            decoder: Decoder::new(store, "bt.decoder", shape)?,
            text_head: Linear::new(store, "bt.text_head", d, text_vocab, true)?,
            recognition_weight: config.recognition_weight,
            translation_weight: config.translation_weight,
        })
    }

    /// Encoder states for `[T, 150]` normalized joints.
    pub fn encode<'g, S: Scalar>(&self, g: &'g Graph<S>, frames: &[Vec<f32>]) -> Result<Var<'g, S>> {
        let x = Tensor::from_rows(frames)?.cast::<S>();
        let pe = positional_encoding::<S>(frames.len(), self.dim);
        let h = self.frame_in.forward(g.constant(x))?.add(&g.constant(pe))?;
        self.encoder.forward(h)
    }

    /// Next-token logits for every prefix position of `input`.
    pub fn text_logits<'g, S: Scalar>(&self, memory: Var<'g, S>, input: &[usize]) -> Result<Var<'g, S>> {
        let x = embed_tokens(memory.graph().param(self.text_embed), input)?;
        self.text_head.forward(self.decoder.forward(x, memory)?)
    }

    /// Weighted CTC plus teacher-forced cross-entropy. A zero weight drops
    /// its term from the graph entirely.
    pub fn loss<'g, S: Scalar>(
        &self,
        g: &'g Graph<S>,
        frames: &[Vec<f32>],
        gloss: &[usize],
        text: &[usize],
    ) -> Result<Var<'g, S>> {
        let memory = self.encode(g, frames)?;
        let mut terms = Vec::new();
        if self.recognition_weight > 0.0 {
            let lp = self.gloss_head.forward(memory)?.log_softmax();
            terms.push(ctc_loss(lp, gloss)?.scale(S::from_f64(self.recognition_weight)));
        }
        if self.translation_weight > 0.0 {
            let mut input = vec![Vocabulary::BOS_ID];
            input.extend_from_slice(text);
            let mut target = text.to_vec();
            target.push(Vocabulary::EOS_ID);
            let ce = self.text_logits(memory, &input)?.cross_entropy(&target)?;
            terms.push(ce.scale(S::from_f64(self.translation_weight)));
        }
        match terms.as_slice() {
            [] => Ok(memory.scale(S::zero()).sum()),
            [one] => Ok(*one),
            [a, b] => Ok(a.add(b)?),
            _ => unreachable!(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BtModel {
    pub config: BtConfig,
    pub gloss_vocab: Vocabulary,
    pub text_vocab: Vocabulary,
    pub stats: NormStats,
    pub params: ParamStore<f32>,
    net: BtNet,
}

impl BtModel {
    pub fn new(config: BtConfig, gloss_vocab: Vocabulary, text_vocab: Vocabulary, stats: NormStats) -> Result<Self> {
        stats.validate()?;
        let mut params = ParamStore::new(config.seed);
        let net = BtNet::new(&mut params, &config, gloss_vocab.len(), text_vocab.len())?;
        Ok(Self {
            config,
            gloss_vocab,
            text_vocab,
            stats,
            params,
            net,
        })
    }

    /// Model with gloss and text vocabularies built from `instances`.
    pub fn for_instances(config: BtConfig, instances: &[SampleInstance], stats: NormStats) -> Result<Self> {
        let glosses: Vec<Vec<String>> = instances.iter().map(|i| i.gloss.clone()).collect();
        let texts: Vec<Vec<String>> = instances.iter().map(|i| i.text.clone()).collect();
        Self::new(config, build_vocab(&glosses), build_vocab(&texts), stats)
    }

    pub fn net(&self) -> &BtNet {
        &self.net
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let vocabs = BTreeMap::from([
            ("gloss".to_string(), self.gloss_vocab.clone()),
            ("text".to_string(), self.text_vocab.clone()),
        ]);
        checkpoint::save(dir, KIND, &self.config, vocabs, Some(&self.stats), &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let l: checkpoint::Loaded<BtConfig> = checkpoint::load(dir, KIND)?;
        let stats = l
            .stats
            .clone()
            .ok_or_else(|| Error::Checkpoint("back-translation model without normalization stats".into()))?;
        let mut m = Self::new(l.config.clone(), l.vocab("gloss")?, l.vocab("text")?, stats)?;
        checkpoint::restore(&mut m.params, l.tensors)?;
        Ok(m)
    }
}

struct BtExample {
    frames: Vec<Vec<f32>>,
    gloss: Vec<usize>,
    text: Vec<usize>,
}

/// Trains on ground-truth joints of `instances`. Returns per-epoch mean loss.
pub fn train_backtrans(model: &mut BtModel, instances: &[SampleInstance]) -> Result<Vec<f64>> {
    if instances.is_empty() {
        return Err(Error::Precondition("no training instances".into()));
    }
    let examples: Vec<BtExample> = instances
        .iter()
        .map(|inst| {
            let frames = inst.frames.as_ref().ok_or_else(|| {
                Error::Precondition(format!("instance {} has no frames", inst.id))
            })?;
            let gloss = model.gloss_vocab.encode(&inst.gloss);
            if model.config.recognition_weight > 0.0 && frames.len() < min_frames(&gloss) {
                return Err(Error::InfeasibleAlignment {
                    frames: frames.len(),
                    required: min_frames(&gloss),
                });
            }
            Ok(BtExample {
                frames: frames.iter().map(|f| model.stats.normalize(f)).collect(),
                gloss,
                text: model.text_vocab.encode(&inst.text),
            })
        })
        .collect::<Result<_>>()?;
    let schedule = Schedule {
        epochs: model.config.epochs,
        batch_size: model.config.batch_size,
        lr: model.config.lr,
        seed: model.config.seed,
    };
    let net = model.net.clone();
    fit(&mut model.params, examples.len(), schedule, |g, i, _| {
        let e = &examples[i];
        net.loss(g, &e.frames, &e.gloss, &e.text)
    })
}

/// Greedy translation of raw (denormalized) joint frames.
pub fn translate_frames(model: &BtModel, frames: &[Vec<f32>], max_len: usize) -> Result<Vec<String>> {
    if frames.is_empty() {
        return Ok(Vec::new());
    }
    if let Some(f) = frames.iter().find(|f| f.len() != FRAME_DIM) {
        return Err(Error::Validation(format!(
            "frames must have {FRAME_DIM} values, found {}",
            f.len()
        )));
    }
    let normalized: Vec<Vec<f32>> = frames.iter().map(|f| model.stats.normalize(f)).collect();
    let g = Graph::with_params(&model.params, false, 0);
    let memory = g.constant(model.net.encode(&g, &normalized)?.value());
    let mut ids = vec![Vocabulary::BOS_ID];
    let mut out = Vec::new();
    while out.len() < max_len {
        let g = Graph::with_params(&model.params, false, 0);
        let logits = model.net.text_logits(g.constant(memory.value()), &ids)?.value();
        let row = logits.row(ids.len() - 1);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = i;
            }
        }
        if best == Vocabulary::EOS_ID {
            break;
        }
        out.push(model.text_vocab.token(best).to_string());
        ids.push(best);
    }
    Ok(out)
}

/// Greedy translation of a generated pose sequence. The counter channel is
/// not consumed.
pub fn translate(model: &BtModel, pose: &PoseSequence, max_len: usize) -> Result<Vec<String>> {
    translate_frames(model, &pose.frames, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use slg_autodiff::gradcheck::DEFAULT_STEP;
    use slg_autodiff::{grad_check, grad_check_params};

    fn uniform(t: usize, c: usize) -> Vec<Vec<f64>> {
        vec![vec![-(c as f64).ln(); c]; t]
    }

    #[test]
    fn ctc_hand_cases() {
        let mut one_hot = vec![vec![f64::NEG_INFINITY; 3]];
        one_hot[0][2] = 0.0;
        assert_eq!(ctc_nll(&one_hot, &[2]).unwrap(), 0.0);
        // Valid paths for [a, b] in 3 frames: abb, aab, _ab, a_b, ab_.
        let nll = ctc_nll(&uniform(3, 3), &[1, 2]).unwrap();
        assert!((nll + (5.0f64 / 27.0).ln()).abs() < 1e-12);
        assert!(matches!(
            ctc_nll(&uniform(2, 3), &[1, 2, 1]),
            Err(Error::InfeasibleAlignment { frames: 2, required: 3 })
        ));
        assert!(matches!(
            ctc_nll(&uniform(2, 3), &[1, 1]),
            Err(Error::InfeasibleAlignment { frames: 2, required: 3 })
        ));
        assert!(ctc_nll(&uniform(3, 3), &[0]).is_err());
        let empty = ctc_nll(&uniform(4, 3), &[]).unwrap();
        assert!((empty - 4.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn ctc_gradient() {
        for seed in 0..5u64 {
            let point = Tensor::from_fn(&[5, 4], |i| ((i as f64 + seed as f64) * 1.37).sin() * 2.0);
            let err = grad_check(|_, x| ctc_loss(x.log_softmax(), &[1, 3, 3]), &point, DEFAULT_STEP).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    fn tiny() -> BtConfig {
        BtConfig {
            embedding: 16,
            ff_size: 16,
            epochs: 150,
            batch_size: 1,
            lr: 3e-3,
            ..BtConfig::default()
        }
    }

    fn instance() -> SampleInstance {
        SampleInstance {
            id: "x".into(),
            text: ["viel", "regen", "morgen"].map(String::from).to_vec(),
            text_pos: None,
            gloss: ["REGEN", "MORGEN"].map(String::from).to_vec(),
            labels: None,
            frames: Some(
                (0..6)
                    .map(|t| (0..FRAME_DIM).map(|d| ((t * 3 + d) as f32 * 0.1).sin()).collect())
                    .collect(),
            ),
        }
    }

    #[test]
    fn memorizes_single_instance() {
        let inst = instance();
        let mut m = BtModel::for_instances(tiny(), &[inst.clone()], NormStats::identity(FRAME_DIM)).unwrap();
        let curve = train_backtrans(&mut m, &[inst.clone()]).unwrap();
        assert!(curve.last().unwrap() < &curve[0]);
        let frames = inst.frames.clone().unwrap();
        assert_eq!(translate_frames(&m, &frames, 10).unwrap(), inst.text);
        assert_eq!(translate_frames(&m, &frames, 1).unwrap().len(), 1);
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = BtModel::load(dir.path()).unwrap();
        assert_eq!(translate_frames(&back, &frames, 10).unwrap(), inst.text);
    }

    #[test]
    fn loss_weights_isolate_terms() {
        let inst = instance();
        let frames = inst.frames.clone().unwrap();
        let build = |r, t| {
            let c = BtConfig {
                recognition_weight: r,
                translation_weight: t,
                ..tiny()
            };
            BtModel::for_instances(c, &[inst.clone()], NormStats::identity(FRAME_DIM)).unwrap()
        };
        let value = |m: &BtModel| {
            let g = Graph::with_params(&m.params, false, 0);
            let gl = m.gloss_vocab.encode(&inst.gloss);
            let tx = m.text_vocab.encode(&inst.text);
            m.net.loss(&g, &frames, &gl, &tx).unwrap().item()
        };
        let (both, rec, tr) = (value(&build(5.0, 1.0)), value(&build(1.0, 0.0)), value(&build(0.0, 1.0)));
        assert!((both - (5.0 * rec + tr)).abs() < 1e-4 * both);
        let mut m = build(0.0, 1.0);
        let curve = train_backtrans(&mut m, &[inst]).unwrap();
        assert!(curve.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn joint_loss_gradients() {
        let c = BtConfig {
            embedding: 8,
            ff_size: 8,
            ..BtConfig::default()
        };
        let mut store = ParamStore::<f64>::new(4);
        let net = BtNet::new(&mut store, &c, 6, 7).unwrap();
        store.perturb(5, 0.3);
        let frames: Vec<Vec<f32>> = (0..4)
            .map(|t| (0..FRAME_DIM).map(|d| ((t + d) as f32 * 0.3).cos()).collect())
            .collect();
        let err = grad_check_params(&store, |g| net.loss(g, &frames, &[4, 5], &[4, 6, 5]), 1e-5, Some(3), 1).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
