//! Intensity tagger: classifies a (transcript, gloss token) pair into one
//! of the three intensity labels.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use slg_autodiff::{concat, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::checkpoint;
use crate::corpus::{build_vocab, Corpus, SampleInstance, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::{accuracy, macro_prf};
use crate::intensify::{IntensityLabel, LabelTable};
use crate::nn::Linear;
use crate::train::{fit, Schedule};

pub const KIND: &str = "intensity-tagger";
pub const CLASSES: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaggerVariant {
    /// Mean of text embeddings next to the gloss embedding.
    PooledEmbedding,
    #[serde(rename = "bilstm")]
    BiLstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaggerConfig {
    pub variant: TaggerVariant,
    pub embedding: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        Self {
            variant: TaggerVariant::PooledEmbedding,
            embedding: 100,
            hidden: 300,
            layers: 2,
            dropout: 0.3,
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            seed: 1,
        }
    }
}

impl TaggerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embedding == 0 || self.hidden == 0 || self.layers == 0 || self.batch_size == 0 {
            return Err(Error::Config("tagger sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is negative", self.lr)));
        }
        Ok(())
    }
}

/// A labelled training or evaluation pair.
#[derive(Clone, Debug, PartialEq)]
pub struct TaggerPair {
    pub text: Vec<String>,
    pub gloss: String,
    pub label: IntensityLabel,
}

/// One pair per labelled gloss token.
pub fn pairs_from_instances(instances: &[SampleInstance]) -> Result<Vec<TaggerPair>> {
    let mut out = Vec::new();
    for inst in instances {
        let labels = inst
            .labels
            .as_ref()
            .ok_or_else(|| Error::Precondition(format!("instance {} has no labels", inst.id)))?;
        for (g, &label) in inst.gloss.iter().zip(labels) {
            out.push(TaggerPair {
                text: inst.text.clone(),
                gloss: g.clone(),
                label,
            });
        }
    }
    Ok(out)
}

fn lowercase<S: AsRef<str>>(text: &[S]) -> Vec<String> {
    text.iter().map(|t| t.as_ref().to_lowercase()).collect()
}

#[derive(Clone, Debug)]
struct LstmDir {
    w: ParamId,
    u: ParamId,
    b: ParamId,
}

impl LstmDir {
    fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            w: store.xavier(&format!("{name}.w"), input, 4 * hidden)?,
            u: store.xavier(&format!("{name}.u"), hidden, 4 * hidden)?,
            b: store.zeros(&format!("{name}.b"), &[4 * hidden])?,
        })
    }

    /// Hidden states `[T, hidden]` for `[T, input]` inputs read in order or
    /// reversed; rows stay aligned with input positions.
    fn run<'g, S: Scalar>(&self, x: Var<'g, S>, hidden: usize, reverse: bool) -> Result<Vec<Var<'g, S>>> {
        let g = x.graph();
        let (w, u, b) = (g.param(self.w), g.param(self.u), g.param(self.b));
        let t_len = x.shape()[0];
        let mut h = g.constant(Tensor::zeros(&[1, hidden]));
        let mut c = h;
        let mut states = vec![h; t_len];
        let order: Vec<usize> = if reverse { (0..t_len).rev().collect() } else { (0..t_len).collect() };
        for t in order {
            let z = x.slice(0, t, 1)?.matmul(&w)?.add(&h.matmul(&u)?)?.add(&b)?;
            let i = z.slice(1, 0, hidden)?.sigmoid();
            let f = z.slice(1, hidden, hidden)?.sigmoid();
            let o = z.slice(1, 2 * hidden, hidden)?.sigmoid();
            let cand = z.slice(1, 3 * hidden, hidden)?.tanh();
            c = f.mul(&c)?.add(&i.mul(&cand)?)?;
            h = o.mul(&c.tanh())?;
            states[t] = h;
        }
        Ok(states)
    }
}

#[derive(Clone, Debug)]
enum SeqEncoder {
    Pooled,
    BiLstm { layers: Vec<(LstmDir, LstmDir)>, hidden: usize, dropout: f64 },
}

#[derive(Clone, Debug)]
pub struct TaggerNet {
    text_embed: ParamId,
    gloss_embed: ParamId,
    encoder: SeqEncoder,
    out: Linear,
}

impl TaggerNet {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, config: &TaggerConfig, text_vocab: usize, gloss_vocab: usize) -> Result<Self> {
        config.validate()?;
        let e = config.embedding;
        let text_embed = store.xavier("tagger.text_embed", text_vocab, e)?;
        let gloss_embed = store.xavier("tagger.gloss_embed", gloss_vocab, e)?;
        let (encoder, width) = match config.variant {
            TaggerVariant::PooledEmbedding => (SeqEncoder::Pooled, e),
            TaggerVariant::BiLstm => {
                let h = config.hidden;
                let layers = (0..config.layers)
                    .map(|l| {
                        let input = if l == 0 { e } else { 2 * h };
                        Ok((
                            LstmDir::new(store, &format!("tagger.lstm.{l}.fwd"), input, h)?,
                            LstmDir::new(store, &format!("tagger.lstm.{l}.bwd"), input, h)?,
                        ))
                    })
                    .collect::<Result<_>>()?;
                (SeqEncoder::BiLstm { layers, hidden: h, dropout: config.dropout }, 2 * h)
            }
        };
        Ok(Self {
            text_embed,
            gloss_embed,
            encoder,
            out: Linear::new(store, "tagger.out", width + e, CLASSES, true)?,
        })
    }

    /// `[1, 3]` class logits.
    pub fn logits<'g, S: Scalar>(&self, g: &'g Graph<S>, text: &[usize], gloss: usize) -> Result<Var<'g, S>> {
        // An empty transcript reads as a single unknown token.
        let text = if text.is_empty() { &[Vocabulary::UNK_ID][..] } else { text };
        let x = g.param(self.text_embed).embedding(text)?;
        let t = text.len();
        let summary = match &self.encoder {
            SeqEncoder::Pooled => g
                .constant(Tensor::full(&[1, t], S::from_f64(1.0 / t as f64)))
                .matmul(&x)?,
            SeqEncoder::BiLstm { layers, hidden, dropout } => {
                let mut seq = x;
                let mut last = None;
                for (fwd, bwd) in layers {
                    let f = fwd.run(seq, *hidden, false)?;
                    let b = bwd.run(seq, *hidden, true)?;
                    last = Some(concat(&[f[t - 1], b[0]], 1)?);
                    let rows: Vec<Var<'g, S>> = f
                        .iter()
                        .zip(&b)
                        .map(|(a, c)| concat(&[*a, *c], 1))
                        .collect::<std::result::Result<_, _>>()?;
                    seq = concat(&rows, 0)?.dropout(*dropout);
                }
                last.expect("at least one layer").dropout(*dropout)
            }
        };
        let gl = g.param(self.gloss_embed).embedding(&[gloss])?;
        self.out.forward(concat(&[summary, gl], 1)?)
    }
}

#[derive(Clone, Debug)]
pub struct TaggerModel {
    pub config: TaggerConfig,
    pub text_vocab: Vocabulary,
    pub gloss_vocab: Vocabulary,
    pub params: ParamStore<f32>,
    net: TaggerNet,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub label: IntensityLabel,
    pub probs: [f32; CLASSES],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

impl TaggerModel {
    pub fn new(config: TaggerConfig, text_vocab: Vocabulary, gloss_vocab: Vocabulary) -> Result<Self> {
        let mut params = ParamStore::new(config.seed);
        let net = TaggerNet::new(&mut params, &config, text_vocab.len(), gloss_vocab.len())?;
        Ok(Self {
            config,
            text_vocab,
            gloss_vocab,
            params,
            net,
        })
    }

    pub fn for_pairs(config: TaggerConfig, pairs: &[TaggerPair]) -> Result<Self> {
        let texts: Vec<Vec<String>> = pairs.iter().map(|p| lowercase(&p.text)).collect();
        let glosses: Vec<Vec<String>> = pairs.iter().map(|p| vec![p.gloss.clone()]).collect();
        Self::new(config, build_vocab(&texts), build_vocab(&glosses))
    }

    pub fn net(&self) -> &TaggerNet {
        &self.net
    }

    fn ids<S: AsRef<str>>(&self, text: &[S], gloss: &str) -> (Vec<usize>, usize) {
        (self.text_vocab.encode(&lowercase(text)), self.gloss_vocab.lookup(gloss))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let vocabs = BTreeMap::from([
            ("text".to_string(), self.text_vocab.clone()),
            ("gloss".to_string(), self.gloss_vocab.clone()),
        ]);
        checkpoint::save(dir, KIND, &self.config, vocabs, None, &self.params)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let l: checkpoint::Loaded<TaggerConfig> = checkpoint::load(dir, KIND)?;
        let mut m = Self::new(l.config.clone(), l.vocab("text")?, l.vocab("gloss")?)?;
        checkpoint::restore(&mut m.params, l.tensors)?;
        Ok(m)
    }
}

/// Trains a fresh model on `pairs`. Returns it with the per-epoch mean
/// cross-entropy.
pub fn train_tagger(pairs: &[TaggerPair], config: TaggerConfig) -> Result<(TaggerModel, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no training pairs".into()));
    }
    let mut model = TaggerModel::for_pairs(config, pairs)?;
    let curve = continue_training(&mut model, pairs)?;
    Ok((model, curve))
}

/// Runs the configured epochs on an existing model.
pub fn continue_training(model: &mut TaggerModel, pairs: &[TaggerPair]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no training pairs".into()));
    }
    let data: Vec<(Vec<usize>, usize, usize)> = pairs
        .iter()
        .map(|p| {
            let (t, g) = model.ids(&p.text, &p.gloss);
            (t, g, p.label.index())
        })
        .collect();
    let c = &model.config;
    let schedule = Schedule {
        epochs: c.epochs,
        batch_size: c.batch_size,
        lr: c.lr,
        seed: c.seed,
    };
    let net = model.net.clone();
    fit(&mut model.params, data.len(), schedule, |g, i, _| {
        let (t, gl, y) = &data[i];
        Ok(net.logits(g, t, *gl)?.cross_entropy(&[*y])?)
    })
}

pub fn predict<S: AsRef<str>>(model: &TaggerModel, text: &[S], gloss: &str) -> Result<Prediction> {
    let (t, g) = model.ids(text, gloss);
    let graph = Graph::with_params(&model.params, false, 0);
    let p = model.net.logits(&graph, &t, g)?.softmax().value();
    let probs = [p.data()[0], p.data()[1], p.data()[2]];
    let mut best = 0;
    for k in 1..CLASSES {
        if probs[k] > probs[best] {
            best = k;
        }
    }
    Ok(Prediction {
        label: IntensityLabel::from_index(best)?,
        probs,
    })
}

pub fn predict_batch(model: &TaggerModel, items: &[(Vec<String>, String)]) -> Result<Vec<Prediction>> {
    items.iter().map(|(t, g)| predict(model, t, g)).collect()
}

pub fn evaluate_tagger(model: &TaggerModel, pairs: &[TaggerPair]) -> Result<TaggerScores> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no evaluation pairs".into()));
    }
    let pred = pairs
        .iter()
        .map(|p| Ok(predict(model, &p.text, &p.gloss)?.label.index()))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<usize> = pairs.iter().map(|p| p.label.index()).collect();
    let (precision, recall, f1) = macro_prf(&pred, &gold, CLASSES)?;
    Ok(TaggerScores {
        precision,
        recall,
        f1,
        accuracy: 100.0 * accuracy(&pred, &gold),
    })
}

/// Labels every gloss token of every split. Entries of `overrides` take
/// precedence over model predictions.
pub fn label_corpus(model: &TaggerModel, corpus: &Corpus, overrides: Option<&LabelTable>) -> Result<Corpus> {
    let mut out = corpus.clone();
    for split in out.splits_mut() {
        for inst in split.iter_mut() {
            let labels = inst
                .gloss
                .iter()
                .enumerate()
                .map(|(i, g)| match overrides.and_then(|o| o.get(&(inst.id.clone(), i))) {
                    Some(&l) => Ok(l),
                    None => Ok(predict(model, &inst.text, g)?.label),
                })
                .collect::<Result<Vec<_>>>()?;
            inst.labels = Some(labels);
        }
    }
    Ok(out)
}

/// Separable pairs: "very" before the gloss word means high intensity,
/// "slightly" means low, neither means none.
pub fn separable_pairs(n: usize, seed: u64) -> Vec<TaggerPair> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let glosses = ["WOLKE", "REGEN", "WIND", "SONNE", "SCHNEE", "NEBEL"];
    let fillers = ["morgen", "im", "norden", "es", "gibt", "heute", "dann"];
    (0..n)
        .map(|_| {
            let gloss = glosses[rng.random_range(0..glosses.len())];
            let label = IntensityLabel::ALL[rng.random_range(0..CLASSES)];
            let mut text: Vec<String> = (0..rng.random_range(1..4))
                .map(|_| fillers[rng.random_range(0..fillers.len())].to_string())
                .collect();
            match label {
                IntensityLabel::High => text.push("very".into()),
                IntensityLabel::Low => text.push("slightly".into()),
                IntensityLabel::None => {}
            }
            text.push(gloss.to_lowercase());
            text.extend((0..rng.random_range(0..3)).map(|_| fillers[rng.random_range(0..fillers.len())].to_string()));
            TaggerPair {
                text,
                gloss: gloss.into(),
                label,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use slg_autodiff::grad_check_params;

    fn cfg(variant: TaggerVariant) -> TaggerConfig {
        TaggerConfig {
            variant,
            embedding: 16,
            hidden: 8,
            layers: 1,
            dropout: 0.0,
            epochs: 10,
            batch_size: 8,
            lr: 1e-2,
            seed: 3,
        }
    }

    #[test]
    fn separable_data_is_learned() {
        let train = separable_pairs(300, 1);
        let dev = separable_pairs(90, 2);
        for v in [TaggerVariant::PooledEmbedding, TaggerVariant::BiLstm] {
            let (m, curve) = train_tagger(&train, cfg(v)).unwrap();
            assert!(curve.last().unwrap() < &curve[0]);
            assert!(evaluate_tagger(&m, &train).unwrap().accuracy >= 95.0, "{v:?}");
            assert!(evaluate_tagger(&m, &dev).unwrap().accuracy >= 90.0, "{v:?}");
        }
    }

    #[test]
    fn deterministic_and_lr_zero_is_identity() {
        let pairs = separable_pairs(20, 4);
        let (a, _) = train_tagger(&pairs, cfg(TaggerVariant::BiLstm)).unwrap();
        let (b, _) = train_tagger(&pairs, cfg(TaggerVariant::BiLstm)).unwrap();
        assert_eq!(a.params, b.params);
        let mut frozen = TaggerModel::for_pairs(TaggerConfig { lr: 0.0, ..cfg(TaggerVariant::BiLstm) }, &pairs).unwrap();
        let before = frozen.params.clone();
        continue_training(&mut frozen, &pairs).unwrap();
        assert_eq!(frozen.params, before);
    }

    #[test]
    fn single_pair_memorized() {
        let pairs = separable_pairs(1, 9);
        let (_, curve) = train_tagger(&pairs, cfg(TaggerVariant::PooledEmbedding)).unwrap();
        assert!(curve[9] < curve[0]);
        assert!(train_tagger(&[], cfg(TaggerVariant::PooledEmbedding)).is_err());
    }

    #[test]
    fn predictions_are_distributions() {
        let (m, _) = train_tagger(&separable_pairs(30, 5), cfg(TaggerVariant::BiLstm)).unwrap();
        let p = predict(&m, &["zzz", "qqq"], "NOPE").unwrap();
        assert!((p.probs.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        assert_eq!(p.label.index(), (0..3).max_by(|&a, &b| p.probs[a].total_cmp(&p.probs[b])).unwrap());
        let empty: [&str; 0] = [];
        assert!(predict(&m, &empty, "WOLKE").is_ok());
        let items: Vec<(Vec<String>, String)> =
            separable_pairs(5, 6).into_iter().map(|p| (p.text, p.gloss)).collect();
        let batch = predict_batch(&m, &items).unwrap();
        for (it, b) in items.iter().zip(&batch) {
            assert_eq!(&predict(&m, &it.0, &it.1).unwrap(), b);
        }
    }

    #[test]
    fn bilstm_gradients() {
        let c = TaggerConfig {
            layers: 2,
            ..cfg(TaggerVariant::BiLstm)
        };
        let mut store = ParamStore::<f64>::new(7);
        let net = TaggerNet::new(&mut store, &c, 9, 6).unwrap();
        store.perturb(2, 0.3);
        let err = grad_check_params(&store, |g| net.logits(g, &[4, 5, 8], 5)?.cross_entropy(&[2]).map_err(Error::from), 1e-5, Some(4), 3)
            .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn tiny_corpus() -> Corpus {
        let inst = |id: &str, text: &str, gloss: &str| SampleInstance {
            id: id.into(),
            text: text.split(' ').map(String::from).collect(),
            text_pos: None,
            gloss: gloss.split(' ').map(String::from).collect(),
            labels: None,
            frames: None,
        };
        Corpus::new(
            vec![inst("a", "very wolke morgen", "WOLKE MORGEN"), inst("b", "slightly regen", "REGEN NORD SUED")],
            vec![],
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn labels_every_token_with_overrides() {
        let (m, _) = train_tagger(&separable_pairs(30, 5), cfg(TaggerVariant::PooledEmbedding)).unwrap();
        let c = tiny_corpus();
        let labeled = label_corpus(&m, &c, None).unwrap();
        let n: usize = labeled.train.iter().map(|i| i.labels.as_ref().unwrap().len()).sum();
        assert_eq!(n, 5);
        let table = LabelTable::from([(("b".to_string(), 2), IntensityLabel::High)]);
        let over = label_corpus(&m, &c, Some(&table)).unwrap();
        assert_eq!(over.train[1].labels.as_ref().unwrap()[2], IntensityLabel::High);
        assert_eq!(label_corpus(&m, &c, Some(&table)).unwrap(), over);
    }

    #[test]
    fn checkpoint_round_trip() {
        let (m, _) = train_tagger(&separable_pairs(10, 5), cfg(TaggerVariant::BiLstm)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(dir.path()).unwrap();
        let back = TaggerModel::load(dir.path()).unwrap();
        assert_eq!(
            predict(&m, &["very", "wind"], "WIND").unwrap(),
            predict(&back, &["very", "wind"], "WIND").unwrap()
        );
    }
}
