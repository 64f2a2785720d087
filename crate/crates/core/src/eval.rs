//! Text metrics and significance tests.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{is_modifier_tag, SampleInstance};
use crate::error::{io_err, Error, Result};

pub const MAX_ORDER: usize = 4;

fn check_pairs<T>(hyps: &[T], refs: &[T]) -> Result<()> {
    if refs.is_empty() {
        return Err(Error::Precondition("empty reference set".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Validation(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    Ok(())
}

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics of one sentence pair for corpus BLEU.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BleuStats {
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn of<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> Self {
        let mut s = Self {
            hyp_len: hyp.len(),
            ref_len: reference.len(),
            ..Self::default()
        };
        for n in 1..=MAX_ORDER {
            let r = ngram_counts(reference, n);
            let h = ngram_counts(hyp, n);
            s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
            s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
        }
        s
    }

    fn add(&mut self, o: &Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }

    /// BLEU-`n` in `[0, 100]`. With `smoothing`, orders above 1 use
    /// add-one counts.
    pub fn score(&self, n: usize, smoothing: bool) -> f64 {
        if self.hyp_len == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for k in 0..n {
            let (mut m, mut c) = (self.matches[k] as f64, self.totals[k] as f64);
            if smoothing && k > 0 {
                m += 1.0;
                c += 1.0;
            }
            if m == 0.0 || c == 0.0 {
                return 0.0;
            }
            log_sum += (m / c).ln();
        }
        let bp = if self.hyp_len < self.ref_len {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        } else {
            1.0
        };
        100.0 * bp * (log_sum / n as f64).exp()
    }
}

fn sum_stats<'a>(it: impl Iterator<Item = &'a BleuStats>) -> BleuStats {
    let mut total = BleuStats::default();
    for s in it {
        total.add(s);
    }
    total
}

/// Corpus-level BLEU-1 through BLEU-`max_n`.
pub fn bleu<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>], max_n: usize, smoothing: bool) -> Result<Vec<f64>> {
    check_pairs(hyps, refs)?;
    if !(1..=MAX_ORDER).contains(&max_n) {
        return Err(Error::Validation(format!("BLEU order {max_n} outside 1..={MAX_ORDER}")));
    }
    let stats: Vec<BleuStats> = hyps.iter().zip(refs).map(|(h, r)| BleuStats::of(h, r)).collect();
    let total = sum_stats(stats.iter());
    Ok((1..=max_n).map(|n| total.score(n, smoothing)).collect())
}

fn lcs<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        prev = cur;
    }
    prev[b.len()]
}

/// Sentence ROUGE-L F1 (β = 1) in `[0, 1]`.
pub fn rouge_l_sentence<S: AsRef<str>>(hyp: &[S], reference: &[S]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(hyp, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let (p, r) = (l / hyp.len() as f64, l / reference.len() as f64);
    2.0 * p * r / (p + r)
}

/// Mean sentence ROUGE-L F1 in `[0, 100]`.
pub fn rouge_l<S: AsRef<str>>(hyps: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    let empty = hyps.iter().filter(|h| h.is_empty()).count();
    if empty > 0 {
        log::warn!("{empty} empty hypotheses score 0 ROUGE-L");
    }
    let total: f64 = hyps.iter().zip(refs).map(|(h, r)| rouge_l_sentence(h, r)).sum();
    Ok(100.0 * total / hyps.len() as f64)
}

/// Fleiss' kappa ×100 for an item × category count matrix in which every
/// row sums to the same number of raters.
pub fn fleiss_kappa(ratings: &[Vec<usize>]) -> Result<f64> {
    if ratings.is_empty() || ratings[0].is_empty() {
        return Err(Error::Precondition("no ratings".into()));
    }
    let k = ratings[0].len();
    let n: usize = ratings[0].iter().sum();
    if n < 2 {
        return Err(Error::Precondition(format!("{n} raters per item, need at least 2")));
    }
    if let Some((i, _)) = ratings
        .iter()
        .enumerate()
        .find(|(_, r)| r.len() != k || r.iter().sum::<usize>() != n)
    {
        return Err(Error::Validation(format!("item {i} does not have {n} ratings over {k} categories")));
    }
    let (items, nf) = (ratings.len() as f64, n as f64);
    let p_bar = ratings
        .iter()
        .map(|r| (r.iter().map(|&c| (c * c) as f64).sum::<f64>() - nf) / (nf * (nf - 1.0)))
        .sum::<f64>()
        / items;
    let p_e: f64 = (0..k)
        .map(|j| {
            let pj = ratings.iter().map(|r| r[j] as f64).sum::<f64>() / (items * nf);
            pj * pj
        })
        .sum();
    if (1.0 - p_e).abs() < 1e-12 {
        return Err(Error::Undefined("Fleiss' kappa: all ratings fall in one category".into()));
    }
    Ok(100.0 * (p_bar - p_e) / (1.0 - p_e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Bleu(usize),
    RougeL,
}

/// Per-sentence inputs of a corpus metric, so resamples can be scored
/// without recounting n-grams.
enum SentenceScores {
    Bleu(Vec<BleuStats>, usize),
    Rouge(Vec<f64>),
}

impl SentenceScores {
    fn new<S: AsRef<str>>(metric: Metric, hyps: &[Vec<S>], refs: &[Vec<S>]) -> Self {
        match metric {
            Metric::Bleu(n) => Self::Bleu(hyps.iter().zip(refs).map(|(h, r)| BleuStats::of(h, r)).collect(), n),
            Metric::RougeL => Self::Rouge(hyps.iter().zip(refs).map(|(h, r)| rouge_l_sentence(h, r)).collect()),
        }
    }

    fn corpus(&self, idx: &[usize]) -> f64 {
        match self {
            Self::Bleu(s, n) => sum_stats(idx.iter().map(|&i| &s[i])).score(*n, false),
            Self::Rouge(s) => 100.0 * idx.iter().map(|&i| s[i]).sum::<f64>() / idx.len() as f64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub p_value: f64,
    pub significant_90: bool,
    pub significant_95: bool,
}

impl Significance {
    fn from_p(p_value: f64) -> Self {
        Self {
            p_value,
            significant_90: p_value < 0.10,
            significant_95: p_value < 0.05,
        }
    }
}

/// Paired bootstrap: the p-value is the fraction of sentence resamples in
/// which system `b`'s corpus metric does not exceed system `a`'s.
pub fn bootstrap_significance<S: AsRef<str>>(
    a: &[Vec<S>],
    b: &[Vec<S>],
    refs: &[Vec<S>],
    metric: Metric,
    resamples: usize,
    seed: u64,
) -> Result<Significance> {
    check_pairs(a, refs)?;
    check_pairs(b, refs)?;
    if refs.len() < 2 {
        return Err(Error::Precondition("bootstrap needs at least 2 sentences".into()));
    }
    if resamples == 0 {
        return Err(Error::Config("at least one resample is required".into()));
    }
    let (sa, sb) = (SentenceScores::new(metric, a, refs), SentenceScores::new(metric, b, refs));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = refs.len();
    let mut idx = vec![0usize; n];
    let mut not_better = 0usize;
    for _ in 0..resamples {
        for i in idx.iter_mut() {
            *i = rng.random_range(0..n);
        }
        if sb.corpus(&idx) <= sa.corpus(&idx) {
            not_better += 1;
        }
    }
    Ok(Significance::from_p(not_better as f64 / resamples as f64))
}

/// Paired approximate-randomization test on `metric(a) - metric(b)`:
/// each permutation swaps every aligned pair of predictions with
/// probability 1/2. Returns `(count + 1) / (permutations + 1)`.
pub fn permutation_test<T: Clone>(
    a: &[T],
    b: &[T],
    gold: &[T],
    metric: impl Fn(&[T], &[T]) -> f64,
    permutations: usize,
    seed: u64,
) -> Result<f64> {
    if a.len() != gold.len() || b.len() != gold.len() {
        return Err(Error::Validation("prediction lists are not aligned with gold".into()));
    }
    let observed = (metric(a, gold) - metric(b, gold)).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut pa, mut pb) = (a.to_vec(), b.to_vec());
    let mut extreme = 0usize;
    for _ in 0..permutations {
        for i in 0..a.len() {
            if rng.random_bool(0.5) {
                pa[i] = b[i].clone();
                pb[i] = a[i].clone();
            } else {
                pa[i] = a[i].clone();
                pb[i] = b[i].clone();
            }
        }
        if (metric(&pa, gold) - metric(&pb, gold)).abs() >= observed - 1e-12 {
            extreme += 1;
        }
    }
    Ok((extreme + 1) as f64 / (permutations + 1) as f64)
}

/// Fraction of positions where `pred` equals `gold`.
pub fn accuracy<T: PartialEq>(pred: &[T], gold: &[T]) -> f64 {
    if gold.is_empty() {
        return 0.0;
    }
    pred.iter().zip(gold).filter(|(p, g)| p == g).count() as f64 / gold.len() as f64
}

/// Macro precision, recall and F1 in `[0, 100]` over classes `0..classes`.
/// Macro F1 is the mean of per-class F1. Classes absent from both gold and
/// predictions are left out of the averages.
pub fn macro_prf(pred: &[usize], gold: &[usize], classes: usize) -> Result<(f64, f64, f64)> {
    if gold.is_empty() || pred.len() != gold.len() {
        return Err(Error::Validation("predictions and gold must be non-empty and aligned".into()));
    }
    let (mut p_sum, mut r_sum, mut f_sum, mut used) = (0.0, 0.0, 0.0, 0usize);
    for c in 0..classes {
        let tp = pred.iter().zip(gold).filter(|&(&p, &g)| p == c && g == c).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        let actual = gold.iter().filter(|&&g| g == c).count() as f64;
        if predicted == 0.0 && actual == 0.0 {
            log::warn!("class {c} absent from gold and predictions; excluded from macro averages");
            continue;
        }
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if actual > 0.0 { tp / actual } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        p_sum += p;
        r_sum += r;
        f_sum += f;
        used += 1;
    }
    let m = used as f64;
    Ok((100.0 * p_sum / m, 100.0 * r_sum / m, 100.0 * f_sum / m))
}

/// Mean number of adjective and adverb tags per sentence.
pub fn modifier_density<S: AsRef<str>>(tags: &[Vec<S>]) -> Result<f64> {
    if tags.is_empty() {
        return Err(Error::Precondition("no sentences".into()));
    }
    let total: usize = tags
        .iter()
        .map(|s| s.iter().filter(|t| is_modifier_tag(t.as_ref())).count())
        .sum();
    Ok(total as f64 / tags.len() as f64)
}

/// [`modifier_density`] over the text POS tags of `instances`.
pub fn instance_modifier_density(instances: &[SampleInstance]) -> Result<f64> {
    let tags = instances
        .iter()
        .map(|i| {
            i.text_pos
                .clone()
                .ok_or_else(|| Error::Validation(format!("instance {} has no POS tags", i.id)))
        })
        .collect::<Result<Vec<_>>>()?;
    modifier_density(&tags)
}

/// One sentence per line, tokens separated by whitespace.
pub fn read_token_file(path: &Path) -> Result<Vec<Vec<String>>> {
    let s = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(s.lines().map(|l| l.split_whitespace().map(String::from).collect()).collect())
}

pub fn write_token_file<S: AsRef<str>>(path: &Path, sentences: &[Vec<S>]) -> Result<()> {
    let mut out = String::new();
    for s in sentences {
        let line: Vec<&str> = s.iter().map(AsRef::as_ref).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionScores {
    pub partition: String,
    pub sentences: usize,
    /// BLEU-1 to BLEU-4.
    pub bleu: [f64; MAX_ORDER],
    pub rouge_l: f64,
    /// BLEU-1 bootstrap against the baseline, when one was given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vs_baseline: Option<Significance>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub partitions: Vec<PartitionScores>,
}

/// Hypotheses, baseline and references of one partition.
pub struct PartitionInput<'a> {
    pub name: &'a str,
    pub hyps: &'a [Vec<String>],
    pub refs: &'a [Vec<String>],
    pub baseline: Option<&'a [Vec<String>]>,
}

impl ScoreReport {
    pub fn score(inputs: &[PartitionInput<'_>], smoothing: bool, resamples: usize, seed: u64) -> Result<Self> {
        let partitions = inputs
            .iter()
            .map(|p| {
                let b = bleu(p.hyps, p.refs, MAX_ORDER, smoothing)?;
                let vs_baseline = match p.baseline {
                    Some(base) if p.refs.len() >= 2 => Some(bootstrap_significance(
                        base,
                        p.hyps,
                        p.refs,
                        Metric::Bleu(1),
                        resamples,
                        seed,
                    )?),
                    _ => None,
                };
                Ok(PartitionScores {
                    partition: p.name.to_string(),
                    sentences: p.refs.len(),
                    bleu: [b[0], b[1], b[2], b[3]],
                    rouge_l: rouge_l(p.hyps, p.refs)?,
                    vs_baseline,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { partitions })
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, s + "\n").map_err(io_err(path))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let err = |e: csv::Error| Error::Format(e.to_string());
        let mut w = csv::Writer::from_path(path).map_err(err)?;
        w.write_record([
            "partition", "sentences", "bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "p_value", "sig90", "sig95",
        ])
        .map_err(err)?;
        for p in &self.partitions {
            let mut row = vec![p.partition.clone(), p.sentences.to_string()];
            row.extend(p.bleu.iter().map(|v| format!("{v:.4}")));
            row.push(format!("{:.4}", p.rouge_l));
            match p.vs_baseline {
                Some(s) => row.extend([
                    format!("{:.4}", s.p_value),
                    s.significant_90.to_string(),
                    s.significant_95.to_string(),
                ]),
                None => row.extend([String::new(), String::new(), String::new()]),
            }
            w.write_record(&row).map_err(err)?;
        }
        w.flush().map_err(io_err(path))
    }
}
