//! Gloss/text/pose corpora: JSONL persistence, normalization statistics,
//! the POS-based sampling filter and the synthetic signer.

mod synth;
mod vocab;

use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::intensify::IntensityLabel;

pub use synth::{render_token, synth_generate, IntensityEffects, SynthConfig};
pub use vocab::{build_vocab, Vocabulary, BOS, EOS, PAD, UNK};

/// Joint coordinates per frame.
pub const FRAME_DIM: usize = 150;

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];
pub const STATS_FILE: &str = "stats.json";

/// POS tags counted as adjectives or adverbs (universal and STTS spellings).
const MODIFIER_TAGS: [&str; 4] = ["ADJ", "ADV", "ADJA", "ADJD"];

pub fn is_modifier_tag(tag: &str) -> bool {
    MODIFIER_TAGS.iter().any(|t| t.eq_ignore_ascii_case(tag))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleInstance {
    pub id: String,
    pub text: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_pos: Option<Vec<String>>,
    pub gloss: Vec<String>,
    /// Per-gloss intensity labels, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<IntensityLabel>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frames: Option<Vec<Vec<f32>>>,
}

impl SampleInstance {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(format!("instance {}: {msg}", self.id)));
        if self.text.is_empty() {
            return fail("empty text".into());
        }
        if self.gloss.is_empty() {
            return fail("empty gloss".into());
        }
        if let Some(pos) = &self.text_pos {
            if pos.len() != self.text.len() {
                return fail(format!(
                    "{} POS tags for {} text tokens",
                    pos.len(),
                    self.text.len()
                ));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.gloss.len() {
                return fail(format!(
                    "{} labels for {} gloss tokens",
                    labels.len(),
                    self.gloss.len()
                ));
            }
        }
        if let Some(frames) = &self.frames {
            if frames.is_empty() {
                return fail("empty frame list".into());
            }
            for (t, f) in frames.iter().enumerate() {
                if f.len() != FRAME_DIM {
                    return fail(format!(
                        "frame {t} has {} values, expected {FRAME_DIM}",
                        f.len()
                    ));
                }
                if f.iter().any(|v| !v.is_finite()) {
                    return fail(format!("frame {t} has a non-finite value"));
                }
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.frames.as_ref().map_or(0, Vec::len)
    }
}

/// Per-dimension z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl NormStats {
    /// Statistics over every frame of `instances`. Dimensions whose standard
    /// deviation is (numerically) zero get std 1.
    pub fn from_instances(instances: &[SampleInstance]) -> Result<Self> {
        let mut sum = vec![0.0f64; FRAME_DIM];
        let mut sq = vec![0.0f64; FRAME_DIM];
        let mut n = 0usize;
        for f in instances.iter().filter_map(|i| i.frames.as_ref()).flatten() {
            for (d, &v) in f.iter().enumerate() {
                sum[d] += v as f64;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Precondition(
                "normalization statistics need at least one frame".into(),
            ));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        for f in instances.iter().filter_map(|i| i.frames.as_ref()).flatten() {
            for (d, &v) in f.iter().enumerate() {
                sq[d] += (v as f64 - mean[d]).powi(2);
            }
        }
        let std = sq
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-8 {
                    sd as f32
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self {
            mean: mean.iter().map(|&m| m as f32).collect(),
            std,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != FRAME_DIM || self.std.len() != FRAME_DIM {
            return Err(Error::Validation(format!(
                "normalization stats must have {FRAME_DIM} entries"
            )));
        }
        if self.std.iter().any(|&s| !(s > 0.0 && s.is_finite()))
            || self.mean.iter().any(|m| !m.is_finite())
        {
            return Err(Error::Validation(
                "normalization std must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    pub fn normalize(&self, frame: &[f32]) -> Vec<f32> {
        frame
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| (v - m) / s)
            .collect()
    }

    pub fn denormalize(&self, frame: &[f32]) -> Vec<f32> {
        frame
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(&v, (&m, &s))| v * s + m)
            .collect()
    }
}

/// Train/dev/test splits plus the train-split normalization statistics.
///
/// Instances keep their frames in original units so that a load/save cycle
/// is lossless; models normalize through [`Corpus::normalized_frames`].
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<SampleInstance>,
    pub dev: Vec<SampleInstance>,
    pub test: Vec<SampleInstance>,
    pub stats: Option<NormStats>,
}

impl Corpus {
    /// Builds and validates a corpus, computing stats from train frames when
    /// any are present.
    pub fn new(
        train: Vec<SampleInstance>,
        dev: Vec<SampleInstance>,
        test: Vec<SampleInstance>,
    ) -> Result<Self> {
        let stats = if train.iter().any(|i| i.frames.is_some()) {
            Some(NormStats::from_instances(&train)?)
        } else {
            None
        };
        let c = Self {
            train,
            dev,
            test,
            stats,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (split, inst) in self.iter_splits() {
            for i in inst {
                i.validate()?;
                if !seen.insert(i.id.as_str()) {
                    return Err(Error::Validation(format!(
                        "instance id {} repeated (in {split})",
                        i.id
                    )));
                }
            }
        }
        if let Some(s) = &self.stats {
            s.validate()?;
        }
        Ok(())
    }

    pub fn iter_splits(&self) -> impl Iterator<Item = (&'static str, &Vec<SampleInstance>)> {
        SPLITS.into_iter().zip([&self.train, &self.dev, &self.test])
    }

    pub fn splits_mut(&mut self) -> [&mut Vec<SampleInstance>; 3] {
        [&mut self.train, &mut self.dev, &mut self.test]
    }

    pub fn split(&self, name: &str) -> Result<&[SampleInstance]> {
        match name {
            "train" => Ok(&self.train),
            "dev" => Ok(&self.dev),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.dev.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stats(&self) -> Result<&NormStats> {
        self.stats
            .as_ref()
            .ok_or_else(|| Error::Precondition("corpus has no frame statistics".into()))
    }

    /// z-scored frames of `inst`.
    pub fn normalized_frames(&self, inst: &SampleInstance) -> Result<Vec<Vec<f32>>> {
        let stats = self.stats()?;
        let frames = inst.frames.as_ref().ok_or_else(|| {
            Error::Precondition(format!("instance {} has no frames", inst.id))
        })?;
        Ok(frames.iter().map(|f| stats.normalize(f)).collect())
    }

    /// Applies `f` to the gloss sequence of every instance.
    pub fn map_gloss(
        &self,
        mut f: impl FnMut(&SampleInstance) -> Result<Vec<String>>,
    ) -> Result<Self> {
        let mut out = self.clone();
        for split in out.splits_mut() {
            for inst in split.iter_mut() {
                inst.gloss = f(inst)?;
                inst.labels = None;
            }
        }
        Ok(out)
    }
}

fn parse_split(path: &Path) -> Result<Vec<SampleInstance>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let inst: SampleInstance = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?;
        inst.validate()?;
        out.push(inst);
    }
    Ok(out)
}

/// Reads `train.jsonl`, `dev.jsonl` and `test.jsonl` from `dir`. A
/// `stats.json` next to them takes precedence over recomputed statistics.
pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let train = parse_split(&dir.join("train.jsonl"))?;
    let dev = parse_split(&dir.join("dev.jsonl"))?;
    let test = parse_split(&dir.join("test.jsonl"))?;
    let mut corpus = Corpus::new(train, dev, test)?;
    let stats_path = dir.join(STATS_FILE);
    if stats_path.exists() {
        let text = fs::read_to_string(&stats_path).map_err(io_err(&stats_path))?;
        let stats: NormStats = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: stats_path.clone(),
            line: e.line(),
            message: e.to_string(),
        })?;
        stats.validate()?;
        if let Some(own) = &corpus.stats {
            if own != &stats {
                warn!("{} differs from train-split statistics; using the file", stats_path.display());
            }
        }
        corpus.stats = Some(stats);
    }
    Ok(corpus)
}

pub fn write_jsonl(path: &Path, instances: &[SampleInstance]) -> Result<()> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(inst).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, inst) in corpus.iter_splits() {
        write_jsonl(&dir.join(format!("{name}.jsonl")), inst)?;
    }
    if let Some(stats) = &corpus.stats {
        let path = dir.join(STATS_FILE);
        let json = serde_json::to_string_pretty(stats).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&path, json).map_err(io_err(&path))?;
    }
    Ok(())
}

fn modifier_count(tags: &[String]) -> usize {
    tags.iter().filter(|t| is_modifier_tag(t)).count()
}

/// POS tags for each gloss token, borrowed from a case-insensitively
/// matching text token; `None` where no text token matches.
pub fn gloss_pos(inst: &SampleInstance) -> Result<Vec<Option<String>>> {
    let pos = inst.text_pos.as_ref().ok_or_else(|| {
        Error::Precondition(format!("instance {} lacks text_pos tags", inst.id))
    })?;
    Ok(inst
        .gloss
        .iter()
        .map(|g| {
            inst.text
                .iter()
                .position(|w| w.to_lowercase() == g.to_lowercase())
                .map(|i| pos[i].clone())
        })
        .collect())
}

/// Instances whose transcript carries an adjective or adverb while none of
/// the gloss tokens does.
pub fn pos_filter_sample(instances: &[SampleInstance]) -> Result<Vec<SampleInstance>> {
    let mut out = Vec::new();
    for inst in instances {
        let text_mods = modifier_count(inst.text_pos.as_deref().ok_or_else(|| {
            Error::Precondition(format!("instance {} lacks text_pos tags", inst.id))
        })?);
        let gloss_mods = gloss_pos(inst)?
            .iter()
            .flatten()
            .filter(|t| is_modifier_tag(t))
            .count();
        if text_mods > 0 && gloss_mods == 0 {
            out.push(inst.clone());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(id: &str, frames: Option<Vec<Vec<f32>>>) -> SampleInstance {
        SampleInstance {
            id: id.into(),
            text: vec!["es".into(), "regnet".into()],
            text_pos: None,
            gloss: vec!["REGEN".into()],
            labels: None,
            frames,
        }
    }

    fn frames(n: usize, base: f32) -> Vec<Vec<f32>> {
        (0..n)
            .map(|t| (0..FRAME_DIM).map(|d| base + (t * d) as f32 * 0.1).collect())
            .collect()
    }

    #[test]
    fn load_three_lines() {
        let dir = tempfile::tempdir().unwrap();
        let train: Vec<_> = (0..3)
            .map(|i| inst(&format!("t{i}"), Some(frames(2, i as f32))))
            .collect();
        let c = Corpus::new(train, vec![inst("d0", None)], vec![]).unwrap();
        save_corpus(&c, dir.path()).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.train.len(), 3);
        assert_eq!(back, c);
    }

    #[test]
    fn short_frame_names_instance() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad = inst("bad-one", Some(frames(1, 0.0)));
        bad.frames.as_mut().unwrap()[0].pop();
        let line = serde_json::to_string(&bad).unwrap();
        fs::write(dir.path().join("train.jsonl"), line).unwrap();
        fs::write(dir.path().join("dev.jsonl"), "").unwrap();
        fs::write(dir.path().join("test.jsonl"), "").unwrap();
        let err = load_corpus(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("bad-one"));
    }

    #[test]
    fn malformed_line_reports_number() {
        let dir = tempfile::tempdir().unwrap();
        let ok = serde_json::to_string(&inst("a", None)).unwrap();
        fs::write(dir.path().join("train.jsonl"), format!("{ok}\n{{oops\n")).unwrap();
        fs::write(dir.path().join("dev.jsonl"), "").unwrap();
        fs::write(dir.path().join("test.jsonl"), "").unwrap();
        match load_corpus(dir.path()).unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn missing_split_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train.jsonl"), "").unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Io { .. })));
    }

    #[test]
    fn constant_dimension_gets_unit_std() {
        let mut f = frames(4, 0.0);
        for row in &mut f {
            row[7] = 3.5;
        }
        let s = NormStats::from_instances(&[inst("a", Some(f))]).unwrap();
        assert_eq!(s.std[7], 1.0);
        assert_eq!(s.mean[7], 3.5);
        assert!(s.std[8] != 1.0);
    }

    #[test]
    fn normalization_round_trip() {
        let f = frames(5, -2.0);
        let s = NormStats::from_instances(&[inst("a", Some(f.clone()))]).unwrap();
        for row in &f {
            let back = s.denormalize(&s.normalize(row));
            for (a, b) in back.iter().zip(row) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }

    #[test]
    fn duplicate_ids_across_splits_rejected() {
        assert!(Corpus::new(vec![inst("x", None)], vec![inst("x", None)], vec![]).is_err());
    }

    fn tagged(text: &[&str], pos: &[&str], gloss: &[&str]) -> SampleInstance {
        SampleInstance {
            id: text.join("_"),
            text: text.iter().map(|s| s.to_string()).collect(),
            text_pos: Some(pos.iter().map(|s| s.to_string()).collect()),
            gloss: gloss.iter().map(|s| s.to_string()).collect(),
            labels: None,
            frames: None,
        }
    }

    #[test]
    fn pos_filter_selects_unmarked_modifiers() {
        let keep = tagged(&["very", "cloudy"], &["ADV", "ADJ"], &["WOLKE"]);
        let plain = tagged(&["wolke", "kommt"], &["NOUN", "VERB"], &["WOLKE"]);
        let glossed = tagged(&["stark", "regen"], &["ADJ", "NOUN"], &["STARK", "REGEN"]);
        let out = pos_filter_sample(&[keep.clone(), plain, glossed]).unwrap();
        assert_eq!(out, vec![keep.clone()]);
        assert_eq!(pos_filter_sample(&out).unwrap(), out);
    }

    #[test]
    fn pos_filter_requires_tags() {
        assert!(matches!(
            pos_filter_sample(&[inst("a", None)]),
            Err(Error::Precondition(_))
        ));
    }
}
