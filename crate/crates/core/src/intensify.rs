//! Intensity labels and the four gloss enhancement strategies.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::corpus::{Corpus, SampleInstance};
use crate::error::{io_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum IntensityLabel {
    #[default]
    None = 0,
    Low = 1,
    High = 2,
}

impl IntensityLabel {
    pub const ALL: [IntensityLabel; 3] = [Self::None, Self::Low, Self::High];

    pub fn from_index(v: usize) -> Result<Self> {
        Self::ALL
            .get(v)
            .copied()
            .ok_or_else(|| Error::Validation(format!("intensity label {v} not in {{0,1,2}}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_intensified(self) -> bool {
        self != Self::None
    }
}

impl fmt::Display for IntensityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

impl Serialize for IntensityLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u8(*self as u8)
    }
}

impl<'de> Deserialize<'de> for IntensityLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u8::deserialize(d)?;
        Self::from_index(v as usize).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Suffixation,
    EndMarking,
    DelayedRelease,
    SuffixReiteration,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Self::Suffixation,
        Self::EndMarking,
        Self::DelayedRelease,
        Self::SuffixReiteration,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Suffixation => "suffixation",
            Self::EndMarking => "end-marking",
            Self::DelayedRelease => "delayed-release",
            Self::SuffixReiteration => "suffix-reiteration",
        }
    }

    fn uses_suffix(self) -> bool {
        matches!(self, Self::Suffixation | Self::SuffixReiteration)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        match norm.as_str() {
            "suffixation" | "suffix" => Ok(Self::Suffixation),
            "end-marking" | "endmarking" => Ok(Self::EndMarking),
            "delayed-release" | "delayedrelease" => Ok(Self::DelayedRelease),
            "suffix-reiteration" | "reiteration" | "suffixreiteration" => {
                Ok(Self::SuffixReiteration)
            }
            _ => Err(Error::Config(format!("unknown strategy {s:?}"))),
        }
    }
}

pub fn marker(label: IntensityLabel) -> String {
    format!("<INT{}>", label.index())
}

pub fn suffixed(token: &str, label: IntensityLabel) -> String {
    format!("{token}-INT{}", label.index())
}

/// Label encoded by a standalone marker token.
pub fn parse_marker(token: &str) -> Option<IntensityLabel> {
    match token {
        "<INT1>" => Some(IntensityLabel::Low),
        "<INT2>" => Some(IntensityLabel::High),
        _ => None,
    }
}

/// Host and label of a suffixed token.
pub fn parse_suffix(token: &str) -> Option<(&str, IntensityLabel)> {
    let (host, label) = if let Some(h) = token.strip_suffix("-INT1") {
        (h, IntensityLabel::Low)
    } else if let Some(h) = token.strip_suffix("-INT2") {
        (h, IntensityLabel::High)
    } else {
        return None;
    };
    Some((host, label))
}

fn is_enhanced(token: &str) -> bool {
    parse_marker(token).is_some() || parse_suffix(token).is_some()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaggedGlossSequence {
    pub tokens: Vec<String>,
    pub labels: Vec<IntensityLabel>,
}

impl TaggedGlossSequence {
    pub fn new(tokens: Vec<String>, labels: Vec<IntensityLabel>) -> Result<Self> {
        let s = Self { tokens, labels };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.labels.len() {
            return Err(Error::Validation(format!(
                "{} gloss tokens but {} labels",
                self.tokens.len(),
                self.labels.len()
            )));
        }
        if let Some(t) = self.tokens.iter().find(|t| is_enhanced(t)) {
            return Err(Error::Validation(format!(
                "gloss token {t:?} already carries an intensity marker"
            )));
        }
        Ok(())
    }

    pub fn from_instance(inst: &SampleInstance) -> Result<Self> {
        let labels = inst.labels.clone().ok_or_else(|| {
            Error::Precondition(format!("instance {} has no gloss labels", inst.id))
        })?;
        Self::new(inst.gloss.clone(), labels)
    }
}

pub fn apply_strategy(seq: &TaggedGlossSequence, strategy: Strategy) -> Result<Vec<String>> {
    seq.validate()?;
    let mut out = Vec::with_capacity(seq.tokens.len() * 2);
    for (tok, &label) in seq.tokens.iter().zip(&seq.labels) {
        if !label.is_intensified() {
            out.push(tok.clone());
            continue;
        }
        match strategy {
            Strategy::Suffixation => out.push(suffixed(tok, label)),
            Strategy::EndMarking => {
                out.push(tok.clone());
                out.push(marker(label));
            }
            Strategy::DelayedRelease => {
                out.push(marker(label));
                out.push(tok.clone());
            }
            Strategy::SuffixReiteration => {
                out.push(suffixed(tok, label));
                out.push(suffixed(tok, label));
            }
        }
    }
    Ok(out)
}

fn format_err(msg: String) -> Error {
    Error::Format(msg)
}

/// Inverse of [`apply_strategy`].
pub fn strip_enhancement<S: AsRef<str>>(
    tokens: &[S],
    strategy: Strategy,
) -> Result<TaggedGlossSequence> {
    let tokens: Vec<&str> = tokens.iter().map(AsRef::as_ref).collect();
    let mut out = TaggedGlossSequence {
        tokens: Vec::with_capacity(tokens.len()),
        labels: Vec::with_capacity(tokens.len()),
    };
    let mut i = 0;
    while i < tokens.len() {
        let tok = tokens[i];
        if strategy.uses_suffix() {
            if parse_marker(tok).is_some() {
                return Err(format_err(format!(
                    "marker {tok:?} at position {i} under {strategy}"
                )));
            }
            match parse_suffix(tok) {
                Some((host, label)) => {
                    if host.is_empty() || is_enhanced(host) {
                        return Err(format_err(format!("suffix without host gloss: {tok:?}")));
                    }
                    if strategy == Strategy::SuffixReiteration {
                        if tokens.get(i + 1) != Some(&tok) {
                            return Err(format_err(format!(
                                "{tok:?} at position {i} is not reiterated"
                            )));
                        }
                        i += 1;
                    }
                    out.tokens.push(host.to_string());
                    out.labels.push(label);
                }
                None => {
                    out.tokens.push(tok.to_string());
                    out.labels.push(IntensityLabel::None);
                }
            }
            i += 1;
            continue;
        }
        if parse_suffix(tok).is_some() {
            return Err(format_err(format!(
                "suffixed token {tok:?} at position {i} under {strategy}"
            )));
        }
        match (parse_marker(tok), strategy) {
            (Some(label), Strategy::DelayedRelease) => {
                let host = tokens
                    .get(i + 1)
                    .filter(|h| !is_enhanced(h))
                    .ok_or_else(|| {
                        format_err(format!("marker {tok:?} at position {i} has no following gloss"))
                    })?;
                out.tokens.push(host.to_string());
                out.labels.push(label);
                i += 2;
            }
            (Some(_), _) => {
                return Err(format_err(format!(
                    "marker {tok:?} at position {i} has no preceding gloss"
                )));
            }
            (None, _) => {
                let mut label = IntensityLabel::None;
                if strategy == Strategy::EndMarking {
                    if let Some(l) = tokens.get(i + 1).and_then(|t| parse_marker(t)) {
                        label = l;
                        i += 1;
                    }
                }
                out.tokens.push(tok.to_string());
                out.labels.push(label);
                i += 1;
            }
        }
    }
    Ok(out)
}

/// Splits labeled instances into those with at least one intensified gloss
/// and the rest, preserving order.
pub fn partition_by_intensity(
    instances: &[SampleInstance],
) -> Result<(Vec<SampleInstance>, Vec<SampleInstance>)> {
    let mut with = Vec::new();
    let mut without = Vec::new();
    for inst in instances {
        let labels = inst.labels.as_ref().ok_or_else(|| {
            Error::Precondition(format!("instance {} has no gloss labels", inst.id))
        })?;
        if labels.iter().any(|l| l.is_intensified()) {
            with.push(inst.clone());
        } else {
            without.push(inst.clone());
        }
    }
    Ok((with, without))
}

/// Rewrites every gloss under `strategy`. Labels are dropped because the
/// enhanced tokens carry them and marker strategies change the length.
pub fn enhance_corpus(corpus: &Corpus, strategy: Strategy) -> Result<Corpus> {
    corpus.map_gloss(|inst| apply_strategy(&TaggedGlossSequence::from_instance(inst)?, strategy))
}

/// Enhanced gloss of one instance, or its plain gloss when `strategy` is
/// `None`.
pub fn enhanced_gloss(inst: &SampleInstance, strategy: Option<Strategy>) -> Result<Vec<String>> {
    match strategy {
        Some(s) => apply_strategy(&TaggedGlossSequence::from_instance(inst)?, s),
        None => Ok(inst.gloss.clone()),
    }
}

/// Labels keyed by (instance id, gloss index).
pub type LabelTable = BTreeMap<(String, usize), IntensityLabel>;

pub fn labels_of(corpus: &Corpus) -> LabelTable {
    let mut table = LabelTable::new();
    for (_, split) in corpus.iter_splits() {
        for inst in split {
            for (i, &l) in inst.labels.iter().flatten().enumerate() {
                table.insert((inst.id.clone(), i), l);
            }
        }
    }
    table
}

pub fn write_label_tsv(path: &Path, table: &LabelTable) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::Format(e.to_string()))?;
    let csv_err = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["instance_id", "gloss_index", "label"])
        .map_err(csv_err)?;
    for ((id, idx), label) in table {
        w.write_record([id.as_str(), &idx.to_string(), &label.to_string()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_label_tsv(path: &Path) -> Result<LabelTable> {
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut table = LabelTable::new();
    for (n, rec) in r.records().enumerate() {
        let line = n + 1;
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        if line == 1 && rec.get(0) == Some("instance_id") {
            continue;
        }
        if rec.len() != 3 {
            return Err(parse_err(format!("expected 3 columns, found {}", rec.len())));
        }
        let idx: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad gloss index {:?}", &rec[1])))?;
        let label = rec[2]
            .trim()
            .parse::<usize>()
            .map_err(|_| parse_err(format!("bad label {:?}", &rec[2])))
            .and_then(|v| IntensityLabel::from_index(v).map_err(|e| parse_err(e.to_string())))?;
        table.insert((rec[0].to_string(), idx), label);
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert_eq, proptest};
    use proptest::strategy::Strategy as _;

    fn seq(tokens: &[&str], labels: &[usize]) -> TaggedGlossSequence {
        TaggedGlossSequence::new(
            tokens.iter().map(|s| s.to_string()).collect(),
            labels.iter().map(|&l| IntensityLabel::from_index(l).unwrap()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn table_one_rows() {
        let s = seq(&["WOLKE"], &[2]);
        let cases = [
            (Strategy::Suffixation, vec!["WOLKE-INT2"]),
            (Strategy::EndMarking, vec!["WOLKE", "<INT2>"]),
            (Strategy::DelayedRelease, vec!["<INT2>", "WOLKE"]),
            (Strategy::SuffixReiteration, vec!["WOLKE-INT2", "WOLKE-INT2"]),
        ];
        for (st, want) in cases {
            assert_eq!(apply_strategy(&s, st).unwrap(), want, "{st}");
        }
    }

    #[test]
    fn unlabeled_passes_through() {
        for st in Strategy::ALL {
            assert_eq!(apply_strategy(&seq(&["REGEN"], &[0]), st).unwrap(), vec!["REGEN"]);
        }
    }

    #[test]
    fn length_mismatch_rejected() {
        let bad = TaggedGlossSequence {
            tokens: vec!["A".into()],
            labels: vec![],
        };
        assert!(matches!(
            apply_strategy(&bad, Strategy::Suffixation),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn strip_examples() {
        assert_eq!(
            strip_enhancement(&["WOLKE-INT2"], Strategy::Suffixation).unwrap(),
            seq(&["WOLKE"], &[2])
        );
        assert_eq!(
            strip_enhancement(&["<INT1>", "WIND"], Strategy::DelayedRelease).unwrap(),
            seq(&["WIND"], &[1])
        );
    }

    #[test]
    fn orphan_and_consecutive_markers() {
        let bad: [(&[&str], Strategy); 6] = [
            (&["<INT2>"], Strategy::EndMarking),
            (&["<INT2>", "A"], Strategy::EndMarking),
            (&["A", "<INT2>", "<INT1>"], Strategy::EndMarking),
            (&["A", "<INT2>"], Strategy::DelayedRelease),
            (&["<INT2>", "<INT1>", "A"], Strategy::DelayedRelease),
            (&["A-INT2", "B-INT2"], Strategy::SuffixReiteration),
        ];
        for (tokens, st) in bad {
            assert!(
                matches!(strip_enhancement(tokens, st), Err(Error::Format(_))),
                "{tokens:?} {st}"
            );
        }
        assert!(strip_enhancement(&["-INT2"], Strategy::Suffixation).is_err());
        assert!(strip_enhancement(&["A-INT2"], Strategy::EndMarking).is_err());
    }

    #[test]
    fn pre_marked_gloss_rejected() {
        let s = TaggedGlossSequence {
            tokens: vec!["WOLKE-INT2".into()],
            labels: vec![IntensityLabel::None],
        };
        assert!(apply_strategy(&s, Strategy::EndMarking).is_err());
    }

    fn labeled(id: &str, labels: Vec<IntensityLabel>) -> SampleInstance {
        SampleInstance {
            id: id.into(),
            text: vec!["x".into()],
            text_pos: None,
            gloss: labels.iter().map(|_| "G".to_string()).collect(),
            labels: Some(labels),
            frames: None,
        }
    }

    #[test]
    fn enhanced_corpus_stays_valid() {
        use IntensityLabel::*;
        let corpus = Corpus::new(vec![labeled("a", vec![High, None]), labeled("b", vec![Low])], vec![], vec![]).unwrap();
        let out = enhance_corpus(&corpus, Strategy::EndMarking).unwrap();
        assert_eq!(out.train[0].gloss, ["G", "<INT2>", "G"]);
        assert!(out.train.iter().all(|i| i.labels.is_none() && i.validate().is_ok()));
    }

    #[test]
    fn partition_cases() {
        let zeros = vec![
            labeled("a", vec![IntensityLabel::None]),
            labeled("b", vec![IntensityLabel::None, IntensityLabel::None]),
        ];
        let (w, wo) = partition_by_intensity(&zeros).unwrap();
        assert!(w.is_empty());
        assert_eq!(wo, zeros);
        let mixed = vec![
            labeled("a", vec![IntensityLabel::None, IntensityLabel::Low]),
            labeled("b", vec![IntensityLabel::None]),
        ];
        let (w, wo) = partition_by_intensity(&mixed).unwrap();
        assert_eq!((w.len(), wo.len()), (1, 1));
        let mut unl = labeled("c", vec![]);
        unl.labels = None;
        assert!(matches!(
            partition_by_intensity(&[unl]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn tsv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("labels.tsv");
        let mut t = LabelTable::new();
        t.insert(("a".into(), 0), IntensityLabel::High);
        t.insert(("a".into(), 1), IntensityLabel::None);
        t.insert(("b".into(), 0), IntensityLabel::Low);
        write_label_tsv(&path, &t).unwrap();
        assert_eq!(read_label_tsv(&path).unwrap(), t);
        std::fs::write(&path, "a\t0\t3\n").unwrap();
        assert!(matches!(read_label_tsv(&path), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn label_serde_is_integer() {
        assert_eq!(serde_json::to_string(&IntensityLabel::High).unwrap(), "2");
        assert!(serde_json::from_str::<IntensityLabel>("3").is_err());
    }

    fn arb_seq() -> impl proptest::strategy::Strategy<Value = TaggedGlossSequence> {
        prop::collection::vec(("[A-Z]{1,3}(-[A-Z]{1,2})?", 0usize..3), 0..12).prop_map(|v| {
            TaggedGlossSequence {
                tokens: v.iter().map(|(t, _)| t.clone()).collect(),
                labels: v.iter().map(|&(_, l)| IntensityLabel::ALL[l]).collect(),
            }
        })
    }

    proptest! {
        #[test]
        fn strip_inverts_apply(s in arb_seq()) {
            for st in Strategy::ALL {
                let enhanced = apply_strategy(&s, st).unwrap();
                let marked = s.labels.iter().filter(|l| l.is_intensified()).count();
                let expected_len = match st {
                    Strategy::Suffixation => s.tokens.len(),
                    _ => s.tokens.len() + marked,
                };
                prop_assert_eq!(enhanced.len(), expected_len);
                prop_assert_eq!(strip_enhancement(&enhanced, st).unwrap(), s.clone());
            }
        }

        #[test]
        fn zero_labels_are_identity(tokens in prop::collection::vec("[A-Z]{1,4}", 0..10)) {
            let s = TaggedGlossSequence {
                labels: vec![IntensityLabel::None; tokens.len()],
                tokens: tokens.clone(),
            };
            for st in Strategy::ALL {
                prop_assert_eq!(apply_strategy(&s, st).unwrap(), tokens.clone());
            }
        }
    }
}
