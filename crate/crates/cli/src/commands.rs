use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use serde::Serialize;
use serde_json::json;
use slg_core::backtrans::{train_backtrans, translate, BtConfig, BtModel};
use slg_core::checkpoint;
use slg_core::corpus::{load_corpus, save_corpus, synth_generate, Corpus, SampleInstance, SynthConfig};
use slg_core::dynsel::{self, generate_dynamic, train_dynamic, write_alpha_csv, DynConfig, DynModel, MixMode};
use slg_core::eval::{read_token_file, write_token_file, PartitionInput, ScoreReport};
use slg_core::intensify::{
    enhance_corpus, enhanced_gloss, labels_of, partition_by_intensity, read_label_tsv, write_label_tsv, Strategy,
};
use slg_core::ptgen::{self, generate, pose_examples, train_pt, GenerateOptions, PoseSequence, PtConfig, PtModel};
use slg_core::tagger::{self, evaluate_tagger, label_corpus, pairs_from_instances, train_tagger, TaggerConfig, TaggerModel};

use crate::config::{resolve, Layers};
use crate::manifest::Manifest;
use crate::plot;
use crate::{Command, ModeArg, PartitionArg};

const CHECKPOINT_DIR: &str = "checkpoint";

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { out, layers } => synth(&out, &layers),
        Command::Enhance { corpus, strategy, out } => enhance(&corpus, strategy, &out),
        Command::TagTrain { corpus, out, layers } => tag_train(&corpus, &out, &layers),
        Command::TagLabel {
            corpus,
            model,
            labels,
            out,
        } => tag_label(&corpus, &model, labels.as_deref(), &out),
        Command::PtTrain {
            corpus,
            strategy,
            out,
            layers,
        } => pt_train(&corpus, strategy, &out, &layers),
        Command::DynTrain {
            corpus,
            strategies,
            mode,
            out,
            layers,
        } => dyn_train(&corpus, strategies, mode, &out, &layers),
        Command::BtTrain { corpus, out, layers } => bt_train(&corpus, &out, &layers),
        Command::Generate(args) => generate_cmd(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Plot { input, out } => plot_cmd(&input, &out),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn write_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let mut s = String::from("epoch,loss\n");
    for (i, v) in curve.iter().enumerate() {
        s.push_str(&format!("{},{v}\n", i + 1));
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn open_corpus(dir: &Path) -> Result<Corpus> {
    load_corpus(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn synth(out: &Path, layers: &Layers) -> Result<()> {
    let config: SynthConfig = resolve(layers, "seed", vec![])?;
    let corpus = synth_generate(&config)?;
    save_corpus(&corpus, out)?;
    write_label_tsv(&out.join("labels.tsv"), &labels_of(&corpus))?;
    info!("wrote {} instances to {}", corpus.len(), out.display());
    let mut m = Manifest::new("synth", &config)?.seed(config.seed).corpus(out)?;
    m.outputs = vec![out.join("labels.tsv")];
    m.write(out)
}

fn enhance(corpus_dir: &Path, strategy: Strategy, out: &Path) -> Result<()> {
    let corpus = open_corpus(corpus_dir)?;
    let enhanced = enhance_corpus(&corpus, strategy)?;
    save_corpus(&enhanced, out)?;
    let mut m = Manifest::new("enhance", json!({ "strategy": strategy }))?.corpus(corpus_dir)?;
    m.outputs = vec![out.to_path_buf()];
    m.write(out)
}

fn tag_train(corpus_dir: &Path, out: &Path, layers: &Layers) -> Result<()> {
    let config: TaggerConfig = resolve(layers, "seed", vec![])?;
    let corpus = open_corpus(corpus_dir)?;
    let pairs = pairs_from_instances(&corpus.train)?;
    let (model, curve) = train_tagger(&pairs, config.clone())?;
    create_dir(out)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    model.save(&ckpt)?;
    write_curve(&out.join("loss.csv"), &curve)?;
    let mut m = Manifest::new("tag-train", &config)?.seed(config.seed).corpus(corpus_dir)?;
    m.checkpoint = Some(ckpt);
    m.outputs.push(out.join("loss.csv"));
    if corpus.dev.iter().all(|i| i.labels.is_some()) && !corpus.dev.is_empty() {
        let scores = evaluate_tagger(&model, &pairs_from_instances(&corpus.dev)?)?;
        info!("dev macro F1 {:.1}", scores.f1);
        write_json(&out.join("scores.json"), &scores)?;
        m.outputs.push(out.join("scores.json"));
    }
    m.write(out)
}

fn tag_label(corpus_dir: &Path, model_dir: &Path, labels: Option<&Path>, out: &Path) -> Result<()> {
    let model = TaggerModel::load(model_dir)?;
    let corpus = open_corpus(corpus_dir)?;
    let overrides = labels.map(read_label_tsv).transpose()?;
    let labeled = label_corpus(&model, &corpus, overrides.as_ref())?;
    save_corpus(&labeled, out)?;
    write_label_tsv(&out.join("labels.tsv"), &labels_of(&labeled))?;
    let mut m = Manifest::new("tag-label", json!({ "kind": tagger::KIND }))?.corpus(corpus_dir)?;
    m.checkpoint = Some(model_dir.to_path_buf());
    m.inputs = labels.map(Path::to_path_buf).into_iter().collect();
    m.outputs = vec![out.join("labels.tsv")];
    m.write(out)
}

fn pt_train(corpus_dir: &Path, strategy: Option<Strategy>, out: &Path, layers: &Layers) -> Result<()> {
    let config: PtConfig = resolve(layers, "seed", vec![])?;
    let corpus = open_corpus(corpus_dir)?;
    let stats = corpus.stats()?.clone();
    let train = pose_examples(&corpus.train, &stats, &[strategy])?;
    let mut model = PtModel::for_examples(config.clone(), &train, stats.clone())?;
    let curve = train_pt(&mut model, &train)?;
    create_dir(out)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    model.save(&ckpt)?;
    write_curve(&out.join("loss.csv"), &curve)?;
    let mut m = Manifest::new("pt-train", json!({ "strategy": strategy, "model": config }))?
        .seed(config.seed)
        .corpus(corpus_dir)?;
    m.checkpoint = Some(ckpt);
    m.outputs.push(out.join("loss.csv"));
    if !corpus.dev.is_empty() {
        let dev = pose_examples(&corpus.dev, &stats, &[strategy])?;
        let mse = ptgen::evaluate_mse(&model, &dev)?;
        info!("dev MSE {mse:.5}");
        write_json(&out.join("scores.json"), &json!({ "dev_mse": mse }))?;
        m.outputs.push(out.join("scores.json"));
    }
    m.write(out)
}

fn dyn_train(
    corpus_dir: &Path,
    strategies: Option<Vec<Strategy>>,
    mode: Option<ModeArg>,
    out: &Path,
    layers: &Layers,
) -> Result<()> {
    let mut flags = Vec::new();
    if let Some(s) = strategies {
        flags.push(("strategies".to_string(), serde_json::to_value(s)?));
    }
    if let Some(m) = mode {
        flags.push(("mode".to_string(), serde_json::to_value(MixMode::from(m))?));
    }
    let config: DynConfig = resolve(layers, "pt.seed", flags)?;
    let corpus = open_corpus(corpus_dir)?;
    let stats = corpus.stats()?.clone();
    let sources: Vec<Option<Strategy>> = config.strategies.iter().copied().map(Some).collect();
    let train = pose_examples(&corpus.train, &stats, &sources)?;
    let mut model = DynModel::for_examples(config.clone(), &train, stats.clone())?;
    let curve = train_dynamic(&mut model, &train)?;
    create_dir(out)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    model.save(&ckpt)?;
    write_curve(&out.join("loss.csv"), &curve)?;
    let mut m = Manifest::new("dyn-train", &config)?.seed(config.pt.seed).corpus(corpus_dir)?;
    m.checkpoint = Some(ckpt);
    m.outputs.push(out.join("loss.csv"));
    if !corpus.dev.is_empty() {
        let dev = pose_examples(&corpus.dev, &stats, &sources)?;
        let mse = dynsel::evaluate_mse(&model, &dev, config.mode)?;
        info!("dev MSE {mse:.5}");
        write_json(&out.join("scores.json"), &json!({ "dev_mse": mse }))?;
        m.outputs.push(out.join("scores.json"));
    }
    m.write(out)
}

fn bt_train(corpus_dir: &Path, out: &Path, layers: &Layers) -> Result<()> {
    let config: BtConfig = resolve(layers, "seed", vec![])?;
    let corpus = open_corpus(corpus_dir)?;
    let mut model = BtModel::for_instances(config.clone(), &corpus.train, corpus.stats()?.clone())?;
    let curve = train_backtrans(&mut model, &corpus.train)?;
    create_dir(out)?;
    let ckpt = out.join(CHECKPOINT_DIR);
    model.save(&ckpt)?;
    write_curve(&out.join("loss.csv"), &curve)?;
    let mut m = Manifest::new("bt-train", &config)?.seed(config.seed).corpus(corpus_dir)?;
    m.checkpoint = Some(ckpt);
    m.outputs.push(out.join("loss.csv"));
    m.write(out)
}

#[derive(clap::Args, Debug)]
pub struct GenerateArgs {
    /// Checkpoint directory of a pose transformer or dynamic model.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Space-separated gloss sequence. Give it once per source for a dynamic model.
    #[arg(long)]
    pub gloss: Vec<String>,
    /// Generate for every instance of a corpus split instead of `--gloss`.
    #[arg(long, conflicts_with = "gloss")]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value = "dev")]
    pub split: String,
    #[arg(long, value_enum, default_value = "all")]
    pub partition: PartitionArg,
    /// Enhancement applied to corpus glosses for a pose transformer.
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub limit: Option<usize>,
    /// Mixing mode of a dynamic model; defaults to its training mode.
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    #[arg(long)]
    pub max_frames: Option<usize>,
    /// Back-translate every generated sequence with this checkpoint.
    #[arg(long)]
    pub bt_model: Option<PathBuf>,
}

enum Generator {
    Pt(PtModel),
    Dyn(DynModel, MixMode),
}

impl Generator {
    fn load(dir: &Path, mode: Option<ModeArg>) -> Result<Self> {
        let kind = checkpoint::peek_kind(dir)?;
        match kind.as_str() {
            ptgen::KIND => Ok(Self::Pt(PtModel::load(dir)?)),
            dynsel::KIND => {
                let model = DynModel::load(dir)?;
                let mode = mode.map_or(model.config.mode, MixMode::from);
                Ok(Self::Dyn(model, mode))
            }
            other => bail!("{}: checkpoint kind {other:?} cannot generate poses", dir.display()),
        }
    }

    fn options(&self, max_frames: Option<usize>) -> GenerateOptions {
        let config = match self {
            Self::Pt(m) => &m.config,
            Self::Dyn(m, _) => &m.config.pt,
        };
        let mut opts = GenerateOptions::from_config(config);
        if let Some(n) = max_frames {
            opts.max_frames = n;
        }
        opts
    }

    /// The pose and, for dynamic models, the α trace.
    fn run(&self, sources: &[Vec<String>], opts: GenerateOptions) -> Result<(PoseSequence, Option<Vec<Vec<f32>>>)> {
        match self {
            Self::Pt(m) => {
                if sources.len() != 1 {
                    bail!("a pose transformer takes one gloss source, got {}", sources.len());
                }
                Ok((generate(m, &sources[0], opts)?, None))
            }
            Self::Dyn(m, mode) => {
                let g = generate_dynamic(m, sources, opts, *mode)?;
                let alphas = g.alphas();
                Ok((g.pose, Some(alphas)))
            }
        }
    }

    fn sources_for(&self, inst: &SampleInstance, strategy: Option<Strategy>) -> Result<Vec<Vec<String>>> {
        match self {
            Self::Pt(_) => Ok(vec![enhanced_gloss(inst, strategy)?]),
            Self::Dyn(m, _) => Ok(m
                .config
                .strategies
                .iter()
                .map(|&s| enhanced_gloss(inst, Some(s)))
                .collect::<slg_core::Result<_>>()?),
        }
    }
}

fn generate_cmd(args: GenerateArgs) -> Result<()> {
    let generator = Generator::load(&args.model, args.mode)?;
    let opts = generator.options(args.max_frames);
    let bt = args.bt_model.as_deref().map(BtModel::load).transpose()?;
    create_dir(&args.out)?;
    let mut m = Manifest::new(
        "generate",
        json!({
            "split": args.corpus.as_ref().map(|_| &args.split),
            "partition": args.corpus.as_ref().map(|_| args.partition),
            "strategy": args.strategy,
            "max_frames": opts.max_frames,
            "threshold": opts.threshold,
            "mode": match &generator { Generator::Dyn(_, mode) => Some(*mode), Generator::Pt(_) => None },
        }),
    )?;
    m.checkpoint = Some(args.model.clone());
    m.inputs = args.bt_model.iter().cloned().collect();

    let jobs: Vec<(String, Vec<Vec<String>>, Option<Vec<String>>)> = match &args.corpus {
        Some(dir) => {
            let corpus = open_corpus(dir)?;
            let split = corpus.split(&args.split)?;
            let chosen = match args.partition {
                PartitionArg::All => split.to_vec(),
                PartitionArg::With => partition_by_intensity(split)?.0,
                PartitionArg::Without => partition_by_intensity(split)?.1,
            };
            m = m.corpus(dir)?;
            chosen
                .iter()
                .take(args.limit.unwrap_or(usize::MAX))
                .map(|inst| Ok((inst.id.clone(), generator.sources_for(inst, args.strategy)?, Some(inst.text.clone()))))
                .collect::<Result<_>>()?
        }
        None => {
            if args.gloss.is_empty() {
                bail!("give --gloss or --corpus");
            }
            let sources = args.gloss.iter().map(|g| g.split_whitespace().map(String::from).collect()).collect();
            vec![("sequence".to_string(), sources, None)]
        }
    };

    let poses = args.out.join("poses");
    create_dir(&poses)?;
    let (mut ids, mut hyps, mut refs) = (Vec::new(), Vec::new(), Vec::new());
    for (id, sources, text) in &jobs {
        let (pose, alphas) = generator.run(sources, opts)?;
        pose.write_csv(&poses.join(format!("{id}.csv")))?;
        if let Some(a) = alphas {
            let dir = args.out.join("alpha");
            create_dir(&dir)?;
            write_alpha_csv(&dir.join(format!("{id}.csv")), &a)?;
        }
        if let Some(bt) = &bt {
            hyps.push(translate(bt, &pose, bt.config.max_output)?);
            refs.extend(text.clone());
        }
        ids.push(vec![id.clone()]);
    }
    info!("generated {} sequences", jobs.len());
    write_token_file(&args.out.join("ids.txt"), &ids)?;
    m.outputs = vec![poses, args.out.join("ids.txt")];
    if bt.is_some() {
        write_token_file(&args.out.join("hyps.txt"), &hyps)?;
        m.outputs.push(args.out.join("hyps.txt"));
        if !refs.is_empty() {
            write_token_file(&args.out.join("refs.txt"), &refs)?;
            m.outputs.push(args.out.join("refs.txt"));
        }
    }
    m.write(&args.out)
}

#[derive(clap::Args, Debug)]
pub struct EvaluateArgs {
    /// Hypothesis token file, one sentence per line.
    #[arg(long, requires = "reference")]
    pub hyp: Option<PathBuf>,
    #[arg(long = "ref", id = "reference")]
    pub reference: Option<PathBuf>,
    /// Baseline hypotheses for the bootstrap test.
    #[arg(long, requires = "hyp")]
    pub baseline: Option<PathBuf>,
    /// Extra partition as NAME=HYP,REF[,BASELINE]. Repeatable.
    #[arg(long = "partition", value_name = "NAME=HYP,REF[,BASELINE]")]
    pub partitions: Vec<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// Add-one smoothing for BLEU orders above one.
    #[arg(long)]
    pub smoothing: bool,
    #[arg(long, default_value_t = 1000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

struct PartitionFiles {
    name: String,
    hyp: PathBuf,
    reference: PathBuf,
    baseline: Option<PathBuf>,
}

fn parse_partition(spec: &str) -> Result<PartitionFiles> {
    let (name, files) = spec
        .split_once('=')
        .with_context(|| format!("partition {spec:?} must look like NAME=HYP,REF[,BASELINE]"))?;
    let parts: Vec<&str> = files.split(',').collect();
    if name.is_empty() || !(2..=3).contains(&parts.len()) {
        bail!("partition {spec:?} must look like NAME=HYP,REF[,BASELINE]");
    }
    Ok(PartitionFiles {
        name: name.to_string(),
        hyp: parts[0].into(),
        reference: parts[1].into(),
        baseline: parts.get(2).map(PathBuf::from),
    })
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let mut files = Vec::new();
    if let (Some(hyp), Some(reference)) = (&args.hyp, &args.reference) {
        files.push(PartitionFiles {
            name: "all".into(),
            hyp: hyp.clone(),
            reference: reference.clone(),
            baseline: args.baseline.clone(),
        });
    }
    for spec in &args.partitions {
        files.push(parse_partition(spec)?);
    }
    if files.is_empty() {
        bail!("give --hyp/--ref or at least one --partition");
    }
    let loaded = files
        .iter()
        .map(|f| {
            Ok((
                read_token_file(&f.hyp)?,
                read_token_file(&f.reference)?,
                f.baseline.as_deref().map(read_token_file).transpose()?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let inputs: Vec<PartitionInput<'_>> = files
        .iter()
        .zip(&loaded)
        .map(|(f, (h, r, b))| PartitionInput {
            name: &f.name,
            hyps: h,
            refs: r,
            baseline: b.as_deref(),
        })
        .collect();
    let report = ScoreReport::score(&inputs, args.smoothing, args.resamples, args.seed)?;
    create_dir(&args.out)?;
    report.write_json(&args.out.join("report.json"))?;
    report.write_csv(&args.out.join("report.csv"))?;
    for p in &report.partitions {
        info!("{}: BLEU-1 {:.2} BLEU-4 {:.2} ROUGE-L {:.2}", p.partition, p.bleu[0], p.bleu[3], p.rouge_l);
    }
    let mut m = Manifest::new(
        "evaluate",
        json!({ "smoothing": args.smoothing, "resamples": args.resamples, "seed": args.seed }),
    )?
    .seed(args.seed);
    m.inputs = files
        .iter()
        .flat_map(|f| [Some(f.hyp.clone()), Some(f.reference.clone()), f.baseline.clone()])
        .flatten()
        .collect();
    m.outputs = vec![args.out.join("report.json"), args.out.join("report.csv")];
    m.write(&args.out)
}

fn plot_cmd(input: &Path, out: &Path) -> Result<()> {
    let data = plot::read_plot_csv(input)?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(out, plot::render(&data)).with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

impl From<ModeArg> for MixMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Soft => MixMode::Soft,
            ModeArg::Hard => MixMode::Hard,
        }
    }
}
