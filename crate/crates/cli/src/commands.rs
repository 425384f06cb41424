use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use tristage_core::codec::{extract_features, CodeGrid, PairExample, Waveform, SEMANTIC_RATE_HZ};
use tristage_core::data::{self, ManifestEntry, Tokenizers};
use tristage_core::eval::{frechet_distance, set_stats, token_perplexity};
use tristage_core::formats::{Checkpoint, FrameFile, TokenFile, TokenKind};
use tristage_core::model::{Model, ModelConfig};
use tristage_core::rng;
use tristage_core::sample::{mix_with_vocal, run_pipeline, SamplerConfig, StageModels};
use tristage_core::stages::{stage_spec_with, train_sequence_len, PairTokens, StageKind};
use tristage_core::train::{StepLog, TrainEvent, TrainOutcome, Trainer};

use crate::config::LoadedConfig;

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &LoadedConfig) -> Self {
        Self {
            root: cfg.run.paths.out_dir.clone(),
        }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("data/manifest.jsonl")
    }

    pub fn pair_file(&self, id: &str, what: &str) -> PathBuf {
        self.root.join("data/pairs").join(format!("{id}.{what}.haff"))
    }

    pub fn tokens_dir(&self) -> PathBuf {
        self.root.join("tokens")
    }

    pub fn token_file(&self, id: &str, what: &str) -> PathBuf {
        self.tokens_dir().join(format!("{id}.{what}.hafm"))
    }

    pub fn tokenizers(&self) -> PathBuf {
        self.tokens_dir().join("tokenizers.json")
    }

    pub fn split(&self) -> PathBuf {
        self.tokens_dir().join("split.json")
    }

    pub fn reference_dir(&self) -> PathBuf {
        self.root.join("reference")
    }

    pub fn generated_dir(&self) -> PathBuf {
        self.root.join("generated")
    }

    pub fn checkpoint(&self, stage: StageKind) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.ckpt"))
    }

    pub fn train_log(&self, stage: StageKind) -> PathBuf {
        self.root.join("logs").join(format!("{stage}.jsonl"))
    }

    pub fn eval_report(&self) -> PathBuf {
        self.root.join("eval.json")
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    create_parent(path)?;
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SynthSummary {
    pub total: usize,
    pub kept: usize,
}

impl SynthSummary {
    pub fn kept_fraction(&self) -> f64 {
        self.kept as f64 / self.total as f64
    }
}

pub fn synth_data(cfg: &LoadedConfig) -> Result<SynthSummary> {
    let layout = Layout::new(cfg);
    let corpus = data::synth_corpus(&cfg.run.corpus)?;
    for (m, p) in &corpus {
        for (what, w) in [("vocal", &p.vocal), ("instrumental", &p.instrumental)] {
            write_bytes(&layout.pair_file(&m.id, what), &FrameFile::from_waveform(w)?.to_bytes()?)?;
        }
        for (what, f) in [("vocal_features", &p.vocal_features), ("instrumental_features", &p.instrumental_features)] {
            write_bytes(&layout.pair_file(&m.id, what), &FrameFile::from_features(f).to_bytes()?)?;
        }
    }
    let entries: Vec<ManifestEntry> = corpus.into_iter().map(|(m, _)| m).collect();
    write_bytes(&layout.manifest(), data::manifest_to_jsonl(&entries).as_bytes())?;
    Ok(SynthSummary {
        total: entries.len(),
        kept: entries.iter().filter(|e| e.kept).count(),
    })
}

pub fn read_manifest(layout: &Layout) -> Result<Vec<ManifestEntry>> {
    let path = layout.manifest();
    data::manifest_from_jsonl(&read_text(&path)?).with_context(|| format!("in {}", path.display()))
}

fn read_waveform(path: &Path) -> Result<Waveform> {
    let f = FrameFile::read(path)?;
    if f.frames.shape()[1] != 1 {
        bail!("{} holds {}-dimensional frames, not a waveform", path.display(), f.frames.shape()[1]);
    }
    Ok(Waveform::new(f.rate, f.frames.into_data())?)
}

fn load_pair(layout: &Layout, entry: &ManifestEntry, feature_dim: usize) -> Result<PairExample> {
    let vocal = read_waveform(&layout.pair_file(&entry.id, "vocal"))?;
    let instrumental = read_waveform(&layout.pair_file(&entry.id, "instrumental"))?;
    Ok(PairExample {
        seed: entry.seed,
        vocal_features: extract_features(&vocal, SEMANTIC_RATE_HZ, feature_dim)?,
        instrumental_features: extract_features(&instrumental, SEMANTIC_RATE_HZ, feature_dim)?,
        vocal,
        instrumental,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub heldout: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct TokenizerFile {
    config: tristage_core::data::TokenizerConfig,
    vocal_semantic: tristage_core::codec::Codebook,
    instrumental_semantic: Option<tristage_core::codec::Codebook>,
    acoustic: tristage_core::codec::RvqCodec,
}

pub fn read_tokenizers(layout: &Layout) -> Result<Tokenizers> {
    let path = layout.tokenizers();
    let f: TokenizerFile = serde_json::from_str(&read_text(&path)?).with_context(|| format!("parsing {}", path.display()))?;
    // Rebuild through the checked constructors.
    let check = |c: tristage_core::codec::Codebook| tristage_core::codec::Codebook::new(c.k, c.dim, c.centroids);
    Ok(Tokenizers {
        vocal_semantic: check(f.vocal_semantic)?,
        instrumental_semantic: f.instrumental_semantic.map(check).transpose()?,
        acoustic: tristage_core::codec::RvqCodec::new(f.acoustic.stages.into_iter().map(check).collect::<Result<_, _>>()?)?,
    })
}

/// Tokenize every kept pair. Codebooks are fitted on the training pairs when
/// `fit` is set, otherwise read from a previous run.
pub fn tokenize(cfg: &LoadedConfig, fit: bool) -> Result<Split> {
    let layout = Layout::new(cfg);
    let manifest = read_manifest(&layout)?;
    let kept: Vec<&ManifestEntry> = manifest.iter().filter(|e| e.kept).collect();
    let n_heldout = cfg.run.data.heldout;
    if kept.len() <= n_heldout {
        bail!("{} kept pairs leave nothing to train on with data.heldout = {n_heldout}", kept.len());
    }
    let dim = cfg.run.corpus.synth.feature_dim;
    let pairs = kept.iter().map(|e| load_pair(&layout, e, dim)).collect::<Result<Vec<_>>>()?;
    let n_train = kept.len() - n_heldout;
    let tcfg = &cfg.run.tokenizer;
    let tok = if fit {
        let tok = data::fit_tokenizers(&pairs[..n_train], tcfg)?;
        let file = TokenizerFile {
            config: tcfg.clone(),
            vocal_semantic: tok.vocal_semantic.clone(),
            instrumental_semantic: tok.instrumental_semantic.clone(),
            acoustic: tok.acoustic.clone(),
        };
        write_bytes(&layout.tokenizers(), serde_json::to_string(&file)?.as_bytes())?;
        tok
    } else if layout.tokenizers().exists() {
        read_tokenizers(&layout)?
    } else {
        bail!(
            "no fitted codebooks at {}; run `tokenize --fit` to fit them on this corpus",
            layout.tokenizers().display()
        );
    };
    for (e, p) in kept.iter().zip(&pairs) {
        let t = data::tokenize_pair(&e.id, p, &tok, tcfg)?;
        write_bytes(&layout.token_file(&e.id, "sv"), &TokenFile::semantic(&t.vocal_semantic).to_bytes()?)?;
        write_bytes(&layout.token_file(&e.id, "si"), &TokenFile::semantic(&t.instrumental_semantic).to_bytes()?)?;
        for (what, kind, grid) in [("coarse", TokenKind::Coarse, &t.coarse), ("fine", TokenKind::Fine, &t.fine)] {
            let f = TokenFile {
                kind,
                grid: grid.clone(),
            };
            write_bytes(&layout.token_file(&e.id, what), &f.to_bytes()?)?;
        }
        let full = TokenFile {
            kind: TokenKind::FullAcoustic,
            grid: t.coarse.concat(&t.fine)?,
        };
        write_bytes(&layout.reference_dir().join(format!("{}.hafm", e.id)), &full.to_bytes()?)?;
    }
    let ids: Vec<String> = kept.iter().map(|e| e.id.clone()).collect();
    let split = Split {
        train: ids[..n_train].to_vec(),
        heldout: ids[n_train..].to_vec(),
    };
    write_bytes(&layout.split(), serde_json::to_string_pretty(&split)?.as_bytes())?;
    Ok(split)
}

pub fn read_split(layout: &Layout) -> Result<Split> {
    let path = layout.split();
    serde_json::from_str(&read_text(&path)?).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_pair_tokens(layout: &Layout, id: &str) -> Result<PairTokens> {
    let read = |what: &str| -> Result<TokenFile> {
        let p = layout.token_file(id, what);
        TokenFile::read(&p).with_context(|| format!("loading tokens of {id}"))
    };
    Ok(PairTokens {
        id: id.to_string(),
        vocal_semantic: read("sv")?.to_stream()?,
        instrumental_semantic: read("si")?.to_stream()?,
        coarse: read("coarse")?.grid,
        fine: read("fine")?.grid,
    })
}

fn vocabularies(pairs: &[PairTokens]) -> (usize, usize) {
    let sem = pairs
        .iter()
        .map(|p| p.vocal_semantic.vocab.max(p.instrumental_semantic.vocab))
        .max()
        .unwrap_or(1);
    let ac = pairs.iter().map(|p| p.coarse.vocab.max(p.fine.vocab)).max().unwrap_or(1);
    (sem, ac)
}

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
enum LogLine<'a> {
    Step(&'a StepLog),
    Eval { step: usize, loss: f64 },
}

/// Train one stage on the training split. With `resume`, continue from the
/// stage checkpoint and its optimizer state.
pub fn train(cfg: &LoadedConfig, stage: StageKind, resume: bool) -> Result<TrainOutcome> {
    let layout = Layout::new(cfg);
    let split = read_split(&layout)?;
    let pairs = split
        .train
        .iter()
        .map(|id| load_pair_tokens(&layout, id))
        .collect::<Result<Vec<_>>>()?;
    let ck_path = layout.checkpoint(stage);
    let mut trainer = if resume {
        let ck = Checkpoint::read(&ck_path).with_context(|| format!("resuming {stage}"))?;
        if ck.stage != stage {
            bail!("{} holds a {} checkpoint", ck_path.display(), ck.stage);
        }
        let opt = ck
            .optimizer
            .ok_or_else(|| anyhow!("{} has no optimizer state to resume from", ck_path.display()))?;
        Trainer::resume(stage, ck.model, opt, cfg.run.train.clone())?
    } else {
        let (sem, ac) = vocabularies(&pairs);
        let spec = stage_spec_with(stage, sem, ac);
        let max_distance = cfg
            .run
            .model
            .max_distance
            .unwrap_or_else(|| train_sequence_len(&spec, cfg.run.train.clip_s));
        let mc = ModelConfig::for_stage(&spec, &cfg.run.model.arch(), max_distance)?;
        let seed = rng::derive_seed(cfg.run.train.seed, &format!("init/{stage}"));
        Trainer::new(stage, Model::init(mc, seed)?, cfg.run.train.clone())?
    };

    let log_path = layout.train_log(stage);
    create_parent(&log_path)?;
    if !resume {
        write_bytes(&log_path, b"")?;
    }
    let mut log = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(&log_path)
        .with_context(|| format!("opening {}", log_path.display()))?;
    let echo = cfg.text.clone();
    let train_ids = split.train.clone();
    let mut on_event = |e: TrainEvent<'_>| -> tristage_core::error::Result<()> {
        use std::io::Write;
        let line = match &e {
            TrainEvent::Step(s) => Some(serde_json::to_string(&LogLine::Step(s))),
            TrainEvent::Evaluated { step, loss } => Some(serde_json::to_string(&LogLine::Eval {
                step: *step,
                loss: *loss,
            })),
            TrainEvent::Checkpoint { .. } => None,
        };
        if let Some(line) = line {
            let line = line.expect("log lines serialize");
            writeln!(log, "{line}").map_err(|err| tristage_core::error::Error::io(&log_path, err))?;
        }
        if let TrainEvent::Checkpoint { model, opt, .. } = e {
            let ck = Checkpoint {
                stage,
                config_echo: echo.clone(),
                model: model.clone(),
                optimizer: Some(opt.clone()),
                train_ids: train_ids.clone(),
            };
            ck.write(&ck_path)?;
        }
        Ok(())
    };
    create_parent(&ck_path)?;
    let out = trainer
        .run(&pairs, &mut on_event)
        .map_err(|e| e.in_stage(stage.name()))?;
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct GenerateOptions {
    /// A single vocal semantic token file; default is every tokenized pair.
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub decode: bool,
    pub cfg_scale: Option<f64>,
    pub temperature: Option<f64>,
    pub top_k: Option<usize>,
    pub seed: Option<u64>,
}

pub fn load_stage_models(layout: &Layout) -> Result<[Model; 3]> {
    let load = |k: StageKind| -> Result<Model> {
        let ck = Checkpoint::read(&layout.checkpoint(k)).with_context(|| format!("loading the {k} stage"))?;
        if ck.stage != k {
            bail!("{} holds a {} model", layout.checkpoint(k).display(), ck.stage);
        }
        Ok(ck.model)
    };
    Ok([load(StageKind::Semantic)?, load(StageKind::Coarse)?, load(StageKind::Fine)?])
}

/// Run the three-stage chain. Each input gets its own sampling seed derived
/// from the run seed and its name, so outputs do not depend on input order.
pub fn generate(cfg: &LoadedConfig, opts: &GenerateOptions) -> Result<Vec<PathBuf>> {
    let layout = Layout::new(cfg);
    let mut sampler: SamplerConfig = cfg.run.sampler;
    if let Some(v) = opts.cfg_scale {
        sampler.cfg_scale = v;
    }
    if let Some(v) = opts.temperature {
        sampler.temperature = v;
    }
    if let Some(v) = opts.top_k {
        sampler.top_k = v;
    }
    if let Some(v) = opts.seed {
        sampler.seed = v;
    }
    sampler.validate()?;
    let [sem, coarse, fine] = load_stage_models(&layout)?;
    let models = StageModels {
        semantic: &sem,
        coarse: &coarse,
        fine: &fine,
    };
    let codec = read_tokenizers(&layout)?.acoustic;

    let jobs: Vec<(String, PathBuf, PathBuf)> = match &opts.input {
        Some(input) => {
            let name = input
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("input")
                .trim_end_matches(".sv")
                .to_string();
            let out = opts
                .output
                .clone()
                .unwrap_or_else(|| layout.generated_dir().join(format!("{name}.hafm")));
            vec![(name, input.clone(), out)]
        }
        None => {
            let split = read_split(&layout)?;
            split
                .train
                .iter()
                .chain(&split.heldout)
                .map(|id| {
                    (
                        id.clone(),
                        layout.token_file(id, "sv"),
                        layout.generated_dir().join(format!("{id}.hafm")),
                    )
                })
                .collect()
        }
    };

    let mut written = Vec::new();
    for (name, input, out) in jobs {
        let vocal = TokenFile::read(&input)?.to_stream()?;
        let s = SamplerConfig {
            seed: rng::derive_seed(sampler.seed, &name),
            ..sampler
        };
        let result = run_pipeline(&vocal, &models, &codec, &s).with_context(|| format!("generating for {name}"))?;
        let file = TokenFile {
            kind: TokenKind::FullAcoustic,
            grid: result.acoustic.clone(),
        };
        write_bytes(&out, &file.to_bytes()?)?;
        written.push(out.clone());
        if opts.decode {
            let frames_path = out.with_extension("frames.haff");
            write_bytes(&frames_path, &FrameFile::from_features(&result.frames).to_bytes()?)?;
            written.push(frames_path);
            let vocal_wave = layout.pair_file(&name, "vocal");
            if vocal_wave.exists() {
                let mix = mix_with_vocal(&result.frames, &read_waveform(&vocal_wave)?)?;
                let mix_path = out.with_extension("mix.haff");
                write_bytes(&mix_path, &FrameFile::from_waveform(&mix)?.to_bytes()?)?;
                written.push(mix_path);
            }
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowCounts {
    pub generated: usize,
    pub reference: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frechet: f64,
    /// Fréchet distance of the generated set with each codebook row
    /// shuffled, against the same reference.
    pub shuffled_frechet: f64,
    pub perplexity: Option<f64>,
    pub n_windows: WindowCounts,
    pub config_hash: String,
    pub config: String,
}

/// All token files in a directory, sorted by name.
pub fn read_grid_dir(dir: &Path) -> Result<BTreeMap<String, CodeGrid>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))?;
    for e in entries {
        let path = e?.path();
        if path.extension().and_then(|s| s.to_str()) == Some("hafm") {
            let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            out.insert(name, TokenFile::read(&path)?.grid);
        }
    }
    if out.is_empty() {
        bail!("{} contains no token files", dir.display());
    }
    Ok(out)
}

/// Shuffle each codebook row of a grid in place of its time order.
pub fn shuffle_grid(grid: &CodeGrid, seed: u64, name: &str) -> Result<CodeGrid> {
    let mut r = rng::stream(seed, &format!("shuffle/{name}"));
    let rows = grid
        .rows()
        .map(|row| {
            let mut row = row.to_vec();
            row.shuffle(&mut r);
            row
        })
        .collect();
    Ok(CodeGrid::from_rows(grid.frame_rate, grid.vocab, rows)?)
}

pub fn eval(cfg: &LoadedConfig, generated: Option<&Path>, reference: Option<&Path>, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let layout = Layout::new(cfg);
    let gen_dir = generated.map(Path::to_path_buf).unwrap_or_else(|| layout.generated_dir());
    let ref_dir = reference.map(Path::to_path_buf).unwrap_or_else(|| layout.reference_dir());
    let gen = read_grid_dir(&gen_dir)?;
    let refs = read_grid_dir(&ref_dir)?;
    let gen_grids: Vec<CodeGrid> = gen.values().cloned().collect();
    let ref_grids: Vec<CodeGrid> = refs.values().cloned().collect();
    let (gs, n_gen) = set_stats(&gen_grids).with_context(|| format!("embedding {}", gen_dir.display()))?;
    let (rs, n_ref) = set_stats(&ref_grids).with_context(|| format!("embedding {}", ref_dir.display()))?;
    if gs.dim() != rs.dim() {
        bail!(
            "generated embeddings have {} dimensions, reference {}; the sets use different vocabularies",
            gs.dim(),
            rs.dim()
        );
    }
    let frechet = frechet_distance(&gs, &rs)?;
    let shuffled = gen
        .iter()
        .map(|(name, g)| shuffle_grid(g, cfg.run.sampler.seed, name))
        .collect::<Result<Vec<_>>>()?;
    let shuffled_frechet = frechet_distance(&set_stats(&shuffled)?.0, &rs)?;

    let perplexity = match checkpoint {
        None => None,
        Some(path) => {
            let ck = Checkpoint::read(path)?;
            let split = read_split(&layout)?;
            if split.heldout.is_empty() {
                bail!("perplexity needs held-out pairs; set data.heldout and re-run tokenize");
            }
            let held = split
                .heldout
                .iter()
                .map(|id| load_pair_tokens(&layout, id))
                .collect::<Result<Vec<_>>>()?;
            Some(token_perplexity(&ck.model, ck.stage, &held, &ck.train_ids)?)
        }
    };
    let report = EvalReport {
        frechet,
        shuffled_frechet,
        perplexity,
        n_windows: WindowCounts {
            generated: n_gen,
            reference: n_ref,
        },
        config_hash: cfg.hash(),
        config: cfg.text.clone(),
    };
    write_bytes(&layout.eval_report(), serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}
