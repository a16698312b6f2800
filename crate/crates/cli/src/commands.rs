use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use vibre::analysis::{
    occlusion_attribution, variance_bins, variance_sorted_f1, write_bins_csv, write_plot_data, AttributionResult,
    PlotSeries,
};
use vibre::corpus::{generate_corpus, make_ood_testset, BiasSpec, EntityLexicon, Example, SplitSizes};
use vibre::evaluation::{
    format_summary, gap_report, per_relation_report, predict, summarize, write_csv, MethodSummary, PredictionRecord,
    SeedScore,
};
use vibre::io::{read_jsonl, read_string, to_jsonl, write_jsonl, write_string};
use vibre::model::{Checkpoint, Vocabulary};
use vibre::training::{write_log_csv, Method, TrainData, Trainer};
use vibre::{Error, Result};

use crate::config::RunConfig;

pub const SPLITS: [&str; 4] = ["train", "dev", "test_id", "test_ood"];
const EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub spec: BiasSpec,
    pub sizes: SplitSizes,
    /// File name → SHA-256 of its bytes.
    pub files: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

fn write_hashed(dir: &Path, name: &str, contents: &str, files: &mut BTreeMap<String, String>) -> Result<()> {
    write_string(&dir.join(name), contents)?;
    files.insert(name.to_string(), sha256_hex(contents.as_bytes()));
    Ok(())
}

/// Writes the four splits, the lexicon and a manifest of content hashes.
pub fn gen_data(cfg: &RunConfig) -> Result<Manifest> {
    cfg.corpus.validate()?;
    cfg.sizes.validate()?;
    let lexicon = cfg.corpus.lexicon()?;
    let corpus = generate_corpus(&cfg.corpus, &lexicon, &cfg.sizes)?;
    let ood = make_ood_testset(&corpus.test_id, &lexicon, cfg.corpus.seed)?;
    let dir = cfg.data_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        context: dir.display().to_string(),
        source: e,
    })?;
    let mut files = BTreeMap::new();
    for (name, split) in SPLITS.iter().zip([&corpus.train, &corpus.dev, &corpus.test_id, &ood]) {
        write_hashed(&dir, &format!("{name}.jsonl"), &to_jsonl(split)?, &mut files)?;
    }
    write_hashed(&dir, "lexicon.json", &serde_json::to_string_pretty(&lexicon)?, &mut files)?;
    write_hashed(&dir, "biased_entities.json", &serde_json::to_string_pretty(&corpus.biased)?, &mut files)?;
    let manifest = Manifest {
        seed: cfg.corpus.seed,
        spec: cfg.corpus.clone(),
        sizes: cfg.sizes,
        files,
    };
    write_string(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Generated data loaded back from disk and checked against its manifest.
pub struct Data {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test_id: Vec<Example>,
    pub test_ood: Vec<Example>,
    pub lexicon: EntityLexicon,
    /// SHA-256 of `manifest.json`.
    pub digest: String,
}

impl Data {
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::build(self.train.iter().chain(&self.dev).chain(&self.test_id).chain(&self.test_ood))
    }

    pub fn split(&self, name: &str) -> &[Example] {
        match name {
            "train" => &self.train,
            "dev" => &self.dev,
            "test_id" => &self.test_id,
            _ => &self.test_ood,
        }
    }
}

pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    let dir = cfg.data_dir();
    let manifest_path = dir.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::Data(format!(
            "{} not found; run gen-data first",
            manifest_path.display()
        )));
    }
    let manifest_text = read_string(&manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Data(format!("{}: {e}", manifest_path.display())))?;
    for (name, hash) in &manifest.files {
        let path = dir.join(name);
        let bytes = std::fs::read(&path).map_err(|e| Error::Io {
            context: path.display().to_string(),
            source: e,
        })?;
        if &sha256_hex(&bytes) != hash {
            return Err(Error::Data(format!("{} does not match its manifest hash", path.display())));
        }
    }
    let read = |name: &str| read_jsonl::<Example>(&dir.join(format!("{name}.jsonl")));
    let lexicon: EntityLexicon = serde_json::from_str(&read_string(&dir.join("lexicon.json"))?)?;
    Ok(Data {
        train: read("train")?,
        dev: read("dev")?,
        test_id: read("test_id")?,
        test_ood: read("test_ood")?,
        lexicon,
        digest: sha256_hex(manifest_text.as_bytes()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DevSummary {
    pub method: Method,
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: Option<usize>,
    pub best_dev_micro_f1: Option<f64>,
}

pub const CHECKPOINT_FILE: &str = "model.json";
pub const SNAPSHOT_FILE: &str = "train_state.json";
pub const LOG_FILE: &str = "train_log.csv";

/// Trains every (method, seed) pair. With `resume`, a run continues from its
/// last per-epoch snapshot when one exists.
pub fn train(cfg: &RunConfig, resume: bool) -> Result<Vec<DevSummary>> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let vocab = data.vocabulary();
    let mut summaries = Vec::new();
    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            let dir = cfg.run_dir(method, seed);
            std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
                context: dir.display().to_string(),
                source: e,
            })?;
            let tcfg = cfg.train_config(method, seed);
            let td = || TrainData {
                train: &data.train,
                dev: &data.dev,
                lexicon: &data.lexicon,
            };
            let snapshot = dir.join(SNAPSHOT_FILE);
            let mut trainer = if resume && snapshot.exists() {
                Trainer::restore(&read_string(&snapshot)?, td(), &tcfg)?
            } else {
                Trainer::new(tcfg, cfg.model_config(seed), vocab.clone(), td())?
            };
            if trainer.state().vocab != vocab {
                return Err(Error::Checkpoint(format!(
                    "{}: vocabulary does not match the current data",
                    snapshot.display()
                )));
            }
            while !trainer.finished() {
                trainer.run_epoch()?;
                write_string(&snapshot, &trainer.snapshot()?)?;
            }
            let outcome = trainer.into_outcome();
            Checkpoint {
                state: outcome.best,
                method: method.to_string(),
                data_digest: Some(data.digest.clone()),
            }
            .save(&dir.join(CHECKPOINT_FILE))?;
            write_log_csv(&dir.join(LOG_FILE), &outcome.log)?;
            summaries.push(DevSummary {
                method,
                seed,
                epochs_run: outcome.epochs_run,
                best_epoch: outcome.best_epoch,
                best_dev_micro_f1: outcome.best_dev_micro_f1,
            });
        }
    }
    write_csv(&cfg.out_dir.join("runs").join("dev_summary.csv"), &summaries)?;
    Ok(summaries)
}

/// Loads a run's checkpoint and checks that it belongs to the current data.
pub fn load_checkpoint(cfg: &RunConfig, data: &Data, method: Method, seed: u64) -> Result<Checkpoint> {
    let path = cfg.run_dir(method, seed).join(CHECKPOINT_FILE);
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} not found; run train first", path.display())));
    }
    let ck = Checkpoint::load(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ck.data_digest.as_deref() != Some(data.digest.as_str()) {
        return Err(Error::Checkpoint(format!(
            "{} was trained on different data (manifest digest mismatch)",
            path.display()
        )));
    }
    if ck.state.vocab != data.vocabulary() {
        return Err(Error::Checkpoint(format!("{}: vocabulary mismatch", path.display())));
    }
    if ck.method != method.as_str() {
        return Err(Error::Checkpoint(format!(
            "{} holds a '{}' model, expected '{method}'",
            path.display(),
            ck.method
        )));
    }
    Ok(ck)
}

fn predictions(ck: &Checkpoint, method: Method, split: &[Example]) -> Result<Vec<PredictionRecord>> {
    let prepared: Vec<Example> = split.iter().map(|e| method.prepare_eval(e)).collect();
    predict(&ck.state, &prepared, EVAL_BATCH)
}

pub struct EvalOutput {
    pub scores: Vec<SeedScore>,
    pub summary: Vec<MethodSummary>,
    pub table: String,
}

/// ID and OOD Micro-F1 per run, then mean ± std per method.
pub fn eval(cfg: &RunConfig) -> Result<EvalOutput> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let dir = cfg.out_dir.join("eval");
    let mut scores = Vec::new();
    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            let ck = load_checkpoint(cfg, &data, method, seed)?;
            let id = predictions(&ck, method, &data.test_id)?;
            let ood = predictions(&ck, method, &data.test_ood)?;
            let run = format!("{method}-seed{seed}");
            for (split, recs) in [("test_id", &id), ("test_ood", &ood)] {
                write_jsonl(&dir.join("predictions").join(format!("{run}-{split}.jsonl")), recs)?;
                write_csv(
                    &dir.join("per_relation").join(format!("{run}-{split}.csv")),
                    &per_relation_report(recs),
                )?;
            }
            let g = gap_report(&id, &ood, &ck.state.labels)?;
            scores.push(SeedScore {
                method: method.to_string(),
                seed,
                micro_f1_id: g.micro_f1_id,
                micro_f1_ood: g.micro_f1_ood,
            });
        }
    }
    let summary = summarize(&scores);
    let table = format_summary(&summary);
    write_csv(&dir.join("scores.csv"), &scores)?;
    write_csv(&dir.join("summary.csv"), &summary)?;
    write_string(&dir.join("summary.txt"), &table)?;
    Ok(EvalOutput { scores, summary, table })
}

#[derive(Serialize)]
struct CurveRow<'a> {
    split: &'a str,
    percent: u32,
    size: usize,
    micro_f1: f64,
}

/// Variance bins, sorted-F1 curves and occlusion attributions for every
/// configured vib run, on both test splits.
pub fn analyze(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    if let Some(m) = cfg.methods.iter().find(|m| !m.uses_vib()) {
        return Err(Error::Config(format!(
            "analyze needs vib checkpoints; method '{m}' has no variance (use --method vib)"
        )));
    }
    let data = load_data(cfg)?;
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let ck = load_checkpoint(cfg, &data, Method::Vib, seed)?;
        if !ck.state.has_vib() {
            return Err(Error::Checkpoint(format!("seed {seed}: checkpoint has no bottleneck")));
        }
        let dir = cfg.out_dir.join("analysis").join(format!("vib-seed{seed}"));
        let mut curves = Vec::new();
        let mut series = Vec::new();
        let mut attributions: Vec<AttributionResult> = Vec::new();
        for split in ["test_id", "test_ood"] {
            let examples = data.split(split);
            let recs = predictions(&ck, Method::Vib, examples)?;
            let bins = variance_bins(&recs)?;
            let path = dir.join(format!("{split}_bins.csv"));
            write_bins_csv(&path, &bins)?;
            written.push(path);
            let curve = variance_sorted_f1(&recs, &cfg.analysis.percentages, &ck.state.labels)?;
            series.push(PlotSeries {
                name: format!("{split} variance-sorted micro-F1"),
                x: curve.iter().map(|p| p.percent as f64).collect(),
                y: curve.iter().map(|p| p.micro_f1).collect(),
            });
            series.push(PlotSeries {
                name: format!("{split} variance bin proportion"),
                x: bins.iter().map(|b| b.lower).collect(),
                y: bins.iter().map(|b| b.proportion).collect(),
            });
            curves.extend(curve.into_iter().map(|p| (split, p)));
            for ex in examples.iter().take(cfg.analysis.attribution_samples) {
                let marked = ck.state.mark(ex)?;
                let gold = ck.state.labels.id(&ex.relation)?;
                attributions.push(occlusion_attribution(&ck.state, &marked, gold)?);
            }
        }
        let rows: Vec<CurveRow> = curves
            .iter()
            .map(|(split, p)| CurveRow {
                split,
                percent: p.percent,
                size: p.size,
                micro_f1: p.micro_f1,
            })
            .collect();
        for (name, result) in [
            ("sorted_f1.csv", write_csv(&dir.join("sorted_f1.csv"), &rows)),
            ("attributions.jsonl", write_jsonl(&dir.join("attributions.jsonl"), &attributions)),
            ("plot_data.json", write_plot_data(&dir.join("plot_data.json"), &series)),
        ] {
            result?;
            written.push(dir.join(name));
        }
    }
    Ok(written)
}
