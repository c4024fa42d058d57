use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, NaiveDate, Utc};
use clap::{Args, Parser, Subcommand};
use printfix_core::corpus::{DateRange, ImageManifest, Store};
use printfix_core::curator::{self, KnowledgeBase, SolutionQuery};
use printfix_core::dataset::{
    self, build_feature_dictionary, Dataset, FeatureDictionary, ForgeConfig, Split, ValidationAction,
    ValidationRecord,
};
use printfix_core::diagnosis::{self, synth, DiagnosisEngine, ModelBundle, TrainConfig};
use printfix_core::labeler::{self, LabelerFile};
use printfix_service::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "printfix", version, about = "Diagnose 3D-printing failures from photos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest a line-delimited thread dump into a store directory.
    Ingest { dump: PathBuf, store: PathBuf },
    /// Corpus statistics for a store directory, or label counts for a dataset manifest.
    Stats {
        path: PathBuf,
        /// Inclusive start date (YYYY-MM-DD or RFC 3339).
        #[arg(long)]
        from: Option<String>,
        /// Exclusive end date.
        #[arg(long)]
        to: Option<String>,
    },
    /// Download or copy every referenced image and write `<dir>/manifest.json`.
    ExportImages { store: PathBuf, dir: PathBuf },
    /// Assign failure types to posts.
    Label {
        store: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Build a labeled image dataset from post labels.
    Forge {
        store: PathBuf,
        labels: PathBuf,
        /// Image manifest written by `export-images`.
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Covered failure types; defaults to every type assigned in the labels.
        #[arg(long, value_delimiter = ',')]
        types: Vec<String>,
        #[arg(long)]
        salt: Option<String>,
        #[arg(long)]
        max_negatives: Option<usize>,
    },
    /// Apply expert validation records to a dataset.
    ApplyLedger {
        manifest: PathBuf,
        ledger: PathBuf,
        /// Output manifest; defaults to overwriting the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Review unadjudicated images interactively, appending to the ledger.
    Validate {
        manifest: PathBuf,
        #[arg(long)]
        review: bool,
        #[arg(long)]
        ledger: PathBuf,
        #[arg(long, env = "USER", default_value = "reviewer")]
        reviewer: String,
    },
    /// Visual feature dictionary tools.
    Dict {
        #[command(subcommand)]
        command: DictCommand,
    },
    /// Train one binary classifier and export its bundle.
    Train {
        manifest: PathBuf,
        #[arg(long = "type")]
        failure_type: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a bundle on a dataset split.
    Eval {
        bundle: PathBuf,
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Diagnose one photo with every bundle in a directory.
    Diagnose {
        image: PathBuf,
        #[arg(long)]
        bundles: PathBuf,
        #[arg(long)]
        show_probabilities: bool,
        /// Write one saliency PNG per failure type here.
        #[arg(long)]
        saliency_dir: Option<PathBuf>,
    },
    /// Knowledge base tools.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic two-class image dataset.
    Synth {
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: u32,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum DictCommand {
    /// Attach dataset example images to a curated feature dictionary.
    Build {
        manifest: PathBuf,
        #[arg(long)]
        curated: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum KbCommand {
    /// Load a knowledge base directory and report every violation.
    Validate { dir: PathBuf },
    /// Rank the comments of posts labeled with a type by upvotes.
    RankComments {
        store: PathBuf,
        labels: PathBuf,
        #[arg(long = "type")]
        failure_type: String,
        #[arg(long)]
        top: Option<usize>,
        /// Write line-delimited records instead of printing.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Query solution cards.
    Query(QueryArgs),
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long, default_value = "kb")]
    kb: PathBuf,
    #[arg(long = "type")]
    failure_type: String,
    #[arg(long)]
    kind: Option<curator::SolutionKind>,
    #[arg(long = "clue", value_delimiter = ',')]
    clues: Vec<String>,
    #[arg(long = "difficulty", value_delimiter = ',')]
    difficulties: Vec<curator::Difficulty>,
    #[arg(long)]
    sort: Option<curator::DifficultySort>,
}

fn parse_date(s: &str) -> Result<DateTime<Utc>> {
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Ok(t.with_timezone(&Utc));
    }
    let d = NaiveDate::parse_from_str(s, "%Y-%m-%d").with_context(|| format!("invalid date `{s}`"))?;
    Ok(d.and_hms_opt(0, 0, 0).expect("midnight").and_utc())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Ingest { dump, store } => {
            let mut s = if store.join("threads.jsonl").exists() {
                Store::load(&store)?
            } else {
                Store::new()
            };
            let report = s.ingest_more(&dump)?;
            s.save(&store)?;
            Store::append_rejects(&store, &report.rejects)?;
            println!(
                "accepted={} rejected={} blank_lines={} total_posts={}",
                report.accepted,
                report.rejects.len(),
                report.blank_lines,
                s.len()
            );
        }
        Command::Stats { path, from, to } => stats(&path, from.as_deref(), to.as_deref())?,
        Command::ExportImages { store, dir } => {
            let s = Store::load(&store)?;
            let manifest = s.export_images(&dir)?;
            manifest.save(&dir.join("manifest.json"))?;
            println!(
                "materialized={} unavailable={}",
                manifest.materialized_count(),
                manifest.unavailable_count()
            );
        }
        Command::Label {
            store,
            config,
            out,
            threshold,
        } => {
            let mut l = LabelerFile::load(&config)?.into_labeler()?;
            if let Some(t) = threshold {
                l.set_threshold(t);
            }
            let s = Store::load(&store)?;
            let (labels, summary) = l.label_corpus(&s)?;
            fs::write(&out, labeler::write_labels(&labels)).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "labeled={} unlabeled={} skipped={}",
                summary.labeled_posts, summary.unlabeled_posts, summary.skipped_posts
            );
            for (t, n) in &summary.per_type {
                println!("  {t}: {n}");
            }
        }
        Command::Forge {
            store,
            labels,
            images,
            out,
            types,
            salt,
            max_negatives,
        } => {
            let s = Store::load(&store)?;
            let labels = labeler::read_labels(&labels)?;
            let manifest = ImageManifest::load(&images)?;
            let types = if types.is_empty() {
                labels
                    .iter()
                    .flat_map(|l| l.assigned_types.iter().cloned())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            } else {
                types
            };
            let mut cfg = ForgeConfig::new(types);
            if let Some(salt) = salt {
                cfg.salt = salt;
            }
            cfg.max_negatives = max_negatives;
            let (ds, report) = Dataset::forge(&labels, &s, &manifest, &cfg)?;
            ds.save(&out)?;
            println!(
                "images={} negatives={} negatives_dropped={} missing_images={}",
                ds.images.len(),
                report.negatives,
                report.negatives_dropped,
                report.missing_images.len()
            );
            for (t, n) in &report.positives_per_type {
                println!("  {t}: {n} positive");
            }
        }
        Command::ApplyLedger { manifest, ledger, out } => {
            let ds = Dataset::load(&manifest)?;
            let records = dataset::load_ledger(&ledger)?;
            let (updated, report) = ds.apply_validation(&records)?;
            updated.save(out.as_deref().unwrap_or(&manifest))?;
            println!(
                "accepted={} rejected={} relabeled={}",
                report.accepted.len(),
                report.rejected.len(),
                report.relabeled.len()
            );
        }
        Command::Validate {
            manifest,
            review,
            ledger,
            reviewer,
        } => {
            let ds = Dataset::load(&manifest)?;
            let records = dataset::load_ledger(&ledger)?;
            let pending = ds.unadjudicated(&records);
            if !review {
                println!("{} images awaiting review", pending.len());
                return Ok(());
            }
            review_loop(&pending, &ledger, &reviewer)?;
        }
        Command::Dict {
            command: DictCommand::Build { manifest, curated, out },
        } => {
            let ds = Dataset::load(&manifest)?;
            let curated = FeatureDictionary::load(&curated)?;
            let dict = build_feature_dictionary(&ds, curated)?;
            fs::write(&out, dict.to_toml()).with_context(|| format!("writing {}", out.display()))?;
            println!("failure_types={} features={}", dict.failure_types.len(), dict.visual_features.len());
        }
        Command::Train {
            manifest,
            failure_type,
            config,
            out,
        } => {
            let cfg = match config {
                Some(p) => TrainConfig::from_toml(&fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)?,
                None => TrainConfig::default(),
            };
            let ds = Dataset::load(&manifest)?;
            let mut bundle = diagnosis::train(&ds, &failure_type, &cfg)?;
            bundle.export(&out)?;
            for (split, m) in &bundle.metrics {
                println!("{}: {}", split.as_str(), serde_json::to_string(m)?);
            }
        }
        Command::Eval { bundle, manifest, split } => {
            let b = ModelBundle::load(&bundle)?;
            let ds = Dataset::load(&manifest)?;
            let m = diagnosis::evaluate(&b, &ds, split)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Diagnose {
            image,
            bundles,
            show_probabilities,
            saliency_dir,
        } => {
            let engine = DiagnosisEngine::load_dir(&bundles)?;
            let bytes = fs::read(&image).with_context(|| format!("reading {}", image.display()))?;
            let id = image.file_stem().map(|s| s.to_string_lossy().to_string()).unwrap_or_default();
            let result = engine.diagnose(&id, &bytes, None)?;
            if let Some(dir) = &saliency_dir {
                fs::create_dir_all(dir)?;
            }
            for e in &result.entries {
                if show_probabilities {
                    println!("{}\t{}\t{:.4}", e.failure_type_id, e.bin.label(), e.probability);
                } else {
                    println!("{}\t{}", e.failure_type_id, e.bin.label());
                }
                if let Some(dir) = &saliency_dir {
                    fs::write(dir.join(format!("{}.png", e.failure_type_id)), e.saliency.to_png())?;
                }
            }
        }
        Command::Kb { command } => kb(command)?,
        Command::Serve { config } => {
            let cfg = ServiceConfig::load(config.as_deref())?;
            let state = Arc::new(AppState::from_config(cfg)?);
            if state.engine().is_none() {
                log::warn!("no model bundles loaded; diagnosis requests will be refused");
            }
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(printfix_service::serve(state))?;
        }
        Command::Synth {
            out,
            per_class,
            size,
            seed,
        } => {
            let ds = synth::generate(&out, &synth::SynthConfig { per_class, size, seed })?;
            println!(
                "wrote {} images for type `{}` to {}",
                ds.images.len(),
                synth::SYNTH_TYPE,
                out.join("dataset.jsonl").display()
            );
        }
    }
    Ok(())
}

fn stats(path: &Path, from: Option<&str>, to: Option<&str>) -> Result<()> {
    if path.is_dir() {
        let range = DateRange {
            from: from.map(parse_date).transpose()?,
            to: to.map(parse_date).transpose()?,
        };
        let filter = (range.from.is_some() || range.to.is_some()).then_some(range);
        let s = Store::load(path)?;
        print!("{}", s.compute_stats(filter)?.to_key_values());
    } else {
        if from.is_some() || to.is_some() {
            bail!("--from/--to apply to stores, not dataset manifests");
        }
        print!("{}", Dataset::load(path)?.stats().to_table());
    }
    Ok(())
}

fn review_loop(pending: &[&dataset::LabeledImage], ledger: &Path, reviewer: &str) -> Result<()> {
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    let mut out = std::io::stdout();
    for (i, img) in pending.iter().enumerate() {
        let positives: Vec<&str> = img.positives().collect();
        writeln!(out, "[{}/{}] {} {}", i + 1, pending.len(), img.image_id, img.path.display())?;
        writeln!(out, "  positive for: {}", if positives.is_empty() { "(none)".into() } else { positives.join(", ") })?;
        let action = loop {
            write!(out, "  (a)ccept, (r)eject, (l)abel t1,t2, (s)kip, (q)uit: ")?;
            out.flush()?;
            let Some(line) = lines.next() else { return Ok(()) };
            let line = line?;
            let line = line.trim();
            match line.split_once(' ').map(|(c, rest)| (c, rest.trim())).unwrap_or((line, "")) {
                ("a", _) => break Some(ValidationAction::Accept),
                ("r", _) => break Some(ValidationAction::Reject),
                ("l", rest) if !rest.is_empty() => {
                    let types = rest.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect();
                    break Some(ValidationAction::Relabel { types });
                }
                ("s", _) => break None,
                ("q", _) => return Ok(()),
                _ => writeln!(out, "  unrecognized input")?,
            }
        };
        if let Some(action) = action {
            dataset::append_ledger(
                ledger,
                &ValidationRecord {
                    image_id: img.image_id.clone(),
                    reviewer_id: reviewer.to_string(),
                    action,
                    timestamp: Utc::now(),
                    note: String::new(),
                },
            )?;
        }
    }
    Ok(())
}

fn kb(command: KbCommand) -> Result<()> {
    match command {
        KbCommand::Validate { dir } => match KnowledgeBase::load(&dir) {
            Ok(kb) => println!(
                "ok: {} failure types, {} cards, {} clues, {} glossary terms",
                kb.dictionary().failure_types.len(),
                kb.cards().len(),
                kb.clues().len(),
                kb.glossary().len()
            ),
            Err(curator::CuratorError::Violations(vs)) => {
                for v in &vs {
                    eprintln!("{v}");
                }
                bail!("{} violations", vs.len());
            }
            Err(e) => return Err(e.into()),
        },
        KbCommand::RankComments {
            store,
            labels,
            failure_type,
            top,
            out,
        } => {
            let s = Store::load(&store)?;
            let labels = labeler::read_labels(&labels)?;
            let mut ranked = curator::rank_comments(&labels, &s, &failure_type)?;
            if let Some(n) = top {
                ranked.truncate(n);
            }
            match out {
                Some(path) => {
                    curator::write_ranked(&ranked, &path)?;
                    println!("wrote {} comments", ranked.len());
                }
                None => {
                    for c in &ranked {
                        let body: String = c.body.chars().take(100).collect();
                        println!("{}\t{}\t{}\t{}", c.upvotes, c.post_id, c.comment_id, body.replace('\n', " "));
                    }
                }
            }
        }
        KbCommand::Query(q) => {
            let kb = KnowledgeBase::load(&q.kb)?;
            let query = SolutionQuery {
                kind: q.kind,
                clue_ids: q.clues,
                difficulties: q.difficulties,
                sort: q.sort,
            };
            let cards = kb.query_solutions(&q.failure_type, &query)?;
            println!("{}", serde_json::to_string_pretty(&cards)?);
        }
    }
    Ok(())
}
