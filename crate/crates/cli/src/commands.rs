use std::fmt::Write as _;
use std::fs;

use anyhow::{bail, Context, Result};
use log::info;

use mscl::encoders::{Checkpoint, DualEncoder};
use mscl::flow_ops::{clip_max_magnitude, default_block_size, flow_to_rgb, rotate_flow, write_ppm, RotationAngle};
use mscl::gradcheck::check_losses;
use mscl::motion_sampling::{self, mds_select};
use mscl::synth::{generate_corpus, sha256_hex, Corpus, CorpusConfig, Split};
use mscl::training::{
    embed_videos, encoder_from_checkpoint, initial_encoder, linear_probe, pretrain_with, recall_at_k,
    LabeledFeatures, MetricsLog, ProbeConfig, TrainConfig,
};

use crate::{
    plot::render_svg, ConfigArgs, EvalArgs, GenDataArgs, GradcheckArgs, PlotArgs, PretrainArgs, RetrieveArgs,
    ScoreClipsArgs, VisualizeArgs,
};

/// Marks failures that must exit with the numerical status code.
#[derive(Debug)]
pub struct NumericalFailure(pub String);

impl std::fmt::Display for NumericalFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericalFailure {}

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.txt";

fn version() -> String {
    format!("v{}", env!("CARGO_PKG_VERSION"))
}

/// Defaults, then the ablation preset, then the file, then explicit flags.
pub fn resolve_config(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut c = match &args.row {
        Some(r) => TrainConfig::ablation_row(r)?,
        None => TrainConfig::default(),
    };
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        c.apply_text(&text)
            .with_context(|| format!("in {}", path.display()))?;
    }
    if let Some(v) = args.seed {
        c.seed = v;
    }
    if let Some(v) = args.epochs {
        c.epochs = v;
    }
    if let Some(v) = args.max_steps {
        c.max_steps = v;
    }
    if let Some(v) = args.lambda {
        c.lambda = v;
    }
    if let Some(v) = args.batch_size {
        c.batch_size = v;
    }
    for kv in &args.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got '{}'", kv))?;
        c.set(k, v)?;
    }
    c.validate()?;
    Ok(c)
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    if a.out.exists() && fs::read_dir(&a.out)?.next().is_some() {
        if !a.force {
            bail!("{} is not empty; pass --force to replace the corpus", a.out.display());
        }
        for split in [Split::Train, Split::Test] {
            let dir = a.out.join(split.dir());
            if dir.exists() {
                fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
            }
        }
    }
    let config = CorpusConfig {
        classes: mscl::synth::default_classes(a.classes),
        per_class: a.per_class,
        frames: a.frames,
        height: a.size,
        width: a.size,
        stride: a.stride,
        seed: a.seed,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&config, &a.out)?;
    let train = corpus.split_entries(Split::Train).count();
    let test = corpus.split_entries(Split::Test).count();
    println!(
        "wrote {} videos ({} train, {} test) of {} classes to {}",
        corpus.entries().len(),
        train,
        test,
        corpus.num_classes(),
        a.out.display()
    );
    println!("checksum\t{}", corpus.checksum()?);
    Ok(())
}

pub fn score_clips(a: ScoreClipsArgs) -> Result<()> {
    let corpus = Corpus::open(&a.corpus)?;
    let mut out = String::from("path\tstart\tscore\tselected\n");
    let mut rows = 0;
    for entry in corpus.entries() {
        let video = corpus.load(entry)?;
        let stride = a.stride.unwrap_or(video.stride);
        if stride != video.stride {
            bail!(
                "{} stores flow at stride {}, requested {}",
                entry.path,
                video.stride,
                stride
            );
        }
        let scores = motion_sampling::score_clips(&video.flow_fields(), a.clip_len, stride, default_block_size(video.height))?;
        let selected = mds_select(&scores);
        for s in &scores {
            let _ = writeln!(
                out,
                "{}\t{}\t{:e}\t{}",
                entry.path,
                s.start,
                s.score,
                selected.contains(&s.start) as u8
            );
            rows += 1;
        }
    }
    fs::write(&a.out, out).with_context(|| format!("writing {}", a.out.display()))?;
    println!("scored {} windows over {} videos", rows, corpus.entries().len());
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let config = resolve_config(&a.config)?;
    let corpus = Corpus::open(&a.corpus)?;
    let videos = corpus.load_split(Split::Train)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    info!("pre-training on {} videos", videos.len());
    let outcome = pretrain_with(&config, &videos, |r| {
        if r.step % 10 == 0 {
            info!("step {:>5}  lr {:.5}  total {:.4}", r.step, r.lr, r.total);
        }
    })?;
    let ckpt_bytes = outcome.checkpoint().to_bytes();
    let metrics = outcome.log.to_tsv();
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    let metrics_path = a.out.join(METRICS_FILE);
    fs::write(&ckpt_path, &ckpt_bytes).with_context(|| format!("writing {}", ckpt_path.display()))?;
    fs::write(&metrics_path, &metrics).with_context(|| format!("writing {}", metrics_path.display()))?;

    // Provenance lines are comments, so the manifest doubles as a config file.
    let mut manifest = String::new();
    let _ = writeln!(manifest, "# version {}", version());
    let _ = writeln!(manifest, "# corpus {}", a.corpus.display());
    let _ = writeln!(manifest, "# corpus_checksum {}", corpus.checksum()?);
    let _ = writeln!(manifest, "# artifact {} {}", CHECKPOINT_FILE, sha256_hex(&ckpt_bytes));
    let _ = writeln!(manifest, "# artifact {} {}", METRICS_FILE, sha256_hex(metrics.as_bytes()));
    manifest.push_str(&config.to_text());
    let manifest_path = a.out.join(RUN_MANIFEST_FILE);
    fs::write(&manifest_path, manifest).with_context(|| format!("writing {}", manifest_path.display()))?;

    let records = outcome.log.records();
    if let (Some(first), Some(last)) = (records.first(), records.last()) {
        println!(
            "{} steps, total loss {:.4} -> {:.4}",
            records.len(),
            first.total,
            last.total
        );
    }
    let secs: f64 = outcome.log.step_seconds.iter().sum();
    info!("{:.1} s of training", secs);
    println!("wrote {}", a.out.display());
    Ok(())
}

struct Frozen {
    encoder: DualEncoder,
    config: TrainConfig,
    train: LabeledFeatures,
    test: LabeledFeatures,
    classes: usize,
}

fn frozen_features(a: &EvalArgs) -> Result<Frozen> {
    let (config, encoder) = match &a.checkpoint {
        Some(path) => encoder_from_checkpoint(&Checkpoint::load(path)?, "query")?,
        None => {
            let c = resolve_config(&a.config)?;
            let e = initial_encoder(&c)?;
            (c, e)
        }
    };
    let corpus = Corpus::open(&a.corpus)?;
    let before = encoder.params.fingerprint();
    let train = embed_videos(&encoder, &corpus.load_split(Split::Train)?, config.clip_len, config.stride)?;
    let test = embed_videos(&encoder, &corpus.load_split(Split::Test)?, config.clip_len, config.stride)?;
    if encoder.params.fingerprint() != before {
        bail!("encoder parameters changed during feature extraction");
    }
    Ok(Frozen {
        encoder,
        config,
        train,
        test,
        classes: corpus.num_classes(),
    })
}

pub fn probe(a: EvalArgs) -> Result<()> {
    let f = frozen_features(&a)?;
    let before = f.encoder.params.fingerprint();
    let probe_config = ProbeConfig {
        epochs: a.probe_epochs,
        seed: f.config.seed,
        ..ProbeConfig::default()
    };
    let r = linear_probe(&f.train, &f.test, f.classes, probe_config)?;
    println!("train_top1\t{:.4}", r.train_accuracy);
    println!("test_top1\t{:.4}", r.test_accuracy);
    println!("encoder_fingerprint\t{:016x}\t{}", before, if before == f.encoder.params.fingerprint() { "unchanged" } else { "CHANGED" });
    Ok(())
}

pub fn retrieve(a: RetrieveArgs) -> Result<()> {
    let f = frozen_features(&a.eval)?;
    let recalls = recall_at_k(&f.train, &f.test, &a.k)?;
    let mut table = String::from("k\trecall\n");
    for (k, r) in &recalls {
        let _ = writeln!(table, "{}\t{:.4}", k, r);
    }
    print!("{}", table);
    if let Some(out) = &a.out {
        fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut failed = Vec::new();
    for (name, report) in check_losses(a.seed)? {
        let worst = report.max_rel_err();
        let ok = report.passes(a.tolerance);
        println!(
            "{:<15} {:>4} probes  max rel err {:.3e}  {}",
            name,
            report.probes.len(),
            worst,
            if ok { "ok" } else { "FAIL" }
        );
        if !ok {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        return Err(NumericalFailure(format!(
            "gradient check failed for {} at tolerance {:e}",
            failed.join(", "),
            a.tolerance
        ))
        .into());
    }
    Ok(())
}

pub fn plot(a: PlotArgs) -> Result<()> {
    let log = MetricsLog::load(&a.metrics)?;
    let svg = render_svg(&log)?;
    fs::write(&a.out, svg).with_context(|| format!("writing {}", a.out.display()))?;
    println!("plotted {} steps to {}", log.records().len(), a.out.display());
    Ok(())
}

pub fn visualize(a: VisualizeArgs) -> Result<()> {
    let corpus = Corpus::open(&a.corpus)?;
    let entry = corpus
        .entries()
        .get(a.video)
        .with_context(|| format!("corpus has {} videos, no index {}", corpus.entries().len(), a.video))?;
    let video = corpus.load(entry)?;
    if a.frame >= video.num_frames {
        bail!("video has {} frames, no frame {}", video.num_frames, a.frame);
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (h, w) = (video.height, video.width);
    let rgb: Vec<f64> = video.frame(a.frame).iter().map(|&v| v as f64).collect();
    write_ppm(&a.out.join("frame.ppm"), h, w, &rgb)?;
    let flows = video.flow_fields();
    let radius = clip_max_magnitude(&flows).max(f64::MIN_POSITIVE);
    let flow = &flows[a.frame];
    write_ppm(&a.out.join("flow.ppm"), h, w, &flow_to_rgb(flow, radius)?)?;
    if let Some(theta) = a.rotate {
        let rotated = rotate_flow(flow, RotationAngle::new(theta));
        write_ppm(&a.out.join("flow_rotated.ppm"), h, w, &flow_to_rgb(&rotated, radius)?)?;
    }
    println!("wrote images for {} frame {} to {}", entry.path, a.frame, a.out.display());
    Ok(())
}
