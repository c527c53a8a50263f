//! On-disk corpus: `manifest.tsv` plus one little-endian binary file per video.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::motion::MotionClass;
use super::video::{generate_video, SyntheticVideo};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const VIDEO_MAGIC: &[u8; 8] = b"MSCLVID1";
pub const HEADER_LEN: usize = 32;
pub const MANIFEST_NAME: &str = "manifest.tsv";
const MANIFEST_HEADER: &str = "path\tlabel\tframes\theight\twidth\tstride\tchecksum";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug)]
pub struct CorpusConfig {
    pub classes: Vec<MotionClass>,
    pub per_class: usize,
    pub train_fraction: f64,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            classes: super::motion::default_classes(4),
            per_class: 50,
            train_fraction: 0.8,
            frames: 24,
            height: 32,
            width: 32,
            stride: 1,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    /// Videos per class that go to the training split.
    pub fn train_per_class(&self) -> usize {
        (self.per_class as f64 * self.train_fraction).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::invalid("corpus needs at least one class"));
        }
        if !(0.0..=1.0).contains(&self.train_fraction) {
            return Err(Error::invalid(format!(
                "train fraction must lie in [0, 1], got {}",
                self.train_fraction
            )));
        }
        if self.frames < 2 {
            return Err(Error::invalid(format!(
                "videos need at least 2 frames, got {}",
                self.frames
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the corpus root; the first component names the split.
    pub path: String,
    pub label: u32,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub checksum: String,
}

impl ManifestEntry {
    pub fn split(&self) -> Option<Split> {
        match self.path.split('/').next() {
            Some("train") => Some(Split::Train),
            Some("test") => Some(Split::Test),
            _ => None,
        }
    }
}

pub fn encode_video(video: &SyntheticVideo) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * (video.frames.len() + video.flows.len()));
    out.extend_from_slice(VIDEO_MAGIC);
    for v in [
        video.num_frames,
        video.height,
        video.width,
        video.label as usize,
        video.stride,
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.resize(HEADER_LEN, 0);
    for v in video.frames.iter().chain(&video.flows) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_video(bytes: &[u8], path: &Path) -> Result<SyntheticVideo> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != VIDEO_MAGIC {
        return Err(Error::format(path, "missing MSCLVID1 header"));
    }
    let field = |i: usize| {
        let o = 8 + 4 * i;
        u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize
    };
    let (f, h, w, label, stride) = (field(0), field(1), field(2), field(3), field(4));
    let n_frames = f * h * w * 3;
    let n_flows = f * h * w * 2;
    if bytes.len() != HEADER_LEN + 4 * (n_frames + n_flows) {
        return Err(Error::format(
            path,
            format!(
                "expected {} bytes for {}×{}×{} video, found {}",
                HEADER_LEN + 4 * (n_frames + n_flows),
                f,
                h,
                w,
                bytes.len()
            ),
        ));
    }
    let floats: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let (frames, flows) = floats.split_at(n_frames);
    Ok(SyntheticVideo {
        num_frames: f,
        height: h,
        width: w,
        stride,
        label: label as u32,
        seed: 0,
        frames: frames.to_vec(),
        flows: flows.to_vec(),
        centers: None,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Renders every video and writes the corpus under `root`.
pub fn generate_corpus(config: &CorpusConfig, root: &Path) -> Result<Corpus> {
    config.validate()?;
    for split in [Split::Train, Split::Test] {
        let dir = root.join(split.dir());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let n_train = config.train_per_class();
    let mut entries = Vec::new();
    for class in &config.classes {
        for j in 0..config.per_class {
            let split = if j < n_train { Split::Train } else { Split::Test };
            let seed = derive_seed(config.seed, &[class.id as u64, j as u64]);
            let video = generate_video(
                class,
                config.frames,
                config.height,
                config.width,
                config.stride,
                seed,
            )?;
            let rel = format!("{}/c{}_{:04}.bin", split.dir(), class.id, j);
            let bytes = encode_video(&video);
            let path = root.join(&rel);
            fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
            entries.push(ManifestEntry {
                path: rel,
                label: class.id,
                frames: config.frames,
                height: config.height,
                width: config.width,
                stride: config.stride,
                checksum: sha256_hex(&bytes),
            });
        }
    }
    let corpus = Corpus {
        root: root.to_path_buf(),
        entries,
    };
    corpus.write_manifest()?;
    Ok(corpus)
}

#[derive(Clone, Debug)]
pub struct Corpus {
    root: PathBuf,
    entries: Vec<ManifestEntry>,
}

impl Corpus {
    pub fn open(root: &Path) -> Result<Corpus> {
        let path = root.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h == MANIFEST_HEADER => {}
            _ => return Err(Error::format(&path, "unexpected manifest header")),
        }
        let mut entries = Vec::new();
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 7 {
                return Err(Error::format(
                    &path,
                    format!("line {}: expected 7 columns, found {}", i + 2, cols.len()),
                ));
            }
            let num = |s: &str| {
                s.parse::<usize>().map_err(|_| {
                    Error::format(&path, format!("line {}: '{}' is not a number", i + 2, s))
                })
            };
            entries.push(ManifestEntry {
                path: cols[0].to_string(),
                label: num(cols[1])? as u32,
                frames: num(cols[2])?,
                height: num(cols[3])?,
                width: num(cols[4])?,
                stride: num(cols[5])?,
                checksum: cols[6].to_string(),
            });
        }
        Ok(Corpus {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn split_entries(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries
            .iter()
            .filter(move |e| e.split() == Some(split))
    }

    pub fn num_classes(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.label as usize + 1)
            .max()
            .unwrap_or(0)
    }

    fn write_manifest(&self) -> Result<()> {
        let mut text = String::from(MANIFEST_HEADER);
        text.push('\n');
        for e in &self.entries {
            text.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.path, e.label, e.frames, e.height, e.width, e.stride, e.checksum
            ));
        }
        let path = self.root.join(MANIFEST_NAME);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// SHA-256 of the manifest, which pins every video's checksum.
    pub fn checksum(&self) -> Result<String> {
        let path = self.root.join(MANIFEST_NAME);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(sha256_hex(&bytes))
    }

    pub fn load(&self, entry: &ManifestEntry) -> Result<SyntheticVideo> {
        let path = self.root.join(&entry.path);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if sha256_hex(&bytes) != entry.checksum {
            return Err(Error::format(&path, "checksum does not match manifest"));
        }
        let video = decode_video(&bytes, &path)?;
        if video.label != entry.label
            || video.num_frames != entry.frames
            || video.height != entry.height
            || video.width != entry.width
            || video.stride != entry.stride
        {
            return Err(Error::format(&path, "header disagrees with manifest"));
        }
        Ok(video)
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<SyntheticVideo>> {
        self.split_entries(split).map(|e| self.load(e)).collect()
    }
}
