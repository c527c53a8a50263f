//! Synthetic moving-shape videos with exact forward optical flow.

mod clips;
mod corpus;
mod motion;
mod video;

pub use clips::{
    extract_clip, sample_clip_pair, sample_clip_pair_from, valid_starts, Clip, ClipSelector,
};
pub use corpus::{
    decode_video, encode_video, generate_corpus, sha256_hex, Corpus, CorpusConfig, ManifestEntry,
    Split, HEADER_LEN, MANIFEST_NAME, VIDEO_MAGIC,
};
pub use motion::{default_classes, linear_direction_classes, MotionClass, MotionProgram};
pub use video::{generate_video, SyntheticVideo};
