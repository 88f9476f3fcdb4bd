//! Synthetic motion corpus, file formats, normalization, and metrics.

mod corpus;
mod format;
mod metrics;
mod synth;

pub use corpus::{Centroids, Corpus, CorpusEntry, CorpusManifest, CorpusSpec, NormStats};
pub use format::{load_motion, load_signal, save_motion, save_signal};
pub use metrics::{centroid_accuracy, diversity, flatten, trajectory_error};
pub use synth::{gen_synthetic, make_signal, ControlSignal, MaskPattern, MotionSequence, Vocab};

/// Joint order is part of the wire format.
pub const JOINTS: [&str; 5] = ["root", "l_hand", "r_hand", "l_foot", "r_foot"];
pub const NUM_JOINTS: usize = JOINTS.len();
pub const DEFAULT_FPS: u32 = 20;
pub const DEFAULT_FRAMES: usize = 64;
/// Frames per latent token.
pub const PATCH: usize = 8;
/// Coordinates per frame.
pub const FRAME_DIM: usize = NUM_JOINTS * 3;
