//! Preprocessing and loading: every modality onto the video frame grid,
//! then fixed-length windows, augmentation and batching.

pub mod align;
pub mod audio;
pub mod augment;
pub mod batch;
pub mod formats;
pub mod record;
pub mod windows;

pub use align::{align_words_to_frames, fit_length, word_spans, WordSpan};
pub use audio::{extract_logmel, hop_samples, read_wav, read_wav_file};
pub use augment::{augment_and_normalize, normalize_linguistic, CropParams, FeatureStats};
pub use batch::{assemble_batch, enumerate_windows, BatchSpec, Normalizer, WindowBatch, WindowRef};
pub use formats::{
    decode_linguistic, encode_linguistic, parse_annotations, parse_manifest, parse_words, read_manifest, Annotations,
    FeatureMatrix, ManifestEntry, Split, TrialPaths, WordTiming,
};
pub use record::{preprocess_trial, record_path, TrialRecord};
pub use windows::{make_windows, stitch_predictions, Window};
