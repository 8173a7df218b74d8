pub mod audio;
pub mod config;
pub mod dataset;
pub mod drc;
pub mod error;
pub mod eval;
pub mod features;
pub mod forest;
pub mod matrix_file;
pub mod model;
pub mod pairs;
pub mod pipeline;
pub mod preprocess;
pub mod spectrogram;
pub mod train;
pub mod wav;

pub use audio::{synthesize_loop, AudioClip, LoopKind, LoopRecipe};
pub use config::{ExperimentConfig, FeatureSource};
pub use dataset::{build_grid, materialize, Dataset, DatasetManifest, Family, GridSpec};
pub use drc::{compress, DrcParams, Param};
pub use error::{Error, Result};
pub use eval::{evaluate, EvalConfig, EvalReport, SplitBy};
pub use features::baseline_features;
pub use forest::{Forest, ForestConfig, MultiForest};
pub use model::{ModelSpec, SiameseModel, Variant};
pub use pipeline::{Pipeline, Table, TableAxis};
pub use preprocess::{PreprocessConfig, Representation};
pub use spectrogram::{mel_spectrogram, stft_magnitude, Spectrogram, SpectrogramScale};
pub use wav::{read_wav, write_wav, WavEncoding};
