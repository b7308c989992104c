//! Accelerometer records, windowing and the synthetic stand-in dataset.

pub mod record;
pub mod synth;
pub mod window;

pub use record::{load_csv, read_csv, save_csv, write_csv, Gear, Record, CSV_HEADER};
pub use synth::{synth_generate, SynthSpec};
pub use window::{
    normalize, segment, split, window_count, NormStats, SplitRatios, Window, WindowedDataset, CHANNELS, STEP, WINDOW,
};
