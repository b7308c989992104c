//! Segmentation of a record stream into overlapping labeled windows, the
//! leakage-free train/validation/test split and train-only normalization.

use super::record::{Gear, Record};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const WINDOW: usize = 50;
pub const STEP: usize = 25;
pub const CHANNELS: usize = 3;

/// A `[window, 3]` slice of the stream starting at record position `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub start: usize,
    pub samples: Tensor,
    pub label: usize,
}

impl Window {
    pub fn len(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Half-open range of record positions covered.
    pub fn span(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len()
    }
}

/// Number of candidate windows for a stream of `n` records.
pub fn window_count(n: usize, window: usize, step: usize) -> usize {
    if n < window {
        0
    } else {
        (n - window) / step + 1
    }
}

/// Windows at offsets `0, step, 2·step, …`. Each is labeled by its majority
/// gear; windows split exactly evenly between gears are dropped.
pub fn segment(records: &[Record], window: usize, step: usize) -> Result<Vec<Window>> {
    if window == 0 || step == 0 || step > window {
        return Err(Error::invalid(format!(
            "segment needs window >= 1 and 1 <= step <= window, got window {window}, step {step}"
        )));
    }
    let count = window_count(records.len(), window, step);
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let start = k * step;
        let slice = &records[start..start + window];
        let threes = slice.iter().filter(|r| r.gear == Gear::Three).count();
        let twos = window - threes;
        let label = match twos.cmp(&threes) {
            std::cmp::Ordering::Greater => Gear::Two.class_index(),
            std::cmp::Ordering::Less => Gear::Three.class_index(),
            std::cmp::Ordering::Equal => continue,
        };
        let data = slice.iter().flat_map(|r| r.channels()).collect();
        out.push(Window {
            start,
            samples: Tensor::new(vec![window, CHANNELS], data)?,
            label,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.70,
            validation: 0.15,
            test: 0.15,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|&r| r.is_nan() || r <= 0.0) {
            return Err(Error::invalid(format!("split ratios must all be positive, got {parts:?}")));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("split ratios must sum to 1, got {parts:?}")));
        }
        Ok(())
    }
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl NormStats {
    /// Population statistics over every timestep of every window.
    pub fn compute(windows: &[Window]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::invalid("cannot compute statistics of an empty set"))?;
        let channels = first.samples.shape()[1];
        let mut sum = vec![0.0; channels];
        let mut count = 0usize;
        for w in windows {
            for row in w.samples.data().chunks_exact(channels) {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut sq = vec![0.0; channels];
        for w in windows {
            for row in w.samples.data().chunks_exact(channels) {
                for ((s, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
        }
        let std = sq.iter().map(|s| (s / count as f64).sqrt().max(STD_FLOOR)).collect();
        Ok(NormStats { mean, std })
    }

    pub fn apply(&self, window: &Window) -> Result<Window> {
        let channels = self.mean.len();
        if window.samples.shape()[1] != channels {
            return Err(Error::shape(
                "normalize",
                window.samples.shape(),
                &[window.samples.shape()[0], channels],
            ));
        }
        let mut samples = window.samples.clone();
        for row in samples.data_mut().chunks_exact_mut(channels) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(Window {
            start: window.start,
            samples,
            label: window.label,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowedDataset {
    pub train: Vec<Window>,
    pub validation: Vec<Window>,
    pub test: Vec<Window>,
    /// Set by [`normalize`]; computed from `train` only.
    pub stats: Option<NormStats>,
}

impl WindowedDataset {
    pub fn counts(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }
}

/// Contiguous split in source order. Leading windows of the validation and
/// test blocks that share samples with the previous block are dropped.
pub fn split(windows: Vec<Window>, ratios: SplitRatios) -> Result<WindowedDataset> {
    ratios.validate()?;
    let n = windows.len();
    let n_train = ((n as f64 * ratios.train).round() as usize).min(n);
    let n_val = ((n as f64 * ratios.validation).round() as usize).min(n - n_train);
    let mut train = windows;
    let mut validation = train.split_off(n_train);
    let mut test = validation.split_off(n_val);

    let drop_overlap = |block: &mut Vec<Window>, prev_end: Option<usize>| {
        if let Some(end) = prev_end {
            let keep = block.iter().position(|w| w.start >= end).unwrap_or(block.len());
            block.drain(..keep);
        }
    };
    let train_end = train.iter().map(|w| w.span().end).max();
    drop_overlap(&mut validation, train_end);
    let val_end = validation.iter().map(|w| w.span().end).max().or(train_end);
    drop_overlap(&mut test, val_end);

    for (name, part) in [("train", &train), ("validation", &validation), ("test", &test)] {
        if part.is_empty() {
            return Err(Error::invalid(format!(
                "{name} partition is empty ({n} windows at ratios {:?})",
                [ratios.train, ratios.validation, ratios.test]
            )));
        }
    }
    Ok(WindowedDataset {
        train,
        validation,
        test,
        stats: None,
    })
}

/// Z-scores every partition with statistics computed on `train`.
pub fn normalize(ds: WindowedDataset) -> Result<WindowedDataset> {
    let stats = NormStats::compute(&ds.train)?;
    let apply = |ws: Vec<Window>| ws.iter().map(|w| stats.apply(w)).collect::<Result<Vec<_>>>();
    Ok(WindowedDataset {
        train: apply(ds.train)?,
        validation: apply(ds.validation)?,
        test: apply(ds.test)?,
        stats: Some(stats),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn stream(gears: &[Gear]) -> Vec<Record> {
        gears
            .iter()
            .enumerate()
            .map(|(i, &gear)| Record {
                t: i as u64,
                ax: i as f64,
                ay: -(i as f64),
                az: 0.5,
                gear,
            })
            .collect()
    }

    fn uniform(n: usize, gear: Gear) -> Vec<Record> {
        stream(&vec![gear; n])
    }

    #[test]
    fn hundred_records_three_windows() {
        let w = segment(&uniform(100, Gear::Two), 50, 25).unwrap();
        assert_eq!(w.iter().map(|w| w.start).collect::<Vec<_>>(), vec![0, 25, 50]);
        assert_eq!(w[1].samples.data()[0], 25.0);
    }

    #[test]
    fn short_stream_no_windows() {
        assert!(segment(&uniform(49, Gear::Two), 50, 25).unwrap().is_empty());
        assert!(segment(&[], 50, 25).unwrap().is_empty());
    }

    #[test]
    fn large_stream_count() {
        assert_eq!(window_count(416_737, 50, 25), 16_668);
    }

    #[test]
    fn majority_and_tie_rules() {
        let mut gears = vec![Gear::Two; 30];
        gears.extend(vec![Gear::Three; 20]);
        let w = segment(&stream(&gears), 50, 25).unwrap();
        assert_eq!(w[0].label, 0);

        let mut gears = vec![Gear::Two; 25];
        gears.extend(vec![Gear::Three; 25]);
        assert!(segment(&stream(&gears), 50, 25).unwrap().is_empty());
    }

    #[test]
    fn bad_segment_parameters() {
        assert!(segment(&uniform(10, Gear::Two), 0, 1).is_err());
        assert!(segment(&uniform(10, Gear::Two), 5, 6).is_err());
        assert!(segment(&uniform(10, Gear::Two), 5, 0).is_err());
    }

    #[test]
    fn split_proportions_and_boundary_drop() {
        let windows = segment(&uniform(25 * 99 + 50, Gear::Two), 50, 25).unwrap();
        assert_eq!(windows.len(), 100);
        let ds = split(windows, SplitRatios::default()).unwrap();
        // 70/15/15 before dropping one overlapping window at each boundary
        assert_eq!(ds.counts(), [70, 14, 14]);
    }

    #[test]
    fn split_without_overlap_keeps_everything() {
        let windows = segment(&uniform(50 * 100, Gear::Two), 50, 50).unwrap();
        let ds = split(windows, SplitRatios::default()).unwrap();
        assert_eq!(ds.counts(), [70, 15, 15]);
    }

    #[test]
    fn degenerate_ratios_rejected() {
        let windows = segment(&uniform(1000, Gear::Two), 50, 25).unwrap();
        let r = SplitRatios { train: 1.0, validation: 0.0, test: 0.0 };
        assert!(split(windows.clone(), r).is_err());
        let r = SplitRatios { train: 0.5, validation: 0.2, test: 0.2 };
        assert!(split(windows, r).is_err());
        let tiny = segment(&uniform(75, Gear::Two), 50, 25).unwrap();
        assert!(split(tiny, SplitRatios::default()).is_err());
    }

    #[test]
    fn normalization_cases() {
        let mk = |start: usize, vals: Vec<f64>| Window {
            start,
            samples: Tensor::new(vec![vals.len() / 3, 3], vals).unwrap(),
            label: 0,
        };
        // channel 0 = {1, 5}: mean 3, std 2; channel 2 constant
        let train = vec![mk(0, vec![1.0, 0.0, 4.0]), mk(10, vec![5.0, 2.0, 4.0])];
        let ds = WindowedDataset {
            train: train.clone(),
            validation: vec![mk(20, vec![5.0, 1.0, 4.0])],
            test: vec![mk(30, vec![3.0, 1.0, 9.0])],
            stats: None,
        };
        let n = normalize(ds).unwrap();
        let stats = n.stats.as_ref().unwrap();
        assert_eq!(stats.mean, vec![3.0, 1.0, 4.0]);
        assert_eq!(stats.std[0], 2.0);
        assert_eq!(stats.std[2], STD_FLOOR);
        assert_eq!(n.validation[0].samples.data()[0], 1.0);
        assert_eq!(n.train[0].samples.data()[2], 0.0);
        // stats untouched by the other partitions
        assert_eq!(NormStats::compute(&train).unwrap(), *stats);
    }

    proptest! {
        #[test]
        fn consecutive_windows_share_step_samples(n in 50usize..400) {
            let w = segment(&uniform(n, Gear::Three), 50, 25).unwrap();
            for pair in w.windows(2) {
                let shared = pair[0].span().end.saturating_sub(pair[1].span().start);
                prop_assert_eq!(shared, 25);
                prop_assert_eq!(&pair[0].samples.data()[75..], &pair[1].samples.data()[..75]);
            }
            prop_assert!(w.iter().all(|w| w.label == 1));
        }
    }
}
