//! Post-stitching statistics correction: rescale compressed layer outputs so
//! their per-channel mean and standard deviation track the dense model's.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::scalar::{cst, Scalar};

const STD_EPS: f64 = 1e-6;

/// Mean and (population) standard deviation of one channel.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ChannelMoments<T> {
    pub mean: T,
    pub std: T,
}

/// Per-channel statistics, std clamped to eps. Serializes as
/// `{"channels": [{"mean": .., "std": ..}, ..]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelStats<T> {
    pub channels: Vec<ChannelMoments<T>>,
}

impl<T: Scalar> ChannelStats<T> {
    pub fn from_moments(mean: Vec<T>, std: Vec<T>) -> Self {
        assert_eq!(mean.len(), std.len());
        ChannelStats {
            channels: mean
                .into_iter()
                .zip(std)
                .map(|(mean, std)| ChannelMoments { mean, std })
                .collect(),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels.len()
    }

    pub fn mean(&self, c: usize) -> T {
        self.channels[c].mean
    }

    pub fn std(&self, c: usize) -> T {
        self.channels[c].std
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self>
    where
        T: serde::de::DeserializeOwned,
    {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()>
    where
        T: Serialize,
    {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("stats serialize");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Which arrangement of the mean terms the correction uses.
///
/// The default form applies `(sd/sc) * (x - mc + md)`, which leaves the
/// corrected mean at `(sd/sc) * md`; the textbook form
/// `(sd/sc) * (x - mc) + md` restores the mean exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CorrectionForm {
    #[default]
    ScaledShift,
    Textbook,
}

/// Per-channel sample mean and population standard deviation of
/// channels x samples outputs. Needs at least two samples.
pub fn collect_stats<T: Scalar>(outputs: &Matrix<T>) -> Result<ChannelStats<T>> {
    let samples = outputs.cols();
    if samples < 2 {
        return Err(Error::arg(format!(
            "need at least 2 samples to collect statistics, got {samples}"
        )));
    }
    let n = cst::<T>(samples as f64);
    let eps = cst::<T>(STD_EPS);

    let channels = (0..outputs.rows())
        .map(|c| {
            let row = outputs.row(c);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            ChannelMoments {
                mean,
                std: var.sqrt().max(eps),
            }
        })
        .collect();
    Ok(ChannelStats { channels })
}

/// Correct compressed outputs toward the dense statistics, per channel.
pub fn apply_correction<T: Scalar>(
    outputs: &Matrix<T>,
    dense: &ChannelStats<T>,
    comp: &ChannelStats<T>,
    form: CorrectionForm,
) -> Result<Matrix<T>> {
    let channels = outputs.rows();
    if dense.channels() != channels || comp.channels() != channels {
        return Err(Error::shape(format!(
            "stats for {}/{} channels against {channels} output channels",
            dense.channels(),
            comp.channels()
        )));
    }
    let mut out = outputs.clone();
    for c in 0..channels {
        let ratio = dense.std(c) / comp.std(c);
        let (mc, md) = (comp.mean(c), dense.mean(c));
        for v in out.row_mut(c) {
            *v = match form {
                CorrectionForm::ScaledShift => ratio * (*v - mc + md),
                CorrectionForm::Textbook => ratio * (*v - mc) + md,
            };
        }
    }
    Ok(out)
}

/// Fold the correction into affine (scale, shift) parameters so that
/// `scale' * x + shift'` equals applying the correction first and the
/// original affine map second.
pub fn merge_affine<T: Scalar>(
    dense: &ChannelStats<T>,
    comp: &ChannelStats<T>,
    scale: &[T],
    shift: &[T],
) -> Result<(Vec<T>, Vec<T>)> {
    let channels = dense.channels();
    if comp.channels() != channels || scale.len() != channels || shift.len() != channels {
        return Err(Error::shape("channel counts in merge_affine"));
    }
    let mut scale_out = Vec::with_capacity(channels);
    let mut shift_out = Vec::with_capacity(channels);
    for c in 0..channels {
        let ratio = dense.std(c) / comp.std(c);
        scale_out.push(scale[c] * ratio);
        shift_out.push(scale[c] * ratio * (dense.mean(c) - comp.mean(c)) + shift[c]);
    }
    Ok((scale_out, shift_out))
}
