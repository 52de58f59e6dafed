//! Pre-collected profiling data: the subtask latency LUT, communication
//! volumes and the two preset split points used to seed scheme optimization.

mod lut;
pub mod fixtures;
pub mod synth;

pub use lut::{LayerRange, Lut, LutEntry, LutError};

use thiserror::Error;

use crate::types::{ModelProfile, Strategy};

/// Bytes sent from device to server under `strategy`.
///
/// PP ships the boundary volume at its split; DP ships the raw input. The
/// result returned to the device is not included, see
/// [`ModelProfile::result_volume`].
pub fn comm_volume(model: &ModelProfile, strategy: Strategy) -> f64 {
    match strategy {
        Strategy::Dp => model.boundary_volumes[0],
        Strategy::Pp(s) => model.boundary_volumes[s],
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PresetError {
    #[error("model {model:?} has {n_layers} layer(s); an interior split needs at least 2")]
    NoInteriorSplit { model: String, n_layers: usize },
    #[error(transparent)]
    Lut(#[from] LutError),
}

fn interior_splits(model: &ModelProfile) -> Result<std::ops::Range<usize>, PresetError> {
    if model.n_layers < 2 {
        return Err(PresetError::NoInteriorSplit {
            model: model.model_id.clone(),
            n_layers: model.n_layers,
        });
    }
    Ok(1..model.n_layers)
}

/// Interior split with the smallest intermediate volume; ties go to the
/// smaller split.
pub fn preset_pp_comm(model: &ModelProfile) -> Result<usize, PresetError> {
    let mut best = None::<(usize, f64)>;
    for s in interior_splits(model)? {
        let v = model.boundary_volumes[s];
        if best.is_none_or(|(_, bv)| v < bv) {
            best = Some((s, v));
        }
    }
    Ok(best.expect("non-empty range").0)
}

/// Interior split minimizing device-stage plus server-stage latency at batch
/// size 1. Ties go to the smaller transferred volume, then the smaller split.
pub fn preset_pp_comp(
    model: &ModelProfile,
    device_kind: &str,
    server_kind: &str,
    lut: &Lut,
) -> Result<usize, PresetError> {
    let n = model.n_layers;
    let mut best = None::<(usize, f64, f64)>;
    for s in interior_splits(model)? {
        let total = lut.lookup(device_kind, &model.model_id, LayerRange::new(0, s), 1)?
            + lut.lookup(server_kind, &model.model_id, LayerRange::new(s, n), 1)?;
        let volume = model.boundary_volumes[s];
        let better = match best {
            None => true,
            Some((_, bt, bv)) => total < bt || (total == bt && volume < bv),
        };
        if better {
            best = Some((s, total, volume));
        }
    }
    Ok(best.expect("non-empty range").0)
}
