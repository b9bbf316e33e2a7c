use super::StudyRecord;
use crate::arch::MomeConfig;
use crate::error::{MomeError, Result};
use crate::tensor::Tensor;

fn dims4(v: &Tensor, op: &str) -> Result<[usize; 4]> {
    match v.shape() {
        &[d, h, w, c] => Ok([d, h, w, c]),
        s => Err(MomeError::invalid(format!(
            "{op} expects a [D, H, W, C] volume, got {s:?}"
        ))),
    }
}

/// Per-channel zero mean and unit (population) variance over all voxels.
/// Channels with zero variance become zeros.
pub fn standardize(volume: &Tensor) -> Result<Tensor> {
    let [d, h, w, c] = dims4(volume, "standardize")?;
    let n = d * h * w;
    if n < 2 {
        return Err(MomeError::invalid("standardize needs at least two voxels"));
    }
    let data = volume.data();
    let mut out = vec![0.0; data.len()];
    for ch in 0..c {
        let vals = || data.iter().skip(ch).step_by(c).copied();
        let mean = vals().sum::<f64>() / n as f64;
        let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 0.0 {
            for (o, v) in out.iter_mut().skip(ch).step_by(c).zip(vals()) {
                *o = (v - mean) / sd;
            }
        }
    }
    Tensor::new(volume.shape().to_vec(), out)
}

/// Reverse the spatial axes marked in `axes`.
pub fn flip(volume: &Tensor, axes: [bool; 3]) -> Result<Tensor> {
    let [d, h, w, c] = dims4(volume, "flip")?;
    if axes == [false; 3] {
        return Ok(volume.clone());
    }
    let src = volume.data();
    let mut out = vec![0.0; src.len()];
    let f = |i: usize, n: usize, a: usize| if axes[a] { n - 1 - i } else { i };
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let from = ((f(z, d, 0) * h + f(y, h, 1)) * w + f(x, w, 2)) * c;
                let to = ((z * h + y) * w + x) * c;
                out[to..to + c].copy_from_slice(&src[from..from + c]);
            }
        }
    }
    Tensor::new(volume.shape().to_vec(), out)
}

/// Zero canvas of `target` spatial dims with `volume` copied at `offset`.
pub fn pad_to(volume: &Tensor, target: [usize; 3], offset: [usize; 3]) -> Result<Tensor> {
    let [d, h, w, c] = dims4(volume, "pad_to")?;
    for (a, &n) in [d, h, w].iter().enumerate() {
        if offset[a] + n > target[a] {
            return Err(MomeError::invalid(format!(
                "volume {:?} at offset {offset:?} overflows canvas {target:?}",
                &volume.shape()[..3]
            )));
        }
    }
    let [td, th, tw] = target;
    let mut out = vec![0.0; td * th * tw * c];
    let src = volume.data();
    for z in 0..d {
        for y in 0..h {
            let from = (z * h + y) * w * c;
            let to = (((z + offset[0]) * th + y + offset[1]) * tw + offset[2]) * c;
            out[to..to + w * c].copy_from_slice(&src[from..from + w * c]);
        }
    }
    Tensor::new(vec![td, th, tw, c], out)
}

/// Resample the channel (time) axis onto `target_t` evenly spaced points
/// spanning the original range by linear interpolation.
pub fn interp_phases(dce: &Tensor, target_t: usize) -> Result<Tensor> {
    let shape = dce.shape();
    let t = *shape
        .last()
        .ok_or_else(|| MomeError::invalid("interp_phases on a scalar"))?;
    if target_t < 1 {
        return Err(MomeError::invalid("interp_phases needs target_t >= 1"));
    }
    if t < 2 {
        return Err(MomeError::invalid("interp_phases needs at least two phases"));
    }
    let voxels = dce.numel() / t;
    let mut out = Vec::with_capacity(voxels * target_t);
    for series in dce.data().chunks(t) {
        for k in 0..target_t {
            let pos = if target_t == 1 {
                0.0
            } else {
                k as f64 * (t - 1) as f64 / (target_t - 1) as f64
            };
            let lo = (pos.floor() as usize).min(t - 2);
            let frac = pos - lo as f64;
            out.push(if frac == 0.0 {
                series[lo]
            } else if frac == 1.0 {
                series[lo + 1]
            } else {
                series[lo] + frac * (series[lo + 1] - series[lo])
            });
        }
    }
    let mut new_shape = shape.to_vec();
    *new_shape.last_mut().expect("rank >= 1") = target_t;
    Tensor::new(new_shape, out)
}

/// Where each modality goes on its canvas and which axes are flipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Placement {
    pub flips: [bool; 3],
    /// Per configured modality; `None` centers the volume.
    pub offsets: Vec<Option<[usize; 3]>>,
}

impl Placement {
    pub fn centered(n_modalities: usize) -> Self {
        Placement {
            flips: [false; 3],
            offsets: vec![None; n_modalities],
        }
    }
}

/// Centered offset of `dims` inside `canvas`.
pub fn center_offset(dims: [usize; 3], canvas: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| canvas[a].saturating_sub(dims[a]) / 2)
}

/// Model inputs for a record in config order: standardize, flip, pad.
/// Modalities outside `present` get an empty placeholder and are never read.
pub fn prepare(
    record: &StudyRecord,
    config: &MomeConfig,
    present: crate::arch::ModalitySet,
    placement: &Placement,
) -> Result<Vec<Tensor>> {
    config
        .modalities
        .iter()
        .enumerate()
        .map(|(i, m)| {
            if !present.contains(i) {
                return Ok(Tensor::zeros(&[1]));
            }
            let v = record.volume(&m.name)?;
            let [d, h, w, c] = dims4(v, "prepare")?;
            if c != m.channels {
                return Err(MomeError::data(format!(
                    "study {}: {} has {c} channels, model expects {}",
                    record.id, m.name, m.channels
                )));
            }
            let offset = placement
                .offsets
                .get(i)
                .copied()
                .flatten()
                .unwrap_or_else(|| center_offset([d, h, w], m.dims));
            let v = standardize(v)?;
            let v = flip(&v, placement.flips)?;
            pad_to(&v, m.dims, offset).map_err(|e| MomeError::data(format!("study {}: {e}", record.id)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(d: usize, h: usize, w: usize, c: usize) -> Tensor {
        let n = d * h * w * c;
        Tensor::new(vec![d, h, w, c], (0..n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap()
    }

    #[test]
    fn standardize_examples() {
        let t = Tensor::new(vec![2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        assert_eq!(standardize(&t).unwrap().data(), &[-1.0, 1.0]);
        let c = Tensor::full(&[2, 2, 2, 1], 4.0);
        assert!(standardize(&c).unwrap().data().iter().all(|&v| v == 0.0));
        let s = standardize(&vol(3, 2, 2, 2)).unwrap();
        let again = standardize(&s).unwrap();
        assert!(s.max_abs_diff(&again) < 1e-12);
    }

    #[test]
    fn flip_is_an_involution() {
        let v = vol(3, 4, 2, 2);
        for axes in [[true, false, false], [false, true, true], [true, true, true]] {
            let f = flip(&v, axes).unwrap();
            assert!(!f.bit_eq(&v));
            assert!(flip(&f, axes).unwrap().bit_eq(&v));
        }
    }

    #[test]
    fn pad_examples() {
        let v = vol(2, 3, 2, 1);
        assert!(pad_to(&v, [2, 3, 2], [0, 0, 0]).unwrap().bit_eq(&v));
        let p = pad_to(&v, [4, 5, 3], [1, 2, 1]).unwrap();
        assert!((p.sum() - v.sum()).abs() < 1e-12);
        assert!(pad_to(&v, [4, 5, 3], [3, 0, 0]).is_err());
        let mut a: Vec<f64> = pad_to(&v, [4, 5, 3], [0, 0, 0]).unwrap().into_data();
        let mut b: Vec<f64> = pad_to(&v, [4, 5, 3], [1, 1, 0]).unwrap().into_data();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn interp_examples() {
        let ramp = Tensor::new(vec![1, 5], vec![0.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = interp_phases(&ramp, 6).unwrap();
        for (a, b) in r.data().iter().zip([0.0, 0.8, 1.6, 2.4, 3.2, 4.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let v = vol(2, 2, 1, 4);
        assert!(interp_phases(&v, 4).unwrap().max_abs_diff(&v) < 1e-12);
        let c = Tensor::full(&[3, 3], 2.5);
        assert!(interp_phases(&c, 7).unwrap().data().iter().all(|&x| x == 2.5));
        assert!(interp_phases(&c, 0).is_err());
        assert!(interp_phases(&Tensor::zeros(&[3, 1]), 4).is_err());
    }
}
