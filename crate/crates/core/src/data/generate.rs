use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::StudyRecord;
use crate::error::{MomeError, Result};
use crate::tensor::Tensor;

/// Generated volume geometry of one modality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenModality {
    pub name: String,
    pub dims: [usize; 3],
    pub channels: usize,
    /// Lesion contrast for malignant studies; benign studies get half.
    pub amplitude: f64,
}

/// Intensity shift and noise multiplier applied to every study of a site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteEffect {
    pub shift: f64,
    pub noise_scale: f64,
}

impl Default for SiteEffect {
    fn default() -> Self {
        SiteEffect {
            shift: 0.0,
            noise_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_studies: usize,
    /// The last `n_test` studies are tagged `split=test`, the `n_val` before
    /// them `split=val`, the rest `split=train`.
    pub n_val: usize,
    pub n_test: usize,
    pub class_prevalence: f64,
    pub modalities: Vec<GenModality>,
    pub noise_sigma: f64,
    /// Lesion semi-axes in voxels of the first modality; other modalities
    /// share the lesion's normalized extent.
    pub lesion_radius_range: [f64; 2],
    /// Per-study lesion contrast jitter, in units of `noise_sigma`.
    pub contrast_jitter: f64,
    /// Mean offset of the DCE wash-out weight from 0.5 (up for malignant,
    /// down for benign).
    pub profile_separation: f64,
    pub profile_jitter: f64,
    pub seed: u64,
    /// Site name to effect; studies are assigned uniformly over the sites.
    /// Empty means two sites `A` and `B` with no effect.
    pub site_effects: BTreeMap<String, SiteEffect>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_studies: 1100,
            n_val: 100,
            n_test: 200,
            class_prevalence: 0.5,
            modalities: vec![
                GenModality {
                    name: "dce".into(),
                    dims: [28, 28, 16],
                    channels: 6,
                    amplitude: 1.2,
                },
                GenModality {
                    name: "dwi".into(),
                    dims: [28, 12, 16],
                    channels: 1,
                    amplitude: 0.6,
                },
                GenModality {
                    name: "t2".into(),
                    dims: [28, 28, 8],
                    channels: 1,
                    amplitude: 0.3,
                },
            ],
            noise_sigma: 0.25,
            lesion_radius_range: [3.0, 3.5],
            contrast_jitter: 0.9,
            profile_separation: 0.05,
            profile_jitter: 0.3,
            seed: 42,
            site_effects: BTreeMap::new(),
        }
    }
}

/// Malignant enhancement: early peak then wash-out.
pub const WASHOUT: [f64; 6] = [0.3, 1.0, 0.9, 0.8, 0.7, 0.6];
/// Benign enhancement: monotone persistent rise.
pub const PERSISTENT: [f64; 6] = [0.2, 0.45, 0.6, 0.75, 0.85, 0.95];

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(MomeError::config(m));
        if !(self.class_prevalence > 0.0 && self.class_prevalence < 1.0) {
            return err(format!("class_prevalence {} must lie in (0, 1)", self.class_prevalence));
        }
        if self.n_val + self.n_test > self.n_studies {
            return err(format!(
                "n_val + n_test ({}) exceeds n_studies ({})",
                self.n_val + self.n_test,
                self.n_studies
            ));
        }
        if self.modalities.is_empty() {
            return err("at least one modality is required".into());
        }
        for m in &self.modalities {
            if !(m.amplitude.is_finite() && m.amplitude >= 0.0) {
                return err(format!("{} amplitude must be finite and >= 0", m.name));
            }
            if m.channels == 0 || m.dims.contains(&0) {
                return err(format!("{} has an empty axis", m.name));
            }
        }
        let [lo, hi] = self.lesion_radius_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return err(format!(
                "lesion_radius_range {:?} must satisfy 0 < lo <= hi",
                self.lesion_radius_range
            ));
        }
        for (name, v) in [
            ("noise_sigma", self.noise_sigma),
            ("contrast_jitter", self.contrast_jitter),
            ("profile_jitter", self.profile_jitter),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return err(format!("{name} must be finite and >= 0"));
            }
        }
        for (site, e) in &self.site_effects {
            if !(e.shift.is_finite() && e.noise_scale.is_finite() && e.noise_scale >= 0.0) {
                return err(format!("site {site}: invalid effect"));
            }
        }
        Ok(())
    }

    fn sites(&self) -> Vec<(String, SiteEffect)> {
        if self.site_effects.is_empty() {
            vec![("A".into(), SiteEffect::default()), ("B".into(), SiteEffect::default())]
        } else {
            self.site_effects.iter().map(|(k, v)| (k.clone(), *v)).collect()
        }
    }

    fn split_of(&self, i: usize) -> &'static str {
        let n_train = self.n_studies - self.n_val - self.n_test;
        if i < n_train {
            "train"
        } else if i < n_train + self.n_val {
            "val"
        } else {
            "test"
        }
    }
}

pub fn generate(cfg: &GenConfig) -> Result<Vec<StudyRecord>> {
    cfg.validate()?;
    (0..cfg.n_studies).map(|i| generate_study(cfg, i)).collect()
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Study `index` of the dataset; depends only on `(cfg, index)`.
pub fn generate_study(cfg: &GenConfig, index: usize) -> Result<StudyRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);

    let label = u8::from(rng.random::<f64>() < cfg.class_prevalence);
    let y = f64::from(label);
    let sites = cfg.sites();
    let (site, effect) = sites[rng.random_range(0..sites.len())].clone();
    let field = if rng.random::<f64>() < 0.4 { "1.5T" } else { "3T" };
    let age = ["<40", "40-55", ">55"][rng.random_range(0..3)];
    let suspicion = y + 0.8 * normal(&mut rng);
    let birads = if suspicion < 0.0 {
        "3"
    } else if suspicion < 1.0 {
        "4"
    } else {
        "5"
    };

    let reference = cfg.modalities[0].dims;
    let center: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let [rlo, rhi] = cfg.lesion_radius_range;
    let radii: [f64; 3] = std::array::from_fn(|a| {
        let r = if rhi > rlo { rng.random_range(rlo..rhi) } else { rlo };
        r / reference[a] as f64
    });
    let bias = if label == 1 {
        cfg.profile_separation
    } else {
        -cfg.profile_separation
    };
    let w = (0.5 + bias + cfg.profile_jitter * normal(&mut rng)).clamp(0.0, 1.0);
    let profile: [f64; 6] = std::array::from_fn(|t| w * WASHOUT[t] + (1.0 - w) * PERSISTENT[t]);

    let sigma = cfg.noise_sigma * effect.noise_scale;
    let mut volumes = Vec::with_capacity(cfg.modalities.len());
    for m in &cfg.modalities {
        let contrast = m.amplitude * (0.5 + 0.5 * y) + cfg.noise_sigma * cfg.contrast_jitter * normal(&mut rng);
        let [d, h, wd] = m.dims;
        let c = m.channels;
        let shape = if c == 1 {
            vec![1.0]
        } else {
            super::interp_phases(&Tensor::new(vec![6], profile.to_vec())?, c)?.into_data()
        };
        let mut data = Vec::with_capacity(d * h * wd * c);
        for z in 0..d {
            for yy in 0..h {
                for x in 0..wd {
                    let pos = [z, yy, x];
                    let inside = (0..3)
                        .map(|a| {
                            let g = (pos[a] as f64 + 0.5) / m.dims[a] as f64;
                            ((g - center[a]) / radii[a]).powi(2)
                        })
                        .sum::<f64>()
                        <= 1.0;
                    for ch in 0..c {
                        let mut v = effect.shift + sigma * normal(&mut rng);
                        if inside {
                            v += contrast * shape[ch];
                        }
                        data.push(v as f32 as f64);
                    }
                }
            }
        }
        volumes.push((m.name.clone(), Tensor::new(vec![d, h, wd, c], data)?));
    }

    let tags = BTreeMap::from([
        ("site".to_string(), site),
        ("field_strength".to_string(), field.to_string()),
        ("age_bin".to_string(), age.to_string()),
        ("birads".to_string(), birads.to_string()),
        ("split".to_string(), cfg.split_of(index).to_string()),
    ]);
    Ok(StudyRecord {
        id: format!("study-{index:05}"),
        label,
        tags,
        volumes,
    })
}
