use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rules::BiomarkerThresholds;

/// Gaussian truncated to `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncatedGaussian {
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
}

impl TruncatedGaussian {
    pub const fn new(mean: f64, std: f64, lo: f64, hi: f64) -> Self {
        Self { mean, std, lo, hi }
    }

    fn validate(&self, name: &str) -> Result<()> {
        let ok = self.std > 0.0
            && self.lo < self.hi
            && [self.mean, self.std, self.lo, self.hi].iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::Config(format!("distribution `{name}` is malformed")));
        }
        Ok(())
    }
}

/// Per-stage sampling distributions. Biomarkers are drawn from the normal or
/// abnormal side; cognition from a per-stage band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageDistributions {
    pub abeta_normal: TruncatedGaussian,
    pub abeta_abnormal: TruncatedGaussian,
    pub ttau_normal: TruncatedGaussian,
    pub ttau_abnormal: TruncatedGaussian,
    pub ptau_normal: TruncatedGaussian,
    pub ptau_abnormal: TruncatedGaussian,
    /// Memory z-score per stage (CN, MCI, Dementia).
    pub memory: [TruncatedGaussian; 3],
    /// Executive, visuospatial and language z-scores per stage.
    pub other_domains: [TruncatedGaussian; 3],
    /// Hippocampal ellipsoid radii (z, y, x) in voxels per stage.
    pub radii: [[f64; 3]; 3],
}

impl Default for StageDistributions {
    fn default() -> Self {
        let g = TruncatedGaussian::new;
        Self {
            abeta_normal: g(1300.0, 200.0, 1000.0, 2000.0),
            abeta_abnormal: g(700.0, 120.0, 300.0, 950.0),
            ttau_normal: g(220.0, 40.0, 100.0, 290.0),
            ttau_abnormal: g(420.0, 70.0, 310.0, 700.0),
            ptau_normal: g(20.0, 3.0, 10.0, 26.0),
            ptau_abnormal: g(38.0, 6.0, 28.0, 60.0),
            memory: [
                g(0.2, 0.5, -0.9, 1.5),
                g(-1.5, 0.25, -1.95, -1.05),
                g(-2.8, 0.5, -3.8, -2.05),
            ],
            other_domains: [
                g(0.1, 0.5, -0.9, 1.5),
                g(-0.6, 0.5, -1.9, 1.0),
                g(-1.8, 0.7, -3.8, -0.5),
            ],
            radii: [[2.2, 3.5, 2.2], [2.0, 3.1, 2.0], [1.7, 2.6, 1.7]],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_patients: usize,
    pub seed: u64,
    /// Proportions of CN, MCI and Dementia.
    pub label_mix: [f64; 3],
    pub volume_dim: usize,
    /// Standard deviation of additive intensity noise.
    pub intensity_noise: f64,
    /// Maximum displacement of each ellipsoid centre, in voxels.
    pub center_jitter: f64,
    /// Relative jitter of each ellipsoid radius.
    pub radius_jitter: f64,
    /// Physical volume of one voxel, used for volume descriptors.
    pub voxel_mm3: f64,
    pub thresholds: BiomarkerThresholds,
    pub distributions: StageDistributions,
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_patients: 100,
            seed: 2024,
            label_mix: [1.0 / 3.0; 3],
            volume_dim: 16,
            intensity_noise: 0.15,
            center_jitter: 0.5,
            radius_jitter: 0.05,
            voxel_mm3: 40.0,
            thresholds: BiomarkerThresholds::default(),
            distributions: StageDistributions::default(),
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 {
            return Err(Error::Config("n_patients must be at least 1".into()));
        }
        if self.label_mix.iter().any(|p| !p.is_finite() || *p < 0.0)
            || (self.label_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config("label_mix must be nonnegative and sum to 1".into()));
        }
        if self.volume_dim < 8 {
            return Err(Error::Config("volume_dim must be at least 8".into()));
        }
        if !(self.intensity_noise >= 0.0 && self.center_jitter >= 0.0 && self.radius_jitter >= 0.0) {
            return Err(Error::Config("noise levels must be nonnegative".into()));
        }
        if !(self.voxel_mm3 > 0.0) {
            return Err(Error::Config("voxel_mm3 must be positive".into()));
        }
        let d = &self.distributions;
        let named = [
            ("abeta_normal", d.abeta_normal),
            ("abeta_abnormal", d.abeta_abnormal),
            ("ttau_normal", d.ttau_normal),
            ("ttau_abnormal", d.ttau_abnormal),
            ("ptau_normal", d.ptau_normal),
            ("ptau_abnormal", d.ptau_abnormal),
        ];
        for (name, g) in named {
            g.validate(name)?;
            if g.lo <= 0.0 {
                return Err(Error::Config(format!("distribution `{name}` must stay positive")));
            }
        }
        for g in d.memory.iter().chain(&d.other_domains) {
            g.validate("cognition")?;
        }
        let t = &self.thresholds;
        let separated = d.abeta_normal.lo >= t.abeta_abnormal_below
            && d.abeta_abnormal.hi < t.abeta_abnormal_below
            && d.ttau_normal.hi <= t.ttau_abnormal_above
            && d.ttau_abnormal.lo > t.ttau_abnormal_above
            && d.ptau_normal.hi <= t.ptau_abnormal_above
            && d.ptau_abnormal.lo > t.ptau_abnormal_above;
        if !separated {
            return Err(Error::Config(
                "biomarker distributions must lie on their side of the thresholds".into(),
            ));
        }
        // The label rule reads memory bands; overlapping bands would make
        // generated labels unrecoverable.
        let m = &d.memory;
        if !(m[0].lo > -1.0 && m[1].lo > -2.0 && m[1].hi <= -1.0 && m[2].hi <= -2.0) {
            return Err(Error::Config("memory bands must follow the stage cut-offs".into()));
        }
        let o = &d.other_domains;
        if !(o[0].lo > -1.0 && o[1].lo > -2.0) {
            return Err(Error::Config("non-memory bands exceed the stage severity".into()));
        }
        let half = self.volume_dim as f64 / 2.0;
        for r in &d.radii {
            if r.iter().any(|v| !(*v > 0.5) || *v + self.center_jitter >= half / 1.5) {
                return Err(Error::Config("ellipsoid radii do not fit the volume".into()));
            }
        }
        Ok(())
    }
}
