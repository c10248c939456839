use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::numeric::{Tensor, VoxelMask, VoxelVolume};
use crate::record::*;
use crate::report::Label;
use crate::rules::lexical::Status;
use crate::rules::BiomarkerThresholds;

use super::config::{CohortConfig, TruncatedGaussian};

pub const LEFT_HIPPOCAMPUS: &str = "left_hippocampus";
pub const RIGHT_HIPPOCAMPUS: &str = "right_hippocampus";
pub const STRUCTURES: [&str; 2] = [LEFT_HIPPOCAMPUS, RIGHT_HIPPOCAMPUS];

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedPatient {
    pub record: PatientRecord,
    pub volume: VoxelVolume,
    /// Binary masks keyed by structure name.
    pub masks: BTreeMap<String, VoxelMask>,
}

fn sample(g: &TruncatedGaussian, rng: &mut ChaCha8Rng) -> f64 {
    let n = Normal::new(g.mean, g.std).expect("validated std");
    for _ in 0..1000 {
        let v = n.sample(rng);
        if (g.lo..=g.hi).contains(&v) {
            return v;
        }
    }
    g.mean.clamp(g.lo, g.hi)
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

/// Integer with thousands separators, e.g. `2,310`.
pub fn group_thousands(v: f64) -> String {
    let n = v.round() as i64;
    let digits = n.abs().to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(c);
    }
    if n < 0 {
        format!("-{out}")
    } else {
        out
    }
}

/// Label implied by the thresholds and memory score: CN when every marker is
/// normal, otherwise Dementia at memory z ≤ −2 and MCI above.
pub fn infer_label(b: &Biomarkers, c: &Cognition, t: &BiomarkerThresholds) -> Label {
    if t.statuses(b).iter().all(|s| *s == Status::Normal) {
        Label::Cn
    } else if c.memory <= -2.0 {
        Label::Dementia
    } else {
        Label::Mci
    }
}

fn evidence(
    id: &str,
    descriptor: String,
    source_field: &str,
    category: EvidenceCategory,
    anatomy_ref: Option<&str>,
) -> EvidenceItem {
    EvidenceItem {
        id: id.into(),
        descriptor,
        source_field: source_field.into(),
        category,
        anatomy_ref: anatomy_ref.map(Into::into),
    }
}

fn zscore(z: f64) -> String {
    format!("{z:.2}")
}

pub fn render_evidence(r: &PatientRecord) -> Vec<EvidenceItem> {
    use EvidenceCategory::*;
    let d = &r.demographics;
    let c = &r.cognition;
    let b = &r.biomarkers;
    let mut items = vec![
        evidence("age", format!("Age {:.0} years", d.age), "demographics.age", Demographics, None),
        evidence(
            "education",
            format!("Education {:.0} years", d.education_years),
            "demographics.education_years",
            Demographics,
            None,
        ),
        evidence(
            "family_history",
            format!("Family history {}", if r.history.family_history { "yes" } else { "no" }),
            "history.family_history",
            History,
            None,
        ),
        evidence("b12", format!("Serum B12 {:.0} pmol/L", r.labs.b12), "labs.b12", Lab, None),
        evidence(
            "apoe",
            format!("APOE genotype e{}/e{}", r.genetics.apoe[0], r.genetics.apoe[1]),
            "genetics.apoe",
            Genetic,
            None,
        ),
        evidence("memory", format!("Delayed recall zscore {}", zscore(c.memory)), "cognition.memory", Cognition, None),
        evidence(
            "executive",
            format!("Trail making zscore {}", zscore(c.executive)),
            "cognition.executive",
            Cognition,
            None,
        ),
        evidence(
            "visuospatial",
            format!("Figure copy zscore {}", zscore(c.visuospatial)),
            "cognition.visuospatial",
            Cognition,
            None,
        ),
        evidence(
            "language",
            format!("Category fluency zscore {}", zscore(c.language)),
            "cognition.language",
            Cognition,
            None,
        ),
        evidence("abeta", format!("CSF Abeta42 {:.0} pg/mL", b.abeta), "biomarkers.abeta", Biomarker, None),
        evidence("ttau", format!("CSF tTau {:.0} pg/mL", b.ttau), "biomarkers.ttau", Biomarker, None),
        evidence("ptau", format!("CSF pTau181 {:.0} pg/mL", b.ptau), "biomarkers.ptau", Biomarker, None),
    ];
    for s in &r.structures {
        let side = if s.name == LEFT_HIPPOCAMPUS { "Left" } else { "Right" };
        items.push(evidence(
            &s.name,
            format!("{side} hippocampal volume {} mm3", group_thousands(s.volume_mm3)),
            &format!("imaging.{}", s.name),
            Imaging,
            Some(&s.name),
        ));
    }
    items
}

/// Voxel-space geometry of the two hippocampi before jitter.
fn nominal_centers(dim: usize) -> [[f64; 3]; 2] {
    let m = (dim - 1) as f64;
    [[m / 2.0, m / 2.0, m * 0.27], [m / 2.0, m / 2.0, m * 0.73]]
}

pub fn mask_from_ellipsoid(dim: usize, e: &Ellipsoid) -> VoxelMask {
    let mut m = Tensor::zeros(&[dim, dim, dim]);
    for z in 0..dim {
        for y in 0..dim {
            for x in 0..dim {
                if e.contains(z as f64, y as f64, x as f64) {
                    let o = m.offset3(z, y, x);
                    m.data_mut()[o] = 1.0;
                }
            }
        }
    }
    m
}

/// Samples one patient whose values recover `label` under the thresholds.
/// Everything is a function of `(cfg, seed, label)`.
pub fn generate_patient(cfg: &CohortConfig, id: &str, seed: u64, label: Label) -> GeneratedPatient {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = &cfg.distributions;
    let stage = label.stage();

    let (abeta, ttau, ptau) = match label {
        Label::Cn => (&d.abeta_normal, &d.ttau_normal, &d.ptau_normal),
        Label::Mci => (&d.abeta_abnormal, &d.ttau_normal, &d.ptau_abnormal),
        Label::Dementia => (&d.abeta_abnormal, &d.ttau_abnormal, &d.ptau_abnormal),
    };
    let biomarkers = Biomarkers {
        abeta: sample(abeta, &mut rng).round(),
        ttau: sample(ttau, &mut rng).round(),
        ptau: sample(ptau, &mut rng).round(),
    };
    let other = &d.other_domains[stage];
    let cognition = Cognition {
        memory: round_to(sample(&d.memory[stage], &mut rng), 2),
        executive: round_to(sample(other, &mut rng), 2),
        visuospatial: round_to(sample(other, &mut rng), 2),
        language: round_to(sample(other, &mut rng), 2),
    };
    let demographics = Demographics {
        age: (62.0 + 4.0 * stage as f64 + rng.random_range(0.0..20.0)).round(),
        sex: if rng.random_bool(0.5) { "F" } else { "M" }.into(),
        education_years: rng.random_range(8..=20) as f64,
    };
    let e4_prob = [0.2, 0.45, 0.6][stage];
    let allele = |rng: &mut ChaCha8Rng| {
        if rng.random_bool(e4_prob) {
            4
        } else if rng.random_bool(0.1) {
            2
        } else {
            3
        }
    };
    let mut apoe = [allele(&mut rng), allele(&mut rng)];
    apoe.sort_unstable();
    let history = History {
        family_history: rng.random_bool(0.25 + 0.15 * stage as f64),
    };
    let labs = Labs {
        b12: rng.random_range(200.0f64..800.0).round(),
    };

    let dim = cfg.volume_dim;
    let scale = dim as f64 / 16.0;
    let mut structures = Vec::new();
    let mut masks = BTreeMap::new();
    for (name, center) in STRUCTURES.iter().zip(nominal_centers(dim)) {
        let mut c = center;
        for v in &mut c {
            *v += rng.random_range(-1.0..=1.0) * cfg.center_jitter;
        }
        let mut radii = d.radii[stage];
        for r in &mut radii {
            *r *= scale * (1.0 + rng.random_range(-1.0..=1.0) * cfg.radius_jitter);
        }
        let shape = Ellipsoid { center: c, radii };
        let volume_mm3 =
            (4.0 / 3.0 * std::f64::consts::PI * radii.iter().product::<f64>() * cfg.voxel_mm3).round();
        structures.push(Structure {
            name: name.to_string(),
            shape,
            volume_mm3,
        });
        masks.insert(name.to_string(), mask_from_ellipsoid(dim, &shape));
    }

    let noise = Normal::new(0.0, cfg.intensity_noise.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut volume = Tensor::zeros(&[dim, dim, dim]);
    let union: Vec<f64> = (0..volume.len())
        .map(|i| masks.values().map(|m| m.data()[i]).fold(0.0, f64::max))
        .collect();
    for (v, u) in volume.data_mut().iter_mut().zip(&union) {
        let n = if cfg.intensity_noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        // Stored as f32 on disk; quantize so in-memory and reloaded volumes agree.
        *v = ((u + n) as f32) as f64;
    }

    let mask_files = STRUCTURES
        .iter()
        .map(|s| (s.to_string(), format!("masks/{id}_{s}.emad")))
        .collect();
    let mut record = PatientRecord {
        id: id.into(),
        demographics,
        cognition,
        biomarkers,
        genetics: Genetics { apoe },
        history,
        labs,
        evidence: Vec::new(),
        gt_label: label,
        structures,
        mask_files,
    };
    record.evidence = render_evidence(&record);
    GeneratedPatient {
        record,
        volume,
        masks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands_grouping() {
        assert_eq!(group_thousands(4724.0), "4,724");
        assert_eq!(group_thousands(812.0), "812");
        assert_eq!(group_thousands(1234567.0), "1,234,567");
    }

    #[test]
    fn labels_follow_generator_contract() {
        let cfg = CohortConfig::default();
        let t = cfg.thresholds;
        for seed in 0..30 {
            let cn = generate_patient(&cfg, "p", seed, Label::Cn).record;
            assert!(cn.biomarkers.abeta >= t.abeta_abnormal_below);
            assert!(cn.biomarkers.ttau <= t.ttau_abnormal_above);
            assert!(cn.biomarkers.ptau <= t.ptau_abnormal_above);
            let dem = generate_patient(&cfg, "p", seed, Label::Dementia).record;
            assert!(dem.biomarkers.abeta < t.abeta_abnormal_below);
            for label in Label::ALL {
                let r = generate_patient(&cfg, "p", seed, label).record;
                assert_eq!(infer_label(&r.biomarkers, &r.cognition, &t), label);
                r.validate().unwrap();
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = CohortConfig::default();
        let a = generate_patient(&cfg, "p7", 99, Label::Mci);
        let b = generate_patient(&cfg, "p7", 99, Label::Mci);
        assert_eq!(a, b);
        assert_eq!(a.volume.bit_pattern(), b.volume.bit_pattern());
    }

    #[test]
    fn masks_match_ellipsoids() {
        let cfg = CohortConfig::default();
        let p = generate_patient(&cfg, "p", 3, Label::Dementia);
        let dim = cfg.volume_dim;
        for s in &p.record.structures {
            let m = &p.masks[&s.name];
            let mut count = 0;
            for z in 0..dim {
                for y in 0..dim {
                    for x in 0..dim {
                        let inside = s.shape.contains(z as f64, y as f64, x as f64);
                        assert_eq!(m.data()[m.offset3(z, y, x)] == 1.0, inside);
                        count += inside as usize;
                    }
                }
            }
            assert!(count > 10, "{} has only {count} voxels", s.name);
        }
        let left = &p.masks[LEFT_HIPPOCAMPUS];
        let right = &p.masks[RIGHT_HIPPOCAMPUS];
        assert!(left.data().iter().zip(right.data()).all(|(a, b)| a * b == 0.0));
    }

    fn number_in(descriptor: &str) -> f64 {
        descriptor
            .split_whitespace()
            .filter_map(|t| t.replace(',', "").parse().ok())
            .last()
            .unwrap()
    }

    #[test]
    fn descriptors_round_trip() {
        let cfg = CohortConfig::default();
        for seed in 0..10 {
            let r = generate_patient(&cfg, "p", seed, Label::ALL[seed as usize % 3]).record;
            let value = |id: &str| number_in(&r.evidence[r.evidence_index(id).unwrap()].descriptor);
            assert_eq!(value("age"), r.demographics.age);
            assert_eq!(value("education"), r.demographics.education_years);
            assert_eq!(value("b12"), r.labs.b12);
            assert_eq!(value("memory"), r.cognition.memory);
            assert_eq!(value("executive"), r.cognition.executive);
            assert_eq!(value("visuospatial"), r.cognition.visuospatial);
            assert_eq!(value("language"), r.cognition.language);
            assert_eq!(value("abeta"), r.biomarkers.abeta);
            assert_eq!(value("ttau"), r.biomarkers.ttau);
            assert_eq!(value("ptau"), r.biomarkers.ptau);
            for s in &r.structures {
                assert_eq!(value(&s.name), s.volume_mm3);
            }
        }
    }
}
