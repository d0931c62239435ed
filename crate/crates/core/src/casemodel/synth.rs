//! Seeded synthetic cohort generator.
//!
//! Records are produced in small *cohorts* (think: one referral site or one
//! family pedigree). Every member of a cohort shares the cohort's label set
//! and sits close to the cohort profile in feature space, so nearest
//! neighbours of a record are mostly its cohort mates.
//!
//! The label-informative attributes of a cohort (age, APOE e4 count,
//! hippocampal/amygdala/ventricular volume, temporal thickness, WMH load)
//! are each drawn from the distribution of one of the cohort's subtypes with
//! probability `1 - neighbor_signal`, and from the label-agnostic population
//! distribution otherwise. With `neighbor_signal = 0` a record's own features
//! carry all of its label signal; with `neighbor_signal = 1` the labels can
//! only be recovered by looking at labelled neighbours.
//!
//! Subtype-conditional distributions:
//!
//! | subtype     | age       | APOE e4 (0/1/2) | hippocampus | ventricles | temporal | WMH |
//! |-------------|-----------|-----------------|-------------|------------|----------|-----|
//! | early-onset | U(45, 64) | .50/.35/.15     | 3.10        | 28         | 2.45     | 2.0 |
//! | late-onset  | U(66, 88) | .45/.40/.15     | 2.70        | 48         | 2.60     | 6.0 |
//! | familial    | U(48, 68) | .10/.50/.40     | 2.90        | 32         | 2.55     | 2.5 |
//! | sporadic    | U(62, 86) | .75/.20/.05     | 2.80        | 42         | 2.60     | 9.0 |
//! | atypical    | U(52, 74) | .70/.25/.05     | 3.40        | 30         | 2.15     | 3.0 |
//! | population  | U(45, 88) | .55/.33/.12     | 2.95        | 36         | 2.50     | 4.5 |
//!
//! Severity (CDR) is drawn per cohort and jittered per record; MMSE, MoCA,
//! nWBV and the volumes worsen monotonically with CDR.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::case::{Cdr, Gender, Handedness, LabelSet, PatientCase, SubtypeLabel};
use super::split::apportion;
use super::CaseRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// Number of records.
    pub n: usize,
    /// Fractions of single / double / triple label sets.
    pub mix: [f64; 3],
    /// Per-record jitter around the cohort profile, in population-sd units.
    pub noise: f64,
    /// Fraction of each cohort's label signal withheld from its own features.
    pub neighbor_signal: f64,
    /// Target records per cohort.
    pub cohort_size: usize,
    /// Probability a record's label set is resampled away from its cohort's.
    pub label_noise: f64,
    /// Probability each optional field is left unrecorded.
    pub missing_rate: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            mix: [0.6, 0.3, 0.1],
            noise: 0.25,
            neighbor_signal: 0.5,
            cohort_size: 12,
            label_noise: 0.05,
            missing_rate: 0.05,
        }
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GeneratorError {
    #[error("bad generator config: {0}")]
    BadConfig(String),
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GeneratorError> {
        let bad = |m: &str| Err(GeneratorError::BadConfig(m.into()));
        if self.n == 0 {
            return bad("n must be positive");
        }
        if self.mix.iter().any(|m| !(*m >= 0.0)) || (self.mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad("cardinality mix must be non-negative and sum to 1");
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad("noise must be finite and non-negative");
        }
        for (name, p) in [
            ("neighbor_signal", self.neighbor_signal),
            ("label_noise", self.label_noise),
            ("missing_rate", self.missing_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(GeneratorError::BadConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.cohort_size == 0 {
            return bad("cohort_size must be positive");
        }
        Ok(())
    }
}

struct Profile {
    age: (f64, f64),
    apoe: [f64; 3],
    hippocampus: f64,
    amygdala: f64,
    ventricles: f64,
    temporal: f64,
    wmh: f64,
}

const POPULATION: Profile = Profile {
    age: (45.0, 88.0),
    apoe: [0.55, 0.33, 0.12],
    hippocampus: 2.95,
    amygdala: 1.40,
    ventricles: 36.0,
    temporal: 2.50,
    wmh: 4.5,
};

fn profile(label: SubtypeLabel) -> Profile {
    use SubtypeLabel::*;
    match label {
        EarlyOnset => Profile {
            age: (45.0, 64.0),
            apoe: [0.50, 0.35, 0.15],
            hippocampus: 3.10,
            amygdala: 1.45,
            ventricles: 28.0,
            temporal: 2.45,
            wmh: 2.0,
        },
        LateOnset => Profile {
            age: (66.0, 88.0),
            apoe: [0.45, 0.40, 0.15],
            hippocampus: 2.70,
            amygdala: 1.30,
            ventricles: 48.0,
            temporal: 2.60,
            wmh: 6.0,
        },
        Familial => Profile {
            age: (48.0, 68.0),
            apoe: [0.10, 0.50, 0.40],
            hippocampus: 2.90,
            amygdala: 1.40,
            ventricles: 32.0,
            temporal: 2.55,
            wmh: 2.5,
        },
        Sporadic => Profile {
            age: (62.0, 86.0),
            apoe: [0.75, 0.20, 0.05],
            hippocampus: 2.80,
            amygdala: 1.35,
            ventricles: 42.0,
            temporal: 2.60,
            wmh: 9.0,
        },
        Atypical => Profile {
            age: (52.0, 74.0),
            apoe: [0.70, 0.25, 0.05],
            hippocampus: 3.40,
            amygdala: 1.55,
            ventricles: 30.0,
            temporal: 2.15,
            wmh: 3.0,
        },
    }
}

const SEVERITY_PROBS: [f64; 5] = [0.15, 0.30, 0.30, 0.17, 0.08];
const MMSE_BY_CDR: [f64; 5] = [28.5, 25.5, 20.5, 14.0, 8.0];

struct Cohort {
    labels: LabelSet,
    severity: usize,
    age: f64,
    apoe: u8,
    hippocampus: f64,
    amygdala: f64,
    ventricles: f64,
    temporal: f64,
    wmh: f64,
    etiv: f64,
    education: f64,
    ses: u8,
    gender: Gender,
    handedness: Handedness,
    gds: f64,
    mmse_offset: f64,
}

fn categorical<R: Rng>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn gauss<R: Rng>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    Normal::new(mean, sd).expect("finite sd").sample(rng)
}

fn random_labels<R: Rng>(rng: &mut R, k: usize) -> LabelSet {
    SubtypeLabel::ALL.choose_multiple(rng, k).copied().collect()
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let p = 10f64.powi(decimals);
    (v * p).round() / p
}

fn make_cohort<R: Rng>(rng: &mut R, labels: LabelSet, neighbor_signal: f64) -> Cohort {
    let parents: Vec<SubtypeLabel> = labels.iter().collect();
    let pick = |rng: &mut R| -> Profile {
        if rng.random::<f64>() < neighbor_signal {
            POPULATION
        } else {
            profile(*parents.choose(rng).expect("non-empty label set"))
        }
    };
    let p = pick(rng);
    let age = rng.random_range(p.age.0..p.age.1);
    let p = pick(rng);
    let apoe = categorical(rng, &p.apoe) as u8;
    let m = pick(rng).hippocampus;
    let hippocampus = gauss(rng, m, 0.12);
    let m = pick(rng).amygdala;
    let amygdala = gauss(rng, m, 0.05);
    let m = pick(rng).ventricles;
    let ventricles = gauss(rng, m, 3.0);
    let m = pick(rng).temporal;
    let temporal = gauss(rng, m, 0.05);
    let m = pick(rng).wmh;
    let wmh = gauss(rng, m, 0.8).max(0.0);

    let gender = if rng.random::<f64>() < 0.55 { Gender::Female } else { Gender::Male };
    let handedness = match categorical(rng, &[0.1, 0.85, 0.05]) {
        0 => Handedness::Left,
        1 => Handedness::Right,
        _ => Handedness::Ambi,
    };
    let etiv_mean = if gender == Gender::Female { 1400.0 } else { 1580.0 };
    Cohort {
        labels,
        severity: categorical(rng, &SEVERITY_PROBS),
        age,
        apoe,
        hippocampus,
        amygdala,
        ventricles,
        temporal,
        wmh,
        etiv: gauss(rng, etiv_mean, 120.0),
        education: rng.random_range(6.0..20.0),
        ses: rng.random_range(1..=5),
        gender,
        handedness,
        gds: rng.random_range(0.0..9.0),
        mmse_offset: gauss(rng, 0.0, 1.0),
    }
}

fn make_record<R: Rng>(rng: &mut R, c: &Cohort, cfg: &GeneratorConfig) -> (PatientCase, LabelSet) {
    let jit = |rng: &mut R, sd: f64| if cfg.noise > 0.0 { gauss(rng, 0.0, cfg.noise * sd) } else { 0.0 };

    let sev = if rng.random::<f64>() < 0.8 {
        c.severity
    } else if rng.random::<bool>() {
        (c.severity + 1).min(4)
    } else {
        c.severity.saturating_sub(1)
    };
    let s = sev as f64;
    let age = round_to((c.age + jit(rng, 6.0)).clamp(40.0, 100.0), 0);
    let mmse = round_to((MMSE_BY_CDR[sev] + c.mmse_offset + gauss(rng, 0.0, 1.2)).clamp(0.0, 30.0), 0);
    let moca = round_to((mmse - 2.5 + gauss(rng, 0.0, 1.2)).clamp(0.0, 30.0), 0);
    let nwbv = round_to(
        (0.84 - 0.0025 * (age - 50.0) - 0.012 * s + gauss(rng, 0.0, 0.008)).clamp(0.55, 0.92),
        3,
    );
    let apoe = if rng.random::<f64>() < 0.9 { c.apoe } else { rng.random_range(0..=2) };

    let mut case = PatientCase {
        id: String::new(),
        mmse,
        cdr: Cdr::ALL[sev],
        age,
        etiv: Some(round_to(c.etiv + jit(rng, 150.0), 0)),
        nwbv: Some(nwbv),
        gender: Some(c.gender),
        handedness: Some(c.handedness),
        education: Some(round_to((c.education + jit(rng, 3.0)).clamp(0.0, 30.0), 0)),
        ses: Some(c.ses),
        hippocampal_volume: Some(round_to((c.hippocampus - 0.18 * s + jit(rng, 0.3)).max(0.5), 2)),
        amygdala_volume: Some(round_to((c.amygdala - 0.05 * s + jit(rng, 0.15)).max(0.2), 2)),
        ventricular_volume: Some(round_to((c.ventricles + 5.0 * s + jit(rng, 10.0)).max(5.0), 1)),
        temporal_thickness: Some(round_to((c.temporal - 0.06 * s + jit(rng, 0.15)).max(1.0), 2)),
        wmh_load: Some(round_to((c.wmh + jit(rng, 2.0)).max(0.0), 2)),
        apoe_e4_count: Some(apoe),
        moca: Some(moca),
        gds: Some(round_to((c.gds + jit(rng, 2.5)).clamp(0.0, 15.0), 0)),
    };

    let miss = cfg.missing_rate;
    macro_rules! maybe_drop {
        ($($f:ident),*) => { $( if rng.random::<f64>() < miss { case.$f = None; } )* };
    }
    maybe_drop!(
        etiv, nwbv, gender, handedness, education, ses, hippocampal_volume, amygdala_volume,
        ventricular_volume, temporal_thickness, wmh_load, apoe_e4_count, moca, gds
    );

    let labels = if rng.random::<f64>() < cfg.label_noise {
        random_labels(rng, c.labels.len())
    } else {
        c.labels
    };
    (case, labels)
}

/// Generate `cfg.n` labelled records, deterministically from `seed`.
///
/// Label cardinalities follow `cfg.mix` exactly up to rounding.
pub fn generate_synthetic(cfg: &GeneratorConfig, seed: u64) -> Result<Vec<CaseRecord>, GeneratorError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_class = apportion(cfg.n, &cfg.mix);

    let mut raw: Vec<(PatientCase, LabelSet)> = Vec::with_capacity(cfg.n);
    for (ci, &count) in per_class.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let k = ci + 1;
        let n_cohorts = count.div_ceil(cfg.cohort_size);
        let cohorts: Vec<Cohort> = (0..n_cohorts)
            .map(|_| {
                let labels = random_labels(&mut rng, k);
                make_cohort(&mut rng, labels, cfg.neighbor_signal)
            })
            .collect();
        for i in 0..count {
            raw.push(make_record(&mut rng, &cohorts[i % n_cohorts], cfg));
        }
    }
    raw.shuffle(&mut rng);
    let width = cfg.n.to_string().len().max(5);
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(i, (mut case, labels))| {
            case.id = format!("syn-{:0width$}", i + 1);
            CaseRecord::new(case, labels)
        })
        .collect())
}
