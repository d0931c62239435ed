//! Patient case schema, label types and field validation.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

/// Alzheimer's subtype. Integer codes 0–4 are stable and used on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubtypeLabel {
    EarlyOnset,
    LateOnset,
    Familial,
    Sporadic,
    Atypical,
}

impl SubtypeLabel {
    pub const ALL: [SubtypeLabel; 5] = [
        SubtypeLabel::EarlyOnset,
        SubtypeLabel::LateOnset,
        SubtypeLabel::Familial,
        SubtypeLabel::Sporadic,
        SubtypeLabel::Atypical,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn display_name(self) -> &'static str {
        match self {
            SubtypeLabel::EarlyOnset => "Early-Onset Alzheimer's Disease",
            SubtypeLabel::LateOnset => "Late-Onset Alzheimer's Disease",
            SubtypeLabel::Familial => "Familial Alzheimer's Disease",
            SubtypeLabel::Sporadic => "Sporadic Alzheimer's Disease",
            SubtypeLabel::Atypical => "Atypical Alzheimer's Disease",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            SubtypeLabel::EarlyOnset => "early_onset",
            SubtypeLabel::LateOnset => "late_onset",
            SubtypeLabel::Familial => "familial",
            SubtypeLabel::Sporadic => "sporadic",
            SubtypeLabel::Atypical => "atypical",
        }
    }
}

impl fmt::Display for SubtypeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

/// Size class of a gold label set, used to bucket evaluation results.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cardinality {
    Single,
    Double,
    Triple,
}

impl Cardinality {
    pub const ALL: [Cardinality; 3] = [Cardinality::Single, Cardinality::Double, Cardinality::Triple];

    pub fn size(self) -> usize {
        match self {
            Cardinality::Single => 1,
            Cardinality::Double => 2,
            Cardinality::Triple => 3,
        }
    }
}

/// A set of subtype labels, stored as a 5-bit mask.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LabelSet(u8);

impl LabelSet {
    pub const EMPTY: LabelSet = LabelSet(0);

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits < 32).then_some(LabelSet(bits))
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn insert(&mut self, label: SubtypeLabel) {
        self.0 |= 1 << label.code();
    }

    pub fn contains(self, label: SubtypeLabel) -> bool {
        self.0 & (1 << label.code()) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn iter(self) -> impl Iterator<Item = SubtypeLabel> {
        SubtypeLabel::ALL.into_iter().filter(move |l| self.contains(*l))
    }

    pub fn intersection(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 & other.0)
    }

    pub fn difference(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 & !other.0)
    }

    pub fn union(self, other: LabelSet) -> LabelSet {
        LabelSet(self.0 | other.0)
    }

    /// Defined only for sets of size 1–3.
    pub fn cardinality(self) -> Option<Cardinality> {
        match self.len() {
            1 => Some(Cardinality::Single),
            2 => Some(Cardinality::Double),
            3 => Some(Cardinality::Triple),
            _ => None,
        }
    }

    pub fn codes(self) -> Vec<u8> {
        self.iter().map(SubtypeLabel::code).collect()
    }
}

impl FromIterator<SubtypeLabel> for LabelSet {
    fn from_iter<I: IntoIterator<Item = SubtypeLabel>>(iter: I) -> Self {
        let mut s = LabelSet::EMPTY;
        for l in iter {
            s.insert(l);
        }
        s
    }
}

impl Serialize for LabelSet {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.codes().serialize(s)
    }
}

impl<'de> Deserialize<'de> for LabelSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let codes = Vec::<u8>::deserialize(d)?;
        let mut seen = BTreeSet::new();
        let mut set = LabelSet::EMPTY;
        for c in codes {
            let label = SubtypeLabel::from_code(c)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown label code {c}")))?;
            if !seen.insert(c) {
                return Err(serde::de::Error::custom(format!("duplicate label code {c}")));
            }
            set.insert(label);
        }
        Ok(set)
    }
}

/// Clinical Dementia Rating level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Cdr {
    Normal,
    Questionable,
    Mild,
    Moderate,
    Severe,
}

impl Cdr {
    pub const ALL: [Cdr; 5] = [Cdr::Normal, Cdr::Questionable, Cdr::Mild, Cdr::Moderate, Cdr::Severe];

    pub fn value(self) -> f64 {
        match self {
            Cdr::Normal => 0.0,
            Cdr::Questionable => 0.5,
            Cdr::Mild => 1.0,
            Cdr::Moderate => 2.0,
            Cdr::Severe => 3.0,
        }
    }

    pub fn from_value(v: f64) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.value() == v)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gender {
    Female,
    Male,
    Other,
}

impl Gender {
    pub const ALL: [Gender; 3] = [Gender::Female, Gender::Male, Gender::Other];

    pub fn token(self) -> &'static str {
        match self {
            Gender::Female => "female",
            Gender::Male => "male",
            Gender::Other => "other",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "female" | "f" => Some(Gender::Female),
            "male" | "m" => Some(Gender::Male),
            "other" | "unknown" | "u" | "o" => Some(Gender::Other),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Handedness {
    Left,
    Right,
    Ambi,
}

impl Handedness {
    pub const ALL: [Handedness; 3] = [Handedness::Left, Handedness::Right, Handedness::Ambi];

    pub fn token(self) -> &'static str {
        match self {
            Handedness::Left => "left",
            Handedness::Right => "right",
            Handedness::Ambi => "ambi",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" => Some(Handedness::Left),
            "right" | "r" => Some(Handedness::Right),
            "ambi" | "ambidextrous" | "unknown" | "a" | "u" => Some(Handedness::Ambi),
            _ => None,
        }
    }
}

/// One subject's demographic, cognitive and volumetric features.
///
/// Only `id`, `mmse`, `cdr` and `age` are required; every other field is
/// optional and `None` means "not recorded".
#[derive(Debug, Clone, PartialEq)]
pub struct PatientCase {
    pub id: String,
    pub mmse: f64,
    pub cdr: Cdr,
    pub age: f64,
    pub etiv: Option<f64>,
    pub nwbv: Option<f64>,
    pub gender: Option<Gender>,
    pub handedness: Option<Handedness>,
    pub education: Option<f64>,
    pub ses: Option<u8>,
    pub hippocampal_volume: Option<f64>,
    pub amygdala_volume: Option<f64>,
    pub ventricular_volume: Option<f64>,
    pub temporal_thickness: Option<f64>,
    pub wmh_load: Option<f64>,
    pub apoe_e4_count: Option<u8>,
    pub moca: Option<f64>,
    pub gds: Option<f64>,
}

/// Numeric (z-scored) fields, alphabetical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NumericField {
    Age,
    AmygdalaVolume,
    ApoeE4Count,
    Education,
    Etiv,
    Gds,
    HippocampalVolume,
    Mmse,
    Moca,
    Nwbv,
    TemporalThickness,
    VentricularVolume,
    WmhLoad,
}

impl NumericField {
    pub const ALL: [NumericField; 13] = [
        NumericField::Age,
        NumericField::AmygdalaVolume,
        NumericField::ApoeE4Count,
        NumericField::Education,
        NumericField::Etiv,
        NumericField::Gds,
        NumericField::HippocampalVolume,
        NumericField::Mmse,
        NumericField::Moca,
        NumericField::Nwbv,
        NumericField::TemporalThickness,
        NumericField::VentricularVolume,
        NumericField::WmhLoad,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NumericField::Age => "age",
            NumericField::AmygdalaVolume => "amygdala_volume",
            NumericField::ApoeE4Count => "apoe_e4_count",
            NumericField::Education => "education",
            NumericField::Etiv => "etiv",
            NumericField::Gds => "gds",
            NumericField::HippocampalVolume => "hippocampal_volume",
            NumericField::Mmse => "mmse",
            NumericField::Moca => "moca",
            NumericField::Nwbv => "nwbv",
            NumericField::TemporalThickness => "temporal_thickness",
            NumericField::VentricularVolume => "ventricular_volume",
            NumericField::WmhLoad => "wmh_load",
        }
    }

    pub fn required(self) -> bool {
        matches!(self, NumericField::Age | NumericField::Mmse)
    }

    pub fn range(self) -> Range {
        use NumericField::*;
        match self {
            Mmse | Moca => Range::closed(0.0, 30.0),
            Gds => Range::closed(0.0, 15.0),
            Nwbv => Range::open(0.0, 1.0),
            Age => Range::closed(18.0, 120.0),
            Etiv => Range::positive(),
            Education => Range::closed(0.0, 30.0),
            ApoeE4Count => Range::closed(0.0, 2.0),
            AmygdalaVolume | HippocampalVolume | VentricularVolume | TemporalThickness | WmhLoad => {
                Range::non_negative()
            }
        }
    }

    pub fn get(self, c: &PatientCase) -> Option<f64> {
        use NumericField::*;
        match self {
            Age => Some(c.age),
            AmygdalaVolume => c.amygdala_volume,
            ApoeE4Count => c.apoe_e4_count.map(f64::from),
            Education => c.education,
            Etiv => c.etiv,
            Gds => c.gds,
            HippocampalVolume => c.hippocampal_volume,
            Mmse => Some(c.mmse),
            Moca => c.moca,
            Nwbv => c.nwbv,
            TemporalThickness => c.temporal_thickness,
            VentricularVolume => c.ventricular_volume,
            WmhLoad => c.wmh_load,
        }
    }
}

/// Allowed interval for a numeric field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
    pub lo_open: bool,
    pub hi_open: bool,
}

impl Range {
    const fn closed(lo: f64, hi: f64) -> Self {
        Range { lo, hi, lo_open: false, hi_open: false }
    }
    const fn open(lo: f64, hi: f64) -> Self {
        Range { lo, hi, lo_open: true, hi_open: true }
    }
    const fn positive() -> Self {
        Range { lo: 0.0, hi: f64::INFINITY, lo_open: true, hi_open: true }
    }
    const fn non_negative() -> Self {
        Range { lo: 0.0, hi: f64::INFINITY, lo_open: false, hi_open: true }
    }

    pub fn contains(&self, v: f64) -> bool {
        if !v.is_finite() {
            return false;
        }
        let lo_ok = if self.lo_open { v > self.lo } else { v >= self.lo };
        let hi_ok = if self.hi_open { v < self.hi } else { v <= self.hi };
        lo_ok && hi_ok
    }
}

impl fmt::Display for Range {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let l = if self.lo_open { '(' } else { '[' };
        let r = if self.hi_open { ')' } else { ']' };
        let hi = if self.hi.is_infinite() { "inf".to_string() } else { fmt_num(self.hi) };
        write!(f, "{l}{},{hi}{r}", fmt_num(self.lo))
    }
}

/// Shortest round-trip formatting, integers without a trailing `.0`.
pub fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// A single field-level validation failure.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FieldError {
    #[error("{field}={value} outside {bound}")]
    RangeViolation { field: String, value: f64, bound: String },
    #[error("missing required field {field}")]
    MissingRequired { field: String },
    #[error("unknown {field} category {token:?}")]
    UnknownCategory { field: String, token: String },
    #[error("field {field} has the wrong type")]
    InvalidType { field: String },
    #[error("unknown field {field}")]
    UnknownField { field: String },
}

impl FieldError {
    pub fn code(&self) -> &'static str {
        match self {
            FieldError::RangeViolation { .. } => "RangeViolation",
            FieldError::MissingRequired { .. } => "MissingRequired",
            FieldError::UnknownCategory { .. } => "UnknownCategory",
            FieldError::InvalidType { .. } => "InvalidType",
            FieldError::UnknownField { .. } => "UnknownField",
        }
    }

    pub fn field(&self) -> &str {
        match self {
            FieldError::RangeViolation { field, .. }
            | FieldError::MissingRequired { field }
            | FieldError::UnknownCategory { field, .. }
            | FieldError::InvalidType { field }
            | FieldError::UnknownField { field } => field,
        }
    }

    /// Machine-readable form used in HTTP error bodies.
    pub fn to_json(&self) -> Value {
        let mut m = Map::new();
        m.insert("field".into(), Value::from(self.field()));
        m.insert("code".into(), Value::from(self.code()));
        match self {
            FieldError::RangeViolation { value, bound, .. } => {
                m.insert("value".into(), Number::from_f64(*value).map_or(Value::Null, Value::Number));
                m.insert("bound".into(), Value::from(bound.as_str()));
            }
            FieldError::UnknownCategory { token, .. } => {
                m.insert("token".into(), Value::from(token.as_str()));
            }
            _ => {}
        }
        Value::Object(m)
    }
}

/// All field errors found in one raw case, in field order.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("invalid case: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct ValidationErrors(pub Vec<FieldError>);

impl ValidationErrors {
    pub fn first(&self) -> &FieldError {
        &self.0[0]
    }
}

/// Field names accepted by [`validate_case`].
pub const CASE_FIELDS: [&str; 18] = [
    "age",
    "amygdala_volume",
    "apoe_e4_count",
    "cdr",
    "education",
    "etiv",
    "gds",
    "gender",
    "handedness",
    "hippocampal_volume",
    "id",
    "mmse",
    "moca",
    "nwbv",
    "ses",
    "temporal_thickness",
    "ventricular_volume",
    "wmh_load",
];

fn as_number(field: &str, v: &Value, errs: &mut Vec<FieldError>) -> Option<f64> {
    let n = match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    };
    if n.is_none() {
        errs.push(FieldError::InvalidType { field: field.into() });
    }
    n
}

fn take_numeric(
    raw: &Map<String, Value>,
    f: NumericField,
    errs: &mut Vec<FieldError>,
) -> Option<f64> {
    let v = raw.get(f.name()).filter(|v| !v.is_null())?;
    let x = as_number(f.name(), v, errs)?;
    let range = f.range();
    if !range.contains(x) {
        errs.push(FieldError::RangeViolation {
            field: f.name().into(),
            value: x,
            bound: range.to_string(),
        });
        return None;
    }
    Some(x)
}

fn take_integer(
    raw: &Map<String, Value>,
    field: &str,
    lo: u8,
    hi: u8,
    errs: &mut Vec<FieldError>,
) -> Option<u8> {
    let v = raw.get(field).filter(|v| !v.is_null())?;
    let x = as_number(field, v, errs)?;
    if x.fract() != 0.0 {
        errs.push(FieldError::UnknownCategory { field: field.into(), token: fmt_num(x) });
        return None;
    }
    if x < f64::from(lo) || x > f64::from(hi) {
        errs.push(FieldError::RangeViolation {
            field: field.into(),
            value: x,
            bound: format!("[{lo},{hi}]"),
        });
        return None;
    }
    Some(x as u8)
}

fn take_token<T>(
    raw: &Map<String, Value>,
    field: &str,
    parse: impl Fn(&str) -> Option<T>,
    errs: &mut Vec<FieldError>,
) -> Option<T> {
    let v = raw.get(field).filter(|v| !v.is_null())?;
    match v {
        Value::String(s) => {
            let parsed = parse(s);
            if parsed.is_none() {
                errs.push(FieldError::UnknownCategory { field: field.into(), token: s.clone() });
            }
            parsed
        }
        _ => {
            errs.push(FieldError::InvalidType { field: field.into() });
            None
        }
    }
}

/// Validate a raw field map into a [`PatientCase`].
///
/// Absent or `null` optional fields become `None`. Every problem found is
/// reported, not just the first.
pub fn validate_case(raw: &Map<String, Value>) -> Result<PatientCase, ValidationErrors> {
    let mut errs = Vec::new();

    for key in raw.keys() {
        if !CASE_FIELDS.contains(&key.as_str()) {
            errs.push(FieldError::UnknownField { field: key.clone() });
        }
    }

    let id = match raw.get("id") {
        None | Some(Value::Null) => {
            errs.push(FieldError::MissingRequired { field: "id".into() });
            None
        }
        Some(Value::String(s)) if !s.trim().is_empty() => Some(s.clone()),
        Some(Value::Number(n)) => Some(n.to_string()),
        Some(_) => {
            errs.push(FieldError::InvalidType { field: "id".into() });
            None
        }
    };

    let mut numeric = [None; 13];
    for (slot, f) in numeric.iter_mut().zip(NumericField::ALL) {
        if f == NumericField::ApoeE4Count {
            continue;
        }
        if f.required() && raw.get(f.name()).is_none_or(Value::is_null) {
            errs.push(FieldError::MissingRequired { field: f.name().into() });
            continue;
        }
        *slot = take_numeric(raw, f, &mut errs);
    }
    let get = |f: NumericField| numeric[NumericField::ALL.iter().position(|x| *x == f).unwrap()];

    let cdr = match raw.get("cdr").filter(|v| !v.is_null()) {
        None => {
            errs.push(FieldError::MissingRequired { field: "cdr".into() });
            None
        }
        Some(v) => as_number("cdr", v, &mut errs).and_then(|x| {
            let c = Cdr::from_value(x);
            if c.is_none() {
                errs.push(FieldError::UnknownCategory { field: "cdr".into(), token: fmt_num(x) });
            }
            c
        }),
    };

    let gender = take_token(raw, "gender", Gender::parse, &mut errs);
    let handedness = take_token(raw, "handedness", Handedness::parse, &mut errs);
    let ses = take_integer(raw, "ses", 1, 5, &mut errs);
    let apoe_e4_count = take_integer(raw, "apoe_e4_count", 0, 2, &mut errs);

    if !errs.is_empty() {
        errs.sort_by(|a, b| a.field().cmp(b.field()));
        return Err(ValidationErrors(errs));
    }

    Ok(PatientCase {
        id: id.expect("checked"),
        mmse: get(NumericField::Mmse).expect("checked"),
        cdr: cdr.expect("checked"),
        age: get(NumericField::Age).expect("checked"),
        etiv: get(NumericField::Etiv),
        nwbv: get(NumericField::Nwbv),
        gender,
        handedness,
        education: get(NumericField::Education),
        ses,
        hippocampal_volume: get(NumericField::HippocampalVolume),
        amygdala_volume: get(NumericField::AmygdalaVolume),
        ventricular_volume: get(NumericField::VentricularVolume),
        temporal_thickness: get(NumericField::TemporalThickness),
        wmh_load: get(NumericField::WmhLoad),
        apoe_e4_count,
        moca: get(NumericField::Moca),
        gds: get(NumericField::Gds),
    })
}

fn num(v: f64) -> Value {
    Number::from_f64(v).map_or(Value::Null, Value::Number)
}

impl PatientCase {
    /// Serialize to a field map; absent fields are omitted.
    pub fn to_field_map(&self) -> Map<String, Value> {
        let mut m = Map::new();
        m.insert("id".into(), Value::from(self.id.as_str()));
        for f in NumericField::ALL {
            if f == NumericField::ApoeE4Count {
                continue;
            }
            if let Some(v) = f.get(self) {
                m.insert(f.name().into(), num(v));
            }
        }
        m.insert("cdr".into(), num(self.cdr.value()));
        if let Some(g) = self.gender {
            m.insert("gender".into(), Value::from(g.token()));
        }
        if let Some(h) = self.handedness {
            m.insert("handedness".into(), Value::from(h.token()));
        }
        if let Some(s) = self.ses {
            m.insert("ses".into(), Value::from(s));
        }
        if let Some(a) = self.apoe_e4_count {
            m.insert("apoe_e4_count".into(), Value::from(a));
        }
        m
    }

    /// Minimal case with only the required fields.
    pub fn minimal(id: impl Into<String>, mmse: f64, cdr: Cdr, age: f64) -> Self {
        PatientCase {
            id: id.into(),
            mmse,
            cdr,
            age,
            etiv: None,
            nwbv: None,
            gender: None,
            handedness: None,
            education: None,
            ses: None,
            hippocampal_volume: None,
            amygdala_volume: None,
            ventricular_volume: None,
            temporal_thickness: None,
            wmh_load: None,
            apoe_e4_count: None,
            moca: None,
            gds: None,
        }
    }
}

impl Serialize for PatientCase {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        self.to_field_map().serialize(s)
    }
}

impl<'de> Deserialize<'de> for PatientCase {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let map = Map::deserialize(d)?;
        validate_case(&map).map_err(serde::de::Error::custom)
    }
}
