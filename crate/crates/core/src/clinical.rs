//! Per-patient clinical covariates and their fixed-length numeric encoding.
//!
//! Encoded layout (10 values, or 11 with survival):
//!
//! | index | feature |
//! |-------|---------|
//! | 0 | age at surgery, z-scored with training-fold statistics |
//! | 1, 2 | sex: M, F |
//! | 3..=6 | IDH: wildtype, IDH1 negative, mutant, missing |
//! | 7..=9 | MGMT: methylated, unmethylated, missing |
//! | 10 | survival in weeks, z-scored (only when enabled) |

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLINICAL_DIM: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    M,
    F,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Idh {
    Wildtype,
    Idh1Negative,
    Mutant,
    Missing,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mgmt {
    Methylated,
    Unmethylated,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalVector {
    pub age_at_surgery: f64,
    pub sex: Sex,
    pub idh: Idh,
    pub mgmt: Mgmt,
    pub survival_weeks: Option<f64>,
}

/// Mean and standard deviation of a z-scored feature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZStats {
    pub mean: f64,
    pub std: f64,
}

impl ZStats {
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Self {
                mean: 0.0,
                std: 1.0,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self {
            mean,
            std: if std > 0.0 { std } else { 1.0 },
        }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// Encoding parameters fitted on one training fold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClinicalEncoder {
    pub age: ZStats,
    pub survival: Option<ZStats>,
}

impl ClinicalEncoder {
    pub fn fit<'a>(
        train: impl IntoIterator<Item = &'a ClinicalVector>,
        include_survival: bool,
    ) -> Self {
        let rows: Vec<&ClinicalVector> = train.into_iter().collect();
        Self {
            age: ZStats::fit(rows.iter().map(|c| c.age_at_surgery)),
            survival: include_survival
                .then(|| ZStats::fit(rows.iter().filter_map(|c| c.survival_weeks))),
        }
    }

    pub fn dim(&self) -> usize {
        CLINICAL_DIM + usize::from(self.survival.is_some())
    }

    pub fn encode(&self, c: &ClinicalVector) -> Vec<f64> {
        let mut v = vec![0.0; self.dim()];
        v[0] = self.age.apply(c.age_at_surgery);
        v[match c.sex {
            Sex::M => 1,
            Sex::F => 2,
        }] = 1.0;
        v[match c.idh {
            Idh::Wildtype => 3,
            Idh::Idh1Negative => 4,
            Idh::Mutant => 5,
            Idh::Missing => 6,
        }] = 1.0;
        v[match c.mgmt {
            Mgmt::Methylated => 7,
            Mgmt::Unmethylated => 8,
            Mgmt::Missing => 9,
        }] = 1.0;
        if let Some(s) = self.survival {
            v[10] = c.survival_weeks.map(|w| s.apply(w)).unwrap_or(0.0);
        }
        v
    }
}

fn is_na(t: &str) -> bool {
    matches!(
        t,
        "" | "na" | "n/a" | "nan" | "none" | "missing" | "unknown"
    )
}

fn parse_sex(s: &str) -> Option<Sex> {
    match s.trim().to_ascii_lowercase().as_str() {
        "m" | "male" => Some(Sex::M),
        "f" | "female" => Some(Sex::F),
        _ => None,
    }
}

fn parse_idh(s: &str) -> Option<Idh> {
    let t = s.trim().to_ascii_lowercase().replace(['_', '-'], " ");
    Some(match t.as_str() {
        "wildtype" | "wild type" | "wt" => Idh::Wildtype,
        "idh1 negative" | "negative" => Idh::Idh1Negative,
        "mutant" | "mutated" | "mut" => Idh::Mutant,
        t if is_na(t) => Idh::Missing,
        _ => return None,
    })
}

fn parse_mgmt(s: &str) -> Option<Mgmt> {
    let t = s.trim().to_ascii_lowercase().replace(['_', '-'], " ");
    Some(match t.as_str() {
        "methylated" => Mgmt::Methylated,
        "unmethylated" | "not methylated" => Mgmt::Unmethylated,
        t if is_na(t) => Mgmt::Missing,
        _ => return None,
    })
}

/// Read `patient, age, sex, idh, mgmt[, survival_weeks]`.
pub fn read_clinical_table(path: &Path) -> Result<BTreeMap<String, ClinicalVector>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let need = |name: &str| {
        col(name).ok_or_else(|| Error::Metadata {
            path: path.into(),
            msg: format!("missing column `{name}`"),
        })
    };
    let (cp, ca, cs, ci, cm) = (
        need("patient")?,
        need("age")?,
        need("sex")?,
        need("idh")?,
        need("mgmt")?,
    );
    let csurv = col("survival_weeks");
    let mut out = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let bad = |msg: String| Error::Metadata {
            path: path.into(),
            msg: format!("line {}: {msg}", i + 2),
        };
        let g = |c: usize| row.get(c).unwrap_or("");
        let age: f64 = g(ca).parse().map_err(|_| bad(format!("age `{}`", g(ca))))?;
        let sex = parse_sex(g(cs)).ok_or_else(|| bad(format!("sex `{}`", g(cs))))?;
        let idh = parse_idh(g(ci)).ok_or_else(|| bad(format!("IDH `{}`", g(ci))))?;
        let mgmt = parse_mgmt(g(cm)).ok_or_else(|| bad(format!("MGMT `{}`", g(cm))))?;
        let survival_weeks = csurv.and_then(|c| g(c).parse().ok());
        out.insert(
            g(cp).to_string(),
            ClinicalVector {
                age_at_surgery: age,
                sex,
                idh,
                mgmt,
                survival_weeks,
            },
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_missing_categories_encode_to_fixed_layout() {
        let c = ClinicalVector {
            age_at_surgery: 60.0,
            sex: Sex::F,
            idh: Idh::Missing,
            mgmt: Mgmt::Missing,
            survival_weeks: None,
        };
        let enc = ClinicalEncoder {
            age: ZStats {
                mean: 50.0,
                std: 10.0,
            },
            survival: None,
        };
        assert_eq!(
            enc.encode(&c),
            vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0]
        );
        assert_eq!(enc.dim(), CLINICAL_DIM);
    }

    #[test]
    fn survival_is_opt_in() {
        let rows = [ClinicalVector {
            age_at_surgery: 50.0,
            sex: Sex::M,
            idh: Idh::Wildtype,
            mgmt: Mgmt::Methylated,
            survival_weeks: Some(80.0),
        }];
        assert_eq!(ClinicalEncoder::fit(&rows, false).dim(), 10);
        assert_eq!(ClinicalEncoder::fit(&rows, true).dim(), 11);
    }

    #[test]
    fn category_spellings() {
        assert_eq!(parse_idh("IDH1 negative"), Some(Idh::Idh1Negative));
        assert_eq!(parse_idh("NA"), Some(Idh::Missing));
        assert_eq!(parse_mgmt("not methylated"), Some(Mgmt::Unmethylated));
        assert_eq!(parse_mgmt("maybe"), None);
    }
}
