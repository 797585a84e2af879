//! Volume loading, cohort construction and assembled-input caching for a study.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use ndarray::{Array3, Array4};

use crate::clinical::{read_clinical_table, ClinicalEncoder, ClinicalVector};
use crate::cohort::{
    filter_timepoints, index_dataset, pair_consecutive, DatasetIndex, FilterOutcome, Modality,
    ModalitySet, StudySample, TimepointRecord,
};
use crate::error::{Error, Result};
use crate::models::{assemble_input, InputSpec};
use crate::preprocess::{resize_to, Pipeline};
use crate::sampling::{make_folds, FoldPlan};
use crate::seeds::derive_seed;
use crate::train::Dataset;
use crate::volume::VolumeGrid;

use super::config::StudyConfig;

/// Where voxels come from: the preprocessing chain (cached) or the files as-is.
pub enum VolumeSource {
    Pipeline(Box<Pipeline>),
    Direct,
}

/// Loads modality volumes onto the study grid, z-scored, memoized per path.
pub struct VolumeLoader {
    pub grid: [usize; 3],
    pub source: VolumeSource,
    cache: Mutex<HashMap<PathBuf, Arc<Array3<f32>>>>,
}

fn zscore(v: &mut Array3<f64>) {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    v.mapv_inplace(|x| if sd > 0.0 { (x - mean) / sd } else { 0.0 });
}

impl VolumeLoader {
    pub fn new(grid: [usize; 3], source: VolumeSource) -> Self {
        Self {
            grid,
            source,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn load(&self, path: &Path) -> Result<Arc<Array3<f32>>> {
        if let Some(v) = self.cache.lock().unwrap().get(path) {
            return Ok(v.clone());
        }
        let v = match &self.source {
            VolumeSource::Pipeline(p) => {
                let (v, _) = p.process(path)?;
                let v = v.voxels.mapv(|x| x as f64);
                if v.shape() == self.grid {
                    v
                } else {
                    resize_to(&v, self.grid)
                }
            }
            VolumeSource::Direct => {
                let raw = VolumeGrid::<f32>::read_nifti(path)?;
                let v = raw.voxels.mapv(|x| x as f64);
                let mut v = if v.shape() == self.grid {
                    v
                } else {
                    resize_to(&v, self.grid)
                };
                zscore(&mut v);
                v
            }
        };
        let v = Arc::new(v.mapv(|x| x as f32));
        self.cache
            .lock()
            .unwrap()
            .insert(path.to_path_buf(), v.clone());
        Ok(v)
    }

    pub fn load_modality(&self, r: &TimepointRecord, m: Modality) -> Result<Array3<f32>> {
        let path = r.image_paths.get(&m).ok_or_else(|| Error::Sample {
            sample: r.key(),
            msg: format!("no {m} image"),
        })?;
        Ok((*self.load(path)?).clone())
    }
}

/// Indexed dataset, filtered timepoints, clinical table and caches.
pub struct StudyData {
    pub index: DatasetIndex,
    pub filtered: FilterOutcome,
    pub clinical: Option<BTreeMap<String, ClinicalVector>>,
    pub loader: VolumeLoader,
    pub n_folds: usize,
    pub seed: u64,
    pub group_by_patient: bool,
    pub include_survival: bool,
    inputs: Mutex<HashMap<(String, String, bool), Arc<Array4<f32>>>>,
}

impl StudyData {
    pub fn open(cfg: &StudyConfig) -> Result<Self> {
        let index = index_dataset(&cfg.data.root, &cfg.data.metadata, &cfg.data.schema)?;
        for issue in &index.row_errors {
            log::warn!("metadata line {}: {}", issue.line, issue.msg);
        }
        let filtered = filter_timepoints(
            &index.records,
            &index.known_surgery_weeks(),
            cfg.data.min_gap_weeks,
        );
        let clinical = match &cfg.data.clinical {
            Some(p) => Some(read_clinical_table(p)?),
            None => None,
        };
        let source = if cfg.preprocess.enabled {
            let template_path = cfg.preprocess.template.as_ref().ok_or_else(|| {
                Error::Config("preprocess.enabled needs preprocess.template".into())
            })?;
            let template = VolumeGrid::<f32>::read_nifti(template_path)?;
            VolumeSource::Pipeline(Box::new(Pipeline::new(
                template,
                cfg.preprocess.params.clone(),
                cfg.preprocess.cache_dir.clone(),
            )?))
        } else {
            VolumeSource::Direct
        };
        Ok(Self {
            index,
            filtered,
            clinical,
            loader: VolumeLoader::new(cfg.data.grid, source),
            n_folds: cfg.study.n_folds,
            seed: cfg.study.seed,
            group_by_patient: cfg.study.group_by_patient,
            include_survival: cfg.study.include_survival,
            inputs: Mutex::new(HashMap::new()),
        })
    }

    pub fn samples(&self, mods: &ModalitySet) -> Vec<StudySample> {
        pair_consecutive(&self.filtered.kept, mods)
    }

    /// Fold plan of the cohort usable with `mods`; identical for every call.
    pub fn folds(&self, mods: &ModalitySet) -> Result<FoldPlan> {
        let samples = self.samples(mods);
        make_folds(
            &samples,
            self.n_folds,
            fold_seed(self.seed, mods),
            self.group_by_patient,
        )
    }

    pub fn input(&self, s: &StudySample, spec: &InputSpec) -> Result<Arc<Array4<f32>>> {
        let key = (s.id(), spec.modalities.key(), spec.use_subtraction);
        if let Some(v) = self.inputs.lock().unwrap().get(&key) {
            return Ok(v.clone());
        }
        let x = Arc::new(assemble_input(s, spec, &mut |r, m| {
            self.loader.load_modality(r, m)
        })?);
        self.inputs.lock().unwrap().insert(key, x.clone());
        Ok(x)
    }

    /// In-memory dataset of `idx`; clinical rows use an encoder fitted on `fit_on`.
    pub fn dataset(
        &self,
        samples: &[StudySample],
        idx: &[usize],
        spec: &InputSpec,
        encoder: Option<&ClinicalEncoder>,
    ) -> Result<Dataset<f32>> {
        let mut ds = Dataset {
            ids: Vec::with_capacity(idx.len()),
            inputs: Vec::with_capacity(idx.len()),
            labels: Vec::with_capacity(idx.len()),
            clinical: encoder.map(|_| Vec::with_capacity(idx.len())),
        };
        for &i in idx {
            let s = &samples[i];
            ds.ids.push(s.id());
            ds.inputs.push(self.input(s, spec)?);
            ds.labels.push(s.class_index());
            if let (Some(enc), Some(rows)) = (encoder, ds.clinical.as_mut()) {
                let c = self.clinical_row(s)?;
                rows.push(enc.encode(c).iter().map(|&v| v as f32).collect());
            }
        }
        Ok(ds)
    }

    fn clinical_row(&self, s: &StudySample) -> Result<&ClinicalVector> {
        let table = self
            .clinical
            .as_ref()
            .ok_or_else(|| Error::Config("clinical option needs data.clinical".into()))?;
        table.get(&s.patient_id).ok_or_else(|| Error::Sample {
            sample: s.id(),
            msg: "patient missing from clinical table".into(),
        })
    }

    /// Encoder fitted on the training samples' patients.
    pub fn clinical_encoder(
        &self,
        samples: &[StudySample],
        train_idx: &[usize],
    ) -> Result<ClinicalEncoder> {
        let rows = train_idx
            .iter()
            .map(|&i| self.clinical_row(&samples[i]))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClinicalEncoder::fit(rows, self.include_survival))
    }
}

pub fn fold_seed(seed: u64, mods: &ModalitySet) -> u64 {
    derive_seed(seed, &["folds", &mods.key()])
}
