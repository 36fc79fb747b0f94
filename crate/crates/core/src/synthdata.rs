//! Synthetic timestamped slice sequences.
//!
//! Each organ appears over a window of slice positions following a Gaussian
//! presence curve. Organs sharing a texture class are rendered identically, so
//! in the default configuration the first and third organ can only be told
//! apart by slice position.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::prompt::Modality;
use crate::tensor::{read_checkpoint, write_checkpoint, Tensor};

/// Gaussian weight below which an organ is absent from a slice.
pub const PRESENCE_THRESHOLD: f64 = 0.1;
pub const MIN_PATIENTS: usize = 10;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganSpec {
    pub name: String,
    pub mu: f64,
    pub sigma: f64,
    pub texture_class: usize,
    /// Peak radius as a fraction of the image width.
    pub base_radius: f64,
}

impl OrganSpec {
    pub fn new(name: &str, mu: f64, sigma: f64, texture_class: usize, base_radius: f64) -> Self {
        Self {
            name: name.into(),
            mu,
            sigma,
            texture_class,
            base_radius,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu > 0.0 && self.mu < 1.0) {
            return Err(Error::Config(format!(
                "{}: mu {} outside (0, 1)",
                self.name, self.mu
            )));
        }
        if !(self.sigma > 0.0 && self.sigma <= 0.3) {
            return Err(Error::Config(format!(
                "{}: sigma {} outside (0, 0.3]",
                self.name, self.sigma
            )));
        }
        if !(self.base_radius > 0.0 && self.base_radius <= 0.5) {
            return Err(Error::Config(format!(
                "{}: base_radius {} outside (0, 0.5]",
                self.name, self.base_radius
            )));
        }
        Ok(())
    }
}

/// Three organs ordered by mean position; the first and last share a texture.
pub fn default_organs() -> Vec<OrganSpec> {
    vec![
        OrganSpec::new("stomach", 0.3, 0.1, 0, 0.18),
        OrganSpec::new("small bowel", 0.5, 0.1, 1, 0.18),
        OrganSpec::new("large bowel", 0.7, 0.1, 0, 0.18),
    ]
}

/// `exp(−(i/N − μ)²/(2σ²))`.
pub fn presence_weight(spec: &OrganSpec, i: usize, n: usize) -> f64 {
    let x = i as f64 / n as f64 - spec.mu;
    (-x * x / (2.0 * spec.sigma * spec.sigma)).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub organs: Vec<OrganSpec>,
    pub patients: usize,
    pub slices: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub background: f64,
    /// Mean intensity of each texture class.
    pub texture_levels: Vec<f64>,
    pub modality: Modality,
    pub data_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            organs: default_organs(),
            patients: 40,
            slices: 16,
            image_size: 32,
            noise_std: 0.05,
            background: 0.1,
            texture_levels: vec![0.5, 0.85],
            modality: Modality::Mri,
            data_seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.organs.is_empty() {
            return Err(Error::Config("at least one organ is required".into()));
        }
        for o in &self.organs {
            o.validate()?;
            if o.texture_class >= self.texture_levels.len() {
                return Err(Error::Config(format!(
                    "{}: texture_class {} has no level",
                    o.name, o.texture_class
                )));
            }
        }
        if self.patients < MIN_PATIENTS {
            return Err(Error::Config(format!(
                "{} patients cannot be split 7:1:2 (need at least {MIN_PATIENTS})",
                self.patients
            )));
        }
        if self.slices == 0 {
            return Err(Error::Config("slices must be positive".into()));
        }
        if self.image_size < 4 || !self.image_size.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of 4",
                self.image_size
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be non-negative".into()));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.organs.len()
    }
}

/// Independent generator for one `(patient, stream)` pair under a master seed.
/// Stream 0 is the patient's geometry; stream `i` renders slice `i`.
pub fn patient_rng(seed: u64, patient: usize, stream: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((patient as u64) << 32) | stream as u64);
    rng
}

/// Ellipse placement of every organ for one patient, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientGeometry {
    pub centers: Vec<(f64, f64)>,
    /// Per-axis radius multipliers.
    pub aspects: Vec<(f64, f64)>,
}

impl PatientGeometry {
    /// Draws centers so that organs at peak size do not overlap when possible.
    pub fn sample(cfg: &SynthConfig, rng: &mut impl Rng) -> Self {
        let size = cfg.image_size as f64;
        let radii: Vec<f64> = cfg.organs.iter().map(|o| o.base_radius * size).collect();
        let mut centers: Vec<(f64, f64)> = Vec::with_capacity(radii.len());
        for &r in &radii {
            let mut pick = (0.0, 0.0);
            for _ in 0..1000 {
                pick = (rng.gen_range(r..=size - r), rng.gen_range(r..=size - r));
                let clear = centers
                    .iter()
                    .zip(&radii)
                    .all(|(c, &rj)| (c.0 - pick.0).hypot(c.1 - pick.1) >= r + rj);
                if clear {
                    break;
                }
            }
            centers.push(pick);
        }
        let aspects = radii
            .iter()
            .map(|_| (rng.gen_range(0.8..1.2), rng.gen_range(0.8..1.2)))
            .collect();
        Self { centers, aspects }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    /// `[1, H, W]` in `[0, 1]`.
    pub image: Tensor,
    /// `[K, H, W]`, binary.
    pub masks: Tensor,
    pub patient_id: usize,
    pub slice_index: usize,
    pub slice_total: usize,
    pub modality: Modality,
}

/// Renders slice `i` of `n` for a patient with fixed `geometry`; `rng` drives the noise.
pub fn render_slice(
    cfg: &SynthConfig,
    geometry: &PatientGeometry,
    patient_id: usize,
    i: usize,
    n: usize,
    rng: &mut impl Rng,
) -> SliceSample {
    let size = cfg.image_size;
    let plane = size * size;
    let k = cfg.organs.len();
    let mut level = vec![cfg.background; plane];
    let mut masks = vec![0.0; k * plane];
    for (c, organ) in cfg.organs.iter().enumerate() {
        let w = presence_weight(organ, i, n);
        if w < PRESENCE_THRESHOLD {
            continue;
        }
        let (cx, cy) = geometry.centers[c];
        let (ax, ay) = geometry.aspects[c];
        let r = organ.base_radius * w * size as f64;
        let (rx, ry) = (r * ax, r * ay);
        let texture = cfg.texture_levels[organ.texture_class];
        let center_pixel =
            (cy.floor() as usize).min(size - 1) * size + (cx.floor() as usize).min(size - 1);
        for y in 0..size {
            for x in 0..size {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let idx = y * size + x;
                if dx * dx + dy * dy <= 1.0 || idx == center_pixel {
                    masks[c * plane + idx] = 1.0;
                    level[idx] = texture;
                }
            }
        }
    }
    let noise = Normal::new(0.0, cfg.noise_std).expect("validated noise level");
    let image: Vec<f64> = level
        .iter()
        .map(|&v| (v + noise.sample(rng)).clamp(0.0, 1.0))
        .collect();
    SliceSample {
        image: Tensor::new([1, size, size], image).expect("image length"),
        masks: Tensor::new([k, size, size], masks).expect("mask length"),
        patient_id,
        slice_index: i,
        slice_total: n,
        modality: cfg.modality,
    }
}

/// All slices `1..=N` of one patient.
pub fn generate_patient(cfg: &SynthConfig, patient: usize) -> Vec<SliceSample> {
    let geometry = PatientGeometry::sample(cfg, &mut patient_rng(cfg.data_seed, patient, 0));
    (1..=cfg.slices)
        .map(|i| {
            render_slice(
                cfg,
                &geometry,
                patient,
                i,
                cfg.slices,
                &mut patient_rng(cfg.data_seed, patient, i),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.tput", self.as_str())
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Patient ids per split.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Shuffles patients and cuts them 7:1:2 into train, validation and test.
pub fn split_patients(patients: usize, seed: u64) -> Result<Splits> {
    if patients < MIN_PATIENTS {
        return Err(Error::Config(format!(
            "{patients} patients cannot be split 7:1:2 (need at least {MIN_PATIENTS})"
        )));
    }
    let mut ids: Vec<usize> = (0..patients).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // patient streams never reach the top stream id
    rng.set_stream(u64::MAX);
    ids.shuffle(&mut rng);
    let n_val = (patients + 5) / 10;
    let n_test = (2 * patients + 5) / 10;
    let n_train = patients - n_val - n_test;
    let sorted = |range: std::ops::Range<usize>| {
        let mut v = ids[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(Splits {
        train: sorted(0..n_train),
        val: sorted(n_train..n_train + n_val),
        test: sorted(n_train + n_val..patients),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub patient: usize,
    pub i: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub modality: Modality,
    pub file: String,
    /// Row of this sample inside `file`.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SynthConfig,
    pub splits: Splits,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        let file = split.file_name();
        self.records.iter().filter(move |r| r.file == file)
    }
}

/// Writes `manifest.json` and one tensor file per split (`images`, `masks`) into `out`.
pub fn generate_dataset(cfg: &SynthConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let splits = split_patients(cfg.patients, cfg.data_seed)?;
    fs::create_dir_all(out).map_err(Error::io(out))?;
    let mut records = Vec::with_capacity(cfg.patients * cfg.slices);
    for split in Split::ALL {
        let file = split.file_name();
        let mut images = Vec::new();
        let mut masks = Vec::new();
        for &patient in splits.get(split) {
            for s in generate_patient(cfg, patient) {
                records.push(SampleRecord {
                    patient,
                    i: s.slice_index,
                    n: s.slice_total,
                    modality: s.modality,
                    file: file.clone(),
                    index: images.len(),
                });
                images.push(s.image);
                masks.push(s.masks);
            }
        }
        let tensors = vec![
            ("images".to_string(), stack(&images)?),
            ("masks".to_string(), stack(&masks)?),
        ];
        let path = out.join(&file);
        let writer = std::io::BufWriter::new(fs::File::create(&path).map_err(Error::io(&path))?);
        write_checkpoint(writer, &tensors).map_err(Error::io(&path))?;
    }
    let manifest = Manifest {
        config: cfg.clone(),
        splits,
        records,
    };
    let path = out.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).map_err(Error::json(&path))?;
    fs::write(&path, text).map_err(Error::io(&path))?;
    Ok(manifest)
}

fn stack(items: &[Tensor]) -> Result<Tensor> {
    let refs: Vec<&Tensor> = items.iter().collect();
    Ok(Tensor::stack(&refs)?)
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(Error::io(path))?;
    Ok(hex(&Sha256::digest(bytes)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One split held in memory.
#[derive(Debug, Clone)]
pub struct SplitData {
    /// `[n, 1, H, W]`.
    pub images: Tensor,
    /// `[n, K, H, W]`.
    pub masks: Tensor,
    pub records: Vec<SampleRecord>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.masks.shape()[1]
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Batch of images and masks for the given rows.
    pub fn gather(&self, rows: &[usize]) -> Result<(Tensor, Tensor)> {
        let pick = |t: &Tensor| -> Result<Tensor> {
            let parts = rows
                .iter()
                .map(|&r| t.index_outer(r))
                .collect::<Result<Vec<_>, _>>()?;
            stack(&parts)
        };
        Ok((pick(&self.images)?, pick(&self.masks)?))
    }
}

/// A generated dataset directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(Error::io(&path))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(Error::json(&path))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn hash(&self) -> Result<String> {
        file_hash(&self.dir.join(MANIFEST_FILE))
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.config.num_classes()
    }

    pub fn load(&self, split: Split) -> Result<SplitData> {
        let path = self.dir.join(split.file_name());
        let reader = std::io::BufReader::new(fs::File::open(&path).map_err(Error::io(&path))?);
        let mut tensors = read_checkpoint(reader).map_err(Error::io(&path))?;
        let mut take = |name: &str| -> Result<Tensor> {
            let pos = tensors.iter().position(|(n, _)| n == name).ok_or_else(|| {
                Error::Dataset(format!("{} lacks tensor {name:?}", path.display()))
            })?;
            Ok(tensors.swap_remove(pos).1)
        };
        let images = take("images")?;
        let masks = take("masks")?;
        let records: Vec<SampleRecord> = self.manifest.records_in(split).cloned().collect();
        let k = self.num_classes();
        let ok = images.rank() == 4
            && masks.rank() == 4
            && images.shape()[0] == records.len()
            && masks.shape()[0] == records.len()
            && masks.shape()[1] == k
            && images.shape()[2..] == masks.shape()[2..];
        if !ok {
            return Err(Error::Dataset(format!(
                "{}: images {:?} and masks {:?} disagree with {} manifest records of {k} classes",
                path.display(),
                images.shape(),
                masks.shape(),
                records.len()
            )));
        }
        Ok(SplitData {
            images,
            masks,
            records,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presence_examples() {
        let spec = OrganSpec::new("liver", 0.78, 0.1, 0, 0.2);
        let best = (1..=100)
            .max_by(|&a, &b| {
                presence_weight(&spec, a, 100).total_cmp(&presence_weight(&spec, b, 100))
            })
            .unwrap();
        assert_eq!(best, 78);
        assert_eq!(presence_weight(&spec, 78, 100), 1.0);
        let boundary = (2.0 * 10f64.ln()).sqrt();
        let shifted = OrganSpec {
            mu: 0.5 - boundary * 0.1,
            ..spec
        };
        assert!((presence_weight(&shifted, 1, 2) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn absent_organs_have_empty_masks() {
        let cfg = SynthConfig::default();
        let geo = PatientGeometry::sample(&cfg, &mut patient_rng(0, 0, 0));
        // slice 1 of 16 is outside the third organ's window
        let s = render_slice(&cfg, &geo, 0, 1, 16, &mut patient_rng(0, 0, 1));
        assert!(presence_weight(&cfg.organs[2], 1, 16) < PRESENCE_THRESHOLD);
        let plane = 32 * 32;
        assert!(s.masks.data()[2 * plane..].iter().all(|&v| v == 0.0));
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn present_organs_have_pixels() {
        let cfg = SynthConfig::default();
        let plane = 32 * 32;
        for p in 0..5 {
            for s in generate_patient(&cfg, p) {
                for (c, organ) in cfg.organs.iter().enumerate() {
                    let present =
                        presence_weight(organ, s.slice_index, s.slice_total) >= PRESENCE_THRESHOLD;
                    let any = s.masks.data()[c * plane..(c + 1) * plane]
                        .iter()
                        .any(|&v| v == 1.0);
                    assert_eq!(present, any);
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic() {
        let cfg = SynthConfig::default();
        assert_eq!(generate_patient(&cfg, 3), generate_patient(&cfg, 3));
        assert_ne!(
            generate_patient(&cfg, 3)[5].image,
            generate_patient(&cfg, 4)[5].image
        );
    }

    #[test]
    fn split_ratios() {
        let s = split_patients(40, 9).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (28, 4, 8));
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        let s = split_patients(10, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 1, 2));
        assert!(split_patients(9, 0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SynthConfig::default();
        cfg.organs[0].sigma = 0.4;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.organs[1].texture_class = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = SynthConfig::default();
        cfg.image_size = 30;
        assert!(cfg.validate().is_err());
    }
}
