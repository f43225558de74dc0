//! Seeded synthetic phantoms: smooth grayscale backgrounds carrying benign
//! (elliptical) or malignant (spiculated) lesions with exact ground truth.

mod io;
mod render;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, Rng};
use crate::tensor::{Shape, Tensor};

pub use io::{export_dataset, import_dataset, MANIFEST};
pub use render::{build_lesion, render_lesion, Label, Lesion, LesionShape, Lobe, Spicule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub count: usize,
    pub benign_count: usize,
    pub malignant_count: usize,
    pub split_fraction: f64,
    pub image_size: usize,
    pub master_seed: u64,
    /// Upper bound on lesions per phantom; every lesion in a case shares
    /// the case label.
    pub max_lesions: usize,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            count: 344,
            benign_count: 178,
            malignant_count: 166,
            split_fraction: 0.8,
            image_size: 64,
            master_seed: 0,
            max_lesions: 1,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.benign_count + self.malignant_count != self.count {
            return Err(Error::config(format!(
                "benign {} + malignant {} != count {}",
                self.benign_count, self.malignant_count, self.count
            )));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::config(format!(
                "split fraction {} outside (0, 1)",
                self.split_fraction
            )));
        }
        if self.image_size < 32 {
            return Err(Error::config(format!("image size {} is below 32", self.image_size)));
        }
        if !(1..=3).contains(&self.max_lesions) {
            return Err(Error::config("max_lesions must be 1, 2 or 3"));
        }
        Ok(())
    }

    /// `(train_benign, train_malignant)`; the total is `round(f * count)`.
    pub fn train_quota(&self) -> (usize, usize) {
        let total = (self.split_fraction * self.count as f64).round() as usize;
        let b = ((self.split_fraction * self.benign_count as f64).round() as usize)
            .min(self.benign_count)
            .min(total);
        let m = (total - b).min(self.malignant_count);
        (total - m, m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    /// `(1, 1, H, W)` with values in [0, 1].
    pub image: Tensor,
    pub lesions: Vec<Lesion>,
    pub seed_id: u64,
}

impl Phantom {
    /// Lesion the case label and classifier crop refer to.
    pub fn primary(&self) -> Option<&Lesion> {
        self.lesions.first()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub label: Label,
    pub phantom: Phantom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<Case>,
    pub validation: Vec<Case>,
}

impl Dataset {
    pub fn split(&self, which: Split) -> &[Case] {
        match which {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.validation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

const MAX_ATTEMPTS: usize = 100;
const FEATHER: f64 = 0.8;

fn sample_shape(rng: &mut Rng, label: Label, size: f64, radius: (f64, f64)) -> LesionShape {
    let s = size / 64.0;
    let a = rng.range(radius.0, radius.1) * s;
    let b = a * rng.range(0.65, 1.0);
    let rotation = rng.range(0.0, std::f64::consts::PI);
    let lobes = match label {
        Label::Benign => (0..1 + rng.below(3))
            .map(|_| Lobe {
                frequency: 2 + rng.below(4) as u32,
                amplitude: rng.range(0.04, 0.16),
                phase: rng.range(0.0, 2.0 * std::f64::consts::PI),
            })
            .collect(),
        Label::Malignant => Vec::new(),
    };
    let spicules = match label {
        Label::Benign => Vec::new(),
        Label::Malignant => {
            let n = 2 + rng.below(6);
            let step = 2.0 * std::f64::consts::PI / n as f64;
            let base = rng.range(0.0, step);
            (0..n)
                .map(|j| Spicule {
                    angle: base + j as f64 * step + rng.range(-0.2, 0.2) * step,
                    length: rng.range(2.0, 5.5) * s,
                    half_width: rng.range(1.2, 2.4) * s,
                })
                .collect()
        }
    };
    let mut shape = LesionShape {
        center: (0.0, 0.0),
        axes: (a, b),
        rotation,
        label,
        spicules,
        lobes,
        feather: FEATHER,
    };
    let r = shape.extent() + 1.5;
    shape.center = (rng.range(r, size - r), rng.range(r, size - r));
    shape
}

/// Smooth low-frequency field plus faint pixel noise.
fn background(rng: &mut Rng, size: usize) -> Tensor {
    let base = rng.range(0.15, 0.3);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let tau = 2.0 * std::f64::consts::PI / size as f64;
            (
                rng.range(0.01, 0.04),
                rng.range(-3.0, 3.0) * tau,
                rng.range(-3.0, 3.0) * tau,
                rng.range(0.0, 2.0 * std::f64::consts::PI),
            )
        })
        .collect();
    let mut img = Tensor::from_fn(Shape::new(1, 1, size, size), |_, _, r, c| {
        let (x, y) = (c as f64 + 0.5, r as f64 + 0.5);
        base + waves
            .iter()
            .map(|&(a, kx, ky, ph)| a * libm::cos(kx * x + ky * y + ph))
            .sum::<f64>()
    });
    for v in img.data_mut() {
        *v += 0.015 * rng.normal();
    }
    img
}

fn try_phantom(rng: &mut Rng, label: Label, spec: &DatasetSpec) -> Result<(Vec<Lesion>, Vec<(f64, Tensor)>)> {
    let size = spec.image_size;
    let extra = if spec.max_lesions > 1 {
        rng.below(spec.max_lesions)
    } else {
        0
    };
    let mut lesions: Vec<Lesion> = Vec::new();
    let mut patches = Vec::new();
    for i in 0..=extra {
        let radius = if i == 0 { (7.0, 11.0) } else { (3.5, 5.5) };
        let shape = sample_shape(rng, label, size as f64, radius);
        let (lesion, patch) = build_lesion(shape, size, size)?;
        // Keep a clear gap between lesions so their masks never touch.
        for other in &lesions {
            let (dx, dy) = (
                lesion.shape.center.0 - other.shape.center.0,
                lesion.shape.center.1 - other.shape.center.1,
            );
            if (dx * dx + dy * dy).sqrt() < lesion.shape.extent() + other.shape.extent() + 2.0 {
                return Err(Error::Placement("lesions overlap".into()));
            }
        }
        patches.push((rng.range(0.35, 0.5), patch));
        lesions.push(lesion);
    }
    Ok((lesions, patches))
}

/// One phantom from its own sub-seed. Placement failures are retried with
/// fresh draws from the same stream.
pub fn generate_phantom(spec: &DatasetSpec, seed_id: u64, label: Label) -> Result<Phantom> {
    phantom_within(spec, seed_id, label, MAX_ATTEMPTS)
}

fn phantom_within(spec: &DatasetSpec, seed_id: u64, label: Label, attempts: usize) -> Result<Phantom> {
    let mut rng = Rng::new(derive_seed(spec.master_seed, seed_id));
    let mut image = background(&mut rng, spec.image_size);
    let mut last = String::from("no attempt made");
    for _ in 0..attempts {
        match try_phantom(&mut rng, label, spec) {
            Ok((lesions, patches)) => {
                for (contrast, patch) in &patches {
                    for (v, p) in image.data_mut().iter_mut().zip(patch.data()) {
                        *v += contrast * p;
                    }
                }
                for v in image.data_mut() {
                    *v = v.clamp(0.0, 1.0);
                }
                return Ok(Phantom {
                    image,
                    lesions,
                    seed_id,
                });
            }
            Err(Error::Placement(m)) => last = m,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Generation {
        master_seed: spec.master_seed,
        case: seed_id as usize,
        message: format!("no valid placement after {attempts} attempts: {last}"),
    })
}

/// Labels are dealt to case ids by a seeded shuffle; a second shuffle
/// orders the cases and each one goes to the training split while its
/// class quota lasts, which stratifies the cut.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.master_seed);
    let mut labels: Vec<Label> = std::iter::repeat(Label::Benign)
        .take(spec.benign_count)
        .chain(std::iter::repeat(Label::Malignant).take(spec.malignant_count))
        .collect();
    rng.shuffle(&mut labels);
    let mut order: Vec<usize> = (0..spec.count).collect();
    rng.shuffle(&mut order);
    let (mut quota_b, mut quota_m) = spec.train_quota();
    let mut is_train = vec![false; spec.count];
    for &id in &order {
        let quota = match labels[id] {
            Label::Benign => &mut quota_b,
            Label::Malignant => &mut quota_m,
        };
        if *quota > 0 {
            *quota -= 1;
            is_train[id] = true;
        }
    }
    let mut train = Vec::new();
    let mut validation = Vec::new();
    for (id, &label) in labels.iter().enumerate() {
        let phantom = generate_phantom(spec, id as u64, label)?;
        let case = Case { label, phantom };
        if is_train[id] {
            train.push(case);
        } else {
            validation.push(case);
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        train,
        validation,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{auc_roc, ScoredSample};

    fn small() -> DatasetSpec {
        DatasetSpec {
            count: 40,
            benign_count: 22,
            malignant_count: 18,
            master_seed: 11,
            ..DatasetSpec::default()
        }
    }

    #[test]
    fn default_split_sizes() {
        let spec = DatasetSpec::default();
        let (b, m) = spec.train_quota();
        assert_eq!(b + m, 275);
        assert!((b as f64 - 0.8 * 178.0).abs() <= 2.0);
        assert!((m as f64 - 0.8 * 166.0).abs() <= 2.0);
        let mut bad = spec.clone();
        bad.split_fraction = 1.0;
        assert!(bad.validate().is_err());
        bad.split_fraction = 0.8;
        bad.benign_count = 1;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn dataset_contract() {
        let spec = small();
        let d = generate_dataset(&spec).unwrap();
        assert_eq!(d.train.len(), 32);
        assert_eq!(d.validation.len(), 8);
        let count = |cases: &[Case], l| cases.iter().filter(|c| c.label == l).count();
        assert_eq!(count(&d.train, Label::Benign) + count(&d.validation, Label::Benign), 22);
        let mut ids: Vec<u64> = d.train.iter().chain(&d.validation).map(|c| c.phantom.seed_id).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 40);
        for c in d.train.iter().chain(&d.validation) {
            assert!(c.phantom.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
            for l in &c.phantom.lesions {
                assert_eq!(Some(l.bbox), l.mask.tight_box());
                assert_eq!(l.label(), c.label);
            }
        }
        assert_eq!(generate_dataset(&spec).unwrap(), d);
    }

    #[test]
    fn multi_lesion_phantoms_do_not_overlap() {
        let spec = DatasetSpec {
            max_lesions: 3,
            ..small()
        };
        let d = generate_dataset(&spec).unwrap();
        let mut multi = 0;
        for c in d.train.iter().chain(&d.validation) {
            let ls = &c.phantom.lesions;
            multi += usize::from(ls.len() > 1);
            for i in 0..ls.len() {
                for j in i + 1..ls.len() {
                    assert_eq!(ls[i].mask.intersection_count(&ls[j].mask).unwrap(), 0);
                }
            }
        }
        assert!(multi > 0);
    }

    #[test]
    fn compactness_separates_labels() {
        let d = generate_dataset(&DatasetSpec {
            count: 120,
            benign_count: 60,
            malignant_count: 60,
            ..small()
        })
        .unwrap();
        let samples: Vec<_> = d
            .train
            .iter()
            .chain(&d.validation)
            .map(|c| ScoredSample::new(c.phantom.lesions[0].compactness(), c.label.is_malignant()))
            .collect();
        assert!(auc_roc(&samples).unwrap() >= 0.9);
    }

    #[test]
    fn exhausted_placement_reports_seed_context() {
        let spec = small();
        match phantom_within(&spec, 3, Label::Malignant, 0) {
            Err(Error::Generation {
                master_seed: 11,
                case: 3,
                ..
            }) => {}
            other => panic!("{other:?}"),
        }
        assert!(phantom_within(&spec, 3, Label::Malignant, MAX_ATTEMPTS).is_ok());
    }
}
