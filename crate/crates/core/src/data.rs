//! Synthetic class-partitioned datasets, labeled/unlabeled class mismatch,
//! and the perfect OOD-filter baseline.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::augment::FeatureKind;
use crate::error::{invalid, Error, Result};
use crate::rng::{stream, Stream, StreamRng};
use crate::tensor::Tensor;

/// Features with probability-row targets (one-hot or soft).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub y: Tensor,
}

impl LabeledBatch {
    pub fn from_labels(x: Tensor, labels: &[usize], num_classes: usize) -> Result<Self> {
        if labels.len() != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "labeled batch",
                lhs: vec![x.rows()],
                rhs: vec![labels.len()],
            });
        }
        let mut y = vec![0.0; labels.len() * num_classes];
        for (i, &c) in labels.iter().enumerate() {
            if c >= num_classes {
                return Err(invalid(format!("label {c} out of range for {num_classes} classes")));
            }
            y[i * num_classes + c] = 1.0;
        }
        Ok(Self {
            x,
            y: Tensor::new(vec![labels.len(), num_classes], y)?,
        })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetKind {
    /// Isotropic Gaussian classes; see [`BlobLayout`] for where the means sit.
    GaussianBlobs {
        dim: usize,
        radius: f64,
        #[serde(default)]
        layout: BlobLayout,
    },
    /// Interleaved half-moon pairs arranged around a ring, in 2-D.
    TwoMoonsMulti,
    /// Parameterized shapes rendered into `16 × 16` grayscale images.
    SyntheticShapes16x16,
}

impl DatasetKind {
    pub fn feature_kind(&self) -> FeatureKind {
        match *self {
            DatasetKind::GaussianBlobs { dim, .. } => FeatureKind::Vector { dim },
            DatasetKind::TwoMoonsMulti => FeatureKind::Vector { dim: 2 },
            DatasetKind::SyntheticShapes16x16 => FeatureKind::Image { side: SHAPE_SIDE },
        }
    }
}

/// Placement of blob class means.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlobLayout {
    /// Class `k` at `radius·e_k`: every pair of classes equally far apart,
    /// and each class owns a feature direction. Needs `dim ≥` class count.
    #[default]
    Axes,
    /// Angle `2πk/K` on a circle in the first two coordinates, so
    /// neighbouring classes overlap and interpolations cross other classes.
    Circle,
}

pub const SHAPE_SIDE: usize = 16;
pub const SHAPE_CLASSES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    /// Class ids that appear in the labeled set, in label order.
    pub known_classes: Vec<usize>,
    /// Class ids that only ever appear in the unlabeled set.
    pub ood_classes: Vec<usize>,
    pub labeled_per_class: usize,
    /// Per-known-class labeled counts overriding `labeled_per_class`.
    #[serde(default)]
    pub labeled_counts: Option<Vec<usize>>,
    pub unlabeled_per_class: usize,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub noise: f64,
}

impl DatasetSpec {
    /// Six known classes, four OOD classes, 50 labeled examples per class.
    pub fn blobs_default() -> Self {
        Self {
            kind: DatasetKind::GaussianBlobs {
                dim: 16,
                radius: 2.8,
                layout: BlobLayout::Axes,
            },
            known_classes: (0..6).collect(),
            ood_classes: (6..10).collect(),
            labeled_per_class: 50,
            labeled_counts: None,
            unlabeled_per_class: 400,
            val_per_class: 50,
            test_per_class: 200,
            noise: 1.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.known_classes.len()
    }

    pub fn labeled_count(&self, known_index: usize) -> usize {
        self.labeled_counts
            .as_ref()
            .and_then(|c| c.get(known_index).copied())
            .unwrap_or(self.labeled_per_class)
    }

    pub fn validate(&self) -> Result<()> {
        if self.known_classes.len() < 2 {
            return Err(invalid("need at least 2 known classes"));
        }
        if self.known_classes.iter().any(|k| self.ood_classes.contains(k)) {
            return Err(invalid("known and OOD classes must be disjoint"));
        }
        let mut all: Vec<usize> = self.all_classes();
        all.sort_unstable();
        all.dedup();
        if all.len() != self.known_classes.len() + self.ood_classes.len() {
            return Err(invalid("class lists contain duplicates"));
        }
        if let Some(c) = &self.labeled_counts {
            if c.len() != self.known_classes.len() || c.contains(&0) {
                return Err(invalid("labeled_counts must give a positive count per known class"));
            }
        }
        if self.labeled_per_class == 0 || self.val_per_class == 0 || self.test_per_class == 0 || self.unlabeled_per_class == 0 {
            return Err(invalid("per-class counts must be positive"));
        }
        if !(self.noise >= 0.0) {
            return Err(invalid("noise must be nonnegative"));
        }
        match self.kind {
            DatasetKind::GaussianBlobs { dim, .. } if dim < 2 => {
                return Err(invalid("blobs need dim ≥ 2"));
            }
            DatasetKind::GaussianBlobs {
                dim,
                layout: BlobLayout::Axes,
                ..
            } if all.iter().any(|&c| c >= dim) => {
                return Err(invalid(format!("axis-aligned blobs need every class id below dim = {dim}")));
            }
            DatasetKind::SyntheticShapes16x16 if all.iter().any(|&c| c >= SHAPE_CLASSES) => {
                return Err(invalid(format!("shape classes are 0..{SHAPE_CLASSES}")));
            }
            _ => {}
        }
        Ok(())
    }

    fn all_classes(&self) -> Vec<usize> {
        self.known_classes
            .iter()
            .chain(&self.ood_classes)
            .copied()
            .collect()
    }

    fn total_classes(&self) -> usize {
        self.all_classes().into_iter().max().map_or(0, |m| m + 1)
    }

    fn pool_size(&self, class: usize) -> usize {
        match self.known_classes.iter().position(|&k| k == class) {
            Some(i) => self.labeled_count(i) + self.unlabeled_per_class + self.val_per_class + self.test_per_class,
            None => self.unlabeled_per_class,
        }
    }
}

/// Examples grouped by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPools {
    pub kind: FeatureKind,
    pub classes: BTreeMap<usize, Tensor>,
}

/// Generate every class's examples. Known classes get enough rows for the
/// labeled, unlabeled, validation and test splits; OOD classes get the
/// unlabeled count.
pub fn make_synthetic(spec: &DatasetSpec, seed: u64) -> Result<ClassPools> {
    spec.validate()?;
    let kind = spec.kind.feature_kind();
    let total = spec.total_classes();
    let mut classes = BTreeMap::new();
    for class in spec.all_classes() {
        let n = spec.pool_size(class);
        let mut rng = stream(seed, class as u64, Stream::Data);
        let mut rows = Vec::with_capacity(n);
        for _ in 0..n {
            rows.push(sample_example(spec, class, total, &mut rng));
        }
        classes.insert(class, Tensor::from_rows(&rows, kind.len())?);
    }
    Ok(ClassPools { kind, classes })
}

fn sample_example(spec: &DatasetSpec, class: usize, total: usize, rng: &mut StreamRng) -> Vec<f64> {
    let noise = |rng: &mut StreamRng| -> f64 {
        if spec.noise > 0.0 {
            Normal::new(0.0, spec.noise).expect("noise ≥ 0").sample(rng)
        } else {
            0.0
        }
    };
    match spec.kind {
        DatasetKind::GaussianBlobs { dim, radius, layout } => {
            let mut x = blob_mean(class, total, dim, radius, layout);
            x.iter_mut().for_each(|v| *v += noise(rng));
            x
        }
        DatasetKind::TwoMoonsMulti => {
            let pairs = total.div_ceil(2).max(1);
            let pair = class / 2;
            let ang = std::f64::consts::TAU * pair as f64 / pairs as f64;
            let (cx, cy) = (4.0 * ang.cos(), 4.0 * ang.sin());
            let t = rng.random_range(0.0..std::f64::consts::PI);
            let (mx, my) = if class.is_multiple_of(2) {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            vec![cx + mx - 0.5 + noise(rng), cy + my - 0.25 + noise(rng)]
        }
        DatasetKind::SyntheticShapes16x16 => {
            let mut img = render_shape(class, rng);
            img.iter_mut().for_each(|v| *v += noise(rng));
            img
        }
    }
}

/// Mean of blob class `class` out of `total`.
pub fn blob_mean(class: usize, total: usize, dim: usize, radius: f64, layout: BlobLayout) -> Vec<f64> {
    let mut m = vec![0.0; dim];
    match layout {
        BlobLayout::Axes => m[class] = radius,
        BlobLayout::Circle => {
            let ang = std::f64::consts::TAU * class as f64 / total.max(1) as f64;
            m[0] = radius * ang.cos();
            m[1] = radius * ang.sin();
        }
    }
    m
}

fn render_shape(class: usize, rng: &mut StreamRng) -> Vec<f64> {
    let s = SHAPE_SIDE as isize;
    let mut img = vec![0.0; SHAPE_SIDE * SHAPE_SIDE];
    let cx = 7.5 + rng.random_range(-2.0..=2.0);
    let cy = 7.5 + rng.random_range(-2.0..=2.0);
    let r = 4.0 + rng.random_range(-1.0..=1.0);
    let ink = rng.random_range(0.7..=1.0);
    for py in 0..s {
        for px in 0..s {
            let (x, y) = (px as f64 - cx, py as f64 - cy);
            let d = (x * x + y * y).sqrt();
            let on = match class {
                0 => d <= r,
                1 => (d - r).abs() <= 0.8,
                2 => y.abs() <= 1.0 && x.abs() <= r + 1.0,
                3 => x.abs() <= 1.0 && y.abs() <= r + 1.0,
                4 => (x.abs() <= 0.8 || y.abs() <= 0.8) && x.abs().max(y.abs()) <= r,
                5 => {
                    let m = x.abs().max(y.abs());
                    (m - r).abs() <= 0.6
                }
                6 => (x - y).abs() <= 0.9 && x.abs() <= r,
                7 => ((x - y).abs() <= 0.9 || (x + y).abs() <= 0.9) && x.abs() <= r,
                8 => y <= r * 0.8 && y >= -r && x.abs() <= (y + r) * 0.5,
                _ => ((px / 2 + py / 2) % 2 == 0) && x.abs() <= r && y.abs() <= r,
            };
            if on {
                img[py as usize * SHAPE_SIDE + px as usize] = ink;
            }
        }
    }
    img
}

/// Percentage of unlabeled class slots taken by OOD classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MismatchSpec {
    pub zeta: u32,
    pub slots: usize,
}

impl MismatchSpec {
    pub fn new(zeta: u32, slots: usize) -> Result<Self> {
        let m = Self { zeta, slots };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.zeta > 100 {
            return Err(invalid(format!("ζ must be a percentage, got {}", self.zeta)));
        }
        if self.slots == 0 {
            return Err(invalid("need at least one unlabeled class slot"));
        }
        if !(self.zeta as usize * self.slots).is_multiple_of(100) {
            return Err(invalid(format!(
                "ζ={}% of {} slots is not a whole number of classes",
                self.zeta, self.slots
            )));
        }
        Ok(())
    }

    pub fn ood_slots(&self) -> usize {
        (self.zeta as usize * self.slots).div_ceil(100)
    }
}

/// Unlabeled features. True classes are kept private: they are reachable
/// only through [`oracle_filter`] and [`UnlabeledSet::hidden_labels_for_analysis`].
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledSet {
    x: Tensor,
    hidden: Vec<usize>,
    known: Vec<usize>,
}

impl UnlabeledSet {
    pub fn features(&self) -> &Tensor {
        &self.x
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Original class ids, for post-hoc reporting only.
    pub fn hidden_labels_for_analysis(&self) -> &[usize] {
        &self.hidden
    }

    /// Number of distinct OOD classes present.
    pub fn ood_class_count(&self) -> usize {
        let mut c: Vec<usize> = self
            .hidden
            .iter()
            .copied()
            .filter(|h| !self.known.contains(h))
            .collect();
        c.sort_unstable();
        c.dedup();
        c.len()
    }
}

/// Fill `m.slots` class slots: the first `ζ·M/100` OOD classes, then the
/// last remaining known classes, `per_slot` examples each.
///
/// `known` lists the labeled classes in label order with their unlabeled
/// pools; `ood` lists OOD classes in replacement order.
pub fn compose_unlabeled(
    known: &[(usize, &Tensor)],
    ood: &[(usize, &Tensor)],
    m: &MismatchSpec,
    per_slot: usize,
) -> Result<UnlabeledSet> {
    m.validate()?;
    let n_ood = m.ood_slots();
    let n_known = m.slots - n_ood;
    if ood.len() < n_ood {
        return Err(Error::InsufficientClasses(format!(
            "ζ={}% needs {n_ood} OOD classes, have {}",
            m.zeta,
            ood.len()
        )));
    }
    if known.len() < n_known {
        return Err(Error::InsufficientClasses(format!(
            "ζ={}% needs {n_known} known classes, have {}",
            m.zeta,
            known.len()
        )));
    }
    let chosen = ood[..n_ood]
        .iter()
        .chain(&known[known.len() - n_known..]);
    let mut parts = Vec::new();
    let mut hidden = Vec::new();
    let mut row_shape = None;
    for (class, pool) in chosen {
        if pool.rows() < per_slot {
            return Err(invalid(format!(
                "class {class} has {} unlabeled examples, need {per_slot}",
                pool.rows()
            )));
        }
        row_shape.get_or_insert_with(|| pool.row_shape().to_vec());
        parts.push(pool.select_rows(&(0..per_slot).collect::<Vec<_>>()));
        hidden.extend(std::iter::repeat_n(*class, per_slot));
    }
    let x = if parts.is_empty() {
        Tensor::empty_rows(&row_shape.unwrap_or_default())
    } else {
        Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())?
    };
    Ok(UnlabeledSet {
        x,
        hidden,
        known: known.iter().map(|(c, _)| *c).collect(),
    })
}

/// Keep exactly the unlabeled examples whose true class is a known class.
pub fn oracle_filter(u: &UnlabeledSet) -> UnlabeledSet {
    let keep: Vec<usize> = (0..u.len())
        .filter(|&i| u.known.contains(&u.hidden[i]))
        .collect();
    UnlabeledSet {
        x: u.x.select_rows(&keep),
        hidden: keep.iter().map(|&i| u.hidden[i]).collect(),
        known: u.known.clone(),
    }
}

/// Features with integer labels over the known classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSplit {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, idx: &[usize], num_classes: usize) -> Result<LabeledBatch> {
        let labels: Vec<usize> = idx.iter().map(|&i| self.labels[i]).collect();
        LabeledBatch::from_labels(self.x.select_rows(idx), &labels, num_classes)
    }

    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitBundle {
    pub kind: FeatureKind,
    pub num_classes: usize,
    /// Original class id of each label index.
    pub known_classes: Vec<usize>,
    pub labeled: LabeledSplit,
    pub unlabeled: UnlabeledSet,
    pub val: LabeledSplit,
    pub test: LabeledSplit,
}

/// Synthesize pools and cut them into labeled, unlabeled (composed at the
/// requested mismatch), validation and test splits.
pub fn build_splits(spec: &DatasetSpec, mismatch: &MismatchSpec, seed: u64) -> Result<SplitBundle> {
    let pools = make_synthetic(spec, seed)?;
    let kind = pools.kind;
    let c = spec.num_classes();
    let mut labeled = (Vec::new(), Vec::new());
    let mut val = (Vec::new(), Vec::new());
    let mut test = (Vec::new(), Vec::new());
    let mut known_unlabeled = Vec::new();
    for (label, class) in spec.known_classes.iter().enumerate() {
        let pool = &pools.classes[class];
        let nl = spec.labeled_count(label);
        let nu = spec.unlabeled_per_class;
        let nv = spec.val_per_class;
        let nt = spec.test_per_class;
        let take = |from: usize, n: usize| pool.select_rows(&(from..from + n).collect::<Vec<_>>());
        labeled.0.push(take(0, nl));
        labeled.1.extend(std::iter::repeat_n(label, nl));
        known_unlabeled.push((*class, take(nl, nu)));
        val.0.push(take(nl + nu, nv));
        val.1.extend(std::iter::repeat_n(label, nv));
        test.0.push(take(nl + nu + nv, nt));
        test.1.extend(std::iter::repeat_n(label, nt));
    }
    let ood: Vec<(usize, &Tensor)> = spec
        .ood_classes
        .iter()
        .map(|c| (*c, &pools.classes[c]))
        .collect();
    let known_refs: Vec<(usize, &Tensor)> = known_unlabeled.iter().map(|(c, t)| (*c, t)).collect();
    let unlabeled = compose_unlabeled(&known_refs, &ood, mismatch, spec.unlabeled_per_class)?;
    let cat = |parts: Vec<Tensor>| -> Result<Tensor> { Tensor::concat_rows(&parts.iter().collect::<Vec<_>>()) };
    Ok(SplitBundle {
        kind,
        num_classes: c,
        known_classes: spec.known_classes.clone(),
        labeled: LabeledSplit {
            x: cat(labeled.0)?,
            labels: labeled.1,
        },
        unlabeled,
        val: LabeledSplit {
            x: cat(val.0)?,
            labels: val.1,
        },
        test: LabeledSplit {
            x: cat(test.0)?,
            labels: test.1,
        },
    })
}

impl SplitBundle {
    /// Write every split as CSV: `split,label,hidden_class,f0,…`.
    ///
    /// `label` is the known-class index (empty for unlabeled rows);
    /// `hidden_class` is the original class id.
    pub fn export_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let d = self.kind.len();
        let mut header = vec!["split".to_string(), "label".into(), "hidden_class".into()];
        header.extend((0..d).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        let mut emit = |split: &str, label: Option<usize>, hidden: usize, row: &[f64]| -> Result<()> {
            let mut rec = vec![
                split.to_string(),
                label.map(|l| l.to_string()).unwrap_or_default(),
                hidden.to_string(),
            ];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
            Ok(())
        };
        for (name, s) in [("labeled", &self.labeled), ("val", &self.val), ("test", &self.test)] {
            for (i, &l) in s.labels.iter().enumerate() {
                emit(name, Some(l), self.known_classes[l], s.x.row(i))?;
            }
        }
        for i in 0..self.unlabeled.len() {
            emit("unlabeled", None, self.unlabeled.hidden[i], self.unlabeled.x.row(i))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Read back a bundle written by [`SplitBundle::export_csv`].
    pub fn import_csv(path: &Path, kind: FeatureKind) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let d = kind.len();
        // split -> (features, labels, hidden classes)
        type Rows = (Vec<Vec<f64>>, Vec<usize>, Vec<usize>);
        let mut rows: BTreeMap<String, Rows> = BTreeMap::new();
        let mut label_to_class: BTreeMap<usize, usize> = BTreeMap::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() != 3 + d {
                return Err(invalid(format!("expected {} columns, found {}", 3 + d, rec.len())));
            }
            let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| invalid(e.to_string()));
            let hidden = parse_usize(&rec[2])?;
            let label = if rec[1].is_empty() { None } else { Some(parse_usize(&rec[1])?) };
            if let Some(l) = label {
                label_to_class.insert(l, hidden);
            }
            let feats = rec
                .iter()
                .skip(3)
                .map(|s| s.parse::<f64>().map_err(|e| invalid(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            let e = rows.entry(rec[0].to_string()).or_default();
            e.0.push(feats);
            e.1.push(label.unwrap_or(usize::MAX));
            e.2.push(hidden);
        }
        let known_classes: Vec<usize> = label_to_class.values().copied().collect();
        let num_classes = known_classes.len();
        let mut take = |name: &str| -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
            let (x, l, h) = rows.remove(name).unwrap_or_default();
            let x = if x.is_empty() { Tensor::empty_rows(&[d]) } else { Tensor::from_rows(&x, d)? };
            Ok((x, l, h))
        };
        let split = |(x, l, _): (Tensor, Vec<usize>, Vec<usize>)| LabeledSplit { x, labels: l };
        let labeled = split(take("labeled")?);
        let val = split(take("val")?);
        let test = split(take("test")?);
        let (ux, _, uh) = take("unlabeled")?;
        Ok(Self {
            kind,
            num_classes,
            known_classes: known_classes.clone(),
            labeled,
            unlabeled: UnlabeledSet {
                x: ux,
                hidden: uh,
                known: known_classes,
            },
            val,
            test,
        })
    }
}

/// Endless shuffled minibatch indices over `n` items. Each epoch is a fresh
/// permutation drawn from its own stream.
#[derive(Debug, Clone)]
pub struct BatchCycler {
    n: usize,
    seed: u64,
    purpose: Stream,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchCycler {
    pub fn new(n: usize, seed: u64, purpose: Stream) -> Self {
        let mut c = Self {
            n,
            seed,
            purpose,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        c.reshuffle();
        c
    }

    fn reshuffle(&mut self) {
        self.order = (0..self.n).collect();
        let mut rng = stream(self.seed, self.epoch, self.purpose);
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    /// Next `size` indices, wrapping into a new epoch when needed. Returns
    /// an empty batch when there is nothing to draw from.
    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        if self.n == 0 {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.n {
                self.epoch += 1;
                self.reshuffle();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}
