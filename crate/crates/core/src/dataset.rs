//! Input data: MNIST-format IDX files and synthetic Gaussian mixtures.

use std::fs;
use std::io::Write;
use std::path::Path;

use byteorder::{BigEndian, ByteOrder};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// `normalized = (raw - shift) / scale`
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: f64,
    pub scale: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { shift: 0.0, scale: 1.0 };

    pub fn raw(&self, normalized: f64) -> f64 {
        normalized * self.scale + self.shift
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    /// Stable example identifiers (position in the source dataset).
    ids: Vec<usize>,
    classes: usize,
    name: String,
    normalization: Normalization,
    image_shape: Option<(usize, usize)>,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, classes: usize, name: impl Into<String>) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != labels.len() {
            return Err(Error::invalid(format!(
                "dataset needs matching non-empty inputs and labels ({} vs {})",
                inputs.len(),
                labels.len()
            )));
        }
        let k = inputs[0].len();
        if k == 0 || inputs.iter().any(|x| x.len() != k) {
            return Err(Error::invalid("all inputs must share one positive dimension"));
        }
        if inputs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} >= class count {classes}")));
        }
        let ids = (0..inputs.len()).collect();
        Ok(Dataset {
            inputs,
            labels,
            ids,
            classes,
            name: name.into(),
            normalization: Normalization::IDENTITY,
            image_shape: None,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// New dataset with the examples at `positions`, in that order. Example
    /// ids are carried over.
    pub fn select(&self, positions: &[usize]) -> Result<Dataset> {
        if positions.is_empty() {
            return Err(Error::invalid("cannot select an empty subset"));
        }
        if let Some(&p) = positions.iter().find(|&&p| p >= self.len()) {
            return Err(Error::invalid(format!(
                "position {p} out of range for {} examples",
                self.len()
            )));
        }
        Ok(Dataset {
            inputs: positions.iter().map(|&p| self.inputs[p].clone()).collect(),
            labels: positions.iter().map(|&p| self.labels[p]).collect(),
            ids: positions.iter().map(|&p| self.ids[p]).collect(),
            classes: self.classes,
            name: self.name.clone(),
            normalization: self.normalization,
            image_shape: self.image_shape,
        })
    }

    /// Content hash over shape, labels and the exact input bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.dim() as u64).to_le_bytes());
        h.update((self.classes as u64).to_le_bytes());
        for (x, &l) in self.inputs.iter().zip(&self.labels) {
            h.update((l as u64).to_le_bytes());
            for v in x {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// One row per example: label, then features, under a single header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        let header: Vec<String> = std::iter::once("label".to_string())
            .chain((0..self.dim()).map(|i| format!("x{i}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (x, l) in self.inputs.iter().zip(&self.labels) {
            write!(out, "{l}")?;
            for v in x {
                // `{:?}` on f64 is shortest round-trip
                write!(out, ",{v:?}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, classes: Option<usize>) -> Result<Dataset> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
        let mut lines = text.lines();
        lines
            .next()
            .ok_or_else(|| Error::Format(format!("{} is empty", path.display())))?;
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (row, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut cells = line.split(',');
            let label: usize = cells
                .next()
                .and_then(|c| c.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("row {}: bad label", row + 1)))?;
            let x = cells
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Format(format!("row {}: bad value '{c}'", row + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            labels.push(label);
            inputs.push(x);
        }
        let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("csv").to_string();
        Dataset::new(inputs, labels, classes, name)
    }
}

fn idx_header(bytes: &[u8], magic: u32, what: &str, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "{what} file truncated: {} bytes, header needs {need}",
            bytes.len()
        )));
    }
    let observed = BigEndian::read_u32(&bytes[0..4]);
    if observed != magic {
        return Err(Error::Format(format!(
            "{what} file has magic bytes {:02x} {:02x} {:02x} {:02x}, expected {magic:#010x}",
            bytes[0], bytes[1], bytes[2], bytes[3]
        )));
    }
    Ok((0..dims)
        .map(|d| BigEndian::read_u32(&bytes[4 + 4 * d..8 + 4 * d]) as usize)
        .collect())
}

/// Parses an IDX image/label pair from memory. Pixels are scaled to `[0, 1]`.
pub fn parse_idx(image_bytes: &[u8], label_bytes: &[u8]) -> Result<Dataset> {
    let idims = idx_header(image_bytes, IDX_IMAGES_MAGIC, "image", 3)?;
    let ldims = idx_header(label_bytes, IDX_LABELS_MAGIC, "label", 1)?;
    let (count, rows, cols) = (idims[0], idims[1], idims[2]);
    if ldims[0] != count {
        return Err(Error::Format(format!(
            "image file holds {count} images but label file holds {} labels",
            ldims[0]
        )));
    }
    if count == 0 || rows == 0 || cols == 0 {
        return Err(Error::Format("IDX file declares an empty dataset".into()));
    }
    let pixels = rows * cols;
    let body = &image_bytes[16..];
    if body.len() != count * pixels {
        return Err(Error::Format(format!(
            "image payload has {} bytes, header declares {}",
            body.len(),
            count * pixels
        )));
    }
    let lbody = &label_bytes[8..];
    if lbody.len() != count {
        return Err(Error::Format(format!(
            "label payload has {} bytes, header declares {count}",
            lbody.len()
        )));
    }
    let normalization = Normalization {
        shift: 0.0,
        scale: 255.0,
    };
    let inputs: Vec<Vec<f64>> = body
        .chunks_exact(pixels)
        .map(|img| img.iter().map(|&p| p as f64 / 255.0).collect())
        .collect();
    let labels: Vec<usize> = lbody.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    let mut d = Dataset::new(inputs, labels, classes, format!("idx-{rows}x{cols}"))?;
    d.normalization = normalization;
    d.image_shape = Some((rows, cols));
    Ok(d)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", p.display())));
    let images = read(images_path)?;
    let labels = read(labels_path)?;
    parse_idx(&images, &labels)
}

/// Average-pools images by `factor` in both directions. Requires image shape
/// metadata and dimensions divisible by `factor`.
pub fn downscale(d: &Dataset, factor: usize) -> Result<Dataset> {
    let (rows, cols) = d
        .image_shape
        .ok_or_else(|| Error::invalid("downscaling needs image-shaped data"))?;
    if factor == 0 || rows % factor != 0 || cols % factor != 0 {
        return Err(Error::invalid(format!(
            "pool factor {factor} does not divide {rows}x{cols}"
        )));
    }
    if factor == 1 {
        return Ok(d.clone());
    }
    let (r2, c2) = (rows / factor, cols / factor);
    let area = (factor * factor) as f64;
    let inputs = d
        .inputs
        .iter()
        .map(|img| {
            let mut out = vec![0.0; r2 * c2];
            for r in 0..rows {
                for c in 0..cols {
                    out[(r / factor) * c2 + c / factor] += img[r * cols + c];
                }
            }
            out.iter_mut().for_each(|v| *v /= area);
            out
        })
        .collect();
    Ok(Dataset {
        inputs,
        labels: d.labels.clone(),
        ids: d.ids.clone(),
        classes: d.classes,
        name: format!("{}-pool{factor}-{r2}x{c2}", d.name),
        normalization: d.normalization,
        image_shape: Some((r2, c2)),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Parameters of a synthetic Gaussian mixture. Class means depend only on
/// `seed`; train and test splits draw samples from separate streams, so they
/// share the same class geometry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub separation: f64,
    pub seed: u64,
}

const MEAN_CANDIDATES: usize = 32;

impl SynthSpec {
    /// Unit-norm class directions. Of several random draws, the one with the
    /// largest minimum pairwise distance is kept.
    pub fn class_directions(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(0);
        let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
        for _ in 0..MEAN_CANDIDATES {
            let dirs: Vec<Vec<f64>> = (0..self.classes)
                .map(|_| loop {
                    let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                    let len = crate::linalg::norm(&v);
                    if len > 1e-12 {
                        break v.into_iter().map(|x| x / len).collect();
                    }
                })
                .collect();
            let mut min_gap = f64::INFINITY;
            for i in 0..dirs.len() {
                for j in 0..i {
                    let d2: f64 = dirs[i].iter().zip(&dirs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    min_gap = min_gap.min(d2);
                }
            }
            if best.as_ref().is_none_or(|(g, _)| min_gap > *g) {
                best = Some((min_gap, dirs));
            }
        }
        best.unwrap().1
    }

    pub fn generate(&self, split: Split) -> Result<Dataset> {
        if self.classes < 2 || self.dim < 2 {
            return Err(Error::invalid(format!(
                "synthetic data needs at least 2 classes and 2 dimensions (got {} and {})",
                self.classes, self.dim
            )));
        }
        if self.per_class == 0 {
            return Err(Error::invalid("per_class must be at least 1"));
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return Err(Error::invalid("separation must be finite and >= 0"));
        }
        let dirs = self.class_directions();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(match split {
            Split::Train => 1,
            Split::Test => 2,
        });
        let total = self.classes * self.per_class;
        let mut inputs = Vec::with_capacity(total);
        let mut labels = Vec::with_capacity(total);
        // interleaved so that any contiguous window is class-balanced
        for i in 0..total {
            let c = i % self.classes;
            let x: Vec<f64> = dirs[c]
                .iter()
                .map(|mu| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    self.separation * mu + z
                })
                .collect();
            inputs.push(x);
            labels.push(c);
        }
        let tag = match split {
            Split::Train => "train",
            Split::Test => "test",
        };
        Dataset::new(
            inputs,
            labels,
            self.classes,
            format!(
                "synth-c{}-d{}-n{}-sep{}-seed{}-{tag}",
                self.classes, self.dim, self.per_class, self.separation, self.seed
            ),
        )
    }
}

/// Training split of a synthetic mixture.
pub fn synth_gaussians(classes: usize, dim: usize, per_class: usize, separation: f64, seed: u64) -> Result<Dataset> {
    SynthSpec {
        classes,
        dim,
        per_class,
        separation,
        seed,
    }
    .generate(Split::Train)
}

/// Positions of a uniform sample without replacement, in ascending order.
pub fn subsample_positions(len: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    if count == 0 {
        return Err(Error::invalid("subsample count must be at least 1"));
    }
    if count > len {
        return Err(Error::invalid(format!(
            "cannot draw {count} examples from a dataset of {len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all: Vec<usize> = (0..len).collect();
    let (chosen, _) = all.partial_shuffle(&mut rng, count);
    let mut chosen = chosen.to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

pub fn subsample(d: &Dataset, count: usize, seed: u64) -> Result<Dataset> {
    let pos = subsample_positions(d.len(), count, seed)?;
    d.select(&pos)
}

/// Positions `[step·size, (step+1)·size)` modulo `len`, wrapping through the
/// dataset in order.
pub fn round_robin_positions(len: usize, step: usize, size: usize) -> Vec<usize> {
    let size = size.min(len);
    (0..size).map(|j| (step * size + j) % len).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(images: &[[u8; 16]], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
        img.extend_from_slice(&(images.len() as u32).to_be_bytes());
        img.extend_from_slice(&4u32.to_be_bytes());
        img.extend_from_slice(&4u32.to_be_bytes());
        for im in images {
            img.extend_from_slice(im);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn parses_hand_built_idx() {
        let mut a = [0u8; 16];
        a[0] = 255;
        a[5] = 51;
        let b = [128u8; 16];
        let (img, lab) = idx_pair(&[a, b], &[3, 7]);
        let d = parse_idx(&img, &lab).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.dim(), 16);
        assert_eq!(d.labels(), &[3, 7]);
        assert_eq!(d.input(0)[0], 1.0);
        assert_eq!(d.input(0)[1], 0.0);
        assert_eq!(d.input(0)[5], 0.2);
        assert_eq!(d.image_shape(), Some((4, 4)));
        // raw pixels come back exactly through the normalization record
        let norm = d.normalization();
        for (x, raw) in d.input(0).iter().zip(a) {
            let back = norm.raw(*x);
            assert!((back - raw as f64).abs() <= f64::EPSILON * (raw as f64).max(1.0));
        }
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let (img, lab) = idx_pair(&[[1u8; 16]], &[0]);
        assert!(matches!(parse_idx(&img[..img.len() - 1], &lab), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&img[..10], &lab), Err(Error::Format(_))));
        let mut bad = img.clone();
        bad[3] = 0x99;
        match parse_idx(&bad, &lab) {
            Err(Error::Format(msg)) => assert!(msg.contains("00 00 08 99"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx(&lab, &img), Err(Error::Format(_))));
    }

    #[test]
    fn count_mismatch_rejected() {
        let (img, _) = idx_pair(&[[1u8; 16], [2u8; 16]], &[0, 1]);
        let (_, lab) = idx_pair(&[[1u8; 16]], &[0]);
        assert!(matches!(parse_idx(&img, &lab), Err(Error::Format(_))));
    }

    #[test]
    fn downscale_averages_blocks() {
        let mut a = [0u8; 16];
        a[0] = 255;
        a[1] = 255;
        a[4] = 255;
        a[5] = 255;
        let (img, lab) = idx_pair(&[a], &[1]);
        let d = downscale(&parse_idx(&img, &lab).unwrap(), 2).unwrap();
        assert_eq!(d.input(0), &[1.0, 0.0, 0.0, 0.0]);
        assert!(d.name().contains("pool2"));
        assert!(downscale(&d, 3).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let a = synth_gaussians(3, 2, 50, 6.0, 7).unwrap();
        let b = synth_gaussians(3, 2, 50, 6.0, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 150);
        for c in 0..3 {
            assert_eq!(a.labels().iter().filter(|&&l| l == c).count(), 50);
        }
        let c = synth_gaussians(3, 2, 50, 6.0, 8).unwrap();
        assert_ne!(a.inputs(), c.inputs());
    }

    #[test]
    fn synth_splits_share_means() {
        let spec = SynthSpec {
            classes: 3,
            dim: 4,
            per_class: 400,
            separation: 5.0,
            seed: 2,
        };
        let tr = spec.generate(Split::Train).unwrap();
        let te = spec.generate(Split::Test).unwrap();
        assert_ne!(tr.inputs(), te.inputs());
        let dirs = spec.class_directions();
        for d in [&tr, &te] {
            for c in 0..3 {
                let members: Vec<&Vec<f64>> = d
                    .inputs()
                    .iter()
                    .zip(d.labels())
                    .filter(|(_, &l)| l == c)
                    .map(|(x, _)| x)
                    .collect();
                for k in 0..4 {
                    let mean = members.iter().map(|x| x[k]).sum::<f64>() / members.len() as f64;
                    // standard error 1/sqrt(400) = 0.05
                    assert!((mean - 5.0 * dirs[c][k]).abs() < 0.25);
                }
            }
        }
    }

    #[test]
    fn synth_zero_separation_collapses_means() {
        let d = synth_gaussians(2, 3, 2000, 0.0, 1).unwrap();
        for c in 0..2 {
            let xs: Vec<&Vec<f64>> = d
                .inputs()
                .iter()
                .zip(d.labels())
                .filter(|(_, &l)| l == c)
                .map(|(x, _)| x)
                .collect();
            for k in 0..3 {
                let mean = xs.iter().map(|x| x[k]).sum::<f64>() / xs.len() as f64;
                assert!(mean.abs() < 0.12);
            }
        }
    }

    #[test]
    fn synth_rejects_bad_shapes() {
        assert!(synth_gaussians(1, 2, 10, 1.0, 0).is_err());
        assert!(synth_gaussians(2, 1, 10, 1.0, 0).is_err());
    }

    #[test]
    fn subsample_properties() {
        let d = synth_gaussians(2, 2, 20, 1.0, 4).unwrap();
        assert_eq!(subsample(&d, d.len(), 99).unwrap(), d);
        assert_eq!(subsample(&d, 10, 5).unwrap(), subsample(&d, 10, 5).unwrap());
        assert!(matches!(subsample(&d, 0, 1), Err(Error::InvalidInput(_))));
        assert!(subsample(&d, 41, 1).is_err());

        // the sample and its complement partition the ids
        let s = subsample(&d, 15, 3).unwrap();
        let chosen: std::collections::BTreeSet<usize> = s.ids().iter().copied().collect();
        assert_eq!(chosen.len(), 15);
        let rest: Vec<usize> = d.ids().iter().copied().filter(|i| !chosen.contains(i)).collect();
        let rest_d = d.select(&rest).unwrap();
        assert_eq!(rest_d.len() + s.len(), d.len());
        assert!(rest_d.ids().iter().all(|i| !chosen.contains(i)));
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_gaussians(3, 2, 5, 2.0, 1).unwrap();
        let p = dir.path().join("d.csv");
        d.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("label,x0,x1\n"));
        let back = Dataset::read_csv(&p, Some(3)).unwrap();
        assert_eq!(back.inputs(), d.inputs());
        assert_eq!(back.labels(), d.labels());
        assert_eq!(back.fingerprint(), d.fingerprint());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(Dataset::new(vec![vec![f64::NAN]], vec![0], 1, "x").is_err());
    }

    #[test]
    fn round_robin_wraps() {
        assert_eq!(round_robin_positions(5, 0, 2), vec![0, 1]);
        assert_eq!(round_robin_positions(5, 2, 2), vec![4, 0]);
        assert_eq!(round_robin_positions(3, 1, 8), vec![0, 1, 2]);
    }
}
