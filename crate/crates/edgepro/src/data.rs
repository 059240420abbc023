//! Dataset ingestion: IDX image/label files and synthetic Gaussian blobs.

use std::io::Read as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub examples: Vec<(Tensor, usize)>,
    pub num_classes: usize,
    pub input_shape: Vec<usize>,
}

impl Dataset {
    pub fn new(examples: Vec<(Tensor, usize)>, num_classes: usize) -> Result<Dataset> {
        let first = examples
            .first()
            .ok_or_else(|| Error::InvalidParam("dataset must be non-empty".into()))?;
        let input_shape = first.0.shape().to_vec();
        for (i, (x, y)) in examples.iter().enumerate() {
            if x.shape() != input_shape {
                return Err(Error::InvalidParam(format!(
                    "example {} has shape {:?}, expected {:?}",
                    i,
                    x.shape(),
                    input_shape
                )));
            }
            if *y >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: *y,
                    num_classes,
                });
            }
        }
        Ok(Dataset {
            examples,
            num_classes,
            input_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Reinterprets every example under a new shape with the same element
    /// count (e.g. [28, 28] -> [1, 28, 28] for a conv front end).
    pub fn reshape_examples(mut self, shape: Vec<usize>) -> Result<Dataset> {
        let mut examples = Vec::with_capacity(self.examples.len());
        for (x, y) in self.examples.drain(..) {
            examples.push((x.reshape(shape.clone())?, y));
        }
        self.input_shape = shape;
        self.examples = examples;
        Ok(self)
    }

    /// Splits off the first `n` examples into one dataset and the rest into
    /// another.
    pub fn split_at(mut self, n: usize) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.examples.len() {
            return Err(Error::InvalidParam(format!(
                "split point {} outside dataset of {}",
                n,
                self.examples.len()
            )));
        }
        let tail = self.examples.split_off(n);
        let head = self.examples;
        Ok((
            Dataset {
                examples: head,
                num_classes: self.num_classes,
                input_shape: self.input_shape.clone(),
            },
            Dataset {
                examples: tail,
                num_classes: self.num_classes,
                input_shape: self.input_shape,
            },
        ))
    }
}

/// Loads an IDX image file plus its label file. Pixels are scaled to [0, 1]
/// by division by 255; examples keep the [rows, cols] shape. `limit`
/// truncates to the first examples.
pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
    limit: Option<usize>,
) -> Result<Dataset> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;

    let magic = be_u32(&images, 0, images_path)?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(Error::format(
            images_path,
            0,
            format!("bad magic {magic:#010x}, want {IDX_IMAGE_MAGIC:#010x}"),
        ));
    }
    let n_images = be_u32(&images, 4, images_path)? as usize;
    let rows = be_u32(&images, 8, images_path)? as usize;
    let cols = be_u32(&images, 12, images_path)? as usize;
    if rows == 0 || cols == 0 {
        return Err(Error::format(images_path, 8, "zero image dimensions".to_string()));
    }
    let want = 16 + n_images * rows * cols;
    if images.len() != want {
        return Err(Error::format(
            images_path,
            images.len().min(want) as u64,
            format!("payload is {} bytes, header implies {}", images.len() - 16, want - 16),
        ));
    }

    let lmagic = be_u32(&labels, 0, labels_path)?;
    if lmagic != IDX_LABEL_MAGIC {
        return Err(Error::format(
            labels_path,
            0,
            format!("bad magic {lmagic:#010x}, want {IDX_LABEL_MAGIC:#010x}"),
        ));
    }
    let n_labels = be_u32(&labels, 4, labels_path)? as usize;
    if n_labels != n_images {
        return Err(Error::format(
            labels_path,
            4,
            format!("{n_labels} labels for {n_images} images"),
        ));
    }
    if labels.len() != 8 + n_labels {
        return Err(Error::format(
            labels_path,
            labels.len().min(8 + n_labels) as u64,
            format!("payload is {} bytes, header implies {}", labels.len() - 8, n_labels),
        ));
    }

    let take = limit.unwrap_or(n_images).min(n_images);
    if take == 0 {
        return Err(Error::InvalidParam("refusing to load zero examples".into()));
    }
    let px = rows * cols;
    let mut examples = Vec::with_capacity(take);
    let mut max_label = 0usize;
    for i in 0..take {
        let raw = &images[16 + i * px..16 + (i + 1) * px];
        let x = Tensor::from_vec(
            vec![rows, cols],
            raw.iter().map(|&b| b as f64 / 255.0).collect(),
        )?;
        let y = labels[8 + i] as usize;
        max_label = max_label.max(y);
        examples.push((x, y));
    }
    Dataset::new(examples, max_label + 1)
}

/// Writes a dataset back out as an IDX pair (features quantized to bytes,
/// clamped to [0, 1] first). Per-example shapes [r, c], [1, r, c] and [d]
/// are supported; [d] is stored as 1 x d.
pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let (rows, cols) = match data.input_shape.as_slice() {
        [r, c] => (*r, *c),
        [1, r, c] => (*r, *c),
        [d] => (1, *d),
        other => {
            return Err(Error::InvalidParam(format!(
                "cannot export shape {other:?} as IDX"
            )))
        }
    };
    let mut img = Vec::with_capacity(16 + data.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(data.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    let mut lab = Vec::with_capacity(8 + data.len());
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(data.len() as u32).to_be_bytes());
    for (x, y) in &data.examples {
        for &v in x.values() {
            img.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        lab.push(*y as u8);
    }
    std::fs::write(images_path, img)?;
    std::fs::write(labels_path, lab)?;
    Ok(())
}

/// Synthetic Gaussian blobs: class `c` is a unit-variance Gaussian centered
/// at `separation` times a fixed unit direction (axis `c mod dim`, sign
/// flipped on each wrap). Class counts differ by at most one; order is
/// shuffled. Deterministic per seed.
pub fn synth_blobs(
    n: usize,
    num_classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if num_classes < 2 || n < num_classes {
        return Err(Error::InvalidParam(format!(
            "need n >= num_classes >= 2, got n={n}, classes={num_classes}"
        )));
    }
    if dim == 0 {
        return Err(Error::InvalidParam("dim must be positive".into()));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::InvalidParam(format!(
            "separation must be non-negative, got {separation}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut examples = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % num_classes;
        let axis = c % dim;
        let sign = if (c / dim) % 2 == 0 { 1.0 } else { -1.0 };
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        v[axis] += sign * separation;
        examples.push((Tensor::from_vec(vec![dim], v)?, c));
    }
    examples.shuffle(&mut rng);
    Dataset::new(examples, num_classes)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|s| u32::from_be_bytes(s.try_into().unwrap()))
        .ok_or_else(|| Error::format(path, offset as u64, "truncated header".to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(dir: &Path, pixels: &[Vec<u8>], labels: &[u8]) -> (std::path::PathBuf, std::path::PathBuf) {
        let (r, c) = (2, 3);
        let mut img = Vec::new();
        img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
        img.extend_from_slice(&(pixels.len() as u32).to_be_bytes());
        img.extend_from_slice(&(r as u32).to_be_bytes());
        img.extend_from_slice(&(c as u32).to_be_bytes());
        for p in pixels {
            img.extend_from_slice(p);
        }
        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
        lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lab.extend_from_slice(labels);
        let ip = dir.join("img");
        let lp = dir.join("lab");
        std::fs::write(&ip, img).unwrap();
        std::fs::write(&lp, lab).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_load_scales_and_limits() {
        let dir = tempfile::tempdir().unwrap();
        let pix: Vec<Vec<u8>> = (0..5).map(|i| vec![i * 50; 6]).collect();
        let (ip, lp) = idx_pair(dir.path(), &pix, &[0, 1, 2, 1, 0]);
        let all = load_idx(&ip, &lp, None).unwrap();
        assert_eq!(all.len(), 5);
        assert_eq!(all.input_shape, vec![2, 3]);
        assert!(all
            .examples
            .iter()
            .all(|(x, _)| x.values().iter().all(|&v| (0.0..=1.0).contains(&v))));
        assert!((all.examples[4].0.values()[0] - 200.0 / 255.0).abs() < 1e-12);

        let two = load_idx(&ip, &lp, Some(2)).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two.examples[1].1, 1);
    }

    #[test]
    fn idx_rejects_bad_magic_and_mismatches() {
        let dir = tempfile::tempdir().unwrap();
        let pix: Vec<Vec<u8>> = (0..3).map(|_| vec![0; 6]).collect();
        let (ip, lp) = idx_pair(dir.path(), &pix, &[0, 1, 0]);

        let mut broken = std::fs::read(&ip).unwrap();
        broken[3] = 0x99;
        let bp = dir.path().join("badmagic");
        std::fs::write(&bp, &broken).unwrap();
        assert!(matches!(
            load_idx(&bp, &lp, None).unwrap_err(),
            Error::Format { offset: 0, .. }
        ));

        // drop one label: count mismatch reported at the label-count field
        let mut lab = std::fs::read(&lp).unwrap();
        lab.truncate(lab.len() - 1);
        lab[7] = 2;
        let lp2 = dir.path().join("short");
        std::fs::write(&lp2, &lab).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp2, None).unwrap_err(),
            Error::Format { offset: 4, .. }
        ));

        // truncated image payload
        let img = std::fs::read(&ip).unwrap();
        let ip2 = dir.path().join("trunc");
        std::fs::write(&ip2, &img[..img.len() - 2]).unwrap();
        assert!(matches!(
            load_idx(&ip2, &lp, None).unwrap_err(),
            Error::Format { .. }
        ));
    }

    #[test]
    fn idx_round_trip_through_writer() {
        let dir = tempfile::tempdir().unwrap();
        let data = synth_blobs(20, 4, 6, 2.0, 3).unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lab");
        write_idx(&data, &ip, &lp).unwrap();
        let back = load_idx(&ip, &lp, None).unwrap();
        assert_eq!(back.len(), 20);
        assert_eq!(back.input_shape, vec![1, 6]);
        let labels_in: Vec<usize> = data.examples.iter().map(|(_, y)| *y).collect();
        let labels_out: Vec<usize> = back.examples.iter().map(|(_, y)| *y).collect();
        assert_eq!(labels_in, labels_out);
    }

    #[test]
    fn blobs_are_deterministic_and_balanced() {
        let a = synth_blobs(103, 5, 4, 10.0, 9).unwrap();
        let b = synth_blobs(103, 5, 4, 10.0, 9).unwrap();
        assert_eq!(a.examples.len(), b.examples.len());
        for ((xa, ya), (xb, yb)) in a.examples.iter().zip(&b.examples) {
            assert_eq!(xa, xb);
            assert_eq!(ya, yb);
        }
        let mut counts = [0usize; 5];
        for (_, y) in &a.examples {
            counts[*y] += 1;
        }
        assert_eq!(counts.iter().max().unwrap() - counts.iter().min().unwrap(), 1);
        // zero separation is allowed: classes coincide
        assert!(synth_blobs(10, 2, 3, 0.0, 1).is_ok());
        assert!(synth_blobs(1, 2, 3, 1.0, 1).is_err());
    }

    #[test]
    fn separable_blobs_train_a_softmax_probe() {
        let data = synth_blobs(400, 3, 8, 10.0, 17).unwrap();
        let mut net = crate::network::Network::mlp(vec![8], &[], 3, 5);
        for _ in 0..60 {
            for chunk in data.examples.chunks(64) {
                let refs: Vec<&Tensor> = chunk.iter().map(|(x, _)| x).collect();
                let batch = crate::tensor::stack(&refs).unwrap();
                let labels: Vec<usize> = chunk.iter().map(|(_, y)| *y).collect();
                let (_, grads) = net.loss_and_grad(&batch, &labels).unwrap();
                net.sgd_step(&grads, 0.1).unwrap();
            }
        }
        let acc = crate::lock::accuracy_over(&net, &data.examples, None).unwrap();
        assert!(acc >= 0.99, "softmax probe reached {acc}");
    }
}
