//! Class-folder datasets, procedurally generated glyphs, the FSDS file format
//! and episodic n-way k-shot sampling.
//!
//! FSDS layout (little-endian): magic `b"FSDS"`, then `u32` version (1),
//! `n_classes`, `per_class`, `height`, `width`, then
//! `n_classes·per_class` images of `height·width` bytes in class-major order.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const FSDS_MAGIC: [u8; 4] = *b"FSDS";
pub const FSDS_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Images of one class, stored as bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageClass {
    pub id: usize,
    pub images: Vec<Vec<u8>>,
}

/// Single-channel images grouped by class. Pixels are stored as bytes and
/// read as `byte / 255` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDataset {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<ImageClass>,
}

impl ClassDataset {
    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn pixel(&self, class: usize, image: usize, idx: usize) -> f64 {
        self.classes[class].images[image][idx] as f64 / 255.0
    }

    /// Stacks `(class index, image index)` pairs into `[n, 1, h, w]`.
    pub fn stack(&self, items: &[(usize, usize)]) -> Tensor {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(items.len() * plane);
        for &(c, i) in items {
            data.extend(self.classes[c].images[i].iter().map(|&b| b as f64 / 255.0));
        }
        Tensor::new(vec![items.len(), 1, self.height, self.width], data)
            .expect("images have uniform size")
    }

    pub fn to_fsds_bytes(&self) -> Result<Vec<u8>> {
        let per_class = self.classes.first().map_or(0, |c| c.images.len());
        let plane = self.height * self.width;
        for c in &self.classes {
            if c.images.len() != per_class {
                return Err(Error::CountMismatch(format!(
                    "class {} has {} images, expected {per_class}",
                    c.id,
                    c.images.len()
                )));
            }
            if let Some(img) = c.images.iter().find(|i| i.len() != plane) {
                return Err(Error::CountMismatch(format!(
                    "image of {} pixels in a {}x{} dataset",
                    img.len(),
                    self.height,
                    self.width
                )));
            }
        }
        let mut out = Vec::with_capacity(HEADER_LEN + self.classes.len() * per_class * plane);
        out.extend_from_slice(&FSDS_MAGIC);
        for v in [
            FSDS_VERSION,
            self.classes.len() as u32,
            per_class as u32,
            self.height as u32,
            self.width as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.classes {
            for img in &c.images {
                out.extend_from_slice(img);
            }
        }
        Ok(out)
    }

    pub fn from_fsds_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || bytes[..4] != FSDS_MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated {
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != FSDS_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FSDS_VERSION,
            });
        }
        let (n_classes, per_class, height, width) =
            (word(1) as usize, word(2) as usize, word(3) as usize, word(4) as usize);
        let plane = height * width;
        let expected = n_classes
            .checked_mul(per_class)
            .and_then(|n| n.checked_mul(plane))
            .and_then(|n| n.checked_add(HEADER_LEN))
            .ok_or_else(|| Error::CountMismatch("header sizes overflow".into()))?;
        if bytes.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(Error::CountMismatch(format!(
                "header describes {expected} bytes but file has {}",
                bytes.len()
            )));
        }
        let mut pixels = bytes[HEADER_LEN..].chunks(plane.max(1));
        let classes = (0..n_classes)
            .map(|id| ImageClass {
                id,
                images: (0..per_class)
                    .map(|_| pixels.next().map_or_else(Vec::new, <[u8]>::to_vec))
                    .collect(),
            })
            .collect();
        Ok(ClassDataset {
            height,
            width,
            classes,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_fsds_bytes()?).map_err(|e| Error::io(path, e))
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<ClassDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    ClassDataset::from_fsds_bytes(&bytes)
}

type Point = (f64, f64);

/// A glyph template: polylines in unit coordinates.
fn glyph_template<R: Rng>(rng: &mut R) -> Vec<Vec<Point>> {
    let n = rng.gen_range(3..=6);
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.5) {
                vec![
                    (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)),
                    (rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)),
                ]
            } else {
                let (cx, cy) = (rng.gen_range(0.3..0.7), rng.gen_range(0.3..0.7));
                let r = rng.gen_range(0.15..0.35);
                let start = rng.gen_range(0.0..2.0 * PI);
                let sweep = rng.gen_range(0.5 * PI..1.5 * PI);
                (0..=8)
                    .map(|k| {
                        let a = start + sweep * k as f64 / 8.0;
                        (cx + r * a.cos(), cy + r * a.sin())
                    })
                    .collect()
            }
        })
        .collect()
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// Renders a jittered copy of `template`: rotation up to ±15° about the
/// centre, translation up to ±10% of the side, additive N(0, 0.05²) noise.
fn render<R: Rng>(template: &[Vec<Point>], size: usize, rng: &mut R) -> Vec<u8> {
    let angle = rng.gen_range(-15.0f64..15.0).to_radians();
    let (tx, ty) = (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1));
    let (s, c) = angle.sin_cos();
    let warp = |(x, y): Point| {
        let (x, y) = (x - 0.5, y - 0.5);
        (c * x - s * y + 0.5 + tx, s * x + c * y + 0.5 + ty)
    };
    let strokes: Vec<Vec<Point>> = template
        .iter()
        .map(|line| line.iter().map(|&p| warp(p)).collect())
        .collect();
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut img = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let p = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let d = strokes
                .iter()
                .flat_map(|line| line.windows(2).map(|w| segment_distance(p, w[0], w[1])))
                .fold(f64::INFINITY, f64::min)
                * size as f64;
            // about one pixel of solid stroke with a one-pixel soft edge
            let ink = (1.5 - d).clamp(0.0, 1.0);
            let v = (ink + noise.sample(rng)).clamp(0.0, 1.0);
            img.push((v * 255.0).round() as u8);
        }
    }
    img
}

/// A dataset of `n_classes` random stroke glyphs with `per_class` jittered
/// samples each, fully determined by `seed`.
pub fn generate_synthetic_glyphs(seed: u64, n_classes: usize, per_class: usize, size: usize) -> Result<ClassDataset> {
    if size < 8 {
        return Err(Error::Config(format!("glyph size {size} < 8")));
    }
    if per_class < 2 {
        return Err(Error::Config(format!("per_class {per_class} < 2")));
    }
    let classes = (0..n_classes)
        .map(|id| {
            let template = glyph_template(&mut rng::stream(seed, "glyph-template", id as u64));
            let images = (0..per_class)
                .map(|i| {
                    let mut r = rng::stream(seed, "glyph-sample", (id * per_class + i) as u64);
                    render(&template, size, &mut r)
                })
                .collect();
            ImageClass { id, images }
        })
        .collect();
    Ok(ClassDataset {
        height: size,
        width: size,
        classes,
    })
}

/// Meta-train and meta-test datasets with disjoint classes.
#[derive(Debug, Clone)]
pub struct FewShotSuite {
    pub meta_train: ClassDataset,
    pub meta_test: ClassDataset,
}

impl FewShotSuite {
    /// The first `n_train` classes train, the rest test.
    pub fn split(dataset: ClassDataset, n_train: usize) -> Result<Self> {
        if n_train == 0 || n_train >= dataset.n_classes() {
            return Err(Error::Config(format!(
                "cannot split {} classes at {n_train}",
                dataset.n_classes()
            )));
        }
        let mut classes = dataset.classes;
        let test = classes.split_off(n_train);
        Ok(FewShotSuite {
            meta_train: ClassDataset {
                height: dataset.height,
                width: dataset.width,
                classes,
            },
            meta_test: ClassDataset {
                height: dataset.height,
                width: dataset.width,
                classes: test,
            },
        })
    }

    /// The default desk-scale glyph suite: 16×16 images, 80 meta-train and
    /// 20 meta-test classes, 20 images per class.
    pub fn synthetic(seed: u64) -> Result<Self> {
        Self::split(generate_synthetic_glyphs(seed, 100, 20, 16)?, 80)
    }
}

/// Images with episode-local labels, plus where each image came from.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch {
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// `(class id, image index)` of each row.
    pub sources: Vec<(usize, usize)>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows picked by index, in order.
    pub fn select(&self, rows: &[usize]) -> LabeledBatch {
        LabeledBatch {
            images: self.images.select_rows(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            sources: rows.iter().map(|&r| self.sources[r]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub n_way: usize,
    pub k_shot: usize,
    pub support: LabeledBatch,
    pub query: LabeledBatch,
}

/// Samples `n_way` classes without replacement, then `k_shot + query_per_class`
/// distinct images of each; class labels are a random permutation of
/// `0..n_way`.
pub fn sample_episode<R: Rng + ?Sized>(
    dataset: &ClassDataset,
    n_way: usize,
    k_shot: usize,
    query_per_class: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n_way == 0 || k_shot == 0 {
        return Err(Error::Config("n_way and k_shot must be >= 1".into()));
    }
    if dataset.n_classes() < n_way {
        return Err(Error::InsufficientData(format!(
            "{n_way}-way episode from {} classes",
            dataset.n_classes()
        )));
    }
    let need = k_shot + query_per_class;
    let classes = index::sample(rng, dataset.n_classes(), n_way).into_vec();
    let mut labels: Vec<usize> = (0..n_way).collect();
    labels.shuffle(rng);
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * query_per_class);
    let mut support_labels = Vec::new();
    let mut query_labels = Vec::new();
    for (&c, &label) in classes.iter().zip(&labels) {
        let available = dataset.classes[c].images.len();
        if available < need {
            return Err(Error::InsufficientData(format!(
                "class {} has {available} images, episode needs {need}",
                dataset.classes[c].id
            )));
        }
        let picks = index::sample(rng, available, need).into_vec();
        for (j, &i) in picks.iter().enumerate() {
            if j < k_shot {
                support.push((c, i));
                support_labels.push(label);
            } else {
                query.push((c, i));
                query_labels.push(label);
            }
        }
    }
    let batch = |items: Vec<(usize, usize)>, labels: Vec<usize>| LabeledBatch {
        images: dataset.stack(&items),
        sources: items.iter().map(|&(c, i)| (dataset.classes[c].id, i)).collect(),
        labels,
    };
    Ok(Episode {
        n_way,
        k_shot,
        support: batch(support, support_labels),
        query: batch(query, query_labels),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::HashSet;

    #[test]
    fn generation_is_deterministic_and_in_range() {
        let a = generate_synthetic_glyphs(3, 4, 3, 12).unwrap();
        let b = generate_synthetic_glyphs(3, 4, 3, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic_glyphs(4, 4, 3, 12).unwrap());
        assert_eq!(a.classes[0].images[0].len(), 144);
        let ink: u32 = a.classes[0].images[0].iter().map(|&p| p as u32).sum();
        assert!(ink > 0);
    }

    #[test]
    fn generation_rejects_tiny_sizes() {
        assert!(generate_synthetic_glyphs(0, 2, 2, 7).is_err());
        assert!(generate_synthetic_glyphs(0, 2, 1, 8).is_err());
    }

    #[test]
    fn single_class_dataset_cannot_make_two_way_episodes() {
        let ds = generate_synthetic_glyphs(1, 1, 4, 8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        assert!(sample_episode(&ds, 1, 1, 1, &mut rng).is_ok());
        assert!(matches!(
            sample_episode(&ds, 2, 1, 1, &mut rng),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn episode_shapes_and_disjointness() {
        let ds = generate_synthetic_glyphs(5, 10, 20, 8).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let ep = sample_episode(&ds, 5, 1, 15, &mut rng).unwrap();
        assert_eq!(ep.support.len(), 5);
        assert_eq!(ep.query.len(), 75);
        assert_eq!(ep.support.images.shape(), &[5, 1, 8, 8]);
        let s: HashSet<_> = ep.support.sources.iter().collect();
        assert!(ep.query.sources.iter().all(|q| !s.contains(q)));
        let mut labels = ep.support.labels.clone();
        labels.sort();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
        assert!(matches!(
            sample_episode(&ds, 5, 10, 15, &mut rng),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn fsds_errors_are_distinct() {
        let ds = generate_synthetic_glyphs(2, 3, 2, 8).unwrap();
        let bytes = ds.to_fsds_bytes().unwrap();
        assert_eq!(ClassDataset::from_fsds_bytes(&bytes).unwrap(), ds);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(ClassDataset::from_fsds_bytes(&bad), Err(Error::BadMagic)));

        assert!(matches!(
            ClassDataset::from_fsds_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            ClassDataset::from_fsds_bytes(&bytes[..10]),
            Err(Error::Truncated { .. })
        ));

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(ClassDataset::from_fsds_bytes(&long), Err(Error::CountMismatch(_))));

        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(
            ClassDataset::from_fsds_bytes(&v2),
            Err(Error::VersionMismatch { found: 2, expected: 1 })
        ));
    }
}
