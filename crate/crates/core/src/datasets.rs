//! Dataset ingestion, synthetic data generation, class merging, and episodic
//! N-way K-shot sampling.

use crate::error::{Error, Result};
use ndarray::{s, Array4};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// An image classification dataset. Images are float HWC in [0, 1].
#[derive(Clone)]
pub struct Dataset {
    pub images: Array4<f64>, // (n, H, W, C)
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    /// Sub-category / original ids surviving class merges, for clustering
    /// probes. Same length as `labels` when present.
    pub fine_labels: Option<Vec<usize>>,
    pub image_size: (usize, usize),
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[3]
    }

    /// Indices grouped per class.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// New dataset restricted to the given classes, relabeled densely in the
    /// order given.
    pub fn select_classes(&self, ids: &[usize]) -> Result<Dataset> {
        for &id in ids {
            if id >= self.num_classes() {
                return Err(Error::Data(format!("select_classes: unknown class {id}")));
            }
        }
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| ids.contains(&self.labels[i]))
            .collect();
        let (h, w, c) = (self.images.shape()[1], self.images.shape()[2], self.images.shape()[3]);
        let mut images = Array4::<f64>::zeros((keep.len(), h, w, c));
        let mut labels = Vec::with_capacity(keep.len());
        let mut fine = self.fine_labels.as_ref().map(|_| Vec::with_capacity(keep.len()));
        for (j, &i) in keep.iter().enumerate() {
            images.slice_mut(s![j, .., .., ..]).assign(&self.images.slice(s![i, .., .., ..]));
            labels.push(ids.iter().position(|&x| x == self.labels[i]).unwrap());
            if let (Some(f), Some(src)) = (fine.as_mut(), self.fine_labels.as_ref()) {
                f.push(src[i]);
            }
        }
        Ok(Dataset {
            images,
            labels,
            class_names: ids.iter().map(|&i| self.class_names[i].clone()).collect(),
            fine_labels: fine,
            image_size: self.image_size,
        })
    }

    /// Re-key the dataset by its fine sub-category labels, turning each
    /// sub-category into a class of its own. Fails when no fine labels exist.
    pub fn by_fine_labels(&self) -> Result<Dataset> {
        let fine = self
            .fine_labels
            .as_ref()
            .ok_or_else(|| Error::Data("dataset carries no fine labels".into()))?;
        let mut ids: Vec<usize> = fine.clone();
        ids.sort_unstable();
        ids.dedup();
        let labels: Vec<usize> = fine
            .iter()
            .map(|f| ids.binary_search(f).expect("fine id present"))
            .collect();
        Ok(Dataset {
            images: self.images.clone(),
            labels,
            class_names: ids.iter().map(|i| format!("fine_{i}")).collect(),
            fine_labels: Some(fine.clone()),
            image_size: self.image_size,
        })
    }
}

/// One N-way K-shot task.
#[derive(Clone, Debug)]
pub struct Episode {
    pub support_images: Array4<f64>,
    pub support_labels: Vec<usize>,
    pub query_images: Array4<f64>,
    pub query_labels: Vec<usize>,
    /// episode-local id -> global class id
    pub class_map: Vec<usize>,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
}

impl Episode {
    pub fn n_way(&self) -> usize {
        self.class_map.len()
    }
}

/// Parameters of the synthetic fine-grained generator.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_coarse_classes: usize,
    pub subcats_per_class: usize,
    pub samples_per_subcat: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub seed: u64,
    /// When true (default) each sub-category keeps a fixed hue and stripe
    /// frequency, making sub-categories separable in pixel statistics. When
    /// false, hue is drawn per image so color is a nuisance variable and only
    /// shape identifies the class.
    #[serde(default = "default_true")]
    pub hue_by_subcat: bool,
}

fn default_true() -> bool {
    true
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config("synthetic: image_size must be >= 16".into()));
        }
        if self.num_coarse_classes < 1 || self.subcats_per_class < 1 || self.samples_per_subcat < 1
        {
            return Err(Error::Config("synthetic: all counts must be >= 1".into()));
        }
        Ok(())
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = (h.fract() + 1.0).fract() * 6.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

const NUM_SHAPES: usize = 18;

/// Signed membership of a pixel (unit square coords relative to center,
/// already scaled by 1/radius) in a shape family.
fn shape_mask(kind: usize, dx: f64, dy: f64) -> bool {
    let r = (dx * dx + dy * dy).sqrt();
    match kind % NUM_SHAPES {
        0 => dx.abs() < 0.82 && dy.abs() < 0.82,          // square (area-matched-ish)
        1 => r < 1.0 && r > 0.55,                         // ring
        2 => dx.abs() < 1.0 && dy.abs() < dx.abs() * 0.55, // bowtie
        3 => dx.abs() < 1.0 && (dy.abs() < 0.22 || (dy.abs() - 0.62).abs() < 0.16), // h-bars
        4 => {
            // three dots in a row
            ((dx - 0.66).powi(2) + dy * dy) < 0.09
                || (dx * dx + dy * dy) < 0.09
                || ((dx + 0.66).powi(2) + dy * dy) < 0.09
        }
        5 => dx.abs() < 0.9 && dy.abs() < 0.9 && (dx > 0.0) == (dy > 0.0), // checker pair
        6 => (dx - dy).abs() < 0.3 || (dx + dy).abs() < 0.3, // X
        7 => dx * dx + (dy / 0.45).powi(2) < 1.0,         // wide ellipse
        8 => (dy > -0.85 && dy < -0.3 && dx.abs() < 0.95)
            || (dx.abs() < 0.26 && (-0.3..0.9).contains(&dy)), // T shape
        9 => r < 1.0 && dy < 0.0,                         // half-disk
        10 => {
            // two dots
            ((dx - 0.5).powi(2) + dy * dy) < 0.16 || ((dx + 0.5).powi(2) + dy * dy) < 0.16
        }
        11 => dx.abs() < 0.9 && dy.abs() < 0.9 && (dx < -0.3 || dy > 0.3), // thick L
        12 => r < 0.35 || (r < 1.0 && r > 0.7),           // dotted ring
        13 => r < 1.0,                                    // disk
        14 => dy > -0.75 && dy < 0.85 && dx.abs() < (0.85 - dy) * 0.62, // triangle
        15 => (dx.abs() < 0.3 && dy.abs() < 1.0) || (dy.abs() < 0.3 && dx.abs() < 1.0), // plus
        16 => dx.abs() < 0.95 && dy.abs() < 0.95 && (dx.abs() > 0.55 || dy.abs() > 0.55), // frame
        _ => r < 1.0 && ((dx - 0.45).powi(2) + dy * dy).sqrt() > 0.75, // crescent
    }
}

/// Per-shape radius multiplier equalizing mask area across shape kinds, so a
/// class never stands out by how many pixels it covers.
fn area_scales() -> [f64; NUM_SHAPES] {
    let mut scales = [1.0f64; NUM_SHAPES];
    let n = 160;
    for (kind, s) in scales.iter_mut().enumerate() {
        let mut hits = 0usize;
        for i in 0..n {
            for j in 0..n {
                let dx = (i as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                let dy = (j as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                if shape_mask(kind, dx, dy) {
                    hits += 1;
                }
            }
        }
        let frac = hits as f64 / (n * n) as f64;
        *s = (0.5 / frac).sqrt().clamp(0.75, 1.35);
    }
    scales
}

/// Deterministic synthetic dataset: `num_coarse_classes` shape families, each
/// a union of `subcats_per_class` sub-generators distinguished by hue and
/// stripe frequency. Labels are coarse; sub-category ids go to `fine_labels`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sz = spec.image_size;
    let n = spec.num_coarse_classes * spec.subcats_per_class * spec.samples_per_subcat;
    let mut images = Array4::<f64>::zeros((n, sz, sz, 3));
    let mut labels = Vec::with_capacity(n);
    let mut fine = Vec::with_capacity(n);

    let scales = area_scales();
    let mut idx = 0usize;
    for coarse in 0..spec.num_coarse_classes {
        for sub in 0..spec.subcats_per_class {
            let global_sub = coarse * spec.subcats_per_class + sub;
            // golden-angle hue spacing keeps all sub-category hues distinct
            let sub_hue = (global_sub as f64) * 0.381_966_011;
            let stripe_freq = 2.0 + 2.0 * (sub % 3) as f64;
            for _ in 0..spec.samples_per_subcat {
                // pose parameters
                let cx = sz as f64 * (0.5 + 0.04 * (rng.gen::<f64>() - 0.5) * 2.0);
                let cy = sz as f64 * (0.5 + 0.04 * (rng.gen::<f64>() - 0.5) * 2.0);
                let radius = (sz as f64 * (0.32 + 0.10 * rng.gen::<f64>())
                    * scales[coarse % NUM_SHAPES])
                    .min(0.45 * sz as f64);
                let hue = if spec.hue_by_subcat {
                    sub_hue
                } else {
                    rng.gen::<f64>()
                };
                // saturation/value jitter keeps pooled color statistics from
                // identifying the class: shapes differ in mask area, so a
                // fixed intensity would leak class identity to any encoder
                // that only averages pixels
                let sat = 0.65 + 0.3 * rng.gen::<f64>();
                let val = 0.7 + 0.3 * rng.gen::<f64>();
                let rgb = hsv_to_rgb(hue, sat, val);
                let bg = 0.4 + 0.2 * (rng.gen::<f64>() - 0.5);
                // random background shading direction: adds pooled-statistic
                // variance that masks residual class signal without touching
                // the shape itself
                let grad_phi = rng.gen::<f64>() * std::f64::consts::TAU;
                let (gp_s, gp_c) = grad_phi.sin_cos();
                let grad_amp = 0.15 * rng.gen::<f64>();
                // background clutter: small random-colored disks that carry
                // no class information but dominate untrained pooled features
                let n_blobs = rng.gen_range(3..=6usize);
                let blobs: Vec<(f64, f64, f64, [f64; 3])> = (0..n_blobs)
                    .map(|_| {
                        // confined to the margins and kept dim so they never
                        // read as the (bright, centered) class shape
                        let side = rng.gen::<f64>() * sz as f64;
                        let edge = if rng.gen::<bool>() {
                            0.10 * sz as f64 * rng.gen::<f64>()
                        } else {
                            sz as f64 * (1.0 - 0.10 * rng.gen::<f64>())
                        };
                        let (bx, by) =
                            if rng.gen::<bool>() { (side, edge) } else { (edge, side) };
                        let br = (0.05 + 0.08 * rng.gen::<f64>()) * sz as f64;
                        let col = hsv_to_rgb(
                            rng.gen::<f64>(),
                            0.3 + 0.4 * rng.gen::<f64>(),
                            0.25 + 0.4 * rng.gen::<f64>(),
                        );
                        (bx, by, br, col)
                    })
                    .collect();
                let phase = rng.gen::<f64>() * std::f64::consts::TAU;
                // random in-plane rotation of the shape mask: edge
                // orientations carry no class information, only the shape
                // itself does
                let angle = rng.gen::<f64>() * std::f64::consts::TAU;
                // per-image noise level: high-frequency energy then varies
                // image-to-image rather than tracking shape edge density
                let noise_amp = spec.noise_std * (0.5 + 1.5 * rng.gen::<f64>());
                let (sa, ca) = angle.sin_cos();
                for y in 0..sz {
                    for x in 0..sz {
                        let rx = (x as f64 - cx) / radius;
                        let ry = (y as f64 - cy) / radius;
                        let dx = ca * rx + sa * ry;
                        let dy = -sa * rx + ca * ry;
                        let inside = shape_mask(coarse, dx, dy);
                        let stripes = if spec.hue_by_subcat {
                            0.8 + 0.2
                                * (stripe_freq * dy * std::f64::consts::PI + phase).sin().signum()
                        } else {
                            1.0
                        };
                        let shade = grad_amp
                            * ((x as f64 / sz as f64 - 0.5) * gp_c
                                + (y as f64 / sz as f64 - 0.5) * gp_s);
                        let blob = blobs.iter().find(|(bx, by, br, _)| {
                            let ddx = x as f64 - bx;
                            let ddy = y as f64 - by;
                            ddx * ddx + ddy * ddy < br * br
                        });
                        for ch in 0..3 {
                            let base = if inside {
                                rgb[ch] * stripes
                            } else if let Some((_, _, _, col)) = blob {
                                col[ch]
                            } else {
                                bg + shade
                            };
                            let noise = if spec.noise_std > 0.0 {
                                noise_amp * (rng.gen::<f64>() - 0.5) * 2.0
                            } else {
                                0.0
                            };
                            images[[idx, y, x, ch]] = (base + noise).clamp(0.0, 1.0);
                        }
                    }
                }
                labels.push(coarse);
                fine.push(global_sub);
                idx += 1;
            }
        }
    }

    Ok(Dataset {
        images,
        labels,
        class_names: (0..spec.num_coarse_classes).map(|c| format!("shape_{c}")).collect(),
        fine_labels: Some(fine),
        image_size: (sz, sz),
    })
}

/// Relabel the listed classes as a single class. Remaining classes are
/// re-indexed densely; the merged class sits at the position of the smallest
/// merged id. Original labels are preserved in `fine_labels` if not already
/// set.
pub fn merge_classes(d: &Dataset, ids: &[usize], new_name: &str) -> Result<Dataset> {
    if ids.is_empty() {
        return Err(Error::Data("merge_classes: empty id list".into()));
    }
    let mut seen = std::collections::HashSet::new();
    for &id in ids {
        if id >= d.num_classes() {
            return Err(Error::Data(format!("merge_classes: unknown class {id}")));
        }
        if !seen.insert(id) {
            return Err(Error::Data(format!("merge_classes: duplicate id {id}")));
        }
    }
    let target = *ids.iter().min().unwrap();
    // old id -> new id
    let mut mapping = vec![0usize; d.num_classes()];
    let mut names = Vec::new();
    for old in 0..d.num_classes() {
        if ids.contains(&old) && old != target {
            continue;
        }
        mapping[old] = names.len();
        names.push(if old == target {
            new_name.to_string()
        } else {
            d.class_names[old].clone()
        });
    }
    for &id in ids {
        mapping[id] = mapping[target];
    }
    let labels: Vec<usize> = d.labels.iter().map(|&l| mapping[l]).collect();
    let fine = d
        .fine_labels
        .clone()
        .unwrap_or_else(|| d.labels.clone());
    Ok(Dataset {
        images: d.images.clone(),
        labels,
        class_names: names,
        fine_labels: Some(fine),
        image_size: d.image_size,
    })
}

/// Load `root/<class_name>/<image files>` into a dataset, resizing every
/// image to `image_size` and scaling to [0, 1]. Undecodable files are skipped
/// with a warning.
pub fn load_image_folder(root: &Path, image_size: usize) -> Result<Dataset> {
    if !root.is_dir() {
        return Err(Error::Config(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let mut class_dirs: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.path())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::Data("no classes found".into()));
    }

    let mut decoded: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut class_names = Vec::new();
    for (ci, dir) in class_dirs.iter().enumerate() {
        let name = dir.file_name().unwrap().to_string_lossy().to_string();
        let mut count = 0usize;
        let mut files: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            match image::open(&f) {
                Ok(img) => {
                    let img = img
                        .resize_exact(
                            image_size as u32,
                            image_size as u32,
                            image::imageops::FilterType::Triangle,
                        )
                        .to_rgb8();
                    let px: Vec<f64> =
                        img.pixels().flat_map(|p| p.0).map(|v| v as f64 / 255.0).collect();
                    decoded.push((px, ci));
                    count += 1;
                }
                Err(e) => log::warn!("skipping undecodable file {}: {e}", f.display()),
            }
        }
        if count == 0 {
            return Err(Error::Data(format!("class '{name}' has no decodable images")));
        }
        class_names.push(name);
    }

    let n = decoded.len();
    let mut images = Array4::<f64>::zeros((n, image_size, image_size, 3));
    let mut labels = Vec::with_capacity(n);
    for (i, (px, l)) in decoded.into_iter().enumerate() {
        for y in 0..image_size {
            for x in 0..image_size {
                for c in 0..3 {
                    images[[i, y, x, c]] = px[(y * image_size + x) * 3 + c];
                }
            }
        }
        labels.push(l);
    }
    Ok(Dataset {
        images,
        labels,
        class_names,
        fine_labels: None,
        image_size: (image_size, image_size),
    })
}

/// Sample one N-way K-shot episode with `m_per_class` queries per class.
/// Sampling is without replacement within the episode.
pub fn sample_episode(
    d: &Dataset,
    n_way: usize,
    k_shot: usize,
    m_per_class: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Episode> {
    if d.num_classes() < n_way {
        return Err(Error::Data(format!(
            "episode needs {n_way} classes, dataset has {}",
            d.num_classes()
        )));
    }
    let per_class = d.class_indices();
    let need = k_shot + m_per_class;
    for (c, idxs) in per_class.iter().enumerate() {
        if idxs.len() < need && idxs.len() > 0 {
            // only fatal if the class gets sampled; checked again below
            log::debug!("class {c} has only {} images (< {need})", idxs.len());
        }
    }
    let mut classes: Vec<usize> = (0..d.num_classes()).collect();
    classes.shuffle(rng);
    let chosen: Vec<usize> = classes.into_iter().take(n_way).collect();

    let (h, w, c) = (d.images.shape()[1], d.images.shape()[2], d.images.shape()[3]);
    let mut support_images = Array4::<f64>::zeros((n_way * k_shot, h, w, c));
    let mut query_images = Array4::<f64>::zeros((n_way * m_per_class, h, w, c));
    let mut support_labels = Vec::new();
    let mut query_labels = Vec::new();
    let mut support_indices = Vec::new();
    let mut query_indices = Vec::new();

    for (local, &global) in chosen.iter().enumerate() {
        let mut idxs = per_class[global].clone();
        if idxs.len() < need {
            return Err(Error::Data(format!(
                "class {global} has {} images, episode needs {need}",
                idxs.len()
            )));
        }
        idxs.shuffle(rng);
        for k in 0..k_shot {
            let i = idxs[k];
            support_images
                .slice_mut(s![local * k_shot + k, .., .., ..])
                .assign(&d.images.slice(s![i, .., .., ..]));
            support_labels.push(local);
            support_indices.push(i);
        }
        for m in 0..m_per_class {
            let i = idxs[k_shot + m];
            query_images
                .slice_mut(s![local * m_per_class + m, .., .., ..])
                .assign(&d.images.slice(s![i, .., .., ..]));
            query_labels.push(local);
            query_indices.push(i);
        }
    }

    Ok(Episode {
        support_images,
        support_labels,
        query_images,
        query_labels,
        class_map: chosen,
        support_indices,
        query_indices,
    })
}

/// HWC [0,1] batch -> BCHW tensor layout used by the networks.
pub fn to_bchw(images: &Array4<f64>) -> ndarray::Array4<f64> {
    let (n, h, w, c) = images.dim();
    let mut out = Array4::<f64>::zeros((n, c, h, w));
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[[i, ch, y, x]] = images[[i, y, x, ch]];
                }
            }
        }
    }
    out
}
